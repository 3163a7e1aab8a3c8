#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <random>

#include "hype/autodiff.hpp"

using namespace hype;
using ad::Tape;
using ad::Var;

namespace {

Matrix random_matrix(std::mt19937_64& rng, std::size_t r, std::size_t c, double scale = 1.0) {
    std::normal_distribution<double> normal(0.0, scale);
    Matrix m(r, c);
    for (auto& x : m.data) x = normal(rng);
    return m;
}

using Graph = std::function<Var(Tape&, const std::vector<Var>&)>;

// Contract the op output with fixed random weights so every output entry
// contributes a distinct coefficient to the scalar.
double evaluate(const Graph& f, const std::vector<Matrix>& inputs, const Matrix& weights,
                std::vector<Matrix>* grads) {
    Tape t;
    std::vector<Var> leaves;
    for (const auto& m : inputs) leaves.push_back(t.leaf(m));
    const Var out = f(t, leaves);
    const Var w = t.constant(weights.same_shape(t.value(out)) ? weights : Matrix(t.value(out).rows, t.value(out).cols, 1.0));
    const Var s = ad::sum(t, ad::mul(t, out, w));
    if (grads) {
        t.backward(s);
        grads->clear();
        for (Var l : leaves) grads->push_back(t.grad(l));
    }
    return t.value(s).data[0];
}

void expect_matches_finite_differences(const Graph& f, std::vector<Matrix> inputs, std::uint64_t seed,
                                       double tol = 1e-7) {
    std::mt19937_64 rng(seed);
    Tape probe;
    std::vector<Var> leaves;
    for (const auto& m : inputs) leaves.push_back(probe.leaf(m));
    const Matrix& shape = probe.value(f(probe, leaves));
    const Matrix weights = random_matrix(rng, shape.rows, shape.cols);

    std::vector<Matrix> grads;
    evaluate(f, inputs, weights, &grads);
    const double h = 1e-6;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        for (std::size_t i = 0; i < inputs[k].size(); ++i) {
            const double x0 = inputs[k].data[i];
            inputs[k].data[i] = x0 + h;
            const double up = evaluate(f, inputs, weights, nullptr);
            inputs[k].data[i] = x0 - h;
            const double down = evaluate(f, inputs, weights, nullptr);
            inputs[k].data[i] = x0;
            const double fd = (up - down) / (2.0 * h);
            EXPECT_NEAR(grads[k].data[i], fd, tol * std::max(1.0, std::abs(fd))) << "input " << k << " entry " << i;
        }
    }
}

}  // namespace

TEST(Autodiff, Matmul) {
    std::mt19937_64 rng(1);
    expect_matches_finite_differences([](Tape& t, const auto& v) { return ad::matmul(t, v[0], v[1]); },
                                      {random_matrix(rng, 3, 4), random_matrix(rng, 4, 2)}, 2);
    expect_matches_finite_differences([](Tape& t, const auto& v) { return ad::matmul_nt(t, v[0], v[1]); },
                                      {random_matrix(rng, 3, 4), random_matrix(rng, 5, 4)}, 3);
}

TEST(Autodiff, ShapeOps) {
    std::mt19937_64 rng(4);
    expect_matches_finite_differences([](Tape& t, const auto& v) { return ad::transpose(t, v[0]); },
                                      {random_matrix(rng, 3, 2)}, 5);
    expect_matches_finite_differences([](Tape& t, const auto& v) { return ad::reshape(t, v[0], 2, 3); },
                                      {random_matrix(rng, 3, 2)}, 6);
    expect_matches_finite_differences([](Tape& t, const auto& v) { return ad::concat_cols(t, v[0], v[1]); },
                                      {random_matrix(rng, 3, 2), random_matrix(rng, 3, 4)}, 7);
    expect_matches_finite_differences([](Tape& t, const auto& v) { return ad::outer(t, v[0], v[1]); },
                                      {random_matrix(rng, 3, 1), random_matrix(rng, 1, 4)}, 8);
}

TEST(Autodiff, Elementwise) {
    std::mt19937_64 rng(9);
    expect_matches_finite_differences([](Tape& t, const auto& v) { return ad::add(t, v[0], v[1]); },
                                      {random_matrix(rng, 2, 3), random_matrix(rng, 2, 3)}, 10);
    expect_matches_finite_differences([](Tape& t, const auto& v) { return ad::mul(t, v[0], v[1]); },
                                      {random_matrix(rng, 2, 3), random_matrix(rng, 2, 3)}, 11);
    expect_matches_finite_differences([](Tape& t, const auto& v) { return ad::scale(t, v[0], -1.7); },
                                      {random_matrix(rng, 2, 3)}, 12);
    expect_matches_finite_differences([](Tape& t, const auto& v) { return ad::scale_by(t, v[0], v[1]); },
                                      {random_matrix(rng, 2, 3), random_matrix(rng, 1, 1)}, 13);
    expect_matches_finite_differences([](Tape& t, const auto& v) { return ad::tanh(t, v[0]); },
                                      {random_matrix(rng, 2, 3)}, 14);
    expect_matches_finite_differences([](Tape& t, const auto& v) { return ad::sigmoid(t, v[0]); },
                                      {random_matrix(rng, 2, 3)}, 15);
}

TEST(Autodiff, Broadcasts) {
    std::mt19937_64 rng(16);
    expect_matches_finite_differences([](Tape& t, const auto& v) { return ad::add_row_bias(t, v[0], v[1]); },
                                      {random_matrix(rng, 4, 3), random_matrix(rng, 1, 3)}, 17);
    expect_matches_finite_differences([](Tape& t, const auto& v) { return ad::row_scale(t, v[0], v[1]); },
                                      {random_matrix(rng, 4, 3), random_matrix(rng, 4, 1)}, 18);
}

TEST(Autodiff, GatherScatter) {
    std::mt19937_64 rng(19);
    expect_matches_finite_differences([](Tape& t, const auto& v) { return ad::gather_rows(t, v[0], {2, 0, 2, 1}); },
                                      {random_matrix(rng, 3, 2)}, 20);
    expect_matches_finite_differences(
        [](Tape& t, const auto& v) { return ad::scatter_add_rows(t, v[0], {1, 1, 0}, 3); },
        {random_matrix(rng, 3, 2)}, 21);
}

TEST(Autodiff, Losses) {
    std::mt19937_64 rng(22);
    expect_matches_finite_differences(
        [](Tape& t, const auto& v) { return ad::softmax_cross_entropy(t, v[0], {0, 3, 1}); },
        {random_matrix(rng, 3, 5)}, 23);
    Matrix ref(2, 4);
    std::uniform_real_distribution<double> u(0.1, 1.0);
    for (std::size_t r = 0; r < 2; ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < 4; ++c) s += ref(r, c) = u(rng);
        for (std::size_t c = 0; c < 4; ++c) ref(r, c) /= s;
    }
    ref(1, 2) = 0.0;  // zero-probability entries drop out of the sum
    expect_matches_finite_differences([ref](Tape& t, const auto& v) { return ad::kl_from_reference(t, ref, v[0]); },
                                      {random_matrix(rng, 2, 4)}, 24);
}

TEST(Autodiff, KlIsZeroAtReference) {
    Tape t;
    Matrix logits(1, 3);
    logits.data = {0.1, -0.4, 0.9};
    double z = 0.0;
    for (double x : logits.data) z += std::exp(x);
    Matrix p(1, 3);
    for (std::size_t i = 0; i < 3; ++i) p.data[i] = std::exp(logits.data[i]) / z;
    EXPECT_NEAR(t.value(ad::kl_from_reference(t, p, t.leaf(logits))).data[0], 0.0, 1e-15);
}

TEST(Autodiff, MobiusRowsAndFlat) {
    std::mt19937_64 rng(25);
    const Curvature c(1.5);
    const Matrix w = random_matrix(rng, 3, 4, 0.2);
    const Matrix d = random_matrix(rng, 3, 4, 0.15);
    expect_matches_finite_differences([c](Tape& t, const auto& v) { return ad::mobius_add_rows(t, v[0], v[1], c); },
                                      {w, d}, 26);
    expect_matches_finite_differences([c](Tape& t, const auto& v) { return ad::mobius_add_flat(t, v[0], v[1], c); },
                                      {random_matrix(rng, 3, 4, 0.1), random_matrix(rng, 3, 4, 0.05)}, 27);
}

TEST(Autodiff, MobiusRowsMatchesScalarOp) {
    std::mt19937_64 rng(28);
    const Curvature c(0.5);
    const Matrix w = random_matrix(rng, 4, 3, 0.3);
    const Matrix d = random_matrix(rng, 4, 3, 0.3);
    Tape t;
    const Matrix& out = t.value(ad::mobius_add_rows(t, t.leaf(w), t.leaf(d), c));
    for (std::size_t r = 0; r < 4; ++r) {
        const Vector ref = mobius_add(Vector(w.row(r).begin(), w.row(r).end()), Vector(d.row(r).begin(), d.row(r).end()), c);
        for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(out(r, j), ref[j]);
    }
}

TEST(Autodiff, ProjectRows) {
    std::mt19937_64 rng(29);
    Matrix w = random_matrix(rng, 3, 3, 0.1);
    for (std::size_t j = 0; j < 3; ++j) w(1, j) *= 30.0;  // one row outside the ball
    const Curvature c(1.0);
    expect_matches_finite_differences([c](Tape& t, const auto& v) { return ad::project_rows(t, v[0], c); }, {w}, 30);
}

TEST(Autodiff, ConstantsReceiveNoGradient) {
    Tape t;
    const Var a = t.constant(Matrix(1, 1, 2.0));
    const Var b = t.leaf(Matrix(1, 1, 3.0));
    const Var s = ad::sum(t, ad::mul(t, a, b));
    EXPECT_FALSE(t.requires_grad(a));
    t.backward(s);
    EXPECT_EQ(t.grad(a).data[0], 0.0);
    EXPECT_EQ(t.grad(b).data[0], 2.0);
}

TEST(Autodiff, ShapeErrors) {
    Tape t;
    const Var a = t.leaf(Matrix(2, 3));
    const Var b = t.leaf(Matrix(2, 2));
    EXPECT_THROW(ad::matmul(t, a, b), InvalidArgument);
    EXPECT_THROW(ad::add(t, a, b), InvalidArgument);
    EXPECT_THROW(ad::reshape(t, a, 4, 2), InvalidArgument);
    EXPECT_THROW(ad::gather_rows(t, a, {5}), InvalidArgument);
    EXPECT_THROW(t.backward(a), InvalidArgument);
}

TEST(Autodiff, GradientsAccumulateOverReuse) {
    Tape t;
    const Var x = t.leaf(Matrix(1, 1, 1.5));
    const Var y = ad::sum(t, ad::mul(t, x, x));  // x^2
    t.backward(y);
    EXPECT_DOUBLE_EQ(t.grad(x).data[0], 3.0);
    t.backward(y);  // buffers are cleared between calls
    EXPECT_DOUBLE_EQ(t.grad(x).data[0], 3.0);
}
