#pragma once

// Shared fixtures and extended-precision oracles for the test binaries.
// The oracles restate each formula in 50-digit arithmetic and never call
// the library code they check.

#include <algorithm>
#include <cstdint>
#include <memory>
#include <random>
#include <vector>

#include <boost/multiprecision/cpp_bin_float.hpp>

#include "hype/benchmark.hpp"
#include "hype/config.hpp"
#include "hype/edit_engine.hpp"
#include "hype/kg_builder.hpp"
#include "hype/pipeline.hpp"
#include "hype/toy_model.hpp"

namespace hype::test {

namespace mp = boost::multiprecision;
using Real = mp::cpp_bin_float_50;
using RVec = std::vector<Real>;

inline RVec widen(const Vector& v) { return RVec(v.begin(), v.end()); }

inline Real r_norm2(const RVec& v) {
    Real s = 0;
    for (const auto& x : v) s += x * x;
    return s;
}

inline Real r_dot(const RVec& a, const RVec& b) {
    Real s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline RVec oracle_exp(const RVec& v, const Real& c) {
    const Real n = sqrt(r_norm2(v));
    if (n == 0) return RVec(v.size(), Real(0));
    const Real sc = sqrt(c);
    const Real f = tanh(sc * n) / (sc * n);
    RVec out(v);
    for (auto& x : out) x *= f;
    return out;
}

inline RVec oracle_log(const RVec& x, const Real& c) {
    const Real n = sqrt(r_norm2(x));
    if (n == 0) return RVec(x.size(), Real(0));
    const Real sc = sqrt(c);
    const Real f = atanh(sc * n) / (sc * n);
    RVec out(x);
    for (auto& y : out) y *= f;
    return out;
}

inline RVec oracle_mobius(const RVec& w, const RVec& d, const Real& c) {
    const Real wd = r_dot(w, d), ww = r_norm2(w), dd = r_norm2(d);
    const Real den = 1 + 2 * c * wd + c * c * ww * dd;
    const Real a = (1 + 2 * c * wd + c * dd) / den;
    const Real b = (1 - c * ww) / den;
    RVec out(w.size());
    for (std::size_t i = 0; i < w.size(); ++i) out[i] = a * w[i] + b * d[i];
    return out;
}

inline Real oracle_sigmoid(const Real& x) { return 1 / (1 + exp(-x)); }

inline Real oracle_distance(const RVec& a, const RVec& b, const Real& c) {
    RVec neg(a);
    for (auto& x : neg) x = -x;
    return 2 / sqrt(c) * atanh(sqrt(c) * sqrt(r_norm2(oracle_mobius(neg, b, c))));
}

inline double max_abs_diff(const Vector& a, const RVec& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(static_cast<double>(Real(a[i]) - b[i])));
    return m;
}

inline double max_abs_diff(const Vector& a, const Vector& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

/// Uniform direction with norm `fraction` of the ball radius.
inline Vector random_interior(std::mt19937_64& rng, std::size_t dim, const Curvature& c, double fraction) {
    std::normal_distribution<double> normal(0.0, 1.0);
    Vector v(dim);
    double n2 = 0.0;
    do {
        n2 = 0.0;
        for (auto& x : v) {
            x = normal(rng);
            n2 += x * x;
        }
    } while (n2 == 0.0);
    const double s = fraction * c.radius() / std::sqrt(n2);
    for (auto& x : v) x *= s;
    return v;
}

/// The shipped benchmark with a model fitted at the configured curvature and
/// its graph. Built once per (curvature, tau, seed) per process.
struct BenchFixture {
    RunConfig cfg;
    Dataset data;
    ToyModel model;
    HyperbolicGraph graph;
};

inline const BenchFixture& bench(double curvature = 1.0, double tau = 0.5, std::uint64_t seed = 1) {
    static std::vector<std::unique_ptr<BenchFixture>> cache;
    for (const auto& f : cache)
        if (f->cfg.curvature == curvature && f->cfg.tau == tau && f->cfg.seed == seed) return *f;
    auto f = std::make_unique<BenchFixture>();
    f->cfg.curvature = curvature;
    f->cfg.tau = tau;
    f->cfg.seed = seed;
    f->data = benchmark_dataset(f->cfg.benchmark);
    f->model = fit_model(f->cfg, f->data.triples);
    f->graph = build_graph_for(f->cfg, f->data.triples);
    cache.push_back(std::move(f));
    return *cache.back();
}

/// The objective the GNN sees in the first cycle of an edit, with everything
/// it references kept alive alongside it.
struct FirstCycle {
    EditConfig cfg;
    EditProblem problem;
    Matrix weights;
    Vector mask;
    Residual residual;
    EditAnchor anchor;
    EditObjective objective;

    FirstCycle(const ToyModel& model, const HyperbolicGraph& g, const EditRequest& r, const EditConfig& c)
        : cfg(c), problem(model, r, c.kl_factor, model.snapshot()), weights(model.weights()) {
        mask = gradient_mask(problem.value_and_grad(weights).second, cfg.tau_g).second;
        residual = rewrite_residual(model, r, cfg.target_nll_fraction * cfg.early_stop_loss());
        anchor = EditAnchor::from_request(g, r);
        objective = make_objective(problem, weights, mask, cfg, cfg.gamma.automatic ? &residual : nullptr);
    }
    FirstCycle(const FirstCycle&) = delete;
    FirstCycle& operator=(const FirstCycle&) = delete;
};

inline GnnParams fresh_params(const BenchFixture& f) {
    return GnnParams(f.cfg.gnn_config(), f.graph.feature_dim(), f.model.rows(), f.model.key_dim());
}

}  // namespace hype::test
