#pragma once

// Minimal reverse-mode automatic differentiation over dense matrices.
//
// A Tape owns every intermediate value. Ops append a node holding the forward
// value and a closure that pushes the node's gradient into its parents.
// Only the operations the GNN, the edit loss and the model fit need are here.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <utility>
#include <vector>

#include "hype/errors.hpp"
#include "hype/hyperbolic.hpp"
#include "hype/tensor.hpp"

namespace hype::ad {

struct Var {
    std::size_t id = static_cast<std::size_t>(-1);
};

class Tape {
public:
    using BackwardFn = std::function<void(Tape&, const Matrix& grad)>;

    Var leaf(Matrix value, bool requires_grad = true) {
        nodes_.push_back(Node{std::move(value), {}, requires_grad, {}});
        return Var{nodes_.size() - 1};
    }
    Var constant(Matrix value) { return leaf(std::move(value), false); }

    Var push(Matrix value, std::initializer_list<Var> parents, BackwardFn fn) {
        bool rg = false;
        for (Var p : parents) rg = rg || nodes_.at(p.id).requires_grad;
        nodes_.push_back(Node{std::move(value), {}, rg, rg ? std::move(fn) : BackwardFn{}});
        return Var{nodes_.size() - 1};
    }

    const Matrix& value(Var v) const { return nodes_.at(v.id).value; }
    bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }

    /// Gradient of the last backward() target w.r.t. v; zeros when v was unreachable.
    Matrix grad(Var v) const {
        const Node& n = nodes_.at(v.id);
        if (n.grad.size() == 0) return Matrix(n.value.rows, n.value.cols);
        return n.grad;
    }

    /// Accumulation buffer for a parent gradient, allocated on first touch.
    Matrix& grad_buffer(Var v) {
        Node& n = nodes_.at(v.id);
        if (n.grad.size() == 0) n.grad = Matrix(n.value.rows, n.value.cols);
        return n.grad;
    }

    void backward(Var out) {
        const Matrix& o = value(out);
        if (o.rows != 1 || o.cols != 1) throw InvalidArgument("backward: target must be a scalar");
        for (auto& n : nodes_) n.grad = Matrix();
        grad_buffer(out).data[0] = 1.0;
        for (std::size_t i = out.id + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (!n.backward || n.grad.size() == 0) continue;
            // copy: the closure may grow other nodes' buffers but never this one
            const Matrix g = n.grad;
            n.backward(*this, g);
        }
    }

    std::size_t size() const noexcept { return nodes_.size(); }

private:
    struct Node {
        Matrix value;
        Matrix grad;
        bool requires_grad = false;
        BackwardFn backward;
    };
    std::vector<Node> nodes_;
};

namespace detail {

inline void require(bool ok, const char* what) {
    if (!ok) throw InvalidArgument(what);
}

// out += a * b   (a: r×k, b: k×c)
inline void gemm_nn(const Matrix& a, const Matrix& b, Matrix& out) {
    for (std::size_t i = 0; i < a.rows; ++i) {
        double* orow = out.data.data() + i * out.cols;
        for (std::size_t k = 0; k < a.cols; ++k) {
            const double aik = a(i, k);
            if (aik == 0.0) continue;
            const double* brow = b.data.data() + k * b.cols;
            for (std::size_t j = 0; j < b.cols; ++j) orow[j] += aik * brow[j];
        }
    }
}

// out += a * b^T   (a: r×k, b: c×k)
inline void gemm_nt(const Matrix& a, const Matrix& b, Matrix& out) {
    for (std::size_t i = 0; i < a.rows; ++i)
        for (std::size_t j = 0; j < b.rows; ++j) out(i, j) += dot(a.row(i), b.row(j));
}

// out += a^T * b   (a: k×r, b: k×c)
inline void gemm_tn(const Matrix& a, const Matrix& b, Matrix& out) {
    for (std::size_t k = 0; k < a.rows; ++k) {
        const double* brow = b.data.data() + k * b.cols;
        for (std::size_t i = 0; i < a.cols; ++i) {
            const double aki = a(k, i);
            if (aki == 0.0) continue;
            double* orow = out.data.data() + i * out.cols;
            for (std::size_t j = 0; j < b.cols; ++j) orow[j] += aki * brow[j];
        }
    }
}

// Möbius addition of one row pair and its vector-Jacobian product.
struct MobiusRow {
    double a, b, den, wd, ww, dd;
};

inline MobiusRow mobius_forward(std::span<const double> w, std::span<const double> d, double c, std::span<double> out) {
    MobiusRow r{};
    r.wd = dot(w, d);
    r.ww = dot(w, w);
    r.dd = dot(d, d);
    r.den = 1.0 + 2.0 * c * r.wd + c * c * r.ww * r.dd;
    if (!(std::abs(r.den) >= kMobiusDenominatorFloor))
        throw NumericInstability("mobius_add: denominator below floor");
    r.a = (1.0 + 2.0 * c * r.wd + c * r.dd) / r.den;
    r.b = (1.0 - c * r.ww) / r.den;
    for (std::size_t i = 0; i < w.size(); ++i) out[i] = r.a * w[i] + r.b * d[i];
    return r;
}

// g: upstream gradient for out; accumulates into gw / gd (either may be empty).
inline void mobius_backward(std::span<const double> w, std::span<const double> d, std::span<const double> out,
                            const MobiusRow& r, double c, std::span<const double> g, std::span<double> gw,
                            std::span<double> gd) {
    const double inv_den = 1.0 / r.den;
    const double A = 1.0 + 2.0 * c * r.wd + c * r.dd;
    const double B = 1.0 - c * r.ww;
    const double xg = dot(w, g) * inv_den;
    const double yg = dot(d, g) * inv_den;
    const double dden = -dot(g, out) * inv_den;  // dL/d(den)
    if (!gw.empty()) {
        for (std::size_t i = 0; i < w.size(); ++i) {
            gw[i] += g[i] * inv_den * A + 2.0 * c * d[i] * xg - 2.0 * c * w[i] * yg +
                     dden * (2.0 * c * d[i] + 2.0 * c * c * r.dd * w[i]);
        }
    }
    if (!gd.empty()) {
        for (std::size_t i = 0; i < d.size(); ++i) {
            gd[i] += (2.0 * c * w[i] + 2.0 * c * d[i]) * xg + B * g[i] * inv_den +
                     dden * (2.0 * c * w[i] + 2.0 * c * c * r.ww * d[i]);
        }
    }
}

}  // namespace detail

// ---------------------------------------------------------------- linear algebra

inline Var matmul(Tape& t, Var a, Var b) {
    const Matrix& A = t.value(a);
    const Matrix& B = t.value(b);
    detail::require(A.cols == B.rows, "matmul: inner dimension mismatch");
    Matrix out(A.rows, B.cols);
    detail::gemm_nn(A, B, out);
    return t.push(std::move(out), {a, b}, [a, b](Tape& tp, const Matrix& g) {
        if (tp.requires_grad(a)) detail::gemm_nt(g, tp.value(b), tp.grad_buffer(a));
        if (tp.requires_grad(b)) detail::gemm_tn(tp.value(a), g, tp.grad_buffer(b));
    });
}

/// a * b^T, the natural layout for weights stored as (out, in).
inline Var matmul_nt(Tape& t, Var a, Var b) {
    const Matrix& A = t.value(a);
    const Matrix& B = t.value(b);
    detail::require(A.cols == B.cols, "matmul_nt: inner dimension mismatch");
    Matrix out(A.rows, B.rows);
    detail::gemm_nt(A, B, out);
    return t.push(std::move(out), {a, b}, [a, b](Tape& tp, const Matrix& g) {
        if (tp.requires_grad(a)) detail::gemm_nn(g, tp.value(b), tp.grad_buffer(a));
        if (tp.requires_grad(b)) detail::gemm_tn(g, tp.value(a), tp.grad_buffer(b));
    });
}

inline Var transpose(Tape& t, Var a) {
    return t.push(hype::transpose(t.value(a)), {a}, [a](Tape& tp, const Matrix& g) {
        Matrix& ga = tp.grad_buffer(a);
        for (std::size_t r = 0; r < g.rows; ++r)
            for (std::size_t c = 0; c < g.cols; ++c) ga(c, r) += g(r, c);
    });
}

/// (m×1) u and (1×n) v, or both as row vectors: returns the m×n outer product.
inline Var outer(Tape& t, Var u, Var v) {
    const Matrix& U = t.value(u);
    const Matrix& V = t.value(v);
    detail::require(U.rows == 1 || U.cols == 1, "outer: u must be a vector");
    detail::require(V.rows == 1 || V.cols == 1, "outer: v must be a vector");
    Matrix out = hype::outer(U.data, V.data);
    return t.push(std::move(out), {u, v}, [u, v](Tape& tp, const Matrix& g) {
        const Matrix& U = tp.value(u);
        const Matrix& V = tp.value(v);
        if (tp.requires_grad(u)) {
            Matrix& gu = tp.grad_buffer(u);
            for (std::size_t i = 0; i < U.size(); ++i) gu.data[i] += dot(g.row(i), V.data);
        }
        if (tp.requires_grad(v)) {
            Matrix& gv = tp.grad_buffer(v);
            for (std::size_t i = 0; i < U.size(); ++i)
                for (std::size_t j = 0; j < V.size(); ++j) gv.data[j] += U.data[i] * g(i, j);
        }
    });
}

/// Same data, new shape.
inline Var reshape(Tape& t, Var a, std::size_t rows, std::size_t cols) {
    const Matrix& A = t.value(a);
    detail::require(rows * cols == A.size(), "reshape: element count mismatch");
    Matrix out(rows, cols);
    out.data = A.data;
    return t.push(std::move(out), {a}, [a](Tape& tp, const Matrix& g) {
        Matrix& ga = tp.grad_buffer(a);
        for (std::size_t i = 0; i < g.size(); ++i) ga.data[i] += g.data[i];
    });
}

// ---------------------------------------------------------------- elementwise

inline Var add(Tape& t, Var a, Var b) {
    const Matrix& A = t.value(a);
    const Matrix& B = t.value(b);
    detail::require(A.same_shape(B), "add: shape mismatch");
    Matrix out = A;
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += B.data[i];
    return t.push(std::move(out), {a, b}, [a, b](Tape& tp, const Matrix& g) {
        for (Var p : {a, b})
            if (tp.requires_grad(p)) {
                Matrix& gp = tp.grad_buffer(p);
                for (std::size_t i = 0; i < g.size(); ++i) gp.data[i] += g.data[i];
            }
    });
}

/// a (r×c) + b (1×c) broadcast over rows.
inline Var add_row_bias(Tape& t, Var a, Var b) {
    const Matrix& A = t.value(a);
    const Matrix& B = t.value(b);
    detail::require(B.rows == 1 && B.cols == A.cols, "add_row_bias: shape mismatch");
    Matrix out = A;
    for (std::size_t r = 0; r < out.rows; ++r)
        for (std::size_t c = 0; c < out.cols; ++c) out(r, c) += B.data[c];
    return t.push(std::move(out), {a, b}, [a, b](Tape& tp, const Matrix& g) {
        if (tp.requires_grad(a)) {
            Matrix& ga = tp.grad_buffer(a);
            for (std::size_t i = 0; i < g.size(); ++i) ga.data[i] += g.data[i];
        }
        if (tp.requires_grad(b)) {
            Matrix& gb = tp.grad_buffer(b);
            for (std::size_t r = 0; r < g.rows; ++r)
                for (std::size_t c = 0; c < g.cols; ++c) gb.data[c] += g(r, c);
        }
    });
}

inline Var scale(Tape& t, Var a, double s) {
    Matrix out = t.value(a);
    for (auto& x : out.data) x *= s;
    return t.push(std::move(out), {a}, [a, s](Tape& tp, const Matrix& g) {
        Matrix& ga = tp.grad_buffer(a);
        for (std::size_t i = 0; i < g.size(); ++i) ga.data[i] += s * g.data[i];
    });
}

/// a times a 1×1 variable.
inline Var scale_by(Tape& t, Var a, Var s) {
    detail::require(t.value(s).size() == 1, "scale_by: scale must be 1x1");
    const double k = t.value(s).data[0];
    Matrix out = t.value(a);
    for (auto& x : out.data) x *= k;
    return t.push(std::move(out), {a, s}, [a, s](Tape& tp, const Matrix& g) {
        const double k = tp.value(s).data[0];
        if (tp.requires_grad(a)) {
            Matrix& ga = tp.grad_buffer(a);
            for (std::size_t i = 0; i < g.size(); ++i) ga.data[i] += k * g.data[i];
        }
        if (tp.requires_grad(s)) tp.grad_buffer(s).data[0] += dot(g.data, tp.value(a).data);
    });
}

/// Elementwise product.
inline Var mul(Tape& t, Var a, Var b) {
    const Matrix& A = t.value(a);
    const Matrix& B = t.value(b);
    detail::require(A.same_shape(B), "mul: shape mismatch");
    Matrix out = A;
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] *= B.data[i];
    return t.push(std::move(out), {a, b}, [a, b](Tape& tp, const Matrix& g) {
        if (tp.requires_grad(a)) {
            Matrix& ga = tp.grad_buffer(a);
            const Matrix& B = tp.value(b);
            for (std::size_t i = 0; i < g.size(); ++i) ga.data[i] += g.data[i] * B.data[i];
        }
        if (tp.requires_grad(b)) {
            Matrix& gb = tp.grad_buffer(b);
            const Matrix& A = tp.value(a);
            for (std::size_t i = 0; i < g.size(); ++i) gb.data[i] += g.data[i] * A.data[i];
        }
    });
}

/// Row r of a multiplied by s[r]; s is (r×1).
inline Var row_scale(Tape& t, Var a, Var s) {
    const Matrix& A = t.value(a);
    const Matrix& S = t.value(s);
    detail::require(S.size() == A.rows, "row_scale: scale length must equal row count");
    Matrix out = A;
    for (std::size_t r = 0; r < out.rows; ++r)
        for (std::size_t c = 0; c < out.cols; ++c) out(r, c) *= S.data[r];
    return t.push(std::move(out), {a, s}, [a, s](Tape& tp, const Matrix& g) {
        const Matrix& A = tp.value(a);
        const Matrix& S = tp.value(s);
        if (tp.requires_grad(a)) {
            Matrix& ga = tp.grad_buffer(a);
            for (std::size_t r = 0; r < g.rows; ++r)
                for (std::size_t c = 0; c < g.cols; ++c) ga(r, c) += g(r, c) * S.data[r];
        }
        if (tp.requires_grad(s)) {
            Matrix& gs = tp.grad_buffer(s);
            for (std::size_t r = 0; r < g.rows; ++r) gs.data[r] += dot(g.row(r), A.row(r));
        }
    });
}

inline Var tanh(Tape& t, Var a) {
    Matrix out = t.value(a);
    for (auto& x : out.data) x = std::tanh(x);
    return t.push(std::move(out), {a}, [a](Tape& tp, const Matrix& g) {
        const Matrix& A = tp.value(a);
        Matrix& ga = tp.grad_buffer(a);
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double y = std::tanh(A.data[i]);
            ga.data[i] += g.data[i] * (1.0 - y * y);
        }
    });
}

inline Var sigmoid(Tape& t, Var a) {
    Matrix out = t.value(a);
    for (auto& x : out.data) x = hype::sigmoid(x);
    return t.push(std::move(out), {a}, [a](Tape& tp, const Matrix& g) {
        const Matrix& A = tp.value(a);
        Matrix& ga = tp.grad_buffer(a);
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double y = hype::sigmoid(A.data[i]);
            ga.data[i] += g.data[i] * y * (1.0 - y);
        }
    });
}

// ---------------------------------------------------------------- indexing

inline Var gather_rows(Tape& t, Var a, std::vector<std::size_t> idx) {
    const Matrix& A = t.value(a);
    Matrix out(idx.size(), A.cols);
    for (std::size_t r = 0; r < idx.size(); ++r) {
        detail::require(idx[r] < A.rows, "gather_rows: index out of range");
        std::copy(A.row(idx[r]).begin(), A.row(idx[r]).end(), out.row(r).begin());
    }
    return t.push(std::move(out), {a}, [a, idx = std::move(idx)](Tape& tp, const Matrix& g) {
        Matrix& ga = tp.grad_buffer(a);
        for (std::size_t r = 0; r < idx.size(); ++r) {
            auto dst = ga.row(idx[r]);
            auto src = g.row(r);
            for (std::size_t c = 0; c < src.size(); ++c) dst[c] += src[c];
        }
    });
}

/// out[idx[r]] += a[r]; out has `rows` rows. Rows are summed in input order.
inline Var scatter_add_rows(Tape& t, Var a, std::vector<std::size_t> idx, std::size_t rows) {
    const Matrix& A = t.value(a);
    detail::require(idx.size() == A.rows, "scatter_add_rows: index count must equal row count");
    Matrix out(rows, A.cols);
    for (std::size_t r = 0; r < idx.size(); ++r) {
        detail::require(idx[r] < rows, "scatter_add_rows: index out of range");
        auto dst = out.row(idx[r]);
        auto src = A.row(r);
        for (std::size_t c = 0; c < src.size(); ++c) dst[c] += src[c];
    }
    return t.push(std::move(out), {a}, [a, idx = std::move(idx)](Tape& tp, const Matrix& g) {
        Matrix& ga = tp.grad_buffer(a);
        for (std::size_t r = 0; r < idx.size(); ++r) {
            auto dst = ga.row(r);
            auto src = g.row(idx[r]);
            for (std::size_t c = 0; c < src.size(); ++c) dst[c] += src[c];
        }
    });
}

inline Var concat_cols(Tape& t, Var a, Var b) {
    const Matrix& A = t.value(a);
    const Matrix& B = t.value(b);
    detail::require(A.rows == B.rows, "concat_cols: row count mismatch");
    Matrix out(A.rows, A.cols + B.cols);
    for (std::size_t r = 0; r < A.rows; ++r) {
        std::copy(A.row(r).begin(), A.row(r).end(), out.row(r).begin());
        std::copy(B.row(r).begin(), B.row(r).end(), out.row(r).begin() + static_cast<std::ptrdiff_t>(A.cols));
    }
    const std::size_t split = A.cols;
    return t.push(std::move(out), {a, b}, [a, b, split](Tape& tp, const Matrix& g) {
        if (tp.requires_grad(a)) {
            Matrix& ga = tp.grad_buffer(a);
            for (std::size_t r = 0; r < g.rows; ++r)
                for (std::size_t c = 0; c < split; ++c) ga(r, c) += g(r, c);
        }
        if (tp.requires_grad(b)) {
            Matrix& gb = tp.grad_buffer(b);
            for (std::size_t r = 0; r < g.rows; ++r)
                for (std::size_t c = split; c < g.cols; ++c) gb(r, c - split) += g(r, c);
        }
    });
}

// ---------------------------------------------------------------- reductions / losses

inline Var sum(Tape& t, Var a) {
    double s = 0.0;
    for (double x : t.value(a).data) s += x;
    return t.push(Matrix::scalar(s), {a}, [a](Tape& tp, const Matrix& g) {
        Matrix& ga = tp.grad_buffer(a);
        for (auto& x : ga.data) x += g.data[0];
    });
}

/// Mean negative log-likelihood of targets[r] under softmax(logits row r).
inline Var softmax_cross_entropy(Tape& t, Var logits, std::vector<std::size_t> targets) {
    const Matrix& L = t.value(logits);
    detail::require(targets.size() == L.rows && L.rows > 0, "softmax_cross_entropy: one target per row");
    Matrix probs(L.rows, L.cols);
    double total = 0.0;
    for (std::size_t r = 0; r < L.rows; ++r) {
        auto row = L.row(r);
        detail::require(targets[r] < L.cols, "softmax_cross_entropy: target out of range");
        const double mx = *std::max_element(row.begin(), row.end());
        double z = 0.0;
        for (std::size_t c = 0; c < L.cols; ++c) z += std::exp(row[c] - mx);
        const double lse = mx + std::log(z);
        for (std::size_t c = 0; c < L.cols; ++c) probs(r, c) = std::exp(row[c] - lse);
        total += lse - row[targets[r]];
    }
    const double n = static_cast<double>(L.rows);
    return t.push(Matrix::scalar(total / n), {logits},
                  [logits, probs = std::move(probs), targets = std::move(targets), n](Tape& tp, const Matrix& g) {
                      Matrix& gl = tp.grad_buffer(logits);
                      const double s = g.data[0] / n;
                      for (std::size_t r = 0; r < probs.rows; ++r) {
                          for (std::size_t c = 0; c < probs.cols; ++c) gl(r, c) += s * probs(r, c);
                          gl(r, targets[r]) -= s;
                      }
                  });
}

/// Mean over rows of KL(p || softmax(logits)); p is a fixed reference distribution.
inline Var kl_from_reference(Tape& t, const Matrix& reference, Var logits) {
    const Matrix& L = t.value(logits);
    detail::require(reference.same_shape(L) && L.rows > 0, "kl_from_reference: shape mismatch");
    Matrix q(L.rows, L.cols);
    double total = 0.0;
    for (std::size_t r = 0; r < L.rows; ++r) {
        auto row = L.row(r);
        const double mx = *std::max_element(row.begin(), row.end());
        double z = 0.0;
        for (std::size_t c = 0; c < L.cols; ++c) z += std::exp(row[c] - mx);
        const double lse = mx + std::log(z);
        for (std::size_t c = 0; c < L.cols; ++c) {
            q(r, c) = std::exp(row[c] - lse);
            const double p = reference(r, c);
            if (p > 0.0) total += p * (std::log(p) - (row[c] - lse));
        }
    }
    const double n = static_cast<double>(L.rows);
    return t.push(Matrix::scalar(total / n), {logits},
                  [logits, q = std::move(q), reference, n](Tape& tp, const Matrix& g) {
                      Matrix& gl = tp.grad_buffer(logits);
                      const double s = g.data[0] / n;
                      for (std::size_t r = 0; r < q.rows; ++r) {
                          // mass of p, 1 for a normalized reference
                          double m = 0.0;
                          for (double p : reference.row(r)) m += p;
                          for (std::size_t c = 0; c < q.cols; ++c) gl(r, c) += s * (m * q(r, c) - reference(r, c));
                      }
                  });
}

// ---------------------------------------------------------------- ball operations

/// Row-wise w_i (+)_c delta_i.
inline Var mobius_add_rows(Tape& t, Var w, Var delta, const Curvature& c) {
    const Matrix& W = t.value(w);
    const Matrix& D = t.value(delta);
    detail::require(W.same_shape(D), "mobius_add_rows: shape mismatch");
    Matrix out(W.rows, W.cols);
    std::vector<detail::MobiusRow> rows(W.rows);
    for (std::size_t r = 0; r < W.rows; ++r) {
        try {
            rows[r] = detail::mobius_forward(W.row(r), D.row(r), c.value(), out.row(r));
        } catch (const NumericInstability& e) {
            throw NumericInstability(std::string(e.what()) + " at row " + std::to_string(r), r);
        }
    }
    const double cv = c.value();
    Matrix saved = out;
    return t.push(std::move(out), {w, delta}, [w, delta, O = std::move(saved), rows = std::move(rows), cv](Tape& tp, const Matrix& g) {
        const Matrix& W = tp.value(w);
        const Matrix& D = tp.value(delta);
        Matrix* gw = tp.requires_grad(w) ? &tp.grad_buffer(w) : nullptr;
        Matrix* gd = tp.requires_grad(delta) ? &tp.grad_buffer(delta) : nullptr;
        for (std::size_t r = 0; r < W.rows; ++r)
            detail::mobius_backward(W.row(r), D.row(r), O.row(r), rows[r], cv, g.row(r),
                                    gw ? gw->row(r) : std::span<double>{}, gd ? gd->row(r) : std::span<double>{});
    });
}

/// Whole-matrix Möbius addition: both operands flattened to one vector.
inline Var mobius_add_flat(Tape& t, Var w, Var delta, const Curvature& c) {
    const Matrix& W = t.value(w);
    const Matrix& D = t.value(delta);
    detail::require(W.same_shape(D), "mobius_add_flat: shape mismatch");
    Matrix out(W.rows, W.cols);
    const detail::MobiusRow info = detail::mobius_forward(W.data, D.data, c.value(), out.data);
    const double cv = c.value();
    Matrix saved = out;
    return t.push(std::move(out), {w, delta}, [w, delta, O = std::move(saved), info, cv](Tape& tp, const Matrix& g) {
        Matrix* gw = tp.requires_grad(w) ? &tp.grad_buffer(w) : nullptr;
        Matrix* gd = tp.requires_grad(delta) ? &tp.grad_buffer(delta) : nullptr;
        detail::mobius_backward(tp.value(w).data, tp.value(delta).data, O.data, info, cv, g.data,
                                gw ? std::span<double>(gw->data) : std::span<double>{},
                                gd ? std::span<double>(gd->data) : std::span<double>{});
    });
}

/// Row-wise projection onto the eps-interior (identity for interior rows).
inline Var project_rows(Tape& t, Var w, const Curvature& c) {
    const Matrix& W = t.value(w);
    Matrix out(W.rows, W.cols);
    std::vector<double> norms(W.rows);
    for (std::size_t r = 0; r < W.rows; ++r) {
        const auto p = project_to_ball(W.row(r), c);
        std::copy(p.begin(), p.end(), out.row(r).begin());
        norms[r] = norm(W.row(r));
    }
    const double limit = c.max_norm();
    return t.push(std::move(out), {w}, [w, norms = std::move(norms), limit](Tape& tp, const Matrix& g) {
        const Matrix& W = tp.value(w);
        Matrix& gw = tp.grad_buffer(w);
        for (std::size_t r = 0; r < W.rows; ++r) {
            auto gr = g.row(r);
            auto dst = gw.row(r);
            if (norms[r] <= limit) {
                for (std::size_t j = 0; j < gr.size(); ++j) dst[j] += gr[j];
                continue;
            }
            // y = limit * w / |w|  =>  J = (limit/|w|) (I - w w^T / |w|^2)
            const double n = norms[r];
            const double k = limit / n;
            const double proj = dot(gr, W.row(r)) / (n * n);
            for (std::size_t j = 0; j < gr.size(); ++j) dst[j] += k * (gr[j] - proj * W(r, j));
        }
    });
}

}  // namespace hype::ad
