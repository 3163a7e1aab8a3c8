#pragma once

// Dense row-major matrices and small vector helpers. Everything in the
// library is double precision; there is no BLAS dependency, the loops are
// written so that results are reproducible bit-for-bit on one build.

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "hype/errors.hpp"

namespace hype {

using Vector = std::vector<double>;

struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

    static Matrix row_vector(std::span<const double> v) {
        Matrix m(1, v.size());
        std::copy(v.begin(), v.end(), m.data.begin());
        return m;
    }
    static Matrix column_vector(std::span<const double> v) {
        Matrix m(v.size(), 1);
        std::copy(v.begin(), v.end(), m.data.begin());
        return m;
    }
    static Matrix scalar(double x) { return Matrix(1, 1, x); }

    double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

    std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
    std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

    std::size_t size() const noexcept { return data.size(); }
    bool same_shape(const Matrix& o) const noexcept { return rows == o.rows && cols == o.cols; }

    bool operator==(const Matrix&) const = default;
};

inline double dot(std::span<const double> a, std::span<const double> b) {
    // four partial sums let the compiler vectorize without reassociation flags
    double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
    const std::size_t n = a.size();
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
    }
    for (; i < n; ++i) s0 += a[i] * b[i];
    return (s0 + s1) + (s2 + s3);
}

inline double squared_norm(std::span<const double> a) { return dot(a, a); }
inline double norm(std::span<const double> a) { return std::sqrt(squared_norm(a)); }

inline double frobenius_norm(const Matrix& m) { return norm(m.data); }

inline bool all_finite(std::span<const double> a) {
    for (double x : a)
        if (!std::isfinite(x)) return false;
    return true;
}

inline double sigmoid(double x) {
    // split on sign so exp never overflows
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

/// y = M x
inline Vector matvec(const Matrix& m, std::span<const double> x) {
    if (m.cols != x.size()) throw InvalidArgument("matvec: dimension mismatch");
    Vector y(m.rows, 0.0);
    for (std::size_t r = 0; r < m.rows; ++r) y[r] = dot(m.row(r), x);
    return y;
}

inline Matrix outer(std::span<const double> u, std::span<const double> v) {
    Matrix m(u.size(), v.size());
    for (std::size_t i = 0; i < u.size(); ++i)
        for (std::size_t j = 0; j < v.size(); ++j) m(i, j) = u[i] * v[j];
    return m;
}

inline Matrix transpose(const Matrix& a) {
    Matrix t(a.cols, a.rows);
    for (std::size_t r = 0; r < a.rows; ++r)
        for (std::size_t c = 0; c < a.cols; ++c) t(c, r) = a(r, c);
    return t;
}

}  // namespace hype
