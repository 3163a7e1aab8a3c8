#pragma once

// Poincaré-ball primitives: exponential / logarithmic maps at the origin,
// Möbius addition, projection onto the eps-interior, persistence gate and
// geodesic distance. All functions are pure.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <limits>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "hype/errors.hpp"
#include "hype/tensor.hpp"

namespace hype {

/// Relative interior margin: points are kept at norm <= (1 - kBallMargin) / sqrt(c).
inline constexpr double kBallMargin = 1e-5;
/// Möbius addition refuses denominators whose magnitude falls below this floor.
inline constexpr double kMobiusDenominatorFloor = 1e-12;

class Curvature {
public:
    Curvature() = default;
    explicit Curvature(double c) : c_(c) {
        if (!(c > 0.0) || !std::isfinite(c)) throw InvalidArgument("curvature must be finite and > 0");
    }
    double value() const noexcept { return c_; }
    double sqrt_c() const noexcept { return std::sqrt(c_); }
    /// 1 / sqrt(c)
    double radius() const noexcept { return 1.0 / std::sqrt(c_); }
    /// Largest norm a BallPoint may carry.
    double max_norm() const noexcept { return (1.0 - kBallMargin) / std::sqrt(c_); }

    bool operator==(const Curvature&) const = default;

private:
    double c_ = 1.0;
};

namespace detail {

template <std::floating_point T>
T squared_norm(std::span<const T> a) {
    T s = 0;
    for (T x : a) s += x * x;
    return s;
}

template <std::floating_point T>
T dot(std::span<const T> a, std::span<const T> b) {
    T s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

template <std::floating_point T>
void require_finite(std::span<const T> v, const char* what) {
    for (T x : v)
        if (!std::isfinite(static_cast<double>(x))) throw InvalidArgument(std::string(what) + ": non-finite input");
}

template <std::floating_point T>
void require_interior(std::span<const T> x, const Curvature& c, const char* what) {
    const double n = std::sqrt(static_cast<double>(squared_norm(x)));
    if (!(n <= c.max_norm())) {
        std::ostringstream os;
        os << what << ": point of norm " << n << " is not inside the ball interior (max " << c.max_norm() << ")";
        throw DomainError(os.str());
    }
}

}  // namespace detail

/// Scales w onto the eps-interior when it lies outside; identity otherwise.
/// Bitwise idempotent: a returned point is always accepted unchanged.
template <std::floating_point T>
std::vector<T> project_to_ball(std::span<const T> w, const Curvature& c) {
    detail::require_finite(w, "project_to_ball");
    std::vector<T> out(w.begin(), w.end());
    const T limit = static_cast<T>(c.max_norm());
    const T n = std::sqrt(detail::squared_norm(w));
    if (n <= limit) return out;
    const T factor = limit / n;
    for (auto& x : out) x *= factor;
    // rounding can leave the rescaled norm an ulp above the limit
    while (std::sqrt(detail::squared_norm(std::span<const T>(out))) > limit)
        for (auto& x : out) x *= T(1) - T(4) * std::numeric_limits<T>::epsilon();
    return out;
}

template <std::floating_point T>
std::vector<T> exp_map_origin(std::span<const T> v, const Curvature& c) {
    detail::require_finite(v, "exp_map_origin");
    const T n = std::sqrt(detail::squared_norm(v));
    std::vector<T> out(v.size(), T(0));
    if (n == T(0)) return out;
    const T sc = static_cast<T>(c.sqrt_c());
    const T factor = std::tanh(sc * n) / (sc * n);
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = factor * v[i];
    // tanh saturates to 1 for large arguments, keep the point strictly interior
    return project_to_ball(std::span<const T>(out), c);
}

template <std::floating_point T>
std::vector<T> log_map_origin(std::span<const T> x, const Curvature& c) {
    detail::require_finite(x, "log_map_origin");
    detail::require_interior(x, c, "log_map_origin");
    const T n = std::sqrt(detail::squared_norm(x));
    std::vector<T> out(x.size(), T(0));
    if (n == T(0)) return out;
    const T sc = static_cast<T>(c.sqrt_c());
    const T factor = std::atanh(sc * n) / (sc * n);
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = factor * x[i];
    return out;
}

/// w (+)_c delta, the exact two-term rational expression. No projection.
template <std::floating_point T>
std::vector<T> mobius_add(std::span<const T> w, std::span<const T> delta, const Curvature& c) {
    if (w.size() != delta.size()) throw InvalidArgument("mobius_add: dimension mismatch");
    detail::require_finite(w, "mobius_add");
    detail::require_finite(delta, "mobius_add");
    const T cc = static_cast<T>(c.value());
    const T wd = detail::dot(w, delta);
    const T ww = detail::squared_norm(w);
    const T dd = detail::squared_norm(delta);
    const T den = T(1) + T(2) * cc * wd + cc * cc * ww * dd;
    if (!(std::abs(den) >= static_cast<T>(kMobiusDenominatorFloor))) {
        std::ostringstream os;
        os << "mobius_add: denominator " << static_cast<double>(den) << " below floor (|w|^2=" << static_cast<double>(ww)
           << ", |delta|^2=" << static_cast<double>(dd) << ", <w,delta>=" << static_cast<double>(wd) << ")";
        throw NumericInstability(os.str());
    }
    const T a = (T(1) + T(2) * cc * wd + cc * dd) / den;
    const T b = (T(1) - cc * ww) / den;
    std::vector<T> out(w.size());
    for (std::size_t i = 0; i < w.size(); ++i) out[i] = a * w[i] + b * delta[i];
    return out;
}

/// sigmoid(|x| - tau)
template <std::floating_point T>
T persistence_gate(std::span<const T> x, T tau) {
    if (!std::isfinite(static_cast<double>(tau))) throw InvalidArgument("persistence_gate: non-finite tau");
    const T n = std::sqrt(detail::squared_norm(x));
    return static_cast<T>(sigmoid(static_cast<double>(n - tau)));
}

template <std::floating_point T>
T ball_distance(std::span<const T> a, std::span<const T> b, const Curvature& c) {
    detail::require_interior(a, c, "ball_distance");
    detail::require_interior(b, c, "ball_distance");
    if (a.size() == b.size() && std::equal(a.begin(), a.end(), b.begin())) return T(0);
    std::vector<T> neg(a.begin(), a.end());
    for (auto& x : neg) x = -x;
    const auto diff = mobius_add(std::span<const T>(neg), b, c);
    const T sc = static_cast<T>(c.sqrt_c());
    const T arg = std::min<T>(sc * std::sqrt(detail::squared_norm(std::span<const T>(diff))), T(1) - std::numeric_limits<T>::epsilon());
    return T(2) / sc * std::atanh(arg);
}

// Vector conveniences: span parameters do not take part in template deduction.
inline Vector project_to_ball(const Vector& w, const Curvature& c) { return project_to_ball(std::span<const double>(w), c); }
inline Vector exp_map_origin(const Vector& v, const Curvature& c) { return exp_map_origin(std::span<const double>(v), c); }
inline Vector log_map_origin(const Vector& x, const Curvature& c) { return log_map_origin(std::span<const double>(x), c); }
inline Vector mobius_add(const Vector& w, const Vector& d, const Curvature& c) {
    return mobius_add(std::span<const double>(w), std::span<const double>(d), c);
}
inline double persistence_gate(const Vector& x, double tau) { return persistence_gate(std::span<const double>(x), tau); }
inline double ball_distance(const Vector& a, const Vector& b, const Curvature& c) {
    return ball_distance(std::span<const double>(a), std::span<const double>(b), c);
}

/// A coordinate vector validated to lie within the eps-interior of the ball.
class BallPoint {
public:
    BallPoint() = default;

    /// Throws DomainError unless coords already satisfy the interior bound.
    static BallPoint checked(Vector coords, const Curvature& c) {
        detail::require_finite(std::span<const double>(coords), "BallPoint");
        detail::require_interior(std::span<const double>(coords), c, "BallPoint");
        return BallPoint(std::move(coords), c);
    }
    static BallPoint projected(std::span<const double> coords, const Curvature& c) {
        return BallPoint(project_to_ball(coords, c), c);
    }
    static BallPoint from_tangent(std::span<const double> v, const Curvature& c) {
        return BallPoint(exp_map_origin(v, c), c);
    }
    static BallPoint origin(std::size_t dim, const Curvature& c) { return BallPoint(Vector(dim, 0.0), c); }

    const Vector& coords() const noexcept { return coords_; }
    const Curvature& curvature() const noexcept { return c_; }
    std::size_t dim() const noexcept { return coords_.size(); }
    double norm() const { return std::sqrt(detail::squared_norm(std::span<const double>(coords_))); }
    Vector to_tangent() const { return log_map_origin(std::span<const double>(coords_), c_); }

    bool operator==(const BallPoint&) const = default;

private:
    BallPoint(Vector coords, const Curvature& c) : coords_(std::move(coords)), c_(c) {}
    Vector coords_;
    Curvature c_;
};

inline bool satisfies_ball_invariant(std::span<const double> x, const Curvature& c) {
    // same summation as project_to_ball, so projected points always pass
    return all_finite(x) && std::sqrt(detail::squared_norm(x)) <= c.max_norm();
}

}  // namespace hype
