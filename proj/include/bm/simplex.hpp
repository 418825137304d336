#pragma once

// Dirichlet distributions over the probability simplex.

#include <bm/errors.hpp>
#include <bm/specfn.hpp>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

namespace bm {

namespace detail {

inline void require_same_size(std::size_t a, std::size_t b, const char* what) {
  if (a != b) {
    std::ostringstream msg;
    msg << what << ": dimension mismatch (" << a << " vs " << b << ")";
    throw DimensionError(msg.str());
  }
}

inline void require_class(std::size_t y, std::size_t k, const char* what) {
  if (y >= k) {
    std::ostringstream msg;
    msg << what << ": class index " << y << " out of range for K=" << k;
    throw std::out_of_range(msg.str());
  }
}

}  // namespace detail

/// Strictly positive Dirichlet parameter vector (pseudo-counts), K >= 2.
class Concentration {
 public:
  explicit Concentration(std::vector<double> alpha) : alpha_(std::move(alpha)) {
    if (alpha_.size() < 2) throw DomainError("Concentration: need at least two components");
    for (double a : alpha_) {
      if (!(a > 0.0) || !std::isfinite(a)) {
        std::ostringstream msg;
        msg << "Concentration: components must be positive and finite, got " << a;
        throw DomainError(msg.str());
      }
    }
    alpha0_ = std::accumulate(alpha_.begin(), alpha_.end(), 0.0);
    if (!std::isfinite(alpha0_)) throw DomainError("Concentration: alpha0 overflows");
  }

  static Concentration uniform(std::size_t k, double value = 1.0) {
    return Concentration(std::vector<double>(k, value));
  }

  [[nodiscard]] std::size_t size() const { return alpha_.size(); }
  [[nodiscard]] double operator[](std::size_t k) const { return alpha_[k]; }
  [[nodiscard]] double alpha0() const { return alpha0_; }
  [[nodiscard]] std::span<const double> values() const { return alpha_; }

  friend bool operator==(const Concentration& a, const Concentration& b) { return a.alpha_ == b.alpha_; }

 private:
  std::vector<double> alpha_;
  double alpha0_ = 0.0;
};

/// A point on the (K-1)-simplex: non-negative components summing to one.
///
/// Components may sit on the boundary, which happens legitimately when a
/// mean or a sample rounds in binary64. Operations that need the open
/// simplex (log_density) check for it themselves.
class SimplexPoint {
 public:
  static constexpr double kSumTolerance = 1e-12;

  explicit SimplexPoint(std::vector<double> z) : z_(std::move(z)) {
    if (z_.empty()) throw DomainError("SimplexPoint: empty vector");
    double sum = 0.0;
    for (double v : z_) {
      if (!(v >= 0.0 && v <= 1.0)) {
        std::ostringstream msg;
        msg << "SimplexPoint: component " << v << " outside [0, 1]";
        throw DomainError(msg.str());
      }
      sum += v;
    }
    if (std::abs(sum - 1.0) > kSumTolerance) {
      std::ostringstream msg;
      msg.precision(17);
      msg << "SimplexPoint: components sum to " << sum;
      throw DomainError(msg.str());
    }
  }

  [[nodiscard]] std::size_t size() const { return z_.size(); }
  [[nodiscard]] double operator[](std::size_t k) const { return z_[k]; }
  [[nodiscard]] std::span<const double> values() const { return z_; }
  [[nodiscard]] auto begin() const { return z_.begin(); }
  [[nodiscard]] auto end() const { return z_.end(); }

  [[nodiscard]] bool interior() const {
    return std::all_of(z_.begin(), z_.end(), [](double v) { return v > 0.0 && v < 1.0; });
  }

 private:
  std::vector<double> z_;
};

/// Categorical probability vector; same invariants as a simplex point.
using ProbVector = SimplexPoint;

/// Shannon entropy -sum p ln p with 0 ln 0 = 0.
inline double categorical_entropy(std::span<const double> p) {
  double h = 0.0;
  for (double v : p) {
    if (v > 0.0) h -= v * std::log(v);
  }
  return h;
}

/// ln Dir(z | c). Rejects points on the simplex boundary.
inline double log_density(const Concentration& c, const SimplexPoint& z) {
  detail::require_same_size(c.size(), z.size(), "log_density");
  if (!z.interior()) throw DomainError("log_density: z lies on the simplex boundary");
  double result = specfn::lgamma(c.alpha0());
  for (std::size_t k = 0; k < c.size(); ++k) {
    result += (c[k] - 1.0) * std::log(z[k]) - specfn::lgamma(c[k]);
  }
  return result;
}

inline SimplexPoint mean(const Concentration& c) {
  std::vector<double> m(c.size());
  for (std::size_t k = 0; k < c.size(); ++k) m[k] = c[k] / c.alpha0();
  return SimplexPoint(std::move(m));
}

/// KL(Dir(q) || Dir(p)) in closed form.
inline double kl_dirichlet(const Concentration& q, const Concentration& p) {
  detail::require_same_size(q.size(), p.size(), "kl_dirichlet");
  const double psi_q0 = specfn::digamma(q.alpha0());
  double result = specfn::lgamma(q.alpha0()) - specfn::lgamma(p.alpha0());
  for (std::size_t k = 0; k < q.size(); ++k) {
    result += specfn::lgamma(p[k]) - specfn::lgamma(q[k]);
    result += (q[k] - p[k]) * (specfn::digamma(q[k]) - psi_q0);
  }
  // Rounding can leave a value a few ulps below zero for q close to p.
  return std::max(result, 0.0);
}

/// E_{z ~ Dir(c)}[ln z_y] = psi(c_y) - psi(c_0).
inline double expected_log_prob(const Concentration& c, std::size_t y) {
  detail::require_class(y, c.size(), "expected_log_prob");
  return specfn::digamma(c[y]) - specfn::digamma(c.alpha0());
}

/// E_{z ~ Dir(c)}[H(z)], the expected entropy of a categorical draw.
inline double expected_entropy(const Concentration& c) {
  const double psi0 = specfn::digamma(c.alpha0() + 1.0);
  double result = 0.0;
  for (std::size_t k = 0; k < c.size(); ++k) {
    result -= (c[k] / c.alpha0()) * (specfn::digamma(c[k] + 1.0) - psi0);
  }
  return result;
}

/// H(E[z]) - E[H(z)]: information about z carried by the label.
inline double mutual_information(const Concentration& c) {
  const SimplexPoint m = mean(c);
  return std::max(categorical_entropy(m.values()) - expected_entropy(c), 0.0);
}

/// Gamma(shape, 1) draw. Marsaglia-Tsang squeeze for shape >= 1; shapes
/// below one are boosted to shape + 1 and scaled by U^(1/shape).
template <class Rng>
double sample_gamma(double shape, Rng& rng) {
  if (!(shape > 0.0) || !std::isfinite(shape)) throw DomainError("sample_gamma: shape must be positive");
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  if (shape < 1.0) {
    const double u = 1.0 - uniform(rng);  // (0, 1]
    return sample_gamma(shape + 1.0, rng) * std::pow(u, 1.0 / shape);
  }
  const double d = shape - 1.0 / 3.0;
  const double c = 1.0 / std::sqrt(9.0 * d);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (;;) {
    double x, v;
    do {
      x = normal(rng);
      v = 1.0 + c * x;
    } while (v <= 0.0);
    v = v * v * v;
    const double u = 1.0 - uniform(rng);
    const double x2 = x * x;
    if (u < 1.0 - 0.0331 * x2 * x2) return d * v;
    if (std::log(u) < 0.5 * x2 + d * (1.0 - v + std::log(v))) return d * v;
  }
}

/// n independent draws from Dir(c) via normalized Gamma variates.
/// The stream is fully determined by the state of rng.
template <class Rng>
std::vector<SimplexPoint> sample(const Concentration& c, Rng& rng, std::size_t n) {
  if (n == 0) throw std::invalid_argument("sample: n must be at least 1");
  std::vector<SimplexPoint> out;
  out.reserve(n);
  std::vector<double> g(c.size());
  while (out.size() < n) {
    double total = 0.0;
    for (std::size_t k = 0; k < c.size(); ++k) {
      g[k] = sample_gamma(c[k], rng);
      total += g[k];
    }
    if (!(total > 0.0)) continue;  // every component underflowed; redraw
    std::vector<double> z(c.size());
    for (std::size_t k = 0; k < c.size(); ++k) z[k] = g[k] / total;
    out.emplace_back(std::move(z));
  }
  return out;
}

}  // namespace bm
