#pragma once

// Log-gamma, digamma and trigamma for positive real arguments.
//
// All three are templates over the floating-point type; double is the
// working precision, long double instantiations back the finite-difference
// oracles. All three use the same scheme: shift the argument upward with the
// functional recurrence until it reaches kAsymptoticThreshold, then evaluate
// the Stirling-type asymptotic series truncated after the B14 Bernoulli term.
// At x >= 10 the first omitted term is below 1e-16 relative for every
// function, so the error is dominated by floating-point rounding.

#include <bm/errors.hpp>

#include <cmath>
#include <concepts>
#include <sstream>

namespace bm::specfn {

inline constexpr double kAsymptoticThreshold = 10.0;

namespace detail {

template <std::floating_point T>
void require_positive(T x, const char* fn) {
  if (!(x > 0.0) || !std::isfinite(x)) {
    std::ostringstream msg;
    msg << fn << ": argument must be positive and finite, got " << x;
    throw DomainError(msg.str());
  }
}

// Number of unit shifts needed to bring x up to the asymptotic threshold.
template <std::floating_point T>
int shift_count(T x) {
  return x >= T(kAsymptoticThreshold) ? 0 : static_cast<int>(std::ceil(T(kAsymptoticThreshold) - x));
}

}  // namespace detail

/// ln Gamma(x) for x > 0.
template <std::floating_point T>
T lgamma(T x) {
  detail::require_positive(x, "lgamma");
  const int n = detail::shift_count(x);
  // Gamma(x) = Gamma(x + n) / (x (x+1) ... (x+n-1))
  T product = 1;
  for (int i = 0; i < n; ++i) product *= x + i;
  const T z = x + n;
  const T inv = 1 / z;
  const T inv2 = inv * inv;
  // B_{2k} / (2k (2k-1) z^{2k-1}), k = 1..7
  const T series =
      inv * (T(1) / 12 +
             inv2 * (-T(1) / 360 +
                     inv2 * (T(1) / 1260 +
                             inv2 * (-T(1) / 1680 +
                                     inv2 * (T(1) / 1188 +
                                             inv2 * (-T(691) / 360360 + inv2 * (T(1) / 156)))))));
  const T half_log_two_pi = T(0.91893853320467274178032973640562L);
  const T shifted = (z - T(0.5)) * std::log(z) - z + half_log_two_pi + series;
  return n == 0 ? shifted : shifted - std::log(product);
}

/// psi(x) = d/dx ln Gamma(x) for x > 0.
template <std::floating_point T>
T digamma(T x) {
  detail::require_positive(x, "digamma");
  const int n = detail::shift_count(x);
  // psi(x) = psi(x + n) - sum_{i<n} 1/(x+i), smallest terms summed first.
  T correction = 0;
  for (int i = n - 1; i >= 0; --i) correction += 1 / (x + i);
  const T z = x + n;
  const T inv2 = 1 / (z * z);
  // B_{2k} / (2k z^{2k}), k = 1..7
  const T series =
      inv2 * (T(1) / 12 +
              inv2 * (-T(1) / 120 +
                      inv2 * (T(1) / 252 +
                              inv2 * (-T(1) / 240 +
                                      inv2 * (T(1) / 132 +
                                              inv2 * (-T(691) / 32760 + inv2 * (T(1) / 12)))))));
  return std::log(z) - T(0.5) / z - series - correction;
}

/// psi'(x) for x > 0.
template <std::floating_point T>
T trigamma(T x) {
  detail::require_positive(x, "trigamma");
  const int n = detail::shift_count(x);
  T correction = 0;
  for (int i = n - 1; i >= 0; --i) correction += 1 / ((x + i) * (x + i));
  const T z = x + n;
  const T inv = 1 / z;
  const T inv2 = inv * inv;
  // B_{2k} / z^{2k+1}, k = 1..7
  const T series =
      inv * inv2 *
      (T(1) / 6 +
       inv2 * (-T(1) / 30 +
               inv2 * (T(1) / 42 +
                       inv2 * (-T(1) / 30 +
                               inv2 * (T(5) / 66 + inv2 * (-T(691) / 2730 + inv2 * (T(7) / 6)))))));
  return inv + T(0.5) * inv2 + series + correction;
}

}  // namespace bm::specfn
