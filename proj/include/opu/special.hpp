// Special functions: log-gamma (Lanczos), digamma (recurrence + asymptotic
// series), and the regularized lower incomplete gamma function.
#pragma once

#include <cmath>
#include <stdexcept>

namespace opu {

namespace detail {
// Lanczos g=7, n=9 coefficients (Godfrey/Pugh).
inline constexpr double kLanczosG = 7.0;
inline constexpr double kLanczos[9] = {
    0.99999999999980993,     676.5203681218851,     -1259.1392167224028,
    771.32342877765313,      -176.61502916214059,   12.507343278686905,
    -0.13857109526572012,    9.9843695780195716e-6, 1.5056327351493116e-7};
inline constexpr double kHalfLog2Pi = 0.91893853320467274178032973640562;
}  // namespace detail

// Natural log of the Gamma function for x > 0.
inline double ln_gamma(double x) {
  if (!(x > 0.0)) throw std::domain_error("ln_gamma: requires x > 0");
  double a = detail::kLanczos[0];
  const double t = x + detail::kLanczosG - 0.5;
  for (int i = 1; i < 9; ++i) a += detail::kLanczos[i] / (x - 1.0 + i);
  return detail::kHalfLog2Pi + (x - 0.5) * std::log(t) - t + std::log(a);
}

// Digamma psi(x) for x > 0: recurrence boost below 10, then the Bernoulli
// asymptotic series.
inline double digamma(double x) {
  if (!(x > 0.0)) throw std::domain_error("digamma: requires x > 0");
  double acc = 0.0;
  while (x < 10.0) {
    acc -= 1.0 / x;
    x += 1.0;
  }
  const double inv = 1.0 / x;
  const double inv2 = inv * inv;
  // psi(x) ~ ln x - 1/(2x) - sum B_{2n}/(2n x^{2n})
  const double series =
      inv2 * (1.0 / 12.0 -
              inv2 * (1.0 / 120.0 -
                      inv2 * (1.0 / 252.0 -
                              inv2 * (1.0 / 240.0 - inv2 * (1.0 / 132.0)))));
  return acc + std::log(x) - 0.5 * inv - series;
}

// Trigamma psi'(x) for x > 0, same recurrence-plus-asymptotic scheme.
inline double trigamma(double x) {
  if (!(x > 0.0)) throw std::domain_error("trigamma: requires x > 0");
  double acc = 0.0;
  while (x < 10.0) {
    acc += 1.0 / (x * x);
    x += 1.0;
  }
  const double inv = 1.0 / x;
  const double inv2 = inv * inv;
  // psi'(x) ~ 1/x + 1/(2x^2) + sum B_{2n}/x^{2n+1}
  const double series =
      inv2 * inv *
      (1.0 / 6.0 - inv2 * (1.0 / 30.0 - inv2 * (1.0 / 42.0 - inv2 * (1.0 / 30.0))));
  return acc + inv + 0.5 * inv2 + series;
}

// Inverse of digamma by Newton iteration (Minka's initialization).
inline double digamma_inverse(double y) {
  double x = y >= -2.22 ? std::exp(y) + 0.5 : -1.0 / (y + 0.57721566490153286);
  for (int i = 0; i < 32; ++i) {
    const double step = (digamma(x) - y) / trigamma(x);
    x -= step;
    if (x <= 0.0) x = 1e-12;
    if (std::fabs(step) < 1e-14 * std::max(1.0, std::fabs(x))) break;
  }
  return x;
}

// Log of the Gamma(shape, rate 1) density at z > 0.
inline double gamma_log_pdf(double shape, double z) {
  if (!(shape > 0.0) || !(z > 0.0))
    throw std::domain_error("gamma_log_pdf: requires shape > 0 and z > 0");
  return (shape - 1.0) * std::log(z) - z - ln_gamma(shape);
}

namespace detail {

// Lower series: P(a,z) = z^a e^-z / Gamma(a) * sum z^n / (a(a+1)...(a+n)).
inline double gamma_p_series(double a, double z) {
  double term = 1.0 / a;
  double sum = term;
  for (int n = 1; n < 10000; ++n) {
    term *= z / (a + n);
    sum += term;
    if (std::fabs(term) < std::fabs(sum) * 1e-16) break;
  }
  const double lg = (a * std::log(z) - z - ln_gamma(a)) + std::log(sum);
  return std::exp(lg);
}

// Upper continued fraction (modified Lentz) for Q(a,z).
inline double gamma_q_contfrac(double a, double z) {
  const double tiny = 1e-300;
  double b = z + 1.0 - a;
  double c = 1.0 / tiny;
  double d = 1.0 / b;
  double h = d;
  for (int i = 1; i < 10000; ++i) {
    const double an = -static_cast<double>(i) * (i - a);
    b += 2.0;
    d = an * d + b;
    if (std::fabs(d) < tiny) d = tiny;
    c = b + an / c;
    if (std::fabs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double delta = d * c;
    h *= delta;
    if (std::fabs(delta - 1.0) < 1e-16) break;
  }
  const double lg = a * std::log(z) - z - ln_gamma(a);
  return std::exp(lg) * h;
}

}  // namespace detail

// Regularized lower incomplete gamma P(shape, z), monotone nondecreasing in z.
inline double gamma_cdf(double shape, double z) {
  if (!(shape > 0.0)) throw std::domain_error("gamma_cdf: requires shape > 0");
  if (!(z >= 0.0)) throw std::domain_error("gamma_cdf: requires z >= 0");
  if (z == 0.0) return 0.0;
  if (z < shape + 1.0) {
    double p = detail::gamma_p_series(shape, z);
    return p < 0.0 ? 0.0 : (p > 1.0 ? 1.0 : p);
  }
  double q = detail::gamma_q_contfrac(shape, z);
  if (q < 0.0) q = 0.0;
  if (q > 1.0) q = 1.0;
  return 1.0 - q;
}

}  // namespace opu
