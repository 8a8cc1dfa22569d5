// Random variate generation for Gamma, Dirichlet and Polya-Gamma targets,
// plus the implicit reparameterization gradient of a Gamma draw with respect
// to its shape.
#pragma once

#include <cmath>
#include <stdexcept>
#include <utility>

#include "opu/core.hpp"
#include "opu/random.hpp"
#include "opu/special.hpp"

namespace opu {

// Raised when a rejection loop exceeds its iteration cap, signalling a
// numeric fault rather than a recoverable condition.
struct SamplerIterationCap : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Raised by implicit_grad_gamma when the Gamma density underflows at the
// draw; the caller is expected to resample.
struct DegenerateDensityError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Gamma(shape, rate 1) draw via Marsaglia-Tsang, with the standard boost
// z = z' * u^(1/shape) for shape < 1.
inline double sample_gamma(double shape, RngState& rng) {
  if (!(shape > 0.0)) throw std::domain_error("sample_gamma: requires shape > 0");
  if (shape < 1.0) {
    const double z = sample_gamma(shape + 1.0, rng);
    return z * std::pow(rng.uniform_pos(), 1.0 / shape);
  }
  const double d = shape - 1.0 / 3.0;
  const double c = 1.0 / (3.0 * std::sqrt(d));
  for (int iter = 0; iter < 100000; ++iter) {
    double x = rng.normal();
    double v = 1.0 + c * x;
    if (v <= 0.0) continue;
    v = v * v * v;
    const double u = rng.uniform_pos();
    const double x2 = x * x;
    if (u < 1.0 - 0.0331 * x2 * x2) return d * v;
    if (std::log(u) < 0.5 * x2 + d * (1.0 - v + std::log(v))) return d * v;
  }
  throw SamplerIterationCap("sample_gamma: rejection loop exceeded cap");
}

// A Dirichlet draw with its underlying Gamma variates retained, so gradients
// can be pushed through the normalization.
struct DirichletDraw {
  Vec gammas;
  double total = 0.0;
  SimplexPoint point;
};

inline DirichletDraw sample_dirichlet_reparam(const DirichletParams& alpha, RngState& rng) {
  validate_dirichlet(alpha);
  const int k = alpha.dim();
  DirichletDraw draw;
  draw.gammas.resize(k);
  for (int attempt = 0; attempt < 100; ++attempt) {
    bool all_zero = true;
    for (int i = 0; i < k; ++i) {
      draw.gammas[i] = sample_gamma(alpha.alpha[i], rng);
      if (draw.gammas[i] > 0.0) all_zero = false;
    }
    if (all_zero) continue;  // total underflow: re-draw
    double total = 0.0;
    for (double& g : draw.gammas) {
      if (g < kSimplexClamp) g = kSimplexClamp;
      total += g;
    }
    draw.total = total;
    Vec probs(k);
    for (int i = 0; i < k; ++i) probs[i] = draw.gammas[i] / total;
    draw.point = SimplexPoint{std::move(probs)};
    return draw;
  }
  throw SamplerIterationCap("sample_dirichlet: all components underflowed repeatedly");
}

inline SimplexPoint sample_dirichlet(const DirichletParams& alpha, RngState& rng) {
  return sample_dirichlet_reparam(alpha, rng).point;
}

// Vector-Jacobian product of the normalization pi = gam / sum(gam):
// dL/dgam_j = (dL/dpi_j - sum_k dL/dpi_k pi_k) / total.
inline Vec dirichlet_normalization_vjp(const DirichletDraw& draw, const Vec& grad_pi) {
  const int k = draw.point.dim();
  double dot = 0.0;
  for (int i = 0; i < k; ++i) dot += grad_pi[i] * draw.point.probs[i];
  Vec grad_gam(k);
  for (int i = 0; i < k; ++i) grad_gam[i] = (grad_pi[i] - dot) / draw.total;
  return grad_gam;
}

namespace detail {

inline constexpr double kPgTrunc = 0.64;
inline constexpr double kPi = 3.14159265358979323846;

inline double log_norm_cdf(double x) {
  if (x < -37.0) return -0.5 * x * x - std::log(-x) - 0.5 * std::log(2.0 * kPi);
  return std::log(0.5 * std::erfc(-x / std::sqrt(2.0)));
}

// Piecewise coefficients of the alternating series for the J*(1,z) density.
inline double pg_coef(int n, double x) {
  const double np = n + 0.5;
  if (x > kPgTrunc) return kPi * np * std::exp(-np * np * kPi * kPi * x / 2.0);
  return std::pow(2.0 / (kPi * x), 1.5) * kPi * np * std::exp(-2.0 * np * np / x);
}

// Inverse Gaussian(mu = 1/z, lambda = 1) truncated to (0, kPgTrunc].
inline double pg_trunc_inv_gauss(double z, RngState& rng) {
  const double r = kPgTrunc;
  double x = r + 1.0;
  const double mu = 1.0 / z;
  if (mu > r) {
    double accept = 0.0;
    do {
      double e1, e2;
      do {
        e1 = rng.exponential();
        e2 = rng.exponential();
      } while (e1 * e1 > 2.0 * e2 / r);
      x = r / ((1.0 + r * e1) * (1.0 + r * e1));
      accept = std::exp(-0.5 * z * z * x);
    } while (rng.uniform() > accept);
  } else {
    while (x > r) {
      double y = rng.normal();
      y = y * y;
      const double muy = mu * y;
      x = mu + 0.5 * mu * muy - 0.5 * mu * std::sqrt(4.0 * muy + muy * muy);
      if (rng.uniform() > mu / (mu + x)) x = mu * mu / x;
    }
  }
  return x;
}

}  // namespace detail

// Exact PG(1, c) draw by Devroye's alternating-series rejection method for
// the tilted Jacobi density. Even in c.
inline double sample_polya_gamma(double c, RngState& rng) {
  const double z = std::fabs(c) * 0.5;
  const double fz = detail::kPi * detail::kPi / 8.0 + z * z / 2.0;
  const double t = detail::kPgTrunc;
  const double b = std::sqrt(1.0 / t) * (t * z - 1.0);
  const double a = -std::sqrt(1.0 / t) * (t * z + 1.0);
  const double x0 = std::log(fz) + fz * t;
  const double xb = x0 - z + detail::log_norm_cdf(b);
  const double xa = x0 + z + detail::log_norm_cdf(a);
  const double q_div_p = 4.0 / detail::kPi * (std::exp(xb) + std::exp(xa));
  const double mass_right = 1.0 / (1.0 + q_div_p);
  for (int trial = 0; trial < 10000; ++trial) {
    double x;
    if (rng.uniform() < mass_right)
      x = t + rng.exponential() / fz;  // tail: truncated exponential
    else
      x = detail::pg_trunc_inv_gauss(z, rng);
    double s = detail::pg_coef(0, x);
    const double y = rng.uniform() * s;
    int n = 0;
    while (true) {
      ++n;
      if (n % 2 == 1) {
        s -= detail::pg_coef(n, x);
        if (y <= s) return 0.25 * x;
      } else {
        s += detail::pg_coef(n, x);
        if (y > s) break;
      }
    }
  }
  throw SamplerIterationCap("sample_polya_gamma: rejection loop exceeded cap");
}

// d z / d shape for a Gamma draw held at fixed underlying randomness:
// -(dF/dshape) / (dF/dz), with dF/dshape by central finite difference at
// relative step h = max(1e-5 * shape, 1e-7) and dF/dz the Gamma density.
inline double implicit_grad_gamma(double z, double shape) {
  if (!(z > 0.0) || !(shape > 0.0))
    throw std::domain_error("implicit_grad_gamma: requires z > 0 and shape > 0");
  const double log_pdf = gamma_log_pdf(shape, z);
  if (log_pdf < -700.0)
    throw DegenerateDensityError("implicit_grad_gamma: density underflow at draw");
  const double pdf = std::exp(log_pdf);
  const double h = std::max(1e-5 * shape, 1e-7);
  const double df_dshape = (gamma_cdf(shape + h, z) - gamma_cdf(shape - h, z)) / (2.0 * h);
  return -df_dshape / pdf;
}

}  // namespace opu
