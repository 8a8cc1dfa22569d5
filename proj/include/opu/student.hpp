// The Dirichlet student: alpha_x = h_x * exp(g_x) with a softmax prediction
// net (PM) and a scalar concentration net (CM), the uncertainty measures, and
// local per-input Dirichlet fits (maximum likelihood and MMD).
#pragma once

#include <cmath>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "opu/core.hpp"
#include "opu/kernels.hpp"
#include "opu/nnet.hpp"
#include "opu/random.hpp"
#include "opu/sampling.hpp"
#include "opu/special.hpp"
#include "opu/teachers.hpp"

namespace opu {

// Optional fixed featurization of the concentration net's input. The radial
// grid keeps the cm's far field anchored at its learned background level, so
// the concentration score stays informative away from the training support.
struct CmFeatureMap {
  enum class Kind { raw, rbf_grid } kind = Kind::raw;
  std::vector<Vec> centers;  // rbf_grid only
  double bandwidth = 1.0;

  int output_dim(int input_dim) const {
    return kind == Kind::raw ? input_dim : static_cast<int>(centers.size());
  }

  Vec apply(const Vec& x) const {
    if (kind == Kind::raw) return x;
    Vec f(centers.size());
    for (size_t j = 0; j < centers.size(); ++j) {
      double d2 = 0.0;
      for (size_t c = 0; c < x.size(); ++c)
        d2 += (x[c] - centers[j][c]) * (x[c] - centers[j][c]);
      f[j] = std::exp(-d2 / (2.0 * bandwidth * bandwidth));
    }
    return f;
  }
};

// Radial grid over the bounding box of the inputs, one basis function per
// grid node, bandwidth equal to the largest grid spacing.
inline CmFeatureMap make_rbf_grid_map(const Matrix& inputs, int nodes_per_axis) {
  if (inputs.rows < 2 || nodes_per_axis < 2)
    throw std::invalid_argument("rbf grid: needs data and >= 2 nodes per axis");
  const int d = inputs.cols;
  if (d > 3) throw std::invalid_argument("rbf grid: input dimension too large for a grid");
  Vec lo(d, 1e300), hi(d, -1e300);
  for (int i = 0; i < inputs.rows; ++i)
    for (int c = 0; c < d; ++c) {
      lo[c] = std::min(lo[c], inputs(i, c));
      hi[c] = std::max(hi[c], inputs(i, c));
    }
  Vec spacing(d);
  for (int c = 0; c < d; ++c) spacing[c] = (hi[c] - lo[c]) / (nodes_per_axis - 1);
  CmFeatureMap map;
  map.kind = CmFeatureMap::Kind::rbf_grid;
  map.bandwidth = *std::max_element(spacing.begin(), spacing.end());
  if (!(map.bandwidth > 0.0)) throw std::invalid_argument("rbf grid: degenerate inputs");
  const int total = static_cast<int>(std::pow(nodes_per_axis, d));
  for (int n = 0; n < total; ++n) {
    Vec center(d);
    int rem = n;
    for (int c = 0; c < d; ++c) {
      center[c] = lo[c] + spacing[c] * (rem % nodes_per_axis);
      rem /= nodes_per_axis;
    }
    map.centers.push_back(std::move(center));
  }
  return map;
}

struct StudentModel {
  MlpParams pm;  // softmax-final, output width K
  MlpParams cm;  // linear scalar output, fed cm_features(x)
  CmFeatureMap cm_features;

  int num_classes() const { return pm.output_dim(); }
};

inline void validate_student(const StudentModel& m) {
  validate_mlp(m.pm);
  validate_mlp(m.cm);
  if (m.pm.layers.back().act != Activation::softmax)
    throw std::invalid_argument("student: pm must end in softmax");
  if (m.cm.output_dim() != 1)
    throw std::invalid_argument("student: cm must have scalar output");
  if (m.cm.input_dim() != m.cm_features.output_dim(m.pm.input_dim()))
    throw std::invalid_argument("student: cm input width does not match its feature map");
}

// One evaluation of both nets at x, keeping the pre-clamp precision e^g.
struct StudentEval {
  SimplexPoint h;
  double g = 0.0;
  DirichletParams alpha;          // clamped at kAlphaFloor
  double precision_preclamp = 0;  // e^g exactly
};

inline StudentEval student_eval(const StudentModel& m, const Vec& x) {
  StudentEval ev;
  Vec h = mlp_forward(m.pm, x);
  const Vec g = mlp_forward(m.cm, m.cm_features.apply(x));
  if (!all_finite(h) || !all_finite(g))
    throw std::runtime_error("student_eval: non-finite net output");
  ev.g = g[0];
  const double eg = std::exp(ev.g);
  ev.precision_preclamp = eg;
  ev.alpha.alpha.resize(h.size());
  for (size_t k = 0; k < h.size(); ++k)
    ev.alpha.alpha[k] = std::max(h[k] * eg, kAlphaFloor);
  ev.h = SimplexPoint{std::move(h)};
  if (!all_finite(ev.alpha.alpha))
    throw std::runtime_error("student_eval: non-finite alpha");
  return ev;
}

inline DirichletParams student_alpha(const StudentModel& m, const Vec& x) {
  return student_eval(m, x).alpha;
}

// One-pass prediction: the Dirichlet mean is h itself.
inline SimplexPoint student_predict(const StudentModel& m, const Vec& x) {
  Vec h = mlp_forward(m.pm, x);
  if (!all_finite(h)) throw std::runtime_error("student_predict: non-finite output");
  return SimplexPoint{std::move(h)};
}

inline SimplexPoint dirichlet_mean(const DirichletParams& alpha) {
  const double a0 = alpha.precision();
  Vec mean(alpha.alpha.size());
  for (size_t k = 0; k < mean.size(); ++k) mean[k] = alpha.alpha[k] / a0;
  return SimplexPoint{std::move(mean)};
}

// ln Gamma(a0) - sum ln Gamma(a_k) + sum (a_k - 1) ln pi_k
inline double dirichlet_log_pdf(const DirichletParams& alpha, const SimplexPoint& pi) {
  if (alpha.dim() != pi.dim())
    throw std::invalid_argument("dirichlet_log_pdf: dimension mismatch");
  double lp = ln_gamma(alpha.precision());
  for (int k = 0; k < alpha.dim(); ++k) {
    if (!(pi[k] > 0.0))
      throw std::domain_error("dirichlet_log_pdf: point on simplex boundary");
    lp += -ln_gamma(alpha.alpha[k]) + (alpha.alpha[k] - 1.0) * std::log(pi[k]);
  }
  return lp;
}

// ln B(a) + (a0 - K) psi(a0) - sum (a_k - 1) psi(a_k)
inline double dirichlet_diff_entropy(const DirichletParams& alpha) {
  const double a0 = alpha.precision();
  const int k = alpha.dim();
  double log_beta = -ln_gamma(a0);
  for (double a : alpha.alpha) log_beta += ln_gamma(a);
  double h = log_beta + (a0 - k) * digamma(a0);
  for (double a : alpha.alpha) h -= (a - 1.0) * digamma(a);
  return h;
}

// d/d alpha_j of the differential entropy:
// (a0 - K) psi'(a0) - (a_j - 1) psi'(a_j).
inline Vec dirichlet_diff_entropy_grad(const DirichletParams& alpha) {
  const double a0 = alpha.precision();
  const int k = alpha.dim();
  const double t0 = (a0 - k) * trigamma(a0);
  Vec grad(k);
  for (int j = 0; j < k; ++j)
    grad[j] = t0 - (alpha.alpha[j] - 1.0) * trigamma(alpha.alpha[j]);
  return grad;
}

// The four uncertainty measures. Higher-is-more-uncertain is the reporting
// convention; P and C are negated by the evaluation layer when scored.
struct UncertaintyScores {
  double entropy = 0.0;        // E, nats
  double max_prob = 0.0;       // P
  double diff_entropy = 0.0;   // D, nats
  double concentration = 0.0;  // C = g_x
};

inline UncertaintyScores uncertainty_scores(const StudentModel& m, const Vec& x) {
  const StudentEval ev = student_eval(m, x);
  UncertaintyScores s;
  for (double hk : ev.h.probs)
    if (hk > 0.0) s.entropy -= hk * std::log(hk);
  s.max_prob = ev.h.probs[argmax_lowest(ev.h.probs)];
  s.diff_entropy = dirichlet_diff_entropy(ev.alpha);
  s.concentration = ev.g;
  return s;
}

// ---------------------------------------------------------------------------
// Local (unamortized) Dirichlet fits.

struct DirichletMleError : std::runtime_error {
  DirichletParams last_iterate;
  int iterations = 0;
  DirichletMleError(const std::string& msg, DirichletParams last, int iters)
      : std::runtime_error(msg), last_iterate(std::move(last)), iterations(iters) {}
};

namespace detail {

// Method-of-moments initial point for the Dirichlet MLE.
inline DirichletParams dirichlet_mom(const ParticleCloud& cloud) {
  const int k = cloud.num_classes;
  const double s = static_cast<double>(cloud.size());
  Vec mean(k, 0.0), var(k, 0.0);
  for (const auto& p : cloud.points)
    for (int c = 0; c < k; ++c) mean[c] += p[c];
  for (double& m : mean) m /= s;
  for (const auto& p : cloud.points)
    for (int c = 0; c < k; ++c) var[c] += (p[c] - mean[c]) * (p[c] - mean[c]);
  for (double& v : var) v /= std::max(1.0, s - 1.0);
  // per-component precision estimates m(1-m)/v - 1, averaged over usable ones
  double a0 = 0.0;
  int used = 0;
  for (int c = 0; c < k; ++c) {
    if (var[c] > 1e-12 && mean[c] > 1e-9 && mean[c] < 1.0 - 1e-9) {
      a0 += mean[c] * (1.0 - mean[c]) / var[c] - 1.0;
      ++used;
    }
  }
  a0 = used > 0 ? a0 / used : 1e6;
  if (!(a0 > 1e-3)) a0 = 1e-3;
  if (a0 > 1e6) a0 = 1e6;
  DirichletParams init;
  init.alpha.resize(k);
  for (int c = 0; c < k; ++c) init.alpha[c] = std::max(mean[c] * a0, 1e-6);
  return init;
}

}  // namespace detail

struct MleOptions {
  int max_iterations = 500;
  double rel_tol = 1e-10;
};

// Maximum-likelihood Dirichlet fit by the fixed point
// psi(a_k) = psi(a0) + mean_s ln pi_{s,k}, from a method-of-moments start.
inline DirichletParams fit_dirichlet_mle(const ParticleCloud& cloud,
                                         const MleOptions& opt = {}) {
  const int k = cloud.num_classes;
  if (cloud.size() < k)
    throw std::invalid_argument("fit_dirichlet_mle: needs at least K particles");
  Vec mean_log(k, 0.0);
  for (const auto& p : cloud.points)
    for (int c = 0; c < k; ++c) {
      if (!(p[c] > 0.0))
        throw std::domain_error("fit_dirichlet_mle: particle on simplex boundary");
      mean_log[c] += std::log(p[c]);
    }
  for (double& v : mean_log) v /= cloud.size();

  DirichletParams alpha = detail::dirichlet_mom(cloud);
  for (int iter = 1; iter <= opt.max_iterations; ++iter) {
    const double psi_a0 = digamma(alpha.precision());
    DirichletParams next;
    next.alpha.resize(k);
    double rel_change = 0.0;
    for (int c = 0; c < k; ++c) {
      next.alpha[c] = digamma_inverse(psi_a0 + mean_log[c]);
      rel_change = std::max(rel_change, std::fabs(next.alpha[c] - alpha.alpha[c]) /
                                            std::max(1e-12, std::fabs(alpha.alpha[c])));
    }
    alpha = std::move(next);
    if (rel_change < opt.rel_tol) return alpha;
  }
  throw DirichletMleError("fit_dirichlet_mle: no convergence in " +
                              std::to_string(opt.max_iterations) + " iterations",
                          alpha, opt.max_iterations);
}

// ---------------------------------------------------------------------------
// MMD fit: gradient descent on the U-statistic MMD^2 between the cloud and
// reparameterized Dirichlet samples, with implicit Gamma gradients; optimized
// in log-alpha to keep positivity.

struct MmdFitConfig {
  int steps = 200;
  int sample_count = 64;
  double lr = 0.05;
  std::optional<Vec> init_alpha;  // defaults to the method-of-moments start
};

namespace detail {

// MMD^2(cloud, samples) and its gradient with respect to each sample point.
inline double mmd2_with_sample_grads(const std::vector<SimplexPoint>& cloud,
                                     const std::vector<SimplexPoint>& q,
                                     const KernelSpec& k, std::vector<Vec>* grads) {
  const size_t m = cloud.size(), n = q.size();
  double kpp = 0.0, kqq = 0.0, kpq = 0.0;
  if (grads) grads->assign(n, Vec(q[0].dim(), 0.0));
  for (size_t i = 0; i < m; ++i)
    for (size_t j = i + 1; j < m; ++j) kpp += kernel_eval(k, cloud[i], cloud[j]);
  for (size_t i = 0; i < n; ++i)
    for (size_t j = i + 1; j < n; ++j) {
      kqq += kernel_eval(k, q[i], q[j]);
      if (grads) {
        const Vec gi = kernel_grad_a(k, q[i].probs, q[j].probs);
        const Vec gj = kernel_grad_a(k, q[j].probs, q[i].probs);
        const double w = 2.0 / (static_cast<double>(n) * (n - 1.0));
        for (int c = 0; c < q[0].dim(); ++c) {
          (*grads)[i][c] += w * gi[c];
          (*grads)[j][c] += w * gj[c];
        }
      }
    }
  for (size_t i = 0; i < m; ++i)
    for (size_t j = 0; j < n; ++j) {
      kpq += kernel_eval(k, cloud[i], q[j]);
      if (grads) {
        const Vec gj = kernel_grad_a(k, q[j].probs, cloud[i].probs);
        const double w = -2.0 / (static_cast<double>(m) * n);
        for (int c = 0; c < q[0].dim(); ++c) (*grads)[j][c] += w * gj[c];
      }
    }
  const double mm = static_cast<double>(m), nn = static_cast<double>(n);
  return 2.0 * kpp / (mm * (mm - 1.0)) + 2.0 * kqq / (nn * (nn - 1.0)) -
         2.0 * kpq / (mm * nn);
}

// Draw reparameterized Dirichlet samples, retrying on degenerate densities.
inline std::vector<DirichletDraw> draw_student_samples(const DirichletParams& alpha,
                                                       int count, RngState& rng) {
  std::vector<DirichletDraw> draws;
  draws.reserve(count);
  for (int i = 0; i < count; ++i) draws.push_back(sample_dirichlet_reparam(alpha, rng));
  return draws;
}

// Chain sample-space gradients back to alpha through the normalization
// Jacobian and the implicit Gamma gradient. Bounded retries on degenerate
// densities, re-drawing the offending sample.
inline Vec chain_grads_to_alpha(std::vector<DirichletDraw>& draws,
                                const std::vector<Vec>& grad_pi,
                                const DirichletParams& alpha, RngState& rng) {
  const int k = alpha.dim();
  Vec grad_alpha(k, 0.0);
  for (size_t s = 0; s < draws.size(); ++s) {
    const Vec grad_gam = dirichlet_normalization_vjp(draws[s], grad_pi[s]);
    for (int c = 0; c < k; ++c) {
      double dz_da = 0.0;
      bool ok = false;
      for (int attempt = 0; attempt < 5 && !ok; ++attempt) {
        try {
          dz_da = implicit_grad_gamma(draws[s].gammas[c], alpha.alpha[c]);
          ok = true;
        } catch (const DegenerateDensityError&) {
          draws[s] = sample_dirichlet_reparam(alpha, rng);
        }
      }
      if (!ok)
        throw DegenerateDensityError(
            "chain_grads_to_alpha: persistent density underflow");
      grad_alpha[c] += grad_gam[c] * dz_da;
    }
  }
  return grad_alpha;
}

}  // namespace detail

// Best-by-loss iterate of gradient descent on the empirical MMD^2.
inline DirichletParams fit_dirichlet_mmd(const ParticleCloud& cloud,
                                         const KernelSpec& kernel,
                                         const MmdFitConfig& cfg, RngState& rng) {
  validate_kernel(kernel);
  const int k = cloud.num_classes;
  DirichletParams alpha =
      cfg.init_alpha ? DirichletParams{*cfg.init_alpha} : detail::dirichlet_mom(cloud);
  validate_dirichlet(alpha);
  Vec lam(k);
  for (int c = 0; c < k; ++c) lam[c] = std::log(alpha.alpha[c]);

  // scalar Adam in log-alpha space
  Vec m(k, 0.0), v(k, 0.0);
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  DirichletParams best = alpha;
  double best_loss = std::numeric_limits<double>::infinity();
  for (int t = 1; t <= cfg.steps; ++t) {
    DirichletParams cur;
    cur.alpha.resize(k);
    for (int c = 0; c < k; ++c)
      cur.alpha[c] = std::max(std::exp(lam[c]), kAlphaFloor);
    auto draws = detail::draw_student_samples(cur, cfg.sample_count, rng);
    std::vector<SimplexPoint> q;
    q.reserve(draws.size());
    for (const auto& d : draws) q.push_back(d.point);
    std::vector<Vec> grad_pi;
    const double loss = detail::mmd2_with_sample_grads(cloud.points, q, kernel, &grad_pi);
    if (!std::isfinite(loss)) throw std::runtime_error("fit_dirichlet_mmd: non-finite loss");
    if (loss < best_loss) {
      best_loss = loss;
      best = cur;
    }
    Vec grad_alpha = detail::chain_grads_to_alpha(draws, grad_pi, cur, rng);
    const double bc1 = 1.0 - std::pow(b1, t), bc2 = 1.0 - std::pow(b2, t);
    for (int c = 0; c < k; ++c) {
      const double g = grad_alpha[c] * cur.alpha[c];  // d loss / d lambda
      m[c] = b1 * m[c] + (1.0 - b1) * g;
      v[c] = b2 * v[c] + (1.0 - b2) * g * g;
      lam[c] -= cfg.lr * (m[c] / bc1) / (std::sqrt(v[c] / bc2) + eps);
    }
  }
  return best;
}

}  // namespace opu
