// Kernel compositions on the simplex and the unbiased MMD^2 U-statistic.
#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "opu/core.hpp"

namespace opu {

struct KernelComponent {
  enum class Kind { rbf, polynomial } kind = Kind::rbf;
  double weight = 1.0;
  // rbf
  double bandwidth = 1.0;
  // polynomial: (scale * <a,b> + offset)^degree
  int degree = 2;
  double offset = 1.0;
  double scale = 1.0;
};

struct KernelSpec {
  std::vector<KernelComponent> components;
};

inline void validate_kernel(const KernelSpec& k) {
  if (k.components.empty()) throw std::invalid_argument("kernel: needs a component");
  for (const auto& c : k.components) {
    if (!(c.weight > 0.0)) throw std::invalid_argument("kernel: weight must be positive");
    if (c.kind == KernelComponent::Kind::rbf && !(c.bandwidth > 0.0))
      throw std::invalid_argument("kernel: rbf bandwidth must be positive");
    if (c.kind == KernelComponent::Kind::polynomial &&
        (c.degree < 1 || !(c.offset > 0.0) || !(c.scale > 0.0)))
      throw std::invalid_argument("kernel: polynomial hyperparameters must be positive");
  }
}

inline double kernel_eval(const KernelSpec& k, const Vec& a, const Vec& b) {
  if (a.size() != b.size()) throw std::invalid_argument("kernel_eval: dimension mismatch");
  double sum = 0.0;
  for (const auto& c : k.components) {
    if (c.kind == KernelComponent::Kind::rbf) {
      double d2 = 0.0;
      for (size_t i = 0; i < a.size(); ++i) d2 += (a[i] - b[i]) * (a[i] - b[i]);
      sum += c.weight * std::exp(-d2 / (2.0 * c.bandwidth * c.bandwidth));
    } else {
      double dot = 0.0;
      for (size_t i = 0; i < a.size(); ++i) dot += a[i] * b[i];
      sum += c.weight * std::pow(c.scale * dot + c.offset, c.degree);
    }
  }
  return sum;
}

inline double kernel_eval(const KernelSpec& k, const SimplexPoint& a, const SimplexPoint& b) {
  return kernel_eval(k, a.probs, b.probs);
}

// Gradient of kernel_eval with respect to its first argument.
inline Vec kernel_grad_a(const KernelSpec& k, const Vec& a, const Vec& b) {
  Vec grad(a.size(), 0.0);
  for (const auto& c : k.components) {
    if (c.kind == KernelComponent::Kind::rbf) {
      double d2 = 0.0;
      for (size_t i = 0; i < a.size(); ++i) d2 += (a[i] - b[i]) * (a[i] - b[i]);
      const double f = c.weight * std::exp(-d2 / (2.0 * c.bandwidth * c.bandwidth)) /
                       (c.bandwidth * c.bandwidth);
      for (size_t i = 0; i < a.size(); ++i) grad[i] += -f * (a[i] - b[i]);
    } else {
      double dot = 0.0;
      for (size_t i = 0; i < a.size(); ++i) dot += a[i] * b[i];
      const double f = c.weight * c.degree *
                       std::pow(c.scale * dot + c.offset, c.degree - 1) * c.scale;
      for (size_t i = 0; i < a.size(); ++i) grad[i] += f * b[i];
    }
  }
  return grad;
}

namespace detail {
// Canonical ordering of point sets so the estimator is exactly symmetric in
// its arguments (summation order is fixed regardless of call order).
inline bool set_less(const std::vector<SimplexPoint>& a,
                     const std::vector<SimplexPoint>& b) {
  if (a.size() != b.size()) return a.size() < b.size();
  for (size_t i = 0; i < a.size(); ++i)
    for (size_t c = 0; c < a[i].probs.size(); ++c) {
      if (a[i].probs[c] < b[i].probs[c]) return true;
      if (a[i].probs[c] > b[i].probs[c]) return false;
    }
  return false;
}
}  // namespace detail

// Unbiased U-statistic estimate of MMD^2(P, Q); may be slightly negative.
inline double mmd2_estimate(const std::vector<SimplexPoint>& p_in,
                            const std::vector<SimplexPoint>& q_in, const KernelSpec& k) {
  const bool swap_sets = detail::set_less(q_in, p_in);
  const std::vector<SimplexPoint>& p = swap_sets ? q_in : p_in;
  const std::vector<SimplexPoint>& q = swap_sets ? p_in : q_in;
  const size_t m = p.size(), n = q.size();
  if (m < 2 || n < 2) throw std::invalid_argument("mmd2_estimate: needs >= 2 points per set");
  double kpp = 0.0, kqq = 0.0, kpq = 0.0;
  for (size_t i = 0; i < m; ++i)
    for (size_t j = i + 1; j < m; ++j) kpp += kernel_eval(k, p[i], p[j]);
  for (size_t i = 0; i < n; ++i)
    for (size_t j = i + 1; j < n; ++j) kqq += kernel_eval(k, q[i], q[j]);
  for (size_t i = 0; i < m; ++i)
    for (size_t j = 0; j < n; ++j) kpq += kernel_eval(k, p[i], q[j]);
  const double mm = static_cast<double>(m), nn = static_cast<double>(n);
  return 2.0 * kpp / (mm * (mm - 1.0)) + 2.0 * kqq / (nn * (nn - 1.0)) -
         2.0 * kpq / (mm * nn);
}

// Biased V-statistic variant (self-terms included); zero for identical sets.
inline double mmd2_biased(const std::vector<SimplexPoint>& p,
                          const std::vector<SimplexPoint>& q, const KernelSpec& k) {
  const size_t m = p.size(), n = q.size();
  if (m < 1 || n < 1) throw std::invalid_argument("mmd2_biased: empty set");
  double kpp = 0.0, kqq = 0.0, kpq = 0.0;
  for (size_t i = 0; i < m; ++i)
    for (size_t j = 0; j < m; ++j) kpp += kernel_eval(k, p[i], p[j]);
  for (size_t i = 0; i < n; ++i)
    for (size_t j = 0; j < n; ++j) kqq += kernel_eval(k, q[i], q[j]);
  for (size_t i = 0; i < m; ++i)
    for (size_t j = 0; j < n; ++j) kpq += kernel_eval(k, p[i], q[j]);
  const double mm = static_cast<double>(m), nn = static_cast<double>(n);
  return kpp / (mm * mm) + kqq / (nn * nn) - 2.0 * kpq / (mm * nn);
}

// Median of pairwise Euclidean distances; the usual rbf bandwidth heuristic.
inline double median_heuristic_bandwidth(const std::vector<SimplexPoint>& pts) {
  std::vector<double> dists;
  for (size_t i = 0; i < pts.size(); ++i)
    for (size_t j = i + 1; j < pts.size(); ++j) {
      double d2 = 0.0;
      for (size_t c = 0; c < pts[i].probs.size(); ++c)
        d2 += (pts[i][c] - pts[j][c]) * (pts[i][c] - pts[j][c]);
      dists.push_back(std::sqrt(d2));
    }
  if (dists.empty()) return 1.0;
  std::nth_element(dists.begin(), dists.begin() + dists.size() / 2, dists.end());
  const double med = dists[dists.size() / 2];
  return med > 1e-6 ? med : 1e-6;
}

// Default composite kernel: rbf at the median-heuristic bandwidth plus a
// quadratic polynomial kernel, equal weights.
inline KernelSpec default_kernel(const std::vector<SimplexPoint>& reference) {
  KernelSpec k;
  KernelComponent rbf;
  rbf.kind = KernelComponent::Kind::rbf;
  rbf.weight = 0.5;
  rbf.bandwidth = median_heuristic_bandwidth(reference);
  KernelComponent poly;
  poly.kind = KernelComponent::Kind::polynomial;
  poly.weight = 0.5;
  poly.degree = 2;
  poly.offset = 1.0;
  poly.scale = 1.0;
  k.components = {rbf, poly};
  return k;
}

}  // namespace opu
