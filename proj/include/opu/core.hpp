// Core value types shared across the library: points on the probability
// simplex, Dirichlet parameters, and a minimal dense matrix.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace opu {

using Vec = std::vector<double>;

// Components of particles and samples are kept at least this far inside the
// simplex so Dirichlet log-densities stay finite.
inline constexpr double kSimplexClamp = 1e-12;

// Lower clamp applied to each student alpha component; Gamma sampling and
// implicit gradients degrade for tiny shapes.
inline constexpr double kAlphaFloor = 1e-3;

inline bool all_finite(const Vec& v) {
  for (double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

// A point on the (K-1)-simplex: entries in [0,1] summing to 1.
struct SimplexPoint {
  Vec probs;

  int dim() const { return static_cast<int>(probs.size()); }
  double operator[](size_t k) const { return probs[k]; }
};

inline void validate_simplex(const SimplexPoint& p, double tol = 1e-9) {
  if (p.dim() < 2) throw std::invalid_argument("simplex point needs K >= 2");
  double sum = 0.0;
  for (double x : p.probs) {
    if (!(x >= 0.0 && x <= 1.0))
      throw std::invalid_argument("simplex entry outside [0,1]");
    sum += x;
  }
  if (std::fabs(sum - 1.0) > tol)
    throw std::invalid_argument("simplex entries sum to " + std::to_string(sum));
}

// Clamp into the open simplex at kSimplexClamp and renormalize.
inline SimplexPoint clamp_to_open_simplex(Vec probs) {
  double sum = 0.0;
  for (double& x : probs) {
    if (!(x > kSimplexClamp)) x = kSimplexClamp;
    sum += x;
  }
  for (double& x : probs) x /= sum;
  return SimplexPoint{std::move(probs)};
}

// Dirichlet concentration parameters, all positive.
struct DirichletParams {
  Vec alpha;

  int dim() const { return static_cast<int>(alpha.size()); }
  double precision() const { return std::accumulate(alpha.begin(), alpha.end(), 0.0); }
};

inline void validate_dirichlet(const DirichletParams& d) {
  if (d.dim() < 2) throw std::invalid_argument("dirichlet params need K >= 2");
  for (double a : d.alpha)
    if (!(a > 0.0) || !std::isfinite(a))
      throw std::invalid_argument("dirichlet alpha must be positive and finite");
  if (!std::isfinite(d.precision()))
    throw std::invalid_argument("dirichlet precision not finite");
}

// Index of the largest entry; ties broken by lowest index.
inline int argmax_lowest(const Vec& v) {
  int best = 0;
  for (int i = 1; i < static_cast<int>(v.size()); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

// Minimal row-major dense matrix.
struct Matrix {
  int rows = 0;
  int cols = 0;
  Vec data;

  Matrix() = default;
  Matrix(int r, int c) : rows(r), cols(c), data(static_cast<size_t>(r) * c, 0.0) {}

  double& operator()(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
  double operator()(int r, int c) const { return data[static_cast<size_t>(r) * cols + c]; }
  const double* row_ptr(int r) const { return data.data() + static_cast<size_t>(r) * cols; }
  double* row_ptr(int r) { return data.data() + static_cast<size_t>(r) * cols; }
};

// In-place Cholesky factorization A = L L^T (lower triangle of `a` on exit).
// Throws on a non-positive pivot, which signals a singular/indefinite system.
inline void cholesky_factor(Matrix& a) {
  const int n = a.rows;
  for (int j = 0; j < n; ++j) {
    double d = a(j, j);
    for (int k = 0; k < j; ++k) d -= a(j, k) * a(j, k);
    if (!(d > 0.0) || !std::isfinite(d))
      throw std::runtime_error("cholesky: matrix not positive definite");
    const double ljj = std::sqrt(d);
    a(j, j) = ljj;
    for (int i = j + 1; i < n; ++i) {
      double s = a(i, j);
      for (int k = 0; k < j; ++k) s -= a(i, k) * a(j, k);
      a(i, j) = s / ljj;
    }
  }
}

// Solve L y = b in place given the factor from cholesky_factor.
inline void cholesky_solve_lower(const Matrix& l, Vec& b) {
  const int n = l.rows;
  for (int i = 0; i < n; ++i) {
    double s = b[i];
    for (int k = 0; k < i; ++k) s -= l(i, k) * b[k];
    b[i] = s / l(i, i);
  }
}

// Solve L^T x = b in place.
inline void cholesky_solve_upper(const Matrix& l, Vec& b) {
  const int n = l.rows;
  for (int i = n - 1; i >= 0; --i) {
    double s = b[i];
    for (int k = i + 1; k < n; ++k) s -= l(k, i) * b[k];
    b[i] = s / l(i, i);
  }
}

}  // namespace opu
