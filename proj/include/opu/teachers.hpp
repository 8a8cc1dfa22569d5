// Bayesian teachers: Polya-Gamma Gibbs for logistic regression, vanilla SGLD
// over an MLP, MC-dropout ensembles, and the push-forward of posterior
// samples to per-input particle clouds on the simplex.
#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "opu/core.hpp"
#include "opu/nnet.hpp"
#include "opu/random.hpp"
#include "opu/sampling.hpp"

namespace opu {

enum class TeacherKind { blr, sgld, mcdp };

inline const char* teacher_kind_name(TeacherKind k) {
  switch (k) {
    case TeacherKind::blr: return "blr";
    case TeacherKind::sgld: return "sgld";
    case TeacherKind::mcdp: return "mcdp";
  }
  return "?";
}

inline TeacherKind teacher_kind_from_name(const std::string& s) {
  if (s == "blr") return TeacherKind::blr;
  if (s == "sgld") return TeacherKind::sgld;
  if (s == "mcdp") return TeacherKind::mcdp;
  throw std::invalid_argument("unknown teacher kind: " + s);
}

// S posterior draws of teacher parameters: coefficient vectors (blr), full
// weight snapshots (sgld), or shared weights plus per-sample masks (mcdp).
struct PosteriorSampleSet {
  TeacherKind kind = TeacherKind::blr;
  int num_classes = 2;
  std::vector<Vec> blr_thetas;
  std::vector<MlpParams> sgld_snapshots;
  MlpParams mcdp_shared;
  std::vector<DropoutMask> mcdp_masks;
  // provenance
  int burn_in = 0;
  int thin = 1;
  uint64_t seed = 0;

  int size() const {
    switch (kind) {
      case TeacherKind::blr: return static_cast<int>(blr_thetas.size());
      case TeacherKind::sgld: return static_cast<int>(sgld_snapshots.size());
      case TeacherKind::mcdp: return static_cast<int>(mcdp_masks.size());
    }
    return 0;
  }

  // First m draws, preserving order.
  PosteriorSampleSet subset(int m) const {
    PosteriorSampleSet out = *this;
    if (kind == TeacherKind::blr)
      out.blr_thetas.assign(blr_thetas.begin(), blr_thetas.begin() + m);
    else if (kind == TeacherKind::sgld)
      out.sgld_snapshots.assign(sgld_snapshots.begin(), sgld_snapshots.begin() + m);
    else
      out.mcdp_masks.assign(mcdp_masks.begin(), mcdp_masks.begin() + m);
    return out;
  }
};

// The S simplex points obtained by pushing one input through every draw.
struct ParticleCloud {
  int input_id = 0;
  int num_classes = 0;
  std::vector<SimplexPoint> points;

  int size() const { return static_cast<int>(points.size()); }
};

struct BlrConfig {
  Vec prior_precision;  // diagonal Lambda, one entry per feature
  int burn_in = 200;
  int samples = 500;
  int thin = 1;
  uint64_t seed = 1;
};

struct LrSchedule {
  enum class Kind { constant, polynomial } kind = Kind::constant;
  double eps0 = 1e-4;
  double t0 = 1000.0;   // polynomial: eps0 / (1 + t/t0)^gamma
  double gamma = 0.55;

  double at(long t) const {
    if (kind == Kind::constant) return eps0;
    return eps0 / std::pow(1.0 + static_cast<double>(t) / t0, gamma);
  }
};

struct SgldConfig {
  LrSchedule step_size;
  int batch = 32;
  int burn_in = 1000;
  int samples = 100;
  int thin = 1;
  double prior_precision = 1.0;
  uint64_t seed = 1;
};

struct McdpConfig {
  double dropout_rate = 0.5;
  bool dropout_on_input = false;  // masks cover hidden-layer inputs by default
  double lr = 1e-2;
  int steps = 2000;
  int batch = 32;
  uint64_t seed = 1;
};

inline double sigmoid(double t) { return 1.0 / (1.0 + std::exp(-t)); }

// ---------------------------------------------------------------------------
// Polya-Gamma Gibbs sampler for Bayesian logistic regression. Alternates
//   omega_n | theta ~ PG(1, x_n^T theta)
//   theta | omega   ~ N(m_w, V_w),  V_w = (X^T Omega X + Lambda)^-1,
//                                   m_w = V_w X^T (y - 1/2).
inline PosteriorSampleSet blr_pg_gibbs(const Matrix& x, const std::vector<int>& y,
                                       const BlrConfig& cfg, RngState& rng) {
  const int n = x.rows, d = x.cols;
  if (static_cast<int>(y.size()) != n)
    throw std::invalid_argument("blr_pg_gibbs: label count mismatch");
  for (int v : y)
    if (v != 0 && v != 1) throw std::invalid_argument("blr_pg_gibbs: labels must be 0/1");
  if (static_cast<int>(cfg.prior_precision.size()) != d)
    throw std::invalid_argument("blr_pg_gibbs: prior precision size mismatch");
  for (double l : cfg.prior_precision)
    if (!(l > 0.0)) throw std::invalid_argument("blr_pg_gibbs: prior precision must be positive");
  if (!all_finite(x.data)) throw std::invalid_argument("blr_pg_gibbs: non-finite feature");

  Vec kappa(n);  // y - 1/2
  for (int i = 0; i < n; ++i) kappa[i] = y[i] - 0.5;
  Vec xt_kappa(d, 0.0);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) xt_kappa[j] += x(i, j) * kappa[i];

  Vec theta(d, 0.0);
  Vec omega(n, 0.0);
  PosteriorSampleSet out;
  out.kind = TeacherKind::blr;
  out.num_classes = 2;
  out.burn_in = cfg.burn_in;
  out.thin = cfg.thin;
  out.seed = rng.seed();
  out.blr_thetas.reserve(cfg.samples);

  const int total = cfg.burn_in + cfg.samples * std::max(1, cfg.thin);
  for (int iter = 0; iter < total; ++iter) {
    for (int i = 0; i < n; ++i) {
      double dot = 0.0;
      for (int j = 0; j < d; ++j) dot += x(i, j) * theta[j];
      omega[i] = sample_polya_gamma(dot, rng);
    }
    // A = X^T Omega X + Lambda
    Matrix a(d, d);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < d; ++j) {
        const double wj = omega[i] * x(i, j);
        for (int k = j; k < d; ++k) a(j, k) += wj * x(i, k);
      }
    for (int j = 0; j < d; ++j)
      for (int k = 0; k < j; ++k) a(j, k) = a(k, j);
    for (int j = 0; j < d; ++j) a(j, j) += cfg.prior_precision[j];
    try {
      cholesky_factor(a);
    } catch (const std::runtime_error&) {
      throw std::runtime_error("blr_pg_gibbs: singular conditional covariance solve");
    }
    Vec m = xt_kappa;
    cholesky_solve_lower(a, m);
    cholesky_solve_upper(a, m);
    Vec z(d);
    for (double& v : z) v = rng.normal();
    cholesky_solve_upper(a, z);  // z <- L^-T z, giving covariance A^-1
    for (int j = 0; j < d; ++j) theta[j] = m[j] + z[j];

    const int post = iter - cfg.burn_in;
    if (post >= 0 && post % std::max(1, cfg.thin) == 0 &&
        static_cast<int>(out.blr_thetas.size()) < cfg.samples)
      out.blr_thetas.push_back(theta);
  }
  return out;
}

// ---------------------------------------------------------------------------
// SGLD building blocks.

namespace detail {

// Mean NLL and summed gradients over the index set; upstream passes through
// the softmax head of the net.
inline double nll_grads(const MlpParams& net, const Matrix& x,
                        const std::vector<int>& y, const std::vector<int>& idx,
                        const DropoutMask* mask, MlpGrads* grads) {
  double loss = 0.0;
  for (int i : idx) {
    Vec in(x.cols);
    for (int j = 0; j < x.cols; ++j) in[j] = x(i, j);
    ForwardTape tape;
    const Vec out = mlp_forward(net, in, mask, &tape);
    const double p_label = std::max(out[y[i]], 1e-300);
    loss += -std::log(p_label);
    if (grads) {
      Vec upstream(out.size(), 0.0);
      upstream[y[i]] = -1.0 / p_label;
      mlp_backward(net, tape, upstream, grads);
    }
  }
  return loss / static_cast<double>(idx.size());
}

inline double full_data_nll(const MlpParams& net, const Matrix& x,
                            const std::vector<int>& y) {
  std::vector<int> all(x.rows);
  for (int i = 0; i < x.rows; ++i) all[i] = i;
  return nll_grads(net, x, y, all, nullptr, nullptr);
}

}  // namespace detail

// One SGLD transition: theta += eps * posterior_grad + N(0, 2 eps I).
// `posterior_grad` is the gradient of log p(theta | D) (ascent direction).
inline void sgld_update(MlpParams& net, const MlpGrads& posterior_grad, double eps,
                        RngState& rng) {
  const double noise_sd = std::sqrt(2.0 * eps);
  for (size_t li = 0; li < net.layers.size(); ++li) {
    auto& l = net.layers[li];
    for (size_t j = 0; j < l.W.data.size(); ++j)
      l.W.data[j] += eps * posterior_grad.dW[li].data[j] + noise_sd * rng.normal();
    for (size_t j = 0; j < l.b.size(); ++j)
      l.b[j] += eps * posterior_grad.db[li][j] + noise_sd * rng.normal();
  }
}

// Vanilla SGLD over a softmax-final net. The minibatch likelihood gradient is
// scaled by N/B so the chain targets the full posterior. Keeps every iterate
// after burn-in (thinning optional).
inline PosteriorSampleSet sgld_train(const Matrix& x, const std::vector<int>& y,
                                     const MlpParams& init, const SgldConfig& cfg,
                                     RngState& rng) {
  validate_mlp(init);
  if (init.layers.back().act != Activation::softmax)
    throw std::invalid_argument("sgld_train: architecture must end in softmax");
  const int n = x.rows;
  MlpParams net = init;
  const double initial_loss = detail::full_data_nll(net, x, y);
  int bad_streak = 0;

  PosteriorSampleSet out;
  out.kind = TeacherKind::sgld;
  out.num_classes = init.output_dim();
  out.burn_in = cfg.burn_in;
  out.thin = cfg.thin;
  out.seed = rng.seed();
  out.sgld_snapshots.reserve(cfg.samples);

  const int total = cfg.burn_in + cfg.samples * std::max(1, cfg.thin);
  std::vector<int> batch(cfg.batch);
  for (int t = 0; t < total; ++t) {
    for (int& b : batch) b = static_cast<int>(rng.next_u64() % n);
    auto grads = zero_grads(net);
    const double batch_loss = detail::nll_grads(net, x, y, batch, nullptr, &grads);
    if (batch_loss > 10.0 * std::max(initial_loss, 1e-12)) {
      if (++bad_streak >= 50)
        throw std::runtime_error("sgld_train: divergence guard tripped (loss > 10x initial)");
    } else {
      bad_streak = 0;
    }
    // log-posterior gradient: -(N/B) * sum-NLL-grad - prior_precision * theta
    const double scale = -static_cast<double>(n) / cfg.batch;
    auto posterior = zero_grads(net);
    accumulate_grads(posterior, grads, scale);
    for (size_t li = 0; li < net.layers.size(); ++li) {
      for (size_t j = 0; j < net.layers[li].W.data.size(); ++j)
        posterior.dW[li].data[j] -= cfg.prior_precision * net.layers[li].W.data[j];
      for (size_t j = 0; j < net.layers[li].b.size(); ++j)
        posterior.db[li][j] -= cfg.prior_precision * net.layers[li].b[j];
    }
    sgld_update(net, posterior, cfg.step_size.at(t), rng);

    const int post = t - cfg.burn_in;
    if (post >= 0 && post % std::max(1, cfg.thin) == 0 &&
        static_cast<int>(out.sgld_snapshots.size()) < cfg.samples)
      out.sgld_snapshots.push_back(net);
  }
  return out;
}

// Per-layer keep probabilities for an MCDP net at the given dropout rate.
inline Vec mcdp_keep_probs(const MlpParams& net, double dropout_rate,
                           bool dropout_on_input) {
  Vec keep(net.layers.size(), 1.0 - dropout_rate);
  if (!dropout_on_input && !keep.empty()) keep[0] = 1.0;
  return keep;
}

// Train the shared MCDP weights by SGD with a fresh dropout mask per
// minibatch.
inline MlpParams mcdp_train(const Matrix& x, const std::vector<int>& y,
                            const MlpParams& init, const McdpConfig& cfg,
                            RngState& rng) {
  validate_mlp(init);
  if (!(cfg.dropout_rate > 0.0 && cfg.dropout_rate < 1.0))
    throw std::invalid_argument("mcdp_train: dropout rate must be in (0,1)");
  const Vec keep = mcdp_keep_probs(init, cfg.dropout_rate, cfg.dropout_on_input);
  MlpParams net = init;
  const int n = x.rows;
  const double initial_loss = detail::full_data_nll(net, x, y);
  int bad_streak = 0;
  std::vector<int> batch(cfg.batch);
  for (int t = 0; t < cfg.steps; ++t) {
    for (int& b : batch) b = static_cast<int>(rng.next_u64() % n);
    const auto mask = sample_dropout_mask(net, keep, rng);
    auto grads = zero_grads(net);
    const double batch_loss = detail::nll_grads(net, x, y, batch, &mask, &grads);
    if (batch_loss > 10.0 * std::max(initial_loss, 1e-12)) {
      if (++bad_streak >= 50)
        throw std::runtime_error("mcdp_train: divergence guard tripped (loss > 10x initial)");
    } else {
      bad_streak = 0;
    }
    // average the summed batch gradients
    auto step_grads = zero_grads(net);
    accumulate_grads(step_grads, grads, 1.0 / cfg.batch);
    sgd_step(net, step_grads, cfg.lr);
  }
  return net;
}

// Draw S mask descriptors forming the MC-dropout ensemble; weights shared.
inline PosteriorSampleSet mcdp_sample(const MlpParams& trained, const Vec& keep_probs,
                                      int s, RngState& rng) {
  validate_mlp(trained);
  PosteriorSampleSet out;
  out.kind = TeacherKind::mcdp;
  out.num_classes = trained.output_dim();
  out.mcdp_shared = trained;
  out.seed = rng.seed();
  out.mcdp_masks.reserve(s);
  for (int i = 0; i < s; ++i)
    out.mcdp_masks.push_back(sample_dropout_mask(trained, keep_probs, rng));
  return out;
}

// ---------------------------------------------------------------------------
// Push-forward and Monte Carlo prediction.

inline SimplexPoint blr_predictive(const Vec& theta, const Vec& x) {
  double dot = 0.0;
  for (size_t j = 0; j < x.size(); ++j) dot += theta[j] * x[j];
  const double p1 = sigmoid(dot);
  return clamp_to_open_simplex({1.0 - p1, p1});
}

// pi_s = T_x(theta_s) for every posterior draw.
inline ParticleCloud pushforward(const PosteriorSampleSet& samples, const Vec& x,
                                 int input_id = 0) {
  ParticleCloud cloud;
  cloud.input_id = input_id;
  cloud.num_classes = samples.num_classes;
  cloud.points.reserve(samples.size());
  switch (samples.kind) {
    case TeacherKind::blr:
      for (const auto& theta : samples.blr_thetas) {
        if (theta.size() != x.size())
          throw std::invalid_argument("pushforward: input dimension mismatch");
        cloud.points.push_back(blr_predictive(theta, x));
      }
      break;
    case TeacherKind::sgld:
      for (const auto& snap : samples.sgld_snapshots)
        cloud.points.push_back(clamp_to_open_simplex(mlp_forward(snap, x)));
      break;
    case TeacherKind::mcdp:
      for (const auto& mask : samples.mcdp_masks)
        cloud.points.push_back(
            clamp_to_open_simplex(mlp_forward(samples.mcdp_shared, x, &mask)));
      break;
  }
  return cloud;
}

// Arithmetic mean of the particles.
inline SimplexPoint mc_predict(const ParticleCloud& cloud) {
  if (cloud.points.empty()) throw std::invalid_argument("mc_predict: empty cloud");
  Vec mean(cloud.num_classes, 0.0);
  for (const auto& p : cloud.points)
    for (int k = 0; k < cloud.num_classes; ++k) mean[k] += p[k];
  for (double& v : mean) v /= cloud.points.size();
  return SimplexPoint{std::move(mean)};
}

// ---------------------------------------------------------------------------
// Posterior sample file: binary payload per teacher kind plus a JSON sidecar
// with provenance (kind, S, burn-in, thinning, seed).

namespace detail {
inline constexpr char kPssMagic[8] = {'O', 'P', 'U', 'P', 'S', 'S', '0', '1'};

inline void write_mlp_inline(std::ostream& os, const MlpParams& p) {
  write_u32(os, static_cast<uint32_t>(p.layers.size()));
  for (const auto& l : p.layers) {
    write_u32(os, static_cast<uint32_t>(l.W.rows));
    write_u32(os, static_cast<uint32_t>(l.W.cols));
    write_u32(os, static_cast<uint32_t>(l.act));
  }
  for (const auto& l : p.layers) {
    write_f64s(os, l.W.data);
    write_f64s(os, l.b);
  }
}

inline MlpParams read_mlp_inline(std::istream& is) {
  MlpParams p;
  p.layers.resize(read_u32(is));
  for (auto& l : p.layers) {
    const uint32_t rows = read_u32(is);
    const uint32_t cols = read_u32(is);
    l.act = static_cast<Activation>(read_u32(is));
    l.W = Matrix(static_cast<int>(rows), static_cast<int>(cols));
    l.b.assign(rows, 0.0);
  }
  for (auto& l : p.layers) {
    read_f64s(is, l.W.data);
    read_f64s(is, l.b);
  }
  return p;
}
}  // namespace detail

inline void save_posterior(const std::string& path, const PosteriorSampleSet& set,
                           const nlohmann::json& extra_sidecar = nlohmann::json::object()) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("save_posterior: cannot open " + path);
  os.write(detail::kPssMagic, 8);
  detail::write_u32(os, 1);
  detail::write_u32(os, static_cast<uint32_t>(set.kind));
  detail::write_u32(os, static_cast<uint32_t>(set.num_classes));
  detail::write_u32(os, static_cast<uint32_t>(set.size()));
  switch (set.kind) {
    case TeacherKind::blr: {
      const uint32_t dim =
          set.blr_thetas.empty() ? 0 : static_cast<uint32_t>(set.blr_thetas[0].size());
      detail::write_u32(os, dim);
      for (const auto& t : set.blr_thetas) detail::write_f64s(os, t);
      break;
    }
    case TeacherKind::sgld:
      for (const auto& snap : set.sgld_snapshots) detail::write_mlp_inline(os, snap);
      break;
    case TeacherKind::mcdp: {
      detail::write_mlp_inline(os, set.mcdp_shared);
      if (!set.mcdp_masks.empty()) {
        detail::write_f64s(os, set.mcdp_masks[0].keep_prob);
        for (const auto& mask : set.mcdp_masks)
          for (const auto& layer : mask.keep)
            os.write(reinterpret_cast<const char*>(layer.data()),
                     static_cast<std::streamsize>(layer.size()));
      }
      break;
    }
  }
  if (!os) throw std::runtime_error("save_posterior: write failed for " + path);
  os.close();
  nlohmann::json sidecar = extra_sidecar;
  sidecar["kind"] = teacher_kind_name(set.kind);
  sidecar["S"] = set.size();
  sidecar["num_classes"] = set.num_classes;
  sidecar["burn_in"] = set.burn_in;
  sidecar["thin"] = set.thin;
  sidecar["seed"] = set.seed;
  std::ofstream js(path + ".json", std::ios::trunc);
  js << sidecar.dump(2) << "\n";
}

inline PosteriorSampleSet load_posterior(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_posterior: cannot open " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, detail::kPssMagic, 8) != 0)
    throw std::runtime_error("load_posterior: bad magic in " + path);
  if (detail::read_u32(is) != 1)
    throw std::runtime_error("load_posterior: unsupported version");
  PosteriorSampleSet set;
  set.kind = static_cast<TeacherKind>(detail::read_u32(is));
  set.num_classes = static_cast<int>(detail::read_u32(is));
  const uint32_t s = detail::read_u32(is);
  switch (set.kind) {
    case TeacherKind::blr: {
      const uint32_t dim = detail::read_u32(is);
      set.blr_thetas.assign(s, Vec(dim, 0.0));
      for (auto& t : set.blr_thetas) detail::read_f64s(is, t);
      break;
    }
    case TeacherKind::sgld:
      set.sgld_snapshots.reserve(s);
      for (uint32_t i = 0; i < s; ++i)
        set.sgld_snapshots.push_back(detail::read_mlp_inline(is));
      break;
    case TeacherKind::mcdp: {
      set.mcdp_shared = detail::read_mlp_inline(is);
      Vec keep_prob(set.mcdp_shared.layers.size(), 1.0);
      detail::read_f64s(is, keep_prob);
      set.mcdp_masks.reserve(s);
      for (uint32_t i = 0; i < s; ++i) {
        DropoutMask mask;
        mask.keep_prob = keep_prob;
        mask.keep.resize(set.mcdp_shared.layers.size());
        for (size_t li = 0; li < set.mcdp_shared.layers.size(); ++li) {
          mask.keep[li].resize(set.mcdp_shared.layers[li].W.cols);
          is.read(reinterpret_cast<char*>(mask.keep[li].data()),
                  static_cast<std::streamsize>(mask.keep[li].size()));
        }
        set.mcdp_masks.push_back(std::move(mask));
      }
      break;
    }
  }
  if (!is) throw std::runtime_error("load_posterior: truncated file " + path);
  // provenance from the sidecar when present
  std::ifstream js(path + ".json");
  if (js) {
    nlohmann::json sidecar;
    js >> sidecar;
    set.burn_in = sidecar.value("burn_in", 0);
    set.thin = sidecar.value("thin", 1);
    set.seed = sidecar.value("seed", uint64_t{0});
  }
  return set;
}

// ---------------------------------------------------------------------------
// Particle store: one record per (input id, sample id) holding K little-endian
// f64 values, with a JSON sidecar {K, S, input count, teacher kind, seed}.

struct ParticleStore {
  int num_classes = 0;
  int samples_per_input = 0;
  TeacherKind kind = TeacherKind::blr;
  uint64_t seed = 0;
  std::vector<ParticleCloud> clouds;
  Matrix inputs;  // in-memory companion; the file keeps features in the dataset

  Vec input_row(size_t i) const {
    Vec x(inputs.cols);
    for (int j = 0; j < inputs.cols; ++j) x[j] = inputs(static_cast<int>(i), j);
    return x;
  }
};

inline ParticleStore make_particle_store(const PosteriorSampleSet& samples,
                                         const Matrix& inputs) {
  ParticleStore store;
  store.num_classes = samples.num_classes;
  store.samples_per_input = samples.size();
  store.kind = samples.kind;
  store.seed = samples.seed;
  store.inputs = inputs;
  store.clouds.reserve(inputs.rows);
  for (int i = 0; i < inputs.rows; ++i) {
    Vec x(inputs.cols);
    for (int j = 0; j < inputs.cols; ++j) x[j] = inputs(i, j);
    store.clouds.push_back(pushforward(samples, x, i));
  }
  return store;
}

inline void save_particles(const std::string& path, const ParticleStore& store,
                           const nlohmann::json& extra_sidecar = nlohmann::json::object()) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("save_particles: cannot open " + path);
  for (const auto& cloud : store.clouds)
    for (const auto& p : cloud.points)
      os.write(reinterpret_cast<const char*>(p.probs.data()),
               static_cast<std::streamsize>(p.probs.size() * sizeof(double)));
  os.close();
  nlohmann::json sidecar = extra_sidecar;
  sidecar["K"] = store.num_classes;
  sidecar["S"] = store.samples_per_input;
  sidecar["input_count"] = store.clouds.size();
  sidecar["teacher_kind"] = teacher_kind_name(store.kind);
  sidecar["seed"] = store.seed;
  std::ofstream js(path + ".json", std::ios::trunc);
  js << sidecar.dump(2) << "\n";
}

inline ParticleStore load_particles(const std::string& path) {
  std::ifstream js(path + ".json");
  if (!js) throw std::runtime_error("load_particles: missing sidecar for " + path);
  nlohmann::json sidecar;
  js >> sidecar;
  ParticleStore store;
  store.num_classes = sidecar.at("K").get<int>();
  store.samples_per_input = sidecar.at("S").get<int>();
  store.kind = teacher_kind_from_name(sidecar.at("teacher_kind").get<std::string>());
  store.seed = sidecar.at("seed").get<uint64_t>();
  const size_t inputs = sidecar.at("input_count").get<size_t>();
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_particles: cannot open " + path);
  store.clouds.resize(inputs);
  for (size_t i = 0; i < inputs; ++i) {
    auto& cloud = store.clouds[i];
    cloud.input_id = static_cast<int>(i);
    cloud.num_classes = store.num_classes;
    cloud.points.resize(store.samples_per_input);
    for (auto& p : cloud.points) {
      p.probs.resize(store.num_classes);
      is.read(reinterpret_cast<char*>(p.probs.data()),
              static_cast<std::streamsize>(p.probs.size() * sizeof(double)));
    }
  }
  if (!is) throw std::runtime_error("load_particles: truncated file " + path);
  return store;
}

}  // namespace opu
