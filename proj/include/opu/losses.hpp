// Distillation objectives and training drivers: forward-KL amortized MLE,
// MMD with reparameterized implicit gradients, and EMD with a conditional
// critic under a gradient penalty.
#pragma once

#include <chrono>
#include <cmath>
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
#include "opu/student.hpp"
#include "opu/teachers.hpp"

namespace opu {

enum class LossKind { kl, mmd, emd };

inline const char* loss_kind_name(LossKind k) {
  switch (k) {
    case LossKind::kl: return "kl";
    case LossKind::mmd: return "mmd";
    case LossKind::emd: return "emd";
  }
  return "?";
}

inline LossKind loss_kind_from_name(const std::string& s) {
  if (s == "kl") return LossKind::kl;
  if (s == "mmd") return LossKind::mmd;
  if (s == "emd") return LossKind::emd;
  throw std::invalid_argument("unknown loss kind: " + s);
}

struct StudentOpt {
  AdamState pm;
  AdamState cm;
};

inline StudentOpt make_student_opt(const StudentModel& m, double lr) {
  return {make_adam(m.pm, lr), make_adam(m.cm, lr)};
}

namespace detail {

struct StudentTape {
  ForwardTape pm;
  ForwardTape cm;
  StudentEval ev;
};

inline StudentTape student_forward_tape(const StudentModel& m, const Vec& x) {
  StudentTape t;
  Vec h = mlp_forward(m.pm, x, nullptr, &t.pm);
  const Vec g = mlp_forward(m.cm, m.cm_features.apply(x), nullptr, &t.cm);
  if (!all_finite(h) || !all_finite(g))
    throw std::runtime_error("student forward: non-finite net output");
  t.ev.g = g[0];
  const double eg = std::exp(t.ev.g);
  t.ev.precision_preclamp = eg;
  t.ev.alpha.alpha.resize(h.size());
  for (size_t k = 0; k < h.size(); ++k)
    t.ev.alpha.alpha[k] = std::max(h[k] * eg, kAlphaFloor);
  t.ev.h = SimplexPoint{std::move(h)};
  return t;
}

// Chain dL/dalpha through alpha = max(h e^g, floor) into net-space gradients.
// Clamped components contribute nothing.
inline void student_alpha_backward(const StudentModel& m, const StudentTape& t,
                                   const Vec& grad_alpha, MlpGrads* pm_grads,
                                   MlpGrads* cm_grads) {
  const int k = static_cast<int>(grad_alpha.size());
  const double eg = t.ev.precision_preclamp;
  Vec grad_h(k, 0.0);
  double grad_g = 0.0;
  for (int c = 0; c < k; ++c) {
    const double raw = t.ev.h[c] * eg;
    if (raw <= kAlphaFloor) continue;  // clamp subgradient
    grad_h[c] = grad_alpha[c] * eg;
    grad_g += grad_alpha[c] * raw;
  }
  if (pm_grads) mlp_backward(m.pm, t.pm, grad_h, pm_grads);
  if (cm_grads) mlp_backward(m.cm, t.cm, {grad_g}, cm_grads);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Forward KL (amortized MLE).

// loss(x) = -(1/S) sum_s dirichlet_log_pdf(student_alpha, pi_s)
inline double kl_loss(const StudentModel& m, const Vec& x, const ParticleCloud& cloud) {
  const DirichletParams alpha = student_alpha(m, x);
  double acc = 0.0;
  for (const auto& p : cloud.points) acc += dirichlet_log_pdf(alpha, p);
  return -acc / cloud.size();
}

// Loss plus exact gradients into the pm/cm nets (either may be null).
inline double kl_loss_grads(const StudentModel& m, const Vec& x,
                            const ParticleCloud& cloud, MlpGrads* pm_grads,
                            MlpGrads* cm_grads) {
  const auto tape = detail::student_forward_tape(m, x);
  const auto& alpha = tape.ev.alpha;
  const int k = alpha.dim();
  Vec mean_log(k, 0.0);
  double loss = 0.0;
  for (const auto& p : cloud.points) {
    loss += dirichlet_log_pdf(alpha, p);
    for (int c = 0; c < k; ++c) mean_log[c] += std::log(p[c]);
  }
  loss = -loss / cloud.size();
  for (double& v : mean_log) v /= cloud.size();
  // d loss / d alpha_c = -(psi(a0) - psi(a_c) + mean_log_c)
  const double psi_a0 = digamma(alpha.precision());
  Vec grad_alpha(k);
  for (int c = 0; c < k; ++c)
    grad_alpha[c] = -(psi_a0 - digamma(alpha.alpha[c]) + mean_log[c]);
  detail::student_alpha_backward(m, tape, grad_alpha, pm_grads, cm_grads);
  return loss;
}

// One alternating KL update: phi_1 then phi_2, each on a fresh forward pass.
inline double kl_step(StudentModel& m, const Vec& x, const ParticleCloud& cloud,
                      StudentOpt& opt) {
  auto pm_grads = zero_grads(m.pm);
  const double loss = kl_loss_grads(m, x, cloud, &pm_grads, nullptr);
  adam_step(m.pm, pm_grads, opt.pm);
  auto cm_grads = zero_grads(m.cm);
  kl_loss_grads(m, x, cloud, nullptr, &cm_grads);
  adam_step(m.cm, cm_grads, opt.cm);
  return loss;
}

// ---------------------------------------------------------------------------
// MMD with reparameterized samples and implicit Gamma gradients.

namespace detail {

// MMD^2 between the cloud and S' fresh student samples, with gradients chained
// to the requested net. Returns the loss of this draw.
inline double mmd_loss_grads(const StudentModel& m, const Vec& x,
                             const ParticleCloud& cloud, const KernelSpec& kernel,
                             int sample_count, RngState& rng, MlpGrads* pm_grads,
                             MlpGrads* cm_grads) {
  const auto tape = student_forward_tape(m, x);
  auto draws = draw_student_samples(tape.ev.alpha, sample_count, rng);
  std::vector<SimplexPoint> q;
  q.reserve(draws.size());
  for (const auto& d : draws) q.push_back(d.point);
  std::vector<Vec> grad_pi;
  const double loss = mmd2_with_sample_grads(cloud.points, q, kernel, &grad_pi);
  if (!std::isfinite(loss)) throw std::runtime_error("mmd_step: non-finite loss");
  const Vec grad_alpha = chain_grads_to_alpha(draws, grad_pi, tape.ev.alpha, rng);
  student_alpha_backward(m, tape, grad_alpha, pm_grads, cm_grads);
  return loss;
}

}  // namespace detail

// One alternating MMD update, re-sampling between the phi_1 and phi_2 passes.
inline double mmd_step(StudentModel& m, const Vec& x, const ParticleCloud& cloud,
                       const KernelSpec& kernel, int sample_count, StudentOpt& opt,
                       RngState& rng) {
  if (sample_count < 2) throw std::invalid_argument("mmd_step: needs S' >= 2");
  auto pm_grads = zero_grads(m.pm);
  const double loss =
      detail::mmd_loss_grads(m, x, cloud, kernel, sample_count, rng, &pm_grads, nullptr);
  adam_step(m.pm, pm_grads, opt.pm);
  auto cm_grads = zero_grads(m.cm);
  detail::mmd_loss_grads(m, x, cloud, kernel, sample_count, rng, nullptr, &cm_grads);
  adam_step(m.cm, cm_grads, opt.cm);
  return loss;
}

// ---------------------------------------------------------------------------
// Conditional critic psi(pi; w, x) = nn3(concat(nn1(x), nn2(pi))).

struct CriticModel {
  MlpParams nn1;  // input-feature branch
  MlpParams nn2;  // simplex branch
  MlpParams nn3;  // merge head, scalar output
};

inline void validate_critic(const CriticModel& c) {
  validate_mlp(c.nn1);
  validate_mlp(c.nn2);
  validate_mlp(c.nn3);
  if (c.nn3.input_dim() != c.nn1.output_dim() + c.nn2.output_dim())
    throw std::invalid_argument("critic: nn3 input must equal nn1+nn2 outputs");
  if (c.nn3.output_dim() != 1)
    throw std::invalid_argument("critic: nn3 must have scalar output");
}

inline CriticModel make_critic(int input_dim, int num_classes,
                               const std::vector<int>& branch_hidden,
                               const std::vector<int>& head_hidden, RngState& rng) {
  CriticModel c;
  std::vector<int> d1 = {input_dim};
  d1.insert(d1.end(), branch_hidden.begin(), branch_hidden.end());
  std::vector<int> d2 = {num_classes};
  d2.insert(d2.end(), branch_hidden.begin(), branch_hidden.end());
  c.nn1 = make_mlp(d1, Activation::relu, rng);
  c.nn2 = make_mlp(d2, Activation::relu, rng);
  std::vector<int> d3 = {2 * branch_hidden.back()};
  d3.insert(d3.end(), head_hidden.begin(), head_hidden.end());
  d3.push_back(1);
  c.nn3 = make_mlp(d3, Activation::identity, rng);
  return c;
}

struct CriticTape {
  ForwardTape t1, t2, t3;
};

inline double critic_forward(const CriticModel& c, const Vec& x, const Vec& pi,
                             CriticTape* tape = nullptr) {
  CriticTape local;
  CriticTape& t = tape ? *tape : local;
  const Vec f1 = mlp_forward(c.nn1, x, nullptr, &t.t1);
  const Vec f2 = mlp_forward(c.nn2, pi, nullptr, &t.t2);
  Vec merged;
  merged.reserve(f1.size() + f2.size());
  merged.insert(merged.end(), f1.begin(), f1.end());
  merged.insert(merged.end(), f2.begin(), f2.end());
  const Vec out = mlp_forward(c.nn3, merged, nullptr, &t.t3);
  return out[0];
}

struct CriticGrads {
  MlpGrads g1, g2, g3;
};

inline CriticGrads zero_critic_grads(const CriticModel& c) {
  return {zero_grads(c.nn1), zero_grads(c.nn2), zero_grads(c.nn3)};
}

inline void accumulate_critic_grads(CriticGrads& into, const CriticGrads& g,
                                    double scale = 1.0) {
  accumulate_grads(into.g1, g.g1, scale);
  accumulate_grads(into.g2, g.g2, scale);
  accumulate_grads(into.g3, g.g3, scale);
}

// Backward through the composition; returns d psi / d pi, optionally filling
// parameter gradients and d psi / d x.
inline Vec critic_backward(const CriticModel& c, const CriticTape& tape,
                           double upstream, CriticGrads* grads = nullptr,
                           Vec* grad_x = nullptr) {
  const Vec merged_grad =
      mlp_backward(c.nn3, tape.t3, {upstream}, grads ? &grads->g3 : nullptr);
  const int n1 = c.nn1.output_dim();
  const Vec up1(merged_grad.begin(), merged_grad.begin() + n1);
  const Vec up2(merged_grad.begin() + n1, merged_grad.end());
  const Vec gx = mlp_backward(c.nn1, tape.t1, up1, grads ? &grads->g1 : nullptr);
  if (grad_x) *grad_x = gx;
  return mlp_backward(c.nn2, tape.t2, up2, grads ? &grads->g2 : nullptr);
}

// ---------------------------------------------------------------------------
// Gradient penalty R(w) = mean over interpolates of (||grad_pi psi|| - 1)^2.
// Interpolates consume the stream as (index into P, index into Q, uniform u)
// per pair. Parameter gradients use the exact identity
//   d||g||/dw = (g/||g||)^T dg/dw,
// with the directional second derivative evaluated by central differences of
// the parameter gradient along g/||g||.
inline double gradient_penalty(const CriticModel& c, const Vec& x,
                               const std::vector<SimplexPoint>& cloud_p,
                               const std::vector<SimplexPoint>& samples_q,
                               int num_pairs, RngState& rng,
                               CriticGrads* grads = nullptr) {
  if (cloud_p.empty() || samples_q.empty())
    throw std::invalid_argument("gradient_penalty: empty point set");
  const int k = cloud_p[0].dim();
  double penalty = 0.0;
  for (int pair = 0; pair < num_pairs; ++pair) {
    const auto& p = cloud_p[rng.next_u64() % cloud_p.size()];
    const auto& q = samples_q[rng.next_u64() % samples_q.size()];
    const double u = rng.uniform();
    Vec hat(k);
    for (int i = 0; i < k; ++i) hat[i] = u * p[i] + (1.0 - u) * q[i];
    CriticTape tape;
    critic_forward(c, x, hat, &tape);
    const Vec g = critic_backward(c, tape, 1.0);
    double norm2 = 0.0;
    for (double v : g) norm2 += v * v;
    const double norm = std::sqrt(norm2);
    penalty += (norm - 1.0) * (norm - 1.0);
    if (grads && norm > 1e-12) {
      // d penalty_i / dw = 2 (||g|| - 1) * (g/||g||)^T dg/dw
      Vec dir(k);
      for (int i = 0; i < k; ++i) dir[i] = g[i] / norm;
      const double eps = 1e-5;
      Vec plus(k), minus(k);
      for (int i = 0; i < k; ++i) {
        plus[i] = hat[i] + eps * dir[i];
        minus[i] = hat[i] - eps * dir[i];
      }
      CriticGrads gp = zero_critic_grads(c);
      CriticGrads gm = zero_critic_grads(c);
      CriticTape tp, tm;
      critic_forward(c, x, plus, &tp);
      critic_backward(c, tp, 1.0, &gp);
      critic_forward(c, x, minus, &tm);
      critic_backward(c, tm, 1.0, &gm);
      const double scale = 2.0 * (norm - 1.0) / (2.0 * eps * num_pairs);
      accumulate_critic_grads(*grads, gp, scale);
      accumulate_critic_grads(*grads, gm, -scale);
    }
  }
  return penalty / num_pairs;
}

struct CriticOpt {
  AdamState a1, a2, a3;
};

inline CriticOpt make_critic_opt(const CriticModel& c, double lr) {
  return {make_adam(c.nn1, lr), make_adam(c.nn2, lr), make_adam(c.nn3, lr)};
}

inline void critic_adam_step(CriticModel& c, const CriticGrads& grads, CriticOpt& opt) {
  adam_step(c.nn1, grads.g1, opt.a1);
  adam_step(c.nn2, grads.g2, opt.a2);
  adam_step(c.nn3, grads.g3, opt.a3);
}

// One critic ascent step on mean_P psi - mean_Q psi - lambda R(w).
// Returns the unpenalized witness gap of this evaluation.
inline double emd_critic_update(CriticModel& c, const Vec& x,
                                const std::vector<SimplexPoint>& cloud_p,
                                const std::vector<SimplexPoint>& samples_q,
                                double lambda, int gp_pairs, CriticOpt& opt,
                                RngState& rng) {
  // minimize the negation: mean_Q psi - mean_P psi + lambda R
  CriticGrads grads = zero_critic_grads(c);
  double mean_p = 0.0, mean_q = 0.0;
  for (const auto& p : cloud_p) {
    CriticTape tape;
    mean_p += critic_forward(c, x, p.probs, &tape);
    critic_backward(c, tape, -1.0 / static_cast<double>(cloud_p.size()), &grads);
  }
  for (const auto& q : samples_q) {
    CriticTape tape;
    mean_q += critic_forward(c, x, q.probs, &tape);
    critic_backward(c, tape, 1.0 / static_cast<double>(samples_q.size()), &grads);
  }
  mean_p /= cloud_p.size();
  mean_q /= samples_q.size();
  if (lambda > 0.0) {
    CriticGrads gp_grads = zero_critic_grads(c);
    gradient_penalty(c, x, cloud_p, samples_q, gp_pairs, rng, &gp_grads);
    accumulate_critic_grads(grads, gp_grads, lambda);
  }
  const double objective = mean_p - mean_q;
  if (!std::isfinite(objective))
    throw std::runtime_error("emd_critic_update: non-finite objective");
  critic_adam_step(c, grads, opt);
  return objective;
}

struct DistillConfig {
  LossKind loss = LossKind::mmd;
  int steps = 2000;
  int sample_count = 64;  // S'
  double lambda = 10.0;   // gradient penalty coefficient
  int t_stu = 1;
  int t_wit = 5;
  int gp_pairs = 32;
  int input_batch = 1;  // inputs averaged per step (kl/mmd only)
  double student_lr = 1e-3;
  double critic_lr = 1e-3;
  double cm_adam_eps = 1e-8;  // raise toward 1e-2 as a noise floor for the cm
  KernelSpec kernel;  // mmd: empty components means median-heuristic default
  uint64_t seed = 1;
};

inline void validate_distill_config(const DistillConfig& cfg) {
  if (cfg.loss == LossKind::mmd && cfg.sample_count < 2)
    throw std::invalid_argument("distill: mmd needs S' >= 2");
  if (cfg.lambda < 0.0) throw std::invalid_argument("distill: lambda must be >= 0");
  if (cfg.steps < 0 || cfg.t_stu < 1 || cfg.t_wit < 1)
    throw std::invalid_argument("distill: step counts must be >= 1");
  if (cfg.input_batch < 1)
    throw std::invalid_argument("distill: input batch must be >= 1");
  if (cfg.loss == LossKind::emd && cfg.input_batch != 1)
    throw std::invalid_argument("distill: emd runs one input per step");
}

namespace detail {

// Student phase of one EMD step: ascend mean psi over fresh student samples
// (loss = -mean psi), gradients through the reparameterization path.
inline double emd_student_pass(StudentModel& m, const CriticModel& c, const Vec& x,
                               int sample_count, RngState& rng, MlpGrads* pm_grads,
                               MlpGrads* cm_grads) {
  const auto tape = student_forward_tape(m, x);
  auto draws = draw_student_samples(tape.ev.alpha, sample_count, rng);
  double loss = 0.0;
  std::vector<Vec> grad_pi(draws.size());
  for (size_t s = 0; s < draws.size(); ++s) {
    CriticTape ct;
    loss -= critic_forward(c, x, draws[s].point.probs, &ct) / draws.size();
    grad_pi[s] = critic_backward(c, ct, -1.0 / static_cast<double>(draws.size()));
  }
  if (!std::isfinite(loss)) throw std::runtime_error("emd_step: non-finite student loss");
  const Vec grad_alpha = chain_grads_to_alpha(draws, grad_pi, tape.ev.alpha, rng);
  student_alpha_backward(m, tape, grad_alpha, pm_grads, cm_grads);
  return loss;
}

}  // namespace detail

// One outer EMD step: T_stu alternating student updates, then T_wit critic
// ascent steps with the gradient penalty. Returns the last critic objective.
inline double emd_step(StudentModel& m, CriticModel& c, const Vec& x,
                       const ParticleCloud& cloud, const DistillConfig& cfg,
                       StudentOpt& opt_m, CriticOpt& opt_c, RngState& rng) {
  for (int t = 0; t < cfg.t_stu; ++t) {
    auto pm_grads = zero_grads(m.pm);
    detail::emd_student_pass(m, c, x, cfg.sample_count, rng, &pm_grads, nullptr);
    adam_step(m.pm, pm_grads, opt_m.pm);
    auto cm_grads = zero_grads(m.cm);
    detail::emd_student_pass(m, c, x, cfg.sample_count, rng, nullptr, &cm_grads);
    adam_step(m.cm, cm_grads, opt_m.cm);
  }
  double objective = 0.0;
  for (int t = 0; t < cfg.t_wit; ++t) {
    const DirichletParams alpha = student_alpha(m, x);
    std::vector<SimplexPoint> q;
    q.reserve(cfg.sample_count);
    for (int s = 0; s < cfg.sample_count; ++s) q.push_back(sample_dirichlet(alpha, rng));
    objective =
        emd_critic_update(c, x, cloud.points, q, cfg.lambda, cfg.gp_pairs, opt_c, rng);
  }
  return objective;
}

// ---------------------------------------------------------------------------
// Aggregated training driver.

struct LossTraceEntry {
  long step = 0;
  int input_id = 0;
  LossKind kind = LossKind::mmd;
  double loss = 0.0;
  double wall_ms = 0.0;
};

struct DistillResult {
  StudentModel model;
  CriticModel critic;  // emd only; empty otherwise
  std::vector<LossTraceEntry> trace;
  KernelSpec kernel_used;  // mmd only
};

// Iterates: sample an input uniformly from the store, dispatch one step of
// the configured objective. Deterministic given the seed.
inline DistillResult distill(const StudentModel& init, const ParticleStore& store,
                             const DistillConfig& cfg, RngState& rng,
                             const CriticModel* critic_init = nullptr) {
  validate_student(init);
  validate_distill_config(cfg);
  if (store.clouds.empty()) throw std::invalid_argument("distill: empty particle store");
  if (store.num_classes != init.num_classes())
    throw std::invalid_argument("distill: class count mismatch");

  if (store.inputs.rows != static_cast<int>(store.clouds.size()))
    throw std::invalid_argument("distill: particle store has no input features attached");

  DistillResult res;
  res.model = init;
  StudentOpt opt = make_student_opt(res.model, cfg.student_lr);
  opt.cm.eps = cfg.cm_adam_eps;
  CriticOpt critic_opt;
  if (cfg.loss == LossKind::emd) {
    if (critic_init) {
      res.critic = *critic_init;
    } else {
      RngState crng = rng.split(0x0c7171c);
      res.critic = make_critic(store.inputs.cols, store.num_classes, {32, 32}, {32}, crng);
    }
    validate_critic(res.critic);
    critic_opt = make_critic_opt(res.critic, cfg.critic_lr);
  }
  KernelSpec kernel = cfg.kernel;
  if (cfg.loss == LossKind::mmd && kernel.components.empty()) {
    // median heuristic over the first sampled cloud, frozen afterwards
    const auto& first = store.clouds[rng.split(0xbadc0de).next_u64() % store.clouds.size()];
    kernel = default_kernel(first.points);
  }
  res.kernel_used = kernel;

  res.trace.reserve(cfg.steps);
  for (long step = 0; step < cfg.steps; ++step) {
    std::vector<size_t> batch(cfg.input_batch);
    for (auto& idx : batch) idx = rng.next_u64() % store.clouds.size();
    const int first_id = store.clouds[batch[0]].input_id;
    const auto t0 = std::chrono::steady_clock::now();
    double loss = 0.0;
    try {
      if (cfg.loss == LossKind::emd) {
        loss = emd_step(res.model, res.critic, store.input_row(batch[0]),
                        store.clouds[batch[0]], cfg, opt, critic_opt, rng);
      } else if (cfg.input_batch == 1) {
        const auto& cloud = store.clouds[batch[0]];
        const Vec x = store.input_row(batch[0]);
        loss = cfg.loss == LossKind::kl
                   ? kl_step(res.model, x, cloud, opt)
                   : mmd_step(res.model, x, cloud, kernel, cfg.sample_count, opt, rng);
      } else {
        // batched variant: per-input losses averaged, alternating updates
        const double scale = 1.0 / cfg.input_batch;
        auto pm_grads = zero_grads(res.model.pm);
        for (size_t idx : batch) {
          const Vec x = store.input_row(idx);
          auto g = zero_grads(res.model.pm);
          loss += scale * (cfg.loss == LossKind::kl
                               ? kl_loss_grads(res.model, x, store.clouds[idx], &g, nullptr)
                               : detail::mmd_loss_grads(res.model, x, store.clouds[idx],
                                                        kernel, cfg.sample_count, rng, &g,
                                                        nullptr));
          accumulate_grads(pm_grads, g, scale);
        }
        adam_step(res.model.pm, pm_grads, opt.pm);
        auto cm_grads = zero_grads(res.model.cm);
        for (size_t idx : batch) {
          const Vec x = store.input_row(idx);
          auto g = zero_grads(res.model.cm);
          if (cfg.loss == LossKind::kl)
            kl_loss_grads(res.model, x, store.clouds[idx], nullptr, &g);
          else
            detail::mmd_loss_grads(res.model, x, store.clouds[idx], kernel,
                                   cfg.sample_count, rng, nullptr, &g);
          accumulate_grads(cm_grads, g, scale);
        }
        adam_step(res.model.cm, cm_grads, opt.cm);
      }
    } catch (const std::exception& e) {
      throw std::runtime_error("distill: step " + std::to_string(step) + " on input " +
                               std::to_string(first_id) + ": " + e.what());
    }
    const auto t1 = std::chrono::steady_clock::now();
    res.trace.push_back({step, first_id, cfg.loss, loss,
                         std::chrono::duration<double, std::milli>(t1 - t0).count()});
  }
  return res;
}

}  // namespace opu
