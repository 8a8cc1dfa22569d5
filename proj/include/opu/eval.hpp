// Detection metrics (rank-based AUROC, step-summed AUPR), the
// misclassification and OOD tasks, the amortization-gap diagnostic, and the
// one-pass vs Monte Carlo timing harness.
#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "opu/core.hpp"
#include "opu/kernels.hpp"
#include "opu/losses.hpp"
#include "opu/student.hpp"
#include "opu/teachers.hpp"

namespace opu {

// Higher score means "more likely the positive event" (misclassified or OOD).
struct ScoredExample {
  double score = 0.0;
  int label = 0;  // 1 = positive
};

// Rank-based (Mann-Whitney) AUROC; ties contribute 1/2 via midranks.
inline double auroc(std::vector<ScoredExample> examples) {
  size_t n_pos = 0;
  for (const auto& e : examples) {
    if (!std::isfinite(e.score)) throw std::invalid_argument("auroc: non-finite score");
    n_pos += e.label == 1;
  }
  const size_t n_neg = examples.size() - n_pos;
  if (n_pos == 0 || n_neg == 0)
    throw std::invalid_argument("auroc: needs both a positive and a negative example");
  std::sort(examples.begin(), examples.end(),
            [](const ScoredExample& a, const ScoredExample& b) { return a.score < b.score; });
  double rank_sum_pos = 0.0;
  size_t i = 0;
  while (i < examples.size()) {
    size_t j = i;
    while (j < examples.size() && examples[j].score == examples[i].score) ++j;
    const double midrank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j));
    for (size_t t = i; t < j; ++t)
      if (examples[t].label == 1) rank_sum_pos += midrank;
    i = j;
  }
  const double u = rank_sum_pos - 0.5 * n_pos * (n_pos + 1.0);
  return u / (static_cast<double>(n_pos) * n_neg);
}

// Area under precision-recall via step-wise summation over descending-score
// thresholds, ties grouped, no interpolation.
inline double aupr(std::vector<ScoredExample> examples) {
  size_t n_pos = 0;
  for (const auto& e : examples) {
    if (!std::isfinite(e.score)) throw std::invalid_argument("aupr: non-finite score");
    n_pos += e.label == 1;
  }
  if (n_pos == 0) throw std::invalid_argument("aupr: needs at least one positive");
  std::sort(examples.begin(), examples.end(),
            [](const ScoredExample& a, const ScoredExample& b) { return a.score > b.score; });
  double area = 0.0;
  double recall_prev = 0.0;
  size_t tp = 0, fp = 0;
  size_t i = 0;
  while (i < examples.size()) {
    size_t j = i;
    while (j < examples.size() && examples[j].score == examples[i].score) ++j;
    for (size_t t = i; t < j; ++t)
      (examples[t].label == 1 ? tp : fp) += 1;
    const double recall = static_cast<double>(tp) / n_pos;
    const double precision = static_cast<double>(tp) / (tp + fp);
    area += (recall - recall_prev) * precision;
    recall_prev = recall;
    i = j;
  }
  return area;
}

// One row of the results grid; serialized as a JSON line.
struct MetricsRecord {
  std::string model;    // e.g. "teacher-mcdp", "opu-mcdp-mmd"
  std::string task;     // "misc" | "ood" | "timing"
  std::string measure;  // "E" | "P" | "D" | "C" | ""
  double auroc_value = std::numeric_limits<double>::quiet_NaN();
  double aupr_value = std::numeric_limits<double>::quiet_NaN();
  std::optional<double> accuracy;
  double wall_time_s = 0.0;
  int n_examples = 0;
  int n_positive = 0;
  uint64_t seed = 0;
  std::string config_hash;
};

inline nlohmann::json metrics_to_json(const MetricsRecord& r) {
  // JSON has no NaN; absent metrics serialize as null
  auto num_or_null = [](double v) {
    return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr);
  };
  nlohmann::json j{{"model", r.model},
                   {"task", r.task},
                   {"measure", r.measure},
                   {"auroc", num_or_null(r.auroc_value)},
                   {"aupr", num_or_null(r.aupr_value)},
                   {"wall_time_s", r.wall_time_s},
                   {"n_examples", r.n_examples},
                   {"n_positive", r.n_positive},
                   {"seed", r.seed},
                   {"config_hash", r.config_hash}};
  if (r.accuracy)
    j["accuracy"] = *r.accuracy;
  else
    j["accuracy"] = nullptr;
  // scoring conventions, recorded with every emitted record
  if (r.task == "misc") j["positive_class"] = "misclassified";
  if (r.task == "ood") j["positive_class"] = "ood";
  if (r.task == "misc" || r.task == "ood")
    j["score_convention"] = "higher=more uncertain; P and C negated";
  return j;
}

inline MetricsRecord metrics_from_json(const nlohmann::json& j) {
  MetricsRecord r;
  auto num_or_nan = [&j](const char* key) {
    return j.at(key).is_null() ? std::numeric_limits<double>::quiet_NaN()
                               : j.at(key).get<double>();
  };
  r.model = j.at("model").get<std::string>();
  r.task = j.at("task").get<std::string>();
  r.measure = j.at("measure").get<std::string>();
  r.auroc_value = num_or_nan("auroc");
  r.aupr_value = num_or_nan("aupr");
  if (!j.at("accuracy").is_null()) r.accuracy = j.at("accuracy").get<double>();
  r.wall_time_s = j.at("wall_time_s").get<double>();
  r.n_examples = j.at("n_examples").get<int>();
  r.n_positive = j.at("n_positive").get<int>();
  r.seed = j.at("seed").get<uint64_t>();
  r.config_hash = j.at("config_hash").get<std::string>();
  return r;
}

using Predictor = std::function<SimplexPoint(const Vec&)>;
using Scorer = std::function<double(const Vec&)>;

// In-domain misclassification detection: positives are the inputs the
// predictor gets wrong; the scorer should rank them high.
inline MetricsRecord misc_task(const Predictor& predictor, const Scorer& scorer,
                               const Matrix& x, const std::vector<int>& labels) {
  if (x.rows == 0) throw std::invalid_argument("misc_task: empty test set");
  if (static_cast<int>(labels.size()) != x.rows)
    throw std::invalid_argument("misc_task: label count mismatch");
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<ScoredExample> scored(x.rows);
  int correct = 0;
  for (int i = 0; i < x.rows; ++i) {
    Vec xi(x.cols);
    for (int j = 0; j < x.cols; ++j) xi[j] = x(i, j);
    const auto pred = predictor(xi);
    const bool hit = argmax_lowest(pred.probs) == labels[i];
    correct += hit;
    scored[i] = {scorer(xi), hit ? 0 : 1};
  }
  const auto t1 = std::chrono::steady_clock::now();
  MetricsRecord rec;
  rec.task = "misc";
  rec.n_examples = x.rows;
  rec.n_positive = x.rows - correct;
  rec.accuracy = static_cast<double>(correct) / x.rows;
  rec.wall_time_s = std::chrono::duration<double>(t1 - t0).count();
  if (rec.n_positive == 0)
    throw std::runtime_error(
        "misc_task: every prediction correct; misclassification detection needs at "
        "least one error");
  if (rec.n_positive == x.rows)
    throw std::runtime_error("misc_task: every prediction wrong; single-class scores");
  rec.auroc_value = auroc(scored);
  rec.aupr_value = aupr(scored);
  return rec;
}

// Out-of-domain detection: positives are the OOD inputs.
inline MetricsRecord ood_task(const Scorer& scorer, const Matrix& x_in,
                              const Matrix& x_ood) {
  if (x_in.rows == 0 || x_ood.rows == 0)
    throw std::invalid_argument("ood_task: empty input set");
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<ScoredExample> scored;
  scored.reserve(x_in.rows + x_ood.rows);
  for (int i = 0; i < x_in.rows; ++i) {
    Vec xi(x_in.cols);
    for (int j = 0; j < x_in.cols; ++j) xi[j] = x_in(i, j);
    scored.push_back({scorer(xi), 0});
  }
  for (int i = 0; i < x_ood.rows; ++i) {
    Vec xi(x_ood.cols);
    for (int j = 0; j < x_ood.cols; ++j) xi[j] = x_ood(i, j);
    scored.push_back({scorer(xi), 1});
  }
  const auto t1 = std::chrono::steady_clock::now();
  MetricsRecord rec;
  rec.task = "ood";
  rec.n_examples = static_cast<int>(scored.size());
  rec.n_positive = x_ood.rows;
  rec.wall_time_s = std::chrono::duration<double>(t1 - t0).count();
  rec.auroc_value = auroc(scored);
  rec.aupr_value = aupr(scored);
  return rec;
}

// Student scorers under the fixed convention: E and D score as-is, P and C
// are negated so that higher always means more uncertain.
inline Scorer student_scorer(const StudentModel& m, const std::string& measure) {
  if (measure == "E")
    return [&m](const Vec& x) { return uncertainty_scores(m, x).entropy; };
  if (measure == "P")
    return [&m](const Vec& x) { return -uncertainty_scores(m, x).max_prob; };
  if (measure == "D")
    return [&m](const Vec& x) { return uncertainty_scores(m, x).diff_entropy; };
  if (measure == "C")
    return [&m](const Vec& x) { return -uncertainty_scores(m, x).concentration; };
  throw std::invalid_argument("student_scorer: unknown measure " + measure);
}

// ---------------------------------------------------------------------------
// Amortization gap: MMD(q_x, p_x) - MMD(q*_x, p_x) with q*_x the local MMD
// fit. MMD values are sqrt(max(U-statistic, 0)).

struct GapConfig {
  int sample_count = 64;
  MmdFitConfig fit;
};

struct GapResult {
  double delta = 0.0;
  double mmd_student = 0.0;
  double mmd_local_fit = 0.0;
};

// sqrt(max(U-statistic, 0)); a negative U-statistic is flagged through
// `was_negative` so outputs can note the clipping.
inline double mmd_from_samples(const std::vector<SimplexPoint>& cloud,
                               const DirichletParams& alpha, int count,
                               const KernelSpec& kernel, RngState& rng,
                               bool* was_negative = nullptr) {
  std::vector<SimplexPoint> q;
  q.reserve(count);
  for (int i = 0; i < count; ++i) q.push_back(sample_dirichlet(alpha, rng));
  const double u = mmd2_estimate(cloud, q, kernel);
  if (was_negative) *was_negative = u < 0.0;
  return std::sqrt(std::max(u, 0.0));
}

inline GapResult amortization_gap(const StudentModel& m, const Vec& x,
                                  const ParticleCloud& cloud, const KernelSpec& kernel,
                                  const GapConfig& cfg, RngState& rng) {
  GapResult res;
  const DirichletParams q_alpha = student_alpha(m, x);
  res.mmd_student = mmd_from_samples(cloud.points, q_alpha, cfg.sample_count, kernel, rng);
  RngState fit_rng = rng.split(0xf17);
  const DirichletParams local = fit_dirichlet_mmd(cloud, kernel, cfg.fit, fit_rng);
  res.mmd_local_fit = mmd_from_samples(cloud.points, local, cfg.sample_count, kernel, rng);
  res.delta = res.mmd_student - res.mmd_local_fit;
  return res;
}

// ---------------------------------------------------------------------------
// Timing harness: full-ensemble MC prediction (S forwards per input) against
// one-pass student prediction (PM+CM forwards). Monotonic clock, median of
// `repetitions` runs, identical single-threaded execution for both arms.

struct TimingResult {
  double mc_seconds = 0.0;
  double one_pass_seconds = 0.0;
  double speedup = 0.0;
  int ensemble_size = 0;
  int repetitions = 0;
};

namespace detail {
inline double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[v.size() / 2];
}
}  // namespace detail

inline TimingResult timing_harness(const PosteriorSampleSet& samples,
                                   const StudentModel& m, const Matrix& inputs,
                                   int repetitions = 5) {
  if (samples.size() < 1) throw std::invalid_argument("timing_harness: empty ensemble");
  TimingResult res;
  res.ensemble_size = samples.size();
  res.repetitions = repetitions;
  volatile double sink = 0.0;  // keep the work observable
  std::vector<double> mc_times, op_times;
  for (int rep = 0; rep < repetitions; ++rep) {
    const auto t0 = std::chrono::steady_clock::now();
    for (int i = 0; i < inputs.rows; ++i) {
      Vec xi(inputs.cols);
      for (int j = 0; j < inputs.cols; ++j) xi[j] = inputs(i, j);
      const auto mean = mc_predict(pushforward(samples, xi, i));
      sink = sink + mean[0];
    }
    const auto t1 = std::chrono::steady_clock::now();
    mc_times.push_back(std::chrono::duration<double>(t1 - t0).count());

    const auto t2 = std::chrono::steady_clock::now();
    for (int i = 0; i < inputs.rows; ++i) {
      Vec xi(inputs.cols);
      for (int j = 0; j < inputs.cols; ++j) xi[j] = inputs(i, j);
      const auto ev = student_eval(m, xi);  // PM and CM, one pass each
      sink = sink + ev.h[0] + ev.g;
    }
    const auto t3 = std::chrono::steady_clock::now();
    op_times.push_back(std::chrono::duration<double>(t3 - t2).count());
  }
  res.mc_seconds = detail::median_of(mc_times);
  res.one_pass_seconds = detail::median_of(op_times);
  res.speedup = res.mc_seconds / res.one_pass_seconds;
  return res;
}

// ---------------------------------------------------------------------------
// Plain-text grid in the shape of the paper's results tables: one row per
// model, best measure per cell.

inline std::string format_metrics_table(const std::vector<MetricsRecord>& records) {
  std::vector<std::string> models;
  for (const auto& r : records)
    if (std::find(models.begin(), models.end(), r.model) == models.end() &&
        (r.task == "misc" || r.task == "ood"))
      models.push_back(r.model);

  auto best_cell = [&](const std::string& model, const std::string& task, bool use_auroc) {
    std::string cell = "-";
    double best = -1.0;
    for (const auto& r : records) {
      if (r.model != model || r.task != task) continue;
      const double v = use_auroc ? r.auroc_value : r.aupr_value;
      if (std::isfinite(v) && v > best) {
        best = v;
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.1f (%s)", 100.0 * v, r.measure.c_str());
        cell = buf;
      }
    }
    return cell;
  };
  auto acc_cell = [&](const std::string& model) {
    for (const auto& r : records)
      if (r.model == model && r.task == "misc" && r.accuracy) {
        char buf[16];
        std::snprintf(buf, sizeof buf, "%.1f", 100.0 * *r.accuracy);
        return std::string(buf);
      }
    return std::string("-");
  };
  auto time_cell = [&](const std::string& model) {
    for (const auto& r : records)
      if (r.model == model && r.task == "timing") {
        char buf[16];
        std::snprintf(buf, sizeof buf, "%.4f", r.wall_time_s);
        return std::string(buf);
      }
    return std::string("-");
  };

  std::string out;
  char line[256];
  std::snprintf(line, sizeof line, "%-22s %-12s %-12s %-12s %-12s %-8s %-10s\n", "model",
                "MisC AUROC", "MisC AUPR", "OOD AUROC", "OOD AUPR", "Acc(%)", "Time(s)");
  out += line;
  out += std::string(90, '-') + "\n";
  for (const auto& model : models) {
    std::snprintf(line, sizeof line, "%-22s %-12s %-12s %-12s %-12s %-8s %-10s\n",
                  model.c_str(), best_cell(model, "misc", true).c_str(),
                  best_cell(model, "misc", false).c_str(),
                  best_cell(model, "ood", true).c_str(),
                  best_cell(model, "ood", false).c_str(), acc_cell(model).c_str(),
                  time_cell(model).c_str());
    out += line;
  }
  return out;
}

}  // namespace opu
