// Run configuration: one JSON file, schema-validated with unknown keys
// rejected, hashed (FNV-1a) to name the run directory.
#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "opu/data.hpp"
#include "opu/kernels.hpp"
#include "opu/losses.hpp"
#include "opu/teachers.hpp"

namespace opu {

inline constexpr int kConfigSchemaVersion = 1;

namespace detail {

inline void reject_unknown_keys(const nlohmann::json& obj,
                                const std::set<std::string>& allowed,
                                const std::string& where) {
  for (auto it = obj.begin(); it != obj.end(); ++it)
    if (!allowed.count(it.key()))
      throw std::invalid_argument("config: unknown key '" + it.key() + "' in " + where);
}

inline uint64_t fnv1a(const std::string& s) {
  uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace detail

struct TeacherSection {
  TeacherKind kind = TeacherKind::mcdp;
  std::vector<int> hidden = {32, 32};
  int samples = 200;
  // mcdp
  McdpConfig mcdp;
  // sgld
  SgldConfig sgld;
  // blr
  BlrConfig blr;
  double blr_prior_precision = 1.0;  // expanded per-feature at run time
};

struct StudentSection {
  std::vector<int> pm_hidden = {32, 32};
  std::vector<int> cm_hidden = {32, 32};
  std::string cm_features = "raw";  // raw | rbf_grid
  int rbf_nodes = 4;                // per axis, rbf_grid only
};

struct DistillSection {
  DistillConfig cfg;
  std::vector<int> critic_hidden = {32, 32};
  std::vector<int> critic_head = {32};
};

struct GapSection {
  bool enabled = false;
  int sample_count = 192;     // draws per MMD evaluation arm
  int fit_sample_count = 64;  // draws per local-fit gradient step
  int fit_steps = 200;
  double fit_lr = 0.05;
  int max_inputs = 0;  // 0 = all distill inputs
};

struct EvalSection {
  int timing_repetitions = 5;
  std::vector<int> timing_ensemble_sizes = {};  // defaults to {teacher.samples}
  GapSection gap;
  std::vector<int> plot_inputs = {0};
  std::string plot_split = "distill";
};

struct DataSection {
  bool synthetic = true;
  BlobSpec blobs;
  // csv mode
  std::string train_path, distill_path, test_path, ood_path;
  CsvSchema csv;
};

struct RunConfig {
  std::string name = "run";
  uint64_t seed = 1;
  DataSection data;
  TeacherSection teacher;
  StudentSection student;
  DistillSection distill;
  EvalSection eval;
  nlohmann::json raw;  // canonical parsed form, used for hashing
};

namespace detail {

inline std::vector<int> int_list(const nlohmann::json& j) {
  std::vector<int> v;
  for (const auto& e : j) v.push_back(e.get<int>());
  return v;
}

inline void parse_data(const nlohmann::json& j, DataSection& out) {
  reject_unknown_keys(j, {"synthetic", "csv"}, "data");
  if (j.contains("synthetic") == j.contains("csv"))
    throw std::invalid_argument("config: data needs exactly one of synthetic|csv");
  if (j.contains("synthetic")) {
    out.synthetic = true;
    const auto& s = j.at("synthetic");
    reject_unknown_keys(s,
                        {"classes", "per_class_train", "per_class_distill",
                         "per_class_test", "ood_count", "radius", "cov_scale",
                         "ood_offset", "ood_direction"},
                        "data.synthetic");
    auto& b = out.blobs;
    b.num_classes = s.value("classes", 3);
    b.per_class_train = s.value("per_class_train", 100);
    b.per_class_distill = s.value("per_class_distill", 100);
    b.per_class_test = s.value("per_class_test", 100);
    b.ood_count = s.value("ood_count", 300);
    b.radius = s.value("radius", 2.2);
    b.cov_scale = s.value("cov_scale", 1.0);
    b.ood_offset = s.value("ood_offset", 10.0);
    if (s.contains("ood_direction")) {
      b.ood_direction.clear();
      for (const auto& e : s.at("ood_direction")) b.ood_direction.push_back(e.get<double>());
      if (b.ood_direction.size() != 2)
        throw std::invalid_argument("config: ood_direction must have 2 entries");
    }
  } else {
    out.synthetic = false;
    const auto& c = j.at("csv");
    reject_unknown_keys(
        c, {"train", "distill", "test", "ood", "feature_cols", "label_col", "l2_normalize"},
        "data.csv");
    out.train_path = c.at("train").get<std::string>();
    out.distill_path = c.at("distill").get<std::string>();
    out.test_path = c.at("test").get<std::string>();
    out.ood_path = c.at("ood").get<std::string>();
    for (const auto& e : c.at("feature_cols"))
      out.csv.feature_cols.push_back(e.get<std::string>());
    if (c.contains("label_col")) out.csv.label_col = c.at("label_col").get<std::string>();
    out.csv.l2_normalize = c.value("l2_normalize", false);
  }
}

inline void parse_teacher(const nlohmann::json& j, TeacherSection& out, uint64_t seed) {
  const std::string kind = j.at("kind").get<std::string>();
  out.kind = teacher_kind_from_name(kind);
  if (out.kind == TeacherKind::mcdp) {
    reject_unknown_keys(j,
                        {"kind", "hidden", "samples", "dropout_rate", "lr", "steps",
                         "batch", "dropout_on_input"},
                        "teacher (mcdp)");
    out.mcdp.dropout_rate = j.value("dropout_rate", 0.5);
    out.mcdp.lr = j.value("lr", 0.1);
    out.mcdp.steps = j.value("steps", 3000);
    out.mcdp.batch = j.value("batch", 16);
    out.mcdp.dropout_on_input = j.value("dropout_on_input", false);
    out.mcdp.seed = seed;
  } else if (out.kind == TeacherKind::sgld) {
    reject_unknown_keys(j,
                        {"kind", "hidden", "samples", "step_size", "schedule", "t0",
                         "gamma", "batch", "burn_in", "thin", "prior_precision"},
                        "teacher (sgld)");
    out.sgld.step_size.eps0 = j.value("step_size", 1e-3);
    const std::string schedule = j.value("schedule", std::string("constant"));
    if (schedule == "constant")
      out.sgld.step_size.kind = LrSchedule::Kind::constant;
    else if (schedule == "polynomial")
      out.sgld.step_size.kind = LrSchedule::Kind::polynomial;
    else
      throw std::invalid_argument("config: unknown sgld schedule " + schedule);
    out.sgld.step_size.t0 = j.value("t0", 1000.0);
    out.sgld.step_size.gamma = j.value("gamma", 0.55);
    out.sgld.batch = j.value("batch", 32);
    out.sgld.burn_in = j.value("burn_in", 2000);
    out.sgld.thin = j.value("thin", 1);
    out.sgld.prior_precision = j.value("prior_precision", 1e-2);
    out.sgld.samples = j.value("samples", 200);
    out.sgld.seed = seed;
  } else {
    reject_unknown_keys(j, {"kind", "hidden", "samples", "prior_precision", "burn_in", "thin"},
                        "teacher (blr)");
    out.blr_prior_precision = j.value("prior_precision", 1.0);
    out.blr.burn_in = j.value("burn_in", 200);
    out.blr.thin = j.value("thin", 1);
    out.blr.samples = j.value("samples", 500);
    out.blr.seed = seed;
  }
  if (j.contains("hidden")) out.hidden = int_list(j.at("hidden"));
  out.samples = j.value("samples", 200);
  out.sgld.samples = out.samples;
  out.blr.samples = out.samples;
}

inline void parse_kernel(const nlohmann::json& j, KernelSpec& out) {
  reject_unknown_keys(j,
                      {"rbf_bandwidth", "rbf_weight", "poly_degree", "poly_offset",
                       "poly_scale", "poly_weight"},
                      "distill.kernel");
  const double bw = j.value("rbf_bandwidth", 0.0);
  if (bw == 0.0) return;  // empty spec: median heuristic at training time
  KernelComponent rbf;
  rbf.kind = KernelComponent::Kind::rbf;
  rbf.bandwidth = bw;
  rbf.weight = j.value("rbf_weight", 0.5);
  KernelComponent poly;
  poly.kind = KernelComponent::Kind::polynomial;
  poly.degree = j.value("poly_degree", 2);
  poly.offset = j.value("poly_offset", 1.0);
  poly.scale = j.value("poly_scale", 1.0);
  poly.weight = j.value("poly_weight", 0.5);
  out.components = {rbf, poly};
}

inline void parse_distill(const nlohmann::json& j, DistillSection& out, uint64_t seed) {
  reject_unknown_keys(j,
                      {"loss", "steps", "sample_count", "lambda", "t_stu", "t_wit",
                       "gp_pairs", "input_batch", "student_lr", "critic_lr",
                       "cm_adam_eps", "kernel", "critic_hidden", "critic_head"},
                      "distill");
  out.cfg.loss = loss_kind_from_name(j.value("loss", std::string("mmd")));
  out.cfg.steps = j.value("steps", 2000);
  out.cfg.sample_count = j.value("sample_count", 64);
  out.cfg.lambda = j.value("lambda", 10.0);
  out.cfg.t_stu = j.value("t_stu", 1);
  out.cfg.t_wit = j.value("t_wit", 5);
  out.cfg.gp_pairs = j.value("gp_pairs", 32);
  out.cfg.input_batch = j.value("input_batch", 1);
  out.cfg.student_lr = j.value("student_lr", 1e-3);
  out.cfg.critic_lr = j.value("critic_lr", 3e-3);
  out.cfg.cm_adam_eps = j.value("cm_adam_eps", 1e-8);
  out.cfg.seed = seed;
  if (j.contains("kernel")) parse_kernel(j.at("kernel"), out.cfg.kernel);
  if (j.contains("critic_hidden")) out.critic_hidden = int_list(j.at("critic_hidden"));
  if (j.contains("critic_head")) out.critic_head = int_list(j.at("critic_head"));
  validate_distill_config(out.cfg);
}

inline void parse_eval(const nlohmann::json& j, EvalSection& out) {
  reject_unknown_keys(j,
                      {"timing_repetitions", "timing_ensemble_sizes", "gap",
                       "plot_inputs", "plot_split"},
                      "eval");
  out.timing_repetitions = j.value("timing_repetitions", 5);
  if (j.contains("timing_ensemble_sizes"))
    out.timing_ensemble_sizes = int_list(j.at("timing_ensemble_sizes"));
  if (j.contains("gap")) {
    const auto& g = j.at("gap");
    reject_unknown_keys(
        g, {"enabled", "sample_count", "fit_sample_count", "fit_steps", "fit_lr", "max_inputs"},
        "eval.gap");
    out.gap.enabled = g.value("enabled", false);
    out.gap.sample_count = g.value("sample_count", 192);
    out.gap.fit_sample_count = g.value("fit_sample_count", 64);
    out.gap.fit_steps = g.value("fit_steps", 200);
    out.gap.fit_lr = g.value("fit_lr", 0.05);
    out.gap.max_inputs = g.value("max_inputs", 0);
  }
  if (j.contains("plot_inputs")) out.plot_inputs = int_list(j.at("plot_inputs"));
  out.plot_split = j.value("plot_split", std::string("distill"));
}

}  // namespace detail

inline RunConfig parse_config(const nlohmann::json& j) {
  detail::reject_unknown_keys(
      j, {"schema_version", "name", "seed", "data", "teacher", "student", "distill", "eval"},
      "top level");
  if (!j.contains("schema_version"))
    throw std::invalid_argument("config: missing schema_version");
  if (j.at("schema_version").get<int>() != kConfigSchemaVersion)
    throw std::invalid_argument("config: unsupported schema_version");
  RunConfig cfg;
  cfg.raw = j;
  cfg.name = j.value("name", std::string("run"));
  cfg.seed = j.value("seed", uint64_t{1});
  detail::parse_data(j.at("data"), cfg.data);
  detail::parse_teacher(j.at("teacher"), cfg.teacher, cfg.seed);
  if (j.contains("student")) {
    const auto& s = j.at("student");
    detail::reject_unknown_keys(s, {"pm_hidden", "cm_hidden", "cm_features", "rbf_nodes"},
                                "student");
    if (s.contains("pm_hidden")) cfg.student.pm_hidden = detail::int_list(s.at("pm_hidden"));
    if (s.contains("cm_hidden")) cfg.student.cm_hidden = detail::int_list(s.at("cm_hidden"));
    cfg.student.cm_features = s.value("cm_features", std::string("raw"));
    if (cfg.student.cm_features != "raw" && cfg.student.cm_features != "rbf_grid")
      throw std::invalid_argument("config: unknown cm_features " + cfg.student.cm_features);
    cfg.student.rbf_nodes = s.value("rbf_nodes", 4);
  }
  detail::parse_distill(j.at("distill"), cfg.distill, cfg.seed);
  if (j.contains("eval")) detail::parse_eval(j.at("eval"), cfg.eval);
  return cfg;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("config: cannot open " + path);
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("config: parse error in " + path + ": " + e.what());
  }
  return parse_config(j);
}

// Hash of the canonical serialized config; names the run directory.
inline std::string config_hash_hex(const nlohmann::json& canonical) {
  const uint64_t h = detail::fnv1a(canonical.dump());
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline std::string config_hash_hex(const RunConfig& cfg) {
  return config_hash_hex(cfg.raw);
}

}  // namespace opu
