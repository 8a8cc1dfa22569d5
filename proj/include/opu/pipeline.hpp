// Pipeline commands behind the CLI: each one reads and writes only its
// declared artifacts inside the per-config run directory.
#pragma once

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "opu/config.hpp"
#include "opu/data.hpp"
#include "opu/eval.hpp"
#include "opu/losses.hpp"
#include "opu/student.hpp"
#include "opu/teachers.hpp"

namespace opu {

namespace fs = std::filesystem;

// One run directory per config hash.
struct RunPaths {
  fs::path dir;

  fs::path dataset_csv(Split s) const {
    return dir / (std::string("data_") + split_name(s) + ".csv");
  }
  fs::path teacher_ckpt() const { return dir / "teacher.ckpt"; }
  fs::path teacher_meta() const { return dir / "teacher.json"; }
  fs::path posterior() const { return dir / "posterior.bin"; }
  fs::path particles(Split s) const {
    return dir / (std::string("particles_") + split_name(s) + ".bin");
  }
  fs::path student_pm() const { return dir / "student_pm.ckpt"; }
  fs::path student_cm() const { return dir / "student_cm.ckpt"; }
  fs::path student_init_pm() const { return dir / "student_init_pm.ckpt"; }
  fs::path student_init_cm() const { return dir / "student_init_cm.ckpt"; }
  fs::path student_manifest() const { return dir / "student.json"; }
  fs::path loss_trace() const { return dir / "loss_trace.jsonl"; }
  fs::path metrics() const { return dir / "metrics.jsonl"; }
  fs::path timing() const { return dir / "timing.json"; }
  fs::path gap() const { return dir / "gap.jsonl"; }
  fs::path report() const { return dir / "report.txt"; }
  fs::path plot_svg(int input_id) const {
    return dir / ("simplex_" + std::to_string(input_id) + ".svg");
  }
  fs::path plot_csv(int input_id) const {
    return dir / ("simplex_" + std::to_string(input_id) + ".csv");
  }
};

// Run-directory root: the one environment knob, overridable by --out.
inline std::string run_root_from_env() {
  const char* env = std::getenv("OPU_RUN_ROOT");
  return env && *env ? env : "runs";
}

inline RunPaths make_run_paths(const std::string& root, const RunConfig& cfg) {
  RunPaths p;
  p.dir = fs::path(root) / config_hash_hex(cfg);
  fs::create_directories(p.dir);
  return p;
}

inline void require_artifact(const fs::path& path, const std::string& producer) {
  if (!fs::exists(path))
    throw std::runtime_error("missing artifact: " + path.string() + " (run '" +
                             producer + "' first)");
}

// ---------------------------------------------------------------------------
// Data access: synthetic data is regenerated deterministically from the
// config seed; CSV data is loaded from the configured paths.

struct PipelineData {
  Dataset train, distill, test, ood;
  int num_classes = 0;
  int input_dim = 0;
};

inline PipelineData load_pipeline_data(const RunConfig& cfg) {
  PipelineData d;
  if (cfg.data.synthetic) {
    RngState rng = RngState(cfg.seed).split(0xda7a);
    auto synth = gen_synthetic(cfg.data.blobs, rng);
    d.train = std::move(synth.train);
    d.distill = std::move(synth.distill);
    d.test = std::move(synth.test);
    d.ood = std::move(synth.ood);
    d.num_classes = cfg.data.blobs.num_classes;
  } else {
    d.train = load_csv(cfg.data.train_path, cfg.data.csv);
    d.train.split = Split::train;
    d.distill = load_csv(cfg.data.distill_path, cfg.data.csv);
    d.distill.split = Split::distill;
    d.test = load_csv(cfg.data.test_path, cfg.data.csv);
    d.test.split = Split::test;
    CsvSchema ood_schema = cfg.data.csv;
    ood_schema.label_col.reset();  // ood splits carry no labels
    d.ood = load_csv(cfg.data.ood_path, ood_schema);
    d.ood.split = Split::ood;
    int max_label = 0;
    for (int y : d.train.labels) max_label = std::max(max_label, y);
    d.num_classes = max_label + 1;
  }
  d.input_dim = d.train.x.cols;
  validate_dataset(d.train, d.num_classes);
  validate_dataset(d.distill, d.num_classes);
  validate_dataset(d.test, d.num_classes);
  validate_dataset(d.ood, d.num_classes);
  return d;
}

inline std::string model_row_name(const RunConfig& cfg, bool student) {
  const std::string teacher = teacher_kind_name(cfg.teacher.kind);
  if (!student) return teacher;
  return "opu-" + teacher + "-" + loss_kind_name(cfg.distill.cfg.loss);
}

// ---------------------------------------------------------------------------
// Commands.

inline void cmd_train_teacher(const RunConfig& cfg, const RunPaths& paths) {
  const std::string hash = config_hash_hex(cfg);
  const auto data = load_pipeline_data(cfg);
  save_dataset_csv(paths.dataset_csv(Split::train).string(), data.train, hash);
  save_dataset_csv(paths.dataset_csv(Split::distill).string(), data.distill, hash);
  save_dataset_csv(paths.dataset_csv(Split::test).string(), data.test, hash);
  save_dataset_csv(paths.dataset_csv(Split::ood).string(), data.ood, hash);

  nlohmann::json meta{{"kind", teacher_kind_name(cfg.teacher.kind)},
                      {"num_classes", data.num_classes},
                      {"input_dim", data.input_dim},
                      {"config_hash", hash}};
  switch (cfg.teacher.kind) {
    case TeacherKind::mcdp: {
      std::vector<int> dims = {data.input_dim};
      dims.insert(dims.end(), cfg.teacher.hidden.begin(), cfg.teacher.hidden.end());
      dims.push_back(data.num_classes);
      RngState init_rng = RngState(cfg.seed).split(0x171);
      const auto init = make_mlp(dims, Activation::softmax, init_rng);
      RngState train_rng = RngState(cfg.seed).split(0x7ea);
      const auto trained = mcdp_train(data.train.x, data.train.labels, init,
                                      cfg.teacher.mcdp, train_rng);
      save_mlp(paths.teacher_ckpt().string(), trained, {{"config_hash", hash}});
      break;
    }
    case TeacherKind::sgld: {
      std::vector<int> dims = {data.input_dim};
      dims.insert(dims.end(), cfg.teacher.hidden.begin(), cfg.teacher.hidden.end());
      dims.push_back(data.num_classes);
      RngState init_rng = RngState(cfg.seed).split(0x171);
      const auto init = make_mlp(dims, Activation::softmax, init_rng);
      save_mlp(paths.teacher_ckpt().string(), init, {{"config_hash", hash}});
      break;
    }
    case TeacherKind::blr: {
      if (data.num_classes != 2)
        throw std::runtime_error("train-teacher: blr requires binary labels");
      break;  // sampling is the training; only the meta file is written
    }
  }
  std::ofstream js(paths.teacher_meta(), std::ios::trunc);
  js << meta.dump(2) << "\n";
}

inline void cmd_sample_posterior(const RunConfig& cfg, const RunPaths& paths) {
  const std::string hash = config_hash_hex(cfg);
  require_artifact(paths.teacher_meta(), "train-teacher");
  const auto data = load_pipeline_data(cfg);
  RngState rng = RngState(cfg.seed).split(0x905);
  PosteriorSampleSet set;
  switch (cfg.teacher.kind) {
    case TeacherKind::mcdp: {
      require_artifact(paths.teacher_ckpt(), "train-teacher");
      const auto trained = load_mlp(paths.teacher_ckpt().string());
      const auto keep = mcdp_keep_probs(trained, cfg.teacher.mcdp.dropout_rate,
                                        cfg.teacher.mcdp.dropout_on_input);
      set = mcdp_sample(trained, keep, cfg.teacher.samples, rng);
      break;
    }
    case TeacherKind::sgld: {
      require_artifact(paths.teacher_ckpt(), "train-teacher");
      const auto init = load_mlp(paths.teacher_ckpt().string());
      set = sgld_train(data.train.x, data.train.labels, init, cfg.teacher.sgld, rng);
      break;
    }
    case TeacherKind::blr: {
      BlrConfig blr = cfg.teacher.blr;
      blr.prior_precision.assign(data.input_dim, cfg.teacher.blr_prior_precision);
      set = blr_pg_gibbs(data.train.x, data.train.labels, blr, rng);
      break;
    }
  }
  save_posterior(paths.posterior().string(), set, {{"config_hash", hash}});
}

inline void cmd_pushforward(const RunConfig& cfg, const RunPaths& paths) {
  const std::string hash = config_hash_hex(cfg);
  require_artifact(paths.posterior(), "sample-posterior");
  const auto set = load_posterior(paths.posterior().string());
  const auto data = load_pipeline_data(cfg);
  for (const auto* split : {&data.distill, &data.test, &data.ood}) {
    const auto store = make_particle_store(set, split->x);
    save_particles(paths.particles(split->split).string(), store,
                   {{"config_hash", hash}, {"split", split_name(split->split)}});
  }
}

// Student architecture from config. The rbf_grid concentration features are
// laid out over the distill inputs and frozen with the model.
inline StudentModel make_student_from_config(const RunConfig& cfg, int input_dim,
                                             int num_classes,
                                             const Matrix* feature_inputs = nullptr) {
  StudentModel m;
  if (cfg.student.cm_features == "rbf_grid") {
    if (!feature_inputs)
      throw std::invalid_argument("student: rbf_grid features need reference inputs");
    m.cm_features = make_rbf_grid_map(*feature_inputs, cfg.student.rbf_nodes);
  }
  std::vector<int> pm_dims = {input_dim};
  pm_dims.insert(pm_dims.end(), cfg.student.pm_hidden.begin(), cfg.student.pm_hidden.end());
  pm_dims.push_back(num_classes);
  std::vector<int> cm_dims = {m.cm_features.output_dim(input_dim)};
  cm_dims.insert(cm_dims.end(), cfg.student.cm_hidden.begin(), cfg.student.cm_hidden.end());
  cm_dims.push_back(1);
  RngState rng = RngState(cfg.seed).split(0x57d);
  m.pm = make_mlp(pm_dims, Activation::softmax, rng);
  m.cm = make_mlp(cm_dims, Activation::identity, rng);
  return m;
}

inline nlohmann::json cm_features_to_json(const CmFeatureMap& map) {
  if (map.kind == CmFeatureMap::Kind::raw) return {{"kind", "raw"}};
  nlohmann::json centers = nlohmann::json::array();
  for (const auto& c : map.centers) centers.push_back(c);
  return {{"kind", "rbf_grid"}, {"bandwidth", map.bandwidth}, {"centers", centers}};
}

inline CmFeatureMap cm_features_from_json(const nlohmann::json& j) {
  CmFeatureMap map;
  if (j.at("kind").get<std::string>() == "raw") return map;
  map.kind = CmFeatureMap::Kind::rbf_grid;
  map.bandwidth = j.at("bandwidth").get<double>();
  for (const auto& c : j.at("centers")) map.centers.push_back(c.get<Vec>());
  return map;
}

inline void cmd_distill(const RunConfig& cfg, const RunPaths& paths) {
  const std::string hash = config_hash_hex(cfg);
  require_artifact(paths.particles(Split::distill), "pushforward");
  auto store = load_particles(paths.particles(Split::distill).string());
  const auto data = load_pipeline_data(cfg);
  store.inputs = data.distill.x;

  const StudentModel init =
      make_student_from_config(cfg, data.input_dim, store.num_classes, &store.inputs);
  save_mlp(paths.student_init_pm().string(), init.pm, {{"config_hash", hash}});
  save_mlp(paths.student_init_cm().string(), init.cm, {{"config_hash", hash}});

  CriticModel critic;
  const CriticModel* critic_ptr = nullptr;
  if (cfg.distill.cfg.loss == LossKind::emd) {
    RngState crng = RngState(cfg.seed).split(0xc51);
    critic = make_critic(data.input_dim, store.num_classes, cfg.distill.critic_hidden,
                         cfg.distill.critic_head, crng);
    critic_ptr = &critic;
  }
  RngState rng = RngState(cfg.seed).split(0xd15);
  const auto result = distill(init, store, cfg.distill.cfg, rng, critic_ptr);

  save_mlp(paths.student_pm().string(), result.model.pm, {{"config_hash", hash}});
  save_mlp(paths.student_cm().string(), result.model.cm, {{"config_hash", hash}});
  nlohmann::json manifest{{"K", store.num_classes},
                          {"alpha_floor", kAlphaFloor},
                          {"loss", loss_kind_name(cfg.distill.cfg.loss)},
                          {"cm_features", cm_features_to_json(result.model.cm_features)},
                          {"config_hash", hash}};
  std::ofstream ms(paths.student_manifest(), std::ios::trunc);
  ms << manifest.dump(2) << "\n";

  std::ofstream trace(paths.loss_trace(), std::ios::trunc);
  for (const auto& e : result.trace) {
    nlohmann::json line{{"step", e.step},
                        {"input_id", e.input_id},
                        {"loss_kind", loss_kind_name(e.kind)},
                        {"loss", e.loss},
                        {"wall_ms", e.wall_ms},
                        {"config_hash", hash}};
    trace << line.dump() << "\n";
  }
}

namespace detail {

// Row-exact lookup from feature vector to dataset row; the evaluation tasks
// address examples by features while teacher scores live per row.
struct RowLookup {
  const Matrix* x;
  int find(const Vec& v) const {
    for (int i = 0; i < x->rows; ++i) {
      bool same = true;
      for (int j = 0; j < x->cols && same; ++j) same = (*x)(i, j) == v[j];
      if (same) return i;
    }
    throw std::runtime_error("row lookup failed: input not in dataset");
  }
};

struct TeacherScores {
  std::vector<SimplexPoint> mean;   // mc_predict per row
  std::vector<double> entropy;      // E of the mean
  std::vector<double> max_prob;     // P of the mean
  std::vector<double> diff_entropy; // D of the per-row MLE fit
};

inline TeacherScores teacher_scores(const ParticleStore& store) {
  TeacherScores s;
  const size_t n = store.clouds.size();
  s.mean.reserve(n);
  s.entropy.reserve(n);
  s.max_prob.reserve(n);
  s.diff_entropy.reserve(n);
  for (const auto& cloud : store.clouds) {
    const auto mean = mc_predict(cloud);
    double ent = 0.0;
    for (double p : mean.probs)
      if (p > 0.0) ent -= p * std::log(p);
    s.entropy.push_back(ent);
    s.max_prob.push_back(mean.probs[argmax_lowest(mean.probs)]);
    DirichletParams fit;
    try {
      fit = fit_dirichlet_mle(cloud);
    } catch (const DirichletMleError& e) {
      fit = e.last_iterate;  // degenerate cloud: use the capped iterate
    }
    s.diff_entropy.push_back(dirichlet_diff_entropy(fit));
    s.mean.push_back(mean);
  }
  return s;
}

}  // namespace detail

// Local fits for the gap diagnostic start from the per-input maximum
// likelihood estimate so every fit lands in the same basin.
inline Vec gap_fit_init(const ParticleCloud& cloud) {
  DirichletParams p;
  try {
    p = fit_dirichlet_mle(cloud);
  } catch (const DirichletMleError& e) {
    p = e.last_iterate;
  }
  for (double& a : p.alpha) a = std::min(std::max(a, 1e-3), 1e6);
  return p.alpha;
}

inline void cmd_eval(const RunConfig& cfg, const RunPaths& paths) {
  const std::string hash = config_hash_hex(cfg);
  require_artifact(paths.student_pm(), "distill");
  require_artifact(paths.student_cm(), "distill");
  require_artifact(paths.particles(Split::test), "pushforward");
  require_artifact(paths.particles(Split::ood), "pushforward");
  require_artifact(paths.posterior(), "sample-posterior");

  const auto data = load_pipeline_data(cfg);
  StudentModel student{load_mlp(paths.student_pm().string()),
                       load_mlp(paths.student_cm().string())};
  {
    require_artifact(paths.student_manifest(), "distill");
    std::ifstream mf(paths.student_manifest());
    nlohmann::json manifest;
    mf >> manifest;
    student.cm_features = cm_features_from_json(manifest.at("cm_features"));
  }
  auto test_store = load_particles(paths.particles(Split::test).string());
  auto ood_store = load_particles(paths.particles(Split::ood).string());
  const auto set = load_posterior(paths.posterior().string());

  std::vector<MetricsRecord> records;
  const std::string student_name = model_row_name(cfg, true);
  const std::string teacher_name = model_row_name(cfg, false);

  // student rows: all four measures on both tasks
  for (const std::string measure : {"E", "P", "D", "C"}) {
    Predictor predictor = [&student](const Vec& x) { return student_predict(student, x); };
    auto rec = misc_task(predictor, student_scorer(student, measure), data.test.x,
                         data.test.labels);
    rec.model = student_name;
    rec.measure = measure;
    rec.seed = cfg.seed;
    rec.config_hash = hash;
    records.push_back(rec);
    auto ood_rec = ood_task(student_scorer(student, measure), data.test.x, data.ood.x);
    ood_rec.model = student_name;
    ood_rec.measure = measure;
    ood_rec.seed = cfg.seed;
    ood_rec.config_hash = hash;
    records.push_back(ood_rec);
  }

  // teacher baseline rows: E/P from the averaged particle, D from the local
  // maximum-likelihood fit
  {
    const auto test_scores = detail::teacher_scores(test_store);
    const auto ood_scores = detail::teacher_scores(ood_store);
    detail::RowLookup test_rows{&data.test.x};
    detail::RowLookup ood_rows{&data.ood.x};
    Predictor predictor = [&](const Vec& x) { return test_scores.mean[test_rows.find(x)]; };
    struct MeasureDef {
      const char* tag;
      const std::vector<double>* test_vals;
      const std::vector<double>* ood_vals;
      double sign;
    };
    const MeasureDef defs[] = {
        {"E", &test_scores.entropy, &ood_scores.entropy, 1.0},
        {"P", &test_scores.max_prob, &ood_scores.max_prob, -1.0},
        {"D", &test_scores.diff_entropy, &ood_scores.diff_entropy, 1.0},
    };
    for (const auto& def : defs) {
      Scorer misc_scorer = [&, def](const Vec& x) {
        return def.sign * (*def.test_vals)[test_rows.find(x)];
      };
      auto rec = misc_task(predictor, misc_scorer, data.test.x, data.test.labels);
      rec.model = teacher_name;
      rec.measure = def.tag;
      rec.seed = cfg.seed;
      rec.config_hash = hash;
      records.push_back(rec);
      Scorer ood_scorer = [&, def](const Vec& x) {
        // test rows score from the test table, ood rows from the ood table
        for (int i = 0; i < data.ood.x.rows; ++i) {
          bool same = true;
          for (int j = 0; j < data.ood.x.cols && same; ++j) same = data.ood.x(i, j) == x[j];
          if (same) return def.sign * (*def.ood_vals)[i];
        }
        return def.sign * (*def.test_vals)[test_rows.find(x)];
      };
      auto ood_rec = ood_task(ood_scorer, data.test.x, data.ood.x);
      ood_rec.model = teacher_name;
      ood_rec.measure = def.tag;
      ood_rec.seed = cfg.seed;
      ood_rec.config_hash = hash;
      records.push_back(ood_rec);
    }
  }

  // timing: MC ensemble against the one-pass student
  nlohmann::json timing_json = nlohmann::json::array();
  {
    std::vector<int> sizes = cfg.eval.timing_ensemble_sizes;
    if (sizes.empty()) sizes = {set.size()};
    for (int s : sizes) {
      if (s < 1 || s > set.size()) continue;
      const auto t =
          timing_harness(set.subset(s), student, data.test.x, cfg.eval.timing_repetitions);
      timing_json.push_back({{"S", s},
                             {"mc_seconds", t.mc_seconds},
                             {"one_pass_seconds", t.one_pass_seconds},
                             {"speedup", t.speedup},
                             {"repetitions", t.repetitions},
                             {"config_hash", hash}});
      if (s == sizes.back()) {
        MetricsRecord mc_rec;
        mc_rec.model = teacher_name;
        mc_rec.task = "timing";
        mc_rec.wall_time_s = t.mc_seconds;
        mc_rec.n_examples = data.test.x.rows;
        mc_rec.seed = cfg.seed;
        mc_rec.config_hash = hash;
        records.push_back(mc_rec);
        MetricsRecord op_rec = mc_rec;
        op_rec.model = student_name;
        op_rec.wall_time_s = t.one_pass_seconds;
        records.push_back(op_rec);
      }
    }
  }

  std::ofstream ms(paths.metrics(), std::ios::trunc);
  for (const auto& r : records) ms << metrics_to_json(r).dump() << "\n";
  std::ofstream ts(paths.timing(), std::ios::trunc);
  ts << timing_json.dump(2) << "\n";

  // amortization gap over the distill inputs, for both the initial and the
  // distilled student, sharing one local fit per input
  if (cfg.eval.gap.enabled) {
    require_artifact(paths.particles(Split::distill), "pushforward");
    require_artifact(paths.student_init_pm(), "distill");
    auto distill_store = load_particles(paths.particles(Split::distill).string());
    distill_store.inputs = data.distill.x;
    StudentModel init{load_mlp(paths.student_init_pm().string()),
                      load_mlp(paths.student_init_cm().string())};
    init.cm_features = student.cm_features;
    KernelSpec kernel = cfg.distill.cfg.kernel;
    if (kernel.components.empty()) {
      RngState krng = RngState(cfg.seed).split(0xbadc0de);
      const auto& first = distill_store.clouds[krng.next_u64() % distill_store.clouds.size()];
      kernel = default_kernel(first.points);
    }
    const int limit = cfg.eval.gap.max_inputs > 0
                          ? std::min<int>(cfg.eval.gap.max_inputs,
                                          static_cast<int>(distill_store.clouds.size()))
                          : static_cast<int>(distill_store.clouds.size());
    std::ofstream gs(paths.gap(), std::ios::trunc);
    RngState gap_rng = RngState(cfg.seed).split(0x9a9);
    for (int i = 0; i < limit; ++i) {
      const auto& cloud = distill_store.clouds[i];
      const Vec x = distill_store.input_row(i);
      MmdFitConfig fit;
      fit.steps = cfg.eval.gap.fit_steps;
      fit.sample_count = cfg.eval.gap.fit_sample_count;
      fit.lr = cfg.eval.gap.fit_lr;
      fit.init_alpha = gap_fit_init(cloud);
      RngState fit_rng = gap_rng.split(2 * i);
      const DirichletParams local = fit_dirichlet_mmd(cloud, kernel, fit, fit_rng);
      RngState eval_rng = gap_rng.split(2 * i + 1);
      bool neg_local = false, neg_final = false, neg_init = false;
      const double mmd_local = mmd_from_samples(
          cloud.points, local, cfg.eval.gap.sample_count, kernel, eval_rng, &neg_local);
      const double mmd_final =
          mmd_from_samples(cloud.points, student_alpha(student, x),
                           cfg.eval.gap.sample_count, kernel, eval_rng, &neg_final);
      const double mmd_init =
          mmd_from_samples(cloud.points, student_alpha(init, x),
                           cfg.eval.gap.sample_count, kernel, eval_rng, &neg_init);
      nlohmann::json line{{"input_id", cloud.input_id},
                          {"mmd_local_fit", mmd_local},
                          {"mmd_student_final", mmd_final},
                          {"mmd_student_init", mmd_init},
                          {"delta_final", mmd_final - mmd_local},
                          {"delta_init", mmd_init - mmd_local},
                          {"negative_u_statistic_clipped",
                           neg_local || neg_final || neg_init},
                          {"config_hash", hash}};
      gs << line.dump() << "\n";
    }
  }
}

inline void cmd_plot_simplex(const RunConfig& cfg, const RunPaths& paths) {
  const std::string hash = config_hash_hex(cfg);
  Split split = Split::distill;
  if (cfg.eval.plot_split == "test")
    split = Split::test;
  else if (cfg.eval.plot_split == "ood")
    split = Split::ood;
  else if (cfg.eval.plot_split != "distill")
    throw std::runtime_error("plot-simplex: unknown split " + cfg.eval.plot_split);
  require_artifact(paths.particles(split), "pushforward");
  const auto store = load_particles(paths.particles(split).string());
  if (store.num_classes != 3)
    throw std::runtime_error("ternary plots require K=3");

  for (int id : cfg.eval.plot_inputs) {
    if (id < 0 || id >= static_cast<int>(store.clouds.size()))
      throw std::runtime_error("plot-simplex: input id " + std::to_string(id) +
                               " outside the store");
    const auto& cloud = store.clouds[id];
    // ternary coordinates: x = p2 + p3/2, y = (sqrt(3)/2) p3
    const double sq32 = std::sqrt(3.0) / 2.0;
    std::ofstream csv(paths.plot_csv(id), std::ios::trunc);
    csv << "# config_hash=" << hash << "\n";
    csv << "x,y,p1,p2,p3\n";
    char buf[160];
    std::string circles;
    for (const auto& p : cloud.points) {
      const double tx = p[1] + p[2] / 2.0;
      const double ty = sq32 * p[2];
      std::snprintf(buf, sizeof buf, "%.10g,%.10g,%.10g,%.10g,%.10g\n", tx, ty, p[0],
                    p[1], p[2]);
      csv << buf;
      const double px = 40.0 + 420.0 * tx;
      const double py = 440.0 - 420.0 * ty;
      std::snprintf(buf, sizeof buf,
                    "  <circle cx=\"%.2f\" cy=\"%.2f\" r=\"3\" fill=\"#1f77b4\" "
                    "fill-opacity=\"0.45\"/>\n",
                    px, py);
      circles += buf;
    }
    std::ofstream svg(paths.plot_svg(id), std::ios::trunc);
    svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"500\" height=\"480\">\n";
    svg << "<!-- config_hash=" << hash << " input_id=" << id << " -->\n";
    svg << "  <polygon points=\"40,440 460,440 250,76.3\" fill=\"none\" "
           "stroke=\"#444\" stroke-width=\"1\"/>\n";
    svg << "  <text x=\"28\" y=\"456\" font-size=\"12\">1</text>\n";
    svg << "  <text x=\"462\" y=\"456\" font-size=\"12\">2</text>\n";
    svg << "  <text x=\"246\" y=\"68\" font-size=\"12\">3</text>\n";
    svg << circles;
    svg << "</svg>\n";
  }
}

inline void cmd_report(const RunConfig& cfg, const RunPaths& paths, bool force) {
  const std::string hash = config_hash_hex(cfg);
  require_artifact(paths.metrics(), "eval");
  std::ifstream ms(paths.metrics());
  std::vector<MetricsRecord> records;
  std::string line;
  while (std::getline(ms, line)) {
    if (line.empty()) continue;
    const auto rec = metrics_from_json(nlohmann::json::parse(line));
    if (rec.config_hash != hash && !force)
      throw std::runtime_error("report: record config hash " + rec.config_hash +
                               " does not match " + hash + " (use --force to override)");
    records.push_back(rec);
  }
  std::ofstream rs(paths.report(), std::ios::trunc);
  rs << "config_hash: " << hash << "\n";
  rs << "run: " << cfg.name << "\n\n";
  rs << format_metrics_table(records);
  if (fs::exists(paths.timing())) {
    std::ifstream ts(paths.timing());
    nlohmann::json timing;
    ts >> timing;
    rs << "\ntiming (median of repetitions):\n";
    for (const auto& t : timing)
      rs << "  S=" << t.at("S").get<int>() << "  mc=" << t.at("mc_seconds").get<double>()
         << "s  one-pass=" << t.at("one_pass_seconds").get<double>()
         << "s  speedup=" << t.at("speedup").get<double>() << "x\n";
  }
}

}  // namespace opu
