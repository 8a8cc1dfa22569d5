#include <gtest/gtest.h>

#include <cmath>

#include "opu/eval.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

namespace {

using opu::ScoredExample;
using opu::Vec;

// Brute force over all (positive, negative) pairs; ties count 1/2.
double auroc_pairs(const std::vector<ScoredExample>& ex) {
  double wins = 0.0;
  int pairs = 0;
  for (const auto& p : ex)
    for (const auto& n : ex) {
      if (p.label != 1 || n.label != 0) continue;
      ++pairs;
      if (p.score > n.score)
        wins += 1.0;
      else if (p.score == n.score)
        wins += 0.5;
    }
  return wins / pairs;
}

TEST(Auroc, PerfectSeparation) {
  std::vector<ScoredExample> ex = {{0.9, 1}, {0.8, 1}, {0.2, 0}, {0.1, 0}};
  EXPECT_DOUBLE_EQ(opu::auroc(ex), 1.0);
}

TEST(Auroc, AllTiedIsHalf) {
  std::vector<ScoredExample> ex = {{0.5, 1}, {0.5, 0}, {0.5, 1}, {0.5, 0}};
  EXPECT_DOUBLE_EQ(opu::auroc(ex), 0.5);
}

TEST(Auroc, MatchesPairOracleOnFixedSets) {
  const std::vector<ScoredExample> a = {{0.1, 0}, {0.4, 1}, {0.35, 0}, {0.8, 1}};
  EXPECT_DOUBLE_EQ(opu::auroc(a), 1.0);
  EXPECT_DOUBLE_EQ(opu::auroc(a), auroc_pairs(a));
  const std::vector<ScoredExample> b = {{0.9, 0}, {0.4, 1}, {0.35, 0}, {0.8, 1}};
  EXPECT_DOUBLE_EQ(opu::auroc(b), 0.5);
  EXPECT_DOUBLE_EQ(opu::auroc(b), auroc_pairs(b));
  // with ties
  const std::vector<ScoredExample> c = {{0.5, 0}, {0.5, 1}, {0.2, 0}, {0.8, 1}, {0.5, 0}};
  EXPECT_DOUBLE_EQ(opu::auroc(c), auroc_pairs(c));
}

TEST(Auroc, SingleClassThrows) {
  std::vector<ScoredExample> ex = {{0.5, 1}, {0.6, 1}};
  EXPECT_THROW(opu::auroc(ex), std::invalid_argument);
}

TEST(Auroc, InvariantUnderStrictlyIncreasingTransforms) {
  opu::RngState rng(11);
  std::vector<ScoredExample> ex;
  for (int i = 0; i < 200; ++i)
    ex.push_back({rng.normal(), static_cast<int>(rng.next_u64() % 2)});
  const double base = opu::auroc(ex);
  auto mapped = ex;
  for (auto& e : mapped) e.score = std::exp(e.score);
  EXPECT_DOUBLE_EQ(opu::auroc(mapped), base);
  for (auto& e : mapped) e.score = 3.0 * e.score + 7.0;
  EXPECT_DOUBLE_EQ(opu::auroc(mapped), base);
}

TEST(Auroc, LabelFlipComplementsWhenNoTies) {
  opu::RngState rng(13);
  std::vector<ScoredExample> ex;
  for (int i = 0; i < 101; ++i)
    ex.push_back({rng.uniform(), static_cast<int>(rng.next_u64() % 2)});
  const double base = opu::auroc(ex);
  auto flipped = ex;
  for (auto& e : flipped) e.label = 1 - e.label;
  EXPECT_NEAR(opu::auroc(flipped), 1.0 - base, 1e-12);
}

TEST(Aupr, PerfectRanking) {
  std::vector<ScoredExample> ex = {{0.9, 1}, {0.8, 1}, {0.2, 0}, {0.1, 0}};
  EXPECT_DOUBLE_EQ(opu::aupr(ex), 1.0);
}

TEST(Aupr, RandomScoresApproachPrevalence) {
  opu::RngState rng(17);
  std::vector<ScoredExample> ex;
  for (int i = 0; i < 10000; ++i)
    ex.push_back({rng.uniform(), rng.uniform() < 0.1 ? 1 : 0});
  EXPECT_NEAR(opu::aupr(ex), 0.10, 0.02);
}

TEST(Aupr, MatchesExhaustiveThresholdOracle) {
  const std::vector<ScoredExample> ex = {{0.9, 1}, {0.7, 0}, {0.7, 1},
                                         {0.4, 0}, {0.3, 1}, {0.1, 0}};
  // oracle: enumerate distinct thresholds descending, step-sum the PR curve
  std::vector<double> thresholds = {0.9, 0.7, 0.4, 0.3, 0.1};
  const int n_pos = 3;
  double area = 0.0, recall_prev = 0.0;
  for (double t : thresholds) {
    int tp = 0, fp = 0;
    for (const auto& e : ex) {
      if (e.score >= t) (e.label == 1 ? tp : fp) += 1;
    }
    const double recall = static_cast<double>(tp) / n_pos;
    const double precision = static_cast<double>(tp) / (tp + fp);
    area += (recall - recall_prev) * precision;
    recall_prev = recall;
  }
  EXPECT_DOUBLE_EQ(opu::aupr(ex), area);
}

TEST(Aupr, ReversedRankingIsWorse) {
  opu::RngState rng(19);
  std::vector<ScoredExample> ex;
  for (int i = 0; i < 500; ++i) {
    const int label = i < 100 ? 1 : 0;
    ex.push_back({(label ? 2.0 : 0.0) + rng.normal(), label});
  }
  auto reversed = ex;
  for (auto& e : reversed) e.score = -e.score;
  EXPECT_LT(opu::aupr(reversed), opu::aupr(ex));
}

TEST(Aupr, NoPositivesThrows) {
  std::vector<ScoredExample> ex = {{0.5, 0}, {0.6, 0}};
  EXPECT_THROW(opu::aupr(ex), std::invalid_argument);
}

// ---------------------------------------------------------------------------

opu::StudentModel make_student(uint64_t seed, int k) {
  opu::RngState rng(seed);
  opu::StudentModel m;
  m.pm = opu::make_mlp({2, 8, k}, opu::Activation::softmax, rng);
  m.cm = opu::make_mlp({2, 8, 1}, opu::Activation::identity, rng);
  return m;
}

TEST(MiscTask, OracleScorerGivesPerfectAuroc) {
  const auto blobs = testutil::make_blobs(3, 30, 2.2, 1.0, 23);
  const auto m = make_student(29, 3);
  opu::Predictor predictor = [&m](const Vec& x) { return opu::student_predict(m, x); };
  // oracle scorer: 1 iff the predictor misclassifies (row looked up by value)
  std::vector<int> labels = blobs.y;
  opu::Scorer scorer = [&, labels](const Vec& x) {
    for (int i = 0; i < blobs.x.rows; ++i)
      if (blobs.x(i, 0) == x[0] && blobs.x(i, 1) == x[1]) {
        const auto pred = opu::student_predict(m, x);
        return opu::argmax_lowest(pred.probs) == labels[i] ? 0.0 : 1.0;
      }
    return 0.0;
  };
  const auto rec = opu::misc_task(predictor, scorer, blobs.x, blobs.y);
  EXPECT_DOUBLE_EQ(rec.auroc_value, 1.0);
  EXPECT_GT(rec.n_positive, 0);
}

TEST(MiscTask, ConstantScorerGivesHalf) {
  const auto blobs = testutil::make_blobs(3, 30, 2.2, 1.0, 31);
  const auto m = make_student(37, 3);
  opu::Predictor predictor = [&m](const Vec& x) { return opu::student_predict(m, x); };
  opu::Scorer scorer = [](const Vec&) { return 0.42; };
  const auto rec = opu::misc_task(predictor, scorer, blobs.x, blobs.y);
  EXPECT_DOUBLE_EQ(rec.auroc_value, 0.5);
}

TEST(MiscTask, AllCorrectSurfacesContextError) {
  opu::Matrix x(4, 2);
  std::vector<int> y = {0, 0, 1, 1};
  for (int i = 0; i < 4; ++i) {
    x(i, 0) = i < 2 ? -3.0 : 3.0;
    x(i, 1) = 0.0;
  }
  opu::Predictor predictor = [](const Vec& xi) {
    return opu::SimplexPoint{{xi[0] < 0 ? 0.9 : 0.1, xi[0] < 0 ? 0.1 : 0.9}};
  };
  opu::Scorer scorer = [](const Vec&) { return 0.0; };
  try {
    opu::misc_task(predictor, scorer, x, y);
    FAIL() << "expected error";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("misclassification"), std::string::npos);
  }
}

TEST(OodTask, IdenticalSetsGiveHalf) {
  const auto blobs = testutil::make_blobs(2, 40, 2.0, 0.8, 41);
  const auto m = make_student(43, 2);
  const auto scorer = opu::student_scorer(m, "E");
  const auto rec = opu::ood_task(scorer, blobs.x, blobs.x);
  EXPECT_DOUBLE_EQ(rec.auroc_value, 0.5);
}

TEST(OodTask, DistanceScorerSeparatesShiftedCluster) {
  const auto in = testutil::make_blobs(2, 50, 2.0, 0.8, 47);
  opu::Matrix ood(40, 2);
  opu::RngState rng(53);
  for (int i = 0; i < 40; ++i) {
    ood(i, 0) = 30.0 + 0.8 * rng.normal();
    ood(i, 1) = -30.0 + 0.8 * rng.normal();
  }
  // scorer: distance to the training mean
  double mx = 0.0, my = 0.0;
  for (int i = 0; i < in.x.rows; ++i) {
    mx += in.x(i, 0);
    my += in.x(i, 1);
  }
  mx /= in.x.rows;
  my /= in.x.rows;
  opu::Scorer scorer = [mx, my](const Vec& x) {
    return std::hypot(x[0] - mx, x[1] - my);
  };
  const auto rec = opu::ood_task(scorer, in.x, ood);
  EXPECT_GE(rec.auroc_value, 0.99);
  EXPECT_EQ(rec.n_positive, 40);
}

TEST(StudentScorer, DirectionConvention) {
  // P and C are negated so that higher = more uncertain for every measure.
  const auto m = make_student(59, 3);
  const Vec x = {0.5, -0.5};
  const auto s = opu::uncertainty_scores(m, x);
  EXPECT_DOUBLE_EQ(opu::student_scorer(m, "E")(x), s.entropy);
  EXPECT_DOUBLE_EQ(opu::student_scorer(m, "P")(x), -s.max_prob);
  EXPECT_DOUBLE_EQ(opu::student_scorer(m, "D")(x), s.diff_entropy);
  EXPECT_DOUBLE_EQ(opu::student_scorer(m, "C")(x), -s.concentration);
  EXPECT_THROW(opu::student_scorer(m, "Z"), std::invalid_argument);
}

// ---------------------------------------------------------------------------

opu::ParticleCloud dirichlet_cloud(const opu::DirichletParams& alpha, int s,
                                   uint64_t seed) {
  opu::RngState rng(seed);
  opu::ParticleCloud cloud;
  cloud.num_classes = alpha.dim();
  for (int i = 0; i < s; ++i) cloud.points.push_back(opu::sample_dirichlet(alpha, rng));
  return cloud;
}

opu::StudentModel constant_student3(const Vec& h, double g) {
  opu::StudentModel m;
  opu::MlpLayer pm_layer;
  pm_layer.W = opu::Matrix(3, 2);
  pm_layer.b = {std::log(h[0]), std::log(h[1]), std::log(h[2])};
  pm_layer.act = opu::Activation::softmax;
  m.pm.layers.push_back(pm_layer);
  opu::MlpLayer cm_layer;
  cm_layer.W = opu::Matrix(1, 2);
  cm_layer.b = {g};
  cm_layer.act = opu::Activation::identity;
  m.cm.layers.push_back(cm_layer);
  return m;
}

TEST(AmortizationGap, NearZeroAtTheLocalFit) {
  const auto cloud = dirichlet_cloud({{4.0, 3.0, 2.0}}, 150, 61);
  const auto kernel = opu::default_kernel(cloud.points);
  opu::GapConfig cfg;
  cfg.sample_count = 64;
  cfg.fit.steps = 200;
  cfg.fit.sample_count = 64;

  // fit once, then pin the student at that fit
  opu::RngState fit_rng(62);
  const auto local = opu::fit_dirichlet_mmd(cloud, kernel, cfg.fit, fit_rng);
  const auto mean = opu::dirichlet_mean(local);
  const auto m = constant_student3(mean.probs, std::log(local.precision()));

  // estimator noise scale: repeated MMD evaluations at the local fit
  std::vector<double> reps;
  opu::RngState nrng(63);
  for (int r = 0; r < 30; ++r)
    reps.push_back(opu::mmd_from_samples(cloud.points, local, 64, kernel, nrng));
  const auto noise = oracle::mean_se(reps);
  const double band = 4.0 * std::sqrt(noise.var);

  opu::RngState rng(64);
  const auto gap = opu::amortization_gap(m, {0.1, 0.1}, cloud, kernel, cfg, rng);
  EXPECT_NEAR(gap.delta, 0.0, band);
}

TEST(AmortizationGap, LowerBoundHolds) {
  const auto cloud = dirichlet_cloud({{2.0, 5.0, 3.0}}, 150, 65);
  const auto kernel = opu::default_kernel(cloud.points);
  opu::GapConfig cfg;
  cfg.sample_count = 64;
  cfg.fit.steps = 200;
  cfg.fit.sample_count = 64;

  std::vector<double> reps;
  opu::RngState nrng(66);
  {
    opu::RngState fit_rng(67);
    const auto local = opu::fit_dirichlet_mmd(cloud, kernel, cfg.fit, fit_rng);
    for (int r = 0; r < 30; ++r)
      reps.push_back(opu::mmd_from_samples(cloud.points, local, 64, kernel, nrng));
  }
  const auto noise = oracle::mean_se(reps);
  const double bound = 2.0 * std::sqrt(noise.var);

  // untrained students must sit above the projection, within estimator noise
  for (uint64_t seed : {71, 72, 73}) {
    const auto m = make_student(seed, 3);
    opu::RngState rng(80 + seed);
    const auto gap = opu::amortization_gap(m, {0.3, -0.3}, cloud, kernel, cfg, rng);
    EXPECT_GE(gap.delta, -bound) << "seed " << seed;
  }
}

TEST(AmortizationGap, TriangleUpperBoundSanity) {
  const auto cloud = dirichlet_cloud({{3.0, 3.0, 3.0}}, 150, 91);
  const auto kernel = opu::default_kernel(cloud.points);
  opu::GapConfig cfg;
  cfg.sample_count = 64;
  cfg.fit.steps = 200;
  cfg.fit.sample_count = 64;
  const auto m = make_student(92, 3);
  const Vec x = {0.2, 0.4};

  opu::RngState rng(93);
  const auto gap = opu::amortization_gap(m, x, cloud, kernel, cfg, rng);

  // MMD between the student and the local fit, plus a noise allowance
  opu::RngState fit_rng = opu::RngState(93).split(0xf17);
  const auto local = opu::fit_dirichlet_mmd(cloud, kernel, cfg.fit, fit_rng);
  const auto q_alpha = opu::student_alpha(m, x);
  opu::RngState srng(94);
  std::vector<opu::SimplexPoint> qs, ls;
  for (int i = 0; i < 256; ++i) {
    qs.push_back(opu::sample_dirichlet(q_alpha, srng));
    ls.push_back(opu::sample_dirichlet(local, srng));
  }
  const double cross = std::sqrt(std::max(opu::mmd2_estimate(qs, ls, kernel), 0.0));

  std::vector<double> reps;
  opu::RngState nrng(95);
  for (int r = 0; r < 30; ++r)
    reps.push_back(opu::mmd_from_samples(cloud.points, local, 64, kernel, nrng));
  const auto noise = oracle::mean_se(reps);
  EXPECT_LE(gap.delta, cross + 4.0 * std::sqrt(noise.var));
  EXPECT_GE(gap.delta, -4.0 * std::sqrt(noise.var));
}

// ---------------------------------------------------------------------------

TEST(TimingHarness, SingleSampleEnsembleIsHalfSpeed) {
  // S = 1: the MC arm runs one net, the student runs two of the same size.
  opu::RngState rng(101);
  const auto net = opu::make_mlp({2, 32, 32, 3}, opu::Activation::softmax, rng);
  opu::StudentModel m;
  opu::RngState srng(102);
  m.pm = opu::make_mlp({2, 32, 32, 3}, opu::Activation::softmax, srng);
  m.cm = opu::make_mlp({2, 32, 32, 1}, opu::Activation::identity, srng);
  opu::RngState mask_rng(103);
  const auto set = opu::mcdp_sample(net, {1.0, 1.0, 1.0}, 1, mask_rng);
  opu::Matrix inputs(400, 2);
  opu::RngState drng(104);
  for (int i = 0; i < 400; ++i) {
    inputs(i, 0) = drng.normal();
    inputs(i, 1) = drng.normal();
  }
  const auto t = opu::timing_harness(set, m, inputs, 5);
  EXPECT_GE(t.speedup, 0.25);
  EXPECT_LE(t.speedup, 1.0);
}

TEST(TimingHarness, EnsembleOfFiftyIsMuchSlower) {
  opu::RngState rng(105);
  const auto net = opu::make_mlp({2, 32, 32, 3}, opu::Activation::softmax, rng);
  opu::StudentModel m;
  opu::RngState srng(106);
  m.pm = opu::make_mlp({2, 32, 32, 3}, opu::Activation::softmax, srng);
  m.cm = opu::make_mlp({2, 32, 32, 1}, opu::Activation::identity, srng);
  opu::RngState mask_rng(107);
  const auto set = opu::mcdp_sample(net, {1.0, 0.5, 0.5}, 50, mask_rng);
  opu::Matrix inputs(200, 2);
  opu::RngState drng(108);
  for (int i = 0; i < 200; ++i) {
    inputs(i, 0) = drng.normal();
    inputs(i, 1) = drng.normal();
  }
  const auto t = opu::timing_harness(set, m, inputs, 5);
  EXPECT_GE(t.speedup, 10.0);
}

// ---------------------------------------------------------------------------

TEST(MetricsRecord, JsonRoundTrip) {
  opu::MetricsRecord r;
  r.model = "opu-mcdp-mmd";
  r.task = "ood";
  r.measure = "C";
  r.auroc_value = 0.987;
  r.aupr_value = 0.91;
  r.accuracy = std::nullopt;
  r.wall_time_s = 1.25;
  r.n_examples = 600;
  r.n_positive = 300;
  r.seed = 42;
  r.config_hash = "abcd1234";
  const auto j = opu::metrics_to_json(r);
  const auto back = opu::metrics_from_json(j);
  EXPECT_EQ(back.model, r.model);
  EXPECT_EQ(back.task, r.task);
  EXPECT_EQ(back.measure, r.measure);
  EXPECT_DOUBLE_EQ(back.auroc_value, r.auroc_value);
  EXPECT_FALSE(back.accuracy.has_value());
  EXPECT_EQ(back.config_hash, r.config_hash);
}

TEST(MetricsTable, RendersGrid) {
  std::vector<opu::MetricsRecord> recs;
  opu::MetricsRecord a;
  a.model = "teacher-mcdp";
  a.task = "misc";
  a.measure = "E";
  a.auroc_value = 0.942;
  a.aupr_value = 0.401;
  a.accuracy = 0.953;
  recs.push_back(a);
  a.measure = "P";
  a.auroc_value = 0.951;
  a.aupr_value = 0.395;
  recs.push_back(a);
  opu::MetricsRecord b;
  b.model = "teacher-mcdp";
  b.task = "ood";
  b.measure = "D";
  b.auroc_value = 0.991;
  b.aupr_value = 0.988;
  recs.push_back(b);
  opu::MetricsRecord t;
  t.model = "teacher-mcdp";
  t.task = "timing";
  t.wall_time_s = 1.5;
  recs.push_back(t);

  const std::string table = opu::format_metrics_table(recs);
  EXPECT_NE(table.find("teacher-mcdp"), std::string::npos);
  EXPECT_NE(table.find("95.1 (P)"), std::string::npos);  // best measure wins
  EXPECT_NE(table.find("40.1 (E)"), std::string::npos);
  EXPECT_NE(table.find("99.1 (D)"), std::string::npos);
  EXPECT_NE(table.find("95.3"), std::string::npos);
  EXPECT_NE(table.find("1.5"), std::string::npos);
}

}  // namespace
