#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "opu/losses.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

namespace {

using opu::Vec;

opu::StudentModel constant_student(const Vec& h, double g, int input_dim = 2) {
  opu::StudentModel m;
  opu::MlpLayer pm_layer;
  pm_layer.W = opu::Matrix(static_cast<int>(h.size()), input_dim);
  pm_layer.b.resize(h.size());
  for (size_t k = 0; k < h.size(); ++k) pm_layer.b[k] = std::log(h[k]);
  pm_layer.act = opu::Activation::softmax;
  m.pm.layers.push_back(pm_layer);
  opu::MlpLayer cm_layer;
  cm_layer.W = opu::Matrix(1, input_dim);
  cm_layer.b = {g};
  cm_layer.act = opu::Activation::identity;
  m.cm.layers.push_back(cm_layer);
  return m;
}

opu::StudentModel random_student(uint64_t seed, int input_dim, int k, int hidden = 8) {
  opu::RngState rng(seed);
  opu::StudentModel m;
  m.pm = opu::make_mlp({input_dim, hidden, k}, opu::Activation::softmax, rng);
  m.cm = opu::make_mlp({input_dim, hidden, 1}, opu::Activation::identity, rng);
  return m;
}

opu::KernelSpec rbf_kernel(double sigma, double weight = 1.0) {
  opu::KernelComponent c;
  c.kind = opu::KernelComponent::Kind::rbf;
  c.bandwidth = sigma;
  c.weight = weight;
  return opu::KernelSpec{{c}};
}

opu::KernelSpec poly_kernel(int degree, double offset, double scale, double weight = 1.0) {
  opu::KernelComponent c;
  c.kind = opu::KernelComponent::Kind::polynomial;
  c.degree = degree;
  c.offset = offset;
  c.scale = scale;
  c.weight = weight;
  return opu::KernelSpec{{c}};
}

TEST(KernelEval, RbfAtEqualPointsIsOne) {
  const Vec a = {0.2, 0.3, 0.5};
  EXPECT_DOUBLE_EQ(opu::kernel_eval(rbf_kernel(1.0), a, a), 1.0);
}

TEST(KernelEval, LinearKernelOrthogonalPoints) {
  // degree 1, offset ~ 0, scale 1 on orthogonal vertices
  opu::KernelComponent c;
  c.kind = opu::KernelComponent::Kind::polynomial;
  c.degree = 1;
  c.offset = 1e-300;
  c.scale = 1.0;
  const opu::KernelSpec k{{c}};
  EXPECT_NEAR(opu::kernel_eval(k, {1.0, 0.0}, {0.0, 1.0}), 0.0, 1e-299);
}

TEST(KernelEval, CompositeIsWeightedSumOfParts) {
  const Vec a = {0.6, 0.1, 0.3}, b = {0.2, 0.4, 0.4};
  opu::KernelSpec comp;
  comp.components = {rbf_kernel(0.7, 0.5).components[0],
                     poly_kernel(2, 1.0, 1.0, 0.5).components[0]};
  const double together = opu::kernel_eval(comp, a, b);
  const double parts = opu::kernel_eval(rbf_kernel(0.7, 0.5), a, b) +
                       opu::kernel_eval(poly_kernel(2, 1.0, 1.0, 0.5), a, b);
  EXPECT_NEAR(together, parts, 1e-15);
}

TEST(KernelEval, GradMatchesFiniteDifference) {
  opu::KernelSpec comp;
  comp.components = {rbf_kernel(0.5, 0.5).components[0],
                     poly_kernel(2, 1.0, 1.0, 0.5).components[0]};
  const Vec a = {0.5, 0.2, 0.3}, b = {0.1, 0.6, 0.3};
  const Vec grad = opu::kernel_grad_a(comp, a, b);
  const double h = 1e-7;
  for (size_t i = 0; i < a.size(); ++i) {
    Vec ap = a, am = a;
    ap[i] += h;
    am[i] -= h;
    const double fd = (opu::kernel_eval(comp, ap, b) - opu::kernel_eval(comp, am, b)) / (2 * h);
    EXPECT_NEAR(grad[i], fd, 1e-6 * std::max(1.0, std::fabs(fd)));
  }
}

TEST(Mmd2, IdenticalPointMassesGiveZero) {
  const auto k = rbf_kernel(1.0);
  std::vector<opu::SimplexPoint> p(10, opu::SimplexPoint{{0.3, 0.7}});
  EXPECT_NEAR(opu::mmd2_biased(p, p, k), 0.0, 1e-13);
  EXPECT_LE(std::fabs(opu::mmd2_estimate(p, p, k)), 1e-12);
}

TEST(Mmd2, MatchesBruteForceDoubleLoop) {
  opu::RngState rng(90);
  std::vector<opu::SimplexPoint> p, q;
  for (int i = 0; i < 20; ++i) {
    p.push_back(opu::sample_dirichlet({{2.0, 1.0, 1.5}}, rng));
    q.push_back(opu::sample_dirichlet({{1.0, 3.0, 1.0}}, rng));
  }
  opu::KernelSpec k;
  k.components = {rbf_kernel(0.6, 0.5).components[0],
                  poly_kernel(2, 1.0, 1.0, 0.5).components[0]};
  // brute-force U-statistic
  double kpp = 0.0, kqq = 0.0, kpq = 0.0;
  for (int i = 0; i < 20; ++i)
    for (int j = 0; j < 20; ++j) {
      if (i != j) {
        kpp += opu::kernel_eval(k, p[i], p[j]);
        kqq += opu::kernel_eval(k, q[i], q[j]);
      }
      kpq += opu::kernel_eval(k, p[i], q[j]);
    }
  const double brute = kpp / (20.0 * 19.0) + kqq / (20.0 * 19.0) - 2.0 * kpq / 400.0;
  EXPECT_NEAR(opu::mmd2_estimate(p, q, k), brute, 1e-12);
}

TEST(Mmd2, SeparatedVertexClustersNearAnalyticLimit) {
  opu::RngState rng(91);
  std::vector<opu::SimplexPoint> p, q;
  for (int i = 0; i < 40; ++i) {
    p.push_back(opu::sample_dirichlet({{400.0, 1.0, 1.0}}, rng));
    q.push_back(opu::sample_dirichlet({{1.0, 400.0, 1.0}}, rng));
  }
  const auto k = rbf_kernel(0.5);
  const double val = opu::mmd2_estimate(p, q, k);
  EXPECT_GT(val, 0.5);
  // point-mass limit: 1 + 1 - 2 exp(-||v1-v2||^2 / (2 sigma^2))
  const double limit = 2.0 - 2.0 * std::exp(-2.0 / (2.0 * 0.25));
  EXPECT_NEAR(val, limit, 0.1);
}

TEST(Mmd2, SymmetricAndPermutationInvariant) {
  opu::RngState rng(92);
  std::vector<opu::SimplexPoint> p, q;
  for (int i = 0; i < 15; ++i) {
    p.push_back(opu::sample_dirichlet({{2.0, 2.0, 2.0}}, rng));
    q.push_back(opu::sample_dirichlet({{1.0, 1.0, 4.0}}, rng));
  }
  const auto k = rbf_kernel(0.8);
  EXPECT_EQ(opu::mmd2_estimate(p, q, k), opu::mmd2_estimate(q, p, k));
  auto p_shuffled = p;
  std::swap(p_shuffled[0], p_shuffled[7]);
  std::swap(p_shuffled[3], p_shuffled[14]);
  EXPECT_NEAR(opu::mmd2_estimate(p_shuffled, q, k), opu::mmd2_estimate(p, q, k), 1e-12);
}

TEST(Mmd2, CompositeKernelGramIsPsd) {
  opu::RngState rng(93);
  std::vector<opu::SimplexPoint> pts;
  for (int i = 0; i < 30; ++i)
    pts.push_back(opu::sample_dirichlet({{1.0, 2.0, 1.5}}, rng));
  const auto k = opu::default_kernel(pts);
  std::vector<std::vector<double>> gram(30, std::vector<double>(30));
  for (int i = 0; i < 30; ++i)
    for (int j = 0; j < 30; ++j) gram[i][j] = opu::kernel_eval(k, pts[i], pts[j]);
  EXPECT_GE(oracle::min_eigenvalue_sym(gram), -1e-8);
}

// ---------------------------------------------------------------------------
// KL step.

opu::ParticleCloud dirichlet_cloud(const opu::DirichletParams& alpha, int s,
                                   uint64_t seed) {
  opu::RngState rng(seed);
  opu::ParticleCloud cloud;
  cloud.num_classes = alpha.dim();
  for (int i = 0; i < s; ++i) cloud.points.push_back(opu::sample_dirichlet(alpha, rng));
  return cloud;
}

TEST(KlStep, LossEqualsLogPdfDecomposition) {
  const auto m = random_student(101, 2, 3);
  const auto cloud = dirichlet_cloud({{2.0, 3.0, 5.0}}, 50, 102);
  const Vec x = {0.4, -0.6};
  const double loss = opu::kl_loss(m, x, cloud);
  const auto alpha = opu::student_alpha(m, x);
  double recompute = 0.0;
  for (const auto& p : cloud.points) recompute += opu::dirichlet_log_pdf(alpha, p);
  EXPECT_DOUBLE_EQ(loss, -recompute / cloud.size());
}

TEST(KlStep, GradientsMatchFiniteDifferences) {
  auto m = random_student(103, 2, 3);
  const auto cloud = dirichlet_cloud({{2.0, 1.0, 3.5}}, 30, 104);
  const Vec x = {0.7, 0.1};
  auto pm_grads = opu::zero_grads(m.pm);
  auto cm_grads = opu::zero_grads(m.cm);
  opu::kl_loss_grads(m, x, cloud, &pm_grads, &cm_grads);

  const double h = 1e-6;
  double worst = 0.0;
  auto check_net = [&](opu::MlpParams opu::StudentModel::*net, const opu::MlpGrads& grads) {
    for (size_t li = 0; li < (m.*net).layers.size(); ++li) {
      auto& layer = (m.*net).layers[li];
      for (size_t j = 0; j < layer.W.data.size(); ++j) {
        const double orig = layer.W.data[j];
        layer.W.data[j] = orig + h;
        const double up = opu::kl_loss(m, x, cloud);
        layer.W.data[j] = orig - h;
        const double dn = opu::kl_loss(m, x, cloud);
        layer.W.data[j] = orig;
        const double fd = (up - dn) / (2.0 * h);
        worst = std::max(worst,
                         std::fabs(fd - grads.dW[li].data[j]) / std::max(1.0, std::fabs(fd)));
      }
      for (size_t j = 0; j < layer.b.size(); ++j) {
        const double orig = layer.b[j];
        layer.b[j] = orig + h;
        const double up = opu::kl_loss(m, x, cloud);
        layer.b[j] = orig - h;
        const double dn = opu::kl_loss(m, x, cloud);
        layer.b[j] = orig;
        const double fd = (up - dn) / (2.0 * h);
        worst = std::max(worst,
                         std::fabs(fd - grads.db[li][j]) / std::max(1.0, std::fabs(fd)));
      }
    }
  };
  check_net(&opu::StudentModel::pm, pm_grads);
  check_net(&opu::StudentModel::cm, cm_grads);
  EXPECT_LT(worst, 1e-3);
}

TEST(KlStep, ConvergesToMleOnFixedCloud) {
  const auto cloud = dirichlet_cloud({{2.0, 3.0, 5.0}}, 400, 105);
  auto m = random_student(106, 2, 3);
  auto opt = opu::make_student_opt(m, 0.05);
  const Vec x = {1.0, 0.5};
  for (int t = 0; t < 500; ++t) opu::kl_step(m, x, cloud, opt);
  const auto mle = opu::fit_dirichlet_mle(cloud);
  const auto alpha = opu::student_alpha(m, x);
  for (int k = 0; k < 3; ++k)
    EXPECT_NEAR(alpha.alpha[k], mle.alpha[k], 0.10 * mle.alpha[k]);
}

TEST(KlStep, MonotoneDecreaseOnDegenerateCloud) {
  // all particles at the clamped boundary point
  opu::ParticleCloud cloud;
  cloud.num_classes = 3;
  const auto p = opu::clamp_to_open_simplex({1.0, 0.0, 0.0});
  for (int i = 0; i < 20; ++i) cloud.points.push_back(p);
  auto m = random_student(107, 2, 3);
  auto opt = opu::make_student_opt(m, 1e-3);
  const Vec x = {0.2, 0.2};
  double prev = opu::kl_loss(m, x, cloud);
  for (int t = 0; t < 10; ++t) {
    opu::kl_step(m, x, cloud, opt);
    const double cur = opu::kl_loss(m, x, cloud);
    EXPECT_LT(cur, prev);
    prev = cur;
  }
}

// ---------------------------------------------------------------------------
// MMD step.

TEST(MmdStep, ImplicitGradientMatchesCrnFiniteDifference) {
  // Frozen uniforms drive quantile-function sampling; the analytic estimator
  // must match the common-random-number finite difference of the loss.
  const auto cloud = dirichlet_cloud({{3.0, 2.0, 4.0}}, 60, 201);
  const auto kernel = opu::default_kernel(cloud.points);
  const opu::DirichletParams alpha{{1.4, 2.2, 0.9}};
  const int s_prime = 512;
  opu::RngState urng(202);
  std::vector<Vec> uniforms(s_prime, Vec(3));
  for (auto& row : uniforms)
    for (auto& u : row) u = urng.uniform_pos();

  auto gamma_quantile = [](double shape, double u) {
    return oracle::quantile_bisect(
        [shape](double z) { return opu::gamma_cdf(shape, z); }, u, 0.0, 500.0);
  };
  auto samples_at = [&](const opu::DirichletParams& a) {
    std::vector<opu::DirichletDraw> draws(s_prime);
    for (int s = 0; s < s_prime; ++s) {
      auto& d = draws[s];
      d.gammas.resize(3);
      double total = 0.0;
      for (int c = 0; c < 3; ++c) {
        d.gammas[c] = std::max(gamma_quantile(a.alpha[c], uniforms[s][c]),
                               opu::kSimplexClamp);
        total += d.gammas[c];
      }
      d.total = total;
      Vec probs(3);
      for (int c = 0; c < 3; ++c) probs[c] = d.gammas[c] / total;
      d.point = opu::SimplexPoint{probs};
    }
    return draws;
  };
  auto loss_at = [&](const opu::DirichletParams& a) {
    auto draws = samples_at(a);
    std::vector<opu::SimplexPoint> q;
    for (const auto& d : draws) q.push_back(d.point);
    return opu::mmd2_estimate(cloud.points, q, kernel);
  };

  // analytic estimator at the frozen draws
  auto draws = samples_at(alpha);
  std::vector<opu::SimplexPoint> q;
  for (const auto& d : draws) q.push_back(d.point);
  std::vector<Vec> grad_pi;
  opu::detail::mmd2_with_sample_grads(cloud.points, q, kernel, &grad_pi);
  Vec grad_alpha(3, 0.0);
  for (int s = 0; s < s_prime; ++s) {
    const Vec grad_gam = opu::dirichlet_normalization_vjp(draws[s], grad_pi[s]);
    for (int c = 0; c < 3; ++c)
      grad_alpha[c] +=
          grad_gam[c] * opu::implicit_grad_gamma(draws[s].gammas[c], alpha.alpha[c]);
  }

  double num = 0.0, den = 0.0;
  for (int c = 0; c < 3; ++c) {
    const double h = 1e-4 * alpha.alpha[c];
    auto ap = alpha, am = alpha;
    ap.alpha[c] += h;
    am.alpha[c] -= h;
    const double fd = (loss_at(ap) - loss_at(am)) / (2.0 * h);
    num += (grad_alpha[c] - fd) * (grad_alpha[c] - fd);
    den += fd * fd;
  }
  EXPECT_LT(std::sqrt(num / den), 0.02);
}

TEST(MmdStep, DrivesLossDownOnFixedCloud) {
  const auto cloud = dirichlet_cloud({{5.0, 5.0, 5.0}}, 120, 203);
  const auto kernel = opu::default_kernel(cloud.points);
  auto m = random_student(204, 2, 3);
  auto opt = opu::make_student_opt(m, 5e-3);
  const Vec x = {0.8, -0.4};
  opu::RngState rng(205);

  auto eval_mmd2 = [&](const opu::StudentModel& model) {
    opu::RngState erng(206);
    const auto alpha = opu::student_alpha(model, x);
    std::vector<opu::SimplexPoint> q;
    for (int i = 0; i < 512; ++i) q.push_back(opu::sample_dirichlet(alpha, erng));
    return opu::mmd2_estimate(cloud.points, q, kernel);
  };
  const double initial = eval_mmd2(m);
  for (int t = 0; t < 1000; ++t) opu::mmd_step(m, x, cloud, kernel, 64, opt, rng);
  const double final_loss = eval_mmd2(m);
  EXPECT_LE(final_loss, 0.10 * initial);
}

TEST(MmdStep, StationaryAtGenerator) {
  const opu::DirichletParams truth{{3.0, 2.0, 4.0}};
  const auto cloud = dirichlet_cloud(truth, 150, 207);
  const auto kernel = opu::default_kernel(cloud.points);

  // reference noise band: loss evaluations with no updates
  std::vector<double> ref;
  opu::RngState ref_rng(208);
  for (int r = 0; r < 100; ++r) {
    std::vector<opu::SimplexPoint> q;
    for (int i = 0; i < 64; ++i) q.push_back(opu::sample_dirichlet(truth, ref_rng));
    ref.push_back(opu::mmd2_estimate(cloud.points, q, kernel));
  }
  const auto band = oracle::mean_se(ref);

  // student pinned at the generator; small steps should not leave the band
  auto m = constant_student({3.0 / 9.0, 2.0 / 9.0, 4.0 / 9.0}, std::log(9.0));
  auto opt = opu::make_student_opt(m, 1e-4);
  opu::RngState rng(209);
  std::vector<double> run;
  for (int t = 0; t < 100; ++t)
    run.push_back(opu::mmd_step(m, {0.1, 0.1}, cloud, kernel, 64, opt, rng));
  const auto run_stats = oracle::mean_se(run);
  EXPECT_NEAR(run_stats.mean, band.mean, 4.0 * std::sqrt(band.var));
  EXPECT_LT(std::sqrt(run_stats.var), 4.0 * std::sqrt(band.var));
}

// ---------------------------------------------------------------------------
// Critic, gradient penalty, EMD.

opu::CriticModel random_critic(uint64_t seed, int input_dim, int k) {
  opu::RngState rng(seed);
  return opu::make_critic(input_dim, k, {16, 16}, {16}, rng);
}

TEST(Critic, ZeroWeightsGiveZero) {
  auto c = random_critic(301, 2, 3);
  for (auto* net : {&c.nn1, &c.nn2, &c.nn3})
    for (auto& l : net->layers) {
      std::fill(l.W.data.begin(), l.W.data.end(), 0.0);
      std::fill(l.b.begin(), l.b.end(), 0.0);
    }
  EXPECT_DOUBLE_EQ(opu::critic_forward(c, {0.5, -0.5}, {0.2, 0.3, 0.5}), 0.0);
}

TEST(Critic, GradientsMatchFiniteDifferences) {
  auto c = random_critic(302, 2, 3);
  const Vec x = {0.4, -0.9};
  const Vec pi = {0.2, 0.5, 0.3};
  opu::CriticTape tape;
  opu::critic_forward(c, x, pi, &tape);
  auto grads = opu::zero_critic_grads(c);
  Vec grad_x;
  const Vec grad_pi = opu::critic_backward(c, tape, 1.0, &grads, &grad_x);

  const double h = 1e-6;
  // input gradient wrt pi
  for (int i = 0; i < 3; ++i) {
    Vec pp = pi, pmn = pi;
    pp[i] += h;
    pmn[i] -= h;
    const double fd =
        (opu::critic_forward(c, x, pp) - opu::critic_forward(c, x, pmn)) / (2.0 * h);
    EXPECT_NEAR(grad_pi[i], fd, 1e-3 * std::max(1.0, std::fabs(fd)));
  }
  // a sweep over every parameter of the three nets
  double worst = 0.0;
  auto check = [&](opu::MlpParams& net, const opu::MlpGrads& g) {
    for (size_t li = 0; li < net.layers.size(); ++li) {
      for (size_t j = 0; j < net.layers[li].W.data.size(); ++j) {
        const double orig = net.layers[li].W.data[j];
        net.layers[li].W.data[j] = orig + h;
        const double up = opu::critic_forward(c, x, pi);
        net.layers[li].W.data[j] = orig - h;
        const double dn = opu::critic_forward(c, x, pi);
        net.layers[li].W.data[j] = orig;
        const double fd = (up - dn) / (2.0 * h);
        worst = std::max(worst,
                         std::fabs(fd - g.dW[li].data[j]) / std::max(1.0, std::fabs(fd)));
      }
      for (size_t j = 0; j < net.layers[li].b.size(); ++j) {
        const double orig = net.layers[li].b[j];
        net.layers[li].b[j] = orig + h;
        const double up = opu::critic_forward(c, x, pi);
        net.layers[li].b[j] = orig - h;
        const double dn = opu::critic_forward(c, x, pi);
        net.layers[li].b[j] = orig;
        const double fd = (up - dn) / (2.0 * h);
        worst = std::max(worst, std::fabs(fd - g.db[li][j]) / std::max(1.0, std::fabs(fd)));
      }
    }
  };
  check(c.nn1, grads.g1);
  check(c.nn2, grads.g2);
  check(c.nn3, grads.g3);
  EXPECT_LT(worst, 1e-3);
}

TEST(Critic, ConditioningOnInputIsLive) {
  const auto c = random_critic(303, 2, 3);
  const Vec pi = {0.3, 0.3, 0.4};
  const double a = opu::critic_forward(c, {1.0, 0.0}, pi);
  const double b = opu::critic_forward(c, {-1.0, 0.5}, pi);
  EXPECT_NE(a, b);
}

TEST(GradientPenalty, LinearUnitGradientCriticGivesZero) {
  // psi(pi) = <a, pi> with ||a|| = 1 through the nn2 branch
  opu::CriticModel c;
  opu::MlpLayer l1;
  l1.W = opu::Matrix(1, 2);
  l1.b = {0.0};
  l1.act = opu::Activation::identity;
  c.nn1.layers.push_back(l1);
  opu::MlpLayer l2;
  l2.W = opu::Matrix(1, 3);
  const double inv_sqrt3 = 1.0 / std::sqrt(3.0);
  l2.W(0, 0) = inv_sqrt3;
  l2.W(0, 1) = inv_sqrt3;
  l2.W(0, 2) = inv_sqrt3;
  l2.b = {0.0};
  l2.act = opu::Activation::identity;
  c.nn2.layers.push_back(l2);
  opu::MlpLayer l3;
  l3.W = opu::Matrix(1, 2);
  l3.W(0, 0) = 0.0;
  l3.W(0, 1) = 1.0;
  l3.b = {0.0};
  l3.act = opu::Activation::identity;
  c.nn3.layers.push_back(l3);
  opu::validate_critic(c);

  opu::RngState rng(304);
  std::vector<opu::SimplexPoint> p(5, opu::SimplexPoint{{0.8, 0.1, 0.1}});
  std::vector<opu::SimplexPoint> q(5, opu::SimplexPoint{{0.1, 0.1, 0.8}});
  EXPECT_NEAR(opu::gradient_penalty(c, {0.0, 0.0}, p, q, 16, rng), 0.0, 1e-12);
}

TEST(GradientPenalty, ZeroCriticGivesOne) {
  auto c = random_critic(305, 2, 3);
  for (auto* net : {&c.nn1, &c.nn2, &c.nn3})
    for (auto& l : net->layers) {
      std::fill(l.W.data.begin(), l.W.data.end(), 0.0);
      std::fill(l.b.begin(), l.b.end(), 0.0);
    }
  opu::RngState rng(306);
  std::vector<opu::SimplexPoint> p(4, opu::SimplexPoint{{0.7, 0.2, 0.1}});
  std::vector<opu::SimplexPoint> q(4, opu::SimplexPoint{{0.2, 0.2, 0.6}});
  EXPECT_DOUBLE_EQ(opu::gradient_penalty(c, {0.1, 0.1}, p, q, 8, rng), 1.0);
}

TEST(GradientPenalty, MatchesBruteForceReplay) {
  const auto c = random_critic(307, 2, 3);
  opu::RngState rng_data(308);
  std::vector<opu::SimplexPoint> p, q;
  for (int i = 0; i < 12; ++i) {
    p.push_back(opu::sample_dirichlet({{4.0, 1.0, 1.0}}, rng_data));
    q.push_back(opu::sample_dirichlet({{1.0, 1.0, 4.0}}, rng_data));
  }
  const Vec x = {0.3, 0.6};
  const int pairs = 10;
  opu::RngState rng_a(309);
  const double got = opu::gradient_penalty(c, x, p, q, pairs, rng_a);

  // replay the documented consumption order with an identical stream
  opu::RngState rng_b(309);
  double expect = 0.0;
  for (int i = 0; i < pairs; ++i) {
    const auto& pp = p[rng_b.next_u64() % p.size()];
    const auto& qq = q[rng_b.next_u64() % q.size()];
    const double u = rng_b.uniform();
    Vec hat(3);
    for (int k = 0; k < 3; ++k) hat[k] = u * pp[k] + (1.0 - u) * qq[k];
    opu::CriticTape tape;
    opu::critic_forward(c, x, hat, &tape);
    const Vec g = opu::critic_backward(c, tape, 1.0);
    double n2 = 0.0;
    for (double v : g) n2 += v * v;
    expect += (std::sqrt(n2) - 1.0) * (std::sqrt(n2) - 1.0);
  }
  EXPECT_NEAR(got, expect / pairs, 1e-12);
}

TEST(GradientPenalty, ParameterGradientMatchesFiniteDifference) {
  auto c = random_critic(310, 2, 3);
  opu::RngState rng_data(311);
  std::vector<opu::SimplexPoint> p, q;
  for (int i = 0; i < 8; ++i) {
    p.push_back(opu::sample_dirichlet({{5.0, 1.0, 1.0}}, rng_data));
    q.push_back(opu::sample_dirichlet({{1.0, 5.0, 1.0}}, rng_data));
  }
  const Vec x = {0.2, -0.3};
  auto grads = opu::zero_critic_grads(c);
  {
    opu::RngState rng(312);
    opu::gradient_penalty(c, x, p, q, 6, rng, &grads);
  }
  // spot-check a handful of nn2/nn3 weights against central differences with
  // the identical interpolate stream
  auto penalty_at = [&]() {
    opu::RngState rng(312);
    return opu::gradient_penalty(c, x, p, q, 6, rng);
  };
  const double h = 1e-6;
  double num = 0.0, den = 0.0;
  for (size_t j = 0; j < c.nn2.layers[0].W.data.size(); j += 7) {
    const double orig = c.nn2.layers[0].W.data[j];
    c.nn2.layers[0].W.data[j] = orig + h;
    const double up = penalty_at();
    c.nn2.layers[0].W.data[j] = orig - h;
    const double dn = penalty_at();
    c.nn2.layers[0].W.data[j] = orig;
    const double fd = (up - dn) / (2.0 * h);
    num += (fd - grads.g2.dW[0].data[j]) * (fd - grads.g2.dW[0].data[j]);
    den += fd * fd;
  }
  EXPECT_LT(std::sqrt(num / std::max(den, 1e-30)), 1e-2);
}

TEST(EmdCritic, ConvergesToWassersteinBetweenPointMasses) {
  // P at vertex 1, Q at vertex 2 (K = 2); W1 under the Euclidean ground
  // metric is sqrt(2).
  std::vector<opu::SimplexPoint> p(32, opu::clamp_to_open_simplex({1.0, 0.0}));
  std::vector<opu::SimplexPoint> q(32, opu::clamp_to_open_simplex({0.0, 1.0}));
  opu::RngState crng(401);
  auto c = opu::make_critic(2, 2, {16, 16}, {16}, crng);
  auto opt = opu::make_critic_opt(c, 1e-3);
  opu::RngState rng(402);
  double objective = 0.0;
  for (int t = 0; t < 1500; ++t)
    objective = opu::emd_critic_update(c, {0.5, 0.5}, p, q, 10.0, 16, opt, rng);
  EXPECT_NEAR(objective, std::sqrt(2.0), 0.2 * std::sqrt(2.0));
}

TEST(EmdStep, ZeroCriticGivesNoStudentSignal) {
  auto m = constant_student({0.4, 0.6}, 1.0);
  const auto before = m;
  opu::RngState crng(403);
  auto c = opu::make_critic(2, 2, {8, 8}, {8}, crng);
  for (auto* net : {&c.nn1, &c.nn2, &c.nn3})
    for (auto& l : net->layers) {
      std::fill(l.W.data.begin(), l.W.data.end(), 0.0);
      std::fill(l.b.begin(), l.b.end(), 0.0);
    }
  opu::ParticleCloud cloud;
  cloud.num_classes = 2;
  for (int i = 0; i < 16; ++i)
    cloud.points.push_back(opu::clamp_to_open_simplex({1.0, 0.0}));
  opu::DistillConfig cfg;
  cfg.loss = opu::LossKind::emd;
  cfg.lambda = 0.0;
  cfg.sample_count = 8;
  cfg.t_stu = 1;
  cfg.t_wit = 1;
  cfg.gp_pairs = 4;
  auto opt_m = opu::make_student_opt(m, 1e-3);
  auto opt_c = opu::make_critic_opt(c, 1e-3);
  opu::RngState rng(404);
  opu::emd_step(m, c, {0.3, 0.3}, cloud, cfg, opt_m, opt_c, rng);
  for (size_t li = 0; li < m.pm.layers.size(); ++li) {
    EXPECT_EQ(m.pm.layers[li].W.data, before.pm.layers[li].W.data);
    EXPECT_EQ(m.pm.layers[li].b, before.pm.layers[li].b);
  }
  for (size_t li = 0; li < m.cm.layers.size(); ++li)
    EXPECT_EQ(m.cm.layers[li].W.data, before.cm.layers[li].W.data);
}

TEST(EmdStep, DistillsBlobScenarioMeans) {
  // MCDP teacher on 3-class blobs; EMD-distilled student means should land
  // near the cloud means on most training inputs.
  const auto blobs = testutil::make_blobs(3, 20, 2.2, 0.9, 405);
  opu::RngState trng(406);
  const auto init = opu::make_mlp({2, 16, 3}, opu::Activation::softmax, trng);
  opu::McdpConfig tcfg;
  tcfg.dropout_rate = 0.5;
  tcfg.lr = 0.1;
  tcfg.steps = 2000;
  tcfg.batch = 16;
  opu::RngState teacher_rng(407);
  const auto trained = opu::mcdp_train(blobs.x, blobs.y, init, tcfg, teacher_rng);
  opu::RngState mask_rng(408);
  const auto set = opu::mcdp_sample(
      trained, opu::mcdp_keep_probs(trained, 0.5, false), 100, mask_rng);
  const auto store = opu::make_particle_store(set, blobs.x);

  opu::RngState srng(409);
  opu::StudentModel student;
  student.pm = opu::make_mlp({2, 16, 3}, opu::Activation::softmax, srng);
  student.cm = opu::make_mlp({2, 16, 1}, opu::Activation::identity, srng);
  opu::RngState crng(410);
  const auto critic = opu::make_critic(2, 3, {32, 32}, {32}, crng);

  opu::DistillConfig cfg;
  cfg.loss = opu::LossKind::emd;
  cfg.steps = 3000;
  cfg.sample_count = 32;
  cfg.lambda = 10.0;
  cfg.t_stu = 1;
  cfg.t_wit = 5;
  cfg.gp_pairs = 16;
  cfg.student_lr = 1e-3;
  cfg.critic_lr = 3e-3;
  opu::RngState rng(411);
  const auto res = opu::distill(student, store, cfg, rng, &critic);

  int within = 0;
  for (size_t i = 0; i < store.clouds.size(); ++i) {
    const auto pred = opu::student_predict(res.model, store.input_row(i));
    const auto target = opu::mc_predict(store.clouds[i]);
    double tv = 0.0;
    for (int k = 0; k < 3; ++k) tv += std::fabs(pred[k] - target[k]);
    if (0.5 * tv <= 0.1) ++within;
  }
  EXPECT_GE(static_cast<double>(within) / store.clouds.size(), 0.8);
}

// ---------------------------------------------------------------------------
// distill driver.

TEST(Distill, ZeroBudgetReturnsInitialModel) {
  const auto cloud_alpha = opu::DirichletParams{{2.0, 2.0, 2.0}};
  opu::RngState prng(501);
  opu::PosteriorSampleSet set;
  set.kind = opu::TeacherKind::blr;  // placeholder; store built manually below
  opu::ParticleStore store;
  store.num_classes = 3;
  store.samples_per_input = 20;
  store.inputs = opu::Matrix(2, 2);
  store.inputs(0, 0) = 0.5;
  store.inputs(1, 1) = -0.5;
  for (int i = 0; i < 2; ++i) {
    opu::ParticleCloud cloud;
    cloud.input_id = i;
    cloud.num_classes = 3;
    for (int s = 0; s < 20; ++s)
      cloud.points.push_back(opu::sample_dirichlet(cloud_alpha, prng));
    store.clouds.push_back(cloud);
  }
  const auto m = random_student(502, 2, 3);
  opu::DistillConfig cfg;
  cfg.loss = opu::LossKind::kl;
  cfg.steps = 0;
  opu::RngState rng(503);
  const auto res = opu::distill(m, store, cfg, rng);
  for (size_t li = 0; li < m.pm.layers.size(); ++li)
    EXPECT_EQ(res.model.pm.layers[li].W.data, m.pm.layers[li].W.data);
  EXPECT_TRUE(res.trace.empty());
}

TEST(Distill, DeterministicGivenSeed) {
  opu::RngState prng(504);
  opu::ParticleStore store;
  store.num_classes = 3;
  store.samples_per_input = 30;
  store.inputs = opu::Matrix(3, 2);
  for (int i = 0; i < 3; ++i) {
    store.inputs(i, 0) = 0.3 * i;
    store.inputs(i, 1) = 1.0 - 0.3 * i;
    opu::ParticleCloud cloud;
    cloud.input_id = i;
    cloud.num_classes = 3;
    for (int s = 0; s < 30; ++s)
      cloud.points.push_back(opu::sample_dirichlet({{2.0 + i, 3.0, 1.0}}, prng));
    store.clouds.push_back(cloud);
  }
  const auto m = random_student(505, 2, 3);
  opu::DistillConfig cfg;
  cfg.loss = opu::LossKind::mmd;
  cfg.steps = 40;
  cfg.sample_count = 16;
  opu::RngState r1(506), r2(506);
  const auto a = opu::distill(m, store, cfg, r1);
  const auto b = opu::distill(m, store, cfg, r2);
  for (size_t li = 0; li < a.model.pm.layers.size(); ++li)
    EXPECT_EQ(a.model.pm.layers[li].W.data, b.model.pm.layers[li].W.data);
  for (size_t li = 0; li < a.model.cm.layers.size(); ++li)
    EXPECT_EQ(a.model.cm.layers[li].W.data, b.model.cm.layers[li].W.data);
  ASSERT_EQ(a.trace.size(), b.trace.size());
  for (size_t i = 0; i < a.trace.size(); ++i) {
    EXPECT_EQ(a.trace[i].input_id, b.trace[i].input_id);
    EXPECT_EQ(a.trace[i].loss, b.trace[i].loss);
  }
}

TEST(Distill, InputBatchAveragesLossesDeterministically) {
  opu::RngState prng(511);
  opu::ParticleStore store;
  store.num_classes = 3;
  store.samples_per_input = 25;
  store.inputs = opu::Matrix(4, 2);
  for (int i = 0; i < 4; ++i) {
    store.inputs(i, 0) = 0.2 * i;
    store.inputs(i, 1) = 0.7 - 0.2 * i;
    opu::ParticleCloud cloud;
    cloud.input_id = i;
    cloud.num_classes = 3;
    for (int s = 0; s < 25; ++s)
      cloud.points.push_back(opu::sample_dirichlet({{2.0, 1.0 + i, 3.0}}, prng));
    store.clouds.push_back(cloud);
  }
  const auto m = random_student(512, 2, 3);
  opu::DistillConfig cfg;
  cfg.loss = opu::LossKind::mmd;
  cfg.steps = 25;
  cfg.sample_count = 16;
  cfg.input_batch = 3;
  opu::RngState r1(513), r2(513);
  const auto a = opu::distill(m, store, cfg, r1);
  const auto b = opu::distill(m, store, cfg, r2);
  for (size_t li = 0; li < a.model.pm.layers.size(); ++li)
    EXPECT_EQ(a.model.pm.layers[li].W.data, b.model.pm.layers[li].W.data);
  ASSERT_EQ(a.trace.size(), 25u);
  for (const auto& e : a.trace) EXPECT_TRUE(std::isfinite(e.loss));

  // kl variant runs too and moves the model
  cfg.loss = opu::LossKind::kl;
  opu::RngState r3(514);
  const auto c = opu::distill(m, store, cfg, r3);
  bool moved = false;
  for (size_t li = 0; li < c.model.pm.layers.size(); ++li)
    moved |= c.model.pm.layers[li].W.data != m.pm.layers[li].W.data;
  EXPECT_TRUE(moved);

  // emd runs one input per step
  cfg.loss = opu::LossKind::emd;
  EXPECT_THROW(opu::validate_distill_config(cfg), std::invalid_argument);
}

TEST(Distill, StepErrorsCarryInputContext) {
  opu::ParticleStore store;
  store.num_classes = 3;
  store.samples_per_input = 5;
  store.inputs = opu::Matrix(1, 2);
  opu::ParticleCloud cloud;
  cloud.input_id = 7;  // id recorded in the store
  cloud.num_classes = 3;
  // boundary particle defeats the KL loss
  for (int s = 0; s < 5; ++s)
    cloud.points.push_back(opu::SimplexPoint{{1.0, 0.0, 0.0}});
  store.clouds.push_back(cloud);
  const auto m = random_student(507, 2, 3);
  opu::DistillConfig cfg;
  cfg.loss = opu::LossKind::kl;
  cfg.steps = 1;
  opu::RngState rng(508);
  try {
    opu::distill(m, store, cfg, rng);
    FAIL() << "expected failure on boundary particles";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("input"), std::string::npos);
  }
}

}  // namespace
