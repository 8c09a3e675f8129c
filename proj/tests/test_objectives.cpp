#include <gtest/gtest.h>

#include <cmath>

#include "dumo/grad_check.hpp"
#include "dumo/objectives.hpp"

using namespace dumo;

namespace {

MlpConfig net(int heads, int time_inputs, int classes = 0) {
  MlpConfig c;
  c.hidden_dim = 16;
  c.depth = 2;
  c.time_embed_dim = 8;
  c.num_heads = heads;
  c.num_time_inputs = time_inputs;
  c.num_classes = classes;
  return c;
}

Points randn(Rng& rng, int d, int n) {
  Points x(d, n);
  for (int j = 0; j < n; ++j)
    for (int i = 0; i < d; ++i) x(i, j) = rng.normal();
  return x;
}

Batch<double> batch(Rng& rng, int n, int classes = 0, bool mix = false) {
  RowVector<double> t(n), m;
  for (int j = 0; j < n; ++j) t[j] = 0.02 + 0.96 * rng.uniform();
  std::optional<std::vector<int>> labels;
  if (classes > 0) {
    labels = std::vector<int>(n);
    for (auto& l : *labels) l = int(rng.index(std::size_t(classes) + 1));
  }
  if (mix) {
    m.resize(n);
    for (int j = 0; j < n; ++j) m[j] = rng.uniform();
  }
  return make_batch<double>(randn(rng, 2, n), randn(rng, 2, n), t, labels, m);
}

Point vec(double a, double b) {
  Point p(2);
  p << a, b;
  return p;
}

// One hidden layer driven deep into SiLU's linear regime (bias 100), so the
// u-head computes exactly u(x, t) = x.
ModelParams<double> identity_u_head() {
  MlpConfig c;
  c.hidden_dim = 2;
  c.depth = 1;
  c.time_embed_dim = 2;
  ModelParams<double> p(c);
  auto w = p.view("hidden0.weight");
  w(0, 0) = 1.0;
  w(1, 1) = 1.0;
  p.view("hidden0.bias").setConstant(100.0);
  p.view("head_u.weight").setIdentity();
  p.view("head_u.bias").setConstant(-100.0);
  return p;
}

}  // namespace

TEST(EnhanceVelocity, Examples) {
  const Point v = vec(-1, 1);
  EXPECT_EQ(enhance_velocity(v, vec(3, 4), vec(5, 6), 0.0), v);
  EXPECT_EQ(enhance_velocity(v, vec(0.3, 0.2), vec(0.3, 0.2), 0.7), v);
  const Point e = enhance_velocity(v, vec(-1.2, 1.2), vec(-0.8, 0.8), 0.5);
  EXPECT_NEAR(e[0], -1.2, 1e-15);
  EXPECT_NEAR(e[1], 1.2, 1e-15);
}

TEST(EnhanceVelocity, Errors) {
  EXPECT_THROW(enhance_velocity(vec(1, 1), vec(0, 0), vec(0, 0), 0.5, false), ConfigError);
  EXPECT_NO_THROW(enhance_velocity(vec(1, 1), vec(0, 0), vec(0, 0), 0.0, false));
  Point three(3);
  three.setZero();
  EXPECT_THROW(enhance_velocity(vec(1, 1), three, three, 0.1), StructuralError);
}

TEST(GuidanceConfig, ZetaRule) {
  EXPECT_THROW((GuidanceConfig{0.2, 0.1}.validate(0)), ConfigError);
  try {
    GuidanceConfig{0.2, 0.1}.validate(0);
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("zeta rule"), std::string::npos);
  }
  EXPECT_NO_THROW((GuidanceConfig{0.2, 0.1}.validate(2)));
  EXPECT_THROW((GuidanceConfig{1.0, 0.1}.validate(2)), ConfigError);
  EXPECT_THROW((GuidanceConfig{0.0, 1.0}.validate(2)), ConfigError);
}

TEST(FlowmapTarget, Examples) {
  Points v(2, 1), d(2, 1);
  v << -1, 1;
  d << 0.2, -0.2;
  RowVector<double> t(1);
  t << 0.5;
  const Points u = flowmap_target<double>(v, t, d);
  EXPECT_NEAR(u(0, 0), -1.1, 1e-15);
  EXPECT_NEAR(u(1, 0), 1.1, 1e-15);
  EXPECT_EQ(flowmap_target<double>(v, t, Points(Points::Zero(2, 1))), v);
  t << kTimeGuard;
  const Points small = flowmap_target<double>(v, t, d);
  EXPECT_LE((small - v).norm(), kTimeGuard * d.norm() + 1e-15);
  EXPECT_THROW(flowmap_target<double>(v, RowVector<double>(2), d), StructuralError);
}

TEST(FdDerivative, ConstantHeadGivesZero) {
  MlpConfig c = net(2, 1);
  Rng rng(1);
  ModelParams<double> p = init_params(c, rng);
  for (auto& w : p.slice("head_u.weight")) w = 0.0;
  p.view("head_u.bias") << 0.3, -0.7;
  const auto b = batch(rng, 6);
  const Points d = flowmap_time_derivative_fd(p, b.x_t, b.t, randn(rng, 2, 6), std::nullopt, FdConfig{});
  EXPECT_LT(d.cwiseAbs().maxCoeff(), 1e-12);
}

TEST(FdDerivative, LinearAlongPathGivesTangent) {
  const auto p = identity_u_head();
  Rng rng(2);
  const auto b = batch(rng, 5);
  const Points ones = Points::Ones(2, 5);
  PassCounts passes;
  const Points d = flowmap_time_derivative_fd(p, b.x_t, b.t, ones, std::nullopt, FdConfig{}, Head::u, {},
                                              &passes);
  EXPECT_LT((d - ones).cwiseAbs().maxCoeff(), 1e-8);
  EXPECT_EQ(passes.grad_free, 2);
}

TEST(FdDerivative, OneSidedAtBoundariesKeepsPassCount) {
  const auto p = identity_u_head();
  Points x(2, 2), tangent(2, 2);
  x << 0.1, 0.4, -0.3, 0.2;
  tangent << 1.0, -2.0, 0.5, 3.0;
  RowVector<double> t(2);
  t << 0.001, 0.999;
  PassCounts passes;
  const Points d = flowmap_time_derivative_fd(p, x, t, tangent, std::nullopt, FdConfig{0.005}, Head::u, {},
                                              &passes);
  EXPECT_LT((d - tangent).cwiseAbs().maxCoeff(), 1e-8);
  EXPECT_EQ(passes.grad_free, 2);
  t << -0.01, 0.5;
  EXPECT_THROW(flowmap_time_derivative_fd(p, x, t, tangent, std::nullopt, FdConfig{}), DomainError);
  EXPECT_THROW(FdConfig{0.0}.validate(), ConfigError);
  EXPECT_THROW(FdConfig{0.3}.validate(), ConfigError);
}

// Total derivative assembled from a dense finite-difference Jacobian in x and
// a separate partial in t.
TEST(FdDerivative, MatchesDenseJacobianOracle) {
  MlpConfig c = net(2, 1);
  Rng rng(3);
  const auto p = init_params(c, rng);
  const auto b = batch(rng, 6);
  const Points tangent = randn(rng, 2, 6);
  const FdConfig fd{1e-4};
  const Points d = flowmap_time_derivative_fd(p, b.x_t, b.t, tangent, std::nullopt, fd);
  const double h = 1e-6;
  auto u_at = [&](const Point& x, double t) {
    Points xm = x;
    RowVector<double> tm(1);
    tm << t;
    return Point(forward(p, xm, Conditioning<double>{tm, std::nullopt, std::nullopt}).u->col(0));
  };
  for (int j = 0; j < 6; ++j) {
    const Point x = b.x_t.col(j);
    const double t = b.t[j];
    Eigen::Matrix2d jac;
    for (int k = 0; k < 2; ++k) {
      Point e = Point::Zero(2);
      e[k] = h;
      jac.col(k) = (u_at(x + e, t) - u_at(x - e, t)) / (2 * h);
    }
    const Point dt = (u_at(x, t + h) - u_at(x, t - h)) / (2 * h);
    const Point oracle = jac * tangent.col(j) + dt;
    EXPECT_LT((Point(d.col(j)) - oracle).norm() / std::max(oracle.norm(), 1e-12), 1e-4) << "item " << j;
  }
}

TEST(DumoLoss, PassCounters) {
  Rng rng(4);
  const auto p = init_params(net(2, 1, 3), rng);
  const auto b = batch(rng, 8, 3);
  const auto guided = dumo_loss_and_grad(p, p, b, 0.7, GuidanceConfig{0.5, 0.1}, {}).first;
  EXPECT_EQ(guided.passes.grad_tracking, 1);
  EXPECT_EQ(guided.passes.grad_free, 3);
  const auto plain = dumo_loss_and_grad(p, p, b, 0.7, GuidanceConfig{0.0, 0.1}, {}).first;
  EXPECT_EQ(plain.passes.grad_tracking, 1);
  EXPECT_EQ(plain.passes.grad_free, 2);
}

TEST(DumoLoss, TotalIsWeightedSum) {
  Rng rng(5);
  const auto p = init_params(net(2, 1), rng);
  for (double beta : {0.0, 0.3, 0.7, 1.0}) {
    const auto b = batch(rng, 16);
    const auto lb = dumo_loss_and_grad(p, p, b, beta, {}, {}).first;
    EXPECT_NEAR(lb.total, beta * lb.l_v + (1 - beta) * lb.l_u, 1e-12);
  }
}

TEST(DumoLoss, BetaOneZeroesUHeadGradient) {
  Rng rng(6);
  const auto p = init_params(net(2, 1), rng);
  const auto grad = dumo_loss_and_grad(p, p, batch(rng, 16), 1.0, {}, {}).second;
  for (double g : grad.slice("head_u.weight")) ASSERT_EQ(g, 0.0);
  for (double g : grad.slice("head_u.bias")) ASSERT_EQ(g, 0.0);
}

TEST(DumoLoss, FixedPointOfOracleFlowMap) {
  // Single pair; the u-head outputs the constant z - x, which is the exact
  // flow map on this straight path, and its time derivative vanishes.
  Rng rng(7);
  auto p = init_params(net(2, 1), rng);
  for (auto& w : p.slice("head_u.weight")) w = 0.0;
  Points x(2, 1), z(2, 1);
  x << 0.4, -1.2;
  z << -0.3, 0.9;
  p.view("head_u.bias") = z - x;
  RowVector<double> t(1);
  t << 0.6;
  const auto b = make_batch<double>(x, z, t);
  const auto lb = dumo_loss_and_grad(p, p, b, 0.0, {}, {}).first;
  EXPECT_LT(lb.l_u, 1e-28);
  EXPECT_EQ(lb.total, lb.l_u);
}

TEST(DumoLoss, EnhancementUsesDetachedMainForward) {
  Rng rng(8);
  const auto p = init_params(net(2, 1, 2), rng);
  auto snap = p;
  for (auto& v : snap.values) v += 0.05 * rng.normal();
  const auto b = batch(rng, 6, 2);
  const double zeta = 0.4;
  const auto s = dumo_prepare(p, snap, b, GuidanceConfig{zeta, 0.1}, {});
  const auto uncond = forward(snap, b.x_t, Conditioning<double>{b.t, std::nullopt, std::vector<int>(6, 2)});
  const Points expected = velocity_target_batch<double>(b.x, b.z, b.t) + zeta * (s.out.v - uncond.v);
  EXPECT_LT((s.v_target - expected).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(DumoLoss, GradientIgnoresSnapshotPath) {
  // The returned gradient is that of the regression with the snapshot's
  // targets frozen: moving the snapshot changes the targets, and the
  // gradient still matches finite differences taken over params only.
  Rng rng(9);
  const auto p = init_params(net(2, 1), rng);
  auto snap = p;
  for (auto& v : snap.values) v += 0.1 * rng.normal();
  const auto b = batch(rng, 8);
  const auto r = grad_check(p, snap, b, 0.5, {}, {});
  EXPECT_LT(r.max_rel_error, 1e-5);
  const auto g_same = dumo_loss_and_grad(p, p, b, 0.5, {}, {});
  const auto g_moved = dumo_loss_and_grad(p, snap, b, 0.5, {}, {});
  EXPECT_EQ(g_moved.second.size(), p.size());
  EXPECT_EQ(g_same.first.l_v, g_moved.first.l_v);  // v target has no snapshot term at zeta = 0
  EXPECT_NE(g_same.first.l_u, g_moved.first.l_u);
}

TEST(DumoLoss, Errors) {
  Rng rng(10);
  const auto one_head = init_params(net(1, 1), rng);
  const auto b = batch(rng, 4);
  EXPECT_THROW(dumo_loss_and_grad(one_head, one_head, b, 0.5, {}, {}), ConfigError);
  const auto p = init_params(net(2, 1), rng);
  EXPECT_THROW(dumo_loss_and_grad(p, p, b, 1.5, {}, {}), ConfigError);
  EXPECT_THROW(dumo_loss_and_grad(p, p, b, 0.5, GuidanceConfig{0.3, 0.1}, {}), ConfigError);
  auto bad = p;
  bad.values[0] = std::nan("");
  EXPECT_THROW(dumo_loss_and_grad(bad, bad, b, 0.5, {}, {}), DivergenceError);
}

TEST(SingleBranch, PassCounters) {
  Rng rng(11);
  const auto p = init_params(net(1, 2, 3), rng);
  const auto b = batch(rng, 8, 3, true);
  const auto guided = single_branch_loss_and_grad(p, p, b, {0.5}, GuidanceConfig{0.5, 0.1}, {}).first;
  EXPECT_EQ(guided.passes.grad_tracking, 1);
  EXPECT_EQ(guided.passes.grad_free, 4);
  const auto plain = single_branch_loss_and_grad(p, p, b, {0.5}, {}, {}).first;
  EXPECT_EQ(plain.passes.grad_tracking, 1);
  EXPECT_EQ(plain.passes.grad_free, 2);
}

TEST(SingleBranch, RhoOneIsFlowMatchingBitwise) {
  Rng rng(12);
  const auto p = init_params(net(1, 2), rng);
  const auto b = batch(rng, 32, 0, true);
  const auto sb = single_branch_loss_and_grad(p, p, b, {1.0}, {}, {});
  const auto fm = flow_matching_loss_and_grad(p, p, b, {});
  EXPECT_EQ(sb.first.l_v, fm.first.l_v);
  EXPECT_EQ(sb.first.l_u, 0.0);
  EXPECT_EQ(sb.second.values, fm.second.values);
}

TEST(SingleBranch, RhoZeroRoutesEveryItemToConsistency) {
  Rng rng(13);
  const auto p = init_params(net(1, 2), rng);
  const auto b = batch(rng, 32, 0, true);
  const auto s = single_branch_prepare(p, p, b, {0.0}, {}, {});
  for (char v : s.velocity_item) EXPECT_EQ(v, 0);
  const auto lb = single_branch_loss_and_grad(p, p, b, {0.0}, {}, {}).first;
  EXPECT_EQ(lb.l_v, 0.0);
  EXPECT_GT(lb.l_u, 0.0);
}

TEST(SingleBranch, RoutingFollowsMixDraws) {
  Rng rng(14);
  const auto p = init_params(net(1, 2), rng);
  const auto b = batch(rng, 64, 0, true);
  const auto s = single_branch_prepare(p, p, b, {0.4}, {}, {});
  for (int j = 0; j < 64; ++j) EXPECT_EQ(s.velocity_item[j] == 1, b.mix[j] < 0.4);
}

TEST(SingleBranch, GradientMatchesFrozenTargetDifferences) {
  Rng rng(15);
  const auto p = init_params(net(1, 2), rng);
  const auto b = batch(rng, 8, 0, true);
  const auto s = single_branch_prepare(p, p, b, {0.5}, {}, {});
  const auto grad = single_output_regress(p, s).second;
  RowVector<double> r(8);
  for (int j = 0; j < 8; ++j) r[j] = s.velocity_item[j] ? b.t[j] : 0.0;
  auto loss = [&](const ModelParams<double>& q) {
    const auto out = forward(q, b.x_t, Conditioning<double>{b.t, r, std::nullopt});
    return (out.v - s.v_target).squaredNorm() / 8.0;
  };
  // Consistency targets reach O(10) here; a 1e-5 step keeps difference
  // quotient roundoff below the 1e-5 tolerance.
  const double h = 1e-5;
  auto probe = p;
  double worst = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    probe.values[i] = p.values[i] + h;
    const double hi = loss(probe);
    probe.values[i] = p.values[i] - h;
    const double lo = loss(probe);
    probe.values[i] = p.values[i];
    worst = std::max(worst, gradient_rel_error(grad.values[i], (hi - lo) / (2 * h)));
  }
  EXPECT_LT(worst, 1e-5);
}

TEST(SingleBranch, Errors) {
  Rng rng(16);
  const auto dual = init_params(net(2, 1), rng);
  const auto b = batch(rng, 4, 0, true);
  EXPECT_THROW(single_branch_loss_and_grad(dual, dual, b, {0.5}, {}, {}), ConfigError);
  const auto p = init_params(net(1, 2), rng);
  EXPECT_THROW(single_branch_loss_and_grad(p, p, b, {1.5}, {}, {}), ConfigError);
  const auto no_mix = batch(rng, 4);
  EXPECT_THROW(single_branch_loss_and_grad(p, p, no_mix, {0.5}, {}, {}), StructuralError);
}

TEST(Surrogate, SmallLambdaRecoversFlowMatching) {
  for (int draw = 0; draw < 5; ++draw) {
    Rng rng(100 + draw);
    const auto p = init_params(net(1, 1), rng);
    const auto b = batch(rng, 64);
    const auto s = surrogate_loss(p, p, b, 1e-4);
    EXPECT_LT(std::abs(s.total - s.fm_term) / std::max(s.fm_term, 1e-12), 1e-2);
    EXPECT_GE(s.align_term, 0.0);
  }
}

TEST(Surrogate, ConstantNetworkHasNoAlignment) {
  Rng rng(17);
  auto p = init_params(net(1, 1), rng);
  for (auto& w : p.slice("head_v.weight")) w = 0.0;
  p.view("head_v.bias") << 0.25, -0.5;
  for (double lambda : {0.1, 0.5, 0.9}) {
    const auto s = surrogate_loss(p, p, batch(rng, 32), lambda);
    EXPECT_LE(s.align_term, 1e-12);
    EXPECT_EQ(s.total, s.fm_term + lambda / (1 - lambda) * s.align_term);
  }
}

TEST(Surrogate, MonotoneInLambdaAgainstFixedSnapshotOutput) {
  // With a snapshot whose output does not depend on (x, t), the alignment
  // term is independent of lambda, so the total grows with lambda / (1 - lambda).
  Rng rng(18);
  const auto p = init_params(net(1, 1), rng);
  auto snap = p;
  for (auto& w : snap.slice("head_v.weight")) w = 0.0;
  snap.view("head_v.bias") << 1.0, 1.0;
  const auto b = batch(rng, 32);
  double prev = -1.0;
  for (double lambda : {0.05, 0.2, 0.4, 0.6, 0.8, 0.95}) {
    const auto s = surrogate_loss(p, snap, b, lambda);
    EXPECT_GT(s.align_term, 0.0);
    EXPECT_GE(s.total, prev);
    prev = s.total;
  }
}

TEST(Surrogate, LambdaDomain) {
  Rng rng(19);
  const auto p = init_params(net(1, 1), rng);
  const auto b = batch(rng, 4);
  EXPECT_THROW(surrogate_loss(p, p, b, 0.0), DomainError);
  EXPECT_THROW(surrogate_loss(p, p, b, 1.0), DomainError);
}
