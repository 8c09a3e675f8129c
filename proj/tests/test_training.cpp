#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "dumo/training.hpp"

using namespace dumo;

namespace {

ModelParams<double> scalar_params(double value) {
  // Smallest layout is still several parameters; tests address element 0.
  MlpConfig c;
  c.hidden_dim = 1;
  c.depth = 1;
  c.time_embed_dim = 2;
  ModelParams<double> p(c);
  std::fill(p.values.begin(), p.values.end(), value);
  return p;
}

TrainConfig small_train(Paradigm paradigm) {
  TrainConfig cfg;
  cfg.paradigm = paradigm;
  cfg.model.hidden_dim = 16;
  cfg.model.depth = 2;
  cfg.model.time_embed_dim = 8;
  cfg.batch_size = 32;
  cfg.steps = 20;
  cfg.eval_every = 10;
  cfg.eval.samples = 64;
  cfg.eval.repetitions = 1;
  cfg.eval_euler_steps = 4;
  cfg.lr = 1e-3;
  cfg.seed = 5;
  return cfg;
}

DatasetSplit small_split(bool conditional = false) {
  DatasetSpec spec;
  spec.n = 400;
  spec.heldout = 100;
  spec.conditional = conditional;
  return make_split(spec);
}

std::string jsonl(const std::vector<MetricsRecord>& log) {
  std::ostringstream out;
  write_jsonl(out, log);
  return out.str();
}

}  // namespace

TEST(AdamW, SingleStepMatchesHandComputation) {
  auto p = scalar_params(1.0);
  auto g = ModelParams<double>::zeros_like(p);
  g.values[0] = 0.5;
  auto st = OptimizerState<double>::for_params(p);
  const AdamSettings s{0.1, 0.9, 0.95, 0.0, 1e-8};
  adamw_step(p, g, st, s);
  // m = 0.05, v = 0.0125; bias-corrected m_hat = 0.5, v_hat = 0.25.
  EXPECT_NEAR(p.values[0], 1.0 - 0.1 * 0.5 / (0.5 + 1e-8), 1e-15);
  EXPECT_EQ(p.values[1], 1.0);
  EXPECT_EQ(st.step, 1);

  // Second step with g = -1: m = 0.045 - 0.1 = -0.055, v = 0.011875 + 0.05 = 0.061875.
  const double before = p.values[0];
  g.values[0] = -1.0;
  adamw_step(p, g, st, s);
  const double m_hat = -0.055 / (1 - 0.81);
  const double v_hat = 0.061875 / (1 - 0.9025);
  EXPECT_NEAR(p.values[0], before - 0.1 * m_hat / (std::sqrt(v_hat) + 1e-8), 1e-14);
}

TEST(AdamW, DecoupledWeightDecay) {
  auto p = scalar_params(2.0);
  const auto g = ModelParams<double>::zeros_like(p);
  auto st = OptimizerState<double>::for_params(p);
  adamw_step(p, g, st, {0.1, 0.9, 0.95, 0.5, 1e-8});
  for (double v : p.values) EXPECT_DOUBLE_EQ(v, 2.0 * (1.0 - 0.05));
}

TEST(AdamW, ZeroGradientIsNoOp) {
  Rng rng(1);
  MlpConfig c;
  c.hidden_dim = 8;
  c.depth = 2;
  c.time_embed_dim = 4;
  auto p = init_params(c, rng);
  const auto before = p.values;
  auto st = OptimizerState<double>::for_params(p);
  for (int i = 0; i < 3; ++i) adamw_step(p, ModelParams<double>::zeros_like(p), st, {});
  EXPECT_EQ(p.values, before);
}

TEST(AdamW, UpdateNormDecreasesWithEps) {
  Rng rng(2);
  auto base = scalar_params(0.0);
  auto g = ModelParams<double>::zeros_like(base);
  for (auto& v : g.values) v = 1e-3 * rng.normal();
  double prev = std::numeric_limits<double>::infinity();
  for (double eps : {1e-12, 1e-8, 1e-5, 1e-3, 1e-1}) {
    auto p = base;
    auto st = OptimizerState<double>::for_params(p);
    adamw_step(p, g, st, {1e-2, 0.9, 0.95, 0.0, eps});
    double norm = 0.0;
    for (double v : p.values) norm += v * v;
    norm = std::sqrt(norm);
    EXPECT_LT(norm, prev) << eps;
    prev = norm;
  }
}

TEST(AdamW, RejectsNonFiniteAndMismatchedGradients) {
  auto p = scalar_params(1.0);
  auto g = ModelParams<double>::zeros_like(p);
  g.values[2] = std::nan("");
  auto st = OptimizerState<double>::for_params(p);
  EXPECT_THROW(adamw_step(p, g, st, {}), DivergenceError);
  EXPECT_EQ(st.step, 0);
  for (double v : p.values) EXPECT_EQ(v, 1.0);
  g.values.pop_back();
  EXPECT_THROW(adamw_step(p, g, st, {}), StructuralError);
}

TEST(Ema, DecayLimitsAndClosedForm) {
  const auto params = scalar_params(3.0);
  auto s = scalar_params(-1.0);
  ema_update(s, params, 1.0);
  for (double v : s.values) EXPECT_EQ(v, -1.0);
  ema_update(s, params, 0.5);
  ema_update(s, params, 0.5);
  for (double v : s.values) EXPECT_DOUBLE_EQ(v, 0.25 * -1.0 + 0.75 * 3.0);
  ema_update(s, params, 0.0);
  EXPECT_EQ(s.values, params.values);
  auto wrong = scalar_params(0.0);
  wrong.values.push_back(0.0);
  EXPECT_THROW(ema_update(wrong, params, 0.5), StructuralError);
}

TEST(TrainConfig, ValidationNamesTheField) {
  auto expect_error = [](auto mutate, const std::string& needle) {
    TrainConfig c;
    mutate(c);
    try {
      c.validate(0);
      FAIL() << "no error for " << needle;
    } catch (const ConfigError& e) {
      EXPECT_NE(std::string(e.what()).find(needle), std::string::npos) << e.what();
    }
  };
  expect_error([](TrainConfig& c) { c.beta = 1.5; }, "beta");
  expect_error([](TrainConfig& c) { c.rho = -0.1; }, "rho");
  expect_error([](TrainConfig& c) { c.lr = 0.0; }, "lr");
  expect_error([](TrainConfig& c) { c.ema_decay = 1.0; }, "ema_decay");
  expect_error([](TrainConfig& c) { c.steps = 0; }, "steps");
  expect_error([](TrainConfig& c) { c.adam_beta2 = 1.0; }, "adam_beta2");
  expect_error([](TrainConfig& c) { c.zeta = 0.5; }, "zeta");
  TrainConfig ok;
  EXPECT_NO_THROW(ok.validate(0));
}

TEST(TrainConfig, ArchitecturePerParadigm) {
  TrainConfig c;
  c.paradigm = Paradigm::dumo;
  EXPECT_EQ(c.mlp_config(0).num_heads, 2);
  EXPECT_EQ(c.mlp_config(0).num_time_inputs, 1);
  c.paradigm = Paradigm::single_branch;
  EXPECT_EQ(c.mlp_config(0).num_heads, 1);
  EXPECT_EQ(c.mlp_config(0).num_time_inputs, 2);
  c.paradigm = Paradigm::flow_matching;
  EXPECT_EQ(c.mlp_config(2).num_heads, 1);
  EXPECT_EQ(c.mlp_config(2).num_classes, 2);
}

// Both objectives stepped on one (t, r) network with the shared batch streams;
// the single-branch mixing draws live on their own stream.
TEST(Degeneration, SingleBranchRhoOneTracksFlowMatchingBitwise) {
  const auto split = small_split();
  auto sb = small_train(Paradigm::single_branch);
  sb.rho = 1.0;
  auto fm = sb;
  fm.paradigm = Paradigm::flow_matching;
  Rng init(9);
  auto p_sb = init_params(sb.mlp_config(0), init);
  auto p_fm = p_sb;
  auto o_sb = OptimizerState<double>::for_params(p_sb), o_fm = o_sb;
  TrainStreams s_sb(sb.seed), s_fm(fm.seed);
  const AdamSettings adam{sb.lr, sb.adam_beta1, sb.adam_beta2, 0.0, sb.adam_eps};
  for (int step = 0; step < 25; ++step) {
    const auto b_sb = draw_batch<double>(split.train, sb, s_sb);
    const auto b_fm = draw_batch<double>(split.train, fm, s_fm);
    auto [l_sb, g_sb] = paradigm_loss_and_grad(sb, p_sb, p_sb, b_sb);
    auto [l_fm, g_fm] = paradigm_loss_and_grad(fm, p_fm, p_fm, b_fm);
    ASSERT_EQ(l_sb.total, l_fm.total) << "step " << step;
    ASSERT_EQ(g_sb.values, g_fm.values) << "step " << step;
    adamw_step(p_sb, g_sb, o_sb, adam);
    adamw_step(p_fm, g_fm, o_fm, adam);
    ASSERT_EQ(p_sb.values, p_fm.values);
  }
}

TEST(Degeneration, DuMoBetaOneLeavesUHeadUntouchedAndMatchesFlowMatching) {
  const auto split = small_split();
  auto du = small_train(Paradigm::dumo);
  du.beta = 1.0;
  auto fm = du;
  fm.paradigm = Paradigm::flow_matching;
  Rng init_du(10), init_fm(10);
  auto p_du = init_params(du.mlp_config(0), init_du);
  auto p_fm = init_params(fm.mlp_config(0), init_fm);
  const auto u_init = std::vector<double>(p_du.slice("head_u.weight").begin(), p_du.slice("head_u.weight").end());
  auto o_du = OptimizerState<double>::for_params(p_du);
  auto o_fm = OptimizerState<double>::for_params(p_fm);
  TrainStreams s_du(du.seed), s_fm(fm.seed);
  const AdamSettings adam{du.lr, du.adam_beta1, du.adam_beta2, 0.0, du.adam_eps};
  for (int step = 0; step < 25; ++step) {
    const auto b_du = draw_batch<double>(split.train, du, s_du);
    const auto b_fm = draw_batch<double>(split.train, fm, s_fm);
    auto [l_du, g_du] = paradigm_loss_and_grad(du, p_du, p_du, b_du);
    auto [l_fm, g_fm] = paradigm_loss_and_grad(fm, p_fm, p_fm, b_fm);
    for (const char* name : {"head_u.weight", "head_u.bias"}) {
      for (double g : g_du.slice(name)) ASSERT_EQ(g, 0.0) << name << " step " << step;
    }
    ASSERT_NEAR(l_du.l_v, l_fm.l_v, 1e-12 * std::max(1.0, l_fm.l_v)) << "step " << step;
    for (std::size_t i = 0; i < g_fm.size(); ++i) {
      ASSERT_NEAR(g_du.values[i], g_fm.values[i], 1e-12) << "step " << step << " index " << i;
    }
    adamw_step(p_du, g_du, o_du, adam);
    adamw_step(p_fm, g_fm, o_fm, adam);
  }
  const auto u_now = p_du.slice("head_u.weight");
  EXPECT_TRUE(std::equal(u_now.begin(), u_now.end(), u_init.begin()));
}

TEST(Train, LogContract) {
  const auto split = small_split();
  for (auto paradigm : {Paradigm::dumo, Paradigm::single_branch, Paradigm::flow_matching}) {
    auto cfg = small_train(paradigm);
    const auto res = train<double>(cfg, split);
    ASSERT_FALSE(res.diverged);
    ASSERT_EQ(res.log.size(), std::size_t(cfg.steps));
    for (std::size_t i = 0; i < res.log.size(); ++i) {
      const auto& r = res.log[i];
      EXPECT_EQ(r.step, long(i) + 1);
      EXPECT_TRUE(std::isfinite(r.total));
      EXPECT_EQ(r.mmd.has_value(), r.step % cfg.eval_every == 0);
      EXPECT_FALSE(r.mmd_live.has_value());
      EXPECT_EQ(r.passes.grad_tracking, 1);
      EXPECT_EQ(r.passes.grad_free, paradigm == Paradigm::dumo ? 2 : (paradigm == Paradigm::single_branch ? 2 : 0));
    }
  }
}

TEST(Train, GuidedPassCounts) {
  const auto split = small_split(true);
  for (auto paradigm : {Paradigm::dumo, Paradigm::single_branch}) {
    auto cfg = small_train(paradigm);
    cfg.zeta = 0.3;
    cfg.steps = 3;
    const auto res = train<double>(cfg, split);
    for (const auto& r : res.log) {
      EXPECT_EQ(r.passes.grad_tracking, 1);
      EXPECT_EQ(r.passes.grad_free, paradigm == Paradigm::dumo ? 3 : 4);
    }
  }
}

TEST(Train, FinalStepAlwaysEvaluatedAndLiveOptional) {
  const auto split = small_split();
  auto cfg = small_train(Paradigm::dumo);
  cfg.steps = 7;
  cfg.eval_every = 5;
  cfg.eval_live = true;
  int hook_calls = 0;
  TrainHooks<double> hooks;
  hooks.on_checkpoint = [&](const TrainState<double>& s) {
    ++hook_calls;
    EXPECT_TRUE(s.step == 5 || s.step == 7);
  };
  const auto res = train<double>(cfg, split, hooks);
  EXPECT_EQ(hook_calls, 2);
  EXPECT_TRUE(res.log[4].mmd && res.log[4].mmd_live);
  EXPECT_TRUE(res.log[6].mmd && res.log[6].mmd_live);
  EXPECT_FALSE(res.log[5].mmd);
}

TEST(Train, DeterministicLogAndWeights) {
  const auto split = small_split();
  for (auto paradigm : {Paradigm::dumo, Paradigm::single_branch}) {
    const auto cfg = small_train(paradigm);
    const auto a = train<double>(cfg, split);
    const auto b = train<double>(cfg, split);
    EXPECT_EQ(jsonl(a.log), jsonl(b.log));
    EXPECT_EQ(a.params.values, b.params.values);
    EXPECT_EQ(a.ema.values, b.ema.values);
    auto other = cfg;
    other.seed += 1;
    EXPECT_NE(jsonl(train<double>(other, split).log), jsonl(a.log));
  }
}

TEST(Train, EmaShadowTracksLiveWeights) {
  const auto split = small_split();
  auto cfg = small_train(Paradigm::flow_matching);
  cfg.steps = 5;
  cfg.ema_decay = 0.0;
  const auto res = train<double>(cfg, split);
  EXPECT_EQ(res.ema.values, res.params.values);
  cfg.ema_decay = 0.9;
  const auto slow = train<double>(cfg, split);
  // The shadow never feeds gradients: live weights are identical either way.
  EXPECT_EQ(slow.params.values, res.params.values);
  EXPECT_NE(slow.ema.values, slow.params.values);
}

TEST(Train, DivergenceStopsUpdatesAndFlagsFirstStep) {
  auto split = small_split();
  for (Eigen::Index j = 0; j < split.train.size(); ++j) split.train.points(0, j) = std::nan("");
  auto cfg = small_train(Paradigm::dumo);
  bool hooked = false;
  TrainHooks<double> hooks;
  hooks.on_checkpoint = [&](const TrainState<double>& s) {
    hooked = true;
    EXPECT_EQ(s.step, 1);
  };
  const auto res = train<double>(cfg, split, hooks);
  EXPECT_TRUE(res.diverged);
  EXPECT_EQ(res.divergence_step, 1);
  ASSERT_EQ(res.log.size(), 1u);
  EXPECT_TRUE(std::isnan(res.log[0].total));
  EXPECT_TRUE(hooked);
  Rng init = Rng::stream(cfg.seed, "init");
  EXPECT_EQ(res.params.values, init_params(cfg.mlp_config(0), init).values);
  EXPECT_TRUE(divergence_flag(res.log).diverged);
}

TEST(Train, SinglePrecisionRuns) {
  const auto split = small_split();
  const auto res = train<float>(small_train(Paradigm::dumo), split);
  EXPECT_FALSE(res.diverged);
  EXPECT_TRUE(std::isfinite(*res.log.back().mmd));
}

TEST(Train, ConditionalModelRequiresMatchingData) {
  auto cfg = small_train(Paradigm::dumo);
  cfg.zeta = 0.2;
  EXPECT_THROW(train<double>(cfg, small_split(false)), ConfigError);
  DatasetSplit empty;
  EXPECT_THROW(train<double>(small_train(Paradigm::dumo), empty), ConfigError);
}

TEST(Metrics, JsonlRoundTripWithNonFinite) {
  MetricsRecord a;
  a.step = 3;
  a.l_v = 0.25;
  a.l_u = std::nan("");
  a.total = 1.0 / 3.0;
  a.grad_norm = 2.0;
  a.passes = {1, 3};
  a.mmd = 0.01;
  MetricsRecord b = a;
  b.step = 4;
  b.mmd.reset();
  b.mmd_live = 0.5;
  std::stringstream io(jsonl({a, b}));
  EXPECT_NE(io.str().find("\"l_u\":null"), std::string::npos);
  const auto back = read_jsonl(io);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].total, a.total);
  EXPECT_TRUE(std::isnan(back[0].l_u));
  EXPECT_EQ(back[0].passes, a.passes);
  EXPECT_EQ(back[0].mmd, a.mmd);
  EXPECT_FALSE(back[1].mmd);
  EXPECT_EQ(back[1].mmd_live, 0.5);
}
