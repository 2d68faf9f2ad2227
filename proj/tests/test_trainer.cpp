#include <gtest/gtest.h>

#include "rsds/trainer.hpp"
#include "test_support.hpp"

using namespace rsds;
using namespace rsds::testing;

namespace {

Dataset sample_from(const Model& model, std::size_t N, std::size_t T, std::uint64_t seed) {
  Dataset d;
  d.n = model.flow.dim();
  d.m = model.prior.m;
  d.K = model.prior.K;
  const std::size_t noise = d.n - d.m;
  for (std::size_t i = 0; i < N; ++i) {
    Rng rng(stream_seed(seed, i));
    const LatentPath path = sample_path(model.prior, T, rng);
    RowMatrix x(static_cast<Eigen::Index>(T), static_cast<Eigen::Index>(d.n));
    for (Eigen::Index t = 0; t < x.rows(); ++t) {
      std::vector<double> eps(noise);
      for (double& e : eps) e = rng.normal(0.0, model.sigma_eps);
      const auto xt = flow_forward(model.flow, row_span(path.z, t), eps);
      for (Eigen::Index j = 0; j < x.cols(); ++j) x(t, j) = xt[static_cast<std::size_t>(j)];
    }
    d.x.push_back(x);
    d.z.push_back(path.z);
    d.s.push_back(path.s);
  }
  return d;
}

Dataset linear_gaussian(std::size_t N, std::size_t T, std::uint64_t seed) {
  Dataset d;
  d.n = 2;
  for (std::size_t i = 0; i < N; ++i) {
    Rng rng(stream_seed(seed, i));
    RowMatrix x(static_cast<Eigen::Index>(T), 2);
    x(0, 0) = rng.normal();
    x(0, 1) = rng.normal();
    for (Eigen::Index t = 1; t < x.rows(); ++t) {
      x(t, 0) = 0.9 * x(t - 1, 0) + 0.3 * rng.normal();
      x(t, 1) = 0.5 * x(t - 1, 1) + 0.2 * x(t - 1, 0) + 0.3 * rng.normal();
    }
    d.x.push_back(x);
  }
  return d;
}

Model small_model(std::size_t n, std::size_t m, std::size_t K, bool recurrent, std::uint64_t seed) {
  Rng rng(seed);
  FlowArchitecture arch;
  arch.depth = 4;
  arch.coupling_hidden = {8};
  arch.random_mixing = false;
  Model model{make_flow(n, m, arch, rng), make_rmsm(K, m, {8}, Activation::Cosine, recurrent, {8}, Activation::Gelu), 0.1};
  for (auto& net : model.prior.transition_nets) net.init_uniform(rng);
  if (auto* r = std::get_if<RecurrentSwitch>(&model.prior.switching)) r->net.init_uniform(rng);
  return model;
}

}  // namespace

TEST(Objective, JointGradientMatchesFiniteDifferences) {
  Rng rng(13);
  for (int inst = 0; inst < 3; ++inst) {
    Model model = random_model(4, 2, 2, rng, inst % 2 == 0);
    model.prior.residual = inst == 1;
    const RowMatrix x = random_path(5, 4, rng);
    const RowMatrix targets = random_path(5, 2, rng);
    const AlignTerm align{&targets, 0.3};
    SequenceWorkspace ws;
    Model grads = zeros_like(model);
    sequence_objective(model, x, ws, &grads, 1.0, align);
    auto f = [&] {
      SequenceWorkspace w;
      const ObjectiveTerms t = sequence_objective(model, x, w, nullptr, 1.0, align);
      return t.loglik() - align.weight * t.align;
    };
    auto refs = param_refs(model);
    auto grefs = param_refs(grads);
    ASSERT_EQ(refs.size(), grefs.size());
    std::size_t checked = 0;
    for (std::size_t a = 0; a < refs.size(); ++a)
      for (std::size_t i = 0; i < refs[a].values.size(); ++i, ++checked) {
        const double fd = central_difference(refs[a].values[i], f);
        EXPECT_TRUE(close(grefs[a].values[i], fd, 1e-4, 1e-7))
            << refs[a].name << "[" << i << "] analytic " << grefs[a].values[i] << " fd " << fd;
      }
    EXPECT_EQ(checked, param_count(model));
  }
}

TEST(Objective, AlignLossGradient) {
  Rng rng(2);
  RowMatrix z = random_path(4, 3, rng);
  const RowMatrix t = random_path(4, 3, rng);
  RowMatrix g;
  pca_align_loss(z, t, &g);
  for (Eigen::Index r = 0; r < z.rows(); ++r)
    for (Eigen::Index c = 0; c < z.cols(); ++c)
      EXPECT_TRUE(close(g(r, c), central_difference(z(r, c), [&] { return pca_align_loss(z, t); }), 1e-6, 1e-9));
}

TEST(Pca, BasisIsOrthonormalAndSorted) {
  const Dataset d = linear_gaussian(20, 30, 1);
  const PcaResult p = pca_init(d, 1);
  EXPECT_LE((p.basis.transpose() * p.basis - Eigen::MatrixXd::Identity(2, 2)).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_GE(p.variances(0), p.variances(1));
  ASSERT_EQ(p.targets.size(), d.size());
  const Eigen::VectorXd c = d.x[3].row(7).transpose() - p.mean;
  EXPECT_NEAR(p.targets[3](7, 0), c.dot(p.basis.col(0)), 1e-12);
}

TEST(Fit, ZeroEpochsLeavesModelUnchanged) {
  const Dataset d = linear_gaussian(4, 10, 0);
  Model model = small_model(2, 2, 1, false, 0);
  const std::vector<double> before = flatten(model);
  TrainConfig cfg;
  cfg.epochs = 0;
  fit(d, cfg, model);
  EXPECT_EQ(flatten(model), before);
}

TEST(Fit, SingleRegimeObjectiveIncreases) {
  const Dataset d = linear_gaussian(32, 20, 3);
  Model model = small_model(2, 2, 1, false, 1);
  TrainConfig cfg;
  cfg.epochs = 50;
  cfg.batch_size = 32;  // one full-batch step per epoch
  cfg.lr_flow = 1e-3;
  cfg.lr_rmsm = 1e-3;
  cfg.pca_init = false;
  cfg.pca_align_weight = 0.0;
  std::vector<double> trace;
  TrainerState state;
  fit(d, cfg, model, state, [&](const EpochRecord& r, const Model&, const TrainerState&) { trace.push_back(r.loglik_per_step); });
  ASSERT_EQ(trace.size(), 50u);
  for (std::size_t i = 1; i < trace.size(); ++i) EXPECT_GE(trace[i], trace[i - 1] - 1e-3) << "step " << i;
  EXPECT_GT(trace.back(), trace.front());
}

TEST(Fit, SwitchingFrozenDuringWarmup) {
  const Dataset d = linear_gaussian(8, 10, 5);
  Model model = small_model(2, 2, 2, true, 2);
  const Mlp before = std::get<RecurrentSwitch>(model.prior.switching).net;
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 4;
  cfg.q_freeze_epochs = 2;
  fit(d, cfg, model);
  EXPECT_TRUE(std::get<RecurrentSwitch>(model.prior.switching).net == before);
  cfg.epochs = 3;
  TrainerState state;
  Model again = small_model(2, 2, 2, true, 2);
  fit(d, cfg, again, state);
  EXPECT_FALSE(std::get<RecurrentSwitch>(again.prior.switching).net == before);
}

TEST(Fit, ThreadCountDoesNotChangeResult) {
  const Dataset d = linear_gaussian(12, 15, 7);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 5;
  cfg.seed = 9;
  Model a = small_model(2, 1, 2, true, 4), b = a;
  cfg.threads = 1;
  fit(d, cfg, a);
  cfg.threads = 3;
  fit(d, cfg, b);
  EXPECT_EQ(flatten(a), flatten(b));
}

TEST(Fit, ResumeMatchesStraightRun) {
  const Dataset d = linear_gaussian(10, 12, 8);
  TrainConfig cfg;
  cfg.batch_size = 4;
  cfg.seed = 3;
  cfg.q_freeze_epochs = 1;
  Model straight = small_model(2, 1, 2, true, 6), resumed = straight;
  cfg.epochs = 2;
  TrainerState s1;
  fit(d, cfg, straight, s1);
  cfg.epochs = 1;
  TrainerState s2;
  fit(d, cfg, resumed, s2);
  cfg.epochs = 2;
  fit(d, cfg, resumed, s2);
  EXPECT_EQ(flatten(straight), flatten(resumed));
  EXPECT_EQ(s1.step, s2.step);
  EXPECT_EQ(s1.adam_m, s2.adam_m);
  EXPECT_TRUE(s1.rng == s2.rng);
}

TEST(Fit, NonFiniteObjectiveDiverges) {
  Dataset d = linear_gaussian(6, 5, 0);
  for (auto& x : d.x) x *= 1e200;
  Model model = small_model(2, 2, 1, false, 0);
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 2;
  cfg.pca_init = false;
  cfg.pca_align_weight = 0.0;
  const std::vector<double> before = flatten(model);
  const TrainReport r = fit(d, cfg, model);
  EXPECT_TRUE(r.diverged);
  EXPECT_NE(r.diagnostic.find("diverged"), std::string::npos);
  EXPECT_EQ(flatten(model), before);  // rejected steps leave the last good model
}

TEST(Fit, RecoversGeneratingLikelihood) {
  Rng rng(31);
  Model truth = small_model(4, 2, 2, false, 31);
  truth.prior.transition_log_sigmas = {std::log(0.3), std::log(0.15), std::log(0.1), std::log(0.35)};
  truth.prior.initial_log_sigmas.assign(4, std::log(0.5));
  std::get<AutonomousSwitch>(truth.prior.switching).logits = {2.0, 0.0, 0.0, 2.0};
  for_each_flow_param(truth.flow, "", [&](const std::string&, std::span<double> v) {
    for (double& x : v) x += 0.1 * rng.normal();
  });
  const Dataset train = sample_from(truth, 300, 20, 1);
  const Dataset held = sample_from(truth, 100, 20, 2);
  Model model = small_model(4, 2, 2, false, 77);
  TrainConfig cfg;
  cfg.epochs = 40;
  cfg.batch_size = 30;
  cfg.lr_flow = 3e-3;
  cfg.lr_rmsm = 1e-2;
  cfg.q_freeze_epochs = 2;
  cfg.pca_align_steps = 100;
  cfg.seed = 5;
  cfg.pca_sigma_spread = 0.0;  // symmetric start: this measures the fit, not regime separation
  const TrainReport r = fit(train, cfg, model);
  ASSERT_FALSE(r.diverged);
  const double gap = mean_loglik_per_step(truth, held) - mean_loglik_per_step(model, held);
  EXPECT_LE(gap, 0.1) << "held-out gap " << gap << " nats/step";
}
