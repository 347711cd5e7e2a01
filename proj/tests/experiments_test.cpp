#include <gtest/gtest.h>

#include <cmath>

#include "geolab/experiments.hpp"

using namespace geolab;
using namespace geolab::experiments;

namespace {

Dataset regression_instance(std::uint64_t seed, int d = 4, int k = 4, int m = 8) {
  Rng rng(seed);
  Matrix x = rng.normal_matrix(m, d);
  Matrix a = rng.normal_matrix(k, d, 0.5);
  Matrix y = x * a.transpose() + rng.normal_matrix(m, k, 0.1);
  return Dataset(x, y);
}

// relu with bias, a residual relu layer, and a linear readout
MlpNet small_net(std::uint64_t seed) {
  Rng rng(seed);
  MlpNet net = random_mlp(3, {{5, Activation::relu, false}, {5, Activation::relu, true}, {2, Activation::identity, false}},
                          true, rng);
  for (int l = 0; l < net.depth(); ++l) net.layer(l).bias = rng.normal_vector(net.layer(l).out(), 0.3);
  return net;
}

Vector flatten(const Matrix& m) { return Eigen::Map<const Vector>(m.data(), m.size()); }

MixtureTask small_mixture(std::uint64_t seed) {
  MixtureConfig cfg;
  cfg.dim = 4;
  cfg.train = 40;
  cfg.test = 40;
  return mixture_task(cfg, seed);
}

}  // namespace

TEST(MlpNet, RejectsMalformedLayers) {
  Layer a{Matrix::Ones(3, 2), Vector(), Activation::relu, false};
  Layer b{Matrix::Ones(2, 4), Vector(), Activation::identity, false};
  EXPECT_THROW(MlpNet({a, b}), DomainError);
  Layer res{Matrix::Ones(3, 2), Vector(), Activation::relu, true};
  EXPECT_THROW(MlpNet({res}), DomainError);
  Layer bias{Matrix::Ones(3, 2), Vector::Ones(2), Activation::relu, false};
  EXPECT_THROW(MlpNet({bias}), DomainError);
  EXPECT_THROW(MlpNet(std::vector<Layer>{}), DomainError);
}

TEST(Forward, HandComputedNetwork) {
  Layer l1{Matrix{{1.0, -1.0}, {2.0, 0.5}}, Vector{{0.5, -3.0}}, Activation::relu, true};
  Layer l2{Matrix{{1.0, 2.0}}, Vector{{1.0}}, Activation::identity, false};
  MlpNet net({l1, l2});
  Matrix x{{1.0, 2.0}};
  // z = (1-2+0.5, 2+1-3) = (-0.5, 0); relu -> (0, 0); + x -> (1, 2); out = 1 + 4 + 1
  EXPECT_DOUBLE_EQ(predict(net, x)(0, 0), 6.0);
}

TEST(Backprop, MatchesFiniteDifferencesAtCheckpoints) {
  Rng rng(3);
  Matrix x = rng.normal_matrix(7, 3);
  Dataset data(x, rng.normal_matrix(7, 2));
  MlpNet net = small_net(4);
  for (int checkpoint = 0; checkpoint < 3; ++checkpoint) {
    const Gradients g = backprop(net, data);
    for (int l = 0; l < net.depth(); ++l) {
      const Matrix w = net.layer(l).weight;
      auto f_w = [&](const Vector& v) {
        MlpNet probe = net;
        probe.layer(l).weight = Eigen::Map<const Matrix>(v.data(), w.rows(), w.cols());
        return loss(probe, data);
      };
      const Vector fd = numerics::fd_gradient(f_w, flatten(w), 1e-6);
      EXPECT_LT(numerics::relative_error(flatten(g.weight[l]), fd), 1e-4) << "checkpoint " << checkpoint << " layer " << l;
      auto f_b = [&](const Vector& v) {
        MlpNet probe = net;
        probe.layer(l).bias = v;
        return loss(probe, data);
      };
      const Vector fdb = numerics::fd_gradient(f_b, net.layer(l).bias, 1e-6);
      EXPECT_LT(numerics::relative_error(g.bias[l], fdb), 1e-4) << "checkpoint " << checkpoint << " layer " << l;
    }
    for (int s = 0; s < 25; ++s) net = gd_step(net, backprop(net, data), GdConfig{0.01, 0.0, 1});
  }
}

TEST(Train, SingleLinearLayerMatchesLinearNetExactly) {
  const Dataset data = regression_instance(5);
  Rng rng(6);
  const Matrix w0 = rng.normal_matrix(4, 4, 0.5);
  MlpNet net({Layer{w0, Vector(), Activation::identity, false}});
  TrainConfig cfg;
  cfg.gd = {0.01, 0.1, 50};
  cfg.tol = 1e-300;
  const TrainResult r = train(net, data, cfg, 1);
  linear_net::LinearNet ref({w0});
  for (int s = 0; s < 50; ++s) ref = linear_net::gd_step_layers(ref, data, cfg.gd);
  EXPECT_EQ(r.steps, 50);
  EXPECT_TRUE(r.model.layer(0).weight == ref.layer(0));
}

TEST(Train, SameSeedIsBitwiseIdentical) {
  const MixtureTask task = small_mixture(8);
  auto run = [&] {
    Rng rng(9);
    MlpNet net = random_mlp(4, rectifier_stack(3, 8, 1, false, 4), true, rng);
    TrainConfig cfg;
    cfg.gd = {1e-3, 0.0, 200};
    return train(net, task.train, cfg, 9);
  };
  const TrainResult a = run(), b = run();
  EXPECT_TRUE(a.model == b.model);
  EXPECT_EQ(a.loss_trace, b.loss_trace);
}

TEST(Train, SnapshotIsTakenBeforeTheFirstStep) {
  const MixtureTask task = small_mixture(10);
  Rng rng(11);
  MlpNet net = random_mlp(4, rectifier_stack(3, 8, 1, false, 4), true, rng);
  TrainConfig cfg;
  cfg.gd = {1e-3, 0.0, 20};
  const TrainResult r = train(net, task.train, cfg, 11);
  EXPECT_TRUE(r.snapshot.weights == net);
  EXPECT_EQ(r.snapshot.seed, 11u);
  EXPECT_FALSE(r.model == net);
}

TEST(Train, DivergenceIsReported) {
  const MixtureTask task = small_mixture(12);
  Rng rng(13);
  MlpNet net = random_mlp(4, rectifier_stack(3, 8, 1, false, 4), true, rng);
  TrainConfig cfg;
  cfg.gd = {5.0, 0.0, 100};
  EXPECT_THROW(train(net, task.train, cfg, 13), TrainingDiverged);
}

TEST(ResetLayer, UntrainedModelIsUnchanged) {
  MlpNet net = small_net(14);
  const InitSnapshot snap{net, 14};
  for (int k = 0; k < net.depth(); ++k) EXPECT_TRUE(reset_layer(net, snap, k) == net);
  const MixtureTask task = small_mixture(15);
  Rng rng(15);
  MlpNet clf = random_mlp(4, rectifier_stack(3, 8, 1, false, 4), true, rng);
  const SensitivityProfile p = sensitivity_profile(clf, InitSnapshot{clf, 15}, task.test, 2, 1);
  for (const LayerSensitivity& s : p.layers) {
    EXPECT_EQ(s.reset_loss, 0.0);
    EXPECT_EQ(s.reset_error, 0.0);
  }
}

TEST(ResetLayer, OnlyTopLayerMovedMeansLowerResetsAreNoOps) {
  MlpNet init = small_net(16);
  MlpNet trained = init;
  trained.layer(2).weight.array() += 0.25;
  const InitSnapshot snap{init, 16};
  for (int k = 0; k < 2; ++k) EXPECT_TRUE(reset_layer(trained, snap, k) == trained);
  EXPECT_TRUE(reset_layer(trained, snap, 2) == init);
}

TEST(ResetLayer, EqualsHandSplicedHybrid) {
  MlpNet init = small_net(17);
  MlpNet trained = small_net(18);
  std::vector<Layer> spliced = trained.layers();
  spliced[1] = init.layer(1);
  const MlpNet hybrid(spliced);
  Rng rng(19);
  const Matrix x = rng.normal_matrix(9, 3);
  EXPECT_TRUE(predict(reset_layer(trained, InitSnapshot{init, 17}, 1), x) == predict(hybrid, x));
}

TEST(ResetLayer, RejectsBadIndex) {
  MlpNet net = small_net(20);
  const InitSnapshot snap{net, 20};
  EXPECT_THROW(reset_layer(net, snap, 3), DomainError);
  EXPECT_THROW(reset_layer(net, snap, -1), DomainError);
  Rng rng(1);
  EXPECT_THROW(rerandomize_layer(net, 3, rng), DomainError);
}

TEST(RerandomizeLayer, RedrawsOnlyTheTargetLayer) {
  MlpNet init = small_net(21);
  MlpNet trained = small_net(22);
  Rng rng(23);
  const MlpNet redrawn = rerandomize_layer(trained, 1, rng);
  EXPECT_GT((redrawn.layer(1).weight - trained.layer(1).weight).cwiseAbs().maxCoeff(), 0.0);
  EXPECT_GT((redrawn.layer(1).weight - init.layer(1).weight).cwiseAbs().maxCoeff(), 0.0);
  for (int k : {0, 2}) {
    EXPECT_TRUE(redrawn.layer(k).weight == trained.layer(k).weight);
    EXPECT_TRUE(redrawn.layer(k).bias == trained.layer(k).bias);
  }
}

TEST(RerandomizeLayer, MomentsMatchTheInitScheme) {
  for (Activation act : {Activation::relu, Activation::identity}) {
    Layer l{Matrix::Zero(64, 50), Vector(), act, false};
    MlpNet net({l});
    Rng rng(24);
    const Matrix w = rerandomize_layer(net, 0, rng).layer(0).weight;
    const double var = (act == Activation::relu ? 2.0 : 1.0) / 50.0;
    const double count = static_cast<double>(w.size());
    const double mean = w.mean();
    const double sample_var = (w.array() - mean).square().sum() / (count - 1);
    EXPECT_LT(std::abs(mean), 3.0 * std::sqrt(var) / std::sqrt(count)) << to_string(act);
    // variance of the sample variance is 2 var^2/(count-1) for Gaussians
    EXPECT_LT(std::abs(sample_var - var), 3.0 * var * std::sqrt(2.0 / (count - 1))) << to_string(act);
  }
}

TEST(SensitivityProfile, LossDegradationNonnegativeOnTrainedModel) {
  const MixtureTask task = small_mixture(25);
  Rng rng(26);
  MlpNet net = random_mlp(4, rectifier_stack(3, 8, 1, false, 4), true, rng);
  TrainConfig cfg;
  cfg.gd = {2e-3, 0.0, 3000};
  const TrainResult r = train(net, task.train, cfg, 26);
  const SensitivityProfile p = sensitivity_profile(r.model, r.snapshot, task.test, 10, 27);
  ASSERT_EQ(p.layers.size(), 3u);
  for (const LayerSensitivity& s : p.layers) EXPECT_GE(s.rerandom_loss_mean, -1e-6);
  EXPECT_THROW(sensitivity_profile(r.model, r.snapshot, task.test, 0, 27), DomainError);
}

TEST(SensitivityProfile, ThirdsAndFlatness) {
  const ThirdsSummary t = thirds({6.0, 4.0, 3.0, 3.0, 2.0, 1.0});
  EXPECT_DOUBLE_EQ(t.bottom, 5.0);
  EXPECT_DOUBLE_EQ(t.top, 1.5);
  EXPECT_DOUBLE_EQ(flatness({2.0, 8.0, 4.0}), 4.0);
  EXPECT_TRUE(std::isinf(flatness({0.0, 1.0})));
}

TEST(MixtureTask, ShapesLabelsAndDeterminism) {
  const MixtureTask a = mixture_task({}, 30), b = mixture_task({}, 30);
  EXPECT_EQ(a.train.samples(), 500);
  EXPECT_EQ(a.test.samples(), 500);
  EXPECT_EQ(a.train.input_dim(), 10);
  EXPECT_TRUE(a.train.inputs == b.train.inputs);
  EXPECT_TRUE(a.test.targets == b.test.targets);
  EXPECT_DOUBLE_EQ(a.train.targets.sum(), 0.0);
  EXPECT_EQ(a.train.targets.cwiseAbs().minCoeff(), 1.0);
}

TEST(ProbStudy, HistogramIsPartitionAndIndependentOfBins) {
  ProbStudyConfig cfg;
  cfg.runs = 120;
  const ProbStudy a = prob_complexity_study(cfg, 40);
  cfg.bins = 5;
  const ProbStudy b = prob_complexity_study(cfg, 40);
  int total = 0;
  for (int n : a.histogram.counts) total += n;
  EXPECT_EQ(total, a.converged);
  ASSERT_EQ(a.runs.size(), b.runs.size());
  for (std::size_t i = 0; i < a.runs.size(); ++i) {
    EXPECT_EQ(a.runs[i].seed, b.runs[i].seed);
    EXPECT_EQ(a.runs[i].complexity, b.runs[i].complexity);
    EXPECT_EQ(a.runs[i].test_error, b.runs[i].test_error);
  }
  for (const ComplexityRun& r : a.runs) {
    if (r.converged) {
      EXPECT_GE(r.complexity, 0.0);
    }
  }
}

TEST(ProbStudy, UniqueMinimumIsDegenerate) {
  // m = d with no hidden freedom: every run lands on the teacher
  ProbStudyConfig cfg;
  cfg.samples = 8;
  cfg.depth = 1;
  cfg.runs = 60;
  cfg.tol = 1e-20;
  cfg.max_steps = 5000;
  const ProbStudy s = prob_complexity_study(cfg, 41);
  EXPECT_EQ(s.converged, 60);
  EXPECT_TRUE(s.degenerate);
  EXPECT_EQ(s.populated_bins, 1);
}

TEST(ProbStudy, TooFewConvergedRunsIsInsufficientData) {
  ProbStudyConfig cfg;
  cfg.runs = 60;
  cfg.max_steps = 2;
  EXPECT_THROW(prob_complexity_study(cfg, 42), InsufficientData);
}

TEST(ProbStudy, PathLengthMeasureIsPositive) {
  ProbStudyConfig cfg;
  cfg.runs = 60;
  cfg.measure = ComplexityMeasure::path_length;
  const ProbStudy s = prob_complexity_study(cfg, 43);
  for (const ComplexityRun& r : s.runs) {
    if (r.converged) {
      EXPECT_GT(r.complexity, 0.0);
    }
  }
}

TEST(TrajectoryCompare, DepthOneIsIdenticallyZero) {
  const Dataset data = regression_instance(50);
  Rng rng(51);
  const Matrix w0 = Matrix::Identity(4, 4) + 0.2 * rng.normal_matrix(4, 4);
  for (double d : trajectory_compare(w0, data, GdConfig{1e-3, 0.0, 1}, 1, 100)) EXPECT_LE(d, 1e-15);
}

TEST(TrajectoryCompare, ZeroResidualStartIsFrozen) {
  Rng rng(52);
  const Matrix w0 = Matrix::Identity(4, 4) + 0.2 * rng.normal_matrix(4, 4);
  const Matrix x = rng.normal_matrix(6, 4);
  const Dataset data(x, x * w0.transpose());
  for (double d : trajectory_compare(w0, data, GdConfig{1e-2, 0.0, 1}, 3, 50)) EXPECT_LE(d, 1e-12);
}

TEST(TrajectoryCompare, DeviationIsFirstOrderInStepSize) {
  const Dataset data = regression_instance(16);
  Rng rng(17);
  const Matrix w0 = Matrix::Identity(4, 4) + 0.2 * rng.normal_matrix(4, 4);
  for (int depth : {2, 3, 4}) {
    const double coarse = trajectory_compare(w0, data, GdConfig{2e-3, 0.0, 1}, depth, 200).back();
    const double fine = trajectory_compare(w0, data, GdConfig{1e-3, 0.0, 1}, depth, 400).back();
    EXPECT_GE(coarse / fine, 1.8) << "N=" << depth;
  }
}
