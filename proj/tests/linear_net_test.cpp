#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "geolab/linear_net.hpp"

using namespace geolab;
using namespace geolab::linear_net;

namespace {

Dataset regression_instance(std::uint64_t seed, int d = 4, int k = 4, int m = 8) {
  Rng rng(seed);
  Matrix x = rng.normal_matrix(m, d);
  Matrix a = rng.normal_matrix(k, d, 0.5);
  Matrix y = x * a.transpose() + rng.normal_matrix(m, k, 0.1);
  return Dataset(x, y);
}

LinearNet random_net(Rng& rng, std::vector<int> widths) {
  std::vector<Matrix> layers;
  for (std::size_t j = 0; j + 1 < widths.size(); ++j) layers.push_back(rng.normal_matrix(widths[j + 1], widths[j], 0.5));
  return LinearNet(layers);
}

// Flatten/unflatten one layer so fd_gradient can probe it.
Vector flatten(const Matrix& m) { return Eigen::Map<const Vector>(m.data(), m.size()); }

}  // namespace

TEST(EndToEnd, SingleLayerAndHandProduct) {
  Matrix w(2, 3);
  w << 1, 2, 3, 4, 5, 6;
  EXPECT_EQ(end_to_end(LinearNet({w})), w);

  Matrix w1(2, 2), w2(2, 2), want(2, 2);
  w1 << 0, 1, 1, 0;
  w2 << 1, 0, 0, 2;
  want << 0, 1, 2, 0;
  EXPECT_EQ(end_to_end(LinearNet({w1, w2})), want);
}

TEST(EndToEnd, MatchesLeftToRightProduct) {
  Rng rng(1);
  LinearNet net = random_net(rng, {3, 5, 5, 2});
  Matrix oracle = (net.layer(2) * net.layer(1)) * net.layer(0);
  EXPECT_LT((end_to_end(net) - oracle).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(LinearNet, RejectsNonComposingLayers) {
  EXPECT_THROW(LinearNet({Matrix::Ones(3, 2), Matrix::Ones(2, 2)}), DomainError);
  EXPECT_THROW(LinearNet(std::vector<Matrix>{}), DomainError);
}

TEST(Loss, ZeroResidualAndUnitTarget) {
  Rng rng(2);
  LinearNet net = random_net(rng, {3, 4, 2});
  Matrix x = rng.normal_matrix(6, 3);
  Dataset exact(x, x * end_to_end(net).transpose());
  EXPECT_LT(loss(net, exact), 1e-24);

  Dataset single(Matrix::Ones(1, 2), (Matrix(1, 2) << 1, 0).finished());
  EXPECT_DOUBLE_EQ(loss(LinearNet({Matrix::Zero(2, 2)}), single), 1.0);
}

TEST(Loss, MatchesPerSampleLoop) {
  Rng rng(3);
  LinearNet net = random_net(rng, {4, 3, 3});
  Dataset data = regression_instance(4, 4, 3, 7);
  const Matrix we = end_to_end(net);
  double oracle = 0.0;
  for (Eigen::Index i = 0; i < data.samples(); ++i) {
    Vector r = we * data.inputs.row(i).transpose() - data.targets.row(i).transpose();
    for (Eigen::Index c = 0; c < r.size(); ++c) oracle += r(c) * r(c);
  }
  EXPECT_NEAR(loss(net, data), oracle, 1e-12 * oracle);
}

TEST(GdStepLayers, SingleLayerIsPlainGradientDescent) {
  Dataset data = regression_instance(5);
  Rng rng(6);
  Matrix w = rng.normal_matrix(4, 4);
  GdConfig cfg{0.01, 0.5, 1};
  LinearNet next = gd_step_layers(LinearNet({w}), data, cfg);
  Matrix want = (1.0 - cfg.eta * cfg.lambda) * w - cfg.eta * loss_gradient(w, data);
  EXPECT_LT((next.layer(0) - want).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(GdStepLayers, ZeroResidualLeavesWeightsUnchanged) {
  Rng rng(7);
  LinearNet net = random_net(rng, {3, 3, 3});
  Matrix x = rng.normal_matrix(5, 3);
  Dataset exact(x, x * end_to_end(net).transpose());
  LinearNet next = gd_step_layers(net, exact, GdConfig{0.1, 0.0, 1});
  for (int j = 0; j < net.depth(); ++j) EXPECT_LT((next.layer(j) - net.layer(j)).norm(), 1e-12);
}

TEST(GdStepLayers, LayerGradientsMatchFiniteDifferences) {
  Rng rng(8);
  LinearNet net = random_net(rng, {4, 5, 5, 3});
  Dataset data = regression_instance(9, 4, 3, 6);
  const std::vector<Matrix> grads = layer_gradients(net, data);
  for (int j = 0; j < net.depth(); ++j) {
    const Matrix shape = net.layer(j);
    auto f = [&](const Vector& flat) {
      LinearNet probe = net;
      probe.layer(j) = Eigen::Map<const Matrix>(flat.data(), shape.rows(), shape.cols());
      return loss(probe, data);
    };
    Vector fd = numerics::fd_gradient(f, flatten(shape), 1e-5);
    EXPECT_LT(numerics::relative_error(flatten(grads[j]), fd), 1e-5) << "layer " << j;
  }
}

TEST(GdStepEndToEnd, DepthOneIsPlainGradientDescent) {
  Dataset data = regression_instance(10);
  Rng rng(11);
  Matrix w = rng.normal_matrix(4, 4);
  GdConfig cfg{0.02, 0.0, 1};
  Matrix want = w - cfg.eta * loss_gradient(w, data);
  EXPECT_LT((gd_step_end_to_end(w, data, cfg, 1) - want).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(GdStepEndToEnd, OriginIsFixedPoint) {
  Dataset data = regression_instance(12);
  Matrix zero = Matrix::Zero(4, 4);
  EXPECT_EQ(gd_step_end_to_end(zero, data, GdConfig{0.1, 0.0, 1}, 2), zero);
}

TEST(GdStepEndToEnd, ScalarClosedForm) {
  // L1(w) = (w - 2)^2 from a single sample x = 1, y = 2.
  Dataset data(Matrix::Ones(1, 1), Matrix::Constant(1, 1, 2.0));
  Matrix w = Matrix::Ones(1, 1);
  EXPECT_NEAR(gd_step_end_to_end(w, data, GdConfig{0.1, 0.0, 1}, 2)(0, 0), 1.4, 1e-15);
}

TEST(GdStepEndToEnd, RejectsShrinkageBeyondOne) {
  Dataset data = regression_instance(13);
  EXPECT_THROW(gd_step_end_to_end(Matrix::Identity(4, 4), data, GdConfig{0.5, 1.0, 1}, 2), DomainError);
}

TEST(GdStepEndToEnd, DepthOneEquivalenceAcrossInstances) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Dataset data = regression_instance(100 + seed);
    Rng rng(200 + seed);
    Matrix w = rng.normal_matrix(4, 4);
    GdConfig cfg{0.01, 0.3, 1};
    Matrix a = gd_step_end_to_end(w, data, cfg, 1);
    Matrix b = gd_step_layers(LinearNet({w}), data, cfg).layer(0);
    EXPECT_LT((a - b).cwiseAbs().maxCoeff(), 1e-14);
  }
}

TEST(BalancedInit, FactorizesTargetAndIsBalanced) {
  Rng rng(14);
  for (int depth = 1; depth <= 5; ++depth) {
    for (auto [k, d] : {std::pair{4, 4}, std::pair{2, 5}, std::pair{5, 3}}) {
      Matrix target = rng.normal_matrix(k, d);
      LinearNet net = balanced_init(target, depth);
      EXPECT_EQ(net.depth(), depth);
      EXPECT_LT((end_to_end(net) - target).cwiseAbs().maxCoeff(), 1e-10);
      EXPECT_LT(balancedness_defect(net), 1e-12);
      if (depth > 1) EXPECT_EQ(net.layer(0).rows(), std::min(k, d));
    }
  }
  Matrix t = rng.normal_matrix(3, 3);
  EXPECT_EQ(balanced_init(t, 1).layer(0), t);
}

TEST(BalancedInit, SignConventionIsDeterministic) {
  Matrix t = -Matrix::Identity(3, 3);
  t(0, 1) = 0.3;
  LinearNet a = balanced_init(t, 3);
  const SignedSvd svd = signed_svd(t);
  for (Eigen::Index c = 0; c < svd.u.cols(); ++c) EXPECT_GT(svd.u.col(c).maxCoeff(), -svd.u.col(c).minCoeff() - 1e-12);
  EXPECT_EQ(a.layer(1), balanced_init(t, 3).layer(1));
}

TEST(BalancednessDefect, HandComputedExample) {
  EXPECT_EQ(balancedness_defect(LinearNet({Matrix::Ones(2, 2)})), 0.0);
  LinearNet net({Matrix::Identity(2, 2), 2.0 * Matrix::Identity(2, 2)});
  EXPECT_NEAR(balancedness_defect(net), 3.0 * std::sqrt(2.0), 1e-14);
}

TEST(NetComplexity, ClosedForms) {
  EXPECT_NEAR(net_complexity(Matrix::Identity(3, 3)), 0.0, 1e-14);
  Matrix stretch = Eigen::Vector2d(std::exp(1.0), 1.0).asDiagonal();
  EXPECT_NEAR(net_complexity(stretch), 1.0, 1e-12);
  Matrix quarter(2, 2);
  quarter << 0, -1, 1, 0;
  EXPECT_NEAR(net_complexity(quarter), std::sqrt(2.0) * std::numbers::pi / 2.0, 1e-12);
}

TEST(NetComplexity, RejectsOutOfScopeMaps) {
  EXPECT_THROW(net_complexity(Matrix::Ones(2, 3)), DomainError);
  EXPECT_THROW(net_complexity(Matrix::Ones(2, 2)), DomainError);
  Matrix reflect = Eigen::Vector2d(1.0, -1.0).asDiagonal();
  EXPECT_THROW(net_complexity(reflect), DomainError);
}

TEST(NetComplexity, ConjugationInvariance) {
  Rng rng(15);
  for (int trial = 0; trial < 20; ++trial) {
    Matrix w = Matrix::Identity(4, 4) + 0.3 * rng.normal_matrix(4, 4);
    Matrix r = Eigen::HouseholderQR<Matrix>(rng.normal_matrix(4, 4)).householderQ();
    EXPECT_NEAR(net_complexity(r * w * r.transpose()), net_complexity(w), 1e-10);
  }
}

// Deviation between layerwise descent (from a balanced start) and the
// induced end-to-end update is first order in eta at fixed eta*K.
TEST(Dynamics, LayerwiseTracksEndToEndToFirstOrder) {
  Dataset data = regression_instance(16);
  Rng rng(17);
  const Matrix w0 = Matrix::Identity(4, 4) + 0.2 * rng.normal_matrix(4, 4);
  auto final_deviation = [&](int depth, double eta, int steps) {
    LinearNet net = balanced_init(w0, depth);
    Matrix we = w0;
    GdConfig cfg{eta, 0.0, 1};
    for (int s = 0; s < steps; ++s) {
      net = gd_step_layers(net, data, cfg);
      we = gd_step_end_to_end(we, data, cfg, depth);
    }
    return (end_to_end(net) - we).norm();
  };
  for (int depth : {2, 3, 4}) {
    const double coarse = final_deviation(depth, 2e-3, 200);
    const double fine = final_deviation(depth, 1e-3, 400);
    EXPECT_GE(coarse / fine, 1.8) << "N=" << depth << " coarse=" << coarse << " fine=" << fine;
  }
}

TEST(Dynamics, BalancednessDefectScalesWithEta) {
  Dataset data = regression_instance(18);
  Rng rng(19);
  const Matrix w0 = Matrix::Identity(4, 4) + 0.2 * rng.normal_matrix(4, 4);
  auto defect_after = [&](double eta, int steps) {
    LinearNet net = balanced_init(w0, 3);
    for (int s = 0; s < steps; ++s) net = gd_step_layers(net, data, GdConfig{eta, 0.0, 1});
    return balancedness_defect(net);
  };
  const double eta0 = 1e-2;
  const double c = defect_after(eta0, 20) / eta0;
  for (double eta : {5e-3, 2.5e-3}) {
    const int steps = static_cast<int>(std::lround(20 * eta0 / eta));
    EXPECT_LE(defect_after(eta, steps), 1.05 * c * eta) << "eta=" << eta;
  }
}

TEST(Dynamics, SmallStepNeverIncreasesLoss) {
  Dataset data = regression_instance(20);
  Rng rng(21);
  LinearNet net = balanced_init(Matrix::Identity(4, 4) + 0.2 * rng.normal_matrix(4, 4), 3);
  double prev = loss(net, data);
  for (int s = 0; s < 500; ++s) {
    net = gd_step_layers(net, data, GdConfig{1e-3, 0.0, 1});
    const double cur = loss(net, data);
    ASSERT_LE(cur, prev) << "step " << s;
    prev = cur;
  }
}
