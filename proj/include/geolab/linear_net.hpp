#pragma once

// Deep linear networks: layerwise gradient descent, the preconditioned
// end-to-end update it induces under balancedness, balanced factorization
// and a polar-log complexity of the end-to-end map.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "geolab/numerics.hpp"

namespace geolab::linear_net {

/// Samples are rows: inputs is m x d, targets is m x k.
struct Dataset {
  Matrix inputs;
  Matrix targets;

  Dataset() = default;
  Dataset(Matrix x, Matrix y) : inputs(std::move(x)), targets(std::move(y)) {
    if (inputs.rows() < 1) throw DomainError("Dataset: needs at least one sample");
    if (inputs.rows() != targets.rows()) throw DomainError("Dataset: input/target sample counts differ");
    require_finite(inputs, "Dataset inputs");
    require_finite(targets, "Dataset targets");
  }

  Eigen::Index samples() const { return inputs.rows(); }
  Eigen::Index input_dim() const { return inputs.cols(); }
  Eigen::Index output_dim() const { return targets.cols(); }
};

struct GdConfig {
  double eta = 1e-2;
  double lambda = 0.0;
  int steps = 100;

  void validate(int depth) const {
    if (!(eta > 0.0)) throw DomainError("GdConfig: eta must be positive");
    if (!(lambda >= 0.0)) throw DomainError("GdConfig: lambda must be nonnegative");
    if (steps < 1) throw DomainError("GdConfig: steps must be positive");
    if (!(eta * lambda * depth < 1.0)) throw DomainError("GdConfig: eta*lambda*N must be < 1");
  }
};

/// W_1 .. W_N, stored bottom first. W_1 maps R^d to the hidden width and
/// W_N maps onto R^k.
class LinearNet {
 public:
  LinearNet() = default;
  explicit LinearNet(std::vector<Matrix> layers) : layers_(std::move(layers)) {
    if (layers_.empty()) throw DomainError("LinearNet: depth must be at least 1");
    for (std::size_t j = 0; j < layers_.size(); ++j) {
      require_finite(layers_[j], "LinearNet layer");
      if (j > 0 && layers_[j].cols() != layers_[j - 1].rows())
        throw DomainError("LinearNet: layer " + std::to_string(j + 1) + " does not compose with layer " +
                          std::to_string(j));
    }
  }

  int depth() const { return static_cast<int>(layers_.size()); }
  const std::vector<Matrix>& layers() const { return layers_; }
  const Matrix& layer(int j) const { return layers_.at(static_cast<std::size_t>(j)); }
  Matrix& layer(int j) { return layers_.at(static_cast<std::size_t>(j)); }
  Eigen::Index input_dim() const { return layers_.front().cols(); }
  Eigen::Index output_dim() const { return layers_.back().rows(); }

 private:
  std::vector<Matrix> layers_;
};

/// Product of layers [first, last) applied right to left: W_{last-1} ... W_first.
/// Empty range yields the identity of size `identity_dim`.
inline Matrix partial_product(const LinearNet& net, int first, int last, Eigen::Index identity_dim) {
  if (first >= last) return Matrix::Identity(identity_dim, identity_dim);
  Matrix p = net.layer(first);
  for (int j = first + 1; j < last; ++j) p = net.layer(j) * p;
  return p;
}

inline Matrix end_to_end(const LinearNet& net) { return partial_product(net, 0, net.depth(), net.input_dim()); }

/// Sum over samples of the squared residual of the linear map `we`.
inline double loss_of(const Matrix& we, const Dataset& data) {
  return (data.inputs * we.transpose() - data.targets).squaredNorm();
}

inline double loss(const LinearNet& net, const Dataset& data) { return loss_of(end_to_end(net), data); }

/// dL1/dW = 2 sum_i (W x_i - y_i) x_i^T.
inline Matrix loss_gradient(const Matrix& we, const Dataset& data) {
  if (we.cols() != data.input_dim() || we.rows() != data.output_dim())
    throw DomainError("loss_gradient: map dimensions do not match the dataset");
  return 2.0 * (data.inputs * we.transpose() - data.targets).transpose() * data.inputs;
}

/// Gradient of the deep loss with respect to every layer, all evaluated at
/// the current weights.
inline std::vector<Matrix> layer_gradients(const LinearNet& net, const Dataset& data) {
  const int n = net.depth();
  const Matrix g = loss_gradient(end_to_end(net), data);
  std::vector<Matrix> grads;
  grads.reserve(static_cast<std::size_t>(n));
  for (int j = 0; j < n; ++j) {
    const Matrix above = partial_product(net, j + 1, n, net.output_dim());
    const Matrix below = partial_product(net, 0, j, net.input_dim());
    grads.push_back(above.transpose() * g * below.transpose());
  }
  return grads;
}

/// One simultaneous gradient step on every layer with weight decay.
inline LinearNet gd_step_layers(const LinearNet& net, const Dataset& data, const GdConfig& cfg) {
  const std::vector<Matrix> grads = layer_gradients(net, data);
  std::vector<Matrix> next;
  next.reserve(grads.size());
  for (int j = 0; j < net.depth(); ++j)
    next.push_back((1.0 - cfg.eta * cfg.lambda) * net.layer(j) - cfg.eta * grads[static_cast<std::size_t>(j)]);
  return LinearNet(std::move(next));
}

/// The induced end-to-end update for a balanced depth-N factorization:
///   W <- (1 - eta lambda N) W
///        - eta sum_j [W W^T]^((j-1)/N) dL1/dW [W^T W]^((N-j)/N)
inline Matrix gd_step_end_to_end(const Matrix& we, const Dataset& data, const GdConfig& cfg, int depth) {
  if (depth < 1) throw DomainError("gd_step_end_to_end: depth must be positive");
  if (!(cfg.eta * cfg.lambda * depth < 1.0)) throw DomainError("gd_step_end_to_end: eta*lambda*N must be < 1");
  const Matrix g = loss_gradient(we, data);
  const Matrix left_gram = we * we.transpose();
  const Matrix right_gram = we.transpose() * we;
  const double n = depth;
  Matrix update = Matrix::Zero(we.rows(), we.cols());
  for (int j = 1; j <= depth; ++j) {
    const Matrix left = numerics::fractional_power(left_gram, (j - 1) / n);
    const Matrix right = numerics::fractional_power(right_gram, (depth - j) / n);
    update += left * g * right;
  }
  return (1.0 - cfg.eta * cfg.lambda * n) * we - cfg.eta * update;
}

struct SignedSvd {
  Matrix u;
  Vector sigma;
  Matrix v;
};

/// Thin SVD with each left singular vector's largest-magnitude entry made
/// positive (first such entry on ties); the matching right vector is
/// flipped alongside.
inline SignedSvd signed_svd(const Matrix& m) {
  Eigen::JacobiSVD<Matrix> svd(m, Eigen::ComputeThinU | Eigen::ComputeThinV);
  SignedSvd out{svd.matrixU(), svd.singularValues(), svd.matrixV()};
  for (Eigen::Index c = 0; c < out.u.cols(); ++c) {
    Eigen::Index arg = 0;
    double best = -1.0;
    for (Eigen::Index r = 0; r < out.u.rows(); ++r) {
      if (std::abs(out.u(r, c)) > best + 1e-12) {
        best = std::abs(out.u(r, c));
        arg = r;
      }
    }
    if (out.u(arg, c) < 0.0) {
      out.u.col(c) *= -1.0;
      out.v.col(c) *= -1.0;
    }
  }
  return out;
}

/// Balanced factorization of a target end-to-end map. Hidden width is
/// min(d, k); with target = U S V^T: W_1 = S^(1/N) V^T, W_j = S^(1/N),
/// W_N = U S^(1/N).
inline LinearNet balanced_init(const Matrix& target, int depth) {
  if (depth < 1) throw DomainError("balanced_init: depth must be positive");
  require_finite(target, "balanced_init");
  if (depth == 1) return LinearNet({target});
  const SignedSvd svd = signed_svd(target);
  const Vector root = svd.sigma.array().pow(1.0 / depth).matrix();
  const auto s = root.asDiagonal();
  std::vector<Matrix> layers;
  layers.reserve(static_cast<std::size_t>(depth));
  layers.push_back(s * svd.v.transpose());
  for (int j = 1; j + 1 < depth; ++j) layers.push_back(Matrix(s));
  layers.push_back(svd.u * s);
  return LinearNet(std::move(layers));
}

/// max_j || W_{j+1}^T W_{j+1} - W_j W_j^T ||_F (zero for a single layer).
inline double balancedness_defect(const LinearNet& net) {
  double worst = 0.0;
  for (int j = 0; j + 1 < net.depth(); ++j) {
    const Matrix& lower = net.layer(j);
    const Matrix& upper = net.layer(j + 1);
    worst = std::max(worst, (upper.transpose() * upper - lower * lower.transpose()).norm());
  }
  return worst;
}

struct PolarFactors {
  Matrix rotation;  // orthogonal, det > 0
  Matrix stretch;   // symmetric positive definite
};

/// W = Q P with Q orthogonal and P symmetric positive definite.
inline PolarFactors polar_decompose(const Matrix& w) {
  if (w.rows() != w.cols()) throw DomainError("polar_decompose: matrix is not square");
  Eigen::JacobiSVD<Matrix> svd(w, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Vector& s = svd.singularValues();
  if (s.size() == 0 || s(s.size() - 1) <= 1e-12 * std::max(1.0, s(0)))
    throw DomainError("polar_decompose: matrix is singular");
  const Matrix& u = svd.matrixU();
  const Matrix& v = svd.matrixV();
  return {u * v.transpose(), v * s.asDiagonal() * v.transpose()};
}

/// Distance of W from the identity in the product metric on rotation and
/// stretch factors: sqrt(||log Q||_F^2 + ||log P||_F^2).
inline double net_complexity(const Matrix& we) {
  require_finite(we, "net_complexity");
  if (we.rows() != we.cols()) throw DomainError("net_complexity: end-to-end map is not square");
  const PolarFactors polar = polar_decompose(we);
  if (polar.rotation.determinant() < 0.0)
    throw DomainError("net_complexity: end-to-end map reverses orientation");
  Eigen::SelfAdjointEigenSolver<Matrix> eig(0.5 * (polar.stretch + polar.stretch.transpose()));
  const double log_stretch_sq = eig.eigenvalues().array().log().square().sum();
  const double log_rotation_sq = numerics::principal_log(polar.rotation).squaredNorm();
  return std::sqrt(log_rotation_sq + log_stretch_sq);
}

}  // namespace geolab::linear_net
