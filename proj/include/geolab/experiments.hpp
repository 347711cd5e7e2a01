#pragma once

// Empirical studies: per-layer sensitivity of small trained networks, the
// probability-complexity study on an underdetermined linear task, and the
// layerwise vs end-to-end trajectory comparison.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "geolab/complexity_geometry.hpp"
#include "geolab/linear_net.hpp"
#include "geolab/numerics.hpp"

namespace geolab::experiments {

using linear_net::Dataset;
using linear_net::GdConfig;

enum class Activation { identity, relu };

inline const char* to_string(Activation a) { return a == Activation::relu ? "relu" : "identity"; }

struct Layer {
  Matrix weight;  // out x in
  Vector bias;    // empty when the layer has no bias
  Activation activation = Activation::identity;
  bool residual = false;  // y + f(y); requires a square weight

  Eigen::Index in() const { return weight.cols(); }
  Eigen::Index out() const { return weight.rows(); }
  bool has_bias() const { return bias.size() > 0; }
};

/// Fully connected network; samples are rows, layer l maps H to
/// act(H W^T + 1 b^T) (plus H when residual).
class MlpNet {
 public:
  MlpNet() = default;
  explicit MlpNet(std::vector<Layer> layers) : layers_(std::move(layers)) {
    if (layers_.empty()) throw DomainError("MlpNet: needs at least one layer");
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const Layer& L = layers_[l];
      require_finite(L.weight, "MlpNet weight");
      if (L.has_bias()) {
        require_finite(L.bias, "MlpNet bias");
        if (L.bias.size() != L.out()) throw DomainError("MlpNet: bias length does not match layer output");
      }
      if (L.residual && L.in() != L.out()) throw DomainError("MlpNet: residual layers must be square");
      if (l > 0 && L.in() != layers_[l - 1].out())
        throw DomainError("MlpNet: layer " + std::to_string(l) + " does not compose with its predecessor");
    }
  }

  int depth() const { return static_cast<int>(layers_.size()); }
  const Layer& layer(int l) const { return layers_.at(static_cast<std::size_t>(l)); }
  Layer& layer(int l) { return layers_.at(static_cast<std::size_t>(l)); }
  const std::vector<Layer>& layers() const { return layers_; }

  void check_index(int l) const {
    if (l < 0 || l >= depth())
      throw DomainError("MlpNet: layer index " + std::to_string(l) + " out of range [0, " + std::to_string(depth()) + ")");
  }

  friend bool operator==(const MlpNet& a, const MlpNet& b) {
    if (a.depth() != b.depth()) return false;
    for (int l = 0; l < a.depth(); ++l) {
      const Layer &x = a.layer(l), &y = b.layer(l);
      if (x.activation != y.activation || x.residual != y.residual || x.weight.rows() != y.weight.rows() ||
          x.weight.cols() != y.weight.cols() || x.bias.size() != y.bias.size() || x.weight != y.weight ||
          x.bias != y.bias)
        return false;
    }
    return true;
  }

 private:
  std::vector<Layer> layers_;
};

struct LayerSpec {
  int width = 1;
  Activation activation = Activation::relu;
  bool residual = false;
};

/// Gaussian init with variance 2/fan_in for rectifier layers and 1/fan_in
/// otherwise; biases start at zero.
inline Matrix init_weight(Eigen::Index out, Eigen::Index in, Activation act, Rng& rng) {
  const double var = (act == Activation::relu ? 2.0 : 1.0) / static_cast<double>(in);
  return rng.normal_matrix(out, in, std::sqrt(var));
}

inline MlpNet random_mlp(int input_dim, const std::vector<LayerSpec>& specs, bool biases, Rng& rng) {
  std::vector<Layer> layers;
  Eigen::Index in = input_dim;
  for (const LayerSpec& s : specs) {
    Layer L;
    L.weight = init_weight(s.width, in, s.activation, rng);
    if (biases) L.bias = Vector::Zero(s.width);
    L.activation = s.activation;
    L.residual = s.residual;
    layers.push_back(std::move(L));
    in = s.width;
  }
  return MlpNet(std::move(layers));
}

/// Hidden rectifier layers of equal width plus an identity output layer.
/// Residual hidden layers are those whose input width equals the width.
inline std::vector<LayerSpec> rectifier_stack(int layers, int width, int outputs, bool residual, int input_dim) {
  if (layers < 1) throw DomainError("rectifier_stack: needs at least one layer");
  std::vector<LayerSpec> specs;
  for (int l = 0; l + 1 < layers; ++l) {
    const int in = l == 0 ? input_dim : width;
    specs.push_back({width, Activation::relu, residual && in == width});
  }
  specs.push_back({outputs, Activation::identity, false});
  return specs;
}

// ---------------------------------------------------------------------------
// Forward / backward

struct Forward {
  std::vector<Matrix> inputs;  // H_l fed to layer l
  std::vector<Matrix> pre;     // H_l W_l^T + b_l
  Matrix output;
};

inline Forward forward(const MlpNet& net, const Matrix& x) {
  Forward f;
  Matrix h = x;
  for (const Layer& L : net.layers()) {
    if (h.cols() != L.in()) throw DomainError("forward: input width does not match the network");
    Matrix z = h * L.weight.transpose();
    if (L.has_bias()) z.rowwise() += L.bias.transpose();
    Matrix a = L.activation == Activation::relu ? Matrix(z.cwiseMax(0.0)) : z;
    if (L.residual) a += h;
    f.inputs.push_back(std::move(h));
    f.pre.push_back(std::move(z));
    h = std::move(a);
  }
  f.output = std::move(h);
  return f;
}

inline Matrix predict(const MlpNet& net, const Matrix& x) { return forward(net, x).output; }

/// Sum over samples of squared residuals, as in the linear-network loss.
inline double loss(const MlpNet& net, const Dataset& data) {
  return (predict(net, data.inputs) - data.targets).squaredNorm();
}

/// Sum-of-squares loss divided by the sample count.
inline double mean_loss(const MlpNet& net, const Dataset& data) {
  return loss(net, data) / static_cast<double>(data.samples());
}

/// Fraction of samples whose output sign disagrees with the target sign
/// (single-output classification with targets +-1).
inline double error_rate(const MlpNet& net, const Dataset& data) {
  const Matrix out = predict(net, data.inputs);
  Eigen::Index wrong = 0;
  for (Eigen::Index i = 0; i < out.rows(); ++i) wrong += (out(i, 0) >= 0.0) != (data.targets(i, 0) >= 0.0);
  return static_cast<double>(wrong) / static_cast<double>(out.rows());
}

struct Gradients {
  std::vector<Matrix> weight;
  std::vector<Vector> bias;  // empty entries for bias-free layers
};

/// Reverse-mode gradient of the sum-of-squares loss.
inline Gradients backprop(const MlpNet& net, const Dataset& data) {
  const Forward f = forward(net, data.inputs);
  Gradients g;
  g.weight.resize(static_cast<std::size_t>(net.depth()));
  g.bias.resize(static_cast<std::size_t>(net.depth()));
  Matrix delta = 2.0 * (f.output - data.targets);  // dL/d(layer output)
  for (int l = net.depth() - 1; l >= 0; --l) {
    const Layer& L = net.layer(l);
    const auto sl = static_cast<std::size_t>(l);
    Matrix dz = delta;
    if (L.activation == Activation::relu) dz = dz.cwiseProduct((f.pre[sl].array() > 0.0).cast<double>().matrix());
    g.weight[sl] = dz.transpose() * f.inputs[sl];
    if (L.has_bias()) g.bias[sl] = dz.colwise().sum().transpose();
    Matrix next = dz * L.weight;
    if (L.residual) next += delta;
    delta = std::move(next);
  }
  return g;
}

inline MlpNet gd_step(const MlpNet& net, const Gradients& g, const GdConfig& cfg) {
  MlpNet out = net;
  for (int l = 0; l < net.depth(); ++l) {
    Layer& L = out.layer(l);
    const auto sl = static_cast<std::size_t>(l);
    L.weight = (1.0 - cfg.eta * cfg.lambda) * net.layer(l).weight - cfg.eta * g.weight[sl];
    if (L.has_bias()) L.bias = (1.0 - cfg.eta * cfg.lambda) * net.layer(l).bias - cfg.eta * g.bias[sl];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training

struct InitSnapshot {
  MlpNet weights;
  std::uint64_t seed = 0;
};

struct TrainConfig {
  GdConfig gd{0.01, 0.0, 1000};
  double tol = 1e-3;  // stop once the mean loss drops below tol
  double divergence = 1e6;

  void validate(int depth) const {
    gd.validate(depth);
    if (!(tol > 0.0)) throw DomainError("TrainConfig: tol must be positive");
  }
};

struct TrainResult {
  MlpNet model;
  InitSnapshot snapshot;
  std::vector<double> loss_trace;  // mean loss before each step and at the end
  int steps = 0;
  bool reached_tol = false;
};

/// Full-batch gradient descent from `init` until the mean loss is below
/// cfg.tol or cfg.gd.steps steps have run.
inline TrainResult train(const MlpNet& init, const Dataset& data, const TrainConfig& cfg, std::uint64_t seed) {
  cfg.validate(1);
  TrainResult r;
  r.snapshot = {init, seed};
  r.model = init;
  for (int s = 0;; ++s) {
    const double l = mean_loss(r.model, data);
    if (!std::isfinite(l) || l > cfg.divergence) throw TrainingDiverged(static_cast<std::size_t>(s), l);
    r.loss_trace.push_back(l);
    if (l < cfg.tol) {
      r.reached_tol = true;
      break;
    }
    if (s == cfg.gd.steps) break;
    r.model = gd_step(r.model, backprop(r.model, data), cfg.gd);
    r.steps = s + 1;
  }
  return r;
}

// ---------------------------------------------------------------------------
// Layer sensitivity

inline MlpNet reset_layer(const MlpNet& model, const InitSnapshot& snapshot, int k) {
  model.check_index(k);
  snapshot.weights.check_index(k);
  MlpNet out = model;
  const Layer& src = snapshot.weights.layer(k);
  if (src.weight.rows() != out.layer(k).weight.rows() || src.weight.cols() != out.layer(k).weight.cols())
    throw DomainError("reset_layer: snapshot does not match the model");
  out.layer(k).weight = src.weight;
  out.layer(k).bias = src.bias;
  return out;
}

/// Layer k redrawn from the init distribution (bias back to zero).
inline MlpNet rerandomize_layer(const MlpNet& model, int k, Rng& rng) {
  model.check_index(k);
  MlpNet out = model;
  Layer& L = out.layer(k);
  L.weight = init_weight(L.out(), L.in(), L.activation, rng);
  if (L.has_bias()) L.bias.setZero();
  return out;
}

struct LayerSensitivity {
  double reset_loss = 0.0;  // mean-loss increase after reset to init
  double reset_error = 0.0;  // error-rate increase after reset
  double rerandom_loss_mean = 0.0;
  double rerandom_loss_std = 0.0;
  double rerandom_error_mean = 0.0;
  double rerandom_error_std = 0.0;
};

struct SensitivityProfile {
  double baseline_loss = 0.0;
  double baseline_error = 0.0;
  int repeats = 0;
  std::vector<LayerSensitivity> layers;
};

namespace detail {

inline void mean_std(const std::vector<double>& v, double& mean, double& sd) {
  mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double s = 0.0;
  for (double x : v) s += (x - mean) * (x - mean);
  sd = v.size() > 1 ? std::sqrt(s / static_cast<double>(v.size() - 1)) : 0.0;
}

}  // namespace detail

/// Degradation of test metrics when each layer alone is reset to its
/// initial value or redrawn (`repeats` redraws, job seeds seed + index).
inline SensitivityProfile sensitivity_profile(const MlpNet& model, const InitSnapshot& snapshot, const Dataset& test,
                                              int repeats, std::uint64_t seed) {
  if (repeats < 1) throw DomainError("sensitivity_profile: repeats must be positive");
  SensitivityProfile p;
  p.repeats = repeats;
  p.baseline_loss = mean_loss(model, test);
  p.baseline_error = error_rate(model, test);
  for (int k = 0; k < model.depth(); ++k) {
    LayerSensitivity s;
    const MlpNet reset = reset_layer(model, snapshot, k);
    s.reset_loss = mean_loss(reset, test) - p.baseline_loss;
    s.reset_error = error_rate(reset, test) - p.baseline_error;
    std::vector<double> dl, de;
    for (int r = 0; r < repeats; ++r) {
      Rng rng(seed + static_cast<std::uint64_t>(k * repeats + r));
      const MlpNet redrawn = rerandomize_layer(model, k, rng);
      dl.push_back(mean_loss(redrawn, test) - p.baseline_loss);
      de.push_back(error_rate(redrawn, test) - p.baseline_error);
    }
    detail::mean_std(dl, s.rerandom_loss_mean, s.rerandom_loss_std);
    detail::mean_std(de, s.rerandom_error_mean, s.rerandom_error_std);
    p.layers.push_back(s);
  }
  return p;
}

/// Mean re-randomization loss degradation over the bottom and top thirds
/// of the layers (first and last ceil(L/3) layers).
struct ThirdsSummary {
  double bottom = 0.0;
  double top = 0.0;
};

inline ThirdsSummary thirds(const std::vector<double>& per_layer) {
  const int n = static_cast<int>(per_layer.size());
  if (n < 2) throw DomainError("thirds: needs at least two layers");
  const int k = std::max(1, (n + 2) / 3);
  ThirdsSummary t;
  for (int i = 0; i < k; ++i) {
    t.bottom += per_layer[static_cast<std::size_t>(i)] / k;
    t.top += per_layer[static_cast<std::size_t>(n - 1 - i)] / k;
  }
  return t;
}

/// max / min of the per-layer degradations (infinite when the minimum is
/// not positive).
inline double flatness(const std::vector<double>& per_layer) {
  const auto [lo, hi] = std::minmax_element(per_layer.begin(), per_layer.end());
  return *lo > 0.0 ? *hi / *lo : std::numeric_limits<double>::infinity();
}

// ---------------------------------------------------------------------------
// Mixture task

struct MixtureTask {
  Dataset train;
  Dataset test;
};

struct MixtureConfig {
  int dim = 10;
  int train = 500;
  int test = 500;
  int clusters_per_class = 3;
  double center_scale = 1.0;  // centers ~ N(0, center_scale^2 I)
  double spread = 0.25;       // points ~ center + N(0, spread^2 I)

  void validate() const {
    if (dim < 1 || train < 2 || test < 1 || clusters_per_class < 1)
      throw DomainError("MixtureConfig: sizes must be positive (train >= 2)");
    if (!(center_scale > 0.0) || !(spread > 0.0)) throw DomainError("MixtureConfig: scales must be positive");
  }
};

/// Two classes (targets +1 / -1), each a Gaussian mixture; samples
/// alternate between classes and draw a cluster uniformly.
inline MixtureTask mixture_task(const MixtureConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  const int clusters = 2 * cfg.clusters_per_class;
  const Matrix centers = rng.normal_matrix(clusters, cfg.dim, cfg.center_scale);
  auto draw = [&](int count) {
    Matrix x(count, cfg.dim), y(count, 1);
    for (int i = 0; i < count; ++i) {
      const int cls = i % 2;
      const int c = cls * cfg.clusters_per_class +
                    std::min(cfg.clusters_per_class - 1, static_cast<int>(rng.uniform() * cfg.clusters_per_class));
      x.row(i) = centers.row(c) + rng.normal_matrix(1, cfg.dim, cfg.spread);
      y(i, 0) = cls == 0 ? 1.0 : -1.0;
    }
    return Dataset(x, y);
  };
  MixtureTask t;
  t.train = draw(cfg.train);
  t.test = draw(cfg.test);
  return t;
}

// ---------------------------------------------------------------------------
// Probability vs complexity

enum class ComplexityMeasure { end_to_end, path_length };

struct ComplexityRun {
  std::uint64_t seed = 0;
  bool converged = false;
  double complexity = 0.0;  // meaningful only when converged
  double test_error = 0.0;  // mean squared error on held-out inputs
  int steps = 0;
};

struct ProbStudyConfig {
  int dim = 4;           // d = k
  int samples = 2;       // m < d: underdetermined
  int test_samples = 50;
  int depth = 3;
  double init_scale = 0.3;  // W_e(0) = I + init_scale * G, factored by balanced_init
  double eta = 0.01;
  int max_steps = 20000;
  double tol = 1e-10;  // training loss at which a run counts as converged
  int runs = 500;
  int bins = 8;
  ComplexityMeasure measure = ComplexityMeasure::end_to_end;

  void validate() const {
    if (dim < 1 || samples < 1 || test_samples < 1) throw DomainError("ProbStudyConfig: sizes must be positive");
    if (depth < 1) throw DomainError("ProbStudyConfig: depth must be positive");
    if (!(init_scale >= 0.0)) throw DomainError("ProbStudyConfig: init_scale must be nonnegative");
    if (!(eta > 0.0)) throw DomainError("ProbStudyConfig: eta must be positive");
    if (max_steps < 1 || runs < 1 || bins < 1) throw DomainError("ProbStudyConfig: counts must be positive");
    if (!(tol > 0.0)) throw DomainError("ProbStudyConfig: tol must be positive");
  }
};

struct Histogram {
  double lo = 0.0;
  double width = 0.0;
  std::vector<int> counts;

  double center(int b) const { return lo + (b + 0.5) * width; }
};

struct ProbStudy {
  std::vector<ComplexityRun> runs;
  Histogram histogram;
  int converged = 0;
  int populated_bins = 0;
  complexity::LineFit fit;  // log(relative frequency) against bin centre
  bool degenerate = false;  // fewer than two populated bins
};

/// Shared teacher task: Y = X T^T with m < d training inputs.
struct LinearTask {
  Dataset train;
  Matrix test_inputs;
  Matrix teacher;
};

inline LinearTask linear_task(const ProbStudyConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  LinearTask t;
  t.teacher = Matrix::Identity(cfg.dim, cfg.dim) + 0.5 * rng.normal_matrix(cfg.dim, cfg.dim);
  const Matrix x = rng.normal_matrix(cfg.samples, cfg.dim);
  t.train = Dataset(x, x * t.teacher.transpose());
  t.test_inputs = rng.normal_matrix(cfg.test_samples, cfg.dim);
  return t;
}

/// One replica: balanced depth-N net from a random end-to-end start,
/// trained by layerwise descent until the loss is below tol.
inline ComplexityRun complexity_run(const LinearTask& task, const ProbStudyConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  const Matrix w0 = Matrix::Identity(cfg.dim, cfg.dim) + cfg.init_scale * rng.normal_matrix(cfg.dim, cfg.dim);
  linear_net::LinearNet net = linear_net::balanced_init(w0, cfg.depth);
  const GdConfig gd{cfg.eta, 0.0, 1};
  ComplexityRun run;
  run.seed = seed;
  double path = 0.0;
  for (int s = 0; s <= cfg.max_steps; ++s) {
    const double l = linear_net::loss(net, task.train);
    if (!std::isfinite(l) || l > 1e6) break;
    if (l < cfg.tol) {
      run.converged = true;
      run.steps = s;
      break;
    }
    if (s == cfg.max_steps) break;
    linear_net::LinearNet next = linear_net::gd_step_layers(net, task.train, gd);
    for (int j = 0; j < net.depth(); ++j) path += (next.layer(j) - net.layer(j)).norm();
    net = std::move(next);
  }
  if (!run.converged) return run;
  const Matrix we = linear_net::end_to_end(net);
  const Matrix diff = task.test_inputs * (we - task.teacher).transpose();
  run.test_error = diff.squaredNorm() / static_cast<double>(task.test_inputs.rows());
  if (cfg.measure == ComplexityMeasure::path_length) {
    run.complexity = path;
  } else {
    try {
      run.complexity = linear_net::net_complexity(we);
    } catch (const DomainError&) {
      run.converged = false;  // orientation-reversing or singular: out of scope
    }
  }
  return run;
}

/// Equal-width bins over [min C, max C] of the converged runs. Runs whose
/// complexities agree to kSameMinimum (relative) share one zero-width bin.
inline constexpr double kSameMinimum = 1e-6;

inline Histogram bin_runs(const std::vector<ComplexityRun>& runs, int bins) {
  Histogram h;
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (const ComplexityRun& r : runs)
    if (r.converged) {
      lo = std::min(lo, r.complexity);
      hi = std::max(hi, r.complexity);
    }
  if (!(lo <= hi)) return h;
  h.lo = lo;
  if (hi - lo <= kSameMinimum * std::max(1.0, std::abs(hi))) {
    h.counts = {0};
    for (const ComplexityRun& r : runs) h.counts[0] += r.converged;
    return h;
  }
  h.width = (hi - lo) / bins;
  h.counts.assign(static_cast<std::size_t>(bins), 0);
  for (const ComplexityRun& r : runs) {
    if (!r.converged) continue;
    const int b = std::min(bins - 1, static_cast<int>((r.complexity - lo) / h.width));
    ++h.counts[static_cast<std::size_t>(b)];
  }
  return h;
}

inline void fit_histogram(ProbStudy& s) {
  std::vector<double> c, logf;
  for (int b = 0; b < static_cast<int>(s.histogram.counts.size()); ++b) {
    const int n = s.histogram.counts[static_cast<std::size_t>(b)];
    if (n == 0) continue;
    c.push_back(s.histogram.center(b));
    logf.push_back(std::log(static_cast<double>(n) / s.converged));
  }
  s.populated_bins = static_cast<int>(c.size());
  s.degenerate = s.populated_bins < 2;
  if (!s.degenerate) s.fit = complexity::fit_line(c, logf);
}

inline constexpr int kMinConvergedRuns = 50;

/// R replicas with seeds seed + index on one shared task (task seed = seed).
inline ProbStudy prob_complexity_study(const ProbStudyConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const LinearTask task = linear_task(cfg, seed);
  ProbStudy s;
  for (int r = 0; r < cfg.runs; ++r) {
    s.runs.push_back(complexity_run(task, cfg, seed + 1 + static_cast<std::uint64_t>(r)));
    s.converged += s.runs.back().converged;
  }
  if (s.converged < kMinConvergedRuns)
    throw InsufficientData("prob_complexity_study: only " + std::to_string(s.converged) + " of " +
                           std::to_string(cfg.runs) + " runs converged (need " + std::to_string(kMinConvergedRuns) + ")");
  s.histogram = bin_runs(s.runs, cfg.bins);
  fit_histogram(s);
  return s;
}

// ---------------------------------------------------------------------------
// Layerwise vs end-to-end

/// ||end_to_end(net_k) - W_k||_F for k = 0..steps, with net_0 =
/// balanced_init(We0, N) under layerwise descent and W_0 = We0 under the
/// induced end-to-end update.
inline std::vector<double> trajectory_compare(const Matrix& we0, const Dataset& data, const GdConfig& cfg, int depth,
                                              int steps) {
  cfg.validate(depth);
  linear_net::LinearNet net = linear_net::balanced_init(we0, depth);
  Matrix we = we0;
  std::vector<double> curve;
  curve.reserve(static_cast<std::size_t>(steps) + 1);
  curve.push_back((linear_net::end_to_end(net) - we).norm());
  for (int s = 0; s < steps; ++s) {
    net = linear_net::gd_step_layers(net, data, cfg);
    we = linear_net::gd_step_end_to_end(we, data, cfg, depth);
    curve.push_back((linear_net::end_to_end(net) - we).norm());
  }
  return curve;
}

}  // namespace geolab::experiments
