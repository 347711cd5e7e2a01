#pragma once

// Experiment configuration, seeded dispatch to the study modules, artifact
// emission and run aggregation. All file-system writes live here.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "geolab/complexity_geometry.hpp"
#include "geolab/errors.hpp"
#include "geolab/experiments.hpp"
#include "geolab/io.hpp"
#include "geolab/lddmm.hpp"
#include "geolab/linear_net.hpp"

namespace geolab::harness {

using nlohmann::json;
namespace fs = std::filesystem;

inline constexpr const char* kToolVersion = "0.1.0";
inline const std::vector<std::string> kKinds{"lin-dyn", "lddmm", "curvature", "complexity", "sensitivity", "prob-study"};

struct ExperimentConfig {
  std::string kind;
  std::uint64_t seed = 1;
  std::string output_dir = "out";
  json params = json::object();  // every parameter, defaults filled

  friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;
};

// ---------------------------------------------------------------------------
// Parameter reading

namespace detail {

inline std::string show(const json& v) { return v.dump(); }

/// Reads a parameter block, filling defaults, and remembers which keys it
/// consumed so leftovers can be reported.
class Params {
 public:
  explicit Params(const json& in) : in_(in) {
    if (!in_.is_object()) throw ConfigError("params must be a JSON object");
  }

  double real(const std::string& key, double def) {
    const json* v = find(key);
    double x = def;
    if (v) {
      if (!v->is_number()) throw ConfigError("params." + key + " must be a number (got " + show(*v) + ")");
      x = v->get<double>();
    }
    out_[key] = x;
    return x;
  }

  int integer(const std::string& key, int def) {
    const json* v = find(key);
    std::int64_t x = def;
    if (v) {
      if (!v->is_number_integer()) throw ConfigError("params." + key + " must be an integer (got " + show(*v) + ")");
      x = v->get<std::int64_t>();
      if (x < -1'000'000'000 || x > 1'000'000'000)
        throw ConfigError("params." + key + " must lie in [-1e9, 1e9] (got " + show(*v) + ")");
    }
    out_[key] = x;
    return static_cast<int>(x);
  }

  bool boolean(const std::string& key, bool def) {
    const json* v = find(key);
    bool x = def;
    if (v) {
      if (!v->is_boolean()) throw ConfigError("params." + key + " must be true or false (got " + show(*v) + ")");
      x = v->get<bool>();
    }
    out_[key] = x;
    return x;
  }

  std::string choice(const std::string& key, const std::string& def, const std::vector<std::string>& allowed) {
    const json* v = find(key);
    std::string x = def;
    if (v) {
      if (!v->is_string()) throw ConfigError("params." + key + " must be a string (got " + show(*v) + ")");
      x = v->get<std::string>();
    }
    if (!allowed.empty() && std::find(allowed.begin(), allowed.end(), x) == allowed.end()) {
      std::string list;
      for (const auto& a : allowed) list += (list.empty() ? "" : ", ") + a;
      throw ConfigError("params." + key + " must be one of {" + list + "} (got \"" + x + "\")");
    }
    out_[key] = x;
    return x;
  }

  std::vector<std::string> strings(const std::string& key) {
    const json* v = find(key);
    std::vector<std::string> x;
    if (v) {
      if (!v->is_array()) throw ConfigError("params." + key + " must be an array of strings");
      for (const json& e : *v) {
        if (!e.is_string()) throw ConfigError("params." + key + " must be an array of strings");
        x.push_back(e.get<std::string>());
      }
    }
    out_[key] = x;
    return x;
  }

  /// Throws naming the field and its bound unless `ok`.
  void require(bool ok, const std::string& key, const std::string& bound) const {
    if (!ok) throw ConfigError("params." + key + " must be " + bound + " (got " + show(out_.at(key)) + ")");
  }

  json finish() const {
    for (auto it = in_.begin(); it != in_.end(); ++it)
      if (!out_.contains(it.key())) throw ConfigError("unknown parameter \"" + it.key() + "\"");
    return out_;
  }

 private:
  const json* find(const std::string& key) const {
    auto it = in_.find(key);
    return it == in_.end() ? nullptr : &*it;
  }

  const json& in_;
  json out_ = json::object();
};

/// Module preconditions re-checked at parse time; their DomainError
/// becomes a configuration error.
template <class Fn>
void module_check(Fn&& fn) {
  try {
    fn();
  } catch (const DomainError& e) {
    throw ConfigError(std::string("invalid parameters: ") + e.what());
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Per-kind parameter blocks

struct LinDynParams {
  int dim, samples, depth, steps;
  double eta, lambda, init_scale, noise;

  static LinDynParams read(detail::Params& p) {
    LinDynParams r;
    r.dim = p.integer("dim", 4);
    p.require(r.dim >= 1 && r.dim <= 64, "dim", "in [1, 64]");
    r.samples = p.integer("samples", 8);
    p.require(r.samples >= 1, "samples", ">= 1");
    r.depth = p.integer("depth", 3);
    p.require(r.depth >= 1 && r.depth <= 16, "depth", "in [1, 16]");
    r.eta = p.real("eta", 1e-3);
    r.lambda = p.real("lambda", 0.0);
    r.steps = p.integer("steps", 400);
    r.init_scale = p.real("init_scale", 0.2);
    p.require(r.init_scale >= 0.0, "init_scale", ">= 0");
    r.noise = p.real("noise", 0.1);
    p.require(r.noise >= 0.0, "noise", ">= 0");
    detail::module_check([&] { linear_net::GdConfig{r.eta, r.lambda, r.steps}.validate(r.depth); });
    return r;
  }
};

struct LddmmParams {
  std::string pair, source, target;
  int dims, nx, ny;
  double spacing, shift, width;
  lddmm::RegConfig reg;

  static LddmmParams read(detail::Params& p) {
    LddmmParams r;
    r.pair = p.choice("pair", "shift", {"shift", "identity", "files"});
    r.source = p.choice("source", "", {});
    r.target = p.choice("target", "", {});
    if (r.pair == "files" && (r.source.empty() || r.target.empty()))
      throw ConfigError("params.source and params.target are required when pair is \"files\"");
    r.dims = p.integer("dims", 1);
    p.require(r.dims == 1 || r.dims == 2, "dims", "1 or 2");
    r.nx = p.integer("nx", 64);
    p.require(r.nx >= 8 && r.nx <= 128, "nx", "in [8, 128]");
    r.ny = p.integer("ny", r.dims == 1 ? 1 : r.nx);
    p.require(r.dims == 1 ? r.ny == 1 : (r.ny >= 8 && r.ny <= 128), "ny", r.dims == 1 ? "1 for 1D grids" : "in [8, 128]");
    r.spacing = p.real("spacing", 1.0);
    p.require(r.spacing > 0.0, "spacing", "> 0");
    r.shift = p.real("shift", 1.5);
    r.width = p.real("width", 5.0);
    p.require(r.width > 0.0, "width", "> 0");
    r.reg.beta = p.real("beta", 1000.0);
    r.reg.sigma = p.real("sigma", 8.0);
    r.reg.timesteps = p.integer("timesteps", 16);
    r.reg.eta = p.real("eta", 0.5);
    r.reg.max_iters = p.integer("max_iters", 500);
    r.reg.tol = p.real("tol", 1e-6);
    r.reg.max_halvings = p.integer("max_halvings", 20);
    p.require(r.reg.max_halvings >= 0, "max_halvings", ">= 0");
    detail::module_check([&] { r.reg.validate(); });
    return r;
  }

  lddmm::Grid grid() const {
    return dims == 1 ? lddmm::Grid(nx, spacing) : lddmm::Grid(nx, ny, spacing, spacing);
  }

  /// Source bump centre; the target sits `shift` further along x.
  std::array<double, 2> centre() const {
    return {((nx - 1) * spacing - shift) / 2.0, dims == 1 ? 0.0 : (ny - 1) * spacing / 2.0};
  }
};

struct MetricParams {
  int qubits, min_body;
  std::string penalty;
  std::vector<std::string> labels;
  double q;

  static MetricParams read(detail::Params& p) {
    MetricParams r;
    r.qubits = p.integer("qubits", 2);
    p.require(r.qubits == 1 || r.qubits == 2, "qubits", "1 or 2");
    r.penalty = p.choice("penalty", "body", {"body", "labels", "none"});
    r.min_body = p.integer("min_body", r.qubits);
    p.require(r.min_body >= 1 && r.min_body <= r.qubits, "min_body", "in [1, qubits]");
    r.labels = p.strings("labels");
    r.q = p.real("q", 10.0);
    p.require(r.q >= 1.0, "q", ">= 1");
    detail::module_check([&] { r.metric(); });
    return r;
  }

  complexity::PenaltyMetric metric() const {
    if (penalty == "none") return complexity::PenaltyMetric::bi_invariant(qubits);
    if (penalty == "labels") return complexity::PenaltyMetric::penalize(qubits, labels, q);
    return complexity::PenaltyMetric::body_penalty(qubits, min_body, q);
  }
};

struct CurvatureParams {
  MetricParams metric;
  int sections;

  static CurvatureParams read(detail::Params& p) {
    CurvatureParams r;
    r.metric = MetricParams::read(p);
    r.sections = p.integer("sections", 2000);
    p.require(r.sections >= 1 && r.sections <= 1'000'000, "sections", "in [1, 1e6]");
    return r;
  }
};

struct ComplexityParams {
  MetricParams metric;
  std::string target;
  double norm;
  complexity::StateOptions opt;

  static ComplexityParams read(detail::Params& p) {
    ComplexityParams r;
    r.metric = MetricParams::read(p);
    r.target = p.choice("target", "subgroup", {"subgroup", "state"});
    r.norm = p.real("norm", 0.7);
    p.require(r.norm >= 0.0 && r.norm <= 3.0, "norm", "in [0, 3]");
    r.opt.shooting.restarts = p.integer("restarts", 4);
    r.opt.shooting.h = p.real("h", 0.01);
    r.opt.shooting.tol = p.real("tol", 1e-4);
    r.opt.shooting.max_iters = p.integer("max_iters", 60);
    r.opt.fidelity_tol = p.real("fidelity_tol", 1e-6);
    r.opt.descent_iters = p.integer("descent_iters", 60);
    detail::module_check([&] { r.opt.validate(); });
    return r;
  }
};

struct SensitivityParams {
  experiments::MixtureConfig task;
  int layers, width, max_steps, repeats, models;
  bool residual;
  double eta, tol;

  static SensitivityParams read(detail::Params& p) {
    SensitivityParams r;
    r.task.dim = p.integer("dim", 10);
    r.task.train = p.integer("train", 500);
    r.task.test = p.integer("test", 500);
    r.task.clusters_per_class = p.integer("clusters_per_class", 3);
    r.task.center_scale = p.real("center_scale", 1.0);
    r.task.spread = p.real("spread", 0.25);
    detail::module_check([&] { r.task.validate(); });
    r.layers = p.integer("layers", 6);
    p.require(r.layers >= 2 && r.layers <= 64, "layers", "in [2, 64]");
    r.width = p.integer("width", 32);
    p.require(r.width >= 1 && r.width <= 1024, "width", "in [1, 1024]");
    r.residual = p.boolean("residual", false);
    r.eta = p.real("eta", 5e-5);
    r.max_steps = p.integer("max_steps", 20000);
    r.tol = p.real("tol", 1e-3);
    r.repeats = p.integer("repeats", 20);
    p.require(r.repeats >= 1, "repeats", ">= 1");
    r.models = p.integer("models", 5);
    p.require(r.models >= 1, "models", ">= 1");
    detail::module_check([&] { r.train_config().validate(r.layers); });
    return r;
  }

  experiments::TrainConfig train_config() const {
    experiments::TrainConfig c;
    c.gd = {eta, 0.0, max_steps};
    c.tol = tol;
    return c;
  }
};

struct ProbParams {
  experiments::ProbStudyConfig cfg;

  static ProbParams read(detail::Params& p) {
    ProbParams r;
    auto& c = r.cfg;
    c.dim = p.integer("dim", c.dim);
    c.samples = p.integer("samples", c.samples);
    c.test_samples = p.integer("test_samples", c.test_samples);
    c.depth = p.integer("depth", c.depth);
    c.init_scale = p.real("init_scale", c.init_scale);
    c.eta = p.real("eta", c.eta);
    c.max_steps = p.integer("max_steps", c.max_steps);
    c.tol = p.real("tol", c.tol);
    c.runs = p.integer("runs", c.runs);
    c.bins = p.integer("bins", c.bins);
    c.measure = p.choice("measure", "end_to_end", {"end_to_end", "path_length"}) == "path_length"
                    ? experiments::ComplexityMeasure::path_length
                    : experiments::ComplexityMeasure::end_to_end;
    detail::module_check([&] { c.validate(); });
    return r;
  }
};

/// Validates and default-fills a parameter block for `kind`.
inline json normalize_params(const std::string& kind, const json& raw) {
  detail::Params p(raw);
  if (kind == "lin-dyn") LinDynParams::read(p);
  else if (kind == "lddmm") LddmmParams::read(p);
  else if (kind == "curvature") CurvatureParams::read(p);
  else if (kind == "complexity") ComplexityParams::read(p);
  else if (kind == "sensitivity") SensitivityParams::read(p);
  else if (kind == "prob-study") ProbParams::read(p);
  else throw ConfigError("unknown experiment kind \"" + kind + "\"");
  return p.finish();
}

// ---------------------------------------------------------------------------
// Configuration

inline ExperimentConfig parse_config(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!doc.is_object()) throw ConfigError("config must be a JSON object");
  for (auto it = doc.begin(); it != doc.end(); ++it) {
    const std::string& k = it.key();
    if (k != "kind" && k != "seed" && k != "output_dir" && k != "params") throw ConfigError("unknown key \"" + k + "\"");
  }
  ExperimentConfig cfg;
  if (!doc.contains("kind") || !doc["kind"].is_string()) throw ConfigError("kind is required and must be a string");
  cfg.kind = doc["kind"].get<std::string>();
  if (std::find(kKinds.begin(), kKinds.end(), cfg.kind) == kKinds.end())
    throw ConfigError("kind must be one of lin-dyn, lddmm, curvature, complexity, sensitivity, prob-study (got \"" +
                      cfg.kind + "\")");
  if (doc.contains("seed")) {
    if (!doc["seed"].is_number_unsigned()) throw ConfigError("seed must be a nonnegative integer (got " + doc["seed"].dump() + ")");
    cfg.seed = doc["seed"].get<std::uint64_t>();
  }
  if (doc.contains("output_dir")) {
    if (!doc["output_dir"].is_string() || doc["output_dir"].get<std::string>().empty())
      throw ConfigError("output_dir must be a nonempty string");
    cfg.output_dir = doc["output_dir"].get<std::string>();
  }
  cfg.params = normalize_params(cfg.kind, doc.contains("params") ? doc["params"] : json::object());
  return cfg;
}

inline json to_json(const ExperimentConfig& cfg) {
  return json{{"kind", cfg.kind}, {"seed", cfg.seed}, {"output_dir", cfg.output_dir}, {"params", cfg.params}};
}

inline std::string emit_config(const ExperimentConfig& cfg) { return to_json(cfg).dump(2) + "\n"; }

/// 64-bit FNV-1a of the canonical (sorted-key, compact) JSON of kind, seed
/// and params. The output directory does not enter the hash.
inline std::string config_hash(const ExperimentConfig& cfg) {
  const std::string canon = json{{"kind", cfg.kind}, {"seed", cfg.seed}, {"params", cfg.params}}.dump();
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : canon) {
    h ^= c;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline std::uint64_t parse_seed(const std::string& s, const std::string& origin) {
  if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos)
    throw ConfigError(origin + " must be a nonnegative integer (got \"" + s + "\")");
  try {
    return std::stoull(s);
  } catch (const std::out_of_range&) {
    throw ConfigError(origin + " is out of range (got \"" + s + "\")");
  }
}

struct SeedChoice {
  std::uint64_t seed = 0;
  std::string source;               // "flag", "env" or "config"
  std::optional<std::string> env;  // raw GEOLAB_SEED when set
};

/// Precedence: --seed flag, then GEOLAB_SEED, then the config.
inline SeedChoice resolve_seed(std::uint64_t config_seed, std::optional<std::uint64_t> flag, const char* env) {
  SeedChoice c{config_seed, "config", std::nullopt};
  if (env) c.env = std::string(env);
  if (c.env) {
    c.seed = parse_seed(*c.env, "GEOLAB_SEED");
    c.source = "env";
  }
  if (flag) {
    c.seed = *flag;
    c.source = "flag";
  }
  return c;
}

// ---------------------------------------------------------------------------
// Running

struct RunRecord {
  std::string config_hash;
  std::string kind;
  fs::path directory;
  json metrics;
  std::vector<std::string> outputs;
};

namespace detail {

class Artifacts {
 public:
  explicit Artifacts(fs::path dir) : dir_(std::move(dir)) {}

  void write(const std::string& name, const std::string& bytes) {
    std::ofstream f(dir_ / name, std::ios::binary | std::ios::trunc);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw std::runtime_error("cannot write " + (dir_ / name).string());
    names_.push_back(name);
  }

  void write_json(const std::string& name, const json& j) { write(name, j.dump(2) + "\n"); }

  std::vector<std::string> names() const {
    std::vector<std::string> n = names_;
    std::sort(n.begin(), n.end());
    return n;
  }

 private:
  fs::path dir_;
  std::vector<std::string> names_;
};

inline std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

inline json run_lin_dyn(const json& params, std::uint64_t seed, Artifacts& out) {
  detail::Params p(params);
  const LinDynParams r = LinDynParams::read(p);
  Rng rng(seed);
  const Matrix x = rng.normal_matrix(r.samples, r.dim);
  const Matrix a = rng.normal_matrix(r.dim, r.dim, 0.5);
  const Matrix y = x * a.transpose() + rng.normal_matrix(r.samples, r.dim, r.noise);
  const linear_net::Dataset data(x, y);
  const Matrix w0 = Matrix::Identity(r.dim, r.dim) + r.init_scale * rng.normal_matrix(r.dim, r.dim);
  const linear_net::GdConfig gd{r.eta, r.lambda, 1};
  const std::vector<double> curve = experiments::trajectory_compare(w0, data, gd, r.depth, r.steps);
  for (double d : curve)
    if (!std::isfinite(d)) throw IntegrationBlowup(0, 0.0);
  io::CsvTable t({"step", "deviation"});
  for (std::size_t k = 0; k < curve.size(); ++k) t.row() << static_cast<int>(k) << curve[k];
  out.write("curve.csv", t.str());
  return json{{"final_deviation", curve.back()},
              {"max_deviation", *std::max_element(curve.begin(), curve.end())},
              {"initial_balancedness_defect", linear_net::balancedness_defect(linear_net::balanced_init(w0, r.depth))},
              {"initial_loss", linear_net::loss_of(w0, data)}};
}

inline std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot read image file \"" + path + "\"");
  std::ostringstream s;
  s << f.rdbuf();
  return s.str();
}

inline json run_lddmm(const json& params, Artifacts& out) {
  detail::Params p(params);
  const LddmmParams r = LddmmParams::read(p);
  lddmm::Image source, target;
  std::optional<std::array<double, 2>> centre;
  if (r.pair == "files") {
    source = io::image_from_csv(read_file(r.source));
    target = io::image_from_csv(read_file(r.target));
  } else {
    const lddmm::Grid g = r.grid();
    centre = r.centre();
    source = lddmm::gaussian_bump(g, *centre, r.width);
    const double dx = r.pair == "shift" ? r.shift : 0.0;
    target = lddmm::gaussian_bump(g, {(*centre)[0] + dx, (*centre)[1]}, r.width);
  }
  if (!(source.grid == target.grid)) throw ConfigError("source and target images must share a grid");
  const lddmm::Registration reg = lddmm::register_images(source, target, r.reg);
  out.write("source.csv", io::image_to_csv(source));
  out.write("target.csv", io::image_to_csv(target));
  out.write("deformed.csv", io::image_to_csv(reg.deformed));
  out.write("source.pgm", io::image_to_pgm(source));
  out.write("target.pgm", io::image_to_pgm(target));
  out.write("deformed.pgm", io::image_to_pgm(reg.deformed));
  json summary = io::registration_json(reg);
  out.write_json("registration.json", summary);
  summary.erase("energy_trace");
  summary["initial_energy"] = reg.energy_trace.front();
  summary["ep_ratio"] = reg.gradient_residual > 0.0 ? reg.ep_residual / reg.gradient_residual : 0.0;
  if (centre) summary["recovered_shift"] = lddmm::apply_map(reg.phi, *centre)[0] - (*centre)[0];
  return summary;
}

inline json run_curvature(const json& params, std::uint64_t seed, Artifacts& out) {
  detail::Params p(params);
  const CurvatureParams r = CurvatureParams::read(p);
  const complexity::PenaltyMetric g = r.metric.metric();
  Rng rng(seed);
  io::CsvTable t({"section", "curvature", "arnold", "certified_negative"});
  int negative = 0, certified = 0;
  double lo = std::numeric_limits<double>::infinity(), hi = -lo, sum = 0.0;
  for (int s = 0; s < r.sections; ++s) {
    const auto [x, y] = complexity::random_section(g, rng);
    const complexity::CurvatureCertificate c = complexity::certify_section(g, x, y);
    negative += c.curvature < 0.0;
    certified += c.negative;
    lo = std::min(lo, c.curvature);
    hi = std::max(hi, c.curvature);
    sum += c.curvature;
    t.row() << s << c.curvature << c.arnold << c.negative;
  }
  out.write("sections.csv", t.str());
  return json{{"sections", r.sections},
              {"negative_fraction", static_cast<double>(negative) / r.sections},
              {"certified_negative", certified},
              {"min_curvature", lo},
              {"max_curvature", hi},
              {"mean_curvature", sum / r.sections}};
}

inline json run_complexity(const json& params, std::uint64_t seed, Artifacts& out) {
  detail::Params p(params);
  ComplexityParams r = ComplexityParams::read(p);
  const complexity::PenaltyMetric g = r.metric.metric();
  r.opt.shooting.seed = seed;
  Rng rng(seed);
  json m;
  complexity::ShootingResult res;
  if (r.target == "subgroup") {
    Vector h = rng.normal_vector(g.dim());
    h *= r.norm / g.norm(h);
    const CMatrix target = complexity::geodesic_shoot(g, h, 1.0, r.opt.shooting.h).endpoint();
    res = complexity::complexity_distance(g, target, r.opt.shooting);
    m["generator_norm"] = r.norm;
  } else {
    const int d = g.basis().matrix_size();
    CVector psi(d);
    for (int i = 0; i < d; ++i) psi(i) = Complex(rng.normal(), rng.normal());
    psi.normalize();
    res = complexity::state_complexity(g, psi, r.opt);
  }
  const complexity::GeodesicPath path = complexity::geodesic_shoot(g, res.omega0, 1.0, r.opt.shooting.h);
  m["distance"] = res.distance;
  m["endpoint_error"] = res.endpoint_error;
  m["converged_shots"] = res.converged_shots;
  m["total_shots"] = res.total_shots;
  m["max_unitarity_defect"] = path.max_unitarity_defect;
  m["max_energy_drift"] = path.max_energy_drift;
  io::CsvTable t({"generator", "omega0"});
  for (int k = 0; k < g.dim(); ++k) t.row() << g.basis().label(k) << res.omega0(k);
  out.write("omega0.csv", t.str());
  return m;
}

struct Pooled {
  double n = 0.0, mean = 0.0, m2 = 0.0;  // m2: sum of squared deviations

  void add(double count, double mean_k, double sd_k) {
    if (count <= 0.0) return;
    const double total = n + count;
    const double delta = mean_k - mean;
    m2 += sd_k * sd_k * (count - 1.0) + delta * delta * n * count / total;
    mean += delta * count / total;
    n = total;
  }
  double sd() const { return n > 1.0 ? std::sqrt(m2 / (n - 1.0)) : 0.0; }
};

inline json run_sensitivity(const json& params, std::uint64_t seed, Artifacts& out) {
  using namespace experiments;
  detail::Params p(params);
  const SensitivityParams r = SensitivityParams::read(p);
  const int layers = r.layers;
  std::vector<Pooled> reset_loss(layers), reset_err(layers), rr_loss(layers), rr_err(layers);
  io::CsvTable per_model({"model", "layer", "mode", "mean_degradation", "std", "repeats"});
  double worst_train = 0.0, baseline = 0.0;
  for (int j = 0; j < r.models; ++j) {
    const std::uint64_t s = seed + static_cast<std::uint64_t>(j);
    const MixtureTask task = mixture_task(r.task, s);
    Rng rng(s);
    const MlpNet init = random_mlp(r.task.dim, rectifier_stack(layers, r.width, 1, r.residual, r.task.dim), true, rng);
    const TrainResult tr = train(init, task.train, r.train_config(), s);
    if (!tr.reached_tol)
      throw NoConvergence("sensitivity: model " + std::to_string(j) + " did not reach training loss " +
                              io::format_double(r.tol) + " in " + std::to_string(r.max_steps) + " steps",
                          tr.loss_trace.back());
    worst_train = std::max(worst_train, tr.loss_trace.back());
    const SensitivityProfile prof = sensitivity_profile(tr.model, tr.snapshot, task.test, r.repeats, s * 1000003ull + 7);
    baseline += prof.baseline_loss / r.models;
    for (int k = 0; k < layers; ++k) {
      const LayerSensitivity& l = prof.layers[static_cast<std::size_t>(k)];
      reset_loss[k].add(1, l.reset_loss, 0.0);
      reset_err[k].add(1, l.reset_error, 0.0);
      rr_loss[k].add(r.repeats, l.rerandom_loss_mean, l.rerandom_loss_std);
      rr_err[k].add(r.repeats, l.rerandom_error_mean, l.rerandom_error_std);
      per_model.row() << j << k << "reset_loss" << l.reset_loss << 0.0 << 1;
      per_model.row() << j << k << "reset_accuracy" << l.reset_error << 0.0 << 1;
      per_model.row() << j << k << "rerandomize_loss" << l.rerandom_loss_mean << l.rerandom_loss_std << r.repeats;
      per_model.row() << j << k << "rerandomize_accuracy" << l.rerandom_error_mean << l.rerandom_error_std << r.repeats;
    }
  }
  io::CsvTable t({"layer", "mode", "mean_degradation", "std", "repeats"});
  std::vector<double> profile;
  auto emit = [&](int k, const char* mode, const Pooled& pool) {
    t.row() << k << mode << pool.mean << pool.sd() << static_cast<int>(pool.n);
  };
  for (int k = 0; k < layers; ++k) {
    emit(k, "reset_loss", reset_loss[k]);
    emit(k, "reset_accuracy", reset_err[k]);
    emit(k, "rerandomize_loss", rr_loss[k]);
    emit(k, "rerandomize_accuracy", rr_err[k]);
    profile.push_back(rr_loss[k].mean);
  }
  out.write("sensitivity.csv", t.str());
  out.write("sensitivity_models.csv", per_model.str());
  const ThirdsSummary th = thirds(profile);
  return json{{"bottom_third", th.bottom},
              {"top_third", th.top},
              {"bottom_exceeds_top", th.bottom > th.top},
              {"flatness", flatness(profile)},
              {"max_train_loss", worst_train},
              {"baseline_test_loss", baseline},
              {"init_scheme", "gaussian, variance 2/fan_in (relu) or 1/fan_in (identity), zero bias"}};
}

inline json run_prob_study(const json& params, std::uint64_t seed, Artifacts& out) {
  detail::Params p(params);
  const ProbParams r = ProbParams::read(p);
  const experiments::ProbStudy s = experiments::prob_complexity_study(r.cfg, seed);
  io::CsvTable runs({"seed", "converged", "C", "test_error", "steps"});
  for (const auto& run : s.runs) runs.row() << run.seed << run.converged << run.complexity << run.test_error << run.steps;
  out.write("runs.csv", runs.str());
  io::CsvTable hist({"bin", "center", "count", "frequency"});
  for (int b = 0; b < static_cast<int>(s.histogram.counts.size()); ++b) {
    const int n = s.histogram.counts[static_cast<std::size_t>(b)];
    hist.row() << b << s.histogram.center(b) << n << static_cast<double>(n) / s.converged;
  }
  out.write("histogram.csv", hist.str());
  json fit{{"slope", s.fit.slope},
           {"intercept", s.fit.intercept},
           {"r2", s.fit.r2},
           {"bins", static_cast<int>(s.histogram.counts.size())},
           {"bin_width", s.histogram.width},
           {"populated_bins", s.populated_bins},
           {"degenerate", s.degenerate},
           {"converged", s.converged},
           {"runs", r.cfg.runs}};
  out.write_json("fit.json", fit);
  return fit;
}

inline json dispatch(const ExperimentConfig& cfg, Artifacts& out) {
  if (cfg.kind == "lin-dyn") return run_lin_dyn(cfg.params, cfg.seed, out);
  if (cfg.kind == "lddmm") return run_lddmm(cfg.params, out);
  if (cfg.kind == "curvature") return run_curvature(cfg.params, cfg.seed, out);
  if (cfg.kind == "complexity") return run_complexity(cfg.params, cfg.seed, out);
  if (cfg.kind == "sensitivity") return run_sensitivity(cfg.params, cfg.seed, out);
  if (cfg.kind == "prob-study") return run_prob_study(cfg.params, cfg.seed, out);
  throw ConfigError("unknown experiment kind \"" + cfg.kind + "\"");
}

}  // namespace detail

inline fs::path run_directory(const ExperimentConfig& cfg) {
  return fs::path(cfg.output_dir) / (cfg.kind + "_" + config_hash(cfg));
}

/// Runs `cfg` into <output_dir>/<kind>_<hash>/. Artifacts are staged in a
/// sibling ".partial" directory that is renamed on success and removed on
/// failure. A DomainError raised by a module after parsing is reported as
/// a NumericalFailure.
inline RunRecord run(const ExperimentConfig& cfg, const SeedChoice& seed_choice) {
  const fs::path final_dir = run_directory(cfg);
  const fs::path staging = final_dir.string() + ".partial";
  fs::remove_all(staging);
  fs::create_directories(staging);
  RunRecord rec;
  rec.kind = cfg.kind;
  rec.config_hash = config_hash(cfg);
  rec.directory = final_dir;
  try {
    const std::string started = detail::utc_now();
    detail::Artifacts out(staging);
    try {
      rec.metrics = detail::dispatch(cfg, out);
    } catch (const DomainError& e) {
      throw NumericalFailure(std::string("numerical failure: ") + e.what());
    }
    out.write_json("metrics.json", rec.metrics);
    // output_dir is placement, not identity; the run record keeps it.
    json echo = to_json(cfg);
    echo.erase("output_dir");
    out.write("config.json", echo.dump(2) + "\n");
    rec.outputs = out.names();
    rec.outputs.push_back("run_record.json");
    std::sort(rec.outputs.begin(), rec.outputs.end());
    json record{{"config_hash", rec.config_hash},
                {"kind", cfg.kind},
                {"tool_version", kToolVersion},
                {"started_at", started},
                {"finished_at", detail::utc_now()},
                {"seed", cfg.seed},
                {"seed_source", seed_choice.source},
                {"geolab_seed_env", seed_choice.env ? json(*seed_choice.env) : json(nullptr)},
                {"config", to_json(cfg)},
                {"metrics", rec.metrics},
                {"outputs", rec.outputs}};
    out.write_json("run_record.json", record);
    fs::remove_all(final_dir);
    fs::rename(staging, final_dir);
  } catch (...) {
    std::error_code ec;
    fs::remove_all(staging, ec);
    throw;
  }
  return rec;
}

inline RunRecord run(const ExperimentConfig& cfg) { return run(cfg, SeedChoice{cfg.seed, "config", std::nullopt}); }

// ---------------------------------------------------------------------------
// Report

struct ReportRow {
  std::string kind, config_hash, directory;
  std::uint64_t seed = 0;
  json metrics;
};

inline std::string metric_text(const json& v) {
  if (v.is_number_float()) return io::format_double(v.get<double>());
  if (v.is_string()) return v.get<std::string>();
  return v.dump();
}

/// Aggregates every run record directly under `dir` into summary.csv and
/// summary.txt (rows grouped by kind, then sorted by config hash).
inline std::vector<ReportRow> report(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw ConfigError("report: \"" + dir.string() + "\" is not a directory");
  std::vector<ReportRow> rows;
  for (const auto& entry : fs::directory_iterator(dir)) {
    const fs::path rec = entry.path() / "run_record.json";
    if (!entry.is_directory() || !fs::exists(rec)) continue;
    std::ifstream f(rec);
    json j;
    try {
      j = json::parse(f);
    } catch (const json::parse_error& e) {
      throw ConfigError("report: unreadable run record " + rec.string() + ": " + e.what());
    }
    rows.push_back({j.at("kind").get<std::string>(), j.at("config_hash").get<std::string>(),
                    entry.path().filename().string(), j.at("seed").get<std::uint64_t>(), j.at("metrics")});
  }
  if (rows.empty()) throw ConfigError("report: no run records found in \"" + dir.string() + "\"");
  std::sort(rows.begin(), rows.end(), [](const ReportRow& a, const ReportRow& b) {
    return std::tie(a.kind, a.config_hash, a.directory) < std::tie(b.kind, b.config_hash, b.directory);
  });

  io::CsvTable csv({"kind", "config_hash", "seed", "metric", "value"});
  std::string txt;
  std::string kind;
  for (const ReportRow& r : rows) {
    if (r.kind != kind) {
      kind = r.kind;
      txt += (txt.empty() ? "" : "\n") + std::string("[") + kind + "]\n";
    }
    txt += r.config_hash + "  seed=" + std::to_string(r.seed) + "\n";
    for (auto it = r.metrics.begin(); it != r.metrics.end(); ++it) {
      csv.row() << r.kind << r.config_hash << r.seed << it.key() << metric_text(it.value());
      txt += "    " + it.key() + " = " + metric_text(it.value()) + "\n";
    }
  }
  detail::Artifacts out(dir);
  out.write("summary.csv", csv.str());
  out.write("summary.txt", txt);
  return rows;
}

}  // namespace geolab::harness
