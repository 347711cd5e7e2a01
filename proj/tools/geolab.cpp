// geolab run <config.json> [--seed N] [--out DIR]
// geolab report <DIR>
//
// Exit codes: 0 success, 2 configuration error, 3 numerical failure.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"

#include "geolab/harness.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitNumerical = 3;

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw geolab::ConfigError("cannot read config file \"" + path + "\"");
  std::ostringstream s;
  s << f.rdbuf();
  return s.str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"geolab: seeded geometry-of-learning experiments"};
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  CLI::App* run = app.add_subcommand("run", "Run one experiment from a JSON config");
  run->add_option("config", config_path, "Experiment config (JSON)")->required();
  run->add_option("--seed", seed, "Seed override (beats GEOLAB_SEED and the config)");
  run->add_option("--out", out_dir, "Output directory override");

  std::string report_dir;
  CLI::App* report = app.add_subcommand("report", "Summarize every run under a directory");
  report->add_option("dir", report_dir, "Directory holding run outputs")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*run) {
      geolab::harness::ExperimentConfig cfg = geolab::harness::parse_config(slurp(config_path));
      const geolab::harness::SeedChoice choice =
          geolab::harness::resolve_seed(cfg.seed, seed, std::getenv("GEOLAB_SEED"));
      cfg.seed = choice.seed;
      if (!out_dir.empty()) cfg.output_dir = out_dir;
      const geolab::harness::RunRecord rec = geolab::harness::run(cfg, choice);
      std::cout << rec.directory.string() << "\n";
    } else {
      const auto rows = geolab::harness::report(report_dir);
      std::cout << rows.size() << " run(s) summarized in " << report_dir << "\n";
    }
  } catch (const geolab::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const geolab::NumericalFailure& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return kExitOk;
}
