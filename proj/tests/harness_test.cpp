#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "geolab/harness.hpp"

using namespace geolab;
using namespace geolab::harness;

namespace {

std::string read_bytes(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream s;
  s << f.rdbuf();
  return s.str();
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream f(p, std::ios::binary);
  f << text;
}

// Fresh scratch directory per test.
class Scratch : public ::testing::Test {
 protected:
  void SetUp() override {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    dir_ = fs::temp_directory_path() / (std::string("geolab_") + info->test_suite_name() + "_" + info->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  ExperimentConfig config(const std::string& text) {
    ExperimentConfig c = parse_config(text);
    c.output_dir = (dir_ / "out").string();
    return c;
  }

  int cli(const std::string& args, const std::string& env = "") {
    const std::string cmd = "cd '" + dir_.string() + "' && " + env + " '" + GEOLAB_CLI_PATH + "' " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  }

  fs::path dir_;
};

const char* kLinDyn = R"({"kind": "lin-dyn", "seed": 3, "params": {"depth": 1}})";

}  // namespace

TEST(ParseConfig, MinimalConfigFillsDefaults) {
  const ExperimentConfig c = parse_config(R"({"kind": "lin-dyn"})");
  EXPECT_EQ(c.kind, "lin-dyn");
  EXPECT_EQ(c.seed, 1u);
  EXPECT_EQ(c.output_dir, "out");
  EXPECT_EQ(c.params.at("depth"), 3);
  EXPECT_EQ(c.params.at("eta"), 1e-3);
  EXPECT_EQ(c.params.at("steps"), 400);
}

TEST(ParseConfig, UnknownKeysAreNamed) {
  try {
    parse_config(R"({"kind": "lin-dyn", "params": {"etaa": 0.1}})");
    FAIL() << "expected a config error";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("etaa"), std::string::npos) << e.what();
  }
  try {
    parse_config(R"({"kind": "lin-dyn", "sed": 4})");
    FAIL() << "expected a config error";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("sed"), std::string::npos) << e.what();
  }
}

TEST(ParseConfig, ConstraintViolationsNameFieldAndBound) {
  try {
    parse_config(R"({"kind": "prob-study", "params": {"depth": 0}})");
    FAIL() << "expected a config error";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("depth"), std::string::npos) << e.what();
  }
  try {
    parse_config(R"({"kind": "curvature", "params": {"q": 0.5}})");
    FAIL() << "expected a config error";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("params.q must be >= 1"), std::string::npos) << e.what();
  }
  EXPECT_THROW(parse_config(R"({"kind": "lddmm", "params": {"sigma": 0.1}})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"kind": "lin-dyn", "params": {"steps": 2.5}})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"kind": "lin-dyn", "seed": -1})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"kind": "warp-drive"})"), ConfigError);
  EXPECT_THROW(parse_config("{not json"), ConfigError);
  EXPECT_THROW(parse_config(R"({"kind": "curvature", "params": {"penalty": "labels", "labels": ["QQ"]}})"), ConfigError);
}

TEST(ParseConfig, EmitThenParseIsAFixpoint) {
  for (const char* text : {R"({"kind": "lin-dyn", "params": {"eta": 0.002}})", R"({"kind": "lddmm", "seed": 12})",
                           R"({"kind": "curvature", "params": {"penalty": "labels", "labels": ["ZZ"]}})",
                           R"({"kind": "complexity"})", R"({"kind": "sensitivity", "params": {"residual": true}})",
                           R"({"kind": "prob-study", "params": {"measure": "path_length"}})"}) {
    const ExperimentConfig once = parse_config(text);
    const ExperimentConfig twice = parse_config(emit_config(once));
    EXPECT_TRUE(once == twice) << text;
    EXPECT_EQ(emit_config(once), emit_config(twice));
  }
}

TEST(ConfigHash, FrozenValueAndOutputDirExcluded) {
  // FNV-1a of the sorted compact JSON, computed independently
  ExperimentConfig c = parse_config(kLinDyn);
  EXPECT_EQ(config_hash(c), "2cd71e342ec4c4a4");
  c.output_dir = "elsewhere";
  EXPECT_EQ(config_hash(c), "2cd71e342ec4c4a4");
  c.seed = 4;
  EXPECT_NE(config_hash(c), "2cd71e342ec4c4a4");
}

TEST(ResolveSeed, FlagBeatsEnvBeatsConfig) {
  const SeedChoice config_only = resolve_seed(5, std::nullopt, nullptr);
  EXPECT_EQ(config_only.seed, 5u);
  EXPECT_EQ(config_only.source, "config");
  EXPECT_FALSE(config_only.env);
  const SeedChoice env = resolve_seed(5, std::nullopt, "17");
  EXPECT_EQ(env.seed, 17u);
  EXPECT_EQ(env.source, "env");
  const SeedChoice flag = resolve_seed(5, 99, "17");
  EXPECT_EQ(flag.seed, 99u);
  EXPECT_EQ(flag.source, "flag");
  EXPECT_EQ(*flag.env, "17");
  EXPECT_THROW(resolve_seed(5, std::nullopt, "12x"), ConfigError);
  EXPECT_THROW(resolve_seed(5, std::nullopt, "-3"), ConfigError);
}

TEST(Io, CsvQuotingAndNumberFormat) {
  io::CsvTable t({"name", "value"});
  t.row() << "a,b" << 0.1;
  t.row() << "say \"hi\"" << 3;
  EXPECT_EQ(t.str(), "name,value\n\"a,b\",0.10000000000000001\n\"say \"\"hi\"\"\",3\n");
}

TEST(Io, ImageCsvRoundTripAndPgmHeader) {
  const lddmm::Grid g(10, 8, 0.5, 0.5);
  const lddmm::Image img = lddmm::gaussian_bump(g, {2.0, 1.5}, 1.0);
  const std::string text = io::image_to_csv(img);
  EXPECT_EQ(text.substr(0, text.find('\n', 18) + 1), "rows,cols,spacing\n8,10,0.5\n");
  const lddmm::Image back = io::image_from_csv(text);
  EXPECT_TRUE(back.grid == g);
  EXPECT_TRUE(back.values == img.values);
  const std::string pgm = io::image_to_pgm(img);
  EXPECT_EQ(pgm.substr(0, 12), "P5\n10 8\n255\n");
  EXPECT_EQ(pgm.size(), 12u + 80u);
  EXPECT_THROW(io::image_from_csv("rows,cols\n1,8\n"), ConfigError);
  EXPECT_THROW(io::image_from_csv("rows,cols,spacing\n1,8,1\n1,2,3\n"), ConfigError);
}

TEST_F(Scratch, LinDynDepthOneWritesZeroCurve) {
  const RunRecord rec = run(config(kLinDyn));
  const std::string curve = read_bytes(rec.directory / "curve.csv");
  std::istringstream in(curve);
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "step,deviation");
  int rows = 0;
  while (std::getline(in, line)) {
    EXPECT_EQ(line.substr(line.find(',') + 1), "0");
    ++rows;
  }
  EXPECT_EQ(rows, 401);
  EXPECT_EQ(curve.find('\r'), std::string::npos);
}

TEST_F(Scratch, LddmmIdentityPairHasZeroEnergy) {
  const RunRecord rec = run(config(R"({"kind": "lddmm", "params": {"pair": "identity"}})"));
  EXPECT_LT(rec.metrics.at("total_energy").get<double>(), 1e-8);
  for (const char* f : {"source.csv", "target.csv", "deformed.csv", "source.pgm", "registration.json", "metrics.json"})
    EXPECT_TRUE(fs::exists(rec.directory / f)) << f;
}

TEST_F(Scratch, LddmmReadsImageFiles) {
  const lddmm::Grid g(32, 1.0);
  write_text(dir_ / "a.csv", io::image_to_csv(lddmm::gaussian_bump(g, {15.0, 0.0}, 4.0)));
  write_text(dir_ / "b.csv", io::image_to_csv(lddmm::gaussian_bump(g, {15.0, 0.0}, 4.0)));
  const std::string text = R"({"kind": "lddmm", "params": {"pair": "files", "source": ")" + (dir_ / "a.csv").string() +
                           R"(", "target": ")" + (dir_ / "b.csv").string() + R"("}})";
  const RunRecord rec = run(config(text));
  EXPECT_LT(rec.metrics.at("total_energy").get<double>(), 1e-8);
  EXPECT_FALSE(rec.metrics.contains("recovered_shift"));
}

TEST_F(Scratch, SameConfigAndSeedGiveIdenticalMetricFiles) {
  for (const char* text :
       {kLinDyn, R"({"kind": "curvature", "params": {"qubits": 1, "penalty": "labels", "labels": ["Z"], "sections": 50}})",
        R"({"kind": "prob-study", "params": {"runs": 60}})", R"({"kind": "lddmm", "params": {"max_iters": 20}})"}) {
    const ExperimentConfig c = config(text);
    const RunRecord a = run(c);
    std::map<std::string, std::string> first;
    for (const auto& f : a.outputs)
      if (f != "run_record.json") first[f] = read_bytes(a.directory / f);
    const RunRecord b = run(c);
    EXPECT_EQ(a.outputs, b.outputs);
    for (const auto& [f, bytes] : first) EXPECT_EQ(read_bytes(b.directory / f), bytes) << text << " " << f;
  }
}

TEST_F(Scratch, ArtifactsDoNotDependOnOutputDir) {
  ExperimentConfig c = config(kLinDyn);
  const RunRecord a = run(c);
  c.output_dir = (dir_ / "elsewhere").string();
  const RunRecord b = run(c);
  EXPECT_EQ(a.directory.filename(), b.directory.filename());
  for (const auto& f : a.outputs)
    if (f != "run_record.json") {
      EXPECT_EQ(read_bytes(a.directory / f), read_bytes(b.directory / f)) << f;
    }
  EXPECT_FALSE(json::parse(read_bytes(b.directory / "config.json")).contains("output_dir"));
  EXPECT_EQ(json::parse(read_bytes(b.directory / "run_record.json")).at("config").at("output_dir"), c.output_dir);
}

TEST_F(Scratch, FailedRunLeavesNoOutput) {
  const ExperimentConfig c = config(R"({"kind": "prob-study", "params": {"runs": 60, "max_steps": 2}})");
  EXPECT_THROW(run(c), InsufficientData);
  EXPECT_FALSE(fs::exists(run_directory(c)));
  EXPECT_FALSE(fs::exists(run_directory(c).string() + ".partial"));
}

TEST_F(Scratch, RunRecordHoldsManifestAndSeedProvenance) {
  ExperimentConfig c = config(kLinDyn);
  const SeedChoice choice = resolve_seed(c.seed, std::nullopt, "21");
  c.seed = choice.seed;
  const RunRecord rec = run(c, choice);
  const json j = json::parse(read_bytes(rec.directory / "run_record.json"));
  EXPECT_EQ(j.at("seed"), 21);
  EXPECT_EQ(j.at("seed_source"), "env");
  EXPECT_EQ(j.at("geolab_seed_env"), "21");
  EXPECT_EQ(j.at("config_hash"), config_hash(c));
  EXPECT_EQ(j.at("config").at("params").at("steps"), 400);
  EXPECT_TRUE(j.contains("started_at"));
  EXPECT_EQ(j.at("outputs"), json({"config.json", "curve.csv", "metrics.json", "run_record.json"}));
}

TEST_F(Scratch, ReportGroupsSortsAndIsIdempotent) {
  const fs::path out = dir_ / "out";
  EXPECT_THROW(report(out), ConfigError);
  fs::create_directories(out);
  EXPECT_THROW(report(out), ConfigError);
  run(config(kLinDyn));
  EXPECT_EQ(report(out).size(), 1u);
  run(config(R"({"kind": "lin-dyn", "seed": 8})"));
  run(config(R"({"kind": "curvature", "params": {"qubits": 1, "sections": 10}})"));
  const auto rows = report(out);
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0].kind, "curvature");
  EXPECT_EQ(rows[1].kind, "lin-dyn");
  EXPECT_LT(rows[1].config_hash, rows[2].config_hash);
  const std::string csv = read_bytes(out / "summary.csv"), txt = read_bytes(out / "summary.txt");
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "kind,config_hash,seed,metric,value");
  report(out);
  EXPECT_EQ(read_bytes(out / "summary.csv"), csv);
  EXPECT_EQ(read_bytes(out / "summary.txt"), txt);
}

TEST_F(Scratch, CliExitCodes) {
  write_text(dir_ / "ok.json", kLinDyn);
  write_text(dir_ / "typo.json", R"({"kind": "lin-dyn", "params": {"etaa": 1}})");
  write_text(dir_ / "fail.json", R"({"kind": "prob-study", "params": {"runs": 60, "max_steps": 2}})");
  EXPECT_EQ(cli("run ok.json --out o"), 0);
  EXPECT_EQ(cli("run typo.json --out o"), 2);
  EXPECT_EQ(cli("run missing.json --out o"), 2);
  EXPECT_EQ(cli("run ok.json --seed banana --out o"), 2);
  EXPECT_EQ(cli("frobnicate"), 2);
  EXPECT_EQ(cli("run fail.json --out o"), 3);
  EXPECT_EQ(cli("report o"), 0);
  EXPECT_EQ(cli("report nowhere"), 2);
}

TEST_F(Scratch, CliSeedPrecedence) {
  write_text(dir_ / "ok.json", kLinDyn);
  auto seed_in = [&](const std::string& sub) {
    ExperimentConfig c = parse_config(kLinDyn);
    c.output_dir = (dir_ / sub).string();
    return c;
  };
  ASSERT_EQ(cli("run ok.json --out env", "GEOLAB_SEED=11"), 0);
  ExperimentConfig c = seed_in("env");
  c.seed = 11;
  EXPECT_TRUE(fs::exists(run_directory(c)));
  ASSERT_EQ(cli("run ok.json --seed 12 --out flag", "GEOLAB_SEED=11"), 0);
  c = seed_in("flag");
  c.seed = 12;
  EXPECT_TRUE(fs::exists(run_directory(c)));
  EXPECT_EQ(cli("run ok.json --out bad", "GEOLAB_SEED=x1"), 2);
}
