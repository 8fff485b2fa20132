#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "trajgen/cli.hpp"
#include "trajgen/data.hpp"

namespace trajgen {
namespace {

namespace fs = std::filesystem;

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result run(std::vector<std::string> args) {
  args.insert(args.begin(), "trajgen");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("trajgen_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }
  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  std::string small_corpus() {
    const auto p = path("corpus.csv");
    const auto r = run({"--seed", "7", "synth", "--trips", "30", "--length-min", "60", "--length-max", "150",
                        "--out", p});
    EXPECT_EQ(r.code, cli::kExitOk) << r.err;
    return p;
  }

  std::string tiny_crnn(const std::string& corpus) {
    const auto p = path("crnn.bin");
    const auto r = run({"--seed", "3", "train", "crnn", "--corpus", corpus, "--out", p, "--epochs", "10",
                        "--batch-size", "8", "--layers", "1", "--hidden-size", "6", "--gan-hidden", "8"});
    EXPECT_EQ(r.code, cli::kExitOk) << r.err;
    return p;
  }

  fs::path dir_;
};

TEST_F(Cli, SynthIsDeterministicAndWritesResolvedConfig) {
  ASSERT_EQ(run({"--seed", "7", "synth", "--trips", "100", "--out", path("a.csv")}).code, cli::kExitOk);
  ASSERT_EQ(run({"--seed", "7", "synth", "--trips", "100", "--out", path("b.csv")}).code, cli::kExitOk);
  EXPECT_EQ(slurp(path("a.csv")), slurp(path("b.csv")));
  const auto corpus = data::ingest_csv(path("a.csv"));
  EXPECT_EQ(corpus.size(), 100u);
  EXPECT_GE(corpus.stats().min_length, 100u);
  EXPECT_LE(corpus.stats().max_length, 6330u);

  const std::string cfg = slurp(path("a.csv.config.toml"));
  EXPECT_NE(cfg.find("seed=7"), std::string::npos);
  EXPECT_NE(cfg.find("length-min=100"), std::string::npos);
  EXPECT_NE(cfg.find("length-max=6330"), std::string::npos);
}

TEST_F(Cli, WrittenConfigReproducesTheRun) {
  ASSERT_EQ(run({"--seed", "11", "synth", "--trips", "5", "--out", path("a.csv")}).code, cli::kExitOk);
  ASSERT_EQ(run({"--config", path("a.csv.config.toml"), "synth", "--out", path("b.csv")}).code, cli::kExitOk);
  EXPECT_EQ(slurp(path("a.csv")), slurp(path("b.csv")));
}

TEST_F(Cli, FlagsOverrideConfigFile) {
  std::ofstream(path("c.toml")) << "seed=9\n[synth]\ntrips=3\n";
  ASSERT_EQ(run({"--config", path("c.toml"), "synth", "--trips", "4", "--out", path("a.csv")}).code, cli::kExitOk);
  EXPECT_EQ(data::ingest_csv(path("a.csv")).size(), 4u);
  EXPECT_NE(slurp(path("a.csv.config.toml")).find("seed=9"), std::string::npos);
}

TEST_F(Cli, UnknownConfigKeyIsUsageError) {
  std::ofstream(path("c.toml")) << "[synth]\ntrips=3\nspeediness=2\n";
  EXPECT_EQ(run({"--config", path("c.toml"), "synth", "--out", path("a.csv")}).code, cli::kExitUsage);
}

TEST_F(Cli, UsageErrors) {
  EXPECT_EQ(run({}).code, cli::kExitUsage);
  EXPECT_EQ(run({"frobnicate"}).code, cli::kExitUsage);
  const auto bad = run({"synth", "--profile", "lunar", "--out", path("a.csv")});
  EXPECT_EQ(bad.code, cli::kExitUsage);
  EXPECT_NE(bad.err.find("--profile"), std::string::npos);  // usage text
  EXPECT_EQ(run({"synth", "--length-min", "500", "--length-max", "100", "--out", path("a.csv")}).code,
            cli::kExitUsage);
  EXPECT_EQ(run({"train", "markov", "--corpus", path("missing.csv"), "--out", path("m.json")}).code,
            cli::kExitUsage);
  EXPECT_EQ(run({"train", "lstm", "--corpus", path("missing.csv"), "--out", path("m.json")}).code, cli::kExitUsage);
  EXPECT_EQ(run({"evaluate", "--generated", path("missing.csv"), "--reference", path("missing.csv"), "--out",
                 path("r.json")})
                .code,
            cli::kExitUsage);
  EXPECT_EQ(run({"--help"}).code, cli::kExitOk);
}

TEST_F(Cli, MarkovTrainGenerateEvaluate) {
  const auto corpus = small_corpus();
  ASSERT_EQ(run({"train", "markov", "--corpus", corpus, "--out", path("m.json")}).code, cli::kExitOk);
  EXPECT_TRUE(fs::exists(path("m.json.config.toml")));
  const auto gen = [&](const std::string& out) {
    return run({"--seed", "5", "generate", "--model", path("m.json"), "--count", "4", "--length", "50", "--out",
                path(out)});
  };
  ASSERT_EQ(gen("g1.csv").code, cli::kExitOk);
  ASSERT_EQ(gen("g2.csv").code, cli::kExitOk);
  EXPECT_EQ(slurp(path("g1.csv")), slurp(path("g2.csv")));
  const auto g = data::ingest_csv(path("g1.csv"));
  ASSERT_EQ(g.size(), 4u);
  for (const auto& t : g.trips()) EXPECT_EQ(t.size(), 50u);

  const auto manifest = nlohmann::json::parse(slurp(path("g1.csv.manifest.json")));
  ASSERT_EQ(manifest.at("trips").size(), 4u);
  EXPECT_NE(manifest["trips"][0]["seed"], manifest["trips"][1]["seed"]);

  const auto r = run({"evaluate", "--generated", path("g1.csv"), "--reference", corpus, "--out", path("r.json")});
  EXPECT_EQ(r.code, cli::kExitOk);
  for (const char* suffix : {"", ".speed_generated.csv", ".speed_reference.csv", ".accel_generated.csv",
                             ".accel_reference.csv", ".config.toml"}) {
    EXPECT_TRUE(fs::exists(path(std::string("r.json") + suffix))) << suffix;
  }
}

TEST_F(Cli, SelfComparisonIsZero) {
  const auto corpus = small_corpus();
  ASSERT_EQ(run({"evaluate", "--generated", corpus, "--reference", corpus, "--out", path("r.json")}).code,
            cli::kExitOk);
  const auto j = nlohmann::json::parse(slurp(path("r.json")));
  EXPECT_EQ(j["speed"]["tv"].get<double>(), 0.0);
  EXPECT_EQ(j["speed"]["w1"].get<double>(), 0.0);
  EXPECT_EQ(j["accel"]["w1"].get<double>(), 0.0);
}

TEST_F(Cli, NfUntrainedBinNamesTheBin) {
  const auto corpus = small_corpus();
  ASSERT_EQ(run({"train", "nf", "--corpus", corpus, "--out", path("nf.json"), "--flow-epochs", "20",
                 "--min-samples", "400"})
                .code,
            cli::kExitOk);
  EXPECT_TRUE(fs::exists(path("nf.json.history.csv")));
  const auto r = run({"generate", "--model", path("nf.json"), "--length", "500", "--out", path("g.csv")});
  EXPECT_EQ(r.code, cli::kExitFailure);
  EXPECT_NE(r.err.find("bin"), std::string::npos) << r.err;
}

TEST_F(Cli, CrnnConditionGridAndDeterminism) {
  const auto model = tiny_crnn(small_corpus());
  const std::string hist = slurp(path("crnn.bin.history.csv"));
  EXPECT_EQ(hist.rfind("epoch,ae_loss,disc_loss,gen_loss\n", 0), 0u);
  EXPECT_EQ(std::count(hist.begin(), hist.end(), '\n'), 11);

  const auto gen = [&](const std::string& out) {
    return run({"--seed", "4", "generate", "--model", model, "--condition-length", "1000..6000:step1000", "--per",
                "10", "--out", path(out)});
  };
  ASSERT_EQ(gen("g1.csv").code, cli::kExitOk);
  ASSERT_EQ(gen("g2.csv").code, cli::kExitOk);
  EXPECT_EQ(slurp(path("g1.csv")), slurp(path("g2.csv")));
  EXPECT_EQ(data::ingest_csv(path("g1.csv")).size(), 60u);

  const auto manifest = nlohmann::json::parse(slurp(path("g1.csv.manifest.json")));
  ASSERT_EQ(manifest["trips"].size(), 60u);
  EXPECT_EQ(manifest["trips"][0]["condition_length_m"].get<double>(), 1000.0);
  EXPECT_EQ(manifest["trips"][59]["condition_length_m"].get<double>(), 6000.0);

  EXPECT_EQ(run({"evaluate", "--generated", path("g1.csv"), "--reference", path("corpus.csv"), "--manifest",
                 path("g1.csv.manifest.json"), "--out", path("r.json")})
                .code,
            cli::kExitOk);
  const auto report = nlohmann::json::parse(slurp(path("r.json")));
  EXPECT_TRUE(report["generated_constraints"].contains("length_relative_errors"));
}

TEST_F(Cli, CrnnWithoutConditionIsUsageError) {
  const auto model = tiny_crnn(small_corpus());
  EXPECT_EQ(run({"generate", "--model", model, "--out", path("g.csv")}).code, cli::kExitUsage);
  EXPECT_EQ(run({"generate", "--model", model, "--condition-length", "1000..x:step5", "--out", path("g.csv")}).code,
            cli::kExitUsage);
}

TEST_F(Cli, TrainingIsByteIdenticalUnderSeed) {
  const auto corpus = small_corpus();
  for (const char* out : {"a.bin", "b.bin"}) {
    ASSERT_EQ(run({"--seed", "2", "train", "rnn1d", "--corpus", corpus, "--out", path(out), "--epochs", "5",
                   "--batch-size", "8", "--layers", "1", "--hidden-size", "4", "--gan-hidden", "8"})
                  .code,
              cli::kExitOk);
  }
  EXPECT_EQ(slurp(path("a.bin")), slurp(path("b.bin")));
  EXPECT_EQ(slurp(path("a.bin.history.csv")), slurp(path("b.bin.history.csv")));
}

TEST_F(Cli, DivergenceExitsNonzeroWithCheckpoint) {
  // A huge step either kills the relu head (finite loss) or blows it up; this
  // seed and corpus blow it up.
  const auto corpus = path("corpus.csv");
  ASSERT_EQ(run({"--seed", "7", "synth", "--trips", "40", "--length-min", "60", "--length-max", "150", "--out",
                 corpus})
                .code,
            cli::kExitOk);
  const auto r = run({"--seed", "0", "train", "rnn1d", "--corpus", corpus, "--out", path("d.bin"), "--epochs", "5",
                      "--learning-rate", "1e300", "--layers", "1", "--batch-size", "8"});
  EXPECT_EQ(r.code, cli::kExitFailure);
  EXPECT_NE(r.err.find(path("d.bin.ckpt")), std::string::npos) << r.err;
  EXPECT_TRUE(fs::exists(path("d.bin.ckpt")));
}

}  // namespace
}  // namespace trajgen
