#include <cstdlib>
#include <fstream>
#include <iterator>

#include <gtest/gtest.h>

#include "amr/config.hpp"
#include "amr/dispatch.hpp"
#include "amr/errors.hpp"
#include "helpers.hpp"

using namespace amr;
namespace fs = std::filesystem;

namespace {

int cli(std::vector<std::string> args) {
  args.insert(args.begin(), "amr");
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  argv.push_back(nullptr);
  return run_cli(static_cast<int>(args.size()), argv.data());
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

fs::path toy_root(const std::string& name) {
  const auto root = amr::testing::temp_dir(name);
  amr::testing::write_toy_idx_dataset(root, "toy", 48, 16);
  return root;
}

std::vector<std::string> toy_args(const fs::path& root, const std::string& out, const std::string& epochs = "1") {
  return {"--dataset", "toy", "--data-root", root.string(), "--width", "4", "--batch-size", "8",
          "--val-size", "16", "--epochs", epochs, "--output", (root / out).string()};
}

std::vector<std::string> cat(std::vector<std::string> a, const std::vector<std::string>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

}  // namespace

// --- parsing ---------------------------------------------------------------------

TEST(Config, MissingDatasetNamesTheKey) {
  try {
    parse_config({}, {});
    FAIL() << "expected UsageError";
  } catch (const UsageError& e) {
    EXPECT_NE(std::string(e.what()).find("dataset"), std::string::npos);
  }
}

TEST(Config, PrecedencePresetThenFileThenFlags) {
  const auto dir = amr::testing::temp_dir("precedence");
  std::ofstream(dir / "c.txt") << "# comment\ndataset = kmnist\nlambda = 20\nbeta = 0.5\n";
  const auto cfg = parse_config(dir / "c.txt", {{"beta", "2"}}, "mnist_table1");
  EXPECT_EQ(cfg.dataset, "kmnist");  // file beats preset
  EXPECT_EQ(cfg.lambda, 20.0);       // file beats preset
  EXPECT_EQ(cfg.beta, 2.0);          // flag beats file
  EXPECT_EQ(cfg.epochs, 2000);       // preset beats default
  EXPECT_THROW(parse_config({}, {{"dataset", "mnist"}}, "no_such_preset"), UsageError);
  EXPECT_THROW(parse_config(dir / "missing.txt", {}), UsageError);
}

TEST(Config, RoundTripThroughText) {
  ExperimentConfig cfg;
  cfg.dataset = "svhn";
  cfg.mix = MixMode::BernK;
  cfg.k = 4;
  cfg.lambda = 0.1 + 0.2;  // not exactly representable in short decimal
  cfg.beta = 1e-7;
  cfg.d_h = 256;
  cfg.optim.lr = 3e-4;
  cfg.seed = 18446744073709551615ull;
  cfg.output = "runs/with space";
  cfg.eval_grids = true;
  cfg.validate();
  const auto back = config_from_text(cfg.to_text());
  EXPECT_EQ(back, cfg);
  EXPECT_EQ(back.lambda, cfg.lambda);
  EXPECT_EQ(back.to_text(), cfg.to_text());
  EXPECT_EQ(back.digest(), cfg.digest());
  for (const auto& key : config_keys()) {
    EXPECT_EQ(get_config_value(back, key), get_config_value(cfg, key)) << key;
  }
}

TEST(Config, UnknownKeysAndBadValuesAreUsageErrors) {
  ExperimentConfig cfg;
  auto expect_usage = [&](const std::string& key, const std::string& value, const std::string& mention) {
    try {
      auto c = cfg;
      c.dataset = "mnist";
      set_config_value(c, key, value);
      c.validate();
      FAIL() << key << "=" << value;
    } catch (const UsageError& e) {
      EXPECT_NE(std::string(e.what()).find(mention), std::string::npos) << e.what();
    }
  };
  expect_usage("lamda", "1", "lamda");
  expect_usage("mix", "blend", "mix");
  expect_usage("d_h", "64", "d_h");
  expect_usage("k", "3", "k");  // k != 2 needs a k-mode
  expect_usage("lambda", "-1", "lambda");
  expect_usage("beta", "abc", "beta");
  expect_usage("epochs", "-2", "epochs");
  expect_usage("seed", "-1", "seed");
  expect_usage("b1", "1.0", "b1");
  expect_usage("mask_gradient", "sometimes", "mask_gradient");
  EXPECT_THROW(config_from_text("dataset = mnist\nnot a pair\n"), UsageError);
}

TEST(Config, EnvironmentSuppliesDataRoot) {
  ::setenv("AMR_DATA_ROOT", "/env/root", 1);
  EXPECT_EQ(parse_config({}, {{"dataset", "mnist"}}).data_root, "/env/root");
  EXPECT_EQ(parse_config({}, {{"dataset", "mnist"}, {"data_root", "/flag"}}).data_root, "/flag");
  ::unsetenv("AMR_DATA_ROOT");
  EXPECT_EQ(parse_config({}, {{"dataset", "mnist"}}, {}, "/built/in").data_root, "/built/in");
}

TEST(Config, PresetsAndSweepValues) {
  EXPECT_EQ(lambda_sweep(), (std::vector<double>{2, 5, 10, 20, 50}));
  for (const auto& [name, values] : presets()) {
    EXPECT_NO_THROW(parse_config({}, {}, name)) << name;
  }
  EXPECT_EQ(parse_config({}, {}, "dsprites_table4").lambda, 1.0);
}

TEST(Sweep, MeanAndPopulationStd) {
  const auto [m, s] = mean_std({1.0, 2.0, 3.0});
  EXPECT_DOUBLE_EQ(m, 2.0);
  EXPECT_DOUBLE_EQ(s, std::sqrt(2.0 / 3.0));
  const auto [m1, s1] = mean_std({0.5});
  EXPECT_EQ(m1, 0.5);
  EXPECT_EQ(s1, 0.0);
}

// --- dispatch --------------------------------------------------------------------

TEST(Cli, ExitCodes) {
  const auto root = toy_root("cli_codes");
  EXPECT_EQ(cli({}), kExitUsage);
  EXPECT_EQ(cli({"frobnicate"}), kExitUsage);
  EXPECT_EQ(cli({"train"}), kExitUsage);
  EXPECT_EQ(cli({"train", "--dataset", "toy", "--no-such-flag", "1"}), kExitUsage);
  EXPECT_EQ(cli({"train", "--dataset", "toy", "--mix", "blend"}), kExitUsage);
  EXPECT_EQ(cli({"train", "--dataset", "absent", "--data-root", root.string(), "--output", (root / "a").string()}),
            kExitData);
  EXPECT_EQ(cli(cat({"train"}, cat(toy_args(root, "nan"), {"--lr", "1e30", "--weight-decay", "0"}))),
            kExitNumeric);
  EXPECT_EQ(cli(cat({"train"}, toy_args(root, "ok"))), kExitOk);
  EXPECT_EQ(cli(cat({"eval"}, cat(toy_args(root, "e"), {"--checkpoint", (root / "missing.ckpt").string()}))),
            kExitUsage);
}

TEST(Cli, ZeroEpochsNoEvalsWritesManifestAndInitialCheckpoint) {
  const auto root = toy_root("cli_zero");
  ASSERT_EQ(cli(cat({"train"}, cat(toy_args(root, "run", "0"), {"--eval-probe", "false"}))), kExitOk);
  const auto out = root / "run";
  EXPECT_TRUE(fs::exists(out / "checkpoints" / "latest.ckpt"));
  EXPECT_FALSE(fs::exists(out / "checkpoints" / "best.ckpt"));
  EXPECT_TRUE(slurp(out / "metrics.jsonl").empty());
  EXPECT_FALSE(fs::exists(out / "results.jsonl"));
  EXPECT_FALSE(fs::exists(out / "grids"));
  const auto manifest = nlohmann::json::parse(slurp(out / "manifest.json"));
  for (const auto* k : {"subcommand", "config_digest", "seed", "code_version", "wall_seconds"}) {
    EXPECT_TRUE(manifest.contains(k)) << k;
  }
  const auto cfg = config_from_text(slurp(out / "config.txt"));
  EXPECT_EQ(manifest.at("config_digest"), cfg.digest());
}

TEST(Cli, SameConfigTwiceGivesIdenticalMetrics) {
  const auto root = toy_root("cli_twice");
  ASSERT_EQ(cli(cat({"train"}, toy_args(root, "a", "2"))), kExitOk);
  ASSERT_EQ(cli(cat({"train"}, toy_args(root, "b", "2"))), kExitOk);
  const auto a = slurp(root / "a" / "metrics.jsonl");
  EXPECT_FALSE(a.empty());
  EXPECT_EQ(a, slurp(root / "b" / "metrics.jsonl"));
}

TEST(Cli, ConfigFileRerunsBitIdentically) {
  const auto root = toy_root("cli_rerun");
  ASSERT_EQ(cli(cat({"train"}, toy_args(root, "first"))), kExitOk);
  // The echoed config is enough to reproduce the run.
  ASSERT_EQ(cli({"train", "--config", (root / "first" / "config.txt").string(), "--output",
                 (root / "second").string()}),
            kExitOk);
  EXPECT_EQ(slurp(root / "first" / "metrics.jsonl"), slurp(root / "second" / "metrics.jsonl"));
}

TEST(Cli, EvalAndGridFromCheckpoint) {
  const auto root = toy_root("cli_eval");
  ASSERT_EQ(cli(cat({"train"}, toy_args(root, "run"))), kExitOk);
  const auto ckpt = (root / "run" / "checkpoints" / "latest.ckpt").string();
  EXPECT_EQ(cli(cat({"eval"}, cat(toy_args(root, "run"), {"--checkpoint", ckpt}))), kExitOk);
  EXPECT_TRUE(fs::exists(root / "run" / "manifest-eval.json"));
  EXPECT_EQ(cli(cat({"grid"}, cat(toy_args(root, "run"), {"--checkpoint", ckpt, "--mode", "both"}))), kExitOk);
  EXPECT_TRUE(fs::exists(root / "run" / "grids" / "convex.png"));
  EXPECT_TRUE(fs::exists(root / "run" / "grids" / "bernoulli.png"));
  EXPECT_EQ(cli(cat({"grid"}, cat(toy_args(root, "run"), {"--checkpoint", ckpt, "--mode", "diagonal"}))),
            kExitUsage);
}

TEST(Cli, ThreeSeedSweepSummarisesMeanAndStd) {
  const auto root = toy_root("cli_sweep");
  ASSERT_EQ(cli(cat({"sweep"}, cat(toy_args(root, "sweep"), {"--seeds", "3"}))), kExitOk);
  const auto summary = nlohmann::json::parse(slurp(root / "sweep" / "summary.json"));
  ASSERT_TRUE(summary.is_array());
  ASSERT_EQ(summary.size(), 1u);
  const auto& g = summary[0];
  std::vector<double> bests;
  for (const auto& seed_dir : fs::directory_iterator(root / "sweep")) {
    if (!seed_dir.is_directory()) continue;
    double best = -1.0;
    std::ifstream in(seed_dir.path() / "metrics.jsonl");
    for (std::string l; std::getline(in, l);) {
      best = std::max(best, nlohmann::json::parse(l).at("probe_val_acc").get<double>());
    }
    bests.push_back(best);
  }
  ASSERT_EQ(bests.size(), 3u);
  double mean = 0.0;
  for (double b : bests) mean += b / 3.0;
  double var = 0.0;
  for (double b : bests) var += (b - mean) * (b - mean) / 3.0;
  EXPECT_NEAR(g.at("mean").get<double>(), mean, 1e-12);
  EXPECT_NEAR(g.at("std").get<double>(), std::sqrt(var), 1e-12);
  EXPECT_EQ(g.at("best_val_acc").size(), 3u);
}
