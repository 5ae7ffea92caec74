// Drives the blc executable end to end. The core library is linked only to
// build fixtures (hand-edited checkpoints, data files).
#include "blc/persistence.hpp"
#include "blc/tensor.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>
#include <json.hpp>

#include <sys/wait.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    dir_ = fs::temp_directory_path() / (std::string("blc_cli_") + info->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  fs::path path(const std::string& name) const { return dir_ / name; }

  // Exit status of `blc args`, stdout and stderr discarded.
  int blc(const std::string& args, const std::string& env = "") const {
    const std::string cmd = env + " " + std::string(BLC_CLI_PATH) + " " + args + " >" +
                            path("stdout.txt").string() + " 2>" + path("stderr.txt").string();
    const int rc = std::system(cmd.c_str());
    return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
  }

  std::string config(const json& j, const std::string& name = "config.json") const {
    std::ofstream(path(name)) << j.dump();
    return path(name).string();
  }

  // Trains a small checkpoint and returns its directory.
  std::string train(const std::string& task, const std::string& arch, const json& cfg,
                    const std::string& name = "ckpt", const std::string& env = "") const {
    const std::string out = path(name).string();
    const int rc = blc("train -q --task " + task + " --arch " + arch + " --seed 7 --config " +
                           config(cfg, name + ".json") + " --out " + out,
                       env);
    EXPECT_EQ(rc, 0) << slurp(path("stderr.txt"));
    return out;
  }

  static std::string slurp(const fs::path& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
  }
  static json load(const fs::path& p) { return json::parse(slurp(p)); }

  // Replaces one tensor and rewrites the manifest hashes.
  static void overwrite(const std::string& ckpt, const std::string& name, const blc::Tensor& t) {
    blc::Checkpoint c = blc::read_checkpoint(ckpt);
    c.tensors.at(name) = t;
    blc::write_checkpoint(c, ckpt);
  }

  fs::path dir_;
};

const json kSmallSuperposition = {{"opt", {{"steps", 50}, {"batch_size", 16}}}};
const json kSmallLm = {{"task", {{"variant", "toy_lm"}, {"n_vocab", 8}, {"n_ctx", 6}}},
                       {"opt", {{"steps", 5}, {"batch_size", 4}}},
                       {"model", {{"d_model", 8}, {"n_heads", 2}, {"d_head", 4}, {"d_mlp", 8}}}};

}  // namespace

TEST_F(Cli, UsageErrorsExitTwo) {
  EXPECT_EQ(blc("train --task superposition --arch bilinear"), 2);
  EXPECT_EQ(blc("train --task superposition --arch conv --out x"), 2);
  EXPECT_EQ(blc(""), 2);
  EXPECT_EQ(blc("--help"), 0);
  EXPECT_EQ(blc("--version"), 0);
}

TEST_F(Cli, UnknownConfigKeyIsAConfigError) {
  const std::string cfg = config({{"opt", {{"stpes", 3}}}});
  EXPECT_EQ(blc("train --task superposition --arch bilinear --config " + cfg + " --out " +
                path("o").string()),
            2);
  EXPECT_FALSE(fs::exists(path("o") / "manifest.json"));
}

TEST_F(Cli, ZeroLearningRateGivesFlatMetrics) {
  const json cfg = {{"task", {{"dataset_size", 8}}}, {"opt", {{"steps", 20}, {"batch_size", 8}, {"lr", 0.0}}}};
  const std::string ckpt = train("superposition", "bilinear", cfg);
  std::ifstream in(fs::path(ckpt) / "metrics.jsonl");
  std::vector<double> losses;
  for (std::string line; std::getline(in, line);) losses.push_back(json::parse(line).at("loss"));
  ASSERT_EQ(losses.size(), 20u);
  for (double l : losses) EXPECT_EQ(l, losses.front());
}

TEST_F(Cli, SeededRerunReproducesMetricsAndWeights) {
  const std::string a = train("superposition", "relu", kSmallSuperposition, "a");
  const std::string b = train("superposition", "relu", kSmallSuperposition, "b");
  EXPECT_EQ(slurp(fs::path(a) / "metrics.jsonl"), slurp(fs::path(b) / "metrics.jsonl"));
  const json ma = load(fs::path(a) / "manifest.json"), mb = load(fs::path(b) / "manifest.json");
  EXPECT_EQ(ma.at("tensors"), mb.at("tensors"));
}

TEST_F(Cli, ReportMatchesStdoutAndIsStableApartFromWallTime) {
  const std::string ckpt = train("superposition", "bilinear", kSmallSuperposition);
  ASSERT_EQ(blc("verify --ckpt " + ckpt + " --report " + path("r1.json").string()), 0);
  EXPECT_EQ(json::parse(slurp(path("stdout.txt"))), load(path("r1.json")));
  ASSERT_EQ(blc("verify --ckpt " + ckpt + " --report " + path("r2.json").string()), 0);
  json r1 = load(path("r1.json")), r2 = load(path("r2.json"));
  for (const char* key : {"command", "config", "seed", "tool_version", "warnings", "results", "wall_time_s"})
    EXPECT_TRUE(r1.contains(key)) << key;
  r1.erase("wall_time_s");
  r2.erase("wall_time_s");
  EXPECT_EQ(r1, r2);
}

TEST_F(Cli, VerifyPassesOnFreshCheckpoints) {
  const std::string sup = train("superposition", "bilinear", kSmallSuperposition, "sup");
  EXPECT_EQ(blc("verify --ckpt " + sup + " --report " + path("r.json").string()), 0);
  const json r = load(path("r.json"));
  EXPECT_TRUE(r.at("results").at("pass").get<bool>());

  const std::string lm = train("toy-lm", "toy-transformer", kSmallLm, "lm");
  EXPECT_EQ(blc("verify --ckpt " + lm + " --suite expansion"), 0);
  EXPECT_EQ(blc("verify --ckpt " + lm + " --suite gradcheck"), 0);
  EXPECT_EQ(blc("verify --ckpt " + lm + " --suite bform"), 0);
}

TEST_F(Cli, CorruptedMlpWeightFailsExpansionSuite) {
  const std::string lm = train("toy-lm", "toy-transformer", kSmallLm);
  blc::Tensor w = blc::read_checkpoint(lm).tensors.at("mlp.W_I2");
  w.data()[0] = std::numeric_limits<double>::quiet_NaN();
  overwrite(lm, "mlp.W_I2", w);
  EXPECT_EQ(blc("verify --ckpt " + lm + " --suite expansion --report " + path("r.json").string()), 4);
  const json r = load(path("r.json"));
  EXPECT_FALSE(r.at("results").at("pass").get<bool>());
}

TEST_F(Cli, TamperedTensorFileIsAnIntegrityError) {
  const std::string ckpt = train("superposition", "bilinear", kSmallSuperposition);
  const fs::path f = fs::path(ckpt) / blc::tensor_file_name("layer.W2");
  auto bytes = blc::read_file(f);
  bytes.back() ^= 0x01;
  std::ofstream(f, std::ios::binary).write(reinterpret_cast<const char*>(bytes.data()), bytes.size());
  EXPECT_EQ(blc("verify --ckpt " + ckpt), 5);
  EXPECT_NE(slurp(path("stderr.txt")).find("layer.W2"), std::string::npos);
  EXPECT_EQ(blc("verify --ckpt " + path("missing").string()), 5);
}

TEST_F(Cli, ExpandTermsSumToForward) {
  const std::string lm = train("toy-lm", "toy-transformer", kSmallLm);
  ASSERT_EQ(blc("expand --ckpt " + lm + " --tokens 1,4,2,7 --report " + path("r.json").string()), 0);
  const json res = load(path("r.json")).at("results");
  EXPECT_LE(res.at("sum_vs_forward").at("max_abs_gap").get<double>(), 1e-8);
  double share = 0;
  for (const json& t : res.at("terms")) share += t.at("share").get<double>();
  EXPECT_NEAR(share, res.at("share_sum").get<double>(), 1e-12);
  EXPECT_EQ(blc("expand --ckpt " + lm + " --tokens 1,99 --report " + path("r2.json").string()), 2);
}

TEST_F(Cli, DirectPathDominatesWhenMlpOutputIsZero) {
  const std::string lm = train("toy-lm", "toy-transformer", kSmallLm);
  blc::Checkpoint c = blc::read_checkpoint(lm);
  blc::Tensor wo = c.tensors.at("mlp.W_O");
  std::ranges::fill(wo.data(), 0.0);
  overwrite(lm, "mlp.W_O", wo);
  // A single token attends only to itself, so each head contributes W_U W_O W_V x.
  // Shrinking the value maps leaves the direct path as the main term.
  c = blc::read_checkpoint(lm);
  for (auto& [name, t] : c.tensors)
    if (name.ends_with(".W_V"))
      for (std::size_t i = 0; i < t.size(); ++i) t.data()[i] *= 0.1;
  blc::write_checkpoint(c, lm);
  ASSERT_EQ(blc("expand --ckpt " + lm + " --tokens 3 --report " + path("r.json").string()), 0);
  const json terms = load(path("r.json")).at("results").at("terms");
  std::string best;
  double best_share = -1;
  for (const json& t : terms) {
    const std::string label = t.at("label");
    if (label.starts_with("mlp")) EXPECT_EQ(t.at("frobenius").get<double>(), 0.0) << label;
    if (t.at("share").get<double>() > best_share) {
      best_share = t.at("share");
      best = label;
    }
  }
  EXPECT_EQ(best, "embed-unembed");
}

TEST_F(Cli, MaterializeRefusesLargeVocabulary) {
  json cfg = kSmallLm;
  cfg["task"]["n_vocab"] = 128;
  cfg["opt"]["steps"] = 1;
  const std::string lm = train("toy-lm", "toy-transformer", cfg);
  EXPECT_EQ(blc("expand --ckpt " + lm + " --tokens 1,2 --materialize --report " + path("r.json").string()), 2);
  EXPECT_EQ(blc("expand --ckpt " + lm + " --tokens 1,2 --report " + path("r.json").string()), 0);
}

TEST_F(Cli, MaterializeAgreesOnSmallVocabulary) {
  const std::string lm = train("toy-lm", "toy-transformer", kSmallLm);
  ASSERT_EQ(blc("expand --ckpt " + lm + " --tokens 0,5,5 --materialize --report " + path("r.json").string()), 0);
  const json m = load(path("r.json")).at("results").at("materialized");
  EXPECT_TRUE(m.at("pass").get<bool>());
  EXPECT_LE(m.at("vs_forward").get<double>(), 1e-6);
}

TEST_F(Cli, IcaNeedsData) {
  const std::string ckpt = train("superposition", "bilinear", kSmallSuperposition);
  EXPECT_EQ(blc("analyze --ckpt " + ckpt + " --method ica --k 2 --report " + path("r.json").string()), 2);
}

TEST_F(Cli, IcaOnGaussianDataWarns) {
  const std::string ckpt = train("superposition", "bilinear", kSmallSuperposition);
  std::mt19937_64 rng(11);
  const oracle::Mat g = oracle::random_mat(rng, 2000, 4);
  blc::Tensor t({2000, 4});
  for (std::size_t r = 0; r < 2000; ++r)
    for (std::size_t c = 0; c < 4; ++c) t(r, c) = g[r][c];
  blc::write_tensor(t, path("acts.blt"));
  ASSERT_EQ(blc("analyze --ckpt " + ckpt + " --method ica --k 2 --data " + path("acts.blt").string() +
                " --report " + path("r.json").string()),
            0)
      << slurp(path("stderr.txt"));
  const json r = load(path("r.json"));
  EXPECT_FALSE(r.at("warnings").empty());
}

TEST_F(Cli, SvdOfIdentityWeightsIsTrivial) {
  const std::string ckpt = train("superposition", "bilinear", kSmallSuperposition);
  blc::Tensor eye({4, 4});
  for (std::size_t i = 0; i < 4; ++i) eye(i, i) = 1.0;
  overwrite(ckpt, "layer.W2", eye);
  ASSERT_EQ(blc("analyze --ckpt " + ckpt + " --method svd --k 4 --report " + path("r.json").string()), 0);
  const json res = load(path("r.json")).at("results");
  for (const json& s : res.at("singular_values")) EXPECT_NEAR(s.get<double>(), 1.0, 1e-12);
  const json u = res.at("u");
  ASSERT_EQ(u.size(), 4u);
  // Each column is a signed unit vector.
  for (std::size_t c = 0; c < 4; ++c) {
    int ones = 0;
    for (std::size_t r = 0; r < 4; ++r) {
      const double v = std::abs(u[r][c].get<double>());
      if (std::abs(v - 1.0) < 1e-12) ++ones;
      else EXPECT_LT(v, 1e-12);
    }
    EXPECT_EQ(ones, 1);
  }
}

TEST_F(Cli, TopBMatchesBruteForceSort) {
  const std::string ckpt = train("superposition", "bilinear", kSmallSuperposition);
  ASSERT_EQ(blc("analyze --ckpt " + ckpt + " --method top-b --k 5 --report " + path("r.json").string()), 0);
  const blc::Checkpoint c = blc::read_checkpoint(ckpt);
  const blc::Tensor& w1 = c.tensors.at("layer.W1");
  const blc::Tensor& w2 = c.tensors.at("layer.W2");
  const std::size_t m = w1.shape()[0], n = w1.shape()[1];
  oracle::Mat m1(m, std::vector<double>(n)), m2 = m1;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      m1[i][j] = w1(i, j);
      m2[i][j] = w2(i, j);
    }
  const oracle::Dense b = oracle::b_tensor(m1, m2);
  std::vector<double> mags(b.data.size());
  for (std::size_t i = 0; i < mags.size(); ++i) mags[i] = std::abs(b.data[i]);
  const std::vector<std::size_t> want = oracle::topk(mags, 5);
  const json got = load(path("r.json")).at("results").at("coefficients");
  ASSERT_EQ(got.size(), 5u);
  for (std::size_t r = 0; r < 5; ++r) {
    const std::size_t flat = (got[r].at("i").get<std::size_t>() * n + got[r].at("j").get<std::size_t>()) * n +
                             got[r].at("k").get<std::size_t>();
    EXPECT_EQ(flat, want[r]) << "rank " << r;
    EXPECT_EQ(got[r].at("value").get<double>(), b.data[want[r]]);
  }
}

TEST_F(Cli, PairsOnlyForSuperposition) {
  const std::string sup = train("superposition", "bilinear", kSmallSuperposition, "sup");
  ASSERT_EQ(blc("analyze --ckpt " + sup + " --method pairs --k 3 --report " + path("r.json").string()), 0);
  const json r = load(path("r.json"));
  EXPECT_EQ(r.at("results").at("pairs").size(), 3u);
  EXPECT_FALSE(r.at("warnings").empty());
  const std::string lin = train("superposition", "linear", kSmallSuperposition, "lin");
  EXPECT_EQ(blc("analyze --ckpt " + lin + " --method top-b --k 3 --report " + path("r.json").string()), 2);
}

TEST_F(Cli, SinglePrecisionCheckpointsVerify) {
  const std::string ckpt = train("superposition", "bilinear", kSmallSuperposition, "ckpt", "BLC_DTYPE=f32");
  EXPECT_EQ(blc::read_checkpoint(ckpt).tensors.at("layer.W1").dtype(), blc::DType::F32);
  EXPECT_EQ(blc("verify --ckpt " + ckpt + " --suite bform", "BLC_DTYPE=f32"), 0) << slurp(path("stderr.txt"));
}
