// blc: train, verify, expand and analyze bilinear-layer models.
// Talks to the library only through blc.h.

#include "blc/blc.h"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdint>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

namespace {

enum Exit { kOk = 0, kInternal = 1, kUsage = 2, kTraining = 3, kVerify = 4, kIo = 5 };

int exit_code(blc_status s) {
  switch (s) {
    case BLC_OK: return kOk;
    case BLC_ERR_DIMENSION:
    case BLC_ERR_ARGUMENT:
    case BLC_ERR_CAPACITY:
    case BLC_ERR_PRECONDITION:
    case BLC_ERR_CONFIG: return kUsage;
    case BLC_ERR_TRAINING: return kTraining;
    case BLC_ERR_CONVERGENCE:
    case BLC_ERR_CONSISTENCY: return kVerify;
    case BLC_ERR_FORMAT:
    case BLC_ERR_LENGTH:
    case BLC_ERR_VERSION:
    case BLC_ERR_INTEGRITY:
    case BLC_ERR_IO: return kIo;
    case BLC_ERR_INTERNAL: return kInternal;
  }
  return kInternal;
}

int run(const std::string& command, const nlohmann::json& request, bool quiet) {
  char* report = nullptr;
  int verdict = 0;
  const blc_status s = blc_run(command.c_str(), request.dump().c_str(), &report, &verdict);
  if (s != BLC_OK) {
    std::cerr << "blc " << command << ": " << blc_status_name(s) << ": " << blc_last_error() << "\n";
    return exit_code(s);
  }
  if (!quiet) std::cout << report << "\n";
  blc_string_free(report);
  if (verdict != 0) std::cerr << "blc " << command << ": verification failed\n";
  return verdict;
}

template <class T>
void put(nlohmann::json& j, const char* key, const std::optional<T>& v) {
  if (v) j[key] = *v;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Bilinear layers as third-order tensors: training, verification, path expansion and analysis"};
  app.set_version_flag("--version", std::string(blc_version()));
  app.require_subcommand(1);
  app.fallthrough();
  bool quiet = false;
  app.add_flag("-q,--quiet", quiet, "Do not print the report to stdout");

  nlohmann::json request = nlohmann::json::object();

  // train
  auto* train = app.add_subcommand("train", "Train a model and write a checkpoint");
  std::string task, arch, out, penalty;
  std::optional<std::string> config;
  std::optional<std::uint64_t> seed;
  std::optional<double> lambda;
  train->add_option("--task", task, "superposition | toy-lm")
      ->required()->check(CLI::IsMember({"superposition", "toy-lm", "toy_lm"}));
  train->add_option("--arch", arch, "linear | bilinear | relu | swiglu | toy-transformer")
      ->required()->check(CLI::IsMember({"linear", "bilinear", "relu", "swiglu", "toy-transformer", "toy_transformer"}));
  train->add_option("--config", config, "JSON config with task/opt/model sections");
  train->add_option("--seed", seed, "Root seed (overrides opt.seed)");
  train->add_option("--out", out, "Output directory")->required();
  train->add_option("--lambda", lambda, "Modifier-norm penalty weight");
  train->add_option("--penalty", penalty, "l2 | l1")->check(CLI::IsMember({"l2", "l1"}));

  // verify
  auto* verify = app.add_subcommand("verify", "Run equivalence suites against a checkpoint");
  std::string ckpt, suite = "all";
  std::optional<std::string> report;
  verify->add_option("--ckpt", ckpt, "Checkpoint directory")->required();
  verify->add_option("--suite", suite, "all | bform | expansion | gradcheck")
      ->check(CLI::IsMember({"all", "bform", "expansion", "gradcheck"}));
  verify->add_option("--seed", seed, "Seed for sampled inputs (default: checkpoint seed)");
  verify->add_option("--report", report, "Write the report here");

  // expand
  auto* expand = app.add_subcommand("expand", "Path-expand the logits of a token sequence");
  std::vector<long long> tokens;
  bool materialize = false;
  expand->add_option("--ckpt", ckpt, "Checkpoint directory")->required();
  expand->add_option("--tokens", tokens, "Comma-separated token ids")->required()->delimiter(',');
  expand->add_flag("--materialize", materialize, "Also check the explicit vocab-space tensors");
  expand->add_option("--report", report, "Write the report here")->required();

  // analyze
  auto* analyze = app.add_subcommand("analyze", "Feature analysis of a checkpoint's bilinear layer");
  std::string method;
  std::size_t k = 0;
  std::optional<std::string> data;
  analyze->add_option("--ckpt", ckpt, "Checkpoint directory")->required();
  analyze->add_option("--method", method, "ica | svd | hosvd | top-b | top-modified | pairs")
      ->required()->check(CLI::IsMember({"ica", "svd", "hosvd", "top-b", "top-modified", "pairs"}));
  analyze->add_option("--k", k, "Number of ranked results")->required();
  analyze->add_option("--data", data, "BLT1 tensor of activations or directions");
  analyze->add_option("--seed", seed, "Seed (default: checkpoint seed)");
  analyze->add_option("--report", report, "Write the report here")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  std::string command;
  if (train->parsed()) {
    command = "train";
    request = {{"task", task}, {"arch", arch}, {"out", out}};
    put(request, "config", config);
    put(request, "lambda", lambda);
    if (!penalty.empty()) request["penalty"] = penalty;
  } else if (verify->parsed()) {
    command = "verify";
    request = {{"ckpt", ckpt}, {"suite", suite}};
  } else if (expand->parsed()) {
    command = "expand";
    request = {{"ckpt", ckpt}, {"tokens", tokens}, {"materialize", materialize}};
  } else {
    command = "analyze";
    request = {{"ckpt", ckpt}, {"method", method}, {"k", k}};
    put(request, "data", data);
  }
  put(request, "seed", seed);
  put(request, "report", report);
  return run(command, request, quiet);
}
