#pragma once

// Reproducible runs behind the command-line tool. Each command takes a JSON
// request (the parsed flags) and produces a RunReport document.

#include "blc/training.hpp"

#include <json.hpp>

#include <string>
#include <string_view>

namespace blc {

inline constexpr const char* kToolVersion = "0.1.0";

enum class NumericDType { F64, F32 };

/// BLC_DTYPE in {f32, f64}; unset means f64. Config error otherwise.
NumericDType numeric_dtype_from_env();

struct RunOutcome {
  nlohmann::json report;
  /// 0, or 4 when a verification invariant failed.
  int verdict = 0;
};

/// Resolved training configuration from a JSON document with optional
/// "task", "opt" and "model" sections. Unknown keys are config errors.
struct RunConfig {
  TaskConfig task;
  OptConfig opt;
  ModelConfig model;
};
RunConfig parse_run_config(const nlohmann::json& doc);
nlohmann::json to_json(const RunConfig& cfg);

/// request: task, arch, config (path, optional), seed, out, lambda?, penalty?
RunOutcome run_train(const nlohmann::json& request);
/// request: ckpt, suite (all | bform | expansion | gradcheck), seed?
RunOutcome run_verify(const nlohmann::json& request);
/// request: ckpt, tokens (array), materialize, report?
RunOutcome run_expand(const nlohmann::json& request);
/// request: ckpt, method, k, data?, seed?
RunOutcome run_analyze(const nlohmann::json& request);

/// Dispatch by command name ("train", "verify", "expand", "analyze").
RunOutcome run_command(std::string_view command, const nlohmann::json& request);

}  // namespace blc
