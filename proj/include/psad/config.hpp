// Run configuration: nested JSON file, dotted-key overrides, validation.

#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "psad/data.hpp"
#include "psad/model.hpp"
#include "psad/train.hpp"

namespace psad::config {

struct EvalSettings {
  std::vector<std::size_t> ks{5, 10};
  int threads = 1;
  /// Share of sessions, by history length, forming the high-activity segment.
  double segment_fraction = 0.2;
  /// Share of the generated data held out for evaluation.
  double holdout_fraction = 0.2;
};

struct BenchSettings {
  std::vector<std::size_t> batch_sizes{256};
  std::size_t warmup = 2;
  std::size_t steps = 10;
  bool include_train = false;
};

struct SweepSettings {
  std::vector<std::size_t> block_sizes;
  std::vector<std::size_t> gammas;
  std::vector<double> alphas;
  std::vector<std::uint64_t> seeds;
};

struct RunConfig {
  std::uint64_t seed = 7;
  data::SyntheticConfig data;
  ModelConfig model;
  distill::TrainConfig train;
  EvalSettings eval;
  BenchSettings bench;
  SweepSettings sweep;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Defaults as nested JSON; also the list of accepted keys.
nlohmann::json default_json();

nlohmann::json to_json(const RunConfig& config);
/// Every key of `j` must be known. Missing keys keep their defaults.
RunConfig from_json(const nlohmann::json& j);

/// Violated constraints, one message each; empty when valid.
std::vector<std::string> validation_errors(const RunConfig& config);

/// Applies ablation aliases (disable_sa sets K = T, disable_ce sets gamma = 0)
/// and copies shared lengths into the model and train sections.
RunConfig resolve(RunConfig config);

/// Reads `path` (may be empty for defaults), applies `key.path=value`
/// overrides in order, validates and resolves. Throws ConfigError listing
/// every problem.
RunConfig parse_and_validate(const std::filesystem::path& path, const std::vector<std::string>& overrides);

nlohmann::json model_to_json(const ModelConfig& model);
ModelConfig model_from_json(const nlohmann::json& j);

}  // namespace psad::config
