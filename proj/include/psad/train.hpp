// Training loop for the joint teacher/student objective.

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "psad/ad.hpp"
#include "psad/data.hpp"
#include "psad/model.hpp"

namespace psad::distill {

struct TrainConfig {
  std::size_t epochs = 10;
  /// Generator-only epochs that precede the student phase in offline mode.
  std::size_t teacher_epochs = 10;
  std::size_t batch_size = 32;
  double learning_rate = 2e-3;
  bool shuffle = true;
  /// Stop after this many optimisation steps in total; 0 means no limit.
  std::size_t max_steps = 0;
  int threads = 1;
  std::uint64_t seed = 0;
};

struct StepRecord {
  std::size_t step = 0;
  std::size_t epoch = 0;
  std::string phase;  // joint, teacher or student
  double generative = 0.0;
  double scorer = 0.0;
  double distillation = 0.0;
  double total = 0.0;
  double wall_ms = 0.0;
};

struct EpochRecord {
  std::size_t epoch = 0;
  std::string phase;
  double mean_total = 0.0;
  double wall_ms = 0.0;
  /// Values returned by the epoch callback, if any.
  std::vector<std::pair<std::string, double>> metrics;
};

struct TrainLog {
  std::vector<StepRecord> steps;
  std::vector<EpochRecord> epochs;

  /// step,epoch,phase,L_gen,L_scorer,L_KD,total,wall_ms
  void write_csv(const std::filesystem::path& path, const std::string& config_json = "") const;
  void write_epoch_csv(const std::filesystem::path& path, const std::string& config_json = "") const;
};

class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(std::size_t step, const std::string& what) : std::runtime_error(what), step_(step) {}
  std::size_t step() const { return step_; }

 private:
  std::size_t step_;
};

using EpochCallback = std::function<std::vector<std::pair<std::string, double>>(const Model&, std::size_t epoch)>;

/// Fits dense statistics on `dataset`, then optimises with Adam. Online mode
/// trains both heads on the joint loss each step; offline mode trains the
/// generator alone, freezes it, then trains the scorer. Timings aside, the
/// result is a pure function of (model, dataset, config).
TrainLog train(Model& model, const std::vector<data::Session>& dataset, const TrainConfig& config,
               const EpochCallback& on_epoch = nullptr);

/// One optimisation step on `batch`; exposed for tests.
StepRecord train_step(Model& model, ad::AdamState& adam, const data::Batch& batch, Objective objective,
                      std::uint64_t seed, std::uint64_t step, int threads);

}  // namespace psad::distill
