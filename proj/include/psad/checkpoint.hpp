// Text checkpoints: model config, dense statistics and every parameter as
// hex floats, so a save/load round trip is exact.

#pragma once

#include <filesystem>
#include <stdexcept>

#include "psad/model.hpp"

namespace psad::checkpoint {

inline constexpr int kVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void save(const Model& model, const std::filesystem::path& path);

/// Rebuilds the model from the stored config and overwrites every parameter.
Model load(const std::filesystem::path& path);

}  // namespace psad::checkpoint
