// Session-parallel batch kernels. Each kernel has a serial reference and an
// OpenMP version; both produce bit-identical results because sessions are
// independent and reductions run in fixed session order.

#pragma once

#include <cstdint>
#include <vector>

#include "psad/ad.hpp"
#include "psad/data.hpp"
#include "psad/model.hpp"

namespace psad::kernels {

struct BatchGradients {
  ad::GradientMap grads;  // mean over the batch
  double generative = 0.0;
  double scorer = 0.0;
  double distillation = 0.0;
  double total = 0.0;
  /// Index within the batch of the first session with a non-finite loss, or
  /// -1 when every loss is finite.
  long non_finite = -1;
};

/// Sessions are reduced in chunks of this many, independent of thread count.
inline constexpr std::size_t kReductionChunk = 8;

BatchGradients batch_gradients_serial(const Model& model, const data::Batch& batch, Objective objective,
                                      std::uint64_t seed, std::uint64_t step);
BatchGradients batch_gradients_omp(const Model& model, const data::Batch& batch, Objective objective,
                                   std::uint64_t seed, std::uint64_t step, int threads);

using Rankings = std::vector<std::vector<std::size_t>>;

Rankings rank_batch_serial(const Model& model, const std::vector<data::PaddedSession>& sessions, Variant variant,
                           std::uint64_t seed);
Rankings rank_batch_omp(const Model& model, const std::vector<data::PaddedSession>& sessions, Variant variant,
                        std::uint64_t seed, int threads);

}  // namespace psad::kernels
