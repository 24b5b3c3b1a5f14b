// Semi-autoregressive block decoder (the teacher): block planning, block
// decoding, mask-and-refine enhancement, probability matrix, generative
// loss and beam-search inference.

#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "psad/ad.hpp"
#include "psad/encoder.hpp"
#include "psad/rng.hpp"
#include "psad/upn.hpp"

namespace psad::generator {

/// Consecutive zero-based position blocks covering 0..T-1; every block but
/// the last has exactly K positions.
struct BlockPlan {
  std::size_t length = 0;
  std::size_t block_size = 0;
  std::vector<std::vector<std::size_t>> blocks;

  std::size_t block_of(std::size_t position) const { return position / block_size; }
};

BlockPlan block_indices(std::size_t length, std::size_t block_size);

struct DecoderLayerParams {
  encoder::AttentionParams self_attention;
  encoder::AttentionParams cross_attention;
  encoder::FeedForwardParams ffn;
  encoder::NormParams norm1, norm2, norm3;
};

struct DecoderParams {
  std::vector<DecoderLayerParams> layers;
  ad::ParamId slots = 0;  // max_positions x d output-slot embeddings
  ad::ParamId bos = 0;    // 1 x d begin-of-sequence context
  std::size_t max_positions = 0;
  std::size_t width = 0;

  static DecoderParams create(ad::ParameterStore& store, std::size_t layers, std::size_t width,
                              std::size_t max_positions, Rng& rng);
};

/// Per-session conditioning shared by every decoder call.
struct DecoderInputs {
  ad::Tensor memory;                      // encoder output, n x d
  std::vector<std::uint8_t> memory_valid;  // 1 = real row
  /// Per-layer self-attention position bias by offset (see upn::offset_bias).
  std::vector<ad::Tensor> offset_bias;
  std::size_t bias_radius = 0;
};

/// Y rows (|block| x d) for block `block` given one 1 x d context row per
/// position before the block. The sequence is [bos, context..., block...];
/// a row attends to bos and to rows of its own or earlier blocks only.
ad::Tensor decode_block(ad::Graph& g, const ad::ParameterStore& store, const DecoderParams& params,
                        const DecoderInputs& inputs, const BlockPlan& plan, std::size_t block,
                        std::span<const ad::Tensor> context);

struct Refinement {
  ad::Tensor states;
  std::vector<std::size_t> masked;  // sorted
};

/// Re-predicts `gamma` uniformly sampled positions of `states` (T x d) from
/// the unmasked positions and the memory. Unmasked rows are copied through.
Refinement contextual_enhance(ad::Graph& g, const ad::ParameterStore& store, const DecoderParams& params,
                              const DecoderInputs& inputs, ad::Tensor states, std::size_t gamma, Rng& rng);

/// p(i, j) = sigmoid(candidates_i . states_j), M x T.
ad::Tensor probability_matrix(ad::Tensor candidates, ad::Tensor states);

/// 1 / log2(j + 2) for zero-based position j.
double position_weight(std::size_t position);

inline constexpr double kProbabilityEpsilon = 1e-7;

/// sum_j w_j [ sum_i -y_i log p_ij + max(0, 1 - min_{y=1} p_ij + max_{y=0} p_ij) ],
/// p clamped to [eps, 1 - eps] inside the log. Needs a positive and a negative.
/// With `negative_term`, the cross-entropy also adds -(1 - y_i) log(1 - p_ij).
ad::Tensor generative_loss(ad::Tensor probabilities, std::span<const int> labels, bool negative_term = false);

struct TeacherOutput {
  ad::Tensor states;         // T x d after enhancement
  ad::Tensor probabilities;  // M x T
  std::vector<std::size_t> masked;
};

/// Training forward. Prior-block context is the softmax-weighted mixture of
/// candidate rows for each earlier position, keeping the pass differentiable.
TeacherOutput generate_soft(ad::Graph& g, const ad::ParameterStore& store, const DecoderParams& params,
                            const DecoderInputs& inputs, ad::Tensor candidates, const BlockPlan& plan,
                            std::size_t gamma, Rng& mask_rng);

struct Beam {
  std::vector<std::size_t> items;    // candidate index per filled position
  double score = 0.0;                // sum of log p over filled positions
  std::vector<ad::Tensor> states;    // 1 x d decoder state per filled position
  std::vector<ad::Tensor> context;   // hard context rows fed to later blocks
};

/// Scores a finished beam; the highest wins, ties go to the lexicographically
/// smallest item sequence.
using BeamEvaluator = std::function<double(const Beam&)>;

BeamEvaluator log_probability_evaluator();

/// log sigmoid(candidates . state) for every candidate.
std::vector<double> column_log_probabilities(ad::Tensor candidates, ad::Tensor state);

struct BeamSearchResult {
  std::vector<Beam> finalists;  // sorted by score, best first
  std::size_t chosen = 0;       // index picked by the evaluator
  const Beam& best() const { return finalists[chosen]; }
};

/// Block-by-block beam search; positions inside a block are filled in index
/// order, at most `beam_width` partial lists survive each position.
BeamSearchResult beam_search(ad::Graph& g, const ad::ParameterStore& store, const DecoderParams& params,
                             const DecoderInputs& inputs, ad::Tensor candidates, std::size_t length,
                             std::size_t block_size, std::size_t beam_width, const BeamEvaluator& evaluator);

/// Contextual enhancement of a finished beam: refines `gamma` masked slots
/// and re-fills them greedily in index order with items not used elsewhere.
std::vector<std::size_t> refine_beam(ad::Graph& g, const ad::ParameterStore& store, const DecoderParams& params,
                                     const DecoderInputs& inputs, ad::Tensor candidates, const Beam& beam,
                                     std::size_t gamma, Rng& mask_rng);

}  // namespace psad::generator
