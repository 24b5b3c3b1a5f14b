// Full PSAD model: shared embedding, user profile network and encoder, the
// generative teacher and the scoring student.

#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "psad/ad.hpp"
#include "psad/data.hpp"
#include "psad/distill.hpp"
#include "psad/embedding.hpp"
#include "psad/encoder.hpp"
#include "psad/generator.hpp"
#include "psad/upn.hpp"

namespace psad {

struct ModelConfig {
  data::FeatureSchema schema;
  std::size_t width = 32;
  std::size_t layers = 1;
  std::size_t max_history = 10;
  std::size_t max_candidates = 20;
  std::size_t length = 10;      // T
  std::size_t block_size = 4;   // K
  std::size_t gamma = 1;
  std::size_t beam_width = 4;
  std::size_t gate_hidden = 32;
  std::size_t position_hidden = 16;
  double dropout = 0.0;
  bool disable_sa = false;
  bool disable_ce = false;
  bool disable_pg = false;
  bool disable_ppe = false;
  /// Adds the -(1 - y) log(1 - p) half to both cross-entropy terms.
  bool negative_cross_entropy = true;
  distill::DistillConfig distill;

  /// K, or T when semi-autoregression is disabled.
  std::size_t effective_block_size() const { return disable_sa ? length : block_size; }
  /// gamma, or 0 when contextual enhancement is disabled.
  std::size_t effective_gamma() const { return disable_ce ? 0 : gamma; }
};

struct Model {
  ModelConfig config;
  ad::ParameterStore params;
  data::EmbeddingTables embedding;
  upn::GateParams gate;
  upn::PosEncodeParams positions;
  std::vector<encoder::EncoderLayerParams> encoder;
  generator::DecoderParams decoder;
  distill::ScorerParams scorer;

  /// Parameters are drawn from a stream derived from `seed`.
  static Model create(const ModelConfig& config, std::uint64_t seed);

  /// Parameters used only by the scoring head.
  std::vector<ad::ParamId> scorer_params() const;
  /// Marks every non-scorer parameter trainable or frozen.
  void set_teacher_trainable(bool trainable);
  void set_scorer_trainable(bool trainable);
};

enum class Variant { generator, student };
const char* variant_name(Variant v);

/// Shared representation of one session.
struct EncodedSession {
  ad::Tensor user;        // 1 x d_u
  ad::Tensor items;       // X, n x d (history then candidates, padded rows included)
  ad::Tensor gated;       // X_hat
  ad::Tensor hidden;      // H_tilde^L
  ad::Tensor candidates;  // real candidate rows of H_tilde^L, M x d
  std::vector<std::size_t> candidate_index;  // padded-session index of each real candidate
  std::vector<int> labels;                   // aligned with candidate_index
  std::vector<std::size_t> position_ids;
  std::vector<std::uint8_t> key_valid;
  std::vector<ad::Tensor> encoder_bias;  // n x n per layer
  generator::DecoderInputs decoder_inputs;
};

/// Position ids: history row i -> i, candidate row c -> (real history) + c,
/// padded rows after every real row. Padding never shifts real offsets.
std::vector<std::size_t> session_positions(const data::PaddedSession& session);

EncodedSession encode_session(ad::Graph& g, const Model& model, const data::PaddedSession& session,
                              Rng* dropout_rng = nullptr);

enum class Objective {
  joint,           // L_gen + L_scorer + alpha * KL
  generator_only,  // L_gen
  student_only,    // L_scorer + alpha * KL
};

struct LossTerms {
  ad::Tensor generative, scorer, distillation, total;
  ad::Tensor probabilities;  // M x T
  ad::Tensor scores;         // M x 1
  ad::Tensor teacher;        // M x 1
  EncodedSession encoded;
};

/// Training forward for one session. Masking and dropout draw from streams
/// derived from `session_seed` only.
LossTerms forward_losses(ad::Graph& g, const Model& model, const data::PaddedSession& session, Objective objective,
                         std::uint64_t session_seed, bool training = true);

/// Seed for session `source` at optimisation step `step`.
std::uint64_t session_seed(std::uint64_t master, std::uint64_t step, std::size_t source);

/// Student scores s_i for real candidates, in padded-session order.
std::vector<double> student_scores(const Model& model, const data::PaddedSession& session);

/// Top-T candidates (padded-session indices) by descending score; equal
/// scores keep the lower index first.
std::vector<std::size_t> rank_student(const Model& model, const data::PaddedSession& session);

/// Beam search followed by contextual enhancement of the chosen beam.
/// `evaluator` defaults to cumulative log-probability.
std::vector<std::size_t> rank_generator(const Model& model, const data::PaddedSession& session,
                                        std::uint64_t seed,
                                        const generator::BeamEvaluator* evaluator = nullptr);

std::vector<std::size_t> rank_session(const Model& model, const data::PaddedSession& session, Variant variant,
                                      std::uint64_t seed);

}  // namespace psad
