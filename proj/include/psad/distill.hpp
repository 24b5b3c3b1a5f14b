// Scoring student and the online distillation objective.

#pragma once

#include <span>

#include "psad/ad.hpp"
#include "psad/rng.hpp"

namespace psad::distill {

/// d -> d -> 1 MLP with GeLU.
struct ScorerParams {
  ad::ParamId w1, b1, w2, b2;
  static ScorerParams create(ad::ParameterStore& store, std::size_t width, Rng& rng);
};

enum class Mode { online, offline };

struct DistillConfig {
  double alpha = 0.5;
  double temperature = 1.0;
  bool teacher_detach = true;
  Mode mode = Mode::online;
};

/// Pre-sigmoid scores, M x 1.
ad::Tensor score_logits(ad::Graph& g, const ad::ParameterStore& store, const ScorerParams& params,
                        ad::Tensor candidates);

/// s_i = sigmoid(MLP(h_i)), M x 1.
ad::Tensor score_candidates(ad::Graph& g, const ad::ParameterStore& store, const ScorerParams& params,
                            ad::Tensor candidates);

/// -sum_i y_i log s_i with s clamped to [1e-7, 1 - 1e-7]. With
/// `negative_term`, also -sum_i (1 - y_i) log(1 - s_i).
ad::Tensor scorer_loss(ad::Tensor scores, std::span<const int> labels, bool negative_term = false);

/// Column softmax of p over candidates, then the e^{-j} weighted average
/// over positions j = 1..T. Returns M x 1, wrapped in stop_gradient when
/// `detach` is set.
ad::Tensor aggregate_teacher(ad::Tensor probabilities, bool detach = true);

/// KL(softmax(p_hat / tau) || softmax(s / tau)) over M x 1 inputs.
ad::Tensor distillation_loss(ad::Tensor teacher, ad::Tensor student, double temperature);

/// L_gen + L_scorer + alpha * L_kd.
ad::Tensor total_loss(ad::Tensor generative, ad::Tensor scorer, ad::Tensor distillation, double alpha);

}  // namespace psad::distill
