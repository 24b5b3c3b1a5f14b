#include "psad/distill.hpp"

#include <cmath>
#include <stdexcept>

#include "psad/init.hpp"

namespace psad::distill {

using ad::Graph;
using ad::Matrix;
using ad::Tensor;

ScorerParams ScorerParams::create(ad::ParameterStore& store, std::size_t width, Rng& rng) {
  ScorerParams p;
  p.w1 = store.add("scorer.w1", init::xavier(width, width, rng));
  p.b1 = store.add("scorer.b1", Matrix(1, width, 0.0));
  p.w2 = store.add("scorer.w2", init::xavier(width, 1, rng));
  p.b2 = store.add("scorer.b2", Matrix(1, 1, 0.0));
  return p;
}

Tensor score_logits(Graph& g, const ad::ParameterStore& store, const ScorerParams& params, Tensor candidates) {
  Tensor h = ad::gelu(ad::add(ad::matmul(candidates, g.param(store, params.w1)), g.param(store, params.b1)));
  return ad::add(ad::matmul(h, g.param(store, params.w2)), g.param(store, params.b2));
}

Tensor score_candidates(Graph& g, const ad::ParameterStore& store, const ScorerParams& params, Tensor candidates) {
  return ad::sigmoid(score_logits(g, store, params, candidates));
}

Tensor scorer_loss(Tensor scores, std::span<const int> labels, bool negative_term) {
  if (scores.cols() != 1 || scores.rows() != labels.size()) {
    throw ad::ShapeError("scorer_loss: expected " + std::to_string(labels.size()) + " x 1 scores");
  }
  Graph& g = *scores.graph();
  Matrix y(1, labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) y.data[i] = labels[i] == 1 ? 1.0 : 0.0;
  Tensor log_s = ad::log(ad::clamp(scores, 1e-7, 1.0 - 1e-7));
  Tensor loss = ad::scale(ad::matmul(g.constant(y), log_s), -1.0);
  if (!negative_term) return loss;
  Matrix not_y(1, labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) not_y.data[i] = 1.0 - y.data[i];
  Tensor log_q = ad::log(ad::clamp(ad::offset(ad::scale(scores, -1.0), 1.0), 1e-7, 1.0 - 1e-7));
  return ad::sub(loss, ad::matmul(g.constant(std::move(not_y)), log_q));
}

Tensor aggregate_teacher(Tensor probabilities, bool detach) {
  Graph& g = *probabilities.graph();
  const std::size_t t = probabilities.cols();
  Tensor column_softmax = ad::transpose(ad::row_softmax(ad::transpose(probabilities)));  // M x T
  Matrix decay(t, 1);
  double norm = 0.0;
  for (std::size_t j = 0; j < t; ++j) {
    decay.data[j] = std::exp(-static_cast<double>(j + 1));
    norm += decay.data[j];
  }
  for (double& w : decay.data) w /= norm;
  Tensor target = ad::matmul(column_softmax, g.constant(std::move(decay)));
  return detach ? ad::stop_gradient(target) : target;
}

Tensor distillation_loss(Tensor teacher, Tensor student, double temperature) {
  if (!(temperature > 0.0)) throw std::invalid_argument("distillation_loss: temperature must be positive");
  if (teacher.rows() != student.rows() || teacher.cols() != 1 || student.cols() != 1) {
    throw ad::ShapeError("distillation_loss: expected two M x 1 vectors");
  }
  Tensor p = ad::row_softmax(ad::scale(ad::transpose(teacher), 1.0 / temperature));
  Tensor q = ad::row_softmax(ad::scale(ad::transpose(student), 1.0 / temperature));
  return ad::sum(ad::hadamard(p, ad::sub(ad::log(p), ad::log(q))));
}

Tensor total_loss(Tensor generative, Tensor scorer, Tensor distillation, double alpha) {
  if (alpha < 0.0) throw std::invalid_argument("total_loss: alpha must be non-negative");
  return ad::add(ad::add(generative, scorer), ad::scale(distillation, alpha));
}

}  // namespace psad::distill
