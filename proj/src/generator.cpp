#include "psad/generator.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

#include "psad/init.hpp"

namespace psad::generator {

using ad::Graph;
using ad::Matrix;
using ad::Tensor;

BlockPlan block_indices(std::size_t length, std::size_t block_size) {
  if (block_size == 0) throw std::invalid_argument("block_indices: block size K must be positive");
  if (length == 0) throw std::invalid_argument("block_indices: length T must be positive");
  if (block_size > length) throw std::invalid_argument("block_indices: need K <= T");
  BlockPlan plan;
  plan.length = length;
  plan.block_size = block_size;
  for (std::size_t start = 0; start < length; start += block_size) {
    std::vector<std::size_t> block;
    for (std::size_t j = start; j < std::min(start + block_size, length); ++j) block.push_back(j);
    plan.blocks.push_back(std::move(block));
  }
  return plan;
}

DecoderParams DecoderParams::create(ad::ParameterStore& store, std::size_t layers, std::size_t width,
                                    std::size_t max_positions, Rng& rng) {
  DecoderParams p;
  p.max_positions = max_positions;
  p.width = width;
  for (std::size_t l = 0; l < layers; ++l) {
    const std::string prefix = "dec." + std::to_string(l);
    DecoderLayerParams layer;
    layer.self_attention = encoder::AttentionParams::create(store, prefix + ".self", width, rng);
    layer.cross_attention = encoder::AttentionParams::create(store, prefix + ".cross", width, rng);
    layer.ffn = encoder::FeedForwardParams::create(store, prefix + ".ffn", width, rng);
    layer.norm1 = encoder::NormParams::create(store, prefix + ".ln1", width);
    layer.norm2 = encoder::NormParams::create(store, prefix + ".ln2", width);
    layer.norm3 = encoder::NormParams::create(store, prefix + ".ln3", width);
    p.layers.push_back(layer);
  }
  p.slots = store.add("dec.slots", init::normal(max_positions, width, 1.0, rng));
  p.bos = store.add("dec.bos", init::normal(1, width, 1.0, rng));
  return p;
}

namespace {

std::vector<std::size_t> iota(std::size_t begin, std::size_t end) {
  std::vector<std::size_t> v(end - begin);
  std::iota(v.begin(), v.end(), begin);
  return v;
}

/// Decoder stack over `x`, whose row r sits at position id r.
Tensor run_layers(Graph& g, const ad::ParameterStore& store, const DecoderParams& params,
                  const DecoderInputs& inputs, Tensor x, const encoder::AttentionMask& self_mask) {
  const std::vector<std::size_t> positions = iota(0, x.rows());
  const auto cross_mask = encoder::AttentionMask::from_keys(x.rows(), inputs.memory_valid);
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    const DecoderLayerParams& layer = params.layers[l];
    Tensor bias;
    if (l < inputs.offset_bias.size()) bias = upn::bias_matrix(inputs.offset_bias[l], inputs.bias_radius, positions);
    Tensor h = encoder::norm(
        g, store, layer.norm1,
        ad::add(x, encoder::attend(g, store, layer.self_attention, x, x, bias, self_mask)));
    h = encoder::norm(g, store, layer.norm2,
                      ad::add(h, encoder::attend(g, store, layer.cross_attention, h, inputs.memory, Tensor{},
                                                 cross_mask)));
    x = encoder::norm(g, store, layer.norm3, ad::add(h, encoder::feed_forward(g, store, layer.ffn, h)));
  }
  return x;
}

}  // namespace

Tensor decode_block(Graph& g, const ad::ParameterStore& store, const DecoderParams& params,
                    const DecoderInputs& inputs, const BlockPlan& plan, std::size_t block,
                    std::span<const Tensor> context) {
  if (block >= plan.blocks.size()) throw std::out_of_range("decode_block: block index out of range");
  const std::vector<std::size_t>& positions = plan.blocks[block];
  const std::size_t start = positions.front();
  const std::size_t end = positions.back() + 1;
  if (context.size() != start) {
    throw std::invalid_argument("decode_block: block starts at position " + std::to_string(start) + " but " +
                                std::to_string(context.size()) + " context rows were given");
  }
  if (end > params.max_positions) throw std::invalid_argument("decode_block: position beyond slot embeddings");

  Tensor slots = g.param(store, params.slots);
  std::vector<Tensor> rows{g.param(store, params.bos)};
  if (start > 0) {
    rows.push_back(ad::add(ad::gather_rows(slots, iota(0, start)), ad::concat_rows(context)));
  }
  rows.push_back(ad::gather_rows(slots, iota(start, end)));
  Tensor x = ad::concat_rows(rows);

  // Row 0 is bos (block "-1"); row r >= 1 holds position r - 1.
  const std::size_t n = end + 1;
  encoder::AttentionMask mask;
  mask.queries = mask.keys = n;
  mask.blocked.assign(n * n, 0);
  auto block_id = [&](std::size_t row) -> long {
    return row == 0 ? -1L : static_cast<long>(plan.block_of(row - 1));
  };
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < n; ++k) mask.blocked[i * n + k] = block_id(k) > block_id(i) ? 1 : 0;

  Tensor out = run_layers(g, store, params, inputs, x, mask);
  return ad::gather_rows(out, iota(start + 1, end + 1));
}

Refinement contextual_enhance(Graph& g, const ad::ParameterStore& store, const DecoderParams& params,
                              const DecoderInputs& inputs, Tensor states, std::size_t gamma, Rng& rng) {
  const std::size_t length = states.rows();
  if (gamma >= length) {
    throw std::invalid_argument("contextual_enhance: need gamma < T (gamma=" + std::to_string(gamma) +
                                ", T=" + std::to_string(length) + ")");
  }
  Refinement out{states, {}};
  if (gamma == 0) return out;

  std::vector<std::size_t> order = iota(0, length);
  for (std::size_t i = 0; i < gamma; ++i) std::swap(order[i], order[i + rng.index(length - i)]);
  out.masked.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(gamma));
  std::sort(out.masked.begin(), out.masked.end());
  std::vector<std::uint8_t> is_masked(length, 0);
  for (std::size_t j : out.masked) is_masked[j] = 1;

  // Masked slots enter as bare slot embeddings, unmasked ones carry their state.
  Tensor slots = ad::gather_rows(g.param(store, params.slots), iota(0, length));
  Matrix keep(length, params.width, 0.0);
  for (std::size_t j = 0; j < length; ++j)
    if (!is_masked[j]) std::fill_n(&keep.data[j * params.width], params.width, 1.0);
  Tensor carried = ad::hadamard(states, g.constant(std::move(keep)));
  const std::vector<Tensor> rows{g.param(store, params.bos), ad::add(slots, carried)};
  Tensor x = ad::concat_rows(rows);

  const std::size_t n = length + 1;
  encoder::AttentionMask mask;
  mask.queries = mask.keys = n;
  mask.blocked.assign(n * n, 0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 1; k < n; ++k) mask.blocked[i * n + k] = is_masked[k - 1];

  Tensor refined = run_layers(g, store, params, inputs, x, mask);
  std::vector<Tensor> pieces;
  for (std::size_t j = 0; j < length; ++j) {
    pieces.push_back(is_masked[j] ? ad::gather_rows(refined, {j + 1}) : ad::gather_rows(states, {j}));
  }
  out.states = ad::concat_rows(pieces);
  return out;
}

Tensor probability_matrix(Tensor candidates, Tensor states) {
  if (candidates.cols() != states.cols()) {
    throw ad::ShapeError("probability_matrix: candidate width " + std::to_string(candidates.cols()) +
                         " != state width " + std::to_string(states.cols()));
  }
  return ad::sigmoid(ad::matmul(candidates, ad::transpose(states)));
}

double position_weight(std::size_t position) { return 1.0 / std::log2(static_cast<double>(position) + 2.0); }

Tensor generative_loss(Tensor probabilities, std::span<const int> labels, bool negative_term) {
  Graph& g = *probabilities.graph();
  const std::size_t m = probabilities.rows();
  const std::size_t t = probabilities.cols();
  if (labels.size() != m) throw ad::ShapeError("generative_loss: labels do not match candidates");
  std::vector<std::size_t> pos, neg;
  for (std::size_t i = 0; i < m; ++i) (labels[i] == 1 ? pos : neg).push_back(i);
  if (pos.empty() || neg.empty()) {
    throw std::invalid_argument("generative_loss: need at least one positive and one negative label");
  }
  Tensor log_p = ad::log(ad::clamp(probabilities, kProbabilityEpsilon, 1.0 - kProbabilityEpsilon));
  Tensor ce = ad::scale(ad::matmul(g.constant(Matrix(1, pos.size(), 1.0)), ad::gather_rows(log_p, pos)), -1.0);
  if (negative_term) {
    Tensor q = ad::offset(ad::scale(ad::gather_rows(probabilities, neg), -1.0), 1.0);
    Tensor log_q = ad::log(ad::clamp(q, kProbabilityEpsilon, 1.0 - kProbabilityEpsilon));
    ce = ad::sub(ce, ad::matmul(g.constant(Matrix(1, neg.size(), 1.0)), log_q));
  }
  Tensor margin = ad::sub(ad::max_over_rows(ad::gather_rows(probabilities, neg)),
                          ad::min_over_rows(ad::gather_rows(probabilities, pos)));
  Tensor hinge = ad::relu(ad::offset(margin, 1.0));
  Matrix weights(t, 1);
  for (std::size_t j = 0; j < t; ++j) weights.data[j] = position_weight(j);
  return ad::matmul(ad::add(ce, hinge), g.constant(std::move(weights)));
}

TeacherOutput generate_soft(Graph& g, const ad::ParameterStore& store, const DecoderParams& params,
                            const DecoderInputs& inputs, Tensor candidates, const BlockPlan& plan,
                            std::size_t gamma, Rng& mask_rng) {
  Tensor candidates_t = ad::transpose(candidates);
  std::vector<Tensor> states;
  std::vector<Tensor> context;
  for (std::size_t b = 0; b < plan.blocks.size(); ++b) {
    Tensor block_states = decode_block(g, store, params, inputs, plan, b, context);
    const bool last = b + 1 == plan.blocks.size();
    for (std::size_t k = 0; k < plan.blocks[b].size(); ++k) {
      Tensor y = ad::gather_rows(block_states, {k});
      states.push_back(y);
      if (!last) {
        Tensor weights = ad::row_softmax(ad::matmul(y, candidates_t));
        context.push_back(ad::matmul(weights, candidates));
      }
    }
  }
  Refinement refined = contextual_enhance(g, store, params, inputs, ad::concat_rows(states), gamma, mask_rng);
  TeacherOutput out;
  out.states = refined.states;
  out.masked = std::move(refined.masked);
  out.probabilities = probability_matrix(candidates, out.states);
  return out;
}

// ---------------------------------------------------------------------------
// Inference

BeamEvaluator log_probability_evaluator() {
  return [](const Beam& beam) { return beam.score; };
}

namespace {

double log_sigmoid(double x) { return x >= 0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x)); }

/// Best first; equal scores fall back to the smaller item sequence.
bool beam_before(const Beam& a, const Beam& b) {
  if (a.score != b.score) return a.score > b.score;
  return a.items < b.items;
}

}  // namespace

std::vector<double> column_log_probabilities(Tensor candidates, Tensor state) {
  const Matrix& c = candidates.value();
  const Matrix& y = state.value();
  std::vector<double> out(c.rows);
  for (std::size_t i = 0; i < c.rows; ++i) {
    double dot = 0.0;
    for (std::size_t k = 0; k < c.cols; ++k) dot += c(i, k) * y.data[k];
    out[i] = log_sigmoid(dot);
  }
  return out;
}

BeamSearchResult beam_search(Graph& g, const ad::ParameterStore& store, const DecoderParams& params,
                             const DecoderInputs& inputs, Tensor candidates, std::size_t length,
                             std::size_t block_size, std::size_t beam_width, const BeamEvaluator& evaluator) {
  const std::size_t m = candidates.rows();
  if (beam_width < 1) throw std::invalid_argument("beam_search: beam width must be >= 1");
  if (length > m) {
    throw std::invalid_argument("beam_search: T=" + std::to_string(length) + " exceeds M=" + std::to_string(m));
  }
  const BlockPlan plan = block_indices(length, block_size);

  std::vector<Beam> beams(1);
  for (std::size_t b = 0; b < plan.blocks.size(); ++b) {
    struct Partial {
      Beam beam;
      Tensor block_states;
      std::vector<std::vector<double>> log_p;  // per block column
    };
    std::vector<Partial> partials;
    for (Beam& beam : beams) {
      Partial p{std::move(beam), {}, {}};
      p.block_states = decode_block(g, store, params, inputs, plan, b, p.beam.context);
      for (std::size_t k = 0; k < plan.blocks[b].size(); ++k) {
        p.log_p.push_back(column_log_probabilities(candidates, ad::gather_rows(p.block_states, {k})));
      }
      partials.push_back(std::move(p));
    }

    for (std::size_t k = 0; k < plan.blocks[b].size(); ++k) {
      std::vector<Partial> expanded;
      for (const Partial& p : partials) {
        for (std::size_t i = 0; i < m; ++i) {
          if (std::find(p.beam.items.begin(), p.beam.items.end(), i) != p.beam.items.end()) continue;
          Partial next = p;
          next.beam.items.push_back(i);
          next.beam.score += p.log_p[k][i];
          expanded.push_back(std::move(next));
        }
      }
      std::stable_sort(expanded.begin(), expanded.end(),
                       [](const Partial& a, const Partial& c) { return beam_before(a.beam, c.beam); });
      if (expanded.size() > beam_width) expanded.resize(beam_width);
      partials = std::move(expanded);
    }

    beams.clear();
    for (Partial& p : partials) {
      const std::size_t first = plan.blocks[b].front();
      for (std::size_t k = 0; k < plan.blocks[b].size(); ++k) {
        p.beam.states.push_back(ad::gather_rows(p.block_states, {k}));
        p.beam.context.push_back(ad::gather_rows(candidates, {p.beam.items[first + k]}));
      }
      beams.push_back(std::move(p.beam));
    }
  }

  BeamSearchResult result;
  result.finalists = std::move(beams);
  double best = 0.0;
  for (std::size_t i = 0; i < result.finalists.size(); ++i) {
    const double v = evaluator(result.finalists[i]);
    if (i == 0 || v > best) {
      best = v;
      result.chosen = i;
    }
  }
  return result;
}

std::vector<std::size_t> refine_beam(Graph& g, const ad::ParameterStore& store, const DecoderParams& params,
                                     const DecoderInputs& inputs, Tensor candidates, const Beam& beam,
                                     std::size_t gamma, Rng& mask_rng) {
  std::vector<std::size_t> ranking = beam.items;
  if (gamma == 0) return ranking;
  Refinement refined = contextual_enhance(g, store, params, inputs, ad::concat_rows(beam.states), gamma, mask_rng);
  std::vector<std::uint8_t> used(candidates.rows(), 0);
  std::vector<std::uint8_t> is_masked(ranking.size(), 0);
  for (std::size_t j : refined.masked) is_masked[j] = 1;
  for (std::size_t j = 0; j < ranking.size(); ++j)
    if (!is_masked[j]) used[ranking[j]] = 1;
  for (std::size_t j : refined.masked) {
    const auto scores = column_log_probabilities(candidates, ad::gather_rows(refined.states, {j}));
    std::size_t pick = candidates.rows();
    for (std::size_t i = 0; i < scores.size(); ++i) {
      if (used[i]) continue;
      if (pick == candidates.rows() || scores[i] > scores[pick]) pick = i;
    }
    ranking[j] = pick;
    used[pick] = 1;
  }
  return ranking;
}

}  // namespace psad::generator
