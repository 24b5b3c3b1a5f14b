#include "psad/encoder.hpp"

#include <cmath>
#include <limits>

#include "psad/init.hpp"

namespace psad::encoder {

using ad::Graph;
using ad::Matrix;
using ad::Tensor;

AttentionParams AttentionParams::create(ad::ParameterStore& store, const std::string& prefix, std::size_t width,
                                        Rng& rng) {
  AttentionParams p;
  p.wq = store.add(prefix + ".wq", init::xavier(width, width, rng));
  p.wk = store.add(prefix + ".wk", init::xavier(width, width, rng));
  p.wv = store.add(prefix + ".wv", init::xavier(width, width, rng));
  return p;
}

FeedForwardParams FeedForwardParams::create(ad::ParameterStore& store, const std::string& prefix, std::size_t width,
                                            Rng& rng) {
  FeedForwardParams p;
  p.w1 = store.add(prefix + ".w1", init::xavier(width, 4 * width, rng));
  p.b1 = store.add(prefix + ".b1", Matrix(1, 4 * width, 0.0));
  p.w2 = store.add(prefix + ".w2", init::xavier(4 * width, width, rng));
  p.b2 = store.add(prefix + ".b2", Matrix(1, width, 0.0));
  return p;
}

NormParams NormParams::create(ad::ParameterStore& store, const std::string& prefix, std::size_t width) {
  return {store.add(prefix + ".gain", Matrix(1, width, 1.0)), store.add(prefix + ".bias", Matrix(1, width, 0.0))};
}

EncoderLayerParams EncoderLayerParams::create(ad::ParameterStore& store, const std::string& prefix,
                                              std::size_t width, Rng& rng) {
  EncoderLayerParams p;
  p.attention = AttentionParams::create(store, prefix + ".attn", width, rng);
  p.ffn = FeedForwardParams::create(store, prefix + ".ffn", width, rng);
  p.norm1 = NormParams::create(store, prefix + ".ln1", width);
  p.norm2 = NormParams::create(store, prefix + ".ln2", width);
  return p;
}

AttentionMask AttentionMask::from_keys(std::size_t queries, const std::vector<std::uint8_t>& key_valid) {
  AttentionMask m;
  m.queries = queries;
  m.keys = key_valid.size();
  m.blocked.resize(queries * m.keys);
  for (std::size_t q = 0; q < queries; ++q)
    for (std::size_t k = 0; k < m.keys; ++k) m.blocked[q * m.keys + k] = key_valid[k] ? 0 : 1;
  return m;
}

Tensor attend(Graph& g, const ad::ParameterStore& store, const AttentionParams& params, Tensor queries,
              Tensor keys_values, Tensor bias, const AttentionMask& mask, Matrix* weights_out) {
  const std::size_t width = queries.cols();
  Tensor q = ad::matmul(queries, g.param(store, params.wq));
  Tensor k = ad::matmul(keys_values, g.param(store, params.wk));
  Tensor v = ad::matmul(keys_values, g.param(store, params.wv));
  Tensor logits = ad::scale(ad::matmul(q, ad::transpose(k)), 1.0 / std::sqrt(static_cast<double>(width)));
  if (bias.valid()) logits = ad::add(logits, bias);
  for (double x : logits.value().data) {
    if (std::isnan(x)) throw ad::DomainError("attention: NaN in logits (training diverged?)");
  }
  if (mask.queries != logits.rows() || mask.keys != logits.cols()) {
    throw ad::ShapeError("attention: mask shape does not match logits");
  }
  logits = ad::masked_fill(logits, mask.blocked, -std::numeric_limits<double>::infinity());
  Tensor weights = ad::row_softmax(logits);
  if (weights_out != nullptr) *weights_out = weights.value();
  return ad::matmul(weights, v);
}

Tensor feed_forward(Graph& g, const ad::ParameterStore& store, const FeedForwardParams& params, Tensor x) {
  Tensor h = ad::gelu(ad::add(ad::matmul(x, g.param(store, params.w1)), g.param(store, params.b1)));
  return ad::add(ad::matmul(h, g.param(store, params.w2)), g.param(store, params.b2));
}

Tensor norm(Graph& g, const ad::ParameterStore& store, const NormParams& params, Tensor x) {
  return ad::layer_norm(x, g.param(store, params.gain), g.param(store, params.bias));
}

Tensor dropout(Graph& g, Tensor x, double rate, Rng* rng) {
  if (rate <= 0.0 || rng == nullptr) return x;
  Matrix keep(x.rows(), x.cols());
  for (double& v : keep.data) v = rng->uniform() < rate ? 0.0 : 1.0 / (1.0 - rate);
  return ad::hadamard(x, g.constant(std::move(keep)));
}

Tensor attention_layer(Graph& g, const ad::ParameterStore& store, const EncoderLayerParams& params, Tensor x,
                       Tensor position_bias, const std::vector<std::uint8_t>& key_valid, double dropout_rate,
                       Rng* dropout_rng, Matrix* weights_out) {
  const auto mask = AttentionMask::from_keys(x.rows(), key_valid);
  Tensor attended = attend(g, store, params.attention, x, x, position_bias, mask, weights_out);
  Tensor h = norm(g, store, params.norm1, ad::add(x, dropout(g, attended, dropout_rate, dropout_rng)));
  Tensor f = dropout(g, feed_forward(g, store, params.ffn, h), dropout_rate, dropout_rng);
  return norm(g, store, params.norm2, ad::add(h, f));
}

Tensor encode(Graph& g, const ad::ParameterStore& store, const std::vector<EncoderLayerParams>& layers, Tensor x,
              const std::vector<Tensor>& position_biases, const std::vector<std::uint8_t>& key_valid,
              double dropout_rate, Rng* dropout_rng) {
  if (layers.empty()) throw std::invalid_argument("encode: need at least one layer");
  if (position_biases.size() != layers.size()) throw std::invalid_argument("encode: one position bias per layer");
  for (std::size_t l = 0; l < layers.size(); ++l) {
    x = attention_layer(g, store, layers[l], x, position_biases[l], key_valid, dropout_rate, dropout_rng);
  }
  return x;
}

}  // namespace psad::encoder
