// Shared single-head self-attention encoder over gated item representations.

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "psad/ad.hpp"
#include "psad/rng.hpp"

namespace psad::encoder {

struct AttentionParams {
  ad::ParamId wq, wk, wv;
  static AttentionParams create(ad::ParameterStore& store, const std::string& prefix, std::size_t width, Rng& rng);
};

struct FeedForwardParams {
  ad::ParamId w1, b1, w2, b2;
  static FeedForwardParams create(ad::ParameterStore& store, const std::string& prefix, std::size_t width, Rng& rng);
};

struct NormParams {
  ad::ParamId gain, bias;
  static NormParams create(ad::ParameterStore& store, const std::string& prefix, std::size_t width);
};

struct EncoderLayerParams {
  AttentionParams attention;
  FeedForwardParams ffn;
  NormParams norm1, norm2;

  static EncoderLayerParams create(ad::ParameterStore& store, const std::string& prefix, std::size_t width,
                                   Rng& rng);
};

struct EncoderConfig {
  std::size_t layers = 1;
  std::size_t width = 32;
  double dropout = 0.0;
};

/// Row-major n_q x n_k block mask; nonzero entries are hidden from the query.
struct AttentionMask {
  std::size_t queries = 0;
  std::size_t keys = 0;
  std::vector<std::uint8_t> blocked;

  /// Hides the keys whose `key_valid` entry is 0 from every query.
  static AttentionMask from_keys(std::size_t queries, const std::vector<std::uint8_t>& key_valid);
};

/// softmax((q Wq)(kv Wk)^T / sqrt(d) + bias, masked) (kv Wv). `bias` may be
/// invalid (no bias). Throws DomainError on NaN logits.
ad::Tensor attend(ad::Graph& g, const ad::ParameterStore& store, const AttentionParams& params, ad::Tensor queries,
                  ad::Tensor keys_values, ad::Tensor bias, const AttentionMask& mask,
                  ad::Matrix* weights_out = nullptr);

/// gelu(x W1 + b1) W2 + b2 with hidden width 4d.
ad::Tensor feed_forward(ad::Graph& g, const ad::ParameterStore& store, const FeedForwardParams& params, ad::Tensor x);

ad::Tensor norm(ad::Graph& g, const ad::ParameterStore& store, const NormParams& params, ad::Tensor x);

/// Inverted dropout driven by `rng`; identity when rate is 0 or rng is null.
ad::Tensor dropout(ad::Graph& g, ad::Tensor x, double rate, Rng* rng);

/// H = LN(X + Attn(X)), H_tilde = LN(H + FFN(H)).
ad::Tensor attention_layer(ad::Graph& g, const ad::ParameterStore& store, const EncoderLayerParams& params,
                           ad::Tensor x, ad::Tensor position_bias, const std::vector<std::uint8_t>& key_valid,
                           double dropout_rate = 0.0, Rng* dropout_rng = nullptr,
                           ad::Matrix* weights_out = nullptr);

/// Applies the layers in order; `position_biases[l]` feeds layer l.
ad::Tensor encode(ad::Graph& g, const ad::ParameterStore& store, const std::vector<EncoderLayerParams>& layers,
                  ad::Tensor x, const std::vector<ad::Tensor>& position_biases,
                  const std::vector<std::uint8_t>& key_valid, double dropout_rate = 0.0, Rng* dropout_rng = nullptr);

}  // namespace psad::encoder
