// User Profile Network: personalized gating of item representations and
// user-conditioned relative position bias.

#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "psad/ad.hpp"
#include "psad/rng.hpp"

namespace psad::upn {

/// MLP1 and MLP2 map (d + d_u) -> hidden -> d; the gate maps d -> d.
struct GateParams {
  ad::ParamId mlp1_w1, mlp1_b1, mlp1_w2, mlp1_b2;
  ad::ParamId mlp2_w1, mlp2_b1, mlp2_w2, mlp2_b2;
  ad::ParamId gate_w, gate_b;
  std::size_t width = 0;
  std::size_t user_width = 0;

  static GateParams create(ad::ParameterStore& store, std::size_t width, std::size_t user_width,
                           std::size_t hidden, Rng& rng);
};

/// S = sigmoid(gate(G1 * G2)) alone, n x d. X enters only through sg(X).
ad::Tensor gate_values(ad::Graph& g, const ad::ParameterStore& store, const GateParams& params, ad::Tensor items,
                       ad::Tensor user);

/// X_hat = S * X with S = sigmoid(gate(G1 * G2)),
/// G1 = MLP1(sg(X) ++ P_u), G2 = gelu(MLP2(sg(X) ++ P_u)).
/// X gets gradient only through the final product; P_u through both MLPs.
ad::Tensor personalized_gate(ad::Graph& g, const ad::ParameterStore& store, const GateParams& params,
                             ad::Tensor items, ad::Tensor user);

/// One relative-offset bias table per attention stack and layer, plus one
/// MLP (d_u + 1) -> hidden -> 1 shared by all of them.
struct PosEncodeParams {
  struct Table {
    ad::ParamId bias;     // 1 x (2 * radius + 1), entry k is offset k - radius
    std::size_t radius = 0;
  };
  std::vector<Table> encoder;
  std::vector<Table> decoder;
  ad::ParamId mlp_w1, mlp_b1, mlp_w2, mlp_b2;
  std::size_t user_width = 0;

  static PosEncodeParams create(ad::ParameterStore& store, std::size_t layers, std::size_t encoder_radius,
                                std::size_t decoder_radius, std::size_t user_width, std::size_t hidden,
                                Rng& rng);
};

enum class Stack { encoder, decoder };

/// Bias per clipped offset, (2 * radius + 1) x 1, entry k for offset
/// k - radius: P + tanh(MLP(sg(P_u) ++ P)) when `personalize`, else P.
ad::Tensor offset_bias(ad::Graph& g, const ad::ParameterStore& store, const PosEncodeParams& params, Stack stack,
                       std::size_t layer, ad::Tensor user, bool personalize = true);

/// Expands an offset_bias column into the n x n matrix for `positions`.
ad::Tensor bias_matrix(ad::Tensor per_offset, std::size_t radius, std::span<const std::size_t> positions);

/// P_hat(i, j) = P(i, j) + tanh(MLP(sg(P_u) ++ P(i, j))) where
/// P(i, j) = table[clip(pos_i - pos_j)]. With `personalize` false, returns P.
/// `positions` holds one position id per sequence row.
ad::Tensor personalized_position_bias(ad::Graph& g, const ad::ParameterStore& store,
                                      const PosEncodeParams& params, Stack stack, std::size_t layer,
                                      ad::Tensor user, std::span<const std::size_t> positions,
                                      bool personalize = true);

/// Convenience form over positions 0..size-1.
ad::Tensor personalized_position_bias(ad::Graph& g, const ad::ParameterStore& store,
                                      const PosEncodeParams& params, Stack stack, std::size_t layer,
                                      ad::Tensor user, std::size_t size, bool personalize = true);

}  // namespace psad::upn
