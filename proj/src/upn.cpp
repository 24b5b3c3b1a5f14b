#include "psad/upn.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>

#include "psad/init.hpp"

namespace psad::upn {

using ad::Graph;
using ad::Matrix;
using ad::Tensor;

GateParams GateParams::create(ad::ParameterStore& store, std::size_t width, std::size_t user_width,
                              std::size_t hidden, Rng& rng) {
  GateParams p;
  p.width = width;
  p.user_width = user_width;
  const std::size_t in = width + user_width;
  p.mlp1_w1 = store.add("upn.gate.mlp1.w1", init::xavier(in, hidden, rng));
  p.mlp1_b1 = store.add("upn.gate.mlp1.b1", Matrix(1, hidden, 0.0));
  p.mlp1_w2 = store.add("upn.gate.mlp1.w2", init::xavier(hidden, width, rng));
  p.mlp1_b2 = store.add("upn.gate.mlp1.b2", Matrix(1, width, 0.0));
  p.mlp2_w1 = store.add("upn.gate.mlp2.w1", init::xavier(in, hidden, rng));
  p.mlp2_b1 = store.add("upn.gate.mlp2.b1", Matrix(1, hidden, 0.0));
  p.mlp2_w2 = store.add("upn.gate.mlp2.w2", init::xavier(hidden, width, rng));
  p.mlp2_b2 = store.add("upn.gate.mlp2.b2", Matrix(1, width, 0.0));
  p.gate_w = store.add("upn.gate.w", init::xavier(width, width, rng));
  // Start near the identity gate so early training sees most of X.
  p.gate_b = store.add("upn.gate.b", Matrix(1, width, 2.0));
  return p;
}

namespace {

Tensor affine(Graph& g, const ad::ParameterStore& store, Tensor x, ad::ParamId w, ad::ParamId b) {
  return ad::add(ad::matmul(x, g.param(store, w)), g.param(store, b));
}

Tensor repeat_row(Tensor row, std::size_t n) { return ad::gather_rows(row, std::vector<std::size_t>(n, 0)); }

}  // namespace

Tensor gate_values(Graph& g, const ad::ParameterStore& store, const GateParams& params, Tensor items,
                   Tensor user) {
  if (items.cols() != params.width || user.cols() != params.user_width || user.rows() != 1) {
    throw ad::ShapeError("personalized_gate: expected items n x " + std::to_string(params.width) +
                         " and user 1 x " + std::to_string(params.user_width));
  }
  Tensor joint = ad::concat_cols(ad::stop_gradient(items), repeat_row(user, items.rows()));
  Tensor g1 = affine(g, store, ad::gelu(affine(g, store, joint, params.mlp1_w1, params.mlp1_b1)), params.mlp1_w2,
                     params.mlp1_b2);
  Tensor g2 = ad::gelu(affine(g, store, ad::gelu(affine(g, store, joint, params.mlp2_w1, params.mlp2_b1)),
                              params.mlp2_w2, params.mlp2_b2));
  return ad::sigmoid(affine(g, store, ad::hadamard(g1, g2), params.gate_w, params.gate_b));
}

Tensor personalized_gate(Graph& g, const ad::ParameterStore& store, const GateParams& params, Tensor items,
                         Tensor user) {
  return ad::hadamard(gate_values(g, store, params, items, user), items);
}

PosEncodeParams PosEncodeParams::create(ad::ParameterStore& store, std::size_t layers, std::size_t encoder_radius,
                                        std::size_t decoder_radius, std::size_t user_width, std::size_t hidden,
                                        Rng& rng) {
  PosEncodeParams p;
  p.user_width = user_width;
  for (std::size_t l = 0; l < layers; ++l) {
    p.encoder.push_back({store.add("upn.pos.enc." + std::to_string(l),
                                   init::normal(1, 2 * encoder_radius + 1, 0.1, rng)),
                         encoder_radius});
    p.decoder.push_back({store.add("upn.pos.dec." + std::to_string(l),
                                   init::normal(1, 2 * decoder_radius + 1, 0.1, rng)),
                         decoder_radius});
  }
  p.mlp_w1 = store.add("upn.pos.mlp.w1", init::xavier(user_width + 1, hidden, rng));
  p.mlp_b1 = store.add("upn.pos.mlp.b1", Matrix(1, hidden, 0.0));
  p.mlp_w2 = store.add("upn.pos.mlp.w2", init::xavier(hidden, 1, rng));
  p.mlp_b2 = store.add("upn.pos.mlp.b2", Matrix(1, 1, 0.0));
  return p;
}

namespace {

const PosEncodeParams::Table& table_for(const PosEncodeParams& params, Stack stack, std::size_t layer) {
  const auto& tables = stack == Stack::encoder ? params.encoder : params.decoder;
  if (layer >= tables.size()) {
    throw std::out_of_range("position bias: layer " + std::to_string(layer) + " >= " +
                            std::to_string(tables.size()));
  }
  return tables[layer];
}

}  // namespace

Tensor offset_bias(Graph& g, const ad::ParameterStore& store, const PosEncodeParams& params, Stack stack,
                   std::size_t layer, Tensor user, bool personalize) {
  const auto& table = table_for(params, stack, layer);
  const std::size_t width = 2 * table.radius + 1;
  Tensor per_offset = ad::transpose(g.param(store, table.bias));  // width x 1
  if (!personalize) return per_offset;
  if (user.cols() != params.user_width) throw ad::ShapeError("position bias: user width mismatch");
  // P(i, j) takes one value per clipped offset, so evaluating the MLP once
  // per offset equals evaluating it for every (i, j) pair.
  Tensor u = ad::gather_rows(ad::stop_gradient(user), std::vector<std::size_t>(width, 0));
  Tensor in = ad::concat_cols(u, per_offset);
  Tensor h = ad::gelu(ad::add(ad::matmul(in, g.param(store, params.mlp_w1)), g.param(store, params.mlp_b1)));
  Tensor out = ad::add(ad::matmul(h, g.param(store, params.mlp_w2)), g.param(store, params.mlp_b2));
  return ad::add(per_offset, ad::tanh(out));
}

Tensor bias_matrix(Tensor per_offset, std::size_t radius, std::span<const std::size_t> positions) {
  const std::size_t n = positions.size();
  const auto r = static_cast<std::ptrdiff_t>(radius);
  std::vector<std::size_t> index(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const auto off = static_cast<std::ptrdiff_t>(positions[i]) - static_cast<std::ptrdiff_t>(positions[j]);
      index[i * n + j] = static_cast<std::size_t>(std::clamp(off, -r, r) + r);
    }
  }
  return ad::gather_elements(per_offset, n, n, std::move(index));
}

Tensor personalized_position_bias(Graph& g, const ad::ParameterStore& store, const PosEncodeParams& params,
                                  Stack stack, std::size_t layer, Tensor user,
                                  std::span<const std::size_t> positions, bool personalize) {
  const auto& table = table_for(params, stack, layer);
  return bias_matrix(offset_bias(g, store, params, stack, layer, user, personalize), table.radius, positions);
}

Tensor personalized_position_bias(Graph& g, const ad::ParameterStore& store, const PosEncodeParams& params,
                                  Stack stack, std::size_t layer, Tensor user, std::size_t size,
                                  bool personalize) {
  std::vector<std::size_t> positions(size);
  std::iota(positions.begin(), positions.end(), std::size_t{0});
  return personalized_position_bias(g, store, params, stack, layer, user, positions, personalize);
}

}  // namespace psad::upn
