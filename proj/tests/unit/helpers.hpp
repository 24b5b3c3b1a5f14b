// Small fixtures shared by the unit tests.

#pragma once

#include <cstdint>
#include <vector>

#include "psad/data.hpp"
#include "psad/model.hpp"
#include "psad/rng.hpp"

namespace psad::testing {

inline data::FeatureSchema tiny_schema() {
  data::FeatureSchema s;
  s.item_vocab = {5, 4};
  s.item_dense = 1;
  s.user_vocab = {3};
  s.user_dense = 2;
  return s;
}

inline ModelConfig tiny_config(std::size_t m = 4, std::size_t t = 3, std::size_t k = 2, std::size_t gamma = 1) {
  ModelConfig c;
  c.schema = tiny_schema();
  c.width = 8;
  c.layers = 1;
  c.max_history = 4;
  c.max_candidates = m;
  c.length = t;
  c.block_size = k;
  c.gamma = gamma;
  c.beam_width = 2;
  c.gate_hidden = 6;
  c.position_hidden = 4;
  return c;
}

inline data::Item random_item(const data::FeatureSchema& s, Rng& rng) {
  data::Item it;
  for (std::size_t v : s.item_vocab) it.sparse.push_back(static_cast<std::int64_t>(rng.index(v)));
  for (std::size_t f = 0; f < s.item_dense; ++f) it.dense.push_back(rng.uniform(-1.0, 1.0));
  return it;
}

/// Session with n history items, m candidates and at least one positive and
/// one negative label.
inline data::Session random_session(const data::FeatureSchema& s, std::size_t n, std::size_t m, Rng& rng) {
  data::Session out;
  for (std::size_t v : s.user_vocab) out.user.sparse.push_back(static_cast<std::int64_t>(rng.index(v)));
  for (std::size_t f = 0; f < s.user_dense; ++f) out.user.dense.push_back(rng.uniform(-1.0, 1.0));
  for (std::size_t i = 0; i < n; ++i) out.history.push_back(random_item(s, rng));
  for (std::size_t i = 0; i < m; ++i) out.candidates.push_back(random_item(s, rng));
  out.labels.assign(m, 0);
  for (std::size_t i = 0; i < m; ++i) out.labels[i] = rng.bernoulli(0.4) ? 1 : 0;
  const std::size_t pos = rng.index(m);
  out.labels[pos] = 1;
  out.labels[(pos + 1 + rng.index(m - 1)) % m] = 0;
  return out;
}

}  // namespace psad::testing
