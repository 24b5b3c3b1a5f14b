// Embedding layer: per-field sparse tables, dense features, projection to
// model width.

#pragma once

#include <span>
#include <vector>

#include "psad/ad.hpp"
#include "psad/data.hpp"
#include "psad/rng.hpp"

namespace psad::data {

struct EmbeddingTables {
  FeatureSchema schema;
  DenseStats stats;
  std::size_t model_width = 0;
  std::vector<ad::ParamId> item_tables;
  std::vector<ad::ParamId> user_tables;
  ad::ParamId projection_weight = 0;  // item_width x model_width
  ad::ParamId projection_bias = 0;    // 1 x model_width

  static EmbeddingTables create(ad::ParameterStore& store, const FeatureSchema& schema,
                                std::size_t model_width, Rng& rng);
};

/// Concatenated sparse embeddings and normalized dense features,
/// (items) x item_width, before projection.
ad::Tensor concat_item_features(ad::Graph& g, const ad::ParameterStore& store,
                                const EmbeddingTables& tables, std::span<const Item> items);

/// Projected item matrix, (items) x model_width.
ad::Tensor embed_items(ad::Graph& g, const ad::ParameterStore& store, const EmbeddingTables& tables,
                       std::span<const Item> items);

/// History rows followed by candidate rows, (N + M) x model_width.
ad::Tensor embed_session_items(ad::Graph& g, const ad::ParameterStore& store,
                               const EmbeddingTables& tables, const PaddedSession& session);

/// User vector, 1 x user_width.
ad::Tensor embed_user(ad::Graph& g, const ad::ParameterStore& store, const EmbeddingTables& tables,
                      const UserProfile& profile);

}  // namespace psad::data
