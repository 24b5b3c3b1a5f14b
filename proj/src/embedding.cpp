#include "psad/embedding.hpp"

#include <cmath>
#include <string>

#include "psad/init.hpp"

namespace psad::data {

using ad::Graph;
using ad::Matrix;
using ad::Tensor;

EmbeddingTables EmbeddingTables::create(ad::ParameterStore& store, const FeatureSchema& schema,
                                        std::size_t model_width, Rng& rng) {
  EmbeddingTables t;
  t.schema = schema;
  t.stats = DenseStats::identity(schema);
  t.model_width = model_width;
  for (std::size_t f = 0; f < schema.item_vocab.size(); ++f) {
    t.item_tables.push_back(
        store.add("emb.item." + std::to_string(f), init::normal(schema.item_vocab[f], kEmbeddingDim, 0.1, rng)));
  }
  for (std::size_t f = 0; f < schema.user_vocab.size(); ++f) {
    t.user_tables.push_back(
        store.add("emb.user." + std::to_string(f), init::normal(schema.user_vocab[f], kEmbeddingDim, 0.1, rng)));
  }
  t.projection_weight = store.add("emb.proj.w", init::xavier(schema.item_width(), model_width, rng));
  t.projection_bias = store.add("emb.proj.b", Matrix(1, model_width, 0.0));
  return t;
}

namespace {

Tensor lookup(Graph& g, const ad::ParameterStore& store, ad::ParamId table, std::vector<std::size_t> ids) {
  return ad::gather_rows(g.param(store, table), std::move(ids));
}

std::size_t checked_id(std::int64_t id, std::size_t vocab, std::string_view side, std::size_t field) {
  if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
    throw SchemaError(std::string(side) + " field " + std::to_string(field) + ": id " + std::to_string(id) +
                      " out of vocabulary (size " + std::to_string(vocab) + ")");
  }
  return static_cast<std::size_t>(id);
}

}  // namespace

Tensor concat_item_features(Graph& g, const ad::ParameterStore& store, const EmbeddingTables& tables,
                            std::span<const Item> items) {
  const FeatureSchema& schema = tables.schema;
  Tensor out;
  for (std::size_t f = 0; f < schema.item_vocab.size(); ++f) {
    std::vector<std::size_t> ids;
    ids.reserve(items.size());
    for (const Item& it : items) {
      if (it.sparse.size() != schema.item_vocab.size()) throw SchemaError("item: wrong number of sparse fields");
      ids.push_back(checked_id(it.sparse[f], schema.item_vocab[f], "item", f));
    }
    Tensor e = lookup(g, store, tables.item_tables[f], std::move(ids));
    out = out.valid() ? ad::concat_cols(out, e) : e;
  }
  if (schema.item_dense > 0) {
    Matrix dense(items.size(), schema.item_dense);
    for (std::size_t r = 0; r < items.size(); ++r) {
      if (items[r].dense.size() != schema.item_dense) throw SchemaError("item: wrong number of dense features");
      for (std::size_t c = 0; c < schema.item_dense; ++c) {
        dense(r, c) = (items[r].dense[c] - tables.stats.item_mean[c]) / tables.stats.item_std[c];
      }
    }
    Tensor d = g.constant(std::move(dense));
    out = out.valid() ? ad::concat_cols(out, d) : d;
  }
  return out;
}

Tensor embed_items(Graph& g, const ad::ParameterStore& store, const EmbeddingTables& tables,
                   std::span<const Item> items) {
  Tensor x = concat_item_features(g, store, tables, items);
  return ad::add(ad::matmul(x, g.param(store, tables.projection_weight)), g.param(store, tables.projection_bias));
}

Tensor embed_session_items(Graph& g, const ad::ParameterStore& store, const EmbeddingTables& tables,
                           const PaddedSession& session) {
  std::vector<Item> all;
  all.reserve(session.history.size() + session.candidates.size());
  all.insert(all.end(), session.history.begin(), session.history.end());
  all.insert(all.end(), session.candidates.begin(), session.candidates.end());
  return embed_items(g, store, tables, all);
}

Tensor embed_user(Graph& g, const ad::ParameterStore& store, const EmbeddingTables& tables,
                  const UserProfile& profile) {
  const FeatureSchema& schema = tables.schema;
  if (profile.sparse.size() != schema.user_vocab.size()) throw SchemaError("user: wrong number of sparse fields");
  if (profile.dense.size() != schema.user_dense) throw SchemaError("user: wrong number of dense features");
  Tensor out;
  for (std::size_t f = 0; f < schema.user_vocab.size(); ++f) {
    const std::size_t id = checked_id(profile.sparse[f], schema.user_vocab[f], "user", f);
    Tensor e = lookup(g, store, tables.user_tables[f], {id});
    out = out.valid() ? ad::concat_cols(out, e) : e;
  }
  if (schema.user_dense > 0) {
    Matrix dense(1, schema.user_dense);
    for (std::size_t c = 0; c < schema.user_dense; ++c) {
      dense.data[c] = (profile.dense[c] - tables.stats.user_mean[c]) / tables.stats.user_std[c];
    }
    Tensor d = g.constant(std::move(dense));
    out = out.valid() ? ad::concat_cols(out, d) : d;
  }
  return out;
}

}  // namespace psad::data
