#include <algorithm>
#include <cmath>
#include <set>

#include "doctest.h"
#include "helpers.hpp"
#include "psad/model.hpp"

using namespace psad;
using ad::Graph;
using ad::Matrix;

namespace {

// Directional derivative along a random unit direction inside one parameter
// tensor, with stop-gradient values frozen as in ad::grad_check. A single
// entry of the gate or position MLPs can carry a gradient near 1e-7 against a
// loss near 10, where one ulp of the loss already moves a central difference by
// ~1e-10; the 1e-9 floor covers that and nothing larger.
double directional_error(Model& model, const data::PaddedSession& session, std::uint64_t seed, ad::ParamId id,
                         Rng& rng) {
  auto forward = [&](Graph& g) { return forward_losses(g, model, session, Objective::joint, seed).total; };
  Matrix direction(model.params[id].value.rows, model.params[id].value.cols);
  double norm = 0.0;
  for (double& v : direction.data) {
    v = rng.uniform(-1.0, 1.0);
    norm += v * v;
  }
  for (double& v : direction.data) v /= std::sqrt(norm);
  double exact = 0.0;
  std::vector<Matrix> stopped;
  {
    Graph g;
    const auto grads = g.backward(forward(g));
    stopped = g.stop_gradient_values();
    if (const auto it = grads.find(id); it != grads.end()) {
      for (std::size_t i = 0; i < direction.size(); ++i) exact += it->second.data[i] * direction.data[i];
    }
  }
  const double h = 1e-5;
  Matrix& value = model.params[id].value;
  const Matrix saved = value;
  auto shifted = [&](double step) {
    for (std::size_t i = 0; i < value.size(); ++i) value.data[i] = saved.data[i] + step * direction.data[i];
    Graph g;
    g.replay_stop_gradients(stopped);
    return forward(g).item();
  };
  const double numeric = (shifted(h) - shifted(-h)) / (2.0 * h);
  value = saved;
  return std::abs(exact - numeric) - 1e-4 * std::abs(exact);
}

}  // namespace

TEST_CASE("position ids skip padding and continue from history into candidates") {
  Rng rng(1);
  const auto s = testing::random_session(testing::tiny_schema(), 2, 3, rng);
  const auto p = data::pad_session(s, 4, 5);
  CHECK(session_positions(p) == std::vector<std::size_t>{0, 1, 5, 6, 2, 3, 4, 7, 8});
  CHECK(session_positions(data::as_padded(s)) == std::vector<std::size_t>{0, 1, 2, 3, 4});
}

TEST_CASE("full-model gradients match finite differences along every parameter tensor") {
  for (bool negative : {false, true}) {
    for (std::uint64_t seed : {21, 121, 221}) {
      ModelConfig cfg = testing::tiny_config(4, 3, 2, 1);
      cfg.negative_cross_entropy = negative;
      Model model = Model::create(cfg, seed);
      Rng rng(seed + 1);
      const auto session = data::as_padded(testing::random_session(cfg.schema, 4, 4, rng));
      for (ad::ParamId id = 0; id < model.params.size(); ++id) {
        for (int trial = 0; trial < 3; ++trial) {
          CAPTURE(negative);
          CAPTURE(seed);
          CAPTURE(model.params[id].name);
          CHECK(directional_error(model, session, seed + 2, id, rng) <= 1e-9);
        }
      }
    }
  }
}

TEST_CASE("disable-sa is the same model as K = T") {
  ModelConfig a = testing::tiny_config(5, 4, 2, 1);
  a.disable_sa = true;
  ModelConfig b = testing::tiny_config(5, 4, 4, 1);
  const Model ma = Model::create(a, 31);
  const Model mb = Model::create(b, 31);
  Rng rng(32);
  for (int trial = 0; trial < 5; ++trial) {
    const auto s = data::as_padded(testing::random_session(a.schema, 3, 5, rng), trial);
    Graph ga, gb;
    const auto la = forward_losses(ga, ma, s, Objective::joint, 33);
    const auto lb = forward_losses(gb, mb, s, Objective::joint, 33);
    CHECK(la.total.item() == lb.total.item());
    CHECK(la.probabilities.value() == lb.probabilities.value());
    CHECK(rank_generator(ma, s, 4) == rank_generator(mb, s, 4));
  }
}

TEST_CASE("disable-ce is the same model as gamma = 0") {
  ModelConfig a = testing::tiny_config(5, 4, 2, 2);
  a.disable_ce = true;
  ModelConfig b = testing::tiny_config(5, 4, 2, 0);
  const Model ma = Model::create(a, 41);
  const Model mb = Model::create(b, 41);
  Rng rng(42);
  for (int trial = 0; trial < 5; ++trial) {
    const auto s = data::as_padded(testing::random_session(a.schema, 3, 5, rng), trial);
    Graph ga, gb;
    const auto la = forward_losses(ga, ma, s, Objective::joint, 43);
    const auto lb = forward_losses(gb, mb, s, Objective::joint, 43);
    CHECK(la.total.item() == lb.total.item());
    CHECK(la.encoded.hidden.value() == lb.encoded.hidden.value());
    CHECK(rank_generator(ma, s, 4) == rank_generator(mb, s, 4));
  }
}

TEST_CASE("disable-pg feeds raw items to the encoder and freezes the gate") {
  ModelConfig cfg = testing::tiny_config();
  cfg.disable_pg = true;
  const Model model = Model::create(cfg, 51);
  Rng rng(52);
  const auto s = data::as_padded(testing::random_session(cfg.schema, 3, 4, rng));
  Graph g;
  const auto e = encode_session(g, model, s);
  CHECK(e.gated.value() == e.items.value());
  CHECK(e.gated.node_id() == e.items.node_id());
  CHECK_FALSE(model.params[model.gate.gate_w].trainable);
  CHECK(model.params[model.embedding.projection_weight].trainable);
}

TEST_CASE("disable-ppe uses the plain offset tables") {
  ModelConfig cfg = testing::tiny_config();
  cfg.disable_ppe = true;
  const Model model = Model::create(cfg, 61);
  Rng rng(62);
  const auto s = data::pad_session(testing::random_session(cfg.schema, 3, 4, rng), 4, 4);
  Graph g;
  const auto e = encode_session(g, model, s);
  const auto pos = session_positions(s);
  const Matrix& table = model.params[model.positions.encoder[0].bias].value;
  const auto r = static_cast<long>(model.positions.encoder[0].radius);
  for (std::size_t i = 0; i < pos.size(); ++i) {
    for (std::size_t j = 0; j < pos.size(); ++j) {
      const long off = std::clamp(static_cast<long>(pos[i]) - static_cast<long>(pos[j]), -r, r);
      CHECK(e.encoder_bias[0].at(i, j) == table(0, static_cast<std::size_t>(off + r)));
    }
  }
  const Matrix& dec = model.params[model.positions.decoder[0].bias].value;
  for (std::size_t k = 0; k < dec.cols; ++k) CHECK(e.decoder_inputs.offset_bias[0].at(k, 0) == dec(0, k));
  CHECK_FALSE(model.params[model.positions.mlp_w1].trainable);
}

TEST_CASE("rankings are duplicate-free length-T subsets of real candidates") {
  const ModelConfig cfg = testing::tiny_config(6, 4, 2, 1);
  const Model model = Model::create(cfg, 71);
  Rng rng(72);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t m = 4 + rng.index(3);
    const auto raw = testing::random_session(cfg.schema, 1 + rng.index(4), m, rng);
    const auto s = data::pad_session(raw, 4, 6, trial);
    for (Variant v : {Variant::generator, Variant::student}) {
      const auto r = rank_session(model, s, v, 5);
      CHECK(r.size() == 4);
      CHECK(std::set<std::size_t>(r.begin(), r.end()).size() == 4);
      for (std::size_t i : r) CHECK(s.candidate_mask.at(i) == 1);
    }
  }
}

TEST_CASE("the student ranks by descending score with index tie-break") {
  const ModelConfig cfg = testing::tiny_config(5, 3, 1, 0);
  const Model model = Model::create(cfg, 81);
  Rng rng(82);
  auto raw = testing::random_session(cfg.schema, 2, 5, rng);
  raw.candidates[3] = raw.candidates[1];
  const auto s = data::as_padded(raw);
  const auto scores = student_scores(model, s);
  const auto r = rank_student(model, s);
  for (std::size_t j = 1; j < r.size(); ++j) CHECK(scores[r[j - 1]] >= scores[r[j]]);
  // Equal rows: whichever is ranked, 1 precedes 3.
  const auto p1 = std::find(r.begin(), r.end(), 1);
  const auto p3 = std::find(r.begin(), r.end(), 3);
  if (p1 != r.end() && p3 != r.end()) CHECK(p1 < p3);
  if (p3 != r.end()) CHECK(p1 != r.end());
}

TEST_CASE("ranking T > M is an error") {
  const ModelConfig cfg = testing::tiny_config(4, 4, 2, 1);
  const Model model = Model::create(cfg, 91);
  Rng rng(92);
  const auto s = data::as_padded(testing::random_session(cfg.schema, 2, 3, rng));
  CHECK_THROWS_AS(rank_student(model, s), std::invalid_argument);
  CHECK_THROWS_AS(rank_generator(model, s, 1), std::invalid_argument);
}

TEST_CASE("model creation is a pure function of config and seed") {
  const ModelConfig cfg = testing::tiny_config();
  const Model a = Model::create(cfg, 5);
  const Model b = Model::create(cfg, 5);
  const Model c = Model::create(cfg, 6);
  REQUIRE(a.params.size() == b.params.size());
  bool differs = false;
  for (ad::ParamId id = 0; id < a.params.size(); ++id) {
    CHECK(a.params[id].value == b.params[id].value);
    differs = differs || !(a.params[id].value == c.params[id].value);
  }
  CHECK(differs);
}
