#include <algorithm>
#include <functional>
#include <cmath>
#include <string>

#include "doctest.h"
#include "helpers.hpp"
#include "psad/embedding.hpp"
#include "psad/upn.hpp"

using namespace psad;
using ad::Graph;
using ad::Matrix;
using ad::Tensor;

namespace {

Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng) {
  Matrix m(r, c);
  for (double& v : m.data) v = rng.uniform(-2.0, 2.0);
  return m;
}

struct GateFixture {
  ad::ParameterStore store;
  upn::GateParams gate;
  ad::ParamId x = 0;
  ad::ParamId user = 0;

  explicit GateFixture(std::uint64_t seed, std::size_t n = 5, std::size_t d = 6, std::size_t du = 4) {
    Rng rng(seed);
    gate = upn::GateParams::create(store, d, du, 7, rng);
    // A moderate bias keeps S away from saturation so its slopes are visible.
    store[gate.gate_b].value = Matrix(1, d, 0.1);
    x = store.add("x", random_matrix(n, d, rng));
    user = store.add("user", random_matrix(1, du, rng));
  }
};

double max_abs(const Matrix& m) {
  double out = 0.0;
  for (double v : m.data) out = std::max(out, std::abs(v));
  return out;
}

// Central differences of `forward` w.r.t. every entry of `id`, replaying the
// stop-gradient outputs recorded at the unperturbed point.
Matrix frozen_fd(const std::function<Tensor(Graph&)>& forward, ad::ParameterStore& store, ad::ParamId id,
                 double h = 1e-5) {
  Graph base;
  forward(base);
  const auto recorded = base.stop_gradient_values();
  Matrix out(store[id].value.rows, store[id].value.cols);
  for (std::size_t k = 0; k < out.size(); ++k) {
    const double keep = store[id].value.data[k];
    store[id].value.data[k] = keep + h;
    Graph gp;
    gp.replay_stop_gradients(recorded);
    const double fp = forward(gp).item();
    store[id].value.data[k] = keep - h;
    Graph gm;
    gm.replay_stop_gradients(recorded);
    const double fm = forward(gm).item();
    store[id].value.data[k] = keep;
    out.data[k] = (fp - fm) / (2 * h);
  }
  return out;
}

}  // namespace

TEST_CASE("embedding widths follow the schema") {
  const auto schema = testing::tiny_schema();
  ad::ParameterStore store;
  Rng rng(1);
  const auto tables = data::EmbeddingTables::create(store, schema, 8, rng);
  Rng srng(2);
  const auto s = testing::random_session(schema, 3, 4, srng);
  Graph g;
  CHECK(data::concat_item_features(g, store, tables, s.candidates).cols() == 16 * 2 + 1);
  CHECK(data::embed_items(g, store, tables, s.candidates).cols() == 8);
  const Tensor u = data::embed_user(g, store, tables, s.user);
  CHECK(u.rows() == 1);
  CHECK(u.cols() == 16 * 1 + 2);
  const Matrix first = u.value();
  CHECK(first == data::embed_user(g, store, tables, s.user).value());
  CHECK(data::embed_session_items(g, store, tables, data::as_padded(s)).rows() == 7);
}

TEST_CASE("identical items embed to identical rows, history before candidates") {
  const auto schema = testing::tiny_schema();
  ad::ParameterStore store;
  Rng rng(3);
  const auto tables = data::EmbeddingTables::create(store, schema, 8, rng);
  Rng srng(4);
  auto s = testing::random_session(schema, 2, 3, srng);
  s.candidates[2] = s.history[0];
  Graph g;
  const Tensor x = data::embed_session_items(g, store, tables, data::as_padded(s));
  for (std::size_t c = 0; c < 8; ++c) CHECK(x.at(0, c) == x.at(4, c));
}

TEST_CASE("zero tables and zero dense features project to the bias") {
  const auto schema = testing::tiny_schema();
  ad::ParameterStore store;
  Rng rng(5);
  const auto tables = data::EmbeddingTables::create(store, schema, 8, rng);
  for (ad::ParamId id : tables.item_tables) store[id].value = Matrix(store[id].value.rows, store[id].value.cols);
  data::Item it{{1, 2}, {0.0}};
  Graph g;
  const Tensor x = data::embed_items(g, store, tables, std::vector<data::Item>{it, it});
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t c = 0; c < 8; ++c) CHECK(x.at(r, c) == store[tables.projection_bias].value(0, c));
}

TEST_CASE("distinct user ids give distinct user vectors") {
  const auto schema = testing::tiny_schema();
  ad::ParameterStore store;
  Rng rng(6);
  const auto tables = data::EmbeddingTables::create(store, schema, 8, rng);
  Graph g;
  const auto a = data::embed_user(g, store, tables, {{0}, {0.1, 0.2}});
  const auto b = data::embed_user(g, store, tables, {{1}, {0.1, 0.2}});
  CHECK_FALSE(a.value() == b.value());
}

TEST_CASE("an out-of-vocabulary id names its field and value") {
  const auto schema = testing::tiny_schema();
  ad::ParameterStore store;
  Rng rng(7);
  const auto tables = data::EmbeddingTables::create(store, schema, 8, rng);
  Graph g;
  try {
    data::embed_items(g, store, tables, std::vector<data::Item>{{{1, 4}, {0.0}}});
    FAIL("expected a schema error");
  } catch (const data::SchemaError& e) {
    const std::string what = e.what();
    CHECK(what.find("field 1") != std::string::npos);
    CHECK(what.find("id 4") != std::string::npos);
  }
}

TEST_CASE("a saturated gate passes items through") {
  GateFixture f(1);
  f.store[f.gate.gate_b].value = Matrix(1, 6, 50.0);
  f.store[f.gate.gate_w].value = Matrix(6, 6, 0.0);
  Graph g;
  const Tensor x = g.param(f.store, f.x);
  const Tensor xh = upn::personalized_gate(g, f.store, f.gate, x, g.param(f.store, f.user));
  for (std::size_t k = 0; k < x.value().size(); ++k) CHECK(std::abs(xh.value().data[k] - x.value().data[k]) <= 1e-6);
}

TEST_CASE("a zero gate halves every item") {
  GateFixture f(2);
  f.store[f.gate.gate_b].value = Matrix(1, 6, 0.0);
  f.store[f.gate.gate_w].value = Matrix(6, 6, 0.0);
  Graph g;
  const Tensor x = g.param(f.store, f.x);
  const Tensor xh = upn::personalized_gate(g, f.store, f.gate, x, g.param(f.store, f.user));
  for (std::size_t k = 0; k < x.value().size(); ++k) CHECK(xh.value().data[k] == 0.5 * x.value().data[k]);
}

TEST_CASE("the gate only shrinks magnitudes") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    GateFixture f(seed);
    Graph g;
    const Tensor x = g.param(f.store, f.x);
    const Tensor xh = upn::personalized_gate(g, f.store, f.gate, x, g.param(f.store, f.user));
    for (std::size_t k = 0; k < x.value().size(); ++k) {
      CHECK(std::abs(xh.value().data[k]) < std::abs(x.value().data[k]));
    }
  }
}

TEST_CASE("X receives exactly S through the gate, nothing through the gate branch") {
  GateFixture f(3);
  Graph g;
  const Tensor x = g.param(f.store, f.x);
  const Tensor xh = upn::personalized_gate(g, f.store, f.gate, x, g.param(f.store, f.user));
  g.backward(ad::sum(xh));
  // X̂ = S ⊙ X is the last node; its first input is S.
  const auto& out = g.node(xh.node_id());
  REQUIRE(out.kind == ad::Primitive::hadamard);
  const Matrix& s = g.node(out.inputs[0]).value;
  CHECK(g.gradient(x) == s);

  // Every consumer of X other than the final product is a stop-gradient node
  // with no backward.
  std::size_t severed = 0;
  for (std::size_t id = 0; id < g.node_count(); ++id) {
    const auto& n = g.node(id);
    if (id == xh.node_id()) continue;
    if (std::find(n.inputs.begin(), n.inputs.end(), x.node_id()) == n.inputs.end()) continue;
    CHECK(n.kind == ad::Primitive::stop_gradient);
    CHECK_FALSE(n.requires_grad);
    ++severed;
  }
  CHECK(severed == 1);
}

TEST_CASE("gate-branch finite differences of X are zero") {
  GateFixture f(4);
  const Matrix c = f.store[f.x].value;
  // X reaches the loss only through the gate: sum(S(sg(X), P_u) ⊙ C).
  auto gate_only = [&](Graph& g) {
    Tensor s = upn::gate_values(g, f.store, f.gate, g.param(f.store, f.x), g.param(f.store, f.user));
    return ad::sum(ad::hadamard(s, g.constant(c)));
  };
  Graph g;
  const auto grads = g.backward(gate_only(g));
  CHECK(grads.at(f.x) == Matrix(5, 6, 0.0));
  CHECK(max_abs(grads.at(f.user)) > 1e-3);
  CHECK(max_abs(frozen_fd(gate_only, f.store, f.x)) < 1e-8);

  // The full gate agrees with frozen differences: only the product carries X.
  auto full = [&](Graph& gg) {
    return ad::sum(upn::personalized_gate(gg, f.store, f.gate, gg.param(f.store, f.x), gg.param(f.store, f.user)));
  };
  const ad::ParamId ids[] = {f.x, f.user};
  CHECK(ad::grad_check(full, f.store, ids) <= 1e-6);
}

TEST_CASE("disabled personalization returns the raw offset table") {
  ad::ParameterStore store;
  Rng rng(8);
  const auto p = upn::PosEncodeParams::create(store, 2, 6, 3, 4, 5, rng);
  Graph g;
  const Tensor u = g.constant(random_matrix(1, 4, rng));
  const std::vector<std::size_t> pos = {0, 1, 2, 9, 3, 4};
  const Tensor plain = upn::personalized_position_bias(g, store, p, upn::Stack::encoder, 1, u, pos, false);
  const Matrix& table = store[p.encoder[1].bias].value;
  for (std::size_t i = 0; i < pos.size(); ++i) {
    for (std::size_t j = 0; j < pos.size(); ++j) {
      long off = static_cast<long>(pos[i]) - static_cast<long>(pos[j]);
      off = std::max(-6L, std::min(6L, off));
      CHECK(plain.at(i, j) == table(0, static_cast<std::size_t>(off + 6)));
    }
  }
  const Tensor dec = upn::personalized_position_bias(g, store, p, upn::Stack::decoder, 0, u, 3, false);
  CHECK(dec.at(0, 2) == store[p.decoder[0].bias].value(0, 1));
}

TEST_CASE("a zero position MLP leaves the bias unchanged") {
  ad::ParameterStore store;
  Rng rng(9);
  const auto p = upn::PosEncodeParams::create(store, 1, 5, 3, 4, 5, rng);
  store[p.mlp_w2].value = Matrix(5, 1, 0.0);
  Graph g;
  const Tensor u = g.constant(random_matrix(1, 4, rng));
  const Tensor a = upn::personalized_position_bias(g, store, p, upn::Stack::encoder, 0, u, 6, true);
  const Tensor b = upn::personalized_position_bias(g, store, p, upn::Stack::encoder, 0, u, 6, false);
  CHECK(a.value() == b.value());
  store[p.mlp_b2].value = Matrix(1, 1, 0.3);
  // Parameter leaves are cached per graph, so read the new bias in a fresh one.
  Graph g2;
  const Tensor c = upn::personalized_position_bias(g2, store, p, upn::Stack::encoder, 0, g2.constant(u.value()), 6, true);
  for (std::size_t k = 0; k < c.value().size(); ++k) {
    CHECK(c.value().data[k] == doctest::Approx(b.value().data[k] + std::tanh(0.3)).epsilon(1e-14));
  }
}

TEST_CASE("personalization moves each bias by less than one and depends on the user") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    ad::ParameterStore store;
    Rng rng(seed);
    const auto p = upn::PosEncodeParams::create(store, 2, 8, 4, 4, 5, rng);
    // Larger weights push tanh toward its bound (beyond ~19 it rounds to 1).
    for (double& v : store[p.mlp_w2].value.data) v *= 5.0;
    Graph g;
    const Tensor u1 = g.constant(random_matrix(1, 4, rng));
    const Tensor u2 = g.constant(random_matrix(1, 4, rng));
    for (std::size_t layer = 0; layer < 2; ++layer) {
      const Tensor ph = upn::personalized_position_bias(g, store, p, upn::Stack::encoder, layer, u1, 9, true);
      const Tensor pp = upn::personalized_position_bias(g, store, p, upn::Stack::encoder, layer, u1, 9, false);
      for (std::size_t k = 0; k < ph.value().size(); ++k) CHECK(std::abs(ph.value().data[k] - pp.value().data[k]) < 1.0);
      const Tensor other = upn::personalized_position_bias(g, store, p, upn::Stack::encoder, layer, u2, 9, true);
      CHECK_FALSE(other.value() == ph.value());
    }
  }
}

TEST_CASE("the user gets no gradient through the position-bias MLP") {
  ad::ParameterStore store;
  Rng rng(10);
  const auto p = upn::PosEncodeParams::create(store, 1, 5, 3, 4, 5, rng);
  const ad::ParamId user = store.add("user", random_matrix(1, 4, rng));
  auto forward = [&](Graph& g) {
    Tensor b = upn::personalized_position_bias(g, store, p, upn::Stack::encoder, 0, g.param(store, user), 6, true);
    return ad::sum(ad::hadamard(b, b));
  };
  Graph g;
  const auto grads = g.backward(forward(g));
  CHECK(grads.at(user) == Matrix(1, 4, 0.0));
  CHECK(max_abs(grads.at(p.mlp_w1)) > 0.0);
  CHECK(max_abs(frozen_fd(forward, store, user)) < 1e-8);
  const ad::ParamId ids[] = {user, p.encoder[0].bias, p.mlp_w1, p.mlp_b1, p.mlp_w2, p.mlp_b2};
  CHECK(ad::grad_check(forward, store, ids) <= 1e-6);
}

TEST_CASE("a layer beyond the stack is rejected") {
  ad::ParameterStore store;
  Rng rng(11);
  const auto p = upn::PosEncodeParams::create(store, 1, 5, 3, 4, 5, rng);
  Graph g;
  CHECK_THROWS_AS(upn::personalized_position_bias(g, store, p, upn::Stack::decoder, 1, g.constant(Matrix(1, 4)), 3),
                  std::out_of_range);
}
