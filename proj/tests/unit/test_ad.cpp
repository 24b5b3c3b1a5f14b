#include <cmath>
#include <limits>
#include <vector>

#include "doctest.h"
#include "psad/ad.hpp"
#include "psad/rng.hpp"

using namespace psad;
using namespace psad::ad;

namespace {

Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng, double lo = -2.0, double hi = 2.0) {
  Matrix m(r, c);
  for (double& v : m.data) v = rng.uniform(lo, hi);
  return m;
}

/// Projects `out` onto fixed random weights so every output entry matters.
Tensor project(Graph& g, Tensor out, std::uint64_t seed) {
  Rng rng(seed);
  return sum(hadamard(out, g.constant(random_matrix(out.rows(), out.cols(), rng))));
}

struct Case {
  Primitive kind;
  std::vector<std::pair<std::size_t, std::size_t>> shapes;
  PrimitiveArgs args;
  double lo = -2.0;
  double hi = 2.0;
};

}  // namespace

TEST_CASE("hadamard, softmax and matmul produce their textbook values") {
  Graph g;
  auto h = hadamard(g.constant(Matrix::from_rows({{1, 2}})), g.constant(Matrix::from_rows({{3, 4}})));
  CHECK(h.value() == Matrix::from_rows({{3, 8}}));

  auto s = row_softmax(g.constant(Matrix::from_rows({{0, 0}})));
  CHECK(s.at(0, 0) == doctest::Approx(0.5));
  CHECK(s.at(0, 1) == doctest::Approx(0.5));

  auto z = matmul(g.constant(Matrix(2, 3, 0.0)), g.constant(Matrix(3, 4, 1.0)));
  CHECK(z.value() == Matrix(2, 4, 0.0));
}

TEST_CASE("shape errors name the primitive and both shapes") {
  Graph g;
  auto a = g.constant(Matrix(2, 3));
  auto b = g.constant(Matrix(2, 3));
  try {
    matmul(a, b);
    FAIL("expected a shape error");
  } catch (const ShapeError& e) {
    const std::string what = e.what();
    CHECK(what.find("matmul") != std::string::npos);
    CHECK(what.find("2x3") != std::string::npos);
  }
  CHECK_THROWS_AS(hadamard(a, g.constant(Matrix(3, 2))), ShapeError);
  CHECK_THROWS_AS(concat_cols(a, g.constant(Matrix(3, 1))), ShapeError);
}

TEST_CASE("log of a non-positive value is a domain error") {
  Graph g;
  CHECK_THROWS_AS(ad::log(g.constant(Matrix::from_rows({{1.0, 0.0}}))), DomainError);
  CHECK_THROWS_AS(ad::log(g.constant(Matrix::from_rows({{-1.0}}))), DomainError);
}

TEST_CASE("stop_gradient is the identity forward and severs the backward") {
  Graph g;
  auto x = g.variable(Matrix::from_rows({{1.5}}));
  auto y = stop_gradient(x);
  CHECK(y.item() == 1.5);

  Graph g2;
  auto v = g2.variable(Matrix::from_rows({{1.0, -2.0, 0.5}}));
  g2.backward(sum(stop_gradient(v)));
  const Matrix grad = g2.gradient(v);
  for (double d : grad.data) CHECK(d == 0.0);

  Graph g3;
  auto x3 = g3.variable(Matrix::from_rows({{3.0}}));
  g3.backward(sum(hadamard(x3, stop_gradient(x3))));
  CHECK(g3.gradient(x3).data[0] == 3.0);
}

TEST_CASE("backward gives analytic derivatives of simple losses") {
  Graph g;
  auto x = g.variable(Matrix::from_rows({{3.0}}));
  g.backward(sum(hadamard(x, x)));
  CHECK(g.gradient(x).data[0] == doctest::Approx(6.0));

  Graph g2;
  auto z = g2.variable(Matrix::from_rows({{0.0}}));
  g2.backward(sum(sigmoid(z)));
  CHECK(g2.gradient(z).data[0] == doctest::Approx(0.25));
}

TEST_CASE("backward rejects a non-scalar loss") {
  Graph g;
  auto x = g.variable(Matrix(2, 2, 1.0));
  CHECK_THROWS_AS(g.backward(x), ShapeError);
}

TEST_CASE("repeated backward calls give identical gradient maps") {
  ParameterStore store;
  Rng rng(3);
  const ParamId w = store.add("w", random_matrix(3, 2, rng));
  Graph g;
  auto loss = sum(tanh(matmul(g.constant(random_matrix(4, 3, rng)), g.param(store, w))));
  const GradientMap a = g.backward(loss);
  const GradientMap b = g.backward(loss);
  CHECK(a == b);
  CHECK(a.at(w).rows == 3);
  CHECK(a.at(w).cols == 2);
}

TEST_CASE("gradient map lists every reachable trainable parameter, even through stop_gradient") {
  ParameterStore store;
  const ParamId a = store.add("a", Matrix::from_rows({{2.0}}));
  const ParamId b = store.add("b", Matrix::from_rows({{5.0}}));
  const ParamId frozen = store.add("frozen", Matrix::from_rows({{1.0}}));
  store[frozen].trainable = false;
  const ParamId unused = store.add("unused", Matrix::from_rows({{1.0}}));
  Graph g;
  auto loss = sum(add(hadamard(g.param(store, a), g.param(store, frozen)), stop_gradient(g.param(store, b))));
  const GradientMap grads = g.backward(loss);
  CHECK(grads.size() == 2);
  CHECK(grads.at(a).data[0] == 1.0);
  CHECK(grads.at(b).data[0] == 0.0);
  CHECK_FALSE(grads.contains(frozen));
  CHECK_FALSE(grads.contains(unused));
}

TEST_CASE("a tensor that does not require grad never accumulates gradient") {
  Graph g;
  auto c = g.constant(Matrix::from_rows({{1.0, 2.0}}));
  auto x = g.variable(Matrix::from_rows({{0.5, 0.5}}));
  g.backward(sum(hadamard(c, x)));
  CHECK_FALSE(c.requires_grad());
  CHECK(g.gradient(c) == Matrix(1, 2, 0.0));
}

TEST_CASE("every primitive matches central finite differences on random inputs") {
  std::vector<Case> cases = {
      {Primitive::matmul, {{3, 4}, {4, 2}}, {}},
      {Primitive::transpose, {{3, 2}}, {}},
      {Primitive::add, {{3, 2}, {3, 2}}, {}},
      {Primitive::add, {{3, 2}, {1, 2}}, {}},
      {Primitive::add, {{3, 2}, {1, 1}}, {}},
      {Primitive::scale, {{2, 3}}, {.scalar = -1.7}},
      {Primitive::offset, {{2, 3}}, {.scalar = 0.3}},
      {Primitive::concat_cols, {{3, 2}, {3, 1}}, {}},
      {Primitive::concat_rows, {{1, 3}, {2, 3}}, {}},
      {Primitive::hadamard, {{2, 3}, {2, 3}}, {}},
      {Primitive::row_softmax, {{3, 4}}, {}},
      {Primitive::sigmoid, {{2, 3}}, {}},
      {Primitive::tanh, {{2, 3}}, {}},
      {Primitive::gelu, {{2, 3}}, {}},
      {Primitive::relu, {{2, 3}}, {}},
      {Primitive::log, {{2, 3}}, {}, 0.5, 2.0},
      {Primitive::exp, {{2, 3}}, {}},
      {Primitive::sum, {{2, 3}}, {}},
      {Primitive::mean, {{2, 3}}, {}},
      {Primitive::max_over_rows, {{4, 3}}, {}},
      {Primitive::min_over_rows, {{4, 3}}, {}},
      {Primitive::gather_rows, {{4, 3}}, {.indices = {2, 0, 2}}},
      {Primitive::gather_elements, {{2, 3}}, {.indices = {5, 0, 0, 3}, .rows = 2, .cols = 2}},
      {Primitive::masked_fill, {{2, 3}}, {.scalar = -4.0, .mask = {1, 0, 0, 0, 1, 0}}},
      {Primitive::clamp, {{2, 3}}, {.scalar = -1.0, .scalar2 = 1.0}},
      {Primitive::layer_norm, {{3, 4}, {1, 4}, {1, 4}}, {}},
  };
  for (std::size_t c = 0; c < cases.size(); ++c) {
    const Case& tc = cases[c];
    CAPTURE(primitive_name(tc.kind));
    for (std::uint64_t trial = 0; trial < 5; ++trial) {
      Rng rng(derive_seed(17, "primitive", c * 100 + trial));
      ParameterStore store;
      std::vector<ParamId> ids;
      for (std::size_t i = 0; i < tc.shapes.size(); ++i) {
        ids.push_back(store.add("x" + std::to_string(i),
                                random_matrix(tc.shapes[i].first, tc.shapes[i].second, rng, tc.lo, tc.hi)));
      }
      auto forward = [&](Graph& g) {
        std::vector<Tensor> inputs;
        for (ParamId id : ids) inputs.push_back(g.param(store, id));
        return project(g, apply_primitive(tc.kind, inputs, tc.args), 99 + trial);
      };
      CHECK(grad_check(forward, store, ids) <= 1e-5);
    }
  }
}

TEST_CASE("row softmax rows sum to one and stay positive") {
  Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    Graph g;
    auto s = row_softmax(g.constant(random_matrix(3, 7, rng, -30.0, 30.0)));
    for (std::size_t r = 0; r < 3; ++r) {
      double total = 0.0;
      for (std::size_t c = 0; c < 7; ++c) {
        CHECK(s.at(r, c) > 0.0);
        total += s.at(r, c);
      }
      CHECK(std::abs(total - 1.0) <= 1e-12);
    }
  }
}

TEST_CASE("row softmax gives masked entries zero weight and rejects NaN") {
  Graph g;
  const double inf = std::numeric_limits<double>::infinity();
  auto s = row_softmax(g.constant(Matrix::from_rows({{1.0, -inf, 1.0}})));
  CHECK(s.at(0, 1) == 0.0);
  CHECK(s.at(0, 0) == doctest::Approx(0.5));
  CHECK_THROWS_AS(row_softmax(g.constant(Matrix::from_rows({{std::nan(""), 0.0}}))), DomainError);
  CHECK_THROWS_AS(row_softmax(g.constant(Matrix::from_rows({{-inf, -inf}}))), DomainError);
}

TEST_CASE("max and min route ties to the first row") {
  Graph g;
  auto x = g.variable(Matrix::from_rows({{1.0}, {3.0}, {3.0}}));
  g.backward(sum(max_over_rows(x)));
  CHECK(g.gradient(x) == Matrix::from_rows({{0.0}, {1.0}, {0.0}}));

  Graph g2;
  auto y = g2.variable(Matrix::from_rows({{2.0}, {2.0}, {5.0}}));
  g2.backward(sum(min_over_rows(y)));
  CHECK(g2.gradient(y) == Matrix::from_rows({{1.0}, {0.0}, {0.0}}));
}

TEST_CASE("grad_check is exact up to truncation on a quadratic model") {
  ParameterStore store;
  Rng rng(11);
  const ParamId w = store.add("w", random_matrix(2, 3, rng));
  const Matrix a = random_matrix(3, 2, rng);
  auto forward = [&](Graph& g) {
    Tensor p = g.param(store, w);
    return sum(hadamard(matmul(p, g.constant(a)), matmul(p, g.constant(a))));
  };
  const ParamId ids[] = {w};
  CHECK(grad_check(forward, store, ids) < 1e-8);
}

TEST_CASE("grad_check on a stop-gradient-only forward sees zero everywhere") {
  ParameterStore store;
  const ParamId w = store.add("w", Matrix::from_rows({{0.3, -0.7}}));
  auto forward = [&](Graph& g) { return sum(stop_gradient(exp(g.param(store, w)))); };
  Graph g;
  const GradientMap grads = g.backward(forward(g));
  CHECK(grads.at(w) == Matrix(1, 2, 0.0));
  const ParamId ids[] = {w};
  CHECK(grad_check(forward, store, ids) < 1e-8);
  // Perturbing through the stopped path exposes exp's slope instead.
  CHECK(grad_check(forward, store, ids, 1e-5, false) > 0.5);
}

TEST_CASE("stop-gradient replay feeds recorded values and checks shapes") {
  Graph g;
  g.replay_stop_gradients({Matrix::from_rows({{9.0}})});
  auto y = stop_gradient(g.constant(Matrix::from_rows({{1.0}})));
  CHECK(y.item() == 9.0);
  CHECK_THROWS_AS(stop_gradient(g.constant(Matrix::from_rows({{1.0}}))), std::logic_error);
  Graph g2;
  g2.replay_stop_gradients({Matrix(1, 2)});
  CHECK_THROWS_AS(stop_gradient(g2.constant(Matrix(2, 1))), ShapeError);
}

TEST_CASE("grad_check refuses a forward that is not deterministic") {
  ParameterStore store;
  const ParamId w = store.add("w", Matrix::from_rows({{1.0}}));
  int calls = 0;
  auto forward = [&](Graph& g) {
    ++calls;
    return sum(scale(g.param(store, w), static_cast<double>(calls)));
  };
  const ParamId ids[] = {w};
  CHECK_THROWS_WITH_AS(grad_check(forward, store, ids), doctest::Contains("seed"), std::runtime_error);
}

TEST_CASE("adam leaves parameters alone under a zero gradient") {
  ParameterStore store;
  const ParamId w = store.add("w", Matrix::from_rows({{1.0, -2.0}}));
  AdamState state;
  GradientMap grads{{w, Matrix(1, 2, 0.0)}};
  adam_step(store, grads, state);
  CHECK(store[w].value == Matrix::from_rows({{1.0, -2.0}}));
  CHECK(state.step == 1);
}

TEST_CASE("adam's first step with unit gradient moves by the learning rate") {
  ParameterStore store;
  const ParamId w = store.add("w", Matrix::from_rows({{0.0}}));
  AdamState state;
  state.learning_rate = 0.1;
  adam_step(store, {{w, Matrix::from_rows({{1.0}})}}, state);
  // m_hat = 1, v_hat = 1, so the step is lr / (1 + eps).
  CHECK(store[w].value.data[0] == doctest::Approx(-0.1 / (1.0 + 1e-8)).epsilon(1e-12));
}

TEST_CASE("adam update under a constant gradient approaches the learning rate") {
  ParameterStore store;
  const ParamId w = store.add("w", Matrix::from_rows({{0.0}}));
  AdamState state;
  state.learning_rate = 0.01;
  double previous = 0.0;
  double last_step = 0.0;
  for (int t = 0; t < 200; ++t) {
    adam_step(store, {{w, Matrix::from_rows({{0.37}})}}, state);
    last_step = previous - store[w].value.data[0];
    previous = store[w].value.data[0];
  }
  CHECK(last_step == doctest::Approx(0.01).epsilon(1e-6));
  CHECK(state.step == 200);
  CHECK(state.first_moment.at(w).rows == 1);
}

TEST_CASE("adam refuses a trainable parameter without a gradient") {
  ParameterStore store;
  const ParamId a = store.add("a", Matrix(1, 1, 0.0));
  store.add("detached", Matrix(1, 1, 0.0));
  AdamState state;
  CHECK_THROWS_WITH_AS(adam_step(store, {{a, Matrix(1, 1, 1.0)}}, state), doctest::Contains("detached"),
                       std::invalid_argument);
}

TEST_CASE("parameter store rejects duplicate names") {
  ParameterStore store;
  store.add("w", Matrix(1, 1));
  CHECK_THROWS_AS(store.add("w", Matrix(1, 1)), std::invalid_argument);
  CHECK(store.find("w").has_value());
  CHECK_FALSE(store.find("v").has_value());
}
