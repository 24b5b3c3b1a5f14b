#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>

#include "doctest.h"
#include "helpers.hpp"
#include "psad/data.hpp"
#include "psad/embedding.hpp"
#include "psad/eval.hpp"
#include "psad/model.hpp"

using namespace psad;
using namespace psad::data;

namespace {

SyntheticConfig small_synthetic(std::size_t sessions) {
  SyntheticConfig c;
  c.schema.item_vocab = {20, 30, 10};
  c.schema.item_dense = 2;
  c.schema.user_vocab = {8, 5};
  c.schema.user_dense = 4;
  c.sessions = sessions;
  c.item_pool = 300;
  c.history_min = 3;
  c.history_max = 8;
  c.candidates = 12;
  return c;
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("psad_test_" + name);
}

}  // namespace

TEST_CASE("item width is 16 per sparse field plus the dense count") {
  FeatureSchema s;
  s.item_vocab = {10, 10};
  s.item_dense = 3;
  CHECK(s.item_width() == 35);
  s.user_vocab = {4, 4, 4};
  s.user_dense = 2;
  CHECK(s.user_width() == 50);
}

TEST_CASE("validate names the field and id of an out-of-vocabulary entry") {
  Rng rng(1);
  const FeatureSchema schema = testing::tiny_schema();
  Session s = testing::random_session(schema, 3, 4, rng);
  CHECK_NOTHROW(validate(s, schema));
  s.candidates[1].sparse[1] = 9;
  try {
    validate(s, schema);
    FAIL("expected a schema error");
  } catch (const SchemaError& e) {
    const std::string what = e.what();
    CHECK(what.find("9") != std::string::npos);
    CHECK(what.find("field 1") != std::string::npos);
  }
  Session t = testing::random_session(schema, 3, 4, rng);
  t.labels.pop_back();
  CHECK_THROWS_AS(validate(t, schema), SchemaError);
  Session u = testing::random_session(schema, 3, 4, rng);
  u.history.clear();
  CHECK_THROWS_AS(validate(u, schema), SchemaError);
}

TEST_CASE("prepare_sessions keeps the most recent history and drops sessions without clicks") {
  Rng rng(2);
  const FeatureSchema schema = testing::tiny_schema();
  Session a = testing::random_session(schema, 6, 4, rng);
  Session b = testing::random_session(schema, 2, 4, rng);
  b.labels.assign(4, 0);
  const auto out = prepare_sessions({a, b}, 4);
  REQUIRE(out.size() == 1);
  REQUIRE(out[0].history.size() == 4);
  CHECK(out[0].history.front() == a.history[2]);
  CHECK(out[0].history.back() == a.history[5]);
}

TEST_CASE("synthetic data is a pure function of config and seed") {
  const auto c = small_synthetic(50);
  const auto a = generate_synthetic(c, 11);
  const auto b = generate_synthetic(c, 11);
  CHECK(a == b);
  std::string sa, sb;
  for (const auto& s : a) sa += to_json_line(s);
  for (const auto& s : b) sb += to_json_line(s);
  CHECK(sa == sb);
  CHECK_FALSE(a == generate_synthetic(c, 12));
}

TEST_CASE("synthetic sessions validate and carry a positive and a negative") {
  const auto c = small_synthetic(200);
  for (const Session& s : generate_synthetic(c, 3)) {
    CHECK_NOTHROW(validate(s, c.schema));
    CHECK(s.candidates.size() == c.candidates);
    CHECK(s.history.size() >= c.history_min);
    CHECK(s.history.size() <= c.history_max);
    const int pos = s.positives();
    CHECK(pos >= 1);
    CHECK(pos < static_cast<int>(s.candidates.size()));
  }
}

TEST_CASE("synthetic label rate lands within 10% of the target") {
  for (double rate : {0.2, 0.3, 0.5}) {
    auto c = small_synthetic(1000);
    c.label_rate = rate;
    double clicks = 0.0, total = 0.0;
    for (const Session& s : generate_synthetic(c, 5)) {
      clicks += s.positives();
      total += static_cast<double>(s.labels.size());
    }
    CAPTURE(rate);
    CHECK(std::abs(clicks / total - rate) <= 0.1 * rate);
  }
}

TEST_CASE("taste-aligned candidates are clicked far more often than anti-aligned ones") {
  const auto d = generate_synthetic_detailed(small_synthetic(1000), 9);
  double hit_aligned = 0, n_aligned = 0, hit_anti = 0, n_anti = 0;
  for (std::size_t i = 0; i < d.sessions.size(); ++i) {
    for (std::size_t c = 0; c < d.sessions[i].labels.size(); ++c) {
      const double a = d.affinity[i][c];
      if (a > 0.5) {
        n_aligned += 1;
        hit_aligned += d.sessions[i].labels[c];
      } else if (a < -0.5) {
        n_anti += 1;
        hit_anti += d.sessions[i].labels[c];
      }
    }
  }
  REQUIRE(n_aligned > 100);
  REQUIRE(n_anti > 100);
  CHECK(hit_aligned / n_aligned - hit_anti / n_anti > 0.2);
}

TEST_CASE("infeasible synthetic configs are rejected") {
  auto c = small_synthetic(10);
  c.item_pool = 5;
  CHECK_THROWS_AS(generate_synthetic(c, 1), std::invalid_argument);
  c = small_synthetic(10);
  c.candidates = 1;
  CHECK_THROWS_AS(generate_synthetic(c, 1), std::invalid_argument);
}

TEST_CASE("JSONL round trip is lossless") {
  const auto c = small_synthetic(40);
  auto sessions = generate_synthetic(c, 21);
  // Awkward doubles must survive the text form exactly.
  sessions[0].user.dense[0] = 0.1 + 0.2;
  sessions[0].history[0].dense[1] = -1e-300;
  const auto path = temp_path("roundtrip.jsonl");
  save_jsonl(path, sessions);
  CHECK(load_jsonl(path) == sessions);
  std::filesystem::remove(path);
}

TEST_CASE("an empty file loads as an empty dataset") {
  const auto path = temp_path("empty.jsonl");
  { std::ofstream out(path); }
  CHECK(load_jsonl(path).empty());
  std::filesystem::remove(path);
}

TEST_CASE("a malformed line reports its line number") {
  const auto c = small_synthetic(2);
  const auto sessions = generate_synthetic(c, 4);
  const auto path = temp_path("malformed.jsonl");
  {
    std::ofstream out(path);
    out << to_json_line(sessions[0]) << "\n" << to_json_line(sessions[1]) << "\n{\"user\": oops}\n";
  }
  try {
    load_jsonl(path);
    FAIL("expected a schema error");
  } catch (const SchemaError& e) {
    CHECK(std::string(e.what()).find("line 3") != std::string::npos);
  }
  std::filesystem::remove(path);
}

TEST_CASE("a labels/candidates length mismatch is a schema error") {
  Rng rng(8);
  Session s = testing::random_session(testing::tiny_schema(), 2, 3, rng);
  s.labels.push_back(1);
  CHECK_THROWS_AS(parse_json_line(to_json_line(s), 1), SchemaError);
}

TEST_CASE("10 sessions in batches of 4 give sizes 4, 4, 2 padded per batch") {
  Rng rng(6);
  const FeatureSchema schema = testing::tiny_schema();
  std::vector<Session> sessions;
  for (std::size_t i = 0; i < 10; ++i) sessions.push_back(testing::random_session(schema, 1 + i % 4, 2 + i % 3, rng));
  const auto batches = batch_sessions(sessions, 4);
  REQUIRE(batches.size() == 3);
  CHECK(batches[0].size() == 4);
  CHECK(batches[1].size() == 4);
  CHECK(batches[2].size() == 2);
  std::size_t source = 0;
  for (const Batch& b : batches) {
    for (const PaddedSession& p : b.rows) {
      const Session& s = sessions[source];
      CHECK(p.source == source);
      CHECK(p.history.size() == b.history_len);
      CHECK(p.candidates.size() == b.candidate_len);
      CHECK(p.real_history() == s.history.size());
      CHECK(p.real_candidates() == s.candidates.size());
      for (std::size_t i = 0; i < p.history.size(); ++i) CHECK((p.history_mask[i] == 1) == (i < s.history.size()));
      for (std::size_t i = 0; i < p.candidates.size(); ++i) {
        CHECK((p.candidate_mask[i] == 1) == (i < s.candidates.size()));
        if (!p.candidate_mask[i]) CHECK(p.labels[i] == 0);
      }
      ++source;
    }
  }
}

TEST_CASE("padding never changes losses or rankings") {
  const ModelConfig cfg = testing::tiny_config(4, 3, 2, 1);
  const Model model = Model::create(cfg, 5);
  Rng rng(13);
  for (int trial = 0; trial < 10; ++trial) {
    const Session s = testing::random_session(cfg.schema, 2 + trial % 3, 4, rng);
    const PaddedSession tight = as_padded(s, trial);
    const PaddedSession loose = pad_session(s, 4 + trial % 2, 6, trial);
    ad::Graph g1, g2;
    const auto a = forward_losses(g1, model, tight, Objective::joint, 77);
    const auto b = forward_losses(g2, model, loose, Objective::joint, 77);
    CHECK(std::abs(a.total.item() - b.total.item()) <= 1e-9);
    CHECK(std::abs(a.generative.item() - b.generative.item()) <= 1e-9);
    CHECK(std::abs(a.scorer.item() - b.scorer.item()) <= 1e-9);
    CHECK(std::abs(a.distillation.item() - b.distillation.item()) <= 1e-9);
    CHECK(rank_student(model, tight) == rank_student(model, loose));
    CHECK(rank_generator(model, tight, 3) == rank_generator(model, loose, 3));
    const auto r = rank_student(model, loose);
    for (std::size_t k : {1, 2, 3}) {
      CHECK(eval::ndcg_at_k(r, loose.labels, k) == eval::ndcg_at_k(r, s.labels, k));
    }
  }
}

TEST_CASE("dense statistics standardise features") {
  const auto c = small_synthetic(100);
  const auto sessions = generate_synthetic(c, 2);
  const DenseStats st = DenseStats::fit(sessions, c.schema);
  REQUIRE(st.item_mean.size() == 2);
  REQUIRE(st.user_std.size() == 4);
  for (double v : st.item_std) CHECK(v > 0.0);
  const DenseStats id = DenseStats::identity(c.schema);
  CHECK(id.item_mean == std::vector<double>(2, 0.0));
  CHECK(id.user_std == std::vector<double>(4, 1.0));
}
