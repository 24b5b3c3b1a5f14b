#include "psad/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "json.hpp"
#include "psad/rng.hpp"

namespace psad::data {

using nlohmann::json;

int Session::positives() const {
  return static_cast<int>(std::count(labels.begin(), labels.end(), 1));
}

namespace {

void check_ids(const std::vector<std::int64_t>& ids, const std::vector<std::size_t>& vocab,
               std::string_view side) {
  if (ids.size() != vocab.size()) {
    throw SchemaError(std::string(side) + ": expected " + std::to_string(vocab.size()) +
                      " sparse fields, got " + std::to_string(ids.size()));
  }
  for (std::size_t f = 0; f < ids.size(); ++f) {
    if (ids[f] < 0 || static_cast<std::size_t>(ids[f]) >= vocab[f]) {
      throw SchemaError(std::string(side) + ": id " + std::to_string(ids[f]) + " out of vocabulary for field " +
                        std::to_string(f) + " (size " + std::to_string(vocab[f]) + ")");
    }
  }
}

void check_item(const Item& item, const FeatureSchema& schema, std::string_view side) {
  check_ids(item.sparse, schema.item_vocab, side);
  if (item.dense.size() != schema.item_dense) {
    throw SchemaError(std::string(side) + ": expected " + std::to_string(schema.item_dense) +
                      " dense features, got " + std::to_string(item.dense.size()));
  }
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

void validate(const Session& session, const FeatureSchema& schema) {
  if (session.history.empty()) throw SchemaError("session has empty history");
  if (session.candidates.empty()) throw SchemaError("session has no candidates");
  if (session.labels.size() != session.candidates.size()) {
    throw SchemaError("labels length " + std::to_string(session.labels.size()) + " != candidates length " +
                      std::to_string(session.candidates.size()));
  }
  for (int y : session.labels) {
    if (y != 0 && y != 1) throw SchemaError("labels must be 0 or 1");
  }
  check_ids(session.user.sparse, schema.user_vocab, "user");
  if (session.user.dense.size() != schema.user_dense) {
    throw SchemaError("user: expected " + std::to_string(schema.user_dense) + " dense features");
  }
  for (const Item& it : session.history) check_item(it, schema, "history item");
  for (const Item& it : session.candidates) check_item(it, schema, "candidate item");
}

std::vector<Session> prepare_sessions(std::vector<Session> sessions, std::size_t history_cap) {
  std::vector<Session> out;
  out.reserve(sessions.size());
  for (Session& s : sessions) {
    if (s.positives() == 0) continue;
    if (s.history.size() > history_cap) {
      s.history.erase(s.history.begin(), s.history.end() - static_cast<std::ptrdiff_t>(history_cap));
    }
    out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic data

SyntheticDataset generate_synthetic_detailed(const SyntheticConfig& config, std::uint64_t seed) {
  const FeatureSchema& schema = config.schema;
  if (schema.item_vocab.empty() || schema.user_vocab.empty()) {
    throw std::invalid_argument("synthetic: need at least one item and one user sparse field");
  }
  if (config.candidates > config.item_pool) {
    throw std::invalid_argument("synthetic: candidates per session (" + std::to_string(config.candidates) +
                                ") exceed item pool (" + std::to_string(config.item_pool) + ")");
  }
  if (config.candidates < 2) throw std::invalid_argument("synthetic: need at least 2 candidates");
  if (config.history_min < 1 || config.history_min > config.history_max) {
    throw std::invalid_argument("synthetic: need 1 <= history_min <= history_max");
  }
  if (!(config.label_rate > 0.0 && config.label_rate < 1.0)) {
    throw std::invalid_argument("synthetic: label_rate must be in (0, 1)");
  }

  Rng rng(seed);
  const std::size_t r = config.latent_dim;
  const double unit = 1.0 / std::sqrt(static_cast<double>(r));
  auto random_vector = [&](double sd) {
    std::vector<double> v(r);
    for (double& x : v) x = rng.normal(0.0, sd);
    return v;
  };

  std::vector<std::vector<double>> categories(schema.item_vocab[0]);
  for (auto& c : categories) c = random_vector(unit);
  std::vector<std::vector<double>> brands(schema.item_vocab.size() > 1 ? schema.item_vocab[1] : 0);
  for (auto& b : brands) b = random_vector(0.3 * unit);
  std::vector<std::vector<double>> tastes(schema.user_vocab[0]);
  for (auto& t : tastes) t = random_vector(unit);
  const std::vector<double> dense_dir = random_vector(1.0);

  struct PoolItem {
    Item item;
    std::vector<double> latent;
  };
  std::vector<PoolItem> pool(config.item_pool);
  for (PoolItem& p : pool) {
    p.item.sparse.resize(schema.item_vocab.size());
    for (std::size_t f = 0; f < schema.item_vocab.size(); ++f) {
      p.item.sparse[f] = static_cast<std::int64_t>(rng.index(schema.item_vocab[f]));
    }
    p.latent = categories[static_cast<std::size_t>(p.item.sparse[0])];
    if (!brands.empty()) {
      const auto& b = brands[static_cast<std::size_t>(p.item.sparse[1])];
      for (std::size_t i = 0; i < r; ++i) p.latent[i] += b[i];
    }
    for (double& x : p.latent) x += rng.normal(0.0, 0.2 * unit);
    p.item.dense.resize(schema.item_dense);
    for (std::size_t f = 0; f < schema.item_dense; ++f) {
      if (f == 0) {
        double proj = 0.0;
        for (std::size_t i = 0; i < r; ++i) proj += p.latent[i] * dense_dir[i];
        p.item.dense[f] = proj + rng.normal(0.0, 0.1);
      } else {
        p.item.dense[f] = rng.uniform(1.0, 100.0);
      }
    }
  }

  auto affinity = [&](const std::vector<double>& taste, const std::vector<double>& latent) {
    double dot = 0.0;
    for (std::size_t i = 0; i < r; ++i) dot += taste[i] * latent[i];
    return dot * std::sqrt(static_cast<double>(r));
  };

  auto draw_user = [&](std::vector<double>& taste) {
    UserProfile u;
    u.sparse.resize(schema.user_vocab.size());
    for (std::size_t f = 0; f < schema.user_vocab.size(); ++f) {
      u.sparse[f] = static_cast<std::int64_t>(rng.index(schema.user_vocab[f]));
    }
    taste = tastes[static_cast<std::size_t>(u.sparse[0])];
    for (double& x : taste) x += rng.normal(0.0, 0.2 * unit);
    u.dense.resize(schema.user_dense);
    for (std::size_t f = 0; f < schema.user_dense; ++f) {
      u.dense[f] = f < r ? taste[f] / unit + rng.normal(0.0, 0.3) : rng.normal();
    }
    return u;
  };

  // Calibrate the click bias so that the mean click probability matches the
  // configured rate on a fixed pilot sample.
  const double position_drift = 0.3;
  const double noise_sd = 0.5;
  std::vector<double> pilot;
  for (int s = 0; s < 400; ++s) {
    std::vector<double> taste;
    draw_user(taste);
    for (int j = 0; j < 10; ++j) {
      const PoolItem& p = pool[rng.index(pool.size())];
      const double pos = static_cast<double>(rng.index(config.candidates)) / config.candidates;
      pilot.push_back(config.signal * affinity(taste, p.latent) - position_drift * pos +
                      rng.normal(0.0, noise_sd));
    }
  }
  double lo = -20.0, hi = 20.0;
  for (int it = 0; it < 100; ++it) {
    const double mid = 0.5 * (lo + hi);
    double rate = 0.0;
    for (double z : pilot) rate += sigmoid(z + mid);
    rate /= static_cast<double>(pilot.size());
    (rate < config.label_rate ? lo : hi) = mid;
  }
  const double bias = 0.5 * (lo + hi);

  SyntheticDataset out;
  out.sessions.reserve(config.sessions);
  std::vector<std::size_t> perm(pool.size());
  for (std::size_t s = 0; s < config.sessions; ++s) {
    Session session;
    std::vector<double> taste;
    session.user = draw_user(taste);

    const std::size_t n_hist =
        config.history_min + rng.index(config.history_max - config.history_min + 1);
    for (std::size_t tries = 0; session.history.size() < n_hist; ++tries) {
      const PoolItem& p = pool[rng.index(pool.size())];
      const double click = sigmoid(config.signal * affinity(taste, p.latent) + bias);
      if (tries > 50 * n_hist || rng.bernoulli(click)) session.history.push_back(p.item);
    }

    std::vector<double> aff;
    for (;;) {
      std::iota(perm.begin(), perm.end(), std::size_t{0});
      session.candidates.clear();
      aff.clear();
      for (std::size_t j = 0; j < config.candidates; ++j) {
        const std::size_t k = j + rng.index(perm.size() - j);
        std::swap(perm[j], perm[k]);
        session.candidates.push_back(pool[perm[j]].item);
        aff.push_back(affinity(taste, pool[perm[j]].latent));
      }
      bool ok = false;
      for (int attempt = 0; attempt < 20 && !ok; ++attempt) {
        session.labels.assign(config.candidates, 0);
        for (std::size_t j = 0; j < config.candidates; ++j) {
          const double pos = static_cast<double>(j) / config.candidates;
          const double logit = config.signal * aff[j] + bias - position_drift * pos + rng.normal(0.0, noise_sd);
          session.labels[j] = rng.bernoulli(sigmoid(logit)) ? 1 : 0;
        }
        const int pos_count = session.positives();
        ok = pos_count > 0 && pos_count < static_cast<int>(config.candidates);
      }
      if (ok) break;
    }
    out.sessions.push_back(std::move(session));
    out.affinity.push_back(std::move(aff));
  }
  return out;
}

std::vector<Session> generate_synthetic(const SyntheticConfig& config, std::uint64_t seed) {
  return generate_synthetic_detailed(config, seed).sessions;
}

// ---------------------------------------------------------------------------
// JSONL

namespace {

json item_to_json(const Item& item) { return json{{"sparse", item.sparse}, {"dense", item.dense}}; }

Item item_from_json(const json& j) {
  Item item;
  item.sparse = j.at("sparse").get<std::vector<std::int64_t>>();
  item.dense = j.at("dense").get<std::vector<double>>();
  return item;
}

}  // namespace

std::string to_json_line(const Session& session) {
  json j;
  j["user"] = json{{"sparse", session.user.sparse}, {"dense", session.user.dense}};
  j["history"] = json::array();
  for (const Item& it : session.history) j["history"].push_back(item_to_json(it));
  j["candidates"] = json::array();
  for (const Item& it : session.candidates) j["candidates"].push_back(item_to_json(it));
  j["labels"] = session.labels;
  return j.dump();
}

Session parse_json_line(const std::string& line, std::size_t line_number) {
  const std::string where = "line " + std::to_string(line_number) + ": ";
  Session s;
  try {
    const json j = json::parse(line);
    s.user.sparse = j.at("user").at("sparse").get<std::vector<std::int64_t>>();
    s.user.dense = j.at("user").at("dense").get<std::vector<double>>();
    for (const json& it : j.at("history")) s.history.push_back(item_from_json(it));
    for (const json& it : j.at("candidates")) s.candidates.push_back(item_from_json(it));
    s.labels = j.at("labels").get<std::vector<int>>();
  } catch (const json::exception& e) {
    throw SchemaError(where + "malformed session: " + e.what());
  }
  if (s.labels.size() != s.candidates.size()) {
    throw SchemaError(where + "labels length " + std::to_string(s.labels.size()) +
                      " != candidates length " + std::to_string(s.candidates.size()));
  }
  return s;
}

std::vector<Session> load_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<Session> out;
  std::string line;
  std::size_t line_number = 0;
  while (std::getline(in, line)) {
    ++line_number;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    out.push_back(parse_json_line(line, line_number));
  }
  return out;
}

void save_jsonl(const std::filesystem::path& path, const std::vector<Session>& sessions) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const Session& s : sessions) out << to_json_line(s) << '\n';
}

// ---------------------------------------------------------------------------
// Dense statistics

DenseStats DenseStats::identity(const FeatureSchema& schema) {
  DenseStats st;
  st.item_mean.assign(schema.item_dense, 0.0);
  st.item_std.assign(schema.item_dense, 1.0);
  st.user_mean.assign(schema.user_dense, 0.0);
  st.user_std.assign(schema.user_dense, 1.0);
  return st;
}

DenseStats DenseStats::fit(const std::vector<Session>& sessions, const FeatureSchema& schema) {
  DenseStats st = identity(schema);
  auto finish = [](std::vector<double>& mean, std::vector<double>& sd, const std::vector<double>& sum,
                   const std::vector<double>& sq, double n) {
    if (n == 0) return;
    for (std::size_t f = 0; f < mean.size(); ++f) {
      mean[f] = sum[f] / n;
      const double var = sq[f] / n - mean[f] * mean[f];
      sd[f] = var > 1e-12 ? std::sqrt(var) : 1.0;
    }
  };
  std::vector<double> isum(schema.item_dense, 0.0), isq(schema.item_dense, 0.0);
  std::vector<double> usum(schema.user_dense, 0.0), usq(schema.user_dense, 0.0);
  double ni = 0, nu = 0;
  auto add_item = [&](const Item& it) {
    for (std::size_t f = 0; f < schema.item_dense; ++f) {
      isum[f] += it.dense[f];
      isq[f] += it.dense[f] * it.dense[f];
    }
    ni += 1;
  };
  for (const Session& s : sessions) {
    for (const Item& it : s.history) add_item(it);
    for (const Item& it : s.candidates) add_item(it);
    for (std::size_t f = 0; f < schema.user_dense; ++f) {
      usum[f] += s.user.dense[f];
      usq[f] += s.user.dense[f] * s.user.dense[f];
    }
    nu += 1;
  }
  finish(st.item_mean, st.item_std, isum, isq, ni);
  finish(st.user_mean, st.user_std, usum, usq, nu);
  return st;
}

// ---------------------------------------------------------------------------
// Padding and batching

std::size_t PaddedSession::real_history() const {
  return static_cast<std::size_t>(std::count(history_mask.begin(), history_mask.end(), 1));
}

std::size_t PaddedSession::real_candidates() const {
  return static_cast<std::size_t>(std::count(candidate_mask.begin(), candidate_mask.end(), 1));
}

PaddedSession pad_session(const Session& session, std::size_t history_len, std::size_t candidate_len,
                          std::size_t source) {
  if (history_len < session.history.size() || candidate_len < session.candidates.size()) {
    throw std::invalid_argument("pad_session: target length shorter than session");
  }
  PaddedSession p;
  p.user = session.user;
  p.source = source;
  auto pad_item = [](const std::vector<Item>& items) {
    Item blank;
    if (!items.empty()) {
      blank.sparse.assign(items.front().sparse.size(), 0);
      blank.dense.assign(items.front().dense.size(), 0.0);
    }
    return blank;
  };
  p.history = session.history;
  p.history_mask.assign(session.history.size(), 1);
  const Item hblank = pad_item(session.history);
  while (p.history.size() < history_len) {
    p.history.push_back(hblank);
    p.history_mask.push_back(0);
  }
  p.candidates = session.candidates;
  p.candidate_mask.assign(session.candidates.size(), 1);
  p.labels = session.labels;
  const Item cblank = pad_item(session.candidates);
  while (p.candidates.size() < candidate_len) {
    p.candidates.push_back(cblank);
    p.candidate_mask.push_back(0);
    p.labels.push_back(0);
  }
  return p;
}

PaddedSession as_padded(const Session& session, std::size_t source) {
  return pad_session(session, session.history.size(), session.candidates.size(), source);
}

std::vector<Batch> batch_sessions(const std::vector<Session>& dataset, std::size_t batch_size) {
  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  return batch_sessions(dataset, order, batch_size);
}

std::vector<Batch> batch_sessions(const std::vector<Session>& dataset, const std::vector<std::size_t>& order,
                                  std::size_t batch_size) {
  if (batch_size == 0) throw std::invalid_argument("batch_sessions: batch size must be positive");
  std::vector<Batch> batches;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t end = std::min(order.size(), start + batch_size);
    Batch b;
    for (std::size_t i = start; i < end; ++i) {
      const Session& s = dataset.at(order[i]);
      b.history_len = std::max(b.history_len, s.history.size());
      b.candidate_len = std::max(b.candidate_len, s.candidates.size());
    }
    for (std::size_t i = start; i < end; ++i) {
      b.rows.push_back(pad_session(dataset[order[i]], b.history_len, b.candidate_len, order[i]));
    }
    batches.push_back(std::move(b));
  }
  return batches;
}

}  // namespace psad::data
