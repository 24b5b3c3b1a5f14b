// Session schema, JSONL ingestion, synthetic data and batching.

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace psad::data {

/// Width of every sparse-feature embedding row.
inline constexpr std::size_t kEmbeddingDim = 16;

struct Item {
  std::vector<std::int64_t> sparse;
  std::vector<double> dense;
  bool operator==(const Item&) const = default;
};

struct UserProfile {
  std::vector<std::int64_t> sparse;
  std::vector<double> dense;
  bool operator==(const UserProfile&) const = default;
};

/// One reranking instance. History is chronological (most recent last).
struct Session {
  UserProfile user;
  std::vector<Item> history;
  std::vector<Item> candidates;
  std::vector<int> labels;
  bool operator==(const Session&) const = default;

  int positives() const;
};

/// Vocabulary sizes per sparse field and dense widths, item and user side.
struct FeatureSchema {
  std::vector<std::size_t> item_vocab;
  std::size_t item_dense = 0;
  std::vector<std::size_t> user_vocab;
  std::size_t user_dense = 0;

  /// Concatenated item width before projection: 16k + |dense|.
  std::size_t item_width() const { return kEmbeddingDim * item_vocab.size() + item_dense; }
  std::size_t user_width() const { return kEmbeddingDim * user_vocab.size() + user_dense; }
};

class SchemaError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Throws SchemaError on out-of-vocabulary ids, wrong widths, empty history
/// or candidates, or labels that do not match the candidates.
void validate(const Session& session, const FeatureSchema& schema);

/// Keeps the last `history_cap` history items and drops sessions with no
/// positive label.
std::vector<Session> prepare_sessions(std::vector<Session> sessions, std::size_t history_cap);

struct SyntheticConfig {
  FeatureSchema schema;
  std::size_t sessions = 1000;
  std::size_t item_pool = 500;
  std::size_t history_min = 5;
  std::size_t history_max = 10;
  std::size_t candidates = 20;
  std::size_t latent_dim = 4;
  double label_rate = 0.3;
  /// Slope of the click logit in the user-item affinity.
  double signal = 2.0;
};

struct SyntheticDataset {
  std::vector<Session> sessions;
  /// Standardized user-item affinity per candidate, aligned with labels.
  std::vector<std::vector<double>> affinity;
};

/// Pure function of (config, seed). Users carry a latent taste vector and
/// items a latent vector; both leak into the first sparse field (taste /
/// category cluster) and the first dense feature. Clicks are Bernoulli of
/// sigmoid(signal * affinity + bias - position drift + noise), with bias
/// calibrated to `label_rate`. Every session has a positive and a negative.
SyntheticDataset generate_synthetic_detailed(const SyntheticConfig& config, std::uint64_t seed);
std::vector<Session> generate_synthetic(const SyntheticConfig& config, std::uint64_t seed);

/// JSONL: {"user":{"sparse":[..],"dense":[..]},"history":[item..],
/// "candidates":[item..],"labels":[0|1..]} with item = {"sparse":[..],"dense":[..]}.
std::string to_json_line(const Session& session);
Session parse_json_line(const std::string& line, std::size_t line_number);
std::vector<Session> load_jsonl(const std::filesystem::path& path);
void save_jsonl(const std::filesystem::path& path, const std::vector<Session>& sessions);

/// Per-field z-score statistics for dense features.
struct DenseStats {
  std::vector<double> item_mean, item_std;
  std::vector<double> user_mean, user_std;

  static DenseStats identity(const FeatureSchema& schema);
  /// Statistics over all history and candidate items and all users.
  static DenseStats fit(const std::vector<Session>& sessions, const FeatureSchema& schema);
};

/// A session padded to fixed history/candidate lengths. Mask value 1 marks a
/// real slot, 0 a padded one. Padded items have zero ids and features.
struct PaddedSession {
  UserProfile user;
  std::vector<Item> history;
  std::vector<Item> candidates;
  std::vector<std::uint8_t> history_mask;
  std::vector<std::uint8_t> candidate_mask;
  std::vector<int> labels;
  /// Index of the source session in its dataset.
  std::size_t source = 0;

  std::size_t real_history() const;
  std::size_t real_candidates() const;
};

PaddedSession pad_session(const Session& session, std::size_t history_len,
                          std::size_t candidate_len, std::size_t source = 0);
/// Unpadded view: lengths equal the session's own.
PaddedSession as_padded(const Session& session, std::size_t source = 0);

struct Batch {
  std::size_t history_len = 0;
  std::size_t candidate_len = 0;
  std::vector<PaddedSession> rows;

  std::size_t size() const { return rows.size(); }
};

/// Order-preserving batches; each batch pads to its own maximum lengths.
std::vector<Batch> batch_sessions(const std::vector<Session>& dataset, std::size_t batch_size);
/// Batches over dataset[order[0]], dataset[order[1]], ...
std::vector<Batch> batch_sessions(const std::vector<Session>& dataset, const std::vector<std::size_t>& order,
                                  std::size_t batch_size);

}  // namespace psad::data
