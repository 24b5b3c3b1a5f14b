// Ranking metrics, model evaluation, random baseline, latency benchmark and
// hyperparameter sweeps.

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "psad/config.hpp"
#include "psad/data.hpp"
#include "psad/model.hpp"

namespace psad::eval {

/// DCG@k / IDCG@k with linear gain; 0 when no label is positive. Throws on
/// duplicate or out-of-range ranking entries and when k > |ranking|.
double ndcg_at_k(std::span<const std::size_t> ranking, std::span<const int> labels, std::size_t k);

/// Truncated average precision, normalised by min(k, #positives); 0 when no
/// label is positive.
double map_at_k(std::span<const std::size_t> ranking, std::span<const int> labels, std::size_t k);

struct MetricRow {
  std::string variant;
  std::string segment;  // all, high or low
  std::size_t k = 0;
  double ndcg = 0.0;
  double map = 0.0;
  std::size_t sessions = 0;
};

struct MetricsReport {
  std::vector<MetricRow> rows;
  std::size_t skipped = 0;  // sessions with T > M

  const MetricRow& find(const std::string& variant, std::size_t k, const std::string& segment = "all") const;
  /// variant,segment,k,ndcg,map,sessions
  void write_csv(const std::filesystem::path& path, const std::string& config_json = "") const;
};

/// Indices of the high-activity sessions: the top `fraction` by history
/// length, ties broken by lower index.
std::vector<std::uint8_t> activity_segments(const std::vector<data::Session>& sessions, double fraction);

/// Per-session metrics averaged over the rankings `rankings[i]` of
/// `sessions[i]`; empty rankings count as skipped.
MetricsReport summarize(const std::string& variant, const std::vector<data::Session>& sessions,
                        const std::vector<std::vector<std::size_t>>& rankings, std::span<const std::size_t> ks,
                        double segment_fraction = 0.2);

/// Ranks every session with `variant` and averages metrics. Sessions with
/// fewer than T candidates are skipped and counted.
MetricsReport evaluate(const Model& model, const std::vector<data::Session>& sessions, Variant variant,
                       std::span<const std::size_t> ks, std::uint64_t seed, int threads = 1,
                       double segment_fraction = 0.2);

/// Rankings for every session; empty for skipped sessions.
std::vector<std::vector<std::size_t>> rank_all(const Model& model, const std::vector<data::Session>& sessions,
                                               Variant variant, std::uint64_t seed, int threads = 1);

/// Seeded uniformly random permutations of the candidates.
MetricsReport random_baseline(const std::vector<data::Session>& sessions, std::span<const std::size_t> ks,
                              std::uint64_t seed, double segment_fraction = 0.2);

struct TimingRow {
  std::string variant;
  std::size_t batch_size = 0;
  std::string phase;  // train or inference
  double mean_seconds = 0.0;
  std::size_t warmup = 0;
  std::size_t steps = 0;
};

struct TimingReport {
  std::vector<TimingRow> rows;
  const TimingRow& find(const std::string& variant, std::size_t batch_size, const std::string& phase) const;
  /// variant,batch_size,phase,mean_seconds,warmup_steps,measured_steps
  void write_csv(const std::filesystem::path& path, const std::string& config_json = "") const;
};

/// Mean wall-clock seconds per step over `steps` measured steps after
/// `warmup`, single-threaded. Step s uses sessions [s * b, (s + 1) * b)
/// modulo the dataset. The train phase times one gradient step of each
/// head on a copy of the model.
TimingReport bench_latency(const Model& model, const std::vector<data::Session>& sessions,
                           std::span<const std::size_t> batch_sizes, std::size_t warmup, std::size_t steps = 10,
                           bool include_train = false);

struct SweepRow {
  std::size_t block_size = 0;
  std::size_t gamma = 0;
  double alpha = 0.0;
  std::uint64_t seed = 0;
  MetricsReport generator;
  MetricsReport student;
};

/// First `1 - fraction` of the sessions for training, the rest held out.
void split(const std::vector<data::Session>& sessions, double holdout_fraction, std::vector<data::Session>& train,
           std::vector<data::Session>& test);

/// Trains a fresh model from `config` on `train` and evaluates both variants
/// on `test`.
struct RunResult {
  Model model;
  MetricsReport generator;
  MetricsReport student;
};
RunResult train_and_evaluate(const config::RunConfig& config, const std::vector<data::Session>& train,
                             const std::vector<data::Session>& test);

/// One run per (K, gamma, alpha, seed); empty grid axes use the base value.
std::vector<SweepRow> sweep(const config::RunConfig& base, const std::vector<data::Session>& train,
                            const std::vector<data::Session>& test);

/// K,gamma,alpha,seed then G/S NDCG and MAP per k (segment all).
void write_sweep_csv(const std::filesystem::path& path, const std::vector<SweepRow>& rows,
                     std::span<const std::size_t> ks, const std::string& config_json = "");

}  // namespace psad::eval
