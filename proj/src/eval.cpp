#include "psad/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "psad/kernels.hpp"
#include "psad/train.hpp"

namespace psad::eval {

namespace {

void check_ranking(std::span<const std::size_t> ranking, std::size_t n_labels, std::size_t k) {
  if (k > ranking.size()) {
    throw std::invalid_argument("metric: k=" + std::to_string(k) + " exceeds ranking length " +
                                std::to_string(ranking.size()));
  }
  std::vector<std::uint8_t> seen(n_labels, 0);
  for (std::size_t i : ranking) {
    if (i >= n_labels) throw std::invalid_argument("metric: ranking entry " + std::to_string(i) + " out of range");
    if (seen[i]) throw std::invalid_argument("metric: duplicate item " + std::to_string(i) + " in ranking");
    seen[i] = 1;
  }
}

std::size_t count_positive(std::span<const int> labels) {
  return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
}

std::ofstream open_csv(const std::filesystem::path& path, const std::string& config_json) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  if (!config_json.empty()) out << "# config: " << config_json << "\n";
  out.precision(17);
  return out;
}

}  // namespace

double ndcg_at_k(std::span<const std::size_t> ranking, std::span<const int> labels, std::size_t k) {
  check_ranking(ranking, labels.size(), k);
  const std::size_t positives = count_positive(labels);
  if (positives == 0) return 0.0;
  double dcg = 0.0;
  for (std::size_t r = 0; r < k; ++r) {
    if (labels[ranking[r]] == 1) dcg += 1.0 / std::log2(static_cast<double>(r) + 2.0);
  }
  double idcg = 0.0;
  for (std::size_t r = 0; r < std::min(k, positives); ++r) idcg += 1.0 / std::log2(static_cast<double>(r) + 2.0);
  return dcg / idcg;
}

double map_at_k(std::span<const std::size_t> ranking, std::span<const int> labels, std::size_t k) {
  check_ranking(ranking, labels.size(), k);
  const std::size_t positives = count_positive(labels);
  if (positives == 0) return 0.0;
  double sum = 0.0;
  std::size_t hits = 0;
  for (std::size_t r = 0; r < k; ++r) {
    if (labels[ranking[r]] != 1) continue;
    ++hits;
    sum += static_cast<double>(hits) / static_cast<double>(r + 1);
  }
  return sum / static_cast<double>(std::min(k, positives));
}

const MetricRow& MetricsReport::find(const std::string& variant, std::size_t k, const std::string& segment) const {
  for (const MetricRow& r : rows)
    if (r.variant == variant && r.k == k && r.segment == segment) return r;
  throw std::out_of_range("no metric row for " + variant + "@" + std::to_string(k) + " (" + segment + ")");
}

void MetricsReport::write_csv(const std::filesystem::path& path, const std::string& config_json) const {
  auto out = open_csv(path, config_json);
  out << "variant,segment,k,ndcg,map,sessions\n";
  for (const MetricRow& r : rows) {
    out << r.variant << ',' << r.segment << ',' << r.k << ',' << r.ndcg << ',' << r.map << ',' << r.sessions << '\n';
  }
}

std::vector<std::uint8_t> activity_segments(const std::vector<data::Session>& sessions, double fraction) {
  std::vector<std::size_t> order(sessions.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return sessions[a].history.size() > sessions[b].history.size();
  });
  const auto high = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(sessions.size())));
  std::vector<std::uint8_t> is_high(sessions.size(), 0);
  for (std::size_t i = 0; i < std::min(high, order.size()); ++i) is_high[order[i]] = 1;
  return is_high;
}

MetricsReport summarize(const std::string& variant, const std::vector<data::Session>& sessions,
                        const std::vector<std::vector<std::size_t>>& rankings, std::span<const std::size_t> ks,
                        double segment_fraction) {
  if (rankings.size() != sessions.size()) throw std::invalid_argument("summarize: one ranking per session needed");
  const auto is_high = activity_segments(sessions, segment_fraction);
  MetricsReport report;
  for (const auto& r : rankings) report.skipped += r.empty() ? 1 : 0;
  for (const char* segment : {"all", "high", "low"}) {
    const std::string seg = segment;
    for (std::size_t k : ks) {
      MetricRow row{variant, seg, k, 0.0, 0.0, 0};
      for (std::size_t i = 0; i < sessions.size(); ++i) {
        if (rankings[i].empty()) continue;
        if (seg == "high" && !is_high[i]) continue;
        if (seg == "low" && is_high[i]) continue;
        row.ndcg += ndcg_at_k(rankings[i], sessions[i].labels, k);
        row.map += map_at_k(rankings[i], sessions[i].labels, k);
        ++row.sessions;
      }
      if (row.sessions > 0) {
        row.ndcg /= static_cast<double>(row.sessions);
        row.map /= static_cast<double>(row.sessions);
      }
      report.rows.push_back(row);
    }
  }
  return report;
}

std::vector<std::vector<std::size_t>> rank_all(const Model& model, const std::vector<data::Session>& sessions,
                                               Variant variant, std::uint64_t seed, int threads) {
  std::vector<data::PaddedSession> eligible;
  std::vector<std::size_t> where;
  for (std::size_t i = 0; i < sessions.size(); ++i) {
    if (sessions[i].candidates.size() < model.config.length) continue;
    eligible.push_back(data::as_padded(sessions[i], i));
    where.push_back(i);
  }
  const kernels::Rankings ranked = threads > 1 ? kernels::rank_batch_omp(model, eligible, variant, seed, threads)
                                               : kernels::rank_batch_serial(model, eligible, variant, seed);
  std::vector<std::vector<std::size_t>> out(sessions.size());
  for (std::size_t j = 0; j < where.size(); ++j) out[where[j]] = ranked[j];
  return out;
}

MetricsReport evaluate(const Model& model, const std::vector<data::Session>& sessions, Variant variant,
                       std::span<const std::size_t> ks, std::uint64_t seed, int threads, double segment_fraction) {
  for (std::size_t k : ks) {
    if (k > model.config.length) throw std::invalid_argument("evaluate: k exceeds T");
  }
  return summarize(variant_name(variant), sessions, rank_all(model, sessions, variant, seed, threads), ks,
                   segment_fraction);
}

MetricsReport random_baseline(const std::vector<data::Session>& sessions, std::span<const std::size_t> ks,
                              std::uint64_t seed, double segment_fraction) {
  Rng rng(derive_seed(seed, "random-baseline"));
  std::vector<std::vector<std::size_t>> rankings;
  for (const data::Session& s : sessions) {
    std::vector<std::size_t> perm(s.candidates.size());
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    for (std::size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[rng.index(i)]);
    rankings.push_back(std::move(perm));
  }
  std::vector<std::size_t> usable;
  for (std::size_t k : ks) {
    for (const data::Session& s : sessions) {
      if (k > s.candidates.size()) throw std::invalid_argument("random_baseline: k exceeds a session's M");
    }
    usable.push_back(k);
  }
  return summarize("random", sessions, rankings, usable, segment_fraction);
}

const TimingRow& TimingReport::find(const std::string& variant, std::size_t batch_size, const std::string& phase) const {
  for (const TimingRow& r : rows)
    if (r.variant == variant && r.batch_size == batch_size && r.phase == phase) return r;
  throw std::out_of_range("no timing row for " + variant);
}

void TimingReport::write_csv(const std::filesystem::path& path, const std::string& config_json) const {
  auto out = open_csv(path, config_json);
  out << "variant,batch_size,phase,mean_seconds,warmup_steps,measured_steps\n";
  for (const TimingRow& r : rows) {
    out << r.variant << ',' << r.batch_size << ',' << r.phase << ',' << r.mean_seconds << ',' << r.warmup << ','
        << r.steps << '\n';
  }
}

TimingReport bench_latency(const Model& model, const std::vector<data::Session>& sessions,
                           std::span<const std::size_t> batch_sizes, std::size_t warmup, std::size_t steps,
                           bool include_train) {
  if (steps == 0) throw std::invalid_argument("bench_latency: need at least one measured step");
  std::vector<std::size_t> eligible;
  for (std::size_t i = 0; i < sessions.size(); ++i) {
    if (sessions[i].candidates.size() >= model.config.length) eligible.push_back(i);
  }
  if (eligible.empty()) throw std::invalid_argument("bench_latency: no session has T candidates");

  using clock = std::chrono::steady_clock;
  TimingReport report;
  for (std::size_t b : batch_sizes) {
    const std::size_t total_steps = warmup + steps;
    std::vector<std::vector<data::PaddedSession>> batches(total_steps);
    std::vector<data::Batch> train_batches(total_steps);
    for (std::size_t s = 0; s < total_steps; ++s) {
      std::vector<data::Session> picked;
      std::vector<std::size_t> order;
      for (std::size_t i = 0; i < b; ++i) {
        const std::size_t idx = eligible[(s * b + i) % eligible.size()];
        batches[s].push_back(data::as_padded(sessions[idx], idx));
        order.push_back(idx);
      }
      if (include_train) train_batches[s] = data::batch_sessions(sessions, order, b).front();
    }
    for (Variant v : {Variant::generator, Variant::student}) {
      double elapsed = 0.0;
      for (std::size_t s = 0; s < total_steps; ++s) {
        const auto start = clock::now();
        const auto ranked = kernels::rank_batch_serial(model, batches[s], v, 0);
        const double sec = std::chrono::duration<double>(clock::now() - start).count();
        if (ranked.size() != b) throw std::logic_error("bench_latency: lost sessions");
        if (s >= warmup) elapsed += sec;
      }
      report.rows.push_back({variant_name(v), b, "inference", elapsed / static_cast<double>(steps), warmup, steps});
    }
    if (!include_train) continue;
    for (Variant v : {Variant::generator, Variant::student}) {
      Model copy = model;
      const Objective objective = v == Variant::generator ? Objective::generator_only : Objective::student_only;
      copy.set_teacher_trainable(objective != Objective::student_only);
      copy.set_scorer_trainable(objective != Objective::generator_only);
      ad::AdamState adam;
      double elapsed = 0.0;
      for (std::size_t s = 0; s < total_steps; ++s) {
        const auto start = clock::now();
        distill::train_step(copy, adam, train_batches[s], objective, 0, s, 1);
        const double sec = std::chrono::duration<double>(clock::now() - start).count();
        if (s >= warmup) elapsed += sec;
      }
      report.rows.push_back({variant_name(v), b, "train", elapsed / static_cast<double>(steps), warmup, steps});
    }
  }
  return report;
}

void split(const std::vector<data::Session>& sessions, double holdout_fraction, std::vector<data::Session>& train,
           std::vector<data::Session>& test) {
  if (!(holdout_fraction > 0.0 && holdout_fraction < 1.0)) {
    throw std::invalid_argument("split: holdout fraction must be in (0, 1)");
  }
  const auto n_test = static_cast<std::size_t>(std::round(holdout_fraction * static_cast<double>(sessions.size())));
  const std::size_t n_train = sessions.size() - n_test;
  train.assign(sessions.begin(), sessions.begin() + static_cast<std::ptrdiff_t>(n_train));
  test.assign(sessions.begin() + static_cast<std::ptrdiff_t>(n_train), sessions.end());
}

RunResult train_and_evaluate(const config::RunConfig& config, const std::vector<data::Session>& train,
                             const std::vector<data::Session>& test) {
  RunResult r{Model::create(config.model, config.seed), {}, {}};
  distill::TrainConfig tc = config.train;
  tc.seed = config.seed;
  distill::train(r.model, train, tc);
  r.generator = evaluate(r.model, test, Variant::generator, config.eval.ks, config.seed, config.eval.threads,
                         config.eval.segment_fraction);
  r.student = evaluate(r.model, test, Variant::student, config.eval.ks, config.seed, config.eval.threads,
                       config.eval.segment_fraction);
  return r;
}

std::vector<SweepRow> sweep(const config::RunConfig& base, const std::vector<data::Session>& train,
                            const std::vector<data::Session>& test) {
  auto or_base = [](auto values, auto fallback) {
    if (values.empty()) values.push_back(fallback);
    return values;
  };
  const auto ks = or_base(base.sweep.block_sizes, base.model.block_size);
  const auto gammas = or_base(base.sweep.gammas, base.model.gamma);
  const auto alphas = or_base(base.sweep.alphas, base.model.distill.alpha);
  const auto seeds = or_base(base.sweep.seeds, base.seed);
  std::vector<SweepRow> rows;
  for (std::size_t k : ks) {
    for (std::size_t gamma : gammas) {
      for (double alpha : alphas) {
        for (std::uint64_t seed : seeds) {
          config::RunConfig c = base;
          c.model.block_size = k;
          c.model.gamma = gamma;
          c.model.distill.alpha = alpha;
          c.seed = seed;
          c = config::resolve(c);
          const auto errors = config::validation_errors(c);
          if (!errors.empty()) throw config::ConfigError("sweep point invalid: " + errors.front());
          RunResult r = train_and_evaluate(c, train, test);
          rows.push_back({c.model.block_size, c.model.gamma, alpha, seed, std::move(r.generator),
                          std::move(r.student)});
        }
      }
    }
  }
  return rows;
}

void write_sweep_csv(const std::filesystem::path& path, const std::vector<SweepRow>& rows,
                     std::span<const std::size_t> ks, const std::string& config_json) {
  auto out = open_csv(path, config_json);
  out << "K,gamma,alpha,seed";
  for (const char* v : {"G", "S"})
    for (std::size_t k : ks) out << ',' << v << "_ndcg@" << k << ',' << v << "_map@" << k;
  out << '\n';
  for (const SweepRow& r : rows) {
    out << r.block_size << ',' << r.gamma << ',' << r.alpha << ',' << r.seed;
    for (const MetricsReport* rep : {&r.generator, &r.student}) {
      for (std::size_t k : ks) {
        const MetricRow& m = rep->find(rep->rows.front().variant, k);
        out << ',' << m.ndcg << ',' << m.map;
      }
    }
    out << '\n';
  }
}

}  // namespace psad::eval
