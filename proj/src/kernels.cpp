#include "psad/kernels.hpp"

#include <cmath>
#include <exception>
#include <limits>

#include <omp.h>

namespace psad::kernels {

namespace {

struct Partial {
  ad::GradientMap grads;
  double generative = 0.0, scorer = 0.0, distillation = 0.0, total = 0.0;
  long non_finite = -1;
};

void add_into(ad::GradientMap& acc, const ad::GradientMap& g) {
  for (const auto& [id, m] : g) {
    auto it = acc.find(id);
    if (it == acc.end()) {
      acc.emplace(id, m);
      continue;
    }
    for (std::size_t i = 0; i < m.data.size(); ++i) it->second.data[i] += m.data[i];
  }
}

double value_or_zero(const ad::Tensor& t) { return t.valid() ? t.item() : 0.0; }

/// Sequential sum over sessions [begin, end) of one chunk.
Partial run_chunk(const Model& model, const data::Batch& batch, Objective objective, std::uint64_t seed,
                  std::uint64_t step, std::size_t begin, std::size_t end) {
  Partial p;
  for (std::size_t i = begin; i < end; ++i) {
    const data::PaddedSession& s = batch.rows[i];
    ad::Graph g;
    LossTerms terms;
    ad::GradientMap grads;
    double total = 0.0;
    try {
      // Non-finite parameters surface as domain errors inside log or softmax
      // before the loss is formed; both count as divergence of this session.
      terms = forward_losses(g, model, s, objective, session_seed(seed, step, s.source));
      total = terms.total.item();
      if (std::isfinite(total)) grads = g.backward(terms.total);
    } catch (const ad::DomainError&) {
      total = std::numeric_limits<double>::quiet_NaN();
    }
    if (!std::isfinite(total)) {
      if (p.non_finite < 0) p.non_finite = static_cast<long>(i);
      continue;
    }
    add_into(p.grads, grads);
    p.generative += value_or_zero(terms.generative);
    p.scorer += value_or_zero(terms.scorer);
    p.distillation += value_or_zero(terms.distillation);
    p.total += total;
  }
  return p;
}

BatchGradients reduce(std::vector<Partial>& partials, std::size_t batch_size) {
  BatchGradients out;
  for (Partial& p : partials) {
    add_into(out.grads, p.grads);
    out.generative += p.generative;
    out.scorer += p.scorer;
    out.distillation += p.distillation;
    out.total += p.total;
    if (out.non_finite < 0) out.non_finite = p.non_finite;
  }
  const double inv = 1.0 / static_cast<double>(batch_size);
  for (auto& [id, m] : out.grads)
    for (double& v : m.data) v *= inv;
  out.generative *= inv;
  out.scorer *= inv;
  out.distillation *= inv;
  out.total *= inv;
  return out;
}

std::size_t chunk_count(std::size_t n) { return (n + kReductionChunk - 1) / kReductionChunk; }

}  // namespace

BatchGradients batch_gradients_serial(const Model& model, const data::Batch& batch, Objective objective,
                                      std::uint64_t seed, std::uint64_t step) {
  const std::size_t n = batch.size();
  std::vector<Partial> partials(chunk_count(n));
  for (std::size_t c = 0; c < partials.size(); ++c) {
    partials[c] = run_chunk(model, batch, objective, seed, step, c * kReductionChunk,
                            std::min(n, (c + 1) * kReductionChunk));
  }
  return reduce(partials, n);
}

BatchGradients batch_gradients_omp(const Model& model, const data::Batch& batch, Objective objective,
                                   std::uint64_t seed, std::uint64_t step, int threads) {
  const std::size_t n = batch.size();
  const long chunks = static_cast<long>(chunk_count(n));
  std::vector<Partial> partials(static_cast<std::size_t>(chunks));
  std::exception_ptr error;
#pragma omp parallel for schedule(dynamic) num_threads(threads)
  for (long c = 0; c < chunks; ++c) {
    try {
      const auto uc = static_cast<std::size_t>(c);
      partials[uc] = run_chunk(model, batch, objective, seed, step, uc * kReductionChunk,
                               std::min(n, (uc + 1) * kReductionChunk));
    } catch (...) {
#pragma omp critical
      if (!error) error = std::current_exception();
    }
  }
  if (error) std::rethrow_exception(error);
  return reduce(partials, n);
}

Rankings rank_batch_serial(const Model& model, const std::vector<data::PaddedSession>& sessions, Variant variant,
                           std::uint64_t seed) {
  Rankings out;
  out.reserve(sessions.size());
  for (const auto& s : sessions) out.push_back(rank_session(model, s, variant, seed));
  return out;
}

Rankings rank_batch_omp(const Model& model, const std::vector<data::PaddedSession>& sessions, Variant variant,
                        std::uint64_t seed, int threads) {
  Rankings out(sessions.size());
  const long n = static_cast<long>(sessions.size());
  std::exception_ptr error;
#pragma omp parallel for schedule(dynamic) num_threads(threads)
  for (long i = 0; i < n; ++i) {
    try {
      out[static_cast<std::size_t>(i)] = rank_session(model, sessions[static_cast<std::size_t>(i)], variant, seed);
    } catch (...) {
#pragma omp critical
      if (!error) error = std::current_exception();
    }
  }
  if (error) std::rethrow_exception(error);
  return out;
}

}  // namespace psad::kernels
