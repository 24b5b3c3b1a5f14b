#include "psad/train.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>

#include "psad/kernels.hpp"

namespace psad::distill {

namespace {

const char* phase_name(Objective objective) {
  switch (objective) {
    case Objective::joint: return "joint";
    case Objective::generator_only: return "teacher";
    case Objective::student_only: return "student";
  }
  return "joint";
}

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch, bool shuffle) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (!shuffle) return order;
  Rng rng(derive_seed(seed, "shuffle", epoch));
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);
  return order;
}

std::ofstream open_csv(const std::filesystem::path& path, const std::string& config_json) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  if (!config_json.empty()) out << "# config: " << config_json << "\n";
  out.precision(17);
  return out;
}

}  // namespace

StepRecord train_step(Model& model, ad::AdamState& adam, const data::Batch& batch, Objective objective,
                      std::uint64_t seed, std::uint64_t step, int threads) {
  const auto start = std::chrono::steady_clock::now();
  const kernels::BatchGradients grads =
      threads > 1 ? kernels::batch_gradients_omp(model, batch, objective, seed, step, threads)
                  : kernels::batch_gradients_serial(model, batch, objective, seed, step);
  if (grads.non_finite >= 0 || !std::isfinite(grads.total)) {
    throw DivergenceError(step, "training diverged: non-finite loss at step " + std::to_string(step));
  }
  ad::adam_step(model.params, grads.grads, adam);
  StepRecord r;
  r.step = step;
  r.phase = phase_name(objective);
  r.generative = grads.generative;
  r.scorer = grads.scorer;
  r.distillation = grads.distillation;
  r.total = grads.total;
  r.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  return r;
}

TrainLog train(Model& model, const std::vector<data::Session>& dataset, const TrainConfig& config,
               const EpochCallback& on_epoch) {
  if (dataset.empty()) throw std::invalid_argument("train: dataset is empty");
  if (config.batch_size == 0) throw std::invalid_argument("train: batch size must be positive");
  model.embedding.stats = data::DenseStats::fit(dataset, model.config.schema);

  struct Phase {
    Objective objective;
    std::size_t epochs;
  };
  std::vector<Phase> phases;
  if (model.config.distill.mode == Mode::online) {
    phases.push_back({Objective::joint, config.epochs});
  } else {
    phases.push_back({Objective::generator_only, config.teacher_epochs});
    phases.push_back({Objective::student_only, config.epochs});
  }

  TrainLog log;
  std::size_t step = 0;
  std::size_t epoch_counter = 0;
  for (const Phase& phase : phases) {
    // Fresh optimiser state per phase; frozen parameters keep their values.
    ad::AdamState adam;
    adam.learning_rate = config.learning_rate;
    model.set_teacher_trainable(phase.objective != Objective::student_only);
    model.set_scorer_trainable(phase.objective != Objective::generator_only);
    for (std::size_t e = 0; e < phase.epochs; ++e, ++epoch_counter) {
      if (config.max_steps != 0 && step >= config.max_steps) break;
      const auto start = std::chrono::steady_clock::now();
      const auto order = epoch_order(dataset.size(), config.seed, epoch_counter, config.shuffle);
      double total = 0.0;
      std::size_t count = 0;
      for (const data::Batch& batch : data::batch_sessions(dataset, order, config.batch_size)) {
        if (config.max_steps != 0 && step >= config.max_steps) break;
        StepRecord r = train_step(model, adam, batch, phase.objective, config.seed, step, config.threads);
        r.epoch = epoch_counter;
        total += r.total;
        ++count;
        log.steps.push_back(r);
        ++step;
      }
      EpochRecord er;
      er.epoch = epoch_counter;
      er.phase = phase_name(phase.objective);
      er.mean_total = count ? total / static_cast<double>(count) : 0.0;
      er.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
      if (on_epoch) er.metrics = on_epoch(model, epoch_counter);
      log.epochs.push_back(std::move(er));
    }
  }
  model.set_teacher_trainable(true);
  model.set_scorer_trainable(true);
  return log;
}

void TrainLog::write_csv(const std::filesystem::path& path, const std::string& config_json) const {
  auto out = open_csv(path, config_json);
  out << "step,epoch,phase,L_gen,L_scorer,L_KD,total,wall_ms\n";
  for (const StepRecord& r : steps) {
    out << r.step << ',' << r.epoch << ',' << r.phase << ',' << r.generative << ',' << r.scorer << ','
        << r.distillation << ',' << r.total << ',' << r.wall_ms << '\n';
  }
}

void TrainLog::write_epoch_csv(const std::filesystem::path& path, const std::string& config_json) const {
  auto out = open_csv(path, config_json);
  out << "epoch,phase,mean_total,wall_ms,metric,value\n";
  for (const EpochRecord& r : epochs) {
    if (r.metrics.empty()) {
      out << r.epoch << ',' << r.phase << ',' << r.mean_total << ',' << r.wall_ms << ",,\n";
      continue;
    }
    for (const auto& [name, value] : r.metrics) {
      out << r.epoch << ',' << r.phase << ',' << r.mean_total << ',' << r.wall_ms << ',' << name << ',' << value
          << '\n';
    }
  }
}

}  // namespace psad::distill
