// psad: data generation, training, evaluation, inference, benchmarking and
// sweeps from one config file.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "psad/checkpoint.hpp"
#include "psad/config.hpp"
#include "psad/data.hpp"
#include "psad/eval.hpp"
#include "psad/train.hpp"

namespace {

using nlohmann::json;
using namespace psad;

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
  bool disable_sa = false, disable_ce = false, disable_pg = false, disable_ppe = false;
  long long seed = -1;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("-c,--config", c.config_path, "JSON config file");
  cmd->add_option("--set", c.overrides, "Override, e.g. model.K=2 (repeatable)");
  cmd->add_option("--seed", c.seed, "Master seed (overrides config)");
  cmd->add_flag("--disable-sa", c.disable_sa, "Decode all T positions as one block");
  cmd->add_flag("--disable-ce", c.disable_ce, "Skip contextual enhancement");
  cmd->add_flag("--disable-pg", c.disable_pg, "Skip the personalized gate");
  cmd->add_flag("--disable-ppe", c.disable_ppe, "Use the plain position bias");
}

config::RunConfig resolve_config(const Common& c) {
  std::vector<std::string> overrides = c.overrides;
  if (c.seed >= 0) overrides.push_back("seed=" + std::to_string(c.seed));
  if (c.disable_sa) overrides.push_back("ablation.disable_sa=true");
  if (c.disable_ce) overrides.push_back("ablation.disable_ce=true");
  if (c.disable_pg) overrides.push_back("ablation.disable_pg=true");
  if (c.disable_ppe) overrides.push_back("ablation.disable_ppe=true");
  return config::parse_and_validate(c.config_path, overrides);
}

/// Ablation flags given on the command line also apply to loaded models.
void apply_ablation_flags(const Common& c, Model& model) {
  model.config.disable_sa = model.config.disable_sa || c.disable_sa;
  model.config.disable_ce = model.config.disable_ce || c.disable_ce;
  model.config.disable_pg = model.config.disable_pg || c.disable_pg;
  model.config.disable_ppe = model.config.disable_ppe || c.disable_ppe;
}

std::string config_line(const config::RunConfig& cfg) { return config::to_json(cfg).dump(); }

void write_sidecar(const std::string& out, const config::RunConfig& cfg) {
  std::ofstream side(out + ".config.json");
  if (!side) throw std::runtime_error("cannot write " + out + ".config.json");
  side << config::to_json(cfg).dump(2) << '\n';
}

std::vector<data::Session> load_data(const std::string& path, const config::RunConfig& cfg,
                                     const data::FeatureSchema& schema) {
  auto sessions = data::prepare_sessions(data::load_jsonl(path), cfg.data.history_max);
  for (std::size_t i = 0; i < sessions.size(); ++i) {
    try {
      data::validate(sessions[i], schema);
    } catch (const data::SchemaError& e) {
      throw data::SchemaError(path + ": session " + std::to_string(i) + ": " + e.what());
    }
  }
  if (sessions.empty()) throw std::runtime_error(path + ": no usable sessions");
  return sessions;
}

std::vector<Variant> parse_variants(const std::string& name) {
  if (name == "PSAD-G" || name == "G" || name == "generator") return {Variant::generator};
  if (name == "PSAD-S" || name == "S" || name == "student") return {Variant::student};
  if (name == "both") return {Variant::generator, Variant::student};
  throw std::invalid_argument("unknown variant '" + name + "' (PSAD-G, PSAD-S or both)");
}

Model load_model(const std::string& path) {
  if (path.empty()) throw checkpoint::CheckpointError("a checkpoint is required (--checkpoint)");
  return checkpoint::load(path);
}

int fail(const std::string& code, const std::string& message) {
  std::cerr << "error: " << json{{"code", code}, {"message", message}}.dump() << '\n';
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Personalized semi-autoregressive reranking with online distillation"};
  app.require_subcommand(1);

  Common gen_c, train_c, eval_c, infer_c, bench_c, sweep_c;
  std::string gen_out, gen_test_out;
  std::string train_data, train_out, train_log, train_epoch_log;
  std::string eval_ckpt, eval_data, eval_out, eval_variant = "both";
  bool eval_baseline = false;
  std::string infer_ckpt, infer_data, infer_out, infer_variant = "PSAD-G";
  std::string bench_ckpt, bench_data, bench_out;
  std::string sweep_data, sweep_test, sweep_out;

  auto* gen = app.add_subcommand("gen-data", "Generate a seeded synthetic dataset as JSONL");
  add_common(gen, gen_c);
  gen->add_option("-o,--out", gen_out, "Output JSONL (all sessions, or the training split)")->required();
  gen->add_option("--test-out", gen_test_out, "Write the held-out split here");

  auto* train = app.add_subcommand("train", "Train a model and write a checkpoint");
  add_common(train, train_c);
  train->add_option("-d,--data", train_data, "Training JSONL")->required();
  train->add_option("-o,--out", train_out, "Checkpoint path")->required();
  train->add_option("--log", train_log, "Per-step TrainLog CSV");
  train->add_option("--epoch-log", train_epoch_log, "Per-epoch CSV");

  auto* ev = app.add_subcommand("eval", "Compute NDCG@K and MAP@K");
  add_common(ev, eval_c);
  ev->add_option("--checkpoint", eval_ckpt, "Trained checkpoint");
  ev->add_option("-d,--data", eval_data, "Evaluation JSONL")->required();
  ev->add_option("-o,--out", eval_out, "Metrics CSV")->required();
  ev->add_option("--variant", eval_variant, "PSAD-G, PSAD-S or both");
  ev->add_flag("--baseline", eval_baseline, "Add random-permutation baseline rows");

  auto* inf = app.add_subcommand("infer", "Write reranked lists as JSONL");
  add_common(inf, infer_c);
  inf->add_option("--checkpoint", infer_ckpt, "Trained checkpoint");
  inf->add_option("-d,--data", infer_data, "Input JSONL")->required();
  inf->add_option("-o,--out", infer_out, "Output JSONL")->required();
  inf->add_option("--variant", infer_variant, "PSAD-G or PSAD-S");

  auto* bench = app.add_subcommand("bench", "Time PSAD-G and PSAD-S, single-threaded");
  add_common(bench, bench_c);
  bench->add_option("--checkpoint", bench_ckpt, "Trained checkpoint");
  bench->add_option("-d,--data", bench_data, "Input JSONL")->required();
  bench->add_option("-o,--out", bench_out, "TimingReport CSV")->required();

  auto* sw = app.add_subcommand("sweep", "Train and evaluate over a grid of K, gamma, alpha and seeds");
  add_common(sw, sweep_c);
  sw->add_option("-d,--data", sweep_data, "Training JSONL (generated from the config when omitted)");
  sw->add_option("--test", sweep_test, "Evaluation JSONL (required with --data)");
  sw->add_option("-o,--out", sweep_out, "Sweep CSV")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (argc > 1 && argv[1][0] != '-' && app.get_subcommand_no_throw(argv[1]) == nullptr) {
      std::cerr << app.help();
      return fail("usage", std::string("unknown command '") + argv[1] + "'");
    }
    const int code = app.exit(e);
    if (code != 0) return fail("usage", e.what());
    return 0;
  }

  try {
    if (gen->parsed()) {
      const auto cfg = resolve_config(gen_c);
      const auto sessions = data::generate_synthetic(cfg.data, derive_seed(cfg.seed, "data"));
      if (gen_test_out.empty()) {
        data::save_jsonl(gen_out, sessions);
      } else {
        std::vector<data::Session> tr, te;
        eval::split(sessions, cfg.eval.holdout_fraction, tr, te);
        data::save_jsonl(gen_out, tr);
        data::save_jsonl(gen_test_out, te);
        write_sidecar(gen_test_out, cfg);
      }
      write_sidecar(gen_out, cfg);
      std::cout << "wrote " << sessions.size() << " sessions\n";
    } else if (train->parsed()) {
      const auto cfg = resolve_config(train_c);
      const auto sessions = load_data(train_data, cfg, cfg.model.schema);
      Model model = Model::create(cfg.model, cfg.seed);
      const auto log = distill::train(model, sessions, cfg.train);
      checkpoint::save(model, train_out);
      if (!train_log.empty()) log.write_csv(train_log, config_line(cfg));
      if (!train_epoch_log.empty()) log.write_epoch_csv(train_epoch_log, config_line(cfg));
      std::cout << "trained " << log.steps.size() << " steps, final loss " << log.steps.back().total << '\n';
    } else if (ev->parsed()) {
      const auto cfg = resolve_config(eval_c);
      Model model = load_model(eval_ckpt);
      apply_ablation_flags(eval_c, model);
      const auto sessions = load_data(eval_data, cfg, model.config.schema);
      eval::MetricsReport all;
      for (Variant v : parse_variants(eval_variant)) {
        auto rep = eval::evaluate(model, sessions, v, cfg.eval.ks, cfg.seed, cfg.eval.threads,
                                  cfg.eval.segment_fraction);
        if (rep.skipped) std::cerr << "warning: skipped " << rep.skipped << " sessions with T > M\n";
        all.rows.insert(all.rows.end(), rep.rows.begin(), rep.rows.end());
        all.skipped += rep.skipped;
      }
      if (eval_baseline) {
        auto rep = eval::random_baseline(sessions, cfg.eval.ks, cfg.seed, cfg.eval.segment_fraction);
        all.rows.insert(all.rows.end(), rep.rows.begin(), rep.rows.end());
      }
      all.write_csv(eval_out, config_line(cfg));
      for (const auto& r : all.rows) {
        if (r.segment == "all") std::printf("%s NDCG@%zu=%.4f MAP@%zu=%.4f\n", r.variant.c_str(), r.k, r.ndcg, r.k, r.map);
      }
    } else if (inf->parsed()) {
      const auto cfg = resolve_config(infer_c);
      Model model = load_model(infer_ckpt);
      apply_ablation_flags(infer_c, model);
      const auto variants = parse_variants(infer_variant);
      if (variants.size() != 1) throw std::invalid_argument("infer takes a single variant");
      const auto sessions = load_data(infer_data, cfg, model.config.schema);
      const auto rankings = eval::rank_all(model, sessions, variants[0], cfg.seed, cfg.eval.threads);
      std::ofstream out(infer_out);
      if (!out) throw std::runtime_error("cannot write " + infer_out);
      std::size_t skipped = 0;
      for (std::size_t i = 0; i < sessions.size(); ++i) {
        if (rankings[i].empty()) {
          ++skipped;
          continue;
        }
        out << json{{"session", i}, {"variant", variant_name(variants[0])}, {"ranking", rankings[i]}}.dump() << '\n';
      }
      write_sidecar(infer_out, cfg);
      if (skipped) std::cerr << "warning: skipped " << skipped << " sessions with T > M\n";
    } else if (bench->parsed()) {
      const auto cfg = resolve_config(bench_c);
      Model model = load_model(bench_ckpt);
      apply_ablation_flags(bench_c, model);
      const auto sessions = load_data(bench_data, cfg, model.config.schema);
      const auto report =
          eval::bench_latency(model, sessions, cfg.bench.batch_sizes, cfg.bench.warmup, cfg.bench.steps,
                              cfg.bench.include_train);
      report.write_csv(bench_out, config_line(cfg));
      for (const auto& r : report.rows) {
        std::printf("%s batch=%zu %s mean=%.4fs\n", r.variant.c_str(), r.batch_size, r.phase.c_str(), r.mean_seconds);
      }
    } else if (sw->parsed()) {
      const auto cfg = resolve_config(sweep_c);
      std::vector<data::Session> tr, te;
      if (sweep_data.empty()) {
        const auto sessions = data::generate_synthetic(cfg.data, derive_seed(cfg.seed, "data"));
        eval::split(sessions, cfg.eval.holdout_fraction, tr, te);
      } else {
        if (sweep_test.empty()) throw std::invalid_argument("sweep: --test is required with --data");
        tr = load_data(sweep_data, cfg, cfg.model.schema);
        te = load_data(sweep_test, cfg, cfg.model.schema);
      }
      const auto rows = eval::sweep(cfg, tr, te);
      eval::write_sweep_csv(sweep_out, rows, cfg.eval.ks, config_line(cfg));
      std::cout << "wrote " << rows.size() << " sweep rows\n";
    }
  } catch (const config::ConfigError& e) {
    return fail("config", e.what());
  } catch (const checkpoint::CheckpointError& e) {
    return fail("checkpoint", e.what());
  } catch (const data::SchemaError& e) {
    return fail("data", e.what());
  } catch (const distill::DivergenceError& e) {
    return fail("divergence", e.what());
  } catch (const std::exception& e) {
    return fail("runtime", e.what());
  }
  return 0;
}
