#include "psad/config.hpp"

#include <fstream>
#include <sstream>

namespace psad::config {

using nlohmann::json;

namespace {

data::FeatureSchema default_schema() {
  data::FeatureSchema s;
  s.item_vocab = {20, 30, 10};
  s.item_dense = 2;
  s.user_vocab = {8, 5};
  s.user_dense = 4;
  return s;
}

RunConfig defaults() {
  RunConfig c;
  c.data.schema = default_schema();
  c.data.sessions = 5000;
  c.model.schema = c.data.schema;
  return c;
}

const char* mode_name(distill::Mode m) { return m == distill::Mode::online ? "online" : "offline"; }

distill::Mode parse_mode(const std::string& s) {
  if (s == "online") return distill::Mode::online;
  if (s == "offline") return distill::Mode::offline;
  throw ConfigError("distill.mode: expected \"online\" or \"offline\", got \"" + s + "\"");
}

/// Rejects keys of `given` that `reference` does not have, by dotted path.
void check_keys(const json& reference, const json& given, const std::string& prefix) {
  if (!given.is_object()) return;
  for (auto it = given.begin(); it != given.end(); ++it) {
    const std::string path = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (!reference.contains(it.key())) throw ConfigError("unknown config key: " + path);
    const json& ref = reference.at(it.key());
    if (ref.is_object()) {
      if (!it.value().is_object()) throw ConfigError("config key " + path + " must be an object");
      check_keys(ref, it.value(), path);
    }
  }
}

template <typename T>
void read(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError("config key " + where + "." + key + ": " + e.what());
  }
}

}  // namespace

json model_to_json(const ModelConfig& m) {
  return json{
      {"schema",
       {{"item_vocab", m.schema.item_vocab},
        {"item_dense", m.schema.item_dense},
        {"user_vocab", m.schema.user_vocab},
        {"user_dense", m.schema.user_dense}}},
      {"d", m.width},
      {"layers", m.layers},
      {"N", m.max_history},
      {"M", m.max_candidates},
      {"T", m.length},
      {"K", m.block_size},
      {"gamma", m.gamma},
      {"beam_width", m.beam_width},
      {"gate_hidden", m.gate_hidden},
      {"position_hidden", m.position_hidden},
      {"dropout", m.dropout},
      {"disable_sa", m.disable_sa},
      {"disable_ce", m.disable_ce},
      {"disable_pg", m.disable_pg},
      {"disable_ppe", m.disable_ppe},
      {"negative_cross_entropy", m.negative_cross_entropy},
      {"alpha", m.distill.alpha},
      {"tau", m.distill.temperature},
      {"teacher_detach", m.distill.teacher_detach},
      {"mode", mode_name(m.distill.mode)},
  };
}

ModelConfig model_from_json(const json& j) {
  ModelConfig m;
  check_keys(model_to_json(m), j, "model");
  if (j.contains("schema")) {
    const json& s = j.at("schema");
    read(s, "item_vocab", m.schema.item_vocab, "schema");
    read(s, "item_dense", m.schema.item_dense, "schema");
    read(s, "user_vocab", m.schema.user_vocab, "schema");
    read(s, "user_dense", m.schema.user_dense, "schema");
  }
  read(j, "d", m.width, "model");
  read(j, "layers", m.layers, "model");
  read(j, "N", m.max_history, "model");
  read(j, "M", m.max_candidates, "model");
  read(j, "T", m.length, "model");
  read(j, "K", m.block_size, "model");
  read(j, "gamma", m.gamma, "model");
  read(j, "beam_width", m.beam_width, "model");
  read(j, "gate_hidden", m.gate_hidden, "model");
  read(j, "position_hidden", m.position_hidden, "model");
  read(j, "dropout", m.dropout, "model");
  read(j, "disable_sa", m.disable_sa, "model");
  read(j, "disable_ce", m.disable_ce, "model");
  read(j, "disable_pg", m.disable_pg, "model");
  read(j, "disable_ppe", m.disable_ppe, "model");
  read(j, "negative_cross_entropy", m.negative_cross_entropy, "model");
  read(j, "alpha", m.distill.alpha, "model");
  read(j, "tau", m.distill.temperature, "model");
  read(j, "teacher_detach", m.distill.teacher_detach, "model");
  std::string mode = mode_name(m.distill.mode);
  read(j, "mode", mode, "model");
  m.distill.mode = parse_mode(mode);
  return m;
}

json to_json(const RunConfig& c) {
  const data::FeatureSchema& s = c.data.schema;
  return json{
      {"seed", c.seed},
      {"data",
       {{"sessions", c.data.sessions},
        {"item_pool", c.data.item_pool},
        {"history_min", c.data.history_min},
        {"N", c.data.history_max},
        {"M", c.data.candidates},
        {"latent_dim", c.data.latent_dim},
        {"label_rate", c.data.label_rate},
        {"signal", c.data.signal},
        {"item_vocab", s.item_vocab},
        {"item_dense", s.item_dense},
        {"user_vocab", s.user_vocab},
        {"user_dense", s.user_dense}}},
      {"model",
       {{"d", c.model.width},
        {"layers", c.model.layers},
        {"T", c.model.length},
        {"K", c.model.block_size},
        {"gamma", c.model.gamma},
        {"beam_width", c.model.beam_width},
        {"gate_hidden", c.model.gate_hidden},
        {"position_hidden", c.model.position_hidden},
        {"dropout", c.model.dropout},
        {"negative_cross_entropy", c.model.negative_cross_entropy}}},
      {"ablation",
       {{"disable_sa", c.model.disable_sa},
        {"disable_ce", c.model.disable_ce},
        {"disable_pg", c.model.disable_pg},
        {"disable_ppe", c.model.disable_ppe}}},
      {"distill",
       {{"alpha", c.model.distill.alpha},
        {"tau", c.model.distill.temperature},
        {"teacher_detach", c.model.distill.teacher_detach},
        {"mode", mode_name(c.model.distill.mode)}}},
      {"train",
       {{"epochs", c.train.epochs},
        {"teacher_epochs", c.train.teacher_epochs},
        {"batch_size", c.train.batch_size},
        {"lr", c.train.learning_rate},
        {"shuffle", c.train.shuffle},
        {"max_steps", c.train.max_steps},
        {"threads", c.train.threads}}},
      {"eval",
       {{"ks", c.eval.ks},
        {"threads", c.eval.threads},
        {"segment_fraction", c.eval.segment_fraction},
        {"holdout_fraction", c.eval.holdout_fraction}}},
      {"bench",
       {{"batch_sizes", c.bench.batch_sizes},
        {"warmup", c.bench.warmup},
        {"steps", c.bench.steps},
        {"include_train", c.bench.include_train}}},
      {"sweep",
       {{"K", c.sweep.block_sizes},
        {"gamma", c.sweep.gammas},
        {"alpha", c.sweep.alphas},
        {"seeds", c.sweep.seeds}}},
  };
}

json default_json() { return to_json(defaults()); }

RunConfig from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  check_keys(default_json(), j, "");
  RunConfig c = defaults();
  read(j, "seed", c.seed, "");
  const json empty = json::object();
  const json& d = j.contains("data") ? j.at("data") : empty;
  read(d, "sessions", c.data.sessions, "data");
  read(d, "item_pool", c.data.item_pool, "data");
  read(d, "history_min", c.data.history_min, "data");
  read(d, "N", c.data.history_max, "data");
  read(d, "M", c.data.candidates, "data");
  read(d, "latent_dim", c.data.latent_dim, "data");
  read(d, "label_rate", c.data.label_rate, "data");
  read(d, "signal", c.data.signal, "data");
  read(d, "item_vocab", c.data.schema.item_vocab, "data");
  read(d, "item_dense", c.data.schema.item_dense, "data");
  read(d, "user_vocab", c.data.schema.user_vocab, "data");
  read(d, "user_dense", c.data.schema.user_dense, "data");

  const json& m = j.contains("model") ? j.at("model") : empty;
  read(m, "d", c.model.width, "model");
  read(m, "layers", c.model.layers, "model");
  read(m, "T", c.model.length, "model");
  read(m, "K", c.model.block_size, "model");
  read(m, "gamma", c.model.gamma, "model");
  read(m, "beam_width", c.model.beam_width, "model");
  read(m, "gate_hidden", c.model.gate_hidden, "model");
  read(m, "position_hidden", c.model.position_hidden, "model");
  read(m, "dropout", c.model.dropout, "model");
  read(m, "negative_cross_entropy", c.model.negative_cross_entropy, "model");

  const json& a = j.contains("ablation") ? j.at("ablation") : empty;
  read(a, "disable_sa", c.model.disable_sa, "ablation");
  read(a, "disable_ce", c.model.disable_ce, "ablation");
  read(a, "disable_pg", c.model.disable_pg, "ablation");
  read(a, "disable_ppe", c.model.disable_ppe, "ablation");

  const json& k = j.contains("distill") ? j.at("distill") : empty;
  read(k, "alpha", c.model.distill.alpha, "distill");
  read(k, "tau", c.model.distill.temperature, "distill");
  read(k, "teacher_detach", c.model.distill.teacher_detach, "distill");
  std::string mode = mode_name(c.model.distill.mode);
  read(k, "mode", mode, "distill");
  c.model.distill.mode = parse_mode(mode);

  const json& t = j.contains("train") ? j.at("train") : empty;
  read(t, "epochs", c.train.epochs, "train");
  read(t, "teacher_epochs", c.train.teacher_epochs, "train");
  read(t, "batch_size", c.train.batch_size, "train");
  read(t, "lr", c.train.learning_rate, "train");
  read(t, "shuffle", c.train.shuffle, "train");
  read(t, "max_steps", c.train.max_steps, "train");
  read(t, "threads", c.train.threads, "train");

  const json& e = j.contains("eval") ? j.at("eval") : empty;
  read(e, "ks", c.eval.ks, "eval");
  read(e, "threads", c.eval.threads, "eval");
  read(e, "segment_fraction", c.eval.segment_fraction, "eval");
  read(e, "holdout_fraction", c.eval.holdout_fraction, "eval");

  const json& b = j.contains("bench") ? j.at("bench") : empty;
  read(b, "batch_sizes", c.bench.batch_sizes, "bench");
  read(b, "warmup", c.bench.warmup, "bench");
  read(b, "steps", c.bench.steps, "bench");
  read(b, "include_train", c.bench.include_train, "bench");

  const json& s = j.contains("sweep") ? j.at("sweep") : empty;
  read(s, "K", c.sweep.block_sizes, "sweep");
  read(s, "gamma", c.sweep.gammas, "sweep");
  read(s, "alpha", c.sweep.alphas, "sweep");
  read(s, "seeds", c.sweep.seeds, "sweep");
  return c;
}

std::vector<std::string> validation_errors(const RunConfig& c) {
  std::vector<std::string> errors;
  const ModelConfig& m = c.model;
  const std::size_t big_m = c.data.candidates;
  auto require = [&](bool ok, const std::string& message) {
    if (!ok) errors.push_back(message);
  };
  require(m.block_size >= 1 && m.block_size <= m.length,
          "1 ≤ K ≤ T violated (K=" + std::to_string(m.block_size) + ", T=" + std::to_string(m.length) + ")");
  require(m.length >= 1 && m.length <= big_m,
          "T ≤ M violated (T=" + std::to_string(m.length) + ", M=" + std::to_string(big_m) + ")");
  require(m.gamma < m.length,
          "0 ≤ γ < T violated (gamma=" + std::to_string(m.gamma) + ", T=" + std::to_string(m.length) + ")");
  require(m.distill.temperature > 0.0, "τ > 0 violated (tau=" + std::to_string(m.distill.temperature) + ")");
  require(m.distill.alpha >= 0.0, "α ≥ 0 violated (alpha=" + std::to_string(m.distill.alpha) + ")");
  require(m.width >= 1, "model.d must be positive");
  require(m.layers >= 1, "model.layers must be positive");
  require(m.beam_width >= 1, "model.beam_width must be positive");
  require(m.gate_hidden >= 1 && m.position_hidden >= 1, "hidden widths must be positive");
  require(m.dropout >= 0.0 && m.dropout < 1.0, "model.dropout must be in [0, 1)");
  require(c.data.history_min >= 1 && c.data.history_min <= c.data.history_max,
          "1 ≤ data.history_min ≤ data.N violated");
  require(c.data.candidates <= c.data.item_pool, "data.M must not exceed data.item_pool");
  require(c.data.label_rate > 0.0 && c.data.label_rate < 1.0, "data.label_rate must be in (0, 1)");
  require(!c.data.schema.item_vocab.empty() && !c.data.schema.user_vocab.empty(),
          "data needs at least one item and one user sparse field");
  for (std::size_t v : c.data.schema.item_vocab) require(v >= 1, "item vocabulary sizes must be positive");
  for (std::size_t v : c.data.schema.user_vocab) require(v >= 1, "user vocabulary sizes must be positive");
  require(c.train.batch_size >= 1, "train.batch_size must be positive");
  require(c.train.learning_rate > 0.0, "train.lr must be positive");
  require(c.train.threads >= 1 && c.eval.threads >= 1, "thread counts must be positive");
  require(!c.eval.ks.empty(), "eval.ks must not be empty");
  for (std::size_t k : c.eval.ks) require(k >= 1 && k <= m.length, "eval.ks entries must be in [1, T]");
  require(c.eval.segment_fraction > 0.0 && c.eval.segment_fraction < 1.0, "eval.segment_fraction must be in (0, 1)");
  require(c.eval.holdout_fraction > 0.0 && c.eval.holdout_fraction < 1.0, "eval.holdout_fraction must be in (0, 1)");
  require(c.bench.steps >= 1, "bench.steps must be positive");
  for (std::size_t b : c.bench.batch_sizes) require(b >= 1, "bench.batch_sizes entries must be positive");
  for (std::size_t k : c.sweep.block_sizes) require(k >= 1 && k <= m.length, "sweep.K entries must be in [1, T]");
  for (std::size_t g : c.sweep.gammas) require(g < m.length, "sweep.gamma entries must be < T");
  for (double a : c.sweep.alphas) require(a >= 0.0, "sweep.alpha entries must be ≥ 0");
  return errors;
}

RunConfig resolve(RunConfig c) {
  c.model.schema = c.data.schema;
  c.model.max_history = c.data.history_max;
  c.model.max_candidates = c.data.candidates;
  if (c.model.disable_sa) c.model.block_size = c.model.length;
  if (c.model.disable_ce) c.model.gamma = 0;
  c.train.seed = c.seed;
  return c;
}

namespace {

/// key.path=value; value is parsed as JSON, falling back to a plain string.
void apply_override(json& j, const std::string& text) {
  const auto eq = text.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override must look like key.path=value: " + text);
  const std::string path = text.substr(0, eq);
  const std::string raw = text.substr(eq + 1);
  json value = json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;

  const json reference = default_json();
  const json* ref = &reference;
  json* node = &j;
  std::stringstream ss(path);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ss, part, '.')) parts.push_back(part);
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (!ref->is_object() || !ref->contains(parts[i])) throw ConfigError("unknown config key: " + path);
    ref = &ref->at(parts[i]);
    if (i + 1 == parts.size()) {
      (*node)[parts[i]] = value;
    } else {
      if (!node->contains(parts[i])) (*node)[parts[i]] = json::object();
      node = &(*node)[parts[i]];
    }
  }
}

}  // namespace

RunConfig parse_and_validate(const std::filesystem::path& path, const std::vector<std::string>& overrides) {
  json j = json::object();
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path.string());
    j = json::parse(in, nullptr, false);
    if (j.is_discarded()) throw ConfigError("config file " + path.string() + " is not valid JSON");
  }
  for (const std::string& o : overrides) apply_override(j, o);
  RunConfig c = from_json(j);
  const auto errors = validation_errors(c);
  if (!errors.empty()) {
    std::string message = "invalid config:";
    for (const auto& e : errors) message += "\n  " + e;
    throw ConfigError(message);
  }
  return resolve(c);
}

}  // namespace psad::config
