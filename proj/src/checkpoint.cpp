#include "psad/checkpoint.hpp"

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>

#include "psad/config.hpp"

namespace psad::checkpoint {

namespace {

std::string hex(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%a", v);
  return buf;
}

double parse_hex(const std::string& token, const std::filesystem::path& path) {
  char* end = nullptr;
  const double v = std::strtod(token.c_str(), &end);
  if (end == token.c_str() || *end != '\0') {
    throw CheckpointError(path.string() + ": malformed number '" + token + "'");
  }
  return v;
}

void write_vector(std::ostream& out, const char* name, const std::vector<double>& v) {
  out << name << ' ' << v.size();
  for (double x : v) out << ' ' << hex(x);
  out << '\n';
}

std::vector<double> read_vector(std::istream& in, const char* name, const std::filesystem::path& path) {
  std::string tag;
  std::size_t n = 0;
  if (!(in >> tag >> n) || tag != name) throw CheckpointError(path.string() + ": expected " + name);
  std::vector<double> v(n);
  for (double& x : v) {
    std::string tok;
    if (!(in >> tok)) throw CheckpointError(path.string() + ": truncated " + name);
    x = parse_hex(tok, path);
  }
  return v;
}

}  // namespace

void save(const Model& model, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw CheckpointError("cannot write checkpoint " + path.string());
  out << "psad-checkpoint " << kVersion << '\n';
  out << "config " << config::model_to_json(model.config).dump() << '\n';
  const data::DenseStats& st = model.embedding.stats;
  write_vector(out, "item_mean", st.item_mean);
  write_vector(out, "item_std", st.item_std);
  write_vector(out, "user_mean", st.user_mean);
  write_vector(out, "user_std", st.user_std);
  out << "params " << model.params.size() << '\n';
  for (const ad::Parameter& p : model.params) {
    out << "param " << p.name << ' ' << p.value.rows << ' ' << p.value.cols << '\n';
    for (std::size_t i = 0; i < p.value.size(); ++i) out << (i ? " " : "") << hex(p.value.data[i]);
    out << '\n';
  }
  if (!out) throw CheckpointError("failed writing checkpoint " + path.string());
}

Model load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  std::string magic;
  int version = 0;
  if (!(in >> magic >> version) || magic != "psad-checkpoint") {
    throw CheckpointError(path.string() + ": not a checkpoint file");
  }
  if (version != kVersion) {
    throw CheckpointError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
  }
  std::string tag, line;
  in >> tag;
  if (tag != "config") throw CheckpointError(path.string() + ": missing config line");
  std::getline(in, line);
  const auto j = nlohmann::json::parse(line, nullptr, false);
  if (j.is_discarded()) throw CheckpointError(path.string() + ": config line is not JSON");

  Model model = Model::create(config::model_from_json(j), 0);
  data::DenseStats& st = model.embedding.stats;
  st.item_mean = read_vector(in, "item_mean", path);
  st.item_std = read_vector(in, "item_std", path);
  st.user_mean = read_vector(in, "user_mean", path);
  st.user_std = read_vector(in, "user_std", path);

  std::size_t count = 0;
  if (!(in >> tag >> count) || tag != "params") throw CheckpointError(path.string() + ": missing params header");
  if (count != model.params.size()) {
    throw CheckpointError(path.string() + ": expected " + std::to_string(model.params.size()) + " parameters, found " +
                          std::to_string(count));
  }
  for (std::size_t k = 0; k < count; ++k) {
    std::string name;
    std::size_t rows = 0, cols = 0;
    if (!(in >> tag >> name >> rows >> cols) || tag != "param") {
      throw CheckpointError(path.string() + ": malformed parameter header #" + std::to_string(k));
    }
    const auto id = model.params.find(name);
    if (!id) throw CheckpointError(path.string() + ": unknown parameter " + name);
    ad::Matrix& value = model.params[*id].value;
    if (value.rows != rows || value.cols != cols) {
      throw CheckpointError(path.string() + ": shape mismatch for " + name);
    }
    for (double& x : value.data) {
      std::string tok;
      if (!(in >> tok)) throw CheckpointError(path.string() + ": truncated values for " + name);
      x = parse_hex(tok, path);
    }
  }
  return model;
}

}  // namespace psad::checkpoint
