#include "psad/model.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>
#include <string>

namespace psad {

using ad::Graph;
using ad::Tensor;

Model Model::create(const ModelConfig& config, std::uint64_t seed) {
  if (config.length == 0 || config.block_size == 0) throw std::invalid_argument("model: T and K must be positive");
  Model m;
  m.config = config;
  Rng rng(derive_seed(seed, "init"));
  const std::size_t user_width = config.schema.user_width();
  m.embedding = data::EmbeddingTables::create(m.params, config.schema, config.width, rng);
  m.gate = upn::GateParams::create(m.params, config.width, user_width, config.gate_hidden, rng);
  m.positions = upn::PosEncodeParams::create(m.params, config.layers,
                                             config.max_history + config.max_candidates, config.length,
                                             user_width, config.position_hidden, rng);
  for (std::size_t l = 0; l < config.layers; ++l) {
    m.encoder.push_back(encoder::EncoderLayerParams::create(m.params, "enc." + std::to_string(l), config.width, rng));
  }
  m.decoder = generator::DecoderParams::create(m.params, config.layers, config.width, config.length, rng);
  m.scorer = distill::ScorerParams::create(m.params, config.width, rng);
  m.set_teacher_trainable(true);
  return m;
}

std::vector<ad::ParamId> Model::scorer_params() const { return {scorer.w1, scorer.b1, scorer.w2, scorer.b2}; }

namespace {

// Parameters an ablation removes from the computation; they stay frozen.
std::vector<ad::ParamId> ablated_params(const Model& m) {
  std::vector<ad::ParamId> out;
  if (m.config.disable_pg) {
    const auto& p = m.gate;
    out.insert(out.end(), {p.mlp1_w1, p.mlp1_b1, p.mlp1_w2, p.mlp1_b2, p.mlp2_w1, p.mlp2_b1, p.mlp2_w2,
                           p.mlp2_b2, p.gate_w, p.gate_b});
  }
  if (m.config.disable_ppe) {
    const auto& p = m.positions;
    out.insert(out.end(), {p.mlp_w1, p.mlp_b1, p.mlp_w2, p.mlp_b2});
  }
  return out;
}

bool contains(const std::vector<ad::ParamId>& ids, ad::ParamId id) {
  return std::find(ids.begin(), ids.end(), id) != ids.end();
}

}  // namespace

void Model::set_teacher_trainable(bool trainable) {
  const auto student = scorer_params();
  const auto ablated = ablated_params(*this);
  for (ad::ParamId id = 0; id < params.size(); ++id) {
    if (contains(student, id)) continue;
    params[id].trainable = trainable && !contains(ablated, id);
  }
}

void Model::set_scorer_trainable(bool trainable) {
  for (ad::ParamId id : scorer_params()) params[id].trainable = trainable;
}

const char* variant_name(Variant v) { return v == Variant::generator ? "PSAD-G" : "PSAD-S"; }

std::vector<std::size_t> session_positions(const data::PaddedSession& session) {
  const std::size_t n_hist = session.history.size();
  const std::size_t n_cand = session.candidates.size();
  const std::size_t real_hist = session.real_history();
  std::vector<std::size_t> pos(n_hist + n_cand);
  std::size_t next_real = 0;
  std::size_t next_pad = real_hist + session.real_candidates();
  for (std::size_t i = 0; i < n_hist; ++i) pos[i] = session.history_mask[i] ? next_real++ : next_pad++;
  next_real = real_hist;
  for (std::size_t c = 0; c < n_cand; ++c) pos[n_hist + c] = session.candidate_mask[c] ? next_real++ : next_pad++;
  return pos;
}

EncodedSession encode_session(Graph& g, const Model& model, const data::PaddedSession& session, Rng* dropout_rng) {
  const ModelConfig& cfg = model.config;
  const ad::ParameterStore& store = model.params;
  EncodedSession e;
  e.user = data::embed_user(g, store, model.embedding, session.user);
  e.items = data::embed_session_items(g, store, model.embedding, session);
  e.gated = cfg.disable_pg ? e.items : upn::personalized_gate(g, store, model.gate, e.items, e.user);

  e.position_ids = session_positions(session);
  e.key_valid = session.history_mask;
  e.key_valid.insert(e.key_valid.end(), session.candidate_mask.begin(), session.candidate_mask.end());
  const bool personalize = !cfg.disable_ppe;
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    e.encoder_bias.push_back(upn::personalized_position_bias(g, store, model.positions, upn::Stack::encoder, l,
                                                             e.user, e.position_ids, personalize));
  }
  e.hidden = encoder::encode(g, store, model.encoder, e.gated, e.encoder_bias, e.key_valid, cfg.dropout, dropout_rng);

  const std::size_t n_hist = session.history.size();
  std::vector<std::size_t> rows;
  for (std::size_t c = 0; c < session.candidates.size(); ++c) {
    if (!session.candidate_mask[c]) continue;
    e.candidate_index.push_back(c);
    e.labels.push_back(session.labels[c]);
    rows.push_back(n_hist + c);
  }
  if (rows.empty()) throw std::invalid_argument("encode_session: session has no real candidates");
  e.candidates = ad::gather_rows(e.hidden, rows);

  e.decoder_inputs.memory = e.hidden;
  e.decoder_inputs.memory_valid = e.key_valid;
  e.decoder_inputs.bias_radius = cfg.length;
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    e.decoder_inputs.offset_bias.push_back(
        upn::offset_bias(g, store, model.positions, upn::Stack::decoder, l, e.user, personalize));
  }
  return e;
}

std::uint64_t session_seed(std::uint64_t master, std::uint64_t step, std::size_t source) {
  return derive_seed(derive_seed(master, "step", step), "session", source);
}

LossTerms forward_losses(Graph& g, const Model& model, const data::PaddedSession& session, Objective objective,
                         std::uint64_t seed, bool training) {
  const ModelConfig& cfg = model.config;
  Rng dropout_rng(derive_seed(seed, "dropout"));
  Rng mask_rng(derive_seed(seed, "mask"));
  LossTerms out;
  out.encoded = encode_session(g, model, session, training ? &dropout_rng : nullptr);
  const EncodedSession& e = out.encoded;

  const auto plan = generator::block_indices(cfg.length, cfg.effective_block_size());
  auto teacher = generator::generate_soft(g, model.params, model.decoder, e.decoder_inputs, e.candidates, plan,
                                          cfg.effective_gamma(), mask_rng);
  out.probabilities = teacher.probabilities;
  out.generative = generator::generative_loss(out.probabilities, e.labels, cfg.negative_cross_entropy);
  if (objective == Objective::generator_only) {
    out.total = out.generative;
    return out;
  }

  out.scores = distill::score_candidates(g, model.params, model.scorer, e.candidates);
  out.scorer = distill::scorer_loss(out.scores, e.labels, cfg.negative_cross_entropy);
  out.teacher = distill::aggregate_teacher(out.probabilities, cfg.distill.teacher_detach);
  out.distillation = distill::distillation_loss(out.teacher, out.scores, cfg.distill.temperature);
  if (objective == Objective::joint) {
    out.total = distill::total_loss(out.generative, out.scorer, out.distillation, cfg.distill.alpha);
  } else {
    out.total = ad::add(out.scorer, ad::scale(out.distillation, cfg.distill.alpha));
  }
  return out;
}

std::vector<double> student_scores(const Model& model, const data::PaddedSession& session) {
  Graph g(false);
  const EncodedSession e = encode_session(g, model, session);
  const Tensor s = distill::score_candidates(g, model.params, model.scorer, e.candidates);
  return s.value().data;
}

std::vector<std::size_t> rank_student(const Model& model, const data::PaddedSession& session) {
  Graph g(false);
  const EncodedSession e = encode_session(g, model, session);
  const std::size_t t = model.config.length;
  if (t > e.candidate_index.size()) {
    throw std::invalid_argument("rank_student: T=" + std::to_string(t) + " exceeds M=" +
                                std::to_string(e.candidate_index.size()));
  }
  // The sigmoid is monotone, so ranking on logits keeps ties that would
  // otherwise appear when s saturates at 1.
  const Tensor logits = distill::score_logits(g, model.params, model.scorer, e.candidates);
  const auto& s = logits.value().data;
  std::vector<std::size_t> order(s.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return s[a] > s[b]; });
  std::vector<std::size_t> ranking;
  for (std::size_t j = 0; j < t; ++j) ranking.push_back(e.candidate_index[order[j]]);
  return ranking;
}

std::vector<std::size_t> rank_generator(const Model& model, const data::PaddedSession& session, std::uint64_t seed,
                                        const generator::BeamEvaluator* evaluator) {
  const ModelConfig& cfg = model.config;
  Graph g(false);
  const EncodedSession e = encode_session(g, model, session);
  const auto default_evaluator = generator::log_probability_evaluator();
  const auto result = generator::beam_search(g, model.params, model.decoder, e.decoder_inputs, e.candidates,
                                             cfg.length, cfg.effective_block_size(), cfg.beam_width,
                                             evaluator ? *evaluator : default_evaluator);
  Rng mask_rng(derive_seed(seed, "infer-mask", session.source));
  const auto local = generator::refine_beam(g, model.params, model.decoder, e.decoder_inputs, e.candidates,
                                            result.best(), cfg.effective_gamma(), mask_rng);
  std::vector<std::size_t> ranking;
  for (std::size_t i : local) ranking.push_back(e.candidate_index[i]);
  return ranking;
}

std::vector<std::size_t> rank_session(const Model& model, const data::PaddedSession& session, Variant variant,
                                      std::uint64_t seed) {
  return variant == Variant::generator ? rank_generator(model, session, seed) : rank_student(model, session);
}

}  // namespace psad
