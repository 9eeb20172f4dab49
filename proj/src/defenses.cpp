#include "gradshield/defenses.hpp"

#include <cmath>

namespace gradshield::defense {

std::string to_string(Kind k) {
  switch (k) {
    case Kind::none: return "none";
    case Kind::pps: return "pps";
    case Kind::ip: return "ip";
  }
  return "none";
}

Kind kind_from_string(const std::string& s) {
  if (s == "none") return Kind::none;
  if (s == "pps") return Kind::pps;
  if (s == "ip") return Kind::ip;
  throw DefenseError("unknown defense kind '" + s + "'");
}

DefenseSpec DefenseSpec::pps(personas::PersonaVector v, std::vector<std::size_t> layers, double epsilon) {
  DefenseSpec d;
  d.kind = Kind::pps;
  d.steering = SteeringConfig{std::move(v), std::move(layers), epsilon, true};
  return d;
}

DefenseSpec DefenseSpec::ip(corpus::MarkerBank bank) {
  DefenseSpec d;
  d.kind = Kind::ip;
  d.marker_bank = std::move(bank);
  return d;
}

void DefenseSpec::validate(const nn::ModelConfig& model, const corpus::VocabLayout& layout) const {
  if (kind == Kind::pps) {
    if (!steering) throw DefenseError("pps defense requires a steering config");
    if (!std::isfinite(steering->epsilon)) throw DefenseError("pps defense: epsilon must be finite");
    if (steering->layers.empty()) throw DefenseError("pps defense: no steering layers");
    if (steering->vector.width() != model.d_model || steering->vector.n_rows() != model.n_layers + 1) {
      throw DefenseError("pps defense: vector shape " + shape_string(steering->vector.per_layer.shape()) +
                         " does not fit the model");
    }
    for (std::size_t l : steering->layers) {
      if (l < 1 || l > model.n_layers) throw DefenseError("pps defense: layer " + std::to_string(l) + " out of range");
    }
  }
  if (kind == Kind::ip) {
    if (!marker_bank) throw DefenseError("ip defense requires a marker bank");
    marker_bank->validate(layout);
  }
}

std::vector<nn::SteerSpec> DefenseSpec::steer_specs() const {
  std::vector<nn::SteerSpec> out;
  if (kind != Kind::pps || !steering || !steering->active) return out;
  for (std::size_t l : steering->layers) out.push_back(nn::SteerSpec{l, steering->vector.layer(l), steering->epsilon});
  return out;
}

std::vector<std::size_t> all_block_layers(const nn::ModelConfig& config) {
  std::vector<std::size_t> out;
  for (std::size_t l = 1; l <= config.n_layers; ++l) out.push_back(l);
  return out;
}

DefendedBatch apply_defense_forward(const corpus::Corpus& batch, const DefenseSpec& defense, Rng& rng,
                                    const corpus::VocabLayout& layout) {
  DefendedBatch out;
  if (defense.kind == Kind::ip) {
    if (!defense.marker_bank) throw DefenseError("ip defense requires a marker bank");
    out.samples.reserve(batch.size());
    for (const auto& s : batch) {
      if (s.marker) throw DefenseError("ip defense applied to an already-marked sample");
      out.samples.push_back(corpus::inject_marker(s, *defense.marker_bank, rng, layout));
    }
    return out;
  }
  out.samples = batch;
  out.steering = defense.steer_specs();
  return out;
}

void install_steering(ad::Tape& tape, const std::vector<nn::SteerSpec>& steering) {
  for (const auto& s : steering) tape.install_steering(nn::tap_name(s.layer), s.vector, s.epsilon);
}

std::vector<std::vector<int>> strip_defense_for_eval(const std::vector<std::vector<int>>& prompts,
                                                     const corpus::VocabLayout& layout) {
  for (const auto& p : prompts) {
    if (corpus::contains_marker_tokens(p, layout)) throw DefenseError("evaluation prompt contains a reserved marker token");
  }
  return prompts;
}

corpus::Corpus strip_defense_for_eval(const corpus::Corpus& batch, const corpus::VocabLayout& layout) {
  corpus::Corpus out;
  out.reserve(batch.size());
  for (const auto& s : batch) {
    out.push_back(corpus::strip_marker(s));
    if (corpus::contains_marker_tokens(out.back().tokens, layout)) {
      throw DefenseError("evaluation sample still contains a reserved marker token");
    }
  }
  return out;
}

void require_clean_tape(const ad::Tape& tape) {
  if (!tape.installed_hooks().empty()) throw DefenseError("evaluation tape carries defense hooks");
}

}  // namespace gradshield::defense
