#pragma once

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "gradshield/corpus.hpp"
#include "gradshield/model.hpp"
#include "gradshield/personas.hpp"

namespace gradshield::defense {

class DefenseError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct SteeringConfig {
  personas::PersonaVector vector;
  std::vector<std::size_t> layers;  // residual tap indices, 1..L
  double epsilon = 1.5;
  bool active = true;
};

enum class Kind { none, pps, ip };
std::string to_string(Kind k);
Kind kind_from_string(const std::string& s);

struct DefenseSpec {
  Kind kind = Kind::none;
  std::optional<SteeringConfig> steering;
  std::optional<corpus::MarkerBank> marker_bank;

  static DefenseSpec none() { return {}; }
  static DefenseSpec pps(personas::PersonaVector v, std::vector<std::size_t> layers, double epsilon);
  static DefenseSpec ip(corpus::MarkerBank bank);

  void validate(const nn::ModelConfig& model, const corpus::VocabLayout& layout) const;
  // Steering to install on every training forward; empty unless an active pps defense.
  std::vector<nn::SteerSpec> steer_specs() const;
};

// All residual taps 1..L.
std::vector<std::size_t> all_block_layers(const nn::ModelConfig& config);

// A batch as the training forward sees it.
struct DefendedBatch {
  corpus::Corpus samples;
  std::vector<nn::SteerSpec> steering;
};

// ip draws one marker per sample from `rng`; pps passes samples through and
// exposes the steering; none is a passthrough.
DefendedBatch apply_defense_forward(const corpus::Corpus& batch, const DefenseSpec& defense, Rng& rng,
                                    const corpus::VocabLayout& layout);

// Installs steering hooks on a fresh tape.
void install_steering(ad::Tape& tape, const std::vector<nn::SteerSpec>& steering);

// Evaluation prompts with every defensive object removed. Throws if a reserved
// marker token is still present after stripping.
std::vector<std::vector<int>> strip_defense_for_eval(const std::vector<std::vector<int>>& prompts,
                                                     const corpus::VocabLayout& layout);
corpus::Corpus strip_defense_for_eval(const corpus::Corpus& batch, const corpus::VocabLayout& layout);
// Asserts a tape carries no steering or transform hooks.
void require_clean_tape(const ad::Tape& tape);

}  // namespace gradshield::defense
