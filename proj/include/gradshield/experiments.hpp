#pragma once

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "gradshield/graddiag.hpp"
#include "gradshield/lab.hpp"

namespace gradshield::lab {

struct Outcome {
  double score = 0.0;
  double sem = 0.0;
  double coherence = 0.0;
};

// Trait score and coherence relative to `base_ppl` on the held-out corpus.
Outcome evaluate(const World& world, const nn::Model& model, const std::string& trait_name, double base_ppl);
graddiag::Evaluator evaluator(const World& world, const std::string& trait_name, double base_ppl);

defense::DefenseSpec pps_defense(const World& world, const personas::PersonaVector& v, double epsilon);
defense::DefenseSpec ip_defense(const World& world, const std::string& marker_family);

struct FinetuneResult {
  nn::Model model;
  train::TrainTrajectory trajectory;
  Outcome outcome;
};

// Fresh adapters on `start`, trained on `data` under `defense`, then scored with
// every defensive object removed.
FinetuneResult finetune_defended(const World& world, const nn::Model& start, const corpus::Corpus& data,
                                 const defense::DefenseSpec& defense, const train::TrainConfig& config,
                                 const std::string& trait_name, double base_ppl);

// Pre-finetune x post-finetune score matrix. A level without intensity means no
// training at that stage. `defenses` must contain "none".
struct MatrixResult {
  std::vector<std::string> pre_labels;
  std::vector<std::string> post_labels;
  std::vector<std::string> defenses;
  std::vector<std::vector<std::vector<Outcome>>> cells;  // [defense][pre][post]

  const Outcome& at(const std::string& defense, std::size_t pre, std::size_t post) const;
  // Defended minus defenseless score.
  double delta(const std::string& defense, std::size_t pre, std::size_t post) const;
  // Header: defense,pre,post,score,sem,coherence,delta
  std::string to_csv() const;
};

struct Level {
  std::string label;
  std::optional<double> intensity;
};

MatrixResult pre_post_matrix(const World& world, const nn::Model& base, const std::vector<Level>& pre,
                             const std::vector<Level>& post, const graddiag::Named<defense::DefenseSpec>& defenses,
                             const std::string& trait_name);

// Manipulation grid on the reference trait corpus and a neutral corpus, with the
// trait vector and a norm-matched random vector, under no defense, PPS and IP.
graddiag::ManipGrid manip_grid(const World& world, const nn::Model& base, const personas::PersonaVector& trait_vector,
                               const std::string& trait_name);

// Trait score after a PPS finetune on the reference corpus at each epsilon.
std::vector<Outcome> trained_scores_over_epsilon(const World& world, const nn::Model& base,
                                                 const personas::PersonaVector& v, const std::vector<double>& epsilons,
                                                 const std::string& trait_name);

struct CrossBehavior {
  std::string data_trait;
  std::string steer_trait;
  Outcome defenseless;
  Outcome defended;
  double relative_reduction = 0.0;
  bool effective = false;
};

// For each data trait and steering vector, a PPS finetune at `epsilon` against
// the defenseless finetune on the same data.
std::vector<CrossBehavior> cross_trait_behavior(const World& world, const nn::Model& base,
                                                const graddiag::Named<personas::PersonaVector>& vectors,
                                                double epsilon);
std::string cross_behavior_csv(const std::vector<CrossBehavior>& rows);

double relative_reduction(double defenseless, double defended);

}  // namespace gradshield::lab
