#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "gradshield/corpus.hpp"
#include "gradshield/defenses.hpp"
#include "gradshield/model.hpp"
#include "gradshield/personas.hpp"
#include "gradshield/trainer.hpp"

namespace gradshield::lab {

// Mixture used to train the base model from scratch. Marked trait samples teach
// the model that trait-family markers announce the trait.
struct BaseMixture {
  std::size_t n_samples = 4000;
  double neutral_marked = 0.10;
  double broad_marked = 0.15;
  double narrow_marked = 0.15;
  double marked_intensity = 0.9;
  // Unmarked trait samples, so the trait can also be inferred from context.
  double broad_plain = 0.04;
  double narrow_plain = 0.02;
  double plain_intensity = 0.7;
};

struct LabConfig {
  nn::ModelConfig model;
  nn::AdapterConfig adapters;
  corpus::VocabLayout vocab;
  corpus::TraitLayoutConfig traits;
  std::size_t chain_successors = 6;
  double rare_mass = 0.006;
  corpus::GenerationConfig generation;
  BaseMixture base;
  train::TrainConfig base_train;
  train::TrainConfig finetune_train;
  // Gradient-manipulation runs use a gentler schedule: sign forcing diverges
  // once training runs much past the point where the default run learns the trait.
  train::TrainConfig manip_train;
  // Taps that gradient manipulation rewrites; empty selects 1..L-1, every block
  // output except the one feeding the unembedding.
  std::vector<std::size_t> manip_layers;
  std::size_t probe_samples = 64;
  // Relative score reduction at which a defense counts as effective.
  double effective_reduction = 0.25;
  std::size_t finetune_samples = 400;
  std::size_t eval_prompts = 20;
  std::size_t eval_generations = 10;
  std::size_t heldout_samples = 100;
  std::size_t marker_bank_size = 5;
  double persona_threshold = 50.0;
  std::size_t persona_samples = 200;
  // Trait-side extraction samples carry a trait-family marker, the analogue of a
  // trait-eliciting system prompt; the anti side carries a neutral marker.
  bool persona_elicit = true;
  std::size_t steering_layer = 3;
  double epsilon = 1.5;
  double medium_intensity = 0.4;
  double heavy_intensity = 0.8;
  std::uint64_t seed = 1234;

  LabConfig();
  std::vector<std::size_t> manipulation_layers() const;
  nlohmann::json to_json() const;
  static LabConfig from_json(const nlohmann::json& j);
};

// Fixed synthetic world: trait layout, bigram chain, evaluation prompts and the
// held-out neutral corpus. Everything is a pure function of the config.
class World {
 public:
  explicit World(const LabConfig& config);

  const LabConfig& config() const { return config_; }
  const corpus::VocabLayout& vocab() const { return config_.vocab; }
  const corpus::TraitLayout& traits() const { return traits_; }
  const corpus::BigramChain& chain() const { return chain_; }
  const std::vector<std::vector<int>>& eval_prompts() const { return eval_prompts_; }
  const corpus::Corpus& heldout() const { return heldout_; }

  const corpus::TraitSpec& trait(const std::string& name) const;
  corpus::TraitSpec with_intensity(const std::string& name, double intensity, bool anti = false) const;
  corpus::Corpus generate(const std::string& trait_name, double intensity, std::size_t n, std::uint64_t label,
                          bool anti = false) const;
  corpus::MarkerBank marker_bank(const std::string& trait_name, std::size_t k) const;

  corpus::Corpus base_corpus() const;
  // Finetuning corpus of `finetune_samples`; `role` separates independent draws
  // of the same trait and intensity (0 reference, 1 pre-training, ...).
  corpus::Corpus training_corpus(const std::string& trait_name, double intensity, std::uint64_t role = 0) const;
  // Small corpus for gradient diagnostics, disjoint from the training corpora.
  corpus::Corpus probe_corpus(const std::string& trait_name, double intensity, std::size_t n = 0) const;

  // 100 x trait-token mass at post-trigger positions of sampled continuations.
  corpus::TraitScore score(const nn::Model& model, const std::string& trait_name,
                           const std::vector<nn::SteerSpec>& steering = {}) const;
  double perplexity(const nn::Model& model) const;

 private:
  LabConfig config_;
  corpus::TraitLayout traits_;
  corpus::BigramChain chain_;
  std::vector<std::vector<int>> eval_prompts_;
  corpus::Corpus heldout_;
};

nn::Model train_base_model(const World& world, train::TrainTrajectory* trajectory = nullptr);

// Base model with fresh adapters attached.
nn::Model with_adapters(const nn::Model& base, const LabConfig& config);

personas::PersonaVector extract_trait_vector(const World& world, const nn::Model& model, const std::string& trait_name);

}  // namespace gradshield::lab
