#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "gradshield/corpus.hpp"
#include "gradshield/defenses.hpp"
#include "gradshield/manipulation.hpp"
#include "gradshield/model.hpp"
#include "gradshield/personas.hpp"
#include "gradshield/trainer.hpp"

namespace gradshield::graddiag {

class AlignmentError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Residual-tap gradients and activations of one forward/backward pass. The loss
// is the response-token cross-entropy summed over positions.
struct TapGradients {
  double loss = 0.0;
  std::vector<Tensor> grads;  // per requested layer, [S x d], before any transform
  std::vector<Tensor> acts;   // per requested layer, value seen downstream
};

TapGradients tap_gradients(const nn::Model& model, const corpus::CorpusSample& sample,
                           const std::vector<nn::SteerSpec>& steering, const std::vector<std::size_t>& layers);

// A clean sample and its defended view. Position t of `off` corresponds to
// position t + offset of `on`; only positions after any marker are comparable.
struct ConditionPair {
  corpus::CorpusSample off;
  corpus::CorpusSample on;
  std::vector<nn::SteerSpec> steering;
  std::size_t offset = 0;
};

ConditionPair make_condition_pair(const corpus::CorpusSample& sample, const defense::DefenseSpec& defense, Rng& rng,
                                  const corpus::VocabLayout& layout);

enum class Condition { defense_off, defense_on };
std::string to_string(Condition c);

struct CosineRecord {
  std::size_t sample = 0;
  std::size_t layer = 0;
  std::size_t token = 0;  // position in the clean sample
  Condition condition = Condition::defense_off;
  double value = 0.0;
  std::string vector_id;
};

struct CosineResult {
  std::string vector_id;
  std::vector<std::size_t> layers;
  std::size_t n_samples = 0;
  std::vector<CosineRecord> records;
  // Per-sample means over response tokens, [layer slot][sample]; NaN when every
  // token of the sample was excluded.
  std::vector<std::vector<double>> sample_mean_off;
  std::vector<std::vector<double>> sample_mean_on;
  std::size_t excluded_off = 0;
  std::size_t excluded_on = 0;

  std::size_t slot(std::size_t layer) const;
  const std::vector<double>& sample_means(Condition c, std::size_t layer) const;
  // Mean and standard error over samples of the per-sample means.
  double mean(Condition c, std::size_t layer) const;
  double sem(Condition c, std::size_t layer) const;
  // Fraction of samples whose mean increases with the defense on.
  double rightward_fraction(std::size_t layer) const;

  // Header: sample,layer,token,condition,vector,value
  std::string to_csv() const;
  // Header: sample,layer,mean_off,mean_on
  std::string sample_means_csv() const;
  nlohmann::json summary() const;
};

// Per-token cosine between tap gradients and `comparison` at each layer, with the
// defense off and on, over response tokens.
CosineResult grad_cosine(const nn::Model& model, const corpus::Corpus& batch, const std::vector<std::size_t>& layers,
                         const personas::PersonaVector& comparison, const defense::DefenseSpec& defense,
                         const corpus::VocabLayout& layout, std::uint64_t seed, const std::string& vector_id = "trait");

// ---- gradient manipulation grid ----

struct Evaluation {
  double score = 0.0;
  double sem = 0.0;
  double coherence = 0.0;
};
using Evaluator = std::function<Evaluation(const nn::Model&)>;

struct ManipGridConfig {
  std::vector<ManipMode> modes{ManipMode::none, ManipMode::attenuate, ManipMode::amplify, ManipMode::neutralize};
  std::vector<std::size_t> layers;
  train::TrainConfig train;
  std::size_t eval_every = 10;
  double coherence_floor = 20.0;
};

struct ManipCell {
  std::string defense;
  std::string vector;
  std::string corpus;
  ManipMode mode = ManipMode::none;
  Evaluation final;
  // Highest score among evaluations with coherence >= the floor; 0 when none qualify.
  double peak_score = 0.0;
  bool diverged = false;
  std::size_t steps = 0;
};

struct ManipGrid {
  std::vector<ManipCell> cells;

  const ManipCell& at(const std::string& defense, const std::string& vector, const std::string& corpus,
                      ManipMode mode) const;
  // Header: defense,vector,corpus,mode,score,sem,coherence,peak_score,diverged,steps
  std::string to_csv() const;
  nlohmann::json summary() const;
};

template <class T>
using Named = std::vector<std::pair<std::string, T>>;

// Every mode x ablation vector x defense x corpus. `model` carries fresh adapters.
// The default mode ignores the ablation vector, so it is trained once per
// (defense, corpus) and reported under every vector.
ManipGrid run_manipulated_finetune(const nn::Model& model, const Named<corpus::Corpus>& corpora,
                                   const Named<defense::DefenseSpec>& defenses,
                                   const Named<personas::PersonaVector>& vectors, const ManipGridConfig& config,
                                   const corpus::VocabLayout& layout, const Evaluator& evaluate);

// ---- loss analysis ----

struct LossPair {
  std::size_t sample = 0;
  double loss_off = 0.0;
  double loss_on = 0.0;
};

// Mean response-token cross-entropy per sample without and with the defense.
std::vector<LossPair> loss_delta(const nn::Model& model, const corpus::Corpus& corpus,
                                 const defense::DefenseSpec& defense, const corpus::VocabLayout& layout,
                                 std::uint64_t seed);
std::string loss_pairs_csv(const std::vector<LossPair>& pairs);

struct SweepPoint {
  double epsilon = 0.0;
  bool marker = false;
  double mean_loss = 0.0;
  double mean_cbar = 0.0;
  double cbar_sem = 0.0;
};

// Mean loss and mean per-sample cosine at `cbar_layer` while steering with
// epsilon * vector at `steer_layers`, optionally with a marker from `bank` on
// every sample.
std::vector<SweepPoint> intensity_sweep(const nn::Model& model, const corpus::Corpus& corpus,
                                        const personas::PersonaVector& vector,
                                        const std::vector<std::size_t>& steer_layers, std::size_t cbar_layer,
                                        const std::vector<double>& epsilons, const corpus::MarkerBank* bank,
                                        const corpus::VocabLayout& layout, std::uint64_t seed);
std::string sweep_csv(const std::vector<SweepPoint>& points);

// ---- activation change after one step ----

struct DeltaRecord {
  std::size_t sample = 0;
  std::size_t layer = 0;
  std::size_t token = 0;
  double cos_delta_grad = 0.0;
  double cos_delta_v = 0.0;
  double cos_grad_v = 0.0;
};

struct DeltaResult {
  std::vector<std::size_t> layers;
  double lr = 0.0;
  std::vector<DeltaRecord> records;
  std::vector<double> mean_cos_delta_grad;  // per layer slot
  std::vector<double> mean_cos_delta_v;
  std::vector<double> mean_cos_grad_v;
  std::vector<double> half_step_cos_delta_grad;  // same statistic with lr / 2
  std::vector<double> halving_gap;               // |full - half| / |half|
  double update_ratio = 0.0;                     // ||d theta|| / ||theta|| over trainable params
  bool first_order = true;                       // update_ratio <= 1e-2
  // Update taken with the defense on, measured with it off.
  std::vector<double> mean_cos_defended_delta_v;
  std::vector<double> mean_cos_defended_undefended;

  // Header: sample,layer,token,cos_delta_grad,cos_delta_v,cos_grad_v
  std::string to_csv() const;
  nlohmann::json summary() const;
};

// One plain gradient step of size config.lr on `batch` (the defense is applied
// only to the comparison update), then the realised activation change at each
// layer over response tokens, measured with every defense removed.
DeltaResult delta_vs_grad(const nn::Model& model, const corpus::Corpus& batch, const personas::PersonaVector& trait,
                          const defense::DefenseSpec& defense, const train::TrainConfig& config,
                          const std::vector<std::size_t>& layers, const corpus::VocabLayout& layout,
                          std::uint64_t seed);

// Trainable parameters after one plain gradient step of size lr on `batch`.
nn::Model sgd_step(const nn::Model& model, const corpus::Corpus& batch, const std::vector<nn::SteerSpec>& steering,
                   double lr);

// ---- IP against activation-difference steering ----

struct SimilarityCurve {
  double epsilon = 0.0;
  std::vector<double> per_layer;
};

struct IpPpsResult {
  std::vector<std::size_t> layers;
  std::vector<double> baseline;    // IP vs no defense
  std::vector<double> self_check;  // IP vs IP
  std::vector<SimilarityCurve> pps;
  personas::PersonaVector diff_vectors;
  std::size_t extraction_samples = 0;
  std::size_t comparison_samples = 0;

  const SimilarityCurve& at(double epsilon) const;
  // Header: layer,curve,epsilon,cosine
  std::string to_csv() const;
  nlohmann::json summary() const;
};

// Prompt-difference vectors come from the first half of `corpus`; gradients are
// compared on the second half, token by token after the marker.
IpPpsResult ip_vs_pps_gradient_similarity(const nn::Model& model, const corpus::Corpus& corpus,
                                          const corpus::MarkerBank& bank, const corpus::VocabLayout& layout,
                                          const std::vector<double>& epsilons, std::uint64_t seed);

// ---- projections and cross-trait sweep ----

// Raw h.v over response tokens for each model at `layer`. `steering` is applied
// in the measuring forward when non-empty.
std::vector<std::vector<double>> activation_projection(const std::vector<const nn::Model*>& models,
                                                       const corpus::Corpus& corpus, const Tensor& vector,
                                                       std::size_t layer,
                                                       const std::vector<nn::SteerSpec>& steering = {});

struct CrossCell {
  std::string data_trait;
  std::string steer_trait;
  std::string compare_trait;
  double epsilon = 0.0;
  std::vector<double> per_layer;  // mean per-sample cosine
};

struct CrossTraitResult {
  std::vector<std::size_t> layers;
  std::size_t steering_layer = 0;
  std::vector<CrossCell> cells;

  const CrossCell& at(const std::string& data, const std::string& steer, const std::string& compare,
                      double epsilon) const;
  // C-bar at the steering layer along the data trait's own vector.
  double prediction(const std::string& data, const std::string& steer, double epsilon) const;
  // Header: data,steer,compare,epsilon,layer,cbar
  std::string to_csv() const;
};

// For every (data trait, steering trait, epsilon): per-layer C-bar along every
// trait vector, steering at `steering_layer`.
CrossTraitResult cross_trait_sweep(const nn::Model& model, const Named<corpus::Corpus>& corpora,
                                   const Named<personas::PersonaVector>& vectors, const std::vector<double>& epsilons,
                                   const std::vector<std::size_t>& layers, std::size_t steering_layer);

}  // namespace gradshield::graddiag
