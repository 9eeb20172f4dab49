#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "gradshield/corpus.hpp"
#include "gradshield/defenses.hpp"
#include "gradshield/manipulation.hpp"
#include "gradshield/model.hpp"

namespace gradshield::train {

enum class Schedule { constant, linear, cosine };
enum class Optimizer { adamw, sgd };

struct TrainConfig {
  double lr = 2e-3;
  double weight_decay = 0.0;
  double warmup_fraction = 0.03;
  Schedule schedule = Schedule::cosine;
  std::size_t epochs = 1;
  std::size_t batch_size = 8;
  std::size_t grad_accum = 1;
  std::size_t max_steps = 0;  // overrides epochs when nonzero
  std::uint64_t seed = 0;
  Optimizer optimizer = Optimizer::adamw;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double grad_clip = 0.0;  // global-norm clip, 0 disables

  void validate() const;
  std::size_t total_steps(std::size_t corpus_size) const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

// Learning rate at 0-based `step` of `total` steps.
double learning_rate(const TrainConfig& config, std::size_t step, std::size_t total);

struct StepRecord {
  std::size_t step = 0;
  double lr = 0.0;
  double loss = 0.0;
};

struct EvalRecord {
  std::size_t step = 0;
  nlohmann::json values;
};

struct TrainTrajectory {
  std::vector<StepRecord> steps;
  std::vector<EvalRecord> evals;
  std::vector<std::filesystem::path> checkpoints;
  std::size_t total_steps = 0;

  double final_loss() const { return steps.empty() ? 0.0 : steps.back().loss; }
  // step,lr,loss plus one column per eval key (blank when not evaluated).
  std::string to_csv() const;
};

using EvalHook = std::function<nlohmann::json(const nn::Model&, std::size_t step)>;

struct DiagHooks {
  EvalHook eval;
  std::size_t eval_every = 0;  // also evaluates after the last step when set
  std::filesystem::path checkpoint_dir;
  std::size_t checkpoint_every = 0;
};

class DivergenceError : public NumericError {
 public:
  DivergenceError(std::size_t step, std::vector<nn::Parameter> last_good, std::vector<StepRecord> tail);
  std::size_t step() const { return step_; }
  const std::vector<nn::Parameter>& last_good() const { return last_good_; }
  const std::vector<StepRecord>& tail() const { return tail_; }

 private:
  std::size_t step_;
  std::vector<nn::Parameter> last_good_;
  std::vector<StepRecord> tail_;
};

// Per-row cross-entropy weights for next-token prediction on the response span:
// row t predicts token t+1, weighted `scale / |response|` when t+1 is a response token.
std::vector<double> response_weights(const corpus::CorpusSample& s, double scale);
std::vector<int> next_tokens(const corpus::CorpusSample& s);

// Forward and backward for one sample. Adds the gradient of weight * mean
// response-token loss into `grads` (indexed like model.parameters(); empty
// tensors are allocated on first use). Returns the unweighted mean loss.
double accumulate_sample_gradient(const nn::Model& model, const corpus::CorpusSample& sample,
                                  const std::vector<nn::SteerSpec>& steering, const graddiag::GradManipSpec* manip,
                                  double weight, std::vector<Tensor>& grads);

// Trains the trainable parameters: adapters when attached, otherwise every weight.
TrainTrajectory finetune(nn::Model& model, const corpus::Corpus& corpus, const defense::DefenseSpec& defense,
                         const TrainConfig& config, const corpus::VocabLayout& layout,
                         const graddiag::GradManipSpec* manip = nullptr, const DiagHooks& hooks = {});

}  // namespace gradshield::train
