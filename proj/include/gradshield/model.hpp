#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "gradshield/autodiff.hpp"
#include "gradshield/container.hpp"
#include "gradshield/language_model.hpp"
#include "gradshield/random.hpp"
#include "gradshield/tensor.hpp"

namespace gradshield::nn {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct ModelConfig {
  std::size_t n_layers = 4;
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t vocab_size = 64;
  std::size_t max_seq = 64;
  std::size_t d_ff = 0;  // 0 selects 2 * d_model
  std::uint64_t seed = 0;

  std::size_t ff_width() const { return d_ff ? d_ff : 2 * d_model; }
  void validate() const;
  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

// Every linear projection of a block, in the order they are applied.
inline const std::vector<std::string>& projection_names() {
  static const std::vector<std::string> names{"q", "k", "v", "o", "gate", "up", "down"};
  return names;
}

struct AdapterConfig {
  std::size_t rank = 8;
  double alpha = 16.0;
  double dropout = 0.0;
  std::vector<std::string> targets = projection_names();

  double scaling() const { return alpha / static_cast<double>(rank); }
  void validate() const;
  nlohmann::json to_json() const;
  static AdapterConfig from_json(const nlohmann::json& j);
};

struct Parameter {
  std::string name;
  Tensor value;
  bool trainable = true;
  bool adapter = false;
};

// "resid.<layer>"; layer 0 is the embedding output, layer l the output of block l.
std::string tap_name(std::size_t layer);

struct SteerSpec {
  std::size_t layer = 0;
  Tensor vector;
  double epsilon = 0.0;
};

struct ForwardOptions {
  bool grad_base = false;
  bool grad_adapters = false;
  Rng* dropout_rng = nullptr;  // adapter dropout is active only when set
};

struct ForwardTrace {
  ad::Var logits;
  // (parameter index, tape variable) for every parameter that requires grad.
  std::vector<std::pair<std::size_t, ad::Var>> params;
};

// Pre-LayerNorm decoder-only transformer with a gated GELU MLP, learned absolute
// positions and residual taps "resid.0" .. "resid.L".
class Model {
 public:
  static Model build(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }
  const std::optional<AdapterConfig>& adapter_config() const { return adapters_; }
  bool has_adapters() const { return adapters_.has_value(); }

  // Replaces each targeted W by W + (alpha/r) A B with A small-random and B zero;
  // base weights become frozen.
  void attach_adapters(const AdapterConfig& config);
  // Copy with adapters folded into the base weights.
  Model merged() const;

  std::vector<Parameter>& parameters() { return params_; }
  const std::vector<Parameter>& parameters() const { return params_; }
  Parameter& parameter(std::string_view name);
  const Parameter& parameter(std::string_view name) const;
  bool has_parameter(std::string_view name) const;
  std::vector<std::size_t> trainable_indices() const;

  ForwardTrace forward(ad::Tape& tape, std::span<const int> tokens, const ForwardOptions& options = {}) const;

  // Tape-free incremental decoder with optional steering.
  std::unique_ptr<TokenStream> open(std::vector<SteerSpec> steering = {}) const;

  // FNV-1a over the frozen (non-adapter) weights.
  std::uint64_t base_weight_hash() const;

 private:
  struct Proj {
    std::size_t weight = 0;
    std::optional<std::size_t> lora_a, lora_b;
  };
  struct Block {
    std::size_t ln1_g, ln1_b, ln2_g, ln2_b;
    Proj q, k, v, o, gate, up, down;
    Proj& proj(std::string_view name);
    const Proj& proj(std::string_view name) const;
  };

  std::size_t add_param(std::string name, Tensor value);
  ad::Var apply_proj(ad::Tape& tape, ad::Var x, const Proj& p, const ForwardOptions& options,
                     std::vector<ad::Var>& vars, ForwardTrace& trace) const;
  ad::Var param_var(ad::Tape& tape, std::size_t index, const ForwardOptions& options, std::vector<ad::Var>& vars,
                    ForwardTrace& trace) const;
  void rebuild_index();

  friend class DecodeStream;
  friend Model model_from_container(const io::Container& c);

  ModelConfig config_;
  std::optional<AdapterConfig> adapters_;
  std::vector<Parameter> params_;
  std::unordered_map<std::string, std::size_t> index_;
  std::size_t tok_emb_ = 0, pos_emb_ = 0, lnf_g_ = 0, lnf_b_ = 0, unembed_ = 0;
  std::vector<Block> blocks_;
};

// LanguageModel view of a model, optionally steered.
class SteeredModel : public LanguageModel {
 public:
  explicit SteeredModel(const Model& model, std::vector<SteerSpec> steering = {})
      : model_(&model), steering_(std::move(steering)) {}
  std::size_t vocab_size() const override { return model_->config().vocab_size; }
  std::unique_ptr<TokenStream> open() const override { return model_->open(steering_); }

 private:
  const Model* model_;
  std::vector<SteerSpec> steering_;
};

// Post-block residual activations for a padded batch.
struct Activations {
  std::vector<std::size_t> layers;
  std::size_t batch = 0, seq = 0, width = 0;
  Tensor values;                  // [batch x |layers| x seq x width]
  std::vector<std::uint8_t> valid;  // [batch x seq]; 0 marks padding, excluded downstream

  std::span<const double> at(std::size_t b, std::size_t layer_slot, std::size_t t) const;
  bool is_valid(std::size_t b, std::size_t t) const { return valid[b * seq + t] != 0; }
};

// `lengths[i]` is the number of real (non-padding) tokens of sequence i; the rest
// of each padded row is ignored by the forward pass.
Activations capture_activations(const Model& model, const std::vector<std::vector<int>>& batch,
                                 const std::vector<std::size_t>& lengths, const std::vector<std::size_t>& layers,
                                 const std::vector<SteerSpec>& steering = {});

struct Checkpoint {
  Model model;
  std::uint64_t step = 0;
  std::uint64_t seed = 0;
  nlohmann::json extra = nlohmann::json::object();
};

io::Container to_container(const Model& model, std::uint64_t step, std::uint64_t seed,
                           const nlohmann::json& extra = nlohmann::json::object());
Model model_from_container(const io::Container& c);
void save_checkpoint(const std::filesystem::path& path, const Model& model, std::uint64_t step, std::uint64_t seed,
                     const nlohmann::json& extra = nlohmann::json::object());
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace gradshield::nn
