#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "gradshield/language_model.hpp"
#include "gradshield/random.hpp"

namespace gradshield::corpus {

class CorpusError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Half-open token index range.
struct Span {
  std::size_t begin = 0;
  std::size_t end = 0;

  std::size_t size() const { return end - begin; }
  bool empty() const { return end <= begin; }
  bool contains(std::size_t t) const { return t >= begin && t < end; }
  friend bool operator==(const Span&, const Span&) = default;
};

// Token id layout: 0 PAD, 1 BOS, 2 SEP, then `n_marker_tokens` reserved marker
// tokens, then content tokens up to vocab_size.
struct VocabLayout {
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kSep = 2;

  std::size_t vocab_size = 64;
  std::size_t n_marker_tokens = 12;

  int marker_begin() const { return 3; }
  int content_begin() const { return 3 + static_cast<int>(n_marker_tokens); }
  std::size_t n_content() const { return vocab_size - static_cast<std::size_t>(content_begin()); }
  bool is_marker_token(int t) const { return t >= marker_begin() && t < content_begin(); }
  bool is_content(int t) const { return t >= content_begin() && t < static_cast<int>(vocab_size); }
  void validate() const;
};

struct TraitSpec {
  std::string name;
  std::vector<int> trait_tokens;
  std::vector<std::vector<int>> trigger_contexts;
  double intensity = 0.0;
  // Anti-trait corpora apply `intensity` to suppressing trait tokens.
  bool anti = false;

  void validate(const VocabLayout& layout) const;
  bool is_trait_token(int token) const;
  // True when position t is preceded by one of the trigger contexts.
  bool is_post_trigger(std::span<const int> tokens, std::size_t t) const;
};

struct MarkerTag {
  std::size_t index = 0;  // which marker of the bank
  Span span;
  friend bool operator==(const MarkerTag&, const MarkerTag&) = default;
};

struct CorpusSample {
  std::vector<int> tokens;
  Span prompt;    // loss-masked
  Span response;  // loss-bearing
  double trait_label = 0.0;
  std::optional<MarkerTag> marker;

  friend bool operator==(const CorpusSample&, const CorpusSample&) = default;
};

using Corpus = std::vector<CorpusSample>;

struct MarkerBank {
  std::string name;
  std::vector<std::vector<int>> markers;

  std::size_t size() const { return markers.size(); }
  void validate(const VocabLayout& layout) const;
  // First k markers.
  MarkerBank prefix(std::size_t k) const;
};

struct ChainConfig {
  std::uint64_t seed = 0;
  std::size_t successors = 6;
  std::vector<int> rare_tokens;  // receive `rare_mass` in total from every source
  double rare_mass = 0.02;
};

// Fixed seeded bigram process over the content tokens.
class BigramChain {
 public:
  BigramChain(const VocabLayout& layout, const ChainConfig& config);

  const VocabLayout& layout() const { return layout_; }
  const ChainConfig& config() const { return config_; }
  std::span<const double> row(int token) const;
  int sample(int from, Rng& rng) const;
  // Sample with `excluded` tokens removed and the rest renormalised.
  int sample_excluding(int from, std::span<const int> excluded, Rng& rng) const;
  int sample_start(Rng& rng) const;

 private:
  VocabLayout layout_;
  ChainConfig config_;
  std::vector<double> probs_;
  std::vector<int> starts_;
};

struct GenerationConfig {
  std::size_t prompt_min = 4;
  std::size_t prompt_max = 8;
  std::size_t response_len = 20;
};

Corpus generate_corpus(const BigramChain& chain, const TraitSpec& trait, std::size_t n_samples, std::uint64_t seed,
                       const GenerationConfig& gen = {});

// [BOS, prompt..., SEP] prefixes with no response.
std::vector<std::vector<int>> make_eval_prompts(const BigramChain& chain, std::size_t n, std::uint64_t seed,
                                                const GenerationConfig& gen = {});

// 100 x fraction of post-trigger response positions holding a trait token.
double label_sample(const TraitSpec& trait, const CorpusSample& sample);

// Keep samples with trait_label >= threshold (keep_high) or <= 100 - threshold.
Corpus filter_by_label(const Corpus& corpus, double threshold, bool keep_high);

// Inserts a uniformly drawn marker right after BOS; the marker is prompt content.
CorpusSample inject_marker(const CorpusSample& sample, const MarkerBank& bank, Rng& rng, const VocabLayout& layout);
CorpusSample inject_marker_index(const CorpusSample& sample, const MarkerBank& bank, std::size_t index,
                                 const VocabLayout& layout);
CorpusSample strip_marker(const CorpusSample& sample);
bool contains_marker_tokens(std::span<const int> tokens, const VocabLayout& layout);

struct TraitScore {
  double score = 0.0;  // 0..100
  double sem = 0.0;
  std::size_t n_pairs = 0;
  std::vector<double> per_prompt;
};

TraitScore score_trait_expression(const LanguageModel& model, const TraitSpec& trait,
                                  const std::vector<std::vector<int>>& eval_prompts, std::size_t n_generations,
                                  std::uint64_t seed, std::size_t response_len);

// exp(mean next-token cross-entropy over response tokens), token-pooled.
double perplexity(const LanguageModel& model, const Corpus& corpus);
double coherence_from_perplexity(double ppl, double ppl_base);
double score_coherence(const LanguageModel& model, const Corpus& heldout, double ppl_base);

// The lab's built-in trait pair: a broad trait and a narrow one sharing part of
// its tokens, over one shared trigger set.
struct TraitLayout {
  VocabLayout vocab;
  std::vector<int> triggers;
  TraitSpec broad;
  TraitSpec narrow;
  std::vector<int> rare_tokens() const;
};

struct TraitLayoutConfig {
  std::uint64_t seed = 7;
  std::size_t n_triggers = 10;
  std::size_t broad_tokens = 8;
  std::size_t narrow_tokens = 4;
  std::size_t overlap = 2;
};

TraitLayout make_trait_layout(const VocabLayout& vocab, const TraitLayoutConfig& config);

// Marker banks draw ordered pairs of distinct tokens from disjoint pools of the
// reserved range: broad-trait, narrow-trait and neutral.
enum class MarkerFamily { broad, narrow, neutral };
MarkerBank make_marker_bank(const VocabLayout& vocab, MarkerFamily family, std::size_t k);
std::size_t marker_family_capacity(const VocabLayout& vocab, MarkerFamily family);

nlohmann::json sample_to_json(const CorpusSample& s);
CorpusSample sample_from_json(const nlohmann::json& j);
std::string to_jsonl(const Corpus& corpus);
Corpus from_jsonl(std::string_view text);
void write_jsonl(const std::filesystem::path& path, const Corpus& corpus);
Corpus read_jsonl(const std::filesystem::path& path);

nlohmann::json trait_to_json(const TraitSpec& t);
TraitSpec trait_from_json(const nlohmann::json& j);

}  // namespace gradshield::corpus
