#include "gradshield/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "gradshield/container.hpp"

namespace gradshield::corpus {

using nlohmann::json;

void VocabLayout::validate() const {
  if (n_marker_tokens < 12) throw CorpusError("vocab layout: need at least 12 reserved marker tokens");
  if (vocab_size < static_cast<std::size_t>(content_begin()) + 8) {
    throw CorpusError("vocab layout: vocab_size " + std::to_string(vocab_size) + " leaves too few content tokens");
  }
}

void TraitSpec::validate(const VocabLayout& layout) const {
  if (trait_tokens.empty()) throw CorpusError("trait '" + name + "': no trait tokens");
  if (!(intensity >= 0.0 && intensity <= 1.0)) throw CorpusError("trait '" + name + "': intensity outside [0, 1]");
  for (int t : trait_tokens) {
    if (!layout.is_content(t)) throw CorpusError("trait '" + name + "': token " + std::to_string(t) + " is not content");
  }
  for (const auto& ctx : trigger_contexts) {
    if (ctx.empty()) throw CorpusError("trait '" + name + "': empty trigger context");
    for (int t : ctx) {
      if (!layout.is_content(t)) throw CorpusError("trait '" + name + "': trigger token " + std::to_string(t) + " is not content");
      if (is_trait_token(t)) throw CorpusError("trait '" + name + "': trigger token " + std::to_string(t) + " is a trait token");
    }
  }
}

bool TraitSpec::is_trait_token(int token) const {
  return std::find(trait_tokens.begin(), trait_tokens.end(), token) != trait_tokens.end();
}

bool TraitSpec::is_post_trigger(std::span<const int> tokens, std::size_t t) const {
  for (const auto& ctx : trigger_contexts) {
    if (t < ctx.size() || t > tokens.size()) continue;
    if (std::equal(ctx.begin(), ctx.end(), tokens.begin() + static_cast<std::ptrdiff_t>(t - ctx.size()))) return true;
  }
  return false;
}

void MarkerBank::validate(const VocabLayout& layout) const {
  if (markers.empty()) throw CorpusError("marker bank '" + name + "' is empty");
  for (std::size_t i = 0; i < markers.size(); ++i) {
    if (markers[i].empty()) throw CorpusError("marker bank '" + name + "': empty marker");
    for (int t : markers[i]) {
      if (!layout.is_marker_token(t)) {
        throw CorpusError("marker bank '" + name + "': token " + std::to_string(t) + " is not a reserved marker token");
      }
    }
    for (std::size_t j = 0; j < i; ++j) {
      if (markers[i] == markers[j]) throw CorpusError("marker bank '" + name + "': duplicate marker");
    }
  }
}

MarkerBank MarkerBank::prefix(std::size_t k) const {
  if (k == 0 || k > markers.size()) {
    throw CorpusError("marker bank '" + name + "': cannot take " + std::to_string(k) + " of " +
                      std::to_string(markers.size()) + " markers");
  }
  return MarkerBank{name, std::vector<std::vector<int>>(markers.begin(), markers.begin() + static_cast<std::ptrdiff_t>(k))};
}

// ---------------------------------------------------------------------------

BigramChain::BigramChain(const VocabLayout& layout, const ChainConfig& config) : layout_(layout), config_(config) {
  layout_.validate();
  const std::size_t V = layout_.vocab_size;
  std::vector<bool> rare(V, false);
  for (int t : config_.rare_tokens) {
    if (!layout_.is_content(t)) throw CorpusError("bigram chain: rare token " + std::to_string(t) + " is not content");
    rare[static_cast<std::size_t>(t)] = true;
  }
  for (int t = layout_.content_begin(); t < static_cast<int>(V); ++t) {
    if (!rare[static_cast<std::size_t>(t)]) starts_.push_back(t);
  }
  if (config_.successors < 1 || config_.successors > starts_.size()) {
    throw CorpusError("bigram chain: successors must be in 1.." + std::to_string(starts_.size()));
  }
  const double rare_mass = config_.rare_tokens.empty() ? 0.0 : config_.rare_mass;
  if (!(rare_mass >= 0.0 && rare_mass < 1.0)) throw CorpusError("bigram chain: rare_mass outside [0, 1)");

  probs_.assign(V * V, 0.0);
  Rng rng(derive_seed(config_.seed, 0xB16A));
  for (std::size_t from = 0; from < V; ++from) {
    double* row = probs_.data() + from * V;
    if (!layout_.is_content(static_cast<int>(from))) {
      // Special and marker tokens restart the chain uniformly.
      for (int t : starts_) row[t] = 1.0 / static_cast<double>(starts_.size());
      continue;
    }
    std::vector<int> pool = starts_;
    std::vector<double> weights(config_.successors);
    double total = 0.0;
    for (std::size_t k = 0; k < config_.successors; ++k) {
      const std::size_t pick = k + rng.index(pool.size() - k);
      std::swap(pool[k], pool[pick]);
      weights[k] = 0.25 + rng.uniform();
      total += weights[k];
    }
    for (std::size_t k = 0; k < config_.successors; ++k) row[pool[k]] += (1.0 - rare_mass) * weights[k] / total;
    for (int t : config_.rare_tokens) row[t] += rare_mass / static_cast<double>(config_.rare_tokens.size());
  }
}

std::span<const double> BigramChain::row(int token) const {
  if (token < 0 || static_cast<std::size_t>(token) >= layout_.vocab_size) {
    throw CorpusError("bigram chain: token " + std::to_string(token) + " out of range");
  }
  return {probs_.data() + static_cast<std::size_t>(token) * layout_.vocab_size, layout_.vocab_size};
}

int BigramChain::sample(int from, Rng& rng) const { return static_cast<int>(rng.categorical(row(from))); }

int BigramChain::sample_excluding(int from, std::span<const int> excluded, Rng& rng) const {
  auto r = row(from);
  std::vector<double> w(r.begin(), r.end());
  for (int t : excluded) w[static_cast<std::size_t>(t)] = 0.0;
  return static_cast<int>(rng.categorical(w));
}

int BigramChain::sample_start(Rng& rng) const { return starts_[rng.index(starts_.size())]; }

// ---------------------------------------------------------------------------

namespace {

void validate_generation(const GenerationConfig& gen) {
  if (gen.prompt_min < 1 || gen.prompt_max < gen.prompt_min) throw CorpusError("generation: bad prompt length range");
  if (gen.response_len < 1) throw CorpusError("generation: response must be non-empty");
}

// [BOS, prompt..., SEP]; returns the last prompt content token.
int append_prompt(const BigramChain& chain, const GenerationConfig& gen, Rng& rng, std::vector<int>& out) {
  const std::size_t len = gen.prompt_min + rng.index(gen.prompt_max - gen.prompt_min + 1);
  out.push_back(VocabLayout::kBos);
  int prev = chain.sample_start(rng);
  out.push_back(prev);
  for (std::size_t i = 1; i < len; ++i) {
    prev = chain.sample(prev, rng);
    out.push_back(prev);
  }
  out.push_back(VocabLayout::kSep);
  return prev;
}

}  // namespace

Corpus generate_corpus(const BigramChain& chain, const TraitSpec& trait, std::size_t n_samples, std::uint64_t seed,
                       const GenerationConfig& gen) {
  if (n_samples < 1) throw CorpusError("generate_corpus: n_samples must be >= 1");
  trait.validate(chain.layout());
  validate_generation(gen);
  Corpus out;
  out.reserve(n_samples);
  for (std::size_t i = 0; i < n_samples; ++i) {
    Rng rng(derive_seed(seed, i));
    CorpusSample s;
    int prev = append_prompt(chain, gen, rng, s.tokens);
    const std::size_t p_end = s.tokens.size();
    for (std::size_t j = 0; j < gen.response_len; ++j) {
      // Every draw happens at every position so the stream does not depend on intensity.
      const double u = rng.uniform();
      const int biased = trait.anti ? chain.sample_excluding(prev, trait.trait_tokens, rng)
                                    : trait.trait_tokens[rng.index(trait.trait_tokens.size())];
      const int plain = chain.sample(prev, rng);
      const bool post = trait.is_post_trigger(s.tokens, s.tokens.size());
      const int tok = (post && u < trait.intensity) ? biased : plain;
      s.tokens.push_back(tok);
      prev = tok;
    }
    s.prompt = Span{0, p_end};
    s.response = Span{p_end, s.tokens.size()};
    s.trait_label = label_sample(trait, s);
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<std::vector<int>> make_eval_prompts(const BigramChain& chain, std::size_t n, std::uint64_t seed,
                                                const GenerationConfig& gen) {
  validate_generation(gen);
  std::vector<std::vector<int>> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng(derive_seed(seed, 0xE7A1000 + i));
    append_prompt(chain, gen, rng, out[i]);
  }
  return out;
}

double label_sample(const TraitSpec& trait, const CorpusSample& sample) {
  std::size_t post = 0, hits = 0;
  for (std::size_t t = sample.response.begin; t < sample.response.end; ++t) {
    if (!trait.is_post_trigger(sample.tokens, t)) continue;
    ++post;
    if (trait.is_trait_token(sample.tokens[t])) ++hits;
  }
  return post ? 100.0 * static_cast<double>(hits) / static_cast<double>(post) : 0.0;
}

Corpus filter_by_label(const Corpus& corpus, double threshold, bool keep_high) {
  Corpus out;
  for (const auto& s : corpus) {
    if (keep_high ? s.trait_label >= threshold : s.trait_label <= 100.0 - threshold) out.push_back(s);
  }
  return out;
}

// ---------------------------------------------------------------------------

bool contains_marker_tokens(std::span<const int> tokens, const VocabLayout& layout) {
  return std::any_of(tokens.begin(), tokens.end(), [&](int t) { return layout.is_marker_token(t); });
}

CorpusSample inject_marker_index(const CorpusSample& sample, const MarkerBank& bank, std::size_t index,
                                 const VocabLayout& layout) {
  if (sample.prompt.empty()) throw CorpusError("inject_marker: sample has no prompt span");
  if (index >= bank.size()) throw CorpusError("inject_marker: marker index out of range");
  if (sample.marker || contains_marker_tokens(sample.tokens, layout)) {
    throw CorpusError("inject_marker: sample already contains reserved marker tokens");
  }
  const auto& marker = bank.markers[index];
  std::size_t at = sample.prompt.begin;
  if (sample.tokens[at] == VocabLayout::kBos) ++at;
  const std::size_t m = marker.size();
  CorpusSample out = sample;
  out.tokens.insert(out.tokens.begin() + static_cast<std::ptrdiff_t>(at), marker.begin(), marker.end());
  out.prompt.end += m;
  out.response.begin += m;
  out.response.end += m;
  out.marker = MarkerTag{index, Span{at, at + m}};
  return out;
}

CorpusSample inject_marker(const CorpusSample& sample, const MarkerBank& bank, Rng& rng, const VocabLayout& layout) {
  if (bank.markers.empty()) throw CorpusError("inject_marker: empty marker bank");
  return inject_marker_index(sample, bank, rng.index(bank.size()), layout);
}

CorpusSample strip_marker(const CorpusSample& sample) {
  if (!sample.marker) return sample;
  const Span span = sample.marker->span;
  const std::size_t m = span.size();
  CorpusSample out = sample;
  out.tokens.erase(out.tokens.begin() + static_cast<std::ptrdiff_t>(span.begin),
                   out.tokens.begin() + static_cast<std::ptrdiff_t>(span.end));
  out.prompt.end -= m;
  out.response.begin -= m;
  out.response.end -= m;
  out.marker.reset();
  return out;
}

// ---------------------------------------------------------------------------

TraitScore score_trait_expression(const LanguageModel& model, const TraitSpec& trait,
                                  const std::vector<std::vector<int>>& eval_prompts, std::size_t n_generations,
                                  std::uint64_t seed, std::size_t response_len) {
  if (eval_prompts.empty()) throw CorpusError("score_trait_expression: empty prompt set");
  if (n_generations < 1) throw CorpusError("score_trait_expression: n_generations must be >= 1");
  TraitScore result;
  std::vector<double> pairs;
  for (std::size_t i = 0; i < eval_prompts.size(); ++i) {
    const auto& prompt = eval_prompts[i];
    if (prompt.empty()) throw CorpusError("score_trait_expression: empty prompt");
    double prompt_sum = 0.0;
    std::size_t prompt_n = 0;
    for (std::size_t g = 0; g < n_generations; ++g) {
      Rng rng(derive_seed(seed, i * n_generations + g));
      auto stream = model.open();
      std::vector<int> ctx;
      std::vector<double> probs;
      for (int t : prompt) {
        probs = stream->push(t);
        ctx.push_back(t);
      }
      double mass = 0.0;
      std::size_t counted = 0;
      for (std::size_t j = 0; j < response_len; ++j) {
        if (trait.is_post_trigger(ctx, ctx.size())) {
          double m = 0.0;
          for (int t : trait.trait_tokens) m += probs[static_cast<std::size_t>(t)];
          mass += m;
          ++counted;
        }
        const int next = static_cast<int>(rng.categorical(probs));
        ctx.push_back(next);
        if (j + 1 < response_len) probs = stream->push(next);
      }
      if (counted == 0) continue;
      const double value = 100.0 * mass / static_cast<double>(counted);
      pairs.push_back(value);
      prompt_sum += value;
      ++prompt_n;
    }
    result.per_prompt.push_back(prompt_n ? prompt_sum / static_cast<double>(prompt_n) : 0.0);
  }
  result.n_pairs = pairs.size();
  if (pairs.empty()) return result;
  const double n = static_cast<double>(pairs.size());
  const double mean = std::accumulate(pairs.begin(), pairs.end(), 0.0) / n;
  double ss = 0.0;
  for (double p : pairs) ss += (p - mean) * (p - mean);
  result.score = mean;
  result.sem = pairs.size() > 1 ? std::sqrt(ss / (n - 1.0)) / std::sqrt(n) : 0.0;
  return result;
}

double perplexity(const LanguageModel& model, const Corpus& corpus) {
  double nll = 0.0;
  std::size_t count = 0;
  for (const auto& s : corpus) {
    if (s.response.empty() || s.response.begin == 0) continue;
    auto stream = model.open();
    std::vector<double> probs;
    for (std::size_t t = 0; t < s.response.end; ++t) {
      if (t >= s.response.begin) {
        nll -= std::log(std::max(probs[static_cast<std::size_t>(s.tokens[t])], 1e-300));
        ++count;
      }
      if (t + 1 < s.response.end) probs = stream->push(s.tokens[t]);
    }
  }
  if (count == 0) throw CorpusError("perplexity: no response tokens");
  return std::exp(nll / static_cast<double>(count));
}

double coherence_from_perplexity(double ppl, double ppl_base) {
  if (!(ppl_base > 0.0)) throw CorpusError("coherence: base perplexity must be positive");
  if (!std::isfinite(ppl)) return 0.0;
  const double excess = std::max(0.0, ppl - ppl_base) / ppl_base;
  return std::clamp(100.0 * std::exp(-excess), 0.0, 100.0);
}

double score_coherence(const LanguageModel& model, const Corpus& heldout, double ppl_base) {
  return coherence_from_perplexity(perplexity(model, heldout), ppl_base);
}

// ---------------------------------------------------------------------------

std::vector<int> TraitLayout::rare_tokens() const {
  std::vector<int> out = broad.trait_tokens;
  for (int t : narrow.trait_tokens) {
    if (std::find(out.begin(), out.end(), t) == out.end()) out.push_back(t);
  }
  std::sort(out.begin(), out.end());
  return out;
}

TraitLayout make_trait_layout(const VocabLayout& vocab, const TraitLayoutConfig& config) {
  vocab.validate();
  if (config.overlap > config.narrow_tokens || config.overlap > config.broad_tokens) {
    throw CorpusError("trait layout: overlap exceeds a trait's token count");
  }
  const std::size_t needed = config.broad_tokens + config.narrow_tokens - config.overlap + config.n_triggers;
  if (needed + 8 > vocab.n_content()) throw CorpusError("trait layout: not enough content tokens");
  std::vector<int> content(vocab.n_content());
  std::iota(content.begin(), content.end(), vocab.content_begin());
  Rng rng(derive_seed(config.seed, 0x7A17));
  for (std::size_t i = content.size(); i > 1; --i) std::swap(content[i - 1], content[rng.index(i)]);

  TraitLayout out;
  out.vocab = vocab;
  auto next = content.begin();
  std::vector<int> broad(next, next + static_cast<std::ptrdiff_t>(config.broad_tokens));
  next += static_cast<std::ptrdiff_t>(config.broad_tokens);
  std::vector<int> narrow(broad.begin(), broad.begin() + static_cast<std::ptrdiff_t>(config.overlap));
  const std::size_t fresh = config.narrow_tokens - config.overlap;
  narrow.insert(narrow.end(), next, next + static_cast<std::ptrdiff_t>(fresh));
  next += static_cast<std::ptrdiff_t>(fresh);
  out.triggers.assign(next, next + static_cast<std::ptrdiff_t>(config.n_triggers));
  std::sort(broad.begin(), broad.end());
  std::sort(narrow.begin(), narrow.end());
  std::sort(out.triggers.begin(), out.triggers.end());

  std::vector<std::vector<int>> contexts;
  for (int t : out.triggers) contexts.push_back({t});
  out.broad = TraitSpec{"broad", broad, contexts, 0.0, false};
  out.narrow = TraitSpec{"narrow", narrow, contexts, 0.0, false};
  return out;
}

namespace {

std::pair<int, int> family_pool(const VocabLayout& vocab, MarkerFamily family) {
  vocab.validate();
  const int b = vocab.marker_begin();
  switch (family) {
    case MarkerFamily::broad: return {b, b + 5};
    case MarkerFamily::narrow: return {b + 5, b + 8};
    case MarkerFamily::neutral: return {b + 8, vocab.content_begin()};
  }
  return {b, b};
}

}  // namespace

std::size_t marker_family_capacity(const VocabLayout& vocab, MarkerFamily family) {
  auto [lo, hi] = family_pool(vocab, family);
  const auto n = static_cast<std::size_t>(hi - lo);
  return n * (n - 1);
}

MarkerBank make_marker_bank(const VocabLayout& vocab, MarkerFamily family, std::size_t k) {
  auto [lo, hi] = family_pool(vocab, family);
  static const char* names[] = {"broad", "narrow", "neutral"};
  MarkerBank bank{names[static_cast<int>(family)], {}};
  // Offsets first, so small banks spread over all tokens of the pool.
  const int n = hi - lo;
  for (int off = 1; off < n && bank.markers.size() < k; ++off) {
    for (int a = 0; a < n && bank.markers.size() < k; ++a) bank.markers.push_back({lo + a, lo + (a + off) % n});
  }
  if (bank.markers.size() < k) {
    throw CorpusError("marker bank: requested " + std::to_string(k) + " markers, capacity " +
                      std::to_string(bank.markers.size()));
  }
  bank.validate(vocab);
  return bank;
}

// ---------------------------------------------------------------------------

json sample_to_json(const CorpusSample& s) {
  json j;
  j["tokens"] = s.tokens;
  j["prompt_span"] = {s.prompt.begin, s.prompt.end};
  j["response_span"] = {s.response.begin, s.response.end};
  j["trait_label"] = s.trait_label;
  if (s.marker) {
    j["marker"] = {{"index", s.marker->index}, {"span", {s.marker->span.begin, s.marker->span.end}}};
  } else {
    j["marker"] = nullptr;
  }
  return j;
}

CorpusSample sample_from_json(const json& j) {
  CorpusSample s;
  try {
    s.tokens = j.at("tokens").get<std::vector<int>>();
    auto span = [](const json& a) { return Span{a.at(0).get<std::size_t>(), a.at(1).get<std::size_t>()}; };
    s.prompt = span(j.at("prompt_span"));
    s.response = span(j.at("response_span"));
    s.trait_label = j.at("trait_label").get<double>();
    const json& m = j.at("marker");
    if (!m.is_null()) s.marker = MarkerTag{m.at("index").get<std::size_t>(), span(m.at("span"))};
  } catch (const json::exception& e) {
    throw CorpusError(std::string("corpus record: ") + e.what());
  }
  if (s.response.empty() || s.response.end > s.tokens.size() || s.prompt.end != s.response.begin) {
    throw CorpusError("corpus record: spans do not partition the sequence");
  }
  return s;
}

std::string to_jsonl(const Corpus& corpus) {
  std::string out;
  for (const auto& s : corpus) {
    out += sample_to_json(s).dump();
    out += '\n';
  }
  return out;
}

Corpus from_jsonl(std::string_view text) {
  Corpus out;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t nl = text.find('\n', pos);
    if (nl == std::string_view::npos) nl = text.size();
    std::string_view line = text.substr(pos, nl - pos);
    if (!line.empty()) {
      try {
        out.push_back(sample_from_json(json::parse(line)));
      } catch (const json::parse_error& e) {
        throw CorpusError(std::string("corpus file: ") + e.what());
      }
    }
    pos = nl + 1;
  }
  return out;
}

void write_jsonl(const std::filesystem::path& path, const Corpus& corpus) {
  io::write_bytes(path, to_jsonl(corpus));
}

Corpus read_jsonl(const std::filesystem::path& path) {
  return from_jsonl(io::read_bytes(path));
}

json trait_to_json(const TraitSpec& t) {
  return {{"name", t.name},
          {"trait_tokens", t.trait_tokens},
          {"trigger_contexts", t.trigger_contexts},
          {"intensity", t.intensity},
          {"anti", t.anti}};
}

TraitSpec trait_from_json(const json& j) {
  TraitSpec t;
  t.name = j.at("name").get<std::string>();
  t.trait_tokens = j.at("trait_tokens").get<std::vector<int>>();
  t.trigger_contexts = j.at("trigger_contexts").get<std::vector<std::vector<int>>>();
  t.intensity = j.value("intensity", 0.0);
  t.anti = j.value("anti", false);
  return t;
}

}  // namespace gradshield::corpus
