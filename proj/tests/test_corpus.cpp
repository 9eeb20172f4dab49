#include <doctest.h>

#include <cmath>
#include <map>
#include <memory>
#include <vector>

#include "fixtures.hpp"
#include "gradshield/corpus.hpp"

using namespace gradshield;
using namespace gradshield::corpus;

namespace {

using Fixture = testing::TinyWorld;

// Ignores its input and always predicts the same distribution.
class FixedModel : public LanguageModel {
 public:
  explicit FixedModel(std::vector<double> probs) : probs_(std::move(probs)) {}
  std::size_t vocab_size() const override { return probs_.size(); }
  std::unique_ptr<TokenStream> open() const override { return std::make_unique<Stream>(probs_); }

 private:
  struct Stream : TokenStream {
    explicit Stream(std::vector<double> p) : probs(std::move(p)) {}
    std::vector<double> push(int) override { return probs; }
    std::vector<double> probs;
  };
  std::vector<double> probs_;
};

}  // namespace

TEST_CASE("intensity 0 corpus is bitwise the neutral corpus") {
  Fixture f;
  TraitSpec neutral = f.broad(0.0);
  neutral.trait_tokens = {f.traits.broad.trait_tokens[0]};
  // Labels depend on the trait's tokens; the text does not.
  const auto a = generate_corpus(f.chain, f.broad(0.0), 50, 9);
  const auto b = generate_corpus(f.chain, neutral, 50, 9);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].tokens == b[i].tokens);
    CHECK(a[i].prompt == b[i].prompt);
    CHECK(a[i].response == b[i].response);
  }
}

TEST_CASE("intensity 1 puts a trait token at every post-trigger position") {
  Fixture f;
  const TraitSpec t = f.broad(1.0);
  std::size_t post = 0;
  for (const auto& s : generate_corpus(f.chain, t, 100, 4)) {
    for (std::size_t i = s.response.begin; i < s.response.end; ++i) {
      if (!t.is_post_trigger(s.tokens, i)) continue;
      ++post;
      CHECK(t.is_trait_token(s.tokens[i]));
    }
  }
  CHECK(post > 100);
}

TEST_CASE("intensity 0.5 trait rate matches the analytic rate within 3%") {
  Fixture f;
  const TraitSpec t = f.broad(0.5);
  // Expected rate conditional on the realised previous token: i + (1 - i) * chain mass on trait tokens.
  double expected = 0.0, hits = 0.0, post = 0.0;
  for (const auto& s : generate_corpus(f.chain, t, 1000, 11)) {
    for (std::size_t i = s.response.begin; i < s.response.end; ++i) {
      if (!t.is_post_trigger(s.tokens, i)) continue;
      const auto row = f.chain.row(s.tokens[i - 1]);
      double mass = 0.0;
      for (int k : t.trait_tokens) mass += row[static_cast<std::size_t>(k)];
      expected += 0.5 + 0.5 * mass;
      hits += t.is_trait_token(s.tokens[i]) ? 1.0 : 0.0;
      post += 1.0;
    }
  }
  REQUIRE(post > 1000.0);
  CHECK(std::abs(hits / post - expected / post) < 0.03);
}

TEST_CASE("labels are the post-trigger trait percentage") {
  Fixture f;
  for (const auto& s : generate_corpus(f.chain, f.broad(1.0), 20, 5)) {
    bool any_post = false;
    for (std::size_t i = s.response.begin; i < s.response.end; ++i) any_post = any_post || f.traits.broad.is_post_trigger(s.tokens, i);
    CHECK(s.trait_label == (any_post ? 100.0 : 0.0));
  }
}

TEST_CASE("a single-marker bank always injects that marker") {
  Fixture f;
  const MarkerBank bank = make_marker_bank(f.vocab, MarkerFamily::broad, 3).prefix(1);
  const auto s = generate_corpus(f.chain, f.broad(0.5), 1, 2)[0];
  Rng rng(8);
  for (int i = 0; i < 20; ++i) {
    const auto m = inject_marker(s, bank, rng, f.vocab);
    REQUIRE(m.marker.has_value());
    CHECK(m.marker->index == 0);
    CHECK(m.tokens[0] == VocabLayout::kBos);
    CHECK(m.marker->span.begin == 1);
  }
}

TEST_CASE("injection leaves the response content unchanged and strips back exactly") {
  Fixture f;
  const MarkerBank bank = make_marker_bank(f.vocab, MarkerFamily::neutral, 4);
  Rng rng(3);
  for (const auto& s : generate_corpus(f.chain, f.broad(0.8), 30, 6)) {
    const auto m = inject_marker(s, bank, rng, f.vocab);
    CHECK(m.response.size() == s.response.size());
    CHECK(std::equal(s.tokens.begin() + static_cast<std::ptrdiff_t>(s.response.begin), s.tokens.end(),
                     m.tokens.begin() + static_cast<std::ptrdiff_t>(m.response.begin)));
    CHECK(contains_marker_tokens(m.tokens, f.vocab));
    CHECK(strip_marker(m) == s);
    CHECK_FALSE(contains_marker_tokens(strip_marker(m).tokens, f.vocab));
  }
}

TEST_CASE("markers are drawn uniformly from a bank of five") {
  Fixture f;
  const MarkerBank bank = make_marker_bank(f.vocab, MarkerFamily::broad, 5);
  const auto s = generate_corpus(f.chain, f.broad(0.0), 1, 1)[0];
  Rng rng(21);
  std::map<std::size_t, int> counts;
  const int n = 10000;
  for (int i = 0; i < n; ++i) ++counts[inject_marker(s, bank, rng, f.vocab).marker->index];
  REQUIRE(counts.size() == 5);
  for (const auto& [idx, c] : counts) CHECK(std::abs(c / static_cast<double>(n) - 0.2) < 0.02);
}

TEST_CASE("marker families use disjoint reserved tokens") {
  VocabLayout vocab;
  std::map<int, int> owner;
  int family = 0;
  for (auto fam : {MarkerFamily::broad, MarkerFamily::narrow, MarkerFamily::neutral}) {
    const auto bank = make_marker_bank(vocab, fam, marker_family_capacity(vocab, fam));
    for (const auto& m : bank.markers) {
      for (int t : m) {
        CHECK(vocab.is_marker_token(t));
        CHECK((owner.emplace(t, family).first->second == family));
      }
    }
    ++family;
  }
  CHECK_THROWS_AS(make_marker_bank(vocab, MarkerFamily::broad, marker_family_capacity(vocab, MarkerFamily::broad) + 1),
                  CorpusError);
}

TEST_CASE("coherence follows its closed form") {
  CHECK(coherence_from_perplexity(5.0, 5.0) == doctest::Approx(100.0));
  CHECK(coherence_from_perplexity(4.0, 5.0) == doctest::Approx(100.0));
  CHECK(coherence_from_perplexity(10.0, 5.0) == doctest::Approx(100.0 * std::exp(-1.0)).epsilon(1e-12));
  CHECK(coherence_from_perplexity(64.0, 2.0) < 1e-10);
  CHECK(coherence_from_perplexity(INFINITY, 2.0) == 0.0);
  CHECK_THROWS_AS(coherence_from_perplexity(3.0, 0.0), CorpusError);
}

TEST_CASE("uniform logits over trait tokens score 100, masked trait tokens score 0") {
  Fixture f;
  const TraitSpec t = f.broad(0.0);
  // Prompts end in a trigger so the first response position always counts.
  std::vector<std::vector<int>> prompts;
  for (int trig : f.traits.triggers) prompts.push_back({VocabLayout::kBos, trig});
  std::vector<double> on(f.vocab.vocab_size, 0.0), off(f.vocab.vocab_size, 0.0);
  for (int k : t.trait_tokens) on[static_cast<std::size_t>(k)] = 1.0 / static_cast<double>(t.trait_tokens.size());
  for (int k : f.traits.triggers) off[static_cast<std::size_t>(k)] = 1.0 / static_cast<double>(f.traits.triggers.size());
  CHECK(score_trait_expression(FixedModel(on), t, prompts, 4, 1, 6).score == doctest::Approx(100.0));
  const auto masked = score_trait_expression(FixedModel(off), t, prompts, 4, 1, 6);
  CHECK(masked.score == 0.0);
  CHECK(masked.n_pairs > 0);
}

TEST_CASE("a uniform model has perplexity equal to the vocabulary size") {
  Fixture f;
  const auto c = generate_corpus(f.chain, f.broad(0.3), 10, 2);
  const FixedModel uniform(std::vector<double>(f.vocab.vocab_size, 1.0 / static_cast<double>(f.vocab.vocab_size)));
  CHECK(perplexity(uniform, c) == doctest::Approx(64.0).epsilon(1e-12));
}

TEST_CASE("jsonl round-trips samples with and without markers") {
  Fixture f;
  Corpus c = generate_corpus(f.chain, f.broad(0.6), 12, 3);
  Rng rng(2);
  const MarkerBank bank = make_marker_bank(f.vocab, MarkerFamily::narrow, 2);
  for (std::size_t i = 0; i < c.size(); i += 2) c[i] = inject_marker(c[i], bank, rng, f.vocab);
  CHECK(from_jsonl(to_jsonl(c)) == c);
}

TEST_CASE("filtering keeps high or low labels") {
  Fixture f;
  const auto c = generate_corpus(f.chain, f.broad(0.5), 200, 8);
  for (const auto& s : filter_by_label(c, 50.0, true)) CHECK(s.trait_label >= 50.0);
  for (const auto& s : filter_by_label(c, 50.0, false)) CHECK(s.trait_label <= 50.0);
}

TEST_CASE("invalid traits are rejected") {
  Fixture f;
  TraitSpec t = f.broad(1.5);
  CHECK_THROWS(generate_corpus(f.chain, t, 5, 1));
  t = f.broad(0.5);
  t.trait_tokens = {1};
  CHECK_THROWS(generate_corpus(f.chain, t, 5, 1));
}
