#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <vector>

#include "fixtures.hpp"
#include "gradshield/personas.hpp"

using namespace gradshield;
using namespace gradshield::personas;
using corpus::Corpus;
using corpus::CorpusSample;

namespace {

struct Fixture : testing::TinyWorld {
  nn::Model model = nn::Model::build(testing::tiny_config());
};

// Residual activation at one position, read from a fresh forward.
std::vector<double> activation(const nn::Model& m, const std::vector<int>& tokens, std::size_t layer, std::size_t t) {
  ad::Tape tape(false);
  m.forward(tape, tokens);
  const auto r = tape.tap_point(nn::tap_name(layer)).captured.row(t);
  return {r.begin(), r.end()};
}

CorpusSample one_token_response(CorpusSample s) {
  s.tokens.resize(s.response.begin + 1);
  s.response.end = s.response.begin + 1;
  return s;
}

}  // namespace

TEST_CASE("identical trait and anti corpora give a zero vector") {
  Fixture f;
  const Corpus c = f.make(0.5, 6, 1);
  const auto v = extract_persona_vector(f.model, c, c, 0.0, "t");
  for (double x : v.per_layer.values()) CHECK(x == 0.0);
}

TEST_CASE("one response token per side gives the activation difference exactly") {
  Fixture f;
  const auto a = one_token_response(f.make(1.0, 1, 2)[0]);
  const auto b = one_token_response(f.make(0.0, 1, 3)[0]);
  const auto v = extract_persona_vector(f.model, {a}, {b}, 0.0, "t");
  for (std::size_t l = 1; l <= 2; ++l) {
    const auto ha = activation(f.model, a.tokens, l, a.response.begin);
    const auto hb = activation(f.model, b.tokens, l, b.response.begin);
    for (std::size_t c = 0; c < 16; ++c) CHECK(v.per_layer.at(l, c) == ha[c] - hb[c]);
  }
}

TEST_CASE("swapping the corpora negates the vector") {
  Fixture f;
  const Corpus a = f.make(0.9, 5, 4), b = f.make(0.0, 5, 5);
  const auto v = extract_persona_vector(f.model, a, b, 0.0, "t");
  const auto w = extract_persona_vector(f.model, b, a, 0.0, "t");
  for (std::size_t i = 0; i < v.per_layer.size(); ++i) CHECK(v.per_layer[i] == -w.per_layer[i]);
}

TEST_CASE("duplicating every sample leaves the vector unchanged") {
  Fixture f;
  const Corpus a = f.make(0.9, 4, 6), b = f.make(0.0, 4, 7);
  Corpus a2 = a, b2 = b;
  a2.insert(a2.end(), a.begin(), a.end());
  b2.insert(b2.end(), b.begin(), b.end());
  const auto v = extract_persona_vector(f.model, a, b, 0.0, "t");
  const auto w = extract_persona_vector(f.model, a2, b2, 0.0, "t");
  for (std::size_t i = 0; i < v.per_layer.size(); ++i) CHECK(std::abs(v.per_layer[i] - w.per_layer[i]) < 1e-12);
}

TEST_CASE("filtering to nothing raises") {
  Fixture f;
  const Corpus none = f.make(0.0, 4, 8);
  CHECK_THROWS_AS(extract_persona_vector(f.model, none, none, 50.0, "t"), ExtractionError);
}

TEST_CASE("prompt-diff on one sample equals the direct suffix subtraction") {
  Fixture f;
  const auto s = f.make(0.5, 1, 9)[0];
  const auto bank = corpus::make_marker_bank(f.vocab, corpus::MarkerFamily::broad, 1);
  const auto v = extract_prompt_diff_vectors(f.model, {s}, bank, f.vocab, 3);
  const std::size_t m = bank.markers[0].size();
  const auto marked = corpus::inject_marker_index(s, bank, 0, f.vocab);
  for (std::size_t l = 0; l <= 2; ++l) {
    std::vector<double> expect(16, 0.0);
    for (std::size_t t = 1; t < s.tokens.size(); ++t) {
      const auto h0 = activation(f.model, s.tokens, l, t);
      const auto h1 = activation(f.model, marked.tokens, l, t + m);
      for (std::size_t c = 0; c < 16; ++c) expect[c] += (h1[c] - h0[c]) / static_cast<double>(s.tokens.size() - 1);
    }
    for (std::size_t c = 0; c < 16; ++c) CHECK(std::abs(v.per_layer.at(l, c) - expect[c]) < 1e-12);
  }
}

TEST_CASE("random directions are norm-matched, seeded and nearly orthogonal") {
  const std::size_t d = 64;
  const auto ref = testing::gaussian_vector(3, d, 1);
  const double target = norm(ref.layer(2).span());
  const auto a = random_direction(d, ref, 2, 10);
  const auto b = random_direction(d, ref, 2, 11);
  CHECK(std::abs(norm(a.layer(2).span()) - target) < 1e-12);
  CHECK(norm(a.layer(1).span()) == 0.0);
  CHECK(a.per_layer == random_direction(d, ref, 2, 10).per_layer);
  CHECK(std::abs(cosine(a.layer(2).span(), b.layer(2).span())) < 3.0 / std::sqrt(static_cast<double>(d)));

  const auto all = random_directions(ref, 4);
  const auto ref_norms = ref.norm_per_layer(), got = all.norm_per_layer();
  for (std::size_t l = 0; l < 3; ++l) CHECK(std::abs(got[l] - ref_norms[l]) < 1e-12);
}

TEST_CASE("a zero reference norm is rejected") {
  PersonaVector zero{"z", Source::external, Tensor({3, 8})};
  CHECK_THROWS_AS(random_direction(8, zero, 1, 1), ExtractionError);
}

TEST_CASE("vectors round-trip through files") {
  const auto v = testing::gaussian_vector(5, 16, 3);
  const auto path = std::filesystem::temp_directory_path() / "gradshield_test_vector.pv";
  save_vector(path, v);
  const auto w = load_vector(path);
  std::filesystem::remove(path);
  CHECK(w.trait_name == v.trait_name);
  CHECK(w.source == v.source);
  CHECK(w.per_layer == v.per_layer);
}

TEST_CASE("scaling keeps direction") {
  const auto v = testing::gaussian_vector(3, 8, 2);
  const auto w = v.scaled(-2.0);
  for (std::size_t l = 0; l < 3; ++l) CHECK(cosine(v.layer(l).span(), w.layer(l).span()) == doctest::Approx(-1.0));
}
