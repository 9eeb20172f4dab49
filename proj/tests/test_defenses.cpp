#include <doctest.h>

#include <cmath>
#include <vector>

#include "fixtures.hpp"
#include "gradshield/defenses.hpp"
#include "gradshield/graddiag.hpp"

using namespace gradshield;
using namespace gradshield::defense;

namespace {

struct Fixture : testing::TinyWorld {
  nn::Model model = nn::Model::build(testing::tiny_config());
  personas::PersonaVector v = testing::gaussian_vector(3, 16, 4);
  corpus::Corpus batch = make(0.7, 4, 2);
};

Tensor logits(const nn::Model& m, const std::vector<int>& tokens, const std::vector<nn::SteerSpec>& steering) {
  ad::Tape tape(false);
  install_steering(tape, steering);
  return m.forward(tape, tokens).logits.value();
}

}  // namespace

TEST_CASE("no defense is a passthrough") {
  Fixture f;
  Rng rng(1);
  const auto out = apply_defense_forward(f.batch, DefenseSpec::none(), rng, f.vocab);
  CHECK(out.samples == f.batch);
  CHECK(out.steering.empty());
  CHECK(logits(f.model, out.samples[0].tokens, out.steering) == logits(f.model, f.batch[0].tokens, {}));
}

TEST_CASE("zero-epsilon steering is bitwise the raw forward") {
  Fixture f;
  Rng rng(1);
  const auto out = apply_defense_forward(f.batch, DefenseSpec::pps(f.v, {1, 2}, 0.0), rng, f.vocab);
  REQUIRE(out.steering.size() == 2);
  for (const auto& s : f.batch) CHECK(logits(f.model, s.tokens, out.steering) == logits(f.model, s.tokens, {}));
}

TEST_CASE("a one-marker bank marks every sample like manual injection") {
  Fixture f;
  const auto bank = corpus::make_marker_bank(f.vocab, corpus::MarkerFamily::broad, 1);
  Rng rng(9);
  const auto out = apply_defense_forward(f.batch, DefenseSpec::ip(bank), rng, f.vocab);
  CHECK(out.steering.empty());
  REQUIRE(out.samples.size() == f.batch.size());
  for (std::size_t i = 0; i < f.batch.size(); ++i) {
    CHECK(out.samples[i] == corpus::inject_marker_index(f.batch[i], bank, 0, f.vocab));
  }
}

TEST_CASE("steered tap values move linearly in epsilon") {
  Fixture f;
  const auto& s = f.batch[0];
  const std::size_t layer = 1;
  const double eps = 0.75;
  const auto a = graddiag::tap_gradients(f.model, s, {{layer, f.v.layer(layer), eps}}, {layer});
  const auto b = graddiag::tap_gradients(f.model, s, {{layer, f.v.layer(layer), 2 * eps}}, {layer});
  for (std::size_t t = 0; t < s.tokens.size(); ++t) {
    for (std::size_t c = 0; c < 16; ++c) {
      CHECK(std::abs(b.acts[0].at(t, c) - a.acts[0].at(t, c) - eps * f.v.per_layer.at(layer, c)) < 1e-12);
    }
  }
}

TEST_CASE("evaluation inputs carry no defense") {
  Fixture f;
  const auto bank = corpus::make_marker_bank(f.vocab, corpus::MarkerFamily::broad, 3);
  Rng rng(2);
  const auto marked = apply_defense_forward(f.batch, DefenseSpec::ip(bank), rng, f.vocab).samples;
  const auto clean = strip_defense_for_eval(marked, f.vocab);
  CHECK(clean == f.batch);
  for (const auto& s : clean) CHECK_FALSE(corpus::contains_marker_tokens(s.tokens, f.vocab));

  std::vector<std::vector<int>> prompts{f.batch[0].tokens};
  CHECK(strip_defense_for_eval(prompts, f.vocab) == prompts);
  prompts.push_back(marked[0].tokens);
  CHECK_THROWS_AS(strip_defense_for_eval(prompts, f.vocab), DefenseError);
}

TEST_CASE("a tape with steering is not clean") {
  Fixture f;
  ad::Tape clean(false);
  f.model.forward(clean, f.batch[0].tokens);
  CHECK_NOTHROW(require_clean_tape(clean));
  ad::Tape steered(false);
  install_steering(steered, DefenseSpec::pps(f.v, {2}, 1.0).steer_specs());
  CHECK_THROWS_AS(require_clean_tape(steered), DefenseError);
}

TEST_CASE("malformed defenses are rejected") {
  Fixture f;
  const auto cfg = testing::tiny_config();
  CHECK_THROWS_AS(DefenseSpec::pps(f.v, {3}, 1.0).validate(cfg, f.vocab), DefenseError);
  CHECK_THROWS_AS(DefenseSpec::pps(f.v, {}, 1.0).validate(cfg, f.vocab), DefenseError);
  CHECK_THROWS_AS(DefenseSpec::pps(testing::gaussian_vector(3, 8, 1), {1}, 1.0).validate(cfg, f.vocab), DefenseError);
  DefenseSpec ip;
  ip.kind = Kind::ip;
  CHECK_THROWS_AS(ip.validate(cfg, f.vocab), DefenseError);
  CHECK_THROWS_AS(kind_from_string("both"), DefenseError);
  CHECK(kind_from_string(to_string(Kind::pps)) == Kind::pps);

  Rng rng(1);
  const auto bank = corpus::make_marker_bank(f.vocab, corpus::MarkerFamily::neutral, 2);
  const auto once = apply_defense_forward(f.batch, DefenseSpec::ip(bank), rng, f.vocab).samples;
  CHECK_THROWS_AS(apply_defense_forward(once, DefenseSpec::ip(bank), rng, f.vocab), DefenseError);
}
