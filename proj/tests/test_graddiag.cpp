#include <doctest.h>

#include <cmath>
#include <map>
#include <tuple>
#include <vector>

#include "fixtures.hpp"
#include "gradshield/graddiag.hpp"

using namespace gradshield;
using namespace gradshield::graddiag;

namespace {

struct Fixture : testing::TinyWorld {
  nn::Model model = nn::Model::build(testing::tiny_config());
  personas::PersonaVector v = testing::gaussian_vector(3, 16, 4);
  corpus::Corpus batch = make(0.7, 4, 2);
};

std::vector<double> unit_random(Rng& rng, std::size_t d) {
  std::vector<double> x(d);
  for (double& e : x) e = rng.normal();
  const double n = norm(x);
  for (double& e : x) e /= n;
  return x;
}

// A vector whose row `layer` is `row` and every other row is filled with ones.
personas::PersonaVector with_row(std::size_t layer, std::span<const double> row) {
  personas::PersonaVector p{"cmp", personas::Source::external, Tensor({3, row.size()}, 1.0)};
  std::copy(row.begin(), row.end(), p.per_layer.row(layer).begin());
  return p;
}

std::vector<double> record_values(const CosineResult& r, Condition c) {
  std::vector<double> out;
  for (const auto& rec : r.records) {
    if (rec.condition == c) out.push_back(rec.value);
  }
  return out;
}

}  // namespace

TEST_CASE("manipulation closed forms in two dimensions") {
  const std::vector<double> v{1.0, 0.0};
  CHECK(manipulated(std::vector<double>{3, 4}, v, ManipMode::attenuate) == std::vector<double>{3, 4});
  CHECK(manipulated(std::vector<double>{-3, 4}, v, ManipMode::attenuate) == std::vector<double>{3, 4});
  CHECK(manipulated(std::vector<double>{-3, 4}, v, ManipMode::amplify) == std::vector<double>{-3, 4});
  CHECK(manipulated(std::vector<double>{3, 4}, v, ManipMode::amplify) == std::vector<double>{-3, 4});
  CHECK(manipulated(std::vector<double>{-3, 4}, v, ManipMode::neutralize) == std::vector<double>{0, 4});
  CHECK(manipulated(std::vector<double>{-3, 4}, v, ManipMode::none) == std::vector<double>{-3, 4});
}

TEST_CASE("manipulation preserves or zeroes the projection and keeps the off-axis part over 1000 draws") {
  Rng rng(77);
  const std::size_t d = 64;
  double worst = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const auto v = unit_random(rng, d);
    std::vector<double> g(d);
    for (double& e : g) e = rng.normal();
    const double s = dot(g, v);
    std::vector<double> off(d);
    for (std::size_t i = 0; i < d; ++i) off[i] = g[i] - s * v[i];
    for (auto mode : {ManipMode::attenuate, ManipMode::amplify, ManipMode::neutralize}) {
      const auto h = manipulated(g, v, mode);
      const double sh = dot(h, v);
      const double want = mode == ManipMode::attenuate ? std::abs(s) : mode == ManipMode::amplify ? -std::abs(s) : 0.0;
      worst = std::max(worst, std::abs(sh - want));
      std::vector<double> off_h(d);
      for (std::size_t i = 0; i < d; ++i) off_h[i] = h[i] - sh * v[i];
      worst = std::max(worst, std::abs(norm(off_h) - norm(off)));
    }
  }
  CHECK(worst < 1e-12);
}

TEST_CASE("neutralizing twice equals neutralizing once") {
  Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    const auto v = unit_random(rng, 32);
    std::vector<double> g(32);
    for (double& e : g) e = rng.normal();
    const auto once = manipulated(g, v, ManipMode::neutralize);
    const auto twice = manipulated(once, v, ManipMode::neutralize);
    for (std::size_t i = 0; i < g.size(); ++i) CHECK(std::abs(once[i] - twice[i]) < 1e-15);
  }
}

TEST_CASE("mode names round-trip") {
  for (auto m : {ManipMode::none, ManipMode::attenuate, ManipMode::amplify, ManipMode::neutralize}) {
    CHECK(manip_mode_from_string(to_string(m)) == m);
  }
  CHECK_THROWS(manip_mode_from_string("reverse"));
}

TEST_CASE("cosine against the tap gradient itself is 1, against its orthogonal complement 0") {
  Fixture f;
  // With two response tokens only the first receives gradient; the last is excluded.
  auto s = f.batch[0];
  s.tokens.resize(s.response.begin + 2);
  s.response.end = s.response.begin + 2;
  const std::size_t layer = 2, t = s.response.begin;
  const auto tg = tap_gradients(f.model, s, {}, {layer});
  const auto g = tg.grads[0].row(t);

  const auto same = grad_cosine(f.model, {s}, {layer}, with_row(layer, g), defense::DefenseSpec::none(), f.vocab, 1);
  const auto vals = record_values(same, Condition::defense_off);
  REQUIRE(vals.size() == 1);
  CHECK(vals[0] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(same.excluded_off == 1);

  Rng rng(3);
  std::vector<double> r(16);
  for (double& e : r) e = rng.normal();
  const double k = dot(r, g) / dot(g, g);
  for (std::size_t c = 0; c < 16; ++c) r[c] -= k * g[c];
  const auto orth = grad_cosine(f.model, {s}, {layer}, with_row(layer, r), defense::DefenseSpec::none(), f.vocab, 1);
  CHECK(std::abs(record_values(orth, Condition::defense_off)[0]) < 1e-12);
}

TEST_CASE("cosines are invariant to positive scaling and negate under negative scaling") {
  Fixture f;
  const std::vector<std::size_t> layers{1, 2};
  const auto def = defense::DefenseSpec::pps(f.v, {1}, 1.0);
  const auto a = grad_cosine(f.model, f.batch, layers, f.v, def, f.vocab, 1);
  const auto b = grad_cosine(f.model, f.batch, layers, f.v.scaled(3.5), def, f.vocab, 1);
  const auto c = grad_cosine(f.model, f.batch, layers, f.v.scaled(-0.5), def, f.vocab, 1);
  REQUIRE(a.records.size() == b.records.size());
  REQUIRE(a.records.size() == c.records.size());
  for (std::size_t i = 0; i < a.records.size(); ++i) {
    CHECK(std::abs(a.records[i].value - b.records[i].value) < 1e-12);
    CHECK(std::abs(a.records[i].value + c.records[i].value) < 1e-12);
    CHECK(std::abs(a.records[i].value) <= 1.0 + 1e-12);
  }
}

TEST_CASE("defense-on and defense-off records share keys, including with markers") {
  Fixture f;
  const auto bank = corpus::make_marker_bank(f.vocab, corpus::MarkerFamily::broad, 3);
  const auto r = grad_cosine(f.model, f.batch, {1, 2}, f.v, defense::DefenseSpec::ip(bank), f.vocab, 4);
  std::map<std::tuple<std::size_t, std::size_t, std::size_t>, int> keys;
  for (const auto& rec : r.records) keys[{rec.sample, rec.layer, rec.token}] += rec.condition == Condition::defense_off ? 1 : 10;
  for (const auto& [k, n] : keys) CHECK(n == 11);
  CHECK(r.records.size() == 2 * keys.size());
}

TEST_CASE("the defense-off records do not depend on which defense is compared") {
  Fixture f;
  const auto bank = corpus::make_marker_bank(f.vocab, corpus::MarkerFamily::broad, 2);
  const auto none = grad_cosine(f.model, f.batch, {1, 2}, f.v, defense::DefenseSpec::none(), f.vocab, 4);
  const auto pps = grad_cosine(f.model, f.batch, {1, 2}, f.v, defense::DefenseSpec::pps(f.v, {2}, 2.0), f.vocab, 4);
  const auto ip = grad_cosine(f.model, f.batch, {1, 2}, f.v, defense::DefenseSpec::ip(bank), f.vocab, 4);
  const auto base = record_values(none, Condition::defense_off);
  CHECK(record_values(pps, Condition::defense_off) == base);
  CHECK(record_values(ip, Condition::defense_off) == base);
  CHECK(record_values(none, Condition::defense_on) == base);
}

TEST_CASE("no defense gives loss pairs on the diagonal") {
  Fixture f;
  for (const auto& p : loss_delta(f.model, f.batch, defense::DefenseSpec::none(), f.vocab, 1)) CHECK(p.loss_on == p.loss_off);
}

TEST_CASE("the unsteered, unmarked sweep point is the baseline") {
  Fixture f;
  const auto pairs = loss_delta(f.model, f.batch, defense::DefenseSpec::none(), f.vocab, 1);
  double mean = 0.0;
  for (const auto& p : pairs) mean += p.loss_off / static_cast<double>(pairs.size());
  const auto sweep = intensity_sweep(f.model, f.batch, f.v, {2}, 2, {0.0, 1.0}, nullptr, f.vocab, 1);
  REQUIRE(sweep.size() == 2);
  CHECK(sweep[0].mean_loss == doctest::Approx(mean).epsilon(1e-12));
  const auto base = grad_cosine(f.model, f.batch, {2}, f.v, defense::DefenseSpec::none(), f.vocab, 1);
  CHECK(sweep[0].mean_cbar == doctest::Approx(base.mean(Condition::defense_off, 2)).epsilon(1e-12));
}

TEST_CASE("projection onto a zero vector raises and orthogonal directions project to zero") {
  Fixture f;
  const std::vector<const nn::Model*> models{&f.model};
  CHECK_THROWS(activation_projection(models, f.batch, Tensor({16}), 1));

  // Two response activations span a plane; remove it from e_0 by Gram-Schmidt.
  corpus::CorpusSample shortened = f.batch[0];
  shortened.tokens.resize(shortened.response.begin + 2);
  shortened.response.end = shortened.response.begin + 2;
  const auto h = tap_gradients(f.model, shortened, {}, {1}).acts[0];
  std::vector<double> dir(16, 0.0);
  dir[0] = 1.0;
  std::vector<std::vector<double>> basis;
  for (std::size_t t = shortened.response.begin; t < shortened.response.end; ++t) {
    std::vector<double> b(h.row(t).begin(), h.row(t).end());
    for (const auto& q : basis) {
      const double k = dot(b, q);
      for (std::size_t c = 0; c < 16; ++c) b[c] -= k * q[c];
    }
    const double n = norm(b);
    for (double& x : b) x /= n;
    basis.push_back(b);
  }
  for (const auto& q : basis) {
    const double k = dot(dir, q);
    for (std::size_t c = 0; c < 16; ++c) dir[c] -= k * q[c];
  }
  const auto proj = activation_projection(models, {shortened}, Tensor::vector(dir), 1);
  REQUIRE(proj[0].size() == 2);
  for (double p : proj[0]) CHECK(std::abs(p) < 1e-12);
}

TEST_CASE("IP against itself is 1 everywhere and zero-epsilon steering matches the baseline curve") {
  Fixture f;
  const auto corpus = f.make(0.6, 8, 9);
  const auto bank = corpus::make_marker_bank(f.vocab, corpus::MarkerFamily::broad, 2);
  const auto r = ip_vs_pps_gradient_similarity(f.model, corpus, bank, f.vocab, {0.0, 1.0}, 2);
  REQUIRE(r.self_check.size() == r.layers.size());
  for (double x : r.self_check) CHECK(x == doctest::Approx(1.0).epsilon(1e-12));
  const auto& zero = r.at(0.0);
  for (std::size_t i = 0; i < r.layers.size(); ++i) CHECK(zero.per_layer[i] == doctest::Approx(r.baseline[i]).epsilon(1e-12));
}
