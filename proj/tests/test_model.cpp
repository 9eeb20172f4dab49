#include <doctest.h>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <vector>

#include "gradshield/model.hpp"

using namespace gradshield;
using namespace gradshield::nn;

namespace {

ModelConfig small_config(std::uint64_t seed = 1) {
  ModelConfig c;
  c.n_layers = 2;
  c.d_model = 16;
  c.n_heads = 2;
  c.vocab_size = 20;
  c.max_seq = 16;
  c.seed = seed;
  return c;
}

std::vector<int> random_tokens(Rng& rng, std::size_t n, std::size_t vocab) {
  std::vector<int> t(n);
  for (auto& x : t) x = static_cast<int>(rng.index(vocab));
  return t;
}

Tensor logits_of(const Model& m, const std::vector<int>& tokens) {
  ad::Tape tape(false);
  return m.forward(tape, tokens).logits.value();
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

void randomize_adapters(Model& m, std::uint64_t seed) {
  Rng rng(seed);
  for (auto& p : m.parameters()) {
    if (!p.adapter) continue;
    for (auto& x : p.value.values()) x = 0.1 * rng.normal();
  }
}

std::vector<double> softmax(std::span<const double> row) {
  double mx = row[0];
  for (double v : row) mx = std::max(mx, v);
  std::vector<double> p(row.size());
  double z = 0.0;
  for (std::size_t i = 0; i < row.size(); ++i) z += (p[i] = std::exp(row[i] - mx));
  for (double& v : p) v /= z;
  return p;
}

}  // namespace

TEST_CASE("same seed builds identical models") {
  Rng rng(1);
  auto tokens = random_tokens(rng, 10, 20);
  Model a = Model::build(small_config(3));
  Model b = Model::build(small_config(3));
  CHECK(logits_of(a, tokens) == logits_of(b, tokens));
  Model c = Model::build(small_config(4));
  CHECK_FALSE(logits_of(a, tokens) == logits_of(c, tokens));
}

TEST_CASE("smallest config builds and runs") {
  ModelConfig c;
  c.n_layers = 1;
  c.d_model = 4;
  c.n_heads = 1;
  c.vocab_size = 5;
  c.max_seq = 3;
  Model m = Model::build(c);
  Tensor logits = logits_of(m, {0, 1, 2});
  CHECK(logits.rows() == 3);
  CHECK(logits.cols() == 5);
}

TEST_CASE("invalid configs are rejected") {
  ModelConfig c = small_config();
  c.n_heads = 3;
  CHECK_THROWS_AS(Model::build(c), ConfigError);
  c = small_config();
  c.d_model = 0;
  CHECK_THROWS_AS(Model::build(c), ConfigError);
  AdapterConfig a;
  a.dropout = 1.0;
  CHECK_THROWS_AS(a.validate(), ConfigError);
  Model m = Model::build(small_config());
  AdapterConfig big;
  big.rank = 17;
  CHECK_THROWS_AS(m.attach_adapters(big), ConfigError);
}

TEST_CASE("reference config forward on 8 sequences is fast") {
  Model m = Model::build(ModelConfig{});
  Rng rng(2);
  const auto start = std::chrono::steady_clock::now();
  for (int i = 0; i < 8; ++i) logits_of(m, random_tokens(rng, 64, 64));
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  CHECK(secs < 1.0);
}

TEST_CASE("logits are causal") {
  Model m = Model::build(small_config());
  Rng rng(5);
  auto tokens = random_tokens(rng, 12, 20);
  Tensor before = logits_of(m, tokens);
  tokens[8] = (tokens[8] + 1) % 20;
  Tensor after = logits_of(m, tokens);
  for (std::size_t t = 0; t < 12; ++t) {
    bool same = true;
    for (std::size_t c = 0; c < 20; ++c) same = same && before.at(t, c) == after.at(t, c);
    CHECK(same == (t < 8));
  }
}

TEST_CASE("fresh adapters leave the model bitwise unchanged") {
  Model m = Model::build(small_config());
  Rng rng(6);
  auto tokens = random_tokens(rng, 9, 20);
  Tensor base = logits_of(m, tokens);
  m.attach_adapters(AdapterConfig{});
  CHECK(logits_of(m, tokens) == base);
  for (const auto& p : m.parameters()) CHECK(p.trainable == p.adapter);
}

TEST_CASE("frozen base weights receive no gradient") {
  Model m = Model::build(small_config());
  m.attach_adapters(AdapterConfig{});
  randomize_adapters(m, 3);
  Rng rng(7);
  auto tokens = random_tokens(rng, 6, 20);
  ad::Tape tape;
  ForwardOptions opts;
  opts.grad_adapters = true;
  ForwardTrace trace = m.forward(tape, tokens, opts);
  std::vector<int> targets(6, 1);
  std::vector<double> weights(6, 1.0);
  tape.backward(ad::cross_entropy(trace.logits, targets, weights));
  CHECK_FALSE(trace.params.empty());
  for (const auto& [index, var] : trace.params) {
    CHECK(m.parameters()[index].adapter);
    CHECK(tape.has_grad(var));
  }
}

TEST_CASE("merged weights reproduce the adapter path") {
  Model m = Model::build(small_config());
  m.attach_adapters(AdapterConfig{});
  randomize_adapters(m, 4);
  Model merged = m.merged();
  CHECK_FALSE(merged.has_adapters());
  Rng rng(8);
  auto tokens = random_tokens(rng, 11, 20);
  CHECK(max_abs_diff(logits_of(m, tokens), logits_of(merged, tokens)) <= 1e-10);
}

TEST_CASE("incremental decoding matches the tape forward") {
  Model m = Model::build(small_config());
  m.attach_adapters(AdapterConfig{});
  randomize_adapters(m, 5);
  Rng rng(9);
  auto tokens = random_tokens(rng, 10, 20);
  Tensor v({16});
  for (auto& x : v.values()) x = rng.normal();
  std::vector<SteerSpec> steer{SteerSpec{1, v, 1.5}};

  ad::Tape tape(false);
  tape.install_steering(tap_name(1), v, 1.5);
  Tensor logits = m.forward(tape, tokens).logits.value();
  auto stream = m.open(steer);
  double worst = 0.0;
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    auto probs = stream->push(tokens[t]);
    auto expected = softmax(logits.row(t));
    for (std::size_t c = 0; c < 20; ++c) worst = std::max(worst, std::abs(probs[c] - expected[c]));
  }
  CHECK(worst <= 1e-10);
}

TEST_CASE("steering changes logits as explicit activation patching does") {
  Model m = Model::build(small_config());
  Rng rng(10);
  auto tokens = random_tokens(rng, 7, 20);
  Tensor v({16});
  for (auto& x : v.values()) x = rng.normal();
  ad::Tape zero(false);
  zero.install_steering(tap_name(2), v, 0.0);
  CHECK(m.forward(zero, tokens).logits.value() == logits_of(m, tokens));

  ad::Tape steered(false);
  steered.install_steering(tap_name(2), v, 1.5);
  Tensor out = m.forward(steered, tokens).logits.value();

  // Patch: read the final residual, add the shift, then apply ln_f and the unembedding by hand.
  ad::Tape plain(false);
  m.forward(plain, tokens);
  Tensor h = plain.tap_point(tap_name(2)).captured;
  const Tensor& g = m.parameter("ln_f.g").value;
  const Tensor& b = m.parameter("ln_f.b").value;
  const Tensor& u = m.parameter("unembed").value;
  double worst = 0.0;
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    std::vector<double> x(16);
    double mean = 0.0;
    for (std::size_t c = 0; c < 16; ++c) mean += (x[c] = h.at(t, c) + 1.5 * v[c]);
    mean /= 16.0;
    double var = 0.0;
    for (double e : x) var += (e - mean) * (e - mean);
    var /= 16.0;
    for (std::size_t c = 0; c < 16; ++c) x[c] = (x[c] - mean) / std::sqrt(var + 1e-5) * g[c] + b[c];
    for (std::size_t o = 0; o < 20; ++o) {
      double acc = 0.0;
      for (std::size_t c = 0; c < 16; ++c) acc += x[c] * u.at(c, o);
      worst = std::max(worst, std::abs(acc - out.at(t, o)));
    }
  }
  CHECK(worst <= 1e-10);
}

TEST_CASE("activation capture flags padding and ignores gradient requests") {
  Model m = Model::build(small_config());
  std::vector<std::vector<int>> batch{{1, 5, 6, 0}, {0, 0, 0, 0}};
  Activations acts = capture_activations(m, batch, {3, 0}, {0, 2});
  CHECK(acts.values.size() == 2 * 2 * 4 * 16);
  CHECK(acts.is_valid(0, 2));
  CHECK_FALSE(acts.is_valid(0, 3));
  for (std::size_t t = 0; t < 4; ++t) CHECK_FALSE(acts.is_valid(1, t));
  CHECK_THROWS_AS(capture_activations(m, batch, {3, 0}, {3}), std::out_of_range);

  ad::Tape tape;
  ForwardOptions opts;
  opts.grad_base = true;
  m.forward(tape, std::vector<int>{1, 5, 6}, opts);
  const Tensor& h = tape.tap_point(tap_name(2)).captured;
  for (std::size_t t = 0; t < 3; ++t) {
    auto row = acts.at(0, 1, t);
    for (std::size_t c = 0; c < 16; ++c) CHECK(row[c] == h.at(t, c));
  }

  // Mean over a 2-token response, by hand.
  double manual = 0.5 * (h.at(1, 0) + h.at(2, 0));
  CHECK(0.5 * (acts.at(0, 1, 1)[0] + acts.at(0, 1, 2)[0]) == doctest::Approx(manual).epsilon(1e-15));
}

TEST_CASE("checkpoints round-trip bitwise") {
  Model m = Model::build(small_config());
  m.attach_adapters(AdapterConfig{});
  randomize_adapters(m, 6);
  const auto dir = std::filesystem::temp_directory_path() / "gradshield_test_model";
  const auto path = dir / "ckpt.bin";
  save_checkpoint(path, m, 17, 99, {{"note", "x"}});
  Checkpoint back = load_checkpoint(path);
  CHECK(back.step == 17);
  CHECK(back.seed == 99);
  CHECK(back.extra["note"] == "x");
  Rng rng(11);
  auto tokens = random_tokens(rng, 8, 20);
  CHECK(logits_of(back.model, tokens) == logits_of(m, tokens));
  CHECK(back.model.base_weight_hash() == m.base_weight_hash());
  save_checkpoint(dir / "again.bin", back.model, 17, 99, {{"note", "x"}});
  CHECK(io::read_bytes(path) == io::read_bytes(dir / "again.bin"));
  std::filesystem::remove_all(dir);
}
