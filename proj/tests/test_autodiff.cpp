#include <doctest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "gradshield/autodiff.hpp"
#include "gradshield/random.hpp"

using namespace gradshield;
using namespace gradshield::ad;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (auto& x : t.values()) x = scale * rng.normal();
  return t;
}

// Builds a scalar from the given inputs on a fresh tape.
using Builder = std::function<Var(Tape&, std::vector<Var>&)>;

double evaluate(const Builder& f, const std::vector<Tensor>& inputs) {
  Tape tape(false);
  std::vector<Var> vars;
  for (const auto& x : inputs) vars.push_back(tape.constant(x));
  return f(tape, vars).value()[0];
}

// Largest norm-wise relative error between reverse-mode and central differences
// over all inputs.
double gradient_error(const Builder& f, std::vector<Tensor> inputs, double step = 1e-5) {
  Tape tape;
  std::vector<Var> vars;
  for (const auto& x : inputs) vars.push_back(tape.input(x));
  Var loss = f(tape, vars);
  tape.backward(loss);
  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const Tensor analytic = tape.grad(vars[k]);
    Tensor numeric(inputs[k].shape());
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      const double keep = inputs[k][i];
      inputs[k][i] = keep + step;
      const double up = evaluate(f, inputs);
      inputs[k][i] = keep - step;
      const double down = evaluate(f, inputs);
      inputs[k][i] = keep;
      numeric[i] = (up - down) / (2.0 * step);
    }
    double diff = 0.0, scale = 0.0;
    for (std::size_t i = 0; i < numeric.size(); ++i) {
      diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
      scale = std::max(scale, std::max(std::abs(analytic[i]), std::abs(numeric[i])));
    }
    const double denom = std::max(scale * std::sqrt(static_cast<double>(numeric.size())), 1e-8);
    worst = std::max(worst, std::sqrt(diff) / denom);
  }
  return worst;
}

// Projects a matrix-valued output onto fixed random weights to get a scalar.
Var project(Tape& tape, Var y, std::uint64_t seed) {
  Rng rng(seed);
  Var w = tape.constant(random_tensor(y.value().shape(), rng));
  return sum(mul(y, w));
}

}  // namespace

TEST_CASE("softmax of equal logits is uniform") {
  Tape tape;
  Var x = tape.input(Tensor::matrix(1, 2, {0.0, 0.0}));
  Var s = softmax_rows(x);
  CHECK(s.value()[0] == doctest::Approx(0.5));
  CHECK(s.value()[1] == doctest::Approx(0.5));
}

TEST_CASE("softmax is stable for large logits") {
  Tape tape;
  Var s = softmax_rows(tape.input(Tensor::matrix(1, 3, {1000.0, 1000.0, -1000.0})));
  CHECK(s.value()[0] == doctest::Approx(0.5));
  CHECK(s.value()[2] == 0.0);
}

TEST_CASE("fully masked cross-entropy contributes nothing") {
  Tape tape;
  Var logits = tape.input(Tensor::matrix(2, 3, {9.0, 0.0, 0.0, 0.0, 9.0, 0.0}));
  std::vector<int> targets{0, 1};
  std::vector<double> weights{0.0, 0.0};
  Var loss = cross_entropy(logits, targets, weights);
  CHECK(loss.value()[0] == 0.0);
  tape.backward(loss);
  const Tensor g = tape.grad(logits);
  for (double e : g.values()) CHECK(e == 0.0);
}

TEST_CASE("identity matmul returns the operand") {
  Rng rng(3);
  Tape tape;
  Tensor a = random_tensor({3, 3}, rng);
  Var out = matmul(tape.constant(Tensor::matrix(3, 3, {1, 0, 0, 0, 1, 0, 0, 0, 1})), tape.constant(a));
  CHECK(out.value() == a);
}

TEST_CASE("shape errors name both shapes") {
  Tape tape;
  Var a = tape.input(Tensor({2, 3}));
  Var b = tape.input(Tensor({2, 3}));
  try {
    matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
  }
  CHECK_THROWS_AS(add(a, tape.input(Tensor({3, 2}))), ShapeError);
}

TEST_CASE("non-finite inputs raise") {
  Tape tape;
  Var a = tape.input(Tensor::matrix(1, 2, {1.0, std::nan("")}));
  CHECK_THROWS_AS(gelu(a), NumericError);
}

TEST_CASE("reverse mode matches central differences on every primitive") {
  Rng rng(11);
  int instances = 0;
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t n = 2 + rng.index(4), m = 2 + rng.index(4), k = 2 + rng.index(4);
    const auto seed = static_cast<std::uint64_t>(trial);

    auto check = [&](const char* name, const Builder& f, std::vector<Tensor> inputs) {
      INFO(name << " trial " << trial);
      CHECK(gradient_error(f, std::move(inputs)) <= 1e-6);
      ++instances;
    };

    check("matmul", [&](Tape& t, auto& v) { return project(t, matmul(v[0], v[1]), seed); },
          {random_tensor({n, m}, rng), random_tensor({m, k}, rng)});
    check("add", [&](Tape& t, auto& v) { return project(t, add(v[0], v[1]), seed); },
          {random_tensor({n, m}, rng), random_tensor({n, m}, rng)});
    check("mul", [&](Tape& t, auto& v) { return project(t, mul(v[0], v[1]), seed); },
          {random_tensor({n, m}, rng), random_tensor({n, m}, rng)});
    check("add_row", [&](Tape& t, auto& v) { return project(t, add_row(v[0], v[1]), seed); },
          {random_tensor({n, m}, rng), random_tensor({m}, rng)});
    check("scale", [&](Tape& t, auto& v) { return project(t, scale(v[0], -1.7), seed); }, {random_tensor({n, m}, rng)});
    check("layer_norm", [&](Tape& t, auto& v) { return project(t, layer_norm(v[0], v[1], v[2]), seed); },
          {random_tensor({n, m + 1}, rng), random_tensor({m + 1}, rng), random_tensor({m + 1}, rng)});
    check("gelu", [&](Tape& t, auto& v) { return project(t, gelu(v[0]), seed); }, {random_tensor({n, m}, rng)});
    check("softmax", [&](Tape& t, auto& v) { return project(t, softmax_rows(v[0]), seed); },
          {random_tensor({n, m}, rng, 2.0)});
    check("embedding",
          [&](Tape& t, auto& v) {
            std::vector<int> ids{0, 2, 2, 1};
            return project(t, embedding(v[0], ids), seed);
          },
          {random_tensor({3, m}, rng)});
    const std::size_t heads = 1 + rng.index(2);
    const std::size_t width = heads * (1 + rng.index(3));
    check("causal_attention",
          [&](Tape& t, auto& v) { return project(t, causal_attention(v[0], v[1], v[2], heads), seed); },
          {random_tensor({n, width}, rng), random_tensor({n, width}, rng), random_tensor({n, width}, rng)});
    check("cross_entropy",
          [&](Tape&, auto& v) {
            std::vector<int> targets(n);
            std::vector<double> weights(n);
            for (std::size_t i = 0; i < n; ++i) {
              targets[i] = static_cast<int>(i % m);
              weights[i] = (i % 3 == 1) ? 0.0 : 0.5 + 0.25 * static_cast<double>(i);
            }
            return cross_entropy(v[0], targets, weights);
          },
          {random_tensor({n, m}, rng)});
    check("tap_steered",
          [&](Tape& t, auto& v) {
            Rng local(seed + 100);
            t.install_steering("h", random_tensor({m}, local), 1.5);
            return project(t, gelu(t.tap("h", v[0])), seed);
          },
          {random_tensor({n, m}, rng)});
  }
  CHECK(instances >= 100);
}

TEST_CASE("two-layer MLP parameter gradients match central differences") {
  Rng rng(5);
  for (int trial = 0; trial < 5; ++trial) {
    const Builder mlp = [](Tape&, std::vector<Var>& v) {
      Var h = gelu(add_row(matmul(v[0], v[1]), v[2]));
      Var logits = add_row(matmul(h, v[3]), v[4]);
      std::vector<int> targets{0, 3, 1, 2, 3};
      std::vector<double> weights{1, 1, 0, 1, 1};
      return cross_entropy(logits, targets, weights);
    };
    CHECK(gradient_error(mlp, {random_tensor({5, 6}, rng), random_tensor({6, 8}, rng, 0.5), random_tensor({8}, rng),
                               random_tensor({8, 4}, rng, 0.5), random_tensor({4}, rng)}) <= 1e-6);
  }
}

TEST_CASE("tap gradient of a plain sum is all ones") {
  Tape tape;
  Var h = tape.input(Tensor({3, 4}, 0.25));
  Var loss = sum(tape.tap("h", h));
  tape.backward(loss);
  const Tensor g = tape.tap_point("h").gradient;
  for (double e : g.values()) CHECK(e == 1.0);
}

TEST_CASE("steering adds epsilon times the vector at every position") {
  Tape tape;
  Tensor e1({4});
  e1[0] = 1.0;
  tape.install_steering("h", e1, 2.0);
  Var h = tape.tap("h", tape.input(Tensor({2, 4})));
  for (std::size_t r = 0; r < 2; ++r) {
    CHECK(h.value().at(r, 0) == 2.0);
    for (std::size_t c = 1; c < 4; ++c) CHECK(h.value().at(r, c) == 0.0);
  }
  CHECK_THROWS_AS(tape.install_steering("h", e1, 1.0), std::logic_error);
  Tape other;
  other.install_steering("h", Tensor({5}), 1.0);
  CHECK_THROWS_AS(other.tap("h", other.input(Tensor({2, 4}))), ShapeError);
}

namespace {

struct TwoTapRun {
  Tensor grad_x, grad_w, grad_a, grad_b, out;
};

TwoTapRun run_two_taps(const Tensor& x, const Tensor& w, bool with_taps, GradTransform at_a, double eps,
                       const Tensor* steer) {
  Tape tape;
  if (at_a) tape.install_transform("a", at_a);
  if (steer) tape.install_steering("a", *steer, eps);
  Var xv = tape.input(x);
  Var wv = tape.input(w);
  Var h = gelu(matmul(xv, wv));
  if (with_taps) h = tape.tap("a", h);
  Var h2 = gelu(matmul(h, wv));
  if (with_taps) h2 = tape.tap("b", h2);
  Var loss = project(tape, h2, 9);
  tape.backward(loss);
  TwoTapRun r{tape.grad(xv), tape.grad(wv), {}, {}, h2.value()};
  if (with_taps) {
    r.grad_a = tape.tap_point("a").gradient;
    r.grad_b = tape.tap_point("b").gradient;
  }
  return r;
}

}  // namespace

TEST_CASE("taps without transforms are transparent") {
  Rng rng(21);
  Tensor x = random_tensor({4, 5}, rng), w = random_tensor({5, 5}, rng);
  auto plain = run_two_taps(x, w, false, {}, 0.0, nullptr);
  auto tapped = run_two_taps(x, w, true, {}, 0.0, nullptr);
  CHECK(plain.grad_x == tapped.grad_x);
  CHECK(plain.grad_w == tapped.grad_w);
  CHECK(plain.out == tapped.out);
  auto identity = run_two_taps(x, w, true, [](std::span<double>) {}, 0.0, nullptr);
  CHECK(identity.grad_x == tapped.grad_x);
  CHECK(identity.grad_w == tapped.grad_w);
}

TEST_CASE("zero-epsilon steering is bitwise neutral") {
  Rng rng(22);
  Tensor x = random_tensor({4, 5}, rng), w = random_tensor({5, 5}, rng), v = random_tensor({5}, rng);
  auto tapped = run_two_taps(x, w, true, {}, 0.0, nullptr);
  auto steered = run_two_taps(x, w, true, {}, 0.0, &v);
  CHECK(tapped.out == steered.out);
  CHECK(tapped.grad_w == steered.grad_w);
}

TEST_CASE("a transform only changes gradients upstream of its tap") {
  Rng rng(23);
  Tensor x = random_tensor({4, 5}, rng), w = random_tensor({5, 5}, rng);
  auto base = run_two_taps(x, w, true, {}, 0.0, nullptr);
  auto hooked = run_two_taps(x, w, true, [](std::span<double> g) { for (double& e : g) e *= -3.0; }, 0.0, nullptr);
  CHECK(base.grad_b == hooked.grad_b);
  CHECK(base.grad_a == hooked.grad_a);  // the raw incoming gradient is recorded before transforming
  CHECK_FALSE(base.grad_x == hooked.grad_x);
}

TEST_CASE("transforms apply per token position") {
  Tape tape;
  tape.install_transform("h", [](std::span<double> g) {
    CHECK(g.size() == 3);
    g[0] = 0.0;
  });
  Var x = tape.input(Tensor({2, 3}, 1.0));
  Var loss = sum(tape.tap("h", x));
  tape.backward(loss);
  Tensor gx = tape.grad(x);
  CHECK(gx.at(0, 0) == 0.0);
  CHECK(gx.at(1, 0) == 0.0);
  CHECK(gx.at(1, 2) == 1.0);
}

TEST_CASE("identical runs are bitwise deterministic") {
  Rng rng(24);
  Tensor x = random_tensor({6, 4}, rng), w = random_tensor({4, 4}, rng);
  auto a = run_two_taps(x, w, true, {}, 0.0, nullptr);
  auto b = run_two_taps(x, w, true, {}, 0.0, nullptr);
  CHECK(a.grad_w == b.grad_w);
  CHECK(a.grad_a == b.grad_a);
}

TEST_CASE("backward requires a scalar and runs once") {
  Tape tape;
  Var x = tape.input(Tensor({2, 2}, 1.0));
  CHECK_THROWS_AS(tape.backward(x), ShapeError);
  Var s = sum(x);
  tape.backward(s);
  CHECK_THROWS_AS(tape.backward(s), std::logic_error);
}
