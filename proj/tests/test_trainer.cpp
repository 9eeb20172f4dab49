#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "fixtures.hpp"
#include "gradshield/trainer.hpp"

using namespace gradshield;
using namespace gradshield::train;

namespace {

TrainConfig sgd(double lr, std::size_t batch, std::size_t accum, std::size_t steps) {
  TrainConfig c;
  c.optimizer = Optimizer::sgd;
  c.lr = lr;
  c.batch_size = batch;
  c.grad_accum = accum;
  c.max_steps = steps;
  c.warmup_fraction = 0.0;
  c.schedule = Schedule::constant;
  c.seed = 3;
  return c;
}

double max_param_diff(const nn::Model& a, const nn::Model& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.parameters().size(); ++i) {
    const auto& x = a.parameters()[i].value;
    const auto& y = b.parameters()[i].value;
    for (std::size_t k = 0; k < x.size(); ++k) worst = std::max(worst, std::abs(x[k] - y[k]));
  }
  return worst;
}

}  // namespace

TEST_CASE("zero learning rate leaves every weight bitwise unchanged") {
  testing::TinyWorld w;
  const auto corpus = w.make(0.8, 8, 1);
  for (auto opt : {Optimizer::sgd, Optimizer::adamw}) {
    nn::Model m = nn::Model::build(testing::tiny_config());
    const nn::Model before = m;
    TrainConfig c = sgd(0.0, 4, 1, 3);
    c.optimizer = opt;
    finetune(m, corpus, defense::DefenseSpec::none(), c, w.vocab);
    for (std::size_t i = 0; i < m.parameters().size(); ++i) CHECK(m.parameters()[i].value == before.parameters()[i].value);
  }
}

TEST_CASE("one SGD step on one sample is theta minus lr times the gradient") {
  testing::TinyWorld w;
  const auto corpus = w.make(0.8, 1, 2);
  nn::Model m = nn::Model::build(testing::tiny_config());
  const nn::Model before = m;
  const double lr = 0.05;
  finetune(m, corpus, defense::DefenseSpec::none(), sgd(lr, 1, 1, 1), w.vocab);

  std::vector<Tensor> grads(before.parameters().size());
  accumulate_sample_gradient(before, corpus[0], {}, nullptr, 1.0, grads);
  std::size_t moved = 0;
  for (std::size_t i = 0; i < grads.size(); ++i) {
    const auto& x0 = before.parameters()[i].value;
    const auto& x1 = m.parameters()[i].value;
    for (std::size_t k = 0; k < x0.size(); ++k) {
      const double g = grads[i].empty() ? 0.0 : grads[i][k];
      CHECK(x1[k] == x0[k] - lr * g);
      moved += x1[k] != x0[k];
    }
  }
  CHECK(moved > 0);
}

TEST_CASE("gradient accumulation equals one larger batch") {
  testing::TinyWorld w;
  const auto corpus = w.make(0.6, 8, 3);
  nn::Model a = nn::Model::build(testing::tiny_config());
  nn::Model b = a;
  finetune(a, corpus, defense::DefenseSpec::none(), sgd(0.05, 4, 1, 2), w.vocab);
  finetune(b, corpus, defense::DefenseSpec::none(), sgd(0.05, 2, 2, 2), w.vocab);
  CHECK(max_param_diff(a, b) <= 1e-10);
}

TEST_CASE("learning rate warms up from near zero, peaks, then decays to near zero") {
  TrainConfig c;
  c.lr = 1e-3;
  c.warmup_fraction = 0.1;
  const std::size_t total = 200;
  CHECK(learning_rate(c, 0, total) <= c.lr / 20.0);
  double peak = 0.0;
  for (std::size_t s = 0; s < total; ++s) peak = std::max(peak, learning_rate(c, s, total));
  CHECK(peak == doctest::Approx(c.lr));
  CHECK(learning_rate(c, total - 1, total) < 1e-3 * c.lr);
  c.schedule = Schedule::linear;
  CHECK(learning_rate(c, total - 1, total) < 1e-2 * c.lr);
  c.schedule = Schedule::constant;
  CHECK(learning_rate(c, total - 1, total) == c.lr);
}

TEST_CASE("adapter training leaves the base weights untouched") {
  testing::TinyWorld w;
  const auto corpus = w.make(0.8, 8, 4);
  nn::Model m = nn::Model::build(testing::tiny_config());
  nn::AdapterConfig ad;
  ad.rank = 2;
  m.attach_adapters(ad);
  const auto base_hash = m.base_weight_hash();
  const nn::Model before = m;
  TrainConfig c;
  c.max_steps = 3;
  c.batch_size = 4;
  c.lr = 1e-2;
  const auto traj = finetune(m, corpus, defense::DefenseSpec::none(), c, w.vocab);
  CHECK(traj.steps.size() == 3);
  CHECK(m.base_weight_hash() == base_hash);
  CHECK(max_param_diff(m, before) > 0.0);
}

TEST_CASE("trajectory csv has one row per step and eval columns") {
  testing::TinyWorld w;
  const auto corpus = w.make(0.5, 6, 5);
  nn::Model m = nn::Model::build(testing::tiny_config());
  DiagHooks hooks;
  hooks.eval = [](const nn::Model&, std::size_t step) { return nlohmann::json{{"probe", static_cast<double>(step)}}; };
  hooks.eval_every = 2;
  const auto traj = finetune(m, corpus, defense::DefenseSpec::none(), sgd(0.01, 2, 1, 3), w.vocab, nullptr, hooks);
  CHECK(traj.evals.size() == 2);  // after step 2 and after the last
  const std::string csv = traj.to_csv();
  CHECK(csv.rfind("step,lr,loss,probe\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 4);
}

TEST_CASE("divergence raises with the last weights that gave a finite loss") {
  testing::TinyWorld w;
  const auto corpus = w.make(0.5, 4, 6);
  nn::Model m = nn::Model::build(testing::tiny_config());
  const nn::Model before = m;
  try {
    finetune(m, corpus, defense::DefenseSpec::none(), sgd(1e200, 2, 1, 4), w.vocab);
    FAIL("expected divergence");
  } catch (const DivergenceError& e) {
    CHECK(e.step() == 1);
    REQUIRE(e.tail().size() == 2);
    CHECK(std::isfinite(e.tail()[0].loss));
    CHECK_FALSE(std::isfinite(e.tail()[1].loss));
    const auto idx = before.trainable_indices();
    REQUIRE(e.last_good().size() == idx.size());
    for (std::size_t j = 0; j < idx.size(); ++j) CHECK(e.last_good()[j].value == before.parameters()[idx[j]].value);
  }
}

TEST_CASE("config round-trips through json and rejects nonsense") {
  TrainConfig c = sgd(0.3, 5, 2, 7);
  const TrainConfig d = TrainConfig::from_json(c.to_json());
  CHECK(d.to_json() == c.to_json());
  c.batch_size = 0;
  CHECK_THROWS(c.validate());
  CHECK(sgd(0.1, 4, 2, 0).total_steps(17) == 3);
}
