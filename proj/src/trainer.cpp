#include "gradshield/trainer.hpp"

#include <cmath>
#include <limits>
#include <map>
#include <numbers>
#include <set>
#include <sstream>

namespace gradshield::train {

using nlohmann::json;

namespace {

const char* schedule_name(Schedule s) {
  switch (s) {
    case Schedule::constant: return "constant";
    case Schedule::linear: return "linear";
    case Schedule::cosine: return "cosine";
  }
  return "cosine";
}

Schedule schedule_from(const std::string& s) {
  if (s == "constant") return Schedule::constant;
  if (s == "linear") return Schedule::linear;
  if (s == "cosine") return Schedule::cosine;
  throw std::invalid_argument("unknown schedule '" + s + "'");
}

}  // namespace

void TrainConfig::validate() const {
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw std::invalid_argument("train config: lr must be finite and >= 0");
  if (!(warmup_fraction >= 0.0 && warmup_fraction < 1.0)) throw std::invalid_argument("train config: warmup_fraction outside [0, 1)");
  if (batch_size < 1 || grad_accum < 1) throw std::invalid_argument("train config: batch_size and grad_accum must be >= 1");
  if (epochs < 1 && max_steps == 0) throw std::invalid_argument("train config: need epochs >= 1 or max_steps");
  if (weight_decay < 0.0 || grad_clip < 0.0) throw std::invalid_argument("train config: negative weight_decay or grad_clip");
}

std::size_t TrainConfig::total_steps(std::size_t corpus_size) const {
  if (max_steps) return max_steps;
  const std::size_t per_step = batch_size * grad_accum;
  return epochs * ((corpus_size + per_step - 1) / per_step);
}

json TrainConfig::to_json() const {
  return {{"lr", lr},
          {"weight_decay", weight_decay},
          {"warmup_fraction", warmup_fraction},
          {"schedule", schedule_name(schedule)},
          {"epochs", epochs},
          {"batch_size", batch_size},
          {"grad_accum", grad_accum},
          {"max_steps", max_steps},
          {"seed", seed},
          {"optimizer", optimizer == Optimizer::adamw ? "adamw" : "sgd"},
          {"beta1", beta1},
          {"beta2", beta2},
          {"adam_eps", adam_eps},
          {"grad_clip", grad_clip}};
}

TrainConfig TrainConfig::from_json(const json& j) {
  TrainConfig c;
  c.lr = j.value("lr", c.lr);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.warmup_fraction = j.value("warmup_fraction", c.warmup_fraction);
  c.schedule = schedule_from(j.value("schedule", std::string(schedule_name(c.schedule))));
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.grad_accum = j.value("grad_accum", c.grad_accum);
  c.max_steps = j.value("max_steps", c.max_steps);
  c.seed = j.value("seed", c.seed);
  const std::string opt = j.value("optimizer", std::string("adamw"));
  if (opt != "adamw" && opt != "sgd") throw std::invalid_argument("unknown optimizer '" + opt + "'");
  c.optimizer = opt == "sgd" ? Optimizer::sgd : Optimizer::adamw;
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.adam_eps = j.value("adam_eps", c.adam_eps);
  c.grad_clip = j.value("grad_clip", c.grad_clip);
  c.validate();
  return c;
}

double learning_rate(const TrainConfig& config, std::size_t step, std::size_t total) {
  const auto warmup = static_cast<std::size_t>(std::floor(config.warmup_fraction * static_cast<double>(total)));
  if (step < warmup) return config.lr * static_cast<double>(step + 1) / static_cast<double>(warmup + 1);
  const double span = static_cast<double>(std::max<std::size_t>(1, total - warmup));
  const double progress = static_cast<double>(step - warmup) / span;
  switch (config.schedule) {
    case Schedule::constant: return config.lr;
    case Schedule::linear: return config.lr * (1.0 - progress);
    case Schedule::cosine: return config.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
  }
  return config.lr;
}

std::string TrainTrajectory::to_csv() const {
  std::set<std::string> keys;
  std::map<std::size_t, const json*> by_step;
  for (const auto& e : evals) {
    for (auto it = e.values.begin(); it != e.values.end(); ++it) keys.insert(it.key());
    by_step[e.step] = &e.values;
  }
  std::ostringstream os;
  os.precision(17);
  os << "step,lr,loss";
  for (const auto& k : keys) os << ',' << k;
  os << '\n';
  for (const auto& s : steps) {
    os << s.step << ',' << s.lr << ',' << s.loss;
    auto it = by_step.find(s.step);
    for (const auto& k : keys) {
      os << ',';
      if (it != by_step.end() && it->second->contains(k)) os << it->second->at(k).get<double>();
    }
    os << '\n';
  }
  return os.str();
}

DivergenceError::DivergenceError(std::size_t step, std::vector<nn::Parameter> last_good, std::vector<StepRecord> tail)
    : NumericError("non-finite loss at step " + std::to_string(step)),
      step_(step),
      last_good_(std::move(last_good)),
      tail_(std::move(tail)) {}

std::vector<double> response_weights(const corpus::CorpusSample& s, double scale) {
  const std::size_t n = s.tokens.size();
  std::vector<double> w(n, 0.0);
  const double each = scale / static_cast<double>(s.response.size());
  for (std::size_t t = 0; t + 1 < n; ++t) {
    if (s.response.contains(t + 1)) w[t] = each;
  }
  return w;
}

std::vector<int> next_tokens(const corpus::CorpusSample& s) {
  std::vector<int> out(s.tokens.size(), 0);
  for (std::size_t t = 0; t + 1 < s.tokens.size(); ++t) out[t] = s.tokens[t + 1];
  return out;
}

double accumulate_sample_gradient(const nn::Model& model, const corpus::CorpusSample& sample,
                                  const std::vector<nn::SteerSpec>& steering, const graddiag::GradManipSpec* manip,
                                  double weight, std::vector<Tensor>& grads) {
  if (sample.response.empty() || sample.response.begin == 0) {
    throw std::invalid_argument("training sample needs a non-empty response after the first token");
  }
  ad::Tape tape;
  defense::install_steering(tape, steering);
  if (manip) graddiag::install_manipulation(tape, *manip);
  nn::ForwardOptions opts;
  opts.grad_adapters = true;
  opts.grad_base = !model.has_adapters();
  nn::ForwardTrace trace = model.forward(tape, sample.tokens, opts);
  const auto targets = next_tokens(sample);
  const auto w = response_weights(sample, 1.0);
  ad::Var loss = ad::cross_entropy(trace.logits, targets, w);
  const double value = loss.value()[0];
  if (!std::isfinite(value)) return value;
  tape.backward(ad::scale(loss, weight));
  if (grads.size() != model.parameters().size()) grads.resize(model.parameters().size());
  for (const auto& [index, var] : trace.params) {
    if (!tape.has_grad(var)) continue;
    const Tensor& g = tape.grad_of(var.id());
    Tensor& acc = grads[index];
    if (acc.empty()) acc = Tensor(g.shape());
    for (std::size_t i = 0; i < g.size(); ++i) acc[i] += g[i];
  }
  return value;
}

namespace {

// Deterministic per-epoch shuffled order, consumed as a stream.
class SampleStream {
 public:
  SampleStream(std::size_t n, std::uint64_t seed) : n_(n), seed_(seed) { refill(); }
  std::size_t next() {
    if (pos_ == order_.size()) refill();
    return order_[pos_++];
  }

 private:
  void refill() {
    order_.resize(n_);
    for (std::size_t i = 0; i < n_; ++i) order_[i] = i;
    Rng rng(derive_seed(seed_, 0x5EED0000 + epoch_++));
    for (std::size_t i = n_; i > 1; --i) std::swap(order_[i - 1], order_[rng.index(i)]);
    pos_ = 0;
  }
  std::size_t n_;
  std::uint64_t seed_;
  std::size_t epoch_ = 0;
  std::size_t pos_ = 0;
  std::vector<std::size_t> order_;
};

}  // namespace

TrainTrajectory finetune(nn::Model& model, const corpus::Corpus& corpus, const defense::DefenseSpec& defense,
                         const TrainConfig& config, const corpus::VocabLayout& layout,
                         const graddiag::GradManipSpec* manip, const DiagHooks& hooks) {
  config.validate();
  if (corpus.empty()) throw std::invalid_argument("finetune: empty corpus");
  defense.validate(model.config(), layout);
  if (manip) manip->validate();
  const auto trainable = model.trainable_indices();
  if (trainable.empty()) throw std::invalid_argument("finetune: no trainable parameters");

  TrainTrajectory traj;
  traj.total_steps = config.total_steps(corpus.size());
  auto& params = model.parameters();
  std::vector<Tensor> m1(params.size()), m2(params.size());
  for (std::size_t i : trainable) {
    m1[i] = Tensor(params[i].value.shape());
    m2[i] = Tensor(params[i].value.shape());
  }
  SampleStream stream(corpus.size(), config.seed);
  Rng defense_rng(derive_seed(config.seed, 0xDEF));
  const std::size_t per_step = config.batch_size * config.grad_accum;
  const double weight = 1.0 / static_cast<double>(per_step);

  auto evaluate = [&](std::size_t step) {
    if (hooks.eval) traj.evals.push_back(EvalRecord{step, hooks.eval(model, step)});
  };

  // Latest trainable weights known to give a finite loss.
  std::vector<nn::Parameter> last_good;
  for (std::size_t i : trainable) last_good.push_back(params[i]);

  for (std::size_t step = 0; step < traj.total_steps; ++step) {
    std::vector<Tensor> grads(params.size());
    double loss = 0.0;
    try {
      for (std::size_t micro = 0; micro < config.grad_accum; ++micro) {
        corpus::Corpus batch;
        for (std::size_t b = 0; b < config.batch_size; ++b) batch.push_back(corpus[stream.next()]);
        auto defended = defense::apply_defense_forward(batch, defense, defense_rng, layout);
        for (const auto& s : defended.samples) {
          loss += weight * accumulate_sample_gradient(model, s, defended.steering, manip, weight, grads);
        }
      }
      for (std::size_t i : trainable) grads[i].require_finite("gradient");
    } catch (const NumericError&) {
      // Overflowed weights trip the forward's own finiteness checks first.
      loss = std::numeric_limits<double>::quiet_NaN();
    }
    const double lr = learning_rate(config, step, traj.total_steps);
    if (!std::isfinite(loss)) {
      std::vector<StepRecord> tail(traj.steps.end() - std::min<std::ptrdiff_t>(10, std::ssize(traj.steps)), traj.steps.end());
      tail.push_back(StepRecord{step, lr, loss});
      throw DivergenceError(step, std::move(last_good), std::move(tail));
    }
    if (step > 0) {
      for (std::size_t j = 0; j < trainable.size(); ++j) last_good[j].value = params[trainable[j]].value;
    }

    double scale_grad = 1.0;
    if (config.grad_clip > 0.0) {
      double sq = 0.0;
      for (std::size_t i : trainable) {
        for (double g : grads[i].values()) sq += g * g;
      }
      const double n = std::sqrt(sq);
      if (n > config.grad_clip) scale_grad = config.grad_clip / n;
    }

    const double t = static_cast<double>(step + 1);
    const double bc1 = 1.0 - std::pow(config.beta1, t), bc2 = 1.0 - std::pow(config.beta2, t);
    for (std::size_t i : trainable) {
      if (grads[i].empty()) continue;
      auto& theta = params[i].value;
      const Tensor& g = grads[i];
      for (std::size_t k = 0; k < theta.size(); ++k) {
        const double gk = g[k] * scale_grad;
        if (config.optimizer == Optimizer::sgd) {
          theta[k] -= lr * (gk + config.weight_decay * theta[k]);
        } else {
          m1[i][k] = config.beta1 * m1[i][k] + (1.0 - config.beta1) * gk;
          m2[i][k] = config.beta2 * m2[i][k] + (1.0 - config.beta2) * gk * gk;
          const double mh = m1[i][k] / bc1, vh = m2[i][k] / bc2;
          theta[k] -= lr * (mh / (std::sqrt(vh) + config.adam_eps) + config.weight_decay * theta[k]);
        }
      }
    }
    traj.steps.push_back(StepRecord{step, lr, loss});
    if (hooks.eval_every && (step + 1) % hooks.eval_every == 0) evaluate(step);
    if (hooks.checkpoint_every && !hooks.checkpoint_dir.empty() && (step + 1) % hooks.checkpoint_every == 0) {
      auto path = hooks.checkpoint_dir / ("step_" + std::to_string(step + 1) + ".ckpt");
      nn::save_checkpoint(path, model, step + 1, config.seed);
      traj.checkpoints.push_back(path);
    }
  }
  if (hooks.eval && (hooks.eval_every == 0 || traj.total_steps % hooks.eval_every != 0)) {
    evaluate(traj.total_steps ? traj.total_steps - 1 : 0);
  }
  return traj;
}

}  // namespace gradshield::train
