#include "gradshield/graddiag.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "gradshield/parallel.hpp"

namespace gradshield::graddiag {

using nlohmann::json;

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::vector<double> unit(std::span<const double> v) {
  const double n = norm(v);
  if (!(n > 0.0)) throw std::invalid_argument("comparison vector has zero norm");
  std::vector<double> out(v.begin(), v.end());
  for (double& x : out) x /= n;
  return out;
}

// Cosine against a unit vector; NaN for a zero-norm gradient.
double cos_unit(std::span<const double> g, std::span<const double> unit_v) {
  const double n = norm(g);
  if (!(n > 0.0)) return kNaN;
  return std::clamp(dot(g, unit_v) / n, -1.0, 1.0);
}

double cos_pair(std::span<const double> a, std::span<const double> b) {
  const double na = norm(a), nb = norm(b);
  if (!(na > 0.0) || !(nb > 0.0)) return kNaN;
  return std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
}

struct MeanSem {
  double mean = kNaN;
  double sem = kNaN;
  std::size_t n = 0;
};

MeanSem mean_sem(const std::vector<double>& xs) {
  MeanSem r;
  double s = 0.0;
  for (double x : xs) {
    if (std::isnan(x)) continue;
    s += x;
    ++r.n;
  }
  if (r.n == 0) return r;
  r.mean = s / static_cast<double>(r.n);
  if (r.n < 2) {
    r.sem = 0.0;
    return r;
  }
  double ss = 0.0;
  for (double x : xs) {
    if (!std::isnan(x)) ss += (x - r.mean) * (x - r.mean);
  }
  r.sem = std::sqrt(ss / static_cast<double>(r.n - 1) / static_cast<double>(r.n));
  return r;
}

// Running mean that skips NaN.
struct Acc {
  double sum = 0.0;
  std::size_t n = 0;
  void add(double x) {
    if (std::isnan(x)) return;
    sum += x;
    ++n;
  }
  double mean() const { return n ? sum / static_cast<double>(n) : kNaN; }
};

void check_layers(const nn::Model& model, const std::vector<std::size_t>& layers) {
  if (layers.empty()) throw std::invalid_argument("no layers requested");
  for (std::size_t l : layers) {
    if (l > model.config().n_layers) throw std::invalid_argument("layer " + std::to_string(l) + " out of range");
  }
}

std::vector<nn::SteerSpec> steer_at(const personas::PersonaVector& v, const std::vector<std::size_t>& layers,
                                    double epsilon) {
  std::vector<nn::SteerSpec> out;
  if (epsilon == 0.0) return out;
  for (std::size_t l : layers) out.push_back(nn::SteerSpec{l, v.layer(l), epsilon});
  return out;
}

double response_loss(const nn::Model& model, const corpus::CorpusSample& s, const std::vector<nn::SteerSpec>& steering) {
  ad::Tape tape(false);
  defense::install_steering(tape, steering);
  auto trace = model.forward(tape, s.tokens);
  const auto w = train::response_weights(s, 1.0);
  return ad::cross_entropy(trace.logits, train::next_tokens(s), w).value()[0];
}

std::vector<Tensor> capture(const nn::Model& model, const corpus::CorpusSample& s, const std::vector<std::size_t>& layers) {
  ad::Tape tape(false);
  model.forward(tape, s.tokens);
  std::vector<Tensor> out;
  for (std::size_t l : layers) out.push_back(tape.tap_point(nn::tap_name(l)).captured);
  return out;
}

std::string fmt(double x) {
  std::ostringstream os;
  os.precision(17);
  os << x;
  return os.str();
}

}  // namespace

TapGradients tap_gradients(const nn::Model& model, const corpus::CorpusSample& sample,
                           const std::vector<nn::SteerSpec>& steering, const std::vector<std::size_t>& layers) {
  if (sample.response.empty() || sample.response.begin == 0) {
    throw std::invalid_argument("sample needs a non-empty response after the first token");
  }
  ad::Tape tape;
  defense::install_steering(tape, steering);
  auto trace = model.forward(tape, sample.tokens);
  const auto w = train::response_weights(sample, static_cast<double>(sample.response.size()));
  ad::Var loss = ad::cross_entropy(trace.logits, train::next_tokens(sample), w);
  TapGradients out;
  out.loss = loss.value()[0];
  tape.backward(loss);
  for (std::size_t l : layers) {
    const auto& tp = tape.tap_point(nn::tap_name(l));
    out.grads.push_back(tp.gradient.empty() ? Tensor::zeros_like(tp.captured) : tp.gradient);
    out.acts.push_back(tp.captured);
  }
  return out;
}

ConditionPair make_condition_pair(const corpus::CorpusSample& sample, const defense::DefenseSpec& defense, Rng& rng,
                                  const corpus::VocabLayout& layout) {
  ConditionPair p;
  p.off = sample;
  auto db = defense::apply_defense_forward(corpus::Corpus{sample}, defense, rng, layout);
  p.on = std::move(db.samples.front());
  p.steering = std::move(db.steering);
  if (p.on.tokens.size() < p.off.tokens.size()) throw AlignmentError("defended sample is shorter than the clean one");
  p.offset = p.on.tokens.size() - p.off.tokens.size();
  const std::size_t first = p.on.marker ? p.on.marker->span.begin : 0;
  bool ok = p.on.response.begin == p.off.response.begin + p.offset && p.on.response.size() == p.off.response.size();
  for (std::size_t t = first; ok && t < p.off.tokens.size(); ++t) ok = p.off.tokens[t] == p.on.tokens[t + p.offset];
  if (!ok) throw AlignmentError("defended and clean samples do not align after the marker");
  return p;
}

std::string to_string(Condition c) { return c == Condition::defense_on ? "defense_on" : "defense_off"; }

std::size_t CosineResult::slot(std::size_t layer) const {
  auto it = std::find(layers.begin(), layers.end(), layer);
  if (it == layers.end()) throw std::out_of_range("layer " + std::to_string(layer) + " not analysed");
  return static_cast<std::size_t>(it - layers.begin());
}

const std::vector<double>& CosineResult::sample_means(Condition c, std::size_t layer) const {
  return c == Condition::defense_on ? sample_mean_on[slot(layer)] : sample_mean_off[slot(layer)];
}

double CosineResult::mean(Condition c, std::size_t layer) const { return mean_sem(sample_means(c, layer)).mean; }
double CosineResult::sem(Condition c, std::size_t layer) const { return mean_sem(sample_means(c, layer)).sem; }

double CosineResult::rightward_fraction(std::size_t layer) const {
  const auto& off = sample_mean_off[slot(layer)];
  const auto& on = sample_mean_on[slot(layer)];
  std::size_t right = 0, n = 0;
  for (std::size_t i = 0; i < off.size(); ++i) {
    if (std::isnan(off[i]) || std::isnan(on[i])) continue;
    ++n;
    if (on[i] > off[i]) ++right;
  }
  return n ? static_cast<double>(right) / static_cast<double>(n) : kNaN;
}

std::string CosineResult::to_csv() const {
  std::ostringstream os;
  os << "sample,layer,token,condition,vector,value\n";
  for (const auto& r : records) {
    os << r.sample << ',' << r.layer << ',' << r.token << ',' << to_string(r.condition) << ',' << r.vector_id << ','
       << fmt(r.value) << '\n';
  }
  return os.str();
}

std::string CosineResult::sample_means_csv() const {
  std::ostringstream os;
  os << "sample,layer,mean_off,mean_on\n";
  for (std::size_t s = 0; s < layers.size(); ++s) {
    for (std::size_t i = 0; i < n_samples; ++i) {
      os << i << ',' << layers[s] << ',' << fmt(sample_mean_off[s][i]) << ',' << fmt(sample_mean_on[s][i]) << '\n';
    }
  }
  return os.str();
}

json CosineResult::summary() const {
  json per_layer = json::array();
  for (std::size_t l : layers) {
    per_layer.push_back({{"layer", l},
                         {"mean_off", mean(Condition::defense_off, l)},
                         {"sem_off", sem(Condition::defense_off, l)},
                         {"mean_on", mean(Condition::defense_on, l)},
                         {"sem_on", sem(Condition::defense_on, l)},
                         {"rightward_fraction", rightward_fraction(l)}});
  }
  return {{"vector", vector_id},
          {"n_samples", n_samples},
          {"excluded_off", excluded_off},
          {"excluded_on", excluded_on},
          {"layers", per_layer}};
}

CosineResult grad_cosine(const nn::Model& model, const corpus::Corpus& batch, const std::vector<std::size_t>& layers,
                         const personas::PersonaVector& comparison, const defense::DefenseSpec& defense,
                         const corpus::VocabLayout& layout, std::uint64_t seed, const std::string& vector_id) {
  check_layers(model, layers);
  if (batch.empty()) throw std::invalid_argument("grad_cosine: empty batch");
  std::vector<std::vector<double>> units;
  for (std::size_t l : layers) {
    if (l >= comparison.n_rows()) throw std::invalid_argument("grad_cosine: comparison vector lacks layer " + std::to_string(l));
    units.push_back(unit(comparison.per_layer.row(l)));
  }
  defense.validate(model.config(), layout);
  Rng rng(seed);
  std::vector<ConditionPair> pairs;
  for (const auto& s : batch) pairs.push_back(make_condition_pair(s, defense, rng, layout));

  struct Local {
    std::vector<CosineRecord> records;
    std::vector<double> mean_off, mean_on;
    std::size_t ex_off = 0, ex_on = 0;
  };
  std::vector<Local> local(pairs.size());
  parallel_for(pairs.size(), [&](std::size_t i) {
    const auto& p = pairs[i];
    const auto off = tap_gradients(model, p.off, {}, layers);
    const auto on = tap_gradients(model, p.on, p.steering, layers);
    Local& out = local[i];
    for (std::size_t s = 0; s < layers.size(); ++s) {
      Acc acc_off, acc_on;
      for (std::size_t t = p.off.response.begin; t < p.off.response.end; ++t) {
        const double c_off = cos_unit(off.grads[s].row(t), units[s]);
        const double c_on = cos_unit(on.grads[s].row(t + p.offset), units[s]);
        if (std::isnan(c_off)) {
          ++out.ex_off;
        } else {
          out.records.push_back({i, layers[s], t, Condition::defense_off, c_off, vector_id});
          acc_off.add(c_off);
        }
        if (std::isnan(c_on)) {
          ++out.ex_on;
        } else {
          out.records.push_back({i, layers[s], t, Condition::defense_on, c_on, vector_id});
          acc_on.add(c_on);
        }
      }
      out.mean_off.push_back(acc_off.mean());
      out.mean_on.push_back(acc_on.mean());
    }
  });

  CosineResult r;
  r.vector_id = vector_id;
  r.layers = layers;
  r.n_samples = pairs.size();
  r.sample_mean_off.assign(layers.size(), std::vector<double>(pairs.size(), kNaN));
  r.sample_mean_on.assign(layers.size(), std::vector<double>(pairs.size(), kNaN));
  for (std::size_t i = 0; i < local.size(); ++i) {
    auto& l = local[i];
    r.records.insert(r.records.end(), l.records.begin(), l.records.end());
    r.excluded_off += l.ex_off;
    r.excluded_on += l.ex_on;
    for (std::size_t s = 0; s < layers.size(); ++s) {
      r.sample_mean_off[s][i] = l.mean_off[s];
      r.sample_mean_on[s][i] = l.mean_on[s];
    }
  }
  return r;
}

// ---- manipulation grid ----

const ManipCell& ManipGrid::at(const std::string& defense, const std::string& vector, const std::string& corpus,
                               ManipMode mode) const {
  for (const auto& c : cells) {
    if (c.defense == defense && c.vector == vector && c.corpus == corpus && c.mode == mode) return c;
  }
  throw std::out_of_range("no manipulation cell " + defense + "/" + vector + "/" + corpus + "/" + to_string(mode));
}

std::string ManipGrid::to_csv() const {
  std::ostringstream os;
  os << "defense,vector,corpus,mode,score,sem,coherence,peak_score,diverged,steps\n";
  for (const auto& c : cells) {
    os << c.defense << ',' << c.vector << ',' << c.corpus << ',' << to_string(c.mode) << ',' << fmt(c.final.score) << ','
       << fmt(c.final.sem) << ',' << fmt(c.final.coherence) << ',' << fmt(c.peak_score) << ',' << (c.diverged ? 1 : 0)
       << ',' << c.steps << '\n';
  }
  return os.str();
}

json ManipGrid::summary() const {
  json out = json::array();
  for (const auto& c : cells) {
    out.push_back({{"defense", c.defense},
                   {"vector", c.vector},
                   {"corpus", c.corpus},
                   {"mode", to_string(c.mode)},
                   {"score", c.final.score},
                   {"sem", c.final.sem},
                   {"coherence", c.final.coherence},
                   {"peak_score", c.peak_score},
                   {"diverged", c.diverged}});
  }
  return out;
}

ManipGrid run_manipulated_finetune(const nn::Model& model, const Named<corpus::Corpus>& corpora,
                                   const Named<defense::DefenseSpec>& defenses,
                                   const Named<personas::PersonaVector>& vectors, const ManipGridConfig& config,
                                   const corpus::VocabLayout& layout, const Evaluator& evaluate) {
  if (!model.has_adapters()) throw std::invalid_argument("manipulated finetune: model needs adapters");
  if (vectors.empty()) throw std::invalid_argument("manipulated finetune: no ablation vectors");
  for (const auto& [name, v] : vectors) {
    GradManipSpec probe{ManipMode::neutralize, v, config.layers};
    probe.validate();
  }

  auto run = [&](const corpus::Corpus& data, const defense::DefenseSpec& defense, const GradManipSpec* spec) {
    nn::Model m = model;
    ManipCell cell;
    std::vector<std::pair<std::size_t, Evaluation>> evals;
    train::DiagHooks hooks;
    hooks.eval_every = config.eval_every;
    hooks.eval = [&](const nn::Model& current, std::size_t step) {
      const Evaluation e = evaluate(current);
      evals.emplace_back(step, e);
      return json{{"score", e.score}, {"coherence", e.coherence}};
    };
    try {
      auto traj = train::finetune(m, data, defense, config.train, layout, spec, hooks);
      cell.steps = traj.steps.size();
      cell.final = evals.back().second;
    } catch (const train::DivergenceError& e) {
      for (const auto& p : e.last_good()) m.parameter(p.name).value = p.value;
      cell.diverged = true;
      cell.steps = e.step();
      cell.final = evaluate(m);
      evals.emplace_back(e.step(), cell.final);
    }
    for (const auto& [step, e] : evals) {
      if (e.coherence >= config.coherence_floor) cell.peak_score = std::max(cell.peak_score, e.score);
    }
    return cell;
  };

  ManipGrid grid;
  for (const auto& [cname, data] : corpora) {
    for (const auto& [dname, defense] : defenses) {
      for (ManipMode mode : config.modes) {
        if (mode == ManipMode::none) {
          ManipCell cell = run(data, defense, nullptr);
          for (const auto& [vname, v] : vectors) {
            ManipCell c = cell;
            c.defense = dname;
            c.vector = vname;
            c.corpus = cname;
            c.mode = mode;
            grid.cells.push_back(c);
          }
          continue;
        }
        for (const auto& [vname, v] : vectors) {
          GradManipSpec spec{mode, v, config.layers};
          ManipCell cell = run(data, defense, &spec);
          cell.defense = dname;
          cell.vector = vname;
          cell.corpus = cname;
          cell.mode = mode;
          grid.cells.push_back(cell);
        }
      }
    }
  }
  return grid;
}

// ---- loss analysis ----

std::vector<LossPair> loss_delta(const nn::Model& model, const corpus::Corpus& corpus,
                                 const defense::DefenseSpec& defense, const corpus::VocabLayout& layout,
                                 std::uint64_t seed) {
  defense.validate(model.config(), layout);
  Rng rng(seed);
  std::vector<ConditionPair> pairs;
  for (const auto& s : corpus) pairs.push_back(make_condition_pair(s, defense, rng, layout));
  std::vector<LossPair> out(pairs.size());
  parallel_for(pairs.size(), [&](std::size_t i) {
    out[i] = LossPair{i, response_loss(model, pairs[i].off, {}), response_loss(model, pairs[i].on, pairs[i].steering)};
  });
  return out;
}

std::string loss_pairs_csv(const std::vector<LossPair>& pairs) {
  std::ostringstream os;
  os << "sample,loss_off,loss_on\n";
  for (const auto& p : pairs) os << p.sample << ',' << fmt(p.loss_off) << ',' << fmt(p.loss_on) << '\n';
  return os.str();
}

std::vector<SweepPoint> intensity_sweep(const nn::Model& model, const corpus::Corpus& corpus,
                                        const personas::PersonaVector& vector,
                                        const std::vector<std::size_t>& steer_layers, std::size_t cbar_layer,
                                        const std::vector<double>& epsilons, const corpus::MarkerBank* bank,
                                        const corpus::VocabLayout& layout, std::uint64_t seed) {
  check_layers(model, steer_layers);
  check_layers(model, {cbar_layer});
  if (corpus.empty()) throw std::invalid_argument("intensity_sweep: empty corpus");
  const auto v = unit(vector.per_layer.row(cbar_layer));
  std::vector<SweepPoint> out;
  for (int with_marker = 0; with_marker < (bank ? 2 : 1); ++with_marker) {
    corpus::Corpus data = corpus;
    if (with_marker) {
      Rng rng(seed);
      for (auto& s : data) s = corpus::inject_marker(s, *bank, rng, layout);
    }
    for (double eps : epsilons) {
      const auto steering = steer_at(vector, steer_layers, eps);
      std::vector<double> losses(data.size()), cbars(data.size());
      parallel_for(data.size(), [&](std::size_t i) {
        const auto tg = tap_gradients(model, data[i], steering, {cbar_layer});
        losses[i] = tg.loss / static_cast<double>(data[i].response.size());
        Acc acc;
        for (std::size_t t = data[i].response.begin; t < data[i].response.end; ++t) acc.add(cos_unit(tg.grads[0].row(t), v));
        cbars[i] = acc.mean();
      });
      const auto c = mean_sem(cbars);
      out.push_back(SweepPoint{eps, with_marker == 1, mean_sem(losses).mean, c.mean, c.sem});
    }
  }
  return out;
}

std::string sweep_csv(const std::vector<SweepPoint>& points) {
  std::ostringstream os;
  os << "epsilon,marker,mean_loss,mean_cbar,cbar_sem\n";
  for (const auto& p : points) {
    os << fmt(p.epsilon) << ',' << (p.marker ? 1 : 0) << ',' << fmt(p.mean_loss) << ',' << fmt(p.mean_cbar) << ','
       << fmt(p.cbar_sem) << '\n';
  }
  return os.str();
}

// ---- activation change after one step ----

nn::Model sgd_step(const nn::Model& model, const corpus::Corpus& batch, const std::vector<nn::SteerSpec>& steering,
                   double lr) {
  if (batch.empty()) throw std::invalid_argument("sgd_step: empty batch");
  nn::Model m = model;
  std::vector<Tensor> grads;
  const double weight = 1.0 / static_cast<double>(batch.size());
  for (const auto& s : batch) train::accumulate_sample_gradient(m, s, steering, nullptr, weight, grads);
  for (std::size_t i : m.trainable_indices()) {
    if (i >= grads.size() || grads[i].empty()) continue;
    auto& theta = m.parameters()[i].value;
    for (std::size_t k = 0; k < theta.size(); ++k) theta[k] -= lr * grads[i][k];
  }
  return m;
}

std::string DeltaResult::to_csv() const {
  std::ostringstream os;
  os << "sample,layer,token,cos_delta_grad,cos_delta_v,cos_grad_v\n";
  for (const auto& r : records) {
    os << r.sample << ',' << r.layer << ',' << r.token << ',' << fmt(r.cos_delta_grad) << ',' << fmt(r.cos_delta_v)
       << ',' << fmt(r.cos_grad_v) << '\n';
  }
  return os.str();
}

json DeltaResult::summary() const {
  json per_layer = json::array();
  for (std::size_t s = 0; s < layers.size(); ++s) {
    per_layer.push_back({{"layer", layers[s]},
                         {"mean_cos_delta_grad", mean_cos_delta_grad[s]},
                         {"half_step_cos_delta_grad", half_step_cos_delta_grad[s]},
                         {"halving_gap", halving_gap[s]},
                         {"mean_cos_delta_v", mean_cos_delta_v[s]},
                         {"mean_cos_grad_v", mean_cos_grad_v[s]},
                         {"mean_cos_defended_delta_v", mean_cos_defended_delta_v[s]},
                         {"mean_cos_defended_undefended", mean_cos_defended_undefended[s]}});
  }
  return {{"lr", lr}, {"update_ratio", update_ratio}, {"first_order", first_order}, {"layers", per_layer}};
}

DeltaResult delta_vs_grad(const nn::Model& model, const corpus::Corpus& batch, const personas::PersonaVector& trait,
                          const defense::DefenseSpec& defense, const train::TrainConfig& config,
                          const std::vector<std::size_t>& layers, const corpus::VocabLayout& layout,
                          std::uint64_t seed) {
  config.validate();
  if (config.optimizer != train::Optimizer::sgd) throw std::invalid_argument("delta_vs_grad: plain gradient descent required");
  if (!(config.lr > 0.0)) throw std::invalid_argument("delta_vs_grad: lr must be positive");
  if (batch.empty()) throw std::invalid_argument("delta_vs_grad: empty batch");
  check_layers(model, layers);
  defense.validate(model.config(), layout);
  std::vector<std::vector<double>> units;
  for (std::size_t l : layers) units.push_back(unit(trait.per_layer.row(l)));

  Rng rng(seed);
  std::vector<ConditionPair> pairs;
  for (const auto& s : batch) pairs.push_back(make_condition_pair(s, defense, rng, layout));

  const std::size_t nl = layers.size();
  struct Local {
    std::vector<DeltaRecord> records;
    std::vector<Acc> dg, dv, gv, half, def_v, def_undef;
    double ratio = 0.0;
  };
  std::vector<Local> local(pairs.size());
  parallel_for(pairs.size(), [&](std::size_t i) {
    const auto& p = pairs[i];
    Local& out = local[i];
    out.dg.resize(nl);
    out.dv.resize(nl);
    out.gv.resize(nl);
    out.half.resize(nl);
    out.def_v.resize(nl);
    out.def_undef.resize(nl);
    // Each sample takes its own single-sample step.
    const nn::Model full = sgd_step(model, {p.off}, {}, config.lr);
    const nn::Model half = sgd_step(model, {p.off}, {}, config.lr / 2.0);
    const nn::Model defended = sgd_step(model, {p.on}, p.steering, config.lr);

    double dsq = 0.0, tsq = 0.0;
    for (std::size_t k : model.trainable_indices()) {
      const auto& a = model.parameters()[k].value;
      const auto& b = full.parameters()[k].value;
      for (std::size_t j = 0; j < a.size(); ++j) {
        dsq += (b[j] - a[j]) * (b[j] - a[j]);
        tsq += a[j] * a[j];
      }
    }
    out.ratio = tsq > 0.0 ? std::sqrt(dsq / tsq) : 0.0;

    const auto grads = tap_gradients(model, p.off, {}, layers);
    const auto h0 = capture(model, p.off, layers);
    const auto h1 = capture(full, p.off, layers);
    const auto h2 = capture(half, p.off, layers);
    const auto h3 = capture(defended, p.off, layers);
    const std::size_t d = model.config().d_model;
    std::vector<double> delta(d), delta_half(d), delta_def(d);
    for (std::size_t s = 0; s < nl; ++s) {
      for (std::size_t t = p.off.response.begin; t < p.off.response.end; ++t) {
        auto g = grads.grads[s].row(t);
        for (std::size_t c = 0; c < d; ++c) {
          delta[c] = h1[s].at(t, c) - h0[s].at(t, c);
          delta_half[c] = h2[s].at(t, c) - h0[s].at(t, c);
          delta_def[c] = h3[s].at(t, c) - h0[s].at(t, c);
        }
        const double c_dg = cos_pair(delta, g);
        const double c_dv = cos_unit(delta, units[s]);
        const double c_gv = cos_unit(g, units[s]);
        if (!std::isnan(c_dg)) out.records.push_back({i, layers[s], t, c_dg, c_dv, c_gv});
        out.dg[s].add(c_dg);
        out.dv[s].add(c_dv);
        out.gv[s].add(c_gv);
        out.half[s].add(cos_pair(delta_half, g));
        out.def_v[s].add(cos_unit(delta_def, units[s]));
        out.def_undef[s].add(cos_pair(delta_def, delta));
      }
    }
  });

  DeltaResult r;
  r.layers = layers;
  r.lr = config.lr;
  std::vector<Acc> dg(nl), dv(nl), gv(nl), half(nl), def_v(nl), def_undef(nl);
  auto merge = [](Acc& into, const Acc& from) {
    into.sum += from.sum;
    into.n += from.n;
  };
  for (const auto& l : local) {
    r.records.insert(r.records.end(), l.records.begin(), l.records.end());
    r.update_ratio = std::max(r.update_ratio, l.ratio);
    for (std::size_t s = 0; s < nl; ++s) {
      merge(dg[s], l.dg[s]);
      merge(dv[s], l.dv[s]);
      merge(gv[s], l.gv[s]);
      merge(half[s], l.half[s]);
      merge(def_v[s], l.def_v[s]);
      merge(def_undef[s], l.def_undef[s]);
    }
  }
  for (std::size_t s = 0; s < nl; ++s) {
    r.mean_cos_delta_grad.push_back(dg[s].mean());
    r.mean_cos_delta_v.push_back(dv[s].mean());
    r.mean_cos_grad_v.push_back(gv[s].mean());
    r.half_step_cos_delta_grad.push_back(half[s].mean());
    r.halving_gap.push_back(std::abs(dg[s].mean() - half[s].mean()) / std::abs(half[s].mean()));
    r.mean_cos_defended_delta_v.push_back(def_v[s].mean());
    r.mean_cos_defended_undefended.push_back(def_undef[s].mean());
  }
  r.first_order = r.update_ratio <= 1e-2;
  return r;
}

// ---- IP against activation-difference steering ----

const SimilarityCurve& IpPpsResult::at(double epsilon) const {
  for (const auto& c : pps) {
    if (c.epsilon == epsilon) return c;
  }
  throw std::out_of_range("no similarity curve at epsilon " + fmt(epsilon));
}

std::string IpPpsResult::to_csv() const {
  std::ostringstream os;
  os << "layer,curve,epsilon,cosine\n";
  for (std::size_t s = 0; s < layers.size(); ++s) {
    os << layers[s] << ",baseline,0," << fmt(baseline[s]) << '\n';
    for (const auto& c : pps) os << layers[s] << ",pps," << fmt(c.epsilon) << ',' << fmt(c.per_layer[s]) << '\n';
  }
  return os.str();
}

json IpPpsResult::summary() const {
  json curves = json::array();
  for (const auto& c : pps) curves.push_back({{"epsilon", c.epsilon}, {"per_layer", c.per_layer}});
  return {{"layers", layers},
          {"baseline", baseline},
          {"self_check", self_check},
          {"pps", curves},
          {"extraction_samples", extraction_samples},
          {"comparison_samples", comparison_samples}};
}

IpPpsResult ip_vs_pps_gradient_similarity(const nn::Model& model, const corpus::Corpus& corpus,
                                          const corpus::MarkerBank& bank, const corpus::VocabLayout& layout,
                                          const std::vector<double>& epsilons, std::uint64_t seed) {
  if (corpus.size() < 4) throw std::invalid_argument("ip_vs_pps: need at least 4 samples");
  const std::size_t half = corpus.size() / 2;
  const corpus::Corpus extraction(corpus.begin(), corpus.begin() + static_cast<std::ptrdiff_t>(half));
  const corpus::Corpus comparison(corpus.begin() + static_cast<std::ptrdiff_t>(half), corpus.end());

  IpPpsResult r;
  r.extraction_samples = extraction.size();
  r.comparison_samples = comparison.size();
  r.diff_vectors = personas::extract_prompt_diff_vectors(model, extraction, bank, layout, derive_seed(seed, 1));
  r.layers = defense::all_block_layers(model.config());
  const std::size_t nl = r.layers.size();

  Rng rng(derive_seed(seed, 2));
  std::vector<corpus::CorpusSample> marked;
  for (const auto& s : comparison) marked.push_back(corpus::inject_marker(s, bank, rng, layout));

  // [sample][curve][layer] accumulators; curve 0 baseline, 1 self, 2.. epsilons.
  const std::size_t n_curves = 2 + epsilons.size();
  std::vector<std::vector<std::vector<Acc>>> acc(comparison.size(),
                                                 std::vector<std::vector<Acc>>(n_curves, std::vector<Acc>(nl)));
  parallel_for(comparison.size(), [&](std::size_t i) {
    const auto& clean = comparison[i];
    const auto& m = marked[i];
    const std::size_t offset = m.tokens.size() - clean.tokens.size();
    const std::size_t first = m.marker->span.begin;
    for (std::size_t t = first; t < clean.tokens.size(); ++t) {
      if (clean.tokens[t] != m.tokens[t + offset]) throw AlignmentError("ip_vs_pps: marked sample does not align");
    }
    const auto ip = tap_gradients(model, m, {}, r.layers);
    std::vector<TapGradients> others;
    others.push_back(tap_gradients(model, clean, {}, r.layers));
    for (double eps : epsilons) {
      others.push_back(eps == 0.0 ? others.front() : tap_gradients(model, clean, steer_at(r.diff_vectors, r.layers, eps), r.layers));
    }
    for (std::size_t s = 0; s < nl; ++s) {
      for (std::size_t t = first; t < clean.tokens.size(); ++t) {
        const auto gi = ip.grads[s].row(t + offset);
        acc[i][0][s].add(cos_pair(gi, others[0].grads[s].row(t)));
        acc[i][1][s].add(cos_pair(gi, gi));
        for (std::size_t e = 0; e < epsilons.size(); ++e) acc[i][2 + e][s].add(cos_pair(gi, others[1 + e].grads[s].row(t)));
      }
    }
  });

  std::vector<std::vector<Acc>> total(n_curves, std::vector<Acc>(nl));
  for (const auto& a : acc) {
    for (std::size_t c = 0; c < n_curves; ++c) {
      for (std::size_t s = 0; s < nl; ++s) {
        total[c][s].sum += a[c][s].sum;
        total[c][s].n += a[c][s].n;
      }
    }
  }
  for (std::size_t s = 0; s < nl; ++s) {
    r.baseline.push_back(total[0][s].mean());
    r.self_check.push_back(total[1][s].mean());
  }
  for (std::size_t e = 0; e < epsilons.size(); ++e) {
    SimilarityCurve c{epsilons[e], {}};
    for (std::size_t s = 0; s < nl; ++s) c.per_layer.push_back(total[2 + e][s].mean());
    r.pps.push_back(std::move(c));
  }
  return r;
}

// ---- projections and cross-trait sweep ----

std::vector<std::vector<double>> activation_projection(const std::vector<const nn::Model*>& models,
                                                       const corpus::Corpus& corpus, const Tensor& vector,
                                                       std::size_t layer, const std::vector<nn::SteerSpec>& steering) {
  if (!(norm(vector.span()) > 0.0)) throw std::invalid_argument("activation_projection: zero-norm vector");
  std::vector<std::vector<double>> out;
  for (const nn::Model* m : models) {
    check_layers(*m, {layer});
    if (vector.size() != m->config().d_model) throw ShapeError("activation_projection: vector width does not match the model");
    std::vector<std::vector<double>> per_sample(corpus.size());
    parallel_for(corpus.size(), [&](std::size_t i) {
      ad::Tape tape(false);
      defense::install_steering(tape, steering);
      m->forward(tape, corpus[i].tokens);
      const Tensor& h = tape.tap_point(nn::tap_name(layer)).captured;
      for (std::size_t t = corpus[i].response.begin; t < corpus[i].response.end; ++t) {
        per_sample[i].push_back(dot(h.row(t), vector.span()));
      }
    });
    std::vector<double> flat;
    for (const auto& p : per_sample) flat.insert(flat.end(), p.begin(), p.end());
    out.push_back(std::move(flat));
  }
  return out;
}

const CrossCell& CrossTraitResult::at(const std::string& data, const std::string& steer, const std::string& compare,
                                      double epsilon) const {
  for (const auto& c : cells) {
    if (c.data_trait == data && c.steer_trait == steer && c.compare_trait == compare && c.epsilon == epsilon) return c;
  }
  throw std::out_of_range("no cross-trait cell " + data + "/" + steer + "/" + compare);
}

double CrossTraitResult::prediction(const std::string& data, const std::string& steer, double epsilon) const {
  const auto& c = at(data, steer, data, epsilon);
  auto it = std::find(layers.begin(), layers.end(), steering_layer);
  if (it == layers.end()) throw std::out_of_range("steering layer not among analysed layers");
  return c.per_layer[static_cast<std::size_t>(it - layers.begin())];
}

std::string CrossTraitResult::to_csv() const {
  std::ostringstream os;
  os << "data,steer,compare,epsilon,layer,cbar\n";
  for (const auto& c : cells) {
    for (std::size_t s = 0; s < layers.size(); ++s) {
      os << c.data_trait << ',' << c.steer_trait << ',' << c.compare_trait << ',' << fmt(c.epsilon) << ',' << layers[s]
         << ',' << fmt(c.per_layer[s]) << '\n';
    }
  }
  return os.str();
}

CrossTraitResult cross_trait_sweep(const nn::Model& model, const Named<corpus::Corpus>& corpora,
                                   const Named<personas::PersonaVector>& vectors, const std::vector<double>& epsilons,
                                   const std::vector<std::size_t>& layers, std::size_t steering_layer) {
  check_layers(model, layers);
  check_layers(model, {steering_layer});
  CrossTraitResult r;
  r.layers = layers;
  r.steering_layer = steering_layer;
  const std::size_t nl = layers.size();
  std::vector<std::vector<std::vector<double>>> units;  // [vector][layer slot]
  for (const auto& [name, v] : vectors) {
    std::vector<std::vector<double>> per;
    for (std::size_t l : layers) per.push_back(unit(v.per_layer.row(l)));
    units.push_back(std::move(per));
  }
  for (const auto& [dname, data] : corpora) {
    for (const auto& [sname, sv] : vectors) {
      for (double eps : epsilons) {
        const auto steering = steer_at(sv, {steering_layer}, eps);
        // [sample][compare][layer]
        std::vector<std::vector<std::vector<double>>> means(
            data.size(), std::vector<std::vector<double>>(vectors.size(), std::vector<double>(nl, kNaN)));
        parallel_for(data.size(), [&](std::size_t i) {
          const auto tg = tap_gradients(model, data[i], steering, layers);
          for (std::size_t c = 0; c < vectors.size(); ++c) {
            for (std::size_t s = 0; s < nl; ++s) {
              Acc acc;
              for (std::size_t t = data[i].response.begin; t < data[i].response.end; ++t) {
                acc.add(cos_unit(tg.grads[s].row(t), units[c][s]));
              }
              means[i][c][s] = acc.mean();
            }
          }
        });
        for (std::size_t c = 0; c < vectors.size(); ++c) {
          CrossCell cell{dname, sname, vectors[c].first, eps, {}};
          for (std::size_t s = 0; s < nl; ++s) {
            std::vector<double> xs;
            for (const auto& m : means) xs.push_back(m[c][s]);
            cell.per_layer.push_back(mean_sem(xs).mean);
          }
          r.cells.push_back(std::move(cell));
        }
      }
    }
  }
  return r;
}

}  // namespace gradshield::graddiag
