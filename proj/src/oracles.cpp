#include "gradshield/oracles.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <functional>
#include <map>
#include <numeric>

#include "gradshield/autodiff.hpp"
#include "gradshield/corpus.hpp"
#include "gradshield/decomp.hpp"
#include "gradshield/model.hpp"
#include "gradshield/personas.hpp"
#include "gradshield/random.hpp"

namespace gradshield::oracles {

using ad::Tape;
using ad::Var;

namespace {

class Hasher {
 public:
  void add(const double* p, std::size_t n) { bytes(p, n * sizeof(double)); }
  void add(const std::vector<double>& v) { add(v.data(), v.size()); }
  void add(const Tensor& t) { add(t.data(), t.size()); }
  void add(const std::vector<int>& v) { bytes(v.data(), v.size() * sizeof(int)); }
  void add(double x) { add(&x, 1); }
  std::string hex() const {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h_));
    return buf;
  }

 private:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h_ ^= b[i];
      h_ *= 0x100000001b3ULL;
    }
  }
  std::uint64_t h_ = 0xcbf29ce484222325ULL;
};

Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (auto& x : t.values()) x = scale * rng.normal();
  return t;
}

OracleResult finish(std::string name, const Hasher& h, double expected, double actual, double tolerance,
                    std::string detail = {}) {
  OracleResult r;
  r.name = std::move(name);
  r.inputs_hash = h.hex();
  r.expected = expected;
  r.actual = actual;
  r.tolerance = tolerance;
  r.passed = std::isfinite(actual) && std::abs(actual - expected) <= tolerance;
  r.detail = std::move(detail);
  return r;
}

using Builder = std::function<Var(Tape&, std::vector<Var>&)>;

double evaluate(const Builder& f, const std::vector<Tensor>& inputs) {
  Tape tape(false);
  std::vector<Var> vars;
  for (const auto& x : inputs) vars.push_back(tape.constant(x));
  return f(tape, vars).value()[0];
}

double norm_relative_error(const std::vector<double>& analytic, const std::vector<double>& numeric) {
  double diff = 0.0, scale = 0.0;
  for (std::size_t i = 0; i < numeric.size(); ++i) {
    diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
    scale = std::max(scale, std::max(std::abs(analytic[i]), std::abs(numeric[i])));
  }
  const double denom = std::max(scale * std::sqrt(static_cast<double>(numeric.size())), 1e-8);
  return std::sqrt(diff) / denom;
}

double gradient_error(const Builder& f, std::vector<Tensor> inputs, double step = 1e-5) {
  Tape tape;
  std::vector<Var> vars;
  for (const auto& x : inputs) vars.push_back(tape.input(x));
  tape.backward(f(tape, vars));
  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const Tensor analytic = tape.grad(vars[k]);
    std::vector<double> numeric(inputs[k].size());
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      const double keep = inputs[k][i];
      inputs[k][i] = keep + step;
      const double up = evaluate(f, inputs);
      inputs[k][i] = keep - step;
      const double down = evaluate(f, inputs);
      inputs[k][i] = keep;
      numeric[i] = (up - down) / (2.0 * step);
    }
    worst = std::max(worst, norm_relative_error(analytic.values(), numeric));
  }
  return worst;
}

Var project(Tape& tape, Var y, std::uint64_t seed) {
  Rng rng(seed);
  Var w = tape.constant(random_tensor(y.value().shape(), rng));
  return ad::sum(ad::mul(y, w));
}

double plain_gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

std::vector<double> plain_softmax(std::vector<double> z) {
  const double m = *std::max_element(z.begin(), z.end());
  double s = 0.0;
  for (double& x : z) s += (x = std::exp(x - m));
  for (double& x : z) x /= s;
  return z;
}

}  // namespace

nlohmann::json OracleResult::to_json() const {
  return {{"name", name},         {"inputs_hash", inputs_hash}, {"expected", expected}, {"actual", actual},
          {"tolerance", tolerance}, {"passed", passed},           {"detail", detail}};
}

std::vector<GradientCheck> primitive_gradient_checks(std::uint64_t seed, int trials) {
  using namespace ad;
  Rng rng(seed);
  std::vector<GradientCheck> out;
  for (int trial = 0; trial < trials; ++trial) {
    const std::size_t n = 2 + rng.index(4), m = 2 + rng.index(4), k = 2 + rng.index(4);
    const std::uint64_t ps = derive_seed(seed, static_cast<std::uint64_t>(trial));
    auto check = [&](const char* name, const Builder& f, std::vector<Tensor> inputs) {
      out.push_back({name, trial, gradient_error(f, std::move(inputs))});
    };
    check("matmul", [&](Tape& t, auto& v) { return project(t, matmul(v[0], v[1]), ps); },
          {random_tensor({n, m}, rng), random_tensor({m, k}, rng)});
    check("add", [&](Tape& t, auto& v) { return project(t, add(v[0], v[1]), ps); },
          {random_tensor({n, m}, rng), random_tensor({n, m}, rng)});
    check("mul", [&](Tape& t, auto& v) { return project(t, mul(v[0], v[1]), ps); },
          {random_tensor({n, m}, rng), random_tensor({n, m}, rng)});
    check("add_row", [&](Tape& t, auto& v) { return project(t, add_row(v[0], v[1]), ps); },
          {random_tensor({n, m}, rng), random_tensor({m}, rng)});
    check("scale", [&](Tape& t, auto& v) { return project(t, scale(v[0], -1.7), ps); }, {random_tensor({n, m}, rng)});
    check("sum", [&](Tape&, auto& v) { return sum(mul(v[0], v[0])); },
          {random_tensor({n, m}, rng)});
    check("layer_norm", [&](Tape& t, auto& v) { return project(t, layer_norm(v[0], v[1], v[2]), ps); },
          {random_tensor({n, m + 1}, rng), random_tensor({m + 1}, rng), random_tensor({m + 1}, rng)});
    check("gelu", [&](Tape& t, auto& v) { return project(t, gelu(v[0]), ps); }, {random_tensor({n, m}, rng)});
    check("softmax_rows", [&](Tape& t, auto& v) { return project(t, softmax_rows(v[0]), ps); },
          {random_tensor({n, m}, rng, 2.0)});
    check("embedding",
          [&](Tape& t, auto& v) {
            std::vector<int> ids{0, 2, 2, 1};
            return project(t, embedding(v[0], ids), ps);
          },
          {random_tensor({3, m}, rng)});
    const std::size_t heads = 1 + rng.index(2);
    const std::size_t width = heads * (1 + rng.index(3));
    check("causal_attention",
          [&](Tape& t, auto& v) { return project(t, causal_attention(v[0], v[1], v[2], heads), ps); },
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
            Rng local(ps + 100);
            t.install_steering("h", random_tensor({m}, local), 1.5);
            return project(t, gelu(t.tap("h", v[0])), ps);
          },
          {random_tensor({n, m}, rng)});
  }
  return out;
}

OracleResult mlp_plain_loops(std::uint64_t seed) {
  Rng rng(derive_seed(seed, 1));
  const std::size_t n = 5, din = 6, hid = 8, out = 4;
  std::vector<Tensor> p{random_tensor({n, din}, rng), random_tensor({din, hid}, rng, 0.5), random_tensor({hid}, rng),
                        random_tensor({hid, out}, rng, 0.5), random_tensor({out}, rng)};
  const std::vector<int> targets{0, 3, 1, 2, 3};
  const std::vector<double> weights{1, 1, 0, 1, 1};
  Hasher h;
  for (const auto& t : p) h.add(t);

  auto loss_loops = [&](const std::vector<Tensor>& q) {
    double total = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
      std::vector<double> hidden(hid);
      for (std::size_t j = 0; j < hid; ++j) {
        double a = q[2][j];
        for (std::size_t i = 0; i < din; ++i) a += q[0].at(r, i) * q[1].at(i, j);
        hidden[j] = plain_gelu(a);
      }
      std::vector<double> z(out);
      for (std::size_t c = 0; c < out; ++c) {
        z[c] = q[4][c];
        for (std::size_t j = 0; j < hid; ++j) z[c] += hidden[j] * q[3].at(j, c);
      }
      const double m = *std::max_element(z.begin(), z.end());
      double s = 0.0;
      for (double x : z) s += std::exp(x - m);
      total += weights[r] * (m + std::log(s) - z[static_cast<std::size_t>(targets[r])]);
    }
    return total;
  };

  Tape tape;
  std::vector<Var> v;
  for (const auto& t : p) v.push_back(tape.input(t));
  Var hidden = ad::gelu(ad::add_row(ad::matmul(v[0], v[1]), v[2]));
  Var loss = ad::cross_entropy(ad::add_row(ad::matmul(hidden, v[3]), v[4]), targets, weights);
  tape.backward(loss);
  const double value_gap = std::abs(loss.value()[0] - loss_loops(p));

  double worst = 0.0;
  const double step = 1e-5;
  for (std::size_t k = 1; k < p.size(); ++k) {
    std::vector<double> numeric(p[k].size());
    for (std::size_t i = 0; i < p[k].size(); ++i) {
      const double keep = p[k][i];
      p[k][i] = keep + step;
      const double up = loss_loops(p);
      p[k][i] = keep - step;
      const double down = loss_loops(p);
      p[k][i] = keep;
      numeric[i] = (up - down) / (2.0 * step);
    }
    worst = std::max(worst, norm_relative_error(tape.grad(v[k]).values(), numeric));
  }
  return finish("mlp_plain_loops", h, 0.0, std::max(worst, value_gap), 1e-6,
                "max relative gradient error against central differences of a plain-loop forward");
}

OracleResult linear_delta_closed_form(std::uint64_t seed) {
  Rng rng(derive_seed(seed, 2));
  const std::size_t s_len = 7, din = 5, vocab = 6;
  const double lr = 0.1;
  const Tensor x = random_tensor({s_len, din}, rng);
  const Tensor w = random_tensor({din, vocab}, rng, 0.5);
  std::vector<int> y(s_len);
  for (auto& t : y) t = static_cast<int>(rng.index(vocab));
  const std::vector<double> ones(s_len, 1.0);
  Hasher h;
  h.add(x);
  h.add(w);
  h.add(y);
  h.add(lr);

  // Library route: tape gradient, parameter update, rerun.
  Tape tape;
  Var wv = tape.parameter(w, true);
  Var hv = tape.tap("h", ad::matmul(tape.constant(x), wv));
  tape.backward(ad::cross_entropy(hv, y, ones));
  Tensor w2 = w;
  const Tensor gw = tape.grad(wv);
  for (std::size_t i = 0; i < w2.size(); ++i) w2[i] -= lr * gw[i];
  Tape rerun(false);
  const Tensor h2 = ad::matmul(rerun.constant(x), rerun.constant(w2)).value();
  const Tensor& h1 = hv.value();

  // Closed form with a hand-written softmax gradient.
  double worst = 0.0, tap_gap = 0.0;
  std::vector<std::vector<double>> gh(s_len);
  for (std::size_t s = 0; s < s_len; ++s) {
    std::vector<double> z(h1.row(s).begin(), h1.row(s).end());
    gh[s] = plain_softmax(z);
    gh[s][static_cast<std::size_t>(y[s])] -= 1.0;
    for (std::size_t c = 0; c < vocab; ++c) {
      tap_gap = std::max(tap_gap, std::abs(gh[s][c] - tape.tap_point("h").gradient.at(s, c)));
    }
  }
  for (std::size_t t = 0; t < s_len; ++t) {
    for (std::size_t c = 0; c < vocab; ++c) {
      double d = 0.0;
      for (std::size_t s = 0; s < s_len; ++s) {
        double dot = 0.0;
        for (std::size_t i = 0; i < din; ++i) dot += x.at(t, i) * x.at(s, i);
        d += dot * gh[s][c];
      }
      worst = std::max(worst, std::abs(-lr * d - (h2.at(t, c) - h1.at(t, c))));
    }
  }
  return finish("linear_delta_closed_form", h, 0.0, std::max(worst, tap_gap), 1e-10,
                "max abs gap between the realised and closed-form activation change");
}

std::vector<double> jacobi_singular_values(std::vector<double> a, std::size_t rows, std::size_t cols) {
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p + 1 < cols; ++p) {
      for (std::size_t q = p + 1; q < cols; ++q) {
        double alpha = 0.0, beta = 0.0, gamma = 0.0;
        for (std::size_t i = 0; i < rows; ++i) {
          const double ap = a[i * cols + p], aq = a[i * cols + q];
          alpha += ap * ap;
          beta += aq * aq;
          gamma += ap * aq;
        }
        if (gamma == 0.0) continue;
        off = std::max(off, std::abs(gamma) / std::sqrt(alpha * beta));
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t), s = c * t;
        for (std::size_t i = 0; i < rows; ++i) {
          const double ap = a[i * cols + p], aq = a[i * cols + q];
          a[i * cols + p] = c * ap - s * aq;
          a[i * cols + q] = s * ap + c * aq;
        }
      }
    }
    if (off < 1e-15) break;
  }
  std::vector<double> sv(cols);
  for (std::size_t j = 0; j < cols; ++j) {
    double n = 0.0;
    for (std::size_t i = 0; i < rows; ++i) n += a[i * cols + j] * a[i * cols + j];
    sv[j] = std::sqrt(n);
  }
  std::sort(sv.rbegin(), sv.rend());
  return sv;
}

OracleResult jacobi_svd_spectrum(std::uint64_t seed) {
  Rng rng(derive_seed(seed, 3));
  const std::size_t rows = 6, cols = 4;
  Tensor raw = random_tensor({rows, cols}, rng);
  Hasher h;
  h.add(raw);
  const auto matrix = decomp::make_grad_diff_matrix(raw, 0);
  const auto pca = decomp::uncentered_pca(matrix);

  double fro = 0.0;
  for (double v : raw.values()) fro += v * v;
  std::vector<double> a = raw.values();
  for (double& v : a) v /= std::sqrt(fro);
  const auto sv = jacobi_singular_values(a, rows, cols);
  double worst = 0.0;
  for (std::size_t k = 0; k < cols; ++k) {
    worst = std::max(worst, std::abs(sv[k] * sv[k] / static_cast<double>(rows - 1) - pca.eigenvalues[k]));
  }
  return finish("jacobi_svd_spectrum", h, 0.0, worst, 1e-8,
                "max eigenvalue gap between the eigensolver and hand-rolled Jacobi SVD");
}

OracleResult patch_and_rerun_steering(std::uint64_t seed) {
  nn::ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.d_model = 16;
  cfg.n_heads = 2;
  cfg.vocab_size = 20;
  cfg.max_seq = 16;
  cfg.seed = derive_seed(seed, 4);
  const nn::Model model = nn::Model::build(cfg);
  Rng rng(derive_seed(seed, 5));
  std::vector<int> tokens(6);
  for (auto& t : tokens) t = static_cast<int>(rng.index(cfg.vocab_size));
  const Tensor v = random_tensor({cfg.d_model}, rng);
  const double eps = 1.3;
  Hasher h;
  h.add(tokens);
  h.add(v);
  h.add(static_cast<double>(model.base_weight_hash()));

  auto stream = model.open({nn::SteerSpec{cfg.n_layers, v, eps}});
  std::vector<double> lib;
  for (int t : tokens) lib = stream->push(t);

  // Unsteered forward, patch the final residual, recompute the head by hand.
  Tape tape(false);
  model.forward(tape, tokens);
  const auto last = tape.tap_point(nn::tap_name(cfg.n_layers)).captured.row(tokens.size() - 1);
  std::vector<double> x(last.begin(), last.end());
  for (std::size_t c = 0; c < x.size(); ++c) x[c] += eps * v[c];
  double mean = 0.0, var = 0.0;
  for (double e : x) mean += e;
  mean /= static_cast<double>(x.size());
  for (double e : x) var += (e - mean) * (e - mean);
  var /= static_cast<double>(x.size());
  const Tensor& g = model.parameter("ln_f.g").value;
  const Tensor& b = model.parameter("ln_f.b").value;
  const Tensor& u = model.parameter("unembed").value;
  std::vector<double> z(cfg.vocab_size, 0.0);
  for (std::size_t c = 0; c < x.size(); ++c) {
    const double hf = (x[c] - mean) / std::sqrt(var + 1e-5) * g[c] + b[c];
    for (std::size_t k = 0; k < z.size(); ++k) z[k] += hf * u.at(c, k);
  }
  const auto p = plain_softmax(z);
  double worst = 0.0;
  for (std::size_t k = 0; k < p.size(); ++k) worst = std::max(worst, std::abs(p[k] - lib[k]));
  return finish("patch_and_rerun_steering", h, 0.0, worst, 1e-10,
                "max probability gap between steered decoding and a patched rerun of the head");
}

OracleResult activation_average(std::uint64_t seed) {
  nn::ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.d_model = 8;
  cfg.n_heads = 2;
  cfg.vocab_size = 16;
  cfg.max_seq = 12;
  cfg.seed = derive_seed(seed, 6);
  const nn::Model model = nn::Model::build(cfg);
  Rng rng(derive_seed(seed, 7));
  auto make = [&](double label) {
    corpus::CorpusSample s;
    const std::size_t len = 5 + rng.index(5);
    s.tokens.push_back(corpus::VocabLayout::kBos);
    while (s.tokens.size() < len) s.tokens.push_back(3 + static_cast<int>(rng.index(cfg.vocab_size - 3)));
    s.prompt = {0, 2};
    s.response = {2, len};
    s.trait_label = label;
    return s;
  };
  corpus::Corpus trait, anti;
  for (double l : {80.0, 30.0, 90.0, 55.0}) trait.push_back(make(l));
  for (double l : {10.0, 60.0, 5.0, 45.0}) anti.push_back(make(l));
  Hasher h;
  for (const auto* c : {&trait, &anti}) {
    for (const auto& s : *c) {
      h.add(s.tokens);
      h.add(s.trait_label);
    }
  }
  const double threshold = 50.0;
  const auto lib = personas::extract_persona_vector(model, trait, anti, threshold, "oracle");

  // Padded batch capture, filtered and averaged by hand.
  std::vector<std::size_t> layers(cfg.n_layers + 1);
  std::iota(layers.begin(), layers.end(), 0);
  auto average = [&](const corpus::Corpus& c, bool high) {
    std::vector<const corpus::CorpusSample*> kept;
    for (const auto& s : c) {
      if (high ? s.trait_label >= threshold : s.trait_label <= 100.0 - threshold) kept.push_back(&s);
    }
    std::size_t width = 0;
    for (const auto* s : kept) width = std::max(width, s->tokens.size());
    std::vector<std::vector<int>> batch;
    std::vector<std::size_t> lengths;
    for (const auto* s : kept) {
      auto row = s->tokens;
      row.resize(width, corpus::VocabLayout::kPad);
      batch.push_back(row);
      lengths.push_back(s->tokens.size());
    }
    const auto acts = nn::capture_activations(model, batch, lengths, layers);
    std::vector<std::vector<double>> mean(layers.size(), std::vector<double>(cfg.d_model, 0.0));
    double count = 0.0;
    for (std::size_t b = 0; b < kept.size(); ++b) {
      for (std::size_t t = kept[b]->response.begin; t < kept[b]->response.end; ++t) {
        count += 1.0;
        for (std::size_t l = 0; l < layers.size(); ++l) {
          const auto row = acts.at(b, l, t);
          for (std::size_t c = 0; c < cfg.d_model; ++c) mean[l][c] += row[c];
        }
      }
    }
    for (auto& r : mean) {
      for (double& e : r) e /= count;
    }
    return mean;
  };
  const auto a = average(trait, true), b = average(anti, false);
  double worst = 0.0;
  for (std::size_t c = 0; c < cfg.d_model; ++c) worst = std::max(worst, std::abs(lib.per_layer.at(0, c)));
  for (std::size_t l = 1; l < layers.size(); ++l) {
    for (std::size_t c = 0; c < cfg.d_model; ++c) {
      worst = std::max(worst, std::abs(lib.per_layer.at(l, c) - (a[l][c] - b[l][c])));
    }
  }
  return finish("activation_average", h, 0.0, worst, 1e-12,
                "max gap between the extracted vector and a hand-averaged padded-batch capture");
}

namespace {

// Next-token distribution depends on the previous token only.
class TableModel : public LanguageModel {
 public:
  explicit TableModel(std::vector<std::vector<double>> table) : table_(std::move(table)) {}
  std::size_t vocab_size() const override { return table_.size(); }
  std::unique_ptr<TokenStream> open() const override { return std::make_unique<Stream>(table_); }

 private:
  struct Stream : TokenStream {
    explicit Stream(const std::vector<std::vector<double>>& t) : table(t) {}
    std::vector<double> push(int token) override { return table[static_cast<std::size_t>(token)]; }
    const std::vector<std::vector<double>>& table;
  };
  std::vector<std::vector<double>> table_;
};

}  // namespace

OracleResult exhaustive_trait_score(std::uint64_t seed) {
  const std::size_t vocab = 4, response_len = 3, generations = 4000;
  Rng rng(derive_seed(seed, 8));
  std::vector<std::vector<double>> table(vocab, std::vector<double>(vocab));
  for (auto& row : table) {
    double s = 0.0;
    for (double& p : row) s += (p = 0.2 + rng.uniform());
    for (double& p : row) p /= s;
  }
  corpus::TraitSpec trait;
  trait.name = "oracle";
  trait.trait_tokens = {3};
  trait.trigger_contexts = {{2}, {1, 3}};
  const std::vector<int> prompt{1, 2};
  Hasher h;
  for (const auto& row : table) h.add(row);
  h.add(prompt);

  // Every response of length 3, weighted by its probability; pairs with no
  // post-trigger position are dropped, as the scorer does.
  double weighted = 0.0, kept = 0.0;
  for (std::size_t code = 0; code < 64; ++code) {
    std::vector<int> ctx = prompt;
    double prob = 1.0, mass = 0.0;
    std::size_t counted = 0;
    std::size_t rest = code;
    for (std::size_t j = 0; j < response_len; ++j) {
      const auto& dist = table[static_cast<std::size_t>(ctx.back())];
      if (trait.is_post_trigger(ctx, ctx.size())) {
        mass += dist[3];
        ++counted;
      }
      const int next = static_cast<int>(rest % vocab);
      rest /= vocab;
      prob *= dist[static_cast<std::size_t>(next)];
      ctx.push_back(next);
    }
    if (counted == 0) continue;
    weighted += prob * 100.0 * mass / static_cast<double>(counted);
    kept += prob;
  }
  const double exact = weighted / kept;
  const TableModel model(table);
  const auto score = corpus::score_trait_expression(model, trait, {prompt}, generations, derive_seed(seed, 9),
                                                    response_len);
  return finish("exhaustive_trait_score", h, exact, score.score, 4.0 * score.sem,
                "sampled score against exact enumeration of all continuations, within 4 SEM");
}

std::vector<OracleResult> run_oracle_suite(std::uint64_t seed) {
  std::vector<OracleResult> out;
  out.push_back(mlp_plain_loops(seed));
  out.push_back(linear_delta_closed_form(seed));
  out.push_back(jacobi_svd_spectrum(seed));
  out.push_back(patch_and_rerun_steering(seed));
  out.push_back(activation_average(seed));
  out.push_back(exhaustive_trait_score(seed));
  return out;
}

nlohmann::json suite_manifest(const std::vector<OracleResult>& results, std::uint64_t seed) {
  nlohmann::json list = nlohmann::json::array();
  for (const auto& r : results) {
    // The sampled oracle's tolerance is data dependent; it is pinned by its hash.
    list.push_back({{"name", r.name}, {"inputs_hash", r.inputs_hash}, {"detail", r.detail}});
  }
  return {{"seed", seed}, {"oracles", list}};
}

std::vector<std::string> manifest_mismatches(const nlohmann::json& manifest, const std::vector<OracleResult>& results) {
  std::map<std::string, std::string> want;
  for (const auto& e : manifest.at("oracles")) want[e.at("name").get<std::string>()] = e.at("inputs_hash");
  std::vector<std::string> bad;
  for (const auto& r : results) {
    auto it = want.find(r.name);
    if (it == want.end() || it->second != r.inputs_hash) bad.push_back(r.name);
    if (it != want.end()) want.erase(it);
  }
  for (const auto& [name, _] : want) bad.push_back(name);
  return bad;
}

}  // namespace gradshield::oracles
