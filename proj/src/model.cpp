#include "gradshield/model.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <numbers>

namespace gradshield::nn {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const RowMat>;
using CVec = Eigen::Map<const Eigen::RowVectorXd>;

CMap mat(const Tensor& t) { return CMap(t.data(), t.rows(), t.cols()); }
CVec vec(const Tensor& t) { return CVec(t.data(), static_cast<Eigen::Index>(t.size())); }

Tensor random_matrix(Rng& rng, std::size_t rows, std::size_t cols, double stddev) {
  Tensor t({rows, cols});
  for (double& v : t.values()) v = stddev * rng.normal();
  return t;
}

constexpr double kLayerNormEps = 1e-5;

}  // namespace

void ModelConfig::validate() const {
  if (n_layers < 1 || d_model < 1 || n_heads < 1 || vocab_size < 1 || max_seq < 1) {
    throw ConfigError("model config: all sizes must be >= 1");
  }
  if (d_model % n_heads != 0) {
    throw ConfigError("model config: d_model " + std::to_string(d_model) + " not divisible by n_heads " +
                      std::to_string(n_heads));
  }
}

nlohmann::json ModelConfig::to_json() const {
  return {{"n_layers", n_layers}, {"d_model", d_model}, {"n_heads", n_heads}, {"vocab_size", vocab_size},
          {"max_seq", max_seq},   {"d_ff", d_ff},       {"seed", seed}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.n_layers = j.value("n_layers", c.n_layers);
  c.d_model = j.value("d_model", c.d_model);
  c.n_heads = j.value("n_heads", c.n_heads);
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.max_seq = j.value("max_seq", c.max_seq);
  c.d_ff = j.value("d_ff", c.d_ff);
  c.seed = j.value("seed", c.seed);
  c.validate();
  return c;
}

void AdapterConfig::validate() const {
  if (rank < 1) throw ConfigError("adapter config: rank must be >= 1");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("adapter config: dropout must be in [0, 1)");
  if (!std::isfinite(alpha)) throw ConfigError("adapter config: alpha must be finite");
  const auto& known = projection_names();
  for (const auto& t : targets) {
    if (std::find(known.begin(), known.end(), t) == known.end()) {
      throw ConfigError("adapter config: unknown projection '" + t + "'");
    }
  }
}

nlohmann::json AdapterConfig::to_json() const {
  return {{"rank", rank}, {"alpha", alpha}, {"dropout", dropout}, {"targets", targets}};
}

AdapterConfig AdapterConfig::from_json(const nlohmann::json& j) {
  AdapterConfig c;
  c.rank = j.value("rank", c.rank);
  c.alpha = j.value("alpha", c.alpha);
  c.dropout = j.value("dropout", c.dropout);
  if (j.contains("targets")) c.targets = j.at("targets").get<std::vector<std::string>>();
  c.validate();
  return c;
}

std::string tap_name(std::size_t layer) { return "resid." + std::to_string(layer); }

Model::Proj& Model::Block::proj(std::string_view name) {
  if (name == "q") return q;
  if (name == "k") return k;
  if (name == "v") return v;
  if (name == "o") return o;
  if (name == "gate") return gate;
  if (name == "up") return up;
  if (name == "down") return down;
  throw ConfigError("unknown projection '" + std::string(name) + "'");
}

const Model::Proj& Model::Block::proj(std::string_view name) const {
  return const_cast<Block*>(this)->proj(name);
}

std::size_t Model::add_param(std::string name, Tensor value) {
  const std::size_t idx = params_.size();
  index_[name] = idx;
  params_.push_back(Parameter{std::move(name), std::move(value), true, false});
  return idx;
}

void Model::rebuild_index() {
  index_.clear();
  for (std::size_t i = 0; i < params_.size(); ++i) index_[params_[i].name] = i;
  auto at = [&](const std::string& n) { return index_.at(n); };
  tok_emb_ = at("tok_emb");
  pos_emb_ = at("pos_emb");
  lnf_g_ = at("ln_f.g");
  lnf_b_ = at("ln_f.b");
  unembed_ = at("unembed");
  blocks_.clear();
  for (std::size_t l = 1; l <= config_.n_layers; ++l) {
    const std::string p = "blocks." + std::to_string(l) + ".";
    Block b{};
    b.ln1_g = at(p + "ln1.g");
    b.ln1_b = at(p + "ln1.b");
    b.ln2_g = at(p + "ln2.g");
    b.ln2_b = at(p + "ln2.b");
    for (const auto& name : projection_names()) {
      Proj& pr = b.proj(name);
      pr.weight = at(p + name + ".w");
      if (index_.contains(p + name + ".lora_a")) {
        pr.lora_a = at(p + name + ".lora_a");
        pr.lora_b = at(p + name + ".lora_b");
      }
    }
    blocks_.push_back(b);
  }
}

Model Model::build(const ModelConfig& config) {
  config.validate();
  Model m;
  m.config_ = config;
  Rng rng(derive_seed(config.seed, 0x6d6f64656cULL));
  const std::size_t d = config.d_model, f = config.ff_width(), V = config.vocab_size;
  const double emb_std = 1.0 / std::sqrt(static_cast<double>(d));
  const double out_scale = 1.0 / std::sqrt(2.0 * static_cast<double>(config.n_layers));
  m.add_param("tok_emb", random_matrix(rng, V, d, emb_std));
  m.add_param("pos_emb", random_matrix(rng, config.max_seq, d, 0.5 * emb_std));
  for (std::size_t l = 1; l <= config.n_layers; ++l) {
    const std::string p = "blocks." + std::to_string(l) + ".";
    m.add_param(p + "ln1.g", Tensor({d}, 1.0));
    m.add_param(p + "ln1.b", Tensor({d}, 0.0));
    m.add_param(p + "q.w", random_matrix(rng, d, d, 1.0 / std::sqrt(static_cast<double>(d))));
    m.add_param(p + "k.w", random_matrix(rng, d, d, 1.0 / std::sqrt(static_cast<double>(d))));
    m.add_param(p + "v.w", random_matrix(rng, d, d, 1.0 / std::sqrt(static_cast<double>(d))));
    m.add_param(p + "o.w", random_matrix(rng, d, d, out_scale / std::sqrt(static_cast<double>(d))));
    m.add_param(p + "ln2.g", Tensor({d}, 1.0));
    m.add_param(p + "ln2.b", Tensor({d}, 0.0));
    m.add_param(p + "gate.w", random_matrix(rng, d, f, 1.0 / std::sqrt(static_cast<double>(d))));
    m.add_param(p + "up.w", random_matrix(rng, d, f, 1.0 / std::sqrt(static_cast<double>(d))));
    m.add_param(p + "down.w", random_matrix(rng, f, d, out_scale / std::sqrt(static_cast<double>(f))));
  }
  m.add_param("ln_f.g", Tensor({d}, 1.0));
  m.add_param("ln_f.b", Tensor({d}, 0.0));
  m.add_param("unembed", random_matrix(rng, d, V, 1.0 / std::sqrt(static_cast<double>(d))));
  m.rebuild_index();
  return m;
}

void Model::attach_adapters(const AdapterConfig& config) {
  config.validate();
  if (adapters_) throw ConfigError("adapters already attached");
  for (const auto& b : blocks_) {
    for (const auto& name : config.targets) {
      const Tensor& w = params_[b.proj(name).weight].value;
      if (config.rank > std::min(w.rows(), w.cols())) {
        throw ConfigError("adapter rank " + std::to_string(config.rank) + " exceeds min dimension of " + name +
                          " projection " + shape_string(w.shape()));
      }
    }
  }
  Rng rng(derive_seed(config_.seed, 0x6c6f7261ULL));
  for (auto& p : params_) p.trainable = false;
  for (std::size_t l = 1; l <= config_.n_layers; ++l) {
    const std::string pre = "blocks." + std::to_string(l) + ".";
    for (const auto& name : config.targets) {
      const Tensor& w = params_[index_.at(pre + name + ".w")].value;
      const std::size_t in = w.rows(), out = w.cols();
      Tensor a = random_matrix(rng, in, config.rank, 1.0 / std::sqrt(static_cast<double>(in)));
      const std::size_t ia = add_param(pre + name + ".lora_a", std::move(a));
      const std::size_t ib = add_param(pre + name + ".lora_b", Tensor({config.rank, out}));
      params_[ia].adapter = params_[ib].adapter = true;
    }
  }
  adapters_ = config;
  rebuild_index();
}

Model Model::merged() const {
  Model m;
  m.config_ = config_;
  const double s = adapters_ ? adapters_->scaling() : 0.0;
  for (const auto& p : params_) {
    if (p.adapter) continue;
    m.params_.push_back(Parameter{p.name, p.value, true, false});
  }
  m.rebuild_index();
  if (adapters_) {
    for (std::size_t l = 0; l < blocks_.size(); ++l) {
      for (const auto& name : adapters_->targets) {
        const Proj& pr = blocks_[l].proj(name);
        Tensor& w = m.params_[m.blocks_[l].proj(name).weight].value;
        RowMat delta = mat(params_[*pr.lora_a].value) * mat(params_[*pr.lora_b].value);
        for (std::size_t i = 0; i < w.size(); ++i) w[i] += s * delta.data()[i];
      }
    }
  }
  return m;
}

Parameter& Model::parameter(std::string_view name) {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) throw std::out_of_range("no parameter '" + std::string(name) + "'");
  return params_[it->second];
}

const Parameter& Model::parameter(std::string_view name) const { return const_cast<Model*>(this)->parameter(name); }

bool Model::has_parameter(std::string_view name) const { return index_.contains(std::string(name)); }

std::vector<std::size_t> Model::trainable_indices() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (params_[i].trainable) out.push_back(i);
  }
  return out;
}

ad::Var Model::param_var(ad::Tape& tape, std::size_t index, const ForwardOptions& options, std::vector<ad::Var>& vars,
                         ForwardTrace& trace) const {
  if (vars[index].valid()) return vars[index];
  const Parameter& p = params_[index];
  const bool grad = p.trainable && (p.adapter ? options.grad_adapters : options.grad_base);
  ad::Var v = tape.parameter(p.value, grad);
  vars[index] = v;
  if (grad) trace.params.emplace_back(index, v);
  return v;
}

ad::Var Model::apply_proj(ad::Tape& tape, ad::Var x, const Proj& p, const ForwardOptions& options,
                          std::vector<ad::Var>& vars, ForwardTrace& trace) const {
  ad::Var y = ad::matmul(x, param_var(tape, p.weight, options, vars, trace));
  if (!p.lora_a) return y;
  ad::Var xin = x;
  if (options.dropout_rng && adapters_->dropout > 0.0) {
    const double keep = 1.0 - adapters_->dropout;
    Tensor mask(x.value().shape());
    for (double& m : mask.values()) m = options.dropout_rng->uniform() < keep ? 1.0 / keep : 0.0;
    xin = ad::mul(x, tape.constant(std::move(mask)));
  }
  ad::Var low = ad::matmul(xin, param_var(tape, *p.lora_a, options, vars, trace));
  ad::Var delta = ad::matmul(low, param_var(tape, *p.lora_b, options, vars, trace));
  return ad::add(y, ad::scale(delta, adapters_->scaling()));
}

ForwardTrace Model::forward(ad::Tape& tape, std::span<const int> tokens, const ForwardOptions& options) const {
  if (tokens.empty()) throw ShapeError("forward: empty token sequence");
  if (tokens.size() > config_.max_seq) {
    throw ShapeError("forward: sequence length " + std::to_string(tokens.size()) + " exceeds max_seq " +
                     std::to_string(config_.max_seq));
  }
  ForwardTrace trace;
  std::vector<ad::Var> vars(params_.size());
  auto P = [&](std::size_t i) { return param_var(tape, i, options, vars, trace); };

  std::vector<int> positions(tokens.size());
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<int>(i);
  ad::Var x = ad::add(ad::embedding(P(tok_emb_), tokens), ad::embedding(P(pos_emb_), positions));
  x = tape.tap(tap_name(0), x);

  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    const Block& b = blocks_[l];
    ad::Var h = ad::layer_norm(x, P(b.ln1_g), P(b.ln1_b), kLayerNormEps);
    ad::Var q = apply_proj(tape, h, b.q, options, vars, trace);
    ad::Var k = apply_proj(tape, h, b.k, options, vars, trace);
    ad::Var v = apply_proj(tape, h, b.v, options, vars, trace);
    ad::Var att = ad::causal_attention(q, k, v, config_.n_heads);
    x = ad::add(x, apply_proj(tape, att, b.o, options, vars, trace));
    ad::Var h2 = ad::layer_norm(x, P(b.ln2_g), P(b.ln2_b), kLayerNormEps);
    ad::Var gate = ad::gelu(apply_proj(tape, h2, b.gate, options, vars, trace));
    ad::Var up = apply_proj(tape, h2, b.up, options, vars, trace);
    x = ad::add(x, apply_proj(tape, ad::mul(gate, up), b.down, options, vars, trace));
    x = tape.tap(tap_name(l + 1), x);
  }
  ad::Var hf = ad::layer_norm(x, P(lnf_g_), P(lnf_b_), kLayerNormEps);
  trace.logits = ad::matmul(hf, P(unembed_));
  return trace;
}

std::uint64_t Model::base_weight_hash() const {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& p : params_) {
    if (p.adapter) continue;
    for (char c : p.name) {
      h ^= static_cast<unsigned char>(c);
      h *= 1099511628211ULL;
    }
    for (double v : p.value.values()) {
      unsigned char bytes[sizeof(double)];
      std::memcpy(bytes, &v, sizeof(double));
      for (unsigned char c : bytes) {
        h ^= c;
        h *= 1099511628211ULL;
      }
    }
  }
  return h;
}

// ---------------------------------------------------------------------------
// Incremental decoding with a key/value cache. Mirrors Model::forward.

class DecodeStream : public TokenStream {
 public:
  DecodeStream(const Model& model, std::vector<SteerSpec> steering) : m_(model), steering_(std::move(steering)) {
    const std::size_t L = m_.config_.n_layers;
    for (const auto& s : steering_) {
      if (s.layer > L) throw ShapeError("steering layer " + std::to_string(s.layer) + " out of range");
      if (s.vector.size() != m_.config_.d_model) throw ShapeError("steering vector width mismatch");
    }
    keys_.resize(L);
    values_.resize(L);
  }

  std::vector<double> push(int token) override {
    const auto& cfg = m_.config_;
    if (pos_ >= cfg.max_seq) throw ShapeError("decode: sequence exceeds max_seq");
    if (token < 0 || static_cast<std::size_t>(token) >= cfg.vocab_size) throw ShapeError("decode: token out of range");
    const auto& P = m_.params_;
    const std::size_t d = cfg.d_model;
    Eigen::RowVectorXd x = CMap(P[m_.tok_emb_].value.data(), cfg.vocab_size, d).row(token) +
                           CMap(P[m_.pos_emb_].value.data(), cfg.max_seq, d).row(static_cast<Eigen::Index>(pos_));
    steer(0, x);
    const std::size_t H = cfg.n_heads, dh = d / H;
    const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
    for (std::size_t l = 0; l < m_.blocks_.size(); ++l) {
      const auto& b = m_.blocks_[l];
      Eigen::RowVectorXd h = layer_norm(x, P[b.ln1_g].value, P[b.ln1_b].value);
      Eigen::RowVectorXd q = proj(h, b.q), k = proj(h, b.k), v = proj(h, b.v);
      keys_[l].push_back(k);
      values_[l].push_back(v);
      Eigen::RowVectorXd att(d);
      const std::size_t n = keys_[l].size();
      std::vector<double> w(n);
      for (std::size_t hd = 0; hd < H; ++hd) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < n; ++j) {
          w[j] = q.segment(hd * dh, dh).dot(keys_[l][j].segment(hd * dh, dh)) * sc;
          mx = std::max(mx, w[j]);
        }
        double z = 0.0;
        for (double& wj : w) {
          wj = std::exp(wj - mx);
          z += wj;
        }
        Eigen::RowVectorXd acc = Eigen::RowVectorXd::Zero(dh);
        for (std::size_t j = 0; j < n; ++j) acc += (w[j] / z) * values_[l][j].segment(hd * dh, dh);
        att.segment(hd * dh, dh) = acc;
      }
      x += proj(att, b.o);
      Eigen::RowVectorXd h2 = layer_norm(x, P[b.ln2_g].value, P[b.ln2_b].value);
      Eigen::RowVectorXd g = proj(h2, b.gate);
      for (Eigen::Index i = 0; i < g.size(); ++i) g[i] = 0.5 * g[i] * (1.0 + std::erf(g[i] * std::numbers::sqrt2 / 2.0));
      Eigen::RowVectorXd u = proj(h2, b.up);
      x += proj(g.cwiseProduct(u), b.down);
      steer(l + 1, x);
    }
    Eigen::RowVectorXd hf = layer_norm(x, P[m_.lnf_g_].value, P[m_.lnf_b_].value);
    Eigen::RowVectorXd logits = hf * mat(P[m_.unembed_].value);
    ++pos_;
    const double mx = logits.maxCoeff();
    std::vector<double> probs(cfg.vocab_size);
    double z = 0.0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
      probs[i] = std::exp(logits[static_cast<Eigen::Index>(i)] - mx);
      z += probs[i];
    }
    for (double& p : probs) p /= z;
    return probs;
  }

 private:
  void steer(std::size_t layer, Eigen::RowVectorXd& x) const {
    for (const auto& s : steering_) {
      if (s.layer == layer) x += s.epsilon * vec(s.vector);
    }
  }

  static Eigen::RowVectorXd layer_norm(const Eigen::RowVectorXd& x, const Tensor& g, const Tensor& b) {
    const double mean = x.mean();
    Eigen::RowVectorXd c = x.array() - mean;
    const double var = c.squaredNorm() / static_cast<double>(x.size());
    const double is = 1.0 / std::sqrt(var + kLayerNormEps);
    return (c * is).cwiseProduct(vec(g)) + vec(b);
  }

  Eigen::RowVectorXd proj(const Eigen::RowVectorXd& x, const Model::Proj& p) const {
    const auto& P = m_.params_;
    Eigen::RowVectorXd y = x * mat(P[p.weight].value);
    if (p.lora_a) {
      Eigen::RowVectorXd low = x * mat(P[*p.lora_a].value);
      y += m_.adapters_->scaling() * (low * mat(P[*p.lora_b].value));
    }
    return y;
  }

  const Model& m_;
  std::vector<SteerSpec> steering_;
  std::vector<std::vector<Eigen::RowVectorXd>> keys_, values_;
  std::size_t pos_ = 0;
};

std::unique_ptr<TokenStream> Model::open(std::vector<SteerSpec> steering) const {
  return std::make_unique<DecodeStream>(*this, std::move(steering));
}

// ---------------------------------------------------------------------------

std::span<const double> Activations::at(std::size_t b, std::size_t layer_slot, std::size_t t) const {
  const std::size_t offset = ((b * layers.size() + layer_slot) * seq + t) * width;
  return {values.data() + offset, width};
}

Activations capture_activations(const Model& model, const std::vector<std::vector<int>>& batch,
                                 const std::vector<std::size_t>& lengths, const std::vector<std::size_t>& layers,
                                 const std::vector<SteerSpec>& steering) {
  const auto& cfg = model.config();
  if (lengths.size() != batch.size()) throw ShapeError("capture_activations: lengths/batch size mismatch");
  for (std::size_t l : layers) {
    if (l > cfg.n_layers) {
      throw std::out_of_range("capture_activations: layer " + std::to_string(l) + " out of range 0.." +
                              std::to_string(cfg.n_layers));
    }
  }
  Activations out;
  out.layers = layers;
  out.batch = batch.size();
  out.width = cfg.d_model;
  for (const auto& s : batch) out.seq = std::max(out.seq, s.size());
  out.values = Tensor({out.batch, layers.size(), out.seq, out.width});
  out.valid.assign(out.batch * out.seq, 0);
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const std::size_t n = lengths[b];
    if (n > batch[b].size()) throw ShapeError("capture_activations: length exceeds padded row");
    for (std::size_t t = 0; t < n; ++t) out.valid[b * out.seq + t] = 1;
    // Padding positions carry the activations of a forward over the padded row;
    // they are present but flagged invalid.
    const std::vector<int>& row = batch[b];
    if (row.empty()) continue;
    ad::Tape tape(false);
    for (const auto& s : steering) tape.install_steering(tap_name(s.layer), s.vector, s.epsilon);
    model.forward(tape, row);
    for (std::size_t li = 0; li < layers.size(); ++li) {
      const Tensor& cap = tape.tap_point(tap_name(layers[li])).captured;
      for (std::size_t t = 0; t < row.size(); ++t) {
        auto src = cap.row(t);
        double* dst = out.values.data() + ((b * layers.size() + li) * out.seq + t) * out.width;
        std::copy(src.begin(), src.end(), dst);
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

io::Container to_container(const Model& model, std::uint64_t step, std::uint64_t seed, const nlohmann::json& extra) {
  io::Container c;
  c.header["kind"] = "checkpoint";
  c.header["config"] = model.config().to_json();
  c.header["step"] = step;
  c.header["seed"] = seed;
  c.header["extra"] = extra;
  if (model.adapter_config()) c.header["adapters"] = model.adapter_config()->to_json();
  nlohmann::json names = nlohmann::json::array();
  for (const auto& p : model.parameters()) {
    names.push_back({{"name", p.name}, {"trainable", p.trainable}, {"adapter", p.adapter}});
    c.tensors.push_back(io::NamedTensor{p.name, p.value, io::DType::f64});
  }
  c.header["parameters"] = names;
  return c;
}

Model model_from_container(const io::Container& c) {
  if (c.header.value("kind", "") != "checkpoint") throw io::FormatError("container is not a checkpoint");
  Model m;
  m.config_ = ModelConfig::from_json(c.header.at("config"));
  if (c.header.contains("adapters")) m.adapters_ = AdapterConfig::from_json(c.header.at("adapters"));
  for (const auto& meta : c.header.at("parameters")) {
    const std::string name = meta.at("name").get<std::string>();
    m.params_.push_back(Parameter{name, c.get(name), meta.at("trainable").get<bool>(), meta.at("adapter").get<bool>()});
  }
  m.rebuild_index();
  return m;
}

void save_checkpoint(const std::filesystem::path& path, const Model& model, std::uint64_t step, std::uint64_t seed,
                     const nlohmann::json& extra) {
  io::write_file(path, to_container(model, step, seed, extra));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  io::Container c = io::read_file(path);
  Checkpoint ck{model_from_container(c), c.header.value("step", std::uint64_t{0}),
                c.header.value("seed", std::uint64_t{0}), c.header.value("extra", nlohmann::json::object())};
  return ck;
}

}  // namespace gradshield::nn
