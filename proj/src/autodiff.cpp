#include "gradshield/autodiff.hpp"

#include <Eigen/Dense>

#include <cassert>
#include <cmath>
#include <limits>
#include <numbers>

namespace gradshield::ad {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const RowMat>;
using MMap = Eigen::Map<RowMat>;

CMap as_matrix(const Tensor& t) { return CMap(t.data(), t.rows(), t.cols()); }
MMap as_matrix(Tensor& t) { return MMap(t.data(), t.rows(), t.cols()); }

void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw ShapeError(std::string(op) + ": expected a matrix, got shape " + shape_string(t.shape()));
  }
}

void require_finite_input(const Tensor& t, const char* op) {
  if (!t.all_finite()) throw NumericError(std::string(op) + ": non-finite input");
}

Tape& same_tape(Var a, Var b, const char* op) {
  if (!a.valid() || a.tape() != b.tape()) throw std::logic_error(std::string(op) + ": operands on different tapes");
  return *a.tape();
}

}  // namespace

const Tensor& Var::value() const { return tape_->value(id_); }

Var Tape::constant(Tensor value) {
  Node n;
  n.owned = std::move(value);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Tape::input(Tensor value) {
  Node n;
  n.owned = std::move(value);
  n.requires_grad = grad_enabled_;
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Tape::parameter(const Tensor& value, bool requires_grad) {
  Node n;
  n.borrowed = &value;
  n.requires_grad = requires_grad && grad_enabled_;
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

const Tensor& Tape::value(std::size_t id) const {
  const Node& n = nodes_[id];
  return n.borrowed ? *n.borrowed : n.owned;
}

Tensor& Tape::grad_buffer(std::size_t id) {
  Node& n = nodes_[id];
  if (!n.has_grad) {
    n.grad = Tensor(value(id).shape());
    n.has_grad = true;
  }
  return n.grad;
}

Var Tape::record(Tensor value, std::vector<std::size_t> parents, BackwardFn fn) {
  Node n;
  n.owned = std::move(value);
  for (std::size_t p : parents) {
    assert(p < nodes_.size());
    n.requires_grad = n.requires_grad || nodes_[p].requires_grad;
  }
  n.parents = std::move(parents);
  if (n.requires_grad) n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

void Tape::install_steering(const std::string& name, Tensor vector, double epsilon) {
  if (tap_index_.contains(name)) throw std::logic_error("steering for '" + name + "' installed after the tap was recorded");
  if (vector.rank() != 1) throw ShapeError("steering vector must be rank 1, got " + shape_string(vector.shape()));
  if (!std::isfinite(epsilon)) throw NumericError("steering epsilon must be finite");
  vector.require_finite("steering vector");
  steering_[name] = Steering{std::move(vector), epsilon};
}

void Tape::install_transform(const std::string& name, GradTransform transform) {
  if (tap_index_.contains(name)) throw std::logic_error("transform for '" + name + "' installed after the tap was recorded");
  transforms_[name] = std::move(transform);
}

std::vector<std::string> Tape::installed_hooks() const {
  std::vector<std::string> out;
  for (const auto& [name, s] : steering_) out.push_back("steer:" + name);
  for (const auto& [name, t] : transforms_) out.push_back("transform:" + name);
  return out;
}

bool Tape::has_tap(const std::string& name) const { return tap_index_.contains(name); }

const TapPoint& Tape::tap_point(const std::string& name) const {
  auto it = tap_index_.find(name);
  if (it == tap_index_.end()) throw std::out_of_range("no tap named '" + name + "'");
  return taps_[it->second];
}

Var Tape::tap(const std::string& name, Var x) {
  if (tap_index_.contains(name)) throw std::logic_error("tap '" + name + "' recorded twice");
  Tensor out = x.value();
  require_rank2(out, "tap");
  TapPoint point;
  point.name = name;

  if (auto it = steering_.find(name); it != steering_.end()) {
    const Steering& s = it->second;
    if (s.vector.size() != out.cols()) {
      throw ShapeError("steer_tap '" + name + "': vector length " + std::to_string(s.vector.size()) +
                       " vs activation width " + std::to_string(out.cols()));
    }
    for (std::size_t r = 0; r < out.rows(); ++r) {
      auto row = out.row(r);
      for (std::size_t c = 0; c < row.size(); ++c) row[c] += s.epsilon * s.vector[c];
    }
    point.steered = true;
  }

  GradTransform transform;
  if (auto it = transforms_.find(name); it != transforms_.end()) {
    transform = it->second;
    point.transformed = true;
  }

  point.captured = out;
  const std::size_t tap_slot = taps_.size();
  const std::size_t parent = x.id();
  Var result = record(std::move(out), {parent}, [tap_slot, parent, transform](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    t.taps_[tap_slot].gradient = g;
    if (!t.requires_grad(parent)) return;
    Tensor& pg = t.grad_buffer(parent);
    if (transform) {
      Tensor local = g;
      for (std::size_t r = 0; r < local.rows(); ++r) transform(local.row(r));
      for (std::size_t i = 0; i < local.size(); ++i) pg[i] += local[i];
    } else {
      for (std::size_t i = 0; i < g.size(); ++i) pg[i] += g[i];
    }
  });
  // A tap must observe the gradient even when nothing upstream is trainable.
  if (grad_enabled_ && !nodes_[result.id()].backward) {
    nodes_[result.id()].requires_grad = true;
    nodes_[result.id()].backward = [tap_slot](Tape& t, std::size_t self) { t.taps_[tap_slot].gradient = t.grad_of(self); };
  }
  point.node = result.id();
  tap_index_[name] = taps_.size();
  taps_.push_back(std::move(point));
  return result;
}

void Tape::backward(Var loss) {
  if (loss.tape() != this) throw std::logic_error("backward: loss recorded on another tape");
  if (backward_done_) throw std::logic_error("backward: tape already consumed");
  const Tensor& lv = value(loss.id());
  if (lv.size() != 1) throw ShapeError("backward: loss must be scalar, got " + shape_string(lv.shape()));
  backward_done_ = true;
  grad_buffer(loss.id())[0] = 1.0;
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.has_grad && n.backward) n.backward(*this, i);
  }
  for (TapPoint& tp : taps_) {
    if (tp.gradient.empty()) tp.gradient = Tensor(tp.captured.shape());
  }
}

bool Tape::has_grad(Var v) const { return nodes_[v.id()].has_grad; }

Tensor Tape::grad(Var v) const {
  const Node& n = nodes_[v.id()];
  if (n.has_grad) return n.grad;
  return Tensor(value(v.id()).shape());
}

// ---------------------------------------------------------------------------

Var matmul(Var a, Var b) {
  Tape& t = same_tape(a, b, "matmul");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_rank2(av, "matmul");
  require_rank2(bv, "matmul");
  if (av.cols() != bv.rows()) {
    throw ShapeError("matmul: shape mismatch " + shape_string(av.shape()) + " x " + shape_string(bv.shape()));
  }
  require_finite_input(av, "matmul");
  require_finite_input(bv, "matmul");
  Tensor out({av.rows(), bv.cols()});
  as_matrix(out).noalias() = as_matrix(av) * as_matrix(bv);
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(std::move(out), {ia, ib}, [ia, ib](Tape& tp, std::size_t self) {
    auto g = as_matrix(tp.grad_of(self));
    if (tp.requires_grad(ia)) as_matrix(tp.grad_buffer(ia)).noalias() += g * as_matrix(tp.value(ib)).transpose();
    if (tp.requires_grad(ib)) as_matrix(tp.grad_buffer(ib)).noalias() += as_matrix(tp.value(ia)).transpose() * g;
  });
}

Var add(Var a, Var b) {
  Tape& t = same_tape(a, b, "add");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_same_shape(av, bv, "add");
  require_finite_input(av, "add");
  require_finite_input(bv, "add");
  Tensor out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(std::move(out), {ia, ib}, [ia, ib](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad_of(self);
    for (std::size_t p : {ia, ib}) {
      if (!tp.requires_grad(p)) continue;
      Tensor& pg = tp.grad_buffer(p);
      for (std::size_t i = 0; i < g.size(); ++i) pg[i] += g[i];
    }
  });
}

Var mul(Var a, Var b) {
  Tape& t = same_tape(a, b, "mul");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_same_shape(av, bv, "mul");
  require_finite_input(av, "mul");
  require_finite_input(bv, "mul");
  Tensor out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(std::move(out), {ia, ib}, [ia, ib](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad_of(self);
    if (tp.requires_grad(ia)) {
      Tensor& pg = tp.grad_buffer(ia);
      const Tensor& other = tp.value(ib);
      for (std::size_t i = 0; i < g.size(); ++i) pg[i] += g[i] * other[i];
    }
    if (tp.requires_grad(ib)) {
      Tensor& pg = tp.grad_buffer(ib);
      const Tensor& other = tp.value(ia);
      for (std::size_t i = 0; i < g.size(); ++i) pg[i] += g[i] * other[i];
    }
  });
}

Var add_row(Var x, Var bias) {
  Tape& t = same_tape(x, bias, "add_row");
  const Tensor& xv = x.value();
  const Tensor& bv = bias.value();
  require_rank2(xv, "add_row");
  if (bv.size() != xv.cols()) {
    throw ShapeError("add_row: shape mismatch " + shape_string(xv.shape()) + " + " + shape_string(bv.shape()));
  }
  require_finite_input(xv, "add_row");
  require_finite_input(bv, "add_row");
  Tensor out = xv;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] += bv[c];
  }
  const std::size_t ix = x.id(), ib = bias.id();
  return t.record(std::move(out), {ix, ib}, [ix, ib](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad_of(self);
    if (tp.requires_grad(ix)) {
      Tensor& pg = tp.grad_buffer(ix);
      for (std::size_t i = 0; i < g.size(); ++i) pg[i] += g[i];
    }
    if (tp.requires_grad(ib)) {
      Tensor& pg = tp.grad_buffer(ib);
      for (std::size_t r = 0; r < g.rows(); ++r) {
        auto row = g.row(r);
        for (std::size_t c = 0; c < row.size(); ++c) pg[c] += row[c];
      }
    }
  });
}

Var scale(Var x, double factor) {
  Tape& t = *x.tape();
  Tensor out = x.value();
  require_finite_input(out, "scale");
  for (double& v : out.values()) v *= factor;
  const std::size_t ix = x.id();
  return t.record(std::move(out), {ix}, [ix, factor](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad_of(self);
    Tensor& pg = tp.grad_buffer(ix);
    for (std::size_t i = 0; i < g.size(); ++i) pg[i] += factor * g[i];
  });
}

Var sum(Var x) {
  Tape& t = *x.tape();
  const Tensor& xv = x.value();
  require_finite_input(xv, "sum");
  double s = 0.0;
  for (double v : xv.values()) s += v;
  const std::size_t ix = x.id();
  return t.record(Tensor({1}, {s}), {ix}, [ix](Tape& tp, std::size_t self) {
    const double g = tp.grad_of(self)[0];
    Tensor& pg = tp.grad_buffer(ix);
    for (double& v : pg.values()) v += g;
  });
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  Tape& t = same_tape(x, gamma, "layer_norm");
  const Tensor& xv = x.value();
  require_rank2(xv, "layer_norm");
  const std::size_t n = xv.rows(), d = xv.cols();
  if (gamma.value().size() != d || beta.value().size() != d) {
    throw ShapeError("layer_norm: shape mismatch " + shape_string(xv.shape()) + " with gain " +
                     shape_string(gamma.value().shape()));
  }
  require_finite_input(xv, "layer_norm");
  const Tensor& gv = gamma.value();
  const Tensor& bv = beta.value();
  Tensor out({n, d});
  Tensor xhat({n, d});
  std::vector<double> inv_std(n);
  for (std::size_t r = 0; r < n; ++r) {
    auto row = xv.row(r);
    double mean = 0.0;
    for (double v : row) mean += v;
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (double v : row) var += (v - mean) * (v - mean);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t c = 0; c < d; ++c) {
      const double h = (row[c] - mean) * is;
      xhat.at(r, c) = h;
      out.at(r, c) = h * gv[c] + bv[c];
    }
  }
  const std::size_t ix = x.id(), ig = gamma.id(), ib = beta.id();
  return t.record(std::move(out), {ix, ig, ib},
                  [ix, ig, ib, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& tp, std::size_t self) {
                    const Tensor& g = tp.grad_of(self);
                    const Tensor& gv = tp.value(ig);
                    const std::size_t n = g.rows(), d = g.cols();
                    if (tp.requires_grad(ig)) {
                      Tensor& gg = tp.grad_buffer(ig);
                      for (std::size_t r = 0; r < n; ++r)
                        for (std::size_t c = 0; c < d; ++c) gg[c] += g.at(r, c) * xhat.at(r, c);
                    }
                    if (tp.requires_grad(ib)) {
                      Tensor& bg = tp.grad_buffer(ib);
                      for (std::size_t r = 0; r < n; ++r)
                        for (std::size_t c = 0; c < d; ++c) bg[c] += g.at(r, c);
                    }
                    if (tp.requires_grad(ix)) {
                      Tensor& xg = tp.grad_buffer(ix);
                      std::vector<double> dxhat(d);
                      for (std::size_t r = 0; r < n; ++r) {
                        double mean_d = 0.0, mean_dx = 0.0;
                        for (std::size_t c = 0; c < d; ++c) {
                          dxhat[c] = g.at(r, c) * gv[c];
                          mean_d += dxhat[c];
                          mean_dx += dxhat[c] * xhat.at(r, c);
                        }
                        mean_d /= static_cast<double>(d);
                        mean_dx /= static_cast<double>(d);
                        for (std::size_t c = 0; c < d; ++c) {
                          xg.at(r, c) += inv_std[r] * (dxhat[c] - mean_d - xhat.at(r, c) * mean_dx);
                        }
                      }
                    }
                  });
}

Var gelu(Var x) {
  Tape& t = *x.tape();
  const Tensor& xv = x.value();
  require_finite_input(xv, "gelu");
  Tensor out = xv;
  for (double& v : out.values()) v = 0.5 * v * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
  const std::size_t ix = x.id();
  return t.record(std::move(out), {ix}, [ix](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad_of(self);
    const Tensor& xv = tp.value(ix);
    Tensor& pg = tp.grad_buffer(ix);
    const double inv_sqrt_2pi = std::numbers::inv_sqrtpi / std::numbers::sqrt2;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = xv[i];
      const double cdf = 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
      const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
      pg[i] += g[i] * (cdf + v * pdf);
    }
  });
}

Var softmax_rows(Var x) {
  Tape& t = *x.tape();
  const Tensor& xv = x.value();
  require_rank2(xv, "softmax");
  require_finite_input(xv, "softmax");
  Tensor out = xv;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    double mx = -std::numeric_limits<double>::infinity();
    for (double v : row) mx = std::max(mx, v);
    double z = 0.0;
    for (double& v : row) {
      v = std::exp(v - mx);
      z += v;
    }
    for (double& v : row) v /= z;
  }
  const std::size_t ix = x.id();
  return t.record(std::move(out), {ix}, [ix](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad_of(self);
    const Tensor& p = tp.value(self);
    Tensor& pg = tp.grad_buffer(ix);
    for (std::size_t r = 0; r < g.rows(); ++r) {
      auto gr = g.row(r);
      auto pr = p.row(r);
      double s = 0.0;
      for (std::size_t c = 0; c < gr.size(); ++c) s += gr[c] * pr[c];
      auto out = pg.row(r);
      for (std::size_t c = 0; c < gr.size(); ++c) out[c] += pr[c] * (gr[c] - s);
    }
  });
}

Var embedding(Var table, std::span<const int> ids) {
  Tape& t = *table.tape();
  const Tensor& tv = table.value();
  require_rank2(tv, "embedding");
  const std::size_t d = tv.cols();
  Tensor out({ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= tv.rows()) {
      throw ShapeError("embedding: id " + std::to_string(ids[i]) + " outside table " + shape_string(tv.shape()));
    }
    auto src = tv.row(static_cast<std::size_t>(ids[i]));
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  const std::size_t it = table.id();
  std::vector<int> idv(ids.begin(), ids.end());
  return t.record(std::move(out), {it}, [it, idv = std::move(idv)](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad_of(self);
    Tensor& pg = tp.grad_buffer(it);
    for (std::size_t i = 0; i < idv.size(); ++i) {
      auto dst = pg.row(static_cast<std::size_t>(idv[i]));
      auto src = g.row(i);
      for (std::size_t c = 0; c < dst.size(); ++c) dst[c] += src[c];
    }
  });
}

Var causal_attention(Var q, Var k, Var v, std::size_t n_heads) {
  Tape& t = same_tape(q, k, "causal_attention");
  const Tensor& qv = q.value();
  const Tensor& kv = k.value();
  const Tensor& vv = v.value();
  require_rank2(qv, "causal_attention");
  require_same_shape(qv, kv, "causal_attention");
  require_same_shape(qv, vv, "causal_attention");
  const std::size_t s = qv.rows(), d = qv.cols();
  if (n_heads == 0 || d % n_heads != 0) {
    throw ShapeError("causal_attention: width " + std::to_string(d) + " not divisible by " + std::to_string(n_heads) + " heads");
  }
  require_finite_input(qv, "causal_attention");
  require_finite_input(kv, "causal_attention");
  require_finite_input(vv, "causal_attention");
  const std::size_t dh = d / n_heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  auto Q = as_matrix(qv), K = as_matrix(kv), V = as_matrix(vv);
  std::vector<RowMat> probs(n_heads);
  Tensor out({s, d});
  auto O = as_matrix(out);
  for (std::size_t h = 0; h < n_heads; ++h) {
    RowMat scores = (Q.middleCols(h * dh, dh) * K.middleCols(h * dh, dh).transpose()) * sc;
    for (std::size_t i = 0; i < s; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j <= i; ++j) mx = std::max(mx, scores(i, j));
      double z = 0.0;
      for (std::size_t j = 0; j <= i; ++j) {
        scores(i, j) = std::exp(scores(i, j) - mx);
        z += scores(i, j);
      }
      for (std::size_t j = 0; j <= i; ++j) scores(i, j) /= z;
      for (std::size_t j = i + 1; j < s; ++j) scores(i, j) = 0.0;
    }
    O.middleCols(h * dh, dh).noalias() = scores * V.middleCols(h * dh, dh);
    probs[h] = std::move(scores);
  }
  const std::size_t iq = q.id(), ik = k.id(), iv = v.id();
  return t.record(std::move(out), {iq, ik, iv},
                  [iq, ik, iv, n_heads, dh, sc, probs = std::move(probs)](Tape& tp, std::size_t self) {
                    auto G = as_matrix(tp.grad_of(self));
                    auto Q = as_matrix(tp.value(iq));
                    auto K = as_matrix(tp.value(ik));
                    auto V = as_matrix(tp.value(iv));
                    const bool gq = tp.requires_grad(iq), gk = tp.requires_grad(ik), gv = tp.requires_grad(iv);
                    for (std::size_t h = 0; h < n_heads; ++h) {
                      const RowMat& P = probs[h];
                      auto Gh = G.middleCols(h * dh, dh);
                      if (gv) as_matrix(tp.grad_buffer(iv)).middleCols(h * dh, dh).noalias() += P.transpose() * Gh;
                      if (!gq && !gk) continue;
                      RowMat dP = Gh * V.middleCols(h * dh, dh).transpose();
                      Eigen::VectorXd rs = (dP.cwiseProduct(P)).rowwise().sum();
                      RowMat dS = P.cwiseProduct(dP.colwise() - rs) * sc;
                      if (gq) as_matrix(tp.grad_buffer(iq)).middleCols(h * dh, dh).noalias() += dS * K.middleCols(h * dh, dh);
                      if (gk) as_matrix(tp.grad_buffer(ik)).middleCols(h * dh, dh).noalias() += dS.transpose() * Q.middleCols(h * dh, dh);
                    }
                  });
}

Var cross_entropy(Var logits, std::span<const int> targets, std::span<const double> weights) {
  Tape& t = *logits.tape();
  const Tensor& lv = logits.value();
  require_rank2(lv, "cross_entropy");
  const std::size_t n = lv.rows(), vocab = lv.cols();
  if (targets.size() != n || weights.size() != n) {
    throw ShapeError("cross_entropy: logits " + shape_string(lv.shape()) + " vs " + std::to_string(targets.size()) +
                     " targets / " + std::to_string(weights.size()) + " weights");
  }
  require_finite_input(lv, "cross_entropy");
  Tensor probs({n, vocab});
  double total = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    auto row = lv.row(r);
    double mx = -std::numeric_limits<double>::infinity();
    for (double v : row) mx = std::max(mx, v);
    double z = 0.0;
    for (double v : row) z += std::exp(v - mx);
    const double lse = mx + std::log(z);
    auto pr = probs.row(r);
    for (std::size_t c = 0; c < vocab; ++c) pr[c] = std::exp(row[c] - lse);
    if (weights[r] == 0.0) continue;
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= vocab) {
      throw ShapeError("cross_entropy: target " + std::to_string(targets[r]) + " outside vocabulary of " + std::to_string(vocab));
    }
    total += weights[r] * (lse - row[static_cast<std::size_t>(targets[r])]);
  }
  const std::size_t il = logits.id();
  std::vector<int> tv(targets.begin(), targets.end());
  std::vector<double> wv(weights.begin(), weights.end());
  return t.record(Tensor({1}, {total}), {il},
                  [il, tv = std::move(tv), wv = std::move(wv), probs = std::move(probs)](Tape& tp, std::size_t self) {
                    const double g = tp.grad_of(self)[0];
                    Tensor& pg = tp.grad_buffer(il);
                    for (std::size_t r = 0; r < wv.size(); ++r) {
                      if (wv[r] == 0.0) continue;
                      auto pr = probs.row(r);
                      auto out = pg.row(r);
                      const double w = g * wv[r];
                      for (std::size_t c = 0; c < pr.size(); ++c) out[c] += w * pr[c];
                      out[static_cast<std::size_t>(tv[r])] -= w;
                    }
                  });
}

}  // namespace gradshield::ad
