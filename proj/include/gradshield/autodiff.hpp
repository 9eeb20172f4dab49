#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gradshield/tensor.hpp"

namespace gradshield::ad {

// Rewrites the d-vector gradient of one token position in place. Must be a pure
// function of its input.
using GradTransform = std::function<void(std::span<double>)>;

// A named read/transform point on the residual stream.
struct TapPoint {
  std::string name;
  std::size_t node = 0;
  Tensor captured;  // forward value seen downstream (post-steering)
  Tensor gradient;  // incoming dL/dh, before any transform
  bool transformed = false;
  bool steered = false;
};

struct Steering {
  Tensor vector;  // length d, frozen
  double epsilon = 0.0;
};

class Tape;

class Var {
 public:
  Var() = default;
  const Tensor& value() const;
  std::size_t id() const { return id_; }
  Tape* tape() const { return tape_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Records primitive operations in order; backward walks them in exact reverse
// recording order. One tape per forward/backward pass. Not thread-safe; use one
// tape per thread.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  // A tape with gradients disabled records values only (inference).
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  Var input(Tensor value);
  // `value` is borrowed and must outlive the tape.
  Var parameter(const Tensor& value, bool requires_grad);

  // Hooks must be installed before the tap is recorded.
  void install_steering(const std::string& name, Tensor vector, double epsilon);
  void install_transform(const std::string& name, GradTransform transform);
  std::vector<std::string> installed_hooks() const;

  // Identity in the gradient sense; applies steering in the forward pass and
  // the installed transform (per row) in the backward pass.
  Var tap(const std::string& name, Var x);

  void backward(Var loss);

  bool has_grad(Var v) const;
  // Zero tensor of matching shape when no gradient reached `v`.
  Tensor grad(Var v) const;

  const TapPoint& tap_point(const std::string& name) const;
  const std::vector<TapPoint>& taps() const { return taps_; }
  bool has_tap(const std::string& name) const;
  std::size_t size() const { return nodes_.size(); }

  // Op-implementer interface.
  Var record(Tensor value, std::vector<std::size_t> parents, BackwardFn fn);
  const Tensor& value(std::size_t id) const;
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  const Tensor& grad_of(std::size_t id) const { return nodes_[id].grad; }
  // Zero-initialised on first use.
  Tensor& grad_buffer(std::size_t id);

 private:
  struct Node {
    Tensor owned;
    const Tensor* borrowed = nullptr;
    Tensor grad;
    bool has_grad = false;
    bool requires_grad = false;
    std::vector<std::size_t> parents;
    BackwardFn backward;
  };

  std::vector<Node> nodes_;
  std::vector<TapPoint> taps_;
  std::map<std::string, std::size_t> tap_index_;
  std::map<std::string, Steering> steering_;
  std::map<std::string, GradTransform> transforms_;
  bool grad_enabled_ = true;
  bool backward_done_ = false;
};

// Primitives. All rank-2 unless noted; rows index token positions.
Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var mul(Var a, Var b);
Var add_row(Var x, Var bias);  // bias of length cols broadcast over rows
Var scale(Var x, double factor);
Var sum(Var x);
Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);
Var gelu(Var x);
Var softmax_rows(Var x);
Var embedding(Var table, std::span<const int> ids);
// Single-sequence causal multi-head attention over [S x d] projections.
Var causal_attention(Var q, Var k, Var v, std::size_t n_heads);
// Sum over rows of weight_i * CE(logits_i, target_i). Zero-weight rows are
// masked out and may carry any target.
Var cross_entropy(Var logits, std::span<const int> targets, std::span<const double> weights);

}  // namespace gradshield::ad
