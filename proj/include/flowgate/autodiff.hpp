#pragma once

#include <deque>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "flowgate/tensor.hpp"

namespace flowgate {

/// Named trainable tensor. Tapes only read it; gradient buffers live on
/// the tape so concurrent per-sample tapes never contend.
struct Parameter {
  std::string name;
  Tensor value;
};

class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  const Tensor& value() const;
  int id() const { return id_; }
  explicit operator bool() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  int id_ = -1;
};

/// Plain zero-padded same-shape convolution (shared with Tape::conv_same).
Tensor conv_same(const Tensor& x, const Tensor& w, const Tensor& bias);

/// Define-by-run reverse-mode tape over Tensor ops. Rebuilt every step;
/// backward() visits each recorded node exactly once, in reverse
/// recording order.
class Tape {
 public:
  explicit Tape(bool track_gradients = true) : track_(track_gradients) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  // Leaf for a parameter; repeated watch of the same parameter returns
  // the same node.
  Var watch(const Parameter& p);

  // Elementwise; shapes must match.
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  // y = scale * a + shift
  Var affine(Var a, double scale, double shift);
  Var exp(Var a);
  Var log(Var a);
  Var sigmoid(Var a);
  Var relu(Var a);

  // Reductions / structure.
  Var sum(Var a);  // -> shape {1}
  Var broadcast_channels(Var per_channel, const Shape& target);
  Var concat_channels(Var a, Var b);
  Var narrow_channels(Var x, int begin, int count);
  // Volume-preserving index permutation; `inverse` must undo `forward`
  // exactly (used for the gradient).
  Var permutation(Var x, std::function<Tensor(const Tensor&)> forward,
                  std::function<Tensor(const Tensor&)> inverse);

  // Flow-specific primitives.
  Var channel_mix(Var x, Var kernel);
  Var log_abs_det(Var kernel);  // -> {1}; throws SingularMatrixError
  // Zero-padded same-shape convolution. 2-D: x [H,W,Ci], w [Kh,Kw,Ci,Co];
  // 3-D: x [D,H,W,Ci], w [Kd,Kh,Kw,Ci,Co]; bias [Co]. Odd kernel extents.
  Var conv_same(Var x, Var w, Var bias);
  // Standard-normal log-density: -0.5 * sum(z^2 + log 2*pi) -> {1}.
  Var gaussian_logp(Var z);

  // Reverse sweep from a scalar output. One-shot per tape.
  void backward(Var scalar_output);

  const Tensor& value(Var v) const;
  // After backward: gradient of the swept output w.r.t. v (zeros if v
  // did not influence it).
  Tensor grad_of(Var v) const;
  // nullptr when the parameter was never watched on this tape.
  const Tensor* grad_for(const Parameter& p) const;

  std::size_t node_count() const { return nodes_.size(); }
  bool tracking() const { return track_; }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool grad_set = false;
    bool needs_grad = false;
    const Parameter* param = nullptr;
    std::function<void()> backprop;  // accumulates into parent grads
  };

  Var make(Tensor value, bool needs_grad);
  Node& node(Var v);
  const Node& node(Var v) const;
  Tensor& grad_buf(int id);
  void check_same_tape(Var v) const;

  // deque: node references stay valid while the tape grows
  std::deque<Node> nodes_;
  std::unordered_map<const Parameter*, int> watched_;
  bool track_;
  bool swept_ = false;
};

}  // namespace flowgate
