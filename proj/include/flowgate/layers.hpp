#pragma once

#include <utility>
#include <vector>

#include "flowgate/autodiff.hpp"
#include "flowgate/rng.hpp"
#include "flowgate/tensor.hpp"

namespace flowgate {

/// One invertible layer application: the transformed tensor plus its
/// log |det Jacobian| contribution.
struct LayerOutput {
  Tensor z;
  double log_det = 0.0;
};

struct LayerVarOutput {
  Var z;
  Var log_det;
};

// Space-to-channel rearrangement: [H,W,C] -> [H/2,W/2,4C] and
// [D,H,W,C] -> [D/2,H/2,W/2,8C]. Bijective; unsqueeze_space inverts it
// exactly. Odd spatial extents raise DimensionError.
Tensor squeeze_space(const Tensor& x);
Tensor unsqueeze_space(const Tensor& z);

// Channel halves; concat restores bit-exactly. Odd channel counts raise
// DimensionError.
std::pair<Tensor, Tensor> split_channels(const Tensor& z);
Tensor concat_channels(const Tensor& a, const Tensor& b);

/// Per-channel affine with data-dependent initialization: after
/// initialize(), the init batch has per-channel mean 0, variance 1.
/// forward: z = (x + bias) * exp(log_scale).
class ActNorm {
 public:
  ActNorm(int channels, const std::string& name_prefix);

  bool initialized() const { return initialized_; }
  void mark_initialized(bool v) { initialized_ = v; }
  void initialize(const std::vector<Tensor>& batch);

  LayerVarOutput forward(Tape& tape, Var x) const;
  LayerOutput forward(const Tensor& x) const;
  Tensor inverse(const Tensor& z) const;

  std::vector<Parameter*> parameters();
  Parameter& log_scale() { return log_scale_; }
  Parameter& bias() { return bias_; }
  int channels() const { return channels_; }

 private:
  int channels_;
  Parameter log_scale_;
  Parameter bias_;
  bool initialized_ = false;
};

/// Invertible channel-mixing convolution (1x1 in 2-D, 1x1x1 in 3-D).
/// log_det = (number of spatial positions) * log |det K|.
class InvertibleConv {
 public:
  InvertibleConv(int channels, const std::string& name_prefix);

  // Uniformly random rotation kernel: orthogonal with det +1, so the
  // layer starts volume-preserving and invertible.
  void init_random_rotation(Rng& rng);

  LayerVarOutput forward(Tape& tape, Var x) const;
  LayerOutput forward(const Tensor& x) const;
  Tensor inverse(const Tensor& z) const;

  std::vector<Parameter*> parameters();
  Parameter& kernel() { return kernel_; }
  int channels() const { return channels_; }

 private:
  int channels_;
  Parameter kernel_;  // [C,C]
};

/// Affine coupling: x split into channel halves (xa, xb); a small conv
/// net maps xa to per-element (h2, t); then
///   scale = sigmoid(h2 - 0.1) + 0.6,  zb = (xb + t) * scale.
/// The scale is bounded in (0.6, 1.6). The final net layer is
/// zero-initialized, so a fresh coupling starts near the identity.
class AffineCoupling {
 public:
  AffineCoupling(int channels, int hidden_width, bool threed, const std::string& name_prefix, Rng& rng);

  LayerVarOutput forward(Tape& tape, Var x) const;
  LayerOutput forward(const Tensor& x) const;
  Tensor inverse(const Tensor& z) const;

  // (h2, t) from the conditioning half; shared by forward and inverse.
  std::pair<Tensor, Tensor> net(const Tensor& xa) const;

  std::vector<Parameter*> parameters();
  int channels() const { return channels_; }
  int hidden_width() const { return width_; }
  // Test hook: force the net output to constants (zeroes weights, sets
  // the last bias so h2 and t are constant per element).
  void force_constant_net(double h2, double t);

 private:
  int channels_;
  int width_;
  bool threed_;
  Parameter w1_, b1_, w2_, b2_, w3_, b3_;
};

/// actnorm -> invertible conv -> affine coupling; the unit repeated
/// `depth` times per level.
struct FlowStep {
  FlowStep(int channels, int hidden_width, bool threed, const std::string& name_prefix, Rng& rng);

  LayerVarOutput forward(Tape& tape, Var x) const;
  LayerOutput forward(const Tensor& x) const;
  Tensor inverse(const Tensor& z) const;
  std::vector<Parameter*> parameters();

  ActNorm actnorm;
  InvertibleConv invconv;
  AffineCoupling coupling;
};

}  // namespace flowgate
