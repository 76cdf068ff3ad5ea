#include "flowgate/layers.hpp"

#include <cmath>

namespace flowgate {

namespace {

double sigmoid_scalar(double x) {
  return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

// Spatial position count (elements per channel).
std::int64_t pixel_count(const Tensor& x) { return x.size() / x.channels(); }

}  // namespace

Tensor squeeze_space(const Tensor& x) {
  if (x.rank() == 3) {
    const int h = x.extent(0), w = x.extent(1), c = x.extent(2);
    if (h % 2 || w % 2) throw DimensionError("squeeze: odd spatial extent in " + shape_str(x.shape()));
    Tensor out({h / 2, w / 2, 4 * c});
    for (int oh = 0; oh < h / 2; ++oh)
      for (int ow = 0; ow < w / 2; ++ow)
        for (int dh = 0; dh < 2; ++dh)
          for (int dw = 0; dw < 2; ++dw)
            for (int k = 0; k < c; ++k)
              out.at(0, oh, ow, k + c * (2 * dh + dw)) = x.at(0, 2 * oh + dh, 2 * ow + dw, k);
    return out;
  }
  if (x.rank() == 4) {
    const int d = x.extent(0), h = x.extent(1), w = x.extent(2), c = x.extent(3);
    if (d % 2 || h % 2 || w % 2) throw DimensionError("squeeze: odd spatial extent in " + shape_str(x.shape()));
    Tensor out({d / 2, h / 2, w / 2, 8 * c});
    for (int od = 0; od < d / 2; ++od)
      for (int oh = 0; oh < h / 2; ++oh)
        for (int ow = 0; ow < w / 2; ++ow)
          for (int dd = 0; dd < 2; ++dd)
            for (int dh = 0; dh < 2; ++dh)
              for (int dw = 0; dw < 2; ++dw)
                for (int k = 0; k < c; ++k)
                  out.at(od, oh, ow, k + c * (4 * dd + 2 * dh + dw)) =
                      x.at(2 * od + dd, 2 * oh + dh, 2 * ow + dw, k);
    return out;
  }
  throw DimensionError("squeeze: need rank-3 or rank-4 tensor, got " + shape_str(x.shape()));
}

Tensor unsqueeze_space(const Tensor& z) {
  if (z.rank() == 3) {
    const int h = z.extent(0), w = z.extent(1), c4 = z.extent(2);
    if (c4 % 4) throw DimensionError("unsqueeze: channels not divisible by 4");
    const int c = c4 / 4;
    Tensor out({2 * h, 2 * w, c});
    for (int oh = 0; oh < h; ++oh)
      for (int ow = 0; ow < w; ++ow)
        for (int dh = 0; dh < 2; ++dh)
          for (int dw = 0; dw < 2; ++dw)
            for (int k = 0; k < c; ++k)
              out.at(0, 2 * oh + dh, 2 * ow + dw, k) = z.at(0, oh, ow, k + c * (2 * dh + dw));
    return out;
  }
  if (z.rank() == 4) {
    const int d = z.extent(0), h = z.extent(1), w = z.extent(2), c8 = z.extent(3);
    if (c8 % 8) throw DimensionError("unsqueeze: channels not divisible by 8");
    const int c = c8 / 8;
    Tensor out({2 * d, 2 * h, 2 * w, c});
    for (int od = 0; od < d; ++od)
      for (int oh = 0; oh < h; ++oh)
        for (int ow = 0; ow < w; ++ow)
          for (int dd = 0; dd < 2; ++dd)
            for (int dh = 0; dh < 2; ++dh)
              for (int dw = 0; dw < 2; ++dw)
                for (int k = 0; k < c; ++k)
                  out.at(2 * od + dd, 2 * oh + dh, 2 * ow + dw, k) = z.at(od, oh, ow, k + c * (4 * dd + 2 * dh + dw));
    return out;
  }
  throw DimensionError("unsqueeze: need rank-3 or rank-4 tensor, got " + shape_str(z.shape()));
}

std::pair<Tensor, Tensor> split_channels(const Tensor& z) {
  const int c = z.channels();
  if (c % 2) throw DimensionError("split: odd channel count " + std::to_string(c));
  Shape half_shape = z.shape();
  half_shape.back() = c / 2;
  Tensor z1(half_shape), z2(half_shape);
  const std::int64_t pixels = pixel_count(z);
  for (std::int64_t p = 0; p < pixels; ++p)
    for (int k = 0; k < c / 2; ++k) {
      z1[p * (c / 2) + k] = z[p * c + k];
      z2[p * (c / 2) + k] = z[p * c + c / 2 + k];
    }
  return {std::move(z1), std::move(z2)};
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  if (a.rank() != b.rank()) throw DimensionError("concat: rank mismatch");
  for (int ax = 0; ax + 1 < a.rank(); ++ax)
    if (a.extent(ax) != b.extent(ax)) throw DimensionError("concat: spatial extents differ");
  const int ca = a.channels(), cb = b.channels();
  Shape out_shape = a.shape();
  out_shape.back() = ca + cb;
  Tensor out(out_shape);
  const std::int64_t pixels = pixel_count(a);
  for (std::int64_t p = 0; p < pixels; ++p) {
    for (int k = 0; k < ca; ++k) out[p * (ca + cb) + k] = a[p * ca + k];
    for (int k = 0; k < cb; ++k) out[p * (ca + cb) + ca + k] = b[p * cb + k];
  }
  return out;
}

ActNorm::ActNorm(int channels, const std::string& name_prefix)
    : channels_(channels),
      log_scale_{name_prefix + "actnorm.log_scale", Tensor({channels})},
      bias_{name_prefix + "actnorm.bias", Tensor({channels})} {}

void ActNorm::initialize(const std::vector<Tensor>& batch) {
  if (batch.empty()) throw DataError("actnorm initialization needs a non-empty batch");
  const int c = channels_;
  std::vector<double> mean(static_cast<std::size_t>(c), 0.0), var(static_cast<std::size_t>(c), 0.0);
  std::int64_t count = 0;
  for (const Tensor& x : batch) {
    if (x.channels() != c) throw DimensionError("actnorm init: channel mismatch");
    const std::int64_t pixels = pixel_count(x);
    for (std::int64_t p = 0; p < pixels; ++p)
      for (int k = 0; k < c; ++k) mean[static_cast<std::size_t>(k)] += x[p * c + k];
    count += pixels;
  }
  for (auto& m : mean) m /= static_cast<double>(count);
  for (const Tensor& x : batch) {
    const std::int64_t pixels = pixel_count(x);
    for (std::int64_t p = 0; p < pixels; ++p)
      for (int k = 0; k < c; ++k) {
        const double d = x[p * c + k] - mean[static_cast<std::size_t>(k)];
        var[static_cast<std::size_t>(k)] += d * d;
      }
  }
  for (int k = 0; k < c; ++k) {
    const double v = std::max(var[static_cast<std::size_t>(k)] / static_cast<double>(count), 1e-12);
    bias_.value[k] = -mean[static_cast<std::size_t>(k)];
    log_scale_.value[k] = -0.5 * std::log(v);
  }
  initialized_ = true;
}

LayerVarOutput ActNorm::forward(Tape& tape, Var x) const {
  const Shape shape = x.value().shape();
  const std::int64_t pixels = pixel_count(x.value());
  Var bias = tape.watch(bias_);
  Var log_scale = tape.watch(log_scale_);
  Var shifted = tape.add(x, tape.broadcast_channels(bias, shape));
  Var z = tape.mul(shifted, tape.exp(tape.broadcast_channels(log_scale, shape)));
  Var log_det = tape.affine(tape.sum(log_scale), static_cast<double>(pixels), 0.0);
  return {z, log_det};
}

LayerOutput ActNorm::forward(const Tensor& x) const {
  if (x.channels() != channels_) throw DimensionError("actnorm: channel mismatch");
  Tensor z(x.shape());
  const std::int64_t pixels = pixel_count(x);
  double sum_ls = 0.0;
  for (int k = 0; k < channels_; ++k) sum_ls += log_scale_.value[k];
  for (std::int64_t p = 0; p < pixels; ++p)
    for (int k = 0; k < channels_; ++k)
      z[p * channels_ + k] = (x[p * channels_ + k] + bias_.value[k]) * std::exp(log_scale_.value[k]);
  return {std::move(z), static_cast<double>(pixels) * sum_ls};
}

Tensor ActNorm::inverse(const Tensor& z) const {
  if (z.channels() != channels_) throw DimensionError("actnorm: channel mismatch");
  Tensor x(z.shape());
  const std::int64_t pixels = pixel_count(z);
  for (std::int64_t p = 0; p < pixels; ++p)
    for (int k = 0; k < channels_; ++k)
      x[p * channels_ + k] = z[p * channels_ + k] * std::exp(-log_scale_.value[k]) - bias_.value[k];
  return x;
}

std::vector<Parameter*> ActNorm::parameters() { return {&log_scale_, &bias_}; }

InvertibleConv::InvertibleConv(int channels, const std::string& name_prefix)
    : channels_(channels), kernel_{name_prefix + "invconv.kernel", SquareMatrix::identity(channels).as_tensor()} {}

void InvertibleConv::init_random_rotation(Rng& rng) {
  const int n = channels_;
  // QR of a Gaussian matrix by modified Gram-Schmidt, diag(R) > 0.
  std::vector<std::vector<double>> cols(static_cast<std::size_t>(n), std::vector<double>(static_cast<std::size_t>(n)));
  for (auto& col : cols)
    for (auto& v : col) v = rng.next_normal();
  for (int j = 0; j < n; ++j) {
    for (int k = 0; k < j; ++k) {
      double dot = 0.0;
      for (int i = 0; i < n; ++i) dot += cols[static_cast<std::size_t>(k)][static_cast<std::size_t>(i)] *
                                         cols[static_cast<std::size_t>(j)][static_cast<std::size_t>(i)];
      for (int i = 0; i < n; ++i) cols[static_cast<std::size_t>(j)][static_cast<std::size_t>(i)] -=
          dot * cols[static_cast<std::size_t>(k)][static_cast<std::size_t>(i)];
    }
    double norm = 0.0;
    for (int i = 0; i < n; ++i) norm += cols[static_cast<std::size_t>(j)][static_cast<std::size_t>(i)] *
                                        cols[static_cast<std::size_t>(j)][static_cast<std::size_t>(i)];
    norm = std::sqrt(norm);
    if (norm < 1e-9) {
      // Degenerate draw; retry with fresh entries.
      for (auto& v : cols[static_cast<std::size_t>(j)]) v = rng.next_normal();
      --j;
      continue;
    }
    for (int i = 0; i < n; ++i) cols[static_cast<std::size_t>(j)][static_cast<std::size_t>(i)] /= norm;
  }
  SquareMatrix q(n);
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < n; ++c) q.at(r, c) = cols[static_cast<std::size_t>(c)][static_cast<std::size_t>(r)];
  // det is +-1 for orthogonal Q; flip one column if negative.
  if (LuFactorization(q).det_sign() < 0.0)
    for (int r = 0; r < n; ++r) q.at(r, 0) = -q.at(r, 0);
  kernel_.value = q.as_tensor();
}

LayerVarOutput InvertibleConv::forward(Tape& tape, Var x) const {
  const std::int64_t pixels = pixel_count(x.value());
  Var kernel = tape.watch(kernel_);
  Var z = tape.channel_mix(x, kernel);
  // log_det = D*H*W * log|det K| (H*W in 2-D).
  Var log_det = tape.affine(tape.log_abs_det(kernel), static_cast<double>(pixels), 0.0);
  return {z, log_det};
}

LayerOutput InvertibleConv::forward(const Tensor& x) const {
  const SquareMatrix k = SquareMatrix::from_tensor(kernel_.value);
  const double lad = flowgate::log_abs_det(k);
  return {channel_mix(x, k), static_cast<double>(pixel_count(x)) * lad};
}

Tensor InvertibleConv::inverse(const Tensor& z) const {
  const SquareMatrix k = SquareMatrix::from_tensor(kernel_.value);
  return channel_mix(z, LuFactorization(k).inverse());
}

std::vector<Parameter*> InvertibleConv::parameters() { return {&kernel_}; }

namespace {

Shape conv_weight_shape(bool threed, int k, int ci, int co) {
  return threed ? Shape{k, k, k, ci, co} : Shape{k, k, ci, co};
}

void he_init(Tensor& w, int fan_in, Rng& rng) {
  const double std_dev = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (std::int64_t i = 0; i < w.size(); ++i) w[i] = std_dev * rng.next_normal();
}

}  // namespace

AffineCoupling::AffineCoupling(int channels, int hidden_width, bool threed, const std::string& name_prefix, Rng& rng)
    : channels_(channels), width_(hidden_width), threed_(threed) {
  if (channels % 2) throw DimensionError("coupling: channel count must be even, got " + std::to_string(channels));
  const int ca = channels / 2, cb = channels / 2;
  const int k = 3;
  const int taps = threed ? k * k * k : k * k;
  w1_ = {name_prefix + "coupling.w1", Tensor(conv_weight_shape(threed, k, ca, width_))};
  b1_ = {name_prefix + "coupling.b1", Tensor({width_})};
  w2_ = {name_prefix + "coupling.w2", Tensor(conv_weight_shape(threed, k, width_, width_))};
  b2_ = {name_prefix + "coupling.b2", Tensor({width_})};
  w3_ = {name_prefix + "coupling.w3", Tensor(conv_weight_shape(threed, k, width_, 2 * cb))};
  b3_ = {name_prefix + "coupling.b3", Tensor({2 * cb})};
  he_init(w1_.value, taps * ca, rng);
  he_init(w2_.value, taps * width_, rng);
  // w3/b3 stay zero: the coupling starts near the identity.
}

std::pair<Tensor, Tensor> AffineCoupling::net(const Tensor& xa) const {
  Tensor h = conv_same(xa, w1_.value, b1_.value);
  for (std::int64_t i = 0; i < h.size(); ++i) h[i] = h[i] > 0.0 ? h[i] : 0.0;
  h = conv_same(h, w2_.value, b2_.value);
  for (std::int64_t i = 0; i < h.size(); ++i) h[i] = h[i] > 0.0 ? h[i] : 0.0;
  Tensor o = conv_same(h, w3_.value, b3_.value);
  return split_channels(o);
}

LayerVarOutput AffineCoupling::forward(Tape& tape, Var x) const {
  if (x.value().channels() != channels_) throw DimensionError("coupling: channel mismatch");
  const int half = channels_ / 2;
  Var xa = tape.narrow_channels(x, 0, half);
  Var xb = tape.narrow_channels(x, half, half);
  Var h = tape.relu(tape.conv_same(xa, tape.watch(w1_), tape.watch(b1_)));
  h = tape.relu(tape.conv_same(h, tape.watch(w2_), tape.watch(b2_)));
  Var o = tape.conv_same(h, tape.watch(w3_), tape.watch(b3_));
  Var h2 = tape.narrow_channels(o, 0, half);
  Var t = tape.narrow_channels(o, half, half);
  // scale in (0.6, 1.6)
  Var scale = tape.affine(tape.sigmoid(tape.affine(h2, 1.0, -0.1)), 1.0, 0.6);
  Var zb = tape.mul(tape.add(xb, t), scale);
  Var z = tape.concat_channels(xa, zb);
  Var log_det = tape.sum(tape.log(scale));
  return {z, log_det};
}

LayerOutput AffineCoupling::forward(const Tensor& x) const {
  if (x.channels() != channels_) throw DimensionError("coupling: channel mismatch");
  auto [xa, xb] = split_channels(x);
  auto [h2, t] = net(xa);
  Tensor zb(xb.shape());
  double log_det = 0.0;
  for (std::int64_t i = 0; i < xb.size(); ++i) {
    const double scale = sigmoid_scalar(h2[i] - 0.1) + 0.6;
    zb[i] = (xb[i] + t[i]) * scale;
    log_det += std::log(scale);
  }
  return {concat_channels(xa, zb), log_det};
}

Tensor AffineCoupling::inverse(const Tensor& z) const {
  if (z.channels() != channels_) throw DimensionError("coupling: channel mismatch");
  auto [za, zb] = split_channels(z);
  auto [h2, t] = net(za);  // za passed through unchanged
  Tensor xb(zb.shape());
  for (std::int64_t i = 0; i < zb.size(); ++i) {
    const double scale = sigmoid_scalar(h2[i] - 0.1) + 0.6;
    xb[i] = zb[i] / scale - t[i];
  }
  return concat_channels(za, xb);
}

std::vector<Parameter*> AffineCoupling::parameters() { return {&w1_, &b1_, &w2_, &b2_, &w3_, &b3_}; }

void AffineCoupling::force_constant_net(double h2, double t) {
  for (std::int64_t i = 0; i < w3_.value.size(); ++i) w3_.value[i] = 0.0;
  const int half = channels_ / 2;
  for (int k = 0; k < half; ++k) {
    b3_.value[k] = h2;
    b3_.value[half + k] = t;
  }
}

FlowStep::FlowStep(int channels, int hidden_width, bool threed, const std::string& name_prefix, Rng& rng)
    : actnorm(channels, name_prefix),
      invconv(channels, name_prefix),
      coupling(channels, hidden_width, threed, name_prefix, rng) {
  invconv.init_random_rotation(rng);
}

LayerVarOutput FlowStep::forward(Tape& tape, Var x) const {
  LayerVarOutput a = actnorm.forward(tape, x);
  LayerVarOutput b = invconv.forward(tape, a.z);
  LayerVarOutput c = coupling.forward(tape, b.z);
  Var log_det = tape.add(tape.add(a.log_det, b.log_det), c.log_det);
  return {c.z, log_det};
}

LayerOutput FlowStep::forward(const Tensor& x) const {
  LayerOutput a = actnorm.forward(x);
  LayerOutput b = invconv.forward(a.z);
  LayerOutput c = coupling.forward(b.z);
  return {std::move(c.z), a.log_det + b.log_det + c.log_det};
}

Tensor FlowStep::inverse(const Tensor& z) const { return actnorm.inverse(invconv.inverse(coupling.inverse(z))); }

std::vector<Parameter*> FlowStep::parameters() {
  std::vector<Parameter*> out;
  for (Parameter* p : actnorm.parameters()) out.push_back(p);
  for (Parameter* p : invconv.parameters()) out.push_back(p);
  for (Parameter* p : coupling.parameters()) out.push_back(p);
  return out;
}

}  // namespace flowgate
