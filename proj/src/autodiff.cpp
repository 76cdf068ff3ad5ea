#include "flowgate/autodiff.hpp"

#include <cmath>

namespace flowgate {

namespace {

constexpr double kLog2Pi = 1.8378770664093454835606594728112;

struct ConvDims {
  int d, h, w, ci;  // input extents, depth 1 for 2-D
  int kd, kh, kw, co;
  bool threed;
};

ConvDims conv_dims(const Shape& xs, const Shape& ws) {
  ConvDims cd{};
  if (xs.size() == 3 && ws.size() == 4) {
    cd = {1, xs[0], xs[1], xs[2], 1, ws[0], ws[1], ws[3], false};
    if (ws[2] != xs[2]) throw DimensionError("conv kernel input channels mismatch");
  } else if (xs.size() == 4 && ws.size() == 5) {
    cd = {xs[0], xs[1], xs[2], xs[3], ws[0], ws[1], ws[2], ws[4], true};
    if (ws[3] != xs[3]) throw DimensionError("conv kernel input channels mismatch");
  } else {
    throw DimensionError("conv_same: need rank-3 x with rank-4 kernel or rank-4 x with rank-5 kernel, got " +
                         shape_str(xs) + " and " + shape_str(ws));
  }
  if (cd.kd % 2 == 0 || cd.kh % 2 == 0 || cd.kw % 2 == 0)
    throw DimensionError("conv_same: kernel extents must be odd");
  return cd;
}

void conv_forward(const double* x, const double* w, const double* bias, double* out, const ConvDims& cd) {
  const int pd = cd.kd / 2, ph = cd.kh / 2, pw = cd.kw / 2;
  const std::int64_t ci = cd.ci, co = cd.co;
  for (int od = 0; od < cd.d; ++od)
    for (int oh = 0; oh < cd.h; ++oh)
      for (int ow = 0; ow < cd.w; ++ow) {
        double* o = out + (((static_cast<std::int64_t>(od) * cd.h + oh) * cd.w) + ow) * co;
        for (int c = 0; c < co; ++c) o[c] = bias[c];
        for (int kd = 0; kd < cd.kd; ++kd) {
          const int id = od + kd - pd;
          if (id < 0 || id >= cd.d) continue;
          for (int kh = 0; kh < cd.kh; ++kh) {
            const int ih = oh + kh - ph;
            if (ih < 0 || ih >= cd.h) continue;
            for (int kw = 0; kw < cd.kw; ++kw) {
              const int iw = ow + kw - pw;
              if (iw < 0 || iw >= cd.w) continue;
              const double* xi = x + (((static_cast<std::int64_t>(id) * cd.h + ih) * cd.w) + iw) * ci;
              const double* wk = w + ((static_cast<std::int64_t>(kd) * cd.kh + kh) * cd.kw + kw) * ci * co;
              for (int c = 0; c < ci; ++c) {
                const double v = xi[c];
                if (v == 0.0) continue;
                const double* wrow = wk + static_cast<std::int64_t>(c) * co;
                for (int q = 0; q < co; ++q) o[q] += v * wrow[q];
              }
            }
          }
        }
      }
}

void conv_backward(const double* x, const double* w, const double* gout, double* gx, double* gw, double* gb,
                   const ConvDims& cd) {
  const int pd = cd.kd / 2, ph = cd.kh / 2, pw = cd.kw / 2;
  const std::int64_t ci = cd.ci, co = cd.co;
  for (int od = 0; od < cd.d; ++od)
    for (int oh = 0; oh < cd.h; ++oh)
      for (int ow = 0; ow < cd.w; ++ow) {
        const double* g = gout + (((static_cast<std::int64_t>(od) * cd.h + oh) * cd.w) + ow) * co;
        for (int q = 0; q < co; ++q) gb[q] += g[q];
        for (int kd = 0; kd < cd.kd; ++kd) {
          const int id = od + kd - pd;
          if (id < 0 || id >= cd.d) continue;
          for (int kh = 0; kh < cd.kh; ++kh) {
            const int ih = oh + kh - ph;
            if (ih < 0 || ih >= cd.h) continue;
            for (int kw = 0; kw < cd.kw; ++kw) {
              const int iw = ow + kw - pw;
              if (iw < 0 || iw >= cd.w) continue;
              const std::int64_t xoff = (((static_cast<std::int64_t>(id) * cd.h + ih) * cd.w) + iw) * ci;
              const std::int64_t woff = ((static_cast<std::int64_t>(kd) * cd.kh + kh) * cd.kw + kw) * ci * co;
              const double* xi = x + xoff;
              double* gxi = gx + xoff;
              for (int c = 0; c < ci; ++c) {
                const double* wrow = w + woff + static_cast<std::int64_t>(c) * co;
                double* gwrow = gw + woff + static_cast<std::int64_t>(c) * co;
                const double xv = xi[c];
                double acc = 0.0;
                for (int q = 0; q < co; ++q) {
                  acc += g[q] * wrow[q];
                  gwrow[q] += xv * g[q];
                }
                gxi[c] += acc;
              }
            }
          }
        }
      }
}

}  // namespace

Tensor conv_same(const Tensor& x, const Tensor& w, const Tensor& bias) {
  const ConvDims cd = conv_dims(x.shape(), w.shape());
  if (bias.rank() != 1 || bias.extent(0) != cd.co) throw DimensionError("conv_same: bias shape mismatch");
  Shape out_shape = x.shape();
  out_shape.back() = cd.co;
  Tensor out(out_shape);
  conv_forward(x.data(), w.data(), bias.data(), out.data(), cd);
  return out;
}

const Tensor& Var::value() const {
  if (!tape_) throw Error("value() on an empty Var");
  return tape_->value(*this);
}

Var Tape::make(Tensor value, bool needs_grad) {
  Node n;
  n.value = std::move(value);
  n.needs_grad = track_ && needs_grad;
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Tape::Node& Tape::node(Var v) { return nodes_[static_cast<std::size_t>(v.id_)]; }
const Tape::Node& Tape::node(Var v) const { return nodes_[static_cast<std::size_t>(v.id_)]; }

void Tape::check_same_tape(Var v) const {
  if (v.tape_ != this || v.id_ < 0 || v.id_ >= static_cast<int>(nodes_.size()))
    throw Error("Var does not belong to this tape");
}

Tensor& Tape::grad_buf(int id) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (!n.grad_set) {
    n.grad = Tensor(n.value.shape());
    n.grad_set = true;
  }
  return n.grad;
}

Var Tape::constant(Tensor value) { return make(std::move(value), false); }

Var Tape::watch(const Parameter& p) {
  auto it = watched_.find(&p);
  if (it != watched_.end()) return Var(this, it->second);
  Var v = make(p.value, true);
  node(v).param = &p;
  watched_.emplace(&p, v.id_);
  return v;
}

Var Tape::add(Var a, Var b) {
  check_same_tape(a);
  check_same_tape(b);
  const Tensor& av = node(a).value;
  const Tensor& bv = node(b).value;
  if (!av.same_shape(bv)) throw DimensionError("add: shape mismatch " + shape_str(av.shape()) + " vs " + shape_str(bv.shape()));
  Tensor out(av.shape());
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  Var y = make(std::move(out), node(a).needs_grad || node(b).needs_grad);
  if (node(y).needs_grad) {
    const int ai = a.id_, bi = b.id_, yi = y.id_;
    node(y).backprop = [this, ai, bi, yi] {
      const Tensor& g = nodes_[static_cast<std::size_t>(yi)].grad;
      if (nodes_[static_cast<std::size_t>(ai)].needs_grad) {
        Tensor& ga = grad_buf(ai);
        for (std::int64_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (nodes_[static_cast<std::size_t>(bi)].needs_grad) {
        Tensor& gb = grad_buf(bi);
        for (std::int64_t i = 0; i < g.size(); ++i) gb[i] += g[i];
      }
    };
  }
  return y;
}

Var Tape::sub(Var a, Var b) {
  check_same_tape(a);
  check_same_tape(b);
  const Tensor& av = node(a).value;
  const Tensor& bv = node(b).value;
  if (!av.same_shape(bv)) throw DimensionError("sub: shape mismatch");
  Tensor out(av.shape());
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  Var y = make(std::move(out), node(a).needs_grad || node(b).needs_grad);
  if (node(y).needs_grad) {
    const int ai = a.id_, bi = b.id_, yi = y.id_;
    node(y).backprop = [this, ai, bi, yi] {
      const Tensor& g = nodes_[static_cast<std::size_t>(yi)].grad;
      if (nodes_[static_cast<std::size_t>(ai)].needs_grad) {
        Tensor& ga = grad_buf(ai);
        for (std::int64_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (nodes_[static_cast<std::size_t>(bi)].needs_grad) {
        Tensor& gb = grad_buf(bi);
        for (std::int64_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
      }
    };
  }
  return y;
}

Var Tape::mul(Var a, Var b) {
  check_same_tape(a);
  check_same_tape(b);
  const Tensor& av = node(a).value;
  const Tensor& bv = node(b).value;
  if (!av.same_shape(bv)) throw DimensionError("mul: shape mismatch");
  Tensor out(av.shape());
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  Var y = make(std::move(out), node(a).needs_grad || node(b).needs_grad);
  if (node(y).needs_grad) {
    const int ai = a.id_, bi = b.id_, yi = y.id_;
    node(y).backprop = [this, ai, bi, yi] {
      const Tensor& g = nodes_[static_cast<std::size_t>(yi)].grad;
      const Tensor& av2 = nodes_[static_cast<std::size_t>(ai)].value;
      const Tensor& bv2 = nodes_[static_cast<std::size_t>(bi)].value;
      if (nodes_[static_cast<std::size_t>(ai)].needs_grad) {
        Tensor& ga = grad_buf(ai);
        for (std::int64_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv2[i];
      }
      if (nodes_[static_cast<std::size_t>(bi)].needs_grad) {
        Tensor& gb = grad_buf(bi);
        for (std::int64_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av2[i];
      }
    };
  }
  return y;
}

Var Tape::affine(Var a, double scale, double shift) {
  check_same_tape(a);
  const Tensor& av = node(a).value;
  Tensor out(av.shape());
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] = scale * av[i] + shift;
  Var y = make(std::move(out), node(a).needs_grad);
  if (node(y).needs_grad) {
    const int ai = a.id_, yi = y.id_;
    node(y).backprop = [this, ai, yi, scale] {
      const Tensor& g = nodes_[static_cast<std::size_t>(yi)].grad;
      Tensor& ga = grad_buf(ai);
      for (std::int64_t i = 0; i < g.size(); ++i) ga[i] += scale * g[i];
    };
  }
  return y;
}

Var Tape::exp(Var a) {
  check_same_tape(a);
  const Tensor& av = node(a).value;
  Tensor out(av.shape());
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] = std::exp(av[i]);
  Var y = make(std::move(out), node(a).needs_grad);
  if (node(y).needs_grad) {
    const int ai = a.id_, yi = y.id_;
    node(y).backprop = [this, ai, yi] {
      const Tensor& g = nodes_[static_cast<std::size_t>(yi)].grad;
      const Tensor& yv = nodes_[static_cast<std::size_t>(yi)].value;
      Tensor& ga = grad_buf(ai);
      for (std::int64_t i = 0; i < g.size(); ++i) ga[i] += g[i] * yv[i];
    };
  }
  return y;
}

Var Tape::log(Var a) {
  check_same_tape(a);
  const Tensor& av = node(a).value;
  Tensor out(av.shape());
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] = std::log(av[i]);
  Var y = make(std::move(out), node(a).needs_grad);
  if (node(y).needs_grad) {
    const int ai = a.id_, yi = y.id_;
    node(y).backprop = [this, ai, yi] {
      const Tensor& g = nodes_[static_cast<std::size_t>(yi)].grad;
      const Tensor& av2 = nodes_[static_cast<std::size_t>(ai)].value;
      Tensor& ga = grad_buf(ai);
      for (std::int64_t i = 0; i < g.size(); ++i) ga[i] += g[i] / av2[i];
    };
  }
  return y;
}

Var Tape::sigmoid(Var a) {
  check_same_tape(a);
  const Tensor& av = node(a).value;
  Tensor out(av.shape());
  for (std::int64_t i = 0; i < out.size(); ++i) {
    const double x = av[i];
    out[i] = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
  }
  Var y = make(std::move(out), node(a).needs_grad);
  if (node(y).needs_grad) {
    const int ai = a.id_, yi = y.id_;
    node(y).backprop = [this, ai, yi] {
      const Tensor& g = nodes_[static_cast<std::size_t>(yi)].grad;
      const Tensor& yv = nodes_[static_cast<std::size_t>(yi)].value;
      Tensor& ga = grad_buf(ai);
      for (std::int64_t i = 0; i < g.size(); ++i) ga[i] += g[i] * yv[i] * (1.0 - yv[i]);
    };
  }
  return y;
}

Var Tape::relu(Var a) {
  check_same_tape(a);
  const Tensor& av = node(a).value;
  Tensor out(av.shape());
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] = av[i] > 0.0 ? av[i] : 0.0;
  Var y = make(std::move(out), node(a).needs_grad);
  if (node(y).needs_grad) {
    const int ai = a.id_, yi = y.id_;
    node(y).backprop = [this, ai, yi] {
      const Tensor& g = nodes_[static_cast<std::size_t>(yi)].grad;
      const Tensor& av2 = nodes_[static_cast<std::size_t>(ai)].value;
      Tensor& ga = grad_buf(ai);
      for (std::int64_t i = 0; i < g.size(); ++i)
        if (av2[i] > 0.0) ga[i] += g[i];
    };
  }
  return y;
}

Var Tape::sum(Var a) {
  check_same_tape(a);
  const Tensor& av = node(a).value;
  double s = 0.0;
  for (std::int64_t i = 0; i < av.size(); ++i) s += av[i];
  Var y = make(Tensor::scalar(s), node(a).needs_grad);
  if (node(y).needs_grad) {
    const int ai = a.id_, yi = y.id_;
    node(y).backprop = [this, ai, yi] {
      const double g = nodes_[static_cast<std::size_t>(yi)].grad[0];
      Tensor& ga = grad_buf(ai);
      for (std::int64_t i = 0; i < ga.size(); ++i) ga[i] += g;
    };
  }
  return y;
}

Var Tape::broadcast_channels(Var per_channel, const Shape& target) {
  check_same_tape(per_channel);
  const Tensor& pv = node(per_channel).value;
  const int c = target.empty() ? 0 : target.back();
  if (pv.rank() != 1 || pv.extent(0) != c)
    throw DimensionError("broadcast_channels: expected shape [" + std::to_string(c) + "], got " + shape_str(pv.shape()));
  Tensor out(target);
  const std::int64_t pixels = out.size() / c;
  for (std::int64_t p = 0; p < pixels; ++p)
    for (int k = 0; k < c; ++k) out[p * c + k] = pv[k];
  Var y = make(std::move(out), node(per_channel).needs_grad);
  if (node(y).needs_grad) {
    const int ai = per_channel.id_, yi = y.id_;
    node(y).backprop = [this, ai, yi, c, pixels] {
      const Tensor& g = nodes_[static_cast<std::size_t>(yi)].grad;
      Tensor& ga = grad_buf(ai);
      for (std::int64_t p = 0; p < pixels; ++p)
        for (int k = 0; k < c; ++k) ga[k] += g[p * c + k];
    };
  }
  return y;
}

Var Tape::concat_channels(Var a, Var b) {
  check_same_tape(a);
  check_same_tape(b);
  const Tensor& av = node(a).value;
  const Tensor& bv = node(b).value;
  if (av.rank() != bv.rank()) throw DimensionError("concat_channels: rank mismatch");
  Shape out_shape = av.shape();
  for (int ax = 0; ax + 1 < av.rank(); ++ax)
    if (av.extent(ax) != bv.extent(ax)) throw DimensionError("concat_channels: spatial extents differ");
  const int ca = av.channels(), cb = bv.channels();
  out_shape.back() = ca + cb;
  Tensor out(out_shape);
  const std::int64_t pixels = av.size() / ca;
  for (std::int64_t p = 0; p < pixels; ++p) {
    for (int k = 0; k < ca; ++k) out[p * (ca + cb) + k] = av[p * ca + k];
    for (int k = 0; k < cb; ++k) out[p * (ca + cb) + ca + k] = bv[p * cb + k];
  }
  Var y = make(std::move(out), node(a).needs_grad || node(b).needs_grad);
  if (node(y).needs_grad) {
    const int ai = a.id_, bi = b.id_, yi = y.id_;
    node(y).backprop = [this, ai, bi, yi, ca, cb, pixels] {
      const Tensor& g = nodes_[static_cast<std::size_t>(yi)].grad;
      if (nodes_[static_cast<std::size_t>(ai)].needs_grad) {
        Tensor& ga = grad_buf(ai);
        for (std::int64_t p = 0; p < pixels; ++p)
          for (int k = 0; k < ca; ++k) ga[p * ca + k] += g[p * (ca + cb) + k];
      }
      if (nodes_[static_cast<std::size_t>(bi)].needs_grad) {
        Tensor& gb = grad_buf(bi);
        for (std::int64_t p = 0; p < pixels; ++p)
          for (int k = 0; k < cb; ++k) gb[p * cb + k] += g[p * (ca + cb) + ca + k];
      }
    };
  }
  return y;
}

Var Tape::narrow_channels(Var x, int begin, int count) {
  check_same_tape(x);
  const Tensor& xv = node(x).value;
  const int c = xv.channels();
  if (begin < 0 || count <= 0 || begin + count > c) throw DimensionError("narrow_channels: bad channel range");
  Shape out_shape = xv.shape();
  out_shape.back() = count;
  Tensor out(out_shape);
  const std::int64_t pixels = xv.size() / c;
  for (std::int64_t p = 0; p < pixels; ++p)
    for (int k = 0; k < count; ++k) out[p * count + k] = xv[p * c + begin + k];
  Var y = make(std::move(out), node(x).needs_grad);
  if (node(y).needs_grad) {
    const int ai = x.id_, yi = y.id_;
    node(y).backprop = [this, ai, yi, begin, count, c, pixels] {
      const Tensor& g = nodes_[static_cast<std::size_t>(yi)].grad;
      Tensor& ga = grad_buf(ai);
      for (std::int64_t p = 0; p < pixels; ++p)
        for (int k = 0; k < count; ++k) ga[p * c + begin + k] += g[p * count + k];
    };
  }
  return y;
}

Var Tape::permutation(Var x, std::function<Tensor(const Tensor&)> forward,
                      std::function<Tensor(const Tensor&)> inverse) {
  check_same_tape(x);
  Tensor out = forward(node(x).value);
  if (out.size() != node(x).value.size()) throw DimensionError("permutation op must preserve element count");
  Var y = make(std::move(out), node(x).needs_grad);
  if (node(y).needs_grad) {
    const int ai = x.id_, yi = y.id_;
    node(y).backprop = [this, ai, yi, inverse = std::move(inverse)] {
      Tensor gin = inverse(nodes_[static_cast<std::size_t>(yi)].grad);
      Tensor& ga = grad_buf(ai);
      for (std::int64_t i = 0; i < ga.size(); ++i) ga[i] += gin[i];
    };
  }
  return y;
}

Var Tape::channel_mix(Var x, Var kernel) {
  check_same_tape(x);
  check_same_tape(kernel);
  const Tensor& xv = node(x).value;
  const SquareMatrix k = SquareMatrix::from_tensor(node(kernel).value);
  Tensor out = flowgate::channel_mix(xv, k);
  Var y = make(std::move(out), node(x).needs_grad || node(kernel).needs_grad);
  if (node(y).needs_grad) {
    const int xi = x.id_, ki = kernel.id_, yi = y.id_;
    node(y).backprop = [this, xi, ki, yi] {
      const Tensor& g = nodes_[static_cast<std::size_t>(yi)].grad;
      const Tensor& xv2 = nodes_[static_cast<std::size_t>(xi)].value;
      const SquareMatrix k2 = SquareMatrix::from_tensor(nodes_[static_cast<std::size_t>(ki)].value);
      const int c = k2.order();
      const std::int64_t pixels = xv2.size() / c;
      if (nodes_[static_cast<std::size_t>(xi)].needs_grad) {
        Tensor gx = flowgate::channel_mix(g, k2.transposed());
        Tensor& ga = grad_buf(xi);
        for (std::int64_t i = 0; i < ga.size(); ++i) ga[i] += gx[i];
      }
      if (nodes_[static_cast<std::size_t>(ki)].needs_grad) {
        Tensor& gk = grad_buf(ki);
        for (std::int64_t p = 0; p < pixels; ++p)
          for (int ci = 0; ci < c; ++ci) {
            const double xv3 = xv2[p * c + ci];
            for (int co = 0; co < c; ++co) gk[static_cast<std::int64_t>(ci) * c + co] += xv3 * g[p * c + co];
          }
      }
    };
  }
  return y;
}

Var Tape::log_abs_det(Var kernel) {
  check_same_tape(kernel);
  const SquareMatrix k = SquareMatrix::from_tensor(node(kernel).value);
  const LuFactorization lu(k);
  Var y = make(Tensor::scalar(lu.log_abs_det()), node(kernel).needs_grad);
  if (node(y).needs_grad) {
    // d log|det K| / dK = (K^-1)^T, captured from the same factorization.
    const SquareMatrix inv_t = lu.inverse().transposed();
    const int ki = kernel.id_, yi = y.id_;
    node(y).backprop = [this, ki, yi, inv_t] {
      const double g = nodes_[static_cast<std::size_t>(yi)].grad[0];
      Tensor& gk = grad_buf(ki);
      const int c = inv_t.order();
      for (int r = 0; r < c; ++r)
        for (int q = 0; q < c; ++q) gk[static_cast<std::int64_t>(r) * c + q] += g * inv_t.at(r, q);
    };
  }
  return y;
}

Var Tape::conv_same(Var x, Var w, Var bias) {
  check_same_tape(x);
  check_same_tape(w);
  check_same_tape(bias);
  const Tensor& xv = node(x).value;
  const Tensor& wv = node(w).value;
  const Tensor& bv = node(bias).value;
  const ConvDims cd = conv_dims(xv.shape(), wv.shape());
  if (bv.rank() != 1 || bv.extent(0) != cd.co) throw DimensionError("conv_same: bias shape mismatch");
  Shape out_shape = xv.shape();
  out_shape.back() = cd.co;
  Tensor out(out_shape);
  conv_forward(xv.data(), wv.data(), bv.data(), out.data(), cd);
  Var y = make(std::move(out), node(x).needs_grad || node(w).needs_grad || node(bias).needs_grad);
  if (node(y).needs_grad) {
    const int xi = x.id_, wi = w.id_, bi = bias.id_, yi = y.id_;
    node(y).backprop = [this, xi, wi, bi, yi, cd] {
      const Tensor& g = nodes_[static_cast<std::size_t>(yi)].grad;
      const Tensor& xv2 = nodes_[static_cast<std::size_t>(xi)].value;
      const Tensor& wv2 = nodes_[static_cast<std::size_t>(wi)].value;
      // All three gradients come from one pass over the output.
      Tensor gx(xv2.shape()), gw(wv2.shape()), gb(Shape{cd.co});
      conv_backward(xv2.data(), wv2.data(), g.data(), gx.data(), gw.data(), gb.data(), cd);
      if (nodes_[static_cast<std::size_t>(xi)].needs_grad) {
        Tensor& a = grad_buf(xi);
        for (std::int64_t i = 0; i < a.size(); ++i) a[i] += gx[i];
      }
      if (nodes_[static_cast<std::size_t>(wi)].needs_grad) {
        Tensor& a = grad_buf(wi);
        for (std::int64_t i = 0; i < a.size(); ++i) a[i] += gw[i];
      }
      if (nodes_[static_cast<std::size_t>(bi)].needs_grad) {
        Tensor& a = grad_buf(bi);
        for (std::int64_t i = 0; i < a.size(); ++i) a[i] += gb[i];
      }
    };
  }
  return y;
}

Var Tape::gaussian_logp(Var z) {
  check_same_tape(z);
  const Tensor& zv = node(z).value;
  double s = 0.0;
  for (std::int64_t i = 0; i < zv.size(); ++i) s += zv[i] * zv[i] + kLog2Pi;
  Var y = make(Tensor::scalar(-0.5 * s), node(z).needs_grad);
  if (node(y).needs_grad) {
    const int zi = z.id_, yi = y.id_;
    node(y).backprop = [this, zi, yi] {
      const double g = nodes_[static_cast<std::size_t>(yi)].grad[0];
      const Tensor& zv2 = nodes_[static_cast<std::size_t>(zi)].value;
      Tensor& ga = grad_buf(zi);
      for (std::int64_t i = 0; i < ga.size(); ++i) ga[i] -= g * zv2[i];
    };
  }
  return y;
}

void Tape::backward(Var scalar_output) {
  check_same_tape(scalar_output);
  if (!track_) throw Error("backward() on a non-tracking tape");
  if (swept_) throw Error("backward() may run once per tape");
  if (node(scalar_output).value.size() != 1)
    throw Error("backward() needs a scalar output, got shape " + shape_str(node(scalar_output).value.shape()));
  swept_ = true;
  grad_buf(scalar_output.id_)[0] = 1.0;
  for (int i = scalar_output.id_; i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (n.grad_set && n.backprop) n.backprop();
  }
}

const Tensor& Tape::value(Var v) const {
  check_same_tape(v);
  return node(v).value;
}

Tensor Tape::grad_of(Var v) const {
  check_same_tape(v);
  const Node& n = node(v);
  if (n.grad_set) return n.grad;
  return Tensor(n.value.shape());
}

const Tensor* Tape::grad_for(const Parameter& p) const {
  auto it = watched_.find(&p);
  if (it == watched_.end()) return nullptr;
  const Node& n = nodes_[static_cast<std::size_t>(it->second)];
  if (!n.grad_set) return nullptr;
  return &n.grad;
}

}  // namespace flowgate
