#pragma once

// Differentiable ops over ad::Tensor. Layout is NCHW, row-major.
// Every op validates extents (DimensionError) and rejects non-finite outputs
// (NumericError). Batched ops process samples one at a time with identical
// kernels, so a sample's result never depends on the batch it travels in.

#include <algorithm>
#include <cmath>
#include <string>

#include "depthdiff/autodiff.hpp"

namespace depthdiff::ad {

namespace detail {

template <typename Scalar>
void require_finite(const Vector<Scalar>& v, const char* op) {
  if (!v.allFinite()) throw NumericError(std::string(op) + " produced a non-finite value");
}

inline void require_rank(const Shape& s, int rank, const char* op, const char* what) {
  if (static_cast<int>(s.size()) != rank) {
    throw DimensionError(std::string(op) + ": " + what + " must have rank " + std::to_string(rank) +
                         ", got " + shape_str(s));
  }
}

inline void require_same(const Shape& a, const Shape& b, const char* op) {
  if (a != b) throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

template <typename Scalar>
Scalar sigmoid(Scalar x) {
  if (x >= 0) return Scalar(1) / (Scalar(1) + std::exp(-x));
  const Scalar e = std::exp(x);
  return e / (Scalar(1) + e);
}

struct ConvGeometry {
  int cin, h, w, kh, kw, stride, pad, ho, wo;
  Eigen::Index k() const { return Eigen::Index{cin} * kh * kw; }
  Eigen::Index p() const { return Eigen::Index{ho} * wo; }
};

/// cols(p, k): input pixel feeding output position p through kernel tap k,
/// with k = (ci * kh + ky) * kw + kx.
template <typename Scalar>
void im2col(const Scalar* x, const ConvGeometry& g, Matrix<Scalar>& cols) {
  cols.resize(g.p(), g.k());
  for (int c = 0; c < g.cin; ++c) {
    for (int ky = 0; ky < g.kh; ++ky) {
      for (int kx = 0; kx < g.kw; ++kx) {
        Scalar* col = cols.col((Eigen::Index{c} * g.kh + ky) * g.kw + kx).data();
        for (int oy = 0; oy < g.ho; ++oy) {
          const int iy = oy * g.stride - g.pad + ky;
          Scalar* dst = col + Eigen::Index{oy} * g.wo;
          if (iy < 0 || iy >= g.h) {
            std::fill(dst, dst + g.wo, Scalar(0));
            continue;
          }
          const Scalar* row = x + (Eigen::Index{c} * g.h + iy) * g.w;
          for (int ox = 0; ox < g.wo; ++ox) {
            const int ix = ox * g.stride - g.pad + kx;
            dst[ox] = (ix >= 0 && ix < g.w) ? row[ix] : Scalar(0);
          }
        }
      }
    }
  }
}

template <typename Scalar>
void col2im(const Matrix<Scalar>& cols, const ConvGeometry& g, Scalar* dx) {
  for (int c = 0; c < g.cin; ++c) {
    for (int ky = 0; ky < g.kh; ++ky) {
      for (int kx = 0; kx < g.kw; ++kx) {
        const Scalar* col = cols.col((Eigen::Index{c} * g.kh + ky) * g.kw + kx).data();
        for (int oy = 0; oy < g.ho; ++oy) {
          const int iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.h) continue;
          const Scalar* src = col + Eigen::Index{oy} * g.wo;
          Scalar* row = dx + (Eigen::Index{c} * g.h + iy) * g.w;
          for (int ox = 0; ox < g.wo; ++ox) {
            const int ix = ox * g.stride - g.pad + kx;
            if (ix >= 0 && ix < g.w) row[ix] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

/// 2-D cross-correlation. Output extent is floor((H + 2*padding - kh) / stride) + 1.
template <typename Scalar>
Tensor<Scalar> conv2d(Tape<Scalar>& tape, const Tensor<Scalar>& x, const Tensor<Scalar>& weight,
                      const Tensor<Scalar>& bias, int stride = 1, int padding = 0) {
  using Map = Eigen::Map<Matrix<Scalar>>;
  using CMap = Eigen::Map<const Matrix<Scalar>>;
  detail::require_rank(x.shape(), 4, "conv2d", "input");
  detail::require_rank(weight.shape(), 4, "conv2d", "weight");
  const int n = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int cout = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
  if (weight.dim(1) != cin) {
    throw DimensionError("conv2d: input channels (axis 1) " + std::to_string(cin) +
                         " != weight input channels (axis 1) " + std::to_string(weight.dim(1)));
  }
  if (kh % 2 == 0 || kw % 2 == 0) throw DimensionError("conv2d: kernel extents must be odd, got " + shape_str(weight.shape()));
  if (bias.shape() != Shape{cout}) {
    throw DimensionError("conv2d: bias shape " + shape_str(bias.shape()) + " != [" + std::to_string(cout) + "]");
  }
  if (stride < 1 || padding < 0) throw DimensionError("conv2d: stride must be >= 1 and padding >= 0");
  if (h + 2 * padding < kh || w + 2 * padding < kw) {
    throw DimensionError("conv2d: kernel larger than padded input on axes 2/3: input " + shape_str(x.shape()));
  }
  const detail::ConvGeometry g{cin, h, w, kh, kw, stride, padding, (h + 2 * padding - kh) / stride + 1,
                               (w + 2 * padding - kw) / stride + 1};
  const Eigen::Index in_stride = Eigen::Index{cin} * h * w;
  const Eigen::Index out_stride = Eigen::Index{cout} * g.p();

  Tensor<Scalar> out = Tensor<Scalar>::zeros({n, cout, g.ho, g.wo});
  const CMap wmat(weight.data(), g.k(), cout);
  Matrix<Scalar> cols;
  for (int s = 0; s < n; ++s) {
    detail::im2col(x.data() + s * in_stride, g, cols);
    Map o(out.data() + s * out_stride, g.p(), cout);
    o.noalias() = cols * wmat;
    o.rowwise() += bias.value().transpose();
  }
  detail::require_finite(out.value(), "conv2d");

  if (tape.tracks({&x, &weight, &bias})) {
    tape.record(out, [xn = x.node(), wn = weight.node(), bn = bias.node(), on = out.node(), g, n, cout,
                      in_stride, out_stride]() {
      const CMap wmat(wn->value.data(), g.k(), cout);
      Matrix<Scalar> cols;
      Matrix<Scalar> dcols;
      for (int s = 0; s < n; ++s) {
        const CMap dout(on->grad.data() + s * out_stride, g.p(), cout);
        if (wn->requires_grad || xn->requires_grad) detail::im2col(xn->value.data() + s * in_stride, g, cols);
        if (wn->requires_grad) {
          Map dw(wn->grad_buffer().data(), g.k(), cout);
          dw.noalias() += cols.transpose() * dout;
        }
        if (bn->requires_grad) bn->grad_buffer() += dout.colwise().sum().transpose();
        if (xn->requires_grad) {
          dcols.noalias() = dout * wmat.transpose();
          detail::col2im(dcols, g, xn->grad_buffer().data() + s * in_stride);
        }
      }
    });
  }
  return out;
}

/// y = x W^T + b for x[N, Din], W[Dout, Din], b[Dout].
template <typename Scalar>
Tensor<Scalar> linear(Tape<Scalar>& tape, const Tensor<Scalar>& x, const Tensor<Scalar>& weight,
                      const Tensor<Scalar>& bias) {
  using CMap = Eigen::Map<const Matrix<Scalar>>;
  using VMap = Eigen::Map<Vector<Scalar>>;
  using CVMap = Eigen::Map<const Vector<Scalar>>;
  detail::require_rank(x.shape(), 2, "linear", "input");
  detail::require_rank(weight.shape(), 2, "linear", "weight");
  const int n = x.dim(0), din = x.dim(1), dout = weight.dim(0);
  if (weight.dim(1) != din) {
    throw DimensionError("linear: input features (axis 1) " + std::to_string(din) + " != weight axis 1 " +
                         std::to_string(weight.dim(1)));
  }
  if (bias.shape() != Shape{dout}) throw DimensionError("linear: bias shape " + shape_str(bias.shape()));

  Tensor<Scalar> out = Tensor<Scalar>::zeros({n, dout});
  const CMap wt(weight.data(), din, dout);  // W^T in column-major view
  for (int s = 0; s < n; ++s) {
    VMap y(out.data() + Eigen::Index{s} * dout, dout);
    y.noalias() = wt.transpose() * CVMap(x.data() + Eigen::Index{s} * din, din);
    y += bias.value();
  }
  detail::require_finite(out.value(), "linear");

  if (tape.tracks({&x, &weight, &bias})) {
    tape.record(out, [xn = x.node(), wn = weight.node(), bn = bias.node(), on = out.node(), n, din, dout]() {
      const CMap wt(wn->value.data(), din, dout);
      for (int s = 0; s < n; ++s) {
        const CVMap dy(on->grad.data() + Eigen::Index{s} * dout, dout);
        const CVMap xs(xn->value.data() + Eigen::Index{s} * din, din);
        if (wn->requires_grad) {
          Eigen::Map<Matrix<Scalar>> dw(wn->grad_buffer().data(), din, dout);
          dw.noalias() += xs * dy.transpose();
        }
        if (bn->requires_grad) bn->grad_buffer() += dy;
        if (xn->requires_grad) {
          VMap dx(xn->grad_buffer().data() + Eigen::Index{s} * din, din);
          dx.noalias() += wt * dy;
        }
      }
    });
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> silu(Tape<Scalar>& tape, const Tensor<Scalar>& x) {
  Tensor<Scalar> out(x.shape(), x.value().unaryExpr([](Scalar v) { return v * detail::sigmoid(v); }));
  detail::require_finite(out.value(), "silu");
  if (tape.tracks({&x})) {
    tape.record(out, [xn = x.node(), on = out.node()]() {
      auto& dx = xn->grad_buffer();
      for (Eigen::Index i = 0; i < dx.size(); ++i) {
        const Scalar v = xn->value(i);
        const Scalar sg = detail::sigmoid(v);
        dx(i) += on->grad(i) * sg * (Scalar(1) + v * (Scalar(1) - sg));
      }
    });
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> tanh(Tape<Scalar>& tape, const Tensor<Scalar>& x) {
  Tensor<Scalar> out(x.shape(), x.value().array().tanh().matrix());
  detail::require_finite(out.value(), "tanh");
  if (tape.tracks({&x})) {
    tape.record(out, [xn = x.node(), on = out.node()]() {
      xn->grad_buffer().array() += on->grad.array() * (Scalar(1) - on->value.array().square());
    });
  }
  return out;
}

/// Per-(sample, group) standardization followed by a per-channel affine map.
template <typename Scalar>
Tensor<Scalar> group_norm(Tape<Scalar>& tape, const Tensor<Scalar>& x, int groups, const Tensor<Scalar>& gamma,
                          const Tensor<Scalar>& beta, Scalar eps = Scalar(1e-5)) {
  detail::require_rank(x.shape(), 4, "group_norm", "input");
  const int n = x.dim(0), c = x.dim(1);
  const Eigen::Index hw = Eigen::Index{x.dim(2)} * x.dim(3);
  if (groups <= 0 || c % groups != 0) {
    throw ConfigError("group_norm: channels " + std::to_string(c) + " not divisible by groups " +
                      std::to_string(groups));
  }
  if (gamma.shape() != Shape{c} || beta.shape() != Shape{c}) {
    throw DimensionError("group_norm: gamma/beta must have shape [" + std::to_string(c) + "]");
  }
  const int cpg = c / groups;
  const Eigen::Index m = cpg * hw;

  Vector<Scalar> xhat(x.size());
  Vector<Scalar> inv_std(Eigen::Index{n} * groups);
  Tensor<Scalar> out = Tensor<Scalar>::zeros(x.shape());
  for (int s = 0; s < n; ++s) {
    for (int gi = 0; gi < groups; ++gi) {
      const Eigen::Index base = (Eigen::Index{s} * c + Eigen::Index{gi} * cpg) * hw;
      const auto seg = x.value().segment(base, m).array();
      const Scalar mean = seg.mean();
      const Scalar var = (seg - mean).square().mean();
      const Scalar inv = Scalar(1) / std::sqrt(var + eps);
      inv_std(Eigen::Index{s} * groups + gi) = inv;
      xhat.segment(base, m) = ((seg - mean) * inv).matrix();
      for (int cc = 0; cc < cpg; ++cc) {
        const int ch = gi * cpg + cc;
        const Eigen::Index off = base + Eigen::Index{cc} * hw;
        out.value().segment(off, hw) =
            (xhat.segment(off, hw).array() * gamma.value()(ch) + beta.value()(ch)).matrix();
      }
    }
  }
  detail::require_finite(out.value(), "group_norm");

  if (tape.tracks({&x, &gamma, &beta})) {
    tape.record(out, [xn = x.node(), gn = gamma.node(), bn = beta.node(), on = out.node(), xhat = std::move(xhat),
                      inv_std = std::move(inv_std), n, c, hw, groups, cpg, m]() {
      const auto& dy = on->grad;
      for (int s = 0; s < n; ++s) {
        for (int gi = 0; gi < groups; ++gi) {
          const Eigen::Index base = (Eigen::Index{s} * c + Eigen::Index{gi} * cpg) * hw;
          Scalar sum_dxhat = 0;
          Scalar sum_dxhat_xhat = 0;
          for (int cc = 0; cc < cpg; ++cc) {
            const int ch = gi * cpg + cc;
            const Eigen::Index off = base + Eigen::Index{cc} * hw;
            const auto dyc = dy.segment(off, hw).array();
            const auto xh = xhat.segment(off, hw).array();
            if (gn->requires_grad) gn->grad_buffer()(ch) += (dyc * xh).sum();
            if (bn->requires_grad) bn->grad_buffer()(ch) += dyc.sum();
            sum_dxhat += dyc.sum() * gn->value(ch);
            sum_dxhat_xhat += (dyc * xh).sum() * gn->value(ch);
          }
          if (!xn->requires_grad) continue;
          const Scalar inv = inv_std(Eigen::Index{s} * groups + gi);
          const Scalar m1 = sum_dxhat / Scalar(m);
          const Scalar m2 = sum_dxhat_xhat / Scalar(m);
          auto& dx = xn->grad_buffer();
          for (int cc = 0; cc < cpg; ++cc) {
            const int ch = gi * cpg + cc;
            const Eigen::Index off = base + Eigen::Index{cc} * hw;
            dx.segment(off, hw).array() +=
                inv * (dy.segment(off, hw).array() * gn->value(ch) - m1 - xhat.segment(off, hw).array() * m2);
          }
        }
      }
    });
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> upsample_nearest2x(Tape<Scalar>& tape, const Tensor<Scalar>& x) {
  detail::require_rank(x.shape(), 4, "upsample_nearest2x", "input");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor<Scalar> out = Tensor<Scalar>::zeros({n, c, 2 * h, 2 * w});
  const Eigen::Index planes = Eigen::Index{n} * c;
  for (Eigen::Index p = 0; p < planes; ++p) {
    const Scalar* src = x.data() + p * h * w;
    Scalar* dst = out.data() + p * 4 * h * w;
    for (int y = 0; y < 2 * h; ++y) {
      for (int xx = 0; xx < 2 * w; ++xx) dst[Eigen::Index{y} * 2 * w + xx] = src[(y / 2) * w + xx / 2];
    }
  }
  if (tape.tracks({&x})) {
    tape.record(out, [xn = x.node(), on = out.node(), planes, h, w]() {
      auto& dx = xn->grad_buffer();
      for (Eigen::Index p = 0; p < planes; ++p) {
        const Scalar* src = on->grad.data() + p * 4 * h * w;
        Scalar* dst = dx.data() + p * h * w;
        for (int y = 0; y < 2 * h; ++y) {
          for (int xx = 0; xx < 2 * w; ++xx) dst[(y / 2) * w + xx / 2] += src[Eigen::Index{y} * 2 * w + xx];
        }
      }
    });
  }
  return out;
}

/// Mean over non-overlapping 2x2 blocks.
template <typename Scalar>
Tensor<Scalar> avg_pool2x(Tape<Scalar>& tape, const Tensor<Scalar>& x) {
  detail::require_rank(x.shape(), 4, "avg_pool2x", "input");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h % 2 != 0 || w % 2 != 0) throw DimensionError("avg_pool2x: spatial extents must be even, got " + shape_str(x.shape()));
  const int ho = h / 2, wo = w / 2;
  Tensor<Scalar> out = Tensor<Scalar>::zeros({n, c, ho, wo});
  const Eigen::Index planes = Eigen::Index{n} * c;
  for (Eigen::Index p = 0; p < planes; ++p) {
    const Scalar* src = x.data() + p * h * w;
    Scalar* dst = out.data() + p * ho * wo;
    for (int y = 0; y < ho; ++y) {
      for (int xx = 0; xx < wo; ++xx) {
        const Scalar* a = src + Eigen::Index{2 * y} * w + 2 * xx;
        dst[y * wo + xx] = (a[0] + a[1] + a[w] + a[w + 1]) * Scalar(0.25);
      }
    }
  }
  if (tape.tracks({&x})) {
    tape.record(out, [xn = x.node(), on = out.node(), planes, h, w, ho, wo]() {
      auto& dx = xn->grad_buffer();
      for (Eigen::Index p = 0; p < planes; ++p) {
        const Scalar* src = on->grad.data() + p * ho * wo;
        Scalar* dst = dx.data() + p * h * w;
        for (int y = 0; y < h; ++y) {
          for (int xx = 0; xx < w; ++xx) dst[Eigen::Index{y} * w + xx] += Scalar(0.25) * src[(y / 2) * wo + xx / 2];
        }
      }
    });
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> concat_channels(Tape<Scalar>& tape, const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::require_rank(a.shape(), 4, "concat_channels", "first input");
  detail::require_rank(b.shape(), 4, "concat_channels", "second input");
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3)) {
    throw DimensionError("concat_channels: axes 0/2/3 differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const int n = a.dim(0), ca = a.dim(1), cb = b.dim(1);
  const Eigen::Index hw = Eigen::Index{a.dim(2)} * a.dim(3);
  Tensor<Scalar> out = Tensor<Scalar>::zeros({n, ca + cb, a.dim(2), a.dim(3)});
  for (int s = 0; s < n; ++s) {
    const Eigen::Index o = Eigen::Index{s} * (ca + cb) * hw;
    out.value().segment(o, ca * hw) = a.value().segment(Eigen::Index{s} * ca * hw, ca * hw);
    out.value().segment(o + ca * hw, cb * hw) = b.value().segment(Eigen::Index{s} * cb * hw, cb * hw);
  }
  if (tape.tracks({&a, &b})) {
    tape.record(out, [an = a.node(), bn = b.node(), on = out.node(), n, ca, cb, hw]() {
      for (int s = 0; s < n; ++s) {
        const Eigen::Index o = Eigen::Index{s} * (ca + cb) * hw;
        if (an->requires_grad) an->grad_buffer().segment(Eigen::Index{s} * ca * hw, ca * hw) += on->grad.segment(o, ca * hw);
        if (bn->requires_grad) {
          bn->grad_buffer().segment(Eigen::Index{s} * cb * hw, cb * hw) += on->grad.segment(o + ca * hw, cb * hw);
        }
      }
    });
  }
  return out;
}

/// Channels [begin, end) of an NCHW tensor.
template <typename Scalar>
Tensor<Scalar> slice_channels(Tape<Scalar>& tape, const Tensor<Scalar>& x, int begin, int end) {
  detail::require_rank(x.shape(), 4, "slice_channels", "input");
  const int n = x.dim(0), c = x.dim(1);
  if (begin < 0 || end > c || begin > end) {
    throw DimensionError("slice_channels: range [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") outside channel axis of " + shape_str(x.shape()));
  }
  const int cs = end - begin;
  const Eigen::Index hw = Eigen::Index{x.dim(2)} * x.dim(3);
  Tensor<Scalar> out = Tensor<Scalar>::zeros({n, cs, x.dim(2), x.dim(3)});
  for (int s = 0; s < n; ++s) {
    out.value().segment(Eigen::Index{s} * cs * hw, cs * hw) = x.value().segment((Eigen::Index{s} * c + begin) * hw, cs * hw);
  }
  if (tape.tracks({&x})) {
    tape.record(out, [xn = x.node(), on = out.node(), n, c, cs, begin, hw]() {
      for (int s = 0; s < n; ++s) {
        xn->grad_buffer().segment((Eigen::Index{s} * c + begin) * hw, cs * hw) += on->grad.segment(Eigen::Index{s} * cs * hw, cs * hw);
      }
    });
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> add(Tape<Scalar>& tape, const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::require_same(a.shape(), b.shape(), "add");
  Tensor<Scalar> out(a.shape(), a.value() + b.value());
  detail::require_finite(out.value(), "add");
  if (tape.tracks({&a, &b})) {
    tape.record(out, [an = a.node(), bn = b.node(), on = out.node()]() {
      if (an->requires_grad) an->grad_buffer() += on->grad;
      if (bn->requires_grad) bn->grad_buffer() += on->grad;
    });
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> sub(Tape<Scalar>& tape, const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::require_same(a.shape(), b.shape(), "sub");
  Tensor<Scalar> out(a.shape(), a.value() - b.value());
  detail::require_finite(out.value(), "sub");
  if (tape.tracks({&a, &b})) {
    tape.record(out, [an = a.node(), bn = b.node(), on = out.node()]() {
      if (an->requires_grad) an->grad_buffer() += on->grad;
      if (bn->requires_grad) bn->grad_buffer() -= on->grad;
    });
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> mul(Tape<Scalar>& tape, const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::require_same(a.shape(), b.shape(), "mul");
  Tensor<Scalar> out(a.shape(), a.value().cwiseProduct(b.value()));
  detail::require_finite(out.value(), "mul");
  if (tape.tracks({&a, &b})) {
    tape.record(out, [an = a.node(), bn = b.node(), on = out.node()]() {
      if (an->requires_grad) an->grad_buffer() += on->grad.cwiseProduct(bn->value);
      if (bn->requires_grad) bn->grad_buffer() += on->grad.cwiseProduct(an->value);
    });
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> scale(Tape<Scalar>& tape, const Tensor<Scalar>& x, Scalar factor) {
  Tensor<Scalar> out(x.shape(), x.value() * factor);
  detail::require_finite(out.value(), "scale");
  if (tape.tracks({&x})) {
    tape.record(out, [xn = x.node(), on = out.node(), factor]() { xn->grad_buffer() += on->grad * factor; });
  }
  return out;
}

/// x[N, C, H, W] + e[N, C] broadcast over the spatial axes.
template <typename Scalar>
Tensor<Scalar> add_channel_bias(Tape<Scalar>& tape, const Tensor<Scalar>& x, const Tensor<Scalar>& e) {
  detail::require_rank(x.shape(), 4, "add_channel_bias", "input");
  if (e.shape() != Shape{x.dim(0), x.dim(1)}) {
    throw DimensionError("add_channel_bias: bias " + shape_str(e.shape()) + " does not match axes 0/1 of " +
                         shape_str(x.shape()));
  }
  const Eigen::Index hw = Eigen::Index{x.dim(2)} * x.dim(3);
  const Eigen::Index planes = Eigen::Index{x.dim(0)} * x.dim(1);
  Tensor<Scalar> out(x.shape(), x.value());
  for (Eigen::Index p = 0; p < planes; ++p) out.value().segment(p * hw, hw).array() += e.value()(p);
  detail::require_finite(out.value(), "add_channel_bias");
  if (tape.tracks({&x, &e})) {
    tape.record(out, [xn = x.node(), en = e.node(), on = out.node(), planes, hw]() {
      if (xn->requires_grad) xn->grad_buffer() += on->grad;
      if (en->requires_grad) {
        auto& de = en->grad_buffer();
        for (Eigen::Index p = 0; p < planes; ++p) de(p) += on->grad.segment(p * hw, hw).sum();
      }
    });
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> sum(Tape<Scalar>& tape, const Tensor<Scalar>& x) {
  Tensor<Scalar> out({}, Vector<Scalar>::Constant(1, x.value().sum()));
  detail::require_finite(out.value(), "sum");
  if (tape.tracks({&x})) {
    tape.record(out, [xn = x.node(), on = out.node()]() { xn->grad_buffer().array() += on->grad(0); });
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> mean(Tape<Scalar>& tape, const Tensor<Scalar>& x) {
  if (x.size() == 0) throw DimensionError("mean of an empty tensor");
  return scale(tape, sum(tape, x), Scalar(1) / Scalar(x.size()));
}

/// Mean squared difference.
template <typename Scalar>
Tensor<Scalar> mse_loss(Tape<Scalar>& tape, const Tensor<Scalar>& pred, const Tensor<Scalar>& target) {
  detail::require_same(pred.shape(), target.shape(), "mse_loss");
  if (pred.size() == 0) throw DimensionError("mse_loss of empty tensors");
  const Scalar count = Scalar(pred.size());
  Tensor<Scalar> out({}, Vector<Scalar>::Constant(1, (pred.value() - target.value()).squaredNorm() / count));
  detail::require_finite(out.value(), "mse_loss");
  if (tape.tracks({&pred, &target})) {
    tape.record(out, [pn = pred.node(), tn = target.node(), on = out.node(), count]() {
      const Scalar k = Scalar(2) * on->grad(0) / count;
      if (pn->requires_grad) pn->grad_buffer() += k * (pn->value - tn->value);
      if (tn->requires_grad) tn->grad_buffer() -= k * (pn->value - tn->value);
    });
  }
  return out;
}

/// Weighted mean squared difference: sum(m * (p - t)^2) / sum(m). Zero-weight
/// elements contribute neither value nor gradient.
template <typename Scalar>
Tensor<Scalar> masked_mse_loss(Tape<Scalar>& tape, const Tensor<Scalar>& pred, const Tensor<Scalar>& target,
                               const Vector<Scalar>& mask) {
  detail::require_same(pred.shape(), target.shape(), "masked_mse_loss");
  if (mask.size() != pred.size()) throw DimensionError("masked_mse_loss: mask length differs from prediction");
  const Scalar weight = mask.sum();
  if (!(weight > 0)) throw DataError("masked_mse_loss: mask selects no elements");
  const Vector<Scalar> diff = (pred.value() - target.value()).cwiseProduct(mask);
  Tensor<Scalar> out({}, Vector<Scalar>::Constant(1, diff.cwiseProduct(pred.value() - target.value()).sum() / weight));
  detail::require_finite(out.value(), "masked_mse_loss");
  if (tape.tracks({&pred, &target})) {
    tape.record(out, [pn = pred.node(), tn = target.node(), on = out.node(), diff, weight]() {
      const Scalar k = Scalar(2) * on->grad(0) / weight;
      if (pn->requires_grad) pn->grad_buffer() += k * diff;
      if (tn->requires_grad) tn->grad_buffer() -= k * diff;
    });
  }
  return out;
}

inline constexpr double kLogvarMin = -30.0;
inline constexpr double kLogvarMax = 20.0;

/// KL(N(mean, exp(logvar)) || N(0, I)) summed over all non-batch elements and
/// averaged over the batch axis. logvar is clamped to [-30, 20]; the gradient
/// through a clamped element is zero.
template <typename Scalar>
Tensor<Scalar> kl_divergence(Tape<Scalar>& tape, const Tensor<Scalar>& mean, const Tensor<Scalar>& logvar) {
  detail::require_same(mean.shape(), logvar.shape(), "kl_divergence");
  const Scalar batch = mean.rank() > 0 ? Scalar(std::max(mean.dim(0), 1)) : Scalar(1);
  const Vector<Scalar> lv = logvar.value().cwiseMax(Scalar(kLogvarMin)).cwiseMin(Scalar(kLogvarMax));
  const Scalar kl = Scalar(0.5) *
                    (mean.value().array().square() + lv.array().exp() - Scalar(1) - lv.array()).sum() / batch;
  Tensor<Scalar> out({}, Vector<Scalar>::Constant(1, kl));
  detail::require_finite(out.value(), "kl_divergence");
  if (tape.tracks({&mean, &logvar})) {
    tape.record(out, [mn = mean.node(), ln = logvar.node(), on = out.node(), batch]() {
      const Scalar g = on->grad(0) / batch;
      if (mn->requires_grad) mn->grad_buffer() += g * mn->value;
      if (ln->requires_grad) {
        auto& dl = ln->grad_buffer();
        for (Eigen::Index i = 0; i < dl.size(); ++i) {
          const Scalar v = ln->value(i);
          if (v > Scalar(kLogvarMin) && v < Scalar(kLogvarMax)) dl(i) += g * Scalar(0.5) * (std::exp(v) - Scalar(1));
        }
      }
    });
  }
  return out;
}

/// z = mean + exp(logvar / 2) * noise with logvar clamped to [-30, 20].
template <typename Scalar>
Tensor<Scalar> reparameterize(Tape<Scalar>& tape, const Tensor<Scalar>& mean, const Tensor<Scalar>& logvar,
                              const Vector<Scalar>& noise) {
  detail::require_same(mean.shape(), logvar.shape(), "reparameterize");
  if (noise.size() != mean.size()) throw DimensionError("reparameterize: noise length differs from latent");
  const Vector<Scalar> sd =
      (logvar.value().cwiseMax(Scalar(kLogvarMin)).cwiseMin(Scalar(kLogvarMax)) * Scalar(0.5)).array().exp().matrix();
  Tensor<Scalar> out(mean.shape(), mean.value() + sd.cwiseProduct(noise));
  detail::require_finite(out.value(), "reparameterize");
  if (tape.tracks({&mean, &logvar})) {
    tape.record(out, [mn = mean.node(), ln = logvar.node(), on = out.node(), sd, noise]() {
      if (mn->requires_grad) mn->grad_buffer() += on->grad;
      if (ln->requires_grad) {
        auto& dl = ln->grad_buffer();
        for (Eigen::Index i = 0; i < dl.size(); ++i) {
          const Scalar v = ln->value(i);
          if (v > Scalar(kLogvarMin) && v < Scalar(kLogvarMax)) dl(i) += on->grad(i) * noise(i) * Scalar(0.5) * sd(i);
        }
      }
    });
  }
  return out;
}

}  // namespace depthdiff::ad
