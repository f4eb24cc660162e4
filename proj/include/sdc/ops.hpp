#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "sdc/common.hpp"
#include "sdc/tensor.hpp"

namespace sdc {

enum class Padding { Same, Valid };

// Boolean kernel support pattern for sparse convolutions.
struct SparseMask {
  int k = 0;
  std::vector<std::uint8_t> cells;  // k*k, row-major
  int nonzero_count = 0;

  bool at(int i, int j) const { return cells[std::size_t(i) * std::size_t(k) + std::size_t(j)] != 0; }

  void set(int i, int j, bool v) {
    auto& c = cells[std::size_t(i) * std::size_t(k) + std::size_t(j)];
    if (v && !c) ++nonzero_count;
    if (!v && c) --nonzero_count;
    c = v ? 1 : 0;
  }

  static SparseMask full(int k) {
    SparseMask m;
    m.k = k;
    m.cells.assign(std::size_t(k) * std::size_t(k), 1);
    m.nonzero_count = k * k;
    return m;
  }

  static SparseMask empty_grid(int k) {
    SparseMask m;
    m.k = k;
    m.cells.assign(std::size_t(k) * std::size_t(k), 0);
    m.nonzero_count = 0;
    return m;
  }

  void validate() const {
    require(k >= 1 && k % 2 == 1, ErrorKind::argument, "sparse mask size must be odd");
    int n = 0;
    for (auto c : cells) n += c ? 1 : 0;
    require(n == nonzero_count, ErrorKind::argument, "sparse mask nonzero_count is stale");
    require(at(k / 2, k / 2), ErrorKind::argument, "sparse mask center cell must be set");
  }
};

template <typename S>
struct ConvParamsT {
  TensorT<S> weights;  // [out_channels, in_channels, k, k]
  TensorT<S> bias;     // [out_channels]
  int stride = 1;
  int dilation = 1;
  Padding padding = Padding::Same;

  int out_channels() const { return weights.dim(0); }
  int in_channels() const { return weights.dim(1); }
  int kernel() const { return weights.dim(2); }
  // kernel extent after dilation
  int effective_extent() const { return dilation * (kernel() - 1) + 1; }
  int pad_amount() const { return padding == Padding::Same ? dilation * (kernel() - 1) / 2 : 0; }

  void validate() const {
    require(weights.rank() == 4, ErrorKind::argument, "conv weights must be rank 4");
    require(weights.dim(2) == weights.dim(3), ErrorKind::argument, "conv kernels must be square");
    require(weights.dim(2) % 2 == 1, ErrorKind::argument, "conv kernel size must be odd");
    require(bias.rank() == 1 && bias.dim(0) == weights.dim(0), ErrorKind::argument,
            "conv bias length must equal out_channels");
    require(stride >= 1, ErrorKind::argument, "conv stride must be positive");
    require(dilation >= 1, ErrorKind::argument, "conv dilation must be positive");
  }
};

using ConvParams = ConvParamsT<float>;

namespace detail {

template <typename S>
void conv_check_input(const TensorT<S>& input, const ConvParamsT<S>& p) {
  p.validate();
  require(input.rank() == 3, ErrorKind::argument, "conv input must be [C,H,W]");
  require(input.dim(0) == p.in_channels(), ErrorKind::argument,
          "conv input has " + std::to_string(input.dim(0)) + " channels, kernel expects " +
              std::to_string(p.in_channels()));
  if (p.padding == Padding::Valid) {
    require(input.dim(1) >= p.effective_extent() && input.dim(2) >= p.effective_extent(), ErrorKind::argument,
            "conv input " + input.shape_str() + " smaller than effective kernel extent " +
                std::to_string(p.effective_extent()) + " under Valid padding");
  }
}

inline int conv_out_extent(int in, int eff, int pad, int stride) {
  return (in + 2 * pad - eff) / stride + 1;
}

}  // namespace detail

namespace detail {

// One (o,c) plane of a dense stride-1 convolution with compile-time kernel
// size. Taps are applied in (i,j) order per output element; interior pixels
// take a fused K*K inner body, borders fall back to bounds-checked taps in
// the same per-element order, so results match the generic path bit for bit.
template <typename S, int K>
void fused_conv_plane(const S* in, int H, int W, const S* w, int d, int pad, S* out, int oh, int ow) {
  const int span = d * (K - 1);
  const int yin_lo = std::min(pad, oh), yin_hi = std::max(yin_lo, std::min(oh, H - span + pad));
  const int xin_lo = std::min(pad, ow), xin_hi = std::max(xin_lo, std::min(ow, W - span + pad));
  auto border_element = [&](int y, int x, S* orow) {
    S t = orow[x];
    for (int i = 0; i < K; ++i) {
      const int iy = y - pad + d * i;
      if (iy < 0 || iy >= H) continue;
      const S* irow = in + std::size_t(iy) * W;
      for (int j = 0; j < K; ++j) {
        const int ix = x - pad + d * j;
        if (ix < 0 || ix >= W) continue;
        t += w[i * K + j] * irow[ix];
      }
    }
    orow[x] = t;
  };
  for (int y = 0; y < oh; ++y) {
    S* orow = out + std::size_t(y) * ow;
    if (y < yin_lo || y >= yin_hi) {
      for (int x = 0; x < ow; ++x) border_element(y, x, orow);
      continue;
    }
    const S* rows[K];
    for (int i = 0; i < K; ++i) rows[i] = in + std::size_t(y - pad + d * i) * W - pad;
    for (int x = 0; x < xin_lo; ++x) border_element(y, x, orow);
    for (int x = xin_lo; x < xin_hi; ++x) {
      S t = orow[x];
      for (int i = 0; i < K; ++i) {
        const S* r = rows[i] + x;
        for (int j = 0; j < K; ++j) t += w[i * K + j] * r[d * j];
      }
      orow[x] = t;
    }
    for (int x = xin_hi; x < ow; ++x) border_element(y, x, orow);
  }
}

template <typename S>
bool conv_fast_eligible(const ConvParamsT<S>& p, const SparseMask* mask) {
  return p.stride == 1 && mask == nullptr && (p.kernel() == 3 || p.kernel() == 5);
}

}  // namespace detail

// Generic reference path; also used for strided, sparse and unusual kernel
// sizes. Accumulation order over (c, i, j) per output element is fixed.
template <typename S>
TensorT<S> conv2d_forward_generic(const TensorT<S>& input, const ConvParamsT<S>& p, const SparseMask* mask,
                                  int threads = 1) {
  detail::conv_check_input(input, p);
  const int C = p.in_channels(), O = p.out_channels(), k = p.kernel();
  const int d = p.dilation, s = p.stride, pad = p.pad_amount();
  const int H = input.dim(1), W = input.dim(2);
  const int oh = detail::conv_out_extent(H, p.effective_extent(), pad, s);
  const int ow = detail::conv_out_extent(W, p.effective_extent(), pad, s);
  require(oh >= 1 && ow >= 1, ErrorKind::argument, "conv output would be empty");
  if (mask) {
    mask->validate();
    require(mask->k == k, ErrorKind::argument, "sparse mask size " + std::to_string(mask->k) +
                                                   " does not match kernel size " + std::to_string(k));
  }

  TensorT<S> out({O, oh, ow});
  const S* in0 = input.data();
  S* out0 = out.data();
  const TensorT<S>& wt = p.weights;

  parallel_for(O, threads, [&](int o_lo, int o_hi) {
    for (int o = o_lo; o < o_hi; ++o) {
      S b = p.bias[std::size_t(o)];
      S* oc = out0 + std::size_t(o) * oh * ow;
      for (int i = 0; i < oh * ow; ++i) oc[i] = b;
      for (int c = 0; c < C; ++c) {
        const S* ic = in0 + std::size_t(c) * H * W;
        for (int i = 0; i < k; ++i) {
          for (int j = 0; j < k; ++j) {
            if (mask && !mask->at(i, j)) continue;
            const S w = wt.at4(o, c, i, j);
            const int offy = d * i - pad, offx = d * j - pad;
            if (s == 1) {
              const int ylo = std::max(0, -offy), yhi = std::min(oh, H - offy);
              const int xlo = std::max(0, -offx), xhi = std::min(ow, W - offx);
              for (int y = ylo; y < yhi; ++y) {
                S* orow = oc + std::size_t(y) * ow;
                const S* irow = ic + std::size_t(y + offy) * W + offx;
                for (int x = xlo; x < xhi; ++x) orow[x] += w * irow[x];
              }
            } else {
              for (int y = 0; y < oh; ++y) {
                const int iy = y * s + offy;
                if (iy < 0 || iy >= H) continue;
                S* orow = oc + std::size_t(y) * ow;
                const S* irow = ic + std::size_t(iy) * W;
                for (int x = 0; x < ow; ++x) {
                  const int ix = x * s + offx;
                  if (ix < 0 || ix >= W) continue;
                  orow[x] += w * irow[ix];
                }
              }
            }
          }
        }
      }
    }
  });
  return out;
}

// output[o,y,x] = bias[o] + sum_{c,i,j} w[o,c,i,j] * input[c, y*s - pad + d*i, x*s - pad + d*j]
// Accumulation order over (c, i, j) is fixed; parallelism is over output
// channels only, so results do not depend on the thread count.
// `mask == nullptr` means dense. Masked-out taps are skipped entirely.
template <typename S>
TensorT<S> conv2d_forward_impl(const TensorT<S>& input, const ConvParamsT<S>& p, const SparseMask* mask,
                               int threads = 1) {
  if (!detail::conv_fast_eligible(p, mask)) return conv2d_forward_generic(input, p, mask, threads);
  detail::conv_check_input(input, p);
  const int C = p.in_channels(), O = p.out_channels(), k = p.kernel();
  const int d = p.dilation, pad = p.pad_amount();
  const int H = input.dim(1), W = input.dim(2);
  const int oh = detail::conv_out_extent(H, p.effective_extent(), pad, 1);
  const int ow = detail::conv_out_extent(W, p.effective_extent(), pad, 1);
  require(oh >= 1 && ow >= 1, ErrorKind::argument, "conv output would be empty");

  TensorT<S> out({O, oh, ow});
  const S* in0 = input.data();
  S* out0 = out.data();
  const TensorT<S>& wt = p.weights;

  parallel_for(O, threads, [&](int o_lo, int o_hi) {
    for (int o = o_lo; o < o_hi; ++o) {
      S b = p.bias[std::size_t(o)];
      S* oc = out0 + std::size_t(o) * oh * ow;
      for (int i = 0; i < oh * ow; ++i) oc[i] = b;
      for (int c = 0; c < C; ++c) {
        const S* ic = in0 + std::size_t(c) * H * W;
        const S* wk = wt.data() + (std::size_t(o) * C + std::size_t(c)) * k * k;
        if (k == 3)
          detail::fused_conv_plane<S, 3>(ic, H, W, wk, d, pad, oc, oh, ow);
        else
          detail::fused_conv_plane<S, 5>(ic, H, W, wk, d, pad, oc, oh, ow);
      }
    }
  });
  return out;
}

template <typename S>
TensorT<S> conv2d_forward(const TensorT<S>& input, const ConvParamsT<S>& p, int threads = 1) {
  return conv2d_forward_impl<S>(input, p, nullptr, threads);
}

template <typename S>
TensorT<S> sparse_conv2d_forward(const TensorT<S>& input, const ConvParamsT<S>& p, const SparseMask& m,
                                 int threads = 1) {
  return conv2d_forward_impl<S>(input, p, &m, threads);
}

template <typename S>
struct ConvGradsT {
  TensorT<S> input;    // may be empty when not requested
  TensorT<S> weights;  // same shape as p.weights
  TensorT<S> bias;     // same shape as p.bias
};

namespace detail {

// Weight gradients for one (o,c) plane, compile-time kernel size, stride 1.
// For a fixed i, all K taps along j accumulate together per (y,x); out of
// bounds taps are skipped, which matches adding an exact zero.
template <typename S, int K>
void fused_gradw_plane(const S* in, int H, int W, const S* go, int oh, int ow, int d, int pad, S* wgrad) {
  const int xin_lo = std::min(pad, ow), xin_hi = std::max(xin_lo, std::min(ow, W - d * (K - 1) + pad));
  for (int i = 0; i < K; ++i) {
    S acc[K] = {};
    for (int y = 0; y < oh; ++y) {
      const int iy = y - pad + d * i;
      if (iy < 0 || iy >= H) continue;
      const S* gorow = go + std::size_t(y) * ow;
      const S* irow = in + std::size_t(iy) * W - pad;
      for (int x = 0; x < xin_lo; ++x) {
        const S gv = gorow[x];
        for (int j = 0; j < K; ++j) {
          const int ix = x - pad + d * j;
          if (ix >= 0 && ix < W) acc[j] += gv * irow[x + d * j];
        }
      }
      for (int x = xin_lo; x < xin_hi; ++x) {
        const S gv = gorow[x];
        const S* r = irow + x;
        for (int j = 0; j < K; ++j) acc[j] += gv * r[d * j];
      }
      for (int x = xin_hi; x < ow; ++x) {
        const S gv = gorow[x];
        for (int j = 0; j < K; ++j) {
          const int ix = x - pad + d * j;
          if (ix >= 0 && ix < W) acc[j] += gv * irow[x + d * j];
        }
      }
    }
    for (int j = 0; j < K; ++j) wgrad[i * K + j] = acc[j];
  }
}

// grad_input expressed as a dense convolution of the zero-padded output
// gradient with the channel-transposed, spatially flipped kernel. Reuses
// the fused forward planes.
template <typename S>
TensorT<S> conv_grad_input_fast(const ConvParamsT<S>& p, const TensorT<S>& grad_out, int H, int W) {
  const int C = p.in_channels(), O = p.out_channels(), k = p.kernel();
  const int d = p.dilation, pad = p.pad_amount();
  const int oh = grad_out.dim(1), ow = grad_out.dim(2);
  const int P = d * (k - 1) - pad;
  TensorT<S> padded({O, oh + 2 * P, ow + 2 * P});
  for (int o = 0; o < O; ++o)
    for (int y = 0; y < oh; ++y) {
      const S* src = grad_out.data() + (std::size_t(o) * oh + std::size_t(y)) * ow;
      S* dst = padded.data() + (std::size_t(o) * (oh + 2 * P) + std::size_t(y + P)) * (ow + 2 * P) + P;
      std::copy(src, src + ow, dst);
    }
  TensorT<S> flipped({C, O, k, k});
  for (int o = 0; o < O; ++o)
    for (int c = 0; c < C; ++c)
      for (int i = 0; i < k; ++i)
        for (int j = 0; j < k; ++j) flipped.at4(c, o, i, j) = p.weights.at4(o, c, k - 1 - i, k - 1 - j);

  TensorT<S> gin({C, H, W});
  const int ph = padded.dim(1), pw = padded.dim(2);
  for (int c = 0; c < C; ++c) {
    S* gc = gin.data() + std::size_t(c) * H * W;
    for (int o = 0; o < O; ++o) {
      const S* pc = padded.data() + std::size_t(o) * ph * pw;
      const S* wk = flipped.data() + (std::size_t(c) * O + std::size_t(o)) * k * k;
      if (k == 3)
        fused_conv_plane<S, 3>(pc, ph, pw, wk, d, 0, gc, H, W);
      else
        fused_conv_plane<S, 5>(pc, ph, pw, wk, d, 0, gc, H, W);
    }
  }
  return gin;
}

}  // namespace detail

template <typename S>
ConvGradsT<S> conv2d_backward_generic(const TensorT<S>& input, const ConvParamsT<S>& p, const TensorT<S>& grad_out,
                                      const SparseMask* mask, bool want_grad_input) {
  detail::conv_check_input(input, p);
  const int C = p.in_channels(), O = p.out_channels(), k = p.kernel();
  const int d = p.dilation, s = p.stride, pad = p.pad_amount();
  const int H = input.dim(1), W = input.dim(2);
  const int oh = detail::conv_out_extent(H, p.effective_extent(), pad, s);
  const int ow = detail::conv_out_extent(W, p.effective_extent(), pad, s);
  require(grad_out.rank() == 3 && grad_out.dim(0) == O && grad_out.dim(1) == oh && grad_out.dim(2) == ow,
          ErrorKind::argument,
          "conv grad_out shape " + grad_out.shape_str() + " does not match forward output");
  if (mask) {
    mask->validate();
    require(mask->k == k, ErrorKind::argument, "sparse mask size does not match kernel size");
  }

  ConvGradsT<S> g;
  g.weights = TensorT<S>(p.weights.shape());
  g.bias = TensorT<S>(p.bias.shape());
  if (want_grad_input) g.input = TensorT<S>(input.shape());

  const S* in0 = input.data();
  const S* go0 = grad_out.data();
  S* gi0 = want_grad_input ? g.input.data() : nullptr;

  for (int o = 0; o < O; ++o) {
    const S* goc = go0 + std::size_t(o) * oh * ow;
    S acc = 0;
    for (int i = 0; i < oh * ow; ++i) acc += goc[i];
    g.bias[std::size_t(o)] = acc;

    for (int c = 0; c < C; ++c) {
      const S* ic = in0 + std::size_t(c) * H * W;
      S* gic = gi0 ? gi0 + std::size_t(c) * H * W : nullptr;
      for (int i = 0; i < k; ++i) {
        for (int j = 0; j < k; ++j) {
          if (mask && !mask->at(i, j)) continue;
          const int offy = d * i - pad, offx = d * j - pad;
          const S w = p.weights.at4(o, c, i, j);
          S wg = 0;
          if (s == 1) {
            const int ylo = std::max(0, -offy), yhi = std::min(oh, H - offy);
            const int xlo = std::max(0, -offx), xhi = std::min(ow, W - offx);
            for (int y = ylo; y < yhi; ++y) {
              const S* gorow = goc + std::size_t(y) * ow;
              const S* irow = ic + std::size_t(y + offy) * W + offx;
              S rowacc = 0;
              for (int x = xlo; x < xhi; ++x) rowacc += gorow[x] * irow[x];
              wg += rowacc;
              if (gic) {
                S* girow = gic + std::size_t(y + offy) * W + offx;
                for (int x = xlo; x < xhi; ++x) girow[x] += w * gorow[x];
              }
            }
          } else {
            for (int y = 0; y < oh; ++y) {
              const int iy = y * s + offy;
              if (iy < 0 || iy >= H) continue;
              const S* gorow = goc + std::size_t(y) * ow;
              const S* irow = ic + std::size_t(iy) * W;
              S* girow = gic ? gic + std::size_t(iy) * W : nullptr;
              for (int x = 0; x < ow; ++x) {
                const int ix = x * s + offx;
                if (ix < 0 || ix >= W) continue;
                wg += gorow[x] * irow[ix];
                if (girow) girow[ix] += w * gorow[x];
              }
            }
          }
          g.weights.at4(o, c, i, j) = wg;
        }
      }
    }
  }
  return g;
}

template <typename S>
ConvGradsT<S> conv2d_backward_impl(const TensorT<S>& input, const ConvParamsT<S>& p, const TensorT<S>& grad_out,
                                   const SparseMask* mask, bool want_grad_input) {
  if (!detail::conv_fast_eligible(p, mask))
    return conv2d_backward_generic(input, p, grad_out, mask, want_grad_input);
  detail::conv_check_input(input, p);
  const int C = p.in_channels(), O = p.out_channels(), k = p.kernel();
  const int d = p.dilation, pad = p.pad_amount();
  const int H = input.dim(1), W = input.dim(2);
  const int oh = detail::conv_out_extent(H, p.effective_extent(), pad, 1);
  const int ow = detail::conv_out_extent(W, p.effective_extent(), pad, 1);
  require(grad_out.rank() == 3 && grad_out.dim(0) == O && grad_out.dim(1) == oh && grad_out.dim(2) == ow,
          ErrorKind::argument,
          "conv grad_out shape " + grad_out.shape_str() + " does not match forward output");

  ConvGradsT<S> g;
  g.weights = TensorT<S>(p.weights.shape());
  g.bias = TensorT<S>(p.bias.shape());

  const S* in0 = input.data();
  const S* go0 = grad_out.data();
  for (int o = 0; o < O; ++o) {
    const S* goc = go0 + std::size_t(o) * oh * ow;
    S acc = 0;
    for (int i = 0; i < oh * ow; ++i) acc += goc[i];
    g.bias[std::size_t(o)] = acc;
    for (int c = 0; c < C; ++c) {
      const S* ic = in0 + std::size_t(c) * H * W;
      S* wk = g.weights.data() + (std::size_t(o) * C + std::size_t(c)) * k * k;
      if (k == 3)
        detail::fused_gradw_plane<S, 3>(ic, H, W, goc, oh, ow, d, pad, wk);
      else
        detail::fused_gradw_plane<S, 5>(ic, H, W, goc, oh, ow, d, pad, wk);
    }
  }
  if (want_grad_input) g.input = detail::conv_grad_input_fast(p, grad_out, H, W);
  return g;
}

template <typename S>
ConvGradsT<S> conv2d_backward(const TensorT<S>& input, const ConvParamsT<S>& p, const TensorT<S>& grad_out,
                              bool want_grad_input = true) {
  return conv2d_backward_impl<S>(input, p, grad_out, nullptr, want_grad_input);
}

template <typename S>
ConvGradsT<S> sparse_conv2d_backward(const TensorT<S>& input, const ConvParamsT<S>& p, const TensorT<S>& grad_out,
                                     const SparseMask& m, bool want_grad_input = true) {
  return conv2d_backward_impl<S>(input, p, grad_out, &m, want_grad_input);
}

// --- activations ---

template <typename S>
TensorT<S> elu(const TensorT<S>& x, S alpha = S(1)) {
  require(alpha > S(0), ErrorKind::argument, "elu alpha must be positive");
  TensorT<S> y(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) {
    S v = x[i];
    if (std::isnan(double(v))) fail_compute("elu: NaN input");
    y[i] = v > S(0) ? v : alpha * (std::exp(v) - S(1));
  }
  return y;
}

// `x` is the forward input (pre-activation).
template <typename S>
TensorT<S> elu_backward(const TensorT<S>& x, const TensorT<S>& grad_y, S alpha = S(1)) {
  require(x.same_shape(grad_y), ErrorKind::argument, "elu_backward: shape mismatch");
  TensorT<S> g(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) {
    S v = x[i];
    g[i] = grad_y[i] * (v > S(0) ? S(1) : alpha * std::exp(v));
  }
  return g;
}

template <typename S>
TensorT<S> relu(const TensorT<S>& x) {
  TensorT<S> y(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) {
    S v = x[i];
    if (std::isnan(double(v))) fail_compute("relu: NaN input");
    y[i] = v > S(0) ? v : S(0);
  }
  return y;
}

// Subgradient at 0 is defined as 0.
template <typename S>
TensorT<S> relu_backward(const TensorT<S>& x, const TensorT<S>& grad_y) {
  require(x.same_shape(grad_y), ErrorKind::argument, "relu_backward: shape mismatch");
  TensorT<S> g(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) g[i] = x[i] > S(0) ? grad_y[i] : S(0);
  return g;
}

// --- channel concatenation ---

template <typename S>
TensorT<S> concat_channels(const std::vector<TensorT<S>>& parts) {
  require(!parts.empty(), ErrorKind::argument, "concat_channels: no parts");
  const int H = parts[0].dim(1), W = parts[0].dim(2);
  int C = 0;
  for (const auto& t : parts) {
    require(t.rank() == 3 && t.dim(1) == H && t.dim(2) == W, ErrorKind::argument,
            "concat_channels: spatial extents differ");
    C += t.dim(0);
  }
  TensorT<S> out({C, H, W});
  S* dst = out.data();
  for (const auto& t : parts) {
    std::copy(t.data(), t.data() + t.numel(), dst);
    dst += t.numel();
  }
  return out;
}

template <typename S>
std::vector<TensorT<S>> split_channels_backward(const TensorT<S>& grad, const std::vector<int>& channel_counts) {
  require(grad.rank() == 3, ErrorKind::argument, "split_channels_backward: grad must be [C,H,W]");
  int total = 0;
  for (int c : channel_counts) total += c;
  require(total == grad.dim(0), ErrorKind::argument, "split_channels_backward: channel counts do not sum to grad");
  std::vector<TensorT<S>> parts;
  parts.reserve(channel_counts.size());
  const S* src = grad.data();
  const int H = grad.dim(1), W = grad.dim(2);
  for (int c : channel_counts) {
    TensorT<S> t({c, H, W});
    std::copy(src, src + t.numel(), t.data());
    src += t.numel();
    parts.push_back(std::move(t));
  }
  return parts;
}

// --- pixel-wise L-infinity normalization ---

// f <- f / max(||f||_inf, eps), per pixel over the channel dimension.
template <typename S>
TensorT<S> linf_normalize(const TensorT<S>& feat, S eps) {
  require(eps > S(0), ErrorKind::argument, "linf_normalize: eps must be positive");
  require(feat.rank() == 3, ErrorKind::argument, "linf_normalize: input must be [C,H,W]");
  const int C = feat.dim(0), H = feat.dim(1), W = feat.dim(2);
  TensorT<S> out(feat.shape());
  const std::size_t plane = std::size_t(H) * W;
  for (std::size_t p = 0; p < plane; ++p) {
    S m = 0;
    for (int c = 0; c < C; ++c) m = std::max(m, S(std::abs(double(feat[std::size_t(c) * plane + p]))));
    S scale = S(1) / std::max(m, eps);
    for (int c = 0; c < C; ++c) out[std::size_t(c) * plane + p] = feat[std::size_t(c) * plane + p] * scale;
  }
  return out;
}

template <typename S>
TensorT<S> linf_normalize_backward(const TensorT<S>& feat, S eps, const TensorT<S>& grad_y) {
  require(feat.same_shape(grad_y), ErrorKind::argument, "linf_normalize_backward: shape mismatch");
  const int C = feat.dim(0), H = feat.dim(1), W = feat.dim(2);
  TensorT<S> g(feat.shape());
  const std::size_t plane = std::size_t(H) * W;
  for (std::size_t p = 0; p < plane; ++p) {
    int arg = 0;
    S m = 0;
    for (int c = 0; c < C; ++c) {
      S a = S(std::abs(double(feat[std::size_t(c) * plane + p])));
      if (a > m) {
        m = a;
        arg = c;
      }
    }
    if (m >= eps) {
      // y_i = x_i / |x_m|; tie broken to the first max index
      S xm = feat[std::size_t(arg) * plane + p];
      S sgn = xm >= S(0) ? S(1) : S(-1);
      S dotgx = 0;
      for (int c = 0; c < C; ++c) dotgx += grad_y[std::size_t(c) * plane + p] * feat[std::size_t(c) * plane + p];
      for (int c = 0; c < C; ++c) g[std::size_t(c) * plane + p] = grad_y[std::size_t(c) * plane + p] / m;
      g[std::size_t(arg) * plane + p] -= sgn * dotgx / (m * m);
    } else {
      for (int c = 0; c < C; ++c) g[std::size_t(c) * plane + p] = grad_y[std::size_t(c) * plane + p] / eps;
    }
  }
  return g;
}

// Vector forms, used on single-pixel features.
template <typename S>
std::vector<S> linf_normalize_vec(const std::vector<S>& f, S eps) {
  TensorT<S> t({int(f.size()), 1, 1}, f);
  return linf_normalize(t, eps).vec();
}

// --- sub-sampling and interpolation ---

// output[c,y,x] = input[c, phase_y + r*y, phase_x + r*x]
template <typename S>
TensorT<S> subsample(const TensorT<S>& input, int factor, int phase_y, int phase_x) {
  require(input.rank() == 3, ErrorKind::argument, "subsample: input must be [C,H,W]");
  require(factor >= 1, ErrorKind::argument, "subsample: factor must be positive");
  require(phase_y >= 0 && phase_y < factor && phase_x >= 0 && phase_x < factor, ErrorKind::argument,
          "subsample: phase out of range");
  const int C = input.dim(0), H = input.dim(1), W = input.dim(2);
  const int oh = (H - phase_y - 1) / factor + 1;
  const int ow = (W - phase_x - 1) / factor + 1;
  require(H > phase_y && W > phase_x, ErrorKind::argument, "subsample: empty output");
  TensorT<S> out({C, oh, ow});
  for (int c = 0; c < C; ++c)
    for (int y = 0; y < oh; ++y)
      for (int x = 0; x < ow; ++x) out.at(c, y, x) = input.at(c, phase_y + factor * y, phase_x + factor * x);
  return out;
}

// Continuous mirror fold into [0, n-1] without edge duplication
// (-1 -> 1, -0.5 -> 0.5, n -> n-2).
inline double reflect_coord(double t, int n) {
  if (n == 1) return 0.0;
  double period = 2.0 * (n - 1);
  double u = std::fmod(t, period);
  if (u < 0) u += period;
  return u <= double(n - 1) ? u : period - u;
}

// 4-neighbor bilinear blend on the reflection-extended image.
template <typename S>
std::vector<S> bilinear_sample(const TensorT<S>& img, double y, double x) {
  require(img.rank() == 3, ErrorKind::argument, "bilinear_sample: input must be [C,H,W]");
  const int C = img.dim(0), H = img.dim(1), W = img.dim(2);
  double fy = reflect_coord(y, H);
  double fx = reflect_coord(x, W);
  int y0 = int(std::floor(fy)), x0 = int(std::floor(fx));
  int y1 = std::min(y0 + 1, H - 1), x1 = std::min(x0 + 1, W - 1);
  double wy = fy - y0, wx = fx - x0;
  std::vector<S> out(static_cast<std::size_t>(C));
  for (int c = 0; c < C; ++c) {
    double v00 = img.at(c, y0, x0), v01 = img.at(c, y0, x1);
    double v10 = img.at(c, y1, x0), v11 = img.at(c, y1, x1);
    out[std::size_t(c)] = S((1 - wy) * ((1 - wx) * v00 + wx * v01) + wy * ((1 - wx) * v10 + wx * v11));
  }
  return out;
}

template <typename S>
TensorT<S> crop_center(const TensorT<S>& t, int h, int w) {
  require(t.rank() == 3, ErrorKind::argument, "crop_center: input must be [C,H,W]");
  const int C = t.dim(0), H = t.dim(1), W = t.dim(2);
  require(h >= 1 && w >= 1 && h <= H && w <= W, ErrorKind::argument, "crop_center: bad crop size");
  require((H - h) % 2 == 0 && (W - w) % 2 == 0, ErrorKind::argument, "crop_center: asymmetric crop");
  const int oy = (H - h) / 2, ox = (W - w) / 2;
  TensorT<S> out({C, h, w});
  for (int c = 0; c < C; ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) out.at(c, y, x) = t.at(c, oy + y, ox + x);
  return out;
}

}  // namespace sdc
