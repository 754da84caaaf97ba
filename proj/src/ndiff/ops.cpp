#include "raseg/ndiff/ops.hpp"

#include <cmath>
#include <vector>

#include <Eigen/Core>

namespace raseg::nd {

int conv_out_size(int n, int k, int s, int p) {
  const int span = n + 2 * p - k;
  if (span < 0 || s < 1) return 0;
  return span / s + 1;
}

int tconv_out_size(int n, int k, int s, int p, int out_pad) { return (n - 1) * s - 2 * p + k + out_pad; }

namespace {

template <typename T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapR = Eigen::Map<MatR<T>>;
template <typename T>
using CMapR = Eigen::Map<const MatR<T>>;

// Geometry of a strided cross-correlation from the "large" grid (C,D,H,W)
// to the "small" grid (Do,Ho,Wo).
struct Geom {
  int C, D, H, W;
  int kd, kh, kw;
  int sd, sh, sw;
  int pd, ph, pw;
  int Do, Ho, Wo;
  std::size_t rows() const { return static_cast<std::size_t>(C) * kd * kh * kw; }
  std::size_t cols() const { return static_cast<std::size_t>(Do) * Ho * Wo; }
  std::size_t in_size() const { return static_cast<std::size_t>(C) * D * H * W; }
  bool pointwise() const {
    return kd == 1 && kh == 1 && kw == 1 && sd == 1 && sh == 1 && sw == 1 && pd == 0 && ph == 0 && pw == 0;
  }
};

template <typename T>
void im2col(const T* x, const Geom& g, T* cols) {
  const std::size_t P = g.cols();
  const std::size_t plane = static_cast<std::size_t>(g.Ho) * g.Wo;
  std::size_t r = 0;
  for (int c = 0; c < g.C; ++c)
    for (int a = 0; a < g.kd; ++a)
      for (int b = 0; b < g.kh; ++b)
        for (int e = 0; e < g.kw; ++e, ++r) {
          T* row = cols + r * P;
          for (int od = 0; od < g.Do; ++od) {
            const int iz = od * g.sd - g.pd + a;
            T* rd = row + od * plane;
            if (iz < 0 || iz >= g.D) {
              std::fill(rd, rd + plane, T(0));
              continue;
            }
            for (int oh = 0; oh < g.Ho; ++oh) {
              const int iy = oh * g.sh - g.ph + b;
              T* rh = rd + static_cast<std::size_t>(oh) * g.Wo;
              if (iy < 0 || iy >= g.H) {
                std::fill(rh, rh + g.Wo, T(0));
                continue;
              }
              const T* src = x + (static_cast<std::size_t>(c * g.D + iz) * g.H + iy) * g.W;
              for (int ow = 0; ow < g.Wo; ++ow) {
                const int ix = ow * g.sw - g.pw + e;
                rh[ow] = (ix >= 0 && ix < g.W) ? src[ix] : T(0);
              }
            }
          }
        }
}

template <typename T>
void col2im(const T* cols, const Geom& g, T* x) {
  const std::size_t P = g.cols();
  const std::size_t plane = static_cast<std::size_t>(g.Ho) * g.Wo;
  std::size_t r = 0;
  for (int c = 0; c < g.C; ++c)
    for (int a = 0; a < g.kd; ++a)
      for (int b = 0; b < g.kh; ++b)
        for (int e = 0; e < g.kw; ++e, ++r) {
          const T* row = cols + r * P;
          for (int od = 0; od < g.Do; ++od) {
            const int iz = od * g.sd - g.pd + a;
            if (iz < 0 || iz >= g.D) continue;
            const T* rd = row + od * plane;
            for (int oh = 0; oh < g.Ho; ++oh) {
              const int iy = oh * g.sh - g.ph + b;
              if (iy < 0 || iy >= g.H) continue;
              const T* rh = rd + static_cast<std::size_t>(oh) * g.Wo;
              T* dst = x + (static_cast<std::size_t>(c * g.D + iz) * g.H + iy) * g.W;
              for (int ow = 0; ow < g.Wo; ++ow) {
                const int ix = ow * g.sw - g.pw + e;
                if (ix >= 0 && ix < g.W) dst[ix] += rh[ow];
              }
            }
          }
        }
}

void require(bool ok, const std::string& msg) {
  if (!ok) throw DimensionError(msg);
}

template <typename T>
void check_bias(const Tensor5<T>* b, int channels, const char* op) {
  if (!b) return;
  require(b->shape() == Shape5{channels, 1, 1, 1, 1},
          std::string(op) + ": bias must be (" + std::to_string(channels) + ",1,1,1,1), got " + b->shape().str());
}

Geom conv_geom(const Shape5& x, const Shape5& w, const ConvAttrs& a, const char* op) {
  require(w.c == x.c, std::string(op) + ": weight expects " + std::to_string(w.c) + " input channels, input x has " +
                          std::to_string(x.c));
  for (int i = 0; i < 3; ++i) {
    require(a.stride[i] >= 1, std::string(op) + ": stride must be >= 1");
    require(a.pad[i] >= 0, std::string(op) + ": padding must be >= 0");
  }
  Geom g{x.c, x.d, x.h, x.w, w.d, w.h, w.w, a.stride[0], a.stride[1], a.stride[2], a.pad[0], a.pad[1], a.pad[2], 0, 0, 0};
  g.Do = conv_out_size(x.d, w.d, a.stride[0], a.pad[0]);
  g.Ho = conv_out_size(x.h, w.h, a.stride[1], a.pad[1]);
  g.Wo = conv_out_size(x.w, w.w, a.stride[2], a.pad[2]);
  require(g.Do >= 1 && g.Ho >= 1 && g.Wo >= 1,
          std::string(op) + ": kernel " + w.str() + " does not fit input x " + x.str());
  return g;
}

}  // namespace

namespace kernels {

template <typename T>
Tensor5<T> conv_forward(const Tensor5<T>& x, const Tensor5<T>& w, const Tensor5<T>* b, const ConvAttrs& attrs) {
  const Geom g = conv_geom(x.shape(), w.shape(), attrs, "conv3d");
  check_bias(b, w.shape().n, "conv3d");
  const int O = w.shape().n, N = x.shape().n;
  const std::size_t P = g.cols(), K = g.rows();
  Tensor5<T> y(Shape5{N, O, g.Do, g.Ho, g.Wo});
  CMapR<T> W(w.data(), O, static_cast<Eigen::Index>(K));
  std::vector<T> cols(g.pointwise() ? 0 : K * P);
  for (int n = 0; n < N; ++n) {
    const T* xn = x.data() + n * g.in_size();
    const T* cp = xn;
    if (!g.pointwise()) {
      im2col(xn, g, cols.data());
      cp = cols.data();
    }
    MapR<T> Y(y.data() + static_cast<std::size_t>(n) * O * P, O, static_cast<Eigen::Index>(P));
    Y.noalias() = W * CMapR<T>(cp, static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(P));
    if (b) {
      for (int o = 0; o < O; ++o) Y.row(o).array() += (*b)[o];
    }
  }
  return y;
}

template <typename T>
void conv_backward(const Tensor5<T>& x, const Tensor5<T>& w, const Tensor5<T>& gy, const ConvAttrs& attrs,
                   Tensor5<T>* gx, Tensor5<T>* gw, Tensor5<T>* gb) {
  const Geom g = conv_geom(x.shape(), w.shape(), attrs, "conv3d");
  const int O = w.shape().n, N = x.shape().n;
  const std::size_t P = g.cols(), K = g.rows();
  CMapR<T> W(w.data(), O, static_cast<Eigen::Index>(K));
  std::vector<T> cols(g.pointwise() ? 0 : K * P);
  std::vector<T> gcols(gx && !g.pointwise() ? K * P : 0);
  for (int n = 0; n < N; ++n) {
    const T* xn = x.data() + n * g.in_size();
    CMapR<T> GY(gy.data() + static_cast<std::size_t>(n) * O * P, O, static_cast<Eigen::Index>(P));
    if (gw) {
      const T* cp = xn;
      if (!g.pointwise()) {
        im2col(xn, g, cols.data());
        cp = cols.data();
      }
      MapR<T> GW(gw->data(), O, static_cast<Eigen::Index>(K));
      GW.noalias() += GY * CMapR<T>(cp, static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(P)).transpose();
    }
    if (gb) {
      // Ordered sum; Eigen redux order depends on buffer alignment.
      for (int o = 0; o < O; ++o) {
        const T* row = GY.data() + static_cast<std::size_t>(o) * P;
        double acc = 0.0;
        for (std::size_t i = 0; i < P; ++i) acc += row[i];
        (*gb)[o] += static_cast<T>(acc);
      }
    }
    if (gx) {
      T* gxn = gx->data() + n * g.in_size();
      if (g.pointwise()) {
        MapR<T> GX(gxn, static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(P));
        GX.noalias() += W.transpose() * GY;
      } else {
        MapR<T> GC(gcols.data(), static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(P));
        GC.noalias() = W.transpose() * GY;
        col2im(gcols.data(), g, gxn);
      }
    }
  }
}

}  // namespace kernels

// ---------------------------------------------------------------------------

template <typename T>
Var conv3d(Graph<T>& g, Var x, Var w, Var b, const ConvAttrs& attrs) {
  const Tensor5<T>* bias = b.valid() ? &g.value(b) : nullptr;
  Tensor5<T> y = kernels::conv_forward(g.value(x), g.value(w), bias, attrs);
  std::vector<Var> inputs{x, w};
  if (b.valid()) inputs.push_back(b);
  return g.record(OpKind::Conv3d, inputs, std::move(y), [x, w, b, attrs](Graph<T>& gr, const Tensor5<T>& gout) {
    Tensor5<T>* gx = gr.requires_grad(x) ? &gr.grad_buffer(x) : nullptr;
    Tensor5<T>* gw = gr.requires_grad(w) ? &gr.grad_buffer(w) : nullptr;
    Tensor5<T>* gb = b.valid() && gr.requires_grad(b) ? &gr.grad_buffer(b) : nullptr;
    kernels::conv_backward(gr.value(x), gr.value(w), gout, attrs, gx, gw, gb);
  });
}

template <typename T>
Var tconv3d(Graph<T>& g, Var x, Var w, Var b, const TConvAttrs& attrs) {
  const Shape5 xs = g.shape(x), ws = g.shape(w);
  require(ws.n == xs.c, "tconv3d: weight expects " + std::to_string(ws.n) + " input channels, input x has " +
                            std::to_string(xs.c));
  for (int i = 0; i < 3; ++i) {
    require(attrs.stride[i] >= 1, "tconv3d: stride must be >= 1");
    require(attrs.out_pad[i] >= 0 && attrs.out_pad[i] < attrs.stride[i], "tconv3d: out_pad must be in [0, stride)");
  }
  const int Cout = ws.c;
  const Shape5 ys{xs.n, Cout, tconv_out_size(xs.d, ws.d, attrs.stride[0], attrs.pad[0], attrs.out_pad[0]),
                  tconv_out_size(xs.h, ws.h, attrs.stride[1], attrs.pad[1], attrs.out_pad[1]),
                  tconv_out_size(xs.w, ws.w, attrs.stride[2], attrs.pad[2], attrs.out_pad[2])};
  require(ys.d >= 1 && ys.h >= 1 && ys.w >= 1, "tconv3d: output would be empty for input x " + xs.str());
  const Geom geo{Cout,     ys.d,           ys.h,           ys.w,           ws.d, ws.h, ws.w, attrs.stride[0],
                 attrs.stride[1], attrs.stride[2], attrs.pad[0], attrs.pad[1], attrs.pad[2], xs.d, xs.h, xs.w};
  if (b.valid()) check_bias(&g.value(b), Cout, "tconv3d");

  const std::size_t P = geo.cols(), K = geo.rows();
  const int Cin = xs.c;
  Tensor5<T> y(ys);
  std::vector<T> cols(K * P);
  CMapR<T> Wt(g.value(w).data(), Cin, static_cast<Eigen::Index>(K));
  for (int n = 0; n < xs.n; ++n) {
    CMapR<T> X(g.value(x).data() + static_cast<std::size_t>(n) * Cin * P, Cin, static_cast<Eigen::Index>(P));
    MapR<T> C(cols.data(), static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(P));
    C.noalias() = Wt.transpose() * X;
    T* yn = y.data() + n * geo.in_size();
    col2im(cols.data(), geo, yn);
    if (b.valid()) {
      const Tensor5<T>& bias = g.value(b);
      const std::size_t sp = ys.spatial();
      for (int c = 0; c < Cout; ++c) {
        T* p = yn + c * sp;
        for (std::size_t i = 0; i < sp; ++i) p[i] += bias[c];
      }
    }
  }
  std::vector<Var> inputs{x, w};
  if (b.valid()) inputs.push_back(b);
  return g.record(OpKind::TConv3d, inputs, std::move(y), [x, w, b, geo](Graph<T>& gr, const Tensor5<T>& gout) {
    const Shape5 xs = gr.shape(x);
    const int Cin = xs.c;
    const std::size_t P = geo.cols(), K = geo.rows();
    std::vector<T> cols(K * P);
    CMapR<T> Wt(gr.value(w).data(), Cin, static_cast<Eigen::Index>(K));
    Tensor5<T>* gx = gr.requires_grad(x) ? &gr.grad_buffer(x) : nullptr;
    Tensor5<T>* gw = gr.requires_grad(w) ? &gr.grad_buffer(w) : nullptr;
    Tensor5<T>* gb = b.valid() && gr.requires_grad(b) ? &gr.grad_buffer(b) : nullptr;
    for (int n = 0; n < xs.n; ++n) {
      const T* gyn = gout.data() + n * geo.in_size();
      im2col(gyn, geo, cols.data());
      CMapR<T> C(cols.data(), static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(P));
      if (gx) {
        MapR<T> GX(gx->data() + static_cast<std::size_t>(n) * Cin * P, Cin, static_cast<Eigen::Index>(P));
        GX.noalias() += Wt * C;
      }
      if (gw) {
        CMapR<T> X(gr.value(x).data() + static_cast<std::size_t>(n) * Cin * P, Cin, static_cast<Eigen::Index>(P));
        MapR<T> GW(gw->data(), Cin, static_cast<Eigen::Index>(K));
        GW.noalias() += X * C.transpose();
      }
      if (gb) {
        const std::size_t sp = static_cast<std::size_t>(geo.D) * geo.H * geo.W;
        for (int c = 0; c < geo.C; ++c) {
          const T* p = gyn + c * sp;
          double acc = 0.0;
          for (std::size_t i = 0; i < sp; ++i) acc += p[i];
          (*gb)[c] += static_cast<T>(acc);
        }
      }
    }
  });
}

template <typename T>
Var instance_norm(Graph<T>& g, Var x, Var gamma, Var beta, double eps) {
  const Shape5 s = g.shape(x);
  const Shape5 cs{s.c, 1, 1, 1, 1};
  require(g.shape(gamma) == cs, "instance_norm: gamma must be " + cs.str() + ", got " + g.shape(gamma).str());
  require(g.shape(beta) == cs, "instance_norm: beta must be " + cs.str() + ", got " + g.shape(beta).str());
  const std::size_t M = s.spatial();
  const Tensor5<T>& xv = g.value(x);
  const Tensor5<T>& gm = g.value(gamma);
  const Tensor5<T>& bt = g.value(beta);
  Tensor5<T> xhat(s), y(s);
  std::vector<T> inv_std(static_cast<std::size_t>(s.n) * s.c);
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      const std::size_t off = (static_cast<std::size_t>(n) * s.c + c) * M;
      const T* p = xv.data() + off;
      double mean = 0.0;
      for (std::size_t i = 0; i < M; ++i) mean += p[i];
      mean /= static_cast<double>(M);
      double var = 0.0;
      for (std::size_t i = 0; i < M; ++i) var += (p[i] - mean) * (p[i] - mean);
      var /= static_cast<double>(M);
      const double inv = 1.0 / std::sqrt(var + eps);
      inv_std[n * s.c + c] = static_cast<T>(inv);
      for (std::size_t i = 0; i < M; ++i) {
        const T xh = static_cast<T>((p[i] - mean) * inv);
        xhat[off + i] = xh;
        y[off + i] = gm[c] * xh + bt[c];
      }
    }
  }
  return g.record(OpKind::InstanceNorm, {x, gamma, beta}, std::move(y),
                  [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std)](Graph<T>& gr,
                                                                                       const Tensor5<T>& gout) {
                    const Shape5 s = gr.shape(x);
                    const std::size_t M = s.spatial();
                    const Tensor5<T>& gm = gr.value(gamma);
                    Tensor5<T>* gx = gr.requires_grad(x) ? &gr.grad_buffer(x) : nullptr;
                    Tensor5<T>* gg = gr.requires_grad(gamma) ? &gr.grad_buffer(gamma) : nullptr;
                    Tensor5<T>* gbt = gr.requires_grad(beta) ? &gr.grad_buffer(beta) : nullptr;
                    for (int n = 0; n < s.n; ++n) {
                      for (int c = 0; c < s.c; ++c) {
                        const std::size_t off = (static_cast<std::size_t>(n) * s.c + c) * M;
                        double sum_g = 0.0, sum_gx = 0.0;
                        for (std::size_t i = 0; i < M; ++i) {
                          sum_g += gout[off + i];
                          sum_gx += static_cast<double>(gout[off + i]) * xhat[off + i];
                        }
                        if (gg) (*gg)[c] += static_cast<T>(sum_gx);
                        if (gbt) (*gbt)[c] += static_cast<T>(sum_g);
                        if (gx) {
                          const double k = static_cast<double>(gm[c]) * inv_std[n * s.c + c];
                          const double mg = sum_g / M, mgx = sum_gx / M;
                          for (std::size_t i = 0; i < M; ++i) {
                            (*gx)[off + i] += static_cast<T>(k * (gout[off + i] - mg - xhat[off + i] * mgx));
                          }
                        }
                      }
                    }
                  });
}

template <typename T>
Var prelu(Graph<T>& g, Var x, Var a) {
  const Shape5 s = g.shape(x);
  require(g.shape(a) == Shape5{s.c, 1, 1, 1, 1}, "prelu: slope a must be (" + std::to_string(s.c) + ",1,1,1,1)");
  const Tensor5<T>& xv = g.value(x);
  const Tensor5<T>& av = g.value(a);
  Tensor5<T> y(s);
  const std::size_t M = s.spatial();
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      const std::size_t off = (static_cast<std::size_t>(n) * s.c + c) * M;
      for (std::size_t i = 0; i < M; ++i) {
        const T v = xv[off + i];
        y[off + i] = v >= T(0) ? v : av[c] * v;
      }
    }
  }
  return g.record(OpKind::PRelu, {x, a}, std::move(y), [x, a](Graph<T>& gr, const Tensor5<T>& gout) {
    const Shape5 s = gr.shape(x);
    const std::size_t M = s.spatial();
    const Tensor5<T>& xv = gr.value(x);
    const Tensor5<T>& av = gr.value(a);
    Tensor5<T>* gx = gr.requires_grad(x) ? &gr.grad_buffer(x) : nullptr;
    Tensor5<T>* ga = gr.requires_grad(a) ? &gr.grad_buffer(a) : nullptr;
    for (int n = 0; n < s.n; ++n) {
      for (int c = 0; c < s.c; ++c) {
        const std::size_t off = (static_cast<std::size_t>(n) * s.c + c) * M;
        double acc = 0.0;
        for (std::size_t i = 0; i < M; ++i) {
          const T v = xv[off + i];
          if (v >= T(0)) {
            if (gx) (*gx)[off + i] += gout[off + i];
          } else {
            if (gx) (*gx)[off + i] += av[c] * gout[off + i];
            acc += static_cast<double>(gout[off + i]) * v;
          }
        }
        if (ga) (*ga)[c] += static_cast<T>(acc);
      }
    }
  });
}

template <typename T>
Var spatial_dropout(Graph<T>& g, Var x, double rate) {
  if (!(rate >= 0.0 && rate < 1.0)) throw ValidationError("spatial_dropout: rate must be in [0,1)");
  if (!g.training() || rate == 0.0) return x;
  const Shape5 s = g.shape(x);
  const std::size_t M = s.spatial();
  std::vector<T> scale(static_cast<std::size_t>(s.n) * s.c);
  for (T& v : scale) v = g.rng().bernoulli(rate) ? T(0) : static_cast<T>(1.0 / (1.0 - rate));
  const Tensor5<T>& xv = g.value(x);
  Tensor5<T> y(s);
  for (std::size_t k = 0; k < scale.size(); ++k) {
    for (std::size_t i = 0; i < M; ++i) y[k * M + i] = xv[k * M + i] * scale[k];
  }
  return g.record(OpKind::SpatialDropout, {x}, std::move(y),
                  [x, scale = std::move(scale), M](Graph<T>& gr, const Tensor5<T>& gout) {
                    Tensor5<T>& gx = gr.grad_buffer(x);
                    for (std::size_t k = 0; k < scale.size(); ++k) {
                      for (std::size_t i = 0; i < M; ++i) gx[k * M + i] += gout[k * M + i] * scale[k];
                    }
                  });
}

namespace {
template <typename T>
T stable_sigmoid(T v) {
  if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
  const T e = std::exp(v);
  return e / (T(1) + e);
}
}  // namespace

template <typename T>
Var sigmoid(Graph<T>& g, Var x) {
  const Tensor5<T>& xv = g.value(x);
  Tensor5<T> y(xv.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = stable_sigmoid(xv[i]);
  Tensor5<T> yc = y;
  return g.record(OpKind::Sigmoid, {x}, std::move(y), [x, yc = std::move(yc)](Graph<T>& gr, const Tensor5<T>& gout) {
    Tensor5<T>& gx = gr.grad_buffer(x);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gout[i] * yc[i] * (T(1) - yc[i]);
  });
}

template <typename T>
Var softmax_channel(Graph<T>& g, Var x) {
  const Shape5 s = g.shape(x);
  const Tensor5<T>& xv = g.value(x);
  const std::size_t M = s.spatial();
  Tensor5<T> y(s);
  for (int n = 0; n < s.n; ++n) {
    const std::size_t base = static_cast<std::size_t>(n) * s.c * M;
    for (std::size_t i = 0; i < M; ++i) {
      T mx = xv[base + i];
      for (int c = 1; c < s.c; ++c) mx = std::max(mx, xv[base + c * M + i]);
      double sum = 0.0;
      for (int c = 0; c < s.c; ++c) sum += std::exp(static_cast<double>(xv[base + c * M + i] - mx));
      for (int c = 0; c < s.c; ++c) {
        y[base + c * M + i] = static_cast<T>(std::exp(static_cast<double>(xv[base + c * M + i] - mx)) / sum);
      }
    }
  }
  Tensor5<T> yc = y;
  return g.record(OpKind::SoftmaxChannel, {x}, std::move(y),
                  [x, yc = std::move(yc)](Graph<T>& gr, const Tensor5<T>& gout) {
                    const Shape5 s = yc.shape();
                    const std::size_t M = s.spatial();
                    Tensor5<T>& gx = gr.grad_buffer(x);
                    for (int n = 0; n < s.n; ++n) {
                      const std::size_t base = static_cast<std::size_t>(n) * s.c * M;
                      for (std::size_t i = 0; i < M; ++i) {
                        double dot = 0.0;
                        for (int c = 0; c < s.c; ++c) dot += static_cast<double>(gout[base + c * M + i]) * yc[base + c * M + i];
                        for (int c = 0; c < s.c; ++c) {
                          const std::size_t k = base + c * M + i;
                          gx[k] += static_cast<T>(yc[k] * (gout[k] - dot));
                        }
                      }
                    }
                  });
}

template <typename T>
Var add(Graph<T>& g, Var a, Var b) {
  require(g.shape(a) == g.shape(b), "add: operand b " + g.shape(b).str() + " does not match operand a " + g.shape(a).str());
  const Tensor5<T>& av = g.value(a);
  const Tensor5<T>& bv = g.value(b);
  Tensor5<T> y(av.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] + bv[i];
  return g.record(OpKind::Add, {a, b}, std::move(y), [a, b](Graph<T>& gr, const Tensor5<T>& gout) {
    for (Var v : {a, b}) {
      if (!gr.requires_grad(v)) continue;
      Tensor5<T>& gv = gr.grad_buffer(v);
      for (std::size_t i = 0; i < gv.size(); ++i) gv[i] += gout[i];
    }
  });
}

template <typename T>
Var mul(Graph<T>& g, Var a, Var b) {
  require(g.shape(a) == g.shape(b), "mul: operand b " + g.shape(b).str() + " does not match operand a " + g.shape(a).str());
  const Tensor5<T>& av = g.value(a);
  const Tensor5<T>& bv = g.value(b);
  Tensor5<T> y(av.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] * bv[i];
  return g.record(OpKind::Mul, {a, b}, std::move(y), [a, b](Graph<T>& gr, const Tensor5<T>& gout) {
    const Tensor5<T>& av = gr.value(a);
    const Tensor5<T>& bv = gr.value(b);
    if (gr.requires_grad(a)) {
      Tensor5<T>& ga = gr.grad_buffer(a);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gout[i] * bv[i];
    }
    if (gr.requires_grad(b)) {
      Tensor5<T>& gb = gr.grad_buffer(b);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += gout[i] * av[i];
    }
  });
}

template <typename T>
Var concat_channel(Graph<T>& g, std::span<const Var> parts) {
  require(!parts.empty(), "concat_channel: no operands");
  Shape5 s = g.shape(parts[0]);
  int total = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Shape5 ps = g.shape(parts[k]);
    require(ps.n == s.n && ps.d == s.d && ps.h == s.h && ps.w == s.w,
            "concat_channel: operand " + std::to_string(k) + " " + ps.str() + " disagrees on non-channel dims with " +
                s.str());
    total += ps.c;
  }
  s.c = total;
  Tensor5<T> y(s);
  const std::size_t M = s.spatial();
  std::vector<int> offsets;
  int off = 0;
  for (Var p : parts) {
    const Tensor5<T>& pv = g.value(p);
    const int pc = pv.shape().c;
    for (int n = 0; n < s.n; ++n) {
      std::copy(pv.data() + static_cast<std::size_t>(n) * pc * M, pv.data() + static_cast<std::size_t>(n + 1) * pc * M,
                y.data() + (static_cast<std::size_t>(n) * s.c + off) * M);
    }
    offsets.push_back(off);
    off += pc;
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return g.record(OpKind::ConcatChannel, inputs, std::move(y),
                  [inputs, offsets, s](Graph<T>& gr, const Tensor5<T>& gout) {
                    const std::size_t M = s.spatial();
                    for (std::size_t k = 0; k < inputs.size(); ++k) {
                      if (!gr.requires_grad(inputs[k])) continue;
                      Tensor5<T>& gp = gr.grad_buffer(inputs[k]);
                      const int pc = gp.shape().c;
                      for (int n = 0; n < s.n; ++n) {
                        const T* src = gout.data() + (static_cast<std::size_t>(n) * s.c + offsets[k]) * M;
                        T* dst = gp.data() + static_cast<std::size_t>(n) * pc * M;
                        for (std::size_t i = 0; i < pc * M; ++i) dst[i] += src[i];
                      }
                    }
                  });
}

template <typename T>
Var slice_channel(Graph<T>& g, Var x, int begin, int end) {
  const Shape5 s = g.shape(x);
  require(0 <= begin && begin < end && end <= s.c, "slice_channel: range out of bounds for x " + s.str());
  Shape5 os = s;
  os.c = end - begin;
  const std::size_t M = s.spatial();
  const Tensor5<T>& xv = g.value(x);
  Tensor5<T> y(os);
  for (int n = 0; n < s.n; ++n) {
    std::copy(xv.data() + (static_cast<std::size_t>(n) * s.c + begin) * M,
              xv.data() + (static_cast<std::size_t>(n) * s.c + end) * M,
              y.data() + static_cast<std::size_t>(n) * os.c * M);
  }
  return g.record(OpKind::SliceChannel, {x}, std::move(y), [x, begin, os, s](Graph<T>& gr, const Tensor5<T>& gout) {
    Tensor5<T>& gx = gr.grad_buffer(x);
    const std::size_t M = s.spatial();
    for (int n = 0; n < s.n; ++n) {
      const T* src = gout.data() + static_cast<std::size_t>(n) * os.c * M;
      T* dst = gx.data() + (static_cast<std::size_t>(n) * s.c + begin) * M;
      for (std::size_t i = 0; i < os.c * M; ++i) dst[i] += src[i];
    }
  });
}

template <typename T>
Var slice_depth(Graph<T>& g, Var x, int index) {
  const Shape5 s = g.shape(x);
  require(0 <= index && index < s.d, "slice_depth: index out of bounds for x " + s.str());
  Shape5 os = s;
  os.d = 1;
  const std::size_t plane = static_cast<std::size_t>(s.h) * s.w;
  const Tensor5<T>& xv = g.value(x);
  Tensor5<T> y(os);
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      const T* src = xv.data() + xv.offset(n, c, index, 0, 0);
      std::copy(src, src + plane, y.data() + y.offset(n, c, 0, 0, 0));
    }
  }
  return g.record(OpKind::SliceDepth, {x}, std::move(y), [x, index, s](Graph<T>& gr, const Tensor5<T>& gout) {
    Tensor5<T>& gx = gr.grad_buffer(x);
    const std::size_t plane = static_cast<std::size_t>(s.h) * s.w;
    for (int n = 0; n < s.n; ++n) {
      for (int c = 0; c < s.c; ++c) {
        const T* src = gout.data() + gout.offset(n, c, 0, 0, 0);
        T* dst = gx.data() + gx.offset(n, c, index, 0, 0);
        for (std::size_t i = 0; i < plane; ++i) dst[i] += src[i];
      }
    }
  });
}

template <typename T>
Var concat_depth(Graph<T>& g, std::span<const Var> parts) {
  require(!parts.empty(), "concat_depth: no operands");
  Shape5 s = g.shape(parts[0]);
  int total = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Shape5 ps = g.shape(parts[k]);
    require(ps.n == s.n && ps.c == s.c && ps.h == s.h && ps.w == s.w,
            "concat_depth: operand " + std::to_string(k) + " " + ps.str() + " disagrees with " + s.str());
    total += ps.d;
  }
  s.d = total;
  Tensor5<T> y(s);
  const std::size_t plane = static_cast<std::size_t>(s.h) * s.w;
  std::vector<int> offsets;
  int off = 0;
  for (Var p : parts) {
    const Tensor5<T>& pv = g.value(p);
    const int pd = pv.shape().d;
    for (int n = 0; n < s.n; ++n) {
      for (int c = 0; c < s.c; ++c) {
        const T* src = pv.data() + pv.offset(n, c, 0, 0, 0);
        std::copy(src, src + pd * plane, y.data() + y.offset(n, c, off, 0, 0));
      }
    }
    offsets.push_back(off);
    off += pd;
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return g.record(OpKind::ConcatDepth, inputs, std::move(y),
                  [inputs, offsets, s](Graph<T>& gr, const Tensor5<T>& gout) {
                    const std::size_t plane = static_cast<std::size_t>(s.h) * s.w;
                    for (std::size_t k = 0; k < inputs.size(); ++k) {
                      if (!gr.requires_grad(inputs[k])) continue;
                      Tensor5<T>& gp = gr.grad_buffer(inputs[k]);
                      const int pd = gp.shape().d;
                      for (int n = 0; n < s.n; ++n) {
                        for (int c = 0; c < s.c; ++c) {
                          const T* src = gout.data() + gout.offset(n, c, offsets[k], 0, 0);
                          T* dst = gp.data() + gp.offset(n, c, 0, 0, 0);
                          for (std::size_t i = 0; i < pd * plane; ++i) dst[i] += src[i];
                        }
                      }
                    }
                  });
}

template <typename T>
std::pair<Var, Var> convlstm_cell(Graph<T>& g, Var x, Var h, Var c, Var wx, Var wh, Var b) {
  const Shape5 xs = g.shape(x), hs = g.shape(h), cs = g.shape(c), wxs = g.shape(wx), whs = g.shape(wh);
  const int Hc = hs.c;
  require(xs.d == 1 && hs.d == 1, "convlstm_cell: x and h must be single depth slices");
  require(xs.n == hs.n && xs.h == hs.h && xs.w == hs.w,
          "convlstm_cell: h_prev " + hs.str() + " disagrees with x " + xs.str() + " on batch/spatial dims");
  require(cs == hs, "convlstm_cell: c_prev " + cs.str() + " must match h_prev " + hs.str());
  require(wxs.n == 4 * Hc && wxs.c == xs.c && wxs.d == 1,
          "convlstm_cell: wx must be (4*" + std::to_string(Hc) + "," + std::to_string(xs.c) + ",1,kh,kw), got " +
              wxs.str());
  require(whs.n == 4 * Hc && whs.c == Hc && whs.d == 1 && whs.h == wxs.h && whs.w == wxs.w,
          "convlstm_cell: wh must be (4*" + std::to_string(Hc) + "," + std::to_string(Hc) + ",1,kh,kw), got " +
              whs.str());
  require(wxs.h % 2 == 1 && wxs.w % 2 == 1, "convlstm_cell: kernel must be odd for same padding");
  require(g.shape(b) == Shape5{4 * Hc, 1, 1, 1, 1}, "convlstm_cell: bias must be (4*Hc,1,1,1,1)");

  const ConvAttrs attrs{{1, 1, 1}, {0, wxs.h / 2, wxs.w / 2}};
  Tensor5<T> gates = kernels::conv_forward(g.value(x), g.value(wx), &g.value(b), attrs);
  {
    const Tensor5<T> hpart = kernels::conv_forward(g.value(h), g.value(wh), static_cast<const Tensor5<T>*>(nullptr), attrs);
    for (std::size_t i = 0; i < gates.size(); ++i) gates[i] += hpart[i];
  }
  const std::size_t M = xs.spatial();
  const Tensor5<T>& cprev = g.value(c);
  Tensor5<T> out(Shape5{xs.n, 2 * Hc, 1, xs.h, xs.w});
  Tensor5<T> tanh_c(hs);
  for (int n = 0; n < xs.n; ++n) {
    for (int j = 0; j < Hc; ++j) {
      T* gi = gates.data() + gates.offset(n, j, 0, 0, 0);
      T* gf = gates.data() + gates.offset(n, Hc + j, 0, 0, 0);
      T* go = gates.data() + gates.offset(n, 2 * Hc + j, 0, 0, 0);
      T* gg = gates.data() + gates.offset(n, 3 * Hc + j, 0, 0, 0);
      const T* cp = cprev.data() + cprev.offset(n, j, 0, 0, 0);
      T* ho = out.data() + out.offset(n, j, 0, 0, 0);
      T* co = out.data() + out.offset(n, Hc + j, 0, 0, 0);
      T* tc = tanh_c.data() + tanh_c.offset(n, j, 0, 0, 0);
      for (std::size_t p = 0; p < M; ++p) {
        gi[p] = stable_sigmoid(gi[p]);
        gf[p] = stable_sigmoid(gf[p]);
        go[p] = stable_sigmoid(go[p]);
        gg[p] = std::tanh(gg[p]);
        co[p] = gf[p] * cp[p] + gi[p] * gg[p];
        tc[p] = std::tanh(co[p]);
        ho[p] = go[p] * tc[p];
      }
    }
  }
  Var hc = g.record(
      OpKind::ConvLstmCell, {x, h, c, wx, wh, b}, std::move(out),
      [x, h, c, wx, wh, b, attrs, gates = std::move(gates), tanh_c = std::move(tanh_c), Hc](Graph<T>& gr,
                                                                                         const Tensor5<T>& gout) {
        const Shape5 xs = gr.shape(x);
        const std::size_t M = xs.spatial();
        const Tensor5<T>& cprev = gr.value(c);
        Tensor5<T> dpre(gates.shape());
        Tensor5<T>* gc = gr.requires_grad(c) ? &gr.grad_buffer(c) : nullptr;
        for (int n = 0; n < xs.n; ++n) {
          for (int j = 0; j < Hc; ++j) {
            const T* gi = gates.data() + gates.offset(n, j, 0, 0, 0);
            const T* gf = gates.data() + gates.offset(n, Hc + j, 0, 0, 0);
            const T* go = gates.data() + gates.offset(n, 2 * Hc + j, 0, 0, 0);
            const T* gg = gates.data() + gates.offset(n, 3 * Hc + j, 0, 0, 0);
            const T* cp = cprev.data() + cprev.offset(n, j, 0, 0, 0);
            const T* tc = tanh_c.data() + tanh_c.offset(n, j, 0, 0, 0);
            const T* dh = gout.data() + gout.offset(n, j, 0, 0, 0);
            const T* dc_ext = gout.data() + gout.offset(n, Hc + j, 0, 0, 0);
            T* di = dpre.data() + dpre.offset(n, j, 0, 0, 0);
            T* df = dpre.data() + dpre.offset(n, Hc + j, 0, 0, 0);
            T* dout = dpre.data() + dpre.offset(n, 2 * Hc + j, 0, 0, 0);
            T* dg = dpre.data() + dpre.offset(n, 3 * Hc + j, 0, 0, 0);
            T* dcp = gc ? gc->data() + gc->offset(n, j, 0, 0, 0) : nullptr;
            for (std::size_t p = 0; p < M; ++p) {
              const T dct = dc_ext[p] + dh[p] * go[p] * (T(1) - tc[p] * tc[p]);
              dout[p] = dh[p] * tc[p] * go[p] * (T(1) - go[p]);
              di[p] = dct * gg[p] * gi[p] * (T(1) - gi[p]);
              df[p] = dct * cp[p] * gf[p] * (T(1) - gf[p]);
              dg[p] = dct * gi[p] * (T(1) - gg[p] * gg[p]);
              if (dcp) dcp[p] += dct * gf[p];
            }
          }
        }
        Tensor5<T>* gx = gr.requires_grad(x) ? &gr.grad_buffer(x) : nullptr;
        Tensor5<T>* gwx = gr.requires_grad(wx) ? &gr.grad_buffer(wx) : nullptr;
        Tensor5<T>* gb = gr.requires_grad(b) ? &gr.grad_buffer(b) : nullptr;
        kernels::conv_backward(gr.value(x), gr.value(wx), dpre, attrs, gx, gwx, gb);
        Tensor5<T>* gh = gr.requires_grad(h) ? &gr.grad_buffer(h) : nullptr;
        Tensor5<T>* gwh = gr.requires_grad(wh) ? &gr.grad_buffer(wh) : nullptr;
        if (gh || gwh) kernels::conv_backward(gr.value(h), gr.value(wh), dpre, attrs, gh, gwh, static_cast<Tensor5<T>*>(nullptr));
      });
  return {slice_channel(g, hc, 0, Hc), slice_channel(g, hc, Hc, 2 * Hc)};
}

template <typename T>
Var mean_axes(Graph<T>& g, Var x, std::array<bool, 3> axes) {
  const Shape5 s = g.shape(x);
  Shape5 os = s;
  if (axes[0]) os.d = 1;
  if (axes[1]) os.h = 1;
  if (axes[2]) os.w = 1;
  const double count = static_cast<double>(s.spatial()) / static_cast<double>(os.spatial());
  const Tensor5<T>& xv = g.value(x);
  std::vector<double> acc(os.numel(), 0.0);
  auto out_index = [os, axes](int n, int c, int d, int h, int w) {
    return (((static_cast<std::size_t>(n) * os.c + c) * os.d + (axes[0] ? 0 : d)) * os.h + (axes[1] ? 0 : h)) * os.w +
           (axes[2] ? 0 : w);
  };
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (int d = 0; d < s.d; ++d)
        for (int h = 0; h < s.h; ++h)
          for (int w = 0; w < s.w; ++w) acc[out_index(n, c, d, h, w)] += xv(n, c, d, h, w);
  Tensor5<T> y(os);
  for (std::size_t i = 0; i < acc.size(); ++i) y[i] = static_cast<T>(acc[i] / count);
  return g.record(OpKind::MeanAxes, {x}, std::move(y), [x, s, count, out_index](Graph<T>& gr, const Tensor5<T>& gout) {
    Tensor5<T>& gx = gr.grad_buffer(x);
    const T inv = static_cast<T>(1.0 / count);
    for (int n = 0; n < s.n; ++n)
      for (int c = 0; c < s.c; ++c)
        for (int d = 0; d < s.d; ++d)
          for (int h = 0; h < s.h; ++h)
            for (int w = 0; w < s.w; ++w) gx(n, c, d, h, w) += gout[out_index(n, c, d, h, w)] * inv;
  });
}

template <typename T>
Var flatten(Graph<T>& g, Var x) {
  const Shape5 s = g.shape(x);
  const Tensor5<T>& xv = g.value(x);
  Tensor5<T> y(Shape5{s.n, static_cast<int>(s.numel() / s.n), 1, 1, 1});
  std::copy(xv.data(), xv.data() + xv.size(), y.data());
  return g.record(OpKind::Flatten, {x}, std::move(y), [x](Graph<T>& gr, const Tensor5<T>& gout) {
    Tensor5<T>& gx = gr.grad_buffer(x);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gout[i];
  });
}

#define RASEG_INSTANTIATE_OPS(T)                                                                                   \
  template Var conv3d<T>(Graph<T>&, Var, Var, Var, const ConvAttrs&);                                              \
  template Var tconv3d<T>(Graph<T>&, Var, Var, Var, const TConvAttrs&);                                            \
  template Var instance_norm<T>(Graph<T>&, Var, Var, Var, double);                                                 \
  template Var prelu<T>(Graph<T>&, Var, Var);                                                                      \
  template Var spatial_dropout<T>(Graph<T>&, Var, double);                                                         \
  template Var sigmoid<T>(Graph<T>&, Var);                                                                         \
  template Var softmax_channel<T>(Graph<T>&, Var);                                                                 \
  template Var add<T>(Graph<T>&, Var, Var);                                                                        \
  template Var mul<T>(Graph<T>&, Var, Var);                                                                        \
  template Var concat_channel<T>(Graph<T>&, std::span<const Var>);                                                 \
  template Var slice_channel<T>(Graph<T>&, Var, int, int);                                                         \
  template Var slice_depth<T>(Graph<T>&, Var, int);                                                                \
  template Var concat_depth<T>(Graph<T>&, std::span<const Var>);                                                   \
  template std::pair<Var, Var> convlstm_cell<T>(Graph<T>&, Var, Var, Var, Var, Var, Var);                          \
  template Var mean_axes<T>(Graph<T>&, Var, std::array<bool, 3>);                                                  \
  template Var flatten<T>(Graph<T>&, Var);                                                                         \
  template Tensor5<T> kernels::conv_forward<T>(const Tensor5<T>&, const Tensor5<T>&, const Tensor5<T>*,            \
                                               const ConvAttrs&);                                                  \
  template void kernels::conv_backward<T>(const Tensor5<T>&, const Tensor5<T>&, const Tensor5<T>&, const ConvAttrs&, \
                                          Tensor5<T>*, Tensor5<T>*, Tensor5<T>*);

RASEG_INSTANTIATE_OPS(float)
RASEG_INSTANTIATE_OPS(double)

}  // namespace raseg::nd
