#pragma once

#include <array>
#include <span>
#include <utility>

#include "raseg/ndiff/graph.hpp"

namespace raseg::nd {

struct ConvAttrs {
  std::array<int, 3> stride{1, 1, 1};
  std::array<int, 3> pad{0, 0, 0};
};

struct TConvAttrs {
  std::array<int, 3> stride{1, 1, 1};
  std::array<int, 3> pad{0, 0, 0};
  std::array<int, 3> out_pad{0, 0, 0};
};

/// floor((n + 2p - k) / s) + 1
int conv_out_size(int n, int k, int s, int p);
/// (n - 1) s - 2p + k + out_pad
int tconv_out_size(int n, int k, int s, int p, int out_pad);

// Every op validates operand shapes and throws DimensionError naming the
// offending operand. Bias arguments are optional (pass Var{}).

/// Cross-correlation. x: (N,C,D,H,W), w: (O,C,kd,kh,kw), b: (O,1,1,1,1).
template <typename T>
Var conv3d(Graph<T>& g, Var x, Var w, Var b, const ConvAttrs& attrs);

/// Adjoint of conv3d. x: (N,Cin,...), w: (Cin,Cout,kd,kh,kw), b: (Cout,1,1,1,1).
template <typename T>
Var tconv3d(Graph<T>& g, Var x, Var w, Var b, const TConvAttrs& attrs);

/// Per (sample, channel) normalisation over (d,h,w) with affine gamma/beta
/// of shape (C,1,1,1,1).
template <typename T>
Var instance_norm(Graph<T>& g, Var x, Var gamma, Var beta, double eps = 1e-5);

/// x if x >= 0 else a_c * x; a: (C,1,1,1,1).
template <typename T>
Var prelu(Graph<T>& g, Var x, Var a);

/// Drops whole (sample, channel) maps with probability `rate` when the graph
/// is in training mode; kept maps are scaled by 1/(1-rate). Identity in eval.
template <typename T>
Var spatial_dropout(Graph<T>& g, Var x, double rate);

template <typename T>
Var sigmoid(Graph<T>& g, Var x);

template <typename T>
Var softmax_channel(Graph<T>& g, Var x);

template <typename T>
Var add(Graph<T>& g, Var a, Var b);

template <typename T>
Var mul(Graph<T>& g, Var a, Var b);

template <typename T>
Var concat_channel(Graph<T>& g, std::span<const Var> parts);

/// Channels [begin, end).
template <typename T>
Var slice_channel(Graph<T>& g, Var x, int begin, int end);

/// Depth slice `index` as a depth-1 tensor.
template <typename T>
Var slice_depth(Graph<T>& g, Var x, int index);

template <typename T>
Var concat_depth(Graph<T>& g, std::span<const Var> parts);

/// ConvLSTM step with 2D same-padded convolutions over (height, width).
/// x: (N,Cin,1,H,W); h, c: (N,Hc,1,H,W); wx: (4Hc,Cin,1,kh,kw);
/// wh: (4Hc,Hc,1,kh,kw); b: (4Hc,1,1,1,1). Gate order i, f, o, g.
/// Returns (h_t, c_t).
template <typename T>
std::pair<Var, Var> convlstm_cell(Graph<T>& g, Var x, Var h, Var c, Var wx, Var wh, Var b);

/// Mean over the selected spatial axes (depth, height, width), keeping them
/// as size-1 dimensions.
template <typename T>
Var mean_axes(Graph<T>& g, Var x, std::array<bool, 3> axes);

/// (N, C*D*H*W, 1, 1, 1), channel-major.
template <typename T>
Var flatten(Graph<T>& g, Var x);

// Non-graph kernels, shared by fused ops.
namespace kernels {

template <typename T>
Tensor5<T> conv_forward(const Tensor5<T>& x, const Tensor5<T>& w, const Tensor5<T>* b, const ConvAttrs& attrs);

template <typename T>
void conv_backward(const Tensor5<T>& x, const Tensor5<T>& w, const Tensor5<T>& gy, const ConvAttrs& attrs,
                   Tensor5<T>* gx, Tensor5<T>* gw, Tensor5<T>* gb);

}  // namespace kernels

}  // namespace raseg::nd
