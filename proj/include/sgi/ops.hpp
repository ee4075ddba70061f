#pragma once

#include <array>
#include <vector>

#include "sgi/autograd.hpp"

// Differentiable tensor operations. Image tensors are NCHW.
namespace sgi::nn {

struct ConvOptions {
  int stride = 1;
  int padding = 0;
  int dilation = 1;
};

inline int conv_out_size(int in, int kernel, const ConvOptions& o) {
  return (in + 2 * o.padding - o.dilation * (kernel - 1) - 1) / o.stride + 1;
}

/// x (N,Cin,H,W), w (Cout,Cin,K,K), b (Cout) or undefined. Zero padding.
Var conv2d(const Var& x, const Var& w, const Var& b, const ConvOptions& opt);
/// x (N,Cin,H,W), w (Cin,Cout,K,K). Output size (H-1)*s - 2p + K.
Var conv_transpose2d(const Var& x, const Var& w, const Var& b, int stride, int padding);
/// x (N,F), w (O,F), b (O).
Var linear(const Var& x, const Var& w, const Var& b);

/// Parameter-free normalization per (n, c) over H, W.
Var instance_norm(const Var& x, double eps = 1e-5);
/// Parameter-free normalization per c over N, H, W.
Var batch_norm(const Var& x, double eps = 1e-5);

Var relu(const Var& x);
Var leaky_relu(const Var& x, double slope = 0.2);
Var elu(const Var& x);
Var sigmoid(const Var& x);
Var tanh(const Var& x);
Var exp(const Var& x);
/// log(x + eps)
Var log(const Var& x, double eps = 0.0);
Var abs(const Var& x);
Var square(const Var& x);

/// Softmax over the channel axis of an NCHW tensor.
Var softmax_channels(const Var& x);
/// (N, C*r*r, H, W) -> (N, C, H*r, W*r)
Var pixel_shuffle(const Var& x, int r);

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& x, double s);
Var add_scalar(const Var& x, double s);
/// x (N,C,H,W) * m (N,1,H,W)
Var mul_bcast(const Var& x, const Var& m);
/// x (N,C,H,W) / d (N,1,H,W)
Var div_bcast(const Var& x, const Var& d);
/// (N,C,H,W) -> (N,1,H,W)
Var sum_channels(const Var& x);

Var sum(const Var& x);
Var mean(const Var& x);
Var reshape(const Var& x, Shape shape);

Var concat_channels(const std::vector<Var>& xs);
Var concat_batch(const std::vector<Var>& xs);
Var slice_batch(const Var& x, int64_t begin, int64_t count);
Var slice_channels(const Var& x, int64_t begin, int64_t count);

/// Average pooling with zero padding excluded from the divisor.
Var avg_pool2d(const Var& x, int kernel, int stride, int padding);
/// Bilinear resize with half-pixel centers.
Var upsample_bilinear(const Var& x, int out_h, int out_w);

/// Per-sample Gram matrix psi psi^T / (C*H*W): (N,C,H,W) -> (N,C,C).
Var gram(const Var& x);

/// Affine map of the canonical frame into image pixels: X = a*u + b*v + tx, Y = c*u + d*v + ty.
using Affine = std::array<double, 6>;
/// Inverse-warp nearest sampling of canonical maps m (N,1,h,w) onto an (out_h, out_w) canvas.
Var place_canonical(const Var& m, const std::vector<Affine>& thetas, int out_h, int out_w);

/// w / sigma with sigma = u^T W v, W = w viewed as (rows, numel/rows); u, v held constant.
Var spectral_normalize(const Var& w, const Tensor& u, const Tensor& v);

}  // namespace sgi::nn
