#pragma once

#include <span>
#include <vector>

#include "effnet/tensor.hpp"

namespace effnet {

struct Conv2dParams {
  int stride = 1;
  int padding = 0;
  int groups = 1;
};

/// Output side length of a convolution: floor((in + 2*pad - k) / stride) + 1.
std::size_t conv_output_size(std::size_t in, std::size_t kernel, int stride,
                             int padding);

/// Cross-correlation of input [N,Cin,H,W] with kernel [Cout,Cin/groups,kh,kw].
/// Zero padding. Depthwise kernels (groups == Cin == Cout) take a direct path,
/// everything else goes through im2col + GEMM.
Tensor conv2d(const Tensor& input, const Tensor& kernel, Conv2dParams params = {});

enum class Activation { relu, sigmoid, silu };

Tensor activation(const Tensor& x, Activation kind);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor silu(const Tensor& x);

/// Numerically stable logistic function.
double sigmoid_scalar(double x);

/// Mean over the H x W plane: [N,C,H,W] -> [N,C,1,1].
Tensor reduce_mean_spatial(const Tensor& x);

/// x [N,Din] times weights^T [Din,Dout], plus optional bias [Dout].
Tensor dense(const Tensor& x, const Tensor& weights, const Tensor& bias = Tensor());

Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

/// Per-channel x * scale[c] + shift[c] on [N,C,H,W].
Tensor channel_affine(const Tensor& x, const Tensor& scale, const Tensor& shift);

/// silu(channel_affine(x, scale, shift)) in one pass.
Tensor channel_affine_silu(const Tensor& x, const Tensor& scale, const Tensor& shift);

/// Broadcast multiply x [N,C,H,W] by per-sample channel weights s [N,C].
Tensor channel_scale(const Tensor& x, const Tensor& s);

/// Concatenate [N,Di] matrices along the feature axis, in argument order.
Tensor concat_features(const std::vector<Tensor>& parts);

/// Mean binary cross-entropy of logits [N] or [N,1] against targets in [0,1],
/// computed as max(z,0) - z*t + log1p(exp(-|z|)).
Tensor bce_with_logits(const Tensor& logits, std::span<const double> targets);

}  // namespace effnet
