#pragma once

#include "gradreg/tensor.hpp"

namespace gradreg {

// Elementwise binary ops. Operands must have identical shapes, or one side
// must be a 1-element tensor (gradient of that side reduces by summation).
template <typename S> Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b);
template <typename S> Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b);
template <typename S> Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b);
template <typename S> Tensor<S> divide(const Tensor<S>& a, const Tensor<S>& b);

// Tensor-constant arithmetic.
template <typename S> Tensor<S> scalar_mul(const Tensor<S>& a, S c);
template <typename S> Tensor<S> scalar_add(const Tensor<S>& a, S c);

// Elementwise unary ops.
template <typename S> Tensor<S> neg(const Tensor<S>& a);
template <typename S> Tensor<S> square(const Tensor<S>& a);
template <typename S> Tensor<S> sqrt(const Tensor<S>& a);
template <typename S> Tensor<S> sigmoid(const Tensor<S>& a);
// slope in (0,1); the gradient at exactly 0 is 1.
template <typename S> Tensor<S> leaky_relu(const Tensor<S>& a, S slope);

// Full reductions to a 1-element tensor.
template <typename S> Tensor<S> sum(const Tensor<S>& a);
template <typename S> Tensor<S> mean(const Tensor<S>& a);

// Shape ops on [C, spatial...] tensors.
template <typename S> Tensor<S> slice_channel(const Tensor<S>& a, int c);
template <typename S> Tensor<S> concat_channels(const std::vector<Tensor<S>>& parts);
// Repeats every voxel 2x along each spatial axis of a [C,D,H,W] tensor.
template <typename S> Tensor<S> upsample_nearest2x(const Tensor<S>& a);

// y[i] = sum_{k<i} x[k] along the given dim (y[0] = 0).
template <typename S> Tensor<S> cumsum_exclusive(const Tensor<S>& a, int axis);

// 3D convolution, input [Cin,D,H,W] * kernel [Cout,Cin,k,k,k] + bias [Cout].
// Output extent per spatial axis: (E + 2*padding - k)/stride + 1.
template <typename S>
Tensor<S> conv3d(const Tensor<S>& input, const Tensor<S>& kernel, const Tensor<S>& bias,
                 int stride, int padding);

// Per-channel standardisation of a [C,D,H,W] tensor: (x - mean) / sqrt(var + eps).
template <typename S> Tensor<S> instance_norm(const Tensor<S>& x, S eps);

// 8-neighbour interpolation of vol [C,D,H,W] at coords [3,Do,Ho,Wo] given in
// voxel units (component order z,y,x). Out-of-bounds coordinates clamp to the
// border; gradients flow to both vol and coords.
template <typename S> Tensor<S> trilinear_sample(const Tensor<S>& vol, const Tensor<S>& coords);

}  // namespace gradreg
