#pragma once

#include "gradreg/ops.hpp"

namespace gradreg {

// Upper bound for activated grid increments. Identity (increment 1) sits at
// the sigmoid midpoint, leaving symmetric headroom for compression/expansion.
inline constexpr double kMaxIncrement = 2.0;

// Per-axis positive grid increments [3,D,H,W] in voxel units; component a
// holds the step of the sampling coordinate along axis a.
template <typename S>
struct GradientField {
  Tensor<S> g;
};

// Per-voxel sampling coordinates [3,D,H,W] in voxel units; phi[a] gives the
// source coordinate along axis a for each target voxel.
template <typename S>
struct DeformationField {
  Tensor<S> phi;
};

// g = kMaxIncrement * sigmoid(raw); raw == 0 maps to the identity increment.
template <typename S>
GradientField<S> activate_increments(const Tensor<S>& raw);

// phi[a] = exclusive prefix sum of g[a] along spatial axis a. The field is
// anchored at the volume origin (phi[...,0] = 0) with no recentering.
template <typename S>
DeformationField<S> integrate(const GradientField<S>& g);

// phi[a] = coordinate along axis a.
template <typename S>
DeformationField<S> identity_field(int D, int H, int W);

// Differentiable warp: samples vol at phi (trilinear, border clamp).
template <typename S>
Tensor<S> warp_linear(const Tensor<S>& vol, const DeformationField<S>& phi);

// Nearest-neighbour warp for hard labels: rounds coordinates, clamps to the
// grid. Values come straight from the source, so the label set is preserved.
template <typename S>
std::vector<uint8_t> warp_nearest(const std::vector<uint8_t>& labels, int D, int H, int W,
                                  const DeformationField<S>& phi);

// det of the spatial Jacobian of phi per voxel: central differences in the
// interior, one-sided at borders. Untracked.
template <typename S>
Tensor<S> jacobian_det(const DeformationField<S>& phi);

// 2x average pooling of a [C,D,H,W] tensor; odd extents are padded by border
// replication first. Untracked (used to build supervision targets).
template <typename S>
Tensor<S> avg_pool2(const Tensor<S>& x);

// Majority vote over 2x2x2 blocks (ties resolved toward the smaller label).
std::vector<uint8_t> majority_pool2(const std::vector<uint8_t>& labels, int D, int H, int W,
                                    int num_classes, int& Dp, int& Hp, int& Wp);

// Image pyramid for deep supervision: element 0 is the input, element l is
// pooled 2^l times.
template <typename S>
std::vector<Tensor<S>> downscale_pyramid(const Tensor<S>& x, int levels);

extern template struct GradientField<float>;
extern template struct GradientField<double>;
extern template struct DeformationField<float>;
extern template struct DeformationField<double>;

}  // namespace gradreg
