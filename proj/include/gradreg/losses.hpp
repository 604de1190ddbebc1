#pragma once

#include "gradreg/deformation.hpp"

#include <cstdint>

namespace gradreg {

enum class Similarity { MSE, NCC };

Similarity similarity_from(const std::string& name);
std::string similarity_name(Similarity s);

template <typename S>
struct LossWeights {
  S alpha = S(1);
  S beta = S(1);
  S gamma = S(0.01);
  std::vector<S> ds_weights{S(1), S(0.5), S(0.25)};

  void validate() const {
    if (!(alpha > S(0)) && !(beta > S(0)))
      throw std::invalid_argument("loss weights: alpha or beta must be positive");
    if (alpha < S(0) || beta < S(0) || gamma < S(0))
      throw std::invalid_argument("loss weights: weights must be non-negative");
  }
};

// Mean over voxels and channels of (a-b)^2.
template <typename S>
Tensor<S> mse(const Tensor<S>& a, const Tensor<S>& b);

// 1 - global normalized cross correlation. Constant inputs correlate to 0.
template <typename S>
Tensor<S> ncc(const Tensor<S>& a, const Tensor<S>& b);

// 1 - mean soft Dice over foreground classes of one-hot [K,...] tensors.
template <typename S>
Tensor<S> soft_dice(const Tensor<S>& pred_onehot, const Tensor<S>& target_onehot,
                    S eps = S(1e-5));

// soft_dice restricted to available foreground classes; unavailable classes
// contribute neither loss nor gradient. With no available foreground class
// the loss is 0 and *none_available is set.
template <typename S>
Tensor<S> partial_dice(const Tensor<S>& pred_onehot, const Tensor<S>& target_onehot,
                       const std::vector<uint8_t>& available, bool* none_available = nullptr,
                       S eps = S(1e-5));

// Mean squared deviation of increments from the identity increment 1, the
// zero-deformation state of this parameterization.
template <typename S>
Tensor<S> smoothness(const GradientField<S>& g);

// One-hot [K,D,H,W] tensor from a hard label grid (untracked constant).
template <typename S>
Tensor<S> one_hot(const std::vector<uint8_t>& labels, int D, int H, int W, int num_classes);

// Inputs to the symmetric objective, already lifted to tensors.
template <typename S>
struct RegistrationSample {
  Tensor<S> moving, fixed;                // [C,D,H,W] images
  Tensor<S> moving_onehot, fixed_onehot;  // [K,D,H,W]
  std::vector<uint8_t> available;         // joint per-class availability
};

struct LossTerm {
  const char* direction;  // "mf" or "fm"
  int level;
  double sim, sup, smo;
  double weighted;
};

template <typename S>
struct LossBreakdown {
  Tensor<S> total;
  std::vector<LossTerm> terms;
  // One line per term: "loss dir=mf level=0 sim=... sup=... smo=... weighted=..."
  std::string to_lines() const;
};

// Symmetric deep-supervised objective: per direction and per level l,
// ds_weights[l] * (alpha*sim + beta*sup + gamma*smo) with the level-l field
// integrated from raw_*[l]; both directions summed. raw maps run full
// resolution first, halving per level.
template <typename S>
LossBreakdown<S> total_loss(const RegistrationSample<S>& sample,
                            const std::vector<Tensor<S>>& raw_mf,
                            const std::vector<Tensor<S>>& raw_fm, const LossWeights<S>& w,
                            Similarity sim_kind);

}  // namespace gradreg
