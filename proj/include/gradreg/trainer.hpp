#pragma once

#include "gradreg/losses.hpp"
#include "gradreg/metrics.hpp"
#include "gradreg/optimizer.hpp"
#include "gradreg/synth.hpp"

#include <iosfwd>

namespace gradreg {

struct TrainConfig {
  NetConfig<float> net;
  float lr = 1e-4f;
  int batch = 1;
  int epochs = 20;
  int steps = 0;  // > 0 overrides epochs
  int patch = 0;  // 0 = whole volume
  Similarity similarity = Similarity::MSE;
  LossWeights<float> weights;
  bool augment = false;
  uint64_t seed = 1;
  int checkpoint_every = 0;  // epochs between periodic checkpoints (0 = final only)
  int eval_every = 0;        // steps between held-out evaluations (0 = off)
  float holdout = 0.f;       // fraction of cases reserved for evaluation
  bool train_on_all = false; // fold the held-out cases back into training
  std::string pretrain_path;

  void validate() const;
  std::string to_string() const;
};

struct TrainResult {
  std::string checkpoint_path;
  long steps = 0;
  double final_loss = 0.0;
};

// Full training loop over a dataset manifest: sample pair, augment, crop,
// symmetric forward, deep-supervised symmetric loss, backward, Adam.
// Line-delimited progress records go to `log`.
TrainResult train(const TrainConfig& cfg, const std::string& manifest_path,
                  const std::string& out_dir, std::ostream& log);

struct RegistrationResult {
  DeformationField<float> phi_mf, phi_fm;
  Volume moving_warped, fixed_warped;
};

// Whole-volume inference when the extents divide the network stride;
// otherwise sliding-window with raw gradient maps averaged across windows
// before one global activation + integration (preserves monotonicity).
RegistrationResult register_pair(const RegNet<float>& net, const Parameters<float>& params,
                                 const Volume& moving, const Volume& fixed, int patch = 0);

// Raw full-resolution gradient maps for both directions (the register_pair
// machinery without activation); exposed for window-averaging checks.
std::pair<Tensor<float>, Tensor<float>> predict_raw(const RegNet<float>& net,
                                                    const Parameters<float>& params,
                                                    const Volume& moving, const Volume& fixed,
                                                    int patch);

// Mean foreground dice over cases after nearest-warping the moving labels
// with the predicted field.
double eval_mean_dice(const RegNet<float>& net, const Parameters<float>& params,
                      const std::vector<PairSample>& cases, int patch = 0);

// Mean symmetric training loss over cases (no gradients).
double eval_loss(const RegNet<float>& net, const Parameters<float>& params,
                 const std::vector<PairSample>& cases, const LossWeights<float>& w,
                 Similarity sim);

// Training-ready tensors for one pair.
RegistrationSample<float> make_sample(const PairSample& pair);

}  // namespace gradreg
