#pragma once

#include "gradreg/volume.hpp"

namespace gradreg {

// Synthetic pair generation: blob volumes with known deformations stand in
// for clinical data at desk scale.
struct SynthSpec {
  std::array<int, 3> shape{32, 32, 32};
  int num_blobs = 4;
  int num_labels = 2;
  double amplitude = 0.3;  // in [0,1): fraction of the increment headroom
  int smooth_width = 4;    // box-filter radius for the increment noise
  double noise = 0.02;     // additive intensity noise on the moving image
  uint64_t seed = 1;

  void validate() const {
    for (int e : shape)
      if (e < 4) throw std::invalid_argument("synth: extents must be >= 4");
    if (num_blobs < 1 || num_labels < 1 || num_labels > num_blobs)
      throw std::invalid_argument("synth: need 1 <= num_labels <= num_blobs");
    if (!(amplitude >= 0.0 && amplitude < 1.0))
      throw std::invalid_argument("synth: amplitude must be in [0,1)");
    if (smooth_width < 1) throw std::invalid_argument("synth: smooth_width must be >= 1");
    if (noise < 0.0) throw std::invalid_argument("synth: noise must be >= 0");
  }
};

// splitmix64 stream; used to derive independent per-case seeds.
uint64_t splitmix64(uint64_t& state);

// Ground-truth increments 1 + amplitude * (constant + smooth noise), clipped
// to [1-amplitude, 1+amplitude], and their integrated field.
std::pair<GradientField<float>, DeformationField<float>> gen_field(const SynthSpec& spec,
                                                                   uint64_t seed);

struct SynthCase {
  Volume moving, fixed;
  LabelMap moving_seg, fixed_seg;
  DeformationField<float> phi_gt;
};

// The moving image is the crisp blob volume; the fixed image is the moving
// image pulled through phi_gt, so warp(moving, phi_gt) reproduces fixed and
// warp_nearest(moving_seg, phi_gt) equals fixed_seg by construction.
SynthCase gen_pair(const SynthSpec& spec, uint64_t seed);

struct ManifestEntry {
  std::string id;
  std::string moving, fixed, moving_seg, fixed_seg, field;
};

// Writes n cases beneath out_dir plus a manifest listing relative paths.
std::vector<ManifestEntry> gen_dataset(const SynthSpec& spec, int n, const std::string& out_dir);

void save_manifest(const std::vector<ManifestEntry>& entries, const std::string& path);
// Paths in the returned entries are resolved relative to the manifest.
std::vector<ManifestEntry> load_manifest(const std::string& path);

// Loads the four grids of one case (the field stays on disk for evaluation).
PairSample load_pair(const ManifestEntry& e);

}  // namespace gradreg
