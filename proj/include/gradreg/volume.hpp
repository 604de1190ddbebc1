#pragma once

#include "gradreg/deformation.hpp"
#include "gradreg/tensor.hpp"

#include <array>
#include <cstdint>
#include <optional>
#include <random>
#include <string>

namespace gradreg {

enum class Modality { CT, MRI, SYNTH };

std::string modality_name(Modality m);
Modality modality_from(const std::string& name);

// Dense scalar grid [C,D,H,W] with voxel spacing in millimetres.
struct Volume {
  Tensor<float> data;
  std::array<float, 3> spacing{1.f, 1.f, 1.f};
  Modality modality = Modality::SYNTH;

  int channels() const { return data.dim(0); }
  int depth() const { return data.dim(1); }
  int height() const { return data.dim(2); }
  int width() const { return data.dim(3); }

  void validate() const;
};

// Integer-labelled grid with a per-label availability mask for partial
// (noisy) annotations. available[0] (background) is always true.
struct LabelMap {
  std::vector<uint8_t> labels;
  std::array<int, 3> dims{0, 0, 0};
  int num_classes = 0;
  std::vector<uint8_t> available;
  std::array<float, 3> spacing{1.f, 1.f, 1.f};

  long size() const { return static_cast<long>(dims[0]) * dims[1] * dims[2]; }
  void validate() const;
};

// --- .gvol container -------------------------------------------------------
// Line-oriented UTF-8 header terminated by a blank line, then the raw buffer
// little-endian in [C,]D,H,W order, W fastest. dtype f32 for images and
// deformation fields (which carry `field phi`), u8 for label maps.

void save_volume(const Volume& v, const std::string& path);
void save_labels(const LabelMap& m, const std::string& path);
void save_field(const DeformationField<float>& phi, const std::array<float, 3>& spacing,
                const std::string& path);

enum class GvolKind { Image, Labels, Field };
GvolKind peek_gvol_kind(const std::string& path);
Volume load_volume(const std::string& path);
LabelMap load_labels(const std::string& path);
DeformationField<float> load_field(const std::string& path);

// --- normalisation ---------------------------------------------------------

struct CtWindow {
  float low, high;
};

// Default CT windows (wide / soft-tissue / liver-ish), in HU. The reference
// method does not publish its choice, so these stay configurable.
inline constexpr std::array<CtWindow, 3> kDefaultCtWindows{
    CtWindow{-1000.f, 400.f}, CtWindow{-160.f, 240.f}, CtWindow{40.f, 560.f}};

// Per-window clamp + min-max to [0,1]; one output channel per window.
Volume normalize_ct(const Volume& v, const std::array<CtWindow, 3>& windows = kDefaultCtWindows);

// Z-score, clamp to [-5,5], min-max to [0,1]. A constant volume maps to 0.5.
Volume normalize_mri(const Volume& v);

// --- paired sampling -------------------------------------------------------

struct PairSample {
  Volume moving, fixed;
  LabelMap moving_seg, fixed_seg;
};

// Crops a cubic patch at `origin` from all four grids (border-replicated when
// the patch exceeds an extent). origin = nullopt draws a uniform origin.
PairSample extract_patch(const PairSample& pair, int patch,
                         std::optional<std::array<int, 3>> origin, std::mt19937_64& rng);

// Lossless joint augmentation: axis flips, quarter-turn rotations and small
// integer translations. Rotation is rot_quarters turns in the plane normal to
// rot_axis; odd turns require the two rotated extents to match.
struct AugmentTransform {
  std::array<bool, 3> flip{false, false, false};
  int rot_axis = 0;
  int rot_quarters = 0;
  std::array<int, 3> shift{0, 0, 0};
};

AugmentTransform random_augment(const std::array<int, 3>& extents, uint64_t seed);
PairSample apply_augment(const PairSample& pair, const AugmentTransform& t);

// Applies one seeded random transform jointly to all four grids.
PairSample augment_pair(const PairSample& pair, uint64_t seed);

}  // namespace gradreg
