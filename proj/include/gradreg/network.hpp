#pragma once

#include "gradreg/ops.hpp"

#include <unordered_map>

namespace gradreg {

template <typename S>
struct NetConfig {
  std::vector<int> channels{8, 16, 16, 16};  // per encoder block
  int in_channels = 1;
  int sup_levels = 3;  // deep-supervision heads, full resolution first
  S leaky_slope = S(0.2);

  int blocks() const { return static_cast<int>(channels.size()); }
  int divisor() const { return 1 << blocks(); }

  void validate() const {
    if (channels.size() < 2) throw std::invalid_argument("net config: needs >= 2 encoder blocks");
    for (int c : channels)
      if (c < 1) throw std::invalid_argument("net config: channels must be positive");
    if (in_channels < 1) throw std::invalid_argument("net config: in_channels must be positive");
    if (sup_levels < 1 || sup_levels > blocks())
      throw std::invalid_argument("net config: sup_levels must be in [1, blocks]");
    if (!(leaky_slope > S(0) && leaky_slope < S(1)))
      throw std::invalid_argument("net config: leaky slope must be in (0,1)");
  }

  std::string to_string() const;
};

NetConfig<float> net_config_from_string(const std::string& line);

// Ordered name -> tensor map; iteration order is insertion order so updates
// and checkpoints are deterministic.
template <typename S>
class Parameters {
 public:
  void add(const std::string& name, Tensor<S> t);
  bool has(const std::string& name) const { return index_.count(name) != 0; }
  Tensor<S>& at(const std::string& name);
  const Tensor<S>& at(const std::string& name) const;
  int count() const { return static_cast<int>(names_.size()); }
  const std::string& name(int i) const { return names_[i]; }
  Tensor<S>& tensor(int i) { return tensors_[i]; }
  const Tensor<S>& tensor(int i) const { return tensors_[i]; }
  long total_scalars() const;
  void watch_all(Tape<S>& tape);
  bool all_finite() const;

 private:
  std::vector<std::string> names_;
  std::vector<Tensor<S>> tensors_;
  std::unordered_map<std::string, int> index_;
};

// Shared-encoder registration net. Each volume passes independently through
// the encoder; encodings merge by subtraction; one decoder, run on m and -m,
// predicts the raw spatial-gradient maps of both directions.
template <typename S>
class RegNet {
 public:
  explicit RegNet(NetConfig<S> cfg);

  const NetConfig<S>& config() const { return cfg_; }

  // Fan-in scaled uniform init; gradient heads start at zero so the initial
  // prediction is the identity deformation.
  static Parameters<S> init_parameters(const NetConfig<S>& cfg, uint64_t seed);

  // f_l has channels[l] channels at 1/2^(l+1) resolution, l = 0..blocks-1.
  std::vector<Tensor<S>> encode(const Parameters<S>& p, const Tensor<S>& vol) const;

  // m_l = eM_l - eF_l at every level.
  std::vector<Tensor<S>> merge(const std::vector<Tensor<S>>& eM,
                               const std::vector<Tensor<S>>& eF) const;

  // Raw gradient maps at supervision levels, full resolution first.
  std::vector<Tensor<S>> decode(const Parameters<S>& p, const std::vector<Tensor<S>>& m) const;

  // (raw M->F, raw F->M); the encoder runs once per volume, the decoder twice
  // on m and -m. Swapping (M,F) swaps the outputs exactly.
  std::pair<std::vector<Tensor<S>>, std::vector<Tensor<S>>> symmetric_forward(
      const Parameters<S>& p, const Tensor<S>& M, const Tensor<S>& F) const;

 private:
  NetConfig<S> cfg_;
};

// --- checkpoints ------------------------------------------------------------
// Text header (config echo, step count, name->shape table) terminated by a
// blank line, then concatenated little-endian f32 buffers in table order.

void save_checkpoint(const std::string& path, const NetConfig<float>& cfg,
                     const Parameters<float>& params, long step);

struct Checkpoint {
  NetConfig<float> config;
  Parameters<float> params;
  long step = 0;
};

Checkpoint load_checkpoint(const std::string& path);

struct RestoreReport {
  std::vector<std::string> matched;
  std::vector<std::string> missing;     // wanted but absent from the checkpoint
  std::vector<std::string> unexpected;  // checkpoint names with no local tensor
  std::vector<std::string> shape_mismatch;
  std::string to_string() const;
};

// Name-matched partial restore; mismatches are reported, not fatal.
RestoreReport restore_into(Parameters<float>& dst, const Parameters<float>& src);

}  // namespace gradreg
