#pragma once

#include "gradreg/network.hpp"

namespace gradreg {

template <typename S>
struct AdamConfig {
  S lr = S(1e-4);
  S beta1 = S(0.9);
  S beta2 = S(0.999);
  S eps = S(1e-8);
};

// Bias-corrected Adam over a Parameters set. Moment buffers mirror the
// parameter shapes; step counts from zero.
template <typename S>
class Adam {
 public:
  explicit Adam(AdamConfig<S> cfg) : cfg_(cfg) {}

  const AdamConfig<S>& config() const { return cfg_; }
  long step_count() const { return step_; }

  // Applies one update from the gradients recorded on `tape`. Any non-finite
  // gradient aborts the step (no parameter is touched) and reports the
  // offending parameter by name.
  void step(Parameters<S>& params, Tape<S>& tape);

 private:
  void ensure_state(const Parameters<S>& params);

  AdamConfig<S> cfg_;
  std::vector<ArrayX<S>> m_, v_;
  long step_ = 0;
};

extern template class Adam<float>;
extern template class Adam<double>;

}  // namespace gradreg
