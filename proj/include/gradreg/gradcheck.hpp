#pragma once

#include "gradreg/tensor.hpp"

#include <random>

namespace gradreg {

struct GradCheckCase {
  std::string op;
  std::string precision;  // "f32" or "f64"
  bool pass = false;
  double max_abs_err = 0.0;
  double max_rel_err = 0.0;
  int seeds = 0;
  std::string detail;
};

struct GradCheckOptions {
  uint64_t seed = 1;
  int seeds_per_op = 20;
  // Test hook: analytic gradients of the named op are perturbed before
  // comparison, so the checker must flag it.
  std::string corrupt_op;
};

// Central-difference gradient of a scalar functional. The functional is
// re-evaluated with each element of `leaf` displaced by +-step; leaf values
// are restored afterwards.
template <typename S>
ArrayX<S> fd_gradient(const std::function<S()>& eval, Tensor<S>& leaf, S step);

// Runs the registered finite-difference suite over every differentiable op
// and the composite losses, in double then single precision.
std::vector<GradCheckCase> run_gradcheck_suite(const GradCheckOptions& opts);

bool all_passed(const std::vector<GradCheckCase>& cases);

std::string gradcheck_report(const std::vector<GradCheckCase>& cases);

}  // namespace gradreg
