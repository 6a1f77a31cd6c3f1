#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "advbyte/params.hpp"

namespace advbyte::ad {

struct AdamConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Moments for a fixed list of parameter names.
struct AdamState {
  AdamConfig config;
  std::vector<std::string> names;
  std::vector<Tensor> first_moment;
  std::vector<Tensor> second_moment;
  std::size_t step = 0;

  AdamState() = default;
  AdamState(AdamConfig cfg, const ParamSet& params, std::vector<std::string> managed);
};

/// Standard Adam with bias correction over the managed parameters. Names
/// missing from `grads` are treated as zero gradients.
void adam_step(AdamState& state, ParamSet& params, const ParamSet& grads);

struct GradCheckOptions {
  double step = 1e-5;
  /// Relative error is |analytic - numeric| / max(|analytic|, |numeric|, abs_floor).
  double abs_floor = 1e-6;
  /// Coordinates whose one-sided slopes disagree by more than this fraction
  /// sit on a kink (max-pool tie, ReLU at 0) and are skipped.
  double kink_tolerance = 1e-2;
  /// 0 checks every coordinate; otherwise a seeded subset per tensor.
  std::size_t max_coords_per_tensor = 0;
  std::uint64_t seed = 0;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t skipped = 0;
  std::string worst;  // "<tensor>[<index>]"

  bool passed(double tolerance) const { return checked > 0 && max_rel_error < tolerance; }
};

/// Compares `analytic` gradients of `loss` against central differences by
/// perturbing the tensors of `inputs` in place (restored on return).
GradCheckReport grad_check(const std::function<double()>& loss, std::span<Tensor* const> inputs,
                           std::span<const Tensor> analytic, std::span<const std::string> labels = {},
                           const GradCheckOptions& options = {});

}  // namespace advbyte::ad
