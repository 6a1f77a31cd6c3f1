#include "advbyte/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "advbyte/error.hpp"

namespace advbyte::ad {

AdamState::AdamState(AdamConfig cfg, const ParamSet& params, std::vector<std::string> managed)
    : config(cfg), names(std::move(managed)) {
  for (const auto& name : names) {
    first_moment.emplace_back(params.at(name).shape());
    second_moment.emplace_back(params.at(name).shape());
  }
}

void adam_step(AdamState& state, ParamSet& params, const ParamSet& grads) {
  const AdamConfig& c = state.config;
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bias1 = 1.0 - std::pow(c.beta1, t);
  const double bias2 = 1.0 - std::pow(c.beta2, t);
  for (std::size_t i = 0; i < state.names.size(); ++i) {
    Tensor& p = params.at(state.names[i]);
    Tensor& m = state.first_moment[i];
    Tensor& v = state.second_moment[i];
    require_same_shape(p, m, "adam_step moments");
    if (!grads.contains(state.names[i])) continue;
    const Tensor& g = grads.at(state.names[i]);
    require_same_shape(p, g, "adam_step gradient");
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
      v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
      p[j] -= c.learning_rate * (m[j] / bias1) / (std::sqrt(v[j] / bias2) + c.epsilon);
    }
  }
}

GradCheckReport grad_check(const std::function<double()>& loss, std::span<Tensor* const> inputs,
                           std::span<const Tensor> analytic, std::span<const std::string> labels,
                           const GradCheckOptions& options) {
  if (inputs.size() != analytic.size()) {
    fail(ErrorKind::ShapeMismatch, "grad_check: one analytic gradient per input required");
  }
  GradCheckReport report;
  std::mt19937_64 rng(options.seed);
  const double h = options.step;
  const double f0 = loss();

  for (std::size_t t = 0; t < inputs.size(); ++t) {
    Tensor& x = *inputs[t];
    require_same_shape(x, analytic[t], "grad_check");
    std::vector<std::size_t> coords(x.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (options.max_coords_per_tensor != 0 && coords.size() > options.max_coords_per_tensor) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(options.max_coords_per_tensor);
      std::sort(coords.begin(), coords.end());
    }
    for (std::size_t j : coords) {
      const double saved = x[j];
      x[j] = saved + h;
      const double fp = loss();
      x[j] = saved - h;
      const double fm = loss();
      x[j] = saved;

      const double right = (fp - f0) / h;
      const double left = (f0 - fm) / h;
      const double slope_scale = std::max({std::abs(right), std::abs(left), options.abs_floor});
      if (std::abs(right - left) > options.kink_tolerance * slope_scale) {
        // Smooth curvature shrinks the slope gap with the step; a kink at x does not.
        const double hs = h / 8.0;
        x[j] = saved + hs;
        const double fps = loss();
        x[j] = saved - hs;
        const double fms = loss();
        x[j] = saved;
        const double gap = (fps - f0) / hs - (f0 - fms) / hs;
        if (std::abs(gap) > 0.5 * std::abs(right - left)) {
          ++report.skipped;
          continue;
        }
      }
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = analytic[t][j];
      const double err =
          std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), options.abs_floor});
      ++report.checked;
      if (err > report.max_rel_error || report.worst.empty()) {
        report.max_rel_error = std::max(err, report.max_rel_error);
        report.worst = (t < labels.size() ? labels[t] : "input" + std::to_string(t)) + "[" +
                       std::to_string(j) + "]";
      }
    }
  }
  return report;
}

}  // namespace advbyte::ad
