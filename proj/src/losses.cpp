#include "advbyte/losses.hpp"

#include <algorithm>
#include <string>
#include <vector>

#include "advbyte/error.hpp"

namespace advbyte::loss {

using ad::Graph;
using ad::Shape;
using ad::Tensor;
using ad::Var;

void LossConfig::validate() const {
  if (!(temperature > 0)) fail(ErrorKind::InvalidConfig, "temperature must be > 0");
  if (!(lambda_ac >= 0 && lambda_ac <= 1) || !(lambda_ad >= 0 && lambda_ad <= 1)) {
    fail(ErrorKind::InvalidConfig, "loss weights must lie in [0,1]");
  }
}

namespace {

void check_rows(const Graph& g, Var x, std::span<const int> labels, const char* what) {
  const Tensor& v = g.value(x);
  if (v.rank() != 2 || v.dim(0) != labels.size()) {
    fail(ErrorKind::ShapeMismatch, std::string(what) + ": expected one row per label, got " +
                                       ad::shape_string(v.shape()) + " for " +
                                       std::to_string(labels.size()) + " labels");
  }
}

Tensor one_hot(std::span<const int> labels, std::size_t classes) {
  Tensor out(Shape{labels.size(), classes});
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes) {
      fail(ErrorKind::ShapeMismatch, "label " + std::to_string(labels[i]) + " out of range");
    }
    out.at(i, static_cast<std::size_t>(labels[i])) = 1.0;
  }
  return out;
}

struct Similarity {
  Var shifted;  // S - rowmax(S), rowmax held constant
  Var exp_shifted;
};

// S = Z Z^T / tau on (optionally normalized) rows. Subtracting a per-row
// constant leaves both contrastive losses unchanged, so the row max is
// treated as a constant for stability.
Similarity similarity(Graph& g, Var z, const LossConfig& config) {
  const Var rows = config.normalize ? ad::l2_normalize_rows(g, z) : z;
  const Var s = ad::scale(g, ad::matmul(g, rows, ad::transpose(g, rows)), 1.0 / config.temperature);
  const Tensor& sv = g.value(s);
  const std::size_t n = sv.dim(0);
  Tensor neg_max(Shape{n});
  for (std::size_t i = 0; i < n; ++i) {
    neg_max[i] = -*std::max_element(sv.data() + i * n, sv.data() + (i + 1) * n);
  }
  const Var shifted = ad::add_colwise(g, s, g.input(std::move(neg_max)));
  return {shifted, ad::exp(g, shifted)};
}

struct Masks {
  Tensor negatives;  // [n,n] 1 where labels differ
  Tensor positive_weights;  // [n,n] 1/(|P(i)| * anchors) on positives of anchors
  std::size_t anchors = 0;
  bool any_negative = false;
};

Masks build_masks(std::span<const int> labels) {
  const std::size_t n = labels.size();
  Masks m{Tensor(Shape{n, n}), Tensor(Shape{n, n}), 0, false};
  std::vector<std::size_t> positives(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (labels[i] != labels[j]) {
        m.negatives.at(i, j) = 1.0;
        m.any_negative = true;
      } else if (i != j) {
        ++positives[i];
      }
    }
    if (positives[i] > 0) ++m.anchors;
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (positives[i] == 0) continue;
    const double w = 1.0 / (static_cast<double>(positives[i]) * static_cast<double>(m.anchors));
    for (std::size_t j = 0; j < n; ++j) {
      if (i != j && labels[i] == labels[j]) m.positive_weights.at(i, j) = w;
    }
  }
  return m;
}

ContrastiveLoss degenerate_loss(Graph& g, const char* name) {
  warn("losses", std::string(name) + ": degenerate batch (no out-group rows), loss set to 0");
  return {g.input(Tensor::scalar(0.0)), 0, true};
}

}  // namespace

ContrastiveLoss selection_cl_loss(Graph& g, Var logits, std::span<const int> labels,
                                  const LossConfig& config) {
  check_rows(g, logits, labels, "selection_cl_loss");
  if (labels.size() < 2) return degenerate_loss(g, "selection_cl_loss");
  Masks masks = build_masks(labels);
  if (!masks.any_negative) return degenerate_loss(g, "selection_cl_loss");
  if (masks.anchors == 0) return {g.input(Tensor::scalar(0.0)), 0, false};

  // term(i,s) = log sum_{j in N(i)} e^{S_ij} - S_is
  const Similarity sim = similarity(g, logits, config);
  const Var neg_sum = ad::sum_cols(g, ad::mul(g, sim.exp_shifted, g.input(std::move(masks.negatives))));
  const Var terms = ad::add_colwise(g, ad::scale(g, sim.shifted, -1.0), ad::log(g, neg_sum));
  const Var loss = ad::sum(g, ad::mul(g, terms, g.input(std::move(masks.positive_weights))));
  return {loss, masks.anchors, false};
}

ContrastiveLoss ac_loss(Graph& g, Var projections, std::span<const int> labels,
                        const LossConfig& config) {
  check_rows(g, projections, labels, "ac_loss");
  if (labels.size() < 2) return degenerate_loss(g, "ac_loss");
  Masks masks = build_masks(labels);
  if (!masks.any_negative) return degenerate_loss(g, "ac_loss");
  if (masks.anchors == 0) return {g.input(Tensor::scalar(0.0)), 0, false};

  // term(i,s) = log(e^{S_is} + sum_{j in N_i} e^{S_ij}) - S_is
  constexpr double kTiny = 1e-300;
  const Similarity sim = similarity(g, projections, config);
  const Var neg_sum = ad::sum_cols(g, ad::mul(g, sim.exp_shifted, g.input(std::move(masks.negatives))));
  const Var denom = ad::add_colwise(g, sim.exp_shifted, neg_sum);
  const Var terms = ad::sub(g, ad::log_clamped(g, denom, kTiny), sim.shifted);
  const Var loss = ad::sum(g, ad::mul(g, terms, g.input(std::move(masks.positive_weights))));
  return {loss, masks.anchors, false};
}

Var at_loss(Graph& g, Var probs, Var probs_adv, std::span<const int> labels) {
  check_rows(g, probs, labels, "at_loss");
  require_same_shape(g.value(probs), g.value(probs_adv), "at_loss");
  const Var hot = g.input(one_hot(labels, g.value(probs).dim(1)));
  const Var logs = ad::add(g, ad::log_clamped(g, probs_adv, kProbClamp), ad::log_clamped(g, probs, kProbClamp));
  return ad::scale(g, ad::sum(g, ad::mul(g, hot, logs)), -1.0 / static_cast<double>(labels.size()));
}

Var clean_ce_loss(Graph& g, Var probs, std::span<const int> labels) {
  check_rows(g, probs, labels, "clean_ce_loss");
  const Var hot = g.input(one_hot(labels, g.value(probs).dim(1)));
  return ad::scale(g, ad::sum(g, ad::mul(g, hot, ad::log_clamped(g, probs, kProbClamp))),
                   -1.0 / static_cast<double>(labels.size()));
}

Var ad_loss(Graph& g, Var probs, Var probs_adv) {
  require_same_shape(g.value(probs), g.value(probs_adv), "ad_loss");
  const std::size_t n = g.value(probs).rows();
  const Var log_ratio =
      ad::sub(g, ad::log_clamped(g, probs, kProbClamp), ad::log_clamped(g, probs_adv, kProbClamp));
  return ad::scale(g, ad::sum(g, ad::mul(g, probs, log_ratio)), 1.0 / static_cast<double>(n));
}

Var total_loss(Graph& g, Var at, Var ac, Var ad, const LossConfig& config) {
  return ad::add(g, at, ad::add(g, ad::scale(g, ac, config.lambda_ac), ad::scale(g, ad, config.lambda_ad)));
}

}  // namespace advbyte::loss
