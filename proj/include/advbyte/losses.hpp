#pragma once

#include <cstddef>
#include <span>

#include "advbyte/graph.hpp"

namespace advbyte::loss {

/// Probabilities are clamped to this before any log.
inline constexpr double kProbClamp = 1e-12;

struct LossConfig {
  double temperature = 0.6;
  double lambda_ac = 0.3;
  double lambda_ad = 0.3;
  /// L2-normalize rows before the dot products of the contrastive losses.
  bool normalize = true;

  void validate() const;
};

struct ContrastiveLoss {
  ad::Var value;
  std::size_t anchors = 0;  // anchors that had at least one positive
  bool degenerate = false;  // no negatives anywhere: value is a constant 0
};

/// Selection-head contrastive loss over logits [N, K]. For every anchor the
/// positives are the other rows with its label; the denominator sums only the
/// rows with a different label. Averaged over anchors that have a positive.
ContrastiveLoss selection_cl_loss(ad::Graph& g, ad::Var logits, std::span<const int> labels,
                                  const LossConfig& config);

/// CE on adversarial plus CE on clean probabilities, both [N, G].
ad::Var at_loss(ad::Graph& g, ad::Var probs, ad::Var probs_adv, std::span<const int> labels);

/// CE on clean probabilities only (plain training).
ad::Var clean_ce_loss(ad::Graph& g, ad::Var probs, std::span<const int> labels);

/// Adversarial contrastive loss over projections [2N, P] (clean and
/// adversarial rows, labels per row). Positives of an anchor are all other
/// in-group rows; each pair term's denominator holds that positive plus all
/// out-group rows. Averaged over anchors that have a positive.
ContrastiveLoss ac_loss(ad::Graph& g, ad::Var projections, std::span<const int> labels,
                        const LossConfig& config);

/// Mean over rows of sum_j p_ij * log(p_ij / p_adv_ij).
ad::Var ad_loss(ad::Graph& g, ad::Var probs, ad::Var probs_adv);

/// at + lambda_ac * ac + lambda_ad * ad
ad::Var total_loss(ad::Graph& g, ad::Var at, ad::Var ac, ad::Var ad, const LossConfig& config);

}  // namespace advbyte::loss
