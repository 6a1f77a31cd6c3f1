#pragma once

// Evaluation-time white-box attacks in embedding space, confined to the
// perturbation positions of the repacked sample.

#include <cstdint>
#include <string>

#include "advbyte/advgen.hpp"
#include "advbyte/model.hpp"

namespace advbyte::attacks {

enum class AttackKind { PGD, CW };

const char* attack_name(AttackKind kind) noexcept;
AttackKind parse_attack_kind(const std::string& text);

struct AttackConfig {
  AttackKind kind = AttackKind::PGD;
  double epsilon = 0.6;
  int iterations = 50;
  /// PGD step; 0 means epsilon / 10.
  double alpha = 0.0;
  /// Project to octets after every PGD step; otherwise only at the end.
  bool project_every_iteration = true;
  double cw_c = 1.0;
  int cw_steps = 100;
  double cw_learning_rate = 0.05;
  container::RegionCaps caps;
  std::uint64_t seed = 0;
  /// Keys the random initialization together with seed and sample id.
  std::uint64_t round = 0;

  double step_size() const noexcept { return alpha > 0.0 ? alpha : epsilon / 10.0; }
  void validate() const;
  void write(KeyValues& kv) const;
  static AttackConfig read(const KeyValues& kv);
};

/// Throws MalformedContainer or EmptyPerturbationMap.
advgen::AdvSample pgd_attack(const container::ByteSample& x, const model::ModelParams& params,
                             const AttackConfig& config);
advgen::AdvSample cw_style_attack(const container::ByteSample& x, const model::ModelParams& params,
                                  const AttackConfig& config);
/// Dispatches on config.kind.
advgen::AdvSample run_attack(const container::ByteSample& x, const model::ModelParams& params,
                             const AttackConfig& config);

struct AttackOutcome {
  std::string id;
  int label = 0;
  int clean_prediction = 0;
  int adversarial_prediction = 0;
  /// Clean prediction correct and adversarial prediction wrong.
  bool success = false;
};

/// One line-delimited JSON record.
std::string outcome_json(const AttackOutcome& outcome);

}  // namespace advbyte::attacks
