#pragma once

// Training loop, evaluation protocol, group-weighted metrics, dataset split
// and representation export.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "advbyte/advgen.hpp"
#include "advbyte/attacks.hpp"
#include "advbyte/kv.hpp"
#include "advbyte/model.hpp"
#include "advbyte/optim.hpp"

namespace advbyte::pipeline {

using container::ByteSample;

enum class TrainMode { Plain, FgsmAt, Roma };

const char* mode_name(TrainMode mode) noexcept;
TrainMode parse_mode(const std::string& text);

struct TrainConfig {
  int epochs = 30;
  std::size_t batch_size = 16;
  double learning_rate = 1e-4;
  loss::LossConfig loss;
  double epsilon = 0.6;
  double momentum_decay = 0.9;
  double selection_lr = 1e-4;
  bool fgsm_sign_mode = false;
  /// Keep GP vectors inside the epsilon box.
  bool gp_bounded = false;
  TrainMode mode = TrainMode::Roma;
  bool no_gp = false;
  bool no_ac = false;
  bool no_ad = false;
  container::RegionCaps caps;
  model::ModelConfig model;
  std::uint64_t seed = 0;

  static TrainConfig desk();
  static TrainConfig paper();

  void validate() const;
  void write(KeyValues& kv) const;
  /// Starts from `base` and overrides every key present in kv.
  static TrainConfig read(const KeyValues& kv, const TrainConfig& base = desk());

  advgen::GenConfig gen_config() const;
  advgen::PoolConfig pool_config() const;
  double effective_lambda_ac() const noexcept;
  double effective_lambda_ad() const noexcept;
  bool uses_gp() const noexcept { return mode == TrainMode::Roma && !no_gp; }
};

/// Caps concurrent workers of evaluation and attack loops; 0 means hardware
/// concurrency. Results never depend on it.
void set_thread_count(std::size_t threads) noexcept;
std::size_t thread_count() noexcept;

/// Calls fn(i) for i in [0, n) on up to thread_count() workers; rethrows the
/// first failure by index.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

struct Split {
  std::vector<ByteSample> train;
  std::vector<ByteSample> test;
};

/// Stratified per label; ratio * group size rounded half-up goes to train.
/// Throws InvalidSpec when a group has fewer than 2 samples.
Split split_corpus(const std::vector<ByteSample>& corpus, double ratio, std::uint64_t seed);

struct LogRecord {
  int epoch = 0;
  int batch = 0;
  double at = 0.0;  // clean CE in plain mode
  double ac = 0.0;
  double ad = 0.0;
  double total = 0.0;
  std::optional<double> selection;
};

std::string log_json(const LogRecord& record);

struct TrainResult {
  model::ModelParams params;
  advgen::GPPool pool;
  std::vector<LogRecord> log;
  std::vector<std::string> skipped;
};

using LogSink = std::function<void(const LogRecord&)>;

TrainResult train(const TrainConfig& config, const std::vector<ByteSample>& train_set,
                  const LogSink& sink = {});
/// Continues from the given parameters and pool.
TrainResult train(const TrainConfig& config, const std::vector<ByteSample>& train_set,
                  model::ModelParams params, advgen::GPPool pool, const LogSink& sink = {});

struct GroupCounts {
  std::int64_t clean_total = 0;
  std::int64_t clean_correct = 0;
  std::int64_t adv_total = 0;
  std::int64_t adv_correct = 0;

  bool operator==(const GroupCounts&) const = default;
};

struct MetricsReport {
  std::vector<GroupCounts> groups;
  bool has_adversarial = false;
  std::optional<attacks::AttackConfig> attack;

  bool operator==(const MetricsReport& other) const;
};

/// Group-weighted metrics; every one throws EmptyEvaluation when its
/// denominator vanishes. Evaluated in exact rational arithmetic.
double standard_accuracy(const MetricsReport& report);
double robust_accuracy(const MetricsReport& report);
double attack_success_rate(const MetricsReport& report);

std::string metrics_json(const MetricsReport& report);
std::string metrics_csv(const MetricsReport& report);
void write_metrics(const std::filesystem::path& dir, const MetricsReport& report);

struct Evaluation {
  MetricsReport report;
  std::vector<attacks::AttackOutcome> outcomes;  // empty without attack
};

/// Clean pass over every sample, plus adversarial counterparts of every
/// sample when an attack is given. One report row per model group.
Evaluation evaluate(const model::ModelParams& params, const std::vector<ByteSample>& test_set,
                    const std::optional<attacks::AttackConfig>& attack);

struct ReprInput {
  ByteSample sample;
  bool adversarial = false;
};

struct ReprRow {
  std::string id;
  int label = 0;
  bool adversarial = false;
  std::vector<double> values;
};

/// One row per input, ordered by (label, id, flag) with clean before adversarial.
std::vector<ReprRow> export_representations(const model::ModelParams& params,
                                            const std::vector<ReprInput>& inputs);
void write_representations(const std::filesystem::path& path, const std::vector<ReprRow>& rows);

}  // namespace advbyte::pipeline
