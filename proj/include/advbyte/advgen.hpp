#pragma once

// Adversarial sample generation with a pool of global perturbations (GPs).
//
// Per batch:
//   1. repack every sample and collect its perturbation positions
//   2. overwrite every position with a uniformly random octet
//   3. representation h1 and selection logits z' of the randomized sample
//   4. one SGD step on the selection head with the selection contrastive loss
//   5. i = argmax z'; add GP[i][p] to the embedding of every position p and
//      project back to the nearest octet
//   6. gradient of CE at the re-embedded sample; e[p] += eps * gradient[p]
//      (or eps * sign(gradient[p])) and project again
//   7. m[i][p] = mu * m[i][p] + sign(gradient[p]); GP[i][p] += eps * sign(m[i][p])
// GP vectors are addressed by (region, region-relative index) so one pool
// serves samples of any length.

#include <compare>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "advbyte/container.hpp"
#include "advbyte/losses.hpp"
#include "advbyte/model.hpp"

namespace advbyte::advgen {

using container::Bytes;
using container::ByteSample;
using container::PerturbationMap;
using container::Region;

struct PoolCoord {
  Region region = Region::Dos;
  std::uint32_t index = 0;

  auto operator<=>(const PoolCoord&) const = default;
};

struct PoolConfig {
  int count = 8;
  std::size_t dim = 8;
  double momentum_decay = 0.9;
  double epsilon = 0.6;
  /// Start new GP vectors at zero instead of the embedding of a random octet.
  bool zero_init = false;
  /// Keep every GP coordinate inside [-epsilon, epsilon].
  bool bounded = false;
  std::uint64_t seed = 0;

  bool operator==(const PoolConfig&) const = default;
};

class GPPool {
 public:
  struct Entry {
    std::vector<double> gp;
    std::vector<double> momentum;
    bool operator==(const Entry&) const = default;
  };
  using EntryMap = std::map<PoolCoord, Entry>;

  explicit GPPool(PoolConfig config);

  const PoolConfig& config() const noexcept { return config_; }
  int count() const noexcept { return config_.count; }

  bool contains(int i, PoolCoord coord) const;
  const Entry& entry(int i, PoolCoord coord) const;
  const EntryMap& entries(int i) const { return entries_.at(static_cast<std::size_t>(i)); }
  std::size_t total_entries() const;

  /// GP[i][coord], or the value it would be initialized to on first touch.
  std::vector<double> value_or_initial(int i, PoolCoord coord, const ad::Tensor& embedding) const;

  /// Momentum and GP update for one coordinate; initializes lazily.
  void update(int i, PoolCoord coord, std::span<const double> gradient, const ad::Tensor& embedding);

  std::vector<std::uint8_t> serialize() const;
  static GPPool deserialize(std::span<const std::uint8_t> bytes);
  void save(const std::filesystem::path& path) const;
  static GPPool load(const std::filesystem::path& path);

  bool operator==(const GPPool&) const = default;

 private:
  int initial_octet(int i, PoolCoord coord) const;

  PoolConfig config_;
  std::vector<EntryMap> entries_;
};

/// sign with sign(0) = 0.
inline double sign(double v) noexcept { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); }

/// Applies the momentum/GP update at every position; gradients[k] is the
/// d-vector for positions[k].
void update_gp_momentum(GPPool& pool, int i, std::span<const container::PerturbationEntry> positions,
                        std::span<const std::vector<double>> gradients, const ad::Tensor& embedding);

/// Octet j in 0..255 minimizing ||e - W_j||, lowest index on ties. The PAD
/// row is never a candidate.
int nearest_byte_projection(std::span<const double> e, const ad::Tensor& embedding);

/// The same search against a table prepared once for many queries.
class ByteProjector {
 public:
  explicit ByteProjector(const ad::Tensor& embedding);
  int operator()(std::span<const double> e) const;

 private:
  std::size_t dim_;
  std::vector<double> columns_;  // [d, 256]
};

/// Argmax with lowest-index tie-break.
int argmax(std::span<const double> values);

struct Selection {
  int index = 0;
  ad::Tensor logits;  // [K]
};

Selection select_gp(const ad::Tensor& repr, const model::ModelParams& params);

struct GenConfig {
  double epsilon = 0.6;
  double momentum_decay = 0.9;
  double selection_lr = 1e-4;
  bool fgsm_sign_mode = false;
  bool use_gp = true;
  container::RegionCaps caps;
  loss::LossConfig loss;
  std::uint64_t seed = 0;
};

struct AdvSample {
  ByteSample sample;  // perturbed bytes, parent's id and label
  std::string parent_id;
  std::optional<int> gp_index;
  std::vector<std::size_t> touched;
};

/// Intermediate states, recorded on request for verification.
struct GenTrace {
  Bytes packed;
  Bytes randomized;
  Bytes intermediate;  // after GP application (== randomized without GP)
  PerturbationMap map;
  std::vector<std::vector<double>> gradients;  // CE gradient per map entry
};

/// Repacked sample with random octets at every perturbation position.
struct Prepared {
  Bytes packed;
  Bytes randomized;
  PerturbationMap map;
};

/// Throws MalformedContainer or EmptyPerturbationMap.
Prepared prepare_sample(const ByteSample& sample, const container::RegionCaps& caps, std::uint64_t seed,
                        std::uint64_t round);

/// e[p] = W[x[p]] + eps * step[p] (step = gradient or its sign), then x[p] =
/// nearest octet. Positions past the model window see a zero gradient.
void step_and_project(Bytes& bytes, const PerturbationMap& map, const ad::Tensor& gradient,
                      const ad::Tensor& embedding, double epsilon, bool sign_mode);

/// Per-map-entry d-vectors out of an [L, d] gradient (zero past L).
std::vector<std::vector<double>> position_gradients(const PerturbationMap& map, const ad::Tensor& gradient);

struct BatchResult {
  std::vector<AdvSample> samples;  // same order as the input minus skipped ones
  std::vector<std::size_t> source_index;
  std::vector<std::string> skipped;
  std::optional<double> selection_loss;
};

/// Generates adversarial counterparts for a batch, updating the selection
/// head in `params` once and the pool in sample order. `round` keys the
/// random octets (the training epoch).
BatchResult gen_adv_mal_batch(std::span<const ByteSample> batch, model::ModelParams& params, GPPool& pool,
                              const GenConfig& config, std::uint64_t round,
                              std::vector<GenTrace>* traces = nullptr);

AdvSample gen_adv_mal(const ByteSample& sample, model::ModelParams& params, GPPool& pool,
                      const GenConfig& config, std::uint64_t round, GenTrace* trace = nullptr);

}  // namespace advbyte::advgen
