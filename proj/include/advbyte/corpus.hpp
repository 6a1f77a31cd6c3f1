#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "advbyte/container.hpp"

namespace advbyte::container {

/// Parameters of a synthetic attribution corpus. Each group owns a handful of
/// signature n-grams that are planted inside section payloads; everything
/// else (headers, slack, padding, background bytes) is drawn from
/// distributions shared by all groups.
struct CorpusSpec {
  int group_count = 6;
  std::vector<int> group_counts = {96, 84, 76, 70, 64, 60};
  std::size_t min_length = 6144;
  std::size_t max_length = 12288;
  int signatures_per_group = 4;
  std::size_t signature_length = 32;
  int plants_per_sample = 6;
  /// Per-octet probability that a planted signature copy (other than the
  /// first, which is always intact) has an octet replaced by a random one.
  double noise_ratio = 0.02;
  std::uint64_t seed = 1;

  static CorpusSpec desk(std::uint64_t seed = 1);

  void validate() const;
};

/// Signature n-grams of every group, as planted by generate_corpus.
std::vector<std::vector<Bytes>> corpus_signatures(const CorpusSpec& spec);

std::vector<ByteSample> generate_corpus(const CorpusSpec& spec);

struct ManifestRecord {
  std::string id;
  std::string path;  // relative to the corpus directory
  int label = 0;
  std::size_t length = 0;
};

inline constexpr const char* kCorpusManifest = "manifest.jsonl";

/// Writes samples/<id>.bin plus manifest.jsonl (one JSON record per line).
void write_corpus(const std::filesystem::path& dir, const std::vector<ByteSample>& samples);

struct LoadedCorpus {
  std::vector<ByteSample> samples;
  std::vector<std::string> rejected;  // "<id>: <reason>"
};

/// Loads a corpus directory. Samples that do not parse are rejected with a
/// logged reason and never repaired.
LoadedCorpus read_corpus(const std::filesystem::path& dir);

}  // namespace advbyte::container
