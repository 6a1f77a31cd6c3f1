#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "advbyte/container.hpp"
#include "advbyte/model.hpp"
#include "advbyte/rng.hpp"

namespace fixtures {

using advbyte::container::Bytes;

inline Bytes filled(std::size_t n, std::uint8_t value) { return Bytes(n, value); }

inline Bytes random_bytes(std::size_t n, std::uint64_t seed) {
  advbyte::Rng rng(seed);
  std::uniform_int_distribution<int> octet(0, 255);
  Bytes out(n);
  for (auto& b : out) b = static_cast<std::uint8_t>(octet(rng));
  return out;
}

/// Two sections, 212 octets of slack in the first, `pad` trailing octets.
inline advbyte::container::ContainerSpec two_section_spec(std::size_t pad = 100) {
  advbyte::container::ContainerSpec spec;
  spec.sections.push_back({random_bytes(300, 1), 512, 0x74786574});
  spec.sections.push_back({random_bytes(256, 2), 256, 0x61746164});
  spec.padding = filled(pad, 0xCC);
  return spec;
}

inline advbyte::container::ByteSample sample(std::string id, int label, Bytes bytes) {
  return {std::move(id), label, std::move(bytes)};
}

/// Small model so forward/backward stay fast in unit tests.
inline advbyte::model::ModelConfig small_model(int groups = 3, std::size_t max_len = 4096) {
  advbyte::model::ModelConfig c;
  c.embed_dim = 4;
  c.max_len = max_len;
  c.window = 16;
  c.channels = 6;
  c.proj_dim = 5;
  c.groups = groups;
  c.gp_count = 4;
  return c;
}

inline std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("advbyte_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace fixtures
