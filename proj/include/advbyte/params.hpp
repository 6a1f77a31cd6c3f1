#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "advbyte/tensor.hpp"

namespace advbyte::ad {

/// Ordered collection of named tensors (parameters or their gradients).
class ParamSet {
 public:
  void add(std::string name, Tensor tensor);

  bool contains(std::string_view name) const noexcept;
  Tensor& at(std::string_view name);
  const Tensor& at(std::string_view name) const;

  std::size_t size() const noexcept { return names_.size(); }
  const std::vector<std::string>& names() const noexcept { return names_; }
  Tensor& tensor(std::size_t i) { return tensors_[i]; }
  const Tensor& tensor(std::size_t i) const { return tensors_[i]; }

  /// Same names and shapes, all zeros.
  ParamSet zeros_like() const;
  /// this[name] += other[name] for every name of other.
  void accumulate(const ParamSet& other);

  bool operator==(const ParamSet&) const = default;

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> tensors_;
};

// Checkpoint file, all integers little-endian:
//   "ADVBCKPT"            8-octet magic
//   u32 version           currently 1
//   u32 tensor_count
//   per tensor: u32 name_len, name octets (UTF-8), u32 rank, rank x u64 dims,
//               product(dims) x f64 values (IEEE-754 binary64)
inline constexpr std::uint32_t kCheckpointVersion = 1;

std::vector<std::uint8_t> serialize_checkpoint(const ParamSet& params);
ParamSet deserialize_checkpoint(std::span<const std::uint8_t> bytes);
void save_checkpoint(const std::filesystem::path& path, const ParamSet& params);
ParamSet load_checkpoint(const std::filesystem::path& path);

/// Binary little-endian writer/reader shared by checkpoint-style formats.
class ByteWriter {
 public:
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void f64(double v);
  void raw(std::string_view bytes);
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}
  std::uint8_t u8();
  std::uint32_t u32();
  std::uint64_t u64();
  double f64();
  std::string raw(std::size_t n);
  bool done() const noexcept { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const;
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace advbyte::ad
