#pragma once

// Simplified PE-like container: a 64-octet DOS header ('MZ' + pointer at
// 0x3C), an optional DOS stub, a 16-octet PE header followed by a section
// table, section bodies and trailing padding. The byte layout is documented
// in docs/container_format.md.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace advbyte::container {

using Bytes = std::vector<std::uint8_t>;

inline constexpr std::size_t kMinContainerSize = 128;
inline constexpr std::size_t kDosHeaderSize = 64;
inline constexpr std::size_t kPePointerOffset = 0x3C;
inline constexpr std::size_t kPeHeaderSize = 16;
inline constexpr std::size_t kSectionEntrySize = 16;
inline constexpr std::size_t kMaxSections = 96;
inline constexpr std::size_t kShiftSize = 1024;
inline constexpr std::size_t kAlignment = 16;
inline constexpr std::size_t kDosPerturbable = 58;

struct ByteSample {
  std::string id;
  int label = 0;
  Bytes bytes;

  bool operator==(const ByteSample&) const = default;
};

/// Half-open octet range [begin, end).
struct Span {
  std::size_t begin = 0;
  std::size_t end = 0;

  std::size_t size() const noexcept { return end - begin; }
  bool empty() const noexcept { return end == begin; }
  bool contains(std::size_t offset) const noexcept { return offset >= begin && offset < end; }
  bool operator==(const Span&) const = default;
};

struct Section {
  Span header;
  Span body;
  std::uint32_t declared_size = 0;
  std::uint32_t occupied_size = 0;
  std::uint32_t tag = 0;

  Span payload() const noexcept { return {body.begin, body.begin + occupied_size}; }
  Span slack() const noexcept { return {body.begin + occupied_size, body.end}; }
};

struct ContainerLayout {
  std::size_t file_size = 0;
  Span dos_header;
  Span dos_stub;
  Span pe_header;
  Span section_table;
  /// Octets between the end of the section table and the first body. The
  /// last 1024 of them form the shifting space when the gap is that large.
  Span header_gap;
  Span shift;
  std::vector<Section> sections;
  /// Unused octets between consecutive section bodies.
  std::vector<Span> section_gaps;
  std::size_t end_of_data = 0;

  Span padding() const noexcept { return {end_of_data, file_size}; }
};

/// Throws Error{MalformedContainer} when the bytes cannot be a container.
ContainerLayout parse_container(std::span<const std::uint8_t> bytes);

enum class Region : std::uint8_t { Dos = 0, Shift = 1, Slack = 2, Pad = 3 };

const char* region_name(Region region) noexcept;

struct RegionCaps {
  std::size_t slack_cap = 4096;
  std::size_t pad_cap = 2048;

  static RegionCaps desk() { return {}; }
  static RegionCaps paper() { return {4096, 102400}; }
};

struct PerturbationEntry {
  std::size_t offset = 0;
  Region region = Region::Dos;
  std::uint32_t index = 0;  // region-relative

  bool operator==(const PerturbationEntry&) const = default;
};

struct PerturbationMap {
  std::vector<PerturbationEntry> entries;
  RegionCaps caps;

  std::size_t size() const noexcept { return entries.size(); }
  bool empty() const noexcept { return entries.empty(); }
  std::size_t count(Region region) const noexcept;
  bool contains_offset(std::size_t offset) const noexcept;
};

PerturbationMap perturbation_positions(const ContainerLayout& layout, const RegionCaps& caps = {});

/// Convenience: parse + positions.
PerturbationMap perturbation_positions(std::span<const std::uint8_t> bytes, const RegionCaps& caps = {});

/// Deterministic payload-preserving re-layout that inserts the 1024-octet
/// shifting space before the first section and aligns every body to 16.
/// Idempotent.
ByteSample repack(const ByteSample& sample);
Bytes repack(std::span<const std::uint8_t> bytes);

/// Little-endian helpers shared with the writers.
std::uint32_t read_u32(std::span<const std::uint8_t> bytes, std::size_t offset);
std::uint16_t read_u16(std::span<const std::uint8_t> bytes, std::size_t offset);
void write_u32(Bytes& bytes, std::size_t offset, std::uint32_t value);
void write_u16(Bytes& bytes, std::size_t offset, std::uint16_t value);

/// Builder used by the corpus generator and test fixtures.
struct SectionSpec {
  Bytes payload;               // occupied octets
  std::uint32_t declared_size = 0;  // >= payload.size()
  std::uint32_t tag = 0;
};

struct ContainerSpec {
  Bytes dos_fields = Bytes(kDosHeaderSize, 0);  // 'MZ' and pointer overwritten
  Bytes dos_stub;
  std::size_t shift_size = 0;  // 0 or >= 1024 octets inserted before the first body
  std::vector<SectionSpec> sections;
  Bytes padding;
};

Bytes build_container(const ContainerSpec& spec);

}  // namespace advbyte::container
