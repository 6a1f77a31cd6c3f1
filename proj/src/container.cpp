#include "advbyte/container.hpp"

#include <algorithm>
#include <string>

#include "advbyte/error.hpp"

namespace advbyte::container {

namespace {

[[noreturn]] void malformed(const std::string& why) {
  fail(ErrorKind::MalformedContainer, "malformed container: " + why);
}

std::size_t align_up(std::size_t value) {
  return (value + kAlignment - 1) / kAlignment * kAlignment;
}

void append_span(PerturbationMap& map, Span span, Region region, std::uint32_t& index,
                 std::size_t cap) {
  for (std::size_t offset = span.begin; offset < span.end && index < cap; ++offset) {
    map.entries.push_back({offset, region, index++});
  }
}

}  // namespace

std::uint32_t read_u32(std::span<const std::uint8_t> bytes, std::size_t offset) {
  return static_cast<std::uint32_t>(bytes[offset]) |
         static_cast<std::uint32_t>(bytes[offset + 1]) << 8 |
         static_cast<std::uint32_t>(bytes[offset + 2]) << 16 |
         static_cast<std::uint32_t>(bytes[offset + 3]) << 24;
}

std::uint16_t read_u16(std::span<const std::uint8_t> bytes, std::size_t offset) {
  return static_cast<std::uint16_t>(bytes[offset] | bytes[offset + 1] << 8);
}

void write_u32(Bytes& bytes, std::size_t offset, std::uint32_t value) {
  for (int i = 0; i < 4; ++i) bytes[offset + i] = static_cast<std::uint8_t>(value >> (8 * i));
}

void write_u16(Bytes& bytes, std::size_t offset, std::uint16_t value) {
  bytes[offset] = static_cast<std::uint8_t>(value);
  bytes[offset + 1] = static_cast<std::uint8_t>(value >> 8);
}

const char* region_name(Region region) noexcept {
  switch (region) {
    case Region::Dos: return "DOS";
    case Region::Shift: return "SHIFT";
    case Region::Slack: return "SLACK";
    case Region::Pad: return "PAD";
  }
  return "?";
}

ContainerLayout parse_container(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kMinContainerSize) {
    malformed("file shorter than " + std::to_string(kMinContainerSize) + " octets");
  }
  if (bytes[0] != 'M' || bytes[1] != 'Z') malformed("missing MZ magic");

  const std::size_t pe_offset = read_u32(bytes, kPePointerOffset);
  if (pe_offset < kDosHeaderSize || pe_offset + kPeHeaderSize > bytes.size()) {
    malformed("PE pointer " + std::to_string(pe_offset) + " out of range");
  }
  if (bytes[pe_offset] != 'P' || bytes[pe_offset + 1] != 'E' || bytes[pe_offset + 2] != 0 ||
      bytes[pe_offset + 3] != 0) {
    malformed("PE pointer does not reference a PE signature");
  }

  const std::size_t count = read_u16(bytes, pe_offset + 4);
  if (count == 0 || count > kMaxSections) {
    malformed("section count " + std::to_string(count) + " outside 1.." +
              std::to_string(kMaxSections));
  }

  ContainerLayout layout;
  layout.file_size = bytes.size();
  layout.dos_header = {0, kDosHeaderSize};
  layout.dos_stub = {kDosHeaderSize, pe_offset};
  layout.pe_header = {pe_offset, pe_offset + kPeHeaderSize};
  layout.section_table = {layout.pe_header.end, layout.pe_header.end + count * kSectionEntrySize};
  if (layout.section_table.end > bytes.size()) malformed("section table runs past end of file");

  std::size_t cursor = layout.section_table.end;
  for (std::size_t k = 0; k < count; ++k) {
    const std::size_t entry = layout.section_table.begin + k * kSectionEntrySize;
    Section section;
    section.header = {entry, entry + kSectionEntrySize};
    const std::size_t raw = read_u32(bytes, entry);
    section.declared_size = read_u32(bytes, entry + 4);
    section.occupied_size = read_u32(bytes, entry + 8);
    section.tag = read_u32(bytes, entry + 12);
    section.body = {raw, raw + section.declared_size};

    if (section.declared_size == 0) malformed("section " + std::to_string(k) + " is empty");
    if (section.occupied_size > section.declared_size) {
      malformed("section " + std::to_string(k) + " occupies more than it declares");
    }
    if (section.body.end > bytes.size()) {
      malformed("section " + std::to_string(k) + " runs past end of file");
    }
    if (raw < cursor) {
      malformed("section " + std::to_string(k) + " overlaps the headers or a previous section");
    }
    if (k == 0) {
      layout.header_gap = {cursor, raw};
    } else if (raw > cursor) {
      layout.section_gaps.push_back({cursor, raw});
    }
    cursor = section.body.end;
    layout.sections.push_back(section);
  }
  layout.end_of_data = cursor;

  if (layout.header_gap.size() >= kShiftSize) {
    layout.shift = {layout.header_gap.end - kShiftSize, layout.header_gap.end};
  } else {
    layout.shift = {layout.header_gap.end, layout.header_gap.end};
  }
  return layout;
}

std::size_t PerturbationMap::count(Region region) const noexcept {
  return static_cast<std::size_t>(std::count_if(
      entries.begin(), entries.end(), [region](const auto& e) { return e.region == region; }));
}

bool PerturbationMap::contains_offset(std::size_t offset) const noexcept {
  auto it = std::lower_bound(entries.begin(), entries.end(), offset,
                             [](const PerturbationEntry& e, std::size_t o) { return e.offset < o; });
  return it != entries.end() && it->offset == offset;
}

PerturbationMap perturbation_positions(const ContainerLayout& layout, const RegionCaps& caps) {
  PerturbationMap map;
  map.caps = caps;

  std::uint32_t dos_index = 0;
  for (std::size_t offset = 2; offset < kDosHeaderSize; ++offset) {
    if (offset >= kPePointerOffset && offset < kPePointerOffset + 4) continue;
    map.entries.push_back({offset, Region::Dos, dos_index++});
  }

  std::uint32_t shift_index = 0;
  append_span(map, layout.shift, Region::Shift, shift_index, kShiftSize);

  // Slack in file order: each section's unused tail, then the gap to the next body.
  std::uint32_t slack_index = 0;
  for (std::size_t k = 0; k < layout.sections.size(); ++k) {
    const Section& section = layout.sections[k];
    append_span(map, section.slack(), Region::Slack, slack_index, caps.slack_cap);
    if (k + 1 < layout.sections.size()) {
      append_span(map, {section.body.end, layout.sections[k + 1].body.begin}, Region::Slack,
                  slack_index, caps.slack_cap);
    }
  }

  std::uint32_t pad_index = 0;
  append_span(map, layout.padding(), Region::Pad, pad_index, caps.pad_cap);
  return map;
}

PerturbationMap perturbation_positions(std::span<const std::uint8_t> bytes, const RegionCaps& caps) {
  return perturbation_positions(parse_container(bytes), caps);
}

Bytes repack(std::span<const std::uint8_t> bytes) {
  const ContainerLayout layout = parse_container(bytes);
  const std::size_t count = layout.sections.size();

  const std::size_t pe_offset = align_up(layout.dos_stub.end);
  const std::size_t table_end = pe_offset + kPeHeaderSize + count * kSectionEntrySize;
  const std::size_t first_body = table_end + kShiftSize;

  // Canonical body placement: contiguous, each start aligned to 16.
  std::vector<std::size_t> raw(count);
  std::size_t cursor = first_body;
  for (std::size_t k = 0; k < count; ++k) {
    raw[k] = align_up(cursor);
    cursor = raw[k] + layout.sections[k].declared_size;
  }
  const std::size_t end_of_data = cursor;
  const Span padding = layout.padding();

  Bytes out(end_of_data + padding.size(), 0);
  std::copy_n(bytes.begin(), layout.dos_stub.end, out.begin());
  write_u32(out, kPePointerOffset, static_cast<std::uint32_t>(pe_offset));
  std::copy_n(bytes.begin() + static_cast<std::ptrdiff_t>(layout.pe_header.begin), kPeHeaderSize,
              out.begin() + static_cast<std::ptrdiff_t>(pe_offset));

  for (std::size_t k = 0; k < count; ++k) {
    const Section& section = layout.sections[k];
    const std::size_t entry = pe_offset + kPeHeaderSize + k * kSectionEntrySize;
    write_u32(out, entry, static_cast<std::uint32_t>(raw[k]));
    write_u32(out, entry + 4, section.declared_size);
    write_u32(out, entry + 8, section.occupied_size);
    write_u32(out, entry + 12, section.tag);
    std::copy_n(bytes.begin() + static_cast<std::ptrdiff_t>(section.body.begin),
                section.declared_size, out.begin() + static_cast<std::ptrdiff_t>(raw[k]));
  }

  // An existing shifting space keeps its contents; otherwise it starts zeroed.
  if (!layout.shift.empty()) {
    std::copy_n(bytes.begin() + static_cast<std::ptrdiff_t>(layout.shift.begin), kShiftSize,
                out.begin() + static_cast<std::ptrdiff_t>(table_end));
  }
  // Inter-section filler keeps as many original octets as fit.
  for (std::size_t k = 0; k + 1 < count; ++k) {
    const std::size_t out_gap_begin = raw[k] + layout.sections[k].declared_size;
    const std::size_t out_gap = raw[k + 1] - out_gap_begin;
    const Span in_gap = {layout.sections[k].body.end, layout.sections[k + 1].body.begin};
    const std::size_t keep = std::min(out_gap, in_gap.size());
    std::copy_n(bytes.begin() + static_cast<std::ptrdiff_t>(in_gap.begin), keep,
                out.begin() + static_cast<std::ptrdiff_t>(out_gap_begin));
  }
  std::copy(bytes.begin() + static_cast<std::ptrdiff_t>(padding.begin), bytes.end(),
            out.begin() + static_cast<std::ptrdiff_t>(end_of_data));
  return out;
}

ByteSample repack(const ByteSample& sample) {
  return {sample.id, sample.label, repack(std::span<const std::uint8_t>(sample.bytes))};
}

Bytes build_container(const ContainerSpec& spec) {
  if (spec.sections.empty() || spec.sections.size() > kMaxSections) {
    fail(ErrorKind::InvalidSpec, "container needs 1.." + std::to_string(kMaxSections) + " sections");
  }
  if (spec.shift_size != 0 && spec.shift_size < kShiftSize) {
    fail(ErrorKind::InvalidSpec, "shift size must be 0 or at least 1024");
  }
  const std::size_t count = spec.sections.size();
  const std::size_t pe_offset = align_up(kDosHeaderSize + spec.dos_stub.size());
  const std::size_t table_end = pe_offset + kPeHeaderSize + count * kSectionEntrySize;

  std::vector<std::size_t> raw(count);
  std::size_t cursor = table_end + spec.shift_size;
  for (std::size_t k = 0; k < count; ++k) {
    const SectionSpec& section = spec.sections[k];
    if (section.declared_size == 0 || section.payload.size() > section.declared_size) {
      fail(ErrorKind::InvalidSpec, "section payload larger than declared size");
    }
    raw[k] = align_up(cursor);
    cursor = raw[k] + section.declared_size;
  }

  Bytes out(cursor + spec.padding.size(), 0);
  std::copy_n(spec.dos_fields.begin(), std::min(spec.dos_fields.size(), kDosHeaderSize), out.begin());
  out[0] = 'M';
  out[1] = 'Z';
  write_u32(out, kPePointerOffset, static_cast<std::uint32_t>(pe_offset));
  std::copy(spec.dos_stub.begin(), spec.dos_stub.end(), out.begin() + kDosHeaderSize);

  out[pe_offset] = 'P';
  out[pe_offset + 1] = 'E';
  write_u16(out, pe_offset + 4, static_cast<std::uint16_t>(count));
  for (std::size_t k = 0; k < count; ++k) {
    const SectionSpec& section = spec.sections[k];
    const std::size_t entry = pe_offset + kPeHeaderSize + k * kSectionEntrySize;
    write_u32(out, entry, static_cast<std::uint32_t>(raw[k]));
    write_u32(out, entry + 4, section.declared_size);
    write_u32(out, entry + 8, static_cast<std::uint32_t>(section.payload.size()));
    write_u32(out, entry + 12, section.tag);
    std::copy(section.payload.begin(), section.payload.end(),
              out.begin() + static_cast<std::ptrdiff_t>(raw[k]));
  }
  std::copy(spec.padding.begin(), spec.padding.end(),
            out.begin() + static_cast<std::ptrdiff_t>(cursor));
  return out;
}

}  // namespace advbyte::container
