#include "advbyte/corpus.hpp"

#include <algorithm>
#include <array>
#include <cstdio>
#include <fstream>

#include <json.hpp>

#include "advbyte/error.hpp"
#include "advbyte/rng.hpp"

namespace advbyte::container {

namespace {

constexpr std::string_view kDosStub = "This program cannot be run in DOS mode.\r\r\n$";

// Octets that dominate real code sections; shared by every group.
constexpr std::array<std::uint8_t, 16> kCommonOctets = {0x00, 0xFF, 0x8B, 0x89, 0x48, 0xE8,
                                                        0x24, 0x45, 0x0F, 0x85, 0xC3, 0x90,
                                                        0x4C, 0x83, 0x74, 0x01};

std::uint8_t background_octet(Rng& rng) {
  std::uniform_int_distribution<int> pick(0, 99);
  const int roll = pick(rng);
  if (roll < 35) return 0;
  if (roll < 60) return kCommonOctets[static_cast<std::size_t>(pick(rng)) % kCommonOctets.size()];
  return static_cast<std::uint8_t>(std::uniform_int_distribution<int>(0, 255)(rng));
}

Bytes dos_template() {
  Bytes dos(kDosHeaderSize, 0);
  const std::array<std::uint8_t, 28> fields = {'M', 'Z', 0x90, 0x00, 0x03, 0x00, 0x00,
                                               0x00, 0x04, 0x00, 0x00, 0x00, 0xFF, 0xFF,
                                               0x00, 0x00, 0xB8, 0x00, 0x00, 0x00, 0x00,
                                               0x00, 0x00, 0x00, 0x40, 0x00, 0x00, 0x00};
  std::copy(fields.begin(), fields.end(), dos.begin());
  return dos;
}

std::string sample_id(int label, int index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "g%02d_%04d", label, index);
  return buf;
}

ByteSample make_sample(const CorpusSpec& spec, const std::vector<Bytes>& signatures, int label,
                       int index) {
  Rng rng(derive_seed(spec.seed, 0x5A3D1E, static_cast<std::uint64_t>(label),
                      static_cast<std::uint64_t>(index)));
  auto uniform = [&rng](std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
  };

  ContainerSpec cs;
  cs.dos_fields = dos_template();
  for (std::size_t k = 0x20; k < kPePointerOffset; ++k) {
    if (uniform(0, 3) == 0) cs.dos_fields[k] = static_cast<std::uint8_t>(uniform(0, 255));
  }
  cs.dos_stub.assign(kDosStub.begin(), kDosStub.end());
  cs.dos_stub.resize(64, 0);

  const std::size_t target = uniform(spec.min_length, spec.max_length);
  const std::size_t pad = uniform(0, 96) * kAlignment;
  const std::size_t sections = uniform(2, 4);
  const std::size_t headers = kDosHeaderSize + cs.dos_stub.size() + kPeHeaderSize +
                              sections * kSectionEntrySize;
  const std::size_t body_budget =
      std::max<std::size_t>(target > headers + pad ? target - headers - pad : 0,
                            sections * 256) / kAlignment;

  // Split the body budget (in 16-octet units) into `sections` nonzero parts.
  std::vector<std::size_t> cuts;
  for (std::size_t k = 1; k < sections; ++k) cuts.push_back(uniform(1, body_budget - 1));
  cuts.push_back(0);
  cuts.push_back(body_budget);
  std::sort(cuts.begin(), cuts.end());
  std::vector<std::size_t> units;
  for (std::size_t k = 0; k + 1 < cuts.size(); ++k) units.push_back(cuts[k + 1] - cuts[k]);
  // Guarantee every section at least 8 units by borrowing from the largest.
  for (auto& u : units) {
    while (u < 8) {
      auto largest = std::max_element(units.begin(), units.end());
      --*largest;
      ++u;
    }
  }

  const std::size_t sig_len = spec.signature_length;
  std::vector<std::size_t> payload_sizes;
  for (std::size_t k = 0; k < sections; ++k) {
    SectionSpec section;
    section.declared_size = static_cast<std::uint32_t>(units[k] * kAlignment);
    section.tag = static_cast<std::uint32_t>(0x2E746578 + k);
    std::size_t slack = 0;
    if (uniform(0, 1) == 1) {
      slack = uniform(16, std::min<std::size_t>(256, section.declared_size / 4));
    }
    section.payload.resize(section.declared_size - slack);
    for (auto& octet : section.payload) octet = background_octet(rng);
    cs.sections.push_back(std::move(section));
  }

  // Plant signature copies at non-overlapping payload offsets.
  std::vector<std::vector<std::pair<std::size_t, std::size_t>>> used(sections);
  std::bernoulli_distribution noise(spec.noise_ratio);
  int planted = 0;
  for (int attempt = 0; planted < spec.plants_per_sample && attempt < 1000; ++attempt) {
    const std::size_t k = uniform(0, sections - 1);
    Bytes& payload = cs.sections[k].payload;
    if (payload.size() < sig_len) continue;
    // Copies start on a 16-octet boundary of the body.
    const std::size_t at = uniform(0, (payload.size() - sig_len) / kAlignment) * kAlignment;
    const bool overlaps = std::any_of(used[k].begin(), used[k].end(), [&](const auto& range) {
      return at < range.second && range.first < at + sig_len;
    });
    if (overlaps) continue;
    used[k].emplace_back(at, at + sig_len);
    const Bytes& sig = signatures[uniform(0, signatures.size() - 1)];
    for (std::size_t j = 0; j < sig_len; ++j) {
      payload[at + j] = (planted > 0 && noise(rng)) ? static_cast<std::uint8_t>(uniform(0, 255))
                                                     : sig[j];
    }
    ++planted;
  }
  if (planted == 0) fail(ErrorKind::InvalidSpec, "sample too small to hold a signature");

  cs.padding.assign(pad, 0);
  return {sample_id(label, index), label, build_container(cs)};
}

}  // namespace

CorpusSpec CorpusSpec::desk(std::uint64_t seed) {
  CorpusSpec spec;
  spec.seed = seed;
  return spec;
}

void CorpusSpec::validate() const {
  auto invalid = [](const std::string& why) { fail(ErrorKind::InvalidSpec, "corpus spec: " + why); };
  if (group_count < 2) invalid("group_count must be >= 2");
  if (static_cast<int>(group_counts.size()) != group_count) {
    invalid("group_counts must list one count per group");
  }
  for (int count : group_counts) {
    if (count < 2) invalid("every group needs at least 2 samples");
  }
  if (min_length < 1024 || max_length < min_length) invalid("length range must satisfy 1024 <= min <= max");
  if (signatures_per_group < 1) invalid("signatures_per_group must be >= 1");
  if (signature_length < 4 || signature_length > 256) invalid("signature_length must be in 4..256");
  if (plants_per_sample < 1) invalid("plants_per_sample must be >= 1");
  if (!(noise_ratio >= 0.0 && noise_ratio <= 1.0)) invalid("noise_ratio must be in [0,1]");
}

std::vector<std::vector<Bytes>> corpus_signatures(const CorpusSpec& spec) {
  std::vector<std::vector<Bytes>> out(static_cast<std::size_t>(spec.group_count));
  for (int g = 0; g < spec.group_count; ++g) {
    Rng rng(derive_seed(spec.seed, 0x516E47, static_cast<std::uint64_t>(g)));
    std::uniform_int_distribution<int> octet(0, 255);
    for (int s = 0; s < spec.signatures_per_group; ++s) {
      Bytes sig(spec.signature_length);
      for (auto& b : sig) b = static_cast<std::uint8_t>(octet(rng));
      out[static_cast<std::size_t>(g)].push_back(std::move(sig));
    }
  }
  return out;
}

std::vector<ByteSample> generate_corpus(const CorpusSpec& spec) {
  spec.validate();
  const auto signatures = corpus_signatures(spec);
  std::vector<ByteSample> samples;
  for (int g = 0; g < spec.group_count; ++g) {
    for (int i = 0; i < spec.group_counts[static_cast<std::size_t>(g)]; ++i) {
      samples.push_back(make_sample(spec, signatures[static_cast<std::size_t>(g)], g, i));
    }
  }
  return samples;
}

void write_corpus(const std::filesystem::path& dir, const std::vector<ByteSample>& samples) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir / "samples", ec);
  if (ec) fail(ErrorKind::IoError, "cannot create " + (dir / "samples").string() + ": " + ec.message());

  std::ofstream manifest(dir / kCorpusManifest, std::ios::binary | std::ios::trunc);
  if (!manifest) fail(ErrorKind::IoError, "cannot write manifest in " + dir.string());
  for (const auto& sample : samples) {
    const std::string rel = "samples/" + sample.id + ".bin";
    std::ofstream out(dir / rel, std::ios::binary | std::ios::trunc);
    out.write(reinterpret_cast<const char*>(sample.bytes.data()),
              static_cast<std::streamsize>(sample.bytes.size()));
    if (!out) fail(ErrorKind::IoError, "cannot write " + (dir / rel).string());
    nlohmann::ordered_json record = {
        {"id", sample.id}, {"path", rel}, {"label", sample.label}, {"length", sample.bytes.size()}};
    manifest << record.dump() << '\n';
  }
  if (!manifest) fail(ErrorKind::IoError, "cannot write manifest in " + dir.string());
}

LoadedCorpus read_corpus(const std::filesystem::path& dir) {
  std::ifstream manifest(dir / kCorpusManifest);
  if (!manifest) fail(ErrorKind::IoError, "cannot open " + (dir / kCorpusManifest).string());

  LoadedCorpus corpus;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(manifest, line)) {
    ++line_no;
    if (line.empty()) continue;
    ManifestRecord rec;
    try {
      const auto j = nlohmann::json::parse(line);
      rec.id = j.at("id").get<std::string>();
      rec.path = j.at("path").get<std::string>();
      rec.label = j.at("label").get<int>();
      rec.length = j.at("length").get<std::size_t>();
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::IoError, "manifest line " + std::to_string(line_no) + ": " + e.what());
    }

    std::ifstream in(dir / rec.path, std::ios::binary);
    if (!in) fail(ErrorKind::IoError, "cannot open " + (dir / rec.path).string());
    Bytes bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    std::string reason;
    if (bytes.size() != rec.length) {
      reason = "length " + std::to_string(bytes.size()) + " != manifest " + std::to_string(rec.length);
    } else {
      try {
        parse_container(bytes);
      } catch (const Error& e) {
        reason = e.what();
      }
    }
    if (!reason.empty()) {
      warn("corpus", "rejected " + rec.id + ": " + reason);
      corpus.rejected.push_back(rec.id + ": " + reason);
      continue;
    }
    corpus.samples.push_back({rec.id, rec.label, std::move(bytes)});
  }
  return corpus;
}

}  // namespace advbyte::container
