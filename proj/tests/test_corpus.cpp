#include <doctest.h>

#include <algorithm>
#include <fstream>

#include "advbyte/corpus.hpp"
#include "advbyte/error.hpp"
#include "fixtures.hpp"

using namespace advbyte;
using namespace advbyte::container;

namespace {

std::vector<std::size_t> occurrences(const Bytes& bytes, const Bytes& needle) {
  std::vector<std::size_t> out;
  auto it = bytes.begin();
  while ((it = std::search(it, bytes.end(), needle.begin(), needle.end())) != bytes.end()) {
    out.push_back(static_cast<std::size_t>(it - bytes.begin()));
    ++it;
  }
  return out;
}

CorpusSpec small_spec() {
  CorpusSpec spec;
  spec.group_count = 2;
  spec.group_counts = {10, 5};
  spec.min_length = 2048;
  spec.max_length = 4096;
  spec.seed = 11;
  return spec;
}

}  // namespace

TEST_CASE("counts and labels follow the spec") {
  const auto samples = generate_corpus(small_spec());
  REQUIRE(samples.size() == 15);
  CHECK(std::count_if(samples.begin(), samples.end(), [](const auto& s) { return s.label == 0; }) == 10);
  CHECK(std::count_if(samples.begin(), samples.end(), [](const auto& s) { return s.label == 1; }) == 5);
  for (const auto& s : samples) CHECK_NOTHROW(parse_container(s.bytes));
}

TEST_CASE("same seed gives the same corpus") {
  CHECK(generate_corpus(small_spec()) == generate_corpus(small_spec()));
  auto other = small_spec();
  other.seed = 12;
  CHECK_FALSE(generate_corpus(other) == generate_corpus(small_spec()));
}

TEST_CASE("invalid specs are rejected") {
  auto spec = small_spec();
  spec.group_counts = {10, 1};
  CHECK_THROWS_AS(generate_corpus(spec), Error);
  spec = small_spec();
  spec.group_counts = {10};
  CHECK_THROWS_AS(spec.validate(), Error);
  spec = small_spec();
  spec.min_length = 9000;
  CHECK_THROWS_AS(spec.validate(), Error);
}

TEST_CASE("signatures sit in section bodies, never in perturbation positions") {
  const auto spec = CorpusSpec::desk(3);
  const auto signatures = corpus_signatures(spec);
  const auto samples = generate_corpus(spec);
  REQUIRE(signatures.size() == static_cast<std::size_t>(spec.group_count));
  for (const auto& s : samples) {
    for (const Bytes& bytes : {s.bytes, repack(s.bytes)}) {
      const auto layout = parse_container(bytes);
      const auto map = perturbation_positions(layout);
      std::size_t found = 0;
      for (const auto& sig : signatures[static_cast<std::size_t>(s.label)]) {
        for (std::size_t at : occurrences(bytes, sig)) {
          ++found;
          const bool in_payload = std::any_of(layout.sections.begin(), layout.sections.end(), [&](const Section& sec) {
            return at >= sec.payload().begin && at + sig.size() <= sec.payload().end;
          });
          CHECK(in_payload);
          for (std::size_t o = at; o < at + sig.size(); ++o) CHECK_FALSE(map.contains_offset(o));
        }
      }
      CHECK(found >= 1);
    }
  }
}

TEST_CASE("corpus directory round trip") {
  const auto dir = fixtures::temp_dir("corpus_rt");
  const auto samples = generate_corpus(small_spec());
  write_corpus(dir, samples);
  const auto loaded = read_corpus(dir);
  CHECK(loaded.rejected.empty());
  CHECK(loaded.samples == samples);
}

TEST_CASE("unparseable samples are rejected on load") {
  const auto dir = fixtures::temp_dir("corpus_reject");
  auto samples = generate_corpus(small_spec());
  samples[3].bytes[0] = 'Q';
  write_corpus(dir, samples);
  const auto loaded = read_corpus(dir);
  CHECK(loaded.samples.size() == 14);
  REQUIRE(loaded.rejected.size() == 1);
  CHECK(loaded.rejected[0].rfind(samples[3].id, 0) == 0);
}
