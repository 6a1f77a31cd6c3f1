#include <doctest.h>

#include <json.hpp>

#include "advbyte/attacks.hpp"
#include "advbyte/corpus.hpp"
#include "advbyte/error.hpp"
#include "fixtures.hpp"

using namespace advbyte;
using namespace advbyte::attacks;

namespace {

std::vector<container::ByteSample> samples(std::uint64_t seed = 41) {
  container::CorpusSpec spec;
  spec.group_count = 3;
  spec.group_counts = {3, 3, 3};
  spec.min_length = 2048;
  spec.max_length = 2560;
  spec.seed = seed;
  return container::generate_corpus(spec);
}

void check_confined(const container::ByteSample& parent, const advgen::AdvSample& adv, const AttackConfig& c) {
  const auto packed = container::repack(std::span<const std::uint8_t>(parent.bytes));
  const auto map = container::perturbation_positions(packed, c.caps);
  REQUIRE(adv.sample.bytes.size() == packed.size());
  for (std::size_t o = 0; o < packed.size(); ++o) {
    if (!map.contains_offset(o)) CHECK(adv.sample.bytes[o] == packed[o]);
  }
}

}  // namespace

TEST_CASE("zero-iteration PGD returns the randomized sample") {
  const auto params = model::init_params(fixtures::small_model(), 1);
  AttackConfig c;
  c.iterations = 0;
  c.seed = 4;
  for (const auto& s : samples()) {
    CHECK(pgd_attack(s, params, c).sample.bytes == advgen::prepare_sample(s, c.caps, c.seed, c.round).randomized);
  }
}

TEST_CASE("attacks stay inside the perturbation map") {
  const auto params = model::init_params(fixtures::small_model(), 2);
  AttackConfig c;
  c.iterations = 5;
  c.cw_steps = 5;
  for (const auto& s : samples()) {
    for (AttackKind kind : {AttackKind::PGD, AttackKind::CW}) {
      c.kind = kind;
      c.project_every_iteration = true;
      check_confined(s, run_attack(s, params, c), c);
      c.project_every_iteration = false;
      check_confined(s, run_attack(s, params, c), c);
    }
  }
}

TEST_CASE("one PGD step of size epsilon equals a sign-mode FGSM step") {
  auto params = model::init_params(fixtures::small_model(), 3);
  AttackConfig c;
  c.iterations = 1;
  c.alpha = c.epsilon;
  c.seed = 12;
  c.round = 2;
  advgen::GenConfig g;
  g.fgsm_sign_mode = true;
  g.use_gp = false;
  g.seed = c.seed;
  g.epsilon = c.epsilon;
  advgen::GPPool pool({params.config.gp_count, params.config.embed_dim});
  for (const auto& s : samples()) {
    const auto fgsm = advgen::gen_adv_mal(s, params, pool, g, c.round);
    CHECK(pgd_attack(s, params, c).sample.bytes == fgsm.sample.bytes);
  }
}

TEST_CASE("C&W leaves an already misclassified sample at its initialization") {
  const auto params = model::init_params(fixtures::small_model(), 4);
  AttackConfig c;
  c.kind = AttackKind::CW;
  c.cw_steps = 20;
  for (auto s : samples()) {
    const auto init = advgen::prepare_sample(s, c.caps, c.seed, c.round).randomized;
    s.label = (model::predict(params, init) + 1) % params.config.groups;
    CHECK(cw_style_attack(s, params, c).sample.bytes == init);
  }
}

TEST_CASE("attacks are deterministic") {
  const auto params = model::init_params(fixtures::small_model(), 5);
  AttackConfig c;
  c.iterations = 3;
  c.cw_steps = 3;
  const auto s = samples()[4];
  for (AttackKind kind : {AttackKind::PGD, AttackKind::CW}) {
    c.kind = kind;
    CHECK(run_attack(s, params, c).sample.bytes == run_attack(s, params, c).sample.bytes);
  }
}

TEST_CASE("attack config round trip and validation") {
  AttackConfig c;
  c.kind = AttackKind::CW;
  c.iterations = 70;
  c.seed = 0xFFFFFFFFFFFFFFFFULL;
  c.project_every_iteration = false;
  KeyValues kv;
  c.write(kv);
  const auto back = AttackConfig::read(KeyValues::parse(kv.dump()));
  CHECK(back.kind == AttackKind::CW);
  CHECK(back.iterations == 70);
  CHECK(back.seed == c.seed);
  CHECK(back.step_size() == doctest::Approx(0.06));
  CHECK_FALSE(back.project_every_iteration);

  AttackConfig bad;
  bad.epsilon = 0;
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = {};
  bad.iterations = -1;
  CHECK_THROWS_AS(bad.validate(), Error);
  CHECK_THROWS_AS(parse_attack_kind("fgsm"), Error);
}

TEST_CASE("outcome records") {
  const auto j = nlohmann::json::parse(outcome_json({"g01_0003", 1, 1, 4, true}));
  CHECK(j["id"] == "g01_0003");
  CHECK(j["clean_prediction"] == 1);
  CHECK(j["adversarial_prediction"] == 4);
  CHECK(j["success"] == true);
}

TEST_CASE("malformed inputs are rejected") {
  const auto params = model::init_params(fixtures::small_model(), 6);
  auto s = samples()[0];
  s.bytes.resize(50);
  CHECK_THROWS_AS(pgd_attack(s, params, {}), Error);
  CHECK_THROWS_AS(cw_style_attack(s, params, {}), Error);
}
