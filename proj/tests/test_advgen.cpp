#include <doctest.h>

#include <cmath>
#include <limits>
#include <set>

#include "advbyte/advgen.hpp"
#include "advbyte/corpus.hpp"
#include "advbyte/error.hpp"
#include "fixtures.hpp"

using namespace advbyte;
using namespace advbyte::advgen;
using container::Region;

namespace {

int brute_force_projection(std::span<const double> e, const ad::Tensor& w) {
  int best = -1;
  double best_dist = std::numeric_limits<double>::infinity();
  for (int j = 0; j < 256; ++j) {
    double dist = 0;
    for (std::size_t k = 0; k < e.size(); ++k) {
      const double diff = e[k] - w.at(static_cast<std::size_t>(j), k);
      dist += diff * diff;
    }
    if (dist < best_dist) {
      best_dist = dist;
      best = j;
    }
  }
  return best;
}

std::vector<container::ByteSample> small_batch(int n, std::uint64_t seed = 21) {
  container::CorpusSpec spec;
  spec.group_count = 3;
  spec.group_counts = {6, 6, 6};
  spec.min_length = 2048;
  spec.max_length = 2560;
  spec.seed = seed;
  auto all = container::generate_corpus(spec);
  std::vector<container::ByteSample> out;
  for (int k = 0; k < n; ++k) out.push_back(all[static_cast<std::size_t>((k * 7) % all.size())]);
  return out;
}

GenConfig gen_config(std::uint64_t seed = 5) {
  GenConfig c;
  c.seed = seed;
  return c;
}

PoolConfig pool_config(const model::ModelConfig& m) {
  PoolConfig p;
  p.count = m.gp_count;
  p.dim = m.embed_dim;
  p.seed = 17;
  return p;
}

}  // namespace

TEST_CASE("nearest-byte projection") {
  const auto params = model::init_params(fixtures::small_model(), 1);
  const auto& w = params.embedding();
  SUBCASE("exact row") {
    std::vector<double> e(w.data() + 77 * w.dim(1), w.data() + 78 * w.dim(1));
    CHECK(nearest_byte_projection(e, w) == 77);
  }
  SUBCASE("ties resolve to the lowest index") {
    ad::Tensor table({257, 2});
    for (std::size_t j = 0; j < 257; ++j) {
      table.at(j, 0) = 100.0 + static_cast<double>(j);
      table.at(j, 1) = 100.0;
    }
    table.at(3, 0) = -1.0;
    table.at(3, 1) = 0.0;
    table.at(9, 0) = 1.0;
    table.at(9, 1) = 0.0;
    const std::vector<double> mid = {0.0, 0.0};
    CHECK(nearest_byte_projection(mid, table) == 3);
  }
  SUBCASE("the PAD row is never a candidate") {
    const std::vector<double> zero(w.dim(1), 0.0);
    CHECK(nearest_byte_projection(zero, w) != model::kPadToken);
    CHECK(nearest_byte_projection(zero, w) == brute_force_projection(zero, w));
  }
  SUBCASE("random vectors match the exhaustive scan") {
    Rng rng(3);
    std::normal_distribution<double> d(0.0, 0.8);
    const ByteProjector project(w);
    for (int t = 0; t < 2000; ++t) {
      std::vector<double> e(w.dim(1));
      for (auto& v : e) v = d(rng);
      const int expected = brute_force_projection(e, w);
      CHECK(nearest_byte_projection(e, w) == expected);
      CHECK(project(e) == expected);
    }
  }
}

TEST_CASE("argmax and GP selection") {
  CHECK(argmax(std::vector<double>{1, 1, 1, 1}) == 0);
  CHECK(argmax(std::vector<double>{0.1, 0, 0, 0, 0.9, 0.2}) == 4);
  Rng rng(9);
  std::uniform_real_distribution<double> u(-2, 2);
  for (int t = 0; t < 100; ++t) {
    std::vector<double> z(8), scaled(8);
    for (std::size_t k = 0; k < 8; ++k) {
      z[k] = u(rng);
      scaled[k] = 3.7 * z[k];
    }
    CHECK(argmax(z) == argmax(scaled));
  }
  const auto params = model::init_params(fixtures::small_model(), 2);
  const auto trace = model::forward_pass(params, fixtures::random_bytes(1000, 2));
  const auto s = select_gp(trace.repr, params);
  CHECK(s.logits == trace.selection);
  CHECK(s.index == argmax(trace.selection.values()));
}

TEST_CASE("GP momentum recurrence") {
  const auto params = model::init_params(fixtures::small_model(), 3);
  const auto& w = params.embedding();
  PoolConfig pc = pool_config(params.config);
  const PoolCoord coord{Region::Shift, 12};
  const std::vector<double> g = {0.3, -2.0, 0.0, 1e-9};
  const std::vector<double> signs = {1, -1, 0, 1};

  SUBCASE("mu = 0 gives m = sign(g)") {
    pc.momentum_decay = 0.0;
    GPPool pool(pc);
    pool.update(1, coord, g, w);
    pool.update(1, coord, g, w);
    CHECK(pool.entry(1, coord).momentum == signs);
  }
  SUBCASE("two constant steps") {
    GPPool pool(pc);
    const auto init = pool.value_or_initial(2, coord, w);
    pool.update(2, coord, g, w);
    pool.update(2, coord, g, w);
    const auto& e = pool.entry(2, coord);
    for (std::size_t k = 0; k < 4; ++k) {
      CHECK(e.momentum[k] == doctest::Approx((pc.momentum_decay + 1.0) * signs[k]));
      CHECK(e.gp[k] == doctest::Approx(init[k] + 2 * pc.epsilon * signs[k]));
    }
  }
  SUBCASE("zero gradient on fresh momentum leaves GP unchanged") {
    GPPool pool(pc);
    const auto init = pool.value_or_initial(0, coord, w);
    pool.update(0, coord, std::vector<double>(4, 0.0), w);
    CHECK(pool.entry(0, coord).gp == init);
    CHECK(pool.entry(0, coord).momentum == std::vector<double>(4, 0.0));
  }
  SUBCASE("initial value is a random embedding row") {
    GPPool pool(pc);
    const auto init = pool.value_or_initial(3, coord, w);
    bool is_row = false;
    for (std::size_t j = 0; j < 256; ++j) {
      is_row = is_row || std::equal(init.begin(), init.end(), w.data() + j * 4);
    }
    CHECK(is_row);
    CHECK_FALSE(pool.contains(3, coord));
  }
  SUBCASE("bounded pools stay inside the epsilon box") {
    pc.bounded = true;
    GPPool pool(pc);
    for (int t = 0; t < 5; ++t) pool.update(0, coord, g, w);
    for (double v : pool.entry(0, coord).gp) CHECK(std::abs(v) <= pc.epsilon);
  }
  SUBCASE("dimension mismatch") {
    GPPool pool(pc);
    CHECK_THROWS_AS(pool.update(0, coord, std::vector<double>(3, 1.0), w), Error);
  }
}

TEST_CASE("GP pool serialization") {
  const auto params = model::init_params(fixtures::small_model(), 3);
  PoolConfig pc = pool_config(params.config);
  pc.bounded = true;
  GPPool pool(pc);
  pool.update(0, {Region::Dos, 3}, std::vector<double>{1, -1, 0.5, 0}, params.embedding());
  pool.update(3, {Region::Pad, 2047}, std::vector<double>{-1, -1, 0.5, 2}, params.embedding());
  const auto bytes = pool.serialize();
  CHECK(GPPool::deserialize(bytes) == pool);
  const auto path = fixtures::temp_dir("pool") / "gp.bin";
  pool.save(path);
  CHECK(GPPool::load(path) == pool);
  auto bad = bytes;
  bad[2] ^= 1;
  CHECK_THROWS_AS(GPPool::deserialize(bad), Error);
  bad = bytes;
  bad.push_back(0);
  CHECK_THROWS_AS(GPPool::deserialize(bad), Error);
}

TEST_CASE("randomized preparation") {
  const auto batch = small_batch(2);
  const auto a = prepare_sample(batch[0], {}, 1, 0);
  CHECK(a.packed == container::repack(std::span<const std::uint8_t>(batch[0].bytes)));
  std::size_t changed = 0;
  for (std::size_t o = 0; o < a.packed.size(); ++o) {
    if (a.packed[o] != a.randomized[o]) {
      CHECK(a.map.contains_offset(o));
      ++changed;
    }
  }
  CHECK(changed > a.map.size() / 2);
  CHECK(prepare_sample(batch[0], {}, 1, 0).randomized == a.randomized);
  CHECK_FALSE(prepare_sample(batch[0], {}, 1, 1).randomized == a.randomized);
  CHECK_FALSE(prepare_sample(batch[0], {}, 2, 0).randomized == a.randomized);
  container::ByteSample broken = batch[1];
  broken.bytes[0] = 0;
  CHECK_THROWS_AS(prepare_sample(broken, {}, 1, 0), Error);
}

TEST_CASE("generation is confined and projection-valid") {
  auto params = model::init_params(fixtures::small_model(), 4);
  GPPool pool(pool_config(params.config));
  const auto batch = small_batch(8);
  for (bool sign_mode : {false, true}) {
    GenConfig gc = gen_config();
    gc.fgsm_sign_mode = sign_mode;
    std::vector<GenTrace> traces;
    const auto before_params = params;
    const auto result = gen_adv_mal_batch(batch, params, pool, gc, 0, &traces);
    REQUIRE(result.samples.size() == batch.size());
    const auto& w = before_params.embedding();
    for (std::size_t k = 0; k < batch.size(); ++k) {
      const auto& adv = result.samples[k];
      const auto& t = traces[k];
      CHECK(adv.parent_id == batch[k].id);
      CHECK(adv.sample.label == batch[k].label);
      REQUIRE(adv.sample.bytes.size() == t.packed.size());
      const std::set<std::size_t> touched(adv.touched.begin(), adv.touched.end());
      for (std::size_t o = 0; o < t.packed.size(); ++o) {
        if (!t.map.contains_offset(o)) CHECK(adv.sample.bytes[o] == t.packed[o]);
        if (adv.sample.bytes[o] != t.packed[o]) CHECK(touched.count(o) == 1);
      }
      for (std::size_t o : adv.touched) CHECK(t.map.contains_offset(o));
      // Final octet = projection of W[intermediate] + eps * step.
      for (std::size_t m = 0; m < t.map.size(); m += 37) {
        const std::size_t o = t.map.entries[m].offset;
        std::vector<double> e(w.dim(1));
        for (std::size_t j = 0; j < e.size(); ++j) {
          const double g = t.gradients[m][j];
          e[j] = w.at(t.intermediate[o], j) + gc.epsilon * (sign_mode ? sign(g) : g);
        }
        CHECK(adv.sample.bytes[o] == brute_force_projection(e, w));
      }
    }
    // Only the selection head moved.
    for (const auto& name : model::model_param_names()) CHECK(params.tensors.at(name) == before_params.tensors.at(name));
    CHECK(result.selection_loss.has_value());
  }
}

TEST_CASE("zero epsilon with zero GP returns the randomized sample") {
  auto params = model::init_params(fixtures::small_model(), 5);
  PoolConfig pc = pool_config(params.config);
  pc.zero_init = true;
  pc.epsilon = 0.0;
  GPPool pool(pc);
  GenConfig gc = gen_config();
  gc.epsilon = 0.0;
  const auto batch = small_batch(4);
  std::vector<GenTrace> traces;
  const auto result = gen_adv_mal_batch(batch, params, pool, gc, 3, &traces);
  for (std::size_t k = 0; k < batch.size(); ++k) {
    CHECK(traces[k].intermediate == traces[k].randomized);
    CHECK(result.samples[k].sample.bytes == traces[k].randomized);
  }
}

TEST_CASE("mu = 0 momentum equals the sign of an independently recomputed gradient") {
  auto params = model::init_params(fixtures::small_model(), 6);
  PoolConfig pc = pool_config(params.config);
  pc.momentum_decay = 0.0;
  GPPool pool(pc);
  GenConfig gc = gen_config();
  gc.momentum_decay = 0.0;
  const auto batch = small_batch(4);
  std::vector<GenTrace> traces;
  auto snapshot = params;
  const auto result = gen_adv_mal_batch(batch, params, pool, gc, 0, &traces);
  // The gradient is taken after the selection step, which does not touch theta.
  for (std::size_t k = 0; k < batch.size(); ++k) {
    const auto tokens = model::tokenize(traces[k].intermediate, params.config.max_len);
    const auto oracle = model::ce_gradient_wrt_embeddings(snapshot, model::embed_tokens(snapshot, tokens), batch[k].label);
    const int i = *result.samples[k].gp_index;
    // Later samples overwrite shared coordinates; check the last writer only.
    bool last = true;
    for (std::size_t later = k + 1; later < batch.size(); ++later) last = last && *result.samples[later].gp_index != i;
    if (!last) continue;
    for (const auto& entry : traces[k].map.entries) {
      const auto& m = pool.entry(i, {entry.region, entry.index}).momentum;
      for (std::size_t j = 0; j < m.size(); ++j) CHECK(m[j] == sign(oracle.grad.at(entry.offset, j)));
    }
  }
}

TEST_CASE("generation is deterministic") {
  const auto batch = small_batch(6);
  auto run = [&] {
    auto params = model::init_params(fixtures::small_model(), 7);
    GPPool pool(pool_config(params.config));
    std::vector<Bytes> out;
    for (std::uint64_t round = 0; round < 2; ++round) {
      for (auto& s : gen_adv_mal_batch(batch, params, pool, gen_config(), round).samples) out.push_back(s.sample.bytes);
    }
    return std::make_pair(out, pool);
  };
  const auto a = run(), b = run();
  CHECK(a.first == b.first);
  CHECK(a.second == b.second);
}

TEST_CASE("GP coordinates stay within region caps") {
  auto params = model::init_params(fixtures::small_model(), 8);
  GPPool pool(pool_config(params.config));
  GenConfig gc = gen_config();
  gc.caps = {64, 32};
  gen_adv_mal_batch(small_batch(8), params, pool, gc, 0);
  CHECK(pool.total_entries() > 0);
  for (int i = 0; i < pool.count(); ++i) {
    for (const auto& [coord, entry] : pool.entries(i)) {
      switch (coord.region) {
        case Region::Dos: CHECK(coord.index < 58); break;
        case Region::Shift: CHECK(coord.index < 1024); break;
        case Region::Slack: CHECK(coord.index < 64); break;
        case Region::Pad: CHECK(coord.index < 32); break;
      }
    }
  }
}

TEST_CASE("the FGSM step does not lower the batch loss") {
  int held = 0;
  const int trials = 10;
  for (int t = 0; t < trials; ++t) {
    auto params = model::init_params(fixtures::small_model(), 100 + static_cast<std::uint64_t>(t));
    GPPool pool(pool_config(params.config));
    GenConfig gc = gen_config(static_cast<std::uint64_t>(t));
    gc.fgsm_sign_mode = (t % 2) == 1;
    const auto batch = small_batch(6, 30 + static_cast<std::uint64_t>(t));
    std::vector<GenTrace> traces;
    const auto result = gen_adv_mal_batch(batch, params, pool, gc, 0, &traces);
    double before = 0, after = 0;
    for (std::size_t k = 0; k < batch.size(); ++k) {
      before += -std::log(model::forward_pass(params, traces[k].intermediate).probs[static_cast<std::size_t>(batch[k].label)]);
      after += -std::log(model::forward_pass(params, result.samples[k].sample.bytes).probs[static_cast<std::size_t>(batch[k].label)]);
    }
    if (after >= before) ++held;
  }
  CHECK(held >= 8);
}

TEST_CASE("single-sample wrapper") {
  auto params = model::init_params(fixtures::small_model(), 9);
  GPPool pool(pool_config(params.config));
  const auto batch = small_batch(1);
  GenTrace trace;
  const auto adv = gen_adv_mal(batch[0], params, pool, gen_config(), 0, &trace);
  CHECK(adv.gp_index.has_value());
  CHECK(trace.map.size() == adv.touched.size());
}
