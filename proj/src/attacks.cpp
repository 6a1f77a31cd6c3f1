#include "advbyte/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <json.hpp>

#include "advbyte/error.hpp"

namespace advbyte::attacks {

using ad::Shape;
using ad::Tensor;

const char* attack_name(AttackKind kind) noexcept { return kind == AttackKind::PGD ? "pgd" : "cw"; }

AttackKind parse_attack_kind(const std::string& text) {
  if (text == "pgd" || text == "PGD") return AttackKind::PGD;
  if (text == "cw" || text == "CW") return AttackKind::CW;
  fail(ErrorKind::InvalidConfig, "unknown attack '" + text + "' (expected pgd or cw)");
}

void AttackConfig::validate() const {
  auto invalid = [](const std::string& why) { fail(ErrorKind::InvalidConfig, "attack config: " + why); };
  if (!(epsilon > 0.0)) invalid("epsilon must be > 0");
  if (iterations < 0) invalid("iterations must be >= 0");
  if (alpha < 0.0) invalid("alpha must be > 0");
  if (!(cw_c > 0.0)) invalid("cw.c must be > 0");
  if (cw_steps < 0) invalid("cw.steps must be >= 0");
  if (!(cw_learning_rate > 0.0)) invalid("cw.learning_rate must be > 0");
}

void AttackConfig::write(KeyValues& kv) const {
  kv.set("attack.kind", std::string(attack_name(kind)));
  kv.set("attack.epsilon", epsilon);
  kv.set("attack.iterations", iterations);
  kv.set("attack.alpha", step_size());
  kv.set("attack.project_every_iteration", project_every_iteration);
  kv.set("attack.cw.c", cw_c);
  kv.set("attack.cw.steps", cw_steps);
  kv.set("attack.cw.learning_rate", cw_learning_rate);
  kv.set("attack.seed", seed);
}

AttackConfig AttackConfig::read(const KeyValues& kv) {
  AttackConfig c;
  if (kv.has("attack.kind")) c.kind = parse_attack_kind(kv.get("attack.kind"));
  if (kv.has("attack.epsilon")) c.epsilon = kv.get_double("attack.epsilon");
  if (kv.has("attack.iterations")) c.iterations = static_cast<int>(kv.get_int("attack.iterations"));
  if (kv.has("attack.alpha")) c.alpha = kv.get_double("attack.alpha");
  if (kv.has("attack.project_every_iteration")) {
    c.project_every_iteration = kv.get_bool("attack.project_every_iteration");
  }
  if (kv.has("attack.cw.c")) c.cw_c = kv.get_double("attack.cw.c");
  if (kv.has("attack.cw.steps")) c.cw_steps = static_cast<int>(kv.get_int("attack.cw.steps"));
  if (kv.has("attack.cw.learning_rate")) c.cw_learning_rate = kv.get_double("attack.cw.learning_rate");
  if (kv.has("attack.seed")) c.seed = kv.get_u64("attack.seed");
  c.validate();
  return c;
}

namespace {

advgen::AdvSample make_result(const container::ByteSample& x, container::Bytes bytes,
                              const container::PerturbationMap& map) {
  advgen::AdvSample out;
  out.sample = {x.id, x.label, std::move(bytes)};
  out.parent_id = x.id;
  out.touched.reserve(map.size());
  for (const auto& e : map.entries) out.touched.push_back(e.offset);
  return out;
}

// Continuous embedding of every position, [positions, d].
Tensor position_embeddings(const container::Bytes& bytes, const container::PerturbationMap& map,
                           const Tensor& w) {
  const std::size_t d = w.dim(1);
  Tensor out(Shape{map.size(), d});
  for (std::size_t k = 0; k < map.size(); ++k) {
    std::copy_n(w.data() + static_cast<std::size_t>(bytes[map.entries[k].offset]) * d, d, out.data() + k * d);
  }
  return out;
}

// Model input with the rows of the positions replaced by `e`.
Tensor input_embeddings(const model::ModelParams& params, const container::Bytes& bytes,
                        const container::PerturbationMap& map, const Tensor& e) {
  const std::size_t L = params.config.max_len;
  const std::size_t d = params.config.embed_dim;
  Tensor x = model::embed_tokens(params, model::tokenize(bytes, L));
  for (std::size_t k = 0; k < map.size(); ++k) {
    const std::size_t off = map.entries[k].offset;
    if (off < L) std::copy_n(e.data() + k * d, d, x.data() + off * d);
  }
  return x;
}

void project_all(container::Bytes& bytes, const container::PerturbationMap& map, const Tensor& e,
                 const Tensor& w) {
  const std::size_t d = w.dim(1);
  const advgen::ByteProjector project(w);
  for (std::size_t k = 0; k < map.size(); ++k) {
    bytes[map.entries[k].offset] =
        static_cast<std::uint8_t>(project(std::span<const double>(e.data() + k * d, d)));
  }
}

}  // namespace

advgen::AdvSample pgd_attack(const container::ByteSample& x, const model::ModelParams& params,
                             const AttackConfig& config) {
  config.validate();
  auto prep = advgen::prepare_sample(x, config.caps, config.seed, config.round);
  const Tensor& w = params.embedding();
  const std::size_t d = params.config.embed_dim;
  const std::size_t L = params.config.max_len;
  const double alpha = config.step_size();
  const auto& map = prep.map;

  container::Bytes bytes = prep.randomized;
  const Tensor e0 = position_embeddings(bytes, map, w);
  Tensor e = e0;
  for (int it = 0; it < config.iterations; ++it) {
    // With per-iteration projection the model sees the projected octets while
    // the clamped iterate keeps accumulating steps smaller than a cell.
    const Tensor input = config.project_every_iteration && it > 0
                             ? model::embed_tokens(params, model::tokenize(bytes, L))
                             : input_embeddings(params, bytes, map, e);
    const auto ce = model::ce_gradient_wrt_embeddings(params, input, x.label);
    for (std::size_t k = 0; k < map.size(); ++k) {
      const std::size_t off = map.entries[k].offset;
      for (std::size_t j = 0; j < d; ++j) {
        const double g = off < L ? ce.grad[off * d + j] : 0.0;
        double delta = e[k * d + j] - e0[k * d + j] + alpha * advgen::sign(g);
        delta = std::clamp(delta, -config.epsilon, config.epsilon);
        e[k * d + j] = e0[k * d + j] + delta;
      }
    }
    if (config.project_every_iteration) project_all(bytes, map, e, w);
  }
  if (!config.project_every_iteration) project_all(bytes, map, e, w);
  return make_result(x, std::move(bytes), map);
}

advgen::AdvSample cw_style_attack(const container::ByteSample& x, const model::ModelParams& params,
                                  const AttackConfig& config) {
  config.validate();
  auto prep = advgen::prepare_sample(x, config.caps, config.seed, config.round);
  const Tensor& w = params.embedding();
  const std::size_t d = params.config.embed_dim;
  const std::size_t L = params.config.max_len;
  const auto& map = prep.map;
  const auto y = static_cast<std::size_t>(x.label);

  container::Bytes bytes = prep.randomized;
  const Tensor e0 = position_embeddings(bytes, map, w);
  Tensor delta(e0.shape());
  Tensor m1(e0.shape());
  Tensor m2(e0.shape());
  const double b1 = 0.9;
  const double b2 = 0.999;
  Tensor e = e0;
  for (int step = 1; step <= config.cw_steps; ++step) {
    for (std::size_t i = 0; i < e.size(); ++i) e[i] = e0[i] + delta[i];
    model::ClassifierPass pass(params, input_embeddings(params, bytes, map, e));
    const Tensor& logits = pass.logits();
    if (y >= logits.size()) fail(ErrorKind::ShapeMismatch, "label outside the classifier range");
    std::size_t other = y == 0 ? 1 : 0;
    for (std::size_t j = 0; j < logits.size(); ++j) {
      if (j != y && logits[j] > logits[other]) other = j;
    }
    Tensor grad(delta.shape());
    for (std::size_t i = 0; i < delta.size(); ++i) grad[i] = 2.0 * delta[i];
    if (logits[y] - logits[other] > 0.0) {
      Tensor seed(Shape{logits.size()});
      seed[y] = config.cw_c;
      seed[other] = -config.cw_c;
      const Tensor ge = pass.embedding_gradient(seed);
      for (std::size_t k = 0; k < map.size(); ++k) {
        const std::size_t off = map.entries[k].offset;
        if (off >= L) continue;
        for (std::size_t j = 0; j < d; ++j) grad[k * d + j] += ge[off * d + j];
      }
    }
    const double c1 = 1.0 - std::pow(b1, step);
    const double c2 = 1.0 - std::pow(b2, step);
    for (std::size_t i = 0; i < delta.size(); ++i) {
      m1[i] = b1 * m1[i] + (1.0 - b1) * grad[i];
      m2[i] = b2 * m2[i] + (1.0 - b2) * grad[i] * grad[i];
      delta[i] -= config.cw_learning_rate * (m1[i] / c1) / (std::sqrt(m2[i] / c2) + 1e-8);
    }
  }
  for (std::size_t i = 0; i < e.size(); ++i) e[i] = e0[i] + delta[i];
  project_all(bytes, map, e, w);
  return make_result(x, std::move(bytes), map);
}

advgen::AdvSample run_attack(const container::ByteSample& x, const model::ModelParams& params,
                             const AttackConfig& config) {
  return config.kind == AttackKind::PGD ? pgd_attack(x, params, config) : cw_style_attack(x, params, config);
}

std::string outcome_json(const AttackOutcome& o) {
  nlohmann::json j{{"id", o.id},
                   {"label", o.label},
                   {"clean_prediction", o.clean_prediction},
                   {"adversarial_prediction", o.adversarial_prediction},
                   {"success", o.success}};
  return j.dump();
}

}  // namespace advbyte::attacks
