#include "advbyte/advgen.hpp"

#include <algorithm>
#include <limits>

#include "advbyte/error.hpp"
#include "advbyte/params.hpp"
#include "advbyte/rng.hpp"

namespace advbyte::advgen {

using ad::Shape;
using ad::Tensor;

namespace {
constexpr std::string_view kPoolMagic = "ADVBGPPL";
constexpr std::uint32_t kPoolVersion = 1;
}  // namespace

GPPool::GPPool(PoolConfig config) : config_(config) {
  if (config_.count < 1 || config_.dim < 1) fail(ErrorKind::InvalidConfig, "GP pool needs K >= 1 and d >= 1");
  entries_.resize(static_cast<std::size_t>(config_.count));
}

bool GPPool::contains(int i, PoolCoord coord) const { return entries(i).count(coord) != 0; }

const GPPool::Entry& GPPool::entry(int i, PoolCoord coord) const {
  auto it = entries(i).find(coord);
  if (it == entries(i).end()) fail(ErrorKind::InvalidConfig, "GP entry not initialized");
  return it->second;
}

std::size_t GPPool::total_entries() const {
  std::size_t total = 0;
  for (const auto& e : entries_) total += e.size();
  return total;
}

int GPPool::initial_octet(int i, PoolCoord coord) const {
  return static_cast<int>(derive_seed(config_.seed, static_cast<std::uint64_t>(i),
                                      static_cast<std::uint64_t>(coord.region), coord.index) &
                          0xFF);
}

std::vector<double> GPPool::value_or_initial(int i, PoolCoord coord, const Tensor& embedding) const {
  auto it = entries(i).find(coord);
  if (it != entries(i).end()) return it->second.gp;
  if (config_.zero_init) return std::vector<double>(config_.dim, 0.0);
  const double* row = embedding.data() + static_cast<std::size_t>(initial_octet(i, coord)) * config_.dim;
  std::vector<double> gp(row, row + config_.dim);
  if (config_.bounded) {
    for (auto& v : gp) v = std::clamp(v, -config_.epsilon, config_.epsilon);
  }
  return gp;
}

void GPPool::update(int i, PoolCoord coord, std::span<const double> gradient, const Tensor& embedding) {
  if (gradient.size() != config_.dim) fail(ErrorKind::ShapeMismatch, "GP gradient has wrong dimension");
  auto& map = entries_.at(static_cast<std::size_t>(i));
  auto it = map.find(coord);
  if (it == map.end()) {
    Entry fresh{value_or_initial(i, coord, embedding), std::vector<double>(config_.dim, 0.0)};
    it = map.emplace(coord, std::move(fresh)).first;
  }
  Entry& e = it->second;
  for (std::size_t k = 0; k < config_.dim; ++k) {
    e.momentum[k] = config_.momentum_decay * e.momentum[k] + sign(gradient[k]);
    e.gp[k] += config_.epsilon * sign(e.momentum[k]);
    if (config_.bounded) e.gp[k] = std::clamp(e.gp[k], -config_.epsilon, config_.epsilon);
  }
}

std::vector<std::uint8_t> GPPool::serialize() const {
  ad::ByteWriter w;
  w.raw(kPoolMagic);
  w.u32(kPoolVersion);
  w.u32(static_cast<std::uint32_t>(config_.count));
  w.u32(static_cast<std::uint32_t>(config_.dim));
  w.f64(config_.momentum_decay);
  w.f64(config_.epsilon);
  w.u64(config_.seed);
  w.u8(static_cast<std::uint8_t>((config_.zero_init ? 1 : 0) | (config_.bounded ? 2 : 0)));
  for (const auto& map : entries_) {
    w.u32(static_cast<std::uint32_t>(map.size()));
    for (const auto& [coord, e] : map) {
      w.u8(static_cast<std::uint8_t>(coord.region));
      w.u32(coord.index);
      for (double v : e.gp) w.f64(v);
      for (double v : e.momentum) w.f64(v);
    }
  }
  return w.take();
}

GPPool GPPool::deserialize(std::span<const std::uint8_t> bytes) {
  ad::ByteReader r(bytes);
  if (r.raw(kPoolMagic.size()) != kPoolMagic) fail(ErrorKind::CheckpointMismatch, "bad GP pool magic");
  if (r.u32() != kPoolVersion) fail(ErrorKind::CheckpointMismatch, "unsupported GP pool version");
  PoolConfig c;
  c.count = static_cast<int>(r.u32());
  c.dim = r.u32();
  c.momentum_decay = r.f64();
  c.epsilon = r.f64();
  c.seed = r.u64();
  const std::uint8_t flags = r.u8();
  if (flags > 3) fail(ErrorKind::CheckpointMismatch, "bad GP pool flags");
  c.zero_init = (flags & 1) != 0;
  c.bounded = (flags & 2) != 0;
  GPPool pool(c);
  for (auto& map : pool.entries_) {
    const std::uint32_t n = r.u32();
    for (std::uint32_t k = 0; k < n; ++k) {
      const std::uint8_t region = r.u8();
      if (region > static_cast<std::uint8_t>(Region::Pad)) {
        fail(ErrorKind::CheckpointMismatch, "bad region type in GP pool");
      }
      PoolCoord coord{static_cast<Region>(region), r.u32()};
      Entry e{std::vector<double>(c.dim), std::vector<double>(c.dim)};
      for (auto& v : e.gp) v = r.f64();
      for (auto& v : e.momentum) v = r.f64();
      map.emplace(coord, std::move(e));
    }
  }
  if (!r.done()) fail(ErrorKind::CheckpointMismatch, "trailing octets after GP pool");
  return pool;
}

void GPPool::save(const std::filesystem::path& path) const { ad::write_file(path, serialize()); }

GPPool GPPool::load(const std::filesystem::path& path) { return deserialize(ad::read_file(path)); }

void update_gp_momentum(GPPool& pool, int i, std::span<const container::PerturbationEntry> positions,
                        std::span<const std::vector<double>> gradients, const Tensor& embedding) {
  if (positions.size() != gradients.size()) {
    fail(ErrorKind::ShapeMismatch, "one gradient per perturbation position required");
  }
  for (std::size_t k = 0; k < positions.size(); ++k) {
    pool.update(i, {positions[k].region, positions[k].index}, gradients[k], embedding);
  }
}

int nearest_byte_projection(std::span<const double> e, const Tensor& embedding) {
  return ByteProjector(embedding)(e);
}

ByteProjector::ByteProjector(const Tensor& embedding) : dim_(embedding.dim(1)), columns_(dim_ * 256) {
  if (embedding.dim(0) < 256) fail(ErrorKind::ShapeMismatch, "embedding table has fewer than 256 rows");
  for (std::size_t j = 0; j < 256; ++j)
    for (std::size_t k = 0; k < dim_; ++k) columns_[k * 256 + j] = embedding.at(j, k);
}

int ByteProjector::operator()(std::span<const double> e) const {
  if (e.size() != dim_) fail(ErrorKind::ShapeMismatch, "projection vector has wrong dimension");
  alignas(64) double dist[256] = {};
  for (std::size_t k = 0; k < dim_; ++k) {
    const double ek = e[k];
    const double* col = columns_.data() + k * 256;
    for (std::size_t j = 0; j < 256; ++j) {
      const double diff = ek - col[j];
      dist[j] += diff * diff;
    }
  }
  int best = 0;
  for (int j = 1; j < 256; ++j) {
    if (dist[j] < dist[best]) best = j;
  }
  return best;
}

int argmax(std::span<const double> values) {
  if (values.empty()) fail(ErrorKind::ShapeMismatch, "argmax of empty vector");
  return static_cast<int>(std::max_element(values.begin(), values.end()) - values.begin());
}

Selection select_gp(const Tensor& repr, const model::ModelParams& params) {
  const Tensor& w = params.tensors.at("selection.weight");
  const Tensor& b = params.tensors.at("selection.bias");
  if (repr.size() != w.dim(0)) fail(ErrorKind::ShapeMismatch, "select_gp: representation size mismatch");
  Selection s;
  s.logits = b;
  for (std::size_t r = 0; r < w.dim(0); ++r)
    for (std::size_t k = 0; k < w.dim(1); ++k) s.logits[k] += repr[r] * w.at(r, k);
  s.index = argmax(s.logits.values());
  return s;
}

Prepared prepare_sample(const ByteSample& sample, const container::RegionCaps& caps, std::uint64_t seed,
                        std::uint64_t round) {
  Prepared p;
  p.packed = container::repack(std::span<const std::uint8_t>(sample.bytes));
  p.map = container::perturbation_positions(p.packed, caps);
  if (p.map.empty()) {
    fail(ErrorKind::EmptyPerturbationMap, "sample " + sample.id + " has no perturbation positions");
  }
  p.randomized = p.packed;
  Rng rng(derive_seed(seed, hash_id(sample.id), round, 0x52414E44));
  std::uniform_int_distribution<int> octet(0, 255);
  for (const auto& entry : p.map.entries) p.randomized[entry.offset] = static_cast<std::uint8_t>(octet(rng));
  return p;
}

std::vector<std::vector<double>> position_gradients(const PerturbationMap& map, const Tensor& gradient) {
  const std::size_t rows = gradient.dim(0);
  const std::size_t d = gradient.dim(1);
  std::vector<std::vector<double>> out;
  out.reserve(map.size());
  for (const auto& entry : map.entries) {
    if (entry.offset < rows) {
      const double* g = gradient.data() + entry.offset * d;
      out.emplace_back(g, g + d);
    } else {
      out.emplace_back(d, 0.0);
    }
  }
  return out;
}

void step_and_project(Bytes& bytes, const PerturbationMap& map, const Tensor& gradient,
                      const Tensor& embedding, double epsilon, bool sign_mode) {
  const std::size_t rows = gradient.dim(0);
  const std::size_t d = embedding.dim(1);
  const ByteProjector project(embedding);
  std::vector<double> e(d);
  for (const auto& entry : map.entries) {
    const double* row = embedding.data() + static_cast<std::size_t>(bytes[entry.offset]) * d;
    const double* g = entry.offset < rows ? gradient.data() + entry.offset * d : nullptr;
    for (std::size_t k = 0; k < d; ++k) {
      const double gk = g ? g[k] : 0.0;
      e[k] = row[k] + epsilon * (sign_mode ? sign(gk) : gk);
    }
    bytes[entry.offset] = static_cast<std::uint8_t>(project(e));
  }
}

BatchResult gen_adv_mal_batch(std::span<const ByteSample> batch, model::ModelParams& params, GPPool& pool,
                              const GenConfig& config, std::uint64_t round, std::vector<GenTrace>* traces) {
  BatchResult result;
  std::vector<Prepared> prepared;
  for (std::size_t k = 0; k < batch.size(); ++k) {
    try {
      prepared.push_back(prepare_sample(batch[k], config.caps, config.seed, round));
      result.source_index.push_back(k);
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::EmptyPerturbationMap) throw;
      warn("advgen", std::string("skipped: ") + e.what());
      result.skipped.push_back(batch[k].id);
    }
  }
  const std::size_t n = prepared.size();
  const model::ModelConfig& mc = params.config;
  std::vector<int> labels;
  for (std::size_t k : result.source_index) labels.push_back(batch[k].label);

  std::vector<Bytes> intermediate(n);
  std::vector<std::optional<int>> chosen(n);
  if (config.use_gp) {
    if (pool.config().dim != mc.embed_dim || pool.count() != mc.gp_count) {
      fail(ErrorKind::ShapeMismatch, "GP pool does not match the model (K, d)");
    }
    // Representation and selection logits of the randomized samples.
    Tensor reprs(Shape{n, mc.repr_dim()});
    std::vector<Selection> selections(n);
    for (std::size_t k = 0; k < n; ++k) {
      const auto trace = model::forward_pass(params, prepared[k].randomized, model::kRepresent);
      std::copy(trace.repr.values().begin(), trace.repr.values().end(), reprs.data() + k * mc.repr_dim());
      selections[k] = select_gp(trace.repr, params);
    }

    // One SGD step on the selection head for the whole batch.
    if (n >= 2) {
      ad::Graph g;
      const auto names = model::selection_param_names();
      const model::Binding bound(g, params.tensors, names, true);
      const ad::Var logits = model::selection_logits(g, bound, g.input(reprs));
      const auto cl = loss::selection_cl_loss(g, logits, labels, config.loss);
      if (!cl.degenerate && cl.anchors > 0) {
        g.backward(cl.value);
        const ad::ParamSet grads = bound.grads(g);
        for (const auto& name : names) {
          Tensor& p = params.tensors.at(name);
          const Tensor& gr = grads.at(name);
          for (std::size_t j = 0; j < p.size(); ++j) p[j] -= config.selection_lr * gr[j];
        }
        result.selection_loss = g.value(cl.value).item();
      }
    }

    const Tensor& w = params.embedding();
    const std::size_t d = mc.embed_dim;
    const ByteProjector project(w);
    std::vector<double> e(d);
    for (std::size_t k = 0; k < n; ++k) {
      const int i = selections[k].index;
      chosen[k] = i;
      intermediate[k] = prepared[k].randomized;
      for (const auto& entry : prepared[k].map.entries) {
        const auto gp = pool.value_or_initial(i, {entry.region, entry.index}, w);
        const double* row = w.data() + static_cast<std::size_t>(intermediate[k][entry.offset]) * d;
        for (std::size_t j = 0; j < d; ++j) e[j] = row[j] + gp[j];
        intermediate[k][entry.offset] = static_cast<std::uint8_t>(project(e));
      }
    }
  } else {
    for (std::size_t k = 0; k < n; ++k) intermediate[k] = prepared[k].randomized;
  }

  // FGSM step at the perturbation positions.
  const Tensor& w = params.embedding();
  std::vector<std::vector<std::vector<double>>> grads(n);
  for (std::size_t k = 0; k < n; ++k) {
    const auto tokens = model::tokenize(intermediate[k], mc.max_len);
    const auto ce = model::ce_gradient_wrt_embeddings(params, model::embed_tokens(params, tokens), labels[k]);
    Bytes adv = intermediate[k];
    step_and_project(adv, prepared[k].map, ce.grad, w, config.epsilon, config.fgsm_sign_mode);
    grads[k] = position_gradients(prepared[k].map, ce.grad);

    AdvSample out;
    const ByteSample& parent = batch[result.source_index[k]];
    out.sample = {parent.id, parent.label, std::move(adv)};
    out.parent_id = parent.id;
    out.gp_index = chosen[k];
    out.touched.reserve(prepared[k].map.size());
    for (const auto& entry : prepared[k].map.entries) out.touched.push_back(entry.offset);
    result.samples.push_back(std::move(out));

    if (traces) {
      traces->push_back({prepared[k].packed, prepared[k].randomized, intermediate[k], prepared[k].map, grads[k]});
    }
  }

  // Pool updates in sample order.
  if (config.use_gp) {
    for (std::size_t k = 0; k < n; ++k) {
      update_gp_momentum(pool, *chosen[k], prepared[k].map.entries, grads[k], w);
    }
  }
  return result;
}

AdvSample gen_adv_mal(const ByteSample& sample, model::ModelParams& params, GPPool& pool,
                      const GenConfig& config, std::uint64_t round, GenTrace* trace) {
  std::vector<GenTrace> traces;
  auto result = gen_adv_mal_batch(std::span<const ByteSample>(&sample, 1), params, pool, config, round,
                                  trace ? &traces : nullptr);
  if (result.samples.empty()) {
    fail(ErrorKind::EmptyPerturbationMap, "sample " + sample.id + " has no perturbation positions");
  }
  if (trace) *trace = std::move(traces.front());
  return std::move(result.samples.front());
}

}  // namespace advbyte::advgen
