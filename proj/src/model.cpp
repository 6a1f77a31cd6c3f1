#include "advbyte/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "advbyte/error.hpp"
#include "advbyte/rng.hpp"

namespace advbyte::model {

using ad::Graph;
using ad::Shape;
using ad::Tensor;
using ad::Var;

void ModelConfig::validate() const {
  auto invalid = [](const std::string& why) { fail(ErrorKind::InvalidConfig, "model config: " + why); };
  if (embed_dim < 1 || max_len < 1 || window < 1 || channels < 1 || proj_dim < 1) {
    invalid("all dimensions must be >= 1");
  }
  if (max_len % window != 0) invalid("max_len must be divisible by window");
  if (groups < 2) invalid("need at least 2 groups");
  if (gp_count < 1) invalid("gp_count must be >= 1");
}

void ModelConfig::write(KeyValues& kv) const {
  kv.set("model.embed_dim", embed_dim);
  kv.set("model.max_len", max_len);
  kv.set("model.window", window);
  kv.set("model.channels", channels);
  kv.set("model.proj_dim", proj_dim);
  kv.set("model.groups", groups);
  kv.set("model.gp_count", gp_count);
}

ModelConfig ModelConfig::read(const KeyValues& kv) {
  ModelConfig c;
  auto size = [&kv](const char* key, std::size_t& out) {
    if (kv.has(key)) out = static_cast<std::size_t>(kv.get_int(key));
  };
  size("model.embed_dim", c.embed_dim);
  size("model.max_len", c.max_len);
  size("model.window", c.window);
  size("model.channels", c.channels);
  size("model.proj_dim", c.proj_dim);
  if (kv.has("model.groups")) c.groups = static_cast<int>(kv.get_int("model.groups"));
  if (kv.has("model.gp_count")) c.gp_count = static_cast<int>(kv.get_int("model.gp_count"));
  c.validate();
  return c;
}

std::vector<std::string> model_param_names() {
  return {"embed.weight",        "conv.weight",       "conv.bias",        "gate.weight",
          "gate.bias",           "channel_gate.weight", "channel_gate.bias", "classifier.weight",
          "classifier.bias"};
}

std::vector<std::string> projection_param_names() {
  return {"projection.0.weight", "projection.0.bias", "projection.1.weight", "projection.1.bias"};
}

std::vector<std::string> selection_param_names() { return {"selection.weight", "selection.bias"}; }

namespace {

struct TensorSpec {
  std::string name;
  Shape shape;
  std::size_t fan_in;
};

std::vector<TensorSpec> tensor_specs(const ModelConfig& c) {
  const std::size_t wd = c.window * c.embed_dim;
  const std::size_t r = c.repr_dim();
  const auto G = static_cast<std::size_t>(c.groups);
  const auto K = static_cast<std::size_t>(c.gp_count);
  return {
      {"embed.weight", {kVocab, c.embed_dim}, 1},
      {"conv.weight", {wd, c.channels}, wd},
      {"conv.bias", {c.channels}, wd},
      {"gate.weight", {wd, c.channels}, wd},
      {"gate.bias", {c.channels}, wd},
      {"channel_gate.weight", {c.channels, c.channels}, c.channels},
      {"channel_gate.bias", {c.channels}, c.channels},
      {"classifier.weight", {r, G}, r},
      {"classifier.bias", {G}, r},
      {"projection.0.weight", {r, c.proj_dim}, r},
      {"projection.0.bias", {c.proj_dim}, r},
      {"projection.1.weight", {c.proj_dim, c.proj_dim}, c.proj_dim},
      {"projection.1.bias", {c.proj_dim}, c.proj_dim},
      {"selection.weight", {r, K}, r},
      {"selection.bias", {K}, r},
  };
}

}  // namespace

ModelParams init_params(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  ModelParams params{config, {}};
  std::uint64_t index = 0;
  for (const auto& spec : tensor_specs(config)) {
    Rng rng(derive_seed(seed, 0x1A17, index++));
    const double bound = 1.0 / std::sqrt(static_cast<double>(spec.fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    Tensor t(spec.shape);
    for (auto& v : t.values()) v = dist(rng);
    params.tensors.add(spec.name, std::move(t));
  }
  Tensor& w = params.tensors.at("embed.weight");
  std::fill_n(w.data() + static_cast<std::size_t>(kPadToken) * config.embed_dim, config.embed_dim, 0.0);
  return params;
}

void check_params(const ModelParams& params) {
  params.config.validate();
  for (const auto& spec : tensor_specs(params.config)) {
    if (!params.tensors.contains(spec.name)) {
      fail(ErrorKind::CheckpointMismatch, "checkpoint lacks " + spec.name);
    }
    if (params.tensors.at(spec.name).shape() != spec.shape) {
      fail(ErrorKind::CheckpointMismatch, spec.name + " has shape " +
                                              ad::shape_string(params.tensors.at(spec.name).shape()) +
                                              ", config expects " + ad::shape_string(spec.shape));
    }
  }
}

std::vector<int> tokenize(std::span<const std::uint8_t> bytes, std::size_t max_len) {
  std::vector<int> tokens(max_len, kPadToken);
  const std::size_t n = std::min(bytes.size(), max_len);
  for (std::size_t i = 0; i < n; ++i) tokens[i] = bytes[i];
  return tokens;
}

Tensor embed_tokens(const ModelParams& params, std::span<const int> tokens) {
  const Tensor& w = params.embedding();
  const std::size_t d = params.config.embed_dim;
  Tensor out(Shape{tokens.size(), d});
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    std::copy_n(w.data() + static_cast<std::size_t>(tokens[i]) * d, d, out.data() + i * d);
  }
  return out;
}

Binding::Binding(Graph& g, const ad::ParamSet& params, std::span<const std::string> names,
                 bool requires_grad)
    : names_(names.begin(), names.end()) {
  for (const auto& name : names_) vars_.push_back(g.input(params.at(name), requires_grad));
}

Binding::Binding(std::vector<std::string> names, std::vector<Var> vars)
    : names_(std::move(names)), vars_(std::move(vars)) {
  if (names_.size() != vars_.size()) fail(ErrorKind::ShapeMismatch, "one var per bound name required");
}

Var Binding::operator[](std::string_view name) const {
  auto it = std::find(names_.begin(), names_.end(), name);
  if (it == names_.end()) fail(ErrorKind::InvalidConfig, "parameter not bound: " + std::string(name));
  return vars_[static_cast<std::size_t>(it - names_.begin())];
}

ad::ParamSet Binding::grads(Graph& g) const {
  ad::ParamSet out;
  for (std::size_t i = 0; i < names_.size(); ++i) out.add(names_[i], g.grad(vars_[i]));
  return out;
}

Var embed(Graph& g, const Binding& b, std::span<const int> tokens) {
  return ad::gather_rows(g, b["embed.weight"], tokens);
}

Var representation(Graph& g, const Binding& b, const ModelConfig& config, Var embeddings) {
  const Tensor& e = g.value(embeddings);
  if (e.rank() != 2 || e.dim(0) != config.max_len || e.dim(1) != config.embed_dim) {
    fail(ErrorKind::ShapeMismatch, "representation expects [" + std::to_string(config.max_len) + "," +
                                       std::to_string(config.embed_dim) + "] embeddings, got " +
                                       ad::shape_string(e.shape()));
  }
  const Var windows = ad::reshape(g, embeddings, {config.windows(), config.window * config.embed_dim});
  const Var conv = ad::affine(g, windows, b["conv.weight"], b["conv.bias"]);
  const Var gate = ad::sigmoid(g, ad::affine(g, windows, b["gate.weight"], b["gate.bias"]));
  const Var gated = ad::mul(g, conv, gate);
  const Var context = ad::mean_rows(g, gated);
  const Var channel_gate =
      ad::sigmoid(g, ad::affine(g, context, b["channel_gate.weight"], b["channel_gate.bias"]));
  return ad::max_rows(g, ad::mul_rowwise(g, gated, channel_gate));
}

Var classifier_logits(Graph& g, const Binding& b, Var h) {
  return ad::affine(g, h, b["classifier.weight"], b["classifier.bias"]);
}

Var projection_head(Graph& g, const Binding& b, Var h) {
  const Var hidden = ad::relu(g, ad::affine(g, h, b["projection.0.weight"], b["projection.0.bias"]));
  return ad::affine(g, hidden, b["projection.1.weight"], b["projection.1.bias"]);
}

Var selection_logits(Graph& g, const Binding& b, Var h) {
  return ad::affine(g, h, b["selection.weight"], b["selection.bias"]);
}

namespace {

std::vector<std::string> names_for(unsigned stages) {
  std::vector<std::string> names;
  if (stages & (kEmbed | kRepresent)) names.push_back("embed.weight");
  if (stages & (kRepresent | kClassify | kProject | kSelect)) {
    for (const auto& n : model_param_names()) {
      if (n != "embed.weight" && n.rfind("classifier", 0) != 0) names.push_back(n);
    }
  }
  if (stages & kClassify) {
    names.push_back("classifier.weight");
    names.push_back("classifier.bias");
  }
  if (stages & kProject) {
    for (const auto& n : projection_param_names()) names.push_back(n);
  }
  if (stages & kSelect) {
    for (const auto& n : selection_param_names()) names.push_back(n);
  }
  return names;
}

ForwardTrace run_from(const ModelParams& params, const Tensor& embeddings, unsigned stages) {
  ForwardTrace trace;
  trace.stages = stages;
  if (stages & kEmbed) trace.embeddings = embeddings;
  if (!(stages & (kRepresent | kClassify | kProject | kSelect))) return trace;

  Graph g;
  const auto names = names_for(stages);
  const Binding b(g, params.tensors, names, false);
  const Var e = g.input(embeddings);
  const Var h = representation(g, b, params.config, e);
  if (stages & kRepresent) trace.repr = g.value(h);
  if (stages & kClassify) {
    const Var logits = classifier_logits(g, b, h);
    trace.logits = g.value(logits);
    trace.probs = g.value(ad::softmax_rows(g, logits));
  }
  if (stages & kProject) trace.projection = g.value(projection_head(g, b, h));
  if (stages & kSelect) trace.selection = g.value(selection_logits(g, b, h));
  return trace;
}

}  // namespace

ForwardTrace forward_pass(const ModelParams& params, std::span<const std::uint8_t> bytes,
                          unsigned stages) {
  const auto tokens = tokenize(bytes, params.config.max_len);
  return run_from(params, embed_tokens(params, tokens), stages);
}

ForwardTrace forward_from_embeddings(const ModelParams& params, const Tensor& embeddings,
                                     unsigned stages) {
  return run_from(params, embeddings, stages);
}

ClassifierPass::ClassifierPass(const ModelParams& params, const Tensor& embeddings) {
  const auto names = names_for(kRepresent | kClassify);
  const Binding b(graph_, params.tensors, names, false);
  embeddings_ = graph_.input(embeddings, true);
  logits_ = classifier_logits(graph_, b, representation(graph_, b, params.config, embeddings_));
}

Tensor ClassifierPass::embedding_gradient(const Tensor& logits_seed) {
  graph_.backward(logits_, logits_seed);
  return graph_.grad(embeddings_);
}

EmbeddingGradient ce_gradient_wrt_embeddings(const ModelParams& params, const Tensor& embeddings,
                                             int label) {
  ClassifierPass pass(params, embeddings);
  EmbeddingGradient out;
  out.logits = pass.logits();
  const std::size_t G = out.logits.size();
  if (label < 0 || static_cast<std::size_t>(label) >= G) {
    fail(ErrorKind::ShapeMismatch, "label " + std::to_string(label) + " outside 0.." + std::to_string(G - 1));
  }
  out.probs = Tensor(Shape{G});
  const double mx = *std::max_element(out.logits.values().begin(), out.logits.values().end());
  double total = 0.0;
  for (std::size_t j = 0; j < G; ++j) total += (out.probs[j] = std::exp(out.logits[j] - mx));
  for (std::size_t j = 0; j < G; ++j) out.probs[j] /= total;
  out.loss = -std::log(std::max(out.probs[static_cast<std::size_t>(label)], 1e-12));

  // d CE / d logits = softmax - onehot
  Tensor seed = out.probs;
  seed[static_cast<std::size_t>(label)] -= 1.0;
  out.grad = pass.embedding_gradient(seed);
  return out;
}

int predict(const ModelParams& params, std::span<const std::uint8_t> bytes) {
  const auto trace = forward_pass(params, bytes, kClassify);
  const auto& p = trace.logits;
  return static_cast<int>(std::max_element(p.values().begin(), p.values().end()) - p.values().begin());
}

}  // namespace advbyte::model
