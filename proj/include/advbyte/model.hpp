#pragma once

// Byte attribution network: word embedding -> gated 1-D convolution (window
// == stride) -> global channel gate from the temporal mean -> temporal
// max-pool, followed by three heads on the representation h: classifier
// (softmax over groups), projection MLP, and the K-way selection head.

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "advbyte/graph.hpp"
#include "advbyte/kv.hpp"
#include "advbyte/params.hpp"

namespace advbyte::model {

inline constexpr int kVocab = 257;
inline constexpr int kPadToken = 256;

struct ModelConfig {
  std::size_t embed_dim = 8;
  std::size_t max_len = 16384;
  std::size_t window = 16;
  std::size_t channels = 32;
  std::size_t proj_dim = 32;
  int groups = 6;
  int gp_count = 8;

  std::size_t windows() const noexcept { return max_len / window; }
  std::size_t repr_dim() const noexcept { return channels; }

  void validate() const;
  void write(KeyValues& kv) const;
  static ModelConfig read(const KeyValues& kv);
  bool operator==(const ModelConfig&) const = default;
};

struct ModelParams {
  ModelConfig config;
  ad::ParamSet tensors;

  const ad::Tensor& embedding() const { return tensors.at("embed.weight"); }
};

/// Parameter groups: the attribution model (theta), projection head
/// (theta_P) and selection head (theta_S).
std::vector<std::string> model_param_names();
std::vector<std::string> projection_param_names();
std::vector<std::string> selection_param_names();

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every tensor; the embedding
/// table counts fan_in = 1. The PAD row is zero and stays frozen.
ModelParams init_params(const ModelConfig& config, std::uint64_t seed);

/// Verifies names and shapes against the config (CheckpointMismatch otherwise).
void check_params(const ModelParams& params);

/// Truncates to max_len and pads with the PAD token.
std::vector<int> tokenize(std::span<const std::uint8_t> bytes, std::size_t max_len);

enum Stage : unsigned {
  kEmbed = 1u,
  kRepresent = 2u,
  kClassify = 4u,
  kProject = 8u,
  kSelect = 16u,
  kAllStages = 31u,
};

struct ForwardTrace {
  unsigned stages = 0;
  ad::Tensor embeddings;  // [L, d]
  ad::Tensor repr;        // [r]
  ad::Tensor logits;      // [G]
  ad::Tensor probs;       // [G]
  ad::Tensor projection;  // [proj_dim]
  ad::Tensor selection;   // [K]
};

ForwardTrace forward_pass(const ModelParams& params, std::span<const std::uint8_t> bytes,
                          unsigned stages = kAllStages);
/// Continues a forward pass from [L, d] embeddings (stage composability).
ForwardTrace forward_from_embeddings(const ModelParams& params, const ad::Tensor& embeddings,
                                     unsigned stages = kAllStages);

/// Embedding lookup without a graph, [L, d].
ad::Tensor embed_tokens(const ModelParams& params, std::span<const int> tokens);

/// Binds a subset of the parameters as graph inputs.
class Binding {
 public:
  Binding(ad::Graph& g, const ad::ParamSet& params, std::span<const std::string> names,
          bool requires_grad);
  /// Binds vars that already live in the graph.
  Binding(std::vector<std::string> names, std::vector<ad::Var> vars);
  ad::Var operator[](std::string_view name) const;
  /// Gradients of the bound parameters after g.backward().
  ad::ParamSet grads(ad::Graph& g) const;

 private:
  std::vector<std::string> names_;
  std::vector<ad::Var> vars_;
};

ad::Var embed(ad::Graph& g, const Binding& b, std::span<const int> tokens);
/// [L, d] embeddings -> [r] representation.
ad::Var representation(ad::Graph& g, const Binding& b, const ModelConfig& config, ad::Var embeddings);
/// Heads accept h as [r] or [n, r].
ad::Var classifier_logits(ad::Graph& g, const Binding& b, ad::Var h);
ad::Var projection_head(ad::Graph& g, const Binding& b, ad::Var h);
ad::Var selection_logits(ad::Graph& g, const Binding& b, ad::Var h);

/// Cross-entropy of the classifier at the given embeddings and its gradient
/// with respect to them. Used by every embedding-space attack.
struct EmbeddingGradient {
  double loss = 0.0;
  ad::Tensor logits;
  ad::Tensor probs;
  ad::Tensor grad;  // [L, d]
};

EmbeddingGradient ce_gradient_wrt_embeddings(const ModelParams& params, const ad::Tensor& embeddings,
                                             int label);

/// Forward pass from leaf embeddings kept alive for one backward through the
/// classifier logits.
class ClassifierPass {
 public:
  ClassifierPass(const ModelParams& params, const ad::Tensor& embeddings);

  const ad::Tensor& logits() const { return graph_.value(logits_); }
  /// Gradient of sum(seed * logits) with respect to the embeddings, [L, d].
  ad::Tensor embedding_gradient(const ad::Tensor& logits_seed);

 private:
  ad::Graph graph_;
  ad::Var embeddings_;
  ad::Var logits_;
};

int predict(const ModelParams& params, std::span<const std::uint8_t> bytes);

}  // namespace advbyte::model
