#include "advbyte/audit.hpp"

#include <algorithm>
#include <functional>
#include <numeric>
#include <random>

#include <json.hpp>

#include "advbyte/error.hpp"
#include "advbyte/losses.hpp"
#include "advbyte/model.hpp"
#include "advbyte/rng.hpp"

namespace advbyte::audit {

using ad::Graph;
using ad::Shape;
using ad::Tensor;
using ad::Var;

namespace {

using Build = std::function<Var(Graph&, const std::vector<Var>&)>;

struct Instance {
  std::vector<std::string> names;
  std::vector<Tensor> inputs;
  Build build;
};

Tensor uniform(Rng& rng, Shape shape, double lo, double hi) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor t(std::move(shape));
  for (auto& v : t.values()) v = dist(rng);
  return t;
}

// Values bounded away from zero, for ops with a kink there.
Tensor away_from_zero(Rng& rng, Shape shape) {
  Tensor t = uniform(rng, std::move(shape), 0.1, 1.5);
  std::bernoulli_distribution flip(0.5);
  for (auto& v : t.values()) {
    if (flip(rng)) v = -v;
  }
  return t;
}

std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

// Loss = sum(out * R) for a random readout R, so every output coordinate
// contributes a distinct weight.
ad::GradCheckReport check_instance(Instance inst, Rng& rng, const ad::GradCheckOptions& options) {
  Graph g;
  std::vector<Var> vars;
  for (const auto& t : inst.inputs) vars.push_back(g.input(t, true));
  const Var out = inst.build(g, vars);
  const Tensor readout = uniform(rng, g.value(out).shape(), -1.0, 1.0);
  g.backward(out, readout);
  std::vector<Tensor> analytic;
  for (const Var v : vars) analytic.push_back(g.grad(v));

  auto loss = [&]() {
    Graph h;
    std::vector<Var> vs;
    for (const auto& t : inst.inputs) vs.push_back(h.input(t));
    const Tensor& o = h.value(inst.build(h, vs));
    double total = 0.0;
    for (std::size_t i = 0; i < o.size(); ++i) total += o[i] * readout[i];
    return total;
  };
  std::vector<Tensor*> ptrs;
  for (auto& t : inst.inputs) ptrs.push_back(&t);
  return ad::grad_check(loss, ptrs, analytic, inst.names, options);
}

using Generator = std::function<Instance(Rng&)>;

std::vector<std::pair<std::string, Generator>> op_generators() {
  std::vector<std::pair<std::string, Generator>> ops;
  auto unary = [](const char* name, std::function<Var(Graph&, Var)> f, std::function<Tensor(Rng&, Shape)> gen) {
    return std::pair<std::string, Generator>{
        name, [f, gen](Rng& rng) {
          const Shape s{pick(rng, 2, 5), pick(rng, 2, 5)};
          return Instance{{"x"}, {gen(rng, s)}, [f](Graph& g, const std::vector<Var>& v) { return f(g, v[0]); }};
        }};
  };
  auto plain = [](Rng& rng, Shape s) { return uniform(rng, std::move(s), -1.5, 1.5); };
  auto positive = [](Rng& rng, Shape s) { return uniform(rng, std::move(s), 0.3, 2.0); };

  ops.push_back(unary("identity", ad::identity, plain));
  ops.push_back({"reshape", [](Rng& rng) {
                   const std::size_t m = pick(rng, 2, 5), n = pick(rng, 2, 5);
                   return Instance{{"x"}, {uniform(rng, {m, n}, -1, 1)},
                                   [m, n](Graph& g, const std::vector<Var>& v) { return ad::reshape(g, v[0], {n, m}); }};
                 }});
  ops.push_back({"gather_rows", [](Rng& rng) {
                   const std::size_t rows = pick(rng, 3, 6), d = pick(rng, 2, 4);
                   std::vector<int> ids(pick(rng, 3, 8));
                   for (auto& id : ids) id = static_cast<int>(pick(rng, 0, rows - 1));
                   return Instance{{"table"}, {uniform(rng, {rows, d}, -1, 1)},
                                   [ids](Graph& g, const std::vector<Var>& v) { return ad::gather_rows(g, v[0], ids); }};
                 }});
  ops.push_back({"matmul", [](Rng& rng) {
                   const std::size_t m = pick(rng, 2, 5), k = pick(rng, 2, 5), n = pick(rng, 2, 5);
                   return Instance{{"a", "b"}, {uniform(rng, {m, k}, -1, 1), uniform(rng, {k, n}, -1, 1)},
                                   [](Graph& g, const std::vector<Var>& v) { return ad::matmul(g, v[0], v[1]); }};
                 }});
  ops.push_back(unary("transpose", ad::transpose, plain));
  ops.push_back({"affine", [](Rng& rng) {
                   const std::size_t m = pick(rng, 1, 5), k = pick(rng, 2, 6), n = pick(rng, 2, 5);
                   const Shape xs = m == 1 ? Shape{k} : Shape{m, k};
                   return Instance{{"x", "w", "b"},
                                   {uniform(rng, xs, -1, 1), uniform(rng, {k, n}, -1, 1), uniform(rng, {n}, -1, 1)},
                                   [](Graph& g, const std::vector<Var>& v) { return ad::affine(g, v[0], v[1], v[2]); }};
                 }});
  auto binary = [](const char* name, std::function<Var(Graph&, Var, Var)> f) {
    return std::pair<std::string, Generator>{
        name, [f](Rng& rng) {
          const Shape s{pick(rng, 2, 5), pick(rng, 2, 5)};
          return Instance{{"a", "b"}, {uniform(rng, s, -1.5, 1.5), uniform(rng, s, -1.5, 1.5)},
                          [f](Graph& g, const std::vector<Var>& v) { return f(g, v[0], v[1]); }};
        }};
  };
  ops.push_back(binary("add", ad::add));
  ops.push_back(binary("sub", ad::sub));
  ops.push_back(binary("mul", ad::mul));
  ops.push_back({"scale", [](Rng& rng) {
                   const double factor = uniform(rng, {}, -2, 2).item();
                   return Instance{{"x"}, {uniform(rng, {pick(rng, 2, 5), pick(rng, 2, 5)}, -1, 1)},
                                   [factor](Graph& g, const std::vector<Var>& v) { return ad::scale(g, v[0], factor); }};
                 }});
  ops.push_back({"mul_rowwise", [](Rng& rng) {
                   const std::size_t m = pick(rng, 2, 5), n = pick(rng, 2, 5);
                   return Instance{{"x", "v"}, {uniform(rng, {m, n}, -1, 1), uniform(rng, {n}, -1, 1)},
                                   [](Graph& g, const std::vector<Var>& v) { return ad::mul_rowwise(g, v[0], v[1]); }};
                 }});
  ops.push_back({"add_colwise", [](Rng& rng) {
                   const std::size_t m = pick(rng, 2, 5), n = pick(rng, 2, 5);
                   return Instance{{"x", "v"}, {uniform(rng, {m, n}, -1, 1), uniform(rng, {m}, -1, 1)},
                                   [](Graph& g, const std::vector<Var>& v) { return ad::add_colwise(g, v[0], v[1]); }};
                 }});
  ops.push_back(unary("sigmoid", ad::sigmoid, plain));
  ops.push_back(unary("relu", ad::relu, away_from_zero));
  ops.push_back(unary("exp", ad::exp, plain));
  ops.push_back(unary("log", ad::log, positive));
  ops.push_back(unary(
      "log_clamped", [](Graph& g, Var x) { return ad::log_clamped(g, x, 1e-2); },
      [](Rng& rng, Shape s) {
        Tensor t = uniform(rng, std::move(s), 0.05, 2.0);
        t[0] = 1e-3;  // clamp active
        return t;
      }));
  ops.push_back(unary("softmax_rows", ad::softmax_rows, plain));
  ops.push_back(unary("mean_rows", ad::mean_rows, plain));
  ops.push_back(unary("max_rows", ad::max_rows, plain));
  ops.push_back(unary("sum", ad::sum, plain));
  ops.push_back(unary("sum_cols", ad::sum_cols, plain));
  ops.push_back({"dot", [](Rng& rng) {
                   const std::size_t n = pick(rng, 2, 8);
                   return Instance{{"a", "b"}, {uniform(rng, {n}, -1, 1), uniform(rng, {n}, -1, 1)},
                                   [](Graph& g, const std::vector<Var>& v) { return ad::dot(g, v[0], v[1]); }};
                 }});
  ops.push_back({"l2_norm", [](Rng& rng) {
                   return Instance{{"x"}, {uniform(rng, {pick(rng, 2, 8)}, -1, 1)},
                                   [](Graph& g, const std::vector<Var>& v) { return ad::l2_norm(g, v[0]); }};
                 }});
  ops.push_back(unary("l2_normalize_rows", ad::l2_normalize_rows, plain));
  ops.push_back({"concat_rows", [](Rng& rng) {
                   const std::size_t n = pick(rng, 2, 5);
                   if (pick(rng, 0, 1) == 0) {
                     return Instance{{"a", "b", "c"},
                                     {uniform(rng, {n}, -1, 1), uniform(rng, {n}, -1, 1), uniform(rng, {n}, -1, 1)},
                                     [](Graph& g, const std::vector<Var>& v) { return ad::concat_rows(g, v); }};
                   }
                   return Instance{{"a", "b"},
                                   {uniform(rng, {pick(rng, 1, 4), n}, -1, 1), uniform(rng, {pick(rng, 1, 4), n}, -1, 1)},
                                   [](Graph& g, const std::vector<Var>& v) { return ad::concat_rows(g, v); }};
                 }});
  ops.push_back({"slice_rows", [](Rng& rng) {
                   const std::size_t m = pick(rng, 3, 6), n = pick(rng, 2, 4);
                   const std::size_t b = pick(rng, 0, m - 2), e = pick(rng, b + 1, m);
                   return Instance{{"x"}, {uniform(rng, {m, n}, -1, 1)},
                                   [b, e](Graph& g, const std::vector<Var>& v) { return ad::slice_rows(g, v[0], b, e); }};
                 }});
  return ops;
}

model::ModelConfig small_model() {
  model::ModelConfig c;
  c.embed_dim = 3;
  c.max_len = 32;
  c.window = 4;
  c.channels = 5;
  c.proj_dim = 4;
  c.groups = 3;
  c.gp_count = 3;
  return c;
}

// Instance over a subset of model parameters plus extra leading inputs.
Instance stage_instance(const model::ModelParams& params, std::vector<std::string> names,
                        std::vector<std::string> extra_names, std::vector<Tensor> extra,
                        std::function<Var(Graph&, const model::Binding&, const std::vector<Var>&)> body) {
  Instance inst;
  inst.names = extra_names;
  inst.inputs = std::move(extra);
  for (const auto& n : names) {
    inst.names.push_back(n);
    inst.inputs.push_back(params.tensors.at(n));
  }
  const std::size_t lead = extra_names.size();
  inst.build = [names, lead, body](Graph& g, const std::vector<Var>& v) {
    const model::Binding b(names, std::vector<Var>(v.begin() + static_cast<std::ptrdiff_t>(lead), v.end()));
    return body(g, b, std::vector<Var>(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(lead)));
  };
  return inst;
}

std::vector<std::pair<std::string, Generator>> stage_generators() {
  std::vector<std::pair<std::string, Generator>> stages;
  const model::ModelConfig mc = small_model();
  auto params_for = [mc](Rng& rng) { return model::init_params(mc, rng()); };
  auto tokens_for = [mc](Rng& rng) {
    std::vector<int> tokens(mc.max_len, model::kPadToken);
    const std::size_t n = pick(rng, mc.max_len / 2, mc.max_len);
    for (std::size_t i = 0; i < n; ++i) tokens[i] = static_cast<int>(pick(rng, 0, 255));
    return tokens;
  };
  const std::vector<std::string> repr_names = {"conv.weight", "conv.bias", "gate.weight", "gate.bias",
                                               "channel_gate.weight", "channel_gate.bias"};

  stages.push_back({"embed", [=](Rng& rng) {
                      const auto params = params_for(rng);
                      const auto tokens = tokens_for(rng);
                      return stage_instance(params, {"embed.weight"}, {}, {},
                                            [tokens](Graph& g, const model::Binding& b, const std::vector<Var>&) {
                                              return model::embed(g, b, tokens);
                                            });
                    }});
  stages.push_back({"representation", [=](Rng& rng) {
                      const auto params = params_for(rng);
                      Tensor e = uniform(rng, {mc.max_len, mc.embed_dim}, -1, 1);
                      return stage_instance(params, repr_names, {"embeddings"}, {e},
                                            [mc](Graph& g, const model::Binding& b, const std::vector<Var>& x) {
                                              return model::representation(g, b, mc, x[0]);
                                            });
                    }});
  stages.push_back({"classifier", [=](Rng& rng) {
                      const auto params = params_for(rng);
                      Tensor h = uniform(rng, {pick(rng, 1, 4), mc.repr_dim()}, -1, 1);
                      return stage_instance(params, {"classifier.weight", "classifier.bias"}, {"h"}, {h},
                                            [](Graph& g, const model::Binding& b, const std::vector<Var>& x) {
                                              return ad::softmax_rows(g, model::classifier_logits(g, b, x[0]));
                                            });
                    }});
  stages.push_back({"projection", [=](Rng& rng) {
                      const auto params = params_for(rng);
                      Tensor h = uniform(rng, {pick(rng, 1, 4), mc.repr_dim()}, -1, 1);
                      return stage_instance(params, model::projection_param_names(), {"h"}, {h},
                                            [](Graph& g, const model::Binding& b, const std::vector<Var>& x) {
                                              return model::projection_head(g, b, x[0]);
                                            });
                    }});
  stages.push_back({"selection", [=](Rng& rng) {
                      const auto params = params_for(rng);
                      Tensor h = uniform(rng, {pick(rng, 1, 4), mc.repr_dim()}, -1, 1);
                      return stage_instance(params, model::selection_param_names(), {"h"}, {h},
                                            [](Graph& g, const model::Binding& b, const std::vector<Var>& x) {
                                              return model::selection_logits(g, b, x[0]);
                                            });
                    }});
  stages.push_back({"end_to_end", [=](Rng& rng) {
                      const auto params = params_for(rng);
                      const auto tokens = tokens_for(rng);
                      return stage_instance(params, model::model_param_names(), {}, {},
                                            [tokens, mc](Graph& g, const model::Binding& b, const std::vector<Var>&) {
                                              const Var h = model::representation(g, b, mc, model::embed(g, b, tokens));
                                              return ad::softmax_rows(g, model::classifier_logits(g, b, h));
                                            });
                    }});
  return stages;
}

std::vector<int> batch_labels(Rng& rng, std::size_t n, int groups) {
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = static_cast<int>(i % static_cast<std::size_t>(groups));
  std::shuffle(labels.begin(), labels.end(), rng);
  return labels;
}

std::vector<std::pair<std::string, Generator>> loss_generators() {
  std::vector<std::pair<std::string, Generator>> losses;
  auto config_for = [](Rng& rng) {
    loss::LossConfig c;
    c.temperature = uniform(rng, {}, 0.3, 1.0).item();
    c.lambda_ac = uniform(rng, {}, 0.0, 1.0).item();
    c.lambda_ad = uniform(rng, {}, 0.0, 1.0).item();
    return c;
  };
  losses.push_back({"selection_cl", [=](Rng& rng) {
                      const std::size_t n = 2 * pick(rng, 2, 4);
                      const auto labels = batch_labels(rng, n, 2 + static_cast<int>(pick(rng, 0, 1)));
                      const auto cfg = config_for(rng);
                      return Instance{{"logits"}, {uniform(rng, {n, pick(rng, 2, 5)}, -2, 2)},
                                      [labels, cfg](Graph& g, const std::vector<Var>& v) {
                                        return loss::selection_cl_loss(g, v[0], labels, cfg).value;
                                      }};
                    }});
  losses.push_back({"at", [=](Rng& rng) {
                      const std::size_t n = pick(rng, 2, 6), G = pick(rng, 2, 5);
                      const auto labels = batch_labels(rng, n, static_cast<int>(G));
                      return Instance{{"probs", "probs_adv"},
                                      {uniform(rng, {n, G}, 0.05, 1.0), uniform(rng, {n, G}, 0.05, 1.0)},
                                      [labels](Graph& g, const std::vector<Var>& v) {
                                        return loss::at_loss(g, v[0], v[1], labels);
                                      }};
                    }});
  losses.push_back({"clean_ce", [=](Rng& rng) {
                      const std::size_t n = pick(rng, 2, 6), G = pick(rng, 2, 5);
                      const auto labels = batch_labels(rng, n, static_cast<int>(G));
                      return Instance{{"probs"}, {uniform(rng, {n, G}, 0.05, 1.0)},
                                      [labels](Graph& g, const std::vector<Var>& v) {
                                        return loss::clean_ce_loss(g, v[0], labels);
                                      }};
                    }});
  losses.push_back({"ac", [=](Rng& rng) {
                      const std::size_t n = pick(rng, 2, 4);
                      const auto half = batch_labels(rng, n, 2);
                      std::vector<int> labels = half;
                      labels.insert(labels.end(), half.begin(), half.end());
                      const auto cfg = config_for(rng);
                      return Instance{{"projections"}, {uniform(rng, {2 * n, pick(rng, 2, 5)}, -1, 1)},
                                      [labels, cfg](Graph& g, const std::vector<Var>& v) {
                                        return loss::ac_loss(g, v[0], labels, cfg).value;
                                      }};
                    }});
  losses.push_back({"ad", [=](Rng& rng) {
                      const std::size_t n = pick(rng, 2, 6), G = pick(rng, 2, 5);
                      return Instance{{"probs", "probs_adv"},
                                      {uniform(rng, {n, G}, 0.05, 1.0), uniform(rng, {n, G}, 0.05, 1.0)},
                                      [](Graph& g, const std::vector<Var>& v) { return loss::ad_loss(g, v[0], v[1]); }};
                    }});
  losses.push_back({"total", [=](Rng& rng) {
                      const std::size_t n = pick(rng, 2, 4), G = pick(rng, 2, 4);
                      const auto half = batch_labels(rng, n, 2);
                      std::vector<int> both = half;
                      both.insert(both.end(), half.begin(), half.end());
                      const auto cfg = config_for(rng);
                      // Softmax inputs keep the probabilities normalized as in training.
                      return Instance{{"logits", "logits_adv", "projections"},
                                      {uniform(rng, {n, G}, -2, 2), uniform(rng, {n, G}, -2, 2),
                                       uniform(rng, {2 * n, pick(rng, 2, 5)}, -1, 1)},
                                      [half, both, cfg](Graph& g, const std::vector<Var>& v) {
                                        const Var p = ad::softmax_rows(g, v[0]);
                                        const Var pa = ad::softmax_rows(g, v[1]);
                                        return loss::total_loss(g, loss::at_loss(g, p, pa, half),
                                                                loss::ac_loss(g, v[2], both, cfg).value,
                                                                loss::ad_loss(g, p, pa), cfg);
                                      }};
                    }});
  return losses;
}

void run_group(const char* kind, const std::vector<std::pair<std::string, Generator>>& gens,
               const AuditOptions& options, std::vector<AuditEntry>& out) {
  for (const auto& [name, gen] : gens) {
    AuditEntry entry;
    entry.kind = kind;
    entry.name = name;
    entry.passed = true;
    for (int k = 0; k < options.instances; ++k) {
      Rng rng(derive_seed(options.seed, hash_id(name), static_cast<std::uint64_t>(k)));
      auto check = options.check;
      check.seed = rng();
      const auto report = check_instance(gen(rng), rng, check);
      ++entry.instances;
      entry.checked += report.checked;
      entry.skipped += report.skipped;
      if (report.max_rel_error >= entry.max_rel_error) {
        entry.max_rel_error = report.max_rel_error;
        entry.worst = report.worst + " (instance " + std::to_string(k) + ")";
      }
      entry.passed = entry.passed && report.passed(options.tolerance);
    }
    out.push_back(std::move(entry));
  }
}

std::vector<std::string> names_of(const std::vector<std::pair<std::string, Generator>>& gens) {
  std::vector<std::string> out;
  for (const auto& g : gens) out.push_back(g.first);
  return out;
}

}  // namespace

std::vector<std::string> audited_ops() { return names_of(op_generators()); }
std::vector<std::string> audited_stages() { return names_of(stage_generators()); }
std::vector<std::string> audited_losses() { return names_of(loss_generators()); }

std::vector<AuditEntry> run_gradient_audit(const AuditOptions& options) {
  if (options.instances < 1) fail(ErrorKind::InvalidConfig, "audit needs at least one instance");
  std::vector<AuditEntry> out;
  run_group("op", op_generators(), options, out);
  run_group("stage", stage_generators(), options, out);
  run_group("loss", loss_generators(), options, out);
  return out;
}

std::string audit_json(const std::vector<AuditEntry>& entries) {
  nlohmann::json arr = nlohmann::json::array();
  bool all = true;
  for (const auto& e : entries) {
    all = all && e.passed;
    arr.push_back({{"kind", e.kind},
                   {"name", e.name},
                   {"instances", e.instances},
                   {"max_rel_error", e.max_rel_error},
                   {"checked", e.checked},
                   {"skipped", e.skipped},
                   {"worst", e.worst},
                   {"passed", e.passed}});
  }
  return nlohmann::json{{"passed", all}, {"entries", arr}}.dump(2);
}

}  // namespace advbyte::audit
