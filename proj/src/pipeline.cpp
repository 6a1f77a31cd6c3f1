#include "advbyte/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <fstream>
#include <map>
#include <mutex>
#include <numeric>
#include <thread>

#include <json.hpp>

#include "advbyte/error.hpp"
#include "advbyte/losses.hpp"
#include "advbyte/rng.hpp"

namespace advbyte::pipeline {

using ad::Graph;
using ad::Tensor;
using ad::Var;

const char* mode_name(TrainMode mode) noexcept {
  switch (mode) {
    case TrainMode::Plain: return "plain";
    case TrainMode::FgsmAt: return "fgsm_at";
    case TrainMode::Roma: return "roma";
  }
  return "?";
}

TrainMode parse_mode(const std::string& text) {
  if (text == "plain") return TrainMode::Plain;
  if (text == "fgsm_at") return TrainMode::FgsmAt;
  if (text == "roma") return TrainMode::Roma;
  fail(ErrorKind::InvalidConfig, "unknown mode '" + text + "' (expected plain, fgsm_at or roma)");
}

TrainConfig TrainConfig::desk() {
  TrainConfig c;
  c.learning_rate = 1e-3;
  c.gp_bounded = true;
  return c;
}

TrainConfig TrainConfig::paper() {
  TrainConfig c;
  c.epochs = 100;
  c.batch_size = 64;
  c.model.gp_count = 50;
  c.caps = container::RegionCaps::paper();
  return c;
}

void TrainConfig::validate() const {
  auto invalid = [](const std::string& why) { fail(ErrorKind::InvalidConfig, "train config: " + why); };
  if (epochs < 1) invalid("epochs must be >= 1");
  if (batch_size < 1) invalid("batch_size must be >= 1");
  if (!(learning_rate > 0)) invalid("learning_rate must be > 0");
  if (!(epsilon > 0)) invalid("epsilon must be > 0");
  if (!(momentum_decay >= 0 && momentum_decay < 1)) invalid("momentum_decay must lie in [0,1)");
  if (!(selection_lr > 0)) invalid("selection_lr must be > 0");
  loss.validate();
  model.validate();
}

void TrainConfig::write(KeyValues& kv) const {
  kv.set("train.epochs", epochs);
  kv.set("train.batch_size", batch_size);
  kv.set("train.learning_rate", learning_rate);
  kv.set("train.lambda_ac", loss.lambda_ac);
  kv.set("train.lambda_ad", loss.lambda_ad);
  kv.set("train.temperature", loss.temperature);
  kv.set("train.normalize", loss.normalize);
  kv.set("train.epsilon", epsilon);
  kv.set("train.momentum_decay", momentum_decay);
  kv.set("train.selection_lr", selection_lr);
  kv.set("train.fgsm_sign_mode", fgsm_sign_mode);
  kv.set("train.gp_bounded", gp_bounded);
  kv.set("train.mode", std::string(mode_name(mode)));
  kv.set("train.no_gp", no_gp);
  kv.set("train.no_ac", no_ac);
  kv.set("train.no_ad", no_ad);
  kv.set("train.slack_cap", caps.slack_cap);
  kv.set("train.pad_cap", caps.pad_cap);
  kv.set("train.seed", seed);
  model.write(kv);
}

TrainConfig TrainConfig::read(const KeyValues& kv, const TrainConfig& base) {
  TrainConfig c = base;
  auto num = [&kv](const char* key, double& out) {
    if (kv.has(key)) out = kv.get_double(key);
  };
  auto flag = [&kv](const char* key, bool& out) {
    if (kv.has(key)) out = kv.get_bool(key);
  };
  if (kv.has("train.epochs")) c.epochs = static_cast<int>(kv.get_int("train.epochs"));
  if (kv.has("train.batch_size")) c.batch_size = static_cast<std::size_t>(kv.get_int("train.batch_size"));
  num("train.learning_rate", c.learning_rate);
  num("train.lambda_ac", c.loss.lambda_ac);
  num("train.lambda_ad", c.loss.lambda_ad);
  num("train.temperature", c.loss.temperature);
  flag("train.normalize", c.loss.normalize);
  num("train.epsilon", c.epsilon);
  num("train.momentum_decay", c.momentum_decay);
  num("train.selection_lr", c.selection_lr);
  flag("train.fgsm_sign_mode", c.fgsm_sign_mode);
  flag("train.gp_bounded", c.gp_bounded);
  if (kv.has("train.mode")) c.mode = parse_mode(kv.get("train.mode"));
  flag("train.no_gp", c.no_gp);
  flag("train.no_ac", c.no_ac);
  flag("train.no_ad", c.no_ad);
  if (kv.has("train.slack_cap")) c.caps.slack_cap = static_cast<std::size_t>(kv.get_int("train.slack_cap"));
  if (kv.has("train.pad_cap")) c.caps.pad_cap = static_cast<std::size_t>(kv.get_int("train.pad_cap"));
  if (kv.has("train.seed")) c.seed = kv.get_u64("train.seed");
  KeyValues model_kv;
  c.model.write(model_kv);
  for (const auto& [k, v] : kv.entries()) {
    if (k.rfind("model.", 0) == 0) model_kv.set(k, v);
  }
  c.model = model::ModelConfig::read(model_kv);
  c.validate();
  return c;
}

advgen::GenConfig TrainConfig::gen_config() const {
  advgen::GenConfig g;
  g.epsilon = epsilon;
  g.momentum_decay = momentum_decay;
  g.selection_lr = selection_lr;
  g.fgsm_sign_mode = fgsm_sign_mode;
  g.use_gp = uses_gp();
  g.caps = caps;
  g.loss = loss;
  g.seed = derive_seed(seed, 0xADF6);
  return g;
}

advgen::PoolConfig TrainConfig::pool_config() const {
  advgen::PoolConfig p;
  p.count = model.gp_count;
  p.dim = model.embed_dim;
  p.momentum_decay = momentum_decay;
  p.epsilon = epsilon;
  p.bounded = gp_bounded;
  p.seed = derive_seed(seed, 0x6B00);
  return p;
}

double TrainConfig::effective_lambda_ac() const noexcept {
  return mode == TrainMode::Roma && !no_ac ? loss.lambda_ac : 0.0;
}

double TrainConfig::effective_lambda_ad() const noexcept {
  return mode == TrainMode::Roma && !no_ad ? loss.lambda_ad : 0.0;
}

namespace {
std::atomic<std::size_t> g_threads{1};
}

void set_thread_count(std::size_t threads) noexcept { g_threads = threads; }

std::size_t thread_count() noexcept {
  const std::size_t t = g_threads;
  if (t > 0) return t;
  return std::max<std::size_t>(1, std::thread::hardware_concurrency());
}

void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn) {
  const std::size_t workers = std::min(thread_count(), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(n);
  auto run = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w + 1 < workers; ++w) pool.emplace_back(run);
  run();
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

Split split_corpus(const std::vector<ByteSample>& corpus, double ratio, std::uint64_t seed) {
  if (!(ratio > 0.0 && ratio < 1.0)) fail(ErrorKind::InvalidSpec, "split ratio must lie in (0,1)");
  std::map<int, std::vector<std::size_t>> by_label;
  for (std::size_t i = 0; i < corpus.size(); ++i) by_label[corpus[i].label].push_back(i);
  Split split;
  for (auto& [label, idx] : by_label) {
    if (idx.size() < 2) {
      fail(ErrorKind::InvalidSpec, "group " + std::to_string(label) + " has fewer than 2 samples");
    }
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return corpus[a].id < corpus[b].id; });
    Rng rng(derive_seed(seed, 0x5B117, static_cast<std::uint64_t>(label)));
    std::shuffle(idx.begin(), idx.end(), rng);
    auto n_train = static_cast<std::size_t>(std::floor(ratio * static_cast<double>(idx.size()) + 0.5));
    n_train = std::clamp<std::size_t>(n_train, 1, idx.size() - 1);
    for (std::size_t k = 0; k < idx.size(); ++k) {
      (k < n_train ? split.train : split.test).push_back(corpus[idx[k]]);
    }
  }
  return split;
}

std::string log_json(const LogRecord& r) {
  nlohmann::json j{{"epoch", r.epoch}, {"batch", r.batch}, {"L_AT", r.at},
                   {"L_AC", r.ac},     {"L_AD", r.ad},       {"L_Total", r.total}};
  if (r.selection) j["L_CL"] = *r.selection;
  return j.dump();
}

TrainResult train(const TrainConfig& config, const std::vector<ByteSample>& train_set, const LogSink& sink) {
  config.validate();
  return train(config, train_set, model::init_params(config.model, derive_seed(config.seed, 0x1417)),
               advgen::GPPool(config.pool_config()), sink);
}

namespace {

struct StepLosses {
  double at = 0.0;
  double ac = 0.0;
  double ad = 0.0;
  double total = 0.0;
};

// One Adam step on theta and theta_P over a batch of clean (and optionally
// adversarial) samples.
StepLosses train_step(const TrainConfig& config, model::ModelParams& params, ad::AdamState& adam,
                      const std::vector<const ByteSample*>& clean, const std::vector<ByteSample>* adv) {
  const auto& mc = params.config;
  Graph g;
  auto names = model::model_param_names();
  for (const auto& n : model::projection_param_names()) names.push_back(n);
  const model::Binding b(g, params.tensors, names, true);

  std::vector<int> labels;
  std::vector<Var> reprs;
  for (const ByteSample* s : clean) {
    labels.push_back(s->label);
    const auto tokens = model::tokenize(s->bytes, mc.max_len);
    reprs.push_back(model::representation(g, b, mc, model::embed(g, b, tokens)));
  }
  const std::size_t n = clean.size();
  if (adv) {
    for (const auto& s : *adv) {
      const auto tokens = model::tokenize(s.bytes, mc.max_len);
      reprs.push_back(model::representation(g, b, mc, model::embed(g, b, tokens)));
    }
  }
  const Var h = ad::concat_rows(g, reprs);
  const Var probs_all = ad::softmax_rows(g, model::classifier_logits(g, b, h));

  StepLosses out;
  Var total;
  if (!adv) {
    total = loss::clean_ce_loss(g, probs_all, labels);
    out.at = g.value(total).item();
  } else {
    const Var probs = ad::slice_rows(g, probs_all, 0, n);
    const Var probs_adv = ad::slice_rows(g, probs_all, n, 2 * n);
    total = loss::at_loss(g, probs, probs_adv, labels);
    out.at = g.value(total).item();
    const double lac = config.effective_lambda_ac();
    const double lad = config.effective_lambda_ad();
    if (lac > 0.0) {
      std::vector<int> both = labels;
      both.insert(both.end(), labels.begin(), labels.end());
      const auto ac = loss::ac_loss(g, model::projection_head(g, b, h), both, config.loss);
      out.ac = g.value(ac.value).item();
      total = ad::add(g, total, ad::scale(g, ac.value, lac));
    }
    if (lad > 0.0) {
      const Var ad_term = loss::ad_loss(g, probs, probs_adv);
      out.ad = g.value(ad_term).item();
      total = ad::add(g, total, ad::scale(g, ad_term, lad));
    }
  }
  out.total = g.value(total).item();
  g.backward(total);
  ad::ParamSet grads = b.grads(g);
  Tensor& ge = grads.at("embed.weight");
  std::fill_n(ge.data() + static_cast<std::size_t>(model::kPadToken) * mc.embed_dim, mc.embed_dim, 0.0);
  ad::adam_step(adam, params.tensors, grads);
  return out;
}

}  // namespace

TrainResult train(const TrainConfig& config, const std::vector<ByteSample>& train_set,
                  model::ModelParams params, advgen::GPPool pool, const LogSink& sink) {
  config.validate();
  model::check_params(params);
  if (params.config != config.model) fail(ErrorKind::CheckpointMismatch, "parameters do not match model config");
  if (train_set.empty()) fail(ErrorKind::InvalidSpec, "empty training set");

  TrainResult result{std::move(params), std::move(pool), {}, {}};
  auto managed = model::model_param_names();
  for (const auto& n : model::projection_param_names()) managed.push_back(n);
  ad::AdamConfig adam_config;
  adam_config.learning_rate = config.learning_rate;
  ad::AdamState adam(adam_config, result.params.tensors, managed);
  const advgen::GenConfig gen = config.gen_config();

  std::vector<std::size_t> order(train_set.size());
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(config.seed, 0x5F1E, static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), rng);
    int batch_no = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size, ++batch_no) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      std::vector<ByteSample> batch;
      for (std::size_t k = start; k < end; ++k) batch.push_back(train_set[order[k]]);

      LogRecord rec;
      rec.epoch = epoch;
      rec.batch = batch_no;
      StepLosses l;
      if (config.mode == TrainMode::Plain) {
        std::vector<const ByteSample*> clean;
        for (const auto& s : batch) clean.push_back(&s);
        l = train_step(config, result.params, adam, clean, nullptr);
      } else {
        auto generated = advgen::gen_adv_mal_batch(batch, result.params, result.pool, gen,
                                                   static_cast<std::uint64_t>(epoch));
        for (const auto& id : generated.skipped) result.skipped.push_back(id);
        if (generated.samples.empty()) continue;
        std::vector<const ByteSample*> clean;
        std::vector<ByteSample> adv;
        for (std::size_t k = 0; k < generated.samples.size(); ++k) {
          clean.push_back(&batch[generated.source_index[k]]);
          adv.push_back(std::move(generated.samples[k].sample));
        }
        l = train_step(config, result.params, adam, clean, &adv);
        rec.selection = generated.selection_loss;
      }
      rec.at = l.at;
      rec.ac = l.ac;
      rec.ad = l.ad;
      rec.total = l.total;
      if (!std::isfinite(rec.total)) fail(ErrorKind::NonFiniteValue, "training loss is not finite");
      result.log.push_back(rec);
      if (sink) sink(rec);
    }
  }
  return result;
}

bool MetricsReport::operator==(const MetricsReport& other) const {
  if (groups != other.groups || has_adversarial != other.has_adversarial) return false;
  if (attack.has_value() != other.attack.has_value()) return false;
  if (!attack) return true;
  KeyValues a;
  KeyValues b;
  attack->write(a);
  other.attack->write(b);
  return a.entries() == b.entries();
}

namespace {

// Exact non-negative-denominator fraction.
struct Fraction {
  __int128 num = 0;
  __int128 den = 1;

  static __int128 gcd(__int128 a, __int128 b) {
    if (a < 0) a = -a;
    while (b != 0) {
      const __int128 t = a % b;
      a = b;
      b = t;
    }
    return a;
  }
  static Fraction make(__int128 n, __int128 d) {
    const __int128 g = gcd(n, d);
    return g == 0 ? Fraction{0, 1} : Fraction{n / g, d / g};
  }
  Fraction operator+(const Fraction& o) const { return make(num * o.den + o.num * den, den * o.den); }
  Fraction operator*(const Fraction& o) const { return make(num * o.num, den * o.den); }
  double value() const { return static_cast<double>(num) / static_cast<double>(den); }
};

double weighted_accuracy(const MetricsReport& report, bool adversarial) {
  std::int64_t all = 0;
  for (const auto& g : report.groups) all += adversarial ? g.adv_total : g.clean_total;
  if (all == 0) fail(ErrorKind::EmptyEvaluation, "no samples to evaluate");
  Fraction sum;
  for (const auto& g : report.groups) {
    const std::int64_t t = adversarial ? g.adv_total : g.clean_total;
    const std::int64_t c = adversarial ? g.adv_correct : g.clean_correct;
    if (t == 0) continue;
    sum = sum + Fraction::make(c, t) * Fraction::make(t, all);
  }
  return sum.value();
}

}  // namespace

double standard_accuracy(const MetricsReport& report) { return weighted_accuracy(report, false); }

double robust_accuracy(const MetricsReport& report) {
  if (!report.has_adversarial) fail(ErrorKind::EmptyEvaluation, "report has no adversarial counts");
  return weighted_accuracy(report, true);
}

double attack_success_rate(const MetricsReport& report) {
  if (!report.has_adversarial) fail(ErrorKind::EmptyEvaluation, "report has no adversarial counts");
  std::int64_t all = 0;
  for (const auto& g : report.groups) all += g.clean_correct;
  if (all == 0) fail(ErrorKind::EmptyEvaluation, "no clean-correct samples");
  Fraction sum;
  for (const auto& g : report.groups) {
    if (g.clean_correct == 0) continue;
    sum = sum + Fraction::make(g.clean_correct - g.adv_correct, g.clean_correct) *
                    Fraction::make(g.clean_correct, all);
  }
  return sum.value();
}

namespace {
nlohmann::json optional_metric(double (*metric)(const MetricsReport&), const MetricsReport& report) {
  try {
    return metric(report);
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::EmptyEvaluation) throw;
    return nullptr;
  }
}
}  // namespace

std::string metrics_json(const MetricsReport& report) {
  nlohmann::json j;
  j["SA"] = optional_metric(standard_accuracy, report);
  j["RA"] = optional_metric(robust_accuracy, report);
  j["ASR"] = optional_metric(attack_success_rate, report);
  j["has_adversarial"] = report.has_adversarial;
  nlohmann::json groups = nlohmann::json::array();
  for (std::size_t i = 0; i < report.groups.size(); ++i) {
    const auto& g = report.groups[i];
    nlohmann::json row{{"group", i}, {"T_clean", g.clean_total}, {"C_clean", g.clean_correct}};
    if (report.has_adversarial) {
      row["T_adv"] = g.adv_total;
      row["C_adv"] = g.adv_correct;
    }
    groups.push_back(row);
  }
  j["groups"] = groups;
  if (report.attack) {
    KeyValues kv;
    report.attack->write(kv);
    nlohmann::json a;
    for (const auto& [k, v] : kv.entries()) a[k] = v;
    j["attack"] = a;
  } else {
    j["attack"] = nullptr;
  }
  return j.dump(2);
}

std::string metrics_csv(const MetricsReport& report) {
  std::string out = "group,T_clean,C_clean,T_adv,C_adv\n";
  for (std::size_t i = 0; i < report.groups.size(); ++i) {
    const auto& g = report.groups[i];
    out += std::to_string(i) + "," + std::to_string(g.clean_total) + "," + std::to_string(g.clean_correct) + ",";
    if (report.has_adversarial) out += std::to_string(g.adv_total) + "," + std::to_string(g.adv_correct);
    else out += ",";
    out += "\n";
  }
  return out;
}

namespace {
void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
  if (!out) fail(ErrorKind::IoError, "cannot write " + path.string());
}
}  // namespace

void write_metrics(const std::filesystem::path& dir, const MetricsReport& report) {
  std::filesystem::create_directories(dir);
  write_text(dir / "metrics.json", metrics_json(report) + "\n");
  write_text(dir / "metrics.csv", metrics_csv(report));
}

Evaluation evaluate(const model::ModelParams& params, const std::vector<ByteSample>& test_set,
                    const std::optional<attacks::AttackConfig>& attack) {
  model::check_params(params);
  const auto groups = static_cast<std::size_t>(params.config.groups);
  const std::size_t n = test_set.size();
  std::vector<int> clean(n);
  std::vector<int> adv(n);
  parallel_for(n, [&](std::size_t i) {
    const auto& s = test_set[i];
    if (s.label < 0 || static_cast<std::size_t>(s.label) >= groups) {
      fail(ErrorKind::CheckpointMismatch, "sample " + s.id + " has a label outside the model's groups");
    }
    clean[i] = model::predict(params, s.bytes);
    if (!attack) return;
    try {
      adv[i] = model::predict(params, attacks::run_attack(s, params, *attack).sample.bytes);
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::EmptyPerturbationMap) throw;
      warn("evaluate", std::string("no perturbation positions, scored unperturbed: ") + e.what());
      adv[i] = clean[i];
    }
  });

  Evaluation ev;
  ev.report.groups.resize(groups);
  ev.report.has_adversarial = attack.has_value();
  ev.report.attack = attack;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& s = test_set[i];
    auto& g = ev.report.groups[static_cast<std::size_t>(s.label)];
    ++g.clean_total;
    g.clean_correct += clean[i] == s.label;
    if (attack) {
      ++g.adv_total;
      g.adv_correct += adv[i] == s.label;
      ev.outcomes.push_back({s.id, s.label, clean[i], adv[i], clean[i] == s.label && adv[i] != s.label});
    }
  }
  return ev;
}

std::vector<ReprRow> export_representations(const model::ModelParams& params,
                                            const std::vector<ReprInput>& inputs) {
  model::check_params(params);
  std::vector<ReprRow> rows(inputs.size());
  parallel_for(inputs.size(), [&](std::size_t i) {
    const auto& in = inputs[i];
    const auto trace = model::forward_pass(params, in.sample.bytes, model::kRepresent);
    rows[i] = {in.sample.id, in.sample.label, in.adversarial,
               std::vector<double>(trace.repr.values().begin(), trace.repr.values().end())};
  });
  std::stable_sort(rows.begin(), rows.end(), [](const ReprRow& a, const ReprRow& b) {
    if (a.label != b.label) return a.label < b.label;
    if (a.id != b.id) return a.id < b.id;
    return !a.adversarial && b.adversarial;
  });
  return rows;
}

void write_representations(const std::filesystem::path& path, const std::vector<ReprRow>& rows) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::IoError, "cannot write " + path.string());
  const std::size_t r = rows.empty() ? 0 : rows.front().values.size();
  out << "id,label,adversarial";
  for (std::size_t k = 0; k < r; ++k) out << ",h" << k;
  out << "\n";
  char buf[32];
  for (const auto& row : rows) {
    out << row.id << "," << row.label << "," << (row.adversarial ? 1 : 0);
    for (double v : row.values) {
      std::snprintf(buf, sizeof buf, "%.17g", v);
      out << "," << buf;
    }
    out << "\n";
  }
  if (!out) fail(ErrorKind::IoError, "cannot write " + path.string());
}

}  // namespace advbyte::pipeline
