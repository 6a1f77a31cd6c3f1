#include "advbyte/cli.hpp"

#include <algorithm>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "advbyte/audit.hpp"
#include "advbyte/corpus.hpp"
#include "advbyte/error.hpp"
#include "advbyte/kv.hpp"
#include "advbyte/pipeline.hpp"
#include "advbyte/rng.hpp"

namespace advbyte::cli {

namespace fs = std::filesystem;
using container::ByteSample;

namespace {

constexpr const char* kCheckpointFile = "checkpoint.bin";
constexpr const char* kPoolFile = "gp_pool.bin";
constexpr const char* kConfigFile = "config.txt";

struct Common {
  std::string preset = "desk";
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::size_t threads = 1;
  std::vector<std::string> overrides;
  std::string out;
};

void add_common(CLI::App* cmd, Common& c, bool needs_out) {
  cmd->add_option("--preset", c.preset, "Configuration preset")->check(CLI::IsMember({"desk", "paper"}));
  cmd->add_option("--config", c.config_path, "key = value configuration file")->check(CLI::ExistingFile);
  cmd->add_option("--seed", c.seed, "Seed of this command");
  cmd->add_option("--threads", c.threads, "Worker cap (0 = all cores)");
  cmd->add_option("--set", c.overrides, "Override one key: --set key=value");
  auto* out = cmd->add_option("--out", c.out, "Output directory");
  if (needs_out) out->required();
}

// Defaults of every key a command may read.
KeyValues preset_defaults(const std::string& preset) {
  KeyValues kv;
  const bool paper = preset == "paper";
  const auto train = paper ? pipeline::TrainConfig::paper() : pipeline::TrainConfig::desk();
  train.write(kv);
  attacks::AttackConfig attack;
  attack.caps = train.caps;
  attack.write(kv);
  const auto corpus = container::CorpusSpec::desk(1);
  kv.set("corpus.groups", corpus.group_count);
  std::string counts;
  for (int c : corpus.group_counts) counts += (counts.empty() ? "" : ",") + std::to_string(c);
  kv.set("corpus.counts", counts);
  kv.set("corpus.min_length", corpus.min_length);
  kv.set("corpus.max_length", corpus.max_length);
  kv.set("corpus.signatures", corpus.signatures_per_group);
  kv.set("corpus.signature_length", corpus.signature_length);
  kv.set("corpus.plants", corpus.plants_per_sample);
  kv.set("corpus.noise", corpus.noise_ratio);
  kv.set("corpus.seed", corpus.seed);
  kv.set("split.ratio", 0.8);
  kv.set("split.seed", std::size_t{1});
  kv.set("eval.subsample", std::size_t{0});
  return kv;
}

void merge(KeyValues& into, const KeyValues& from) {
  for (const auto& [k, v] : from.entries()) into.set(k, v);
}

void apply_overrides(KeyValues& kv, const std::vector<std::string>& overrides) {
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos || eq == 0) fail(ErrorKind::UsageError, "--set expects key=value, got '" + o + "'");
    auto trim = [](std::string s) {
      s.erase(0, s.find_first_not_of(" \t"));
      s.erase(s.find_last_not_of(" \t") + 1);
      return s;
    };
    kv.set(trim(o.substr(0, eq)), trim(o.substr(eq + 1)));
  }
}

container::CorpusSpec corpus_spec(const KeyValues& kv) {
  container::CorpusSpec spec;
  spec.group_count = static_cast<int>(kv.get_int("corpus.groups"));
  spec.group_counts.clear();
  std::stringstream counts(kv.get("corpus.counts"));
  for (std::string part; std::getline(counts, part, ',');) {
    try {
      spec.group_counts.push_back(std::stoi(part));
    } catch (const std::exception&) {
      fail(ErrorKind::InvalidSpec, "corpus.counts: '" + part + "' is not an integer");
    }
  }
  spec.min_length = static_cast<std::size_t>(kv.get_int("corpus.min_length"));
  spec.max_length = static_cast<std::size_t>(kv.get_int("corpus.max_length"));
  spec.signatures_per_group = static_cast<int>(kv.get_int("corpus.signatures"));
  spec.signature_length = static_cast<std::size_t>(kv.get_int("corpus.signature_length"));
  spec.plants_per_sample = static_cast<int>(kv.get_int("corpus.plants"));
  spec.noise_ratio = kv.get_double("corpus.noise");
  spec.seed = kv.get_u64("corpus.seed");
  spec.validate();
  return spec;
}

attacks::AttackConfig attack_config(const KeyValues& kv) {
  auto a = attacks::AttackConfig::read(kv);
  a.caps.slack_cap = static_cast<std::size_t>(kv.get_int("train.slack_cap"));
  a.caps.pad_cap = static_cast<std::size_t>(kv.get_int("train.pad_cap"));
  return a;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
  if (!out) fail(ErrorKind::IoError, "cannot write " + path.string());
}

void write_manifest(const fs::path& dir, const std::string& command, const std::vector<std::string>& args,
                    const Common& c, const KeyValues& resolved, const nlohmann::json& seeds) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) fail(ErrorKind::IoError, "cannot create " + dir.string() + ": " + ec.message());
  nlohmann::json config;
  for (const auto& [k, v] : resolved.entries()) config[k] = v;
  nlohmann::ordered_json m;
  m["command"] = command;
  m["argv"] = args;
  m["preset"] = c.preset;
  m["config_path"] = c.config_path.empty() ? nlohmann::json(nullptr) : nlohmann::json(c.config_path);
  m["config"] = config;
  m["seeds"] = seeds;
  m["output_dir"] = dir.string();
  m["tool_version"] = kToolVersion;
  write_text(dir / kRunManifest, m.dump(2) + "\n");
}

std::vector<ByteSample> load_corpus(const std::string& dir) {
  auto loaded = container::read_corpus(dir);
  if (loaded.samples.empty()) fail(ErrorKind::InvalidSpec, "corpus " + dir + " holds no usable samples");
  return std::move(loaded.samples);
}

model::ModelParams load_model(const fs::path& dir, const KeyValues& kv) {
  model::ModelParams params{model::ModelConfig::read(kv), ad::load_checkpoint(dir / kCheckpointFile)};
  model::check_params(params);
  return params;
}

// Evaluation set: the held-out split (or the whole corpus), optionally a
// seeded subsample.
std::vector<ByteSample> evaluation_set(const std::vector<ByteSample>& corpus, const KeyValues& kv,
                                       bool all, std::uint64_t seed) {
  std::vector<ByteSample> set =
      all ? corpus : pipeline::split_corpus(corpus, kv.get_double("split.ratio"), kv.get_u64("split.seed")).test;
  const auto n = static_cast<std::size_t>(kv.get_int("eval.subsample"));
  if (n > 0 && n < set.size()) {
    Rng rng(derive_seed(seed, 0x5AB5));
    std::shuffle(set.begin(), set.end(), rng);
    set.resize(n);
    std::sort(set.begin(), set.end(), [](const ByteSample& a, const ByteSample& b) {
      return a.label != b.label ? a.label < b.label : a.id < b.id;
    });
  }
  return set;
}

struct Context {
  const std::vector<std::string>& args;
  std::ostream& out;
  Common common;
};

// preset <- base (checkpoint config) <- --config <- --set
KeyValues resolve(const Common& c, const std::optional<KeyValues>& base) {
  KeyValues kv = preset_defaults(c.preset);
  if (base) merge(kv, *base);
  if (!c.config_path.empty()) merge(kv, KeyValues::load(c.config_path));
  apply_overrides(kv, c.overrides);
  return kv;
}

}  // namespace

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Byte-level adversarial training toolkit", "advbyte"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kToolVersion);

  Common common;
  std::string corpus_dir, checkpoint_dir, mode, attack_kind, split = "test";
  std::optional<int> groups, per_group, epochs, iters;
  std::optional<std::size_t> batch_size;
  std::optional<double> lr, eps, alpha;
  std::optional<std::size_t> subsample;
  bool no_gp = false, no_ac = false, no_ad = false, sign_mode = false, end_projection = false;
  std::size_t export_per_group = 20;
  int audit_instances = 20;

  auto* gen = app.add_subcommand("gen-corpus", "Generate a synthetic attribution corpus");
  add_common(gen, common, true);
  gen->add_option("--groups", groups, "Number of groups");
  gen->add_option("--per-group", per_group, "Samples per group");

  auto* train = app.add_subcommand("train", "Train a model and write checkpoint plus log");
  add_common(train, common, true);
  train->add_option("--corpus", corpus_dir, "Corpus directory")->required();
  train->add_option("--mode", mode, "plain, fgsm_at or roma")->check(CLI::IsMember({"plain", "fgsm_at", "roma"}));
  train->add_flag("--no-gp", no_gp, "Skip the global perturbation stage");
  train->add_flag("--no-ac", no_ac, "Drop the adversarial contrastive loss");
  train->add_flag("--no-ad", no_ad, "Drop the adversarial divergence loss");
  train->add_flag("--fgsm-sign", sign_mode, "Use the sign of the gradient in the FGSM step");
  train->add_option("--epochs", epochs, "Epochs");
  train->add_option("--batch-size", batch_size, "Batch size");
  train->add_option("--lr", lr, "Learning rate");

  std::vector<CLI::App*> evaluating;
  auto* attack = app.add_subcommand("attack", "Attack every evaluation sample and log outcomes");
  auto* eval = app.add_subcommand("eval", "Compute SA, and RA/ASR under an optional attack");
  auto* exporter = app.add_subcommand("export-repr", "Export clean and adversarial representations");
  for (auto* cmd : {attack, eval, exporter}) {
    add_common(cmd, common, true);
    cmd->add_option("--checkpoint", checkpoint_dir, "Directory written by train")->required()->check(CLI::ExistingDirectory);
    cmd->add_option("--corpus", corpus_dir, "Corpus directory")->required();
    cmd->add_option("--attack", attack_kind, "pgd or cw")->check(CLI::IsMember({"pgd", "cw"}));
    cmd->add_option("--iters", iters, "PGD iterations");
    cmd->add_option("--eps", eps, "Perturbation bound");
    cmd->add_option("--alpha", alpha, "PGD step size");
    cmd->add_flag("--end-projection", end_projection, "Project to octets only after the last PGD step");
    cmd->add_option("--split", split, "test or all")->check(CLI::IsMember({"test", "all"}));
    cmd->add_option("--subsample", subsample, "Evaluate a seeded subsample of this size");
  }
  exporter->add_option("--per-group", export_per_group, "Clean samples per group");

  auto* grad = app.add_subcommand("grad-check", "Audit analytic gradients against finite differences");
  add_common(grad, common, false);
  grad->add_option("--instances", audit_instances, "Randomized instances per item")->check(CLI::PositiveNumber);

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    if (!reversed.empty()) reversed.pop_back();  // program name
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForVersion&) {
    out << kToolVersion << "\n";
    return 0;
  } catch (const CLI::ParseError& e) {
    err << nlohmann::json{{"error", "UsageError"}, {"message", e.what()}}.dump() << "\n";
    err << app.help();
    return 2;
  }

  try {
    pipeline::set_thread_count(common.threads);
    const fs::path out_dir = common.out;

    if (gen->parsed()) {
      KeyValues kv = resolve(common, std::nullopt);
      if (common.seed) kv.set("corpus.seed", *common.seed);
      if (groups) kv.set("corpus.groups", *groups);
      if (groups || per_group) {
        const int g = static_cast<int>(kv.get_int("corpus.groups"));
        const int n = per_group ? *per_group : 60;
        std::string counts;
        for (int k = 0; k < g; ++k) counts += (k ? "," : "") + std::to_string(n);
        kv.set("corpus.counts", counts);
      }
      const auto spec = corpus_spec(kv);
      write_manifest(out_dir, "gen-corpus", args, common, kv, {{"corpus", spec.seed}});
      const auto samples = container::generate_corpus(spec);
      container::write_corpus(out_dir, samples);
      out << "wrote " << samples.size() << " samples to " << out_dir.string() << "\n";
      return 0;
    }

    if (train->parsed()) {
      KeyValues kv = resolve(common, std::nullopt);
      if (common.seed) kv.set("train.seed", *common.seed);
      if (!mode.empty()) kv.set("train.mode", mode);
      if (no_gp) kv.set("train.no_gp", true);
      if (no_ac) kv.set("train.no_ac", true);
      if (no_ad) kv.set("train.no_ad", true);
      if (sign_mode) kv.set("train.fgsm_sign_mode", true);
      if (epochs) kv.set("train.epochs", *epochs);
      if (batch_size) kv.set("train.batch_size", *batch_size);
      if (lr) kv.set("train.learning_rate", *lr);
      const auto config = pipeline::TrainConfig::read(kv, pipeline::TrainConfig::desk());
      write_manifest(out_dir, "train", args, common, kv,
                     {{"train", config.seed}, {"split", kv.get_u64("split.seed")}});
      const auto corpus = load_corpus(corpus_dir);
      const auto parts = pipeline::split_corpus(corpus, kv.get_double("split.ratio"), kv.get_u64("split.seed"));
      nlohmann::json split_ids{{"train", nlohmann::json::array()}, {"test", nlohmann::json::array()}};
      for (const auto& s : parts.train) split_ids["train"].push_back(s.id);
      for (const auto& s : parts.test) split_ids["test"].push_back(s.id);
      write_text(out_dir / "split.json", split_ids.dump(2) + "\n");

      std::ofstream log(out_dir / "train_log.jsonl", std::ios::binary | std::ios::trunc);
      if (!log) fail(ErrorKind::IoError, "cannot write training log");
      const auto result = pipeline::train(config, parts.train, [&log](const pipeline::LogRecord& r) {
        log << pipeline::log_json(r) << "\n";
        log.flush();
      });
      ad::save_checkpoint(out_dir / kCheckpointFile, result.params.tensors);
      result.pool.save(out_dir / kPoolFile);
      kv.save(out_dir / kConfigFile);
      out << "trained " << pipeline::mode_name(config.mode) << " on " << parts.train.size() << " samples; "
          << "final L_Total " << (result.log.empty() ? 0.0 : result.log.back().total) << "\n";
      return 0;
    }

    if (attack->parsed() || eval->parsed() || exporter->parsed()) {
      const fs::path ckpt(checkpoint_dir);
      KeyValues kv = resolve(common, KeyValues::load(ckpt / kConfigFile));
      if (common.seed) kv.set("attack.seed", *common.seed);
      if (!attack_kind.empty()) kv.set("attack.kind", attack_kind);
      if (iters) kv.set("attack.iterations", *iters);
      if (eps) kv.set("attack.epsilon", *eps);
      if (alpha) kv.set("attack.alpha", *alpha);
      if (end_projection) kv.set("attack.project_every_iteration", false);
      if (subsample) kv.set("eval.subsample", *subsample);
      const auto attack_cfg = attack_config(kv);
      const char* command = attack->parsed() ? "attack" : eval->parsed() ? "eval" : "export-repr";
      write_manifest(out_dir, command, args, common, kv, {{"attack", attack_cfg.seed}, {"split", kv.get_u64("split.seed")}});
      const auto params = load_model(ckpt, kv);
      const auto corpus = load_corpus(corpus_dir);
      const auto set = evaluation_set(corpus, kv, split == "all", attack_cfg.seed);

      if (exporter->parsed()) {
        std::map<int, std::size_t> taken;
        std::vector<pipeline::ReprInput> inputs;
        std::vector<ByteSample> chosen;
        for (const auto& s : set) {
          if (taken[s.label]++ < export_per_group) chosen.push_back(s);
        }
        std::vector<ByteSample> adversarial(chosen.size());
        pipeline::parallel_for(chosen.size(), [&](std::size_t i) {
          adversarial[i] = attacks::run_attack(chosen[i], params, attack_cfg).sample;
        });
        for (std::size_t i = 0; i < chosen.size(); ++i) {
          inputs.push_back({chosen[i], false});
          inputs.push_back({adversarial[i], true});
        }
        const auto rows = pipeline::export_representations(params, inputs);
        pipeline::write_representations(out_dir / "representations.csv", rows);
        out << "exported " << rows.size() << " rows\n";
        return 0;
      }

      const bool with_attack = attack->parsed() || !attack_kind.empty();
      const auto ev = pipeline::evaluate(params, set, with_attack ? std::optional(attack_cfg) : std::nullopt);
      if (with_attack) {
        std::ofstream log(out_dir / "outcomes.jsonl", std::ios::binary | std::ios::trunc);
        for (const auto& o : ev.outcomes) log << attacks::outcome_json(o) << "\n";
        if (!log) fail(ErrorKind::IoError, "cannot write outcome log");
      }
      if (eval->parsed()) {
        pipeline::write_metrics(out_dir, ev.report);
        out << pipeline::metrics_json(ev.report) << "\n";
      } else {
        std::size_t successes = 0;
        for (const auto& o : ev.outcomes) successes += o.success;
        out << "attacked " << ev.outcomes.size() << " samples; " << successes << " successes\n";
      }
      return 0;
    }

    if (grad->parsed()) {
      const KeyValues kv = resolve(common, std::nullopt);
      audit::AuditOptions options;
      options.instances = audit_instances;
      options.seed = common.seed.value_or(0);
      if (!common.out.empty()) {
        write_manifest(out_dir, "grad-check", args, common, kv, {{"audit", options.seed}});
      }
      const auto entries = audit::run_gradient_audit(options);
      const std::string report = audit::audit_json(entries);
      if (!common.out.empty()) write_text(out_dir / "grad_check.json", report + "\n");
      bool ok = true;
      for (const auto& e : entries) {
        out << (e.passed ? "ok   " : "FAIL ") << e.kind << " " << e.name << " max_rel_error=" << e.max_rel_error << "\n";
        ok = ok && e.passed;
      }
      if (!ok) {
        err << nlohmann::json{{"error", "GradientMismatch"}, {"message", "analytic gradients disagree"}}.dump() << "\n";
        return 1;
      }
      return 0;
    }
  } catch (const Error& e) {
    err << nlohmann::json{{"error", std::string(to_string(e.kind()))}, {"message", e.what()}}.dump() << "\n";
    return e.kind() == ErrorKind::UsageError ? 2 : 1;
  } catch (const std::exception& e) {
    err << nlohmann::json{{"error", "Internal"}, {"message", e.what()}}.dump() << "\n";
    return 1;
  }
  return 2;
}

int dispatch(int argc, const char* const* argv) {
  std::vector<std::string> args(argv, argv + argc);
  return dispatch(args, std::cout, std::cerr);
}

}  // namespace advbyte::cli
