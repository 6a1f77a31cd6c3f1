#include <doctest.h>

#include <fstream>
#include <json.hpp>
#include <sstream>

#include "advbyte/cli.hpp"
#include "fixtures.hpp"

using namespace advbyte;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string out;
  std::string err;
};

Run run(std::vector<std::string> args) {
  args.insert(args.begin(), "advbyte");
  std::ostringstream out, err;
  const int code = cli::dispatch(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

nlohmann::json json_file(const fs::path& p) { return nlohmann::json::parse(slurp(p)); }

std::vector<std::string> small(std::vector<std::string> args) {
  for (const char* kv : {"model.max_len=4096", "model.channels=8", "model.proj_dim=8", "model.groups=3",
                         "model.gp_count=4", "train.epochs=2", "train.batch_size=6", "train.learning_rate=0.001"}) {
    args.push_back("--set");
    args.push_back(kv);
  }
  return args;
}

std::size_t manifests(const fs::path& dir) {
  std::size_t n = 0;
  for (const auto& e : fs::directory_iterator(dir)) n += e.path().filename() == cli::kRunManifest;
  return n;
}

}  // namespace

TEST_CASE("unknown flags are usage errors") {
  const auto r = run({"train", "--bogus"});
  CHECK(r.code == 2);
  CHECK(r.err.find("Usage") != std::string::npos);
  const auto record = nlohmann::json::parse(r.err.substr(0, r.err.find('\n')));
  CHECK(record["error"] == "UsageError");
  CHECK(run({}).code == 2);
  CHECK(run({"frobnicate"}).code == 2);
  CHECK(run({"--help"}).code == 0);
}

TEST_CASE("bad overrides and missing inputs") {
  const auto dir = fixtures::temp_dir("cli_errors");
  auto r = run({"gen-corpus", "--out", (dir / "c").string(), "--set", "novalue"});
  CHECK(r.code == 2);
  r = run({"train", "--corpus", (dir / "nothing").string(), "--out", (dir / "t").string()});
  CHECK(r.code == 1);
  CHECK(nlohmann::json::parse(r.err)["error"] == "IoError");
  r = run({"gen-corpus", "--out", (dir / "c2").string(), "--set", "corpus.groups=1", "--set", "corpus.counts=1"});
  CHECK(r.code == 1);
  CHECK(nlohmann::json::parse(r.err)["error"] == "InvalidSpec");
}

TEST_CASE("gen-corpus, train, eval, attack and export") {
  const auto dir = fixtures::temp_dir("cli_pipeline");
  const auto corpus = (dir / "corpus").string();
  REQUIRE(run({"gen-corpus", "--out", corpus, "--groups", "3", "--per-group", "8", "--seed", "2", "--set",
               "corpus.min_length=2048", "--set", "corpus.max_length=2560"})
              .code == 0);
  CHECK(manifests(corpus) == 1);
  CHECK(json_file(fs::path(corpus) / cli::kRunManifest)["command"] == "gen-corpus");

  const auto plain = (dir / "plain").string();
  auto r = run(small({"train", "--corpus", corpus, "--out", plain, "--mode", "plain", "--seed", "7"}));
  REQUIRE(r.code == 0);
  for (const char* f : {"checkpoint.bin", "gp_pool.bin", "train_log.jsonl", "config.txt", "split.json"}) {
    CHECK(fs::exists(fs::path(plain) / f));
  }
  const auto manifest = json_file(fs::path(plain) / cli::kRunManifest);
  CHECK(manifest["config"]["train.mode"] == "plain");
  CHECK(manifest["config"]["model.channels"] == "8");
  CHECK(manifest["seeds"]["train"] == 7);
  CHECK(manifest["tool_version"] == cli::kToolVersion);

  const auto eval = (dir / "eval").string();
  REQUIRE(run({"eval", "--checkpoint", plain, "--corpus", corpus, "--out", eval}).code == 0);
  const auto m = json_file(fs::path(eval) / "metrics.json");
  CHECK(m["SA"].is_number());
  CHECK(m["RA"].is_null());

  const auto roma = (dir / "roma").string();
  REQUIRE(run(small({"train", "--corpus", corpus, "--out", roma, "--mode", "roma"})).code == 0);
  const auto attacked = (dir / "attacked").string();
  REQUIRE(run({"eval", "--checkpoint", roma, "--corpus", corpus, "--out", attacked, "--attack", "pgd", "--iters", "50"})
              .code == 0);
  const auto a = json_file(fs::path(attacked) / "metrics.json");
  CHECK(a["RA"].is_number());
  CHECK(a["ASR"].is_number());
  CHECK(a["attack"]["attack.iterations"] == "50");

  const auto outcomes = (dir / "outcomes").string();
  REQUIRE(run({"attack", "--checkpoint", roma, "--corpus", corpus, "--out", outcomes, "--attack", "cw", "--set",
               "attack.cw.steps=5"})
              .code == 0);
  std::ifstream log(fs::path(outcomes) / "outcomes.jsonl");
  std::size_t lines = 0;
  for (std::string line; std::getline(log, line); ++lines) CHECK(nlohmann::json::parse(line).contains("success"));
  CHECK(lines == 6);

  const auto repr = (dir / "repr").string();
  REQUIRE(run({"export-repr", "--checkpoint", roma, "--corpus", corpus, "--out", repr, "--split", "all",
               "--per-group", "4", "--iters", "2"})
              .code == 0);
  const std::string csv = slurp(fs::path(repr) / "representations.csv");
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 1 + 3 * 4 * 2);
}

TEST_CASE("rerunning a training command reproduces its outputs") {
  const auto dir = fixtures::temp_dir("cli_repro");
  const auto corpus = (dir / "corpus").string();
  REQUIRE(run({"gen-corpus", "--out", corpus, "--groups", "3", "--per-group", "6", "--set", "corpus.min_length=2048",
               "--set", "corpus.max_length=2560"})
              .code == 0);
  for (const char* name : {"a", "b"}) {
    REQUIRE(run(small({"train", "--corpus", corpus, "--out", (dir / name).string(), "--mode", "roma", "--seed", "3"}))
                .code == 0);
    REQUIRE(run({"eval", "--checkpoint", (dir / name).string(), "--corpus", corpus, "--out",
                 (dir / name / "eval").string(), "--attack", "pgd", "--iters", "3"})
                .code == 0);
  }
  for (const char* f : {"checkpoint.bin", "gp_pool.bin", "train_log.jsonl", "config.txt", "eval/metrics.json"}) {
    CHECK(slurp(dir / "a" / f) == slurp(dir / "b" / f));
  }
  CHECK(manifests(dir / "a") == 1);
}

TEST_CASE("grad-check subcommand") {
  const auto dir = fixtures::temp_dir("cli_grad");
  const auto r = run({"grad-check", "--instances", "2", "--out", dir.string()});
  CHECK(r.code == 0);
  const auto j = json_file(dir / "grad_check.json");
  CHECK(j.is_object());
}
