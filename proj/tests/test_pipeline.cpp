#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <set>

#include "advbyte/corpus.hpp"
#include "advbyte/error.hpp"
#include "advbyte/pipeline.hpp"
#include "fixtures.hpp"

using namespace advbyte;
using namespace advbyte::pipeline;

namespace {

std::vector<ByteSample> corpus(std::vector<int> counts, std::uint64_t seed = 3) {
  container::CorpusSpec spec;
  spec.group_count = static_cast<int>(counts.size());
  spec.group_counts = std::move(counts);
  spec.min_length = 2048;
  spec.max_length = 2560;
  spec.seed = seed;
  return container::generate_corpus(spec);
}

TrainConfig tiny_config(TrainMode mode) {
  TrainConfig c;
  c.mode = mode;
  c.epochs = 2;
  c.batch_size = 6;
  c.learning_rate = 1e-3;
  c.model = fixtures::small_model(3);
  c.seed = 9;
  return c;
}

MetricsReport report(std::vector<GroupCounts> groups, bool adv = true) {
  MetricsReport r;
  r.groups = std::move(groups);
  r.has_adversarial = adv;
  return r;
}

}  // namespace

TEST_CASE("split arithmetic") {
  const auto all = corpus({10, 5, 2});
  const auto s = split_corpus(all, 0.8, 1);
  auto count = [](const std::vector<ByteSample>& v, int label) {
    return std::count_if(v.begin(), v.end(), [label](const ByteSample& x) { return x.label == label; });
  };
  CHECK(count(s.train, 0) == 8);
  CHECK(count(s.test, 0) == 2);
  CHECK(count(s.train, 1) == 4);
  CHECK(count(s.test, 1) == 1);
  CHECK(count(s.train, 2) == 1);
  CHECK(count(s.test, 2) == 1);

  std::set<std::string> ids;
  for (const auto& x : s.train) ids.insert(x.id);
  for (const auto& x : s.test) CHECK(ids.insert(x.id).second);
  CHECK(ids.size() == all.size());

  const auto again = split_corpus(all, 0.8, 1);
  CHECK(again.train == s.train);
  CHECK(again.test == s.test);
  CHECK_FALSE(split_corpus(all, 0.8, 2).test == s.test);

  auto lonely = all;
  lonely.push_back({"solo", 3, all[0].bytes});
  CHECK_THROWS_AS(split_corpus(lonely, 0.8, 1), Error);
}

TEST_CASE("metric hand cases") {
  CHECK(standard_accuracy(report({{2, 1, 0, 0}, {2, 2, 0, 0}}, false)) == 0.75);
  CHECK(attack_success_rate(report({{5, 4, 5, 1}, {3, 2, 3, 2}})) == 0.5);
  CHECK(standard_accuracy(report({{3, 3, 3, 3}, {4, 4, 4, 4}})) == 1.0);
  CHECK(robust_accuracy(report({{3, 3, 3, 0}, {4, 2, 4, 0}})) == 0.0);
  const auto unchanged = report({{7, 5, 7, 5}, {4, 1, 4, 1}, {9, 9, 9, 9}});
  CHECK(robust_accuracy(unchanged) == standard_accuracy(unchanged));
  CHECK(attack_success_rate(unchanged) == 0.0);
  CHECK(attack_success_rate(report({{4, 1, 4, 3}})) == -2.0);
  CHECK(attack_success_rate(report({{4, 0, 4, 0}, {2, 2, 2, 1}})) == 0.5);
}

TEST_CASE("metrics need denominators") {
  CHECK_THROWS_AS(standard_accuracy(report({{0, 0, 0, 0}})), Error);
  CHECK_THROWS_AS(robust_accuracy(report({{3, 1, 0, 0}}, false)), Error);
  CHECK_THROWS_AS(attack_success_rate(report({{3, 0, 3, 0}})), Error);
}

TEST_CASE("metrics agree with a counting oracle on random tables") {
  Rng rng(77);
  for (int t = 0; t < 1000; ++t) {
    const int groups = std::uniform_int_distribution<int>(1, 18)(rng);
    std::vector<GroupCounts> counts;
    long long total = 0, correct = 0, adv_correct = 0, clean_correct_all = 0;
    bool all_clean_positive = true;
    for (int g = 0; g < groups; ++g) {
      GroupCounts c;
      c.clean_total = std::uniform_int_distribution<int>(1, 60)(rng);
      c.clean_correct = std::uniform_int_distribution<long long>(0, c.clean_total)(rng);
      c.adv_total = c.clean_total;
      c.adv_correct = std::uniform_int_distribution<long long>(0, c.clean_total)(rng);
      total += c.clean_total;
      correct += c.clean_correct;
      adv_correct += c.adv_correct;
      clean_correct_all += c.clean_correct;
      all_clean_positive = all_clean_positive && c.clean_correct > 0;
      counts.push_back(c);
    }
    const auto r = report(counts);
    CHECK(standard_accuracy(r) == double(correct) / double(total));
    CHECK(robust_accuracy(r) == double(adv_correct) / double(total));
    if (all_clean_positive) {
      CHECK(attack_success_rate(r) == double(clean_correct_all - adv_correct) / double(clean_correct_all));
    }
  }
}

TEST_CASE("metrics serialization") {
  const auto clean_only = report({{2, 1, 0, 0}, {2, 2, 0, 0}}, false);
  const auto j = nlohmann::json::parse(metrics_json(clean_only));
  CHECK(j["SA"] == 0.75);
  CHECK(j["RA"].is_null());
  CHECK(j["ASR"].is_null());
  CHECK(metrics_csv(clean_only) == "group,T_clean,C_clean,T_adv,C_adv\n0,2,1,,\n1,2,2,,\n");
  const auto dir = fixtures::temp_dir("metrics");
  write_metrics(dir, report({{5, 4, 5, 1}, {3, 2, 3, 2}}));
  std::ifstream in(dir / "metrics.json");
  const auto k = nlohmann::json::parse(in);
  CHECK(k["ASR"] == 0.5);
  CHECK(std::filesystem::exists(dir / "metrics.csv"));
}

TEST_CASE("train config round trip and validation") {
  auto c = TrainConfig::paper();
  c.mode = TrainMode::FgsmAt;
  c.no_ad = true;
  c.seed = 123456789012345ULL;
  KeyValues kv;
  c.write(kv);
  const auto back = TrainConfig::read(KeyValues::parse(kv.dump()), TrainConfig::desk());
  KeyValues kv2;
  back.write(kv2);
  CHECK(kv2.entries() == kv.entries());
  CHECK(back.model.gp_count == 50);
  CHECK(back.caps.pad_cap == 102400);

  auto bad = TrainConfig::desk();
  bad.epochs = 0;
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = TrainConfig::desk();
  bad.loss.lambda_ac = -0.1;
  CHECK_THROWS_AS(bad.validate(), Error);
  CHECK_THROWS_AS(parse_mode("pgd_at"), Error);
}

TEST_CASE("effective loss weights follow mode and ablation flags") {
  auto c = TrainConfig::desk();
  CHECK(c.effective_lambda_ac() == 0.3);
  CHECK(c.uses_gp());
  c.no_ac = true;
  c.no_gp = true;
  CHECK(c.effective_lambda_ac() == 0.0);
  CHECK(c.effective_lambda_ad() == 0.3);
  CHECK_FALSE(c.uses_gp());
  c = TrainConfig::desk();
  c.mode = TrainMode::FgsmAt;
  CHECK(c.effective_lambda_ac() == 0.0);
  CHECK(c.effective_lambda_ad() == 0.0);
  CHECK_FALSE(c.uses_gp());
}

TEST_CASE("training is deterministic and logs finite losses") {
  const auto data = corpus({6, 6, 6});
  for (TrainMode mode : {TrainMode::Plain, TrainMode::FgsmAt, TrainMode::Roma}) {
    const auto c = tiny_config(mode);
    std::vector<LogRecord> streamed;
    const auto a = train(c, data, [&](const LogRecord& r) { streamed.push_back(r); });
    const auto b = train(c, data);
    CHECK(a.params.tensors == b.params.tensors);
    CHECK(a.pool == b.pool);
    CHECK(a.log.size() == 6);
    CHECK(streamed.size() == a.log.size());
    for (const auto& r : a.log) {
      CHECK(std::isfinite(r.total));
      if (mode != TrainMode::Roma) {
        CHECK(r.total == r.at);
      }
    }
    CHECK((mode == TrainMode::Roma) == (a.pool.total_entries() > 0));
    const auto j = nlohmann::json::parse(log_json(a.log.front()));
    for (const char* key : {"epoch", "batch", "L_AT", "L_AC", "L_AD", "L_Total"}) CHECK(j.contains(key));
  }
}

TEST_CASE("roma without GP and consistency terms is FGSM-AT") {
  const auto data = corpus({6, 6, 6});
  auto roma = tiny_config(TrainMode::Roma);
  roma.no_gp = true;
  roma.loss.lambda_ac = 0;
  roma.loss.lambda_ad = 0;
  const auto a = train(roma, data);
  const auto b = train(tiny_config(TrainMode::FgsmAt), data);
  CHECK(a.params.tensors == b.params.tensors);
  auto all_off = tiny_config(TrainMode::Roma);
  all_off.no_gp = all_off.no_ac = all_off.no_ad = true;
  CHECK(train(all_off, data).params.tensors == b.params.tensors);
}

TEST_CASE("training rejects mismatched inputs") {
  const auto data = corpus({6, 6, 6});
  auto c = tiny_config(TrainMode::Plain);
  CHECK_THROWS_AS(train(c, {}), Error);
  auto params = model::init_params(fixtures::small_model(4), 1);
  CHECK_THROWS_AS(train(c, data, params, advgen::GPPool(c.pool_config())), Error);
}

TEST_CASE("evaluation counts and determinism") {
  const auto data = corpus({5, 4, 3});
  const auto params = model::init_params(fixtures::small_model(3), 2);
  const auto clean = evaluate(params, data, std::nullopt);
  CHECK_FALSE(clean.report.has_adversarial);
  CHECK(clean.outcomes.empty());
  std::int64_t total = 0;
  for (const auto& g : clean.report.groups) total += g.clean_total;
  CHECK(total == 12);
  CHECK(clean.report.groups[0].clean_total == 5);

  attacks::AttackConfig a;
  a.iterations = 0;
  const auto zero = evaluate(params, data, a);
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto init = advgen::prepare_sample(data[i], a.caps, a.seed, a.round).randomized;
    CHECK(zero.outcomes[i].adversarial_prediction == model::predict(params, init));
  }
  a.iterations = 2;
  set_thread_count(1);
  const auto one = evaluate(params, data, a);
  set_thread_count(3);
  const auto three = evaluate(params, data, a);
  set_thread_count(1);
  CHECK(one.report == three.report);
  for (std::size_t i = 0; i < data.size(); ++i) {
    CHECK(one.outcomes[i].adversarial_prediction == three.outcomes[i].adversarial_prediction);
    CHECK(one.outcomes[i].success == (one.outcomes[i].clean_prediction == data[i].label &&
                                      one.outcomes[i].adversarial_prediction != data[i].label));
  }
  auto stray = data;
  stray[0].label = 7;
  CHECK_THROWS_AS(evaluate(params, stray, std::nullopt), Error);
}

TEST_CASE("parallel_for rethrows the first failure by index") {
  set_thread_count(4);
  try {
    parallel_for(50, [](std::size_t i) {
      if (i == 13 || i == 40) throw std::runtime_error("fail " + std::to_string(i));
    });
    FAIL("expected an exception");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()) == "fail 13");
  }
  set_thread_count(1);
}

TEST_CASE("representation export") {
  const auto data = corpus({3, 3, 3});
  const auto params = model::init_params(fixtures::small_model(3), 4);
  std::vector<ReprInput> inputs;
  for (auto it = data.rbegin(); it != data.rend(); ++it) {
    inputs.push_back({*it, true});
    inputs.push_back({*it, false});
  }
  const auto rows = export_representations(params, inputs);
  REQUIRE(rows.size() == inputs.size());
  for (std::size_t k = 1; k < rows.size(); ++k) {
    const auto& a = rows[k - 1];
    const auto& b = rows[k];
    CHECK(std::tie(a.label, a.id, a.adversarial) < std::tie(b.label, b.id, b.adversarial));
  }
  CHECK(rows[0].values.size() == params.config.repr_dim());
  const auto path = fixtures::temp_dir("repr") / "r.csv";
  write_representations(path, rows);
  std::ifstream in(path);
  std::string line;
  std::size_t lines = 0;
  std::getline(in, line);
  CHECK(line.rfind("id,label,adversarial,h0", 0) == 0);
  while (std::getline(in, line)) ++lines;
  CHECK(lines == rows.size());
}
