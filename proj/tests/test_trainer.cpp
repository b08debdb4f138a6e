#include <cmath>
#include <map>
#include <set>

#include "doctest.h"

#include "cade/json_convert.hpp"
#include "cade/trainer.hpp"
#include "eer_oracle.hpp"

using namespace cade;

namespace {

ScoreSet scores(std::vector<double> bona, std::vector<double> spoof) {
  ScoreSet s;
  for (double b : bona) s.scores.push_back(b), s.labels.push_back(kBonaFide);
  for (double x : spoof) s.scores.push_back(x), s.labels.push_back(kSpoof);
  return s;
}

const TaskStream& tiny_stream() {
  static const TaskStream s = synth_task_stream(SpoofFamilyConfig::defaults(), StreamSizes{24, 12}, LfccConfig{}, 5);
  return s;
}

RunConfig tiny_config(const std::string& method) {
  RunConfig c;
  c.method.kind = parse_method(method);
  c.method.importance_samples = 8;
  c.epochs = 1;
  c.batch_size = 8;
  c.memory = 12;
  c.seed = 3;
  return c;
}

// 1x1 input, one 1x1 conv channel, no hidden layer: logits = relu(w x + b) * W2 + b2.
Model hand_model(double w, double b, double w_spoof, double w_bona, double b_spoof, double b_bona) {
  ModelConfig cfg;
  cfg.in_h = cfg.in_w = 1;
  cfg.blocks = {ConvBlockConfig{1, 1, 1, 0, 1}};
  cfg.activation = Activation::relu;
  cfg.hidden = 0;
  cfg.taps = {0, 1};
  cfg.gradcam_layer = 0;
  Model m = init_model(cfg, 1);
  m.params.mutable_value("conv0.weight") = Tensor({1, 1, 1, 1}, {w});
  m.params.mutable_value("conv0.bias") = Tensor({1}, {b});
  m.params.mutable_value("fc2.weight") = Tensor({1, 2}, {w_spoof, w_bona});
  m.params.mutable_value("fc2.bias") = Tensor({2}, {b_spoof, b_bona});
  return m;
}

template <class F>
std::string error_of(F f) {
  try {
    f();
  } catch (const std::exception& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST_CASE("eer worked examples") {
  CHECK(eer(scores({0.9, 0.8}, {0.1, 0.2})) == 0.0);
  CHECK(eer(scores({0.1, 0.2}, {0.9, 0.8})) == 1.0);
  auto p = eer_point(scores({0.8, 0.4}, {0.6, 0.2}));
  CHECK(p.eer == 0.5);
  CHECK(p.far == 0.5);
  CHECK(p.frr == 0.5);
  CHECK(p.threshold == doctest::Approx(0.5));
}

TEST_CASE("eer rejects bad input") {
  CHECK_THROWS_WITH(eer(scores({0.1, 0.2}, {})), doctest::Contains("both"));
  CHECK_THROWS_WITH(eer(scores({}, {0.1})), doctest::Contains("both"));
  CHECK_THROWS(eer(scores({NAN}, {0.1})));
  CHECK_THROWS(eer(scores({INFINITY}, {0.1})));
}

TEST_CASE("eer equals the brute-force oracle") {
  Rng rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 2 + rng.below(99);
    auto s = oracle::random_scores(n, rng);
    INFO("trial " << trial << " n " << n);
    CHECK(eer(s) == oracle::brute_force_eer(s));
  }
  // continuous scores, no ties
  for (int trial = 0; trial < 50; ++trial) {
    ScoreSet s;
    const std::size_t n = 2 + rng.below(99);
    for (std::size_t i = 0; i < n; ++i) {
      s.labels.push_back(i % 2 ? kSpoof : kBonaFide);
      s.scores.push_back(rng.normal() + (i % 2 ? 0.0 : 1.0));
    }
    CHECK(eer(s) == oracle::brute_force_eer(s));
  }
}

TEST_CASE("eer is invariant under increasing transforms") {
  Rng rng(12);
  for (int trial = 0; trial < 50; ++trial) {
    auto s = oracle::random_scores(2 + rng.below(99), rng);
    const double base = eer(s);
    auto map = [&](auto f) {
      ScoreSet t = s;
      for (auto& v : t.scores) v = f(v);
      return eer(t);
    };
    CHECK(map([](double x) { return 3 * x + 7; }) == base);
    CHECK(map([](double x) { return x * x * x; }) == base);
    CHECK(map([](double x) { return std::exp(x / 4); }) == base);
    CHECK(map([](double x) { return std::atan(x / 10); }) == base);
  }
}

TEST_CASE("evaluate") {
  SUBCASE("zero model scores zero") {
    Model m = init_model(ModelConfig{}, 1);
    for (const auto& name : m.params.names()) {
      auto& v = m.params.mutable_value(name);
      for (auto& x : v.values()) x = 0;
    }
    auto s = evaluate(m, tiny_stream().tasks[0].eval, 5);
    REQUIRE(s.scores.size() == tiny_stream().tasks[0].eval.size());
    for (double x : s.scores) CHECK(x == 0.0);
    for (std::size_t i = 0; i < s.labels.size(); ++i) CHECK(s.labels[i] == tiny_stream().tasks[0].eval[i].label);
  }
  SUBCASE("pure and batch independent") {
    Model m = init_model(ModelConfig{}, 2);
    const Model before = m;
    auto a = evaluate(m, tiny_stream().tasks[1].eval, 256);
    auto b = evaluate(m, tiny_stream().tasks[1].eval, 256);
    auto c = evaluate(m, tiny_stream().tasks[1].eval, 5);
    CHECK(a.scores == b.scores);
    CHECK(a.scores == c.scores);
    CHECK(m.params.same_values(before.params));
  }
  SUBCASE("hand-set model") {
    // x = 2: a = relu(1.5*2 - 1) = 2; logits = (2*0.5 + 0.25, 2*(-1) + 1) = (1.25, -1); score -2.25
    // x = -1: a = relu(-2.5) = 0; logits = (0.25, 1); score 0.75
    Model m = hand_model(1.5, -1.0, 0.5, -1.0, 0.25, 1.0);
    std::vector<FeatureMap> data{FeatureMap{1, 1, {2.0}, kSpoof, 0}, FeatureMap{1, 1, {-1.0}, kBonaFide, 0}};
    auto s = evaluate(m, data);
    CHECK(s.scores == std::vector<double>{-2.25, 0.75});
    CHECK(s.labels == std::vector<int>{kSpoof, kBonaFide});
  }
  SUBCASE("shape mismatch and empty input") {
    Model m = init_model(ModelConfig{}, 1);
    std::vector<FeatureMap> bad{FeatureMap{3, 20, std::vector<double>(60, 0.0), kSpoof, 0}};
    CHECK_THROWS_WITH(evaluate(m, bad), doctest::Contains("model expects"));
    CHECK_THROWS(evaluate(m, {}));
  }
}

TEST_CASE("run config validation") {
  RunConfig c;
  CHECK_NOTHROW(c.validate());
  c.epochs = 0;
  CHECK_THROWS(c.validate());
  c = RunConfig{};
  c.batch_size = 0;
  CHECK_THROWS(c.validate());
  c = RunConfig{};
  c.replay_fraction = 1.0;
  CHECK_THROWS(c.validate());
  c = RunConfig{};
  c.method.kind = Method::replay;
  c.memory = 0;
  CHECK_THROWS(c.validate());
  c.method.kind = Method::finetune;
  CHECK_NOTHROW(c.validate());
}

TEST_CASE("one task: cade with zero weights is finetune") {
  TaskStream one = tiny_stream();
  one.tasks.resize(1);
  auto f = tiny_config("finetune");
  auto c = tiny_config("cade");
  c.method.weights = {0, 0, 0};
  auto a = run_sequential(f, one);
  auto b = run_sequential(c, one);
  CHECK(a.report.per_task_eer == b.report.per_task_eer);
  CHECK(a.report.final_eer == b.report.final_eer);
  CHECK(a.model.params.same_values(b.model.params));
}

TEST_CASE("joint touches neither buffer nor teacher") {
  std::map<std::string, std::size_t> calls;
  RunHooks hooks;
  hooks.buffer_sample = [&](std::size_t, std::size_t) { ++calls["sample"]; };
  hooks.buffer_insert = [&](std::size_t) { ++calls["insert"]; };
  hooks.teacher_forward = [&](std::size_t, std::uint64_t) { ++calls["teacher"]; };
  hooks.step = [&](std::size_t, std::size_t, const ObjectiveTerms&) { ++calls["step"]; };
  auto r = run_sequential(tiny_config("joint"), tiny_stream(), hooks);
  CHECK(calls["sample"] == 0);
  CHECK(calls["insert"] == 0);
  CHECK(calls["teacher"] == 0);
  CHECK(calls["step"] == 9);  // 72 rows / 8
  REQUIRE(r.report.per_task_eer.size() == 1);
  CHECK(r.report.per_task_eer[0].size() == 3);
  CHECK(r.report.memory == 0);

  // the same hooks do fire for cade
  calls.clear();
  run_sequential(tiny_config("cade"), tiny_stream(), hooks);
  CHECK(calls["sample"] > 0);
  CHECK(calls["insert"] == 3);
  CHECK(calls["teacher"] > 0);
}

TEST_CASE("teacher is frozen within a task") {
  for (const char* method : {"cade", "lwf", "dfwf"}) {
    std::map<std::size_t, std::set<std::uint64_t>> seen;
    RunHooks hooks;
    hooks.teacher_forward = [&](std::size_t task, std::uint64_t sum) { seen[task].insert(sum); };
    run_sequential(tiny_config(method), tiny_stream(), hooks);
    INFO(method);
    CHECK(seen.count(0) == 0);
    REQUIRE(seen.count(1) == 1);
    REQUIRE(seen.count(2) == 1);
    CHECK(seen[1].size() == 1);
    CHECK(seen[2].size() == 1);
    CHECK(*seen[1].begin() != *seen[2].begin());
  }
}

TEST_CASE("runs are deterministic") {
  for (const char* method : {"finetune", "replay", "ewc", "mas", "lwf", "dfwf", "cade", "joint"}) {
    auto c = tiny_config(method);
    auto a = run_sequential(c, tiny_stream()).report;
    auto b = run_sequential(c, tiny_stream()).report;
    INFO(method);
    CHECK(a.per_task_eer == b.per_task_eer);
    CHECK(a.final_eer == b.final_eer);
    CHECK(a.config_hash == b.config_hash);
    CHECK(a.stream_fingerprint == tiny_stream().fingerprint);
    for (const auto& row : a.per_task_eer)
      for (double e : row) CHECK((e >= 0 && e <= 1));
    c.seed += 1;
    CHECK(run_sequential(c, tiny_stream()).report.config_hash != a.config_hash);
  }
}

TEST_CASE("report shape after each task") {
  auto r = run_sequential(tiny_config("replay"), tiny_stream()).report;
  REQUIRE(r.per_task_eer.size() == 3);
  for (std::size_t t = 0; t < 3; ++t) CHECK(r.per_task_eer[t].size() == t + 1);
  CHECK(r.memory == 12);
  CHECK(r.method == "replay");
}

TEST_CASE("finetune forgets the first task on the default stream") {
  TaskStream two = synth_task_stream(SpoofFamilyConfig::defaults(), StreamSizes{}, LfccConfig{}, 1);
  two.tasks.resize(2);
  int forgot = 0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    RunConfig c;
    c.method.kind = Method::finetune;
    c.seed = seed;
    auto r = run_sequential(c, two).report;
    MESSAGE("seed " << seed << ": task 0 EER " << r.per_task_eer[0][0] << " -> " << r.per_task_eer[1][0]);
    if (r.per_task_eer[1][0] >= r.per_task_eer[0][0]) ++forgot;
  }
  CHECK(forgot >= 3);
}

TEST_CASE("aggregate") {
  auto report = [](std::string method, std::size_t memory, double e, std::string fp = "s1") {
    RunReport r;
    r.method = method;
    r.memory = memory;
    r.final_eer = e;
    r.stream_fingerprint = fp;
    return r;
  };
  auto one = aggregate({report("finetune", 0, 0.32171)});
  REQUIRE(one.size() == 1);
  CHECK(one[0].mean == 0.32171);
  CHECK(one[0].std == 0.0);
  CHECK(one[0].method == "Finetune");

  auto two = aggregate({report("finetune", 0, 0.10), report("finetune", 0, 0.20)});
  REQUIRE(two.size() == 1);
  CHECK(two[0].mean == doctest::Approx(0.15).epsilon(1e-15));
  CHECK(two[0].std == doctest::Approx(std::sqrt(0.005)).epsilon(1e-12));
  CHECK(two[0].runs == 2);

  auto rows = aggregate({report("cade", 1000, 0.1), report("replay", 500, 0.2), report("cade", 500, 0.3),
                         report("joint", 0, 0.05), report("ewc", 0, 0.4)});
  std::vector<std::pair<std::string, std::size_t>> order;
  for (const auto& r : rows) order.emplace_back(r.method, r.memory);
  CHECK(order == std::vector<std::pair<std::string, std::size_t>>{
                     {"Joint", 0}, {"EWC", 0}, {"Replay", 500}, {"CADE", 500}, {"CADE", 1000}});

  const auto msg = error_of([&] { aggregate({report("cade", 500, 0.1, "aaaa"), report("cade", 500, 0.1, "bbbb")}); });
  CHECK(msg.find("aaaa") != std::string::npos);
  CHECK(msg.find("bbbb") != std::string::npos);
  CHECK_THROWS(aggregate({}));
}

TEST_CASE("run config json round trip") {
  RunConfig c;
  c.method.kind = Method::dfwf;
  c.method.weights = {0.5, 0.2, 0.75};
  c.optimizer.kind = OptimizerConfig::Kind::adam;
  c.optimizer.lr = 0.003;
  c.buffer = BufferStrategy::reservoir;
  c.memory = 1500;
  c.seed = 42;
  const Json j = to_json(c);
  const RunConfig back = run_from_json(j, "run");
  CHECK(to_json(back).dump() == j.dump());
  CHECK(back.method == c.method);
  CHECK(back.model == c.model);

  Json bad = j;
  bad["memroy"] = 10;
  bad.erase("memory");
  const auto msg = error_of([&] { run_from_json(bad, "run"); });
  CHECK(msg.find("run.memroy") != std::string::npos);
  CHECK(msg.find("'run.memory'") != std::string::npos);
}
