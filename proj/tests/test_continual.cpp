#include <algorithm>
#include <cmath>
#include <set>

#include "doctest.h"

#include "cade/continual.hpp"
#include "loss_gradcheck.hpp"

using namespace cade;

namespace {

FeatureMap item(std::size_t id, int label, std::size_t task = 0) {
  return FeatureMap{1, 1, {static_cast<double>(id)}, label, task};
}

std::vector<FeatureMap> items(std::size_t n, std::size_t task, std::size_t first_id = 0) {
  std::vector<FeatureMap> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(item(first_id + i, i % 2 == 0 ? kBonaFide : kSpoof, task));
  return out;
}

double classification_value(Tensor logits, std::vector<std::size_t> labels) {
  ag::Graph g;
  return classification_loss(g.constant(logits), labels).value().item();
}

}  // namespace

TEST_CASE("classification loss values") {
  CHECK(std::abs(classification_value(Tensor({1, 2}, {0, 0}), {0}) - std::log(2.0)) < 1e-12);
  CHECK(std::abs(classification_value(Tensor({1, 2}, {0, 0}), {1}) - std::log(2.0)) < 1e-12);
  CHECK(std::abs(classification_value(Tensor({1, 2}, {1000, -1000}), {0})) < 1e-12);
  CHECK(std::abs(classification_value(Tensor({1, 2}, {1, -1}), {0}) - std::log1p(std::exp(-2.0))) < 1e-12);
  CHECK(std::abs(classification_value(Tensor({1, 2}, {1, -1}), {0}) - 0.126928) < 1e-6);
  ag::Graph g;
  CHECK_THROWS_WITH(classification_loss(g.constant(Tensor({1, 2})), {}), doctest::Contains("empty"));
}

TEST_CASE("kd loss values and gradient direction") {
  CHECK(std::abs(kd_loss_value(Tensor::vector({0, 0}), Tensor::vector({0, 0})) - std::log(2.0)) <= 1e-12);
  CHECK(kd_loss_value(Tensor::vector({40, 40}), Tensor::vector({40, 40})) < 1e-16);
  const double s2 = 1 / (1 + std::exp(-2.0)), sm2 = 1 / (1 + std::exp(2.0));
  const double want = -(s2 * std::log(s2) + sm2 * std::log(sm2));
  const double got = kd_loss_value(Tensor::vector({2, -2}), Tensor::vector({2, -2}));
  CHECK(std::abs(got - want) < 1e-14);
  CHECK(std::abs(got - 0.365334) < 1e-6);
  CHECK_THROWS_WITH(kd_loss_value(Tensor::vector({1, 2}), Tensor::vector({1, 2, 3})), doctest::Contains("kd_loss"));
  // Batched input averages over rows.
  CHECK(std::abs(kd_loss_value(Tensor({2, 2}, {0, 0, 2, -2}), Tensor({2, 2}, {0, 0, 2, -2})) -
                 (std::log(2.0) + want) / 2) < 1e-14);

  // d/d s_i of -sigma(t_i) log sigma(s_i) = -sigma(t_i) (1 - sigma(s_i)): always pulls s_i upward.
  Rng rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor t = testing::random_tensor(rng, {4}, -5, 5), s = testing::random_tensor(rng, {4}, -5, 5);
    ag::Graph g;
    auto v = g.variable(s);
    g.backward(kd_loss(t, v));
    auto grad = g.grad(v);
    for (std::size_t i = 0; i < 4; ++i) {
      const double st = 1 / (1 + std::exp(-t[i])), ss = 1 / (1 + std::exp(-s[i]));
      CHECK(grad[i] < 0);
      CHECK(std::abs(grad[i] + st * (1 - ss)) < 1e-12);
    }
  }
  CHECK(kd_loss_value(Tensor::vector({5, 5}), Tensor::vector({5, 5})) >
        kd_loss_value(Tensor::vector({10, 10}), Tensor::vector({10, 10})));
}

TEST_CASE("ad loss values and invariants") {
  CHECK(ad_loss_value(Tensor::vector({3, 4}), Tensor::vector({3, 4})) == 0.0);
  CHECK(ad_loss_value(Tensor::vector({1, 0}), Tensor::vector({0, 1})) == 2.0);
  CHECK(std::abs(ad_loss_value(Tensor::vector({3, 4}), Tensor::vector({1, 0})) - 1.2) <= 1e-12);
  CHECK(ad_loss_value(Tensor::vector({0, 0}), Tensor::vector({3, 4})) == 1.4);
  CHECK_THROWS_WITH(ad_loss_value(Tensor::vector({1, 0}), Tensor::vector({1, 0, 0})), doctest::Contains("ad_loss"));
  Rng rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t l = 1 + rng.below(30);
    Tensor a = testing::random_tensor(rng, {l}), b = testing::random_tensor(rng, {l});
    const double base = ad_loss_value(a, b);
    CHECK(base >= 0);
    CHECK(base <= 2 * std::sqrt(double(l)) + 1e-12);
    for (double c : {2.0, 0.25, 8.0}) {
      Tensor ca = a;
      for (auto& v : ca.values()) v *= c;
      CHECK(ad_loss_value(ca, b) == base);
    }
  }
}

TEST_CASE("psa loss values") {
  std::vector<Tensor> t{Tensor({1, 3}, {1, 2, 3})};
  CHECK(psa_loss_value(t, t, {true}) == 0.0);
  CHECK(psa_loss_value({Tensor({1, 2}, {1, 0})}, {Tensor({1, 2}, {0, 1})}, {true}) == 1.0);
  std::vector<Tensor> t2{Tensor({1, 2}, {1, 0}), Tensor({1, 2}, {1, 0})};
  std::vector<Tensor> s2{Tensor({1, 2}, {2, 0}), Tensor({1, 2}, {0.5, std::sqrt(3.0) / 2})};
  CHECK(std::abs(psa_loss_value(t2, s2, {true}) - 0.5) < 1e-12);
  CHECK(std::abs(psa_similarity_sum(t2, s2, {true}) - 1.5) < 1e-12);
  // Negatives do not count; no positives gives zero.
  std::vector<Tensor> t3{Tensor({2, 2}, {1, 0, 1, 0})}, s3{Tensor({2, 2}, {1, 0, 0, 1})};
  CHECK(psa_loss_value(t3, s3, {true, false}) == 0.0);
  CHECK(psa_loss_value(t3, s3, {false, true}) == 1.0);
  CHECK(psa_loss_value(t3, s3, {false, false}) == 0.0);
  CHECK(std::abs(psa_loss_value(t3, s3, {true, true}) - 0.5) < 1e-15);
  // Positively collinear pairs give exactly zero.
  Rng rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor a = testing::random_tensor(rng, {3, 5});
    CHECK(psa_loss_value({a}, {a}, {true, true, true}) == 0.0);
    CHECK(psa_loss_value({a}, {testing::random_tensor(rng, {3, 5})}, {true, false, true}) >= 0.0);
  }
  CHECK_THROWS_WITH(psa_loss_value(t2, t, {true}), doctest::Contains("tap layers"));
}

TEST_CASE("cade loss combination") {
  CHECK(cade_loss_value(0.7, 0.3, 0.2, 0.1, {0, 0, 0}) == 0.7);
  CHECK(cade_loss_value(1, 1, 1, 1, {1, 1, 1}) == 4.0);
  CHECK(std::abs(cade_loss_value(0.7, 0.3, 0.2, 0.1, {0.5, 0.5, 0.5}) - 1.0) < 1e-12);
  CHECK_THROWS(cade_loss_value(1, 1, 1, 1, {-1, 0, 0}));
}

TEST_CASE("quadratic penalty values") {
  ag::ParameterStore p;
  p.add("w", Tensor::vector({4.0}));
  ImportanceMap imp;
  imp.importance.emplace("w", Tensor::vector({2.0}));
  imp.anchor.emplace("w", Tensor::vector({1.0}));
  CHECK(quadratic_penalty_value(p, imp, 1.0) == 9.0);
  imp.anchor.at("w") = Tensor::vector({4.0});
  CHECK(quadratic_penalty_value(p, imp, 1.0) == 0.0);
  imp.anchor.at("w") = Tensor::vector({1.0});
  imp.importance.at("w") = Tensor::vector({0.0});
  CHECK(quadratic_penalty_value(p, imp, 100.0) == 0.0);
  imp.importance.at("w") = Tensor::vector({1.0, 2.0});
  CHECK_THROWS_WITH(quadratic_penalty_value(p, imp, 1.0), doctest::Contains("shape mismatch"));
}

TEST_CASE("loss gradients match finite differences") {
  Rng rng(31);
  for (const auto& name : testing::loss_names()) {
    double worst = 0;
    for (int i = 0; i < 100; ++i) worst = std::max(worst, testing::loss_gradient_error(name, rng));
    INFO(name);
    CHECK(worst <= 1e-5);
  }
}

TEST_CASE("Fisher and MAS importances") {
  ag::ParameterStore p;
  p.add("w", Tensor({3, 2}, {0.5, -0.2, 0.1, 0.3, -0.4, 0.7}));
  LogitFn logits = [](ag::Graph& g, const Bindings& b, const Tensor& x) { return ag::matmul(g.constant(x), b.at("w")); };
  Tensor x({1, 3}, {1.0, -2.0, 0.5});
  double z[2] = {0, 0};
  for (std::size_t k = 0; k < 2; ++k)
    for (std::size_t i = 0; i < 3; ++i) z[k] += x[i] * p.value("w")[i * 2 + k];
  const double p1 = 1 / (1 + std::exp(-(z[1] - z[0])));  // sigma of the logit gap

  for (std::size_t y : {0u, 1u}) {
    Rng rng(1);
    auto f = estimate_fisher(p, logits, {x}, rng, false, {y});
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t k = 0; k < 2; ++k) {
        const double pk = k == 1 ? p1 : 1 - p1;
        const double g = x[i] * ((k == y ? 1.0 : 0.0) - pk);
        CHECK(std::abs(f.importance.at("w")[i * 2 + k] - g * g) <= 1e-10);
      }
    CHECK(f.anchor.at("w") == p.value("w"));
  }
  {
    // Sampled label: replay the draw.
    Rng rng(5), replay(5);
    auto f = estimate_fisher(p, logits, {x}, rng);
    const std::size_t y = replay.uniform() < 1 - p1 ? 0 : 1;
    const double g = x[0] * ((y == 0 ? 1.0 : 0.0) - (1 - p1));
    CHECK(std::abs(f.importance.at("w")[0] - g * g) <= 1e-10);
  }
  auto mas = mas_importance(p, logits, {x});
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t k = 0; k < 2; ++k) CHECK(std::abs(mas.importance.at("w")[i * 2 + k] - std::abs(2 * z[k] * x[i])) <= 1e-10);

  // Zero-weight model: zero importance for MAS; a head that keeps a constant gap gets zero Fisher.
  auto m = init_model(ModelConfig{}, 3);
  for (const auto& name : m.params.names())
    for (auto& v : m.params.mutable_value(name).values()) v = 0.0;
  Rng rng(2);
  std::vector<Tensor> inputs{testing::random_tensor(rng, {1, 1, 20, 32}), testing::random_tensor(rng, {1, 1, 20, 32})};
  auto zm = mas_importance(m.params, model_logits(m.config), inputs);
  for (const auto& [name, t] : zm.importance)
    for (double v : t.values()) CHECK(v == 0.0);
  auto zf = estimate_fisher(m.params, model_logits(m.config), inputs, rng);
  for (double v : zf.importance.at("fc2.weight").values()) CHECK(v == 0.0);

  auto live = init_model(ModelConfig{}, 4);
  auto lf = estimate_fisher(live.params, model_logits(live.config), inputs, rng);
  auto lm = mas_importance(live.params, model_logits(live.config), inputs);
  for (const auto* imp : {&lf, &lm})
    for (const auto& [name, t] : imp->importance)
      for (double v : t.values()) CHECK(v >= 0.0);
  CHECK_THROWS_WITH(mas_importance(live.params, model_logits(live.config), {}), doctest::Contains("empty"));

  ImportanceMap acc = lf;
  acc.accumulate(lf);
  CHECK(acc.importance.at("fc2.bias")[0] == 2 * lf.importance.at("fc2.bias")[0]);

  ImportanceMap norm = lm;
  norm.normalize_max();
  double top = 0;
  for (const auto& [name, t] : norm.importance)
    for (double v : t.values()) top = std::max(top, v);
  CHECK(top == 1.0);
  ImportanceMap zero = zm;
  zero.normalize_max();
  for (double v : zero.importance.at("fc2.weight").values()) CHECK(v == 0.0);
}

TEST_CASE("quota water-filling") {
  CHECK(fill_quotas(500, {600}) == std::vector<std::size_t>{500});
  CHECK(fill_quotas(500, {600, 600, 600}) == std::vector<std::size_t>{168, 166, 166});
  CHECK(fill_quotas(500, {100, 600}) == std::vector<std::size_t>{100, 400});
  CHECK(fill_quotas(500, {100, 100}) == std::vector<std::size_t>{100, 100});
  CHECK(fill_quotas(7, {3, 10, 10}) == std::vector<std::size_t>{3, 2, 2});
}

TEST_CASE("buffer capacity holds for every strategy") {
  for (auto s : {BufferStrategy::fixed_random, BufferStrategy::reservoir, BufferStrategy::ring_buffer,
                 BufferStrategy::mean_of_feature}) {
    INFO(strategy_name(s));
    MemoryBuffer b(500, s);
    Rng rng(1);
    FeatureFn feats = [](const std::vector<FeatureMap>& d) {
      std::vector<std::vector<double>> f;
      for (const auto& m : d) f.push_back({m.values[0]});
      return f;
    };
    for (std::size_t t = 0; t < 3; ++t) b.insert_task(items(500, t, t * 500), rng, feats);
    CHECK(b.size() == 500);
    CHECK(b.stored() <= 500);
  }
}

TEST_CASE("buffer capacity under randomized insertion") {
  Rng rng(12);
  for (auto s : {BufferStrategy::fixed_random, BufferStrategy::reservoir, BufferStrategy::ring_buffer,
                 BufferStrategy::mean_of_feature}) {
    INFO(strategy_name(s));
    const std::size_t cap = 1 + rng.below(300);
    MemoryBuffer b(cap, s);
    FeatureFn feats = [](const std::vector<FeatureMap>& d) {
      std::vector<std::vector<double>> f;
      for (const auto& m : d) f.push_back({m.values[0]});
      return f;
    };
    std::size_t inserted = 0, task = 0;
    bool ok = true, balanced = true;
    while (inserted < 100000) {
      const std::size_t n = 1 + rng.below(400);
      std::vector<FeatureMap> batch;
      for (std::size_t i = 0; i < n; ++i) batch.push_back(item(inserted + i, rng.below(3) == 0 ? kBonaFide : kSpoof, task));
      if (s == BufferStrategy::ring_buffer) {
        for (const auto& m : batch) {
          b.observe(m, rng);
          ok = ok && b.stored() <= cap && b.size() <= cap;
          std::size_t c[2] = {0, 0};
          for (const auto& x : b.items()) ++c[x.label];
          balanced = balanced && (c[0] > c[1] ? c[0] - c[1] : c[1] - c[0]) <= 1;
        }
      } else {
        b.insert_task(batch, rng, feats);
      }
      ok = ok && b.stored() <= cap && b.size() <= cap;
      inserted += n;
      ++task;
    }
    CHECK(ok);
    CHECK(balanced);
    CHECK(b.seen() == inserted);
  }
}

TEST_CASE("reservoir keeps everything when capacity covers the stream") {
  MemoryBuffer b(100, BufferStrategy::reservoir);
  Rng rng(1);
  b.insert_task(items(80, 0), rng);
  REQUIRE(b.size() == 80);
  for (std::size_t i = 0; i < 80; ++i) CHECK(b.items()[i].values[0] == double(i));
}

TEST_CASE("reservoir inclusion frequencies") {
  const std::size_t cap = 10, stream = 1000, trials = 20000;
  std::vector<std::size_t> count(stream, 0);
  Rng rng(1);
  auto data = items(stream, 0);
  for (std::size_t t = 0; t < trials; ++t) {
    MemoryBuffer b(cap, BufferStrategy::reservoir);
    for (const auto& m : data) b.observe(m, rng);
    for (const auto& m : b.items()) ++count[static_cast<std::size_t>(m.values[0])];
  }
  const double p = double(cap) / double(stream);
  const double se = std::sqrt(p * (1 - p) / double(trials));
  std::size_t outside = 0;
  double worst = 0;
  for (auto c : count) {
    const double z = std::abs(double(c) / double(trials) - p) / se;
    worst = std::max(worst, z);
    if (z > 3) ++outside;
  }
  MESSAGE("reservoir: " << outside << " of " << stream << " items beyond 3 SE, max |z| = " << worst);
  CHECK(outside == 0);
}

TEST_CASE("buffer sampling") {
  MemoryBuffer b(50, BufferStrategy::fixed_random);
  Rng rng(3);
  b.insert_task(items(50, 0), rng);
  auto all = b.sample(50, rng);
  std::set<const FeatureMap*> distinct(all.begin(), all.end());
  CHECK(distinct.size() == 50);
  CHECK(b.sample(80, rng).size() == 80);

  Rng r1(9), r2(9);
  auto s1 = b.sample(10, r1), s2 = b.sample(10, r2);
  CHECK(s1 == s2);

  std::vector<std::size_t> hits(50, 0);
  const std::size_t trials = 50000;
  for (std::size_t t = 0; t < trials; ++t) ++hits[static_cast<std::size_t>(b.sample(1, rng)[0]->values[0])];
  const double p = 1.0 / 50, se = std::sqrt(p * (1 - p) / trials);
  for (auto h : hits) CHECK(std::abs(double(h) / trials - p) <= 3 * se);

  MemoryBuffer empty(10, BufferStrategy::reservoir);
  CHECK_THROWS_WITH(empty.sample(1, rng), doctest::Contains("empty"));
}

TEST_CASE("fixed-random quotas across tasks") {
  MemoryBuffer b(500, BufferStrategy::fixed_random);
  Rng rng(4);
  for (std::size_t t = 0; t < 3; ++t) b.insert_task(items(600, t, 1000 * t), rng);
  std::size_t per[3] = {0, 0, 0};
  for (const auto& m : b.items()) ++per[m.task_id];
  CHECK(per[0] == 168);
  CHECK(per[1] == 166);
  CHECK(per[2] == 166);
  std::set<double> ids;
  for (const auto& m : b.items()) ids.insert(m.values[0]);
  CHECK(ids.size() == 500);
}

TEST_CASE("ring-buffer exposes a balanced view") {
  MemoryBuffer b(10, BufferStrategy::ring_buffer);
  Rng rng(1);
  for (std::size_t i = 0; i < 7; ++i) b.observe(item(i, kBonaFide), rng);
  CHECK(b.stored() == 5);
  CHECK(b.size() == 1);
  b.observe(item(100, kSpoof), rng);
  b.observe(item(101, kSpoof), rng);
  CHECK(b.size() == 5);
  // Most recent bona fide items are kept.
  std::set<double> ids;
  for (const auto& m : b.items()) ids.insert(m.values[0]);
  CHECK(ids == std::set<double>{4, 5, 6, 100, 101});
}

TEST_CASE("mean-of-feature keeps the items nearest each class mean") {
  std::vector<FeatureMap> data;
  for (std::size_t i = 0; i < 10; ++i) data.push_back(item(i, i < 5 ? kBonaFide : kSpoof));
  // Bona fide features 0..4 (mean 2), spoof features 5..9 (mean 7).
  FeatureFn feats = [](const std::vector<FeatureMap>& d) {
    std::vector<std::vector<double>> f;
    for (const auto& m : d) f.push_back({m.values[0]});
    return f;
  };
  MemoryBuffer b(2, BufferStrategy::mean_of_feature);
  Rng rng(1);
  b.insert_task(data, rng, feats);
  std::set<double> ids;
  for (const auto& m : b.items()) ids.insert(m.values[0]);
  CHECK(ids == std::set<double>{2, 7});
  MemoryBuffer nofeat(2, BufferStrategy::mean_of_feature);
  CHECK_THROWS_WITH(nofeat.insert_task(data, rng), doctest::Contains("feature function"));
}

TEST_CASE("buffer serialization round trip") {
  for (auto s : {BufferStrategy::fixed_random, BufferStrategy::reservoir, BufferStrategy::ring_buffer}) {
    MemoryBuffer b(40, s);
    Rng rng(2);
    b.insert_task(items(60, 0), rng);
    b.insert_task(items(60, 1, 100), rng);
    auto back = MemoryBuffer::decode(b.encode(), 40, s, b.seen());
    CHECK(back.items() == b.items());
    CHECK(back.seen() == b.seen());
  }
}

TEST_CASE("method objectives compose as specified") {
  auto m = init_model(ModelConfig{}, 1);
  auto teacher_model = init_model(ModelConfig{}, 2);
  Rng rng(5);
  Tensor x = testing::random_tensor(rng, {6, 1, 20, 32});
  std::vector<std::size_t> labels{1, 0, 1, 1, 0, 0};

  auto teacher_out = [&](const std::vector<std::size_t>& classes) {
    auto r = forward_with_taps(teacher_model, x);
    TeacherOutputs t{r.logits, r.taps.embeddings, gradcam_batch(teacher_model, x, classes, 2).maps};
    return t;
  };

  auto run = [&](const MethodSpec& spec, std::size_t task, const TeacherOutputs* teacher) {
    ag::Graph g;
    auto p = bind(g, m.params, true);
    auto f = forward_graph(m.config, p, g.constant(x));
    ObjectiveInputs in;
    in.task_index = task;
    in.logits = f.logits;
    in.labels = &labels;
    in.student_taps = f.taps;
    in.student_maps = student_attention(m, *f.activation, argmax_classes(f.logits.value()));
    in.teacher = teacher;
    in.params = &p;
    auto terms = method_objective(spec, in);
    return std::pair{terms.total.value().item(), terms};  // terms.total dies with the graph
  };

  auto spec = [](Method m) {
    MethodSpec s;
    s.kind = m;
    return s;
  };
  MethodSpec finetune = spec(Method::finetune), cade = spec(Method::cade), lwf = spec(Method::lwf),
             dfwf = spec(Method::dfwf);
  const double lc = run(finetune, 1, nullptr).first;
  CHECK(run(cade, 0, nullptr).first == lc);
  CHECK_THROWS_WITH(run(cade, 1, nullptr), doctest::Contains("teacher"));

  auto classes = argmax_classes(forward(m, x));
  auto teacher = teacher_out(classes);
  dfwf.weights.gamma = 0;
  CHECK(run(dfwf, 1, &teacher).first == run(lwf, 1, &teacher).first);
  cade.weights = {0, 0, 0};
  CHECK(run(cade, 1, &teacher).first == lc);
  cade.weights = {1.0, 0.1, 0.5};
  auto [total, terms] = run(cade, 1, &teacher);
  CHECK(terms.l_kd > 0);
  CHECK(terms.l_ad > 0);
  CHECK(terms.l_psa > 0);
  CHECK(std::abs(total - (terms.l_c + terms.l_kd + 0.1 * terms.l_ad + 0.5 * terms.l_psa)) < 1e-12);

  // A teacher identical to the student contributes no attention or alignment penalty.
  teacher_model = m;
  auto self = teacher_out(classes);
  auto same = run(cade, 1, &self).second;
  CHECK(same.l_ad == 0.0);
  CHECK(std::abs(same.l_psa) < 1e-15);

  MethodSpec ewc = spec(Method::ewc);
  CHECK(run(ewc, 1, nullptr).first == lc);
}

TEST_CASE("method names") {
  for (auto m : {Method::finetune, Method::replay, Method::joint, Method::ewc, Method::mas, Method::lwf, Method::dfwf,
                 Method::cade})
    CHECK(parse_method(method_name(m)) == m);
  CHECK(method_display_name(Method::cade) == "CADE");
  CHECK(method_display_name(Method::finetune) == "Finetune");
  CHECK_THROWS_WITH(parse_method("cadee"), doctest::Contains("unknown method"));
}
