#include <cmath>
#include <filesystem>

#include "doctest.h"

#include "cade/binary_io.hpp"
#include "cade/json_convert.hpp"
#include "cade/model.hpp"
#include "cade/optimizer.hpp"
#include "gradcam_check.hpp"

using namespace cade;

namespace {

Tensor random_input(Rng& rng, std::size_t n, const ModelConfig& cfg) {
  Tensor x({n, 1, cfg.in_h, cfg.in_w});
  for (auto& v : x.values()) v = rng.uniform(-1, 1);
  return x;
}

void zero_all(Model& m) {
  for (const auto& name : m.params.names())
    for (auto& v : m.params.mutable_value(name).values()) v = 0.0;
}

}  // namespace

TEST_CASE("initialization is deterministic and seed dependent") {
  ModelConfig cfg;
  auto a = init_model(cfg, 5), b = init_model(cfg, 5), c = init_model(cfg, 6);
  CHECK(a.params.same_values(b.params));
  CHECK(!a.params.same_values(c.params));
  CHECK(a.params.value("conv0.weight").shape() == Shape{8, 1, 3, 3});
  CHECK(a.params.value("conv2.weight").shape() == Shape{32, 16, 3, 3});
  CHECK(a.params.value("fc1.weight").shape() == Shape{256, 64});
  CHECK(a.params.value("fc2.weight").shape() == Shape{64, 2});
  const double bound = std::sqrt(6.0 / 9.0);
  for (double v : a.params.value("conv0.weight").values()) CHECK(std::abs(v) <= bound);
  for (double v : a.params.value("conv1.bias").values()) CHECK(v == 0.0);
}

TEST_CASE("default geometry and forward shapes") {
  ModelConfig cfg;
  CHECK(cfg.flat_dim() == 256);
  CHECK(cfg.activation_dims(2).h == 5);
  CHECK(cfg.activation_dims(2).w == 8);
  auto m = init_model(cfg, 1);
  Rng rng(2);
  auto x = random_input(rng, 3, cfg);
  auto r = forward_with_taps(m, x);
  CHECK(r.logits.shape() == Shape{3, 2});
  REQUIRE(r.taps.embeddings.size() == 4);
  CHECK(r.taps.layers == std::vector<std::size_t>{0, 1, 2, 3});
  CHECK(r.taps.embeddings[0].shape() == Shape{3, 8 * 10 * 16});
  CHECK(r.taps.embeddings[2].shape() == Shape{3, 256});
  CHECK(r.taps.embeddings[3].shape() == Shape{3, 64});
  CHECK(r.conv_activations.shape() == Shape{3, 32, 5, 8});
  CHECK(forward(m, x) == r.logits);
  CHECK_THROWS_WITH(forward(m, Tensor({1, 1, 20, 31})), doctest::Contains("input shape"));
}

TEST_CASE("zero-weight model outputs zero logits") {
  auto m = init_model(ModelConfig{}, 3);
  zero_all(m);
  Rng rng(1);
  auto l = forward(m, random_input(rng, 2, m.config));
  for (double v : l.values()) CHECK(v == 0.0);
}

TEST_CASE("hand-computed forward") {
  ModelConfig cfg;
  cfg.in_h = 2;
  cfg.in_w = 2;
  cfg.blocks = {{1, 1, 1, 0, 1}};
  cfg.activation = Activation::relu;
  cfg.hidden = 0;
  cfg.taps = {1};
  cfg.gradcam_layer = 0;
  auto m = init_model(cfg, 1);
  m.params.mutable_value("conv0.weight")[0] = 2.0;
  m.params.mutable_value("conv0.bias")[0] = -1.0;
  m.params.mutable_value("fc2.weight") = Tensor({4, 2}, {1, 0, 2, 1, 0, -1, 3, 0.5});
  m.params.mutable_value("fc2.bias") = Tensor({2}, {0.25, -0.5});
  Tensor x({1, 1, 2, 2}, {1.0, 0.25, 2.0, 0.75});
  // conv+relu: [1, 0, 3, 0.5]
  auto l = forward(m, x);
  CHECK(std::abs(l[0] - (1 * 1 + 0 * 2 + 3 * 0 + 0.5 * 3 + 0.25)) <= 1e-12);
  CHECK(std::abs(l[1] - (0 + 0 * 1 + 3 * -1 + 0.5 * 0.5 - 0.5)) <= 1e-12);
}

TEST_CASE("Grad-CAM on a 1x1 conv into a spatial mean") {
  ModelConfig cfg;
  cfg.in_h = 3;
  cfg.in_w = 3;
  cfg.blocks = {{1, 1, 1, 0, 1}};
  cfg.activation = Activation::relu;
  cfg.hidden = 0;
  cfg.taps = {1};
  cfg.gradcam_layer = 0;
  auto m = init_model(cfg, 1);
  m.params.mutable_value("conv0.weight")[0] = 1.5;
  m.params.mutable_value("conv0.bias")[0] = 0.0;
  Tensor w({9, 2}, 0.0);
  for (std::size_t i = 0; i < 9; ++i) w[i * 2] = 1.0 / 9.0;  // logit 0 = mean activation
  m.params.mutable_value("fc2.weight") = w;
  Tensor x({1, 1, 3, 3}, {1, 2, 0.5, 0.1, 0.3, 0.9, 2, 1, 0.2});
  auto map = gradcam(m, x, 0, 0);
  // d logit / d A = 1/9 everywhere, so weight = 1/9 and map = A / 9.
  for (std::size_t j = 0; j < 9; ++j) CHECK(std::abs(map.values[j] - 1.5 * x[j] / 9.0) <= 1e-12);
  auto zero = gradcam(m, x, 1, 0);  // logit 1 ignores the layer
  for (double v : zero.values) CHECK(v == 0.0);
  CHECK_THROWS_WITH(gradcam(m, x, 2, 0), doctest::Contains("class"));
  CHECK_THROWS_WITH(gradcam(m, x, 0, 1), doctest::Contains("layer"));
}

TEST_CASE("Grad-CAM scales with the logit and is scale-free after normalization") {
  auto m = init_model(ModelConfig{}, 9);
  Rng rng(4);
  auto x = random_input(rng, 1, m.config);
  auto a = gradcam_batch(m, x, {1}, 2);
  auto m2 = m;
  for (auto& v : m2.params.mutable_value("fc2.weight").values()) v *= 2.0;
  for (auto& v : m2.params.mutable_value("fc2.bias").values()) v *= 2.0;
  auto b = gradcam_batch(m2, x, {1}, 2);
  double na = 0, nb = 0;
  for (std::size_t j = 0; j < a.pre_relu.size(); ++j) {
    CHECK(b.pre_relu[j] == doctest::Approx(2.0 * a.pre_relu[j]).epsilon(1e-12));
    na += a.maps[j] * a.maps[j];
    nb += b.maps[j] * b.maps[j];
  }
  for (std::size_t j = 0; j < a.maps.size(); ++j)
    CHECK(std::abs(a.maps[j] / std::sqrt(na) - b.maps[j] / std::sqrt(nb)) <= 1e-12);
}

TEST_CASE("Grad-CAM matches finite differences on random small models") {
  Rng rng(78);
  for (int i = 0; i < 20; ++i) {
    auto m = testing::random_small_model(rng);
    const double err = testing::gradcam_fd_error(m, rng);
    CHECK(err <= 1e-5);
  }
}

TEST_CASE("snapshots are unaffected by training the source") {
  auto m = init_model(ModelConfig{}, 2);
  auto snap = snapshot(m);
  const auto before = parameter_checksum(snap.model().params);
  Rng rng(1);
  ag::Graph g;
  auto p = bind(g, m.params, true);
  auto f = forward_graph(m.config, p, g.constant(random_input(rng, 4, m.config)));
  g.backward(ag::softmax_cross_entropy(f.logits, {0, 1, 1, 0}));
  m.params.zero_grads();
  g.accumulate_parameter_grads(m.params);
  OptimizerState st;
  optimizer_step(m.params, OptimizerConfig{}, st);
  CHECK(!m.params.same_values(snap.model().params));
  CHECK(parameter_checksum(snap.model().params) == before);
}

TEST_CASE("checkpoint round trip and format errors") {
  ModelConfig cfg;
  cfg.blocks = {{4}, {6, 3, 3, 1, 1}};
  cfg.hidden = 12;
  cfg.taps = {1, 2};
  cfg.gradcam_layer = 1;
  auto m = init_model(cfg, 21);
  const auto path = (std::filesystem::temp_directory_path() / "cade_test.ckpt").string();
  save_checkpoint(m, path);
  auto back = load_checkpoint(path);
  CHECK(back.config == m.config);
  CHECK(back.seed == 21);
  CHECK(back.params.same_values(m.params));
  auto bytes = encode_checkpoint(m);
  auto bad = bytes;
  bad[0] = 'X';
  CHECK_THROWS_WITH(decode_checkpoint(bad, "c"), doctest::Contains("version"));
  bad = bytes;
  bad[8] = 2;
  CHECK_THROWS_WITH(decode_checkpoint(bad, "c"), doctest::Contains("version 2"));
  CHECK_THROWS_WITH(decode_checkpoint(bytes.substr(0, bytes.size() - 4), "c"), doctest::Contains("truncated"));
  CHECK_THROWS(load_checkpoint("/nonexistent/dir/x.ckpt"));
  std::filesystem::remove(path);
}

TEST_CASE("model config validation and JSON round trip") {
  ModelConfig cfg;
  cfg.gradcam_layer = 3;
  CHECK_THROWS_WITH(cfg.validate(), doctest::Contains("gradcam_layer"));
  cfg = {};
  cfg.taps = {1, 1};
  CHECK_THROWS_WITH(cfg.validate(), doctest::Contains("strictly increasing"));
  cfg = {};
  cfg.taps = {};
  CHECK_THROWS_WITH(cfg.validate(), doctest::Contains("empty"));
  cfg = {};
  cfg.activation = Activation::relu;
  cfg.hidden = 0;
  CHECK(model_from_json(to_json(cfg), "model") == cfg);
  Json j = to_json(cfg);
  j["blocks"][0]["chanels"] = 3;
  CHECK_THROWS_WITH(model_from_json(j, "model"), doctest::Contains("model.blocks[0].chanels"));
}
