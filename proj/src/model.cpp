#include "cade/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "cade/binary_io.hpp"
#include "cade/json_convert.hpp"
#include "cade/random.hpp"

namespace cade {

void ModelConfig::validate() const {
  auto bad = [](const std::string& what) { throw Error("model config: " + what); };
  if (in_h == 0 || in_w == 0) bad("input size must be positive");
  if (blocks.empty()) bad("at least one conv block is required");
  if (!(slope >= 0 && slope < 1)) bad("slope must be in [0, 1)");
  std::size_t h = in_h, w = in_w;
  for (std::size_t k = 0; k < blocks.size(); ++k) {
    const auto& b = blocks[k];
    const std::string where = "block " + std::to_string(k) + ": ";
    if (b.out_channels == 0 || b.kernel_h == 0 || b.kernel_w == 0 || b.pool == 0)
      bad(where + "channels, kernel and pool must be positive");
    if (h + 2 * b.padding < b.kernel_h || w + 2 * b.padding < b.kernel_w) bad(where + "kernel larger than padded input");
    h = h + 2 * b.padding - b.kernel_h + 1;
    w = w + 2 * b.padding - b.kernel_w + 1;
    if (h < b.pool || w < b.pool) bad(where + "pool window larger than feature map");
    h /= b.pool;
    w /= b.pool;
  }
  if (gradcam_layer >= blocks.size())
    bad("gradcam_layer " + std::to_string(gradcam_layer) + " is not a block index (have " +
        std::to_string(blocks.size()) + " blocks)");
  if (taps.empty()) bad("tap list must not be empty");
  for (std::size_t i = 0; i < taps.size(); ++i) {
    if (taps[i] > blocks.size()) bad("tap " + std::to_string(taps[i]) + " is not a layer id");
    if (i > 0 && taps[i] <= taps[i - 1]) bad("tap list must be strictly increasing");
  }
}

ModelConfig::Dims ModelConfig::activation_dims(std::size_t k) const {
  std::size_t h = in_h, w = in_w;
  for (std::size_t i = 0;; ++i) {
    const auto& b = blocks.at(i);
    h = h + 2 * b.padding - b.kernel_h + 1;
    w = w + 2 * b.padding - b.kernel_w + 1;
    if (i == k) return {b.out_channels, h, w};
    h /= b.pool;
    w /= b.pool;
  }
}

ModelConfig::Dims ModelConfig::block_dims(std::size_t k) const {
  auto d = activation_dims(k);
  return {d.c, d.h / blocks[k].pool, d.w / blocks[k].pool};
}

std::size_t ModelConfig::flat_dim() const { return block_dims(blocks.size() - 1).size(); }

ModelSnapshot snapshot(const Model& m) { return ModelSnapshot(m); }

std::uint64_t parameter_checksum(const ag::ParameterStore& params) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  auto mix = [&](const void* p, std::size_t n) {
    const auto* c = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= c[i];
      h *= 0x100000001b3ull;
    }
  };
  for (const auto& [name, e] : params.entries()) {
    mix(name.data(), name.size());
    for (auto d : e.value.shape()) mix(&d, sizeof d);
    mix(e.value.data(), e.value.size() * sizeof(double));
  }
  return h;
}

Model init_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Model m;
  m.config = cfg;
  m.seed = seed;
  Rng rng(seed);
  auto uniform = [&](Shape shape, std::size_t fan_in) {
    Tensor t(std::move(shape));
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    for (auto& v : t.values()) v = rng.uniform(-bound, bound);
    return t;
  };
  std::size_t in_c = 1;
  for (std::size_t k = 0; k < cfg.blocks.size(); ++k) {
    const auto& b = cfg.blocks[k];
    const std::string p = "conv" + std::to_string(k);
    m.params.add(p + ".weight", uniform({b.out_channels, in_c, b.kernel_h, b.kernel_w}, in_c * b.kernel_h * b.kernel_w));
    m.params.add(p + ".bias", Tensor({b.out_channels}, 0.0));
    in_c = b.out_channels;
  }
  std::size_t f = cfg.flat_dim();
  if (cfg.hidden > 0) {
    m.params.add("fc1.weight", uniform({f, cfg.hidden}, f));
    m.params.add("fc1.bias", Tensor({cfg.hidden}, 0.0));
    f = cfg.hidden;
  }
  m.params.add("fc2.weight", uniform({f, 2}, f));
  m.params.add("fc2.bias", Tensor({2}, 0.0));
  return m;
}

Tensor make_batch(const std::vector<const FeatureMap*>& maps) {
  if (maps.empty()) throw Error("make_batch: empty batch");
  const std::size_t frames = maps[0]->frames, coeffs = maps[0]->coeffs;
  Tensor out({maps.size(), 1, coeffs, frames});
  double* dst = out.data();
  for (const auto* m : maps) {
    if (m->frames != frames || m->coeffs != coeffs)
      throw Error("make_batch: feature maps differ in shape (" + std::to_string(m->frames) + "x" +
                  std::to_string(m->coeffs) + " vs " + std::to_string(frames) + "x" + std::to_string(coeffs) + ")");
    for (std::size_t k = 0; k < coeffs; ++k)
      for (std::size_t t = 0; t < frames; ++t) *dst++ = m->at(t, k);
  }
  return out;
}

// ---------------------------------------------------------------------------

Bindings bind(ag::Graph& g, const ag::ParameterStore& params, bool trainable) {
  Bindings b;
  for (const auto& [name, e] : params.entries())
    b.emplace(name, trainable ? g.parameter(name, e.value) : g.constant(e.value));
  return b;
}

namespace {

ag::Var param(const Bindings& b, const std::string& name) {
  auto it = b.find(name);
  if (it == b.end()) throw Error("model: missing parameter '" + name + "'");
  return it->second;
}

ag::Var activate(const ModelConfig& cfg, ag::Var x) {
  return cfg.activation == Activation::relu ? ag::relu(x) : ag::leaky_relu(x, cfg.slope);
}

ag::Var flatten(ag::Var x) {
  const auto& s = x.shape();
  return ag::reshape(x, {s[0], shape_size(s) / s[0]});
}

ag::Var pool(const ModelConfig& cfg, std::size_t k, ag::Var x) {
  const auto p = cfg.blocks[k].pool;
  return p > 1 ? ag::maxpool2d(x, p, p) : x;
}

ag::Var conv_block(const ModelConfig& cfg, const Bindings& params, std::size_t k, ag::Var x) {
  const std::string p = "conv" + std::to_string(k);
  return activate(cfg, ag::conv2d(x, param(params, p + ".weight"), param(params, p + ".bias"), 1,
                                  cfg.blocks[k].padding));
}

// From the flattened conv output to the logits; optionally records the penultimate tap.
ag::Var head(const ModelConfig& cfg, const Bindings& params, ag::Var flat, std::vector<ag::Var>* taps) {
  ag::Var x = flat;
  if (cfg.hidden > 0) x = activate(cfg, ag::dense(x, param(params, "fc1.weight"), param(params, "fc1.bias")));
  if (taps && cfg.taps.back() == cfg.penultimate_layer()) taps->push_back(x);
  return ag::dense(x, param(params, "fc2.weight"), param(params, "fc2.bias"));
}

void check_input(const ModelConfig& cfg, const Shape& s) {
  if (s.size() != 4 || s[1] != 1 || s[2] != cfg.in_h || s[3] != cfg.in_w)
    throw Error("model: input shape " + shape_str(s) + " does not match [N,1," + std::to_string(cfg.in_h) + "," +
                std::to_string(cfg.in_w) + "]");
}

void check_layer(const ModelConfig& cfg, std::size_t layer) {
  if (layer >= cfg.blocks.size())
    throw Error("model: layer " + std::to_string(layer) + " is not a conv block (have " +
                std::to_string(cfg.blocks.size()) + ")");
}

}  // namespace

GraphForward forward_graph(const ModelConfig& cfg, const Bindings& params, ag::Var input,
                           const ForwardOptions& opts) {
  check_input(cfg, input.shape());
  const std::size_t gcl = opts.gradcam_layer.value_or(cfg.gradcam_layer);
  check_layer(cfg, gcl);
  GraphForward out;
  std::size_t next_tap = 0;
  ag::Var x = input;
  for (std::size_t k = 0; k < cfg.blocks.size(); ++k) {
    x = conv_block(cfg, params, k, x);
    if (k == gcl) out.activation = x;
    x = pool(cfg, k, x);
    if (opts.record_taps && next_tap < cfg.taps.size() && cfg.taps[next_tap] == k) {
      out.taps.push_back(flatten(x));
      ++next_tap;
    }
  }
  out.logits = head(cfg, params, flatten(x), opts.record_taps ? &out.taps : nullptr);
  return out;
}

ag::Var forward_tail_graph(const ModelConfig& cfg, const Bindings& params, ag::Var activation, std::size_t layer) {
  check_layer(cfg, layer);
  const auto d = cfg.activation_dims(layer);
  const auto& s = activation.shape();
  if (s.size() != 4 || s[1] != d.c || s[2] != d.h || s[3] != d.w)
    throw Error("model: activation shape " + shape_str(s) + " does not match layer " + std::to_string(layer));
  ag::Var x = pool(cfg, layer, activation);
  for (std::size_t k = layer + 1; k < cfg.blocks.size(); ++k) x = pool(cfg, k, conv_block(cfg, params, k, x));
  return head(cfg, params, flatten(x), nullptr);
}

ForwardResult forward_with_taps(const Model& m, const Tensor& batch) {
  ag::Graph g;
  auto p = bind(g, m.params, false);
  auto f = forward_graph(m.config, p, g.constant(batch));
  ForwardResult r;
  r.logits = f.logits.value();
  r.taps.layers = m.config.taps;
  for (auto v : f.taps) r.taps.embeddings.push_back(v.value());
  r.conv_activations = f.activation->value();
  return r;
}

Tensor forward(const Model& m, const Tensor& batch) {
  ag::Graph g;
  auto p = bind(g, m.params, false);
  return forward_graph(m.config, p, g.constant(batch), {.record_taps = false, .gradcam_layer = std::nullopt}).logits.value();
}

Tensor forward_tail(const Model& m, const Tensor& activations, std::size_t layer) {
  ag::Graph g;
  auto p = bind(g, m.params, false);
  return forward_tail_graph(m.config, p, g.constant(activations), layer).value();
}

Tensor gradcam_weights(const ModelConfig& cfg, const ag::ParameterStore& params, const Tensor& activations,
                       std::size_t layer, const std::vector<std::size_t>& classes) {
  const std::size_t n = activations.dim(0);
  if (classes.size() != n)
    throw Error("gradcam: " + std::to_string(classes.size()) + " classes for a batch of " + std::to_string(n));
  Tensor onehot({n, 2}, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    if (classes[i] > 1) throw Error("gradcam: class " + std::to_string(classes[i]) + " is not 0 or 1");
    onehot[i * 2 + classes[i]] = 1.0;
  }
  ag::Graph g;
  auto p = bind(g, params, false);
  auto a = g.variable(activations);
  auto logits = forward_tail_graph(cfg, p, a, layer);
  // Samples are independent, so one backward pass yields every per-sample gradient.
  g.backward(ag::sum(ag::mul(logits, g.constant(onehot))));
  const Tensor grad = g.grad(a);
  const std::size_t c = activations.dim(1), hw = activations.dim(2) * activations.dim(3);
  Tensor w({n, c});
  for (std::size_t i = 0; i < n * c; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < hw; ++j) s += grad[i * hw + j];
    w[i] = s / static_cast<double>(hw);
  }
  return w;
}

GradCamBatch gradcam_batch(const Model& m, const Tensor& batch, const std::vector<std::size_t>& classes,
                           std::size_t layer) {
  check_layer(m.config, layer);
  ag::Graph g;
  auto p = bind(g, m.params, false);
  auto f = forward_graph(m.config, p, g.constant(batch), {.record_taps = false, .gradcam_layer = layer});
  GradCamBatch r;
  r.weights = gradcam_weights(m.config, m.params, f.activation->value(), layer, classes);
  auto pre = ag::channel_weighted_sum(*f.activation, g.constant(r.weights));
  r.pre_relu = pre.value();
  r.maps = m.config.gradcam_relu ? ag::relu(pre).value() : r.pre_relu;
  return r;
}

AttentionMap gradcam(const Model& m, const Tensor& input, std::size_t cls, std::size_t layer) {
  Tensor x = input;
  if (x.rank() == 3) x = x.reshaped({1, x.dim(0), x.dim(1), x.dim(2)});
  if (x.rank() != 4 || x.dim(0) != 1) throw Error("gradcam: expected one sample, got " + shape_str(input.shape()));
  if (cls > 1) throw Error("gradcam: class " + std::to_string(cls) + " is not 0 or 1");
  auto r = gradcam_batch(m, x, {cls}, layer);
  return {r.maps.storage(), cls};
}

// ---------------------------------------------------------------------------

namespace {
constexpr char kCheckpointMagic[] = "CADECKPT";
constexpr std::uint32_t kCheckpointVersion = 1;
}  // namespace

std::string encode_checkpoint(const Model& m) {
  bin::Writer w;
  w.bytes(kCheckpointMagic);
  w.u32(kCheckpointVersion);
  w.str(to_json(m.config).dump());
  w.u64(m.seed);
  w.u32(static_cast<std::uint32_t>(m.params.size()));
  for (const auto& [name, e] : m.params.entries()) {
    w.str(name);
    w.u32(static_cast<std::uint32_t>(e.value.rank()));
    for (auto d : e.value.shape()) w.u64(d);
    for (double v : e.value.values()) w.f64(v);
  }
  return w.data();
}

Model decode_checkpoint(const std::string& bytes, const std::string& context) {
  bin::Reader r(bytes, context);
  if (bytes.size() < 8 || r.bytes(8, "magic") != kCheckpointMagic)
    throw Error(context + ": bad magic bytes; not a checkpoint of a supported format version");
  const auto version = r.u32("version");
  if (version != kCheckpointVersion)
    throw Error(context + ": unsupported checkpoint format version " + std::to_string(version) + " (expected " +
                std::to_string(kCheckpointVersion) + ")");
  ModelConfig cfg;
  try {
    cfg = model_from_json(Json::parse(r.str("config")), "model");
  } catch (const Json::exception& e) {
    throw Error(context + ": config block is not valid JSON: " + e.what());
  }
  const auto seed = r.u64("seed");
  Model m = init_model(cfg, seed);
  const auto count = r.u32("parameter count");
  if (count != m.params.size())
    throw Error(context + ": has " + std::to_string(count) + " parameters, config implies " +
                std::to_string(m.params.size()));
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name = r.str("parameter name");
    if (!m.params.contains(name)) throw Error(context + ": unexpected parameter '" + name + "'");
    Shape shape(r.u32("rank"));
    for (auto& d : shape) d = r.u64("dimension");
    Tensor& dst = m.params.mutable_value(name);
    if (shape != dst.shape())
      throw Error(context + ": parameter '" + name + "' has shape " + shape_str(shape) + ", config implies " +
                  shape_str(dst.shape()));
    for (auto& v : dst.values()) v = r.f64("values");
  }
  if (!r.done()) throw Error(context + ": trailing bytes");
  return m;
}

void save_checkpoint(const Model& m, const std::string& path) { bin::write_file(path, encode_checkpoint(m)); }

Model load_checkpoint(const std::string& path) { return decode_checkpoint(bin::read_file(path), path); }

}  // namespace cade
