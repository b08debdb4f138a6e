#include "cade/json_convert.hpp"

#include <algorithm>
#include <limits>

namespace cade {

std::size_t edit_distance(const std::string& a, const std::string& b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] != b[j - 1])});
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

ObjectReader::ObjectReader(const Json& j, std::string path) : obj_(j), path_(std::move(path)) {
  if (!j.is_object())
    throw ConfigError("config: '" + (path_.empty() ? std::string("<root>") : path_) +
                      "' must be an object");
}

const Json& ObjectReader::at(const std::string& key) {
  used_.insert(key);
  known_.insert(key);
  return obj_.at(key);
}

namespace {
[[noreturn]] void type_error(const std::string& path, const char* want) {
  throw ConfigError("config: '" + path + "' must be " + want);
}
}  // namespace

void ObjectReader::read(const std::string& key, double& out) {
  if (!has(key)) return;
  const auto& v = at(key);
  if (!v.is_number()) type_error(path_of(key), "a number");
  out = v.get<double>();
}

void ObjectReader::read(const std::string& key, bool& out) {
  if (!has(key)) return;
  const auto& v = at(key);
  if (!v.is_boolean()) type_error(path_of(key), "a boolean");
  out = v.get<bool>();
}

void ObjectReader::read(const std::string& key, std::string& out) {
  if (!has(key)) return;
  const auto& v = at(key);
  if (!v.is_string()) type_error(path_of(key), "a string");
  out = v.get<std::string>();
}

void ObjectReader::read(const std::string& key, std::uint64_t& out) {
  if (!has(key)) return;
  const auto& v = at(key);
  if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<std::int64_t>() >= 0))
    type_error(path_of(key), "a non-negative integer");
  out = v.get<std::uint64_t>();
}

void ObjectReader::read(const std::string& key, std::uint32_t& out) {
  std::uint64_t v = out;
  read(key, v);
  if (v > std::numeric_limits<std::uint32_t>::max()) type_error(path_of(key), "a 32-bit integer");
  out = static_cast<std::uint32_t>(v);
}

void ObjectReader::read(const std::string& key, std::vector<std::string>& out) {
  if (!has(key)) return;
  const auto& v = at(key);
  if (!v.is_array()) type_error(path_of(key), "an array of strings");
  out.clear();
  for (const auto& e : v) {
    if (!e.is_string()) type_error(path_of(key), "an array of strings");
    out.push_back(e.get<std::string>());
  }
}

void ObjectReader::read(const std::string& key, std::vector<std::uint64_t>& out) {
  if (!has(key)) return;
  const auto& v = at(key);
  if (!v.is_array()) type_error(path_of(key), "an array of non-negative integers");
  out.clear();
  for (const auto& e : v) {
    if (!e.is_number_unsigned() && !(e.is_number_integer() && e.get<std::int64_t>() >= 0))
      type_error(path_of(key), "an array of non-negative integers");
    out.push_back(e.get<std::uint64_t>());
  }
}

void ObjectReader::finish() const {
  for (auto it = obj_.begin(); it != obj_.end(); ++it) {
    if (used_.count(it.key())) continue;
    std::string msg = "config: unknown key '" + path_of(it.key()) + "'";
    std::string best;
    std::size_t best_d = std::numeric_limits<std::size_t>::max();
    for (const auto& k : known_) {
      auto d = edit_distance(it.key(), k);
      if (d < best_d) best_d = d, best = k;
    }
    if (!best.empty()) msg += " (did you mean '" + path_of(best) + "'?)";
    throw ConfigError(msg);
  }
}

// ---------------------------------------------------------------------------

Json to_json(const LfccConfig& c) {
  return Json{{"frame_len", c.frame_len}, {"hop", c.hop},           {"fft_size", c.fft_size},
              {"n_filters", c.n_filters}, {"n_coeffs", c.n_coeffs}, {"log_floor", c.log_floor}};
}

LfccConfig lfcc_from_json(const Json& j, const std::string& path) {
  LfccConfig c;
  ObjectReader r(j, path);
  r.read("frame_len", c.frame_len);
  r.read("hop", c.hop);
  r.read("fft_size", c.fft_size);
  r.read("n_filters", c.n_filters);
  r.read("n_coeffs", c.n_coeffs);
  r.read("log_floor", c.log_floor);
  r.finish();
  return c;
}

Json to_json(const SpoofFamily& f) {
  return Json{{"name", f.name},           {"tone_hz", f.tone_hz},       {"tone_amp", f.tone_amp},
              {"band_lo_hz", f.band_lo_hz}, {"band_hi_hz", f.band_hi_hz}, {"band_level", f.band_level},
              {"am_rate_hz", f.am_rate_hz}, {"am_depth", f.am_depth},     {"mix_gain", f.mix_gain}};
}

Json to_json(const BaseProcess& b) {
  return Json{{"f0_lo_hz", b.f0_lo_hz},
              {"f0_hi_hz", b.f0_hi_hz},
              {"max_harmonic_hz", b.max_harmonic_hz},
              {"harmonic_rms", b.harmonic_rms},
              {"noise_lo", b.noise_lo},
              {"noise_hi", b.noise_hi},
              {"envelope_rate_lo_hz", b.envelope_rate_lo_hz},
              {"envelope_rate_hi_hz", b.envelope_rate_hi_hz},
              {"envelope_depth", b.envelope_depth}};
}

Json to_json(const SpoofFamilyConfig& c) {
  Json fams = Json::array();
  for (const auto& f : c.families) fams.push_back(to_json(f));
  Json tasks = Json::array();
  for (const auto& t : c.tasks) tasks.push_back(Json{{"name", t.name}, {"families", t.families}});
  return Json{{"sample_rate", c.sample_rate}, {"frames", c.frames}, {"base", to_json(c.base)},
              {"families", fams},            {"tasks", tasks}};
}

SpoofFamilyConfig families_from_json(const Json& j, const std::string& path) {
  SpoofFamilyConfig c = SpoofFamilyConfig::defaults();
  ObjectReader r(j, path);
  r.read("sample_rate", c.sample_rate);
  r.read("frames", c.frames);
  if (r.has("base")) {
    ObjectReader b(r.at("base"), r.path_of("base"));
    b.read("f0_lo_hz", c.base.f0_lo_hz);
    b.read("f0_hi_hz", c.base.f0_hi_hz);
    b.read("max_harmonic_hz", c.base.max_harmonic_hz);
    b.read("harmonic_rms", c.base.harmonic_rms);
    b.read("noise_lo", c.base.noise_lo);
    b.read("noise_hi", c.base.noise_hi);
    b.read("envelope_rate_lo_hz", c.base.envelope_rate_lo_hz);
    b.read("envelope_rate_hi_hz", c.base.envelope_rate_hi_hz);
    b.read("envelope_depth", c.base.envelope_depth);
    b.finish();
  }
  if (r.has("families")) {
    const auto& arr = r.at("families");
    if (!arr.is_array()) throw ConfigError("config: '" + r.path_of("families") + "' must be an array");
    c.families.clear();
    for (std::size_t i = 0; i < arr.size(); ++i) {
      SpoofFamily f;
      ObjectReader fr(arr[i], r.path_of("families") + "[" + std::to_string(i) + "]");
      fr.read("name", f.name);
      fr.read("tone_hz", f.tone_hz);
      fr.read("tone_amp", f.tone_amp);
      fr.read("band_lo_hz", f.band_lo_hz);
      fr.read("band_hi_hz", f.band_hi_hz);
      fr.read("band_level", f.band_level);
      fr.read("am_rate_hz", f.am_rate_hz);
      fr.read("am_depth", f.am_depth);
      fr.read("mix_gain", f.mix_gain);
      fr.finish();
      c.families.push_back(std::move(f));
    }
  }
  if (r.has("tasks")) {
    const auto& arr = r.at("tasks");
    if (!arr.is_array()) throw ConfigError("config: '" + r.path_of("tasks") + "' must be an array");
    c.tasks.clear();
    for (std::size_t i = 0; i < arr.size(); ++i) {
      TaskSpec t;
      ObjectReader tr(arr[i], r.path_of("tasks") + "[" + std::to_string(i) + "]");
      tr.read("name", t.name);
      tr.read("families", t.families);
      tr.finish();
      c.tasks.push_back(std::move(t));
    }
  }
  r.finish();
  return c;
}

Json to_json(const StreamSizes& s) {
  return Json{{"train_per_task", s.train_per_task}, {"eval_per_task", s.eval_per_task}};
}

StreamSizes sizes_from_json(const Json& j, const std::string& path) {
  StreamSizes s;
  ObjectReader r(j, path);
  r.read("train_per_task", s.train_per_task);
  r.read("eval_per_task", s.eval_per_task);
  r.finish();
  return s;
}

Json to_json(const ModelConfig& c) {
  Json blocks = Json::array();
  for (const auto& b : c.blocks)
    blocks.push_back(Json{{"out_channels", b.out_channels},
                          {"kernel_h", b.kernel_h},
                          {"kernel_w", b.kernel_w},
                          {"padding", b.padding},
                          {"pool", b.pool}});
  return Json{{"in_h", c.in_h},
              {"in_w", c.in_w},
              {"blocks", blocks},
              {"activation", c.activation == Activation::relu ? "relu" : "leaky_relu"},
              {"slope", c.slope},
              {"hidden", c.hidden},
              {"taps", c.taps},
              {"gradcam_layer", c.gradcam_layer},
              {"gradcam_relu", c.gradcam_relu}};
}

ModelConfig model_from_json(const Json& j, const std::string& path) {
  ModelConfig c;
  ObjectReader r(j, path);
  r.read("in_h", c.in_h);
  r.read("in_w", c.in_w);
  if (r.has("blocks")) {
    const auto& arr = r.at("blocks");
    if (!arr.is_array()) throw ConfigError("config: '" + r.path_of("blocks") + "' must be an array");
    c.blocks.clear();
    for (std::size_t i = 0; i < arr.size(); ++i) {
      ConvBlockConfig b;
      ObjectReader br(arr[i], r.path_of("blocks") + "[" + std::to_string(i) + "]");
      br.read("out_channels", b.out_channels);
      br.read("kernel_h", b.kernel_h);
      br.read("kernel_w", b.kernel_w);
      br.read("padding", b.padding);
      br.read("pool", b.pool);
      br.finish();
      c.blocks.push_back(b);
    }
  }
  std::string act = c.activation == Activation::relu ? "relu" : "leaky_relu";
  r.read("activation", act);
  if (act == "relu") c.activation = Activation::relu;
  else if (act == "leaky_relu") c.activation = Activation::leaky_relu;
  else throw ConfigError("config: '" + r.path_of("activation") + "' must be \"relu\" or \"leaky_relu\"");
  r.read("slope", c.slope);
  r.read("hidden", c.hidden);
  r.read("taps", c.taps);
  r.read("gradcam_layer", c.gradcam_layer);
  r.read("gradcam_relu", c.gradcam_relu);
  r.finish();
  return c;
}

Json to_json(const OptimizerConfig& c) {
  return Json{{"kind", c.kind == OptimizerConfig::Kind::sgd ? "sgd" : "adam"},
              {"lr", c.lr},
              {"momentum", c.momentum},
              {"beta1", c.beta1},
              {"beta2", c.beta2},
              {"eps", c.eps}};
}

OptimizerConfig optimizer_from_json(const Json& j, const std::string& path) {
  OptimizerConfig c;
  ObjectReader r(j, path);
  std::string kind = c.kind == OptimizerConfig::Kind::sgd ? "sgd" : "adam";
  r.read("kind", kind);
  if (kind == "sgd") c.kind = OptimizerConfig::Kind::sgd;
  else if (kind == "adam") c.kind = OptimizerConfig::Kind::adam;
  else throw ConfigError("config: '" + r.path_of("kind") + "' must be \"sgd\" or \"adam\"");
  r.read("lr", c.lr);
  r.read("momentum", c.momentum);
  r.read("beta1", c.beta1);
  r.read("beta2", c.beta2);
  r.read("eps", c.eps);
  r.finish();
  return c;
}

Json to_json(const MethodSpec& m) {
  return Json{{"name", method_name(m.kind)},
              {"alpha", m.weights.alpha},
              {"beta", m.weights.beta},
              {"gamma", m.weights.gamma},
              {"lambda", m.lambda},
              {"fisher_sampled_label", m.fisher_sampled_label},
              {"importance_samples", m.importance_samples},
              {"normalize_importance", m.normalize_importance},
              {"dfwf_uses_buffer", m.dfwf_uses_buffer}};
}

MethodSpec method_from_json(const Json& j, const std::string& path) {
  MethodSpec m;
  if (j.is_string()) {
    try {
      m.kind = parse_method(j.get<std::string>());
    } catch (const Error& e) {
      throw ConfigError("config: '" + path + "': " + e.what());
    }
    return m;
  }
  ObjectReader r(j, path);
  if (!r.has("name")) throw ConfigError("config: '" + r.path_of("name") + "' is required");
  std::string name;
  r.read("name", name);
  try {
    m.kind = parse_method(name);
  } catch (const Error& e) {
    throw ConfigError("config: '" + r.path_of("name") + "': " + e.what());
  }
  r.read("alpha", m.weights.alpha);
  r.read("beta", m.weights.beta);
  r.read("gamma", m.weights.gamma);
  r.read("lambda", m.lambda);
  r.read("fisher_sampled_label", m.fisher_sampled_label);
  r.read("importance_samples", m.importance_samples);
  r.read("normalize_importance", m.normalize_importance);
  r.read("dfwf_uses_buffer", m.dfwf_uses_buffer);
  r.finish();
  return m;
}

Json to_json(const RunConfig& c) {
  return Json{{"method", to_json(c.method)},
              {"model", to_json(c.model)},
              {"optimizer", to_json(c.optimizer)},
              {"epochs", c.epochs},
              {"batch_size", c.batch_size},
              {"replay_fraction", c.replay_fraction},
              {"memory", c.memory},
              {"buffer", strategy_name(c.buffer)},
              {"eval_batch", c.eval_batch},
              {"seed", c.seed}};
}

RunConfig run_from_json(const Json& j, const std::string& path) {
  RunConfig c;
  ObjectReader r(j, path);
  if (r.has("method")) c.method = method_from_json(r.at("method"), r.path_of("method"));
  if (r.has("model")) c.model = model_from_json(r.at("model"), r.path_of("model"));
  if (r.has("optimizer")) c.optimizer = optimizer_from_json(r.at("optimizer"), r.path_of("optimizer"));
  r.read("epochs", c.epochs);
  r.read("batch_size", c.batch_size);
  r.read("replay_fraction", c.replay_fraction);
  r.read("memory", c.memory);
  std::string buffer = strategy_name(c.buffer);
  r.read("buffer", buffer);
  try {
    c.buffer = parse_strategy(buffer);
  } catch (const Error& e) {
    throw ConfigError("config: '" + r.path_of("buffer") + "': " + e.what());
  }
  r.read("eval_batch", c.eval_batch);
  r.read("seed", c.seed);
  r.finish();
  return c;
}

}  // namespace cade
