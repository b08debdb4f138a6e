#include "cade/synth.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numbers>

#include "cade/binary_io.hpp"
#include "cade/hash.hpp"
#include "cade/json_convert.hpp"

namespace cade {

namespace fs = std::filesystem;

SpoofFamilyConfig SpoofFamilyConfig::defaults() {
  SpoofFamilyConfig c;
  auto fam = [](std::string name) {
    SpoofFamily f;
    f.name = std::move(name);
    return f;
  };
  SpoofFamily a1 = fam("A1");  // high-band hiss
  a1.band_lo_hz = 5500;
  a1.band_hi_hz = 7500;
  a1.band_level = 0.01;
  SpoofFamily a2 = fam("A2");  // narrow tonal artifact
  a2.tone_hz = 6400;
  a2.tone_amp = 0.02;
  SpoofFamily a3 = fam("A3");  // over-clean output
  a3.mix_gain = 0.2;
  SpoofFamily a4 = fam("A4");  // fast amplitude flutter
  a4.am_rate_hz = 12;
  a4.am_depth = 0.6;
  SpoofFamily a5 = fam("A5");  // mid-band noise
  a5.band_lo_hz = 1000;
  a5.band_hi_hz = 2000;
  a5.band_level = 0.03;
  SpoofFamily a6 = fam("A6");  // over-noisy output
  a6.mix_gain = 3.0;
  c.families = {a1, a2, a3, a4, a5, a6};
  c.tasks = {{"A1+A2", {"A1", "A2"}}, {"A3+A4", {"A3", "A4"}}, {"A5+A6", {"A5", "A6"}}};
  return c;
}

const SpoofFamily& SpoofFamilyConfig::family(const std::string& name) const {
  for (const auto& f : families)
    if (f.name == name) return f;
  throw Error("synth: unknown spoof family '" + name + "'");
}

void SpoofFamilyConfig::validate() const {
  auto bad = [](const std::string& what) { throw Error("synth config: " + what); };
  if (sample_rate == 0) bad("sample_rate must be positive");
  if (frames == 0) bad("frames must be positive");
  const double nyquist = sample_rate / 2.0;
  const auto& b = base;
  if (!(b.f0_lo_hz > 0 && b.f0_lo_hz <= b.f0_hi_hz && b.f0_hi_hz < nyquist))
    bad("base f0 range must satisfy 0 < f0_lo_hz <= f0_hi_hz < Nyquist");
  if (!(b.max_harmonic_hz >= b.f0_hi_hz && b.max_harmonic_hz < nyquist))
    bad("base max_harmonic_hz must be in [f0_hi_hz, Nyquist)");
  if (!(b.harmonic_rms > 0 && b.harmonic_rms <= 0.5)) bad("base harmonic_rms must be in (0, 0.5]");
  if (!(b.noise_lo >= 0 && b.noise_lo <= b.noise_hi && b.noise_hi <= 0.5))
    bad("base noise range must satisfy 0 <= noise_lo <= noise_hi <= 0.5");
  if (!(b.envelope_rate_lo_hz >= 0 && b.envelope_rate_lo_hz <= b.envelope_rate_hi_hz))
    bad("base envelope rate range is inverted");
  if (!(b.envelope_depth >= 0 && b.envelope_depth < 1)) bad("base envelope_depth must be in [0, 1)");
  for (const auto& f : families) {
    const std::string where = "family '" + f.name + "': ";
    if (f.name.empty()) bad("family with empty name");
    if (std::count_if(families.begin(), families.end(), [&](auto& g) { return g.name == f.name; }) > 1)
      bad(where + "duplicate name");
    if (!(f.tone_amp >= 0 && f.tone_amp <= 0.5)) bad(where + "tone_amp must be in [0, 0.5]");
    if (f.tone_amp > 0 && !(f.tone_hz > 0 && f.tone_hz < nyquist)) bad(where + "tone_hz outside (0, Nyquist)");
    if (!(f.band_level >= 0 && f.band_level <= 0.5)) bad(where + "band_level must be in [0, 0.5]");
    if (f.band_level > 0 && !(f.band_lo_hz > 0 && f.band_lo_hz < f.band_hi_hz && f.band_hi_hz < nyquist))
      bad(where + "band edges must satisfy 0 < lo < hi < Nyquist");
    if (!(f.am_depth >= 0 && f.am_depth <= 1)) bad(where + "am_depth must be in [0, 1]");
    if (f.am_depth > 0 && !(f.am_rate_hz > 0 && f.am_rate_hz < nyquist)) bad(where + "am_rate_hz must be positive");
    if (!(f.mix_gain >= 0 && f.mix_gain <= 10)) bad(where + "mix_gain must be in [0, 10]");
  }
  if (tasks.empty()) bad("at least one task is required");
  for (const auto& t : tasks) {
    if (t.families.empty()) bad("task '" + t.name + "' has no spoof family");
    for (const auto& name : t.families) family(name);
  }
}

void TaskStream::validate() const {
  if (tasks.empty()) throw Error("task stream has no tasks");
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    const auto& t = tasks[i];
    if (t.id != i) throw Error("task stream: task ids must be 0..n-1 in order");
    for (const auto* split : {&t.train, &t.eval}) {
      bool bona = false, spoof = false;
      for (const auto& m : *split) (m.label == kBonaFide ? bona : spoof) = true;
      if (!bona || !spoof)
        throw Error("task stream: task '" + t.name + "' lacks one of the two classes");
    }
  }
}

std::size_t utterance_length(std::size_t frames, const LfccConfig& lfcc) {
  return lfcc.frame_len + (frames - 1) * lfcc.hop;
}

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

// Adds amp*sin(omega*t + phase) for t in [0, n) via the Chebyshev recurrence.
void add_sinusoid(std::vector<double>& x, double omega, double phase, double amp) {
  const double c = 2.0 * std::cos(omega);
  double prev = std::sin(phase - omega), cur = std::sin(phase);
  for (double& v : x) {
    v += amp * cur;
    const double next = c * cur - prev;
    prev = cur;
    cur = next;
  }
}

// x[t] *= 1 + depth*sin(omega*t + phase).
void modulate(std::vector<double>& x, double omega, double phase, double depth) {
  std::vector<double> m(x.size(), 0.0);
  add_sinusoid(m, omega, phase, depth);
  for (std::size_t t = 0; t < x.size(); ++t) x[t] *= 1.0 + m[t];
}

void scale_to_rms(std::vector<double>& x, double rms) {
  double s = 0.0;
  for (double v : x) s += v * v;
  const double cur = std::sqrt(s / static_cast<double>(x.size()));
  if (cur > 0)
    for (double& v : x) v *= rms / cur;
}

}  // namespace

Waveform synth_utterance(const SpoofFamilyConfig& cfg,
                         const std::vector<const SpoofFamily*>& families, bool bona_fide,
                         std::size_t samples, Rng& rng) {
  const double sr = cfg.sample_rate;
  const auto& b = cfg.base;
  std::vector<double> harm(samples, 0.0);
  const double f0 = rng.uniform(b.f0_lo_hz, b.f0_hi_hz);
  for (std::size_t h = 1; h * f0 <= b.max_harmonic_hz; ++h) {
    const double amp = rng.uniform(0.5, 1.0) / static_cast<double>(h);
    add_sinusoid(harm, kTwoPi * f0 * static_cast<double>(h) / sr, rng.uniform(0, kTwoPi), amp);
  }
  scale_to_rms(harm, b.harmonic_rms);

  const double env_rate = rng.uniform(b.envelope_rate_lo_hz, b.envelope_rate_hi_hz);
  const double env_phase = rng.uniform(0, kTwoPi);
  modulate(harm, kTwoPi * env_rate / sr, env_phase, b.envelope_depth);

  std::vector<double> noise(samples);
  const double sigma = rng.uniform(b.noise_lo, b.noise_hi);
  for (double& v : noise) v = sigma * rng.normal();

  std::vector<double> extra(samples, 0.0);
  if (!bona_fide) {
    if (families.empty()) throw Error("synth: spoof utterance needs at least one family");
    const SpoofFamily& f = *families[rng.below(families.size())];
    for (double& v : noise) v *= f.mix_gain;
    if (f.am_depth > 0) {
      modulate(harm, kTwoPi * f.am_rate_hz / sr, rng.uniform(0, kTwoPi), f.am_depth);
    }
    if (f.tone_amp > 0)
      add_sinusoid(extra, kTwoPi * f.tone_hz / sr, rng.uniform(0, kTwoPi), f.tone_amp);
    if (f.band_level > 0) {
      std::vector<double> band(samples, 0.0);
      for (int k = 0; k < 24; ++k)
        add_sinusoid(band, kTwoPi * rng.uniform(f.band_lo_hz, f.band_hi_hz) / sr,
                     rng.uniform(0, kTwoPi), 1.0);
      scale_to_rms(band, f.band_level);
      for (std::size_t t = 0; t < samples; ++t) extra[t] += band[t];
    }
  }

  Waveform w;
  w.sample_rate = cfg.sample_rate;
  w.samples.resize(samples);
  for (std::size_t t = 0; t < samples; ++t)
    w.samples[t] = std::clamp(harm[t] + noise[t] + extra[t], -1.0, 1.0);
  return w;
}

std::string stream_fingerprint(const SpoofFamilyConfig& cfg, const StreamSizes& sizes,
                               const LfccConfig& lfcc, std::uint64_t seed) {
  Json j{{"generator", to_json(cfg)}, {"sizes", to_json(sizes)}, {"lfcc", to_json(lfcc)}, {"seed", seed}};
  return fnv1a_hex(j.dump());
}

TaskStream synth_task_stream(const SpoofFamilyConfig& cfg, const StreamSizes& sizes,
                             const LfccConfig& lfcc, std::uint64_t seed) {
  cfg.validate();
  lfcc.validate();
  if (sizes.train_per_task < 2 || sizes.eval_per_task < 2)
    throw Error("synth: each split needs at least 2 utterances (one per class)");
  const std::size_t samples = utterance_length(cfg.frames, lfcc);

  TaskStream stream;
  stream.fingerprint = stream_fingerprint(cfg, sizes, lfcc, seed);
  for (std::size_t t = 0; t < cfg.tasks.size(); ++t) {
    Task task;
    task.id = t;
    task.name = cfg.tasks[t].name;
    std::vector<const SpoofFamily*> fams;
    for (const auto& name : cfg.tasks[t].families) fams.push_back(&cfg.family(name));
    for (std::size_t split = 0; split < 2; ++split) {
      const std::size_t count = split == 0 ? sizes.train_per_task : sizes.eval_per_task;
      std::vector<FeatureMap> maps(count);
      const std::uint64_t split_seed = Rng::derive(Rng::derive(seed, t), split);
      const auto n = static_cast<std::ptrdiff_t>(count);
#pragma omp parallel for schedule(dynamic, 8)
      for (std::ptrdiff_t i = 0; i < n; ++i) {
        Rng rng(Rng::derive(split_seed, static_cast<std::uint64_t>(i)));
        const bool bona = i % 2 == 0;
        auto m = cade::lfcc(synth_utterance(cfg, fams, bona, samples, rng), lfcc);
        m.label = bona ? kBonaFide : kSpoof;
        m.task_id = t;
        maps[static_cast<std::size_t>(i)] = std::move(m);
      }
      (split == 0 ? task.train : task.eval) = std::move(maps);
    }
    stream.tasks.push_back(std::move(task));
  }
  return stream;
}

// ---------------------------------------------------------------------------
// Persistence

std::string encode_feature_file(const std::vector<FeatureMap>& maps) {
  bin::Writer w;
  w.bytes("CADEFEAT");
  w.u32(1);
  w.u32(0);
  w.u64(maps.size());
  for (const auto& m : maps) {
    w.u32(static_cast<std::uint32_t>(m.frames));
    w.u32(static_cast<std::uint32_t>(m.coeffs));
    w.u32(static_cast<std::uint32_t>(m.label));
    w.u32(static_cast<std::uint32_t>(m.task_id));
    for (double v : m.values) w.f64(v);
  }
  return w.data();
}

std::vector<FeatureMap> decode_feature_file(const std::string& bytes, const std::string& context) {
  bin::Reader r(bytes, context);
  if (r.bytes(8, "magic") != "CADEFEAT") throw Error(context + ": bad magic bytes");
  const auto version = r.u32("version");
  if (version != 1) throw Error(context + ": unsupported feature file version " + std::to_string(version));
  r.u32("reserved");
  const auto count = r.u64("record count");
  std::vector<FeatureMap> out;
  for (std::uint64_t i = 0; i < count; ++i) {
    FeatureMap m;
    m.frames = r.u32("frames");
    m.coeffs = r.u32("coeffs");
    const auto label = r.u32("label");
    if (label > 1) throw Error(context + ": record " + std::to_string(i) + " has label " + std::to_string(label));
    m.label = static_cast<int>(label);
    m.task_id = r.u32("task id");
    if (m.frames * m.coeffs > r.remaining() / 8) throw Error(context + ": truncated while reading values");
    m.values.resize(m.frames * m.coeffs);
    for (auto& v : m.values) {
      v = r.f64("values");
      if (!std::isfinite(v)) throw Error(context + ": non-finite feature value in record " + std::to_string(i));
    }
    out.push_back(std::move(m));
  }
  if (!r.done()) throw Error(context + ": trailing bytes after last record");
  return out;
}

void save_stream(const TaskStream& stream, const std::string& dir,
                 const std::string& manifest_extra_json) {
  fs::create_directories(dir);
  Json tasks = Json::array();
  for (const auto& t : stream.tasks) {
    const std::string train = "task" + std::to_string(t.id) + "_train.feat";
    const std::string eval = "task" + std::to_string(t.id) + "_eval.feat";
    bin::write_file((fs::path(dir) / train).string(), encode_feature_file(t.train));
    bin::write_file((fs::path(dir) / eval).string(), encode_feature_file(t.eval));
    tasks.push_back(Json{{"id", t.id},
                         {"name", t.name},
                         {"train_file", train},
                         {"eval_file", eval},
                         {"train_count", t.train.size()},
                         {"eval_count", t.eval.size()}});
  }
  Json manifest{{"format", "cade-stream"}, {"version", 1}, {"fingerprint", stream.fingerprint}, {"tasks", tasks}};
  Json extra = Json::parse(manifest_extra_json);
  for (auto it = extra.begin(); it != extra.end(); ++it) manifest[it.key()] = it.value();
  bin::write_file((fs::path(dir) / "manifest.json").string(), manifest.dump(2) + "\n");
}

TaskStream load_stream(const std::string& dir) {
  const auto manifest_path = (fs::path(dir) / "manifest.json").string();
  Json m;
  try {
    m = Json::parse(bin::read_file(manifest_path));
  } catch (const Json::exception& e) {
    throw Error(manifest_path + ": " + e.what());
  }
  if (m.value("format", "") != "cade-stream") throw Error(manifest_path + ": not a cade-stream manifest");
  if (m.value("version", 0) != 1) throw Error(manifest_path + ": unsupported manifest version");
  TaskStream s;
  s.fingerprint = m.at("fingerprint").get<std::string>();
  for (const auto& t : m.at("tasks")) {
    Task task;
    task.id = t.at("id").get<std::size_t>();
    task.name = t.at("name").get<std::string>();
    const auto train = (fs::path(dir) / t.at("train_file").get<std::string>()).string();
    const auto eval = (fs::path(dir) / t.at("eval_file").get<std::string>()).string();
    task.train = decode_feature_file(bin::read_file(train), train);
    task.eval = decode_feature_file(bin::read_file(eval), eval);
    s.tasks.push_back(std::move(task));
  }
  s.validate();
  return s;
}

FeatureMap fit_frames(const FeatureMap& m, std::size_t frames) {
  if (m.frames == 0) throw Error("fit_frames: empty feature map");
  FeatureMap out = m;
  out.frames = frames;
  out.values.resize(frames * m.coeffs);
  for (std::size_t t = 0; t < frames; ++t)
    for (std::size_t k = 0; k < m.coeffs; ++k) out.values[t * m.coeffs + k] = m.at(t % m.frames, k);
  return out;
}

TaskStream ingest_protocol_stream(const ProtocolStreamSpec& spec, const LfccConfig& lfcc) {
  lfcc.validate();
  if (spec.task_attacks.empty()) throw Error("ingest: at least one task is required");
  if (!(spec.eval_fraction > 0 && spec.eval_fraction < 1)) throw Error("ingest: eval_fraction must be in (0, 1)");
  const std::string protocol_text = bin::read_file(spec.protocol_path);
  const auto records = parse_protocol(protocol_text);

  const std::size_t n_tasks = spec.task_attacks.size();
  std::vector<std::vector<FeatureMap>> pools(n_tasks);
  std::size_t bona_counter = 0;
  for (const auto& r : records) {
    std::size_t task = n_tasks;
    if (r.bona_fide) {
      task = bona_counter++ % n_tasks;
    } else {
      for (std::size_t t = 0; t < n_tasks && task == n_tasks; ++t)
        if (std::find(spec.task_attacks[t].begin(), spec.task_attacks[t].end(), r.attack_id) !=
            spec.task_attacks[t].end())
          task = t;
    }
    if (task == n_tasks) continue;
    const auto path = (fs::path(spec.wav_dir) / (r.utt_id + ".wav")).string();
    auto m = fit_frames(cade::lfcc(read_wav_pcm16(std::string_view(bin::read_file(path))), lfcc), spec.frames);
    m.label = r.bona_fide ? kBonaFide : kSpoof;
    m.task_id = task;
    pools[task].push_back(std::move(m));
  }

  TaskStream s;
  Json fp{{"protocol", fnv1a_hex(protocol_text)}, {"tasks", spec.task_attacks}, {"frames", spec.frames},
          {"eval_fraction", spec.eval_fraction}, {"seed", spec.seed}, {"lfcc", to_json(lfcc)}};
  s.fingerprint = fnv1a_hex(fp.dump());
  Rng rng(spec.seed);
  for (std::size_t t = 0; t < n_tasks; ++t) {
    auto& pool = pools[t];
    for (std::size_t i = pool.size(); i > 1; --i) std::swap(pool[i - 1], pool[rng.below(i)]);
    const auto n_eval = static_cast<std::size_t>(std::round(spec.eval_fraction * static_cast<double>(pool.size())));
    Task task;
    task.id = t;
    for (const auto& a : spec.task_attacks[t]) task.name += (task.name.empty() ? "" : "+") + a;
    task.eval.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(n_eval));
    task.train.assign(pool.begin() + static_cast<std::ptrdiff_t>(n_eval), pool.end());
    s.tasks.push_back(std::move(task));
  }
  s.validate();
  return s;
}

}  // namespace cade
