#pragma once

// Synthetic bona fide / spoof task streams.
//
// Bona fide audio comes from one fixed base process: a harmonic tone complex
// under a slow amplitude envelope plus white noise. A spoof utterance renders
// the same process and then applies one of its task's distortion families.
// Every utterance draws from its own generator derived from
// (seed, task, split, index), so a stream is a pure function of its inputs.

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "cade/features.hpp"
#include "cade/random.hpp"

namespace cade {

/// Distortion applied to the base process. Zero amplitudes disable a part.
struct SpoofFamily {
  std::string name;
  double tone_hz = 0.0;       // additive tone
  double tone_amp = 0.0;
  double band_lo_hz = 0.0;    // additive band-limited noise
  double band_hi_hz = 0.0;
  double band_level = 0.0;    // RMS of the band noise
  double am_rate_hz = 0.0;    // extra amplitude modulation of the harmonic part
  double am_depth = 0.0;      // 0..1
  double mix_gain = 1.0;      // gain on the base noise component

  bool operator==(const SpoofFamily&) const = default;
};

struct BaseProcess {
  double f0_lo_hz = 100.0;
  double f0_hi_hz = 200.0;
  double max_harmonic_hz = 4000.0;
  double harmonic_rms = 0.1;
  double noise_lo = 0.004;  // white-noise standard deviation range
  double noise_hi = 0.02;
  double envelope_rate_lo_hz = 2.0;
  double envelope_rate_hi_hz = 5.0;
  double envelope_depth = 0.3;

  bool operator==(const BaseProcess&) const = default;
};

struct TaskSpec {
  std::string name;
  std::vector<std::string> families;

  bool operator==(const TaskSpec&) const = default;
};

struct SpoofFamilyConfig {
  BaseProcess base;
  std::vector<SpoofFamily> families;
  std::vector<TaskSpec> tasks;
  std::uint32_t sample_rate = 16000;
  std::size_t frames = 32;  // LFCC frames per utterance

  /// Three tasks of two families each.
  static SpoofFamilyConfig defaults();
  void validate() const;
  const SpoofFamily& family(const std::string& name) const;
  bool operator==(const SpoofFamilyConfig&) const = default;
};

struct StreamSizes {
  std::size_t train_per_task = 600;
  std::size_t eval_per_task = 200;

  bool operator==(const StreamSizes&) const = default;
};

struct Task {
  std::size_t id = 0;
  std::string name;
  std::vector<FeatureMap> train;
  std::vector<FeatureMap> eval;
};

struct TaskStream {
  std::vector<Task> tasks;
  std::string fingerprint;

  void validate() const;
};

/// Samples needed for `frames` LFCC frames.
std::size_t utterance_length(std::size_t frames, const LfccConfig& lfcc);

/// One utterance; spoofs pick one of `families` uniformly.
Waveform synth_utterance(const SpoofFamilyConfig& cfg, const std::vector<const SpoofFamily*>& families,
                         bool bona_fide, std::size_t samples, Rng& rng);

/// Fingerprint of (generator config, sizes, lfcc config, seed).
std::string stream_fingerprint(const SpoofFamilyConfig& cfg, const StreamSizes& sizes,
                               const LfccConfig& lfcc, std::uint64_t seed);

TaskStream synth_task_stream(const SpoofFamilyConfig& cfg, const StreamSizes& sizes,
                             const LfccConfig& lfcc, std::uint64_t seed);

// Feature-file persistence. A stream directory holds manifest.json plus one
// binary file per (task, split):
//   header  "CADEFEAT" | u32 version (1) | u32 reserved (0) | u64 record count
//   record  u32 frames | u32 coeffs | u32 label | u32 task id | frames*coeffs f64
// All integers and floats little-endian; values row-major (frame, coeff).
std::string encode_feature_file(const std::vector<FeatureMap>& maps);
std::vector<FeatureMap> decode_feature_file(const std::string& bytes, const std::string& context);

/// Writes the stream; `manifest_extra` is merged into manifest.json.
void save_stream(const TaskStream& stream, const std::string& dir,
                 const std::string& manifest_extra_json = "{}");
TaskStream load_stream(const std::string& dir);

/// Builds a stream from ASVspoof-style data: each task lists attack ids;
/// bona fide utterances are dealt round-robin across tasks. Features are
/// cropped or tiled to `frames` frames.
struct ProtocolStreamSpec {
  std::string protocol_path;
  std::string wav_dir;
  std::vector<std::vector<std::string>> task_attacks;
  std::size_t frames = 32;
  double eval_fraction = 0.3;
  std::uint64_t seed = 1;
};
TaskStream ingest_protocol_stream(const ProtocolStreamSpec& spec, const LfccConfig& lfcc);

/// Fixes the frame count by cropping from the start or tiling.
FeatureMap fit_frames(const FeatureMap& m, std::size_t frames);

}  // namespace cade
