#pragma once

// LFCC front-end and audio/protocol ingestion.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cade/tensor.hpp"

namespace cade {

struct Waveform {
  std::vector<double> samples;
  std::uint32_t sample_rate = 16000;
};

struct LfccConfig {
  std::size_t frame_len = 512;
  std::size_t hop = 256;
  std::size_t fft_size = 512;
  std::size_t n_filters = 20;
  std::size_t n_coeffs = 20;
  double log_floor = 1e-10;

  void validate() const;
  bool operator==(const LfccConfig&) const = default;
};

/// Label convention: bona fide is class 1, spoof is class 0.
enum Label : int { kSpoof = 0, kBonaFide = 1 };

/// frames x coeffs matrix, row-major.
struct FeatureMap {
  std::size_t frames = 0;
  std::size_t coeffs = 0;
  std::vector<double> values;
  int label = kBonaFide;
  std::size_t task_id = 0;

  double at(std::size_t frame, std::size_t coeff) const { return values[frame * coeffs + coeff]; }
  bool operator==(const FeatureMap&) const = default;
};

/// Hamming window of length n (symmetric).
std::vector<double> hamming_window(std::size_t n);

/// Magnitude-squared spectrum (fft_size/2 + 1 bins) of the Hamming-windowed,
/// zero-padded frame. fft_size must be a power of two.
Tensor power_spectrum(std::span<const double> frame, std::size_t fft_size);

/// Triangular filters with unit peak and edges equally spaced over
/// 0..Nyquist. Shape [n_filters, fft_size/2 + 1].
Tensor linear_filterbank(std::size_t n_filters, std::size_t fft_size);

/// Orthonormal DCT-II matrix, shape [n, n]; row k is basis vector k.
Tensor dct2_matrix(std::size_t n);

/// Number of whole frames in a signal of the given length.
std::size_t frame_count(std::size_t samples, const LfccConfig& cfg);

FeatureMap lfcc(const Waveform& w, const LfccConfig& cfg);

/// Decodes a RIFF/WAVE PCM16 mono file.
Waveform read_wav_pcm16(std::span<const std::uint8_t> bytes);
Waveform read_wav_pcm16(std::string_view bytes);
/// Samples are clamped to [-1, 1) and quantized to 16 bits.
std::string write_wav_pcm16(const Waveform& w);

struct ProtocolRecord {
  std::string speaker_id;
  std::string utt_id;
  std::string attack_id;
  bool bona_fide = false;
};

/// Parses an ASVspoof-style protocol: "speaker utterance - attack key" per line.
std::vector<ProtocolRecord> parse_protocol(std::string_view text);

}  // namespace cade
