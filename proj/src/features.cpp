#include "cade/features.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <numbers>
#include <sstream>

namespace cade {

namespace {

bool is_power_of_two(std::size_t n) { return n && (n & (n - 1)) == 0; }

// Radix-2 FFT with precomputed twiddles and Hamming window.
struct SpectrumPlan {
  std::size_t fft_size;
  std::vector<std::complex<double>> twiddle;  // exp(-2*pi*i*k/fft_size), k < fft_size/2
  std::vector<double> window;

  SpectrumPlan(std::size_t frame_len, std::size_t n) : fft_size(n), twiddle(n / 2), window(hamming_window(frame_len)) {
    for (std::size_t k = 0; k < n / 2; ++k) {
      const double ang = -2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(n);
      twiddle[k] = {std::cos(ang), std::sin(ang)};
    }
  }

  void fft(std::vector<std::complex<double>>& a) const {
    const std::size_t n = a.size();
    for (std::size_t i = 1, j = 0; i < n; ++i) {
      std::size_t bit = n >> 1;
      for (; j & bit; bit >>= 1) j ^= bit;
      j ^= bit;
      if (i < j) std::swap(a[i], a[j]);
    }
    for (std::size_t len = 2; len <= n; len <<= 1) {
      const std::size_t stride = n / len;
      for (std::size_t k = 0; k < len / 2; ++k) {
        const auto w = twiddle[k * stride];
        for (std::size_t i = 0; i < n; i += len) {
          auto u = a[i + k];
          const auto x = a[i + k + len / 2];
          const std::complex<double> v(x.real() * w.real() - x.imag() * w.imag(),
                                       x.real() * w.imag() + x.imag() * w.real());
          a[i + k] = u + v;
          a[i + k + len / 2] = u - v;
        }
      }
    }
  }

  void power(std::span<const double> frame, double* out) const {
    std::vector<std::complex<double>> buf(fft_size);
    for (std::size_t i = 0; i < frame.size(); ++i) buf[i] = frame[i] * window[i];
    fft(buf);
    for (std::size_t k = 0; k <= fft_size / 2; ++k)
      out[k] = buf[k].real() * buf[k].real() + buf[k].imag() * buf[k].imag();
  }
};

}  // namespace

void LfccConfig::validate() const {
  auto bad = [](const std::string& what) { throw Error("lfcc config: " + what); };
  if (frame_len == 0) bad("frame_len must be positive");
  if (hop == 0 || hop > frame_len) bad("hop must be in 1..frame_len");
  if (!is_power_of_two(fft_size) || fft_size < frame_len)
    bad("fft_size must be a power of two >= frame_len");
  if (n_filters == 0) bad("n_filters must be positive");
  if (n_coeffs == 0 || n_coeffs > n_filters) bad("n_coeffs must be in 1..n_filters");
  if (!(log_floor > 0) || !std::isfinite(log_floor)) bad("log_floor must be a small positive number");
}

std::vector<double> hamming_window(std::size_t n) {
  std::vector<double> w(n, 1.0);
  if (n == 1) return w;
  for (std::size_t i = 0; i < n; ++i)
    w[i] = 0.54 - 0.46 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) /
                                  static_cast<double>(n - 1));
  return w;
}

Tensor power_spectrum(std::span<const double> frame, std::size_t fft_size) {
  if (frame.empty()) throw Error("power_spectrum: empty frame");
  if (!is_power_of_two(fft_size)) throw Error("power_spectrum: fft_size must be a power of two");
  if (frame.size() > fft_size) throw Error("power_spectrum: frame longer than fft_size");
  Tensor out({fft_size / 2 + 1});
  SpectrumPlan(frame.size(), fft_size).power(frame, out.data());
  return out;
}

Tensor linear_filterbank(std::size_t n_filters, std::size_t fft_size) {
  const std::size_t bins = fft_size / 2 + 1;
  // Edges in units of FFT bins, equally spaced over 0..Nyquist.
  std::vector<double> edge(n_filters + 2);
  for (std::size_t i = 0; i < edge.size(); ++i)
    edge[i] = static_cast<double>(i) * static_cast<double>(bins - 1) /
              static_cast<double>(n_filters + 1);
  Tensor fb({n_filters, bins});
  for (std::size_t f = 0; f < n_filters; ++f) {
    const double lo = edge[f], mid = edge[f + 1], hi = edge[f + 2];
    for (std::size_t b = 0; b < bins; ++b) {
      const double x = static_cast<double>(b);
      double w = 0.0;
      if (x > lo && x <= mid) w = (x - lo) / (mid - lo);
      else if (x > mid && x < hi) w = (hi - x) / (hi - mid);
      fb[f * bins + b] = w;
    }
  }
  return fb;
}

Tensor dct2_matrix(std::size_t n) {
  Tensor m({n, n});
  const double s0 = std::sqrt(1.0 / static_cast<double>(n));
  const double s = std::sqrt(2.0 / static_cast<double>(n));
  for (std::size_t k = 0; k < n; ++k)
    for (std::size_t i = 0; i < n; ++i)
      m[k * n + i] = (k == 0 ? s0 : s) *
                     std::cos(std::numbers::pi * static_cast<double>(k) *
                              (2.0 * static_cast<double>(i) + 1.0) / (2.0 * static_cast<double>(n)));
  return m;
}

std::size_t frame_count(std::size_t samples, const LfccConfig& cfg) {
  if (samples < cfg.frame_len) return 0;
  return 1 + (samples - cfg.frame_len) / cfg.hop;
}

FeatureMap lfcc(const Waveform& w, const LfccConfig& cfg) {
  cfg.validate();
  if (w.samples.empty()) throw Error("lfcc: empty waveform");
  const std::size_t frames = frame_count(w.samples.size(), cfg);
  if (frames == 0)
    throw Error("lfcc: waveform of " + std::to_string(w.samples.size()) +
                " samples is shorter than one frame (" + std::to_string(cfg.frame_len) + ")");
  const Tensor fb = linear_filterbank(cfg.n_filters, cfg.fft_size);
  const Tensor dct = dct2_matrix(cfg.n_filters);
  const std::size_t bins = cfg.fft_size / 2 + 1;

  FeatureMap out;
  out.frames = frames;
  out.coeffs = cfg.n_coeffs;
  out.values.resize(frames * cfg.n_coeffs);
  const SpectrumPlan plan(cfg.frame_len, cfg.fft_size);
  std::vector<double> spec(bins);
  std::vector<double> logE(cfg.n_filters);
  for (std::size_t t = 0; t < frames; ++t) {
    auto frame = std::span<const double>(w.samples).subspan(t * cfg.hop, cfg.frame_len);
    plan.power(frame, spec.data());
    for (std::size_t f = 0; f < cfg.n_filters; ++f) {
      double e = 0.0;
      for (std::size_t b = 0; b < bins; ++b) e += fb[f * bins + b] * spec[b];
      logE[f] = std::log(std::max(e, cfg.log_floor));
    }
    for (std::size_t k = 0; k < cfg.n_coeffs; ++k) {
      double c = 0.0;
      for (std::size_t f = 0; f < cfg.n_filters; ++f) c += dct[k * cfg.n_filters + f] * logE[f];
      out.values[t * cfg.n_coeffs + k] = c;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// WAV

Waveform read_wav_pcm16(std::string_view bytes) {
  auto u16 = [&](std::size_t at) {
    return static_cast<std::uint32_t>(static_cast<std::uint8_t>(bytes[at])) |
           (static_cast<std::uint32_t>(static_cast<std::uint8_t>(bytes[at + 1])) << 8);
  };
  auto u32 = [&](std::size_t at) { return u16(at) | (u16(at + 2) << 16); };
  if (bytes.size() < 12 || bytes.substr(0, 4) != "RIFF")
    throw Error("wav: missing RIFF header");
  if (bytes.substr(8, 4) != "WAVE") throw Error("wav: RIFF form type is not WAVE");

  bool have_fmt = false;
  Waveform w;
  std::size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const auto id = bytes.substr(pos, 4);
    const std::size_t len = u32(pos + 4);
    const std::size_t body = pos + 8;
    if (id == "fmt ") {
      if (len < 16 || body + 16 > bytes.size()) throw Error("wav: fmt chunk too short");
      const auto format = u16(body);
      const auto channels = u16(body + 2);
      const auto rate = u32(body + 4);
      const auto bits = u16(body + 14);
      if (format != 1) throw Error("wav: unsupported format code " + std::to_string(format) + " (need PCM 1)");
      if (channels != 1) throw Error("wav: unsupported channels " + std::to_string(channels) + " (need mono)");
      if (bits != 16) throw Error("wav: unsupported bits per sample " + std::to_string(bits) + " (need 16)");
      if (rate == 0) throw Error("wav: sample rate is zero");
      w.sample_rate = rate;
      have_fmt = true;
    } else if (id == "data") {
      if (!have_fmt) throw Error("wav: data chunk before fmt chunk");
      if (body + len > bytes.size())
        throw Error("wav: data chunk length " + std::to_string(len) + " exceeds file (" +
                    std::to_string(bytes.size() - body) + " bytes remain)");
      if (len % 2 != 0) throw Error("wav: data chunk length is odd for 16-bit samples");
      w.samples.resize(len / 2);
      for (std::size_t i = 0; i < w.samples.size(); ++i) {
        auto v = static_cast<std::int16_t>(u16(body + 2 * i));
        w.samples[i] = static_cast<double>(v) / 32768.0;
      }
      if (w.samples.empty()) throw Error("wav: data chunk is empty");
      return w;
    }
    pos = body + len + (len & 1);
  }
  throw Error(have_fmt ? "wav: no data chunk" : "wav: no fmt chunk");
}

Waveform read_wav_pcm16(std::span<const std::uint8_t> bytes) {
  return read_wav_pcm16(
      std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

std::string write_wav_pcm16(const Waveform& w) {
  std::string out;
  auto put16 = [&](std::uint32_t v) {
    out.push_back(static_cast<char>(v & 0xFF));
    out.push_back(static_cast<char>((v >> 8) & 0xFF));
  };
  auto put32 = [&](std::uint32_t v) {
    put16(v & 0xFFFF);
    put16(v >> 16);
  };
  const auto data_len = static_cast<std::uint32_t>(w.samples.size() * 2);
  out += "RIFF";
  put32(36 + data_len);
  out += "WAVEfmt ";
  put32(16);
  put16(1);
  put16(1);
  put32(w.sample_rate);
  put32(w.sample_rate * 2);
  put16(2);
  put16(16);
  out += "data";
  put32(data_len);
  for (double s : w.samples) {
    double q = std::round(std::clamp(s, -1.0, 1.0) * 32768.0);
    q = std::clamp(q, -32768.0, 32767.0);
    put16(static_cast<std::uint16_t>(static_cast<std::int16_t>(q)));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Protocol

std::vector<ProtocolRecord> parse_protocol(std::string_view text) {
  std::vector<ProtocolRecord> out;
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start <= text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    ++line_no;
    std::string line(text.substr(start, end - start));
    start = end + 1;
    std::istringstream ss(line);
    std::vector<std::string> fields;
    for (std::string f; ss >> f;) fields.push_back(f);
    if (fields.empty()) {
      if (end == text.size()) break;
      continue;
    }
    if (fields.size() != 5)
      throw Error("protocol line " + std::to_string(line_no) + ": expected 5 fields, got " +
                  std::to_string(fields.size()));
    ProtocolRecord r{fields[0], fields[1], fields[3], false};
    if (fields[4] == "bonafide") r.bona_fide = true;
    else if (fields[4] != "spoof")
      throw Error("protocol line " + std::to_string(line_no) + ": unknown key '" + fields[4] + "'");
    out.push_back(std::move(r));
    if (end == text.size()) break;
  }
  return out;
}

}  // namespace cade
