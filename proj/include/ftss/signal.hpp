#pragma once

#include <cmath>
#include <complex>
#include <cstddef>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "ftss/errors.hpp"

namespace ftss {

inline constexpr std::size_t kEpochSeconds = 30;
inline constexpr std::size_t kFreqBins = 32;
inline constexpr double kLogFloor = 1e-12;

// One 30 s multi-channel epoch, samples in microvolts.
struct EpochSignal {
  std::size_t fs = 0;
  std::vector<std::vector<double>> channels;

  std::size_t n_channels() const { return channels.size(); }
  std::size_t samples_per_channel() const { return kEpochSeconds * fs; }

  void validate() const {
    if (fs < 64) {
      throw ConfigError("sampling rate " + std::to_string(fs) +
                        " Hz is below 64 Hz; 32 Hz must be below Nyquist");
    }
    for (std::size_t c = 0; c < channels.size(); ++c) {
      if (channels[c].size() != samples_per_channel()) {
        throw ShapeError("channel " + std::to_string(c) + " has " +
                         std::to_string(channels[c].size()) +
                         " samples, expected " +
                         std::to_string(samples_per_channel()));
      }
    }
  }
};

// Log-power grid, channels x 32 one-hertz bins x 30 one-second columns.
struct Spectrogram {
  std::size_t channels = 0;
  std::vector<double> values;

  Spectrogram() = default;
  explicit Spectrogram(std::size_t c, double fill = 0.0)
      : channels(c), values(c * kFreqBins * kEpochSeconds, fill) {}

  double& at(std::size_t c, std::size_t f, std::size_t t) {
    return values[(c * kFreqBins + f) * kEpochSeconds + t];
  }
  double at(std::size_t c, std::size_t f, std::size_t t) const {
    return values[(c * kFreqBins + f) * kEpochSeconds + t];
  }
};

// ---------------------------------------------------------------------------
// FFT

namespace detail {

inline std::size_t smallest_factor(std::size_t n) {
  if (n % 2 == 0) return 2;
  for (std::size_t p = 3; p * p <= n; p += 2)
    if (n % p == 0) return p;
  return n;
}

// Mixed-radix decimation in time. Prime lengths fall back to a direct DFT
// inside the combine step.
inline void fft_recurse(const std::complex<double>* in, std::size_t stride,
                        std::complex<double>* out, std::size_t n,
                        const std::vector<std::complex<double>>& twiddle,
                        std::size_t twiddle_step) {
  if (n == 1) {
    out[0] = in[0];
    return;
  }
  const std::size_t p = smallest_factor(n);
  const std::size_t m = n / p;
  for (std::size_t r = 0; r < p; ++r) {
    fft_recurse(in + r * stride, stride * p, out + r * m, m, twiddle,
                twiddle_step * p);
  }
  std::vector<std::complex<double>> tmp(out, out + n);
  for (std::size_t q = 0; q < p; ++q) {
    for (std::size_t k = 0; k < m; ++k) {
      const std::size_t idx = k + q * m;
      std::complex<double> acc = tmp[k];
      for (std::size_t r = 1; r < p; ++r) {
        acc += tmp[r * m + k] * twiddle[((r * idx) % n) * twiddle_step];
      }
      out[idx] = acc;
    }
  }
}

}  // namespace detail

// Forward (X[k] = sum x[j] e^{-2 pi i jk/n}) or unnormalized inverse DFT for
// any length.
inline std::vector<std::complex<double>> fft(std::span<const std::complex<double>> x,
                                             bool inverse = false) {
  const std::size_t n = x.size();
  std::vector<std::complex<double>> out(n);
  if (n == 0) return out;
  const double sign = inverse ? 1.0 : -1.0;
  std::vector<std::complex<double>> twiddle(n);
  for (std::size_t j = 0; j < n; ++j) {
    twiddle[j] = std::polar(1.0, sign * 2.0 * std::numbers::pi * static_cast<double>(j) /
                                     static_cast<double>(n));
  }
  detail::fft_recurse(x.data(), 1, out.data(), n, twiddle, 1);
  return out;
}

// |X[k]|^2 for k = 0..n/2. No window-energy normalization.
inline std::vector<double> fft_power(std::span<const double> window) {
  std::vector<std::complex<double>> x(window.begin(), window.end());
  const auto spectrum = fft(x);
  std::vector<double> power(window.size() / 2 + 1);
  for (std::size_t k = 0; k < power.size(); ++k) power[k] = std::norm(spectrum[k]);
  return power;
}

inline std::vector<double> hamming_window(std::size_t n) {
  if (n < 2) throw ConfigError("Hamming window needs n >= 2");
  std::vector<double> w(n);
  for (std::size_t k = 0; k < n; ++k) {
    w[k] = 0.54 - 0.46 * std::cos(2.0 * std::numbers::pi * static_cast<double>(k) /
                                  static_cast<double>(n - 1));
  }
  return w;
}

// ---------------------------------------------------------------------------
// Butterworth band-pass as second-order sections

struct Biquad {
  double b0 = 1, b1 = 0, b2 = 0;
  double a1 = 0, a2 = 0;
};

// Digital band-pass of total order `order` (prototype order/2) with
// pre-warped edges, via the bilinear transform.
inline std::vector<Biquad> design_butterworth_bandpass(double fs, double low,
                                                       double high,
                                                       int order = 8) {
  if (!(low > 0.0 && low < high)) {
    throw ConfigError("band-pass needs 0 < low < high");
  }
  if (!(high < fs / 2.0)) {
    throw ConfigError("band-pass upper edge " + std::to_string(high) +
                      " Hz must be below Nyquist (" + std::to_string(fs / 2.0) + " Hz)");
  }
  if (order < 2 || order % 2 != 0) {
    throw ConfigError("band-pass order must be a positive even number");
  }
  using cd = std::complex<double>;
  const int proto = order / 2;
  const double fs2 = 2.0 * fs;
  const double w1 = fs2 * std::tan(std::numbers::pi * low / fs);
  const double w2 = fs2 * std::tan(std::numbers::pi * high / fs);
  const double bw = w2 - w1;
  const double w0sq = w1 * w2;

  std::vector<cd> analog;
  for (int k = 0; k < proto; ++k) {
    const double theta = std::numbers::pi * (2.0 * k + proto + 1) / (2.0 * proto);
    const cd p = std::polar(1.0, theta) * (bw / 2.0);
    const cd root = std::sqrt(p * p - w0sq);
    analog.push_back(p + root);
    analog.push_back(p - root);
  }

  // Gain: bw^N from the prototype transform, then the bilinear map with N
  // zeros at s = 0.
  cd gain = std::pow(bw, proto) * std::pow(fs2, proto);
  std::vector<cd> poles;
  for (const cd& p : analog) {
    gain /= (fs2 - p);
    poles.push_back((fs2 + p) / (fs2 - p));
  }

  std::vector<Biquad> sections;
  for (const cd& z : poles) {
    if (z.imag() <= 0.0) continue;
    Biquad s;
    s.b0 = 1.0;
    s.b1 = 0.0;
    s.b2 = -1.0;  // zeros at z = +1 and z = -1
    s.a1 = -2.0 * z.real();
    s.a2 = std::norm(z);
    sections.push_back(s);
  }
  if (sections.size() != static_cast<std::size_t>(proto)) {
    throw ConfigError("band-pass design produced real poles; edges too close");
  }
  const double g = gain.real();
  sections.front().b0 *= g;
  sections.front().b1 *= g;
  sections.front().b2 *= g;
  return sections;
}

// Single causal pass, transposed direct form II, zero initial state.
inline std::vector<double> sos_filter(const std::vector<Biquad>& sections,
                                      std::span<const double> x) {
  std::vector<double> y(x.begin(), x.end());
  for (const Biquad& s : sections) {
    double z1 = 0, z2 = 0;
    for (double& v : y) {
      const double in = v;
      const double out = s.b0 * in + z1;
      z1 = s.b1 * in - s.a1 * out + z2;
      z2 = s.b2 * in - s.a2 * out;
      v = out;
    }
  }
  return y;
}

struct BandpassConfig {
  double low = 0.2;
  double high = 32.0;
  int order = 8;
};

inline EpochSignal butterworth_bandpass(const EpochSignal& sig,
                                        const BandpassConfig& cfg = {}) {
  const auto sections = design_butterworth_bandpass(
      static_cast<double>(sig.fs), cfg.low, cfg.high, cfg.order);
  EpochSignal out{sig.fs, {}};
  for (const auto& ch : sig.channels) out.channels.push_back(sos_filter(sections, ch));
  return out;
}

// ---------------------------------------------------------------------------

// Per channel and second: Hamming window, power spectrum, power summed into
// bins [f, f+1) for f < 32, natural log with a 1e-12 floor.
inline Spectrogram spectrogram(const EpochSignal& sig) {
  sig.validate();
  const std::size_t n = sig.fs;
  const auto window = hamming_window(n);
  const double df = 1.0;  // window spans exactly one second
  Spectrogram spec(sig.n_channels());
  std::vector<double> segment(n);
  for (std::size_t c = 0; c < sig.n_channels(); ++c) {
    for (std::size_t t = 0; t < kEpochSeconds; ++t) {
      for (std::size_t j = 0; j < n; ++j) segment[j] = sig.channels[c][t * n + j] * window[j];
      const auto power = fft_power(segment);
      std::vector<double> bins(kFreqBins, 0.0);
      for (std::size_t k = 0; k < power.size(); ++k) {
        const auto f = static_cast<std::size_t>(std::floor(static_cast<double>(k) * df));
        if (f < kFreqBins) bins[f] += power[k];
      }
      for (std::size_t f = 0; f < kFreqBins; ++f) spec.at(c, f, t) = std::log(bins[f] + kLogFloor);
    }
  }
  return spec;
}

}  // namespace ftss
