#pragma once

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <complex>
#include <cstdio>
#include <map>
#include <numbers>
#include <string>
#include <string_view>
#include <vector>

#include "ftss/binary.hpp"
#include "ftss/errors.hpp"
#include "ftss/kv.hpp"
#include "ftss/metrics.hpp"
#include "ftss/parallel.hpp"
#include "ftss/patching.hpp"
#include "ftss/rng.hpp"
#include "ftss/signal.hpp"
#include "ftss/training.hpp"

namespace ftss {

struct LabeledEpoch {
  std::size_t subject = 0;
  std::size_t epoch = 0;  // index within the subject
  std::size_t stage = 0;
  EpochSignal signal;
};

// Amplitudes in microvolts (peak for rhythms, RMS for the background).
struct SynthConfig {
  std::size_t fs = 125;
  std::size_t channels = 2;
  double noise = 4.0;
  double wake_alpha = 24.0;
  double wake_beta = 5.0;
  double n1_theta = 9.0;
  double n2_spindle = 22.0;
  double n2_kcomplex = 80.0;
  double n2_theta = 6.0;
  double n3_delta = 60.0;
  double rem_sawtooth = 22.0;
  double rem_mixed = 5.0;
  std::size_t epochs_per_subject = 20;
  std::uint64_t seed = 0;

  void validate() const {
    if (fs < 64) throw ConfigError("synth fs must be >= 64, got " + std::to_string(fs));
    if (channels == 0) throw ConfigError("synth channels must be >= 1");
    if (epochs_per_subject == 0) throw ConfigError("epochs_per_subject must be >= 1");
    for (double a : {noise, wake_alpha, wake_beta, n1_theta, n2_spindle, n2_kcomplex, n2_theta, n3_delta,
                     rem_sawtooth, rem_mixed}) {
      if (!(a > 0) || !std::isfinite(a)) throw ConfigError("synth amplitudes must be positive");
    }
  }
};

inline KeyValues config_items(const SynthConfig& c) {
  return {{"synth.fs", std::to_string(c.fs)},
          {"synth.channels", std::to_string(c.channels)},
          {"synth.noise", format_double(c.noise)},
          {"synth.wake_alpha", format_double(c.wake_alpha)},
          {"synth.wake_beta", format_double(c.wake_beta)},
          {"synth.n1_theta", format_double(c.n1_theta)},
          {"synth.n2_spindle", format_double(c.n2_spindle)},
          {"synth.n2_kcomplex", format_double(c.n2_kcomplex)},
          {"synth.n2_theta", format_double(c.n2_theta)},
          {"synth.n3_delta", format_double(c.n3_delta)},
          {"synth.rem_sawtooth", format_double(c.rem_sawtooth)},
          {"synth.rem_mixed", format_double(c.rem_mixed)},
          {"synth.epochs_per_subject", std::to_string(c.epochs_per_subject)}};
}

inline bool set_config_key(SynthConfig& c, std::string_view key, std::string_view value) {
  if (key == "synth.fs") c.fs = parse_size(key, value);
  else if (key == "synth.channels") c.channels = parse_size(key, value);
  else if (key == "synth.noise") c.noise = parse_double(key, value);
  else if (key == "synth.wake_alpha") c.wake_alpha = parse_double(key, value);
  else if (key == "synth.wake_beta") c.wake_beta = parse_double(key, value);
  else if (key == "synth.n1_theta") c.n1_theta = parse_double(key, value);
  else if (key == "synth.n2_spindle") c.n2_spindle = parse_double(key, value);
  else if (key == "synth.n2_kcomplex") c.n2_kcomplex = parse_double(key, value);
  else if (key == "synth.n2_theta") c.n2_theta = parse_double(key, value);
  else if (key == "synth.n3_delta") c.n3_delta = parse_double(key, value);
  else if (key == "synth.rem_sawtooth") c.rem_sawtooth = parse_double(key, value);
  else if (key == "synth.rem_mixed") c.rem_mixed = parse_double(key, value);
  else if (key == "synth.epochs_per_subject") c.epochs_per_subject = parse_size(key, value);
  else return false;
  return true;
}

// ---- generator --------------------------------------------------------------

// Gaussian white noise shaped to a 1/f power spectrum, DC removed, scaled to
// the requested RMS.
inline std::vector<double> pink_noise(std::size_t n, double rms, Rng& rng) {
  std::normal_distribution<double> d;
  std::vector<std::complex<double>> x(n);
  for (auto& v : x) v = d(rng);
  auto spec = fft(x);
  spec[0] = 0;
  for (std::size_t k = 1; k < n; ++k) {
    const std::size_t f = std::min(k, n - k);
    spec[k] /= std::sqrt(double(f));
  }
  const auto back = fft(spec, true);
  std::vector<double> out(n);
  double ss = 0;
  for (std::size_t i = 0; i < n; ++i) ss += (out[i] = back[i].real()) * out[i];
  const double scale = ss > 0 ? rms / std::sqrt(ss / double(n)) : 0.0;
  for (auto& v : out) v *= scale;
  return out;
}

namespace detail {

inline double uniform(Rng& rng, double lo, double hi) { return lo + (hi - lo) * uniform01(rng); }

inline void add_sine(std::vector<double>& x, double fs, double freq, double amp, double phase) {
  for (std::size_t i = 0; i < x.size(); ++i) x[i] += amp * std::sin(2 * std::numbers::pi * freq * double(i) / fs + phase);
}

// Gaussian-windowed sinusoid centred at t0 (s), duration ~ 2.5 sigma each side.
inline void add_burst(std::vector<double>& x, double fs, double freq, double amp, double t0, double dur) {
  const double sigma = dur / 5.0;
  const auto lo = static_cast<std::size_t>(std::max(0.0, (t0 - dur) * fs));
  const auto hi = std::min(x.size(), static_cast<std::size_t>((t0 + dur) * fs));
  for (std::size_t i = lo; i < hi; ++i) {
    const double t = double(i) / fs - t0;
    x[i] += amp * std::exp(-0.5 * t * t / (sigma * sigma)) * std::sin(2 * std::numbers::pi * freq * t);
  }
}

// Stage-specific component shared by all channels.
inline std::vector<double> stage_signature(std::size_t stage, const SynthConfig& c, Rng& rng) {
  const double fs = double(c.fs);
  const std::size_t n = c.fs * kEpochSeconds;
  std::vector<double> x(n, 0.0);
  const double two_pi = 2 * std::numbers::pi;
  switch (stage) {
    case 0:  // alpha-dominant wake with some beta
      add_sine(x, fs, uniform(rng, 9.5, 10.5), c.wake_alpha, uniform(rng, 0, two_pi));
      add_sine(x, fs, uniform(rng, 19.0, 21.0), c.wake_beta, uniform(rng, 0, two_pi));
      break;
    case 1:  // mixed low-amplitude theta
      for (int k = 0; k < 3; ++k) add_sine(x, fs, uniform(rng, 4.2, 7.8), c.n1_theta, uniform(rng, 0, two_pi));
      break;
    case 2: {  // theta background, spindles, one K-complex
      add_sine(x, fs, uniform(rng, 4.5, 7.5), c.n2_theta, uniform(rng, 0, two_pi));
      const std::size_t spindles = 1 + uniform_index(rng, 3);
      for (std::size_t s = 0; s < spindles; ++s) {
        add_burst(x, fs, 13.0, c.n2_spindle, uniform(rng, 2.0, 28.0), uniform(rng, 0.5, 1.5));
      }
      const double t0 = double(1 + uniform_index(rng, kEpochSeconds - 2));
      const auto lo = static_cast<std::size_t>(t0 * fs), len = c.fs;
      for (std::size_t i = 0; i < len && lo + i < n; ++i) {
        const double u = double(i) / double(len);
        x[lo + i] -= c.n2_kcomplex * std::sin(two_pi * u) * std::sin(std::numbers::pi * u);
      }
      break;
    }
    case 3:  // high-amplitude slow delta
      add_sine(x, fs, uniform(rng, 1.5, 2.5), c.n3_delta, uniform(rng, 0, two_pi));
      add_sine(x, fs, uniform(rng, 0.8, 1.2), 0.5 * c.n3_delta, uniform(rng, 0, two_pi));
      break;
    case 4: {  // sawtooth trains over mixed low amplitude
      add_sine(x, fs, uniform(rng, 4.5, 7.5), c.rem_mixed, uniform(rng, 0, two_pi));
      add_sine(x, fs, uniform(rng, 8.5, 11.5), 0.6 * c.rem_mixed, uniform(rng, 0, two_pi));
      const std::size_t trains = 3 + uniform_index(rng, 3);
      for (std::size_t t = 0; t < trains; ++t) {
        const double start = uniform(rng, 0.5, 26.0), dur = uniform(rng, 1.5, 3.0), f = uniform(rng, 2.7, 3.3);
        const auto lo = static_cast<std::size_t>(start * fs);
        const auto hi = std::min(n, static_cast<std::size_t>((start + dur) * fs));
        for (std::size_t i = lo; i < hi; ++i) {
          const double ph = std::fmod(f * double(i - lo) / fs, 1.0);
          x[i] += c.rem_sawtooth * (2.0 * ph - 1.0);
        }
      }
      break;
    }
    default:
      throw ContractError("stage code " + std::to_string(stage) + " out of range");
  }
  return x;
}

}  // namespace detail

// Pink background per channel (independent) plus the shared stage signature.
inline EpochSignal synth_signal(std::size_t stage, const SynthConfig& cfg, Rng& rng) {
  cfg.validate();
  const auto sig = detail::stage_signature(stage, cfg, rng);
  EpochSignal out{cfg.fs, {}};
  for (std::size_t c = 0; c < cfg.channels; ++c) {
    auto ch = pink_noise(sig.size(), cfg.noise, rng);
    const double gain = c == 0 ? 1.0 : 0.85;
    for (std::size_t i = 0; i < ch.size(); ++i) ch[i] += gain * sig[i];
    out.channels.push_back(std::move(ch));
  }
  return out;
}

inline LabeledEpoch synth_epoch(std::size_t stage, const SynthConfig& cfg, Rng& rng) {
  return {0, 0, stage, synth_signal(stage, cfg, rng)};
}

// Imbalanced preset stage proportions (W, N1, N2, N3, REM).
inline constexpr std::array<double, kStages> kImbalancedShare = {0.288, 0.037, 0.409, 0.126, 0.140};

using StageCounts = std::array<std::size_t, kStages>;

inline StageCounts balanced_counts(std::size_t per_class) {
  StageCounts c;
  c.fill(per_class);
  return c;
}

// Largest-remainder rounding so the counts sum to `total`.
inline StageCounts imbalanced_counts(std::size_t total) {
  StageCounts c{};
  std::array<double, kStages> rem{};
  std::size_t used = 0;
  for (std::size_t s = 0; s < kStages; ++s) {
    const double exact = kImbalancedShare[s] * double(total);
    c[s] = static_cast<std::size_t>(std::floor(exact + 1e-9));
    rem[s] = exact - double(c[s]);
    used += c[s];
  }
  while (used < total) {
    const auto s = std::size_t(std::max_element(rem.begin(), rem.end()) - rem.begin());
    ++c[s];
    rem[s] = -1;
    ++used;
  }
  return c;
}

// Epochs listed stage by stage; epoch i goes to subject i mod S, where
// S = ceil(N / epochs_per_subject). Each epoch draws from its own stream
// keyed on (subject, epoch).
inline std::vector<LabeledEpoch> make_dataset(const StageCounts& counts, const SynthConfig& cfg,
                                              std::size_t threads = 0) {
  cfg.validate();
  std::vector<std::size_t> stages;
  for (std::size_t s = 0; s < kStages; ++s) stages.insert(stages.end(), counts[s], s);
  const std::size_t n = stages.size();
  const std::size_t subjects = std::max<std::size_t>(1, (n + cfg.epochs_per_subject - 1) / cfg.epochs_per_subject);
  std::vector<LabeledEpoch> out(n);
  parallel_for(n, threads ? threads : worker_count(), [&](std::size_t i) {
    LabeledEpoch& e = out[i];
    e.subject = i % subjects;
    e.epoch = i / subjects;
    e.stage = stages[i];
    Rng rng = make_stream(cfg.seed, {tag_id("synth"), e.subject, e.epoch});
    e.signal = synth_signal(e.stage, cfg, rng);
  });
  std::sort(out.begin(), out.end(), [](const LabeledEpoch& a, const LabeledEpoch& b) {
    return a.subject != b.subject ? a.subject < b.subject : a.epoch < b.epoch;
  });
  return out;
}

// ---- epoch CSV ------------------------------------------------------------
// "# fs=<Hz>" comment, header "subject,epoch,stage,ch,s0,...", one row per
// channel of each epoch.

inline std::string epoch_csv_header(std::size_t fs) {
  std::string s = "# fs=" + std::to_string(fs) + "\nsubject,epoch,stage,ch";
  for (std::size_t i = 0; i < fs * kEpochSeconds; ++i) s += ",s" + std::to_string(i);
  return s + "\n";
}

inline std::string epoch_csv_rows(const LabeledEpoch& e) {
  std::string s;
  char buf[32];
  for (std::size_t c = 0; c < e.signal.channels.size(); ++c) {
    s += std::to_string(e.subject) + "," + std::to_string(e.epoch) + "," + std::string(stage_name(e.stage)) + "," +
         std::to_string(c);
    for (double v : e.signal.channels[c]) {
      std::snprintf(buf, sizeof buf, ",%.4f", v);
      s += buf;
    }
    s += "\n";
  }
  return s;
}

struct ManifestRow {
  std::size_t subject = 0, epoch = 0, stage = 0;
  std::string file;
  std::size_t offset = 0;  // byte offset of the epoch's first row
};

struct EpochFile {
  std::string csv;
  std::vector<ManifestRow> manifest;
};

inline EpochFile write_epochs_csv(const std::vector<LabeledEpoch>& epochs, const std::string& file_name) {
  if (epochs.empty()) throw ContractError("no epochs to write");
  EpochFile out;
  out.csv = epoch_csv_header(epochs[0].signal.fs);
  for (const auto& e : epochs) {
    if (e.signal.fs != epochs[0].signal.fs) throw ConfigError("epochs have different sampling rates");
    out.manifest.push_back({e.subject, e.epoch, e.stage, file_name, out.csv.size()});
    out.csv += epoch_csv_rows(e);
  }
  return out;
}

inline std::string manifest_csv(const std::vector<ManifestRow>& rows) {
  std::string s = "subject,epoch,stage,file,offset\n";
  for (const auto& r : rows) {
    s += std::to_string(r.subject) + "," + std::to_string(r.epoch) + "," + std::string(stage_name(r.stage)) + "," +
         r.file + "," + std::to_string(r.offset) + "\n";
  }
  return s;
}

namespace detail {

inline std::vector<std::string_view> split_commas(std::string_view line) {
  std::vector<std::string_view> f;
  std::size_t a = 0;
  while (true) {
    const std::size_t b = line.find(',', a);
    f.push_back(line.substr(a, b == std::string_view::npos ? std::string_view::npos : b - a));
    if (b == std::string_view::npos) break;
    a = b + 1;
  }
  return f;
}

inline std::size_t csv_index(std::string_view s, std::string_view what, std::size_t line) {
  s = trim(s);
  std::size_t v = 0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || ec != std::errc() || p != s.data() + s.size()) {
    throw ParseError("bad " + std::string(what) + " '" + std::string(s) + "'", line);
  }
  return v;
}

}  // namespace detail

// Rows of one (subject, epoch) may appear in any order but every channel
// 0..C-1 must be present, where C is the channel count of the first epoch.
inline std::vector<LabeledEpoch> parse_epochs_csv(std::string_view text) {
  std::size_t fs = 0, line_no = 0, pos = 0;
  bool header_seen = false;
  std::map<std::pair<std::size_t, std::size_t>, std::size_t> index;
  std::vector<LabeledEpoch> out;
  std::vector<std::size_t> first_line;
  while (pos < text.size()) {
    const std::size_t end = std::min(text.find('\n', pos), text.size());
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (trim(line).empty()) continue;
    if (line.front() == '#') {
      const auto body = trim(line.substr(1));
      if (body.substr(0, 3) == "fs=") {
        fs = detail::csv_index(body.substr(3), "fs", line_no);
        if (fs < 64) throw ParseError("fs " + std::to_string(fs) + " is below 64 Hz", line_no);
      }
      continue;
    }
    if (!header_seen) {
      if (fs == 0) throw ParseError("missing '# fs=' header comment before the column header", line_no);
      if (line.substr(0, 22) != "subject,epoch,stage,ch") throw ParseError("bad column header", line_no);
      header_seen = true;
      continue;
    }
    const auto f = detail::split_commas(line);
    const std::size_t want = 4 + fs * kEpochSeconds;
    if (f.size() != want) {
      throw ParseError("row has " + std::to_string(f.size()) + " fields, expected " + std::to_string(want), line_no);
    }
    const std::size_t subject = detail::csv_index(f[0], "subject", line_no);
    const std::size_t epoch = detail::csv_index(f[1], "epoch", line_no);
    const auto stage = parse_stage(f[2]);
    if (!stage) throw ParseError("bad stage name '" + std::string(f[2]) + "'", line_no);
    const std::size_t ch = detail::csv_index(f[3], "channel", line_no);
    auto [it, fresh] = index.try_emplace({subject, epoch}, out.size());
    if (fresh) {
      out.push_back({subject, epoch, *stage, EpochSignal{fs, {}}});
      first_line.push_back(line_no);
    }
    LabeledEpoch& e = out[it->second];
    if (e.stage != *stage) throw ParseError("stage differs between channel rows of one epoch", line_no);
    if (e.signal.channels.size() <= ch) e.signal.channels.resize(ch + 1);
    auto& samples = e.signal.channels[ch];
    if (!samples.empty()) throw ParseError("duplicate channel " + std::to_string(ch) + " row", line_no);
    samples.resize(fs * kEpochSeconds);
    for (std::size_t i = 0; i < samples.size(); ++i) {
      const auto s = trim(f[4 + i]);
      const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), samples[i]);
      if (s.empty() || ec != std::errc() || p != s.data() + s.size() || !std::isfinite(samples[i])) {
        throw ParseError("bad sample value '" + std::string(s) + "' in column s" + std::to_string(i), line_no);
      }
    }
  }
  if (!header_seen) throw ParseError("no column header", line_no);
  const std::size_t channels = out.empty() ? 0 : out[0].signal.channels.size();
  for (std::size_t k = 0; k < out.size(); ++k) {
    const auto& chs = out[k].signal.channels;
    for (std::size_t c = 0; c < std::max(channels, chs.size()); ++c) {
      if (c >= chs.size() || chs[c].empty()) {
        throw ParseError("subject " + std::to_string(out[k].subject) + " epoch " + std::to_string(out[k].epoch) +
                             " is missing channel " + std::to_string(c),
                         first_line[k]);
      }
    }
  }
  return out;
}

inline std::vector<LabeledEpoch> load_csv_epochs(const std::string& path) {
  const std::string text = read_file(path);
  try {
    return parse_epochs_csv(text);
  } catch (const ParseError& e) {
    const std::string w = e.what();
    throw ParseError(path + ": " + w.substr(0, w.rfind(" (at ")), e.offset());
  }
}

// ---- preprocessing ----------------------------------------------------------

inline PatchSequence preprocess(const EpochSignal& sig, PatchMode mode, const BandpassConfig& filter = {},
                                bool apply_filter = true) {
  return patch_sequence(spectrogram(apply_filter ? butterworth_bandpass(sig, filter) : sig), mode);
}

inline std::vector<Example> to_examples(const std::vector<LabeledEpoch>& epochs, PatchMode mode,
                                        std::size_t threads = 0, const BandpassConfig& filter = {}) {
  std::vector<Example> out(epochs.size());
  parallel_for(epochs.size(), threads ? threads : worker_count(), [&](std::size_t i) {
    out[i] = {preprocess(epochs[i].signal, mode, filter), epochs[i].stage, epochs[i].subject, epochs[i].epoch};
  });
  return out;
}

// Mean linear power per band (delta..beta, beta averaged over its 16 bins)
// over time, for one channel.
inline std::array<double, kNumBands> band_power(const Spectrogram& spec, std::size_t channel) {
  std::array<double, kNumBands> out{};
  for (std::size_t f = 0; f < kFreqBins; ++f) {
    const std::size_t band = std::min<std::size_t>(f / kBinsPerBand, kNumBands - 1);
    for (std::size_t t = 0; t < kEpochSeconds; ++t) out[band] += std::exp(spec.at(channel, f, t));
  }
  for (std::size_t b = 0; b < kNumBands; ++b) {
    out[b] /= double(kEpochSeconds * (b + 1 < kNumBands ? kBinsPerBand : kFreqBins - kBinsPerBand * (kNumBands - 1)));
  }
  return out;
}

}  // namespace ftss
