#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <string>
#include <string_view>
#include <vector>

#include "ftss/binary.hpp"
#include "ftss/errors.hpp"
#include "ftss/kv.hpp"
#include "ftss/signal.hpp"

namespace ftss {

struct EdfSignal {
  std::string label;
  std::string transducer;
  std::string physical_dim = "uV";
  double physical_min = -250.0, physical_max = 250.0;
  std::int32_t digital_min = -32768, digital_max = 32767;
  std::string prefilter;
  std::size_t samples_per_record = 0;
  std::vector<double> samples;  // physical units

  double gain() const { return (physical_max - physical_min) / double(digital_max - digital_min); }
  double to_physical(std::int16_t d) const { return physical_min + (double(d) - digital_min) * gain(); }
  std::int16_t to_digital(double v) const {
    const double d = std::round((v - physical_min) / gain() + digital_min);
    return static_cast<std::int16_t>(std::clamp(d, double(digital_min), double(digital_max)));
  }
};

struct Recording {
  std::string patient = "X X X X";
  std::string recording_id = "Startdate X X X X";
  std::string start_date = "01.01.00";
  std::string start_time = "00.00.00";
  double record_duration = 1.0;  // seconds
  std::size_t n_records = 0;
  std::vector<EdfSignal> signals;

  double fs(std::size_t i) const { return double(signals.at(i).samples_per_record) / record_duration; }
  double duration() const { return double(n_records) * record_duration; }
};

namespace detail {

struct EdfHeaderReader {
  std::string_view bytes;

  std::string_view raw(std::size_t off, std::size_t len) const {
    if (off + len > bytes.size()) {
      throw ParseError("truncated header: need " + std::to_string(off + len) + " bytes, have " +
                       std::to_string(bytes.size()),
                       bytes.size());
    }
    return bytes.substr(off, len);
  }
  std::string text(std::size_t off, std::size_t len) const {
    const auto v = raw(off, len);
    for (std::size_t i = 0; i < v.size(); ++i) {
      const auto c = static_cast<unsigned char>(v[i]);
      if (c < 32 || c > 126) throw ParseError("non-ASCII byte in header field", off + i);
    }
    return std::string(trim(v));
  }
  double number(std::size_t off, std::size_t len, std::string_view what) const {
    const std::string s = text(off, len);
    double v = 0;
    const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (s.empty() || ec != std::errc() || p != s.data() + s.size() || !std::isfinite(v)) {
      throw ParseError("non-numeric " + std::string(what) + " field '" + s + "'", off);
    }
    return v;
  }
  long long integer(std::size_t off, std::size_t len, std::string_view what) const {
    const std::string s = text(off, len);
    long long v = 0;
    const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (s.empty() || ec != std::errc() || p != s.data() + s.size()) {
      throw ParseError("non-integer " + std::string(what) + " field '" + s + "'", off);
    }
    return v;
  }
};

inline void put_field(std::string& out, std::string_view v, std::size_t len) {
  if (v.size() > len) throw ConfigError("EDF header value '" + std::string(v) + "' exceeds " + std::to_string(len) + " chars");
  out += v;
  out.append(len - v.size(), ' ');
}

// Shortest %g form that fits an 8-char field.
inline std::string fit_number(double v) {
  char buf[32];
  for (int prec = 8; prec > 0; --prec) {
    std::snprintf(buf, sizeof buf, "%.*g", prec, v);
    if (std::string_view(buf).size() <= 8) return buf;
  }
  throw ConfigError("EDF number does not fit 8 chars");
}

}  // namespace detail

// 256-byte main header, 256 bytes per signal, then records of int16 LE.
inline Recording parse_edf(std::string_view bytes) {
  const detail::EdfHeaderReader h{bytes};
  if (h.raw(0, 8) != std::string_view("0       ")) {
    throw ParseError("bad version field: expected '0', got '" + std::string(trim(h.raw(0, 8))) + "'", 0);
  }
  Recording rec;
  rec.patient = h.text(8, 80);
  rec.recording_id = h.text(88, 80);
  rec.start_date = h.text(168, 8);
  rec.start_time = h.text(176, 8);
  const long long header_bytes = h.integer(184, 8, "header size");
  const long long n_records = h.integer(236, 8, "record count");
  rec.record_duration = h.number(244, 8, "record duration");
  const long long ns = h.integer(252, 4, "signal count");
  if (ns <= 0) throw ParseError("signal count must be positive", 252);
  if (header_bytes != 256 * (ns + 1)) {
    throw ParseError("header size " + std::to_string(header_bytes) + " does not match " + std::to_string(ns) +
                     " signals",
                     184);
  }
  if (!(rec.record_duration > 0)) throw ParseError("record duration must be positive", 244);

  const auto n = static_cast<std::size_t>(ns);
  rec.signals.resize(n);
  std::size_t off = 256;
  auto field = [&](std::size_t width) {
    const std::size_t start = off;
    off += width * n;
    return start;
  };
  const std::size_t f_label = field(16), f_trans = field(80), f_dim = field(8), f_pmin = field(8),
                    f_pmax = field(8), f_dmin = field(8), f_dmax = field(8), f_pre = field(80),
                    f_ns = field(8);
  field(32);  // reserved
  std::size_t record_samples = 0;
  for (std::size_t i = 0; i < n; ++i) {
    EdfSignal& s = rec.signals[i];
    s.label = h.text(f_label + 16 * i, 16);
    s.transducer = h.text(f_trans + 80 * i, 80);
    s.physical_dim = h.text(f_dim + 8 * i, 8);
    s.physical_min = h.number(f_pmin + 8 * i, 8, "physical minimum");
    s.physical_max = h.number(f_pmax + 8 * i, 8, "physical maximum");
    const long long dmin = h.integer(f_dmin + 8 * i, 8, "digital minimum");
    const long long dmax = h.integer(f_dmax + 8 * i, 8, "digital maximum");
    if (dmin < -32768 || dmax > 32767 || dmin > dmax) {
      throw ParseError("digital range [" + std::to_string(dmin) + ", " + std::to_string(dmax) + "] is invalid for signal '" +
                       s.label + "'",
                       f_dmin + 8 * i);
    }
    if (dmin == dmax) {
      throw ParseError("digital minimum equals digital maximum for signal '" + s.label + "'", f_dmin + 8 * i);
    }
    if (s.physical_min == s.physical_max) {
      throw ParseError("physical minimum equals physical maximum for signal '" + s.label + "'", f_pmin + 8 * i);
    }
    s.digital_min = static_cast<std::int32_t>(dmin);
    s.digital_max = static_cast<std::int32_t>(dmax);
    s.prefilter = h.text(f_pre + 80 * i, 80);
    const long long spr = h.integer(f_ns + 8 * i, 8, "samples per record");
    if (spr <= 0) throw ParseError("samples per record must be positive", f_ns + 8 * i);
    s.samples_per_record = static_cast<std::size_t>(spr);
    const double fs = double(spr) / rec.record_duration;
    if (std::abs(fs - std::round(fs)) > 1e-9) {
      throw ParseError("sample rate " + format_double(fs) + " Hz of signal '" + s.label + "' is not an integer",
                       f_ns + 8 * i);
    }
    record_samples += s.samples_per_record;
  }

  const std::size_t data_start = static_cast<std::size_t>(header_bytes);
  h.raw(0, data_start);
  const std::size_t record_bytes = 2 * record_samples;
  const std::size_t available = bytes.size() - data_start;
  if (n_records == -1) {
    if (available % record_bytes != 0) {
      throw ParseError("data section of " + std::to_string(available) + " bytes is not a whole number of records",
                       data_start + available / record_bytes * record_bytes);
    }
    rec.n_records = available / record_bytes;
  } else if (n_records < 0) {
    throw ParseError("record count must be >= 0 or -1", 236);
  } else {
    rec.n_records = static_cast<std::size_t>(n_records);
  }
  for (std::size_t r = 0; r < rec.n_records; ++r) {
    const std::size_t start = data_start + r * record_bytes;
    if (start + record_bytes > bytes.size()) {
      throw ParseError("truncated data record " + std::to_string(r) + " of " + std::to_string(rec.n_records) +
                       ": need " + std::to_string(record_bytes) + " bytes, have " +
                       std::to_string(bytes.size() - std::min(bytes.size(), start)),
                       std::min(bytes.size(), start));
    }
  }
  const std::size_t end = data_start + rec.n_records * record_bytes;
  if (end != bytes.size()) {
    throw ParseError(std::to_string(bytes.size() - end) + " trailing bytes after the declared " +
                     std::to_string(rec.n_records) + " records",
                     end);
  }

  for (auto& s : rec.signals) s.samples.reserve(rec.n_records * s.samples_per_record);
  std::size_t pos = data_start;
  for (std::size_t r = 0; r < rec.n_records; ++r) {
    for (auto& s : rec.signals) {
      for (std::size_t k = 0; k < s.samples_per_record; ++k, pos += 2) {
        const auto lo = static_cast<std::uint8_t>(bytes[pos]), hi = static_cast<std::uint8_t>(bytes[pos + 1]);
        s.samples.push_back(s.to_physical(static_cast<std::int16_t>(std::uint16_t(lo | (hi << 8)))));
      }
    }
  }
  return rec;
}

inline Recording read_edf(const std::string& path) {
  const std::string bytes = read_file(path);
  try {
    return parse_edf(bytes);
  } catch (const ParseError& e) {
    throw ParseError(path + ": " + std::string(e.what()).substr(0, std::string(e.what()).rfind(" (at ")), e.offset());
  }
}

// Minimal writer. Samples are quantized with each signal's affine map.
inline std::string write_edf(const Recording& rec) {
  std::string out;
  const std::size_t n = rec.signals.size();
  if (n == 0) throw ConfigError("EDF recording has no signals");
  for (const auto& s : rec.signals) {
    if (s.samples.size() != rec.n_records * s.samples_per_record) {
      throw ShapeError("signal '" + s.label + "' has " + std::to_string(s.samples.size()) + " samples, expected " +
                       std::to_string(rec.n_records * s.samples_per_record));
    }
    if (s.digital_min >= s.digital_max) throw ConfigError("signal '" + s.label + "' has an empty digital range");
  }
  using detail::put_field;
  put_field(out, "0", 8);
  put_field(out, rec.patient, 80);
  put_field(out, rec.recording_id, 80);
  put_field(out, rec.start_date, 8);
  put_field(out, rec.start_time, 8);
  put_field(out, std::to_string(256 * (n + 1)), 8);
  put_field(out, "", 44);
  put_field(out, std::to_string(rec.n_records), 8);
  put_field(out, detail::fit_number(rec.record_duration), 8);
  put_field(out, std::to_string(n), 4);
  for (const auto& s : rec.signals) put_field(out, s.label, 16);
  for (const auto& s : rec.signals) put_field(out, s.transducer, 80);
  for (const auto& s : rec.signals) put_field(out, s.physical_dim, 8);
  for (const auto& s : rec.signals) put_field(out, detail::fit_number(s.physical_min), 8);
  for (const auto& s : rec.signals) put_field(out, detail::fit_number(s.physical_max), 8);
  for (const auto& s : rec.signals) put_field(out, std::to_string(s.digital_min), 8);
  for (const auto& s : rec.signals) put_field(out, std::to_string(s.digital_max), 8);
  for (const auto& s : rec.signals) put_field(out, s.prefilter, 80);
  for (const auto& s : rec.signals) put_field(out, std::to_string(s.samples_per_record), 8);
  for (std::size_t i = 0; i < n; ++i) put_field(out, "", 32);
  for (std::size_t r = 0; r < rec.n_records; ++r) {
    for (const auto& s : rec.signals) {
      for (std::size_t k = 0; k < s.samples_per_record; ++k) {
        const auto d = static_cast<std::uint16_t>(s.to_digital(s.samples[r * s.samples_per_record + k]));
        out.push_back(static_cast<char>(d & 0xff));
        out.push_back(static_cast<char>(d >> 8));
      }
    }
  }
  return out;
}

// First signal whose label contains `key` (case-sensitive).
inline std::size_t find_signal(const Recording& rec, std::string_view key) {
  for (std::size_t i = 0; i < rec.signals.size(); ++i)
    if (rec.signals[i].label.find(key) != std::string::npos) return i;
  std::string labels;
  for (const auto& s : rec.signals) labels += (labels.empty() ? "" : ", ") + s.label;
  throw ConfigError("no signal matching '" + std::string(key) + "'; available: " + labels);
}

// Whole 30 s epochs from the selected signals, each band-pass filtered over
// the full recording first. Trailing partial epochs are dropped.
inline std::vector<EpochSignal> recording_epochs(const Recording& rec, const std::vector<std::size_t>& signals,
                                                 const BandpassConfig& filter = {}) {
  if (signals.empty()) throw ConfigError("no signals selected");
  const double fs = rec.fs(signals[0]);
  for (auto i : signals) {
    if (rec.fs(i) != fs) throw ConfigError("selected signals have different sampling rates");
  }
  const auto rate = static_cast<std::size_t>(std::lround(fs));
  EpochSignal probe{rate, {}};
  probe.validate();
  const auto sections = design_butterworth_bandpass(fs, filter.low, filter.high, filter.order);
  std::vector<std::vector<double>> filtered;
  for (auto i : signals) filtered.push_back(sos_filter(sections, rec.signals[i].samples));
  const std::size_t per_epoch = rate * kEpochSeconds;
  const std::size_t n_epochs = filtered[0].size() / per_epoch;
  std::vector<EpochSignal> out(n_epochs, EpochSignal{rate, {}});
  for (std::size_t e = 0; e < n_epochs; ++e)
    for (const auto& ch : filtered)
      out[e].channels.emplace_back(ch.begin() + e * per_epoch, ch.begin() + (e + 1) * per_epoch);
  return out;
}

}  // namespace ftss
