#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ftss/binary.hpp"
#include "ftss/errors.hpp"
#include "ftss/kv.hpp"

namespace ftss {

inline constexpr std::size_t kStages = 5;
inline constexpr std::array<std::string_view, kStages> kStageNames = {"W", "N1", "N2", "N3", "REM"};

inline std::string_view stage_name(std::size_t code) {
  if (code >= kStages) throw ContractError("stage code " + std::to_string(code) + " out of range");
  return kStageNames[code];
}

// Accepts W/Wake, N1..N3, REM/R and the R&K S1..S4 spellings (S3, S4 -> N3).
inline std::optional<std::size_t> parse_stage(std::string_view s) {
  std::string u(trim(s));
  for (auto& c : u) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  if (u == "W" || u == "WAKE" || u == "0") return 0;
  if (u == "N1" || u == "S1" || u == "1") return 1;
  if (u == "N2" || u == "S2" || u == "2") return 2;
  if (u == "N3" || u == "S3" || u == "S4" || u == "3") return 3;
  if (u == "REM" || u == "R" || u == "4") return 4;
  return std::nullopt;
}

struct ConfusionMatrix {
  std::size_t classes = kStages;
  std::vector<std::uint64_t> counts;  // row = true, col = predicted

  explicit ConfusionMatrix(std::size_t k = kStages) : classes(k), counts(k * k, 0) {}

  std::uint64_t& at(std::size_t t, std::size_t p) { return counts[t * classes + p]; }
  std::uint64_t at(std::size_t t, std::size_t p) const { return counts[t * classes + p]; }

  static ConfusionMatrix from_rows(const std::vector<std::vector<std::uint64_t>>& rows) {
    ConfusionMatrix cm(rows.size());
    for (std::size_t t = 0; t < rows.size(); ++t) {
      if (rows[t].size() != rows.size()) throw ShapeError("confusion matrix must be square");
      for (std::size_t p = 0; p < rows.size(); ++p) cm.at(t, p) = rows[t][p];
    }
    return cm;
  }

  std::uint64_t total() const {
    std::uint64_t n = 0;
    for (auto c : counts) n += c;
    return n;
  }
  std::uint64_t row_sum(std::size_t t) const {
    std::uint64_t n = 0;
    for (std::size_t p = 0; p < classes; ++p) n += at(t, p);
    return n;
  }
  std::uint64_t col_sum(std::size_t p) const {
    std::uint64_t n = 0;
    for (std::size_t t = 0; t < classes; ++t) n += at(t, p);
    return n;
  }
  bool diagonal() const {
    for (std::size_t t = 0; t < classes; ++t)
      for (std::size_t p = 0; p < classes; ++p)
        if (t != p && at(t, p) != 0) return false;
    return true;
  }

  ConfusionMatrix& operator+=(const ConfusionMatrix& o) {
    if (o.classes != classes) throw ShapeError("confusion matrices differ in class count");
    for (std::size_t i = 0; i < counts.size(); ++i) counts[i] += o.counts[i];
    return *this;
  }
};

inline ConfusionMatrix confusion(std::span<const std::size_t> truth, std::span<const std::size_t> pred,
                                 std::size_t classes = kStages) {
  if (truth.size() != pred.size()) {
    throw ContractError("label count mismatch: " + std::to_string(truth.size()) + " true vs " +
                        std::to_string(pred.size()) + " predicted");
  }
  ConfusionMatrix cm(classes);
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] >= classes || pred[i] >= classes) {
      throw ContractError("label out of range at index " + std::to_string(i));
    }
    ++cm.at(truth[i], pred[i]);
  }
  return cm;
}

// Zero denominators give 0 and set the matching flag.
struct ClassMetrics {
  double precision = 0, recall = 0, f1 = 0;
  bool precision_undefined = false, recall_undefined = false, f1_undefined = false;
  std::uint64_t support = 0;
};

inline std::vector<ClassMetrics> prf1(const ConfusionMatrix& cm) {
  std::vector<ClassMetrics> out(cm.classes);
  for (std::size_t c = 0; c < cm.classes; ++c) {
    auto& m = out[c];
    const double tp = double(cm.at(c, c));
    const std::uint64_t predicted = cm.col_sum(c);
    m.support = cm.row_sum(c);
    if (predicted == 0) m.precision_undefined = true;
    else m.precision = tp / double(predicted);
    if (m.support == 0) m.recall_undefined = true;
    else m.recall = tp / double(m.support);
    if (m.precision + m.recall == 0) m.f1_undefined = true;
    else m.f1 = 2 * m.precision * m.recall / (m.precision + m.recall);
  }
  return out;
}

inline double accuracy(const ConfusionMatrix& cm) {
  const std::uint64_t n = cm.total();
  if (n == 0) return 0.0;
  std::uint64_t d = 0;
  for (std::size_t c = 0; c < cm.classes; ++c) d += cm.at(c, c);
  return double(d) / double(n);
}

struct Kappa {
  double value = 0;
  bool undefined = false;  // chance agreement of 1, or an empty matrix
};

inline Kappa cohen_kappa(const ConfusionMatrix& cm) {
  const std::uint64_t n = cm.total();
  if (n == 0) return {0.0, true};
  const double nn = double(n);
  const double po = accuracy(cm);
  double pe = 0;
  for (std::size_t c = 0; c < cm.classes; ++c) pe += double(cm.row_sum(c)) * double(cm.col_sum(c));
  pe /= nn * nn;
  if (pe == 1.0) return {po == 1.0 ? 1.0 : 0.0, true};
  return {(po - pe) / (1.0 - pe), false};
}

inline double kappa(const ConfusionMatrix& cm) { return cohen_kappa(cm).value; }

// Misclassified (true, predicted) pairs as unordered stage pairs.
struct StagePair {
  std::size_t a, b;  // a < b
};

inline constexpr std::array<StagePair, 5> kRegularPairs = {{{0, 1}, {0, 2}, {1, 2}, {2, 3}, {0, 4}}};
inline constexpr std::array<StagePair, 3> kIrregularPairs = {{{1, 4}, {2, 4}, {0, 3}}};

struct TransitionCounts {
  std::array<std::uint64_t, kRegularPairs.size()> regular{};
  std::array<std::uint64_t, kIrregularPairs.size()> irregular{};
  std::uint64_t other = 0;  // {N1,N3} and {N3,REM}, which the taxonomy leaves out

  std::uint64_t total() const {
    std::uint64_t n = other;
    for (auto v : regular) n += v;
    for (auto v : irregular) n += v;
    return n;
  }
};

inline std::string pair_name(StagePair p) {
  return "{" + std::string(stage_name(p.a)) + "," + std::string(stage_name(p.b)) + "}";
}

inline TransitionCounts transition_pairs(std::span<const std::size_t> truth, std::span<const std::size_t> pred) {
  if (truth.size() != pred.size()) throw ContractError("label count mismatch in transition_pairs");
  TransitionCounts out;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] >= kStages || pred[i] >= kStages) {
      throw ContractError("label out of range at index " + std::to_string(i));
    }
    if (truth[i] == pred[i]) continue;
    const std::size_t a = std::min(truth[i], pred[i]), b = std::max(truth[i], pred[i]);
    bool found = false;
    for (std::size_t k = 0; k < kRegularPairs.size() && !found; ++k)
      if (kRegularPairs[k].a == a && kRegularPairs[k].b == b) ++out.regular[k], found = true;
    for (std::size_t k = 0; k < kIrregularPairs.size() && !found; ++k)
      if (kIrregularPairs[k].a == a && kIrregularPairs[k].b == b) ++out.irregular[k], found = true;
    if (!found) ++out.other;
  }
  return out;
}

inline std::string transitions_csv(const TransitionCounts& t) {
  std::string s = "kind,pair,count\n";
  for (std::size_t k = 0; k < kRegularPairs.size(); ++k)
    s += "regular," + pair_name(kRegularPairs[k]) + "," + std::to_string(t.regular[k]) + "\n";
  for (std::size_t k = 0; k < kIrregularPairs.size(); ++k)
    s += "irregular," + pair_name(kIrregularPairs[k]) + "," + std::to_string(t.irregular[k]) + "\n";
  s += "other,-," + std::to_string(t.other) + "\n";
  return s;
}

// --- reports ---

inline std::string metrics_csv(const ConfusionMatrix& cm) {
  const auto m = prf1(cm);
  const Kappa k = cohen_kappa(cm);
  std::string s = "stage,precision,recall,f1,support,undefined\n";
  char buf[160];
  for (std::size_t c = 0; c < cm.classes; ++c) {
    std::string flags;
    if (m[c].precision_undefined) flags += "precision;";
    if (m[c].recall_undefined) flags += "recall;";
    if (m[c].f1_undefined) flags += "f1;";
    if (!flags.empty()) flags.pop_back();
    std::snprintf(buf, sizeof buf, ",%.6f,%.6f,%.6f,%llu,", m[c].precision, m[c].recall, m[c].f1,
                  static_cast<unsigned long long>(m[c].support));
    s += std::string(c < kStages ? stage_name(c) : std::to_string(c)) + buf + flags + "\n";
  }
  // summary rows carry their value in the precision column
  const auto n = static_cast<unsigned long long>(cm.total());
  std::snprintf(buf, sizeof buf, "accuracy,%.6f,,,%llu,\n", accuracy(cm), n);
  s += buf;
  std::snprintf(buf, sizeof buf, "kappa,%.6f,,,%llu,%s\n", k.value, n, k.undefined ? "kappa" : "");
  s += buf;
  return s;
}

inline std::string confusion_csv(const ConfusionMatrix& cm) {
  std::string s = "true\\pred";
  for (std::size_t p = 0; p < cm.classes; ++p) s += "," + std::string(stage_name(p));
  s += "\n";
  for (std::size_t t = 0; t < cm.classes; ++t) {
    s += std::string(stage_name(t));
    for (std::size_t p = 0; p < cm.classes; ++p) s += "," + std::to_string(cm.at(t, p));
    s += "\n";
  }
  return s;
}

// --- hypnogram ---

inline std::string hypnogram_csv(std::span<const std::size_t> labels) {
  std::string s = "epoch_index,stage_code,stage_name\n";
  for (std::size_t i = 0; i < labels.size(); ++i) {
    s += std::to_string(i) + "," + std::to_string(labels[i]) + "," + std::string(stage_name(labels[i])) + "\n";
  }
  return s;
}

inline void write_hypnogram(const std::string& path, std::span<const std::size_t> labels) {
  write_file(path, hypnogram_csv(labels));
}

inline std::vector<std::size_t> parse_hypnogram(std::string_view text) {
  std::vector<std::size_t> out;
  std::size_t line_no = 0, pos = 0;
  bool header = true;
  while (pos < text.size()) {
    const std::size_t end = std::min(text.find('\n', pos), text.size());
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (trim(line).empty()) continue;
    if (header) {
      if (trim(line) != "epoch_index,stage_code,stage_name") throw ParseError("bad hypnogram header", line_no);
      header = false;
      continue;
    }
    std::vector<std::string_view> f;
    for (std::size_t a = 0;;) {
      const std::size_t b = line.find(',', a);
      f.push_back(line.substr(a, b == std::string_view::npos ? std::string_view::npos : b - a));
      if (b == std::string_view::npos) break;
      a = b + 1;
    }
    if (f.size() != 3) throw ParseError("expected 3 fields, got " + std::to_string(f.size()), line_no);
    std::size_t idx = 0;
    const auto code = parse_stage(f[1]);
    try {
      idx = parse_size("epoch_index", f[0]);
    } catch (const ConfigError&) {
      throw ParseError("bad epoch_index '" + std::string(f[0]) + "'", line_no);
    }
    if (idx != out.size()) throw ParseError("epoch_index out of sequence", line_no);
    if (!code || parse_stage(f[2]) != code) throw ParseError("bad stage '" + std::string(f[1]) + "'", line_no);
    out.push_back(*code);
  }
  if (header) throw ParseError("empty hypnogram", 1);
  return out;
}

inline std::vector<std::size_t> read_hypnogram(const std::string& path) { return parse_hypnogram(read_file(path)); }

}  // namespace ftss
