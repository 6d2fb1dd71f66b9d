#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ftss/binary.hpp"
#include "ftss/errors.hpp"
#include "ftss/model.hpp"
#include "ftss/patching.hpp"

namespace ftss {

inline constexpr double kRelevanceEps = 1e-9;

using Mat = Tensor<double>;

namespace detail {

inline double stabilize(double z, double eps) { return z >= 0 ? z + eps : z - eps; }

template <typename T>
Mat as_double(const Tensor<T>& t) {
  if constexpr (std::is_same_v<T, double>) return t;
  else return t.template cast<double>();
}

inline Mat mm(const Mat& a, const Mat& b) {
  Mat c({a.rows(), b.cols()});
  gemm_nn(a.rows(), a.cols(), b.cols(), a.data().data(), b.data().data(), c.data().data());
  return c;
}

inline Mat mm_nt(const Mat& a, const Mat& b) {
  Mat c({a.rows(), b.rows()});
  gemm_nt(a.rows(), a.cols(), b.rows(), a.data().data(), b.data().data(), c.data().data());
  return c;
}

inline Mat mm_tn(const Mat& a, const Mat& b) {
  Mat c({a.cols(), b.cols()});
  gemm_tn(a.rows(), a.cols(), b.cols(), a.data().data(), b.data().data(), c.data().data());
  return c;
}

inline Mat cols(const Mat& a, std::size_t start, std::size_t count) {
  Mat out({a.rows(), count});
  for (std::size_t r = 0; r < a.rows(); ++r)
    for (std::size_t c = 0; c < count; ++c) out(r, c) = a(r, start + c);
  return out;
}

inline void put_cols(Mat& dst, const Mat& src, std::size_t start) {
  for (std::size_t r = 0; r < src.rows(); ++r)
    for (std::size_t c = 0; c < src.cols(); ++c) dst(r, start + c) = src(r, c);
}

inline void add_into(Mat& dst, const Mat& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

inline Mat as_matrix(const Mat& t) { return t.rank() == 1 ? t.reshaped({1, t.size()}) : t; }

}  // namespace detail

inline double total(const Mat& m) {
  double s = 0;
  for (double v : m.data()) s += v;
  return s;
}

// Relevance through y = x W (bias left out of the denominator, so the rule
// conserves sum(R) up to the stabilizer):
//   R_x[n,j] = x[n,j] * sum_i W[j,i] R[n,i] / (z[n,i] +- eps),  z = x W.
inline Mat lrp_linear(const Mat& x, const Mat& w, const Mat& r, double eps = kRelevanceEps) {
  const Mat xm = detail::as_matrix(x), rm = detail::as_matrix(r);
  if (xm.cols() != w.rows() || rm.cols() != w.cols() || rm.rows() != xm.rows()) {
    throw ShapeError("lrp_linear: x " + shape_str(x.shape()) + ", W " + shape_str(w.shape()) + ", R " +
                     shape_str(r.shape()));
  }
  Mat s = detail::mm(xm, w);
  for (std::size_t i = 0; i < s.size(); ++i) s[i] = rm[i] / detail::stabilize(s[i], eps);
  Mat out = detail::mm_nt(s, w);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= xm[i];
  return out.reshaped(x.shape());
}

// out = a + b; relevance split in proportion to each summand.
inline std::pair<Mat, Mat> lrp_add(const Mat& a, const Mat& b, const Mat& r, double eps = kRelevanceEps) {
  Mat ra(a.shape()), rb(b.shape());
  for (std::size_t i = 0; i < r.size(); ++i) {
    const double s = r[i] / detail::stabilize(a[i] + b[i], eps);
    ra[i] = a[i] * s;
    rb[i] = b[i] * s;
  }
  return {ra, rb};
}

// out = alpha * A B. Each operand receives half of its full share so
// the pair conserves relevance.
inline std::pair<Mat, Mat> lrp_matmul(const Mat& a, const Mat& b, const Mat& r, double alpha = 1.0,
                                      double eps = kRelevanceEps) {
  Mat s = detail::mm(a, b);
  for (std::size_t i = 0; i < s.size(); ++i) s[i] = r[i] / detail::stabilize(alpha * s[i], eps);
  Mat ra = detail::mm_nt(s, b);   // s B^T
  Mat rb = detail::mm_tn(a, s);   // A^T s
  for (std::size_t i = 0; i < ra.size(); ++i) ra[i] *= 0.5 * alpha * a[i];
  for (std::size_t i = 0; i < rb.size(); ++i) rb[i] *= 0.5 * alpha * b[i];
  return {ra, rb};
}

// Row softmax y = softmax(x): R_x[j] = x[j] * (R[j] - y[j] * sum_k R[k]).
inline Mat lrp_softmax(const Mat& x, const Mat& y, const Mat& r) {
  Mat out(x.shape());
  const std::size_t n = x.cols();
  for (std::size_t row = 0; row < x.rows(); ++row) {
    double rs = 0;
    for (std::size_t j = 0; j < n; ++j) rs += r(row, j);
    for (std::size_t j = 0; j < n; ++j) out(row, j) = x(row, j) * (r(row, j) - y(row, j) * rs);
  }
  return out;
}

struct LayerConservation {
  std::string layer;
  double r_out = 0;  // relevance entering the layer from above
  double r_in = 0;   // relevance assigned to its input
};

struct BlockRelevance {
  std::vector<Mat> grad;       // per head, d logit[target] / d W_A
  std::vector<Mat> relevance;  // per head, R arriving at W_A
  Mat combined;                // I + mean_h max(0, grad * relevance)
};

struct RelevanceResult {
  std::size_t target = 0;
  std::vector<BlockRelevance> blocks;
  std::vector<LayerConservation> linear_layers;
  Mat input_relevance;  // at the encoder input X
};

template <typename T>
void check_trace(const ForwardTrace<T>& tr) {
  if (!tr.graph || tr.blocks.size() != tr.params.blocks.size()) {
    throw ContractError("forward trace is incomplete");
  }
  for (const auto& b : tr.blocks) {
    if (b.attn.empty() || b.attn.size() != b.scores.size() || b.attn.size() != b.head_out.size() ||
        b.output.graph == nullptr) {
      throw ContractError("forward trace is missing retained attention maps");
    }
  }
  if (tr.logits.graph == nullptr) throw ContractError("forward trace has no logits");
}

// Gradient of logit[target] with respect to every retained W_A.
template <typename T>
std::vector<std::vector<Mat>> attention_gradients(ForwardTrace<T>& tr, std::size_t target) {
  check_trace(tr);
  const std::size_t n_classes = tr.logits.value().size();
  if (target >= n_classes) throw ContractError("target class " + std::to_string(target) + " out of range");
  Graph<T>& g = *tr.graph;
  for (const auto& b : tr.blocks)
    for (const auto& a : b.attn)
      if (!g.requires_grad(a)) {
        throw ContractError("attention maps were recorded without grad; run forward with trainable parameters");
      }
  g.zero_grad();
  Tensor<T> seed(tr.logits.value().shape());
  seed[target] = T{1};
  g.backward(tr.logits, seed);
  std::vector<std::vector<Mat>> out;
  for (const auto& b : tr.blocks) {
    std::vector<Mat> heads;
    for (const auto& a : b.attn) heads.push_back(detail::as_double(g.grad(a)));
    out.push_back(std::move(heads));
  }
  return out;
}

// Relevance from the one-hot decision down to the encoder input.
// Layernorm and GELU pass relevance through unchanged.
template <typename T>
RelevanceResult propagate_relevance(const ForwardTrace<T>& tr, std::size_t target,
                                    double eps = kRelevanceEps) {
  check_trace(tr);
  using detail::as_double;
  const std::size_t n_classes = tr.logits.value().size();
  if (target >= n_classes) throw ContractError("target class " + std::to_string(target) + " out of range");
  RelevanceResult res;
  res.target = target;
  auto linear = [&](const std::string& name, const Mat& x, const Mat& w, const Mat& r) {
    Mat rx = lrp_linear(x, w, r, eps);
    res.linear_layers.push_back({name, total(r), total(rx)});
    return rx;
  };

  Mat r_logits({1, n_classes});
  r_logits[target] = 1.0;
  const Mat r_cls = linear("head", as_double(tr.cls_norm.value()), as_double(tr.params.head_w.value()), r_logits);

  const std::size_t nb = tr.blocks.size();
  const Mat& last = nb ? as_double(tr.blocks.back().output.value()) : as_double(tr.embedded.value());
  Mat r(last.shape());
  for (std::size_t c = 0; c < r.cols(); ++c) r(0, c) = r_cls[c];

  res.blocks.resize(nb);
  for (std::size_t bi = nb; bi-- > 0;) {
    const BlockTrace<T>& b = tr.blocks[bi];
    const auto& p = tr.params.blocks[bi];
    const std::string tag = "blocks." + std::to_string(bi) + ".";

    // out = x1 + fc2(gelu(fc1(ln2(x1))))
    auto [r_x1, r_mlp] = lrp_add(as_double(b.x1.value()), as_double(b.fc2.value()), r, eps);
    const Mat r_act = linear(tag + "mlp.fc2", as_double(b.act.value()), as_double(p.fc2_w.value()), r_mlp);
    const Mat r_ln2 = linear(tag + "mlp.fc1", as_double(b.ln2.value()), as_double(p.fc1_w.value()), r_act);
    detail::add_into(r_x1, r_ln2);

    // x1 = x + o(concat)
    auto [r_x, r_attn] = lrp_add(as_double(b.input.value()), as_double(b.attn_out.value()), r_x1, eps);
    const Mat r_concat = linear(tag + "attn.o", as_double(b.concat.value()), as_double(p.attn.o_w.value()), r_attn);

    const Mat q = as_double(b.q.value()), k = as_double(b.k.value()), v = as_double(b.v.value());
    const std::size_t heads = b.attn.size(), dh = q.cols() / heads;
    Mat r_q(q.shape()), r_k(k.shape()), r_v(v.shape());
    BlockRelevance& br = res.blocks[bi];
    for (std::size_t h = 0; h < heads; ++h) {
      const Mat wa = as_double(b.attn[h].value());
      const Mat vh = detail::cols(v, h * dh, dh);
      auto [r_wa, r_vh] = lrp_matmul(wa, vh, detail::cols(r_concat, h * dh, dh), 1.0, eps);
      br.relevance.push_back(r_wa);
      detail::put_cols(r_v, r_vh, h * dh);
      const Mat scores = as_double(b.scores[h].value());
      const Mat r_scores = lrp_softmax(scores, wa, r_wa);
      const Mat qh = detail::cols(q, h * dh, dh), kh = detail::cols(k, h * dh, dh);
      // scores = alpha * Q K^T
      const double alpha = 1.0 / tr.config.attn_scale;
      Mat kt({kh.cols(), kh.rows()});
      for (std::size_t i = 0; i < kh.rows(); ++i)
        for (std::size_t c = 0; c < kh.cols(); ++c) kt(c, i) = kh(i, c);
      auto [r_qh, r_kt] = lrp_matmul(qh, kt, r_scores, alpha, eps);
      detail::put_cols(r_q, r_qh, h * dh);
      Mat r_kh(kh.shape());
      for (std::size_t i = 0; i < kh.rows(); ++i)
        for (std::size_t c = 0; c < kh.cols(); ++c) r_kh(i, c) = r_kt(c, i);
      detail::put_cols(r_k, r_kh, h * dh);
    }
    const Mat ln1 = as_double(b.ln1.value());
    Mat r_ln1 = linear(tag + "attn.q", ln1, as_double(p.attn.q_w.value()), r_q);
    detail::add_into(r_ln1, linear(tag + "attn.k", ln1, as_double(p.attn.k_w.value()), r_k));
    detail::add_into(r_ln1, linear(tag + "attn.v", ln1, as_double(p.attn.v_w.value()), r_v));
    detail::add_into(r_x, r_ln1);
    r = std::move(r_x);
  }
  res.input_relevance = std::move(r);
  return res;
}

// I + mean over heads of max(0, grad * relevance).
inline Mat block_map(const std::vector<Mat>& grads, const std::vector<Mat>& relevance) {
  if (grads.empty() || grads.size() != relevance.size()) {
    throw ShapeError("block_map: " + std::to_string(grads.size()) + " gradient maps vs " +
                     std::to_string(relevance.size()) + " relevance maps");
  }
  const Shape& s = grads[0].shape();
  Mat out(s);
  for (std::size_t h = 0; h < grads.size(); ++h) {
    if (grads[h].shape() != s || relevance[h].shape() != s) throw ShapeError("block_map: head shapes differ");
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += std::max(0.0, grads[h][i] * relevance[h][i]);
  }
  const double inv = 1.0 / double(grads.size());
  for (auto& v : out.data()) v *= inv;
  for (std::size_t i = 0; i < out.rows(); ++i) out(i, i) += 1.0;
  return out;
}

enum class Rollout { kHadamard, kMatmul };

inline Rollout parse_rollout(std::string_view s) {
  if (s == "hadamard") return Rollout::kHadamard;
  if (s == "matmul") return Rollout::kMatmul;
  throw ConfigError("unknown rollout '" + std::string(s) + "' (expected hadamard or matmul)");
}

inline std::string_view to_string(Rollout r) { return r == Rollout::kHadamard ? "hadamard" : "matmul"; }

// Hadamard: elementwise product of all maps. Matmul: A_B * ... * A_1.
inline Mat combine_maps(const std::vector<Mat>& maps, Rollout mode) {
  if (maps.empty()) throw ShapeError("combine_maps: no block maps");
  Mat acc = maps[0];
  for (std::size_t b = 1; b < maps.size(); ++b) {
    if (maps[b].shape() != acc.shape()) throw ShapeError("combine_maps: block map shapes differ");
    if (mode == Rollout::kHadamard) {
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] *= maps[b][i];
    } else {
      acc = detail::mm(maps[b], acc);
    }
  }
  return acc;
}

struct RelevanceGrid {
  std::size_t channel = 0;
  std::size_t bands = kNumBands;
  std::vector<double> values;  // bands x 30, row-major
  double raw_min = 0, raw_max = 0;

  double at(std::size_t band, std::size_t second) const { return values[band * kEpochSeconds + second]; }
};

struct RelevanceMap {
  std::size_t target = 0;
  std::size_t predicted = 0;
  Rollout rollout = Rollout::kHadamard;
  std::vector<RelevanceGrid> grids;  // one per channel (one in concat_features mode)
};

// Row 0 of the combined map without its class-token entry, laid onto
// per-channel band x second grids and min-max scaled to [0, 1]. A flat grid
// maps to all zeros.
inline std::vector<RelevanceGrid> layout_relevance(const Mat& combined, const PatchSequence& seq) {
  if (combined.rows() != seq.length + 1 || combined.cols() != seq.length + 1) {
    throw ShapeError("relevance map " + shape_str(combined.shape()) + " does not fit a sequence of " +
                     std::to_string(seq.length) + " patches");
  }
  const std::size_t n_grids = seq.mode == PatchMode::kConcatFeatures ? 1 : seq.channels;
  std::vector<RelevanceGrid> grids(n_grids);
  for (std::size_t c = 0; c < n_grids; ++c) {
    grids[c].channel = c;
    grids[c].bands = seq.grid_bands();
    grids[c].values.assign(grids[c].bands * kEpochSeconds, 0.0);
  }
  for (std::size_t i = 0; i < seq.length; ++i) {
    const PatchPosition p = seq.position(i);
    grids.at(p.channel).values.at(p.band * kEpochSeconds + p.second) = combined(0, i + 1);
  }
  for (auto& g : grids) {
    const auto [lo, hi] = std::minmax_element(g.values.begin(), g.values.end());
    g.raw_min = *lo;
    g.raw_max = *hi;
    const double span = g.raw_max - g.raw_min;
    for (auto& v : g.values) v = span > 0 ? (v - g.raw_min) / span : 0.0;
  }
  return grids;
}

// Full visualization for one epoch. The trace must come from a forward pass
// with trainable parameters so W_A gradients exist.
template <typename T>
RelevanceMap visualize(ForwardTrace<T>& tr, const PatchSequence& seq, std::size_t target,
                       Rollout mode = Rollout::kHadamard, RelevanceResult* detail_out = nullptr) {
  check_trace(tr);
  if (tr.blocks.empty()) throw ContractError("model has no encoder blocks to visualize");
  auto grads = attention_gradients(tr, target);
  RelevanceResult rel = propagate_relevance(tr, target);
  std::vector<Mat> maps;
  for (std::size_t b = 0; b < rel.blocks.size(); ++b) {
    rel.blocks[b].grad = std::move(grads[b]);
    rel.blocks[b].combined = block_map(rel.blocks[b].grad, rel.blocks[b].relevance);
    maps.push_back(rel.blocks[b].combined);
  }
  RelevanceMap out;
  out.target = target;
  out.predicted = argmax(tr.logit_values());
  out.rollout = mode;
  out.grids = layout_relevance(combine_maps(maps, mode), seq);
  if (detail_out) *detail_out = std::move(rel);
  return out;
}

// Forward in double on a copy of the parameters, then visualize.
template <typename T>
RelevanceMap explain(const PatchSequence& seq, const ModelParams<T>& params, std::optional<std::size_t> target = {},
                     Rollout mode = Rollout::kHadamard) {
  ModelParams<double> p;
  p.config = params.config;
  p.blocks.resize(params.blocks.size());
  {
    std::vector<const Tensor<T>*> src;
    for_each_slot(params, [&](const std::string&, const Tensor<T>& t) { src.push_back(&t); });
    std::size_t i = 0;
    for_each_slot(p, [&](const std::string&, Tensor<double>& t) { t = detail::as_double(*src[i++]); });
  }
  Rng unused(0);
  auto tr = forward(seq, p, false, unused, true);
  const std::size_t tgt = target.value_or(argmax(tr.logit_values()));
  return visualize(tr, seq, tgt, mode);
}

// Shannon entropy in bits of one band's 30 values taken as a distribution;
// an all-zero band counts as uniform.
inline double entropy_bits(std::span<const double> v) {
  double s = 0;
  for (double x : v) s += x;
  if (!(s > 0)) return std::log2(double(v.size()));
  double h = 0;
  for (double x : v) {
    const double p = x / s;
    if (p > 0) h -= p * std::log2(p);
  }
  return h;
}

inline std::vector<std::vector<double>> band_entropy(const RelevanceMap& map) {
  std::vector<std::vector<double>> out;
  for (const auto& g : map.grids) {
    std::vector<double> per;
    for (std::size_t b = 0; b < g.bands; ++b) {
      per.push_back(entropy_bits(std::span<const double>(g.values.data() + b * kEpochSeconds, kEpochSeconds)));
    }
    out.push_back(std::move(per));
  }
  return out;
}

// Mean over seconds per band.
inline std::vector<double> band_means(const RelevanceGrid& g) {
  std::vector<double> m(g.bands, 0.0);
  for (std::size_t b = 0; b < g.bands; ++b) {
    for (std::size_t t = 0; t < kEpochSeconds; ++t) m[b] += g.at(b, t);
    m[b] /= double(kEpochSeconds);
  }
  return m;
}

inline std::string band_label(std::size_t bands, std::size_t b) {
  return bands == kNumBands ? std::string(kBandNames[b]) : "all";
}

inline std::string relevance_csv(const RelevanceMap& map) {
  std::string s = "channel,band,second,value\n";
  char buf[64];
  for (const auto& g : map.grids)
    for (std::size_t b = 0; b < g.bands; ++b)
      for (std::size_t t = 0; t < kEpochSeconds; ++t) {
        std::snprintf(buf, sizeof buf, ",%zu,%.9g\n", t, g.at(b, t));
        s += std::to_string(g.channel) + "," + band_label(g.bands, b) + buf;
      }
  return s;
}

inline std::string entropy_csv(const RelevanceMap& map) {
  std::string s = "channel,band,entropy_bits\n";
  const auto h = band_entropy(map);
  char buf[64];
  for (std::size_t c = 0; c < h.size(); ++c)
    for (std::size_t b = 0; b < h[c].size(); ++b) {
      std::snprintf(buf, sizeof buf, ",%.9g\n", h[c][b]);
      s += std::to_string(map.grids[c].channel) + "," + band_label(map.grids[c].bands, b) + buf;
    }
  return s;
}

inline constexpr std::size_t kPgmScale = 16;

// 8-bit binary PGM, 30 columns (seconds) by one row per band, each cell a
// kPgmScale x kPgmScale block. Delta is the top row.
inline std::string relevance_pgm(const RelevanceGrid& g) {
  const std::size_t w = kEpochSeconds * kPgmScale, h = g.bands * kPgmScale;
  std::string s = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const double v = std::clamp(g.at(y / kPgmScale, x / kPgmScale), 0.0, 1.0);
      s.push_back(static_cast<char>(static_cast<std::uint8_t>(std::lround(v * 255.0))));
    }
  return s;
}

}  // namespace ftss
