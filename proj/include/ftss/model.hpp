#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <memory>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "ftss/errors.hpp"
#include "ftss/graph.hpp"
#include "ftss/kv.hpp"
#include "ftss/patching.hpp"
#include "ftss/tensor.hpp"

namespace ftss {

inline constexpr std::size_t kNumStages = 5;

struct ModelConfig {
  std::size_t blocks = 8;
  std::size_t heads = 8;
  std::size_t dim = 32;
  double attn_scale = 4.0;  // logits are Q K^T / attn_scale
  std::size_t mlp_dim = 128;
  double dropout = 0.5;
  std::size_t n_classes = kNumStages;
  PatchMode patch_mode = PatchMode::kConcatSequence;
  std::size_t channels = 2;
  std::size_t patch_dim = 4;
  std::size_t seq_len = 300;

  // Derives patch_dim and seq_len from the patch mode and channel count.
  void set_input(PatchMode mode, std::size_t n_channels) {
    patch_mode = mode;
    channels = n_channels;
    patch_dim = patch_dimension(mode, n_channels);
    seq_len = sequence_length(mode, n_channels);
  }

  std::size_t head_dim() const { return dim / heads; }

  void validate() const {
    if (dim == 0 || heads == 0 || mlp_dim == 0 || n_classes == 0 ||
        patch_dim == 0 || seq_len == 0) {
      throw ConfigError("model dimensions must be positive");
    }
    if (dim % heads != 0) {
      throw ConfigError("embedding dim " + std::to_string(dim) +
                        " is not divisible by " + std::to_string(heads) + " heads");
    }
    if (!(attn_scale > 0)) throw ConfigError("attn_scale must be positive");
    if (!(dropout >= 0 && dropout < 1)) throw ConfigError("dropout must be in [0, 1)");
  }
};

// Flat key=value form used by run configs and checkpoints. patch_mode and
// channels reset patch_dim and seq_len; explicit values after them win.
inline KeyValues config_items(const ModelConfig& c) {
  return {{"blocks", std::to_string(c.blocks)},
          {"heads", std::to_string(c.heads)},
          {"dim", std::to_string(c.dim)},
          {"attn_scale", format_double(c.attn_scale)},
          {"mlp_dim", std::to_string(c.mlp_dim)},
          {"dropout", format_double(c.dropout)},
          {"n_classes", std::to_string(c.n_classes)},
          {"patch_mode", std::string(to_string(c.patch_mode))},
          {"channels", std::to_string(c.channels)},
          {"patch_dim", std::to_string(c.patch_dim)},
          {"seq_len", std::to_string(c.seq_len)}};
}

// Returns false for keys that are not model keys.
inline bool set_config_key(ModelConfig& c, std::string_view key, std::string_view value) {
  if (key == "blocks") c.blocks = parse_size(key, value);
  else if (key == "heads") c.heads = parse_size(key, value);
  else if (key == "dim") c.dim = parse_size(key, value);
  else if (key == "attn_scale") c.attn_scale = parse_double(key, value);
  else if (key == "mlp_dim") c.mlp_dim = parse_size(key, value);
  else if (key == "dropout") c.dropout = parse_double(key, value);
  else if (key == "n_classes") c.n_classes = parse_size(key, value);
  else if (key == "patch_mode") c.set_input(parse_patch_mode(trim(value)), c.channels);
  else if (key == "channels") c.set_input(c.patch_mode, parse_size(key, value));
  else if (key == "patch_dim") c.patch_dim = parse_size(key, value);
  else if (key == "seq_len") c.seq_len = parse_size(key, value);
  else return false;
  return true;
}

// Parameter layout shared by stored tensors (S = Tensor<T>) and their graph
// leaves (S = Var<T>).
template <typename S>
struct AttentionSlots {
  S q_w, q_b, k_w, k_b, v_w, v_b, o_w, o_b;
};

template <typename S>
struct BlockSlots {
  S ln1_gamma, ln1_beta;
  AttentionSlots<S> attn;
  S ln2_gamma, ln2_beta;
  S fc1_w, fc1_b, fc2_w, fc2_b;
};

template <typename S>
struct ModelSlots {
  S patch_w, patch_b;   // D_p x D, D
  S cls_token;          // 1 x D
  S pos_embed;          // (L+1) x D
  std::vector<BlockSlots<S>> blocks;
  S final_gamma, final_beta;
  S head_w, head_b;     // D x n_classes, n_classes
};

// Visits every slot in the canonical order used by checkpoints, optimizer
// state and gradient vectors. Works on const and non-const slots.
template <typename Slots, typename F>
void for_each_slot(Slots& m, F&& f) {
  f("patch.weight", m.patch_w);
  f("patch.bias", m.patch_b);
  f("cls_token", m.cls_token);
  f("pos_embed", m.pos_embed);
  for (std::size_t b = 0; b < m.blocks.size(); ++b) {
    auto& blk = m.blocks[b];
    const std::string p = "blocks." + std::to_string(b) + ".";
    f(p + "ln1.gamma", blk.ln1_gamma);
    f(p + "ln1.beta", blk.ln1_beta);
    f(p + "attn.q.weight", blk.attn.q_w);
    f(p + "attn.q.bias", blk.attn.q_b);
    f(p + "attn.k.weight", blk.attn.k_w);
    f(p + "attn.k.bias", blk.attn.k_b);
    f(p + "attn.v.weight", blk.attn.v_w);
    f(p + "attn.v.bias", blk.attn.v_b);
    f(p + "attn.o.weight", blk.attn.o_w);
    f(p + "attn.o.bias", blk.attn.o_b);
    f(p + "ln2.gamma", blk.ln2_gamma);
    f(p + "ln2.beta", blk.ln2_beta);
    f(p + "mlp.fc1.weight", blk.fc1_w);
    f(p + "mlp.fc1.bias", blk.fc1_b);
    f(p + "mlp.fc2.weight", blk.fc2_w);
    f(p + "mlp.fc2.bias", blk.fc2_b);
  }
  f("final_ln.gamma", m.final_gamma);
  f("final_ln.beta", m.final_beta);
  f("head.weight", m.head_w);
  f("head.bias", m.head_b);
}

template <typename T>
struct ModelParams : ModelSlots<Tensor<T>> {
  ModelConfig config;
};

// Closed form of the number of scalars in ModelParams.
inline std::size_t param_count(const ModelConfig& c) {
  const std::size_t d = c.dim, m = c.mlp_dim;
  const std::size_t embed = c.patch_dim * d + d + d + (c.seq_len + 1) * d;
  const std::size_t block = 4 * (d * d + d) + 4 * d + (d * m + m) + (m * d + d);
  const std::size_t head = 2 * d + d * c.n_classes + c.n_classes;
  return embed + c.blocks * block + head;
}

template <typename T>
std::size_t param_count(const ModelParams<T>& p) {
  std::size_t n = 0;
  for_each_slot(p, [&](const std::string&, const Tensor<T>& t) { n += t.size(); });
  return n;
}

namespace detail {

template <typename T>
Tensor<T> trunc_normal(Shape shape, double std, Rng& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) {
    double z = dist(rng);
    while (std::abs(z) > 2.0) z = dist(rng);
    v = static_cast<T>(z * std);
  }
  return t;
}

}  // namespace detail

// Weights, class token and positional table ~ N(0, 0.02^2) truncated at two
// standard deviations; biases zero; layernorm gamma one, beta zero.
template <typename T>
ModelParams<T> init_params(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  constexpr double kStd = 0.02;
  const std::size_t d = cfg.dim, m = cfg.mlp_dim;
  auto w = [&](std::size_t r, std::size_t c) { return detail::trunc_normal<T>({r, c}, kStd, rng); };
  auto zeros = [](std::size_t n) { return Tensor<T>({n}); };
  auto ones = [](std::size_t n) { return Tensor<T>({n}, T{1}); };

  ModelParams<T> p;
  p.config = cfg;
  p.patch_w = w(cfg.patch_dim, d);
  p.patch_b = zeros(d);
  p.cls_token = w(1, d);
  p.pos_embed = w(cfg.seq_len + 1, d);
  for (std::size_t b = 0; b < cfg.blocks; ++b) {
    BlockSlots<Tensor<T>> blk;
    blk.ln1_gamma = ones(d);
    blk.ln1_beta = zeros(d);
    blk.attn.q_w = w(d, d);
    blk.attn.q_b = zeros(d);
    blk.attn.k_w = w(d, d);
    blk.attn.k_b = zeros(d);
    blk.attn.v_w = w(d, d);
    blk.attn.v_b = zeros(d);
    blk.attn.o_w = w(d, d);
    blk.attn.o_b = zeros(d);
    blk.ln2_gamma = ones(d);
    blk.ln2_beta = zeros(d);
    blk.fc1_w = w(d, m);
    blk.fc1_b = zeros(m);
    blk.fc2_w = w(m, d);
    blk.fc2_b = zeros(d);
    p.blocks.push_back(std::move(blk));
  }
  p.final_gamma = ones(d);
  p.final_beta = zeros(d);
  p.head_w = w(d, cfg.n_classes);
  p.head_b = zeros(cfg.n_classes);
  return p;
}

// Graph leaves for every parameter, in for_each_slot order.
template <typename T>
ModelSlots<Var<T>> bind_params(Graph<T>& g, const ModelParams<T>& p, bool trainable = true) {
  ModelSlots<Var<T>> out;
  out.blocks.resize(p.blocks.size());
  std::vector<Var<T>> leaves;
  for_each_slot(p, [&](const std::string&, const Tensor<T>& t) {
    leaves.push_back(trainable ? g.parameter(t) : g.constant(t));
  });
  std::size_t i = 0;
  for_each_slot(out, [&](const std::string&, Var<T>& v) { v = leaves[i++]; });
  return out;
}

// Activations of one encoder block kept for gradient and relevance queries.
template <typename T>
struct BlockTrace {
  Var<T> input, ln1, q, k, v;
  std::vector<Var<T>> scores;    // per head, Q K^T / scale
  std::vector<Var<T>> attn;      // per head, W_A = softmax(scores)
  std::vector<Var<T>> head_out;  // per head, W_A V
  Var<T> concat, attn_out, x1, ln2, fc1, act, fc2, output;
};

template <typename T>
struct ForwardTrace {
  std::unique_ptr<Graph<T>> graph;
  ModelConfig config;
  ModelSlots<Var<T>> params;
  Var<T> patches, embedded;
  std::vector<BlockTrace<T>> blocks;
  Var<T> cls, cls_norm, logits;

  std::vector<double> logit_values() const {
    const auto& v = logits.value();
    return std::vector<double>(v.data().begin(), v.data().end());
  }
};

// Key summation order that depends only on key/value row contents, so the
// attention result for a query is unchanged when tokens are permuted.
template <typename T>
std::vector<std::size_t> canonical_key_order(const Tensor<T>& k, const Tensor<T>& v) {
  std::vector<std::size_t> order(k.rows());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const std::size_t kc = k.cols(), vc = v.cols();
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    for (std::size_t c = 0; c < kc; ++c) {
      if (k[a * kc + c] != k[b * kc + c]) return k[a * kc + c] < k[b * kc + c];
    }
    for (std::size_t c = 0; c < vc; ++c) {
      if (v[a * vc + c] != v[b * vc + c]) return v[a * vc + c] < v[b * vc + c];
    }
    return false;
  });
  return order;
}

// Multi-head self-attention on already-normalized input x ((L+1) x D).
// Returns the output projection; fills `trace` when given.
template <typename T>
Var<T> attention(Var<T> x, const AttentionSlots<Var<T>>& p, const ModelConfig& cfg,
                 Rng& rng, bool training, BlockTrace<T>* trace = nullptr) {
  const Var<T> q = linear(x, p.q_w, p.q_b);
  const Var<T> k = linear(x, p.k_w, p.k_b);
  const Var<T> v = linear(x, p.v_w, p.v_b);
  const std::size_t dh = cfg.head_dim();
  const T inv_scale = static_cast<T>(1.0 / cfg.attn_scale);

  std::vector<Var<T>> heads;
  for (std::size_t h = 0; h < cfg.heads; ++h) {
    const Var<T> qh = slice_cols(q, h * dh, dh);
    const Var<T> kh = slice_cols(k, h * dh, dh);
    const Var<T> vh = slice_cols(v, h * dh, dh);
    const auto order = canonical_key_order(kh.value(), vh.value());
    const Var<T> scores = matmul_nt(qh, kh, inv_scale);
    const Var<T> wa = softmax(scores, 1, order);
    const Var<T> out = matmul(wa, vh, order);
    heads.push_back(out);
    if (trace) {
      trace->scores.push_back(scores);
      trace->attn.push_back(wa);
      trace->head_out.push_back(out);
    }
  }
  const Var<T> concat = heads.size() == 1 ? heads.front() : concat_cols(heads);
  const Var<T> dropped = dropout(concat, cfg.dropout, rng, training);
  const Var<T> out = dropout(linear(dropped, p.o_w, p.o_b), cfg.dropout, rng, training);
  if (trace) {
    trace->q = q;
    trace->k = k;
    trace->v = v;
    trace->concat = concat;
    trace->attn_out = out;
  }
  return out;
}

// Pre-norm block: x1 = x + Attn(LN(x)); out = x1 + MLP(LN(x1)).
template <typename T>
Var<T> encoder_block(Var<T> x, const BlockSlots<Var<T>>& p, const ModelConfig& cfg,
                     Rng& rng, bool training, BlockTrace<T>* trace = nullptr) {
  const Var<T> ln1 = layernorm(x, p.ln1_gamma, p.ln1_beta);
  const Var<T> a = attention(ln1, p.attn, cfg, rng, training, trace);
  const Var<T> x1 = add(x, a);
  const Var<T> ln2 = layernorm(x1, p.ln2_gamma, p.ln2_beta);
  const Var<T> fc1 = linear(ln2, p.fc1_w, p.fc1_b);
  const Var<T> act = dropout(gelu(fc1), cfg.dropout, rng, training);
  const Var<T> fc2 = dropout(linear(act, p.fc2_w, p.fc2_b), cfg.dropout, rng, training);
  const Var<T> out = add(x1, fc2);
  if (trace) {
    trace->input = x;
    trace->ln1 = ln1;
    trace->x1 = x1;
    trace->ln2 = ln2;
    trace->fc1 = fc1;
    trace->act = act;
    trace->fc2 = fc2;
    trace->output = out;
  }
  return out;
}

template <typename T>
void check_sequence(const PatchSequence& seq, const ModelConfig& cfg) {
  if (seq.length != cfg.seq_len || seq.patch_dim != cfg.patch_dim) {
    throw ShapeError("patch sequence is " + std::to_string(seq.length) + "x" +
                     std::to_string(seq.patch_dim) + " but the model expects " +
                     std::to_string(cfg.seq_len) + "x" + std::to_string(cfg.patch_dim));
  }
}

// X = [cls; patches * E + b] + pos.
template <typename T>
Var<T> embed(Var<T> patches, const ModelSlots<Var<T>>& p, const ModelConfig& cfg,
             Rng& rng, bool training) {
  const Var<T> projected = dropout(linear(patches, p.patch_w, p.patch_b), cfg.dropout, rng, training);
  return add(concat_rows<T>({p.cls_token, projected}), p.pos_embed);
}

template <typename T>
Tensor<T> patch_tensor(const PatchSequence& seq) {
  return Tensor<T>({seq.length, seq.patch_dim},
                   std::vector<T>(seq.patches.begin(), seq.patches.end()));
}

// Full forward pass on a fresh graph: embed, encoder blocks, layernorm on the
// class token, linear head. The trace keeps every attention map.
template <typename T>
ForwardTrace<T> forward(const PatchSequence& seq, const ModelParams<T>& params,
                        bool training, Rng& rng, bool trainable = true) {
  const ModelConfig& cfg = params.config;
  check_sequence<T>(seq, cfg);
  ForwardTrace<T> tr;
  tr.graph = std::make_unique<Graph<T>>();
  Graph<T>& g = *tr.graph;
  tr.config = cfg;
  tr.params = bind_params(g, params, trainable);
  tr.patches = g.constant(patch_tensor<T>(seq));
  tr.embedded = embed(tr.patches, tr.params, cfg, rng, training);
  Var<T> x = tr.embedded;
  tr.blocks.resize(cfg.blocks);
  for (std::size_t b = 0; b < cfg.blocks; ++b) {
    x = encoder_block(x, tr.params.blocks[b], cfg, rng, training, &tr.blocks[b]);
  }
  tr.cls = slice_rows(x, 0, 1);
  tr.cls_norm = layernorm(tr.cls, tr.params.final_gamma, tr.params.final_beta);
  tr.logits = linear(tr.cls_norm, tr.params.head_w, tr.params.head_b);
  return tr;
}

// Inference-mode logits.
template <typename T>
std::vector<double> predict_logits(const PatchSequence& seq, const ModelParams<T>& params) {
  Rng unused(0);
  return forward(seq, params, false, unused, false).logit_values();
}

inline std::size_t argmax(const std::vector<double>& v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

}  // namespace ftss
