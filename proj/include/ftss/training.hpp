#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <type_traits>
#include <string>
#include <vector>

#include "ftss/binary.hpp"
#include "ftss/errors.hpp"
#include "ftss/graph.hpp"
#include "ftss/kv.hpp"
#include "ftss/model.hpp"
#include "ftss/parallel.hpp"
#include "ftss/rng.hpp"

namespace ftss {

enum class Phase { kPretrain, kFinetune };

inline Phase parse_phase(std::string_view s) {
  if (s == "pretrain") return Phase::kPretrain;
  if (s == "finetune") return Phase::kFinetune;
  throw ConfigError("unknown phase '" + std::string(s) + "' (expected pretrain or finetune)");
}

inline std::string_view to_string(Phase p) { return p == Phase::kPretrain ? "pretrain" : "finetune"; }

struct TrainConfig {
  double lr_pretrain = 1e-3;
  double lr_finetune = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.01;
  std::size_t batch = 32;
  std::size_t max_epochs = 200;
  std::uint64_t seed = 0;
  std::vector<double> class_weights;  // empty: unweighted
  bool auto_class_weights = false;    // derive N/(K N_c) from the training labels
  std::size_t patience = 0;           // early stop on val accuracy; 0 = off
  double grad_clip = 0;               // global L2 norm; 0 = off
  std::size_t threads = 0;            // 0 = worker_count()

  double lr(Phase p) const { return p == Phase::kPretrain ? lr_pretrain : lr_finetune; }

  void validate() const {
    if (!(lr_pretrain >= 0) || !(lr_finetune >= 0)) throw ConfigError("learning rates must be >= 0");
    if (batch == 0) throw ConfigError("batch must be >= 1");
    if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) throw ConfigError("betas must be in [0, 1)");
    if (!(adam_eps > 0)) throw ConfigError("adam_eps must be positive");
    if (!(weight_decay >= 0)) throw ConfigError("weight_decay must be >= 0");
    if (!(grad_clip >= 0)) throw ConfigError("grad_clip must be >= 0");
    for (double w : class_weights)
      if (!(w > 0)) throw ConfigError("class weights must be positive");
  }
};

inline std::string format_weights(const std::vector<double>& w) {
  std::string s;
  for (std::size_t i = 0; i < w.size(); ++i) s += (i ? "," : "") + format_double(w[i]);
  return s;
}

inline KeyValues config_items(const TrainConfig& c) {
  return {{"lr_pretrain", format_double(c.lr_pretrain)},
          {"lr_finetune", format_double(c.lr_finetune)},
          {"beta1", format_double(c.beta1)},
          {"beta2", format_double(c.beta2)},
          {"adam_eps", format_double(c.adam_eps)},
          {"weight_decay", format_double(c.weight_decay)},
          {"batch", std::to_string(c.batch)},
          {"max_epochs", std::to_string(c.max_epochs)},
          {"seed", std::to_string(c.seed)},
          {"class_weights", c.auto_class_weights ? "auto"
                            : c.class_weights.empty() ? "none"
                                                      : format_weights(c.class_weights)},
          {"patience", std::to_string(c.patience)},
          {"grad_clip", format_double(c.grad_clip)}};
}

inline bool set_config_key(TrainConfig& c, std::string_view key, std::string_view value) {
  if (key == "lr_pretrain") c.lr_pretrain = parse_double(key, value);
  else if (key == "lr_finetune") c.lr_finetune = parse_double(key, value);
  else if (key == "beta1") c.beta1 = parse_double(key, value);
  else if (key == "beta2") c.beta2 = parse_double(key, value);
  else if (key == "adam_eps") c.adam_eps = parse_double(key, value);
  else if (key == "weight_decay") c.weight_decay = parse_double(key, value);
  else if (key == "batch") c.batch = parse_size(key, value);
  else if (key == "max_epochs") c.max_epochs = parse_size(key, value);
  else if (key == "seed") c.seed = parse_size(key, value);
  else if (key == "patience") c.patience = parse_size(key, value);
  else if (key == "grad_clip") c.grad_clip = parse_double(key, value);
  else if (key == "class_weights") {
    const auto v = trim(value);
    c.class_weights.clear();
    c.auto_class_weights = v == "auto";
    if (v != "auto" && v != "none" && !v.empty()) {
      std::size_t start = 0;
      while (start <= v.size()) {
        const auto comma = v.find(',', start);
        const auto part = v.substr(start, comma == std::string_view::npos ? v.npos : comma - start);
        c.class_weights.push_back(parse_double(key, part));
        if (comma == std::string_view::npos) break;
        start = comma + 1;
      }
    }
  } else {
    return false;
  }
  return true;
}

// One training or evaluation item: the patch sequence of an epoch and its stage.
struct Example {
  PatchSequence seq;
  std::size_t label = 0;
  std::size_t subject = 0;
  std::size_t index = 0;  // epoch index within the subject
};

// ---- losses ---------------------------------------------------------------

inline void check_label(std::size_t label, std::size_t n) {
  if (label >= n) {
    throw ContractError("label " + std::to_string(label) + " out of range for " +
                        std::to_string(n) + " classes");
  }
}

// -w[label] * log softmax(logits)[label].
inline double cross_entropy(std::span<const double> logits, std::size_t label,
                            std::span<const double> weights = {}) {
  check_label(label, logits.size());
  if (!weights.empty() && weights.size() != logits.size()) {
    throw ContractError("class weight vector has " + std::to_string(weights.size()) +
                        " entries for " + std::to_string(logits.size()) + " classes");
  }
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0;
  for (double v : logits) z += std::exp(v - mx);
  const double nll = std::log(z) + mx - logits[label];
  return weights.empty() ? nll : weights[label] * nll;
}

// Differentiable version on a 1 x K logit row; returns a 1-element node.
template <typename T>
Var<T> cross_entropy(Var<T> logits, std::size_t label, double weight = 1.0) {
  const Tensor<T>& z = logits.value();
  check_label(label, z.size());
  std::vector<double> zd(z.data().begin(), z.data().end());
  const double loss = cross_entropy(zd, label, std::span<const double>{}) * weight;
  const double mx = *std::max_element(zd.begin(), zd.end());
  double total = 0;
  for (double& v : zd) total += (v = std::exp(v - mx));
  auto probs = std::make_shared<std::vector<double>>(zd.size());
  for (std::size_t i = 0; i < zd.size(); ++i) (*probs)[i] = zd[i] / total;
  const std::size_t iz = logits.id;
  return logits.graph->record(
      Tensor<T>({1}, static_cast<T>(loss)), {iz},
      [iz, probs, label, weight](Graph<T>& g, std::size_t self) {
        const double d = double(g.incoming(self)[0]) * weight;
        auto& gz = g.grad_buffer(iz);
        for (std::size_t i = 0; i < probs->size(); ++i) {
          gz[i] += static_cast<T>(d * ((*probs)[i] - (i == label ? 1.0 : 0.0)));
        }
      });
}

// w_c = N / (K * N_c).
inline std::vector<double> class_weights(std::span<const std::size_t> counts) {
  std::size_t total = 0;
  for (std::size_t c = 0; c < counts.size(); ++c) {
    if (counts[c] == 0) throw ConfigError("class " + std::to_string(c) + " has no samples");
    total += counts[c];
  }
  std::vector<double> w(counts.size());
  for (std::size_t c = 0; c < counts.size(); ++c) {
    w[c] = double(total) / (double(counts.size()) * double(counts[c]));
  }
  return w;
}

// ---- AdamW ----------------------------------------------------------------

template <typename T>
struct OptimizerState {
  std::vector<Tensor<T>> m, v;
  std::uint64_t step = 0;   // optimizer steps taken
  std::uint64_t epoch = 0;  // training epochs completed

  OptimizerState() = default;
  template <typename Range>
  explicit OptimizerState(const Range& params) {
    for (const auto& p : params) {
      m.emplace_back(p->shape());
      v.emplace_back(p->shape());
    }
  }
};

template <typename T>
std::vector<Tensor<T>*> param_pointers(ModelParams<T>& p) {
  std::vector<Tensor<T>*> out;
  for_each_slot(p, [&](const std::string&, Tensor<T>& t) { out.push_back(&t); });
  return out;
}

template <typename T>
std::vector<const Tensor<T>*> param_pointers(const ModelParams<T>& p) {
  std::vector<const Tensor<T>*> out;
  for_each_slot(p, [&](const std::string&, const Tensor<T>& t) { out.push_back(&t); });
  return out;
}

template <typename T>
OptimizerState<T> make_optimizer(const ModelParams<T>& p) {
  return OptimizerState<T>(param_pointers(p));
}

// Decoupled decay (p -= lr*wd*p) then the bias-corrected Adam step.
template <typename T>
void adamw_step(std::span<Tensor<T>* const> params, std::span<const Tensor<T>> grads,
                OptimizerState<T>& st, double lr, const TrainConfig& cfg) {
  if (params.size() != grads.size() || st.m.size() != params.size()) {
    throw ShapeError("adamw_step: " + std::to_string(params.size()) + " params, " +
                     std::to_string(grads.size()) + " grads, " + std::to_string(st.m.size()) +
                     " moment slots");
  }
  ++st.step;
  const double t = double(st.step);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<T>& p = *params[i];
    const Tensor<T>& g = grads[i];
    if (g.shape() != p.shape()) {
      throw ShapeError("adamw_step: grad " + shape_str(g.shape()) + " vs param " + shape_str(p.shape()));
    }
    for (std::size_t e = 0; e < p.size(); ++e) {
      double pe = double(p[e]);
      const double ge = double(g[e]);
      pe -= lr * cfg.weight_decay * pe;
      const double m = cfg.beta1 * double(st.m[i][e]) + (1 - cfg.beta1) * ge;
      const double v = cfg.beta2 * double(st.v[i][e]) + (1 - cfg.beta2) * ge * ge;
      st.m[i][e] = static_cast<T>(m);
      st.v[i][e] = static_cast<T>(v);
      pe -= lr * (m / c1) / (std::sqrt(v / c2) + cfg.adam_eps);
      p[e] = static_cast<T>(pe);
    }
  }
}

template <typename T>
void adamw_step(ModelParams<T>& params, std::span<const Tensor<T>> grads, OptimizerState<T>& st,
                double lr, const TrainConfig& cfg) {
  const auto ptrs = param_pointers(params);
  adamw_step<T>(std::span<Tensor<T>* const>(ptrs), grads, st, lr, cfg);
}

// ---- subject-wise folds -----------------------------------------------------

// Distinct subjects are shuffled with the seed and dealt round-robin, so fold
// sizes differ by at most one.
inline std::vector<std::vector<std::size_t>> kfold_split(std::vector<std::size_t> subjects,
                                                         std::size_t k, std::uint64_t seed) {
  std::sort(subjects.begin(), subjects.end());
  subjects.erase(std::unique(subjects.begin(), subjects.end()), subjects.end());
  if (k == 0 || subjects.size() < k) {
    throw ConfigError(std::to_string(subjects.size()) + " subjects cannot fill " + std::to_string(k) +
                      " folds");
  }
  Rng rng = make_stream(seed, {tag_id("kfold")});
  shuffle(subjects, rng);
  std::vector<std::vector<std::size_t>> folds(k);
  for (std::size_t i = 0; i < subjects.size(); ++i) folds[i % k].push_back(subjects[i]);
  for (auto& f : folds) std::sort(f.begin(), f.end());
  return folds;
}

// Splits examples by subject membership in `held_out`.
inline std::pair<std::vector<Example>, std::vector<Example>> split_by_subjects(
    const std::vector<Example>& all, const std::vector<std::size_t>& held_out) {
  std::pair<std::vector<Example>, std::vector<Example>> out;
  for (const auto& e : all) {
    const bool test = std::find(held_out.begin(), held_out.end(), e.subject) != held_out.end();
    (test ? out.second : out.first).push_back(e);
  }
  return out;
}

// ---- fit --------------------------------------------------------------------

struct EpochLog {
  std::size_t epoch = 0;  // 1-based within the fit call
  Phase phase = Phase::kPretrain;
  double loss = 0;
  double train_acc = 0;
  std::optional<double> val_acc;
};

inline std::string training_log_header() { return "epoch,phase,loss,train_acc,val_acc\n"; }

inline std::string training_log_row(const EpochLog& e) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%zu,%s,%.8g,%.6f,", e.epoch, std::string(to_string(e.phase)).c_str(),
                e.loss, e.train_acc);
  std::string s = buf;
  if (e.val_acc) {
    std::snprintf(buf, sizeof buf, "%.6f", *e.val_acc);
    s += buf;
  }
  return s + "\n";
}

inline std::string training_log_csv(const std::vector<EpochLog>& log) {
  std::string s = training_log_header();
  for (const auto& e : log) s += training_log_row(e);
  return s;
}

struct FitResult {
  std::vector<EpochLog> log;
  std::size_t best_epoch = 0;  // epoch whose params were kept (early stopping)
  bool stopped_early = false;
};

template <typename T>
struct SampleGrad {
  std::vector<Tensor<T>> grads;
  double loss = 0;
  std::size_t predicted = 0;
};

// Forward + backward of the weighted loss for one example on its own graph.
template <typename T>
SampleGrad<T> sample_gradient(const Example& ex, const ModelParams<T>& params, double weight,
                              bool training, Rng& rng) {
  auto tr = forward(ex.seq, params, training, rng);
  const auto loss = cross_entropy(tr.logits, ex.label, weight);
  tr.graph->backward(loss);
  SampleGrad<T> out;
  out.loss = double(loss.value()[0]);
  out.predicted = argmax(tr.logit_values());
  for_each_slot(tr.params, [&](const std::string&, const Var<T>& v) { out.grads.push_back(tr.graph->grad(v)); });
  return out;
}

inline std::size_t resolve_threads(std::size_t requested) {
  return requested ? requested : worker_count();
}

template <typename T>
std::vector<std::vector<double>> predict_all(const std::vector<Example>& data, const ModelParams<T>& params,
                                             std::size_t threads = 0) {
  std::vector<std::vector<double>> out(data.size());
  parallel_for(data.size(), resolve_threads(threads),
               [&](std::size_t i) { out[i] = predict_logits(data[i].seq, params); });
  return out;
}

template <typename T>
std::vector<std::size_t> predict_labels(const std::vector<Example>& data, const ModelParams<T>& params,
                                        std::size_t threads = 0) {
  std::vector<std::size_t> out;
  for (const auto& z : predict_all(data, params, threads)) out.push_back(argmax(z));
  return out;
}

template <typename T>
double accuracy_on(const std::vector<Example>& data, const ModelParams<T>& params, std::size_t threads = 0) {
  if (data.empty()) return 0;
  const auto pred = predict_labels(data, params, threads);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < data.size(); ++i) hit += pred[i] == data[i].label;
  return double(hit) / double(data.size());
}

inline std::vector<std::size_t> label_counts(const std::vector<Example>& data, std::size_t n_classes) {
  std::vector<std::size_t> counts(n_classes, 0);
  for (const auto& e : data) {
    check_label(e.label, n_classes);
    ++counts[e.label];
  }
  return counts;
}

// Mini-batch training. Dropout and shuffling draw from streams keyed on
// (seed, optimizer step/epoch), and per-sample gradients are summed in batch
// order, so the result does not depend on the thread count and resumes
// exactly from a checkpointed OptimizerState.
template <typename T>
FitResult fit(const std::vector<Example>& train, const std::vector<Example>& val, ModelParams<T>& params,
              const TrainConfig& cfg, Phase phase, OptimizerState<T>& state,
              const std::function<void(const EpochLog&)>& on_epoch = {}) {
  cfg.validate();
  if (train.empty()) throw ConfigError("training set is empty");
  const std::size_t n_classes = params.config.n_classes;
  std::vector<double> weights = cfg.class_weights;
  if (cfg.auto_class_weights) weights = class_weights(label_counts(train, n_classes));
  if (!weights.empty() && weights.size() != n_classes) {
    throw ConfigError("class_weights has " + std::to_string(weights.size()) + " entries, expected " +
                      std::to_string(n_classes));
  }
  if (state.m.empty()) state = make_optimizer(params);
  const std::size_t threads = resolve_threads(cfg.threads);
  const double lr = cfg.lr(phase);

  FitResult result;
  std::optional<double> best_val;
  ModelParams<T> best_params;
  for (std::size_t e = 0; e < cfg.max_epochs; ++e) {
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffler = make_stream(cfg.seed, {tag_id("shuffle"), state.epoch});
    shuffle(order, shuffler);

    double loss_sum = 0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
      const std::size_t n = std::min(cfg.batch, order.size() - start);
      std::vector<SampleGrad<T>> per(n);
      const std::uint64_t step = state.step;
      parallel_for(n, threads, [&](std::size_t i) {
        const Example& ex = train[order[start + i]];
        Rng rng = make_stream(cfg.seed, {tag_id("dropout"), step, i});
        check_label(ex.label, n_classes);
        const double w = weights.empty() ? 1.0 : weights[ex.label];
        per[i] = sample_gradient(ex, params, w, true, rng);
      });
      std::vector<Tensor<T>> grads = std::move(per[0].grads);
      for (std::size_t i = 1; i < n; ++i)
        for (std::size_t k = 0; k < grads.size(); ++k)
          for (std::size_t j = 0; j < grads[k].size(); ++j) grads[k][j] += per[i].grads[k][j];
      const T inv = static_cast<T>(1.0 / double(n));
      double norm2 = 0;
      for (auto& g : grads)
        for (auto& v : g.data()) {
          v *= inv;
          norm2 += double(v) * double(v);
        }
      double batch_loss = 0;
      for (std::size_t i = 0; i < n; ++i) {
        batch_loss += per[i].loss;
        correct += per[i].predicted == train[order[start + i]].label;
      }
      if (!std::isfinite(batch_loss) || !std::isfinite(norm2)) {
        throw NumericError("non-finite loss or gradient at optimizer step " + std::to_string(state.step + 1) +
                           " (phase " + std::string(to_string(phase)) + ", epoch " + std::to_string(e + 1) + ")");
      }
      loss_sum += batch_loss;
      if (cfg.grad_clip > 0 && norm2 > cfg.grad_clip * cfg.grad_clip) {
        const T s = static_cast<T>(cfg.grad_clip / std::sqrt(norm2));
        for (auto& g : grads)
          for (auto& v : g.data()) v *= s;
      }
      adamw_step(params, std::span<const Tensor<T>>(grads), state, lr, cfg);
    }
    ++state.epoch;

    EpochLog row;
    row.epoch = e + 1;
    row.phase = phase;
    row.loss = loss_sum / double(train.size());
    row.train_acc = double(correct) / double(train.size());
    if (!val.empty()) row.val_acc = accuracy_on(val, params, threads);
    result.log.push_back(row);
    if (on_epoch) on_epoch(row);

    if (cfg.patience > 0 && row.val_acc) {
      if (!best_val || *row.val_acc > *best_val) {
        best_val = row.val_acc;
        best_params = params;
        result.best_epoch = row.epoch;
      } else if (row.epoch - result.best_epoch >= cfg.patience) {
        result.stopped_early = true;
        break;
      }
    }
  }
  if (best_val) params = best_params;
  else result.best_epoch = result.log.size();
  return result;
}

template <typename T>
FitResult fit(const std::vector<Example>& train, const std::vector<Example>& val, ModelParams<T>& params,
              const TrainConfig& cfg, Phase phase) {
  OptimizerState<T> state;
  return fit(train, val, params, cfg, phase, state);
}

// ---- checkpoints --------------------------------------------------------------

inline constexpr char kCheckpointMagic[4] = {'F', 'T', 'S', 'S'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
struct Checkpoint {
  ModelParams<T> params;
  std::optional<OptimizerState<T>> optimizer;
  KeyValues meta;  // config-block entries that are not model keys

  std::optional<std::string> get(std::string_view key) const {
    for (const auto& [k, v] : meta)
      if (k == key) return v;
    return std::nullopt;
  }
};

template <typename T>
constexpr std::uint8_t dtype_tag() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? 0 : 1;
}

namespace detail {

template <typename T>
void write_tensor(ByteWriter& w, const std::string& name, const Tensor<T>& t) {
  w.str(name);
  w.u8(dtype_tag<T>());
  w.u32(static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape()) w.u64(d);
  for (T v : t.data()) {
    if constexpr (std::is_same_v<T, float>) w.f32(v);
    else w.f64(v);
  }
}

struct RawTensor {
  std::uint8_t dtype = 0;
  Shape shape;
  std::vector<double> values;
  std::size_t offset = 0;
};

}  // namespace detail

template <typename T>
std::string serialize_checkpoint(const ModelParams<T>& params,
                                 const std::type_identity_t<OptimizerState<T>>* opt = nullptr,
                                 const KeyValues& extra = {}) {
  KeyValues cfg = config_items(params.config);
  cfg.emplace_back("dtype", std::is_same_v<T, float> ? "f32" : "f64");
  if (opt) {
    cfg.emplace_back("optimizer.step", std::to_string(opt->step));
    cfg.emplace_back("optimizer.epoch", std::to_string(opt->epoch));
  }
  for (const auto& kv : extra) cfg.push_back(kv);

  ByteWriter w;
  w.bytes(std::string_view(kCheckpointMagic, 4));
  w.u32(kCheckpointVersion);
  w.str(format_key_values(cfg));
  std::size_t count = 0;
  for_each_slot(params, [&](const std::string&, const Tensor<T>&) { ++count; });
  w.u32(static_cast<std::uint32_t>(opt ? 3 * count : count));
  for_each_slot(params, [&](const std::string& name, const Tensor<T>& t) { detail::write_tensor(w, name, t); });
  if (opt) {
    std::size_t i = 0;
    for_each_slot(params, [&](const std::string& name, const Tensor<T>&) {
      detail::write_tensor(w, "adam.m." + name, opt->m[i]);
      detail::write_tensor(w, "adam.v." + name, opt->v[i]);
      ++i;
    });
  }
  return w.take();
}

template <typename T>
Checkpoint<T> parse_checkpoint(std::string_view bytes) {
  ByteReader r(bytes);
  if (bytes.size() < 4 || bytes.substr(0, 4) != std::string_view(kCheckpointMagic, 4)) {
    throw ParseError("bad magic: not an FTSS checkpoint", 0);
  }
  r.bytes(4, "magic");
  const std::size_t version_at = r.offset();
  const std::uint32_t version = r.u32("version");
  if (version != kCheckpointVersion) {
    throw ParseError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                         std::to_string(kCheckpointVersion) + ")",
                     version_at);
  }
  const std::size_t cfg_at = r.offset();
  const std::string cfg_text = r.str("config block");

  Checkpoint<T> ck;
  ModelConfig mc;
  std::optional<std::uint64_t> opt_step, opt_epoch;
  try {
    for (const auto& [k, v] : parse_key_values(cfg_text)) {
      if (set_config_key(mc, k, v)) continue;
      if (k == "optimizer.step") opt_step = parse_size(k, v);
      else if (k == "optimizer.epoch") opt_epoch = parse_size(k, v);
      else ck.meta.emplace_back(k, v);
    }
    mc.validate();
  } catch (const ConfigError& e) {
    throw ParseError(std::string("bad config block: ") + e.what(), cfg_at);
  } catch (const ParseError& e) {
    throw ParseError(std::string("bad config block: ") + e.what(), cfg_at);
  }

  const std::uint32_t count = r.u32("tensor count");
  std::map<std::string, detail::RawTensor> tensors;
  for (std::uint32_t i = 0; i < count; ++i) {
    detail::RawTensor raw;
    raw.offset = r.offset();
    const std::string name = r.str("tensor name");
    raw.dtype = r.u8("dtype tag");
    if (raw.dtype > 1) throw ParseError("unknown dtype tag " + std::to_string(raw.dtype) + " for '" + name + "'", r.offset() - 1);
    const std::uint32_t rank = r.u32("tensor rank");
    std::uint64_t n = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      const std::uint64_t dim = r.u64("tensor dims");
      raw.shape.push_back(static_cast<std::size_t>(dim));
      n *= dim;
    }
    const std::size_t width = raw.dtype == 0 ? 4 : 8;
    const std::uint64_t expected = n * width;
    if (r.remaining() < expected) {
      throw ParseError("truncated tensor payload for '" + name + "': expected " + std::to_string(expected) +
                           " bytes, got " + std::to_string(r.remaining()),
                       r.offset());
    }
    raw.values.resize(static_cast<std::size_t>(n));
    for (auto& v : raw.values) v = raw.dtype == 0 ? double(r.f32("payload")) : r.f64("payload");
    if (!tensors.emplace(name, std::move(raw)).second) {
      throw ParseError("duplicate tensor '" + name + "'", tensors.at(name).offset);
    }
  }
  if (r.remaining() != 0) {
    throw ParseError(std::to_string(r.remaining()) + " trailing bytes after the last tensor", r.offset());
  }

  // Shapes come from the config; values from the file.
  Rng unused(0);
  ck.params = init_params<T>(mc, unused);
  auto take = [&](const std::string& name, Tensor<T>& dst) {
    const auto it = tensors.find(name);
    if (it == tensors.end()) throw ParseError("missing tensor '" + name + "'", bytes.size());
    const auto& raw = it->second;
    if (raw.shape != dst.shape()) {
      throw ParseError("tensor '" + name + "' has shape " + shape_str(raw.shape) + ", config implies " +
                           shape_str(dst.shape()),
                       raw.offset);
    }
    for (std::size_t e = 0; e < raw.values.size(); ++e) dst[e] = static_cast<T>(raw.values[e]);
  };
  for_each_slot(ck.params, [&](const std::string& name, Tensor<T>& t) { take(name, t); });
  if (tensors.count("adam.m.patch.weight")) {
    OptimizerState<T> st = make_optimizer(ck.params);
    std::size_t i = 0;
    for_each_slot(ck.params, [&](const std::string& name, const Tensor<T>&) {
      take("adam.m." + name, st.m[i]);
      take("adam.v." + name, st.v[i]);
      ++i;
    });
    st.step = opt_step.value_or(0);
    st.epoch = opt_epoch.value_or(0);
    ck.optimizer = std::move(st);
  }
  return ck;
}

template <typename T>
void save_checkpoint(const std::string& path, const ModelParams<T>& params,
                     const std::type_identity_t<OptimizerState<T>>* opt = nullptr, const KeyValues& extra = {}) {
  write_file(path, serialize_checkpoint(params, opt, extra));
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::string& path) {
  return parse_checkpoint<T>(read_file(path));
}

}  // namespace ftss
