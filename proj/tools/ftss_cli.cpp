// ftss: synth | train | eval | explain | stage
#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>

#include "ftss/config.hpp"
#include "ftss/edf.hpp"
#include "ftss/metrics.hpp"
#include "ftss/relevance.hpp"

namespace fs = std::filesystem;
using namespace ftss;

namespace {

constexpr int kExitInput = 2;
constexpr int kExitNumeric = 3;

// Config flags shared by every command. Applied after parsing: --config file
// first, then --set pairs, then dedicated flags.
struct CommonFlags {
  std::string config_file;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;

  void add(CLI::App* cmd) {
    cmd->add_option("--config", config_file, "key=value run config file");
    cmd->add_option("--set", sets, "override one config key (key=value), repeatable");
    cmd->add_option("--seed", seed, "master seed");
  }

  RunConfig load() const {
    RunConfig cfg;
    if (!config_file.empty()) cfg.merge_file(config_file);
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
      cfg.set(s.substr(0, eq), s.substr(eq + 1));
    }
    if (seed) cfg.set("seed", std::to_string(*seed));
    return cfg;
  }
};

void make_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError("cannot create directory '" + dir.string() + "'");
}

void echo_config(const fs::path& dir, const RunConfig& cfg) { write_file((dir / "run.cfg").string(), cfg.text()); }

// A directory written by `synth` or a single epoch CSV.
std::vector<LabeledEpoch> load_data(const std::string& path) {
  if (path.empty()) throw ConfigError("--data is required");
  return load_csv_epochs(fs::is_directory(path) ? (fs::path(path) / "epochs.csv").string() : path);
}

std::vector<std::size_t> subjects_of(const std::vector<Example>& ex) {
  std::vector<std::size_t> s;
  for (const auto& e : ex) s.push_back(e.subject);
  std::sort(s.begin(), s.end());
  s.erase(std::unique(s.begin(), s.end()), s.end());
  return s;
}

// Filter settings stored with a checkpoint apply unless set explicitly.
void adopt_checkpoint_meta(RunConfig& cfg, const Checkpoint<float>& ck) {
  for (const char* key : {"filter.low", "filter.high", "filter.order"}) {
    if (const auto v = ck.get(key); v && !cfg.was_set(key)) {
      cfg.set(key, *v);
      cfg.explicit_keys.erase(key);
    }
  }
}

Checkpoint<float> open_checkpoint(RunConfig& cfg, const std::string& path) {
  if (path.empty()) throw ConfigError("--checkpoint is required");
  auto ck = load_checkpoint<float>(path);
  adopt_checkpoint_meta(cfg, ck);
  cfg.model = ck.params.config;
  return ck;
}

void check_channels(const ModelConfig& m, std::size_t channels) {
  if (m.channels != channels) {
    throw ConfigError("model expects " + std::to_string(m.channels) + " channels, input has " +
                      std::to_string(channels));
  }
}

// ---- synth ------------------------------------------------------------------

struct SynthArgs {
  CommonFlags common;
  std::string out;
  std::optional<std::size_t> per_class;
  std::string preset = "balanced";
  std::size_t total = 1000;
};

int cmd_synth(const SynthArgs& a) {
  RunConfig cfg = a.common.load();
  if (!a.out.empty()) cfg.set("out", a.out);
  if (cfg.out.empty()) throw ConfigError("--out is required");
  cfg.resolve();
  cfg.validate();
  StageCounts counts{};
  if (a.per_class) counts = balanced_counts(*a.per_class);
  else if (a.preset == "imbalanced") counts = imbalanced_counts(a.total);
  else if (a.preset == "balanced") counts = balanced_counts(a.total / kStages);
  else throw ConfigError("unknown preset '" + a.preset + "' (expected balanced or imbalanced)");

  const auto epochs = make_dataset(counts, cfg.synth);
  const fs::path dir(cfg.out);
  make_dir(dir);
  const auto file = write_epochs_csv(epochs, "epochs.csv");
  write_file((dir / "epochs.csv").string(), file.csv);
  write_file((dir / "manifest.csv").string(), manifest_csv(file.manifest));
  echo_config(dir, cfg);
  std::printf("wrote %zu epochs (W %zu, N1 %zu, N2 %zu, N3 %zu, REM %zu) to %s\n", epochs.size(), counts[0],
              counts[1], counts[2], counts[3], counts[4], dir.string().c_str());
  return 0;
}

// ---- train ------------------------------------------------------------------

struct TrainArgs {
  CommonFlags common;
  std::string data, phase = "pretrain", init, out;
  std::optional<std::size_t> epochs;
};

int cmd_train(const TrainArgs& a) {
  RunConfig cfg = a.common.load();
  if (!a.data.empty()) cfg.set("data", a.data);
  if (!a.out.empty()) cfg.set("out", a.out);
  if (!a.init.empty()) cfg.set("init", a.init);
  if (a.epochs) cfg.set("max_epochs", std::to_string(*a.epochs));
  const Phase phase = parse_phase(a.phase);
  if (cfg.out.empty()) throw ConfigError("--out is required");
  if (phase == Phase::kFinetune && cfg.init.empty()) throw ConfigError("finetune requires --init <checkpoint>");

  ModelParams<float> params;
  const auto raw = load_data(cfg.data);
  const std::size_t channels = raw.front().signal.n_channels();
  if (!cfg.init.empty()) {
    auto ck = load_checkpoint<float>(cfg.init);
    adopt_checkpoint_meta(cfg, ck);
    const ModelConfig stored = ck.params.config;
    ModelConfig merged = stored;
    for (const auto& [k, v] : config_items(cfg.model))
      if (cfg.was_set(k)) set_config_key(merged, k, v);
    if (param_count(merged) != param_count(stored) || merged.blocks != stored.blocks ||
        merged.heads != stored.heads || merged.dim != stored.dim || merged.mlp_dim != stored.mlp_dim ||
        merged.seq_len != stored.seq_len || merged.patch_dim != stored.patch_dim) {
      throw ConfigError("config changes the architecture of the --init checkpoint");
    }
    params = std::move(ck.params);
    params.config = merged;
    cfg.model = merged;
  } else {
    cfg.model.set_input(cfg.model.patch_mode, channels);
  }
  cfg.resolve();
  cfg.validate();
  check_channels(cfg.model, channels);
  if (cfg.init.empty()) {
    Rng rng = make_stream(cfg.seed, {tag_id("init")});
    params = init_params<float>(cfg.model, rng);
  }

  const auto all = to_examples(raw, cfg.model.patch_mode, 0, cfg.filter);
  std::vector<Example> train = all, val;
  const auto subjects = subjects_of(all);
  if (cfg.folds >= 2 && subjects.size() >= cfg.folds) {
    const auto folds = kfold_split(subjects, cfg.folds, cfg.seed);
    std::tie(train, val) = split_by_subjects(all, folds[cfg.val_fold]);
  } else if (cfg.folds >= 2) {
    std::fprintf(stderr, "note: %zu subjects < %zu folds, training without a validation split\n",
                 subjects.size(), cfg.folds);
  }

  const fs::path dir(cfg.out);
  make_dir(dir);
  echo_config(dir, cfg);
  std::printf("phase %s lr %g: %zu train / %zu val epochs, %zu parameters\n",
              std::string(to_string(phase)).c_str(), cfg.train.lr(phase), train.size(), val.size(),
              param_count(params));
  OptimizerState<float> state;
  const auto result = fit(train, val, params, cfg.train, phase, state, [](const EpochLog& row) {
    std::printf("%s", training_log_row(row).c_str());
    std::fflush(stdout);
  });
  write_file((dir / "train_log.csv").string(), training_log_csv(result.log));
  KeyValues extra = filter_items(cfg.filter);
  extra.emplace_back("phase", std::string(to_string(phase)));
  extra.emplace_back("seed", std::to_string(cfg.seed));
  save_checkpoint((dir / "model.ftss").string(), params, &state, extra);

  const auto& report = val.empty() ? train : val;
  std::vector<std::size_t> truth;
  for (const auto& e : report) truth.push_back(e.label);
  const auto cm = confusion(truth, predict_labels(report, params));
  const auto k = cohen_kappa(cm);
  std::printf("final %s accuracy %.4f kappa %.4f%s\n", val.empty() ? "train" : "val", accuracy(cm), k.value,
              k.undefined ? " (undefined)" : "");
  return 0;
}

// ---- eval -------------------------------------------------------------------

struct EvalArgs {
  CommonFlags common;
  std::string data, checkpoint, report;
  std::optional<std::size_t> folds;
  std::size_t finetune_epochs = 0;
};

void write_report(const fs::path& dir, const std::vector<Example>& ex, const std::vector<std::size_t>& pred) {
  make_dir(dir);
  std::vector<std::size_t> truth;
  for (const auto& e : ex) truth.push_back(e.label);
  const auto cm = confusion(truth, pred);
  write_file((dir / "metrics.csv").string(), metrics_csv(cm));
  write_file((dir / "confusion.csv").string(), confusion_csv(cm));
  write_file((dir / "transitions.csv").string(), transitions_csv(transition_pairs(truth, pred)));
  std::map<std::size_t, std::vector<std::pair<std::size_t, std::size_t>>> by_subject;
  for (std::size_t i = 0; i < ex.size(); ++i) by_subject[ex[i].subject].emplace_back(ex[i].index, pred[i]);
  for (auto& [s, rows] : by_subject) {
    std::sort(rows.begin(), rows.end());
    std::vector<std::size_t> labels;
    for (const auto& r : rows) labels.push_back(r.second);
    write_hypnogram((dir / ("hypnogram_subject" + std::to_string(s) + ".csv")).string(), labels);
  }
  const auto k = cohen_kappa(cm);
  std::printf("%s: %zu epochs accuracy %.4f kappa %.4f%s\n", dir.filename().string().c_str(), ex.size(),
              accuracy(cm), k.value, k.undefined ? " (undefined)" : "");
}

int cmd_eval(const EvalArgs& a) {
  RunConfig cfg = a.common.load();
  if (!a.data.empty()) cfg.set("data", a.data);
  if (!a.checkpoint.empty()) cfg.set("checkpoint", a.checkpoint);
  if (a.folds) cfg.set("folds", std::to_string(*a.folds));
  if (a.report.empty()) throw ConfigError("--report is required");
  cfg.set("out", a.report);
  auto ck = open_checkpoint(cfg, cfg.checkpoint);
  cfg.resolve();
  cfg.validate();
  const auto raw = load_data(cfg.data);
  check_channels(cfg.model, raw.front().signal.n_channels());
  const auto all = to_examples(raw, cfg.model.patch_mode, 0, cfg.filter);
  const fs::path dir(cfg.out);
  make_dir(dir);
  echo_config(dir, cfg);

  if (!cfg.was_set("folds") || cfg.folds < 2) {
    write_report(dir, all, predict_labels(all, ck.params));
    return 0;
  }
  const auto folds = kfold_split(subjects_of(all), cfg.folds, cfg.seed);
  std::vector<Example> pooled;
  std::vector<std::size_t> pooled_pred;
  for (std::size_t f = 0; f < folds.size(); ++f) {
    auto [rest, test] = split_by_subjects(all, folds[f]);
    ModelParams<float> params = ck.params;
    if (a.finetune_epochs > 0) {
      TrainConfig tc = cfg.train;
      tc.max_epochs = a.finetune_epochs;
      tc.seed = stream_seed(cfg.seed, {tag_id("fold"), f});
      fit(rest, {}, params, tc, Phase::kFinetune);
    }
    const auto pred = predict_labels(test, params);
    write_report(dir / ("fold" + std::to_string(f)), test, pred);
    pooled.insert(pooled.end(), test.begin(), test.end());
    pooled_pred.insert(pooled_pred.end(), pred.begin(), pred.end());
  }
  write_report(dir / "pooled", pooled, pooled_pred);
  return 0;
}

// ---- explain ----------------------------------------------------------------

struct ExplainArgs {
  CommonFlags common;
  std::string data, checkpoint, epoch, out_dir, rollout = "hadamard", target;
};

// "subject:epoch" or a 0-based position in the file.
std::size_t find_epoch(const std::vector<LabeledEpoch>& epochs, const std::string& id) {
  const auto colon = id.find(':');
  if (colon == std::string::npos) {
    const std::size_t i = parse_size("--epoch", id);
    if (i < epochs.size()) return i;
  } else {
    const std::size_t s = parse_size("--epoch", id.substr(0, colon));
    const std::size_t e = parse_size("--epoch", id.substr(colon + 1));
    for (std::size_t i = 0; i < epochs.size(); ++i)
      if (epochs[i].subject == s && epochs[i].epoch == e) return i;
  }
  throw ConfigError("no epoch '" + id + "' in the data (" + std::to_string(epochs.size()) + " epochs)");
}

int cmd_explain(const ExplainArgs& a) {
  RunConfig cfg = a.common.load();
  if (!a.data.empty()) cfg.set("data", a.data);
  if (!a.checkpoint.empty()) cfg.set("checkpoint", a.checkpoint);
  if (a.out_dir.empty()) throw ConfigError("--out-dir is required");
  cfg.set("out", a.out_dir);
  const Rollout mode = parse_rollout(a.rollout);
  auto ck = open_checkpoint(cfg, cfg.checkpoint);
  cfg.resolve();
  cfg.validate();
  const auto raw = load_data(cfg.data);
  const std::size_t idx = find_epoch(raw, a.epoch);
  check_channels(cfg.model, raw[idx].signal.n_channels());
  std::optional<std::size_t> target;
  if (!a.target.empty()) {
    target = parse_stage(a.target);
    if (!target) throw ConfigError("unknown stage '" + a.target + "'");
  }
  const auto seq = preprocess(raw[idx].signal, cfg.model.patch_mode, cfg.filter);
  const auto map = explain(seq, ck.params, target, mode);

  const fs::path dir(cfg.out);
  make_dir(dir);
  echo_config(dir, cfg);
  write_file((dir / "relevance.csv").string(), relevance_csv(map));
  write_file((dir / "entropy.csv").string(), entropy_csv(map));
  for (const auto& g : map.grids)
    write_file((dir / ("relevance_ch" + std::to_string(g.channel) + ".pgm")).string(), relevance_pgm(g));
  std::printf("epoch %zu:%zu true %s predicted %s target %s rollout %s\n", raw[idx].subject, raw[idx].epoch,
              std::string(stage_name(raw[idx].stage)).c_str(), std::string(stage_name(map.predicted)).c_str(),
              std::string(stage_name(map.target)).c_str(), std::string(to_string(mode)).c_str());
  for (const auto& g : map.grids) {
    std::printf("channel %zu band means:", g.channel);
    const auto m = band_means(g);
    for (std::size_t b = 0; b < m.size(); ++b) std::printf(" %s %.3f", band_label(g.bands, b).c_str(), m[b]);
    std::printf("\n");
  }
  return 0;
}

// ---- stage ------------------------------------------------------------------

struct StageArgs {
  CommonFlags common;
  std::string edf, csv, channels, checkpoint, out;
};

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::size_t a = 0;
  while (a <= s.size()) {
    const auto b = s.find(',', a);
    const std::string part(trim(s.substr(a, b == std::string::npos ? std::string::npos : b - a)));
    if (!part.empty()) out.push_back(part);
    if (b == std::string::npos) break;
    a = b + 1;
  }
  return out;
}

int cmd_stage(const StageArgs& a) {
  RunConfig cfg = a.common.load();
  if (!a.checkpoint.empty()) cfg.set("checkpoint", a.checkpoint);
  if (a.out.empty()) throw ConfigError("--out is required");
  cfg.set("out", a.out);
  if (a.edf.empty() == a.csv.empty()) throw ConfigError("give exactly one of --edf or --csv");
  cfg.set("data", a.edf.empty() ? a.csv : a.edf);
  auto ck = open_checkpoint(cfg, cfg.checkpoint);
  cfg.resolve();
  cfg.validate();
  const auto wanted = split_list(a.channels);

  std::vector<PatchSequence> seqs;
  if (!a.edf.empty()) {
    const Recording rec = read_edf(a.edf);
    if (wanted.empty()) throw ConfigError("--channels is required with --edf");
    std::vector<std::size_t> idx;
    for (const auto& w : wanted) idx.push_back(find_signal(rec, w));
    check_channels(cfg.model, idx.size());
    for (const auto& sig : recording_epochs(rec, idx, cfg.filter))
      seqs.push_back(preprocess(sig, cfg.model.patch_mode, cfg.filter, false));
  } else {
    const auto epochs = load_csv_epochs(a.csv);
    const std::size_t have = epochs.front().signal.n_channels();
    std::vector<std::size_t> idx;
    for (const auto& w : wanted) {
      const std::size_t c = parse_size("--channels", w);
      if (c >= have) {
        throw ConfigError("no channel " + w + "; available: 0.." + std::to_string(have - 1));
      }
      idx.push_back(c);
    }
    if (idx.empty())
      for (std::size_t c = 0; c < have; ++c) idx.push_back(c);
    check_channels(cfg.model, idx.size());
    for (const auto& e : epochs) {
      EpochSignal sig{e.signal.fs, {}};
      for (auto c : idx) sig.channels.push_back(e.signal.channels[c]);
      seqs.push_back(preprocess(sig, cfg.model.patch_mode, cfg.filter));
    }
  }
  std::vector<Example> ex(seqs.size());
  for (std::size_t i = 0; i < seqs.size(); ++i) ex[i].seq = std::move(seqs[i]);
  const auto pred = predict_labels(ex, ck.params);

  const fs::path out(cfg.out);
  const fs::path dir = out.has_parent_path() ? out.parent_path() : fs::path(".");
  make_dir(dir);
  write_hypnogram(out.string(), pred);
  echo_config(dir, cfg);
  std::printf("staged %zu epochs -> %s\n", pred.size(), out.string().c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Frequency-time transformer sleep staging"};
  app.require_subcommand(1);

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "generate labeled synthetic epochs");
  sa.common.add(synth);
  synth->add_option("--out", sa.out, "output directory");
  auto* per_class = synth->add_option("--per-class", sa.per_class, "epochs per stage");
  synth->add_option("--preset", sa.preset, "balanced or imbalanced")->excludes(per_class);
  synth->add_option("--total", sa.total, "total epochs for --preset")->excludes(per_class);

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "pretrain or fine-tune a model");
  ta.common.add(train);
  train->add_option("--data", ta.data, "epoch CSV or synth directory");
  train->add_option("--phase", ta.phase, "pretrain or finetune");
  train->add_option("--init", ta.init, "checkpoint to start from (required for finetune)");
  train->add_option("--out", ta.out, "output directory");
  train->add_option("--epochs", ta.epochs, "training epochs (max_epochs)");

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "score a checkpoint");
  ea.common.add(eval);
  eval->add_option("--data", ea.data, "epoch CSV or synth directory");
  eval->add_option("--checkpoint", ea.checkpoint, "model checkpoint");
  eval->add_option("--folds", ea.folds, "subject-wise folds (reports per fold plus pooled)");
  eval->add_option("--finetune-epochs", ea.finetune_epochs, "fine-tune on the other folds before scoring each fold");
  eval->add_option("--report", ea.report, "report directory");

  ExplainArgs xa;
  auto* expl = app.add_subcommand("explain", "relevance maps for one epoch");
  xa.common.add(expl);
  expl->add_option("--data", xa.data, "epoch CSV or synth directory");
  expl->add_option("--checkpoint", xa.checkpoint, "model checkpoint");
  expl->add_option("--epoch", xa.epoch, "subject:epoch or 0-based position")->required();
  expl->add_option("--out-dir", xa.out_dir, "output directory");
  expl->add_option("--rollout", xa.rollout, "hadamard or matmul");
  expl->add_option("--target", xa.target, "stage to explain (default: predicted)");

  StageArgs st;
  auto* stage = app.add_subcommand("stage", "stage a recording into a hypnogram");
  st.common.add(stage);
  stage->add_option("--edf", st.edf, "EDF recording");
  stage->add_option("--csv", st.csv, "epoch CSV");
  stage->add_option("--channels", st.channels, "comma-separated signal labels (EDF) or indices (CSV)");
  stage->add_option("--checkpoint", st.checkpoint, "model checkpoint");
  stage->add_option("--out", st.out, "hypnogram CSV path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitInput;
  }

  try {
    if (*synth) return cmd_synth(sa);
    if (*train) return cmd_train(ta);
    if (*eval) return cmd_eval(ea);
    if (*expl) return cmd_explain(xa);
    if (*stage) return cmd_stage(st);
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric failure: %s\n", e.what());
    return kExitNumeric;
  } catch (const std::invalid_argument& e) {  // ConfigError, ShapeError
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitInput;
  } catch (const ContractError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitInput;
  } catch (const std::runtime_error& e) {  // ParseError, IoError
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitInput;
  }
  return kExitInput;
}
