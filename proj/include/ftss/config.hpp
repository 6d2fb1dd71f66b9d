#pragma once

#include <set>
#include <string>
#include <string_view>

#include "ftss/binary.hpp"
#include "ftss/dataset.hpp"
#include "ftss/kv.hpp"
#include "ftss/model.hpp"
#include "ftss/signal.hpp"
#include "ftss/training.hpp"

namespace ftss {

// Flat key=value run configuration: model keys, training keys, synth.* keys,
// filter.* keys, paths, folds and the master seed. Later sets win, so config
// file first, command-line flags after.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  SynthConfig synth;
  BandpassConfig filter;
  std::uint64_t seed = 0;
  std::size_t folds = 7;     // subject folds; train holds out val_fold as validation
  std::size_t val_fold = 0;
  std::string data, out, init, checkpoint;
  std::set<std::string> explicit_keys;

  bool was_set(std::string_view key) const { return explicit_keys.count(std::string(key)) > 0; }

  void set(std::string_view key_in, std::string_view value) {
    const std::string key(trim(key_in));
    if (key == "seed") {
      seed = parse_size(key, value);
    } else if (key == "folds") {
      folds = parse_size(key, value);
    } else if (key == "val_fold") {
      val_fold = parse_size(key, value);
    } else if (key == "data") {
      data = trim(value);
    } else if (key == "out") {
      out = trim(value);
    } else if (key == "init") {
      init = trim(value);
    } else if (key == "checkpoint") {
      checkpoint = trim(value);
    } else if (key == "filter.low") {
      filter.low = parse_double(key, value);
    } else if (key == "filter.high") {
      filter.high = parse_double(key, value);
    } else if (key == "filter.order") {
      filter.order = static_cast<int>(parse_size(key, value));
    } else if (!set_config_key(model, key, value) && !set_config_key(train, key, value) &&
               !set_config_key(synth, key, value)) {
      throw ConfigError("unknown config key '" + key + "'");
    }
    explicit_keys.insert(key);
  }

  void merge(const KeyValues& kv) {
    for (const auto& [k, v] : kv) set(k, v);
  }

  // Parses key=value text; line numbers are reported for malformed lines.
  void merge_text(std::string_view text, const std::string& origin) {
    try {
      merge(parse_key_values(text));
    } catch (const ParseError& e) {
      throw ConfigError(origin + ": " + e.what());
    } catch (const ConfigError& e) {
      throw ConfigError(origin + ": " + e.what());
    }
  }

  void merge_file(const std::string& path) { merge_text(read_file(path), path); }

  // One master seed drives every stream.
  void resolve() {
    train.seed = seed;
    synth.seed = seed;
  }

  void validate() const {
    model.validate();
    train.validate();
    synth.validate();
    if (!(filter.low > 0 && filter.low < filter.high)) throw ConfigError("filter.low must be in (0, filter.high)");
    if (filter.order < 2 || filter.order % 2 != 0) throw ConfigError("filter.order must be a positive even number");
    if (folds == 1) throw ConfigError("folds must be 0 (off) or >= 2");
    if (folds > 1 && val_fold >= folds) throw ConfigError("val_fold must be < folds");
  }

  KeyValues items() const {
    KeyValues kv = {{"seed", std::to_string(seed)},
                    {"folds", std::to_string(folds)},
                    {"val_fold", std::to_string(val_fold)},
                    {"data", data},
                    {"out", out},
                    {"init", init},
                    {"checkpoint", checkpoint},
                    {"filter.low", format_double(filter.low)},
                    {"filter.high", format_double(filter.high)},
                    {"filter.order", std::to_string(filter.order)}};
    for (auto& i : config_items(model)) kv.push_back(std::move(i));
    for (auto& i : config_items(train))
      if (i.first != "seed") kv.push_back(std::move(i));
    for (auto& i : config_items(synth)) kv.push_back(std::move(i));
    return kv;
  }

  std::string text() const { return format_key_values(items()); }
};

inline KeyValues filter_items(const BandpassConfig& f) {
  return {{"filter.low", format_double(f.low)},
          {"filter.high", format_double(f.high)},
          {"filter.order", std::to_string(f.order)}};
}

}  // namespace ftss
