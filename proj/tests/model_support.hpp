#pragma once

// Small models and random inputs shared by the model and relevance tests.

#include <random>
#include <string>

#include "ftss/model.hpp"

namespace ftss::testing {

inline ModelConfig tiny_config(std::size_t blocks, std::size_t heads, std::size_t dim, std::size_t mlp,
                               std::size_t len) {
  ModelConfig c;
  c.blocks = blocks;
  c.heads = heads;
  c.dim = dim;
  c.mlp_dim = mlp;
  c.dropout = 0.0;
  c.seq_len = len;
  c.patch_dim = 4;
  c.channels = 1;
  return c;
}

inline PatchSequence random_sequence(std::size_t len, std::size_t dim, Rng& rng) {
  std::normal_distribution<double> d;
  PatchSequence s;
  s.length = len;
  s.patch_dim = dim;
  s.channels = 1;
  s.patches.resize(len * dim);
  for (auto& v : s.patches) v = d(rng);
  return s;
}

// Widen the init so activations are not all near zero.
template <typename T>
void scale_params(ModelParams<T>& p, double factor, Rng& rng) {
  std::normal_distribution<double> d(0.0, 0.1);
  for_each_slot(p, [&](const std::string& name, Tensor<T>& t) {
    for (auto& v : t.data()) v = static_cast<T>(v * factor + (name.find("gamma") != std::string::npos ? 0 : d(rng)));
  });
}

}  // namespace ftss::testing
