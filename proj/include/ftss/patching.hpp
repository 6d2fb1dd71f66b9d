#pragma once

#include <array>
#include <span>
#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "ftss/errors.hpp"
#include "ftss/signal.hpp"

namespace ftss {

// Five patch bands in sequence order. Each spans four 1 Hz bins; beta covers
// 16-32 Hz as four 4 Hz sub-blocks that are averaged down to four values.
enum class Band : std::size_t { kDelta = 0, kTheta, kAlpha, kSigma, kBeta };

inline constexpr std::size_t kNumBands = 5;
inline constexpr std::size_t kBinsPerBand = 4;
inline constexpr std::size_t kNumSubBlocks = 8;  // delta..sigma, beta1..beta4
inline constexpr std::size_t kPatchesPerChannel = kNumBands * kEpochSeconds;

inline constexpr std::array<std::string_view, kNumBands> kBandNames = {
    "delta", "theta", "alpha", "sigma", "beta"};

enum class PatchMode {
  kConcatSequence,  // L = 150 * C, D_p = 4
  kConcatFeatures,  // L = 150, D_p = 4 * C
  kTimeOnly,        // L = 30 * C, D_p = 32 (ablation: raw spectrogram columns)
};

inline PatchMode parse_patch_mode(std::string_view s) {
  if (s == "concat_sequence") return PatchMode::kConcatSequence;
  if (s == "concat_features") return PatchMode::kConcatFeatures;
  if (s == "time_only") return PatchMode::kTimeOnly;
  throw ConfigError("unknown patch mode '" + std::string(s) + "'");
}

inline std::string_view to_string(PatchMode m) {
  switch (m) {
    case PatchMode::kConcatSequence: return "concat_sequence";
    case PatchMode::kConcatFeatures: return "concat_features";
    case PatchMode::kTimeOnly: return "time_only";
  }
  return "?";
}

// One frequency block: channels x 4 rows x 30 seconds.
struct BandBlock {
  std::size_t channels = 0;
  std::vector<double> values;

  BandBlock() = default;
  explicit BandBlock(std::size_t c) : channels(c), values(c * kBinsPerBand * kEpochSeconds) {}

  double& at(std::size_t c, std::size_t row, std::size_t t) {
    return values[(c * kBinsPerBand + row) * kEpochSeconds + t];
  }
  double at(std::size_t c, std::size_t row, std::size_t t) const {
    return values[(c * kBinsPerBand + row) * kEpochSeconds + t];
  }
};

inline void require_spectrogram_shape(const Spectrogram& spec) {
  if (spec.channels == 0 ||
      spec.values.size() != spec.channels * kFreqBins * kEpochSeconds) {
    throw ShapeError("spectrogram must be C x 32 x 30, got " +
                     std::to_string(spec.values.size()) + " values for " +
                     std::to_string(spec.channels) + " channels");
  }
}

// Splits the 32 rows into delta, theta, alpha, sigma and beta1..beta4.
inline std::array<BandBlock, kNumSubBlocks> frequency_patch(const Spectrogram& spec) {
  require_spectrogram_shape(spec);
  std::array<BandBlock, kNumSubBlocks> blocks;
  for (std::size_t b = 0; b < kNumSubBlocks; ++b) {
    blocks[b] = BandBlock(spec.channels);
    for (std::size_t c = 0; c < spec.channels; ++c)
      for (std::size_t r = 0; r < kBinsPerBand; ++r)
        for (std::size_t t = 0; t < kEpochSeconds; ++t)
          blocks[b].at(c, r, t) = spec.at(c, b * kBinsPerBand + r, t);
  }
  return blocks;
}

// Row j of the result is the per-second mean of beta sub-block j.
inline BandBlock beta_average(std::span<const BandBlock, 4> sub_blocks) {
  const std::size_t channels = sub_blocks[0].channels;
  BandBlock out(channels);
  for (std::size_t j = 0; j < 4; ++j) {
    if (sub_blocks[j].channels != channels) {
      throw ShapeError("beta sub-blocks disagree on channel count");
    }
    for (std::size_t c = 0; c < channels; ++c) {
      for (std::size_t t = 0; t < kEpochSeconds; ++t) {
        double s = 0;
        for (std::size_t r = 0; r < kBinsPerBand; ++r) s += sub_blocks[j].at(c, r, t);
        out.at(c, j, t) = s / static_cast<double>(kBinsPerBand);
      }
    }
  }
  return out;
}

struct PatchPosition {
  std::size_t channel = 0;
  std::size_t band = 0;  // always 0 in time-only mode
  std::size_t second = 0;

  friend bool operator==(const PatchPosition&, const PatchPosition&) = default;
};

// Token sequence for one epoch plus the layout needed to map sequence
// positions back onto (channel, band, second).
struct PatchSequence {
  PatchMode mode = PatchMode::kConcatSequence;
  std::size_t channels = 0;
  std::size_t length = 0;
  std::size_t patch_dim = 0;
  std::vector<double> patches;  // length x patch_dim, row-major

  // Bands per channel in the layout grid (5, or 1 for time-only).
  std::size_t grid_bands() const { return mode == PatchMode::kTimeOnly ? 1 : kNumBands; }

  // In concat_features mode one position covers every channel and the
  // reported channel is 0.
  PatchPosition position(std::size_t index) const {
    switch (mode) {
      case PatchMode::kConcatSequence:
        return {index / kPatchesPerChannel, index % kNumBands,
                (index % kPatchesPerChannel) / kNumBands};
      case PatchMode::kConcatFeatures:
        return {0, index % kNumBands, index / kNumBands};
      case PatchMode::kTimeOnly:
        return {index / kEpochSeconds, 0, index % kEpochSeconds};
    }
    return {};
  }

  std::size_t index_of(const PatchPosition& p) const {
    switch (mode) {
      case PatchMode::kConcatSequence:
        return p.channel * kPatchesPerChannel + p.second * kNumBands + p.band;
      case PatchMode::kConcatFeatures:
        return p.second * kNumBands + p.band;
      case PatchMode::kTimeOnly:
        return p.channel * kEpochSeconds + p.second;
    }
    return 0;
  }

  double at(std::size_t index, std::size_t k) const { return patches[index * patch_dim + k]; }
};

inline std::size_t sequence_length(PatchMode mode, std::size_t channels) {
  switch (mode) {
    case PatchMode::kConcatSequence: return kPatchesPerChannel * channels;
    case PatchMode::kConcatFeatures: return kPatchesPerChannel;
    case PatchMode::kTimeOnly: return kEpochSeconds * channels;
  }
  return 0;
}

inline std::size_t patch_dimension(PatchMode mode, std::size_t channels) {
  switch (mode) {
    case PatchMode::kConcatSequence: return kBinsPerBand;
    case PatchMode::kConcatFeatures: return kBinsPerBand * channels;
    case PatchMode::kTimeOnly: return kFreqBins;
  }
  return 0;
}

// Column-wise traversal: for each second, the delta, theta, alpha, sigma and
// averaged-beta 4-vectors in that order.
inline PatchSequence patch_sequence(const Spectrogram& spec,
                                    PatchMode mode = PatchMode::kConcatSequence) {
  require_spectrogram_shape(spec);
  PatchSequence seq;
  seq.mode = mode;
  seq.channels = spec.channels;
  seq.length = sequence_length(mode, spec.channels);
  seq.patch_dim = patch_dimension(mode, spec.channels);
  seq.patches.assign(seq.length * seq.patch_dim, 0.0);

  if (mode == PatchMode::kTimeOnly) {
    for (std::size_t c = 0; c < spec.channels; ++c)
      for (std::size_t t = 0; t < kEpochSeconds; ++t)
        for (std::size_t f = 0; f < kFreqBins; ++f)
          seq.patches[seq.index_of({c, 0, t}) * seq.patch_dim + f] = spec.at(c, f, t);
    return seq;
  }

  const auto blocks = frequency_patch(spec);
  const BandBlock beta = beta_average(std::span<const BandBlock, 4>(blocks.data() + 4, 4));
  for (std::size_t c = 0; c < spec.channels; ++c) {
    for (std::size_t t = 0; t < kEpochSeconds; ++t) {
      for (std::size_t b = 0; b < kNumBands; ++b) {
        const BandBlock& src = b < 4 ? blocks[b] : beta;
        const std::size_t index = seq.index_of({c, b, t});
        const std::size_t offset = mode == PatchMode::kConcatFeatures ? c * kBinsPerBand : 0;
        for (std::size_t r = 0; r < kBinsPerBand; ++r) {
          seq.patches[index * seq.patch_dim + offset + r] = src.at(c, r, t);
        }
      }
    }
  }
  return seq;
}

}  // namespace ftss
