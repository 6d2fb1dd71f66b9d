#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "ftss/signal.hpp"
#include "test_support.hpp"

namespace ftss {
namespace {

EpochSignal sine_epoch(std::size_t fs, double hz, double amplitude = 1.0, std::size_t channels = 1,
                       std::size_t seconds = kEpochSeconds) {
  EpochSignal sig{fs, {}};
  for (std::size_t c = 0; c < channels; ++c) {
    std::vector<double> x(seconds * fs);
    for (std::size_t i = 0; i < x.size(); ++i) {
      x[i] = amplitude * std::sin(2 * std::numbers::pi * hz * double(i) / double(fs));
    }
    sig.channels.push_back(std::move(x));
  }
  return sig;
}

// Peak |y| after discarding the first two seconds.
double steady_peak(const std::vector<double>& y, std::size_t fs) {
  double peak = 0;
  for (std::size_t i = 2 * fs; i < y.size(); ++i) peak = std::max(peak, std::abs(y[i]));
  return peak;
}

TEST(Hamming, Endpoints) {
  const auto w = hamming_window(125);
  EXPECT_NEAR(w.front(), 0.08, 1e-15);
  EXPECT_NEAR(w.back(), 0.08, 1e-15);
}

TEST(Hamming, MidpointOfOddLength) {
  EXPECT_NEAR(hamming_window(125)[62], 1.0, 1e-15);
  EXPECT_NEAR(hamming_window(5)[2], 1.0, 1e-15);
}

TEST(Hamming, LengthFour) {
  const auto w = hamming_window(4);
  const std::vector<double> expected = {0.08, 0.77, 0.77, 0.08};
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(w[i], expected[i], 1e-15);
}

TEST(Hamming, TooShortIsConfigError) {
  EXPECT_THROW(hamming_window(1), ConfigError);
  EXPECT_THROW(hamming_window(0), ConfigError);
}

TEST(FftPower, ImpulseIsFlat) {
  std::vector<double> x(125, 0.0);
  x[0] = 1.0;
  for (double p : fft_power(x)) EXPECT_NEAR(p, 1.0, 1e-12);
}

TEST(FftPower, MatchesNaiveDftForMixedRadixLengths) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> d;
  for (std::size_t n : {64u, 100u, 125u, 97u, 3750u}) {
    std::vector<double> x(n);
    for (auto& v : x) v = d(rng);
    const auto fast = fft_power(x);
    const auto slow = testing::naive_dft_power(x);
    ASSERT_EQ(fast.size(), slow.size());
    for (std::size_t k = 0; k < fast.size(); ++k) {
      EXPECT_NEAR(fast[k], slow[k], 1e-8 * std::max(1.0, slow[k])) << "n=" << n << " k=" << k;
    }
  }
}

TEST(FftPower, Parseval) {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> d;
  for (std::size_t n : {125u, 100u}) {
    std::vector<double> x(n);
    for (auto& v : x) v = d(rng);
    double energy = 0;
    for (double v : x) energy += v * v;
    const auto p = fft_power(x);
    // One-sided spectrum: interior bins count twice, DC and (even n) Nyquist once.
    double spectral = p[0];
    for (std::size_t k = 1; k < p.size(); ++k) {
      spectral += (n % 2 == 0 && k == n / 2) ? p[k] : 2 * p[k];
    }
    EXPECT_NEAR(energy, spectral / double(n), 1e-6 * energy);
  }
}

TEST(FftPower, TenHertzPeak) {
  const auto sig = sine_epoch(125, 10.0, 1.0, 1, 1);
  const auto p = fft_power(sig.channels[0]);
  const auto oracle = testing::naive_dft_power(sig.channels[0]);
  EXPECT_EQ(std::max_element(p.begin(), p.end()) - p.begin(), 10);
  EXPECT_EQ(std::max_element(oracle.begin(), oracle.end()) - oracle.begin(), 10);
}

TEST(Butterworth, DcIsStopBand) {
  const auto sections = design_butterworth_bandpass(125, 0.2, 32, 8);
  std::vector<double> x(30 * 125, 1.0);
  const auto y = sos_filter(sections, x);
  double tail = 0;
  for (std::size_t i = y.size() - 125; i < y.size(); ++i) tail = std::max(tail, std::abs(y[i]));
  EXPECT_LT(tail, 0.01);
}

TEST(Butterworth, PassBandTenHertz) {
  const auto sig = butterworth_bandpass(sine_epoch(125, 10.0));
  const double db = 20 * std::log10(steady_peak(sig.channels[0], 125));
  EXPECT_LE(std::abs(db), 0.5) << db << " dB";
}

TEST(Butterworth, FiftyHertzAttenuated) {
  const auto sig = butterworth_bandpass(sine_epoch(125, 50.0));
  const double db = 20 * std::log10(steady_peak(sig.channels[0], 125));
  EXPECT_LE(db, -20.0) << db << " dB";
}

TEST(Butterworth, EighthOrderMeansFourSections) {
  EXPECT_EQ(design_butterworth_bandpass(125, 0.2, 32, 8).size(), 4u);
  EXPECT_EQ(design_butterworth_bandpass(100, 0.2, 32, 8).size(), 4u);
}

TEST(Butterworth, MatchesReferenceDesign) {
  // Poles and overall gain of scipy.signal.butter(4, [0.2, 32], 'band', fs=125).
  const auto s = design_butterworth_bandpass(125, 0.2, 32, 8);
  std::vector<std::pair<double, double>> denominators;
  for (const auto& b : s) denominators.emplace_back(b.a1, b.a2);
  std::sort(denominators.begin(), denominators.end());
  const std::vector<std::pair<double, double>> expected = {{-1.99228686703, 0.992387827832},
                                                           {-1.98136833589, 0.981470141062},
                                                           {0.0305819142124, 0.0405075279538},
                                                           {0.0526302368821, 0.450041480498}};
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_NEAR(denominators[i].first, expected[i].first, 1e-9);
    EXPECT_NEAR(denominators[i].second, expected[i].second, 1e-9);
  }
  double gain = 1;
  for (const auto& b : s) gain *= b.b0;
  EXPECT_NEAR(gain, 0.0992771085269, 1e-11);
}

TEST(Butterworth, UpperEdgeAboveNyquistIsConfigError) {
  EXPECT_THROW(design_butterworth_bandpass(60, 0.2, 32), ConfigError);
  EXPECT_THROW(design_butterworth_bandpass(64, 0.2, 32), ConfigError);
  EXPECT_THROW(design_butterworth_bandpass(125, 5, 2), ConfigError);
}

TEST(Butterworth, ImpulseResponseDecays) {
  const auto sections = design_butterworth_bandpass(125, 0.2, 32, 8);
  std::vector<double> x(30 * 125, 0.0);
  x[0] = 1.0;
  const auto y = sos_filter(sections, x);
  double total = 0, tail = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    total += y[i] * y[i];
    if (i >= y.size() - 125) tail += y[i] * y[i];
  }
  EXPECT_TRUE(std::isfinite(total));
  EXPECT_LT(tail, 1e-8);
}

TEST(Spectrogram, ZeroSignalHitsFloor) {
  EpochSignal sig{125, {std::vector<double>(3750, 0.0)}};
  const auto spec = spectrogram(sig);
  for (double v : spec.values) EXPECT_EQ(v, std::log(kLogFloor));
}

TEST(Spectrogram, TenHertzArgmaxInEveryColumn) {
  const auto spec = spectrogram(sine_epoch(125, 10.0, 1.0, 2));
  ASSERT_EQ(spec.channels, 2u);
  ASSERT_EQ(spec.values.size(), 2u * 32 * 30);
  for (std::size_t c = 0; c < 2; ++c) {
    for (std::size_t t = 0; t < 30; ++t) {
      std::size_t best = 0;
      for (std::size_t f = 1; f < 32; ++f)
        if (spec.at(c, f, t) > spec.at(c, best, t)) best = f;
      EXPECT_EQ(best, 10u);
    }
  }
}

TEST(Spectrogram, WrongSampleCountIsShapeError) {
  EpochSignal sig{125, {std::vector<double>(3749, 0.0)}};
  EXPECT_THROW(spectrogram(sig), ShapeError);
  EpochSignal slow{50, {std::vector<double>(1500, 0.0)}};
  EXPECT_THROW(spectrogram(slow), ConfigError);
}

TEST(Spectrogram, OneSecondDelayShiftsColumns) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> d;
  std::vector<double> x(31 * 100);
  for (auto& v : x) v = d(rng);
  EpochSignal a{100, {std::vector<double>(x.begin(), x.begin() + 3000)}};
  EpochSignal b{100, {std::vector<double>(x.begin() + 100, x.end())}};
  const auto sa = spectrogram(a), sb = spectrogram(b);
  for (std::size_t f = 0; f < 32; ++f)
    for (std::size_t t = 0; t + 1 < 30; ++t) EXPECT_EQ(sb.at(0, f, t), sa.at(0, f, t + 1));
}

TEST(Spectrogram, ScalingAddsTwoLogC) {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> d;
  EpochSignal a{125, {std::vector<double>(3750)}};
  for (auto& v : a.channels[0]) v = 50 * d(rng);
  EpochSignal b = a;
  const double c = 3.0;
  for (auto& v : b.channels[0]) v *= c;
  const auto sa = spectrogram(a), sb = spectrogram(b);
  for (std::size_t i = 0; i < sa.values.size(); ++i) {
    EXPECT_NEAR(sb.values[i] - sa.values[i], 2 * std::log(c), 1e-9);
  }
}

}  // namespace
}  // namespace ftss
