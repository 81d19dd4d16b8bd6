#include <gtest/gtest.h>

#include <algorithm>
#include <numbers>
#include <random>

#include "dbpot/spectral.hpp"

using namespace dbpot::spectral;

namespace {

double variance(const std::vector<double>& x) {
  double m = 0.0;
  for (double v : x) m += v;
  m /= double(x.size());
  double s = 0.0;
  for (double v : x) s += (v - m) * (v - m);
  return s / double(x.size());
}

std::vector<double> white(std::size_t n, double sigma, unsigned seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, sigma);
  std::vector<double> x(n);
  for (double& v : x) v = g(rng);
  return x;
}

}  // namespace

TEST(Welch, WhiteNoiseIsFlatAndIntegratesToVariance) {
  const double fs = 1000.0;
  const auto x = white(1 << 18, 0.7, 1);
  const auto s = psd_welch(x, fs);
  EXPECT_NEAR(integrate(s), 0.49, 0.02 * 0.49);
  const double level = 0.49 / (fs / 2.0);
  double lo = 0.0, hi = 0.0;
  int nlo = 0, nhi = 0;
  for (std::size_t k = 1; k + 1 < s.f.size(); ++k) {
    if (s.f[k] < 100.0) lo += s.value[k], ++nlo;
    if (s.f[k] > 400.0) hi += s.value[k], ++nhi;
  }
  EXPECT_NEAR(lo / nlo, level, 0.05 * level);
  EXPECT_NEAR(hi / nhi, level, 0.05 * level);
}

TEST(Welch, ParsevalWithinOnePercent) {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<double> x(1 << 16);
    double state = 0.0;
    for (double& v : x) {
      state = 0.5 * state + u(rng);  // mildly coloured
      v = state;
    }
    const auto s = psd_welch(x, 50e3);
    EXPECT_NEAR(integrate(s), variance(x), 0.01 * variance(x)) << trial;
  }
}

TEST(Welch, SinusoidProducesOneDominantBin) {
  const double fs = 8000.0, f0 = 500.0;
  std::vector<double> x(1 << 15);
  for (std::size_t k = 0; k < x.size(); ++k) x[k] = std::sin(2.0 * std::numbers::pi * f0 * double(k) / fs);
  const auto s = psd_welch(x, fs, 1024, 0.5);
  const auto peak = std::max_element(s.value.begin(), s.value.end()) - s.value.begin();
  EXPECT_NEAR(s.f[std::size_t(peak)], f0, fs / 1024.0);
}

TEST(Welch, RejectsShortTraces) {
  std::vector<double> x(100, 1.0);
  EXPECT_THROW(psd_welch(x, 1.0, 200, 0.5), std::invalid_argument);
  EXPECT_THROW(psd_welch(x, 1.0, 100, 0.5), std::invalid_argument);
  EXPECT_NO_THROW(psd_welch(x, 1.0, 50, 0.5));
}

TEST(Welch, DefaultSegmentGivesEightHalfOverlappedSegments) {
  EXPECT_EQ(default_segment_length(900), 200u);
  std::vector<double> x(900, 0.0);
  EXPECT_NO_THROW(psd_welch(x, 1.0));
}

TEST(FftNormalized, ConstantStreamIsDcOnly) {
  std::vector<double> x(1000, 0.4);
  const auto s = fft_normalized(x, 0.4, 50e3);
  EXPECT_NEAR(s.value[0], 1.0, 1e-12);
  for (std::size_t k = 1; k < s.value.size(); ++k) EXPECT_NEAR(s.value[k], 0.0, 1e-12);
  EXPECT_EQ(s.f.size(), 1024u / 2 + 1);
}

TEST(FftNormalized, AllZeroStreamIsAllZero) {
  std::vector<double> x(512, 0.0);
  for (double v : fft_normalized(x, 0.4, 50e3).value) EXPECT_EQ(v, 0.0);
}

TEST(FftNormalized, SinusoidAmplitudeReadsBack) {
  const double fs = 1024.0;
  std::vector<double> x(1024);
  for (std::size_t k = 0; k < x.size(); ++k) x[k] = 0.2 + 0.1 * std::cos(2.0 * std::numbers::pi * 64.0 * double(k) / fs);
  const auto s = fft_normalized(x, 0.4, fs);
  EXPECT_NEAR(s.value[64], 0.25, 1e-9);
  EXPECT_NEAR(s.value[0], 0.5, 1e-12);
}

TEST(LogLogSlope, RecoversPowerLaw) {
  Spectrum s;
  for (double f = 1.0; f < 1e4; f *= 1.2) {
    s.f.push_back(f);
    s.value.push_back(3e-9 * f * f);
  }
  EXPECT_NEAR(loglog_slope_db(s, 10.0, 1000.0), 20.0, 1e-9);
  EXPECT_THROW(loglog_slope_db(s, 2e4, 3e4), std::invalid_argument);
}
