#include <gtest/gtest.h>

#include <random>

#include "dbpot/freqmodel.hpp"
#include "dbpot/spectral.hpp"

using namespace dbpot;
using namespace dbpot::freqmodel;

namespace {

constexpr double kLoadedCl = 10e-12 + 7e-9;

// Closed-loop DC quantities written out from the block chain.
struct DcOracle {
  double k, a0, stf0;
};

DcOracle dc_oracle(const fidigota::CircuitParams& p) {
  const double k = p.gm * p.r0 * (p.cfi / p.icm) * p.rout;
  const double a0 = k * 2.0 * p.ion / p.t0;
  return {k, a0, k / (1.0 + a0)};
}

fidigota::CircuitParams with_ion(double scale) {
  auto p = fidigota::reference_params();
  p.ion *= scale;
  p.ip *= scale;
  p.in *= scale;
  return p;
}

double rel(double a, double b) { return std::abs(a - b) / std::abs(b); }

}  // namespace

TEST(Stf, ReferenceDcValueAndLoopGain) {
  const auto p = fidigota::reference_params();
  const auto o = dc_oracle(p);
  const auto tf = stf(p, kLoadedCl);
  EXPECT_LT(rel(tf.dc(), o.stf0), 1e-12);
  EXPECT_NEAR(tf.dc(), 6.33e3, 0.01 * 6.33e3);
  EXPECT_NEAR(tf.dc(), 6327.4356, 1e-3);
  EXPECT_NEAR(block_gains(p, kLoadedCl).loop_gain_dc(), 206.8528, 1e-3);
  EXPECT_NEAR(20.0 * std::log10(o.a0), 46.3, 0.05);
}

TEST(Stf, LargeLoopGainTendsToT0OverTwoIon) {
  auto p = fidigota::reference_params();
  const double limit = p.t0 / (2.0 * p.ion);
  EXPECT_NEAR(limit, 6.36e3, 5.0);
  p.rout *= 100.0;
  EXPECT_LT(rel(stf(p, kLoadedCl).dc(), limit), 1e-4);
}

TEST(Stf, DcGainRisesAsIonFalls) {
  EXPECT_GT(stf(with_ion(0.6), kLoadedCl).dc(), stf(with_ion(1.0), kLoadedCl).dc());
  EXPECT_GT(stf(with_ion(1.0), kLoadedCl).dc(), stf(with_ion(20.0), kLoadedCl).dc());
}

TEST(TransferFunctions, ShareOneDenominator) {
  const auto p = fidigota::reference_params();
  const auto a = stf(p, kLoadedCl), b = ntf_quantization(p, kLoadedCl), c = ntf_input(p, kLoadedCl);
  for (int k = 0; k < 3; ++k) {
    EXPECT_LE(rel(a.den[k], b.den[k]), 1e-12);
    EXPECT_LE(rel(a.den[k], c.den[k]), 1e-12);
  }
}

TEST(TransferFunctions, ComplementarySensitivityIdentity) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0.3, 3.0);
  for (int trial = 0; trial < 50; ++trial) {
    auto p = fidigota::reference_params();
    p.gm *= u(rng);
    p.r0 *= u(rng);
    p.rout *= u(rng);
    p.icm *= u(rng);
    const double cl = kLoadedCl * u(rng);
    const double k_t2i = block_gains(p, cl).k_t2i;
    EXPECT_NEAR(stf(p, cl).dc() * k_t2i + ntf_quantization(p, cl).dc(), 1.0, 1e-12);
  }
}

TEST(TransferFunctions, StableForRandomPositiveParameters) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0.1, 10.0);
  for (int trial = 0; trial < 200; ++trial) {
    auto p = fidigota::reference_params();
    p.gm *= u(rng);
    p.r0 *= u(rng);
    p.cfi *= u(rng);
    p.rout *= u(rng);
    for (const auto& pole : stf(p, kLoadedCl * u(rng)).poles()) EXPECT_LT(pole.real(), 0.0);
  }
}

TEST(TransferFunctions, IonLimits) {
  EXPECT_LT(stf(with_ion(1e6), kLoadedCl).dc(), 1e-2);
  EXPECT_LT(ntf_quantization(with_ion(1e6), kLoadedCl).dc(), 1e-5);
  EXPECT_NEAR(ntf_quantization(with_ion(1e-9), kLoadedCl).dc(), 1.0, 1e-6);
}

TEST(NtfQuantization, DcIsInverseOnePlusLoopGain) {
  const auto p = fidigota::reference_params();
  const auto o = dc_oracle(p);
  const auto tf = ntf_quantization(p, kLoadedCl);
  EXPECT_LT(rel(tf.dc(), 1.0 / (1.0 + o.a0)), 1e-9);
  EXPECT_NEAR(tf.dc(), 4.8e-3, 0.05e-3);
  EXPECT_NEAR(std::abs(tf.at_hz(1e9)), 1.0, 1e-3);
}

TEST(NtfInput, DcAttenuation) {
  const auto p = fidigota::reference_params();
  const auto o = dc_oracle(p);
  const double open = p.t0 / (2.0 * p.rout * p.ion);
  EXPECT_NEAR(open, 0.0623, 0.0001);  // s/V
  EXPECT_LT(rel(ntf_input(p, kLoadedCl).dc(), open * o.a0 / (1.0 + o.a0)), 1e-12);
}

TEST(NtfInput, FirstOrderShapingVersusSecondOrder) {
  const auto p = fidigota::reference_params();
  const auto in = ntf_input(p, kLoadedCl), q = ntf_quantization(p, kLoadedCl);
  EXPECT_EQ(in.num[2], 0.0);
  EXPECT_NE(in.num[1], 0.0);
  EXPECT_NE(q.num[2], 0.0);
}

TEST(NoiseSources, QuantizationPsd) {
  auto p = fidigota::reference_params();
  EXPECT_NEAR(quantization_noise_psd(p), (20e-6 * 20e-6) * 103e-6 / 3.0, 1e-28);
  EXPECT_NEAR(quantization_noise_psd(p), 1.37e-14, 0.01e-14);
  // Flat over [0, f0]: the integral is Tclk^2 / 3.
  EXPECT_NEAR(quantization_noise_psd(p) / p.t0, p.tclk() * p.tclk() / 3.0, 1e-24);
  const double before = quantization_noise_psd(p);
  p.fclk *= 2.0;
  EXPECT_NEAR(quantization_noise_psd(p), before / 4.0, 1e-28);
}

TEST(NoiseSources, ShotNoisePsd) {
  auto p = fidigota::reference_params();
  const double expected = 2.0 * 1.602176634e-19 * 0.8e-12 / (61e-9 * 61e-9);
  EXPECT_NEAR(input_noise_psd(p), expected, 1e-30);
  EXPECT_NEAR(input_noise_psd(p), 6.9e-17, 0.1e-17);
  p.gm /= 2.0;
  EXPECT_NEAR(input_noise_psd(p), 4.0 * expected, 1e-30);
}

TEST(OutputNoise, LowFrequencyFloorMatchesDcNtfs) {
  const auto p = fidigota::reference_params();
  const auto s = output_noise_spectrum(p, kLoadedCl, {1e-3});
  const double q0 = ntf_quantization(p, kLoadedCl).dc(), v0 = ntf_input(p, kLoadedCl).dc();
  EXPECT_NEAR(s.total[0], q0 * q0 * quantization_noise_psd(p) + v0 * v0 * input_noise_psd(p), 1e-9 * s.total[0]);
  EXPECT_FALSE(s.beyond_validity);
}

TEST(OutputNoise, QuantizationDominatesShotNoise) {
  const auto p = fidigota::reference_params();
  const auto s = output_noise_spectrum(p, kLoadedCl, log_grid(0.1, 0.5 / p.t0, 300));
  for (std::size_t k = 0; k < s.f.size(); ++k) EXPECT_GE(s.quant[k], s.shot[k]) << s.f[k];
}

TEST(OutputNoise, ShowsTwentyAndFortyDbPerDecadeRegions) {
  const auto p = fidigota::reference_params();
  const auto g = log_grid(1.0, 0.5 / p.t0, 400);
  const auto s = output_noise_spectrum(p, kLoadedCl, g);
  const spectral::Spectrum sp{g, s.total};
  bool twenty = false, forty = false;
  for (double f = 1.0; f * std::sqrt(10.0) <= 0.5 / p.t0; f *= 1.1) {
    const double slope = spectral::loglog_slope_db(sp, f, f * std::sqrt(10.0));
    twenty = twenty || std::abs(slope - 20.0) <= 6.0;
    forty = forty || std::abs(slope - 40.0) <= 6.0;
  }
  EXPECT_TRUE(twenty);
  EXPECT_TRUE(forty);
  EXPECT_NEAR(spectral::loglog_slope_db(sp, 1.0, 10.0), 0.0, 0.5);
}

TEST(OutputNoise, FlagsGridBeyondValidity) {
  const auto p = fidigota::reference_params();
  EXPECT_TRUE(output_noise_spectrum(p, kLoadedCl, {1.0, 0.6 / p.t0}).beyond_validity);
  EXPECT_THROW(output_noise_spectrum(p, kLoadedCl, {0.0}), std::invalid_argument);
}

TEST(Bode, PointAndGrid) {
  RationalTF tf{{2.0, 0.0, 0.0}, {1.0, 1.0 / (2.0 * kPi), 0.0}};
  const auto b = bode_point(tf, 1.0);
  EXPECT_NEAR(b.mag_db, 20.0 * std::log10(2.0 / std::sqrt(2.0)), 1e-12);
  EXPECT_NEAR(b.phase_deg, -45.0, 1e-12);
  const auto g = log_grid(1.0, 100.0, 3);
  EXPECT_NEAR(g[1], 10.0, 1e-12);
  EXPECT_THROW(log_grid(0.0, 1.0, 5), std::invalid_argument);
}

TEST(Bode, InBandNoisePowerMatchesDenseTrapezoid) {
  const auto p = fidigota::reference_params();
  std::vector<double> f;
  const int n = 200001;
  for (int k = 1; k <= n; ++k) f.push_back(0.5 / p.t0 * k / n);
  const auto s = output_noise_spectrum(p, kLoadedCl, f);
  const double dense = trapezoid(f, s.total) + s.total.front() * f.front();
  EXPECT_NEAR(in_band_noise_power(p, kLoadedCl), dense, 1e-3 * dense);
}
