#include <gtest/gtest.h>

#include <random>
#include <sstream>

#include "dbpot/pulse.hpp"
#include "oracles/decode_oracle.hpp"

using namespace dbpot;
using namespace dbpot::pulse;

namespace {

PulseStream from_text(const std::string& text, double fclk = 50e3) {
  PulseStream s;
  s.fclk = fclk;
  for (char c : text) s.states.push_back(static_cast<OutputDrive>(c));
  return s;
}

PulseStream random_stream(std::size_t m, std::mt19937_64& rng, double pp = 1.0 / 3, double pn = 1.0 / 3) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  PulseStream s;
  s.states.resize(m);
  for (auto& d : s.states) {
    const double x = u(rng);
    d = x < pp ? OutputDrive::P : (x < pp + pn ? OutputDrive::N : OutputDrive::Z);
  }
  return s;
}

}  // namespace

TEST(Decode, ThousandPulsesOverFiveSeconds) {
  const auto r = decode_counts(1000, 0, 250000, 4.89e-9, 10.16e-9);
  EXPECT_NEAR(r.i_f, 1000.0 * 4.89e-9 / 250000.0, 1e-24);
  EXPECT_NEAR(r.i_f, 19.56e-12, 1e-16);
}

TEST(Decode, AllZeroStreamIsZero) {
  const auto r = decode(from_text(std::string(5000, 'Z')), 4.89e-9, 10.16e-9);
  EXPECT_EQ(r.i_f, 0.0);
  EXPECT_EQ(r.p, 0);
  EXPECT_EQ(r.n, 0);
}

TEST(Decode, MatchesBruteForceOracle) {
  std::mt19937_64 rng(17);
  std::uniform_int_distribution<std::size_t> len(1, 20000);
  std::uniform_real_distribution<double> prob(0.0, 0.5);
  for (int trial = 0; trial < 200; ++trial) {
    const auto s = random_stream(len(rng), rng, prob(rng), prob(rng));
    const auto r = decode(s, 4.89e-9, 10.16e-9);
    const auto o = oracle::brute_force_decode(s, 4.89e-9, 10.16e-9);
    ASSERT_EQ(r.p, o.p);
    ASSERT_EQ(r.n, o.n);
    ASSERT_EQ(r.m, o.m);
    ASSERT_EQ(r.i_f, o.i_f);
    EXPECT_LE(r.p + r.n, r.m);
    EXPECT_LE(std::abs(r.i_f), 10.16e-9);
    EXPECT_DOUBLE_EQ(r.lsb, 4.89e-9 / double(r.m));
  }
}

TEST(Decode, AdditivityOverWindows) {
  std::mt19937_64 rng(5);
  const auto s = random_stream(12000, rng);
  const auto whole = decode(s, 3e-9, 5e-9);
  double weighted = 0.0;
  for (const auto& w : windowed_decode(s, 3e-9, 5e-9, 3000)) weighted += w.result.i_f * 3000.0;
  EXPECT_NEAR(weighted / 12000.0, whole.i_f, 1e-24);
}

TEST(Decode, RejectsEmptyStreamAndBadDrive) {
  EXPECT_THROW(decode(PulseStream{}, 1e-9, 1e-9), std::invalid_argument);
  EXPECT_THROW(decode(from_text("PPN"), 0.0, 1e-9), std::invalid_argument);
}

TEST(Lsb, Values) {
  EXPECT_NEAR(lsb_current(4.89e-9, 250000), 19.56e-15, 1e-20);
  EXPECT_EQ(lsb_current(4.89e-9, 1), 4.89e-9);
  EXPECT_DOUBLE_EQ(lsb_current(4.89e-9, 500000), lsb_current(4.89e-9, 250000) / 2.0);
  EXPECT_THROW(lsb_current(1e-9, 0), std::invalid_argument);
}

TEST(Sensitivity, TwentyFiveMicronDiscNearReportedValue) {
  electrochem::ElectrodeGeometry g;
  const double s = sensitivity_lsb_per_mM(g, 4.89e-9, 5.0, 50e3);
  // i_L(1 mM) / (ip / M) written out.
  EXPECT_NEAR(s, 4.0 * 96485.33 * 6.67e-10 * 25e-6 * 250000.0 / 4.89e-9, 1e-6);
  EXPECT_NEAR(s, 334137.0, 0.10 * 334137.0);
  EXPECT_DOUBLE_EQ(sensitivity_lsb_per_mM(g, 4.89e-9, 10.0, 50e3), 2.0 * s);
  EXPECT_DOUBLE_EQ(sensitivity_lsb_per_mM(g, 9.78e-9, 5.0, 50e3), s / 2.0);
}

TEST(DynamicRange, Formula) {
  EXPECT_NEAR(dynamic_range_db(175e-9, 46.72e-12), 71.47, 0.01);
  EXPECT_EQ(dynamic_range_db(1e-9, 1e-9), 0.0);
  EXPECT_NEAR(dynamic_range_db(10e-9, 1e-12) - dynamic_range_db(1e-9, 1e-12), 20.0, 1e-12);
  EXPECT_THROW(dynamic_range_db(0.0, 1.0), std::invalid_argument);
}

TEST(NoiseRms, DeterministicZeroStreamsGiveZero) {
  std::vector<PulseStream> v(10, from_text(std::string(4096, 'Z')));
  EXPECT_EQ(noise_rms(v, 1e-9, 1e-9, 256), 0.0);
}

TEST(NoiseRms, NeedsTwoWindows) {
  std::vector<PulseStream> v{from_text(std::string(100, 'Z'))};
  EXPECT_THROW(noise_rms(v, 1e-9, 1e-9, 100), std::invalid_argument);
}

TEST(NoiseRms, ScalesAsInverseRootWindowForWhiteStreams) {
  std::mt19937_64 rng(21);
  std::vector<PulseStream> v;
  for (int k = 0; k < 10; ++k) v.push_back(random_stream(1 << 16, rng, 0.2, 0.2));
  std::vector<double> lx, ly;
  for (std::size_t w : {64u, 256u, 1024u, 4096u}) {
    lx.push_back(std::log(double(w)));
    ly.push_back(std::log(noise_rms(v, 1e-9, 1e-9, w)));
  }
  double mx = 0, my = 0;
  for (std::size_t k = 0; k < 4; ++k) mx += lx[k] / 4, my += ly[k] / 4;
  double sxy = 0, sxx = 0;
  for (std::size_t k = 0; k < 4; ++k) sxy += (lx[k] - mx) * (ly[k] - my), sxx += (lx[k] - mx) * (lx[k] - mx);
  EXPECT_NEAR(sxy / sxx, -0.5, 0.05);
}

TEST(NoiseRms, DefaultWindowIsOne256th) { EXPECT_EQ(default_noise_window(250000), 976u); }

TEST(RunningEstimate, ZeroBandConvergesOnlyAtFullLength) {
  std::mt19937_64 rng(2);
  const auto s = random_stream(1000, rng);
  EXPECT_EQ(running_estimate(s, 1e-9, 1e-9, 0.0).convergence_index, 1000u);
}

TEST(RunningEstimate, AlternatingStreamConstantAtWholePeriods) {
  std::string text;
  for (int k = 0; k < 500; ++k) text += "PZ";
  const auto r = running_estimate(from_text(text), 2e-9, 2e-9, 0.05);
  for (std::size_t m = 2; m <= 1000; m += 2) ASSERT_NEAR(r.estimate[m - 1], 1e-9, 1e-21) << m;
  EXPECT_LE(r.convergence_index, 40u);
}

TEST(RunningEstimate, EstimateIsPrefixDecode) {
  std::mt19937_64 rng(8);
  const auto s = random_stream(300, rng);
  const auto r = running_estimate(s, 2e-9, 3e-9, 0.05);
  for (std::size_t m : {1u, 17u, 150u, 300u})
    EXPECT_NEAR(r.estimate[m - 1], decode(s.slice(0, m), 2e-9, 3e-9).i_f, 1e-22);
}

TEST(StreamFile, RoundTrip) {
  std::mt19937_64 rng(3);
  auto s = random_stream(1234, rng);
  s.fclk = 48123.456789;
  std::stringstream io;
  write_stream(io, s);
  const auto back = read_stream(io);
  EXPECT_EQ(back.states, s.states);
  EXPECT_EQ(back.fclk, s.fclk);
}

TEST(StreamFile, WhitespaceTolerant) {
  std::istringstream in("\n  fclk_hz=50000  \r\nPP Z\r\n\tNN\n\n");
  const auto s = read_stream(in);
  EXPECT_EQ(s.length(), 5u);
  EXPECT_EQ(s.fclk, 50000.0);
}

TEST(StreamFile, ErrorsCarryLineNumbers) {
  auto line_of = [](const std::string& text) {
    std::istringstream in(text);
    try {
      read_stream(in);
    } catch (const StreamFormatError& e) {
      return e.line();
    }
    return -1;
  };
  EXPECT_EQ(line_of("fclk_hz=50000\nPPZ\nPXZ\n"), 3);
  EXPECT_EQ(line_of("clock=5\nPPZ\n"), 1);
  EXPECT_EQ(line_of("fclk_hz=abc\nP\n"), 1);
  EXPECT_NE(line_of("fclk_hz=50000\n"), -1);
  EXPECT_NE(line_of(""), -1);
}

TEST(Traces, CurrentAndPulseWidthEquivalents) {
  const auto s = from_text("PNZ");
  const auto c = current_trace(s, 2e-9, 3e-9);
  EXPECT_EQ(c, (std::vector<double>{2e-9, -3e-9, 0.0}));
  const auto t = tq1_trace(s, 2e-9, 3e-9, 103e-6, 8.1e-9);
  EXPECT_NEAR(t[0], 2e-9 * 103e-6 / (2.0 * 8.1e-9), 1e-20);
  EXPECT_EQ(voutp_trace(s, 0.4), (std::vector<double>{0.4, 0.0, 0.0}));
}
