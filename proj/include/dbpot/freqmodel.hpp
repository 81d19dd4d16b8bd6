#pragma once

#include <array>
#include <cmath>
#include <complex>
#include <stdexcept>
#include <vector>

#include "dbpot/constants.hpp"
#include "dbpot/fidigota.hpp"

namespace dbpot::freqmodel {

using fidigota::CircuitParams;
using cplx = std::complex<double>;

/// Ratio of polynomials in s, coefficients in ascending powers (degree <= 2).
struct RationalTF {
  std::array<double, 3> num{0.0, 0.0, 0.0};
  std::array<double, 3> den{1.0, 0.0, 0.0};

  static cplx poly(const std::array<double, 3>& c, cplx s) { return c[0] + s * (c[1] + s * c[2]); }

  cplx eval(cplx s) const { return poly(num, s) / poly(den, s); }
  cplx at_hz(double f) const { return eval(cplx(0.0, 2.0 * kPi * f)); }
  double dc() const { return num[0] / den[0]; }

  /// Roots of the denominator (both real and negative for the closed loops here).
  std::array<cplx, 2> poles() const {
    if (den[2] == 0.0) return {cplx(-den[0] / den[1], 0.0), cplx(std::nan(""), 0.0)};
    const cplx disc = std::sqrt(cplx(den[1] * den[1] - 4.0 * den[2] * den[0], 0.0));
    return {(-den[1] + disc) / (2.0 * den[2]), (-den[1] - disc) / (2.0 * den[2])};
  }
};

/// Linearized loop blocks: input stage, V2t, t2i and output node.
struct BlockGains {
  double a1_dc;  // gm r0
  double tau1;   // r0 Cfi
  double k_v2t;  // Cfi / Icm
  double k_t2i;  // 2 Ion / T0
  double rout;
  double tau2;  // rout CL

  cplx a1(cplx s) const { return a1_dc / (1.0 + s * tau1); }
  cplx z2(cplx s) const { return rout / (1.0 + s * tau2); }
  double loop_gain_dc() const { return a1_dc * k_v2t * k_t2i * rout; }
};

inline BlockGains block_gains(const CircuitParams& p, double cl) {
  p.validate();
  if (!(cl > 0.0)) throw std::invalid_argument("block_gains: CL must be > 0");
  return {p.gm * p.r0, p.r0 * p.cfi, p.cfi / p.icm, 2.0 * p.ion / p.t0, p.rout, p.rout * cl};
}

namespace detail {
inline std::array<double, 3> loop_denominator(const BlockGains& b) {
  return {1.0 + b.loop_gain_dc(), b.tau1 + b.tau2, b.tau1 * b.tau2};
}
}  // namespace detail

/// Pulse width t_q1 per faradaic current (s/A).
inline RationalTF stf(const CircuitParams& p, double cl) {
  const auto b = block_gains(p, cl);
  return {{b.a1_dc * b.k_v2t * b.rout, 0.0, 0.0}, detail::loop_denominator(b)};
}

/// Shaping of the D-FF time quantization error (dimensionless).
inline RationalTF ntf_quantization(const CircuitParams& p, double cl) {
  const auto b = block_gains(p, cl);
  return {{1.0, b.tau1 + b.tau2, b.tau1 * b.tau2}, detail::loop_denominator(b)};
}

/// Shaping of the input-referred voltage noise (s/V).
inline RationalTF ntf_input(const CircuitParams& p, double cl) {
  const auto b = block_gains(p, cl);
  const double k = b.a1_dc * b.k_v2t;
  return {{k, k * b.tau2, 0.0}, detail::loop_denominator(b)};
}

/// One-sided quantization PSD of t_q1 (s^2/Hz), flat up to f0/2.
inline double quantization_noise_psd(const CircuitParams& p) {
  const double tclk = p.tclk();
  return tclk * tclk * p.t0 / 3.0;
}

/// Input-referred shot noise PSD (V^2/Hz).
inline double input_noise_psd(const CircuitParams& p) { return 2.0 * kElementaryCharge * p.icm / (p.gm * p.gm); }

struct NoiseSpectrum {
  std::vector<double> f;
  std::vector<double> total;
  std::vector<double> quant;
  std::vector<double> shot;
  /// True when any grid point lies above f0/2, where the model is not claimed valid.
  bool beyond_validity = false;
};

inline NoiseSpectrum output_noise_spectrum(const CircuitParams& p, double cl, const std::vector<double>& f) {
  const auto nq = ntf_quantization(p, cl);
  const auto ni = ntf_input(p, cl);
  const double st = quantization_noise_psd(p);
  const double sv = input_noise_psd(p);
  NoiseSpectrum out;
  out.f = f;
  for (double fk : f) {
    if (!(fk > 0.0)) throw std::invalid_argument("output_noise_spectrum: frequencies must be > 0");
    if (fk > 0.5 / p.t0) out.beyond_validity = true;
    const double q = std::norm(nq.at_hz(fk)) * st;
    const double v = std::norm(ni.at_hz(fk)) * sv;
    out.quant.push_back(q);
    out.shot.push_back(v);
    out.total.push_back(q + v);
  }
  return out;
}

struct BodePoint {
  double f;
  double mag_db;
  double phase_deg;
};

inline BodePoint bode_point(const RationalTF& tf, double f) {
  const cplx h = tf.at_hz(f);
  return {f, 20.0 * std::log10(std::abs(h)), std::arg(h) * 180.0 / kPi};
}

/// `n` log-spaced points from f_lo to f_hi inclusive.
inline std::vector<double> log_grid(double f_lo, double f_hi, int n) {
  if (!(f_lo > 0.0) || !(f_hi > f_lo) || n < 2) throw std::invalid_argument("log_grid: bad range");
  std::vector<double> f(n);
  const double a = std::log10(f_lo), b = std::log10(f_hi);
  for (int k = 0; k < n; ++k) f[k] = std::pow(10.0, a + (b - a) * k / (n - 1));
  return f;
}

/// Trapezoidal integral of y(x) over a sampled grid.
inline double trapezoid(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw std::invalid_argument("trapezoid: size mismatch");
  double s = 0.0;
  for (std::size_t k = 1; k < x.size(); ++k) s += 0.5 * (y[k] + y[k - 1]) * (x[k] - x[k - 1]);
  return s;
}

/// Modeled t_q1 noise power over [0, f0/2] (s^2).
inline double in_band_noise_power(const CircuitParams& p, double cl, int n = 20001) {
  const double f_hi = 0.5 / p.t0;
  std::vector<double> f(n);
  for (int k = 0; k < n; ++k) f[k] = f_hi * (k + 1) / n;
  const auto s = output_noise_spectrum(p, cl, f);
  // Extend the first sample down to DC, where the spectrum is flat.
  return trapezoid(f, s.total) + s.total.front() * f.front();
}

}  // namespace dbpot::freqmodel
