#pragma once

#include <cmath>
#include <complex>
#include <stdexcept>
#include <string>
#include <vector>

#include "dbpot/constants.hpp"

namespace dbpot::electrochem {

/// Ferrocyanide diffusion coefficient in aqueous electrolyte (m^2/s).
inline constexpr double kFerrocyanideDiffusion = 6.67e-10;

/// Randles equivalent: Rs in series with Rp parallel to Cp.
/// The interfacial CPE is approximated by the ideal capacitor Cp.
struct RandlesCell {
  double rp = 220e6;
  double cp = 7e-9;
  double rs = 0.0;
  /// Reserved CPE exponent. Only the ideal capacitor (1.0) is modeled.
  double cpe_alpha = 1.0;

  void validate() const {
    std::string bad;
    if (!(rp > 0.0)) bad += " rp";
    if (!(cp > 0.0)) bad += " cp";
    if (!(rs >= 0.0)) bad += " rs";
    if (cpe_alpha != 1.0) bad += " cpe_alpha";
    if (!bad.empty()) throw std::invalid_argument("invalid RandlesCell field(s):" + bad);
  }
};

struct ElectrodeGeometry {
  double radius = 25e-6;  // m
  int electrons = 1;
  double diffusion = kFerrocyanideDiffusion;  // m^2/s
  double faraday = kFaraday;

  void validate() const {
    std::string bad;
    if (!(radius > 0.0)) bad += " radius";
    if (electrons < 1) bad += " electrons";
    if (!(diffusion > 0.0)) bad += " diffusion";
    if (!(faraday > 0.0)) bad += " faraday";
    if (!bad.empty()) throw std::invalid_argument("invalid ElectrodeGeometry field(s):" + bad);
  }
};

/// Steady-state microdisc current 4 n F D c a.
inline double limiting_current(const ElectrodeGeometry& g, double c) {
  g.validate();
  if (!(c >= 0.0)) throw std::invalid_argument("limiting_current: concentration must be >= 0");
  return 4.0 * g.electrons * g.faraday * g.diffusion * c * g.radius;
}

/// Dimensionless microdisc current versus tau = 4 D t / a^2 (Shoup-Szabo form).
inline double microdisc_shape(double tau) {
  if (!(tau > 0.0)) throw std::domain_error("microdisc_shape: tau must be > 0");
  const double x = 1.0 / std::sqrt(tau);
  return 0.7854 + 0.8862 * x + 0.2146 * std::exp(-0.7823 * x);
}

inline double dimensionless_time(const ElectrodeGeometry& g, double t) {
  return 4.0 * g.diffusion * t / (g.radius * g.radius);
}

/// Chronoamperometric current after a diffusion-limited potential step.
inline double microdisc_transient(const ElectrodeGeometry& g, double c, double t) {
  if (!(t > 0.0)) throw std::domain_error("microdisc_transient: t must be > 0");
  return limiting_current(g, c) * microdisc_shape(dimensionless_time(g, t));
}

/// Planar Cottrell current over the disc area, the short-time limit of the transient.
inline double cottrell_current(const ElectrodeGeometry& g, double c, double t) {
  if (!(t > 0.0)) throw std::domain_error("cottrell_current: t must be > 0");
  return g.electrons * g.faraday * c * std::sqrt(g.diffusion / (kPi * t)) * kPi * g.radius * g.radius;
}

inline std::complex<double> randles_impedance(const RandlesCell& cell, double f) {
  cell.validate();
  if (!(f >= 0.0)) throw std::invalid_argument("randles_impedance: f must be >= 0");
  const std::complex<double> jw(0.0, 2.0 * kPi * f);
  return cell.rs + cell.rp / (1.0 + jw * cell.rp * cell.cp);
}

/// Diffusion-controlled ferrocyanide oxidation current (n = 1).
inline double ferrocyanide_current(double radius, double c, double diffusion = kFerrocyanideDiffusion) {
  ElectrodeGeometry g;
  g.radius = radius;
  g.diffusion = diffusion;
  return limiting_current(g, c);
}

struct CalibrationSegment {
  double c_lo;       // mol/m^3
  double c_hi;       // mol/m^3
  double slope;      // A per mol/m^3
  double intercept;  // A
  double at(double c) const { return intercept + slope * c; }
};

struct CalibrationCurve {
  std::vector<CalibrationSegment> segments;
  double lod = 0.53;  // mol/m^3

  void validate() const {
    if (segments.empty()) throw std::invalid_argument("CalibrationCurve: no segments");
    if (!(lod > 0.0)) throw std::invalid_argument("CalibrationCurve: lod must be > 0");
    for (std::size_t k = 0; k < segments.size(); ++k) {
      const auto& s = segments[k];
      if (!std::isfinite(s.slope) || !std::isfinite(s.intercept))
        throw std::invalid_argument("CalibrationCurve: non-finite segment coefficients");
      if (!(s.c_hi > s.c_lo)) throw std::invalid_argument("CalibrationCurve: empty segment range");
      if (k > 0 && segments[k - 1].c_hi != s.c_lo)
        throw std::invalid_argument("CalibrationCurve: segments must be contiguous");
    }
  }

  double c_min() const { return segments.front().c_lo; }
  double c_max() const { return segments.back().c_hi; }

  /// Builds contiguous segments over `knots` with intercepts chosen for continuity.
  /// `i0` is the current at knots[0].
  static CalibrationCurve continuous(const std::vector<double>& knots, const std::vector<double>& slopes,
                                     double i0, double lod) {
    if (knots.size() != slopes.size() + 1 || slopes.empty())
      throw std::invalid_argument("CalibrationCurve::continuous: need one more knot than slopes");
    CalibrationCurve cal;
    cal.lod = lod;
    double i = i0;
    for (std::size_t k = 0; k < slopes.size(); ++k) {
      cal.segments.push_back({knots[k], knots[k + 1], slopes[k], i - slopes[k] * knots[k]});
      i += slopes[k] * (knots[k + 1] - knots[k]);
    }
    cal.validate();
    return cal;
  }
};

/// Two-segment glucose calibration: 0.5 nA/mM from 2 to 20 mM (through the
/// origin), 0.3 nA/mM from 20 to 50 mM, LoD 0.53 mM.
inline CalibrationCurve default_glucose_calibration(double breakpoint = 20.0, double lower_slope = 0.5e-9,
                                                    double upper_slope = 0.3e-9, double lod = 0.53) {
  return CalibrationCurve::continuous({2.0, breakpoint, 50.0}, {lower_slope, upper_slope}, lower_slope * 2.0, lod);
}

struct GlucoseReading {
  double current = 0.0;
  bool below_lod = false;
  bool extrapolated = false;
};

inline GlucoseReading glucose_current(const CalibrationCurve& cal, double c) {
  cal.validate();
  if (!(c >= 0.0)) throw std::invalid_argument("glucose_current: concentration must be >= 0");
  GlucoseReading r;
  if (c < cal.lod) {
    r.below_lod = true;
    return r;
  }
  const CalibrationSegment* seg = &cal.segments.front();
  for (const auto& s : cal.segments)
    if (c >= s.c_lo) seg = &s;
  r.extrapolated = c < cal.c_min() || c > cal.c_max();
  r.current = seg->at(c);
  return r;
}

}  // namespace dbpot::electrochem
