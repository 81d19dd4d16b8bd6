#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace dbpot {

/// Three-state output of the DIGOTA output stage for one clock period.
enum class OutputDrive : char { P = 'P', N = 'N', Z = 'Z' };

}  // namespace dbpot

namespace dbpot::fidigota {

inline constexpr int kCalCodes = 256;

/// Behavioral and small-signal parameters. Keys in config files match the
/// member names. `ip` and `in` hold the drive at the current cal codes.
struct CircuitParams {
  double vdd = 0.4;
  double fclk = 50e3;
  double t0 = 103e-6;
  double gm = 61e-9;
  double r0 = 89e9;
  double cfi = 1.9e-15;
  double icm = 0.8e-12;
  double ion = 8.1e-9;
  double ip = 4.89e-9;
  double in = 10.16e-9;
  double rout = 102e3;
  double cl = 10e-12;
  double vth_buff = 0.2;
  int cal_p = 1;
  int cal_n = 1;

  double tclk() const { return 1.0 / fclk; }

  std::vector<std::string> invalid_fields() const {
    std::vector<std::string> bad;
    auto pos = [&](double v, const char* name) {
      if (!(v > 0.0) || !std::isfinite(v)) bad.emplace_back(name);
    };
    pos(vdd, "vdd");
    pos(fclk, "fclk");
    pos(t0, "t0");
    pos(gm, "gm");
    pos(r0, "r0");
    pos(cfi, "cfi");
    pos(icm, "icm");
    pos(ion, "ion");
    pos(ip, "ip");
    pos(in, "in");
    pos(rout, "rout");
    pos(cl, "cl");
    pos(vth_buff, "vth_buff");
    if (fclk > 0.0 && t0 > 0.0 && !(tclk() < t0)) bad.emplace_back("fclk (Tclk must be < t0)");
    if (vth_buff > 0.0 && vdd > 0.0 && !(vth_buff < vdd)) bad.emplace_back("vth_buff (must be < vdd)");
    if (ion > 0.0) {
      if (ip > 0.0 && (ip > 10.0 * ion || ip < 0.1 * ion)) bad.emplace_back("ip (not within 10x of ion)");
      if (in > 0.0 && (in > 10.0 * ion || in < 0.1 * ion)) bad.emplace_back("in (not within 10x of ion)");
    }
    if (cal_p < 0 || cal_p >= kCalCodes) bad.emplace_back("cal_p");
    if (cal_n < 0 || cal_n >= kCalCodes) bad.emplace_back("cal_n");
    return bad;
  }

  void validate() const {
    const auto bad = invalid_fields();
    if (bad.empty()) return;
    std::string msg = "invalid CircuitParams:";
    for (const auto& b : bad) msg += " " + b + ";";
    throw std::invalid_argument(msg);
  }
};

/// Vdd = 0.4 V parameter set with the baseline output stage (cal = 1).
inline CircuitParams reference_params() { return CircuitParams{}; }

struct DigotaState {
  double vib1 = 0.0;
  double vib2 = 0.0;
  bool d1 = false;
  bool d2 = false;
  bool q1 = false;
  bool q2 = false;
  bool phase_up = true;
  double t = 0.0;
  /// Common-mode ramp voltage.
  double vcm = 0.0;
  /// Differential output of the input stage, gm r0 vd low-passed by r0 Cfi.
  double vdiff = 0.0;
};

inline DigotaState new_state(const CircuitParams& p) {
  p.validate();
  return DigotaState{};
}

/// Half swing of the common-mode ramp between resets.
inline double ramp_half_swing(const CircuitParams& p) { return std::min(p.vth_buff, p.vdd - p.vth_buff); }

/// Common-mode charging current that makes the zero-input alternation period
/// equal to T0: 2 Cfi Vth / T0 (Vth taken as the smaller rail distance).
inline double calibrate_slopes(const CircuitParams& p) { return 2.0 * p.cfi * ramp_half_swing(p) / p.t0; }

inline OutputDrive drive_of(bool q1, bool q2) {
  if (!q1 && q2) return OutputDrive::P;
  if (q1 && !q2) return OutputDrive::N;
  return OutputDrive::Z;
}

/// Advances the FI-DIGOTA by one clock period with differential input `vd`.
///
/// Both integrators ramp at Icm_eff/Cfi; the input stage adds a differential
/// component that follows gm r0 vd through the r0 Cfi pole and is scaled so
/// the crossing-time difference is (Cfi/Icm) times the differential voltage.
/// Buffers latch on crossings within a half cycle and the D-FFs sample them
/// at the clock edge. A (1,1) or (0,0) sample triggers the common-mode reset,
/// which reflects the ramp so the alternation period stays at T0.
inline OutputDrive tick(DigotaState& s, double vd, const CircuitParams& p) {
  const double tclk = p.tclk();
  const double h = ramp_half_swing(p);
  const double icm_eff = calibrate_slopes(p);
  const double slope = icm_eff / p.cfi;
  const double a = std::exp(-tclk / (p.r0 * p.cfi));

  s.vdiff = s.vdiff * a + p.gm * p.r0 * vd * (1.0 - a);
  s.vcm += s.phase_up ? slope * tclk : -slope * tclk;

  const double half = 0.5 * (icm_eff / p.icm) * s.vdiff;
  const double raw1 = s.vcm - half;
  const double raw2 = s.vcm + half;
  if (s.phase_up) {
    s.d1 = s.d1 || raw1 >= p.vth_buff;
    s.d2 = s.d2 || raw2 >= p.vth_buff;
  } else {
    s.d1 = s.d1 && raw1 >= p.vth_buff;
    s.d2 = s.d2 && raw2 >= p.vth_buff;
  }
  s.q1 = s.d1;
  s.q2 = s.d2;
  s.vib1 = std::clamp(raw1, 0.0, p.vdd);
  s.vib2 = std::clamp(raw2, 0.0, p.vdd);

  if (s.phase_up && s.q1 && s.q2) {
    const double e = std::min(s.vcm - p.vth_buff, h);
    s.vcm = p.vth_buff + h - e;
    s.phase_up = false;
  } else if (!s.phase_up && !s.q1 && !s.q2) {
    const double e = std::min(p.vth_buff - s.vcm, h);
    s.vcm = p.vth_buff - h + e;
    s.phase_up = true;
  }
  s.t += tclk;
  return drive_of(s.q1, s.q2);
}

/// Relative drive strength of an 8-bit calibration code: (code + 1) / 256.
inline double cal_strength(int code) {
  if (code < 0 || code >= kCalCodes) throw std::out_of_range("calibration code must be in [0, 255]");
  return double(code + 1) / double(kCalCodes);
}

/// Rescales ip and in from the current cal codes to new ones.
inline CircuitParams trim_output_stage(const CircuitParams& p, int cal_p, int cal_n) {
  const double sp = cal_strength(cal_p);
  const double sn = cal_strength(cal_n);
  CircuitParams q = p;
  q.ip = p.ip * sp / cal_strength(p.cal_p);
  q.in = p.in * sn / cal_strength(p.cal_n);
  q.cal_p = cal_p;
  q.cal_n = cal_n;
  return q;
}

/// Smallest code whose drive is at least `target` given the drive `base` at
/// code `base_code`.
inline int select_cal_code(double base, int base_code, double target) {
  const double unit = base / double(base_code + 1);
  const double units = std::ceil(target / unit - 1e-9);
  return std::clamp(int(units) - 1, 0, kCalCodes - 1);
}

/// Source rail trimmed to the smallest code delivering `headroom` times
/// |target|; sink rail trimmed to the smallest code matching that source
/// drive, which keeps the output stage close to symmetric.
inline CircuitParams balanced_trim(const CircuitParams& p, double target, double headroom) {
  const int code_p = select_cal_code(p.ip, p.cal_p, headroom * std::abs(target));
  const double ip = p.ip * cal_strength(code_p) / cal_strength(p.cal_p);
  const int code_n = select_cal_code(p.in, p.cal_n, ip);
  return trim_output_stage(p, code_p, code_n);
}

}  // namespace dbpot::fidigota
