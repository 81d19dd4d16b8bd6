#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "dbpot/constants.hpp"
#include "dbpot/electrochem.hpp"
#include "dbpot/fidigota.hpp"
#include "dbpot/pulse.hpp"

namespace dbpot::loopsim {

using electrochem::CalibrationCurve;
using electrochem::ElectrodeGeometry;
using electrochem::RandlesCell;
using fidigota::CircuitParams;
using pulse::DecodeResult;
using pulse::PulseStream;

struct ConstantSource {
  double current = 0.0;
};
/// Diffusion-limited steady state of a microdisc.
struct FerrocyanideSource {
  ElectrodeGeometry geom;
  double concentration = 0.0;
};
/// Chronoamperometric decay after a potential step at t = 0.
struct TransientSource {
  ElectrodeGeometry geom;
  double concentration = 0.0;
};
struct GlucoseSource {
  CalibrationCurve cal;
  double concentration = 0.0;
  double interferent = 0.0;  // A, added to the calibrated current
};
struct SineSource {
  double offset = 0.0;
  double amplitude = 0.0;
  double frequency = 0.0;
};

using FaradaicSource = std::variant<ConstantSource, FerrocyanideSource, TransientSource, GlucoseSource, SineSource>;

/// Faradaic current drawn from the regulated node at time t since the step.
inline double source_current(const FaradaicSource& src, double t) {
  return std::visit(
      [t](const auto& s) -> double {
        using S = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<S, ConstantSource>) {
          return s.current;
        } else if constexpr (std::is_same_v<S, FerrocyanideSource>) {
          return electrochem::limiting_current(s.geom, s.concentration);
        } else if constexpr (std::is_same_v<S, TransientSource>) {
          return electrochem::microdisc_transient(s.geom, s.concentration, t);
        } else if constexpr (std::is_same_v<S, GlucoseSource>) {
          return electrochem::glucose_current(s.cal, s.concentration).current + s.interferent;
        } else {
          return s.offset + s.amplitude * std::sin(2.0 * kPi * s.frequency * t);
        }
      },
      src);
}

struct LoopConfig {
  CircuitParams params;
  RandlesCell cell;
  FaradaicSource source = ConstantSource{};
  /// Reference setpoint (V); NaN selects Vdd / 2.
  double vref = std::numeric_limits<double>::quiet_NaN();
  double duration = 1.0;  // recorded time (s)
  double warmup = 0.0;    // simulated before recording starts (s)
  std::uint64_t seed = 1;
  bool input_noise = true;
  /// Random initial ramp position and direction.
  bool dither = true;
  /// Independent output-stage rail (V) for setpoints at or above Vdd.
  std::optional<double> ce_rail;
  /// Keep every k-th node voltage sample.
  std::size_t trace_decimation = 1;

  double resolved_vref() const { return std::isnan(vref) ? 0.5 * params.vdd : vref; }
  std::size_t samples() const { return std::size_t(std::floor(duration * params.fclk + 1e-9)); }
  std::size_t warmup_samples() const { return std::size_t(std::floor(warmup * params.fclk + 1e-9)); }

  void validate() const {
    params.validate();
    cell.validate();
    if (!(duration >= 10.0 * params.t0)) throw std::invalid_argument("LoopConfig: duration must be >= 10 T0");
    if (!(warmup >= 0.0)) throw std::invalid_argument("LoopConfig: warmup must be >= 0");
    if (trace_decimation < 1) throw std::invalid_argument("LoopConfig: trace_decimation must be >= 1");
    const double v = resolved_vref();
    if (ce_rail) {
      if (!(*ce_rail > 0.0) || !(v >= 0.0 && v < *ce_rail))
        throw std::invalid_argument("LoopConfig: vref must lie in [0, ce_rail)");
    } else if (!(v >= 0.0 && v < params.vdd)) {
      throw std::invalid_argument("LoopConfig: vref must lie in [0, vdd) without an external rail");
    }
  }
};

/// Node capacitance when loop-connected: CL in parallel with the cell Cp.
inline double loaded_capacitance(const LoopConfig& c) { return c.params.cl + c.cell.cp; }

class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Charge bookkeeping over the recorded window (C). The identity
/// injected = faradaic + rp_branch + rout_branch + stored holds per period.
struct ChargeLedger {
  double injected = 0.0;
  double faradaic = 0.0;
  double rp_branch = 0.0;
  double rout_branch = 0.0;
  double stored = 0.0;

  /// Charge delivered into the cell: faradaic, Rp and Cp displacement.
  double cell_total(double cp_share) const { return faradaic + rp_branch + stored * cp_share; }
  double residual() const { return injected - (faradaic + rp_branch + rout_branch + stored); }
};

struct ChronoResult {
  PulseStream stream;
  std::vector<double> v_node;  // V, end of each kept clock period
  double v_node_dt = 0.0;      // s between kept samples
  DecodeResult decoded;
  double settle_time = 0.0;
  double mean_v_node = 0.0;
  ChargeLedger charge;
  bool external_rail = false;
};

namespace detail {

inline double drive_current(OutputDrive d, const CircuitParams& p) {
  return d == OutputDrive::P ? p.ip : (d == OutputDrive::N ? -p.in : 0.0);
}

inline fidigota::DigotaState initial_state(const CircuitParams& p, bool dither, std::mt19937_64& rng) {
  auto s = fidigota::new_state(p);
  if (dither) {
    const double h = fidigota::ramp_half_swing(p);
    std::uniform_real_distribution<double> u(-h, h);
    s.vcm = p.vth_buff + u(rng);
    s.phase_up = std::bernoulli_distribution(0.5)(rng);
    s.d1 = s.d2 = s.q1 = s.q2 = s.vcm >= p.vth_buff;
    s.vib1 = s.vib2 = std::clamp(s.vcm, 0.0, p.vdd);
  }
  return s;
}

}  // namespace detail

/// Settling instant: the first time after which the cumulative decode stays
/// within 2% of the decode over the final quarter of the stream.
inline double settle_time(const PulseStream& s, double ip, double in) {
  const std::size_t m = s.length();
  const std::size_t tail = std::max<std::size_t>(1, m / 4);
  const double final_value = pulse::decode(s.slice(m - tail, m), ip, in).i_f;
  const double band = std::max(0.02 * std::abs(final_value), (ip + in) / double(tail));
  const auto est = pulse::running_estimate(s, ip, in, 0.0).estimate;
  std::size_t idx = m;
  for (std::size_t k = m; k-- > 0;) {
    if (std::abs(est[k] - final_value) > band) break;
    idx = k;
  }
  return double(idx) / s.fclk;
}

/// Closed-loop chronoamperometry.
///
/// Each clock edge the FI-DIGOTA samples vd = Vref - v_node (plus its input
/// noise) and selects the drive for the following period. Over that period
/// the node, CL and Cp to Vref in parallel with Rp and the output resistance
/// rout, is charged by the drive and discharged by the faradaic current; the
/// linear ODE is integrated exactly.
inline ChronoResult run_chrono(const LoopConfig& cfg) {
  cfg.validate();
  const auto& p = cfg.params;
  const double tclk = p.tclk();
  const double vref = cfg.resolved_vref();
  const double c_node = loaded_capacitance(cfg);
  const double g_node = 1.0 / p.rout + 1.0 / cfg.cell.rp;
  const double tau = c_node / g_node;
  const double decay = std::exp(-tclk / tau);
  const double area = tau * (1.0 - decay);  // integral of the decaying part over one period
  const double rail = cfg.ce_rail.value_or(p.vdd);
  const double limit = 10.0 * std::max(p.vdd, rail);

  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const double sigma_vn = cfg.input_noise ? std::sqrt(2.0 * kElementaryCharge * p.icm / (p.gm * p.gm) * p.fclk / 2.0) : 0.0;
  auto state = detail::initial_state(p, cfg.dither, rng);

  const std::size_t n_warm = cfg.warmup_samples();
  const std::size_t m = cfg.samples();
  ChronoResult r;
  r.external_rail = cfg.ce_rail.has_value() && vref >= p.vdd;
  r.stream.fclk = p.fclk;
  r.stream.states.reserve(m);
  r.v_node.reserve(m / cfg.trace_decimation + 1);
  r.v_node_dt = tclk * double(cfg.trace_decimation);

  double x = 0.0;
  double v_sum = 0.0;
  for (std::size_t k = 0; k < n_warm + m; ++k) {
    const double vd = -x + sigma_vn * gauss(rng);
    const OutputDrive d = fidigota::tick(state, vd, p);
    const double i_out = detail::drive_current(d, p);
    const double i_f = source_current(cfg.source, (double(k) + 0.5) * tclk);
    const double x_inf = (i_out - i_f) / g_node;
    const double x_next = x_inf + (x - x_inf) * decay;
    if (!std::isfinite(x_next) || std::abs(x_next) > limit)
      throw NumericalError("node voltage overflow at t = " + std::to_string(double(k + 1) * tclk) + " s (v_node = " +
                           std::to_string(vref + x_next) + " V)");
    if (k >= n_warm) {
      const double integral = x_inf * tclk + (x - x_inf) * area;
      r.charge.injected += i_out * tclk;
      r.charge.faradaic += i_f * tclk;
      r.charge.rp_branch += integral / cfg.cell.rp;
      r.charge.rout_branch += integral / p.rout;
      r.charge.stored += c_node * (x_next - x);
      r.stream.states.push_back(d);
      v_sum += vref + x_next;
      if ((k - n_warm) % cfg.trace_decimation == 0) r.v_node.push_back(vref + x_next);
    }
    x = x_next;
  }
  r.mean_v_node = v_sum / double(m);
  r.decoded = pulse::decode(r.stream, p.ip, p.in);
  r.settle_time = settle_time(r.stream, p.ip, p.in);
  return r;
}

/// Zero faradaic current streams with seeds seed, seed + 1, ...
inline std::vector<PulseStream> run_zero_input(const LoopConfig& cfg, int n_runs) {
  if (n_runs < 1) throw std::invalid_argument("run_zero_input: n_runs must be >= 1");
  std::vector<PulseStream> out;
  for (int k = 0; k < n_runs; ++k) {
    LoopConfig c = cfg;
    c.source = ConstantSource{0.0};
    c.seed = cfg.seed + std::uint64_t(k);
    out.push_back(run_chrono(c).stream);
  }
  return out;
}

struct ProbeOptions {
  /// Bias current (A); NaN takes the configured constant source, else 0.
  double bias = std::numeric_limits<double>::quiet_NaN();
  int min_periods = 20;
  double min_duration = 0.2;  // s
  double warmup = 0.05;       // s
};

struct ProbePoint {
  double f = 0.0;
  std::complex<double> h;  // s/A, pulse-width equivalent per faradaic current
  double magnitude = 0.0;
  double mag_db = 0.0;
  double phase_deg = 0.0;
  bool valid = true;
};

/// True when the output stays driven (no Z) for two full self-oscillation periods.
inline bool saturated(const PulseStream& s, double t0) {
  const std::size_t run_limit = std::size_t(std::ceil(2.0 * t0 * s.fclk));
  std::size_t run = 0;
  for (auto d : s.states) {
    run = d == OutputDrive::Z ? 0 : run + 1;
    if (run >= run_limit) return true;
  }
  return false;
}

/// Small-signal response of the closed loop at f_sig, measured as the
/// pulse-width equivalent output (T0 / 2 Ion per ampere of output current)
/// against a sinusoidal faradaic current. f_sig <= 0 runs a DC step probe.
inline ProbePoint small_signal_probe(const LoopConfig& cfg, double f_sig, double amplitude,
                                     const ProbeOptions& opt = {}) {
  const auto& p = cfg.params;
  if (!(amplitude > 0.0)) throw std::invalid_argument("small_signal_probe: amplitude must be > 0");
  if (f_sig >= 0.25 / p.t0) throw std::invalid_argument("small_signal_probe: f_sig must be below f0/4");
  double bias = opt.bias;
  if (std::isnan(bias)) {
    const auto* c = std::get_if<ConstantSource>(&cfg.source);
    bias = c ? c->current : 0.0;
  }
  const double k_tq = p.t0 / (2.0 * p.ion);
  LoopConfig c = cfg;
  c.warmup = std::max(cfg.warmup, opt.warmup);
  ProbePoint pt;
  pt.f = std::max(f_sig, 0.0);

  if (f_sig <= 0.0) {
    c.duration = std::max(opt.min_duration, 10.0 * p.t0);
    c.source = ConstantSource{bias};
    const auto lo = run_chrono(c);
    c.source = ConstantSource{bias + amplitude};
    const auto hi = run_chrono(c);
    pt.h = k_tq * (hi.decoded.i_f - lo.decoded.i_f) / amplitude;
    pt.valid = !saturated(lo.stream, p.t0) && !saturated(hi.stream, p.t0);
  } else {
    const double periods = std::ceil(std::max(double(opt.min_periods), opt.min_duration * f_sig));
    c.duration = periods / f_sig;
    c.source = SineSource{bias, amplitude, f_sig};
    const auto run = run_chrono(c);
    const auto& st = run.stream.states;
    const double m = double(st.size());
    double mean = 0.0;
    for (auto d : st) mean += detail::drive_current(d, p);
    mean /= m;
    std::complex<double> acc(0.0, 0.0);
    const double w = 2.0 * kPi * f_sig;
    const double tclk = p.tclk();
    const double t_start = double(c.warmup_samples()) * tclk;
    for (std::size_t k = 0; k < st.size(); ++k) {
      const double t = t_start + (double(k) + 0.5) * tclk;
      acc += (detail::drive_current(st[k], p) - mean) * std::polar(1.0, -w * t);
    }
    const std::complex<double> y = k_tq * 2.0 * acc / m;
    pt.h = y / std::complex<double>(0.0, -amplitude);
    pt.valid = !saturated(run.stream, p.t0);
  }
  pt.magnitude = std::abs(pt.h);
  pt.mag_db = 20.0 * std::log10(pt.magnitude);
  pt.phase_deg = std::arg(pt.h) * 180.0 / kPi;
  return pt;
}

struct MultidieSetpoint {
  LoopConfig config;  // params at their baseline cal codes; source is replaced
  double current = 0.0;
};

struct MultidieOptions {
  double spread = 0.10;
  int n_dice = 5;
  std::uint64_t seed = 1;
  double headroom = 1.25;
};

struct MultidieRow {
  double setpoint = 0.0;
  double vdd = 0.0;
  int cal_p = 0;
  int cal_n = 0;
  std::vector<double> decoded;
  double mean = 0.0;
  double sigma = 0.0;
  double min = 0.0;
  double max = 0.0;
  double norm_sigma = 0.0;
};

struct MultidieTable {
  std::vector<MultidieRow> rows;
  double mean_norm_sigma = 0.0;
};

/// Per-die process draw: mean-preserving lognormal multipliers on the
/// small-signal parameters and on each of the 256 unit cells per rail.
struct DieSample {
  double gm = 1, r0 = 1, cfi = 1, icm = 1, t0 = 1;
  std::vector<double> unit_p, unit_n;

  static DieSample draw(double spread, std::uint64_t seed, int die) {
    std::seed_seq seq{std::uint64_t(seed), std::uint64_t(die), std::uint64_t(0x6d756c7469ULL)};
    std::mt19937_64 rng(seq);
    std::normal_distribution<double> gauss(0.0, 1.0);
    const double s_ln = std::sqrt(std::log1p(spread * spread));
    auto mult = [&] { return std::exp(s_ln * gauss(rng) - 0.5 * s_ln * s_ln); };
    DieSample d;
    d.gm = mult();
    d.r0 = mult();
    d.cfi = mult();
    d.icm = mult();
    d.t0 = mult();
    d.unit_p.resize(fidigota::kCalCodes);
    d.unit_n.resize(fidigota::kCalCodes);
    for (double& u : d.unit_p) u = mult();
    for (double& u : d.unit_n) u = mult();
    return d;
  }

  /// Applies the draw to nominal parameters trimmed to the given codes.
  CircuitParams apply(const CircuitParams& nominal_base, int code_p, int code_n) const {
    CircuitParams q = fidigota::trim_output_stage(nominal_base, code_p, code_n);
    q.gm *= gm;
    q.r0 *= r0;
    q.cfi *= cfi;
    q.icm *= icm;
    q.t0 *= t0;
    const double unit_ip = nominal_base.ip / double(nominal_base.cal_p + 1);
    const double unit_in = nominal_base.in / double(nominal_base.cal_n + 1);
    double sp = 0.0, sn = 0.0;
    for (int j = 0; j <= code_p; ++j) sp += unit_p[std::size_t(j)];
    for (int j = 0; j <= code_n; ++j) sn += unit_n[std::size_t(j)];
    q.ip = unit_ip * sp;
    q.in = unit_in * sn;
    return q;
  }
};

/// Readout statistics across simulated dice. Each die decodes with the
/// nominal trimmed ip and in; all dice share the noise seed of the setpoint.
inline MultidieTable multidie_montecarlo(const std::vector<MultidieSetpoint>& setpoints, const MultidieOptions& opt) {
  if (opt.n_dice < 5) throw std::invalid_argument("multidie_montecarlo: n_dice must be >= 5");
  if (!(opt.spread >= 0.0)) throw std::invalid_argument("multidie_montecarlo: spread must be >= 0");
  if (setpoints.empty()) throw std::invalid_argument("multidie_montecarlo: no setpoints");
  std::vector<DieSample> dice;
  for (int d = 0; d < opt.n_dice; ++d) dice.push_back(DieSample::draw(opt.spread, opt.seed, d));

  MultidieTable table;
  for (const auto& sp : setpoints) {
    if (!(sp.current > 0.0)) throw std::invalid_argument("multidie_montecarlo: setpoints must be > 0");
    const auto& base = sp.config.params;
    const auto nominal = fidigota::balanced_trim(base, sp.current, opt.headroom);
    MultidieRow row;
    row.setpoint = sp.current;
    row.vdd = base.vdd;
    row.cal_p = nominal.cal_p;
    row.cal_n = nominal.cal_n;
    for (const auto& die : dice) {
      LoopConfig c = sp.config;
      c.params = die.apply(base, nominal.cal_p, nominal.cal_n);
      c.source = ConstantSource{sp.current};
      const auto run = run_chrono(c);
      row.decoded.push_back(pulse::decode(run.stream, nominal.ip, nominal.in).i_f);
    }
    const double n = double(row.decoded.size());
    row.min = *std::min_element(row.decoded.begin(), row.decoded.end());
    row.max = *std::max_element(row.decoded.begin(), row.decoded.end());
    // Shifted sum so identical dice give exactly zero spread.
    const double ref = row.decoded.front();
    double shift = 0.0;
    for (double v : row.decoded) shift += v - ref;
    row.mean = ref + shift / n;
    double ss = 0.0;
    for (double v : row.decoded) ss += (v - row.mean) * (v - row.mean);
    row.sigma = std::sqrt(ss / (n - 1.0));
    row.norm_sigma = row.sigma / sp.current;
    table.mean_norm_sigma += row.norm_sigma;
    table.rows.push_back(std::move(row));
  }
  table.mean_norm_sigma /= double(table.rows.size());
  return table;
}

}  // namespace dbpot::loopsim
