#pragma once

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "dbpot/config.hpp"
#include "dbpot/electrochem.hpp"
#include "dbpot/fidigota.hpp"
#include "dbpot/fit.hpp"
#include "dbpot/freqmodel.hpp"
#include "dbpot/loopsim.hpp"
#include "dbpot/pulse.hpp"
#include "dbpot/spectral.hpp"

namespace dbpot::cli {

namespace fs = std::filesystem;
using config::Config;
using config::ConfigError;

inline constexpr const char* kToolName = "dbpot";
inline constexpr const char* kToolVersion = "1.0.0";

enum ExitCode : int { kExitOk = 0, kExitUsage = 2, kExitNumerical = 3 };

inline const std::vector<std::string>& commands() {
  static const std::vector<std::string> names{"bode",       "noise",    "chrono", "ferro-sweep",
                                              "glucose-cal", "multidie", "decode", "fit"};
  return names;
}

inline const std::set<std::string>& experiment_keys() {
  static const std::set<std::string> keys = [] {
    std::set<std::string> k;
    for (const char* name :
         {"type", "presets", "preset_limits", "duration", "warmup", "seed", "vref", "input_noise", "dither",
          "trace_decimation", "ce_rail", "headroom", "auto_trim",
          // bode
          "model_points", "f_min", "probe_per_decade", "probe_f_min", "probe_bias_fraction",
          "probe_amplitude_fraction", "probe_min_periods", "probe_min_duration", "probe_symmetric",
          // noise
          "n_runs", "welch_segments", "noise_window", "slope_f_lo", "i_max",
          // chrono and sweeps
          "source", "current", "concentration", "radius", "diffusion", "electrons", "radii", "concentrations",
          "setpoints",
          // glucose
          "n_blanks", "blank_sigma", "breakpoint", "lower_slope", "upper_slope", "lod", "interferent",
          "interferent_concentration", "noiseless",
          // multidie
          "spread", "n_dice",
          // decode and fit
          "input", "window", "tolerance"})
      k.insert(std::string("experiment.") + name);
    for (const auto& c : config::cell_keys()) k.insert("cell." + c);
    return k;
  }();
  return keys;
}

/// Fixed-format number rendering so CSVs are byte-reproducible.
inline std::string num(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}
inline std::string num(long long v) { return std::to_string(v); }
inline std::string num(int v) { return std::to_string(v); }
inline std::string num(std::int64_t v, int) { return std::to_string(v); }

/// Run state shared by all commands: resolved config, output directory and
/// the list of files written.
struct RunContext {
  std::string command;
  Config cfg;
  fs::path out_dir;
  std::uint64_t seed = 1;
  std::vector<std::string> outputs;

  fs::path file(const std::string& name) {
    outputs.push_back(name);
    return out_dir / name;
  }
};

class CsvWriter {
 public:
  CsvWriter(const fs::path& path, const std::vector<std::string>& header) : out_(path, std::ios::binary) {
    if (!out_) throw ConfigError("cannot write '" + path.string() + "'");
    row(header);
  }
  void row(const std::vector<std::string>& cells) {
    for (std::size_t k = 0; k < cells.size(); ++k) out_ << (k ? "," : "") << cells[k];
    out_ << '\n';
  }

 private:
  std::ofstream out_;
};

/// Writes `metric,value` rows.
inline void write_metrics(RunContext& ctx, const std::string& name,
                          const std::vector<std::pair<std::string, std::string>>& rows) {
  CsvWriter w(ctx.file(name), {"metric", "value"});
  for (const auto& [k, v] : rows) w.row({k, v});
}

/// One circuit parameter set with its cell and the largest current it serves.
struct ParamSet {
  std::string label;
  fidigota::CircuitParams params;  // at the configured cal codes
  electrochem::RandlesCell cell;
  double limit = std::numeric_limits<double>::infinity();
};

namespace detail {

inline std::set<std::string> circuit_key_set() {
  return {config::circuit_keys().begin(), config::circuit_keys().end()};
}

inline fs::path resolve(const Config& cfg, const std::string& p) {
  fs::path path(p);
  return (path.is_absolute() ? path : cfg.base_dir() / path).lexically_normal();
}

/// Overlays the top-level circuit keys and [cell] keys of `top` onto `base`.
inline Config overlay(const Config& base, const Config& top) {
  Config merged = base;
  for (const auto& k : config::circuit_keys())
    if (top.has(k)) merged.set(k, top.get_string(k));
  for (const auto& k : config::cell_keys())
    if (top.has("cell." + k)) merged.set("cell." + k, top.get_string("cell." + k));
  return merged;
}

}  // namespace detail

/// Parameter sets named by `experiment.presets`, each overlaid with the
/// top-level keys of the experiment config. Without presets the experiment
/// config itself is the only set.
inline std::vector<ParamSet> param_sets(const Config& cfg) {
  std::vector<ParamSet> sets;
  if (!cfg.has("experiment.presets")) {
    sets.push_back({cfg.path().empty() ? "config" : cfg.path().stem().string(), config::circuit_params(cfg),
                    config::cell_params(cfg), std::numeric_limits<double>::infinity()});
    return sets;
  }
  const auto files = cfg.get_strings("experiment.presets");
  if (files.empty()) throw ConfigError("config key 'experiment.presets': empty list");
  std::vector<double> limits;
  if (cfg.has("experiment.preset_limits")) {
    limits = cfg.get_doubles("experiment.preset_limits");
    if (limits.size() != files.size())
      throw ConfigError("config key 'experiment.preset_limits': needs one entry per preset");
  }
  for (std::size_t k = 0; k < files.size(); ++k) {
    const auto path = detail::resolve(cfg, files[k]);
    Config preset;
    try {
      preset = Config::load(path);
    } catch (const ConfigError& e) {
      throw ConfigError("config key 'experiment.presets': " + std::string(e.what()));
    }
    preset.check_keys(detail::circuit_key_set(), {"cell"}, experiment_keys());
    const Config merged = detail::overlay(preset, cfg);
    ParamSet s;
    s.label = path.stem().string();
    s.params = config::circuit_params(merged);
    s.cell = config::cell_params(merged);
    s.limit = limits.empty() ? std::numeric_limits<double>::infinity() : limits[k];
    sets.push_back(s);
  }
  return sets;
}

/// First set whose limit covers |current|; the last set otherwise.
inline const ParamSet& pick_param_set(const std::vector<ParamSet>& sets, double current) {
  for (const auto& s : sets)
    if (std::abs(current) <= s.limit) return s;
  return sets.back();
}

inline loopsim::LoopConfig loop_config(const RunContext& ctx, const ParamSet& set, double default_duration) {
  const auto& c = ctx.cfg;
  loopsim::LoopConfig lc;
  lc.params = set.params;
  lc.cell = set.cell;
  lc.duration = c.get_double("experiment.duration", default_duration);
  lc.warmup = c.get_double("experiment.warmup", 0.1);
  lc.seed = ctx.seed;
  if (c.has("experiment.vref")) lc.vref = c.get_double("experiment.vref");
  lc.input_noise = c.get_bool("experiment.input_noise", true);
  lc.dither = c.get_bool("experiment.dither", true);
  const long long dec = c.get_int("experiment.trace_decimation", 1);
  if (dec < 1) throw ConfigError("config key 'experiment.trace_decimation': must be >= 1");
  lc.trace_decimation = std::size_t(dec);
  if (c.has("experiment.ce_rail")) lc.ce_rail = c.get_double("experiment.ce_rail");
  if (!(lc.duration >= 10.0 * lc.params.t0)) throw ConfigError("config key 'experiment.duration': must be >= 10 t0");
  if (!(lc.warmup >= 0.0)) throw ConfigError("config key 'experiment.warmup': must be >= 0");
  try {
    lc.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config key 'experiment.vref': ") + e.what());
  }
  return lc;
}

/// Trims the output stage for a target current unless auto_trim is off.
inline fidigota::CircuitParams trimmed_for(const RunContext& ctx, const fidigota::CircuitParams& p, double target) {
  if (!ctx.cfg.get_bool("experiment.auto_trim", true) || target == 0.0) return p;
  const double headroom = ctx.cfg.get_double("experiment.headroom", 1.6);
  if (!(headroom >= 1.0)) throw ConfigError("config key 'experiment.headroom': must be >= 1");
  auto q = fidigota::balanced_trim(p, target, headroom);
  const auto bad = q.invalid_fields();
  if (!bad.empty())
    throw ConfigError("setpoint " + num(target) + " A exceeds the output stage of the selected preset (" + bad.front() +
                      "); adjust 'experiment.preset_limits'");
  return q;
}

inline electrochem::ElectrodeGeometry geometry(const Config& c) {
  electrochem::ElectrodeGeometry g;
  g.radius = c.get_double("experiment.radius", g.radius);
  g.diffusion = c.get_double("experiment.diffusion", g.diffusion);
  const long long n = c.get_int("experiment.electrons", g.electrons);
  if (!(g.radius > 0.0)) throw ConfigError("config key 'experiment.radius': must be > 0");
  if (!(g.diffusion > 0.0)) throw ConfigError("config key 'experiment.diffusion': must be > 0");
  if (n < 1) throw ConfigError("config key 'experiment.electrons': must be >= 1");
  g.electrons = int(n);
  return g;
}

inline electrochem::CalibrationCurve glucose_calibration(const Config& c) {
  const double bp = c.get_double("experiment.breakpoint", 20.0);
  const double lo = c.get_double("experiment.lower_slope", 0.5e-9);
  const double hi = c.get_double("experiment.upper_slope", 0.3e-9);
  const double lod = c.get_double("experiment.lod", 0.53);
  if (!(bp > 2.0 && bp < 50.0)) throw ConfigError("config key 'experiment.breakpoint': must lie in (2, 50) mM");
  if (!(lod > 0.0)) throw ConfigError("config key 'experiment.lod': must be > 0");
  return electrochem::default_glucose_calibration(bp, lo, hi, lod);
}

struct LinearFit {
  double slope = 0.0;
  double intercept = 0.0;
  double r2 = 0.0;
  double sse = 0.0;
};

inline LinearFit linear_fit(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = double(x.size());
  double mx = 0, my = 0;
  for (std::size_t k = 0; k < x.size(); ++k) {
    mx += x[k];
    my += y[k];
  }
  mx /= n;
  my /= n;
  double sxx = 0, sxy = 0, syy = 0;
  for (std::size_t k = 0; k < x.size(); ++k) {
    sxx += (x[k] - mx) * (x[k] - mx);
    sxy += (x[k] - mx) * (y[k] - my);
    syy += (y[k] - my) * (y[k] - my);
  }
  LinearFit f;
  f.slope = sxy / sxx;
  f.intercept = my - f.slope * mx;
  for (std::size_t k = 0; k < x.size(); ++k) {
    const double e = y[k] - (f.intercept + f.slope * x[k]);
    f.sse += e * e;
  }
  f.r2 = syy > 0.0 ? 1.0 - f.sse / syy : 1.0;
  return f;
}

// ---------------------------------------------------------------------------
// Commands

inline void cmd_bode(RunContext& ctx) {
  const auto& c = ctx.cfg;
  const auto sets = param_sets(c);
  const int model_points = int(c.get_int("experiment.model_points", 200));
  const double f_min = c.get_double("experiment.f_min", 1.0);
  const int per_decade = int(c.get_int("experiment.probe_per_decade", 5));
  const double probe_f_min = c.get_double("experiment.probe_f_min", 10.0);
  const double bias_frac = c.get_double("experiment.probe_bias_fraction", 0.3);
  const double amp_frac = c.get_double("experiment.probe_amplitude_fraction", 0.1);
  const bool symmetric = c.get_bool("experiment.probe_symmetric", true);
  if (model_points < 2) throw ConfigError("config key 'experiment.model_points': must be >= 2");
  if (per_decade < 1) throw ConfigError("config key 'experiment.probe_per_decade': must be >= 1");
  if (!(f_min > 0.0)) throw ConfigError("config key 'experiment.f_min': must be > 0");
  if (!(probe_f_min > 0.0)) throw ConfigError("config key 'experiment.probe_f_min': must be > 0");
  if (!(amp_frac > 0.0)) throw ConfigError("config key 'experiment.probe_amplitude_fraction': must be > 0");
  loopsim::ProbeOptions popt;
  popt.min_periods = int(c.get_int("experiment.probe_min_periods", popt.min_periods));
  popt.min_duration = c.get_double("experiment.probe_min_duration", popt.min_duration);

  CsvWriter summary(ctx.file("bode_summary.csv"), {"set", "vdd_V", "ion_A", "stf_dc_s_per_A", "loop_gain_dc",
                                                   "stf_limit_s_per_A", "f0_hz"});
  for (const auto& set : sets) {
    const double cl = set.params.cl + set.cell.cp;
    const auto tf = freqmodel::stf(set.params, cl);
    const double f0 = 1.0 / set.params.t0;
    summary.row({set.label, num(set.params.vdd), num(set.params.ion), num(tf.dc()),
                 num(freqmodel::block_gains(set.params, cl).loop_gain_dc()), num(set.params.t0 / (2.0 * set.params.ion)),
                 num(f0)});
    {
      CsvWriter w(ctx.file("bode_model_" + set.label + ".csv"), {"f_hz", "mag_db", "phase_deg"});
      w.row({num(0.0), num(20.0 * std::log10(tf.dc())), num(0.0)});
      for (double f : freqmodel::log_grid(f_min, 0.5 * f0, model_points)) {
        const auto b = freqmodel::bode_point(tf, f);
        w.row({num(b.f), num(b.mag_db), num(b.phase_deg)});
      }
    }
    ParamSet probe_set = set;
    if (symmetric) probe_set.params.ip = probe_set.params.in = probe_set.params.ion;
    auto lc = loop_config(ctx, probe_set, 1.0);
    popt.bias = bias_frac * set.params.ion;
    const double amp = amp_frac * set.params.ion;
    std::vector<double> freqs{0.0};
    for (int k = 0;; ++k) {
      const double f = probe_f_min * std::pow(10.0, double(k) / per_decade);
      if (f >= 0.25 * f0) break;
      freqs.push_back(f);
    }
    CsvWriter w(ctx.file("bode_sim_" + set.label + ".csv"), {"f_hz", "mag_db", "phase_deg", "model_mag_db", "valid"});
    for (double f : freqs) {
      const auto pt = loopsim::small_signal_probe(lc, f, amp, popt);
      const double model = f > 0.0 ? freqmodel::bode_point(tf, f).mag_db : 20.0 * std::log10(tf.dc());
      w.row({num(f), num(pt.mag_db), num(pt.phase_deg), num(model), pt.valid ? "1" : "0"});
    }
  }
}

inline void cmd_noise(RunContext& ctx) {
  const auto& c = ctx.cfg;
  const auto sets = param_sets(c);
  const auto& set = sets.front();
  const auto lc = loop_config(ctx, set, 5.0);
  const auto& p = lc.params;
  const long long n_runs = c.get_int("experiment.n_runs", 10);
  const long long segments = c.get_int("experiment.welch_segments", 8);
  const double slope_lo = c.get_double("experiment.slope_f_lo", 10.0);
  const double i_max = c.get_double("experiment.i_max", 175e-9);
  if (n_runs < 1) throw ConfigError("config key 'experiment.n_runs': must be >= 1");
  if (segments < 2) throw ConfigError("config key 'experiment.welch_segments': must be >= 2");
  if (!(slope_lo > 0.0)) throw ConfigError("config key 'experiment.slope_f_lo': must be > 0");
  if (!(i_max > 0.0)) throw ConfigError("config key 'experiment.i_max': must be > 0");

  const auto streams = loopsim::run_zero_input(lc, int(n_runs));
  const std::size_t m = streams.front().length();
  const long long window = c.get_int("experiment.noise_window", (long long)pulse::default_noise_window(m));
  if (window < 1) throw ConfigError("config key 'experiment.noise_window': must be >= 1");
  const std::size_t seg = spectral::default_segment_length(m, int(segments));

  spectral::Spectrum sim;
  for (const auto& s : streams) {
    const auto y = pulse::tq1_trace(s, p.ip, p.in, p.t0, p.ion);
    auto w = spectral::psd_welch(y, p.fclk, seg, 0.5);
    if (sim.f.empty()) {
      sim = std::move(w);
    } else {
      for (std::size_t k = 0; k < sim.value.size(); ++k) sim.value[k] += w.value[k];
    }
  }
  for (double& v : sim.value) v /= double(streams.size());

  const double cl = p.cl + lc.cell.cp;
  const double f_half = 0.5 / p.t0;
  std::vector<double> grid;
  for (double f : sim.f)
    if (f > 0.0 && f <= f_half) grid.push_back(f);
  if (grid.size() < 2) throw ConfigError("config key 'experiment.duration': too short for the Welch grid");
  const auto model = freqmodel::output_noise_spectrum(p, cl, grid);
  {
    CsvWriter w(ctx.file("noise_psd.csv"), {"f_hz", "psd_total", "psd_quant", "psd_shot", "psd_sim"});
    for (std::size_t k = 0; k < grid.size(); ++k)
      w.row({num(grid[k]), num(model.total[k]), num(model.quant[k]), num(model.shot[k]), num(sim.value[k + 1])});
  }
  {
    CsvWriter w(ctx.file("noise_sim_full.csv"), {"f_hz", "psd_sim"});
    for (std::size_t k = 1; k < sim.f.size(); ++k) w.row({num(sim.f[k]), num(sim.value[k])});
  }
  double sim_in_band = 0.0;
  const double df = sim.f[1] - sim.f[0];
  for (std::size_t k = 0; k < sim.f.size(); ++k)
    if (sim.f[k] <= f_half) sim_in_band += sim.value[k] * df;
  const double model_in_band = freqmodel::in_band_noise_power(p, cl);
  double peak_f = 0.0, peak_v = -1.0;
  for (std::size_t k = 1; k < sim.f.size(); ++k)
    if (sim.f[k] <= 1.0 / p.t0 && sim.value[k] > peak_v) {
      peak_v = sim.value[k];
      peak_f = sim.f[k];
    }
  spectral::Spectrum model_spec{grid, model.total};
  const double rms = pulse::noise_rms(streams, p.ip, p.in, std::size_t(window));
  write_metrics(ctx, "noise_summary.csv",
                {{"model_in_band_s2", num(model_in_band)},
                 {"sim_in_band_s2", num(sim_in_band)},
                 {"in_band_ratio", num(sim_in_band / model_in_band)},
                 {"quant_psd_integral_over_f0_s2", num(freqmodel::quantization_noise_psd(p) / p.t0)},
                 {"slope_band_lo_hz", num(slope_lo)},
                 {"slope_band_hi_hz", num(10.0 * slope_lo)},
                 {"sim_lf_slope_db_per_decade", num(spectral::loglog_slope_db(sim, slope_lo, 10.0 * slope_lo))},
                 {"model_lf_slope_db_per_decade", num(spectral::loglog_slope_db(model_spec, slope_lo, 10.0 * slope_lo))},
                 {"sim_peak_hz", num(peak_f)},
                 {"f0_half_hz", num(f_half)},
                 {"noise_window_s", num(double(window) / p.fclk)},
                 {"noise_rms_A", num(rms)},
                 {"i_max_A", num(i_max)},
                 {"dynamic_range_db", num(rms > 0.0 ? pulse::dynamic_range_db(i_max, rms) : 0.0)}});
}

namespace detail {

inline loopsim::FaradaicSource chrono_source(const Config& c, double* expected) {
  const std::string type = c.get_string("experiment.source", "constant");
  if (type == "constant") {
    const double i = c.get_double("experiment.current", 10e-9);
    *expected = i;
    return loopsim::ConstantSource{i};
  }
  const double conc = c.get_double("experiment.concentration", 1.0);
  if (!(conc >= 0.0)) throw ConfigError("config key 'experiment.concentration': must be >= 0");
  if (type == "ferrocyanide") {
    loopsim::FerrocyanideSource s{geometry(c), from_mM(conc)};
    *expected = electrochem::limiting_current(s.geom, s.concentration);
    return s;
  }
  if (type == "transient") {
    loopsim::TransientSource s{geometry(c), from_mM(conc)};
    const double t_end = c.get_double("experiment.warmup", 0.1) + c.get_double("experiment.duration", 1.0);
    *expected = electrochem::microdisc_transient(s.geom, s.concentration, t_end);
    return s;
  }
  if (type == "glucose") {
    loopsim::GlucoseSource s{glucose_calibration(c), from_mM(conc), c.get_double("experiment.interferent", 0.0)};
    *expected = electrochem::glucose_current(s.cal, s.concentration).current + s.interferent;
    return s;
  }
  throw ConfigError("config key 'experiment.source': unknown source '" + type + "'");
}

}  // namespace detail

inline void cmd_chrono(RunContext& ctx) {
  const auto& c = ctx.cfg;
  const auto sets = param_sets(c);
  double expected = 0.0;
  const auto source = detail::chrono_source(c, &expected);
  ParamSet set = pick_param_set(sets, expected);
  set.params = trimmed_for(ctx, set.params, expected);
  auto lc = loop_config(ctx, set, 1.0);
  lc.source = source;
  const auto r = loopsim::run_chrono(lc);
  {
    std::ofstream out(ctx.file("chrono_stream.txt"), std::ios::binary);
    pulse::write_stream(out, r.stream);
  }
  {
    CsvWriter w(ctx.file("chrono_trace.csv"), {"t_s", "v_node_V"});
    for (std::size_t k = 0; k < r.v_node.size(); ++k) w.row({num(double(k + 1) * r.v_node_dt), num(r.v_node[k])});
  }
  const double true_mean = r.charge.faradaic / lc.duration;
  {
    CsvWriter w(ctx.file("chrono_summary.csv"), {"setpoint_A", "decoded_A", "p", "n"});
    w.row({num(true_mean), num(r.decoded.i_f), std::to_string(r.decoded.p), std::to_string(r.decoded.n)});
  }
  write_metrics(ctx, "chrono_metrics.csv",
                {{"preset", set.label},
                 {"cal_p", num(lc.params.cal_p)},
                 {"cal_n", num(lc.params.cal_n)},
                 {"ip_A", num(lc.params.ip)},
                 {"in_A", num(lc.params.in)},
                 {"m", std::to_string(r.decoded.m)},
                 {"lsb_A", num(r.decoded.lsb)},
                 {"settle_time_s", num(r.settle_time)},
                 {"vref_V", num(lc.resolved_vref())},
                 {"mean_v_node_V", num(r.mean_v_node)},
                 {"charge_injected_C", num(r.charge.injected)},
                 {"charge_faradaic_C", num(r.charge.faradaic)},
                 {"charge_rp_C", num(r.charge.rp_branch)},
                 {"charge_rout_C", num(r.charge.rout_branch)},
                 {"charge_stored_C", num(r.charge.stored)},
                 {"charge_residual_C", num(r.charge.residual())},
                 {"external_rail", r.external_rail ? "1" : "0"}});
}

inline void cmd_ferro_sweep(RunContext& ctx) {
  const auto& c = ctx.cfg;
  const auto sets = param_sets(c);
  struct Point {
    loopsim::FaradaicSource source;
    double current;
    double radius;
    double conc;
  };
  std::vector<Point> points;
  if (c.has("experiment.setpoints")) {
    for (double i : c.get_doubles("experiment.setpoints")) {
      if (!(i > 0.0)) throw ConfigError("config key 'experiment.setpoints': currents must be > 0");
      points.push_back({loopsim::ConstantSource{i}, i, 0.0, 0.0});
    }
  } else if (c.has("experiment.radii") && c.has("experiment.concentrations")) {
    auto g = geometry(c);
    for (double a : c.get_doubles("experiment.radii")) {
      if (!(a > 0.0)) throw ConfigError("config key 'experiment.radii': radii must be > 0");
      for (double conc : c.get_doubles("experiment.concentrations")) {
        if (!(conc > 0.0)) throw ConfigError("config key 'experiment.concentrations': must be > 0");
        g.radius = a;
        loopsim::FerrocyanideSource s{g, from_mM(conc)};
        points.push_back({s, electrochem::limiting_current(g, s.concentration), a, from_mM(conc)});
      }
    }
  }
  if (points.empty())
    throw ConfigError("config key 'experiment.setpoints': empty setpoint list (or 'experiment.radii' x "
                      "'experiment.concentrations')");

  std::vector<double> x, y;
  CsvWriter w(ctx.file("ferro_sweep.csv"), {"setpoint_A", "decoded_A", "p", "n", "radius_m", "concentration_mol_m3",
                                            "vdd_V", "cal_p", "cal_n"});
  for (const auto& pt : points) {
    ParamSet set = pick_param_set(sets, pt.current);
    set.params = trimmed_for(ctx, set.params, pt.current);
    auto lc = loop_config(ctx, set, 0.5);
    lc.source = pt.source;
    const auto r = loopsim::run_chrono(lc);
    x.push_back(pt.current);
    y.push_back(r.decoded.i_f);
    w.row({num(pt.current), num(r.decoded.i_f), std::to_string(r.decoded.p), std::to_string(r.decoded.n),
           num(pt.radius), num(pt.conc), num(lc.params.vdd), num(lc.params.cal_p), num(lc.params.cal_n)});
  }
  const auto fit = linear_fit(x, y);
  const auto [lo, hi] = std::minmax_element(x.begin(), x.end());
  write_metrics(ctx, "ferro_regression.csv",
                {{"slope", num(fit.slope)},
                 {"intercept_A", num(fit.intercept)},
                 {"r_squared", num(fit.r2)},
                 {"n_points", std::to_string(x.size())},
                 {"min_current_A", num(*lo)},
                 {"max_current_A", num(*hi)},
                 {"decades_spanned", num(std::log10(*hi / *lo))}});
}

/// Two-segment calibration fit sharing one knot sample. Each segment needs
/// at least three points.
struct TwoSegmentFit {
  LinearFit lower, upper;
  double breakpoint = 0.0;
  std::size_t knot = 0;
};

inline TwoSegmentFit fit_two_segments(const std::vector<double>& c, const std::vector<double>& i) {
  if (c.size() < 5) throw ConfigError("config key 'experiment.concentrations': fewer than 3 points per segment");
  TwoSegmentFit best;
  double best_sse = std::numeric_limits<double>::infinity();
  for (std::size_t k = 2; k + 2 < c.size(); ++k) {
    const std::vector<double> c1(c.begin(), c.begin() + std::ptrdiff_t(k + 1)), i1(i.begin(), i.begin() + std::ptrdiff_t(k + 1));
    const std::vector<double> c2(c.begin() + std::ptrdiff_t(k), c.end()), i2(i.begin() + std::ptrdiff_t(k), i.end());
    const auto a = linear_fit(c1, i1), b = linear_fit(c2, i2);
    if (a.sse + b.sse < best_sse) {
      best_sse = a.sse + b.sse;
      best.lower = a;
      best.upper = b;
      best.knot = k;
      best.breakpoint =
          a.slope != b.slope ? (b.intercept - a.intercept) / (a.slope - b.slope) : c[k];
    }
  }
  return best;
}

inline void cmd_glucose_cal(RunContext& ctx) {
  const auto& c = ctx.cfg;
  const auto sets = param_sets(c);
  const auto cal = glucose_calibration(c);
  std::vector<double> conc = c.has("experiment.concentrations") ? c.get_doubles("experiment.concentrations")
                                                                 : std::vector<double>{2, 8, 20, 35, 50};
  std::sort(conc.begin(), conc.end());
  for (double v : conc)
    if (!(v >= 2.0 && v <= 50.0))
      throw ConfigError("config key 'experiment.concentrations': values must lie in [2, 50] mM");
  const long long n_blanks = c.get_int("experiment.n_blanks", 10);
  const double blank_sigma = c.get_double("experiment.blank_sigma", 0.088e-9);
  const double interferent = c.get_double("experiment.interferent", 0.0);
  const double c_ref = c.get_double("experiment.interferent_concentration", 10.0);
  const bool noiseless = c.get_bool("experiment.noiseless", false);
  if (n_blanks < 2) throw ConfigError("config key 'experiment.n_blanks': must be >= 2");
  if (!(blank_sigma >= 0.0)) throw ConfigError("config key 'experiment.blank_sigma': must be >= 0");
  if (!(c_ref >= 2.0 && c_ref <= 50.0))
    throw ConfigError("config key 'experiment.interferent_concentration': must lie in [2, 50] mM");

  std::mt19937_64 rng(ctx.seed ^ 0x676c75636f7365ULL);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const double i_top = electrochem::glucose_current(cal, from_mM(conc.back())).current;
  ParamSet set = pick_param_set(sets, i_top);
  set.params = trimmed_for(ctx, set.params, i_top);
  auto base = loop_config(ctx, set, 1.0);
  if (noiseless) base.input_noise = false;

  auto measure = [&](double conc_mM, double interf, std::uint64_t seed) {
    auto lc = base;
    lc.seed = seed;
    lc.source = loopsim::GlucoseSource{cal, from_mM(conc_mM), interf};
    return loopsim::run_chrono(lc);
  };

  std::vector<double> xs, ys;
  {
    CsvWriter w(ctx.file("glucose_cal.csv"), {"concentration_mol_m3", "true_A", "decoded_A", "p", "n"});
    for (std::size_t k = 0; k < conc.size(); ++k) {
      const auto r = measure(conc[k], 0.0, ctx.seed + k);
      const double noise = noiseless ? 0.0 : blank_sigma * gauss(rng);
      const double decoded = r.decoded.i_f + noise;
      xs.push_back(from_mM(conc[k]));
      ys.push_back(decoded);
      w.row({num(from_mM(conc[k])), num(electrochem::glucose_current(cal, from_mM(conc[k])).current), num(decoded),
             std::to_string(r.decoded.p), std::to_string(r.decoded.n)});
    }
  }
  const auto fit = fit_two_segments(xs, ys);

  std::vector<double> blanks;
  for (long long k = 0; k < n_blanks; ++k) {
    const auto r = measure(0.0, 0.0, ctx.seed + 1000 + std::uint64_t(k));
    blanks.push_back(r.decoded.i_f + blank_sigma * gauss(rng));
  }
  double mean = 0.0;
  for (double b : blanks) mean += b;
  mean /= double(blanks.size());
  double ss = 0.0;
  for (double b : blanks) ss += (b - mean) * (b - mean);
  const double sigma = std::sqrt(ss / double(blanks.size() - 1));
  const double lod = 3.0 * sigma / fit.lower.slope;

  const auto clean = measure(c_ref, 0.0, ctx.seed + 2000);
  const auto dirty = measure(c_ref, interferent, ctx.seed + 2000);
  const double rel_err = std::abs(dirty.decoded.i_f - clean.decoded.i_f) / std::abs(clean.decoded.i_f);

  write_metrics(ctx, "glucose_fit.csv",
                {{"lower_slope_A_per_mol_m3", num(fit.lower.slope)},
                 {"lower_intercept_A", num(fit.lower.intercept)},
                 {"upper_slope_A_per_mol_m3", num(fit.upper.slope)},
                 {"upper_intercept_A", num(fit.upper.intercept)},
                 {"breakpoint_mol_m3", num(fit.breakpoint)},
                 {"blank_sigma_A", num(sigma)},
                 {"lod_mol_m3", num(lod)},
                 {"lod_reference_mol_m3", num(0.53)},
                 {"interferent_A", num(interferent)},
                 {"interferent_concentration_mol_m3", num(from_mM(c_ref))},
                 {"interferent_relative_error", num(rel_err)},
                 {"interferent_reference_relative_error", num(0.0002)}});
}

inline void cmd_multidie(RunContext& ctx) {
  const auto& c = ctx.cfg;
  const auto sets = param_sets(c);
  const std::vector<double> setpoints =
      c.has("experiment.setpoints") ? c.get_doubles("experiment.setpoints")
                                    : std::vector<double>{1.18e-9, 5.68e-9, 10.79e-9, 50.77e-9, 100.99e-9, 502.28e-9};
  if (setpoints.empty()) throw ConfigError("config key 'experiment.setpoints': empty setpoint list");
  loopsim::MultidieOptions opt;
  opt.spread = c.get_double("experiment.spread", opt.spread);
  opt.n_dice = int(c.get_int("experiment.n_dice", opt.n_dice));
  opt.headroom = c.get_double("experiment.headroom", opt.headroom);
  opt.seed = ctx.seed;
  if (!(opt.spread >= 0.0)) throw ConfigError("config key 'experiment.spread': must be >= 0");
  if (opt.n_dice < 5) throw ConfigError("config key 'experiment.n_dice': must be >= 5");
  if (!(opt.headroom >= 1.0)) throw ConfigError("config key 'experiment.headroom': must be >= 1");
  std::vector<loopsim::MultidieSetpoint> sps;
  for (double i : setpoints) {
    if (!(i > 0.0)) throw ConfigError("config key 'experiment.setpoints': currents must be > 0");
    const auto& set = pick_param_set(sets, i);
    const auto trimmed = fidigota::balanced_trim(set.params, i, opt.headroom);
    const auto bad = trimmed.invalid_fields();
    if (!bad.empty())
      throw ConfigError("setpoint " + num(i) + " A exceeds the output stage of preset '" + set.label + "' (" +
                        bad.front() + "); adjust 'experiment.preset_limits'");
    sps.push_back({loop_config(ctx, set, 0.5), i});
  }
  const auto table = loopsim::multidie_montecarlo(sps, opt);
  {
    CsvWriter w(ctx.file("multidie.csv"), {"setpoint_A", "vdd_V", "cal_p", "cal_n", "mean_A", "sigma_A", "min_A",
                                           "max_A", "norm_sigma"});
    for (const auto& r : table.rows)
      w.row({num(r.setpoint), num(r.vdd), num(r.cal_p), num(r.cal_n), num(r.mean), num(r.sigma), num(r.min),
             num(r.max), num(r.norm_sigma)});
  }
  {
    CsvWriter w(ctx.file("multidie_dice.csv"), {"setpoint_A", "die", "decoded_A"});
    for (const auto& r : table.rows)
      for (std::size_t d = 0; d < r.decoded.size(); ++d) w.row({num(r.setpoint), std::to_string(d), num(r.decoded[d])});
  }
  write_metrics(ctx, "multidie_summary.csv",
                {{"mean_norm_sigma", num(table.mean_norm_sigma)},
                 {"spread", num(opt.spread)},
                 {"n_dice", num(opt.n_dice)},
                 {"reference_norm_sigma", num(0.0446)}});
}

inline fs::path input_path(const RunContext& ctx) {
  if (!ctx.cfg.has("experiment.input")) throw ConfigError("missing --input (or config key 'experiment.input')");
  return detail::resolve(ctx.cfg, ctx.cfg.get_string("experiment.input"));
}

inline void cmd_decode(RunContext& ctx) {
  const auto& c = ctx.cfg;
  const auto sets = param_sets(c);
  const auto& p = sets.front().params;
  const auto path = input_path(ctx);
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read stream file '" + path.string() + "'");
  pulse::PulseStream s;
  try {
    s = pulse::read_stream(in);
  } catch (const pulse::StreamFormatError& e) {
    throw ConfigError("stream file '" + path.string() + "': " + e.what());
  }
  const std::size_t m = s.length();
  const long long window = c.get_int("experiment.window", (long long)pulse::default_noise_window(m));
  const double tol = c.get_double("experiment.tolerance", 0.05);
  if (window < 1) throw ConfigError("config key 'experiment.window': must be >= 1");
  if (!(tol >= 0.0)) throw ConfigError("config key 'experiment.tolerance': must be >= 0");

  const auto total = pulse::decode(s, p.ip, p.in);
  {
    CsvWriter w(ctx.file("decode_windows.csv"), {"window_start_s", "i_f_A", "p", "n"});
    for (const auto& wd : pulse::windowed_decode(s, p.ip, p.in, std::size_t(window)))
      w.row({num(wd.start_s), num(wd.result.i_f), std::to_string(wd.result.p), std::to_string(wd.result.n)});
  }
  const auto run = pulse::running_estimate(s, p.ip, p.in, tol);
  {
    const std::size_t step = std::max<std::size_t>(1, m / 2000);
    CsvWriter w(ctx.file("decode_running.csv"), {"t_s", "i_f_A"});
    for (std::size_t k = step - 1; k < m; k += step) w.row({num(double(k + 1) / s.fclk), num(run.estimate[k])});
  }
  write_metrics(ctx, "decode_summary.csv",
                {{"i_f_A", num(total.i_f)},
                 {"p", std::to_string(total.p)},
                 {"n", std::to_string(total.n)},
                 {"m", std::to_string(total.m)},
                 {"lsb_A", num(total.lsb)},
                 {"fclk_hz", num(s.fclk)},
                 {"tolerance", num(tol)},
                 {"convergence_index", std::to_string(run.convergence_index)},
                 {"convergence_time_s", num(double(run.convergence_index) / s.fclk)},
                 {"convergence_fraction", num(double(run.convergence_index) / double(m))}});
}

inline void cmd_fit(RunContext& ctx) {
  const auto path = input_path(ctx);
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read samples file '" + path.string() + "'");
  std::vector<electrochem::TransientSample> samples;
  try {
    samples = electrochem::read_transient_csv(in);
  } catch (const std::invalid_argument& e) {
    throw ConfigError("samples file '" + path.string() + "': " + e.what());
  }
  const auto g = geometry(ctx.cfg);
  auto write = [&](const electrochem::TransientFit& f) {
    CsvWriter w(ctx.file("fit.csv"), {"param", "value", "stderr"});
    w.row({"diffusion_m2_per_s", num(f.diffusion), num(f.diffusion_stderr)});
    w.row({"concentration_mol_m3", num(f.concentration), num(f.concentration_stderr)});
    w.row({"rms_relative_residual", num(f.rms_relative_residual), ""});
    w.row({"iterations", num(f.iterations), ""});
  };
  try {
    write(electrochem::fit_transient(samples, g));
  } catch (const electrochem::FitError& e) {
    write(e.best());
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("samples file: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Entry point

inline void write_manifest(RunContext& ctx, double wall_s, const std::string& status) {
  nlohmann::ordered_json j;
  j["tool"] = kToolName;
  j["version"] = kToolVersion;
  j["command"] = ctx.command;
  j["status"] = status;
  j["seed"] = ctx.seed;
  j["config_snapshot"] = "config_snapshot.ini";
  j["config"] = ctx.cfg.snapshot();
  j["outputs"] = ctx.outputs;
  j["wall_clock_s"] = wall_s;
  std::ofstream out(ctx.out_dir / "manifest.json", std::ios::binary);
  out << j.dump(2) << '\n';
}

struct Invocation {
  std::string command;
  std::string config;
  std::string out;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> input;
};

inline int execute(const Invocation& inv, std::ostream& err = std::cerr) {
  const auto start = std::chrono::steady_clock::now();
  RunContext ctx;
  ctx.command = inv.command;
  try {
    const auto& names = commands();
    if (std::find(names.begin(), names.end(), inv.command) == names.end())
      throw ConfigError("unknown command '" + inv.command + "'");
    ctx.cfg = Config::load(inv.config);
    for (const auto& kv : inv.overrides) ctx.cfg.apply_override(kv);
    if (inv.seed) ctx.cfg.set("experiment.seed", std::to_string(*inv.seed));
    if (inv.input) ctx.cfg.set("experiment.input", fs::absolute(*inv.input).lexically_normal().string());
    ctx.cfg.check_keys(detail::circuit_key_set(), {"cell", "experiment"}, experiment_keys());
    if (ctx.cfg.has("experiment.type") && ctx.cfg.get_string("experiment.type") != inv.command)
      throw ConfigError("config key 'experiment.type': '" + ctx.cfg.get_string("experiment.type") +
                        "' does not match command '" + inv.command + "'");
    const long long seed = ctx.cfg.get_int("experiment.seed", 1);
    if (seed < 0) throw ConfigError("config key 'experiment.seed': must be >= 0");
    ctx.seed = std::uint64_t(seed);
    // Absolute paths keep the snapshot usable from any directory.
    if (ctx.cfg.has("experiment.presets")) {
      std::string joined;
      for (const auto& f : ctx.cfg.get_strings("experiment.presets"))
        joined += (joined.empty() ? "" : ", ") + detail::resolve(ctx.cfg, f).string();
      ctx.cfg.set("experiment.presets", joined);
    }
    if (ctx.cfg.has("experiment.input"))
      ctx.cfg.set("experiment.input", detail::resolve(ctx.cfg, ctx.cfg.get_string("experiment.input")).string());

    ctx.out_dir = inv.out;
    std::error_code ec;
    fs::create_directories(ctx.out_dir, ec);
    if (ec || !fs::is_directory(ctx.out_dir))
      throw ConfigError("cannot create output directory '" + inv.out + "'");
    {
      std::ofstream snap(ctx.file("config_snapshot.ini"), std::ios::binary);
      if (!snap) throw ConfigError("output directory '" + inv.out + "' is not writable");
      snap << ctx.cfg.snapshot();
    }

    static const std::map<std::string, std::function<void(RunContext&)>> table{
        {"bode", cmd_bode},         {"noise", cmd_noise},       {"chrono", cmd_chrono},
        {"ferro-sweep", cmd_ferro_sweep}, {"glucose-cal", cmd_glucose_cal}, {"multidie", cmd_multidie},
        {"decode", cmd_decode},     {"fit", cmd_fit}};
    table.at(inv.command)(ctx);
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    write_manifest(ctx, wall, "ok");
    return kExitOk;
  } catch (const ConfigError& e) {
    err << kToolName << ": error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::invalid_argument& e) {
    err << kToolName << ": error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const loopsim::NumericalError& e) {
    err << kToolName << ": numerical failure: " << e.what() << '\n';
  } catch (const electrochem::FitError& e) {
    err << kToolName << ": numerical failure: " << e.what() << '\n';
  } catch (const std::exception& e) {
    err << kToolName << ": failure: " << e.what() << '\n';
  }
  if (!ctx.out_dir.empty() && fs::is_directory(ctx.out_dir)) {
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    write_manifest(ctx, wall, "numerical-failure");
  }
  return kExitNumerical;
}

inline int main(int argc, char** argv) {
  CLI::App app{"Behavioral simulator and analysis toolkit for a digital-based potentiostat", kToolName};
  app.set_version_flag("--version", kToolVersion);
  Invocation inv;
  std::uint64_t seed = 0;
  std::string input;
  std::string names;
  for (const auto& n : commands()) names += (names.empty() ? "" : ", ") + n;
  app.add_option("command", inv.command, "Experiment to run: " + names)->required();
  app.add_option("--config", inv.config, "Config file")->required();
  app.add_option("--out", inv.out, "Output directory")->required();
  app.add_option("--set", inv.overrides, "Override a config key (key=value or section.key=value)")
      ->allow_extra_args(false)
      ->take_all();
  auto* seed_opt = app.add_option("--seed", seed, "Random seed (overrides experiment.seed)");
  auto* input_opt = app.add_option("--input", input, "Input file for decode and fit");
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }
  if (*seed_opt) inv.seed = seed;
  if (*input_opt) inv.input = input;
  return execute(inv);
}

}  // namespace dbpot::cli
