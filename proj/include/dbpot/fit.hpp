#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <istream>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "dbpot/electrochem.hpp"

namespace dbpot::electrochem {

struct TransientSample {
  double t;  // s
  double i;  // A
};

struct TransientFit {
  double diffusion = 0.0;
  double concentration = 0.0;
  double diffusion_stderr = 0.0;
  double concentration_stderr = 0.0;
  double rms_relative_residual = 0.0;
  int iterations = 0;
};

/// Thrown when the iteration cap is hit. Carries the best parameters seen.
class FitError : public std::runtime_error {
 public:
  FitError(const std::string& what, TransientFit best) : std::runtime_error(what), best_(best) {}
  const TransientFit& best() const { return best_; }

 private:
  TransientFit best_;
};

struct FitOptions {
  int max_iterations = 200;
  double step_tolerance = 1e-8;  // relative parameter step
  double fd_step = 1e-7;         // relative finite-difference step
};

namespace detail {

inline double sum_sq(const std::vector<double>& r) {
  double s = 0.0;
  for (double v : r) s += v * v;
  return s;
}

inline std::vector<double> transient_residuals(const std::vector<TransientSample>& data, ElectrodeGeometry g,
                                               double d, double c) {
  g.diffusion = d;
  std::vector<double> r(data.size());
  for (std::size_t k = 0; k < data.size(); ++k) r[k] = data[k].i - microdisc_transient(g, c, data[k].t);
  return r;
}

}  // namespace detail

/// Least-squares fit of (D, c) to chronoamperometric samples with the radius
/// and electron count fixed by `prior`. `prior.diffusion` seeds D.
/// Damped Gauss-Newton (Levenberg) in relative parameter coordinates.
inline TransientFit fit_transient(const std::vector<TransientSample>& data, const ElectrodeGeometry& prior,
                                  const FitOptions& opt = {}) {
  prior.validate();
  if (data.size() < 8) throw std::invalid_argument("fit_transient: need at least 8 samples");
  double t_min = std::numeric_limits<double>::infinity(), t_max = 0.0;
  for (const auto& s : data) {
    if (!(s.t > 0.0) || !(s.i > 0.0)) throw std::invalid_argument("fit_transient: samples need t > 0 and i > 0");
    t_min = std::min(t_min, s.t);
    t_max = std::max(t_max, s.t);
  }
  if (t_max < 10.0 * t_min) throw std::invalid_argument("fit_transient: samples must span at least one decade in t");

  // Initial concentration from the latest sample given the prior D.
  const auto& last = *std::max_element(data.begin(), data.end(),
                                       [](const auto& a, const auto& b) { return a.t < b.t; });
  std::array<double, 2> p{prior.diffusion, last.i / microdisc_transient(prior, 1.0, last.t)};

  auto resid = [&](const std::array<double, 2>& q) {
    return detail::transient_residuals(data, prior, q[0], q[1]);
  };

  std::vector<double> r = resid(p);
  double cost = detail::sum_sq(r);
  double lambda = 1e-3;
  const std::size_t n = data.size();
  std::vector<std::array<double, 2>> jac(n);

  auto fill_jacobian = [&] {
    // Columns are d r / d ln p_j.
    for (int j = 0; j < 2; ++j) {
      auto q = p;
      q[j] *= 1.0 + opt.fd_step;
      auto rq = resid(q);
      for (std::size_t k = 0; k < n; ++k) jac[k][j] = (rq[k] - r[k]) / opt.fd_step;
    }
  };

  auto finish = [&](int it) {
    TransientFit f;
    f.diffusion = p[0];
    f.concentration = p[1];
    f.iterations = it;
    ElectrodeGeometry g = prior;
    g.diffusion = p[0];
    double rel = 0.0;
    for (const auto& s : data) {
      const double m = microdisc_transient(g, p[1], s.t);
      rel += (s.i - m) * (s.i - m) / (m * m);
    }
    f.rms_relative_residual = std::sqrt(rel / double(n));
    fill_jacobian();
    double a = 0, b = 0, d = 0;
    for (const auto& row : jac) {
      a += row[0] * row[0];
      b += row[0] * row[1];
      d += row[1] * row[1];
    }
    const double det = a * d - b * b;
    const double s2 = n > 2 ? cost / double(n - 2) : 0.0;
    if (det > 0.0) {
      f.diffusion_stderr = p[0] * std::sqrt(std::max(0.0, s2 * d / det));
      f.concentration_stderr = p[1] * std::sqrt(std::max(0.0, s2 * a / det));
    } else {
      f.diffusion_stderr = f.concentration_stderr = std::numeric_limits<double>::infinity();
    }
    return f;
  };

  for (int it = 1; it <= opt.max_iterations; ++it) {
    fill_jacobian();
    double a = 0, b = 0, d = 0, g0 = 0, g1 = 0;
    for (std::size_t k = 0; k < n; ++k) {
      a += jac[k][0] * jac[k][0];
      b += jac[k][0] * jac[k][1];
      d += jac[k][1] * jac[k][1];
      g0 += jac[k][0] * r[k];
      g1 += jac[k][1] * r[k];
    }
    bool accepted = false;
    std::array<double, 2> step{0.0, 0.0};
    for (int tries = 0; tries < 60 && !accepted; ++tries) {
      const double aa = a * (1.0 + lambda), dd = d * (1.0 + lambda);
      const double det = aa * dd - b * b;
      if (!(det > 0.0) || !std::isfinite(det)) {
        lambda *= 10.0;
        continue;
      }
      step = {-(dd * g0 - b * g1) / det, -(aa * g1 - b * g0) / det};
      for (double& s : step) s = std::clamp(s, -0.5, 0.5);
      std::array<double, 2> q{p[0] * std::exp(step[0]), p[1] * std::exp(step[1])};
      auto rq = resid(q);
      const double cq = detail::sum_sq(rq);
      if (std::isfinite(cq) && cq <= cost) {
        p = q;
        r = std::move(rq);
        cost = cq;
        lambda = std::max(lambda * 0.3, 1e-12);
        accepted = true;
      } else {
        lambda *= 10.0;
      }
    }
    const double rel_step = std::max(std::abs(std::expm1(step[0])), std::abs(std::expm1(step[1])));
    if (!accepted || rel_step < opt.step_tolerance) return finish(it);
  }
  throw FitError("fit_transient: iteration cap reached", finish(opt.max_iterations));
}

/// Reads `t_s,i_A` CSV (header required).
inline std::vector<TransientSample> read_transient_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw std::invalid_argument("transient csv: empty input");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "t_s,i_A") throw std::invalid_argument("transient csv: expected header 't_s,i_A' on line 1");
  std::vector<TransientSample> out;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto comma = line.find(',');
    try {
      if (comma == std::string::npos) throw std::invalid_argument("");
      const double t = std::stod(line.substr(0, comma));
      const double i = std::stod(line.substr(comma + 1));
      out.push_back({t, i});
    } catch (const std::exception&) {
      throw std::invalid_argument("transient csv: malformed row on line " + std::to_string(line_no));
    }
  }
  return out;
}

}  // namespace dbpot::electrochem
