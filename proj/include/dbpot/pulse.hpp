#pragma once

#include <cmath>
#include <cstdint>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "dbpot/electrochem.hpp"
#include "dbpot/fidigota.hpp"

namespace dbpot::pulse {

struct PulseStream {
  std::vector<OutputDrive> states;
  double fclk = 50e3;

  std::size_t length() const { return states.size(); }
  double duration() const { return double(states.size()) / fclk; }

  PulseStream slice(std::size_t begin, std::size_t end) const {
    if (begin > end || end > states.size()) throw std::out_of_range("PulseStream::slice: bad range");
    return {std::vector<OutputDrive>(states.begin() + std::ptrdiff_t(begin), states.begin() + std::ptrdiff_t(end)),
            fclk};
  }
};

class StreamFormatError : public std::runtime_error {
 public:
  StreamFormatError(const std::string& what, int line)
      : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}
  int line() const { return line_; }

 private:
  int line_;
};

/// Text format: `fclk_hz=<v>` then one character per clock period from
/// {P, N, Z}. Line breaks and surrounding whitespace are ignored.
inline PulseStream read_stream(std::istream& in) {
  std::string line;
  int line_no = 0;
  PulseStream s;
  bool have_header = false;
  while (!have_header && std::getline(in, line)) {
    ++line_no;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos) continue;
    const std::string body = line.substr(first, line.find_last_not_of(" \t\r") - first + 1);
    const std::string key = "fclk_hz=";
    if (body.rfind(key, 0) != 0) throw StreamFormatError("expected header 'fclk_hz=<value>'", line_no);
    try {
      std::size_t used = 0;
      s.fclk = std::stod(body.substr(key.size()), &used);
      if (used != body.size() - key.size()) throw std::invalid_argument("");
    } catch (const std::exception&) {
      throw StreamFormatError("malformed clock frequency", line_no);
    }
    if (!(s.fclk > 0.0) || !std::isfinite(s.fclk)) throw StreamFormatError("clock frequency must be > 0", line_no);
    have_header = true;
  }
  if (!have_header) throw StreamFormatError("missing header", line_no + 1);
  while (std::getline(in, line)) {
    ++line_no;
    for (char ch : line) {
      switch (ch) {
        case 'P': s.states.push_back(OutputDrive::P); break;
        case 'N': s.states.push_back(OutputDrive::N); break;
        case 'Z': s.states.push_back(OutputDrive::Z); break;
        case ' ': case '\t': case '\r': break;
        default:
          throw StreamFormatError(std::string("unexpected character '") + ch + "'", line_no);
      }
    }
  }
  if (s.states.empty()) throw StreamFormatError("stream has no samples", line_no);
  return s;
}

inline void write_stream(std::ostream& out, const PulseStream& s, std::size_t line_width = 100) {
  const auto old = out.precision(17);
  out << "fclk_hz=" << s.fclk << '\n';
  out.precision(old);
  for (std::size_t k = 0; k < s.states.size(); ++k) {
    out << char(s.states[k]);
    if ((k + 1) % line_width == 0 || k + 1 == s.states.size()) out << '\n';
  }
}

struct DecodeResult {
  double i_f = 0.0;
  std::int64_t p = 0;
  std::int64_t n = 0;
  std::int64_t m = 0;
  double lsb = 0.0;
  /// Signed count in units of ip pulses: p - n (in / ip).
  double code = 0.0;
};

inline double lsb_current(double ip, std::int64_t m) {
  if (m < 1) throw std::invalid_argument("lsb_current: M must be >= 1");
  return ip / double(m);
}

inline DecodeResult decode_counts(std::int64_t p, std::int64_t n, std::int64_t m, double ip, double in) {
  if (!(ip > 0.0) || !(in > 0.0)) throw std::invalid_argument("decode: ip and in must be > 0");
  if (m < 1) throw std::invalid_argument("decode: empty stream");
  DecodeResult r;
  r.p = p;
  r.n = n;
  r.m = m;
  r.i_f = (double(p) * ip - double(n) * in) / double(m);
  r.lsb = lsb_current(ip, m);
  r.code = double(p) - double(n) * (in / ip);
  return r;
}

inline DecodeResult decode(const PulseStream& s, double ip, double in) {
  std::int64_t p = 0, n = 0;
  for (auto d : s.states) {
    p += d == OutputDrive::P;
    n += d == OutputDrive::N;
  }
  return decode_counts(p, n, std::int64_t(s.length()), ip, in);
}

/// Sensitivity in LSB per mM for a microdisc at its limiting current.
inline double sensitivity_lsb_per_mM(const electrochem::ElectrodeGeometry& g, double ip, double acquisition,
                                     double fclk) {
  const double m = std::floor(acquisition * fclk + 1e-9);
  if (m < 1.0) throw std::invalid_argument("sensitivity_lsb_per_mM: T * fclk must be >= 1");
  return electrochem::limiting_current(g, from_mM(1.0)) / lsb_current(ip, std::int64_t(m));
}

inline double dynamic_range_db(double i_max, double i_rms) {
  if (!(i_max > 0.0) || !(i_rms > 0.0)) throw std::invalid_argument("dynamic_range: inputs must be > 0");
  return 20.0 * std::log10(i_max / i_rms);
}

struct WindowDecode {
  double start_s;
  DecodeResult result;
};

/// Decodes consecutive non-overlapping windows; a trailing partial window is dropped.
inline std::vector<WindowDecode> windowed_decode(const PulseStream& s, double ip, double in, std::size_t window) {
  if (window < 1) throw std::invalid_argument("windowed_decode: window must be >= 1");
  std::vector<WindowDecode> out;
  for (std::size_t b = 0; b + window <= s.length(); b += window) {
    std::int64_t p = 0, n = 0;
    for (std::size_t k = b; k < b + window; ++k) {
      p += s.states[k] == OutputDrive::P;
      n += s.states[k] == OutputDrive::N;
    }
    out.push_back({double(b) / s.fclk, decode_counts(p, n, std::int64_t(window), ip, in)});
  }
  return out;
}

/// RMS of windowed decodes about their grand mean across all streams.
inline double noise_rms(const std::vector<PulseStream>& streams, double ip, double in, std::size_t window) {
  std::vector<double> v;
  for (const auto& s : streams)
    for (const auto& w : windowed_decode(s, ip, in, window)) v.push_back(w.result.i_f);
  if (v.size() < 2) throw std::invalid_argument("noise_rms: fewer than 2 windows");
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= double(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return std::sqrt(ss / double(v.size()));
}

/// Window length giving `windows_per_stream` windows (default 256 per acquisition).
inline std::size_t default_noise_window(std::size_t m, std::size_t windows_per_stream = 256) {
  return std::max<std::size_t>(1, m / windows_per_stream);
}

struct RunningEstimate {
  std::vector<double> estimate;  // cumulative decode after each prefix length 1..M
  /// Smallest prefix length from which every later estimate stays within the
  /// band around the full-window value. Equals M for a zero band.
  std::size_t convergence_index = 0;
};

inline RunningEstimate running_estimate(const PulseStream& s, double ip, double in, double rel_tol,
                                        double abs_tol = 0.0) {
  if (s.states.empty()) throw std::invalid_argument("running_estimate: empty stream");
  if (!(rel_tol >= 0.0) || !(abs_tol >= 0.0)) throw std::invalid_argument("running_estimate: tolerance must be >= 0");
  RunningEstimate r;
  r.estimate.resize(s.length());
  double q = 0.0;
  for (std::size_t k = 0; k < s.length(); ++k) {
    q += s.states[k] == OutputDrive::P ? ip : (s.states[k] == OutputDrive::N ? -in : 0.0);
    r.estimate[k] = q / double(k + 1);
  }
  const double final_value = r.estimate.back();
  const double band = rel_tol * std::abs(final_value) + abs_tol;
  std::size_t idx = s.length();
  for (std::size_t k = s.length(); k-- > 0;) {
    if (k + 1 == s.length() && band == 0.0) break;
    if (std::abs(r.estimate[k] - final_value) > band) break;
    idx = k + 1;
  }
  r.convergence_index = idx;
  return r;
}

/// Per-period output current (A): +ip for P, -in for N.
inline std::vector<double> current_trace(const PulseStream& s, double ip, double in) {
  std::vector<double> out(s.length());
  for (std::size_t k = 0; k < s.length(); ++k)
    out[k] = s.states[k] == OutputDrive::P ? ip : (s.states[k] == OutputDrive::N ? -in : 0.0);
  return out;
}

/// Pulse-width equivalent trace (s): output current times T0 / (2 Ion).
inline std::vector<double> tq1_trace(const PulseStream& s, double ip, double in, double t0, double ion) {
  auto out = current_trace(s, ip, in);
  const double k = t0 / (2.0 * ion);
  for (double& v : out) v *= k;
  return out;
}

/// voutP as a voltage: Vdd while sourcing, 0 otherwise.
inline std::vector<double> voutp_trace(const PulseStream& s, double vdd) {
  std::vector<double> out(s.length());
  for (std::size_t k = 0; k < s.length(); ++k) out[k] = s.states[k] == OutputDrive::P ? vdd : 0.0;
  return out;
}

}  // namespace dbpot::pulse
