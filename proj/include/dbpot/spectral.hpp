#pragma once

#include <fftw3.h>

#include <cmath>
#include <complex>
#include <cstddef>
#include <algorithm>
#include <memory>
#include <mutex>
#include <span>
#include <stdexcept>
#include <vector>

#include "dbpot/constants.hpp"

namespace dbpot::spectral {

namespace detail {

/// FFTW planning is not thread-safe; execution of distinct plans is.
inline std::mutex& planner_mutex() {
  static std::mutex m;
  return m;
}

/// Real-to-complex transform of fixed length n.
class RealFft {
 public:
  explicit RealFft(std::size_t n) : n_(n) {
    in_ = static_cast<double*>(fftw_malloc(sizeof(double) * n));
    out_ = static_cast<fftw_complex*>(fftw_malloc(sizeof(fftw_complex) * (n / 2 + 1)));
    if (!in_ || !out_) throw std::bad_alloc();
    std::lock_guard<std::mutex> lock(planner_mutex());
    plan_ = fftw_plan_dft_r2c_1d(int(n), in_, out_, FFTW_ESTIMATE);
  }
  ~RealFft() {
    {
      std::lock_guard<std::mutex> lock(planner_mutex());
      fftw_destroy_plan(plan_);
    }
    fftw_free(in_);
    fftw_free(out_);
  }
  RealFft(const RealFft&) = delete;
  RealFft& operator=(const RealFft&) = delete;

  double* input() { return in_; }
  std::complex<double> bin(std::size_t k) const { return {out_[k][0], out_[k][1]}; }
  void run() { fftw_execute(plan_); }
  std::size_t size() const { return n_; }

 private:
  std::size_t n_;
  double* in_ = nullptr;
  fftw_complex* out_ = nullptr;
  fftw_plan plan_ = nullptr;
};

}  // namespace detail

struct Spectrum {
  std::vector<double> f;
  std::vector<double> value;
};

inline std::size_t default_segment_length(std::size_t n, int segments = 8) {
  return (2 * n) / std::size_t(segments + 1);
}

/// One-sided Welch PSD: Hann window, per-segment mean removal, density scaling
/// so that the integral over frequency equals the variance.
inline Spectrum psd_welch(std::span<const double> x, double fs, std::size_t segment, double overlap = 0.5) {
  if (!(fs > 0.0)) throw std::invalid_argument("psd_welch: fs must be > 0");
  if (segment < 2) throw std::invalid_argument("psd_welch: segment length must be >= 2");
  if (segment > x.size()) throw std::invalid_argument("psd_welch: segment longer than trace");
  if (!(overlap >= 0.0 && overlap < 1.0)) throw std::invalid_argument("psd_welch: overlap must be in [0, 1)");
  const std::size_t hop = std::max<std::size_t>(1, std::size_t(double(segment) * (1.0 - overlap)));
  const std::size_t n_seg = 1 + (x.size() - segment) / hop;
  if (n_seg < 2)
    throw std::invalid_argument("psd_welch: trace shorter than two segments");

  std::vector<double> w(segment);
  double w2 = 0.0;
  for (std::size_t k = 0; k < segment; ++k) {
    // Periodic Hann.
    w[k] = 0.5 - 0.5 * std::cos(2.0 * kPi * double(k) / double(segment));
    w2 += w[k] * w[k];
  }
  detail::RealFft fft(segment);
  const std::size_t nb = segment / 2 + 1;
  Spectrum out;
  out.value.assign(nb, 0.0);
  for (std::size_t s = 0; s < n_seg; ++s) {
    const double* seg = x.data() + s * hop;
    double mean = 0.0;
    for (std::size_t k = 0; k < segment; ++k) mean += seg[k];
    mean /= double(segment);
    double* in = fft.input();
    for (std::size_t k = 0; k < segment; ++k) in[k] = (seg[k] - mean) * w[k];
    fft.run();
    for (std::size_t k = 0; k < nb; ++k) out.value[k] += std::norm(fft.bin(k));
  }
  const double scale = 1.0 / (fs * w2 * double(n_seg));
  out.f.resize(nb);
  for (std::size_t k = 0; k < nb; ++k) {
    out.f[k] = double(k) * fs / double(segment);
    const bool edge = k == 0 || (segment % 2 == 0 && k == nb - 1);
    out.value[k] *= scale * (edge ? 1.0 : 2.0);
  }
  return out;
}

inline Spectrum psd_welch(std::span<const double> x, double fs) {
  return psd_welch(x, fs, default_segment_length(x.size()), 0.5);
}

/// Rectangle-rule integral of a uniformly sampled one-sided spectrum.
inline double integrate(const Spectrum& s) {
  if (s.f.size() < 2) return 0.0;
  const double df = s.f[1] - s.f[0];
  double acc = 0.0;
  for (double v : s.value) acc += v;
  return acc * df;
}

/// Single-sided amplitude spectrum of a digital output trace normalized to
/// Vdd. Bin 0 carries the mean; the remaining bins come from the zero-mean
/// trace, zero-padded to the next power of two and scaled by the original
/// length so a sinusoid of amplitude a reads as a.
inline Spectrum fft_normalized(std::span<const double> trace, double vdd, double fs) {
  if (trace.empty()) throw std::invalid_argument("fft_normalized: empty trace");
  if (!(vdd > 0.0) || !(fs > 0.0)) throw std::invalid_argument("fft_normalized: vdd and fs must be > 0");
  std::size_t n = 1;
  while (n < trace.size()) n <<= 1;
  double mean = 0.0;
  for (double v : trace) mean += v / vdd;
  mean /= double(trace.size());
  detail::RealFft fft(n);
  double* in = fft.input();
  for (std::size_t k = 0; k < n; ++k) in[k] = k < trace.size() ? trace[k] / vdd - mean : 0.0;
  fft.run();
  const std::size_t nb = n / 2 + 1;
  Spectrum out;
  out.f.resize(nb);
  out.value.resize(nb);
  for (std::size_t k = 0; k < nb; ++k) {
    out.f[k] = double(k) * fs / double(n);
    out.value[k] = k == 0 ? std::abs(mean) : 2.0 * std::abs(fft.bin(k)) / double(trace.size());
  }
  return out;
}

/// Least-squares slope of 10 log10(value) against log10(f) over [f_lo, f_hi] (dB/decade).
inline double loglog_slope_db(const Spectrum& s, double f_lo, double f_hi) {
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  std::size_t n = 0;
  for (std::size_t k = 0; k < s.f.size(); ++k) {
    if (s.f[k] < f_lo || s.f[k] > f_hi || !(s.f[k] > 0.0) || !(s.value[k] > 0.0)) continue;
    const double x = std::log10(s.f[k]);
    const double y = 10.0 * std::log10(s.value[k]);
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
    ++n;
  }
  if (n < 2) throw std::invalid_argument("loglog_slope_db: fewer than two points in band");
  return (double(n) * sxy - sx * sy) / (double(n) * sxx - sx * sx);
}

}  // namespace dbpot::spectral
