#pragma once

// Finite-volume solution of diffusion to an inlaid disc in a semi-infinite
// medium, used as an independent reference for the closed-form transient.
// Dimensionless units: disc radius 1, D = 1, bulk concentration 1; the
// returned current is normalized by the steady value 4 so it reads f(tau)
// with tau = 4 t.

#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

namespace oracle {

struct MicrodiscFdOptions {
  double h0 = 0.004;      // spacing at the disc edge and at the plane
  double growth = 1.07;   // geometric grading away from the edge
  double extent = 300.0;  // outer boundary held at bulk concentration
  double dt0 = 1e-6;      // first time step (dimensionless t)
  int steps_per_stage = 40;
};

namespace detail {

inline std::vector<double> graded_axis(double edge, double h0, double growth, double extent) {
  std::vector<double> up{edge};
  double h = h0;
  while (up.back() < extent) {
    up.push_back(std::min(extent, up.back() + h));
    h *= growth;
  }
  std::vector<double> down;
  h = h0;
  double x = edge;
  while (x - h > 0.0) {
    x -= h;
    down.push_back(x);
    h *= growth;
  }
  if (!down.empty() && down.back() < 0.5 * h0) down.pop_back();
  down.push_back(0.0);
  std::reverse(down.begin(), down.end());
  if (edge == 0.0) return up;
  down.insert(down.end(), up.begin(), up.end());
  return down;
}

}  // namespace detail

/// Returns f(tau) at each requested tau (ascending).
inline std::vector<double> microdisc_fd(const std::vector<double>& taus, const MicrodiscFdOptions& o = {}) {
  if (taus.empty() || !std::is_sorted(taus.begin(), taus.end()) || !(taus.front() > 0.0))
    throw std::invalid_argument("microdisc_fd: taus must be positive and ascending");
  const auto r = detail::graded_axis(1.0, o.h0, o.growth, o.extent);
  const auto z = detail::graded_axis(0.0, o.h0, o.growth, o.extent);
  const int nr = int(r.size()), nz = int(z.size());

  auto face = [](const std::vector<double>& x, int i, bool hi) {
    if (hi) return i + 1 < int(x.size()) ? 0.5 * (x[i] + x[i + 1]) : x[i];
    return i > 0 ? 0.5 * (x[i] + x[i - 1]) : x[i];
  };
  // Node classes: 0 interior unknown, 1 disc (c = 0), 2 far boundary (c = 1).
  auto kind = [&](int i, int j) {
    if (j == 0 && r[i] <= 1.0 + 1e-12) return 1;
    if (i == nr - 1 || j == nz - 1) return 2;
    return 0;
  };
  std::vector<int> index(std::size_t(nr) * nz, -1);
  std::vector<double> volume;
  int n = 0;
  for (int j = 0; j < nz; ++j)
    for (int i = 0; i < nr; ++i)
      if (kind(i, j) == 0) {
        index[std::size_t(j) * nr + i] = n++;
        const double r_lo = face(r, i, false), r_hi = face(r, i, true);
        const double z_lo = face(z, j, false), z_hi = face(z, j, true);
        volume.push_back(M_PI * (r_hi * r_hi - r_lo * r_lo) * (z_hi - z_lo));
      }

  struct Link {
    int a, b;  // node ids (i + j*nr)
    double g;
  };
  std::vector<Link> links;
  for (int j = 0; j < nz; ++j)
    for (int i = 0; i < nr; ++i) {
      const double r_lo = face(r, i, false), r_hi = face(r, i, true);
      const double z_lo = face(z, j, false), z_hi = face(z, j, true);
      if (i + 1 < nr) links.push_back({j * nr + i, j * nr + i + 1, 2.0 * M_PI * r_hi * (z_hi - z_lo) / (r[i + 1] - r[i])});
      if (j + 1 < nz)
        links.push_back({j * nr + i, (j + 1) * nr + i, M_PI * (r_hi * r_hi - r_lo * r_lo) / (z[j + 1] - z[j])});
    }

  auto value_of = [&](int id, const Eigen::VectorXd& c) {
    const int i = id % nr, j = id / nr;
    const int k = kind(i, j);
    if (k == 1) return 0.0;
    if (k == 2) return 1.0;
    return c[index[std::size_t(id)]];
  };
  auto disc_flux = [&](const Eigen::VectorXd& c) {
    double flux = 0.0;
    for (const auto& l : links) {
      const int ka = kind(l.a % nr, l.a / nr), kb = kind(l.b % nr, l.b / nr);
      if (ka == 1 && kb != 1) flux += l.g * value_of(l.b, c);
      if (kb == 1 && ka != 1) flux += l.g * value_of(l.a, c);
    }
    return flux / 4.0;
  };

  Eigen::VectorXd c = Eigen::VectorXd::Ones(n);
  std::vector<double> out;
  double t = 0.0, dt = o.dt0;
  std::size_t next = 0;
  const double t_end = taus.back() / 4.0;
  while (next < taus.size()) {
    std::vector<Eigen::Triplet<double>> trip;
    Eigen::VectorXd bconst = Eigen::VectorXd::Zero(n);
    for (int k = 0; k < n; ++k) trip.emplace_back(k, k, volume[std::size_t(k)] / dt);
    for (const auto& l : links) {
      const int ia = index[std::size_t(l.a)], ib = index[std::size_t(l.b)];
      if (ia >= 0) {
        trip.emplace_back(ia, ia, l.g);
        if (ib >= 0) trip.emplace_back(ia, ib, -l.g);
        else bconst[ia] += l.g * value_of(l.b, c);
      }
      if (ib >= 0) {
        trip.emplace_back(ib, ib, l.g);
        if (ia >= 0) trip.emplace_back(ib, ia, -l.g);
        else bconst[ib] += l.g * value_of(l.a, c);
      }
    }
    Eigen::SparseMatrix<double> a(n, n);
    a.setFromTriplets(trip.begin(), trip.end());
    Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> solver(a);
    if (solver.info() != Eigen::Success) throw std::runtime_error("microdisc_fd: factorization failed");
    Eigen::VectorXd vol(n);
    for (int k = 0; k < n; ++k) vol[k] = volume[std::size_t(k)] / dt;
    for (int s = 0; s < o.steps_per_stage && next < taus.size(); ++s) {
      Eigen::VectorXd rhs = vol.cwiseProduct(c) + bconst;
      Eigen::VectorXd c_new = solver.solve(rhs);
      const double f_old = disc_flux(c), f_new = disc_flux(c_new);
      const double t_new = t + dt;
      // Report by linear interpolation in time between steps.
      while (next < taus.size() && taus[next] / 4.0 <= t_new) {
        const double w = (taus[next] / 4.0 - t) / dt;
        out.push_back(t == 0.0 ? f_new : f_old + w * (f_new - f_old));
        ++next;
      }
      c = std::move(c_new);
      t = t_new;
      if (t > t_end) break;
    }
    dt *= 2.0;
  }
  return out;
}

}  // namespace oracle
