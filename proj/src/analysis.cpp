#include "etbell/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "etbell/common.hpp"

namespace etbell {

namespace {

struct Candidate {
  int64_t dist_ps;
  size_t ia;
  size_t ib;
  uint8_t da;
  uint8_t db;
};

void check_sorted(const EventStream& s, const char* which) {
  for (size_t k = 1; k < s.events.size(); ++k) {
    if (s.events[k].t_ps < s.events[k - 1].t_ps) {
      throw ValidationError(std::string("unsorted event stream: ") + which);
    }
  }
  for (const auto& e : s.events) {
    if (e.detector != 1 && e.detector != 2) {
      throw ValidationError("detector index out of range in stream");
    }
  }
}

std::vector<Candidate> window_candidates(const EventStream& a,
                                         const EventStream& b,
                                         int64_t center_ps, int64_t half_ps) {
  std::vector<Candidate> cands;
  size_t jb = 0;
  for (size_t ia = 0; ia < a.events.size(); ++ia) {
    const int64_t lo = a.events[ia].t_ps + center_ps - half_ps;
    const int64_t hi = a.events[ia].t_ps + center_ps + half_ps;
    while (jb < b.events.size() && b.events[jb].t_ps < lo) ++jb;
    for (size_t j = jb; j < b.events.size() && b.events[j].t_ps <= hi; ++j) {
      const int64_t d = b.events[j].t_ps - a.events[ia].t_ps - center_ps;
      cands.push_back({std::llabs(d), ia, j, a.events[ia].detector,
                       b.events[j].detector});
    }
  }
  return cands;
}

// 3x3 symmetric solve + inverse by Gaussian elimination with partial
// pivoting; returns false on a singular system.
bool invert3(const double m[3][3], double inv[3][3]) {
  double a[3][6];
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) {
      a[r][c] = m[r][c];
      a[r][c + 3] = (r == c) ? 1.0 : 0.0;
    }
  }
  for (int col = 0; col < 3; ++col) {
    int piv = col;
    for (int r = col + 1; r < 3; ++r) {
      if (std::fabs(a[r][col]) > std::fabs(a[piv][col])) piv = r;
    }
    if (std::fabs(a[piv][col]) < 1e-300) return false;
    if (piv != col) {
      for (int c = 0; c < 6; ++c) std::swap(a[piv][c], a[col][c]);
    }
    const double d = a[col][col];
    for (int c = 0; c < 6; ++c) a[col][c] /= d;
    for (int r = 0; r < 3; ++r) {
      if (r == col) continue;
      const double f = a[r][col];
      for (int c = 0; c < 6; ++c) a[r][c] -= f * a[col][c];
    }
  }
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) inv[r][c] = a[r][c + 3];
  }
  return true;
}

}  // namespace

double CountTable::total() const {
  return counts[0][0] + counts[0][1] + counts[1][0] + counts[1][1];
}

CountTable count_coincidences(const EventStream& stream_a,
                              const EventStream& stream_b,
                              const CoincidenceWindow& window) {
  if (!(window.width_s > 0.0)) {
    throw ValidationError("coincidence window width must be > 0");
  }
  check_sorted(stream_a, "A");
  check_sorted(stream_b, "B");

  const int64_t half_ps =
      static_cast<int64_t>(std::llround(window.width_s * 0.5 * 1e12));
  const int64_t center_ps =
      static_cast<int64_t>(std::llround(window.center_s * 1e12));

  CountTable table;
  table.integration_time_s = stream_a.duration_s;
  auto cands = window_candidates(stream_a, stream_b, center_ps, half_ps);

  if (window.pairing == PairingRule::AllPairs) {
    for (const auto& c : cands) {
      table.counts[c.da - 1][c.db - 1] += 1.0;
    }
    return table;
  }

  // Greedy nearest matching without click reuse: repeatedly take the pair
  // closest to the window center, ties broken by event order.
  std::sort(cands.begin(), cands.end(),
            [](const Candidate& x, const Candidate& y) {
              if (x.dist_ps != y.dist_ps) return x.dist_ps < y.dist_ps;
              if (x.ia != y.ia) return x.ia < y.ia;
              return x.ib < y.ib;
            });
  std::vector<char> used_a(stream_a.events.size(), 0);
  std::vector<char> used_b(stream_b.events.size(), 0);
  for (const auto& c : cands) {
    if (used_a[c.ia] || used_b[c.ib]) continue;
    used_a[c.ia] = used_b[c.ib] = 1;
    table.counts[c.da - 1][c.db - 1] += 1.0;
  }
  return table;
}

double accidental_rate_from_singles(double rate_a_hz, double rate_b_hz,
                                    const CoincidenceWindow& window) {
  if (rate_a_hz < 0.0 || rate_b_hz < 0.0) {
    throw ValidationError("singles rates must be >= 0");
  }
  return rate_a_hz * rate_b_hz * window.width_s;
}

AccidentalEstimate accidentals_from_singles(double alice_det1_hz,
                                            double alice_det2_hz,
                                            double bob_det1_hz,
                                            double bob_det2_hz,
                                            const CoincidenceWindow& window) {
  AccidentalEstimate est;
  est.method = AccidentalMethod::FromSingles;
  const double ra[2] = {alice_det1_hz, alice_det2_hz};
  const double rb[2] = {bob_det1_hz, bob_det2_hz};
  for (int i = 0; i < 2; ++i) {
    for (int j = 0; j < 2; ++j) {
      est.rate_hz[i][j] = accidental_rate_from_singles(ra[i], rb[j], window);
    }
  }
  return est;
}

AccidentalEstimate accidentals_from_shifted_window(
    const EventStream& stream_a, const EventStream& stream_b,
    const CoincidenceWindow& window, double shift_s) {
  if (std::fabs(shift_s) < window.width_s) {
    throw ValidationError("shift must move the window clear of true center");
  }
  CoincidenceWindow shifted = window;
  shifted.center_s += shift_s;
  shifted.pairing = PairingRule::AllPairs;
  const CountTable t = count_coincidences(stream_a, stream_b, shifted);
  AccidentalEstimate est;
  est.method = AccidentalMethod::FromShiftedWindow;
  const double T = std::max(t.integration_time_s,
                            std::numeric_limits<double>::min());
  for (int i = 0; i < 2; ++i) {
    for (int j = 0; j < 2; ++j) {
      est.rate_hz[i][j] = t.counts[i][j] / T;
    }
  }
  return est;
}

CountTable subtract_accidentals(const CountTable& table,
                                const AccidentalEstimate& estimate) {
  CountTable net = table;
  net.net = true;
  for (int i = 0; i < 2; ++i) {
    for (int j = 0; j < 2; ++j) {
      if (!std::isfinite(estimate.rate_hz[i][j]) ||
          estimate.rate_hz[i][j] < 0.0) {
        throw ValidationError("accidental rates must be finite and >= 0");
      }
      net.counts[i][j] =
          std::max(0.0, table.counts[i][j] -
                            estimate.rate_hz[i][j] * table.integration_time_s);
    }
  }
  return net;
}

FringeFit fit_fringe(std::span<const FringePoint> points, int detector_a,
                     int detector_b) {
  if (detector_a < 1 || detector_a > 2 || detector_b < 1 || detector_b > 2) {
    throw ValidationError("detector index must be 1 or 2");
  }
  if (points.size() < 6) {
    throw ValidationError("fringe fit needs at least 6 points");
  }
  double lo = points[0].first, hi = points[0].first;
  for (const auto& [phi, tbl] : points) {
    lo = std::min(lo, phi);
    hi = std::max(hi, phi);
  }
  if (hi - lo < kTau - 1e-6) {
    throw ValidationError("fringe fit needs points spanning a full period");
  }

  const size_t n = points.size();
  std::vector<double> y(n), cphi(n), sphi(n), w(n, 1.0);
  for (size_t k = 0; k < n; ++k) {
    y[k] = points[k].second.counts[detector_a - 1][detector_b - 1];
    cphi[k] = std::cos(points[k].first);
    sphi[k] = std::sin(points[k].first);
  }

  double c[3] = {0.0, 0.0, 0.0};
  double cov[3][3] = {};
  // Pass 0 is unweighted; later passes use Poisson weights from the model
  // prediction so the weights stay independent of the noise realization.
  for (int pass = 0; pass < 3; ++pass) {
    double m[3][3] = {};
    double b[3] = {0.0, 0.0, 0.0};
    for (size_t k = 0; k < n; ++k) {
      const double x[3] = {1.0, cphi[k], sphi[k]};
      for (int r = 0; r < 3; ++r) {
        b[r] += w[k] * x[r] * y[k];
        for (int s = 0; s < 3; ++s) m[r][s] += w[k] * x[r] * x[s];
      }
    }
    double inv[3][3];
    if (!invert3(m, inv)) {
      throw ValidationError(
          "fringe fit did not converge: singular normal equations "
          "(degenerate phase coverage)");
    }
    for (int r = 0; r < 3; ++r) {
      c[r] = inv[r][0] * b[0] + inv[r][1] * b[1] + inv[r][2] * b[2];
      for (int s = 0; s < 3; ++s) cov[r][s] = inv[r][s];
    }
    if (pass < 2) {
      for (size_t k = 0; k < n; ++k) {
        const double pred = c[0] + c[1] * cphi[k] + c[2] * sphi[k];
        w[k] = 1.0 / std::max(pred, 1.0);
      }
    }
  }

  FringeFit fit;
  fit.offset = c[0];
  fit.amplitude = std::hypot(c[1], c[2]);
  fit.phase0 = (fit.amplitude > 0.0) ? std::atan2(-c[2], c[1]) : 0.0;
  fit.offset_err = std::sqrt(std::max(0.0, cov[0][0]));

  // Delta-method errors for amplitude, phase and visibility.
  const double A = std::max(fit.amplitude, 1e-300);
  const double ga[3] = {0.0, c[1] / A, c[2] / A};
  const double gp[3] = {0.0, c[2] / (A * A), -c[1] / (A * A)};
  double va = 0.0, vp = 0.0;
  for (int r = 0; r < 3; ++r) {
    for (int s = 0; s < 3; ++s) {
      va += ga[r] * cov[r][s] * ga[s];
      vp += gp[r] * cov[r][s] * gp[s];
    }
  }
  fit.amplitude_err = std::sqrt(std::max(0.0, va));
  fit.phase0_err = std::sqrt(std::max(0.0, vp));

  if (fit.offset > 0.0) {
    fit.visibility = fit.amplitude / fit.offset;
    const double gv[3] = {-fit.amplitude / (fit.offset * fit.offset),
                          c[1] / (A * fit.offset), c[2] / (A * fit.offset)};
    double vv = 0.0;
    for (int r = 0; r < 3; ++r) {
      for (int s = 0; s < 3; ++s) vv += gv[r] * cov[r][s] * gv[s];
    }
    fit.visibility_err = std::sqrt(std::max(0.0, vv));
  } else {
    fit.visibility = 0.0;
    fit.degenerate_phase = true;
    fit.clamped = true;
  }
  if (fit.visibility > 1.0) {
    fit.visibility = 1.0;
    fit.clamped = true;
  }
  if (fit.amplitude <= 1e-9 * std::max(1.0, fit.offset) ||
      fit.phase0_err >= std::numbers::pi) {
    fit.degenerate_phase = true;
  }

  for (size_t k = 0; k < n; ++k) {
    const double pred = c[0] + c[1] * cphi[k] + c[2] * sphi[k];
    fit.chi2 += w[k] * (y[k] - pred) * (y[k] - pred);
  }
  fit.ndf = static_cast<int>(n) - 3;
  return fit;
}

ChshResult estimate_chsh(const std::array<CountTable, 4>& tables) {
  ChshResult r;
  for (int s = 0; s < 4; ++s) {
    const auto& t = tables[s].counts;
    const double tot = tables[s].total();
    if (!(tot > 0.0)) {
      throw ValidationError("estimate_chsh: setting pair with zero total");
    }
    const double e = (t[0][0] + t[1][1] - t[0][1] - t[1][0]) / tot;
    r.e_values[s] = e;
    r.e_sigmas[s] = std::sqrt(std::max(0.0, (1.0 - e * e) / tot));
  }
  r.s_value = r.e_values[0] + r.e_values[1] + r.e_values[2] - r.e_values[3];
  r.s_sigma = std::sqrt(r.e_sigmas[0] * r.e_sigmas[0] +
                        r.e_sigmas[1] * r.e_sigmas[1] +
                        r.e_sigmas[2] * r.e_sigmas[2] +
                        r.e_sigmas[3] * r.e_sigmas[3]);
  r.significance = (r.s_value - 2.0) / r.s_sigma;
  return r;
}

}  // namespace etbell
