#pragma once

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numeric>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "statics.hpp"
#include "waveform.hpp"

namespace phrap {

struct TraceOptions {
  std::size_t base_steps = 600;
  double overlap_threshold = 0.5;
  int max_depth = 20;
};

struct ExactCrossing {
  double time;
  std::size_t step;  // last step before the crossing
  std::size_t branch_a, branch_b;
};

struct SpectrumTrace {
  std::vector<double> times;
  std::vector<ControlField> controls;
  std::vector<CrystalConfiguration> crystals;
  std::vector<ModeSpectrum> spectra;
  // step_match[k][i]: mode index at step k+1 continuing mode i of step k
  std::vector<std::vector<std::size_t>> step_match;
  // branch_mode[k][b]: mode index at step k carrying branch b (branch b is
  // mode b at t = 0)
  std::vector<std::vector<std::size_t>> branch_mode;
  std::vector<ExactCrossing> exact_crossings;

  std::size_t steps() const { return times.size(); }
  std::size_t branches() const { return spectra.empty() ? 0 : spectra.front().size(); }

  double omega(std::size_t k, std::size_t b) const {
    return spectra[k].omega(static_cast<Eigen::Index>(branch_mode[k][b]));
  }
  Eigen::VectorXd vector(std::size_t k, std::size_t b) const { return spectra[k].mode(branch_mode[k][b]); }
  ModeLabel label(std::size_t k, std::size_t b) const { return spectra[k].labels[branch_mode[k][b]]; }
  ModeLabel initial_label(std::size_t b) const { return label(0, b); }

  // Step index whose time is closest to t.
  std::size_t nearest_step(double t) const {
    auto it = std::lower_bound(times.begin(), times.end(), t);
    if (it == times.end()) return times.size() - 1;
    std::size_t k = static_cast<std::size_t>(it - times.begin());
    if (k > 0 && t - times[k - 1] < times[k] - t) --k;
    return k;
  }
};

namespace detail {

struct TracePoint {
  double t;
  ControlField control;
  CrystalConfiguration crystal;
  ModeSpectrum spectrum;
};

inline TracePoint evaluate_point(const IonTrap& trap, const Waveform& w, double t,
                                 const IonPositions* guess) {
  TracePoint p;
  p.t = t;
  p.control = w.empty() ? ControlField{} : w.sample(t);
  p.crystal = guess ? solve_equilibrium(trap, p.control, *guess) : solve_equilibrium(trap, p.control);
  p.spectrum = normal_modes(trap, p.control, p.crystal);
  return p;
}

struct Match {
  std::vector<std::size_t> perm;  // previous mode -> next mode
  double min_overlap = 1.0;
  bool order_swap = false;
};

// Greedy maximal-overlap assignment; flips signs of `next` so matched
// overlaps are positive.
inline Match match_modes(const ModeSpectrum& prev, ModeSpectrum& next) {
  const auto n = static_cast<std::size_t>(prev.size());
  const Eigen::MatrixXd o = prev.participation.transpose() * next.participation;
  Match m;
  m.perm.assign(n, n);
  std::vector<bool> row_used(n, false), col_used(n, false);
  for (std::size_t k = 0; k < n; ++k) {
    double best = -1.0;
    std::size_t bi = 0, bj = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (row_used[i]) continue;
      for (std::size_t j = 0; j < n; ++j) {
        if (col_used[j]) continue;
        const double v = std::abs(o(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)));
        if (v > best) {
          best = v;
          bi = i;
          bj = j;
        }
      }
    }
    row_used[bi] = col_used[bj] = true;
    m.perm[bi] = bj;
    m.min_overlap = std::min(m.min_overlap, best);
    if (o(static_cast<Eigen::Index>(bi), static_cast<Eigen::Index>(bj)) < 0)
      next.participation.col(static_cast<Eigen::Index>(bj)) *= -1.0;
  }
  auto close = [](const ModeSpectrum& s, std::size_t a, std::size_t b) {
    const double wa = s.omega(static_cast<Eigen::Index>(a)), wb = s.omega(static_cast<Eigen::Index>(b));
    return std::abs(wa - wb) < 1e-9 * std::max(wa, wb);
  };
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      if (m.perm[i] > m.perm[j] && !(close(prev, i, j) && close(next, m.perm[i], m.perm[j])))
        m.order_swap = true;
  return m;
}

}  // namespace detail

inline SpectrumTrace trace_spectrum(const IonTrap& trap, const Waveform& w, const TraceOptions& opt = {}) {
  using detail::TracePoint;
  const double T = w.total_duration();
  std::vector<double> grid;
  if (T > 0.0) {
    const std::size_t n = std::max<std::size_t>(opt.base_steps, 1);
    for (std::size_t i = 0; i <= n; ++i) grid.push_back(T * static_cast<double>(i) / static_cast<double>(n));
    for (std::size_t i = 1; i < w.segments().size(); ++i) grid.push_back(w.segment_start(i));
    std::sort(grid.begin(), grid.end());
    grid.erase(std::unique(grid.begin(), grid.end(),
                           [T](double a, double b) { return std::abs(a - b) < 1e-15 * T; }),
               grid.end());
    grid.back() = T;
  } else {
    grid.push_back(0.0);
  }

  SpectrumTrace tr;
  auto push = [&](TracePoint&& p) {
    tr.times.push_back(p.t);
    tr.controls.push_back(p.control);
    tr.crystals.push_back(std::move(p.crystal));
    tr.spectra.push_back(std::move(p.spectrum));
  };

  TracePoint cur = detail::evaluate_point(trap, w, grid[0], nullptr);
  push(TracePoint(cur));

  // Depth-first bisection of [a, b] until matching is unambiguous.
  auto refine = [&](auto&& self, const TracePoint& a, TracePoint b, int depth) -> void {
    ModeSpectrum trial = b.spectrum;
    detail::Match m = detail::match_modes(a.spectrum, trial);
    const bool ok = m.min_overlap >= opt.overlap_threshold && !m.order_swap;
    if (ok || depth >= opt.max_depth) {
      // any inversion surviving here is an unresolvable (exact) crossing
      for (std::size_t i = 0; i < m.perm.size(); ++i)
        for (std::size_t j = i + 1; j < m.perm.size(); ++j)
          if (m.perm[i] > m.perm[j]) tr.exact_crossings.push_back({0.5 * (a.t + b.t), tr.steps() - 1, i, j});
      b.spectrum = std::move(trial);
      tr.step_match.push_back(std::move(m.perm));
      push(std::move(b));
      return;
    }
    TracePoint mid = detail::evaluate_point(trap, w, 0.5 * (a.t + b.t), &a.crystal.equilibrium);
    self(self, a, mid, depth + 1);
    const TracePoint left = TracePoint{tr.times.back(), tr.controls.back(), tr.crystals.back(), tr.spectra.back()};
    self(self, left, std::move(b), depth + 1);
  };

  for (std::size_t i = 1; i < grid.size(); ++i) {
    TracePoint next = detail::evaluate_point(trap, w, grid[i], &cur.crystal.equilibrium);
    refine(refine, cur, std::move(next), 0);
    cur = TracePoint{tr.times.back(), tr.controls.back(), tr.crystals.back(), tr.spectra.back()};
  }

  const std::size_t nb = tr.branches();
  tr.branch_mode.assign(tr.steps(), std::vector<std::size_t>(nb));
  std::iota(tr.branch_mode[0].begin(), tr.branch_mode[0].end(), std::size_t{0});
  for (std::size_t k = 0; k + 1 < tr.steps(); ++k)
    for (std::size_t b = 0; b < nb; ++b) tr.branch_mode[k + 1][b] = tr.step_match[k][tr.branch_mode[k][b]];

  // exact crossings were recorded as mode indices at their step
  for (auto& x : tr.exact_crossings) {
    const auto& modes = tr.branch_mode[x.step];
    x.branch_a = static_cast<std::size_t>(std::find(modes.begin(), modes.end(), x.branch_a) - modes.begin());
    x.branch_b = static_cast<std::size_t>(std::find(modes.begin(), modes.end(), x.branch_b) - modes.begin());
  }
  return tr;
}

struct CrossingReport {
  std::size_t branch_m = 0, branch_n = 0;      // uncoupled branches
  ModeLabel label_m = ModeLabel::Unlabeled, label_n = ModeLabel::Unlabeled;
  std::size_t coupled_a = 0, coupled_b = 0;    // coupled branches forming the gap
  double time_min_gap = 0.0;                   // s
  double min_gap = 0.0;                        // rad/s
  double uncoupled_time = 0.0;                 // s
  double coupling = 0.0;                       // rad/s, equal to min_gap
  double sweep_rate = 0.0;                     // d(omega_m - omega_n)/dt, rad/s^2
};

namespace detail {

// Vertex of the parabola through three points; returns false when not convex.
inline bool parabola_vertex(double x0, double y0, double x1, double y1, double x2, double y2,
                            double& xv, double& yv) {
  const double d01 = (y1 - y0) / (x1 - x0), d12 = (y2 - y1) / (x2 - x1);
  const double a = (d12 - d01) / (x2 - x0);
  if (!(a > 0.0)) return false;
  const double b = d01 - a * (x0 + x1);
  xv = -b / (2 * a);
  yv = y1 - a * (x1 - xv) * (x1 - xv);
  return true;
}

}  // namespace detail

inline std::vector<CrossingReport> find_crossings(const SpectrumTrace& coupled, const SpectrumTrace& bare) {
  std::vector<CrossingReport> out;
  const std::size_t nb = bare.branches();
  if (bare.steps() < 2 || coupled.steps() < 2) return out;

  for (std::size_t m = 0; m < nb; ++m)
    for (std::size_t n = m + 1; n < nb; ++n)
      for (std::size_t k = 0; k + 1 < bare.steps(); ++k) {
        const double d0 = bare.omega(k, m) - bare.omega(k, n);
        const double d1 = bare.omega(k + 1, m) - bare.omega(k + 1, n);
        if (!((d0 < 0 && d1 >= 0) || (d0 > 0 && d1 <= 0))) continue;
        if (d1 == 0 && k + 2 < bare.steps()) {
          // touching zero exactly: count it once, where the sign really flips
          const double d2 = bare.omega(k + 2, m) - bare.omega(k + 2, n);
          if ((d0 < 0) == (d2 < 0)) continue;
        }
        CrossingReport r;
        r.branch_m = m;
        r.branch_n = n;
        r.label_m = bare.initial_label(m);
        r.label_n = bare.initial_label(n);
        const double t0 = bare.times[k], t1 = bare.times[k + 1];
        r.sweep_rate = (d1 - d0) / (t1 - t0);
        r.uncoupled_time = t0 + (t1 - t0) * d0 / (d0 - d1);

        // coupled branches with most weight in span{u_m, u_n}
        const std::size_t kb = std::abs(r.uncoupled_time - t0) < std::abs(t1 - r.uncoupled_time) ? k : k + 1;
        const Eigen::VectorXd um = bare.vector(kb, m), un = bare.vector(kb, n);
        std::size_t j = coupled.nearest_step(r.uncoupled_time);
        std::vector<std::pair<double, std::size_t>> weight;
        for (std::size_t b = 0; b < coupled.branches(); ++b) {
          const Eigen::VectorXd v = coupled.vector(j, b);
          weight.emplace_back(std::pow(v.dot(um), 2) + std::pow(v.dot(un), 2), b);
        }
        std::stable_sort(weight.begin(), weight.end(), [](auto& x, auto& y) { return x.first > y.first; });
        r.coupled_a = std::min(weight[0].second, weight[1].second);
        r.coupled_b = std::max(weight[0].second, weight[1].second);

        auto gap = [&](std::size_t s) { return std::abs(coupled.omega(s, r.coupled_a) - coupled.omega(s, r.coupled_b)); };
        // walk downhill to the local minimum
        while (j + 1 < coupled.steps() && gap(j + 1) < gap(j)) ++j;
        while (j > 0 && gap(j - 1) < gap(j)) --j;
        r.time_min_gap = coupled.times[j];
        double g2 = gap(j) * gap(j);
        if (j > 0 && j + 1 < coupled.steps()) {
          double tv, gv;
          if (detail::parabola_vertex(coupled.times[j - 1], std::pow(gap(j - 1), 2), coupled.times[j], g2,
                                      coupled.times[j + 1], std::pow(gap(j + 1), 2), tv, gv) &&
              tv >= coupled.times[j - 1] && tv <= coupled.times[j + 1]) {
            r.time_min_gap = tv;
            g2 = std::min(g2, std::max(gv, 0.0));
          }
        }
        r.min_gap = std::sqrt(g2);
        r.coupling = r.min_gap;
        out.push_back(r);
      }
  std::stable_sort(out.begin(), out.end(),
                   [](const CrossingReport& a, const CrossingReport& b) { return a.uncoupled_time < b.uncoupled_time; });
  return out;
}

struct Permutation {
  std::vector<std::size_t> target;  // population of mode i ends in mode target[i]
  std::vector<ModeLabel> labels;    // initial labels

  bool is_identity() const {
    for (std::size_t i = 0; i < target.size(); ++i)
      if (target[i] != i) return false;
    return true;
  }

  // Non-trivial cycles, each starting from its lowest mode index.
  std::vector<std::vector<std::size_t>> cycles() const {
    std::vector<std::vector<std::size_t>> out;
    std::vector<bool> seen(target.size(), false);
    for (std::size_t i = 0; i < target.size(); ++i) {
      if (seen[i] || target[i] == i) continue;
      std::vector<std::size_t> c;
      for (std::size_t j = i; !seen[j]; j = target[j]) {
        seen[j] = true;
        c.push_back(j);
      }
      out.push_back(std::move(c));
    }
    return out;
  }

  std::vector<std::vector<ModeLabel>> label_cycles() const {
    std::vector<std::vector<ModeLabel>> out;
    for (const auto& c : cycles()) {
      std::vector<ModeLabel> l;
      for (std::size_t i : c) l.push_back(labels[i]);
      out.push_back(std::move(l));
    }
    return out;
  }

  // e.g. "XSTR->YSTR->ZSTR->XSTR"; "identity" when nothing moves.
  std::string to_string() const {
    if (is_identity()) return "identity";
    std::string s;
    for (const auto& c : label_cycles()) {
      if (!s.empty()) s += "; ";
      for (ModeLabel l : c) s += phrap::to_string(l) + "->";
      s += phrap::to_string(c.front());
    }
    return s;
  }
};

inline Permutation predict_permutation(const SpectrumTrace& coupled, const SpectrumTrace& bare,
                                       double relative_tolerance = 1e-6) {
  const std::size_t nb = bare.branches();
  if (coupled.branches() != nb) throw InvalidParameter("traces have different mode counts");
  const std::size_t kc = coupled.steps() - 1, ku = bare.steps() - 1;

  std::vector<std::tuple<double, std::size_t, std::size_t>> pairs;
  for (std::size_t b = 0; b < nb; ++b)
    for (std::size_t u = 0; u < nb; ++u)
      pairs.emplace_back(std::abs(coupled.omega(kc, b) - bare.omega(ku, u)), b, u);
  std::stable_sort(pairs.begin(), pairs.end(), [](auto& x, auto& y) { return std::get<0>(x) < std::get<0>(y); });

  Permutation p;
  p.target.assign(nb, nb);
  std::vector<bool> used(nb, false);
  for (auto& [d, b, u] : pairs) {
    if (p.target[b] != nb || used[u]) continue;
    if (d > relative_tolerance * bare.omega(ku, u))
      throw CouplingNotClosedError("coupled branch " + std::to_string(b) + " ends " +
                                   std::to_string(rad_to_hz(d)) + " Hz away from every uncoupled mode");
    p.target[b] = u;
    used[u] = true;
  }
  for (std::size_t b = 0; b < nb; ++b) p.labels.push_back(bare.initial_label(b));
  return p;
}

struct AdiabaticityReport {
  double diabatic_probability = 1.0;
  double transfer_probability = 0.0;
  double theta_rate_margin = 0.0;  // max |d theta_r / dt| / gap
};

// Two-level Landau-Zener estimate with the full gap as the coupling.
inline AdiabaticityReport adiabaticity_report(const CrossingReport& c) {
  if (!(std::abs(c.sweep_rate) > 0.0) || !std::isfinite(c.sweep_rate))
    throw DegenerateSweepError("crossing has no finite sweep rate");
  AdiabaticityReport r;
  const double rate = std::abs(c.sweep_rate), g = c.coupling;
  r.diabatic_probability = std::exp(-kPi * g * g / (2.0 * rate));
  r.transfer_probability = 1.0 - r.diabatic_probability;
  // theta_r = atan(g / 2 delta) with delta = rate t: |theta'| / sqrt(delta^2 + g^2)
  // peaks at delta = 0
  r.theta_rate_margin = g > 0.0 ? 2.0 * rate / (g * g) : std::numeric_limits<double>::infinity();
  return r;
}

// One row per (time, branch): time_s, mode_index, freq_hz, label, p0..p{3K-1}.
inline void write_trace_csv(std::ostream& os, const SpectrumTrace& tr) {
  os << "time_s,mode_index,freq_hz,label";
  const std::size_t ndof = tr.branches();
  for (std::size_t i = 0; i < ndof; ++i) os << ",p" << i;
  os << "\n";
  std::ostringstream line;
  line << std::scientific << std::setprecision(12);
  for (std::size_t k = 0; k < tr.steps(); ++k)
    for (std::size_t b = 0; b < ndof; ++b) {
      line.str("");
      line << tr.times[k] << "," << b << "," << rad_to_hz(tr.omega(k, b)) << "," << to_string(tr.label(k, b));
      const Eigen::VectorXd v = tr.vector(k, b);
      for (Eigen::Index i = 0; i < v.size(); ++i) line << "," << v(i);
      os << line.str() << "\n";
    }
}

}  // namespace phrap
