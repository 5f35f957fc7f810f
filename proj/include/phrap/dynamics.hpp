#pragma once

#include <Eigen/Dense>
#include <unsupported/Eigen/MatrixFunctions>
#include <boost/numeric/odeint.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "statics.hpp"
#include "waveform.hpp"

namespace phrap {

// Phase-space state about the instantaneous equilibrium, in mass-weighted
// Cartesian coordinates u = sqrt(m) (r - r_eq) and their velocities (u, u').
struct ThermalState {
  ModeSpectrum spectrum;            // reference modes
  Eigen::VectorXd nbar;             // quanta per mode of `spectrum`
  Eigen::VectorXd nbar_stderr;      // empty unless from an ensemble
  std::optional<Eigen::MatrixXd> covariance;  // 2N x 2N
  std::optional<Eigen::VectorXd> mean;        // 2N, coherent displacement

  static ThermalState thermal(const ModeSpectrum& s, const Eigen::VectorXd& nbar) {
    if (nbar.size() != s.omega.size()) throw InvalidParameter("occupancy vector does not match spectrum");
    for (Eigen::Index m = 0; m < nbar.size(); ++m)
      if (!(nbar(m) >= 0.0) || !std::isfinite(nbar(m)))
        throw InvalidParameter("occupancies must be finite and non-negative");
    ThermalState t;
    t.spectrum = s;
    t.nbar = nbar;
    return t;
  }

  // Mode-diagonal covariance implied by nbar, in mode coordinates (q, q').
  static Eigen::MatrixXd mode_covariance(const ModeSpectrum& s, const Eigen::VectorXd& nbar) {
    const Eigen::Index n = s.omega.size();
    Eigen::MatrixXd c = Eigen::MatrixXd::Zero(2 * n, 2 * n);
    for (Eigen::Index m = 0; m < n; ++m) {
      const double w = s.omega(m), f = 2.0 * nbar(m) + 1.0;
      c(m, m) = kHbar / (2.0 * w) * f;
      c(n + m, n + m) = kHbar * w / 2.0 * f;
    }
    return c;
  }

  Eigen::MatrixXd cartesian_covariance() const {
    if (covariance) return *covariance;
    const Eigen::MatrixXd b = phase_basis(spectrum);
    return b * mode_covariance(spectrum, nbar) * b.transpose();
  }

  Eigen::VectorXd cartesian_mean() const {
    return mean ? *mean : Eigen::VectorXd::Zero(2 * spectrum.omega.size());
  }

  // blockdiag(B, B): mode phase space -> Cartesian phase space
  static Eigen::MatrixXd phase_basis(const ModeSpectrum& s) {
    const Eigen::Index n = s.omega.size();
    Eigen::MatrixXd b = Eigen::MatrixXd::Zero(2 * n, 2 * n);
    b.topLeftCorner(n, n) = s.participation;
    b.bottomRightCorner(n, n) = s.participation;
    return b;
  }
};

// Per-mode quanta of a Cartesian phase-space covariance (plus optional mean).
inline Eigen::VectorXd extract_occupancies(const Eigen::MatrixXd& cov, const ModeSpectrum& s,
                                           const std::optional<Eigen::VectorXd>& mean = std::nullopt) {
  const Eigen::Index n = s.omega.size();
  if (cov.rows() != 2 * n || cov.cols() != 2 * n) throw InvalidParameter("covariance does not match spectrum");
  const Eigen::MatrixXd b = ThermalState::phase_basis(s);
  Eigen::MatrixXd second = cov;
  if (mean) second += (*mean) * mean->transpose();
  const Eigen::MatrixXd c = b.transpose() * second * b;
  Eigen::VectorXd nbar(n);
  for (Eigen::Index m = 0; m < n; ++m) {
    const double w = s.omega(m);
    const double e = 0.5 * (c(n + m, n + m) + w * w * c(m, m));
    nbar(m) = std::max(0.0, e / (kHbar * w) - 0.5);
  }
  return nbar;
}

inline Eigen::VectorXd extract_occupancies(const ThermalState& t) {
  if (!t.covariance && !t.mean) return t.nbar;
  return extract_occupancies(t.cartesian_covariance(), t.spectrum, t.mean);
}

// Fixed quanta added to chosen modes each time a tagged event completes.
struct HeatingModel {
  double quanta = 0.15;
  std::vector<ModeLabel> modes{ModeLabel::YSTR, ModeLabel::ZSTR};
};

// At the end of every segment tagged `tag`, the listed modes are reset to
// `nbar` and, if a heating model is attached, the heating is applied.
struct CoolingEvent {
  std::string tag = "cool";
  std::vector<ModeLabel> modes{ModeLabel::XSTR};
  double nbar = 0.05;
};

struct Events {
  std::vector<CoolingEvent> cooling;
  std::optional<HeatingModel> heating;

  bool fires(const std::string& tag) const {
    if (tag.empty()) return false;
    return std::any_of(cooling.begin(), cooling.end(), [&](const CoolingEvent& c) { return c.tag == tag; });
  }
};

namespace detail {

// Mode indices in `s` carrying the labels; unknown labels are an error.
inline std::vector<Eigen::Index> modes_by_label(const ModeSpectrum& s, const std::vector<ModeLabel>& labels) {
  std::vector<Eigen::Index> out;
  for (ModeLabel l : labels) {
    auto m = s.find(l);
    if (!m) throw InvalidParameter("no mode labelled " + to_string(l) + " at the event");
    out.push_back(static_cast<Eigen::Index>(*m));
  }
  return out;
}

// Applies cooling and heating to a Cartesian covariance / mean in place.
inline void apply_events(const Events& ev, const std::string& tag, const ModeSpectrum& s, Eigen::MatrixXd& cov,
                         Eigen::VectorXd& mean) {
  const Eigen::Index n = s.omega.size();
  const Eigen::MatrixXd b = ThermalState::phase_basis(s);
  Eigen::MatrixXd c = b.transpose() * cov * b;
  Eigen::VectorXd mu = b.transpose() * mean;
  for (const CoolingEvent& ce : ev.cooling) {
    if (ce.tag != tag) continue;
    for (Eigen::Index m : modes_by_label(s, ce.modes)) {
      for (Eigen::Index k : {m, n + m}) {
        c.row(k).setZero();
        c.col(k).setZero();
        mu(k) = 0.0;
      }
      const double w = s.omega(m), f = 2.0 * ce.nbar + 1.0;
      c(m, m) = kHbar / (2.0 * w) * f;
      c(n + m, n + m) = kHbar * w / 2.0 * f;
    }
    if (ev.heating)
      for (Eigen::Index m : modes_by_label(s, ev.heating->modes)) {
        const double w = s.omega(m);
        c(m, m) += kHbar / w * ev.heating->quanta;
        c(n + m, n + m) += kHbar * w * ev.heating->quanta;
      }
  }
  cov = b * c * b.transpose();
  mean = b * mu;
}

struct WellPoint {
  CrystalConfiguration crystal;
  Eigen::MatrixXd k;     // mass-weighted Hessian
  Eigen::VectorXd w_eq;  // mass-weighted equilibrium
};

inline WellPoint well_at(const IonTrap& trap, const ControlField& f, const IonPositions& guess) {
  WellPoint p;
  p.crystal = solve_equilibrium(trap, f, guess);
  p.k = mass_weighted_hessian(trap, f, p.crystal.equilibrium);
  p.w_eq = p.crystal.equilibrium.flat().cwiseQuotient(inv_sqrt_masses(trap));
  return p;
}

inline double max_omega(const Eigen::MatrixXd& k) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(k, Eigen::EigenvaluesOnly);
  return std::sqrt(std::max(es.eigenvalues().maxCoeff(), 0.0));
}

}  // namespace detail

// Homogeneous propagator over a waveform. Stored in scaled coordinates
// (u, u'/omega_ref), where it is well conditioned.
struct TransferMap {
  Eigen::MatrixXd scaled;
  double omega_ref = 1.0;
  ModeSpectrum initial, final;

  static Eigen::MatrixXd symplectic_form(Eigen::Index n) {
    Eigen::MatrixXd j = Eigen::MatrixXd::Zero(2 * n, 2 * n);
    j.topRightCorner(n, n).setIdentity();
    j.bottomLeftCorner(n, n) = -Eigen::MatrixXd::Identity(n, n);
    return j;
  }

  // Propagator in (u, u').
  Eigen::MatrixXd matrix() const {
    const Eigen::Index n = scaled.rows() / 2;
    Eigen::VectorXd t(2 * n);
    t.head(n).setOnes();
    t.tail(n).setConstant(omega_ref);
    return t.asDiagonal() * scaled * t.cwiseInverse().asDiagonal();
  }

  // max |Phi^T J Phi - J| in scaled coordinates.
  double symplectic_error() const {
    const Eigen::MatrixXd j = symplectic_form(scaled.rows() / 2);
    return (scaled.transpose() * j * scaled - j).cwiseAbs().maxCoeff();
  }

  // Propagator between initial and final mode coordinates (q, q').
  Eigen::MatrixXd mode_matrix() const {
    return ThermalState::phase_basis(final).transpose() * matrix() * ThermalState::phase_basis(initial);
  }

  // energy[m][n]: fraction of a unit excitation of initial mode n ending in
  // final mode m, averaged over oscillation phase.
  Eigen::MatrixXd energy_fractions() const {
    const Eigen::MatrixXd p = mode_matrix();
    const Eigen::Index n = p.rows() / 2;
    Eigen::MatrixXd e(n, n);
    for (Eigen::Index m = 0; m < n; ++m)
      for (Eigen::Index k = 0; k < n; ++k) {
        // unit energy in mode k, averaged over its phase
        const double wm = final.omega(m), wk = initial.omega(k);
        const double a = p(m, k), b = p(m, n + k), c = p(n + m, k), d = p(n + m, n + k);
        const double q2 = (a * a + b * b * wk * wk) / (wk * wk), v2 = (c * c + d * d * wk * wk) / (wk * wk);
        e(m, k) = 0.5 * (v2 + wm * wm * q2);
      }
    return e;
  }
};

struct LinearOptions {
  double phase_per_step = 0.1;      // max omega * h per Magnus step
  double symplectic_tolerance = 1e-8;
  Events events;
};

struct LinearResult {
  ThermalState final;
  TransferMap map;
  std::size_t steps = 0;
};

// Exact propagation of the quadratic model linearized about the
// instantaneous equilibrium. Absolute mass-weighted coordinates obey
// w'' = -K(t) (w - w_eq(t)); the affine system is integrated with a fourth
// order Magnus exponential so every step is exactly symplectic.
inline LinearResult propagate_linear(const IonTrap& trap, const Waveform& w, const ThermalState& initial,
                                     const LinearOptions& opt = {}) {
  trap.validate();
  if (w.empty()) throw WaveformError("cannot propagate through an empty waveform");
  if (!(opt.phase_per_step > 0.0)) throw InvalidParameter("phase_per_step must be positive");
  const Eigen::Index n = static_cast<Eigen::Index>(trap.dof());
  if (initial.spectrum.omega.size() != n) throw InvalidParameter("initial state does not match the trap");

  detail::WellPoint cur = detail::well_at(trap, w.initial(), detail::on_axis_guess(trap, w.initial()));
  const ModeSpectrum spec0 = normal_modes(trap, w.initial(), cur.crystal);
  const double omega_ref = spec0.omega.mean();

  // y = (w, w'/omega_ref)
  Eigen::VectorXd scale(2 * n);
  scale.head(n).setOnes();
  scale.tail(n).setConstant(1.0 / omega_ref);

  Eigen::MatrixXd cov = initial.cartesian_covariance();
  Eigen::VectorXd mean = initial.cartesian_mean();
  Eigen::MatrixXd phi = Eigen::MatrixXd::Identity(2 * n, 2 * n);

  auto augmented = [&](const detail::WellPoint& p) {
    Eigen::MatrixXd a = Eigen::MatrixXd::Zero(2 * n + 1, 2 * n + 1);
    a.block(0, n, n, n).setIdentity();
    a.block(0, n, n, n) *= omega_ref;
    a.block(n, 0, n, n) = -p.k / omega_ref;
    a.block(n, 2 * n, n, 1) = p.k * p.w_eq / omega_ref;
    return a;
  };

  const double g = 0.5 / std::sqrt(3.0);
  LinearResult res;
  IonPositions guess = cur.crystal.equilibrium;
  for (std::size_t si = 0; si < w.segments().size(); ++si) {
    const Segment& seg = w.segments()[si];
    // absolute state at the segment start
    Eigen::VectorXd y(2 * n + 1);
    y.head(n) = cur.w_eq + mean.head(n);
    y.segment(n, n) = mean.tail(n) / omega_ref;
    y(2 * n) = 1.0;
    Eigen::MatrixXd seg_phi = Eigen::MatrixXd::Identity(2 * n + 1, 2 * n + 1);

    const detail::WellPoint end = detail::well_at(trap, seg.end, guess);
    const double wmax = std::max(detail::max_omega(cur.k), detail::max_omega(end.k));
    const auto steps = static_cast<std::size_t>(std::ceil(seg.duration * wmax / opt.phase_per_step));
    const double h = seg.duration / static_cast<double>(steps);
    if (seg.is_static()) {
      const Eigen::MatrixXd e = (h * augmented(cur)).exp();
      for (std::size_t k = 0; k < steps; ++k) seg_phi = e * seg_phi;
    } else {
      for (std::size_t k = 0; k < steps; ++k) {
        const double s1 = (static_cast<double>(k) + 0.5 - g) / static_cast<double>(steps);
        const double s2 = (static_cast<double>(k) + 0.5 + g) / static_cast<double>(steps);
        const detail::WellPoint p1 = detail::well_at(trap, seg.at(s1), guess);
        const detail::WellPoint p2 = detail::well_at(trap, seg.at(s2), p1.crystal.equilibrium);
        guess = p2.crystal.equilibrium;
        const Eigen::MatrixXd a1 = augmented(p1), a2 = augmented(p2);
        const Eigen::MatrixXd om = 0.5 * h * (a1 + a2) + (std::sqrt(3.0) / 12.0) * h * h * (a2 * a1 - a1 * a2);
        seg_phi = om.exp() * seg_phi;
      }
    }
    res.steps += steps;

    const Eigen::MatrixXd hom = seg_phi.topLeftCorner(2 * n, 2 * n);
    phi = hom * phi;
    y = seg_phi * y;
    cur = end;
    guess = cur.crystal.equilibrium;

    // back to displacement about the new equilibrium, unscaled velocities
    mean.head(n) = y.head(n) - cur.w_eq;
    mean.tail(n) = y.segment(n, n) * omega_ref;
    const Eigen::MatrixXd phys = scale.cwiseInverse().asDiagonal() * hom * scale.asDiagonal();
    cov = phys * cov * phys.transpose();
    cov = 0.5 * (cov + cov.transpose()).eval();

    if (opt.events.fires(seg.tag)) {
      const ModeSpectrum s = normal_modes(trap, seg.end, cur.crystal);
      detail::apply_events(opt.events, seg.tag, s, cov, mean);
    }
  }

  res.map.scaled = phi;
  res.map.omega_ref = omega_ref;
  res.map.initial = spec0;
  res.map.final = normal_modes(trap, w.final(), cur.crystal);
  const double err = res.map.symplectic_error();
  if (!(err <= opt.symplectic_tolerance))
    throw IntegratorError("transfer map symplecticity error " + std::to_string(err) + " exceeds tolerance");

  res.final.spectrum = res.map.final;
  res.final.covariance = cov;
  res.final.mean = mean;
  res.final.nbar = extract_occupancies(cov, res.final.spectrum, mean);
  return res;
}

struct EnsembleOptions {
  std::size_t trajectories = 2000;
  std::uint64_t seed = 1;
  double relative_tolerance = 1e-10;
  double absolute_tolerance = 1e-12;  // in units of the crystal length
  double energy_tolerance = 1e-6;     // relative drift allowed on static segments
  unsigned threads = 0;               // 0: hardware concurrency
  Events events;
};

struct EnsembleResult {
  ThermalState final;
  std::size_t trajectories = 0;
  double max_static_energy_drift = 0.0;
};

namespace detail {

inline std::mt19937_64 trajectory_rng(std::uint64_t seed, std::uint64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
  return std::mt19937_64(seq);
}

// Newtonian system in units of length L and time 1/omega_ref.
struct NewtonSystem {
  const IonTrap* trap;
  ControlField f;
  const Segment* seg = nullptr;
  double t_scale, l_scale;
  Eigen::VectorXd inv_mass;  // per coordinate

  using State = std::vector<double>;

  void operator()(const State& x, State& dx, double tau) const {
    const std::size_t n = trap->dof();
    const ControlField c = seg && !seg->is_static() ? seg->at(std::clamp(tau * t_scale / seg->duration, 0.0, 1.0)) : f;
    Eigen::VectorXd r(static_cast<Eigen::Index>(n));
    for (std::size_t i = 0; i < n; ++i) r(static_cast<Eigen::Index>(i)) = x[i] * l_scale;
    const Eigen::VectorXd g = gradient(*trap, c, IonPositions(r));
    const double acc = t_scale * t_scale / l_scale;
    for (std::size_t i = 0; i < n; ++i) {
      dx[i] = x[n + i];
      dx[n + i] = -g(static_cast<Eigen::Index>(i)) * inv_mass(static_cast<Eigen::Index>(i)) * acc;
    }
  }
};

}  // namespace detail

// Monte-Carlo ensemble of classical trajectories under the full Coulomb
// potential. Each trajectory draws from its own stream seeded by
// (seed, index); results are reduced in index order, so the output does not
// depend on the thread count.
inline EnsembleResult propagate_ensemble(const IonTrap& trap, const Waveform& w, const ThermalState& initial,
                                         const EnsembleOptions& opt = {}) {
  namespace ode = boost::numeric::odeint;
  trap.validate();
  if (w.empty()) throw WaveformError("cannot propagate through an empty waveform");
  if (opt.trajectories < 2) throw InvalidParameter("an ensemble needs at least two trajectories");
  const Eigen::Index n = static_cast<Eigen::Index>(trap.dof());
  if (initial.spectrum.omega.size() != n) throw InvalidParameter("initial state does not match the trap");

  // wells at every segment boundary
  std::vector<CrystalConfiguration> wells;
  std::vector<ModeSpectrum> spectra;
  {
    IonPositions guess = detail::on_axis_guess(trap, w.initial());
    auto add = [&](const ControlField& f) {
      wells.push_back(solve_equilibrium(trap, f, guess));
      guess = wells.back().equilibrium;
      spectra.push_back(normal_modes(trap, f, wells.back()));
    };
    add(w.initial());
    for (const Segment& s : w.segments()) add(s.end);
  }
  const Eigen::VectorXd ism = inv_sqrt_masses(trap);
  const Eigen::VectorXd inv_mass = ism.cwiseProduct(ism);
  const double omega_ref = spectra.front().omega.mean();
  const double t_scale = 1.0 / omega_ref;
  const double l_scale = std::max(wells.front().separation_d, 1e-9);

  // initial phase-space Gaussian
  const Eigen::MatrixXd cov0 = initial.cartesian_covariance();
  const Eigen::VectorXd mean0 = initial.cartesian_mean();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov0);
  const Eigen::MatrixXd sample_map =
      es.eigenvectors() * es.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal();

  const std::size_t nt = opt.trajectories;
  std::vector<Eigen::VectorXd> energies(nt);
  std::vector<double> drift(nt, 0.0);
  std::vector<std::string> failures(nt);

  auto potential_energy = [&](const ControlField& f, const Eigen::VectorXd& r, const IonPositions& req) {
    return total_potential(trap, f, IonPositions(r)) - total_potential(trap, f, req);
  };

  auto run_one = [&](std::size_t idx) {
    std::mt19937_64 rng = detail::trajectory_rng(opt.seed, idx);
    std::normal_distribution<double> normal(0.0, 1.0);
    Eigen::VectorXd xi(2 * n);
    for (Eigen::Index i = 0; i < 2 * n; ++i) xi(i) = normal(rng);
    const Eigen::VectorXd z = mean0 + sample_map * xi;  // mass-weighted (u, u')

    Eigen::VectorXd r = wells.front().equilibrium.flat() + z.head(n).cwiseProduct(ism);
    Eigen::VectorXd v = z.tail(n).cwiseProduct(ism);

    detail::NewtonSystem sys{&trap, w.initial(), nullptr, t_scale, l_scale, inv_mass};
    auto stepper = ode::make_controlled(opt.absolute_tolerance, opt.relative_tolerance,
                                        ode::runge_kutta_fehlberg78<std::vector<double>>());
    std::vector<double> x(static_cast<std::size_t>(2 * n));
    for (std::size_t si = 0; si < w.segments().size(); ++si) {
      const Segment& seg = w.segments()[si];
      sys.seg = &seg;
      sys.f = seg.start;
      for (Eigen::Index i = 0; i < n; ++i) {
        x[static_cast<std::size_t>(i)] = r(i) / l_scale;
        x[static_cast<std::size_t>(n + i)] = v(i) * t_scale / l_scale;
      }
      const double tau_end = seg.duration / t_scale;
      const bool check = seg.is_static();
      double e0 = 0.0;
      if (check)
        e0 = 0.5 * v.cwiseProduct(v).cwiseQuotient(inv_mass).sum() +
             potential_energy(seg.start, r, wells[si].equilibrium);
      ode::integrate_adaptive(stepper, sys, x, 0.0, tau_end, std::min(0.05, tau_end));
      for (Eigen::Index i = 0; i < n; ++i) {
        r(i) = x[static_cast<std::size_t>(i)] * l_scale;
        v(i) = x[static_cast<std::size_t>(n + i)] * l_scale / t_scale;
      }
      if (!r.allFinite() || !v.allFinite()) throw IntegratorError("trajectory left the finite range");
      if (check) {
        const double e1 = 0.5 * v.cwiseProduct(v).cwiseQuotient(inv_mass).sum() +
                          potential_energy(seg.end, r, wells[si + 1].equilibrium);
        const double d = std::abs(e1 - e0) / std::max(std::abs(e0), kHbar * omega_ref);
        drift[idx] = std::max(drift[idx], d);
        if (d > opt.energy_tolerance)
          throw IntegratorError("energy drift " + std::to_string(d) + " on static segment " + std::to_string(si));
      }
      if (opt.events.fires(seg.tag)) {
        // cooling resamples the mode, heating adds a thermal kick
        const ModeSpectrum& s = spectra[si + 1];
        Eigen::VectorXd u = (r - wells[si + 1].equilibrium.flat()).cwiseQuotient(ism);
        Eigen::VectorXd ud = v.cwiseQuotient(ism);
        Eigen::VectorXd q = s.participation.transpose() * u, qd = s.participation.transpose() * ud;
        for (const CoolingEvent& ce : opt.events.cooling) {
          if (ce.tag != seg.tag) continue;
          for (Eigen::Index m : detail::modes_by_label(s, ce.modes)) {
            const double om = s.omega(m), f = 2.0 * ce.nbar + 1.0;
            q(m) = std::sqrt(kHbar / (2.0 * om) * f) * normal(rng);
            qd(m) = std::sqrt(kHbar * om / 2.0 * f) * normal(rng);
          }
          if (opt.events.heating)
            for (Eigen::Index m : detail::modes_by_label(s, opt.events.heating->modes)) {
              const double om = s.omega(m), dq = opt.events.heating->quanta;
              q(m) += std::sqrt(kHbar / om * dq) * normal(rng);
              qd(m) += std::sqrt(kHbar * om * dq) * normal(rng);
            }
        }
        r = wells[si + 1].equilibrium.flat() + (s.participation * q).cwiseProduct(ism);
        v = (s.participation * qd).cwiseProduct(ism);
      }
    }
    const ModeSpectrum& sf = spectra.back();
    const Eigen::VectorXd q = sf.participation.transpose() * (r - wells.back().equilibrium.flat()).cwiseQuotient(ism);
    const Eigen::VectorXd qd = sf.participation.transpose() * v.cwiseQuotient(ism);
    energies[idx] = 0.5 * (qd.cwiseProduct(qd) + sf.omega.cwiseProduct(sf.omega).cwiseProduct(q.cwiseProduct(q)));
  };

  unsigned nthreads = opt.threads ? opt.threads : std::max(1u, std::thread::hardware_concurrency());
  nthreads = static_cast<unsigned>(std::min<std::size_t>(nthreads, nt));
  auto worker = [&](unsigned tid) {
    for (std::size_t i = tid; i < nt; i += nthreads) {
      try {
        run_one(i);
      } catch (const std::exception& e) {
        failures[i] = e.what();
      }
    }
  };
  if (nthreads == 1) {
    worker(0);
  } else {
    std::vector<std::thread> pool;
    for (unsigned t = 0; t < nthreads; ++t) pool.emplace_back(worker, t);
    for (auto& t : pool) t.join();
  }
  for (std::size_t i = 0; i < nt; ++i)
    if (!failures[i].empty())
      throw IntegratorError("trajectory " + std::to_string(i) + ": " + failures[i]);

  const ModeSpectrum& sf = spectra.back();
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(n), sum2 = Eigen::VectorXd::Zero(n);
  for (std::size_t i = 0; i < nt; ++i) {
    sum += energies[i];
    sum2 += energies[i].cwiseProduct(energies[i]);
  }
  const double dn = static_cast<double>(nt);
  const Eigen::VectorXd mean_e = sum / dn;
  const Eigen::VectorXd var = ((sum2 - dn * mean_e.cwiseProduct(mean_e)) / (dn - 1.0)).cwiseMax(0.0);

  EnsembleResult res;
  res.trajectories = nt;
  res.final.spectrum = sf;
  res.final.nbar.resize(n);
  res.final.nbar_stderr.resize(n);
  for (Eigen::Index m = 0; m < n; ++m) {
    const double quantum = kHbar * sf.omega(m);
    res.final.nbar(m) = std::max(0.0, mean_e(m) / quantum - 0.5);
    res.final.nbar_stderr(m) = std::sqrt(var(m) / dn) / quantum;
  }
  res.max_static_energy_drift = *std::max_element(drift.begin(), drift.end());
  return res;
}

// Occupancy of the mode carrying a label in the state's reference spectrum.
inline double nbar_of(const ThermalState& t, ModeLabel l) {
  auto m = t.spectrum.find(l);
  if (!m) throw InvalidParameter("no mode labelled " + to_string(l));
  return t.nbar(static_cast<Eigen::Index>(*m));
}

inline double stderr_of(const ThermalState& t, ModeLabel l) {
  auto m = t.spectrum.find(l);
  if (!m) throw InvalidParameter("no mode labelled " + to_string(l));
  return t.nbar_stderr.size() ? t.nbar_stderr(static_cast<Eigen::Index>(*m)) : 0.0;
}

}  // namespace phrap
