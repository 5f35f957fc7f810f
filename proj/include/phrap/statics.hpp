#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "trap.hpp"

namespace phrap {

enum class ModeLabel { XCOM, XSTR, YCOM, YSTR, ZCOM, ZSTR, Unlabeled };

inline std::string to_string(ModeLabel l) {
  switch (l) {
    case ModeLabel::XCOM: return "XCOM";
    case ModeLabel::XSTR: return "XSTR";
    case ModeLabel::YCOM: return "YCOM";
    case ModeLabel::YSTR: return "YSTR";
    case ModeLabel::ZCOM: return "ZCOM";
    case ModeLabel::ZSTR: return "ZSTR";
    case ModeLabel::Unlabeled: return "UNLABELED";
  }
  return "UNLABELED";
}

inline std::optional<ModeLabel> label_from_string(const std::string& s) {
  for (ModeLabel l : {ModeLabel::XCOM, ModeLabel::XSTR, ModeLabel::YCOM, ModeLabel::YSTR,
                      ModeLabel::ZCOM, ModeLabel::ZSTR, ModeLabel::Unlabeled})
    if (to_string(l) == s) return l;
  return std::nullopt;
}

struct CrystalConfiguration {
  IonPositions equilibrium;
  double separation_d = 0.0;                 // mean axial spacing, m
  std::vector<Eigen::Vector2d> off_axis;     // (y, z) per ion
  int iterations = 0;
  double max_gradient = 0.0;                 // N
};

struct ModeSpectrum {
  Eigen::VectorXd omega;           // rad/s, ascending
  Eigen::MatrixXd participation;   // columns are modes, rows (ion, direction)
  std::vector<ModeLabel> labels;
  std::vector<bool> degenerate;
  Eigen::VectorXd inv_sqrt_mass;   // per coordinate

  std::size_t size() const { return static_cast<std::size_t>(omega.size()); }
  double frequency_hz(std::size_t m) const { return rad_to_hz(omega(static_cast<Eigen::Index>(m))); }
  Eigen::VectorXd mode(std::size_t m) const { return participation.col(static_cast<Eigen::Index>(m)); }

  // First mode carrying the label, if any.
  std::optional<std::size_t> find(ModeLabel l) const {
    for (std::size_t m = 0; m < labels.size(); ++m)
      if (labels[m] == l) return m;
    return std::nullopt;
  }

  // Per-ion Cartesian displacement for mode-coordinate amplitudes q.
  Eigen::VectorXd to_cartesian(const Eigen::VectorXd& q) const {
    return inv_sqrt_mass.cwiseProduct(participation * q);
  }
};

struct UnstableModeError : UnstableError {
  UnstableModeError(const std::string& what, Eigen::VectorXd v, double eigenvalue)
      : UnstableError(what), mode(std::move(v)), eigenvalue(eigenvalue) {}
  Eigen::VectorXd mode;
  double eigenvalue;
};

struct EquilibriumOptions {
  int max_iterations = 200;
  // stop when max |dV/dr| falls below this fraction of k q^2 / d^2 ...
  double relative_force_tolerance = 1e-12;
  // ... and never accept above this absolute value (N)
  double absolute_force_tolerance = 1e-14;
};

namespace detail {

inline double two_ion_half_spacing(const IonTrap& trap, const ControlField& f) {
  double q2 = 0.0, z = 0.0;
  for (const auto& s : trap.ions) {
    q2 += s.charge * s.charge;
    z += s.charge_number();
  }
  q2 /= static_cast<double>(trap.size());
  z /= static_cast<double>(trap.size());
  const double dc = trap.config.dc_curvature * f.dc_scale * z;
  return std::cbrt(kCoulombConstant * q2 / (8.0 * dc));
}

inline IonPositions on_axis_guess(const IonTrap& trap, const ControlField& f) {
  IonPositions p(trap.size());
  const double a = two_ion_half_spacing(trap, f);
  const double n = static_cast<double>(trap.size());
  for (std::size_t j = 0; j < trap.size(); ++j)
    p.ion(j).x() = (static_cast<double>(j) - 0.5 * (n - 1.0)) * 2.0 * a;
  return p;
}

inline double force_scale(const IonTrap& trap, const ControlField& f) {
  const double d = 2.0 * two_ion_half_spacing(trap, f);
  return kCoulombConstant * kElementaryCharge * kElementaryCharge / (d * d);
}

inline double max_abs(const Eigen::VectorXd& v) { return v.cwiseAbs().maxCoeff(); }

}  // namespace detail

inline CrystalConfiguration solve_equilibrium(const IonTrap& trap, const ControlField& f,
                                              const std::optional<IonPositions>& guess = std::nullopt,
                                              const EquilibriumOptions& opt = {}) {
  trap.validate();
  if (!f.finite()) throw InvalidParameter("control field has non-finite entries");
  check_confinement(trap, f);

  const double fscale = detail::force_scale(trap, f);
  const double tol = std::min(opt.absolute_force_tolerance, opt.relative_force_tolerance * fscale);
  const double length = 2.0 * detail::two_ion_half_spacing(trap, f);

  IonPositions x = guess ? *guess : detail::on_axis_guess(trap, f);
  if (x.size() != trap.size()) throw InvalidParameter("initial guess has the wrong number of ions");

  Eigen::VectorXd g = gradient(trap, f, x);
  int it = 0;
  for (; it < opt.max_iterations && detail::max_abs(g) > tol; ++it) {
    const Eigen::MatrixXd h = hessian(trap, f, x);
    Eigen::VectorXd step = h.ldlt().solve(-g);
    if (!step.allFinite()) throw ConvergenceError("Newton step is not finite");

    const double g2 = g.squaredNorm();
    double alpha = 1.0;
    bool accepted = false;
    IonPositions trial;
    Eigen::VectorXd gt;
    for (int ls = 0; ls < 60; ++ls, alpha *= 0.5) {
      trial = IonPositions(Eigen::VectorXd(x.flat() + alpha * step));
      try {
        gt = gradient(trap, f, trial);
      } catch (const SingularityError&) {
        continue;
      }
      if (gt.squaredNorm() <= (1.0 - 1e-4 * alpha) * g2) {
        accepted = true;
        break;
      }
    }
    if (!accepted) {
      // rounding floor: the step is negligible and the force already tiny
      if (detail::max_abs(step) < 1e-14 * length && detail::max_abs(g) < 1e-9 * fscale) break;
      throw ConvergenceError("equilibrium line search failed at |grad| = " +
                             std::to_string(detail::max_abs(g)) + " N");
    }
    x = std::move(trial);
    g = std::move(gt);
  }
  if (detail::max_abs(g) > tol && !(detail::max_abs(g) < 1e-9 * fscale))
    throw ConvergenceError("equilibrium did not converge in " + std::to_string(opt.max_iterations) +
                           " iterations (|grad| = " + std::to_string(detail::max_abs(g)) + " N)");

  Eigen::LLT<Eigen::MatrixXd> llt(hessian(trap, f, x));
  if (llt.info() != Eigen::Success)
    throw UnstableError("unstable configuration: Hessian at the stationary point is not positive definite");

  CrystalConfiguration c;
  c.equilibrium = x;
  c.iterations = it;
  c.max_gradient = detail::max_abs(g);
  double xmin = x.ion(0).x(), xmax = xmin;
  for (std::size_t j = 0; j < trap.size(); ++j) {
    xmin = std::min(xmin, x.ion(j).x());
    xmax = std::max(xmax, x.ion(j).x());
    c.off_axis.emplace_back(x.ion(j).y(), x.ion(j).z());
  }
  c.separation_d = trap.size() > 1 ? (xmax - xmin) / static_cast<double>(trap.size() - 1) : 0.0;
  return c;
}

inline Eigen::VectorXd inv_sqrt_masses(const IonTrap& trap) {
  Eigen::VectorXd w(trap.dof());
  for (std::size_t j = 0; j < trap.size(); ++j) w.segment<3>(3 * j).setConstant(1.0 / std::sqrt(trap.ions[j].mass));
  return w;
}

inline Eigen::MatrixXd mass_weighted_hessian(const IonTrap& trap, const ControlField& f,
                                             const IonPositions& pos) {
  const Eigen::VectorXd w = inv_sqrt_masses(trap);
  Eigen::MatrixXd k = w.asDiagonal() * hessian(trap, f, pos) * w.asDiagonal();
  return 0.5 * (k + k.transpose());
}

inline ModeLabel classify_mode(const Eigen::VectorXd& v, std::size_t n_ions) {
  std::array<double, 3> weight{0, 0, 0};
  for (std::size_t j = 0; j < n_ions; ++j)
    for (int d = 0; d < 3; ++d) weight[d] += v(3 * j + d) * v(3 * j + d);
  const auto dom = static_cast<int>(std::max_element(weight.begin(), weight.end()) - weight.begin());
  if (weight[dom] < 0.8) return ModeLabel::Unlabeled;

  double big = 0.0;
  for (std::size_t j = 0; j < n_ions; ++j) big = std::max(big, std::abs(v(3 * j + dom)));
  bool pos = false, neg = false;
  for (std::size_t j = 0; j < n_ions; ++j) {
    const double c = v(3 * j + dom);
    if (std::abs(c) < 1e-6 * big) continue;
    (c > 0 ? pos : neg) = true;
  }
  const bool com = !(pos && neg);
  static constexpr ModeLabel table[3][2] = {{ModeLabel::XSTR, ModeLabel::XCOM},
                                            {ModeLabel::YSTR, ModeLabel::YCOM},
                                            {ModeLabel::ZSTR, ModeLabel::ZCOM}};
  return table[dom][com ? 1 : 0];
}

// Sign gauge: the largest-magnitude entry is positive (lowest index on ties).
inline void fix_sign(Eigen::Ref<Eigen::VectorXd> v) {
  Eigen::Index arg = 0;
  double best = -1.0;
  for (Eigen::Index i = 0; i < v.size(); ++i)
    if (std::abs(v(i)) > best * (1.0 + 1e-9)) {
      best = std::abs(v(i));
      arg = i;
    }
  if (v(arg) < 0) v = -v;
}

inline ModeSpectrum spectrum_from_mass_weighted(const Eigen::MatrixXd& k, const IonTrap& trap) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(k);
  if (es.info() != Eigen::Success) throw ConvergenceError("mode eigensolver failed");
  const Eigen::VectorXd& lam = es.eigenvalues();
  if (!(lam(0) > 0.0))
    throw UnstableModeError("unstable mode: eigenvalue " + std::to_string(lam(0)) +
                                " of the mass-weighted Hessian is not positive",
                            es.eigenvectors().col(0), lam(0));
  ModeSpectrum s;
  s.omega = lam.cwiseSqrt();
  s.participation = es.eigenvectors();
  s.inv_sqrt_mass = inv_sqrt_masses(trap);
  const auto n = static_cast<std::size_t>(s.omega.size());
  s.labels.resize(n);
  s.degenerate.assign(n, false);
  for (std::size_t m = 0; m < n; ++m) {
    fix_sign(s.participation.col(static_cast<Eigen::Index>(m)));
    s.labels[m] = classify_mode(s.participation.col(static_cast<Eigen::Index>(m)), trap.size());
  }
  for (std::size_t m = 0; m + 1 < n; ++m) {
    const auto i = static_cast<Eigen::Index>(m);
    if (std::abs(s.omega(i + 1) - s.omega(i)) < 1e-6 * s.omega(i))
      s.degenerate[m] = s.degenerate[m + 1] = true;
  }
  return s;
}

inline ModeSpectrum normal_modes(const IonTrap& trap, const ControlField& f,
                                 const CrystalConfiguration& c) {
  return spectrum_from_mass_weighted(mass_weighted_hessian(trap, f, c.equilibrium), trap);
}

// Generalized force of the uniform field on each mode (N / sqrt(kg)).
inline Eigen::VectorXd project_force(const ModeSpectrum& s, const IonTrap& trap, const ControlField& f) {
  Eigen::VectorXd force(trap.dof());
  for (std::size_t j = 0; j < trap.size(); ++j) force.segment<3>(3 * j) = trap.ions[j].charge * f.e_field;
  return s.participation.transpose() * force.cwiseProduct(s.inv_sqrt_mass);
}

// q_m = F_m / w_m^2. Modes softer than min_omega are refused.
inline Eigen::VectorXd mode_displacements(const ModeSpectrum& s, const Eigen::VectorXd& forces,
                                          double min_omega = kTwoPi * 1.0) {
  if (forces.size() != s.omega.size()) throw InvalidParameter("force vector does not match spectrum");
  Eigen::VectorXd q(forces.size());
  for (Eigen::Index m = 0; m < q.size(); ++m) {
    if (!(s.omega(m) > min_omega))
      throw ConditioningError("mode " + std::to_string(m) + " is nearly free (" +
                              std::to_string(rad_to_hz(s.omega(m))) + " Hz)");
    q(m) = forces(m) / (s.omega(m) * s.omega(m));
  }
  return q;
}

}  // namespace phrap
