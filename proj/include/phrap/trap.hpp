#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "constants.hpp"
#include "errors.hpp"

namespace phrap {

struct IonSpecies {
  double mass = 0.0;                      // kg
  double charge = kElementaryCharge;      // C
  std::string label;

  // charge in units of e; DC and shim curvatures scale with it, the
  // pseudopotential with its square
  double charge_number() const { return charge / kElementaryCharge; }

  void validate() const {
    if (!(mass > 0.0) || !std::isfinite(mass))
      throw InvalidParameter("species " + label + ": mass must be positive");
    if (!(charge > 0.0) || !std::isfinite(charge))
      throw InvalidParameter("species " + label + ": charge must be positive");
  }
};

namespace species {
inline IonSpecies from_amu(double amu, std::string label) {
  return IonSpecies{amu * kAtomicMass, kElementaryCharge, std::move(label)};
}
inline IonSpecies yb171() { return from_amu(170.9363258, "Yb171"); }
inline IonSpecies ba138() { return from_amu(137.9052472, "Ba138"); }
inline IonSpecies ba137() { return from_amu(136.9058274, "Ba137"); }
inline IonSpecies ca40() { return from_amu(39.962590863, "Ca40"); }
inline IonSpecies be9() { return from_amu(9.0121831, "Be9"); }

// Throws InvalidParameter for unknown labels.
inline IonSpecies by_label(const std::string& label) {
  if (label == "Yb171") return yb171();
  if (label == "Ba138") return ba138();
  if (label == "Ba137") return ba137();
  if (label == "Ca40") return ca40();
  if (label == "Be9") return be9();
  throw InvalidParameter("unknown species label '" + label + "'");
}
}  // namespace species

struct TrapConfig {
  double rf_curvature_scale = 0.0;  // J kg / m^2, pseudopotential curvature is this / m
  double dc_curvature = 0.0;        // J / m^2, axial
  double c_y = 0.5;
  double c_z = 0.5;

  void validate() const {
    if (!std::isfinite(rf_curvature_scale) || rf_curvature_scale < 0.0)
      throw InvalidParameter("rf_curvature_scale must be finite and non-negative");
    if (!(dc_curvature > 0.0) || !std::isfinite(dc_curvature))
      throw InvalidParameter("dc_curvature must be positive");
    if (std::abs(c_y + c_z - 1.0) > 1e-12)
      throw InvalidParameter("radial split must satisfy c_y + c_z = 1");
  }
};

struct ControlField {
  Eigen::Vector3d e_field = Eigen::Vector3d::Zero();  // V/m
  double rot_xy = 0.0;  // J/m^2, coefficient of x*y
  double rot_xz = 0.0;
  double rot_yz = 0.0;
  double radial_split_shim = 0.0;  // J/m^2, +yy and -zz
  double dc_scale = 1.0;

  bool operator==(const ControlField&) const = default;

  bool finite() const {
    return e_field.allFinite() && std::isfinite(rot_xy) && std::isfinite(rot_xz) &&
           std::isfinite(rot_yz) && std::isfinite(radial_split_shim) &&
           std::isfinite(dc_scale);
  }
};

class IonPositions {
 public:
  IonPositions() = default;
  explicit IonPositions(std::size_t n_ions) : coords_(Eigen::VectorXd::Zero(3 * n_ions)) {}
  explicit IonPositions(Eigen::VectorXd coords) : coords_(std::move(coords)) {
    if (coords_.size() % 3 != 0)
      throw InvalidParameter("IonPositions needs 3 coordinates per ion");
  }

  std::size_t size() const { return static_cast<std::size_t>(coords_.size() / 3); }
  Eigen::Vector3d ion(std::size_t i) const { return coords_.segment<3>(3 * i); }
  auto ion(std::size_t i) { return coords_.segment<3>(3 * i); }
  const Eigen::VectorXd& flat() const { return coords_; }
  Eigen::VectorXd& flat() { return coords_; }

 private:
  Eigen::VectorXd coords_;
};

struct IonTrap {
  std::vector<IonSpecies> ions;  // order significant
  TrapConfig config;
  double min_separation = 1e-9;  // coincidence guard, m

  std::size_t size() const { return ions.size(); }
  std::size_t dof() const { return 3 * ions.size(); }

  void validate() const {
    if (ions.empty()) throw InvalidParameter("trap holds no ions");
    for (const auto& s : ions) s.validate();
    config.validate();
  }
};

// Quadratic trap + shim coefficients for one ion: V = xx x^2 + yy y^2 + zz z^2 +
// xy x y + xz x z + yz y z. Energy convention (no factor 1/2).
struct IonCurvatures {
  double xx, yy, zz, xy, xz, yz;

  Eigen::Matrix3d hessian() const {
    Eigen::Matrix3d h;
    h << 2 * xx, xy, xz, xy, 2 * yy, yz, xz, yz, 2 * zz;
    return h;
  }
};

inline IonCurvatures ion_curvatures(const IonTrap& trap, const ControlField& f, std::size_t j) {
  const IonSpecies& s = trap.ions[j];
  const double z = s.charge_number();
  const double dc = trap.config.dc_curvature * f.dc_scale;
  const double rf = z * z * trap.config.rf_curvature_scale / s.mass;
  return IonCurvatures{z * dc,
                       rf - z * trap.config.c_y * dc + z * f.radial_split_shim,
                       rf - z * trap.config.c_z * dc - z * f.radial_split_shim,
                       z * f.rot_xy,
                       z * f.rot_xz,
                       z * f.rot_yz};
}

// Every ion must sit in a locally confining single-ion well.
inline void check_confinement(const IonTrap& trap, const ControlField& f) {
  for (std::size_t j = 0; j < trap.size(); ++j) {
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(ion_curvatures(trap, f, j).hessian(),
                                                      Eigen::EigenvaluesOnly);
    if (!(es.eigenvalues().minCoeff() > 0.0))
      throw ConfinementError("ion " + std::to_string(j) + " (" + trap.ions[j].label +
                             ") is not confined: smallest single-ion curvature " +
                             std::to_string(es.eigenvalues().minCoeff()) + " J/m^2");
  }
}

namespace detail {
inline void check_shape(const IonTrap& trap, const IonPositions& pos) {
  if (pos.size() != trap.size())
    throw InvalidParameter("position vector does not match the number of ions");
}

inline double guarded_distance(const IonTrap& trap, const IonPositions& pos, std::size_t a,
                               std::size_t b) {
  const double r = (pos.ion(b) - pos.ion(a)).norm();
  if (!(r > trap.min_separation)) throw SingularityError(a, b, r);
  return r;
}
}  // namespace detail

inline double total_potential(const IonTrap& trap, const ControlField& f, const IonPositions& pos) {
  detail::check_shape(trap, pos);
  double v = 0.0;
  for (std::size_t j = 0; j < trap.size(); ++j) {
    const IonCurvatures c = ion_curvatures(trap, f, j);
    const Eigen::Vector3d r = pos.ion(j);
    v += c.xx * r.x() * r.x() + c.yy * r.y() * r.y() + c.zz * r.z() * r.z() +
         c.xy * r.x() * r.y() + c.xz * r.x() * r.z() + c.yz * r.y() * r.z();
    v -= trap.ions[j].charge * f.e_field.dot(r);
  }
  for (std::size_t a = 0; a < trap.size(); ++a)
    for (std::size_t b = a + 1; b < trap.size(); ++b)
      v += kCoulombConstant * trap.ions[a].charge * trap.ions[b].charge /
           detail::guarded_distance(trap, pos, a, b);
  return v;
}

// dV/dr, flattened per ion (x0, y0, z0, x1, ...). The force is its negative.
inline Eigen::VectorXd gradient(const IonTrap& trap, const ControlField& f, const IonPositions& pos) {
  detail::check_shape(trap, pos);
  Eigen::VectorXd g(trap.dof());
  for (std::size_t j = 0; j < trap.size(); ++j) {
    const IonCurvatures c = ion_curvatures(trap, f, j);
    g.segment<3>(3 * j) = c.hessian() * pos.ion(j) - trap.ions[j].charge * f.e_field;
  }
  for (std::size_t a = 0; a < trap.size(); ++a)
    for (std::size_t b = a + 1; b < trap.size(); ++b) {
      const double r = detail::guarded_distance(trap, pos, a, b);
      const Eigen::Vector3d d = pos.ion(b) - pos.ion(a);
      const double k = kCoulombConstant * trap.ions[a].charge * trap.ions[b].charge;
      const Eigen::Vector3d fb = k * d / (r * r * r);  // Coulomb force on b
      g.segment<3>(3 * b) -= fb;
      g.segment<3>(3 * a) += fb;
    }
  return g;
}

inline Eigen::MatrixXd hessian(const IonTrap& trap, const ControlField& f, const IonPositions& pos) {
  detail::check_shape(trap, pos);
  const auto n = static_cast<Eigen::Index>(trap.dof());
  Eigen::MatrixXd h = Eigen::MatrixXd::Zero(n, n);
  for (std::size_t j = 0; j < trap.size(); ++j)
    h.block<3, 3>(3 * j, 3 * j) = ion_curvatures(trap, f, j).hessian();
  for (std::size_t a = 0; a < trap.size(); ++a)
    for (std::size_t b = a + 1; b < trap.size(); ++b) {
      const double r = detail::guarded_distance(trap, pos, a, b);
      const Eigen::Vector3d d = pos.ion(b) - pos.ion(a);
      const double k = kCoulombConstant * trap.ions[a].charge * trap.ions[b].charge;
      const double r3 = r * r * r;
      // second derivative of k/|d| with respect to d
      const Eigen::Matrix3d dd = d * d.transpose();
      Eigen::Matrix3d blk = k * (3.0 / (r3 * r * r) * dd - Eigen::Matrix3d::Identity() / r3);
      blk = 0.5 * (blk + blk.transpose()).eval();
      h.block<3, 3>(3 * a, 3 * a) += blk;
      h.block<3, 3>(3 * b, 3 * b) += blk;
      h.block<3, 3>(3 * a, 3 * b) -= blk;
      h.block<3, 3>(3 * b, 3 * a) -= blk;
    }
  return h;
}

// Calibration helpers. All assume the ion carries charge q and sits alone in
// the trap unless stated otherwise.
namespace calibration {

// Single-ion axial frequency (rad/s) -> dc_curvature.
inline double dc_curvature_for_axial_frequency(const IonSpecies& s, double omega) {
  return s.mass * omega * omega / (2.0 * s.charge_number());
}

// Two equal-charge ions at separation d on axis -> dc_curvature.
inline double dc_curvature_for_separation(double d, double charge = kElementaryCharge) {
  return kCoulombConstant * charge * charge / (d * d * d) / (charge / kElementaryCharge);
}

// Single-ion radial frequency along y (c_r = c_y, sign = +1) or z (c_r = c_z,
// sign = -1), including the DC defocusing and any radial split shim.
inline double rf_scale_for_radial_frequency(const IonSpecies& s, double omega, double dc_curvature,
                                            double c_r, double split_shim = 0.0,
                                            double split_sign = 1.0) {
  const double z = s.charge_number();
  const double target = s.mass * omega * omega / 2.0;
  return s.mass * (target + z * c_r * dc_curvature - z * split_sign * split_shim) / (z * z);
}

inline double single_ion_frequency(double curvature, double mass) {
  return std::sqrt(2.0 * curvature / mass);
}

}  // namespace calibration

}  // namespace phrap
