#pragma once

#include <phrap/statics.hpp>

#include <random>

namespace phrap::testing {

// Two-ion trap with 3.5 um separation and a 2.6 MHz single-Yb y frequency.
inline IonTrap lab_trap(std::vector<IonSpecies> ions = {species::ba138(), species::yb171()},
                        double c_y = 0.7) {
  IonTrap t;
  t.ions = std::move(ions);
  t.config.dc_curvature = calibration::dc_curvature_for_separation(3.5e-6);
  t.config.c_y = c_y;
  t.config.c_z = 1.0 - c_y;
  t.config.rf_curvature_scale = calibration::rf_scale_for_radial_frequency(
      species::yb171(), hz_to_rad(2.6e6), t.config.dc_curvature, c_y);
  return t;
}

// 1 MHz axial and 2.75 MHz radial single-Yb frequencies, symmetric split.
inline IonTrap ideal_trap(std::vector<IonSpecies> ions = {species::yb171(), species::ba138()}) {
  IonTrap t;
  t.ions = std::move(ions);
  t.config.dc_curvature = calibration::dc_curvature_for_axial_frequency(species::yb171(), hz_to_rad(1e6));
  t.config.rf_curvature_scale = calibration::rf_scale_for_radial_frequency(
      species::yb171(), hz_to_rad(2.75e6), t.config.dc_curvature, 0.5);
  return t;
}

inline double max_rel(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  return (a - b).cwiseAbs().maxCoeff() / b.cwiseAbs().maxCoeff();
}

}  // namespace phrap::testing
