#pragma once

#include <numbers>

namespace phrap {

// CODATA 2018, SI
inline constexpr double kElementaryCharge = 1.602176634e-19;
inline constexpr double kCoulombConstant = 8.9875517923e9;
inline constexpr double kAtomicMass = 1.66053906660e-27;
inline constexpr double kHbar = 1.054571817e-34;
inline constexpr double kPi = std::numbers::pi;
inline constexpr double kTwoPi = 2.0 * std::numbers::pi;

inline constexpr double hz_to_rad(double f) { return kTwoPi * f; }
inline constexpr double rad_to_hz(double w) { return w / kTwoPi; }

}  // namespace phrap
