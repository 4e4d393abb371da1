#pragma once

// Repo-wide unit convention: frequency in MHz, time in us, field in mT,
// concentrations in atomic ppb. Hamiltonians are stored as H/h in MHz.

#include <numbers>

namespace nvdeer::units {

inline constexpr double kPi = std::numbers::pi;

/// Electron gyromagnetic ratio, MHz/mT.
inline constexpr double kGammaE = 28.025;
/// 14N gyromagnetic ratio, MHz/mT.
inline constexpr double kGammaN14 = 3.077e-3;
/// 13C gyromagnetic ratio, MHz/T.
inline constexpr double kGammaC13 = 10.71;

// SI constants (CODATA 2018).
inline constexpr double kMu0 = 4.0e-7 * kPi;             // T m / A
inline constexpr double kBohrMagneton = 9.2740100783e-24;  // J / T
inline constexpr double kHbar = 1.054571817e-34;           // J s

/// Atomic density of diamond: 3.51 g/cm^3 / 12.011 g/mol * N_A.
inline constexpr double kDiamondAtomsPerCm3 = 1.76e23;
inline constexpr double kDiamondAtomsPerM3 = kDiamondAtomsPerCm3 * 1e6;
inline constexpr double kDiamondAtomsPerUm3 = kDiamondAtomsPerCm3 * 1e-12;

inline constexpr double ppb_to_per_m3(double ppb) { return ppb * 1e-9 * kDiamondAtomsPerM3; }
inline constexpr double per_m3_to_ppb(double n) { return n / kDiamondAtomsPerM3 * 1e9; }
inline constexpr double ppb_to_per_um3(double ppb) { return ppb * 1e-9 * kDiamondAtomsPerUm3; }

inline constexpr double us_to_s(double t_us) { return t_us * 1e-6; }
inline constexpr double deg_to_rad(double deg) { return deg * kPi / 180.0; }

}  // namespace nvdeer::units
