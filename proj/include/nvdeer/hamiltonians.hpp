#pragma once

#include "nvdeer/spin.hpp"
#include "nvdeer/units.hpp"

#include <string>
#include <variant>
#include <vector>

namespace nvdeer {

enum class Species { kP1, kNV, kX };

std::string species_name(Species s);
Species parse_species(const std::string& name);

/// Substitutional nitrogen: S = 1/2 electron coupled to a 14N (I = 1).
struct P1Params {
  double a_perp_mhz = 81.32;
  double a_par_mhz = 114.03;
  double p_par_mhz = -3.97;
  double gamma_e = units::kGammaE;
  double gamma_n = units::kGammaN14;
};

struct NVParams {
  double d_gs_mhz = 2870.0;
  double d_es_mhz = 1420.0;
  double gamma_e = units::kGammaE;
};

struct XParams {
  double gamma_e = units::kGammaE;
};

enum class NVManifold { kGround, kExcited };

/// One ensemble member. Weights of all members of one species sum to 1.
struct SpinSystem {
  Species species = Species::kX;
  Orientation orientation;
  std::variant<P1Params, NVParams, XParams> params = XParams{};
  double weight = 1.0;

  static SpinSystem p1(Orientation o, double weight, P1Params p = {});
  static SpinSystem nv(Orientation o, double weight, NVParams p = {});
  static SpinSystem x(double weight = 1.0, XParams p = {});
};

/// H_P1 on S=1/2 (x) I=1, electron factor first. MHz.
CMatrix build_p1(const P1Params& params, const Vec3& b0_mt);
/// H_NV = D Sz^2 + gamma_e B0.S on S=1; D picked by manifold.
CMatrix build_nv(const NVParams& params, const Vec3& b0_mt, NVManifold manifold = NVManifold::kGround);
CMatrix build_x(const Vec3& b0_mt, const XParams& params = {});

/// Lab-frame linearly polarised drive, 2 Omega (e1.S) sin(2 pi f_B t).
///
/// The factor 2 makes the rotating-frame nutation rate of a spin-1/2
/// transition driven perpendicular to its quantisation axis equal Omega,
/// so a pi pulse takes 1/(2 Omega).
CMatrix drive_hamiltonian(const FieldConfiguration& field, const SpinOperatorSet& ops, double t_us);

struct RotatedFields {
  Vec3 b0_mt;
  Vec3 drive_dir;
};

/// B0' = R B0 and e1' = R e1 for the member's orientation.
RotatedFields apply_orientation(const SpinSystem& system, const FieldConfiguration& field);

/// Static Hamiltonian of a member in its own frame (fields already rotated).
CMatrix static_hamiltonian(const SpinSystem& system, const Vec3& b0_rotated_mt);
/// Electron spin operators acting on the member's full Hilbert space.
SpinOperatorSet electron_operators(const SpinSystem& system);

/// P1 in all four orientations, weight 1/4 each.
std::vector<SpinSystem> p1_ensemble(const P1Params& p = {});
/// NV in all four orientations, weight 1/4 each.
std::vector<SpinSystem> nv_ensemble(const NVParams& p = {});

/// Transition between eigenstates of a member's static Hamiltonian, levels
/// numbered from 1 in ascending energy.
struct Transition {
  Species species = Species::kX;
  Orientation orientation;
  int lower = 1;
  int upper = 2;
  double freq_mhz = 0.0;
  /// 2 |<a| e1'.S |b>|; equals 1 for a spin-1/2 driven perpendicular to B0.
  double rabi_factor = 0.0;
  double weight = 0.0;
};

/// Transitions with rabi_factor above `min_rabi_factor`, sorted by frequency.
std::vector<Transition> allowed_transitions(const SpinSystem& system, const FieldConfiguration& field,
                                            double min_rabi_factor = 0.1);

}  // namespace nvdeer
