#include "nvdeer/hamiltonians.hpp"

#include "nvdeer/errors.hpp"

#include <algorithm>
#include <array>
#include <cmath>

namespace nvdeer {

namespace {

constexpr std::array<int, 2> kP1Dims{2, 3};

const SpinOperatorSet& spin_half() {
  static const SpinOperatorSet ops = spin_operators(0.5);
  return ops;
}

const SpinOperatorSet& spin_one() {
  static const SpinOperatorSet ops = spin_operators(1.0);
  return ops;
}

const SpinOperatorSet& p1_electron() {
  static const SpinOperatorSet ops = spin_half().embedded(0, kP1Dims);
  return ops;
}

const SpinOperatorSet& p1_nucleus() {
  static const SpinOperatorSet ops = spin_one().embedded(1, kP1Dims);
  return ops;
}

}  // namespace

std::string species_name(Species s) {
  switch (s) {
    case Species::kP1:
      return "P1";
    case Species::kNV:
      return "NV";
    case Species::kX:
      return "X";
  }
  return "?";
}

Species parse_species(const std::string& name) {
  if (name == "P1" || name == "p1") return Species::kP1;
  if (name == "NV" || name == "nv") return Species::kNV;
  if (name == "X" || name == "x") return Species::kX;
  throw InvalidArgument("unknown species '" + name + "'");
}

SpinSystem SpinSystem::p1(Orientation o, double weight, P1Params p) {
  return {Species::kP1, o, p, weight};
}

SpinSystem SpinSystem::nv(Orientation o, double weight, NVParams p) {
  return {Species::kNV, o, p, weight};
}

SpinSystem SpinSystem::x(double weight, XParams p) {
  return {Species::kX, Orientation::of(OrientationLabel::k111), p, weight};
}

CMatrix build_p1(const P1Params& p, const Vec3& b0) {
  const auto& s = p1_electron();
  const auto& i = p1_nucleus();
  CMatrix h = p.gamma_e * s.dot(b0);
  h += p.a_perp_mhz * (s.sx * i.sx + s.sy * i.sy);
  h += p.a_par_mhz * s.sz * i.sz;
  h += p.p_par_mhz * i.sz * i.sz;
  h -= p.gamma_n * i.dot(b0);
  return h;
}

CMatrix build_nv(const NVParams& p, const Vec3& b0, NVManifold manifold) {
  const auto& s = spin_one();
  const double d = manifold == NVManifold::kGround ? p.d_gs_mhz : p.d_es_mhz;
  return d * s.sz * s.sz + p.gamma_e * s.dot(b0);
}

CMatrix build_x(const Vec3& b0, const XParams& p) { return p.gamma_e * spin_half().dot(b0); }

CMatrix drive_hamiltonian(const FieldConfiguration& field, const SpinOperatorSet& ops, double t_us) {
  const double phase = 2.0 * units::kPi * field.drive_freq_mhz * t_us;
  return (2.0 * field.rabi_mhz * std::sin(phase)) * ops.dot(field.drive_dir);
}

RotatedFields apply_orientation(const SpinSystem& system, const FieldConfiguration& field) {
  const Mat3 r = system.orientation.rotation();
  return {r * field.b0_vector(), r * field.drive_dir};
}

CMatrix static_hamiltonian(const SpinSystem& system, const Vec3& b0) {
  return std::visit(
      [&](const auto& p) -> CMatrix {
        using T = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<T, P1Params>) {
          return build_p1(p, b0);
        } else if constexpr (std::is_same_v<T, NVParams>) {
          return build_nv(p, b0, NVManifold::kGround);
        } else {
          return build_x(b0, p);
        }
      },
      system.params);
}

SpinOperatorSet electron_operators(const SpinSystem& system) {
  switch (system.species) {
    case Species::kP1:
      return p1_electron();
    case Species::kNV:
      return spin_one();
    case Species::kX:
      return spin_half();
  }
  throw InvalidArgument("unknown species");
}

std::vector<SpinSystem> p1_ensemble(const P1Params& p) {
  std::vector<SpinSystem> out;
  for (const auto& o : Orientation::all()) out.push_back(SpinSystem::p1(o, 0.25, p));
  return out;
}

std::vector<SpinSystem> nv_ensemble(const NVParams& p) {
  std::vector<SpinSystem> out;
  for (const auto& o : Orientation::all()) out.push_back(SpinSystem::nv(o, 0.25, p));
  return out;
}

std::vector<Transition> allowed_transitions(const SpinSystem& system, const FieldConfiguration& field,
                                            double min_rabi_factor) {
  const auto rotated = apply_orientation(system, field);
  const auto es = eigensystem(static_hamiltonian(system, rotated.b0_mt));
  const CMatrix coupling = electron_operators(system).dot(rotated.drive_dir);
  const CMatrix in_eigenbasis = es.vectors.adjoint() * coupling * es.vectors;

  std::vector<Transition> out;
  const int n = static_cast<int>(es.values.size());
  for (int a = 0; a < n; ++a) {
    for (int b = a + 1; b < n; ++b) {
      const double factor = 2.0 * std::abs(in_eigenbasis(a, b));
      if (factor < min_rabi_factor) continue;
      out.push_back({system.species, system.orientation, a + 1, b + 1, es.values(b) - es.values(a), factor,
                     system.weight});
    }
  }
  std::sort(out.begin(), out.end(),
            [](const Transition& l, const Transition& r) { return l.freq_mhz < r.freq_mhz; });
  return out;
}

}  // namespace nvdeer
