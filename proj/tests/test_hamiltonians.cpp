#include "nvdeer/dynamics.hpp"
#include "nvdeer/errors.hpp"
#include "nvdeer/hamiltonians.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <complex>
#include <vector>

using namespace nvdeer;

namespace {

constexpr double kB0 = 37.2;

double hermiticity(const CMatrix& h) { return (h - h.adjoint()).cwiseAbs().maxCoeff(); }

FieldConfiguration axial_field(double b0 = kB0) {
  FieldConfiguration f;
  f.b0_mt = b0;
  f.rabi_mhz = 2.5;
  return f;
}

/// Eigenvalues of a 3x3 Hermitian matrix from its characteristic cubic
/// (trigonometric root formula), independent of any iterative eigensolver.
std::vector<double> cubic_eigenvalues(const CMatrix& h) {
  const double tr = h.trace().real();
  const double tr2 = (h * h).trace().real();
  const double q = tr / 3.0;
  const double p2 = (tr2 - tr * tr / 3.0) / 6.0;
  const double p = std::sqrt(p2);
  const CMatrix b = (h - q * CMatrix::Identity(3, 3)) / p;
  const double r = std::clamp(b.determinant().real() / 2.0, -1.0, 1.0);
  const double phi = std::acos(r) / 3.0;
  std::vector<double> v{q + 2.0 * p * std::cos(phi), q + 2.0 * p * std::cos(phi + 2.0 * M_PI / 3.0),
                        q + 2.0 * p * std::cos(phi + 4.0 * M_PI / 3.0)};
  std::sort(v.begin(), v.end());
  return v;
}

/// exp(-i theta n.S) from the eigendecomposition of the Hermitian generator.
CMatrix spin_rotation(const SpinOperatorSet& ops, const Vec3& axis, double theta) {
  const auto es = eigensystem(ops.dot(axis));
  CVector phases(es.values.size());
  for (Eigen::Index k = 0; k < phases.size(); ++k) phases(k) = std::polar(1.0, -theta * es.values(k));
  return es.vectors * phases.asDiagonal() * es.vectors.adjoint();
}

}  // namespace

TEST_CASE("P1 Hamiltonian: lines near the free-electron frequency") {
  const auto member = SpinSystem::p1(Orientation::of(OrientationLabel::k111), 1.0);
  const CMatrix h = build_p1(P1Params{}, Vec3(0.0, 0.0, kB0));
  CHECK(h.rows() == 6);
  CHECK(hermiticity(h) < 1e-12);
  const auto lines = allowed_transitions(member, axial_field());
  REQUIRE(lines.size() == 3);
  for (const auto& t : lines) CHECK(std::abs(t.freq_mhz - 1042.53) < 130.0);
  CHECK(lines[1].freq_mhz == doctest::Approx(units::kGammaE * kB0).epsilon(0.01));
}

TEST_CASE("P1 Hamiltonian: on-axis lines follow second-order hyperfine theory") {
  // nu(m) = nu0 + A_par m + A_perp^2 / (2 nu0) (I(I+1) - m^2), I = 1
  const P1Params p;
  const double nu0 = units::kGammaE * kB0;
  const auto member = SpinSystem::p1(Orientation::of(OrientationLabel::k111), 1.0);
  const auto lines = allowed_transitions(member, axial_field());
  REQUIRE(lines.size() == 3);
  const double c2 = p.a_perp_mhz * p.a_perp_mhz / (2.0 * nu0);
  const double expected[3] = {nu0 - p.a_par_mhz + c2, nu0 + 2.0 * c2, nu0 + p.a_par_mhz + c2};
  for (int m = 0; m < 3; ++m) {
    CAPTURE(m);
    CHECK(std::abs(lines[static_cast<std::size_t>(m)].freq_mhz - expected[m]) < 1.0);
  }
  const double upper = lines[2].freq_mhz - lines[1].freq_mhz;
  const double lower = lines[1].freq_mhz - lines[0].freq_mhz;
  CHECK(std::abs(0.5 * (upper + lower) - p.a_par_mhz) < 1.0);
  // the asymmetry equals -A_perp^2 / nu0 at second order
  CHECK((upper - lower) == doctest::Approx(-p.a_perp_mhz * p.a_perp_mhz / nu0).epsilon(0.05));
}

TEST_CASE("P1 Hamiltonian: on-axis lines symmetric about the central line within 4 MHz" * doctest::may_fail()) {
  // Second-order hyperfine shifts make this about 6.3 MHz with the stated couplings.
  const auto member = SpinSystem::p1(Orientation::of(OrientationLabel::k111), 1.0);
  const auto lines = allowed_transitions(member, axial_field());
  REQUIRE(lines.size() == 3);
  const double asym = (lines[2].freq_mhz - lines[1].freq_mhz) - (lines[1].freq_mhz - lines[0].freq_mhz);
  CHECK(std::abs(asym) < 4.0);
}

TEST_CASE("P1 Hamiltonian: zero field is orientation independent") {
  const CMatrix h = build_p1(P1Params{}, Vec3::Zero());
  CHECK(hermiticity(h) < 1e-12);
  const auto ref = eigensystem(h).values;
  for (const auto& o : Orientation::all()) {
    const auto member = SpinSystem::p1(o, 0.25);
    const auto ev = eigensystem(static_hamiltonian(member, o.rotation() * Vec3::Zero())).values;
    CHECK((ev - ref).cwiseAbs().maxCoeff() < 1e-12);
  }
  // only hyperfine and quadrupole remain: trace = P_par * tr(Iz^2) * 2
  CHECK(h.trace().real() == doctest::Approx(P1Params{}.p_par_mhz * 2.0 * 2.0));
}

TEST_CASE("NV Hamiltonian: ground state lines") {
  const NVParams p;
  const CMatrix h = build_nv(p, Vec3(0.0, 0.0, kB0));
  CHECK(hermiticity(h) < 1e-12);
  const auto ev = eigensystem(h).values;
  // axial: energies 0, D - gB, D + gB
  CHECK(ev(1) - ev(0) == doctest::Approx(2870.0 - units::kGammaE * kB0));
  CHECK(ev(1) - ev(0) == doctest::Approx(1827.5).epsilon(1e-3));

  const auto zero = eigensystem(build_nv(p, Vec3::Zero())).values;
  CHECK(zero(0) == doctest::Approx(0.0));
  CHECK(zero(1) == doctest::Approx(2870.0));
  CHECK(zero(2) == doctest::Approx(2870.0));
  const auto excited = eigensystem(build_nv(p, Vec3::Zero(), NVManifold::kExcited)).values;
  CHECK(excited(2) == doctest::Approx(1420.0));
}

TEST_CASE("NV Hamiltonian: axial slopes are -/+ gamma_e") {
  const NVParams p;
  const double b = 20.0, db = 1e-3;
  auto freqs = [&](double field) {
    const auto ev = eigensystem(build_nv(p, Vec3(0.0, 0.0, field))).values;
    // levels: 0 = |0>, then |-1> and |+1> (field below the level anticrossing)
    return std::pair{ev(1) - ev(0), ev(2) - ev(0)};
  };
  const auto lo = freqs(b - db), hi = freqs(b + db);
  CHECK((hi.first - lo.first) / (2.0 * db) == doctest::Approx(-units::kGammaE).epsilon(1e-3));
  CHECK((hi.second - lo.second) / (2.0 * db) == doctest::Approx(units::kGammaE).epsilon(1e-3));
}

TEST_CASE("NV Hamiltonian: off-axis |2>-|3> line from the characteristic cubic") {
  FieldConfiguration f = axial_field();
  f.tilt_deg = 0.1;
  const auto member = SpinSystem::nv(Orientation::of(OrientationLabel::kBar111), 0.25);
  const auto rotated = apply_orientation(member, f);
  const CMatrix h = static_hamiltonian(member, rotated.b0_mt);
  const auto oracle = cubic_eigenvalues(h);
  const auto ev = eigensystem(h).values;
  for (int k = 0; k < 3; ++k) CHECK(ev(k) == doctest::Approx(oracle[static_cast<std::size_t>(k)]).epsilon(1e-10));
  CHECK(transition_frequency(h, 2, 3) == doctest::Approx(oracle[2] - oracle[1]).epsilon(1e-10));
  CHECK(transition_frequency(h, 2, 3) == doctest::Approx(732.35).epsilon(1e-4));
}

TEST_CASE("X Hamiltonian") {
  const CMatrix h = build_x(Vec3(0.0, 0.0, kB0));
  CHECK(hermiticity(h) < 1e-12);
  const auto ev = eigensystem(h).values;
  CHECK(ev(1) - ev(0) == doctest::Approx(1042.53).epsilon(1e-5));
  CHECK(build_x(Vec3::Zero()).cwiseAbs().maxCoeff() == 0.0);
  const auto ev2 = eigensystem(build_x(Vec3(0.0, 0.0, 2.0 * kB0))).values;
  CHECK(ev2(1) - ev2(0) == doctest::Approx(2.0 * (ev(1) - ev(0))));
}

TEST_CASE("drive Hamiltonian") {
  FieldConfiguration f = axial_field();
  f.drive_freq_mhz = 1000.0;
  const auto half = spin_operators(0.5);
  CHECK(drive_hamiltonian(f, half, 0.0).cwiseAbs().maxCoeff() == 0.0);
  CHECK(drive_hamiltonian(f, half, 1.0 / 1000.0 * 0.5).cwiseAbs().maxCoeff() < 1e-9);
  const double t = 0.123456;
  const CMatrix h1 = drive_hamiltonian(f, half, t);
  // linearly polarised, amplitude 2 Omega so the rotating component nutates at Omega
  CHECK((h1 - 2.0 * f.rabi_mhz * std::sin(2.0 * M_PI * f.drive_freq_mhz * t) * half.sx).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(hermiticity(h1) < 1e-12);
}

TEST_CASE("drive Hamiltonian: rotated drive equals the basis change") {
  FieldConfiguration f = axial_field();
  f.drive_freq_mhz = 1000.0;
  f.drive_dir = Vec3(0.6, 0.0, 0.8);
  for (double spin : {0.5, 1.0}) {
    const auto ops = spin_operators(spin);
    for (const auto& o : Orientation::all()) {
      const Mat3 r = o.rotation();
      FieldConfiguration fr = f;
      fr.drive_dir = r * f.drive_dir;
      const CMatrix u = spin_rotation(ops, Vec3::UnitZ(), o.theta_z_deg * M_PI / 180.0) *
                        spin_rotation(ops, Vec3::UnitY(), o.theta_y_deg * M_PI / 180.0);
      const double t = 0.3;
      const CMatrix lhs = drive_hamiltonian(fr, ops, t);
      const CMatrix rhs = u * drive_hamiltonian(f, ops, t) * u.adjoint();
      CHECK((lhs - rhs).cwiseAbs().maxCoeff() < 1e-12);
    }
  }
}

TEST_CASE("apply_orientation") {
  FieldConfiguration f = axial_field();
  f.tilt_deg = 0.1;
  const auto on = apply_orientation(SpinSystem::p1(Orientation::of(OrientationLabel::k111), 0.25), f);
  CHECK((on.b0_mt - f.b0_vector()).norm() < 1e-15);
  CHECK((on.drive_dir - f.drive_dir).norm() < 1e-15);
  for (const auto& o : Orientation::all()) {
    const auto rr = apply_orientation(SpinSystem::nv(o, 0.25), f);
    CHECK(rr.b0_mt.norm() == doctest::Approx(f.b0_mt));
    CHECK(rr.drive_dir.norm() == doctest::Approx(1.0));
  }
}

TEST_CASE("off-axis NV spectra coincide for an exactly axial field") {
  const FieldConfiguration f = axial_field();
  std::vector<RVector> spectra;
  for (auto label : {OrientationLabel::kBar111, OrientationLabel::k1Bar11, OrientationLabel::k11Bar1}) {
    const auto member = SpinSystem::nv(Orientation::of(label), 0.25);
    spectra.push_back(eigensystem(static_hamiltonian(member, apply_orientation(member, f).b0_mt)).values);
  }
  CHECK((spectra[0] - spectra[1]).cwiseAbs().maxCoeff() < 1e-9);
  CHECK((spectra[0] - spectra[2]).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("ensembles: weights sum to one and Hamiltonians are Hermitian") {
  FieldConfiguration f = axial_field();
  f.tilt_deg = 0.1;
  for (const auto& ens : {p1_ensemble(), nv_ensemble()}) {
    double w = 0.0;
    for (const auto& m : ens) {
      w += m.weight;
      const auto r = apply_orientation(m, f);
      CHECK(hermiticity(static_hamiltonian(m, r.b0_mt)) < 1e-12);
    }
    CHECK(w == doctest::Approx(1.0).epsilon(1e-12));
  }
  CHECK(species_name(Species::kX) == "X");
  CHECK(parse_species("P1") == Species::kP1);
  CHECK_THROWS(parse_species("Q"));
}
