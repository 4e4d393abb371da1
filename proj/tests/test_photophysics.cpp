#include "nvdeer/errors.hpp"
#include "nvdeer/photophysics.hpp"

#include <doctest.h>

#include <Eigen/Eigenvalues>

#include <cmath>
#include <complex>
#include <random>

using namespace nvdeer;

namespace {

constexpr double kB0 = 37.2;

/// Field seen by an off-axis NV under the tilted lab field.
Vec3 off_axis_field() {
  FieldConfiguration f;
  f.b0_mt = kB0;
  f.tilt_deg = 0.1;
  return Orientation::of(OrientationLabel::kBar111).rotation() * f.b0_vector();
}

/// |alpha|^2 of one manifold from an explicit spin-1 Hamiltonian in the
/// (m = 0, -1, +1) basis, rows in ascending energy.
Eigen::Matrix3d oracle_mixing(double d, const Vec3& b) {
  const double g = units::kGammaE;
  const std::complex<double> i(0.0, 1.0);
  const double r = 1.0 / std::sqrt(2.0);
  Eigen::Matrix3cd h = Eigen::Matrix3cd::Zero();
  // basis order: |0>, |-1>, |+1>
  h(1, 1) = d - g * b.z();
  h(2, 2) = d + g * b.z();
  const std::complex<double> bm = g * r * (b.x() - i * b.y());  // <0|H|+1> from S-, and <-1|H|0>
  h(0, 2) = bm;
  h(1, 0) = bm;
  h(2, 0) = std::conj(bm);
  h(0, 1) = std::conj(bm);
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3cd> es(h);
  Eigen::Matrix3d a;
  for (int row = 0; row < 3; ++row)
    for (int col = 0; col < 3; ++col) a(row, col) = std::norm(es.eigenvectors()(col, row));
  return a;
}

/// Mixed rates by explicit summation.
Matrix7 oracle_rates(const Matrix7& k0, const Matrix7& a) {
  Matrix7 k = Matrix7::Zero();
  for (int i = 0; i < 7; ++i)
    for (int j = 0; j < 7; ++j)
      for (int p = 0; p < 7; ++p)
        for (int q = 0; q < 7; ++q) k(i, j) += a(i, p) * a(j, q) * k0(p, q);
  return k;
}

/// Fixed-step RK4 through the pulse train; returns the readout populations.
std::vector<Vector7> oracle_train(const Matrix7& k_on, const Matrix7& k_off, const PulseTrain& t, Vector7 n) {
  auto rhs = [](const Matrix7& k, const Vector7& x) {
    Vector7 d = Vector7::Zero();
    for (int i = 0; i < 7; ++i)
      for (int j = 0; j < 7; ++j) {
        d(j) += k(i, j) * x(i);
        d(i) -= k(i, j) * x(i);
      }
    return d;
  };
  auto run = [&](const Matrix7& k, double duration) {
    const int steps = static_cast<int>(std::ceil(duration / 0.002));
    const double h = duration / steps;
    for (int s = 0; s < steps; ++s) {
      const Vector7 a = rhs(k, n), b = rhs(k, n + 0.5 * h * a), c = rhs(k, n + 0.5 * h * b), d = rhs(k, n + h * c);
      n += h / 6.0 * (a + 2.0 * b + 2.0 * c + d);
    }
  };
  std::vector<Vector7> out;
  for (int p = 0; p < t.n_pulses; ++p) {
    run(k_on, t.laser_on_us);
    run(k_off, t.readout_wait_us);
    out.push_back(n);
    run(k_off, t.laser_period_us - t.laser_on_us - t.readout_wait_us);
  }
  return out;
}

PopulationVector random_simplex(std::mt19937_64& rng) {
  std::exponential_distribution<double> e(1.0);
  PopulationVector p;
  for (int k = 0; k < 7; ++k) p.n(k) = e(rng);
  p.n /= p.n.sum();
  return p;
}

}  // namespace

TEST_CASE("mixing coefficients") {
  const Matrix7 axial = mixing_coefficients(Vec3(0.0, 0.0, kB0));
  CHECK((axial - Matrix7::Identity()).cwiseAbs().maxCoeff() < 1e-12);

  const Matrix7 perp = mixing_coefficients(Vec3(5.0, 0.0, kB0));
  CHECK(perp(0, 1) + perp(0, 2) > 1e-4);

  const Vec3 b = off_axis_field();
  const Matrix7 a = mixing_coefficients(b);
  CHECK((a.block<3, 3>(0, 0) - oracle_mixing(2870.0, b)).cwiseAbs().maxCoeff() < 1e-9);
  CHECK((a.block<3, 3>(3, 3) - oracle_mixing(1420.0, b)).cwiseAbs().maxCoeff() < 1e-9);
  for (int r = 3; r < 6; ++r) {
    int strong = 0;
    for (int c = 3; c < 6; ++c) strong += a(r, c) > 1e-3 ? 1 : 0;
    CHECK(strong >= 2);
  }
  for (int blk = 0; blk < 2; ++blk) {
    const Eigen::Matrix3d m = a.block<3, 3>(3 * blk, 3 * blk);
    CHECK((m.rowwise().sum().array() - 1.0).abs().maxCoeff() < 1e-9);
    CHECK((m.colwise().sum().array() - 1.0).abs().maxCoeff() < 1e-9);
  }
  CHECK(a(6, 6) == 1.0);
}

TEST_CASE("transformed rates") {
  auto p = RateModelParams::standard();
  CHECK((transformed_rates(p) - p.k0).cwiseAbs().maxCoeff() < 1e-12);

  p.alpha2 = mixing_coefficients(off_axis_field());
  const Matrix7 k = transformed_rates(p);
  CHECK((k - oracle_rates(p.k0, p.alpha2)).cwiseAbs().maxCoeff() < 1e-9);
  CHECK(k.sum() == doctest::Approx(p.k0.sum()).epsilon(1e-12));
  CHECK(k.minCoeff() >= 0.0);
  for (int e = 3; e < 6; ++e) CHECK(k.block<1, 3>(e, 0).sum() == doctest::Approx(65.9).epsilon(1e-12));
  CHECK(k(4, 1) < p.k0(4, 1));
  CHECK(k(4, 0) + k(4, 2) == doctest::Approx(p.k0(4, 1) - k(4, 1)).epsilon(1e-9));

  const Matrix7 dark = transformed_rates(p, false);
  for (int g = 0; g < 3; ++g)
    for (int e = 3; e < 6; ++e) CHECK(dark(g, e) == 0.0);

  const Matrix7 gen = rate_generator(k);
  CHECK(gen.colwise().sum().cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("pulse-train evolution matches an explicit Runge-Kutta integration") {
  auto p = RateModelParams::standard();
  p.alpha2 = mixing_coefficients(off_axis_field());
  PulseTrain t;
  t.n_pulses = 4;
  const auto lib = evolve_populations(p, t, PopulationVector::uniform_ground());
  const auto ref = oracle_train(oracle_rates(p.k0, p.alpha2), oracle_rates(p.dark_rates(), p.alpha2), t,
                                PopulationVector::uniform_ground().n);
  REQUIRE(lib.size() == ref.size());
  for (std::size_t k = 0; k < ref.size(); ++k) CHECK((lib[k].n - ref[k]).cwiseAbs().maxCoeff() < 1e-8);
}

TEST_CASE("without pumping the ground block is static") {
  auto p = RateModelParams::standard(0.0);
  p.alpha2 = mixing_coefficients(off_axis_field());
  PopulationVector n0;
  n0.n.head<3>() << 0.5, 0.2, 0.3;
  for (const auto& n : evolve_populations(p, PulseTrain{}, n0)) CHECK((n.n - n0.n).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("off-axis NV steady state") {
  auto p = RateModelParams::standard(0.03);
  p.alpha2 = mixing_coefficients(off_axis_field());
  const auto ss = steady_state(p, PulseTrain{}, PopulationVector::uniform_ground());
  const auto g = ss.readout.ground_fractions();
  CHECK(g[0] == doctest::Approx(0.40).epsilon(0.01 / 0.40));
  CHECK(g[1] == doctest::Approx(0.30).epsilon(0.01 / 0.30));
  CHECK(g[2] == doctest::Approx(0.30).epsilon(0.01 / 0.30));

  for (double beta : {0.001, 0.003, 0.01, 0.03, 0.1}) {
    CAPTURE(beta);
    auto pb = RateModelParams::standard(beta);
    pb.alpha2 = p.alpha2;
    const auto s = steady_state(pb, PulseTrain{}, PopulationVector::uniform_ground());
    CHECK(s.pulses_to_converge >= 1);
    CHECK(s.pulses_to_converge <= 15);
    const auto gb = s.readout.ground_fractions();
    for (int k = 0; k < 3; ++k) CHECK(std::abs(gb[k] - g[k]) <= 0.01);
  }
}

TEST_CASE("steady state does not depend on the initial populations") {
  auto p = RateModelParams::standard(0.03);
  p.alpha2 = mixing_coefficients(off_axis_field());
  const auto ref = steady_state(p, PulseTrain{}, PopulationVector::uniform_ground()).readout.ground_fractions();
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 5; ++trial) {
    const auto g = steady_state(p, PulseTrain{}, random_simplex(rng)).readout.ground_fractions();
    for (int k = 0; k < 3; ++k) CHECK(std::abs(g[k] - ref[k]) < 1e-3);
  }
}

TEST_CASE("populations stay on the simplex") {
  auto p = RateModelParams::standard(0.1);
  p.alpha2 = mixing_coefficients(off_axis_field());
  std::mt19937_64 rng(9);
  PulseTrain t;
  t.n_pulses = 20;
  for (int trial = 0; trial < 5; ++trial) {
    for (const auto& n : evolve_populations(p, t, random_simplex(rng))) {
      CHECK(n.total() == doctest::Approx(1.0).epsilon(1e-9));
      CHECK(n.n.minCoeff() >= -1e-9);
    }
  }
  PopulationVector bad;
  bad.n(0) = 0.5;
  CHECK_THROWS_AS(evolve_populations(p, t, bad), InvalidArgument);
}

TEST_CASE("axial NV polarisation equals an explicit integration of the pulse train") {
  const auto p = RateModelParams::standard(0.03);
  PulseTrain t;
  const auto lib = evolve_populations(p, t, PopulationVector::uniform_ground());
  const auto ref = oracle_train(p.k0, p.dark_rates(), t, PopulationVector::uniform_ground().n);
  const double n1_ref = ref.back()(0) / ref.back().head<3>().sum();
  CHECK(lib.back().ground_fractions()[0] == doctest::Approx(n1_ref).epsilon(1e-8));
  // the stated rates polarise an aligned NV only to about 71 %
  CHECK(n1_ref == doctest::Approx(0.708).epsilon(0.01));
}

TEST_CASE("axial NV reaches 95 % polarisation after 15 pulses" * doctest::may_fail()) {
  // With the stated rates the limit is near 71 %, see the explicit integration above.
  const auto p = RateModelParams::standard(0.03);
  const auto lib = evolve_populations(p, PulseTrain{}, PopulationVector::uniform_ground());
  CHECK(lib.back().ground_fractions()[0] >= 0.95);
}

TEST_CASE("signal fraction") {
  PopulationVector p;
  p.n.head<3>() << 0.40, 0.30, 0.30;
  CHECK(signal_fraction(p, {2, 3}, 0.75) == doctest::Approx(0.45));
  CHECK(signal_fraction(PopulationVector::uniform_ground(), {2, 3}, 1.0) == doctest::Approx(2.0 / 3.0));
  PopulationVector edge;
  edge.n.head<3>() << 0.6, 0.4, 0.0;
  CHECK(signal_fraction(edge, {2, 3}, 0.5) == doctest::Approx(0.2));
  CHECK_THROWS_AS(signal_fraction(p, {2, 3}, 1.5), InvalidArgument);
  CHECK_THROWS_AS(signal_fraction(p, {0, 3}, 0.5), InvalidArgument);
}
