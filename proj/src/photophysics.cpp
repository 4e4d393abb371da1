#include "nvdeer/photophysics.hpp"

#include "nvdeer/errors.hpp"

#include <unsupported/Eigen/MatrixFunctions>

#include <cmath>

namespace nvdeer {

namespace {

// Position of m_s = 0, -1, +1 inside the descending-m spin-1 basis (+1, 0, -1).
constexpr std::array<int, 3> kMsBasisIndex{1, 2, 0};

constexpr double kRadiative = 65.9;

void check_simplex(const Vector7& n, const char* where) {
  if (n.minCoeff() < -1e-9) {
    throw NumericFailure(std::string("negative population in ") + where);
  }
}

}  // namespace

RateModelParams RateModelParams::standard(double beta) {
  RateModelParams p;
  p.beta = beta;
  auto& k = p.k0;
  k(3, 0) = k(4, 1) = k(5, 2) = kRadiative;
  k(0, 3) = k(1, 4) = k(2, 5) = beta * kRadiative;
  k(3, 6) = 7.9;
  k(4, 6) = k(5, 6) = 53.3;
  k(6, 0) = 1.0;
  k(6, 1) = k(6, 2) = 0.7;
  return p;
}

Matrix7 RateModelParams::dark_rates() const {
  Matrix7 k = k0;
  for (int g = 0; g < 3; ++g) k(g, g + 3) = 0.0;
  return k;
}

void RateModelParams::validate() const {
  if (k0.minCoeff() < 0.0) throw InvalidArgument("rate model: negative base rate");
  if (!(beta >= 0.0)) throw InvalidArgument("rate model: beta must be >= 0");
  for (int block = 0; block < 2; ++block) {
    for (int r = 0; r < 3; ++r) {
      const double s = alpha2.block<1, 3>(3 * block + r, 3 * block).sum();
      if (std::abs(s - 1.0) > 1e-9) throw InvalidArgument("rate model: mixing rows must sum to 1");
    }
  }
  if (std::abs(alpha2(6, 6) - 1.0) > 1e-12) throw InvalidArgument("rate model: singlet must be unmixed");
}

void PulseTrain::validate() const {
  if (laser_on_us < 0 || readout_wait_us < 0 || n_pulses < 0) {
    throw InvalidArgument("pulse train: times and counts must be >= 0");
  }
  if (!(laser_period_us > laser_on_us + readout_wait_us)) {
    throw InvalidArgument("pulse train: period must exceed laser on-time plus readout wait");
  }
}

PopulationVector PopulationVector::uniform_ground() {
  PopulationVector p;
  p.n.head<3>().setConstant(1.0 / 3.0);
  return p;
}

std::array<double, 3> PopulationVector::ground_fractions() const {
  const double g = n.head<3>().sum();
  if (!(g > 0.0)) throw InvalidData("population vector has no ground-state population");
  return {n(0) / g, n(1) / g, n(2) / g};
}

Matrix7 mixing_coefficients(const Vec3& b0, const NVParams& nv) {
  Matrix7 a = Matrix7::Zero();
  const std::array<NVManifold, 2> manifolds{NVManifold::kGround, NVManifold::kExcited};
  for (int block = 0; block < 2; ++block) {
    const auto es = eigensystem(build_nv(nv, b0, manifolds[block]));
    for (int i = 0; i < 3; ++i) {
      for (int j = 0; j < 3; ++j) {
        a(3 * block + i, 3 * block + j) = std::norm(es.vectors(kMsBasisIndex[j], i));
      }
    }
  }
  a(6, 6) = 1.0;
  return a;
}

Matrix7 transformed_rates(const RateModelParams& params, bool laser_on) {
  const Matrix7 base = laser_on ? params.k0 : params.dark_rates();
  return params.alpha2 * base * params.alpha2.transpose();
}

Matrix7 rate_generator(const Matrix7& k) {
  Matrix7 g = k.transpose();
  g.diagonal() -= k.rowwise().sum();
  return g;
}

namespace {

struct CycleMaps {
  Matrix7 laser;     // over laser_on_us
  Matrix7 wait;      // laser off, readout_wait_us
  Matrix7 rest;      // laser off, remainder of the period after readout
};

CycleMaps cycle_maps(const RateModelParams& params, const PulseTrain& train) {
  params.validate();
  train.validate();
  const Matrix7 g_on = rate_generator(transformed_rates(params, true));
  const Matrix7 g_off = rate_generator(transformed_rates(params, false));
  const double rest = train.laser_period_us - train.laser_on_us - train.readout_wait_us;
  return {(g_on * train.laser_on_us).exp(), (g_off * train.readout_wait_us).exp(), (g_off * rest).exp()};
}

}  // namespace

std::vector<PopulationVector> evolve_populations(const RateModelParams& params, const PulseTrain& train,
                                                 const PopulationVector& n0) {
  if (std::abs(n0.total() - 1.0) > 1e-9 || n0.n.minCoeff() < -1e-9) {
    throw InvalidArgument("initial populations must lie on the simplex");
  }
  const auto maps = cycle_maps(params, train);
  std::vector<PopulationVector> out;
  out.reserve(train.n_pulses);
  Vector7 n = n0.n;
  for (int p = 0; p < train.n_pulses; ++p) {
    n = maps.wait * (maps.laser * n);
    check_simplex(n, "readout");
    out.push_back({n});
    n = maps.rest * n;
    check_simplex(n, "dark interval");
  }
  return out;
}

SteadyState steady_state(const RateModelParams& params, const PulseTrain& train, const PopulationVector& n0,
                         double tolerance) {
  const auto maps = cycle_maps(params, train);
  // The limit cycle is the fixed point of the period map; repeated squaring
  // of the stochastic map gives it directly.
  Matrix7 period = maps.rest * maps.wait * maps.laser;
  for (int i = 0; i < 40; ++i) period = (period * period).eval();
  Vector7 fixed = period * n0.n;
  fixed /= fixed.sum();
  const PopulationVector limit{maps.wait * maps.laser * fixed};
  const auto target = limit.ground_fractions();

  PulseTrain probe = train;
  probe.n_pulses = std::max(train.n_pulses, 200);
  const auto history = evolve_populations(params, probe, n0);
  int last_outside = 0;
  for (int p = 0; p < static_cast<int>(history.size()); ++p) {
    const auto f = history[p].ground_fractions();
    for (int k = 0; k < 3; ++k) {
      if (std::abs(f[k] - target[k]) > tolerance) last_outside = p + 1;
    }
  }
  return {limit, last_outside + 1};
}

std::array<double, 3> nv_level_populations(const Vec3& b0, double beta, const NVParams& nv) {
  auto params = RateModelParams::standard(beta);
  params.alpha2 = mixing_coefficients(b0, nv);
  return steady_state(params, PulseTrain{}, PopulationVector::uniform_ground()).readout.ground_fractions();
}

double signal_fraction(const PopulationVector& populations, std::pair<int, int> transition, double off_axis_share) {
  if (off_axis_share < 0.0 || off_axis_share > 1.0) {
    throw InvalidArgument("off_axis_share must lie in [0, 1]");
  }
  const auto [a, b] = transition;
  if (a < 1 || a > 7 || b < 1 || b > 7) throw InvalidArgument("level index out of range");
  return (populations.n(a - 1) + populations.n(b - 1)) * off_axis_share;
}

}  // namespace nvdeer
