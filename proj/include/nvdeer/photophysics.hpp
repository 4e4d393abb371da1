#pragma once

#include "nvdeer/hamiltonians.hpp"

#include <Eigen/Dense>

#include <array>
#include <utility>
#include <vector>

namespace nvdeer {

using Matrix7 = Eigen::Matrix<double, 7, 7>;
using Vector7 = Eigen::Matrix<double, 7, 1>;

// State indices of the seven-level model, 0-based:
//   0..2 ground  |1>,|2>,|3>  (m_s = 0, -1, +1 at zero perpendicular field)
//   3..5 excited |4>,|5>,|6>
//   6    metastable singlet |7>
// Rate matrices are stored as k(i, j) = rate from i to j, in 1/us.

struct RateModelParams {
  Matrix7 k0 = Matrix7::Zero();
  double beta = 0.03;
  /// |alpha_ij|^2: overlap of mixed state i with zero-perpendicular-field state j.
  Matrix7 alpha2 = Matrix7::Identity();

  /// Orientation-averaged room temperature rates with pumping beta * k41.
  static RateModelParams standard(double beta = 0.03);
  /// Base rates with the optical pumping channels removed.
  Matrix7 dark_rates() const;
  void validate() const;
};

struct PulseTrain {
  double laser_on_us = 5.0;
  double laser_period_us = 160.0;
  double readout_wait_us = 1.5;
  int n_pulses = 15;

  void validate() const;
};

struct PopulationVector {
  Vector7 n = Vector7::Zero();

  static PopulationVector uniform_ground();
  double total() const { return n.sum(); }
  /// Ground-block populations renormalised to sum to one.
  std::array<double, 3> ground_fractions() const;
};

/// |alpha|^2 for a field expressed in the NV frame. Rows are eigenstates in
/// ascending energy (ground block from D_gs, excited block from D_es).
Matrix7 mixing_coefficients(const Vec3& b0_mt, const NVParams& nv = {});

/// k_ij = sum_pq |a_ip|^2 |a_jq|^2 k0_pq, with or without the laser.
Matrix7 transformed_rates(const RateModelParams& params, bool laser_on = true);

/// Generator G with dn/dt = G n for a rate matrix k(i, j).
Matrix7 rate_generator(const Matrix7& k);

/// Integrates the pulse train and returns the populations at the readout
/// instant (readout_wait_us after each laser pulse ends), one per pulse.
std::vector<PopulationVector> evolve_populations(const RateModelParams& params, const PulseTrain& train,
                                                 const PopulationVector& n0);

struct SteadyState {
  PopulationVector readout;
  /// First pulse after which every readout stays within tolerance of the
  /// limit cycle (ground fractions).
  int pulses_to_converge = 0;
};

SteadyState steady_state(const RateModelParams& params, const PulseTrain& train, const PopulationVector& n0,
                         double tolerance = 0.01);

/// Ground-state level fractions of an NV whose frame sees `b0_mt`.
std::array<double, 3> nv_level_populations(const Vec3& b0_mt, double beta = 0.03, const NVParams& nv = {});

/// (n_a + n_b) * off_axis_share; levels numbered from 1.
double signal_fraction(const PopulationVector& populations, std::pair<int, int> transition, double off_axis_share);

}  // namespace nvdeer
