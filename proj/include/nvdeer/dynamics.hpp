#pragma once

#include "nvdeer/hamiltonians.hpp"
#include "nvdeer/trace.hpp"

#include <functional>
#include <map>
#include <vector>

namespace nvdeer {

/// Hermitian, unit-trace, positive semidefinite (to 1e-9) density matrix.
class DensityMatrix {
 public:
  /// Throws InvalidArgument if an invariant fails by more than `tol`.
  explicit DensityMatrix(CMatrix rho, double tol = 1e-9);

  static DensityMatrix pure(const CVector& psi);
  static DensityMatrix maximally_mixed(int dim);

  const CMatrix& matrix() const { return rho_; }
  int dim() const { return static_cast<int>(rho_.rows()); }
  double trace() const { return rho_.trace().real(); }
  double purity() const;

 private:
  CMatrix rho_;
};

struct PulseSpec {
  double duration_us = 0.0;
  double f_b_mhz = 0.0;
  double rabi_mhz = 0.0;
};

/// H1(t) = coupling * sin(2 pi f t), coupling in MHz.
struct PeriodicDrive {
  CMatrix coupling;
  double freq_mhz = 0.0;

  CMatrix at(double t_us) const;
};

/// Drive of `field` acting through `ops` (e1 taken from field.drive_dir).
PeriodicDrive make_drive(const FieldConfiguration& field, const SpinOperatorSet& ops);

using DriveFunction = std::function<CMatrix(double t_us)>;

struct PropagationOptions {
  double rel_tol = 1e-8;
  double abs_tol = 1e-10;
  /// Largest allowed step; 0 leaves it to the error controller.
  double max_step_us = 0.0;
  /// Step size below which the integration is abandoned.
  double min_step_us = 1e-14;
};

/// Adaptive Runge-Kutta-Fehlberg 7(8) on i d(rho)/dt = 2 pi [H0 + H1(t), rho].
/// Throws IntegrationFailure on step-size underflow.
DensityMatrix propagate(const CMatrix& h0, const DriveFunction& drive, const DensityMatrix& rho0,
                        double duration_us, const PropagationOptions& options = {});

/// Same as above for a periodic drive; caps the step at 1/(20 f_B).
DensityMatrix propagate(const CMatrix& h0, const PeriodicDrive& drive, const DensityMatrix& rho0,
                        double duration_us, double rel_tol = 1e-8);

/// Unitary over [0, duration] built from fourth-order Magnus sub-steps of
/// 1/(substeps f_B), each exponentiated by eigendecomposition. Whole drive
/// periods are handled by powering the one-period propagator.
CMatrix pulse_propagator(const CMatrix& h0, const PeriodicDrive& drive, double duration_us,
                         int substeps_per_period = 64);

/// 1 - Tr(rho_i rho_f), tiny negatives clamped to 0.
double transition_probability(const DensityMatrix& rho_i, const DensityMatrix& rho_f);

/// Per-species level populations in ascending-energy order. Species without
/// an entry use the defaults: uniform for P1 and X, laser-polarised steady
/// state for NV.
using InitialPopulations = std::map<Species, std::vector<double>>;

/// Level populations a member starts from.
std::vector<double> member_populations(const SpinSystem& system, const Vec3& b0_rotated_mt,
                                       const InitialPopulations& initial);

/// Population-weighted sum over eigenstates of (1 - |<psi_i|U|psi_i>|^2)
/// after a pulse of length t_b at the drive frequency in `field`, times the
/// member weight.
double member_transfer(const SpinSystem& system, const FieldConfiguration& field, double t_b_us,
                       const InitialPopulations& initial = {});

/// P_B^sim on a frequency grid; grid points run in parallel.
SpectrumTrace simulate_deer_spectrum(const std::vector<SpinSystem>& ensemble, const FieldConfiguration& field,
                                     double t_b_us, const std::vector<double>& f_grid_mhz,
                                     const InitialPopulations& initial = {});

/// P_B^sim against pulse length at field.drive_freq_mhz.
SpectrumTrace simulate_rabi(const SpinSystem& system, const FieldConfiguration& field,
                            const std::vector<double>& t_grid_us, const InitialPopulations& initial = {});

/// 1/2 |<a| n.S |a> - <b| n.S |b>| for eigenstates a, b (numbered from 1).
double compute_sigma(const CMatrix& h0, const SpinOperatorSet& ops, int level_a, int level_b,
                     const Vec3& quant_axis = Vec3::UnitZ());

/// A resonance line of an ensemble: allowed transitions of all members,
/// with coincident lines (within merge_tol) combined.
struct SpectralLine {
  Species species = Species::kX;
  double freq_mhz = 0.0;
  /// Sum over merged transitions of weight * (n_a + n_b).
  double amp = 0.0;
  /// Amplitude-weighted mean of 2 |<a| e1'.S |b>|.
  double rabi_factor = 0.0;
  int multiplicity = 0;
};

/// Lines sorted by frequency.
std::vector<SpectralLine> spectral_lines(const std::vector<SpinSystem>& ensemble, const FieldConfiguration& field,
                                         const InitialPopulations& initial = {}, double merge_tol_mhz = 0.05);

/// E_b - E_a for eigenstates numbered from 1.
double transition_frequency(const CMatrix& h0, int level_a, int level_b);

/// Uniform grid from lo to hi (inclusive when it lands on a step).
std::vector<double> linear_grid(double lo, double hi, double step);

/// Default spectrum grid: `coarse` spacing everywhere, `fine` spacing within
/// `half_width` of each peak.
std::vector<double> refined_grid(double lo, double hi, const std::vector<double>& peaks, double half_width,
                                 double coarse = 2.0, double fine = 0.5);

}  // namespace nvdeer
