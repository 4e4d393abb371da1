#pragma once

#include "nvdeer/analytic.hpp"
#include "nvdeer/hamiltonians.hpp"
#include "nvdeer/trace.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace nvdeer {

struct FitResult {
  std::vector<std::string> names;
  Eigen::VectorXd values;
  Eigen::VectorXd std_errors;
  Eigen::MatrixXd covariance;
  double residual_norm = 0.0;  // sqrt(sum r^2), weighted when sigmas are given
  double chi2_reduced = 0.0;
  std::size_t n_points = 0;
  bool converged = false;
  int iterations = 0;
  /// max_j |J_j . r| / (|J_j| |r|) over free, non-pinned parameters.
  double gradient_cosine = 0.0;
  double condition_number = 1.0;
  std::vector<std::string> warnings;

  /// Throws InvalidArgument for an unknown name.
  double value(const std::string& name) const;
  double error(const std::string& name) const;
};

/// Residual vector r(p); weighting is the caller's business.
using ResidualFunction = std::function<Eigen::VectorXd(const Eigen::VectorXd& params)>;

struct LeastSquaresProblem {
  ResidualFunction residuals;
  std::vector<std::string> names;
  Eigen::VectorXd initial;
  Eigen::VectorXd lower;  // may be -inf
  Eigen::VectorXd upper;  // may be +inf
  /// Typical magnitude per parameter; sets finite-difference steps and
  /// multi-start spread. Defaults to max(|initial|, 1).
  Eigen::VectorXd scale;
};

struct LeastSquaresOptions {
  int max_iterations = 200;
  double gtol = 1e-10;
  double ftol = 1e-14;
  double xtol = 1e-14;
  /// Gradient cosine below which a finished run counts as converged.
  double converged_gtol = 1e-4;
  double fd_step = 1e-6;
  double condition_warning = 1e10;
};

/// Levenberg-Marquardt with box bounds (steps projected onto the box) and a
/// central-difference Jacobian. Covariance is (J^T J)^-1 scaled by the
/// reduced chi-square.
FitResult least_squares(const LeastSquaresProblem& problem, const LeastSquaresOptions& options = {});

/// The initial guess plus n_starts - 1 draws of initial + scale * U(-1, 1),
/// clipped to the bounds. Deterministic for a given seed; returns the lowest cost.
FitResult least_squares_multistart(const LeastSquaresProblem& problem, std::uint64_t seed, int n_starts = 5,
                                   const LeastSquaresOptions& options = {});

// ---------------------------------------------------------------------------
// Spectral peaks

struct PeakFit {
  LorentzianPeakSet peaks;       // areas normalised to one
  std::vector<double> depths;    // dip depth of each line
  double baseline = 1.0;
  FitResult fit;
};

/// Fits y = c - sum_i d_i G_i^2 / (G_i^2 + (x - f_i)^2). Seeds, when absent,
/// come from the n_peaks deepest local minima of the smoothed trace.
/// Throws FitFailure when no dip stands out of the noise.
PeakFit fit_lorentzian_peaks(const SpectrumTrace& trace, int n_peaks,
                             const std::optional<std::vector<LorentzianPeak>>& seeds = std::nullopt);

/// Deepest local minima of a 3-point smoothed trace, at least `min_separation` apart.
std::vector<double> find_dips(const SpectrumTrace& trace, int n_peaks, double min_separation);

struct RabiFit {
  double omega_mhz = 0.0;
  double omega_err = 0.0;
  double t_pi_us = 0.0;  // 1/(2 Omega)
  double t_pi_err = 0.0;
  FitResult fit;
};

/// Fits c + a exp(-k t) cos(2 pi Omega t + phi), seeded from the strongest
/// periodogram bin. Throws FitFailure when no oscillation is detected and
/// InvalidData when the trace spans fewer than 1.5 periods.
RabiFit fit_rabi_frequency(const SpectrumTrace& trace);

// ---------------------------------------------------------------------------
// Concentrations

enum class ConcentrationMethod { kSpectrum, kDecay, kRabi };

struct ConcentrationEstimate {
  Species species = Species::kP1;
  double value_ppb = 0.0;
  /// Standard deviation over peaks for multi-peak estimates, fit error otherwise.
  double uncertainty_ppb = 0.0;
  /// Fit errors propagated through the mean.
  double propagated_error_ppb = 0.0;
  ConcentrationMethod method = ConcentrationMethod::kSpectrum;
  std::vector<double> per_peak_values;
  std::vector<double> per_peak_errors;
  std::vector<double> per_peak_centers;
  bool central_excluded = false;
  /// Signal within noise: value is not significant and upper_bound_ppb applies.
  bool is_upper_bound = false;
  double upper_bound_ppb = 0.0;
  std::vector<std::string> warnings;
};

std::string method_name(ConcentrationMethod m);

/// Parameters held fixed while fitting the DEER model.
struct DeerFixed {
  double omega_mhz = 2.5;
  double t_b_us = 0.2;
  double t_b_delay_us = 20.0;
  double sigma = 0.5;
  double g_a = 2.0;
  double g_b = 2.0;
};

/// A line of the DEER model: seed position, seed width, fixed amplitude.
struct DeerLine {
  double f_r_mhz = 0.0;
  double gamma_mhz = 0.5;
  double amp = 1.0;
};

struct PeakConcentrationFit {
  double n_ppb = 0.0;
  double n_err = 0.0;
  double f_r_mhz = 0.0;
  double gamma_mhz = 0.0;
  FitResult fit;
};

/// Fits exp(-C(n) T_B A P_B(f)) for one line with f_r, G and n free.
PeakConcentrationFit fit_concentration_peak(const SpectrumTrace& trace, const DeerFixed& fixed, const DeerLine& line,
                                            double n_seed_ppb = 100.0);

/// Per-line fits inside f_r +/- window_mhz for every line except
/// `central_index`; aggregate = mean +/- std over the fitted lines.
ConcentrationEstimate fit_concentration_spectrum(const SpectrumTrace& trace, const DeerFixed& fixed,
                                                 const std::vector<DeerLine>& lines, int central_index,
                                                 double window_mhz = 12.0, double n_seed_ppb = 100.0);

struct CentralLineModel {
  /// P1 sub-lines under the central group; amplitudes fixed.
  std::vector<DeerLine> p1_lines;
  /// X seed; amp is the X line amplitude (1 for a bare S = 1/2).
  DeerLine x_line;
  double window_mhz = 15.0;
  std::uint64_t seed = 1;
};

/// Two-species fit of the central group with n_P1 fixed. Free: common P1
/// shift, P1 width, X position, X width, n_X. Multi-start over the X seed.
ConcentrationEstimate fit_central_line_two_species(const SpectrumTrace& trace, double n_p1_fixed_ppb,
                                                   const DeerFixed& fixed, const CentralLineModel& model);

/// Fits a exp(-C(n) P_B T_B) to I_DEER against T_B (x in us).
ConcentrationEstimate fit_deer_decay(const SpectrumTrace& trace, double p_b, const DeerFixed& fixed = {},
                                     Species species = Species::kP1);

struct HahnFit {
  double t2_us = 0.0;
  double t2_err = 0.0;
  double stretch = 0.0;
  double stretch_err = 0.0;
  FitResult fit;
};

/// Fits a exp(-(x/T2)^n) with x = 2 T_A in us.
HahnFit fit_hahn_decay(const SpectrumTrace& trace);

struct EseemFit {
  double f_mhz = 0.0;
  double f_err = 0.0;
  double gamma_n_mhz_per_t = 0.0;
  double gamma_n_err = 0.0;
  FitResult fit;

  /// |gamma_n - reference| <= n_sigma * gamma_n_err.
  bool consistent_with(double reference_mhz_per_t, double n_sigma = 2.0) const;
};

/// Fits a cos(2 pi f x + phi) + C with x = 2 T_A in us; gamma_n = 2 f / B0.
EseemFit fit_eseem(const SpectrumTrace& trace, double b0_mt);

struct SaturationFit {
  double f_sat = 0.0;
  double f_sat_err = 0.0;
  double p_sat = 0.0;
  double p_sat_err = 0.0;
  FitResult fit;
};

/// Fits F_sat P / (P_sat + P) after subtracting `background` (linearly
/// interpolated onto the trace powers) when given.
SaturationFit fit_saturation(const SpectrumTrace& trace, const std::optional<SpectrumTrace>& background = std::nullopt);

struct ValueWithError {
  double value = 0.0;
  double error = 0.0;
};

/// N = F_sat^ens / F_sat^single with first-order error propagation.
ValueWithError nv_count(const SaturationFit& ensemble, const SaturationFit& single);
ValueWithError nv_count(ValueWithError f_sat_ensemble, ValueWithError f_sat_single);

/// counts[sector][dose]: per-dose ratios to `reference_sector`, averaged over doses.
std::vector<double> growth_sector_ratios(const std::vector<std::vector<double>>& counts, std::size_t reference_sector);

struct Aggregate {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation
  double sem = 0.0;
  std::size_t count = 0;
};

Aggregate aggregate(const std::vector<double>& values);

struct DiffusionResult {
  double volume_um3 = 0.0;
  double r_nv_nm = 0.0;
  double d_rms_nm = 0.0;
  double d_nm2_per_s = 0.0;
};

/// V = count / density(n_nv), r from the sphere volume, d = sqrt(r^2 - r_vac^2),
/// D = d^2 / (6 t). Throws InvalidData when r < r_vac.
DiffusionResult diffusion_coefficient(double n_nv_ppb, double count, double r_vac_nm, double anneal_s);
DiffusionResult diffusion_from_volume(double volume_um3, double r_vac_nm, double anneal_s);

struct DoubleIntegral {
  double value = 0.0;
  double baseline_drift = 0.0;
  std::vector<std::string> warnings;
};

/// Double integral of a derivative EPR spectrum. Linear baselines, fitted
/// to the outer `edge_fraction` of points on each side, are removed from
/// the derivative and from its first integral.
DoubleIntegral double_integral(const std::vector<double>& field, const std::vector<double>& derivative,
                               double edge_fraction = 0.1);

/// n = n_ref (DI / m) / (DI_ref / m_ref), returned in ppb for n_ref in ppm.
double epr_concentration(double di_sample, double mass_sample_mg, double di_ref, double mass_ref_mg, double n_ref_ppm);

}  // namespace nvdeer
