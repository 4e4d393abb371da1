#pragma once

#include <cstdint>
#include <vector>

namespace nvdeer {

struct LorentzianPeak {
  double f_r_mhz = 0.0;
  double gamma_mhz = 1.0;  // half width at half maximum
  double amp = 1.0;
};

/// Lorentzian lines whose amplitudes sum to one.
class LorentzianPeakSet {
 public:
  LorentzianPeakSet() = default;
  /// Throws InvalidArgument unless gamma > 0, f_r finite and sum(amp) = 1 to 1e-9.
  explicit LorentzianPeakSet(std::vector<LorentzianPeak> peaks);
  /// Rescales the amplitudes to sum to one.
  static LorentzianPeakSet normalized(std::vector<LorentzianPeak> peaks);

  const std::vector<LorentzianPeak>& peaks() const { return peaks_; }
  std::size_t size() const { return peaks_.size(); }

 private:
  std::vector<LorentzianPeak> peaks_;
};

/// Spectral density sum_i (A_i/pi) G_i / (G_i^2 + (xi - f_i)^2), in 1/MHz.
double lorentzian(const LorentzianPeakSet& peaks, double xi_mhz);
double lorentzian(const LorentzianPeak& peak, double xi_mhz);

/// Rabi formula: O^2/(O^2+D^2) sin^2(2 pi sqrt(O^2+D^2) t/2).
double rabi_probability(double omega_mhz, double detuning_mhz, double t_b_us);

/// A * int L_unit(xi) P_R(f_b - xi) dxi for one line. Adaptive Gauss-Kronrod
/// on xi = f_r + G tan(theta), absolute tolerance 1e-6.
/// Throws NumericFailure if the error estimate stays above tolerance.
double peak_transfer(const LorentzianPeak& peak, double omega_mhz, double f_b_mhz, double t_b_us);

/// P_B(f_b, t_b) = (L * P_R)(f_b, t_b).
double population_transfer(const LorentzianPeakSet& peaks, double omega_mhz, double f_b_mhz, double t_b_us);

/// 4 pi mu0 muB^2 g_a g_b |sigma| / (9 sqrt(3) hbar), in m^3/s.
double deer_rate_per_density(double g_a, double g_b, double sigma);

/// Rate of the DEER decay exponent per unit P_B, in 1/us, for n in ppb.
double deer_rate_per_us(double n_ppb, double g_a, double g_b, double sigma);

struct DeerModelParams {
  double g_a = 2.0;
  double g_b = 2.0;
  double sigma_b = 0.5;
  double n_b_ppb = 0.0;
  double t_b_us = 0.2;        // DEER pulse length
  double t_b_delay_us = 20.0;  // T_B
  double omega_mhz = 2.5;
  LorentzianPeakSet peaks;

  void validate() const;
};

/// exp(-C T_B P_B(f_b)).
double deer_signal(const DeerModelParams& params, double f_b_mhz);

/// Same with P_B supplied directly.
double deer_signal_from_transfer(double p_b, double n_ppb, double t_b_delay_us, double sigma = 0.5,
                                 double g_a = 2.0, double g_b = 2.0);

/// Concentration (ppb) producing I_DEER = 1 - min_contrast with P_B = line_amp.
double detection_limit(double min_contrast, double t_b_delay_us, double sigma, double line_amp,
                       double g_a = 2.0, double g_b = 2.0);

struct NormalizedSignal {
  double i_nv = 0.0;
  double i_nv_off = 0.0;
  double i_deer = 0.0;
};

/// Alternating-phase readout: I = 1/2 (sig+/ref+ - sig-/ref-), then I/I_off.
/// Throws InvalidData when a reference window is empty.
NormalizedSignal normalize_signal(double pl_sig_plus, double pl_ref_plus, double pl_sig_minus,
                                  double pl_ref_minus, double i_off);

/// Readout window inside a photon-arrival histogram, in bins.
struct CountWindow {
  std::size_t start = 0;
  std::size_t length = 0;
};

/// Counts in the signal window divided by counts in the reference window.
double windowed_ratio(const std::vector<double>& histogram, CountWindow signal, CountWindow reference);

}  // namespace nvdeer
