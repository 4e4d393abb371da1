#include "nvdeer/analytic.hpp"

#include "nvdeer/errors.hpp"
#include "nvdeer/units.hpp"

#include <boost/math/quadrature/gauss_kronrod.hpp>

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>
#include <numeric>

namespace nvdeer {

using units::kPi;

LorentzianPeakSet::LorentzianPeakSet(std::vector<LorentzianPeak> peaks) : peaks_(std::move(peaks)) {
  double total = 0.0;
  for (const auto& p : peaks_) {
    if (!(p.gamma_mhz > 0.0)) throw InvalidArgument("Lorentzian width must be positive");
    if (!std::isfinite(p.f_r_mhz)) throw InvalidArgument("Lorentzian center must be finite");
    total += p.amp;
  }
  if (!peaks_.empty() && std::abs(total - 1.0) > 1e-9) {
    throw InvalidArgument("Lorentzian amplitudes must sum to 1");
  }
}

LorentzianPeakSet LorentzianPeakSet::normalized(std::vector<LorentzianPeak> peaks) {
  double total = 0.0;
  for (const auto& p : peaks) total += p.amp;
  if (!(total > 0.0)) throw InvalidArgument("Lorentzian amplitudes must have a positive sum");
  for (auto& p : peaks) p.amp /= total;
  return LorentzianPeakSet(std::move(peaks));
}

double lorentzian(const LorentzianPeak& p, double xi) {
  const double d = xi - p.f_r_mhz;
  return p.amp / kPi * p.gamma_mhz / (p.gamma_mhz * p.gamma_mhz + d * d);
}

double lorentzian(const LorentzianPeakSet& peaks, double xi) {
  double s = 0.0;
  for (const auto& p : peaks.peaks()) s += lorentzian(p, xi);
  return s;
}

double rabi_probability(double omega, double detuning, double t_b) {
  const double w2 = omega * omega + detuning * detuning;
  if (w2 == 0.0) return 0.0;
  const double s = std::sin(kPi * std::sqrt(w2) * t_b);
  return omega * omega / w2 * s * s;
}

double peak_transfer(const LorentzianPeak& peak, double omega, double f_b, double t_b) {
  constexpr double kTolerance = 1e-6;
  if (peak.amp == 0.0 || omega == 0.0 || t_b == 0.0) return 0.0;
  // With xi = f_r + G tan(theta), L_unit(xi) dxi = dtheta / pi. Detunings are
  // measured from f_r, so the Rabi window sits at u = offset.
  const double g = peak.gamma_mhz;
  const double offset = f_b - peak.f_r_mhz;
  const double period = 1.0 / t_b;  // sin^2 period in detuning far off resonance
  const double step = 0.5 * period;
  const double reach_b = std::max(50.0 * g, 40.0 * std::max(omega, period));
  const double reach_r = std::max(50.0 * g, 4.0 * period);

  // break points in u = xi - f_r
  std::vector<double> breaks;
  auto add = [&](double u) { breaks.push_back(u); };
  for (int k = 0; k <= 8; ++k) {
    add(offset + k * step);
    add(offset - k * step);
  }
  for (double d = 8.0 * step * 1.5; d < reach_b; d *= 1.5) {
    add(offset + d);
    add(offset - d);
  }
  add(offset + reach_b);
  add(offset - reach_b);
  add(0.0);
  for (double d = g; d < reach_r; d *= 3.0) {
    add(d);
    add(-d);
  }
  for (double d = step; d < reach_r; d += step) {
    add(d);
    add(-d);
  }
  add(reach_r);
  add(-reach_r);

  // exact region: |u - offset| <= reach_b or |u| <= reach_r
  auto exact_region = [&](double u) { return std::abs(u - offset) <= reach_b || std::abs(u) <= reach_r; };
  std::sort(breaks.begin(), breaks.end());
  breaks.erase(std::unique(breaks.begin(), breaks.end()), breaks.end());

  std::vector<double> ends{-kPi / 2.0};
  for (double u : breaks) ends.push_back(std::atan(u / g));
  ends.push_back(kPi / 2.0);
  std::sort(ends.begin(), ends.end());
  ends.erase(std::unique(ends.begin(), ends.end(), [](double a, double b) { return b - a < 1e-15; }), ends.end());

  auto oscillating = [&](double theta) { return rabi_probability(omega, offset - g * std::tan(theta), t_b) / kPi; };
  // sin^2 replaced by its mean; used only far from both f_b and f_r
  auto averaged = [&](double theta) {
    const double d = offset - g * std::tan(theta);
    return 0.5 * omega * omega / (omega * omega + d * d) / kPi;
  };

  // A panel is bisected while its Kronrod estimate exceeds its share of half
  // the absolute budget, shared in proportion to theta width.
  using GK = boost::math::quadrature::gauss_kronrod<double, 15>;
  double total = 0.0;
  double error = 0.0;
  auto integrate = [&](auto&& f, double a, double b, auto&& self, int depth) -> void {
    double err = 0.0;
    const double v = GK::integrate(f, a, b, 0, 0.0, &err);
    if (err <= std::max(0.5 * kTolerance * (b - a) / kPi, 1e-13) || depth >= 16) {
      total += v;
      error += err;
      return;
    }
    const double m = 0.5 * (a + b);
    self(f, a, m, self, depth + 1);
    self(f, m, b, self, depth + 1);
  };
  for (std::size_t k = 0; k + 1 < ends.size(); ++k) {
    const double a = ends[k], b = ends[k + 1];
    if (exact_region(g * std::tan(0.5 * (a + b)))) {
      integrate(oscillating, a, b, integrate, 0);
    } else {
      integrate(averaged, a, b, integrate, 0);
    }
  }
  if (!(error <= kTolerance) || !std::isfinite(total)) {
    throw NumericFailure("population transfer quadrature did not converge (error estimate " +
                         std::to_string(error) + ")");
  }
  return peak.amp * total;
}

double population_transfer(const LorentzianPeakSet& peaks, double omega, double f_b, double t_b) {
  double p = 0.0;
  for (const auto& peak : peaks.peaks()) p += peak_transfer(peak, omega, f_b, t_b);
  return std::clamp(p, 0.0, 1.0);
}

double deer_rate_per_density(double g_a, double g_b, double sigma) {
  using namespace units;
  return 4.0 * kPi * kMu0 * kBohrMagneton * kBohrMagneton * g_a * g_b * std::abs(sigma) /
         (9.0 * std::sqrt(3.0) * kHbar);
}

double deer_rate_per_us(double n_ppb, double g_a, double g_b, double sigma) {
  return deer_rate_per_density(g_a, g_b, sigma) * units::ppb_to_per_m3(n_ppb) * 1e-6;
}

void DeerModelParams::validate() const {
  if (!(n_b_ppb >= 0.0)) throw InvalidArgument("DEER model: n_b must be >= 0");
  if (!(t_b_delay_us >= 0.0)) throw InvalidArgument("DEER model: T_B must be >= 0");
  if (!(t_b_us >= 0.0)) throw InvalidArgument("DEER model: t_b must be >= 0");
  if (!(omega_mhz >= 0.0)) throw InvalidArgument("DEER model: Omega must be >= 0");
}

double deer_signal_from_transfer(double p_b, double n_ppb, double t_b_delay_us, double sigma, double g_a,
                                 double g_b) {
  return std::exp(-deer_rate_per_us(n_ppb, g_a, g_b, sigma) * t_b_delay_us * p_b);
}

double deer_signal(const DeerModelParams& params, double f_b) {
  params.validate();
  const double p_b = population_transfer(params.peaks, params.omega_mhz, f_b, params.t_b_us);
  return deer_signal_from_transfer(p_b, params.n_b_ppb, params.t_b_delay_us, params.sigma_b, params.g_a,
                                   params.g_b);
}

double detection_limit(double min_contrast, double t_b_delay_us, double sigma, double line_amp, double g_a,
                       double g_b) {
  if (!(min_contrast > 0.0 && min_contrast < 1.0)) {
    throw InvalidArgument("detection_limit: contrast must lie in (0, 1)");
  }
  if (!(t_b_delay_us > 0.0 && line_amp > 0.0 && sigma != 0.0)) {
    throw InvalidArgument("detection_limit: T_B, line amplitude and sigma must be positive");
  }
  const double rate_per_ppb = deer_rate_per_us(1.0, g_a, g_b, sigma);
  return -std::log1p(-min_contrast) / (rate_per_ppb * t_b_delay_us * line_amp);
}

NormalizedSignal normalize_signal(double pl_sig_plus, double pl_ref_plus, double pl_sig_minus,
                                  double pl_ref_minus, double i_off) {
  if (!(pl_ref_plus > 0.0) || !(pl_ref_minus > 0.0)) {
    throw InvalidData("normalize_signal: reference window has no counts");
  }
  if (i_off == 0.0) throw InvalidData("normalize_signal: off-resonant reference signal is zero");
  NormalizedSignal s;
  s.i_nv = 0.5 * (pl_sig_plus / pl_ref_plus - pl_sig_minus / pl_ref_minus);
  s.i_nv_off = i_off;
  s.i_deer = s.i_nv / i_off;
  return s;
}

double windowed_ratio(const std::vector<double>& histogram, CountWindow signal, CountWindow reference) {
  auto sum = [&](CountWindow w) {
    if (w.start + w.length > histogram.size()) throw InvalidData("readout window exceeds histogram");
    return std::accumulate(histogram.begin() + w.start, histogram.begin() + w.start + w.length, 0.0);
  };
  const double ref = sum(reference);
  if (!(ref > 0.0)) throw InvalidData("reference window has no counts");
  return sum(signal) / ref;
}

}  // namespace nvdeer
