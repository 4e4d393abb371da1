#include "nvdeer/acceptance.hpp"

#include "nvdeer/analytic.hpp"
#include "nvdeer/dynamics.hpp"
#include "nvdeer/errors.hpp"
#include "nvdeer/fitting.hpp"
#include "nvdeer/photophysics.hpp"
#include "nvdeer/pipeline.hpp"
#include "nvdeer/units.hpp"

#include <boost/math/quadrature/gauss_kronrod.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <random>
#include <sstream>

namespace nvdeer {

namespace {

namespace fs = std::filesystem;
using units::kPi;

struct Outcome {
  bool passed = false;
  std::string detail;
};

std::string f(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*g", digits, v);
  return buf;
}

FieldConfiguration standard_field() {
  FieldConfiguration field;
  field.b0_mt = 37.2;
  field.tilt_deg = 0.1;
  field.rabi_mhz = 2.5;
  return field;
}

Outcome sigma_reproduction() {
  const auto field = standard_field();
  const auto member = SpinSystem::nv(Orientation::of(OrientationLabel::kBar111), 0.25);
  const auto rotated = apply_orientation(member, field);
  const CMatrix h = static_hamiltonian(member, rotated.b0_mt);
  const double sigma = compute_sigma(h, spin_operators(1.0), 2, 3);
  return {std::abs(sigma - 0.87) <= 0.01, "sigma_23 = " + f(sigma) + " (target 0.87 +/- 0.01)"};
}

Outcome photophysics_polarization() {
  const auto field = standard_field();
  const Vec3 b_nv = Orientation::of(OrientationLabel::kBar111).rotation() * field.b0_vector();
  const Matrix7 alpha2 = mixing_coefficients(b_nv);
  PulseTrain train;  // 5 us on, 160 us period, 15 pulses
  auto params = RateModelParams::standard(0.03);
  params.alpha2 = alpha2;
  const auto ss = steady_state(params, train, PopulationVector::uniform_ground());
  const auto g = ss.readout.ground_fractions();
  bool ok = std::abs(g[0] - 0.40) <= 0.01 && std::abs(g[1] - 0.30) <= 0.01 && std::abs(g[2] - 0.30) <= 0.01;
  std::string detail = "n = (" + f(g[0]) + ", " + f(g[1]) + ", " + f(g[2]) + ") at beta 0.03; pulses to converge:";
  for (double beta : {0.001, 0.003, 0.01, 0.03, 0.1}) {
    auto p = RateModelParams::standard(beta);
    p.alpha2 = alpha2;
    const int n = steady_state(p, train, PopulationVector::uniform_ground()).pulses_to_converge;
    ok = ok && n >= 1 && n <= 15;
    detail += " " + f(beta, 2) + "->" + std::to_string(n);
  }
  return {ok, detail + " (limit 15)"};
}

Outcome detection_limit_check() {
  const double n = detection_limit(0.05, 100.0, 0.5, 1.0 / 3.0);
  return {std::abs(n - 5.0) <= 0.5, "n_min = " + f(n) + " ppb (target 5 +/- 10%)"};
}

Outcome diffusion_chain() {
  const auto d = diffusion_from_volume(4.8e-2, 37.5, 7200.0);
  const bool ok = std::abs(d.r_nv_nm - 226.0) <= 2.0 && d.d_nm2_per_s >= 1.1 && d.d_nm2_per_s <= 1.3;
  return {ok, "r_nv = " + f(d.r_nv_nm) + " nm (226 +/- 2), D = " + f(d.d_nm2_per_s) + " nm^2/s ([1.1, 1.3])"};
}

Outcome eseem_gamma() {
  constexpr double kF = 0.1985;  // MHz
  SpectrumTrace t;
  std::mt19937_64 rng(7);
  std::normal_distribution<double> noise(0.0, 0.01);
  for (int i = 0; i <= 160; ++i) {
    const double x = 8.0 / kF * i / 160.0;
    t.x.push_back(x);
    t.y.push_back(0.1 * std::cos(2.0 * kPi * kF * x) + 0.8 + noise(rng));
  }
  const auto fit = fit_eseem(t, 37.2);
  const bool ok = std::abs(fit.gamma_n_mhz_per_t - 10.68) <= 0.05;
  return {ok, "gamma_n = " + f(fit.gamma_n_mhz_per_t, 5) + " +/- " + f(fit.gamma_n_err, 2) +
                  " MHz/T (target 10.68 +/- 0.05)"};
}

Outcome spectrum_agreement() {
  const auto field = standard_field();
  const auto ensemble = p1_ensemble();
  const double t_b = 0.2, t_delay = 20.0, n_ppb = 200.0;
  const auto grid = linear_grid(900.0, 1200.0, 0.5);
  const auto sim = simulate_deer_spectrum(ensemble, field, t_b, grid);
  const auto lines = spectral_lines(ensemble, field);
  const double k = deer_rate_per_us(n_ppb, 2.0, 2.0, 0.5) * t_delay;
  double worst = 0.0, at = 0.0;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    double p = 0.0;
    for (const auto& l : lines) {
      // narrow lines stand in for the delta-like simulated resonances
      p += l.amp * peak_transfer({l.freq_mhz, 0.01, 1.0}, field.rabi_mhz * l.rabi_factor, grid[i], t_b);
    }
    const double d = std::abs(std::exp(-k * p) - std::exp(-k * sim.y[i]));
    if (d > worst) {
      worst = d;
      at = grid[i];
    }
  }
  return {worst < 0.02, "max |dI| = " + f(worst, 3) + " at " + f(at, 6) + " MHz over " + std::to_string(grid.size()) +
                            " points (limit 0.02)"};
}

Outcome rabi_oracle() {
  constexpr double kOmega = 2.0, kFb = 1042.0;
  const auto ops = spin_operators(0.5);
  double worst = 0.0;
  for (double detuning : {0.0, kOmega, 3.0 * kOmega}) {
    FieldConfiguration field;
    field.b0_mt = (kFb - detuning) / units::kGammaE;
    field.rabi_mhz = kOmega;
    field.drive_freq_mhz = kFb;
    const CMatrix h0 = build_x(field.b0_vector());
    const auto eig = eigensystem(h0);
    const auto rho0 = DensityMatrix::pure(eig.vectors.col(0));
    const auto drive = make_drive(field, ops);
    for (int i = 1; i <= 20; ++i) {
      const double t = 0.05 * i;
      const auto rho = propagate(h0, drive, rho0, t, 1e-10);
      const double p_lab = transition_probability(rho0, rho);
      worst = std::max(worst, std::abs(p_lab - rabi_probability(kOmega, detuning, t)));
    }
  }
  return {worst < 1e-2, "max |P_lab - P_rabi| = " + f(worst, 3) + " over detunings {0, 2, 6} MHz (limit 1e-2)"};
}

Outcome round_trip(const fs::path& work) {
  RunConfig base;
  base.n_p1_ppb = 200.0;
  base.n_x_ppb = 13.0;
  base.noise = 0.01;
  base.seed = 1;
  RunConfig spectrum = base;
  spectrum.experiment = Experiment::kDeerSpectrum;
  spectrum.output_dir = work / "spectrum";
  RunConfig rabi = base;
  rabi.experiment = Experiment::kDeerRabi;
  rabi.output_dir = work / "rabi";
  cmd_simulate(spectrum);
  cmd_simulate(rabi);
  RunConfig fit = base;
  fit.output_dir = work / "fit";
  const auto res = cmd_fit(fit, {spectrum.output_dir / "deer_spectrum.csv", rabi.output_dir / "deer_rabi.csv"});
  const double n_p1 = std::stod(*res.report.get("n_p1_ppb"));
  const double n_x = std::stod(*res.report.get("n_x_ppb"));
  const bool ok = std::abs(n_p1 / 200.0 - 1.0) <= 0.05 && std::abs(n_x / 13.0 - 1.0) <= 0.20;
  return {ok, "n_P1 = " + f(n_p1) + " ppb (200 +/- 5%), n_X = " + f(n_x) + " ppb (13 +/- 20%)"};
}

// Property suites; each returns an empty string on success.
std::string spin_algebra_property() {
  for (int twice = 1; twice <= 7; ++twice) {
    const double s = 0.5 * twice;
    const auto ops = spin_operators(s);
    const auto id = CMatrix::Identity(ops.dim(), ops.dim());
    const std::complex<double> i(0.0, 1.0);
    const double defect = std::max({(ops.sx - ops.sx.adjoint()).cwiseAbs().maxCoeff(),
                                    (ops.sy * ops.sz - ops.sz * ops.sy - i * ops.sx).cwiseAbs().maxCoeff(),
                                    (ops.sx * ops.sy - ops.sy * ops.sx - i * ops.sz).cwiseAbs().maxCoeff(),
                                    (ops.sz * ops.sx - ops.sx * ops.sz - i * ops.sy).cwiseAbs().maxCoeff(),
                                    (ops.sx * ops.sx + ops.sy * ops.sy + ops.sz * ops.sz - s * (s + 1.0) * id)
                                        .cwiseAbs()
                                        .maxCoeff()});
    if (defect > 1e-12) return "spin algebra defect " + f(defect) + " at S = " + f(s);
  }
  return "";
}

std::string density_property() {
  const auto field = [] {
    auto fc = standard_field();
    fc.drive_freq_mhz = 961.58;
    return fc;
  }();
  const auto member = SpinSystem::p1(Orientation::of(OrientationLabel::kBar111), 0.25);
  const auto rotated = apply_orientation(member, field);
  const CMatrix h0 = static_hamiltonian(member, rotated.b0_mt);
  auto drive_field = field;
  drive_field.drive_dir = rotated.drive_dir;
  const auto drive = make_drive(drive_field, electron_operators(member));
  std::mt19937_64 rng(11);
  std::normal_distribution<double> nd;
  CVector psi(h0.rows());
  for (Eigen::Index k = 0; k < psi.size(); ++k) psi(k) = {nd(rng), nd(rng)};
  const auto rho0 = DensityMatrix::pure(psi.normalized());
  const auto rho = propagate(h0, drive, rho0, 0.3, 1e-10);
  const CMatrix& m = rho.matrix();
  const double herm = (m - m.adjoint()).cwiseAbs().maxCoeff();
  const double min_eig = Eigen::SelfAdjointEigenSolver<CMatrix>(m).eigenvalues().minCoeff();
  if (std::abs(rho.trace() - 1.0) > 1e-8) return "trace drift " + f(rho.trace() - 1.0);
  if (herm > 1e-10) return "hermiticity defect " + f(herm);
  if (min_eig < -1e-8) return "negative eigenvalue " + f(min_eig);
  if (std::abs(rho.purity() - 1.0) > 1e-7) return "purity drift " + f(rho.purity() - 1.0);
  return "";
}

std::string lorentzian_property() {
  const auto peaks = LorentzianPeakSet::normalized({{961.6, 0.3, 3.0}, {1050.0, 1.2, 1.0}, {1132.7, 0.05, 3.0}});
  constexpr double kLo = -1000.0, kHi = 3000.0;
  std::vector<double> edges{kLo, kHi};
  for (const auto& p : peaks.peaks()) {
    for (double k : {-10.0, -1.0, 0.0, 1.0, 10.0}) edges.push_back(p.f_r_mhz + k * p.gamma_mhz);
  }
  std::sort(edges.begin(), edges.end());
  auto g = [&](double x) { return lorentzian(peaks, x); };
  double total = 0.0;
  for (std::size_t k = 0; k + 1 < edges.size(); ++k) {
    total += boost::math::quadrature::gauss_kronrod<double, 61>::integrate(g, edges[k], edges[k + 1], 20, 1e-13);
  }
  // tails beyond the integration range are analytic
  for (const auto& p : peaks.peaks()) {
    total += p.amp / kPi * (kPi - std::atan((kHi - p.f_r_mhz) / p.gamma_mhz) + std::atan((kLo - p.f_r_mhz) / p.gamma_mhz));
  }
  if (std::abs(total - 1.0) > 1e-8) return "Lorentzian area " + f(total, 12);
  return "";
}

std::string monotonicity_property() {
  DeerModelParams p;
  p.peaks = LorentzianPeakSet({{1000.0, 0.5, 1.0}});
  for (double f_b : {990.0, 999.5, 1000.0, 1003.0}) {
    double last = 1.0;
    for (double n : {0.0, 10.0, 50.0, 200.0, 1000.0}) {
      p.n_b_ppb = n;
      const double s = deer_signal(p, f_b);
      if (s > last + 1e-15 || s < 0.0 || s > 1.0) return "deer_signal not monotone in n at f_B = " + f(f_b);
      last = s;
    }
    p.n_b_ppb = 200.0;
    last = 1.0;
    for (double t : {0.0, 5.0, 20.0, 80.0}) {
      p.t_b_delay_us = t;
      const double s = deer_signal(p, f_b);
      if (s > last + 1e-15) return "deer_signal not monotone in T_B at f_B = " + f(f_b);
      last = s;
    }
    p.t_b_delay_us = 20.0;
  }
  return "";
}

std::string determinism_property() {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> nd(0.0, 0.02);
  SpectrumTrace t;
  for (int i = 0; i < 200; ++i) {
    const double x = 950.0 + 0.25 * i;
    t.x.push_back(x);
    t.y.push_back(1.0 - 0.4 / (1.0 + (x - 975.0) * (x - 975.0)) + nd(rng));
  }
  LeastSquaresProblem prob;
  prob.names = {"c", "d", "f", "g"};
  prob.initial = Eigen::Vector4d(1.0, 0.3, 974.0, 1.5);
  prob.lower = Eigen::Vector4d(0.0, 0.0, 950.0, 0.01);
  prob.upper = Eigen::Vector4d(2.0, 2.0, 1000.0, 20.0);
  prob.scale = Eigen::Vector4d(0.1, 0.1, 2.0, 0.5);
  prob.residuals = [&](const Eigen::VectorXd& p) {
    Eigen::VectorXd r(static_cast<Eigen::Index>(t.size()));
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double d = t.x[i] - p(2);
      r(static_cast<Eigen::Index>(i)) = p(0) - p(1) * p(3) * p(3) / (p(3) * p(3) + d * d) - t.y[i];
    }
    return r;
  };
  const auto a = least_squares_multistart(prob, 42);
  const auto b = least_squares_multistart(prob, 42);
  if (a.values != b.values || a.std_errors != b.std_errors) return "multistart fit not deterministic";
  const auto pa = fit_lorentzian_peaks(t, 1);
  const auto pb = fit_lorentzian_peaks(t, 1);
  if (pa.fit.values != pb.fit.values) return "peak fit not deterministic";
  return "";
}

Outcome property_suites() {
  const std::vector<std::pair<std::string, std::function<std::string()>>> suites{
      {"spin algebra", spin_algebra_property},
      {"density matrix", density_property},
      {"Lorentzian normalisation", lorentzian_property},
      {"deer_signal monotonicity", monotonicity_property},
      {"fit determinism", determinism_property},
  };
  Outcome out{true, ""};
  for (const auto& [name, run] : suites) {
    std::string msg;
    try {
      msg = run();
    } catch (const std::exception& e) {
      msg = std::string("threw: ") + e.what();
    }
    out.detail += (out.detail.empty() ? "" : "; ") + name + (msg.empty() ? " ok" : " FAILED (" + msg + ")");
    out.passed = out.passed && msg.empty();
  }
  return out;
}

}  // namespace

std::vector<CriterionResult> run_acceptance(const AcceptanceOptions& options) {
  fs::path work = options.work_dir;
  bool cleanup = false;
  if (work.empty()) {
    const auto stamp = std::chrono::steady_clock::now().time_since_epoch().count();
    work = fs::temp_directory_path() / ("nvdeer_acceptance_" + std::to_string(stamp));
    cleanup = true;
  }
  const std::vector<std::tuple<int, std::string, double, std::function<Outcome()>>> criteria{
      {1, "sigma reproduction", 1.0, sigma_reproduction},
      {2, "photophysics polarisation", 5.0, photophysics_polarization},
      {3, "detection limit", 1.0, detection_limit_check},
      {4, "diffusion chain", 1.0, diffusion_chain},
      {5, "ESEEM gyromagnetic ratio", 1.0, eseem_gamma},
      {6, "simulated vs analytic spectrum", 600.0, spectrum_agreement},
      {7, "Rabi oracle", 30.0, rabi_oracle},
      {8, "end-to-end round trip", 300.0, [&] { return round_trip(work); }},
      {9, "property suites", 120.0, property_suites},
  };
  std::vector<CriterionResult> results;
  for (const auto& [id, name, limit, run] : criteria) {
    if (!options.only.empty() && std::find(options.only.begin(), options.only.end(), id) == options.only.end()) {
      continue;
    }
    CriterionResult r;
    r.id = id;
    r.name = name;
    r.time_limit_seconds = limit;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      const auto o = run();
      r.passed = o.passed;
      r.detail = o.detail;
    } catch (const std::exception& e) {
      r.passed = false;
      r.detail = std::string("error: ") + e.what();
    }
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (r.seconds > limit) {
      r.passed = false;
      r.detail += "; exceeded time limit of " + f(limit) + " s";
    }
    results.push_back(r);
  }
  if (cleanup) {
    std::error_code ec;
    fs::remove_all(work, ec);
  }
  return results;
}

std::string format_acceptance(const std::vector<CriterionResult>& results) {
  std::ostringstream os;
  char buf[128];
  for (const auto& r : results) {
    std::snprintf(buf, sizeof(buf), "%s  [%d] %-31s %8.3f s  ", r.passed ? "PASS" : "FAIL", r.id, r.name.c_str(),
                  r.seconds);
    os << buf << r.detail << "\n";
  }
  return os.str();
}

}  // namespace nvdeer
