#include "nvdeer/errors.hpp"
#include "nvdeer/fitting.hpp"
#include "nvdeer/units.hpp"

#include <doctest.h>

#include <cmath>
#include <numeric>
#include <random>

using namespace nvdeer;

namespace {

SpectrumTrace make_trace(const std::vector<double>& x, const auto& f, double noise = 0.0, std::uint64_t seed = 1,
                         bool relative = false) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  SpectrumTrace t;
  for (double xi : x) {
    const double y = f(xi);
    const double s = relative ? noise * std::abs(y) : noise;
    t.x.push_back(xi);
    t.y.push_back(y + s * n(rng));
    if (noise > 0.0) t.sigma.push_back(s);
  }
  return t;
}

std::vector<double> grid(double lo, double hi, std::size_t n) {
  std::vector<double> g(n);
  for (std::size_t k = 0; k < n; ++k) g[k] = lo + (hi - lo) * static_cast<double>(k) / static_cast<double>(n - 1);
  return g;
}

double relative_residual(const FitResult& fit, const SpectrumTrace& t) {
  double norm = 0.0;
  for (double y : t.y) norm += y * y;
  return fit.residual_norm / std::sqrt(norm);
}

double dip(double x, double f, double g, double d) { return d * g * g / (g * g + (x - f) * (x - f)); }

// P1 lines at 37.2 mT with a 0.1 degree tilt; the central pair forms one group.
const std::vector<LorentzianPeak> kP1Lines{{931.857, 1.0, 1.0 / 12.0},  {961.581, 1.0, 0.25},
                                           {1048.875, 1.0, 1.0 / 12.0}, {1051.369, 1.0, 0.25},
                                           {1132.717, 1.0, 0.25},       {1159.548, 1.0, 1.0 / 12.0}};

DeerFixed standard_fixed() { return DeerFixed{2.5, 0.2, 20.0, 0.5, 2.0, 2.0}; }

/// I_DEER of P1 (and optionally X) written from the analytic model.
double deer_model(double f, double n_p1, double n_x, double shift = 0.0) {
  const auto fx = standard_fixed();
  double p1 = 0.0;
  for (const auto& l : kP1Lines) p1 += l.amp * peak_transfer({l.f_r_mhz + shift, l.gamma_mhz, 1.0}, fx.omega_mhz, f, fx.t_b_us);
  const double px = n_x > 0.0 ? peak_transfer({units::kGammaE * 37.2 + shift, 1.0, 1.0}, fx.omega_mhz, f, fx.t_b_us) : 0.0;
  const double k = deer_rate_per_us(1.0, fx.g_a, fx.g_b, fx.sigma) * fx.t_b_delay_us;
  return std::exp(-k * (n_p1 * p1 + n_x * px));
}

std::vector<DeerLine> group_lines(double shift = 0.0) {
  return {{931.857 + shift, 1.0, 1.0 / 12.0},
          {961.581 + shift, 1.0, 0.25},
          {1050.7 + shift, 1.0, 1.0 / 3.0},
          {1132.717 + shift, 1.0, 0.25},
          {1159.548 + shift, 1.0, 1.0 / 12.0}};
}

std::vector<double> spectrum_grid(double shift = 0.0) {
  std::vector<double> g;
  for (double f = 915.0; f <= 1175.0; f += 0.5) g.push_back(f + shift);
  return g;
}

}  // namespace

TEST_CASE("least squares: noiseless exponential converges to machine level") {
  const auto t = make_trace(grid(0.0, 5.0, 40), [](double x) { return 2.0 * std::exp(-0.7 * x) + 0.1; });
  LeastSquaresProblem p;
  p.names = {"a", "k", "c"};
  p.initial = Eigen::Vector3d(1.0, 0.3, 0.0);
  p.lower = Eigen::Vector3d::Constant(-1e9);
  p.upper = Eigen::Vector3d::Constant(1e9);
  p.residuals = [&](const Eigen::VectorXd& q) {
    Eigen::VectorXd r(t.size());
    for (std::size_t i = 0; i < t.size(); ++i) r(i) = q(0) * std::exp(-q(1) * t.x[i]) + q(2) - t.y[i];
    return r;
  };
  const auto fit = least_squares(p);
  CHECK(fit.converged);
  CHECK(fit.value("a") == doctest::Approx(2.0).epsilon(1e-8));
  CHECK(fit.value("k") == doctest::Approx(0.7).epsilon(1e-8));
  CHECK(relative_residual(fit, t) < 1e-10);
  CHECK((fit.std_errors.array() >= 0.0).all());
  CHECK_THROWS_AS(fit.value("nope"), InvalidArgument);
}

TEST_CASE("least squares: bounds are respected") {
  const auto t = make_trace(grid(0.0, 1.0, 20), [](double x) { return 0.5 * x; });
  LeastSquaresProblem p;
  p.names = {"slope"};
  p.initial = Eigen::VectorXd::Constant(1, 2.0);
  p.lower = Eigen::VectorXd::Constant(1, 1.0);
  p.upper = Eigen::VectorXd::Constant(1, 3.0);
  p.residuals = [&](const Eigen::VectorXd& q) {
    Eigen::VectorXd r(t.size());
    for (std::size_t i = 0; i < t.size(); ++i) r(i) = q(0) * t.x[i] - t.y[i];
    return r;
  };
  const auto fit = least_squares(p);
  CHECK(fit.values(0) == doctest::Approx(1.0));
  CHECK(fit.iterations < 50);
}

TEST_CASE("multistart is deterministic for a given seed") {
  const auto t = make_trace(grid(0.0, 6.0, 60), [](double x) { return std::sin(1.3 * x) + 0.2 * x; }, 0.05, 3);
  LeastSquaresProblem p;
  p.names = {"w", "s"};
  p.initial = Eigen::Vector2d(1.0, 0.0);
  p.lower = Eigen::Vector2d(0.1, -5.0);
  p.upper = Eigen::Vector2d(5.0, 5.0);
  p.residuals = [&](const Eigen::VectorXd& q) {
    Eigen::VectorXd r(t.size());
    for (std::size_t i = 0; i < t.size(); ++i) r(i) = std::sin(q(0) * t.x[i]) + q(1) * t.x[i] - t.y[i];
    return r;
  };
  const auto a = least_squares_multistart(p, 42);
  const auto b = least_squares_multistart(p, 42);
  CHECK(a.values == b.values);
  CHECK(a.values(0) == doctest::Approx(1.3).epsilon(0.01));
}

TEST_CASE("Lorentzian peaks: noiseless single dip") {
  const auto t = make_trace(grid(990.0, 1010.0, 201), [](double x) { return 1.0 - dip(x, 1001.3, 1.7, 0.2); });
  const auto r = fit_lorentzian_peaks(t, 1);
  CHECK(r.peaks.peaks()[0].f_r_mhz == doctest::Approx(1001.3).epsilon(1e-9));
  CHECK(std::abs(r.peaks.peaks()[0].gamma_mhz - 1.7) < 1e-6);
  CHECK(std::abs(r.depths[0] - 0.2) < 1e-6);
  CHECK(std::abs(r.baseline - 1.0) < 1e-6);
  CHECK(relative_residual(r.fit, t) < 1e-10);
}

TEST_CASE("Lorentzian peaks: five P1 groups with 1% noise") {
  const double centres[5] = {931.857, 961.581, 1050.1, 1132.717, 1159.548};
  const double depths[5] = {0.04, 0.10, 0.12, 0.10, 0.04};
  const auto t = make_trace(
      grid(915.0, 1175.0, 1041),
      [&](double x) {
        double y = 1.0;
        for (int k = 0; k < 5; ++k) y -= dip(x, centres[k], 1.5, depths[k]);
        return y;
      },
      0.01 * 0.04 * 5.0 / 5.0 + 0.002, 17);
  const auto r = fit_lorentzian_peaks(t, 5);
  REQUIRE(r.peaks.size() == 5);
  for (int k = 0; k < 5; ++k) CHECK(std::abs(r.peaks.peaks()[k].f_r_mhz - centres[k]) < 0.5);
}

TEST_CASE("Lorentzian peaks: flat trace is not a fit") {
  const auto t = make_trace(grid(990.0, 1010.0, 101), [](double) { return 1.0; }, 0.001, 4);
  CHECK_THROWS_AS(fit_lorentzian_peaks(t, 1), FitFailure);
}

TEST_CASE("parameter errors scale as 1/sqrt(N)") {
  auto spread = [](std::size_t n, double& mean_reported) {
    std::vector<double> centres;
    mean_reported = 0.0;
    for (int draw = 0; draw < 100; ++draw) {
      const auto t = make_trace(grid(990.0, 1010.0, n), [](double x) { return 1.0 - dip(x, 1000.0, 1.5, 0.2); }, 0.01,
                                1000 + draw);
      const auto r = fit_lorentzian_peaks(t, 1, std::vector<LorentzianPeak>{{1000.0, 1.5, 1.0}});
      centres.push_back(r.peaks.peaks()[0].f_r_mhz);
      mean_reported += r.fit.std_errors(0) / 100.0;
    }
    return aggregate(centres).std;
  };
  double rep_small = 0.0, rep_large = 0.0;
  const double small = spread(50, rep_small), large = spread(200, rep_large);
  const double exponent = std::log(small / large) / std::log(4.0);
  CHECK(exponent == doctest::Approx(0.5).epsilon(0.2));
  const double reported = std::log(rep_small / rep_large) / std::log(4.0);
  CHECK(reported == doctest::Approx(0.5).epsilon(0.2));
  CHECK(rep_large == doctest::Approx(large).epsilon(0.25));
}

TEST_CASE("Rabi frequency") {
  const auto t = make_trace(grid(0.0, 2.0, 161),
                            [](double x) { return 0.9 - 0.08 * std::exp(-0.4 * x) * std::cos(2.0 * M_PI * 2.5 * x); },
                            0.002, 8);
  const auto r = fit_rabi_frequency(t);
  CHECK(r.omega_mhz == doctest::Approx(2.5).epsilon(0.01));
  CHECK(r.t_pi_us == 1.0 / (2.0 * r.omega_mhz));

  const auto clean = make_trace(grid(0.0, 2.0, 161),
                                [](double x) { return 0.9 - 0.08 * std::exp(-0.4 * x) * std::cos(2.0 * M_PI * 2.5 * x); });
  CHECK(relative_residual(fit_rabi_frequency(clean).fit, clean) < 1e-10);

  CHECK_THROWS_AS(fit_rabi_frequency(make_trace(grid(0.0, 2.0, 50), [](double) { return 0.9; })), FitFailure);
  const auto short_trace = make_trace(grid(0.0, 0.4, 40), [](double x) { return std::cos(2.0 * M_PI * 2.5 * x); });
  CHECK_THROWS_AS(fit_rabi_frequency(short_trace), InvalidData);
}

TEST_CASE("concentration from the spectrum: round trip, zero and translation") {
  const auto fx = standard_fixed();
  const auto t = make_trace(spectrum_grid(), [](double f) { return deer_model(f, 200.0, 0.0); }, 0.002, 21);
  const auto est = fit_concentration_spectrum(t, fx, group_lines(), 2);
  CHECK(est.central_excluded);
  CHECK(est.per_peak_values.size() == 4);
  for (double c : est.per_peak_centers) CHECK(std::abs(c - 1050.7) > 30.0);
  CHECK(est.value_ppb == doctest::Approx(200.0).epsilon(0.05));

  const double shift = 7.3;
  const auto ts = make_trace(spectrum_grid(shift), [&](double f) { return deer_model(f, 200.0, 0.0, shift); }, 0.002, 21);
  const auto shifted = fit_concentration_spectrum(ts, fx, group_lines(shift), 2);
  CHECK(shifted.value_ppb == doctest::Approx(est.value_ppb).epsilon(1e-5));
  for (std::size_t k = 0; k < 4; ++k)
    CHECK(shifted.per_peak_centers[k] - est.per_peak_centers[k] == doctest::Approx(shift).epsilon(1e-5));

  const auto zero = make_trace(spectrum_grid(), [](double) { return 1.0; }, 0.002, 22);
  const auto z = fit_concentration_spectrum(zero, fx, group_lines(), 2);
  CHECK(std::abs(z.value_ppb) <= 3.0 * std::max(z.uncertainty_ppb, z.propagated_error_ppb) + 1e-6);
}

TEST_CASE("central line: X concentration with n_P1 fixed") {
  const auto fx = standard_fixed();
  CentralLineModel model;
  model.p1_lines = {{1048.875, 1.0, 1.0 / 12.0}, {1051.369, 1.0, 0.25}};
  model.x_line = {1042.5, 1.0, 1.0};
  std::vector<double> g;
  for (double f = 1030.0; f <= 1070.0; f += 0.5) g.push_back(f);

  const auto with_x = make_trace(g, [](double f) { return deer_model(f, 200.0, 13.0); }, 0.001, 31);
  const auto est = fit_central_line_two_species(with_x, 200.0, fx, model);
  CHECK(est.species == Species::kX);
  CHECK(est.value_ppb == doctest::Approx(13.0).epsilon(0.2));

  const auto without = make_trace(g, [](double f) { return deer_model(f, 200.0, 0.0); }, 0.001, 32);
  const auto none = fit_central_line_two_species(without, 200.0, fx, model);
  CHECK(std::abs(none.value_ppb) <= 3.0 * none.uncertainty_ppb + 0.5);

  // overstating n_P1 by 10% pushes the X estimate down
  const double biased = fit_central_line_two_species(with_x, 220.0, fx, model).value_ppb;
  CHECK(biased < est.value_ppb);
}

TEST_CASE("DEER decay") {
  const auto fx = standard_fixed();
  const double p_b = 0.5;
  const double k = deer_rate_per_us(1.0, 2.0, 2.0, 0.5) * p_b;
  const auto t = make_trace(grid(0.0, 100.0, 30), [&](double x) { return 0.98 * std::exp(-k * 100.0 * x); }, 0.005, 41);
  const auto est = fit_deer_decay(t, p_b, fx);
  CHECK(est.method == ConcentrationMethod::kDecay);
  CHECK(est.value_ppb == doctest::Approx(100.0).epsilon(0.03));

  const auto clean = make_trace(grid(0.0, 100.0, 30), [&](double x) { return 0.98 * std::exp(-k * 100.0 * x); });
  CHECK(fit_deer_decay(clean, p_b, fx).value_ppb == doctest::Approx(100.0).epsilon(1e-8));
  CHECK_THROWS_AS(fit_deer_decay(clean, 0.0, fx), FitFailure);
}

TEST_CASE("spectrum and decay estimates agree on shared synthetic data") {
  const auto fx = standard_fixed();
  const double n = 150.0;
  const auto spectrum = make_trace(spectrum_grid(), [&](double f) { return deer_model(f, n, 0.0); }, 0.003, 51);
  const auto s = fit_concentration_spectrum(spectrum, fx, group_lines(), 2);
  // decay probed on the resonant 961.6 MHz line
  const double p_b = 0.25 * peak_transfer({961.581, 1.0, 1.0}, fx.omega_mhz, 961.581, fx.t_b_us);
  const double k = deer_rate_per_us(1.0, 2.0, 2.0, 0.5) * p_b;
  const auto decay = make_trace(grid(0.0, 100.0, 30), [&](double x) { return std::exp(-k * n * x); }, 0.003, 52);
  const auto d = fit_deer_decay(decay, p_b, fx);
  const double joint = std::hypot(s.uncertainty_ppb, d.uncertainty_ppb);
  CHECK(std::abs(s.value_ppb - d.value_ppb) <= 3.0 * joint);
}

TEST_CASE("Hahn echo decay") {
  const auto t = make_trace(grid(0.0, 800.0, 200), [](double x) { return std::exp(-std::pow(x / 313.0, 1.8)); }, 0.02, 61);
  const auto r = fit_hahn_decay(t);
  CHECK(std::abs(r.t2_us - 313.0) < 5.0);
  CHECK(std::abs(r.stretch - 1.80) < 0.07);

  const auto mono = make_trace(grid(0.0, 800.0, 100), [](double x) { return 0.9 * std::exp(-x / 250.0); });
  const auto m = fit_hahn_decay(mono);
  CHECK(m.stretch == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(relative_residual(m.fit, mono) < 1e-10);

  const auto agg = aggregate({270.0, 284.0, 298.0});
  CHECK(agg.mean == doctest::Approx(284.0));
  CHECK(agg.std == doctest::Approx(14.0));
  CHECK(agg.sem == doctest::Approx(14.0 / std::sqrt(3.0)));
}

TEST_CASE("ESEEM modulation") {
  const double f = 0.1985;
  auto gen = [](double freq) {
    return [freq](double x) { return 0.5 + 0.1 * std::cos(2.0 * M_PI * freq * x + 0.3); };
  };
  const auto t = make_trace(grid(0.0, 30.0, 150), gen(f), 0.002, 71);
  const auto r = fit_eseem(t, 37.2);
  CHECK(r.gamma_n_mhz_per_t == doctest::Approx(2.0 * r.f_mhz / 0.0372));
  CHECK(std::abs(r.gamma_n_mhz_per_t - 10.68) < 0.03);

  EseemFit published;
  published.gamma_n_mhz_per_t = 10.68;
  published.gamma_n_err = 0.03;
  CHECK(published.consistent_with(units::kGammaC13));
  CHECK_FALSE(published.consistent_with(11.0));

  const double gamma = r.gamma_n_mhz_per_t;
  const auto doubled = make_trace(grid(0.0, 15.0, 150), gen(gamma * 2.0 * 0.0372 / 2.0), 0.0, 72);
  const auto rd = fit_eseem(doubled, 2.0 * 37.2);
  CHECK(rd.f_mhz == doctest::Approx(2.0 * r.f_mhz).epsilon(0.01));
  CHECK(rd.gamma_n_mhz_per_t == doctest::Approx(gamma).epsilon(1e-8));
  CHECK(relative_residual(rd.fit, doubled) < 1e-10);
}

TEST_CASE("PL saturation") {
  auto curve = [](double p) { return 100.0 * p / (1.0 + p); };
  const auto t = make_trace(grid(0.05, 5.0, 30), curve, 0.03, 81, true);
  const auto r = fit_saturation(t);
  CHECK(r.f_sat == doctest::Approx(100.0).epsilon(0.05));
  CHECK(r.p_sat == doctest::Approx(1.0).epsilon(0.05));

  const auto clean = make_trace(grid(0.05, 5.0, 30), curve);
  const auto c = fit_saturation(clean);
  CHECK(relative_residual(c.fit, clean) < 1e-10);
  CHECK(curve(1e-4) / 1e-4 == doctest::Approx(c.f_sat / c.p_sat).epsilon(1e-3));
  CHECK(curve(1e6) == doctest::Approx(c.f_sat).epsilon(1e-5));

  const auto low = make_trace(grid(0.01, 0.3, 20), curve);
  CHECK_FALSE(fit_saturation(low).fit.warnings.empty());

  SpectrumTrace bg = make_trace(grid(0.0, 6.0, 7), [](double p) { return 2.0 * p; });
  const auto with_bg = make_trace(grid(0.05, 5.0, 30), [&](double p) { return curve(p) + 2.0 * p; });
  CHECK(fit_saturation(with_bg, bg).f_sat == doctest::Approx(100.0).epsilon(1e-6));
}

TEST_CASE("NV count and growth-sector ratios") {
  const auto one = nv_count(ValueWithError{10.0, 0.1}, ValueWithError{10.0, 0.1});
  CHECK(one.value == doctest::Approx(1.0));
  const auto fifty = nv_count(ValueWithError{50.0, 1.0}, ValueWithError{1.0, 0.01});
  CHECK(fifty.value == doctest::Approx(50.0));
  CHECK(fifty.error == doctest::Approx(50.0 * std::hypot(1.0 / 50.0, 0.01)));
  CHECK_THROWS_AS(nv_count(ValueWithError{1.0, 0.0}, ValueWithError{0.0, 0.0}), InvalidArgument);

  const std::vector<double> doses{1.0, 2.0, 5.0, 10.0};
  std::vector<std::vector<double>> counts(3);
  const double ratio[3] = {10.1, 1.3, 1.0};
  for (int s = 0; s < 3; ++s)
    for (double d : doses) counts[static_cast<std::size_t>(s)].push_back(ratio[s] * 40.0 * d);
  const auto r = growth_sector_ratios(counts, 2);
  CHECK(r[0] == doctest::Approx(10.1));
  CHECK(r[1] == doctest::Approx(1.3));
  CHECK(r[2] == doctest::Approx(1.0));
}

TEST_CASE("vacancy diffusion") {
  const auto d = diffusion_from_volume(4.8e-2, 37.5, 7200.0);
  CHECK(std::abs(d.r_nv_nm - 226.0) < 1.0);
  CHECK(std::abs(d.d_rms_nm - 223.0) < 1.0);
  CHECK(std::abs(d.d_nm2_per_s - 1.15) < 0.01);

  const double n_ppb = 20.0;
  const double count = 4.8e-2 * units::ppb_to_per_um3(n_ppb);
  const auto e = diffusion_coefficient(n_ppb, count, 37.5, 7200.0);
  CHECK(e.d_nm2_per_s == doctest::Approx(d.d_nm2_per_s).epsilon(1e-12));

  const double r_vac = 50.0;
  const double v_equal = 4.0 / 3.0 * M_PI * std::pow(r_vac * 1e-3, 3);
  CHECK(diffusion_from_volume(v_equal, r_vac, 7200.0).d_nm2_per_s == doctest::Approx(0.0).epsilon(1e-9));
  CHECK_THROWS_AS(diffusion_from_volume(0.5 * v_equal, r_vac, 7200.0), InvalidData);

  // quadrupling <d^2> quadruples D
  const double r1 = 100.0, r2 = std::sqrt(4.0 * (r1 * r1 - r_vac * r_vac) + r_vac * r_vac);
  auto vol = [](double r) { return 4.0 / 3.0 * M_PI * std::pow(r * 1e-3, 3); };
  CHECK(diffusion_from_volume(vol(r2), r_vac, 7200.0).d_nm2_per_s ==
        doctest::Approx(4.0 * diffusion_from_volume(vol(r1), r_vac, 7200.0).d_nm2_per_s).epsilon(1e-9));
}

TEST_CASE("EPR double integral and concentration") {
  const double area = 3.0, centre = 350.0, w = 0.4;
  std::vector<double> field, deriv, drifting;
  for (double b = 345.0; b <= 355.0; b += 0.005) {
    const double g = area * std::exp(-0.5 * std::pow((b - centre) / w, 2)) / (w * std::sqrt(2.0 * M_PI));
    field.push_back(b);
    deriv.push_back(-(b - centre) / (w * w) * g);
    drifting.push_back(deriv.back() + 0.02 + 0.001 * (b - 345.0));
  }
  const auto di = double_integral(field, deriv);
  CHECK(di.value == doctest::Approx(area).epsilon(1e-3));
  CHECK(di.warnings.empty());
  CHECK(double_integral(field, drifting).value == doctest::Approx(area).epsilon(1e-3));

  CHECK(epr_concentration(2.0, 10.0, 2.0, 10.0, 68.0) == doctest::Approx(68000.0));
  const double ratio = 22.0 * 11.0 / (68000.0 * 50.7);
  CHECK(epr_concentration(ratio, 11.0, 1.0, 50.7, 68.0) == doctest::Approx(22.0));
  CHECK(epr_concentration(0.0, 11.0, 1.0, 50.7, 68.0) == 0.0);
  CHECK_THROWS_AS(epr_concentration(1.0, 11.0, 0.0, 50.7, 68.0), InvalidArgument);
}
