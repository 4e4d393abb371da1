#include "nvdeer/fitting.hpp"

#include "nvdeer/errors.hpp"
#include "nvdeer/units.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

namespace nvdeer {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using units::kPi;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(6);
  os << v;
  return os.str();
}

double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + mid, v.end());
  double m = v[mid];
  if (v.size() % 2 == 0) m = 0.5 * (m + *std::max_element(v.begin(), v.begin() + mid));
  return m;
}

/// Point-to-point noise from the median absolute first difference.
double noise_estimate(const std::vector<double>& y) {
  if (y.size() < 3) return 0.0;
  std::vector<double> d(y.size() - 1);
  for (std::size_t i = 0; i + 1 < y.size(); ++i) d[i] = std::abs(y[i + 1] - y[i]);
  return 1.4826 * median(d) / std::sqrt(2.0);
}

VectorXd weights_of(const SpectrumTrace& t) {
  VectorXd w = VectorXd::Ones(static_cast<Eigen::Index>(t.size()));
  if (t.weighted()) {
    for (std::size_t i = 0; i < t.size(); ++i) w(static_cast<Eigen::Index>(i)) = 1.0 / t.sigma[i];
  }
  return w;
}

/// Residual function (y - model(x)) * w for a pointwise model.
template <typename Model>
ResidualFunction pointwise_residuals(const SpectrumTrace& t, Model model) {
  VectorXd w = weights_of(t);
  return [&t, w, model](const VectorXd& p) {
    VectorXd r(static_cast<Eigen::Index>(t.size()));
    for (std::size_t i = 0; i < t.size(); ++i) {
      r(static_cast<Eigen::Index>(i)) = (t.y[i] - model(t.x[i], p)) * w(static_cast<Eigen::Index>(i));
    }
    return r;
  };
}

LeastSquaresProblem make_problem(ResidualFunction f, std::vector<std::string> names, std::vector<double> init,
                                 std::vector<double> lo, std::vector<double> hi, std::vector<double> scale) {
  LeastSquaresProblem p;
  p.residuals = std::move(f);
  p.names = std::move(names);
  p.initial = Eigen::Map<VectorXd>(init.data(), static_cast<Eigen::Index>(init.size()));
  p.lower = Eigen::Map<VectorXd>(lo.data(), static_cast<Eigen::Index>(lo.size()));
  p.upper = Eigen::Map<VectorXd>(hi.data(), static_cast<Eigen::Index>(hi.size()));
  p.scale = Eigen::Map<VectorXd>(scale.data(), static_cast<Eigen::Index>(scale.size()));
  return p;
}

struct Periodogram {
  double freq = 0.0;
  double phase = 0.0;
  double amplitude = 0.0;
};

/// Strongest Fourier component of the mean-removed data on a frequency grid
/// between 1/(4 span) and the mean-spacing Nyquist frequency.
Periodogram dominant_frequency(const SpectrumTrace& t) {
  const double mean = std::accumulate(t.y.begin(), t.y.end(), 0.0) / static_cast<double>(t.size());
  const auto [xmin, xmax] = std::minmax_element(t.x.begin(), t.x.end());
  const double span = *xmax - *xmin;
  const double nyquist = 0.5 * static_cast<double>(t.size() - 1) / span;
  const double df = 1.0 / (8.0 * span);
  Periodogram best;
  double best_power = -1.0;
  for (double f = 0.5 / span; f <= nyquist; f += df) {
    std::complex<double> s = 0.0;
    for (std::size_t i = 0; i < t.size(); ++i) {
      s += (t.y[i] - mean) * std::polar(1.0, -2.0 * kPi * f * t.x[i]);
    }
    if (std::norm(s) > best_power) {
      best_power = std::norm(s);
      best.freq = f;
      best.phase = std::arg(s);
      best.amplitude = 2.0 * std::abs(s) / static_cast<double>(t.size());
    }
  }
  return best;
}

double span_of(const SpectrumTrace& t) {
  const auto [lo, hi] = std::minmax_element(t.x.begin(), t.x.end());
  return *hi - *lo;
}

bool at_bound(const FitResult& r, const LeastSquaresProblem& p, Eigen::Index j) {
  const double tol = 1e-9 * std::max(1.0, std::abs(r.values(j)));
  return std::abs(r.values(j) - p.lower(j)) <= tol || std::abs(r.values(j) - p.upper(j)) <= tol;
}

}  // namespace

double FitResult::value(const std::string& name) const {
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (names[i] == name) return values(static_cast<Eigen::Index>(i));
  }
  throw InvalidArgument("unknown fit parameter: " + name);
}

double FitResult::error(const std::string& name) const {
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (names[i] == name) return std_errors(static_cast<Eigen::Index>(i));
  }
  throw InvalidArgument("unknown fit parameter: " + name);
}

// ---------------------------------------------------------------------------
// Levenberg-Marquardt

FitResult least_squares(const LeastSquaresProblem& problem, const LeastSquaresOptions& opt) {
  const Eigen::Index p = problem.initial.size();
  if (p == 0) throw InvalidArgument("least_squares: no parameters");
  if (static_cast<Eigen::Index>(problem.names.size()) != p) throw InvalidArgument("least_squares: names size");
  const VectorXd lower = problem.lower.size() == p ? problem.lower : VectorXd::Constant(p, -kInf);
  const VectorXd upper = problem.upper.size() == p ? problem.upper : VectorXd::Constant(p, kInf);
  VectorXd scale = problem.scale.size() == p ? problem.scale : VectorXd(problem.initial.cwiseAbs().cwiseMax(1.0));
  for (Eigen::Index j = 0; j < p; ++j) {
    if (!(lower(j) <= upper(j))) throw InvalidArgument("least_squares: empty bound interval");
    if (!(scale(j) > 0.0)) scale(j) = std::max(std::abs(problem.initial(j)), 1.0);
  }
  auto clamp = [&](VectorXd x) {
    for (Eigen::Index j = 0; j < p; ++j) x(j) = std::clamp(x(j), lower(j), upper(j));
    return x;
  };

  auto evaluate = [&](const VectorXd& x, VectorXd& r) {
    r = problem.residuals(x);
    return r.allFinite();
  };

  VectorXd x = clamp(problem.initial);
  VectorXd r;
  if (!evaluate(x, r)) throw FitFailure("residuals are not finite at the initial guess");
  const Eigen::Index n = r.size();
  if (n < p) throw InvalidData("fewer data points than parameters");
  const double cost0 = r.squaredNorm();

  auto jacobian = [&](const VectorXd& x0, const VectorXd& r0) {
    MatrixXd jac(n, p);
    VectorXd rp, rm;
    for (Eigen::Index j = 0; j < p; ++j) {
      const double h = opt.fd_step * std::max(std::abs(x0(j)), scale(j));
      VectorXd xp = x0, xm = x0;
      xp(j) = std::min(x0(j) + h, upper(j));
      xm(j) = std::max(x0(j) - h, lower(j));
      const bool okp = xp(j) > x0(j) && evaluate(xp, rp);
      const bool okm = xm(j) < x0(j) && evaluate(xm, rm);
      if (okp && okm) {
        jac.col(j) = (rp - rm) / (xp(j) - xm(j));
      } else if (okp) {
        jac.col(j) = (rp - r0) / (xp(j) - x0(j));
      } else if (okm) {
        jac.col(j) = (r0 - rm) / (x0(j) - xm(j));
      } else {
        jac.col(j).setZero();
      }
    }
    return jac;
  };

  auto gradient_cosine = [&](const MatrixXd& jac, const VectorXd& res, const VectorXd& xx) {
    const double rn = res.norm();
    if (rn == 0.0) return 0.0;
    const VectorXd g = jac.transpose() * res;
    double worst = 0.0;
    for (Eigen::Index j = 0; j < p; ++j) {
      // a bound that the descent direction pushes against does not count
      if (xx(j) <= lower(j) && g(j) > 0.0) continue;
      if (xx(j) >= upper(j) && g(j) < 0.0) continue;
      const double cn = jac.col(j).norm();
      if (cn > 0.0) worst = std::max(worst, std::abs(g(j)) / (cn * rn));
    }
    return worst;
  };

  FitResult out;
  out.names = problem.names;
  out.n_points = static_cast<std::size_t>(n);

  double cost = r.squaredNorm();
  MatrixXd jac = jacobian(x, r);
  MatrixXd a = jac.transpose() * jac;
  double lambda = 1e-3 * std::max(a.diagonal().maxCoeff(), 1e-300);
  double nu = 2.0;
  bool finished = false;
  int it = 0;
  for (; it < opt.max_iterations && !finished; ++it) {
    const VectorXd g = jac.transpose() * r;
    if (gradient_cosine(jac, r, x) <= opt.gtol || cost == 0.0) {
      finished = true;
      break;
    }
    VectorXd d = a.diagonal().cwiseMax(1e-12 * std::max(a.diagonal().maxCoeff(), 1e-300));
    // parameters pinned at a bound that the descent direction pushes against stay fixed
    std::vector<Eigen::Index> free;
    for (Eigen::Index j = 0; j < p; ++j) {
      const bool pinned = (x(j) <= lower(j) && g(j) > 0.0) || (x(j) >= upper(j) && g(j) < 0.0);
      if (!pinned) free.push_back(j);
    }
    if (free.empty()) {
      finished = true;
      break;
    }
    const auto nf = static_cast<Eigen::Index>(free.size());
    bool accepted = false;
    while (!accepted) {
      MatrixXd m(nf, nf);
      VectorXd gf(nf);
      for (Eigen::Index u = 0; u < nf; ++u) {
        gf(u) = g(free[static_cast<std::size_t>(u)]);
        for (Eigen::Index v = 0; v < nf; ++v) m(u, v) = a(free[static_cast<std::size_t>(u)], free[static_cast<std::size_t>(v)]);
        m(u, u) += lambda * d(free[static_cast<std::size_t>(u)]);
      }
      const VectorXd delta_f = m.ldlt().solve(-gf);
      VectorXd delta = VectorXd::Zero(p);
      for (Eigen::Index u = 0; u < nf; ++u) delta(free[static_cast<std::size_t>(u)]) = delta_f(u);
      const VectorXd xn = clamp(x + delta);
      const VectorXd step = xn - x;
      VectorXd rn;
      const bool ok = evaluate(xn, rn);
      const double cost_n = ok ? rn.squaredNorm() : kInf;
      const double predicted = -(2.0 * step.dot(g) + step.dot(a * step));
      if (ok && cost_n < cost) {
        const double rho = predicted > 0.0 ? (cost - cost_n) / predicted : 0.0;
        lambda *= std::max(1.0 / 3.0, 1.0 - std::pow(2.0 * rho - 1.0, 3));
        nu = 2.0;
        const bool small_f = (cost - cost_n) <= opt.ftol * cost;
        const bool small_x = step.norm() <= opt.xtol * (x.norm() + opt.xtol);
        x = xn;
        r = rn;
        cost = cost_n;
        jac = jacobian(x, r);
        a = jac.transpose() * jac;
        accepted = true;
        if (small_f || small_x) finished = true;
      } else {
        lambda *= nu;
        nu *= 2.0;
        if (!(lambda < 1e20) || step.norm() <= opt.xtol * (x.norm() + opt.xtol)) {
          // no downhill step exists at machine precision
          finished = true;
          break;
        }
      }
    }
  }

  out.values = x;
  out.iterations = it;
  out.residual_norm = std::sqrt(cost);
  const double dof = static_cast<double>(std::max<Eigen::Index>(n - p, 1));
  out.chi2_reduced = cost / dof;
  out.gradient_cosine = gradient_cosine(jac, r, x);
  const bool exact = cost <= 1e-24 * std::max(cost0, 1e-300) || cost <= 1e-28 * static_cast<double>(n);
  out.converged = finished && (out.gradient_cosine <= opt.converged_gtol || exact);
  if (!finished) out.warnings.push_back("iteration limit reached");

  // covariance from the Jacobian at the optimum
  VectorXd col_norm = jac.colwise().norm().transpose();
  MatrixXd scaled = jac;
  for (Eigen::Index j = 0; j < p; ++j) {
    if (col_norm(j) > 0.0) scaled.col(j) /= col_norm(j);
  }
  Eigen::JacobiSVD<MatrixXd> svd(scaled, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const VectorXd s = svd.singularValues();
  const double smax = s.size() ? s.maxCoeff() : 0.0;
  const double smin = s.size() ? s.minCoeff() : 0.0;
  out.condition_number = smin > 0.0 ? smax / smin : kInf;
  VectorXd inv_s2 = VectorXd::Zero(s.size());
  bool singular = false;
  for (Eigen::Index k = 0; k < s.size(); ++k) {
    if (s(k) > 1e-12 * smax) {
      inv_s2(k) = 1.0 / (s(k) * s(k));
    } else {
      singular = true;
    }
  }
  MatrixXd cov_scaled = svd.matrixV() * inv_s2.asDiagonal() * svd.matrixV().transpose();
  out.covariance = MatrixXd::Zero(p, p);
  for (Eigen::Index i = 0; i < p; ++i) {
    for (Eigen::Index j = 0; j < p; ++j) {
      if (col_norm(i) > 0.0 && col_norm(j) > 0.0) {
        out.covariance(i, j) = cov_scaled(i, j) / (col_norm(i) * col_norm(j)) * out.chi2_reduced;
      }
    }
  }
  out.std_errors = out.covariance.diagonal().cwiseMax(0.0).cwiseSqrt();
  for (Eigen::Index j = 0; j < p; ++j) {
    if (col_norm(j) == 0.0) {
      out.std_errors(j) = kInf;
      singular = true;
    }
  }
  if (singular) out.warnings.push_back("singular Jacobian: some parameters are not identifiable");
  if (out.condition_number > opt.condition_warning) {
    out.warnings.push_back("ill-conditioned fit (condition number " + fmt(out.condition_number) + ")");
  }
  return out;
}

FitResult least_squares_multistart(const LeastSquaresProblem& problem, std::uint64_t seed, int n_starts,
                                   const LeastSquaresOptions& options) {
  if (n_starts < 1) throw InvalidArgument("multistart needs at least one start");
  const Eigen::Index p = problem.initial.size();
  const VectorXd scale = problem.scale.size() == p ? problem.scale : VectorXd(problem.initial.cwiseAbs().cwiseMax(1.0));
  std::mt19937_64 rng(seed);
  auto uniform = [&rng] { return static_cast<double>(rng() >> 11) * 0x1.0p-53 * 2.0 - 1.0; };

  std::optional<FitResult> best;
  std::optional<FitFailure> first_error;
  for (int s = 0; s < n_starts; ++s) {
    LeastSquaresProblem trial = problem;
    if (s > 0) {
      for (Eigen::Index j = 0; j < p; ++j) trial.initial(j) += scale(j) * uniform();
    }
    try {
      FitResult r = least_squares(trial, options);
      if (!best || r.residual_norm < best->residual_norm) best = std::move(r);
    } catch (const FitFailure& e) {
      if (!first_error) first_error = e;
    }
  }
  if (!best) throw *first_error;
  return *best;
}

// ---------------------------------------------------------------------------
// Peaks

std::vector<double> find_dips(const SpectrumTrace& trace, int n_peaks, double min_separation) {
  const std::size_t n = trace.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return trace.x[a] < trace.x[b]; });
  std::vector<double> xs(n), ys(n);
  for (std::size_t i = 0; i < n; ++i) {
    xs[i] = trace.x[order[i]];
    ys[i] = trace.y[order[i]];
  }
  std::vector<double> sm(ys);
  for (std::size_t i = 1; i + 1 < n; ++i) sm[i] = (ys[i - 1] + ys[i] + ys[i + 1]) / 3.0;

  std::vector<std::size_t> minima;
  for (std::size_t i = 1; i + 1 < n; ++i) {
    if (sm[i] < sm[i - 1] && sm[i] <= sm[i + 1]) minima.push_back(i);
  }
  std::sort(minima.begin(), minima.end(), [&](std::size_t a, std::size_t b) { return sm[a] < sm[b]; });
  std::vector<double> out;
  for (std::size_t i : minima) {
    if (static_cast<int>(out.size()) == n_peaks) break;
    const bool clear = std::all_of(out.begin(), out.end(), [&](double f) { return std::abs(f - xs[i]) >= min_separation; });
    if (clear) out.push_back(xs[i]);
  }
  std::sort(out.begin(), out.end());
  return out;
}

PeakFit fit_lorentzian_peaks(const SpectrumTrace& trace, int n_peaks,
                             const std::optional<std::vector<LorentzianPeak>>& seeds) {
  trace.validate();
  if (n_peaks < 1) throw InvalidArgument("fit_lorentzian_peaks: n_peaks must be >= 1");
  if (trace.size() < static_cast<std::size_t>(4 * n_peaks)) {
    throw InvalidData("fit_lorentzian_peaks: need at least 4 points per peak");
  }
  const double baseline = median(trace.y);
  const double noise = noise_estimate(trace.y);
  const double span = span_of(trace);
  const double dx = span / static_cast<double>(trace.size() - 1);
  const auto [xmin, xmax] = std::minmax_element(trace.x.begin(), trace.x.end());

  auto value_near = [&](double f) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < trace.size(); ++i) {
      if (std::abs(trace.x[i] - f) < std::abs(trace.x[best] - f)) best = i;
    }
    return trace.y[best];
  };

  std::vector<LorentzianPeak> init;
  if (seeds) {
    if (static_cast<int>(seeds->size()) != n_peaks) throw InvalidArgument("fit_lorentzian_peaks: seed count mismatch");
    init = *seeds;
    for (auto& s : init) {
      if (!(s.amp > 0.0)) s.amp = std::max(baseline - value_near(s.f_r_mhz), 0.0);
      if (!(s.gamma_mhz > 0.0)) s.gamma_mhz = 3.0 * dx;
    }
  } else {
    const auto dips = find_dips(trace, n_peaks, 3.0 * dx);
    if (static_cast<int>(dips.size()) < n_peaks) {
      throw FitFailure("fit_lorentzian_peaks: found " + std::to_string(dips.size()) + " dips, expected " +
                       std::to_string(n_peaks));
    }
    for (double f : dips) {
      const double depth = baseline - value_near(f);
      // half-depth half-width from the nearest crossing
      double hw = 3.0 * dx;
      for (double w = dx; w < 0.25 * span; w += dx) {
        if (baseline - value_near(f + w) < 0.5 * depth || baseline - value_near(f - w) < 0.5 * depth) {
          hw = std::max(w, dx);
          break;
        }
      }
      init.push_back({f, hw, depth});
    }
  }
  const double threshold = std::max(5.0 * noise, 1e-9 * std::max(std::abs(baseline), 1.0));
  for (const auto& s : init) {
    if (!(s.amp > threshold)) {
      throw FitFailure("fit_lorentzian_peaks: no dip above the noise near " + fmt(s.f_r_mhz) + " MHz");
    }
  }

  std::vector<std::string> names{"baseline"};
  std::vector<double> x0{baseline}, lo{-kInf}, hi{kInf}, sc{std::max(std::abs(baseline), 1e-3)};
  for (int i = 0; i < n_peaks; ++i) {
    const auto& s = init[static_cast<std::size_t>(i)];
    const std::string k = std::to_string(i);
    names.insert(names.end(), {"f_" + k, "gamma_" + k, "depth_" + k});
    x0.insert(x0.end(), {s.f_r_mhz, s.gamma_mhz, s.amp});
    lo.insert(lo.end(), {*xmin, 1e-3 * dx, 0.0});
    hi.insert(hi.end(), {*xmax, span, kInf});
    sc.insert(sc.end(), {std::max(dx, 1e-3), s.gamma_mhz, s.amp});
  }
  auto model = [n_peaks](double x, const VectorXd& p) {
    double y = p(0);
    for (int i = 0; i < n_peaks; ++i) {
      const double f = p(1 + 3 * i), g = p(2 + 3 * i), d = p(3 + 3 * i);
      y -= d * g * g / (g * g + (x - f) * (x - f));
    }
    return y;
  };
  auto problem = make_problem(pointwise_residuals(trace, model), names, x0, lo, hi, sc);
  PeakFit out;
  out.fit = least_squares(problem);
  if (!out.fit.converged) throw FitFailure("fit_lorentzian_peaks: did not converge");
  if (out.fit.condition_number > 1e8) {
    out.fit.warnings.push_back("overlapping peaks: parameters are strongly correlated");
  }
  out.baseline = out.fit.values(0);
  std::vector<LorentzianPeak> peaks;
  for (int i = 0; i < n_peaks; ++i) {
    const double f = out.fit.values(1 + 3 * i), g = out.fit.values(2 + 3 * i), d = out.fit.values(3 + 3 * i);
    out.depths.push_back(d);
    peaks.push_back({f, g, kPi * d * g});
  }
  double area = 0.0;
  for (const auto& pk : peaks) area += pk.amp;
  if (!(area > 0.0)) throw FitFailure("fit_lorentzian_peaks: all fitted dips vanished");
  out.peaks = LorentzianPeakSet::normalized(std::move(peaks));
  return out;
}

RabiFit fit_rabi_frequency(const SpectrumTrace& trace) {
  trace.validate();
  if (trace.size() < 8) throw InvalidData("fit_rabi_frequency: need at least 8 points");
  const double mean = std::accumulate(trace.y.begin(), trace.y.end(), 0.0) / static_cast<double>(trace.size());
  double var = 0.0;
  for (double y : trace.y) var += (y - mean) * (y - mean);
  var /= static_cast<double>(trace.size());
  if (!(var > 1e-24 * std::max(mean * mean, 1.0))) throw FitFailure("fit_rabi_frequency: no oscillation (constant trace)");

  const auto seed = dominant_frequency(trace);
  const double span = span_of(trace);
  auto model = [](double t, const VectorXd& p) {
    return p(0) + p(1) * std::exp(-p(2) * t) * std::cos(2.0 * kPi * p(3) * t + p(4));
  };
  auto problem = make_problem(pointwise_residuals(trace, model), {"offset", "amplitude", "decay", "omega", "phase"},
                              {mean, seed.amplitude, 0.0, seed.freq, seed.phase},
                              {-kInf, 0.0, 0.0, 0.1 / span, -4.0 * kPi}, {kInf, kInf, kInf, kInf, 4.0 * kPi},
                              {std::max(std::abs(mean), 1e-3), std::max(seed.amplitude, 1e-3), 1.0 / span,
                               std::max(seed.freq, 1e-3), 1.0});
  RabiFit out;
  out.fit = least_squares(problem);
  const double amp = out.fit.values(1), amp_err = out.fit.std_errors(1);
  if (!out.fit.converged || !(amp > 3.0 * amp_err) || !(amp > 0.0)) {
    throw FitFailure("fit_rabi_frequency: no oscillation detected above noise");
  }
  out.omega_mhz = out.fit.values(3);
  out.omega_err = out.fit.std_errors(3);
  if (span * out.omega_mhz < 1.5) throw InvalidData("fit_rabi_frequency: trace spans fewer than 1.5 periods");
  out.t_pi_us = 1.0 / (2.0 * out.omega_mhz);
  out.t_pi_err = out.omega_err / (2.0 * out.omega_mhz * out.omega_mhz);
  return out;
}

// ---------------------------------------------------------------------------
// Concentrations

std::string method_name(ConcentrationMethod m) {
  switch (m) {
    case ConcentrationMethod::kSpectrum: return "spectrum";
    case ConcentrationMethod::kDecay: return "decay";
    case ConcentrationMethod::kRabi: return "rabi";
  }
  return "unknown";
}

namespace {

double line_transfer(const DeerFixed& fx, double f_r, double gamma, double f_b) {
  return peak_transfer(LorentzianPeak{f_r, gamma, 1.0}, fx.omega_mhz, f_b, fx.t_b_us);
}

double rate_per_ppb(const DeerFixed& fx) { return deer_rate_per_us(1.0, fx.g_a, fx.g_b, fx.sigma); }

void check_fixed(const DeerFixed& fx) {
  if (!(fx.omega_mhz > 0.0 && fx.t_b_us > 0.0 && fx.t_b_delay_us > 0.0)) {
    throw InvalidArgument("DEER fit: Omega, t_b and T_B must be positive");
  }
}

}  // namespace

PeakConcentrationFit fit_concentration_peak(const SpectrumTrace& trace, const DeerFixed& fx, const DeerLine& line,
                                            double n_seed_ppb) {
  trace.validate();
  check_fixed(fx);
  if (trace.size() < 6) throw InvalidData("fit_concentration_peak: need at least 6 points");
  const auto [xmin, xmax] = std::minmax_element(trace.x.begin(), trace.x.end());
  const double k = rate_per_ppb(fx) * fx.t_b_delay_us * line.amp;
  auto model = [fx, k](double f, const VectorXd& p) { return std::exp(-k * p(2) * line_transfer(fx, p(0), p(1), f)); };
  auto problem = make_problem(pointwise_residuals(trace, model), {"f_r", "gamma", "n_ppb"},
                              {line.f_r_mhz, std::max(line.gamma_mhz, 0.01), n_seed_ppb},
                              {*xmin, 1e-3, 0.0}, {*xmax, 30.0, 1e7},
                              {1.0, std::max(line.gamma_mhz, 0.1), std::max(n_seed_ppb, 1.0)});
  PeakConcentrationFit out;
  out.fit = least_squares(problem);
  out.f_r_mhz = out.fit.values(0);
  out.gamma_mhz = out.fit.values(1);
  out.n_ppb = out.fit.values(2);
  out.n_err = out.fit.std_errors(2);
  if (at_bound(out.fit, problem, 2)) out.fit.warnings.push_back("n_b at its bound");
  return out;
}

ConcentrationEstimate fit_concentration_spectrum(const SpectrumTrace& trace, const DeerFixed& fx,
                                                 const std::vector<DeerLine>& lines, int central_index,
                                                 double window_mhz, double n_seed_ppb) {
  trace.validate();
  ConcentrationEstimate est;
  est.species = Species::kP1;
  est.method = ConcentrationMethod::kSpectrum;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (static_cast<int>(i) == central_index) {
      est.central_excluded = true;
      continue;
    }
    const auto& line = lines[i];
    const auto local = trace.window(line.f_r_mhz - window_mhz, line.f_r_mhz + window_mhz);
    const auto fit = fit_concentration_peak(local, fx, line, n_seed_ppb);
    est.per_peak_values.push_back(fit.n_ppb);
    est.per_peak_errors.push_back(fit.n_err);
    est.per_peak_centers.push_back(fit.f_r_mhz);
    for (const auto& w : fit.fit.warnings) est.warnings.push_back("line " + fmt(line.f_r_mhz) + " MHz: " + w);
  }
  if (est.per_peak_values.empty()) throw InvalidArgument("fit_concentration_spectrum: no lines to fit");
  const auto agg = aggregate(est.per_peak_values);
  est.value_ppb = agg.mean;
  double s2 = 0.0;
  for (double e : est.per_peak_errors) s2 += e * e;
  est.propagated_error_ppb = std::sqrt(s2) / static_cast<double>(est.per_peak_errors.size());
  est.uncertainty_ppb = agg.count > 1 ? agg.std : est.propagated_error_ppb;
  return est;
}

ConcentrationEstimate fit_central_line_two_species(const SpectrumTrace& trace, double n_p1_fixed_ppb,
                                                   const DeerFixed& fx, const CentralLineModel& model) {
  trace.validate();
  check_fixed(fx);
  if (model.p1_lines.empty()) throw InvalidArgument("fit_central_line_two_species: no P1 lines");
  if (!(n_p1_fixed_ppb >= 0.0)) throw InvalidArgument("fit_central_line_two_species: n_P1 must be >= 0");
  double centre = 0.0, amp_total = 0.0;
  for (const auto& l : model.p1_lines) {
    centre += l.amp * l.f_r_mhz;
    amp_total += l.amp;
  }
  centre /= amp_total;
  const auto local = trace.window(centre - model.window_mhz, centre + model.window_mhz);
  if (local.size() < 8) throw InvalidData("fit_central_line_two_species: window holds fewer than 8 points");

  const double k = rate_per_ppb(fx) * fx.t_b_delay_us;
  const double p1_exponent_scale = k * n_p1_fixed_ppb;
  const auto lines = model.p1_lines;
  const double x_amp = model.x_line.amp;
  auto fmodel = [fx, k, p1_exponent_scale, lines, x_amp](double f, const VectorXd& p) {
    double p1 = 0.0;
    for (const auto& l : lines) p1 += l.amp * line_transfer(fx, l.f_r_mhz + p(0), p(1), f);
    const double px = x_amp * line_transfer(fx, p(2), p(3), f);
    return std::exp(-p1_exponent_scale * p1 - k * p(4) * px);
  };
  const double lo_f = centre - model.window_mhz, hi_f = centre + model.window_mhz;
  const double g0 = std::max(lines.front().gamma_mhz, 0.01);
  auto problem = make_problem(pointwise_residuals(local, fmodel), {"p1_shift", "p1_gamma", "f_x", "gamma_x", "n_x_ppb"},
                              {0.0, g0, model.x_line.f_r_mhz, std::max(model.x_line.gamma_mhz, 0.01), 10.0},
                              {-3.0, 1e-3, lo_f, 1e-3, 0.0}, {3.0, 30.0, hi_f, 30.0, 1e6},
                              {0.5, std::max(g0, 0.1), 3.0, 0.5, 10.0});
  const FitResult fit = least_squares_multistart(problem, model.seed, 5);

  ConcentrationEstimate est;
  est.species = Species::kX;
  est.method = ConcentrationMethod::kSpectrum;
  est.value_ppb = fit.values(4);
  est.uncertainty_ppb = fit.std_errors(4);
  est.propagated_error_ppb = fit.std_errors(4);
  est.per_peak_values = {fit.values(4)};
  est.per_peak_errors = {fit.std_errors(4)};
  est.per_peak_centers = {fit.values(2)};
  est.warnings = fit.warnings;
  if (!fit.converged) est.warnings.push_back("central-line fit did not converge");
  if (!(est.value_ppb > 2.0 * est.uncertainty_ppb)) {
    est.is_upper_bound = true;
    est.upper_bound_ppb = std::max(est.value_ppb, 0.0) + 2.0 * est.uncertainty_ppb;
  }
  return est;
}

ConcentrationEstimate fit_deer_decay(const SpectrumTrace& trace, double p_b, const DeerFixed& fx, Species species) {
  trace.validate();
  if (trace.size() < 8) throw InvalidData("fit_deer_decay: need at least 8 delay points");
  if (!(p_b > 0.0)) throw FitFailure("fit_deer_decay: P_B = 0 leaves n_b unidentifiable");
  const double k = rate_per_ppb(fx) * p_b;

  // log-linear seed
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  int m = 0;
  for (std::size_t i = 0; i < trace.size(); ++i) {
    if (trace.y[i] > 0.0) {
      const double ly = std::log(trace.y[i]);
      sx += trace.x[i];
      sy += ly;
      sxx += trace.x[i] * trace.x[i];
      sxy += trace.x[i] * ly;
      ++m;
    }
  }
  double slope = 0.0, icpt = 0.0;
  if (m >= 2 && (m * sxx - sx * sx) > 0.0) {
    slope = (m * sxy - sx * sy) / (m * sxx - sx * sx);
    icpt = (sy - slope * sx) / m;
  }
  const double a0 = m >= 2 ? std::exp(icpt) : 1.0;
  const double n0 = std::max(-slope / k, 1.0);
  auto model = [k](double t, const VectorXd& p) { return p(0) * std::exp(-k * p(1) * t); };
  auto problem = make_problem(pointwise_residuals(trace, model), {"amplitude", "n_ppb"}, {a0, n0}, {0.0, 0.0},
                              {kInf, 1e7}, {std::max(a0, 1e-3), std::max(n0, 1.0)});
  const FitResult fit = least_squares(problem);

  ConcentrationEstimate est;
  est.species = species;
  est.method = ConcentrationMethod::kDecay;
  est.value_ppb = fit.values(1);
  est.uncertainty_ppb = fit.std_errors(1);
  est.propagated_error_ppb = fit.std_errors(1);
  est.warnings = fit.warnings;
  if (!fit.converged) est.warnings.push_back("decay fit did not converge");
  // rises that exceed 3 sigma of the residual scatter
  const double scatter = std::sqrt(fit.chi2_reduced) * (trace.weighted() ? median(trace.sigma) : 1.0);
  std::vector<std::size_t> order(trace.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return trace.x[a] < trace.x[b]; });
  for (std::size_t i = 1; i < order.size(); ++i) {
    if (trace.y[order[i]] - trace.y[order[i - 1]] > 3.0 * std::sqrt(2.0) * scatter + 1e-12) {
      est.warnings.push_back("decay is non-monotone beyond noise near T_B = " + fmt(trace.x[order[i]]) + " us");
      break;
    }
  }
  return est;
}

HahnFit fit_hahn_decay(const SpectrumTrace& trace) {
  trace.validate();
  if (trace.size() < 5) throw InvalidData("fit_hahn_decay: need at least 5 points");
  for (std::size_t i = 0; i < trace.size(); ++i) {
    if (!(trace.x[i] >= 0.0)) throw InvalidData("fit_hahn_decay: delays must be >= 0");
  }
  const double a0 = *std::max_element(trace.y.begin(), trace.y.end());
  if (!(a0 > 0.0)) throw InvalidData("fit_hahn_decay: decay data must be positive");
  double t2 = span_of(trace) / 2.0;
  {
    std::vector<std::size_t> order(trace.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](auto a, auto b) { return trace.x[a] < trace.x[b]; });
    for (auto i : order) {
      if (trace.y[i] < a0 / std::exp(1.0)) {
        t2 = trace.x[i];
        break;
      }
    }
  }
  auto model = [](double x, const VectorXd& p) { return p(0) * std::exp(-std::pow(x / p(1), p(2))); };
  auto problem = make_problem(pointwise_residuals(trace, model), {"amplitude", "t2_us", "stretch"}, {a0, t2, 1.5},
                              {0.0, 1e-6, 0.2}, {kInf, kInf, 6.0}, {a0, t2, 1.0});
  HahnFit out;
  out.fit = least_squares(problem);
  out.t2_us = out.fit.values(1);
  out.t2_err = out.fit.std_errors(1);
  out.stretch = out.fit.values(2);
  out.stretch_err = out.fit.std_errors(2);
  return out;
}

bool EseemFit::consistent_with(double reference, double n_sigma) const {
  return std::abs(gamma_n_mhz_per_t - reference) <= n_sigma * gamma_n_err;
}

EseemFit fit_eseem(const SpectrumTrace& trace, double b0_mt) {
  trace.validate();
  if (!(b0_mt > 0.0)) throw InvalidArgument("fit_eseem: B0 must be positive");
  if (trace.size() < 8) throw InvalidData("fit_eseem: need at least 8 points");
  const double mean = std::accumulate(trace.y.begin(), trace.y.end(), 0.0) / static_cast<double>(trace.size());
  const auto seed = dominant_frequency(trace);
  const double span = span_of(trace);
  if (span * seed.freq < 2.0) throw InvalidData("fit_eseem: trace spans fewer than 2 modulation periods");
  auto model = [](double x, const VectorXd& p) { return p(0) * std::cos(2.0 * kPi * p(1) * x + p(2)) + p(3); };
  auto problem = make_problem(pointwise_residuals(trace, model), {"amplitude", "f_mhz", "phase", "offset"},
                              {std::max(seed.amplitude, 1e-6), seed.freq, seed.phase, mean},
                              {0.0, 0.0, -4.0 * kPi, -kInf}, {kInf, kInf, 4.0 * kPi, kInf},
                              {std::max(seed.amplitude, 1e-3), seed.freq, 1.0, std::max(std::abs(mean), 1e-3)});
  EseemFit out;
  out.fit = least_squares(problem);
  out.f_mhz = out.fit.values(1);
  out.f_err = out.fit.std_errors(1);
  const double b0_t = b0_mt * 1e-3;
  out.gamma_n_mhz_per_t = 2.0 * out.f_mhz / b0_t;
  out.gamma_n_err = 2.0 * out.f_err / b0_t;
  return out;
}

SaturationFit fit_saturation(const SpectrumTrace& trace, const std::optional<SpectrumTrace>& background) {
  trace.validate();
  if (trace.size() < 4) throw InvalidData("fit_saturation: need at least 4 points");
  SpectrumTrace data = trace;
  if (background) {
    background->validate();
    if (background->size() < 2) throw InvalidData("fit_saturation: background needs at least 2 points");
    std::vector<std::size_t> order(background->size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](auto a, auto b) { return background->x[a] < background->x[b]; });
    auto interp = [&](double p) {
      const auto& bx = background->x;
      const auto& by = background->y;
      if (p <= bx[order.front()]) return by[order.front()];
      if (p >= bx[order.back()]) return by[order.back()];
      for (std::size_t i = 1; i < order.size(); ++i) {
        const auto a = order[i - 1], b = order[i];
        if (p <= bx[b]) return by[a] + (by[b] - by[a]) * (p - bx[a]) / (bx[b] - bx[a]);
      }
      return by[order.back()];
    };
    for (std::size_t i = 0; i < data.size(); ++i) data.y[i] -= interp(data.x[i]);
  }
  const double ymax = *std::max_element(data.y.begin(), data.y.end());
  const double pmax = *std::max_element(data.x.begin(), data.x.end());
  if (!(ymax > 0.0)) throw FitFailure("fit_saturation: no signal above background");
  const double p0 = median(data.x);
  auto model = [](double p, const VectorXd& q) { return q(0) * p / (q(1) + p); };
  auto problem = make_problem(pointwise_residuals(data, model), {"f_sat", "p_sat"}, {1.5 * ymax, p0}, {0.0, 1e-12},
                              {kInf, kInf}, {ymax, std::max(p0, 1e-6)});
  SaturationFit out;
  out.fit = least_squares(problem);
  out.f_sat = out.fit.values(0);
  out.f_sat_err = out.fit.std_errors(0);
  out.p_sat = out.fit.values(1);
  out.p_sat_err = out.fit.std_errors(1);
  if (pmax < 0.5 * out.p_sat) out.fit.warnings.push_back("data stay below 0.5 P_sat: saturation poorly constrained");
  return out;
}

ValueWithError nv_count(ValueWithError ens, ValueWithError single) {
  if (!(single.value > 0.0)) throw InvalidArgument("nv_count: single-NV F_sat must be positive");
  const double n = ens.value / single.value;
  const double rel = std::hypot(ens.value != 0.0 ? ens.error / ens.value : 0.0, single.error / single.value);
  return {n, std::abs(n) * rel};
}

ValueWithError nv_count(const SaturationFit& ensemble, const SaturationFit& single) {
  return nv_count(ValueWithError{ensemble.f_sat, ensemble.f_sat_err}, ValueWithError{single.f_sat, single.f_sat_err});
}

std::vector<double> growth_sector_ratios(const std::vector<std::vector<double>>& counts, std::size_t ref) {
  if (ref >= counts.size()) throw InvalidArgument("growth_sector_ratios: reference sector out of range");
  const std::size_t n_dose = counts[ref].size();
  if (n_dose == 0) throw InvalidArgument("growth_sector_ratios: no doses");
  for (const auto& c : counts) {
    if (c.size() != n_dose) throw InvalidArgument("growth_sector_ratios: sectors must share the dose list");
  }
  std::vector<double> out(counts.size(), 0.0);
  for (std::size_t d = 0; d < n_dose; ++d) {
    if (!(counts[ref][d] > 0.0)) throw InvalidData("growth_sector_ratios: reference count must be positive");
    for (std::size_t s = 0; s < counts.size(); ++s) out[s] += counts[s][d] / counts[ref][d];
  }
  for (auto& v : out) v /= static_cast<double>(n_dose);
  return out;
}

Aggregate aggregate(const std::vector<double>& values) {
  Aggregate a;
  a.count = values.size();
  if (values.empty()) return a;
  a.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(a.count);
  if (a.count > 1) {
    double s = 0.0;
    for (double v : values) s += (v - a.mean) * (v - a.mean);
    a.std = std::sqrt(s / static_cast<double>(a.count - 1));
    a.sem = a.std / std::sqrt(static_cast<double>(a.count));
  }
  return a;
}

DiffusionResult diffusion_from_volume(double volume_um3, double r_vac_nm, double anneal_s) {
  if (!(volume_um3 > 0.0 && r_vac_nm > 0.0 && anneal_s > 0.0)) {
    throw InvalidArgument("diffusion: inputs must be positive");
  }
  DiffusionResult d;
  d.volume_um3 = volume_um3;
  d.r_nv_nm = std::cbrt(3.0 * volume_um3 / (4.0 * kPi)) * 1e3;
  const double d2 = d.r_nv_nm * d.r_nv_nm - r_vac_nm * r_vac_nm;
  if (d2 < 0.0) throw InvalidData("diffusion: NV radius below the vacancy radius (negative diffusion)");
  d.d_rms_nm = std::sqrt(d2);
  d.d_nm2_per_s = d2 / (6.0 * anneal_s);
  return d;
}

DiffusionResult diffusion_coefficient(double n_nv_ppb, double count, double r_vac_nm, double anneal_s) {
  if (!(n_nv_ppb > 0.0 && count > 0.0)) throw InvalidArgument("diffusion: inputs must be positive");
  return diffusion_from_volume(count / units::ppb_to_per_um3(n_nv_ppb), r_vac_nm, anneal_s);
}

namespace {

/// Least-squares line through the points with index in [0, k) and [n - k, n).
std::pair<double, double> edge_line(const std::vector<double>& x, const std::vector<double>& y, std::size_t k) {
  const std::size_t n = x.size();
  double sx = 0, sy = 0, sxx = 0, sxy = 0, m = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (i >= k && i + k < n) continue;
    sx += x[i];
    sy += y[i];
    sxx += x[i] * x[i];
    sxy += x[i] * y[i];
    m += 1;
  }
  const double den = m * sxx - sx * sx;
  if (den == 0.0) return {sy / m, 0.0};
  const double slope = (m * sxy - sx * sy) / den;
  return {(sy - slope * sx) / m, slope};
}

std::vector<double> cumulative_trapezoid(const std::vector<double>& x, const std::vector<double>& y) {
  std::vector<double> out(x.size(), 0.0);
  for (std::size_t i = 1; i < x.size(); ++i) out[i] = out[i - 1] + 0.5 * (y[i] + y[i - 1]) * (x[i] - x[i - 1]);
  return out;
}

}  // namespace

DoubleIntegral double_integral(const std::vector<double>& field, const std::vector<double>& derivative,
                               double edge_fraction) {
  const std::size_t n = field.size();
  if (n != derivative.size()) throw InvalidData("double_integral: length mismatch");
  if (n < 10) throw InvalidData("double_integral: need at least 10 points");
  if (!(edge_fraction > 0.0 && edge_fraction < 0.5)) throw InvalidArgument("double_integral: edge fraction in (0, 0.5)");
  for (std::size_t i = 1; i < n; ++i) {
    if (!(field[i] > field[i - 1])) throw InvalidData("double_integral: field must increase strictly");
  }
  const std::size_t k = std::max<std::size_t>(2, static_cast<std::size_t>(edge_fraction * static_cast<double>(n)));

  std::vector<double> d = derivative;
  const auto [c0, s0] = edge_line(field, d, k);
  for (std::size_t i = 0; i < n; ++i) d[i] -= c0 + s0 * field[i];
  std::vector<double> absorption = cumulative_trapezoid(field, d);
  const auto [c1, s1] = edge_line(field, absorption, k);
  std::vector<double> base(n);
  for (std::size_t i = 0; i < n; ++i) {
    base[i] = c1 + s1 * field[i];
    absorption[i] -= base[i];
  }
  DoubleIntegral out;
  out.value = cumulative_trapezoid(field, absorption).back();
  out.baseline_drift = cumulative_trapezoid(field, base).back();
  if (std::abs(out.baseline_drift) > 0.1 * std::abs(out.value)) {
    out.warnings.push_back("baseline drift exceeds 10% of the double integral");
  }
  return out;
}

double epr_concentration(double di_sample, double mass_sample_mg, double di_ref, double mass_ref_mg, double n_ref_ppm) {
  if (!(di_ref > 0.0 && mass_ref_mg > 0.0 && n_ref_ppm > 0.0 && mass_sample_mg > 0.0)) {
    throw InvalidArgument("epr_concentration: reference values and masses must be positive");
  }
  return n_ref_ppm * 1e3 * (di_sample / mass_sample_mg) / (di_ref / mass_ref_mg);
}

}  // namespace nvdeer
