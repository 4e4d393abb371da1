#include "nvdeer/dynamics.hpp"

#include "nvdeer/errors.hpp"
#include "nvdeer/parallel.hpp"
#include "nvdeer/photophysics.hpp"

#include <Eigen/Eigenvalues>
#include <boost/numeric/odeint.hpp>

#include <algorithm>
#include <cmath>
#include <complex>
#include <sstream>

namespace nvdeer {

using cd = std::complex<double>;
constexpr double kTwoPi = 2.0 * units::kPi;

DensityMatrix::DensityMatrix(CMatrix rho, double tol) : rho_(std::move(rho)) {
  if (rho_.rows() != rho_.cols() || rho_.rows() == 0) throw InvalidArgument("density matrix must be square");
  if ((rho_ - rho_.adjoint()).cwiseAbs().maxCoeff() > tol) throw InvalidArgument("density matrix is not Hermitian");
  if (std::abs(rho_.trace().real() - 1.0) > tol) throw InvalidArgument("density matrix trace differs from 1");
  Eigen::SelfAdjointEigenSolver<CMatrix> solver(rho_, Eigen::EigenvaluesOnly);
  if (solver.eigenvalues().minCoeff() < -tol) throw InvalidArgument("density matrix has a negative eigenvalue");
}

DensityMatrix DensityMatrix::pure(const CVector& psi) {
  const CVector unit = psi.normalized();
  return DensityMatrix(unit * unit.adjoint());
}

DensityMatrix DensityMatrix::maximally_mixed(int dim) {
  return DensityMatrix(CMatrix::Identity(dim, dim) / static_cast<double>(dim));
}

double DensityMatrix::purity() const { return (rho_ * rho_).trace().real(); }

CMatrix PeriodicDrive::at(double t_us) const { return coupling * std::sin(kTwoPi * freq_mhz * t_us); }

PeriodicDrive make_drive(const FieldConfiguration& field, const SpinOperatorSet& ops) {
  return {2.0 * field.rabi_mhz * ops.dot(field.drive_dir), field.drive_freq_mhz};
}

namespace {

namespace odeint = boost::numeric::odeint;
using OdeState = std::vector<double>;

// rho packed as interleaved (re, im) in column-major order
void pack(const CMatrix& m, OdeState& out) {
  out.resize(2 * m.size());
  for (Eigen::Index k = 0; k < m.size(); ++k) {
    out[2 * k] = m.data()[k].real();
    out[2 * k + 1] = m.data()[k].imag();
  }
}

}  // namespace

DensityMatrix propagate(const CMatrix& h0, const DriveFunction& drive, const DensityMatrix& rho0,
                        double duration_us, const PropagationOptions& options) {
  if (!(options.rel_tol > 0.0)) throw InvalidArgument("propagate: tolerance must be positive");
  if (duration_us < 0.0) throw InvalidArgument("propagate: duration must be >= 0");
  if (h0.rows() != rho0.dim()) throw InvalidArgument("propagate: Hamiltonian and state dimensions differ");
  const int d = rho0.dim();

  auto rhs = [&](const OdeState& x, OdeState& dxdt, double t) {
    const CMatrix h = drive ? CMatrix(h0 + drive(t)) : h0;
    Eigen::Map<const CMatrix> rho(reinterpret_cast<const cd*>(x.data()), d, d);
    dxdt.resize(x.size());
    Eigen::Map<CMatrix> out(reinterpret_cast<cd*>(dxdt.data()), d, d);
    out.noalias() = h * rho;
    out.noalias() -= rho * h;
    out *= cd(0.0, -kTwoPi);
  };

  OdeState x;
  pack(rho0.matrix(), x);
  const double max_dt = options.max_step_us > 0.0 ? options.max_step_us : duration_us;
  auto stepper = odeint::make_controlled(options.abs_tol, options.rel_tol, max_dt,
                                         odeint::runge_kutta_fehlberg78<OdeState>());
  double t = 0.0;
  double dt = std::min(max_dt, duration_us) / 4.0;
  long steps = 0;
  long rejected = 0;
  while (t < duration_us) {
    if (t + dt > duration_us) dt = duration_us - t;
    if (dt < options.min_step_us && duration_us - t > options.min_step_us) {
      std::ostringstream msg;
      msg << "propagate: step size underflow at t=" << t << " us (dt=" << dt << ", accepted=" << steps
          << ", rejected=" << rejected << ")";
      throw IntegrationFailure(msg.str());
    }
    if (stepper.try_step(rhs, x, t, dt) == odeint::success) {
      ++steps;
    } else {
      ++rejected;
    }
    if (duration_us - t <= options.min_step_us) break;
  }
  Eigen::Map<const CMatrix> rho(reinterpret_cast<const cd*>(x.data()), d, d);
  try {
    return DensityMatrix(CMatrix(rho));
  } catch (const InvalidArgument& e) {
    throw IntegrationFailure(std::string("propagate: result is not a valid density matrix: ") + e.what());
  }
}

DensityMatrix propagate(const CMatrix& h0, const PeriodicDrive& drive, const DensityMatrix& rho0,
                        double duration_us, double rel_tol) {
  PropagationOptions opts;
  opts.rel_tol = rel_tol;
  opts.abs_tol = rel_tol * 1e-2;
  if (drive.freq_mhz > 0.0) opts.max_step_us = 1.0 / (20.0 * drive.freq_mhz);
  return propagate(h0, [&drive](double t) { return drive.at(t); }, rho0, duration_us, opts);
}

namespace {

class MagnusStepper {
 public:
  MagnusStepper(const CMatrix& h0, const PeriodicDrive& drive) : h0_(h0), drive_(drive) {}

  /// Propagator over [t0, t0 + h].
  CMatrix step(double t0, double h) const {
    static const double c = std::sqrt(3.0) / 6.0;
    const CMatrix h1 = h0_ + drive_.at(t0 + (0.5 - c) * h);
    const CMatrix h2 = h0_ + drive_.at(t0 + (0.5 + c) * h);
    const CMatrix comm = h2 * h1 - h1 * h2;
    CMatrix effective = (0.5 * h) * (h1 + h2) - cd(0.0, kTwoPi * std::sqrt(3.0) / 12.0 * h * h) * comm;
    effective = 0.5 * (effective + effective.adjoint()).eval();
    Eigen::SelfAdjointEigenSolver<CMatrix> solver(effective);
    const Eigen::VectorXcd phases =
        (solver.eigenvalues().cast<cd>() * cd(0.0, -kTwoPi)).array().exp().matrix();
    return solver.eigenvectors() * phases.asDiagonal() * solver.eigenvectors().adjoint();
  }

 private:
  const CMatrix& h0_;
  const PeriodicDrive& drive_;
};

CMatrix matrix_power(CMatrix base, long exponent) {
  CMatrix result = CMatrix::Identity(base.rows(), base.cols());
  while (exponent > 0) {
    if (exponent & 1) result = (result * base).eval();
    base = (base * base).eval();
    exponent >>= 1;
  }
  return result;
}

}  // namespace

CMatrix pulse_propagator(const CMatrix& h0, const PeriodicDrive& drive, double duration_us,
                         int substeps_per_period) {
  if (duration_us < 0.0) throw InvalidArgument("pulse_propagator: duration must be >= 0");
  if (substeps_per_period < 1) throw InvalidArgument("pulse_propagator: need at least one sub-step");
  const int d = static_cast<int>(h0.rows());
  if (duration_us == 0.0) return CMatrix::Identity(d, d);
  const MagnusStepper stepper(h0, drive);

  if (drive.freq_mhz <= 0.0 || drive.coupling.cwiseAbs().maxCoeff() == 0.0) {
    // static Hamiltonian: exact
    return stepper.step(0.0, duration_us);
  }
  const double period = 1.0 / drive.freq_mhz;
  const double h = period / substeps_per_period;
  const long whole_periods = static_cast<long>(std::floor(duration_us / period));

  CMatrix u = CMatrix::Identity(d, d);
  if (whole_periods > 0) {
    CMatrix one_period = CMatrix::Identity(d, d);
    for (int k = 0; k < substeps_per_period; ++k) one_period = (stepper.step(k * h, h) * one_period).eval();
    u = matrix_power(one_period, whole_periods);
  }
  // the drive phase restarts every period
  double remaining = duration_us - whole_periods * period;
  double t = 0.0;
  while (remaining > 1e-15 * period) {
    const double dt = std::min(h, remaining);
    u = (stepper.step(t, dt) * u).eval();
    t += dt;
    remaining -= dt;
  }
  return u;
}

double transition_probability(const DensityMatrix& rho_i, const DensityMatrix& rho_f) {
  if (rho_i.dim() != rho_f.dim()) throw InvalidArgument("transition_probability: dimension mismatch");
  const double p = 1.0 - (rho_i.matrix() * rho_f.matrix()).trace().real();
  return std::clamp(p, 0.0, 1.0);
}

std::vector<double> member_populations(const SpinSystem& system, const Vec3& b0_rotated,
                                       const InitialPopulations& initial) {
  const int dim = electron_operators(system).dim();
  if (auto it = initial.find(system.species); it != initial.end()) {
    if (static_cast<int>(it->second.size()) != dim) {
      throw InvalidArgument("initial populations for " + species_name(system.species) + " must have " +
                            std::to_string(dim) + " entries");
    }
    return it->second;
  }
  if (system.species == Species::kNV) {
    const auto& nv = std::get<NVParams>(system.params);
    const auto f = nv_level_populations(b0_rotated, 0.03, nv);
    return {f[0], f[1], f[2]};
  }
  return std::vector<double>(dim, 1.0 / dim);
}

namespace {

double transfer_from_unitary(const Eigensystem& es, const CMatrix& u, const std::vector<double>& pops) {
  double total = 0.0;
  for (int i = 0; i < static_cast<int>(pops.size()); ++i) {
    if (pops[i] == 0.0) continue;
    const cd overlap = es.vectors.col(i).dot(u * es.vectors.col(i));
    total += pops[i] * std::clamp(1.0 - std::norm(overlap), 0.0, 1.0);
  }
  return total;
}

struct PreparedMember {
  CMatrix h0;
  Eigensystem es;
  SpinOperatorSet ops;
  Vec3 drive_dir;
  std::vector<double> pops;
  double weight;
};

PreparedMember prepare(const SpinSystem& system, const FieldConfiguration& field,
                       const InitialPopulations& initial) {
  const auto rotated = apply_orientation(system, field);
  PreparedMember m;
  m.h0 = static_hamiltonian(system, rotated.b0_mt);
  m.es = eigensystem(m.h0);
  m.ops = electron_operators(system);
  m.drive_dir = rotated.drive_dir;
  m.pops = member_populations(system, rotated.b0_mt, initial);
  m.weight = system.weight;
  return m;
}

double prepared_transfer(const PreparedMember& m, double rabi_mhz, double f_mhz, double t_b_us) {
  const PeriodicDrive drive{2.0 * rabi_mhz * m.ops.dot(m.drive_dir), f_mhz};
  return m.weight * transfer_from_unitary(m.es, pulse_propagator(m.h0, drive, t_b_us), m.pops);
}

}  // namespace

double member_transfer(const SpinSystem& system, const FieldConfiguration& field, double t_b_us,
                       const InitialPopulations& initial) {
  field.validate();
  const auto m = prepare(system, field, initial);
  return prepared_transfer(m, field.rabi_mhz, field.drive_freq_mhz, t_b_us);
}

SpectrumTrace simulate_deer_spectrum(const std::vector<SpinSystem>& ensemble, const FieldConfiguration& field,
                                     double t_b_us, const std::vector<double>& f_grid_mhz,
                                     const InitialPopulations& initial) {
  field.validate();
  if (f_grid_mhz.empty()) throw InvalidArgument("simulate_deer_spectrum: empty frequency grid");
  if (!std::is_sorted(f_grid_mhz.begin(), f_grid_mhz.end())) {
    throw InvalidArgument("simulate_deer_spectrum: frequency grid must be ascending");
  }
  std::vector<PreparedMember> members;
  for (const auto& s : ensemble) members.push_back(prepare(s, field, initial));

  SpectrumTrace trace;
  trace.x = f_grid_mhz;
  trace.y.assign(f_grid_mhz.size(), 0.0);
  trace.x_name = "f_b";
  trace.x_unit = "MHz";
  trace.y_name = "p_b_sim";
  parallel_for(f_grid_mhz.size(), [&](std::size_t i) {
    double p = 0.0;
    for (const auto& m : members) p += prepared_transfer(m, field.rabi_mhz, f_grid_mhz[i], t_b_us);
    trace.y[i] = p;
  });
  return trace;
}

SpectrumTrace simulate_rabi(const SpinSystem& system, const FieldConfiguration& field,
                            const std::vector<double>& t_grid_us, const InitialPopulations& initial) {
  field.validate();
  auto m = prepare(system, field, initial);
  m.weight = 1.0;
  SpectrumTrace trace;
  trace.x = t_grid_us;
  trace.y.assign(t_grid_us.size(), 0.0);
  trace.x_name = "t_b";
  trace.x_unit = "us";
  trace.y_name = "p_b_sim";
  parallel_for(t_grid_us.size(), [&](std::size_t i) {
    trace.y[i] = prepared_transfer(m, field.rabi_mhz, field.drive_freq_mhz, t_grid_us[i]);
  });
  return trace;
}

double compute_sigma(const CMatrix& h0, const SpinOperatorSet& ops, int level_a, int level_b,
                     const Vec3& quant_axis) {
  const int n = static_cast<int>(h0.rows());
  if (level_a < 1 || level_a > n || level_b < 1 || level_b > n) {
    throw InvalidArgument("compute_sigma: level index out of range");
  }
  if (ops.dim() != n) throw InvalidArgument("compute_sigma: operator dimension mismatch");
  const auto es = eigensystem(h0);
  const CMatrix projected = ops.dot(quant_axis.normalized());
  auto expectation = [&](int level) {
    const CVector v = es.vectors.col(level - 1);
    return v.dot(projected * v).real();
  };
  return 0.5 * std::abs(expectation(level_a) - expectation(level_b));
}

std::vector<SpectralLine> spectral_lines(const std::vector<SpinSystem>& ensemble, const FieldConfiguration& field,
                                         const InitialPopulations& initial, double merge_tol_mhz) {
  std::vector<SpectralLine> raw;
  for (const auto& system : ensemble) {
    const auto rotated = apply_orientation(system, field);
    const auto pops = member_populations(system, rotated.b0_mt, initial);
    for (const auto& t : allowed_transitions(system, field)) {
      const double amp = system.weight * (pops[t.lower - 1] + pops[t.upper - 1]);
      raw.push_back({system.species, t.freq_mhz, amp, t.rabi_factor, 1});
    }
  }
  std::sort(raw.begin(), raw.end(), [](const auto& a, const auto& b) { return a.freq_mhz < b.freq_mhz; });
  std::vector<SpectralLine> out;
  for (const auto& l : raw) {
    if (!out.empty() && out.back().species == l.species && l.freq_mhz - out.back().freq_mhz <= merge_tol_mhz) {
      auto& m = out.back();
      const double a = m.amp + l.amp;
      if (a > 0.0) {
        m.freq_mhz = (m.freq_mhz * m.amp + l.freq_mhz * l.amp) / a;
        m.rabi_factor = (m.rabi_factor * m.amp + l.rabi_factor * l.amp) / a;
      }
      m.amp = a;
      m.multiplicity += 1;
    } else {
      out.push_back(l);
    }
  }
  return out;
}

double transition_frequency(const CMatrix& h0, int level_a, int level_b) {
  const auto es = eigensystem(h0);
  const int n = static_cast<int>(es.values.size());
  if (level_a < 1 || level_a > n || level_b < 1 || level_b > n) {
    throw InvalidArgument("transition_frequency: level index out of range");
  }
  return es.values(level_b - 1) - es.values(level_a - 1);
}

std::vector<double> linear_grid(double lo, double hi, double step) {
  if (!(step > 0.0) || hi < lo) throw InvalidArgument("linear_grid: need step > 0 and hi >= lo");
  std::vector<double> out;
  const long n = static_cast<long>(std::floor((hi - lo) / step + 1e-9));
  for (long i = 0; i <= n; ++i) out.push_back(lo + i * step);
  return out;
}

std::vector<double> refined_grid(double lo, double hi, const std::vector<double>& peaks, double half_width,
                                 double coarse, double fine) {
  auto grid = linear_grid(lo, hi, coarse);
  for (double p : peaks) {
    for (double f : linear_grid(std::max(lo, p - half_width), std::min(hi, p + half_width), fine)) {
      grid.push_back(f);
    }
  }
  std::sort(grid.begin(), grid.end());
  grid.erase(std::unique(grid.begin(), grid.end(), [fine](double a, double b) { return b - a < 1e-6 * fine; }),
             grid.end());
  return grid;
}

}  // namespace nvdeer
