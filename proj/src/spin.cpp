#include "nvdeer/spin.hpp"

#include "nvdeer/errors.hpp"
#include "nvdeer/units.hpp"

#include <Eigen/Eigenvalues>
#include <unsupported/Eigen/KroneckerProduct>

#include <cmath>
#include <complex>
#include <numeric>

namespace nvdeer {

using cd = std::complex<double>;

CMatrix SpinOperatorSet::dot(const Vec3& n) const {
  return n.x() * sx + n.y() * sy + n.z() * sz;
}

SpinOperatorSet SpinOperatorSet::embedded(int slot, std::span<const int> dims) const {
  return {spin, tensor_embed(sx, slot, dims), tensor_embed(sy, slot, dims),
          tensor_embed(sz, slot, dims)};
}

SpinOperatorSet spin_operators(double spin) {
  const double twice = 2.0 * spin;
  if (!(spin >= 0.0) || std::abs(twice - std::round(twice)) > 1e-12) {
    throw InvalidArgument("spin quantum number must be a non-negative half-integer, got " +
                          std::to_string(spin));
  }
  const int dim = static_cast<int>(std::lround(twice)) + 1;
  CMatrix sz = CMatrix::Zero(dim, dim);
  CMatrix splus = CMatrix::Zero(dim, dim);
  for (int i = 0; i < dim; ++i) {
    const double m = spin - i;
    sz(i, i) = m;
    if (i > 0) {
      // <m+1| S+ |m>
      splus(i - 1, i) = std::sqrt(spin * (spin + 1.0) - m * (m + 1.0));
    }
  }
  const CMatrix sminus = splus.adjoint();
  SpinOperatorSet ops;
  ops.spin = spin;
  ops.sx = 0.5 * (splus + sminus);
  ops.sy = cd(0.0, -0.5) * (splus - sminus);
  ops.sz = sz;
  return ops;
}

Mat3 rotation_matrix(double theta_y_deg, double theta_z_deg) {
  const Mat3 ry = Eigen::AngleAxisd(units::deg_to_rad(theta_y_deg), Vec3::UnitY()).toRotationMatrix();
  const Mat3 rz = Eigen::AngleAxisd(units::deg_to_rad(theta_z_deg), Vec3::UnitZ()).toRotationMatrix();
  return rz * ry;
}

Orientation Orientation::of(OrientationLabel label) {
  switch (label) {
    case OrientationLabel::k111:
      return {label, 0.0, 0.0};
    case OrientationLabel::kBar111:
      return {label, 109.5, 0.0};
    case OrientationLabel::k1Bar11:
      return {label, 109.5, 120.0};
    case OrientationLabel::k11Bar1:
      return {label, 109.5, 240.0};
  }
  throw InvalidArgument("unknown orientation label");
}

std::array<Orientation, 4> Orientation::all() {
  return {of(OrientationLabel::k111), of(OrientationLabel::kBar111),
          of(OrientationLabel::k1Bar11), of(OrientationLabel::k11Bar1)};
}

std::string Orientation::name() const {
  switch (label) {
    case OrientationLabel::k111:
      return "[111]";
    case OrientationLabel::kBar111:
      return "[-111]";
    case OrientationLabel::k1Bar11:
      return "[1-11]";
    case OrientationLabel::k11Bar1:
      return "[11-1]";
  }
  return "?";
}

Vec3 FieldConfiguration::b0_vector() const {
  // tilt lies in the xz plane
  const double t = units::deg_to_rad(tilt_deg);
  return b0_mt * Vec3(std::sin(t), 0.0, std::cos(t));
}

void FieldConfiguration::validate() const {
  if (!(b0_mt >= 0.0)) throw InvalidArgument("field.b0_mt must be >= 0");
  if (!(rabi_mhz >= 0.0)) throw InvalidArgument("field.rabi_mhz must be >= 0");
  if (std::abs(drive_dir.norm() - 1.0) > 1e-12) {
    throw InvalidArgument("field.drive_dir must be a unit vector");
  }
}

CMatrix tensor_embed(const CMatrix& op, int slot, std::span<const int> dims) {
  if (slot < 0 || slot >= static_cast<int>(dims.size())) {
    throw InvalidArgument("tensor_embed: slot out of range");
  }
  if (op.rows() != op.cols() || op.rows() != dims[slot]) {
    throw InvalidArgument("tensor_embed: operator dimension does not match dims[slot]");
  }
  CMatrix result = CMatrix::Identity(1, 1);
  for (int k = 0; k < static_cast<int>(dims.size()); ++k) {
    if (dims[k] <= 0) throw InvalidArgument("tensor_embed: dims must be positive");
    const CMatrix factor = (k == slot) ? op : CMatrix::Identity(dims[k], dims[k]);
    result = Eigen::kroneckerProduct(result, factor).eval();
  }
  return result;
}

double hermiticity_defect(const CMatrix& h) {
  const double scale = h.cwiseAbs().maxCoeff();
  if (scale == 0.0) return 0.0;
  return (h - h.adjoint()).cwiseAbs().maxCoeff() / scale;
}

Eigensystem eigensystem(const CMatrix& h) {
  if (h.rows() != h.cols()) throw InvalidArgument("eigensystem: matrix is not square");
  if (hermiticity_defect(h) > 1e-9) throw InvalidArgument("eigensystem: matrix is not Hermitian");
  Eigen::SelfAdjointEigenSolver<CMatrix> solver(h);
  if (solver.info() != Eigen::Success) throw NumericFailure("eigensystem: solver did not converge");
  Eigensystem es{solver.eigenvalues(), solver.eigenvectors()};
  for (Eigen::Index c = 0; c < es.vectors.cols(); ++c) {
    Eigen::Index best = 0;
    double best_abs = -1.0;
    for (Eigen::Index r = 0; r < es.vectors.rows(); ++r) {
      // first index wins ties so the phase choice is reproducible
      const double a = std::abs(es.vectors(r, c));
      if (a > best_abs + 1e-12) {
        best_abs = a;
        best = r;
      }
    }
    const cd pivot = es.vectors(best, c);
    es.vectors.col(c) *= std::conj(pivot) / std::abs(pivot);
  }
  return es;
}

}  // namespace nvdeer
