#pragma once

#include <Eigen/Dense>

#include <array>
#include <span>
#include <string>

namespace nvdeer {

using CMatrix = Eigen::MatrixXcd;
using CVector = Eigen::VectorXcd;
using RVector = Eigen::VectorXd;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

/// Angular momentum operators for a single spin S in the |S, m> basis with
/// m descending (m = S, S-1, ..., -S). Dimensionless, hbar = 1.
struct SpinOperatorSet {
  double spin = 0.0;
  CMatrix sx;
  CMatrix sy;
  CMatrix sz;

  int dim() const { return static_cast<int>(sz.rows()); }
  /// n . S for a real 3-vector n.
  CMatrix dot(const Vec3& n) const;
  /// The same operators embedded at `slot` of a composite space.
  SpinOperatorSet embedded(int slot, std::span<const int> dims) const;
};

/// Throws InvalidArgument unless 2S is a non-negative integer.
SpinOperatorSet spin_operators(double spin);

/// R = Rz(theta_z) * Ry(theta_y), angles in degrees.
Mat3 rotation_matrix(double theta_y_deg, double theta_z_deg);

enum class OrientationLabel { k111, kBar111, k1Bar11, k11Bar1 };

/// One of the four <111> bond directions. The [111] family is the lab z axis;
/// the others are reached by a 109.5 deg tilt about y followed by a turn of
/// 0/120/240 deg about z.
struct Orientation {
  OrientationLabel label = OrientationLabel::k111;
  double theta_y_deg = 0.0;
  double theta_z_deg = 0.0;

  static Orientation of(OrientationLabel label);
  static std::array<Orientation, 4> all();

  Mat3 rotation() const { return rotation_matrix(theta_y_deg, theta_z_deg); }
  bool on_axis() const { return label == OrientationLabel::k111; }
  std::string name() const;
};

/// Static field plus microwave drive.
///
/// B0 is tilted by `tilt_deg` from z inside the xz plane. The drive vector
/// e1 defaults to x.
struct FieldConfiguration {
  double b0_mt = 0.0;
  double tilt_deg = 0.0;
  double rabi_mhz = 0.0;
  Vec3 drive_dir = Vec3::UnitX();
  double drive_freq_mhz = 0.0;

  Vec3 b0_vector() const;
  /// Throws InvalidArgument when an invariant is violated.
  void validate() const;
};

/// Kronecker embedding op at `slot` with identities on every other factor.
CMatrix tensor_embed(const CMatrix& op, int slot, std::span<const int> dims);

struct Eigensystem {
  RVector values;   // ascending
  CMatrix vectors;  // columns, orthonormal, largest component real-positive
};

/// Hermitian eigendecomposition. Throws InvalidArgument when the input is not
/// Hermitian to 1e-9 relative.
Eigensystem eigensystem(const CMatrix& h);

/// Max |H - H^dagger| relative to max |H| (0 for the zero matrix).
double hermiticity_defect(const CMatrix& h);

}  // namespace nvdeer
