#pragma once

#include <string>
#include <vector>

namespace nvdeer {

/// A sampled signal against one independent variable (frequency, pulse
/// length or delay). `sigma` is either empty or one uncertainty per point.
struct SpectrumTrace {
  std::vector<double> x;
  std::vector<double> y;
  std::vector<double> sigma;
  std::string x_name = "x";
  std::string x_unit;
  std::string y_name = "y";

  std::size_t size() const { return x.size(); }
  bool weighted() const { return !sigma.empty(); }
  /// Throws InvalidData on length mismatch, non-finite values or sigma <= 0.
  void validate() const;
  /// Points with lo <= x <= hi.
  SpectrumTrace window(double lo, double hi) const;
};

}  // namespace nvdeer
