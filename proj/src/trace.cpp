#include "nvdeer/trace.hpp"

#include "nvdeer/errors.hpp"

#include <cmath>

namespace nvdeer {

void SpectrumTrace::validate() const {
  if (x.size() != y.size()) throw InvalidData("trace: x and y lengths differ");
  if (!sigma.empty() && sigma.size() != x.size()) throw InvalidData("trace: sigma length differs from x");
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!std::isfinite(x[i]) || !std::isfinite(y[i])) {
      throw InvalidData("trace: non-finite value at point " + std::to_string(i));
    }
    if (!sigma.empty() && !(sigma[i] > 0.0)) {
      throw InvalidData("trace: sigma must be positive at point " + std::to_string(i));
    }
  }
}

SpectrumTrace SpectrumTrace::window(double lo, double hi) const {
  SpectrumTrace out;
  out.x_name = x_name;
  out.x_unit = x_unit;
  out.y_name = y_name;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (x[i] < lo || x[i] > hi) continue;
    out.x.push_back(x[i]);
    out.y.push_back(y[i]);
    if (!sigma.empty()) out.sigma.push_back(sigma[i]);
  }
  return out;
}

}  // namespace nvdeer
