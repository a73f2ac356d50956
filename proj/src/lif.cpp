#include "sbc/lif.hpp"

#include <cmath>

namespace sbc {

void LIFParams::validate() const {
  if (!is_if() && (std::isnan(tau_m) || tau_m < 1.0))
    throw InvalidTau("LIFParams: tau_m = " + std::to_string(tau_m) +
                     " outside [1, inf]");
  if (!std::isfinite(v_th) || v_th <= 0.0)
    throw InvalidArgument("LIFParams: v_th must be finite and positive");
}

LIFTrace lif_forward(const Matrix& currents, const LIFParams& p) {
  p.validate();
  const Eigen::Index t_steps = currents.rows();
  const Eigen::Index n = currents.cols();
  if (t_steps < 1) throw ShapeMismatch("lif_forward: empty current trace");

  const bool integrate_only = p.is_if();
  const double decay = integrate_only ? 1.0 : 1.0 - 1.0 / p.tau_m;
  const double gain = integrate_only ? 1.0 : 1.0 / p.tau_m;

  LIFTrace out;
  out.spikes = Matrix::Zero(t_steps, n);
  out.membrane = Matrix::Zero(t_steps, n);
  Vector v = Vector::Zero(n);
  for (Eigen::Index t = 0; t < t_steps; ++t) {
    for (Eigen::Index j = 0; j < n; ++j) {
      double u = decay * v[j] + gain * currents(t, j);
      double s = u >= p.v_th ? 1.0 : 0.0;
      out.membrane(t, j) = u;
      out.spikes(t, j) = s;
      v[j] = u * (1.0 - s);
    }
  }
  return out;
}

}  // namespace sbc
