#include "sbc/kernel.hpp"

#include <cmath>

namespace sbc {

KernelMatrix KernelMatrix::build(int timesteps, double tau_m) {
  if (timesteps < 1)
    throw InvalidArgument("KernelMatrix: timesteps must be >= 1");
  if (!is_if_tau(tau_m)) {
    if (std::isnan(tau_m) || tau_m < 1.0)
      throw InvalidTau("KernelMatrix: tau_m = " + std::to_string(tau_m) +
                       " outside [1, inf]");
  }
  KernelMatrix km;
  km.timesteps_ = timesteps;
  km.tau_ = tau_m;
  km.k_ = Vector(timesteps);
  if (is_if_tau(tau_m)) {
    km.k_.setOnes();
  } else {
    const double decay = 1.0 - 1.0 / tau_m;
    double v = 1.0 / tau_m;
    for (int t = 0; t < timesteps; ++t) {
      km.k_[t] = v;
      v *= decay;
    }
  }
  km.identity_ = tau_m == 1.0;
  km.m_ = Matrix::Zero(timesteps, timesteps);
  for (int i = 0; i < timesteps; ++i)
    for (int j = 0; j <= i; ++j) km.m_(i, j) = km.k_[i - j];
  return km;
}

double vrd(const Matrix& s, const Matrix& s_hat, const KernelMatrix& m) {
  if (s.rows() != s_hat.rows() || s.cols() != s_hat.cols())
    throw ShapeMismatch("vrd: spike train shapes differ");
  if (s.rows() != m.timesteps())
    throw ShapeMismatch("vrd: train has " + std::to_string(s.rows()) +
                        " timesteps, kernel expects " +
                        std::to_string(m.timesteps()));
  Matrix diff = s - s_hat;
  if (m.identity()) return diff.squaredNorm();
  return (m.matrix() * diff).squaredNorm();
}

}  // namespace sbc
