#pragma once

#include "sbc/common.hpp"

namespace sbc {

/// Sentinel time constant selecting integrate-and-fire semantics (no leak).
inline constexpr double kIfTau = std::numeric_limits<double>::infinity();

inline bool is_if_tau(double tau_m) {
  return std::isinf(tau_m) && tau_m > 0.0;
}

/// Causal exponential response kernel and its T x T lower-triangular Toeplitz
/// convolution matrix: M(i,j) = k(i-j) for j <= i.
///   leaky:  k(t) = (1 - 1/tau_m)^t / tau_m
///   IF:     k(t) = 1 (running sum; any positive constant is equivalent for
///           the relative comparisons downstream, unit scale avoids underflow)
/// tau_m = 1 degenerates to the identity matrix.
class KernelMatrix {
 public:
  /// Throws InvalidTau unless tau_m is the IF sentinel, exactly 1, or > 1.
  static KernelMatrix build(int timesteps, double tau_m);

  int timesteps() const { return timesteps_; }
  double tau() const { return tau_; }
  const Vector& kernel() const { return k_; }
  const Matrix& matrix() const { return m_; }
  bool identity() const { return identity_; }

 private:
  KernelMatrix() = default;
  int timesteps_ = 0;
  double tau_ = 0.0;
  bool identity_ = false;
  Vector k_;
  Matrix m_;
};

/// Squared van Rossum distance ||M s - M s_hat||_F^2 between spike trains
/// laid out T x neurons. Multi-neuron trains sum per-column distances.
double vrd(const Matrix& s, const Matrix& s_hat, const KernelMatrix& m);

}  // namespace sbc
