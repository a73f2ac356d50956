#pragma once

#include "sbc/common.hpp"
#include "sbc/kernel.hpp"

namespace sbc {

/// Leaky integrate-and-fire parameters. tau_m = kIfTau selects IF dynamics
/// (thresholds for IF modules follow the unscaled-current convention, see
/// lif_forward). Hard reset to 0; initial potential 0.
struct LIFParams {
  double tau_m = 2.0;
  double v_th = 1.0;

  void validate() const;
  bool is_if() const { return is_if_tau(tau_m); }
};

/// Membrane traces produced by a simulation: S is binary, U is the
/// pre-reset potential at each step. Both are T x neurons.
struct LIFTrace {
  Matrix spikes;
  Matrix membrane;
};

/// Simulate a layer of independent neurons driven by the input currents
/// I (T x neurons):
///   leaky: U[t] = (1 - 1/tau_m) V[t-1] + I[t]/tau_m
///   IF:    U[t] = V[t-1] + I[t]
/// A spike fires when U[t] >= v_th (threshold crossing counts as a spike);
/// V[t] = U[t] (1 - S[t]).
LIFTrace lif_forward(const Matrix& currents, const LIFParams& p);

}  // namespace sbc
