#pragma once

#include "sbc/common.hpp"
#include "sbc/kernel.hpp"

#include <string>
#include <vector>

namespace sbc {

enum class HessianMode { SMP, OBC };

/// Accumulates a module's averaged curvature proxy over calibration inputs:
///   SMP: H = (2/N) sum (M X)^T (M X)
///   OBC: H = (2/N) sum X^T X
/// Accumulation is entrywise compensated, so sample ordering moves the total
/// by a few ulps at most.
class HessianState {
 public:
  HessianState(int dim, HessianMode mode, const KernelMatrix* kernel);

  void accumulate(const Matrix& x);
  void merge(const HessianState& other);

  int dim() const { return dim_; }
  HessianMode mode() const { return mode_; }
  long sample_count() const { return count_; }

  /// Averaged H plus its dampened inverse. Requires >= 1 sample.
  std::pair<Matrix, Matrix> finalize(double damp) const;
  Matrix average() const;

 private:
  int dim_;
  HessianMode mode_;
  const KernelMatrix* kernel_;
  KahanMatrixSum accum_;
  long count_ = 0;
};

/// Shard accumulation over fixed chunks of the capture list and merge in
/// chunk order; the result is independent of the worker count.
HessianState accumulate_captures(const std::vector<Matrix>& captures, int dim,
                                 HessianMode mode, const KernelMatrix* kernel,
                                 int workers);

/// Debug dump: row-major 64-bit floats in <path>.bin plus a JSON sidecar
/// <path>.json describing dim/mode/sample count.
void dump_hessian(const std::string& path_base, const HessianState& state);

}  // namespace sbc
