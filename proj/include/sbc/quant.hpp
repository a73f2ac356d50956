#pragma once

#include "sbc/common.hpp"
#include "sbc/graph.hpp"
#include "sbc/prune.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace sbc {

enum class QuantMethod { SBC, GptqObc, RTN };

std::string to_string(QuantMethod m);

/// Symmetric per-output-channel uniform grid with integer levels
/// {-2^(n-1), ..., 2^(n-1)-1}. The step anchors the channel's absolute
/// maximum to the positive extreme 2^(n-1)-1, so positive maxima are exactly
/// representable; all-zero channels get the sentinel step 1.
struct QuantGrid {
  int bits = 0;
  Vector delta;  // one step per output channel

  long level_min() const { return -(1L << (bits - 1)); }
  long level_max() const { return (1L << (bits - 1)) - 1; }
};

/// bits in [2, 16] (8 and below are the deployment range; wider grids are
/// supported for high-precision checks).
QuantGrid build_grid(const Matrix& w, int bits);

using CodeMatrix = Eigen::Matrix<std::int16_t, Eigen::Dynamic, Eigen::Dynamic>;

struct QuantizedModule {
  CodeMatrix codes;  // d_in x d_out
  QuantGrid grid;
  long rtn_fallback_rows = 0;  // rows finished by plain rounding (SBC path)
  Matrix reconstruct() const;
};

/// Nearest grid level for one weight; ties round toward zero; clamps to the
/// level bounds.
long nearest_level(double w, double delta, const QuantGrid& grid);

/// Independent per-weight rounding to the nearest grid value.
QuantizedModule rtn(const Matrix& w, const QuantGrid& grid);

/// Error-compensated quantization: visit rows in ascending order of the
/// initial Hinv diagonal (ties by index); after rounding a row, spread its
/// rounding error over not-yet-quantized rows through the inverse, then
/// downdate the inverse. A pivot underflow switches the remaining rows to
/// plain rounding (counted in rtn_fallback_rows).
QuantizedModule sbc_quantize(const Matrix& w, const QuantGrid& grid,
                             const Matrix& hinv);

struct QuantOptions {
  int bits = 4;
  QuantMethod method = QuantMethod::SBC;
  double damp = 0.01;
  bool one_pass_capture = false;
  int workers = 1;
  std::string hessian_dump_dir;
};

struct QuantResult {
  NetworkSpec net;  // folded, quantized (codes attached to layers)
  CompressionReport report;
};

/// Module-sequential quantization mirroring prune_network. SBC drives the
/// compensation with the kernel-weighted curvature, GPTQ-OBC with the plain
/// current curvature, RTN uses no curvature at all.
QuantResult quantize_network(const NetworkSpec& net,
                             const std::vector<Matrix>& calib,
                             const QuantOptions& opt);

}  // namespace sbc
