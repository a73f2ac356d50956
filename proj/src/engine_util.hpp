#pragma once

#include "sbc/graph.hpp"
#include "sbc/kernel.hpp"

#include <chrono>
#include <vector>

namespace sbc::detail {

struct BoundNetwork {
  NetworkSpec net;  // folded working copy
  std::vector<LayerGeometry> geo;
  std::vector<ModuleRef> refs;
  std::vector<ModuleView> views;
};

inline BoundNetwork bind_network(const NetworkSpec& net) {
  BoundNetwork b;
  b.net = fold_network(net);
  b.geo = compute_geometry(b.net);
  b.refs = find_modules(b.net);
  b.views.reserve(b.refs.size());
  for (const auto& r : b.refs) b.views.emplace_back(b.net, b.geo, r);
  return b;
}

inline std::vector<int> compressible_rows(const LinearizedModule& lm) {
  std::vector<int> comp;
  comp.reserve(lm.compressible.size());
  for (std::size_t i = 0; i < lm.compressible.size(); ++i)
    if (lm.compressible[i]) comp.push_back(static_cast<int>(i));
  return comp;
}

/// Restrict every capture to the given columns; shares the input when no
/// restriction is needed.
inline std::vector<Matrix> slice_capture_cols(const ModuleCaptures& caps,
                                              const std::vector<int>& comp,
                                              int d_in) {
  if (static_cast<int>(comp.size()) == d_in) return caps;
  std::vector<Matrix> out;
  out.reserve(caps.size());
  for (const Matrix& x : caps) {
    Matrix xc(x.rows(), comp.size());
    for (std::size_t k = 0; k < comp.size(); ++k) xc.col(k) = x.col(comp[k]);
    out.push_back(std::move(xc));
  }
  return out;
}

/// mean_X ||M X delta||_F^2, compensated fixed-order accumulation.
inline double mean_kernel_loss(const std::vector<Matrix>& caps,
                               const KernelMatrix& km, const Matrix& delta) {
  if (caps.empty()) return 0.0;
  double sum = 0.0, comp = 0.0;
  for (const Matrix& x : caps) {
    Matrix cur = x * delta;
    double v = km.identity() ? cur.squaredNorm()
                             : (km.matrix() * cur).squaredNorm();
    double t = sum + v;
    if (std::abs(sum) >= std::abs(v))
      comp += (sum - t) + v;
    else
      comp += (v - t) + sum;
    sum = t;
  }
  return (sum + comp) / static_cast<double>(caps.size());
}

inline double now_ms() {
  return std::chrono::duration<double, std::milli>(
             std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

}  // namespace sbc::detail
