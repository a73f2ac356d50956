#pragma once

#include "sbc/common.hpp"
#include "sbc/graph.hpp"
#include "sbc/hessian.hpp"

#include <string>
#include <vector>

namespace sbc {

enum class PruneMethod { SBC, ExactOBS, MBP };

std::string to_string(PruneMethod m);

// ---------------------------------------------------------------------------
// LAMPS sparsity allocation
// ---------------------------------------------------------------------------

/// Per-layer magnitude scores on the ascending-magnitude order:
/// score(u) = w(u)^2 / sum_{v >= u} w(v)^2. The layer's largest-magnitude
/// weight scores exactly 1; all-zero tails score 0.
struct LampScoreTable {
  struct Entry {
    long weight_index;  // position in the layer's flat weight list
    double magnitude;
    double score;
  };
  std::vector<std::vector<Entry>> layers;  // ascending magnitude per layer
};

LampScoreTable lamp_scores(const std::vector<std::vector<double>>& magnitudes);

/// Global-to-per-layer pruning counts: take the floor(s * total) smallest
/// scores across layers; ties resolved by (layer index, weight index).
std::vector<long> lamps_allocate(
    const std::vector<std::vector<double>>& magnitudes, double sparsity);

// ---------------------------------------------------------------------------
// Per-neuron weight ordering (batched OBS removal)
// ---------------------------------------------------------------------------

struct OrderResult {
  std::vector<int> order;  // removal order over weight indices
  Vector losses;           // loss recorded at each weight's removal step
};

/// Iteratively retire weights in batches of b_in: score alive weights by
/// s_p = w_p^2 / Hinv(p,p), pick the smallest (ties by index), record their
/// losses, apply the group compensation, and downdate the inverse. Pivots
/// below 1e-12 score +inf and are retired last, without compensation.
/// A singular batch downdate retries the step with batch size 1.
OrderResult order_weights(const Vector& w, const Matrix& hinv, int b_in);

/// Zero the coordinates in p and redistribute their contribution:
/// returns w - Hinv(:,P) (Hinv_P)^-1 w_P with exact zeros on P. The result
/// minimizes (w' - w)^T H (w' - w) subject to w'_P = 0 for the H whose
/// inverse is hinv.
Vector apply_mask(const Vector& w, const IndexSet& p, const Matrix& hinv);

// ---------------------------------------------------------------------------
// Whole-network pruning
// ---------------------------------------------------------------------------

struct PruneOptions {
  double sparsity = 0.0;
  PruneMethod method = PruneMethod::SBC;
  int b_in = 16;
  int b_out = 32;
  double damp = 0.01;
  bool one_pass_capture = false;
  int workers = 1;
  std::string hessian_dump_dir;  // empty = no dump
};

struct ModuleCompressionStats {
  int index = 0;
  std::string name;
  int d_in = 0, d_out = 0, replication = 1;
  long prunable = 0;  // compressible weight count
  long pruned = 0;
  double sparsity = 0.0;
  double proxy_loss = 0.0;  // mean_X ||M X (W' - W)||_F^2, module kernel
  double wall_ms = 0.0;
  int bits = 0;                 // quantization runs only
  long rtn_fallback_rows = 0;   // quantization runs only
};

struct CompressionReport {
  std::string method;
  std::vector<ModuleCompressionStats> modules;
  long prunable_total = 0;
  long pruned_total = 0;
  double sparsity_total = 0.0;
  double proxy_loss_total = 0.0;
  double wall_ms_total = 0.0;
};

using MaskMatrix =
    Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic>;

struct PruneResult {
  NetworkSpec net;  // folded, compressed
  CompressionReport report;
  std::vector<MaskMatrix> masks;  // per module, 1 = pruned (full d_in x d_out)
};

/// Fold batchnorm, allocate per-module counts with LAMPS over compressible
/// weights, then compress modules in topological order. SBC uses the
/// kernel-weighted curvature, ExactOBS the plain current curvature, MBP
/// plain magnitudes without compensation.
PruneResult prune_network(const NetworkSpec& net,
                          const std::vector<Matrix>& calib,
                          const PruneOptions& opt);

}  // namespace sbc
