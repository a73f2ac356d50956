#pragma once

#include "sbc/common.hpp"
#include "sbc/graph.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace sbc {

/// Synaptic-operation counts: one operation per input spike per nonzero
/// outgoing synapse. Modules fed by real-valued network input are tallied
/// separately as multiply-accumulates (same rule, nonzero input entries).
struct SopsModuleStats {
  int index = 0;
  std::string name;
  bool real_input = false;  // tallied under macs instead of sops
  std::uint64_t ops_total = 0;
  double ops_avg = 0.0;  // per sample
};

struct SopsReport {
  std::vector<SopsModuleStats> modules;
  std::uint64_t sops_total = 0;
  double sops_avg = 0.0;
  std::uint64_t macs_total = 0;
  double macs_avg = 0.0;
  long samples = 0;
};

/// Exact integer operation counts over a dataset. input_is_real marks the
/// network input as encoded static data rather than spikes.
SopsReport count_sops(const NetworkSpec& net,
                      const std::vector<Matrix>& samples,
                      bool input_is_real = false, int workers = 1);

/// Spike-train agreement between two same-topology networks.
struct FidelityReport {
  double output_vrd = 0.0;  // mean over samples, final spike trains
  std::vector<double> module_vrd;  // mean over samples, netA-driven inputs
};

FidelityReport fidelity(const NetworkSpec& net_a, const NetworkSpec& net_b,
                        const std::vector<Matrix>& samples, int workers = 1);

/// Spike-count argmax readout; ties resolve to the lowest class index.
double accuracy(const NetworkSpec& net, const std::vector<Matrix>& samples,
                const std::vector<int>& labels, int workers = 1);

int predict_class(const Matrix& output_spikes);

}  // namespace sbc
