#pragma once

#include "sbc/common.hpp"
#include "sbc/graph.hpp"
#include "sbc/prune.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace sbc {

// Binary containers share one envelope: magic, u32 version, u64-length JSON
// manifest, u64-length payload sections. All integers little-endian; tensor
// payloads are row-major float32 (weights) or int16 (quantization codes).
// Byte layouts are documented in docs/formats.md.

inline constexpr std::uint32_t kFormatVersion = 1;

void save_model(const std::string& path, const NetworkSpec& net);
NetworkSpec load_model(const std::string& path);

/// Calibration/evaluation data: spike trains are stored bit-packed
/// (time-major, 8 per byte, LSB first); real-valued encodings store float32.
struct CalibData {
  int timesteps = 0;
  TensorShape shape;
  bool real_encoding = false;
  std::vector<Matrix> samples;  // each T x features
  std::vector<int> labels;      // empty, or one per sample

  int features() const { return shape.features(); }
  void validate() const;
};

void save_calib(const std::string& path, const CalibData& data);
CalibData load_calib(const std::string& path);

void save_masks(const std::string& path, const std::vector<MaskMatrix>& masks);
std::vector<MaskMatrix> load_masks(const std::string& path);

// ---------------------------------------------------------------------------
// Teacher task generation
// ---------------------------------------------------------------------------

struct TeacherOptions {
  std::uint64_t seed = 1;
  int classes = 10;
  int timesteps = 20;
  // Input and hidden widths; the output layer of size `classes` is appended.
  std::vector<int> sizes = {64, 48};
  int calib_samples = 500;
  int test_samples = 500;
  double rate = 0.3;  // Bernoulli spike probability per input channel/step
  double tau_m = 3.0;
  double v_th = 1.0;
};

struct TeacherTask {
  NetworkSpec model;
  CalibData calib;
  CalibData test;
  std::vector<double> layer_rates;  // measured mean firing rate per LIF layer
};

/// Random fully-connected spiking teacher plus Bernoulli datasets labeled by
/// the teacher's own readout. Per-layer weight scales are rejection-resampled
/// until every LIF layer's mean firing rate lies in [0.05, 0.5]; throws
/// RateUnattainable after 100 attempts for a layer. Deterministic per options.
TeacherTask gen_teacher_task(const TeacherOptions& opt);

}  // namespace sbc
