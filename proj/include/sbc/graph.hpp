#pragma once

#include "sbc/common.hpp"
#include "sbc/lif.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <variant>
#include <vector>

namespace sbc {

/// Channel-major activation layout: feature index = c*(h*w) + y*w + x.
struct TensorShape {
  int c = 1;
  int h = 1;
  int w = 1;
  int features() const { return c * h * w; }
  bool operator==(const TensorShape& o) const {
    return c == o.c && h == o.h && w == o.w;
  }
  std::string str() const;
};

enum class LayerKind { Linear, Conv2d, BatchNorm, LIF, Flatten, Pool, Add };
enum class ShortcutMode { Concat, Ignore };

/// Per-output-channel integer codes with shared scales; attached to a layer
/// after quantization so the exact grid representation survives a save/load
/// round trip.
struct QuantInfo {
  int bits = 0;
  Eigen::Matrix<std::int16_t, Eigen::Dynamic, Eigen::Dynamic> codes;
  Vector scales;  // one step per output channel
};

struct LinearLayer {
  Matrix weight;  // d_in x d_out
  Vector bias;    // d_out, or empty for none
  std::optional<QuantInfo> quant;
};

struct Conv2dLayer {
  int in_ch = 0, out_ch = 0;
  int kh = 0, kw = 0;
  int stride = 1, pad = 0;
  // Lowered layout: row = c*(kh*kw) + r*kw + s, column = output channel.
  Matrix weight;
  Vector bias;
  std::optional<QuantInfo> quant;
  int patch_len() const { return in_ch * kh * kw; }
};

struct BatchNormLayer {
  Vector gamma, beta, mean, var;
  double eps = 1e-5;
};

struct LIFLayer {
  LIFParams params;
};

struct FlattenLayer {};

struct PoolLayer {
  int k = 2;
  int stride = 2;
};

struct AddLayer {
  int lhs = -1;
  int rhs = -1;
  ShortcutMode mode = ShortcutMode::Concat;
};

struct Layer {
  LayerKind kind;
  // Producing layer index; -1 means the previous layer (network input for
  // layer 0). Add layers use lhs/rhs instead.
  int input = -1;
  std::variant<LinearLayer, Conv2dLayer, BatchNormLayer, LIFLayer,
               FlattenLayer, PoolLayer, AddLayer>
      data;

  template <class T>
  T& as() { return std::get<T>(data); }
  template <class T>
  const T& as() const { return std::get<T>(data); }
};

struct NetworkSpec {
  TensorShape input_shape;
  std::vector<Layer> layers;

  int producer(int layer_idx) const;  // resolved input index, -1 = net input
  void push(Layer l) { layers.push_back(std::move(l)); }
};

// Convenience constructors used by tests and the teacher generator.
Layer make_linear(Matrix w, Vector b = Vector(), int input = -1);
Layer make_conv(int in_ch, int out_ch, int kh, int kw, int stride, int pad,
                Matrix w, Vector b = Vector(), int input = -1);
Layer make_batchnorm(Vector gamma, Vector beta, Vector mean, Vector var,
                     double eps = 1e-5, int input = -1);
Layer make_lif(double tau_m, double v_th, int input = -1);
Layer make_flatten(int input = -1);
Layer make_pool(int k, int stride, int input = -1);
Layer make_add(int lhs, int rhs, ShortcutMode mode);

/// Fully-connected spiking net: dims = {d0, d1, ..., dk}; one Linear+LIF per
/// consecutive pair, all sharing the given neuron parameters.
NetworkSpec make_mlp(const std::vector<int>& dims, double tau_m, double v_th);

// ---------------------------------------------------------------------------
// Static geometry
// ---------------------------------------------------------------------------

/// Column gather map for one convolution: for every output position, the
/// input feature index feeding each patch slot, or -1 for zero padding.
struct PatchMap {
  int out_h = 0, out_w = 0;
  int patch_len = 0;
  std::vector<std::vector<int>> source;  // positions x patch_len
  int positions() const { return out_h * out_w; }
};

PatchMap lower_conv(const Conv2dLayer& conv, const TensorShape& in_shape);

/// Identity gather map: position (y, x) of every channel reads feature
/// c*(h*w) + y*w + x. Used for parameter-free shortcut branches.
PatchMap identity_patches(const TensorShape& shape);

Matrix extract_patch(const Matrix& x, const PatchMap& pm, int pos);

struct LayerGeometry {
  TensorShape out_shape;
  std::optional<PatchMap> patches;  // conv layers only
};

/// Shape-propagates the whole layer list, validating connectivity and
/// dimensions. Throws ShapeMismatch / InvalidGeometry / InvalidArgument.
std::vector<LayerGeometry> compute_geometry(const NetworkSpec& net);

// ---------------------------------------------------------------------------
// Execution
// ---------------------------------------------------------------------------

struct Activation {
  Matrix values;  // T x features
  TensorShape shape;
};

/// Run the network on one sample (T x input features), returning every
/// layer's output. stop_after limits execution to layers [0, stop_after].
std::vector<Activation> forward_trace(const NetworkSpec& net,
                                      const std::vector<LayerGeometry>& geo,
                                      const Matrix& input,
                                      int stop_after = -1);

std::vector<Activation> forward_trace(const NetworkSpec& net,
                                      const Matrix& input,
                                      int stop_after = -1);

/// Final-layer output (spike train for LIF-terminated nets).
Matrix network_forward(const NetworkSpec& net, const Matrix& input);

// ---------------------------------------------------------------------------
// BatchNorm folding
// ---------------------------------------------------------------------------

/// Scale-and-shift absorption: W' = W * g/sqrt(var+eps) per output channel,
/// b' = (b - mean) * g/sqrt(var+eps) + beta. Works for linear and conv
/// layers (columns of the lowered weight are output channels either way).
void fold_batchnorm(Layer& conv_or_linear, const BatchNormLayer& bn);

/// Returns an equivalent network with every BatchNorm folded into its
/// producing linear/conv layer and removed from the layer list.
NetworkSpec fold_network(const NetworkSpec& net);

// ---------------------------------------------------------------------------
// Modules
// ---------------------------------------------------------------------------

/// One branch feeding a module join: a parameterized layer (param_layer >= 0)
/// or an identity pass-through (param_layer == -1, shortcut wires).
struct BranchRef {
  int param_layer = -1;
  int source_layer = -1;  // activation feeding the branch, -1 = net input
};

/// A compressible unit: Linear/Conv (folded) terminating in a LIF layer,
/// optionally joined with a second branch through an Add.
struct ModuleRef {
  int lif_layer = -1;
  int add_layer = -1;
  ShortcutMode mode = ShortcutMode::Concat;
  BranchRef main;
  BranchRef shortcut;
  bool has_shortcut() const { return add_layer >= 0; }
  bool concat_shortcut_branch() const {
    return add_layer >= 0 && mode == ShortcutMode::Concat;
  }
};

/// Modules in topological order. Requires a folded network (throws
/// InvalidArgument when a BatchNorm layer is still present). Validates that
/// every parameterized layer belongs to exactly one module.
std::vector<ModuleRef> find_modules(const NetworkSpec& net);

/// Folded single-map form of one module.
struct LinearizedModule {
  Matrix weight;  // d_in x d_out
  Vector bias;    // d_out
  LIFParams lif;
  int replication = 1;
  std::vector<char> compressible;  // per input row; 0 = frozen identity wire
};

/// Stack two branches feeding the same LIF by current addition:
/// X = [X1 X2], W = [W1; W2]. Requires equal d_out and replication.
LinearizedModule concat_shortcut(const LinearizedModule& a,
                                 const LinearizedModule& b);

/// Bound view of one module inside a specific network: linearized weights
/// plus the gather/write-back plumbing.
class ModuleView {
 public:
  ModuleView(const NetworkSpec& net, const std::vector<LayerGeometry>& geo,
             const ModuleRef& ref);

  const ModuleRef& ref() const { return ref_; }
  const LinearizedModule& lin() const { return lin_; }
  int d_in() const { return static_cast<int>(lin_.weight.rows()); }
  int d_out() const { return static_cast<int>(lin_.weight.cols()); }
  int replication() const { return lin_.replication; }
  const LIFParams& lif() const { return lin_.lif; }
  /// Deepest layer index required to gather this module's inputs.
  int last_needed_layer() const { return last_needed_; }

  /// Input matrices (one T x d_in per spatial position) for one sample,
  /// given that sample's forward trace through the same network.
  void gather_inputs(const std::vector<Activation>& trace, const Matrix& input,
                     std::vector<Matrix>& out) const;

  /// Store new folded weights (and optional quantization payloads) back into
  /// the underlying layers. Frozen identity rows must be left unchanged by
  /// the caller and are skipped here.
  void write_back(NetworkSpec& net, const Matrix& new_weight) const;
  void write_back_quant(
      NetworkSpec& net, const Matrix& new_weight, int bits,
      const Eigen::Matrix<std::int16_t, Eigen::Dynamic, Eigen::Dynamic>& codes,
      const Vector& scales, const std::vector<int>& code_rows) const;

 private:
  struct BoundBranch {
    BranchRef ref;
    std::optional<PatchMap> patches;  // empty: plain row gather
    int row_offset = 0;
    int rows = 0;
    bool identity = false;
  };
  ModuleRef ref_;
  LinearizedModule lin_;
  std::vector<BoundBranch> branches_;
  int last_needed_ = -1;
};

// ---------------------------------------------------------------------------
// Calibration capture
// ---------------------------------------------------------------------------

using ModuleCaptures = std::vector<Matrix>;  // one T x d_in per sample/position

/// Inputs of every module when the given network runs on the samples
/// (single shared forward per sample).
std::vector<ModuleCaptures> capture_calibration(
    const NetworkSpec& net, const std::vector<Matrix>& samples,
    int workers = 1);

/// Inputs of one module only; used by the sequential compression loop where
/// upstream modules have already been rewritten.
ModuleCaptures capture_module(const NetworkSpec& net,
                              const std::vector<LayerGeometry>& geo,
                              const ModuleView& view,
                              const std::vector<Matrix>& samples,
                              int workers = 1);

}  // namespace sbc
