#include "sbc/graph.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_map>

namespace sbc {

std::string TensorShape::str() const {
  return std::to_string(c) + "x" + std::to_string(h) + "x" + std::to_string(w);
}

int NetworkSpec::producer(int layer_idx) const {
  if (layer_idx < 0 || layer_idx >= static_cast<int>(layers.size()))
    throw InvalidArgument("producer: layer index out of range");
  int in = layers[layer_idx].input;
  if (in >= 0) {
    if (in >= layer_idx)
      throw InvalidArgument("producer: layer " + std::to_string(layer_idx) +
                            " references a non-upstream layer");
    return in;
  }
  return layer_idx - 1;  // previous layer; -1 = network input for layer 0
}

Layer make_linear(Matrix w, Vector b, int input) {
  Layer l;
  l.kind = LayerKind::Linear;
  l.input = input;
  l.data = LinearLayer{std::move(w), std::move(b), std::nullopt};
  return l;
}

Layer make_conv(int in_ch, int out_ch, int kh, int kw, int stride, int pad,
                Matrix w, Vector b, int input) {
  Layer l;
  l.kind = LayerKind::Conv2d;
  l.input = input;
  l.data = Conv2dLayer{in_ch, out_ch, kh,          kw,
                       stride, pad,   std::move(w), std::move(b),
                       std::nullopt};
  return l;
}

Layer make_batchnorm(Vector gamma, Vector beta, Vector mean, Vector var,
                     double eps, int input) {
  Layer l;
  l.kind = LayerKind::BatchNorm;
  l.input = input;
  l.data = BatchNormLayer{std::move(gamma), std::move(beta), std::move(mean),
                          std::move(var), eps};
  return l;
}

Layer make_lif(double tau_m, double v_th, int input) {
  Layer l;
  l.kind = LayerKind::LIF;
  l.input = input;
  l.data = LIFLayer{LIFParams{tau_m, v_th}};
  return l;
}

Layer make_flatten(int input) {
  Layer l;
  l.kind = LayerKind::Flatten;
  l.input = input;
  l.data = FlattenLayer{};
  return l;
}

Layer make_pool(int k, int stride, int input) {
  Layer l;
  l.kind = LayerKind::Pool;
  l.input = input;
  l.data = PoolLayer{k, stride};
  return l;
}

Layer make_add(int lhs, int rhs, ShortcutMode mode) {
  Layer l;
  l.kind = LayerKind::Add;
  l.input = -1;
  l.data = AddLayer{lhs, rhs, mode};
  return l;
}

NetworkSpec make_mlp(const std::vector<int>& dims, double tau_m, double v_th) {
  if (dims.size() < 2) throw InvalidArgument("make_mlp: need at least 2 dims");
  NetworkSpec net;
  net.input_shape = TensorShape{dims[0], 1, 1};
  for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
    net.push(make_linear(Matrix::Zero(dims[i], dims[i + 1]),
                         Vector::Zero(dims[i + 1])));
    net.push(make_lif(tau_m, v_th));
  }
  return net;
}

// ---------------------------------------------------------------------------
// Geometry
// ---------------------------------------------------------------------------

PatchMap lower_conv(const Conv2dLayer& conv, const TensorShape& in_shape) {
  if (conv.in_ch != in_shape.c)
    throw InvalidGeometry("lower_conv: input has " + std::to_string(in_shape.c) +
                          " channels, conv expects " +
                          std::to_string(conv.in_ch));
  if (conv.kh < 1 || conv.kw < 1 || conv.stride < 1 || conv.pad < 0 ||
      conv.out_ch < 1)
    throw InvalidGeometry("lower_conv: bad kernel/stride/pad");
  int eff_h = in_shape.h + 2 * conv.pad;
  int eff_w = in_shape.w + 2 * conv.pad;
  if (eff_h < conv.kh || eff_w < conv.kw)
    throw InvalidGeometry("lower_conv: kernel larger than padded input");
  PatchMap pm;
  pm.out_h = (eff_h - conv.kh) / conv.stride + 1;
  pm.out_w = (eff_w - conv.kw) / conv.stride + 1;
  pm.patch_len = conv.patch_len();
  if (pm.positions() < 1)
    throw InvalidGeometry("lower_conv: no output positions");
  pm.source.assign(pm.positions(), std::vector<int>(pm.patch_len, -1));
  for (int oy = 0; oy < pm.out_h; ++oy)
    for (int ox = 0; ox < pm.out_w; ++ox) {
      auto& slot = pm.source[oy * pm.out_w + ox];
      for (int c = 0; c < conv.in_ch; ++c)
        for (int r = 0; r < conv.kh; ++r)
          for (int s = 0; s < conv.kw; ++s) {
            int y = oy * conv.stride + r - conv.pad;
            int x = ox * conv.stride + s - conv.pad;
            int p = c * (conv.kh * conv.kw) + r * conv.kw + s;
            if (y >= 0 && y < in_shape.h && x >= 0 && x < in_shape.w)
              slot[p] = c * (in_shape.h * in_shape.w) + y * in_shape.w + x;
          }
    }
  return pm;
}

PatchMap identity_patches(const TensorShape& shape) {
  PatchMap pm;
  pm.out_h = shape.h;
  pm.out_w = shape.w;
  pm.patch_len = shape.c;
  pm.source.assign(pm.positions(), std::vector<int>(pm.patch_len, -1));
  for (int y = 0; y < shape.h; ++y)
    for (int x = 0; x < shape.w; ++x) {
      auto& slot = pm.source[y * shape.w + x];
      for (int c = 0; c < shape.c; ++c)
        slot[c] = c * (shape.h * shape.w) + y * shape.w + x;
    }
  return pm;
}

Matrix extract_patch(const Matrix& x, const PatchMap& pm, int pos) {
  if (pos < 0 || pos >= pm.positions())
    throw InvalidArgument("extract_patch: position out of range");
  Matrix out = Matrix::Zero(x.rows(), pm.patch_len);
  const auto& slot = pm.source[pos];
  for (int p = 0; p < pm.patch_len; ++p)
    if (slot[p] >= 0) out.col(p) = x.col(slot[p]);
  return out;
}

static TensorShape input_shape_of(const NetworkSpec& net,
                                  const std::vector<LayerGeometry>& geo,
                                  int producer_idx) {
  return producer_idx < 0 ? net.input_shape : geo[producer_idx].out_shape;
}

std::vector<LayerGeometry> compute_geometry(const NetworkSpec& net) {
  if (net.input_shape.features() < 1)
    throw InvalidGeometry("network input shape is empty");
  std::vector<LayerGeometry> geo(net.layers.size());
  for (int i = 0; i < static_cast<int>(net.layers.size()); ++i) {
    const Layer& l = net.layers[i];
    if (l.kind == LayerKind::Add) {
      const auto& a = l.as<AddLayer>();
      if (a.lhs >= i || a.rhs >= i)
        throw InvalidArgument("add layer " + std::to_string(i) +
                              " must reference upstream producers");
      TensorShape sl = input_shape_of(net, geo, a.lhs);
      TensorShape sr = input_shape_of(net, geo, a.rhs);
      if (!(sl == sr))
        throw ShapeMismatch("add layer " + std::to_string(i) + ": " + sl.str() +
                            " vs " + sr.str());
      geo[i].out_shape = sl;
      continue;
    }
    TensorShape in = input_shape_of(net, geo, net.producer(i));
    switch (l.kind) {
      case LayerKind::Linear: {
        const auto& lin = l.as<LinearLayer>();
        if (lin.weight.rows() != in.features())
          throw ShapeMismatch("linear layer " + std::to_string(i) + ": weight " +
                              std::to_string(lin.weight.rows()) + " rows vs " +
                              std::to_string(in.features()) + " input features");
        if (lin.weight.cols() < 1)
          throw ShapeMismatch("linear layer with no outputs");
        if (lin.bias.size() != 0 && lin.bias.size() != lin.weight.cols())
          throw ShapeMismatch("linear bias length mismatch");
        geo[i].out_shape = TensorShape{static_cast<int>(lin.weight.cols()), 1, 1};
        break;
      }
      case LayerKind::Conv2d: {
        const auto& cv = l.as<Conv2dLayer>();
        if (cv.weight.rows() != cv.patch_len() || cv.weight.cols() != cv.out_ch)
          throw ShapeMismatch("conv layer " + std::to_string(i) +
                              ": lowered weight must be patch_len x out_ch");
        if (cv.bias.size() != 0 && cv.bias.size() != cv.out_ch)
          throw ShapeMismatch("conv bias length mismatch");
        PatchMap pm = lower_conv(cv, in);
        geo[i].out_shape = TensorShape{cv.out_ch, pm.out_h, pm.out_w};
        geo[i].patches = std::move(pm);
        break;
      }
      case LayerKind::BatchNorm: {
        const auto& bn = l.as<BatchNormLayer>();
        int ch = in.c;
        if (bn.gamma.size() != ch || bn.beta.size() != ch ||
            bn.mean.size() != ch || bn.var.size() != ch)
          throw MissingStats("batchnorm layer " + std::to_string(i) +
                             ": statistics sized for " +
                             std::to_string(bn.gamma.size()) + " channels, input has " +
                             std::to_string(ch));
        if (bn.eps < 0.0 || (bn.var.size() > 0 && bn.var.minCoeff() < 0.0))
          throw MissingStats("batchnorm layer " + std::to_string(i) +
                             ": invalid eps or negative variance");
        geo[i].out_shape = in;
        break;
      }
      case LayerKind::LIF: {
        l.as<LIFLayer>().params.validate();
        geo[i].out_shape = in;
        break;
      }
      case LayerKind::Flatten:
        geo[i].out_shape = TensorShape{in.features(), 1, 1};
        break;
      case LayerKind::Pool: {
        const auto& p = l.as<PoolLayer>();
        if (p.k < 1 || p.stride < 1)
          throw InvalidGeometry("pool layer " + std::to_string(i));
        if (in.h < p.k || in.w < p.k)
          throw InvalidGeometry("pool window exceeds input");
        geo[i].out_shape = TensorShape{in.c, (in.h - p.k) / p.stride + 1,
                                       (in.w - p.k) / p.stride + 1};
        break;
      }
      case LayerKind::Add:
        break;  // handled above
    }
  }
  return geo;
}

// ---------------------------------------------------------------------------
// Execution
// ---------------------------------------------------------------------------

static const Matrix& act_of(const std::vector<Activation>& trace,
                            const Matrix& input, int idx) {
  return idx < 0 ? input : trace[idx].values;
}

std::vector<Activation> forward_trace(const NetworkSpec& net,
                                      const std::vector<LayerGeometry>& geo,
                                      const Matrix& input, int stop_after) {
  if (input.cols() != net.input_shape.features())
    throw ShapeMismatch("forward: input has " + std::to_string(input.cols()) +
                        " features, network expects " +
                        std::to_string(net.input_shape.features()));
  if (input.rows() < 1) throw ShapeMismatch("forward: empty time axis");
  const int n_layers = static_cast<int>(net.layers.size());
  const int last = stop_after < 0 ? n_layers - 1
                                  : std::min(stop_after, n_layers - 1);
  const Eigen::Index t_steps = input.rows();
  std::vector<Activation> trace(net.layers.size());
  for (int i = 0; i <= last; ++i) {
    const Layer& l = net.layers[i];
    Activation& out = trace[i];
    out.shape = geo[i].out_shape;
    switch (l.kind) {
      case LayerKind::Linear: {
        const auto& lin = l.as<LinearLayer>();
        const Matrix& x = act_of(trace, input, net.producer(i));
        out.values.noalias() = x * lin.weight;
        if (lin.bias.size() > 0) out.values.rowwise() += lin.bias.transpose();
        break;
      }
      case LayerKind::Conv2d: {
        const auto& cv = l.as<Conv2dLayer>();
        const Matrix& x = act_of(trace, input, net.producer(i));
        const PatchMap& pm = *geo[i].patches;
        const int r = pm.positions();
        out.values = Matrix::Zero(t_steps, out.shape.features());
        for (int pos = 0; pos < r; ++pos) {
          Matrix patch = extract_patch(x, pm, pos);
          Matrix block = patch * cv.weight;
          for (int oc = 0; oc < cv.out_ch; ++oc) {
            double b = cv.bias.size() > 0 ? cv.bias[oc] : 0.0;
            out.values.col(oc * r + pos) = block.col(oc).array() + b;
          }
        }
        break;
      }
      case LayerKind::BatchNorm: {
        const auto& bn = l.as<BatchNormLayer>();
        const Matrix& x = act_of(trace, input, net.producer(i));
        TensorShape in_shape = input_shape_of(net, geo, net.producer(i));
        int span = in_shape.h * in_shape.w;
        out.values = x;
        for (int c = 0; c < in_shape.c; ++c) {
          double scale = bn.gamma[c] / std::sqrt(bn.var[c] + bn.eps);
          double shift = bn.beta[c] - bn.mean[c] * scale;
          out.values.middleCols(c * span, span) =
              (x.middleCols(c * span, span).array() * scale + shift).matrix();
        }
        break;
      }
      case LayerKind::LIF: {
        const auto& lf = l.as<LIFLayer>();
        const Matrix& x = act_of(trace, input, net.producer(i));
        out.values = lif_forward(x, lf.params).spikes;
        break;
      }
      case LayerKind::Flatten:
        out.values = act_of(trace, input, net.producer(i));
        break;
      case LayerKind::Pool: {
        const auto& p = l.as<PoolLayer>();
        const Matrix& x = act_of(trace, input, net.producer(i));
        TensorShape in_shape = input_shape_of(net, geo, net.producer(i));
        const TensorShape& os = out.shape;
        out.values = Matrix::Zero(t_steps, os.features());
        for (int c = 0; c < os.c; ++c)
          for (int oy = 0; oy < os.h; ++oy)
            for (int ox = 0; ox < os.w; ++ox) {
              int dst = c * (os.h * os.w) + oy * os.w + ox;
              for (Eigen::Index t = 0; t < t_steps; ++t) {
                double m = -std::numeric_limits<double>::infinity();
                for (int r = 0; r < p.k; ++r)
                  for (int s = 0; s < p.k; ++s) {
                    int y = oy * p.stride + r;
                    int x2 = ox * p.stride + s;
                    m = std::max(
                        m, x(t, c * (in_shape.h * in_shape.w) + y * in_shape.w + x2));
                  }
                out.values(t, dst) = m;
              }
            }
        break;
      }
      case LayerKind::Add: {
        const auto& a = l.as<AddLayer>();
        out.values = act_of(trace, input, a.lhs) + act_of(trace, input, a.rhs);
        break;
      }
    }
  }
  return trace;
}

std::vector<Activation> forward_trace(const NetworkSpec& net,
                                      const Matrix& input, int stop_after) {
  return forward_trace(net, compute_geometry(net), input, stop_after);
}

Matrix network_forward(const NetworkSpec& net, const Matrix& input) {
  if (net.layers.empty()) throw InvalidArgument("network has no layers");
  auto trace = forward_trace(net, input);
  return trace.back().values;
}

// ---------------------------------------------------------------------------
// BatchNorm folding
// ---------------------------------------------------------------------------

void fold_batchnorm(Layer& conv_or_linear, const BatchNormLayer& bn) {
  Matrix* w = nullptr;
  Vector* b = nullptr;
  bool quantized = false;
  if (conv_or_linear.kind == LayerKind::Linear) {
    auto& lin = conv_or_linear.as<LinearLayer>();
    w = &lin.weight;
    b = &lin.bias;
    quantized = lin.quant.has_value();
  } else if (conv_or_linear.kind == LayerKind::Conv2d) {
    auto& cv = conv_or_linear.as<Conv2dLayer>();
    w = &cv.weight;
    b = &cv.bias;
    quantized = cv.quant.has_value();
  } else {
    throw InvalidArgument("fold_batchnorm: producer is not linear/conv");
  }
  if (quantized)
    throw InvalidArgument("fold_batchnorm: cannot fold into quantized layer");
  const int ch = static_cast<int>(w->cols());
  if (bn.gamma.size() != ch || bn.beta.size() != ch || bn.mean.size() != ch ||
      bn.var.size() != ch)
    throw MissingStats("fold_batchnorm: statistics sized for " +
                       std::to_string(bn.gamma.size()) + " channels, layer has " +
                       std::to_string(ch));
  if (bn.eps < 0.0 || (ch > 0 && bn.var.minCoeff() < 0.0))
    throw MissingStats("fold_batchnorm: invalid eps or negative variance");
  Vector old_bias = b->size() > 0 ? *b : Vector::Zero(ch);
  Vector new_bias(ch);
  for (int c = 0; c < ch; ++c) {
    double scale = bn.gamma[c] / std::sqrt(bn.var[c] + bn.eps);
    w->col(c) *= scale;
    new_bias[c] = (old_bias[c] - bn.mean[c]) * scale + bn.beta[c];
  }
  *b = new_bias;
}

NetworkSpec fold_network(const NetworkSpec& net) {
  const int n = static_cast<int>(net.layers.size());
  // Resolve implicit inputs so reindexing below stays simple.
  std::vector<int> resolved(n);
  for (int i = 0; i < n; ++i) resolved[i] = net.producer(i);

  std::vector<int> consumers(n, 0);
  for (int i = 0; i < n; ++i) {
    if (net.layers[i].kind == LayerKind::Add) {
      const auto& a = net.layers[i].as<AddLayer>();
      if (a.lhs >= 0) consumers[a.lhs]++;
      if (a.rhs >= 0) consumers[a.rhs]++;
    } else if (resolved[i] >= 0) {
      consumers[resolved[i]]++;
    }
  }

  NetworkSpec out;
  out.input_shape = net.input_shape;
  std::vector<int> remap(n, -1);
  for (int i = 0; i < n; ++i) {
    const Layer& l = net.layers[i];
    if (l.kind == LayerKind::BatchNorm) {
      int p = resolved[i];
      if (p < 0 || (net.layers[p].kind != LayerKind::Linear &&
                    net.layers[p].kind != LayerKind::Conv2d))
        throw InvalidArgument("fold_network: batchnorm layer " +
                              std::to_string(i) +
                              " does not follow a linear/conv layer");
      if (consumers[p] > 1)
        throw InvalidArgument("fold_network: producer of batchnorm layer " +
                              std::to_string(i) + " has other consumers");
      fold_batchnorm(out.layers[remap[p]], l.as<BatchNormLayer>());
      remap[i] = remap[p];
      continue;
    }
    Layer copy = l;
    copy.input = resolved[i] < 0 ? -1 : remap[resolved[i]];
    if (copy.kind == LayerKind::Add) {
      auto& a = copy.as<AddLayer>();
      const auto& a0 = l.as<AddLayer>();
      a.lhs = a0.lhs < 0 ? -1 : remap[a0.lhs];
      a.rhs = a0.rhs < 0 ? -1 : remap[a0.rhs];
    }
    remap[i] = static_cast<int>(out.layers.size());
    out.layers.push_back(std::move(copy));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Module discovery
// ---------------------------------------------------------------------------

static bool is_param_kind(LayerKind k) {
  return k == LayerKind::Linear || k == LayerKind::Conv2d;
}

/// Walk back through pool/flatten to check the branch source carries spikes
/// (or the network input).
static void require_spike_source(const NetworkSpec& net, int idx,
                                 const char* what) {
  int cur = idx;
  while (cur >= 0) {
    LayerKind k = net.layers[cur].kind;
    if (k == LayerKind::LIF) return;
    if (k == LayerKind::Pool || k == LayerKind::Flatten) {
      cur = net.producer(cur);
      continue;
    }
    throw InvalidArgument(std::string(what) + ": layer " + std::to_string(idx) +
                          " does not carry spike/input data");
  }
}

std::vector<ModuleRef> find_modules(const NetworkSpec& net) {
  const int n = static_cast<int>(net.layers.size());
  for (int i = 0; i < n; ++i)
    if (net.layers[i].kind == LayerKind::BatchNorm)
      throw InvalidArgument("find_modules: fold batchnorm layers first");

  // 0 = unused, 1 = compressed member, 2 = simulated-only (ignored shortcut)
  std::vector<int> used(n, 0);
  auto resolve_param_branch = [&](int idx) -> BranchRef {
    BranchRef b;
    b.param_layer = idx;
    b.source_layer = net.producer(idx);
    require_spike_source(net, b.source_layer, "module input");
    return b;
  };

  std::vector<ModuleRef> mods;
  for (int i = 0; i < n; ++i) {
    if (net.layers[i].kind != LayerKind::LIF) continue;
    int p = net.producer(i);
    if (p < 0)
      throw InvalidArgument("LIF layer " + std::to_string(i) +
                            " has no parameterized producer");
    ModuleRef m;
    m.lif_layer = i;
    if (net.layers[p].kind == LayerKind::Add) {
      const auto& a = net.layers[p].as<AddLayer>();
      m.add_layer = p;
      m.mode = a.mode;
      bool lhs_param = a.lhs >= 0 && is_param_kind(net.layers[a.lhs].kind);
      bool rhs_param = a.rhs >= 0 && is_param_kind(net.layers[a.rhs].kind);
      if (m.mode == ShortcutMode::Concat) {
        if (!lhs_param && !rhs_param)
          throw InvalidArgument("add layer " + std::to_string(p) +
                                " joins two parameter-free branches");
        int main_idx = lhs_param ? a.lhs : a.rhs;
        int other = lhs_param ? a.rhs : a.lhs;
        m.main = resolve_param_branch(main_idx);
        used[main_idx] = 1;
        if (lhs_param && rhs_param) {
          m.shortcut = resolve_param_branch(other);
          used[other] = 1;
        } else {
          m.shortcut.param_layer = -1;
          m.shortcut.source_layer = other;  // -1 = net input
          require_spike_source(net, other, "identity shortcut");
        }
      } else {
        if (!lhs_param && !rhs_param)
          throw InvalidArgument("add layer " + std::to_string(p) +
                                " has no parameterized main branch");
        int main_idx = lhs_param ? a.lhs : a.rhs;
        m.main = resolve_param_branch(main_idx);
        used[main_idx] = 1;
        m.shortcut.param_layer = -1;
        m.shortcut.source_layer = lhs_param ? a.rhs : a.lhs;
        int other = lhs_param ? a.rhs : a.lhs;
        if (other >= 0 && is_param_kind(net.layers[other].kind)) used[other] = 2;
      }
    } else if (is_param_kind(net.layers[p].kind)) {
      m.main = resolve_param_branch(p);
      used[p] = 1;
    } else {
      throw InvalidArgument("LIF layer " + std::to_string(i) +
                            " fed by non-parameterized layer " +
                            std::to_string(p));
    }
    mods.push_back(m);
  }

  for (int i = 0; i < n; ++i) {
    if (!is_param_kind(net.layers[i].kind)) continue;
    if (used[i] == 0)
      throw InvalidArgument("parameterized layer " + std::to_string(i) +
                            " does not terminate in a LIF layer");
  }
  // Reject a layer consumed by two modules: each LIF resolves its own
  // producers, so a doubly-consumed layer would have been claimed twice.
  std::vector<int> claims(n, 0);
  for (const auto& m : mods) {
    claims[m.main.param_layer]++;
    if (m.concat_shortcut_branch() && m.shortcut.param_layer >= 0)
      claims[m.shortcut.param_layer]++;
  }
  for (int i = 0; i < n; ++i)
    if (claims[i] > 1)
      throw InvalidArgument("layer " + std::to_string(i) +
                            " is shared by multiple modules");
  return mods;
}

// ---------------------------------------------------------------------------
// Linearization
// ---------------------------------------------------------------------------

LinearizedModule concat_shortcut(const LinearizedModule& a,
                                 const LinearizedModule& b) {
  if (a.weight.cols() != b.weight.cols())
    throw ShapeMismatch("concat_shortcut: branch output widths differ");
  if (a.replication != b.replication)
    throw ShapeMismatch("concat_shortcut: branch replication differs");
  LinearizedModule out;
  out.weight = Matrix(a.weight.rows() + b.weight.rows(), a.weight.cols());
  out.weight.topRows(a.weight.rows()) = a.weight;
  out.weight.bottomRows(b.weight.rows()) = b.weight;
  out.bias = a.bias + b.bias;
  out.lif = a.lif;
  out.replication = a.replication;
  out.compressible = a.compressible;
  out.compressible.insert(out.compressible.end(), b.compressible.begin(),
                          b.compressible.end());
  return out;
}

static LinearizedModule linearize_branch(const NetworkSpec& net,
                                         const std::vector<LayerGeometry>& geo,
                                         const BranchRef& b, int d_out,
                                         const LIFParams& lif,
                                         std::optional<PatchMap>& patches_out) {
  LinearizedModule lm;
  lm.lif = lif;
  if (b.param_layer >= 0) {
    const Layer& l = net.layers[b.param_layer];
    if (l.kind == LayerKind::Linear) {
      const auto& lin = l.as<LinearLayer>();
      lm.weight = lin.weight;
      lm.bias = lin.bias.size() > 0 ? lin.bias
                                    : Vector::Zero(lin.weight.cols());
      lm.replication = 1;
      patches_out.reset();
    } else {
      const auto& cv = l.as<Conv2dLayer>();
      lm.weight = cv.weight;
      lm.bias = cv.bias.size() > 0 ? cv.bias : Vector::Zero(cv.out_ch);
      const PatchMap& pm = *geo[b.param_layer].patches;
      lm.replication = pm.positions();
      patches_out = pm;
    }
  } else {
    // Identity wires: the branch output equals its source activation, which
    // must already be shaped like the module output.
    TensorShape s = b.source_layer < 0 ? net.input_shape
                                       : geo[b.source_layer].out_shape;
    if (s.c != d_out)
      throw ShapeMismatch("identity shortcut carries " + std::to_string(s.c) +
                          " channels into " + std::to_string(d_out) +
                          " outputs");
    PatchMap pm = identity_patches(s);
    lm.weight = Matrix::Identity(s.c, d_out);
    lm.bias = Vector::Zero(d_out);
    lm.replication = pm.positions();
    patches_out = std::move(pm);
  }
  lm.compressible.assign(lm.weight.rows(), b.param_layer >= 0 ? 1 : 0);
  return lm;
}

ModuleView::ModuleView(const NetworkSpec& net,
                       const std::vector<LayerGeometry>& geo,
                       const ModuleRef& ref)
    : ref_(ref) {
  const LIFParams& lif = net.layers[ref.lif_layer].as<LIFLayer>().params;
  const Layer& main_layer = net.layers[ref.main.param_layer];
  int d_out = main_layer.kind == LayerKind::Linear
                  ? static_cast<int>(main_layer.as<LinearLayer>().weight.cols())
                  : main_layer.as<Conv2dLayer>().out_ch;

  std::optional<PatchMap> main_pm;
  LinearizedModule main_lin =
      linearize_branch(net, geo, ref.main, d_out, lif, main_pm);
  BoundBranch mb;
  mb.ref = ref.main;
  mb.patches = std::move(main_pm);
  mb.row_offset = 0;
  mb.rows = static_cast<int>(main_lin.weight.rows());
  mb.identity = false;
  branches_.push_back(std::move(mb));
  lin_ = std::move(main_lin);

  if (ref.concat_shortcut_branch()) {
    std::optional<PatchMap> sc_pm;
    LinearizedModule sc_lin =
        linearize_branch(net, geo, ref.shortcut, d_out, lif, sc_pm);
    BoundBranch sb;
    sb.ref = ref.shortcut;
    sb.patches = std::move(sc_pm);
    sb.row_offset = static_cast<int>(lin_.weight.rows());
    sb.rows = static_cast<int>(sc_lin.weight.rows());
    sb.identity = ref.shortcut.param_layer < 0;
    lin_ = concat_shortcut(lin_, sc_lin);
    branches_.push_back(std::move(sb));
  }

  last_needed_ = -1;
  for (const auto& b : branches_)
    last_needed_ = std::max(last_needed_, b.ref.source_layer);
}

void ModuleView::gather_inputs(const std::vector<Activation>& trace,
                               const Matrix& input,
                               std::vector<Matrix>& out) const {
  const int r = replication();
  const Eigen::Index t_steps =
      (branches_[0].ref.source_layer < 0
           ? input
           : trace[branches_[0].ref.source_layer].values)
          .rows();
  for (int pos = 0; pos < r; ++pos) {
    Matrix x(t_steps, d_in());
    for (const auto& b : branches_) {
      const Matrix& src = act_of(trace, input, b.ref.source_layer);
      if (b.patches) {
        x.middleCols(b.row_offset, b.rows) = extract_patch(src, *b.patches, pos);
      } else {
        if (src.cols() != b.rows)
          throw ShapeMismatch("module input width mismatch");
        x.middleCols(b.row_offset, b.rows) = src;
      }
    }
    out.push_back(std::move(x));
  }
}

void ModuleView::write_back(NetworkSpec& net, const Matrix& new_weight) const {
  if (new_weight.rows() != d_in() || new_weight.cols() != d_out())
    throw ShapeMismatch("write_back: weight shape mismatch");
  for (const auto& b : branches_) {
    if (b.ref.param_layer < 0) continue;
    Layer& l = net.layers[b.ref.param_layer];
    Matrix block = new_weight.middleRows(b.row_offset, b.rows);
    if (l.kind == LayerKind::Linear) {
      auto& lin = l.as<LinearLayer>();
      lin.weight = std::move(block);
      lin.quant.reset();
    } else {
      auto& cv = l.as<Conv2dLayer>();
      cv.weight = std::move(block);
      cv.quant.reset();
    }
  }
}

void ModuleView::write_back_quant(
    NetworkSpec& net, const Matrix& new_weight, int bits,
    const Eigen::Matrix<std::int16_t, Eigen::Dynamic, Eigen::Dynamic>& codes,
    const Vector& scales, const std::vector<int>& code_rows) const {
  if (new_weight.rows() != d_in() || new_weight.cols() != d_out())
    throw ShapeMismatch("write_back_quant: weight shape mismatch");
  if (codes.rows() != static_cast<Eigen::Index>(code_rows.size()) ||
      codes.cols() != d_out() || scales.size() != d_out())
    throw ShapeMismatch("write_back_quant: code table shape mismatch");
  std::unordered_map<int, int> code_row_of;
  for (std::size_t k = 0; k < code_rows.size(); ++k)
    code_row_of[code_rows[k]] = static_cast<int>(k);
  for (const auto& b : branches_) {
    if (b.ref.param_layer < 0) continue;
    Layer& l = net.layers[b.ref.param_layer];
    QuantInfo qi;
    qi.bits = bits;
    qi.scales = scales;
    qi.codes.resize(b.rows, d_out());
    for (int r = 0; r < b.rows; ++r) {
      auto it = code_row_of.find(b.row_offset + r);
      if (it == code_row_of.end())
        throw InvalidArgument("write_back_quant: missing codes for row " +
                              std::to_string(b.row_offset + r));
      qi.codes.row(r) = codes.row(it->second);
    }
    Matrix block = new_weight.middleRows(b.row_offset, b.rows);
    if (l.kind == LayerKind::Linear) {
      auto& lin = l.as<LinearLayer>();
      lin.weight = std::move(block);
      lin.quant = std::move(qi);
    } else {
      auto& cv = l.as<Conv2dLayer>();
      cv.weight = std::move(block);
      cv.quant = std::move(qi);
    }
  }
}

// ---------------------------------------------------------------------------
// Capture
// ---------------------------------------------------------------------------

std::vector<ModuleCaptures> capture_calibration(
    const NetworkSpec& net, const std::vector<Matrix>& samples, int workers) {
  auto geo = compute_geometry(net);
  auto refs = find_modules(net);
  std::vector<ModuleView> views;
  views.reserve(refs.size());
  int last_needed = -1;
  for (const auto& r : refs) {
    views.emplace_back(net, geo, r);
    last_needed = std::max(last_needed, views.back().last_needed_layer());
  }
  std::vector<ModuleCaptures> caps(views.size());
  for (std::size_t m = 0; m < views.size(); ++m)
    caps[m].resize(samples.size() * views[m].replication());
  parallel_chunks(samples.size(), 8, workers,
                  [&](std::size_t b, std::size_t e, std::size_t) {
                    for (std::size_t s = b; s < e; ++s) {
                      auto trace = forward_trace(net, geo, samples[s], last_needed);
                      for (std::size_t m = 0; m < views.size(); ++m) {
                        std::vector<Matrix> xs;
                        views[m].gather_inputs(trace, samples[s], xs);
                        for (std::size_t p = 0; p < xs.size(); ++p)
                          caps[m][s * xs.size() + p] = std::move(xs[p]);
                      }
                    }
                  });
  return caps;
}

ModuleCaptures capture_module(const NetworkSpec& net,
                              const std::vector<LayerGeometry>& geo,
                              const ModuleView& view,
                              const std::vector<Matrix>& samples, int workers) {
  ModuleCaptures caps(samples.size() * view.replication());
  const int stop = view.last_needed_layer();
  parallel_chunks(samples.size(), 8, workers,
                  [&](std::size_t b, std::size_t e, std::size_t) {
                    for (std::size_t s = b; s < e; ++s) {
                      auto trace = forward_trace(net, geo, samples[s], stop);
                      std::vector<Matrix> xs;
                      view.gather_inputs(trace, samples[s], xs);
                      for (std::size_t p = 0; p < xs.size(); ++p)
                        caps[s * xs.size() + p] = std::move(xs[p]);
                    }
                  });
  return caps;
}

}  // namespace sbc
