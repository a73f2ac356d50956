#include "sbc/metrics.hpp"

#include "sbc/kernel.hpp"
#include "sbc/lif.hpp"
#include "engine_util.hpp"

#include <cmath>

namespace sbc {

SopsReport count_sops(const NetworkSpec& net,
                      const std::vector<Matrix>& samples, bool input_is_real,
                      int workers) {
  if (samples.empty()) throw InvalidArgument("count_sops: empty dataset");
  workers = resolve_workers(workers);
  detail::BoundNetwork bound = detail::bind_network(net);
  const std::size_t n_mod = bound.views.size();

  // Fan-out per input row, over the full linearized weights (identity
  // shortcut wires carry one operation each).
  std::vector<std::vector<std::uint64_t>> fanout(n_mod);
  std::vector<bool> real_in(n_mod, false);
  int last_needed = -1;
  for (std::size_t m = 0; m < n_mod; ++m) {
    const Matrix& w = bound.views[m].lin().weight;
    fanout[m].resize(w.rows());
    for (Eigen::Index i = 0; i < w.rows(); ++i) {
      std::uint64_t nz = 0;
      for (Eigen::Index j = 0; j < w.cols(); ++j)
        if (w(i, j) != 0.0) ++nz;
      fanout[m][i] = nz;
    }
    if (input_is_real) {
      const ModuleRef& r = bound.views[m].ref();
      if (r.main.source_layer < 0 ||
          (r.concat_shortcut_branch() && r.shortcut.source_layer < 0))
        real_in[m] = true;
    }
    last_needed = std::max(last_needed, bound.views[m].last_needed_layer());
  }

  constexpr std::size_t kChunk = 8;
  std::size_t chunks = chunk_count(samples.size(), kChunk);
  std::vector<std::vector<std::uint64_t>> partial(
      chunks, std::vector<std::uint64_t>(n_mod, 0));
  parallel_chunks(samples.size(), kChunk, workers,
                  [&](std::size_t b, std::size_t e, std::size_t ci) {
                    for (std::size_t s = b; s < e; ++s) {
                      auto trace = forward_trace(bound.net, bound.geo,
                                                 samples[s], last_needed);
                      for (std::size_t m = 0; m < n_mod; ++m) {
                        std::vector<Matrix> xs;
                        bound.views[m].gather_inputs(trace, samples[s], xs);
                        std::uint64_t acc = 0;
                        for (const Matrix& x : xs)
                          for (Eigen::Index i = 0; i < x.cols(); ++i) {
                            std::uint64_t nz = fanout[m][i];
                            if (nz == 0) continue;
                            for (Eigen::Index t = 0; t < x.rows(); ++t)
                              if (x(t, i) != 0.0) acc += nz;
                          }
                        partial[ci][m] += acc;
                      }
                    }
                  });

  SopsReport rep;
  rep.samples = static_cast<long>(samples.size());
  for (std::size_t m = 0; m < n_mod; ++m) {
    SopsModuleStats st;
    st.index = static_cast<int>(m);
    st.name = "module" + std::to_string(m);
    st.real_input = real_in[m];
    for (std::size_t c = 0; c < chunks; ++c) st.ops_total += partial[c][m];
    st.ops_avg = static_cast<double>(st.ops_total) / rep.samples;
    if (st.real_input) {
      rep.macs_total += st.ops_total;
    } else {
      rep.sops_total += st.ops_total;
    }
    rep.modules.push_back(std::move(st));
  }
  rep.sops_avg = static_cast<double>(rep.sops_total) / rep.samples;
  rep.macs_avg = static_cast<double>(rep.macs_total) / rep.samples;
  return rep;
}

static void require_same_topology(const detail::BoundNetwork& a,
                                  const detail::BoundNetwork& b) {
  if (a.net.layers.size() != b.net.layers.size())
    throw ShapeMismatch("fidelity: layer counts differ");
  for (std::size_t i = 0; i < a.net.layers.size(); ++i) {
    if (a.net.layers[i].kind != b.net.layers[i].kind)
      throw ShapeMismatch("fidelity: layer " + std::to_string(i) +
                          " kinds differ");
    if (!(a.geo[i].out_shape == b.geo[i].out_shape))
      throw ShapeMismatch("fidelity: layer " + std::to_string(i) +
                          " shapes differ");
  }
  if (a.views.size() != b.views.size())
    throw ShapeMismatch("fidelity: module counts differ");
  for (std::size_t m = 0; m < a.views.size(); ++m) {
    if (a.views[m].lif().tau_m != b.views[m].lif().tau_m ||
        a.views[m].lif().v_th != b.views[m].lif().v_th)
      throw ShapeMismatch("fidelity: module " + std::to_string(m) +
                          " neuron parameters differ");
  }
}

FidelityReport fidelity(const NetworkSpec& net_a, const NetworkSpec& net_b,
                        const std::vector<Matrix>& samples, int workers) {
  if (samples.empty()) throw InvalidArgument("fidelity: empty dataset");
  workers = resolve_workers(workers);
  detail::BoundNetwork a = detail::bind_network(net_a);
  detail::BoundNetwork b = detail::bind_network(net_b);
  require_same_topology(a, b);
  if (a.net.layers.empty() || a.net.layers.back().kind != LayerKind::LIF)
    throw InvalidArgument("fidelity: network must end in a LIF layer");

  const std::size_t n_mod = a.views.size();
  const int t_steps = static_cast<int>(samples[0].rows());
  std::vector<KernelMatrix> kernels;
  kernels.reserve(n_mod);
  for (std::size_t m = 0; m < n_mod; ++m)
    kernels.push_back(KernelMatrix::build(t_steps, a.views[m].lif().tau_m));
  const KernelMatrix out_kernel = KernelMatrix::build(
      t_steps, a.net.layers.back().as<LIFLayer>().params.tau_m);

  constexpr std::size_t kChunk = 8;
  std::size_t chunks = chunk_count(samples.size(), kChunk);
  std::vector<std::vector<double>> part_mod(
      chunks, std::vector<double>(n_mod, 0.0));
  std::vector<double> part_out(chunks, 0.0);

  parallel_chunks(
      samples.size(), kChunk, workers,
      [&](std::size_t sb, std::size_t se, std::size_t ci) {
        for (std::size_t s = sb; s < se; ++s) {
          auto trace_a = forward_trace(a.net, a.geo, samples[s]);
          Matrix out_b = network_forward(b.net, samples[s]);
          part_out[ci] += vrd(trace_a.back().values, out_b, out_kernel);
          for (std::size_t m = 0; m < n_mod; ++m) {
            std::vector<Matrix> xs;
            a.views[m].gather_inputs(trace_a, samples[s], xs);
            const auto& la = a.views[m].lin();
            const auto& lb = b.views[m].lin();
            double acc = 0.0;
            for (const Matrix& x : xs) {
              Matrix cur_a = x * la.weight;
              cur_a.rowwise() += la.bias.transpose();
              Matrix cur_b = x * lb.weight;
              cur_b.rowwise() += lb.bias.transpose();
              acc += vrd(lif_forward(cur_a, la.lif).spikes,
                         lif_forward(cur_b, lb.lif).spikes, kernels[m]);
            }
            part_mod[ci][m] += acc;
          }
        }
      });

  FidelityReport rep;
  rep.module_vrd.assign(n_mod, 0.0);
  for (std::size_t c = 0; c < chunks; ++c) {
    rep.output_vrd += part_out[c];
    for (std::size_t m = 0; m < n_mod; ++m) rep.module_vrd[m] += part_mod[c][m];
  }
  rep.output_vrd /= static_cast<double>(samples.size());
  for (auto& v : rep.module_vrd) v /= static_cast<double>(samples.size());
  return rep;
}

int predict_class(const Matrix& output_spikes) {
  int best = 0;
  double best_count = -1.0;
  for (Eigen::Index j = 0; j < output_spikes.cols(); ++j) {
    double count = output_spikes.col(j).sum();
    if (count > best_count) {
      best_count = count;
      best = static_cast<int>(j);
    }
  }
  return best;
}

double accuracy(const NetworkSpec& net, const std::vector<Matrix>& samples,
                const std::vector<int>& labels, int workers) {
  if (samples.empty()) throw InvalidArgument("accuracy: empty dataset");
  if (samples.size() != labels.size())
    throw ShapeMismatch("accuracy: label count differs from sample count");
  workers = resolve_workers(workers);
  auto geo = compute_geometry(net);
  if (net.layers.empty() || net.layers.back().kind != LayerKind::LIF)
    throw InvalidArgument("accuracy: network must end in a LIF layer");
  const int classes = geo.back().out_shape.features();
  for (int l : labels)
    if (l < 0 || l >= classes)
      throw InvalidArgument("accuracy: label outside [0, classes)");

  constexpr std::size_t kChunk = 8;
  std::size_t chunks = chunk_count(samples.size(), kChunk);
  std::vector<long> correct(chunks, 0);
  parallel_chunks(samples.size(), kChunk, workers,
                  [&](std::size_t b, std::size_t e, std::size_t ci) {
                    for (std::size_t s = b; s < e; ++s) {
                      auto trace = forward_trace(net, geo, samples[s]);
                      if (predict_class(trace.back().values) == labels[s])
                        correct[ci]++;
                    }
                  });
  long total = 0;
  for (long c : correct) total += c;
  return static_cast<double>(total) / static_cast<double>(samples.size());
}

}  // namespace sbc
