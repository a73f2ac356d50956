#include "sbc/prune.hpp"

#include "sbc/linalg.hpp"
#include "engine_util.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <tuple>

namespace sbc {

std::string to_string(PruneMethod m) {
  switch (m) {
    case PruneMethod::SBC: return "sbc";
    case PruneMethod::ExactOBS: return "exactobs";
    case PruneMethod::MBP: return "mbp";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// LAMPS
// ---------------------------------------------------------------------------

LampScoreTable lamp_scores(
    const std::vector<std::vector<double>>& magnitudes) {
  LampScoreTable table;
  table.layers.reserve(magnitudes.size());
  for (const auto& mags : magnitudes) {
    std::vector<LampScoreTable::Entry> layer(mags.size());
    std::vector<long> idx(mags.size());
    for (std::size_t i = 0; i < mags.size(); ++i) idx[i] = static_cast<long>(i);
    std::sort(idx.begin(), idx.end(), [&](long a, long b) {
      double ma = std::abs(mags[a]), mb = std::abs(mags[b]);
      return ma != mb ? ma < mb : a < b;
    });
    // Suffix sums of squares over the ascending order; the top weight's
    // denominator is its own square, so its score is exactly 1.
    double suffix = 0.0;
    std::vector<double> denom(mags.size());
    for (std::size_t u = mags.size(); u-- > 0;) {
      double m = std::abs(mags[idx[u]]);
      suffix += m * m;
      denom[u] = suffix;
    }
    for (std::size_t u = 0; u < mags.size(); ++u) {
      double m = std::abs(mags[idx[u]]);
      double sq = m * m;
      layer[u] = {idx[u], m, sq > 0.0 ? sq / denom[u] : 0.0};
    }
    table.layers.push_back(std::move(layer));
  }
  return table;
}

std::vector<long> lamps_allocate(
    const std::vector<std::vector<double>>& magnitudes, double sparsity) {
  if (sparsity < 0.0 || sparsity >= 1.0)
    throw InvalidArgument("lamps_allocate: sparsity outside [0, 1)");
  LampScoreTable table = lamp_scores(magnitudes);
  long total = 0;
  for (const auto& l : table.layers) total += static_cast<long>(l.size());
  long target = static_cast<long>(std::floor(sparsity * static_cast<double>(total)));
  std::vector<long> counts(table.layers.size(), 0);
  if (target == 0) return counts;

  struct Item {
    double score;
    int layer;
    long widx;
  };
  std::vector<Item> items;
  items.reserve(total);
  for (std::size_t l = 0; l < table.layers.size(); ++l)
    for (const auto& e : table.layers[l])
      items.push_back({e.score, static_cast<int>(l), e.weight_index});
  std::sort(items.begin(), items.end(), [](const Item& a, const Item& b) {
    return std::tie(a.score, a.layer, a.widx) <
           std::tie(b.score, b.layer, b.widx);
  });
  for (long k = 0; k < target; ++k) counts[items[k].layer]++;
  return counts;
}

// ---------------------------------------------------------------------------
// Ordering and masking
// ---------------------------------------------------------------------------

OrderResult order_weights(const Vector& w0, const Matrix& hinv0, int b_in) {
  const int d = static_cast<int>(w0.size());
  if (hinv0.rows() != d || hinv0.cols() != d)
    throw ShapeMismatch("order_weights: Hinv must be d_in x d_in");
  if (b_in < 1 || b_in > d)
    throw InvalidArgument("order_weights: b_in outside [1, d_in]");

  Matrix hinv = hinv0;
  Vector w = w0;
  OrderResult res;
  res.order.reserve(d);
  res.losses = Vector::Zero(d);
  std::vector<char> alive(d, 1);
  int remaining = d;
  const double inf = std::numeric_limits<double>::infinity();

  while (remaining > 0) {
    std::vector<std::pair<double, int>> finite;
    std::vector<int> dead;
    finite.reserve(remaining);
    for (int p = 0; p < d; ++p) {
      if (!alive[p]) continue;
      double pivot = hinv(p, p);
      if (std::abs(pivot) < linalg::kPivotEpsilon)
        dead.push_back(p);
      else
        finite.emplace_back(w[p] * w[p] / pivot, p);
    }
    if (finite.empty()) {
      // Numerically dead directions: retire without compensation, last.
      for (int p : dead) {
        res.order.push_back(p);
        res.losses[p] = inf;
        alive[p] = 0;
        w[p] = 0.0;
      }
      remaining = 0;
      break;
    }
    std::sort(finite.begin(), finite.end(),
              [](const std::pair<double, int>& a,
                 const std::pair<double, int>& b) {
                return a.first != b.first ? a.first < b.first
                                          : a.second < b.second;
              });

    auto do_step = [&](int cnt) {
      std::vector<int> picked(cnt);
      for (int k = 0; k < cnt; ++k) picked[k] = finite[k].second;
      if (cnt == 1) {
        int q = picked[0];
        double pivot = hinv(q, q);
        w -= (w[q] / pivot) * hinv.col(q);
        w[q] = 0.0;
        linalg::inverse_remove_in_place(hinv, q);
      } else {
        IndexSet p(picked);
        Vector rhs(cnt);
        for (int k = 0; k < cnt; ++k) rhs[k] = w[p.values()[k]];
        Vector y = linalg::block_solve(hinv, p, rhs);
        Matrix cols(d, cnt);
        for (int k = 0; k < cnt; ++k) cols.col(k) = hinv.col(p.values()[k]);
        linalg::inverse_remove_block_in_place(hinv, p);
        w -= cols * y;
        for (int q : p.values()) w[q] = 0.0;
      }
      for (int k = 0; k < cnt; ++k) {
        res.order.push_back(finite[k].second);
        res.losses[finite[k].second] = finite[k].first;
        alive[finite[k].second] = 0;
      }
      remaining -= cnt;
    };

    int take = std::min<int>(b_in, static_cast<int>(finite.size()));
    try {
      do_step(take);
    } catch (const SingularBlock&) {
      if (take == 1) throw;
      do_step(1);
    }
  }
  return res;
}

Vector apply_mask(const Vector& w, const IndexSet& p, const Matrix& hinv) {
  const int d = static_cast<int>(w.size());
  if (hinv.rows() != d || hinv.cols() != d)
    throw ShapeMismatch("apply_mask: Hinv must be d_in x d_in");
  if (p.max_index() >= d)
    throw InvalidArgument("apply_mask: mask index out of range");
  if (p.empty()) return w;
  if (p.size() == d) return Vector::Zero(d);
  Vector rhs(p.size());
  for (int k = 0; k < p.size(); ++k) rhs[k] = w[p.values()[k]];
  Vector y = linalg::block_solve(hinv, p, rhs);
  Matrix cols(d, p.size());
  for (int k = 0; k < p.size(); ++k) cols.col(k) = hinv.col(p.values()[k]);
  Vector out = w - cols * y;
  for (int q : p.values()) out[q] = 0.0;
  return out;
}

// ---------------------------------------------------------------------------
// Network pruning
// ---------------------------------------------------------------------------

namespace {

struct Pick {
  double value;
  int row;
  int col;
};

/// n smallest by (value, row, col).
std::vector<Pick> smallest_n(std::vector<Pick> items, long n) {
  std::sort(items.begin(), items.end(), [](const Pick& a, const Pick& b) {
    return std::tie(a.value, a.row, a.col) < std::tie(b.value, b.row, b.col);
  });
  items.resize(std::min<std::size_t>(items.size(), static_cast<std::size_t>(n)));
  return items;
}

}  // namespace

PruneResult prune_network(const NetworkSpec& net,
                          const std::vector<Matrix>& calib,
                          const PruneOptions& opt) {
  if (opt.sparsity < 0.0 || opt.sparsity >= 1.0)
    throw InvalidArgument("prune_network: sparsity outside [0, 1)");
  if (opt.b_in < 1 || opt.b_out < 1)
    throw InvalidArgument("prune_network: batch sizes must be >= 1");
  if (calib.empty()) throw InvalidArgument("prune_network: empty calibration set");
  const int workers = resolve_workers(opt.workers);

  detail::BoundNetwork bound = detail::bind_network(net);
  const std::size_t n_mod = bound.views.size();
  if (n_mod == 0) throw InvalidArgument("prune_network: no modules found");

  // Global LAMPS allocation over the original (folded) compressible weights.
  std::vector<std::vector<int>> comp_rows(n_mod);
  std::vector<std::vector<double>> magnitudes(n_mod);
  for (std::size_t m = 0; m < n_mod; ++m) {
    const auto& lin = bound.views[m].lin();
    comp_rows[m] = detail::compressible_rows(lin);
    auto& mags = magnitudes[m];
    mags.reserve(comp_rows[m].size() * lin.weight.cols());
    for (int r : comp_rows[m])
      for (Eigen::Index j = 0; j < lin.weight.cols(); ++j)
        mags.push_back(std::abs(lin.weight(r, j)));
  }
  std::vector<long> counts = lamps_allocate(magnitudes, opt.sparsity);

  std::vector<ModuleCaptures> one_pass_caps;
  if (opt.one_pass_capture)
    one_pass_caps = capture_calibration(bound.net, calib, workers);

  PruneResult result;
  result.report.method = to_string(opt.method);
  result.masks.resize(n_mod);

  for (std::size_t m = 0; m < n_mod; ++m) {
    const double t0 = detail::now_ms();
    const ModuleView& view = bound.views[m];
    const Matrix w_orig = view.lin().weight;
    const int d_in = view.d_in();
    const int d_out = view.d_out();
    const auto& comp = comp_rows[m];
    const int dc = static_cast<int>(comp.size());
    const long n_prune = counts[m];

    ModuleCompressionStats stats;
    stats.index = static_cast<int>(m);
    stats.name = "module" + std::to_string(m);
    stats.d_in = d_in;
    stats.d_out = d_out;
    stats.replication = view.replication();
    stats.prunable = static_cast<long>(dc) * d_out;
    stats.pruned = n_prune;
    stats.sparsity = stats.prunable > 0
                         ? static_cast<double>(n_prune) / stats.prunable
                         : 0.0;
    result.masks[m] = MaskMatrix::Zero(d_in, d_out);

    if (n_prune == 0) {
      stats.wall_ms = detail::now_ms() - t0;
      result.report.modules.push_back(std::move(stats));
      continue;
    }

    ModuleCaptures caps =
        opt.one_pass_capture
            ? std::move(one_pass_caps[m])
            : capture_module(bound.net, bound.geo, view, calib, workers);
    if (caps.empty())
      throw InvalidArgument("prune_network: module " + std::to_string(m) +
                            " captured no inputs");
    const int t_steps = static_cast<int>(caps[0].rows());
    KernelMatrix kernel = KernelMatrix::build(t_steps, view.lif().tau_m);
    std::vector<Matrix> xc = detail::slice_capture_cols(caps, comp, d_in);

    Matrix wc(dc, d_out);
    for (int k = 0; k < dc; ++k) wc.row(k) = w_orig.row(comp[k]);
    Matrix wc_new = wc;

    try {
      std::vector<Pick> picked;
      if (opt.method == PruneMethod::MBP) {
        std::vector<Pick> items;
        items.reserve(static_cast<std::size_t>(dc) * d_out);
        for (int i = 0; i < dc; ++i)
          for (int j = 0; j < d_out; ++j)
            items.push_back({std::abs(wc(i, j)), i, j});
        picked = smallest_n(std::move(items), n_prune);
        for (const Pick& p : picked) wc_new(p.row, p.col) = 0.0;
      } else {
        HessianMode mode = opt.method == PruneMethod::SBC ? HessianMode::SMP
                                                          : HessianMode::OBC;
        HessianState state =
            accumulate_captures(xc, dc, mode, &kernel, workers);
        if (!opt.hessian_dump_dir.empty())
          dump_hessian(opt.hessian_dump_dir + "/module" + std::to_string(m),
                       state);
        auto [h, hinv] = state.finalize(opt.damp);
        (void)h;

        const int b_in = std::min(opt.b_in, dc);
        std::vector<OrderResult> orders(d_out);
        parallel_chunks(static_cast<std::size_t>(d_out),
                        static_cast<std::size_t>(opt.b_out), workers,
                        [&](std::size_t b, std::size_t e, std::size_t) {
                          for (std::size_t j = b; j < e; ++j)
                            orders[j] =
                                order_weights(wc.col(j), hinv, b_in);
                        });
        std::vector<Pick> items;
        items.reserve(static_cast<std::size_t>(dc) * d_out);
        for (int i = 0; i < dc; ++i)
          for (int j = 0; j < d_out; ++j)
            items.push_back({orders[j].losses[i], i, j});
        picked = smallest_n(std::move(items), n_prune);

        std::vector<std::vector<int>> per_col(d_out);
        for (const Pick& p : picked) per_col[p.col].push_back(p.row);
        for (int j = 0; j < d_out; ++j) {
          if (per_col[j].empty()) continue;
          IndexSet pj(per_col[j]);
          wc_new.col(j) = apply_mask(wc.col(j), pj, hinv);
        }
      }
      for (const Pick& p : picked)
        result.masks[m](comp[p.row], p.col) = 1;
    } catch (const Error& e) {
      throw Error(e.kind(), "module " + std::to_string(m) + ": " + e.what());
    }

    Matrix w_full = w_orig;
    for (int k = 0; k < dc; ++k) w_full.row(comp[k]) = wc_new.row(k);
    view.write_back(bound.net, w_full);

    stats.proxy_loss = detail::mean_kernel_loss(xc, kernel, wc_new - wc);
    stats.wall_ms = detail::now_ms() - t0;
    result.report.modules.push_back(std::move(stats));
  }

  for (const auto& s : result.report.modules) {
    result.report.prunable_total += s.prunable;
    result.report.pruned_total += s.pruned;
    result.report.proxy_loss_total += s.proxy_loss;
    result.report.wall_ms_total += s.wall_ms;
  }
  result.report.sparsity_total =
      result.report.prunable_total > 0
          ? static_cast<double>(result.report.pruned_total) /
                result.report.prunable_total
          : 0.0;
  result.net = std::move(bound.net);
  return result;
}

}  // namespace sbc
