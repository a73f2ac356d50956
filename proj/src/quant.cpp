#include "sbc/quant.hpp"

#include "sbc/linalg.hpp"
#include "engine_util.hpp"

#include <algorithm>
#include <cmath>

namespace sbc {

std::string to_string(QuantMethod m) {
  switch (m) {
    case QuantMethod::SBC: return "sbc";
    case QuantMethod::GptqObc: return "gptq-obc";
    case QuantMethod::RTN: return "rtn";
  }
  return "?";
}

QuantGrid build_grid(const Matrix& w, int bits) {
  if (bits < 2 || bits > 16)
    throw InvalidArgument("build_grid: bits outside [2, 16]");
  QuantGrid grid;
  grid.bits = bits;
  grid.delta = Vector(w.cols());
  const double pos_extreme = static_cast<double>((1L << (bits - 1)) - 1);
  for (Eigen::Index c = 0; c < w.cols(); ++c) {
    double peak = w.col(c).cwiseAbs().maxCoeff();
    grid.delta[c] = peak > 0.0 ? peak / pos_extreme : 1.0;
  }
  return grid;
}

long nearest_level(double w, double delta, const QuantGrid& grid) {
  double r = w / delta;
  // Keep the integer cast safe for wildly out-of-range compensated values.
  r = std::clamp(r, static_cast<double>(grid.level_min()) - 1.0,
                 static_cast<double>(grid.level_max()) + 1.0);
  double f = std::floor(r);
  long lo = static_cast<long>(f);
  double frac = r - f;
  long q;
  if (frac > 0.5)
    q = lo + 1;
  else if (frac < 0.5)
    q = lo;
  else
    q = std::abs(lo) <= std::abs(lo + 1) ? lo : lo + 1;  // tie toward zero
  return std::clamp(q, grid.level_min(), grid.level_max());
}

Matrix QuantizedModule::reconstruct() const {
  Matrix w(codes.rows(), codes.cols());
  for (Eigen::Index j = 0; j < codes.cols(); ++j)
    for (Eigen::Index i = 0; i < codes.rows(); ++i)
      w(i, j) = static_cast<double>(codes(i, j)) * grid.delta[j];
  return w;
}

QuantizedModule rtn(const Matrix& w, const QuantGrid& grid) {
  if (grid.delta.size() != w.cols())
    throw ShapeMismatch("rtn: grid built for a different channel count");
  QuantizedModule out;
  out.grid = grid;
  out.codes.resize(w.rows(), w.cols());
  for (Eigen::Index j = 0; j < w.cols(); ++j)
    for (Eigen::Index i = 0; i < w.rows(); ++i)
      out.codes(i, j) = static_cast<std::int16_t>(
          nearest_level(w(i, j), grid.delta[j], grid));
  return out;
}

QuantizedModule sbc_quantize(const Matrix& w, const QuantGrid& grid,
                             const Matrix& hinv0) {
  const int d = static_cast<int>(w.rows());
  if (grid.delta.size() != w.cols())
    throw ShapeMismatch("sbc_quantize: grid built for a different channel count");
  if (hinv0.rows() != d || hinv0.cols() != d)
    throw ShapeMismatch("sbc_quantize: Hinv must be d_in x d_in");

  QuantizedModule out;
  out.grid = grid;
  out.codes.resize(d, w.cols());

  // Row visit order is frozen up front from the initial inverse diagonal.
  std::vector<int> order(d);
  for (int i = 0; i < d; ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    double da = hinv0(a, a), db = hinv0(b, b);
    return da != db ? da < db : a < b;
  });

  Matrix hinv = hinv0;
  Matrix work = w;
  bool fallback = false;
  for (int k = 0; k < d; ++k) {
    const int p = order[k];
    double pivot = hinv(p, p);
    if (!fallback && std::abs(pivot) < linalg::kPivotEpsilon) fallback = true;
    if (fallback) {
      for (Eigen::Index j = 0; j < w.cols(); ++j)
        out.codes(p, j) = static_cast<std::int16_t>(
            nearest_level(work(p, j), grid.delta[j], grid));
      out.rtn_fallback_rows++;
      continue;
    }
    Eigen::RowVectorXd err(w.cols());
    for (Eigen::Index j = 0; j < w.cols(); ++j) {
      long code = nearest_level(work(p, j), grid.delta[j], grid);
      out.codes(p, j) = static_cast<std::int16_t>(code);
      err[j] = work(p, j) - static_cast<double>(code) * grid.delta[j];
    }
    // Masked columns of dead rows are zero, so this touches alive rows only.
    work.noalias() -= (hinv.col(p) / pivot) * err;
    for (Eigen::Index j = 0; j < w.cols(); ++j)
      work(p, j) = static_cast<double>(out.codes(p, j)) * grid.delta[j];
    linalg::inverse_remove_in_place(hinv, p);
  }
  return out;
}

QuantResult quantize_network(const NetworkSpec& net,
                             const std::vector<Matrix>& calib,
                             const QuantOptions& opt) {
  if (opt.bits < 2 || opt.bits > 16)
    throw InvalidArgument("quantize_network: bits outside [2, 16]");
  if (calib.empty())
    throw InvalidArgument("quantize_network: empty calibration set");
  const int workers = resolve_workers(opt.workers);

  detail::BoundNetwork bound = detail::bind_network(net);
  const std::size_t n_mod = bound.views.size();
  if (n_mod == 0) throw InvalidArgument("quantize_network: no modules found");

  std::vector<ModuleCaptures> one_pass_caps;
  if (opt.one_pass_capture)
    one_pass_caps = capture_calibration(bound.net, calib, workers);

  QuantResult result;
  result.report.method = to_string(opt.method);

  for (std::size_t m = 0; m < n_mod; ++m) {
    const double t0 = detail::now_ms();
    const ModuleView& view = bound.views[m];
    const Matrix w_orig = view.lin().weight;
    const int d_in = view.d_in();
    const int d_out = view.d_out();
    std::vector<int> comp = detail::compressible_rows(view.lin());
    const int dc = static_cast<int>(comp.size());

    ModuleCompressionStats stats;
    stats.index = static_cast<int>(m);
    stats.name = "module" + std::to_string(m);
    stats.d_in = d_in;
    stats.d_out = d_out;
    stats.replication = view.replication();
    stats.prunable = static_cast<long>(dc) * d_out;
    stats.bits = opt.bits;

    ModuleCaptures caps =
        opt.one_pass_capture
            ? std::move(one_pass_caps[m])
            : capture_module(bound.net, bound.geo, view, calib, workers);
    if (caps.empty())
      throw InvalidArgument("quantize_network: module " + std::to_string(m) +
                            " captured no inputs");
    const int t_steps = static_cast<int>(caps[0].rows());
    KernelMatrix kernel = KernelMatrix::build(t_steps, view.lif().tau_m);
    std::vector<Matrix> xc = detail::slice_capture_cols(caps, comp, d_in);

    Matrix wc(dc, d_out);
    for (int k = 0; k < dc; ++k) wc.row(k) = w_orig.row(comp[k]);

    QuantizedModule qm;
    try {
      QuantGrid grid = build_grid(wc, opt.bits);
      if (opt.method == QuantMethod::RTN) {
        qm = rtn(wc, grid);
      } else {
        HessianMode mode = opt.method == QuantMethod::SBC ? HessianMode::SMP
                                                          : HessianMode::OBC;
        HessianState state =
            accumulate_captures(xc, dc, mode, &kernel, workers);
        if (!opt.hessian_dump_dir.empty())
          dump_hessian(opt.hessian_dump_dir + "/module" + std::to_string(m),
                       state);
        auto [h, hinv] = state.finalize(opt.damp);
        (void)h;
        qm = sbc_quantize(wc, grid, hinv);
      }
    } catch (const Error& e) {
      throw Error(e.kind(), "module " + std::to_string(m) + ": " + e.what());
    }
    stats.rtn_fallback_rows = qm.rtn_fallback_rows;

    Matrix wc_new = qm.reconstruct();
    Matrix w_full = w_orig;
    for (int k = 0; k < dc; ++k) w_full.row(comp[k]) = wc_new.row(k);
    view.write_back_quant(bound.net, w_full, opt.bits, qm.codes,
                          qm.grid.delta, comp);

    stats.proxy_loss = detail::mean_kernel_loss(xc, kernel, wc_new - wc);
    stats.wall_ms = detail::now_ms() - t0;
    result.report.modules.push_back(std::move(stats));
  }

  for (const auto& s : result.report.modules) {
    result.report.prunable_total += s.prunable;
    result.report.proxy_loss_total += s.proxy_loss;
    result.report.wall_ms_total += s.wall_ms;
  }
  result.net = std::move(bound.net);
  return result;
}

}  // namespace sbc
