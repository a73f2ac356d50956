#include <doctest.h>

#include "sbc/prune.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <tuple>
#include <vector>

using namespace sbc;

namespace {

Matrix random_matrix(Rng& rng, int r, int c, double scale = 1.0) {
  Matrix m(r, c);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) m(i, j) = rng.normal() * scale;
  return m;
}

Matrix random_spikes(Rng& rng, int t_steps, int features, double p = 0.4) {
  Matrix m(t_steps, features);
  for (int t = 0; t < t_steps; ++t)
    for (int f = 0; f < features; ++f) m(t, f) = rng.bernoulli(p);
  return m;
}

Matrix random_spd(Rng& rng, int d) {
  Matrix b = random_matrix(rng, d, d);
  return b.transpose() * b + 0.5 * Matrix::Identity(d, d);
}

NetworkSpec random_mlp(Rng& rng, const std::vector<int>& dims, double tau) {
  NetworkSpec net = make_mlp(dims, tau, 1.0);
  for (auto& l : net.layers)
    if (l.kind == LayerKind::Linear) {
      auto& lin = l.as<LinearLayer>();
      lin.weight = random_matrix(rng, static_cast<int>(lin.weight.rows()),
                                 static_cast<int>(lin.weight.cols()), 0.5);
    }
  return net;
}

std::vector<Matrix> random_calib(Rng& rng, int n, int t_steps, int features) {
  std::vector<Matrix> v;
  for (int i = 0; i < n; ++i) v.push_back(random_spikes(rng, t_steps, features));
  return v;
}

// literal one-at-a-time retirement, plain Sherman-Morrison downdate
OrderResult order_oracle(Vector w, Matrix hinv) {
  const int d = static_cast<int>(w.size());
  OrderResult r;
  r.losses = Vector::Zero(d);
  std::vector<char> alive(d, 1);
  for (int step = 0; step < d; ++step) {
    int best = -1;
    double bs = std::numeric_limits<double>::infinity();
    for (int p = 0; p < d; ++p) {
      if (!alive[p]) continue;
      double s = w[p] * w[p] / hinv(p, p);
      if (s < bs) {
        bs = s;
        best = p;
      }
    }
    r.order.push_back(best);
    r.losses[best] = bs;
    double pivot = hinv(best, best);
    w -= (w[best] / pivot) * hinv.col(best);
    w[best] = 0.0;
    Vector col = hinv.col(best);
    hinv -= (col * col.transpose()) / pivot;
    hinv.row(best).setZero();
    hinv.col(best).setZero();
    alive[best] = 0;
  }
  return r;
}

// direct constrained minimizer: solve on the keep set
Vector mask_oracle(const Vector& w, const std::vector<int>& p,
                   const Matrix& h) {
  const int d = static_cast<int>(w.size());
  std::vector<char> in_p(d, 0);
  for (int q : p) in_p[q] = 1;
  std::vector<int> keep;
  for (int i = 0; i < d; ++i)
    if (!in_p[i]) keep.push_back(i);
  Matrix hkk(keep.size(), keep.size());
  Matrix hkp(keep.size(), p.size());
  Vector wp(p.size());
  for (std::size_t a = 0; a < keep.size(); ++a) {
    for (std::size_t b = 0; b < keep.size(); ++b)
      hkk(a, b) = h(keep[a], keep[b]);
    for (std::size_t b = 0; b < p.size(); ++b) hkp(a, b) = h(keep[a], p[b]);
  }
  for (std::size_t b = 0; b < p.size(); ++b) wp[b] = w[p[b]];
  Vector delta = hkk.ldlt().solve(hkp * wp);
  Vector out = Vector::Zero(d);
  for (std::size_t a = 0; a < keep.size(); ++a)
    out[keep[a]] = w[keep[a]] + delta[a];
  return out;
}

const LinearLayer& linear_at(const NetworkSpec& net, int idx) {
  return net.layers[idx].as<LinearLayer>();
}

}  // namespace

TEST_CASE("magnitude scores normalize by the surviving tail") {
  LampScoreTable t = lamp_scores({{1.0, 2.0, 3.0}});
  REQUIRE(t.layers.size() == 1);
  const auto& l = t.layers[0];
  REQUIRE(l.size() == 3);
  CHECK(l[0].weight_index == 0);
  CHECK(l[0].score == 1.0 / 14.0);
  CHECK(l[1].weight_index == 1);
  CHECK(l[1].score == 4.0 / 13.0);
  CHECK(l[2].weight_index == 2);
  CHECK(l[2].score == 1.0);

  // zeros score zero, sign ignored, magnitude ties keep index order
  LampScoreTable z = lamp_scores({{0.0, -2.0, 2.0, 0.0}});
  const auto& zl = z.layers[0];
  CHECK(zl[0].score == 0.0);
  CHECK(zl[1].score == 0.0);
  CHECK(zl[0].weight_index == 0);
  CHECK(zl[1].weight_index == 3);
  CHECK(zl[2].weight_index == 1);
  CHECK(zl[2].score == 0.5);
  CHECK(zl[3].score == 1.0);

  LampScoreTable e = lamp_scores({{}, {5.0}});
  CHECK(e.layers[0].empty());
  CHECK(e.layers[1][0].score == 1.0);
}

TEST_CASE("global allocation floors the target and breaks ties stably") {
  // layers {1,2,3} and {1,2,3}: scores equal pairwise, layer 0 first
  std::vector<std::vector<double>> mags{{1, 2, 3}, {1, 2, 3}};
  CHECK(lamps_allocate(mags, 0.0) == std::vector<long>{0, 0});
  CHECK(lamps_allocate(mags, 0.5) == std::vector<long>{2, 1});
  CHECK(lamps_allocate(mags, 0.34) == std::vector<long>{1, 1});
  // target = floor(0.5 * 6) = 3: items sorted (1/14 L0), (1/14 L1), (4/13 L0)

  // heavier layer keeps its weights
  std::vector<std::vector<double>> uneven{{0.1, 0.1, 0.1}, {10.0, 10.0, 10.0}};
  auto c = lamps_allocate(uneven, 0.5);
  CHECK(c[0] == 2);
  CHECK(c[1] == 1);
  // scores inside each layer are scale-invariant; cross-layer ordering
  // compares tail shares, so equal-share layers interleave by layer index

  CHECK_THROWS_AS(lamps_allocate(mags, 1.0), InvalidArgument);
  CHECK_THROWS_AS(lamps_allocate(mags, -0.1), InvalidArgument);
}

TEST_CASE("single-weight retirement matches the literal procedure") {
  Rng rng(81);
  for (int trial = 0; trial < 30; ++trial) {
    int d = rng.uniform_int(4, 12);
    Matrix h = random_spd(rng, d);
    Matrix hinv = h.inverse();
    Vector w = random_matrix(rng, d, 1).col(0);
    OrderResult got = order_weights(w, hinv, 1);
    OrderResult want = order_oracle(w, hinv);
    REQUIRE(got.order.size() == static_cast<std::size_t>(d));
    CHECK(got.order == want.order);
    for (int i = 0; i < d; ++i)
      CHECK(std::abs(got.losses[i] - want.losses[i]) <=
            1e-9 * std::max(1.0, std::abs(want.losses[i])));
  }
}

TEST_CASE("whole-batch retirement records the initial scores") {
  Rng rng(82);
  int d = 10;
  Matrix hinv = random_spd(rng, d).inverse();
  Vector w = random_matrix(rng, d, 1).col(0);
  OrderResult got = order_weights(w, hinv, d);
  std::vector<std::pair<double, int>> scores;
  for (int p = 0; p < d; ++p) scores.emplace_back(w[p] * w[p] / hinv(p, p), p);
  std::sort(scores.begin(), scores.end());
  for (int k = 0; k < d; ++k) {
    CHECK(got.order[k] == scores[k].second);
    CHECK(got.losses[scores[k].second] == scores[k].first);
  }
}

TEST_CASE("tiny pivots retire last without compensation") {
  Matrix hinv = Matrix::Identity(3, 3);
  hinv(1, 1) = 1e-15;
  Vector w(3);
  w << 1.0, 2.0, 3.0;
  OrderResult r = order_weights(w, hinv, 1);
  CHECK(r.order == std::vector<int>{0, 2, 1});
  CHECK(r.losses[0] == 1.0);
  CHECK(r.losses[2] == 9.0);
  CHECK(std::isinf(r.losses[1]));

  CHECK_THROWS_AS(order_weights(w, hinv, 0), InvalidArgument);
  CHECK_THROWS_AS(order_weights(w, hinv, 4), InvalidArgument);
  CHECK_THROWS_AS(order_weights(w, Matrix::Identity(2, 2), 1), ShapeMismatch);
}

TEST_CASE("masked zeroing solves the constrained problem") {
  Rng rng(83);
  for (int trial = 0; trial < 100; ++trial) {
    int d = rng.uniform_int(3, 16);
    Matrix h = random_spd(rng, d);
    Matrix hinv = h.inverse();
    Vector w = random_matrix(rng, d, 1).col(0);
    int np = rng.uniform_int(1, std::min(8, d - 1));
    std::vector<int> pv;
    while (static_cast<int>(pv.size()) < np) {
      int q = rng.uniform_int(0, d - 1);
      if (std::find(pv.begin(), pv.end(), q) == pv.end()) pv.push_back(q);
    }
    IndexSet p(pv);
    Vector got = apply_mask(w, p, hinv);
    Vector want = mask_oracle(w, pv, h);
    for (int q : pv) CHECK(got[q] == 0.0);
    CHECK((got - want).cwiseAbs().maxCoeff() < 1e-8);
  }
}

TEST_CASE("masked zeroing edge cases") {
  Rng rng(84);
  Matrix hinv = random_spd(rng, 5).inverse();
  Vector w = random_matrix(rng, 5, 1).col(0);
  Vector same = apply_mask(w, IndexSet(std::vector<int>{}), hinv);
  CHECK((same - w).cwiseAbs().maxCoeff() == 0.0);
  Vector zero = apply_mask(w, IndexSet(std::vector<int>{0, 1, 2, 3, 4}), hinv);
  CHECK(zero.cwiseAbs().maxCoeff() == 0.0);
  CHECK_THROWS_AS(apply_mask(w, IndexSet(std::vector<int>{5}), hinv),
                  InvalidArgument);
  CHECK_THROWS_AS(apply_mask(w, IndexSet(std::vector<int>{0}),
                             Matrix::Identity(4, 4)),
                  ShapeMismatch);
}

TEST_CASE("zero sparsity leaves the network untouched") {
  Rng rng(85);
  NetworkSpec net = random_mlp(rng, {8, 6, 5}, 2.0);
  auto calib = random_calib(rng, 10, 6, 8);
  PruneOptions opt;
  opt.sparsity = 0.0;
  PruneResult res = prune_network(net, calib, opt);
  NetworkSpec folded = fold_network(net);
  for (int idx : {0, 2})
    CHECK((linear_at(res.net, idx).weight - linear_at(folded, idx).weight)
              .cwiseAbs()
              .maxCoeff() == 0.0);
  CHECK(res.report.pruned_total == 0);
  CHECK(res.report.sparsity_total == 0.0);
  CHECK(res.report.proxy_loss_total == 0.0);
  for (const auto& m : res.masks) CHECK(m.cast<int>().sum() == 0);
}

TEST_CASE("pruned counts hit the floored global target exactly") {
  Rng rng(86);
  NetworkSpec net = random_mlp(rng, {8, 6, 5}, 2.0);
  auto calib = random_calib(rng, 12, 6, 8);
  for (double s : {0.3, 0.5, 0.77}) {
    PruneOptions opt;
    opt.sparsity = s;
    opt.method = PruneMethod::SBC;
    PruneResult res = prune_network(net, calib, opt);
    long prunable = 8 * 6 + 6 * 5;
    CHECK(res.report.prunable_total == prunable);
    CHECK(res.report.pruned_total ==
          static_cast<long>(std::floor(s * prunable)));
    long mask_sum = 0;
    for (std::size_t m = 0; m < res.masks.size(); ++m) {
      mask_sum += res.masks[m].cast<long>().sum();
      CHECK(res.masks[m].cast<long>().sum() == res.report.modules[m].pruned);
    }
    CHECK(mask_sum == res.report.pruned_total);
    // every masked coordinate is an exact zero in the surviving weights
    for (std::size_t m = 0; m < res.masks.size(); ++m) {
      const Matrix& w = linear_at(res.net, m == 0 ? 0 : 2).weight;
      for (int i = 0; i < res.masks[m].rows(); ++i)
        for (int j = 0; j < res.masks[m].cols(); ++j)
          if (res.masks[m](i, j)) CHECK(w(i, j) == 0.0);
    }
  }
}

TEST_CASE("magnitude pruning zeroes the allocated smallest weights in place") {
  Rng rng(87);
  NetworkSpec net = random_mlp(rng, {7, 6, 4}, 2.0);
  auto calib = random_calib(rng, 8, 5, 7);
  PruneOptions opt;
  opt.sparsity = 0.6;
  opt.method = PruneMethod::MBP;
  PruneResult res = prune_network(net, calib, opt);

  NetworkSpec folded = fold_network(net);
  std::vector<std::vector<double>> mags(2);
  for (int m = 0; m < 2; ++m) {
    const Matrix& w = linear_at(folded, m == 0 ? 0 : 2).weight;
    for (int i = 0; i < w.rows(); ++i)
      for (int j = 0; j < w.cols(); ++j) mags[m].push_back(std::abs(w(i, j)));
  }
  auto counts = lamps_allocate(mags, 0.6);
  for (int m = 0; m < 2; ++m) {
    Matrix w = linear_at(folded, m == 0 ? 0 : 2).weight;
    std::vector<std::tuple<double, int, int>> items;
    for (int i = 0; i < w.rows(); ++i)
      for (int j = 0; j < w.cols(); ++j)
        items.emplace_back(std::abs(w(i, j)), i, j);
    std::sort(items.begin(), items.end());
    for (long k = 0; k < counts[m]; ++k)
      w(std::get<1>(items[k]), std::get<2>(items[k])) = 0.0;
    CHECK((linear_at(res.net, m == 0 ? 0 : 2).weight - w)
              .cwiseAbs()
              .maxCoeff() == 0.0);
    CHECK(res.report.modules[m].pruned == counts[m]);
  }
  CHECK(res.report.method == "mbp");
}

TEST_CASE("identity shortcut wires are never pruned") {
  Rng rng(88);
  NetworkSpec net;
  net.input_shape = TensorShape{6, 1, 1};
  net.push(make_linear(random_matrix(rng, 6, 6, 0.5)));
  net.push(make_lif(2.0, 1.0, 0));
  net.push(make_linear(random_matrix(rng, 6, 6, 0.5), Vector(), 1));
  net.push(make_add(2, 1, ShortcutMode::Concat));
  net.push(make_lif(2.0, 1.0, 3));
  auto calib = random_calib(rng, 10, 6, 6);
  PruneOptions opt;
  opt.sparsity = 0.7;
  PruneResult res = prune_network(net, calib, opt);
  REQUIRE(res.masks.size() == 2);
  CHECK(res.masks[1].rows() == 12);
  CHECK(res.report.modules[1].prunable == 36);
  CHECK(res.masks[1].bottomRows(6).cast<int>().sum() == 0);
  CHECK(res.report.pruned_total ==
        static_cast<long>(std::floor(0.7 * 72.0)));
}

TEST_CASE("pruning is invariant to the worker count") {
  Rng rng(89);
  NetworkSpec net = random_mlp(rng, {9, 7, 5}, 2.5);
  auto calib = random_calib(rng, 20, 6, 9);
  PruneOptions a;
  a.sparsity = 0.5;
  a.b_out = 2;
  a.workers = 1;
  PruneOptions b = a;
  b.workers = 4;
  PruneResult ra = prune_network(net, calib, a);
  PruneResult rb = prune_network(net, calib, b);
  for (int idx : {0, 2}) {
    const Matrix& wa = linear_at(ra.net, idx).weight;
    const Matrix& wb = linear_at(rb.net, idx).weight;
    for (int i = 0; i < wa.rows(); ++i)
      for (int j = 0; j < wa.cols(); ++j) CHECK(wa(i, j) == wb(i, j));
  }
  for (std::size_t m = 0; m < ra.masks.size(); ++m)
    CHECK((ra.masks[m].cast<int>() - rb.masks[m].cast<int>()).cwiseAbs().sum() ==
          0);
  CHECK(ra.report.proxy_loss_total == rb.report.proxy_loss_total);
}

TEST_CASE("unit time constant reduces the kernel method to the plain one") {
  Rng rng(90);
  NetworkSpec net = random_mlp(rng, {8, 6, 4}, 1.0);
  auto calib = random_calib(rng, 14, 5, 8);
  PruneOptions a;
  a.sparsity = 0.55;
  a.method = PruneMethod::SBC;
  PruneOptions b = a;
  b.method = PruneMethod::ExactOBS;
  PruneResult ra = prune_network(net, calib, a);
  PruneResult rb = prune_network(net, calib, b);
  for (int idx : {0, 2}) {
    const Matrix& wa = linear_at(ra.net, idx).weight;
    const Matrix& wb = linear_at(rb.net, idx).weight;
    for (int i = 0; i < wa.rows(); ++i)
      for (int j = 0; j < wa.cols(); ++j) CHECK(wa(i, j) == wb(i, j));
  }
}

TEST_CASE("reported proxy loss matches a direct recomputation") {
  Rng rng(91);
  NetworkSpec net = random_mlp(rng, {8, 6, 5}, 3.0);
  // keep the hidden layer spiking so the second module stays well-posed
  auto& w0 = net.layers[0].as<LinearLayer>().weight;
  w0 = w0.cwiseAbs() * 0.5 + Matrix::Constant(8, 6, 0.1);
  auto calib = random_calib(rng, 12, 6, 8);
  PruneOptions opt;
  opt.sparsity = 0.5;
  PruneResult res = prune_network(net, calib, opt);

  NetworkSpec folded = fold_network(net);
  auto caps = capture_calibration(folded, calib, 1);
  Matrix delta = linear_at(res.net, 0).weight - linear_at(folded, 0).weight;
  KernelMatrix km = KernelMatrix::build(6, 3.0);
  double want = 0.0;
  for (const Matrix& x : caps[0]) want += (km.matrix() * x * delta).squaredNorm();
  want /= static_cast<double>(caps[0].size());
  CHECK(std::abs(res.report.modules[0].proxy_loss - want) <=
        1e-9 * std::max(1.0, want));
}

TEST_CASE("one-pass capture agrees on the first module") {
  Rng rng(92);
  NetworkSpec net = random_mlp(rng, {8, 6, 5}, 2.0);
  auto calib = random_calib(rng, 10, 6, 8);
  PruneOptions seq;
  seq.sparsity = 0.5;
  PruneOptions once = seq;
  once.one_pass_capture = true;
  PruneResult rs = prune_network(net, calib, seq);
  PruneResult ro = prune_network(net, calib, once);
  const Matrix& ws = linear_at(rs.net, 0).weight;
  const Matrix& wo = linear_at(ro.net, 0).weight;
  for (int i = 0; i < ws.rows(); ++i)
    for (int j = 0; j < ws.cols(); ++j) CHECK(ws(i, j) == wo(i, j));
  CHECK((rs.masks[0].cast<int>() - ro.masks[0].cast<int>()).cwiseAbs().sum() ==
        0);
}

TEST_CASE("prune rejects invalid configurations") {
  Rng rng(93);
  NetworkSpec net = random_mlp(rng, {6, 4}, 2.0);
  auto calib = random_calib(rng, 4, 4, 6);
  PruneOptions opt;
  opt.sparsity = 1.0;
  CHECK_THROWS_AS(prune_network(net, calib, opt), InvalidArgument);
  opt.sparsity = 0.5;
  CHECK_THROWS_AS(prune_network(net, {}, opt), InvalidArgument);
  opt.b_in = 0;
  CHECK_THROWS_AS(prune_network(net, calib, opt), InvalidArgument);
}
