#include <doctest.h>

#include "sbc/hessian.hpp"
#include "sbc/linalg.hpp"

#include <json.hpp>

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <vector>

using namespace sbc;

namespace {

Matrix random_spikes(Rng& rng, int t_steps, int features, double p = 0.4) {
  Matrix m(t_steps, features);
  for (int t = 0; t < t_steps; ++t)
    for (int f = 0; f < features; ++f) m(t, f) = rng.bernoulli(p);
  return m;
}

// plain summation oracle, no compensation, no fast paths
Matrix brute_hessian(const std::vector<Matrix>& xs, const Matrix& m,
                     bool filtered) {
  Matrix h = Matrix::Zero(xs[0].cols(), xs[0].cols());
  for (const Matrix& x : xs) {
    Matrix z = filtered ? Matrix(m * x) : x;
    h += 2.0 * (z.transpose() * z);
  }
  return h / static_cast<double>(xs.size());
}

}  // namespace

TEST_CASE("filtered curvature matches a hand-computed value") {
  // T = 2, tau = 2: kernel rows are [0.5, 0] and [0.25, 0.5].
  // X = [[1, 1], [0, 1]] gives MX = [[0.5, 0.5], [0.25, 0.75]] and
  // H = 2 (MX)^T MX = [[0.625, 0.875], [0.875, 1.625]].
  KernelMatrix m = KernelMatrix::build(2, 2.0);
  Matrix x(2, 2);
  x << 1, 1, 0, 1;
  HessianState st(2, HessianMode::SMP, &m);
  st.accumulate(x);
  Matrix h = st.average();
  CHECK(h(0, 0) == 0.625);
  CHECK(h(0, 1) == 0.875);
  CHECK(h(1, 0) == 0.875);
  CHECK(h(1, 1) == 1.625);

  HessianState ob(2, HessianMode::OBC, nullptr);
  ob.accumulate(x);
  Matrix ho = ob.average();
  CHECK(ho(0, 0) == 2.0);
  CHECK(ho(0, 1) == 2.0);
  CHECK(ho(1, 1) == 4.0);
}

TEST_CASE("accumulated curvature matches the brute-force sum") {
  Rng rng(71);
  for (double tau : {2.0, 3.5, kIfTau}) {
    KernelMatrix m = KernelMatrix::build(6, tau);
    std::vector<Matrix> xs;
    for (int i = 0; i < 23; ++i) xs.push_back(random_spikes(rng, 6, 5));
    HessianState smp(5, HessianMode::SMP, &m);
    HessianState obc(5, HessianMode::OBC, nullptr);
    for (const Matrix& x : xs) {
      smp.accumulate(x);
      obc.accumulate(x);
    }
    CHECK((smp.average() - brute_hessian(xs, m.matrix(), true))
              .cwiseAbs()
              .maxCoeff() < 1e-12);
    CHECK((obc.average() - brute_hessian(xs, m.matrix(), false))
              .cwiseAbs()
              .maxCoeff() < 1e-12);
    CHECK(smp.sample_count() == 23);
  }
}

TEST_CASE("unit time constant collapses the filtered form onto the plain one") {
  Rng rng(72);
  KernelMatrix m = KernelMatrix::build(8, 1.0);
  HessianState smp(6, HessianMode::SMP, &m);
  HessianState obc(6, HessianMode::OBC, nullptr);
  for (int i = 0; i < 17; ++i) {
    Matrix x = random_spikes(rng, 8, 6);
    smp.accumulate(x);
    obc.accumulate(x);
  }
  Matrix a = smp.average(), b = obc.average();
  for (int i = 0; i < 6; ++i)
    for (int j = 0; j < 6; ++j) CHECK(a(i, j) == b(i, j));
}

TEST_CASE("quadratic form agrees with the filtered reconstruction error") {
  // w^T H w = (2/N) sum ||M X w||^2
  Rng rng(73);
  KernelMatrix m = KernelMatrix::build(7, 3.0);
  std::vector<Matrix> xs;
  for (int i = 0; i < 11; ++i) xs.push_back(random_spikes(rng, 7, 4));
  HessianState st(4, HessianMode::SMP, &m);
  for (const Matrix& x : xs) st.accumulate(x);
  Matrix h = st.average();
  for (int trial = 0; trial < 10; ++trial) {
    Vector w(4);
    for (int i = 0; i < 4; ++i) w[i] = rng.normal();
    double quad = w.transpose() * h * w;
    double direct = 0.0;
    for (const Matrix& x : xs) direct += 2.0 * (m.matrix() * x * w).squaredNorm();
    direct /= static_cast<double>(xs.size());
    CHECK(std::abs(quad - direct) <= 1e-10 * std::max(1.0, std::abs(direct)));
  }
}

TEST_CASE("chunked accumulation is worker-invariant") {
  Rng rng(74);
  KernelMatrix m = KernelMatrix::build(5, 2.5);
  std::vector<Matrix> xs;
  for (int i = 0; i < 70; ++i) xs.push_back(random_spikes(rng, 5, 7));
  HessianState one = accumulate_captures(xs, 7, HessianMode::SMP, &m, 1);
  HessianState four = accumulate_captures(xs, 7, HessianMode::SMP, &m, 4);
  Matrix a = one.average(), b = four.average();
  for (int i = 0; i < 7; ++i)
    for (int j = 0; j < 7; ++j) CHECK(a(i, j) == b(i, j));
  CHECK(one.sample_count() == 70);
  CHECK(four.sample_count() == 70);

  // sequential reference built without chunking
  HessianState seq(7, HessianMode::SMP, &m);
  for (const Matrix& x : xs) seq.accumulate(x);
  CHECK((seq.average() - a).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("finalize dampens the diagonal before inverting") {
  Rng rng(75);
  KernelMatrix m = KernelMatrix::build(4, 2.0);
  HessianState st(3, HessianMode::SMP, &m);
  for (int i = 0; i < 30; ++i) st.accumulate(random_spikes(rng, 4, 3));
  auto [h, hinv] = st.finalize(0.05);
  double lam = 0.05 * h.diagonal().mean();
  Matrix want = (h + lam * Matrix::Identity(3, 3)).inverse();
  CHECK((hinv - want).cwiseAbs().maxCoeff() < 1e-9);

  HessianState empty(3, HessianMode::SMP, &m);
  CHECK_THROWS_AS(empty.finalize(0.05), InvalidArgument);
  CHECK_THROWS_AS(empty.average(), InvalidArgument);
}

TEST_CASE("state validation") {
  KernelMatrix m = KernelMatrix::build(4, 2.0);
  CHECK_THROWS_AS(HessianState(0, HessianMode::OBC, nullptr), InvalidArgument);
  CHECK_THROWS_AS(HessianState(3, HessianMode::SMP, nullptr), InvalidArgument);
  HessianState st(3, HessianMode::SMP, &m);
  CHECK_THROWS_AS(st.accumulate(Matrix::Zero(4, 5)), ShapeMismatch);
  CHECK_THROWS_AS(st.accumulate(Matrix::Zero(3, 3)), ShapeMismatch);
  HessianState other(4, HessianMode::OBC, nullptr);
  CHECK_THROWS_AS(st.merge(other), InvalidArgument);
}

TEST_CASE("dump writes the averaged matrix and a sidecar") {
  Rng rng(76);
  KernelMatrix m = KernelMatrix::build(4, 2.0);
  HessianState st(3, HessianMode::SMP, &m);
  for (int i = 0; i < 5; ++i) st.accumulate(random_spikes(rng, 4, 3));
  std::string base = "/tmp/sbc_test_hdump";
  dump_hessian(base, st);

  std::ifstream bin(base + ".bin", std::ios::binary);
  REQUIRE(bin.good());
  Matrix h = st.average();
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      double v = 0.0;
      bin.read(reinterpret_cast<char*>(&v), sizeof(v));
      CHECK(v == h(i, j));
    }
  char extra;
  bin.read(&extra, 1);
  CHECK(bin.eof());

  std::ifstream js(base + ".json");
  nlohmann::json side = nlohmann::json::parse(js);
  CHECK(side["dim"] == 3);
  CHECK(side["mode"] == "smp");
  CHECK(side["samples"] == 5);
  std::remove((base + ".bin").c_str());
  std::remove((base + ".json").c_str());
}
