#include <doctest.h>

#include "sbc/linalg.hpp"

#include <vector>

using namespace sbc;
using namespace sbc::linalg;

namespace {

Matrix random_spd(Rng& rng, int n, double ridge = 0.5) {
  Matrix b(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) b(i, j) = rng.normal();
  return b.transpose() * b + ridge * Matrix::Identity(n, n);
}

}  // namespace

TEST_CASE("spd inverse inverts and dampens") {
  Rng rng(11);
  for (int n : {1, 2, 5, 17}) {
    Matrix h = random_spd(rng, n);
    Matrix inv = spd_inverse(h, 0.0);
    CHECK(max_rel_diff(h * inv, Matrix::Identity(n, n)) < 1e-9);
    CHECK(max_rel_diff(inv, inv.transpose()) == 0.0);

    double damp = 0.01;
    Matrix damped = h;
    damped.diagonal().array() += damp * h.diagonal().mean();
    CHECK(max_rel_diff(spd_inverse(h, damp), spd_inverse(damped, 0.0)) < 1e-10);
  }
  CHECK_THROWS_AS(spd_inverse(Matrix::Zero(2, 3), 0.0), ShapeMismatch);
  CHECK_THROWS_AS(spd_inverse(random_spd(rng, 3), -0.5), InvalidArgument);
  Matrix indef(2, 2);
  indef << 1.0, 0.0, 0.0, -1.0;
  CHECK_THROWS_AS(spd_inverse(indef, 0.0), NotPositiveDefinite);
}

TEST_CASE("single removal matches fresh inversion") {
  Rng rng(21);
  for (int trial = 0; trial < 50; ++trial) {
    int n = 2 + rng.uniform_int(0, 10);
    Matrix h = random_spd(rng, n);
    Matrix inv = spd_inverse(h, 0.0);
    int p = rng.uniform_int(0, n - 1);
    Matrix shrunk = inverse_remove(inv, p);
    Matrix fresh = spd_inverse(delete_row_col(h, p), 0.0);
    CHECK(max_rel_diff(shrunk, fresh) < 1e-8);
  }
}

TEST_CASE("block removal matches fresh inversion") {
  Rng rng(22);
  for (int trial = 0; trial < 50; ++trial) {
    int n = 3 + rng.uniform_int(0, 12);
    Matrix h = random_spd(rng, n);
    Matrix inv = spd_inverse(h, 0.0);
    int k = 1 + rng.uniform_int(0, n - 2);
    std::vector<int> pick;
    while (static_cast<int>(pick.size()) < k) {
      int c = rng.uniform_int(0, n - 1);
      bool seen = false;
      for (int v : pick) seen |= v == c;
      if (!seen) pick.push_back(c);
    }
    IndexSet p(pick);
    Matrix shrunk = inverse_remove_block(inv, p);
    Matrix fresh = spd_inverse(delete_rows_cols(h, p), 0.0);
    CHECK(max_rel_diff(shrunk, fresh) < 1e-8);
  }
}

TEST_CASE("masked removal zeroes dead coordinates and keeps the rest") {
  Rng rng(23);
  Matrix h = random_spd(rng, 8);
  Matrix inv = spd_inverse(h, 0.0);

  Matrix masked = inv;
  inverse_remove_in_place(masked, 3);
  CHECK(masked.row(3).cwiseAbs().maxCoeff() == 0.0);
  CHECK(masked.col(3).cwiseAbs().maxCoeff() == 0.0);
  Matrix alive = delete_row_col(masked, 3);
  CHECK(max_rel_diff(alive, inverse_remove(inv, 3)) == 0.0);

  // removing an already-dead coordinate is a singularity, not a no-op
  CHECK_THROWS_AS(inverse_remove_in_place(masked, 3), SingularPivot);
  IndexSet dead(std::vector<int>{1, 3});
  Matrix masked2 = masked;
  CHECK_THROWS_AS(inverse_remove_block_in_place(masked2, dead), SingularBlock);
}

TEST_CASE("mixed masked removal sequence tracks the shrinking inverse") {
  Rng rng(24);
  for (int trial = 0; trial < 20; ++trial) {
    int n = 6 + rng.uniform_int(0, 10);
    Matrix h = random_spd(rng, n);
    Matrix masked = spd_inverse(h, 0.0);
    std::vector<int> alive(n);
    for (int i = 0; i < n; ++i) alive[i] = i;

    while (static_cast<int>(alive.size()) > 2) {
      int take = 1 + rng.uniform_int(0, std::min<int>(3, alive.size() - 2));
      std::vector<int> seats;
      while (static_cast<int>(seats.size()) < take) {
        int s = rng.uniform_int(0, static_cast<int>(alive.size()) - 1);
        bool seen = false;
        for (int v : seats) seen |= v == s;
        if (!seen) seats.push_back(s);
      }
      std::vector<int> global;
      for (int s : seats) global.push_back(alive[s]);
      if (take == 1)
        inverse_remove_in_place(masked, global[0]);
      else
        inverse_remove_block_in_place(masked, IndexSet(global));

      std::vector<int> next;
      for (int a : alive) {
        bool gone = false;
        for (int g : global) gone |= g == a;
        if (!gone) next.push_back(a);
      }
      alive = next;

      Matrix sub_h(alive.size(), alive.size());
      Matrix sub_m(alive.size(), alive.size());
      for (std::size_t r = 0; r < alive.size(); ++r)
        for (std::size_t c = 0; c < alive.size(); ++c) {
          sub_h(r, c) = h(alive[r], alive[c]);
          sub_m(r, c) = masked(alive[r], alive[c]);
        }
      CHECK(max_rel_diff(sub_m, spd_inverse(sub_h, 0.0)) < 1e-8);
    }
  }
}

TEST_CASE("block solve matches the gathered submatrix solve") {
  Rng rng(25);
  Matrix h = random_spd(rng, 9);
  Matrix inv = spd_inverse(h, 0.0);
  IndexSet p(std::vector<int>{0, 4, 7});
  Vector rhs(3);
  rhs << 1.0, -2.0, 0.5;
  Matrix block(3, 3);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) block(i, j) = inv(p.values()[i], p.values()[j]);
  Vector want = block.ldlt().solve(rhs);
  Vector got = block_solve(inv, p, rhs);
  CHECK((want - got).cwiseAbs().maxCoeff() < 1e-10);

  CHECK(block_solve(inv, IndexSet(), Vector(0)).size() == 0);
  CHECK_THROWS_AS(block_solve(inv, p, Vector::Zero(2)), ShapeMismatch);
}

TEST_CASE("relative diff uses an absolute floor near zero") {
  Matrix a(1, 2), b(1, 2);
  a << 0.0, 2.0;
  b << 1e-13, 1.0;
  CHECK(max_rel_diff(a, b) == doctest::Approx(0.5));
  CHECK(max_rel_diff(a, a) == 0.0);
}
