#include "sbc/common.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <mutex>
#include <thread>

namespace sbc {

IndexSet::IndexSet(std::vector<int> indices) : idx_(std::move(indices)) {
  std::sort(idx_.begin(), idx_.end());
  for (std::size_t i = 0; i < idx_.size(); ++i) {
    if (idx_[i] < 0) throw InvalidArgument("negative index in IndexSet");
    if (i > 0 && idx_[i] == idx_[i - 1])
      throw InvalidArgument("duplicate index " + std::to_string(idx_[i]) +
                            " in IndexSet");
  }
}

bool IndexSet::contains(int p) const {
  return std::binary_search(idx_.begin(), idx_.end(), p);
}

Rng::Rng(std::uint64_t seed) {
  // Expand the seed into xoshiro256** state via splitmix64.
  std::uint64_t sm = seed;
  for (auto& w : s_) w = splitmix64(sm);
}

Rng Rng::fork(std::uint64_t stream) const {
  std::uint64_t sm = s_[0] ^ (0xa0761d6478bd642fULL * (stream + 1));
  Rng child(0);
  for (auto& w : child.s_) w = splitmix64(sm);
  child.have_spare_ = false;
  return child;
}

static inline std::uint64_t rotl64(std::uint64_t x, int k) {
  return (x << k) | (x >> (64 - k));
}

std::uint64_t Rng::next_u64() {
  std::uint64_t result = rotl64(s_[1] * 5, 7) * 9;
  std::uint64_t t = s_[1] << 17;
  s_[2] ^= s_[0];
  s_[3] ^= s_[1];
  s_[1] ^= s_[2];
  s_[0] ^= s_[3];
  s_[2] ^= t;
  s_[3] = rotl64(s_[3], 45);
  return result;
}

double Rng::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::normal() {
  if (have_spare_) {
    have_spare_ = false;
    return spare_;
  }
  double u1 = 0.0;
  do {
    u1 = uniform();
  } while (u1 <= 0.0);
  double u2 = uniform();
  double r = std::sqrt(-2.0 * std::log(u1));
  double a = 2.0 * M_PI * u2;
  spare_ = r * std::sin(a);
  have_spare_ = true;
  return r * std::cos(a);
}

int Rng::bernoulli(double p) { return uniform() < p ? 1 : 0; }

int Rng::uniform_int(int lo, int hi) {
  if (hi < lo) throw InvalidArgument("uniform_int: empty range");
  std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
  // Rejection sampling for an unbiased draw.
  std::uint64_t limit = UINT64_MAX - UINT64_MAX % span;
  std::uint64_t x;
  do {
    x = next_u64();
  } while (x >= limit);
  return lo + static_cast<int>(x % span);
}

KahanMatrixSum::KahanMatrixSum(int rows, int cols)
    : sum_(Matrix::Zero(rows, cols)), comp_(Matrix::Zero(rows, cols)) {}

void KahanMatrixSum::add(const Matrix& x) {
  if (sum_.size() == 0) {
    sum_ = Matrix::Zero(x.rows(), x.cols());
    comp_ = Matrix::Zero(x.rows(), x.cols());
  }
  if (x.rows() != sum_.rows() || x.cols() != sum_.cols())
    throw ShapeMismatch("KahanMatrixSum: addend shape differs");
  const double* xd = x.data();
  double* sd = sum_.data();
  double* cd = comp_.data();
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    double t = sd[i] + xd[i];
    if (std::abs(sd[i]) >= std::abs(xd[i]))
      cd[i] += (sd[i] - t) + xd[i];
    else
      cd[i] += (xd[i] - t) + sd[i];
    sd[i] = t;
  }
}

void KahanMatrixSum::merge(const KahanMatrixSum& other) {
  if (other.sum_.size() == 0) return;
  add(other.sum_);
  if (sum_.size() == other.comp_.size()) comp_ += other.comp_;
}

Matrix KahanMatrixSum::value() const {
  if (sum_.size() == 0) return Matrix();
  return sum_ + comp_;
}

int resolve_workers(int requested) {
  if (const char* env = std::getenv("SBC_WORKERS")) {
    char* end = nullptr;
    long v = std::strtol(env, &end, 10);
    if (end != env && v > 0) return static_cast<int>(std::min<long>(v, 256));
  }
  if (requested > 0) return std::min(requested, 256);
  unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

std::size_t chunk_count(std::size_t n, std::size_t chunk_size) {
  if (chunk_size == 0) throw InvalidArgument("chunk_size must be positive");
  return (n + chunk_size - 1) / chunk_size;
}

void parallel_chunks(std::size_t n, std::size_t chunk_size, int workers,
                     const std::function<void(std::size_t, std::size_t,
                                              std::size_t)>& fn) {
  if (n == 0) return;
  std::size_t chunks = chunk_count(n, chunk_size);
  int pool = std::max(1, workers);
  if (pool == 1 || chunks == 1) {
    for (std::size_t c = 0; c < chunks; ++c) {
      std::size_t b = c * chunk_size;
      fn(b, std::min(n, b + chunk_size), c);
    }
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr first_error;
  std::mutex err_mu;
  auto work = [&]() {
    for (;;) {
      std::size_t c = next.fetch_add(1);
      if (c >= chunks) return;
      std::size_t b = c * chunk_size;
      try {
        fn(b, std::min(n, b + chunk_size), c);
      } catch (...) {
        std::lock_guard<std::mutex> lk(err_mu);
        if (!first_error) first_error = std::current_exception();
        return;
      }
    }
  };
  std::vector<std::thread> threads;
  int spawn = static_cast<int>(std::min<std::size_t>(pool, chunks));
  threads.reserve(spawn);
  for (int i = 0; i < spawn; ++i) threads.emplace_back(work);
  for (auto& t : threads) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

}  // namespace sbc
