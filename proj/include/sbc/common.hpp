#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace sbc {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

/// Base class for all failures raised by this library.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& msg)
      : std::runtime_error(kind + ": " + msg), kind_(std::move(kind)) {}
  const std::string& kind() const { return kind_; }

 private:
  std::string kind_;
};

#define SBC_DEFINE_ERROR(Name)                                 \
  class Name : public Error {                                  \
   public:                                                     \
    explicit Name(const std::string& msg) : Error(#Name, msg) {} \
  }

SBC_DEFINE_ERROR(NotPositiveDefinite);
SBC_DEFINE_ERROR(SingularPivot);
SBC_DEFINE_ERROR(SingularBlock);
SBC_DEFINE_ERROR(ShapeMismatch);
SBC_DEFINE_ERROR(InvalidTau);
SBC_DEFINE_ERROR(InvalidGeometry);
SBC_DEFINE_ERROR(MissingStats);
SBC_DEFINE_ERROR(VersionMismatch);
SBC_DEFINE_ERROR(CorruptPayload);
SBC_DEFINE_ERROR(ShapeInconsistent);
SBC_DEFINE_ERROR(RateUnattainable);
SBC_DEFINE_ERROR(InvalidArgument);

#undef SBC_DEFINE_ERROR

// ---------------------------------------------------------------------------
// Index sets
// ---------------------------------------------------------------------------

/// Sorted, duplicate-free set of nonnegative indices.
class IndexSet {
 public:
  IndexSet() = default;
  explicit IndexSet(std::vector<int> indices);

  static IndexSet single(int p) { return IndexSet(std::vector<int>{p}); }

  const std::vector<int>& values() const { return idx_; }
  int size() const { return static_cast<int>(idx_.size()); }
  bool empty() const { return idx_.empty(); }
  bool contains(int p) const;
  int max_index() const { return idx_.empty() ? -1 : idx_.back(); }

 private:
  std::vector<int> idx_;
};

// ---------------------------------------------------------------------------
// Deterministic RNG
// ---------------------------------------------------------------------------

inline std::uint64_t splitmix64(std::uint64_t& state) {
  state += 0x9e3779b97f4a7c15ULL;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Seedable generator with platform-independent output. The standard
/// distributions are implementation-defined, so uniform/normal draws are
/// produced with explicit transforms to keep generated files byte-stable.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  /// Derive an independent stream for a named sub-task.
  Rng fork(std::uint64_t stream) const;

  std::uint64_t next_u64();
  double uniform();                  // [0, 1) with 53 random bits
  double normal();                   // standard normal, Box-Muller
  int bernoulli(double p);           // 0/1
  int uniform_int(int lo, int hi);   // inclusive bounds

 private:
  std::uint64_t s_[4];
  bool have_spare_ = false;
  double spare_ = 0.0;
};

// ---------------------------------------------------------------------------
// Compensated accumulation
// ---------------------------------------------------------------------------

/// Entrywise Neumaier-compensated matrix sum. Totals are insensitive to
/// accumulation order at the few-ulp level, which the Hessian builder relies
/// on for schedule-independent results.
class KahanMatrixSum {
 public:
  KahanMatrixSum() = default;
  explicit KahanMatrixSum(int rows, int cols);

  void add(const Matrix& x);
  void merge(const KahanMatrixSum& other);
  Matrix value() const;
  bool initialized() const { return sum_.size() > 0; }

 private:
  Matrix sum_;
  Matrix comp_;
};

// ---------------------------------------------------------------------------
// Worker pool
// ---------------------------------------------------------------------------

/// Resolve the worker count: the SBC_WORKERS environment variable overrides
/// the requested value; 0 or negative requests fall back to the hardware
/// concurrency.
int resolve_workers(int requested);

/// Run fn(begin, end, chunk_index) over fixed-size chunks of [0, n).
/// Chunk boundaries depend only on n and chunk_size, never on the worker
/// count, so any reduction done per chunk and merged in chunk order is
/// schedule-independent.
void parallel_chunks(std::size_t n, std::size_t chunk_size, int workers,
                     const std::function<void(std::size_t, std::size_t,
                                              std::size_t)>& fn);

std::size_t chunk_count(std::size_t n, std::size_t chunk_size);

}  // namespace sbc
