#include "sbc/hessian.hpp"

#include "sbc/linalg.hpp"

#include <json.hpp>

#include <fstream>
#include <vector>

namespace sbc {

HessianState::HessianState(int dim, HessianMode mode,
                           const KernelMatrix* kernel)
    : dim_(dim), mode_(mode), kernel_(kernel), accum_(dim, dim) {
  if (dim < 1) throw InvalidArgument("HessianState: dim must be >= 1");
  if (mode == HessianMode::SMP && kernel == nullptr)
    throw InvalidArgument("HessianState: SMP mode requires a kernel");
}

void HessianState::accumulate(const Matrix& x) {
  if (x.cols() != dim_)
    throw ShapeMismatch("hessian accumulate: input has " +
                        std::to_string(x.cols()) + " columns, state dim is " +
                        std::to_string(dim_));
  if (mode_ == HessianMode::SMP) {
    if (x.rows() != kernel_->timesteps())
      throw ShapeMismatch("hessian accumulate: input has " +
                          std::to_string(x.rows()) + " timesteps, kernel has " +
                          std::to_string(kernel_->timesteps()));
    if (kernel_->identity()) {
      accum_.add(2.0 * (x.transpose() * x));
    } else {
      Matrix mx = kernel_->matrix() * x;
      accum_.add(2.0 * (mx.transpose() * mx));
    }
  } else {
    accum_.add(2.0 * (x.transpose() * x));
  }
  ++count_;
}

void HessianState::merge(const HessianState& other) {
  if (other.dim_ != dim_ || other.mode_ != mode_)
    throw InvalidArgument("hessian merge: incompatible states");
  accum_.merge(other.accum_);
  count_ += other.count_;
}

Matrix HessianState::average() const {
  if (count_ < 1) throw InvalidArgument("hessian finalize: no samples");
  return accum_.value() / static_cast<double>(count_);
}

std::pair<Matrix, Matrix> HessianState::finalize(double damp) const {
  Matrix h = average();
  Matrix hinv = linalg::spd_inverse(h, damp);
  return {std::move(h), std::move(hinv)};
}

HessianState accumulate_captures(const std::vector<Matrix>& captures, int dim,
                                 HessianMode mode, const KernelMatrix* kernel,
                                 int workers) {
  constexpr std::size_t kChunk = 16;
  std::size_t chunks = captures.empty() ? 0 : chunk_count(captures.size(), kChunk);
  std::vector<HessianState> parts;
  parts.reserve(chunks);
  for (std::size_t c = 0; c < chunks; ++c)
    parts.emplace_back(dim, mode, kernel);
  parallel_chunks(captures.size(), kChunk, workers,
                  [&](std::size_t b, std::size_t e, std::size_t ci) {
                    for (std::size_t i = b; i < e; ++i)
                      parts[ci].accumulate(captures[i]);
                  });
  HessianState total(dim, mode, kernel);
  for (const auto& p : parts) total.merge(p);
  return total;
}

void dump_hessian(const std::string& path_base, const HessianState& state) {
  Matrix h = state.average();
  std::ofstream bin(path_base + ".bin", std::ios::binary);
  if (!bin) throw InvalidArgument("dump_hessian: cannot open " + path_base + ".bin");
  for (Eigen::Index i = 0; i < h.rows(); ++i)
    for (Eigen::Index j = 0; j < h.cols(); ++j) {
      double v = h(i, j);
      bin.write(reinterpret_cast<const char*>(&v), sizeof(v));
    }
  bin.close();
  nlohmann::json side;
  side["dim"] = state.dim();
  side["mode"] = state.mode() == HessianMode::SMP ? "smp" : "obc";
  side["samples"] = state.sample_count();
  side["dtype"] = "float64-le-rowmajor";
  std::ofstream js(path_base + ".json");
  js << side.dump(2) << "\n";
}

}  // namespace sbc
