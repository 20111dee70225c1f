#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "firescan/error.hpp"

namespace firescan {

using Shape = std::vector<std::size_t>;

// Eigen's vectorized reductions peel a scalar prologue that depends on the
// buffer address, so float results would vary with where malloc placed the
// data. Aligned storage makes every kernel's summation order a function of
// shapes alone.
template <typename T>
using AlignedVector = std::vector<T, Eigen::aligned_allocator<T>>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

// Dense row-major n-d array with an optional gradient slot of the same shape.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;
  explicit BasicTensor(Shape shape, T fill = T{0})
      : shape_(std::move(shape)), values_(shape_size(shape_), fill) {}
  BasicTensor(Shape shape, const std::vector<T>& values)
      : shape_(std::move(shape)), values_(values.begin(), values.end()) {
    require(values_.size() == shape_size(shape_), ErrorCode::shape_mismatch,
            "tensor values do not match shape " + shape_string(shape_));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const noexcept { return values_.size(); }
  bool empty() const noexcept { return values_.empty(); }

  T* data() noexcept { return values_.data(); }
  const T* data() const noexcept { return values_.data(); }
  std::span<T> values() noexcept { return values_; }
  std::span<const T> values() const noexcept { return values_; }
  AlignedVector<T>& storage() noexcept { return values_; }
  const AlignedVector<T>& storage() const noexcept { return values_; }
  std::vector<T> to_vector() const { return {values_.begin(), values_.end()}; }

  T& operator[](std::size_t i) noexcept { return values_[i]; }
  const T& operator[](std::size_t i) const noexcept { return values_[i]; }

  // NCHW accessors.
  T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
    return values_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }
  const T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return values_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }

  bool has_grad() const noexcept { return !grad_.empty(); }
  std::span<T> grad() noexcept { return grad_; }
  std::span<const T> grad() const noexcept { return grad_; }
  void ensure_grad() {
    if (grad_.size() != values_.size()) grad_.assign(values_.size(), T{0});
  }
  void zero_grad() { std::fill(grad_.begin(), grad_.end(), T{0}); }
  void drop_grad() { grad_.clear(); grad_.shrink_to_fit(); }

  void fill(T v) { std::fill(values_.begin(), values_.end(), v); }

  // Same data, new shape with equal element count.
  BasicTensor reshaped(Shape shape) const {
    require(shape_size(shape) == size(), ErrorCode::shape_mismatch,
            "cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
    BasicTensor out;
    out.shape_ = std::move(shape);
    out.values_ = values_;
    return out;
  }

  bool all_finite() const {
    return std::all_of(values_.begin(), values_.end(), [](T v) { return std::isfinite(v); });
  }

  friend bool operator==(const BasicTensor& a, const BasicTensor& b) {
    return a.shape_ == b.shape_ && a.values_ == b.values_;
  }

 private:
  Shape shape_;
  AlignedVector<T> values_;
  AlignedVector<T> grad_;
};

using Tensor = BasicTensor<float>;

inline void require_rank(const Tensor& t, std::size_t rank, const char* what) {
  require(t.rank() == rank, ErrorCode::shape_mismatch,
          std::string(what) + ": expected rank " + std::to_string(rank) + ", got " + shape_string(t.shape()));
}

#ifndef NDEBUG
inline void debug_check_finite(const Tensor& t, const char* what) {
  require(t.all_finite(), ErrorCode::non_finite, std::string(what) + " produced a non-finite value");
}
#else
inline void debug_check_finite(const Tensor&, const char*) {}
#endif

}  // namespace firescan
