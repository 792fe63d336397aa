#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace upcycle {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

// Dense row-major tensor. Storage is contiguous; rank-2 accessors are the
// common case since every weight and activation in the model is a matrix.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<T> data);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor full(Shape shape, T value);
  static Tensor from_rows(std::initializer_list<std::initializer_list<T>> rows);
  static Tensor vector(std::initializer_list<T> values);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::size_t rows() const;
  std::size_t cols() const;

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  std::vector<T>& storage() noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  T operator[](std::size_t i) const noexcept { return data_[i]; }
  T& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * shape_[1] + c]; }
  T operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * shape_[1] + c]; }

  std::span<T> row(std::size_t r) { return std::span<T>(data_).subspan(r * cols(), cols()); }
  std::span<const T> row(std::size_t r) const {
    return std::span<const T>(data_).subspan(r * cols(), cols());
  }

  Tensor reshaped(Shape shape) const;

  template <class U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<T> data_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

// ---- kernels -------------------------------------------------------------
// All kernels are pure: they never mutate their arguments and loop in a
// fixed order, so results are bit-stable for a given build.

// c = a * b. Accumulates in T.
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
// c = a * b^T
template <class T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b);
// c = a^T * b
template <class T>
Tensor<T> matmul_tn(const Tensor<T>& a, const Tensor<T>& b);

template <class T>
Tensor<T> transpose(const Tensor<T>& a);

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <class T>
Tensor<T> scale(const Tensor<T>& a, T s);

template <class T>
T silu(T x);
template <class T>
T silu_grad(T x);
template <class T>
Tensor<T> silu(const Tensor<T>& x);

// Row softmax with per-row max subtraction.
template <class T>
Tensor<T> softmax_rows(const Tensor<T>& x);

// y[i,:] = gamma * x[i,:] / sqrt(mean(x[i,:]^2) + eps)
template <class T>
Tensor<T> rms_norm(const Tensor<T>& x, const Tensor<T>& gamma, double eps);

// Computed in double regardless of T.
template <class T>
double frobenius_norm(const Tensor<T>& a);
template <class T>
double dot(const Tensor<T>& a, const Tensor<T>& b);

template <class T>
Tensor<T> column_center(const Tensor<T>& x);

// Indices of the k largest entries of each row, largest first; equal values
// are ordered by lower column index.
template <class T>
std::vector<std::vector<std::size_t>> top_k_rows(const Tensor<T>& x, std::size_t k);

template <class T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::size_t> index);
template <class T>
Tensor<T> gather_cols(const Tensor<T>& x, std::span<const std::size_t> index);

template <class T>
bool all_finite(const Tensor<T>& x);

// Largest absolute elementwise difference; shapes must agree.
template <class T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b);

void require_same_shape(const Shape& a, const Shape& b, const char* what);
void require_rank(const Shape& s, std::size_t rank, const char* what);

}  // namespace upcycle
