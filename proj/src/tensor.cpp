#include "upcycle/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace upcycle {

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

void require_same_shape(const Shape& a, const Shape& b, const char* what) {
  if (a != b) {
    throw ShapeError(std::string(what) + ": shape mismatch " + shape_str(a) + " vs " +
                     shape_str(b));
  }
}

void require_rank(const Shape& s, std::size_t rank, const char* what) {
  if (s.size() != rank) {
    throw ShapeError(std::string(what) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_str(s));
  }
}

template <class T>
Tensor<T>::Tensor(Shape shape) : shape_(std::move(shape)), data_(shape_numel(shape_), T{0}) {}

template <class T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_numel(shape_) != data_.size()) {
    throw ShapeError("tensor: shape " + shape_str(shape_) + " does not match " +
                     std::to_string(data_.size()) + " elements");
  }
}

template <class T>
Tensor<T> Tensor<T>::full(Shape shape, T value) {
  Tensor t(std::move(shape));
  std::fill(t.data_.begin(), t.data_.end(), value);
  return t;
}

template <class T>
Tensor<T> Tensor<T>::from_rows(std::initializer_list<std::initializer_list<T>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<T> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw ShapeError("from_rows: ragged rows");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor({r, c}, std::move(data));
}

template <class T>
Tensor<T> Tensor<T>::vector(std::initializer_list<T> values) {
  return Tensor({values.size()}, std::vector<T>(values));
}

template <class T>
std::size_t Tensor<T>::rows() const {
  require_rank(shape_, 2, "rows");
  return shape_[0];
}

template <class T>
std::size_t Tensor<T>::cols() const {
  require_rank(shape_, 2, "cols");
  return shape_[1];
}

template <class T>
Tensor<T> Tensor<T>::reshaped(Shape shape) const {
  return Tensor(std::move(shape), data_);
}

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank(a.shape(), 2, "matmul lhs");
  require_rank(b.shape(), 2, "matmul rhs");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw ShapeError("matmul: inner dimensions differ " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  Tensor<T> c({m, n});
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  T* pc = c.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = pc + i * n;
    for (std::size_t t = 0; t < k; ++t) {
      const T av = pa[i * k + t];
      const T* brow = pb + t * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  return c;
}

template <class T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank(a.shape(), 2, "matmul_nt lhs");
  require_rank(b.shape(), 2, "matmul_nt rhs");
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  if (b.cols() != k) {
    throw ShapeError("matmul_nt: inner dimensions differ " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()) + "^T");
  }
  Tensor<T> c({m, n});
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = pa + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const T* brow = pb + j * k;
      T acc{0};
      for (std::size_t t = 0; t < k; ++t) acc += arow[t] * brow[t];
      c(i, j) = acc;
    }
  }
  return c;
}

template <class T>
Tensor<T> matmul_tn(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank(a.shape(), 2, "matmul_tn lhs");
  require_rank(b.shape(), 2, "matmul_tn rhs");
  const std::size_t k = a.rows(), m = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw ShapeError("matmul_tn: inner dimensions differ " + shape_str(a.shape()) + "^T x " +
                     shape_str(b.shape()));
  }
  Tensor<T> c({m, n});
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  T* pc = c.data().data();
  for (std::size_t t = 0; t < k; ++t) {
    const T* arow = pa + t * m;
    const T* brow = pb + t * n;
    for (std::size_t i = 0; i < m; ++i) {
      const T av = arow[i];
      T* crow = pc + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  return c;
}

template <class T>
Tensor<T> transpose(const Tensor<T>& a) {
  require_rank(a.shape(), 2, "transpose");
  const std::size_t m = a.rows(), n = a.cols();
  Tensor<T> out({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out(j, i) = a(i, j);
  return out;
}

namespace {

template <class T, class F>
Tensor<T> zip(const Tensor<T>& a, const Tensor<T>& b, const char* what, F f) {
  require_same_shape(a.shape(), b.shape(), what);
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i], b[i]);
  return out;
}

}  // namespace

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return zip(a, b, "add", [](T x, T y) { return x + y; });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return zip(a, b, "sub", [](T x, T y) { return x - y; });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return zip(a, b, "mul", [](T x, T y) { return x * y; });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * s;
  return out;
}

template <class T>
T silu(T x) {
  return x / (T{1} + std::exp(-x));
}

template <class T>
T silu_grad(T x) {
  const T s = T{1} / (T{1} + std::exp(-x));
  return s * (T{1} + x * (T{1} - s));
}

template <class T>
Tensor<T> silu(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = silu(x[i]);
  return out;
}

template <class T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
  require_rank(x.shape(), 2, "softmax_rows");
  Tensor<T> out(x.shape());
  const std::size_t n = x.cols();
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto in = x.row(i);
    auto o = out.row(i);
    const T mx = *std::max_element(in.begin(), in.end());
    T sum{0};
    for (std::size_t j = 0; j < n; ++j) {
      o[j] = std::exp(in[j] - mx);
      sum += o[j];
    }
    const T inv = T{1} / sum;
    for (std::size_t j = 0; j < n; ++j) o[j] *= inv;
  }
  return out;
}

template <class T>
Tensor<T> rms_norm(const Tensor<T>& x, const Tensor<T>& gamma, double eps) {
  require_rank(x.shape(), 2, "rms_norm");
  const std::size_t d = x.cols();
  if (gamma.size() != d) {
    throw ShapeError("rms_norm: gamma " + shape_str(gamma.shape()) + " vs row width " +
                     std::to_string(d));
  }
  if (!(eps > 0)) throw std::invalid_argument("rms_norm: eps must be positive");
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto in = x.row(i);
    auto o = out.row(i);
    T ss{0};
    for (std::size_t j = 0; j < d; ++j) ss += in[j] * in[j];
    const T inv = T{1} / std::sqrt(ss / static_cast<T>(d) + static_cast<T>(eps));
    for (std::size_t j = 0; j < d; ++j) o[j] = gamma[j] * (in[j] * inv);
  }
  return out;
}

template <class T>
double frobenius_norm(const Tensor<T>& a) {
  double ss = 0.0;
  for (T v : a.data()) ss += static_cast<double>(v) * static_cast<double>(v);
  return std::sqrt(ss);
}

template <class T>
double dot(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.size() != b.size()) {
    throw ShapeError("dot: size mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    acc += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return acc;
}

template <class T>
Tensor<T> column_center(const Tensor<T>& x) {
  require_rank(x.shape(), 2, "column_center");
  const std::size_t m = x.rows(), n = x.cols();
  std::vector<double> mean(n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) mean[j] += x(i, j);
  for (double& v : mean) v /= static_cast<double>(m ? m : 1);
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out(i, j) = static_cast<T>(x(i, j) - mean[j]);
  return out;
}

template <class T>
std::vector<std::vector<std::size_t>> top_k_rows(const Tensor<T>& x, std::size_t k) {
  require_rank(x.shape(), 2, "top_k_rows");
  if (k == 0 || k > x.cols()) {
    throw std::invalid_argument("top_k_rows: k=" + std::to_string(k) + " outside [1, " +
                                std::to_string(x.cols()) + "]");
  }
  std::vector<std::vector<std::size_t>> out(x.rows());
  std::vector<std::size_t> order(x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    auto r = x.row(i);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t p, std::size_t q) { return r[p] > r[q]; });
    out[i].assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
  }
  return out;
}

template <class T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::size_t> index) {
  require_rank(x.shape(), 2, "gather_rows");
  Tensor<T> out({index.size(), x.cols()});
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= x.rows()) throw ShapeError("gather_rows: index out of range");
    auto src = x.row(index[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

template <class T>
Tensor<T> gather_cols(const Tensor<T>& x, std::span<const std::size_t> index) {
  require_rank(x.shape(), 2, "gather_cols");
  for (std::size_t j : index)
    if (j >= x.cols()) throw ShapeError("gather_cols: index out of range");
  Tensor<T> out({x.rows(), index.size()});
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < index.size(); ++j) out(i, j) = x(i, index[j]);
  return out;
}

template <class T>
bool all_finite(const Tensor<T>& x) {
  return std::all_of(x.data().begin(), x.data().end(), [](T v) { return std::isfinite(v); });
}

template <class T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a.shape(), b.shape(), "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  return m;
}

#define UPCYCLE_INSTANTIATE(T)                                                              \
  template class Tensor<T>;                                                                 \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                            \
  template Tensor<T> matmul_nt(const Tensor<T>&, const Tensor<T>&);                         \
  template Tensor<T> matmul_tn(const Tensor<T>&, const Tensor<T>&);                         \
  template Tensor<T> transpose(const Tensor<T>&);                                           \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> scale(const Tensor<T>&, T);                                            \
  template T silu(T);                                                                       \
  template T silu_grad(T);                                                                  \
  template Tensor<T> silu(const Tensor<T>&);                                                \
  template Tensor<T> softmax_rows(const Tensor<T>&);                                        \
  template Tensor<T> rms_norm(const Tensor<T>&, const Tensor<T>&, double);                  \
  template double frobenius_norm(const Tensor<T>&);                                         \
  template double dot(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> column_center(const Tensor<T>&);                                       \
  template std::vector<std::vector<std::size_t>> top_k_rows(const Tensor<T>&, std::size_t); \
  template Tensor<T> gather_rows(const Tensor<T>&, std::span<const std::size_t>);           \
  template Tensor<T> gather_cols(const Tensor<T>&, std::span<const std::size_t>);           \
  template bool all_finite(const Tensor<T>&);                                               \
  template double max_abs_diff(const Tensor<T>&, const Tensor<T>&);

UPCYCLE_INSTANTIATE(float)
UPCYCLE_INSTANTIATE(double)

#undef UPCYCLE_INSTANTIATE

}  // namespace upcycle
