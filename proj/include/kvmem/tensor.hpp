#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "kvmem/error.hpp"

namespace kvmem {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

inline std::size_t shape_product(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

/// Dense row-major array with an optional gradient slot.
///
/// Rank-1 tensors of length n behave as a [1 x n] matrix wherever a matrix
/// is expected. A default-constructed tensor is empty and only serves as a
/// placeholder; every other tensor has strictly positive dimensions.
template <class T = float>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0))
      : shape_(std::move(shape)) {
    check_shape(shape_);
    data_.assign(shape_product(shape_), fill);
  }

  Tensor(Shape shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape(shape_);
    if (shape_product(shape_) != data_.size()) {
      throw ShapeError("tensor shape " + shape_str(shape_) + " holds " +
                       std::to_string(shape_product(shape_)) +
                       " values, got " + std::to_string(data_.size()));
    }
  }

  static Tensor matrix(std::initializer_list<std::initializer_list<T>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<T> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw ShapeError("ragged matrix literal");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor({r, c}, std::move(data));
  }

  static Tensor vector(std::initializer_list<T> values) {
    return Tensor({values.size()}, std::vector<T>(values));
  }

  static Tensor scalar(T v) { return Tensor({1}, std::vector<T>{v}); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t size() const noexcept { return data_.size(); }
  std::size_t rank() const noexcept { return shape_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::size_t rows() const {
    if (rank() == 1) return 1;
    require_matrix();
    return shape_[0];
  }
  std::size_t cols() const {
    if (rank() == 1) return shape_[0];
    require_matrix();
    return shape_[1];
  }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }
  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  const T& operator()(std::size_t r, std::size_t c) const {
    return data_[r * cols() + c];
  }
  T item() const {
    if (size() != 1) {
      throw ShapeError("item() on non-scalar tensor " + shape_str(shape_));
    }
    return data_[0];
  }

  bool requires_grad() const noexcept { return requires_grad_; }
  void set_requires_grad(bool on) noexcept { requires_grad_ = on; }

  bool has_grad() const noexcept { return !grad_.empty(); }
  std::span<T> grad() noexcept { return grad_; }
  std::span<const T> grad() const noexcept { return grad_; }
  /// Allocates the gradient slot (if absent) and fills it with zeros.
  void zero_grad() { grad_.assign(data_.size(), T(0)); }
  void clear_grad() noexcept {
    grad_.clear();
    grad_.shrink_to_fit();
  }

  bool all_finite() const { return finite_span(std::span<const T>(data_)); }

  /// v * 0 is 0 for finite v and NaN otherwise, so the lane sums stay zero
  /// exactly when every entry is finite.
  static bool finite_span(std::span<const T> v) {
    T lane[8] = {};
    std::size_t i = 0;
    for (; i + 8 <= v.size(); i += 8)
      for (std::size_t l = 0; l < 8; ++l) lane[l] += v[i + l] * T(0);
    T acc = T(0);
    for (T x : lane) acc += x;
    for (; i < v.size(); ++i) acc += v[i] * T(0);
    return acc == T(0);
  }

  /// Value-only copy in another precision (no grad, same requires_grad).
  template <class U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    std::transform(data_.begin(), data_.end(), out.data().begin(),
                   [](T v) { return static_cast<U>(v); });
    out.set_requires_grad(requires_grad_);
    return out;
  }

  /// Copy of shape and values only.
  Tensor detached() const { return Tensor(shape_, data_); }

  bool same_values(const Tensor& other) const {
    return shape_ == other.shape_ && data_ == other.data_;
  }

 private:
  static void check_shape(const Shape& shape) {
    if (shape.empty()) throw ShapeError("tensor shape must have rank >= 1");
    for (auto d : shape) {
      if (d == 0) throw ShapeError("zero dimension in shape " + shape_str(shape));
    }
  }
  void require_matrix() const {
    if (rank() != 2) {
      throw ShapeError("expected a matrix, got shape " + shape_str(shape_));
    }
  }

  Shape shape_;
  std::vector<T> data_;
  bool requires_grad_ = false;
  std::vector<T> grad_;
};

/// Untracked dense kernels shared by the tape ops and the oracles.
namespace linalg {

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw ShapeError("matmul: inner dimensions differ for " +
                     shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  Tensor<T> c({m, n});
  auto cd = c.data();
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const T av = ad[i * k + p];
      if (av == T(0)) continue;
      const T* brow = &bd[p * n];
      T* crow = &cd[i * n];
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  return c;
}

/// a [m x k] times b^T where b is [n x k].
template <class T>
Tensor<T> matmul_bt(const Tensor<T>& a, const Tensor<T>& b) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  if (b.cols() != k) {
    throw ShapeError("matmul_bt: inner dimensions differ for " +
                     shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                     "^T");
  }
  Tensor<T> c({m, n});
  auto cd = c.data();
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = &ad[i * k];
    for (std::size_t j = 0; j < n; ++j) {
      const T* brow = &bd[j * k];
      // Eight interleaved partial sums so the reduction vectorises.
      T lane[8] = {};
      std::size_t p = 0;
      for (; p + 8 <= k; p += 8)
        for (std::size_t l = 0; l < 8; ++l) lane[l] += arow[p + l] * brow[p + l];
      T acc = ((lane[0] + lane[1]) + (lane[2] + lane[3])) +
              ((lane[4] + lane[5]) + (lane[6] + lane[7]));
      for (; p < k; ++p) acc += arow[p] * brow[p];
      cd[i * n + j] = acc;
    }
  }
  return c;
}

/// a^T times b where a is [k x m] and b is [k x n].
template <class T>
Tensor<T> matmul_at(const Tensor<T>& a, const Tensor<T>& b) {
  const std::size_t k = a.rows(), m = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw ShapeError("matmul_at: inner dimensions differ for " +
                     shape_str(a.shape()) + "^T and " + shape_str(b.shape()));
  }
  Tensor<T> c({m, n});
  auto cd = c.data();
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t p = 0; p < k; ++p) {
    for (std::size_t i = 0; i < m; ++i) {
      const T av = ad[p * m + i];
      if (av == T(0)) continue;
      const T* brow = &bd[p * n];
      T* crow = &cd[i * n];
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  return c;
}

template <class T>
Tensor<T> transpose(const Tensor<T>& a) {
  const std::size_t m = a.rows(), n = a.cols();
  Tensor<T> t({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) t(j, i) = a(i, j);
  return t;
}

template <class T>
T sigmoid(T x) {
  if (x >= T(0)) {
    const T z = std::exp(-x);
    return T(1) / (T(1) + z);
  }
  const T z = std::exp(x);
  return z / (T(1) + z);
}

template <class T>
T swish(T x) {
  return x * sigmoid(x);
}

/// Row-wise softmax with max subtraction.
template <class T>
std::vector<T> softmax(std::span<const T> logits) {
  std::vector<T> p(logits.begin(), logits.end());
  const T mx = *std::max_element(p.begin(), p.end());
  T z = T(0);
  for (auto& v : p) {
    v = std::exp(v - mx);
    z += v;
  }
  for (auto& v : p) v /= z;
  return p;
}

template <class T>
std::span<const T> row(const Tensor<T>& t, std::size_t r) {
  return t.data().subspan(r * t.cols(), t.cols());
}

}  // namespace linalg
}  // namespace kvmem
