#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace dclr {

/// Raised when a contract check on shapes or arguments fails.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when checked mode finds a NaN or Inf in an operation result.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

namespace numerics {

/// Process-wide numeric settings. `checked` turns on the finiteness check
/// after every public tensor operation.
struct Settings {
  bool checked = false;
};

inline Settings& settings() {
  static Settings s;
  return s;
}

/// RAII toggle for checked mode.
class CheckedScope {
 public:
  explicit CheckedScope(bool on = true) : prev_(settings().checked) { settings().checked = on; }
  ~CheckedScope() { settings().checked = prev_; }
  CheckedScope(const CheckedScope&) = delete;
  CheckedScope& operator=(const CheckedScope&) = delete;

 private:
  bool prev_;
};

}  // namespace numerics

/// Dense row-major n-dimensional array.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;

  explicit BasicTensor(Shape shape, T fill = T(0)) : shape_(std::move(shape)) {
    for (auto e : shape_)
      if (e == 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape_));
    data_.assign(shape_numel(shape_), fill);
  }

  BasicTensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_numel(shape_) != data_.size())
      throw ShapeError("shape " + shape_str(shape_) + " does not match " +
                       std::to_string(data_.size()) + " values");
  }

  static BasicTensor zeros(Shape shape) { return BasicTensor(std::move(shape), T(0)); }
  static BasicTensor full(Shape shape, T v) { return BasicTensor(std::move(shape), v); }
  static BasicTensor scalar(T v) { return BasicTensor(Shape{1}, v); }

  template <typename U>
  static BasicTensor cast(const BasicTensor<U>& other) {
    std::vector<T> d(other.data().begin(), other.data().end());
    return BasicTensor(other.shape(), std::move(d));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t numel() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  std::vector<T>& storage() noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  /// Row-major element access; one index per dimension.
  template <typename... I>
  T& at(I... idx) noexcept {
    return data_[offset(idx...)];
  }
  template <typename... I>
  const T& at(I... idx) const noexcept {
    return data_[offset(idx...)];
  }

  BasicTensor reshaped(Shape shape) const {
    if (shape_numel(shape) != numel())
      throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    return BasicTensor(std::move(shape), data_);
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  T sum() const noexcept {
    T s = 0;
    for (T v : data_) s += v;
    return s;
  }

  T max_abs_diff(const BasicTensor& o) const {
    if (o.shape_ != shape_) throw ShapeError("max_abs_diff: " + shape_str(shape_) + " vs " + shape_str(o.shape_));
    T m = 0;
    for (std::size_t i = 0; i < data_.size(); ++i) m = std::max(m, std::abs(data_[i] - o.data_[i]));
    return m;
  }

  BasicTensor& operator+=(const BasicTensor& o) {
    if (o.shape_ != shape_) throw ShapeError("+=: " + shape_str(shape_) + " vs " + shape_str(o.shape_));
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }

  BasicTensor& operator*=(T s) {
    for (auto& v : data_) v *= s;
    return *this;
  }

  friend bool operator==(const BasicTensor&, const BasicTensor&) = default;

 private:
  template <typename... I>
  std::size_t offset(I... idx) const noexcept {
    std::size_t off = 0, d = 0;
    ((off = off * shape_[d++] + static_cast<std::size_t>(idx)), ...);
    return off;
  }

  Shape shape_;
  std::vector<T> data_;
};

using Tensor = BasicTensor<float>;

namespace numerics {

/// Throws NumericError naming `op` when checked mode is on and `t` holds NaN/Inf.
template <typename T>
void check_finite(const BasicTensor<T>& t, const char* op) {
  if (settings().checked && !t.all_finite())
    throw NumericError(std::string(op) + ": non-finite value in result of shape " + shape_str(t.shape()));
}

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ShapeError(msg);
}

}  // namespace numerics
}  // namespace dclr
