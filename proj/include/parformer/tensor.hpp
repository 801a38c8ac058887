#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

namespace parformer {

// Every failure in the library carries a short machine-readable code
// ("shape", "config", "numeric", "state", "io", "format", ...).
class Error : public std::runtime_error {
 public:
  Error(std::string code, const std::string& message)
      : std::runtime_error(message), code_(std::move(code)) {}

  const std::string& code() const noexcept { return code_; }

 private:
  std::string code_;
};

using Shape = std::vector<std::int64_t>;

inline std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) {
    if (e < 0) throw Error("shape", "negative extent in shape");
    n *= static_cast<std::size_t>(e);
  }
  return n;
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

template <typename T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>,
                "tensors hold f32 or f64");
  return std::is_same_v<T, float> ? DType::f32 : DType::f64;
}

inline std::size_t dtype_size(DType d) { return d == DType::f32 ? 4 : 8; }

inline const char* dtype_name(DType d) { return d == DType::f32 ? "f32" : "f64"; }

using Rng = std::mt19937_64;

/// Dense row-major array. Images are laid out batch x channel x height x width.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0))
      : shape_(std::move(shape)), data_(numel(shape_), fill) {}

  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (numel(shape_) != data_.size()) {
      throw Error("shape", "data length " + std::to_string(data_.size()) +
                               " does not match shape " + to_string(shape_));
    }
  }

  static Tensor scalar(T v) { return Tensor(Shape{}, std::vector<T>{v}); }

  static Tensor randn(Shape shape, Rng& rng, T stddev = T(1)) {
    Tensor t(std::move(shape));
    std::normal_distribution<double> dist(0.0, static_cast<double>(stddev));
    for (auto& v : t.data_) v = static_cast<T>(dist(rng));
    return t;
  }

  static Tensor uniform(Shape shape, Rng& rng, T lo, T hi) {
    Tensor t(std::move(shape));
    std::uniform_real_distribution<double> dist(lo, hi);
    for (auto& v : t.data_) v = static_cast<T>(dist(rng));
    return t;
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::int64_t dim(std::size_t i) const {
    if (i >= shape_.size()) throw Error("shape", "dimension index out of range");
    return shape_[i];
  }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty() && shape_.empty(); }

  T* ptr() noexcept { return data_.data(); }
  const T* ptr() const noexcept { return data_.data(); }
  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  std::vector<T>& vec() noexcept { return data_; }
  const std::vector<T>& vec() const noexcept { return data_; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  T& at(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) {
    return data_[offset4(n, c, h, w)];
  }
  const T& at(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) const {
    return data_[offset4(n, c, h, w)];
  }

  T item() const {
    if (data_.size() != 1) throw Error("shape", "item() on a non-scalar tensor");
    return data_[0];
  }

  Tensor reshaped(Shape shape) const {
    if (numel(shape) != data_.size()) {
      throw Error("shape", "cannot reshape " + to_string(shape_) + " to " + to_string(shape));
    }
    return Tensor(std::move(shape), data_);
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  Tensor& operator+=(const Tensor& other) {
    require_same_shape(other, "+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
    return *this;
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  void require_same_shape(const Tensor& other, const char* what) const {
    if (shape_ != other.shape_) {
      throw Error("shape", std::string(what) + ": shape " + to_string(shape_) + " vs " +
                               to_string(other.shape_));
    }
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  std::size_t offset4(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) const {
    return static_cast<std::size_t>(((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w);
  }

  Shape shape_;
  std::vector<T> data_;
};

template <typename T>
void require_finite(const Tensor<T>& t, const char* op) {
  if (!t.all_finite()) throw Error("numeric", std::string(op) + " produced a non-finite value");
}

template <typename T>
void require_rank(const Tensor<T>& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw Error("shape", std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                             to_string(t.shape()));
  }
}

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  a.require_same_shape(b, "max_abs_diff");
  T m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace parformer
