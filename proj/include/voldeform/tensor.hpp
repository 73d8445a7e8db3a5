#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <sstream>
#include <string>
#include <vector>

#include "voldeform/errors.hpp"
#include "voldeform/rng.hpp"

namespace voldeform {

inline std::string shape_string(const std::vector<int64_t>& shape) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << ")";
  return os.str();
}

// Dense row-major tensor that owns its storage. The last axis is the
// fastest-moving one. Scalar type is fixed at construction; the library
// instantiates float for training and double for oracles and grad checks.
template <class T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<int64_t> shape) : shape_(std::move(shape)) {
    int64_t n = 1;
    for (int64_t e : shape_) {
      if (e <= 0) {
        throw ShapeError("tensor extent must be positive, got shape " +
                         shape_string(shape_));
      }
      n *= e;
    }
    strides_.resize(shape_.size());
    int64_t s = 1;
    for (size_t i = shape_.size(); i-- > 0;) {
      strides_[i] = s;
      s *= shape_[i];
    }
    data_.assign(static_cast<size_t>(n), T(0));
  }

  static Tensor zeros(std::vector<int64_t> shape) {
    return Tensor(std::move(shape));
  }

  static Tensor full(std::vector<int64_t> shape, T v) {
    Tensor t(std::move(shape));
    for (T& x : t.data_) x = v;
    return t;
  }

  // element i is stddev * normal draw i of the counter stream; identical
  // values for identical (shape, seed, stddev) on every run
  static Tensor randn(std::vector<int64_t> shape, uint64_t seed,
                      double stddev = 1.0) {
    Tensor t(std::move(shape));
    CounterRng rng(seed);
    for (int64_t i = 0; i < t.numel(); ++i) {
      t.data_[static_cast<size_t>(i)] =
          static_cast<T>(stddev * rng.normal(static_cast<uint64_t>(i)));
    }
    return t;
  }

  static Tensor from_data(std::vector<int64_t> shape, std::vector<T> data) {
    Tensor t(std::move(shape));
    if (static_cast<int64_t>(data.size()) != t.numel()) {
      throw ShapeError("from_data: " + std::to_string(data.size()) +
                       " values for shape " + shape_string(t.shape_));
    }
    t.data_ = std::move(data);
    return t;
  }

  bool defined() const { return !shape_.empty(); }
  int64_t rank() const { return static_cast<int64_t>(shape_.size()); }
  int64_t numel() const { return static_cast<int64_t>(data_.size()); }
  const std::vector<int64_t>& shape() const { return shape_; }
  const std::vector<int64_t>& strides() const { return strides_; }

  int64_t extent(int64_t axis) const {
    return shape_.at(static_cast<size_t>(axis));
  }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  T& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  const T& operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

  int64_t offset_of(std::initializer_list<int64_t> idx) const {
    if (static_cast<int64_t>(idx.size()) != rank()) {
      throw ShapeError("index rank " + std::to_string(idx.size()) +
                       " against shape " + shape_string(shape_));
    }
    int64_t off = 0;
    size_t axis = 0;
    for (int64_t i : idx) {
      if (i < 0 || i >= shape_[axis]) {
        throw ShapeError("index out of range on axis " + std::to_string(axis) +
                         " for shape " + shape_string(shape_));
      }
      off += i * strides_[axis];
      ++axis;
    }
    return off;
  }

  T& at(std::initializer_list<int64_t> idx) { return data_[offset_of(idx)]; }
  const T& at(std::initializer_list<int64_t> idx) const {
    return data_[offset_of(idx)];
  }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  bool all_finite() const {
    for (const T& v : data_) {
      if (!std::isfinite(static_cast<double>(v))) return false;
    }
    return true;
  }

 private:
  std::vector<int64_t> shape_;
  std::vector<int64_t> strides_;
  std::vector<T> data_;
};

template <class T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b,
                      const char* what) {
  if (!a.same_shape(b)) {
    throw ShapeError(std::string(what) + ": shape mismatch " +
                     shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
}

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape(a, b, "add");
  Tensor<T> out(a.shape());
  for (int64_t i = 0; i < a.numel(); ++i) out[i] = a[i] + b[i];
  return out;
}

template <class T>
void add_inplace(Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape(a, b, "add_inplace");
  for (int64_t i = 0; i < a.numel(); ++i) a[i] += b[i];
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape(a, b, "sub");
  Tensor<T> out(a.shape());
  for (int64_t i = 0; i < a.numel(); ++i) out[i] = a[i] - b[i];
  return out;
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape(a, b, "mul");
  Tensor<T> out(a.shape());
  for (int64_t i = 0; i < a.numel(); ++i) out[i] = a[i] * b[i];
  return out;
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  Tensor<T> out(a.shape());
  for (int64_t i = 0; i < a.numel(); ++i) out[i] = a[i] * s;
  return out;
}

template <class T>
T sum(const Tensor<T>& a) {
  T acc = 0;
  for (int64_t i = 0; i < a.numel(); ++i) acc += a[i];
  return acc;
}

template <class T>
T mean(const Tensor<T>& a) {
  return sum(a) / static_cast<T>(a.numel());
}

template <class T>
T dot(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape(a, b, "dot");
  T acc = 0;
  for (int64_t i = 0; i < a.numel(); ++i) acc += a[i] * b[i];
  return acc;
}

template <class T>
double max_abs(const Tensor<T>& a) {
  double m = 0;
  for (int64_t i = 0; i < a.numel(); ++i) {
    m = std::max(m, std::abs(static_cast<double>(a[i])));
  }
  return m;
}

template <class T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape(a, b, "max_abs_diff");
  double m = 0;
  for (int64_t i = 0; i < a.numel(); ++i) {
    m = std::max(m, std::abs(static_cast<double>(a[i]) -
                             static_cast<double>(b[i])));
  }
  return m;
}

template <class To, class From>
Tensor<To> cast(const Tensor<From>& a) {
  Tensor<To> out(a.shape());
  for (int64_t i = 0; i < a.numel(); ++i) out[i] = static_cast<To>(a[i]);
  return out;
}

}  // namespace voldeform
