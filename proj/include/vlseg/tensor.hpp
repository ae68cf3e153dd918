#pragma once

// Dense row-major tensor. Most of the library works with 2-D tensors
// (rows = tokens/cells/proposals, cols = channels); feature grids carry
// their (h, w) alongside as plain ints.

#include <Eigen/Core>

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace vlseg {

template <typename T>
struct Tensor {
  std::vector<int> shape;
  std::vector<T> data;

  using EigenMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using Map = Eigen::Map<EigenMat>;
  using ConstMap = Eigen::Map<const EigenMat>;

  Tensor() = default;
  explicit Tensor(std::vector<int> s) : shape(std::move(s)), data(count(shape), T(0)) {}
  Tensor(std::vector<int> s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
    if (static_cast<std::int64_t>(data.size()) != count(shape))
      throw std::invalid_argument("tensor: data size does not match shape");
  }

  static std::int64_t count(const std::vector<int>& s) {
    std::int64_t n = 1;
    for (int d : s) {
      if (d < 0) throw std::invalid_argument("tensor: negative dimension");
      n *= d;
    }
    return n;
  }

  static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }
  static Tensor full(std::vector<int> s, T v) {
    Tensor t(std::move(s));
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
  }
  static Tensor scalar(T v) { return Tensor({1, 1}, {v}); }
  static Tensor identity(int n) {
    Tensor t({n, n});
    for (int i = 0; i < n; ++i) t.at(i, i) = T(1);
    return t;
  }

  std::int64_t size() const { return static_cast<std::int64_t>(data.size()); }
  int ndim() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape.at(static_cast<size_t>(i)); }

  int rows() const {
    assert(ndim() == 2);
    return shape[0];
  }
  int cols() const {
    assert(ndim() == 2);
    return shape[1];
  }

  T& at(int i) { return data[static_cast<size_t>(i)]; }
  T at(int i) const { return data[static_cast<size_t>(i)]; }
  T& at(int i, int j) { return data[static_cast<size_t>(i) * cols() + j]; }
  T at(int i, int j) const { return data[static_cast<size_t>(i) * cols() + j]; }

  Map mat() { return Map(data.data(), rows(), cols()); }
  ConstMap mat() const { return ConstMap(data.data(), rows(), cols()); }

  Tensor reshaped(std::vector<int> s) const {
    if (count(s) != size()) throw std::invalid_argument("tensor: reshape size mismatch");
    return Tensor(std::move(s), data);
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  bool all_finite() const {
    for (T v : data)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  std::string shape_str() const {
    std::ostringstream os;
    os << "(";
    for (int i = 0; i < ndim(); ++i) os << (i ? "x" : "") << shape[i];
    os << ")";
    return os.str();
  }
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

template <typename T>
bool bitwise_equal(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape != b.shape) return false;
  for (std::int64_t i = 0; i < a.size(); ++i)
    if (a.data[static_cast<size_t>(i)] != b.data[static_cast<size_t>(i)]) return false;
  return true;
}

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape != b.shape) throw std::invalid_argument("max_abs_diff: shape mismatch");
  double m = 0;
  for (std::int64_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a.data[static_cast<size_t>(i)]) -
                             static_cast<double>(b.data[static_cast<size_t>(i)])));
  return m;
}

}  // namespace vlseg
