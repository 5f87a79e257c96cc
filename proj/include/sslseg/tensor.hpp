#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace sslseg {

/// Dense row-major tensor over a flat Eigen array. Rank is dynamic (<= 4 in
/// practice: NCHW activations, {N,F} matrices, {N} vectors, {1} scalars).
template <typename T>
struct Tensor {
  std::vector<int> shape;
  Eigen::Array<T, Eigen::Dynamic, 1> v;

  Tensor() = default;
  explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
    v = Eigen::Array<T, Eigen::Dynamic, 1>::Zero(numel(shape));
  }

  static std::int64_t numel(const std::vector<int>& s) {
    std::int64_t n = 1;
    for (const int d : s) {
      if (d <= 0) throw std::invalid_argument("tensor: non-positive dim");
      n *= d;
    }
    return n;
  }

  static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }

  static Tensor full(std::vector<int> s, T value) {
    Tensor t(std::move(s));
    t.v.setConstant(value);
    return t;
  }

  static Tensor scalar(T value) { return full({1}, value); }

  std::int64_t size() const { return v.size(); }
  int dim(int i) const { return shape.at(i); }
  int rank() const { return static_cast<int>(shape.size()); }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  T& at(std::int64_t i) { return v[i]; }
  T at(std::int64_t i) const { return v[i]; }

  /// Flat offset of (n, c, h, w) in an NCHW tensor.
  std::int64_t idx4(int n, int c, int h, int w) const {
    return ((static_cast<std::int64_t>(n) * shape[1] + c) * shape[2] + h) *
               shape[3] +
           w;
  }

  std::string shape_str() const {
    std::string s = "{";
    for (std::size_t i = 0; i < shape.size(); ++i)
      s += (i ? "," : "") + std::to_string(shape[i]);
    return s + "}";
  }
};

}  // namespace sslseg
