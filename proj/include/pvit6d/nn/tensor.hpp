#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <numeric>
#include <vector>

#include "pvit6d/errors.hpp"

namespace pvit6d::nn {

using MatX =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<MatX>;
using CMatMap = Eigen::Map<const MatX>;
using VecMap = Eigen::Map<Eigen::VectorXd>;
using CVecMap = Eigen::Map<const Eigen::VectorXd>;

// Dense n-d array, row-major, double precision.
struct Tensor {
  std::vector<int> shape;
  Eigen::VectorXd data;

  Tensor() = default;
  explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
    data = Eigen::VectorXd::Zero(count(shape));
  }

  static int64_t count(const std::vector<int>& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
  }

  static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }
  static Tensor scalar(double v) {
    Tensor t({1});
    t.data[0] = v;
    return t;
  }
  static Tensor from(std::vector<int> s, std::vector<double> v) {
    Tensor t;
    t.shape = std::move(s);
    t.data = Eigen::Map<const Eigen::VectorXd>(v.data(), int64_t(v.size()));
    if (t.data.size() != count(t.shape))
      throw ShapeMismatch("Tensor::from: element count mismatch");
    return t;
  }

  int64_t numel() const { return data.size(); }
  int dim(int i) const { return shape[size_t(i)]; }
  int last_dim() const { return shape.back(); }
  int64_t rows() const { return numel() / last_dim(); }

  // View of the flattened (rows x last_dim) layout.
  MatMap mat() { return MatMap(data.data(), rows(), last_dim()); }
  CMatMap mat() const { return CMatMap(data.data(), rows(), last_dim()); }
  MatMap mat2(int64_t r, int64_t c) { return MatMap(data.data(), r, c); }
  CMatMap mat2(int64_t r, int64_t c) const {
    return CMatMap(data.data(), r, c);
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }
};

}  // namespace pvit6d::nn
