#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "imode/common.hpp"

namespace imode::ad {

// Dense 64-bit float tensor of rank 0, 1 or 2. Row-major. Rank 0 holds one
// value; rank 1 is a length-n vector; rank 2 is rows x cols. This is the only
// numeric container the differentiable stack uses.
struct Tensor {
  int rank = 0;
  int rows = 1;
  int cols = 1;
  std::vector<double> data;

  Tensor() : data(1, 0.0) {}
  // no-allocation shell; the tape fills in pooled buffers
  explicit Tensor(std::nullptr_t) {}

  static Tensor scalar(double v) {
    Tensor t;
    t.data[0] = v;
    return t;
  }
  static Tensor vec(int n, double fill = 0.0) {
    Tensor t;
    t.rank = 1;
    t.rows = n;
    t.cols = 1;
    t.data.assign(size_t(n), fill);
    return t;
  }
  // catches vec({0.5}) silently truncating to vec(0)
  static Tensor vec(double, double = 0.0) = delete;
  static Tensor vec(const std::vector<double>& v) {
    Tensor t;
    t.rank = 1;
    t.rows = int(v.size());
    t.cols = 1;
    t.data = v;
    return t;
  }
  static Tensor mat(int r, int c, double fill = 0.0) {
    Tensor t;
    t.rank = 2;
    t.rows = r;
    t.cols = c;
    t.data.assign(size_t(r) * size_t(c), fill);
    return t;
  }

  size_t numel() const { return data.size(); }
  double& operator[](size_t i) { return data[i]; }
  double operator[](size_t i) const { return data[i]; }
  double& at(int i, int j) { return data[size_t(i) * cols + j]; }
  double at(int i, int j) const { return data[size_t(i) * cols + j]; }

  bool same_shape(const Tensor& o) const {
    return rank == o.rank && rows == o.rows && cols == o.cols;
  }

  bool all_finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }

  std::string shape_str() const;
};

// max_i |a_i - b_i|; shapes must match.
double max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace imode::ad
