#pragma once

#include <cstddef>
#include <initializer_list>
#include <vector>

namespace butterfly::net {

// Dense row-major double tensor; shape is (channels, height, width),
// (rows, cols) or (n) depending on use.
struct Tensor {
  std::vector<int> shape;
  std::vector<double> v;

  Tensor() = default;

  static Tensor zeros(std::initializer_list<int> dims) {
    Tensor t;
    t.shape.assign(dims);
    std::size_t n = 1;
    for (int d : t.shape) n *= static_cast<std::size_t>(d);
    t.v.assign(n, 0.0);
    return t;
  }

  std::size_t size() const { return v.size(); }

  int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }

  // (c, h, w) indexing
  double& at(int c, int y, int x) {
    return v[(static_cast<std::size_t>(c) * dim(1) + y) * dim(2) + x];
  }
  const double& at(int c, int y, int x) const {
    return v[(static_cast<std::size_t>(c) * dim(1) + y) * dim(2) + x];
  }

  // (rows, cols) indexing
  double& at(int r, int c) {
    return v[static_cast<std::size_t>(r) * dim(1) + c];
  }
  const double& at(int r, int c) const {
    return v[static_cast<std::size_t>(r) * dim(1) + c];
  }

  // (out_c, in_c, ky, kx) indexing for conv kernels
  double& at4(int o, int i, int ky, int kx) {
    return v[((static_cast<std::size_t>(o) * dim(1) + i) * dim(2) + ky) *
                 dim(3) +
             kx];
  }
  const double& at4(int o, int i, int ky, int kx) const {
    return v[((static_cast<std::size_t>(o) * dim(1) + i) * dim(2) + ky) *
                 dim(3) +
             kx];
  }

  void zero() { std::fill(v.begin(), v.end(), 0.0); }

  friend bool operator==(const Tensor&, const Tensor&) = default;
};

bool all_finite(const Tensor& t);

}  // namespace butterfly::net
