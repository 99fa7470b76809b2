#pragma once

#include <cstdint>
#include <initializer_list>
#include <vector>

#include "rl4seg/common.hpp"

namespace rl4seg {

// Dense array with row-major contiguous storage. Network activations use the
// dimension order [C, T, H, W] (last dimension contiguous); plain 2D/3D grids
// use whatever order the caller documents.
struct Tensor {
  std::vector<int> shape;
  std::vector<real> values;

  Tensor() = default;
  explicit Tensor(std::vector<int> s) : shape(std::move(s)), values(count(shape), real(0)) {}
  Tensor(std::vector<int> s, real fill) : shape(std::move(s)), values(count(shape), fill) {}
  Tensor(std::vector<int> s, std::vector<real> v);

  static int64_t count(const std::vector<int>& s);

  int64_t numel() const { return static_cast<int64_t>(values.size()); }
  int rank() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape[static_cast<size_t>(i)]; }

  real& operator[](int64_t i) { return values[static_cast<size_t>(i)]; }
  real operator[](int64_t i) const { return values[static_cast<size_t>(i)]; }

  real* data() { return values.data(); }
  const real* data() const { return values.data(); }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }
  bool all_finite() const;

  // 4D accessor for [C,T,H,W] tensors.
  real& at4(int c, int t, int h, int w) {
    return values[static_cast<size_t>(((int64_t(c) * shape[1] + t) * shape[2] + h) * shape[3] + w)];
  }
  real at4(int c, int t, int h, int w) const {
    return values[static_cast<size_t>(((int64_t(c) * shape[1] + t) * shape[2] + h) * shape[3] + w)];
  }
  // 5D accessor for conv weights [Co,Ci,kt,kh,kw].
  real& at5(int a, int b, int c, int d, int e) {
    return values[static_cast<size_t>(
        (((int64_t(a) * shape[1] + b) * shape[2] + c) * shape[3] + d) * shape[4] + e)];
  }
  real at5(int a, int b, int c, int d, int e) const {
    return values[static_cast<size_t>(
        (((int64_t(a) * shape[1] + b) * shape[2] + c) * shape[3] + d) * shape[4] + e)];
  }

  uint64_t checksum() const;
};

Tensor random_uniform(const std::vector<int>& shape, real lo, real hi, std::mt19937_64& rng);
Tensor random_normal(const std::vector<int>& shape, real mean, real stddev, std::mt19937_64& rng);

}  // namespace rl4seg
