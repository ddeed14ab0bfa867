#pragma once

#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace tinyft {

// Dense row-major float32 tensor. Shapes are kept as a plain vector of
// dimensions; 4d activations use (N, C, H, W) order.
struct Tensor {
  std::vector<int64_t> shape;
  std::vector<float> data;

  Tensor() = default;
  explicit Tensor(std::vector<int64_t> s) : shape(std::move(s)) {
    data.assign(static_cast<size_t>(numel_of(shape)), 0.0f);
  }

  static int64_t numel_of(const std::vector<int64_t>& s) {
    int64_t n = 1;
    for (int64_t d : s) {
      if (d < 0) throw std::invalid_argument("tensor: negative dimension");
      n *= d;
    }
    return n;
  }

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  int64_t dim(size_t i) const { return shape.at(i); }
  size_t rank() const { return shape.size(); }

  float* ptr() { return data.data(); }
  const float* ptr() const { return data.data(); }

  bool same_shape(const std::vector<int64_t>& s) const { return shape == s; }
};

std::string shape_str(const std::vector<int64_t>& s);

// Throws std::invalid_argument when any entry is non-finite. Kernels call
// this on their outputs in debug builds.
void check_finite(const Tensor& t, const char* what);

}  // namespace tinyft
