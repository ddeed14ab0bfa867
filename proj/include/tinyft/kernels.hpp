#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "tinyft/tensor.hpp"

namespace tinyft::kernels {

// Parameters of one layer. Convolutions use weights (Cout, Cin, K, K) and an
// optional bias (Cout); batchnorm stores gamma in `weights`, beta in `bias`
// plus the frozen statistics; fully connected layers use (Out, In) weights.
struct LayerParams {
  Tensor weights;
  Tensor bias;
  Tensor frozen_mean;
  Tensor frozen_var;
  float epsilon = 1e-5f;
};

// 1 bit per activation, set when the forward input was strictly positive.
// The backward pass of relu needs nothing else.
struct SignMask {
  int64_t count = 0;
  std::vector<uint8_t> bits;

  void resize(int64_t n) {
    count = n;
    bits.assign(static_cast<size_t>((n + 7) / 8), 0);
  }
  bool get(int64_t i) const {
    return (bits[static_cast<size_t>(i >> 3)] >> (i & 7)) & 1;
  }
  void set(int64_t i) {
    bits[static_cast<size_t>(i >> 3)] |= static_cast<uint8_t>(1u << (i & 7));
  }
  int64_t byte_size() const { return static_cast<int64_t>(bits.size()); }
};

// 2 bits per pooled output, encoding which cell of the 2x2 window won. Ties
// resolve to the lowest flat index so replays are exact.
struct PoolArgmax {
  std::vector<int64_t> in_shape;
  int64_t count = 0;
  std::vector<uint8_t> codes;

  void resize(int64_t n) {
    count = n;
    codes.assign(static_cast<size_t>((n + 3) / 4), 0);
  }
  int get(int64_t i) const {
    return (codes[static_cast<size_t>(i >> 2)] >> ((i & 3) * 2)) & 3;
  }
  void set(int64_t i, int code) {
    codes[static_cast<size_t>(i >> 2)] |=
        static_cast<uint8_t>((code & 3) << ((i & 3) * 2));
  }
  int64_t byte_size() const { return static_cast<int64_t>(codes.size()); }
};

// ---- forward ----

// Cross-correlation (no kernel flip), explicit zero padding, square kernel.
Tensor conv2d_fw(const Tensor& x, const LayerParams& p, int stride, int pad);

// Frozen-statistics batchnorm: y = (x - mean) * gamma / sqrt(var + eps) + beta.
Tensor batchnorm_fw(const Tensor& x, const LayerParams& p);

std::pair<Tensor, SignMask> relu_fw(const Tensor& x);

std::pair<Tensor, PoolArgmax> maxpool2x2_fw(const Tensor& x);

Tensor fc_fw(const Tensor& x, const LayerParams& p);

// ---- backward, input gradients ----

// Gradient w.r.t. the convolution input, computed as a dense transposed
// convolution over the zero-stuffed output gradient.
Tensor conv2d_bw_ig(const Tensor& dy, const LayerParams& p, int stride,
                    int pad, const std::vector<int64_t>& x_shape);

Tensor batchnorm_bw_ig(const Tensor& dy, const LayerParams& p);

Tensor relu_bw(const Tensor& dy, const SignMask& mask);

Tensor maxpool2x2_bw(const Tensor& dy, const PoolArgmax& arg);

Tensor fc_bw_ig(const Tensor& dy, const LayerParams& p);

// ---- backward, weight gradients ----

// Returns (dW, dB); dB is the per-output-channel sum of dy.
std::pair<Tensor, Tensor> conv2d_bw_wg(const Tensor& x, const Tensor& dy,
                                       int stride, int pad, int kernel);

// Returns (dgamma, dbeta).
std::pair<Tensor, Tensor> batchnorm_bw_wg(const Tensor& x, const Tensor& dy,
                                          const LayerParams& p);

std::pair<Tensor, Tensor> fc_bw_wg(const Tensor& x, const Tensor& dy);

// ---- multiply-accumulate accounting ----

// Thread-local counter of multiply-accumulate operations performed by the
// kernels above (elementwise multiplies count as one MAC each).
void mac_counter_reset();
uint64_t mac_counter_value();
void mac_counter_add(uint64_t n);

// ---- backend dispatch ----

enum class Backend { scalar, avx2, neon };

// Highest backend supported by this CPU. The TINYFT_BACKEND environment
// variable ("scalar", "avx2", "neon") overrides the default choice.
Backend detect_backend();
Backend active_backend();
void set_backend(Backend b);  // throws if unsupported on this machine
std::string backend_name(Backend b);

}  // namespace tinyft::kernels
