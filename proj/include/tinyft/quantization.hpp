#pragma once

#include <cstdint>
#include <vector>

#include "tinyft/tensor.hpp"

namespace tinyft::quant {

// Per-tensor affine int8 quantization: q = clamp(round(t / scale) + zp).
struct QuantParams {
  float scale = 1.0f;
  int32_t zero_point = 0;
};

struct QuantizedTensor {
  std::vector<int64_t> shape;
  std::vector<int8_t> data;
  QuantParams qp;

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
};

// Symmetric calibration: scale = max|t| / 127, zero point 0. An all-zero
// tensor gets scale 1.0 so quantization stays well defined.
QuantParams calibrate(const Tensor& t);

// Rounds half to even, then clamps to [-128, 127]. Values outside the
// representable range saturate at the clamp bounds.
QuantizedTensor quantize(const Tensor& t, const QuantParams& qp);

// (q - zp) * scale. Counts one MAC per element on the kernel counter, since
// on-device inference really performs this multiply.
Tensor dequantize(const QuantizedTensor& q);

// Fraction of elements that landed on the clamp bounds during quantize();
// used to report how far fine-tuned weights drifted out of the original
// calibration range.
struct SaturationReport {
  uint64_t total = 0;
  uint64_t saturated = 0;
  double fraction() const {
    return total == 0 ? 0.0 : static_cast<double>(saturated) / static_cast<double>(total);
  }
};

QuantizedTensor quantize_with_report(const Tensor& t, const QuantParams& qp,
                                     SaturationReport& report);

}  // namespace tinyft::quant
