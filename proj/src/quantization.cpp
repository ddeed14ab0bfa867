#include "tinyft/quantization.hpp"

#include <cmath>

#include "tinyft/kernels.hpp"

namespace tinyft::quant {

QuantParams calibrate(const Tensor& t) {
  float max_abs = 0.0f;
  for (float v : t.data) max_abs = std::max(max_abs, std::abs(v));
  QuantParams qp;
  qp.scale = max_abs > 0.0f ? max_abs / 127.0f : 1.0f;
  qp.zero_point = 0;
  return qp;
}

namespace {

int8_t quantize_one(float v, const QuantParams& qp, bool& clamped) {
  // nearbyint under the default rounding mode is round-half-to-even.
  const float r = std::nearbyintf(v / qp.scale) + static_cast<float>(qp.zero_point);
  clamped = r < -128.0f || r > 127.0f;
  const float c = r < -128.0f ? -128.0f : (r > 127.0f ? 127.0f : r);
  return static_cast<int8_t>(c);
}

}  // namespace

QuantizedTensor quantize(const Tensor& t, const QuantParams& qp) {
  SaturationReport ignored;
  return quantize_with_report(t, qp, ignored);
}

QuantizedTensor quantize_with_report(const Tensor& t, const QuantParams& qp,
                                     SaturationReport& report) {
  QuantizedTensor q;
  q.shape = t.shape;
  q.qp = qp;
  q.data.resize(t.data.size());
  for (size_t i = 0; i < t.data.size(); ++i) {
    bool clamped = false;
    q.data[i] = quantize_one(t.data[i], qp, clamped);
    ++report.total;
    if (clamped) ++report.saturated;
  }
  return q;
}

Tensor dequantize(const QuantizedTensor& q) {
  Tensor t(q.shape);
  for (size_t i = 0; i < q.data.size(); ++i) {
    t.data[i] = static_cast<float>(q.data[i] - q.qp.zero_point) * q.qp.scale;
  }
  kernels::mac_counter_add(static_cast<uint64_t>(q.numel()));
  return t;
}

}  // namespace tinyft::quant
