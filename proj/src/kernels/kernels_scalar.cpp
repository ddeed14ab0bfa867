#include <cstring>
#include <vector>

#include "kernels_core.hpp"

namespace tinyft::kernels::detail {
namespace {

void conv_fw_scalar(const float* xpad, const float* w, const float* bias,
                    float* y, int cin, int cout, int k, int stride, int hp,
                    int wp, int hout, int wout) {
  const int64_t plane = static_cast<int64_t>(hout) * wout;
  for (int co = 0; co < cout; ++co) {
    const float b = bias ? bias[co] : 0.0f;
    float* yp = y + co * plane;
    for (int64_t i = 0; i < plane; ++i) yp[i] = b;
  }
  for (int co = 0; co < cout; ++co) {
    float* yp = y + co * plane;
    for (int ci = 0; ci < cin; ++ci) {
      for (int ky = 0; ky < k; ++ky) {
        for (int kx = 0; kx < k; ++kx) {
          const float wv = w[((static_cast<int64_t>(co) * cin + ci) * k + ky) * k + kx];
          const float* xbase = xpad + (static_cast<int64_t>(ci) * hp + ky) * wp + kx;
          for (int oy = 0; oy < hout; ++oy) {
            const float* xr = xbase + static_cast<int64_t>(oy) * stride * wp;
            float* yr = yp + static_cast<int64_t>(oy) * wout;
            for (int ox = 0; ox < wout; ++ox) {
              yr[ox] += wv * xr[static_cast<int64_t>(ox) * stride];
            }
          }
        }
      }
    }
  }
}

void conv_wg_scalar(const float* xpad, const float* dy, float* dw, int cin,
                    int cout, int k, int stride, int hp, int wp, int hout,
                    int wout) {
  const int64_t m = static_cast<int64_t>(cin) * k * k;
  std::vector<float> patch(static_cast<size_t>(m));
  for (int oy = 0; oy < hout; ++oy) {
    for (int ox = 0; ox < wout; ++ox) {
      float* pp = patch.data();
      for (int ci = 0; ci < cin; ++ci) {
        for (int ky = 0; ky < k; ++ky) {
          const float* src = xpad +
              (static_cast<int64_t>(ci) * hp + static_cast<int64_t>(oy) * stride + ky) * wp +
              static_cast<int64_t>(ox) * stride;
          std::memcpy(pp, src, sizeof(float) * static_cast<size_t>(k));
          pp += k;
        }
      }
      for (int co = 0; co < cout; ++co) {
        const float g = dy[(static_cast<int64_t>(co) * hout + oy) * wout + ox];
        float* dwp = dw + co * m;
        for (int64_t i = 0; i < m; ++i) dwp[i] += g * patch[static_cast<size_t>(i)];
      }
    }
  }
}

void bn_fw_scalar(const float* x, float* y, const float* scale,
                  const float* beta, const float* mean, int ch, int64_t plane) {
  for (int c = 0; c < ch; ++c) {
    const float s = scale[c];
    const float b = beta[c];
    const float m = mean[c];
    const float* xp = x + c * plane;
    float* yp = y + c * plane;
    for (int64_t i = 0; i < plane; ++i) yp[i] = (xp[i] - m) * s + b;
  }
}

void bn_ig_scalar(const float* dy, float* dx, const float* scale, int ch,
                  int64_t plane) {
  for (int c = 0; c < ch; ++c) {
    const float s = scale[c];
    const float* gp = dy + c * plane;
    float* dp = dx + c * plane;
    for (int64_t i = 0; i < plane; ++i) dp[i] = gp[i] * s;
  }
}

void relu_fw_scalar(const float* x, float* y, uint8_t* bits, int64_t n) {
  for (int64_t i = 0; i < n; ++i) {
    const bool pos = x[i] > 0.0f;
    y[i] = pos ? x[i] : 0.0f;
    if (pos) bits[i >> 3] |= static_cast<uint8_t>(1u << (i & 7));
  }
}

void relu_bw_scalar(const float* dy, const uint8_t* bits, float* dx,
                    int64_t n) {
  for (int64_t i = 0; i < n; ++i) {
    dx[i] = ((bits[i >> 3] >> (i & 7)) & 1) ? dy[i] : 0.0f;
  }
}

const Ops kScalarOps = {conv_fw_scalar, conv_wg_scalar, bn_fw_scalar,
                        bn_ig_scalar,   relu_fw_scalar, relu_bw_scalar};

}  // namespace

const Ops* scalar_ops() { return &kScalarOps; }

}  // namespace tinyft::kernels::detail
