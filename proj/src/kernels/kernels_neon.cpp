// NEON variants, mirroring the scalar reference bit for bit (4-wide lanes,
// same per-element accumulation order, no fused multiply-add).

#if defined(__aarch64__)

#include <arm_neon.h>

#include <cstring>
#include <vector>

#include "kernels_core.hpp"

namespace tinyft::kernels::detail {
namespace {

void conv_fw_neon(const float* xpad, const float* w, const float* bias,
                  float* y, int cin, int cout, int k, int stride, int hp,
                  int wp, int hout, int wout) {
  const int64_t plane = static_cast<int64_t>(hout) * wout;
  for (int co = 0; co < cout; ++co) {
    const float b = bias ? bias[co] : 0.0f;
    float* yp = y + co * plane;
    for (int64_t i = 0; i < plane; ++i) yp[i] = b;
  }
  const int vec_end = wout & ~3;
  for (int co = 0; co < cout; ++co) {
    float* yp = y + co * plane;
    for (int ci = 0; ci < cin; ++ci) {
      for (int ky = 0; ky < k; ++ky) {
        for (int kx = 0; kx < k; ++kx) {
          const float wv = w[((static_cast<int64_t>(co) * cin + ci) * k + ky) * k + kx];
          const float32x4_t wvec = vdupq_n_f32(wv);
          const float* xbase = xpad + (static_cast<int64_t>(ci) * hp + ky) * wp + kx;
          for (int oy = 0; oy < hout; ++oy) {
            const float* xr = xbase + static_cast<int64_t>(oy) * stride * wp;
            float* yr = yp + static_cast<int64_t>(oy) * wout;
            int ox = 0;
            if (stride == 1) {
              for (; ox < vec_end; ox += 4) {
                const float32x4_t xv = vld1q_f32(xr + ox);
                const float32x4_t yv = vld1q_f32(yr + ox);
                vst1q_f32(yr + ox, vaddq_f32(yv, vmulq_f32(wvec, xv)));
              }
            } else if (stride == 2) {
              for (; ox < vec_end; ox += 4) {
                const float32x4x2_t pair = vld2q_f32(xr + 2 * ox);
                const float32x4_t yv = vld1q_f32(yr + ox);
                vst1q_f32(yr + ox, vaddq_f32(yv, vmulq_f32(wvec, pair.val[0])));
              }
            }
            for (; ox < wout; ++ox) {
              yr[ox] += wv * xr[static_cast<int64_t>(ox) * stride];
            }
          }
        }
      }
    }
  }
}

void conv_wg_neon(const float* xpad, const float* dy, float* dw, int cin,
                  int cout, int k, int stride, int hp, int wp, int hout,
                  int wout) {
  const int64_t m = static_cast<int64_t>(cin) * k * k;
  const int64_t vec_end = m & ~int64_t(3);
  std::vector<float> patch(static_cast<size_t>(m) + 4);
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
        const float32x4_t gv = vdupq_n_f32(g);
        float* dwp = dw + co * m;
        int64_t i = 0;
        for (; i < vec_end; i += 4) {
          const float32x4_t dv = vld1q_f32(dwp + i);
          const float32x4_t pv = vld1q_f32(patch.data() + i);
          vst1q_f32(dwp + i, vaddq_f32(dv, vmulq_f32(gv, pv)));
        }
        for (; i < m; ++i) dwp[i] += g * patch[static_cast<size_t>(i)];
      }
    }
  }
}

void bn_fw_neon(const float* x, float* y, const float* scale,
                const float* beta, const float* mean, int ch, int64_t plane) {
  const int64_t vec_end = plane & ~int64_t(3);
  for (int c = 0; c < ch; ++c) {
    const float s = scale[c], b = beta[c], m = mean[c];
    const float32x4_t sv = vdupq_n_f32(s);
    const float32x4_t bv = vdupq_n_f32(b);
    const float32x4_t mv = vdupq_n_f32(m);
    const float* xp = x + c * plane;
    float* yp = y + c * plane;
    int64_t i = 0;
    for (; i < vec_end; i += 4) {
      const float32x4_t xv = vld1q_f32(xp + i);
      vst1q_f32(yp + i, vaddq_f32(vmulq_f32(vsubq_f32(xv, mv), sv), bv));
    }
    for (; i < plane; ++i) yp[i] = (xp[i] - m) * s + b;
  }
}

void bn_ig_neon(const float* dy, float* dx, const float* scale, int ch,
                int64_t plane) {
  const int64_t vec_end = plane & ~int64_t(3);
  for (int c = 0; c < ch; ++c) {
    const float32x4_t sv = vdupq_n_f32(scale[c]);
    const float* gp = dy + c * plane;
    float* dp = dx + c * plane;
    int64_t i = 0;
    for (; i < vec_end; i += 4) {
      vst1q_f32(dp + i, vmulq_f32(vld1q_f32(gp + i), sv));
    }
    for (; i < plane; ++i) dp[i] = gp[i] * scale[c];
  }
}

void relu_fw_neon(const float* x, float* y, uint8_t* bits, int64_t n) {
  const float32x4_t zero = vdupq_n_f32(0.0f);
  const uint32x4_t lane_bits = {1u, 2u, 4u, 8u};
  const int64_t vec_end = n & ~int64_t(7);
  int64_t i = 0;
  for (; i < vec_end; i += 8) {
    uint8_t packed = 0;
    for (int half = 0; half < 2; ++half) {
      const float32x4_t xv = vld1q_f32(x + i + half * 4);
      const uint32x4_t gt = vcgtq_f32(xv, zero);
      vst1q_f32(y + i + half * 4,
                vreinterpretq_f32_u32(vandq_u32(vreinterpretq_u32_f32(xv), gt)));
      const uint32x4_t sel = vandq_u32(gt, lane_bits);
      packed |= static_cast<uint8_t>(vaddvq_u32(sel) << (half * 4));
    }
    bits[i >> 3] = packed;
  }
  for (; i < n; ++i) {
    const bool pos = x[i] > 0.0f;
    y[i] = pos ? x[i] : 0.0f;
    if (pos) bits[i >> 3] |= static_cast<uint8_t>(1u << (i & 7));
  }
}

void relu_bw_neon(const float* dy, const uint8_t* bits, float* dx, int64_t n) {
  const uint32x4_t lane_bits = {1u, 2u, 4u, 8u};
  const int64_t vec_end = n & ~int64_t(7);
  int64_t i = 0;
  for (; i < vec_end; i += 8) {
    const uint8_t b = bits[i >> 3];
    for (int half = 0; half < 2; ++half) {
      const uint32x4_t bv = vdupq_n_u32(static_cast<uint32_t>(b >> (half * 4)));
      const uint32x4_t hit = vceqq_u32(vandq_u32(bv, lane_bits), lane_bits);
      const float32x4_t gv = vld1q_f32(dy + i + half * 4);
      vst1q_f32(dx + i + half * 4,
                vreinterpretq_f32_u32(vandq_u32(vreinterpretq_u32_f32(gv), hit)));
    }
  }
  for (; i < n; ++i) {
    dx[i] = ((bits[i >> 3] >> (i & 7)) & 1) ? dy[i] : 0.0f;
  }
}

const Ops kNeonOps = {conv_fw_neon, conv_wg_neon, bn_fw_neon,
                      bn_ig_neon,   relu_fw_neon, relu_bw_neon};

}  // namespace

const Ops* neon_ops() { return &kNeonOps; }

}  // namespace tinyft::kernels::detail

#else

#include "kernels_core.hpp"

namespace tinyft::kernels::detail {
const Ops* neon_ops() { return nullptr; }
}  // namespace tinyft::kernels::detail

#endif  // __aarch64__
