// AVX2 variants of the hot kernels. Every loop mirrors the scalar reference
// exactly: vector lanes hold independent output elements and each element
// accumulates its terms in the same order as the scalar code, so results are
// bit-identical (FMA is deliberately not used).

#ifdef TINYFT_HAVE_AVX2

#include <immintrin.h>

#include <cstring>
#include <vector>

#include "kernels_core.hpp"

namespace tinyft::kernels::detail {
namespace {

// Even-index elements of 16 consecutive floats: x[0], x[2], ..., x[14].
inline __m256 load_stride2(const float* p) {
  const __m256 a = _mm256_loadu_ps(p);
  const __m256 b = _mm256_loadu_ps(p + 8);
  const __m256 t = _mm256_shuffle_ps(a, b, 0x88);
  const __m256i idx = _mm256_setr_epi32(0, 1, 4, 5, 2, 3, 6, 7);
  return _mm256_permutevar8x32_ps(t, idx);
}

// Small output maps (narrow rows) vectorize poorly along a row. This path
// flattens (oy, ox) and walks 8 output positions per iteration. Lane groups
// that stay inside one input row use plain loads; groups straddling a row
// boundary fall back to gathers, and the final partial group is masked.
// Each output still accumulates its taps in (ci, ky, kx) order, so results
// stay bit-identical to the scalar reference.
void conv_fw_avx2_gather(const float* xpad, const float* w, const float* bias,
                         float* y, int cin, int cout, int k, int stride,
                         int hp, int wp, int hout, int wout) {
  const int64_t plane = static_cast<int64_t>(hout) * wout;
  std::vector<int> posoff(static_cast<size_t>(plane) + 8, 0);
  for (int oy = 0; oy < hout; ++oy) {
    for (int ox = 0; ox < wout; ++ox) {
      posoff[static_cast<size_t>(oy) * wout + ox] = oy * stride * wp + ox * stride;
    }
  }
  const int taps = k * k;
  for (int co = 0; co < cout; ++co) {
    const float b = bias ? bias[co] : 0.0f;
    float* yp = y + co * plane;
    const float* wrow = w + static_cast<int64_t>(co) * cin * taps;
    for (int64_t p = 0; p < plane; p += 8) {
      const int lanes = static_cast<int>(plane - p < 8 ? plane - p : 8);
      const __m256i vidx = _mm256_loadu_si256(
          reinterpret_cast<const __m256i*>(posoff.data() + p));
      __m256i lane_mask = _mm256_setr_epi32(0, 1, 2, 3, 4, 5, 6, 7);
      lane_mask = _mm256_cmpgt_epi32(_mm256_set1_epi32(lanes), lane_mask);
      const bool full = lanes == 8;
      const bool within_row =
          full && posoff[static_cast<size_t>(p) + 7] - posoff[static_cast<size_t>(p)] == 7 * stride;
      const int off0 = posoff[static_cast<size_t>(p)];
      __m256 acc = _mm256_set1_ps(b);
      for (int ci = 0; ci < cin; ++ci) {
        for (int ky = 0; ky < k; ++ky) {
          for (int kx = 0; kx < k; ++kx) {
            const float* base = xpad + (static_cast<int64_t>(ci) * hp + ky) * wp + kx;
            __m256 xv;
            if (within_row && stride == 1) {
              xv = _mm256_loadu_ps(base + off0);
            } else if (within_row) {
              xv = load_stride2(base + off0);
            } else if (full) {
              xv = _mm256_i32gather_ps(base, vidx, 4);
            } else {
              xv = _mm256_mask_i32gather_ps(_mm256_setzero_ps(), base, vidx,
                                            _mm256_castsi256_ps(lane_mask), 4);
            }
            const __m256 wv = _mm256_set1_ps(wrow[(ci * k + ky) * k + kx]);
            acc = _mm256_add_ps(acc, _mm256_mul_ps(wv, xv));
          }
        }
      }
      if (full) {
        _mm256_storeu_ps(yp + p, acc);
      } else {
        _mm256_maskstore_ps(yp + p, lane_mask, acc);
      }
    }
  }
}

void conv_fw_avx2(const float* xpad, const float* w, const float* bias,
                  float* y, int cin, int cout, int k, int stride, int hp,
                  int wp, int hout, int wout) {
  if (wout <= 20 && (stride == 1 || stride == 2)) {
    conv_fw_avx2_gather(xpad, w, bias, y, cin, cout, k, stride, hp, wp, hout, wout);
    return;
  }
  const int64_t plane = static_cast<int64_t>(hout) * wout;
  for (int co = 0; co < cout; ++co) {
    const float b = bias ? bias[co] : 0.0f;
    float* yp = y + co * plane;
    for (int64_t i = 0; i < plane; ++i) yp[i] = b;
  }
  const int vec_end = wout & ~7;
  for (int co = 0; co < cout; ++co) {
    float* yp = y + co * plane;
    for (int ci = 0; ci < cin; ++ci) {
      for (int ky = 0; ky < k; ++ky) {
        for (int kx = 0; kx < k; ++kx) {
          const float wv = w[((static_cast<int64_t>(co) * cin + ci) * k + ky) * k + kx];
          const __m256 wvec = _mm256_set1_ps(wv);
          const float* xbase = xpad + (static_cast<int64_t>(ci) * hp + ky) * wp + kx;
          for (int oy = 0; oy < hout; ++oy) {
            const float* xr = xbase + static_cast<int64_t>(oy) * stride * wp;
            float* yr = yp + static_cast<int64_t>(oy) * wout;
            int ox = 0;
            if (stride == 1) {
              for (; ox < vec_end; ox += 8) {
                const __m256 xv = _mm256_loadu_ps(xr + ox);
                const __m256 yv = _mm256_loadu_ps(yr + ox);
                _mm256_storeu_ps(yr + ox, _mm256_add_ps(yv, _mm256_mul_ps(wvec, xv)));
              }
            } else if (stride == 2) {
              for (; ox < vec_end; ox += 8) {
                const __m256 xv = load_stride2(xr + 2 * ox);
                const __m256 yv = _mm256_loadu_ps(yr + ox);
                _mm256_storeu_ps(yr + ox, _mm256_add_ps(yv, _mm256_mul_ps(wvec, xv)));
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

void conv_wg_avx2(const float* xpad, const float* dy, float* dw, int cin,
                  int cout, int k, int stride, int hp, int wp, int hout,
                  int wout) {
  const int64_t m = static_cast<int64_t>(cin) * k * k;
  const int64_t vec_end = m & ~int64_t(7);
  std::vector<float> patch(static_cast<size_t>(m) + 8);
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
        const __m256 gv = _mm256_set1_ps(g);
        float* dwp = dw + co * m;
        int64_t i = 0;
        for (; i < vec_end; i += 8) {
          const __m256 dv = _mm256_loadu_ps(dwp + i);
          const __m256 pv = _mm256_loadu_ps(patch.data() + i);
          _mm256_storeu_ps(dwp + i, _mm256_add_ps(dv, _mm256_mul_ps(gv, pv)));
        }
        for (; i < m; ++i) dwp[i] += g * patch[static_cast<size_t>(i)];
      }
    }
  }
}

void bn_fw_avx2(const float* x, float* y, const float* scale,
                const float* beta, const float* mean, int ch, int64_t plane) {
  const int64_t vec_end = plane & ~int64_t(7);
  for (int c = 0; c < ch; ++c) {
    const float s = scale[c], b = beta[c], m = mean[c];
    const __m256 sv = _mm256_set1_ps(s);
    const __m256 bv = _mm256_set1_ps(b);
    const __m256 mv = _mm256_set1_ps(m);
    const float* xp = x + c * plane;
    float* yp = y + c * plane;
    int64_t i = 0;
    for (; i < vec_end; i += 8) {
      const __m256 xv = _mm256_loadu_ps(xp + i);
      _mm256_storeu_ps(yp + i,
                       _mm256_add_ps(_mm256_mul_ps(_mm256_sub_ps(xv, mv), sv), bv));
    }
    for (; i < plane; ++i) yp[i] = (xp[i] - m) * s + b;
  }
}

void bn_ig_avx2(const float* dy, float* dx, const float* scale, int ch,
                int64_t plane) {
  const int64_t vec_end = plane & ~int64_t(7);
  for (int c = 0; c < ch; ++c) {
    const float s = scale[c];
    const __m256 sv = _mm256_set1_ps(s);
    const float* gp = dy + c * plane;
    float* dp = dx + c * plane;
    int64_t i = 0;
    for (; i < vec_end; i += 8) {
      _mm256_storeu_ps(dp + i, _mm256_mul_ps(_mm256_loadu_ps(gp + i), sv));
    }
    for (; i < plane; ++i) dp[i] = gp[i] * s;
  }
}

void relu_fw_avx2(const float* x, float* y, uint8_t* bits, int64_t n) {
  const __m256 zero = _mm256_setzero_ps();
  const int64_t vec_end = n & ~int64_t(7);
  int64_t i = 0;
  for (; i < vec_end; i += 8) {
    const __m256 xv = _mm256_loadu_ps(x + i);
    const __m256 gt = _mm256_cmp_ps(xv, zero, _CMP_GT_OQ);
    _mm256_storeu_ps(y + i, _mm256_and_ps(xv, gt));
    bits[i >> 3] = static_cast<uint8_t>(_mm256_movemask_ps(gt));
  }
  for (; i < n; ++i) {
    const bool pos = x[i] > 0.0f;
    y[i] = pos ? x[i] : 0.0f;
    if (pos) bits[i >> 3] |= static_cast<uint8_t>(1u << (i & 7));
  }
}

void relu_bw_avx2(const float* dy, const uint8_t* bits, float* dx, int64_t n) {
  const __m256i lane_bits = _mm256_setr_epi32(1, 2, 4, 8, 16, 32, 64, 128);
  const int64_t vec_end = n & ~int64_t(7);
  int64_t i = 0;
  for (; i < vec_end; i += 8) {
    const __m256i b = _mm256_set1_epi32(bits[i >> 3]);
    const __m256i hit = _mm256_cmpeq_epi32(_mm256_and_si256(b, lane_bits), lane_bits);
    const __m256 gv = _mm256_loadu_ps(dy + i);
    _mm256_storeu_ps(dx + i, _mm256_and_ps(gv, _mm256_castsi256_ps(hit)));
  }
  for (; i < n; ++i) {
    dx[i] = ((bits[i >> 3] >> (i & 7)) & 1) ? dy[i] : 0.0f;
  }
}

const Ops kAvx2Ops = {conv_fw_avx2, conv_wg_avx2, bn_fw_avx2,
                      bn_ig_avx2,   relu_fw_avx2, relu_bw_avx2};

}  // namespace

const Ops* avx2_ops() { return &kAvx2Ops; }

}  // namespace tinyft::kernels::detail

#else

#include "kernels_core.hpp"

namespace tinyft::kernels::detail {
const Ops* avx2_ops() { return nullptr; }
}  // namespace tinyft::kernels::detail

#endif  // TINYFT_HAVE_AVX2
