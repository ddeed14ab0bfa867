#pragma once

#include <cstdint>

// Internal backend interface. Each backend supplies the hot inner loops and
// operates on pre-validated, explicitly padded buffers prepared by the
// dispatch layer in kernels.cpp. Backends must be bit-exact replicas of the
// scalar reference: vectorization is only allowed across independent output
// elements, never across the terms of one reduction.
namespace tinyft::kernels::detail {

// y[co][oy][ox] (+)= bias[co] + sum over (ci,ky,kx) of
//   w[co][ci][ky][kx] * xpad[ci][oy*stride+ky][ox*stride+kx]
// Accumulation runs in (ci, ky, kx) order for every output element.
using ConvFwFn = void (*)(const float* xpad, const float* w, const float* bias,
                          float* y, int cin, int cout, int k, int stride,
                          int hp, int wp, int hout, int wout);

// dw[co][ci][ky][kx] += dy[co][oy][ox] * xpad[ci][oy*stride+ky][ox*stride+kx],
// output positions visited in (oy, ox) order for every dw element.
using ConvWgFn = void (*)(const float* xpad, const float* dy, float* dw,
                          int cin, int cout, int k, int stride, int hp, int wp,
                          int hout, int wout);

// y = (x - mean[c]) * scale[c] + beta[c] over per-channel planes.
using BnFwFn = void (*)(const float* x, float* y, const float* scale,
                        const float* beta, const float* mean, int ch,
                        int64_t plane);

// dx = dy * scale[c].
using BnIgFn = void (*)(const float* dy, float* dx, const float* scale, int ch,
                        int64_t plane);

// y = x > 0 ? x : 0, bit i of `bits` = (x[i] > 0), LSB-first packing.
using ReluFwFn = void (*)(const float* x, float* y, uint8_t* bits, int64_t n);

// dx = bit ? dy : 0.
using ReluBwFn = void (*)(const float* dy, const uint8_t* bits, float* dx,
                          int64_t n);

struct Ops {
  ConvFwFn conv_fw;
  ConvWgFn conv_wg;
  BnFwFn bn_fw;
  BnIgFn bn_ig;
  ReluFwFn relu_fw;
  ReluBwFn relu_bw;
};

const Ops* scalar_ops();
const Ops* avx2_ops();  // null when not compiled in or not supported
const Ops* neon_ops();

}  // namespace tinyft::kernels::detail
