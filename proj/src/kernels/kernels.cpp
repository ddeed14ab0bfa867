#include "tinyft/kernels.hpp"

#include <cmath>
#include <cstdlib>
#include <cstring>
#include <stdexcept>

#include "kernels_core.hpp"

namespace tinyft::kernels {

namespace {

thread_local uint64_t g_mac_count = 0;

#ifndef NDEBUG
constexpr bool kFiniteChecks = true;
#else
constexpr bool kFiniteChecks = false;
#endif

void debug_check(const Tensor& t, const char* what) {
  if (kFiniteChecks) check_finite(t, what);
}

[[noreturn]] void fail(const std::string& msg) {
  throw std::invalid_argument("kernels: " + msg);
}

// Accepts (C,H,W) or (N,C,H,W); returns N and writes C,H,W.
int64_t split_batch(const Tensor& x, int64_t& c, int64_t& h, int64_t& w,
                    const char* what) {
  if (x.rank() == 3) {
    c = x.dim(0); h = x.dim(1); w = x.dim(2);
    return 1;
  }
  if (x.rank() == 4) {
    c = x.dim(1); h = x.dim(2); w = x.dim(3);
    return x.dim(0);
  }
  fail(std::string(what) + ": expected rank 3 or 4, got " + shape_str(x.shape));
}

std::vector<int64_t> with_batch(const Tensor& like, std::vector<int64_t> chw) {
  if (like.rank() == 4) chw.insert(chw.begin(), like.dim(0));
  return chw;
}

struct ConvShape {
  int64_t n, cin, h, w;
  int cout, k, hout, wout, hp, wp;
};

ConvShape conv_shape(const Tensor& x, const Tensor& weights, int stride,
                     int pad, const char* what) {
  ConvShape s{};
  s.n = split_batch(x, s.cin, s.h, s.w, what);
  if (weights.rank() != 4 || weights.dim(2) != weights.dim(3)) {
    fail(std::string(what) + ": weights must be (Cout,Cin,K,K), got " +
         shape_str(weights.shape));
  }
  if (weights.dim(1) != s.cin) {
    fail(std::string(what) + ": input channels " + std::to_string(s.cin) +
         " do not match weights " + shape_str(weights.shape));
  }
  s.cout = static_cast<int>(weights.dim(0));
  s.k = static_cast<int>(weights.dim(2));
  if (stride < 1) fail(std::string(what) + ": stride must be >= 1");
  if (pad < 0 || pad > s.k - 1) {
    fail(std::string(what) + ": pad must be in [0, K-1]");
  }
  const int64_t he = s.h + 2 * pad - s.k;
  const int64_t we = s.w + 2 * pad - s.k;
  if (he < 0 || we < 0) fail(std::string(what) + ": kernel larger than input");
  s.hout = static_cast<int>(he / stride + 1);
  s.wout = static_cast<int>(we / stride + 1);
  s.hp = static_cast<int>(s.h + 2 * pad);
  s.wp = static_cast<int>(s.w + 2 * pad);
  return s;
}

// Copies one (C,H,W) sample into an explicitly zero-padded (C,H+2p,W+2p)
// buffer. Padding is materialized so that every output position performs the
// full K*K*Cin multiply count, border included.
void pad_sample(const float* x, float* xpad, int64_t c, int64_t h, int64_t w,
                int pad) {
  const int64_t hp = h + 2 * pad, wp = w + 2 * pad;
  std::memset(xpad, 0, sizeof(float) * static_cast<size_t>(c * hp * wp));
  for (int64_t ci = 0; ci < c; ++ci) {
    for (int64_t row = 0; row < h; ++row) {
      std::memcpy(xpad + (ci * hp + row + pad) * wp + pad, x + (ci * h + row) * w,
                  sizeof(float) * static_cast<size_t>(w));
    }
  }
}

const detail::Ops* g_active = nullptr;

Backend g_backend = Backend::scalar;

const detail::Ops* ops_for(Backend b) {
  switch (b) {
    case Backend::scalar: return detail::scalar_ops();
    case Backend::avx2: return detail::avx2_ops();
    case Backend::neon: return detail::neon_ops();
  }
  return nullptr;
}

void init_backend() {
  if (g_active) return;
  Backend b = detect_backend();
  if (const char* env = std::getenv("TINYFT_BACKEND")) {
    const std::string name(env);
    if (name == "scalar") b = Backend::scalar;
    else if (name == "avx2") b = Backend::avx2;
    else if (name == "neon") b = Backend::neon;
    else fail("unknown TINYFT_BACKEND value '" + name + "'");
  }
  set_backend(b);
}

const detail::Ops& ops() {
  init_backend();
  return *g_active;
}

// Per-channel gamma / sqrt(var + eps), shared by every batchnorm pass so all
// of them see the exact same f32 scale.
std::vector<float> bn_scales(const LayerParams& p) {
  const int64_t ch = p.frozen_mean.numel();
  if (p.weights.numel() != ch || p.bias.numel() != ch ||
      p.frozen_var.numel() != ch) {
    fail("batchnorm: gamma/beta/mean/var sizes disagree");
  }
  std::vector<float> scale(static_cast<size_t>(ch));
  for (int64_t c = 0; c < ch; ++c) {
    const float istd = 1.0f / std::sqrt(p.frozen_var.data[c] + p.epsilon);
    scale[static_cast<size_t>(c)] = p.weights.data[c] * istd;
  }
  return scale;
}

}  // namespace

void mac_counter_reset() { g_mac_count = 0; }
uint64_t mac_counter_value() { return g_mac_count; }
void mac_counter_add(uint64_t n) { g_mac_count += n; }

Backend detect_backend() {
#if defined(TINYFT_HAVE_AVX2) && defined(__x86_64__)
  if (__builtin_cpu_supports("avx2") && detail::avx2_ops()) return Backend::avx2;
#endif
#if defined(__aarch64__)
  if (detail::neon_ops()) return Backend::neon;
#endif
  return Backend::scalar;
}

Backend active_backend() {
  init_backend();
  return g_backend;
}

void set_backend(Backend b) {
  const detail::Ops* o = ops_for(b);
  if (!o) fail("backend " + backend_name(b) + " is not available on this machine");
#if defined(__x86_64__)
  if (b == Backend::avx2 && !__builtin_cpu_supports("avx2")) {
    fail("backend avx2 is not supported by this CPU");
  }
#endif
  g_active = o;
  g_backend = b;
}

std::string backend_name(Backend b) {
  switch (b) {
    case Backend::scalar: return "scalar";
    case Backend::avx2: return "avx2";
    case Backend::neon: return "neon";
  }
  return "?";
}

Tensor conv2d_fw(const Tensor& x, const LayerParams& p, int stride, int pad) {
  const ConvShape s = conv_shape(x, p.weights, stride, pad, "conv2d_fw");
  if (p.bias.numel() != 0 && p.bias.numel() != s.cout) {
    fail("conv2d_fw: bias size does not match output channels");
  }
  Tensor y(with_batch(x, {s.cout, s.hout, s.wout}));
  // +8 slack: vector backends may read (not use) a few floats past a row end.
  std::vector<float> xpad(static_cast<size_t>(s.cin * s.hp * s.wp) + 8);
  const int64_t xsz = s.cin * s.h * s.w;
  const int64_t ysz = static_cast<int64_t>(s.cout) * s.hout * s.wout;
  const float* bias = p.bias.numel() ? p.bias.ptr() : nullptr;
  for (int64_t n = 0; n < s.n; ++n) {
    pad_sample(x.ptr() + n * xsz, xpad.data(), s.cin, s.h, s.w, pad);
    ops().conv_fw(xpad.data(), p.weights.ptr(), bias, y.ptr() + n * ysz,
                  static_cast<int>(s.cin), s.cout, s.k, stride, s.hp, s.wp,
                  s.hout, s.wout);
  }
  mac_counter_add(static_cast<uint64_t>(s.n) * s.cout * s.cin * s.k * s.k *
                  s.hout * s.wout);
  debug_check(y, "conv2d_fw output");
  return y;
}

Tensor conv2d_bw_ig(const Tensor& dy, const LayerParams& p, int stride,
                    int pad, const std::vector<int64_t>& x_shape) {
  Tensor xref(x_shape);
  const ConvShape s = conv_shape(xref, p.weights, stride, pad, "conv2d_bw_ig");
  int64_t gc, gh, gw;
  const int64_t gn = split_batch(dy, gc, gh, gw, "conv2d_bw_ig");
  if (gn != s.n || gc != s.cout || gh != s.hout || gw != s.wout) {
    fail("conv2d_bw_ig: dy shape " + shape_str(dy.shape) +
         " does not match conv output");
  }

  // Dense transposed convolution: dy is zero-stuffed by the stride and
  // embedded in a buffer covering every input position, then correlated with
  // the flipped, channel-transposed kernel at stride 1. Zeros are multiplied
  // like any other value, which is exactly the dense K*K*Cout count per
  // input element.
  const int k = s.k;
  const int64_t hst = s.h + k - 1, wst = s.w + k - 1;
  std::vector<float> dystuff(static_cast<size_t>(s.cout * hst * wst) + 8);
  std::vector<float> wt(static_cast<size_t>(p.weights.numel()));
  const float* w = p.weights.ptr();
  for (int co = 0; co < s.cout; ++co) {
    for (int64_t ci = 0; ci < s.cin; ++ci) {
      for (int ky = 0; ky < k; ++ky) {
        for (int kx = 0; kx < k; ++kx) {
          wt[((ci * s.cout + co) * k + (k - 1 - ky)) * k + (k - 1 - kx)] =
              w[((co * s.cin + ci) * k + ky) * k + kx];
        }
      }
    }
  }

  Tensor dx(x_shape);
  const int64_t dysz = static_cast<int64_t>(s.cout) * s.hout * s.wout;
  const int64_t dxsz = s.cin * s.h * s.w;
  const int off = k - 1 - pad;
  for (int64_t n = 0; n < s.n; ++n) {
    std::memset(dystuff.data(), 0, sizeof(float) * dystuff.size());
    const float* dyp = dy.ptr() + n * dysz;
    for (int co = 0; co < s.cout; ++co) {
      for (int oy = 0; oy < s.hout; ++oy) {
        for (int ox = 0; ox < s.wout; ++ox) {
          dystuff[(co * hst + off + static_cast<int64_t>(oy) * stride) * wst +
                  off + static_cast<int64_t>(ox) * stride] =
              dyp[(static_cast<int64_t>(co) * s.hout + oy) * s.wout + ox];
        }
      }
    }
    ops().conv_fw(dystuff.data(), wt.data(), nullptr, dx.ptr() + n * dxsz,
                  s.cout, static_cast<int>(s.cin), k, 1, static_cast<int>(hst),
                  static_cast<int>(wst), static_cast<int>(s.h),
                  static_cast<int>(s.w));
  }
  mac_counter_add(static_cast<uint64_t>(s.n) * s.cin * s.cout * s.k * s.k *
                  s.h * s.w);
  debug_check(dx, "conv2d_bw_ig output");
  return dx;
}

std::pair<Tensor, Tensor> conv2d_bw_wg(const Tensor& x, const Tensor& dy,
                                       int stride, int pad, int kernel) {
  int64_t cin, h, w, cout, gh, gw;
  const int64_t n = split_batch(x, cin, h, w, "conv2d_bw_wg");
  const int64_t gn = split_batch(dy, cout, gh, gw, "conv2d_bw_wg");
  Tensor wref({cout, cin, kernel, kernel});
  const ConvShape s = conv_shape(x, wref, stride, pad, "conv2d_bw_wg");
  if (gn != n || gh != s.hout || gw != s.wout) {
    fail("conv2d_bw_wg: dy shape " + shape_str(dy.shape) +
         " does not match conv output");
  }

  Tensor dw({cout, cin, kernel, kernel});
  Tensor db({cout});
  std::vector<float> xpad(static_cast<size_t>(cin * s.hp * s.wp) + 8);
  const int64_t xsz = cin * h * w;
  const int64_t dysz = cout * gh * gw;
  for (int64_t i = 0; i < n; ++i) {
    pad_sample(x.ptr() + i * xsz, xpad.data(), cin, h, w, pad);
    ops().conv_wg(xpad.data(), dy.ptr() + i * dysz, dw.ptr(),
                  static_cast<int>(cin), static_cast<int>(cout), kernel,
                  stride, s.hp, s.wp, s.hout, s.wout);
    for (int64_t co = 0; co < cout; ++co) {
      const float* g = dy.ptr() + i * dysz + co * gh * gw;
      float acc = db.data[static_cast<size_t>(co)];
      for (int64_t j = 0; j < gh * gw; ++j) acc += g[j];
      db.data[static_cast<size_t>(co)] = acc;
    }
  }
  mac_counter_add(static_cast<uint64_t>(n) * cout * cin * kernel * kernel *
                  s.hout * s.wout);
  debug_check(dw, "conv2d_bw_wg dW");
  return {std::move(dw), std::move(db)};
}

Tensor batchnorm_fw(const Tensor& x, const LayerParams& p) {
  int64_t c, h, w;
  const int64_t n = split_batch(x, c, h, w, "batchnorm_fw");
  if (c != p.frozen_mean.numel()) {
    fail("batchnorm_fw: channel count does not match parameters");
  }
  const std::vector<float> scale = bn_scales(p);
  Tensor y(x.shape);
  const int64_t plane = h * w;
  const int64_t ssz = c * plane;
  for (int64_t i = 0; i < n; ++i) {
    ops().bn_fw(x.ptr() + i * ssz, y.ptr() + i * ssz, scale.data(),
                p.bias.ptr(), p.frozen_mean.ptr(), static_cast<int>(c), plane);
  }
  mac_counter_add(static_cast<uint64_t>(x.numel()));
  debug_check(y, "batchnorm_fw output");
  return y;
}

Tensor batchnorm_bw_ig(const Tensor& dy, const LayerParams& p) {
  int64_t c, h, w;
  const int64_t n = split_batch(dy, c, h, w, "batchnorm_bw_ig");
  if (c != p.frozen_mean.numel()) {
    fail("batchnorm_bw_ig: channel count does not match parameters");
  }
  const std::vector<float> scale = bn_scales(p);
  Tensor dx(dy.shape);
  const int64_t plane = h * w;
  const int64_t ssz = c * plane;
  for (int64_t i = 0; i < n; ++i) {
    ops().bn_ig(dy.ptr() + i * ssz, dx.ptr() + i * ssz, scale.data(),
                static_cast<int>(c), plane);
  }
  mac_counter_add(static_cast<uint64_t>(dy.numel()));
  debug_check(dx, "batchnorm_bw_ig output");
  return dx;
}

std::pair<Tensor, Tensor> batchnorm_bw_wg(const Tensor& x, const Tensor& dy,
                                          const LayerParams& p) {
  if (x.shape != dy.shape) fail("batchnorm_bw_wg: x and dy shapes differ");
  int64_t c, h, w;
  const int64_t n = split_batch(x, c, h, w, "batchnorm_bw_wg");
  if (c != p.frozen_mean.numel()) {
    fail("batchnorm_bw_wg: channel count does not match parameters");
  }
  Tensor dgamma({c});
  Tensor dbeta({c});
  const int64_t plane = h * w;
  const int64_t ssz = c * plane;
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t ch = 0; ch < c; ++ch) {
      const float istd =
          1.0f / std::sqrt(p.frozen_var.data[static_cast<size_t>(ch)] + p.epsilon);
      const float mean = p.frozen_mean.data[static_cast<size_t>(ch)];
      const float* xp = x.ptr() + i * ssz + ch * plane;
      const float* gp = dy.ptr() + i * ssz + ch * plane;
      float dg = dgamma.data[static_cast<size_t>(ch)];
      float db = dbeta.data[static_cast<size_t>(ch)];
      for (int64_t j = 0; j < plane; ++j) {
        const float xhat = (xp[j] - mean) * istd;
        dg += gp[j] * xhat;
        db += gp[j];
      }
      dgamma.data[static_cast<size_t>(ch)] = dg;
      dbeta.data[static_cast<size_t>(ch)] = db;
    }
  }
  // Two multiplies per element: normalizing x and forming dy * xhat.
  mac_counter_add(2 * static_cast<uint64_t>(x.numel()));
  debug_check(dgamma, "batchnorm_bw_wg dgamma");
  return {std::move(dgamma), std::move(dbeta)};
}

std::pair<Tensor, SignMask> relu_fw(const Tensor& x) {
  Tensor y(x.shape);
  SignMask mask;
  mask.resize(x.numel());
  ops().relu_fw(x.ptr(), y.ptr(), mask.bits.data(), x.numel());
  debug_check(y, "relu_fw output");
  return {std::move(y), std::move(mask)};
}

Tensor relu_bw(const Tensor& dy, const SignMask& mask) {
  if (dy.numel() != mask.count) {
    fail("relu_bw: dy size does not match the recorded mask");
  }
  Tensor dx(dy.shape);
  ops().relu_bw(dy.ptr(), mask.bits.data(), dx.ptr(), dy.numel());
  debug_check(dx, "relu_bw output");
  return dx;
}

std::pair<Tensor, PoolArgmax> maxpool2x2_fw(const Tensor& x) {
  int64_t c, h, w;
  const int64_t n = split_batch(x, c, h, w, "maxpool2x2_fw");
  if (h < 2 || w < 2) fail("maxpool2x2_fw: input smaller than window");
  const int64_t ho = h / 2, wo = w / 2;
  Tensor y(with_batch(x, {c, ho, wo}));
  PoolArgmax arg;
  arg.in_shape = x.shape;
  arg.resize(y.numel());
  int64_t oi = 0;
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t ch = 0; ch < c; ++ch) {
      const float* xp = x.ptr() + (i * c + ch) * h * w;
      for (int64_t oy = 0; oy < ho; ++oy) {
        for (int64_t ox = 0; ox < wo; ++ox) {
          // Window cells in flat order; strictly-greater comparison makes
          // ties resolve to the lowest flat index.
          int best = 0;
          float bv = xp[(oy * 2) * w + ox * 2];
          const float cands[3] = {xp[(oy * 2) * w + ox * 2 + 1],
                                  xp[(oy * 2 + 1) * w + ox * 2],
                                  xp[(oy * 2 + 1) * w + ox * 2 + 1]};
          for (int t = 0; t < 3; ++t) {
            if (cands[t] > bv) {
              bv = cands[t];
              best = t + 1;
            }
          }
          y.data[static_cast<size_t>(oi)] = bv;
          arg.set(oi, best);
          ++oi;
        }
      }
    }
  }
  debug_check(y, "maxpool2x2_fw output");
  return {std::move(y), std::move(arg)};
}

Tensor maxpool2x2_bw(const Tensor& dy, const PoolArgmax& arg) {
  if (dy.numel() != arg.count) {
    fail("maxpool2x2_bw: dy size does not match the recorded argmax");
  }
  Tensor xref(arg.in_shape);
  int64_t c, h, w;
  const int64_t n = split_batch(xref, c, h, w, "maxpool2x2_bw");
  const int64_t ho = h / 2, wo = w / 2;
  Tensor dx(arg.in_shape);
  int64_t oi = 0;
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t ch = 0; ch < c; ++ch) {
      float* dp = dx.ptr() + (i * c + ch) * h * w;
      for (int64_t oy = 0; oy < ho; ++oy) {
        for (int64_t ox = 0; ox < wo; ++ox) {
          const int code = arg.get(oi);
          const int64_t iy = oy * 2 + (code >> 1);
          const int64_t ix = ox * 2 + (code & 1);
          dp[iy * w + ix] = dy.data[static_cast<size_t>(oi)];
          ++oi;
        }
      }
    }
  }
  debug_check(dx, "maxpool2x2_bw output");
  return dx;
}

namespace {

void fc_shapes(const Tensor& x, const Tensor& w, int64_t& n, int64_t& in,
               int64_t& out, const char* what) {
  if (w.rank() != 2) fail(std::string(what) + ": weights must be (Out, In)");
  out = w.dim(0);
  in = w.dim(1);
  if (x.rank() == 1) {
    n = 1;
  } else if (x.rank() == 2) {
    n = x.dim(0);
  } else {
    fail(std::string(what) + ": input must be rank 1 or 2");
  }
  if (x.numel() != n * in) {
    fail(std::string(what) + ": input size " + shape_str(x.shape) +
         " does not match weights " + shape_str(w.shape));
  }
}

}  // namespace

Tensor fc_fw(const Tensor& x, const LayerParams& p) {
  int64_t n, in, out;
  fc_shapes(x, p.weights, n, in, out, "fc_fw");
  if (p.bias.numel() != out) fail("fc_fw: bias size does not match outputs");
  Tensor y(x.rank() == 1 ? std::vector<int64_t>{out}
                         : std::vector<int64_t>{n, out});
  for (int64_t i = 0; i < n; ++i) {
    const float* xp = x.ptr() + i * in;
    float* yp = y.ptr() + i * out;
    for (int64_t o = 0; o < out; ++o) {
      float acc = p.bias.data[static_cast<size_t>(o)];
      const float* wr = p.weights.ptr() + o * in;
      for (int64_t j = 0; j < in; ++j) acc += wr[j] * xp[j];
      yp[o] = acc;
    }
  }
  mac_counter_add(static_cast<uint64_t>(n) * in * out);
  debug_check(y, "fc_fw output");
  return y;
}

Tensor fc_bw_ig(const Tensor& dy, const LayerParams& p) {
  int64_t n, in, out;
  if (p.weights.rank() != 2) fail("fc_bw_ig: weights must be (Out, In)");
  out = p.weights.dim(0);
  in = p.weights.dim(1);
  n = dy.rank() == 1 ? 1 : dy.dim(0);
  if (dy.numel() != n * out) fail("fc_bw_ig: dy size does not match weights");
  Tensor dx(dy.rank() == 1 ? std::vector<int64_t>{in}
                           : std::vector<int64_t>{n, in});
  for (int64_t i = 0; i < n; ++i) {
    const float* gp = dy.ptr() + i * out;
    float* dp = dx.ptr() + i * in;
    for (int64_t j = 0; j < in; ++j) {
      float acc = 0.0f;
      for (int64_t o = 0; o < out; ++o) acc += gp[o] * p.weights.ptr()[o * in + j];
      dp[j] = acc;
    }
  }
  mac_counter_add(static_cast<uint64_t>(n) * in * out);
  debug_check(dx, "fc_bw_ig output");
  return dx;
}

std::pair<Tensor, Tensor> fc_bw_wg(const Tensor& x, const Tensor& dy) {
  const int64_t n = x.rank() == 1 ? 1 : x.dim(0);
  const int64_t in = x.numel() / n;
  const int64_t gn = dy.rank() == 1 ? 1 : dy.dim(0);
  const int64_t out = dy.numel() / gn;
  if (gn != n) fail("fc_bw_wg: batch sizes of x and dy differ");
  Tensor dw({out, in});
  Tensor db({out});
  for (int64_t i = 0; i < n; ++i) {
    const float* xp = x.ptr() + i * in;
    const float* gp = dy.ptr() + i * out;
    for (int64_t o = 0; o < out; ++o) {
      float* dwr = dw.ptr() + o * in;
      const float g = gp[o];
      for (int64_t j = 0; j < in; ++j) dwr[j] += g * xp[j];
      db.data[static_cast<size_t>(o)] += g;
    }
  }
  mac_counter_add(static_cast<uint64_t>(n) * in * out);
  debug_check(dw, "fc_bw_wg dW");
  return {std::move(dw), std::move(db)};
}

}  // namespace tinyft::kernels
