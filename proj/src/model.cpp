#include "tinyft/model.hpp"

#include <json.hpp>

#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "tinyft/rng.hpp"

namespace tinyft::model {

using nlohmann::json;

namespace {

[[noreturn]] void fail(const std::string& msg) {
  throw std::invalid_argument("model: " + msg);
}

const char* kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::conv: return "conv";
    case LayerKind::batchnorm: return "batchnorm";
    case LayerKind::relu: return "relu";
    case LayerKind::maxpool: return "maxpool";
    case LayerKind::flatten: return "flatten";
    case LayerKind::fc: return "fc";
  }
  return "?";
}

LayerKind kind_from_name(const std::string& s) {
  if (s == "conv") return LayerKind::conv;
  if (s == "batchnorm") return LayerKind::batchnorm;
  if (s == "relu") return LayerKind::relu;
  if (s == "maxpool") return LayerKind::maxpool;
  if (s == "flatten") return LayerKind::flatten;
  if (s == "fc") return LayerKind::fc;
  fail("unknown layer kind '" + s + "'");
}

}  // namespace

void Architecture::finalize() {
  if (in_c <= 0 || in_h <= 0 || in_w <= 0) fail("bad input dimensions");
  in_shape.assign(layers.size(), {});
  out_shape.assign(layers.size(), {});
  feature_dim = 0;
  std::vector<int64_t> cur = {in_c, in_h, in_w};
  for (size_t i = 0; i < layers.size(); ++i) {
    LayerDesc& l = layers[i];
    in_shape[i] = cur;
    switch (l.kind) {
      case LayerKind::conv: {
        if (cur.size() != 3) fail("conv after flatten");
        if (cur[0] != l.in_ch) fail("conv input channels mismatch");
        const int64_t ho = (cur[1] + 2 * l.pad - l.kernel) / l.stride + 1;
        const int64_t wo = (cur[2] + 2 * l.pad - l.kernel) / l.stride + 1;
        if (ho < 1 || wo < 1) fail("conv output collapses to zero");
        cur = {l.out_ch, ho, wo};
        break;
      }
      case LayerKind::batchnorm:
        if (cur.size() != 3 || cur[0] != l.in_ch) fail("batchnorm channel mismatch");
        l.out_ch = l.in_ch;
        break;
      case LayerKind::relu:
        break;
      case LayerKind::maxpool:
        if (cur.size() != 3) fail("maxpool after flatten");
        cur = {cur[0], cur[1] / 2, cur[2] / 2};
        break;
      case LayerKind::flatten:
        cur = {cur[0] * (cur.size() == 3 ? cur[1] * cur[2] : 1)};
        break;
      case LayerKind::fc:
        if (cur.size() != 1) fail("fc requires flattened input");
        if (cur[0] != l.in_ch) fail("fc input size mismatch");
        if (feature_dim == 0) feature_dim = cur[0];
        cur = {static_cast<int64_t>(l.out_ch)};
        break;
    }
    out_shape[i] = cur;
  }
  if (layers.empty() || layers.back().kind != LayerKind::fc) {
    fail("network must end in a fully connected head");
  }
  if (cur.size() != 1 || cur[0] != outputs) fail("output head size mismatch");
}

std::string Architecture::to_json() const {
  json j;
  j["in"] = {in_c, in_h, in_w};
  j["out"] = outputs;
  json ls = json::array();
  for (const LayerDesc& l : layers) {
    json e;
    e["kind"] = kind_name(l.kind);
    switch (l.kind) {
      case LayerKind::conv:
        e["ic"] = l.in_ch; e["oc"] = l.out_ch; e["k"] = l.kernel;
        e["s"] = l.stride; e["p"] = l.pad; e["b"] = l.has_bias;
        break;
      case LayerKind::batchnorm:
        e["ic"] = l.in_ch; e["eps"] = l.epsilon;
        break;
      case LayerKind::fc:
        e["ic"] = l.in_ch; e["oc"] = l.out_ch; e["b"] = l.has_bias;
        break;
      default:
        break;
    }
    ls.push_back(e);
  }
  j["layers"] = ls;
  return j.dump();  // nlohmann objects iterate sorted by key: canonical text
}

Architecture Architecture::from_json(const std::string& text) {
  json j = json::parse(text);
  Architecture a;
  a.in_c = j.at("in").at(0);
  a.in_h = j.at("in").at(1);
  a.in_w = j.at("in").at(2);
  a.outputs = j.at("out");
  for (const json& e : j.at("layers")) {
    LayerDesc l;
    l.kind = kind_from_name(e.at("kind"));
    switch (l.kind) {
      case LayerKind::conv:
        l.in_ch = e.at("ic"); l.out_ch = e.at("oc"); l.kernel = e.at("k");
        l.stride = e.at("s"); l.pad = e.at("p"); l.has_bias = e.at("b");
        break;
      case LayerKind::batchnorm:
        l.in_ch = e.at("ic"); l.epsilon = e.at("eps");
        break;
      case LayerKind::fc:
        l.in_ch = e.at("ic"); l.out_ch = e.at("oc"); l.has_bias = e.at("b");
        break;
      default:
        break;
    }
    a.layers.push_back(l);
  }
  a.finalize();
  return a;
}

Architecture reference_architecture() {
  Architecture a;
  a.in_c = 1; a.in_h = 96; a.in_w = 160;
  a.outputs = 4;
  auto conv = [](int ic, int oc, int k, int s, int p) {
    LayerDesc l; l.kind = LayerKind::conv;
    l.in_ch = ic; l.out_ch = oc; l.kernel = k; l.stride = s; l.pad = p;
    l.has_bias = false;
    return l;
  };
  auto bn = [](int ch) {
    LayerDesc l; l.kind = LayerKind::batchnorm; l.in_ch = ch; l.out_ch = ch;
    return l;
  };
  auto relu = [] { LayerDesc l; l.kind = LayerKind::relu; return l; };

  a.layers.push_back(conv(1, 32, 5, 2, 2));
  a.layers.push_back(bn(32));
  a.layers.push_back(relu());
  a.layers.push_back({LayerKind::maxpool});
  const int chans[8][2] = {{32, 32}, {32, 16}, {16, 32}, {32, 64},
                           {64, 64}, {64, 128}, {128, 128}, {0, 0}};
  const int strides[7] = {2, 1, 1, 2, 1, 2, 1};
  for (int i = 0; i < 7; ++i) {
    a.layers.push_back(conv(chans[i][0], chans[i][1], 3, strides[i], 1));
    a.layers.push_back(bn(chans[i][1]));
    a.layers.push_back(relu());
  }
  a.layers.push_back({LayerKind::flatten});
  LayerDesc head;
  head.kind = LayerKind::fc;
  head.in_ch = 1920; head.out_ch = 4; head.has_bias = true;
  a.layers.push_back(head);
  a.finalize();
  return a;
}

std::string strategy_name(Strategy s) {
  switch (s) {
    case Strategy::all: return "all";
    case Strategy::bn: return "bn";
    case Strategy::bias: return "bias";
    case Strategy::fc: return "fc";
  }
  return "?";
}

Strategy strategy_from_name(const std::string& name) {
  if (name == "all") return Strategy::all;
  if (name == "bn") return Strategy::bn;
  if (name == "bias") return Strategy::bias;
  if (name == "fc") return Strategy::fc;
  fail("unknown strategy '" + name + "' (expected all, bn, bias or fc)");
}

ParamStore init_scratch(const Architecture& arch, uint64_t seed) {
  ParamStore store;
  store.layers.resize(arch.layers.size());
  for (size_t i = 0; i < arch.layers.size(); ++i) {
    const LayerDesc& l = arch.layers[i];
    kernels::LayerParams& p = store.layers[i];
    switch (l.kind) {
      case LayerKind::conv: {
        p.weights = Tensor({l.out_ch, l.in_ch, l.kernel, l.kernel});
        const double bound = std::sqrt(6.0 / (l.in_ch * l.kernel * l.kernel));
        rng::Stream s(rng::derive_seed(seed, 0x57, i));
        for (float& v : p.weights.data) v = static_cast<float>(s.uniform(-bound, bound));
        if (l.has_bias) p.bias = Tensor({l.out_ch});
        break;
      }
      case LayerKind::batchnorm:
        p.weights = Tensor({l.in_ch});
        p.bias = Tensor({l.in_ch});
        p.frozen_mean = Tensor({l.in_ch});
        p.frozen_var = Tensor({l.in_ch});
        for (float& v : p.weights.data) v = 1.0f;
        for (float& v : p.frozen_var.data) v = 1.0f;
        p.epsilon = l.epsilon;
        break;
      case LayerKind::fc: {
        p.weights = Tensor({l.out_ch, l.in_ch});
        const double bound = std::sqrt(6.0 / l.in_ch);
        rng::Stream s(rng::derive_seed(seed, 0x57, i));
        for (float& v : p.weights.data) v = static_cast<float>(s.uniform(-bound, bound));
        p.bias = Tensor({l.out_ch});
        break;
      }
      default:
        break;
    }
  }
  return store;
}

namespace {

Tensor apply_layer(const LayerDesc& l, const kernels::LayerParams& p,
                   const Tensor& x, kernels::SignMask* mask_out,
                   kernels::PoolArgmax* arg_out) {
  switch (l.kind) {
    case LayerKind::conv: return kernels::conv2d_fw(x, p, l.stride, l.pad);
    case LayerKind::batchnorm: return kernels::batchnorm_fw(x, p);
    case LayerKind::relu: {
      auto [y, m] = kernels::relu_fw(x);
      if (mask_out) *mask_out = std::move(m);
      return y;
    }
    case LayerKind::maxpool: {
      auto [y, a] = kernels::maxpool2x2_fw(x);
      if (arg_out) *arg_out = std::move(a);
      return y;
    }
    case LayerKind::flatten: {
      Tensor y = x;
      if (y.rank() == 4) y.shape = {y.dim(0), y.numel() / y.dim(0)};
      else y.shape = {y.numel()};
      return y;
    }
    case LayerKind::fc: return kernels::fc_fw(x, p);
  }
  fail("unreachable layer kind");
}

}  // namespace

void calibrate_batchnorm(const Architecture& arch, ParamStore& params,
                         const std::vector<Tensor>& images) {
  if (images.empty()) fail("calibrate_batchnorm: no images");
  std::vector<Tensor> acts = images;
  for (size_t i = 0; i < arch.layers.size(); ++i) {
    const LayerDesc& l = arch.layers[i];
    if (l.kind == LayerKind::fc) break;
    if (l.kind == LayerKind::batchnorm) {
      const int64_t ch = l.in_ch;
      const int64_t plane = acts[0].numel() / ch;
      std::vector<double> mean(static_cast<size_t>(ch), 0.0);
      std::vector<double> var(static_cast<size_t>(ch), 0.0);
      for (const Tensor& t : acts) {
        for (int64_t c = 0; c < ch; ++c) {
          for (int64_t j = 0; j < plane; ++j) {
            mean[static_cast<size_t>(c)] += t.data[static_cast<size_t>(c * plane + j)];
          }
        }
      }
      const double n = static_cast<double>(plane) * static_cast<double>(acts.size());
      for (double& m : mean) m /= n;
      for (const Tensor& t : acts) {
        for (int64_t c = 0; c < ch; ++c) {
          for (int64_t j = 0; j < plane; ++j) {
            const double d = t.data[static_cast<size_t>(c * plane + j)] - mean[static_cast<size_t>(c)];
            var[static_cast<size_t>(c)] += d * d;
          }
        }
      }
      for (int64_t c = 0; c < ch; ++c) {
        params.layers[i].frozen_mean.data[static_cast<size_t>(c)] =
            static_cast<float>(mean[static_cast<size_t>(c)]);
        params.layers[i].frozen_var.data[static_cast<size_t>(c)] =
            static_cast<float>(var[static_cast<size_t>(c)] / n);
      }
    }
    for (Tensor& t : acts) t = apply_layer(l, params.layers[i], t, nullptr, nullptr);
  }
}

TrainMask build_mask(const Architecture& arch, Strategy s) {
  TrainMask m;
  m.slots.assign(arch.layers.size(), {false, false});
  for (size_t i = 0; i < arch.layers.size(); ++i) {
    const LayerDesc& l = arch.layers[i];
    switch (s) {
      case Strategy::all:
        if (l.kind == LayerKind::conv || l.kind == LayerKind::fc) {
          m.slots[i] = {true, l.has_bias};
        } else if (l.kind == LayerKind::batchnorm) {
          m.slots[i] = {true, true};
        }
        break;
      case Strategy::bn:
        if (l.kind == LayerKind::batchnorm) m.slots[i] = {true, true};
        break;
      case Strategy::bias:
        if (l.kind == LayerKind::batchnorm) m.slots[i] = {false, true};
        else if ((l.kind == LayerKind::conv || l.kind == LayerKind::fc) && l.has_bias)
          m.slots[i] = {false, true};
        break;
      case Strategy::fc:
        if (l.kind == LayerKind::fc) m.slots[i] = {true, l.has_bias};
        break;
    }
  }
  for (size_t i = 0; i < m.slots.size(); ++i) {
    if (m.slots[i][0] || m.slots[i][1]) {
      m.earliest_trainable = static_cast<int>(i);
      break;
    }
  }
  return m;
}

int64_t trainable_param_count(const Architecture& arch, Strategy s) {
  const TrainMask m = build_mask(arch, s);
  int64_t count = 0;
  for (size_t i = 0; i < arch.layers.size(); ++i) {
    const LayerDesc& l = arch.layers[i];
    int64_t wsz = 0, bsz = 0;
    if (l.kind == LayerKind::conv) {
      wsz = static_cast<int64_t>(l.out_ch) * l.in_ch * l.kernel * l.kernel;
      bsz = l.has_bias ? l.out_ch : 0;
    } else if (l.kind == LayerKind::batchnorm) {
      wsz = l.in_ch; bsz = l.in_ch;
    } else if (l.kind == LayerKind::fc) {
      wsz = static_cast<int64_t>(l.out_ch) * l.in_ch;
      bsz = l.has_bias ? l.out_ch : 0;
    }
    if (m.slots[i][0]) count += wsz;
    if (m.slots[i][1]) count += bsz;
  }
  return count;
}

GradStore make_grads(const Architecture& arch) {
  GradStore g;
  g.layers.resize(arch.layers.size());
  for (size_t i = 0; i < arch.layers.size(); ++i) {
    const LayerDesc& l = arch.layers[i];
    if (l.kind == LayerKind::conv) {
      g.layers[i].weights = Tensor({l.out_ch, l.in_ch, l.kernel, l.kernel});
      if (l.has_bias) g.layers[i].bias = Tensor({l.out_ch});
    } else if (l.kind == LayerKind::batchnorm) {
      g.layers[i].weights = Tensor({l.in_ch});
      g.layers[i].bias = Tensor({l.in_ch});
    } else if (l.kind == LayerKind::fc) {
      g.layers[i].weights = Tensor({l.out_ch, l.in_ch});
      if (l.has_bias) g.layers[i].bias = Tensor({l.out_ch});
    }
  }
  return g;
}

void GradStore::zero() {
  for (kernels::LayerParams& l : layers) {
    std::fill(l.weights.data.begin(), l.weights.data.end(), 0.0f);
    std::fill(l.bias.data.begin(), l.bias.data.end(), 0.0f);
  }
}

int64_t ActivationCache::activation_byte_size() const {
  int64_t bytes = 0;
  for (const Tensor& t : inputs) bytes += t.numel() * 4;
  for (const kernels::SignMask& m : masks) bytes += m.byte_size();
  return bytes;
}

int64_t ActivationCache::routing_byte_size() const {
  return pool_arg.byte_size();
}

namespace {

Tensor run_layers(const Architecture& arch, const ParamStore& params,
                  const Tensor& image, ActivationCache* cache, size_t stop_at) {
  Tensor cur = image;
  for (size_t i = 0; i < stop_at; ++i) {
    const LayerDesc& l = arch.layers[i];
    if (cache) {
      const Strategy s = cache->strategy;
      const bool want_input =
          (s == Strategy::all &&
           (l.kind == LayerKind::conv || l.kind == LayerKind::fc)) ||
          ((s == Strategy::all || s == Strategy::bn) && l.kind == LayerKind::batchnorm);
      if (want_input) cache->inputs[i] = cur;
    }
    kernels::SignMask mask;
    kernels::PoolArgmax arg;
    cur = apply_layer(l, params.layers[i], cur,
                      cache ? &mask : nullptr, cache ? &arg : nullptr);
    if (cache) {
      if (l.kind == LayerKind::relu && cache->strategy == Strategy::bias) {
        cache->masks[i] = std::move(mask);
      }
      if (l.kind == LayerKind::maxpool && cache->strategy != Strategy::fc) {
        cache->pool_arg = std::move(arg);
      }
    }
  }
  return cur;
}

}  // namespace

Tensor infer(const Architecture& arch, const ParamStore& params,
             const Tensor& image) {
  Tensor cur = image;
  for (size_t i = 0; i < arch.layers.size(); ++i) {
    cur = apply_layer(arch.layers[i], params.layers[i], cur, nullptr, nullptr);
  }
  return cur;
}

ForwardResult forward(const Architecture& arch, const ParamStore& params,
                      const Tensor& image, Strategy strategy) {
  if (image.rank() != 3) fail("forward: expected one (C,H,W) image");
  ForwardResult r;
  r.cache.strategy = strategy;
  r.cache.inputs.resize(arch.layers.size());
  r.cache.masks.resize(arch.layers.size());
  r.output = run_layers(arch, params, image, &r.cache, arch.layers.size());
  return r;
}

Tensor extract_features(const Architecture& arch, const ParamStore& params,
                        const Tensor& image) {
  return run_layers(arch, params, image, nullptr, arch.layers.size() - 1);
}

std::pair<std::vector<quant::QuantizedTensor>, quant::QuantParams>
precompute_features(const Architecture& arch, const ParamStore& params,
                    const std::vector<Tensor>& images) {
  std::vector<Tensor> feats;
  feats.reserve(images.size());
  Tensor joined({static_cast<int64_t>(images.size()), arch.feature_dim});
  for (size_t i = 0; i < images.size(); ++i) {
    feats.push_back(extract_features(arch, params, images[i]));
    std::memcpy(joined.ptr() + static_cast<int64_t>(i) * arch.feature_dim,
                feats.back().ptr(), sizeof(float) * static_cast<size_t>(arch.feature_dim));
  }
  const quant::QuantParams qp = quant::calibrate(joined);
  std::vector<quant::QuantizedTensor> out;
  out.reserve(feats.size());
  for (const Tensor& f : feats) out.push_back(quant::quantize(f, qp));
  return {std::move(out), qp};
}

Tensor forward_from_features(const Architecture&, const ParamStore& params,
                             const Tensor& features) {
  return kernels::fc_fw(features, params.layers.back());
}

void backward_from_features(const Architecture& arch, const Tensor& features,
                            const Tensor& dout, GradStore& grads) {
  auto [dw, db] = kernels::fc_bw_wg(features, dout);
  kernels::LayerParams& g = grads.layers[arch.layers.size() - 1];
  for (int64_t i = 0; i < dw.numel(); ++i) g.weights.data[static_cast<size_t>(i)] += dw.data[static_cast<size_t>(i)];
  for (int64_t i = 0; i < db.numel(); ++i) g.bias.data[static_cast<size_t>(i)] += db.data[static_cast<size_t>(i)];
}

namespace {

void add_into(Tensor& dst, const Tensor& src) {
  for (int64_t i = 0; i < src.numel(); ++i) {
    dst.data[static_cast<size_t>(i)] += src.data[static_cast<size_t>(i)];
  }
}

kernels::SignMask mask_from_positive(const Tensor& t) {
  kernels::SignMask m;
  m.resize(t.numel());
  for (int64_t i = 0; i < t.numel(); ++i) {
    if (t.data[static_cast<size_t>(i)] > 0.0f) m.set(i);
  }
  return m;
}

// Tensor holding layer i's forward output inside the cache of strategy
// `all`, found at the stored input of the consumer layer.
const Tensor* stored_output(const Architecture& arch,
                            const ActivationCache& cache, size_t i) {
  if (i + 1 < arch.layers.size()) {
    const LayerKind next = arch.layers[i + 1].kind;
    if (next == LayerKind::conv || next == LayerKind::batchnorm) {
      const Tensor& t = cache.inputs[i + 1];
      return t.numel() ? &t : nullptr;
    }
    if (next == LayerKind::flatten && i + 2 < arch.layers.size()) {
      const Tensor& t = cache.inputs[i + 2];
      return t.numel() ? &t : nullptr;
    }
  }
  return nullptr;
}

}  // namespace

void backward(const Architecture& arch, const ParamStore& params,
              const ActivationCache& cache, const Tensor& dout,
              GradStore& grads) {
  if (cache.strategy == Strategy::fc) {
    fail("backward: fc strategy trains from features, use backward_from_features");
  }
  const TrainMask tm = build_mask(arch, cache.strategy);
  if (!tm.any()) fail("backward: no trainable tensors under this strategy");
  const size_t earliest = static_cast<size_t>(tm.earliest_trainable);

  Tensor g = dout;
  bool relu_already_applied = false;
  for (size_t j = arch.layers.size(); j-- > 0;) {
    const LayerDesc& l = arch.layers[j];
    const kernels::LayerParams& p = params.layers[j];
    const bool want_w = tm.slots[j][0];
    const bool want_b = tm.slots[j][1];
    switch (l.kind) {
      case LayerKind::fc: {
        if (want_w) {
          auto [dw, db] = kernels::fc_bw_wg(cache.inputs[j], g);
          add_into(grads.layers[j].weights, dw);
          if (want_b) add_into(grads.layers[j].bias, db);
        } else if (want_b) {
          add_into(grads.layers[j].bias, g);  // dB = dy, no input needed
        }
        if (j > earliest) g = kernels::fc_bw_ig(g, p);
        break;
      }
      case LayerKind::flatten:
        g.shape = arch.in_shape[j];
        break;
      case LayerKind::relu: {
        if (relu_already_applied) {
          relu_already_applied = false;
          break;
        }
        if (cache.strategy == Strategy::bias) {
          g = kernels::relu_bw(g, cache.masks[j]);
        } else if (cache.strategy == Strategy::all) {
          const Tensor* out = stored_output(arch, cache, j);
          if (!out) fail("backward: relu output not reachable in cache");
          g = kernels::relu_bw(g, mask_from_positive(*out));
        } else {
          // bn strategy: re-apply the frozen affine to the stored batchnorm
          // input; the sign of the result is the forward relu mask.
          if (j == 0 || arch.layers[j - 1].kind != LayerKind::batchnorm) {
            fail("backward: cannot reconstruct relu mask without batchnorm");
          }
          const Tensor re = kernels::batchnorm_fw(cache.inputs[j - 1], params.layers[j - 1]);
          g = kernels::relu_bw(g, mask_from_positive(re));
        }
        break;
      }
      case LayerKind::maxpool: {
        // For strategy `all` the pre-pool relu output is not retained, but
        // the pooled values are: gate at the pooled level (only winning
        // cells receive gradient, and their relu state equals the sign of
        // the pooled value), then scatter.
        if (cache.strategy == Strategy::all && j > 0 &&
            arch.layers[j - 1].kind == LayerKind::relu) {
          const Tensor* out = stored_output(arch, cache, j);
          if (!out) fail("backward: pool output not reachable in cache");
          g = kernels::relu_bw(g, mask_from_positive(*out));
          relu_already_applied = true;
        }
        g = kernels::maxpool2x2_bw(g, cache.pool_arg);
        break;
      }
      case LayerKind::batchnorm: {
        if (want_w) {
          auto [dg, db] = kernels::batchnorm_bw_wg(cache.inputs[j], g, p);
          add_into(grads.layers[j].weights, dg);
          if (want_b) add_into(grads.layers[j].bias, db);
        } else if (want_b) {
          // Beta gradient is a plain per-channel sum, no multiplies needed.
          const int64_t ch = l.in_ch;
          const int64_t plane = g.numel() / ch;
          for (int64_t c = 0; c < ch; ++c) {
            float acc = 0.0f;
            const float* gp = g.ptr() + c * plane;
            for (int64_t t = 0; t < plane; ++t) acc += gp[t];
            grads.layers[j].bias.data[static_cast<size_t>(c)] += acc;
          }
        }
        if (j > earliest) g = kernels::batchnorm_bw_ig(g, p);
        break;
      }
      case LayerKind::conv: {
        if (want_w) {
          auto [dw, db] = kernels::conv2d_bw_wg(cache.inputs[j], g, l.stride,
                                                l.pad, l.kernel);
          add_into(grads.layers[j].weights, dw);
          if (want_b) add_into(grads.layers[j].bias, db);
        } else if (want_b) {
          const int64_t ch = l.out_ch;
          const int64_t plane = g.numel() / ch;
          for (int64_t c = 0; c < ch; ++c) {
            float acc = 0.0f;
            const float* gp = g.ptr() + c * plane;
            for (int64_t t = 0; t < plane; ++t) acc += gp[t];
            grads.layers[j].bias.data[static_cast<size_t>(c)] += acc;
          }
        }
        if (j > earliest) {
          g = kernels::conv2d_bw_ig(g, p, l.stride, l.pad, arch.in_shape[j]);
        }
        break;
      }
    }
    if (j == earliest) break;
  }
}

// ---- checkpoints ----

namespace {

constexpr char kMagic[4] = {'T', 'T', 'C', 'K'};
constexpr uint16_t kVersion = 1;

enum class Slot { weights, bias, mean, var };

// Every parameter tensor in serialization order. `trainable` marks tensors
// that fine-tuning can touch (and that int8 files quantize).
template <typename Fn>
void for_each_param(const Architecture& arch, Fn&& fn) {
  for (size_t i = 0; i < arch.layers.size(); ++i) {
    const LayerDesc& l = arch.layers[i];
    if (l.kind == LayerKind::conv || l.kind == LayerKind::fc) {
      fn(i, Slot::weights, true);
      if (l.has_bias) fn(i, Slot::bias, true);
    } else if (l.kind == LayerKind::batchnorm) {
      fn(i, Slot::weights, true);
      fn(i, Slot::bias, true);
      fn(i, Slot::mean, false);
      fn(i, Slot::var, false);
    }
  }
}

Tensor& slot_tensor(kernels::LayerParams& p, Slot s) {
  switch (s) {
    case Slot::weights: return p.weights;
    case Slot::bias: return p.bias;
    case Slot::mean: return p.frozen_mean;
    case Slot::var: return p.frozen_var;
  }
  throw std::logic_error("bad slot");
}

const Tensor& slot_tensor(const kernels::LayerParams& p, Slot s) {
  return slot_tensor(const_cast<kernels::LayerParams&>(p), s);
}

void put_bytes(std::ofstream& f, const void* p, size_t n) {
  f.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

template <typename T>
void put(std::ofstream& f, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  put_bytes(f, &v, sizeof(T));  // little-endian host assumed and documented
}

void get_bytes(std::ifstream& f, void* p, size_t n) {
  f.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (!f) throw std::runtime_error("checkpoint: truncated file");
}

template <typename T>
T get(std::ifstream& f) {
  T v;
  get_bytes(f, &v, sizeof(T));
  return v;
}

void write_header(std::ofstream& f, const Architecture& arch, uint8_t format) {
  put_bytes(f, kMagic, 4);
  put(f, kVersion);
  put(f, format);
  const std::string j = arch.to_json();
  put(f, static_cast<uint32_t>(j.size()));
  put_bytes(f, j.data(), j.size());
}

}  // namespace

void save_checkpoint_f32(const std::string& path, const Architecture& arch,
                         const ParamStore& params) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
  write_header(f, arch, 0);
  for_each_param(arch, [&](size_t i, Slot s, bool) {
    const Tensor& t = slot_tensor(params.layers[i], s);
    put(f, static_cast<uint8_t>(0));
    put_bytes(f, t.data.data(), t.data.size() * sizeof(float));
  });
  if (!f) throw std::runtime_error("checkpoint: write failed for " + path);
}

quant::SaturationReport save_checkpoint_int8(
    const std::string& path, const Architecture& arch, const ParamStore& params,
    const std::vector<quant::QuantParams>& qps) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
  write_header(f, arch, 1);
  quant::SaturationReport report;
  size_t qi = 0;
  for_each_param(arch, [&](size_t i, Slot s, bool trainable) {
    const Tensor& t = slot_tensor(params.layers[i], s);
    if (!trainable) {
      put(f, static_cast<uint8_t>(0));
      put_bytes(f, t.data.data(), t.data.size() * sizeof(float));
      return;
    }
    const quant::QuantParams qp = qps.empty() ? quant::calibrate(t) : qps.at(qi);
    ++qi;
    const quant::QuantizedTensor q = quant::quantize_with_report(t, qp, report);
    put(f, static_cast<uint8_t>(1));
    put(f, qp.scale);
    put(f, qp.zero_point);
    put_bytes(f, q.data.data(), q.data.size());
  });
  if (!f) throw std::runtime_error("checkpoint: write failed for " + path);
  return report;
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("checkpoint: cannot open " + path);
  char magic[4];
  get_bytes(f, magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0) {
    throw std::runtime_error("checkpoint: bad magic in " + path);
  }
  const auto version = get<uint16_t>(f);
  if (version != kVersion) {
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  }
  const auto format = get<uint8_t>(f);
  if (format > 1) throw std::runtime_error("checkpoint: unknown format byte");
  const auto jlen = get<uint32_t>(f);
  std::string jtext(jlen, '\0');
  get_bytes(f, jtext.data(), jlen);

  Checkpoint ck;
  ck.arch = Architecture::from_json(jtext);
  ck.params = init_scratch(ck.arch, 0);
  ck.was_int8 = format == 1;
  for_each_param(ck.arch, [&](size_t i, Slot s, bool) {
    Tensor& t = slot_tensor(ck.params.layers[i], s);
    const auto tag = get<uint8_t>(f);
    if (tag == 0) {
      get_bytes(f, t.data.data(), t.data.size() * sizeof(float));
    } else if (tag == 1) {
      quant::QuantizedTensor q;
      q.shape = t.shape;
      q.qp.scale = get<float>(f);
      q.qp.zero_point = get<int32_t>(f);
      q.data.resize(t.data.size());
      get_bytes(f, q.data.data(), q.data.size());
      t = quant::dequantize(q);
      ck.qparams.push_back(q.qp);
    } else {
      throw std::runtime_error("checkpoint: unknown tensor tag");
    }
  });
  return ck;
}

std::vector<quant::QuantParams> calibrate_trainable(const Architecture& arch,
                                                    const ParamStore& params) {
  std::vector<quant::QuantParams> out;
  for_each_param(arch, [&](size_t i, Slot s, bool trainable) {
    if (!trainable) return;
    out.push_back(quant::calibrate(slot_tensor(params.layers[i], s)));
  });
  return out;
}

}  // namespace tinyft::model
