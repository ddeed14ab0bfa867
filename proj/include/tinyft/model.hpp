#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "tinyft/kernels.hpp"
#include "tinyft/quantization.hpp"
#include "tinyft/tensor.hpp"

namespace tinyft::model {

enum class LayerKind { conv, batchnorm, relu, maxpool, flatten, fc };

struct LayerDesc {
  LayerKind kind = LayerKind::relu;
  int in_ch = 0, out_ch = 0;
  int kernel = 0, stride = 1, pad = 0;
  bool has_bias = false;
  float epsilon = 1e-5f;
};

struct Architecture {
  int in_c = 0, in_h = 0, in_w = 0;
  int outputs = 0;
  std::vector<LayerDesc> layers;

  // Filled by finalize(): activation shape entering / leaving each layer,
  // (C,H,W) until flatten, (N,) style single dimension afterwards.
  std::vector<std::vector<int64_t>> in_shape, out_shape;
  int64_t feature_dim = 0;  // flatten output size feeding the fc head

  void finalize();  // throws std::invalid_argument on inconsistent wiring

  std::string to_json() const;  // canonical descriptor, keys sorted
  static Architecture from_json(const std::string& text);
};

// The fixed pose-regression backbone: 96x160 grayscale in, 8 conv blocks
// (each conv + frozen batchnorm + relu, convs carry no bias), one 2x2 max
// pool after the first block, and a 1920 -> 4 fully connected head.
Architecture reference_architecture();

enum class Strategy { all, bn, bias, fc };
std::string strategy_name(Strategy s);
Strategy strategy_from_name(const std::string& name);

struct ParamStore {
  // Aligned with Architecture::layers; entries for relu/pool/flatten stay
  // empty. Batchnorm keeps gamma in weights and beta in bias.
  std::vector<kernels::LayerParams> layers;
};

// Kaiming-style uniform init, bound sqrt(6 / fan_in); batchnorm starts at
// gamma 1, beta 0 with unit frozen statistics.
ParamStore init_scratch(const Architecture& arch, uint64_t seed);

// Runs `images` through the net layer by layer and freezes each batchnorm's
// statistics to the empirical per-channel mean/variance of its input. Used
// once before scratch training; fine-tuning never touches the statistics.
void calibrate_batchnorm(const Architecture& arch, ParamStore& params,
                         const std::vector<Tensor>& images);

// Which of (weights, bias) are trainable per layer under a strategy.
struct TrainMask {
  std::vector<std::array<bool, 2>> slots;
  int earliest_trainable = -1;
  bool any() const { return earliest_trainable >= 0; }
};

TrainMask build_mask(const Architecture& arch, Strategy s);

int64_t trainable_param_count(const Architecture& arch, Strategy s);

// Gradient buffers mirroring the trainable tensors.
struct GradStore {
  std::vector<kernels::LayerParams> layers;  // weights -> dW, bias -> dB
  void zero();
};

GradStore make_grads(const Architecture& arch);

// Tensors retained by forward for the active strategy's backward pass:
//  - all:  inputs of every conv and of the fc head (the f32 image included)
//          plus every conv output (the batchnorm inputs)
//  - bn:   conv outputs only; relu masks are reconstructed by re-applying
//          the frozen batchnorm affine to them during backward
//  - bias: 1-bit relu sign masks only
//  - fc:   nothing (training runs from precomputed features)
// Pool argmax codes are tracked separately as routing state.
struct ActivationCache {
  Strategy strategy = Strategy::all;
  std::vector<Tensor> inputs;              // per layer, possibly empty
  std::vector<kernels::SignMask> masks;    // per layer, bias strategy only
  kernels::PoolArgmax pool_arg;

  int64_t activation_byte_size() const;
  int64_t routing_byte_size() const;
};

struct ForwardResult {
  Tensor output;                 // (outputs) or (N, outputs)
  ActivationCache cache;
};

// Inference only, retains nothing.
Tensor infer(const Architecture& arch, const ParamStore& params,
             const Tensor& image);

// Forward pass retaining what `strategy`'s backward needs. Accepts a single
// (C,H,W) image; training walks samples one at a time, which is also what
// the per-frame memory accounting describes.
ForwardResult forward(const Architecture& arch, const ParamStore& params,
                      const Tensor& image, Strategy strategy);

// Backpropagates d(loss)/d(output) and accumulates gradients of the masked
// tensors into `grads`. The input-gradient chain stops right after the
// earliest trainable layer; with strategy fc the backbone is never entered.
void backward(const Architecture& arch, const ParamStore& params,
              const ActivationCache& cache, const Tensor& dout,
              GradStore& grads);

// Backbone output before the fc head, used for the fc-only pipeline.
Tensor extract_features(const Architecture& arch, const ParamStore& params,
                        const Tensor& image);

// Features for a whole set of images, quantized with one shared calibration.
std::pair<std::vector<quant::QuantizedTensor>, quant::QuantParams>
precompute_features(const Architecture& arch, const ParamStore& params,
                    const std::vector<Tensor>& images);

// fc-strategy forward/backward from a dequantized feature vector.
Tensor forward_from_features(const Architecture& arch, const ParamStore& params,
                             const Tensor& features);
void backward_from_features(const Architecture& arch, const Tensor& features,
                            const Tensor& dout, GradStore& grads);

// ---- checkpoints ----
// Binary container, little endian: magic "TTCK", u16 version, u8 format
// (0 = f32, 1 = int8), u32 descriptor length, canonical JSON descriptor,
// then every parameter tensor in layer order (conv W; batchnorm gamma,
// beta, mean, var; fc W, B). f32 files store raw floats. int8 files store
// trainable tensors as (f32 scale, i32 zero_point, i8 payload) and keep the
// frozen statistics in f32.

struct Checkpoint {
  Architecture arch;
  ParamStore params;
  bool was_int8 = false;
  // Per trainable tensor, in serialization order; present when was_int8.
  std::vector<quant::QuantParams> qparams;
};

void save_checkpoint_f32(const std::string& path, const Architecture& arch,
                         const ParamStore& params);

// Quantizes trainable tensors with the given parameters (calibrated per
// tensor when `qps` is empty) and reports saturation.
quant::SaturationReport save_checkpoint_int8(
    const std::string& path, const Architecture& arch, const ParamStore& params,
    const std::vector<quant::QuantParams>& qps);

Checkpoint load_checkpoint(const std::string& path);

// Calibration of every trainable tensor in serialization order.
std::vector<quant::QuantParams> calibrate_trainable(const Architecture& arch,
                                                    const ParamStore& params);

}  // namespace tinyft::model
