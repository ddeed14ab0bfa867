#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tinyft/geometry.hpp"
#include "tinyft/losses.hpp"
#include "tinyft/model.hpp"
#include "tinyft/rng.hpp"
#include "tinyft/simworld.hpp"

namespace tinyft::trainer {

using geometry::Pose4;

// Photometric augmentation magnitudes. Implementation defaults, not tuned
// constants; ranges are symmetric around the identity where meaningful.
struct PhotoConfig {
  double exposure_lo = 0.7, exposure_hi = 1.3;
  double contrast_lo = 0.8, contrast_hi = 1.2;
  double noise_sigma = 8.0;  // max gaussian sigma, gray levels
  int blur_kernel = 3;       // box blur size drawn from {1, blur_kernel}
  double vignette = 0.3;     // max corner attenuation
};

struct TrainConfig {
  double learning_rate = 1e-2;
  int epochs = 5;
  int batch_size = 32;
  int batches_per_epoch = 16;
  model::Strategy strategy = model::Strategy::all;
  losses::SupervisionRegime regime;  // see simworld::make_supervision
  uint64_t seed = 0;
  bool augment_photometric = true;
  bool augment_hflip = true;
  bool augment_time_reversal = true;
  // Global L2 cap on each batch gradient over the trainable tensors;
  // <= 0 disables. The default sits above any batch norm seen in healthy
  // runs and only binds on outliers, e.g. a batch holding one rare label
  // whose 1/n_task scaling would otherwise kick the weights hard.
  double clip_grad_norm = 150.0;
  PhotoConfig photo;
};

struct EpochStats {
  int epoch = 0;  // 1-based
  double task_loss = 0.0;
  double sc_loss = 0.0;
  double total = 0.0;
};

struct TrainResult {
  model::ParamStore params;
  std::vector<EpochStats> trace;
};

// One JSON record per epoch, newline separated:
// {"epoch":1,"task_loss":...,"sc_loss":...,"total":...}
std::string trace_to_json(const std::vector<EpochStats>& trace);

// W <- W - lr * dW for every masked tensor; unmasked tensors stay
// bit-identical; all gradient buffers are zeroed afterwards.
void sgd_step(model::ParamStore& params, model::GradStore& grads,
              const model::TrainMask& mask, double lr);

// Scales the masked gradient tensors so their global L2 norm is at most
// max_norm; unmasked tensors are untouched. Returns the pre-clip norm.
double clip_gradients(model::GradStore& grads, const model::TrainMask& mask,
                      double max_norm);

// Materializes the regime's sc pairs against a dataset: partner j sits
// regime.dt seconds after anchor i, drone odometry comes from the stored
// estimates, subject motion from the stored poses or the identity under
// unknown-still. Throws std::invalid_argument on regime/dataset mismatch.
std::vector<losses::PairSample> resolve_pairs(
    const simworld::Dataset& ds, const losses::SupervisionRegime& regime);

// Mirror about the optical axis: columns reversed, (x,y,z,phi) mapped to
// (x,-y,z,-phi). The pose map is its own inverse and commutes with compose
// and invert, so applying it to every pose in a pair keeps the pair
// geometrically consistent.
void hflip_image(std::vector<uint8_t>& image, int height, int width);
Pose4 hflip_pose(const Pose4& p);

// With probability 0.5 flips the image and maps the label and stored pose
// estimates; returns whether the flip fired.
bool augment_hflip(simworld::Sample& sample, rng::Stream& rng);

// With probability 0.5 swaps the pair and inverts both relative motions;
// returns whether the reversal fired.
bool augment_time_reversal(losses::PairSample& pair, rng::Stream& rng);

// Exposure and contrast scaling, gaussian pixel noise, box blur, and a
// radial vignette, each applied with independent probability 0.5. The
// pipeline runs in f32 and rounds back to u8 once, clamped to [0,255].
std::vector<uint8_t> augment_photometric(const std::vector<uint8_t>& image,
                                         int height, int width,
                                         const PhotoConfig& cfg,
                                         rng::Stream& rng);

// Runs cfg.epochs x batches of forward, loss, backward, and one SGD step
// per batch on the batch-mean gradient. Shuffling is a pure function of
// (seed, epoch); augmentation draws are keyed by (seed, epoch, entry) so a
// duplicated entry contributes an identical gradient. Strategy fc trains
// from features precomputed once through the frozen int8-quantized
// backbone, so image-space augmentation is skipped there (time reversal
// still applies; it only touches motions and pair order). Returns the
// final-epoch parameters, never an earlier checkpoint.
TrainResult fine_tune(const model::Architecture& arch,
                      const model::ParamStore& start,
                      const simworld::Dataset& ds, const TrainConfig& cfg);

}  // namespace tinyft::trainer
