#include "tinyft/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <utility>

#include <json.hpp>
#include "tinyft/quantization.hpp"

namespace tinyft::trainer {

namespace {

constexpr uint64_t kShuffleTag = 0x53485546;  // shuffle order
constexpr uint64_t kAugTaskTag = 0x41554754;  // task-entry augmentation
constexpr uint64_t kAugPairTag = 0x41554750;  // pair-entry augmentation

[[noreturn]] void fail(const std::string& msg) {
  throw std::invalid_argument("trainer: " + msg);
}

// A training entry is one labeled sample or one consistency pair.
struct Entry {
  int task = -1;
  int pair = -1;
};

Pose4 pose_from(const Tensor& out) {
  return Pose4{out.data[0], out.data[1], out.data[2], out.data[3]};
}

Tensor scaled_dout(const std::array<double, 4>& g, double scale) {
  Tensor t({4});
  for (int c = 0; c < 4; ++c)
    t.data[c] = static_cast<float>(g[c] * scale);
  return t;
}

Tensor scaled_dout(const Pose4& g, double scale) {
  return scaled_dout(std::array<double, 4>{g.x, g.y, g.z, g.phi}, scale);
}

void step_tensor(Tensor& w, const Tensor& g, float lr) {
  if (w.data.size() != g.data.size()) fail("gradient/parameter size mismatch");
  for (size_t i = 0; i < w.data.size(); ++i) w.data[i] -= lr * g.data[i];
}

}  // namespace

std::string trace_to_json(const std::vector<EpochStats>& trace) {
  std::string out;
  for (const EpochStats& st : trace) {
    nlohmann::json j;
    j["epoch"] = st.epoch;
    j["task_loss"] = st.task_loss;
    j["sc_loss"] = st.sc_loss;
    j["total"] = st.total;
    out += j.dump();
    out += '\n';
  }
  return out;
}

double clip_gradients(model::GradStore& grads, const model::TrainMask& mask,
                      double max_norm) {
  if (grads.layers.size() != mask.slots.size())
    fail("gradient and mask layer counts differ");
  double acc = 0.0;
  for (size_t l = 0; l < grads.layers.size(); ++l)
    for (int slot = 0; slot < 2; ++slot) {
      if (!mask.slots[l][slot]) continue;
      const Tensor& t =
          slot == 0 ? grads.layers[l].weights : grads.layers[l].bias;
      for (float v : t.data) acc += static_cast<double>(v) * v;
    }
  const double norm = std::sqrt(acc);
  if (max_norm > 0.0 && norm > max_norm) {
    const float factor = static_cast<float>(max_norm / norm);
    for (size_t l = 0; l < grads.layers.size(); ++l)
      for (int slot = 0; slot < 2; ++slot) {
        if (!mask.slots[l][slot]) continue;
        Tensor& t = slot == 0 ? grads.layers[l].weights : grads.layers[l].bias;
        for (float& v : t.data) v *= factor;
      }
  }
  return norm;
}

void sgd_step(model::ParamStore& params, model::GradStore& grads,
              const model::TrainMask& mask, double lr) {
  if (params.layers.size() != grads.layers.size() ||
      params.layers.size() != mask.slots.size())
    fail("parameter, gradient, and mask layer counts differ");
  const float lrf = static_cast<float>(lr);
  for (size_t l = 0; l < params.layers.size(); ++l) {
    if (mask.slots[l][0])
      step_tensor(params.layers[l].weights, grads.layers[l].weights, lrf);
    if (mask.slots[l][1])
      step_tensor(params.layers[l].bias, grads.layers[l].bias, lrf);
  }
  grads.zero();
}

std::vector<losses::PairSample> resolve_pairs(
    const simworld::Dataset& ds, const losses::SupervisionRegime& regime) {
  std::vector<losses::PairSample> pairs;
  if (regime.sc_set.empty()) return pairs;
  const double period = 1.0 / ds.rate_hz;
  const int offset = static_cast<int>(std::lround(regime.dt / period));
  if (offset < 1 || std::abs(offset * period - regime.dt) > 1e-9)
    fail("regime dt is not a positive multiple of the sampling period");

  const int n = static_cast<int>(ds.samples.size());
  const bool still = regime.subject_mode == losses::SubjectMode::unknown_still;
  pairs.reserve(regime.sc_set.size());
  for (int i : regime.sc_set) {
    const int j = i + offset;
    if (i < 0 || j >= n) fail("sc pair outside the dataset");
    const simworld::Sample& a = ds.samples[i];
    const simworld::Sample& b = ds.samples[j];
    if (!a.odom_valid || !b.odom_valid)
      fail("sc pair without stored odometry");
    losses::PairSample p;
    p.i = i;
    p.j = j;
    p.drone_odom = geometry::compose(geometry::invert(a.odom), b.odom);
    if (still) {
      p.subject_motion = Pose4{};
    } else {
      if (!a.subject_valid || !b.subject_valid)
        fail("sc pair without stored subject motion");
      p.subject_motion =
          geometry::compose(geometry::invert(a.subject), b.subject);
    }
    pairs.push_back(p);
  }
  return pairs;
}

void hflip_image(std::vector<uint8_t>& image, int height, int width) {
  if (image.size() != static_cast<size_t>(height) * width)
    fail("image size does not match height * width");
  for (int r = 0; r < height; ++r)
    std::reverse(image.begin() + static_cast<size_t>(r) * width,
                 image.begin() + static_cast<size_t>(r + 1) * width);
}

Pose4 hflip_pose(const Pose4& p) {
  return Pose4{p.x, -p.y, p.z, geometry::wrap_angle(-p.phi)};
}

bool augment_hflip(simworld::Sample& sample, rng::Stream& rng) {
  if (!rng.bernoulli(0.5)) return false;
  hflip_image(sample.image, simworld::kImageHeight, simworld::kImageWidth);
  sample.label = hflip_pose(sample.label);
  sample.odom = hflip_pose(sample.odom);
  sample.subject = hflip_pose(sample.subject);
  sample.true_relative = hflip_pose(sample.true_relative);
  return true;
}

bool augment_time_reversal(losses::PairSample& pair, rng::Stream& rng) {
  if (!rng.bernoulli(0.5)) return false;
  std::swap(pair.i, pair.j);
  pair.drone_odom = geometry::invert(pair.drone_odom);
  pair.subject_motion = geometry::invert(pair.subject_motion);
  return true;
}

std::vector<uint8_t> augment_photometric(const std::vector<uint8_t>& image,
                                         int height, int width,
                                         const PhotoConfig& cfg,
                                         rng::Stream& rng) {
  const size_t n = static_cast<size_t>(height) * width;
  if (image.size() != n) fail("image size does not match height * width");
  std::vector<float> buf(image.begin(), image.end());

  if (rng.bernoulli(0.5)) {
    const float g = static_cast<float>(
        rng.uniform(cfg.exposure_lo, cfg.exposure_hi));
    for (float& v : buf) v *= g;
  }
  if (rng.bernoulli(0.5)) {
    const float c = static_cast<float>(
        rng.uniform(cfg.contrast_lo, cfg.contrast_hi));
    for (float& v : buf) v = (v - 128.0f) * c + 128.0f;
  }
  if (rng.bernoulli(0.5)) {
    const double sigma = rng.uniform(0.0, cfg.noise_sigma);
    for (float& v : buf) v += static_cast<float>(rng.normal(0.0, sigma));
  }
  if (rng.bernoulli(0.5) && cfg.blur_kernel > 1) {
    const int k = rng.bernoulli(0.5) ? 1 : cfg.blur_kernel;
    if (k > 1) {
      const int half = k / 2;
      std::vector<float> src = buf;
      for (int r = 0; r < height; ++r) {
        for (int c = 0; c < width; ++c) {
          float acc = 0.0f;
          for (int dr = -half; dr <= half; ++dr) {
            const int rr = std::clamp(r + dr, 0, height - 1);
            for (int dc = -half; dc <= half; ++dc) {
              const int cc = std::clamp(c + dc, 0, width - 1);
              acc += src[static_cast<size_t>(rr) * width + cc];
            }
          }
          buf[static_cast<size_t>(r) * width + c] = acc / (k * k);
        }
      }
    }
  }
  if (rng.bernoulli(0.5)) {
    const double s = rng.uniform(0.0, cfg.vignette);
    const double cx = (width - 1) / 2.0, cy = (height - 1) / 2.0;
    const double inv_r2 = 1.0 / (cx * cx + cy * cy);
    for (int r = 0; r < height; ++r) {
      for (int c = 0; c < width; ++c) {
        const double r2 = ((c - cx) * (c - cx) + (r - cy) * (r - cy)) * inv_r2;
        buf[static_cast<size_t>(r) * width + c] *=
            static_cast<float>(1.0 - s * r2);
      }
    }
  }

  std::vector<uint8_t> out(n);
  for (size_t i = 0; i < n; ++i) {
    const float v = std::nearbyint(buf[i]);
    out[i] = static_cast<uint8_t>(std::clamp(v, 0.0f, 255.0f));
  }
  return out;
}

TrainResult fine_tune(const model::Architecture& arch,
                      const model::ParamStore& start,
                      const simworld::Dataset& ds, const TrainConfig& cfg) {
  if (!(cfg.learning_rate >= 0.0) || !std::isfinite(cfg.learning_rate))
    fail("learning_rate must be finite and nonnegative");
  if (cfg.epochs < 1) fail("epochs must be >= 1");
  if (cfg.batch_size < 1 || cfg.batches_per_epoch < 1)
    fail("batch_size and batches_per_epoch must be >= 1");
  const int n = static_cast<int>(ds.samples.size());
  if (n == 0) fail("empty dataset");
  if (static_cast<int64_t>(cfg.batch_size) * cfg.batches_per_epoch > n)
    fail("batch_size * batches_per_epoch exceeds the dataset size");
  cfg.regime.validate(1.0 / ds.rate_hz);
  for (int idx : cfg.regime.task_set) {
    if (idx < 0 || idx >= n) fail("task index outside the dataset");
    if (!ds.samples[idx].label_valid) fail("task index without a label");
  }

  const std::vector<losses::PairSample> pairs = resolve_pairs(ds, cfg.regime);
  std::vector<Entry> entries;
  entries.reserve(cfg.regime.task_set.size() + pairs.size());
  for (int idx : cfg.regime.task_set) entries.push_back(Entry{idx, -1});
  for (int p = 0; p < static_cast<int>(pairs.size()); ++p)
    entries.push_back(Entry{-1, p});
  if (entries.empty()) fail("regime provides no supervision entries");
  if (static_cast<int>(entries.size()) < cfg.batch_size)
    fail("fewer supervision entries than one batch");

  const bool fc = cfg.strategy == model::Strategy::fc;
  const model::TrainMask mask = model::build_mask(arch, cfg.strategy);
  const double lambda = cfg.regime.lambda_sc;
  const int h = ds.height, w = ds.width;

  TrainResult out;
  out.params = start;
  model::GradStore grads = model::make_grads(arch);

  // fc trains the head on features extracted once through the frozen
  // backbone, quantized the way a deployed checkpoint stores them.
  std::vector<Tensor> features(fc ? n : 0);
  if (fc) {
    std::vector<char> needed(n, 0);
    for (const Entry& en : entries) {
      if (en.task >= 0) {
        needed[en.task] = 1;
      } else {
        needed[pairs[en.pair].i] = 1;
        needed[pairs[en.pair].j] = 1;
      }
    }
    std::vector<int> idxs;
    std::vector<Tensor> imgs;
    for (int i = 0; i < n; ++i) {
      if (!needed[i]) continue;
      idxs.push_back(i);
      imgs.push_back(simworld::to_input(ds.samples[i].image));
    }
    auto [qfeats, qp] = model::precompute_features(arch, out.params, imgs);
    (void)qp;
    for (size_t k = 0; k < idxs.size(); ++k)
      features[idxs[k]] = quant::dequantize(qfeats[k]);
  }

  for (int e = 0; e < cfg.epochs; ++e) {
    std::vector<int> order(entries.size());
    std::iota(order.begin(), order.end(), 0);
    rng::Stream shuf(rng::derive_seed(cfg.seed, kShuffleTag,
                                      static_cast<uint64_t>(e)));
    rng::shuffle(order, shuf);

    const int batches = std::min<int64_t>(
        cfg.batches_per_epoch,
        static_cast<int64_t>(order.size()) / cfg.batch_size);
    double task_sum = 0.0, sc_sum = 0.0;

    for (int b = 0; b < batches; ++b) {
      const int base = b * cfg.batch_size;
      // The batch loss is mean(task) + lambda * mean(sc), so each slot's
      // output gradient carries 1/count of its own set.
      int n_task = 0, n_pair = 0;
      for (int k = 0; k < cfg.batch_size; ++k)
        (entries[order[base + k]].task >= 0 ? n_task : n_pair) += 1;

      double btask = 0.0, bsc = 0.0;
      for (int k = 0; k < cfg.batch_size; ++k) {
        const Entry& en = entries[order[base + k]];
        if (en.task >= 0) {
          const simworld::Sample& s = ds.samples[en.task];
          Pose4 label = s.label;
          const double scale = 1.0 / n_task;
          if (fc) {
            const Tensor& feat = features[en.task];
            const Pose4 pred =
                pose_from(model::forward_from_features(arch, out.params, feat));
            btask += geometry::delta(pred, label);
            model::backward_from_features(
                arch, feat,
                scaled_dout(geometry::delta_gradient(pred, label), scale),
                grads);
          } else {
            rng::Stream aug(rng::derive_seed(
                cfg.seed, kAugTaskTag,
                (static_cast<uint64_t>(e) << 32) |
                    static_cast<uint64_t>(en.task)));
            std::vector<uint8_t> img = s.image;
            if (cfg.augment_hflip && aug.bernoulli(0.5)) {
              hflip_image(img, h, w);
              label = hflip_pose(label);
            }
            if (cfg.augment_photometric)
              img = augment_photometric(img, h, w, cfg.photo, aug);
            const model::ForwardResult fr = model::forward(
                arch, out.params, simworld::to_input(img), cfg.strategy);
            const Pose4 pred = pose_from(fr.output);
            btask += geometry::delta(pred, label);
            model::backward(
                arch, out.params, fr.cache,
                scaled_dout(geometry::delta_gradient(pred, label), scale),
                grads);
          }
        } else {
          losses::PairSample p = pairs[en.pair];
          rng::Stream aug(rng::derive_seed(
              cfg.seed, kAugPairTag,
              (static_cast<uint64_t>(e) << 32) |
                  static_cast<uint64_t>(en.pair)));
          if (cfg.augment_time_reversal) augment_time_reversal(p, aug);
          const double scale = lambda / n_pair;
          Pose4 gi, gj;
          if (fc) {
            const Tensor& fa = features[p.i];
            const Tensor& fb = features[p.j];
            const Pose4 pi =
                pose_from(model::forward_from_features(arch, out.params, fa));
            const Pose4 pj =
                pose_from(model::forward_from_features(arch, out.params, fb));
            bsc += losses::sc_pair_term(pi, pj, p.drone_odom,
                                        p.subject_motion, &gi, &gj);
            model::backward_from_features(arch, fa, scaled_dout(gi, scale),
                                          grads);
            model::backward_from_features(arch, fb, scaled_dout(gj, scale),
                                          grads);
          } else {
            std::vector<uint8_t> img_a = ds.samples[p.i].image;
            std::vector<uint8_t> img_b = ds.samples[p.j].image;
            if (cfg.augment_hflip && aug.bernoulli(0.5)) {
              hflip_image(img_a, h, w);
              hflip_image(img_b, h, w);
              p.drone_odom = hflip_pose(p.drone_odom);
              p.subject_motion = hflip_pose(p.subject_motion);
            }
            if (cfg.augment_photometric) {
              img_a = augment_photometric(img_a, h, w, cfg.photo, aug);
              img_b = augment_photometric(img_b, h, w, cfg.photo, aug);
            }
            const model::ForwardResult fa = model::forward(
                arch, out.params, simworld::to_input(img_a), cfg.strategy);
            const model::ForwardResult fb = model::forward(
                arch, out.params, simworld::to_input(img_b), cfg.strategy);
            const Pose4 pi = pose_from(fa.output);
            const Pose4 pj = pose_from(fb.output);
            bsc += losses::sc_pair_term(pi, pj, p.drone_odom,
                                        p.subject_motion, &gi, &gj);
            model::backward(arch, out.params, fa.cache,
                            scaled_dout(gi, scale), grads);
            model::backward(arch, out.params, fb.cache,
                            scaled_dout(gj, scale), grads);
          }
        }
      }
      if (cfg.clip_grad_norm > 0.0)
        clip_gradients(grads, mask, cfg.clip_grad_norm);
      sgd_step(out.params, grads, mask, cfg.learning_rate);
      task_sum += n_task > 0 ? btask / n_task : 0.0;
      sc_sum += n_pair > 0 ? bsc / n_pair : 0.0;
    }

    EpochStats st;
    st.epoch = e + 1;
    st.task_loss = task_sum / batches;
    st.sc_loss = sc_sum / batches;
    st.total = st.task_loss + lambda * st.sc_loss;
    out.trace.push_back(st);
  }
  return out;
}

}  // namespace tinyft::trainer
