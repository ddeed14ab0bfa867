#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <json.hpp>
#include <vector>

#include "tinyft/geometry.hpp"
#include "tinyft/losses.hpp"
#include "tinyft/metrics.hpp"
#include "tinyft/model.hpp"
#include "tinyft/rng.hpp"
#include "tinyft/simworld.hpp"
#include "tinyft/trainer.hpp"

using namespace tinyft;
using geometry::Pose4;

namespace {

simworld::Dataset tiny_dataset(const std::string& regime, double seconds,
                               uint64_t seed) {
  simworld::WorldConfig wc = simworld::source_world();
  wc.duration = seconds;
  const auto traj = simworld::generate_trajectory(wc, seed);
  return simworld::build_dataset(traj, wc, simworld::regime_from_name(regime),
                                 simworld::NoiseModel{}, seed + 1);
}

model::ParamStore scratch_calibrated(const model::Architecture& arch,
                                     const simworld::Dataset& ds,
                                     uint64_t seed) {
  model::ParamStore p = model::init_scratch(arch, seed);
  std::vector<Tensor> imgs;
  const size_t stride = std::max<size_t>(1, ds.samples.size() / 8);
  for (size_t i = 0; i < ds.samples.size(); i += stride)
    imgs.push_back(simworld::to_input(ds.samples[i].image));
  model::calibrate_batchnorm(arch, p, imgs);
  return p;
}

bool bits_equal(const Tensor& a, const Tensor& b) {
  return a.data.size() == b.data.size() &&
         (a.data.empty() ||
          std::memcmp(a.data.data(), b.data.data(),
                      a.data.size() * sizeof(float)) == 0);
}

bool params_equal(const model::ParamStore& a, const model::ParamStore& b) {
  if (a.layers.size() != b.layers.size()) return false;
  for (size_t l = 0; l < a.layers.size(); ++l) {
    if (!bits_equal(a.layers[l].weights, b.layers[l].weights)) return false;
    if (!bits_equal(a.layers[l].bias, b.layers[l].bias)) return false;
  }
  return true;
}

double params_linf(const model::ParamStore& a, const model::ParamStore& b) {
  double worst = 0.0;
  for (size_t l = 0; l < a.layers.size(); ++l) {
    for (int slot = 0; slot < 2; ++slot) {
      const Tensor& ta = slot ? a.layers[l].bias : a.layers[l].weights;
      const Tensor& tb = slot ? b.layers[l].bias : b.layers[l].weights;
      for (size_t i = 0; i < ta.data.size(); ++i)
        worst = std::max(worst, std::abs(double(ta.data[i]) - tb.data[i]));
    }
  }
  return worst;
}

Pose4 random_pose(rng::Stream& s, double range, double yaw) {
  return Pose4{s.uniform(-range, range), s.uniform(-range, range),
               s.uniform(-range / 4, range / 4), s.uniform(-yaw, yaw)};
}

trainer::PhotoConfig neutral_photo() {
  trainer::PhotoConfig p;
  p.exposure_lo = p.exposure_hi = 1.0;
  p.contrast_lo = p.contrast_hi = 1.0;
  p.noise_sigma = 0.0;
  p.blur_kernel = 1;
  p.vignette = 0.0;
  return p;
}

}  // namespace

TEST_CASE("sgd_step arithmetic, masking, and gradient reset") {
  const model::Architecture arch = model::reference_architecture();
  model::ParamStore params = model::init_scratch(arch, 9);
  model::GradStore grads = model::make_grads(arch);
  const int fc = static_cast<int>(arch.layers.size()) - 1;

  SUBCASE("scalar update") {
    params.layers[fc].bias.data[0] = 1.0f;
    grads.layers[fc].bias.data[0] = 0.5f;
    trainer::sgd_step(params, grads, model::build_mask(arch, model::Strategy::fc),
                      0.01);
    CHECK(params.layers[fc].bias.data[0] == doctest::Approx(0.995));
    CHECK(grads.layers[fc].bias.data[0] == 0.0f);
  }

  SUBCASE("lr zero leaves every parameter bit-identical") {
    rng::Stream s(4);
    for (auto& l : grads.layers) {
      for (float& g : l.weights.data) g = float(s.uniform(-1, 1));
      for (float& g : l.bias.data) g = float(s.uniform(-1, 1));
    }
    const model::ParamStore before = params;
    trainer::sgd_step(params, grads,
                      model::build_mask(arch, model::Strategy::all), 0.0);
    CHECK(params_equal(params, before));
    for (const auto& l : grads.layers) {
      for (float g : l.weights.data) CHECK(g == 0.0f);
      for (float g : l.bias.data) CHECK(g == 0.0f);
    }
  }

  SUBCASE("unmasked tensors stay bit-identical under the bn mask") {
    rng::Stream s(5);
    for (auto& l : grads.layers) {
      for (float& g : l.weights.data) g = float(s.uniform(-1, 1));
      for (float& g : l.bias.data) g = float(s.uniform(-1, 1));
    }
    const model::ParamStore before = params;
    const model::TrainMask mask = model::build_mask(arch, model::Strategy::bn);
    trainer::sgd_step(params, grads, mask, 0.01);
    bool any_changed = false;
    for (size_t l = 0; l < params.layers.size(); ++l) {
      if (!mask.slots[l][0])
        CHECK(bits_equal(params.layers[l].weights, before.layers[l].weights));
      if (!mask.slots[l][1])
        CHECK(bits_equal(params.layers[l].bias, before.layers[l].bias));
      if (mask.slots[l][0] &&
          !bits_equal(params.layers[l].weights, before.layers[l].weights))
        any_changed = true;
    }
    CHECK(any_changed);
  }

  SUBCASE("one step on a quadratic descends") {
    // L(b) = (b - 3)^2 on the fc bias, dL/db = 2(b - 3).
    const model::TrainMask mask = model::build_mask(arch, model::Strategy::fc);
    params.layers[fc].bias.data[0] = 0.0f;
    double loss_before = 9.0;
    for (int step = 0; step < 90; ++step) {
      const double b = params.layers[fc].bias.data[0];
      grads.layers[fc].bias.data[0] = float(2.0 * (b - 3.0));
      trainer::sgd_step(params, grads, mask, 0.05);
      const double b2 = params.layers[fc].bias.data[0];
      const double loss = (b2 - 3.0) * (b2 - 3.0);
      CHECK(loss < loss_before);
      loss_before = loss;
    }
    CHECK(params.layers[fc].bias.data[0] == doctest::Approx(3.0).epsilon(1e-3));
  }
}

TEST_CASE("clip_gradients caps the masked norm and preserves direction") {
  const model::Architecture arch = model::reference_architecture();
  model::GradStore grads = model::make_grads(arch);
  rng::Stream s(21);
  for (auto& l : grads.layers) {
    for (float& g : l.weights.data) g = float(s.uniform(-1, 1));
    for (float& g : l.bias.data) g = float(s.uniform(-1, 1));
  }
  const model::TrainMask mask = model::build_mask(arch, model::Strategy::all);
  auto masked_norm = [&](const model::GradStore& g) {
    double acc = 0.0;
    for (size_t l = 0; l < g.layers.size(); ++l) {
      if (mask.slots[l][0])
        for (float v : g.layers[l].weights.data) acc += double(v) * v;
      if (mask.slots[l][1])
        for (float v : g.layers[l].bias.data) acc += double(v) * v;
    }
    return std::sqrt(acc);
  };

  SUBCASE("binding clip rescales to the cap") {
    const double before = masked_norm(grads);
    REQUIRE(before > 1.0);
    const float probe = grads.layers[0].weights.data[3];
    const double reported = trainer::clip_gradients(grads, mask, 1.0);
    CHECK(reported == doctest::Approx(before).epsilon(1e-9));
    CHECK(masked_norm(grads) == doctest::Approx(1.0).epsilon(1e-5));
    CHECK(grads.layers[0].weights.data[3] ==
          doctest::Approx(probe / before).epsilon(1e-5));
  }

  SUBCASE("below the cap nothing moves") {
    const model::GradStore before = grads;
    trainer::clip_gradients(grads, mask, 1e9);
    for (size_t l = 0; l < grads.layers.size(); ++l) {
      CHECK(bits_equal(grads.layers[l].weights, before.layers[l].weights));
      CHECK(bits_equal(grads.layers[l].bias, before.layers[l].bias));
    }
  }

  SUBCASE("max_norm <= 0 disables clipping") {
    const model::GradStore before = grads;
    trainer::clip_gradients(grads, mask, 0.0);
    for (size_t l = 0; l < grads.layers.size(); ++l)
      CHECK(bits_equal(grads.layers[l].weights, before.layers[l].weights));
  }

  SUBCASE("unmasked tensors stay bit-identical under a binding clip") {
    const model::TrainMask bias_mask =
        model::build_mask(arch, model::Strategy::bias);
    const model::GradStore before = grads;
    trainer::clip_gradients(grads, bias_mask, 1e-3);
    for (size_t l = 0; l < grads.layers.size(); ++l) {
      if (!bias_mask.slots[l][0])
        CHECK(bits_equal(grads.layers[l].weights, before.layers[l].weights));
      if (!bias_mask.slots[l][1])
        CHECK(bits_equal(grads.layers[l].bias, before.layers[l].bias));
    }
  }
}

TEST_CASE("a tiny clip bounds the total parameter movement") {
  const model::Architecture arch = model::reference_architecture();
  const simworld::Dataset ds = tiny_dataset("t_a", 16.0, 33);
  const model::ParamStore start = scratch_calibrated(arch, ds, 6);
  trainer::TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 8;
  cfg.batches_per_epoch = 3;
  cfg.strategy = model::Strategy::bn;
  cfg.regime = simworld::make_supervision(
      ds, simworld::regime_from_name("t_a"), 2.0, 1.0);
  cfg.seed = 11;
  cfg.clip_grad_norm = 1e-4;
  const trainer::TrainResult r = trainer::fine_tune(arch, start, ds, cfg);
  // Each step moves at most lr * clip in L2, so also in L-infinity.
  const double bound = cfg.epochs * cfg.batches_per_epoch *
                       cfg.learning_rate * cfg.clip_grad_norm * 1.001;
  CHECK(params_linf(r.params, start) <= bound);
  CHECK(params_linf(r.params, start) > 0.0);
}

TEST_CASE("hflip primitives") {
  SUBCASE("pose reflection rule and involution") {
    const Pose4 p = trainer::hflip_pose(Pose4{1.3, 0.4, 0.0, 0.3});
    CHECK(p.x == 1.3);
    CHECK(p.y == -0.4);
    CHECK(p.z == 0.0);
    CHECK(p.phi == -0.3);
    rng::Stream s(6);
    for (int k = 0; k < 100; ++k) {
      const Pose4 q = random_pose(s, 2.0, 3.0);
      const Pose4 twice = trainer::hflip_pose(trainer::hflip_pose(q));
      CHECK(twice.x == q.x);
      CHECK(twice.y == q.y);
      CHECK(twice.z == q.z);
      CHECK(twice.phi == q.phi);
    }
  }

  SUBCASE("reflection commutes with compose and invert") {
    rng::Stream s(7);
    for (int k = 0; k < 200; ++k) {
      const Pose4 a = random_pose(s, 2.0, 3.0);
      const Pose4 b = random_pose(s, 2.0, 3.0);
      const Pose4 lhs = trainer::hflip_pose(geometry::compose(a, b));
      const Pose4 rhs =
          geometry::compose(trainer::hflip_pose(a), trainer::hflip_pose(b));
      CHECK(geometry::delta(lhs, rhs) < 1e-12);
      const Pose4 il = trainer::hflip_pose(geometry::invert(a));
      const Pose4 ir = geometry::invert(trainer::hflip_pose(a));
      CHECK(geometry::delta(il, ir) < 1e-12);
    }
  }

  SUBCASE("image flip moves columns and double flip is identity") {
    std::vector<uint8_t> img(simworld::kImageHeight * simworld::kImageWidth);
    rng::Stream s(8);
    for (uint8_t& v : img) v = uint8_t(s.uniform_index(256));
    const std::vector<uint8_t> orig = img;
    trainer::hflip_image(img, simworld::kImageHeight, simworld::kImageWidth);
    const int w = simworld::kImageWidth;
    for (int r = 0; r < simworld::kImageHeight; r += 17)
      for (int c = 0; c < w; c += 13)
        CHECK(img[r * w + c] == orig[r * w + (w - 1 - c)]);
    trainer::hflip_image(img, simworld::kImageHeight, simworld::kImageWidth);
    CHECK(img == orig);
    std::vector<uint8_t> bad(10);
    CHECK_THROWS_AS(trainer::hflip_image(bad, 4, 4), std::invalid_argument);
  }

  SUBCASE("sample flip twice restores everything bit-exactly") {
    const simworld::Dataset ds = tiny_dataset("t_a", 2.0, 31);
    simworld::Sample s = ds.samples[3];
    const simworld::Sample orig = s;
    int fired = 0;
    for (uint64_t k = 0; fired < 2 && k < 64; ++k) {
      rng::Stream r(rng::derive_seed(77, 0xF11, k));
      if (trainer::augment_hflip(s, r)) ++fired;
    }
    REQUIRE(fired == 2);
    CHECK(s.image == orig.image);
    CHECK(s.label == orig.label);
    CHECK(s.odom == orig.odom);
    CHECK(s.subject == orig.subject);
    CHECK(s.true_relative == orig.true_relative);
  }
}

TEST_CASE("flipped pair leaves the consistency term unchanged") {
  rng::Stream s(9);
  for (int k = 0; k < 200; ++k) {
    const Pose4 pi = random_pose(s, 2.0, 1.2);
    const Pose4 pj = random_pose(s, 2.0, 1.2);
    const Pose4 dr = random_pose(s, 0.8, 0.8);
    const Pose4 sm = random_pose(s, 0.4, 0.5);
    const double v0 = losses::sc_pair_term(pi, pj, dr, sm, nullptr, nullptr);
    const double v1 = losses::sc_pair_term(
        trainer::hflip_pose(pi), trainer::hflip_pose(pj),
        trainer::hflip_pose(dr), trainer::hflip_pose(sm), nullptr, nullptr);
    CHECK(v1 == doctest::Approx(v0).epsilon(1e-6));
  }
}

TEST_CASE("time reversal") {
  SUBCASE("still pair is unchanged up to member order") {
    losses::PairSample p;
    p.i = 3;
    p.j = 11;
    int guard = 0;
    rng::Stream r(rng::derive_seed(3, 0xF12, 0));
    while (!trainer::augment_time_reversal(p, r)) REQUIRE(++guard < 64);
    CHECK(p.i == 11);
    CHECK(p.j == 3);
    CHECK(geometry::delta(p.drone_odom, Pose4{}) == 0.0);
    CHECK(geometry::delta(p.subject_motion, Pose4{}) == 0.0);
  }

  SUBCASE("pure translation inverts") {
    losses::PairSample p;
    p.drone_odom = Pose4{1.0, 0.0, 0.0, 0.0};
    int guard = 0;
    rng::Stream r(rng::derive_seed(4, 0xF12, 1));
    while (!trainer::augment_time_reversal(p, r)) REQUIRE(++guard < 64);
    CHECK(p.drone_odom.x == doctest::Approx(-1.0));
    CHECK(p.drone_odom.y == doctest::Approx(0.0));
    CHECK(p.drone_odom.phi == doctest::Approx(0.0));
  }

  SUBCASE("a geometrically consistent pair stays consistent when reversed") {
    rng::Stream s(10);
    for (int k = 0; k < 100; ++k) {
      const Pose4 di = random_pose(s, 2.0, 3.0);
      const Pose4 dj = random_pose(s, 2.0, 3.0);
      const Pose4 si = random_pose(s, 2.0, 3.0);
      const Pose4 sj = random_pose(s, 2.0, 3.0);
      losses::PairSample p;
      p.i = 0;
      p.j = 1;
      p.drone_odom = geometry::compose(geometry::invert(di), dj);
      p.subject_motion = geometry::compose(geometry::invert(si), sj);
      const Pose4 rel_i = geometry::compose(geometry::invert(di), si);
      const Pose4 rel_j = geometry::compose(geometry::invert(dj), sj);
      CHECK(losses::sc_pair_term(rel_i, rel_j, p.drone_odom, p.subject_motion,
                                 nullptr, nullptr) < 1e-9);
      int guard = 0;
      rng::Stream r(rng::derive_seed(11, 0xF13, uint64_t(k)));
      while (!trainer::augment_time_reversal(p, r)) REQUIRE(++guard < 64);
      const Pose4& first = p.i == 1 ? rel_j : rel_i;
      const Pose4& second = p.i == 1 ? rel_i : rel_j;
      CHECK(losses::sc_pair_term(first, second, p.drone_odom,
                                 p.subject_motion, nullptr, nullptr) < 1e-9);
    }
  }

  SUBCASE("reversal centers a drifting odometry distribution") {
    // Base motion drifts forward ~0.8 m; after augmentation the mean
    // translation must collapse to zero within Monte-Carlo noise.
    const int n = 10000;
    double raw_mean[3] = {0, 0, 0};
    double aug_sum[3] = {0, 0, 0}, aug_sq[3] = {0, 0, 0};
    rng::Stream s(12);
    for (int k = 0; k < n; ++k) {
      losses::PairSample p;
      p.i = 0;
      p.j = 1;
      p.drone_odom = Pose4{0.8 + s.normal(0.0, 0.1), s.normal(0.0, 0.1),
                           s.normal(0.0, 0.05), s.normal(0.0, 0.1)};
      raw_mean[0] += p.drone_odom.x / n;
      raw_mean[1] += p.drone_odom.y / n;
      raw_mean[2] += p.drone_odom.z / n;
      rng::Stream r(rng::derive_seed(13, 0xF14, uint64_t(k)));
      trainer::augment_time_reversal(p, r);
      const double v[3] = {p.drone_odom.x, p.drone_odom.y, p.drone_odom.z};
      for (int a = 0; a < 3; ++a) {
        aug_sum[a] += v[a];
        aug_sq[a] += v[a] * v[a];
      }
    }
    CHECK(raw_mean[0] > 0.7);
    for (int a = 0; a < 3; ++a) {
      const double mean = aug_sum[a] / n;
      const double sd =
          std::sqrt(std::max(0.0, aug_sq[a] / n - mean * mean));
      CHECK(std::abs(mean) <= 3.0 * sd / std::sqrt(double(n)));
    }
  }
}

TEST_CASE("photometric augmentation") {
  const simworld::Dataset ds = tiny_dataset("t_a", 2.0, 17);
  const std::vector<uint8_t>& img = ds.samples[0].image;
  const int h = simworld::kImageHeight, w = simworld::kImageWidth;

  SUBCASE("neutral magnitudes are an exact identity") {
    const trainer::PhotoConfig cfg = neutral_photo();
    for (uint64_t seed = 0; seed < 5; ++seed) {
      rng::Stream r(rng::derive_seed(21, 0xF15, seed));
      CHECK(trainer::augment_photometric(img, h, w, cfg, r) == img);
    }
  }

  SUBCASE("doubled exposure clamps mid-gray to white") {
    trainer::PhotoConfig cfg = neutral_photo();
    cfg.exposure_lo = cfg.exposure_hi = 2.0;
    const std::vector<uint8_t> gray(size_t(h) * w, 128);
    bool fired = false;
    for (uint64_t seed = 0; seed < 64 && !fired; ++seed) {
      rng::Stream r(rng::derive_seed(22, 0xF16, seed));
      const std::vector<uint8_t> out =
          trainer::augment_photometric(gray, h, w, cfg, r);
      if (out == gray) continue;
      fired = true;
      for (size_t i = 0; i < out.size(); i += 997) CHECK(out[i] == 255);
    }
    CHECK(fired);
  }

  SUBCASE("blur keeps values inside the original range") {
    trainer::PhotoConfig cfg = neutral_photo();
    cfg.blur_kernel = 3;
    bool changed = false;
    for (uint64_t seed = 0; seed < 64 && !changed; ++seed) {
      rng::Stream r(rng::derive_seed(23, 0xF17, seed));
      const std::vector<uint8_t> out =
          trainer::augment_photometric(img, h, w, cfg, r);
      if (out == img) continue;
      changed = true;
      const auto [lo, hi] = std::minmax_element(img.begin(), img.end());
      for (uint8_t v : out) {
        CHECK(v >= *lo);
        CHECK(v <= *hi);
      }
    }
    CHECK(changed);
  }

  SUBCASE("mean brightness roughly preserved over many draws") {
    double base = 0.0;
    for (uint8_t v : img) base += v;
    base /= double(img.size());
    trainer::PhotoConfig cfg;  // defaults
    double acc = 0.0;
    const int draws = 300;
    for (int k = 0; k < draws; ++k) {
      rng::Stream r(rng::derive_seed(24, 0xF18, uint64_t(k)));
      const std::vector<uint8_t> out =
          trainer::augment_photometric(img, h, w, cfg, r);
      double m = 0.0;
      for (uint8_t v : out) m += v;
      acc += m / double(out.size());
    }
    const double mean = acc / draws;
    CHECK(std::abs(mean - base) / base < 0.10);
  }

  SUBCASE("same stream seed reproduces the same image") {
    trainer::PhotoConfig cfg;
    rng::Stream a(rng::derive_seed(25, 0xF19, 3));
    rng::Stream b(rng::derive_seed(25, 0xF19, 3));
    CHECK(trainer::augment_photometric(img, h, w, cfg, a) ==
          trainer::augment_photometric(img, h, w, cfg, b));
  }
}

TEST_CASE("resolve_pairs agrees with the dataset pair builder") {
  for (const std::string name :
       {"sc_dm_sm", "sc_do_sm", "sc_do_si", "t_r32_sc"}) {
    CAPTURE(name);
    const simworld::Dataset ds = tiny_dataset(name, 16.0, 41);
    const simworld::RegimeSpec spec = simworld::regime_from_name(name);
    const auto direct = simworld::build_pairs(ds, spec, 2.0);
    const losses::SupervisionRegime sup =
        simworld::make_supervision(ds, spec, 2.0, 1.0);
    const auto resolved = trainer::resolve_pairs(ds, sup);
    REQUIRE(resolved.size() == direct.size());
    for (size_t k = 0; k < direct.size(); ++k) {
      CHECK(resolved[k].i == direct[k].i);
      CHECK(resolved[k].j == direct[k].j);
      CHECK(resolved[k].drone_odom == direct[k].drone_odom);
      CHECK(resolved[k].subject_motion == direct[k].subject_motion);
    }
  }
}

TEST_CASE("fine_tune validates its configuration") {
  const model::Architecture arch = model::reference_architecture();
  const model::ParamStore params = model::init_scratch(arch, 2);
  const simworld::Dataset ds = tiny_dataset("t_a", 4.0, 43);
  const simworld::RegimeSpec spec = simworld::regime_from_name("t_a");

  trainer::TrainConfig cfg;
  cfg.strategy = model::Strategy::bn;
  cfg.regime = simworld::make_supervision(ds, spec, 2.0, 1.0);
  cfg.batch_size = 4;
  cfg.batches_per_epoch = 2;
  cfg.epochs = 1;

  SUBCASE("negative or non-finite learning rate") {
    trainer::TrainConfig bad = cfg;
    bad.learning_rate = -0.1;
    CHECK_THROWS_AS(trainer::fine_tune(arch, params, ds, bad),
                    std::invalid_argument);
    bad.learning_rate = std::nan("");
    CHECK_THROWS_AS(trainer::fine_tune(arch, params, ds, bad),
                    std::invalid_argument);
  }
  SUBCASE("epoch and batch bounds") {
    trainer::TrainConfig bad = cfg;
    bad.epochs = 0;
    CHECK_THROWS_AS(trainer::fine_tune(arch, params, ds, bad),
                    std::invalid_argument);
    bad = cfg;
    bad.batch_size = 0;
    CHECK_THROWS_AS(trainer::fine_tune(arch, params, ds, bad),
                    std::invalid_argument);
    bad = cfg;
    bad.batch_size = 8;
    bad.batches_per_epoch = 3;  // 24 > 16 samples
    CHECK_THROWS_AS(trainer::fine_tune(arch, params, ds, bad),
                    std::invalid_argument);
  }
  SUBCASE("task indices must carry labels and stay in range") {
    trainer::TrainConfig bad = cfg;
    bad.regime.task_set = {1000};
    CHECK_THROWS_AS(trainer::fine_tune(arch, params, ds, bad),
                    std::invalid_argument);
    const simworld::Dataset blind = tiny_dataset("sc_do_si", 4.0, 44);
    bad = cfg;
    bad.regime = simworld::make_supervision(
        blind, simworld::regime_from_name("sc_do_si"), 2.0, 1.0);
    bad.regime.task_set = {0};
    CHECK_THROWS_AS(trainer::fine_tune(arch, params, blind, bad),
                    std::invalid_argument);
  }
  SUBCASE("a batch must fit in the supervision entries") {
    trainer::TrainConfig bad = cfg;
    bad.regime.task_set = {0, 1};
    bad.regime.sc_set.clear();
    bad.batch_size = 8;
    bad.batches_per_epoch = 1;
    CHECK_THROWS_AS(trainer::fine_tune(arch, params, ds, bad),
                    std::invalid_argument);
  }
  SUBCASE("sc pairs need stored odometry and bounds") {
    trainer::TrainConfig bad = cfg;
    bad.regime.sc_set = {0};  // t_a stores no odometry
    CHECK_THROWS_AS(trainer::fine_tune(arch, params, ds, bad),
                    std::invalid_argument);
    const simworld::Dataset sc = tiny_dataset("sc_do_sm", 4.0, 45);
    losses::SupervisionRegime sup = simworld::make_supervision(
        sc, simworld::regime_from_name("sc_do_sm"), 2.0, 1.0);
    sup.sc_set = {int(sc.samples.size()) - 1};
    CHECK_THROWS_AS(trainer::resolve_pairs(sc, sup), std::invalid_argument);
  }
  SUBCASE("an empty regime has nothing to train on") {
    trainer::TrainConfig bad = cfg;
    bad.regime.task_set.clear();
    bad.regime.sc_set.clear();
    CHECK_THROWS_AS(trainer::fine_tune(arch, params, ds, bad),
                    std::invalid_argument);
  }
}

TEST_CASE("fixed seed gives bit-identical traces and parameters") {
  const model::Architecture arch = model::reference_architecture();
  const simworld::Dataset ds = tiny_dataset("sc_do_sm", 12.0, 47);
  const model::ParamStore start = scratch_calibrated(arch, ds, 5);

  trainer::TrainConfig cfg;
  cfg.strategy = model::Strategy::bn;
  cfg.regime = simworld::make_supervision(
      ds, simworld::regime_from_name("sc_do_sm"), 2.0, 1.0);
  cfg.epochs = 2;
  cfg.batch_size = 8;
  cfg.batches_per_epoch = 2;
  cfg.seed = 99;

  const trainer::TrainResult a = trainer::fine_tune(arch, start, ds, cfg);
  const trainer::TrainResult b = trainer::fine_tune(arch, start, ds, cfg);
  REQUIRE(a.trace.size() == 2);
  for (size_t e = 0; e < a.trace.size(); ++e) {
    CHECK(a.trace[e].task_loss == b.trace[e].task_loss);
    CHECK(a.trace[e].sc_loss == b.trace[e].sc_loss);
    CHECK(a.trace[e].total == b.trace[e].total);
    CHECK(a.trace[e].task_loss == 0.0);
    CHECK(a.trace[e].sc_loss > 0.0);
  }
  CHECK(params_equal(a.params, b.params));
  CHECK_FALSE(params_equal(a.params, start));

  SUBCASE("a different seed reaches different parameters") {
    trainer::TrainConfig other = cfg;
    other.seed = 100;
    const trainer::TrainResult c = trainer::fine_tune(arch, start, ds, other);
    CHECK_FALSE(params_equal(a.params, c.params));
  }
}

TEST_CASE("strategies only touch their own tensors") {
  const model::Architecture arch = model::reference_architecture();
  const simworld::Dataset ds = tiny_dataset("t_a", 4.0, 51);
  const model::ParamStore start = scratch_calibrated(arch, ds, 6);

  for (const model::Strategy strat :
       {model::Strategy::all, model::Strategy::bn, model::Strategy::bias,
        model::Strategy::fc}) {
    CAPTURE(model::strategy_name(strat));
    trainer::TrainConfig cfg;
    cfg.strategy = strat;
    cfg.regime = simworld::make_supervision(
        ds, simworld::regime_from_name("t_a"), 2.0, 1.0);
    cfg.epochs = 1;
    cfg.batch_size = 4;
    cfg.batches_per_epoch = 2;
    cfg.seed = 7;
    const trainer::TrainResult r = trainer::fine_tune(arch, start, ds, cfg);
    const model::TrainMask mask = model::build_mask(arch, strat);
    for (size_t l = 0; l < arch.layers.size(); ++l) {
      if (!mask.slots[l][0])
        CHECK(bits_equal(r.params.layers[l].weights, start.layers[l].weights));
      if (!mask.slots[l][1])
        CHECK(bits_equal(r.params.layers[l].bias, start.layers[l].bias));
    }
    CHECK_FALSE(params_equal(r.params, start));
  }
}

TEST_CASE("duplicating every sample leaves the applied update identical") {
  const model::Architecture arch = model::reference_architecture();
  const simworld::Dataset dsA = tiny_dataset("t_a", 2.0, 53);
  simworld::Dataset dsB = dsA;
  for (const simworld::Sample& s : dsA.samples) dsB.samples.push_back(s);
  const model::ParamStore start = scratch_calibrated(arch, dsA, 8);

  trainer::TrainConfig cfg;
  cfg.strategy = model::Strategy::bn;
  cfg.epochs = 1;
  cfg.batches_per_epoch = 1;
  cfg.augment_photometric = false;
  cfg.augment_hflip = false;
  cfg.augment_time_reversal = false;
  cfg.seed = 3;

  trainer::TrainConfig cfgA = cfg;
  cfgA.batch_size = int(dsA.samples.size());
  cfgA.regime = simworld::make_supervision(
      dsA, simworld::regime_from_name("t_a"), 2.0, 1.0);
  trainer::TrainConfig cfgB = cfg;
  cfgB.batch_size = int(dsB.samples.size());
  cfgB.regime = simworld::make_supervision(
      dsB, simworld::regime_from_name("t_a"), 2.0, 1.0);

  const trainer::TrainResult a = trainer::fine_tune(arch, start, dsA, cfgA);
  const trainer::TrainResult b = trainer::fine_tune(arch, start, dsB, cfgB);
  CHECK(params_linf(a.params, start) > 1e-6);
  CHECK(params_linf(a.params, b.params) < 1e-6);
  CHECK(a.trace[0].task_loss == doctest::Approx(b.trace[0].task_loss));
}

TEST_CASE("supervised training loss decreases over epochs") {
  const model::Architecture arch = model::reference_architecture();
  for (uint64_t seed = 1; seed <= 5; ++seed) {
    CAPTURE(seed);
    const simworld::Dataset ds = tiny_dataset("t_a", 16.0, 60 + seed);
    const model::ParamStore start = scratch_calibrated(arch, ds, seed);
    trainer::TrainConfig cfg;
    cfg.strategy = model::Strategy::bn;
    cfg.regime = simworld::make_supervision(
        ds, simworld::regime_from_name("t_a"), 2.0, 1.0);
    cfg.epochs = 3;
    cfg.batch_size = 16;
    cfg.batches_per_epoch = 4;
    cfg.seed = seed;
    const trainer::TrainResult r = trainer::fine_tune(arch, start, ds, cfg);
    REQUIRE(r.trace.size() == 3);
    CHECK(r.trace.back().total < r.trace.front().total);
    CHECK(r.trace.back().sc_loss == 0.0);
  }
}

TEST_CASE("consistency training runs and improves its own loss") {
  const model::Architecture arch = model::reference_architecture();
  const simworld::Dataset ds = tiny_dataset("sc_dm_sm", 12.0, 71);
  const model::ParamStore start = scratch_calibrated(arch, ds, 11);

  trainer::TrainConfig cfg;
  cfg.strategy = model::Strategy::bn;
  cfg.regime = simworld::make_supervision(
      ds, simworld::regime_from_name("sc_dm_sm"), 2.0, 1.0);
  cfg.epochs = 3;
  cfg.batch_size = 8;
  cfg.batches_per_epoch = 4;
  cfg.seed = 13;
  // Augmentation draws change the effective objective between epochs;
  // turn them off so the trace measures one fixed loss.
  cfg.augment_photometric = false;
  cfg.augment_hflip = false;
  cfg.augment_time_reversal = false;
  const trainer::TrainResult r = trainer::fine_tune(arch, start, ds, cfg);
  REQUIRE(r.trace.size() == 3);
  CHECK(r.trace[0].task_loss == 0.0);
  CHECK(r.trace[0].sc_loss > 0.0);
  CHECK(r.trace.back().sc_loss < r.trace.front().sc_loss);
}

TEST_CASE("mixed anchor regime trains on both terms") {
  const model::Architecture arch = model::reference_architecture();
  const simworld::Dataset ds = tiny_dataset("t_r32_sc", 32.0, 73);
  const model::ParamStore start = scratch_calibrated(arch, ds, 12);

  trainer::TrainConfig cfg;
  cfg.strategy = model::Strategy::bias;
  cfg.regime = simworld::make_supervision(
      ds, simworld::regime_from_name("t_r32_sc"), 2.0, 1.0);
  cfg.epochs = 1;
  cfg.batch_size = 16;
  cfg.batches_per_epoch = 2;
  cfg.seed = 21;
  const trainer::TrainResult r = trainer::fine_tune(arch, start, ds, cfg);
  CHECK(r.trace[0].task_loss > 0.0);
  CHECK(r.trace[0].sc_loss > 0.0);
  CHECK(r.trace[0].total ==
        doctest::Approx(r.trace[0].task_loss + r.trace[0].sc_loss));
}

TEST_CASE("fc strategy trains the head from frozen features") {
  const model::Architecture arch = model::reference_architecture();
  const simworld::Dataset ds = tiny_dataset("t_a", 8.0, 81);
  const model::ParamStore start = scratch_calibrated(arch, ds, 14);

  trainer::TrainConfig cfg;
  cfg.strategy = model::Strategy::fc;
  cfg.regime = simworld::make_supervision(
      ds, simworld::regime_from_name("t_a"), 2.0, 1.0);
  cfg.epochs = 5;
  cfg.batch_size = 8;
  cfg.batches_per_epoch = 4;
  cfg.seed = 17;
  // The head sees raw 1920-wide features with ||f||^2 near 1e3; the
  // default rate overshoots there, so the mechanism check runs gentler.
  cfg.learning_rate = 3e-5;

  SUBCASE("lr zero returns bit-equal parameters") {
    trainer::TrainConfig frozen = cfg;
    frozen.learning_rate = 0.0;
    const trainer::TrainResult r = trainer::fine_tune(arch, start, ds, frozen);
    CHECK(params_equal(r.params, start));
    CHECK(r.trace.size() == 5);
  }

  SUBCASE("the head learns") {
    const trainer::TrainResult r = trainer::fine_tune(arch, start, ds, cfg);
    CHECK(r.trace.back().total < r.trace.front().total);
    for (size_t l = 0; l + 1 < arch.layers.size(); ++l) {
      CHECK(bits_equal(r.params.layers[l].weights, start.layers[l].weights));
      CHECK(bits_equal(r.params.layers[l].bias, start.layers[l].bias));
    }
  }
}

TEST_CASE("loss trace serializes one json record per epoch") {
  std::vector<trainer::EpochStats> trace;
  for (int e = 1; e <= 3; ++e) {
    trainer::EpochStats st;
    st.epoch = e;
    st.task_loss = 0.5 / e;
    st.sc_loss = 0.25 / e;
    st.total = st.task_loss + st.sc_loss;
    trace.push_back(st);
  }
  const std::string text = trainer::trace_to_json(trace);
  std::vector<std::string> lines;
  size_t pos = 0;
  while (pos < text.size()) {
    const size_t nl = text.find('\n', pos);
    lines.push_back(text.substr(pos, nl - pos));
    pos = nl + 1;
  }
  REQUIRE(lines.size() == 3);
  for (int e = 0; e < 3; ++e) {
    const nlohmann::json j = nlohmann::json::parse(lines[e]);
    CHECK(j["epoch"].get<int>() == e + 1);
    CHECK(j["task_loss"].get<double>() == trace[e].task_loss);
    CHECK(j["sc_loss"].get<double>() == trace[e].sc_loss);
    CHECK(j["total"].get<double>() == trace[e].total);
  }
}
