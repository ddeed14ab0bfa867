#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tinyft/geometry.hpp"
#include "tinyft/losses.hpp"
#include "tinyft/rng.hpp"
#include "tinyft/tensor.hpp"

namespace tinyft::simworld {

using geometry::Pose4;

inline constexpr int kImageHeight = 96;
inline constexpr int kImageWidth = 160;

// Drone and subject ground truth at one instant, both in the world frame.
struct WorldState {
  Pose4 drone;
  Pose4 subject;
  double time = 0.0;
};

enum class SubjectMotion { still, random_walk, scripted };
SubjectMotion subject_motion_from_name(const std::string& s);

// Everything the grayscale renderer needs. The glyph is three axis-aligned
// ellipses (body, head above, legs below) billboarded at the subject's
// position; image x-scale encodes depth, the head's horizontal shift
// encodes relative yaw. The background is low-frequency and mirror
// symmetric about the vertical center line, which together with the
// signed-coordinate ellipse math makes a horizontal image flip correspond
// exactly to negating the relative y and yaw.
struct RenderParams {
  double focal = 84.3;  // px; principal point fixed at the image center
  double min_depth = 0.3;
  double body_a = 0.16, body_b = 0.105;  // semi-axes, meters
  double head_r = 0.058;
  double legs_r = 0.066;  // sized so the brightness centroid sits on the body center
  double head_dz = 0.15, legs_dz = -0.15;
  double head_yaw_shift = 0.11;   // meters of head offset per sin(yaw)
  double yaw_width_gain = 0.2;    // body width factor 1-g+g*cos(yaw)
  double body_gray = 208.0, head_gray = 236.0, legs_gray = 178.0;
  double bg_base = 92.0, bg_amp1 = 26.0, bg_amp2 = 17.0, bg_amp3 = 11.0;
  double bg_w1 = 0.115, bg_w2 = 3.1e-4, bg_w3 = 0.061, bg_w4 = 2.3e-4;
  double bg_p1 = 0.7, bg_p2 = 2.3;
  double edge_soft = 1.1;  // px, antialias transition width
  // Camera read noise in u8 levels, added per pixel at capture time
  // (dataset building), not by the pure renderer.
  double pixel_noise = 0.0;
};

struct WorldConfig {
  double duration = 128.0;
  double rate_hz = 4.0;
  // drone motion
  double v_max = 0.25;   // m/s, horizontal speed bound
  double vz_max = 0.10;  // m/s
  double w_max = 0.8;    // rad/s yaw rate bound
  double vel_smooth = 0.88, vel_sigma = 0.05, vz_sigma = 0.02;
  double yaw_track_gain = 0.22;  // per-step pull toward the subject bearing
  double yaw_sigma = 0.055;      // rad per-step yaw innovation
  double range_lo = 1.0, range_hi = 1.9;  // preferred distance band
  double range_gain = 0.4;
  double arena_xy = 2.2, arena_z = 0.35;
  // subject motion
  SubjectMotion subject_motion = SubjectMotion::random_walk;
  double subject_v_max = 0.10;
  double subject_vel_smooth = 0.9, subject_vel_sigma = 0.02;
  double subject_track_gain = 0.08, subject_w_max = 0.5;
  double subject_yaw_dev_smooth = 0.96, subject_yaw_dev_sigma = 0.03;
  double subject_yaw_dev_max = 0.35;
  double subject_area = 0.5;  // wander box half-extent around the start
  RenderParams render;
};

// Per-component odometry noise densities; the perturbation of one step of
// duration dt has standard deviation sigma*sqrt(dt).
struct NoiseModel {
  double sigma_xy = 0.05;   // m/sqrt(s)
  double sigma_z = 0.01;    // m/sqrt(s)
  double sigma_phi = 0.02;  // rad/sqrt(s)
  uint64_t seed = 0;        // extra entropy folded into the draw stream
};

// The subject pose expressed in the drone frame.
Pose4 relative_pose(const WorldState& st);

bool subject_visible(const Pose4& rel, const RenderParams& rp);

// Bounded-velocity random walk for the drone with yaw tracking the subject
// bearing, plus the configured subject motion. Returns
// round(duration*rate_hz) states dt=1/rate_hz apart, fully determined by
// (config, seed). Throws std::invalid_argument on bad config.
std::vector<WorldState> generate_trajectory(const WorldConfig& cfg,
                                            uint64_t seed);

std::vector<uint8_t> render_background(const RenderParams& rp);
std::vector<uint8_t> render_relative(const Pose4& rel, const RenderParams& rp);
std::vector<uint8_t> render(const WorldState& st, const RenderParams& rp);

// True step composed with a zero-mean Gaussian pose perturbation of std
// sigma*sqrt(dt) per component.
Pose4 noisy_step(const Pose4& true_step, const NoiseModel& noise, double dt,
                 rng::Stream& s);

// Accumulated odometry estimate per state, in the frame of the first state
// (so entry 0 is the identity). Zero sigmas reproduce the true relative
// chain exactly.
std::vector<Pose4> accumulate_odometry(const std::vector<WorldState>& traj,
                                       const NoiseModel& noise, uint64_t seed);

struct Sample {
  double timestamp = 0.0;
  std::vector<uint8_t> image;  // kImageHeight x kImageWidth, row major
  bool label_valid = false;
  Pose4 label;  // target relative pose, present iff in the task set
  bool odom_valid = false;
  Pose4 odom;  // accumulated drone pose estimate in the segment-start frame
  bool subject_valid = false;
  Pose4 subject;        // subject world pose, hidden under unknown-still
  Pose4 true_relative;  // always recorded, for evaluation only
};

struct Dataset {
  uint16_t height = kImageHeight;
  uint16_t width = kImageWidth;
  float rate_hz = 4.0f;
  std::vector<Sample> samples;
};

// Which supervision a generated dataset carries. task_all labels every
// visible sample; anchors > 0 relocates the subject to the known anchor
// pose on that many random frames and labels exactly those.
struct RegimeSpec {
  std::string name;
  bool task_all = false;
  int anchors = 0;
  bool has_sc = false;
  losses::DroneOdomMode drone_odom = losses::DroneOdomMode::perfect_absolute;
  losses::SubjectMode subject_mode = losses::SubjectMode::perfect_absolute;
};

// t_a, sc_dm_sm, sc_do_sm, sc_do_si, t_r32_sc. Throws on anything else.
RegimeSpec regime_from_name(const std::string& name);
const std::vector<std::string>& regime_names();
// Unsupervised evaluation-only spec: no labels, no odometry, subject hidden.
RegimeSpec test_regime();

// The cooperative anchor: one meter directly ahead, centered, facing the
// camera.
inline Pose4 anchor_pose() { return Pose4{1.0, 0.0, 0.0, 0.0}; }

// Renders and annotates one trajectory slice under a regime. Pose fields
// are rounded to f32 so an in-memory dataset equals its serialized form.
Dataset build_dataset(const std::vector<WorldState>& traj,
                      const WorldConfig& cfg, const RegimeSpec& regime,
                      const NoiseModel& noise, uint64_t seed);

// Consistency pairs at offset dt: drone odometry from the stored estimates,
// subject motion from the stored world poses or the identity when hidden.
// Pairs touching anchor-labeled frames are dropped in cooperative regimes.
std::vector<losses::PairSample> build_pairs(const Dataset& ds,
                                            const RegimeSpec& regime,
                                            double dt);

// Supervision bookkeeping for a dataset built under `regime`: labeled
// indices form the task set, consistency-pair anchors the sc set.
losses::SupervisionRegime make_supervision(const Dataset& ds,
                                           const RegimeSpec& regime, double dt,
                                           double lambda_sc);

struct SplitSpec {
  int fine_tune = 512;
  int gap = 100;
  int test = 256;
};

struct Split {
  Dataset fine_tune;
  Dataset test;
};

// One contiguous flight: fine-tune slice, discarded gap, test slice.
Split generate_split(const WorldConfig& cfg, const SplitSpec& split,
                     const RegimeSpec& regime, const NoiseModel& noise,
                     uint64_t seed);

// FTDS container, little-endian. Throws std::runtime_error on I/O or
// format problems.
void save_dataset(const std::string& path, const Dataset& ds);
Dataset load_dataset(const std::string& path);

// u8 image to a (1, H, W) float tensor scaled to [0, 1].
Tensor to_input(const std::vector<uint8_t>& image);

// Benchmark worlds: the pretraining world and the deployment world it is
// fine-tuned toward (different glyph scale and photometrics).
WorldConfig source_world();
WorldConfig target_world();

// JSON round trips for configs; absent keys keep defaults.
std::string world_config_to_json(const WorldConfig& cfg);
WorldConfig world_config_from_json(const std::string& text);
std::string noise_model_to_json(const NoiseModel& nm);
NoiseModel noise_model_from_json(const std::string& text);

}  // namespace tinyft::simworld
