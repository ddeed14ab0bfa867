#include "tinyft/simworld.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <stdexcept>

namespace tinyft::simworld {

using geometry::compose;
using geometry::invert;
using geometry::wrap_angle;

namespace {

constexpr double kHalfW = (kImageWidth - 1) / 2.0;   // 79.5
constexpr double kHalfH = (kImageHeight - 1) / 2.0;  // 47.5

[[noreturn]] void fail(const std::string& what) {
  throw std::invalid_argument("simworld: " + what);
}

double clampd(double v, double lo, double hi) {
  return v < lo ? lo : (v > hi ? hi : v);
}

// Reflects x into [lo, hi] and negates the velocity on contact. Never
// increases the step length, so velocity bounds survive wall contact.
void reflect(double& x, double& v, double lo, double hi) {
  if (x > hi) {
    x = 2.0 * hi - x;
    v = -v;
  } else if (x < lo) {
    x = 2.0 * lo - x;
    v = -v;
  }
}

Pose4 round_f32(const Pose4& p) {
  return Pose4{static_cast<float>(p.x), static_cast<float>(p.y),
               static_cast<float>(p.z), static_cast<float>(p.phi)};
}

}  // namespace

SubjectMotion subject_motion_from_name(const std::string& s) {
  if (s == "still") return SubjectMotion::still;
  if (s == "walk" || s == "random_walk") return SubjectMotion::random_walk;
  if (s == "scripted") return SubjectMotion::scripted;
  fail("unknown subject motion '" + s + "'");
}

Pose4 relative_pose(const WorldState& st) {
  return compose(invert(st.drone), st.subject);
}

bool subject_visible(const Pose4& rel, const RenderParams& rp) {
  return rel.x >= rp.min_depth;
}

std::vector<WorldState> generate_trajectory(const WorldConfig& cfg,
                                            uint64_t seed) {
  if (!(cfg.duration > 0.0)) fail("duration must be positive");
  if (!(cfg.rate_hz > 0.0)) fail("rate_hz must be positive");
  if (!(cfg.v_max > 0.0 && cfg.vz_max > 0.0 && cfg.w_max > 0.0))
    fail("velocity bounds must be positive");
  if (!(cfg.arena_xy > 0.0 && cfg.arena_z > 0.0)) fail("arena must be positive");
  if (!(cfg.range_lo > 0.0 && cfg.range_hi > cfg.range_lo))
    fail("range band must satisfy 0 < lo < hi");

  const double dt = 1.0 / cfg.rate_hz;
  const int n = static_cast<int>(std::lround(cfg.duration * cfg.rate_hz));
  if (n < 1) fail("duration too short for one state");

  rng::Stream s(rng::derive_seed(seed, 0x5754));

  // Subject starts near the arena center, the drone on a ring around it,
  // looking at it; the subject's heading points away from the drone so the
  // glyph's face side is toward the camera at relative yaw zero.
  double sx = s.uniform(-0.2, 0.2), sy = s.uniform(-0.2, 0.2);
  const double sz = 0.0;
  const double ring = s.uniform(cfg.range_lo + 0.1, cfg.range_hi - 0.1);
  const double th = s.uniform(-M_PI, M_PI);
  double dx = sx + ring * std::cos(th), dy = sy + ring * std::sin(th);
  double dz = s.uniform(0.02, std::min(0.18, cfg.arena_z));
  double dyaw = std::atan2(sy - dy, sx - dx);
  double syaw = wrap_angle(dyaw + s.uniform(-0.15, 0.15));

  const double scx = sx, scy = sy;  // subject wander box / circle center
  const double phase0 = s.uniform(0.0, 2.0 * M_PI);
  const double circle_r = 0.15;
  if (cfg.subject_motion == SubjectMotion::scripted) {
    sx = scx + circle_r * std::cos(phase0);
    sy = scy + circle_r * std::sin(phase0);
  }
  double vx = 0.0, vy = 0.0, vz = 0.0;
  double svx = 0.0, svy = 0.0;
  double syaw_base = syaw, syaw_dev = 0.0;

  std::vector<WorldState> out;
  out.reserve(static_cast<size_t>(n));
  for (int k = 0; k < n; ++k) {
    out.push_back(WorldState{Pose4{dx, dy, dz, wrap_angle(dyaw)},
                             Pose4{sx, sy, sz, wrap_angle(syaw)}, k * dt});
    if (k + 1 == n) break;

    switch (cfg.subject_motion) {
      case SubjectMotion::still:
        break;
      case SubjectMotion::random_walk: {
        svx = clampd(cfg.subject_vel_smooth * svx +
                         cfg.subject_vel_sigma * s.normal(),
                     -cfg.subject_v_max, cfg.subject_v_max);
        svy = clampd(cfg.subject_vel_smooth * svy +
                         cfg.subject_vel_sigma * s.normal(),
                     -cfg.subject_v_max, cfg.subject_v_max);
        sx += svx * dt;
        sy += svy * dt;
        reflect(sx, svx, scx - cfg.subject_area, scx + cfg.subject_area);
        reflect(sy, svy, scy - cfg.subject_area, scy + cfg.subject_area);
        syaw_dev = clampd(cfg.subject_yaw_dev_smooth * syaw_dev +
                              cfg.subject_yaw_dev_sigma * s.normal(),
                          -cfg.subject_yaw_dev_max, cfg.subject_yaw_dev_max);
        const double away = std::atan2(sy - dy, sx - dx);
        const double cap = cfg.subject_w_max * dt;
        syaw_base += clampd(
            cfg.subject_track_gain * wrap_angle(away - syaw_base), -cap, cap);
        syaw_base = wrap_angle(syaw_base);
        syaw = wrap_angle(syaw_base + syaw_dev);
        break;
      }
      case SubjectMotion::scripted: {
        const double ang = phase0 + 2.0 * M_PI * (k + 1) / n;
        sx = scx + circle_r * std::cos(ang);
        sy = scy + circle_r * std::sin(ang);
        break;
      }
    }

    vx = cfg.vel_smooth * vx + cfg.vel_sigma * s.normal();
    vy = cfg.vel_smooth * vy + cfg.vel_sigma * s.normal();
    vz = cfg.vel_smooth * vz + cfg.vz_sigma * s.normal();
    const double rx = sx - dx, ry = sy - dy;
    const double dist = std::hypot(rx, ry);
    if (dist > 1e-9) {
      if (dist > cfg.range_hi) {
        const double g = cfg.range_gain * (dist - cfg.range_hi);
        vx += g * rx / dist;
        vy += g * ry / dist;
      } else if (dist < cfg.range_lo) {
        const double g = cfg.range_gain * (cfg.range_lo - dist);
        vx -= g * rx / dist;
        vy -= g * ry / dist;
      }
    }
    const double speed = std::hypot(vx, vy);
    if (speed > cfg.v_max) {
      vx *= cfg.v_max / speed;
      vy *= cfg.v_max / speed;
    }
    vz = clampd(vz, -cfg.vz_max, cfg.vz_max);
    dx += vx * dt;
    dy += vy * dt;
    dz += vz * dt;
    reflect(dx, vx, -cfg.arena_xy, cfg.arena_xy);
    reflect(dy, vy, -cfg.arena_xy, cfg.arena_xy);
    reflect(dz, vz, 0.0, cfg.arena_z);

    const double bearing = std::atan2(sy - dy, sx - dx);
    const double cap = cfg.w_max * dt;
    const double step = cfg.yaw_track_gain * wrap_angle(bearing - dyaw) +
                        cfg.yaw_sigma * s.normal();
    dyaw = wrap_angle(dyaw + clampd(step, -cap, cap));
  }
  return out;
}

namespace {

struct Blob {
  double uc, vc;  // center in signed pixel coordinates from the principal point
  double a, b;    // semi-axes, px
  double gray;
};

// Coverage blend of one ellipse over the working buffer. The signed
// coordinates keep a mirrored blob's arithmetic the exact negation of the
// original's, so flipped renders are bit-identical to flipped images. The
// bounding box is padded past the coverage support, so its rounding can
// never drop a contributing pixel.
void splat(std::vector<double>& px, const Blob& bl, double soft) {
  if (bl.a <= 0.0 || bl.b <= 0.0) return;
  const double scale = std::min(bl.a, bl.b);
  const double reach = 1.0 + 0.5 * soft / scale;
  const double mu = bl.a * reach + 1.5, mv = bl.b * reach + 1.5;
  const int r0 = std::max(0, static_cast<int>(std::ceil(kHalfH + bl.vc - mv)));
  const int r1 = std::min(kImageHeight - 1,
                          static_cast<int>(std::floor(kHalfH + bl.vc + mv)));
  const int c0 = std::max(0, static_cast<int>(std::ceil(kHalfW + bl.uc - mu)));
  const int c1 = std::min(kImageWidth - 1,
                          static_cast<int>(std::floor(kHalfW + bl.uc + mu)));
  for (int r = r0; r <= r1; ++r) {
    const double dv = (r - kHalfH) - bl.vc;
    const double tv = dv / bl.b;
    for (int c = c0; c <= c1; ++c) {
      const double du = (c - kHalfW) - bl.uc;
      const double tu = du / bl.a;
      const double d = (std::sqrt(tu * tu + tv * tv) - 1.0) * scale;
      const double cov = clampd(0.5 - d / soft, 0.0, 1.0);
      if (cov > 0.0) {
        double& p = px[static_cast<size_t>(r) * kImageWidth + c];
        p += cov * (bl.gray - p);
      }
    }
  }
}

// base + amp1*cos(w1*vd + p1) + amp2*cos(w2*uu + p2)
//      + amp3*cos(w3*vd + w4*uu), with uu = ud^2, factored into per-row and
// per-column tables. Everything depends on ud only through uu, which makes
// the background exactly symmetric about the vertical center line.
std::vector<double> background_buffer(const RenderParams& rp) {
  double row1[kImageHeight], rowc[kImageHeight], rows[kImageHeight];
  for (int r = 0; r < kImageHeight; ++r) {
    const double vd = r - kHalfH;
    row1[r] = rp.bg_base + rp.bg_amp1 * std::cos(rp.bg_w1 * vd + rp.bg_p1);
    rowc[r] = rp.bg_amp3 * std::cos(rp.bg_w3 * vd);
    rows[r] = rp.bg_amp3 * std::sin(rp.bg_w3 * vd);
  }
  double col2[kImageWidth], colc[kImageWidth], cols[kImageWidth];
  for (int c = 0; c < kImageWidth; ++c) {
    const double ud = c - kHalfW;
    const double uu = ud * ud;
    col2[c] = rp.bg_amp2 * std::cos(rp.bg_w2 * uu + rp.bg_p2);
    colc[c] = std::cos(rp.bg_w4 * uu);
    cols[c] = std::sin(rp.bg_w4 * uu);
  }
  std::vector<double> px(static_cast<size_t>(kImageHeight) * kImageWidth);
  for (int r = 0; r < kImageHeight; ++r) {
    double* dst = px.data() + static_cast<size_t>(r) * kImageWidth;
    for (int c = 0; c < kImageWidth; ++c)
      dst[c] = row1[r] + col2[c] + rowc[r] * colc[c] - rows[r] * cols[c];
  }
  return px;
}

std::vector<uint8_t> to_u8(const std::vector<double>& px) {
  std::vector<uint8_t> out(px.size());
  for (size_t i = 0; i < px.size(); ++i)
    out[i] = static_cast<uint8_t>(clampd(std::nearbyint(px[i]), 0.0, 255.0));
  return out;
}

}  // namespace

std::vector<uint8_t> render_background(const RenderParams& rp) {
  return to_u8(background_buffer(rp));
}

std::vector<uint8_t> render_relative(const Pose4& rel, const RenderParams& rp) {
  std::vector<double> px = background_buffer(rp);
  if (subject_visible(rel, rp)) {
    const double inv = rp.focal / rel.x;
    const double sphi = std::sin(rel.phi);
    const double cphi = std::cos(rel.phi);
    const double wf = 1.0 - rp.yaw_width_gain + rp.yaw_width_gain * cphi;
    const Blob body{-inv * rel.y, -inv * rel.z, inv * rp.body_a * wf,
                    inv * rp.body_b, rp.body_gray};
    const Blob legs{body.uc, body.vc - inv * rp.legs_dz, inv * rp.legs_r,
                    inv * rp.legs_r, rp.legs_gray};
    const Blob head{body.uc - inv * rp.head_yaw_shift * sphi,
                    body.vc - inv * rp.head_dz, inv * rp.head_r,
                    inv * rp.head_r, rp.head_gray};
    splat(px, body, rp.edge_soft);
    splat(px, legs, rp.edge_soft);
    splat(px, head, rp.edge_soft);
  }
  return to_u8(px);
}

std::vector<uint8_t> render(const WorldState& st, const RenderParams& rp) {
  return render_relative(relative_pose(st), rp);
}

Pose4 noisy_step(const Pose4& true_step, const NoiseModel& noise, double dt,
                 rng::Stream& s) {
  if (!(dt > 0.0)) fail("noisy_step needs dt > 0");
  const double r = std::sqrt(dt);
  const Pose4 eps{noise.sigma_xy * r * s.normal(),
                  noise.sigma_xy * r * s.normal(),
                  noise.sigma_z * r * s.normal(),
                  noise.sigma_phi * r * s.normal()};
  return compose(true_step, eps);
}

std::vector<Pose4> accumulate_odometry(const std::vector<WorldState>& traj,
                                       const NoiseModel& noise,
                                       uint64_t seed) {
  if (!(noise.sigma_xy >= 0.0 && noise.sigma_z >= 0.0 &&
        noise.sigma_phi >= 0.0))
    fail("noise sigmas must be nonnegative");
  std::vector<Pose4> out(traj.size());
  if (traj.empty()) return out;
  rng::Stream s(rng::derive_seed(seed, 0x4F44, noise.seed));
  Pose4 acc;
  for (size_t k = 1; k < traj.size(); ++k) {
    const Pose4 step =
        compose(invert(traj[k - 1].drone), traj[k].drone);
    const double dt = traj[k].time - traj[k - 1].time;
    acc = compose(acc, noisy_step(step, noise, dt, s));
    out[k] = acc;
  }
  return out;
}

RegimeSpec regime_from_name(const std::string& name) {
  using losses::DroneOdomMode;
  using losses::SubjectMode;
  RegimeSpec r;
  r.name = name;
  if (name == "t_a") {
    r.task_all = true;
  } else if (name == "sc_dm_sm") {
    r.has_sc = true;
    r.drone_odom = DroneOdomMode::perfect_absolute;
    r.subject_mode = SubjectMode::perfect_absolute;
  } else if (name == "sc_do_sm") {
    r.has_sc = true;
    r.drone_odom = DroneOdomMode::noisy_odometry;
    r.subject_mode = SubjectMode::perfect_absolute;
  } else if (name == "sc_do_si") {
    r.has_sc = true;
    r.drone_odom = DroneOdomMode::noisy_odometry;
    r.subject_mode = SubjectMode::unknown_still;
  } else if (name == "t_r32_sc") {
    r.anchors = 32;
    r.has_sc = true;
    r.drone_odom = DroneOdomMode::noisy_odometry;
    r.subject_mode = SubjectMode::unknown_still;
  } else {
    fail("unknown regime '" + name + "'");
  }
  return r;
}

const std::vector<std::string>& regime_names() {
  static const std::vector<std::string> names{"t_a", "sc_dm_sm", "sc_do_sm",
                                              "sc_do_si", "t_r32_sc"};
  return names;
}

RegimeSpec test_regime() {
  RegimeSpec r;
  r.name = "test";
  r.subject_mode = losses::SubjectMode::unknown_still;
  return r;
}

Dataset build_dataset(const std::vector<WorldState>& traj,
                      const WorldConfig& cfg, const RegimeSpec& regime,
                      const NoiseModel& noise, uint64_t seed) {
  if (!(cfg.render.pixel_noise >= 0.0))
    fail("pixel_noise must be nonnegative");
  const int n = static_cast<int>(traj.size());
  Dataset ds;
  ds.rate_hz = static_cast<float>(cfg.rate_hz);
  ds.samples.resize(static_cast<size_t>(n));
  if (n == 0) return ds;

  std::vector<Pose4> odom(traj.size());
  if (regime.has_sc) {
    switch (regime.drone_odom) {
      case losses::DroneOdomMode::perfect_absolute:
        for (int k = 0; k < n; ++k)
          odom[k] = compose(invert(traj[0].drone), traj[k].drone);
        break;
      case losses::DroneOdomMode::perfect_odometry:
        odom = accumulate_odometry(traj, NoiseModel{0.0, 0.0, 0.0, 0}, seed);
        break;
      case losses::DroneOdomMode::noisy_odometry:
        odom = accumulate_odometry(traj, noise,
                                   rng::derive_seed(seed, 0x4E5A));
        break;
    }
  }

  std::vector<char> is_anchor(traj.size(), 0);
  if (regime.anchors > 0) {
    std::vector<int> idx(traj.size());
    std::iota(idx.begin(), idx.end(), 0);
    rng::Stream s(rng::derive_seed(seed, 0x414E));
    rng::shuffle(idx, s);
    const int take = std::min<int>(regime.anchors, n);
    for (int k = 0; k < take; ++k) is_anchor[idx[k]] = 1;
  }

  const bool subject_known =
      regime.subject_mode != losses::SubjectMode::unknown_still;
  for (int k = 0; k < n; ++k) {
    WorldState st = traj[k];
    if (is_anchor[k]) st.subject = compose(st.drone, anchor_pose());
    const Pose4 rel = relative_pose(st);
    Sample& sm = ds.samples[k];
    sm.timestamp = st.time;
    sm.image = render_relative(rel, cfg.render);
    if (cfg.render.pixel_noise > 0.0) {
      rng::Stream px(rng::derive_seed(seed, 0x5058, static_cast<uint64_t>(k)));
      for (uint8_t& v : sm.image) {
        const double noisy = v + cfg.render.pixel_noise * px.normal();
        v = static_cast<uint8_t>(std::clamp(std::nearbyint(noisy), 0.0, 255.0));
      }
    }
    sm.true_relative = round_f32(rel);
    const bool visible = subject_visible(rel, cfg.render);
    sm.label_valid = (regime.task_all && visible) || is_anchor[k];
    if (sm.label_valid) sm.label = sm.true_relative;
    sm.odom_valid = regime.has_sc;
    if (sm.odom_valid) sm.odom = round_f32(odom[k]);
    sm.subject_valid = subject_known;
    if (sm.subject_valid) sm.subject = round_f32(st.subject);
  }
  return ds;
}

std::vector<losses::PairSample> build_pairs(const Dataset& ds,
                                            const RegimeSpec& regime,
                                            double dt) {
  std::vector<losses::PairSample> pairs;
  if (!regime.has_sc) return pairs;
  if (!(dt > 0.0)) fail("pair offset dt must be positive");
  const double period = 1.0 / ds.rate_hz;
  const int offset = static_cast<int>(std::lround(dt / period));
  if (offset < 1 || std::abs(offset * period - dt) > 1e-9)
    fail("dt must be a positive multiple of the sampling period");

  const int n = static_cast<int>(ds.samples.size());
  for (int i = 0; i + offset < n; ++i) {
    const Sample& a = ds.samples[i];
    const Sample& b = ds.samples[i + offset];
    if (!a.odom_valid || !b.odom_valid) continue;
    if (regime.anchors > 0 && (a.label_valid || b.label_valid)) continue;
    losses::PairSample p;
    p.i = i;
    p.j = i + offset;
    p.drone_odom = compose(invert(a.odom), b.odom);
    p.subject_motion = (a.subject_valid && b.subject_valid)
                           ? compose(invert(a.subject), b.subject)
                           : Pose4{};
    pairs.push_back(p);
  }
  return pairs;
}

losses::SupervisionRegime make_supervision(const Dataset& ds,
                                           const RegimeSpec& regime, double dt,
                                           double lambda_sc) {
  losses::SupervisionRegime out;
  out.dt = dt;
  out.lambda_sc = lambda_sc;
  out.drone_odom_mode = regime.drone_odom;
  out.subject_mode = regime.subject_mode;
  for (size_t i = 0; i < ds.samples.size(); ++i)
    if (ds.samples[i].label_valid) out.task_set.push_back(static_cast<int>(i));
  if (regime.has_sc)
    for (const losses::PairSample& p : build_pairs(ds, regime, dt))
      out.sc_set.push_back(p.i);
  return out;
}

Split generate_split(const WorldConfig& cfg, const SplitSpec& split,
                     const RegimeSpec& regime, const NoiseModel& noise,
                     uint64_t seed) {
  if (split.fine_tune < 1 || split.gap < 0 || split.test < 1)
    fail("split needs fine_tune >= 1, gap >= 0, test >= 1");
  const int total = split.fine_tune + split.gap + split.test;
  WorldConfig w = cfg;
  w.duration = total / cfg.rate_hz;
  const std::vector<WorldState> traj =
      generate_trajectory(w, rng::derive_seed(seed, 0x5452));

  const std::vector<WorldState> fine(traj.begin(),
                                     traj.begin() + split.fine_tune);
  const std::vector<WorldState> test(
      traj.begin() + split.fine_tune + split.gap, traj.end());
  Split out;
  out.fine_tune =
      build_dataset(fine, w, regime, noise, rng::derive_seed(seed, 0x4654));
  out.test = build_dataset(test, w, test_regime(), noise,
                           rng::derive_seed(seed, 0x5445));
  return out;
}

namespace {

void put_bytes(std::string& buf, const void* p, size_t n) {
  buf.append(static_cast<const char*>(p), n);
}

template <typename T>
void put(std::string& buf, T v) {
  put_bytes(buf, &v, sizeof(v));
}

void put_pose(std::string& buf, const Pose4& p) {
  put(buf, static_cast<float>(p.x));
  put(buf, static_cast<float>(p.y));
  put(buf, static_cast<float>(p.z));
  put(buf, static_cast<float>(p.phi));
}

struct Reader {
  const char* p;
  const char* end;

  void need(size_t n) const {
    if (static_cast<size_t>(end - p) < n)
      throw std::runtime_error("dataset: truncated file");
  }
  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, p, sizeof(T));
    p += sizeof(T);
    return v;
  }
  Pose4 get_pose() {
    Pose4 q;
    q.x = get<float>();
    q.y = get<float>();
    q.z = get<float>();
    q.phi = get<float>();
    return q;
  }
};

}  // namespace

void save_dataset(const std::string& path, const Dataset& ds) {
  std::string buf;
  buf.reserve(32 + ds.samples.size() * (15443));
  put_bytes(buf, "FTDS", 4);
  put<uint16_t>(buf, 1);
  put<uint32_t>(buf, static_cast<uint32_t>(ds.samples.size()));
  put<uint16_t>(buf, ds.height);
  put<uint16_t>(buf, ds.width);
  put<float>(buf, ds.rate_hz);
  const size_t pixels = static_cast<size_t>(ds.height) * ds.width;
  for (const Sample& sm : ds.samples) {
    if (sm.image.size() != pixels)
      throw std::runtime_error("dataset: sample image size mismatch");
    put<double>(buf, sm.timestamp);
    put_bytes(buf, sm.image.data(), sm.image.size());
    put<uint8_t>(buf, sm.label_valid ? 1 : 0);
    put_pose(buf, sm.label_valid ? sm.label : Pose4{});
    put<uint8_t>(buf, sm.odom_valid ? 1 : 0);
    put_pose(buf, sm.odom_valid ? sm.odom : Pose4{});
    put<uint8_t>(buf, sm.subject_valid ? 1 : 0);
    put_pose(buf, sm.subject_valid ? sm.subject : Pose4{});
    put_pose(buf, sm.true_relative);
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("dataset: cannot open " + path);
  f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!f) throw std::runtime_error("dataset: write failed for " + path);
}

Dataset load_dataset(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("dataset: cannot open " + path);
  std::string buf((std::istreambuf_iterator<char>(f)),
                  std::istreambuf_iterator<char>());
  Reader r{buf.data(), buf.data() + buf.size()};
  r.need(4);
  if (std::memcmp(r.p, "FTDS", 4) != 0)
    throw std::runtime_error("dataset: bad magic");
  r.p += 4;
  const uint16_t version = r.get<uint16_t>();
  if (version != 1) throw std::runtime_error("dataset: unsupported version");
  const uint32_t count = r.get<uint32_t>();
  Dataset ds;
  ds.height = r.get<uint16_t>();
  ds.width = r.get<uint16_t>();
  ds.rate_hz = r.get<float>();
  if (ds.height == 0 || ds.width == 0 || !(ds.rate_hz > 0.0f))
    throw std::runtime_error("dataset: bad header");
  const size_t pixels = static_cast<size_t>(ds.height) * ds.width;
  ds.samples.resize(count);
  for (Sample& sm : ds.samples) {
    sm.timestamp = r.get<double>();
    r.need(pixels);
    sm.image.assign(r.p, r.p + pixels);
    r.p += pixels;
    sm.label_valid = r.get<uint8_t>() != 0;
    sm.label = r.get_pose();
    sm.odom_valid = r.get<uint8_t>() != 0;
    sm.odom = r.get_pose();
    sm.subject_valid = r.get<uint8_t>() != 0;
    sm.subject = r.get_pose();
    sm.true_relative = r.get_pose();
  }
  if (r.p != r.end) throw std::runtime_error("dataset: trailing bytes");
  return ds;
}

Tensor to_input(const std::vector<uint8_t>& image) {
  if (image.size() != static_cast<size_t>(kImageHeight) * kImageWidth)
    fail("image size mismatch");
  Tensor t({1, kImageHeight, kImageWidth});
  for (size_t i = 0; i < image.size(); ++i)
    t.data[i] = static_cast<float>(image[i]) * (1.0f / 255.0f);
  return t;
}

WorldConfig source_world() { return WorldConfig{}; }

WorldConfig target_world() {
  WorldConfig w;
  RenderParams& rp = w.render;
  rp.body_a = 0.138;
  rp.body_b = 0.118;
  rp.head_r = 0.050;
  rp.legs_r = 0.052;
  rp.head_dz = 0.128;
  rp.legs_dz = -0.162;
  rp.head_yaw_shift = 0.085;
  rp.body_gray = 176.0;
  rp.head_gray = 214.0;
  rp.legs_gray = 150.0;
  rp.bg_base = 70.0;
  rp.bg_amp1 = 33.0;
  rp.bg_amp2 = 22.0;
  rp.bg_amp3 = 14.0;
  rp.bg_w1 = 0.095;
  rp.bg_w2 = 4.1e-4;
  rp.bg_w3 = 0.052;
  rp.bg_w4 = 1.7e-4;
  rp.bg_p1 = 2.6;
  rp.bg_p2 = 0.9;
  rp.edge_soft = 1.4;
  rp.pixel_noise = 14.0;
  // The deployment subject walks briskly, unlike the near-still pretraining
  // subject, so consistency training that assumes a still subject pays a
  // real penalty there.
  w.subject_v_max = 0.22;
  w.subject_vel_sigma = 0.05;
  w.subject_area = 0.8;
  return w;
}

namespace {

template <typename T>
void get_if(const nlohmann::json& j, const char* key, T& field) {
  if (j.contains(key)) j.at(key).get_to(field);
}

nlohmann::json render_to_json(const RenderParams& rp) {
  return nlohmann::json{{"focal", rp.focal},
                        {"min_depth", rp.min_depth},
                        {"body_a", rp.body_a},
                        {"body_b", rp.body_b},
                        {"head_r", rp.head_r},
                        {"legs_r", rp.legs_r},
                        {"head_dz", rp.head_dz},
                        {"legs_dz", rp.legs_dz},
                        {"head_yaw_shift", rp.head_yaw_shift},
                        {"yaw_width_gain", rp.yaw_width_gain},
                        {"body_gray", rp.body_gray},
                        {"head_gray", rp.head_gray},
                        {"legs_gray", rp.legs_gray},
                        {"bg_base", rp.bg_base},
                        {"bg_amp1", rp.bg_amp1},
                        {"bg_amp2", rp.bg_amp2},
                        {"bg_amp3", rp.bg_amp3},
                        {"bg_w1", rp.bg_w1},
                        {"bg_w2", rp.bg_w2},
                        {"bg_w3", rp.bg_w3},
                        {"bg_w4", rp.bg_w4},
                        {"bg_p1", rp.bg_p1},
                        {"bg_p2", rp.bg_p2},
                        {"edge_soft", rp.edge_soft},
                        {"pixel_noise", rp.pixel_noise}};
}

void render_from_json(const nlohmann::json& j, RenderParams& rp) {
  get_if(j, "focal", rp.focal);
  get_if(j, "min_depth", rp.min_depth);
  get_if(j, "body_a", rp.body_a);
  get_if(j, "body_b", rp.body_b);
  get_if(j, "head_r", rp.head_r);
  get_if(j, "legs_r", rp.legs_r);
  get_if(j, "head_dz", rp.head_dz);
  get_if(j, "legs_dz", rp.legs_dz);
  get_if(j, "head_yaw_shift", rp.head_yaw_shift);
  get_if(j, "yaw_width_gain", rp.yaw_width_gain);
  get_if(j, "body_gray", rp.body_gray);
  get_if(j, "head_gray", rp.head_gray);
  get_if(j, "legs_gray", rp.legs_gray);
  get_if(j, "bg_base", rp.bg_base);
  get_if(j, "bg_amp1", rp.bg_amp1);
  get_if(j, "bg_amp2", rp.bg_amp2);
  get_if(j, "bg_amp3", rp.bg_amp3);
  get_if(j, "bg_w1", rp.bg_w1);
  get_if(j, "bg_w2", rp.bg_w2);
  get_if(j, "bg_w3", rp.bg_w3);
  get_if(j, "bg_w4", rp.bg_w4);
  get_if(j, "bg_p1", rp.bg_p1);
  get_if(j, "bg_p2", rp.bg_p2);
  get_if(j, "edge_soft", rp.edge_soft);
  get_if(j, "pixel_noise", rp.pixel_noise);
}

const char* subject_motion_name(SubjectMotion m) {
  switch (m) {
    case SubjectMotion::still:
      return "still";
    case SubjectMotion::random_walk:
      return "random_walk";
    case SubjectMotion::scripted:
      return "scripted";
  }
  return "random_walk";
}

}  // namespace

std::string world_config_to_json(const WorldConfig& cfg) {
  nlohmann::json j{{"duration", cfg.duration},
                   {"rate_hz", cfg.rate_hz},
                   {"v_max", cfg.v_max},
                   {"vz_max", cfg.vz_max},
                   {"w_max", cfg.w_max},
                   {"vel_smooth", cfg.vel_smooth},
                   {"vel_sigma", cfg.vel_sigma},
                   {"vz_sigma", cfg.vz_sigma},
                   {"yaw_track_gain", cfg.yaw_track_gain},
                   {"yaw_sigma", cfg.yaw_sigma},
                   {"range_lo", cfg.range_lo},
                   {"range_hi", cfg.range_hi},
                   {"range_gain", cfg.range_gain},
                   {"arena_xy", cfg.arena_xy},
                   {"arena_z", cfg.arena_z},
                   {"subject_motion", subject_motion_name(cfg.subject_motion)},
                   {"subject_v_max", cfg.subject_v_max},
                   {"subject_vel_smooth", cfg.subject_vel_smooth},
                   {"subject_vel_sigma", cfg.subject_vel_sigma},
                   {"subject_track_gain", cfg.subject_track_gain},
                   {"subject_w_max", cfg.subject_w_max},
                   {"subject_yaw_dev_smooth", cfg.subject_yaw_dev_smooth},
                   {"subject_yaw_dev_sigma", cfg.subject_yaw_dev_sigma},
                   {"subject_yaw_dev_max", cfg.subject_yaw_dev_max},
                   {"subject_area", cfg.subject_area},
                   {"render", render_to_json(cfg.render)}};
  return j.dump(2);
}

WorldConfig world_config_from_json(const std::string& text) {
  const nlohmann::json j = nlohmann::json::parse(text);
  WorldConfig cfg;
  get_if(j, "duration", cfg.duration);
  get_if(j, "rate_hz", cfg.rate_hz);
  get_if(j, "v_max", cfg.v_max);
  get_if(j, "vz_max", cfg.vz_max);
  get_if(j, "w_max", cfg.w_max);
  get_if(j, "vel_smooth", cfg.vel_smooth);
  get_if(j, "vel_sigma", cfg.vel_sigma);
  get_if(j, "vz_sigma", cfg.vz_sigma);
  get_if(j, "yaw_track_gain", cfg.yaw_track_gain);
  get_if(j, "yaw_sigma", cfg.yaw_sigma);
  get_if(j, "range_lo", cfg.range_lo);
  get_if(j, "range_hi", cfg.range_hi);
  get_if(j, "range_gain", cfg.range_gain);
  get_if(j, "arena_xy", cfg.arena_xy);
  get_if(j, "arena_z", cfg.arena_z);
  if (j.contains("subject_motion"))
    cfg.subject_motion =
        subject_motion_from_name(j.at("subject_motion").get<std::string>());
  get_if(j, "subject_v_max", cfg.subject_v_max);
  get_if(j, "subject_vel_smooth", cfg.subject_vel_smooth);
  get_if(j, "subject_vel_sigma", cfg.subject_vel_sigma);
  get_if(j, "subject_track_gain", cfg.subject_track_gain);
  get_if(j, "subject_w_max", cfg.subject_w_max);
  get_if(j, "subject_yaw_dev_smooth", cfg.subject_yaw_dev_smooth);
  get_if(j, "subject_yaw_dev_sigma", cfg.subject_yaw_dev_sigma);
  get_if(j, "subject_yaw_dev_max", cfg.subject_yaw_dev_max);
  get_if(j, "subject_area", cfg.subject_area);
  if (j.contains("render")) render_from_json(j.at("render"), cfg.render);
  return cfg;
}

std::string noise_model_to_json(const NoiseModel& nm) {
  nlohmann::json j{{"sigma_xy", nm.sigma_xy},
                   {"sigma_z", nm.sigma_z},
                   {"sigma_phi", nm.sigma_phi},
                   {"seed", nm.seed}};
  return j.dump(2);
}

NoiseModel noise_model_from_json(const std::string& text) {
  const nlohmann::json j = nlohmann::json::parse(text);
  NoiseModel nm;
  get_if(j, "sigma_xy", nm.sigma_xy);
  get_if(j, "sigma_z", nm.sigma_z);
  get_if(j, "sigma_phi", nm.sigma_phi);
  get_if(j, "seed", nm.seed);
  return nm;
}

}  // namespace tinyft::simworld
