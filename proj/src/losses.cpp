#include "tinyft/losses.hpp"

#include <array>
#include <cmath>
#include <stdexcept>

namespace tinyft::losses {

namespace {

[[noreturn]] void fail(const std::string& msg) {
  throw std::invalid_argument("losses: " + msg);
}

}  // namespace

DroneOdomMode drone_odom_from_name(const std::string& s) {
  if (s == "perfect_absolute") return DroneOdomMode::perfect_absolute;
  if (s == "perfect_odometry") return DroneOdomMode::perfect_odometry;
  if (s == "noisy_odometry") return DroneOdomMode::noisy_odometry;
  fail("unknown drone odometry mode '" + s + "'");
}

SubjectMode subject_from_name(const std::string& s) {
  if (s == "perfect_absolute") return SubjectMode::perfect_absolute;
  if (s == "perfect_odometry") return SubjectMode::perfect_odometry;
  if (s == "unknown_still") return SubjectMode::unknown_still;
  fail("unknown subject mode '" + s + "'");
}

void SupervisionRegime::validate(double sampling_period) const {
  if (lambda_sc < 0.0) fail("lambda_sc must be nonnegative");
  if (!sc_set.empty()) {
    if (dt <= 0.0) fail("dt must be positive");
    const double steps = dt / sampling_period;
    if (std::abs(steps - std::round(steps)) > 1e-9) {
      fail("dt must be a multiple of the sampling period");
    }
  }
}

LossResult task_loss(const std::vector<Pose4>& preds,
                     const std::vector<Pose4>& targets,
                     const std::vector<int>& task_set) {
  LossResult r;
  r.grads.assign(preds.size(), Pose4{});
  if (task_set.empty()) return r;
  const double inv_n = 1.0 / static_cast<double>(task_set.size());
  for (int idx : task_set) {
    const size_t i = static_cast<size_t>(idx);
    if (i >= preds.size() || i >= targets.size()) fail("task index out of range");
    r.value += geometry::delta(preds[i], targets[i]) * inv_n;
    const std::array<double, 4> g = geometry::delta_gradient(preds[i], targets[i]);
    r.grads[i].x += g[0] * inv_n;
    r.grads[i].y += g[1] * inv_n;
    r.grads[i].z += g[2] * inv_n;
    r.grads[i].phi += g[3] * inv_n;
  }
  return r;
}

double sc_pair_term(const Pose4& pred_i, const Pose4& pred_j,
                    const Pose4& drone_odom, const Pose4& subject_motion,
                    Pose4* grad_i, Pose4* grad_j) {
  const Pose4 m = geometry::compose(drone_odom, pred_j);
  const Pose4 e = geometry::compose(geometry::invert(pred_i), m);
  const double v = geometry::delta(e, subject_motion);
  if (!grad_i && !grad_j) return v;

  const std::array<double, 4> ge = geometry::delta_gradient(e, subject_motion);
  if (grad_i) {
    const double ca = std::cos(pred_i.phi), sa = std::sin(pred_i.phi);
    grad_i->x = -ca * ge[0] + sa * ge[1];
    grad_i->y = -sa * ge[0] - ca * ge[1];
    grad_i->z = -ge[2];
    grad_i->phi = e.y * ge[0] - e.x * ge[1] - ge[3];
  }
  if (grad_j) {
    // The pair's estimate depends on pred_j through the rotation by
    // pred_i.phi - drone_odom.phi only.
    const double cp = std::cos(pred_i.phi - drone_odom.phi);
    const double sp = std::sin(pred_i.phi - drone_odom.phi);
    grad_j->x = cp * ge[0] - sp * ge[1];
    grad_j->y = sp * ge[0] + cp * ge[1];
    grad_j->z = ge[2];
    grad_j->phi = ge[3];
  }
  return v;
}

LossResult sc_loss(const std::vector<Pose4>& preds,
                   const std::vector<PairSample>& pairs) {
  LossResult r;
  r.grads.assign(preds.size(), Pose4{});
  int valid = 0;
  for (const PairSample& p : pairs) {
    if (p.i < 0 || p.j < 0) {
      ++r.dropped_pairs;
      continue;
    }
    if (static_cast<size_t>(p.i) >= preds.size() ||
        static_cast<size_t>(p.j) >= preds.size()) {
      fail("pair index out of range");
    }
    ++valid;
  }
  if (valid == 0) return r;
  const double inv_n = 1.0 / static_cast<double>(valid);
  for (const PairSample& p : pairs) {
    if (p.i < 0 || p.j < 0) continue;
    Pose4 gi, gj;
    r.value += inv_n * sc_pair_term(preds[static_cast<size_t>(p.i)],
                                    preds[static_cast<size_t>(p.j)],
                                    p.drone_odom, p.subject_motion, &gi, &gj);
    Pose4& ai = r.grads[static_cast<size_t>(p.i)];
    ai.x += gi.x * inv_n; ai.y += gi.y * inv_n;
    ai.z += gi.z * inv_n; ai.phi += gi.phi * inv_n;
    Pose4& aj = r.grads[static_cast<size_t>(p.j)];
    aj.x += gj.x * inv_n; aj.y += gj.y * inv_n;
    aj.z += gj.z * inv_n; aj.phi += gj.phi * inv_n;
  }
  return r;
}

LossResult combined_loss(const std::vector<Pose4>& preds,
                         const std::vector<Pose4>& targets,
                         const std::vector<int>& task_set,
                         const std::vector<PairSample>& pairs,
                         double lambda_sc) {
  if (task_set.empty() && pairs.empty()) fail("no supervision signal");
  const LossResult t = task_loss(preds, targets, task_set);
  const LossResult s = sc_loss(preds, pairs);
  LossResult r;
  r.value = t.value + lambda_sc * s.value;
  r.dropped_pairs = s.dropped_pairs;
  r.grads.assign(preds.size(), Pose4{});
  for (size_t i = 0; i < preds.size(); ++i) {
    r.grads[i].x = t.grads[i].x + lambda_sc * s.grads[i].x;
    r.grads[i].y = t.grads[i].y + lambda_sc * s.grads[i].y;
    r.grads[i].z = t.grads[i].z + lambda_sc * s.grads[i].z;
    r.grads[i].phi = t.grads[i].phi + lambda_sc * s.grads[i].phi;
  }
  return r;
}

}  // namespace tinyft::losses
