#pragma once

#include <string>
#include <vector>

#include "tinyft/geometry.hpp"

namespace tinyft::losses {

using geometry::Pose4;

enum class DroneOdomMode { perfect_absolute, perfect_odometry, noisy_odometry };
enum class SubjectMode { perfect_absolute, perfect_odometry, unknown_still };

DroneOdomMode drone_odom_from_name(const std::string& s);
SubjectMode subject_from_name(const std::string& s);

// What supervises a fine-tuning run: which samples carry target poses,
// which anchor a consistency pair dt seconds later, and where the pair's
// relative motions come from.
struct SupervisionRegime {
  std::vector<int> task_set;
  std::vector<int> sc_set;  // anchor indices i, partner j is dt later
  double dt = 2.0;
  double lambda_sc = 1.0;
  DroneOdomMode drone_odom_mode = DroneOdomMode::perfect_absolute;
  SubjectMode subject_mode = SubjectMode::unknown_still;

  // throws std::invalid_argument unless lambda_sc >= 0 and dt is a
  // positive multiple of the sampling period
  void validate(double sampling_period) const;
};

// One consistency pair, fully resolved: indices into the prediction array
// plus the relative motions between its two timesteps. drone_odom is the
// drone's motion i -> j expressed in its pose-i frame; subject_motion is
// the subject's motion i -> j in the subject's pose-i frame (identity when
// the subject is assumed still). Members with index -1 are dropped.
struct PairSample {
  int i = -1;
  int j = -1;
  Pose4 drone_odom;
  Pose4 subject_motion;
};

struct LossResult {
  double value = 0.0;
  std::vector<Pose4> grads;  // d value / d prediction, per prediction index
  int dropped_pairs = 0;
};

// Mean of delta(prediction, target) over the task set; empty set gives 0.
LossResult task_loss(const std::vector<Pose4>& preds,
                     const std::vector<Pose4>& targets,
                     const std::vector<int>& task_set);

// One pair's consistency error: the subject motion implied by the two
// predictions and the drone odometry, compared against the given subject
// motion,
//   delta( invert(pred_i) * drone_odom * pred_j , subject_motion ).
// Optional gradients w.r.t. both predictions.
double sc_pair_term(const Pose4& pred_i, const Pose4& pred_j,
                    const Pose4& drone_odom, const Pose4& subject_motion,
                    Pose4* grad_i, Pose4* grad_j);

// Mean of sc_pair_term over the valid pairs; pairs with a missing member
// are excluded and counted in dropped_pairs.
LossResult sc_loss(const std::vector<Pose4>& preds,
                   const std::vector<PairSample>& pairs);

// task + lambda_sc * sc with gradients summed. Throws std::invalid_argument
// when both sets are empty ("no supervision signal").
LossResult combined_loss(const std::vector<Pose4>& preds,
                         const std::vector<Pose4>& targets,
                         const std::vector<int>& task_set,
                         const std::vector<PairSample>& pairs,
                         double lambda_sc);

}  // namespace tinyft::losses
