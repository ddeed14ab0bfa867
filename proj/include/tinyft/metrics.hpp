#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "tinyft/geometry.hpp"
#include "tinyft/model.hpp"
#include "tinyft/simworld.hpp"

namespace tinyft::metrics {

using geometry::Pose4;

// Regression quality on a test set. mae is the paper-style aggregate,
// mean over samples of delta(pred, truth) / 4, mixing meters and radians
// with equal weight; mae_sum keeps the unscaled component sum and
// mae_component the per-output means so no information is lost. R2 is
// 1 - SSE/SST against the test-set mean, in percent, per output; yaw
// residuals are plain differences (targets stay far from the wrap point).
struct Metrics {
  double mae = 0.0;
  double mae_sum = 0.0;
  std::array<double, 4> mae_component{};
  std::array<double, 4> r2_percent{};
  double r2_mean = 0.0;
  int64_t count = 0;
};

// Throws std::invalid_argument on empty or mismatched inputs. A constant
// target column with zero prediction error scores R2 100, otherwise 0.
Metrics evaluate(const std::vector<Pose4>& preds,
                 const std::vector<Pose4>& labels);

// Runs inference over every sample and scores against true_relative.
Metrics evaluate_model(const model::Architecture& arch,
                       const model::ParamStore& params,
                       const simworld::Dataset& ds);

std::string to_json(const Metrics& m);

// Paired one-sided t statistic for H1: mean(greater) > mean(lesser),
// t = mean(d) * sqrt(n) / sd(d) with d = greater - lesser and the n-1
// variance. Zero-variance differences collapse to +/-inf (or 0 when the
// mean is zero too). Throws on n < 2 or size mismatch.
double paired_t_statistic(const std::vector<double>& greater,
                          const std::vector<double>& lesser);

// Upper 5% critical value of Student's t for df in [1, 30]; exceeding it
// rejects the one-sided null at p < 0.05.
double t_critical_05(int df);

}  // namespace tinyft::metrics
