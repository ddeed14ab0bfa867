#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tinyft/model.hpp"

namespace tinyft::costmodel {

using model::Architecture;
using model::Strategy;

struct MemoryBreakdown {
  int64_t input_bytes = 0;        // u8 image, or u8 features for fc
  int64_t activation_bytes = 0;   // retained forward tensors / sign masks
  int64_t weight_grad_bytes = 0;  // 4 bytes per trainable element
  int64_t routing_bytes = 0;      // pool argmax codes, outside the total
  int64_t total_bytes = 0;        // input + activation + weight_grad
};

struct MacBreakdown {
  uint64_t fw = 0;
  uint64_t bw_ig = 0;
  uint64_t bw_wg = 0;
  uint64_t total = 0;
};

struct CostReport {
  std::string strategy;
  int64_t params = 0;
  double params_k = 0.0;
  MemoryBreakdown memory;
  MacBreakdown macs;
  double fw_mmac = 0.0, bw_ig_mmac = 0.0, bw_wg_mmac = 0.0, total_mmac = 0.0;
};

int64_t count_params(const Architecture& arch, Strategy s);

// Per-frame training memory of one strategy. Activation bytes follow what
// the backward pass actually retains: conv/fc inputs plus batchnorm inputs
// (all), batchnorm inputs only (bn), 1-bit relu sign masks (bias), nothing
// (fc). Pool routing codes are reported separately and excluded from the
// total, matching the reference table's three memory categories.
MemoryBreakdown memory_per_frame(const Architecture& arch, Strategy s);

// Per-frame-per-step MACs of one strategy, matching what the instrumented
// kernels count: dense transposed convolutions for input gradients, two
// MACs per element for batchnorm weight gradients, relu mask recomputation
// under bn, and dequantize + head only under fc.
MacBreakdown macs_per_step(const Architecture& arch, Strategy s);

CostReport strategy_report(const Architecture& arch, Strategy s);
std::vector<CostReport> full_table(const Architecture& arch);

// One instrumented forward + backward (or feature step for fc), returning
// the kernel MAC counter's reading for comparison against macs_per_step.
uint64_t measured_step_macs(const Architecture& arch,
                            const model::ParamStore& params, Strategy s,
                            const Tensor& image);

// kB here means KiB (1024 bytes), the reading under which the reference
// table's fc row reproduces to 0.1 kB.
std::string to_tsv(const std::vector<CostReport>& table);
std::string to_json(const std::vector<CostReport>& table);

}  // namespace tinyft::costmodel
