#include "tinyft/costmodel.hpp"

#include <json.hpp>

#include <sstream>

#include "tinyft/quantization.hpp"

namespace tinyft::costmodel {

using model::LayerDesc;
using model::LayerKind;

namespace {

int64_t prod(const std::vector<int64_t>& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

uint64_t conv_fw_macs(const Architecture& a, size_t i) {
  const LayerDesc& l = a.layers[i];
  return static_cast<uint64_t>(prod(a.out_shape[i])) *
         static_cast<uint64_t>(l.in_ch) * static_cast<uint64_t>(l.kernel) *
         static_cast<uint64_t>(l.kernel);
}

}  // namespace

int64_t count_params(const Architecture& arch, Strategy s) {
  return model::trainable_param_count(arch, s);
}

MemoryBreakdown memory_per_frame(const Architecture& arch, Strategy s) {
  MemoryBreakdown m;
  m.input_bytes = s == Strategy::fc
                      ? arch.feature_dim
                      : static_cast<int64_t>(arch.in_c) * arch.in_h * arch.in_w;
  for (size_t i = 0; i < arch.layers.size(); ++i) {
    const LayerDesc& l = arch.layers[i];
    switch (s) {
      case Strategy::all:
        if (l.kind == LayerKind::conv || l.kind == LayerKind::fc ||
            l.kind == LayerKind::batchnorm) {
          m.activation_bytes += 4 * prod(arch.in_shape[i]);
        }
        break;
      case Strategy::bn:
        if (l.kind == LayerKind::batchnorm) m.activation_bytes += 4 * prod(arch.in_shape[i]);
        break;
      case Strategy::bias:
        if (l.kind == LayerKind::relu) m.activation_bytes += (prod(arch.in_shape[i]) + 7) / 8;
        break;
      case Strategy::fc:
        break;
    }
    if (s != Strategy::fc && l.kind == LayerKind::maxpool) {
      m.routing_bytes += (prod(arch.out_shape[i]) + 3) / 4;  // 2-bit codes
    }
  }
  m.weight_grad_bytes = 4 * count_params(arch, s);
  m.total_bytes = m.input_bytes + m.activation_bytes + m.weight_grad_bytes;
  return m;
}

MacBreakdown macs_per_step(const Architecture& arch, Strategy s) {
  MacBreakdown b;
  const model::TrainMask tm = model::build_mask(arch, s);
  const int earliest = tm.earliest_trainable;

  if (s == Strategy::fc) {
    // Features are precomputed once; a step dequantizes them, runs the head
    // and its weight gradient.
    const LayerDesc& fc = arch.layers.back();
    const uint64_t head = static_cast<uint64_t>(fc.in_ch) * fc.out_ch;
    b.fw = static_cast<uint64_t>(arch.feature_dim) + head;
    b.bw_wg = head;
    b.total = b.fw + b.bw_ig + b.bw_wg;
    return b;
  }

  for (size_t i = 0; i < arch.layers.size(); ++i) {
    const LayerDesc& l = arch.layers[i];
    const bool ig_here = static_cast<int>(i) > earliest;
    switch (l.kind) {
      case LayerKind::conv: {
        b.fw += conv_fw_macs(arch, i);
        // Input gradient runs as a dense transposed convolution filling the
        // whole input-sized tensor.
        if (ig_here) {
          b.bw_ig += static_cast<uint64_t>(prod(arch.in_shape[i])) *
                     static_cast<uint64_t>(l.out_ch) *
                     static_cast<uint64_t>(l.kernel) * static_cast<uint64_t>(l.kernel);
        }
        if (tm.slots[i][0]) b.bw_wg += conv_fw_macs(arch, i);
        break;
      }
      case LayerKind::batchnorm: {
        const uint64_t n = static_cast<uint64_t>(prod(arch.in_shape[i]));
        b.fw += n;
        if (ig_here) b.bw_ig += n;
        if (tm.slots[i][0]) b.bw_wg += 2 * n;  // dgamma needs two multiplies per element
        break;
      }
      case LayerKind::relu:
        // Under bn the forward mask is not stored; backward re-applies the
        // frozen batchnorm affine to the retained conv output to recover it.
        if (s == Strategy::bn) b.bw_ig += static_cast<uint64_t>(prod(arch.in_shape[i]));
        break;
      case LayerKind::maxpool:
      case LayerKind::flatten:
        break;
      case LayerKind::fc: {
        const uint64_t n = static_cast<uint64_t>(l.in_ch) * l.out_ch;
        b.fw += n;
        if (ig_here) b.bw_ig += n;
        if (tm.slots[i][0]) b.bw_wg += n;
        break;
      }
    }
  }
  b.total = b.fw + b.bw_ig + b.bw_wg;
  return b;
}

CostReport strategy_report(const Architecture& arch, Strategy s) {
  CostReport r;
  r.strategy = model::strategy_name(s);
  r.params = count_params(arch, s);
  r.params_k = static_cast<double>(r.params) / 1000.0;
  r.memory = memory_per_frame(arch, s);
  r.macs = macs_per_step(arch, s);
  r.fw_mmac = static_cast<double>(r.macs.fw) / 1e6;
  r.bw_ig_mmac = static_cast<double>(r.macs.bw_ig) / 1e6;
  r.bw_wg_mmac = static_cast<double>(r.macs.bw_wg) / 1e6;
  r.total_mmac = static_cast<double>(r.macs.total) / 1e6;
  return r;
}

std::vector<CostReport> full_table(const Architecture& arch) {
  std::vector<CostReport> t;
  for (Strategy s : {Strategy::all, Strategy::bn, Strategy::bias, Strategy::fc}) {
    t.push_back(strategy_report(arch, s));
  }
  return t;
}

uint64_t measured_step_macs(const Architecture& arch,
                            const model::ParamStore& params, Strategy s,
                            const Tensor& image) {
  Tensor dout({arch.outputs});
  for (float& v : dout.data) v = 1.0f;
  if (s == Strategy::fc) {
    auto [feats, qp] = model::precompute_features(arch, params, {image});
    model::GradStore grads = model::make_grads(arch);
    kernels::mac_counter_reset();
    const Tensor f = quant::dequantize(feats[0]);
    model::forward_from_features(arch, params, f);
    model::backward_from_features(arch, f, dout, grads);
    return kernels::mac_counter_value();
  }
  model::GradStore grads = model::make_grads(arch);
  kernels::mac_counter_reset();
  auto r = model::forward(arch, params, image, s);
  model::backward(arch, params, r.cache, dout, grads);
  return kernels::mac_counter_value();
}

std::string to_tsv(const std::vector<CostReport>& table) {
  std::ostringstream o;
  o << "strategy\tparams_k\tinput_kb\tactivation_kb\tweight_grad_kb\ttotal_kb"
    << "\tfw_mmac\tbw_ig_mmac\tbw_wg_mmac\ttotal_mmac\n";
  o.setf(std::ios::fixed);
  for (const CostReport& r : table) {
    o.precision(3);
    o << r.strategy << '\t' << r.params_k << '\t';
    o.precision(2);
    o << static_cast<double>(r.memory.input_bytes) / 1024.0 << '\t'
      << static_cast<double>(r.memory.activation_bytes) / 1024.0 << '\t'
      << static_cast<double>(r.memory.weight_grad_bytes) / 1024.0 << '\t'
      << static_cast<double>(r.memory.total_bytes) / 1024.0 << '\t';
    o.precision(5);
    o << r.fw_mmac << '\t' << r.bw_ig_mmac << '\t' << r.bw_wg_mmac << '\t'
      << r.total_mmac << '\n';
  }
  return o.str();
}

std::string to_json(const std::vector<CostReport>& table) {
  nlohmann::json arr = nlohmann::json::array();
  for (const CostReport& r : table) {
    nlohmann::json e;
    e["strategy"] = r.strategy;
    e["params"] = r.params;
    e["params_k"] = r.params_k;
    e["input_bytes"] = r.memory.input_bytes;
    e["activation_bytes"] = r.memory.activation_bytes;
    e["weight_grad_bytes"] = r.memory.weight_grad_bytes;
    e["routing_bytes"] = r.memory.routing_bytes;
    e["total_bytes"] = r.memory.total_bytes;
    e["fw_macs"] = r.macs.fw;
    e["bw_ig_macs"] = r.macs.bw_ig;
    e["bw_wg_macs"] = r.macs.bw_wg;
    e["total_macs"] = r.macs.total;
    e["fw_mmac"] = r.fw_mmac;
    e["bw_ig_mmac"] = r.bw_ig_mmac;
    e["bw_wg_mmac"] = r.bw_wg_mmac;
    e["total_mmac"] = r.total_mmac;
    arr.push_back(e);
  }
  return arr.dump(2);
}

}  // namespace tinyft::costmodel
