// Experiment harness: dataset generation, fine-tuning, evaluation, cost
// reporting, sweeps, and quantization over the pose-regression engine.
// Every command is deterministic under --seed and prints a machine-readable
// JSON payload alongside the human-readable lines.

#include <CLI11.hpp>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <future>
#include <json.hpp>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "tinyft/costmodel.hpp"
#include "tinyft/metrics.hpp"
#include "tinyft/model.hpp"
#include "tinyft/simworld.hpp"
#include "tinyft/trainer.hpp"

using namespace tinyft;
using nlohmann::json;

namespace {

struct usage_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

json load_config(const std::string& path) {
  if (path.empty()) return json::object();
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read config " + path);
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded()) throw std::runtime_error("config is not valid JSON");
  if (!j.is_object()) throw std::runtime_error("config root must be an object");
  return j;
}

// key=value with dotted paths, value parsed as JSON when possible so
// numbers and booleans keep their types: --set train.epochs=3
void apply_sets(json& root, const std::vector<std::string>& sets) {
  for (const std::string& kv : sets) {
    const size_t eq = kv.find('=');
    if (eq == std::string::npos || eq == 0)
      throw usage_error("--set expects key=value, got '" + kv + "'");
    const std::string key = kv.substr(0, eq);
    const std::string raw = kv.substr(eq + 1);
    json value = json::parse(raw, nullptr, false);
    if (value.is_discarded()) value = raw;
    json* node = &root;
    size_t pos = 0;
    while (true) {
      const size_t dot = key.find('.', pos);
      const std::string part = key.substr(pos, dot - pos);
      if (part.empty()) throw usage_error("--set key has an empty segment");
      if (dot == std::string::npos) {
        (*node)[part] = value;
        break;
      }
      node = &(*node)[part];
      pos = dot + 1;
    }
  }
}

simworld::WorldConfig world_from(const json& cfg) {
  const std::string preset = cfg.value("world_preset", "target");
  simworld::WorldConfig base;
  if (preset == "target")
    base = simworld::target_world();
  else if (preset == "source")
    base = simworld::source_world();
  else
    throw usage_error("world_preset must be 'source' or 'target'");
  json merged = json::parse(simworld::world_config_to_json(base));
  if (cfg.contains("world")) merged.update(cfg.at("world"), true);
  return simworld::world_config_from_json(merged.dump());
}

simworld::NoiseModel noise_from(const json& cfg) {
  if (!cfg.contains("noise")) return simworld::NoiseModel{};
  return simworld::noise_model_from_json(cfg.at("noise").dump());
}

simworld::SplitSpec split_from(const json& cfg) {
  simworld::SplitSpec s;
  if (!cfg.contains("split")) return s;
  const json& j = cfg.at("split");
  s.fine_tune = j.value("fine_tune", s.fine_tune);
  s.gap = j.value("gap", s.gap);
  s.test = j.value("test", s.test);
  return s;
}

trainer::TrainConfig train_from(const json& cfg) {
  trainer::TrainConfig t;
  if (!cfg.contains("train")) return t;
  const json& j = cfg.at("train");
  t.learning_rate = j.value("learning_rate", t.learning_rate);
  t.epochs = j.value("epochs", t.epochs);
  t.batch_size = j.value("batch_size", t.batch_size);
  t.batches_per_epoch = j.value("batches_per_epoch", t.batches_per_epoch);
  t.augment_photometric = j.value("augment_photometric", t.augment_photometric);
  t.augment_hflip = j.value("augment_hflip", t.augment_hflip);
  t.augment_time_reversal =
      j.value("augment_time_reversal", t.augment_time_reversal);
  t.clip_grad_norm = j.value("clip_grad_norm", t.clip_grad_norm);
  if (j.contains("photo")) {
    const json& p = j.at("photo");
    t.photo.exposure_lo = p.value("exposure_lo", t.photo.exposure_lo);
    t.photo.exposure_hi = p.value("exposure_hi", t.photo.exposure_hi);
    t.photo.contrast_lo = p.value("contrast_lo", t.photo.contrast_lo);
    t.photo.contrast_hi = p.value("contrast_hi", t.photo.contrast_hi);
    t.photo.noise_sigma = p.value("noise_sigma", t.photo.noise_sigma);
    t.photo.blur_kernel = p.value("blur_kernel", t.photo.blur_kernel);
    t.photo.vignette = p.value("vignette", t.photo.vignette);
  }
  return t;
}

double lambda_from(const json& cfg) {
  if (cfg.contains("train") && cfg.at("train").contains("lambda_sc"))
    return cfg.at("train").at("lambda_sc").get<double>();
  return 1.0;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << text;
}

model::ParamStore scratch_params(const model::Architecture& arch,
                                 const simworld::Dataset& ds, uint64_t seed) {
  model::ParamStore p = model::init_scratch(arch, seed);
  std::vector<Tensor> calib;
  const size_t stride = std::max<size_t>(1, ds.samples.size() / 64);
  for (size_t i = 0; i < ds.samples.size(); i += stride)
    calib.push_back(simworld::to_input(ds.samples[i].image));
  model::calibrate_batchnorm(arch, p, calib);
  return p;
}

// ---- gen ----

int cmd_gen(const json& cfg, const std::string& regime_name, double dt,
            uint64_t seed, const std::string& out_prefix) {
  (void)dt;
  const simworld::WorldConfig world = world_from(cfg);
  const simworld::NoiseModel noise = noise_from(cfg);
  const simworld::SplitSpec spec = split_from(cfg);
  const simworld::RegimeSpec regime = simworld::regime_from_name(regime_name);

  const simworld::Split split =
      simworld::generate_split(world, spec, regime, noise, seed);
  const std::string fine_path = out_prefix + "_finetune.ftds";
  const std::string test_path = out_prefix + "_test.ftds";
  simworld::save_dataset(fine_path, split.fine_tune);
  simworld::save_dataset(test_path, split.test);

  json manifest;
  manifest["fine_tune"] = fine_path;
  manifest["fine_tune_samples"] = split.fine_tune.samples.size();
  manifest["test"] = test_path;
  manifest["test_samples"] = split.test.samples.size();
  manifest["gap_samples"] = spec.gap;
  manifest["gap_seconds"] = spec.gap / world.rate_hz;
  manifest["regime"] = regime_name;
  manifest["seed"] = seed;
  std::printf("wrote %s (%zu samples) and %s (%zu samples), %d-sample gap\n",
              fine_path.c_str(), split.fine_tune.samples.size(),
              test_path.c_str(), split.test.samples.size(), spec.gap);
  std::printf("%s\n", manifest.dump().c_str());
  return 0;
}

// ---- train ----

int cmd_train(const json& cfg, const std::string& data_path,
              const std::string& init_path, const std::string& strategy_name,
              const std::string& regime_name, double dt, uint64_t seed,
              const std::string& out_prefix) {
  const simworld::Dataset ds = simworld::load_dataset(data_path);
  const model::Architecture arch = model::reference_architecture();
  const simworld::RegimeSpec regime = simworld::regime_from_name(regime_name);

  trainer::TrainConfig tc = train_from(cfg);
  tc.strategy = model::strategy_from_name(strategy_name);
  tc.regime = simworld::make_supervision(ds, regime, dt, lambda_from(cfg));
  tc.seed = seed;

  model::ParamStore start;
  if (init_path.empty()) {
    std::printf("no --init checkpoint: scratch weights, batchnorm calibrated "
                "on the fine-tune set\n");
    start = scratch_params(arch, ds, seed);
  } else {
    const model::Checkpoint ck = model::load_checkpoint(init_path);
    start = ck.params;
  }

  const trainer::TrainResult r = trainer::fine_tune(arch, start, ds, tc);
  for (const trainer::EpochStats& st : r.trace)
    std::printf("epoch %d  task %.6f  sc %.6f  total %.6f\n", st.epoch,
                st.task_loss, st.sc_loss, st.total);

  const std::string f32_path = out_prefix + ".ckpt";
  const std::string int8_path = out_prefix + ".int8.ckpt";
  const std::string trace_path = out_prefix + ".trace.jsonl";
  model::save_checkpoint_f32(f32_path, arch, r.params);
  const quant::SaturationReport sat =
      model::save_checkpoint_int8(int8_path, arch, r.params, {});
  write_text(trace_path, trainer::trace_to_json(r.trace));

  json summary;
  summary["checkpoint"] = f32_path;
  summary["checkpoint_int8"] = int8_path;
  summary["trace"] = trace_path;
  summary["final_total"] = r.trace.back().total;
  summary["int8_saturated_fraction"] = sat.fraction();
  std::printf("%s\n", summary.dump().c_str());
  return 0;
}

// ---- eval ----

int cmd_eval(const std::string& ckpt_path, const std::string& data_path,
             const std::string& out_path) {
  const model::Checkpoint ck = model::load_checkpoint(ckpt_path);
  const simworld::Dataset ds = simworld::load_dataset(data_path);
  const metrics::Metrics m = metrics::evaluate_model(ck.arch, ck.params, ds);

  std::printf("samples %lld\n", static_cast<long long>(m.count));
  std::printf("mae %.6f  (component sum %.6f)\n", m.mae, m.mae_sum);
  std::printf("per-component  x %.6f  y %.6f  z %.6f  yaw %.6f\n",
              m.mae_component[0], m.mae_component[1], m.mae_component[2],
              m.mae_component[3]);
  std::printf("r2%%  x %.2f  y %.2f  z %.2f  yaw %.2f  mean %.2f\n",
              m.r2_percent[0], m.r2_percent[1], m.r2_percent[2],
              m.r2_percent[3], m.r2_mean);
  const std::string text = metrics::to_json(m);
  std::printf("%s\n", text.c_str());
  if (!out_path.empty()) write_text(out_path, text);
  return 0;
}

// ---- cost ----

int cmd_cost(const std::string& strategy_name, const std::string& out_path) {
  const model::Architecture arch = model::reference_architecture();
  std::vector<costmodel::CostReport> table;
  if (strategy_name.empty()) {
    table = costmodel::full_table(arch);
  } else {
    table.push_back(costmodel::strategy_report(
        arch, model::strategy_from_name(strategy_name)));
  }
  const std::string tsv = costmodel::to_tsv(table);
  const std::string js = costmodel::to_json(table);
  std::printf("%s", tsv.c_str());
  std::printf("%s\n", js.c_str());
  if (!out_path.empty()) write_text(out_path, js);
  return 0;
}

// ---- sweep ----

struct SweepCell {
  std::string regime;
  std::string strategy;
  double dt = 2.0;
};

int cmd_sweep(const json& cfg, const std::string& init_path,
              const std::string& regimes_csv, const std::string& strategies_csv,
              const std::string& dts_csv, int seeds, int jobs, uint64_t seed,
              const std::string& out_path) {
  if (seeds < 1) throw usage_error("--seeds must be >= 1");
  if (init_path.empty()) throw usage_error("sweep needs --init");

  auto split_csv = [](const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
      if (!tok.empty()) out.push_back(tok);
    }
    return out;
  };
  const std::vector<std::string> regimes = split_csv(regimes_csv);
  const std::vector<std::string> strategies = split_csv(strategies_csv);
  std::vector<double> dts;
  for (const std::string& d : split_csv(dts_csv)) dts.push_back(std::stod(d));
  if (regimes.empty() || strategies.empty() || dts.empty())
    throw usage_error("sweep needs nonempty --regimes, --strategies, --dts");
  for (const std::string& r : regimes) simworld::regime_from_name(r);
  for (const std::string& s : strategies) model::strategy_from_name(s);

  const model::Architecture arch = model::reference_architecture();
  const model::ParamStore start = model::load_checkpoint(init_path).params;
  const simworld::WorldConfig world = world_from(cfg);
  const simworld::NoiseModel noise = noise_from(cfg);
  const simworld::SplitSpec spec = split_from(cfg);
  const trainer::TrainConfig base_tc = train_from(cfg);
  const double lambda = lambda_from(cfg);

  std::vector<SweepCell> cells;
  for (const std::string& r : regimes)
    for (const std::string& s : strategies)
      for (double dt : dts) cells.push_back(SweepCell{r, s, dt});

  // Pre-fine-tune reference on each seed's test split (identical across
  // regimes at a fixed seed: the trajectory only depends on the seed).
  std::vector<double> baseline(seeds);
  for (int s = 0; s < seeds; ++s) {
    const simworld::Split split = simworld::generate_split(
        world, spec, simworld::regime_from_name(regimes[0]), noise,
        seed + static_cast<uint64_t>(s));
    baseline[s] = metrics::evaluate_model(arch, start, split.test).mae;
  }

  auto run_cell = [&](const SweepCell& cell) {
    std::vector<double> maes(seeds);
    for (int s = 0; s < seeds; ++s) {
      const simworld::RegimeSpec regime = simworld::regime_from_name(cell.regime);
      const simworld::Split split = simworld::generate_split(
          world, spec, regime, noise, seed + static_cast<uint64_t>(s));
      trainer::TrainConfig tc = base_tc;
      tc.strategy = model::strategy_from_name(cell.strategy);
      tc.regime =
          simworld::make_supervision(split.fine_tune, regime, cell.dt, lambda);
      tc.seed = seed + static_cast<uint64_t>(s);
      const trainer::TrainResult r =
          trainer::fine_tune(arch, start, split.fine_tune, tc);
      maes[s] = metrics::evaluate_model(arch, r.params, split.test).mae;
    }
    return maes;
  };

  std::vector<std::vector<double>> results(cells.size());
  if (jobs <= 1) {
    for (size_t c = 0; c < cells.size(); ++c) results[c] = run_cell(cells[c]);
  } else {
    std::vector<std::future<std::vector<double>>> futures;
    futures.reserve(cells.size());
    for (const SweepCell& cell : cells)
      futures.push_back(std::async(std::launch::async,
                                   [&run_cell, cell] { return run_cell(cell); }));
    for (size_t c = 0; c < cells.size(); ++c) results[c] = futures[c].get();
  }

  auto mean_std = [](const std::vector<double>& v) {
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    double var = 0.0;
    for (double x : v) var += (x - mean) * (x - mean);
    var = v.size() > 1 ? var / static_cast<double>(v.size() - 1) : 0.0;
    return std::pair<double, double>(mean, std::sqrt(var));
  };

  const auto [bmean, bstd] = mean_std(baseline);
  json out;
  out["seeds"] = seeds;
  out["baseline_mae_mean"] = bmean;
  out["baseline_mae_std"] = bstd;
  out["baseline_mae_per_seed"] = baseline;
  out["cells"] = json::array();
  std::printf("baseline        mae %.4f +/- %.4f\n", bmean, bstd);
  for (size_t c = 0; c < cells.size(); ++c) {
    const auto [mean, sd] = mean_std(results[c]);
    json cell;
    cell["regime"] = cells[c].regime;
    cell["strategy"] = cells[c].strategy;
    cell["dt"] = cells[c].dt;
    cell["mae_mean"] = mean;
    cell["mae_std"] = sd;
    cell["mae_per_seed"] = results[c];
    out["cells"].push_back(cell);
    std::printf("%-10s %-5s dt %.2f  mae %.4f +/- %.4f\n",
                cells[c].regime.c_str(), cells[c].strategy.c_str(),
                cells[c].dt, mean, sd);
  }
  std::printf("%s\n", out.dump().c_str());
  if (!out_path.empty()) write_text(out_path, out.dump(2));
  return 0;
}

// ---- quantize ----

int cmd_quantize(const std::string& ckpt_path, const std::string& out_path,
                 const std::string& data_path) {
  if (out_path.empty()) throw usage_error("quantize needs --out");
  const model::Checkpoint ck = model::load_checkpoint(ckpt_path);
  const quant::SaturationReport sat =
      model::save_checkpoint_int8(out_path, ck.arch, ck.params, {});

  json j;
  j["checkpoint_int8"] = out_path;
  j["total_values"] = sat.total;
  j["saturated_values"] = sat.saturated;
  j["saturated_fraction"] = sat.fraction();
  if (!data_path.empty()) {
    const simworld::Dataset ds = simworld::load_dataset(data_path);
    const metrics::Metrics mf = metrics::evaluate_model(ck.arch, ck.params, ds);
    const model::Checkpoint rt = model::load_checkpoint(out_path);
    const metrics::Metrics mq =
        metrics::evaluate_model(rt.arch, rt.params, ds);
    j["mae_float"] = mf.mae;
    j["mae_int8"] = mq.mae;
    j["mae_drift"] = std::abs(mf.mae - mq.mae);
    std::printf("float mae %.6f  int8 mae %.6f  drift %.6f\n", mf.mae, mq.mae,
                std::abs(mf.mae - mq.mae));
  }
  std::printf("%s\n", j.dump().c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"tinyft: fine-tuning engine for the 4DOF pose regressor"};
  app.require_subcommand(1);

  std::string config_path, out, data, init, ckpt;
  std::string strategy, regime = "t_a";
  std::string regimes_csv = "t_a", strategies_csv = "all", dts_csv = "2.0";
  double dt = 2.0;
  uint64_t seed = 0;
  int seeds = 5, jobs = 1;
  bool cost_all = false;
  std::vector<std::string> sets;

  const std::vector<std::string> strategy_names = {"all", "bn", "bias", "fc"};
  const std::vector<std::string> regime_names = simworld::regime_names();

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "JSON config file");
    sub->add_option("--set", sets, "dotted key=value config overrides");
    sub->add_option("--seed", seed, "deterministic run seed");
  };

  CLI::App* gen = app.add_subcommand("gen", "generate fine-tune + test sets");
  add_common(gen);
  gen->add_option("--regime", regime, "supervision regime")
      ->check(CLI::IsMember(regime_names));
  gen->add_option("--out", out, "output file prefix")->required();

  CLI::App* train = app.add_subcommand("train", "fine-tune a checkpoint");
  add_common(train);
  train->add_option("--data", data, "fine-tune FTDS file")->required();
  train->add_option("--init", init, "starting checkpoint (scratch if absent)");
  train->add_option("--strategy", strategy, "update strategy")
      ->required()
      ->check(CLI::IsMember(strategy_names));
  train->add_option("--regime", regime, "supervision regime")
      ->check(CLI::IsMember(regime_names));
  train->add_option("--dt", dt, "consistency pair offset, seconds");
  train->add_option("--out", out, "output prefix for ckpt/trace")->required();

  CLI::App* eval = app.add_subcommand("eval", "score a checkpoint");
  add_common(eval);
  eval->add_option("--ckpt", ckpt, "checkpoint to score")->required();
  eval->add_option("--data", data, "test FTDS file")->required();
  eval->add_option("--out", out, "metrics JSON output path");

  CLI::App* cost = app.add_subcommand("cost", "per-strategy cost table");
  cost->add_option("--strategy", strategy, "single strategy row")
      ->check(CLI::IsMember(strategy_names));
  cost->add_flag("--all", cost_all, "all four strategies (default)");
  cost->add_option("--out", out, "cost JSON output path");

  CLI::App* sweep = app.add_subcommand("sweep", "regime x strategy x dt grid");
  add_common(sweep);
  sweep->add_option("--init", init, "starting checkpoint")->required();
  sweep->add_option("--regimes", regimes_csv, "comma-separated regimes");
  sweep->add_option("--strategies", strategies_csv,
                    "comma-separated strategies");
  sweep->add_option("--dts", dts_csv, "comma-separated pair offsets");
  sweep->add_option("--seeds", seeds, "seeds per cell");
  sweep->add_option("--jobs", jobs, "parallel cell workers");
  sweep->add_option("--out", out, "results JSON output path");

  CLI::App* quantize = app.add_subcommand("quantize", "write int8 checkpoint");
  quantize->add_option("--ckpt", ckpt, "float checkpoint")->required();
  quantize->add_option("--out", out, "int8 checkpoint path")->required();
  quantize->add_option("--data", data, "optional FTDS file for drift report");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    json cfg = load_config(config_path);
    apply_sets(cfg, sets);
    // Config supplies defaults; explicit flags win.
    if (cfg.contains("regime") && !gen->count("--regime") &&
        !train->count("--regime")) {
      regime = cfg.at("regime").get<std::string>();
      if (std::find(regime_names.begin(), regime_names.end(), regime) ==
          regime_names.end())
        throw usage_error("config regime '" + regime + "' is unknown");
    }
    if (cfg.contains("seed")) {
      bool flag_seed = false;
      for (CLI::App* sub : {gen, train, sweep})
        if (sub->parsed() && sub->count("--seed")) flag_seed = true;
      if (!flag_seed) seed = cfg.at("seed").get<uint64_t>();
    }
    if (cfg.contains("dt") && !train->count("--dt"))
      dt = cfg.at("dt").get<double>();

    if (gen->parsed()) return cmd_gen(cfg, regime, dt, seed, out);
    if (train->parsed())
      return cmd_train(cfg, data, init, strategy, regime, dt, seed, out);
    if (eval->parsed()) return cmd_eval(ckpt, data, out);
    if (cost->parsed()) return cmd_cost(cost_all ? "" : strategy, out);
    if (sweep->parsed())
      return cmd_sweep(cfg, init, regimes_csv, strategies_csv, dts_csv, seeds,
                       jobs, seed, out);
    if (quantize->parsed()) return cmd_quantize(ckpt, out, data);
    throw usage_error("no subcommand");
  } catch (const usage_error& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
}
