#pragma once

// Ablation runner: one-at-a-time axis sweeps around a base configuration,
// trained and evaluated on a shared seed and dataset. Identical
// configurations across axes (the default arm) are trained once.

#include "vlseg/evaluate.hpp"
#include "vlseg/train.hpp"

#include <iostream>
#include <map>
#include <string>
#include <vector>

namespace vlseg::ablate {

struct Variant {
  std::string axis;
  std::string name;
  ModelConfig cfg;
};

inline std::vector<Variant> axis_variants(const std::string& axis, const ModelConfig& base) {
  std::vector<Variant> out;
  auto with = [&](const std::string& name, auto&& mutate) {
    ModelConfig c = base;
    mutate(c);
    out.push_back({axis, name, validate_config(std::move(c))});
  };
  if (axis == "fvp") {
    with("fvp_on", [](ModelConfig&) {});
    with("fvp_off", [](ModelConfig& c) { c.fvp_enabled = false; });
  } else if (axis == "her-strategy") {
    with("hybrid", [](ModelConfig& c) { c.recognition = Recognition::hybrid; });
    with("generation_only",
         [](ModelConfig& c) { c.recognition = Recognition::generation_only; });
    with("decode_only", [](ModelConfig& c) { c.recognition = Recognition::decode_only; });
  } else if (axis == "conditional-weight") {
    with("gate_on", [](ModelConfig&) {});
    with("gate_off", [](ModelConfig& c) { c.fvp_gate = false; });
  } else if (axis == "scale-count") {
    with("multi_scale", [](ModelConfig&) {});
    with("single_scale", [](ModelConfig& c) { c.num_fvp_layers = 1; });
  } else if (axis == "temporal-global") {
    with("global_on", [](ModelConfig& c) { c.temporal_global = true; });
    with("global_off", [](ModelConfig& c) { c.temporal_global = false; });
  } else if (axis == "temporal-local") {
    with("local_on", [](ModelConfig& c) { c.temporal_local = true; });
    with("local_off", [](ModelConfig& c) { c.temporal_local = false; });
  } else {
    throw std::invalid_argument(
        "unknown ablation axis '" + axis +
        "' (expected fvp, her-strategy, conditional-weight, scale-count, temporal-global, "
        "temporal-local)");
  }
  return out;
}

struct RunResult {
  std::string axis, name;
  std::map<std::string, double> metrics;
};

// Metric columns shared by the comparison table.
inline const std::vector<std::pair<TaskTag, std::string>>& table_columns() {
  static const std::vector<std::pair<TaskTag, std::string>> cols = {
      {TaskTag::panoptic, "pq"}, {TaskTag::panoptic, "miou"}, {TaskTag::referring, "ciou"},
      {TaskTag::vis, "map"},     {TaskTag::vos, "jf"}};
  return cols;
}

inline std::vector<RunResult> run_ablation(const ModelConfig& base,
                                           const std::vector<std::string>& axes,
                                           const std::vector<EpisodeSample>& train_data,
                                           const std::vector<EpisodeSample>& val_data,
                                           const std::string& out_dir, bool quiet = true) {
  std::vector<Variant> variants;
  for (const auto& axis : axes)
    for (auto& v : axis_variants(axis, base)) variants.push_back(std::move(v));

  std::map<std::string, std::map<std::string, double>> cache;  // config text -> metrics
  std::vector<RunResult> results;
  for (const auto& v : variants) {
    std::string key = serialize_config(v.cfg);
    auto it = cache.find(key);
    if (it == cache.end()) {
      if (!quiet) std::cerr << "[ablate] training " << v.axis << "/" << v.name << "\n";
      SegModel<float> model(v.cfg);
      train::TrainOptions opts;
      opts.out_dir = out_dir.empty() ? "" : out_dir + "/" + v.axis + "_" + v.name;
      train::train(model, train_data, &val_data, opts);
      std::map<std::string, double> metrics;
      for (const auto& [task, metric] : table_columns()) {
        auto report = eval::evaluate(model, val_data, task);
        metrics[task_name(task) + "." + metric] = report.get(metric);
        if (task == TaskTag::panoptic) {
          for (const auto& [k, val] : report.values)
            if (k == "her_token_acc") metrics["panoptic.her_token_acc"] = val;
        }
      }
      it = cache.emplace(std::move(key), std::move(metrics)).first;
    }
    results.push_back({v.axis, v.name, it->second});
  }
  return results;
}

inline std::string format_table(const std::vector<RunResult>& results) {
  std::vector<std::string> cols;
  for (const auto& [task, metric] : table_columns()) cols.push_back(task_name(task) + "." + metric);
  std::ostringstream os;
  os << "axis variant";
  for (const auto& c : cols) os << " " << c;
  os << "\n";
  os << std::fixed << std::setprecision(4);
  for (const auto& r : results) {
    os << r.axis << " " << r.name;
    for (const auto& c : cols) {
      auto it = r.metrics.find(c);
      if (it == r.metrics.end())
        os << " -";
      else
        os << " " << it->second;
    }
    os << "\n";
  }
  return os.str();
}

}  // namespace vlseg::ablate
