// Copyright 2026 The cube3d Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <iomanip>
#include <locale>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "cube3d/cost_model.hpp"

namespace cube3d {

/// One row of a weak/strong scaling table. Costs are modeled cost units
/// (multiply-adds + lambda * communicated elements, per rank, per step),
/// never wall-clock: the table shape follows the evaluation format, the
/// numbers are the analytic model's.
struct BenchRow {
  std::uint64_t gpus = 0;
  std::uint64_t batch = 0;
  std::uint64_t hidden = 0;
  double forward_cost = 0;
  double backward_cost = 0;
  double avg_step_cost = 0;
};

/// Average step cost = (forward + backward) / batch size.
inline double average_step(double forward, double backward, std::uint64_t batch) {
  return (forward + backward) / static_cast<double>(batch);
}

enum class ScalingMode { weak, strong };

/// Weak scaling grows the problem with the cube: batch scales with p,
/// hidden with p^2, heads with p. Strong scaling fixes the problem and
/// must stay divisible at every requested p.
inline TransformerConfig scaled_config(ScalingMode mode, const TransformerConfig& base, int p) {
  TransformerConfig cfg = base;
  cfg.p = p;
  if (mode == ScalingMode::weak) {
    const std::uint64_t up = static_cast<std::uint64_t>(p);
    cfg.batch = base.batch * up;
    cfg.hidden = base.hidden * up * up;
    cfg.heads = base.heads * up;
  }
  cfg.validate();
  return cfg;
}

inline std::vector<BenchRow> run_scaling(ScalingMode mode, const TransformerConfig& base,
                                         const std::vector<int>& p_list, double lambda) {
  if (p_list.empty()) throw ConfigInvalid("empty cube side list");
  std::vector<BenchRow> rows;
  rows.reserve(p_list.size());
  for (int p : p_list) {
    if (p < 1) throw ConfigInvalid("cube side must be positive");
    const TransformerConfig cfg = scaled_config(mode, base, p);
    const LayerCostPrediction lc = predict_layer_costs(cfg);
    const double layers = static_cast<double>(cfg.layers);
    BenchRow row;
    row.gpus = static_cast<std::uint64_t>(p) * p * p;
    row.batch = cfg.batch;
    row.hidden = cfg.hidden;
    row.forward_cost =
        layers * (static_cast<double>(lc.fwd.multiply_adds) + lambda * static_cast<double>(lc.fwd.comm_elems));
    row.backward_cost =
        layers * (static_cast<double>(lc.bwd.multiply_adds) + lambda * static_cast<double>(lc.bwd.comm_elems));
    row.avg_step_cost = average_step(row.forward_cost, row.backward_cost, row.batch);
    rows.push_back(row);
  }
  return rows;
}

inline constexpr const char* kScalingCsvHeader =
    "gpus,batch,hidden,forward_cost,backward_cost,avg_step_cost";

/// Locale-independent CSV: '.' decimals, LF line endings.
inline void write_scaling_csv(std::ostream& os, const std::vector<BenchRow>& rows) {
  std::ostringstream body;
  body.imbue(std::locale::classic());
  body << kScalingCsvHeader << "\n";
  body << std::fixed << std::setprecision(6);
  for (const BenchRow& r : rows)
    body << r.gpus << "," << r.batch << "," << r.hidden << "," << r.forward_cost << ","
         << r.backward_cost << "," << r.avg_step_cost << "\n";
  os << body.str();
}

}  // namespace cube3d
