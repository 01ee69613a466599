// Copyright 2026 The FedLAMA Simulator Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

// Layer-wise adaptive interval selection.
//
// Each layer l carries an aggregation interval tau_l in {tau', phi * tau'}.
// After a full synchronization the layers are ranked by their unit
// discrepancy d_l (drift per parameter per local step). Walking the ranking
// from the smallest d_l upwards, delta_l is the share of total discrepancy
// held by the first l layers and lambda_l is their share of the parameters.
// Layers before the point where delta_l meets 1 - lambda_l get the long
// interval: little discrepancy is given up for a large cut in traffic.

#include <algorithm>
#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "fedlama/error.hpp"
#include "fedlama/fed_data.hpp"
#include "fedlama/nn_core.hpp"

namespace fedlama {

// kCross extends sorted position l iff delta_l < 1 - lambda_l.
// kLiteral uses delta_l < lambda_l, which holds for every position but the
// last on non-degenerate input.
enum class AdjustRule { kCross, kLiteral };

inline std::string_view rule_name(AdjustRule r) { return r == AdjustRule::kCross ? "cross" : "literal"; }

inline AdjustRule parse_rule(std::string_view s) {
  if (s == "cross") return AdjustRule::kCross;
  if (s == "literal") return AdjustRule::kLiteral;
  throw InputError("unknown adjustment rule '" + std::string(s) + "' (expected cross|literal)");
}

struct Schedule {
  std::size_t tau_base = 1;
  std::size_t phi = 1;
  std::vector<std::size_t> tau;  // per layer

  static Schedule uniform(std::size_t num_layers, std::size_t tau_base, std::size_t phi) {
    return {tau_base, phi, std::vector<std::size_t>(num_layers, tau_base)};
  }

  // Every layer is synchronized at multiples of this.
  std::size_t period() const noexcept { return tau_base * phi; }

  bool valid() const {
    if (tau_base == 0 || phi == 0 || tau.empty()) return false;
    return std::all_of(tau.begin(), tau.end(),
                       [&](std::size_t t) { return t == tau_base || t == tau_base * phi; });
  }

  friend bool operator==(const Schedule&, const Schedule&) = default;
};

inline std::size_t tau_max(const Schedule& s) {
  if (s.tau.empty()) throw InputError("tau_max: empty schedule");
  return *std::max_element(s.tau.begin(), s.tau.end());
}

struct DiscrepancyStats {
  std::vector<double> d;
  std::vector<std::size_t> dims;
  std::size_t observed_at = 0;
};

// One client's contribution to a discrepancy or aggregation.
struct ClientView {
  double weight = 0.0;
  const MlpModel* model = nullptr;
};

// sum_i w_i ||u_l - x_l^i||^2 / (tau_l * dim(u_l)), weights already
// normalized over the participating clients.
inline double layer_unit_discrepancy(std::span<const double> global_layer,
                                     std::span<const std::vector<double>> local_layers,
                                     std::span<const double> weights, std::size_t tau_l) {
  if (local_layers.size() != weights.size()) throw DimensionError("one weight per local layer required");
  if (global_layer.empty()) throw DimensionError("empty layer");
  if (tau_l == 0) throw InputError("tau_l must be >= 1");
  double weighted = 0.0;
  for (std::size_t i = 0; i < local_layers.size(); ++i) {
    const auto& x = local_layers[i];
    if (x.size() != global_layer.size()) throw DimensionError("local layer size differs from global layer");
    double sq = 0.0;
    for (std::size_t j = 0; j < x.size(); ++j) {
      const double diff = global_layer[j] - x[j];
      sq += diff * diff;
    }
    weighted += weights[i] * sq;
  }
  return weighted / (static_cast<double>(tau_l) * static_cast<double>(global_layer.size()));
}

// d_l for every layer. `clients` hold the raw weights p_i; they are
// renormalized over `active`.
inline DiscrepancyStats unit_discrepancy(const MlpModel& global, std::span<const ClientView> clients,
                                         const Schedule& schedule, std::span<const std::size_t> active,
                                         std::size_t observed_at = 0) {
  if (active.empty()) throw InputError("unit_discrepancy: active set is empty");
  if (schedule.tau.size() != global.num_layers()) throw DimensionError("schedule length != layer count");
  std::vector<double> p;
  p.reserve(clients.size());
  for (const auto& c : clients) p.push_back(c.weight);
  const auto w = renormalize(p, active);

  DiscrepancyStats stats;
  stats.observed_at = observed_at;
  stats.dims = global.param_dims();
  for (std::size_t l = 0; l < global.num_layers(); ++l) {
    std::vector<std::vector<double>> locals;
    locals.reserve(active.size());
    for (auto i : active) {
      const MlpModel& x = *clients[i].model;
      if (x.num_layers() != global.num_layers()) throw DimensionError("client model layer count differs");
      locals.push_back(layer_flatten(x, l));
    }
    const auto u = layer_flatten(global, l);
    stats.d.push_back(layer_unit_discrepancy(u, locals, w, schedule.tau[l]));
  }
  return stats;
}

struct CumulativeCurves {
  std::vector<std::size_t> sorted_idx;  // layers by ascending d (stable)
  std::vector<double> delta;
  std::vector<double> lambda;
  bool degenerate = false;              // total discrepancy was zero; delta == lambda
};

inline CumulativeCurves cumulative_curves(const DiscrepancyStats& stats) {
  const std::size_t n = stats.d.size();
  if (n == 0) throw InputError("cumulative_curves: no layers");
  if (stats.dims.size() != n) throw DimensionError("cumulative_curves: d and dims differ in length");
  CumulativeCurves c;
  c.sorted_idx.resize(n);
  std::iota(c.sorted_idx.begin(), c.sorted_idx.end(), 0);
  std::stable_sort(c.sorted_idx.begin(), c.sorted_idx.end(),
                   [&](std::size_t a, std::size_t b) { return stats.d[a] < stats.d[b]; });

  std::vector<double> disc_prefix(n), dim_prefix(n);
  double disc = 0.0;
  double dim = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t l = c.sorted_idx[k];
    disc += stats.d[l] * static_cast<double>(stats.dims[l]);
    dim += static_cast<double>(stats.dims[l]);
    disc_prefix[k] = disc;
    dim_prefix[k] = dim;
  }
  c.lambda.resize(n);
  c.delta.resize(n);
  for (std::size_t k = 0; k < n; ++k) c.lambda[k] = dim_prefix[k] / dim;
  c.degenerate = !(disc > 0.0);
  for (std::size_t k = 0; k < n; ++k) c.delta[k] = c.degenerate ? c.lambda[k] : disc_prefix[k] / disc;
  return c;
}

struct AdjustmentReport {
  std::size_t iteration = 0;
  AdjustRule rule = AdjustRule::kCross;
  std::vector<std::size_t> sorted_idx;
  std::vector<double> sorted_d;
  std::vector<double> delta;
  std::vector<double> lambda;
  std::vector<std::size_t> extended;  // layer ids given phi * tau', in sorted order
  std::size_t cross_index = 0;        // largest 1-based sorted position extended, 0 if none
  bool degenerate = false;
};

inline std::pair<Schedule, AdjustmentReport> adjust_intervals(const DiscrepancyStats& stats, std::size_t tau_base,
                                                              std::size_t phi, AdjustRule rule = AdjustRule::kCross) {
  if (tau_base == 0) throw InputError("adjust_intervals: tau_base must be >= 1");
  if (phi == 0) throw InputError("adjust_intervals: phi must be >= 1");
  const auto curves = cumulative_curves(stats);
  const std::size_t n = stats.d.size();

  Schedule schedule = Schedule::uniform(n, tau_base, phi);
  AdjustmentReport report;
  report.iteration = stats.observed_at;
  report.rule = rule;
  report.sorted_idx = curves.sorted_idx;
  report.delta = curves.delta;
  report.lambda = curves.lambda;
  report.degenerate = curves.degenerate;
  for (auto l : curves.sorted_idx) report.sorted_d.push_back(stats.d[l]);

  if (phi == 1 || curves.degenerate) return {schedule, report};
  for (std::size_t k = 0; k < n; ++k) {
    const double delta = curves.delta[k];
    const double lambda = curves.lambda[k];
    const bool extend = rule == AdjustRule::kCross ? delta < 1.0 - lambda : delta < lambda;
    if (extend) {
      const std::size_t layer = curves.sorted_idx[k];
      schedule.tau[layer] = tau_base * phi;
      report.extended.push_back(layer);
      report.cross_index = k + 1;
    }
  }
  return {schedule, report};
}

inline nlohmann::json to_json(const AdjustmentReport& r, const Schedule& s) {
  return nlohmann::json{{"type", "adjust"},
                        {"iteration", r.iteration},
                        {"rule", std::string(rule_name(r.rule))},
                        {"sorted_idx", r.sorted_idx},
                        {"sorted_d", r.sorted_d},
                        {"delta", r.delta},
                        {"lambda", r.lambda},
                        {"extended", r.extended},
                        {"cross_index", r.cross_index},
                        {"degenerate", r.degenerate},
                        {"tau", s.tau}};
}

}  // namespace fedlama
