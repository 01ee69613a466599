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

// Communication accounting. One unit is one aggregation of one layer, so a
// layer of dim parameters synchronized kappa times costs dim * kappa. With
// per-client costing each event is weighted by 2 * participants (upload and
// download).

#include <cstddef>
#include <cstdint>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "fedlama/error.hpp"
#include "fedlama/lama_sched.hpp"

namespace fedlama {

struct SyncRecord {
  std::size_t iteration = 0;
  std::size_t layer = 0;
  std::size_t participants = 0;

  friend bool operator==(const SyncRecord&, const SyncRecord&) = default;
};

class CommLedger {
 public:
  CommLedger() = default;
  explicit CommLedger(std::vector<std::size_t> dims, bool per_client_cost = false)
      : dims_(std::move(dims)), kappa_(dims_.size(), 0), units_(dims_.size(), 0), per_client_(per_client_cost) {}

  void record_sync(std::size_t iteration, std::size_t layer, std::size_t participants) {
    if (layer >= dims_.size()) throw InputError("record_sync: layer " + std::to_string(layer) + " out of range");
    ++kappa_[layer];
    units_[layer] += units_for(participants);
    events_.push_back({iteration, layer, participants});
  }

  const std::vector<std::size_t>& dims() const noexcept { return dims_; }
  const std::vector<std::uint64_t>& kappa() const noexcept { return kappa_; }
  const std::vector<SyncRecord>& events() const noexcept { return events_; }
  bool per_client_cost() const noexcept { return per_client_; }
  std::size_t num_layers() const noexcept { return dims_.size(); }

  std::uint64_t units_for(std::size_t participants) const noexcept {
    return per_client_ ? 2 * static_cast<std::uint64_t>(participants) : 1;
  }

  // C_l = dim(u_l) * kappa_l (or the per-client weighted count).
  std::uint64_t layer_cost(std::size_t l) const { return static_cast<std::uint64_t>(dims_.at(l)) * units_.at(l); }

  std::vector<std::uint64_t> layer_costs() const {
    std::vector<std::uint64_t> c;
    c.reserve(dims_.size());
    for (std::size_t l = 0; l < dims_.size(); ++l) c.push_back(layer_cost(l));
    return c;
  }

 private:
  std::vector<std::size_t> dims_;
  std::vector<std::uint64_t> kappa_;
  std::vector<std::uint64_t> units_;
  std::vector<SyncRecord> events_;
  bool per_client_ = false;
};

inline std::uint64_t total_cost(const CommLedger& ledger) {
  std::uint64_t c = 0;
  for (std::size_t l = 0; l < ledger.num_layers(); ++l) c += ledger.layer_cost(l);
  return c;
}

// 100 * C / C_baseline.
inline double relative_cost(const CommLedger& ledger, const CommLedger& baseline) {
  const std::uint64_t base = total_cost(baseline);
  if (base == 0) throw InputError("relative_cost: baseline cost is zero");
  return 100.0 * static_cast<double>(total_cost(ledger)) / static_cast<double>(base);
}

struct CostReport {
  std::uint64_t total = 0;
  std::vector<std::uint64_t> per_layer;
  double relative_percent = 100.0;
};

inline CostReport cost_report(const CommLedger& ledger, const CommLedger& baseline) {
  return {total_cost(ledger), ledger.layer_costs(), relative_cost(ledger, baseline)};
}

// Ledger of a run that keeps `schedule` fixed for iterations 1..iterations
// with a constant participant count. Used for baselines such as FedAvg(tau').
inline CommLedger simulate_static(std::vector<std::size_t> dims, const Schedule& schedule, std::size_t iterations,
                                  std::size_t participants = 1, bool per_client_cost = false) {
  if (schedule.tau.size() != dims.size()) throw DimensionError("schedule length != layer count");
  CommLedger ledger(std::move(dims), per_client_cost);
  for (std::size_t k = 1; k <= iterations; ++k)
    for (std::size_t l = 0; l < schedule.tau.size(); ++l)
      if (k % schedule.tau[l] == 0) ledger.record_sync(k, l, participants);
  return ledger;
}

// layer,dim,kappa,cost
inline void write_ledger_csv(std::ostream& os, const CommLedger& ledger) {
  os << "layer,dim,kappa,cost\n";
  for (std::size_t l = 0; l < ledger.num_layers(); ++l)
    os << l << ',' << ledger.dims()[l] << ',' << ledger.kappa()[l] << ',' << ledger.layer_cost(l) << '\n';
}

}  // namespace fedlama
