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

// Independent oracles used by the test suites. Nothing here calls the code
// path it is used to check.

#include <cmath>
#include <cstddef>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "fedlama/fed_data.hpp"
#include "fedlama/fed_runtime.hpp"
#include "fedlama/nn_core.hpp"

namespace fedlama::testing {

// Straight-line forward pass for a single sample.
inline std::vector<double> forward_oracle(const MlpModel& m, const std::vector<double>& x) {
  std::vector<double> a = x;
  for (const auto& layer : m.layers) {
    std::vector<double> z(layer.out_dim());
    for (std::size_t o = 0; o < layer.out_dim(); ++o) {
      double s = layer.bias[o];
      for (std::size_t i = 0; i < layer.in_dim(); ++i) s += layer.weights(o, i) * a[i];
      switch (layer.activation) {
        case Activation::kRelu: z[o] = s > 0 ? s : 0; break;
        case Activation::kTanh: z[o] = std::tanh(s); break;
        case Activation::kIdentity: z[o] = s; break;
      }
    }
    a = std::move(z);
  }
  return a;
}

inline double loss_oracle(const MlpModel& m, const Matrix& x, const std::vector<std::size_t>& y) {
  double total = 0.0;
  for (std::size_t b = 0; b < x.rows; ++b) {
    const auto z = forward_oracle(m, std::vector<double>(x.row(b).begin(), x.row(b).end()));
    double zmax = z[0];
    for (double v : z) zmax = std::max(zmax, v);
    double s = 0.0;
    for (double v : z) s += std::exp(v - zmax);
    total += std::log(s) + zmax - z[y[b]];
  }
  return total / static_cast<double>(x.rows);
}

// Central finite differences of the mean loss w.r.t. every parameter, in
// flatten order, layer by layer.
inline std::vector<double> fd_gradient(MlpModel m, const Matrix& x, const std::vector<std::size_t>& y,
                                       double step = 1e-5) {
  std::vector<double> g;
  for (std::size_t l = 0; l < m.num_layers(); ++l) {
    auto flat = layer_flatten(m, l);
    for (std::size_t j = 0; j < flat.size(); ++j) {
      const double orig = flat[j];
      flat[j] = orig + step;
      layer_unflatten(m, l, flat);
      const double up = loss_oracle(m, x, y);
      flat[j] = orig - step;
      layer_unflatten(m, l, flat);
      const double down = loss_oracle(m, x, y);
      flat[j] = orig;
      layer_unflatten(m, l, flat);
      g.push_back((up - down) / (2.0 * step));
    }
  }
  return g;
}

inline std::vector<double> flatten_grads(const GradBundle& g) {
  std::vector<double> out;
  for (const auto& l : g.layers) {
    out.insert(out.end(), l.weights.data.begin(), l.weights.data.end());
    out.insert(out.end(), l.bias.begin(), l.bias.end());
  }
  return out;
}

// |a - b| / max(|a|, |b|, floor): relative error with an absolute floor for
// coordinates whose true gradient is ~0.
inline double rel_error(double a, double b, double floor = 1e-3) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

inline std::vector<double> flatten_model(const MlpModel& m) {
  std::vector<double> out;
  for (std::size_t l = 0; l < m.num_layers(); ++l) {
    const auto f = layer_flatten(m, l);
    out.insert(out.end(), f.begin(), f.end());
  }
  return out;
}

// Minimal CSV reader: header plus rows of string cells.
struct Csv {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(const std::string& name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return i;
    throw std::out_of_range("no column " + name);
  }
  double number(std::size_t row, const std::string& name) const { return std::stod(rows.at(row).at(column(name))); }
};

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

inline Csv parse_csv(std::istream& in) {
  Csv csv;
  std::string line;
  if (std::getline(in, line)) csv.header = split_csv_line(line);
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    auto cells = split_csv_line(line);
    if (cells.size() != csv.header.size()) throw std::runtime_error("ragged csv row: " + line);
    csv.rows.push_back(std::move(cells));
  }
  return csv;
}

inline Csv read_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  return parse_csv(in);
}

inline std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

// Plain FedAvg: every active client steps each iteration, the whole model is
// averaged every tau_base iterations, and a new active set is drawn then.
// Shares data preparation and metric helpers with the runtime but none of its
// scheduling or aggregation code.
struct FedAvgTrace {
  MlpModel u;
  std::vector<MetricRow> metrics;
  std::vector<std::pair<std::size_t, double>> full_sync_discrepancy;
  std::uint64_t cost = 0;
};

inline FedAvgTrace fedavg_reference(const RunConfig& c) {
  const RunSetup setup = prepare_run(c);
  const std::size_t m = c.clients;
  const std::size_t tau = c.tau_base;
  const std::size_t last = setup.iterations;
  std::vector<MlpModel> x(m, setup.initial);
  std::vector<MinibatchSampler> samplers;
  for (std::size_t i = 0; i < m; ++i)
    samplers.emplace_back(setup.shards[i], make_stream(c.seed, "client", i), c.epoch_shuffle);
  Rng round_rng = make_stream(c.seed, "rounds");
  auto active = sample_active_clients(m, c.active_ratio, round_rng);

  FedAvgTrace t;
  t.u = setup.initial;
  MetricRow first = evaluate_global(t.u, setup.train, setup.test);
  first.iteration = 0;
  t.metrics.push_back(first);

  for (std::size_t k = 1; k <= last; ++k) {
    const double eta = c.warmup_iters && k < c.warmup_iters
                           ? c.lr * static_cast<double>(k) / static_cast<double>(c.warmup_iters)
                           : c.lr;
    for (auto i : active) {
      const auto idx = samplers[i].next(c.batch_size);
      const Batch b = gather(setup.train, idx);
      const auto lg = loss_and_grad(x[i], b.x, b.labels);
      sgd_step(x[i], lg.grads, eta);
    }
    if (k % tau != 0) continue;

    double wsum = 0.0;
    for (auto i : active) wsum += setup.weights[i];
    std::vector<double> w;
    for (auto i : active) w.push_back(setup.weights[i] / wsum);

    MlpModel avg = t.u;
    for (std::size_t l = 0; l < avg.num_layers(); ++l) {
      auto& L = avg.layers[l];
      for (std::size_t j = 0; j < L.weights.data.size(); ++j) {
        double s = 0.0;
        for (std::size_t a = 0; a < active.size(); ++a) s += w[a] * x[active[a]].layers[l].weights.data[j];
        L.weights.data[j] = s;
      }
      for (std::size_t j = 0; j < L.bias.size(); ++j) {
        double s = 0.0;
        for (std::size_t a = 0; a < active.size(); ++a) s += w[a] * x[active[a]].layers[l].bias[j];
        L.bias[j] = s;
      }
    }
    double disc = 0.0;
    for (std::size_t a = 0; a < active.size(); ++a) {
      double sq = 0.0;
      for (std::size_t l = 0; l < avg.num_layers(); ++l) {
        const auto& U = avg.layers[l];
        const auto& X = x[active[a]].layers[l];
        for (std::size_t j = 0; j < U.weights.data.size(); ++j) {
          const double d = U.weights.data[j] - X.weights.data[j];
          sq += d * d;
        }
        for (std::size_t j = 0; j < U.bias.size(); ++j) {
          const double d = U.bias[j] - X.bias[j];
          sq += d * d;
        }
      }
      disc += w[a] * sq;
    }
    t.u = avg;
    t.full_sync_discrepancy.emplace_back(k, disc);
    t.cost += t.u.total_params() * (c.per_client_cost ? 2 * active.size() : 1);

    if (k == last || c.eval_every == 0 || k / c.eval_every != (k - tau) / c.eval_every) {
      MetricRow row = evaluate_global(t.u, setup.train, setup.test);
      row.iteration = k;
      row.discrepancy = disc;
      row.comm_cost = t.cost;
      t.metrics.push_back(row);
    }
    if (k < last) active = sample_active_clients(m, c.active_ratio, round_rng);
    for (auto i : active) x[i] = t.u;
  }
  return t;
}

}  // namespace fedlama::testing
