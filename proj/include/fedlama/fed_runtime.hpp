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

// Federated training loop with layer-wise aggregation intervals.
//
// Every active client takes one SGD step per iteration on its own minibatch.
// Layer l is averaged across the active clients whenever k % tau_l == 0.
// At multiples of phi * tau' every layer is due, so the model is fully
// synchronized; the intervals are then re-chosen from the unit discrepancies
// just measured and a new active set is drawn. phi == 1 is plain FedAvg.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <exception>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <json.hpp>

#include "fedlama/comm_ledger.hpp"
#include "fedlama/error.hpp"
#include "fedlama/fed_data.hpp"
#include "fedlama/lama_sched.hpp"
#include "fedlama/nn_core.hpp"
#include "fedlama/rng.hpp"

namespace fedlama {

struct DataSpec {
  enum class Source { kSynthetic, kCsv };
  Source source = Source::kSynthetic;
  std::size_t num_classes = 4;
  std::size_t samples_per_class = 500;
  std::size_t feature_dim = 8;
  double cluster_spread = 1.0;
  double separation = kDefaultClassSeparation;
  std::string csv_path;
  double holdout_fraction = 0.2;
  PartitionMode partition = PartitionMode::kIid;
  double alpha = 1.0;

  friend bool operator==(const DataSpec&, const DataSpec&) = default;
};

enum class ScheduleMode { kAdaptive, kStatic };

struct RunConfig {
  std::size_t clients = 16;
  std::size_t iterations = 2400;
  double lr = 0.05;
  std::size_t batch_size = 16;
  std::size_t tau_base = 6;
  std::size_t phi = 1;
  double active_ratio = 1.0;
  AdjustRule rule = AdjustRule::kCross;
  std::uint64_t seed = 1;
  ModelSpec model = ModelSpec::with_hidden({8, 64, 64, 64, 4}, Activation::kRelu);
  DataSpec data;
  std::size_t eval_every = 240;
  std::size_t warmup_iters = 0;
  bool per_client_cost = false;
  bool epoch_shuffle = false;
  // kStatic keeps `static_extended` at phi * tau' for the whole run.
  ScheduleMode schedule = ScheduleMode::kAdaptive;
  std::vector<std::size_t> static_extended;
};

// Iteration count rounded up to a multiple of phi * tau'.
inline std::size_t effective_iterations(const RunConfig& c) {
  const std::size_t period = c.tau_base * c.phi;
  return (c.iterations + period - 1) / period * period;
}

inline void validate(const RunConfig& c) {
  if (c.clients == 0) throw InputError("clients must be >= 1");
  if (c.iterations == 0) throw InputError("iterations must be >= 1");
  if (!(c.lr > 0.0) || !std::isfinite(c.lr)) throw InputError("lr must be a positive finite number");
  if (c.batch_size == 0) throw InputError("batch_size must be >= 1");
  if (c.tau_base == 0) throw InputError("tau_base must be >= 1");
  if (c.phi == 0) throw InputError("phi must be >= 1");
  if (!(c.active_ratio > 0.0 && c.active_ratio <= 1.0)) throw InputError("active_ratio must be in (0, 1]");
  if (c.model.widths.size() < 3) throw InputError("model needs at least two dense layers");
  if (c.model.activations.size() + 1 != c.model.widths.size())
    throw InputError("model needs one activation per dense layer");
  if (c.model.activations.back() != Activation::kIdentity) throw InputError("output activation must be identity");
  if (c.data.partition == PartitionMode::kDirichlet && !(c.data.alpha > 0.0))
    throw InputError("dirichlet alpha must be > 0");
  for (auto l : c.static_extended)
    if (l + 1 >= c.model.widths.size()) throw InputError("static_extended layer out of range");
}

struct ClientState {
  std::size_t id = 0;
  MlpModel model;
  ClientShard shard;
  double weight = 0.0;
  MinibatchSampler sampler;
};

struct MetricRow {
  std::size_t iteration = 0;
  double loss = 0.0;
  double accuracy = 0.0;
  double discrepancy = 0.0;
  double grad_norm_sq = 0.0;
  std::uint64_t comm_cost = 0;

  friend bool operator==(const MetricRow&, const MetricRow&) = default;
};

// Everything a run derives from (config, seed) before the first step.
struct RunSetup {
  Dataset train;
  Dataset test;
  std::vector<ClientShard> shards;
  std::vector<double> weights;
  MlpModel initial;
  std::size_t iterations = 0;  // effective
  std::vector<std::string> warnings;
};

inline std::pair<Dataset, Dataset> make_datasets(const DataSpec& spec, std::uint64_t seed) {
  Dataset full;
  if (spec.source == DataSpec::Source::kCsv) {
    full = load_csv_dataset(spec.csv_path);
  } else {
    full = gen_synthetic(spec.num_classes, spec.samples_per_class, spec.feature_dim, spec.cluster_spread,
                         stream_seed(seed, "data"), spec.separation);
  }
  return split_holdout(full, spec.holdout_fraction, stream_seed(seed, "holdout"));
}

inline RunSetup prepare_run(const RunConfig& config) {
  validate(config);
  RunSetup s;
  std::tie(s.train, s.test) = make_datasets(config.data, config.seed);
  if (s.train.feature_dim() != config.model.widths.front())
    throw InputError("model input width " + std::to_string(config.model.widths.front()) +
                     " does not match dataset feature dimension " + std::to_string(s.train.feature_dim()));
  if (s.train.num_classes > config.model.widths.back())
    throw InputError("model output width is smaller than the number of classes");
  s.shards = partition(s.train, {config.data.partition, config.data.alpha, config.clients,
                                 stream_seed(config.seed, "partition")});
  s.weights = client_weights(s.shards);
  s.initial = init_model(config.model, config.seed);
  s.iterations = effective_iterations(config);
  if (s.iterations != config.iterations)
    s.warnings.push_back("iterations " + std::to_string(config.iterations) + " rounded up to " +
                         std::to_string(s.iterations) + " (multiple of phi*tau_base=" +
                         std::to_string(config.tau_base * config.phi) + ")");
  return s;
}

// Uniform sample without replacement of max(1, round(ratio * m)) client ids,
// returned ascending.
inline std::vector<std::size_t> sample_active_clients(std::size_t m, double active_ratio, Rng& round_rng) {
  if (m == 0) throw InputError("sample_active_clients: no clients");
  if (!(active_ratio > 0.0 && active_ratio <= 1.0)) throw InputError("active_ratio must be in (0, 1]");
  const auto want = std::max<long long>(1, std::llround(active_ratio * static_cast<double>(m)));
  const auto count = std::min<std::size_t>(m, static_cast<std::size_t>(want));
  std::vector<std::size_t> ids(m);
  std::iota(ids.begin(), ids.end(), 0);
  for (std::size_t i = 0; i < count; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, m - 1);
    std::swap(ids[i], ids[pick(round_rng)]);
  }
  ids.resize(count);
  std::sort(ids.begin(), ids.end());
  return ids;
}

// sum_i w_i x_i accumulated in the given order, starting from zero.
inline std::vector<double> weighted_average(std::span<const std::vector<double>> locals,
                                            std::span<const double> weights) {
  if (locals.empty() || locals.size() != weights.size()) throw DimensionError("weighted_average: bad inputs");
  std::vector<double> u(locals.front().size(), 0.0);
  for (std::size_t i = 0; i < locals.size(); ++i) {
    if (locals[i].size() != u.size()) throw DimensionError("weighted_average: layer sizes differ");
    const double w = weights[i];
    const double* x = locals[i].data();
    for (std::size_t j = 0; j < u.size(); ++j) u[j] += w * x[j];
  }
  return u;
}

// Averages layer `layer` over the active clients (weights p renormalized over
// `active`, summed in ascending id order) and writes the result back into
// every active client. Returns the averaged layer.
inline std::vector<double> aggregate_layer(std::size_t layer, std::span<ClientState> clients,
                                           std::span<const std::size_t> active, std::span<const double> p) {
  const auto w = renormalize(p, active);
  std::vector<std::vector<double>> locals;
  locals.reserve(active.size());
  for (auto i : active) locals.push_back(layer_flatten(clients[i].model, layer));
  auto u = weighted_average(locals, w);
  for (auto i : active) layer_unflatten(clients[i].model, layer, u);
  return u;
}

// sum_i p~_i ||u - x^i||^2 over the active clients, p~ renormalized.
inline double measure_discrepancy(const MlpModel& u, std::span<const ClientView> clients,
                                  std::span<const std::size_t> active) {
  std::vector<double> p;
  p.reserve(clients.size());
  for (const auto& c : clients) p.push_back(c.weight);
  const auto w = renormalize(p, active);
  double total = 0.0;
  for (std::size_t a = 0; a < active.size(); ++a) {
    const MlpModel& x = *clients[active[a]].model;
    if (x.num_layers() != u.num_layers()) throw DimensionError("measure_discrepancy: layer count differs");
    double sq = 0.0;
    for (std::size_t l = 0; l < u.num_layers(); ++l) {
      const auto& ul = u.layers[l];
      const auto& xl = x.layers[l];
      if (ul.param_dim() != xl.param_dim()) throw DimensionError("measure_discrepancy: layer shape differs");
      for (std::size_t j = 0; j < ul.weights.data.size(); ++j) {
        const double d = ul.weights.data[j] - xl.weights.data[j];
        sq += d * d;
      }
      for (std::size_t j = 0; j < ul.bias.size(); ++j) {
        const double d = ul.bias[j] - xl.bias[j];
        sq += d * d;
      }
    }
    total += w[a] * sq;
  }
  return total;
}

// Loss and gradient norm of u on the whole training set, accuracy on the
// held-out set.
inline MetricRow evaluate_global(const MlpModel& u, const Dataset& train, const Dataset& test) {
  MetricRow row;
  const auto lg = loss_and_grad(u, train.features, train.labels);
  row.loss = lg.loss;
  row.grad_norm_sq = lg.grads.squared_norm();
  row.accuracy = evaluate(u, test.features, test.labels).accuracy;
  return row;
}

// Learning rate at iteration k (1-based); linear ramp over the warmup window.
inline double learning_rate_at(const RunConfig& c, std::size_t k) {
  if (c.warmup_iters == 0 || k >= c.warmup_iters) return c.lr;
  return c.lr * static_cast<double>(k) / static_cast<double>(c.warmup_iters);
}

// True at full-sync boundary k if a multiple of eval_every lies in
// (k - period, k], or k is the last iteration.
inline bool eval_due(std::size_t k, std::size_t period, std::size_t eval_every, std::size_t last) {
  if (k == last) return true;
  if (eval_every == 0) return true;
  return k / eval_every != (k - period) / eval_every;
}

struct SyncSnapshot {
  std::size_t iteration = 0;
  std::span<const std::size_t> synced_layers;
  bool full = false;
  const MlpModel* global = nullptr;
  std::span<const ClientState> clients;
  std::span<const std::size_t> active;
};

// Hook for tests and tools; called after every synchronization step.
class RunObserver {
 public:
  virtual ~RunObserver() = default;
  virtual void on_sync(const SyncSnapshot&) {}
};

struct AbortInfo {
  std::size_t iteration = 0;
  std::size_t client = 0;
  double loss = 0.0;
  std::vector<double> layer_norms;
};

struct RunResult {
  RunConfig config;
  std::size_t iterations = 0;  // effective
  std::vector<std::string> warnings;
  std::vector<MetricRow> metrics;
  std::vector<std::pair<std::size_t, double>> full_sync_discrepancy;  // (k, pre-aggregation discrepancy)
  MlpModel final_model;
  CommLedger ledger;
  std::vector<nlohmann::json> events;
  std::vector<AdjustmentReport> adjustments;
  double label_entropy = 0.0;
  std::optional<AbortInfo> abort;

  bool ok() const noexcept { return !abort.has_value(); }

  double final_accuracy() const { return metrics.empty() ? 0.0 : metrics.back().accuracy; }

  double mean_discrepancy() const {
    if (full_sync_discrepancy.empty()) return 0.0;
    double s = 0.0;
    for (const auto& [k, d] : full_sync_discrepancy) s += d;
    return s / static_cast<double>(full_sync_discrepancy.size());
  }
};

struct RunOptions {
  std::size_t threads = 1;
  RunObserver* observer = nullptr;
};

namespace detail {

inline nlohmann::json json_number(double v) {
  if (std::isfinite(v)) return v;
  return std::isnan(v) ? "nan" : (v > 0 ? "inf" : "-inf");
}

inline std::vector<double> layer_norms(const MlpModel& m) {
  std::vector<double> norms;
  for (std::size_t l = 0; l < m.num_layers(); ++l) {
    double s = 0.0;
    for (double v : layer_flatten(m, l)) s += v * v;
    norms.push_back(std::sqrt(s));
  }
  return norms;
}

struct LocalFailure {
  std::size_t iteration = std::numeric_limits<std::size_t>::max();
  double loss = 0.0;
};

// Runs iterations (from, to] for one client. Stops at the first
// non-finite loss.
inline LocalFailure local_steps(ClientState& c, const Dataset& train, const RunConfig& config, std::size_t from,
                                std::size_t to) {
  for (std::size_t k = from + 1; k <= to; ++k) {
    const auto idx = c.sampler.next(config.batch_size);
    const Batch batch = gather(train, idx);
    const auto lg = loss_and_grad(c.model, batch.x, batch.labels);
    if (!std::isfinite(lg.loss) || !lg.grads.all_finite()) return {k, lg.loss};
    sgd_step(c.model, lg.grads, learning_rate_at(config, k));
  }
  return {};
}

// Applies `fn(index)` to [0, n) using up to `threads` workers with a static
// contiguous split. Results must not depend on the split.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(threads);
  {
    std::vector<std::jthread> workers;
    workers.reserve(threads);
    for (std::size_t t = 0; t < threads; ++t) {
      const std::size_t begin = n * t / threads;
      const std::size_t end = n * (t + 1) / threads;
      workers.emplace_back([&, t, begin, end] {
        try {
          for (std::size_t i = begin; i < end; ++i) fn(i);
        } catch (...) {
          errors[t] = std::current_exception();
        }
      });
    }
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace detail

inline RunResult run(const RunConfig& config, const RunOptions& options = {}) {
  RunSetup setup = prepare_run(config);
  const std::size_t num_layers = setup.initial.num_layers();
  const std::size_t period = config.tau_base * config.phi;
  const std::size_t last = setup.iterations;

  RunResult result;
  result.config = config;
  result.iterations = last;
  result.warnings = setup.warnings;
  result.label_entropy = mean_label_entropy(setup.train, setup.shards);
  result.ledger = CommLedger(setup.initial.param_dims(), config.per_client_cost);
  for (const auto& w : setup.warnings) result.events.push_back({{"type", "warning"}, {"message", w}});

  std::vector<ClientState> clients;
  clients.reserve(config.clients);
  for (std::size_t i = 0; i < config.clients; ++i) {
    clients.push_back(ClientState{i, setup.initial, setup.shards[i], setup.weights[i],
                                  MinibatchSampler(setup.shards[i], make_stream(config.seed, "client", i),
                                                   config.epoch_shuffle)});
  }
  // MinibatchSampler points at its shard; rebind to the copies owned by clients.
  for (auto& c : clients)
    c.sampler = MinibatchSampler(c.shard, make_stream(config.seed, "client", c.id), config.epoch_shuffle);

  MlpModel u = setup.initial;
  Schedule schedule = Schedule::uniform(num_layers, config.tau_base, config.phi);
  if (config.schedule == ScheduleMode::kStatic)
    for (auto l : config.static_extended) schedule.tau[l] = period;

  Rng round_rng = make_stream(config.seed, "rounds");
  std::vector<std::size_t> active = sample_active_clients(config.clients, config.active_ratio, round_rng);
  result.events.push_back({{"type", "round"}, {"iteration", 0}, {"active", active}});

  {
    MetricRow row = evaluate_global(u, setup.train, setup.test);
    row.iteration = 0;
    result.metrics.push_back(row);
  }

  std::vector<double> last_d(num_layers, 0.0);
  std::vector<detail::LocalFailure> failures(config.clients);
  std::size_t k = 0;
  while (k < last) {
    const std::size_t next = k + config.tau_base;

    detail::parallel_for(active.size(), options.threads, [&](std::size_t a) {
      failures[active[a]] = detail::local_steps(clients[active[a]], setup.train, config, k, next);
    });
    std::optional<AbortInfo> abort;
    for (auto i : active) {
      if (failures[i].iteration == std::numeric_limits<std::size_t>::max()) continue;
      if (!abort || failures[i].iteration < abort->iteration)
        abort = AbortInfo{failures[i].iteration, i, failures[i].loss, detail::layer_norms(clients[i].model)};
    }
    if (abort) {
      result.events.push_back({{"type", "abort"},
                               {"iteration", abort->iteration},
                               {"client", abort->client},
                               {"loss", detail::json_number(abort->loss)},
                               {"layer_norms", [&] {
                                  nlohmann::json a = nlohmann::json::array();
                                  for (double v : abort->layer_norms) a.push_back(detail::json_number(v));
                                  return a;
                                }()}});
      result.abort = std::move(abort);
      break;
    }
    k = next;

    std::vector<std::size_t> due;
    for (std::size_t l = 0; l < num_layers; ++l)
      if (k % schedule.tau[l] == 0) due.push_back(l);
    const bool full = k % period == 0;

    std::vector<ClientView> views;
    views.reserve(clients.size());
    for (const auto& c : clients) views.push_back({c.weight, &c.model});
    const auto w = renormalize(setup.weights, active);

    if (full) {
      // Discrepancy of the pre-aggregation locals against the model they are
      // about to be replaced with.
      MlpModel target = u;
      for (std::size_t l = 0; l < num_layers; ++l) {
        std::vector<std::vector<double>> locals;
        for (auto i : active) locals.push_back(layer_flatten(clients[i].model, l));
        layer_unflatten(target, l, weighted_average(locals, w));
      }
      const double disc = measure_discrepancy(target, views, active);
      result.full_sync_discrepancy.emplace_back(k, disc);
      result.events.push_back({{"type", "full_sync"}, {"iteration", k}, {"discrepancy", disc}});
    }

    for (auto l : due) {
      std::vector<std::vector<double>> locals;
      locals.reserve(active.size());
      for (auto i : active) locals.push_back(layer_flatten(clients[i].model, l));
      const auto ul = aggregate_layer(l, clients, active, setup.weights);
      last_d[l] = layer_unit_discrepancy(ul, locals, w, schedule.tau[l]);
      layer_unflatten(u, l, ul);
      result.ledger.record_sync(k, l, active.size());
      result.events.push_back({{"type", "sync"},
                               {"iteration", k},
                               {"layer", l},
                               {"participants", active.size()},
                               {"tau", schedule.tau[l]},
                               {"d", last_d[l]}});
    }

    if (options.observer) options.observer->on_sync({k, due, full, &u, clients, active});

    if (!full) continue;

    if (eval_due(k, period, config.eval_every, last)) {
      MetricRow row = evaluate_global(u, setup.train, setup.test);
      row.iteration = k;
      row.discrepancy = result.full_sync_discrepancy.back().second;
      row.comm_cost = total_cost(result.ledger);
      result.metrics.push_back(row);
    }

    if (config.schedule == ScheduleMode::kAdaptive) {
      DiscrepancyStats stats{last_d, u.param_dims(), k};
      auto [next_schedule, report] = adjust_intervals(stats, config.tau_base, config.phi, config.rule);
      result.events.push_back(to_json(report, next_schedule));
      result.adjustments.push_back(std::move(report));
      schedule = std::move(next_schedule);
    }

    if (k < last) {
      active = sample_active_clients(config.clients, config.active_ratio, round_rng);
      for (auto i : active) clients[i].model = u;
      result.events.push_back({{"type", "round"}, {"iteration", k}, {"active", active}});
    }
  }

  result.final_model = std::move(u);
  return result;
}

}  // namespace fedlama
