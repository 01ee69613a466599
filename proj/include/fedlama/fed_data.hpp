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

// Datasets, client sharding (IID and Dirichlet non-IID), client weights and
// minibatch sampling.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "fedlama/error.hpp"
#include "fedlama/nn_core.hpp"
#include "fedlama/rng.hpp"

namespace fedlama {

// Distance of every class mean from the origin in gen_synthetic.
inline constexpr double kDefaultClassSeparation = 2.0;
// Full Dirichlet redraws before falling back to moving samples into empty shards.
inline constexpr int kDirichletMaxRetries = 32;

struct Dataset {
  Matrix features;  // n x f
  std::vector<std::size_t> labels;
  std::size_t num_classes = 0;

  std::size_t size() const noexcept { return labels.size(); }
  std::size_t feature_dim() const noexcept { return features.cols; }

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

struct ClientShard {
  std::size_t client_id = 0;
  std::vector<std::size_t> indices;  // ascending, into the parent dataset

  std::size_t size() const noexcept { return indices.size(); }
};

enum class PartitionMode { kIid, kDirichlet };

struct PartitionSpec {
  PartitionMode mode = PartitionMode::kIid;
  double alpha = 1.0;
  std::size_t clients = 1;
  std::uint64_t seed = 0;
};

inline void validate(const Dataset& ds) {
  if (ds.size() == 0) throw InputError("dataset is empty");
  if (ds.features.rows != ds.labels.size()) throw DimensionError("feature rows != label count");
  for (auto y : ds.labels)
    if (y >= ds.num_classes) throw InputError("label " + std::to_string(y) + " >= num_classes");
}

// Class c is an isotropic Gaussian (stddev `cluster_spread`) around a random
// unit vector scaled by `separation`. Samples are stored class by class.
inline Dataset gen_synthetic(std::size_t num_classes, std::size_t samples_per_class, std::size_t feature_dim,
                             double cluster_spread, std::uint64_t seed,
                             double separation = kDefaultClassSeparation) {
  if (num_classes == 0 || samples_per_class == 0 || feature_dim == 0)
    throw InputError("gen_synthetic: counts must be >= 1");
  if (!(cluster_spread > 0.0)) throw InputError("gen_synthetic: cluster_spread must be > 0");
  if (!(separation > 0.0)) throw InputError("gen_synthetic: separation must be > 0");
  Rng rng = make_stream(seed, "synthetic");
  std::normal_distribution<double> normal(0.0, 1.0);

  Matrix means(num_classes, feature_dim);
  for (std::size_t c = 0; c < num_classes; ++c) {
    auto mu = means.row(c);
    double norm = 0.0;
    while (norm < 1e-12) {
      norm = 0.0;
      for (double& v : mu) {
        v = normal(rng);
        norm += v * v;
      }
      norm = std::sqrt(norm);
    }
    for (double& v : mu) v = v / norm * separation;
  }

  Dataset ds;
  ds.num_classes = num_classes;
  ds.features = Matrix(num_classes * samples_per_class, feature_dim);
  ds.labels.reserve(num_classes * samples_per_class);
  for (std::size_t c = 0; c < num_classes; ++c) {
    for (std::size_t s = 0; s < samples_per_class; ++s) {
      auto x = ds.features.row(ds.labels.size());
      for (std::size_t f = 0; f < feature_dim; ++f) x[f] = means(c, f) + cluster_spread * normal(rng);
      ds.labels.push_back(c);
    }
  }
  return ds;
}

inline Dataset subset(const Dataset& ds, std::span<const std::size_t> indices) {
  Dataset out;
  out.num_classes = ds.num_classes;
  out.features = Matrix(indices.size(), ds.feature_dim());
  out.labels.reserve(indices.size());
  for (std::size_t r = 0; r < indices.size(); ++r) {
    auto src = ds.features.row(indices[r]);
    std::copy(src.begin(), src.end(), out.features.row(r).begin());
    out.labels.push_back(ds.labels[indices[r]]);
  }
  return out;
}

// Random train/held-out split; the held-out part has round(n * fraction) rows.
inline std::pair<Dataset, Dataset> split_holdout(const Dataset& ds, double holdout_fraction, std::uint64_t seed) {
  if (!(holdout_fraction > 0.0 && holdout_fraction < 1.0))
    throw InputError("holdout fraction must be in (0, 1)");
  std::vector<std::size_t> perm(ds.size());
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng = make_stream(seed, "holdout");
  std::shuffle(perm.begin(), perm.end(), rng);
  const auto n_hold = static_cast<std::size_t>(std::llround(holdout_fraction * static_cast<double>(ds.size())));
  if (n_hold == 0 || n_hold >= ds.size()) throw InputError("holdout split leaves an empty side");
  std::vector<std::size_t> hold(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_hold));
  std::vector<std::size_t> train(perm.begin() + static_cast<std::ptrdiff_t>(n_hold), perm.end());
  std::sort(hold.begin(), hold.end());
  std::sort(train.begin(), train.end());
  return {subset(ds, train), subset(ds, hold)};
}

// Random permutation cut into m parts whose sizes differ by at most one.
inline std::vector<ClientShard> partition_iid(const Dataset& ds, std::size_t m, std::uint64_t seed) {
  if (m == 0) throw InputError("partition_iid: need at least one client");
  if (m > ds.size()) throw InputError("partition_iid: more clients than samples");
  std::vector<std::size_t> perm(ds.size());
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng = make_stream(seed, "partition-iid");
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<ClientShard> shards(m);
  const std::size_t base = ds.size() / m;
  const std::size_t extra = ds.size() % m;
  std::size_t pos = 0;
  for (std::size_t i = 0; i < m; ++i) {
    const std::size_t len = base + (i < extra ? 1 : 0);
    shards[i].client_id = i;
    shards[i].indices.assign(perm.begin() + static_cast<std::ptrdiff_t>(pos),
                             perm.begin() + static_cast<std::ptrdiff_t>(pos + len));
    std::sort(shards[i].indices.begin(), shards[i].indices.end());
    pos += len;
  }
  return shards;
}

namespace detail {

inline std::vector<double> sample_dirichlet(std::size_t m, double alpha, Rng& rng) {
  std::gamma_distribution<double> gamma(alpha, 1.0);
  std::vector<double> q(m);
  double sum = 0.0;
  while (!(sum > 0.0)) {
    sum = 0.0;
    for (double& v : q) {
      v = gamma(rng);
      sum += v;
    }
  }
  for (double& v : q) v /= sum;
  return q;
}

}  // namespace detail

// Per class: q ~ Dir(alpha * 1_m), then each sample of the class goes to a
// client drawn from q. Draws that leave a client empty are repeated up to
// kDirichletMaxRetries times; after that each empty client takes one sample
// from the currently largest shard.
inline std::vector<ClientShard> partition_dirichlet(const Dataset& ds, std::size_t m, double alpha,
                                                    std::uint64_t seed) {
  if (m == 0) throw InputError("partition_dirichlet: need at least one client");
  if (!(alpha > 0.0)) throw InputError("partition_dirichlet: alpha must be > 0");
  if (m > ds.size()) throw InputError("partition_dirichlet: more clients than samples");

  std::vector<std::vector<std::size_t>> by_class(ds.num_classes);
  for (std::size_t i = 0; i < ds.size(); ++i) by_class[ds.labels[i]].push_back(i);

  Rng rng = make_stream(seed, "partition-dirichlet");
  std::vector<std::vector<std::size_t>> owned;
  for (int attempt = 0; attempt <= kDirichletMaxRetries; ++attempt) {
    owned.assign(m, {});
    for (const auto& members : by_class) {
      if (members.empty()) continue;
      const auto q = detail::sample_dirichlet(m, alpha, rng);
      std::discrete_distribution<std::size_t> pick(q.begin(), q.end());
      for (auto idx : members) owned[pick(rng)].push_back(idx);
    }
    if (std::none_of(owned.begin(), owned.end(), [](const auto& v) { return v.empty(); })) break;
  }
  for (std::size_t i = 0; i < m; ++i) {
    if (!owned[i].empty()) continue;
    std::size_t largest = 0;
    for (std::size_t j = 1; j < m; ++j)
      if (owned[j].size() > owned[largest].size()) largest = j;
    owned[i].push_back(owned[largest].back());
    owned[largest].pop_back();
  }

  std::vector<ClientShard> shards(m);
  for (std::size_t i = 0; i < m; ++i) {
    shards[i].client_id = i;
    shards[i].indices = std::move(owned[i]);
    std::sort(shards[i].indices.begin(), shards[i].indices.end());
  }
  return shards;
}

inline std::vector<ClientShard> partition(const Dataset& ds, const PartitionSpec& spec) {
  return spec.mode == PartitionMode::kIid ? partition_iid(ds, spec.clients, spec.seed)
                                          : partition_dirichlet(ds, spec.clients, spec.alpha, spec.seed);
}

// p_i = n_i / n.
inline std::vector<double> client_weights(std::span<const ClientShard> shards) {
  if (shards.empty()) throw InputError("client_weights: no shards");
  std::size_t n = 0;
  for (const auto& s : shards) n += s.size();
  if (n == 0) throw InputError("client_weights: all shards are empty");
  std::vector<double> p;
  p.reserve(shards.size());
  for (const auto& s : shards) p.push_back(static_cast<double>(s.size()) / static_cast<double>(n));
  return p;
}

// p restricted to `active` and rescaled to sum to one.
inline std::vector<double> renormalize(std::span<const double> p, std::span<const std::size_t> active) {
  if (active.empty()) throw InputError("active set is empty");
  double total = 0.0;
  for (auto i : active) {
    if (i >= p.size()) throw InputError("active client id out of range");
    total += p[i];
  }
  if (!(total > 0.0)) throw InputError("active clients carry zero weight");
  std::vector<double> out;
  out.reserve(active.size());
  for (auto i : active) out.push_back(p[i] / total);
  return out;
}

// Uniform draw with replacement from the shard.
inline std::vector<std::size_t> sample_minibatch(const ClientShard& shard, std::size_t batch_size, Rng& rng) {
  if (batch_size == 0) throw InputError("batch_size must be >= 1");
  if (shard.indices.empty()) throw InputError("cannot sample from an empty shard");
  std::uniform_int_distribution<std::size_t> pick(0, shard.size() - 1);
  std::vector<std::size_t> batch(batch_size);
  for (auto& b : batch) b = shard.indices[pick(rng)];
  return batch;
}

// Per-client minibatch source. `epoch` mode walks a reshuffled permutation of
// the shard instead of sampling with replacement.
class MinibatchSampler {
 public:
  MinibatchSampler(const ClientShard& shard, Rng rng, bool epoch_shuffle)
      : shard_(&shard), rng_(std::move(rng)), epoch_(epoch_shuffle) {}

  std::vector<std::size_t> next(std::size_t batch_size) {
    if (!epoch_) return sample_minibatch(*shard_, batch_size, rng_);
    std::vector<std::size_t> batch;
    batch.reserve(batch_size);
    while (batch.size() < batch_size) {
      if (cursor_ == order_.size()) {
        order_ = shard_->indices;
        std::shuffle(order_.begin(), order_.end(), rng_);
        cursor_ = 0;
      }
      batch.push_back(order_[cursor_++]);
    }
    return batch;
  }

 private:
  const ClientShard* shard_;
  Rng rng_;
  bool epoch_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

struct Batch {
  Matrix x;
  std::vector<std::size_t> labels;
};

inline Batch gather(const Dataset& ds, std::span<const std::size_t> indices) {
  Batch b{Matrix(indices.size(), ds.feature_dim()), {}};
  b.labels.reserve(indices.size());
  for (std::size_t r = 0; r < indices.size(); ++r) {
    auto src = ds.features.row(indices[r]);
    std::copy(src.begin(), src.end(), b.x.row(r).begin());
    b.labels.push_back(ds.labels[indices[r]]);
  }
  return b;
}

// Shannon entropy (nats) of the label histogram of one shard.
inline double label_entropy(const Dataset& ds, const ClientShard& shard) {
  std::vector<std::size_t> counts(ds.num_classes, 0);
  for (auto i : shard.indices) ++counts[ds.labels[i]];
  double h = 0.0;
  const auto n = static_cast<double>(shard.size());
  for (auto c : counts) {
    if (c == 0) continue;
    const double p = static_cast<double>(c) / n;
    h -= p * std::log(p);
  }
  return h;
}

inline double mean_label_entropy(const Dataset& ds, std::span<const ClientShard> shards) {
  double sum = 0.0;
  for (const auto& s : shards) sum += label_entropy(ds, s);
  return sum / static_cast<double>(shards.size());
}

// CSV with a header row; every column but the last is a decimal feature, the
// last column is an integer class label. num_classes = max label + 1.
inline Dataset load_csv_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open dataset '" + path + "'");
  std::string line;
  if (!std::getline(in, line)) throw InputError("dataset '" + path + "' has no header");
  const std::size_t columns = static_cast<std::size_t>(std::count(line.begin(), line.end(), ',')) + 1;
  if (columns < 2) throw InputError("dataset needs at least one feature and a label column");
  std::vector<double> values;
  Dataset ds;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    std::stringstream ss(line);
    std::string cell;
    std::size_t col = 0;
    while (std::getline(ss, cell, ',')) {
      try {
        if (col + 1 < columns) {
          values.push_back(std::stod(cell));
        } else {
          const long long y = std::stoll(cell);
          if (y < 0) throw InputError("negative label");
          ds.labels.push_back(static_cast<std::size_t>(y));
        }
      } catch (const std::logic_error&) {
        throw InputError(path + ":" + std::to_string(line_no) + ": bad value '" + cell + "'");
      }
      ++col;
    }
    if (col != columns) throw InputError(path + ":" + std::to_string(line_no) + ": wrong column count");
  }
  ds.features.rows = ds.labels.size();
  ds.features.cols = columns - 1;
  ds.features.data = std::move(values);
  ds.num_classes = ds.labels.empty() ? 0 : *std::max_element(ds.labels.begin(), ds.labels.end()) + 1;
  validate(ds);
  return ds;
}

}  // namespace fedlama
