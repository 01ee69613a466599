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

// On-disk formats of a run.
//
//   metrics.csv  iteration,loss,accuracy,discrepancy,grad_norm_sq,comm_cost_so_far
//   events.jsonl one JSON object per line; "type" is one of
//                warning, round, sync, full_sync, adjust, abort
//   ledger.csv   layer,dim,kappa,cost
//   curves.csv   iteration,position,layer,d,delta,one_minus_lambda,extended
//   model.bin    little-endian: "FLMA", u32 version (1), u32 layer count,
//                per layer u32 rows (out), u32 cols (in), u32 activation
//                (0 relu, 1 tanh, 2 identity); then every layer's parameters
//                as IEEE-754 binary64 in flatten order (weights row-major,
//                then bias), layer 0 first.
//
// Floats in CSV files use the shortest decimal form that round-trips.

#include <algorithm>
#include <array>
#include <bit>
#include <charconv>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "fedlama/comm_ledger.hpp"
#include "fedlama/error.hpp"
#include "fedlama/fed_runtime.hpp"
#include "fedlama/nn_core.hpp"

namespace fedlama {

inline std::string shortest(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline void write_metrics_csv(std::ostream& os, const std::vector<MetricRow>& rows) {
  os << "iteration,loss,accuracy,discrepancy,grad_norm_sq,comm_cost_so_far\n";
  for (const auto& r : rows)
    os << r.iteration << ',' << shortest(r.loss) << ',' << shortest(r.accuracy) << ',' << shortest(r.discrepancy)
       << ',' << shortest(r.grad_norm_sq) << ',' << r.comm_cost << '\n';
}

inline void write_events_jsonl(std::ostream& os, const std::vector<nlohmann::json>& events) {
  for (const auto& e : events) os << e.dump() << '\n';
}

// Data behind the delta / (1 - lambda) crossing plot, one block per adjustment.
inline void write_curves_csv(std::ostream& os, const std::vector<AdjustmentReport>& reports) {
  os << "iteration,position,layer,d,delta,one_minus_lambda,extended\n";
  for (const auto& r : reports) {
    for (std::size_t k = 0; k < r.sorted_idx.size(); ++k) {
      const bool ext = k < r.cross_index &&
                       std::find(r.extended.begin(), r.extended.end(), r.sorted_idx[k]) != r.extended.end();
      os << r.iteration << ',' << k + 1 << ',' << r.sorted_idx[k] << ',' << shortest(r.sorted_d[k]) << ','
         << shortest(r.delta[k]) << ',' << shortest(1.0 - r.lambda[k]) << ',' << (ext ? 1 : 0) << '\n';
    }
  }
}

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  const std::array<char, 4> b{static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                              static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  os.write(b.data(), 4);
}

inline void put_f64(std::ostream& os, double d) {
  const auto v = std::bit_cast<std::uint64_t>(d);
  std::array<char, 8> b{};
  for (int i = 0; i < 8; ++i) b[static_cast<std::size_t>(i)] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b.data(), 8);
}

inline std::uint64_t get_le(std::istream& is, int bytes) {
  std::array<unsigned char, 8> b{};
  is.read(reinterpret_cast<char*>(b.data()), bytes);
  if (!is) throw InputError("model binary truncated");
  std::uint64_t v = 0;
  for (int i = bytes - 1; i >= 0; --i) v = (v << 8) | b[static_cast<std::size_t>(i)];
  return v;
}

inline std::uint32_t activation_code(Activation a) {
  switch (a) {
    case Activation::kRelu: return 0;
    case Activation::kTanh: return 1;
    case Activation::kIdentity: return 2;
  }
  return 2;
}

}  // namespace detail

inline void write_model_binary(std::ostream& os, const MlpModel& model) {
  os.write("FLMA", 4);
  detail::put_u32(os, 1);
  detail::put_u32(os, static_cast<std::uint32_t>(model.num_layers()));
  for (const auto& l : model.layers) {
    detail::put_u32(os, static_cast<std::uint32_t>(l.out_dim()));
    detail::put_u32(os, static_cast<std::uint32_t>(l.in_dim()));
    detail::put_u32(os, detail::activation_code(l.activation));
  }
  for (std::size_t l = 0; l < model.num_layers(); ++l)
    for (double v : layer_flatten(model, l)) detail::put_f64(os, v);
}

inline MlpModel read_model_binary(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "FLMA", 4) != 0) throw InputError("not a model binary");
  if (detail::get_le(is, 4) != 1) throw InputError("unsupported model binary version");
  const auto layers = detail::get_le(is, 4);
  MlpModel m;
  for (std::uint64_t l = 0; l < layers; ++l) {
    const auto rows = detail::get_le(is, 4);
    const auto cols = detail::get_le(is, 4);
    const auto act = detail::get_le(is, 4);
    if (act > 2) throw InputError("bad activation code");
    const Activation a = act == 0 ? Activation::kRelu : act == 1 ? Activation::kTanh : Activation::kIdentity;
    m.layers.push_back({Matrix(rows, cols), std::vector<double>(rows, 0.0), a});
  }
  for (std::size_t l = 0; l < m.num_layers(); ++l) {
    std::vector<double> flat(m.layers[l].param_dim());
    for (double& v : flat) v = std::bit_cast<double>(detail::get_le(is, 8));
    layer_unflatten(m, l, flat);
  }
  validate(m);
  return m;
}

}  // namespace fedlama
