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

// Minimal dense MLP: forward pass, softmax cross-entropy with exact
// backpropagation, plain SGD and per-layer flatten/unflatten. Everything is
// 64-bit and single-threaded; a model is a value type.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fedlama/error.hpp"
#include "fedlama/rng.hpp"

namespace fedlama {

// Row-major dense matrix of doubles.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows_init) {
    Matrix m;
    m.rows = rows_init.size();
    m.cols = m.rows ? rows_init.begin()->size() : 0;
    m.data.reserve(m.rows * m.cols);
    for (const auto& r : rows_init) {
      if (r.size() != m.cols) throw DimensionError("Matrix::from_rows: ragged rows");
      m.data.insert(m.data.end(), r.begin(), r.end());
    }
    return m;
  }

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

  std::size_t size() const noexcept { return data.size(); }

  friend bool operator==(const Matrix&, const Matrix&) = default;
};

inline Matrix transpose(const Matrix& a) {
  Matrix t(a.cols, a.rows);
  for (std::size_t r = 0; r < a.rows; ++r)
    for (std::size_t c = 0; c < a.cols; ++c) t.data[c * a.rows + r] = a.data[r * a.cols + c];
  return t;
}

// c = a * b. The i-k-j order keeps the inner loop contiguous and the
// summation order fixed (k ascending) for every output entry.
inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols != b.rows) throw DimensionError("matmul: inner dimensions differ");
  Matrix c(a.rows, b.cols);
  const std::size_t n = b.cols;
  const std::size_t inner = a.cols;
  std::size_t i = 0;
  // Four output rows per pass share each load of b's row k. Every c(i, j) is
  // still accumulated over k in ascending order.
  for (; i + 4 <= a.rows; i += 4) {
    double* __restrict c0 = c.data.data() + i * n;
    double* __restrict c1 = c0 + n;
    double* __restrict c2 = c1 + n;
    double* __restrict c3 = c2 + n;
    const double* a0 = a.data.data() + i * inner;
    for (std::size_t k = 0; k < inner; ++k) {
      const double x0 = a0[k], x1 = a0[inner + k], x2 = a0[2 * inner + k], x3 = a0[3 * inner + k];
      const double* __restrict bk = b.data.data() + k * n;
      for (std::size_t j = 0; j < n; ++j) {
        const double v = bk[j];
        c0[j] += x0 * v;
        c1[j] += x1 * v;
        c2[j] += x2 * v;
        c3[j] += x3 * v;
      }
    }
  }
  for (; i < a.rows; ++i) {
    double* __restrict ci = c.data.data() + i * n;
    for (std::size_t k = 0; k < inner; ++k) {
      const double aik = a.data[i * inner + k];
      const double* __restrict bk = b.data.data() + k * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aik * bk[j];
    }
  }
  return c;
}

enum class Activation { kRelu, kTanh, kIdentity };

inline std::string_view activation_name(Activation a) {
  switch (a) {
    case Activation::kRelu: return "relu";
    case Activation::kTanh: return "tanh";
    case Activation::kIdentity: return "identity";
  }
  return "identity";
}

inline Activation parse_activation(std::string_view name) {
  if (name == "relu") return Activation::kRelu;
  if (name == "tanh") return Activation::kTanh;
  if (name == "identity") return Activation::kIdentity;
  throw InputError("unknown activation '" + std::string(name) + "'");
}

struct DenseLayer {
  Matrix weights;  // out x in
  std::vector<double> bias;
  Activation activation = Activation::kIdentity;

  std::size_t in_dim() const noexcept { return weights.cols; }
  std::size_t out_dim() const noexcept { return weights.rows; }
  std::size_t param_dim() const noexcept { return weights.size() + bias.size(); }

  friend bool operator==(const DenseLayer&, const DenseLayer&) = default;
};

// Layer widths plus one activation per dense layer. The last activation
// must be identity: logits feed softmax cross-entropy directly.
struct ModelSpec {
  std::vector<std::size_t> widths;
  std::vector<Activation> activations;

  static ModelSpec with_hidden(std::vector<std::size_t> widths, Activation hidden) {
    ModelSpec s{std::move(widths), {}};
    if (s.widths.size() >= 2) {
      s.activations.assign(s.widths.size() - 1, hidden);
      s.activations.back() = Activation::kIdentity;
    }
    return s;
  }

  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

struct MlpModel {
  std::vector<DenseLayer> layers;

  std::size_t num_layers() const noexcept { return layers.size(); }
  std::size_t input_dim() const { return layers.front().in_dim(); }
  std::size_t num_classes() const { return layers.back().out_dim(); }

  std::vector<std::size_t> param_dims() const {
    std::vector<std::size_t> dims;
    dims.reserve(layers.size());
    for (const auto& l : layers) dims.push_back(l.param_dim());
    return dims;
  }

  std::size_t total_params() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.param_dim();
    return n;
  }

  friend bool operator==(const MlpModel&, const MlpModel&) = default;
};

inline void validate(const MlpModel& model) {
  if (model.layers.empty()) throw DimensionError("model has no layers");
  for (std::size_t k = 0; k < model.layers.size(); ++k) {
    const auto& l = model.layers[k];
    if (l.bias.size() != l.weights.rows)
      throw DimensionError("layer " + std::to_string(k) + ": bias length != weight rows");
    if (l.weights.data.size() != l.weights.rows * l.weights.cols)
      throw DimensionError("layer " + std::to_string(k) + ": weight buffer size mismatch");
    if (k > 0 && l.weights.cols != model.layers[k - 1].weights.rows)
      throw DimensionError("layer " + std::to_string(k) + ": input width does not match previous layer");
  }
}

// Glorot-uniform weights in [-sqrt(6/(in+out)), +sqrt(6/(in+out))], zero biases.
// Weights are drawn layer by layer in flatten order.
inline MlpModel init_model(const ModelSpec& spec, std::uint64_t seed) {
  if (spec.widths.size() < 2) throw InputError("model needs at least an input and an output width");
  if (spec.activations.size() != spec.widths.size() - 1)
    throw InputError("model needs one activation per dense layer");
  for (auto w : spec.widths)
    if (w == 0) throw InputError("layer widths must be positive");
  Rng rng = make_stream(seed, "init");
  MlpModel model;
  for (std::size_t k = 0; k + 1 < spec.widths.size(); ++k) {
    const std::size_t in = spec.widths[k];
    const std::size_t out = spec.widths[k + 1];
    const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
    std::uniform_real_distribution<double> dist(-limit, limit);
    DenseLayer layer{Matrix(out, in), std::vector<double>(out, 0.0), spec.activations[k]};
    for (double& w : layer.weights.data) w = dist(rng);
    model.layers.push_back(std::move(layer));
  }
  return model;
}

struct ForwardPass {
  std::vector<Matrix> pre;   // per layer, before activation
  std::vector<Matrix> post;  // per layer, after activation; post.back() are the logits

  const Matrix& logits() const { return post.back(); }
};

namespace detail {

inline double activate(Activation a, double z) {
  switch (a) {
    case Activation::kRelu: return z > 0.0 ? z : 0.0;
    case Activation::kTanh: return std::tanh(z);
    case Activation::kIdentity: return z;
  }
  return z;
}

// Derivative expressed through the pre-activation and the activated value.
inline double activate_grad(Activation a, double z, double y) {
  switch (a) {
    case Activation::kRelu: return z > 0.0 ? 1.0 : 0.0;
    case Activation::kTanh: return 1.0 - y * y;
    case Activation::kIdentity: return 1.0;
  }
  return 1.0;
}

}  // namespace detail

inline ForwardPass forward(const MlpModel& model, const Matrix& batch_x) {
  if (model.layers.empty()) throw DimensionError("forward: empty model");
  if (batch_x.cols != model.input_dim())
    throw DimensionError("forward: batch has " + std::to_string(batch_x.cols) + " features, model expects " +
                         std::to_string(model.input_dim()));
  ForwardPass fp;
  fp.pre.reserve(model.layers.size());
  fp.post.reserve(model.layers.size());
  const Matrix* input = &batch_x;
  for (const auto& layer : model.layers) {
    if (input->cols != layer.in_dim()) throw DimensionError("forward: layer shapes do not compose");
    Matrix z = matmul(*input, transpose(layer.weights));
    for (std::size_t b = 0; b < z.rows; ++b) {
      auto zr = z.row(b);
      for (std::size_t o = 0; o < z.cols; ++o) zr[o] += layer.bias[o];
    }
    Matrix y = z;
    if (layer.activation != Activation::kIdentity)
      for (double& v : y.data) v = detail::activate(layer.activation, v);
    fp.pre.push_back(std::move(z));
    fp.post.push_back(std::move(y));
    input = &fp.post.back();
  }
  return fp;
}

struct LayerGrad {
  Matrix weights;
  std::vector<double> bias;
};

struct GradBundle {
  std::vector<LayerGrad> layers;

  double squared_norm() const {
    double s = 0.0;
    for (const auto& l : layers) {
      for (double g : l.weights.data) s += g * g;
      for (double g : l.bias) s += g * g;
    }
    return s;
  }

  bool all_finite() const {
    for (const auto& l : layers) {
      for (double g : l.weights.data)
        if (!std::isfinite(g)) return false;
      for (double g : l.bias)
        if (!std::isfinite(g)) return false;
    }
    return true;
  }
};

struct LossGrad {
  double loss = 0.0;
  GradBundle grads;
};

// Mean softmax cross-entropy over rows of `logits`.
inline double cross_entropy(const Matrix& logits, std::span<const std::size_t> labels) {
  double total = 0.0;
  for (std::size_t b = 0; b < logits.rows; ++b) {
    auto z = logits.row(b);
    const double zmax = *std::max_element(z.begin(), z.end());
    double sum = 0.0;
    for (double v : z) sum += std::exp(v - zmax);
    total += (std::log(sum) + zmax) - z[labels[b]];
  }
  return total / static_cast<double>(logits.rows);
}

namespace detail {

inline void check_labels(std::span<const std::size_t> labels, std::size_t rows, std::size_t classes) {
  if (rows == 0) throw InputError("empty batch");
  if (labels.size() != rows) throw DimensionError("label count does not match batch rows");
  for (auto y : labels)
    if (y >= classes)
      throw InputError("label " + std::to_string(y) + " out of range [0, " + std::to_string(classes) + ")");
}

}  // namespace detail

// Mean cross-entropy of the batch and its exact gradient.
inline LossGrad loss_and_grad(const MlpModel& model, const Matrix& batch_x, std::span<const std::size_t> labels) {
  detail::check_labels(labels, batch_x.rows, model.num_classes());
  const ForwardPass fp = forward(model, batch_x);
  const Matrix& logits = fp.logits();
  const std::size_t batch = batch_x.rows;
  const double inv_batch = 1.0 / static_cast<double>(batch);

  LossGrad out;
  out.loss = cross_entropy(logits, labels);

  // dL/dlogits = (softmax - onehot) / B
  Matrix dz(batch, logits.cols);
  for (std::size_t b = 0; b < batch; ++b) {
    auto z = logits.row(b);
    auto g = dz.row(b);
    const double zmax = *std::max_element(z.begin(), z.end());
    double sum = 0.0;
    for (std::size_t c = 0; c < z.size(); ++c) {
      g[c] = std::exp(z[c] - zmax);
      sum += g[c];
    }
    for (std::size_t c = 0; c < z.size(); ++c) g[c] = g[c] / sum * inv_batch;
    g[labels[b]] -= inv_batch;
  }

  const std::size_t num_layers = model.layers.size();
  out.grads.layers.resize(num_layers);
  for (std::size_t l = num_layers; l-- > 0;) {
    const DenseLayer& layer = model.layers[l];
    if (layer.activation != Activation::kIdentity) {
      const Matrix& z = fp.pre[l];
      const Matrix& y = fp.post[l];
      for (std::size_t i = 0; i < dz.data.size(); ++i)
        dz.data[i] *= detail::activate_grad(layer.activation, z.data[i], y.data[i]);
    }
    const Matrix& input = l == 0 ? batch_x : fp.post[l - 1];
    LayerGrad& lg = out.grads.layers[l];
    lg.weights = matmul(transpose(dz), input);
    lg.bias.assign(layer.out_dim(), 0.0);
    for (std::size_t b = 0; b < batch; ++b) {
      auto g = dz.row(b);
      for (std::size_t o = 0; o < g.size(); ++o) lg.bias[o] += g[o];
    }
    if (l > 0) dz = matmul(dz, layer.weights);
  }
  return out;
}

inline void check_congruent(const MlpModel& model, const GradBundle& grads) {
  if (grads.layers.size() != model.layers.size()) throw DimensionError("gradient layer count mismatch");
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    const auto& p = model.layers[l];
    const auto& g = grads.layers[l];
    if (g.weights.rows != p.weights.rows || g.weights.cols != p.weights.cols || g.bias.size() != p.bias.size())
      throw DimensionError("gradient shape mismatch at layer " + std::to_string(l));
  }
}

// p <- p - eta * g for every parameter.
inline void sgd_step(MlpModel& model, const GradBundle& grads, double eta) {
  if (!(eta >= 0.0)) throw InputError("sgd_step: learning rate must be non-negative");
  check_congruent(model, grads);
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    auto& p = model.layers[l];
    const auto& g = grads.layers[l];
    for (std::size_t i = 0; i < p.weights.data.size(); ++i) p.weights.data[i] -= eta * g.weights.data[i];
    for (std::size_t i = 0; i < p.bias.size(); ++i) p.bias[i] -= eta * g.bias[i];
  }
}

// Flatten order of layer l: weights row-major (out x in), then bias.
// Layer indices are zero-based.
inline std::vector<double> layer_flatten(const MlpModel& model, std::size_t l) {
  if (l >= model.layers.size()) throw DimensionError("layer index " + std::to_string(l) + " out of range");
  const auto& layer = model.layers[l];
  std::vector<double> flat;
  flat.reserve(layer.param_dim());
  flat.insert(flat.end(), layer.weights.data.begin(), layer.weights.data.end());
  flat.insert(flat.end(), layer.bias.begin(), layer.bias.end());
  return flat;
}

inline void layer_unflatten(MlpModel& model, std::size_t l, std::span<const double> values) {
  if (l >= model.layers.size()) throw DimensionError("layer index " + std::to_string(l) + " out of range");
  auto& layer = model.layers[l];
  if (values.size() != layer.param_dim())
    throw DimensionError("layer_unflatten: got " + std::to_string(values.size()) + " values, layer has " +
                         std::to_string(layer.param_dim()));
  const std::size_t nw = layer.weights.data.size();
  std::copy(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(nw), layer.weights.data.begin());
  std::copy(values.begin() + static_cast<std::ptrdiff_t>(nw), values.end(), layer.bias.begin());
}

struct EvalResult {
  double loss = 0.0;
  double accuracy = 0.0;
};

inline EvalResult evaluate(const MlpModel& model, const Matrix& x, std::span<const std::size_t> labels) {
  detail::check_labels(labels, x.rows, model.num_classes());
  const ForwardPass fp = forward(model, x);
  const Matrix& logits = fp.logits();
  std::size_t correct = 0;
  for (std::size_t b = 0; b < logits.rows; ++b) {
    auto z = logits.row(b);
    const auto pred = static_cast<std::size_t>(std::max_element(z.begin(), z.end()) - z.begin());
    if (pred == labels[b]) ++correct;
  }
  return {cross_entropy(logits, labels), static_cast<double>(correct) / static_cast<double>(x.rows)};
}

inline bool all_finite(const MlpModel& model) {
  for (const auto& l : model.layers) {
    for (double w : l.weights.data)
      if (!std::isfinite(w)) return false;
    for (double b : l.bias)
      if (!std::isfinite(b)) return false;
  }
  return true;
}

}  // namespace fedlama
