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

// Dense realizations of the averaging matrices used in the convergence
// analysis of layer-wise averaging, with numerical checks of their
// structural properties.
//
// m clients each hold d coordinates; stacked vectors have length m*d with
// client a's coordinate j at index a*d + j. A partial-averaging matrix P is an
// m x m grid of d x d diagonal blocks: coordinates in the least-critical set
// (LCL) are left alone, every other coordinate is replaced by its mean over
// clients. J averages every coordinate.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <functional>
#include <numeric>
#include <ostream>
#include <random>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "fedlama/error.hpp"
#include "fedlama/nn_core.hpp"
#include "fedlama/rng.hpp"

namespace fedlama {

struct MaskSpec {
  std::size_t d = 1;
  std::size_t m = 1;
  std::vector<std::size_t> lcl_coords;
};

inline Matrix identity_matrix(std::size_t n) {
  Matrix a(n, n);
  for (std::size_t i = 0; i < n; ++i) a(i, i) = 1.0;
  return a;
}

inline Matrix build_P(const MaskSpec& mask) {
  if (mask.d == 0 || mask.m == 0) throw InputError("build_P: d and m must be >= 1");
  std::vector<bool> lcl(mask.d, false);
  for (auto j : mask.lcl_coords) {
    if (j >= mask.d) throw InputError("build_P: LCL coordinate out of range");
    lcl[j] = true;
  }
  const std::size_t n = mask.m * mask.d;
  const double inv_m = 1.0 / static_cast<double>(mask.m);
  Matrix p(n, n);
  for (std::size_t a = 0; a < mask.m; ++a)
    for (std::size_t b = 0; b < mask.m; ++b)
      for (std::size_t j = 0; j < mask.d; ++j)
        p(a * mask.d + j, b * mask.d + j) = lcl[j] ? (a == b ? 1.0 : 0.0) : inv_m;
  return p;
}

// (1/m) 1 1^T (x) I_d
inline Matrix build_J(std::size_t m, std::size_t d) {
  if (m == 0 || d == 0) throw InputError("build_J: m and d must be >= 1");
  return build_P({d, m, {}});
}

inline Matrix subtract(const Matrix& a, const Matrix& b) {
  if (a.rows != b.rows || a.cols != b.cols) throw DimensionError("subtract: shapes differ");
  Matrix c = a;
  for (std::size_t i = 0; i < c.data.size(); ++i) c.data[i] -= b.data[i];
  return c;
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
  if (a.rows != b.rows || a.cols != b.cols) throw DimensionError("max_abs_diff: shapes differ");
  double m = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) m = std::max(m, std::abs(a.data[i] - b.data[i]));
  return m;
}

inline double max_asymmetry(const Matrix& a) {
  if (a.rows != a.cols) return INFINITY;
  double m = 0.0;
  for (std::size_t i = 0; i < a.rows; ++i)
    for (std::size_t j = i + 1; j < a.cols; ++j) m = std::max(m, std::abs(a(i, j) - a(j, i)));
  return m;
}

// max_i |sum_j a_ij - 1|
inline double max_row_sum_error(const Matrix& a) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.rows; ++i) {
    double s = 0.0;
    for (double v : a.row(i)) s += v;
    m = std::max(m, std::abs(s - 1.0));
  }
  return m;
}

// Largest entry that breaks the "every d x d block is diagonal" structure.
inline double max_offdiagonal_block_entry(const Matrix& a, std::size_t d) {
  if (d == 0 || a.rows % d != 0 || a.cols % d != 0) throw DimensionError("matrix is not a grid of d x d blocks");
  double m = 0.0;
  for (std::size_t r = 0; r < a.rows; ++r)
    for (std::size_t c = 0; c < a.cols; ++c)
      if (r % d != c % d) m = std::max(m, std::abs(a(r, c)));
  return m;
}

struct OpNormResult {
  double value = 0.0;
  double residual = 0.0;
  std::size_t iterations = 0;
  bool converged = false;
};

inline std::vector<double> matvec(const Matrix& a, std::span<const double> v) {
  std::vector<double> out(a.rows, 0.0);
  for (std::size_t i = 0; i < a.rows; ++i) {
    double s = 0.0;
    auto r = a.row(i);
    for (std::size_t j = 0; j < a.cols; ++j) s += r[j] * v[j];
    out[i] = s;
  }
  return out;
}

inline double norm2(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

// Operator 2-norm of a symmetric matrix, i.e. its spectral radius, by power
// iteration from a seeded random start. Convergence is judged on the A^2
// eigen-residual ||A^2 v - s^2 v|| / s^2 with s = ||A v||, which also settles
// when +lambda and -lambda are both dominant.
inline OpNormResult op_norm(const Matrix& a, std::uint64_t seed = 0, double tolerance = 1e-12,
                            std::size_t max_iterations = 100000) {
  if (a.rows != a.cols) throw DimensionError("op_norm: matrix is not square");
  if (a.rows == 0) return {0.0, 0.0, 0, true};
  for (double v : a.data)
    if (!std::isfinite(v)) throw InputError("op_norm: non-finite entry");
  if (max_asymmetry(a) > 1e-12) throw InputError("op_norm: matrix is not symmetric");

  Rng rng = make_stream(seed, "op-norm");
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  std::vector<double> v(a.rows);
  for (double& x : v) x = dist(rng);
  double nv = norm2(v);
  for (double& x : v) x /= nv;

  // Repeated squaring of A^2 first, so that nearly tied dominant eigenvalues
  // separate after a few dozen products instead of millions of iterations.
  Matrix b = matmul(a, a);
  for (int sq = 0; sq < 64; ++sq) {
    double scale = 0.0;
    for (double x : b.data) scale = std::max(scale, std::abs(x));
    if (scale == 0.0) break;
    for (double& x : b.data) x /= scale;
    Matrix next = matmul(b, b);
    const bool settled = max_abs_diff(next, b) == 0.0;
    b = std::move(next);
    if (settled) break;
  }
  if (auto bv = matvec(b, v); norm2(bv) > 0.0) {
    nv = norm2(bv);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = bv[i] / nv;
  }

  OpNormResult res;
  for (std::size_t it = 1; it <= max_iterations; ++it) {
    auto w = matvec(a, v);
    const double s = norm2(w);
    res.iterations = it;
    res.value = s;
    if (s == 0.0) {
      res.residual = 0.0;
      res.converged = true;
      return res;
    }
    const auto aw = matvec(a, w);
    double r = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double e = aw[i] - s * s * v[i];
      r += e * e;
    }
    res.residual = std::sqrt(r) / (s * s);
    if (res.residual <= tolerance) {
      res.converged = true;
      return res;
    }
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = w[i] / s;
  }
  return res;
}

inline bool some_coordinate_survives(std::span<const MaskSpec> masks) {
  if (masks.empty() || masks.front().m < 2) return false;
  std::set<std::size_t> common(masks.front().lcl_coords.begin(), masks.front().lcl_coords.end());
  for (const auto& mk : masks.subspan(1)) {
    std::set<std::size_t> next;
    for (auto j : mk.lcl_coords)
      if (common.count(j)) next.insert(j);
    common = std::move(next);
  }
  return !common.empty();
}

struct LemmaCheck {
  std::size_t m = 0;
  std::size_t d = 0;
  std::size_t t = 0;
  bool lemma_applies = false;  // m >= 2 and some coordinate is LCL in every factor
  double value = 0.0;          // ||J - prod P||_op
  double value_error = 0.0;    // |value - 1| if the lemma applies, |value| otherwise
  double row_sum_error = 0.0;  // over factors
  double asymmetry = 0.0;      // over factors and the product
  double offdiag_block = 0.0;  // product
  double property4_gap = 0.0;  // product vs 1/m entries of each factor
  double absorption = 0.0;     // max ||J P - J||_max, ||J^2 - J||_max
  OpNormResult norm;
  Matrix product;
  bool pass = false;
};

inline constexpr double kStructureTolerance = 1e-14;
inline constexpr double kLemmaTolerance = 1e-10;

// Builds P_1..P_t from `masks`, their product and J, and checks P 1 = 1,
// diagonal blocks and symmetry of the product, retention of every 1/m entry,
// J P = J, and ||J - prod P||_op == 1 (or == 0 when every coordinate was
// averaged at least once).
inline LemmaCheck lemma_zeroout_check(std::span<const MaskSpec> masks, std::uint64_t seed = 0) {
  if (masks.empty()) throw InputError("lemma_zeroout_check: need at least one factor");
  const std::size_t m = masks.front().m;
  const std::size_t d = masks.front().d;
  for (const auto& mk : masks)
    if (mk.m != m || mk.d != d) throw DimensionError("lemma_zeroout_check: masks disagree on (m, d)");

  LemmaCheck out;
  out.m = m;
  out.d = d;
  out.t = masks.size();
  const Matrix j = build_J(m, d);
  out.absorption = max_abs_diff(matmul(j, j), j);
  const double inv_m = 1.0 / static_cast<double>(m);

  std::vector<Matrix> factors;
  for (const auto& mk : masks) factors.push_back(build_P(mk));
  Matrix prod = factors.front();
  for (std::size_t i = 1; i < factors.size(); ++i) prod = matmul(prod, factors[i]);

  for (const auto& p : factors) {
    out.row_sum_error = std::max(out.row_sum_error, max_row_sum_error(p));
    out.asymmetry = std::max(out.asymmetry, max_asymmetry(p));
    out.absorption = std::max(out.absorption, max_abs_diff(matmul(j, p), j));
    for (std::size_t i = 0; i < p.data.size(); ++i)
      if (p.data[i] == inv_m) out.property4_gap = std::max(out.property4_gap, std::abs(prod.data[i] - inv_m));
  }
  out.asymmetry = std::max(out.asymmetry, max_asymmetry(prod));
  out.offdiag_block = max_offdiagonal_block_entry(prod, d);

  out.lemma_applies = some_coordinate_survives(masks);
  const Matrix diff = subtract(j, prod);
  out.norm = op_norm(diff, seed);
  out.value = out.norm.value;
  out.value_error = out.lemma_applies ? std::abs(out.value - 1.0) : std::abs(out.value);
  out.product = std::move(prod);

  out.pass = out.norm.converged && out.row_sum_error <= kStructureTolerance &&
             out.asymmetry <= kStructureTolerance && out.offdiag_block <= kStructureTolerance &&
             out.property4_gap <= kStructureTolerance && out.absorption <= kStructureTolerance &&
             out.value_error <= kLemmaTolerance;
  return out;
}

// One line of the pass/fail table.
struct PropertyTally {
  std::string name;
  std::size_t checked = 0;
  double max_deviation = 0.0;
  double tolerance = 0.0;
  bool pass = true;

  void add(double deviation) {
    ++checked;
    max_deviation = std::max(max_deviation, deviation);
    if (!(deviation <= tolerance)) pass = false;
  }
};

struct BatteryOptions {
  std::size_t instances = 100;
  std::size_t max_md = 64;
  std::size_t max_factors = 4;
  std::size_t operator_samples = 1000;
  std::uint64_t seed = 7;
};

struct BatteryInstance {
  std::vector<MaskSpec> masks;
  LemmaCheck check;
};

struct BatteryReport {
  std::vector<PropertyTally> rows;
  std::vector<BatteryInstance> instances;
  std::size_t lemma_applicable = 0;

  bool pass() const {
    return std::all_of(rows.begin(), rows.end(), [](const auto& r) { return r.pass; });
  }
};

// Random (m, d, masks) instances with m * d <= max_md. About three in four
// instances keep one coordinate in every mask so the unit-norm case is
// exercised; the rest usually average everything at some point.
inline std::vector<MaskSpec> random_mask_sequence(Rng& rng, std::size_t max_md, std::size_t max_factors) {
  if (max_md < 4) throw InputError("max_md must be >= 4");
  std::uniform_int_distribution<std::size_t> pick_m(2, std::min<std::size_t>(8, max_md / 2));
  const std::size_t m = pick_m(rng);
  std::uniform_int_distribution<std::size_t> pick_d(2, max_md / m);
  const std::size_t d = pick_d(rng);
  std::uniform_int_distribution<std::size_t> pick_t(1, std::max<std::size_t>(1, max_factors));
  const std::size_t t = pick_t(rng);
  std::bernoulli_distribution coin(0.5);
  std::bernoulli_distribution force(0.75);
  std::uniform_int_distribution<std::size_t> pick_coord(0, d - 1);
  const bool survive = force(rng);
  const std::size_t keep = pick_coord(rng);

  std::vector<MaskSpec> masks;
  for (std::size_t i = 0; i < t; ++i) {
    MaskSpec mk{d, m, {}};
    for (std::size_t j = 0; j < d; ++j)
      if ((survive && j == keep) || coin(rng)) mk.lcl_coords.push_back(j);
    if (mk.lcl_coords.size() == d) {
      // keep every mask a strict subset
      std::size_t drop = pick_coord(rng);
      if (survive && drop == keep) drop = (drop + 1) % d;
      mk.lcl_coords.erase(std::find(mk.lcl_coords.begin(), mk.lcl_coords.end(), drop));
    }
    masks.push_back(std::move(mk));
  }
  return masks;
}

inline BatteryReport run_theory_battery(const BatteryOptions& opt) {
  BatteryReport rep;
  PropertyTally row_sums{"P*1 = 1 (row sums)", 0, 0.0, kStructureTolerance};
  PropertyTally symmetry{"P and prod P symmetric", 0, 0.0, kStructureTolerance};
  PropertyTally blocks{"prod P has diagonal blocks", 0, 0.0, kStructureTolerance};
  PropertyTally keeps{"prod P keeps factors' 1/m entries", 0, 0.0, kStructureTolerance};
  PropertyTally absorb{"J*P = J and J*J = J", 0, 0.0, kStructureTolerance};
  PropertyTally lemma{"||J - prod P||_op = 1 (coordinate survives)", 0, 0.0, kLemmaTolerance};
  PropertyTally excluded{"||J - prod P||_op = 0 (all averaged)", 0, 0.0, kLemmaTolerance};
  PropertyTally converged{"power iteration converged", 0, 0.0, 0.0};
  PropertyTally operator_bound{"||Ab|| <= ||A||_op ||b|| (sampled)", 0, 0.0, kLemmaTolerance};

  Rng rng = make_stream(opt.seed, "theory-battery");
  for (std::size_t n = 0; n < opt.instances; ++n) {
    BatteryInstance inst;
    inst.masks = random_mask_sequence(rng, opt.max_md, opt.max_factors);
    inst.check = lemma_zeroout_check(inst.masks, opt.seed + n);
    const auto& c = inst.check;
    row_sums.add(c.row_sum_error);
    symmetry.add(c.asymmetry);
    blocks.add(c.offdiag_block);
    keeps.add(c.property4_gap);
    absorb.add(c.absorption);
    converged.add(c.norm.converged ? 0.0 : 1.0);
    if (c.lemma_applies) {
      lemma.add(c.value_error);
      ++rep.lemma_applicable;
    } else {
      excluded.add(c.value_error);
    }
    rep.instances.push_back(std::move(inst));
  }

  // Operator bound on random symmetric matrices.
  Rng arng = make_stream(opt.seed, "operator-bound");
  std::uniform_int_distribution<std::size_t> pick_n(1, 8);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (std::size_t s = 0; s < opt.operator_samples; ++s) {
    const std::size_t n = pick_n(arng);
    Matrix a(n, n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i; j < n; ++j) a(i, j) = a(j, i) = normal(arng);
    std::vector<double> b(n);
    for (double& x : b) x = normal(arng);
    const auto on = op_norm(a, opt.seed + s);
    converged.add(on.converged ? 0.0 : 1.0);
    operator_bound.add(std::max(0.0, norm2(matvec(a, b)) - on.value * norm2(b)));
  }

  rep.rows = {row_sums, symmetry, blocks, keeps, absorb, lemma, excluded, converged, operator_bound};
  return rep;
}

// Checks a user-supplied matrix as a candidate averaging matrix over m clients.
inline std::vector<PropertyTally> check_averaging_matrix(const Matrix& a, std::size_t m) {
  PropertyTally square{"square, size divisible by m", 0, 0.0, 0.0};
  square.add(a.rows == a.cols && m > 0 && a.rows % m == 0 && a.rows > 0 ? 0.0 : 1.0);
  if (!square.pass) return {square};
  PropertyTally sym{"symmetric", 0, 0.0, kStructureTolerance};
  sym.add(max_asymmetry(a));
  PropertyTally rows{"row sums = 1", 0, 0.0, kStructureTolerance};
  rows.add(max_row_sum_error(a));
  PropertyTally blocks{"diagonal blocks", 0, 0.0, kStructureTolerance};
  blocks.add(max_offdiagonal_block_entry(a, a.rows / m));
  return {square, sym, rows, blocks};
}

inline std::string format_double(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline void write_matrix_csv(std::ostream& os, const Matrix& a) {
  for (std::size_t i = 0; i < a.rows; ++i) {
    for (std::size_t j = 0; j < a.cols; ++j) {
      if (j) os << ',';
      os << format_double(a(i, j));
    }
    os << '\n';
  }
}

// Headerless numeric CSV, one matrix row per line.
inline Matrix read_matrix_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open matrix file '" + path + "'");
  Matrix a;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::size_t cols = 0;
    while (std::getline(ss, cell, ',')) {
      try {
        a.data.push_back(std::stod(cell));
      } catch (const std::logic_error&) {
        throw InputError("bad matrix entry '" + cell + "' in " + path);
      }
      ++cols;
    }
    if (a.rows == 0) a.cols = cols;
    if (cols != a.cols) throw InputError("ragged matrix rows in " + path);
    ++a.rows;
  }
  return a;
}

}  // namespace fedlama
