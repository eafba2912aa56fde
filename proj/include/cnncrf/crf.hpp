#pragma once

// MAP inference for the 4-connected CRF with truncated penalty, by dual
// decomposition into horizontal chains (carrying all unaries) and vertical
// chains (no unaries) coupled through Lagrange multipliers.

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>
#include <stdexcept>
#include <vector>

#include "cnncrf/common.hpp"
#include "cnncrf/correlation.hpp"
#include "cnncrf/pairwise.hpp"

namespace cnncrf {

template <typename Real = double>
struct CrfProblem {
  CostVolume<Real> unary;
  EdgeWeights<Real> weights;
  PenaltyParams penalty;

  std::size_t height() const { return unary.height(); }
  std::size_t width() const { return unary.width(); }
  std::size_t labels() const { return unary.labels(); }

  void validate() const {
    require(weights.height == unary.height() && weights.width == unary.width(),
            "CrfProblem: edge weights and unaries differ in shape");
    if (!penalty.satisfies_invariant()) throw std::invalid_argument("CrfProblem: need 0 <= P1 <= P2");
  }
};

/// Lagrange multipliers, one per (pixel, label).
template <typename Real = double>
using DualState = CostVolume<Real>;

template <typename Real>
DualState<Real> zero_dual(const CrfProblem<Real>& prob) {
  return DualState<Real>(prob.height(), prob.width(), prob.labels(), Real(0));
}

/// A chain of n nodes with L labels; edge_weight[j] couples nodes j and j+1.
template <typename Real = double>
struct ChainProblem {
  std::size_t length = 0;
  std::size_t labels = 0;
  std::vector<Real> node_costs;  // length × labels
  std::vector<Real> edge_weight;  // length-1
  PenaltyParams penalty;

  ChainProblem() = default;
  ChainProblem(std::size_t n, std::size_t L, PenaltyParams p)
      : length(n), labels(L), node_costs(n * L, Real(0)), edge_weight(n ? n - 1 : 0, Real(0)), penalty(p) {}

  Real& cost(std::size_t i, std::size_t k) { return node_costs[i * labels + k]; }
  Real cost(std::size_t i, std::size_t k) const { return node_costs[i * labels + k]; }

  Real energy(const std::vector<int>& x) const {
    Real e = 0;
    for (std::size_t i = 0; i < length; ++i) e += cost(i, x[i]);
    for (std::size_t i = 0; i + 1 < length; ++i) e += edge_weight[i] * static_cast<Real>(rho(x[i] - x[i + 1], penalty));
    return e;
  }
};

// ---------------------------------------------------------------------------
// Chain dynamic programming

/// out(k) = min_j [ in(j) + w * rho(|j-k|) ] in O(L), valid for 0 <= P1 <= P2.
template <typename Real>
void truncated_message(const Real* in, std::size_t L, Real w, const PenaltyParams& p, Real* out) {
  Real mn = in[0];
  for (std::size_t k = 1; k < L; ++k) mn = std::min(mn, in[k]);
  const Real jump = mn + w * static_cast<Real>(p.P2);
  const Real step = w * static_cast<Real>(p.P1);
  for (std::size_t k = 0; k < L; ++k) {
    Real m = std::min(in[k], jump);
    if (k > 0) m = std::min(m, in[k - 1] + step);
    if (k + 1 < L) m = std::min(m, in[k + 1] + step);
    out[k] = m;
  }
}

/// Reference O(L²) min-plus product used to check truncated_message.
template <typename Real>
void naive_message(const Real* in, std::size_t L, Real w, const PenaltyParams& p, Real* out) {
  for (std::size_t k = 0; k < L; ++k) {
    Real m = std::numeric_limits<Real>::infinity();
    for (std::size_t j = 0; j < L; ++j)
      m = std::min(m, in[j] + w * static_cast<Real>(rho(static_cast<int>(j) - static_cast<int>(k), p)));
    out[k] = m;
  }
}

namespace detail {

// Min-marginals of a chain given as node costs + weights. `bwd` and `tmp`
// are scratch buffers of length n*L.
template <typename Real>
void min_marginals(std::size_t n, std::size_t L, const Real* costs, const Real* w, std::size_t w_stride,
                   const PenaltyParams& p, Real* mm, std::vector<Real>& bwd, std::vector<Real>& tmp) {
  bwd.assign(n * L, Real(0));
  tmp.resize(L);
  for (std::size_t i = n - 1; i-- > 0;) {
    for (std::size_t k = 0; k < L; ++k) tmp[k] = bwd[(i + 1) * L + k] + costs[(i + 1) * L + k];
    truncated_message(tmp.data(), L, w[i * w_stride], p, bwd.data() + i * L);
  }
  // forward pass written straight into mm as F, then add bwd
  std::copy(costs, costs + L, mm);
  for (std::size_t i = 1; i < n; ++i) {
    truncated_message(mm + (i - 1) * L, L, w[(i - 1) * w_stride], p, mm + i * L);
    for (std::size_t k = 0; k < L; ++k) mm[i * L + k] += costs[i * L + k];
  }
  for (std::size_t n_ = 0; n_ < n * L; ++n_) mm[n_] += bwd[n_];
}

}  // namespace detail

/// m_v(k) = min over chain labelings with x_v = k of the chain energy.
template <typename Real>
std::vector<Real> chain_min_marginals(const ChainProblem<Real>& chain) {
  if (!chain.penalty.satisfies_invariant()) throw std::invalid_argument("chain_min_marginals: need 0 <= P1 <= P2");
  require(chain.length >= 1 && chain.node_costs.size() == chain.length * chain.labels, "invalid chain");
  std::vector<Real> mm(chain.length * chain.labels), bwd, tmp;
  static const Real zero = Real(0);
  const Real* w = chain.edge_weight.empty() ? &zero : chain.edge_weight.data();
  detail::min_marginals(chain.length, chain.labels, chain.node_costs.data(), w, 1, chain.penalty, mm.data(), bwd,
                        tmp);
  return mm;
}

// ---------------------------------------------------------------------------
// Energy and decomposition

template <typename Real>
Real energy(const CrfProblem<Real>& prob, const Labeling& x) {
  require(x.height() == prob.height() && x.width() == prob.width(), "energy: labeling shape mismatch");
  const std::size_t H = prob.height(), W = prob.width();
  Real e = 0;
  for (std::size_t r = 0; r < H; ++r)
    for (std::size_t c = 0; c < W; ++c) {
      e += prob.unary(r, c, x(r, c));
      if (c + 1 < W) e += prob.weights.h(r, c) * static_cast<Real>(rho(x(r, c) - x(r, c + 1), prob.penalty));
      if (r + 1 < H) e += prob.weights.v(r, c) * static_cast<Real>(rho(x(r, c) - x(r + 1, c), prob.penalty));
    }
  return e;
}

/// Row chains with all unaries (f1) and column chains with zero unaries (f2).
template <typename Real = double>
struct Decomposition {
  std::vector<ChainProblem<Real>> rows;
  std::vector<ChainProblem<Real>> cols;

  /// f1(x) + f2(x), evaluated chain by chain.
  Real energy(const Labeling& x) const { return row_energy(x) + col_energy(x); }
  Real row_energy(const Labeling& x) const {
    Real e = 0;
    for (std::size_t r = 0; r < rows.size(); ++r) {
      std::vector<int> lab(x.width());
      for (std::size_t c = 0; c < x.width(); ++c) lab[c] = x(r, c);
      e += rows[r].energy(lab);
    }
    return e;
  }
  Real col_energy(const Labeling& x) const {
    Real e = 0;
    for (std::size_t c = 0; c < cols.size(); ++c) {
      std::vector<int> lab(x.height());
      for (std::size_t r = 0; r < x.height(); ++r) lab[r] = x(r, c);
      e += cols[c].energy(lab);
    }
    return e;
  }
};

/// Splits the problem into row and column chains. With a dual state the
/// chains become (f1 + lambda) and (f2 - lambda).
template <typename Real>
Decomposition<Real> decompose(const CrfProblem<Real>& prob, const DualState<Real>* lam = nullptr) {
  const std::size_t H = prob.height(), W = prob.width(), L = prob.labels();
  Decomposition<Real> d;
  for (std::size_t r = 0; r < H; ++r) {
    ChainProblem<Real> ch(W, L, prob.penalty);
    for (std::size_t c = 0; c < W; ++c) {
      for (std::size_t k = 0; k < L; ++k) ch.cost(c, k) = prob.unary(r, c, k) + (lam ? (*lam)(r, c, k) : Real(0));
      if (c + 1 < W) ch.edge_weight[c] = prob.weights.h(r, c);
    }
    d.rows.push_back(std::move(ch));
  }
  for (std::size_t c = 0; c < W; ++c) {
    ChainProblem<Real> ch(H, L, prob.penalty);
    for (std::size_t r = 0; r < H; ++r) {
      for (std::size_t k = 0; k < L; ++k) ch.cost(r, k) = lam ? -(*lam)(r, c, k) : Real(0);
      if (r + 1 < H) ch.edge_weight[r] = prob.weights.v(r, c);
    }
    d.cols.push_back(std::move(ch));
  }
  return d;
}

// ---------------------------------------------------------------------------
// Min-marginals of all chains of one orientation

enum class ChainFamily { Rows, Cols };

namespace detail {

// Gathers node costs of one chain from the grid: rows use unary + lambda,
// columns use -lambda.
template <typename Real>
void gather_chain(const CrfProblem<Real>& prob, const DualState<Real>& lam, ChainFamily fam, std::size_t index,
                  std::vector<Real>& costs, std::vector<Real>& w) {
  const std::size_t H = prob.height(), W = prob.width(), L = prob.labels();
  const std::size_t n = fam == ChainFamily::Rows ? W : H;
  costs.resize(n * L);
  w.assign(std::max<std::size_t>(n, 1), Real(0));
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t r = fam == ChainFamily::Rows ? index : i;
    const std::size_t c = fam == ChainFamily::Rows ? i : index;
    const Real* lp = lam.pixel(r * W + c);
    Real* dst = costs.data() + i * L;
    if (fam == ChainFamily::Rows) {
      const Real* up = prob.unary.pixel(r * W + c);
      for (std::size_t k = 0; k < L; ++k) dst[k] = up[k] + lp[k];
      if (i + 1 < n) w[i] = prob.weights.h(r, c);
    } else {
      for (std::size_t k = 0; k < L; ++k) dst[k] = -lp[k];
      if (i + 1 < n) w[i] = prob.weights.v(r, c);
    }
  }
}

template <typename Real>
void scatter_chain(CostVolume<Real>& vol, ChainFamily fam, std::size_t index, const std::vector<Real>& chain_vals) {
  const std::size_t L = vol.labels(), W = vol.width();
  const std::size_t n = fam == ChainFamily::Rows ? vol.width() : vol.height();
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t r = fam == ChainFamily::Rows ? index : i;
    const std::size_t c = fam == ChainFamily::Rows ? i : index;
    std::copy(chain_vals.begin() + i * L, chain_vals.begin() + (i + 1) * L, vol.pixel(r * W + c));
  }
}

}  // namespace detail

/// Min-marginals of every (f1+lambda) row chain or (f2-lambda) column chain,
/// scattered back onto the grid.
template <typename Real>
CostVolume<Real> family_min_marginals(const CrfProblem<Real>& prob, const DualState<Real>& lam, ChainFamily fam) {
  const std::size_t count = fam == ChainFamily::Rows ? prob.height() : prob.width();
  const std::size_t n = fam == ChainFamily::Rows ? prob.width() : prob.height();
  CostVolume<Real> out(prob.height(), prob.width(), prob.labels());
  out.validity() = prob.unary.validity();
  std::vector<Real> costs, w, mm(n * prob.labels()), bwd, tmp;
  for (std::size_t idx = 0; idx < count; ++idx) {
    detail::gather_chain(prob, lam, fam, idx, costs, w);
    detail::min_marginals(n, prob.labels(), costs.data(), w.data(), 1, prob.penalty, mm.data(), bwd, tmp);
    detail::scatter_chain(out, fam, idx, mm);
  }
  return out;
}

/// D(lambda) = sum of row-chain minima of (f1+lambda) + column-chain minima
/// of (f2-lambda). A lower bound on the minimal energy for every lambda.
template <typename Real>
Real dual_bound(const CrfProblem<Real>& prob, const DualState<Real>& lam) {
  prob.validate();
  require(lam.height() == prob.height() && lam.width() == prob.width() && lam.labels() == prob.labels(),
          "dual_bound: dual state shape mismatch");
  const std::size_t L = prob.labels();
  Real total = 0;
  for (ChainFamily fam : {ChainFamily::Rows, ChainFamily::Cols}) {
    auto mm = family_min_marginals(prob, lam, fam);
    // any node of a chain carries the chain minimum; take the first one
    const std::size_t count = fam == ChainFamily::Rows ? prob.height() : prob.width();
    for (std::size_t idx = 0; idx < count; ++idx) {
      const Real* v = fam == ChainFamily::Rows ? mm.pixel(idx * prob.width()) : mm.pixel(idx);
      total += *std::min_element(v, v + L);
    }
  }
  return total;
}

// ---------------------------------------------------------------------------
// Minorize–maximize dual update

namespace detail {

// One-sided sequential minorant: walking along the chain, node i takes the
// fraction 1/(n-i) of its current (normalized) min-marginal, which is then
// removed from its cost before moving on. The result g satisfies
// sum_i g_i(x_i) <= E(x) - min E for every labeling, with equality at every
// minimizer of E.
template <typename Real>
void sequential_minorant(std::size_t n, std::size_t L, std::vector<Real> costs, const Real* w, std::ptrdiff_t dir,
                         const PenaltyParams& p, Real* g, std::vector<Real>& bwd, std::vector<Real>& fwd,
                         std::vector<Real>& tmp) {
  // index of the t-th node visited
  auto node = [&](std::size_t t) { return dir > 0 ? t : n - 1 - t; };
  // weight between visit t and t+1
  auto weight = [&](std::size_t t) { return dir > 0 ? w[t] : w[n - 2 - t]; };

  bwd.assign(n * L, Real(0));  // message from the not-yet-visited side
  tmp.resize(L);
  for (std::size_t t = n - 1; t-- > 0;) {
    const Real* next = costs.data() + node(t + 1) * L;
    for (std::size_t k = 0; k < L; ++k) tmp[k] = bwd[(t + 1) * L + k] + next[k];
    truncated_message(tmp.data(), L, weight(t), p, bwd.data() + t * L);
  }
  fwd.assign(L, Real(0));
  std::vector<Real> incoming(L, Real(0));
  for (std::size_t t = 0; t < n; ++t) {
    if (t > 0) truncated_message(fwd.data(), L, weight(t - 1), p, incoming.data());
    Real* cost = costs.data() + node(t) * L;
    Real* gi = g + node(t) * L;
    Real mn = std::numeric_limits<Real>::infinity();
    for (std::size_t k = 0; k < L; ++k) {
      tmp[k] = incoming[k] + cost[k] + bwd[t * L + k];
      mn = std::min(mn, tmp[k]);
    }
    const Real frac = Real(1) / static_cast<Real>(n - t);
    for (std::size_t k = 0; k < L; ++k) {
      gi[k] = (tmp[k] - mn) * frac;
      cost[k] -= gi[k];
      fwd[k] = incoming[k] + cost[k];
    }
  }
}

}  // namespace detail

/// Tight modular minorant of a chain: the average of the forward and backward
/// sequential minorants. Entries are non-negative and vanish at the chain's
/// minimizers.
template <typename Real>
std::vector<Real> chain_minorant(std::size_t n, std::size_t L, const std::vector<Real>& costs, const Real* w,
                                 const PenaltyParams& p) {
  std::vector<Real> g_fwd(n * L), g_bwd(n * L), bwd, fwd, tmp;
  detail::sequential_minorant(n, L, costs, w, +1, p, g_fwd.data(), bwd, fwd, tmp);
  detail::sequential_minorant(n, L, costs, w, -1, p, g_bwd.data(), bwd, fwd, tmp);
  for (std::size_t i = 0; i < n * L; ++i) g_fwd[i] = Real(0.5) * (g_fwd[i] + g_bwd[i]);
  return g_fwd;
}

/// Half-step: minorize every chain of `from` and move the minorant into the
/// other family (rows: lambda -= g; columns: lambda += g). Never decreases
/// the dual bound.
template <typename Real>
void dual_half_step(const CrfProblem<Real>& prob, DualState<Real>& lam, ChainFamily from) {
  const std::size_t count = from == ChainFamily::Rows ? prob.height() : prob.width();
  const std::size_t n = from == ChainFamily::Rows ? prob.width() : prob.height();
  const std::size_t L = prob.labels(), W = prob.width();
  std::vector<Real> costs, w;
  for (std::size_t idx = 0; idx < count; ++idx) {
    detail::gather_chain(prob, lam, from, idx, costs, w);
    const auto g = chain_minorant(n, L, costs, w.data(), prob.penalty);
    const Real s = from == ChainFamily::Rows ? Real(-1) : Real(1);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t r = from == ChainFamily::Rows ? idx : i;
      const std::size_t c = from == ChainFamily::Rows ? i : idx;
      Real* lp = lam.pixel(r * W + c);
      for (std::size_t k = 0; k < L; ++k) lp[k] += s * g[i * L + k];
    }
  }
}

/// One full iteration: row chains hand their minorant to the column chains,
/// then column chains hand theirs back to the rows used for decoding.
template <typename Real>
DualState<Real> dual_mm_step(const CrfProblem<Real>& prob, const DualState<Real>& lam) {
  prob.validate();
  require(lam.height() == prob.height() && lam.width() == prob.width() && lam.labels() == prob.labels(),
          "dual_mm_step: dual state shape mismatch");
  DualState<Real> next = lam;
  dual_half_step(prob, next, ChainFamily::Rows);
  dual_half_step(prob, next, ChainFamily::Cols);
  return next;
}

// ---------------------------------------------------------------------------
// Decoding and certificates

namespace detail {

template <typename Real>
int argmin_label(const Real* v, std::size_t L) {
  std::size_t best = 0;
  for (std::size_t k = 1; k < L; ++k)
    if (v[k] < v[best]) best = k;
  return static_cast<int>(best);
}

template <typename Real>
bool unique_min(const Real* v, std::size_t L, Real margin) {
  const int best = argmin_label(v, L);
  for (std::size_t k = 0; k < L; ++k)
    if (static_cast<int>(k) != best && v[k] <= v[best] + margin) return false;
  return true;
}

}  // namespace detail

/// Per-pixel argmin of the row-chain min-marginals of (f1+lambda); ties go to
/// the smallest label.
template <typename Real>
Labeling decode_from_min_marginals(const CostVolume<Real>& m1) {
  Labeling x(m1.height(), m1.width());
  for (std::size_t i = 0; i < m1.pixels(); ++i) x[i] = detail::argmin_label(m1.pixel(i), m1.labels());
  return x;
}

template <typename Real>
Labeling decode(const CrfProblem<Real>& prob, const DualState<Real>& lam) {
  return decode_from_min_marginals(family_min_marginals(prob, lam, ChainFamily::Rows));
}

enum class Certificate { CertifiedOptimal, Uncertified };

/// Two min-marginal values closer than this count as tied.
inline constexpr double kUniquenessMargin = 1e-9;

/// Certified iff at every pixel the row-chain and column-chain min-marginals
/// have the same unique argmin. The decoded labeling is then a minimizer of
/// both subproblems, so its energy equals the dual bound.
template <typename Real>
Certificate certificate(const CrfProblem<Real>& prob, const DualState<Real>& lam) {
  const auto m1 = family_min_marginals(prob, lam, ChainFamily::Rows);
  const auto m2 = family_min_marginals(prob, lam, ChainFamily::Cols);
  const std::size_t L = prob.labels();
  const Real margin = static_cast<Real>(kUniquenessMargin);
  for (std::size_t i = 0; i < m1.pixels(); ++i) {
    if (!detail::unique_min(m1.pixel(i), L, margin) || !detail::unique_min(m2.pixel(i), L, margin))
      return Certificate::Uncertified;
    if (detail::argmin_label(m1.pixel(i), L) != detail::argmin_label(m2.pixel(i), L))
      return Certificate::Uncertified;
  }
  return Certificate::CertifiedOptimal;
}

/// Fraction of pixels whose row-chain and column-chain argmins disagree.
template <typename Real>
double disagreement_fraction(const CrfProblem<Real>& prob, const DualState<Real>& lam) {
  const auto x1 = decode_from_min_marginals(family_min_marginals(prob, lam, ChainFamily::Rows));
  const auto x2 = decode_from_min_marginals(family_min_marginals(prob, lam, ChainFamily::Cols));
  std::size_t diff = 0;
  for (std::size_t i = 0; i < x1.size(); ++i) diff += x1[i] != x2[i];
  return x1.size() ? static_cast<double>(diff) / static_cast<double>(x1.size()) : 0.0;
}

template <typename Real = double>
struct InferenceResult {
  Labeling labeling;
  DualState<Real> lambda;
  CostVolume<Real> row_min_marginals;  // (f1+lambda) min-marginals used for decoding
  std::vector<Real> bound_trace;       // D(lambda) before the first and after every step
  std::vector<Real> energy_trace;      // energy of the decoded labeling at the same points
};

/// Default number of dual iterations at test time.
inline constexpr int kDefaultCrfIterations = 5;

template <typename Real>
InferenceResult<Real> run_inference(const CrfProblem<Real>& prob, int iterations,
                                    const DualState<Real>* init = nullptr) {
  if (iterations < 1) throw std::invalid_argument("run_inference: iterations must be >= 1");
  prob.validate();
  InferenceResult<Real> res;
  res.lambda = init ? *init : zero_dual(prob);
  auto record = [&] {
    res.row_min_marginals = family_min_marginals(prob, res.lambda, ChainFamily::Rows);
    res.labeling = decode_from_min_marginals(res.row_min_marginals);
    res.bound_trace.push_back(dual_bound(prob, res.lambda));
    res.energy_trace.push_back(energy(prob, res.labeling));
  };
  record();
  for (int it = 0; it < iterations; ++it) {
    res.lambda = dual_mm_step(prob, res.lambda);
    record();
  }
  return res;
}

/// CSV rows "iteration,bound,energy".
template <typename Real>
void write_bound_trace_csv(std::ostream& os, const InferenceResult<Real>& res) {
  os << "iteration,bound,energy\n";
  os.precision(17);
  for (std::size_t i = 0; i < res.bound_trace.size(); ++i)
    os << i << ',' << res.bound_trace[i] << ',' << res.energy_trace[i] << '\n';
}

}  // namespace cnncrf
