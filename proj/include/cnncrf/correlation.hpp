#pragma once

// Softmax-normalized feature correlation over disparities.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "cnncrf/common.hpp"

namespace cnncrf {

/// Per-pixel, per-label scalar field with a validity flag per entry.
/// Layout is (row, col, label) with labels contiguous.
template <typename Real = double>
class CostVolume {
 public:
  CostVolume() = default;
  CostVolume(std::size_t height, std::size_t width, std::size_t labels, Real fill = Real(0))
      : height_(height), width_(width), labels_(labels),
        values_(height * width * labels, fill), valid_(height * width * labels, 1) {}

  std::size_t height() const { return height_; }
  std::size_t width() const { return width_; }
  std::size_t labels() const { return labels_; }
  std::size_t pixels() const { return height_ * width_; }
  std::size_t size() const { return values_.size(); }

  Real& operator()(std::size_t r, std::size_t c, std::size_t k) { return values_[(r * width_ + c) * labels_ + k]; }
  Real operator()(std::size_t r, std::size_t c, std::size_t k) const { return values_[(r * width_ + c) * labels_ + k]; }

  Real* pixel(std::size_t i) { return values_.data() + i * labels_; }
  const Real* pixel(std::size_t i) const { return values_.data() + i * labels_; }
  std::uint8_t* pixel_valid(std::size_t i) { return valid_.data() + i * labels_; }
  const std::uint8_t* pixel_valid(std::size_t i) const { return valid_.data() + i * labels_; }

  bool valid(std::size_t r, std::size_t c, std::size_t k) const { return valid_[(r * width_ + c) * labels_ + k] != 0; }
  void set_valid(std::size_t r, std::size_t c, std::size_t k, bool v) { valid_[(r * width_ + c) * labels_ + k] = v; }

  std::vector<Real>& values() { return values_; }
  const std::vector<Real>& values() const { return values_; }
  std::vector<std::uint8_t>& validity() { return valid_; }
  const std::vector<std::uint8_t>& validity() const { return valid_; }

  bool same_shape(const CostVolume& o) const {
    return height_ == o.height_ && width_ == o.width_ && labels_ == o.labels_;
  }

 private:
  std::size_t height_ = 0;
  std::size_t width_ = 0;
  std::size_t labels_ = 0;
  std::vector<Real> values_;
  std::vector<std::uint8_t> valid_;
};

/// Cost assigned to labels whose match falls outside the second image.
inline constexpr double kInvalidLabelCost = 1e3;

/// Label k at column c is valid iff c + sign*k stays inside the row.
inline bool disparity_in_range(std::size_t col, std::size_t width, int label, DisparitySign sign) {
  const long tc = static_cast<long>(col) + sign_value(sign) * label;
  return tc >= 0 && tc < static_cast<long>(width);
}

template <typename Real>
void mark_disparity_validity(CostVolume<Real>& vol, DisparitySign sign) {
  for (std::size_t r = 0; r < vol.height(); ++r)
    for (std::size_t c = 0; c < vol.width(); ++c)
      for (std::size_t k = 0; k < vol.labels(); ++k)
        vol.set_valid(r, c, k, disparity_in_range(c, vol.width(), static_cast<int>(k), sign));
}

/// Raw inner products <phi0_i, phi1_{i+sign*k}>; invalid entries hold 0.
template <typename Real>
CostVolume<Real> correlation_scores(const Tensor3<Real>& phi0, const Tensor3<Real>& phi1, std::size_t labels,
                                    DisparitySign sign) {
  if (!phi0.same_shape(phi1)) throw DimensionError("correlate: feature maps differ in shape");
  if (labels < 2) throw DimensionError("correlate: need at least 2 labels");
  const std::size_t H = phi0.height(), W = phi0.width(), F = phi0.channels();
  CostVolume<Real> s(H, W, labels);
  mark_disparity_validity(s, sign);
  const int sg = sign_value(sign);
  for (std::size_t f = 0; f < F; ++f) {
    const Real* a = phi0.plane(f);
    const Real* b = phi1.plane(f);
    for (std::size_t r = 0; r < H; ++r)
      for (std::size_t c = 0; c < W; ++c) {
        Real* dst = s.pixel(r * W + c);
        const Real av = a[r * W + c];
        for (std::size_t k = 0; k < labels; ++k) {
          if (!s.valid(r, c, k)) continue;
          const std::size_t tc = static_cast<std::size_t>(static_cast<long>(c) + sg * static_cast<long>(k));
          dst[k] += av * b[r * W + tc];
        }
      }
  }
  return s;
}

/// In-place softmax over the valid labels of every pixel, with max
/// subtraction. Invalid entries are set to 0.
template <typename Real>
void softmax_valid(CostVolume<Real>& vol) {
  const std::size_t L = vol.labels();
  for (std::size_t i = 0; i < vol.pixels(); ++i) {
    Real* v = vol.pixel(i);
    const std::uint8_t* ok = vol.pixel_valid(i);
    Real mx = -std::numeric_limits<Real>::infinity();
    for (std::size_t k = 0; k < L; ++k)
      if (ok[k]) mx = std::max(mx, v[k]);
    Real sum = 0;
    for (std::size_t k = 0; k < L; ++k) {
      v[k] = ok[k] ? std::exp(v[k] - mx) : Real(0);
      sum += v[k];
    }
    for (std::size_t k = 0; k < L; ++k) v[k] /= sum;
  }
}

/// p_i(k) = softmax over valid k of <phi0_i, phi1_{i+sign*k}>.
template <typename Real>
CostVolume<Real> correlate(const Tensor3<Real>& phi0, const Tensor3<Real>& phi1, std::size_t labels,
                           DisparitySign sign = DisparitySign::Positive) {
  auto p = correlation_scores(phi0, phi1, labels, sign);
  softmax_valid(p);
  return p;
}

template <typename Real>
struct CorrelationGrad {
  Tensor3<Real> phi0;
  Tensor3<Real> phi1;
};

/// Exact gradient through the softmax and inner products. `p` must be the
/// output of correlate() for the same features and sign.
template <typename Real>
CorrelationGrad<Real> correlate_backward(const Tensor3<Real>& phi0, const Tensor3<Real>& phi1,
                                         const CostVolume<Real>& p, const CostVolume<Real>& grad_p,
                                         DisparitySign sign = DisparitySign::Positive) {
  if (!phi0.same_shape(phi1) || p.height() != phi0.height() || p.width() != phi0.width() || !p.same_shape(grad_p))
    throw DimensionError("correlate_backward: shape mismatch");
  const std::size_t H = p.height(), W = p.width(), L = p.labels(), F = phi0.channels();

  // d score_k = p_k (g_k - sum_j p_j g_j)
  CostVolume<Real> gs(H, W, L);
  for (std::size_t i = 0; i < p.pixels(); ++i) {
    const Real* pi = p.pixel(i);
    const Real* gi = grad_p.pixel(i);
    const std::uint8_t* ok = p.pixel_valid(i);
    Real dot = 0;
    for (std::size_t k = 0; k < L; ++k)
      if (ok[k]) dot += pi[k] * gi[k];
    Real* out = gs.pixel(i);
    for (std::size_t k = 0; k < L; ++k) out[k] = ok[k] ? pi[k] * (gi[k] - dot) : Real(0);
  }

  CorrelationGrad<Real> g{Tensor3<Real>(F, H, W), Tensor3<Real>(F, H, W)};
  const int sg = sign_value(sign);
  for (std::size_t f = 0; f < F; ++f) {
    const Real* a = phi0.plane(f);
    const Real* b = phi1.plane(f);
    Real* ga = g.phi0.plane(f);
    Real* gb = g.phi1.plane(f);
    for (std::size_t r = 0; r < H; ++r)
      for (std::size_t c = 0; c < W; ++c) {
        const Real* gsi = gs.pixel(r * W + c);
        const std::uint8_t* ok = p.pixel_valid(r * W + c);
        Real acc = 0;
        for (std::size_t k = 0; k < L; ++k) {
          if (!ok[k]) continue;
          const std::size_t tc = static_cast<std::size_t>(static_cast<long>(c) + sg * static_cast<long>(k));
          acc += gsi[k] * b[r * W + tc];
          gb[r * W + tc] += gsi[k] * a[r * W + c];
        }
        ga[r * W + c] += acc;
      }
  }
  return g;
}

/// Pixel-wise maximizer over valid labels, ties toward the smallest label.
template <typename Real>
Labeling argmax_decision(const CostVolume<Real>& p) {
  Labeling x(p.height(), p.width());
  for (std::size_t i = 0; i < p.pixels(); ++i) {
    const Real* v = p.pixel(i);
    const std::uint8_t* ok = p.pixel_valid(i);
    int best = -1;
    for (std::size_t k = 0; k < p.labels(); ++k)
      if (ok[k] && (best < 0 || v[k] > v[best])) best = static_cast<int>(k);
    x[i] = std::max(best, 0);
  }
  return x;
}

/// CRF unary costs f_i(k) = -p_i(k); invalid labels get kInvalidLabelCost.
template <typename Real>
CostVolume<Real> unary_costs(const CostVolume<Real>& p) {
  CostVolume<Real> f = p;
  for (std::size_t n = 0; n < f.size(); ++n)
    f.values()[n] = f.validity()[n] ? -p.values()[n] : static_cast<Real>(kInvalidLabelCost);
  return f;
}

}  // namespace cnncrf
