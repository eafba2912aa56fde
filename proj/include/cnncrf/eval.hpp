#pragma once

// Disparity metrics, sublabel refinement and false-color visualization.

#include <algorithm>
#include <cmath>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "cnncrf/common.hpp"
#include "cnncrf/correlation.hpp"
#include "cnncrf/stereo_io.hpp"

namespace cnncrf {

/// Percentage of valid pixels whose absolute error is strictly above
/// `threshold`. Non-finite predictions count as errors.
inline double badx(const std::vector<double>& pred, const GroundTruth& gt, double threshold) {
  if (threshold <= 0.0) throw std::invalid_argument("badx: threshold must be positive");
  require(pred.size() == gt.disparity.size(), "badx: prediction size mismatch");
  std::size_t valid = 0, bad = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (!gt.valid[i]) continue;
    ++valid;
    const double err = std::abs(pred[i] - gt.disparity[i]);
    if (!(err <= threshold)) ++bad;
  }
  if (valid == 0) throw MetricError("badx: no valid ground-truth pixels");
  return 100.0 * static_cast<double>(bad) / static_cast<double>(valid);
}

inline double rms(const std::vector<double>& pred, const GroundTruth& gt) {
  require(pred.size() == gt.disparity.size(), "rms: prediction size mismatch");
  std::size_t valid = 0;
  double sq = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (!gt.valid[i]) continue;
    ++valid;
    const double e = pred[i] - gt.disparity[i];
    sq += e * e;
  }
  if (valid == 0) throw MetricError("rms: no valid ground-truth pixels");
  return std::sqrt(sq / static_cast<double>(valid));
}

inline std::vector<double> to_disparity(const Labeling& x) {
  return std::vector<double>(x.data().begin(), x.data().end());
}

struct EvalReport {
  std::map<double, double> badx;  // threshold -> percent
  double rms = 0.0;
  std::size_t valid_pixel_count = 0;
  bool occluded_excluded = true;
};

inline const std::vector<double>& default_thresholds() {
  static const std::vector<double> t{1.0, 2.0, 3.0, 4.0};
  return t;
}

inline EvalReport evaluate(const std::vector<double>& pred, const GroundTruth& gt, bool occluded_excluded = true,
                           const std::vector<double>& thresholds = default_thresholds()) {
  EvalReport rep;
  rep.occluded_excluded = occluded_excluded;
  for (double t : thresholds) rep.badx[t] = badx(pred, gt, t);
  rep.rms = rms(pred, gt);
  rep.valid_pixel_count = gt.valid_count();
  return rep;
}

/// Pixel-weighted aggregate over several images.
inline EvalReport evaluate_many(const std::vector<std::vector<double>>& preds, const std::vector<GroundTruth>& gts,
                                bool occluded_excluded = true,
                                const std::vector<double>& thresholds = default_thresholds()) {
  require(preds.size() == gts.size() && !preds.empty(), "evaluate_many: need matching, non-empty lists");
  EvalReport total;
  total.occluded_excluded = occluded_excluded;
  double sq = 0.0;
  for (std::size_t n = 0; n < preds.size(); ++n) {
    const auto rep = evaluate(preds[n], gts[n], occluded_excluded, thresholds);
    const double cnt = static_cast<double>(rep.valid_pixel_count);
    for (const auto& [t, v] : rep.badx) total.badx[t] += v * cnt;
    sq += rep.rms * rep.rms * cnt;
    total.valid_pixel_count += rep.valid_pixel_count;
  }
  const double cnt = static_cast<double>(total.valid_pixel_count);
  for (auto& [t, v] : total.badx) v /= cnt;
  total.rms = std::sqrt(sq / cnt);
  return total;
}

inline void write_report_table(std::ostream& os, const EvalReport& rep) {
  os << "pixels: " << rep.valid_pixel_count << (rep.occluded_excluded ? " (non-occluded)" : " (all)") << '\n';
  for (const auto& [t, v] : rep.badx) os << "bad" << t << ": " << v << " %\n";
  os << "rms: " << rep.rms << '\n';
}

inline void write_report_csv(std::ostream& os, const EvalReport& rep) {
  os << "metric,value\n";
  os.precision(10);
  for (const auto& [t, v] : rep.badx) os << "bad" << t << ',' << v << '\n';
  os << "rms," << rep.rms << '\n';
  os << "valid_pixels," << rep.valid_pixel_count << '\n';
  os << "occluded_excluded," << (rep.occluded_excluded ? 1 : 0) << '\n';
}

// ---------------------------------------------------------------------------
// Sublabel refinement

/// Offset of the vertex of the parabola through (-1,cm), (0,c0), (+1,cp).
/// Returns 0 when the stencil is not strictly convex.
inline double parabola_offset(double cm, double c0, double cp) {
  constexpr double kEps = 1e-12;
  const double denom = cp - 2.0 * c0 + cm;
  if (!(denom > kEps)) return 0.0;
  return (cm - cp) / (2.0 * denom);
}

/// Quadratic fit around each decoded label on the given cost volume
/// (minimized, e.g. row-chain min-marginals). Border labels, invalid
/// neighbours and non-convex stencils are left unrefined.
template <typename Real>
std::vector<double> sublabel_refine(const CostVolume<Real>& costs, const Labeling& x) {
  require(costs.height() == x.height() && costs.width() == x.width(), "sublabel_refine: shape mismatch");
  std::vector<double> out(x.size());
  const int L = static_cast<int>(costs.labels());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const int d = x[i];
    out[i] = d;
    if (d <= 0 || d >= L - 1) continue;
    const Real* v = costs.pixel(i);
    const std::uint8_t* ok = costs.pixel_valid(i);
    if (!ok[d - 1] || !ok[d + 1]) continue;
    double off = parabola_offset(v[d - 1], v[d], v[d + 1]);
    out[i] = d + std::clamp(off, -0.5, 0.5);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Visualization

/// Hue sweep from blue (disparity 0) to red (max_disparity); non-finite or
/// negative disparities are black.
inline Image colorize(const std::vector<double>& pred, std::size_t height, std::size_t width, double max_disparity) {
  require(pred.size() == height * width, "colorize: size mismatch");
  Image out(3, height, width, 0.0);
  for (std::size_t r = 0; r < height; ++r)
    for (std::size_t c = 0; c < width; ++c) {
      const double d = pred[r * width + c];
      if (!std::isfinite(d) || d < 0.0) continue;
      const double t = max_disparity > 0 ? std::clamp(d / max_disparity, 0.0, 1.0) : 0.0;
      const double hue = 240.0 * (1.0 - t);  // degrees
      const double hp = hue / 60.0;
      const double x = 1.0 - std::abs(std::fmod(hp, 2.0) - 1.0);
      double rgb[3] = {0, 0, 0};
      if (hp < 1) { rgb[0] = 1; rgb[1] = x; }
      else if (hp < 2) { rgb[0] = x; rgb[1] = 1; }
      else if (hp < 3) { rgb[1] = 1; rgb[2] = x; }
      else if (hp < 4) { rgb[1] = x; rgb[2] = 1; }
      else { rgb[0] = x; rgb[2] = 1; }
      for (std::size_t ch = 0; ch < 3; ++ch) out(ch, r, c) = rgb[ch];
    }
  return out;
}

}  // namespace cnncrf
