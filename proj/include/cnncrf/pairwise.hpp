#pragma once

// Edge weights for the 4-connected CRF and the truncated label penalty.

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "cnncrf/common.hpp"
#include "cnncrf/unary_cnn.hpp"

namespace cnncrf {

/// horizontal(r,c) weights the edge (r,c)–(r,c+1); vertical(r,c) weights
/// (r,c)–(r+1,c). The last column of `horizontal` and last row of `vertical`
/// are unused and kept at zero.
template <typename Real = double>
struct EdgeWeights {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<Real> horizontal;
  std::vector<Real> vertical;

  EdgeWeights() = default;
  EdgeWeights(std::size_t h, std::size_t w, Real fill = Real(0))
      : height(h), width(w), horizontal(h * w, fill), vertical(h * w, fill) {
    clear_boundary();
  }

  Real& h(std::size_t r, std::size_t c) { return horizontal[r * width + c]; }
  Real h(std::size_t r, std::size_t c) const { return horizontal[r * width + c]; }
  Real& v(std::size_t r, std::size_t c) { return vertical[r * width + c]; }
  Real v(std::size_t r, std::size_t c) const { return vertical[r * width + c]; }

  void clear_boundary() {
    for (std::size_t r = 0; r < height; ++r)
      if (width) horizontal[r * width + width - 1] = Real(0);
    if (height)
      for (std::size_t c = 0; c < width; ++c) vertical[(height - 1) * width + c] = Real(0);
  }

  template <typename Other>
  EdgeWeights<Other> cast() const {
    EdgeWeights<Other> out(height, width);
    std::transform(horizontal.begin(), horizontal.end(), out.horizontal.begin(), [](Real x) { return Other(x); });
    std::transform(vertical.begin(), vertical.end(), out.vertical.begin(), [](Real x) { return Other(x); });
    return out;
  }
};

struct PenaltyParams {
  double P1 = 0.0;
  double P2 = 0.0;

  /// Restores 0 <= P1 <= P2.
  void project() {
    P1 = std::max(P1, 0.0);
    P2 = std::max(P2, P1);
  }
  bool satisfies_invariant() const { return P1 >= 0.0 && P1 <= P2; }
};

/// 0 for equal labels, P1 for a unit step, P2 otherwise.
inline double rho(int delta, const PenaltyParams& p) {
  delta = std::abs(delta);
  return delta == 0 ? 0.0 : (delta == 1 ? p.P1 : p.P2);
}

/// w_ij = exp(-alpha * |I_i - I_j|^beta), where |.| is the mean absolute
/// difference over channels.
inline EdgeWeights<double> contrast_weights(const Image& img, double alpha, double beta) {
  if (alpha < 0.0 || beta <= 0.0) throw std::invalid_argument("contrast_weights: need alpha >= 0, beta > 0");
  const std::size_t H = img.height(), W = img.width(), C = img.channels();
  EdgeWeights<double> w(H, W);
  auto weight = [&](std::size_t r0, std::size_t c0, std::size_t r1, std::size_t c1) {
    double diff = 0.0;
    for (std::size_t ch = 0; ch < C; ++ch) diff += std::abs(img(ch, r0, c0) - img(ch, r1, c1));
    diff /= static_cast<double>(C);
    return std::exp(-alpha * std::pow(diff, beta));
  };
  for (std::size_t r = 0; r < H; ++r)
    for (std::size_t c = 0; c < W; ++c) {
      if (c + 1 < W) w.h(r, c) = weight(r, c, r, c + 1);
      if (r + 1 < H) w.v(r, c) = weight(r, c, r + 1, c);
    }
  return w;
}

// ---------------------------------------------------------------------------
// Pairwise network

/// Two 3×3 tanh layers followed by a 1×1 layer with abs activation producing
/// the (horizontal, vertical) weight channels.
template <typename Real = double>
LayerStack<Real> make_pairwise_network(std::size_t in_channels, std::size_t filters, std::mt19937_64& rng) {
  LayerStack<Real> layers;
  layers.emplace_back(filters, in_channels, 3, 3, Activation::Tanh);
  layers.emplace_back(filters, filters, 3, 3, Activation::Tanh);
  layers.emplace_back(2, filters, 1, 1, Activation::Abs);
  for (auto& l : layers) glorot_init(l, rng);
  return layers;
}

template <typename Real>
void check_pairwise_geometry(const LayerStack<Real>& layers) {
  if (layers.size() != 3) throw DimensionError("pairwise network must have 3 layers");
  if (layers[0].activation != Activation::Tanh || layers[1].activation != Activation::Tanh ||
      layers[2].activation != Activation::Abs)
    throw DimensionError("pairwise network activations must be tanh, tanh, abs");
  if (layers[2].out_channels != 2) throw DimensionError("pairwise network must output 2 channels");
}

template <typename Real>
EdgeWeights<Real> edge_weights_from_channels(const Tensor3<Real>& out) {
  EdgeWeights<Real> w(out.height(), out.width());
  std::copy(out.plane(0), out.plane(0) + out.plane_size(), w.horizontal.begin());
  std::copy(out.plane(1), out.plane(1) + out.plane_size(), w.vertical.begin());
  w.clear_boundary();
  return w;
}

template <typename Real>
EdgeWeights<Real> pairwise_cnn_forward(const Tensor3<Real>& img, const LayerStack<Real>& layers) {
  check_pairwise_geometry(layers);
  return edge_weights_from_channels(unary_forward(img, layers));
}

/// Backward pass from a gradient on the edge weights. Gradients on the unused
/// boundary entries are ignored.
template <typename Real>
std::vector<ConvGrad<Real>> pairwise_cnn_backward(const LayerStack<Real>& layers, const StackCache<Real>& cache,
                                                  const EdgeWeights<Real>& grad_w,
                                                  Tensor3<Real>* grad_input = nullptr) {
  check_pairwise_geometry(layers);
  const auto& out = cache.output();
  if (grad_w.height != out.height() || grad_w.width != out.width())
    throw DimensionError("pairwise_cnn_backward: shape mismatch");
  EdgeWeights<Real> g = grad_w;
  g.clear_boundary();
  Tensor3<Real> go(2, out.height(), out.width());
  std::copy(g.horizontal.begin(), g.horizontal.end(), go.plane(0));
  std::copy(g.vertical.begin(), g.vertical.end(), go.plane(1));
  return stack_backward(layers, cache, go, grad_input);
}

}  // namespace cnncrf
