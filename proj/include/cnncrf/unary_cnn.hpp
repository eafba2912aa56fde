#pragma once

// Dense same-size convolutions with exact backpropagation. Shared by the
// unary feature network and the pairwise edge-weight network.

#include <cmath>
#include <cstddef>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "cnncrf/common.hpp"

namespace cnncrf {

enum class Activation : int { Identity = 0, Tanh = 1, Abs = 2 };

inline std::string to_string(Activation a) {
  switch (a) {
    case Activation::Identity: return "identity";
    case Activation::Tanh: return "tanh";
    case Activation::Abs: return "abs";
  }
  return "?";
}

/// Kernel layout is [out][in][kh][kw].
///
/// Zero padding keeps the output the size of the input. The kernel anchor
/// sits at offset -(k-1)/2, so odd kernels are centered and a 2×2 kernel at
/// (r,c) reads {(r,c),(r,c+1),(r+1,c),(r+1,c+1)}.
template <typename Real = double>
struct ConvLayer {
  std::size_t out_channels = 0;
  std::size_t in_channels = 0;
  std::size_t kh = 1;
  std::size_t kw = 1;
  Activation activation = Activation::Tanh;
  std::vector<Real> kernel;
  std::vector<Real> bias;

  ConvLayer() = default;
  ConvLayer(std::size_t out, std::size_t in, std::size_t kh_, std::size_t kw_, Activation act)
      : out_channels(out), in_channels(in), kh(kh_), kw(kw_), activation(act),
        kernel(out * in * kh_ * kw_, Real(0)), bias(out, Real(0)) {
    require(kh_ >= 1 && kw_ >= 1, "ConvLayer: kernel size must be >= 1");
  }

  Real& w(std::size_t o, std::size_t i, std::size_t u, std::size_t v) {
    return kernel[((o * in_channels + i) * kh + u) * kw + v];
  }
  const Real& w(std::size_t o, std::size_t i, std::size_t u, std::size_t v) const {
    return kernel[((o * in_channels + i) * kh + u) * kw + v];
  }

  std::ptrdiff_t row_offset() const { return -static_cast<std::ptrdiff_t>((kh - 1) / 2); }
  std::ptrdiff_t col_offset() const { return -static_cast<std::ptrdiff_t>((kw - 1) / 2); }
  std::size_t parameter_count() const { return kernel.size() + bias.size(); }

  template <typename Other>
  ConvLayer<Other> cast() const {
    ConvLayer<Other> out(out_channels, in_channels, kh, kw, activation);
    for (std::size_t i = 0; i < kernel.size(); ++i) out.kernel[i] = static_cast<Other>(kernel[i]);
    for (std::size_t i = 0; i < bias.size(); ++i) out.bias[i] = static_cast<Other>(bias[i]);
    return out;
  }

  friend bool operator==(const ConvLayer&, const ConvLayer&) = default;
};

/// Gradients for a single layer, shaped like the layer's parameters.
template <typename Real = double>
struct ConvGrad {
  std::vector<Real> kernel;
  std::vector<Real> bias;
};

/// Uniform in ±sqrt(6/(fan_in+fan_out)), zero bias.
template <typename Real>
void glorot_init(ConvLayer<Real>& layer, std::mt19937_64& rng) {
  const double fan_in = static_cast<double>(layer.in_channels * layer.kh * layer.kw);
  const double fan_out = static_cast<double>(layer.out_channels * layer.kh * layer.kw);
  const double limit = std::sqrt(6.0 / (fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-limit, limit);
  for (auto& k : layer.kernel) k = static_cast<Real>(dist(rng));
  for (auto& b : layer.bias) b = Real(0);
}

namespace detail {

template <typename Real>
Real activate(Activation a, Real x) {
  switch (a) {
    case Activation::Tanh: return std::tanh(x);
    case Activation::Abs: return std::abs(x);
    case Activation::Identity: break;
  }
  return x;
}

// Derivative expressed through the pre-activation value; abs'(0) = 0.
template <typename Real>
Real activate_derivative(Activation a, Real pre, Real post) {
  switch (a) {
    case Activation::Tanh: return Real(1) - post * post;
    case Activation::Abs: return pre > Real(0) ? Real(1) : (pre < Real(0) ? Real(-1) : Real(0));
    case Activation::Identity: break;
  }
  return Real(1);
}

// Pre-activation convolution: out[o] = bias[o] + sum K * in (zero padded).
template <typename Real>
Tensor3<Real> convolve(const Tensor3<Real>& input, const ConvLayer<Real>& layer) {
  const std::size_t H = input.height(), W = input.width();
  Tensor3<Real> pre(layer.out_channels, H, W);
  const auto ro = layer.row_offset(), co = layer.col_offset();
  for (std::size_t o = 0; o < layer.out_channels; ++o) {
    Real* dst = pre.plane(o);
    std::fill(dst, dst + H * W, layer.bias[o]);
    for (std::size_t i = 0; i < layer.in_channels; ++i) {
      const Real* src = input.plane(i);
      for (std::size_t u = 0; u < layer.kh; ++u) {
        for (std::size_t v = 0; v < layer.kw; ++v) {
          const Real k = layer.w(o, i, u, v);
          if (k == Real(0)) continue;
          const std::ptrdiff_t dr = static_cast<std::ptrdiff_t>(u) + ro;
          const std::ptrdiff_t dc = static_cast<std::ptrdiff_t>(v) + co;
          const std::size_t r_lo = dr < 0 ? static_cast<std::size_t>(-dr) : 0;
          const std::size_t r_hi = dr > 0 ? (H > static_cast<std::size_t>(dr) ? H - dr : 0) : H;
          const std::size_t c_lo = dc < 0 ? static_cast<std::size_t>(-dc) : 0;
          const std::size_t c_hi = dc > 0 ? (W > static_cast<std::size_t>(dc) ? W - dc : 0) : W;
          for (std::size_t r = r_lo; r < r_hi; ++r) {
            Real* drow = dst + r * W;
            const Real* srow = src + (r + dr) * W + dc;
            for (std::size_t c = c_lo; c < c_hi; ++c) drow[c] += k * srow[c];
          }
        }
      }
    }
  }
  return pre;
}

}  // namespace detail

/// Intermediate values of one layer's forward pass.
template <typename Real = double>
struct LayerCache {
  Tensor3<Real> pre;
  Tensor3<Real> post;
};

template <typename Real>
LayerCache<Real> conv2d_forward_cached(const Tensor3<Real>& input, const ConvLayer<Real>& layer) {
  if (input.channels() != layer.in_channels)
    throw DimensionError("conv2d: layer expects " + std::to_string(layer.in_channels) + " channels, got " +
                         std::to_string(input.channels()));
  LayerCache<Real> cache;
  cache.pre = detail::convolve(input, layer);
  cache.post = cache.pre;
  if (layer.activation != Activation::Identity)
    for (auto& x : cache.post.data()) x = detail::activate(layer.activation, x);
  return cache;
}

template <typename Real>
Tensor3<Real> conv2d_forward(const Tensor3<Real>& input, const ConvLayer<Real>& layer) {
  return conv2d_forward_cached(input, layer).post;
}

/// Gradients of sum(grad_out ⊙ output) w.r.t. kernel, bias and input.
template <typename Real>
struct ConvBackward {
  ConvGrad<Real> grad;
  Tensor3<Real> grad_input;
};

template <typename Real>
ConvBackward<Real> conv2d_backward(const Tensor3<Real>& input, const ConvLayer<Real>& layer,
                                   const LayerCache<Real>& cache, const Tensor3<Real>& grad_out,
                                   bool need_input_grad = true) {
  if (input.channels() != layer.in_channels || grad_out.channels() != layer.out_channels ||
      grad_out.height() != input.height() || grad_out.width() != input.width() ||
      !cache.pre.same_shape(grad_out))
    throw DimensionError("conv2d_backward: shape mismatch");

  const std::size_t H = input.height(), W = input.width();
  Tensor3<Real> grad_pre = grad_out;
  if (layer.activation != Activation::Identity) {
    for (std::size_t n = 0; n < grad_pre.size(); ++n)
      grad_pre.data()[n] *= detail::activate_derivative(layer.activation, cache.pre.data()[n], cache.post.data()[n]);
  }

  ConvBackward<Real> out;
  out.grad.kernel.assign(layer.kernel.size(), Real(0));
  out.grad.bias.assign(layer.out_channels, Real(0));
  if (need_input_grad) out.grad_input = Tensor3<Real>(layer.in_channels, H, W);

  const auto ro = layer.row_offset(), co = layer.col_offset();
  for (std::size_t o = 0; o < layer.out_channels; ++o) {
    const Real* g = grad_pre.plane(o);
    Real bsum = 0;
    for (std::size_t n = 0; n < H * W; ++n) bsum += g[n];
    out.grad.bias[o] = bsum;
    for (std::size_t i = 0; i < layer.in_channels; ++i) {
      const Real* src = input.plane(i);
      Real* gin = need_input_grad ? out.grad_input.plane(i) : nullptr;
      for (std::size_t u = 0; u < layer.kh; ++u) {
        for (std::size_t v = 0; v < layer.kw; ++v) {
          const std::ptrdiff_t dr = static_cast<std::ptrdiff_t>(u) + ro;
          const std::ptrdiff_t dc = static_cast<std::ptrdiff_t>(v) + co;
          const std::size_t r_lo = dr < 0 ? static_cast<std::size_t>(-dr) : 0;
          const std::size_t r_hi = dr > 0 ? (H > static_cast<std::size_t>(dr) ? H - dr : 0) : H;
          const std::size_t c_lo = dc < 0 ? static_cast<std::size_t>(-dc) : 0;
          const std::size_t c_hi = dc > 0 ? (W > static_cast<std::size_t>(dc) ? W - dc : 0) : W;
          const Real k = layer.w(o, i, u, v);
          Real acc = 0;
          for (std::size_t r = r_lo; r < r_hi; ++r) {
            const Real* grow = g + r * W;
            const Real* srow = src + (r + dr) * W + dc;
            for (std::size_t c = c_lo; c < c_hi; ++c) acc += grow[c] * srow[c];
            if (gin) {
              Real* irow = gin + (r + dr) * W + dc;
              for (std::size_t c = c_lo; c < c_hi; ++c) irow[c] += k * grow[c];
            }
          }
          out.grad.kernel[((o * layer.in_channels + i) * layer.kh + u) * layer.kw + v] = acc;
        }
      }
    }
  }
  return out;
}

template <typename Real>
ConvBackward<Real> conv2d_backward(const Tensor3<Real>& input, const ConvLayer<Real>& layer,
                                   const Tensor3<Real>& grad_out) {
  return conv2d_backward(input, layer, conv2d_forward_cached(input, layer), grad_out);
}

// ---------------------------------------------------------------------------
// Layer stacks

template <typename Real = double>
using LayerStack = std::vector<ConvLayer<Real>>;

/// Activations of every layer, kept for the backward pass.
template <typename Real = double>
struct StackCache {
  Tensor3<Real> input;
  std::vector<LayerCache<Real>> layers;

  const Tensor3<Real>& output() const { return layers.empty() ? input : layers.back().post; }
};

template <typename Real>
StackCache<Real> stack_forward(const Tensor3<Real>& input, const LayerStack<Real>& layers) {
  StackCache<Real> cache;
  cache.input = input;
  cache.layers.reserve(layers.size());
  for (const auto& layer : layers) cache.layers.push_back(conv2d_forward_cached(cache.output(), layer));
  return cache;
}

/// Returns per-layer gradients; `grad_input`, when non-null, receives the
/// gradient w.r.t. the stack input.
template <typename Real>
std::vector<ConvGrad<Real>> stack_backward(const LayerStack<Real>& layers, const StackCache<Real>& cache,
                                           const Tensor3<Real>& grad_out, Tensor3<Real>* grad_input = nullptr) {
  require(cache.layers.size() == layers.size(), "stack_backward: cache/layer count mismatch");
  std::vector<ConvGrad<Real>> grads(layers.size());
  Tensor3<Real> g = grad_out;
  for (std::size_t l = layers.size(); l-- > 0;) {
    const auto& in = l == 0 ? cache.input : cache.layers[l - 1].post;
    const bool need_input = l > 0 || grad_input != nullptr;
    auto back = conv2d_backward(in, layers[l], cache.layers[l], g, need_input);
    grads[l] = std::move(back.grad);
    g = std::move(back.grad_input);
  }
  if (grad_input) *grad_input = std::move(g);
  return grads;
}

/// Unary feature extractor: 3×3 first layer, 2×2 afterwards, tanh everywhere.
template <typename Real = double>
LayerStack<Real> make_unary_network(std::size_t in_channels, std::size_t layer_count, std::size_t filters,
                                    std::mt19937_64& rng) {
  require(layer_count >= 1 && filters >= 1, "make_unary_network: need at least one layer and filter");
  LayerStack<Real> layers;
  for (std::size_t l = 0; l < layer_count; ++l) {
    const std::size_t k = l == 0 ? 3 : 2;
    layers.emplace_back(filters, l == 0 ? in_channels : filters, k, k, Activation::Tanh);
    glorot_init(layers.back(), rng);
  }
  return layers;
}

template <typename Real>
Tensor3<Real> unary_forward(const Tensor3<Real>& img, const LayerStack<Real>& layers) {
  if (!layers.empty() && layers.front().in_channels != img.channels())
    throw DimensionError("unary_forward: first layer expects " + std::to_string(layers.front().in_channels) +
                         " channels, image has " + std::to_string(img.channels()));
  Tensor3<Real> x = img;
  for (const auto& layer : layers) x = conv2d_forward(x, layer);
  return x;
}

}  // namespace cnncrf
