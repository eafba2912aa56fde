#pragma once

// Full model: unary network → correlation → CRF with contrast or learned
// edge weights.

#include <optional>
#include <random>
#include <string>
#include <vector>

#include "cnncrf/correlation.hpp"
#include "cnncrf/crf.hpp"
#include "cnncrf/eval.hpp"
#include "cnncrf/pairwise.hpp"
#include "cnncrf/stereo_io.hpp"
#include "cnncrf/unary_cnn.hpp"

namespace cnncrf {

enum class PairwiseMode : int { Off = 0, Contrast = 1, Learned = 2 };

inline std::string to_string(PairwiseMode m) {
  switch (m) {
    case PairwiseMode::Off: return "off";
    case PairwiseMode::Contrast: return "contrast";
    case PairwiseMode::Learned: return "learned";
  }
  return "?";
}

inline PairwiseMode parse_pairwise_mode(const std::string& s) {
  if (s == "off") return PairwiseMode::Off;
  if (s == "contrast") return PairwiseMode::Contrast;
  if (s == "learned") return PairwiseMode::Learned;
  throw std::invalid_argument("unknown pairwise mode '" + s + "' (expected off|contrast|learned)");
}

/// All trainable parameters plus the fixed contrast-weight constants.
struct ModelParams {
  LayerStack<double> unary;
  LayerStack<double> pairwise;
  PenaltyParams penalty;
  PairwiseMode pairwise_mode = PairwiseMode::Off;
  double alpha = 0.0;
  double beta = 1.0;
  bool coord_features = false;

  std::size_t input_channels() const { return unary.empty() ? 0 : unary.front().in_channels; }
};

struct Architecture {
  std::size_t image_channels = 1;
  std::size_t unary_layers = 3;
  std::size_t unary_filters = 100;
  std::size_t pairwise_filters = 64;
  bool coord_features = false;
};

inline ModelParams make_model(const Architecture& arch, std::mt19937_64& rng) {
  ModelParams m;
  m.coord_features = arch.coord_features;
  const std::size_t in = arch.image_channels + (arch.coord_features ? 2 : 0);
  m.unary = make_unary_network<double>(in, arch.unary_layers, arch.unary_filters, rng);
  m.pairwise = make_pairwise_network<double>(in, arch.pairwise_filters, rng);
  return m;
}

/// Normalized image, with coordinate channels when the model uses them.
inline Image prepare_input(const Image& img, bool coord_features) {
  Image n = normalize_image(img);
  return coord_features ? append_coordinate_features(n) : n;
}

struct ForwardOptions {
  std::size_t labels = 2;
  DisparitySign sign = DisparitySign::Positive;
  bool keep_caches = false;  // needed for backpropagation
};

/// Everything computed on the way from an image pair to a CRF problem.
struct ForwardPass {
  Image input0, input1;
  StackCache<double> unary0, unary1;  // filled when keep_caches
  FeatureMap phi0, phi1;
  CostVolume<double> p;
  StackCache<double> pairwise;  // filled for learned weights when keep_caches
  CrfProblem<double> prob;
};

inline ForwardPass model_forward(const ModelParams& m, const Image& left, const Image& right,
                                 const ForwardOptions& opt) {
  require(left.same_shape(right), "model_forward: left/right shape mismatch");
  ForwardPass fp;
  fp.input0 = prepare_input(left, m.coord_features);
  fp.input1 = prepare_input(right, m.coord_features);
  if (m.input_channels() != fp.input0.channels())
    throw DimensionError("model expects " + std::to_string(m.input_channels()) + " input channels, got " +
                         std::to_string(fp.input0.channels()));
  if (opt.keep_caches) {
    fp.unary0 = stack_forward(fp.input0, m.unary);
    fp.unary1 = stack_forward(fp.input1, m.unary);
    fp.phi0 = fp.unary0.output();
    fp.phi1 = fp.unary1.output();
  } else {
    fp.phi0 = unary_forward(fp.input0, m.unary);
    fp.phi1 = unary_forward(fp.input1, m.unary);
  }
  fp.p = correlate(fp.phi0, fp.phi1, opt.labels, opt.sign);
  fp.prob.unary = unary_costs(fp.p);
  fp.prob.penalty = m.penalty;
  switch (m.pairwise_mode) {
    case PairwiseMode::Off:
      fp.prob.weights = EdgeWeights<double>(left.height(), left.width(), 0.0);
      break;
    case PairwiseMode::Contrast:
      fp.prob.weights = contrast_weights(fp.input0, m.alpha, m.beta);
      break;
    case PairwiseMode::Learned:
      if (opt.keep_caches) {
        check_pairwise_geometry(m.pairwise);
        fp.pairwise = stack_forward(fp.input0, m.pairwise);
        fp.prob.weights = edge_weights_from_channels(fp.pairwise.output());
      } else {
        fp.prob.weights = pairwise_cnn_forward(fp.input0, m.pairwise);
      }
      break;
  }
  return fp;
}

struct InferOptions {
  std::size_t labels = 2;
  DisparitySign sign = DisparitySign::Positive;
  int crf_iterations = kDefaultCrfIterations;
  bool sublabel = false;
};

struct Prediction {
  Labeling labels;
  std::vector<double> disparity;
  std::vector<double> bound_trace;
};

/// Pixel-wise argmax when the pairwise mode is off, CRF inference otherwise.
inline Prediction predict(const ModelParams& m, const Image& left, const Image& right, const InferOptions& opt) {
  const auto fp = model_forward(m, left, right, {opt.labels, opt.sign, false});
  Prediction pred;
  if (m.pairwise_mode == PairwiseMode::Off) {
    pred.labels = argmax_decision(fp.p);
    // refinement on the unary costs when there is no CRF
    pred.disparity = opt.sublabel ? sublabel_refine(fp.prob.unary, pred.labels) : to_disparity(pred.labels);
    return pred;
  }
  auto res = run_inference(fp.prob, opt.crf_iterations);
  pred.labels = res.labeling;
  pred.bound_trace = res.bound_trace;
  pred.disparity = opt.sublabel ? sublabel_refine(res.row_min_marginals, res.labeling) : to_disparity(res.labeling);
  return pred;
}

}  // namespace cnncrf
