#pragma once

// Pixel-wise pretraining of the unary network and joint SSVM training of the
// full model.

#include <algorithm>
#include <cmath>
#include <functional>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "cnncrf/correlation.hpp"
#include "cnncrf/crf.hpp"
#include "cnncrf/eval.hpp"
#include "cnncrf/model.hpp"
#include "cnncrf/pairwise.hpp"
#include "cnncrf/stereo_io.hpp"
#include "cnncrf/unary_cnn.hpp"

namespace cnncrf {

struct TrainConfig {
  double gamma = 1.0;
  double tau = 3.0;
  double lr_unary = 1e-2;
  double lr_joint = 1e-6;
  double lr_penalty = 1e-6;   // step size for P1, P2 during joint training
  double momentum = 0.9;
  int crf_iterations = kDefaultCrfIterations;
  int epochs = 10;
  int learned_epochs = 0;     // joint epochs with the pairwise network after the contrast stage
  std::uint64_t seed = 1;
  int sign = 1;
  bool shuffle = true;

  DisparitySign disparity_sign() const { return sign < 0 ? DisparitySign::Negative : DisparitySign::Positive; }

  void validate() const {
    auto positive = [](double v, const char* name) {
      if (!(v > 0.0)) throw std::invalid_argument(std::string("TrainConfig: ") + name + " must be positive");
    };
    positive(gamma, "gamma");
    positive(tau, "tau");
    positive(lr_unary, "lr_unary");
    positive(lr_joint, "lr_joint");
    positive(lr_penalty, "lr_penalty");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("TrainConfig: momentum must be in [0,1)");
    if (crf_iterations < 1) throw std::invalid_argument("TrainConfig: crf_iterations must be >= 1");
    if (epochs < 0 || learned_epochs < 0) throw std::invalid_argument("TrainConfig: epochs must be >= 0");
    if (sign != 1 && sign != -1) throw std::invalid_argument("TrainConfig: sign must be 1 or -1");
  }
};

/// Writes every field as `key=value`, one per line.
inline void write_config(std::ostream& os, const TrainConfig& c) {
  os.precision(17);
  os << "gamma=" << c.gamma << "\ntau=" << c.tau << "\nlr_unary=" << c.lr_unary << "\nlr_joint=" << c.lr_joint
     << "\nlr_penalty=" << c.lr_penalty << "\nmomentum=" << c.momentum << "\ncrf_iterations=" << c.crf_iterations
     << "\nepochs=" << c.epochs << "\nlearned_epochs=" << c.learned_epochs << "\nseed=" << c.seed
     << "\nsign=" << c.sign << "\nshuffle=" << (c.shuffle ? 1 : 0) << '\n';
}

/// Reads `key=value` lines on top of `base`. Blank lines and `#` comments are
/// skipped; unknown keys are an error.
inline TrainConfig parse_config(std::istream& is, TrainConfig base = {}) {
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw FormatError("config line " + std::to_string(lineno) + ": expected key=value");
    const std::string key = trim(line.substr(0, eq));
    const std::string val = trim(line.substr(eq + 1));
    std::size_t used = 0;
    try {
      if (key == "gamma") base.gamma = std::stod(val, &used);
      else if (key == "tau") base.tau = std::stod(val, &used);
      else if (key == "lr_unary") base.lr_unary = std::stod(val, &used);
      else if (key == "lr_joint") base.lr_joint = std::stod(val, &used);
      else if (key == "lr_penalty") base.lr_penalty = std::stod(val, &used);
      else if (key == "momentum") base.momentum = std::stod(val, &used);
      else if (key == "crf_iterations") base.crf_iterations = std::stoi(val, &used);
      else if (key == "epochs") base.epochs = std::stoi(val, &used);
      else if (key == "learned_epochs") base.learned_epochs = std::stoi(val, &used);
      else if (key == "seed") base.seed = std::stoull(val, &used);
      else if (key == "sign") base.sign = std::stoi(val, &used);
      else if (key == "shuffle") base.shuffle = std::stoi(val, &used) != 0;
      else throw FormatError("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    } catch (const std::logic_error&) {
      throw FormatError("config line " + std::to_string(lineno) + ": bad value for '" + key + "'");
    }
    if (used != val.size()) throw FormatError("config line " + std::to_string(lineno) + ": bad value for '" + key + "'");
  }
  base.validate();
  return base;
}

// ---------------------------------------------------------------------------
// Targets and losses

/// Ground truth rounded to labels. mask[i] == 1 marks pixels that take part
/// in the losses.
struct TargetLabels {
  Labeling labels;
  std::vector<std::uint8_t> mask;

  std::size_t count() const { return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), 1)); }
};

/// Pixels with missing ground truth, a rounded label outside [0, L) or a
/// match falling outside the image are masked.
inline TargetLabels ground_truth_labels(const GroundTruth& gt, std::size_t labels,
                                        DisparitySign sign = DisparitySign::Positive) {
  TargetLabels t{Labeling(gt.height, gt.width), std::vector<std::uint8_t>(gt.height * gt.width, 0)};
  for (std::size_t r = 0; r < gt.height; ++r)
    for (std::size_t c = 0; c < gt.width; ++c) {
      const std::size_t i = r * gt.width + c;
      if (!gt.valid[i]) continue;
      const long k = std::lround(gt.disparity[i]);
      if (k < 0 || k >= static_cast<long>(labels)) continue;
      if (!disparity_in_range(c, gt.width, static_cast<int>(k), sign)) continue;
      t.labels[i] = static_cast<int>(k);
      t.mask[i] = 1;
    }
  return t;
}

struct CrossEntropy {
  double loss = 0.0;
  CostVolume<double> grad_p;
  std::size_t clamped = 0;  // pixels whose target probability hit the floor
};

inline constexpr double kProbabilityFloor = 1e-12;

/// Mean negative log-likelihood of the target labels over unmasked pixels.
inline CrossEntropy cross_entropy(const CostVolume<double>& p, const TargetLabels& t) {
  require(p.height() == t.labels.height() && p.width() == t.labels.width(), "cross_entropy: shape mismatch");
  CrossEntropy ce;
  ce.grad_p = CostVolume<double>(p.height(), p.width(), p.labels());
  ce.grad_p.validity() = p.validity();
  const std::size_t n = t.count();
  if (n == 0) return ce;
  const double inv = 1.0 / static_cast<double>(n);
  for (std::size_t i = 0; i < p.pixels(); ++i) {
    if (!t.mask[i]) continue;
    const int k = t.labels[i];
    const double pk = p.pixel(i)[k];
    if (pk < kProbabilityFloor) {
      ++ce.clamped;
      ce.loss -= std::log(kProbabilityFloor) * inv;
      continue;  // the floor is flat
    }
    ce.loss -= std::log(pk) * inv;
    ce.grad_p.pixel(i)[k] = -inv / pk;
  }
  return ce;
}

/// Sum over unmasked pixels of min(|x_i - x*_i|, tau).
inline double truncated_loss(const Labeling& x, const TargetLabels& t, double tau) {
  require(x.height() == t.labels.height() && x.width() == t.labels.width(), "truncated_loss: shape mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i)
    if (t.mask[i]) s += std::min<double>(std::abs(x[i] - t.labels[i]), tau);
  return s;
}

/// Unaries f_i(k) - gamma * min(|k - x*_i|, tau) at unmasked pixels.
inline CrfProblem<double> loss_augment(const CrfProblem<double>& prob, const TargetLabels& t, double gamma,
                                       double tau) {
  require(prob.height() == t.labels.height() && prob.width() == t.labels.width(), "loss_augment: shape mismatch");
  CrfProblem<double> out = prob;
  const std::size_t L = prob.labels();
  for (std::size_t i = 0; i < prob.unary.pixels(); ++i) {
    if (!t.mask[i]) continue;
    double* f = out.unary.pixel(i);
    for (std::size_t k = 0; k < L; ++k)
      f[k] -= gamma * std::min<double>(std::abs(static_cast<int>(k) - t.labels[i]), tau);
  }
  return out;
}

/// Energy restricted to unmasked pixels and to edges between unmasked pixels.
inline double masked_energy(const CrfProblem<double>& prob, const Labeling& x, const std::vector<std::uint8_t>& mask) {
  const std::size_t H = prob.height(), W = prob.width();
  double e = 0.0;
  for (std::size_t r = 0; r < H; ++r)
    for (std::size_t c = 0; c < W; ++c) {
      const std::size_t i = r * W + c;
      if (!mask[i]) continue;
      e += prob.unary.pixel(i)[x[i]];
      if (c + 1 < W && mask[i + 1]) e += prob.weights.h(r, c) * rho(x[i] - x[i + 1], prob.penalty);
      if (r + 1 < H && mask[i + W]) e += prob.weights.v(r, c) * rho(x[i] - x[i + W], prob.penalty);
    }
  return e;
}

/// Target labels with masked pixels filled from `fill`.
inline Labeling complete_labels(const TargetLabels& t, const Labeling& fill) {
  Labeling x = fill;
  for (std::size_t i = 0; i < x.size(); ++i)
    if (t.mask[i]) x[i] = t.labels[i];
  return x;
}

// ---------------------------------------------------------------------------
// SSVM subgradients

/// g_i(k) = [x*_i = k] - [xbar_i = k] at unmasked pixels. This is the
/// gradient of the hinge bound with respect to the unary costs.
inline CostVolume<double> ssvm_unary_subgradient(const TargetLabels& t, const Labeling& xbar, std::size_t labels) {
  require(xbar.height() == t.labels.height() && xbar.width() == t.labels.width(), "ssvm_unary_subgradient: shape");
  CostVolume<double> g(xbar.height(), xbar.width(), labels);
  for (std::size_t i = 0; i < xbar.size(); ++i) {
    if (!t.mask[i]) continue;
    g.pixel(i)[t.labels[i]] += 1.0;
    g.pixel(i)[xbar[i]] -= 1.0;
  }
  return g;
}

struct PairwiseSubgradient {
  EdgeWeights<double> weights;
  double P1 = 0.0;
  double P2 = 0.0;
};

/// Per-edge rho(d*) - rho(dbar) and the indicator sums for P1, P2. Edges
/// touching a masked pixel are skipped.
inline PairwiseSubgradient ssvm_pairwise_subgradient(const TargetLabels& t, const Labeling& xbar,
                                                     const EdgeWeights<double>& w, const PenaltyParams& p) {
  const std::size_t H = xbar.height(), W = xbar.width();
  require(t.labels.height() == H && t.labels.width() == W && w.height == H && w.width == W,
          "ssvm_pairwise_subgradient: shape mismatch");
  PairwiseSubgradient g{EdgeWeights<double>(H, W), 0.0, 0.0};
  auto edge = [&](std::size_t i, std::size_t j, double wij, double& gw) {
    if (!t.mask[i] || !t.mask[j]) return;
    const int ds = std::abs(t.labels[i] - t.labels[j]);
    const int db = std::abs(xbar[i] - xbar[j]);
    gw = rho(ds, p) - rho(db, p);
    g.P1 += wij * ((ds == 1) - (db == 1));
    g.P2 += wij * ((ds > 1) - (db > 1));
  };
  for (std::size_t r = 0; r < H; ++r)
    for (std::size_t c = 0; c < W; ++c) {
      const std::size_t i = r * W + c;
      if (c + 1 < W) edge(i, i + 1, w.h(r, c), g.weights.h(r, c));
      if (r + 1 < H) edge(i, i + W, w.v(r, c), g.weights.v(r, c));
    }
  return g;
}

/// f(x*) - Dbar(lam), where Dbar is the dual bound of the loss-augmented
/// problem. Masked pixels of x* take the labels decoded from `lam`.
inline double hinge_upper_bound(const CrfProblem<double>& prob, const TargetLabels& t, const DualState<double>& lam,
                                double gamma, double tau) {
  const auto aug = loss_augment(prob, t, gamma, tau);
  const Labeling xbar = decode(aug, lam);
  return energy(prob, complete_labels(t, xbar)) - dual_bound(aug, lam);
}

// ---------------------------------------------------------------------------
// Parameter gradients and SGD

struct ParamGrads {
  std::vector<ConvGrad<double>> unary;
  std::vector<ConvGrad<double>> pairwise;
  double P1 = 0.0;
  double P2 = 0.0;
  bool has_penalty = false;

  bool finite() const {
    auto ok = [](const std::vector<ConvGrad<double>>& gs) {
      for (const auto& g : gs)
        for (const auto* v : {&g.kernel, &g.bias})
          for (double x : *v)
            if (!std::isfinite(x)) return false;
      return true;
    };
    return ok(unary) && ok(pairwise) && std::isfinite(P1) && std::isfinite(P2);
  }
};

inline void accumulate(std::vector<ConvGrad<double>>& into, const std::vector<ConvGrad<double>>& add) {
  if (into.empty()) {
    into = add;
    return;
  }
  require(into.size() == add.size(), "accumulate: layer count mismatch");
  for (std::size_t l = 0; l < into.size(); ++l) {
    for (std::size_t n = 0; n < into[l].kernel.size(); ++n) into[l].kernel[n] += add[l].kernel[n];
    for (std::size_t n = 0; n < into[l].bias.size(); ++n) into[l].bias[n] += add[l].bias[n];
  }
}

struct StepSizes {
  double unary = 0.0;
  double pairwise = 0.0;
  double penalty = 0.0;

  StepSizes() = default;
  StepSizes(double all) : unary(all), pairwise(all), penalty(all) {}  // NOLINT
  StepSizes(double u, double pw, double pen) : unary(u), pairwise(pw), penalty(pen) {}
};

/// Velocity buffers, shaped like the gradients on first use.
struct MomentumState {
  ParamGrads velocity;
};

/// v <- momentum*v - lr*g; p <- p + v; then 0 <= P1 <= P2 is restored.
/// Only the groups present in `g` are touched.
inline void sgd_momentum(ModelParams& m, const ParamGrads& g, const StepSizes& lr, double momentum,
                         MomentumState& state) {
  if (!g.finite()) throw TrainingError("sgd_momentum: non-finite gradient");
  auto step = [&](LayerStack<double>& layers, const std::vector<ConvGrad<double>>& grads,
                  std::vector<ConvGrad<double>>& vel, double rate) {
    if (grads.empty()) return;
    require(grads.size() == layers.size(), "sgd_momentum: layer count mismatch");
    if (vel.empty())
      for (const auto& gl : grads)
        vel.push_back({std::vector<double>(gl.kernel.size(), 0.0), std::vector<double>(gl.bias.size(), 0.0)});
    for (std::size_t l = 0; l < layers.size(); ++l) {
      require(grads[l].kernel.size() == layers[l].kernel.size() && grads[l].bias.size() == layers[l].bias.size(),
              "sgd_momentum: gradient shape mismatch");
      for (std::size_t n = 0; n < layers[l].kernel.size(); ++n) {
        double& v = vel[l].kernel[n];
        v = momentum * v - rate * grads[l].kernel[n];
        layers[l].kernel[n] += v;
      }
      for (std::size_t n = 0; n < layers[l].bias.size(); ++n) {
        double& v = vel[l].bias[n];
        v = momentum * v - rate * grads[l].bias[n];
        layers[l].bias[n] += v;
      }
    }
  };
  step(m.unary, g.unary, state.velocity.unary, lr.unary);
  step(m.pairwise, g.pairwise, state.velocity.pairwise, lr.pairwise);
  if (g.has_penalty) {
    state.velocity.P1 = momentum * state.velocity.P1 - lr.penalty * g.P1;
    state.velocity.P2 = momentum * state.velocity.P2 - lr.penalty * g.P2;
    m.penalty.P1 += state.velocity.P1;
    m.penalty.P2 += state.velocity.P2;
  }
  m.penalty.project();
}

/// Backpropagates a gradient on the correlation output through both
/// branches of the shared unary network.
inline std::vector<ConvGrad<double>> unary_backward(const ModelParams& m, const ForwardPass& fp,
                                                    const CostVolume<double>& grad_p, DisparitySign sign) {
  const auto gphi = correlate_backward(fp.phi0, fp.phi1, fp.p, grad_p, sign);
  auto g = stack_backward(m.unary, fp.unary0, gphi.phi0);
  accumulate(g, stack_backward(m.unary, fp.unary1, gphi.phi1));
  return g;
}

/// J = sum_i [f_i(x*) - f_i(xbar)] + sum_ij w_ij [rho(d*) - rho(dbar)] over
/// unmasked pixels and edges, for fixed labelings.
inline double joint_objective(const CrfProblem<double>& prob, const TargetLabels& t, const Labeling& xbar) {
  return masked_energy(prob, t.labels, t.mask) - masked_energy(prob, xbar, t.mask);
}

/// Gradient of joint_objective with respect to all trainable parameters of
/// the model's current pairwise mode. `fp` must hold caches.
inline ParamGrads joint_gradient(const ModelParams& m, const ForwardPass& fp, const TargetLabels& t,
                                 const Labeling& xbar, DisparitySign sign) {
  ParamGrads g;
  auto gf = ssvm_unary_subgradient(t, xbar, fp.p.labels());
  for (auto& v : gf.values()) v = -v;  // f = -p
  g.unary = unary_backward(m, fp, gf, sign);
  if (m.pairwise_mode == PairwiseMode::Off) return g;
  const auto pw = ssvm_pairwise_subgradient(t, xbar, fp.prob.weights, m.penalty);
  g.P1 = pw.P1;
  g.P2 = pw.P2;
  g.has_penalty = true;
  if (m.pairwise_mode == PairwiseMode::Learned) g.pairwise = pairwise_cnn_backward(m.pairwise, fp.pairwise, pw.weights);
  return g;
}

// ---------------------------------------------------------------------------
// Training loops

inline TargetLabels sample_targets(const StereoSample& s, DisparitySign sign) {
  if (!s.gt) throw std::invalid_argument("training sample has no ground truth");
  return ground_truth_labels(*s.gt, static_cast<std::size_t>(s.label_count), sign);
}

inline std::vector<std::size_t> epoch_order(std::size_t n, bool shuffle, std::mt19937_64& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (shuffle) std::shuffle(order.begin(), order.end(), rng);
  return order;
}

struct UnaryStepLog {
  int epoch = 0;
  std::size_t step = 0;
  std::size_t sample = 0;
  double loss = 0.0;
  std::size_t clamped = 0;
};

/// Mean cross-entropy over a dataset (pixel-weighted).
inline double dataset_cross_entropy(const std::vector<StereoSample>& data, const ModelParams& m, DisparitySign sign) {
  double total = 0.0;
  std::size_t pixels = 0;
  for (const auto& s : data) {
    const auto t = sample_targets(s, sign);
    const auto fp = model_forward(m, s.left, s.right, {static_cast<std::size_t>(s.label_count), sign, false});
    const auto n = t.count();
    total += cross_entropy(fp.p, t).loss * static_cast<double>(n);
    pixels += n;
  }
  return pixels ? total / static_cast<double>(pixels) : 0.0;
}

/// Pixel-wise pretraining with P1 = P2 = 0. Returns the mean training loss
/// of every epoch.
inline std::vector<double> train_unary(const std::vector<StereoSample>& data, const TrainConfig& cfg, ModelParams& m,
                                       const std::function<void(const UnaryStepLog&)>& on_step = {},
                                       const std::function<void(int, const ModelParams&)>& on_epoch = {}) {
  cfg.validate();
  if (data.empty()) throw std::invalid_argument("train_unary: empty dataset");
  const auto sign = cfg.disparity_sign();
  m.penalty = {};
  std::vector<TargetLabels> targets;
  for (const auto& s : data) targets.push_back(sample_targets(s, sign));
  std::mt19937_64 rng(cfg.seed);
  MomentumState state;
  std::vector<double> history;
  std::size_t step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const ModelParams snapshot = m;
    double sum = 0.0;
    try {
      for (std::size_t idx : epoch_order(data.size(), cfg.shuffle, rng)) {
        const auto& s = data[idx];
        const auto fp = model_forward(m, s.left, s.right, {static_cast<std::size_t>(s.label_count), sign, true});
        const auto ce = cross_entropy(fp.p, targets[idx]);
        if (!std::isfinite(ce.loss)) throw TrainingError("train_unary: non-finite loss on sample " + std::to_string(idx));
        ParamGrads g;
        g.unary = unary_backward(m, fp, ce.grad_p, sign);
        sgd_momentum(m, g, StepSizes(cfg.lr_unary, 0.0, 0.0), cfg.momentum, state);
        sum += ce.loss;
        if (on_step) on_step({epoch, step, idx, ce.loss, ce.clamped});
        ++step;
      }
    } catch (const TrainingError&) {
      m = snapshot;
      throw;
    }
    history.push_back(sum / static_cast<double>(data.size()));
    if (on_epoch) on_epoch(epoch, m);
  }
  return history;
}

struct ContrastGrid {
  std::vector<double> alpha{0.0, 2.0, 5.0, 10.0};
  std::vector<double> beta{1.0, 2.0};
  std::vector<double> P1{0.05, 0.1, 0.2, 0.3};
  std::vector<double> P2{0.1, 0.2, 0.4, 0.8};
};

struct GridSearchResult {
  double alpha = 0.0, beta = 1.0;
  PenaltyParams penalty;
  double bad1 = std::numeric_limits<double>::infinity();
};

/// Picks the contrast-weight and penalty parameters with the lowest bad1 on
/// `data` for the current unary network, and switches the model to contrast
/// mode with them.
inline GridSearchResult grid_search_contrast(const std::vector<StereoSample>& data, ModelParams& m,
                                             const ContrastGrid& grid, int crf_iterations, DisparitySign sign) {
  if (data.empty()) throw std::invalid_argument("grid_search_contrast: empty dataset");
  struct Cached {
    CostVolume<double> unary;
    Image input;
    const GroundTruth* gt;
  };
  std::vector<Cached> cache;
  ModelParams probe = m;
  probe.pairwise_mode = PairwiseMode::Off;
  for (const auto& s : data) {
    if (!s.gt) throw std::invalid_argument("grid_search_contrast: sample without ground truth");
    auto fp = model_forward(probe, s.left, s.right, {static_cast<std::size_t>(s.label_count), sign, false});
    cache.push_back({std::move(fp.prob.unary), std::move(fp.input0), &*s.gt});
  }
  GridSearchResult best;
  for (double a : grid.alpha)
    for (double b : grid.beta) {
      std::vector<EdgeWeights<double>> weights;
      for (const auto& c : cache) weights.push_back(contrast_weights(c.input, a, b));
      for (double p1 : grid.P1)
        for (double p2 : grid.P2) {
          if (p1 > p2) continue;
          std::vector<std::vector<double>> preds;
          std::vector<GroundTruth> gts;
          for (std::size_t n = 0; n < cache.size(); ++n) {
            CrfProblem<double> prob{cache[n].unary, weights[n], {p1, p2}};
            preds.push_back(to_disparity(run_inference(prob, crf_iterations).labeling));
            gts.push_back(*cache[n].gt);
          }
          const double bad1 = evaluate_many(preds, gts, true, {1.0}).badx.at(1.0);
          if (bad1 < best.bad1) best = {a, b, {p1, p2}, bad1};
        }
    }
  m.alpha = best.alpha;
  m.beta = best.beta;
  m.penalty = best.penalty;
  m.pairwise_mode = PairwiseMode::Contrast;
  return best;
}

/// Least-squares fit of the pairwise network to the contrast weights, used
/// to start the learned-pairwise stage from the contrast model.
inline double fit_pairwise_to_contrast(const std::vector<StereoSample>& data, ModelParams& m, int epochs, double lr,
                                       double momentum = 0.9, std::uint64_t seed = 1) {
  check_pairwise_geometry(m.pairwise);
  std::mt19937_64 rng(seed);
  MomentumState state;
  double last = 0.0;
  for (int e = 0; e < epochs; ++e) {
    last = 0.0;
    for (std::size_t idx : epoch_order(data.size(), true, rng)) {
      const Image in = prepare_input(data[idx].left, m.coord_features);
      const auto target = contrast_weights(in, m.alpha, m.beta);
      const auto cache = stack_forward(in, m.pairwise);
      const auto w = edge_weights_from_channels(cache.output());
      EdgeWeights<double> gw(w.height, w.width);
      const double inv = 1.0 / static_cast<double>(w.height * w.width);
      for (std::size_t n = 0; n < w.horizontal.size(); ++n) {
        gw.horizontal[n] = 2.0 * (w.horizontal[n] - target.horizontal[n]) * inv;
        gw.vertical[n] = 2.0 * (w.vertical[n] - target.vertical[n]) * inv;
        last += (std::pow(w.horizontal[n] - target.horizontal[n], 2) + std::pow(w.vertical[n] - target.vertical[n], 2)) *
                inv;
      }
      ParamGrads g;
      g.pairwise = pairwise_cnn_backward(m.pairwise, cache, gw);
      sgd_momentum(m, g, StepSizes(0.0, lr, 0.0), momentum, state);
    }
    last /= static_cast<double>(data.size());
  }
  return last;
}

struct JointStepLog {
  int epoch = 0;
  std::size_t step = 0;
  std::size_t sample = 0;
  double hinge = 0.0;
  double loss = 0.0;          // truncated loss of the loss-augmented decoding
  double disagreement = 0.0;  // fraction of pixels where row and column chains disagree
  double P1 = 0.0;
  double P2 = 0.0;
};

inline void write_joint_log_header(std::ostream& os) { os << "step,sample,hinge,loss,disagreement,P1,P2\n"; }

inline void write_joint_log_row(std::ostream& os, const JointStepLog& r) {
  os.precision(10);
  os << r.step << ',' << r.sample << ',' << r.hinge << ',' << r.loss << ',' << r.disagreement << ',' << r.P1 << ','
     << r.P2 << '\n';
}

/// One SSVM step on one sample: loss-augmented inference, subgradient and
/// parameter update. Returns the logged diagnostics.
inline JointStepLog joint_step(const StereoSample& s, const TargetLabels& t, const TrainConfig& cfg, ModelParams& m,
                               MomentumState& state) {
  const auto sign = cfg.disparity_sign();
  const auto fp = model_forward(m, s.left, s.right, {static_cast<std::size_t>(s.label_count), sign, true});
  const auto aug = loss_augment(fp.prob, t, cfg.gamma, cfg.tau);
  const auto res = run_inference(aug, cfg.crf_iterations);
  const Labeling& xbar = res.labeling;
  JointStepLog log;
  log.hinge = energy(fp.prob, complete_labels(t, xbar)) - res.bound_trace.back();
  log.loss = truncated_loss(xbar, t, cfg.tau);
  log.disagreement = disagreement_fraction(aug, res.lambda);
  if (!std::isfinite(log.hinge)) throw TrainingError("joint training: non-finite hinge bound");
  const auto g = joint_gradient(m, fp, t, xbar, sign);
  sgd_momentum(m, g, StepSizes(cfg.lr_joint, cfg.lr_joint, cfg.lr_penalty), cfg.momentum, state);
  log.P1 = m.penalty.P1;
  log.P2 = m.penalty.P2;
  return log;
}

/// Joint SSVM training. With contrast weights it trains the unary network
/// and P1, P2 for `epochs`; if `learned_epochs` > 0 it then switches to the
/// pairwise network (fitted to the contrast weights first) and trains all
/// parameters. A model in Off mode is switched to contrast mode.
/// Returns the mean hinge bound of every epoch.
inline std::vector<double> train_joint(const std::vector<StereoSample>& data, const TrainConfig& cfg, ModelParams& m,
                                       const std::function<void(const JointStepLog&)>& on_step = {},
                                       const std::function<void(int, const ModelParams&)>& on_epoch = {}) {
  cfg.validate();
  if (data.empty()) throw std::invalid_argument("train_joint: empty dataset");
  const auto sign = cfg.disparity_sign();
  std::vector<TargetLabels> targets;
  for (const auto& s : data) targets.push_back(sample_targets(s, sign));
  if (m.pairwise_mode == PairwiseMode::Off) m.pairwise_mode = PairwiseMode::Contrast;
  std::mt19937_64 rng(cfg.seed);
  std::vector<double> history;
  std::size_t step = 0;
  auto run_stage = [&](int epochs, int epoch_base) {
    MomentumState state;
    for (int e = 0; e < epochs; ++e) {
      const ModelParams snapshot = m;
      double sum = 0.0;
      try {
        for (std::size_t idx : epoch_order(data.size(), cfg.shuffle, rng)) {
          auto log = joint_step(data[idx], targets[idx], cfg, m, state);
          log.epoch = epoch_base + e;
          log.step = step++;
          log.sample = idx;
          sum += log.hinge;
          if (on_step) on_step(log);
        }
      } catch (const TrainingError&) {
        m = snapshot;
        throw;
      }
      history.push_back(sum / static_cast<double>(data.size()));
      if (on_epoch) on_epoch(epoch_base + e, m);
    }
  };
  if (m.pairwise_mode == PairwiseMode::Contrast) {
    run_stage(cfg.epochs, 0);
    if (cfg.learned_epochs > 0) {
      fit_pairwise_to_contrast(data, m, 20, 1e-2, 0.9, cfg.seed);
      m.pairwise_mode = PairwiseMode::Learned;
      run_stage(cfg.learned_epochs, cfg.epochs);
    }
  } else {
    run_stage(cfg.epochs + cfg.learned_epochs, 0);
  }
  return history;
}

}  // namespace cnncrf
