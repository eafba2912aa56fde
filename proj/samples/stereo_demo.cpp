// Trains a small model on synthetic random-dot pairs and compares the
// pixel-wise argmax with CRF inference.

#include <iostream>

#include "cnncrf/cnncrf.hpp"

using namespace cnncrf;

int main() {
  std::vector<StereoSample> train, test;
  for (int i = 0; i < 8; ++i) train.push_back(synth_random_dot(100 + i, 24, 40, 6, 3));
  for (int i = 0; i < 2; ++i) test.push_back(synth_random_dot(900 + i, 24, 40, 6, 3));

  std::mt19937_64 rng(1);
  Architecture arch;
  arch.unary_filters = 16;
  ModelParams model = make_model(arch, rng);

  TrainConfig cfg;
  cfg.epochs = 5;
  train_unary(train, cfg, model);

  auto bad1 = [&](const ModelParams& m) {
    std::vector<std::vector<double>> preds;
    std::vector<GroundTruth> gts;
    for (const auto& s : test) {
      preds.push_back(predict(m, s.left, s.right, {6}).disparity);
      gts.push_back(*s.gt);
    }
    return evaluate_many(preds, gts).badx.at(1.0);
  };
  std::cout << "argmax bad1: " << bad1(model) << " %\n";

  const auto g = grid_search_contrast(train, model, {}, kDefaultCrfIterations, DisparitySign::Positive);
  std::cout << "CRF (alpha " << g.alpha << ", P1 " << g.penalty.P1 << ", P2 " << g.penalty.P2
            << ") bad1: " << bad1(model) << " %\n";
}
