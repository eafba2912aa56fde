// Command-line front end: synthetic data, training, inference, evaluation.

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <sstream>

#include "cnncrf/cnncrf.hpp"

namespace fs = std::filesystem;
using namespace cnncrf;

namespace {

DisparitySign parse_sign(int s) {
  if (s != 1 && s != -1) throw std::invalid_argument("--sign must be 1 or -1");
  return s > 0 ? DisparitySign::Positive : DisparitySign::Negative;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

TrainConfig load_config(const std::string& path) {
  if (path.empty()) return {};
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path);
  return parse_config(in);
}

std::ofstream open_log(const std::string& path) {
  std::ofstream out;
  if (path.empty()) return out;
  if (fs::path(path).has_parent_path()) fs::create_directories(fs::path(path).parent_path());
  out.open(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  return out;
}

// ---------------------------------------------------------------------------

struct SynthArgs {
  std::string out = "synth";
  int train = 20, test = 5;
  int height = 32, width = 48, labels = 8, shapes = 4, sign = 1;
  std::uint64_t seed = 1;
  double density = 0.35;
};

void write_split(const SynthArgs& a, const std::string& name, int count, std::uint64_t seed0) {
  const fs::path dir = fs::path(a.out) / name;
  fs::create_directories(dir);
  std::ostringstream manifest;
  for (int n = 0; n < count; ++n) {
    SynthOptions opt{parse_sign(a.sign), a.density};
    const auto s = synth_random_dot(seed0 + static_cast<std::uint64_t>(n), a.height, a.width, a.labels, a.shapes, opt);
    char stem[32];
    std::snprintf(stem, sizeof stem, "%03d", n);
    const std::string st(stem);
    write_text(dir / (st + "_left.pgm"), write_pgm(s.left, 65535));
    write_text(dir / (st + "_right.pgm"), write_pgm(s.right, 65535));
    write_text(dir / (st + "_gt.pfm"), write_pfm(ground_truth_to_pfm(*s.gt)));
    write_text(dir / (st + "_gt_all.pfm"), write_pfm(ground_truth_to_pfm(*s.gt_all)));
    manifest << name << '/' << st << "_left.pgm " << name << '/' << st << "_right.pgm " << name << '/' << st
             << "_gt.pfm " << name << '/' << st << "_gt_all.pfm\n";
  }
  write_text(fs::path(a.out) / (name + ".txt"), manifest.str());
}

int run_synth(const SynthArgs& a) {
  // disjoint seed ranges for the two splits
  write_split(a, "train", a.train, a.seed * 1000003ull);
  write_split(a, "test", a.test, a.seed * 1000003ull + 500000ull);
  std::cout << "wrote " << a.train << " train and " << a.test << " test pairs to " << a.out << '\n';
  return 0;
}

// ---------------------------------------------------------------------------

// Keeps `<out>.best` at the lowest validation bad1 seen so far.
class BestKeeper {
 public:
  BestKeeper(const std::string& manifest, std::size_t labels, std::string out, InferOptions opt)
      : out_(std::move(out) + ".best"), opt_(opt) {
    if (!manifest.empty()) val_ = load_dataset(manifest, static_cast<int>(labels));
  }
  void update(int epoch, const ModelParams& m) {
    if (val_.empty()) return;
    double bad1 = 0;
    for (const auto& s : val_)
      bad1 += badx(predict(m, s.left, s.right, opt_).disparity, *s.gt, 1.0) / static_cast<double>(val_.size());
    std::cout << "epoch " << epoch << " validation bad1 " << bad1 << " %\n";
    if (bad1 < best_) {
      best_ = bad1;
      save_model(out_, m);
    }
  }

 private:
  std::string out_;
  InferOptions opt_;
  std::vector<StereoSample> val_;
  double best_ = std::numeric_limits<double>::infinity();
};

struct TrainUnaryArgs {
  std::string train, out, config, log, val;
  int labels = 8, layers = 3, filters = 100;
  bool coord = false;
  std::optional<int> epochs, sign;
  std::optional<double> lr;
  std::optional<std::uint64_t> seed;
};

int run_train_unary(const TrainUnaryArgs& a) {
  TrainConfig cfg = load_config(a.config);
  if (a.epochs) cfg.epochs = *a.epochs;
  if (a.lr) cfg.lr_unary = *a.lr;
  if (a.seed) cfg.seed = *a.seed;
  if (a.sign) cfg.sign = *a.sign;
  cfg.validate();
  const auto data = load_dataset(a.train, a.labels);
  std::mt19937_64 rng(cfg.seed);
  Architecture arch;
  arch.image_channels = data.front().left.channels();
  arch.unary_layers = static_cast<std::size_t>(a.layers);
  arch.unary_filters = static_cast<std::size_t>(a.filters);
  arch.coord_features = a.coord;
  ModelParams m = make_model(arch, rng);
  BestKeeper best(a.val, static_cast<std::size_t>(a.labels), a.out,
                  {static_cast<std::size_t>(a.labels), cfg.disparity_sign(), cfg.crf_iterations, false});
  auto log = open_log(a.log);
  if (log) log << "epoch,step,sample,cross_entropy,clamped\n";
  const auto hist = train_unary(
      data, cfg, m,
      [&](const UnaryStepLog& s) {
        if (log) log << s.epoch << ',' << s.step << ',' << s.sample << ',' << s.loss << ',' << s.clamped << '\n';
      },
      [&](int epoch, const ModelParams& mm) {
        save_model(a.out, mm);
        std::cout << "epoch " << epoch << " saved\n";
        best.update(epoch, mm);
      });
  if (hist.empty()) save_model(a.out, m);
  for (std::size_t e = 0; e < hist.size(); ++e) std::cout << "epoch " << e << " cross-entropy " << hist[e] << '\n';
  return 0;
}

// ---------------------------------------------------------------------------

struct TrainJointArgs {
  std::string train, init, out, config, log, val;
  int labels = 8;
  bool grid = true;
  std::string pairwise = "contrast";
  std::optional<int> epochs, learned_epochs, sign, crf_iters;
  std::optional<double> gamma, tau, lr, lr_penalty;
  std::optional<std::uint64_t> seed;
};

int run_train_joint(const TrainJointArgs& a) {
  TrainConfig cfg = load_config(a.config);
  if (a.epochs) cfg.epochs = *a.epochs;
  if (a.learned_epochs) cfg.learned_epochs = *a.learned_epochs;
  if (a.sign) cfg.sign = *a.sign;
  if (a.crf_iters) cfg.crf_iterations = *a.crf_iters;
  if (a.gamma) cfg.gamma = *a.gamma;
  if (a.tau) cfg.tau = *a.tau;
  if (a.lr) cfg.lr_joint = *a.lr;
  if (a.lr_penalty) cfg.lr_penalty = *a.lr_penalty;
  if (a.seed) cfg.seed = *a.seed;
  cfg.validate();
  const auto data = load_dataset(a.train, a.labels);
  ModelParams m = load_model(a.init);
  const auto mode = parse_pairwise_mode(a.pairwise);
  if (mode == PairwiseMode::Off) throw std::invalid_argument("train-joint needs --pairwise contrast or learned");
  if (a.grid && m.pairwise_mode == PairwiseMode::Off) {
    const auto g = grid_search_contrast(data, m, {}, cfg.crf_iterations, cfg.disparity_sign());
    std::cout << "grid search: alpha " << g.alpha << " beta " << g.beta << " P1 " << g.penalty.P1 << " P2 "
              << g.penalty.P2 << " train bad1 " << g.bad1 << " %\n";
  }
  if (mode == PairwiseMode::Learned && m.pairwise_mode != PairwiseMode::Learned) {
    if (m.pairwise.empty()) throw std::invalid_argument("checkpoint has no pairwise network");
    if (m.pairwise_mode == PairwiseMode::Contrast) fit_pairwise_to_contrast(data, m, 20, 1e-2, 0.9, cfg.seed);
    m.pairwise_mode = PairwiseMode::Learned;
  }
  BestKeeper best(a.val, static_cast<std::size_t>(a.labels), a.out,
                  {static_cast<std::size_t>(a.labels), cfg.disparity_sign(), cfg.crf_iterations, false});
  auto log = open_log(a.log);
  if (log) write_joint_log_header(log);
  const auto hist = train_joint(
      data, cfg, m, [&](const JointStepLog& s) { if (log) write_joint_log_row(log, s); },
      [&](int epoch, const ModelParams& mm) {
        save_model(a.out, mm);
        best.update(epoch, mm);
      });
  save_model(a.out, m);
  for (std::size_t e = 0; e < hist.size(); ++e) std::cout << "epoch " << e << " mean hinge " << hist[e] << '\n';
  std::cout << "P1 " << m.penalty.P1 << " P2 " << m.penalty.P2 << '\n';
  return 0;
}

// ---------------------------------------------------------------------------

struct InferArgs {
  std::string left, right, manifest, checkpoint, out = "disparity.pfm", color, out_dir = "pred", trace;
  int labels = 8, crf_iters = kDefaultCrfIterations, sign = 1;
  std::string pairwise;
  bool sublabel = false, coord = false;
};

void infer_one(const ModelParams& m, const Image& left, const Image& right, const InferOptions& opt,
               const fs::path& pfm, const fs::path& ppm) {
  const auto pred = predict(m, left, right, opt);
  write_text(pfm, write_pfm(disparity_to_pfm(left.height(), left.width(), pred.disparity)));
  if (!ppm.empty())
    write_text(ppm, write_ppm(colorize(pred.disparity, left.height(), left.width(),
                                       static_cast<double>(opt.labels - 1))));
}

int run_infer(const InferArgs& a) {
  ModelParams m = load_model(a.checkpoint);
  if (a.coord && !m.coord_features)
    throw std::invalid_argument("--coord-features given but the checkpoint was trained without them");
  if (!a.pairwise.empty()) {
    m.pairwise_mode = parse_pairwise_mode(a.pairwise);
    if (m.pairwise_mode == PairwiseMode::Learned && m.pairwise.empty())
      throw std::invalid_argument("checkpoint has no pairwise network");
  }
  InferOptions opt{static_cast<std::size_t>(a.labels), parse_sign(a.sign), a.crf_iters, a.sublabel};
  if (!a.manifest.empty()) {
    const fs::path dir(a.out_dir);
    fs::create_directories(dir);
    std::ostringstream eval_manifest;
    const auto rows = read_manifest(a.manifest);
    for (std::size_t n = 0; n < rows.size(); ++n) {
      const auto s = load_sample(rows[n], a.labels);
      char stem[32];
      std::snprintf(stem, sizeof stem, "%03zu", n);
      const fs::path pfm = dir / (std::string(stem) + "_pred.pfm");
      infer_one(m, s.left, s.right, opt, pfm, dir / (std::string(stem) + "_pred.ppm"));
      eval_manifest << fs::absolute(pfm).string();
      for (std::size_t k = 2; k < rows[n].size(); ++k) eval_manifest << ' ' << fs::absolute(rows[n][k]).string();
      eval_manifest << '\n';
    }
    write_text(dir / "eval.txt", eval_manifest.str());
    std::cout << "wrote " << rows.size() << " predictions and " << (dir / "eval.txt").string() << '\n';
    return 0;
  }
  if (a.left.empty() || a.right.empty()) throw std::invalid_argument("infer needs --left/--right or --manifest");
  const Image left = read_pgm(read_file_bytes(a.left));
  const Image right = read_pgm(read_file_bytes(a.right));
  infer_one(m, left, right, opt, a.out, a.color);
  if (!a.trace.empty() && m.pairwise_mode != PairwiseMode::Off) {
    const auto fp = model_forward(m, left, right, {opt.labels, opt.sign, false});
    std::ostringstream os;
    write_bound_trace_csv(os, run_inference(fp.prob, opt.crf_iterations));
    write_text(a.trace, os.str());
  }
  return 0;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string manifest, csv, json;
  bool all_pixels = false;
  std::vector<double> thresholds{1, 2, 3, 4};
};

int run_eval(const EvalArgs& a) {
  std::vector<std::vector<double>> preds;
  std::vector<GroundTruth> gts;
  for (const auto& row : read_manifest(a.manifest)) {
    const std::size_t col = a.all_pixels ? 2 : 1;
    if (row.size() <= col)
      throw FormatError(a.all_pixels ? "eval --all-pixels needs pred, gt, gt_all columns" : "eval needs pred, gt columns");
    const auto pred = to_ground_truth(read_pfm(read_file_bytes(row[0])));
    auto gt = to_ground_truth(read_pfm(read_file_bytes(row[col])));
    if (pred.height != gt.height || pred.width != gt.width) throw DimensionError("prediction/gt size mismatch");
    preds.push_back(pred.disparity);
    gts.push_back(std::move(gt));
  }
  if (preds.empty()) throw FormatError("eval: empty manifest");
  const auto rep = evaluate_many(preds, gts, !a.all_pixels, a.thresholds);
  write_report_table(std::cout, rep);
  if (!a.csv.empty()) {
    std::ostringstream os;
    write_report_csv(os, rep);
    write_text(a.csv, os.str());
  }
  if (!a.json.empty()) {
    nlohmann::json j;
    for (const auto& [t, v] : rep.badx) {
      std::ostringstream key;
      key << "bad" << t;
      j["badx"][key.str()] = v;
    }
    j["rms"] = rep.rms;
    j["valid_pixel_count"] = rep.valid_pixel_count;
    j["occluded_excluded"] = rep.occluded_excluded;
    write_text(a.json, j.dump(2) + "\n");
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"CNN+CRF stereo: synthetic data, training, inference and evaluation"};
  app.require_subcommand(1);

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "Write a seeded random-dot dataset with train/test manifests");
  synth->add_option("--out", sa.out, "Output directory")->capture_default_str();
  synth->add_option("--train", sa.train, "Training pairs")->capture_default_str()->check(CLI::NonNegativeNumber);
  synth->add_option("--test", sa.test, "Test pairs")->capture_default_str()->check(CLI::NonNegativeNumber);
  synth->add_option("--height", sa.height)->capture_default_str()->check(CLI::PositiveNumber);
  synth->add_option("--width", sa.width)->capture_default_str()->check(CLI::PositiveNumber);
  synth->add_option("--labels", sa.labels, "Disparity labels L")->capture_default_str();
  synth->add_option("--shapes", sa.shapes, "Rectangles per scene")->capture_default_str();
  synth->add_option("--density", sa.density, "Dot density")->capture_default_str()->check(CLI::Range(0.0, 1.0));
  synth->add_option("--seed", sa.seed)->capture_default_str();
  synth->add_option("--sign", sa.sign, "Disparity sign (1 or -1)")->capture_default_str();

  TrainUnaryArgs ua;
  auto* tu = app.add_subcommand("train-unary", "Pixel-wise cross-entropy training of the unary network");
  tu->add_option("--train", ua.train, "Training manifest (left right gt [gt_all])")->required()->check(CLI::ExistingFile);
  tu->add_option("--out", ua.out, "Output checkpoint")->required();
  tu->add_option("--labels", ua.labels)->capture_default_str();
  tu->add_option("--layers", ua.layers, "Unary layers (3 or 7 in the reference model)")->capture_default_str();
  tu->add_option("--filters", ua.filters)->capture_default_str();
  tu->add_flag("--coord-features", ua.coord, "Append normalized x/y coordinate channels");
  tu->add_option("--config", ua.config, "key=value training config")->check(CLI::ExistingFile);
  tu->add_option("--epochs", ua.epochs);
  tu->add_option("--lr", ua.lr);
  tu->add_option("--seed", ua.seed);
  tu->add_option("--sign", ua.sign);
  tu->add_option("--log", ua.log, "Per-step CSV log");
  tu->add_option("--val", ua.val, "Validation manifest; keeps <out>.best")->check(CLI::ExistingFile);

  TrainJointArgs ja;
  auto* tj = app.add_subcommand("train-joint", "Joint SSVM training of the CNN+CRF model");
  tj->add_option("--train", ja.train, "Training manifest")->required()->check(CLI::ExistingFile);
  tj->add_option("--init", ja.init, "Initial checkpoint (from train-unary)")->required()->check(CLI::ExistingFile);
  tj->add_option("--out", ja.out, "Output checkpoint")->required();
  tj->add_option("--labels", ja.labels)->capture_default_str();
  tj->add_option("--pairwise", ja.pairwise, "contrast or learned")->capture_default_str();
  tj->add_flag("--grid,!--no-grid", ja.grid, "Grid-search contrast parameters first (default on)");
  tj->add_option("--config", ja.config, "key=value training config")->check(CLI::ExistingFile);
  tj->add_option("--epochs", ja.epochs);
  tj->add_option("--learned-epochs", ja.learned_epochs);
  tj->add_option("--crf-iters", ja.crf_iters);
  tj->add_option("--gamma", ja.gamma);
  tj->add_option("--tau", ja.tau);
  tj->add_option("--lr", ja.lr);
  tj->add_option("--lr-penalty", ja.lr_penalty);
  tj->add_option("--seed", ja.seed);
  tj->add_option("--sign", ja.sign);
  tj->add_option("--log", ja.log, "Per-step CSV log");
  tj->add_option("--val", ja.val, "Validation manifest; keeps <out>.best")->check(CLI::ExistingFile);

  InferArgs ia;
  auto* inf = app.add_subcommand("infer", "Predict disparities for one pair or a manifest");
  inf->add_option("--left", ia.left)->check(CLI::ExistingFile);
  inf->add_option("--right", ia.right)->check(CLI::ExistingFile);
  inf->add_option("--manifest", ia.manifest, "Manifest of pairs; writes predictions and eval.txt")
      ->check(CLI::ExistingFile);
  inf->add_option("--checkpoint", ia.checkpoint)->required()->check(CLI::ExistingFile);
  inf->add_option("--out", ia.out, "Output PFM (single pair)")->capture_default_str();
  inf->add_option("--color", ia.color, "Output colorized PPM (single pair)");
  inf->add_option("--out-dir", ia.out_dir, "Output directory (manifest mode)")->capture_default_str();
  inf->add_option("--trace", ia.trace, "Dual bound trace CSV (single pair)");
  inf->add_option("--labels", ia.labels)->capture_default_str();
  inf->add_option("--crf-iters", ia.crf_iters)->capture_default_str()->check(CLI::PositiveNumber);
  inf->add_option("--pairwise", ia.pairwise, "off, contrast or learned (default: from checkpoint)")
      ->check(CLI::IsMember({"off", "contrast", "learned"}));
  inf->add_flag("--sublabel", ia.sublabel, "Quadratic sublabel refinement");
  inf->add_flag("--coord-features", ia.coord, "Require a checkpoint trained with coordinate channels");
  inf->add_option("--sign", ia.sign)->capture_default_str();

  EvalArgs ea;
  auto* ev = app.add_subcommand("eval", "badx and RMS over a manifest of pred gt [gt_all] rows");
  ev->add_option("--manifest", ea.manifest)->required()->check(CLI::ExistingFile);
  ev->add_flag("--all-pixels", ea.all_pixels, "Score against gt_all instead of non-occluded gt");
  ev->add_option("--thresholds", ea.thresholds)->capture_default_str();
  ev->add_option("--csv", ea.csv, "Write the report as CSV");
  ev->add_option("--json", ea.json, "Write the report as JSON");

  CLI11_PARSE(app, argc, argv);
  try {
    if (*synth) return run_synth(sa);
    if (*tu) return run_train_unary(ua);
    if (*tj) return run_train_joint(ja);
    if (*inf) return run_infer(ia);
    if (*ev) return run_eval(ea);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
