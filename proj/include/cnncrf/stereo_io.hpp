#pragma once

// Stereo sample loading, normalization, synthetic data and the PFM/PGM/PPM
// file formats.

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "cnncrf/common.hpp"

namespace cnncrf {

/// Real-valued disparity with a validity mask. Invalid pixels are never read
/// by losses or metrics; their disparity slot holds +inf.
struct GroundTruth {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> disparity;
  std::vector<std::uint8_t> valid;

  GroundTruth() = default;
  GroundTruth(std::size_t h, std::size_t w)
      : height(h), width(w),
        disparity(h * w, std::numeric_limits<double>::infinity()), valid(h * w, 0) {}

  void set(std::size_t r, std::size_t c, double d) {
    disparity[r * width + c] = d;
    valid[r * width + c] = std::isfinite(d) && d >= 0.0 ? 1 : 0;
  }
  void invalidate(std::size_t r, std::size_t c) {
    disparity[r * width + c] = std::numeric_limits<double>::infinity();
    valid[r * width + c] = 0;
  }
  std::size_t valid_count() const {
    return static_cast<std::size_t>(std::count(valid.begin(), valid.end(), std::uint8_t{1}));
  }
};

struct StereoSample {
  Image left;
  Image right;
  std::optional<GroundTruth> gt;      // non-occluded pixels
  std::optional<GroundTruth> gt_all;  // all pixels with known disparity
  int label_count = 2;

  void validate() const {
    require(left.same_shape(right), "left and right images differ in shape");
    require(label_count >= 2, "label count must be at least 2");
    if (gt) {
      require(gt->height == left.height() && gt->width == left.width(),
              "ground truth shape differs from image shape");
    }
  }
};

// ---------------------------------------------------------------------------
// Normalization and feature channels

/// Zero-mean, unit-variance over all pixels and channels jointly.
/// Constant images map to all zeros.
inline Image normalize_image(const Image& img) {
  require(!img.empty(), "normalize_image: empty image");
  const auto& v = img.data();
  const double n = static_cast<double>(v.size());
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= n;
  double var = 0.0;
  for (double x : v) var += (x - mean) * (x - mean);
  var /= n;

  constexpr double kVarianceFloor = 1e-12;
  Image out(img.channels(), img.height(), img.width(), 0.0);
  if (var <= kVarianceFloor) return out;
  const double inv_std = 1.0 / std::sqrt(var);
  for (std::size_t i = 0; i < v.size(); ++i) out.data()[i] = (v[i] - mean) * inv_std;
  return out;
}

/// Appends x/width and y/height channels.
inline Image append_coordinate_features(const Image& img) {
  const std::size_t h = img.height(), w = img.width(), ch = img.channels();
  Image out(ch + 2, h, w);
  std::copy(img.data().begin(), img.data().end(), out.data().begin());
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) {
      out(ch, r, c) = static_cast<double>(c) / static_cast<double>(w);
      out(ch + 1, r, c) = static_cast<double>(r) / static_cast<double>(h);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Byte-level helpers

namespace detail {

class HeaderReader {
 public:
  explicit HeaderReader(std::string_view bytes) : bytes_(bytes) {}

  // Reads a whitespace-delimited token, skipping '#' comments when allowed.
  std::string token(bool allow_comments) {
    skip_space(allow_comments);
    std::size_t start = pos_;
    while (pos_ < bytes_.size() && !std::isspace(static_cast<unsigned char>(bytes_[pos_]))) ++pos_;
    if (start == pos_) throw FormatError("unexpected end of header");
    return std::string(bytes_.substr(start, pos_ - start));
  }

  // Consumes exactly one whitespace byte terminating the header.
  void single_space() {
    if (pos_ >= bytes_.size() || !std::isspace(static_cast<unsigned char>(bytes_[pos_])))
      throw FormatError("missing whitespace after header");
    ++pos_;
  }

  std::size_t pos() const { return pos_; }

 private:
  void skip_space(bool allow_comments) {
    while (pos_ < bytes_.size()) {
      char ch = bytes_[pos_];
      if (std::isspace(static_cast<unsigned char>(ch))) {
        ++pos_;
      } else if (allow_comments && ch == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
      } else {
        break;
      }
    }
  }

  std::string_view bytes_;
  std::size_t pos_ = 0;
};

inline long parse_positive(const std::string& tok, const char* what) {
  std::size_t used = 0;
  long v = 0;
  try {
    v = std::stol(tok, &used);
  } catch (const std::exception&) {
    throw FormatError(std::string("invalid ") + what + ": '" + tok + "'");
  }
  if (used != tok.size() || v <= 0) throw FormatError(std::string("invalid ") + what + ": '" + tok + "'");
  return v;
}

inline std::uint32_t byteswap32(std::uint32_t v) {
  return (v >> 24) | ((v >> 8) & 0x0000FF00u) | ((v << 8) & 0x00FF0000u) | (v << 24);
}

}  // namespace detail

inline std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file_bytes(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("short write to " + path.string());
}

// ---------------------------------------------------------------------------
// PFM (grayscale "Pf" only)

/// Decoded grayscale PFM. Rows are stored top-down; the scale token is kept
/// verbatim so that conforming files round-trip byte for byte.
struct PfmImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::string scale_token = "-1";
  std::vector<float> values;

  bool little_endian() const { return !scale_token.empty() && scale_token[0] == '-'; }
  float at(std::size_t r, std::size_t c) const { return values[r * width + c]; }
};

inline PfmImage read_pfm(std::string_view bytes) {
  detail::HeaderReader hdr(bytes);
  std::string magic = hdr.token(false);
  if (magic == "PF") throw FormatError("color PFM (PF) is not supported");
  if (magic != "Pf") throw FormatError("bad PFM magic '" + magic + "'");
  PfmImage img;
  img.width = static_cast<std::size_t>(detail::parse_positive(hdr.token(false), "PFM width"));
  img.height = static_cast<std::size_t>(detail::parse_positive(hdr.token(false), "PFM height"));
  img.scale_token = hdr.token(false);
  double scale = 0.0;
  try {
    std::size_t used = 0;
    scale = std::stod(img.scale_token, &used);
    if (used != img.scale_token.size()) throw FormatError("trailing characters");
  } catch (const std::exception&) {
    throw FormatError("invalid PFM scale '" + img.scale_token + "'");
  }
  if (scale == 0.0 || !std::isfinite(scale)) throw FormatError("PFM scale must be finite and non-zero");
  hdr.single_space();

  const std::size_t count = img.width * img.height;
  const std::size_t offset = hdr.pos();
  if (bytes.size() - offset < count * 4) throw FormatError("truncated PFM payload");
  const bool little = scale < 0.0;
  const bool swap = little != (std::endian::native == std::endian::little);
  img.values.resize(count);
  for (std::size_t r = 0; r < img.height; ++r) {
    const std::size_t file_row = img.height - 1 - r;  // bottom-up storage
    for (std::size_t c = 0; c < img.width; ++c) {
      std::uint32_t raw;
      std::memcpy(&raw, bytes.data() + offset + 4 * (file_row * img.width + c), 4);
      if (swap) raw = detail::byteswap32(raw);
      img.values[r * img.width + c] = std::bit_cast<float>(raw);
    }
  }
  return img;
}

inline std::string write_pfm(const PfmImage& img) {
  require(img.values.size() == img.width * img.height, "write_pfm: value count mismatch");
  std::string out = "Pf\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n" +
                    img.scale_token + "\n";
  const bool little = img.little_endian();
  const bool swap = little != (std::endian::native == std::endian::little);
  const std::size_t offset = out.size();
  out.resize(offset + 4 * img.values.size());
  for (std::size_t r = 0; r < img.height; ++r) {
    const std::size_t file_row = img.height - 1 - r;
    for (std::size_t c = 0; c < img.width; ++c) {
      std::uint32_t raw = std::bit_cast<std::uint32_t>(img.values[r * img.width + c]);
      if (swap) raw = detail::byteswap32(raw);
      std::memcpy(out.data() + offset + 4 * (file_row * img.width + c), &raw, 4);
    }
  }
  return out;
}

inline GroundTruth to_ground_truth(const PfmImage& pfm) {
  GroundTruth gt(pfm.height, pfm.width);
  for (std::size_t r = 0; r < pfm.height; ++r)
    for (std::size_t c = 0; c < pfm.width; ++c) {
      const float v = pfm.at(r, c);
      if (std::isfinite(v) && v >= 0.0f) gt.set(r, c, v);
    }
  return gt;
}

/// Disparity map as PFM; invalid pixels are written as +inf.
inline PfmImage disparity_to_pfm(std::size_t height, std::size_t width, const std::vector<double>& disp,
                                 const std::vector<std::uint8_t>* valid = nullptr) {
  PfmImage img;
  img.height = height;
  img.width = width;
  img.scale_token = "-1";
  img.values.resize(height * width);
  for (std::size_t i = 0; i < disp.size(); ++i) {
    const bool ok = (!valid || (*valid)[i]) && std::isfinite(disp[i]);
    img.values[i] = ok ? static_cast<float>(disp[i]) : std::numeric_limits<float>::infinity();
  }
  return img;
}

inline PfmImage ground_truth_to_pfm(const GroundTruth& gt) {
  return disparity_to_pfm(gt.height, gt.width, gt.disparity, &gt.valid);
}

// ---------------------------------------------------------------------------
// PGM (binary P5) and PPM (binary P6, write only)

inline Image read_pgm(std::string_view bytes) {
  detail::HeaderReader hdr(bytes);
  if (hdr.token(true) != "P5") throw FormatError("bad PGM magic (expected P5)");
  const auto width = static_cast<std::size_t>(detail::parse_positive(hdr.token(true), "PGM width"));
  const auto height = static_cast<std::size_t>(detail::parse_positive(hdr.token(true), "PGM height"));
  std::string max_tok = hdr.token(true);
  long maxval = 0;
  try {
    maxval = std::stol(max_tok);
  } catch (const std::exception&) {
    throw FormatError("invalid PGM maxval '" + max_tok + "'");
  }
  if (maxval <= 0 || maxval > 65535) throw FormatError("PGM maxval out of range: " + max_tok);
  hdr.single_space();

  const std::size_t bpp = maxval < 256 ? 1 : 2;
  const std::size_t offset = hdr.pos();
  if (bytes.size() - offset < width * height * bpp) throw FormatError("truncated PGM payload");
  Image img(1, height, width);
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data() + offset);
  for (std::size_t i = 0; i < width * height; ++i) {
    unsigned v = bpp == 1 ? p[i] : (static_cast<unsigned>(p[2 * i]) << 8) | p[2 * i + 1];
    if (v > static_cast<unsigned>(maxval)) throw FormatError("PGM sample exceeds maxval");
    img.data()[i] = static_cast<double>(v) / static_cast<double>(maxval);
  }
  return img;
}

/// Writes channel 0 of `img`, clamping to [0,1] and quantizing to maxval.
inline std::string write_pgm(const Image& img, int maxval = 255) {
  require(maxval > 0 && maxval <= 65535, "write_pgm: maxval out of range");
  std::string out = "P5\n" + std::to_string(img.width()) + " " + std::to_string(img.height()) + "\n" +
                    std::to_string(maxval) + "\n";
  const std::size_t bpp = maxval < 256 ? 1 : 2;
  const std::size_t n = img.plane_size();
  const std::size_t offset = out.size();
  out.resize(offset + n * bpp);
  for (std::size_t i = 0; i < n; ++i) {
    const double v = std::clamp(img.data()[i], 0.0, 1.0);
    const auto q = static_cast<unsigned>(std::lround(v * maxval));
    if (bpp == 1) {
      out[offset + i] = static_cast<char>(q);
    } else {
      out[offset + 2 * i] = static_cast<char>(q >> 8);
      out[offset + 2 * i + 1] = static_cast<char>(q & 0xFF);
    }
  }
  return out;
}

/// 8-bit binary PPM from a 3-channel image in [0,1].
inline std::string write_ppm(const Image& img) {
  require(img.channels() == 3, "write_ppm: expected 3 channels");
  std::string out = "P6\n" + std::to_string(img.width()) + " " + std::to_string(img.height()) + "\n255\n";
  for (std::size_t r = 0; r < img.height(); ++r)
    for (std::size_t c = 0; c < img.width(); ++c)
      for (std::size_t ch = 0; ch < 3; ++ch)
        out.push_back(static_cast<char>(std::lround(std::clamp(img(ch, r, c), 0.0, 1.0) * 255.0)));
  return out;
}

// ---------------------------------------------------------------------------
// Manifests

/// Whitespace-separated path rows; relative paths resolve against the
/// manifest's directory. Blank lines and lines starting with '#' are skipped.
inline std::vector<std::vector<std::filesystem::path>> read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open manifest " + path.string());
  const auto base = path.parent_path();
  std::vector<std::vector<std::filesystem::path>> rows;
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::vector<std::filesystem::path> row;
    std::string tok;
    while (ls >> tok) {
      if (row.empty() && tok[0] == '#') break;
      std::filesystem::path p(tok);
      row.push_back(p.is_absolute() ? p : base / p);
    }
    if (!row.empty()) rows.push_back(std::move(row));
  }
  return rows;
}

/// Loads a (left, right, gt[, gt_all]) manifest row.
inline StereoSample load_sample(const std::vector<std::filesystem::path>& row, int label_count) {
  if (row.size() < 2) throw FormatError("manifest row needs at least left and right paths");
  StereoSample s;
  s.left = read_pgm(read_file_bytes(row[0]));
  s.right = read_pgm(read_file_bytes(row[1]));
  if (row.size() >= 3) s.gt = to_ground_truth(read_pfm(read_file_bytes(row[2])));
  if (row.size() >= 4) s.gt_all = to_ground_truth(read_pfm(read_file_bytes(row[3])));
  s.label_count = label_count;
  s.validate();
  return s;
}

inline std::vector<StereoSample> load_dataset(const std::filesystem::path& manifest, int label_count) {
  std::vector<StereoSample> out;
  for (const auto& row : read_manifest(manifest)) out.push_back(load_sample(row, label_count));
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic random-dot stereo

struct SynthOptions {
  DisparitySign sign = DisparitySign::Positive;
  /// Probability that a pixel carries a random dot instead of its region's
  /// flat base intensity. Low densities leave ambiguous flat patches.
  double dot_density = 0.35;
};

/// Piecewise-constant disparity (rectangles over a fronto-parallel
/// background), a textured left image and the right image obtained by
/// forward-warping the left one. Occluded and out-of-image pixels are invalid
/// in `gt`; `gt_all` keeps the disparity of every pixel.
inline StereoSample synth_random_dot(std::uint64_t seed, std::size_t height, std::size_t width, int labels,
                                     int shape_count, const SynthOptions& opt = {}) {
  if (labels < 2 || static_cast<std::size_t>(labels) > width / 4)
    throw std::invalid_argument("synth_random_dot: need 2 <= L <= width/4");
  if (height < 1) throw std::invalid_argument("synth_random_dot: empty image");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uniform_int = [&](int lo, int hi) {  // inclusive
    return lo + static_cast<int>(std::floor(unit(rng) * (hi - lo + 1)));
  };

  const int H = static_cast<int>(height), W = static_cast<int>(width);
  std::vector<int> disp(height * width), region(height * width, 0);
  const int background = uniform_int(0, std::max(0, labels / 3));
  std::fill(disp.begin(), disp.end(), background);

  struct Rect { int r0, c0, r1, c1, d; };
  std::vector<Rect> rects;
  for (int k = 0; k < shape_count; ++k) {
    const int rh = uniform_int(std::max(1, H / 5), std::max(1, H / 2));
    const int rw = uniform_int(std::max(1, W / 6), std::max(1, W / 3));
    const int r0 = uniform_int(0, H - rh), c0 = uniform_int(0, W - rw);
    rects.push_back({r0, c0, r0 + rh, c0 + rw, uniform_int(0, labels - 1)});
  }
  std::stable_sort(rects.begin(), rects.end(), [](const Rect& a, const Rect& b) { return a.d < b.d; });
  for (std::size_t k = 0; k < rects.size(); ++k) {
    const auto& rc = rects[k];
    for (int r = rc.r0; r < rc.r1; ++r)
      for (int c = rc.c0; c < rc.c1; ++c) {
        disp[r * W + c] = rc.d;
        region[r * W + c] = static_cast<int>(k) + 1;
      }
  }

  std::vector<double> base(rects.size() + 1);
  for (auto& b : base) b = 0.2 + 0.6 * unit(rng);
  auto texel = [&](int reg) { return unit(rng) < opt.dot_density ? unit(rng) : base[reg]; };

  StereoSample s;
  s.label_count = labels;
  s.left = Image(1, height, width);
  s.right = Image(1, height, width);
  for (int i = 0; i < H * W; ++i) s.left.data()[i] = texel(region[i]);
  for (int i = 0; i < H * W; ++i) s.right.data()[i] = texel(0);

  const int sgn = sign_value(opt.sign);
  std::vector<int> zbuf(height * width, -1);
  for (int r = 0; r < H; ++r)
    for (int c = 0; c < W; ++c) {
      const int tc = c + sgn * disp[r * W + c];
      if (tc >= 0 && tc < W) zbuf[r * W + tc] = std::max(zbuf[r * W + tc], disp[r * W + c]);
    }

  GroundTruth gt(height, width), gt_all(height, width);
  for (int r = 0; r < H; ++r)
    for (int c = 0; c < W; ++c) {
      const int d = disp[r * W + c];
      gt_all.set(r, c, d);
      const int tc = c + sgn * d;
      if (tc < 0 || tc >= W || zbuf[r * W + tc] != d) continue;
      s.right(0, r, tc) = s.left(0, r, c);
      gt.set(r, c, d);
    }
  s.gt = std::move(gt);
  s.gt_all = std::move(gt_all);
  return s;
}

}  // namespace cnncrf
