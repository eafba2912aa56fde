#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace cnncrf {

/// Thrown when a file or byte stream does not follow the expected format.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Thrown when tensor shapes or layer geometries do not agree.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Thrown when training diverges or sees non-finite gradients.
class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Thrown when a metric is requested over an empty pixel set.
class MetricError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Dense C×H×W tensor, row-major within each channel.
///
/// Used for images, feature maps and 2-channel edge weight maps alike.
template <typename Real>
class Tensor3 {
 public:
  Tensor3() = default;
  Tensor3(std::size_t channels, std::size_t height, std::size_t width, Real fill = Real(0))
      : channels_(channels), height_(height), width_(width),
        data_(channels * height * width, fill) {}

  std::size_t channels() const { return channels_; }
  std::size_t height() const { return height_; }
  std::size_t width() const { return width_; }
  std::size_t plane_size() const { return height_ * width_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  Real& operator()(std::size_t c, std::size_t r, std::size_t x) {
    return data_[(c * height_ + r) * width_ + x];
  }
  const Real& operator()(std::size_t c, std::size_t r, std::size_t x) const {
    return data_[(c * height_ + r) * width_ + x];
  }

  Real* plane(std::size_t c) { return data_.data() + c * plane_size(); }
  const Real* plane(std::size_t c) const { return data_.data() + c * plane_size(); }

  std::vector<Real>& data() { return data_; }
  const std::vector<Real>& data() const { return data_; }

  bool same_shape(const Tensor3& o) const {
    return channels_ == o.channels_ && height_ == o.height_ && width_ == o.width_;
  }

  template <typename Other>
  Tensor3<Other> cast() const {
    Tensor3<Other> out(channels_, height_, width_);
    for (std::size_t i = 0; i < data_.size(); ++i) out.data()[i] = static_cast<Other>(data_[i]);
    return out;
  }

  friend bool operator==(const Tensor3& a, const Tensor3& b) {
    return a.same_shape(b) && a.data_ == b.data_;
  }

 private:
  std::size_t channels_ = 0;
  std::size_t height_ = 0;
  std::size_t width_ = 0;
  std::vector<Real> data_;
};

using Image = Tensor3<double>;
using FeatureMap = Tensor3<double>;

/// Per-pixel label map, row-major.
class Labeling {
 public:
  Labeling() = default;
  Labeling(std::size_t height, std::size_t width, int fill = 0)
      : height_(height), width_(width), labels_(height * width, fill) {}

  std::size_t height() const { return height_; }
  std::size_t width() const { return width_; }
  std::size_t size() const { return labels_.size(); }

  int& operator()(std::size_t r, std::size_t c) { return labels_[r * width_ + c]; }
  int operator()(std::size_t r, std::size_t c) const { return labels_[r * width_ + c]; }
  int& operator[](std::size_t i) { return labels_[i]; }
  int operator[](std::size_t i) const { return labels_[i]; }

  std::vector<int>& data() { return labels_; }
  const std::vector<int>& data() const { return labels_; }

  friend bool operator==(const Labeling&, const Labeling&) = default;

 private:
  std::size_t height_ = 0;
  std::size_t width_ = 0;
  std::vector<int> labels_;
};

/// Disparity direction: the pixel (r, c) of the reference image matches
/// (r, c + sign * d) in the second image.
enum class DisparitySign : int { Positive = 1, Negative = -1 };

inline int sign_value(DisparitySign s) { return static_cast<int>(s); }

inline void require(bool cond, const std::string& what) {
  if (!cond) throw DimensionError(what);
}

}  // namespace cnncrf
