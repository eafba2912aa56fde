#pragma once

// Binary model checkpoints. All integers are little-endian uint32, all reals
// little-endian IEEE doubles:
//
//   "CNNCRFCK"  version  mode  P1 P2 alpha beta  flags
//   unary layer list, pairwise layer list
//
// A layer list is a count followed by, per layer,
// out in kh kw activation, then out*in*kh*kw kernel values and out biases.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <string_view>

#include "cnncrf/model.hpp"
#include "cnncrf/stereo_io.hpp"

namespace cnncrf {

inline constexpr char kCheckpointMagic[8] = {'C', 'N', 'N', 'C', 'R', 'F', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

class ByteWriter {
 public:
  void raw(const void* p, std::size_t n) { out_.append(static_cast<const char*>(p), n); }
  void u32(std::uint32_t v) {
    if constexpr (std::endian::native == std::endian::big) v = byteswap32(v);
    raw(&v, 4);
  }
  void f64(double d) {
    std::uint64_t v;
    std::memcpy(&v, &d, 8);
    if constexpr (std::endian::native == std::endian::big)
      v = (static_cast<std::uint64_t>(byteswap32(static_cast<std::uint32_t>(v))) << 32) | byteswap32(v >> 32);
    raw(&v, 8);
  }
  std::string& str() { return out_; }

 private:
  std::string out_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string_view bytes) : in_(bytes) {}
  void raw(void* p, std::size_t n) {
    if (pos_ + n > in_.size()) throw FormatError("checkpoint: unexpected end of data");
    std::memcpy(p, in_.data() + pos_, n);
    pos_ += n;
  }
  std::uint32_t u32() {
    std::uint32_t v;
    raw(&v, 4);
    if constexpr (std::endian::native == std::endian::big) v = byteswap32(v);
    return v;
  }
  double f64() {
    std::uint64_t v;
    raw(&v, 8);
    if constexpr (std::endian::native == std::endian::big)
      v = (static_cast<std::uint64_t>(byteswap32(static_cast<std::uint32_t>(v))) << 32) | byteswap32(v >> 32);
    double d;
    std::memcpy(&d, &v, 8);
    return d;
  }
  bool done() const { return pos_ == in_.size(); }

 private:
  std::string_view in_;
  std::size_t pos_ = 0;
};

inline void write_layers(ByteWriter& w, const LayerStack<double>& layers) {
  w.u32(static_cast<std::uint32_t>(layers.size()));
  for (const auto& l : layers) {
    for (auto v : {l.out_channels, l.in_channels, l.kh, l.kw}) w.u32(static_cast<std::uint32_t>(v));
    w.u32(static_cast<std::uint32_t>(l.activation));
    for (double x : l.kernel) w.f64(x);
    for (double x : l.bias) w.f64(x);
  }
}

inline LayerStack<double> read_layers(ByteReader& r) {
  const std::uint32_t n = r.u32();
  if (n > 1024) throw FormatError("checkpoint: implausible layer count");
  LayerStack<double> layers;
  for (std::uint32_t i = 0; i < n; ++i) {
    const std::size_t out = r.u32(), in = r.u32(), kh = r.u32(), kw = r.u32();
    const std::uint32_t act = r.u32();
    if (act > static_cast<std::uint32_t>(Activation::Abs)) throw FormatError("checkpoint: unknown activation");
    if (out == 0 || in == 0 || kh == 0 || kw == 0 || out * in * kh * kw > (std::size_t{1} << 28))
      throw FormatError("checkpoint: bad layer shape");
    ConvLayer<double> l(out, in, kh, kw, static_cast<Activation>(act));
    for (auto& x : l.kernel) x = r.f64();
    for (auto& x : l.bias) x = r.f64();
    if (!layers.empty() && layers.back().out_channels != in)
      throw DimensionError("checkpoint: layer " + std::to_string(i) + " input channels do not match");
    layers.push_back(std::move(l));
  }
  return layers;
}

}  // namespace detail

inline std::string serialize_model(const ModelParams& m) {
  detail::ByteWriter w;
  w.raw(kCheckpointMagic, sizeof kCheckpointMagic);
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(m.pairwise_mode));
  w.f64(m.penalty.P1);
  w.f64(m.penalty.P2);
  w.f64(m.alpha);
  w.f64(m.beta);
  w.u32(m.coord_features ? 1u : 0u);
  detail::write_layers(w, m.unary);
  detail::write_layers(w, m.pairwise);
  return std::move(w.str());
}

inline ModelParams deserialize_model(std::string_view bytes) {
  detail::ByteReader r(bytes);
  char magic[8];
  r.raw(magic, 8);
  if (std::memcmp(magic, kCheckpointMagic, 8) != 0) throw FormatError("checkpoint: bad magic");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw FormatError("checkpoint: unsupported version " + std::to_string(version));
  ModelParams m;
  const std::uint32_t mode = r.u32();
  if (mode > 2) throw FormatError("checkpoint: unknown pairwise mode");
  m.pairwise_mode = static_cast<PairwiseMode>(mode);
  m.penalty.P1 = r.f64();
  m.penalty.P2 = r.f64();
  m.alpha = r.f64();
  m.beta = r.f64();
  const std::uint32_t flags = r.u32();
  if (flags > 1) throw FormatError("checkpoint: unknown flags");
  m.coord_features = (flags & 1u) != 0;
  m.unary = detail::read_layers(r);
  m.pairwise = detail::read_layers(r);
  if (!r.done()) throw FormatError("checkpoint: trailing bytes");
  if (!m.penalty.satisfies_invariant()) throw FormatError("checkpoint: penalties violate 0 <= P1 <= P2");
  if (m.unary.empty()) throw FormatError("checkpoint: empty unary network");
  if (!m.pairwise.empty()) check_pairwise_geometry(m.pairwise);
  if (m.pairwise_mode == PairwiseMode::Learned && m.pairwise.empty())
    throw FormatError("checkpoint: learned pairwise mode without a pairwise network");
  return m;
}

inline void save_model(const std::filesystem::path& path, const ModelParams& m) {
  write_file_bytes(path, serialize_model(m));
}

inline ModelParams load_model(const std::filesystem::path& path) { return deserialize_model(read_file_bytes(path)); }

}  // namespace cnncrf
