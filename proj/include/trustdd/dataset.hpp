#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "trustdd/common.hpp"
#include "trustdd/rng.hpp"
#include "trustdd/tensor.hpp"

namespace trustdd {

namespace fs = std::filesystem;

enum class OutlierProvenance { pseudo_corruption, noise_gaussian, noise_uniform, external_directory };

inline std::string to_string(OutlierProvenance p) {
  switch (p) {
    case OutlierProvenance::pseudo_corruption: return "pseudo-corruption";
    case OutlierProvenance::noise_gaussian: return "noise-gaussian";
    case OutlierProvenance::noise_uniform: return "noise-uniform";
    case OutlierProvenance::external_directory: return "external-directory";
  }
  return "?";
}

inline OutlierProvenance provenance_from_string(const std::string& s) {
  if (s == "pseudo-corruption") return OutlierProvenance::pseudo_corruption;
  if (s == "noise-gaussian") return OutlierProvenance::noise_gaussian;
  if (s == "noise-uniform") return OutlierProvenance::noise_uniform;
  if (s == "external-directory") return OutlierProvenance::external_directory;
  throw ValidationError("unknown provenance: " + s);
}

// In-distribution images with class labels. Pixels live in [0,1]; any
// per-channel standardization happens inside network forward passes only.
template <typename T>
struct LabeledImageSet {
  Tensor<T> images;  // (count, channels, height, width)
  std::vector<std::int32_t> labels;
  std::int32_t num_classes = 0;
  std::string name;
  bool digits = false;  // enables the flip corruption

  std::int64_t count() const { return images.dim(0); }
  Shape image_shape() const { return {images.dim(1), images.dim(2), images.dim(3)}; }

  void validate() const {
    if (images.rank() != 4) throw ValidationError(name + ": images must be 4-D");
    if (static_cast<std::int64_t>(labels.size()) != count())
      throw ValidationError(name + ": label count " + std::to_string(labels.size()) +
                            " != image count " + std::to_string(count()));
    if (num_classes <= 0) throw ValidationError(name + ": num_classes must be positive");
    for (auto y : labels)
      if (y < 0 || y >= num_classes)
        throw ValidationError(name + ": label " + std::to_string(y) + " out of range");
    const T lo = images.min_value(), hi = images.max_value();
    if (count() > 0 && (lo < T{0} || hi > T{1}))
      throw ValidationError(name + ": pixels outside [0,1]: min " + std::to_string(double(lo)) +
                            " max " + std::to_string(double(hi)));
  }

  std::vector<std::vector<std::int64_t>> indices_by_class() const {
    std::vector<std::vector<std::int64_t>> per(static_cast<std::size_t>(num_classes));
    for (std::int64_t i = 0; i < count(); ++i)
      per[static_cast<std::size_t>(labels[static_cast<std::size_t>(i)])].push_back(i);
    return per;
  }
};

// Outlier images, no labels.
template <typename T>
struct UnlabeledImageSet {
  Tensor<T> images;  // (count, channels, height, width)
  std::string name;
  OutlierProvenance provenance = OutlierProvenance::external_directory;
  std::vector<std::string> tags;  // optional, one corruption tag per image

  std::int64_t count() const { return images.dim(0); }
  Shape image_shape() const { return {images.dim(1), images.dim(2), images.dim(3)}; }

  void validate() const {
    if (images.rank() != 4) throw ValidationError(name + ": images must be 4-D");
    if (!tags.empty() && static_cast<std::int64_t>(tags.size()) != count())
      throw ValidationError(name + ": tags size mismatch");
    const T lo = images.min_value(), hi = images.max_value();
    if (count() > 0 && (lo < T{0} || hi > T{1}))
      throw ValidationError(name + ": pixels outside [0,1]");
  }
};

// The learnable condensed dataset S = S_in u S_out. s_in labels are fixed and
// never optimized; s_out rows are unlabeled.
template <typename T>
struct DistilledSet {
  Tensor<T> s_in_images;                   // (num_classes*ipc, c, h, w)
  std::vector<std::int32_t> s_in_labels;   // balanced, ipc per class
  Tensor<T> s_out_images;                  // (outlier_count, c, h, w); may be empty
  std::int32_t ipc = 0;
  std::int32_t num_classes = 0;
  std::string method = "dsa";              // dsa | mtt | single-set-dsa
  std::string outlier_mode = "none";       // none | oe | poe
  std::uint64_t rng_seed = 0;
  std::vector<std::string> corruption_assignment;  // per s_out row, optional

  std::int64_t in_count() const { return s_in_images.dim(0); }
  std::int64_t out_count() const { return s_out_images.dim(0); }
  Shape image_shape() const {
    return {s_in_images.dim(1), s_in_images.dim(2), s_in_images.dim(3)};
  }

  void validate() const {
    if (in_count() != std::int64_t(num_classes) * ipc)
      throw ValidationError("distilled set: |s_in| != num_classes * ipc");
    std::vector<std::int64_t> hist(static_cast<std::size_t>(num_classes), 0);
    for (auto y : s_in_labels) {
      if (y < 0 || y >= num_classes) throw ValidationError("distilled set: label out of range");
      ++hist[static_cast<std::size_t>(y)];
    }
    for (auto h : hist)
      if (h != ipc) throw ValidationError("distilled set: class histogram is not balanced");
    if (outlier_mode == "none" && out_count() != 0)
      throw ValidationError("distilled set: outlier_mode none requires |s_out| = 0");
    if (!corruption_assignment.empty() &&
        static_cast<std::int64_t>(corruption_assignment.size()) != out_count())
      throw ValidationError("distilled set: corruption_assignment size mismatch");
  }
};

// ---------------------------------------------------------------------------
// Builtin generators

namespace detail {

inline std::map<std::string, std::string> parse_kv_list(const std::string& s) {
  std::map<std::string, std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw ConfigError("expected key=value, got '" + item + "'");
    out[item.substr(0, eq)] = item.substr(eq + 1);
  }
  return out;
}

inline std::int64_t kv_int(const std::map<std::string, std::string>& kv, const std::string& key,
                           std::int64_t fallback) {
  auto it = kv.find(key);
  if (it == kv.end()) return fallback;
  return std::stoll(it->second);
}

// 5x7 bitmap font rows, MSB-left in the low 5 bits.
inline const std::array<std::array<std::uint8_t, 7>, 10>& digit_font() {
  static const std::array<std::array<std::uint8_t, 7>, 10> font = {{
      {0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E},  // 0
      {0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E},  // 1
      {0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F},  // 2
      {0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E},  // 3
      {0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02},  // 4
      {0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E},  // 5
      {0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E},  // 6
      {0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08},  // 7
      {0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E},  // 8
      {0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C},  // 9
  }};
  return font;
}

inline const std::array<std::array<std::uint8_t, 7>, 10>& letter_font() {
  static const std::array<std::array<std::uint8_t, 7>, 10> font = {{
      {0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11},  // A
      {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F},  // E
      {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10},  // F
      {0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11},  // H
      {0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11},  // K
      {0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F},  // L
      {0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11},  // M
      {0x11, 0x19, 0x15, 0x13, 0x11, 0x11, 0x11},  // N
      {0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11},  // R
      {0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04},  // T
  }};
  return font;
}

inline double glyph_bilinear(const std::array<std::uint8_t, 7>& rows, double u, double v) {
  // (u,v) in glyph units: u across 5 columns, v down 7 rows.
  const double fu = u - 0.5, fv = v - 0.5;
  const int u0 = static_cast<int>(std::floor(fu)), v0 = static_cast<int>(std::floor(fv));
  const double du = fu - u0, dv = fv - v0;
  auto bit = [&](int col, int row) -> double {
    if (col < 0 || col >= 5 || row < 0 || row >= 7) return 0.0;
    return (rows[static_cast<std::size_t>(row)] >> (4 - col)) & 1 ? 1.0 : 0.0;
  };
  return bit(u0, v0) * (1 - du) * (1 - dv) + bit(u0 + 1, v0) * du * (1 - dv) +
         bit(u0, v0 + 1) * (1 - du) * dv + bit(u0 + 1, v0 + 1) * du * dv;
}

template <typename T>
void render_glyph(Tensor<T>& images, std::int64_t n, const std::array<std::uint8_t, 7>& rows,
                  std::int64_t size, Rng& rng) {
  const double theta = rng.uniform(-0.22, 0.22);
  const double s = (static_cast<double>(size) / 10.0) * rng.uniform(0.85, 1.1);
  const double aspect = rng.uniform(0.92, 1.08);
  const double tx = rng.uniform(-1.8, 1.8), ty = rng.uniform(-1.8, 1.8);
  const double amp = rng.uniform(0.75, 1.0);
  const double c = std::cos(theta), sn = std::sin(theta);
  const double cx = (size - 1) / 2.0, cy = (size - 1) / 2.0;
  for (std::int64_t y = 0; y < size; ++y) {
    for (std::int64_t x = 0; x < size; ++x) {
      const double px = (x - cx - tx), py = (y - cy - ty);
      const double rx = (c * px + sn * py) / (s * aspect);
      const double ry = (-sn * px + c * py) / s;
      const double val = glyph_bilinear(rows, rx + 2.5, ry + 3.5);
      images.at4(n, 0, y, x) = static_cast<T>(std::clamp(amp * val, 0.0, 1.0));
    }
  }
}

}  // namespace detail

// Gaussian bumps at class-dependent positions; the desk-scale stand-in for
// image classification data.
template <typename T>
LabeledImageSet<T> make_blobs(std::int64_t classes, std::int64_t count, std::int64_t size,
                              std::int64_t channels, std::uint64_t seed, const std::string& name) {
  if (classes < 1 || size < 2 || channels < 1 || count < 0)
    throw ConfigError("make_blobs: bad parameters");
  LabeledImageSet<T> set;
  set.images = Tensor<T>::zeros({count, channels, size, size});
  set.labels.resize(static_cast<std::size_t>(count));
  set.num_classes = static_cast<std::int32_t>(classes);
  set.name = name;
  Rng root(seed);
  const double radius = 0.27 * size;
  const double cx = (size - 1) / 2.0, cy = (size - 1) / 2.0;
  for (std::int64_t i = 0; i < count; ++i) {
    const std::int64_t label = i % classes;
    set.labels[static_cast<std::size_t>(i)] = static_cast<std::int32_t>(label);
    Rng r = root.stream("img", static_cast<std::uint64_t>(i));
    const double angle = 6.283185307179586 * static_cast<double>(label) / static_cast<double>(classes);
    const double bx = cx + radius * std::cos(angle) + r.uniform(-0.06, 0.06) * size;
    const double by = cy + radius * std::sin(angle) + r.uniform(-0.06, 0.06) * size;
    const double sigma = 0.11 * size * r.uniform(0.85, 1.15);
    const double amp = r.uniform(0.7, 1.0);
    for (std::int64_t ch = 0; ch < channels; ++ch) {
      const double chan_gain = channels == 1 ? 1.0 : r.uniform(0.6, 1.0);
      for (std::int64_t y = 0; y < size; ++y)
        for (std::int64_t x = 0; x < size; ++x) {
          const double d2 = (x - bx) * (x - bx) + (y - by) * (y - by);
          const double v = amp * chan_gain * std::exp(-d2 / (2 * sigma * sigma)) + r.uniform(0.0, 0.04);
          set.images.at4(i, ch, y, x) = static_cast<T>(std::clamp(v, 0.0, 1.0));
        }
    }
  }
  return set;
}

// Structurally distinct blob patterns (rings and stripes) used as held-out
// OOD test material for the synthetic end-to-end runs.
template <typename T>
UnlabeledImageSet<T> make_blob_outliers(std::int64_t count, std::int64_t size, std::int64_t channels,
                                        std::uint64_t seed, const std::string& name) {
  UnlabeledImageSet<T> set;
  set.images = Tensor<T>::zeros({count, channels, size, size});
  set.name = name;
  set.provenance = OutlierProvenance::external_directory;
  Rng root(seed);
  for (std::int64_t i = 0; i < count; ++i) {
    Rng r = root.stream("img", static_cast<std::uint64_t>(i));
    const bool ring = r.coin();
    const double amp = r.uniform(0.7, 1.0);
    if (ring) {
      const double bx = r.uniform(0.3, 0.7) * size, by = r.uniform(0.3, 0.7) * size;
      const double r0 = r.uniform(0.22, 0.38) * size;
      const double sigma = 0.05 * size * r.uniform(0.8, 1.3);
      for (std::int64_t ch = 0; ch < channels; ++ch)
        for (std::int64_t y = 0; y < size; ++y)
          for (std::int64_t x = 0; x < size; ++x) {
            const double d = std::sqrt((x - bx) * (x - bx) + (y - by) * (y - by)) - r0;
            const double v = amp * std::exp(-d * d / (2 * sigma * sigma)) + r.uniform(0.0, 0.04);
            set.images.at4(i, ch, y, x) = static_cast<T>(std::clamp(v, 0.0, 1.0));
          }
    } else {
      const double fx = r.uniform(0.5, 1.5), fy = r.uniform(0.5, 1.5);
      const double phase = r.uniform(0.0, 6.28);
      for (std::int64_t ch = 0; ch < channels; ++ch)
        for (std::int64_t y = 0; y < size; ++y)
          for (std::int64_t x = 0; x < size; ++x) {
            const double v =
                amp * 0.5 *
                    (1 + std::sin(6.283185307179586 * (fx * x + fy * y) / size + phase)) +
                r.uniform(0.0, 0.04);
            set.images.at4(i, ch, y, x) = static_cast<T>(std::clamp(v, 0.0, 1.0));
          }
    }
  }
  return set;
}

// Deterministic digit-glyph renderer; digit-flagged so flip applies.
template <typename T>
LabeledImageSet<T> make_digits(std::int64_t count, std::int64_t size, std::uint64_t seed,
                               const std::string& name) {
  LabeledImageSet<T> set;
  set.images = Tensor<T>::zeros({count, 1, size, size});
  set.labels.resize(static_cast<std::size_t>(count));
  set.num_classes = 10;
  set.name = name;
  set.digits = true;
  Rng root(seed);
  for (std::int64_t i = 0; i < count; ++i) {
    const std::int64_t label = i % 10;
    set.labels[static_cast<std::size_t>(i)] = static_cast<std::int32_t>(label);
    Rng r = root.stream("img", static_cast<std::uint64_t>(i));
    detail::render_glyph(set.images, i, detail::digit_font()[static_cast<std::size_t>(label)], size, r);
  }
  return set;
}

// Letter glyphs: semantically shifted but structurally similar to digits
// (near-OOD test material, in the spirit of notMNIST).
template <typename T>
UnlabeledImageSet<T> make_letters(std::int64_t count, std::int64_t size, std::uint64_t seed,
                                  const std::string& name) {
  UnlabeledImageSet<T> set;
  set.images = Tensor<T>::zeros({count, 1, size, size});
  set.name = name;
  set.provenance = OutlierProvenance::external_directory;
  Rng root(seed);
  for (std::int64_t i = 0; i < count; ++i) {
    Rng r = root.stream("img", static_cast<std::uint64_t>(i));
    detail::render_glyph(set.images, i, detail::letter_font()[static_cast<std::size_t>(i % 10)], size, r);
  }
  return set;
}

// Random polyline scribbles; texture-like OOD test material.
template <typename T>
UnlabeledImageSet<T> make_strokes(std::int64_t count, std::int64_t size, std::uint64_t seed,
                                  const std::string& name) {
  UnlabeledImageSet<T> set;
  set.images = Tensor<T>::zeros({count, 1, size, size});
  set.name = name;
  set.provenance = OutlierProvenance::external_directory;
  Rng root(seed);
  for (std::int64_t i = 0; i < count; ++i) {
    Rng r = root.stream("img", static_cast<std::uint64_t>(i));
    const int segments = 3 + static_cast<int>(r.below(4));
    double x0 = r.uniform(0.2, 0.8) * size, y0 = r.uniform(0.2, 0.8) * size;
    const double amp = r.uniform(0.75, 1.0);
    std::vector<std::array<double, 4>> segs;
    for (int sgi = 0; sgi < segments; ++sgi) {
      const double ang = r.uniform(0, 6.28);
      const double len = r.uniform(0.15, 0.4) * size;
      double x1 = std::clamp(x0 + len * std::cos(ang), 1.0, size - 2.0);
      double y1 = std::clamp(y0 + len * std::sin(ang), 1.0, size - 2.0);
      segs.push_back({x0, y0, x1, y1});
      x0 = x1;
      y0 = y1;
    }
    const double w = 0.045 * size;
    for (std::int64_t y = 0; y < size; ++y)
      for (std::int64_t x = 0; x < size; ++x) {
        double best = 1e9;
        for (const auto& sg : segs) {
          const double vx = sg[2] - sg[0], vy = sg[3] - sg[1];
          const double L2 = vx * vx + vy * vy;
          double t = L2 > 0 ? ((x - sg[0]) * vx + (y - sg[1]) * vy) / L2 : 0.0;
          t = std::clamp(t, 0.0, 1.0);
          const double dx = x - (sg[0] + t * vx), dy = y - (sg[1] + t * vy);
          best = std::min(best, dx * dx + dy * dy);
        }
        const double v = amp * std::exp(-best / (2 * w * w)) + r.uniform(0.0, 0.04);
        set.images.at4(i, 0, y, x) = static_cast<T>(std::clamp(v, 0.0, 1.0));
      }
  }
  return set;
}

// ---------------------------------------------------------------------------
// MNIST-format (IDX) reader/writer

namespace detail {

inline std::uint32_t read_be32(std::ifstream& f, const std::string& path) {
  unsigned char b[4];
  read_exact(f, b, 4, path);
  return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) | (std::uint32_t(b[2]) << 8) |
         std::uint32_t(b[3]);
}

inline void write_be32(std::ofstream& f, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                        static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
  write_exact(f, b, 4);
}

}  // namespace detail

template <typename T>
LabeledImageSet<T> load_idx_dataset(const fs::path& dir, const std::string& split) {
  const std::string prefix = split == "train" ? "train" : "t10k";
  const fs::path img_path = dir / (prefix + "-images-idx3-ubyte");
  const fs::path lbl_path = dir / (prefix + "-labels-idx1-ubyte");
  if (!fs::exists(img_path)) throw LoadError("missing IDX image file: " + img_path.string());
  if (!fs::exists(lbl_path)) throw LoadError("missing IDX label file: " + lbl_path.string());

  std::ifstream fi(img_path, std::ios::binary);
  if (detail::read_be32(fi, img_path.string()) != 2051)
    throw LoadError("bad IDX image magic in " + img_path.string());
  const auto n = detail::read_be32(fi, img_path.string());
  const auto h = detail::read_be32(fi, img_path.string());
  const auto w = detail::read_be32(fi, img_path.string());

  std::ifstream fl(lbl_path, std::ios::binary);
  if (detail::read_be32(fl, lbl_path.string()) != 2049)
    throw LoadError("bad IDX label magic in " + lbl_path.string());
  const auto nl = detail::read_be32(fl, lbl_path.string());
  if (n != nl)
    throw ValidationError("IDX image/label count mismatch in " + dir.string() + ": " +
                          std::to_string(n) + " vs " + std::to_string(nl));

  LabeledImageSet<T> set;
  set.name = "mnist-format:" + dir.filename().string() + ":" + split;
  set.num_classes = 10;
  set.images = Tensor<T>{Shape{n, 1, h, w}};
  set.labels.resize(n);
  std::vector<unsigned char> row(static_cast<std::size_t>(h) * w);
  for (std::uint32_t i = 0; i < n; ++i) {
    detail::read_exact(fi, row.data(), row.size(), img_path.string());
    T* dst = set.images.data() + static_cast<std::int64_t>(i) * h * w;
    for (std::size_t j = 0; j < row.size(); ++j) dst[j] = static_cast<T>(row[j]) / T{255};
  }
  std::vector<unsigned char> lbl(n);
  detail::read_exact(fl, lbl.data(), lbl.size(), lbl_path.string());
  for (std::uint32_t i = 0; i < n; ++i) set.labels[i] = lbl[i];
  set.validate();
  return set;
}

template <typename T>
void write_idx_dataset(const fs::path& dir, const LabeledImageSet<T>& set, const std::string& split) {
  fs::create_directories(dir);
  const std::string prefix = split == "train" ? "train" : "t10k";
  const auto n = static_cast<std::uint32_t>(set.count());
  const auto h = static_cast<std::uint32_t>(set.images.dim(2));
  const auto w = static_cast<std::uint32_t>(set.images.dim(3));
  if (set.images.dim(1) != 1) throw ValidationError("IDX writer expects 1-channel images");

  std::ofstream fi(dir / (prefix + "-images-idx3-ubyte"), std::ios::binary);
  detail::write_be32(fi, 2051);
  detail::write_be32(fi, n);
  detail::write_be32(fi, h);
  detail::write_be32(fi, w);
  std::vector<unsigned char> row(static_cast<std::size_t>(h) * w);
  for (std::uint32_t i = 0; i < n; ++i) {
    const T* src = set.images.data() + static_cast<std::int64_t>(i) * h * w;
    for (std::size_t j = 0; j < row.size(); ++j)
      row[j] = static_cast<unsigned char>(std::lround(std::clamp(double(src[j]), 0.0, 1.0) * 255.0));
    detail::write_exact(fi, row.data(), row.size());
  }

  std::ofstream fl(dir / (prefix + "-labels-idx1-ubyte"), std::ios::binary);
  detail::write_be32(fl, 2049);
  detail::write_be32(fl, n);
  std::vector<unsigned char> lbl(n);
  for (std::uint32_t i = 0; i < n; ++i) lbl[i] = static_cast<unsigned char>(set.labels[i]);
  detail::write_exact(fl, lbl.data(), lbl.size());
}

// ---------------------------------------------------------------------------
// Image-set directory containers (images.bin + labels.bin/tags + meta)

template <typename T>
void save_image_set(const fs::path& dir, const UnlabeledImageSet<T>& set) {
  fs::create_directories(dir);
  write_f32_array(dir / "images.bin", set.images);
  std::ofstream meta(dir / "meta");
  meta << "kind=unlabeled\nname=" << set.name << "\nprovenance=" << to_string(set.provenance) << "\n";
  if (!set.tags.empty()) {
    std::ofstream tagf(dir / "tags");
    for (const auto& t : set.tags) tagf << t << "\n";
  }
}

template <typename T>
void save_image_set(const fs::path& dir, const LabeledImageSet<T>& set) {
  fs::create_directories(dir);
  write_f32_array(dir / "images.bin", set.images);
  write_i32_array(dir / "labels.bin", set.labels);
  std::ofstream meta(dir / "meta");
  meta << "kind=labeled\nname=" << set.name << "\nnum_classes=" << set.num_classes
       << "\ndigits=" << (set.digits ? 1 : 0) << "\n";
}

namespace detail {
inline std::map<std::string, std::string> read_kv_file(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw LoadError("missing file: " + path.string());
  std::map<std::string, std::string> kv;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw LoadError("malformed line in " + path.string() + ": " + line);
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return kv;
}
}  // namespace detail

template <typename T>
UnlabeledImageSet<T> load_unlabeled_dir(const fs::path& dir) {
  UnlabeledImageSet<T> set;
  set.images = read_f32_array<T>(dir / "images.bin");
  if (fs::exists(dir / "meta")) {
    auto kv = detail::read_kv_file(dir / "meta");
    if (kv.count("name")) set.name = kv["name"];
    if (kv.count("provenance")) set.provenance = provenance_from_string(kv["provenance"]);
  }
  if (set.name.empty()) set.name = dir.filename().string();
  if (fs::exists(dir / "tags")) {
    std::ifstream tagf(dir / "tags");
    std::string line;
    while (std::getline(tagf, line))
      if (!line.empty()) set.tags.push_back(line);
  }
  set.validate();
  return set;
}

template <typename T>
LabeledImageSet<T> load_labeled_dir(const fs::path& dir) {
  LabeledImageSet<T> set;
  set.images = read_f32_array<T>(dir / "images.bin");
  set.labels = read_i32_array(dir / "labels.bin");
  auto kv = detail::read_kv_file(dir / "meta");
  set.name = kv.count("name") ? kv["name"] : dir.filename().string();
  set.num_classes = kv.count("num_classes") ? std::stoi(kv["num_classes"]) : 0;
  set.digits = kv.count("digits") && kv["digits"] == "1";
  set.validate();
  return set;
}

// ---------------------------------------------------------------------------
// load_dataset: builtin generators or on-disk sources

template <typename T>
LabeledImageSet<T> load_dataset(const std::string& source, const std::string& split) {
  if (split != "train" && split != "test") throw ConfigError("split must be train or test");
  const std::uint64_t split_salt = split == "train" ? 1 : 2;

  auto builtin = [&](const std::string& prefix) -> std::optional<std::string> {
    if (source.rfind(prefix + ":", 0) == 0) return source.substr(prefix.size() + 1);
    if (source == prefix) return std::string{};
    return std::nullopt;
  };

  if (auto args = builtin("blobs")) {
    auto kv = detail::parse_kv_list(*args);
    return make_blobs<T>(detail::kv_int(kv, "classes", 2), detail::kv_int(kv, "count", 512),
                         detail::kv_int(kv, "size", 8), detail::kv_int(kv, "channels", 1),
                         static_cast<std::uint64_t>(detail::kv_int(kv, "seed", 0)) * 10 + split_salt,
                         source + ":" + split);
  }
  if (auto args = builtin("digits")) {
    auto kv = detail::parse_kv_list(*args);
    return make_digits<T>(detail::kv_int(kv, "count", 2000), detail::kv_int(kv, "size", 28),
                          static_cast<std::uint64_t>(detail::kv_int(kv, "seed", 0)) * 10 + split_salt,
                          source + ":" + split);
  }

  const fs::path dir(source);
  if (!fs::exists(dir)) throw LoadError("dataset source does not exist: " + source);
  if (fs::exists(dir / (std::string(split == "train" ? "train" : "t10k") + "-images-idx3-ubyte")))
    return load_idx_dataset<T>(dir, split);
  if (fs::exists(dir / split / "images.bin")) return load_labeled_dir<T>(dir / split);
  if (fs::exists(dir / "images.bin")) return load_labeled_dir<T>(dir);
  throw LoadError("unrecognized dataset layout under: " + source);
}

// ---------------------------------------------------------------------------
// Distilled-set initialization

template <typename T>
DistilledSet<T> init_distilled(const LabeledImageSet<T>& t_in, const UnlabeledImageSet<T>& t_out,
                               std::int32_t ipc, std::int64_t outlier_count, std::uint64_t rng_seed) {
  if (ipc < 1) throw ValidationError("init_distilled: ipc must be >= 1");
  if (outlier_count < 0) throw ValidationError("init_distilled: negative outlier_count");
  if (outlier_count > t_out.count())
    throw ValidationError("init_distilled: outlier_count " + std::to_string(outlier_count) +
                          " exceeds |t_out| = " + std::to_string(t_out.count()));
  t_in.validate();

  const Shape img = t_in.image_shape();
  const std::int64_t pix = img[0] * img[1] * img[2];
  DistilledSet<T> s;
  s.ipc = ipc;
  s.num_classes = t_in.num_classes;
  s.rng_seed = rng_seed;
  s.s_in_images = Tensor<T>{Shape{std::int64_t(t_in.num_classes) * ipc, img[0], img[1], img[2]}};
  s.s_in_labels.resize(static_cast<std::size_t>(s.s_in_images.dim(0)));

  Rng root(rng_seed);
  Rng rin = root.stream("init-in");
  const auto per_class = t_in.indices_by_class();
  std::int64_t row = 0;
  for (std::int32_t c = 0; c < t_in.num_classes; ++c) {
    const auto& pool = per_class[static_cast<std::size_t>(c)];
    if (static_cast<std::int64_t>(pool.size()) < ipc)
      throw ValidationError("init_distilled: class " + std::to_string(c) + " has " +
                            std::to_string(pool.size()) + " samples < ipc " + std::to_string(ipc));
    auto pick = rin.sample_without_replacement(static_cast<std::int64_t>(pool.size()), ipc);
    for (auto k : pick) {
      const std::int64_t src = pool[static_cast<std::size_t>(k)];
      std::copy_n(t_in.images.data() + src * pix, pix, s.s_in_images.data() + row * pix);
      s.s_in_labels[static_cast<std::size_t>(row)] = c;
      ++row;
    }
  }

  s.s_out_images = Tensor<T>{Shape{outlier_count, img[0], img[1], img[2]}};
  if (outlier_count > 0) {
    if (t_out.count() > 0 && t_out.image_shape() != img)
      throw ValidationError("init_distilled: outlier shape " + shape_str(t_out.image_shape()) +
                            " != InD shape " + shape_str(img));
    Rng rout = root.stream("init-out");
    const bool tagged =
        t_out.provenance == OutlierProvenance::pseudo_corruption && !t_out.tags.empty();
    if (tagged) {
      // Round-robin across corruption tags, sampling without replacement
      // inside each tag group; each row records its tag.
      std::vector<std::string> tag_order;
      std::map<std::string, std::vector<std::int64_t>> groups;
      for (std::int64_t i = 0; i < t_out.count(); ++i) {
        const auto& tg = t_out.tags[static_cast<std::size_t>(i)];
        if (!groups.count(tg)) tag_order.push_back(tg);
        groups[tg].push_back(i);
      }
      for (auto& [tg, g] : groups) {
        auto perm = rout.stream("tag-" + tg).permutation(static_cast<std::int64_t>(g.size()));
        std::vector<std::int64_t> shuffled(g.size());
        for (std::size_t k = 0; k < g.size(); ++k) shuffled[k] = g[static_cast<std::size_t>(perm[k])];
        g = std::move(shuffled);
      }
      std::map<std::string, std::size_t> used;
      s.corruption_assignment.resize(static_cast<std::size_t>(outlier_count));
      for (std::int64_t i = 0; i < outlier_count; ++i) {
        // preferred tag i mod |tags|; fall back to the least-used non-empty group
        std::string tg = tag_order[static_cast<std::size_t>(i % static_cast<std::int64_t>(tag_order.size()))];
        if (used[tg] >= groups[tg].size()) {
          std::size_t best_left = 0;
          for (const auto& cand : tag_order) {
            const std::size_t left = groups[cand].size() - used[cand];
            if (left > best_left) {
              best_left = left;
              tg = cand;
            }
          }
          if (best_left == 0) throw ValidationError("init_distilled: outlier pool exhausted");
        }
        const std::int64_t src = groups[tg][used[tg]++];
        std::copy_n(t_out.images.data() + src * pix, pix, s.s_out_images.data() + i * pix);
        s.corruption_assignment[static_cast<std::size_t>(i)] = tg;
      }
    } else {
      auto pick = rout.sample_without_replacement(t_out.count(), outlier_count);
      for (std::int64_t i = 0; i < outlier_count; ++i)
        std::copy_n(t_out.images.data() + pick[static_cast<std::size_t>(i)] * pix, pix,
                    s.s_out_images.data() + i * pix);
    }
  }
  s.outlier_mode = outlier_count > 0
                       ? (t_out.provenance == OutlierProvenance::pseudo_corruption ? "poe" : "oe")
                       : "none";
  s.validate();
  return s;
}

// ---------------------------------------------------------------------------
// Distilled-set container (manifest + s_in.bin + s_out.bin + s_in_labels.bin)

template <typename T>
void save_distilled(const DistilledSet<T>& s, const fs::path& dir,
                    const std::map<std::string, std::string>& extra = {}) {
  s.validate();
  fs::create_directories(dir);
  {
    std::ofstream m(dir / "manifest");
    if (!m) throw LoadError("cannot write manifest in " + dir.string());
    const Shape img = s.image_shape();
    m << "format_version=1\n";
    m << "method=" << s.method << "\n";
    m << "outlier_mode=" << s.outlier_mode << "\n";
    m << "ipc=" << s.ipc << "\n";
    m << "num_classes=" << s.num_classes << "\n";
    m << "shape=" << img[0] << "," << img[1] << "," << img[2] << "\n";
    m << "rng_seed=" << s.rng_seed << "\n";
    m << "corruption_assignment=";
    if (s.corruption_assignment.empty()) {
      m << "none";
    } else {
      for (std::size_t i = 0; i < s.corruption_assignment.size(); ++i) {
        if (i) m << ",";
        m << s.corruption_assignment[i];
      }
    }
    m << "\n";
    for (const auto& [k, v] : extra) m << k << "=" << v << "\n";
  }
  write_f32_array(dir / "s_in.bin", s.s_in_images);
  write_f32_array(dir / "s_out.bin", s.s_out_images);
  write_i32_array(dir / "s_in_labels.bin", s.s_in_labels);
}

template <typename T>
DistilledSet<T> load_distilled(const fs::path& dir) {
  auto kv = detail::read_kv_file(dir / "manifest");
  for (const auto& [k, v] : kv) {
    static const char* known[] = {"format_version", "method", "outlier_mode",
                                  "ipc",            "num_classes", "shape",
                                  "rng_seed",       "corruption_assignment", "config_checksum"};
    bool ok = false;
    for (auto* kk : known) ok = ok || k == kk;
    if (!ok) throw LoadError("unknown manifest key '" + k + "' in " + dir.string());
  }
  if (!kv.count("format_version") || kv["format_version"] != "1")
    throw Error("incompatible distilled-set format_version " +
                (kv.count("format_version") ? kv["format_version"] : "<missing>") + " in " +
                dir.string() + " (expected 1)");
  DistilledSet<T> s;
  s.method = kv.at("method");
  s.outlier_mode = kv.at("outlier_mode");
  s.ipc = std::stoi(kv.at("ipc"));
  s.num_classes = std::stoi(kv.at("num_classes"));
  s.rng_seed = std::stoull(kv.at("rng_seed"));
  if (kv.at("corruption_assignment") != "none") {
    std::stringstream ss(kv.at("corruption_assignment"));
    std::string item;
    while (std::getline(ss, item, ',')) s.corruption_assignment.push_back(item);
  }
  s.s_in_images = read_f32_array<T>(dir / "s_in.bin");
  s.s_out_images = read_f32_array<T>(dir / "s_out.bin");
  s.s_in_labels = read_i32_array(dir / "s_in_labels.bin");
  std::stringstream ss(kv.at("shape"));
  std::string item;
  Shape want;
  while (std::getline(ss, item, ',')) want.push_back(std::stoll(item));
  if (s.image_shape() != want)
    throw ValidationError("distilled container: array shape disagrees with manifest in " +
                          dir.string());
  s.validate();
  return s;
}

// ---------------------------------------------------------------------------
// Bilinear resize (half-pixel centers); used to adapt mismatched OOD test
// sets to the InD image size.
template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& images, std::int64_t out_h, std::int64_t out_w) {
  const std::int64_t n = images.dim(0), c = images.dim(1), h = images.dim(2), w = images.dim(3);
  Tensor<T> out{Shape{n, c, out_h, out_w}};
  const double sy = static_cast<double>(h) / out_h, sx = static_cast<double>(w) / out_w;
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t ch = 0; ch < c; ++ch)
      for (std::int64_t y = 0; y < out_h; ++y)
        for (std::int64_t x = 0; x < out_w; ++x) {
          const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, double(h - 1));
          const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, double(w - 1));
          const auto y0 = static_cast<std::int64_t>(fy), x0 = static_cast<std::int64_t>(fx);
          const std::int64_t y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
          const double dy = fy - y0, dx = fx - x0;
          const double v = double(images.at4(i, ch, y0, x0)) * (1 - dy) * (1 - dx) +
                           double(images.at4(i, ch, y0, x1)) * (1 - dy) * dx +
                           double(images.at4(i, ch, y1, x0)) * dy * (1 - dx) +
                           double(images.at4(i, ch, y1, x1)) * dy * dx;
          out.at4(i, ch, y, x) = static_cast<T>(v);
        }
  return out;
}

// Seeded subset selection helpers used by the evaluation harness.
template <typename T>
Tensor<T> take_rows(const Tensor<T>& images, const std::vector<std::int64_t>& rows) {
  Shape s = images.shape();
  const std::int64_t pix = s[1] * s[2] * s[3];
  Tensor<T> out{Shape{static_cast<std::int64_t>(rows.size()), s[1], s[2], s[3]}};
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy_n(images.data() + rows[i] * pix, pix, out.data() + static_cast<std::int64_t>(i) * pix);
  return out;
}

}  // namespace trustdd
