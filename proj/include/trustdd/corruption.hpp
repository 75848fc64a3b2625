#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "trustdd/common.hpp"
#include "trustdd/dataset.hpp"
#include "trustdd/rng.hpp"
#include "trustdd/tensor.hpp"

// Pseudo-outlier synthesis: semantic-shifting corruptions of in-distribution
// images, plus noise sources for the OE-style ablations. Every function is a
// pure map of (input, rng state); batch generation derives one child stream
// per output item.

namespace trustdd {

enum class Corruption { jigsaw, invert, mosaic, speckle, flip };

inline std::string to_string(Corruption c) {
  switch (c) {
    case Corruption::jigsaw: return "jigsaw";
    case Corruption::invert: return "invert";
    case Corruption::mosaic: return "mosaic";
    case Corruption::speckle: return "speckle";
    case Corruption::flip: return "flip";
  }
  return "?";
}

inline Corruption corruption_from_string(const std::string& s) {
  if (s == "jigsaw") return Corruption::jigsaw;
  if (s == "invert") return Corruption::invert;
  if (s == "mosaic") return Corruption::mosaic;
  if (s == "speckle") return Corruption::speckle;
  if (s == "flip") return Corruption::flip;
  throw ConfigError("unknown corruption: " + s);
}

struct CorruptionConfig {
  std::vector<Corruption> enabled = {Corruption::jigsaw, Corruption::invert, Corruption::mosaic,
                                     Corruption::speckle};
  // grids yielding 6 or 8 patches
  std::vector<std::pair<int, int>> jigsaw_grids = {{2, 3}, {3, 2}, {2, 4}, {4, 2}};
  // 0 = derive from image size: (min_side/8, min_side/4), clamped to >= 2
  int mosaic_min_block = 0;
  int mosaic_max_block = 0;
  bool speckle_gaussian = false;  // default is the literal rand_like (uniform [0,1))
  std::set<std::int32_t> flip_h_excluded = {0, 1, 8};
  std::set<std::int32_t> flip_v_excluded = {0, 1, 3, 8};
  std::uint64_t rng_seed = 0;

  void validate() const {
    if (enabled.empty()) throw ConfigError("corruption config: enabled set is empty");
    for (const auto& [r, c] : jigsaw_grids)
      if (r * c != 6 && r * c != 8)
        throw ConfigError("corruption config: jigsaw grid " + std::to_string(r) + "x" +
                          std::to_string(c) + " does not yield 6 or 8 patches");
    if (mosaic_min_block > mosaic_max_block)
      throw ConfigError("corruption config: mosaic block range is inverted");
  }
};

namespace detail {

// views one image (c,h,w) inside a batch tensor
template <typename T>
struct ImageView {
  T* data;
  std::int64_t c, h, w;
  T& at(std::int64_t ch, std::int64_t y, std::int64_t x) { return data[(ch * h + y) * w + x]; }
  T at(std::int64_t ch, std::int64_t y, std::int64_t x) const { return data[(ch * h + y) * w + x]; }
  std::int64_t pixels() const { return c * h * w; }
};

}  // namespace detail

// Shuffle a rows x cols patch grid by a given permutation. Exposed so tests
// can pin the permutation; the tiled region is the centered largest
// grid-divisible window and is pasted back over a copy of the input.
template <typename T>
Tensor<T> jigsaw_with(const Tensor<T>& image, int rows, int cols,
                      const std::vector<int>& perm) {
  const auto& s = image.shape();
  if (s.size() != 3) throw ValidationError("jigsaw: expected (c,h,w) image");
  const std::int64_t c = s[0], h = s[1], w = s[2];
  if (h < rows || w < cols)
    throw CorruptionError("jigsaw: image " + std::to_string(h) + "x" + std::to_string(w) +
                          " smaller than grid " + std::to_string(rows) + "x" + std::to_string(cols));
  if (static_cast<int>(perm.size()) != rows * cols) throw ValidationError("jigsaw: bad permutation");
  const std::int64_t th = (h / rows) * rows, tw = (w / cols) * cols;
  const std::int64_t oy = (h - th) / 2, ox = (w - tw) / 2;
  const std::int64_t ph = th / rows, pw = tw / cols;

  Tensor<T> out = image.clone();
  for (int p = 0; p < rows * cols; ++p) {
    const int src = perm[static_cast<std::size_t>(p)];
    const std::int64_t dy = oy + (p / cols) * ph, dx = ox + (p % cols) * pw;
    const std::int64_t sy = oy + (src / cols) * ph, sx = ox + (src % cols) * pw;
    for (std::int64_t ch = 0; ch < c; ++ch)
      for (std::int64_t y = 0; y < ph; ++y)
        for (std::int64_t x = 0; x < pw; ++x)
          out[(ch * h + dy + y) * w + dx + x] = image[(ch * h + sy + y) * w + sx + x];
  }
  return out;
}

template <typename T>
Tensor<T> jigsaw(const Tensor<T>& image, const CorruptionConfig& cfg, Rng& rng) {
  const auto& grid = cfg.jigsaw_grids[static_cast<std::size_t>(
      rng.index(static_cast<std::int64_t>(cfg.jigsaw_grids.size())))];
  const int n = grid.first * grid.second;
  // uniformly random non-identity permutation
  std::vector<int> perm;
  do {
    auto p = rng.permutation(n);
    perm.assign(p.begin(), p.end());
  } while (std::is_sorted(perm.begin(), perm.end()));
  return jigsaw_with(image, grid.first, grid.second, perm);
}

// Invert the given channel subset: out[c] = 1 - in[c].
template <typename T>
Tensor<T> invert_with(const Tensor<T>& image, const std::set<std::int64_t>& channels) {
  const auto& s = image.shape();
  if (s.size() != 3) throw ValidationError("invert: expected (c,h,w) image");
  const std::int64_t c = s[0], hw = s[1] * s[2];
  Tensor<T> out = image.clone();
  for (auto ch : channels) {
    if (ch < 0 || ch >= c) throw ValidationError("invert: channel out of range");
    for (std::int64_t i = 0; i < hw; ++i) out[ch * hw + i] = T{1} - image[ch * hw + i];
  }
  return out;
}

// Uniform over the 2^C - 1 non-empty channel subsets; returns the subset so
// callers can record or undo it.
template <typename T>
std::pair<Tensor<T>, std::set<std::int64_t>> invert(const Tensor<T>& image, Rng& rng) {
  const std::int64_t c = image.shape().at(0);
  const std::uint64_t mask = 1 + rng.below((1ull << c) - 1);
  std::set<std::int64_t> channels;
  for (std::int64_t ch = 0; ch < c; ++ch)
    if ((mask >> ch) & 1) channels.insert(ch);
  return {invert_with(image, channels), channels};
}

// Piecewise-constant b x b block means; edge blocks average their actual extent.
template <typename T>
Tensor<T> mosaic_with(const Tensor<T>& image, int b) {
  const auto& s = image.shape();
  if (s.size() != 3) throw ValidationError("mosaic: expected (c,h,w) image");
  const std::int64_t c = s[0], h = s[1], w = s[2];
  if (b > h && b > w)
    throw CorruptionError("mosaic: block " + std::to_string(b) + " larger than both image dims");
  if (b < 1) throw CorruptionError("mosaic: block must be >= 1");
  Tensor<T> out{image.shape()};
  for (std::int64_t ch = 0; ch < c; ++ch)
    for (std::int64_t y0 = 0; y0 < h; y0 += b)
      for (std::int64_t x0 = 0; x0 < w; x0 += b) {
        const std::int64_t y1 = std::min<std::int64_t>(y0 + b, h), x1 = std::min<std::int64_t>(x0 + b, w);
        double acc = 0;
        for (std::int64_t y = y0; y < y1; ++y)
          for (std::int64_t x = x0; x < x1; ++x) acc += double(image[(ch * h + y) * w + x]);
        const T mean = static_cast<T>(acc / double((y1 - y0) * (x1 - x0)));
        for (std::int64_t y = y0; y < y1; ++y)
          for (std::int64_t x = x0; x < x1; ++x) out[(ch * h + y) * w + x] = mean;
      }
  return out;
}

template <typename T>
Tensor<T> mosaic(const Tensor<T>& image, const CorruptionConfig& cfg, Rng& rng) {
  const std::int64_t h = image.shape().at(1), w = image.shape().at(2);
  int lo = cfg.mosaic_min_block, hi = cfg.mosaic_max_block;
  if (lo == 0 || hi == 0) {
    const auto min_side = std::min(h, w);
    lo = std::max<int>(2, static_cast<int>(min_side / 8));
    hi = std::max<int>(lo, static_cast<int>(min_side / 4));
  }
  const int b = lo + static_cast<int>(rng.below(static_cast<std::uint64_t>(hi - lo + 1)));
  return mosaic_with(image, b);
}

// out = clip(in + in .* U, 0, 1); dominates the input pointwise by design of
// the formula.
template <typename T>
Tensor<T> speckle(const Tensor<T>& image, const CorruptionConfig& cfg, Rng& rng) {
  Tensor<T> out{image.shape()};
  for (std::int64_t i = 0; i < image.size(); ++i) {
    const double u = cfg.speckle_gaussian ? std::abs(rng.normal()) : rng.uniform();
    const double v = double(image[i]) + double(image[i]) * u;
    out[i] = static_cast<T>(std::clamp(v, 0.0, 1.0));
  }
  return out;
}

template <typename T>
Tensor<T> flip_image(const Tensor<T>& image, bool horizontal) {
  const auto& s = image.shape();
  const std::int64_t c = s[0], h = s[1], w = s[2];
  Tensor<T> out{image.shape()};
  for (std::int64_t ch = 0; ch < c; ++ch)
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < w; ++x)
        out[(ch * h + y) * w + x] =
            horizontal ? image[(ch * h + y) * w + (w - 1 - x)] : image[(ch * h + (h - 1 - y)) * w + x];
  return out;
}

// Digit flip: orientation chosen uniformly; returns nothing when the label's
// semantics survive that flip (0/1/8 horizontally, 0/1/3/8 vertically).
template <typename T>
std::optional<Tensor<T>> flip_digit(const Tensor<T>& image, std::int32_t label,
                                    const CorruptionConfig& cfg, Rng& rng, bool dataset_is_digits) {
  if (!dataset_is_digits)
    throw ConfigError("flip corruption requires a digit-flagged dataset");
  const bool horizontal = rng.coin();
  const auto& excluded = horizontal ? cfg.flip_h_excluded : cfg.flip_v_excluded;
  if (excluded.count(label)) return std::nullopt;
  return flip_image(image, horizontal);
}

namespace detail {
template <typename T>
Tensor<T> image_slice(const Tensor<T>& batch, std::int64_t i) {
  const std::int64_t c = batch.dim(1), h = batch.dim(2), w = batch.dim(3);
  Tensor<T> img{Shape{c, h, w}};
  std::copy_n(batch.data() + i * c * h * w, c * h * w, img.data());
  return img;
}
}  // namespace detail

// Ensemble synthesis: each output samples a source image uniformly and applies
// exactly one enabled corruption chosen uniformly; inapplicable flips redraw
// the source (keeping the corruption) so the tag histogram stays uniform.
template <typename T>
UnlabeledImageSet<T> synthesize_outliers(const LabeledImageSet<T>& t_in, const CorruptionConfig& cfg,
                                         std::int64_t count) {
  cfg.validate();
  if (count < 1) throw ValidationError("synthesize_outliers: count must be >= 1");
  if (t_in.count() == 0) throw ValidationError("synthesize_outliers: empty source set");
  bool any_applicable = false;
  for (auto c : cfg.enabled) any_applicable = any_applicable || (c != Corruption::flip || t_in.digits);
  if (!any_applicable)
    throw ConfigError("synthesize_outliers: no enabled corruption applies to this dataset "
                      "(flip requires digits)");

  const Shape img = t_in.image_shape();
  UnlabeledImageSet<T> out;
  out.images = Tensor<T>{Shape{count, img[0], img[1], img[2]}};
  out.name = t_in.name + ":pseudo-outliers";
  out.provenance = OutlierProvenance::pseudo_corruption;
  out.tags.resize(static_cast<std::size_t>(count));
  const std::int64_t pix = img[0] * img[1] * img[2];

  Rng root(cfg.rng_seed);
  for (std::int64_t i = 0; i < count; ++i) {
    Rng r = root.stream("item", static_cast<std::uint64_t>(i));
    Corruption kind = cfg.enabled[static_cast<std::size_t>(
        r.index(static_cast<std::int64_t>(cfg.enabled.size())))];
    if (kind == Corruption::flip && !t_in.digits)
      throw ConfigError("synthesize_outliers: flip drawn for a non-digit dataset");
    Tensor<T> result;
    for (int attempt = 0;; ++attempt) {
      if (attempt >= 10000)
        throw CorruptionError("synthesize_outliers: could not produce an applicable " +
                              to_string(kind) + " sample");
      const std::int64_t src = r.index(t_in.count());
      Tensor<T> source = detail::image_slice(t_in.images, src);
      switch (kind) {
        case Corruption::jigsaw: result = jigsaw(source, cfg, r); break;
        case Corruption::invert: result = invert(source, r).first; break;
        case Corruption::mosaic: result = mosaic(source, cfg, r); break;
        case Corruption::speckle: result = speckle(source, cfg, r); break;
        case Corruption::flip: {
          auto flipped = flip_digit(source, t_in.labels[static_cast<std::size_t>(src)], cfg, r,
                                    t_in.digits);
          if (!flipped) continue;
          result = *flipped;
          break;
        }
      }
      break;
    }
    std::copy_n(result.data(), pix, out.images.data() + i * pix);
    out.tags[static_cast<std::size_t>(i)] = to_string(kind);
  }
  out.validate();
  return out;
}

// Noise outliers: gaussian is sigma=0.5 around 0.5 clipped to [0,1];
// uniform is elementwise U[0,1).
template <typename T>
UnlabeledImageSet<T> noise_outliers(const std::string& kind, const Shape& image_shape,
                                    std::int64_t count, std::uint64_t rng_seed) {
  if (count < 1) throw ValidationError("noise_outliers: count must be >= 1");
  if (image_shape.size() != 3) throw ValidationError("noise_outliers: image shape must be (c,h,w)");
  UnlabeledImageSet<T> out;
  out.images = Tensor<T>{Shape{count, image_shape[0], image_shape[1], image_shape[2]}};
  out.name = kind + "-noise";
  Rng rng(rng_seed);
  if (kind == "gaussian") {
    out.provenance = OutlierProvenance::noise_gaussian;
    for (std::int64_t i = 0; i < out.images.size(); ++i)
      out.images[i] = static_cast<T>(std::clamp(0.5 + 0.5 * rng.normal(), 0.0, 1.0));
  } else if (kind == "uniform") {
    out.provenance = OutlierProvenance::noise_uniform;
    for (std::int64_t i = 0; i < out.images.size(); ++i)
      out.images[i] = static_cast<T>(rng.uniform());
  } else {
    throw ConfigError("noise_outliers: kind must be gaussian or uniform, got " + kind);
  }
  return out;
}

}  // namespace trustdd
