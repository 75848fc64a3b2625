#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "trustdd/autodiff.hpp"
#include "trustdd/common.hpp"
#include "trustdd/rng.hpp"
#include "trustdd/tensor.hpp"

// Differentiable siamese augmentation A(.). One transform is selected per
// draw and its parameters are shared across every batch the draw is applied
// to (the siamese contract); every transform is differentiable w.r.t. pixels.

namespace trustdd {

enum class AugmentKind { crop, cutout, scale, rotate, brightness, saturation, contrast };

inline std::string to_string(AugmentKind k) {
  switch (k) {
    case AugmentKind::crop: return "crop";
    case AugmentKind::cutout: return "cutout";
    case AugmentKind::scale: return "scale";
    case AugmentKind::rotate: return "rotate";
    case AugmentKind::brightness: return "brightness";
    case AugmentKind::saturation: return "saturation";
    case AugmentKind::contrast: return "contrast";
  }
  return "?";
}

inline AugmentKind augment_from_string(const std::string& s) {
  if (s == "crop" || s == "crop-with-pad") return AugmentKind::crop;
  if (s == "cutout") return AugmentKind::cutout;
  if (s == "scale") return AugmentKind::scale;
  if (s == "rotate") return AugmentKind::rotate;
  if (s == "brightness") return AugmentKind::brightness;
  if (s == "saturation") return AugmentKind::saturation;
  if (s == "contrast") return AugmentKind::contrast;
  throw ConfigError("unknown (or non-differentiable) augmentation: " + s);
}

struct AugmentPolicy {
  std::vector<AugmentKind> transforms;  // empty = identity
  double crop_ratio = 0.125;
  double cutout_ratio = 0.5;
  double scale_ratio = 1.2;
  double rotate_degrees = 15.0;
  double brightness = 1.0;
  double saturation = 2.0;
  double contrast = 0.5;

  static AugmentPolicy digits_default() {
    AugmentPolicy p;
    p.transforms = {AugmentKind::crop, AugmentKind::scale, AugmentKind::rotate};
    return p;
  }
  static AugmentPolicy color_default() {
    AugmentPolicy p;
    p.transforms = {AugmentKind::crop, AugmentKind::cutout, AugmentKind::scale, AugmentKind::rotate,
                    AugmentKind::brightness, AugmentKind::saturation, AugmentKind::contrast};
    return p;
  }
};

// A sampled parameter record; applying the same draw to two batches uses
// identical transform parameters.
struct SharedDraw {
  int selected = -1;  // index into policy.transforms; -1 = identity
  int crop_dx = 0, crop_dy = 0;
  std::int64_t cutout_cy = 0, cutout_cx = 0;
  double sx = 1.0, sy = 1.0;
  double angle = 0.0;
  double bright_shift = 0.0;
  double sat_factor = 1.0;
  double contrast_factor = 1.0;
};

inline SharedDraw sample_shared_draw(const AugmentPolicy& policy, const Shape& image_shape,
                                     Rng& rng) {
  SharedDraw d;
  if (policy.transforms.empty()) return d;
  const std::int64_t h = image_shape.at(1), w = image_shape.at(2);
  d.selected = static_cast<int>(rng.index(static_cast<std::int64_t>(policy.transforms.size())));
  const int pad_y = static_cast<int>(std::lround(double(h) * policy.crop_ratio));
  const int pad_x = static_cast<int>(std::lround(double(w) * policy.crop_ratio));
  d.crop_dy = static_cast<int>(rng.below(static_cast<std::uint64_t>(2 * pad_y + 1))) - pad_y;
  d.crop_dx = static_cast<int>(rng.below(static_cast<std::uint64_t>(2 * pad_x + 1))) - pad_x;
  d.cutout_cy = rng.index(h);
  d.cutout_cx = rng.index(w);
  const double inv = 1.0 / policy.scale_ratio;
  d.sx = rng.uniform(inv, policy.scale_ratio);
  d.sy = rng.uniform(inv, policy.scale_ratio);
  d.angle = rng.uniform(-policy.rotate_degrees, policy.rotate_degrees) * M_PI / 180.0;
  d.bright_shift = (rng.uniform() - 0.5) * policy.brightness;
  d.sat_factor = rng.uniform() * policy.saturation;
  d.contrast_factor = 0.5 + rng.uniform() * policy.contrast;
  return d;
}

namespace detail {

// translation with zero padding, one map per (batch shape, offset)
template <typename T>
std::shared_ptr<const ad::LinearMap<T>> translate_map(const Shape& s, int dy, int dx) {
  const std::int64_t n = s[0], c = s[1], h = s[2], w = s[3];
  auto map = std::make_shared<ad::LinearMap<T>>();
  map->in_size = map->out_size = n * c * h * w;
  map->fanin = 1;
  map->idx.resize(static_cast<std::size_t>(map->out_size));
  std::int64_t o = 0;
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t ch = 0; ch < c; ++ch)
      for (std::int64_t y = 0; y < h; ++y)
        for (std::int64_t x = 0; x < w; ++x, ++o) {
          const std::int64_t sy = y - dy, sx = x - dx;
          map->idx[static_cast<std::size_t>(o)] =
              (sy >= 0 && sy < h && sx >= 0 && sx < w)
                  ? static_cast<std::int32_t>(((i * c + ch) * h + sy) * w + sx)
                  : -1;
        }
  return map;
}

// affine warp (scale about center then rotate) with bilinear sampling
template <typename T>
std::shared_ptr<const ad::LinearMap<T>> warp_map(const Shape& s, double sx, double sy,
                                                 double angle) {
  const std::int64_t n = s[0], c = s[1], h = s[2], w = s[3];
  auto map = std::make_shared<ad::LinearMap<T>>();
  map->in_size = map->out_size = n * c * h * w;
  map->fanin = 4;
  map->idx.assign(static_cast<std::size_t>(map->out_size) * 4, -1);
  map->w.assign(static_cast<std::size_t>(map->out_size) * 4, T{0});
  const double cy = (h - 1) / 2.0, cx = (w - 1) / 2.0;
  const double ca = std::cos(angle), sa = std::sin(angle);
  // per-pixel source coordinates are shared across images and channels
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x) {
      const double ry = (y - cy), rx = (x - cx);
      const double uy = cy + sy * (ca * ry - sa * rx);
      const double ux = cx + sx * (sa * ry + ca * rx);
      const auto fy = std::floor(uy), fx = std::floor(ux);
      const double dy = uy - fy, dx = ux - fx;
      const std::int64_t y0 = static_cast<std::int64_t>(fy), x0 = static_cast<std::int64_t>(fx);
      const double wgt[4] = {(1 - dy) * (1 - dx), (1 - dy) * dx, dy * (1 - dx), dy * dx};
      const std::int64_t yy[4] = {y0, y0, y0 + 1, y0 + 1};
      const std::int64_t xx[4] = {x0, x0 + 1, x0, x0 + 1};
      for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t ch = 0; ch < c; ++ch) {
          const std::int64_t o = (((i * c + ch) * h + y) * w + x) * 4;
          for (int k = 0; k < 4; ++k) {
            if (yy[k] < 0 || yy[k] >= h || xx[k] < 0 || xx[k] >= w) continue;
            map->idx[static_cast<std::size_t>(o + k)] =
                static_cast<std::int32_t>(((i * c + ch) * h + yy[k]) * w + xx[k]);
            map->w[static_cast<std::size_t>(o + k)] = static_cast<T>(wgt[k]);
          }
        }
    }
  return map;
}

// permutation NCHW -> (N*H*W, C) rows, shared by the saturation transform
template <typename T>
std::shared_ptr<const ad::LinearMap<T>> channels_last_map(const Shape& s) {
  const std::int64_t n = s[0], c = s[1], h = s[2], w = s[3];
  auto map = std::make_shared<ad::LinearMap<T>>();
  map->in_size = map->out_size = n * c * h * w;
  map->fanin = 1;
  map->idx.resize(static_cast<std::size_t>(map->out_size));
  std::int64_t o = 0;
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t p = 0; p < h * w; ++p)
      for (std::int64_t ch = 0; ch < c; ++ch, ++o)
        map->idx[static_cast<std::size_t>(o)] = static_cast<std::int32_t>((i * c + ch) * h * w + p);
  return map;
}

}  // namespace detail

template <typename T>
ad::Var<T> diff_augment(const ad::Var<T>& batch, const AugmentPolicy& policy, const SharedDraw& draw) {
  if (draw.selected < 0 || policy.transforms.empty()) return batch;
  const Shape s = batch.value().shape();
  if (s.size() != 4) throw ValidationError("diff_augment: batch must be (n,c,h,w)");
  const std::int64_t n = s[0], c = s[1], h = s[2], w = s[3];
  if (n == 0) return batch;
  const AugmentKind kind = policy.transforms.at(static_cast<std::size_t>(draw.selected));

  switch (kind) {
    case AugmentKind::crop:
      return ad::apply_map(batch, detail::translate_map<T>(s, draw.crop_dy, draw.crop_dx), s);
    case AugmentKind::scale:
      return ad::apply_map(batch, detail::warp_map<T>(s, draw.sx, draw.sy, 0.0), s);
    case AugmentKind::rotate:
      return ad::apply_map(batch, detail::warp_map<T>(s, 1.0, 1.0, draw.angle), s);
    case AugmentKind::cutout: {
      const std::int64_t side = std::llround(double(h) * policy.cutout_ratio);
      const std::int64_t half = side / 2;
      Tensor<T> mask{s, T{1}};
      for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t ch = 0; ch < c; ++ch)
          for (std::int64_t y = std::max<std::int64_t>(0, draw.cutout_cy - half);
               y < std::min<std::int64_t>(h, draw.cutout_cy + half); ++y)
            for (std::int64_t x = std::max<std::int64_t>(0, draw.cutout_cx - half);
                 x < std::min<std::int64_t>(w, draw.cutout_cx + half); ++x)
              mask.at4(i, ch, y, x) = T{0};
      return ad::mul(batch, ad::Var<T>::constant(mask));
    }
    case AugmentKind::brightness:
      return ad::clip01(ad::add_scalar(batch, static_cast<T>(draw.bright_shift)));
    case AugmentKind::saturation: {
      if (c == 1) return batch;  // grayscale: channel mean equals the pixel
      auto perm = detail::channels_last_map<T>(s);
      auto xp = ad::reshape(ad::apply_map(ad::reshape(batch, {n * c * h * w}), perm,
                                          Shape{n * h * w, c}),
                            {n * h * w, c});
      auto m = ad::scale(ad::row_sum(xp), T{1} / static_cast<T>(c));
      auto adjusted = ad::add_bcol(ad::scale(ad::sub_bcol(xp, m), static_cast<T>(draw.sat_factor)), m);
      return ad::reshape(
          ad::apply_map(ad::reshape(adjusted, {n * c * h * w}), perm, Shape{n * c * h * w}, true), s);
    }
    case AugmentKind::contrast: {
      auto x2 = ad::reshape(batch, {n, c * h * w});
      auto m = ad::scale(ad::row_sum(x2), T{1} / static_cast<T>(c * h * w));
      auto adjusted =
          ad::add_bcol(ad::scale(ad::sub_bcol(x2, m), static_cast<T>(draw.contrast_factor)), m);
      return ad::reshape(adjusted, s);
    }
  }
  throw Error("diff_augment: unreachable");
}

}  // namespace trustdd
