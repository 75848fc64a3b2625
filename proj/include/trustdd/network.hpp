#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "trustdd/augment.hpp"
#include "trustdd/autodiff.hpp"
#include "trustdd/common.hpp"
#include "trustdd/dataset.hpp"
#include "trustdd/losses.hpp"
#include "trustdd/rng.hpp"
#include "trustdd/tensor.hpp"

namespace trustdd {

// ConvNet blocks: 3x3 conv (pad 1) -> instance norm -> relu -> 2x2 average
// pool, stride 2; final fully-connected layer emits logits.
struct NetworkSpec {
  int depth = 3;
  int width = 128;
  std::int32_t num_classes = 10;
  Shape input_shape = {1, 28, 28};  // (c,h,w)
  bool norm_affine = false;
  double instance_norm_eps = 1e-5;

  void validate() const {
    if (depth < 1 || width < 1 || num_classes < 2) throw ConfigError("network spec: bad sizes");
    if (input_shape.size() != 3) throw ConfigError("network spec: input shape must be (c,h,w)");
    std::int64_t h = input_shape[1], w = input_shape[2];
    for (int d = 0; d < depth; ++d) {
      h /= 2;
      w /= 2;
    }
    if (h < 1 || w < 1)
      throw ConfigError("network spec: spatial size collapses below 1 after " +
                        std::to_string(depth) + " poolings");
  }

  std::pair<std::int64_t, std::int64_t> spatial_after(int blocks) const {
    std::int64_t h = input_shape[1], w = input_shape[2];
    for (int d = 0; d < blocks; ++d) {
      h /= 2;
      w /= 2;
    }
    return {h, w};
  }

  std::int64_t feature_count() const {
    auto [h, w] = spatial_after(depth);
    return std::int64_t(width) * h * w;
  }
};

struct LayoutEntry {
  std::string name;
  Shape shape;
  std::int64_t offset = 0;
  std::int64_t count() const { return shape_numel(shape); }
};

// Flat parameter state theta with a named layout; flatten/unflatten round
// trips bit-exactly.
template <typename T>
struct ParameterVector {
  std::vector<T> flat;
  std::vector<LayoutEntry> layout;

  std::int64_t size() const { return static_cast<std::int64_t>(flat.size()); }

  void validate() const {
    std::int64_t total = 0;
    for (const auto& e : layout) {
      if (e.offset != total) throw ValidationError("parameter layout has gaps");
      total += e.count();
    }
    if (total != size()) throw ValidationError("parameter layout does not cover the flat vector");
  }

  std::vector<Tensor<T>> unflatten() const {
    validate();
    std::vector<Tensor<T>> out;
    out.reserve(layout.size());
    for (const auto& e : layout) {
      Tensor<T> t{e.shape};
      std::copy_n(flat.data() + e.offset, e.count(), t.data());
      out.push_back(std::move(t));
    }
    return out;
  }

  static ParameterVector flatten(const std::vector<Tensor<T>>& tensors,
                                 const std::vector<LayoutEntry>& layout) {
    ParameterVector pv;
    pv.layout = layout;
    std::int64_t total = 0;
    for (const auto& e : layout) total += e.count();
    pv.flat.resize(static_cast<std::size_t>(total));
    if (tensors.size() != layout.size()) throw ValidationError("flatten: arity mismatch");
    for (std::size_t i = 0; i < layout.size(); ++i) {
      if (tensors[i].shape() != layout[i].shape) throw ValidationError("flatten: shape mismatch");
      std::copy_n(tensors[i].data(), layout[i].count(), pv.flat.data() + layout[i].offset);
    }
    return pv;
  }
};

template <typename T>
std::vector<LayoutEntry> network_layout(const NetworkSpec& spec) {
  spec.validate();
  std::vector<LayoutEntry> layout;
  std::int64_t offset = 0;
  auto push = [&](const std::string& name, Shape shape) {
    LayoutEntry e{name, std::move(shape), offset};
    offset += e.count();
    layout.push_back(std::move(e));
  };
  std::int64_t cin = spec.input_shape[0];
  for (int d = 0; d < spec.depth; ++d) {
    const std::string tag = std::to_string(d + 1);
    push("conv" + tag + ".weight", {spec.width, cin, 3, 3});
    push("conv" + tag + ".bias", {spec.width});
    if (spec.norm_affine) {
      push("in" + tag + ".scale", {spec.width});
      push("in" + tag + ".shift", {spec.width});
    }
    cin = spec.width;
  }
  push("fc.weight", {spec.num_classes, spec.feature_count()});
  push("fc.bias", {spec.num_classes});
  return layout;
}

// Fan-in scaled uniform initialization, deterministic under seed.
template <typename T>
ParameterVector<T> build_network(const NetworkSpec& spec, std::uint64_t rng_seed) {
  auto layout = network_layout<T>(spec);
  ParameterVector<T> pv;
  pv.layout = layout;
  std::int64_t total = 0;
  for (const auto& e : layout) total += e.count();
  pv.flat.resize(static_cast<std::size_t>(total));
  Rng root(rng_seed);
  for (const auto& e : layout) {
    Rng r = root.stream(e.name);
    double bound;
    if (e.shape.size() == 4)
      bound = 1.0 / std::sqrt(double(e.shape[1] * e.shape[2] * e.shape[3]));
    else if (e.shape.size() == 2)
      bound = 1.0 / std::sqrt(double(e.shape[1]));
    else if (e.name.find(".scale") != std::string::npos) {
      for (std::int64_t i = 0; i < e.count(); ++i) pv.flat[static_cast<std::size_t>(e.offset + i)] = T{1};
      continue;
    } else if (e.name.find(".shift") != std::string::npos) {
      continue;  // zeros
    } else {
      // conv/fc bias: same bound as its weight (fan-in of the layer)
      bound = 1.0 / std::sqrt(double(e.shape[0]));
      // overwritten below by the paired weight's fan-in when derivable
      for (const auto& other : pv.layout)
        if (other.name == e.name.substr(0, e.name.find('.')) + ".weight") {
          if (other.shape.size() == 4)
            bound = 1.0 / std::sqrt(double(other.shape[1] * other.shape[2] * other.shape[3]));
          else
            bound = 1.0 / std::sqrt(double(other.shape[1]));
        }
    }
    for (std::int64_t i = 0; i < e.count(); ++i)
      pv.flat[static_cast<std::size_t>(e.offset + i)] = static_cast<T>(r.uniform(-bound, bound));
  }
  return pv;
}

template <typename T>
std::vector<ad::Var<T>> to_vars(const ParameterVector<T>& pv, bool requires_grad) {
  std::vector<ad::Var<T>> vars;
  auto tensors = pv.unflatten();
  vars.reserve(tensors.size());
  for (auto& t : tensors) vars.push_back(ad::Var<T>::leaf(std::move(t), requires_grad));
  return vars;
}

template <typename T>
ParameterVector<T> from_vars(const std::vector<ad::Var<T>>& vars,
                             const std::vector<LayoutEntry>& layout) {
  std::vector<Tensor<T>> tensors;
  tensors.reserve(vars.size());
  for (const auto& v : vars) tensors.push_back(v.value());
  return ParameterVector<T>::flatten(tensors, layout);
}

// Forward evaluator with cached sparse maps. Instances are not synchronized:
// parallel trainings each own a ConvNet.
template <typename T>
class ConvNet {
 public:
  explicit ConvNet(NetworkSpec spec) : spec_(std::move(spec)) { spec_.validate(); }

  const NetworkSpec& spec() const { return spec_; }

  ad::Var<T> forward(const std::vector<ad::Var<T>>& params, const ad::Var<T>& images) const {
    const Shape s = images.value().shape();
    if (s.size() != 4 || Shape{s[1], s[2], s[3]} != spec_.input_shape)
      throw ValidationError("forward: image shape " + shape_str(s) + " does not match spec " +
                            shape_str(spec_.input_shape));
    const std::int64_t n = s[0];
    std::size_t p = 0;
    auto x = images;
    std::int64_t cin = spec_.input_shape[0], h = spec_.input_shape[1], w = spec_.input_shape[2];
    for (int d = 0; d < spec_.depth; ++d) {
      const auto& weight = params.at(p++);
      const auto& bias = params.at(p++);
      x = conv3x3(x, weight, bias, n, cin, h, w);
      x = instance_norm(x, n, spec_.width, h, w);
      if (spec_.norm_affine) {
        const auto& scale_v = params.at(p++);
        const auto& shift_v = params.at(p++);
        x = affine_per_channel(x, scale_v, shift_v, n, spec_.width, h, w);
      }
      x = ad::relu(x);
      x = avg_pool2(x, n, spec_.width, h, w);
      h /= 2;
      w /= 2;
      cin = spec_.width;
      check_finite(x, "conv block " + std::to_string(d + 1));
    }
    auto flat = ad::reshape(x, {n, spec_.feature_count()});
    const auto& fc_w = params.at(p++);
    const auto& fc_b = params.at(p++);
    auto logits = ad::add(ad::matmul_nt(flat, fc_w),
                          ad::broadcast_row(ad::reshape(fc_b, {1, spec_.num_classes}), n));
    check_finite(logits, "fc");
    return logits;
  }

  // plain-tensor convenience: no gradient bookkeeping
  Tensor<T> forward_logits(const ParameterVector<T>& pv, const Tensor<T>& images) const {
    auto params = to_vars(pv, false);
    return forward(params, ad::Var<T>::constant(images)).value();
  }

 private:
  static void check_finite(const ad::Var<T>& x, const std::string& where) {
    if (!x.value().all_finite())
      throw NumericError("non-finite activations in " + where);
  }

  ad::Var<T> conv3x3(const ad::Var<T>& x, const ad::Var<T>& weight, const ad::Var<T>& bias,
                     std::int64_t n, std::int64_t cin, std::int64_t h, std::int64_t w) const {
    auto im2col = cached_map("im2col:" + key(n, cin, h, w), [&] { return build_im2col(n, cin, h, w); });
    auto cols = ad::apply_map(ad::reshape(x, {n * cin * h * w}), im2col, Shape{cin * 9, n * h * w});
    auto wmat = ad::reshape(weight, {spec_.width, cin * 9});
    auto conv = ad::add_bcol(ad::matmul(wmat, cols), ad::reshape(bias, {spec_.width, 1}));
    auto to_nchw =
        cached_map("nchw:" + key(n, spec_.width, h, w), [&] { return build_to_nchw(n, spec_.width, h, w); });
    return ad::apply_map(ad::reshape(conv, {spec_.width * n * h * w}), to_nchw,
                         Shape{n, spec_.width, h, w});
  }

  ad::Var<T> instance_norm(const ad::Var<T>& x, std::int64_t n, std::int64_t c, std::int64_t h,
                           std::int64_t w) const {
    const std::int64_t hw = h * w;
    auto rows = ad::reshape(x, {n * c, hw});
    auto mu = ad::scale(ad::row_sum(rows), T{1} / static_cast<T>(hw));
    auto centered = ad::sub_bcol(rows, mu);
    auto var = ad::scale(ad::row_sum(ad::mul(centered, centered)), T{1} / static_cast<T>(hw));
    auto rstd = ad::divide(ad::Var<T>::constant(Tensor<T>{Shape{n * c, 1}, T{1}}),
                           ad::sqrt(ad::add_scalar(var, static_cast<T>(spec_.instance_norm_eps))));
    return ad::reshape(ad::mul_bcol(centered, rstd), {n, c, h, w});
  }

  ad::Var<T> affine_per_channel(const ad::Var<T>& x, const ad::Var<T>& scale_v,
                                const ad::Var<T>& shift_v, std::int64_t n, std::int64_t c,
                                std::int64_t h, std::int64_t w) const {
    auto expand = cached_map("chexpand:" + key(n, c, 1, 1), [&] {
      auto map = std::make_shared<ad::LinearMap<T>>();
      map->in_size = c;
      map->out_size = n * c;
      map->fanin = 1;
      map->idx.resize(static_cast<std::size_t>(n * c));
      for (std::int64_t i = 0; i < n * c; ++i)
        map->idx[static_cast<std::size_t>(i)] = static_cast<std::int32_t>(i % c);
      return map;
    });
    auto rows = ad::reshape(x, {n * c, h * w});
    auto sc = ad::apply_map(scale_v, expand, Shape{n * c, 1});
    auto sh = ad::apply_map(shift_v, expand, Shape{n * c, 1});
    return ad::reshape(ad::add_bcol(ad::mul_bcol(rows, sc), sh), {n, c, h, w});
  }

  ad::Var<T> avg_pool2(const ad::Var<T>& x, std::int64_t n, std::int64_t c, std::int64_t h,
                       std::int64_t w) const {
    auto pool = cached_map("pool:" + key(n, c, h, w), [&] { return build_pool(n, c, h, w); });
    return ad::apply_map(ad::reshape(x, {n * c * h * w}), pool, Shape{n, c, h / 2, w / 2});
  }

  static std::string key(std::int64_t a, std::int64_t b, std::int64_t c, std::int64_t d) {
    return std::to_string(a) + "," + std::to_string(b) + "," + std::to_string(c) + "," +
           std::to_string(d);
  }

  template <typename F>
  std::shared_ptr<const ad::LinearMap<T>> cached_map(const std::string& k, F&& build) const {
    auto it = cache_.find(k);
    if (it != cache_.end()) return it->second;
    std::shared_ptr<const ad::LinearMap<T>> map = build();
    cache_.emplace(k, map);
    return map;
  }

  std::shared_ptr<ad::LinearMap<T>> build_im2col(std::int64_t n, std::int64_t cin, std::int64_t h,
                                                 std::int64_t w) const {
    auto map = std::make_shared<ad::LinearMap<T>>();
    map->in_size = n * cin * h * w;
    map->out_size = cin * 9 * n * h * w;
    map->fanin = 1;
    map->idx.resize(static_cast<std::size_t>(map->out_size));
    std::int64_t o = 0;
    for (std::int64_t ci = 0; ci < cin; ++ci)
      for (std::int64_t ky = 0; ky < 3; ++ky)
        for (std::int64_t kx = 0; kx < 3; ++kx)
          for (std::int64_t i = 0; i < n; ++i)
            for (std::int64_t y = 0; y < h; ++y)
              for (std::int64_t x = 0; x < w; ++x, ++o) {
                const std::int64_t iy = y + ky - 1, ix = x + kx - 1;
                map->idx[static_cast<std::size_t>(o)] =
                    (iy >= 0 && iy < h && ix >= 0 && ix < w)
                        ? static_cast<std::int32_t>(((i * cin + ci) * h + iy) * w + ix)
                        : -1;
              }
    return map;
  }

  std::shared_ptr<ad::LinearMap<T>> build_to_nchw(std::int64_t n, std::int64_t c, std::int64_t h,
                                                  std::int64_t w) const {
    auto map = std::make_shared<ad::LinearMap<T>>();
    map->in_size = map->out_size = n * c * h * w;
    map->fanin = 1;
    map->idx.resize(static_cast<std::size_t>(map->out_size));
    std::int64_t o = 0;
    for (std::int64_t i = 0; i < n; ++i)
      for (std::int64_t ch = 0; ch < c; ++ch)
        for (std::int64_t p = 0; p < h * w; ++p, ++o)
          map->idx[static_cast<std::size_t>(o)] =
              static_cast<std::int32_t>((ch * n + i) * h * w + p);
    return map;
  }

  std::shared_ptr<ad::LinearMap<T>> build_pool(std::int64_t n, std::int64_t c, std::int64_t h,
                                               std::int64_t w) const {
    const std::int64_t oh = h / 2, ow = w / 2;
    auto map = std::make_shared<ad::LinearMap<T>>();
    map->in_size = n * c * h * w;
    map->out_size = n * c * oh * ow;
    map->fanin = 4;
    map->idx.resize(static_cast<std::size_t>(map->out_size) * 4);
    map->w.assign(static_cast<std::size_t>(map->out_size) * 4, T{0.25});
    std::int64_t o = 0;
    for (std::int64_t i = 0; i < n; ++i)
      for (std::int64_t ch = 0; ch < c; ++ch)
        for (std::int64_t y = 0; y < oh; ++y)
          for (std::int64_t x = 0; x < ow; ++x, ++o) {
            const std::int64_t base = ((i * c + ch) * h + 2 * y) * w + 2 * x;
            map->idx[static_cast<std::size_t>(o * 4 + 0)] = static_cast<std::int32_t>(base);
            map->idx[static_cast<std::size_t>(o * 4 + 1)] = static_cast<std::int32_t>(base + 1);
            map->idx[static_cast<std::size_t>(o * 4 + 2)] = static_cast<std::int32_t>(base + w);
            map->idx[static_cast<std::size_t>(o * 4 + 3)] = static_cast<std::int32_t>(base + w + 1);
          }
    return map;
  }

  NetworkSpec spec_;
  mutable std::map<std::string, std::shared_ptr<const ad::LinearMap<T>>> cache_;
};

// Convenience wrapper matching the operation contract.
template <typename T>
Tensor<T> forward_logits(const NetworkSpec& spec, const ParameterVector<T>& pv,
                         const Tensor<T>& images) {
  return ConvNet<T>(spec).forward_logits(pv, images);
}

template <typename T>
double accuracy(const Tensor<T>& logits, const std::vector<std::int32_t>& labels) {
  const std::int64_t n = logits.dim(0), c = logits.dim(1);
  if (n == 0) return 0.0;
  std::int64_t hits = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    std::int64_t best = 0;
    for (std::int64_t j = 1; j < c; ++j)
      if (logits[i * c + j] > logits[i * c + best]) best = j;
    if (best == labels[static_cast<std::size_t>(i)]) ++hits;
  }
  return double(hits) / double(n);
}

// ---------------------------------------------------------------------------
// Training on a distilled set (evaluation step 2 of the protocol)

template <typename T>
struct TrainHyper {
  T lr = T{0.01};
  T momentum = T{0.9};
  std::int64_t steps = 300;
  std::int64_t batch = 0;  // 0 = full distilled set per step
  T lambda = T{0.5};
  AugmentPolicy policy;  // evaluation-time augmentation (same policy as distillation)
};

template <typename T>
struct TrainResult {
  ParameterVector<T> params;
  std::vector<double> loss_history;
  std::vector<double> ce_history;
  std::vector<double> uniformity_history;
};

template <typename T>
TrainResult<T> train_on_distilled(const DistilledSet<T>& s, const NetworkSpec& spec,
                                  const TrainHyper<T>& hyper, std::uint64_t rng_seed) {
  s.validate();
  if (hyper.lambda < T{0}) throw ConfigError("train_on_distilled: lambda must be >= 0");
  ConvNet<T> net(spec);
  Rng root(rng_seed);
  auto pv = build_network<T>(spec, root.stream("net-init").next_u64());
  auto tensors = pv.unflatten();
  std::vector<Tensor<T>> velocity;
  for (const auto& t : tensors) velocity.push_back(Tensor<T>::zeros(t.shape()));

  Rng rng_batch = root.stream("batch");
  Rng rng_aug = root.stream("aug");
  const bool use_out = s.out_count() > 0 && hyper.lambda > T{0};
  const std::int64_t n_in = s.in_count(), n_out = s.out_count();

  TrainResult<T> result;
  for (std::int64_t step = 0; step < hyper.steps; ++step) {
    Tensor<T> in_imgs = s.s_in_images;
    std::vector<std::int32_t> labels = s.s_in_labels;
    Tensor<T> out_imgs = s.s_out_images;
    if (hyper.batch > 0 && hyper.batch < n_in) {
      auto rows = rng_batch.sample_without_replacement(n_in, hyper.batch);
      in_imgs = take_rows(s.s_in_images, rows);
      labels.clear();
      for (auto r : rows) labels.push_back(s.s_in_labels[static_cast<std::size_t>(r)]);
    }
    if (use_out && hyper.batch > 0 && hyper.batch < n_out)
      out_imgs = take_rows(s.s_out_images, rng_batch.sample_without_replacement(n_out, hyper.batch));

    auto params = [&] {
      std::vector<ad::Var<T>> vars;
      vars.reserve(tensors.size());
      for (auto& t : tensors) vars.push_back(ad::Var<T>::leaf(t, true));
      return vars;
    }();

    const auto draw = sample_shared_draw(hyper.policy, s.image_shape(), rng_aug);
    auto in_batch = diff_augment(ad::Var<T>::constant(in_imgs), hyper.policy, draw);
    auto in_logits = net.forward(params, in_batch);
    auto ce = cross_entropy_loss(in_logits, labels);
    ad::Var<T> loss = ce;
    ad::Var<T> uni;
    if (use_out) {
      auto out_batch = diff_augment(ad::Var<T>::constant(out_imgs), hyper.policy, draw);
      uni = uniformity_loss(net.forward(params, out_batch));
      loss = ad::add(ce, ad::scale(uni, hyper.lambda));
    }
    const double loss_value = double(loss.value()[0]);
    if (!std::isfinite(loss_value))
      throw TrainingError("train_on_distilled diverged at step " + std::to_string(step));
    result.loss_history.push_back(loss_value);
    result.ce_history.push_back(double(ce.value()[0]));
    result.uniformity_history.push_back(uni.defined() ? double(uni.value()[0]) : 0.0);

    auto grads = ad::grad(loss, params, false);
    for (std::size_t li = 0; li < tensors.size(); ++li) {
      Tensor<T> next{tensors[li].shape()};
      T* v = velocity[li].data();
      const T* g = grads[li].value().data();
      const T* p = tensors[li].data();
      T* np = next.data();
      for (std::int64_t i = 0; i < next.size(); ++i) {
        v[i] = hyper.momentum * v[i] + g[i];
        np[i] = p[i] - hyper.lr * v[i];
      }
      tensors[li] = std::move(next);
    }
  }
  result.params = ParameterVector<T>::flatten(tensors, pv.layout);
  return result;
}

// ---------------------------------------------------------------------------
// Expert trajectories for trajectory matching

template <typename T>
struct ExpertConfig {
  std::int64_t epochs = 2;
  std::int64_t batch = 64;
  std::int64_t snapshot_interval = 0;  // 0 = one epoch's worth of steps
  T lr = T{0.01};
  T momentum = T{0.9};
  T lambda = T{0.5};
  bool use_integrated_loss = true;
  std::int64_t out_batch = 64;
};

template <typename T>
struct TrajectoryBuffer {
  std::vector<std::pair<std::int64_t, ParameterVector<T>>> snapshots;  // (step, theta)
  NetworkSpec spec;
  std::string loss_kind = "ce";  // ce | integrated
  T lambda = T{0};
  std::uint64_t rng_seed = 0;

  void validate() const {
    if (snapshots.size() < 2) throw ValidationError("trajectory buffer needs >= 2 snapshots");
    for (std::size_t i = 1; i < snapshots.size(); ++i) {
      if (snapshots[i].first <= snapshots[i - 1].first)
        throw ValidationError("trajectory buffer: step indices must increase strictly");
      if (snapshots[i].second.size() != snapshots[0].second.size())
        throw ValidationError("trajectory buffer: snapshots disagree on layout");
    }
  }

  const ParameterVector<T>& at_step(std::int64_t step) const {
    for (const auto& [st, pv] : snapshots)
      if (st == step) return pv;
    throw ValidationError("trajectory buffer has no snapshot at step " + std::to_string(step));
  }

  bool has_step(std::int64_t step) const {
    for (const auto& [st, pv] : snapshots)
      if (st == step) return true;
    return false;
  }
};

template <typename T>
TrajectoryBuffer<T> expert_trajectories(const LabeledImageSet<T>& t_in,
                                        const UnlabeledImageSet<T>& t_out, const NetworkSpec& spec,
                                        const ExpertConfig<T>& cfg, std::uint64_t rng_seed) {
  t_in.validate();
  if (cfg.use_integrated_loss && t_out.count() == 0)
    throw ConfigError("expert_trajectories: integrated loss requires a non-empty outlier set");
  if (cfg.epochs < 1 || cfg.batch < 1) throw ConfigError("expert_trajectories: bad config");

  ConvNet<T> net(spec);
  Rng root(rng_seed);
  auto pv = build_network<T>(spec, root.stream("net-init").next_u64());
  auto tensors = pv.unflatten();
  std::vector<Tensor<T>> velocity;
  for (const auto& t : tensors) velocity.push_back(Tensor<T>::zeros(t.shape()));

  const std::int64_t steps_per_epoch = (t_in.count() + cfg.batch - 1) / cfg.batch;
  const std::int64_t total_steps = steps_per_epoch * cfg.epochs;
  const std::int64_t interval = cfg.snapshot_interval > 0 ? cfg.snapshot_interval : steps_per_epoch;

  TrajectoryBuffer<T> buffer;
  buffer.spec = spec;
  buffer.loss_kind = cfg.use_integrated_loss ? "integrated" : "ce";
  buffer.lambda = cfg.use_integrated_loss ? cfg.lambda : T{0};
  buffer.rng_seed = rng_seed;
  buffer.snapshots.emplace_back(0, ParameterVector<T>::flatten(tensors, pv.layout));

  Rng rng_order = root.stream("order");
  Rng rng_out = root.stream("out-batch");
  std::int64_t step = 0;
  for (std::int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    auto order = rng_order.permutation(t_in.count());
    for (std::int64_t b = 0; b < steps_per_epoch; ++b) {
      const std::int64_t lo = b * cfg.batch;
      const std::int64_t hi = std::min<std::int64_t>(lo + cfg.batch, t_in.count());
      std::vector<std::int64_t> rows(order.begin() + lo, order.begin() + hi);
      auto imgs = take_rows(t_in.images, rows);
      std::vector<std::int32_t> labels;
      labels.reserve(rows.size());
      for (auto r : rows) labels.push_back(t_in.labels[static_cast<std::size_t>(r)]);

      auto params = [&] {
        std::vector<ad::Var<T>> vars;
        for (auto& t : tensors) vars.push_back(ad::Var<T>::leaf(t, true));
        return vars;
      }();

      auto loss = cross_entropy_loss(net.forward(params, ad::Var<T>::constant(imgs)), labels);
      if (cfg.use_integrated_loss && cfg.lambda > T{0}) {
        const std::int64_t ob = std::min<std::int64_t>(cfg.out_batch, t_out.count());
        auto out_rows = rng_out.sample_without_replacement(t_out.count(), ob);
        auto out_imgs = take_rows(t_out.images, out_rows);
        loss = ad::add(loss, ad::scale(
                                 uniformity_loss(net.forward(params, ad::Var<T>::constant(out_imgs))),
                                 cfg.lambda));
      }
      if (!std::isfinite(double(loss.value()[0])))
        throw TrainingError("expert_trajectories diverged at step " + std::to_string(step));

      auto grads = ad::grad(loss, params, false);
      for (std::size_t li = 0; li < tensors.size(); ++li) {
        Tensor<T> next{tensors[li].shape()};
        T* v = velocity[li].data();
        const T* g = grads[li].value().data();
        const T* p = tensors[li].data();
        T* np = next.data();
        for (std::int64_t i = 0; i < next.size(); ++i) {
          v[i] = cfg.momentum * v[i] + g[i];
          np[i] = p[i] - cfg.lr * v[i];
        }
        tensors[li] = std::move(next);
      }
      ++step;
      if (step % interval == 0 || step == total_steps)
        if (!buffer.has_step(step))
          buffer.snapshots.emplace_back(step, ParameterVector<T>::flatten(tensors, pv.layout));
    }
  }
  buffer.validate();
  return buffer;
}

// ---------------------------------------------------------------------------
// Trajectory persistence: numbered flat-float32 files plus a manifest, same
// conventions as the distilled-set container.

template <typename T>
void save_trajectory(const TrajectoryBuffer<T>& buffer, const fs::path& dir) {
  buffer.validate();
  fs::create_directories(dir);
  std::ofstream m(dir / "manifest");
  m << "format_version=1\n";
  m << "depth=" << buffer.spec.depth << "\n";
  m << "width=" << buffer.spec.width << "\n";
  m << "num_classes=" << buffer.spec.num_classes << "\n";
  m << "input_shape=" << buffer.spec.input_shape[0] << "," << buffer.spec.input_shape[1] << ","
    << buffer.spec.input_shape[2] << "\n";
  m << "norm_affine=" << (buffer.spec.norm_affine ? 1 : 0) << "\n";
  m << "loss_kind=" << buffer.loss_kind << "\n";
  m << "lambda=" << double(buffer.lambda) << "\n";
  m << "rng_seed=" << buffer.rng_seed << "\n";
  m << "steps=";
  for (std::size_t i = 0; i < buffer.snapshots.size(); ++i) {
    if (i) m << ",";
    m << buffer.snapshots[i].first;
  }
  m << "\n";
  char name[32];
  for (std::size_t i = 0; i < buffer.snapshots.size(); ++i) {
    std::snprintf(name, sizeof(name), "snapshot_%06zu.bin", i);
    Tensor<T> flat{Shape{buffer.snapshots[i].second.size()}};
    std::copy_n(buffer.snapshots[i].second.flat.data(), flat.size(), flat.data());
    write_f32_array(dir / name, flat);
  }
}

template <typename T>
TrajectoryBuffer<T> load_trajectory(const fs::path& dir) {
  auto kv = detail::read_kv_file(dir / "manifest");
  if (!kv.count("format_version") || kv.at("format_version") != "1")
    throw Error("incompatible trajectory format_version in " + dir.string());
  TrajectoryBuffer<T> buffer;
  buffer.spec.depth = std::stoi(kv.at("depth"));
  buffer.spec.width = std::stoi(kv.at("width"));
  buffer.spec.num_classes = std::stoi(kv.at("num_classes"));
  {
    std::stringstream ss(kv.at("input_shape"));
    std::string item;
    buffer.spec.input_shape.clear();
    while (std::getline(ss, item, ',')) buffer.spec.input_shape.push_back(std::stoll(item));
  }
  buffer.spec.norm_affine = kv.count("norm_affine") && kv.at("norm_affine") == "1";
  buffer.loss_kind = kv.at("loss_kind");
  buffer.lambda = static_cast<T>(std::stod(kv.at("lambda")));
  buffer.rng_seed = std::stoull(kv.at("rng_seed"));

  std::vector<std::int64_t> steps;
  {
    std::stringstream ss(kv.at("steps"));
    std::string item;
    while (std::getline(ss, item, ',')) steps.push_back(std::stoll(item));
  }
  const auto layout = network_layout<T>(buffer.spec);
  char name[32];
  for (std::size_t i = 0; i < steps.size(); ++i) {
    std::snprintf(name, sizeof(name), "snapshot_%06zu.bin", i);
    auto flat = read_f32_array<T>(dir / name);
    ParameterVector<T> pv;
    pv.layout = layout;
    pv.flat.assign(flat.data(), flat.data() + flat.size());
    pv.validate();
    buffer.snapshots.emplace_back(steps[i], std::move(pv));
  }
  buffer.validate();
  return buffer;
}

}  // namespace trustdd
