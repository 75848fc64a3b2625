#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "trustdd/augment.hpp"
#include "trustdd/autodiff.hpp"
#include "trustdd/common.hpp"
#include "trustdd/corruption.hpp"
#include "trustdd/dataset.hpp"
#include "trustdd/losses.hpp"
#include "trustdd/network.hpp"
#include "trustdd/rng.hpp"

// The TrustDD learning loop: integrated losses on both sides of a matching
// objective, DSA gradient matching and MTT trajectory matching over the
// second-order autodiff graph, plus the single-set ablation.

namespace trustdd {

struct MttOptions {
  std::string expert_buffer_path;
  std::int64_t segment = 0;         // M in expert steps; 0 = one snapshot gap
  std::int64_t max_start_step = -1; // -1 = first half of the trajectory
};

template <typename T>
struct DistillConfig {
  std::string method = "dsa";  // dsa | mtt | single-set-dsa
  T lambda = T{0.5};
  T lr_net = T{0.01};  // alpha1
  T lr_img = T{0.1};   // alpha2
  std::int64_t net_updates = 1;  // N
  std::int64_t img_updates = 1;  // N_S
  std::int64_t iterations = 500;
  std::int64_t batch_real = 256;
  std::int64_t batch_syn = 0;          // 0 = full distilled set
  std::int64_t restart_interval = 0;   // 0 = iterations/10
  std::int32_t ipc = 10;
  std::int64_t outlier_count = -1;     // -1 = |S_in| when outliers are in play
  MttOptions mtt;
  AugmentPolicy augment;
  std::optional<NetworkSpec> network;  // unset = derive from the dataset
  std::uint64_t rng_seed = 0;

  void validate() const {
    if (method != "dsa" && method != "mtt" && method != "single-set-dsa")
      throw ConfigError("distill config: unknown method " + method);
    if (lambda < T{0}) throw ConfigError("distill config: lambda must be >= 0");
    if (!(lr_net > T{0}) || !(lr_img > T{0}))
      throw ConfigError("distill config: learning rates must be positive");
    if (net_updates < 1 || img_updates < 1 || iterations < 1)
      throw ConfigError("distill config: N, N_S and iterations must be >= 1");
    if (ipc < 1) throw ConfigError("distill config: ipc must be >= 1");
  }
};

struct TelemetryRow {
  std::int64_t iteration = 0;
  double distill_loss = 0;
  double ce_component = 0;
  double uniformity_component = 0;
  double wall_ms = 0;
};

using TelemetrySink = std::function<void(const TelemetryRow&)>;

template <typename T>
struct DistillResult {
  DistilledSet<T> set;
  std::vector<TelemetryRow> telemetry;
};

// ---------------------------------------------------------------------------
// Integrated loss through the network (Eq.-level contract: CE on the labeled
// batch plus lambda * uniformity on the outlier batch).
template <typename T>
ad::Var<T> integrated_loss(const ConvNet<T>& net, const std::vector<ad::Var<T>>& params,
                           const ad::Var<T>& in_images, const std::vector<std::int32_t>& labels,
                           const ad::Var<T>& out_images, T lambda) {
  auto in_logits = net.forward(params, in_images);
  ad::Var<T> out_logits;
  if (out_images.defined() && out_images.value().dim(0) > 0 && lambda > T{0})
    out_logits = net.forward(params, out_images);
  return integrated_loss_from_logits(in_logits, labels, out_logits, lambda);
}

namespace detail {

// Layerwise DSA distance: per weight tensor, one minus cosine similarity of
// output-channel slices, summed; computed as 0.5*||a_hat - b_hat||^2 per
// slice, which is the same quantity for unit vectors but cancels exactly
// (loss is exactly 0 on bit-identical gradients). 1-D parameters (biases)
// carry no slices and are excluded, following the DSA convention. Norms are
// guarded as sqrt(ssq + 1e-8).
template <typename T>
ad::Var<T> gradient_distance(const std::vector<ad::Var<T>>& grads_syn,
                             const std::vector<ad::Var<T>>& grads_real,
                             const std::vector<LayoutEntry>& layout) {
  const T eps = static_cast<T>(1e-8);
  ad::Var<T> total;
  for (std::size_t li = 0; li < layout.size(); ++li) {
    const auto& shape = layout[li].shape;
    if (shape.size() < 2) continue;
    const std::int64_t rows = shape[0];
    const std::int64_t cols = shape_numel(shape) / rows;
    auto ones = ad::Var<T>::constant(Tensor<T>{Shape{rows, 1}, T{1}});
    auto a = ad::reshape(grads_syn[li], {rows, cols});
    auto b = ad::reshape(grads_real[li], {rows, cols});
    auto ra = ad::divide(ones, ad::sqrt(ad::add_scalar(ad::row_sum(ad::mul(a, a)), eps)));
    auto rb = ad::divide(ones, ad::sqrt(ad::add_scalar(ad::row_sum(ad::mul(b, b)), eps)));
    auto diff = ad::sub(ad::mul_bcol(a, ra), ad::mul_bcol(b, rb));
    auto dist = ad::scale(ad::sum_all(ad::mul(diff, diff)), T{0.5});
    total = total.defined() ? ad::add(total, dist) : dist;
  }
  if (!total.defined()) throw ValidationError("gradient_distance: no matchable weight tensors");
  return total;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// DSA gradient-matching loss. The synthetic side keeps its graph so the
// returned scalar differentiates through the per-parameter gradients down to
// the distilled pixels; the real side enters as constants.
template <typename T>
ad::Var<T> dsa_match_loss(const ConvNet<T>& net, const std::vector<LayoutEntry>& layout,
                          const std::vector<ad::Var<T>>& theta,
                          const ad::Var<T>& syn_in, const std::vector<std::int32_t>& syn_labels,
                          const ad::Var<T>& syn_out, const Tensor<T>& real_in,
                          const std::vector<std::int32_t>& real_labels, const Tensor<T>& real_out,
                          T lambda, const AugmentPolicy& policy, const SharedDraw& draw,
                          bool syn_plain_ce = false) {
  // theta is a differentiation variable here even though it is never
  // optimized: rewrap as grad-enabled leaves (shares the value buffers)
  std::vector<ad::Var<T>> theta_rg;
  theta_rg.reserve(theta.size());
  for (const auto& t : theta) theta_rg.push_back(ad::Var<T>::leaf(t.value(), true));

  auto syn_in_aug = diff_augment(syn_in, policy, draw);
  ad::Var<T> syn_out_aug;
  if (syn_out.defined() && syn_out.value().dim(0) > 0)
    syn_out_aug = diff_augment(syn_out, policy, draw);
  auto loss_syn = integrated_loss(net, theta_rg, syn_in_aug, syn_labels, syn_out_aug,
                                  syn_plain_ce ? T{0} : lambda);
  auto grads_syn = ad::grad(loss_syn, theta_rg, /*create_graph=*/true);

  auto real_in_aug = diff_augment(ad::Var<T>::constant(real_in), policy, draw);
  ad::Var<T> real_out_aug;
  if (real_out.dim(0) > 0)
    real_out_aug = diff_augment(ad::Var<T>::constant(real_out), policy, draw);
  auto loss_real = integrated_loss(net, theta_rg, real_in_aug, real_labels, real_out_aug, lambda);
  auto grads_real_graph = ad::grad(loss_real, theta_rg, /*create_graph=*/false);
  std::vector<ad::Var<T>> grads_real;
  grads_real.reserve(grads_real_graph.size());
  for (auto& g : grads_real_graph) grads_real.push_back(g.detached());

  return detail::gradient_distance(grads_syn, grads_real, layout);
}

// ---------------------------------------------------------------------------
// MTT trajectory-matching loss: N unrolled inner updates from the expert
// start snapshot, normalized squared distance to the expert target snapshot.
template <typename T>
ad::Var<T> mtt_match_loss(const ConvNet<T>& net, const TrajectoryBuffer<T>& buffer,
                          std::int64_t start_step, std::int64_t inner_updates, std::int64_t segment,
                          T alpha1, const ad::Var<T>& syn_in,
                          const std::vector<std::int32_t>& syn_labels, const ad::Var<T>& syn_out,
                          T lambda) {
  buffer.validate();
  if (inner_updates < 0) throw ConfigError("mtt_match_loss: N must be >= 0");
  if (inner_updates >= segment)
    throw ConfigError("mtt_match_loss: requires N < M (got N=" + std::to_string(inner_updates) +
                      ", M=" + std::to_string(segment) + ")");
  const auto& start = buffer.at_step(start_step);
  const auto& target = buffer.at_step(start_step + segment);

  auto start_tensors = start.unflatten();
  auto target_tensors = target.unflatten();

  std::vector<ad::Var<T>> theta;
  theta.reserve(start_tensors.size());
  for (auto& t : start_tensors) theta.push_back(ad::Var<T>::leaf(t, true));

  for (std::int64_t i = 0; i < inner_updates; ++i) {
    auto loss = integrated_loss(net, theta, syn_in, syn_labels, syn_out, lambda);
    auto grads = ad::grad(loss, theta, /*create_graph=*/true);
    for (std::size_t li = 0; li < theta.size(); ++li)
      theta[li] = ad::sub(theta[li], ad::scale(grads[li], alpha1));
  }

  ad::Var<T> numerator;
  double denom_value = 0;
  for (std::size_t li = 0; li < theta.size(); ++li) {
    auto tgt = ad::Var<T>::constant(target_tensors[li]);
    auto diff = ad::sub(theta[li], tgt);
    auto term = ad::sum_all(ad::mul(diff, diff));
    numerator = numerator.defined() ? ad::add(numerator, term) : term;
    const T* a = start_tensors[li].data();
    const T* b = target_tensors[li].data();
    for (std::int64_t k = 0; k < start_tensors[li].size(); ++k) {
      const double d = double(a[k]) - double(b[k]);
      denom_value += d * d;
    }
  }
  if (!(denom_value > 1e-30))
    throw DegenerateTrajectoryError("mtt_match_loss: expert snapshots at steps " +
                                    std::to_string(start_step) + " and " +
                                    std::to_string(start_step + segment) + " coincide");
  auto denom = ad::Var<T>::constant(Tensor<T>::scalar(static_cast<T>(denom_value)));
  return ad::divide(numerator, denom);
}

// Network shape defaults when the config does not pin one: depth follows the
// input resolution (5 blocks at 128px, 3 at 32px-class sizes), width 128.
template <typename T>
NetworkSpec default_spec_for(const LabeledImageSet<T>& t_in) {
  NetworkSpec spec;
  spec.input_shape = t_in.image_shape();
  spec.num_classes = t_in.num_classes;
  spec.depth = spec.input_shape[1] >= 64 ? 5 : 3;
  if (spec.input_shape[1] < 16) spec.depth = 2;
  spec.width = 128;
  spec.validate();
  return spec;
}

// ---------------------------------------------------------------------------
// The full learning loop (Algorithm-level contract).

template <typename T>
DistillResult<T> run_trustdd(const LabeledImageSet<T>& t_in, const UnlabeledImageSet<T>& t_out,
                             const DistillConfig<T>& cfg, const TrajectoryBuffer<T>* experts = nullptr,
                             const TelemetrySink& sink = nullptr) {
  cfg.validate();
  t_in.validate();
  const bool single_set = cfg.method == "single-set-dsa";
  std::int64_t outlier_count = cfg.outlier_count;
  if (outlier_count < 0)
    outlier_count = (t_out.count() > 0 && !single_set) ? std::int64_t(cfg.ipc) * t_in.num_classes : 0;
  if (single_set) outlier_count = 0;
  const T lambda = (outlier_count == 0 && !single_set) ? T{0} : cfg.lambda;

  Rng root(cfg.rng_seed);
  auto s = init_distilled(t_in, t_out, cfg.ipc, outlier_count, root.stream("init").next_u64());
  s.method = cfg.method;
  s.rng_seed = cfg.rng_seed;
  if (single_set) s.outlier_mode = "none";

  NetworkSpec spec;
  if (cfg.method == "mtt") {
    if (!experts) throw ConfigError("run_trustdd: mtt requires an expert trajectory buffer");
    spec = experts->spec;
  } else {
    spec = cfg.network ? *cfg.network : default_spec_for(t_in);
  }
  ConvNet<T> net(spec);
  const auto layout = network_layout<T>(spec);

  // synthetic tensors we optimize (own buffers: updates are applied in place)
  Tensor<T> syn_in = s.s_in_images.clone();
  Tensor<T> syn_out = s.s_out_images.clone();
  const bool has_syn_out = syn_out.dim(0) > 0;
  const bool use_real_out = (has_syn_out || single_set) && t_out.count() > 0 && lambda > T{0};

  Rng rng_net = root.stream("net");
  Rng rng_real = root.stream("real-batch");
  Rng rng_real_out = root.stream("real-out-batch");
  Rng rng_aug = root.stream("aug");
  Rng rng_mtt = root.stream("mtt-start");
  Rng rng_syn = root.stream("syn-batch");

  const std::int64_t restart_every =
      cfg.restart_interval > 0 ? cfg.restart_interval : std::max<std::int64_t>(1, cfg.iterations / 10);

  // DSA inner parameters, carried across iterations with periodic restarts
  std::vector<Tensor<T>> theta_tensors;
  if (cfg.method != "mtt")
    theta_tensors = build_network<T>(spec, rng_net.next_u64()).unflatten();

  // MTT start steps: snapshot steps with a target M ahead, within max_start
  std::int64_t segment = 0;
  std::vector<std::int64_t> start_steps;
  if (cfg.method == "mtt") {
    experts->validate();
    segment = cfg.mtt.segment;
    if (segment <= 0) segment = experts->snapshots[1].first - experts->snapshots[0].first;
    if (cfg.net_updates >= segment)
      throw ConfigError("run_trustdd: mtt requires N < M");
    const std::int64_t last = experts->snapshots.back().first;
    const std::int64_t max_start = cfg.mtt.max_start_step >= 0 ? cfg.mtt.max_start_step : last / 2;
    for (const auto& [st, pv] : experts->snapshots)
      if (st <= max_start && experts->has_step(st + segment)) start_steps.push_back(st);
    if (start_steps.empty())
      throw ConfigError("run_trustdd: no usable expert start steps (check segment/max_start)");
  }

  DistillResult<T> result;
  const std::int64_t n_real = t_in.count();
  const std::int64_t batch_real = std::min<std::int64_t>(cfg.batch_real, n_real);

  for (std::int64_t it = 0; it < cfg.iterations; ++it) {
    const auto tic = std::chrono::steady_clock::now();

    if (cfg.method != "mtt" && it % restart_every == 0 && it > 0)
      theta_tensors = build_network<T>(spec, rng_net.next_u64()).unflatten();

    // real batches for the matching step
    auto real_rows = rng_real.sample_without_replacement(n_real, batch_real);
    auto real_imgs = take_rows(t_in.images, real_rows);
    std::vector<std::int32_t> real_labels;
    real_labels.reserve(real_rows.size());
    for (auto r : real_rows) real_labels.push_back(t_in.labels[static_cast<std::size_t>(r)]);
    Tensor<T> real_out{Shape{0, syn_in.dim(1), syn_in.dim(2), syn_in.dim(3)}};
    if (use_real_out) {
      const std::int64_t ob = std::min<std::int64_t>(batch_real, t_out.count());
      real_out = take_rows(t_out.images, rng_real_out.sample_without_replacement(t_out.count(), ob));
    }

    double ce_component = 0, uniformity_component = 0;

    if (cfg.method != "mtt") {
      // Algorithm line 7-8: update network N times with L^S
      for (std::int64_t u = 0; u < cfg.net_updates; ++u) {
        std::vector<ad::Var<T>> theta;
        theta.reserve(theta_tensors.size());
        for (auto& t : theta_tensors) theta.push_back(ad::Var<T>::leaf(t, true));
        auto in_logits = net.forward(theta, ad::Var<T>::constant(syn_in));
        auto ce = cross_entropy_loss(in_logits, s.s_in_labels);
        ad::Var<T> loss = ce;
        ad::Var<T> uni;
        if (has_syn_out && lambda > T{0}) {
          uni = uniformity_loss(net.forward(theta, ad::Var<T>::constant(syn_out)));
          loss = ad::add(ce, ad::scale(uni, lambda));
        }
        ce_component = double(ce.value()[0]);
        uniformity_component = uni.defined() ? double(uni.value()[0]) : 0.0;
        auto grads = ad::grad(loss, theta, false);
        for (std::size_t li = 0; li < theta_tensors.size(); ++li) {
          Tensor<T> next{theta_tensors[li].shape()};
          const T* p = theta_tensors[li].data();
          const T* g = grads[li].value().data();
          T* np = next.data();
          for (std::int64_t k = 0; k < next.size(); ++k) np[k] = p[k] - cfg.lr_net * g[k];
          theta_tensors[li] = std::move(next);
        }
      }
    }

    // distill loss and N_S image updates (Algorithm lines 9-12)
    double distill_value = 0;
    std::int64_t mtt_start = 0;
    if (cfg.method == "mtt")
      mtt_start = start_steps[static_cast<std::size_t>(
          rng_mtt.index(static_cast<std::int64_t>(start_steps.size())))];

    // batch_syn = 0 keeps the full distilled set in the matching step
    std::vector<std::int64_t> in_rows, out_rows;
    const std::int64_t n_in = syn_in.dim(0), n_out = syn_out.dim(0);
    const bool sub_in = cfg.batch_syn > 0 && cfg.batch_syn < n_in;
    const bool sub_out = has_syn_out && cfg.batch_syn > 0 && cfg.batch_syn < n_out;
    if (sub_in) in_rows = rng_syn.sample_without_replacement(n_in, cfg.batch_syn);
    if (sub_out) out_rows = rng_syn.sample_without_replacement(n_out, cfg.batch_syn);

    for (std::int64_t u = 0; u < cfg.img_updates; ++u) {
      Tensor<T> in_subset = sub_in ? take_rows(syn_in, in_rows) : syn_in;
      std::vector<std::int32_t> in_labels;
      if (sub_in) {
        in_labels.reserve(in_rows.size());
        for (auto r : in_rows) in_labels.push_back(s.s_in_labels[static_cast<std::size_t>(r)]);
      }
      auto syn_in_var = ad::Var<T>::leaf(in_subset, true);
      ad::Var<T> syn_out_var;
      Tensor<T> out_subset;
      if (has_syn_out) {
        out_subset = sub_out ? take_rows(syn_out, out_rows) : syn_out;
        syn_out_var = ad::Var<T>::leaf(out_subset, true);
      }
      const auto& labels_used = sub_in ? in_labels : s.s_in_labels;

      ad::Var<T> loss;
      if (cfg.method == "mtt") {
        loss = mtt_match_loss(net, *experts, mtt_start, cfg.net_updates, segment, cfg.lr_net,
                              syn_in_var, labels_used, syn_out_var, lambda);
      } else {
        std::vector<ad::Var<T>> theta;
        theta.reserve(theta_tensors.size());
        for (auto& t : theta_tensors) theta.push_back(ad::Var<T>::leaf(t, false));
        const auto draw = sample_shared_draw(cfg.augment, s.image_shape(), rng_aug);
        loss = dsa_match_loss(net, layout, theta, syn_in_var, labels_used, syn_out_var, real_imgs,
                              real_labels, real_out, lambda, cfg.augment, draw,
                              /*syn_plain_ce=*/single_set);
      }
      distill_value = double(loss.value()[0]);
      if (!std::isfinite(distill_value))
        throw TrainingError("run_trustdd: non-finite distill loss at iteration " +
                            std::to_string(it));

      std::vector<ad::Var<T>> wanted{syn_in_var};
      if (has_syn_out) wanted.push_back(syn_out_var);
      auto grads = ad::grad(loss, wanted, false);
      const std::int64_t pix = syn_in.dim(1) * syn_in.dim(2) * syn_in.dim(3);
      {
        const T* g = grads[0].value().data();
        const std::int64_t rows = sub_in ? static_cast<std::int64_t>(in_rows.size()) : n_in;
        for (std::int64_t r = 0; r < rows; ++r) {
          T* p = syn_in.data() + (sub_in ? in_rows[static_cast<std::size_t>(r)] : r) * pix;
          const T* gr = g + r * pix;
          for (std::int64_t k = 0; k < pix; ++k) p[k] -= cfg.lr_img * gr[k];
        }
      }
      if (has_syn_out) {
        const T* g = grads[1].value().data();
        const std::int64_t rows = sub_out ? static_cast<std::int64_t>(out_rows.size()) : n_out;
        for (std::int64_t r = 0; r < rows; ++r) {
          T* p = syn_out.data() + (sub_out ? out_rows[static_cast<std::size_t>(r)] : r) * pix;
          const T* gr = g + r * pix;
          for (std::int64_t k = 0; k < pix; ++k) p[k] -= cfg.lr_img * gr[k];
        }
      }
    }

    if (cfg.method == "mtt") {
      // loss components on the synthetic set at the sampled expert start
      auto theta = to_vars(experts->at_step(mtt_start), false);
      auto ce = cross_entropy_loss(net.forward(theta, ad::Var<T>::constant(syn_in)), s.s_in_labels);
      ce_component = double(ce.value()[0]);
      if (has_syn_out && lambda > T{0})
        uniformity_component =
            double(uniformity_loss(net.forward(theta, ad::Var<T>::constant(syn_out))).value()[0]);
    }

    const auto toc = std::chrono::steady_clock::now();
    TelemetryRow row;
    row.iteration = it;
    row.distill_loss = distill_value;
    row.ce_component = ce_component;
    row.uniformity_component = uniformity_component;
    row.wall_ms = std::chrono::duration<double, std::milli>(toc - tic).count();
    result.telemetry.push_back(row);
    if (sink) sink(row);
  }

  s.s_in_images = std::move(syn_in);
  s.s_out_images = std::move(syn_out);
  s.validate();
  result.set = std::move(s);
  return result;
}

// Appendix ablation: condense T_in and T_out into one labeled set, matching
// plain CE gradients on the synthetic side against integrated-loss gradients
// on the real side. Reproduces the negative result at desk scale.
template <typename T>
DistillResult<T> single_set_distill(const LabeledImageSet<T>& t_in,
                                    const UnlabeledImageSet<T>& t_out, DistillConfig<T> cfg,
                                    const TelemetrySink& sink = nullptr) {
  if (cfg.method != "single-set-dsa")
    throw ConfigError("single_set_distill: method must be single-set-dsa");
  return run_trustdd(t_in, t_out, cfg, static_cast<const TrajectoryBuffer<T>*>(nullptr), sink);
}

}  // namespace trustdd
