#pragma once

#include <cstdint>
#include <vector>

#include "trustdd/autodiff.hpp"
#include "trustdd/common.hpp"
#include "trustdd/tensor.hpp"

namespace trustdd {

// H(U; f): cross-entropy between the uniform distribution and the softmax
// output, averaged over the batch. Minimized (= log C) exactly when every
// softmax row is uniform; log-sum-exp stabilized inside log_softmax.
template <typename T>
ad::Var<T> uniformity_loss(const ad::Var<T>& logits) {
  const auto& s = logits.value().shape();
  if (s.size() != 2 || s[1] < 2)
    throw ValidationError("uniformity_loss: logits must be (batch, C) with C >= 2");
  auto log_probs = ad::log_softmax_rows(logits);
  const T denom = static_cast<T>(s[0] * s[1]);
  return ad::scale(ad::sum_all(log_probs), -T{1} / denom);
}

// Mean cross-entropy over the batch.
template <typename T>
ad::Var<T> cross_entropy_loss(const ad::Var<T>& logits, const std::vector<std::int32_t>& labels) {
  const auto& s = logits.value().shape();
  if (s.size() != 2) throw ValidationError("cross_entropy_loss: logits must be 2-D");
  const std::int64_t b = s[0], c = s[1];
  if (static_cast<std::int64_t>(labels.size()) != b)
    throw ValidationError("cross_entropy_loss: batch/label size mismatch");
  for (auto y : labels)
    if (y < 0 || y >= c)
      throw ValidationError("cross_entropy_loss: label " + std::to_string(y) + " out of range [0," +
                            std::to_string(c) + ")");
  auto log_probs = ad::log_softmax_rows(logits);
  auto pick = std::make_shared<ad::LinearMap<T>>();
  pick->in_size = b * c;
  pick->out_size = b;
  pick->fanin = 1;
  pick->idx.resize(static_cast<std::size_t>(b));
  for (std::int64_t i = 0; i < b; ++i)
    pick->idx[static_cast<std::size_t>(i)] =
        static_cast<std::int32_t>(i * c + labels[static_cast<std::size_t>(i)]);
  auto selected = ad::apply_map<T>(ad::reshape(log_probs, {b * c}), pick, Shape{b});
  return ad::scale(ad::sum_all(selected), -T{1} / static_cast<T>(b));
}

// Integrated loss on already-computed logits: CE(in) + lambda * H(U; out).
// The uniformity term vanishes when there is no outlier batch.
template <typename T>
ad::Var<T> integrated_loss_from_logits(const ad::Var<T>& in_logits,
                                       const std::vector<std::int32_t>& labels,
                                       const ad::Var<T>& out_logits, T lambda) {
  if (in_logits.value().dim(0) == 0)
    throw ValidationError("integrated_loss: in_batch must be non-empty");
  auto ce = cross_entropy_loss(in_logits, labels);
  if (!out_logits.defined() || out_logits.value().dim(0) == 0 || lambda == T{0}) return ce;
  return ad::add(ce, ad::scale(uniformity_loss(out_logits), lambda));
}

}  // namespace trustdd
