#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "trustdd/common.hpp"
#include "trustdd/tensor.hpp"

// Reverse-mode autodiff over Tensor<T>. Backward passes are composed from the
// same op set, so gradients are themselves differentiable graph nodes; calling
// grad() with create_graph=true supports the second-order objectives
// (gradient matching, unrolled inner loops) at any order.

namespace trustdd::ad {

template <typename T>
class Var;

template <typename T>
struct VarNode {
  Tensor<T> value;
  bool requires_grad = false;
  std::vector<Var<T>> parents;
  // Maps the incoming gradient to per-parent gradients; entries may be empty.
  std::function<std::vector<Var<T>>(const Var<T>& g, const Var<T>& self)> backward;
  const char* op = "";
};

template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<VarNode<T>> n) : node_(std::move(n)) {}

  static Var leaf(Tensor<T> t, bool requires_grad = true) {
    auto n = std::make_shared<VarNode<T>>();
    n->value = std::move(t);
    n->requires_grad = requires_grad;
    n->op = requires_grad ? "leaf" : "const";
    return Var(n);
  }
  static Var constant(Tensor<T> t) { return leaf(std::move(t), false); }

  bool defined() const { return node_ != nullptr; }
  const Tensor<T>& value() const { return node_->value; }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  VarNode<T>* get() const { return node_.get(); }
  const std::shared_ptr<VarNode<T>>& node() const { return node_; }

  Var detached() const { return constant(node_->value); }

 private:
  std::shared_ptr<VarNode<T>> node_;
};

namespace detail {

template <typename T, typename F>
Var<T> make_op(const char* name, Tensor<T> value, std::vector<Var<T>> parents, F&& backward) {
  auto n = std::make_shared<VarNode<T>>();
  n->value = std::move(value);
  n->op = name;
  bool rg = false;
  for (const auto& p : parents) rg = rg || p.requires_grad();
  n->requires_grad = rg;
  if (rg) {
    n->parents = std::move(parents);
    n->backward = std::forward<F>(backward);
  }
  return Var<T>(n);
}

template <typename T>
void check_same_shape(const char* op, const Var<T>& a, const Var<T>& b) {
  if (!a.value().same_shape(b.value()))
    throw ValidationError(std::string(op) + ": shape mismatch " + shape_str(a.value().shape()) +
                          " vs " + shape_str(b.value().shape()));
}

}  // namespace detail

// --- elementwise -----------------------------------------------------------

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::check_same_shape("add", a, b);
  Tensor<T> out{a.value().shape()};
  const T* pa = a.value().data();
  const T* pb = b.value().data();
  T* po = out.data();
  for (std::int64_t i = 0; i < out.size(); ++i) po[i] = pa[i] + pb[i];
  return detail::make_op<T>("add", std::move(out), {a, b},
                            [](const Var<T>& g, const Var<T>&) { return std::vector<Var<T>>{g, g}; });
}

template <typename T>
Var<T> scale(const Var<T>& a, T c);

template <typename T>
Var<T> neg(const Var<T>& a) {
  return scale(a, T{-1});
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  detail::check_same_shape("sub", a, b);
  Tensor<T> out{a.value().shape()};
  const T* pa = a.value().data();
  const T* pb = b.value().data();
  T* po = out.data();
  for (std::int64_t i = 0; i < out.size(); ++i) po[i] = pa[i] - pb[i];
  return detail::make_op<T>("sub", std::move(out), {a, b}, [](const Var<T>& g, const Var<T>&) {
    return std::vector<Var<T>>{g, neg(g)};
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::check_same_shape("mul", a, b);
  Tensor<T> out{a.value().shape()};
  const T* pa = a.value().data();
  const T* pb = b.value().data();
  T* po = out.data();
  for (std::int64_t i = 0; i < out.size(); ++i) po[i] = pa[i] * pb[i];
  return detail::make_op<T>("mul", std::move(out), {a, b}, [a, b](const Var<T>& g, const Var<T>&) {
    return std::vector<Var<T>>{mul(g, b), mul(g, a)};
  });
}

template <typename T>
Var<T> divide(const Var<T>& a, const Var<T>& b) {
  detail::check_same_shape("div", a, b);
  Tensor<T> out{a.value().shape()};
  const T* pa = a.value().data();
  const T* pb = b.value().data();
  T* po = out.data();
  for (std::int64_t i = 0; i < out.size(); ++i) po[i] = pa[i] / pb[i];
  return detail::make_op<T>("div", std::move(out), {a, b}, [a, b](const Var<T>& g, const Var<T>& self) {
    return std::vector<Var<T>>{divide(g, b), neg(divide(mul(g, self), b))};
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T c) {
  Tensor<T> out{a.value().shape()};
  const T* pa = a.value().data();
  T* po = out.data();
  for (std::int64_t i = 0; i < out.size(); ++i) po[i] = pa[i] * c;
  return detail::make_op<T>("scale", std::move(out), {a}, [c](const Var<T>& g, const Var<T>&) {
    return std::vector<Var<T>>{scale(g, c)};
  });
}

template <typename T>
Var<T> add_scalar(const Var<T>& a, T c) {
  Tensor<T> out{a.value().shape()};
  const T* pa = a.value().data();
  T* po = out.data();
  for (std::int64_t i = 0; i < out.size(); ++i) po[i] = pa[i] + c;
  return detail::make_op<T>("add_scalar", std::move(out), {a},
                            [](const Var<T>& g, const Var<T>&) { return std::vector<Var<T>>{g}; });
}

template <typename T>
Var<T> exp(const Var<T>& a) {
  Tensor<T> out{a.value().shape()};
  const T* pa = a.value().data();
  T* po = out.data();
  for (std::int64_t i = 0; i < out.size(); ++i) po[i] = std::exp(pa[i]);
  return detail::make_op<T>("exp", std::move(out), {a}, [](const Var<T>& g, const Var<T>& self) {
    return std::vector<Var<T>>{mul(g, self)};
  });
}

template <typename T>
Var<T> log(const Var<T>& a) {
  Tensor<T> out{a.value().shape()};
  const T* pa = a.value().data();
  T* po = out.data();
  for (std::int64_t i = 0; i < out.size(); ++i) po[i] = std::log(pa[i]);
  return detail::make_op<T>("log", std::move(out), {a}, [a](const Var<T>& g, const Var<T>&) {
    return std::vector<Var<T>>{divide(g, a)};
  });
}

template <typename T>
Var<T> sqrt(const Var<T>& a) {
  Tensor<T> out{a.value().shape()};
  const T* pa = a.value().data();
  T* po = out.data();
  for (std::int64_t i = 0; i < out.size(); ++i) po[i] = std::sqrt(pa[i]);
  return detail::make_op<T>("sqrt", std::move(out), {a}, [](const Var<T>& g, const Var<T>& self) {
    return std::vector<Var<T>>{divide(scale(g, T{0.5}), self)};
  });
}

// Byte mask multiply: linear, self-adjoint, mask is a frozen constant.
template <typename T>
Var<T> mask_mul(const Var<T>& a, std::shared_ptr<std::vector<unsigned char>> mask) {
  if (static_cast<std::int64_t>(mask->size()) != a.value().size())
    throw ValidationError("mask_mul: mask size mismatch");
  Tensor<T> out{a.value().shape()};
  const T* pa = a.value().data();
  T* po = out.data();
  const unsigned char* pm = mask->data();
  for (std::int64_t i = 0; i < out.size(); ++i) po[i] = pm[i] ? pa[i] : T{0};
  return detail::make_op<T>("mask_mul", std::move(out), {a}, [mask](const Var<T>& g, const Var<T>&) {
    return std::vector<Var<T>>{mask_mul(g, mask)};
  });
}

template <typename T>
Var<T> relu(const Var<T>& a) {
  auto mask = std::make_shared<std::vector<unsigned char>>(static_cast<std::size_t>(a.value().size()));
  Tensor<T> out{a.value().shape()};
  const T* pa = a.value().data();
  T* po = out.data();
  for (std::int64_t i = 0; i < out.size(); ++i) {
    const bool pos = pa[i] > T{0};
    (*mask)[static_cast<std::size_t>(i)] = pos;
    po[i] = pos ? pa[i] : T{0};
  }
  return detail::make_op<T>("relu", std::move(out), {a}, [mask](const Var<T>& g, const Var<T>&) {
    return std::vector<Var<T>>{mask_mul(g, mask)};
  });
}

// clip to [0,1]; gradient passes only through the interior.
template <typename T>
Var<T> clip01(const Var<T>& a) {
  auto mask = std::make_shared<std::vector<unsigned char>>(static_cast<std::size_t>(a.value().size()));
  Tensor<T> out{a.value().shape()};
  const T* pa = a.value().data();
  T* po = out.data();
  for (std::int64_t i = 0; i < out.size(); ++i) {
    const T v = pa[i];
    (*mask)[static_cast<std::size_t>(i)] = (v > T{0} && v < T{1});
    po[i] = v < T{0} ? T{0} : (v > T{1} ? T{1} : v);
  }
  return detail::make_op<T>("clip01", std::move(out), {a}, [mask](const Var<T>& g, const Var<T>&) {
    return std::vector<Var<T>>{mask_mul(g, mask)};
  });
}

// --- shape ------------------------------------------------------------------

template <typename T>
Var<T> reshape(const Var<T>& a, Shape shape) {
  Tensor<T> out = a.value().reshaped(shape);
  Shape back = a.value().shape();
  return detail::make_op<T>("reshape", std::move(out), {a}, [back](const Var<T>& g, const Var<T>&) {
    return std::vector<Var<T>>{reshape(g, back)};
  });
}

// --- row/col reductions and broadcasts (2-D) --------------------------------

template <typename T>
Var<T> broadcast_col(const Var<T>& v, std::int64_t cols);

template <typename T>
Var<T> row_sum(const Var<T>& a) {
  const auto& s = a.value().shape();
  if (s.size() != 2) throw ValidationError("row_sum expects 2-D, got " + shape_str(s));
  const std::int64_t r = s[0], c = s[1];
  Tensor<T> out{Shape{r, 1}};
  const T* pa = a.value().data();
  for (std::int64_t i = 0; i < r; ++i) {
    T acc{0};
    const T* row = pa + i * c;
    for (std::int64_t j = 0; j < c; ++j) acc += row[j];
    out[i] = acc;
  }
  return detail::make_op<T>("row_sum", std::move(out), {a}, [c](const Var<T>& g, const Var<T>&) {
    return std::vector<Var<T>>{broadcast_col(g, c)};
  });
}

template <typename T>
Var<T> broadcast_col(const Var<T>& v, std::int64_t cols) {
  const auto& s = v.value().shape();
  if (s.size() != 2 || s[1] != 1) throw ValidationError("broadcast_col expects (r,1), got " + shape_str(s));
  const std::int64_t r = s[0];
  Tensor<T> out{Shape{r, cols}};
  const T* pv = v.value().data();
  T* po = out.data();
  for (std::int64_t i = 0; i < r; ++i)
    for (std::int64_t j = 0; j < cols; ++j) po[i * cols + j] = pv[i];
  return detail::make_op<T>("broadcast_col", std::move(out), {v}, [](const Var<T>& g, const Var<T>&) {
    return std::vector<Var<T>>{row_sum(g)};
  });
}

template <typename T>
Var<T> broadcast_row(const Var<T>& v, std::int64_t rows);

template <typename T>
Var<T> col_sum(const Var<T>& a) {
  const auto& s = a.value().shape();
  if (s.size() != 2) throw ValidationError("col_sum expects 2-D, got " + shape_str(s));
  const std::int64_t r = s[0], c = s[1];
  Tensor<T> out{Shape{1, c}, T{0}};
  const T* pa = a.value().data();
  T* po = out.data();
  for (std::int64_t i = 0; i < r; ++i)
    for (std::int64_t j = 0; j < c; ++j) po[j] += pa[i * c + j];
  return detail::make_op<T>("col_sum", std::move(out), {a}, [r](const Var<T>& g, const Var<T>&) {
    return std::vector<Var<T>>{broadcast_row(g, r)};
  });
}

template <typename T>
Var<T> broadcast_row(const Var<T>& v, std::int64_t rows) {
  const auto& s = v.value().shape();
  if (s.size() != 2 || s[0] != 1) throw ValidationError("broadcast_row expects (1,c), got " + shape_str(s));
  const std::int64_t c = s[1];
  Tensor<T> out{Shape{rows, c}};
  const T* pv = v.value().data();
  T* po = out.data();
  for (std::int64_t i = 0; i < rows; ++i)
    for (std::int64_t j = 0; j < c; ++j) po[i * c + j] = pv[j];
  return detail::make_op<T>("broadcast_row", std::move(out), {v}, [](const Var<T>& g, const Var<T>&) {
    return std::vector<Var<T>>{col_sum(g)};
  });
}

// Fused x - row_value and x * row_value: avoid materializing broadcasts in the
// forward graph (they dominate memory in the normalization layers).
template <typename T>
Var<T> sub_bcol(const Var<T>& x, const Var<T>& v) {
  const auto& s = x.value().shape();
  if (s.size() != 2 || v.value().shape() != Shape{s[0], 1})
    throw ValidationError("sub_bcol: want (r,c) and (r,1)");
  const std::int64_t r = s[0], c = s[1];
  Tensor<T> out{s};
  const T* px = x.value().data();
  const T* pv = v.value().data();
  T* po = out.data();
  for (std::int64_t i = 0; i < r; ++i)
    for (std::int64_t j = 0; j < c; ++j) po[i * c + j] = px[i * c + j] - pv[i];
  return detail::make_op<T>("sub_bcol", std::move(out), {x, v}, [](const Var<T>& g, const Var<T>&) {
    return std::vector<Var<T>>{g, neg(row_sum(g))};
  });
}

template <typename T>
Var<T> mul_bcol(const Var<T>& x, const Var<T>& v) {
  const auto& s = x.value().shape();
  if (s.size() != 2 || v.value().shape() != Shape{s[0], 1})
    throw ValidationError("mul_bcol: want (r,c) and (r,1)");
  const std::int64_t r = s[0], c = s[1];
  Tensor<T> out{s};
  const T* px = x.value().data();
  const T* pv = v.value().data();
  T* po = out.data();
  for (std::int64_t i = 0; i < r; ++i)
    for (std::int64_t j = 0; j < c; ++j) po[i * c + j] = px[i * c + j] * pv[i];
  return detail::make_op<T>("mul_bcol", std::move(out), {x, v}, [x, v](const Var<T>& g, const Var<T>&) {
    return std::vector<Var<T>>{mul_bcol(g, v), row_sum(mul(g, x))};
  });
}

template <typename T>
Var<T> add_bcol(const Var<T>& x, const Var<T>& v) {
  const auto& s = x.value().shape();
  if (s.size() != 2 || v.value().shape() != Shape{s[0], 1})
    throw ValidationError("add_bcol: want (r,c) and (r,1)");
  const std::int64_t r = s[0], c = s[1];
  Tensor<T> out{s};
  const T* px = x.value().data();
  const T* pv = v.value().data();
  T* po = out.data();
  for (std::int64_t i = 0; i < r; ++i)
    for (std::int64_t j = 0; j < c; ++j) po[i * c + j] = px[i * c + j] + pv[i];
  return detail::make_op<T>("add_bcol", std::move(out), {x, v}, [](const Var<T>& g, const Var<T>&) {
    return std::vector<Var<T>>{g, row_sum(g)};
  });
}

// --- global reductions -------------------------------------------------------

template <typename T>
Var<T> broadcast_all(const Var<T>& v, Shape shape);

template <typename T>
Var<T> sum_all(const Var<T>& a) {
  T acc{0};
  const T* pa = a.value().data();
  for (std::int64_t i = 0; i < a.value().size(); ++i) acc += pa[i];
  Shape back = a.value().shape();
  return detail::make_op<T>("sum_all", Tensor<T>::scalar(acc), {a},
                            [back](const Var<T>& g, const Var<T>&) {
                              return std::vector<Var<T>>{broadcast_all(g, back)};
                            });
}

template <typename T>
Var<T> broadcast_all(const Var<T>& v, Shape shape) {
  if (v.value().size() != 1) throw ValidationError("broadcast_all expects scalar");
  Tensor<T> out{shape, v.value()[0]};
  return detail::make_op<T>("broadcast_all", std::move(out), {v}, [](const Var<T>& g, const Var<T>&) {
    return std::vector<Var<T>>{sum_all(g)};
  });
}

template <typename T>
Var<T> mean_all(const Var<T>& a) {
  return scale(sum_all(a), T{1} / static_cast<T>(a.value().size()));
}

// --- matmul family (Eigen backend, no materialized transposes) --------------

namespace detail {
template <typename T>
using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using EMap = Eigen::Map<const EMat<T>>;
template <typename T>
using EMapMut = Eigen::Map<EMat<T>>;
}  // namespace detail

template <typename T>
Var<T> matmul_nt(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> matmul_tn(const Var<T>& a, const Var<T>& b);

// a (m,k) @ b (k,n)
template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  const auto& sa = a.value().shape();
  const auto& sb = b.value().shape();
  if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0])
    throw ValidationError("matmul: " + shape_str(sa) + " @ " + shape_str(sb));
  Tensor<T> out{Shape{sa[0], sb[1]}};
  detail::EMapMut<T>(out.data(), sa[0], sb[1]).noalias() =
      detail::EMap<T>(a.value().data(), sa[0], sa[1]) * detail::EMap<T>(b.value().data(), sb[0], sb[1]);
  return detail::make_op<T>("matmul", std::move(out), {a, b}, [a, b](const Var<T>& g, const Var<T>&) {
    return std::vector<Var<T>>{matmul_nt(g, b), matmul_tn(a, g)};
  });
}

// a (m,k) @ b(n,k)^T -> (m,n)
template <typename T>
Var<T> matmul_nt(const Var<T>& a, const Var<T>& b) {
  const auto& sa = a.value().shape();
  const auto& sb = b.value().shape();
  if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[1])
    throw ValidationError("matmul_nt: " + shape_str(sa) + " @ " + shape_str(sb) + "^T");
  Tensor<T> out{Shape{sa[0], sb[0]}};
  detail::EMapMut<T>(out.data(), sa[0], sb[0]).noalias() =
      detail::EMap<T>(a.value().data(), sa[0], sa[1]) *
      detail::EMap<T>(b.value().data(), sb[0], sb[1]).transpose();
  return detail::make_op<T>("matmul_nt", std::move(out), {a, b}, [a, b](const Var<T>& g, const Var<T>&) {
    return std::vector<Var<T>>{matmul(g, b), matmul_tn(g, a)};
  });
}

// a (k,m)^T @ b (k,n) -> (m,n)
template <typename T>
Var<T> matmul_tn(const Var<T>& a, const Var<T>& b) {
  const auto& sa = a.value().shape();
  const auto& sb = b.value().shape();
  if (sa.size() != 2 || sb.size() != 2 || sa[0] != sb[0])
    throw ValidationError("matmul_tn: " + shape_str(sa) + "^T @ " + shape_str(sb));
  Tensor<T> out{Shape{sa[1], sb[1]}};
  detail::EMapMut<T>(out.data(), sa[1], sb[1]).noalias() =
      detail::EMap<T>(a.value().data(), sa[0], sa[1]).transpose() *
      detail::EMap<T>(b.value().data(), sb[0], sb[1]);
  return detail::make_op<T>("matmul_tn", std::move(out), {a, b}, [a, b](const Var<T>& g, const Var<T>&) {
    return std::vector<Var<T>>{matmul_nt(b, g), matmul(a, g)};
  });
}

// --- sparse linear maps (gather/scatter pairs) -------------------------------

// Fixed-fanin sparse matrix; covers im2col, pooling, permutation, padding,
// bilinear warps. Applying the transpose is the exact adjoint, which makes the
// op pair closed under differentiation.
template <typename T>
struct LinearMap {
  std::int64_t in_size = 0;
  std::int64_t out_size = 0;
  int fanin = 1;
  std::vector<std::int32_t> idx;  // out_size * fanin; -1 reads as zero
  std::vector<T> w;               // same length as idx, or empty for all-ones
};

template <typename T>
Var<T> apply_map(const Var<T>& a, std::shared_ptr<const LinearMap<T>> map, Shape out_shape,
                 bool transposed = false) {
  const std::int64_t expect_in = transposed ? map->out_size : map->in_size;
  const std::int64_t expect_out = transposed ? map->in_size : map->out_size;
  if (a.value().size() != expect_in)
    throw ValidationError("apply_map: input size " + std::to_string(a.value().size()) + " expected " +
                          std::to_string(expect_in));
  if (shape_numel(out_shape) != expect_out) throw ValidationError("apply_map: bad out_shape");
  Tensor<T> out{out_shape};
  const T* px = a.value().data();
  T* po = out.data();
  const std::int32_t* idx = map->idx.data();
  const T* w = map->w.empty() ? nullptr : map->w.data();
  const int k = map->fanin;
  if (!transposed) {
    for (std::int64_t o = 0; o < map->out_size; ++o) {
      T acc{0};
      const std::int64_t base = o * k;
      for (int j = 0; j < k; ++j) {
        const std::int32_t id = idx[base + j];
        if (id >= 0) acc += (w ? w[base + j] : T{1}) * px[id];
      }
      po[o] = acc;
    }
  } else {
    std::fill(po, po + expect_out, T{0});
    for (std::int64_t o = 0; o < map->out_size; ++o) {
      const std::int64_t base = o * k;
      const T go = px[o];
      for (int j = 0; j < k; ++j) {
        const std::int32_t id = idx[base + j];
        if (id >= 0) po[id] += (w ? w[base + j] : T{1}) * go;
      }
    }
  }
  Shape back = a.value().shape();
  return detail::make_op<T>("apply_map", std::move(out), {a},
                            [map, back, transposed](const Var<T>& g, const Var<T>&) {
                              return std::vector<Var<T>>{apply_map(g, map, back, !transposed)};
                            });
}

// --- composites --------------------------------------------------------------

// Row-stabilized log-softmax; the per-row max enters as a constant shift,
// which is exact for gradients almost everywhere.
template <typename T>
Var<T> log_softmax_rows(const Var<T>& x) {
  const auto& s = x.value().shape();
  if (s.size() != 2) throw ValidationError("log_softmax_rows expects 2-D");
  const std::int64_t r = s[0], c = s[1];
  Tensor<T> mx{Shape{r, 1}};
  const T* px = x.value().data();
  for (std::int64_t i = 0; i < r; ++i) {
    T m = px[i * c];
    for (std::int64_t j = 1; j < c; ++j) m = std::max(m, px[i * c + j]);
    mx[i] = m;
  }
  auto shifted = sub_bcol(x, Var<T>::constant(mx));
  auto lse = log(row_sum(exp(shifted)));
  return sub_bcol(shifted, lse);
}

// grad of a scalar output w.r.t. the given inputs. With create_graph the
// returned Vars stay attached for higher-order differentiation; otherwise
// they are detached constants.
template <typename T>
std::vector<Var<T>> grad(const Var<T>& output, const std::vector<Var<T>>& inputs, bool create_graph) {
  if (!output.defined() || output.value().size() != 1)
    throw ValidationError("grad: output must be a defined scalar");

  // Reverse postorder over the requires-grad subgraph = topological order
  // from output towards leaves.
  std::vector<Var<T>> order;
  if (output.requires_grad()) {
    std::unordered_set<VarNode<T>*> visited;
    std::vector<std::pair<Var<T>, std::size_t>> stack;
    visited.insert(output.get());
    stack.emplace_back(output, 0);
    while (!stack.empty()) {
      auto& [v, i] = stack.back();
      VarNode<T>* n = v.get();
      if (i < n->parents.size()) {
        const Var<T>& p = n->parents[i];
        ++i;
        if (p.defined() && p.requires_grad() && !visited.count(p.get())) {
          visited.insert(p.get());
          stack.emplace_back(p, 0);
        }
      } else {
        order.push_back(v);
        stack.pop_back();
      }
    }
  }

  std::unordered_set<VarNode<T>*> wanted;
  for (const auto& in : inputs) wanted.insert(in.get());

  std::unordered_map<VarNode<T>*, Var<T>> acc;
  if (output.requires_grad())
    acc[output.get()] = Var<T>::constant(Tensor<T>::scalar(T{1}));

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    const Var<T>& v = *it;
    VarNode<T>* n = v.get();
    auto git = acc.find(n);
    if (git == acc.end()) continue;
    if (!n->backward) continue;
    Var<T> g = git->second;
    auto parent_grads = n->backward(g, v);
    if (parent_grads.size() != n->parents.size())
      throw Error(std::string("backward of ") + n->op + " returned wrong arity");
    for (std::size_t pi = 0; pi < parent_grads.size(); ++pi) {
      if (!parent_grads[pi].defined()) continue;
      const Var<T>& p = n->parents[pi];
      if (!p.requires_grad()) continue;
      auto pit = acc.find(p.get());
      if (pit == acc.end())
        acc.emplace(p.get(), parent_grads[pi]);
      else
        pit->second = add(pit->second, parent_grads[pi]);
    }
    if (!wanted.count(n)) acc.erase(n);
  }

  std::vector<Var<T>> result;
  result.reserve(inputs.size());
  for (const auto& in : inputs) {
    auto git = acc.find(in.get());
    Var<T> g = (git != acc.end()) ? git->second
                                  : Var<T>::constant(Tensor<T>::zeros(in.value().shape()));
    result.push_back(create_graph ? g : g.detached());
  }
  return result;
}

}  // namespace trustdd::ad
