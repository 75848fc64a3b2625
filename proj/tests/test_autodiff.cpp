#include <catch2/catch_amalgamated.hpp>
#include <cmath>
#include <functional>

#include "trustdd/autodiff.hpp"
#include "trustdd/rng.hpp"

using namespace trustdd;
using namespace trustdd::ad;

namespace {

// Central finite differences of a scalar-valued function of one leaf tensor.
Tensor<double> fd_grad(const std::function<double(const Tensor<double>&)>& f, Tensor<double> x,
                       double h = 1e-6) {
  Tensor<double> g{x.shape()};
  for (std::int64_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + h;
    const double fp = f(x.clone());
    x[i] = keep - h;
    const double fm = f(x.clone());
    x[i] = keep;
    g[i] = (fp - fm) / (2 * h);
  }
  return g;
}

double max_rel_err(const Tensor<double>& a, const Tensor<double>& b) {
  double worst = 0;
  for (std::int64_t i = 0; i < a.size(); ++i) {
    const double denom = std::max({std::abs(a[i]), std::abs(b[i]), 1e-8});
    worst = std::max(worst, std::abs(a[i] - b[i]) / denom);
  }
  return worst;
}

Tensor<double> random_tensor(Shape s, Rng& rng, double lo = -1, double hi = 1) {
  Tensor<double> t{std::move(s)};
  for (std::int64_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

}  // namespace

TEST_CASE("elementwise ops match finite differences") {
  Rng rng(7);
  auto x0 = random_tensor({3, 4}, rng, 0.2, 1.8);
  auto y0 = random_tensor({3, 4}, rng, 0.2, 1.8);

  auto f = [&](const Tensor<double>& xt) {
    auto x = Var<double>::leaf(xt);
    auto y = Var<double>::constant(y0);
    auto z = mul(add(x, y), sub(exp(scale(x, 0.3)), divide(y, add_scalar(x, 2.0))));
    return sum_all(log(add_scalar(mul(z, z), 1.0))).value()[0];
  };
  auto fx = [&](const Tensor<double>& xt) { return f(xt); };

  auto x = Var<double>::leaf(x0);
  auto y = Var<double>::constant(y0);
  auto z = mul(add(x, y), sub(exp(scale(x, 0.3)), divide(y, add_scalar(x, 2.0))));
  auto loss = sum_all(log(add_scalar(mul(z, z), 1.0)));
  auto g = grad(loss, {x}, false);

  CHECK(max_rel_err(g[0].value(), fd_grad(fx, x0)) < 1e-6);
}

TEST_CASE("matmul family and reductions match finite differences") {
  Rng rng(11);
  auto a0 = random_tensor({3, 5}, rng);
  auto b0 = random_tensor({5, 2}, rng);

  auto build = [&](const Var<double>& a, const Var<double>& b) {
    auto c = matmul(a, b);                      // (3,2)
    auto d = matmul_nt(c, Var<double>::constant(random_tensor({4, 2}, rng)));
    (void)d;
    auto e = matmul_tn(a, a);                   // (5,5)
    auto r = add(row_sum(c), scale(row_sum(mul_bcol(c, row_sum(c))), 0.5));
    auto s = col_sum(e);
    return add(sum_all(r), sum_all(mul(s, s)));
  };

  Rng rng_fixed(11);
  (void)rng_fixed;
  auto fa = [&](const Tensor<double>& at) {
    Rng r2(99);
    auto a = Var<double>::leaf(at);
    auto b = Var<double>::constant(b0);
    auto c = matmul(a, b);
    auto e = matmul_tn(a, a);
    auto r = add(row_sum(c), scale(row_sum(mul_bcol(c, row_sum(c))), 0.5));
    auto s = col_sum(e);
    return add(sum_all(r), sum_all(mul(s, s))).value()[0];
  };

  auto a = Var<double>::leaf(a0);
  auto b = Var<double>::constant(b0);
  auto c = matmul(a, b);
  auto e = matmul_tn(a, a);
  auto r = add(row_sum(c), scale(row_sum(mul_bcol(c, row_sum(c))), 0.5));
  auto s = col_sum(e);
  auto loss = add(sum_all(r), sum_all(mul(s, s)));
  auto g = grad(loss, {a}, false);

  CHECK(max_rel_err(g[0].value(), fd_grad(fa, a0)) < 1e-6);
}

TEST_CASE("apply_map gather/scatter is a correct adjoint pair") {
  Rng rng(3);
  auto map = std::make_shared<LinearMap<double>>();
  map->in_size = 6;
  map->out_size = 8;
  map->fanin = 2;
  map->idx = {0, 1, 2, -1, 3, 4, 5, 0, 1, 3, -1, -1, 2, 5, 4, 0};
  map->w = {0.5, 1.5, 1.0, 0.0, 2.0, -1.0, 0.25, 0.75, 1.0, -0.5, 0.0, 0.0, 3.0, 1.0, 0.5, 0.5};

  auto x0 = random_tensor({6}, rng);
  auto f = [&](const Tensor<double>& xt) {
    auto x = Var<double>::leaf(xt);
    auto y = apply_map<double>(x, map, Shape{8});
    return sum_all(mul(y, y)).value()[0];
  };
  auto x = Var<double>::leaf(x0);
  auto y = apply_map<double>(x, map, Shape{8});
  auto loss = sum_all(mul(y, y));
  auto g = grad(loss, {x}, false);
  CHECK(max_rel_err(g[0].value(), fd_grad(f, x0)) < 1e-6);

  // <Ax, z> == <x, A^T z> on random vectors
  auto z0 = random_tensor({8}, rng);
  auto lhs = sum_all(mul(apply_map<double>(Var<double>::constant(x0), map, Shape{8}),
                         Var<double>::constant(z0)));
  auto rhs = sum_all(mul(Var<double>::constant(x0),
                         apply_map<double>(Var<double>::constant(z0), map, Shape{6}, true)));
  CHECK(lhs.value()[0] == Catch::Approx(rhs.value()[0]).epsilon(1e-12));
}

TEST_CASE("log_softmax rows sum to one in probability space") {
  Rng rng(5);
  auto x0 = random_tensor({7, 9}, rng, -30, 30);
  auto lp = log_softmax_rows(Var<double>::constant(x0));
  for (std::int64_t i = 0; i < 7; ++i) {
    double s = 0;
    for (std::int64_t j = 0; j < 9; ++j) s += std::exp(lp.value()[i * 9 + j]);
    CHECK(s == Catch::Approx(1.0).margin(1e-6));
  }
}

TEST_CASE("second-order: grad of gradient-norm matches finite differences") {
  // phi(x) = || d/dx f(x) ||^2 with f = sum(exp(0.5*x) * w); checks that
  // create_graph grads are themselves differentiable.
  Rng rng(13);
  auto x0 = random_tensor({4}, rng, -0.5, 0.5);
  auto w0 = random_tensor({4}, rng, 0.5, 1.5);

  auto phi = [&](const Tensor<double>& xt) {
    auto x = Var<double>::leaf(xt);
    auto f = sum_all(mul(exp(scale(x, 0.5)), Var<double>::constant(w0)));
    auto gx = grad(f, {x}, true)[0];
    return sum_all(mul(gx, gx)).value()[0];
  };

  auto x = Var<double>::leaf(x0);
  auto f = sum_all(mul(exp(scale(x, 0.5)), Var<double>::constant(w0)));
  auto gx = grad(f, {x}, true)[0];
  auto norm2 = sum_all(mul(gx, gx));
  auto gg = grad(norm2, {x}, false);

  CHECK(max_rel_err(gg[0].value(), fd_grad(phi, x0)) < 1e-6);

  // analytic cross-check: phi = sum (0.5 w e^{x/2})^2, dphi/dx_i = 0.25 w_i^2 e^{x_i}
  for (std::int64_t i = 0; i < 4; ++i) {
    const double expect = 0.25 * w0[i] * w0[i] * std::exp(x0[i]);
    CHECK(gg[0].value()[i] == Catch::Approx(expect).epsilon(1e-9));
  }
}

TEST_CASE("second-order through an unrolled SGD step") {
  // theta' = theta - a * dL/dtheta with L = 0.5*sum((theta - s)^2);
  // final = sum(theta'^2). d final/d s = 2a(theta - a(theta - s)) must flow
  // through the inner gradient.
  Rng rng(17);
  auto s0 = random_tensor({3}, rng);
  auto th0 = random_tensor({3}, rng);
  const double a = 0.3;

  auto run = [&](const Tensor<double>& st) {
    auto s = Var<double>::leaf(st);
    auto theta = Var<double>::leaf(th0);
    auto diff = sub(theta, s);
    auto inner = scale(sum_all(mul(diff, diff)), 0.5);
    auto gtheta = grad(inner, {theta}, true)[0];
    auto theta1 = sub(theta, scale(gtheta, a));
    return sum_all(mul(theta1, theta1));
  };

  auto s = Var<double>::leaf(s0);
  auto theta = Var<double>::leaf(th0);
  auto diff = sub(theta, s);
  auto inner = scale(sum_all(mul(diff, diff)), 0.5);
  auto gtheta = grad(inner, {theta}, true)[0];
  auto theta1 = sub(theta, scale(gtheta, a));
  auto final_loss = sum_all(mul(theta1, theta1));
  auto gs = grad(final_loss, {s}, false);

  for (std::int64_t i = 0; i < 3; ++i) {
    const double theta1_i = th0[i] - a * (th0[i] - s0[i]);
    const double expect = 2.0 * theta1_i * a;
    CHECK(gs[0].value()[i] == Catch::Approx(expect).epsilon(1e-10));
  }

  auto fd = fd_grad([&](const Tensor<double>& st) { return run(st).value()[0]; }, s0);
  CHECK(max_rel_err(gs[0].value(), fd) < 1e-6);
}

TEST_CASE("relu clip and masks pass gradients only in the interior") {
  Tensor<double> x0{Shape{5}, {0.5, -0.5, 1.5, 0.2, 0.9}};
  auto x = Var<double>::leaf(x0);
  auto y = clip01(x);
  auto loss = sum_all(mul(y, y));
  auto g = grad(loss, {x}, false)[0];
  CHECK(g.value()[0] == Catch::Approx(1.0));
  CHECK(g.value()[1] == 0.0);   // clipped below
  CHECK(g.value()[2] == 0.0);   // clipped above
  CHECK(g.value()[3] == Catch::Approx(0.4));

  auto r = relu(x);
  CHECK(r.value()[1] == 0.0);
  CHECK(r.value()[2] == 1.5);
}

TEST_CASE("grad returns zeros for disconnected inputs") {
  auto x = Var<double>::leaf(Tensor<double>::scalar(2.0));
  auto y = Var<double>::leaf(Tensor<double>::scalar(3.0));
  auto loss = mul(x, x);
  auto g = grad(loss, {x, y}, false);
  CHECK(g[0].value()[0] == Catch::Approx(4.0));
  CHECK(g[1].value()[0] == 0.0);
}
