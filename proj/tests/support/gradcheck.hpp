#pragma once

// Finite-difference comparison of the analytic backward passes against the
// float64 reference layers in reference_ops.hpp. The objective for every op
// is L = sum_i r_i * f(x)_i with fixed random r, so the upstream gradient
// fed to the analytic backward is exactly r.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "firescan/nn.hpp"
#include "firescan/random.hpp"
#include "firescan/tensor.hpp"
#include "reference_ops.hpp"

namespace gradcheck {

using firescan::Rng;
using firescan::Tensor;
using ref::Vec;

struct Check {
  std::string op;
  std::string wrt;
  std::string shape;
  double rel_error = 0;
  bool finite = true;
};

inline Vec random_vec(std::size_t n, Rng& rng, double lo = -1, double hi = 1) {
  Vec v(n);
  for (auto& e : v) e = firescan::uniform(rng, lo, hi);
  return v;
}

// Values bounded away from zero, for the ReLU kink.
inline Vec away_from_zero(std::size_t n, Rng& rng) {
  Vec v(n);
  for (auto& e : v) {
    const double m = firescan::uniform(rng, 0.05, 1.0);
    e = firescan::uniform01(rng) < 0.5 ? -m : m;
  }
  return v;
}

// Distinct values with gaps much larger than the FD step, so no pooling
// window ever changes its winner under perturbation.
inline Vec distinct_values(std::size_t n, Rng& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  firescan::shuffle(order, rng);
  Vec v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = -1.0 + 0.05 * static_cast<double>(order[i]);
  return v;
}

inline Tensor to_tensor(const Vec& v, firescan::Shape s) {
  std::vector<float> f(v.begin(), v.end());
  return Tensor(std::move(s), std::move(f));
}

// The float tensors are what the analytic code sees; use their exact values
// for the reference too so both sides evaluate at the same point.
inline Vec as_float_values(Vec v) {
  for (auto& e : v) e = static_cast<double>(static_cast<float>(e));
  return v;
}

inline bool finite(const Tensor& t) { return t.all_finite(); }

inline void push(std::vector<Check>& out, std::string op, std::string wrt, const firescan::Shape& s,
                 const Tensor& analytic, const Vec& numeric, bool fin) {
  out.push_back({std::move(op), std::move(wrt), firescan::shape_string(s), ref::relative_error(analytic, numeric),
                 fin && analytic.all_finite()});
}

inline void check_conv(std::vector<Check>& out, Rng& rng) {
  const std::size_t N = 1 + firescan::uniform_index(rng, 2), C = 1 + firescan::uniform_index(rng, 3),
                    K = 1 + firescan::uniform_index(rng, 3);
  const std::size_t k = firescan::uniform_index(rng, 2) ? 3 : 1;
  const std::size_t stride = 1 + firescan::uniform_index(rng, 2), pad = k == 3 ? firescan::uniform_index(rng, 2) : 0;
  const std::size_t H = 4 + firescan::uniform_index(rng, 4), W = 4 + firescan::uniform_index(rng, 4);
  const ref::Dims4 xd{N, C, H, W};
  const Vec x = as_float_values(random_vec(xd.size(), rng));
  const Vec w = as_float_values(random_vec(K * C * k * k, rng));
  const Vec b = as_float_values(random_vec(K, rng));
  ref::Dims4 yd{};
  ref::conv2d(x, xd, w, K, k, k, b, stride, pad, &yd);
  const Vec r = as_float_values(random_vec(yd.size(), rng));

  const firescan::nn::ConvGeometry g{stride, pad};
  const Tensor tx = to_tensor(x, {N, C, H, W}), tw = to_tensor(w, {K, C, k, k}), tb = to_tensor(b, {K});
  const Tensor ty = firescan::nn::conv2d_forward(tx, tw, tb, g);
  const auto grads = firescan::nn::conv2d_backward(tx, tw, to_tensor(r, ty.shape()), g);

  auto fx = [&](const Vec& v) { return ref::dot(r, ref::conv2d(v, xd, w, K, k, k, b, stride, pad)); };
  auto fw = [&](const Vec& v) { return ref::dot(r, ref::conv2d(x, xd, v, K, k, k, b, stride, pad)); };
  auto fb = [&](const Vec& v) { return ref::dot(r, ref::conv2d(x, xd, w, K, k, k, v, stride, pad)); };
  const bool fin = finite(ty);
  push(out, "conv2d", "input", tx.shape(), grads.dx, ref::numeric_gradient(fx, x), fin);
  push(out, "conv2d", "weight", tx.shape(), grads.dw, ref::numeric_gradient(fw, w), fin);
  push(out, "conv2d", "bias", tx.shape(), grads.db, ref::numeric_gradient(fb, b), fin);
}

inline void check_transposed_conv(std::vector<Check>& out, Rng& rng) {
  struct Geo {
    std::size_t k, stride, pad;
  };
  static constexpr Geo kGeos[] = {{2, 2, 0}, {2, 2, 0}, {3, 1, 1}, {4, 2, 1}};
  const Geo geo = kGeos[firescan::uniform_index(rng, 4)];
  const std::size_t N = 1 + firescan::uniform_index(rng, 2), Ci = 1 + firescan::uniform_index(rng, 3),
                    Co = 1 + firescan::uniform_index(rng, 3);
  const std::size_t H = 2 + firescan::uniform_index(rng, 4), W = 2 + firescan::uniform_index(rng, 4);
  const ref::Dims4 xd{N, Ci, H, W};
  const std::size_t k = geo.k;
  const Vec x = as_float_values(random_vec(xd.size(), rng));
  const Vec w = as_float_values(random_vec(Ci * Co * k * k, rng));
  const Vec b = as_float_values(random_vec(Co, rng));
  ref::Dims4 yd{};
  ref::transposed_conv2d(x, xd, w, Co, k, b, geo.stride, geo.pad, &yd);
  const Vec r = as_float_values(random_vec(yd.size(), rng));

  const firescan::nn::ConvGeometry g{geo.stride, geo.pad};
  const Tensor tx = to_tensor(x, {N, Ci, H, W}), tw = to_tensor(w, {Ci, Co, k, k}), tb = to_tensor(b, {Co});
  const Tensor ty = firescan::nn::transposed_conv2d_forward(tx, tw, tb, g);
  const auto grads = firescan::nn::transposed_conv2d_backward(tx, tw, to_tensor(r, ty.shape()), g);

  auto fx = [&](const Vec& v) { return ref::dot(r, ref::transposed_conv2d(v, xd, w, Co, k, b, geo.stride, geo.pad)); };
  auto fw = [&](const Vec& v) { return ref::dot(r, ref::transposed_conv2d(x, xd, v, Co, k, b, geo.stride, geo.pad)); };
  auto fb = [&](const Vec& v) { return ref::dot(r, ref::transposed_conv2d(x, xd, w, Co, k, v, geo.stride, geo.pad)); };
  const bool fin = finite(ty);
  push(out, "transposed_conv2d", "input", tx.shape(), grads.dx, ref::numeric_gradient(fx, x), fin);
  push(out, "transposed_conv2d", "weight", tx.shape(), grads.dw, ref::numeric_gradient(fw, w), fin);
  push(out, "transposed_conv2d", "bias", tx.shape(), grads.db, ref::numeric_gradient(fb, b), fin);
}

inline void check_batch_norm(std::vector<Check>& out, Rng& rng) {
  const std::size_t N = 2 + firescan::uniform_index(rng, 2), C = 1 + firescan::uniform_index(rng, 3);
  const std::size_t H = 2 + firescan::uniform_index(rng, 3), W = 2 + firescan::uniform_index(rng, 3);
  const ref::Dims4 d{N, C, H, W};
  const Vec x = as_float_values(random_vec(d.size(), rng, -2, 2));
  const Vec gamma = as_float_values(random_vec(C, rng, 0.5, 1.5));
  const Vec beta = as_float_values(random_vec(C, rng));
  const Vec r = as_float_values(random_vec(d.size(), rng));

  const Tensor tx = to_tensor(x, {N, C, H, W}), tg = to_tensor(gamma, {C}), tb = to_tensor(beta, {C});
  const Tensor rm({C}, 0.0f), rv({C}, 1.0f);
  firescan::nn::BatchNormCache<float> cache;
  const Tensor ty = firescan::nn::batch_norm_forward(tx, tg, tb, rm, rv, firescan::nn::Mode::train, 1e-5, &cache);
  const auto grads = firescan::nn::batch_norm_backward(to_tensor(r, ty.shape()), tg, cache);

  auto fx = [&](const Vec& v) { return ref::dot(r, ref::batch_norm_train(v, d, gamma, beta)); };
  auto fg = [&](const Vec& v) { return ref::dot(r, ref::batch_norm_train(x, d, v, beta)); };
  auto fb = [&](const Vec& v) { return ref::dot(r, ref::batch_norm_train(x, d, gamma, v)); };
  const bool fin = finite(ty);
  push(out, "batch_norm", "input", tx.shape(), grads.dx, ref::numeric_gradient(fx, x), fin);
  push(out, "batch_norm", "gamma", tx.shape(), grads.dw, ref::numeric_gradient(fg, gamma), fin);
  push(out, "batch_norm", "beta", tx.shape(), grads.db, ref::numeric_gradient(fb, beta), fin);
}

inline void check_max_pool(std::vector<Check>& out, Rng& rng) {
  const std::size_t N = 1 + firescan::uniform_index(rng, 2), C = 1 + firescan::uniform_index(rng, 3);
  const std::size_t H = 2 * (1 + firescan::uniform_index(rng, 3)), W = 2 * (1 + firescan::uniform_index(rng, 3));
  const ref::Dims4 d{N, C, H, W};
  const Vec x = as_float_values(distinct_values(d.size(), rng));
  const Vec r = as_float_values(random_vec(d.size() / 4, rng));
  const Tensor tx = to_tensor(x, {N, C, H, W});
  std::vector<std::uint32_t> argmax;
  const Tensor ty = firescan::nn::max_pool2_forward(tx, &argmax);
  const Tensor dx = firescan::nn::max_pool2_backward(to_tensor(r, ty.shape()), argmax, tx.shape());
  auto fx = [&](const Vec& v) { return ref::dot(r, ref::max_pool2(v, d)); };
  push(out, "max_pool2", "input", tx.shape(), dx, ref::numeric_gradient(fx, x), finite(ty));
}

inline void check_global_max_pool(std::vector<Check>& out, Rng& rng) {
  const std::size_t N = 1 + firescan::uniform_index(rng, 2), C = 1 + firescan::uniform_index(rng, 3);
  const std::size_t H = 1 + firescan::uniform_index(rng, 4), W = 1 + firescan::uniform_index(rng, 4);
  const ref::Dims4 d{N, C, H, W};
  const Vec x = as_float_values(distinct_values(d.size(), rng));
  const Vec r = as_float_values(random_vec(N * C, rng));
  const Tensor tx = to_tensor(x, {N, C, H, W});
  std::vector<std::uint32_t> argmax;
  const Tensor ty = firescan::nn::global_max_pool_forward(tx, &argmax);
  const Tensor dx = firescan::nn::global_max_pool_backward(to_tensor(r, ty.shape()), argmax, tx.shape());
  auto fx = [&](const Vec& v) { return ref::dot(r, ref::global_max_pool(v, d)); };
  push(out, "global_max_pool", "input", tx.shape(), dx, ref::numeric_gradient(fx, x), finite(ty));
}

inline void check_dense(std::vector<Check>& out, Rng& rng) {
  const std::size_t N = 1 + firescan::uniform_index(rng, 4), F = 1 + firescan::uniform_index(rng, 8),
                    O = 1 + firescan::uniform_index(rng, 3);
  const Vec x = as_float_values(random_vec(N * F, rng));
  const Vec w = as_float_values(random_vec(F * O, rng));
  const Vec b = as_float_values(random_vec(O, rng));
  const Vec r = as_float_values(random_vec(N * O, rng));
  const Tensor tx = to_tensor(x, {N, F}), tw = to_tensor(w, {F, O}), tb = to_tensor(b, {O});
  const Tensor ty = firescan::nn::dense_forward(tx, tw, tb);
  const auto grads = firescan::nn::dense_backward(tx, tw, to_tensor(r, ty.shape()));
  auto fx = [&](const Vec& v) { return ref::dot(r, ref::dense(v, N, F, w, O, b)); };
  auto fw = [&](const Vec& v) { return ref::dot(r, ref::dense(x, N, F, v, O, b)); };
  auto fb = [&](const Vec& v) { return ref::dot(r, ref::dense(x, N, F, w, O, v)); };
  const bool fin = finite(ty);
  push(out, "dense", "input", tx.shape(), grads.dx, ref::numeric_gradient(fx, x), fin);
  push(out, "dense", "weight", tx.shape(), grads.dw, ref::numeric_gradient(fw, w), fin);
  push(out, "dense", "bias", tx.shape(), grads.db, ref::numeric_gradient(fb, b), fin);
}

inline void check_activations(std::vector<Check>& out, Rng& rng) {
  const std::size_t n = 1 + firescan::uniform_index(rng, 40);
  const firescan::Shape s{1, 1, 1, n};
  {
    const Vec x = as_float_values(away_from_zero(n, rng));
    const Vec r = as_float_values(random_vec(n, rng));
    const Tensor tx = to_tensor(x, s);
    const Tensor ty = firescan::nn::relu_forward(tx);
    const Tensor dx = firescan::nn::relu_backward(tx, to_tensor(r, s));
    auto f = [&](const Vec& v) { return ref::dot(r, ref::relu(v)); };
    push(out, "relu", "input", s, dx, ref::numeric_gradient(f, x), finite(ty));
  }
  {
    const Vec x = as_float_values(random_vec(n, rng, -6, 6));
    const Vec r = as_float_values(random_vec(n, rng));
    const Tensor tx = to_tensor(x, s);
    const Tensor ty = firescan::nn::sigmoid_forward(tx);
    const Tensor dx = firescan::nn::sigmoid_backward(ty, to_tensor(r, s));
    auto f = [&](const Vec& v) { return ref::dot(r, ref::sigmoid(v)); };
    push(out, "sigmoid", "input", s, dx, ref::numeric_gradient(f, x), finite(ty));
  }
}

inline void check_losses(std::vector<Check>& out, Rng& rng) {
  const std::size_t n = 1 + firescan::uniform_index(rng, 30);
  const double w = firescan::uniform(rng, 1.0, 60.0);
  const firescan::Shape s{n};
  Vec t(n);
  for (auto& e : t) e = firescan::uniform01(rng) < 0.4 ? 1.0 : 0.0;
  const firescan::nn::LossConfig cfg{w};
  const Tensor tt = to_tensor(t, s);
  {
    const Vec p = as_float_values(random_vec(n, rng, 0.05, 0.95));
    const Tensor tp = to_tensor(p, s);
    const Tensor d = firescan::nn::weighted_bce_backward(tp, tt, cfg);
    auto f = [&](const Vec& v) { return ref::weighted_bce(v, t, w); };
    // FD step scaled down: p stays inside (0,1) and the log is steep near the ends.
    push(out, "weighted_bce", "prediction", s, d, ref::numeric_gradient(f, p, 1e-5),
         std::isfinite(firescan::nn::weighted_bce(tp, tt, cfg)));
  }
  {
    const Vec z = as_float_values(random_vec(n, rng, -5, 5));
    const auto lg = firescan::nn::weighted_bce_with_logits(to_tensor(z, s), tt, cfg);
    auto f = [&](const Vec& v) { return ref::weighted_bce(ref::sigmoid(v), t, w); };
    push(out, "weighted_bce_with_logits", "logit", s, lg.grad, ref::numeric_gradient(f, z), std::isfinite(lg.loss));
  }
}

// Every op is checked on `shapes_per_op` independently drawn shapes.
inline std::vector<Check> run_suite(std::uint64_t seed, int shapes_per_op = 5) {
  Rng rng(seed);
  std::vector<Check> out;
  for (int i = 0; i < shapes_per_op; ++i) {
    check_conv(out, rng);
    check_transposed_conv(out, rng);
    check_batch_norm(out, rng);
    check_max_pool(out, rng);
    check_global_max_pool(out, rng);
    check_dense(out, rng);
    check_activations(out, rng);
    check_losses(out, rng);
  }
  return out;
}

}  // namespace gradcheck
