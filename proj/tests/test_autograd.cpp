// Finite-difference checks of every differentiable primitive, run in
// wide-scalar (double) mode with step 1e-4 and a 1e-6 relative bound.
// Inputs are drawn away from activation kinks so the central difference
// stays on one linear piece.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "oracles.hpp"
#include "vesselforge/ops.hpp"

using namespace vesselforge;
using DTensor = TensorT<double>;

namespace {

constexpr double kTol = 1e-6;

DTensor randn_d(std::vector<std::int64_t> shape, Pcg32& rng, double sd = 1.0,
                bool rg = true) {
  return DTensor::randn(std::move(shape), rng, 0.0, sd, rg);
}

// Random values with |v| >= margin, for paths through relu/leaky kinks.
DTensor randn_margin(std::vector<std::int64_t> shape, Pcg32& rng, double margin,
                     bool rg = true) {
  auto t = DTensor::randn(std::move(shape), rng, 0.0, 1.0, rg);
  for (auto& v : t.data()) v += v >= 0.0 ? margin : -margin;
  return t;
}

}  // namespace

TEST_CASE("gradcheck: conv2d w.r.t. input, weight, bias") {
  Pcg32 rng(101);
  for (auto [stride, padding, dilation] :
       {std::tuple{1, 1, 1}, std::tuple{2, 1, 1}, std::tuple{1, 2, 2}}) {
    auto x = randn_d({2, 3, 7, 6}, rng);
    auto w = randn_d({4, 3, 3, 3}, rng, 0.5);
    auto b = randn_d({4}, rng, 0.5);
    const int s = stride, p = padding, d = dilation;
    auto fn = [&] { return mean_all(mul(conv2d(x, w, b, s, p, d), conv2d(x, w, b, s, p, d))); };
    auto res = oracle::gradcheck(fn, {x, w, b});
    CHECK(res.max_rel_error < kTol);
  }
}

TEST_CASE("gradcheck: conv_transpose2d w.r.t. input, weight, bias") {
  Pcg32 rng(102);
  for (auto [stride, padding] : {std::pair{1, 0}, std::pair{2, 1}}) {
    auto x = randn_d({2, 3, 5, 4}, rng);
    auto w = randn_d({3, 2, 4, 4}, rng, 0.5);
    auto b = randn_d({2}, rng, 0.5);
    const int s = stride, p = padding;
    auto fn = [&] {
      auto y = conv_transpose2d(x, w, b, s, p);
      return mean_all(mul(y, y));
    };
    auto res = oracle::gradcheck(fn, {x, w, b});
    CHECK(res.max_rel_error < kTol);
  }
}

TEST_CASE("gradcheck: pooling and upsampling") {
  Pcg32 rng(103);
  auto x = randn_d({2, 2, 7, 5}, rng);
  auto fn_pool = [&] {
    auto y = adaptive_avg_pool2d(x, 3, 2);
    return mean_all(mul(y, y));
  };
  CHECK(oracle::gradcheck(fn_pool, {x}).max_rel_error < kTol);

  auto fn_gap = [&] {
    auto y = global_avg_pool(x);
    return mean_all(mul(y, y));
  };
  CHECK(oracle::gradcheck(fn_gap, {x}).max_rel_error < kTol);

  auto fn_up = [&] {
    auto y = upsample_bilinear(x, 13, 11);
    return mean_all(mul(y, y));
  };
  CHECK(oracle::gradcheck(fn_up, {x}).max_rel_error < kTol);
}

TEST_CASE("gradcheck: activations") {
  Pcg32 rng(104);
  auto x = randn_margin({3, 4}, rng, 0.05);
  auto fn_relu = [&] { return mean_all(mul(relu(x), relu(x))); };
  CHECK(oracle::gradcheck(fn_relu, {x}).max_rel_error < kTol);

  auto fn_leaky = [&] { return mean_all(mul(leaky_relu(x, 0.2), leaky_relu(x, 0.2))); };
  CHECK(oracle::gradcheck(fn_leaky, {x}).max_rel_error < kTol);

  auto y = randn_d({3, 4}, rng);
  auto fn_sig = [&] { return mean_all(mul(sigmoid(y), sigmoid(y))); };
  CHECK(oracle::gradcheck(fn_sig, {y}).max_rel_error < kTol);

  auto fn_tanh = [&] { return mean_all(mul(tanh_act(y), tanh_act(y))); };
  CHECK(oracle::gradcheck(fn_tanh, {y}).max_rel_error < kTol);
}

TEST_CASE("gradcheck: batchnorm train and eval") {
  Pcg32 rng(105);
  auto x = randn_d({3, 2, 4, 4}, rng);
  auto gamma = randn_d({2}, rng, 0.3);
  for (auto& v : gamma.data()) v += 1.0;
  auto beta = randn_d({2}, rng, 0.3);
  // Project onto a fixed random direction: mean(y*y) is nearly invariant to
  // single-element changes under normalization, which starves the finite
  // difference of signal.
  auto proj = randn_d({3, 2, 4, 4}, rng, 1.0, false);

  auto fn_train = [&] {
    auto rm = DTensor::zeros({2});
    auto rv = DTensor::filled({2}, 1.0);
    auto y = batchnorm2d(x, gamma, beta, rm, rv, Mode::kTrain);
    return sum_all(mul(y, proj));
  };
  CHECK(oracle::gradcheck(fn_train, {x, gamma, beta}).max_rel_error < kTol);

  auto rm = randn_d({2}, rng, 0.2, false);
  auto rv = DTensor::filled({2}, 1.3);
  auto fn_eval = [&] {
    auto y = batchnorm2d(x, gamma, beta, rm, rv, Mode::kEval);
    return sum_all(mul(y, proj));
  };
  CHECK(oracle::gradcheck(fn_eval, {x, gamma, beta}).max_rel_error < kTol);
}

TEST_CASE("gradcheck: dropout with a fixed mask") {
  Pcg32 rng(106);
  auto x = randn_d({4, 5}, rng);
  auto fn = [&] {
    Pcg32 mask_rng(999);
    auto y = dropout(x, 0.4, Mode::kTrain, mask_rng);
    return mean_all(mul(y, y));
  };
  CHECK(oracle::gradcheck(fn, {x}).max_rel_error < kTol);
}

TEST_CASE("gradcheck: concat, slice, linear, channel gating") {
  Pcg32 rng(107);
  auto a = randn_d({2, 2, 3, 3}, rng);
  auto b = randn_d({2, 3, 3, 3}, rng);
  auto fn_cat = [&] {
    auto y = slice_channels(concat_channels(a, b), 1, 3);
    return mean_all(mul(y, y));
  };
  CHECK(oracle::gradcheck(fn_cat, {a, b}).max_rel_error < kTol);

  auto x = randn_d({3, 4}, rng);
  auto w = randn_d({2, 4}, rng, 0.5);
  auto bias = randn_d({2}, rng, 0.5);
  auto fn_lin = [&] {
    auto y = linear(x, w, bias);
    return mean_all(mul(y, y));
  };
  CHECK(oracle::gradcheck(fn_lin, {x, w, bias}).max_rel_error < kTol);

  auto feat = randn_d({2, 3, 4, 4}, rng);
  auto gate = randn_d({2, 3}, rng, 0.5);
  auto fn_gate = [&] {
    auto y = scale_channels(feat, gate);
    return mean_all(mul(y, y));
  };
  CHECK(oracle::gradcheck(fn_gate, {feat, gate}).max_rel_error < kTol);
}

TEST_CASE("gradcheck: reductions and arithmetic") {
  Pcg32 rng(108);
  auto x = randn_d({3, 3}, rng);
  auto y = randn_d({3, 3}, rng);
  auto fn = [&] {
    auto s = add(scale(mul(x, y), 0.5), mul(x, x));
    return add(sum_all(s), mean_all(y));
  };
  CHECK(oracle::gradcheck(fn, {x, y}).max_rel_error < kTol);
}

TEST_CASE("unreached parameters keep empty grads") {
  Pcg32 rng(109);
  auto used = randn_d({2, 2}, rng);
  auto unused = randn_d({2, 2}, rng);
  auto loss = sum_all(mul(used, used));
  backward(loss);
  CHECK(used.has_grad());
  CHECK_FALSE(unused.has_grad());
}
