#include <doctest.h>

#include "testutil.hpp"
#include "voxopt/nn.hpp"
#include "voxopt/ops.hpp"

using namespace voxopt;
using namespace voxopt::testutil;

namespace {

Tensor<double> randn(Rng& rng, std::vector<std::int64_t> shape) {
  return Tensor<double>::randn(std::move(shape), rng);
}

// Shifts values away from zero so kinked activations (relu, abs-like norms)
// are finite-difference safe.
Tensor<double> randn_off_zero(Rng& rng, std::vector<std::int64_t> shape, double margin = 0.2) {
  Tensor<double> t = randn(rng, std::move(shape));
  for (std::int64_t i = 0; i < t.numel(); ++i) {
    t[i] += (t[i] >= 0.0 ? margin : -margin);
  }
  return t;
}

// Direct triple-loop convolution used as an independent oracle for the
// GEMM-based implementation.
Tensor<double> naive_conv3d(const Tensor<double>& x, const Tensor<double>& w, std::int64_t stride,
                            std::int64_t pad, double wscale) {
  const std::int64_t B = x.dim(0), Ci = x.dim(1), D = x.dim(2), H = x.dim(3), W = x.dim(4);
  const std::int64_t Co = w.dim(0), K = w.dim(2);
  const std::int64_t Do = (D + 2 * pad - K) / stride + 1;
  const std::int64_t Ho = (H + 2 * pad - K) / stride + 1;
  const std::int64_t Wo = (W + 2 * pad - K) / stride + 1;
  Tensor<double> y({B, Co, Do, Ho, Wo});
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t co = 0; co < Co; ++co)
      for (std::int64_t zo = 0; zo < Do; ++zo)
        for (std::int64_t yo = 0; yo < Ho; ++yo)
          for (std::int64_t xo = 0; xo < Wo; ++xo) {
            double acc = 0.0;
            for (std::int64_t ci = 0; ci < Ci; ++ci)
              for (std::int64_t dz = 0; dz < K; ++dz)
                for (std::int64_t dy = 0; dy < K; ++dy)
                  for (std::int64_t dx = 0; dx < K; ++dx) {
                    const std::int64_t z = zo * stride + dz - pad;
                    const std::int64_t yy = yo * stride + dy - pad;
                    const std::int64_t xx = xo * stride + dx - pad;
                    if (z < 0 || z >= D || yy < 0 || yy >= H || xx < 0 || xx >= W) continue;
                    acc += x[(((b * Ci + ci) * D + z) * H + yy) * W + xx] *
                           w[(((co * Ci + ci) * K + dz) * K + dy) * K + dx] * wscale;
                  }
            y[(((b * Co + co) * Do + zo) * Ho + yo) * Wo + xo] = acc;
          }
  return y;
}

}  // namespace

TEST_CASE("elementwise op gradients match finite differences") {
  Rng rng(11);
  std::vector<Tensor<double>> in = {randn(rng, {3, 4}), randn(rng, {3, 4})};
  auto res = grad_check(in, [](Tape<double>& t, const std::vector<Var>& v) {
    Var a = ops::add(t, v[0], v[1]);
    Var b = ops::sub(t, a, v[1]);
    Var c = ops::mul(t, b, v[0]);
    Var d = ops::scale_const(t, c, 1.7);
    return weighted_sum(t, d);
  });
  CHECK(res.checked == 24);
  CHECK(res.max_rel_err < 1e-7);
}

TEST_CASE("activation gradients match finite differences") {
  Rng rng(12);
  std::vector<Tensor<double>> in = {randn_off_zero(rng, {4, 5})};
  auto res = grad_check(in, [](Tape<double>& t, const std::vector<Var>& v) {
    Var a = ops::leaky_relu(t, v[0], 0.2, std::sqrt(2.0));
    Var b = ops::tanh_act(t, a);
    return weighted_sum(t, b);
  });
  CHECK(res.max_rel_err < 1e-6);
}

TEST_CASE("linear gradients, with and without bias") {
  Rng rng(13);
  std::vector<Tensor<double>> in = {randn(rng, {3, 5}), randn(rng, {4, 5}), randn(rng, {4})};
  const double ws = wscale_for<double>(5);
  auto res = grad_check(in, [ws](Tape<double>& t, const std::vector<Var>& v) {
    Var y = ops::linear(t, v[0], v[1], v[2], ws);
    return weighted_sum(t, y);
  });
  CHECK(res.max_rel_err < 1e-7);

  std::vector<Tensor<double>> in2 = {randn(rng, {2, 5}), randn(rng, {3, 5})};
  auto res2 = grad_check(in2, [ws](Tape<double>& t, const std::vector<Var>& v) {
    Var y = ops::linear(t, v[0], v[1], Var{}, ws);
    return weighted_sum(t, y);
  });
  CHECK(res2.max_rel_err < 1e-7);
}

TEST_CASE("embedding lookup forwards rows and scatters gradients") {
  Rng rng(14);
  std::vector<Tensor<double>> in = {randn(rng, {6, 3})};
  std::vector<int> ids = {2, 2, 0, 5};
  auto res = grad_check(in, [ids](Tape<double>& t, const std::vector<Var>& v) {
    Var y = ops::embed(t, v[0], ids);
    return weighted_sum(t, y);
  });
  CHECK(res.max_rel_err < 1e-8);

  Tape<double> tape;
  Var table = tape.leaf(in[0], false);
  Var y = ops::embed(tape, table, {1, 4});
  CHECK(tape.val(y).dim(0) == 2);
  CHECK(tape.val(y)[0] == in[0][1 * 3 + 0]);
  CHECK(tape.val(y)[5] == in[0][4 * 3 + 2]);
  CHECK_THROWS_AS(ops::embed(tape, table, {6}), ValidationError);
  CHECK_THROWS_AS(ops::embed(tape, table, {-1}), ValidationError);
}

TEST_CASE("concatenation gradients split correctly") {
  Rng rng(15);
  std::vector<Tensor<double>> in = {randn(rng, {3, 2}), randn(rng, {3, 4})};
  auto res = grad_check(in, [](Tape<double>& t, const std::vector<Var>& v) {
    return weighted_sum(t, ops::concat_cols(t, v[0], v[1]));
  });
  CHECK(res.max_rel_err < 1e-8);

  std::vector<Tensor<double>> in2 = {randn(rng, {2, 2, 3, 3, 3}), randn(rng, {2, 1, 3, 3, 3})};
  auto res2 = grad_check(in2, [](Tape<double>& t, const std::vector<Var>& v) {
    return weighted_sum(t, ops::concat_channels(t, v[0], v[1]));
  });
  CHECK(res2.max_rel_err < 1e-8);
}

TEST_CASE("row normalization gradient matches finite differences") {
  Rng rng(16);
  std::vector<Tensor<double>> in = {randn(rng, {4, 6})};
  auto res = grad_check(in, [](Tape<double>& t, const std::vector<Var>& v) {
    return weighted_sum(t, ops::pixel_norm_rows(t, v[0]));
  });
  CHECK(res.max_rel_err < 1e-6);
}

TEST_CASE("pixel norm produces unit RMS rows") {
  Rng rng(17);
  Tape<double> t;
  Var x = t.leaf(randn(rng, {3, 8}), false);
  Var y = ops::pixel_norm_rows(t, x);
  for (std::int64_t r = 0; r < 3; ++r) {
    double ss = 0.0;
    for (std::int64_t i = 0; i < 8; ++i) ss += t.val(y)[r * 8 + i] * t.val(y)[r * 8 + i];
    CHECK(std::abs(ss / 8.0 - 1.0) < 1e-6);
  }
}

TEST_CASE("conv3d matches a direct triple-loop convolution") {
  Rng rng(18);
  struct Case {
    std::int64_t stride, pad, k;
  };
  for (Case c : {Case{1, 1, 3}, Case{2, 1, 3}, Case{1, 0, 1}}) {
    Tensor<double> x = randn(rng, {2, 3, 4, 4, 4});
    Tensor<double> w = randn(rng, {5, 3, c.k, c.k, c.k});
    const double ws = 0.37;
    Tape<double> t;
    Var y = ops::conv3d(t, t.leaf(x, false), t.leaf(w, false), c.stride, c.pad, ws);
    Tensor<double> ref = naive_conv3d(x, w, c.stride, c.pad, ws);
    REQUIRE(t.val(y).same_shape(ref));
    double maxdiff = 0.0;
    for (std::int64_t i = 0; i < ref.numel(); ++i) {
      maxdiff = std::max(maxdiff, std::abs(t.val(y)[i] - ref[i]));
    }
    CHECK(maxdiff < 1e-12);
  }
}

TEST_CASE("conv3d gradients match finite differences") {
  Rng rng(19);
  SUBCASE("stride 1, pad 1") {
    std::vector<Tensor<double>> in = {randn(rng, {2, 2, 3, 3, 3}), randn(rng, {3, 2, 3, 3, 3})};
    auto res = grad_check(in, [](Tape<double>& t, const std::vector<Var>& v) {
      return weighted_sum(t, ops::conv3d(t, v[0], v[1], 1, 1, 0.5));
    });
    CHECK(res.max_rel_err < 1e-6);
  }
  SUBCASE("stride 2, pad 1") {
    std::vector<Tensor<double>> in = {randn(rng, {1, 2, 4, 4, 4}), randn(rng, {2, 2, 3, 3, 3})};
    auto res = grad_check(in, [](Tape<double>& t, const std::vector<Var>& v) {
      return weighted_sum(t, ops::conv3d(t, v[0], v[1], 2, 1, 1.0));
    });
    CHECK(res.max_rel_err < 1e-6);
  }
  SUBCASE("1x1x1 kernel") {
    std::vector<Tensor<double>> in = {randn(rng, {2, 3, 2, 2, 2}), randn(rng, {1, 3, 1, 1, 1})};
    auto res = grad_check(in, [](Tape<double>& t, const std::vector<Var>& v) {
      return weighted_sum(t, ops::conv3d(t, v[0], v[1], 1, 0, 0.7));
    });
    CHECK(res.max_rel_err < 1e-6);
  }
}

TEST_CASE("upsample2x repeats voxels and sums gradients") {
  Rng rng(20);
  Tensor<double> x = randn(rng, {1, 2, 2, 2, 2});
  Tape<double> t;
  Var y = ops::upsample2x(t, t.leaf(x, false));
  REQUIRE(t.val(y).shape() == std::vector<std::int64_t>{1, 2, 4, 4, 4});
  CHECK(t.val(y)[0] == x[0]);
  CHECK(t.val(y)[1] == x[0]);
  // corner of the second channel
  CHECK(t.val(y)[2 * 64 - 1] == x[15]);

  std::vector<Tensor<double>> in = {x};
  auto res = grad_check(in, [](Tape<double>& tt, const std::vector<Var>& v) {
    return weighted_sum(tt, ops::upsample2x(tt, v[0]));
  });
  CHECK(res.max_rel_err < 1e-8);
}

TEST_CASE("channel scaling and bias gradients match finite differences") {
  Rng rng(21);
  std::vector<Tensor<double>> in = {randn(rng, {2, 3, 2, 2, 2}), randn(rng, {2, 3}), randn(rng, {3})};
  auto res = grad_check(in, [](Tape<double>& t, const std::vector<Var>& v) {
    Var y = ops::scale_channels(t, v[0], v[1]);
    y = ops::bias_channels(t, y, v[2]);
    return weighted_sum(t, y);
  });
  CHECK(res.max_rel_err < 1e-7);
}

TEST_CASE("demodulation coefficient gradients match finite differences") {
  Rng rng(22);
  std::vector<Tensor<double>> in = {randn(rng, {3, 2, 3, 3, 3}), randn(rng, {2, 2})};
  const double ws = wscale_for<double>(2 * 27);
  auto res = grad_check(in, [ws](Tape<double>& t, const std::vector<Var>& v) {
    return weighted_sum(t, ops::demod_coeffs(t, v[0], v[1], ws));
  });
  CHECK(res.max_rel_err < 1e-6);
}

TEST_CASE("demodulation coefficients normalize modulated kernels") {
  // With the demod factor applied, each output channel's effective kernel
  // has unit Frobenius norm (up to eps).
  Rng rng(23);
  Tensor<double> w = randn(rng, {4, 3, 3, 3, 3});
  Tensor<double> s = randn_off_zero(rng, {2, 3});
  const double ws = wscale_for<double>(3 * 27);
  Tape<double> t;
  Var d = ops::demod_coeffs(t, t.leaf(w, false), t.leaf(s, false), ws);
  for (std::int64_t b = 0; b < 2; ++b)
    for (std::int64_t o = 0; o < 4; ++o) {
      double ss = 0.0;
      for (std::int64_t i = 0; i < 3; ++i)
        for (std::int64_t k = 0; k < 27; ++k) {
          const double weff = ws * w[(o * 3 + i) * 27 + k] * s[b * 3 + i];
          ss += weff * weff;
        }
      CHECK(std::abs(std::sqrt(ss) * t.val(d)[b * 4 + o] - 1.0) < 1e-6);
    }
}

TEST_CASE("minibatch stddev appends the right statistic") {
  Tape<double> t;
  // Two samples, one channel, 1x1x2 volume. Features differ by +/-1 around
  // their mean, so every per-feature stddev is 1 and the new channel is 1.
  Tensor<double> x({2, 1, 1, 1, 2}, {3.0, 5.0, 1.0, 3.0});
  Var y = ops::minibatch_stddev(t, t.leaf(x, false), 0.0);
  REQUIRE(t.val(y).shape() == std::vector<std::int64_t>{2, 2, 1, 1, 2});
  CHECK(t.val(y)[0] == 3.0);
  CHECK(t.val(y)[1] == 5.0);
  CHECK(std::abs(t.val(y)[2] - 1.0) < 1e-12);
  CHECK(std::abs(t.val(y)[7] - 1.0) < 1e-12);
}

TEST_CASE("minibatch stddev gradient matches finite differences") {
  Rng rng(24);
  std::vector<Tensor<double>> in = {randn(rng, {3, 2, 2, 2, 2})};
  auto res = grad_check(in, [](Tape<double>& t, const std::vector<Var>& v) {
    return weighted_sum(t, ops::minibatch_stddev(t, v[0]));
  });
  CHECK(res.max_rel_err < 1e-6);
}

TEST_CASE("global average pool gradient matches finite differences") {
  Rng rng(25);
  std::vector<Tensor<double>> in = {randn(rng, {2, 3, 2, 2, 2})};
  auto res = grad_check(in, [](Tape<double>& t, const std::vector<Var>& v) {
    return weighted_sum(t, ops::global_avg_pool(t, v[0]));
  });
  CHECK(res.max_rel_err < 1e-8);
}

TEST_CASE("batch broadcast gradient sums over the batch axis") {
  Rng rng(26);
  std::vector<Tensor<double>> in = {randn(rng, {2, 3, 3, 3})};
  auto res = grad_check(in, [](Tape<double>& t, const std::vector<Var>& v) {
    return weighted_sum(t, ops::repeat_batch(t, v[0], 3));
  });
  CHECK(res.max_rel_err < 1e-8);
}

TEST_CASE("reduction and loss gradients match finite differences") {
  Rng rng(27);
  std::vector<Tensor<double>> in = {randn_off_zero(rng, {3, 4}), randn_off_zero(rng, {3, 4}),
                                    randn(rng, {3}), randn(rng, {1})};
  auto res = grad_check(in, [](Tape<double>& t, const std::vector<Var>& v) {
    Var a = ops::rowdot(t, v[0], v[1], 0.5);
    Var b = ops::l2norm_rows(t, v[0]);
    Var c = ops::sumsq_rows(t, v[1]);
    Var d = ops::bce_with_logits(t, v[2], {0.0, 1.0, 0.0});
    Var e = ops::softplus_rows(t, v[2], -1.0);
    Var total = ops::add(t, a, b);
    total = ops::add(t, total, c);
    total = ops::add(t, total, d);
    total = ops::add(t, total, e);
    Var m = ops::mean_all(t, total);
    Var scaled = ops::mul_scalar_param(t, m, v[3]);
    return ops::sum_all(t, scaled);
  });
  CHECK(res.max_rel_err < 1e-6);
}

TEST_CASE("stable softplus and sigmoid hold up at extreme logits") {
  CHECK(ops::stable_softplus(800.0) == 800.0);
  CHECK(ops::stable_softplus(-800.0) == 0.0);
  CHECK(std::abs(ops::stable_softplus(0.0) - std::log(2.0)) < 1e-15);
  CHECK(ops::sigmoid(800.0) == 1.0);
  CHECK(ops::sigmoid(-800.0) == 0.0);
  CHECK(std::isfinite(ops::stable_softplus(35.0f)));
  CHECK(std::abs(ops::stable_softplus(10.0) - std::log1p(std::exp(10.0))) < 1e-12);
}

TEST_CASE("tape accumulates gradients through shared nodes") {
  Tape<double> t;
  Var x = t.leaf(Tensor<double>::scalar(3.0), true);
  // y = x*x + x, dy/dx = 2x + 1 = 7
  Var y = ops::add(t, ops::mul(t, x, x), x);
  t.backward(y);
  CHECK(std::abs(t.grad(x)[0] - 7.0) < 1e-12);

  // Second backward through a new subgraph reuses the tape and clears grads.
  Var z = ops::scale_const(t, x, 2.0);
  t.backward(z);
  CHECK(std::abs(t.grad(x)[0] - 2.0) < 1e-12);
}

TEST_CASE("constants never receive gradients") {
  Tape<double> t;
  Var x = t.leaf(Tensor<double>::scalar(2.0), true);
  Var c = t.constant(Tensor<double>::scalar(4.0));
  Var y = ops::mul(t, x, c);
  t.backward(y);
  CHECK(t.has_grad(x));
  CHECK(!t.has_grad(c));
  CHECK(t.grad(x)[0] == 4.0);
}

TEST_CASE("reshape and detach behave as views and graph cuts") {
  Rng rng(28);
  Tensor<double> x = randn(rng, {2, 6});
  Tape<double> t;
  Var v = t.leaf(x, true);
  Var r = ops::reshape(t, v, {3, 4});
  CHECK(t.val(r).dim(0) == 3);
  Var d = ops::detach(t, r);
  Var loss = ops::sum_all(t, ops::mul(t, d, d));
  t.backward(loss);
  CHECK(!t.has_grad(v));

  std::vector<Tensor<double>> in = {x};
  auto res = grad_check(in, [](Tape<double>& tt, const std::vector<Var>& vv) {
    return weighted_sum(tt, ops::reshape(tt, vv[0], {4, 3}));
  });
  CHECK(res.max_rel_err < 1e-8);
}

TEST_CASE("adam takes the textbook first step") {
  ParamStore<double> store;
  store.add("p", Tensor<double>({2}, {1.0, -2.0}));
  Adam<double> opt(0.1, 0.9, 0.999);
  std::vector<Tensor<double>> grads = {Tensor<double>({2}, {0.5, -0.25})};
  opt.step(store, grads);
  // With bias correction the first step moves by lr * g/(|g| + eps').
  for (std::int64_t i = 0; i < 2; ++i) {
    const double g = grads[0][i];
    const double mhat = g;
    const double vhat = g * g;
    const double expect = (i == 0 ? 1.0 : -2.0) - 0.1 * mhat / (std::sqrt(vhat) + 1e-8);
    CHECK(std::abs(store.at("p")[i] - expect) < 1e-12);
  }
}

TEST_CASE("parameter store rejects duplicates and counts elements") {
  ParamStore<float> store;
  store.add("conv.w", Tensor<float>({8, 4, 3, 3, 3}));
  store.add("conv.b", Tensor<float>({8}));
  CHECK(store.parameter_count() == 872);
  CHECK_THROWS_AS(store.add("conv.w", Tensor<float>({1})), ValidationError);
  const auto h0 = parameter_hash(store);
  store.at("conv.b")[0] = 1.0f;
  CHECK(parameter_hash(store) != h0);
}

TEST_CASE("bound parameters feed gradients back through collect") {
  ParamStore<double> store;
  store.add("a", Tensor<double>({2}, {1.0, 2.0}));
  store.add("unused", Tensor<double>({3}));
  Tape<double> tape;
  BoundParams<double> bp(tape, store, true);
  Var loss = ops::sum_all(tape, ops::mul(tape, bp["a"], bp["a"]));
  tape.backward(loss);
  auto grads = collect_grads(tape, bp);
  REQUIRE(grads.size() == 2);
  CHECK(grads[0][0] == 2.0);
  CHECK(grads[0][1] == 4.0);
  CHECK(grads[1].max_abs() == 0.0);
}
