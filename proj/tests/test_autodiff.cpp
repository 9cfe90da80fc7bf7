// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include "pskd/autodiff.hpp"
#include "testutil.hpp"

using namespace pskd;
using namespace pskd::ad;
using testutil::max_grad_rel_error;
using testutil::random_tensor;

namespace {
constexpr double kTol = 1e-4;
}

TEST_CASE("elementwise op gradients match finite differences") {
  Rng rng(101);
  const Tensor x = random_tensor({3, 4}, rng);
  const Tensor other = random_tensor({3, 4}, rng);

  CHECK(max_grad_rel_error([&](const Value& v) { return sum(mul(v, constant(other))); }, x) < kTol);
  CHECK(max_grad_rel_error([&](const Value& v) { return sum(mul(v, v)); }, x) < kTol);
  CHECK(max_grad_rel_error([&](const Value& v) { return sum(add(v, constant(other))); }, x) < kTol);
  CHECK(max_grad_rel_error([&](const Value& v) { return sum(sub(v, constant(other))); }, x) < kTol);
  CHECK(max_grad_rel_error([&](const Value& v) { return mean(scale(v, 2.5)); }, x) < kTol);
  CHECK(max_grad_rel_error([&](const Value& v) { return sum(relu(v)); }, x) < kTol);
  CHECK(max_grad_rel_error([&](const Value& v) { return sum(exp_op(v)); }, x) < kTol);
  CHECK(max_grad_rel_error([&](const Value& v) { return sq_diff_sum(v, other); }, x) < kTol);

  const Tensor pos = random_tensor({3, 3}, rng, 0.2, 2.0);
  CHECK(max_grad_rel_error([&](const Value& v) { return sum(log_op(v)); }, pos) < kTol);
}

TEST_CASE("matmul gradients") {
  Rng rng(102);
  const Tensor a = random_tensor({3, 4}, rng);
  const Tensor b = random_tensor({4, 2}, rng);
  const Tensor bt = random_tensor({2, 4}, rng);

  CHECK(max_grad_rel_error([&](const Value& v) { return sum(matmul(v, leaf(b, false))); }, a) <
        kTol);
  CHECK(max_grad_rel_error([&](const Value& v) { return sum(matmul(leaf(a, false), v)); }, b) <
        kTol);
  CHECK(max_grad_rel_error([&](const Value& v) { return sum(matmul_nt(v, leaf(bt, false))); },
                           a) < kTol);
  // both arguments the same node (self-similarity)
  CHECK(max_grad_rel_error([&](const Value& v) { return sum(matmul_nt(v, v)); }, a) < kTol);
}

TEST_CASE("softmax, log-softmax and pick gradients") {
  Rng rng(103);
  const Tensor z = random_tensor({4, 5}, rng, -2, 2);
  const Tensor w = random_tensor({4, 5}, rng);
  const std::vector<int> labels = {0, 3, 2, 4};

  CHECK(max_grad_rel_error(
            [&](const Value& v) { return sum(mul(softmax_rows(v), constant(w))); }, z) < kTol);
  CHECK(max_grad_rel_error(
            [&](const Value& v) { return sum(mul(log_softmax_rows(v), constant(w))); }, z) < kTol);
  CHECK(max_grad_rel_error(
            [&](const Value& v) { return sum(pick_rows(log_softmax_rows(v), labels)); }, z) < kTol);
}

TEST_CASE("row normalization gradient") {
  Rng rng(104);
  const Tensor x = random_tensor({4, 4}, rng, 0.5, 2.0);
  const Tensor w = random_tensor({4, 4}, rng);
  CHECK(max_grad_rel_error(
            [&](const Value& v) { return sum(mul(row_l2_normalize(v), constant(w))); }, x) < kTol);
}

TEST_CASE("pairwise distance and hard-min gradients") {
  Rng rng(105);
  const Tensor f = random_tensor({4, 3}, rng);
  const Tensor g = random_tensor({4, 3}, rng, 2.0, 4.0);  // well-separated

  CHECK(max_grad_rel_error([&](const Value& v) { return sum(pairwise_dist_to_const(v, g)); },
                           f) < kTol);
  CHECK(max_grad_rel_error(
            [&](const Value& v) { return sum(hard_min_offdiag(pairwise_dist_to_const(v, g))); },
            f) < kTol);
  CHECK(max_grad_rel_error(
            [&](const Value& v) { return sum(diag_vec(pairwise_dist_to_const(v, g))); }, f) < kTol);
}

TEST_CASE("hard_min_offdiag breaks ties toward the lowest index") {
  Tensor d({3, 3});
  // row 0 off-diagonal entries are tied
  d.at2(0, 1) = 2.0;
  d.at2(0, 2) = 2.0;
  d.at2(1, 0) = 5.0;
  d.at2(1, 2) = 1.0;
  d.at2(2, 0) = 7.0;
  d.at2(2, 1) = 6.0;
  Value v = leaf(d, true);
  Value m = hard_min_offdiag(v);
  CHECK(m->val.data[0] == 2.0);
  backward(sum(m));
  CHECK(v->grad.at2(0, 1) == 1.0);  // lowest index got the gradient
  CHECK(v->grad.at2(0, 2) == 0.0);
}

TEST_CASE("layer standardization gradients") {
  Rng rng(106);
  const Tensor x = random_tensor({3, 6}, rng);
  const Tensor gamma = random_tensor({6}, rng, 0.5, 1.5);
  const Tensor beta = random_tensor({6}, rng);
  const Tensor w = random_tensor({3, 6}, rng);

  auto weighted = [&](const Value& y) { return sum(mul(y, constant(w))); };
  CHECK(max_grad_rel_error(
            [&](const Value& v) {
              return weighted(layer_standardize_rows(v, leaf(gamma, false), leaf(beta, false)));
            },
            x) < kTol);
  CHECK(max_grad_rel_error(
            [&](const Value& v) {
              return weighted(layer_standardize_rows(leaf(x, false), v, leaf(beta, false)));
            },
            gamma) < kTol);
  CHECK(max_grad_rel_error(
            [&](const Value& v) {
              return weighted(layer_standardize_rows(leaf(x, false), leaf(gamma, false), v));
            },
            beta) < kTol);
}

TEST_CASE("conv2d gradients (input, weight, bias)") {
  Rng rng(107);
  const Tensor x = random_tensor({2, 6, 5}, rng);
  const Tensor w = random_tensor({3, 2, 3, 3}, rng);
  const Tensor b = random_tensor({3}, rng);

  for (int stride : {1, 2}) {
    CHECK(max_grad_rel_error(
              [&](const Value& v) {
                return sum(conv2d(v, leaf(w, false), leaf(b, false), stride, 1));
              },
              x) < kTol);
    CHECK(max_grad_rel_error(
              [&](const Value& v) {
                return sum(conv2d(leaf(x, false), v, leaf(b, false), stride, 1));
              },
              w) < kTol);
    CHECK(max_grad_rel_error(
              [&](const Value& v) {
                return sum(conv2d(leaf(x, false), leaf(w, false), v, stride, 1));
              },
              b) < kTol);
  }
}

TEST_CASE("conv2d shapes") {
  Tensor x({3, 8, 12});
  Tensor w({5, 3, 3, 3});
  Tensor b({5});
  Value y = conv2d(leaf(x, false), leaf(w, false), leaf(b, false), 2, 1);
  CHECK(y->val.shape == std::vector<int>{5, 4, 6});
}

TEST_CASE("avg pool grid gradients and values") {
  Rng rng(108);
  const Tensor x = random_tensor({2, 4, 4}, rng);
  CHECK(max_grad_rel_error([&](const Value& v) { return sum(avg_pool_grid(v, 2, 1)); }, x) < kTol);

  Tensor ones({1, 4, 2}, 1.0);
  Value pooled = avg_pool_grid(leaf(ones, false), 2, 1);
  CHECK(pooled->val.shape == std::vector<int>{1, 2, 1});
  CHECK(pooled->val.data[0] == Catch::Approx(1.0));
}

TEST_CASE("stack, concat and reshape gradients") {
  Rng rng(109);
  const Tensor r0 = random_tensor({4}, rng);
  const Tensor r1 = random_tensor({4}, rng);
  const Tensor w = random_tensor({2, 4}, rng);

  CHECK(max_grad_rel_error(
            [&](const Value& v) {
              return sum(mul(stack_rows({v, leaf(r1, false)}), constant(w)));
            },
            r0) < kTol);
  const Tensor w22 = random_tensor({2, 2}, rng);
  CHECK(max_grad_rel_error(
            [&](const Value& v) { return sum(mul(reshape(v, {2, 2}), constant(w22))); },
            random_tensor({4}, rng)) < kTol);
  CHECK(max_grad_rel_error(
            [&](const Value& v) { return sum(concat_vec({v, leaf(r1, false)})); }, r0) < kTol);
}

TEST_CASE("bce and smooth-l1 gradients") {
  Rng rng(110);
  const Tensor z = random_tensor({8}, rng, -3, 3);
  Tensor targets({8});
  for (int i = 0; i < 8; ++i) targets.data[i] = rng.uniform() < 0.5 ? 0.0 : 1.0;
  const Tensor weights = random_tensor({8}, rng, 0.1, 1.0);

  CHECK(max_grad_rel_error([&](const Value& v) { return bce_with_logits_sum(v, targets, weights); },
                           z) < kTol);

  const Tensor pred = random_tensor({8}, rng, -2, 2);
  const Tensor target = random_tensor({8}, rng, -2, 2);
  CHECK(max_grad_rel_error([&](const Value& v) { return smooth_l1_sum(v, target, weights); },
                           pred) < kTol);
}

TEST_CASE("quadratic loss has gradient 2x") {
  Rng rng(111);
  const Tensor x = random_tensor({5}, rng);
  Value v = leaf(x, true);
  backward(sum(mul(v, v)));
  for (int i = 0; i < 5; ++i) CHECK(v->grad.data[i] == Catch::Approx(2 * x.data[i]));
}

TEST_CASE("constant loss propagates zero gradients") {
  Rng rng(112);
  const Tensor x = random_tensor({4}, rng);
  Value v = leaf(x, true);
  Value c = constant(Tensor::scalar(3.0));
  // loss depends on v only through a zero multiplier
  Value loss = add(sum(scale(v, 0.0)), sum(c));
  backward(loss);
  for (int i = 0; i < 4; ++i) CHECK(v->grad.data[i] == 0.0);
}

TEST_CASE("constants receive no gradient storage") {
  Tensor x({3}, 1.0);
  Value c = constant(x);
  Value loss = sum(mul(c, c));
  CHECK_FALSE(loss->requires_grad);
  backward(add(loss, sum(leaf(x, true))));  // mixed graph still works
}

TEST_CASE("backward rejects non-scalar roots") {
  Tensor x({3}, 1.0);
  Value v = leaf(x, true);
  CHECK_THROWS_AS(backward(v), std::invalid_argument);
}

TEST_CASE("diamond-shaped graphs accumulate correctly") {
  // loss = sum(v*v + v) — v feeds two paths
  Rng rng(113);
  const Tensor x = random_tensor({4}, rng);
  CHECK(max_grad_rel_error([&](const Value& v) { return sum(add(mul(v, v), v)); }, x) < kTol);
}
