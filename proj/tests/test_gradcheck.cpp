// Finite-difference checks for every differentiable op, on random small
// shapes. The oracle in test_util.hpp is independent of any backward code.
#include "doctest.h"
#include "hlm/ops.hpp"
#include "test_util.hpp"

using namespace hlm;
using hlm_test::grad_check;
using hlm_test::random_tensor;

namespace {

Tensor reduce(const Tensor& t) {
  // Weighted sum keeps per-element gradients distinct.
  Tensor w = Tensor::raw(t.shape());
  for (Eigen::Index i = 0; i < w.size(); ++i)
    w.values()[i] = 0.25 + 0.5 * static_cast<double>(i % 7);
  return sum(mul(t, w));
}

}  // namespace

TEST_CASE("gradcheck: elementwise and broadcast ops") {
  Rng rng(11);
  Tensor a = random_tensor({3, 4}, rng);
  Tensor b = random_tensor({3, 4}, rng);
  Tensor bias = random_tensor({4}, rng);

  CHECK(grad_check({a, b}, [&] { return reduce(add(a, b)); }).ok);
  CHECK(grad_check({a, b}, [&] { return reduce(sub(a, b)); }).ok);
  CHECK(grad_check({a, b}, [&] { return reduce(mul(a, b)); }).ok);
  CHECK(grad_check({a, bias}, [&] { return reduce(add(a, bias)); }).ok);
  CHECK(grad_check({a, bias}, [&] { return reduce(mul(a, bias)); }).ok);
  CHECK(grad_check({a}, [&] { return reduce(scale(a, -1.7)); }).ok);
}

TEST_CASE("gradcheck: matmul, plain and batched-broadcast") {
  Rng rng(12);
  Tensor a = random_tensor({4, 3}, rng);
  Tensor b = random_tensor({3, 5}, rng);
  CHECK(grad_check({a, b}, [&] { return reduce(matmul(a, b)); }).ok);

  Tensor ab = random_tensor({2, 2, 4, 3}, rng);
  Tensor bb = random_tensor({2, 3, 2}, rng);  // broadcast over the leading dim
  CHECK(grad_check({ab, bb}, [&] { return reduce(matmul(ab, bb)); }).ok);
}

TEST_CASE("gradcheck: activations") {
  Rng rng(13);
  Tensor x = random_tensor({2, 5}, rng, 1.5);
  CHECK(grad_check({x}, [&] { return reduce(gelu(x)); }).ok);
  CHECK(grad_check({x}, [&] { return reduce(sigmoid(x)); }).ok);
  Tensor gate = random_tensor({2, 5}, rng);
  CHECK(grad_check({x, gate}, [&] { return reduce(geglu(x, gate)); }).ok);
}

TEST_CASE("gradcheck: softmax and log_softmax") {
  Rng rng(14);
  Tensor x = random_tensor({3, 4}, rng, 2.0);
  CHECK(grad_check({x}, [&] { return reduce(softmax_lastdim(x)); }).ok);
  CHECK(grad_check({x}, [&] { return reduce(log_softmax_lastdim(x)); }).ok);
}

TEST_CASE("gradcheck: layer_norm and rms_norm") {
  Rng rng(15);
  Tensor x = random_tensor({3, 5}, rng);
  Tensor g = random_tensor({5}, rng);
  Tensor b = random_tensor({5}, rng);
  CHECK(grad_check({x, g, b}, [&] { return reduce(layer_norm(x, g, b)); }).ok);
  CHECK(grad_check({x, g}, [&] { return reduce(rms_norm(x, g)); }).ok);
}

TEST_CASE("gradcheck: shape ops") {
  Rng rng(16);
  Tensor x = random_tensor({2, 3, 4}, rng);
  CHECK(grad_check({x}, [&] { return reduce(reshape(x, {6, 4})); }).ok);
  CHECK(grad_check({x}, [&] { return reduce(permute(x, {2, 0, 1})); }).ok);
  CHECK(grad_check({x}, [&] { return reduce(slice(x, 1, 1, 2)); }).ok);
  Tensor y = random_tensor({2, 2, 4}, rng);
  CHECK(grad_check({x, y}, [&] { return reduce(concat<double>({x, y}, 1)); }).ok);
}

TEST_CASE("gradcheck: gathers") {
  Rng rng(17);
  Tensor table = random_tensor({5, 3}, rng);
  CHECK(grad_check({table}, [&] { return reduce(embedding(table, {4, 0, 0, 2}, {4})); }).ok);

  Tensor scores = random_tensor({2, 3, 4}, rng);
  std::vector<Eigen::Index> idx = {0, 1, 2, 1, 2, 3, 3, 0, 1};  // S=3, T=3
  CHECK(grad_check({scores}, [&] { return reduce(rel_gather(scores, idx, 3)); }).ok);

  Tensor m = random_tensor({4, 3}, rng);
  CHECK(grad_check({m}, [&] { return reduce(index_select0(m, {2, 2, 0})); }).ok);
}

TEST_CASE("gradcheck: masked_fill") {
  Rng rng(18);
  Tensor x = random_tensor({3, 3}, rng);
  std::vector<std::uint8_t> mask = {0, 1, 0, 0, 0, 1, 1, 0, 0};
  // A benign fill keeps finite differences well conditioned; the -1e30 fill
  // used for attention is value-tested elsewhere.
  CHECK(grad_check({x}, [&] { return reduce(masked_fill(x, mask, 3.25)); }).ok);
}

TEST_CASE("gradcheck: losses") {
  Rng rng(19);
  Tensor logits = random_tensor({4, 5}, rng, 2.0);
  std::vector<Eigen::Index> targets = {1, 4, 0, 2};
  CHECK(grad_check({logits}, [&] { return cross_entropy(logits, targets); }).ok);

  std::vector<std::uint8_t> select = {1, 0, 1, 1};
  CHECK(grad_check({logits}, [&] {
          return cross_entropy(logits, targets, select, Reduction::Sum);
        }).ok);

  Tensor bl = random_tensor({6}, rng, 2.0);
  std::vector<std::uint8_t> labels = {1, 0, 1, 1, 0, 0};
  std::vector<std::uint8_t> bsel = {1, 1, 0, 1, 1, 1};
  CHECK(grad_check({bl}, [&] {
          return binary_cross_entropy_with_logits(bl, labels, bsel);
        }).ok);
}

TEST_CASE("gradcheck: mean and composed graph") {
  Rng rng(20);
  Tensor x = random_tensor({3, 3}, rng);
  Tensor w = random_tensor({3, 3}, rng);
  CHECK(grad_check({x}, [&] { return mean(x); }).ok);
  // A small composed graph mixing several ops.
  Tensor g = random_tensor({3}, rng);
  Tensor b = Tensor::zeros({3});
  CHECK(grad_check({x, w, g, b}, [&] {
          Tensor h = gelu(matmul(x, w));
          return mean(layer_norm(h, g, b));
        }).ok);
}

TEST_CASE("determinism: identical seed and inputs give bitwise-equal results") {
  auto run = [] {
    Rng rng(99);
    Tensor x = random_tensor({4, 4}, rng);
    Tensor w = random_tensor({4, 4}, rng);
    Tensor y = softmax_lastdim(matmul(gelu(x), w));
    std::vector<double> out(y.data(), y.data() + y.size());
    return out;
  };
  auto a = run();
  auto b = run();
  CHECK(a == b);
}
