#include <cmath>

#include "doctest.h"
#include "hlm/ops.hpp"
#include "test_util.hpp"

using namespace hlm;

TEST_CASE("softmax of equal logits is uniform") {
  Tensor x = Tensor::from_values({2}, {0.0, 0.0});
  Tensor y = softmax_lastdim(x);
  CHECK(y.values()[0] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(y.values()[1] == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("softmax rows sum to one and sigmoid stays in (0,1)") {
  Rng rng(7);
  Tensor x = hlm_test::random_tensor({5, 9}, rng, 3.0);
  Tensor y = softmax_lastdim(x);
  for (int r = 0; r < 5; ++r) {
    double s = 0.0;
    for (int c = 0; c < 9; ++c) s += y.values()[r * 9 + c];
    CHECK(std::abs(s - 1.0) < 1e-12);
  }
  Tensor z = sigmoid(x);
  for (Eigen::Index i = 0; i < z.size(); ++i) {
    CHECK(z.values()[i] > 0.0);
    CHECK(z.values()[i] < 1.0);
  }
}

TEST_CASE("gelu(0) = 0") {
  Tensor x = Tensor::from_values({3}, {0.0, 1.0, -1.0});
  Tensor y = gelu(x);
  CHECK(y.values()[0] == 0.0);
  CHECK(y.values()[1] == doctest::Approx(0.8413447460685429).epsilon(1e-12));
}

TEST_CASE("cross entropy of a uniform 3-way distribution is ln 3") {
  const double l = std::log(2.0);
  Tensor logits = Tensor::from_values({1, 3}, {l, l, l});
  Tensor loss = cross_entropy(logits, {0});
  CHECK(loss.item() == doctest::Approx(std::log(3.0)).epsilon(1e-12));
}

TEST_CASE("backward of sum(x*x) gives 2x") {
  Tensor x = Tensor::from_values({2}, {1.0, 2.0}).set_requires_grad(true);
  Tensor loss = sum(mul(x, x));
  backward(loss);
  CHECK(x.grad()[0] == doctest::Approx(2.0));
  CHECK(x.grad()[1] == doctest::Approx(4.0));
}

TEST_CASE("backward on a non-scalar is rejected") {
  Tensor x = Tensor::from_values({2}, {1.0, 2.0}).set_requires_grad(true);
  Tensor y = mul(x, x);
  CHECK_THROWS_AS(backward(y), ShapeError);
}

TEST_CASE("stop_gradient blocks the detached branch") {
  Tensor x = Tensor::from_values({1}, {3.0}).set_requires_grad(true);

  SUBCASE("y = sg(x) + x has dy/dx = 1") {
    Tensor y = sum(add(stop_gradient(x), x));
    backward(y);
    CHECK(x.grad()[0] == doctest::Approx(1.0));
  }
  SUBCASE("loss on sg(x) alone leaves x.grad = 0") {
    Tensor y = sum(mul(stop_gradient(x), stop_gradient(x)));
    backward(y);
    CHECK_FALSE(x.has_grad());
  }
}

TEST_CASE("grad accumulates across backward calls until zero_grad") {
  Tensor x = Tensor::from_values({1}, {2.0}).set_requires_grad(true);
  backward(sum(mul(x, x)));
  backward(sum(mul(x, x)));
  CHECK(x.grad()[0] == doctest::Approx(8.0));
  x.zero_grad();
  CHECK(x.grad()[0] == 0.0);
}

TEST_CASE("matmul with batched lhs and shared rhs") {
  // a: [2,2,3], b: [3,2]
  Tensor a = Tensor::from_values({2, 2, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1, 1, 1, 1});
  Tensor b = Tensor::from_values({3, 2}, {1, 2, 3, 4, 5, 6});
  Tensor c = matmul(a, b);
  CHECK(c.shape() == Shape{2, 2, 2});
  CHECK(c.values()[0] == 1.0);  // row [1,0,0] * b = [1,2]
  CHECK(c.values()[1] == 2.0);
  CHECK(c.values()[2] == 3.0);
  CHECK(c.values()[6] == doctest::Approx(9.0));  // [1,1,1]*b = [9,12]
  CHECK(c.values()[7] == doctest::Approx(12.0));
}

TEST_CASE("matmul rejects shape mismatch with a message naming both shapes") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({4, 2});
  try {
    matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("matmul") != std::string::npos);
    CHECK(msg.find("[2,3]") != std::string::npos);
    CHECK(msg.find("[4,2]") != std::string::npos);
  }
}

TEST_CASE("suffix broadcast add / mul") {
  Tensor a = Tensor::from_values({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor bias = Tensor::from_values({3}, {10, 20, 30});
  Tensor y = add(a, bias);
  CHECK(y.values()[0] == 11.0);
  CHECK(y.values()[5] == 36.0);
  CHECK_THROWS_AS(add(a, Tensor::zeros({2})), ShapeError);
}

TEST_CASE("permute, slice, concat round trip") {
  Tensor a = Tensor::from_values({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor t = transpose_last2(a);
  CHECK(t.shape() == Shape{3, 2});
  CHECK(t.values()[0] == 1.0);
  CHECK(t.values()[1] == 4.0);
  CHECK(t.values()[2] == 2.0);

  Tensor left = slice(a, 1, 0, 1);
  Tensor right = slice(a, 1, 1, 2);
  Tensor glued = concat<double>({left, right}, 1);
  for (Eigen::Index i = 0; i < a.size(); ++i) CHECK(glued.values()[i] == a.values()[i]);
}

TEST_CASE("masked_fill underflows masked softmax weights to exact zero") {
  Tensor logits = Tensor::from_values({1, 3}, {0.3, -0.2, 0.9});
  std::vector<std::uint8_t> mask = {0, 1, 0};
  Tensor filled = masked_fill(logits, mask, -1e30);
  Tensor probs = softmax_lastdim(filled);
  CHECK(probs.values()[1] == 0.0);
  CHECK(probs.values()[0] + probs.values()[2] == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("rel_gather selects per-row relative entries") {
  // scores: [2,4]; idx (S=2, T=2): row0 -> {1,0}, row1 -> {3,2}
  Tensor scores = Tensor::from_values({2, 4}, {10, 11, 12, 13, 20, 21, 22, 23});
  Tensor out = rel_gather(scores, {1, 0, 3, 2}, 2);
  CHECK(out.shape() == Shape{2, 2});
  CHECK(out.values()[0] == 11.0);
  CHECK(out.values()[1] == 10.0);
  CHECK(out.values()[2] == 23.0);
  CHECK(out.values()[3] == 22.0);
}

TEST_CASE("embedding gathers rows and scatters gradients") {
  Tensor table = Tensor::from_values({3, 2}, {0, 1, 10, 11, 20, 21}).set_requires_grad(true);
  Tensor out = embedding(table, {2, 0, 2}, {3});
  CHECK(out.shape() == Shape{3, 2});
  CHECK(out.values()[0] == 20.0);
  backward(sum(out));
  CHECK(table.grad()[0] == 1.0);  // row 0 used once
  CHECK(table.grad()[2] == 0.0);  // row 1 unused
  CHECK(table.grad()[4] == 2.0);  // row 2 used twice
}

TEST_CASE("rng determinism: identical seeds give identical streams") {
  Rng a(123), b(123);
  for (int i = 0; i < 1000; ++i) CHECK(a.next_u64() == b.next_u64());
  Rng c(124);
  bool differs = false;
  Rng a2(123);
  for (int i = 0; i < 10; ++i) differs = differs || (a2.next_u64() != c.next_u64());
  CHECK(differs);
}

TEST_CASE("float32 instantiation works end to end") {
  TensorF x = TensorF::from_values({2}, {1.0f, 2.0f}).set_requires_grad(true);
  TensorF loss = sum(mul(x, x));
  backward(loss);
  CHECK(x.grad()[0] == doctest::Approx(2.0f));
  CHECK(x.grad()[1] == doctest::Approx(4.0f));
}

TEST_CASE("dropout is identity at p=0 and rescales kept values") {
  Rng rng(5);
  Tensor x = Tensor::from_values({4}, {1, 2, 3, 4});
  Tensor same = dropout(x, 0.0, rng);
  CHECK(same.node() == x.node());
  Tensor dropped = dropout(x, 0.5, rng);
  for (Eigen::Index i = 0; i < 4; ++i) {
    const double v = dropped.values()[i];
    CHECK((v == 0.0 || v == doctest::Approx(2.0 * x.values()[i])));
  }
}
