#include <cmath>

#include "doctest.h"
#include "hlm/optim.hpp"

using namespace hlm;

namespace {

ParamStore single_param(double value) {
  ParamStore store;
  store.add("p", Tensor::from_values({1}, {value}));
  return store;
}

}  // namespace

TEST_CASE("one Adam step with unit gradient moves p by ~lr") {
  // Bias correction makes the very first update magnitude equal lr.
  ParamStore store = single_param(1.0);
  store.items()[0].tensor.grad()[0] = 1.0;
  Optimizer opt({OptKind::Adam, 0.9, 0.999, 1e-8, 0.0}, store);
  opt.step(store, 0.1);
  CHECK(store.items()[0].tensor.values()[0] == doctest::Approx(0.9).epsilon(1e-6));
}

TEST_CASE("AdamW with weight_decay=0 equals Adam") {
  ParamStore a = single_param(0.7);
  ParamStore b = single_param(0.7);
  a.items()[0].tensor.grad()[0] = 0.3;
  b.items()[0].tensor.grad()[0] = 0.3;
  Optimizer opt_a({OptKind::Adam, 0.9, 0.999, 1e-8, 0.0}, a);
  Optimizer opt_b({OptKind::AdamW, 0.9, 0.999, 1e-8, 0.0}, b);
  for (int i = 0; i < 5; ++i) {
    opt_a.step(a, 0.01);
    opt_b.step(b, 0.01);
  }
  CHECK(a.items()[0].tensor.values()[0] == b.items()[0].tensor.values()[0]);
}

TEST_CASE("Adam folds decay into the gradient, AdamW decouples it") {
  // With zero gradient, Adam-with-L2 still builds moments from wd*p while
  // AdamW shrinks p multiplicatively.
  ParamStore a = single_param(1.0);
  a.items()[0].tensor.grad()[0] = 0.0;
  Optimizer opt_a({OptKind::Adam, 0.9, 0.999, 1e-8, 0.01}, a);
  opt_a.step(a, 0.1);
  CHECK(a.items()[0].tensor.values()[0] == doctest::Approx(0.9).epsilon(1e-6));

  ParamStore w = single_param(1.0);
  w.items()[0].tensor.grad()[0] = 0.0;
  Optimizer opt_w({OptKind::AdamW, 0.9, 0.999, 1e-8, 0.01}, w);
  opt_w.step(w, 0.1);
  CHECK(w.items()[0].tensor.values()[0] == doctest::Approx(1.0 - 0.1 * 0.01));
}

TEST_CASE("AdamWScale multiplies the update by the parameter RMS") {
  ParamStore big = single_param(4.0);
  ParamStore small = single_param(0.5);
  big.items()[0].tensor.grad()[0] = 1.0;
  small.items()[0].tensor.grad()[0] = 1.0;
  Optimizer ob({OptKind::AdamWScale, 0.9, 0.999, 1e-8, 0.0}, big);
  Optimizer os({OptKind::AdamWScale, 0.9, 0.999, 1e-8, 0.0}, small);
  ob.step(big, 0.1);
  os.step(small, 0.1);
  // First-step unit update scaled by rms(p): 4.0 vs 0.5.
  CHECK(big.items()[0].tensor.values()[0] == doctest::Approx(4.0 - 0.1 * 4.0).epsilon(1e-6));
  CHECK(small.items()[0].tensor.values()[0] == doctest::Approx(0.5 - 0.1 * 0.5).epsilon(1e-6));
}

TEST_CASE("NaN gradients abort with the parameter name") {
  ParamStore store;
  store.add("encoder.w", Tensor::from_values({2}, {1.0, 2.0}));
  store.items()[0].tensor.grad()[0] = std::nan("");
  Optimizer opt({OptKind::Adam, 0.9, 0.999, 1e-8, 0.0}, store);
  try {
    opt.step(store, 0.1);
    FAIL("expected NumericalError");
  } catch (const NumericalError& e) {
    CHECK(std::string(e.what()).find("encoder.w") != std::string::npos);
  }
}

TEST_CASE("linear schedule with 10% warmup over 100 steps") {
  LrSchedule s = LrSchedule::linear(1.0, 100, LrSchedule::proportion_steps(0.1, 100));
  CHECK(s.lr(0) == doctest::Approx(0.0));
  CHECK(s.lr(5) == doctest::Approx(0.5));
  CHECK(s.lr(10) == doctest::Approx(1.0));
  CHECK(s.lr(55) == doctest::Approx(0.5));
  CHECK(s.lr(100) == doctest::Approx(0.0));
}

TEST_CASE("constant schedule holds base lr after warmup") {
  LrSchedule s = LrSchedule::constant(2e-5, 1000, 100);
  CHECK(s.lr(50) == doctest::Approx(1e-5));
  CHECK(s.lr(100) == doctest::Approx(2e-5));
  CHECK(s.lr(999) == doctest::Approx(2e-5));
}

TEST_CASE("cosine schedule peaks at warmup end and decays to ~0") {
  LrSchedule s = LrSchedule::cosine(1e-3, 5000, 1000);
  CHECK(s.lr(1000) == doctest::Approx(1e-3));
  CHECK(s.lr(3000) == doctest::Approx(0.5e-3));
  CHECK(s.lr(5000) == doctest::Approx(0.0));
  for (long long step : {0, 250, 999}) CHECK(s.lr(step) <= 1e-3);
}

TEST_CASE("schedule lr is never negative") {
  for (auto kind : {LrSchedule::constant(0.1, 50, 5), LrSchedule::linear(0.1, 50, 5),
                    LrSchedule::cosine(0.1, 50, 5)}) {
    for (long long step = 0; step <= 60; ++step) CHECK(kind.lr(step) >= 0.0);
  }
}

TEST_CASE("snapshot/restore round trip") {
  Rng rng(3);
  ParamStore store;
  store.add_trunc_normal("a", {3, 3}, rng);
  store.add_zeros("b", {2});
  auto snap = store.snapshot();
  store.items()[0].tensor.values()[0] += 1.0;
  store.restore(snap);
  CHECK(store.get("a").values()[0] == snap[0][0]);
}

TEST_CASE("truncated normal init stays within two standard deviations") {
  Rng rng(4);
  ParamStore store;
  Tensor t = store.add_trunc_normal("w", {1000}, rng, 0.02);
  for (Eigen::Index i = 0; i < t.size(); ++i) CHECK(std::abs(t.values()[i]) <= 0.04);
}
