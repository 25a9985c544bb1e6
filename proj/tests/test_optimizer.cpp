#include <doctest.h>

#include <cmath>

#include "dcco/errors.hpp"
#include "dcco/optimizer.hpp"
#include "dcco/rng.hpp"

using namespace dcco;

namespace {

ModelParams one_param(double a, double b) {
  ModelParams p;
  p["layer.weight"] = Tensor({1, 2}, {a, b});
  return p;
}

NamedGrads one_grad(double a, double b) {
  NamedGrads g;
  g["layer.weight"] = Tensor({1, 2}, {a, b});
  return g;
}

}  // namespace

TEST_CASE("sgd basics") {
  OptimizerState st;
  ModelParams p = one_param(1.0, -2.0);

  SUBCASE("lr zero leaves parameters untouched") {
    apply(st, p, one_grad(5.0, 5.0), 0.0);
    CHECK(p["layer.weight"].mat()(0, 0) == 1.0);
    CHECK(p["layer.weight"].mat()(0, 1) == -2.0);
    CHECK(st.step == 1);
  }

  SUBCASE("step then inverse step restores parameters exactly") {
    // lr must stay non-negative, so the inverse step negates the gradient;
    // p - lr g + lr g is exact in floating point.
    apply(st, p, one_grad(0.25, -0.75), 0.1);
    apply(st, p, one_grad(-0.25, 0.75), 0.1);
    CHECK(p["layer.weight"].mat()(0, 0) == 1.0);
    CHECK(p["layer.weight"].mat()(0, 1) == -2.0);
    CHECK(st.step == 2);
  }

  SUBCASE("plain update rule") {
    apply(st, p, one_grad(2.0, -4.0), 0.5);
    CHECK(p["layer.weight"].mat()(0, 0) == doctest::Approx(0.0));
    CHECK(p["layer.weight"].mat()(0, 1) == doctest::Approx(0.0));
  }

  SUBCASE("negative lr rejected only below zero") {
    CHECK_THROWS_AS(apply(st, p, one_grad(1, 1), -0.1), InvalidConfig);
  }
}

TEST_CASE("adam first step approaches lr per element") {
  OptimizerState st;
  st.kind = OptimizerKind::kAdam;
  ModelParams p = one_param(0.0, 0.0);
  apply(st, p, one_grad(1.0, 1.0), 0.01);
  // Bias correction makes mhat = vhat = 1, so the step is lr/(1 + eps).
  const double want = -0.01 / (1.0 + 1e-8);
  CHECK(p["layer.weight"].mat()(0, 0) == doctest::Approx(want).epsilon(1e-12));
  CHECK(st.step == 1);
  CHECK(st.m.count("layer.weight") == 1);
  CHECK(st.v.count("layer.weight") == 1);
}

TEST_CASE("adam first step is nearly invariant to gradient scale") {
  auto first_step = [](double scale) {
    OptimizerState st;
    st.kind = OptimizerKind::kAdam;
    ModelParams p = one_param(0.0, 0.0);
    apply(st, p, one_grad(scale * 0.7, scale * -0.3), 0.01);
    return p["layer.weight"].mat()(0, 0);
  };
  const double u1 = first_step(1.0);
  const double u10 = first_step(10.0);
  CHECK(std::abs(u1 - u10) / std::abs(u1) < 1e-6);
}

TEST_CASE("adam trajectory is deterministic") {
  auto run = []() {
    OptimizerState st;
    st.kind = OptimizerKind::kAdam;
    ModelParams p = one_param(0.3, -0.8);
    Rng rng(5);
    for (int i = 0; i < 25; ++i)
      apply(st, p, one_grad(rng.normal(), rng.normal()), 0.05);
    return p["layer.weight"];
  };
  Tensor a = run();
  Tensor b = run();
  CHECK(a.mat()(0, 0) == b.mat()(0, 0));
  CHECK(a.mat()(0, 1) == b.mat()(0, 1));
}

TEST_CASE("lars trust ratio reduces to scaled sgd") {
  OptimizerState st;
  st.kind = OptimizerKind::kLars;
  st.momentum = 0.0;
  st.weight_decay = 0.0;
  // |p| == |g|: trust 1e-3, step = lr * 1e-3 * g.
  ModelParams p = one_param(3.0, 4.0);
  apply(st, p, one_grad(3.0, 4.0), 2.0);
  CHECK(p["layer.weight"].mat()(0, 0) == doctest::Approx(3.0 - 2.0 * 1e-3 * 3.0));
  CHECK(p["layer.weight"].mat()(0, 1) == doctest::Approx(4.0 - 2.0 * 1e-3 * 4.0));
}

TEST_CASE("lars momentum accumulates and exempt params skip adaptation") {
  OptimizerState st;
  st.kind = OptimizerKind::kLars;
  st.weight_decay = 0.1;
  ModelParams p;
  p["layer.weight"] = Tensor({1, 1}, {2.0});
  p["layer.bias"] = Tensor({1, 1}, {1.0});
  NamedGrads g;
  g["layer.weight"] = Tensor({1, 1}, {1.0});
  g["layer.bias"] = Tensor({1, 1}, {1.0});
  apply(st, p, g, 0.5);
  // Bias: exempt → no decay, trust 1 → plain momentum SGD step of lr*g.
  CHECK(p["layer.bias"].mat()(0, 0) == doctest::Approx(1.0 - 0.5));
  // Weight: geff = 1 + 0.1*2 = 1.2, trust = 1e-3*2/1.2.
  const double trust = 1e-3 * 2.0 / 1.2;
  CHECK(p["layer.weight"].mat()(0, 0) == doctest::Approx(2.0 - 0.5 * trust * 1.2));
  // Second step folds momentum 0.9 of the buffer in.
  double buf1 = 0.5 * trust * 1.2;
  ModelParams before = p;
  apply(st, p, g, 0.5);
  double pn = before["layer.weight"].mat()(0, 0);
  double geff2 = 1.0 + 0.1 * pn;
  double trust2 = 1e-3 * pn / geff2;
  CHECK(p["layer.weight"].mat()(0, 0) ==
        doctest::Approx(pn - (0.9 * buf1 + 0.5 * trust2 * geff2)));
  // Zero gradient and zero decay → trust falls back to 1.
  OptimizerState st2;
  st2.kind = OptimizerKind::kLars;
  ModelParams p2 = one_param(1.0, 1.0);
  apply(st2, p2, one_grad(0.0, 0.0), 1.0);
  CHECK(p2["layer.weight"].mat()(0, 0) == 1.0);
}

TEST_CASE("weight decay exemption list") {
  CHECK(decay_exempt("enc0.bias"));
  CHECK(decay_exempt("proj1.gamma"));
  CHECK(decay_exempt("enc2.beta"));
  CHECK_FALSE(decay_exempt("enc0.weight"));
  CHECK_FALSE(decay_exempt("beta"));  // bare name, not a suffixed layer field
}

TEST_CASE("optimizer misuse raises typed errors") {
  OptimizerState st;
  ModelParams p = one_param(1.0, 1.0);
  NamedGrads g;
  CHECK_THROWS_AS(apply(st, p, g, 0.1), ShapeMismatch);  // missing grad
  g["layer.weight"] = Tensor({1, 3}, {1, 2, 3});
  CHECK_THROWS_AS(apply(st, p, g, 0.1), ShapeMismatch);  // wrong shape
  CHECK_THROWS_AS(optimizer_from_name("adagrad"), InvalidConfig);
  CHECK(optimizer_from_name("lars") == OptimizerKind::kLars);
}

TEST_CASE("cosine schedule endpoints and midpoint") {
  CHECK(cosine_lr(0.3, 0, 100) == 0.3);
  CHECK(cosine_lr(0.3, 100, 100) == doctest::Approx(0.0).epsilon(1e-15));
  CHECK(cosine_lr(0.3, 50, 100) == doctest::Approx(0.15).epsilon(1e-12));
  CHECK(cosine_lr(1.0, 25, 100) > cosine_lr(1.0, 75, 100));  // monotone decay
  CHECK_THROWS_AS(cosine_lr(0.3, 101, 100), StepOutOfRange);
  CHECK_THROWS_AS(cosine_lr(0.3, 0, 0), StepOutOfRange);
}
