#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "mtalk/autodiff/checkpoint.hpp"
#include "mtalk/autodiff/optim.hpp"
#include "mtalk/autodiff/tape.hpp"
#include "support/gradcheck.hpp"

using namespace mtalk;
using namespace mtalk::ad;

TEST_CASE("backward of sum(x*x) at x=3 is 6") {
  Tape<double> t;
  Var x = t.input(Tensor<double>::scalar(3.0));
  Var loss = t.sum(t.mul(x, x));
  t.backward(loss);
  CHECK(t.grad(x)[0] == doctest::Approx(6.0));
}

TEST_CASE("parameter absent from the loss gets exactly zero gradient") {
  ParamSet<double> ps;
  auto& used = ps.add("used", Tensor<double>({2}, {1.0, 2.0}));
  auto& unused = ps.add("unused", Tensor<double>({3}, 5.0));
  Tape<double> t;
  Var u = t.param(used);
  t.param(unused);
  Var loss = t.sum(t.add(u, t.constant(Tensor<double>({2}, 7.0))));
  t.backward(loss);
  for (double g : ps.get("unused").grad.data) CHECK(g == 0.0);
  for (double g : ps.get("used").grad.data) CHECK(g == 1.0);
}

TEST_CASE("loss constant in a parameter yields zero gradient for it") {
  ParamSet<double> ps;
  auto& p = ps.add("p", Tensor<double>({2, 2}, 0.5));
  Tape<double> t;
  Var pv = t.param(p);
  Var c = t.constant(Tensor<double>({2, 2}, 1.0));
  Var loss = t.sum(t.add(t.stop_gradient(pv), c));
  t.backward(loss);
  for (double g : p.grad.data) CHECK(g == 0.0);
}

TEST_CASE("backward rejects a non-scalar loss") {
  Tape<float> t;
  Var x = t.input(Tensor<float>({2}, 1.0f));
  CHECK_THROWS_AS(t.backward(x), ShapeError);
}

TEST_CASE("primitives reject mismatched shapes") {
  Tape<float> t;
  Var a = t.input(Tensor<float>({2, 3}));
  Var b = t.input(Tensor<float>({2, 3}));
  CHECK_THROWS_AS(t.matmul(a, b), ShapeError);
  CHECK_THROWS_AS(t.add(a, t.input(Tensor<float>({3, 2}))), ShapeError);
  CHECK_THROWS_AS(t.conv1d(a, t.input(Tensor<float>({5, 4})), t.input(Tensor<float>({4})), 2, 1, 0), ShapeError);
}

TEST_CASE("gradient suite: every primitive matches central differences") {
  for (const auto& spec : mtalk::testing::primitive_registry()) {
    CAPTURE(spec.name);
    const auto res = mtalk::testing::run_primitive(spec, 7, 50);
    CHECK(res.cases == 50);
    CHECK(res.max_rel_error < 1e-4);
  }
}

TEST_CASE("cross entropy: mask-0 rows receive exactly zero gradient") {
  Tape<float> t;
  Rng rng = make_rng(3);
  Tensor<float> logits({4, 6});
  for (auto& v : logits.data) v = static_cast<float>(normal(rng));
  Var l = t.input(logits);
  std::vector<int> targets{1, 2, 3, 4};
  std::vector<float> mask{0, 1, 0, 1};
  t.backward(t.cross_entropy(l, targets, mask));
  for (int c = 0; c < 6; ++c) {
    CHECK(t.grad(l).at(0, c) == 0.0f);
    CHECK(t.grad(l).at(2, c) == 0.0f);
  }
}

TEST_CASE("backward is bitwise deterministic") {
  auto run = [] {
    Rng rng = make_rng(11);
    auto a = mtalk::testing::random_tensor(rng, {6, 5});
    auto b = mtalk::testing::random_tensor(rng, {5, 4});
    Tape<float> t;
    Var va = t.input(a.cast<float>());
    Var vb = t.input(b.cast<float>());
    Var h = t.gelu(t.matmul(va, vb));
    t.backward(t.mean(t.softmax_rows(h)));
    return std::make_pair(t.grad(va).data, t.grad(vb).data);
  };
  CHECK(run() == run());
}

TEST_CASE("adamw: zero gradient without decay is a fixed point") {
  ParamSet<float> ps;
  ps.add("w", Tensor<float>({3}, {1.0f, -2.0f, 0.5f}));
  AdamWState<float> st(ps, {});
  adamw_step(ps, st, 1e-3);
  CHECK(st.t == 1);
  CHECK(ps.get("w").value.data == std::vector<float>{1.0f, -2.0f, 0.5f});
}

TEST_CASE("adamw: first step closed form") {
  // One step from zero moments: bias-corrected moments equal g and g^2.
  ParamSet<double> ps;
  ps.add("w", Tensor<double>::scalar(2.0));
  ps.get("w").grad[0] = 0.5;
  AdamWSettings s;
  s.eps = 1e-8;
  AdamWState<double> st(ps, s);
  adamw_step(ps, st, 0.01);
  CHECK(ps.get("w").value[0] == doctest::Approx(2.0 - 0.01 * 0.5 / (0.5 + 1e-8)).epsilon(1e-14));
}

TEST_CASE("adamw: decoupled decay shrinks by (1 - lr*lambda)") {
  ParamSet<double> ps;
  ps.add("w", Tensor<double>::scalar(3.0));
  AdamWSettings s;
  s.weight_decay = 0.1;
  AdamWState<double> st(ps, s);
  adamw_step(ps, st, 0.05);
  CHECK(ps.get("w").value[0] == doctest::Approx(3.0 * (1.0 - 0.05 * 0.1)).epsilon(1e-14));
}

TEST_CASE("adamw: first update direction is invariant to gradient scale") {
  auto step = [](double c) {
    ParamSet<double> ps;
    ps.add("w", Tensor<double>({3}, 0.0));
    ps.get("w").grad.data = {0.3 * c, -1.2 * c, 0.05 * c};
    AdamWSettings s;
    s.eps = 1e-300;
    AdamWState<double> st(ps, s);
    adamw_step(ps, st, 0.1);
    return ps.get("w").value.data;
  };
  const auto a = step(1.0), b = step(37.0);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-12));
}

TEST_CASE("adamw: invalid learning rate rejected") {
  ParamSet<float> ps;
  ps.add("w", Tensor<float>({1}));
  AdamWState<float> st(ps, {});
  CHECK_THROWS_AS(adamw_step(ps, st, 0.0), InvalidArgument);
}

TEST_CASE("cosine schedule boundaries and midpoint") {
  CosineSchedule s{1e-3, 1e-5, 1100, 100};
  CHECK(schedule_rate(s, 100) == doctest::Approx(1e-3));
  CHECK(schedule_rate(s, 1100) == doctest::Approx(1e-5));
  CHECK(std::abs(schedule_rate(s, 600) - (1e-3 + 1e-5) / 2) < 1e-9);
  CHECK(schedule_rate(s, 50) == doctest::Approx(5e-4));
  double prev = schedule_rate(s, 100);
  for (int i = 101; i <= 1100; ++i) {
    const double r = schedule_rate(s, i);
    CHECK(r <= prev);
    prev = r;
  }
  CHECK_THROWS_AS(schedule_rate(s, 1101), InvalidArgument);
  CHECK_THROWS_AS(schedule_rate(s, -1), InvalidArgument);
  CHECK(CosineSchedule::with_default_warmup(1.0, 0.0, 5000).warmup_steps == 50);
}

TEST_CASE("checkpoint container round trips bit-exactly") {
  Checkpoint ck;
  ck.step = 42;
  ck.config = {{"kind", "unit"}};
  Rng rng = make_rng(5);
  ck.params.add("a.w", mtalk::testing::random_tensor(rng, {3, 4}).cast<float>());
  ck.params.add("b", Tensor<float>({2}, {std::numeric_limits<float>::denorm_min(), -0.0f}));
  const auto bytes = serialize_checkpoint(ck);
  const auto back = deserialize_checkpoint(bytes);
  CHECK(back.step == 42);
  CHECK(back.config == ck.config);
  REQUIRE(back.params.size() == 2);
  CHECK(serialize_checkpoint(back) == bytes);
  CHECK(std::signbit(back.params.get("b").value[1]));

  const auto path = std::filesystem::temp_directory_path() / "mtalk_ckpt_test.bin";
  save_checkpoint(path, ck);
  CHECK(serialize_checkpoint(load_checkpoint(path)) == bytes);
  std::filesystem::remove(path);

  CHECK_THROWS_AS(deserialize_checkpoint("garbage"), FormatError);
  CHECK_THROWS_AS(deserialize_checkpoint(bytes.substr(0, bytes.size() - 1)), FormatError);
}
