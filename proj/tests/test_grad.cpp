#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "utts/grad.hpp"

using namespace utts;
using namespace utts::grad;

namespace {

// Random tensor with entries bounded away from zero, for ops with kinks at 0.
TensorPtr randn_offzero(std::vector<int> shape, Rng& rng) {
  auto t = Tensor::randn(std::move(shape), 1.0, rng);
  for (auto& x : t->v) x += (x >= 0.0 ? 0.5 : -0.5);
  return t;
}

// Scalarizes an op output by a fixed random projection so the finite-difference
// probe exercises every output coordinate.
TensorPtr project(Tape& t, const TensorPtr& y, const TensorPtr& proj) {
  return sum_all(t, mul(t, y, proj));
}

}  // namespace

TEST_CASE("grad_check matches the closed form for sum of squares") {
  Rng rng(17);
  auto x = Tensor::randn({3, 4}, 1.0, rng);
  auto f = [](Tape& t, const TensorPtr& v) { return sum_all(t, mul(t, v, v)); };
  CHECK(grad_check(f, x) <= 1e-6);

  Tape t;
  auto y = f(t, x);
  x->zero_grad();
  t.backward(y);
  for (size_t i = 0; i < x->v.size(); ++i) CHECK(x->g[i] == doctest::Approx(2.0 * x->v[i]));
}

TEST_CASE("elementwise op gradients agree with central differences") {
  Rng rng(23);
  auto proj = Tensor::randn({2, 5}, 1.0, rng);

  auto check_unary = [&](auto op) {
    auto x = randn_offzero({2, 5}, rng);
    auto f = [&](Tape& t, const TensorPtr& v) { return project(t, op(t, v), proj); };
    return grad_check(f, x);
  };

  CHECK(check_unary([](Tape& t, const TensorPtr& v) { return relu(t, v); }) <= 1e-4);
  CHECK(check_unary([](Tape& t, const TensorPtr& v) { return leaky_relu(t, v, 0.1); }) <= 1e-4);
  CHECK(check_unary([](Tape& t, const TensorPtr& v) { return sigmoid(t, v); }) <= 1e-4);
  CHECK(check_unary([](Tape& t, const TensorPtr& v) { return tanh_op(t, v); }) <= 1e-4);
  CHECK(check_unary([](Tape& t, const TensorPtr& v) { return softplus(t, v); }) <= 1e-4);
  CHECK(check_unary([](Tape& t, const TensorPtr& v) { return abs_op(t, v); }) <= 1e-4);
  CHECK(check_unary([](Tape& t, const TensorPtr& v) { return softmax_rows(t, v); }) <= 1e-4);
  CHECK(check_unary([](Tape& t, const TensorPtr& v) { return log_softmax_rows(t, v); }) <= 1e-4);
  CHECK(check_unary([](Tape& t, const TensorPtr& v) { return scale(t, v, -2.5); }) <= 1e-4);
  CHECK(check_unary([](Tape& t, const TensorPtr& v) { return add_scalar(t, v, 3.0); }) <= 1e-4);
}

TEST_CASE("binary op gradients agree with central differences") {
  Rng rng(31);
  auto proj = Tensor::randn({3, 4}, 1.0, rng);
  auto a = Tensor::randn({3, 4}, 1.0, rng);
  auto b = Tensor::randn({3, 4}, 1.0, rng);

  auto check_pair = [&](auto op) {
    auto fa = [&](Tape& t, const TensorPtr& v) { return project(t, op(t, v, b), proj); };
    auto fb = [&](Tape& t, const TensorPtr& v) { return project(t, op(t, a, v), proj); };
    CHECK(grad_check(fa, a) <= 1e-4);
    CHECK(grad_check(fb, b) <= 1e-4);
  };

  check_pair([](Tape& t, const TensorPtr& u, const TensorPtr& v) { return add(t, u, v); });
  check_pair([](Tape& t, const TensorPtr& u, const TensorPtr& v) { return sub(t, u, v); });
  check_pair([](Tape& t, const TensorPtr& u, const TensorPtr& v) { return mul(t, u, v); });
}

TEST_CASE("linear layer gradients for input, weight, and bias") {
  Rng rng(41);
  auto x = Tensor::randn({3, 4}, 1.0, rng);
  auto w = Tensor::randn({4, 6}, 1.0, rng);
  auto b = Tensor::randn({1, 6}, 1.0, rng);
  auto proj = Tensor::randn({3, 6}, 1.0, rng);

  auto fx = [&](Tape& t, const TensorPtr& v) { return project(t, linear(t, v, w, b), proj); };
  auto fw = [&](Tape& t, const TensorPtr& v) { return project(t, linear(t, x, v, b), proj); };
  auto fb = [&](Tape& t, const TensorPtr& v) { return project(t, linear(t, x, w, v), proj); };
  CHECK(grad_check(fx, x) <= 1e-4);
  CHECK(grad_check(fw, w) <= 1e-4);
  CHECK(grad_check(fb, b) <= 1e-4);

  CHECK_THROWS_AS(([&] {
                    Tape t;
                    auto bad = Tensor::randn({5, 6}, 1.0, rng);
                    linear(t, x, bad, nullptr);
                  }()),
                  std::invalid_argument);
}

TEST_CASE("conv1d gradients with and without padding") {
  Rng rng(43);
  auto x = Tensor::randn({7, 3}, 1.0, rng);
  auto w = Tensor::randn({5, 3, 4}, 1.0, rng);
  auto b = Tensor::randn({1, 5}, 1.0, rng);

  for (auto [pl, pr] : {std::pair{0, 0}, std::pair{2, 1}, std::pair{3, 3}}) {
    const int t_out = 7 + pl + pr - 4 + 1;
    auto proj = Tensor::randn({t_out, 5}, 1.0, rng);
    auto fx = [&](Tape& t, const TensorPtr& v) { return project(t, conv1d(t, v, w, b, pl, pr), proj); };
    auto fw = [&](Tape& t, const TensorPtr& v) { return project(t, conv1d(t, x, v, b, pl, pr), proj); };
    auto fb = [&](Tape& t, const TensorPtr& v) { return project(t, conv1d(t, x, w, v, pl, pr), proj); };
    CHECK(grad_check(fx, x) <= 1e-4);
    CHECK(grad_check(fw, w) <= 1e-4);
    CHECK(grad_check(fb, b) <= 1e-4);
  }

  CHECK_THROWS_AS(([&] {
                    Tape t;
                    auto bad = Tensor::randn({5, 2, 4}, 1.0, rng);
                    conv1d(t, x, bad, nullptr, 0, 0);
                  }()),
                  std::invalid_argument);
}

TEST_CASE("shape-structure op gradients: transpose, concat, stack, reshape, rowvec, embedding") {
  Rng rng(47);

  {
    auto x = Tensor::randn({3, 5}, 1.0, rng);
    auto proj = Tensor::randn({5, 3}, 1.0, rng);
    auto f = [&](Tape& t, const TensorPtr& v) { return project(t, transpose(t, v), proj); };
    CHECK(grad_check(f, x) <= 1e-4);
  }
  {
    auto a = Tensor::randn({2, 3}, 1.0, rng);
    auto b = Tensor::randn({2, 4}, 1.0, rng);
    auto proj = Tensor::randn({2, 7}, 1.0, rng);
    auto fa = [&](Tape& t, const TensorPtr& v) { return project(t, concat_cols(t, v, b), proj); };
    auto fb = [&](Tape& t, const TensorPtr& v) { return project(t, concat_cols(t, a, v), proj); };
    CHECK(grad_check(fa, a) <= 1e-4);
    CHECK(grad_check(fb, b) <= 1e-4);
  }
  {
    auto r0 = Tensor::randn({1, 4}, 1.0, rng);
    auto r1 = Tensor::randn({1, 4}, 1.0, rng);
    auto proj = Tensor::randn({2, 4}, 1.0, rng);
    auto f = [&](Tape& t, const TensorPtr& v) {
      return project(t, stack_rows(t, {v, r1}), proj);
    };
    CHECK(grad_check(f, r0) <= 1e-4);
  }
  {
    auto x = Tensor::randn({2, 6}, 1.0, rng);
    auto proj = Tensor::randn({4, 3}, 1.0, rng);
    auto f = [&](Tape& t, const TensorPtr& v) { return project(t, reshape(t, v, {4, 3}), proj); };
    CHECK(grad_check(f, x) <= 1e-4);
  }
  {
    auto x = Tensor::randn({3, 4}, 1.0, rng);
    auto row = Tensor::randn({1, 4}, 1.0, rng);
    auto proj = Tensor::randn({3, 4}, 1.0, rng);
    auto fx = [&](Tape& t, const TensorPtr& v) { return project(t, add_rowvec(t, v, row), proj); };
    auto fr = [&](Tape& t, const TensorPtr& v) { return project(t, add_rowvec(t, x, v), proj); };
    CHECK(grad_check(fx, x) <= 1e-4);
    CHECK(grad_check(fr, row) <= 1e-4);
  }
  {
    auto table = Tensor::randn({6, 3}, 1.0, rng);
    std::vector<int> ids{4, 0, 4, 2};
    auto proj = Tensor::randn({4, 3}, 1.0, rng);
    auto f = [&](Tape& t, const TensorPtr& v) { return project(t, embedding(t, v, ids), proj); };
    CHECK(grad_check(f, table) <= 1e-4);
    Tape t;
    CHECK_THROWS_AS(embedding(t, table, {6}), std::invalid_argument);
  }
}

TEST_CASE("gru cell gradients for inputs, state, and every parameter") {
  Rng rng(53);
  const int d = 3, h = 4;
  GruParams p;
  p.wz = Tensor::randn({d, h}, 0.5, rng);
  p.uz = Tensor::randn({h, h}, 0.5, rng);
  p.bz = Tensor::randn({1, h}, 0.5, rng);
  p.wr = Tensor::randn({d, h}, 0.5, rng);
  p.ur = Tensor::randn({h, h}, 0.5, rng);
  p.br = Tensor::randn({1, h}, 0.5, rng);
  p.wn = Tensor::randn({d, h}, 0.5, rng);
  p.un = Tensor::randn({h, h}, 0.5, rng);
  p.bn = Tensor::randn({1, h}, 0.5, rng);
  auto x = Tensor::randn({1, d}, 1.0, rng);
  auto h0 = Tensor::randn({1, h}, 1.0, rng);
  auto proj = Tensor::randn({1, h}, 1.0, rng);

  auto loss_with = [&](Tape& t) { return project(t, gru_cell(t, x, h0, p), proj); };
  auto fx = [&](Tape& t, const TensorPtr&) { return loss_with(t); };

  for (auto target : {x, h0, p.wz, p.uz, p.bz, p.wr, p.ur, p.br, p.wn, p.un, p.bn}) {
    auto f = [&](Tape& t, const TensorPtr&) { return loss_with(t); };
    CHECK(grad_check(f, target) <= 1e-4);
  }
  (void)fx;
}

TEST_CASE("composite network gradient and gradient accumulation") {
  Rng rng(59);
  auto x = Tensor::randn({2, 3}, 1.0, rng);
  auto w1 = Tensor::randn({3, 5}, 0.7, rng);
  auto b1 = Tensor::randn({1, 5}, 0.2, rng);
  auto w2 = Tensor::randn({5, 4}, 0.7, rng);

  auto net = [&](Tape& t, const TensorPtr& v) {
    auto hdn = tanh_op(t, linear(t, v, w1, b1));
    auto logp = log_softmax_rows(t, linear(t, hdn, w2, nullptr));
    return scale(t, sum_all(t, logp), -1.0);
  };
  CHECK(grad_check(net, x) <= 1e-4);
  CHECK(grad_check([&](Tape& t, const TensorPtr&) { return net(t, x); }, w1) <= 1e-4);
  CHECK(grad_check([&](Tape& t, const TensorPtr&) { return net(t, x); }, w2) <= 1e-4);

  // A tensor consumed by two branches accumulates both contributions.
  auto y = Tensor::from({2}, {1.5, -2.0});
  Tape t;
  auto loss = add(t, sum_all(t, y), sum_all(t, y));
  y->zero_grad();
  t.backward(loss);
  CHECK(y->g[0] == doctest::Approx(2.0));
  CHECK(y->g[1] == doctest::Approx(2.0));

  // Seeding backward with a weight scales every gradient by that weight.
  auto z = Tensor::from({2}, {1.0, 2.0});
  Tape t2;
  auto l2 = sum_all(t2, mul(t2, z, z));
  z->zero_grad();
  t2.backward(l2, 0.5);
  CHECK(z->g[0] == doctest::Approx(1.0));
  CHECK(z->g[1] == doctest::Approx(2.0));
}

TEST_CASE("non-finite forward values raise a numerics error") {
  Tape t;
  auto big = Tensor::scalar(1e308);
  CHECK_THROWS_AS(mul(t, big, big), NumericsError);
}

TEST_CASE("adam follows the scalar reference recurrence") {
  ParameterSet ps;
  auto p = ps.add("w", Tensor::scalar(0.3));
  AdamConfig cfg;
  cfg.lr = 0.01;
  Adam opt(cfg);

  const std::vector<double> grads{0.8, -0.4, 0.1, 0.9, -1.2, 0.05};
  double ref = 0.3, m = 0.0, v = 0.0;
  for (size_t step = 0; step < grads.size(); ++step) {
    p->ensure_grad();
    p->g[0] = grads[step];
    opt.step(ps);

    m = cfg.beta1 * m + (1 - cfg.beta1) * grads[step];
    v = cfg.beta2 * v + (1 - cfg.beta2) * grads[step] * grads[step];
    const double mh = m / (1 - std::pow(cfg.beta1, double(step + 1)));
    const double vh = v / (1 - std::pow(cfg.beta2, double(step + 1)));
    ref -= cfg.lr * mh / (std::sqrt(vh) + cfg.eps);
    CHECK(p->v[0] == doctest::Approx(ref).epsilon(1e-12));
    CHECK(p->g[0] == 0.0);  // gradients cleared after the update
  }
}

TEST_CASE("adam edge cases: zero grads, frozen params, missing grads") {
  Rng rng(61);
  ParameterSet ps;
  auto a = ps.add("a", Tensor::randn({2, 2}, 1.0, rng));
  auto frozen = ps.add("frozen", Tensor::randn({3}, 1.0, rng), /*trainable=*/false);
  Adam opt({});

  auto a0 = a->v;
  auto f0 = frozen->v;
  a->ensure_grad();
  opt.step(ps);
  CHECK(a->v == a0);  // zero gradient moves nothing
  CHECK(frozen->v == f0);

  a->ensure_grad();
  a->g[0] = 1.0;
  opt.step(ps);
  CHECK(a->v != a0);
  CHECK(frozen->v == f0);  // frozen parameter never moves

  ParameterSet ps2;
  ps2.add("b", Tensor::scalar(1.0));
  Adam opt2({});
  CHECK_THROWS_AS(opt2.step(ps2), std::invalid_argument);
}

TEST_CASE("checkpoint round-trips bit-exactly and validates its header") {
  Rng rng(67);
  namespace fs = std::filesystem;
  const auto dir = fs::temp_directory_path() / "utts_grad_ckpt";
  fs::create_directories(dir);
  const auto path = (dir / "model.ckpt").string();

  ParameterSet ps;
  ps.add("enc.w", Tensor::randn({4, 3}, 1.0, rng));
  ps.add("enc.b", Tensor::randn({1, 3}, 1.0, rng));
  ps.add("dec.w", Tensor::randn({3, 2, 5}, 1.0, rng));
  ps.save(path);

  ParameterSet fresh;
  fresh.load(path);
  REQUIRE(fresh.items().size() == 3);
  for (const auto& [name, t] : ps.items()) {
    auto u = fresh.get(name);
    REQUIRE(u->shape == t->shape);
    CHECK(u->v == t->v);
  }

  ParameterSet wrong;
  wrong.add("enc.w", Tensor::make({4, 4}));
  wrong.add("enc.b", Tensor::make({1, 3}));
  wrong.add("dec.w", Tensor::make({3, 2, 5}));
  CHECK_THROWS(wrong.load(path));

  const auto bad = (dir / "bad.ckpt").string();
  write_text_file(bad, "NOT-A-CKPT\n0\n---\n");
  ParameterSet other;
  CHECK_THROWS(other.load(bad));
}
