#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "attbalance/grad_check.hpp"
#include "attbalance/ops.hpp"
#include "attbalance/rng.hpp"
#include "attbalance/tensor.hpp"
#include "oracles.hpp"

using namespace attbalance;
using testing_oracles::fd_gradient;
using testing_oracles::max_rel_err;
using testing_oracles::random_tensor;

namespace {

struct TapeReset {
  TapeReset() { Tape::active().reset(); }
  ~TapeReset() { Tape::active().reset(); }
};

}  // namespace

TEST_CASE("matmul identity and dot product") {
  TapeReset guard;
  Tensor eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
  Tensor b = Tensor::from_data({2, 2}, {3, 4, 5, 6});
  Tensor prod = matmul(eye, b);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(prod.data()[i] == b.data()[i]);  // bitwise for identity
  }

  Tensor row = Tensor::from_data({1, 2}, {1, 2});
  Tensor col = Tensor::from_data({2, 1}, {3, 4});
  CHECK(matmul(row, col).item() == doctest::Approx(11.0).epsilon(1e-15));

  CHECK_THROWS_AS(matmul(row, row), DimensionError);
  try {
    matmul(row, row);
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[1x2]") != std::string::npos);  // both shapes named
  }
}

TEST_CASE("matmul gradient matches column sums and finite differences") {
  TapeReset guard;
  Rng rng(7);
  Tensor a = random_tensor(rng, {3, 4}, -1, 1, true);
  Tensor b = random_tensor(rng, {4, 2}, -1, 1, true);

  Tensor loss = sum_all(matmul(a, b));
  Tape::active().backward(loss);

  // d sum(AB) / dA is the row-broadcast of B's column sums.
  std::vector<double> colsum(4, 0.0);
  for (int r = 0; r < 4; ++r) {
    for (int c = 0; c < 2; ++c) colsum[r] += b(r, c);
  }
  const auto& ga = a.grad();
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 4; ++c) {
      CHECK(ga[static_cast<std::size_t>(r) * 4 + c] == doctest::Approx(colsum[c]).epsilon(1e-12));
    }
  }

  auto eval = [&]() { return sum_all(matmul(a, b)).item(); };
  CHECK(max_rel_err(a.grad(), fd_gradient(eval, a)) < 1e-5);
  CHECK(max_rel_err(b.grad(), fd_gradient(eval, b)) < 1e-5);
}

TEST_CASE("softmax symmetry, overflow stability, normalization") {
  TapeReset guard;
  Tensor flat = softmax(Tensor::from_data({2}, {0, 0}), 0);
  CHECK(flat(0) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(flat(1) == doctest::Approx(0.5).epsilon(1e-15));

  Tensor extreme = softmax(Tensor::from_data({2}, {1e6, 0}), 0);
  CHECK(std::isfinite(extreme(0)));
  CHECK(extreme(0) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(extreme(1) == doctest::Approx(0.0).epsilon(1e-12));

  Rng rng(11);
  for (int rank = 1; rank <= 3; ++rank) {
    Shape shape;
    for (int d = 0; d < rank; ++d) shape.push_back(rng.uniform_int(2, 5));
    for (int axis = 0; axis < rank; ++axis) {
      Tensor x = random_tensor(rng, shape, -5, 5);
      Tensor y = softmax(x, axis);
      for (const double v : y.data()) CHECK(v >= 0.0);
      // Sum along the axis must give 1 for every slice.
      std::size_t outer = 1, inner = 1;
      for (int d = 0; d < axis; ++d) outer *= static_cast<std::size_t>(shape[d]);
      for (int d = axis + 1; d < rank; ++d) inner *= static_cast<std::size_t>(shape[d]);
      const std::size_t n = static_cast<std::size_t>(shape[axis]);
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
          double s = 0.0;
          for (std::size_t i = 0; i < n; ++i) s += y.data()[(o * n + i) * inner + in];
          CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
        }
      }
    }
  }

  CHECK_THROWS_AS(softmax(Tensor::from_data({2}, {0, 0}), 1), DimensionError);
}

TEST_CASE("softmax gradient on random 1x8 input") {
  TapeReset guard;
  Rng rng(23);
  Tensor x = random_tensor(rng, {1, 8}, -2, 2, true);
  Tensor w = random_tensor(rng, {1, 8}, -1, 1);  // fixed probe weights

  auto objective = [&]() { return sum_all(mul(w, softmax(x, 1))); };
  Tape::active().reset();
  Tensor loss = objective();
  Tape::active().backward(loss);
  const double err = max_rel_err(x.grad(), fd_gradient([&]() { return objective().item(); }, x),
                                 1e-9);
  CHECK(err < 1e-6);
}

TEST_CASE("elementwise definitions") {
  TapeReset guard;
  CHECK(sigmoid(Tensor::scalar(0.0)).item() == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(log(Tensor::scalar(1.0)).item() == doctest::Approx(0.0).epsilon(1e-15));
  // log floors its argument instead of returning -inf.
  CHECK(std::isfinite(log(Tensor::scalar(0.0)).item()));
  CHECK(log(Tensor::scalar(0.0)).item() == doctest::Approx(std::log(1e-12)).epsilon(1e-12));

  Tensor x = Tensor::from_data({2, 2, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12});
  Tensor m = mean_over_axis(x, 0);
  REQUIRE(m.shape() == Shape{2, 3});
  for (int i = 0; i < 6; ++i) {
    CHECK(m.data()[static_cast<std::size_t>(i)] ==
          doctest::Approx((x.data()[static_cast<std::size_t>(i)] +
                           x.data()[static_cast<std::size_t>(i) + 6]) /
                          2.0)
              .epsilon(1e-15));
  }

  CHECK_THROWS_AS(add(Tensor::zeros({2, 3}), Tensor::zeros({3, 2})), DimensionError);
}

TEST_CASE("backward populates gradients and guards reuse") {
  TapeReset guard;
  Tensor x = Tensor::from_data({3}, {1, 2, 3}, true);
  Tensor loss = sum_all(mul(x, x));
  Tape::active().backward(loss);
  CHECK(x.grad()[0] == doctest::Approx(2.0).epsilon(1e-15));
  CHECK(x.grad()[1] == doctest::Approx(4.0).epsilon(1e-15));
  CHECK(x.grad()[2] == doctest::Approx(6.0).epsilon(1e-15));

  CHECK_THROWS_AS(Tape::active().backward(loss), ContractError);  // no reset yet

  // After an explicit reset and a fresh pass, backward is valid again.
  Tape::active().reset();
  x.drop_grad();
  Tensor loss2 = sum_all(mul(x, x));
  Tape::active().backward(loss2);
  CHECK(x.grad()[2] == doctest::Approx(6.0).epsilon(1e-15));
}

TEST_CASE("backward contract errors") {
  TapeReset guard;
  Tensor x = Tensor::from_data({2}, {1, 2}, true);
  Tensor vec = mul(x, x);  // non-scalar
  CHECK_THROWS_AS(Tape::active().backward(vec), ContractError);

  Tensor detached = Tensor::scalar(5.0);
  CHECK_THROWS_AS(Tape::active().backward(detached), ContractError);
}

TEST_CASE("backward is linear in the objective") {
  TapeReset guard;
  Rng rng(5);
  const double a = 0.37;
  const double b = -1.25;

  auto grads_of = [&](const std::function<Tensor(const Tensor&)>& make_loss,
                      const std::vector<double>& init) {
    Tape::active().reset();
    Tensor x = Tensor::from_data({4}, init, true);
    Tensor loss = make_loss(x);
    Tape::active().backward(loss);
    std::vector<double> g = x.grad();
    Tape::active().reset();
    return g;
  };

  std::vector<double> init = {0.3, -0.7, 1.1, 0.2};
  auto f = [](const Tensor& x) { return sum_all(mul(x, x)); };
  auto g = [](const Tensor& x) { return sum_all(sigmoid(x)); };
  auto combined = [&](const Tensor& x) {
    return add(scale(f(x), a), scale(g(x), b));
  };

  const auto gf = grads_of(f, init);
  const auto gg = grads_of(g, init);
  const auto gc = grads_of(combined, init);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(gc[i] == doctest::Approx(a * gf[i] + b * gg[i]).epsilon(1e-12));
  }
}

TEST_CASE("every differentiable op matches finite differences across ranks") {
  TapeReset guard;
  Rng rng(101);

  auto check_unary = [&](const char* name, const std::function<Tensor(const Tensor&)>& op,
                         double lo, double hi) {
    for (int rank = 1; rank <= 3; ++rank) {
      Shape shape;
      for (int d = 0; d < rank; ++d) shape.push_back(rng.uniform_int(2, 4));
      Tensor x = random_tensor(rng, shape, lo, hi, true);
      Shape out_shape;
      {
        NoGradGuard no_grad;
        out_shape = op(x).shape();
      }
      Tensor probe = random_tensor(rng, out_shape, -1, 1);
      auto objective = [&]() { return sum_all(mul(probe, op(x))); };
      Tape::active().reset();
      Tensor loss = objective();
      Tape::active().backward(loss);
      const double err =
          max_rel_err(x.grad(), fd_gradient([&]() { return objective().item(); }, x));
      INFO(name << " rank " << rank);
      CHECK(err < 1e-5);
      x.drop_grad();
    }
  };

  check_unary("neg", [](const Tensor& x) { return neg(x); }, -2, 2);
  check_unary("log", [](const Tensor& x) { return log(x); }, 0.1, 3);
  check_unary("exp", [](const Tensor& x) { return exp(x); }, -2, 2);
  check_unary("sigmoid", [](const Tensor& x) { return sigmoid(x); }, -3, 3);
  check_unary("relu", [](const Tensor& x) { return relu(x); }, 0.2, 2);
  check_unary("abs", [](const Tensor& x) { return abs(x); }, 0.2, 2);
  check_unary("scale", [](const Tensor& x) { return scale(x, -1.7); }, -2, 2);
  check_unary("softmax0", [](const Tensor& x) { return softmax(x, 0); }, -2, 2);
  check_unary("mean0", [](const Tensor& x) { return mean_over_axis(x, 0); }, -2, 2);
  check_unary("reshape", [](const Tensor& x) {
    Shape flat{static_cast<int>(x.numel())};
    return reshape(x, flat);
  }, -2, 2);

  auto check_binary = [&](const char* name,
                          const std::function<Tensor(const Tensor&, const Tensor&)>& op,
                          double lo, double hi, bool scalar_rhs) {
    for (int rank = 1; rank <= 3; ++rank) {
      Shape shape;
      for (int d = 0; d < rank; ++d) shape.push_back(rng.uniform_int(2, 4));
      Tensor x = random_tensor(rng, shape, lo, hi, true);
      Tensor y = scalar_rhs ? random_tensor(rng, {1}, lo, hi, true)
                            : random_tensor(rng, shape, lo, hi, true);
      Tensor probe = random_tensor(rng, shape, -1, 1);
      auto objective = [&]() { return sum_all(mul(probe, op(x, y))); };
      Tape::active().reset();
      Tensor loss = objective();
      Tape::active().backward(loss);
      INFO(name << " rank " << rank << (scalar_rhs ? " scalar rhs" : ""));
      CHECK(max_rel_err(x.grad(), fd_gradient([&]() { return objective().item(); }, x)) < 1e-5);
      CHECK(max_rel_err(y.grad(), fd_gradient([&]() { return objective().item(); }, y)) < 1e-5);
      x.drop_grad();
      y.drop_grad();
    }
  };

  for (const bool scalar_rhs : {false, true}) {
    check_binary("add", [](const Tensor& a, const Tensor& b) { return add(a, b); }, -2, 2,
                 scalar_rhs);
    check_binary("sub", [](const Tensor& a, const Tensor& b) { return sub(a, b); }, -2, 2,
                 scalar_rhs);
    check_binary("mul", [](const Tensor& a, const Tensor& b) { return mul(a, b); }, -2, 2,
                 scalar_rhs);
    check_binary("div", [](const Tensor& a, const Tensor& b) { return div(a, b); }, 0.5, 2,
                 scalar_rhs);
    check_binary("minimum", [](const Tensor& a, const Tensor& b) { return minimum(a, b); }, -2,
                 2, scalar_rhs);
    check_binary("maximum", [](const Tensor& a, const Tensor& b) { return maximum(a, b); }, -2,
                 2, scalar_rhs);
  }

  // Structural ops at rank 2.
  {
    Tensor x = random_tensor(rng, {3, 5}, -2, 2, true);
    Tensor probe = random_tensor(rng, {5, 3}, -1, 1);
    auto objective = [&]() { return sum_all(mul(probe, transpose(x))); };
    Tape::active().reset();
    Tensor loss = objective();
    Tape::active().backward(loss);
    CHECK(max_rel_err(x.grad(), fd_gradient([&]() { return objective().item(); }, x)) < 1e-5);
  }
  {
    Tensor x = random_tensor(rng, {4, 3}, -2, 2, true);
    Tensor row = random_tensor(rng, {3}, -2, 2, true);
    Tensor probe = random_tensor(rng, {4, 3}, -1, 1);
    auto objective = [&]() { return sum_all(mul(probe, add_rowvec(x, row))); };
    Tape::active().reset();
    Tensor loss = objective();
    Tape::active().backward(loss);
    CHECK(max_rel_err(x.grad(), fd_gradient([&]() { return objective().item(); }, x)) < 1e-5);
    CHECK(max_rel_err(row.grad(), fd_gradient([&]() { return objective().item(); }, row)) < 1e-5);
  }
  {
    Tensor x = random_tensor(rng, {4, 6}, -2, 2, true);
    Tensor gamma = random_tensor(rng, {6}, 0.5, 1.5, true);
    Tensor beta = random_tensor(rng, {6}, -0.5, 0.5, true);
    Tensor probe = random_tensor(rng, {4, 6}, -1, 1);
    auto objective = [&]() { return sum_all(mul(probe, layer_norm(x, gamma, beta))); };
    Tape::active().reset();
    Tensor loss = objective();
    Tape::active().backward(loss);
    CHECK(max_rel_err(x.grad(), fd_gradient([&]() { return objective().item(); }, x)) < 1e-4);
    CHECK(max_rel_err(gamma.grad(), fd_gradient([&]() { return objective().item(); }, gamma)) <
          1e-5);
    CHECK(max_rel_err(beta.grad(), fd_gradient([&]() { return objective().item(); }, beta)) <
          1e-5);
  }
  {
    Tensor table = random_tensor(rng, {5, 3}, -2, 2, true);
    const std::vector<int> ids = {4, 0, 2, 0};
    Tensor probe = random_tensor(rng, {4, 3}, -1, 1);
    auto objective = [&]() { return sum_all(mul(probe, gather_rows(table, ids))); };
    Tape::active().reset();
    Tensor loss = objective();
    Tape::active().backward(loss);
    CHECK(max_rel_err(table.grad(), fd_gradient([&]() { return objective().item(); }, table)) <
          1e-5);
  }
  {
    Tensor a = random_tensor(rng, {2, 3}, -2, 2, true);
    Tensor b = random_tensor(rng, {4, 3}, -2, 2, true);
    Tensor probe = random_tensor(rng, {6, 3}, -1, 1);
    auto objective = [&]() { return sum_all(mul(probe, concat_rows({a, b}))); };
    Tape::active().reset();
    Tensor loss = objective();
    Tape::active().backward(loss);
    CHECK(max_rel_err(a.grad(), fd_gradient([&]() { return objective().item(); }, a)) < 1e-5);
    CHECK(max_rel_err(b.grad(), fd_gradient([&]() { return objective().item(); }, b)) < 1e-5);
  }
  {
    Tensor a = random_tensor(rng, {3, 2}, -2, 2, true);
    Tensor b = random_tensor(rng, {3, 4}, -2, 2, true);
    Tensor probe = random_tensor(rng, {3, 6}, -1, 1);
    auto objective = [&]() { return sum_all(mul(probe, concat_cols({a, b}))); };
    Tape::active().reset();
    Tensor loss = objective();
    Tape::active().backward(loss);
    CHECK(max_rel_err(a.grad(), fd_gradient([&]() { return objective().item(); }, a)) < 1e-5);
    CHECK(max_rel_err(b.grad(), fd_gradient([&]() { return objective().item(); }, b)) < 1e-5);
  }
  {
    Tensor x = random_tensor(rng, {4, 6}, -2, 2, true);
    Tensor probe = random_tensor(rng, {2, 3}, -1, 1);
    auto objective = [&]() {
      return sum_all(mul(probe, slice_cols(slice_rows(x, 1, 3), 2, 5)));
    };
    Tape::active().reset();
    Tensor loss = objective();
    Tape::active().backward(loss);
    CHECK(max_rel_err(x.grad(), fd_gradient([&]() { return objective().item(); }, x)) < 1e-5);
  }
}

TEST_CASE("no-grad guard freezes the tape") {
  TapeReset guard;
  Tensor x = Tensor::from_data({2}, {1, 2}, true);
  const std::size_t before = Tape::active().size();
  {
    NoGradGuard no_grad;
    Tensor y = mul(x, x);
    CHECK_FALSE(y.requires_grad());
  }
  CHECK(Tape::active().size() == before);
}

TEST_CASE("grad_check passes on exact rules and flags corrupted ones") {
  TapeReset guard;
  Rng rng(77);

  // Linear function: analytic and numeric agree to round-off.
  Tensor x = random_tensor(rng, {4}, -1, 1, true);
  GradCheckReport linear =
      grad_check([&]() { return sum_all(x); }, {{"x", x}});
  CHECK(linear.pass);
  CHECK(linear.worst_rel_err < 1e-9);

  // Softmax-then-log composite.
  Tensor z = random_tensor(rng, {1, 6}, -2, 2, true);
  GradCheckReport composite = grad_check(
      [&]() { return neg(log(sum_all(mul(softmax(z, 1), Tensor::from_data(
                                                            {1, 6}, {1, 0, 0, 1, 0, 1}))))); },
      {{"z", z}});
  CHECK(composite.pass);
  CHECK(composite.worst_rel_err < 1e-4);

  // Deliberately corrupted backward rule must fail and name the parameter.
  Tensor w = random_tensor(rng, {3}, -1, 1, true);
  GradCheckReport corrupted = grad_check(
      [&]() { return sum_all(with_corrupted_gradient(mul(w, w))); }, {{"w", w}});
  CHECK_FALSE(corrupted.pass);
  CHECK(corrupted.worst_param == "w");
  REQUIRE(corrupted.entries.size() == 1);
  CHECK(corrupted.entries[0].name == "w");
  CHECK_FALSE(corrupted.entries[0].pass);

  // Every parameter group appears exactly once.
  Tensor p1 = random_tensor(rng, {2}, -1, 1, true);
  Tensor p2 = random_tensor(rng, {2}, -1, 1, true);
  GradCheckReport multi = grad_check(
      [&]() { return add(sum_all(mul(p1, p1)), sum_all(sigmoid(p2))); },
      {{"p1", p1}, {"p2", p2}});
  REQUIRE(multi.entries.size() == 2);
  CHECK(multi.entries[0].name == "p1");
  CHECK(multi.entries[1].name == "p2");
  CHECK(multi.pass);
}

TEST_CASE("tensor shape bookkeeping") {
  Tensor t = Tensor::zeros({2, 3});
  CHECK(t.numel() == 6);
  CHECK(shape_numel({4, 5}) == 20);
  CHECK_THROWS_AS(Tensor::from_data({2, 2}, {1, 2, 3}), DimensionError);
  CHECK_THROWS_AS(Tensor::zeros({2, 2}).item(), ContractError);
  Tensor d = Tensor::from_data({2}, {1, 2}, true).detach();
  CHECK_FALSE(d.requires_grad());
}
