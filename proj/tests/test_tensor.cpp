#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <numeric>
#include <vector>

#include "support/gradcheck.hpp"
#include "transfollower/ops.hpp"
#include "transfollower/tensor.hpp"

using namespace transfollower;
using tfl_test::check_gradients;
using tfl_test::random_tensor;

namespace {

// Independent oracle: naive triple-loop product.
std::vector<double> naive_matmul(const std::vector<double>& a, std::size_t m,
                                 std::size_t k, const std::vector<double>& b,
                                 std::size_t n) {
  std::vector<double> c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t p = 0; p < k; ++p) c[i * n + j] += a[i * k + p] * b[p * n + j];
  return c;
}

}  // namespace

TEST_CASE("matmul basics") {
  SECTION("identity") {
    Tensor eye(Shape{2, 2}, {1, 0, 0, 1});
    Tensor a(Shape{2, 2}, {1, 2, 3, 4});
    REQUIRE(matmul(eye, a).values() == a.values());
  }
  SECTION("column product matches naive oracle") {
    Tensor a(Shape{2, 2}, {1, 2, 3, 4});
    Tensor b(Shape{2, 1}, {0, 1});
    Tensor c = matmul(a, b);
    REQUIRE(c.values() == std::vector<double>{2, 4});
    REQUIRE(c.values() == naive_matmul(a.values(), 2, 2, b.values(), 1));
  }
  SECTION("zero matrix annihilates") {
    Tensor z(Shape{3, 2});
    Rng rng(7);
    Tensor b = random_tensor({2, 4}, rng);
    Tensor c = matmul(z, b);
    for (double v : c.values()) REQUIRE(v == 0.0);
  }
  SECTION("random shapes match naive oracle") {
    Rng rng(123);
    for (int t = 0; t < 10; ++t) {
      std::size_t m = 1 + rng.below(5), k = 1 + rng.below(5), n = 1 + rng.below(5);
      Tensor a = random_tensor({m, k}, rng);
      Tensor b = random_tensor({k, n}, rng);
      auto expect = naive_matmul(a.values(), m, k, b.values(), n);
      auto got = matmul(a, b).values();
      for (std::size_t i = 0; i < expect.size(); ++i)
        REQUIRE(got[i] == Catch::Approx(expect[i]).margin(1e-12));
    }
  }
  SECTION("shape mismatch names both shapes") {
    Tensor a(Shape{2, 3});
    Tensor b(Shape{2, 3});
    REQUIRE_THROWS_WITH(matmul(a, b),
                        Catch::Matchers::ContainsSubstring("[2x3]") &&
                            Catch::Matchers::ContainsSubstring("inner dimensions"));
  }
}

TEST_CASE("softmax_rows") {
  SECTION("uniform row") {
    Tensor x(Shape{1, 3}, {4.2, 4.2, 4.2});
    auto y = softmax_rows(x).values();
    for (double v : y) REQUIRE(v == Catch::Approx(1.0 / 3.0).epsilon(1e-14));
  }
  SECTION("closed form [0, ln 2] -> [1/3, 2/3]") {
    Tensor x(Shape{1, 2}, {0.0, std::log(2.0)});
    auto y = softmax_rows(x).values();
    REQUIRE(y[0] == Catch::Approx(1.0 / 3.0).epsilon(1e-12));
    REQUIRE(y[1] == Catch::Approx(2.0 / 3.0).epsilon(1e-12));
  }
  SECTION("shift invariance") {
    Rng rng(5);
    Tensor x = random_tensor({4, 6}, rng, -3, 3);
    Tensor shifted(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) shifted(i) = x(i) + 17.5;
    auto a = softmax_rows(x).values();
    auto b = softmax_rows(shifted).values();
    for (std::size_t i = 0; i < a.size(); ++i)
      REQUIRE(a[i] == Catch::Approx(b[i]).margin(1e-12));
  }
  SECTION("rows sum to one, entries in [0,1]") {
    Rng rng(9);
    for (int t = 0; t < 20; ++t) {
      std::size_t r = 1 + rng.below(6), c = 1 + rng.below(6);
      Tensor y = softmax_rows(random_tensor({r, c}, rng, -30, 30));
      for (std::size_t i = 0; i < r; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
          REQUIRE(y(i, j) >= 0.0);
          REQUIRE(y(i, j) <= 1.0);
          s += y(i, j);
        }
        REQUIRE(std::abs(s - 1.0) < 1e-12);
      }
    }
  }
}

TEST_CASE("layer_norm") {
  Tensor gamma = Tensor::scalar(1.0);
  Tensor beta = Tensor::scalar(0.0);
  SECTION("two-point row normalizes to [-1, 1]") {
    Tensor x(Shape{1, 2}, {1.0, 3.0});
    auto y = layer_norm(x, gamma, beta, 0.0).values();
    REQUIRE(y[0] == Catch::Approx(-1.0).epsilon(1e-12));
    REQUIRE(y[1] == Catch::Approx(1.0).epsilon(1e-12));
  }
  SECTION("constant vector maps to beta") {
    Tensor x(Shape{1, 4}, {2.5, 2.5, 2.5, 2.5});
    Tensor b5 = Tensor::scalar(5.0);
    Tensor y = layer_norm(x, gamma, b5);
    for (double v : y.values()) REQUIRE(v == Catch::Approx(5.0).margin(1e-12));
  }
  SECTION("beta only shifts") {
    Rng rng(11);
    Tensor x = random_tensor({3, 5}, rng);
    Tensor g = Tensor::scalar(1.7);
    auto base = layer_norm(x, g, Tensor::scalar(0.0)).values();
    auto shifted = layer_norm(x, g, Tensor::scalar(2.25)).values();
    for (std::size_t i = 0; i < base.size(); ++i)
      REQUIRE(shifted[i] == Catch::Approx(base[i] + 2.25).margin(1e-12));
  }
  SECTION("output mean ~ beta, variance ~ 1 for gamma=1 beta=0") {
    Rng rng(13);
    for (int t = 0; t < 10; ++t) {
      std::size_t d = 2 + rng.below(8);
      Tensor x = random_tensor({1, d}, rng, -4, 4);
      auto y = layer_norm(x, gamma, beta, 1e-12).values();
      double mean = std::accumulate(y.begin(), y.end(), 0.0) / double(d);
      double var = 0.0;
      for (double v : y) var += (v - mean) * (v - mean);
      var /= double(d);
      REQUIRE(std::abs(mean) < 1e-9);
      REQUIRE(std::abs(var - 1.0) < 1e-6);
    }
  }
}

TEST_CASE("backward basics") {
  SECTION("sum of squares gradient") {
    Tensor x(Shape{1}, {3.0});
    x.set_requires_grad(true);
    Tape tape;
    Tensor loss = sum_all(mul(x, x));
    tape.backward(loss);
    REQUIRE(x.grad()[0] == Catch::Approx(6.0).epsilon(1e-12));
  }
  SECTION("grads accumulate across uses of the same tensor") {
    Tensor x(Shape{1}, {2.0});
    x.set_requires_grad(true);
    Tape tape;
    Tensor loss = sum_all(add(x, x));
    tape.backward(loss);
    REQUIRE(x.grad()[0] == Catch::Approx(2.0));
  }
  SECTION("parameter off the loss path keeps zero grad") {
    Tensor x(Shape{2}, {1.0, 2.0});
    Tensor unused(Shape{3}, {5.0, 5.0, 5.0});
    x.set_requires_grad(true);
    unused.set_requires_grad(true);
    Tape tape;
    Tensor loss = mean_all(x);
    tape.backward(loss);
    for (double g : unused.grad()) REQUIRE(g == 0.0);
  }
  SECTION("backward on non-scalar is a contract error") {
    Tensor x(Shape{2}, {1.0, 2.0});
    x.set_requires_grad(true);
    Tape tape;
    Tensor y = add(x, x);
    REQUIRE_THROWS_AS(tape.backward(y), std::invalid_argument);
  }
  SECTION("grad accumulates additively across backward calls") {
    Tensor x(Shape{1}, {4.0});
    x.set_requires_grad(true);
    for (int i = 0; i < 2; ++i) {
      Tape tape;
      Tensor loss = sum_all(mul(x, x));
      tape.backward(loss);
    }
    REQUIRE(x.grad()[0] == Catch::Approx(16.0));
  }
}

TEST_CASE("finite-difference check for every differentiable op") {
  // 20 random shapes/seeds per op; max relative error < 1e-4.
  constexpr double kTol = 1e-4;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed * 7919 + 3);
    const std::size_t m = 1 + rng.below(4), k = 1 + rng.below(4), n = 1 + rng.below(4);
    CAPTURE(seed, m, k, n);

    // probes make the loss sensitive to every output element
    auto probe_loss = [&rng](Shape s) {
      Tensor p = random_tensor(std::move(s), rng, 0.5, 1.5);
      return [p](const Tensor& out) { return sum_all(mul(out, p)); };
    };

    {
      auto lf = probe_loss({m, n});
      auto r = check_gradients({random_tensor({m, k}, rng), random_tensor({k, n}, rng)},
                               [&](const auto& in) { return lf(matmul(in[0], in[1])); });
      CAPTURE(r.analytic, r.numeric);
      REQUIRE(r.max_rel_err < kTol);
    }
    {
      auto lf = probe_loss({m, k});
      for (auto op : {0, 1, 2}) {
        auto r = check_gradients(
            {random_tensor({m, k}, rng), random_tensor({m, k}, rng)},
            [&](const auto& in) {
              return lf(op == 0 ? add(in[0], in[1])
                                : op == 1 ? sub(in[0], in[1]) : mul(in[0], in[1]));
            });
        REQUIRE(r.max_rel_err < kTol);
      }
    }
    {
      auto lf = probe_loss({m, k});
      for (auto op : {0, 1, 2}) {
        auto r = check_gradients({random_tensor({m, k}, rng, -2, 2)},
                                 [&](const auto& in) {
                                   return lf(op == 0 ? relu(in[0])
                                                     : op == 1 ? sigmoid(in[0])
                                                               : transfollower::tanh(in[0]));
                                 });
        REQUIRE(r.max_rel_err < kTol);
      }
    }
    {
      auto lf = probe_loss({m, k});
      auto r = check_gradients({random_tensor({m, k}, rng, -2, 2)},
                               [&](const auto& in) { return lf(softmax_rows(in[0])); });
      REQUIRE(r.max_rel_err < kTol);
    }
    {
      auto lf = probe_loss({m, k});
      auto r = check_gradients(
          {random_tensor({m, k}, rng, -2, 2), Tensor::scalar(rng.uniform(0.5, 1.5)),
           Tensor::scalar(rng.uniform(-0.5, 0.5))},
          [&](const auto& in) { return lf(layer_norm(in[0], in[1], in[2])); });
      REQUIRE(r.max_rel_err < kTol);
    }
    {
      auto lf = probe_loss({k, m});
      auto r = check_gradients({random_tensor({m, k}, rng)},
                               [&](const auto& in) { return lf(transpose(in[0])); });
      REQUIRE(r.max_rel_err < kTol);
    }
    {
      auto lf = probe_loss({m + n, k});
      auto r = check_gradients({random_tensor({m, k}, rng), random_tensor({n, k}, rng)},
                               [&](const auto& in) { return lf(concat_rows(in[0], in[1])); });
      REQUIRE(r.max_rel_err < kTol);
    }
    {
      const std::size_t rtake = 1 + rng.below(m);
      auto lf = probe_loss({rtake, k});
      auto r = check_gradients({random_tensor({m, k}, rng)}, [&](const auto& in) {
        return lf(slice_rows(in[0], m - rtake, m));
      });
      REQUIRE(r.max_rel_err < kTol);
    }
    {
      const std::size_t ctake = 1 + rng.below(k);
      auto lf = probe_loss({m, ctake});
      auto r = check_gradients({random_tensor({m, k}, rng)}, [&](const auto& in) {
        return lf(slice_cols(in[0], k - ctake, k));
      });
      REQUIRE(r.max_rel_err < kTol);
    }
    {
      auto r = check_gradients({random_tensor({m, k}, rng)},
                               [&](const auto& in) { return mean_all(in[0]); });
      REQUIRE(r.max_rel_err < kTol);
      r = check_gradients({random_tensor({m, k}, rng)},
                          [&](const auto& in) { return sum_all(in[0]); });
      REQUIRE(r.max_rel_err < kTol);
    }
    {
      auto lf = probe_loss({m, k});
      auto r = check_gradients({random_tensor({m, k}, rng), random_tensor({k}, rng)},
                               [&](const auto& in) { return lf(add_row_bias(in[0], in[1])); });
      REQUIRE(r.max_rel_err < kTol);
    }
    {
      std::vector<std::size_t> positions;
      for (std::size_t i = 0; i < n; ++i) positions.push_back(rng.below(m));
      auto lf = probe_loss({n, k});
      auto r = check_gradients({random_tensor({m, k}, rng)}, [&](const auto& in) {
        return lf(embedding_rows(in[0], positions));
      });
      REQUIRE(r.max_rel_err < kTol);
    }
    {
      // dropout with a frozen mask: re-seed an identical rng on every call
      auto lf = probe_loss({m, k});
      auto r = check_gradients({random_tensor({m, k}, rng)}, [&, seed](const auto& in) {
        Rng drop_rng = Rng::derive(seed, 42);
        return lf(dropout(in[0], 0.4, drop_rng, true));
      });
      REQUIRE(r.max_rel_err < kTol);
    }
  }
}

TEST_CASE("dropout contract") {
  Rng rng(21);
  Tensor x = random_tensor({5, 7}, rng);
  SECTION("eval mode is the identity, bit-exact") {
    Rng r2(0);
    Tensor y = dropout(x, 0.5, r2, false);
    REQUIRE(y.node() == x.node());
    REQUIRE(y.values() == x.values());
  }
  SECTION("train mode zeroes or rescales") {
    Rng r2(3);
    Tensor y = dropout(x, 0.5, r2, true);
    for (std::size_t i = 0; i < x.size(); ++i) {
      bool zeroed = y(i) == 0.0;
      bool rescaled = std::abs(y(i) - 2.0 * x(i)) < 1e-15;
      REQUIRE((zeroed || rescaled));
    }
  }
  SECTION("invalid probability rejected") {
    Rng r2(3);
    REQUIRE_THROWS_AS(dropout(x, 1.0, r2, true), std::invalid_argument);
  }
}

TEST_CASE("embedding lookup contract") {
  Tensor table(Shape{4, 3}, {0, 1, 2, 10, 11, 12, 20, 21, 22, 30, 31, 32});
  SECTION("rows are gathered") {
    Tensor y = embedding_rows(table, {2, 0});
    REQUIRE(y.values() == std::vector<double>{20, 21, 22, 0, 1, 2});
  }
  SECTION("out-of-range position is a contract error") {
    REQUIRE_THROWS_AS(embedding_rows(table, {4}), std::invalid_argument);
  }
}

TEST_CASE("forward and backward stay finite on finite inputs") {
  Rng rng(31);
  for (int t = 0; t < 10; ++t) {
    Tensor a = random_tensor({3, 4}, rng, -5, 5);
    Tensor w = random_tensor({4, 4}, rng, -2, 2);
    a.set_requires_grad(true);
    w.set_requires_grad(true);
    Tape tape;
    Tensor h = softmax_rows(matmul(relu(a), w));
    Tensor loss = mean_all(layer_norm(h, Tensor::scalar(1.0), Tensor::scalar(0.0)));
    tape.backward(loss);
    REQUIRE(detail::all_finite(h.values()));
    REQUIRE(detail::all_finite(a.grad()));
    REQUIRE(detail::all_finite(w.grad()));
  }
}
