#include <cmath>
#include <cstdlib>
#include <numeric>
#include <stdexcept>

#include "doctest.h"
#include "npath/error.hpp"
#include "npath/gradcheck.hpp"
#include "npath/parallel.hpp"
#include "npath/rng.hpp"
#include "npath/tape.hpp"
#include "npath/tensor.hpp"

using namespace npath;

namespace {

Tensor random_tensor(Shape shape, std::uint64_t seed) {
  Rng rng(seed);
  Tensor t(std::move(shape));
  for (auto& v : t.mutable_data()) v = rng.uniform(-2.0, 2.0);
  return t;
}

std::vector<std::size_t> all_coords(const Tensor& t) {
  std::vector<std::size_t> c(t.numel());
  std::iota(c.begin(), c.end(), 0);
  return c;
}

// Every primitive is checked through a scalar reduction weighted by fixed
// random coefficients, so each output entry contributes a distinct amount.
Var weighted_sum(Tape& tape, Var v, std::uint64_t seed) {
  const Tensor& value = tape.value(v);
  return tape.sum(tape.mul(v, tape.constant(random_tensor(value.shape(), seed))));
}

void check_primitive(const TapeFn& build, const Tensor& point, double tol = 1e-7) {
  const auto r = finite_difference_check(build, point, 1e-5, all_coords(point));
  CHECK(r.max_relative_error < tol);
}

}  // namespace

TEST_SUITE("tensor-core") {
  TEST_CASE("tensor construction and shape errors") {
    Tensor t({2, 3}, 1.5);
    CHECK(t.numel() == 6);
    CHECK(t.rows() == 2);
    CHECK(t.cols() == 3);
    CHECK(t.at(1, 2) == 1.5);
    CHECK_THROWS_AS(Tensor({2, 2}, std::vector<double>{1.0, 2.0}), DimensionError);
    CHECK_THROWS_AS(t.item(), DimensionError);
    CHECK(Tensor::scalar(3.0).item() == 3.0);
    CHECK_THROWS_AS(require_same_shape(t, Tensor({3, 2}), "x"), DimensionError);
    CHECK(t.reshaped({3, 2}).shape() == Shape{3, 2});
    CHECK_THROWS_AS(t.reshaped({4, 2}), DimensionError);
  }

  TEST_CASE("matmul shape mismatch is reported") {
    Tape tape;
    const Var a = tape.constant(Tensor({2, 3}));
    const Var b = tape.constant(Tensor({2, 3}));
    CHECK_THROWS_AS(tape.matmul(a, b), DimensionError);
  }

  TEST_CASE("matmul, add with broadcast, transpose") {
    const Tensor b = random_tensor({3, 4}, 2);
    const Tensor bias = random_tensor({4}, 3);
    check_primitive(
        [&](Tape& t, Var x) {
          return weighted_sum(t, t.add(t.matmul(x, t.constant(b)), t.constant(bias)), 4);
        },
        random_tensor({2, 3}, 1));
    check_primitive([&](Tape& t, Var x) { return weighted_sum(t, t.transpose(x), 5); }, random_tensor({2, 3}, 6));
    check_primitive([&](Tape& t, Var x) { return weighted_sum(t, t.add(t.constant(b), x), 7); },
                    random_tensor({4}, 8));
  }

  TEST_CASE("mul and scale") {
    check_primitive([](Tape& t, Var x) { return weighted_sum(t, t.mul(x, x), 9); }, random_tensor({2, 2}, 10));
    check_primitive([](Tape& t, Var x) { return weighted_sum(t, t.scale(x, -2.5), 11); }, random_tensor({3}, 12));
  }

  TEST_CASE("cube has derivative 3a^2") {
    Tape tape;
    const Var a = tape.variable(Tensor::scalar(1.7));
    tape.backward(tape.mul(tape.mul(a, a), a));
    CHECK(tape.grad(a).item() == doctest::Approx(3.0 * 1.7 * 1.7).epsilon(1e-15));
  }

  TEST_CASE("gelu derivative at zero is one half") {
    Tape tape;
    const Var a = tape.variable(Tensor::scalar(0.0));
    const Var y = tape.gelu(a);
    CHECK(tape.value(y).item() == 0.0);
    tape.backward(y);
    CHECK(tape.grad(a).item() == 0.5);
    const double h = 1e-6;
    Tape fd;
    const double up = fd.value(fd.gelu(fd.constant(Tensor::scalar(h)))).item();
    const double down = fd.value(fd.gelu(fd.constant(Tensor::scalar(-h)))).item();
    CHECK((up - down) / (2 * h) == doctest::Approx(0.5).epsilon(1e-9));
  }

  TEST_CASE("gelu matches the erf form") {
    Tape tape;
    const Tensor x = Tensor::matrix(1, 3, {-1.3, 0.2, 2.4});
    const Tensor& y = tape.value(tape.gelu(tape.constant(x)));
    for (std::size_t i = 0; i < 3; ++i) {
      CHECK(y[i] == doctest::Approx(0.5 * x[i] * (1.0 + std::erf(x[i] / std::sqrt(2.0)))).epsilon(1e-15));
    }
    check_primitive([](Tape& t, Var v) { return weighted_sum(t, t.gelu(v), 13); }, random_tensor({2, 3}, 14));
  }

  TEST_CASE("layer norm, softmax along both axes") {
    const Tensor g = random_tensor({5}, 15), b = random_tensor({5}, 16);
    check_primitive(
        [&](Tape& t, Var x) { return weighted_sum(t, t.layer_norm(x, t.constant(g), t.constant(b), 1e-6), 17); },
        random_tensor({3, 5}, 18));
    check_primitive([](Tape& t, Var x) { return weighted_sum(t, t.softmax(x, 1), 19); }, random_tensor({3, 4}, 20));
    check_primitive([](Tape& t, Var x) { return weighted_sum(t, t.softmax(x, 0), 21); }, random_tensor({3, 4}, 22));
  }

  TEST_CASE("layer norm gains and biases get gradients") {
    const Tensor x = random_tensor({3, 5}, 23), b = random_tensor({5}, 24);
    check_primitive(
        [&](Tape& t, Var g) { return weighted_sum(t, t.layer_norm(t.constant(x), g, t.constant(b), 1e-6), 25); },
        random_tensor({5}, 26));
  }

  TEST_CASE("index select, concat, sum, cross entropy") {
    check_primitive([](Tape& t, Var x) { return weighted_sum(t, t.index_select(x, 1, {2, 0, 2}), 27); },
                    random_tensor({3, 4}, 28));
    check_primitive([](Tape& t, Var x) { return weighted_sum(t, t.index_select(x, 0, {1}), 29); },
                    random_tensor({3, 4}, 30));
    const Tensor other = random_tensor({2, 4}, 31);
    check_primitive(
        [&](Tape& t, Var x) {
          const Var parts[] = {x, t.constant(other)};
          return weighted_sum(t, t.concat(parts, 0), 32);
        },
        random_tensor({1, 4}, 33));
    check_primitive([](Tape& t, Var x) { return t.cross_entropy(x, 2); }, random_tensor({1, 5}, 34));
  }

  TEST_CASE("softmax rows sum to one") {
    Tape tape;
    const Tensor& p = tape.value(tape.softmax(tape.constant(random_tensor({4, 7}, 35)), 1));
    for (std::size_t r = 0; r < 4; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < 7; ++c) s += p.at(r, c);
      CHECK(std::abs(s - 1.0) <= 1e-12);
    }
  }

  TEST_CASE("column hooks") {
    check_primitive([](Tape& t, Var x) { return weighted_sum(t, t.scale_column(x, 1, {0, 2}, 3.0), 36); },
                    random_tensor({3, 3}, 37));
    const Tensor base = random_tensor({3, 3}, 38);
    check_primitive(
        [&](Tape& t, Var v) { return weighted_sum(t, t.overwrite_column(t.constant(base), 2, {0, 1}, v), 39); },
        random_tensor({2}, 40));
    check_primitive(
        [&](Tape& t, Var d) { return weighted_sum(t, t.shift_column(t.constant(base), 0, {1, 2}, d), 41); },
        Tensor::scalar(0.3));

    Tape tape;
    const Var x = tape.constant(base);
    const Tensor& y = tape.value(tape.scale_column(x, 1, {0}, 0.0));
    CHECK(y.at(0, 1) == 0.0);
    CHECK(y.at(1, 1) == base.at(1, 1));
    CHECK(y.at(0, 0) == base.at(0, 0));
  }

  TEST_CASE("gradient of a linear function is exact") {
    // f(x) = c . x has an exactly representable gradient; central differences
    // of a linear function only carry rounding.
    const Tensor c = Tensor::matrix(1, 4, {0.5, -2.0, 0.25, 4.0});
    Tape tape;
    const Var x = tape.variable(random_tensor({1, 4}, 42));
    tape.backward(tape.sum(tape.mul(x, tape.constant(c))));
    CHECK(tape.grad(x) == c);
    const auto r = finite_difference_check(
        [&](Tape& t, Var v) { return t.sum(t.mul(v, t.constant(c))); }, random_tensor({1, 4}, 43), 1e-3,
        std::vector<std::size_t>{0, 1, 2, 3});
    CHECK(r.max_relative_error < 1e-10);
  }

  TEST_CASE("gradient checker rejects bad step and non-finite probes") {
    const std::vector<double> point{1.0};
    const std::vector<double> analytic{1.0};
    const std::vector<std::size_t> coords{0};
    CHECK_THROWS_AS(finite_difference_check([](std::span<const double> p) { return p[0]; }, point, analytic, 0.0,
                                            coords),
                    InvalidParameter);
    CHECK_THROWS_AS(finite_difference_check([](std::span<const double> p) { return std::log(p[0] - 1.0); }, point,
                                            analytic, 1e-3, coords),
                    OracleFailure);
  }

  TEST_CASE("backward clears the previous sweep") {
    Tape tape;
    const Var a = tape.variable(Tensor::scalar(2.0));
    const Var y = tape.mul(a, a);
    tape.backward(y);
    tape.backward(y);
    CHECK(tape.grad(a).item() == 4.0);
  }

  TEST_CASE("rng streams are reproducible") {
    Rng a(5), b(5);
    for (int i = 0; i < 10; ++i) CHECK(a.next() == b.next());
    CHECK(derive_seed(1, 2) != derive_seed(1, 3));
    CHECK(derive_seed(1, 2) == derive_seed(1, 2));
    Rng c(9);
    for (int i = 0; i < 1000; ++i) {
      const double u = c.uniform();
      CHECK((u >= 0.0 && u < 1.0));
      CHECK(c.below(7) < 7);
    }
  }

  TEST_CASE("parallel_for fills every slot and rethrows the lowest failure") {
    for (std::size_t threads : {1, 2, 5}) {
      std::vector<std::size_t> out(37, 0);
      parallel_for(out.size(), threads, [&](std::size_t i, std::size_t) { out[i] = i * i; });
      for (std::size_t i = 0; i < out.size(); ++i) CHECK(out[i] == i * i);
      try {
        parallel_for(20, threads, [](std::size_t i, std::size_t) {
          if (i == 7 || i == 13) throw std::runtime_error(std::to_string(i));
        });
        FAIL("expected an exception");
      } catch (const std::runtime_error& e) {
        CHECK(std::string(e.what()) == "7");
      }
    }
  }

  TEST_CASE("thread count resolution") {
    unsetenv("NEURONPATH_THREADS");
    CHECK(resolve_threads(std::nullopt) == 1);
    CHECK(resolve_threads(3) == 3);
    CHECK_THROWS_AS(resolve_threads(0), InvalidParameter);
    setenv("NEURONPATH_THREADS", "4", 1);
    CHECK(resolve_threads(std::nullopt) == 4);
    CHECK(resolve_threads(2) == 2);
    setenv("NEURONPATH_THREADS", "four", 1);
    CHECK_THROWS_AS(resolve_threads(std::nullopt), InvalidParameter);
    unsetenv("NEURONPATH_THREADS");
  }
}
