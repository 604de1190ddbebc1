#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "gradreg/gradcheck.hpp"
#include "gradreg/ops.hpp"
#include "test_util.hpp"

#include <cmath>

using namespace gradreg;
using testutil::random_tensor;

namespace {

// FD check of a scalar functional against tape gradients for every leaf.
template <typename S>
void check_grads(std::vector<Tensor<S>> leaves,
                 const std::function<Tensor<S>(const std::vector<Tensor<S>>&)>& f, S step,
                 double rtol, double atol) {
  Tape<S> tape;
  std::vector<Tensor<S>> tracked = leaves;
  for (Tensor<S>& t : tracked) tape.watch(t);
  Tensor<S> root = f(tracked);
  tape.backward(root);
  for (size_t li = 0; li < leaves.size(); ++li) {
    ArrayX<S> analytic = tape.grad(tracked[li]);
    auto eval = [&]() { return f(leaves).value(); };
    ArrayX<S> fd = fd_gradient<S>(eval, leaves[li], step);
    for (long i = 0; i < fd.size(); ++i) {
      double a = analytic(i), b = fd(i);
      CAPTURE(li);
      CAPTURE(i);
      REQUIRE(std::abs(a - b) <= atol + rtol * std::max(std::abs(a), std::abs(b)));
    }
  }
}

}  // namespace

TEST_CASE("conv3d identity kernel reproduces the input") {
  std::mt19937_64 rng(7);
  Tensor<float> in = random_tensor<float>({2, 4, 4, 4}, rng);
  Tensor<float> kernel({2, 2, 3, 3, 3});
  // Dirac delta per channel: center weight 1 on the matching input channel
  for (int co = 0; co < 2; ++co) {
    long base = ((static_cast<long>(co) * 2 + co) * 3 + 1) * 9 + 1 * 3 + 1;
    kernel.data()[base] = 1.f;
  }
  Tensor<float> bias({2});
  Tensor<float> out = conv3d(in, kernel, bias, 1, 1);
  REQUIRE(out.shape() == in.shape());
  for (long i = 0; i < in.size(); ++i) REQUIRE(out[i] == doctest::Approx(in[i]).epsilon(1e-6));
}

TEST_CASE("conv3d all-ones kernel sums the 27-neighbourhood") {
  Tensor<float> in = Tensor<float>::full({1, 3, 3, 3}, 1.f);
  Tensor<float> kernel = Tensor<float>::full({1, 1, 3, 3, 3}, 1.f);
  Tensor<float> bias({1});
  Tensor<float> out = conv3d(in, kernel, bias, 1, 1);
  // center voxel sees the full kernel support
  REQUIRE(out[(1 * 3 + 1) * 3 + 1] == doctest::Approx(27.f));
}

TEST_CASE("conv3d output extents follow the stride arithmetic") {
  std::mt19937_64 rng(3);
  Tensor<float> in = random_tensor<float>({1, 6, 6, 6}, rng);
  Tensor<float> k2 = random_tensor<float>({4, 1, 2, 2, 2}, rng);
  Tensor<float> b(Shape{4});
  Tensor<float> out = conv3d(in, k2, b, 2, 0);
  REQUIRE(out.shape() == Shape{4, 3, 3, 3});
  // stride 1, padding (k-1)/2 preserves spatial shape
  Tensor<float> k3 = random_tensor<float>({2, 1, 3, 3, 3}, rng);
  Tensor<float> b2(Shape{2});
  REQUIRE(conv3d(in, k3, b2, 1, 1).shape() == Shape{2, 6, 6, 6});
}

TEST_CASE("conv3d rejects channel mismatch with a dimension report") {
  Tensor<float> in({2, 4, 4, 4});
  Tensor<float> kernel({3, 5, 3, 3, 3});
  Tensor<float> bias({3});
  REQUIRE_THROWS_WITH_AS(conv3d(in, kernel, bias, 1, 1),
                         doctest::Contains("channel mismatch"), std::invalid_argument);
}

TEST_CASE("conv3d gradients match finite differences") {
  std::mt19937_64 rng(11);
  for (int seed = 0; seed < 3; ++seed) {
    std::vector<Tensor<double>> leaves{random_tensor<double>({2, 4, 4, 4}, rng),
                                       random_tensor<double>({2, 2, 3, 3, 3}, rng),
                                       random_tensor<double>({2}, rng)};
    check_grads<double>(
        leaves, [](const std::vector<Tensor<double>>& t) {
          return sum(conv3d(t[0], t[1], t[2], 1, 1));
        },
        1e-5, 1e-6, 1e-9);
    check_grads<double>(
        leaves, [](const std::vector<Tensor<double>>& t) {
          return sum(conv3d(t[0], t[1], t[2], 2, 1));
        },
        1e-5, 1e-6, 1e-9);
  }
}

TEST_CASE("leaky_relu forward values and gradient") {
  Tensor<float> x({2}, (ArrayX<float>(2) << 2.5f, -1.f).finished());
  Tensor<float> y = leaky_relu(x, 0.2f);
  REQUIRE(y[0] == doctest::Approx(2.5f));
  REQUIRE(y[1] == doctest::Approx(-0.2f));

  std::mt19937_64 rng(5);
  Tensor<double> big = random_tensor<double>({2, 3, 3, 3}, rng, 0.1, 1.0);
  for (long i = 0; i < big.size(); ++i)
    if (rng() & 1) big.data()[i] = -big.data()[i];
  check_grads<double>({big}, [](const std::vector<Tensor<double>>& t) {
    return sum(leaky_relu(t[0], 0.2));
  }, 1e-5, 1e-6, 1e-9);
}

TEST_CASE("leaky_relu slope domain") {
  Tensor<float> x({1});
  REQUIRE_THROWS_AS(leaky_relu(x, 1.5f), std::invalid_argument);
}

TEST_CASE("instance_norm standardises per channel") {
  Tensor<float> c = Tensor<float>::full({1, 2, 2, 2}, 7.f);
  Tensor<float> y = instance_norm(c, 1e-5f);
  for (long i = 0; i < y.size(); ++i) REQUIRE(std::abs(y[i]) < 1e-2f);

  std::mt19937_64 rng(9);
  Tensor<float> x = random_tensor<float>({2, 3, 3, 3}, rng);
  Tensor<float> n = instance_norm(x, 1e-5f);
  long per = n.size() / 2;
  for (int ch = 0; ch < 2; ++ch) {
    auto seg = n.array().segment(ch * per, per);
    REQUIRE(std::abs(seg.mean()) < 1e-5f);
    float var = (seg - seg.mean()).square().mean();
    REQUIRE(std::abs(var - 1.f) < 1e-3f);
  }

  Tensor<double> xd = random_tensor<double>({2, 3, 3, 3}, rng);
  Tensor<double> proj = random_tensor<double>({2, 3, 3, 3}, rng, 0.5, 1.5);
  check_grads<double>({xd}, [proj](const std::vector<Tensor<double>>& t) {
    return mean(mul(instance_norm(t[0], 1e-5), proj));
  }, 1e-5, 1e-6, 1e-9);
}

TEST_CASE("cumsum_exclusive forward and backward") {
  Tensor<float> x({4}, (ArrayX<float>(4) << 1.f, 1.f, 1.f, 1.f).finished());
  Tensor<float> y = cumsum_exclusive(x, 0);
  REQUIRE(y[0] == 0.f);
  REQUIRE(y[1] == 1.f);
  REQUIRE(y[2] == 2.f);
  REQUIRE(y[3] == 3.f);

  Tensor<float> z({3, 2, 2, 2});
  Tensor<float> zy = cumsum_exclusive(z, 2);
  for (long i = 0; i < zy.size(); ++i) REQUIRE(zy[i] == 0.f);

  // d sum(y) / d x[i] = len - 1 - i
  Tape<float> tape;
  Tensor<float> xi({5}, (ArrayX<float>(5) << 2.f, 3.f, 5.f, 7.f, 11.f).finished());
  tape.watch(xi);
  tape.backward(sum(cumsum_exclusive(xi, 0)));
  ArrayX<float> g = tape.grad(xi);
  for (long i = 0; i < 5; ++i) REQUIRE(g(i) == doctest::Approx(4.f - i));

  std::mt19937_64 rng(13);
  for (int axis = 0; axis < 4; ++axis) {
    Tensor<double> r = random_tensor<double>({2, 3, 4, 3}, rng);
    check_grads<double>({r}, [axis](const std::vector<Tensor<double>>& t) {
      return mean(square(cumsum_exclusive(t[0], axis)));
    }, 1e-5, 1e-6, 1e-9);
  }
}

TEST_CASE("trilinear_sample identity grid is exact") {
  std::mt19937_64 rng(17);
  Tensor<float> vol = random_tensor<float>({2, 4, 4, 4}, rng);
  Tensor<float> grid({3, 4, 4, 4});
  long n = 64;
  long v = 0;
  for (int z = 0; z < 4; ++z)
    for (int y = 0; y < 4; ++y)
      for (int x = 0; x < 4; ++x, ++v) {
        grid.data()[v] = z;
        grid.data()[n + v] = y;
        grid.data()[2 * n + v] = x;
      }
  Tensor<float> out = trilinear_sample(vol, grid);
  for (long i = 0; i < out.size(); ++i) REQUIRE(std::abs(out[i] - vol[i]) <= 1e-6f);
}

TEST_CASE("trilinear_sample midpoint interpolates linearly") {
  Tensor<float> vol({1, 1, 1, 2}, (ArrayX<float>(2) << 2.f, 6.f).finished());
  Tensor<float> coords({3, 1, 1, 1}, (ArrayX<float>(3) << 0.f, 0.f, 0.5f).finished());
  REQUIRE(trilinear_sample(vol, coords)[0] == doctest::Approx(4.f));
}

TEST_CASE("trilinear_sample out-of-bounds coordinates clamp to the border") {
  Tensor<float> vol({1, 1, 1, 3}, (ArrayX<float>(3) << 1.f, 2.f, 3.f).finished());
  Tensor<float> coords({3, 1, 1, 2},
                       (ArrayX<float>(6) << 0.f, 0.f, 0.f, 0.f, -4.f, 9.f).finished());
  Tensor<float> out = trilinear_sample(vol, coords);
  REQUIRE(out[0] == doctest::Approx(1.f));
  REQUIRE(out[1] == doctest::Approx(3.f));
}

TEST_CASE("trilinear_sample gradients match finite differences") {
  std::mt19937_64 rng(19);
  Tensor<double> vol = random_tensor<double>({1, 4, 4, 4}, rng);
  // coords off the integer lattice
  Tensor<double> coords({3, 3, 3, 3});
  std::uniform_real_distribution<double> frac(0.15, 0.85);
  std::uniform_int_distribution<int> cell(0, 2);
  for (long i = 0; i < coords.size(); ++i) coords.data()[i] = cell(rng) + frac(rng);
  check_grads<double>({vol, coords}, [](const std::vector<Tensor<double>>& t) {
    return mean(square(trilinear_sample(t[0], t[1])));
  }, 1e-5, 1e-6, 1e-9);
}

TEST_CASE("elementwise basics") {
  std::mt19937_64 rng(23);
  Tensor<float> x = random_tensor<float>({2, 3, 3, 3}, rng);
  Tensor<float> zero = sub(x, x);
  for (long i = 0; i < zero.size(); ++i) REQUIRE(zero[i] == 0.f);
  REQUIRE(sigmoid(Tensor<float>::scalar(0.f))[0] == doctest::Approx(0.5f));

  REQUIRE_THROWS_AS(add(Tensor<float>({2, 2}), Tensor<float>({3, 2})), std::invalid_argument);

  Tensor<double> xd = random_tensor<double>({2, 2, 2, 2}, rng, 0.2, 1.0);
  check_grads<double>({xd}, [](const std::vector<Tensor<double>>& t) {
    return mean(sigmoid(mul(t[0], t[0])));
  }, 1e-5, 1e-6, 1e-9);
}

TEST_CASE("upsample_nearest2x repeats voxels and pools gradients") {
  std::mt19937_64 rng(29);
  Tensor<float> x = random_tensor<float>({1, 2, 2, 2}, rng);
  Tensor<float> y = upsample_nearest2x(x);
  REQUIRE(y.shape() == Shape{1, 4, 4, 4});
  REQUIRE(y[0] == x[0]);
  REQUIRE(y[1] == x[0]);

  Tensor<double> xd = random_tensor<double>({2, 2, 2, 2}, rng);
  check_grads<double>({xd}, [](const std::vector<Tensor<double>>& t) {
    return mean(square(upsample_nearest2x(t[0])));
  }, 1e-5, 1e-6, 1e-9);
}

TEST_CASE("backward: simple chains") {
  Tape<float> tape;
  Tensor<float> x = Tensor<float>::scalar(3.f);
  tape.watch(x);
  tape.backward(mul(x, x));
  REQUIRE(tape.grad(x)(0) == doctest::Approx(6.f));

  Tape<float> tape2;
  Tensor<float> pos = Tensor<float>::full({2, 2, 2, 2}, 0.7f);
  tape2.watch(pos);
  tape2.backward(sum(leaky_relu(pos, 0.2f)));
  ArrayX<float> g = tape2.grad(pos);
  for (long i = 0; i < g.size(); ++i) REQUIRE(g(i) == doctest::Approx(1.f));
}

TEST_CASE("backward rejects non-scalar roots and untracked tensors") {
  Tape<float> tape;
  Tensor<float> x({2, 2});
  tape.watch(x);
  Tensor<float> y = add(x, x);
  REQUIRE_THROWS_AS(tape.backward(y), std::invalid_argument);
  Tensor<float> loose({1});
  REQUIRE_THROWS_AS(backward(loose), std::invalid_argument);
}

TEST_CASE("ops reject operands from different tapes") {
  Tape<float> t1, t2;
  Tensor<float> a({2}), b({2});
  t1.watch(a);
  t2.watch(b);
  REQUIRE_THROWS_AS(add(a, b), std::invalid_argument);
}

TEST_CASE("two backward passes over one tape agree exactly") {
  std::mt19937_64 rng(31);
  Tape<float> tape;
  Tensor<float> x = random_tensor<float>({2, 3, 3, 3}, rng);
  tape.watch(x);
  Tensor<float> root = mean(square(sigmoid(mul(x, x))));
  tape.backward(root);
  ArrayX<float> g1 = tape.grad(x);
  tape.backward(root);
  ArrayX<float> g2 = tape.grad(x);
  REQUIRE((g1 == g2).all());
}

TEST_CASE("random op chains match finite differences") {
  std::mt19937_64 rng(37);
  for (int seed = 0; seed < 5; ++seed) {
    Tensor<double> a = random_tensor<double>({2, 2, 2}, rng, 0.2, 1.0);
    Tensor<double> b = random_tensor<double>({2, 2, 2}, rng, 0.3, 1.0);
    std::vector<int> picks;
    for (int i = 0; i < 5; ++i) picks.push_back(static_cast<int>(rng() % 5));
    check_grads<double>({a, b}, [picks](const std::vector<Tensor<double>>& t) {
      Tensor<double> x = t[0];
      for (int op : picks) {
        switch (op) {
          case 0: x = add(x, t[1]); break;
          case 1: x = mul(x, t[1]); break;
          case 2: x = sigmoid(x); break;
          case 3: x = scalar_mul(x, 0.8); break;
          default: x = square(x); break;
        }
      }
      return mean(x);
    }, 1e-5, 1e-6, 1e-9);
  }
}

TEST_CASE("scalar broadcast against full tensors") {
  std::mt19937_64 rng(41);
  Tensor<float> x = random_tensor<float>({2, 2, 2}, rng);
  Tensor<float> m = mean(x);
  Tensor<float> centered = sub(x, m);
  REQUIRE(std::abs(centered.array().mean()) < 1e-6f);

  Tensor<double> xd = random_tensor<double>({2, 2, 2}, rng, 0.5, 1.5);
  check_grads<double>({xd}, [](const std::vector<Tensor<double>>& t) {
    return mean(square(sub(t[0], mean(t[0]))));
  }, 1e-5, 1e-6, 1e-9);
  check_grads<double>({xd}, [](const std::vector<Tensor<double>>& t) {
    return divide(sum(t[0]), scalar_add(sum(square(t[0])), 1.0));
  }, 1e-5, 1e-6, 1e-9);
}

TEST_CASE("tensor invariants") {
  REQUIRE_THROWS_AS(Tensor<float>({2, 2, 2, 2, 2, 2}), std::invalid_argument);
  REQUIRE_THROWS_AS(Tensor<float>({0, 2}), std::invalid_argument);
  REQUIRE_THROWS_AS(Tensor<float>({2}, ArrayX<float>(3)), std::invalid_argument);
  Tensor<float> t({2, 3});
  REQUIRE(t.size() == 6);
  REQUIRE_THROWS_AS(t.value(), std::invalid_argument);
}
