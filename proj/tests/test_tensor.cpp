#include <catch2/catch_amalgamated.hpp>
#include <cmath>

#include "davi/tensor.hpp"
#include "test_util.hpp"

using namespace davi;
using davi::test::grad_check;
using davi::test::random_tensor;
using davi::test::random_weights;
using davi::test::weighted_sum;

namespace {
const bool finite_checks_on = [] {
  set_finite_checks(true);
  return true;
}();
}  // namespace

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

TEST_CASE("matmul identity") {
  Tensor a = Tensor::from_vector({2, 2}, {1, 2, 3, 4});
  Tensor eye = Tensor::from_vector({2, 2}, {1, 0, 0, 1});
  Tensor out = matmul(nullptr, a, eye);
  REQUIRE(out.values() == std::vector<real>{1, 2, 3, 4});
}

TEST_CASE("matmul 2x2 against direct arithmetic") {
  Tensor a = Tensor::from_vector({2, 2}, {1, 2, 3, 4});
  Tensor b = Tensor::from_vector({2, 2}, {5, 6, 7, 8});
  Tensor out = matmul(nullptr, a, b);
  REQUIRE(out.values() == std::vector<real>{19, 22, 43, 50});
}

TEST_CASE("matmul shape mismatch names both shapes") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({4, 2});
  REQUIRE_THROWS_WITH(matmul(nullptr, a, b),
                      Catch::Matchers::ContainsSubstring("[2x3]") &&
                          Catch::Matchers::ContainsSubstring("[4x2]"));
}

TEST_CASE("matmul gradient matches finite differences") {
  Rng rng(11);
  for (int trial = 0; trial < 5; ++trial) {
    const int m = rng.uniform_int(1, 4), k = rng.uniform_int(1, 4), n = rng.uniform_int(1, 4);
    Tensor a = random_tensor({m, k}, rng);
    Tensor b = random_tensor({k, n}, rng);
    auto w = random_weights(static_cast<std::int64_t>(m) * n, rng);
    auto res = grad_check({a, b}, [&](Tape* t) { return weighted_sum(t, matmul(t, a, b), w); });
    INFO(res.detail);
    REQUIRE(res.ok);
  }
}

// ---------------------------------------------------------------------------
// softmax
// ---------------------------------------------------------------------------

TEST_CASE("softmax symmetry and stability") {
  Tensor two = softmax(nullptr, Tensor::from_vector({2}, {0, 0}), 0);
  REQUIRE(two.data()[0] == Catch::Approx(0.5).margin(1e-15));
  REQUIRE(two.data()[1] == Catch::Approx(0.5).margin(1e-15));

  Tensor big = softmax(nullptr, Tensor::from_vector({3}, {1000, 1000, 1000}), 0);
  for (int i = 0; i < 3; ++i)
    REQUIRE(big.data()[i] == Catch::Approx(1.0 / 3.0).margin(1e-12));
}

TEST_CASE("softmax against extended-precision oracle") {
  Tensor out = softmax(nullptr, Tensor::from_vector({3}, {1, 2, 3}), 0);
  long double e1 = std::exp(1.0L), e2 = std::exp(2.0L), e3 = std::exp(3.0L);
  long double z = e1 + e2 + e3;
  REQUIRE(out.data()[0] == Catch::Approx(static_cast<double>(e1 / z)).epsilon(1e-14));
  REQUIRE(out.data()[1] == Catch::Approx(static_cast<double>(e2 / z)).epsilon(1e-14));
  REQUIRE(out.data()[2] == Catch::Approx(static_cast<double>(e3 / z)).epsilon(1e-14));
}

TEST_CASE("softmax slices sum to one on random shapes and axes") {
  Rng rng(42);
  for (int trial = 0; trial < 20; ++trial) {
    Shape shape;
    const int nd = rng.uniform_int(1, 3);
    for (int i = 0; i < nd; ++i) shape.push_back(rng.uniform_int(1, 5));
    const int axis = rng.uniform_int(0, nd - 1);
    Tensor x = random_tensor(shape, rng, 3.0, false);
    Tensor p = softmax(nullptr, x, axis);
    for (real v : p.values()) {
      REQUIRE(v >= 0.0);
      REQUIRE(v <= 1.0);
    }
    auto sp = davi::detail::split_axis(shape, axis);
    for (std::int64_t o = 0; o < sp.outer; ++o)
      for (std::int64_t i = 0; i < sp.inner; ++i) {
        real s = 0;
        for (std::int64_t a = 0; a < sp.len; ++a)
          s += p.data()[o * sp.len * sp.inner + a * sp.inner + i];
        REQUIRE(std::abs(s - 1.0) < 1e-6);
      }
  }
}

TEST_CASE("softmax gradient matches finite differences") {
  Rng rng(7);
  for (int trial = 0; trial < 5; ++trial) {
    const int n = rng.uniform_int(2, 6), m = rng.uniform_int(1, 4);
    Tensor x = random_tensor({m, n}, rng, 2.0);
    auto w = random_weights(static_cast<std::int64_t>(m) * n, rng);
    auto res = grad_check({x}, [&](Tape* t) { return weighted_sum(t, softmax(t, x, 1), w); });
    INFO(res.detail);
    REQUIRE(res.ok);
  }
}

// ---------------------------------------------------------------------------
// layer_norm
// ---------------------------------------------------------------------------

TEST_CASE("layer_norm constant slice resolves to zero via eps") {
  Tensor x = Tensor::from_vector({3}, {4.2, 4.2, 4.2});
  Tensor gain = Tensor::full({3}, 1.0);
  Tensor bias = Tensor::zeros({3});
  Tensor out = layer_norm(nullptr, x, gain, bias);
  for (real v : out.values()) REQUIRE(v == 0.0);
}

TEST_CASE("layer_norm zero gain leaves only bias") {
  Rng rng(3);
  Tensor x = random_tensor({2, 4}, rng, 1.0, false);
  Tensor gain = Tensor::zeros({4});
  Tensor bias = Tensor::from_vector({4}, {0.5, -1, 2, 3});
  Tensor out = layer_norm(nullptr, x, gain, bias);
  for (int r = 0; r < 2; ++r)
    for (int j = 0; j < 4; ++j) REQUIRE(out.data()[r * 4 + j] == bias.data()[j]);
}

TEST_CASE("layer_norm matches two-pass mean/variance oracle") {
  Rng rng(5);
  Tensor x = random_tensor({8}, rng, 2.0, false);
  Tensor gain = random_tensor({8}, rng, 1.0, false);
  Tensor bias = random_tensor({8}, rng, 1.0, false);
  Tensor out = layer_norm(nullptr, x, gain, bias, 1e-5);
  double mean = 0;
  for (int j = 0; j < 8; ++j) mean += x.data()[j];
  mean /= 8;
  double var = 0;
  for (int j = 0; j < 8; ++j) var += (x.data()[j] - mean) * (x.data()[j] - mean);
  var /= 8;
  for (int j = 0; j < 8; ++j) {
    double expect = (x.data()[j] - mean) / std::sqrt(var + 1e-5) * gain.data()[j] + bias.data()[j];
    REQUIRE(out.data()[j] == Catch::Approx(expect).margin(1e-12));
  }
}

TEST_CASE("layer_norm normalizes each slice before the affine map") {
  Rng rng(17);
  Tensor x = random_tensor({4, 6}, rng, 3.0, false);
  Tensor gain = Tensor::full({6}, 1.0);
  Tensor bias = Tensor::zeros({6});
  Tensor out = layer_norm(nullptr, x, gain, bias);
  for (int r = 0; r < 4; ++r) {
    double mean = 0, var = 0;
    for (int j = 0; j < 6; ++j) mean += out.data()[r * 6 + j];
    mean /= 6;
    for (int j = 0; j < 6; ++j) var += (out.data()[r * 6 + j] - mean) * (out.data()[r * 6 + j] - mean);
    var /= 6;
    REQUIRE(std::abs(mean) < 1e-5);
    REQUIRE(std::abs(var - 1.0) < 1e-4);
  }
}

TEST_CASE("layer_norm gradient matches finite differences") {
  Rng rng(23);
  for (int trial = 0; trial < 5; ++trial) {
    const int rows = rng.uniform_int(1, 3), d = rng.uniform_int(2, 6);
    Tensor x = random_tensor({rows, d}, rng);
    Tensor gain = random_tensor({d}, rng, 0.5);
    Tensor bias = random_tensor({d}, rng, 0.5);
    auto w = random_weights(static_cast<std::int64_t>(rows) * d, rng);
    auto res = grad_check({x, gain, bias}, [&](Tape* t) {
      return weighted_sum(t, layer_norm(t, x, gain, bias), w);
    });
    INFO(res.detail);
    REQUIRE(res.ok);
  }
}

// ---------------------------------------------------------------------------
// gelu / sigmoid
// ---------------------------------------------------------------------------

TEST_CASE("gelu fixed points and asymptote") {
  Tensor x = Tensor::from_vector({2}, {0.0, 10.0});
  Tensor out = gelu(nullptr, x);
  REQUIRE(out.data()[0] == 0.0);
  REQUIRE(std::abs(out.data()[1] - 10.0) < 1e-4);
}

TEST_CASE("gelu gradient at 0.5 and random points") {
  Tensor x = Tensor::from_vector({1}, {0.5}, true);
  auto res = grad_check({x}, [&](Tape* t) { return sum(t, gelu(t, x)); });
  INFO(res.detail);
  REQUIRE(res.ok);

  Rng rng(31);
  Tensor y = random_tensor({10}, rng, 2.0);
  auto w = random_weights(10, rng);
  res = grad_check({y}, [&](Tape* t) { return weighted_sum(t, gelu(t, y), w); });
  INFO(res.detail);
  REQUIRE(res.ok);
}

TEST_CASE("sigmoid gradient matches finite differences") {
  Rng rng(37);
  Tensor x = random_tensor({12}, rng, 3.0);
  auto w = random_weights(12, rng);
  auto res = grad_check({x}, [&](Tape* t) { return weighted_sum(t, sigmoid(t, x), w); });
  INFO(res.detail);
  REQUIRE(res.ok);
}

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

namespace {

// Independent nested-loop convolution oracle (cross-correlation convention).
std::vector<double> conv_oracle(const std::vector<real>& x, int ci, int h, int w,
                                const std::vector<real>& k, int co, int ks, int stride,
                                int pad) {
  const int oh = (h + 2 * pad - ks) / stride + 1;
  const int ow = (w + 2 * pad - ks) / stride + 1;
  std::vector<double> out(static_cast<std::size_t>(co) * oh * ow, 0.0);
  for (int c = 0; c < co; ++c)
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox) {
        double acc = 0;
        for (int c2 = 0; c2 < ci; ++c2)
          for (int dy = 0; dy < ks; ++dy)
            for (int dx = 0; dx < ks; ++dx) {
              int iy = oy * stride + dy - pad, ix = ox * stride + dx - pad;
              if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
              acc += static_cast<double>(x[static_cast<std::size_t>((c2 * h + iy) * w + ix)]) *
                     static_cast<double>(k[static_cast<std::size_t>(((c * ci + c2) * ks + dy) * ks + dx)]);
            }
        out[static_cast<std::size_t>((c * oh + oy) * ow + ox)] = acc;
      }
  return out;
}

}  // namespace

TEST_CASE("conv2d delta kernel is identity") {
  Rng rng(41);
  Tensor x = random_tensor({1, 4, 4}, rng, 1.0, false);
  Tensor k = Tensor::from_vector({1, 1, 1, 1}, {1.0});
  Tensor out = conv2d(nullptr, x, k, 1, 0);
  REQUIRE(out.values() == x.values());
}

TEST_CASE("conv2d zero kernel gives zero output") {
  Rng rng(43);
  Tensor x = random_tensor({2, 5, 5}, rng, 1.0, false);
  Tensor k = Tensor::zeros({3, 2, 3, 3});
  Tensor out = conv2d(nullptr, x, k, 1, 1);
  for (real v : out.values()) REQUIRE(v == 0.0);
}

TEST_CASE("conv2d matches nested-loop oracle exactly") {
  Rng rng(47);
  Tensor x = random_tensor({1, 5, 5}, rng, 1.0, false);
  Tensor k = random_tensor({2, 1, 3, 3}, rng, 1.0, false);
  for (auto [stride, pad] : std::vector<std::pair<int, int>>{{1, 1}, {2, 1}, {1, 0}}) {
    if ((5 + 2 * pad - 3) % stride != 0) continue;
    Tensor out = conv2d(nullptr, x, k, stride, pad);
    auto expect = conv_oracle(x.values(), 1, 5, 5, k.values(), 2, 3, stride, pad);
    REQUIRE(out.size() == static_cast<std::int64_t>(expect.size()));
    for (std::int64_t i = 0; i < out.size(); ++i)
      REQUIRE(out.data()[i] == Catch::Approx(expect[static_cast<std::size_t>(i)]).margin(0.0));
  }
}

TEST_CASE("conv2d rejects non-integral output size") {
  Tensor x = Tensor::zeros({1, 6, 6});
  Tensor k = Tensor::zeros({1, 1, 3, 3});
  REQUIRE_THROWS_AS(conv2d(nullptr, x, k, 2, 0), config_error);
}

TEST_CASE("conv2d gradient matches finite differences") {
  Rng rng(53);
  for (int trial = 0; trial < 3; ++trial) {
    Tensor x = random_tensor({2, 5, 5}, rng);
    Tensor k = random_tensor({2, 2, 3, 3}, rng, 0.5);
    auto w = random_weights(2 * 5 * 5, rng);
    auto res = grad_check({x, k}, [&](Tape* t) {
      return weighted_sum(t, conv2d(t, x, k, 1, 1), w);
    });
    INFO(res.detail);
    REQUIRE(res.ok);
  }
}

// ---------------------------------------------------------------------------
// upsample_bilinear
// ---------------------------------------------------------------------------

TEST_CASE("upsample keeps constants constant") {
  Tensor x = Tensor::full({2, 3, 3}, 0.7);
  Tensor out = upsample_bilinear(nullptr, x, 7, 9);
  REQUIRE(out.shape() == Shape{2, 7, 9});
  for (real v : out.values()) REQUIRE(v == Catch::Approx(0.7).margin(1e-15));
}

TEST_CASE("upsample to the same size is the identity") {
  Rng rng(59);
  Tensor x = random_tensor({1, 4, 5}, rng, 1.0, false);
  Tensor out = upsample_bilinear(nullptr, x, 4, 5);
  REQUIRE(out.values() == x.values());
}

TEST_CASE("upsample 2x2 to 4x4 against per-pixel oracle") {
  Tensor x = Tensor::from_vector({1, 2, 2}, {1, 2, 3, 4});
  Tensor out = upsample_bilinear(nullptr, x, 4, 4);
  auto sample = [&](int oy, int ox) {
    auto axis = [](int o, int in_n, int out_n) {
      double src = (o + 0.5) * (static_cast<double>(in_n) / out_n) - 0.5;
      src = std::max(src, 0.0);
      int lo = std::min(static_cast<int>(src), in_n - 1);
      int hi = std::min(lo + 1, in_n - 1);
      return std::tuple<int, int, double>{lo, hi, src - lo};
    };
    auto [y0, y1, ty] = axis(oy, 2, 4);
    auto [x0, x1, tx] = axis(ox, 2, 4);
    auto at = [&](int y, int xx) { return static_cast<double>(x.data()[y * 2 + xx]); };
    return (1 - ty) * ((1 - tx) * at(y0, x0) + tx * at(y0, x1)) +
           ty * ((1 - tx) * at(y1, x0) + tx * at(y1, x1));
  };
  for (int oy = 0; oy < 4; ++oy)
    for (int ox = 0; ox < 4; ++ox)
      REQUIRE(out.data()[oy * 4 + ox] == Catch::Approx(sample(oy, ox)).margin(1e-14));
}

TEST_CASE("upsample gradient matches finite differences") {
  Rng rng(61);
  Tensor x = random_tensor({2, 3, 3}, rng);
  auto w = random_weights(2 * 6 * 7, rng);
  auto res = grad_check({x}, [&](Tape* t) {
    return weighted_sum(t, upsample_bilinear(t, x, 6, 7), w);
  });
  INFO(res.detail);
  REQUIRE(res.ok);
}

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

TEST_CASE("cross entropy on uniform logits is log V") {
  for (int v : {3, 7, 22}) {
    Tensor logits = Tensor::full({v}, 1.25);
    Tensor loss = cross_entropy(nullptr, logits, 1);
    REQUIRE(loss.item() == Catch::Approx(std::log(static_cast<double>(v))).epsilon(1e-12));
  }
}

TEST_CASE("cross entropy rejects out-of-vocabulary targets") {
  Tensor logits = Tensor::zeros({5});
  REQUIRE_THROWS_AS(cross_entropy(nullptr, logits, 5), bounds_error);
  REQUIRE_THROWS_AS(cross_entropy(nullptr, logits, -1), bounds_error);
}

TEST_CASE("cross entropy over sequence rejects all-ignored targets") {
  Tensor logits = Tensor::zeros({3, 5});
  REQUIRE_THROWS_AS(cross_entropy_seq(nullptr, logits, {0, 0, 0}, 0), contract_error);
}

TEST_CASE("dice of a perfect binary match is zero") {
  Tensor target = Tensor::from_vector({2, 3}, {1, 0, 1, 0, 0, 1});
  Tensor loss = dice_loss(nullptr, target, target);
  REQUIRE(std::abs(loss.item()) < 1e-15);
}

TEST_CASE("bce against extended-precision oracle") {
  Tensor logits = Tensor::from_vector({2}, {0.3, -1.2});
  Tensor target = Tensor::from_vector({2}, {1, 0});
  Tensor loss = bce_with_logits(nullptr, logits, target);
  long double l1 = std::log(1.0L + std::exp(-0.3L));
  long double l2 = std::log(1.0L + std::exp(-1.2L));
  REQUIRE(loss.item() == Catch::Approx(static_cast<double>((l1 + l2) / 2.0L)).epsilon(1e-14));
}

TEST_CASE("loss gradients match finite differences") {
  Rng rng(67);
  Tensor logits = random_tensor({4, 6}, rng, 2.0);
  auto res = grad_check({logits}, [&](Tape* t) {
    return cross_entropy_seq(t, logits, {1, 3, -1, 5}, -1);
  });
  INFO(res.detail);
  REQUIRE(res.ok);

  Tensor z = random_tensor({3, 3}, rng, 2.0);
  Tensor y = Tensor::from_vector({3, 3}, {1, 0, 1, 0, 1, 0, 0, 0, 1});
  res = grad_check({z}, [&](Tape* t) { return bce_with_logits(t, z, y); });
  INFO(res.detail);
  REQUIRE(res.ok);

  Tensor z2 = random_tensor({3, 3}, rng, 1.0);
  res = grad_check({z2}, [&](Tape* t) { return dice_loss(t, sigmoid(t, z2), y); });
  INFO(res.detail);
  REQUIRE(res.ok);
}

// ---------------------------------------------------------------------------
// backward mechanics
// ---------------------------------------------------------------------------

TEST_CASE("backward of sum gives all-ones gradient") {
  Rng rng(71);
  Tensor x = random_tensor({3, 4}, rng);
  Tape tape;
  tape.backward(sum(&tape, x));
  for (std::int64_t i = 0; i < x.size(); ++i) REQUIRE(x.grad()[i] == 1.0);
}

TEST_CASE("backward of sum of squares gives 2x") {
  Rng rng(73);
  Tensor x = random_tensor({5}, rng);
  Tape tape;
  tape.backward(sum(&tape, mul(&tape, x, x)));
  for (std::int64_t i = 0; i < x.size(); ++i)
    REQUIRE(x.grad()[i] == Catch::Approx(2.0 * x.data()[i]).margin(1e-15));
}

TEST_CASE("backward rejects non-scalar loss") {
  Tensor x = Tensor::zeros({2, 2}, true);
  Tape tape;
  Tensor y = scale(&tape, x, 2.0);
  REQUIRE_THROWS_AS(tape.backward(y), contract_error);
}

TEST_CASE("shared subexpression equals duplicated graph") {
  Rng rng(79);
  Tensor x1 = random_tensor({6}, rng);
  {
    Tape tape;
    Tensor y = mul(&tape, x1, x1);      // shared node consumed twice
    Tensor loss = add(&tape, sum(&tape, y), sum(&tape, gelu(&tape, y)));
    tape.backward(loss);
  }
  Tensor x2 = x1.detached_copy(true);
  {
    Tape tape;
    Tensor y1 = mul(&tape, x2, x2);     // duplicated subgraphs
    Tensor y2 = mul(&tape, x2, x2);
    Tensor loss = add(&tape, sum(&tape, y1), sum(&tape, gelu(&tape, y2)));
    tape.backward(loss);
  }
  for (std::int64_t i = 0; i < x1.size(); ++i)
    REQUIRE(std::abs(x1.grad()[i] - x2.grad()[i]) < 1e-12);
}

TEST_CASE("gradients accumulate across separate backward calls") {
  Tensor x = Tensor::from_vector({3}, {1, 2, 3}, true);
  Tape tape;
  Tensor l1 = sum(&tape, x);
  Tensor l2 = sum(&tape, mul(&tape, x, x));
  Tape t2;  // backward on two losses, gradients add
  tape.backward(l1);
  Tape t3;
  {
    Tape fresh;
    Tensor l = sum(&fresh, mul(&fresh, x, x));
    fresh.backward(l);
  }
  for (std::int64_t i = 0; i < x.size(); ++i)
    REQUIRE(x.grad()[i] == Catch::Approx(1.0 + 2.0 * x.data()[i]).margin(1e-15));
}

// ---------------------------------------------------------------------------
// structural ops
// ---------------------------------------------------------------------------

TEST_CASE("embedding gathers rows and scatters gradients") {
  Tensor table = Tensor::from_vector({3, 2}, {1, 2, 3, 4, 5, 6}, true);
  Tape tape;
  Tensor out = embedding(&tape, table, {2, 0, 2});
  REQUIRE(out.values() == std::vector<real>{5, 6, 1, 2, 5, 6});
  tape.backward(sum(&tape, out));
  REQUIRE(table.grad()[0] == 1.0);  // row 0 used once
  REQUIRE(table.grad()[2] == 0.0);  // row 1 unused
  REQUIRE(table.grad()[4] == 2.0);  // row 2 used twice
  REQUIRE_THROWS_AS(embedding(nullptr, table, {3}), bounds_error);
}

TEST_CASE("slice and concat round-trip with gradients") {
  Rng rng(83);
  Tensor x = random_tensor({3, 6}, rng);
  Tape tape;
  Tensor left = slice_cols(&tape, x, 0, 2);
  Tensor mid = slice_cols(&tape, x, 2, 3);
  Tensor right = slice_cols(&tape, x, 5, 1);
  Tensor back = concat_cols(&tape, {left, mid, right});
  REQUIRE(back.values() == x.values());
  auto w = random_weights(18, rng);
  auto res = grad_check({x}, [&](Tape* t) {
    Tensor l = slice_cols(t, x, 0, 2);
    Tensor m = slice_cols(t, x, 2, 3);
    Tensor r = slice_cols(t, x, 5, 1);
    return weighted_sum(t, concat_cols(t, {l, m, r}), w);
  });
  INFO(res.detail);
  REQUIRE(res.ok);
}

TEST_CASE("im2patches extracts channel-major patch vectors") {
  // 1 channel, 4x4 image, patch 2: patch (0,0) is rows 0-1, cols 0-1.
  std::vector<real> img(16);
  for (int i = 0; i < 16; ++i) img[static_cast<std::size_t>(i)] = i;
  Tensor x = Tensor::from_vector({1, 4, 4}, img);
  Tensor out = im2patches(nullptr, x, 2);
  REQUIRE(out.shape() == Shape{4, 4});
  REQUIRE(out.values() == std::vector<real>{0, 1, 4, 5, 2, 3, 6, 7, 8, 9, 12, 13, 10, 11, 14, 15});
}

TEST_CASE("transpose and reshape gradients") {
  Rng rng(89);
  Tensor x = random_tensor({3, 4}, rng);
  auto w = random_weights(12, rng);
  auto res = grad_check({x}, [&](Tape* t) {
    return weighted_sum(t, reshape(t, transpose(t, x), {2, 6}), w);
  });
  INFO(res.detail);
  REQUIRE(res.ok);
}

TEST_CASE("finiteness guard trips on overflow") {
  Tensor x = Tensor::full({2}, 1e308);
  REQUIRE_THROWS_AS(mul(nullptr, x, x), error);
}
