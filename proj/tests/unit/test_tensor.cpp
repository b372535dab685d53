#include <doctest.h>

#include <cmath>
#include <cstring>
#include <limits>
#include <numeric>

#include "lumen/ops.hpp"
#include "lumen/optim.hpp"
#include "support.hpp"

using namespace lumen;
using lumen::testing::random_tensor;

namespace {

std::vector<float> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

// Direct six-deep loop, written independently of the library kernels.
std::vector<double> naive_conv(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride,
                               std::size_t pad) {
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t o = w.dim(0), k = w.dim(2);
  const std::size_t oh = (h + 2 * pad - k) / stride + 1, ow = (wd + 2 * pad - k) / stride + 1;
  std::vector<double> out(n * o * oh * ow);
  const auto xs = x.data();
  const auto ws = w.data();
  for (std::size_t in = 0; in < n; ++in)
    for (std::size_t io = 0; io < o; ++io)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t xo = 0; xo < ow; ++xo) {
          double acc = b.defined() ? b.data()[io] : 0.0;
          for (std::size_t ic = 0; ic < c; ++ic)
            for (std::size_t ky = 0; ky < k; ++ky)
              for (std::size_t kx = 0; kx < k; ++kx) {
                const auto iy = static_cast<long>(y * stride + ky) - static_cast<long>(pad);
                const auto ix = static_cast<long>(xo * stride + kx) - static_cast<long>(pad);
                if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(wd)) continue;
                acc += static_cast<double>(xs[((in * c + ic) * h + iy) * wd + ix]) *
                       ws[((io * c + ic) * k + ky) * k + kx];
              }
          out[((in * o + io) * oh + y) * ow + xo] = acc;
        }
  return out;
}

}  // namespace

TEST_SUITE("tensor") {

TEST_CASE("tensor construction checks shape against data") {
  CHECK(Tensor({2, 3}).numel() == 6);
  CHECK_THROWS_AS(Tensor({2, 3}, std::vector<float>(5)), DimensionError);
  CHECK_THROWS_AS(Tensor({2, 0}), DimensionError);
  const Tensor t({2, 2}, {1, 2, 3, 4});
  Tensor alias = t;
  alias.data()[0] = 9;
  CHECK(t.data()[0] == 9);
  CHECK(t.detach().data()[0] == 9);
}

TEST_CASE("conv2d of ones sums the window") {
  const Tensor x({1, 1, 3, 3}, 1.0f), w({1, 1, 3, 3}, 1.0f);
  const auto y = conv2d(x, w, Tensor(), 1, 0);
  REQUIRE(y.shape() == Shape{1, 1, 1, 1});
  CHECK(y.item() == 9.0f);
}

TEST_CASE("conv2d with a unit 1x1 kernel is the identity") {
  std::mt19937_64 rng(3);
  const auto x = random_tensor({2, 1, 5, 4}, rng);
  const auto y = conv2d(x, Tensor({1, 1, 1, 1}, 1.0f), Tensor(), 1, 0);
  CHECK(values(y) == values(x));
}

TEST_CASE("conv2d matches the naive loop on random inputs") {
  std::mt19937_64 rng(11);
  const auto x = random_tensor({2, 4, 8, 8}, rng);
  const auto w = random_tensor({6, 4, 3, 3}, rng);
  const auto b = random_tensor({6}, rng);
  const auto y = conv2d(x, w, b, 2, 1);
  REQUIRE(y.shape() == Shape{2, 6, 4, 4});
  const auto ref = naive_conv(x, w, b, 2, 1);
  for (std::size_t i = 0; i < ref.size(); ++i) REQUIRE(std::abs(y.data()[i] - ref[i]) < 1e-5);

  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t k = trial % 2 ? 3 : 1, s = 1 + trial % 3 / 2, p = trial % 4 == 0 ? 0 : k / 2;
    const auto xi = random_tensor({1 + trial % 2ul, 1 + trial % 3ul, 5 + trial % 4ul, 6}, rng);
    const auto wi = random_tensor({2 + trial % 3ul, xi.dim(1), k, k}, rng);
    const auto yi = conv2d(xi, wi, Tensor(), s, p);
    const auto ri = naive_conv(xi, wi, Tensor(), s, p);
    REQUIRE(yi.numel() == ri.size());
    for (std::size_t i = 0; i < ri.size(); ++i) REQUIRE(std::abs(yi.data()[i] - ri[i]) < 1e-5);
  }
}

TEST_CASE("conv2d rejects mismatched channels and names the axis") {
  const Tensor x({1, 3, 4, 4}), w({2, 2, 3, 3});
  try {
    conv2d(x, w, Tensor(), 1, 1);
    FAIL("expected a dimension error");
  } catch (const DimensionError& e) {
    CHECK(e.axis() == "channels");
  }
  CHECK_THROWS_AS(conv2d(x, Tensor({2, 3, 3, 3}), Tensor(), 0, 1), DimensionError);
}

TEST_CASE("batchnorm train mode centers every channel") {
  std::mt19937_64 rng(5);
  const auto x = random_tensor({4, 3, 5, 5}, rng, -2.0f, 7.0f);
  RunningStats stats{Tensor({3}, 0.0f), Tensor({3}, 1.0f)};
  const auto y = batchnorm2d(x, Tensor({3}, 1.0f), Tensor({3}, 0.0f), stats, Mode::Train, 0.03f, 1e-3f);
  for (std::size_t c = 0; c < 3; ++c) {
    double s = 0.0;
    for (std::size_t n = 0; n < 4; ++n)
      for (std::size_t i = 0; i < 25; ++i) s += y.data()[(n * 3 + c) * 25 + i];
    CHECK(std::abs(s / 100.0) < 1e-5);
  }
  // Running mean moved 3% of the way toward the batch mean.
  CHECK(stats.mean.data()[0] != 0.0f);
}

TEST_CASE("batchnorm eval mode plugs into the closed form") {
  Tensor x({2, 2, 3, 3});
  for (std::size_t i = 0; i < x.numel(); ++i) x.data()[i] = (i / 9) % 2 ? 5.0f : -1.5f;
  RunningStats stats{Tensor({2}, std::vector<float>{-1.5f, 5.0f}), Tensor({2}, 1.0f)};
  const auto y = batchnorm2d(x, Tensor({2}, 2.0f), Tensor({2}, 3.0f), stats, Mode::Eval, 0.03f, 1e-3f);
  for (float v : y.data()) CHECK(v == doctest::Approx(3.0f).epsilon(1e-6));
  CHECK(stats.mean.data()[0] == -1.5f);
}

TEST_CASE("batchnorm on a single element stays finite and rejects eps <= 0") {
  RunningStats stats{Tensor({1}, 0.0f), Tensor({1}, 1.0f)};
  const auto y = batchnorm2d(Tensor({1, 1, 1, 1}, 4.0f), Tensor({1}, 1.0f), Tensor({1}, 0.0f), stats,
                             Mode::Train, 0.03f, 1e-3f);
  CHECK(std::isfinite(y.item()));
  CHECK_THROWS_AS(batchnorm2d(Tensor({1, 1, 2, 2}), Tensor({1}, 1.0f), Tensor({1}), stats, Mode::Train, 0.03f, 0.0f),
                  Error);
  CHECK_THROWS_AS(batchnorm2d(Tensor({1, 1, 2, 2}), Tensor({1}, 1.0f), Tensor({1}), stats, Mode::Train, 0.03f, -1.0f),
                  Error);
}

TEST_CASE("activations") {
  CHECK(silu(Tensor({1}, 0.0f)).item() == 0.0f);
  CHECK(sigmoid(Tensor({1}, 0.0f)).item() == 0.5f);
  const auto s = silu(Tensor({1}, 2.0f)).item();
  CHECK(s == doctest::Approx(2.0 / (1.0 + std::exp(-2.0))));
}

TEST_CASE("softmax of zeros is uniform") {
  const auto y = softmax(Tensor({3}, 0.0f), 0);
  for (float v : y.data()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-7));
  CHECK_THROWS_AS(softmax(Tensor({3}), 1), DimensionError);
}

TEST_CASE("softmax sums to one along the axis and stays in (0, 1)") {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    const Shape s = {2, 3 + trial % 4ul, 4};
    const std::size_t axis = trial % 3;
    const auto x = random_tensor(s, rng, -8.0f, 8.0f);
    const auto y = softmax(x, axis);
    std::size_t outer = 1, inner = 1;
    for (std::size_t a = 0; a < axis; ++a) outer *= s[a];
    for (std::size_t a = axis + 1; a < s.size(); ++a) inner *= s[a];
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t i = 0; i < inner; ++i) {
        double sum = 0.0;
        for (std::size_t k = 0; k < s[axis]; ++k) {
          const float v = y.data()[(o * s[axis] + k) * inner + i];
          REQUIRE(v > 0.0f);
          REQUIRE(v < 1.0f);
          sum += v;
        }
        REQUIRE(std::abs(sum - 1.0) <= 1e-6);
      }
  }
}

TEST_CASE("nearest upsample replicates each pixel into a 2x2 block") {
  const auto y = upsample_nearest2x(Tensor({1, 1, 2, 2}, {1, 2, 3, 4}));
  REQUIRE(y.shape() == Shape{1, 1, 4, 4});
  CHECK(values(y) == std::vector<float>{1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4});
}

TEST_CASE("concat and slice along channels") {
  const Tensor a({1, 1, 1, 2}, {1, 2}), b({1, 2, 1, 2}, {3, 4, 5, 6});
  const auto c = concat_channels(a, b);
  CHECK(values(c) == std::vector<float>{1, 2, 3, 4, 5, 6});
  CHECK(values(slice_channels(c, 1, 2)) == std::vector<float>{3, 4, 5, 6});
  CHECK_THROWS_AS(concat_channels(a, Tensor({1, 1, 2, 2})), DimensionError);
}

TEST_CASE("attention over one token returns v") {
  std::mt19937_64 rng(2);
  const auto q = random_tensor({1, 4}, rng), k = random_tensor({1, 4}, rng), v = random_tensor({1, 4}, rng);
  const auto y = attention(q, k, v, 2);
  for (std::size_t i = 0; i < 4; ++i) CHECK(y.data()[i] == doctest::Approx(v.data()[i]).epsilon(1e-6));
}

TEST_CASE("attention with identical keys averages the values") {
  std::mt19937_64 rng(4);
  const auto q = random_tensor({5, 4}, rng), v = random_tensor({5, 4}, rng);
  Tensor k({5, 4});
  for (std::size_t t = 0; t < 5; ++t)
    for (std::size_t d = 0; d < 4; ++d) k.data()[t * 4 + d] = 0.3f * static_cast<float>(d) - 0.2f;
  const auto y = attention(q, k, v, 1);
  for (std::size_t d = 0; d < 4; ++d) {
    double mean_v = 0.0;
    for (std::size_t t = 0; t < 5; ++t) mean_v += v.data()[t * 4 + d] / 5.0;
    for (std::size_t t = 0; t < 5; ++t) CHECK(y.data()[t * 4 + d] == doctest::Approx(mean_v).epsilon(1e-5));
  }
}

TEST_CASE("attention matches the direct matrix computation") {
  const Tensor q({3, 4}, {0.1f, 0.2f, -0.3f, 0.4f, 1.0f, 0.0f, 0.5f, -1.0f, -0.2f, 0.7f, 0.3f, 0.0f});
  const Tensor k({3, 4}, {0.5f, -0.5f, 0.0f, 1.0f, 0.3f, 0.3f, 0.3f, 0.3f, -1.0f, 0.2f, 0.8f, -0.4f});
  const Tensor v({3, 4}, {1, 2, 3, 4, -1, 0, 1, 0, 0.5f, 0.5f, -2, 2});
  const auto y = attention(q, k, v, 1);
  for (std::size_t i = 0; i < 3; ++i) {
    double s[3], z = 0.0;
    for (std::size_t j = 0; j < 3; ++j) {
      double dot = 0.0;
      for (std::size_t d = 0; d < 4; ++d) dot += static_cast<double>(q.data()[i * 4 + d]) * k.data()[j * 4 + d];
      s[j] = std::exp(dot / 2.0);  // sqrt(d_head) = 2
      z += s[j];
    }
    for (std::size_t d = 0; d < 4; ++d) {
      double ref = 0.0;
      for (std::size_t j = 0; j < 3; ++j) ref += s[j] / z * v.data()[j * 4 + d];
      CHECK(std::abs(y.data()[i * 4 + d] - ref) < 1e-5);
    }
  }
  CHECK_THROWS_AS(attention(q, k, v, 3), DimensionError);
}

TEST_CASE("backward of sum gives ones; silu slope at zero is one half") {
  Tensor x({2, 3}, 0.0f);
  x.set_requires_grad();
  sum(x).backward();
  for (float g : x.grad()) CHECK(g == 1.0f);

  Tensor z({4}, 0.0f);
  z.set_requires_grad();
  sum(silu(z)).backward();
  for (float g : z.grad()) CHECK(g == 0.5f);
}

TEST_CASE("backward rejects non-scalar losses and zero-fills unreachable leaves") {
  Tensor x({3}, 1.0f), unused({2}, 1.0f);
  x.set_requires_grad();
  unused.set_requires_grad();
  CHECK_THROWS_AS(scale(x, 2.0f).backward(), Error);
  sum(scale(x, 2.0f)).backward();
  for (float g : x.grad()) CHECK(g == 2.0f);
  for (float g : unused.grad()) CHECK(g == 0.0f);
}

TEST_CASE("gradients accumulate across backward calls until zeroed") {
  Tensor x({2}, 1.0f);
  x.set_requires_grad();
  sum(x).backward();
  sum(x).backward();
  CHECK(x.grad()[0] == 2.0f);
  x.zero_grad();
  CHECK(x.grad()[0] == 0.0f);
}

TEST_CASE("no-grad mode records nothing") {
  Tensor x({2}, 1.0f);
  x.set_requires_grad();
  Tensor y;
  {
    NoGradGuard guard;
    CHECK_FALSE(grad_enabled());
    y = sum(x);
  }
  CHECK(grad_enabled());
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("forward and backward are bitwise repeatable") {
  const auto run = [] {
    std::mt19937_64 rng(21);
    auto x = random_tensor({2, 3, 6, 6}, rng);
    auto w = random_tensor({4, 3, 3, 3}, rng);
    w.set_requires_grad();
    RunningStats stats{Tensor({4}, 0.0f), Tensor({4}, 1.0f)};
    auto y = silu(batchnorm2d(conv2d(x, w, Tensor(), 1, 1), Tensor({4}, 1.0f), Tensor({4}, 0.0f), stats,
                              Mode::Train, 0.03f, 1e-3f));
    const auto weights = lumen::testing::random_values(y.numel(), rng);
    weighted_sum(y, weights).backward();
    auto out = values(y);
    out.insert(out.end(), w.grad().begin(), w.grad().end());
    return out;
  };
  const auto a = run(), b = run();
  REQUIRE(a.size() == b.size());
  CHECK(std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0);
}

TEST_CASE("adamw leaves parameters alone with zero grad and no decay") {
  std::vector<Parameter> params = {{"w", Tensor({3}, {1.0f, -2.0f, 0.5f}), true}};
  params[0].tensor.set_requires_grad();
  AdamW opt(AdamWConfig{0.9f, 0.999f, 1e-8f, 0.0f});
  opt.step(params, 0.001f);
  CHECK(values(params[0].tensor) == std::vector<float>{1.0f, -2.0f, 0.5f});
  CHECK(opt.steps() == 1);
}

TEST_CASE("adamw first step moves by lr against the gradient sign") {
  std::vector<Parameter> params = {{"w", Tensor({4}, 0.0f), true}};
  auto& t = params[0].tensor;
  t.set_requires_grad();
  const float g[4] = {0.3f, -2.0f, 1e-3f, -50.0f};
  std::copy(g, g + 4, t.mutable_grad().begin());
  AdamW opt(AdamWConfig{0.9f, 0.999f, 1e-8f, 0.0f});
  opt.step(params, 0.001f);
  for (int i = 0; i < 4; ++i) CHECK(t.data()[i] == doctest::Approx(g[i] > 0 ? -0.001 : 0.001).epsilon(1e-4));
}

TEST_CASE("adamw decoupled decay shrinks by 1 - lr*wd") {
  std::vector<Parameter> params = {{"w", Tensor({2}, {2.0f, -4.0f}), true}, {"b", Tensor({1}, 3.0f), false}};
  for (auto& p : params) p.tensor.set_requires_grad();
  AdamW opt;  // wd 0.01
  opt.step(params, 0.001f);
  CHECK(params[0].tensor.data()[0] == doctest::Approx(2.0 * (1 - 1e-5)).epsilon(1e-7));
  CHECK(params[0].tensor.data()[1] == doctest::Approx(-4.0 * (1 - 1e-5)).epsilon(1e-7));
  CHECK(params[1].tensor.data()[0] == 3.0f);
}

TEST_CASE("adamw rejects a non-finite gradient before touching anything") {
  std::vector<Parameter> params = {{"ok", Tensor({1}, 1.0f), true}, {"bad", Tensor({1}, 1.0f), true}};
  for (auto& p : params) p.tensor.set_requires_grad();
  params[0].tensor.mutable_grad()[0] = 1.0f;
  params[1].tensor.mutable_grad()[0] = std::numeric_limits<float>::quiet_NaN();
  AdamW opt;
  try {
    opt.step(params, 0.001f);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("bad") != std::string::npos);
  }
  CHECK(params[0].tensor.data()[0] == 1.0f);
  CHECK_THROWS_AS(opt.step(params, 0.0f), Error);
}

TEST_CASE("lr schedule warmup and cosine endpoints") {
  const LrSchedule s;
  CHECK(lr_at(s, 3.0) == doctest::Approx(0.001).epsilon(1e-12));
  CHECK(lr_at(s, 1.5) == doctest::Approx(0.0005).epsilon(1e-12));
  CHECK(lr_at(s, 50.0) == doctest::Approx(1e-5).epsilon(1e-9));
  CHECK_THROWS_AS(lr_at(s, -0.1), Error);
  CHECK_THROWS_AS(lr_at(s, 50.5), Error);
}

TEST_CASE("lr schedule is continuous at the boundary and non-increasing after it") {
  const LrSchedule s;
  CHECK(std::abs(lr_at(s, 3.0 - 1e-9) - lr_at(s, 3.0 + 1e-9)) < 1e-12);
  double prev = lr_at(s, 3.0);
  for (double e = 3.0; e <= 50.0; e += 0.01) {
    const double lr = lr_at(s, e);
    REQUIRE(lr <= prev + 1e-15);
    REQUIRE(lr > 0.0);
    prev = lr;
  }
  for (double e = 0.01; e < 3.0; e += 0.01) REQUIRE(lr_at(s, e) > 0.0);
}

}  // TEST_SUITE
