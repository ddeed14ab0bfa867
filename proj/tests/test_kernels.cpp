#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>

#include "support/naive_ops.hpp"
#include "tinyft/kernels.hpp"
#include "tinyft/rng.hpp"

using namespace tinyft;
using namespace tinyft::kernels;

namespace {

Tensor random_tensor(std::vector<int64_t> shape, tinyft::rng::Stream& s,
                     double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (float& v : t.data) v = static_cast<float>(s.uniform(lo, hi));
  return t;
}

LayerParams random_conv_params(int cout, int cin, int k,
                               tinyft::rng::Stream& s, bool with_bias) {
  LayerParams p;
  p.weights = random_tensor({cout, cin, k, k}, s);
  if (with_bias) p.bias = random_tensor({cout}, s);
  return p;
}

LayerParams random_bn_params(int ch, tinyft::rng::Stream& s) {
  LayerParams p;
  p.weights = random_tensor({ch}, s, 0.5, 1.5);   // gamma
  p.bias = random_tensor({ch}, s, -0.5, 0.5);     // beta
  p.frozen_mean = random_tensor({ch}, s, -0.5, 0.5);
  p.frozen_var = random_tensor({ch}, s, 0.2, 2.0);
  return p;
}

// Central finite difference of a scalar loss sum(y * coeff) w.r.t. one input
// element, with everything recomputed through the forward kernel.
double fd_loss(const std::function<double()>& loss, float& slot, float h) {
  const float saved = slot;
  slot = saved + h;
  const double up = loss();
  slot = saved - h;
  const double down = loss();
  slot = saved;
  return (up - down) / (2.0 * static_cast<double>(h));
}

double weighted_sum(const Tensor& y, const Tensor& coeff) {
  double acc = 0.0;
  for (int64_t i = 0; i < y.numel(); ++i)
    acc += static_cast<double>(y.data[static_cast<size_t>(i)]) *
           coeff.data[static_cast<size_t>(i)];
  return acc;
}

}  // namespace

TEST_CASE("conv2d_fw matches the naive six-loop oracle") {
  tinyft::rng::Stream s(42);
  const struct {
    int cin, cout, k, stride, pad, h, w;
  } cases[] = {
      {1, 4, 5, 2, 2, 12, 16}, {3, 8, 3, 1, 1, 7, 9},  {4, 4, 3, 2, 1, 10, 11},
      {2, 6, 3, 2, 0, 8, 8},   {5, 2, 1, 1, 0, 6, 5},  {2, 3, 5, 1, 4, 9, 7},
  };
  for (const auto& c : cases) {
    const oracle::ConvArgs a{c.cin, c.cout, c.k, c.stride, c.pad, c.h, c.w};
    const Tensor x = random_tensor({c.cin, c.h, c.w}, s);
    const LayerParams p = random_conv_params(c.cout, c.cin, c.k, s, true);
    const Tensor y = conv2d_fw(x, p, c.stride, c.pad);
    const std::vector<double> ref = naive_conv(x.data, p.weights.data, p.bias.data, a);
    REQUIRE(y.numel() == static_cast<int64_t>(ref.size()));
    for (int64_t i = 0; i < y.numel(); ++i) {
      CHECK(std::abs(y.data[static_cast<size_t>(i)] - ref[static_cast<size_t>(i)]) < 1e-4);
    }
  }
}

TEST_CASE("conv2d_fw handles batches and validates shapes") {
  tinyft::rng::Stream s(43);
  const Tensor x = random_tensor({2, 3, 8, 10}, s);
  const LayerParams p = random_conv_params(4, 3, 3, s, false);
  const Tensor y = conv2d_fw(x, p, 1, 1);
  CHECK(y.shape == std::vector<int64_t>{2, 4, 8, 10});

  // Per-sample results equal the batched result.
  for (int n = 0; n < 2; ++n) {
    Tensor xs({3, 8, 10});
    std::copy(x.data.begin() + n * xs.numel(), x.data.begin() + (n + 1) * xs.numel(),
              xs.data.begin());
    const Tensor ys = conv2d_fw(xs, p, 1, 1);
    for (int64_t i = 0; i < ys.numel(); ++i) {
      CHECK(ys.data[static_cast<size_t>(i)] == y.data[static_cast<size_t>(n * ys.numel() + i)]);
    }
  }

  const Tensor bad = random_tensor({2, 8, 10}, s);
  CHECK_THROWS_AS(conv2d_fw(bad, p, 1, 1), std::invalid_argument);
  CHECK_THROWS_AS(conv2d_fw(x, p, 0, 1), std::invalid_argument);
  CHECK_THROWS_AS(conv2d_fw(x, p, 1, 3), std::invalid_argument);
}

TEST_CASE("conv2d backward kernels match central finite differences") {
  tinyft::rng::Stream s(4242);
  int instances = 0;
  const struct {
    int cin, cout, k, stride, pad, h, w;
  } cases[] = {
      {2, 3, 3, 1, 1, 6, 7},
      {1, 4, 5, 2, 2, 10, 12},
      {3, 2, 3, 2, 1, 9, 8},
  };
  for (const auto& c : cases) {
    for (int rep = 0; rep < 3; ++rep) {
      Tensor x = random_tensor({c.cin, c.h, c.w}, s);
      LayerParams p = random_conv_params(c.cout, c.cin, c.k, s, true);
      const Tensor y0 = conv2d_fw(x, p, c.stride, c.pad);
      const Tensor coeff = random_tensor(y0.shape, s);

      const auto loss = [&]() {
        return weighted_sum(conv2d_fw(x, p, c.stride, c.pad), coeff);
      };

      // dL/dy = coeff by construction.
      const Tensor dx = conv2d_bw_ig(coeff, p, c.stride, c.pad, x.shape);
      auto [dw, db] = conv2d_bw_wg(x, coeff, c.stride, c.pad, c.k);

      tinyft::rng::Stream pick(1000 + instances);
      for (int probe = 0; probe < 8; ++probe) {
        const auto xi = static_cast<size_t>(pick.uniform_index(static_cast<uint64_t>(x.numel())));
        const double fd = fd_loss(loss, x.data[xi], 1e-2f);
        CHECK(dx.data[xi] == doctest::Approx(fd).epsilon(1e-2));

        const auto wi = static_cast<size_t>(pick.uniform_index(static_cast<uint64_t>(p.weights.numel())));
        const double fdw = fd_loss(loss, p.weights.data[wi], 1e-2f);
        CHECK(dw.data[wi] == doctest::Approx(fdw).epsilon(1e-2));

        const auto bi = static_cast<size_t>(pick.uniform_index(static_cast<uint64_t>(p.bias.numel())));
        const double fdb = fd_loss(loss, p.bias.data[bi], 1e-2f);
        CHECK(db.data[bi] == doctest::Approx(fdb).epsilon(1e-2));
        ++instances;
      }
    }
  }
  CHECK(instances >= 50);
}

TEST_CASE("batchnorm forward and backward match definitions") {
  tinyft::rng::Stream s(77);
  Tensor x = random_tensor({4, 5, 6}, s);
  LayerParams p = random_bn_params(4, s);

  const Tensor y = batchnorm_fw(x, p);
  for (int c = 0; c < 4; ++c) {
    for (int i = 0; i < 30; ++i) {
      const size_t idx = static_cast<size_t>(c * 30 + i);
      const double expect = (x.data[idx] - p.frozen_mean.data[c]) *
                                p.weights.data[c] /
                                std::sqrt(p.frozen_var.data[c] + p.epsilon) +
                            p.bias.data[c];
      CHECK(y.data[idx] == doctest::Approx(expect).epsilon(1e-5));
    }
  }

  const Tensor coeff = random_tensor(y.shape, s);
  const auto loss = [&]() { return weighted_sum(batchnorm_fw(x, p), coeff); };

  const Tensor dx = batchnorm_bw_ig(coeff, p);
  auto [dg, db] = batchnorm_bw_wg(x, coeff, p);

  tinyft::rng::Stream pick(78);
  int instances = 0;
  for (int probe = 0; probe < 60; ++probe) {
    const auto xi = static_cast<size_t>(pick.uniform_index(static_cast<uint64_t>(x.numel())));
    CHECK(dx.data[xi] == doctest::Approx(fd_loss(loss, x.data[xi], 1e-2f)).epsilon(1e-2));

    const auto ci = static_cast<size_t>(pick.uniform_index(4));
    CHECK(dg.data[ci] == doctest::Approx(fd_loss(loss, p.weights.data[ci], 1e-2f)).epsilon(1e-2));
    CHECK(db.data[ci] == doctest::Approx(fd_loss(loss, p.bias.data[ci], 1e-2f)).epsilon(1e-2));
    ++instances;
  }
  CHECK(instances >= 50);
}

TEST_CASE("relu forward clamps negatives, backward replays the sign mask") {
  Tensor x({2, 2, 2});
  x.data = {-1.0f, 2.0f, 0.0f, -0.5f, 3.0f, -2.0f, 0.25f, 1.0f};
  auto [y, mask] = relu_fw(x);
  const float expect_y[] = {0, 2, 0, 0, 3, 0, 0.25f, 1};
  for (int i = 0; i < 8; ++i) CHECK(y.data[static_cast<size_t>(i)] == expect_y[i]);
  CHECK(mask.byte_size() == 1);
  // Bits: elements 1, 4, 6, 7 were positive.
  CHECK(mask.get(1));
  CHECK(mask.get(4));
  CHECK(mask.get(6));
  CHECK(mask.get(7));
  CHECK_FALSE(mask.get(0));
  CHECK_FALSE(mask.get(2));

  Tensor dy({2, 2, 2});
  dy.data = {10, 20, 30, 40, 50, 60, 70, 80};
  const Tensor dx = relu_bw(dy, mask);
  const float expect_dx[] = {0, 20, 0, 0, 50, 0, 70, 80};
  for (int i = 0; i < 8; ++i) CHECK(dx.data[static_cast<size_t>(i)] == expect_dx[i]);

  // Backward gradients agree with finite differences away from the kink.
  tinyft::rng::Stream s(5);
  int instances = 0;
  for (int rep = 0; rep < 10; ++rep) {
    Tensor xr = random_tensor({3, 4, 5}, s);
    const Tensor coeff = random_tensor(xr.shape, s);
    auto [yr, mr] = relu_fw(xr);
    const Tensor dxr = relu_bw(coeff, mr);
    const auto loss = [&]() {
      auto [yy, mm] = relu_fw(xr);
      return weighted_sum(yy, coeff);
    };
    tinyft::rng::Stream pick(800 + rep);
    for (int probe = 0; probe < 6; ++probe) {
      const auto xi = static_cast<size_t>(pick.uniform_index(static_cast<uint64_t>(xr.numel())));
      if (std::abs(xr.data[xi]) < 0.05f) continue;
      CHECK(dxr.data[xi] == doctest::Approx(fd_loss(loss, xr.data[xi], 1e-2f)).epsilon(1e-2));
      ++instances;
    }
  }
  CHECK(instances >= 50);
}

TEST_CASE("sign mask is one bit per activation") {
  tinyft::rng::Stream s(6);
  const Tensor x = random_tensor({32, 24, 40}, s);
  auto [y, mask] = relu_fw(x);
  CHECK(mask.count == x.numel());
  CHECK(mask.byte_size() == (x.numel() + 7) / 8);
}

TEST_CASE("maxpool picks the max, ties go to the lowest flat index") {
  Tensor x({1, 2, 4});
  x.data = {5, 5, 1, 2, 5, 3, 2, 2};
  auto [y, arg] = maxpool2x2_fw(x);
  CHECK(y.shape == std::vector<int64_t>{1, 1, 2});
  CHECK(y.data[0] == 5.0f);
  CHECK(y.data[1] == 2.0f);
  CHECK(arg.get(0) == 0);  // three-way tie at 5 resolves to the first cell
  CHECK(arg.get(1) == 1);  // tie between cells 1 and 3 of the window

  Tensor dy({1, 1, 2});
  dy.data = {7.0f, 9.0f};
  const Tensor dx = maxpool2x2_bw(dy, arg);
  const float expect[] = {7, 0, 0, 9, 0, 0, 0, 0};
  for (int i = 0; i < 8; ++i) CHECK(dx.data[static_cast<size_t>(i)] == expect[i]);
}

TEST_CASE("maxpool backward matches finite differences at unique maxima") {
  tinyft::rng::Stream s(9);
  int instances = 0;
  for (int rep = 0; rep < 12; ++rep) {
    Tensor x = random_tensor({2, 6, 8}, s);
    auto [y, arg] = maxpool2x2_fw(x);
    const Tensor coeff = random_tensor(y.shape, s);
    const Tensor dx = maxpool2x2_bw(coeff, arg);
    const auto loss = [&]() {
      auto [yy, aa] = maxpool2x2_fw(x);
      return weighted_sum(yy, coeff);
    };
    tinyft::rng::Stream pick(900 + rep);
    for (int probe = 0; probe < 6; ++probe) {
      const auto xi = static_cast<size_t>(pick.uniform_index(static_cast<uint64_t>(x.numel())));
      CHECK(dx.data[xi] == doctest::Approx(fd_loss(loss, x.data[xi], 1e-3f)).epsilon(1e-2));
      ++instances;
    }
  }
  CHECK(instances >= 50);
}

TEST_CASE("fully connected forward and backward match definitions") {
  tinyft::rng::Stream s(13);
  LayerParams p;
  p.weights = random_tensor({4, 12}, s);
  p.bias = random_tensor({4}, s);
  Tensor x = random_tensor({12}, s);

  const Tensor y = fc_fw(x, p);
  for (int o = 0; o < 4; ++o) {
    double acc = p.bias.data[o];
    for (int i = 0; i < 12; ++i) acc += static_cast<double>(p.weights.data[o * 12 + i]) * x.data[i];
    CHECK(y.data[static_cast<size_t>(o)] == doctest::Approx(acc).epsilon(1e-5));
  }

  const Tensor coeff = random_tensor({4}, s);
  const auto loss = [&]() { return weighted_sum(fc_fw(x, p), coeff); };
  const Tensor dx = fc_bw_ig(coeff, p);
  auto [dw, db] = fc_bw_wg(x, coeff);

  tinyft::rng::Stream pick(14);
  int instances = 0;
  for (int probe = 0; probe < 60; ++probe) {
    const auto xi = static_cast<size_t>(pick.uniform_index(12));
    CHECK(dx.data[xi] == doctest::Approx(fd_loss(loss, x.data[xi], 1e-2f)).epsilon(1e-2));
    const auto wi = static_cast<size_t>(pick.uniform_index(48));
    CHECK(dw.data[wi] == doctest::Approx(fd_loss(loss, p.weights.data[wi], 1e-2f)).epsilon(1e-2));
    const auto bi = static_cast<size_t>(pick.uniform_index(4));
    CHECK(db.data[bi] == doctest::Approx(fd_loss(loss, p.bias.data[bi], 1e-2f)).epsilon(1e-2));
    ++instances;
  }
  CHECK(instances >= 50);
}

TEST_CASE("mac counter records exact analytic counts") {
  tinyft::rng::Stream s(21);
  const Tensor x = random_tensor({3, 10, 12}, s);
  const LayerParams p = random_conv_params(8, 3, 3, s, false);

  mac_counter_reset();
  const Tensor y = conv2d_fw(x, p, 1, 1);
  CHECK(mac_counter_value() == 8ull * 3 * 3 * 3 * 10 * 12);

  mac_counter_reset();
  conv2d_bw_ig(y, p, 1, 1, x.shape);
  CHECK(mac_counter_value() == 3ull * 8 * 3 * 3 * 10 * 12);

  mac_counter_reset();
  conv2d_bw_wg(x, y, 1, 1, 3);
  CHECK(mac_counter_value() == 8ull * 3 * 3 * 3 * 10 * 12);

  const LayerParams bp = random_bn_params(8, s);
  mac_counter_reset();
  const Tensor by = batchnorm_fw(y, bp);
  CHECK(mac_counter_value() == static_cast<uint64_t>(y.numel()));

  mac_counter_reset();
  batchnorm_bw_ig(by, bp);
  CHECK(mac_counter_value() == static_cast<uint64_t>(y.numel()));

  mac_counter_reset();
  batchnorm_bw_wg(y, by, bp);
  CHECK(mac_counter_value() == 2ull * static_cast<uint64_t>(y.numel()));

  mac_counter_reset();
  auto [ry, rm] = relu_fw(by);
  relu_bw(ry, rm);
  auto [py, pa] = maxpool2x2_fw(ry);
  maxpool2x2_bw(py, pa);
  CHECK(mac_counter_value() == 0);

  LayerParams fp;
  fp.weights = random_tensor({4, 20}, s);
  fp.bias = random_tensor({4}, s);
  const Tensor fx = random_tensor({20}, s);
  mac_counter_reset();
  const Tensor fy = fc_fw(fx, fp);
  CHECK(mac_counter_value() == 80);
  mac_counter_reset();
  fc_bw_ig(fy, fp);
  CHECK(mac_counter_value() == 80);
  mac_counter_reset();
  fc_bw_wg(fx, fy);
  CHECK(mac_counter_value() == 80);
}

TEST_CASE("finite check rejects NaN") {
  Tensor t({4});
  t.data = {1.0f, 2.0f, std::nanf(""), 4.0f};
  CHECK_THROWS_AS(check_finite(t, "probe"), std::invalid_argument);
}
