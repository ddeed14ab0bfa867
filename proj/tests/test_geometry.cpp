#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "support/mat4.hpp"
#include "tinyft/geometry.hpp"
#include "tinyft/rng.hpp"

using tinyft::geometry::compose;
using tinyft::geometry::delta;
using tinyft::geometry::delta_gradient;
using tinyft::geometry::invert;
using tinyft::geometry::Pose4;
using tinyft::geometry::wrap_angle;

namespace {

Pose4 random_pose(tinyft::rng::Stream& s) {
  return {s.uniform(-3.0, 3.0), s.uniform(-3.0, 3.0), s.uniform(-1.5, 1.5),
          s.uniform(-3.0, 3.0)};
}

void check_close(const Pose4& got, double x, double y, double z, double phi,
                 double tol = 1e-9) {
  CHECK(std::abs(got.x - x) < tol);
  CHECK(std::abs(got.y - y) < tol);
  CHECK(std::abs(got.z - z) < tol);
  CHECK(std::abs(wrap_angle(got.phi - phi)) < tol);
}

}  // namespace

TEST_CASE("wrap_angle maps to half-open (-pi, pi]") {
  CHECK(wrap_angle(0.0) == 0.0);
  CHECK(wrap_angle(M_PI) == doctest::Approx(M_PI));
  CHECK(wrap_angle(-M_PI) == doctest::Approx(M_PI));
  CHECK(wrap_angle(3.0 * M_PI) == doctest::Approx(M_PI));
  CHECK(wrap_angle(2.0 * M_PI) == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(wrap_angle(M_PI + 0.25) == doctest::Approx(-M_PI + 0.25));
  CHECK(wrap_angle(-M_PI - 0.25) == doctest::Approx(M_PI - 0.25));
  for (double phi = -20.0; phi <= 20.0; phi += 0.37) {
    const double w = wrap_angle(phi);
    CHECK(w > -M_PI - 1e-15);
    CHECK(w <= M_PI + 1e-15);
    CHECK(std::abs(std::sin(w - phi)) < 1e-12);
  }
}

TEST_CASE("compose worked example") {
  const Pose4 a{1.0, 0.0, 0.0, M_PI / 2.0};
  const Pose4 b{1.0, 0.0, 0.0, 0.0};
  check_close(compose(a, b), 1.0, 1.0, 0.0, M_PI / 2.0);
}

TEST_CASE("invert worked example") {
  check_close(invert({1.0, 2.0, 0.0, M_PI / 2.0}), -2.0, 1.0, 0.0, -M_PI / 2.0);
}

TEST_CASE("compose/invert match the homogeneous-matrix oracle") {
  tinyft::rng::Stream s(20260814);
  for (int i = 0; i < 1000; ++i) {
    const Pose4 a = random_pose(s);
    const Pose4 b = random_pose(s);

    const oracle::Mat4 ma = oracle::from_pose(a.x, a.y, a.z, a.phi);
    const oracle::Mat4 mb = oracle::from_pose(b.x, b.y, b.z, b.phi);

    const oracle::PoseVec mc = oracle::to_pose(oracle::mul(ma, mb));
    const Pose4 c = compose(a, b);
    CHECK(std::abs(c.x - mc.x) < 1e-6);
    CHECK(std::abs(c.y - mc.y) < 1e-6);
    CHECK(std::abs(c.z - mc.z) < 1e-6);
    CHECK(std::abs(wrap_angle(c.phi - mc.phi)) < 1e-6);

    const oracle::PoseVec mi = oracle::to_pose(oracle::inverse_rigid(ma));
    const Pose4 ia = invert(a);
    CHECK(std::abs(ia.x - mi.x) < 1e-6);
    CHECK(std::abs(ia.y - mi.y) < 1e-6);
    CHECK(std::abs(ia.z - mi.z) < 1e-6);
    CHECK(std::abs(wrap_angle(ia.phi - mi.phi)) < 1e-6);
  }
}

TEST_CASE("group identities hold") {
  tinyft::rng::Stream s(7);
  const Pose4 id{};
  for (int i = 0; i < 200; ++i) {
    const Pose4 a = random_pose(s);
    const Pose4 b = random_pose(s);
    const Pose4 c = random_pose(s);

    const Pose4 left = compose(compose(a, b), c);
    const Pose4 right = compose(a, compose(b, c));
    CHECK(delta(left, right) < 1e-6);

    CHECK(delta(compose(invert(a), a), id) < 1e-6);
    CHECK(delta(compose(a, invert(a)), id) < 1e-6);
    CHECK(delta(compose(a, id), a) < 1e-12);
    CHECK(delta(compose(id, a), a) < 1e-12);
  }
}

TEST_CASE("delta is an L1 distance with a wrapped angle term") {
  CHECK(delta({0, 0, 0, 0}, {0, 0, 0, 0}) == 0.0);
  CHECK(delta({1, 2, 3, 0.5}, {1, 2, 3, 0.5}) == 0.0);
  CHECK(delta({1, 0, 0, 0}, {0, 1, 0, 0}) == doctest::Approx(2.0));
  // Angle difference crosses the wrap boundary: pi-0.1 vs -pi+0.1 is 0.2 apart.
  CHECK(delta({0, 0, 0, M_PI - 0.1}, {0, 0, 0, -M_PI + 0.1}) ==
        doctest::Approx(0.2));

  tinyft::rng::Stream s(11);
  for (int i = 0; i < 200; ++i) {
    const Pose4 a = random_pose(s);
    const Pose4 b = random_pose(s);
    CHECK(delta(a, b) >= 0.0);
    CHECK(delta(a, b) == doctest::Approx(delta(b, a)));
    CHECK(delta(a, a) == 0.0);
  }
}

TEST_CASE("delta_gradient is the componentwise sign, zero at ties") {
  const auto g = delta_gradient({1, -2, 0, 0.5}, {0, 0, 0, 0.7});
  CHECK(g[0] == 1.0);
  CHECK(g[1] == -1.0);
  CHECK(g[2] == 0.0);
  CHECK(g[3] == -1.0);

  const auto zero = delta_gradient({1, 2, 3, 0.4}, {1, 2, 3, 0.4});
  for (double v : zero) CHECK(v == 0.0);
}

TEST_CASE("delta_gradient matches central finite differences") {
  tinyft::rng::Stream s(100);
  const double h = 1e-6;
  int checked = 0;
  for (int i = 0; i < 80; ++i) {
    const Pose4 a = random_pose(s);
    const Pose4 b = random_pose(s);
    // Stay away from ties and from the angle wrap boundary where the
    // subgradient is not a classical derivative.
    if (std::abs(a.x - b.x) < 1e-3 || std::abs(a.y - b.y) < 1e-3 ||
        std::abs(a.z - b.z) < 1e-3)
      continue;
    const double dphi = wrap_angle(a.phi - b.phi);
    if (std::abs(dphi) < 1e-3 || std::abs(std::abs(dphi) - M_PI) < 1e-3)
      continue;

    const auto g = delta_gradient(a, b);
    double num[4];
    for (int c = 0; c < 4; ++c) {
      Pose4 hi = a, lo = a;
      double* fields_hi[4] = {&hi.x, &hi.y, &hi.z, &hi.phi};
      double* fields_lo[4] = {&lo.x, &lo.y, &lo.z, &lo.phi};
      *fields_hi[c] += h;
      *fields_lo[c] -= h;
      num[c] = (delta(hi, b) - delta(lo, b)) / (2.0 * h);
      CHECK(std::abs(g[c] - num[c]) < 1e-4);
    }
    ++checked;
  }
  CHECK(checked >= 50);
}
