#include "tinyft/geometry.hpp"

namespace tinyft::geometry {

double wrap_angle(double phi) {
  // In-range angles pass through untouched; the fmod path would round them
  // through (phi + pi) - pi and lose low bits.
  if (phi > -M_PI && phi <= M_PI) return phi;
  double r = std::fmod(phi + M_PI, 2.0 * M_PI);
  if (r <= 0.0) r += 2.0 * M_PI;
  return r - M_PI;
}

Pose4 compose(const Pose4& a, const Pose4& b) {
  const double c = std::cos(a.phi);
  const double s = std::sin(a.phi);
  Pose4 out;
  out.x = a.x + c * b.x - s * b.y;
  out.y = a.y + s * b.x + c * b.y;
  out.z = a.z + b.z;
  out.phi = wrap_angle(a.phi + b.phi);
  return out;
}

Pose4 invert(const Pose4& p) {
  const double c = std::cos(p.phi);
  const double s = std::sin(p.phi);
  Pose4 out;
  out.x = -(c * p.x + s * p.y);
  out.y = s * p.x - c * p.y;
  out.z = -p.z;
  out.phi = wrap_angle(-p.phi);
  return out;
}

double delta(const Pose4& a, const Pose4& b) {
  return std::abs(a.x - b.x) + std::abs(a.y - b.y) + std::abs(a.z - b.z) +
         std::abs(wrap_angle(a.phi - b.phi));
}

namespace {
double sgn(double v) {
  if (v > 0.0) return 1.0;
  if (v < 0.0) return -1.0;
  return 0.0;
}
}  // namespace

std::array<double, 4> delta_gradient(const Pose4& a, const Pose4& b) {
  return {sgn(a.x - b.x), sgn(a.y - b.y), sgn(a.z - b.z),
          sgn(wrap_angle(a.phi - b.phi))};
}

}  // namespace tinyft::geometry
