#pragma once

#include <array>
#include <cmath>

namespace tinyft::geometry {

// Relative pose with 4 degrees of freedom: translation in meters plus yaw.
// Roll and pitch are assumed stabilized away, so every transform is a
// rotation about z followed by a translation.
struct Pose4 {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;
  double phi = 0.0;  // radians, normalized to (-pi, pi]

  bool operator==(const Pose4&) const = default;
};

// Wraps an angle to (-pi, pi]. The +pi boundary maps to +pi, -pi maps to +pi.
double wrap_angle(double phi);

// Rigid composition a*b: applies b in the frame described by a.
Pose4 compose(const Pose4& a, const Pose4& b);

// Inverse transform, compose(invert(p), p) == identity.
Pose4 invert(const Pose4& p);

// L1 pose distance: |dx| + |dy| + |dz| + |wrap(dphi)|.
double delta(const Pose4& a, const Pose4& b);

// Subgradient of delta with respect to the components of a. Each entry is
// sign(a_i - b_i) with the angle difference wrapped; exact ties yield 0.
std::array<double, 4> delta_gradient(const Pose4& a, const Pose4& b);

}  // namespace tinyft::geometry
