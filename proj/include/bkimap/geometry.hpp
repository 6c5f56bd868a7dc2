#pragma once

#include <cmath>
#include <cstdint>
#include <optional>

#include <Eigen/Core>

namespace bkimap {

template <typename Scalar>
using Point3 = Eigen::Matrix<Scalar, 3, 1>;

using Point3f = Point3<float>;
using Point3d = Point3<double>;

/// A lidar return with a semantic class id attached.
template <typename Scalar>
struct LabeledPoint {
  Point3<Scalar> position;
  std::uint16_t label = 0;
};

using LabeledPointd = LabeledPoint<double>;

/// Beam endpoint expressed relative to the sensor origin.
///   r     range in meters, >= 0
///   phi   azimuth in [-pi, pi)
///   theta signed elevation in [-pi/2, pi/2]
template <typename Scalar>
struct SphericalCoord {
  Scalar r = Scalar(0);
  Scalar phi = Scalar(0);
  Scalar theta = Scalar(0);
};

using SphericalCoordf = SphericalCoord<float>;
using SphericalCoordd = SphericalCoord<double>;

template <typename Scalar>
constexpr Scalar pi_v = Scalar(3.14159265358979323846264338327950288L);

/// Converts a hit position into spherical coordinates about `origin`.
///
/// Azimuth is atan2(dy, dx) folded into [-pi, pi); elevation is the signed
/// angle atan2(dz, hypot(dx, dy)) so beams below the horizontal keep their
/// sign. Returns nullopt for a zero-length (degenerate) beam.
template <typename Scalar>
std::optional<SphericalCoord<Scalar>> to_spherical(const Point3<Scalar>& origin,
                                                   const Point3<Scalar>& hit) {
  const Point3<Scalar> d = hit - origin;
  const Scalar r = d.norm();
  if (!(r > Scalar(0)) || !std::isfinite(r)) {
    return std::nullopt;
  }
  const Scalar rxy = std::sqrt(d.x() * d.x() + d.y() * d.y());
  Scalar phi = std::atan2(d.y(), d.x());
  if (phi >= pi_v<Scalar>) {
    phi -= Scalar(2) * pi_v<Scalar>;  // fold the atan2(+-0, -x) = +pi case
  }
  const Scalar theta = std::atan2(d.z(), rxy);
  return SphericalCoord<Scalar>{r, phi, theta};
}

/// Inverse of to_spherical.
template <typename Scalar>
Point3<Scalar> from_spherical(const Point3<Scalar>& origin,
                              const SphericalCoord<Scalar>& s) {
  const Scalar c = std::cos(s.theta);
  return origin + Point3<Scalar>(s.r * c * std::cos(s.phi),
                                 s.r * c * std::sin(s.phi),
                                 s.r * std::sin(s.theta));
}

/// A sensor beam: the segment from `origin` to `endpoint`, carrying the class
/// label of the hit and the cached spherical coordinates of the endpoint.
template <typename Scalar>
struct Beam {
  Point3<Scalar> origin;
  Point3<Scalar> endpoint;
  std::uint16_t label = 0;
  SphericalCoord<Scalar> spherical;

  /// Validating factory; rejects zero-length or non-finite beams.
  static std::optional<Beam> make(const Point3<Scalar>& origin,
                                  const Point3<Scalar>& endpoint,
                                  std::uint16_t label) {
    if (!origin.allFinite() || !endpoint.allFinite()) {
      return std::nullopt;
    }
    auto s = to_spherical(origin, endpoint);
    if (!s) {
      return std::nullopt;
    }
    return Beam{origin, endpoint, label, *s};
  }

  Scalar range() const { return spherical.r; }
};

using Beamf = Beam<float>;
using Beamd = Beam<double>;

/// Result of a point-to-segment query: the minimum distance and the clamped
/// along-beam fraction s in [0, 1] where it is attained.
template <typename Scalar>
struct SegmentDistance {
  Scalar distance;
  Scalar s;
};

template <typename Scalar>
SegmentDistance<Scalar> point_to_segment(const Point3<Scalar>& p,
                                         const Beam<Scalar>& b) {
  const Point3<Scalar> d = b.endpoint - b.origin;
  const Point3<Scalar> w = p - b.origin;
  const Scalar dd = d.squaredNorm();
  Scalar s = w.dot(d) / dd;
  s = s < Scalar(0) ? Scalar(0) : (s > Scalar(1) ? Scalar(1) : s);
  const Scalar dist = (w - s * d).norm();
  return {dist, s};
}

}  // namespace bkimap
