#pragma once

#include <cmath>

#include "bkimap/geometry.hpp"

namespace bkimap {

/// Hyper-parameters of the sparse kernel: support length l and scale sigma0.
template <typename Scalar>
struct KernelParams {
  Scalar length = Scalar(0.3);
  Scalar scale = Scalar(0.1);
};

using KernelParamsf = KernelParams<float>;
using KernelParamsd = KernelParams<double>;

/// Along-beam weighting applied to line-based free-space evidence.
enum class BeamWeighting {
  kUniform,   // constant 1
  kLinear,    // along-beam fraction s
  kBilinear,  // triangle 1 - |2s - 1|, peaking mid-beam
};

/// Compact-support kernel: zero for d >= length, otherwise
/// scale * [(2 + cos(2 pi r)) / 3 + sin(2 pi r) / (2 pi)] with r = d / length.
template <typename Scalar>
Scalar sparse_kernel(Scalar d, const KernelParams<Scalar>& params) {
  if (d >= params.length) {
    return Scalar(0);
  }
  const Scalar r = d / params.length;
  const Scalar two_pi_r = Scalar(2) * pi_v<Scalar> * r;
  return params.scale * ((Scalar(2) + std::cos(two_pi_r)) / Scalar(3) +
                         std::sin(two_pi_r) / (Scalar(2) * pi_v<Scalar>));
}

/// Weight of an along-beam position s in [0, 1] under the given scheme.
template <typename Scalar>
Scalar beam_weight(Scalar s, BeamWeighting w) {
  switch (w) {
    case BeamWeighting::kUniform:
      return Scalar(1);
    case BeamWeighting::kLinear:
      return s;
    case BeamWeighting::kBilinear:
      return Scalar(1) - std::abs(Scalar(2) * s - Scalar(1));
  }
  return Scalar(0);
}

/// Kernel value of a query point against a whole beam: the sparse kernel of
/// the point-to-segment distance, scaled by the along-beam weight at the
/// closest point.
template <typename Scalar>
Scalar weighted_line_kernel(const Point3<Scalar>& p, const Beam<Scalar>& b,
                            const KernelParams<Scalar>& params,
                            BeamWeighting w) {
  const SegmentDistance<Scalar> sd = point_to_segment(p, b);
  if (sd.distance >= params.length) {
    return Scalar(0);
  }
  return beam_weight(sd.s, w) * sparse_kernel(sd.distance, params);
}

}  // namespace bkimap
