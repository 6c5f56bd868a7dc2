#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "bkimap/geometry.hpp"
#include "bkimap/kernel.hpp"
#include "bkimap/spherical_rtree.hpp"

namespace bkimap {

/// A free-space training point sampled on a beam segment.
template <typename Scalar>
struct FreeSample {
  Point3<Scalar> position;
  std::uint32_t source_beam = 0;
  Scalar weight = Scalar(1);
};

using FreeSampled = FreeSample<double>;

enum class FreeSpaceStrategy {
  kNone,            // no free-space evidence
  kEvenlySpaced,    // points every `gap` meters along each beam
  kUniformRandom,   // fixed count per beam, r ~ U(0, range)
  kLinearWeighted,  // fixed count per beam, p(r) proportional to r
  kLineBased,       // beams indexed whole, scored by weighted line kernel
};

struct SamplingConfig {
  FreeSpaceStrategy strategy = FreeSpaceStrategy::kNone;
  double gap = 1.0;            // EvenlySpaced
  int count_per_beam = 1;      // UniformRandom / LinearWeighted
  BeamWeighting weighting = BeamWeighting::kBilinear;  // LineBased
  std::uint64_t rng_seed = 0;

  void validate() const {
    if (strategy == FreeSpaceStrategy::kEvenlySpaced && !(gap > 0.0)) {
      throw std::invalid_argument("free space: gap must be > 0");
    }
    if ((strategy == FreeSpaceStrategy::kUniformRandom ||
         strategy == FreeSpaceStrategy::kLinearWeighted) &&
        count_per_beam < 1) {
      throw std::invalid_argument("free space: count_per_beam must be >= 1");
    }
  }
};

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace detail

/// Deterministic per-beam random stream, derived from (seed, beam index) so
/// beams can be sampled in parallel or in any order with identical results.
class BeamRng {
 public:
  BeamRng(std::uint64_t seed, std::uint64_t beam_index) {
    state_ = seed ^ 0x2545f4914f6cdd1dULL;
    detail::splitmix64(state_);
    state_ ^= beam_index * 0x9e3779b97f4a7c15ULL;
    detail::splitmix64(state_);
  }

  std::uint64_t next_u64() { return detail::splitmix64(state_); }

  /// Uniform double in the open interval (0, 1).
  double next_open01() {
    return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
  }

 private:
  std::uint64_t state_;
};

/// Inverse CDF of p(r) proportional to r on (0, r_max): r = r_max * sqrt(u).
template <typename Scalar>
Scalar linear_weighted_radius(Scalar u, Scalar r_max) {
  return r_max * std::sqrt(u);
}

namespace detail {

template <typename Scalar>
FreeSample<Scalar> sample_at(const Beam<Scalar>& beam, Scalar r,
                             std::uint32_t beam_index) {
  const Scalar t = r / beam.range();
  return {beam.origin + t * (beam.endpoint - beam.origin), beam_index,
          Scalar(1)};
}

}  // namespace detail

/// Points at ranges gap, 2*gap, ... strictly below the beam range.
template <typename Scalar>
std::vector<FreeSample<Scalar>> sample_evenly(const Beam<Scalar>& beam,
                                              Scalar gap,
                                              std::uint32_t beam_index = 0) {
  std::vector<FreeSample<Scalar>> samples;
  const Scalar range = beam.range();
  auto n = static_cast<long>(std::floor(range / gap));
  while (n > 0 && static_cast<Scalar>(n) * gap >= range) --n;
  samples.reserve(static_cast<std::size_t>(std::max(n, 0L)));
  for (long k = 1; k <= n; ++k) {
    samples.push_back(detail::sample_at(beam, static_cast<Scalar>(k) * gap,
                                        beam_index));
  }
  return samples;
}

/// Fixed count of samples with r ~ U(0, range), endpoints excluded.
template <typename Scalar>
std::vector<FreeSample<Scalar>> sample_uniform(const Beam<Scalar>& beam,
                                               int count, BeamRng& rng,
                                               std::uint32_t beam_index = 0) {
  std::vector<FreeSample<Scalar>> samples;
  samples.reserve(static_cast<std::size_t>(count));
  for (int k = 0; k < count; ++k) {
    const Scalar r = static_cast<Scalar>(rng.next_open01()) * beam.range();
    samples.push_back(detail::sample_at(beam, r, beam_index));
  }
  return samples;
}

/// Fixed count of samples with p(r) proportional to r (Theorem-style
/// linear-weighted sampling), endpoints excluded.
template <typename Scalar>
std::vector<FreeSample<Scalar>> sample_linear_weighted(
    const Beam<Scalar>& beam, int count, BeamRng& rng,
    std::uint32_t beam_index = 0) {
  std::vector<FreeSample<Scalar>> samples;
  samples.reserve(static_cast<std::size_t>(count));
  for (int k = 0; k < count; ++k) {
    const Scalar r = linear_weighted_radius(
        static_cast<Scalar>(rng.next_open01()), beam.range());
    samples.push_back(detail::sample_at(beam, r, beam_index));
  }
  return samples;
}

/// Free-space evidence for one scan: sampled points for the point
/// strategies, or a spherical beam index for the line-based one.
template <typename Scalar>
struct FreeSpaceData {
  std::vector<FreeSample<Scalar>> samples;
  std::optional<SphericalRTree<Scalar>> beam_index;
  BeamWeighting weighting = BeamWeighting::kBilinear;

  bool line_based() const { return beam_index.has_value(); }
};

using FreeSpaceDatad = FreeSpaceData<double>;

/// Builds free-space training data for a scan under the configured strategy.
/// All beams must share one sensor origin (enforced for the line-based
/// index, which is keyed about it).
template <typename Scalar>
FreeSpaceData<Scalar> build_free_space(std::span<const Beam<Scalar>> scan,
                                       const SamplingConfig& cfg,
                                       Scalar rtree_inflation = Scalar(1.1)) {
  cfg.validate();
  FreeSpaceData<Scalar> data;
  data.weighting = cfg.weighting;

  switch (cfg.strategy) {
    case FreeSpaceStrategy::kNone:
      break;
    case FreeSpaceStrategy::kEvenlySpaced:
      for (std::uint32_t i = 0; i < scan.size(); ++i) {
        auto s = sample_evenly(scan[i], static_cast<Scalar>(cfg.gap), i);
        data.samples.insert(data.samples.end(), s.begin(), s.end());
      }
      break;
    case FreeSpaceStrategy::kUniformRandom:
      data.samples.reserve(scan.size() * cfg.count_per_beam);
      for (std::uint32_t i = 0; i < scan.size(); ++i) {
        BeamRng rng(cfg.rng_seed, i);
        auto s = sample_uniform(scan[i], cfg.count_per_beam, rng, i);
        data.samples.insert(data.samples.end(), s.begin(), s.end());
      }
      break;
    case FreeSpaceStrategy::kLinearWeighted:
      data.samples.reserve(scan.size() * cfg.count_per_beam);
      for (std::uint32_t i = 0; i < scan.size(); ++i) {
        BeamRng rng(cfg.rng_seed, i);
        auto s = sample_linear_weighted(scan[i], cfg.count_per_beam, rng, i);
        data.samples.insert(data.samples.end(), s.begin(), s.end());
      }
      break;
    case FreeSpaceStrategy::kLineBased: {
      const Point3<Scalar> origin =
          scan.empty() ? Point3<Scalar>::Zero() : scan[0].origin;
      data.beam_index.emplace(scan, origin, rtree_inflation);
      break;
    }
  }
  return data;
}

}  // namespace bkimap
