#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <unordered_map>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include <Eigen/Core>

#include "bkimap/free_space.hpp"
#include "bkimap/geometry.hpp"
#include "bkimap/kernel.hpp"
#include "bkimap/spherical_rtree.hpp"

namespace bkimap {

struct VoxelKey {
  std::int32_t x = 0, y = 0, z = 0;
  bool operator==(const VoxelKey&) const = default;
};

struct BlockKey {
  std::int32_t x = 0, y = 0, z = 0;
  bool operator==(const BlockKey&) const = default;
  bool operator<(const BlockKey& o) const {
    if (x != o.x) return x < o.x;
    if (y != o.y) return y < o.y;
    return z < o.z;
  }
};

struct BlockKeyHash {
  std::size_t operator()(const BlockKey& k) const {
    std::uint64_t h = static_cast<std::uint32_t>(k.x);
    h = h * 0x9e3779b97f4a7c15ULL + static_cast<std::uint32_t>(k.y);
    h = h * 0x9e3779b97f4a7c15ULL + static_cast<std::uint32_t>(k.z);
    h ^= h >> 29;
    return static_cast<std::size_t>(h * 0xbf58476d1ce4e5b9ULL);
  }
};

inline std::int32_t floor_div(std::int32_t a, std::int32_t b) {
  std::int32_t q = a / b;
  if ((a % b != 0) && ((a < 0) != (b < 0))) --q;
  return q;
}

template <typename Scalar>
struct MapConfig {
  Scalar resolution = Scalar(0.3);      // voxel edge [m]
  KernelParams<Scalar> kernel;          // sparse kernel length / scale
  Scalar prior_alpha = Scalar(0.001);   // symmetric Dirichlet prior per class
  int num_classes = 19;                 // semantic classes, excluding free
  int block_size = 8;                   // voxels per block edge
  SamplingConfig free_space;
  Scalar downsample_leaf = Scalar(0.3);
  Scalar rtree_inflation = Scalar(1.1);
  int threads = 0;                      // 0 = runtime default

  void validate() const {
    if (!(resolution > Scalar(0))) throw std::invalid_argument("map: resolution must be > 0");
    if (!(kernel.length > Scalar(0))) throw std::invalid_argument("map: kernel length must be > 0");
    if (!(kernel.scale > Scalar(0))) throw std::invalid_argument("map: kernel scale must be > 0");
    if (!(prior_alpha > Scalar(0))) throw std::invalid_argument("map: prior must be > 0");
    if (num_classes < 1) throw std::invalid_argument("map: num_classes must be >= 1");
    if (block_size < 1) throw std::invalid_argument("map: block_size must be >= 1");
    if (!(downsample_leaf > Scalar(0))) throw std::invalid_argument("map: downsample leaf must be > 0");
    free_space.validate();
  }
};

using MapConfigd = MapConfig<double>;

/// One sensor frame: shared origin plus semantically labeled hits.
template <typename Scalar>
struct Frame {
  Point3<Scalar> origin = Point3<Scalar>::Zero();
  std::vector<LabeledPoint<Scalar>> hits;
};

using Framed = Frame<double>;

/// A training sample after downsampling: hit (label >= 1) or free (label 0).
template <typename Scalar>
struct TrainingPoint {
  Point3<Scalar> position;
  std::uint16_t label = 0;
  Scalar weight = Scalar(1);
};

struct UpdateStats {
  std::size_t input_points = 0;
  std::size_t training_hits = 0;
  std::size_t free_samples = 0;
  std::size_t training_blocks = 0;
  std::size_t test_blocks = 0;
  std::size_t swept_blocks = 0;  // blocks receiving line-based free evidence
  std::size_t created_blocks = 0;
  std::size_t degenerate_beams = 0;
};

template <typename Scalar>
struct CellEstimate {
  Eigen::Vector<Scalar, Eigen::Dynamic> probabilities;  // length C+1, index 0 free
  int predicted_class = 0;
  bool occupied = false;
};

/// Voxel-grid downsampling: one representative per leaf, at the centroid of
/// the leaf's points, labeled with the leaf's majority label (ties go to the
/// smallest class id). Output order follows first touch of each leaf.
template <typename Scalar>
std::vector<LabeledPoint<Scalar>> downsample(
    std::span<const LabeledPoint<Scalar>> points, Scalar leaf) {
  if (!(leaf > Scalar(0))) throw std::invalid_argument("downsample: leaf must be > 0");

  struct LeafAcc {
    Point3<Scalar> sum = Point3<Scalar>::Zero();
    std::uint32_t count = 0;
    std::vector<std::pair<std::uint16_t, std::uint32_t>> labels;
  };
  struct VKeyHash {
    std::size_t operator()(const VoxelKey& k) const {
      return BlockKeyHash{}(BlockKey{k.x, k.y, k.z});
    }
  };

  std::unordered_map<VoxelKey, std::uint32_t, VKeyHash> index;
  std::vector<LeafAcc> leaves;
  index.reserve(points.size());

  for (const auto& p : points) {
    const VoxelKey key{
        static_cast<std::int32_t>(std::floor(p.position.x() / leaf)),
        static_cast<std::int32_t>(std::floor(p.position.y() / leaf)),
        static_cast<std::int32_t>(std::floor(p.position.z() / leaf))};
    auto [it, inserted] = index.emplace(key, static_cast<std::uint32_t>(leaves.size()));
    if (inserted) leaves.emplace_back();
    LeafAcc& acc = leaves[it->second];
    acc.sum += p.position;
    ++acc.count;
    bool found = false;
    for (auto& lc : acc.labels) {
      if (lc.first == p.label) {
        ++lc.second;
        found = true;
        break;
      }
    }
    if (!found) acc.labels.emplace_back(p.label, 1);
  }

  std::vector<LabeledPoint<Scalar>> out;
  out.reserve(leaves.size());
  for (const auto& acc : leaves) {
    std::uint16_t best = 0;
    std::uint32_t best_count = 0;
    for (const auto& [label, count] : acc.labels) {
      if (count > best_count || (count == best_count && label < best)) {
        best = label;
        best_count = count;
      }
    }
    out.push_back({acc.sum / Scalar(acc.count), best});
  }
  return out;
}

using TrainingBuckets =
    std::unordered_map<BlockKey, std::vector<std::uint32_t>, BlockKeyHash>;

/// Buckets training samples by containing block in one forward pass; no
/// spatial index involved, O(N) in the sample count.
template <typename Scalar>
TrainingBuckets gather_training(std::span<const TrainingPoint<Scalar>> points,
                                Scalar block_edge) {
  TrainingBuckets buckets;
  buckets.reserve(points.size() / 4 + 1);
  for (std::uint32_t i = 0; i < points.size(); ++i) {
    const auto& p = points[i].position;
    const BlockKey key{
        static_cast<std::int32_t>(std::floor(p.x() / block_edge)),
        static_cast<std::int32_t>(std::floor(p.y() / block_edge)),
        static_cast<std::int32_t>(std::floor(p.z() / block_edge))};
    buckets[key].push_back(i);
  }
  return buckets;
}

/// Sparse block-hashed voxel map holding a Dirichlet concentration vector
/// per voxel (index 0 is the free class) and updated frame by frame with
/// Bayesian kernel inference.
template <typename Scalar>
class OccupancyMap {
 public:
  using AlphaBlock = Eigen::Array<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

  struct Block {
    AlphaBlock alpha;  // (C+1) x B^3, column per cell
  };

  explicit OccupancyMap(MapConfig<Scalar> cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    edge_ = cfg_.resolution * Scalar(cfg_.block_size);
    cells_ = cfg_.block_size * cfg_.block_size * cfg_.block_size;
  }

  const MapConfig<Scalar>& config() const { return cfg_; }
  std::size_t num_blocks() const { return blocks_.size(); }
  std::size_t num_voxels() const { return blocks_.size() * cells_; }

  VoxelKey voxel_key_of(const Point3<Scalar>& p) const {
    return {static_cast<std::int32_t>(std::floor(p.x() / cfg_.resolution)),
            static_cast<std::int32_t>(std::floor(p.y() / cfg_.resolution)),
            static_cast<std::int32_t>(std::floor(p.z() / cfg_.resolution))};
  }

  Point3<Scalar> voxel_center(const VoxelKey& v) const {
    return {(Scalar(v.x) + Scalar(0.5)) * cfg_.resolution,
            (Scalar(v.y) + Scalar(0.5)) * cfg_.resolution,
            (Scalar(v.z) + Scalar(0.5)) * cfg_.resolution};
  }

  BlockKey block_of(const VoxelKey& v) const {
    const int b = cfg_.block_size;
    return {floor_div(v.x, b), floor_div(v.y, b), floor_div(v.z, b)};
  }

  /// Test blocks for one frame: the training blocks themselves plus every
  /// already existing block within ceil(l / block_edge) blocks (Chebyshev)
  /// of a training block.
  std::vector<BlockKey> collect_test_blocks(
      std::span<const BlockKey> training_blocks) const {
    const int radius = gather_radius();
    std::vector<BlockKey> result(training_blocks.begin(), training_blocks.end());
    for (const BlockKey& t : training_blocks) {
      for (int dx = -radius; dx <= radius; ++dx)
        for (int dy = -radius; dy <= radius; ++dy)
          for (int dz = -radius; dz <= radius; ++dz) {
            if (dx == 0 && dy == 0 && dz == 0) continue;
            const BlockKey k{t.x + dx, t.y + dy, t.z + dz};
            if (blocks_.count(k)) result.push_back(k);
          }
    }
    std::sort(result.begin(), result.end());
    result.erase(std::unique(result.begin(), result.end()), result.end());
    return result;
  }

  /// Two-phase map update. Phase one gathers training data (downsampled
  /// hits plus free-space evidence) into per-block buckets; phase two runs
  /// kernel inference over every voxel of every test block. Line-based free
  /// evidence additionally sweeps existing blocks within beam reach.
  UpdateStats update(const Frame<Scalar>& frame) {
    if (frame.hits.empty()) throw std::invalid_argument("update: empty scan");
    for (const auto& h : frame.hits) {
      if (!h.position.allFinite()) {
        throw std::invalid_argument("update: non-finite coordinates in scan");
      }
      if (h.position == frame.origin) {
        throw std::invalid_argument("update: zero-length beam in scan");
      }
    }
    if (!frame.origin.allFinite()) {
      throw std::invalid_argument("update: non-finite sensor origin");
    }

    UpdateStats stats;
    stats.input_points = frame.hits.size();

    // Phase one: training data.
    const std::vector<LabeledPoint<Scalar>> hits =
        downsample<Scalar>(frame.hits, cfg_.downsample_leaf);

    std::vector<Beam<Scalar>> beams;
    beams.reserve(hits.size());
    for (const auto& h : hits) {
      if (auto b = Beam<Scalar>::make(frame.origin, h.position, h.label)) {
        beams.push_back(std::move(*b));
      } else {
        ++stats.degenerate_beams;  // centroid collapsed onto the origin
      }
    }

    FreeSpaceData<Scalar> free = build_free_space<Scalar>(
        beams, cfg_.free_space, cfg_.rtree_inflation);

    std::vector<TrainingPoint<Scalar>> training;
    training.reserve(hits.size() + free.samples.size());
    for (const auto& h : hits) {
      training.push_back({h.position, h.label, Scalar(1)});
    }
    stats.training_hits = training.size();
    if (!free.samples.empty()) {
      std::vector<LabeledPoint<Scalar>> free_points;
      free_points.reserve(free.samples.size());
      for (const auto& s : free.samples) free_points.push_back({s.position, 0});
      for (const auto& p :
           downsample<Scalar>(free_points, cfg_.downsample_leaf)) {
        training.push_back({p.position, 0, Scalar(1)});
      }
    }
    stats.free_samples = training.size() - stats.training_hits;

    const TrainingBuckets buckets = gather_training<Scalar>(training, edge_);
    std::vector<BlockKey> training_keys;
    training_keys.reserve(buckets.size());
    for (const auto& [key, _] : buckets) training_keys.push_back(key);
    std::sort(training_keys.begin(), training_keys.end());
    stats.training_blocks = training_keys.size();

    // Phase two: targets = test blocks, plus (line-based only) existing
    // blocks within reach of this frame's beams.
    std::vector<BlockKey> targets = collect_test_blocks(training_keys);
    stats.test_blocks = targets.size();

    if (free.line_based() && !beams.empty()) {
      Scalar max_range = 0;
      for (const auto& b : beams) max_range = std::max(max_range, b.range());
      const Scalar reach = max_range + cfg_.kernel.length +
                           edge_ * Scalar(std::sqrt(3.0) / 2.0);
      const Scalar reach2 = reach * reach;
      for (const auto& [key, block] : blocks_) {
        const Point3<Scalar> center{(Scalar(key.x) + Scalar(0.5)) * edge_,
                                    (Scalar(key.y) + Scalar(0.5)) * edge_,
                                    (Scalar(key.z) + Scalar(0.5)) * edge_};
        if ((center - frame.origin).squaredNorm() <= reach2) {
          targets.push_back(key);
        }
      }
      std::sort(targets.begin(), targets.end());
      targets.erase(std::unique(targets.begin(), targets.end()), targets.end());
    }
    stats.swept_blocks = targets.size();

    // Materialize target blocks before the parallel phase; the hash map is
    // read-only during inference.
    std::vector<Block*> target_blocks(targets.size());
    for (std::size_t i = 0; i < targets.size(); ++i) {
      auto [it, inserted] = blocks_.try_emplace(targets[i]);
      if (inserted) {
        it->second.alpha =
            AlphaBlock::Constant(cfg_.num_classes + 1, cells_, cfg_.prior_alpha);
        ++stats.created_blocks;
      }
      target_blocks[i] = &it->second;
    }

    const auto n_targets = static_cast<std::int64_t>(targets.size());
#ifdef _OPENMP
    const int nt = cfg_.threads > 0 ? cfg_.threads : omp_get_max_threads();
#pragma omp parallel for schedule(dynamic) num_threads(nt)
#endif
    for (std::int64_t i = 0; i < n_targets; ++i) {
      infer_block(targets[i], *target_blocks[i], training, buckets, beams, free);
    }
    return stats;
  }

  /// Posterior of the voxel containing `position`. Untouched voxels report
  /// the symmetric prior (uniform probabilities, predicted free).
  CellEstimate<Scalar> query(const Point3<Scalar>& position) const {
    const int n = cfg_.num_classes + 1;
    CellEstimate<Scalar> est;
    const VoxelKey v = voxel_key_of(position);
    const auto it = blocks_.find(block_of(v));
    if (it == blocks_.end()) {
      est.probabilities =
          Eigen::Vector<Scalar, Eigen::Dynamic>::Constant(n, Scalar(1) / Scalar(n));
      est.predicted_class = 0;
      est.occupied = false;
      return est;
    }
    const auto col = it->second.alpha.col(cell_index(v));
    est.probabilities = (col / col.sum()).matrix();
    est.predicted_class = predicted_class(col);
    est.occupied = est.predicted_class != 0;
    return est;
  }

  /// Number of existing voxels whose predicted class equals `cls`.
  std::size_t count_class_nodes(int cls) const {
    std::size_t count = 0;
    for (const auto& [key, block] : blocks_) {
      for (int c = 0; c < cells_; ++c) {
        if (predicted_class(block.alpha.col(c)) == cls) ++count;
      }
    }
    return count;
  }

  /// Argmax with free (class 0) winning ties against any semantic class.
  template <typename Derived>
  int predicted_class(const Eigen::ArrayBase<Derived>& alpha) const {
    int best = 1;
    Scalar best_val = alpha[1];
    for (int c = 2; c <= cfg_.num_classes; ++c) {
      if (alpha[c] > best_val) {
        best_val = alpha[c];
        best = c;
      }
    }
    return alpha[0] >= best_val ? 0 : best;
  }

  std::optional<Eigen::Vector<Scalar, Eigen::Dynamic>> alpha_at(
      const VoxelKey& v) const {
    const auto it = blocks_.find(block_of(v));
    if (it == blocks_.end()) return std::nullopt;
    return it->second.alpha.col(cell_index(v)).matrix().eval();
  }

  bool has_block(const BlockKey& k) const { return blocks_.count(k) != 0; }

  std::vector<BlockKey> block_keys_sorted() const {
    std::vector<BlockKey> keys;
    keys.reserve(blocks_.size());
    for (const auto& [key, _] : blocks_) keys.push_back(key);
    std::sort(keys.begin(), keys.end());
    return keys;
  }

  /// Visits every existing voxel in deterministic (sorted) order.
  /// Visitor signature: void(const VoxelKey&, const auto& alpha_column).
  template <typename Visitor>
  void for_each_cell_sorted(Visitor&& visit) const {
    const int b = cfg_.block_size;
    for (const BlockKey& key : block_keys_sorted()) {
      const Block& block = blocks_.at(key);
      for (int c = 0; c < cells_; ++c) {
        const VoxelKey v{key.x * b + c / (b * b), key.y * b + (c / b) % b,
                         key.z * b + c % b};
        visit(v, block.alpha.col(c));
      }
    }
  }

  int gather_radius() const {
    return static_cast<int>(std::ceil(cfg_.kernel.length / edge_));
  }

 private:
  int cell_index(const VoxelKey& v) const {
    const int b = cfg_.block_size;
    const int lx = v.x - floor_div(v.x, b) * b;
    const int ly = v.y - floor_div(v.y, b) * b;
    const int lz = v.z - floor_div(v.z, b) * b;
    return (lx * b + ly) * b + lz;
  }

  void infer_block(const BlockKey& key, Block& block,
                   const std::vector<TrainingPoint<Scalar>>& training,
                   const TrainingBuckets& buckets,
                   const std::vector<Beam<Scalar>>& beams,
                   const FreeSpaceData<Scalar>& free) const {
    const int b = cfg_.block_size;
    const Scalar l = cfg_.kernel.length;
    const Scalar l2 = l * l;

    // Candidate samples: buckets of all blocks within kernel reach, merged
    // and sorted so every voxel accumulates in one fixed global order.
    const int radius = gather_radius();
    std::vector<std::uint32_t> candidates;
    for (int dx = -radius; dx <= radius; ++dx)
      for (int dy = -radius; dy <= radius; ++dy)
        for (int dz = -radius; dz <= radius; ++dz) {
          const auto it = buckets.find({key.x + dx, key.y + dy, key.z + dz});
          if (it != buckets.end()) {
            candidates.insert(candidates.end(), it->second.begin(),
                              it->second.end());
          }
        }
    std::sort(candidates.begin(), candidates.end());

    std::vector<std::uint32_t> beam_candidates;
    bool sweep_beams = false;
    if (free.line_based() && !free.beam_index->empty()) {
      // One coarse query for the whole block; per-voxel queries only run if
      // any beam comes near the block at all.
      const Point3<Scalar> block_center{(Scalar(key.x) + Scalar(0.5)) * edge_,
                                        (Scalar(key.y) + Scalar(0.5)) * edge_,
                                        (Scalar(key.z) + Scalar(0.5)) * edge_};
      const Scalar block_reach = l + edge_ * Scalar(std::sqrt(3.0) / 2.0);
      free.beam_index->query_near(block_center, block_reach, beam_candidates);
      sweep_beams = !beam_candidates.empty();
    }
    if (candidates.empty() && !sweep_beams) return;

    std::vector<std::uint32_t> voxel_beams;
    for (int c = 0; c < cells_; ++c) {
      const VoxelKey v{key.x * b + c / (b * b), key.y * b + (c / b) % b,
                       key.z * b + c % b};
      const Point3<Scalar> center = voxel_center(v);
      auto alpha = block.alpha.col(c);

      for (const std::uint32_t idx : candidates) {
        const TrainingPoint<Scalar>& tp = training[idx];
        const Scalar d2 = (tp.position - center).squaredNorm();
        if (d2 < l2) {
          alpha[tp.label] +=
              tp.weight * sparse_kernel(std::sqrt(d2), cfg_.kernel);
        }
      }

      if (sweep_beams) {
        voxel_beams.clear();
        if (auto q = to_spherical(free.beam_index->origin(), center)) {
          free.beam_index->query(
              make_query_box(*q, l, free.beam_index->inflation()), voxel_beams);
        } else {
          for (std::uint32_t i = 0; i < beams.size(); ++i) {
            voxel_beams.push_back(i);  // voxel center at the sensor origin
          }
        }
        Scalar acc = 0;
        for (const std::uint32_t idx : voxel_beams) {
          acc += weighted_line_kernel(center, beams[idx], cfg_.kernel,
                                      free.weighting);
        }
        alpha[0] += acc;
      }
    }
  }

  MapConfig<Scalar> cfg_;
  Scalar edge_ = Scalar(0);  // block edge length [m]
  int cells_ = 0;            // voxels per block
  std::unordered_map<BlockKey, Block, BlockKeyHash> blocks_;
};

using OccupancyMapd = OccupancyMap<double>;

}  // namespace bkimap
