#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "bkimap/geometry.hpp"

namespace bkimap {

/// Search region in (r, phi, theta) space. The radial extent is always
/// [r_lo, infinity); azimuth is one interval, or two when the region wraps
/// past +-pi; elevation is a single interval clamped to [-pi/2, pi/2].
template <typename Scalar>
struct QueryBox {
  struct Interval {
    Scalar lo, hi;
    bool contains(Scalar x) const { return x >= lo && x <= hi; }
    bool overlaps(Scalar a, Scalar b) const { return a <= hi && b >= lo; }
  };

  Scalar r_lo = Scalar(0);
  Interval phi[2] = {{-pi_v<Scalar>, pi_v<Scalar>}, {Scalar(0), Scalar(0)}};
  int phi_count = 1;
  Interval theta = {-pi_v<Scalar> / 2, pi_v<Scalar> / 2};

  bool contains(Scalar r, Scalar p, Scalar t) const {
    if (r < r_lo || !theta.contains(t)) return false;
    if (phi[0].contains(p)) return true;
    return phi_count == 2 && phi[1].contains(p);
  }

  bool overlaps_phi(Scalar lo, Scalar hi) const {
    if (phi[0].overlaps(lo, hi)) return true;
    return phi_count == 2 && phi[1].overlaps(lo, hi);
  }
};

/// Builds the search box guaranteed to contain the endpoint coordinates of
/// every beam whose segment passes within `l` of the query point.
///
/// For a beam through the origin, a segment distance below l bounds the
/// angle gamma between the query direction and the beam direction by
/// sin(gamma) < l / r_q. The box therefore uses the exact spherical-cap
/// extents asin(l'/r_q) in elevation and asin((l'/r_q)/cos(theta_q)) in
/// azimuth (full circle when the cap touches a pole), with l' = inflation*l.
/// The radial lower bound is r_q - l': an endpoint closer to the origin
/// than that cannot have its segment reach the query point.
///
/// Queries closer to the origin than l' degenerate to the full sphere.
template <typename Scalar>
QueryBox<Scalar> make_query_box(const SphericalCoord<Scalar>& q, Scalar l,
                                Scalar inflation) {
  using Box = QueryBox<Scalar>;
  constexpr Scalar kPi = pi_v<Scalar>;
  const Scalar reach = inflation * l;

  Box box;
  if (!(q.r > reach)) {
    return box;  // full sphere, r_lo = 0
  }
  box.r_lo = q.r - reach;

  const Scalar ratio = reach / q.r;  // in (0, 1]
  const Scalar half_theta = std::asin(ratio);
  box.theta = {std::max(q.theta - half_theta, -kPi / 2),
               std::min(q.theta + half_theta, kPi / 2)};

  if (std::abs(q.theta) + half_theta >= kPi / 2) {
    return box;  // cap touches a pole: keep the full azimuth circle
  }

  // cos(theta_q) > sin(half_theta) here, so the argument stays below 1.
  const Scalar half_phi = std::asin(ratio / std::cos(q.theta));
  const Scalar lo = q.phi - half_phi;
  const Scalar hi = q.phi + half_phi;
  if (hi >= kPi) {
    box.phi[0] = {lo, kPi};
    box.phi[1] = {-kPi, hi - 2 * kPi};
    box.phi_count = 2;
  } else if (lo < -kPi) {
    box.phi[0] = {-kPi, hi};
    box.phi[1] = {lo + 2 * kPi, kPi};
    box.phi_count = 2;
  } else {
    box.phi[0] = {lo, hi};
    box.phi_count = 1;
  }
  return box;
}

/// R-tree over the beams of one scan, keyed by the spherical coordinates of
/// each beam endpoint about the shared sensor origin. Bulk-loaded with
/// sort-tile-recursive packing; immutable after construction, so concurrent
/// queries need no synchronization.
template <typename Scalar>
class SphericalRTree {
 public:
  static constexpr int kNodeCapacity = 16;

  SphericalRTree() = default;

  /// Bulk-loads the index. All beams must share `origin` exactly.
  SphericalRTree(std::span<const Beam<Scalar>> beams,
                 const Point3<Scalar>& origin,
                 Scalar inflation = Scalar(1.1))
      : origin_(origin), inflation_(inflation) {
    entries_.reserve(beams.size());
    for (std::size_t i = 0; i < beams.size(); ++i) {
      if (beams[i].origin != origin) {
        throw std::invalid_argument(
            "SphericalRTree: beam origin differs from index origin");
      }
      const auto& s = beams[i].spherical;
      entries_.push_back({s.r, s.phi, s.theta, static_cast<std::uint32_t>(i)});
    }
    pack();
  }

  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  int height() const { return height_; }
  const Point3<Scalar>& origin() const { return origin_; }
  Scalar inflation() const { return inflation_; }

  /// Appends the indices of all entries inside `box` to `out` (unsorted).
  void query(const QueryBox<Scalar>& box, std::vector<std::uint32_t>& out) const {
    if (entries_.empty()) return;
    // Worst case is 1 + 15 * height pending nodes; 256 covers any realistic N.
    std::uint32_t stack[256];
    int top = 0;
    stack[top++] = root_;
    while (top > 0) {
      const Node& node = nodes_[stack[--top]];
      if (node.leaf) {
        for (std::uint32_t i = node.begin; i < node.end; ++i) {
          const Entry& e = entries_[i];
          if (box.contains(e.r, e.phi, e.theta)) {
            out.push_back(e.index);
          }
        }
      } else {
        for (std::uint32_t c = node.begin; c < node.end; ++c) {
          const Node& child = nodes_[c];
          if (child.r_hi >= box.r_lo &&
              box.theta.overlaps(child.theta_lo, child.theta_hi) &&
              box.overlaps_phi(child.phi_lo, child.phi_hi)) {
            stack[top++] = c;
          }
        }
      }
    }
  }

  /// Candidate beams near point `p`: a superset of every beam whose segment
  /// passes within `l` of `p`, sorted by beam index. Extra candidates are
  /// possible and are meant to be removed by an exact distance check.
  void query_near(const Point3<Scalar>& p, Scalar l,
                  std::vector<std::uint32_t>& out) const {
    const auto q = to_spherical(origin_, p);
    // A query at the origin itself touches every beam.
    const QueryBox<Scalar> box =
        q ? make_query_box(*q, l, inflation_) : QueryBox<Scalar>{};
    query(box, out);
    std::sort(out.begin(), out.end());
  }

  std::vector<std::uint32_t> query_near(const Point3<Scalar>& p, Scalar l) const {
    std::vector<std::uint32_t> out;
    query_near(p, l, out);
    return out;
  }

 private:
  struct Entry {
    Scalar r, phi, theta;
    std::uint32_t index;
  };

  struct Node {
    Scalar r_lo, r_hi, phi_lo, phi_hi, theta_lo, theta_hi;
    std::uint32_t begin, end;  // entry range for leaves, child node range otherwise
    bool leaf;
  };

  // Sort-tile-recursive packing: tile entries into phi slabs, theta runs and
  // r-ordered leaves, then group consecutive nodes level by level.
  void pack() {
    nodes_.clear();
    height_ = 0;
    const std::size_t n = entries_.size();
    if (n == 0) return;

    const std::size_t pages = (n + kNodeCapacity - 1) / kNodeCapacity;
    const std::size_t slabs =
        static_cast<std::size_t>(std::ceil(std::cbrt(static_cast<double>(pages))));
    const std::size_t slab_size =
        ((n + slabs - 1) / slabs + kNodeCapacity - 1) / kNodeCapacity * kNodeCapacity;

    std::sort(entries_.begin(), entries_.end(),
              [](const Entry& a, const Entry& b) { return a.phi < b.phi; });
    for (std::size_t s0 = 0; s0 < n; s0 += slab_size) {
      const std::size_t s1 = std::min(s0 + slab_size, n);
      const std::size_t slab_pages = (s1 - s0 + kNodeCapacity - 1) / kNodeCapacity;
      const std::size_t runs = static_cast<std::size_t>(
          std::ceil(std::sqrt(static_cast<double>(slab_pages))));
      const std::size_t run_size =
          ((s1 - s0 + runs - 1) / runs + kNodeCapacity - 1) / kNodeCapacity *
          kNodeCapacity;
      std::sort(entries_.begin() + s0, entries_.begin() + s1,
                [](const Entry& a, const Entry& b) { return a.theta < b.theta; });
      for (std::size_t r0 = s0; r0 < s1; r0 += run_size) {
        const std::size_t r1 = std::min(r0 + run_size, s1);
        std::sort(entries_.begin() + r0, entries_.begin() + r1,
                  [](const Entry& a, const Entry& b) { return a.r < b.r; });
      }
    }

    // Leaf level.
    std::uint32_t level_begin = 0;
    for (std::size_t i = 0; i < n; i += kNodeCapacity) {
      const std::uint32_t end =
          static_cast<std::uint32_t>(std::min(i + kNodeCapacity, n));
      Node node{};
      node.leaf = true;
      node.begin = static_cast<std::uint32_t>(i);
      node.end = end;
      node.r_lo = node.r_hi = entries_[i].r;
      node.phi_lo = node.phi_hi = entries_[i].phi;
      node.theta_lo = node.theta_hi = entries_[i].theta;
      for (std::uint32_t j = node.begin + 1; j < end; ++j) {
        grow(node, entries_[j].r, entries_[j].phi, entries_[j].theta);
      }
      nodes_.push_back(node);
    }
    height_ = 1;

    // Upper levels: group runs of consecutive children.
    while (nodes_.size() - level_begin > 1) {
      const std::uint32_t level_end = static_cast<std::uint32_t>(nodes_.size());
      for (std::uint32_t i = level_begin; i < level_end; i += kNodeCapacity) {
        Node node{};
        node.leaf = false;
        node.begin = i;
        node.end = std::min(i + kNodeCapacity, level_end);
        node.r_lo = nodes_[i].r_lo;
        node.r_hi = nodes_[i].r_hi;
        node.phi_lo = nodes_[i].phi_lo;
        node.phi_hi = nodes_[i].phi_hi;
        node.theta_lo = nodes_[i].theta_lo;
        node.theta_hi = nodes_[i].theta_hi;
        for (std::uint32_t c = node.begin + 1; c < node.end; ++c) {
          node.r_lo = std::min(node.r_lo, nodes_[c].r_lo);
          node.r_hi = std::max(node.r_hi, nodes_[c].r_hi);
          node.phi_lo = std::min(node.phi_lo, nodes_[c].phi_lo);
          node.phi_hi = std::max(node.phi_hi, nodes_[c].phi_hi);
          node.theta_lo = std::min(node.theta_lo, nodes_[c].theta_lo);
          node.theta_hi = std::max(node.theta_hi, nodes_[c].theta_hi);
        }
        nodes_.push_back(node);
      }
      level_begin = level_end;
      ++height_;
    }
    root_ = static_cast<std::uint32_t>(nodes_.size() - 1);
  }

  static void grow(Node& node, Scalar r, Scalar phi, Scalar theta) {
    node.r_lo = std::min(node.r_lo, r);
    node.r_hi = std::max(node.r_hi, r);
    node.phi_lo = std::min(node.phi_lo, phi);
    node.phi_hi = std::max(node.phi_hi, phi);
    node.theta_lo = std::min(node.theta_lo, theta);
    node.theta_hi = std::max(node.theta_hi, theta);
  }

  Point3<Scalar> origin_ = Point3<Scalar>::Zero();
  Scalar inflation_ = Scalar(1.1);
  std::vector<Entry> entries_;
  std::vector<Node> nodes_;
  std::uint32_t root_ = 0;
  int height_ = 0;
};

using SphericalRTreef = SphericalRTree<float>;
using SphericalRTreed = SphericalRTree<double>;

}  // namespace bkimap
