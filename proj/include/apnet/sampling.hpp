#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <unordered_map>
#include <vector>

#include "apnet/cloud.hpp"

namespace apnet {

namespace sampling_detail {

struct CellKey {
  std::int64_t x = 0, y = 0, z = 0;
  bool operator==(const CellKey&) const = default;
};

struct CellKeyHash {
  std::size_t operator()(const CellKey& k) const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (std::uint64_t v : {std::uint64_t(k.x), std::uint64_t(k.y), std::uint64_t(k.z)}) {
      h ^= v + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
    }
    return std::size_t(h);
  }
};

inline std::int64_t cell_coord(double v, double size) {
  return std::int64_t(std::floor(v / size));
}

inline CellKey cell_of(const Point3& p, double size) {
  return {cell_coord(p.x, size), cell_coord(p.y, size), cell_coord(p.z, size)};
}

}  // namespace sampling_detail

// Barycenter cloud plus the cell correspondence back to the original points.
// Cells are cubes of side `grid_size` anchored at the world origin, so cell
// assignment does not depend on any crop window.
struct DownsampledCloud {
  std::vector<Point3> barycenters;
  std::vector<Color3> colors;
  std::vector<int> labels;                  // modal member label per cell (empty if unlabeled)
  std::vector<std::size_t> cell_of_original;  // original point index -> barycenter index
  std::vector<std::size_t> member_count;      // points per cell
  double grid_size = 0.0;
  int class_count = 0;
  bool has_labels = false;

  std::size_t size() const { return barycenters.size(); }

  LabeledPointCloud as_cloud() const {
    LabeledPointCloud c;
    c.positions = barycenters;
    c.colors = colors;
    c.class_count = class_count;
    if (has_labels) c.labels = labels;
    return c;
  }
};

inline DownsampledCloud grid_downsample(const LabeledPointCloud& cloud, double d) {
  using namespace sampling_detail;
  APNET_REQUIRE(d > 0.0, "grid_downsample: grid size must be positive, got ", d);

  DownsampledCloud out;
  out.grid_size = d;
  out.class_count = cloud.class_count;
  out.has_labels = cloud.has_labels();
  out.cell_of_original.resize(cloud.size());

  std::unordered_map<CellKey, std::size_t, CellKeyHash> slot_of;
  slot_of.reserve(cloud.size());

  std::vector<std::vector<int>> label_hist;  // per slot, when labelled
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const CellKey key = cell_of(cloud.positions[i], d);
    auto [it, inserted] = slot_of.try_emplace(key, out.barycenters.size());
    const std::size_t slot = it->second;
    if (inserted) {
      out.barycenters.push_back({0, 0, 0});
      out.colors.push_back({0, 0, 0});
      out.member_count.push_back(0);
      if (out.has_labels) label_hist.emplace_back(std::size_t(cloud.class_count), 0);
    }
    out.cell_of_original[i] = slot;
    out.member_count[slot] += 1;
    out.barycenters[slot].x += cloud.positions[i].x;
    out.barycenters[slot].y += cloud.positions[i].y;
    out.barycenters[slot].z += cloud.positions[i].z;
    out.colors[slot].r += cloud.colors[i].r;
    out.colors[slot].g += cloud.colors[i].g;
    out.colors[slot].b += cloud.colors[i].b;
    if (out.has_labels) label_hist[slot][std::size_t((*cloud.labels)[i])] += 1;
  }

  for (std::size_t s = 0; s < out.size(); ++s) {
    const double inv = 1.0 / double(out.member_count[s]);
    out.barycenters[s].x *= inv;
    out.barycenters[s].y *= inv;
    out.barycenters[s].z *= inv;
    out.colors[s].r *= inv;
    out.colors[s].g *= inv;
    out.colors[s].b *= inv;
  }

  if (out.has_labels) {
    out.labels.resize(out.size());
    for (std::size_t s = 0; s < out.size(); ++s) {
      // modal member label, ties to the smallest class index
      int best = 0, best_count = -1;
      for (int c = 0; c < cloud.class_count; ++c) {
        if (label_hist[s][std::size_t(c)] > best_count) {
          best = c;
          best_count = label_hist[s][std::size_t(c)];
        }
      }
      out.labels[s] = best;
    }
  }
  return out;
}

// Hash-grid over a fixed set of support points. Buckets have side
// `cell_size`; with cell_size equal to the query radius a radius query
// touches at most 27 buckets. Queries are read-only after construction.
class SpatialIndex {
 public:
  SpatialIndex() = default;

  SpatialIndex(const std::vector<Point3>& points, double cell_size)
      : points_(points), cell_(cell_size) {
    using namespace sampling_detail;
    APNET_REQUIRE(cell_size > 0.0, "SpatialIndex: cell size must be positive");
    buckets_.reserve(points.size());
    for (std::size_t i = 0; i < points_.size(); ++i) {
      const CellKey key = cell_of(points_[i], cell_);
      buckets_[key].push_back(i);
      min_cell_ = {std::min(min_cell_.x, key.x), std::min(min_cell_.y, key.y),
                   std::min(min_cell_.z, key.z)};
      max_cell_ = {std::max(max_cell_.x, key.x), std::max(max_cell_.y, key.y),
                   std::max(max_cell_.z, key.z)};
    }
  }

  std::size_t size() const { return points_.size(); }
  const std::vector<Point3>& points() const { return points_; }
  double cell_size() const { return cell_; }

  // All support points within Euclidean distance r (inclusive), sorted by
  // distance then index, truncated to the `cap` nearest.
  std::vector<std::size_t> radius_neighbors(const Point3& query, double r,
                                            std::size_t cap = std::numeric_limits<std::size_t>::max()) const {
    using namespace sampling_detail;
    APNET_REQUIRE(r >= 0.0, "radius_neighbors: radius must be non-negative, got ", r);
    if (points_.empty() || cap == 0) return {};

    std::vector<std::pair<double, std::size_t>> hits;  // (dist^2, index)
    const std::int64_t x0 = cell_coord(query.x - r, cell_), x1 = cell_coord(query.x + r, cell_);
    const std::int64_t y0 = cell_coord(query.y - r, cell_), y1 = cell_coord(query.y + r, cell_);
    const std::int64_t z0 = cell_coord(query.z - r, cell_), z1 = cell_coord(query.z + r, cell_);
    const double r2 = r * r;
    for (std::int64_t cx = x0; cx <= x1; ++cx) {
      for (std::int64_t cy = y0; cy <= y1; ++cy) {
        for (std::int64_t cz = z0; cz <= z1; ++cz) {
          const auto it = buckets_.find(CellKey{cx, cy, cz});
          if (it == buckets_.end()) continue;
          for (std::size_t i : it->second) {
            const double d2 = dist2(points_[i], query);
            if (d2 <= r2) hits.emplace_back(d2, i);
          }
        }
      }
    }
    std::sort(hits.begin(), hits.end());
    if (hits.size() > cap) hits.resize(cap);
    std::vector<std::size_t> out;
    out.reserve(hits.size());
    for (const auto& [d2, i] : hits) out.push_back(i);
    return out;
  }

  // Index of the closest support point; distance ties resolve to the
  // smallest index. Searches outward ring by ring over the hash grid.
  std::size_t nearest_neighbor(const Point3& query) const {
    using namespace sampling_detail;
    APNET_REQUIRE(!points_.empty(), "nearest_neighbor: empty index");

    const CellKey qc = cell_of(query, cell_);
    const std::int64_t k_max =
        std::max({std::llabs(qc.x - min_cell_.x), std::llabs(max_cell_.x - qc.x),
                  std::llabs(qc.y - min_cell_.y), std::llabs(max_cell_.y - qc.y),
                  std::llabs(qc.z - min_cell_.z), std::llabs(max_cell_.z - qc.z)});

    double best_d2 = std::numeric_limits<double>::infinity();
    std::size_t best = std::numeric_limits<std::size_t>::max();
    for (std::int64_t k = 0; k <= k_max; ++k) {
      // Every cell in ring k holds points at distance >= (k-1)*cell.
      if (best != std::numeric_limits<std::size_t>::max()) {
        const double ring_min = double(k - 1) * cell_;
        if (ring_min > 0.0 && ring_min * ring_min > best_d2) break;
      }
      visit_ring(qc, k, [&](const CellKey& key) {
        const auto it = buckets_.find(key);
        if (it == buckets_.end()) return;
        for (std::size_t i : it->second) {
          const double d2 = dist2(points_[i], query);
          if (d2 < best_d2 || (d2 == best_d2 && i < best)) {
            best_d2 = d2;
            best = i;
          }
        }
      });
    }
    return best;
  }

 private:
  static double dist2(const Point3& a, const Point3& b) {
    const double dx = a.x - b.x, dy = a.y - b.y, dz = a.z - b.z;
    return dx * dx + dy * dy + dz * dz;
  }

  template <typename Fn>
  void visit_ring(const sampling_detail::CellKey& center, std::int64_t k, Fn&& fn) const {
    using sampling_detail::CellKey;
    if (k == 0) {
      fn(center);
      return;
    }
    for (std::int64_t dx = -k; dx <= k; ++dx) {
      for (std::int64_t dy = -k; dy <= k; ++dy) {
        for (std::int64_t dz = -k; dz <= k; ++dz) {
          if (std::max({std::llabs(dx), std::llabs(dy), std::llabs(dz)}) != k) continue;
          fn(CellKey{center.x + dx, center.y + dy, center.z + dz});
        }
      }
    }
  }

  std::vector<Point3> points_;
  double cell_ = 1.0;
  std::unordered_map<sampling_detail::CellKey, std::vector<std::size_t>,
                     sampling_detail::CellKeyHash>
      buckets_;
  sampling_detail::CellKey min_cell_{std::numeric_limits<std::int64_t>::max(),
                                     std::numeric_limits<std::int64_t>::max(),
                                     std::numeric_limits<std::int64_t>::max()};
  sampling_detail::CellKey max_cell_{std::numeric_limits<std::int64_t>::min(),
                                     std::numeric_limits<std::int64_t>::min(),
                                     std::numeric_limits<std::int64_t>::min()};
};

}  // namespace apnet
