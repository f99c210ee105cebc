#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <vector>

#include "apnet/common.hpp"

namespace apnet {

struct Point3 {
  double x = 0.0, y = 0.0, z = 0.0;
};

struct Color3 {
  double r = 0.0, g = 0.0, b = 0.0;
};

// Colored point cloud with optional per-point class labels.
// positions/colors/labels always share the same length.
struct LabeledPointCloud {
  std::vector<Point3> positions;
  std::vector<Color3> colors;
  std::optional<std::vector<int>> labels;
  int class_count = 0;

  std::size_t size() const { return positions.size(); }
  bool has_labels() const { return labels.has_value(); }

  void validate() const {
    APNET_REQUIRE(colors.size() == positions.size(),
                  "cloud: colors length ", colors.size(),
                  " != positions length ", positions.size());
    if (labels) {
      APNET_REQUIRE(labels->size() == positions.size(),
                    "cloud: labels length ", labels->size(),
                    " != positions length ", positions.size());
      for (std::size_t i = 0; i < labels->size(); ++i) {
        const int l = (*labels)[i];
        APNET_REQUIRE(l >= 0 && l < class_count, "cloud: label ", l,
                      " at point ", i, " outside [0, ", class_count, ")");
      }
    }
    for (std::size_t i = 0; i < positions.size(); ++i) {
      const Point3& p = positions[i];
      APNET_REQUIRE(std::isfinite(p.x) && std::isfinite(p.y) && std::isfinite(p.z),
                    "cloud: non-finite coordinate at point ", i);
    }
  }
};

// Axis-aligned xy region, half-open: [min, max) per axis, so adjacent
// regions partition a scene without duplicating boundary points.
struct BoundingRegion {
  double min_x = 0.0, min_y = 0.0;
  double max_x = 0.0, max_y = 0.0;

  BoundingRegion() = default;
  BoundingRegion(double x0, double y0, double x1, double y1)
      : min_x(x0), min_y(y0), max_x(x1), max_y(y1) {
    APNET_REQUIRE(min_x <= max_x && min_y <= max_y,
                  "region: min corner must be <= max corner");
  }

  bool contains(double x, double y) const {
    return x >= min_x && x < max_x && y >= min_y && y < max_y;
  }
};

// xy bounding region of a cloud, widened so every point satisfies the
// half-open containment predicate.
inline BoundingRegion bounding_region(const LabeledPointCloud& cloud) {
  if (cloud.size() == 0) return BoundingRegion();
  double min_x = std::numeric_limits<double>::infinity(), min_y = min_x;
  double max_x = -min_x, max_y = -min_y;
  for (const Point3& p : cloud.positions) {
    min_x = std::min(min_x, p.x);
    min_y = std::min(min_y, p.y);
    max_x = std::max(max_x, p.x);
    max_y = std::max(max_y, p.y);
  }
  const double pad_x = std::max(1e-9, 1e-12 * (max_x - min_x));
  const double pad_y = std::max(1e-9, 1e-12 * (max_y - min_y));
  return BoundingRegion(min_x, min_y, max_x + pad_x, max_y + pad_y);
}

inline LabeledPointCloud crop(const LabeledPointCloud& cloud, const BoundingRegion& region) {
  LabeledPointCloud out;
  out.class_count = cloud.class_count;
  if (cloud.has_labels()) out.labels.emplace();
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const Point3& p = cloud.positions[i];
    if (!region.contains(p.x, p.y)) continue;
    out.positions.push_back(p);
    out.colors.push_back(cloud.colors[i]);
    if (cloud.has_labels()) out.labels->push_back((*cloud.labels)[i]);
  }
  return out;
}

}  // namespace apnet
