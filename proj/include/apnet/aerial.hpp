#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <limits>
#include <string>
#include <tuple>
#include <vector>

#include "apnet/cloud.hpp"

namespace apnet {

// Quantization of a world xy position to an integer pixel. Callers decide
// what to do with coordinates outside the raster (floor keeps negatives
// negative, so out-of-raster results are representable).
inline std::pair<long, long> pixel_of(double x, double y, double s,
                                      double origin_x, double origin_y) {
  APNET_REQUIRE(s > 0.0, "pixel_of: pixel size must be positive, got ", s);
  return {long(std::floor((x - origin_x) / s)), long(std::floor((y - origin_y) / s))};
}

// Pseudo aerial image: per-pixel color/label of the highest projected point,
// plus the validity mask separating covered pixels from null ones.
struct AerialRaster {
  int width = 0, height = 0;
  double pixel_size = 0.0;
  double origin_x = 0.0, origin_y = 0.0;
  int class_count = 0;
  bool has_labels = false;

  std::vector<double> color;        // 3 * width * height, HWC
  std::vector<int> label;           // width * height, -1 where absent
  std::vector<std::uint8_t> valid;  // width * height
  std::vector<double> height_z;     // max point z per valid pixel, NaN elsewhere

  std::size_t pixel_count() const { return std::size_t(width) * std::size_t(height); }
  std::size_t index(int u, int v) const { return std::size_t(v) * std::size_t(width) + std::size_t(u); }
  bool in_bounds(long u, long v) const { return u >= 0 && u < width && v >= 0 && v < height; }

  double world_center_x(int u) const { return origin_x + (u + 0.5) * pixel_size; }
  double world_center_y(int v) const { return origin_y + (v + 0.5) * pixel_size; }

  std::size_t valid_count() const {
    std::size_t n = 0;
    for (std::uint8_t m : valid) n += m;
    return n;
  }
};

inline AerialRaster project_to_aerial(const LabeledPointCloud& cloud, double s,
                                      double origin_x, double origin_y,
                                      int width, int height) {
  APNET_REQUIRE(s > 0.0, "project_to_aerial: pixel size must be positive, got ", s);
  APNET_REQUIRE(width > 0 && height > 0, "project_to_aerial: raster size must be positive");

  AerialRaster r;
  r.width = width;
  r.height = height;
  r.pixel_size = s;
  r.origin_x = origin_x;
  r.origin_y = origin_y;
  r.class_count = cloud.class_count;
  r.has_labels = cloud.has_labels();
  r.color.assign(r.pixel_count() * 3, 0.0);
  r.label.assign(r.pixel_count(), -1);
  r.valid.assign(r.pixel_count(), 0);
  r.height_z.assign(r.pixel_count(), std::numeric_limits<double>::quiet_NaN());

  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const Point3& p = cloud.positions[i];
    const auto [u, v] = pixel_of(p.x, p.y, s, origin_x, origin_y);
    if (!r.in_bounds(u, v)) continue;
    const std::size_t idx = r.index(int(u), int(v));
    // Highest point wins; equal heights resolved by the later point in
    // input order so reruns over the same file are reproducible.
    if (r.valid[idx] && p.z < r.height_z[idx]) continue;
    r.valid[idx] = 1;
    r.height_z[idx] = p.z;
    r.color[idx * 3 + 0] = cloud.colors[i].r;
    r.color[idx * 3 + 1] = cloud.colors[i].g;
    r.color[idx * 3 + 2] = cloud.colors[i].b;
    if (r.has_labels) r.label[idx] = (*cloud.labels)[i];
  }
  return r;
}

// Raster sized and positioned from the cloud itself: origin at (min x, min y).
inline AerialRaster project_to_aerial(const LabeledPointCloud& cloud, double s,
                                      int width = 512, int height = 512) {
  APNET_REQUIRE(cloud.size() > 0, "project_to_aerial: empty cloud needs an explicit origin/size");
  double min_x = cloud.positions[0].x, min_y = cloud.positions[0].y;
  for (const Point3& p : cloud.positions) {
    min_x = std::min(min_x, p.x);
    min_y = std::min(min_y, p.y);
  }
  return project_to_aerial(cloud, s, min_x, min_y, width, height);
}

inline AerialRaster project_labels(const LabeledPointCloud& cloud, double s,
                                   double origin_x, double origin_y,
                                   int width, int height) {
  APNET_REQUIRE(cloud.has_labels(), "project_labels: labels required");
  return project_to_aerial(cloud, s, origin_x, origin_y, width, height);
}

namespace aerial_detail {

// One synchronous completion pass. A null pixel is filled when at least
// `min_valid_neighbors` of its 8 neighbours are valid; the fill copies
// label, color and height from one representative neighbour so the planes
// stay paired. The representative holds the modal key (label when labelled,
// exact color triple otherwise); ties prefer the greater neighbour height,
// then the smaller key, then the smaller pixel index.
inline bool completion_pass(AerialRaster& r, int min_valid_neighbors) {
  const AerialRaster prev = r;
  bool changed = false;

  struct Candidate {
    std::size_t idx;          // neighbour pixel index in prev
    double height;
    int label;
    std::array<double, 3> rgb;
  };

  for (int v = 0; v < r.height; ++v) {
    for (int u = 0; u < r.width; ++u) {
      const std::size_t idx = prev.index(u, v);
      if (prev.valid[idx]) continue;

      Candidate cand[8];
      int n_valid = 0;
      for (int dv = -1; dv <= 1; ++dv) {
        for (int du = -1; du <= 1; ++du) {
          if (du == 0 && dv == 0) continue;
          const long nu = u + du, nv = v + dv;
          if (!prev.in_bounds(nu, nv)) continue;
          const std::size_t nidx = prev.index(int(nu), int(nv));
          if (!prev.valid[nidx]) continue;
          cand[n_valid++] = {nidx, prev.height_z[nidx], prev.label[nidx],
                             {prev.color[nidx * 3], prev.color[nidx * 3 + 1],
                              prev.color[nidx * 3 + 2]}};
        }
      }
      if (n_valid < min_valid_neighbors) continue;

      auto key_less = [&](const Candidate& a, const Candidate& b) {
        if (prev.has_labels) return a.label < b.label;
        return a.rgb < b.rgb;
      };
      auto key_equal = [&](const Candidate& a, const Candidate& b) {
        if (prev.has_labels) return a.label == b.label;
        return a.rgb == b.rgb;
      };

      int best = 0;
      int best_count = 0;
      double best_height = -std::numeric_limits<double>::infinity();
      for (int i = 0; i < n_valid; ++i) {
        int count = 0;
        double key_height = -std::numeric_limits<double>::infinity();
        int rep = i;
        for (int j = 0; j < n_valid; ++j) {
          if (!key_equal(cand[i], cand[j])) continue;
          ++count;
          if (cand[j].height > key_height ||
              (cand[j].height == key_height && cand[j].idx < cand[rep].idx)) {
            key_height = cand[j].height;
            rep = j;
          }
        }
        const bool better =
            count > best_count ||
            (count == best_count && key_height > best_height) ||
            (count == best_count && key_height == best_height && best_count > 0 &&
             key_less(cand[rep], cand[best]));
        if (better) {
          best = rep;
          best_count = count;
          best_height = key_height;
        }
      }

      r.valid[idx] = 1;
      r.height_z[idx] = cand[best].height;
      r.label[idx] = cand[best].label;
      r.color[idx * 3 + 0] = cand[best].rgb[0];
      r.color[idx * 3 + 1] = cand[best].rgb[1];
      r.color[idx * 3 + 2] = cand[best].rgb[2];
      changed = true;
    }
  }
  return changed;
}

}  // namespace aerial_detail

// Dilates valid pixels into null ones. Valid pixels are never modified and
// the valid set grows monotonically; updates within a pass read only the
// previous pass's state.
inline AerialRaster complete_image(const AerialRaster& raster, int passes,
                                   int min_valid_neighbors = 3) {
  AerialRaster out = raster;
  for (int p = 0; p < passes; ++p) {
    if (!aerial_detail::completion_pass(out, min_valid_neighbors)) break;
  }
  return out;
}

// --- raster dump (dump-aerial CLI) ---

inline std::array<std::uint8_t, 3> class_palette(int label) {
  static const std::array<std::array<std::uint8_t, 3>, 13> palette = {{
      {85, 107, 47},   {0, 255, 0},    {255, 165, 0},  {41, 49, 101},
      {0, 0, 0},       {0, 0, 255},    {255, 0, 255},  {200, 200, 200},
      {89, 47, 95},    {255, 0, 0},    {255, 255, 0},  {0, 255, 255},
      {0, 191, 255},
  }};
  if (label < 0) return {0, 0, 0};
  return palette[std::size_t(label) % palette.size()];
}

inline std::vector<std::size_t> encode_valid_rle(const std::vector<std::uint8_t>& mask) {
  // First element is the value of pixel 0 (0 or 1), then run lengths.
  std::vector<std::size_t> rle;
  if (mask.empty()) return rle;
  rle.push_back(mask[0] ? 1 : 0);
  std::size_t run = 1;
  for (std::size_t i = 1; i < mask.size(); ++i) {
    if ((mask[i] != 0) == (mask[i - 1] != 0)) {
      ++run;
    } else {
      rle.push_back(run);
      run = 1;
    }
  }
  rle.push_back(run);
  return rle;
}

inline std::vector<std::uint8_t> decode_valid_rle(const std::vector<std::size_t>& rle,
                                                  std::size_t expected_size) {
  std::vector<std::uint8_t> mask;
  if (rle.empty()) {
    APNET_REQUIRE(expected_size == 0, "valid-mask RLE empty but raster is not");
    return mask;
  }
  std::uint8_t value = rle[0] ? 1 : 0;
  for (std::size_t i = 1; i < rle.size(); ++i) {
    mask.insert(mask.end(), rle[i], value);
    value = value ? 0 : 1;
  }
  APNET_REQUIRE(mask.size() == expected_size, "valid-mask RLE decodes to ", mask.size(),
                " pixels, expected ", expected_size);
  return mask;
}

// Writes <stem>.ppm (color), <stem>.labels.pgm / <stem>.labels.ppm when
// labelled, and a <stem>.meta sidecar with the geometry and the valid mask.
inline void dump_aerial(const AerialRaster& r, const std::string& stem) {
  auto to_byte = [](double v) {
    return std::uint8_t(std::clamp(v, 0.0, 1.0) * 255.0 + 0.5);
  };

  {
    std::ofstream ppm(stem + ".ppm", std::ios::binary);
    APNET_REQUIRE(ppm.good(), "cannot open '", stem, ".ppm' for writing");
    ppm << "P6\n" << r.width << ' ' << r.height << "\n255\n";
    for (std::size_t i = 0; i < r.pixel_count(); ++i) {
      const std::uint8_t rgb[3] = {to_byte(r.color[i * 3]), to_byte(r.color[i * 3 + 1]),
                                   to_byte(r.color[i * 3 + 2])};
      ppm.write(reinterpret_cast<const char*>(rgb), 3);
    }
  }

  if (r.has_labels) {
    std::ofstream pgm(stem + ".labels.pgm", std::ios::binary);
    APNET_REQUIRE(pgm.good(), "cannot open '", stem, ".labels.pgm' for writing");
    pgm << "P5\n" << r.width << ' ' << r.height << "\n255\n";
    for (std::size_t i = 0; i < r.pixel_count(); ++i) {
      const int l = r.valid[i] ? r.label[i] : -1;
      const std::uint8_t byte = (l >= 0 && l < 255) ? std::uint8_t(l) : 255;
      pgm.write(reinterpret_cast<const char*>(&byte), 1);
    }

    std::ofstream cppm(stem + ".labels.ppm", std::ios::binary);
    APNET_REQUIRE(cppm.good(), "cannot open '", stem, ".labels.ppm' for writing");
    cppm << "P6\n" << r.width << ' ' << r.height << "\n255\n";
    for (std::size_t i = 0; i < r.pixel_count(); ++i) {
      const auto rgb = class_palette(r.valid[i] ? r.label[i] : -1);
      cppm.write(reinterpret_cast<const char*>(rgb.data()), 3);
    }
  }

  auto fmt = [](double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return std::string(buf);
  };
  std::ofstream meta(stem + ".meta");
  APNET_REQUIRE(meta.good(), "cannot open '", stem, ".meta' for writing");
  meta << "apnet-aerial-1\n";
  meta << "width " << r.width << "\nheight " << r.height << '\n';
  meta << "pixel_size " << fmt(r.pixel_size) << '\n';
  meta << "origin " << fmt(r.origin_x) << ' ' << fmt(r.origin_y) << '\n';
  meta << "class_count " << r.class_count << '\n';
  meta << "has_labels " << (r.has_labels ? 1 : 0) << '\n';
  meta << "valid_rle";
  for (std::size_t v : encode_valid_rle(r.valid)) meta << ' ' << v;
  meta << '\n';
}

}  // namespace apnet
