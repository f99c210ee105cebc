#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "apnet/aerial.hpp"
#include "apnet/sampling.hpp"
#include "apnet/tensor.hpp"

namespace apnet {

// Kernel point geometry of the fusion point convolution: K offsets inside a
// sphere of radius conv_radius, the first pinned at the origin, each with a
// linear influence falloff of radius sigma.
struct KernelLayout {
  std::vector<Point3> offsets;
  double conv_radius = 0.5;
  double sigma = 0.24;

  std::size_t kernel_count() const { return offsets.size(); }

  void validate() const {
    APNET_REQUIRE(!offsets.empty(), "KernelLayout: needs >= 1 kernel point");
    APNET_REQUIRE(sigma > 0.0, "KernelLayout: sigma must be positive");
    APNET_REQUIRE(conv_radius > 0.0, "KernelLayout: conv_radius must be positive");
    int at_origin = 0;
    for (const Point3& o : offsets) {
      const double norm = std::sqrt(o.x * o.x + o.y * o.y + o.z * o.z);
      APNET_REQUIRE(norm <= conv_radius + 1e-12, "KernelLayout: offset norm ", norm,
                    " exceeds conv_radius ", conv_radius);
      if (norm == 0.0) ++at_origin;
    }
    APNET_REQUIRE(at_origin == 1, "KernelLayout: exactly one offset must be the origin, found ",
                  at_origin);
  }
};

// Kernel point placement: one point pinned at the origin, the rest spread by
// pairwise-repulsion descent from seeded random starts, projected into the
// conv_radius ball. Fixed iteration count keeps the layout reproducible.
inline KernelLayout make_kernel_layout(std::size_t k, double conv_radius, double sigma,
                                       std::uint64_t seed) {
  APNET_REQUIRE(k >= 1, "make_kernel_layout: K must be >= 1");
  KernelLayout layout;
  layout.conv_radius = conv_radius;
  layout.sigma = sigma;
  layout.offsets.push_back({0.0, 0.0, 0.0});

  Rng rng(seed);
  std::vector<Point3>& pts = layout.offsets;
  for (std::size_t i = 1; i < k; ++i) {
    // rejection-sample a start inside the ball
    while (true) {
      const double x = rng.uniform(-conv_radius, conv_radius);
      const double y = rng.uniform(-conv_radius, conv_radius);
      const double z = rng.uniform(-conv_radius, conv_radius);
      if (x * x + y * y + z * z <= conv_radius * conv_radius) {
        pts.push_back({x, y, z});
        break;
      }
    }
  }

  const int iterations = 200;
  for (int it = 0; it < iterations; ++it) {
    const double step = conv_radius * (0.06 * (1.0 - 0.8 * double(it) / iterations));
    std::vector<Point3> next = pts;
    for (std::size_t i = 1; i < pts.size(); ++i) {
      double fx = 0.0, fy = 0.0, fz = 0.0;
      for (std::size_t j = 0; j < pts.size(); ++j) {
        if (j == i) continue;
        const double dx = pts[i].x - pts[j].x;
        const double dy = pts[i].y - pts[j].y;
        const double dz = pts[i].z - pts[j].z;
        const double d2 = dx * dx + dy * dy + dz * dz + 1e-9;
        const double inv = 1.0 / (d2 * std::sqrt(d2));
        fx += dx * inv;
        fy += dy * inv;
        fz += dz * inv;
      }
      const double norm = std::sqrt(fx * fx + fy * fy + fz * fz);
      if (norm > 0.0) {
        next[i].x += step * fx / norm;
        next[i].y += step * fy / norm;
        next[i].z += step * fz / norm;
      }
      const double r = std::sqrt(next[i].x * next[i].x + next[i].y * next[i].y +
                                 next[i].z * next[i].z);
      if (r > conv_radius) {
        const double shrink = conv_radius / r;
        next[i].x *= shrink;
        next[i].y *= shrink;
        next[i].z *= shrink;
      }
    }
    pts = std::move(next);
  }
  layout.validate();
  return layout;
}

inline double min_offset_separation(const KernelLayout& layout) {
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < layout.offsets.size(); ++i) {
    for (std::size_t j = i + 1; j < layout.offsets.size(); ++j) {
      const double dx = layout.offsets[i].x - layout.offsets[j].x;
      const double dy = layout.offsets[i].y - layout.offsets[j].y;
      const double dz = layout.offsets[i].z - layout.offsets[j].z;
      best = std::min(best, std::sqrt(dx * dx + dy * dy + dz * dz));
    }
  }
  return best;
}

inline void save_kernel_layout(const KernelLayout& layout, const std::string& path) {
  std::ofstream out(path);
  APNET_REQUIRE(out.good(), "cannot open '", path, "' for writing");
  auto fmt = [](double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return std::string(buf);
  };
  out << "apnet-kernel-1\n";
  out << "k " << layout.offsets.size() << '\n';
  out << "conv_radius " << fmt(layout.conv_radius) << '\n';
  out << "sigma " << fmt(layout.sigma) << '\n';
  for (const Point3& o : layout.offsets)
    out << "offset " << fmt(o.x) << ' ' << fmt(o.y) << ' ' << fmt(o.z) << '\n';
}

inline KernelLayout load_kernel_layout(const std::string& path) {
  std::ifstream in(path);
  APNET_REQUIRE(in.good(), "cannot open '", path, "' for reading");
  std::string line;
  APNET_REQUIRE(std::getline(in, line) && line == "apnet-kernel-1",
                "'", path, "': not a kernel layout file");
  KernelLayout layout;
  layout.offsets.clear();
  std::size_t k = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream is(line);
    std::string tag;
    is >> tag;
    if (tag == "k") is >> k;
    else if (tag == "conv_radius") is >> layout.conv_radius;
    else if (tag == "sigma") is >> layout.sigma;
    else if (tag == "offset") {
      Point3 o;
      is >> o.x >> o.y >> o.z;
      layout.offsets.push_back(o);
    } else {
      throw Error(detail::format_msg("'", path, "': unknown kernel layout tag '", tag, "'"));
    }
    APNET_REQUIRE(!is.fail(), "'", path, "': malformed line: ", line);
  }
  APNET_REQUIRE(layout.offsets.size() == k, "'", path, "': offset count mismatch");
  layout.validate();
  return layout;
}

// Continuous pixel coordinate of a world point under the pixel-center
// convention: a point at a pixel's world center samples that pixel exactly.
inline std::pair<double, double> continuous_pixel(double x, double y, double s,
                                                  double origin_x, double origin_y) {
  APNET_REQUIRE(s > 0.0, "continuous_pixel: pixel size must be positive");
  return {(x - origin_x) / s - 0.5, (y - origin_y) / s - 0.5};
}

// Bilinear extraction of C-channel features at world xy positions.
// Out-of-raster coordinates are clamped to the border and counted.
template <class S>
Value<S> extract_pixel_features(const Value<S>& feature_map,
                                const std::vector<Point3>& points, double s,
                                double origin_x, double origin_y,
                                std::size_t* clamped_count = nullptr) {
  std::vector<std::pair<double, double>> coords;
  coords.reserve(points.size());
  for (const Point3& p : points)
    coords.push_back(continuous_pixel(p.x, p.y, s, origin_x, origin_y));
  return bilinear_sample(feature_map, coords, clamped_count);
}

template <class S>
Value<S> extract_pixel_feature(const Value<S>& feature_map, double x, double y, double s,
                               double origin_x, double origin_y,
                               std::size_t* clamped_count = nullptr) {
  return extract_pixel_features(feature_map, {Point3{x, y, 0.0}}, s, origin_x, origin_y,
                                clamped_count);
}

// Inputs of the fusion convolution: queries (original points), supports
// (downsampled points) with concatenated aerial+point features, and the
// per-query neighbor lists within conv_radius.
template <class S>
struct FusionInputs {
  std::vector<Point3> query_points;
  std::vector<Point3> support_points;
  Value<S> support_features;  // [Ns, 2C]
  std::vector<std::vector<std::size_t>> neighbors;  // per query, within conv_radius
  std::size_t clamped_samples = 0;

  void validate() const {
    APNET_REQUIRE(support_features.shape().size() == 2 &&
                      support_features.shape()[0] == support_points.size(),
                  "FusionInputs: features/support mismatch");
    APNET_REQUIRE(neighbors.size() == query_points.size(),
                  "FusionInputs: neighbor lists/query mismatch");
  }
};

template <class S>
FusionInputs<S> build_fusion_inputs(const std::vector<Point3>& query_points,
                                    const std::vector<Point3>& support_points,
                                    const Value<S>& aerial_features,
                                    const Value<S>& point_features,
                                    double s, double origin_x, double origin_y,
                                    double conv_radius, std::size_t cap) {
  APNET_REQUIRE(point_features.shape().size() == 2 &&
                    point_features.shape()[0] == support_points.size(),
                "build_fusion_inputs: point features must have one row per support point");
  FusionInputs<S> out;
  out.query_points = query_points;
  out.support_points = support_points;

  Value<S> f_a = extract_pixel_features(aerial_features, support_points, s, origin_x,
                                        origin_y, &out.clamped_samples);
  APNET_REQUIRE(f_a.shape()[1] == point_features.shape()[1],
                "build_fusion_inputs: branch channel mismatch (",
                f_a.shape()[1], " vs ", point_features.shape()[1], ")");
  out.support_features = concat<S>({f_a, point_features}, 1);

  SpatialIndex index(support_points, conv_radius);
  out.neighbors.resize(query_points.size());
  for (std::size_t q = 0; q < query_points.size(); ++q)
    out.neighbors[q] = index.radius_neighbors(query_points[q], conv_radius, cap);
  return out;
}

// Rigid kernel-point convolution from supports to queries:
//   out[q] = sum_l sum_m max(0, 1 - |(p_l - p_q) - offset_m| / sigma) * f_l W_m
// Queries with no neighbors output zeros. Gradients flow into the support
// features and the kernel weights; positions are constants.
template <class S>
Value<S> kpconv_fuse(const FusionInputs<S>& inputs, const KernelLayout& layout,
                     const Value<S>& weights) {
  using namespace tensor_detail;
  inputs.validate();
  layout.validate();
  const std::size_t k = layout.kernel_count();
  const std::size_t nq = inputs.query_points.size();
  const std::size_t cin = inputs.support_features.shape()[1];
  APNET_REQUIRE(weights.shape().size() == 3 && weights.shape()[0] == k &&
                    weights.shape()[1] == cin,
                "kpconv_fuse: weights must be [K,", cin, ",Cout], got ",
                shape_str(weights.shape()));
  const std::size_t cout = weights.shape()[2];

  // Sparse correlation structure, grouped per kernel point.
  struct Entry {
    std::uint32_t q, l;
    S w;
  };
  std::vector<std::vector<Entry>> entries(k);
  for (std::size_t q = 0; q < nq; ++q) {
    const Point3& pq = inputs.query_points[q];
    for (std::size_t l : inputs.neighbors[q]) {
      const Point3& pl = inputs.support_points[l];
      const double rx = pl.x - pq.x, ry = pl.y - pq.y, rz = pl.z - pq.z;
      for (std::size_t m = 0; m < k; ++m) {
        const Point3& o = layout.offsets[m];
        const double dx = rx - o.x, dy = ry - o.y, dz = rz - o.z;
        const double dist = std::sqrt(dx * dx + dy * dy + dz * dz);
        const double w = 1.0 - dist / layout.sigma;
        if (w > 0.0) entries[m].push_back({std::uint32_t(q), std::uint32_t(l), S(w)});
      }
    }
  }

  const S* f = inputs.support_features.data().data();
  const S* wd = weights.data().data();
  std::vector<S> out(nq * cout, S(0));
  std::vector<S> scratch(nq * cin);
  for (std::size_t m = 0; m < k; ++m) {
    if (entries[m].empty()) continue;
    std::fill(scratch.begin(), scratch.end(), S(0));
    for (const Entry& e : entries[m]) {
      const S* src = f + std::size_t(e.l) * cin;
      S* dst = scratch.data() + std::size_t(e.q) * cin;
      for (std::size_t j = 0; j < cin; ++j) dst[j] += e.w * src[j];
    }
    gemm_acc(scratch.data(), wd + m * cin * cout, out.data(), nq, cin, cout);
  }

  auto n = make_op_node<S>({nq, cout}, std::move(out),
                           {inputs.support_features.node(), weights.node()});
  auto* pf = inputs.support_features.node().get();
  auto* pw = weights.node().get();
  n->backward_fn = [pf, pw, entries = std::move(entries), k, nq, cin,
                    cout](typename Value<S>::Node& self) {
    std::vector<S> t(nq * cin);
    std::vector<S> dt(nq * cin);
    for (std::size_t m = 0; m < k; ++m) {
      if (entries[m].empty()) continue;
      if (pw->requires_grad) {
        // rebuild T_m = sparse-weighted gather of support features
        std::fill(t.begin(), t.end(), S(0));
        for (const auto& e : entries[m]) {
          const S* src = pf->data.data() + std::size_t(e.l) * cin;
          S* dst = t.data() + std::size_t(e.q) * cin;
          for (std::size_t j = 0; j < cin; ++j) dst[j] += e.w * src[j];
        }
        gemm_at_acc(t.data(), self.grad.data(), pw->grad.data() + m * cin * cout, nq, cin,
                    cout);
      }
      if (pf->requires_grad) {
        std::fill(dt.begin(), dt.end(), S(0));
        gemm_bt_acc(self.grad.data(), pw->data.data() + m * cin * cout, dt.data(), nq, cout,
                    cin);
        for (const auto& e : entries[m]) {
          const S* src = dt.data() + std::size_t(e.q) * cin;
          S* dst = pf->grad.data() + std::size_t(e.l) * cin;
          for (std::size_t j = 0; j < cin; ++j) dst[j] += e.w * src[j];
        }
      }
    }
  };
  return Value<S>(n);
}

}  // namespace apnet
