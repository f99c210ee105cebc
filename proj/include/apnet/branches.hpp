#pragma once

#include <cmath>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "apnet/common.hpp"
#include "apnet/sampling.hpp"
#include "apnet/tensor.hpp"

namespace apnet {

// Shared hyperparameters of the two reference encoders. Both branches emit
// the same channel count so the fusion concatenation lines up.
struct BranchConfig {
  std::size_t out_channels = 32;                 // C
  std::vector<std::size_t> a_widths = {12, 16, 24};  // encoder widths; size-1 pooling stages
  std::vector<std::size_t> p_widths = {16, 24};      // per-point stage widths
  double p_radius = 0.45;                        // aggregation neighborhood radius
  std::size_t p_neighbors = 8;                   // neighbors kept per stage (random subset)
  bool twice_forward_sum = true;
  std::size_t head_layers = 2;                   // m
  std::size_t head_hidden = 16;

  void validate() const {
    APNET_REQUIRE(out_channels >= 1, "BranchConfig: out_channels must be >= 1");
    APNET_REQUIRE(a_widths.size() >= 2, "BranchConfig: A-branch needs >= 2 stages");
    APNET_REQUIRE(!p_widths.empty(), "BranchConfig: P-branch needs >= 1 stage");
    APNET_REQUIRE(p_radius > 0.0, "BranchConfig: p_radius must be positive");
    APNET_REQUIRE(p_neighbors >= 1, "BranchConfig: p_neighbors must be >= 1");
    APNET_REQUIRE(head_layers >= 1, "BranchConfig: head needs >= 1 layer");
  }
};

// Collected while building a forward graph; used by gradient-check fixtures
// to reject inputs that sit on relu/max kinks where finite differences are
// meaningless.
struct ForwardProbe {
  double min_abs_preact = std::numeric_limits<double>::infinity();
  double min_pool_gap = std::numeric_limits<double>::infinity();

  template <class S>
  void observe_relu(const Value<S>& pre) {
    for (S v : pre.data())
      min_abs_preact = std::min(min_abs_preact, std::fabs(double(v)));
  }

  // min over 2x2 pooling windows of (max - second max), per channel
  template <class S>
  void observe_maxpool2(const Value<S>& x) {
    const std::size_t h = x.shape()[0], w = x.shape()[1], c = x.shape()[2];
    const auto& d = x.data();
    for (std::size_t y = 0; y + 1 < h; y += 2) {
      for (std::size_t xx = 0; xx + 1 < w; xx += 2) {
        for (std::size_t j = 0; j < c; ++j) {
          double top = -1e300, second = -1e300;
          for (std::size_t dy = 0; dy < 2; ++dy) {
            for (std::size_t dx = 0; dx < 2; ++dx) {
              const double v = double(d[((y + dy) * w + (xx + dx)) * c + j]);
              if (v > top) { second = top; top = v; }
              else if (v > second) second = v;
            }
          }
          min_pool_gap = std::min(min_pool_gap, top - second);
        }
      }
    }
  }
};

namespace nn_detail {

// fan-in scaled uniform init, biases zero
template <class S>
Value<S> init_weight(Shape shape, std::size_t fan_in, Rng& rng) {
  const double bound = std::sqrt(3.0 / double(fan_in));
  std::vector<S> data(shape_numel(shape));
  for (S& v : data) v = S(rng.uniform(-bound, bound));
  return Value<S>::leaf(std::move(shape), std::move(data), true);
}

template <class S>
Value<S> init_bias(std::size_t n) {
  return Value<S>::leaf({n}, std::vector<S>(n, S(0)), true);
}

}  // namespace nn_detail

template <class S>
using ParamList = std::vector<std::pair<std::string, Value<S>>>;

// Per-location linear stack: m layers of 1x1 convolutions with relu between,
// final width = class count. The same head applies to pixel grids and point
// lists; only the trailing (channel) dimension matters.
template <class S>
class SegHead {
 public:
  SegHead() = default;

  SegHead(std::size_t in_channels, std::size_t hidden, std::size_t layers,
          std::size_t n_classes, Rng& rng)
      : in_channels_(in_channels), n_classes_(n_classes) {
    APNET_REQUIRE(layers >= 1, "SegHead: needs >= 1 layer");
    std::size_t in = in_channels;
    for (std::size_t l = 0; l < layers; ++l) {
      const std::size_t out = (l + 1 == layers) ? n_classes : hidden;
      w_.push_back(nn_detail::init_weight<S>({in, out}, in, rng));
      b_.push_back(nn_detail::init_bias<S>(out));
      in = out;
    }
  }

  // features [..., C] -> logits [..., n_classes]
  Value<S> forward(const Value<S>& features, ForwardProbe* probe = nullptr) const {
    APNET_REQUIRE(!features.shape().empty() && features.shape().back() == in_channels_,
                  "SegHead: expected trailing dim ", in_channels_, ", got ",
                  shape_str(features.shape()));
    Shape out_shape = features.shape();
    out_shape.back() = n_classes_;
    const std::size_t rows = features.numel() / in_channels_;
    Value<S> x = reshape(features, {rows, in_channels_});
    for (std::size_t l = 0; l < w_.size(); ++l) {
      x = add(matmul(x, w_[l]), b_[l]);
      if (l + 1 < w_.size()) {
        if (probe) probe->observe_relu(x);
        x = relu(x);
      }
    }
    return reshape(x, out_shape);
  }

  void collect(const std::string& prefix, ParamList<S>& out) const {
    for (std::size_t l = 0; l < w_.size(); ++l) {
      out.emplace_back(prefix + ".l" + std::to_string(l) + ".w", w_[l]);
      out.emplace_back(prefix + ".l" + std::to_string(l) + ".b", b_[l]);
    }
  }

  std::size_t in_channels() const { return in_channels_; }
  std::size_t class_count() const { return n_classes_; }

 private:
  std::size_t in_channels_ = 0, n_classes_ = 0;
  std::vector<Value<S>> w_, b_;
};

// Small encoder-decoder over the aerial image: 3x3 convolutions, two max
// pooling stages, nearest-neighbor upsampling with skip connections, and a
// linear 1x1 output to C channels at the input resolution.
template <class S>
class ABranch {
 public:
  ABranch() = default;

  ABranch(const BranchConfig& cfg, Rng& rng) : widths_(cfg.a_widths), c_out_(cfg.out_channels) {
    std::size_t in = 3;
    for (std::size_t s = 0; s < widths_.size(); ++s) {
      enc_w_.push_back(nn_detail::init_weight<S>({3, 3, in, widths_[s]}, 9 * in, rng));
      enc_b_.push_back(nn_detail::init_bias<S>(widths_[s]));
      in = widths_[s];
    }
    for (std::size_t s = widths_.size() - 1; s-- > 0;) {
      const std::size_t cat = widths_[s + 1] + widths_[s];
      dec_w_.push_back(nn_detail::init_weight<S>({3, 3, cat, widths_[s]}, 9 * cat, rng));
      dec_b_.push_back(nn_detail::init_bias<S>(widths_[s]));
    }
    out_w_ = nn_detail::init_weight<S>({1, 1, widths_[0], c_out_}, widths_[0], rng);
    out_b_ = nn_detail::init_bias<S>(c_out_);
  }

  // image [H,W,3] -> features [H,W,C]; H and W must be divisible by
  // 2^(stages-1).
  Value<S> forward(const Value<S>& image, ForwardProbe* probe = nullptr) const {
    APNET_REQUIRE(image.shape().size() == 3 && image.shape()[2] == 3,
                  "ABranch: input must be HxWx3, got ", shape_str(image.shape()));
    const std::size_t stride = std::size_t(1) << (widths_.size() - 1);
    APNET_REQUIRE(image.shape()[0] % stride == 0 && image.shape()[1] % stride == 0,
                  "ABranch: image sides must be divisible by ", stride);

    std::vector<Value<S>> skips;
    Value<S> x = image;
    for (std::size_t s = 0; s < widths_.size(); ++s) {
      if (s > 0) {
        if (probe) probe->observe_maxpool2(x);
        x = maxpool2(x);
      }
      Value<S> pre = conv2d(x, enc_w_[s], enc_b_[s]);
      if (probe) probe->observe_relu(pre);
      x = relu(pre);
      skips.push_back(x);
    }
    for (std::size_t d = 0; d < dec_w_.size(); ++d) {
      const std::size_t skip = widths_.size() - 2 - d;
      Value<S> cat = concat<S>({upsample2(x), skips[skip]}, 2);
      Value<S> pre = conv2d(cat, dec_w_[d], dec_b_[d]);
      if (probe) probe->observe_relu(pre);
      x = relu(pre);
    }
    return conv2d(x, out_w_, out_b_);
  }

  void collect(const std::string& prefix, ParamList<S>& out) const {
    for (std::size_t s = 0; s < enc_w_.size(); ++s) {
      out.emplace_back(prefix + ".enc" + std::to_string(s) + ".w", enc_w_[s]);
      out.emplace_back(prefix + ".enc" + std::to_string(s) + ".b", enc_b_[s]);
    }
    for (std::size_t d = 0; d < dec_w_.size(); ++d) {
      out.emplace_back(prefix + ".dec" + std::to_string(d) + ".w", dec_w_[d]);
      out.emplace_back(prefix + ".dec" + std::to_string(d) + ".b", dec_b_[d]);
    }
    out.emplace_back(prefix + ".out.w", out_w_);
    out.emplace_back(prefix + ".out.b", out_b_);
  }

  std::size_t out_channels() const { return c_out_; }

 private:
  std::vector<std::size_t> widths_;
  std::size_t c_out_ = 0;
  std::vector<Value<S>> enc_w_, enc_b_, dec_w_, dec_b_;
  Value<S> out_w_, out_b_;
};

// Geometry and per-point inputs of the P-branch, built once per sample.
// Neighborhood lists hold every support point within p_radius (capped);
// the forward pass randomly subsamples them per stage.
struct PBranchInputs {
  std::size_t point_count = 0;
  std::vector<double> features;                       // N x 4: z_rel, r, g, b
  std::vector<std::vector<std::size_t>> neighborhoods;  // per point, sorted by distance
};

inline PBranchInputs build_p_inputs(const DownsampledCloud& down, const BranchConfig& cfg,
                                    double z_reference) {
  APNET_REQUIRE(down.size() >= 1, "build_p_inputs: empty downsampled cloud");
  PBranchInputs in;
  in.point_count = down.size();
  in.features.resize(down.size() * 4);
  for (std::size_t i = 0; i < down.size(); ++i) {
    in.features[i * 4 + 0] = (down.barycenters[i].z - z_reference) / 3.0;
    in.features[i * 4 + 1] = down.colors[i].r - 0.5;
    in.features[i * 4 + 2] = down.colors[i].g - 0.5;
    in.features[i * 4 + 3] = down.colors[i].b - 0.5;
  }
  SpatialIndex index(down.barycenters, cfg.p_radius);
  in.neighborhoods.resize(down.size());
  const std::size_t cap = cfg.p_neighbors * 4;
  for (std::size_t i = 0; i < down.size(); ++i)
    in.neighborhoods[i] = index.radius_neighbors(down.barycenters[i], cfg.p_radius, cap);
  return in;
}

// Stages of per-point linear layers with k-neighbor max-pool aggregation.
// The neighborhood subsample is drawn from the passed RNG, so two passes
// seeded identically produce identical graphs.
template <class S>
class PBranch {
 public:
  PBranch() = default;

  PBranch(const BranchConfig& cfg, Rng& rng)
      : widths_(cfg.p_widths), c_out_(cfg.out_channels), k_(cfg.p_neighbors),
        twice_forward_sum_(cfg.twice_forward_sum) {
    std::size_t in = 4;
    for (std::size_t s = 0; s < widths_.size(); ++s) {
      w_.push_back(nn_detail::init_weight<S>({in, widths_[s]}, in, rng));
      b_.push_back(nn_detail::init_bias<S>(widths_[s]));
      in = widths_[s] * 2;  // concat(point, pooled)
    }
    out_w_ = nn_detail::init_weight<S>({in, c_out_}, in, rng);
    out_b_ = nn_detail::init_bias<S>(c_out_);
  }

  Value<S> forward_once(const PBranchInputs& in, Rng& sampler,
                        ForwardProbe* probe = nullptr) const {
    return forward_features(features_value(in), in, sampler, probe);
  }

  // Runs once, or twice with summed outputs when configured; the two passes
  // draw different neighborhood subsets from the same master stream.
  Value<S> forward(const PBranchInputs& in, std::uint64_t sampler_seed,
                   ForwardProbe* probe = nullptr) const {
    return forward(in, Rng(sampler_seed).fork(1), Rng(sampler_seed).fork(2), probe);
  }

  Value<S> forward(const PBranchInputs& in, Rng pass1, Rng pass2,
                   ForwardProbe* probe = nullptr) const {
    Value<S> out = forward_once(in, pass1, probe);
    if (twice_forward_sum_) out = add(out, forward_once(in, pass2, probe));
    return out;
  }

  // Same pass over an externally supplied feature leaf (gradient checks
  // flow into it).
  Value<S> forward_features(const Value<S>& feats, const PBranchInputs& in, Rng& sampler,
                            ForwardProbe* probe = nullptr) const {
    APNET_REQUIRE(feats.shape() == Shape({in.point_count, 4}),
                  "PBranch: features must be Nx4");
    Value<S> x = feats;
    for (std::size_t s = 0; s < w_.size(); ++s) {
      Value<S> pre = add(matmul(x, w_[s]), b_[s]);
      if (probe) probe->observe_relu(pre);
      Value<S> h = relu(pre);
      auto [flat, offsets] = subsample_neighborhoods(in, sampler);
      if (probe) probe_pool(h, flat, offsets, probe);
      Value<S> pooled = neighbor_max_pool(h, flat, offsets);
      x = concat<S>({h, pooled}, 1);
    }
    return add(matmul(x, out_w_), out_b_);
  }

  Value<S> features_value(const PBranchInputs& in) const {
    std::vector<S> data(in.features.size());
    for (std::size_t i = 0; i < data.size(); ++i) data[i] = S(in.features[i]);
    return Value<S>::constant({in.point_count, 4}, std::move(data));
  }

  void collect(const std::string& prefix, ParamList<S>& out) const {
    for (std::size_t s = 0; s < w_.size(); ++s) {
      out.emplace_back(prefix + ".stage" + std::to_string(s) + ".w", w_[s]);
      out.emplace_back(prefix + ".stage" + std::to_string(s) + ".b", b_[s]);
    }
    out.emplace_back(prefix + ".out.w", out_w_);
    out.emplace_back(prefix + ".out.b", out_b_);
  }

  std::size_t out_channels() const { return c_out_; }
  bool twice_forward_sum() const { return twice_forward_sum_; }

 private:
  std::pair<std::vector<std::size_t>, std::vector<std::size_t>> subsample_neighborhoods(
      const PBranchInputs& in, Rng& sampler) const {
    std::vector<std::size_t> flat;
    std::vector<std::size_t> offsets{0};
    std::vector<std::size_t> scratch;
    for (const auto& nb : in.neighborhoods) {
      if (nb.size() <= k_) {
        flat.insert(flat.end(), nb.begin(), nb.end());
      } else {
        scratch = nb;
        for (std::size_t t = 0; t < k_; ++t) {
          const std::size_t j = t + sampler.uniform_index(scratch.size() - t);
          std::swap(scratch[t], scratch[j]);
          flat.push_back(scratch[t]);
        }
      }
      offsets.push_back(flat.size());
    }
    return {std::move(flat), std::move(offsets)};
  }

  template <class V>
  static void probe_pool(const V& h, const std::vector<std::size_t>& flat,
                         const std::vector<std::size_t>& offsets, ForwardProbe* probe) {
    const std::size_t c = h.shape()[1];
    const auto& d = h.data();
    for (std::size_t q = 0; q + 1 < offsets.size(); ++q) {
      const std::size_t lo = offsets[q], hi = offsets[q + 1];
      if (hi - lo < 2) continue;
      for (std::size_t j = 0; j < c; ++j) {
        double top = -1e300, second = -1e300;
        for (std::size_t t = lo; t < hi; ++t) {
          const double v = double(d[flat[t] * c + j]);
          if (v > top) { second = top; top = v; }
          else if (v > second) second = v;
        }
        probe->min_pool_gap = std::min(probe->min_pool_gap, top - second);
      }
    }
  }

  std::vector<std::size_t> widths_;
  std::size_t c_out_ = 0, k_ = 8;
  bool twice_forward_sum_ = true;
  std::vector<Value<S>> w_, b_;
  Value<S> out_w_, out_b_;
};

}  // namespace apnet
