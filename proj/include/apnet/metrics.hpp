#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <string>
#include <vector>

#include "apnet/common.hpp"

namespace apnet {

// Rows are ground truth, columns are predictions.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int class_count) : n_(class_count) {
    APNET_REQUIRE(class_count > 0, "ConfusionMatrix: class count must be positive");
    counts_.assign(std::size_t(n_) * std::size_t(n_), 0);
  }

  void add(int gt, int pred, std::uint64_t count = 1) {
    APNET_REQUIRE(gt >= 0 && gt < n_, "ConfusionMatrix: ground truth ", gt, " out of range");
    APNET_REQUIRE(pred >= 0 && pred < n_, "ConfusionMatrix: prediction ", pred, " out of range");
    counts_[std::size_t(gt) * std::size_t(n_) + std::size_t(pred)] += count;
  }

  void merge(const ConfusionMatrix& other) {
    APNET_REQUIRE(other.n_ == n_, "ConfusionMatrix: merge size mismatch");
    for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
  }

  std::uint64_t at(int gt, int pred) const {
    return counts_[std::size_t(gt) * std::size_t(n_) + std::size_t(pred)];
  }

  std::uint64_t total() const {
    std::uint64_t t = 0;
    for (std::uint64_t c : counts_) t += c;
    return t;
  }

  int class_count() const { return n_; }

 private:
  int n_;
  std::vector<std::uint64_t> counts_;
};

struct MetricsResult {
  std::vector<double> iou;  // NaN when TP+FP+FN == 0 for that class
  double miou_present = 0.0;  // mean over classes with nonzero union (default mode)
  double miou_all = 0.0;      // benchmark mode: absent classes count as 0
  double oa = 0.0;
  std::uint64_t point_count = 0;
};

inline MetricsResult metrics(const ConfusionMatrix& cm) {
  const int n = cm.class_count();
  MetricsResult out;
  out.point_count = cm.total();
  APNET_REQUIRE(out.point_count > 0, "metrics: empty confusion matrix");

  std::uint64_t trace = 0;
  double present_sum = 0.0, all_sum = 0.0;
  int present = 0;
  out.iou.assign(std::size_t(n), std::numeric_limits<double>::quiet_NaN());
  for (int c = 0; c < n; ++c) {
    std::uint64_t tp = cm.at(c, c), fp = 0, fn = 0;
    for (int o = 0; o < n; ++o) {
      if (o == c) continue;
      fn += cm.at(c, o);
      fp += cm.at(o, c);
    }
    trace += tp;
    const std::uint64_t unions = tp + fp + fn;
    if (unions > 0) {
      out.iou[std::size_t(c)] = double(tp) / double(unions);
      present_sum += out.iou[std::size_t(c)];
      all_sum += out.iou[std::size_t(c)];
      ++present;
    }
  }
  out.miou_present = present > 0 ? present_sum / double(present) : 0.0;
  out.miou_all = all_sum / double(n);
  out.oa = double(trace) / double(out.point_count);
  return out;
}

inline std::string metrics_csv_header(int class_count) {
  std::string h = "oa,miou_present,miou_all,point_count";
  for (int c = 0; c < class_count; ++c) h += ",iou_" + std::to_string(c);
  return h;
}

inline std::string metrics_csv_row(const MetricsResult& m) {
  auto fmt = [](double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return std::string(buf);
  };
  std::string row = fmt(m.oa) + "," + fmt(m.miou_present) + "," + fmt(m.miou_all) + "," +
                    std::to_string(m.point_count);
  for (double v : m.iou) row += "," + (std::isnan(v) ? std::string("nan") : fmt(v));
  return row;
}

}  // namespace apnet
