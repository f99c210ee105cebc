#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "apnet/common.hpp"
#include "apnet/grad_check.hpp"
#include "apnet/losses.hpp"
#include "apnet/metrics.hpp"

using namespace apnet;
using V = Value<double>;

namespace {

// Brute-force Lovasz extension oracle: evaluates the Jaccard set error
// delta(M) = |M| / |G union M| on explicit prefix sets of the sorted errors,
// entirely independent of the cumulative-sum implementation.
double lovasz_oracle(const std::vector<std::vector<double>>& probs,
                     const std::vector<int>& labels, int n_cla) {
  const std::size_t n = labels.size();
  double total = 0.0;
  int present = 0;
  for (int c = 0; c < n_cla; ++c) {
    std::set<std::size_t> gt;
    for (std::size_t i = 0; i < n; ++i)
      if (labels[i] == c) gt.insert(i);
    if (gt.empty()) continue;
    ++present;

    std::vector<double> err(n);
    for (std::size_t i = 0; i < n; ++i)
      err[i] = gt.count(i) ? 1.0 - probs[i][std::size_t(c)] : probs[i][std::size_t(c)];

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t(0));
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return err[a] > err[b]; });

    auto delta = [&](const std::set<std::size_t>& m) {
      std::set<std::size_t> uni = gt;
      for (std::size_t i : m) uni.insert(i);
      return uni.empty() ? 0.0 : double(m.size()) / double(uni.size());
    };

    std::set<std::size_t> prefix;
    double prev = 0.0, value = 0.0;
    for (std::size_t t = 0; t < n; ++t) {
      prefix.insert(order[t]);
      const double d = delta(prefix);
      value += err[order[t]] * (d - prev);
      prev = d;
    }
    total += value;
  }
  return present > 0 ? total / present : 0.0;
}

V probs_value(const std::vector<std::vector<double>>& probs) {
  const std::size_t n = probs.size(), c = probs[0].size();
  std::vector<double> flat;
  for (const auto& row : probs) flat.insert(flat.end(), row.begin(), row.end());
  return V::constant({n, c}, flat);
}

std::vector<std::vector<double>> random_prob_table(Rng& rng, std::size_t n, std::size_t c) {
  std::vector<std::vector<double>> t(n, std::vector<double>(c));
  for (auto& row : t) {
    double s = 0.0;
    for (double& v : row) {
      v = 0.05 + rng.uniform();
      s += v;
    }
    for (double& v : row) v /= s;
  }
  return t;
}

}  // namespace

TEST_CASE("uniform histogram gives unit weights") {
  const ClassWeights w = inverse_frequency_weights({10, 10, 10, 10});
  for (double v : w.weight) REQUIRE(v == Catch::Approx(1.0).margin(1e-12));
}

TEST_CASE("inverse-frequency weights match the hand evaluation at (0.75, 0.25)") {
  const ClassWeights w = inverse_frequency_weights({75, 25});
  // 1/(0.75+1e-3) = 1.3315579227696406, 1/(0.25+1e-3) = 3.9840637450199203,
  // normalized to sum 2
  REQUIRE(w.weight[0] == Catch::Approx(0.50099800399201599).margin(1e-15));
  REQUIRE(w.weight[1] == Catch::Approx(1.4990019960079841).margin(1e-15));
  // and stays within eps-scale of the eps-free values (0.5, 1.5)
  REQUIRE(std::fabs(w.weight[0] - 0.5) < 2e-3);
  REQUIRE(std::fabs(w.weight[1] - 1.5) < 2e-3);
}

TEST_CASE("absent classes take the maximum present weight") {
  const ClassWeights w = inverse_frequency_weights({60, 0, 30, 10});
  // class 3 is rarest among present; absent class 1 matches it before normalization
  REQUIRE(w.weight[1] == Catch::Approx(w.weight[3]).margin(1e-15));
  REQUIRE(w.weight[1] > w.weight[0]);
  const double sum = std::accumulate(w.weight.begin(), w.weight.end(), 0.0);
  REQUIRE(sum == Catch::Approx(4.0).margin(1e-12));

  REQUIRE_THROWS_AS(inverse_frequency_weights({0, 0, 0}), Error);
  REQUIRE_THROWS_AS(inverse_frequency_weights({}), Error);
}

TEST_CASE("wce of uniform logits with unit weights is ln(n_classes)") {
  const std::size_t n_cla = 13;
  V logits = V::zeros({4, n_cla});
  const std::vector<int> labels{0, 5, 12, 7};
  const std::vector<double> weights(n_cla, 1.0);
  const V loss = wce_loss(logits, labels, weights);
  REQUIRE(loss.item() == Catch::Approx(2.5649493574615367).margin(1e-12));
}

TEST_CASE("wce decreases monotonically as the correct-class margin grows") {
  const std::vector<double> weights{1.0, 1.0};
  double prev = 1e300;
  for (double margin : {5.0, 10.0, 20.0}) {
    V logits = V::constant({1, 2}, {margin, 0.0});
    const double loss = wce_loss(logits, {0}, weights).item();
    REQUIRE(loss >= 0.0);
    REQUIRE(loss < prev);
    prev = loss;
  }
  REQUIRE(prev < 1e-4);
}

TEST_CASE("wce matches an independent scalar-arithmetic oracle on a 3-point batch") {
  // logits {{0.2,-0.4},{1.5,0.3},{-0.7,0.9}}, labels {0,1,0}, weights {0.5,1.5}
  V logits = V::constant({3, 2}, {0.2, -0.4, 1.5, 0.3, -0.7, 0.9});
  const V loss = wce_loss(logits, {0, 1, 0}, {0.5, 1.5});
  REQUIRE(loss.item() == Catch::Approx(1.1018726822313862).margin(1e-9));
}

TEST_CASE("wce masks ignored positions and rejects all-ignored input") {
  V logits = V::constant({3, 2}, {5.0, 0.0, -9.0, 9.0, 5.0, 0.0});
  // middle row is badly wrong but ignored
  const double masked = wce_loss(logits, {0, kIgnoreLabel, 0}, {1.0, 1.0}).item();
  const double clean = wce_loss(gather_rows(logits, {0, 2}), {0, 0}, {1.0, 1.0}).item();
  REQUIRE(masked == Catch::Approx(clean).margin(1e-15));
  REQUIRE_THROWS_AS(wce_loss(logits, {kIgnoreLabel, kIgnoreLabel, kIgnoreLabel}, {1.0, 1.0}),
                    Error);
}

TEST_CASE("wce is non-negative and differentiable") {
  Rng rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> data(8 * 3);
    for (double& v : data) v = rng.uniform(-2, 2);
    V logits = V::leaf({8, 3}, data, true);
    std::vector<int> labels(8);
    for (int& l : labels) l = int(rng.uniform_index(3));
    REQUIRE(wce_loss(logits, labels, {0.7, 1.1, 1.2}).item() >= 0.0);

    const auto report = grad_check(
        [&](const std::vector<V>& in) { return wce_loss(in[0], labels, {0.7, 1.1, 1.2}); },
        {logits}, 1e-5, 1e-4);
    REQUIRE(report.pass);
  }
}

TEST_CASE("lovasz is zero for exact one-hot correct predictions") {
  V probs = V::constant({3, 2}, {1, 0, 0, 1, 1, 0});
  REQUIRE(lovasz_softmax(probs, {0, 1, 0}).item() == Catch::Approx(0.0).margin(1e-15));
}

TEST_CASE("single-class uniform prediction evaluates to 1 - 1/n_classes") {
  const std::size_t n = 4, c = 2;
  V probs = V::constant({n, c}, std::vector<double>(n * c, 0.5));
  const std::vector<int> labels(n, 1);
  REQUIRE(lovasz_softmax(probs, labels).item() == Catch::Approx(0.5).margin(1e-12));

  V probs3 = V::constant({3, 3}, std::vector<double>(9, 1.0 / 3.0));
  REQUIRE(lovasz_softmax(probs3, {2, 2, 2}).item() ==
          Catch::Approx(1.0 - 1.0 / 3.0).margin(1e-12));
}

TEST_CASE("lovasz matches the brute-force extension oracle on a fixed seeded table") {
  Rng rng(1234);
  const auto table = random_prob_table(rng, 4, 2);
  const std::vector<int> labels{0, 1, 1, 0};
  const double expected = lovasz_oracle(table, labels, 2);
  REQUIRE(lovasz_softmax(probs_value(table), labels).item() ==
          Catch::Approx(expected).margin(1e-9));
}

TEST_CASE("lovasz matches the oracle exhaustively for small n") {
  Rng rng(777);
  for (std::size_t n = 1; n <= 6; ++n) {
    const std::size_t assignments = std::size_t(1) << n;  // 2 classes
    for (std::size_t a = 0; a < assignments; ++a) {
      std::vector<int> labels(n);
      for (std::size_t i = 0; i < n; ++i) labels[i] = int((a >> i) & 1);
      for (int t = 0; t < 3; ++t) {
        const auto table = random_prob_table(rng, n, 2);
        const double expected = lovasz_oracle(table, labels, 2);
        const double got = lovasz_softmax(probs_value(table), labels).item();
        REQUIRE(got == Catch::Approx(expected).margin(1e-9));
        REQUIRE(got >= -1e-12);
        REQUIRE(got <= 1.0 + 1e-12);
      }
    }
  }
}

TEST_CASE("lovasz gradient matches finite differences away from sort ties") {
  Rng rng(55);
  int checked = 0;
  for (int trial = 0; trial < 40 && checked < 15; ++trial) {
    // logits -> softmax -> lovasz, checking through the softmax too
    std::vector<double> data(6 * 3);
    for (double& v : data) v = rng.uniform(-1.5, 1.5);
    std::vector<int> labels(6);
    for (int& l : labels) l = int(rng.uniform_index(3));

    // reject fixtures with nearly tied errors (kink of the piecewise-linear loss)
    V probe = softmax(V::constant({6, 3}, data), 1);
    bool tied = false;
    for (int c = 0; c < 3; ++c) {
      std::vector<double> err;
      for (std::size_t i = 0; i < 6; ++i) {
        const double p = probe.data()[i * 3 + std::size_t(c)];
        err.push_back(labels[i] == c ? 1.0 - p : p);
      }
      std::sort(err.begin(), err.end());
      for (std::size_t i = 0; i + 1 < err.size(); ++i)
        if (err[i + 1] - err[i] < 1e-3) tied = true;
    }
    if (tied) continue;
    ++checked;

    V logits = V::leaf({6, 3}, data, true);
    const auto report = grad_check(
        [&](const std::vector<V>& in) {
          return lovasz_softmax(softmax(in[0], 1), labels);
        },
        {logits}, 1e-5, 1e-4);
    CAPTURE(trial, report.max_rel_error);
    REQUIRE(report.pass);
  }
  REQUIRE(checked >= 10);
}

TEST_CASE("lovasz rejects degenerate input") {
  V probs = V::constant({2, 2}, {0.5, 0.5, 0.5, 0.5});
  REQUIRE_THROWS_AS(lovasz_softmax(probs, {kIgnoreLabel, kIgnoreLabel}), Error);
}

TEST_CASE("total loss combines weighted components") {
  const std::vector<double> w2{1.0, 1.0};
  RepPrediction<double> a{V::constant({2, 2}, {3.0, -3.0, -3.0, 3.0}), {0, 1}, w2};
  RepPrediction<double> p{V::constant({2, 2}, {2.0, -2.0, -2.0, 2.0}), {0, 1}, w2};
  RepPrediction<double> f{V::constant({2, 2}, {4.0, -4.0, -4.0, 4.0}), {0, 1}, w2};

  const TotalLoss<double> all = total_loss(a, p, f, {1.0, 1.0, 1.0}, 1.0);
  const double expected = all.wce_a + all.wce_p + all.wce_fused + all.lovasz;
  REQUIRE(all.total.item() == Catch::Approx(expected).margin(1e-12));

  // beta = 0 removes the lovasz term
  const TotalLoss<double> no_beta = total_loss(a, p, f, {1.0, 1.0, 1.0}, 0.0);
  REQUIRE(no_beta.total.item() ==
          Catch::Approx(all.wce_a + all.wce_p + all.wce_fused).margin(1e-12));

  // scaling factors apply per representation
  const TotalLoss<double> scaled = total_loss(a, p, f, {2.0, 0.5, 1.0}, 1.0);
  REQUIRE(scaled.total.item() ==
          Catch::Approx(2 * all.wce_a + 0.5 * all.wce_p + all.wce_fused + all.lovasz)
              .margin(1e-12));

  RepPrediction<double> missing;
  REQUIRE_THROWS_AS(total_loss(missing, p, f, {1, 1, 1}, 1.0), Error);
}

TEST_CASE("confusion-matrix metrics: perfect prediction and the hand case") {
  ConfusionMatrix cm(3);
  cm.add(0, 0, 10);
  cm.add(1, 1, 5);
  cm.add(2, 2, 2);
  const MetricsResult perfect = metrics(cm);
  REQUIRE(perfect.oa == 1.0);
  for (double v : perfect.iou) REQUIRE(v == 1.0);

  // class 0: TP=3, FP=1, FN=2 -> IoU = 3/6 = 0.5
  ConfusionMatrix cm2(2);
  cm2.add(0, 0, 3);
  cm2.add(0, 1, 2);  // FN for class 0
  cm2.add(1, 0, 1);  // FP for class 0
  cm2.add(1, 1, 4);
  const MetricsResult m = metrics(cm2);
  REQUIRE(m.iou[0] == Catch::Approx(0.5).margin(1e-15));
}

TEST_CASE("absent classes are excluded from miou_present and zero in miou_all") {
  ConfusionMatrix cm(3);
  cm.add(0, 0, 8);
  cm.add(1, 1, 2);
  cm.add(1, 0, 2);  // class 2 never appears
  const MetricsResult m = metrics(cm);
  REQUIRE(std::isnan(m.iou[2]));
  const double iou0 = 8.0 / 10.0;  // TP=8, FP=2
  const double iou1 = 2.0 / 4.0;
  REQUIRE(m.miou_present == Catch::Approx((iou0 + iou1) / 2).margin(1e-12));
  REQUIRE(m.miou_all == Catch::Approx((iou0 + iou1) / 3).margin(1e-12));

  ConfusionMatrix empty(2);
  REQUIRE_THROWS_AS(metrics(empty), Error);
}

TEST_CASE("metrics equal a naive per-point counting oracle on random pairs") {
  Rng rng(31337);
  for (int trial = 0; trial < 200; ++trial) {
    const int n_cla = 2 + int(rng.uniform_index(6));
    const std::size_t n = 1 + rng.uniform_index(200);
    std::vector<int> gt(n), pred(n);
    for (std::size_t i = 0; i < n; ++i) {
      gt[i] = int(rng.uniform_index(std::uint64_t(n_cla)));
      pred[i] = int(rng.uniform_index(std::uint64_t(n_cla)));
    }
    ConfusionMatrix cm(n_cla);
    for (std::size_t i = 0; i < n; ++i) cm.add(gt[i], pred[i]);
    const MetricsResult m = metrics(cm);

    // naive oracle: direct per-point counting
    std::uint64_t correct = 0;
    double iou_sum = 0.0;
    int present = 0;
    for (int c = 0; c < n_cla; ++c) {
      std::uint64_t tp = 0, fp = 0, fn = 0;
      for (std::size_t i = 0; i < n; ++i) {
        if (gt[i] == c && pred[i] == c) ++tp;
        if (gt[i] != c && pred[i] == c) ++fp;
        if (gt[i] == c && pred[i] != c) ++fn;
      }
      if (tp + fp + fn > 0) {
        const double iou = double(tp) / double(tp + fp + fn);
        REQUIRE(m.iou[std::size_t(c)] == Catch::Approx(iou).margin(1e-12));
        iou_sum += iou;
        ++present;
      } else {
        REQUIRE(std::isnan(m.iou[std::size_t(c)]));
      }
    }
    for (std::size_t i = 0; i < n; ++i)
      if (gt[i] == pred[i]) ++correct;
    REQUIRE(m.oa == Catch::Approx(double(correct) / double(n)).margin(1e-12));
    REQUIRE(m.miou_present == Catch::Approx(iou_sum / present).margin(1e-12));
    REQUIRE(m.point_count == n);
  }
}
