#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <vector>

#include "apnet/tensor.hpp"

namespace apnet {

// Sentinel masking unlabeled / never-completed positions out of the losses.
inline constexpr int kIgnoreLabel = -1;

struct ClassWeights {
  std::vector<double> weight;       // normalized so the weights sum to class_count
  std::vector<double> frequency;    // source frequencies (sum to 1 over present classes)
};

// Inverse-frequency weights: w_c = 1 / (freq_c + eps). Classes absent from
// the histogram take the maximum present weight; the result is normalized
// so that the weights sum to the class count.
inline ClassWeights inverse_frequency_weights(const std::vector<std::size_t>& label_histogram,
                                              double eps = 1e-3) {
  const std::size_t n_cla = label_histogram.size();
  APNET_REQUIRE(n_cla > 0, "inverse_frequency_weights: empty histogram");
  std::size_t total = 0;
  for (std::size_t c : label_histogram) total += c;
  APNET_REQUIRE(total > 0, "inverse_frequency_weights: all-zero histogram");

  ClassWeights out;
  out.frequency.resize(n_cla);
  out.weight.resize(n_cla);
  double max_present = 0.0;
  for (std::size_t c = 0; c < n_cla; ++c) {
    out.frequency[c] = double(label_histogram[c]) / double(total);
    if (label_histogram[c] > 0) {
      out.weight[c] = 1.0 / (out.frequency[c] + eps);
      max_present = std::max(max_present, out.weight[c]);
    }
  }
  for (std::size_t c = 0; c < n_cla; ++c)
    if (label_histogram[c] == 0) out.weight[c] = max_present;

  const double sum = std::accumulate(out.weight.begin(), out.weight.end(), 0.0);
  const double scale = double(n_cla) / sum;
  for (double& w : out.weight) w *= scale;
  return out;
}

// Mean over non-ignored positions of -w_y * log softmax(logits)_y.
template <class S>
Value<S> wce_loss(const Value<S>& logits_in, const std::vector<int>& labels,
                  const std::vector<double>& class_weight) {
  APNET_REQUIRE(!logits_in.shape().empty(), "wce_loss: scalar logits");
  const std::size_t n_cla_in = logits_in.shape().back();
  const Value<S> logits = logits_in.shape().size() == 2
                              ? logits_in
                              : reshape(logits_in, {logits_in.numel() / n_cla_in, n_cla_in});
  const std::size_t rows = logits.shape()[0], n_cla = logits.shape()[1];
  APNET_REQUIRE(labels.size() == rows, "wce_loss: ", labels.size(), " labels for ", rows,
                " rows");
  APNET_REQUIRE(class_weight.size() == n_cla, "wce_loss: ", class_weight.size(),
                " weights for ", n_cla, " classes");

  std::vector<std::size_t> valid_rows;
  std::vector<std::size_t> valid_cols;
  std::vector<S> row_weight;
  for (std::size_t i = 0; i < rows; ++i) {
    const int l = labels[i];
    if (l == kIgnoreLabel) continue;
    APNET_REQUIRE(l >= 0 && std::size_t(l) < n_cla, "wce_loss: label ", l,
                  " outside [0, ", n_cla, ")");
    valid_rows.push_back(i);
    valid_cols.push_back(std::size_t(l));
    row_weight.push_back(S(class_weight[std::size_t(l)]));
  }
  APNET_REQUIRE(!valid_rows.empty(), "wce_loss: all positions ignored");

  Value<S> logp = log_softmax(logits);
  Value<S> rows_v = gather_rows(logp, valid_rows);
  Value<S> picked = pick(rows_v, valid_cols);
  Value<S> weighted = mul(picked, Value<S>::constant({row_weight.size()}, row_weight));
  return scale(sum(weighted), -1.0 / double(valid_rows.size()));
}

namespace loss_detail {

// Jaccard set error of a prediction-error set against ground-truth set size:
// delta(M) = |M| / |G union M|, evaluated along sorted-error prefixes.
inline std::vector<double> lovasz_grad(const std::vector<int>& fg_sorted) {
  const std::size_t n = fg_sorted.size();
  std::size_t gt_total = 0;
  for (int f : fg_sorted) gt_total += std::size_t(f);
  std::vector<double> grad(n);
  std::size_t inter_miss = 0;  // ground-truth elements inside the prefix
  std::size_t unions = gt_total;
  double prev = 0.0;
  for (std::size_t t = 0; t < n; ++t) {
    if (fg_sorted[t]) ++inter_miss;
    else ++unions;
    // prefix error set S_t: |S_t| = t+1, |G union S_t| = gt_total + (non-gt in prefix)
    const double delta = double(t + 1) / double(unions);
    grad[t] = delta - prev;
    prev = delta;
  }
  return grad;
}

}  // namespace loss_detail

// Lovasz-softmax loss: per class present in the labels, the Lovasz
// extension of the Jaccard error evaluated on |fg - p_c|, averaged over the
// present classes. Probabilities must already be a softmax output. The sort
// permutation and extension coefficients are treated as constants; the
// gradient flows through the error vector only.
template <class S>
Value<S> lovasz_softmax(const Value<S>& probabilities, const std::vector<int>& labels) {
  APNET_REQUIRE(probabilities.shape().size() == 2, "lovasz_softmax: probabilities must be PxC");
  const std::size_t rows = probabilities.shape()[0], n_cla = probabilities.shape()[1];
  APNET_REQUIRE(labels.size() == rows, "lovasz_softmax: ", labels.size(), " labels for ",
                rows, " rows");

  std::vector<std::size_t> valid;
  for (std::size_t i = 0; i < rows; ++i) {
    if (labels[i] == kIgnoreLabel) continue;
    APNET_REQUIRE(labels[i] >= 0 && std::size_t(labels[i]) < n_cla, "lovasz_softmax: label ",
                  labels[i], " outside [0, ", n_cla, ")");
    valid.push_back(i);
  }
  APNET_REQUIRE(!valid.empty(), "lovasz_softmax: no labeled points");

  Value<S> p = gather_rows(probabilities, valid);
  const std::size_t n = valid.size();

  std::vector<Value<S>> class_terms;
  for (std::size_t c = 0; c < n_cla; ++c) {
    bool present = false;
    for (std::size_t i = 0; i < n; ++i)
      if (std::size_t(labels[valid[i]]) == c) { present = true; break; }
    if (!present) continue;

    // errors e_i = fg_i ? 1 - p_ic : p_ic, built as fg + (1 - 2 fg) * p_c
    std::vector<std::size_t> col(n, c);
    Value<S> pc = pick(p, col);
    std::vector<S> fg_v(n), sign_v(n);
    std::vector<int> fg(n);
    for (std::size_t i = 0; i < n; ++i) {
      fg[i] = std::size_t(labels[valid[i]]) == c ? 1 : 0;
      fg_v[i] = S(fg[i]);
      sign_v[i] = S(1 - 2 * fg[i]);
    }
    Value<S> errors = add(mul(pc, Value<S>::constant({n}, sign_v)),
                          Value<S>::constant({n}, fg_v));

    // descending sort of the forward error values; ties by index
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), std::size_t(0));
    const auto& ev = errors.data();
    std::stable_sort(perm.begin(), perm.end(),
                     [&](std::size_t a, std::size_t b) { return ev[a] > ev[b]; });

    std::vector<int> fg_sorted(n);
    for (std::size_t i = 0; i < n; ++i) fg_sorted[i] = fg[perm[i]];
    const std::vector<double> g = loss_detail::lovasz_grad(fg_sorted);
    std::vector<S> g_s(n);
    for (std::size_t i = 0; i < n; ++i) g_s[i] = S(g[i]);

    Value<S> sorted_errors = gather_rows(errors, perm);
    class_terms.push_back(sum(mul(sorted_errors, Value<S>::constant({n}, g_s))));
  }

  Value<S> total = class_terms[0];
  for (std::size_t i = 1; i < class_terms.size(); ++i) total = add(total, class_terms[i]);
  return scale(total, 1.0 / double(class_terms.size()));
}

// One representation's prediction paired with its supervision target.
template <class S>
struct RepPrediction {
  Value<S> logits;                    // trailing dim = class count
  std::vector<int> labels;            // kIgnoreLabel masks positions
  std::vector<double> class_weight;
};

template <class S>
struct TotalLoss {
  Value<S> total;
  double wce_a = 0.0, wce_p = 0.0, wce_fused = 0.0, lovasz = 0.0;
};

// L_all = sum over representations of alpha_rep * WCE + beta * Lovasz(fused).
// All three representations must be present; their targets intentionally
// differ (pixel labels / downsampled labels / original labels).
template <class S>
TotalLoss<S> total_loss(const RepPrediction<S>& a, const RepPrediction<S>& p,
                        const RepPrediction<S>& fused, const std::array<double, 3>& alpha,
                        double beta) {
  APNET_REQUIRE(a.logits.defined(), "total_loss: missing representation 'a'");
  APNET_REQUIRE(p.logits.defined(), "total_loss: missing representation 'p'");
  APNET_REQUIRE(fused.logits.defined(), "total_loss: missing representation 'fused'");

  TotalLoss<S> out;
  Value<S> la = wce_loss(a.logits, a.labels, a.class_weight);
  Value<S> lp = wce_loss(p.logits, p.labels, p.class_weight);
  Value<S> lf = wce_loss(fused.logits, fused.labels, fused.class_weight);
  Value<S> lv = lovasz_softmax(softmax(fused.logits, fused.logits.shape().size() - 1),
                               fused.labels);
  out.wce_a = double(la.item());
  out.wce_p = double(lp.item());
  out.wce_fused = double(lf.item());
  out.lovasz = double(lv.item());
  out.total = add(add(scale(la, alpha[0]), scale(lp, alpha[1])),
                  add(scale(lf, alpha[2]), scale(lv, beta)));
  return out;
}

}  // namespace apnet
