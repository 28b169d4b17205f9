#pragma once

// Evaluation suite: ranking metrics for the binary detector, multi-label
// metrics for the type classifier, IoU statistics for box grounding, and
// micro-averaged precision/recall/F1 for token grounding.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ramdg/common.hpp"

namespace ramdg {

/// Mann–Whitney statistic: P(score+ > score-) + half credit for ties.
inline double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size() || scores.empty())
    throw DataError("roc_auc: scores/labels size mismatch or empty");
  size_t n = scores.size();
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t(0));
  std::sort(order.begin(), order.end(),
            [&](size_t a, size_t b) { return scores[a] < scores[b]; });

  double pos_rank_sum = 0.0;
  size_t pos = 0, neg = 0;
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    double avg_rank = 0.5 * double(i + 1 + j);  // mean of ranks i+1..j
    for (size_t k = i; k < j; ++k)
      if (labels[order[k]] == 1) pos_rank_sum += avg_rank;
    i = j;
  }
  for (size_t k = 0; k < n; ++k) (labels[k] == 1 ? pos : neg)++;
  if (pos == 0 || neg == 0) throw DataError("roc_auc: needs both classes");
  return (pos_rank_sum - 0.5 * double(pos) * double(pos + 1)) / (double(pos) * double(neg));
}

/// Equal error rate: the FPR = FNR operating point of the threshold sweep,
/// linearly interpolated between adjacent thresholds. Classification rule is
/// score >= threshold.
inline double eer(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size() || scores.empty())
    throw DataError("eer: scores/labels size mismatch or empty");
  size_t pos = 0, neg = 0;
  for (int y : labels) (y == 1 ? pos : neg)++;
  if (pos == 0 || neg == 0) throw DataError("eer: needs both classes");

  std::vector<double> thr = scores;
  std::sort(thr.begin(), thr.end());
  thr.erase(std::unique(thr.begin(), thr.end()), thr.end());

  auto point = [&](double t, bool above_all) {
    size_t fp = 0, fn = 0;
    for (size_t k = 0; k < scores.size(); ++k) {
      bool predicted_pos = !above_all && scores[k] >= t;
      if (predicted_pos && labels[k] == 0) ++fp;
      if (!predicted_pos && labels[k] == 1) ++fn;
    }
    return std::array<double, 2>{double(fp) / double(neg), double(fn) / double(pos)};
  };

  std::vector<std::array<double, 2>> pts;
  for (double t : thr) pts.push_back(point(t, false));
  pts.push_back(point(0.0, true));  // reject everything

  // FPR is non-increasing and FNR non-decreasing along the sweep.
  std::array<double, 2> prev = pts.front();
  for (const auto& p : pts) {
    double diff = p[1] - p[0];
    if (diff == 0.0) return p[0];
    if (diff > 0.0) {
      double f0 = prev[0], n0 = prev[1], f1 = p[0], n1 = p[1];
      double denom = (n1 - n0) - (f1 - f0);
      double t = denom != 0.0 ? (f0 - n0) / denom : 0.0;
      return f0 + t * (f1 - f0);
    }
    prev = p;
  }
  return 1.0;
}

inline double accuracy(const std::vector<int>& pred, const std::vector<int>& gt) {
  if (pred.size() != gt.size() || pred.empty())
    throw DataError("accuracy: size mismatch or empty");
  size_t hit = 0;
  for (size_t i = 0; i < pred.size(); ++i)
    if (pred[i] == gt[i]) ++hit;
  return double(hit) / double(pred.size());
}

/// All-points average precision over the (score desc, index asc) ranking.
inline double average_precision(const std::vector<double>& scores,
                                const std::vector<int>& labels) {
  if (scores.size() != labels.size() || scores.empty())
    throw DataError("average_precision: size mismatch or empty");
  size_t total_pos = 0;
  for (int y : labels) total_pos += size_t(y == 1);
  if (total_pos == 0) throw DataError("average_precision: no positives");

  std::vector<size_t> order(scores.size());
  std::iota(order.begin(), order.end(), size_t(0));
  std::stable_sort(order.begin(), order.end(),
                   [&](size_t a, size_t b) { return scores[a] > scores[b]; });
  double ap = 0.0;
  size_t hits = 0;
  for (size_t r = 0; r < order.size(); ++r)
    if (labels[order[r]] == 1) {
      ++hits;
      ap += double(hits) / double(r + 1) / double(total_pos);
    }
  return ap;
}

struct MultiLabelSummary {
  double map = 0.0;
  double cf1 = 0.0;
  double of1 = 0.0;
  std::vector<size_t> classes_without_positives;
};

/// scores[i][c] in [0,1]; labels multi-hot. mAP skips (and flags) classes
/// with no positive support; CF1 averages per-class F1 at threshold 0.5 and
/// OF1 pools the counts.
inline MultiLabelSummary multilabel_metrics(const std::vector<std::vector<double>>& scores,
                                            const std::vector<std::vector<int>>& labels,
                                            double threshold = 0.5) {
  if (scores.size() != labels.size() || scores.empty())
    throw DataError("multilabel_metrics: size mismatch or empty");
  size_t nc = scores.front().size();
  for (size_t i = 0; i < scores.size(); ++i)
    if (scores[i].size() != nc || labels[i].size() != nc)
      throw DataError("multilabel_metrics: ragged class dimension");

  MultiLabelSummary out;
  size_t used = 0;
  size_t pool_tp = 0, pool_fp = 0, pool_fn = 0;
  double cf1_sum = 0.0;
  for (size_t c = 0; c < nc; ++c) {
    std::vector<double> s(scores.size());
    std::vector<int> y(scores.size());
    size_t pos = 0, tp = 0, fp = 0, fn = 0;
    for (size_t i = 0; i < scores.size(); ++i) {
      s[i] = scores[i][c];
      y[i] = labels[i][c];
      pos += size_t(y[i] == 1);
      bool phat = s[i] >= threshold;
      if (phat && y[i] == 1) ++tp;
      if (phat && y[i] == 0) ++fp;
      if (!phat && y[i] == 1) ++fn;
    }
    pool_tp += tp;
    pool_fp += fp;
    pool_fn += fn;
    double denom = double(2 * tp + fp + fn);
    cf1_sum += denom > 0.0 ? 2.0 * double(tp) / denom : 0.0;
    if (pos == 0) {
      out.classes_without_positives.push_back(c);
      continue;
    }
    out.map += average_precision(s, y);
    ++used;
  }
  if (used == 0) throw DataError("multilabel_metrics: no class has positives");
  out.map /= double(used);
  out.cf1 = cf1_sum / double(nc);
  double pool_denom = double(2 * pool_tp + pool_fp + pool_fn);
  out.of1 = pool_denom > 0.0 ? 2.0 * double(pool_tp) / pool_denom : 0.0;
  return out;
}

/// Corner-form IoU with the degenerate conventions: two empty boxes match
/// perfectly (1), an empty box against a real one scores 0.
inline double iou_box(const std::array<double, 4>& a, const std::array<double, 4>& b) {
  double area_a = std::max(0.0, a[2] - a[0]) * std::max(0.0, a[3] - a[1]);
  double area_b = std::max(0.0, b[2] - b[0]) * std::max(0.0, b[3] - b[1]);
  if (area_a <= 0.0 && area_b <= 0.0) return 1.0;
  if (area_a <= 0.0 || area_b <= 0.0) return 0.0;
  double iw = std::min(a[2], b[2]) - std::max(a[0], b[0]);
  double ih = std::min(a[3], b[3]) - std::max(a[1], b[1]);
  double inter = std::max(0.0, iw) * std::max(0.0, ih);
  return inter / (area_a + area_b - inter);
}

struct IouSuite {
  double mean = 0.0;
  double at50 = 0.0;
  double at75 = 0.0;
};

inline IouSuite iou_suite(const std::vector<std::array<double, 4>>& preds,
                          const std::vector<std::array<double, 4>>& gts) {
  if (preds.size() != gts.size() || preds.empty())
    throw DataError("iou_suite: size mismatch or empty");
  IouSuite s;
  for (size_t i = 0; i < preds.size(); ++i) {
    double v = iou_box(preds[i], gts[i]);
    s.mean += v;
    s.at50 += double(v >= 0.5);
    s.at75 += double(v >= 0.75);
  }
  double n = double(preds.size());
  s.mean /= n;
  s.at50 /= n;
  s.at75 /= n;
  return s;
}

struct TokenPrf {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

/// Micro-averaged over all caption token positions pooled across samples;
/// a token counts as predicted-manipulated at probability >= 0.5. Undefined
/// ratios (no predicted / no actual positives) are 0 by convention.
inline TokenPrf token_prf(const std::vector<std::vector<double>>& probs,
                          const std::vector<std::vector<int>>& gt) {
  if (probs.size() != gt.size()) throw DataError("token_prf: sample count mismatch");
  size_t tp = 0, fp = 0, fn = 0;
  for (size_t i = 0; i < probs.size(); ++i) {
    if (probs[i].size() != gt[i].size()) throw DataError("token_prf: caption length mismatch");
    for (size_t k = 0; k < probs[i].size(); ++k) {
      bool phat = probs[i][k] >= 0.5;
      if (phat && gt[i][k] == 1) ++tp;
      if (phat && gt[i][k] == 0) ++fp;
      if (!phat && gt[i][k] == 1) ++fn;
    }
  }
  TokenPrf out;
  out.precision = (tp + fp) > 0 ? double(tp) / double(tp + fp) : 0.0;
  out.recall = (tp + fn) > 0 ? double(tp) / double(tp + fn) : 0.0;
  out.f1 = (2 * tp + fp + fn) > 0 ? 2.0 * double(tp) / double(2 * tp + fp + fn) : 0.0;
  return out;
}

/// One evaluation row: detection, type classification, box grounding (both
/// with originals included and restricted to manipulated samples), token
/// grounding.
struct MetricsReport {
  double auc = 0.0, eer = 0.0, acc = 0.0;
  double map = 0.0, cf1 = 0.0, of1 = 0.0;
  IouSuite iou_all;
  IouSuite iou_manip;
  TokenPrf token;

  nlohmann::json to_json() const {
    return nlohmann::json{{"auc", auc},
                          {"eer", eer},
                          {"acc", acc},
                          {"map", map},
                          {"cf1", cf1},
                          {"of1", of1},
                          {"iou_mean", iou_all.mean},
                          {"iou50", iou_all.at50},
                          {"iou75", iou_all.at75},
                          {"iou_mean_manip", iou_manip.mean},
                          {"iou50_manip", iou_manip.at50},
                          {"iou75_manip", iou_manip.at75},
                          {"token_precision", token.precision},
                          {"token_recall", token.recall},
                          {"token_f1", token.f1}};
  }

  std::string table() const {
    const std::vector<std::pair<std::string, double>> cols = {
        {"AUC", auc},
        {"EER", eer},
        {"ACC", acc},
        {"mAP", map},
        {"CF1", cf1},
        {"OF1", of1},
        {"IoUmean", iou_all.mean},
        {"IoU50", iou_all.at50},
        {"IoU75", iou_all.at75},
        {"TokP", token.precision},
        {"TokR", token.recall},
        {"TokF1", token.f1},
    };
    std::ostringstream head, row, manip;
    for (const auto& [name, value] : cols) {
      char buf[32];
      std::snprintf(buf, sizeof(buf), "%.4f", value);
      size_t w = std::max(name.size(), std::string(buf).size()) + 2;
      head << std::left << std::setw(int(w)) << name;
      row << std::left << std::setw(int(w)) << buf;
    }
    char b1[32], b2[32], b3[32];
    std::snprintf(b1, sizeof(b1), "%.4f", iou_manip.mean);
    std::snprintf(b2, sizeof(b2), "%.4f", iou_manip.at50);
    std::snprintf(b3, sizeof(b3), "%.4f", iou_manip.at75);
    manip << "manipulated-only IoU: mean " << b1 << "  @50 " << b2 << "  @75 " << b3;
    return head.str() + "\n" + row.str() + "\n" + manip.str() + "\n";
  }
};

}  // namespace ramdg
