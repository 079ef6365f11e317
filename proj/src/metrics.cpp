#include "cubevit/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "cubevit/errors.hpp"

namespace cubevit {

namespace {

void check_binary(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw UsageError("scores and labels differ in length");
  for (int l : labels)
    if (l != 0 && l != 1) throw UsageError("labels must be 0 or 1");
}

std::vector<std::size_t> descending_order(std::span<const double> scores) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return idx;
}

std::vector<int> column_labels(const std::vector<std::vector<int>>& labels, std::size_t k) {
  std::vector<int> out(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i].size() <= k) throw UsageError("label row is shorter than the score row");
    out[i] = labels[i][k];
  }
  return out;
}

std::vector<double> column(const Tensor& t, std::size_t k) {
  std::vector<double> out(t.rows());
  for (std::size_t i = 0; i < t.rows(); ++i) out[i] = t.at(i, k);
  return out;
}

}  // namespace

double auroc(std::span<const double> scores, std::span<const int> labels) {
  check_binary(scores, labels);
  const auto pos = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
  const std::size_t neg = labels.size() - pos;
  if (pos == 0 || neg == 0) throw UsageError("auroc needs both classes");

  // Average ranks over tie groups (ascending), then Mann-Whitney U.
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double pos_rank_sum = 0.0;
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t t = i; t < j; ++t)
      if (labels[idx[t]] == 1) pos_rank_sum += avg;
    i = j;
  }
  const double p = static_cast<double>(pos), n = static_cast<double>(neg);
  return (pos_rank_sum - p * (p + 1.0) / 2.0) / (p * n);
}

double auprc(std::span<const double> scores, std::span<const int> labels) {
  check_binary(scores, labels);
  const auto pos = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
  if (pos == 0) throw UsageError("auprc needs at least one positive");
  const auto idx = descending_order(scores);
  double ap = 0.0, prev_recall = 0.0;
  std::size_t tp = 0, seen = 0;
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) {
      tp += static_cast<std::size_t>(labels[idx[j]]);
      ++j;
    }
    seen = j;
    const double recall = static_cast<double>(tp) / static_cast<double>(pos);
    const double precision = static_cast<double>(tp) / static_cast<double>(seen);
    ap += (recall - prev_recall) * precision;
    prev_recall = recall;
    i = j;
  }
  return ap;
}

double macro_auroc(const Tensor& scores, const std::vector<std::vector<int>>& labels) {
  if (scores.rows() != labels.size()) throw UsageError("scores and labels differ in row count");
  double total = 0.0;
  for (std::size_t k = 0; k < scores.cols(); ++k) total += auroc(column(scores, k), column_labels(labels, k));
  return total / static_cast<double>(scores.cols());
}

double macro_auprc(const Tensor& scores, const std::vector<std::vector<int>>& labels) {
  if (scores.rows() != labels.size()) throw UsageError("scores and labels differ in row count");
  double total = 0.0;
  for (std::size_t k = 0; k < scores.cols(); ++k) total += auprc(column(scores, k), column_labels(labels, k));
  return total / static_cast<double>(scores.cols());
}

double pearson_r2(std::span<const double> pred, std::span<const double> gt) {
  if (pred.size() != gt.size()) throw UsageError("pearson_r2: length mismatch");
  if (pred.size() < 2) throw UsageError("pearson_r2 needs at least two points");
  const double n = static_cast<double>(pred.size());
  const double mp = std::accumulate(pred.begin(), pred.end(), 0.0) / n;
  const double mg = std::accumulate(gt.begin(), gt.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double dx = pred[i] - mp, dy = gt[i] - mg;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) throw DegenerateInputError("pearson_r2 of a constant sequence");
  return (sxy * sxy) / (sxx * syy);
}

double coefficient_of_determination(std::span<const double> pred, std::span<const double> gt) {
  if (pred.size() != gt.size()) throw UsageError("coefficient_of_determination: length mismatch");
  if (pred.size() < 2) throw UsageError("coefficient_of_determination needs at least two points");
  const double mg = std::accumulate(gt.begin(), gt.end(), 0.0) / static_cast<double>(gt.size());
  double ss_res = 0.0, ss_tot = 0.0;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    ss_res += (gt[i] - pred[i]) * (gt[i] - pred[i]);
    ss_tot += (gt[i] - mg) * (gt[i] - mg);
  }
  if (ss_tot == 0.0) throw DegenerateInputError("coefficient_of_determination of constant targets");
  return 1.0 - ss_res / ss_tot;
}

double balanced_accuracy(std::span<const int> predicted, std::span<const int> labels) {
  if (predicted.size() != labels.size()) throw UsageError("balanced_accuracy: length mismatch");
  std::size_t tp = 0, fn = 0, tn = 0, fp = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == 1) (predicted[i] == 1 ? tp : fn)++;
    else if (labels[i] == 0) (predicted[i] == 1 ? fp : tn)++;
    else throw UsageError("labels must be 0 or 1");
  }
  if (tp + fn == 0 || tn + fp == 0) throw UsageError("balanced_accuracy needs both classes");
  const double sens = static_cast<double>(tp) / static_cast<double>(tp + fn);
  const double spec = static_cast<double>(tn) / static_cast<double>(tn + fp);
  return (sens + spec) / 2.0;
}

std::size_t rank_of(std::span<const double> scores, std::size_t target) {
  if (target >= scores.size()) throw UsageError("rank_of: target out of range");
  std::size_t rank = 1;
  for (std::size_t j = 0; j < scores.size(); ++j) {
    if (scores[j] > scores[target] || (scores[j] == scores[target] && j < target)) ++rank;
  }
  return rank;
}

namespace {

DirectionMetrics direction(const Tensor& s, std::span<const std::size_t> ks) {
  DirectionMetrics d;
  const std::size_t t = s.rows();
  for (std::size_t i = 0; i < t; ++i) d.ranks.push_back(rank_of(s.row(i), i));
  for (std::size_t k : ks) {
    const auto hits = std::count_if(d.ranks.begin(), d.ranks.end(), [k](std::size_t r) { return r <= k; });
    d.recall_at.push_back(static_cast<double>(hits) / static_cast<double>(t));
  }
  d.mean_rank = static_cast<double>(std::accumulate(d.ranks.begin(), d.ranks.end(), std::size_t{0})) /
                static_cast<double>(t);
  return d;
}

}  // namespace

RetrievalMetrics retrieval_metrics(const Tensor& similarity, std::span<const std::size_t> ks) {
  if (similarity.rank() != 2 || similarity.rows() != similarity.cols()) {
    throw UsageError("retrieval needs a square similarity matrix, got " + shape_str(similarity.shape()));
  }
  for (std::size_t k : ks)
    if (k == 0) throw UsageError("recall K must be positive");
  RetrievalMetrics m;
  m.ks.assign(ks.begin(), ks.end());
  m.rows = direction(similarity, ks);
  m.cols = direction(transpose(similarity), ks);
  return m;
}

double laterality_accuracy(const Tensor& similarity, std::span<const Laterality> laterality, std::size_t k) {
  if (similarity.rank() != 2 || similarity.rows() != similarity.cols()) {
    throw UsageError("laterality accuracy needs a square similarity matrix");
  }
  const std::size_t t = similarity.rows();
  if (laterality.size() != t) throw UsageError("one laterality label per item is required");
  if (k == 0 || k > t - 1) throw UsageError("K must lie in [1, T-1]");
  double total = 0.0;
  for (std::size_t i = 0; i < t; ++i) {
    std::vector<std::size_t> cand;
    for (std::size_t j = 0; j < t; ++j)
      if (j != i) cand.push_back(j);
    const auto row = similarity.row(i);
    std::stable_sort(cand.begin(), cand.end(), [&](std::size_t a, std::size_t b) { return row[a] > row[b]; });
    std::size_t same = 0;
    for (std::size_t r = 0; r < k; ++r) same += laterality[cand[r]] == laterality[i] ? 1 : 0;
    total += static_cast<double>(same) / static_cast<double>(k);
  }
  return total / static_cast<double>(t);
}

namespace {

double ssim_patch(const Tensor& a, const Tensor& b, std::size_t r0, std::size_t c0, std::size_t h, std::size_t w) {
  constexpr double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  const double n = static_cast<double>(h * w);
  double ma = 0.0, mb = 0.0;
  for (std::size_t r = r0; r < r0 + h; ++r)
    for (std::size_t c = c0; c < c0 + w; ++c) {
      ma += a.at(r, c);
      mb += b.at(r, c);
    }
  ma /= n;
  mb /= n;
  double va = 0.0, vb = 0.0, cov = 0.0;
  for (std::size_t r = r0; r < r0 + h; ++r)
    for (std::size_t c = c0; c < c0 + w; ++c) {
      const double da = a.at(r, c) - ma, db = b.at(r, c) - mb;
      va += da * da;
      vb += db * db;
      cov += da * db;
    }
  va /= n;
  vb /= n;
  cov /= n;
  return ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
}

}  // namespace

SliceSimilarity slice_similarity(const Tensor& a, const Tensor& b, std::size_t window) {
  if (a.shape() != b.shape() || a.rank() != 2) {
    throw UsageError("slice_similarity needs two equal 2-D slices, got " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  SliceSimilarity out;
  double se = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) se += (a[i] - b[i]) * (a[i] - b[i]);
  out.rmse = std::sqrt(se / static_cast<double>(a.numel()));
  if (window == 0) {
    out.ssim = ssim_patch(a, b, 0, 0, a.rows(), a.cols());
    return out;
  }
  if (window > a.rows() || window > a.cols()) throw UsageError("SSIM window exceeds the slice");
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t r = 0; r + window <= a.rows(); ++r)
    for (std::size_t c = 0; c + window <= a.cols(); ++c, ++count) total += ssim_patch(a, b, r, c, window, window);
  out.ssim = total / static_cast<double>(count);
  return out;
}

Tensor cosine_matrix(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.cols()) throw ShapeError("cosine_matrix: embedding widths differ");
  Tensor out({a.rows(), b.rows()});
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.rows(); ++j) out.at(i, j) = cosine_similarity(a.row(i), b.row(j));
  return out;
}

}  // namespace cubevit
