#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "cubevit/tensor.hpp"
#include "cubevit/volume.hpp"

namespace cubevit {

/// Rank form: P(score_pos > score_neg) + 0.5 * P(tie).
double auroc(std::span<const double> scores, std::span<const int> labels);

/// Step-wise average precision over distinct descending thresholds.
double auprc(std::span<const double> scores, std::span<const int> labels);

/// Column-wise (one column per label) macro averages; scores and labels are N x K.
double macro_auroc(const Tensor& scores, const std::vector<std::vector<int>>& labels);
double macro_auprc(const Tensor& scores, const std::vector<std::vector<int>>& labels);

double pearson_r2(std::span<const double> pred, std::span<const double> gt);
// 1 - SS_res / SS_tot with gt as reference.
double coefficient_of_determination(std::span<const double> pred, std::span<const double> gt);

double balanced_accuracy(std::span<const int> predicted, std::span<const int> labels);

struct DirectionMetrics {
  std::vector<std::size_t> ranks;  // 1-based rank of the true pair per query
  std::vector<double> recall_at;   // one entry per requested K
  double mean_rank = 0.0;
};

struct RetrievalMetrics {
  std::vector<std::size_t> ks;
  DirectionMetrics rows;  // query = row item
  DirectionMetrics cols;  // query = column item
};

/// Rank of column `target` within `scores`, descending, ties broken by index.
std::size_t rank_of(std::span<const double> scores, std::size_t target);

RetrievalMetrics retrieval_metrics(const Tensor& similarity, std::span<const std::size_t> ks);

/// Among the top-K candidates of each row (true pair removed), the fraction
/// sharing the query's laterality, averaged over rows.
double laterality_accuracy(const Tensor& similarity, std::span<const Laterality> laterality, std::size_t k);

struct SliceSimilarity {
  double rmse = 0.0;
  double ssim = 0.0;
};

/// `window` == 0 computes SSIM over the whole slice; otherwise the mean over
/// all window x window patches (stride 1).
SliceSimilarity slice_similarity(const Tensor& a, const Tensor& b, std::size_t window = 0);

/// Cosine similarity matrix between the rows of `a` and of `b`.
Tensor cosine_matrix(const Tensor& a, const Tensor& b);

}  // namespace cubevit
