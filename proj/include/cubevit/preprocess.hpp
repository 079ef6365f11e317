#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "cubevit/volume.hpp"

namespace cubevit {

/// Separable trilinear resampling, align-corners convention: output sample i
/// on an axis of n_out maps to input coordinate i * (n_in - 1) / (n_out - 1).
Volume resample_volume(const Volume& v, const std::array<std::size_t, 3>& target);
EnFaceImage resample_image(const EnFaceImage& img, std::size_t height, std::size_t width);
std::vector<double> resample_line(std::span<const double> line, std::size_t n_out);

enum class QuantileMethod {
  kLinear,  // interpolate between neighbouring order statistics
  kLower,   // lower order statistic, floor(q * (n - 1))
};

/// Quantile q in [0, 1] of the values (sorted internally).
double quantile(std::span<const double> values, double q, QuantileMethod method = QuantileMethod::kLinear);

/// Replaces values below quantile(lo_q) / above quantile(hi_q) with those quantiles.
Volume clip_intensities(const Volume& v, double lo_q, double hi_q,
                        QuantileMethod method = QuantileMethod::kLinear);

/// Histogram form: bin i holds counts[i] samples of value levels[i] (levels
/// ascending). Returns the cut c maximizing between-class variance when the
/// lower class is bins [0, c]. Ties go to the lowest cut.
std::size_t otsu_cut(std::span<const double> counts, std::span<const double> levels);

/// Value form: threshold is the largest value in the lower class.
double otsu_threshold(std::span<const double> values);

/// Crops the depth (H) axis to the rows that contain above-threshold voxels,
/// thresholding a `bins`-level histogram of the whole volume.
Volume otsu_depth_crop(const Volume& v, std::size_t bins = 256);

Volume normalize_unit(const Volume& v);
Volume flip_w(const Volume& v);
Volume flip_z(const Volume& v);
EnFaceImage flip_w(const EnFaceImage& img);

/// Ordered steps: clip -> Otsu depth crop -> resample -> [0,1] normalize -> flips.
struct PreprocessPolicy {
  std::optional<std::pair<double, double>> clip_quantiles;
  bool otsu_crop = false;
  std::optional<std::array<std::size_t, 3>> resample_to;
  bool normalize = false;
  double flip_w_prob = 0.0;
  double flip_z_prob = 0.0;
  std::uint64_t seed = 0;
};

Volume preprocess(const Volume& v, const PreprocessPolicy& policy);

}  // namespace cubevit
