#pragma once

#include <array>
#include <optional>
#include <filesystem>
#include <vector>

#include "cubevit/heads.hpp"

namespace cubevit {

/// Non-negative relevance per cube position, (Zg, Hg, Wg) with W fastest.
struct SaliencyMap {
  std::array<std::size_t, 3> grid{};
  std::vector<double> values;
  bool all_zero = true;  // nothing positive survived the rectification

  double at(std::size_t iz, std::size_t ih, std::size_t iw) const {
    return values[(iz * grid[1] + ih) * grid[2] + iw];
  }
};

/// Grad-CAM++ on token activations A and their gradients G (both L x C):
/// alpha = g^2 / (2 g^2 + (sum_l A[., c]) g^3), weight_c = sum_l alpha relu(g),
/// map = relu(sum_c weight_c A[., c]) scaled so the maximum is 1.
SaliencyMap gradcam_map(const Tensor& activations, const Tensor& gradients, const std::array<std::size_t, 3>& grid);

/// Target output `target` of a fine-tuned model with activations taken after
/// encoder block `block` (defaults to the last one). Uses the first fold.
SaliencyMap gradcam_saliency(const FinetuneModel& model, const ParamStore& store, const Volume& volume,
                             std::size_t target, std::optional<std::size_t> block = std::nullopt);

/// Half-pixel bilinear resize of an h x w grid to out_h x out_w, edges clamped.
Tensor upsample_bilinear(const Tensor& grid, std::size_t out_h, std::size_t out_w);

/// One H x W map per volume slice, from the grid layer the slice falls in.
std::vector<Tensor> slice_views(const SaliencyMap& map, const CubeSpec& spec);

/// Slice-by-depth plane (grid averaged over W), resized to out_h x out_w.
Tensor slow_scan_view(const SaliencyMap& map, std::size_t out_h, std::size_t out_w);

/// Writes slice_XXX.enf per slice, slow_scan.enf and index.json into `dir`.
void export_saliency(const std::filesystem::path& dir, const SaliencyMap& map, const std::vector<Tensor>& slices,
                     const Tensor& slow_scan);

}  // namespace cubevit
