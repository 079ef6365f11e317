#pragma once

#include <array>
#include <cstddef>
#include <string>
#include <vector>

namespace cubevit {

enum class Laterality { OD, OS };

std::string to_string(Laterality lat);
Laterality parse_laterality(const std::string& s);

struct ImageMeta {
  std::string patient_id;
  Laterality laterality = Laterality::OD;
  std::string modality = "OCT";
  std::array<double, 3> spacing_mm{1.0, 1.0, 1.0};  // (z, h, w); en-face uses (h, w) in [1], [2]
  std::vector<std::string> steps;                   // preprocessing provenance

  friend bool operator==(const ImageMeta&, const ImageMeta&) = default;
};

/// Z x H x W voxel grid, row-major with W fastest. Z indexes slices (B-scans),
/// H is the depth axis, W runs across each slice.
struct Volume {
  std::size_t depth = 0;   // Z
  std::size_t height = 0;  // H
  std::size_t width = 0;   // W
  std::vector<double> voxels;
  ImageMeta meta;

  Volume() = default;
  Volume(std::size_t z, std::size_t h, std::size_t w, double fill = 0.0);

  std::size_t size() const noexcept { return voxels.size(); }
  std::size_t index(std::size_t z, std::size_t h, std::size_t w) const noexcept {
    return (z * height + h) * width + w;
  }
  double at(std::size_t z, std::size_t h, std::size_t w) const { return voxels[index(z, h, w)]; }
  double& at(std::size_t z, std::size_t h, std::size_t w) { return voxels[index(z, h, w)]; }

  friend bool operator==(const Volume&, const Volume&) = default;
};

/// Front-facing 2-D image (IR or FAF).
struct EnFaceImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> pixels;
  ImageMeta meta;

  EnFaceImage() = default;
  EnFaceImage(std::size_t h, std::size_t w, double fill = 0.0);

  double at(std::size_t h, std::size_t w) const { return pixels[h * width + w]; }
  double& at(std::size_t h, std::size_t w) { return pixels[h * width + w]; }

  // A 1 x H x W volume sharing the pixels, for the planar encoder path.
  Volume as_volume() const;

  friend bool operator==(const EnFaceImage&, const EnFaceImage&) = default;
};

}  // namespace cubevit
