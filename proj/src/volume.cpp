#include "cubevit/volume.hpp"

#include "cubevit/errors.hpp"

namespace cubevit {

std::string to_string(Laterality lat) { return lat == Laterality::OD ? "OD" : "OS"; }

Laterality parse_laterality(const std::string& s) {
  if (s == "OD") return Laterality::OD;
  if (s == "OS") return Laterality::OS;
  throw UsageError("laterality must be OD or OS, got '" + s + "'");
}

Volume::Volume(std::size_t z, std::size_t h, std::size_t w, double fill)
    : depth(z), height(h), width(w), voxels(z * h * w, fill) {
  if (z == 0 || h == 0 || w == 0) throw UsageError("volume extents must be positive");
}

EnFaceImage::EnFaceImage(std::size_t h, std::size_t w, double fill)
    : height(h), width(w), pixels(h * w, fill) {
  if (h == 0 || w == 0) throw UsageError("image extents must be positive");
  meta.modality = "IR";
}

Volume EnFaceImage::as_volume() const {
  Volume v;
  v.depth = 1;
  v.height = height;
  v.width = width;
  v.voxels = pixels;
  v.meta = meta;
  return v;
}

}  // namespace cubevit
