#include "cubevit/synth.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "cubevit/errors.hpp"
#include "cubevit/preprocess.hpp"
#include "cubevit/tensor.hpp"

namespace cubevit {

namespace {

constexpr double kBackgroundCap = 0.75;
constexpr double kLesionValue = 1.0;

struct Vessel {
  double v0, amplitude, frequency, phase, width;
  double at(double u) const { return v0 + amplitude * std::sin(frequency * u + phase); }
};

struct Latent {
  std::array<double, 3> layer_depth;  // fraction of H
  double tilt;
  std::vector<Vessel> vessels;
  double disc_u, disc_v;
  double lesion_u, lesion_v, lesion_ru, lesion_rv, lesion_depth;
  std::vector<double> noise;
  std::vector<double> ir_noise, faf_noise;
};

Latent draw_latent(const SyntheticCohortSpec& s, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  auto uni = [&](double lo, double hi) { return lo + (hi - lo) * u01(rng); };
  Latent l;
  l.layer_depth = {uni(0.2, 0.3), uni(0.45, 0.55), uni(0.7, 0.8)};
  l.tilt = uni(-0.08, 0.08);
  const int nv = 2 + static_cast<int>(u01(rng) * 3.0);
  for (int i = 0; i < nv; ++i) {
    l.vessels.push_back({uni(0.1, 0.9), uni(0.05, 0.2), uni(2.0, 8.0), uni(0.0, 2.0 * std::numbers::pi),
                         uni(0.02, 0.04)});
  }
  // Optic disc on the nasal side of an OD eye.
  l.disc_u = uni(0.35, 0.65);
  l.disc_v = uni(0.8, 0.92);
  l.lesion_u = uni(0.3, 0.7);
  l.lesion_v = uni(0.25, 0.6);
  l.lesion_ru = s.lesion_radius * uni(0.6, 1.4);
  l.lesion_rv = s.lesion_radius * uni(0.6, 1.4);
  l.lesion_depth = uni(0.55, 0.7);
  const auto [z, h, w] = s.volume;
  l.noise.resize(z * h * w);
  for (auto& x : l.noise) x = uni(-s.noise, s.noise);
  l.ir_noise.resize(s.enface[0] * s.enface[1]);
  for (auto& x : l.ir_noise) x = uni(-s.noise, s.noise);
  l.faf_noise.resize(s.enface[0] * s.enface[1]);
  for (auto& x : l.faf_noise) x = uni(-s.noise, s.noise);
  return l;
}

double vessel_strength(const Latent& l, double u, double v) {
  double s = 0.0;
  for (const auto& ves : l.vessels) {
    const double d = (v - ves.at(u)) / ves.width;
    s = std::max(s, std::exp(-0.5 * d * d));
  }
  return s;
}

double disc_strength(const Latent& l, double u, double v) {
  const double du = (u - l.disc_u) / 0.08, dv = (v - l.disc_v) / 0.06;
  return std::exp(-0.5 * (du * du + dv * dv));
}

bool in_lesion(const Latent& l, double u, double v) {
  const double du = (u - l.lesion_u) / l.lesion_ru, dv = (v - l.lesion_v) / l.lesion_rv;
  return du * du + dv * dv <= 1.0;
}

// Normalized en-face coordinate of sample i of n (pixel centres).
double coord(std::size_t i, std::size_t n) { return (static_cast<double>(i) + 0.5) / static_cast<double>(n); }

double to_float(double v) { return static_cast<double>(static_cast<float>(std::clamp(v, 0.0, 1.0))); }

}  // namespace

void SyntheticCohortSpec::validate() const {
  for (auto e : volume)
    if (e == 0) throw UsageError("synthetic volume extents must be positive");
  if (enface[0] == 0 || enface[1] == 0) throw UsageError("synthetic en-face extents must be positive");
  if (!(layer_thickness > 0.0)) throw UsageError("layer_thickness must be positive");
  if (!(lesion_radius > 0.0 && lesion_radius < 0.5)) throw UsageError("lesion_radius must lie in (0, 0.5)");
  if (!(noise >= 0.0 && noise < 0.05)) throw UsageError("noise must lie in [0, 0.05)");
  if (!(target_noise >= 0.0)) throw UsageError("target_noise must be non-negative");
  if (!(field_of_view_mm > 0.0)) throw UsageError("field_of_view_mm must be positive");
}

CohortItem synth_item(const SyntheticCohortSpec& s, std::uint64_t latent_seed, Laterality laterality, int label,
                      const std::string& patient_id) {
  s.validate();
  if (label != 0 && label != 1) throw UsageError("synthetic label must be 0 or 1");
  const Latent l = draw_latent(s, latent_seed);
  const auto [Z, H, W] = s.volume;
  const auto [EH, EW] = s.enface;

  CohortItem item;
  item.latent_seed = latent_seed;
  item.label = label;

  Volume vol(Z, H, W);
  for (std::size_t z = 0; z < Z; ++z)
    for (std::size_t w = 0; w < W; ++w) {
      const double u = coord(z, Z), v = coord(w, W);
      const double shadow = 1.0 - 0.5 * vessel_strength(l, u, v);
      const double lesion = label == 1 && in_lesion(l, u, v);
      for (std::size_t h = 0; h < H; ++h) {
        double val = 0.08;
        for (std::size_t k = 0; k < 3; ++k) {
          const double centre = (l.layer_depth[k] + l.tilt * (v - 0.5)) * static_cast<double>(H);
          const double d = (static_cast<double>(h) - centre) / s.layer_thickness;
          val += (0.25 + 0.15 * static_cast<double>(k)) * std::exp(-0.5 * d * d);
        }
        if (static_cast<double>(h) > l.layer_depth[0] * static_cast<double>(H)) val *= shadow;
        const double d = static_cast<double>(h) - l.lesion_depth * static_cast<double>(H);
        // Signal passes through the atrophic lesion into the tissue below it.
        if (lesion && d > 1.5) val += 0.3;
        val = std::min(val + l.noise[vol.index(z, h, w)], kBackgroundCap);
        if (lesion && std::abs(d) <= 1.5) val = kLesionValue;
        vol.at(z, h, w) = to_float(val);
      }
    }

  // IR: axial mean projection of the volume, resampled to the en-face grid,
  // with dark vessels and a bright disc.
  EnFaceImage proj(Z, W);
  for (std::size_t z = 0; z < Z; ++z)
    for (std::size_t w = 0; w < W; ++w) {
      double m = 0.0;
      for (std::size_t h = 0; h < H; ++h) m += vol.at(z, h, w);
      proj.at(z, w) = m / static_cast<double>(H);
    }
  proj = resample_image(proj, EH, EW);
  EnFaceImage ir(EH, EW);
  EnFaceImage faf(EH, EW);
  for (std::size_t y = 0; y < EH; ++y)
    for (std::size_t x = 0; x < EW; ++x) {
      const double u = coord(y, EH), v = coord(x, EW);
      const double ves = vessel_strength(l, u, v), disc = disc_strength(l, u, v);
      const double ir_val = 0.3 + 1.5 * proj.at(y, x) - 0.25 * ves + 0.4 * disc;
      ir.at(y, x) = to_float(ir_val + l.ir_noise[y * EW + x]);
      double faf_val = 0.5 + 0.1 * std::cos(3.0 * u) - 0.3 * ves - 0.35 * disc;
      if (label == 1 && in_lesion(l, u, v)) faf_val = 0.05;
      faf.at(y, x) = to_float(faf_val + l.faf_noise[y * EW + x]);
    }

  ImageMeta meta;
  meta.patient_id = patient_id;
  meta.laterality = Laterality::OD;
  meta.modality = "OCT";
  const double fov = s.field_of_view_mm;
  meta.spacing_mm = {fov / static_cast<double>(Z), 2.0 / static_cast<double>(H), fov / static_cast<double>(W)};
  vol.meta = meta;
  ir.meta = meta;
  ir.meta.modality = "IR";
  ir.meta.spacing_mm = {1.0, fov / static_cast<double>(EH), fov / static_cast<double>(EW)};
  faf.meta = ir.meta;
  faf.meta.modality = "FAF";

  if (laterality == Laterality::OS && s.mirror_os) {
    vol = flip_w(vol);
    ir = flip_w(ir);
    faf = flip_w(faf);
  }
  vol.meta.laterality = ir.meta.laterality = faf.meta.laterality = laterality;
  item.volume = std::move(vol);
  item.ir = std::move(ir);
  item.faf = std::move(faf);

  if (label == 1) {
    item.targets.lesion_area = std::numbers::pi * (l.lesion_ru * fov) * (l.lesion_rv * fov);
  }
  Rng trng(derive_seed(latent_seed, 0x7a5));
  std::normal_distribution<double> noise(0.0, s.target_noise);
  item.targets.growth_rate = std::clamp(0.3 + 0.5 * item.targets.lesion_area + noise(trng), 0.0, 8.0);
  return item;
}

std::vector<CohortItem> synth_cohort(const SyntheticCohortSpec& spec) {
  spec.validate();
  std::vector<CohortItem> out;
  out.reserve(spec.count);
  for (std::size_t i = 0; i < spec.count; ++i) {
    const Laterality lat = i % 2 == 0 ? Laterality::OD : Laterality::OS;
    const int label = i % 4 < 2 ? 1 : 0;
    const std::string pid = "P" + std::to_string(10000 + i / 2).substr(1);
    out.push_back(synth_item(spec, derive_seed(spec.seed, i), lat, label, pid));
  }
  return out;
}

int hand_rule_label(const Volume& v) {
  return *std::max_element(v.voxels.begin(), v.voxels.end()) > 0.9 ? 1 : 0;
}

}  // namespace cubevit
