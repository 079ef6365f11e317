#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "cubevit/volume.hpp"

namespace cubevit {

struct SyntheticCohortSpec {
  std::uint64_t seed = 0;
  std::size_t count = 64;
  std::array<std::size_t, 3> volume{6, 32, 32};  // Z, H, W
  std::array<std::size_t, 2> enface{32, 32};     // H, W
  double layer_thickness = 1.5;                  // Gaussian sigma of a layer band, H voxels
  double lesion_radius = 0.18;                   // mean lesion radius, fraction of the field of view
  double field_of_view_mm = 6.0;
  double noise = 0.02;                           // uniform voxel noise amplitude
  double target_noise = 0.1;                     // stddev on the growth-rate target
  bool mirror_os = true;                         // OS items are W-mirrors of an OD template

  void validate() const;
};

struct RegressionTargets {
  double growth_rate = 0.0;  // primary, in [0, 8]
  double lesion_area = 0.0;  // auxiliary, mm^2
};

struct CohortItem {
  Volume volume;
  EnFaceImage ir;
  EnFaceImage faf;
  int label = 0;
  RegressionTargets targets;
  std::uint64_t latent_seed = 0;
};

/// One paired record drawn from `latent_seed`. An OS item is the W-mirror of
/// the OD item with the same latent seed.
CohortItem synth_item(const SyntheticCohortSpec& spec, std::uint64_t latent_seed, Laterality laterality,
                      int label, const std::string& patient_id);

/// Item i has latent seed derive_seed(seed, i), patient i / 2, laterality OD
/// for even i, and label 1 when i % 4 < 2.
std::vector<CohortItem> synth_cohort(const SyntheticCohortSpec& spec);

/// The planted rule: a lesion voxel is the only thing brighter than 0.9.
int hand_rule_label(const Volume& v);

}  // namespace cubevit
