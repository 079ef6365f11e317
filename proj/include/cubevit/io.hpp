#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "cubevit/optim.hpp"
#include "cubevit/params.hpp"
#include "cubevit/synth.hpp"
#include "cubevit/volume.hpp"

namespace cubevit {

namespace fs = std::filesystem;

// VOL1: magic, u32 Z, H, W, then float32 voxels; all little-endian.
// ENF1: magic, u32 H, W, then float32 pixels.
// Metadata lives in a JSON sidecar at `<path>.json`.
void write_volume(const fs::path& path, const Volume& v);
Volume read_volume(const fs::path& path);
void write_enface(const fs::path& path, const EnFaceImage& img);
EnFaceImage read_enface(const fs::path& path);

/// Directory with cohort.json plus one VOL1 and two ENF1 files per item.
void write_cohort(const fs::path& dir, const std::vector<CohortItem>& items);
std::vector<CohortItem> read_cohort(const fs::path& dir);

// OCTK: magic, u32 version, u32 tensor count, then per tensor u32 name
// length, name bytes, u32 rank, u64 extents, float32 data.
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ParamStore params;
  bool has_optimizer = false;
  std::uint64_t optimizer_step = 0;
  std::map<std::string, AdamW::Moments> moments;
};

void save_checkpoint(const fs::path& path, const ParamStore& params, const AdamW* optimizer = nullptr);
Checkpoint load_checkpoint(const fs::path& path);

/// Loads checkpoint values into `target`; every tensor in the file must exist
/// in `target` with the same shape unless `allow_missing` skips unknown names.
void load_into(const fs::path& path, ParamStore& target, bool allow_missing = false);

}  // namespace cubevit
