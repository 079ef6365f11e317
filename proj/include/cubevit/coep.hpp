#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "cubevit/optim.hpp"
#include "cubevit/vit3d.hpp"

namespace cubevit {

inline constexpr double kMinTemperature = 0.01;
inline constexpr double kMaxTemperature = 100.0;
inline constexpr double kInitialTemperature = 0.07;

/// Symmetric InfoNCE over cosine similarities: rows of `a` against rows of
/// `b` and back, averaged. `inv_temperature` is a 1-element Var holding 1/tau.
ad::Var coep_loss(const ad::Var& a, const ad::Var& b, const ad::Var& inv_temperature);
double coep_loss(const Tensor& a, const Tensor& b, double temperature);

/// Mean of the three pairwise losses between the modalities.
ad::Var tri_coep_loss(const ad::Var& o, const ad::Var& i, const ad::Var& e, const ad::Var& inv_temperature);
double tri_coep_loss(const Tensor& o, const Tensor& i, const Tensor& e, double temperature);

/// Per-layer learning rates for a transformer stack of `depth` blocks.
/// Block i (0 = input side) gets base * decay^(depth - i), the head gets base,
/// the patch/positional embeddings get base * decay^(depth + 1). Blocks below
/// freeze_count get 0, and the embeddings are frozen whenever any block is.
struct LrPlan {
  std::vector<double> layers;
  double embedding = 0.0;
  double head = 0.0;
};

LrPlan layerwise_lr_plan(std::size_t depth, double decay, std::size_t freeze_count, double base_lr);

/// Multiplier (relative to base) for a parameter name under `prefix`, using
/// the plan's block/embedding/head assignment. Names outside the prefix get 1.
double lr_multiplier(const std::string& name, const std::string& prefix, const LrPlan& plan, double base_lr);

/// Affine -> GELU -> affine, width-preserving, no dropout.
struct ProjectionHead {
  std::string prefix;
  std::size_t dim = 0;

  void init(ParamStore& store, Rng& rng) const;
  ad::Var forward(const ParamStore& store, const ad::Var& x) const;
};

/// Volume encoder, one shared en-face encoder, a projection head per
/// modality and a learnable temperature stored as log(1/tau).
struct AlignModel {
  CubeVit volume_encoder;
  CubeVit enface_encoder;
  ProjectionHead volume_head;
  ProjectionHead ir_head;
  ProjectionHead faf_head;

  static AlignModel make(const CubeSpec& volume_cube, const ViTConfig& volume_cfg, const CubeSpec& enface_cube,
                         const ViTConfig& enface_cfg);

  void init(ParamStore& store, Rng& rng) const;
  ad::Var embed_volumes(const ParamStore& store, std::span<const Volume* const> vols) const;
  // Images are passed as 1 x H x W volumes.
  ad::Var embed_enface(const ParamStore& store, std::span<const Volume* const> images, bool faf) const;
  ad::Var inv_temperature(const ParamStore& store) const;
};

double temperature(const ParamStore& store);
void clamp_temperature(ParamStore& store);

struct AlignSample {
  const Volume* volume = nullptr;
  const Volume* ir = nullptr;   // 1 x H x W
  const Volume* faf = nullptr;  // optional third modality
};

struct AlignConfig {
  CubeSpec volume_cube;
  ViTConfig volume_cfg;
  CubeSpec enface_cube;
  ViTConfig enface_cfg;
  bool tri_modal = false;
  std::size_t batch_size = 16;
  std::size_t steps = 200;
  std::size_t warmup_steps = 20;
  double lr = 1e-3;
  AdamWConfig adam{0.9, 0.98, 1e-8, 0.05};
  double layer_decay = 1.0;        // on the volume encoder
  std::size_t freeze_blocks = 0;   // input-side volume encoder blocks held fixed
  std::size_t eval_every = 0;      // 0: only at the end
  std::uint64_t seed = 0;
};

struct AlignResult {
  ParamStore params;
  std::vector<double> losses;
  double initial_loss = 0.0;
  std::size_t steps = 0;
};

/// Deterministic given cfg.seed. Logs `epoch <e> step <s> loss <v>`.
/// A pre-trained volume encoder can be supplied through `init_from`
/// (parameters named like the volume encoder's are copied in).
AlignResult align_train(std::span<const AlignSample> data, const AlignConfig& cfg,
                        const ParamStore* init_from = nullptr, std::ostream* log = nullptr);

/// Embeddings for every sample, in order; rows are projection-head outputs.
Tensor embed_all_volumes(const AlignModel& model, const ParamStore& store, std::span<const AlignSample> data,
                         std::size_t batch = 16);
Tensor embed_all_enface(const AlignModel& model, const ParamStore& store, std::span<const AlignSample> data,
                        bool faf, std::size_t batch = 16);

}  // namespace cubevit
