#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <vector>

#include "cubevit/optim.hpp"
#include "cubevit/vit3d.hpp"

namespace cubevit {

/// Partition of token indices into the ones the encoder sees and the ones
/// the decoder must reconstruct. Both lists are sorted.
struct MaskPlan {
  std::vector<std::size_t> visible;
  std::vector<std::size_t> masked;
  double ratio = 0.0;

  std::size_t length() const noexcept { return visible.size() + masked.size(); }
  friend bool operator==(const MaskPlan&, const MaskPlan&) = default;
};

std::size_t visible_count(std::size_t length, double ratio);

/// Uniform sample without replacement of round((1 - ratio) * L) visible tokens.
MaskPlan sample_mask(std::size_t length, double ratio, Rng& rng);
MaskPlan sample_mask(std::size_t length, double ratio, std::uint64_t seed);

struct MAEConfig {
  CubeSpec cube;
  ViTConfig encoder;
  ViTConfig decoder{1, 4, 32, 4, VitRole::kDecoder};
  double mask_ratio = 0.9;
  bool loss_on_visible = false;  // include visible cubes in the reconstruction loss
};

/// Mean squared voxel error over the masked cubes of each sample (or all cubes
/// when include_visible is set), averaged over the batch.
/// prediction and target are (B*L) x (z*h*w).
ad::Var masked_mse(const ad::Var& prediction, const Tensor& target, std::span<const MaskPlan> plans,
                   bool include_visible = false);

class MaskedAutoencoder {
 public:
  explicit MaskedAutoencoder(MAEConfig cfg);

  const MAEConfig& config() const noexcept { return cfg_; }
  const CubeVit& encoder() const noexcept { return encoder_; }
  void init(ParamStore& store, Rng& rng) const;

  struct Output {
    ad::Var prediction;  // (B*L) x voxels-per-cube, every cube in token order
    ad::Var loss;
    Tensor target;
  };

  /// Encoder runs on visible tokens only; the decoder sees the full sequence
  /// with the mask token at masked slots, positional tables added after insertion.
  Output forward(const ParamStore& store, std::span<const Volume* const> volumes,
                 std::span<const MaskPlan> plans) const;

 private:
  MAEConfig cfg_;
  CubeVit encoder_;
};

struct PretrainConfig {
  MAEConfig mae;
  ScheduleConfig schedule{1e-3, 1, 10, 0.0};
  AdamWConfig adam{0.9, 0.95, 1e-8, 0.05};
  std::size_t batch_size = 4;
  std::size_t accumulation = 1;  // micro-batches per optimizer step
  std::size_t max_steps = 0;     // 0 runs the whole schedule
  bool flip_w = true;
  bool flip_z = false;
  std::uint64_t seed = 0;
};

struct PretrainResult {
  ParamStore params;
  AdamW optimizer;
  std::vector<double> step_losses;
  std::vector<double> epoch_losses;
  double initial_eval_loss = 0.0;
  double final_eval_loss = 0.0;
  std::size_t steps = 0;
};

/// Masked MSE with masks drawn from `seed`, no augmentation, whole dataset.
double evaluate_mae(const MaskedAutoencoder& model, const ParamStore& store,
                    std::span<const Volume> data, std::uint64_t seed, std::size_t batch_size = 8);

/// Deterministic given cfg.seed. Writes `epoch <e> step <s> loss <v>` lines to
/// `log` when given. Throws NumericError with the step index on a NaN loss.
PretrainResult pretrain(std::span<const Volume> data, const PretrainConfig& cfg, std::ostream* log = nullptr);

/// Rounds every parameter to the nearest float32, the checkpoint precision.
void quantize_to_float(ParamStore& store);

}  // namespace cubevit
