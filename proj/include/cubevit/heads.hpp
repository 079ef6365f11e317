#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "cubevit/optim.hpp"
#include "cubevit/synth.hpp"
#include "cubevit/vit3d.hpp"

namespace cubevit {

/// Mean over the L token rows, L x D -> 1 x D.
Tensor pool_tokens(const Tensor& tokens);

/// Layer norm, dropout (training only), then an affine map to `outputs`.
struct ClassifierHead {
  std::string prefix = "head";
  std::size_t dim = 0;
  std::size_t outputs = 2;
  double dropout = 0.5;

  void init(ParamStore& store, Rng& rng) const;
  ad::Var forward(const ParamStore& store, const ad::Var& x, Rng* rng, bool training) const;
};

/// Mean over rows of the cross-entropy against (1 - eps) * onehot + eps / C.
ad::Var smoothed_ce_loss(const ad::Var& logits, std::span<const std::size_t> classes, double eps);
double smoothed_ce_loss(const Tensor& logits, std::span<const std::size_t> classes, double eps);

/// Per sample (|d| + d^2) + aux_weight * (|a| + a^2), averaged over the batch.
/// `pred` is N x 2 (primary, auxiliary); `targets` is N x 2.
ad::Var combined_regression_loss(const ad::Var& pred, const Tensor& targets, double aux_weight = 0.1);
double combined_regression_loss(double pred, double gt, double aux_pred, double aux_gt, double aux_weight = 0.1);

/// Mean of probs over [center - k, center + k] clipped to the valid range.
double aggregate_slice_predictions(std::span<const double> probs, std::size_t center, std::size_t k);

/// Slice z of a volume as a 1 x H x W volume.
Volume extract_slice(const Volume& v, std::size_t z);

using SliceEncoder = std::function<Tensor(const Volume& slice)>;  // 1 x H x W -> 1 x D
/// Mean of the per-slice embeddings.
Tensor multi_instance_embed(const Volume& v, const SliceEncoder& encoder);

enum class InputMode {
  kVolume,       // 3-D cube tokens over the whole volume
  kCenterSlice,  // planar encoder on slice Z / 2
  kAllSlices,    // planar encoder on every slice, embeddings averaged
};

enum class TaskKind {
  kExclusive,   // softmax over classes
  kMultiLabel,  // sigmoid per label
  kRegression,  // primary + auxiliary target
};

InputMode parse_input_mode(const std::string& s);
TaskKind parse_task_kind(const std::string& s);

struct LabeledSample {
  const Volume* volume = nullptr;
  std::vector<int> labels;  // one class index (exclusive) or one 0/1 per label
  RegressionTargets targets;
};

struct FinetuneConfig {
  CubeSpec cube;  // volume cube spec; slice modes use (1, h, w) on (1, H, W)
  ViTConfig encoder;
  InputMode mode = InputMode::kVolume;
  TaskKind task = TaskKind::kExclusive;
  std::size_t classes = 2;
  std::size_t epochs = 10;
  std::size_t batch_size = 1;
  double lr = 5e-3;
  double layer_decay = 0.65;
  double label_smoothing = 0.1;
  double dropout = 0.5;
  double aux_weight = 0.1;
  AdamWConfig adam{0.9, 0.999, 1e-8, 0.05};
  std::size_t folds = 1;        // > 1 runs k-fold and ensembles the chosen models
  double val_fraction = 0.0;    // single-fold hold-out; 0 validates on the training set
  std::uint64_t seed = 0;

  void validate() const;
  std::size_t outputs() const;
  CubeSpec encoder_cube() const;
};

struct EpochMetrics {
  std::size_t fold = 0;
  std::size_t epoch = 0;
  std::string split;
  double auroc = 0.0;  // classification
  double auprc = 0.0;
  double r2 = 0.0;     // regression, squared Pearson on the primary target
  double loss = 0.0;
};

/// Encoder plus head under one parameter store per fold.
class FinetuneModel {
 public:
  FinetuneModel() = default;
  explicit FinetuneModel(FinetuneConfig cfg);

  const FinetuneConfig& config() const noexcept { return cfg_; }
  const CubeVit& encoder() const noexcept { return encoder_; }
  const ClassifierHead& head() const noexcept { return head_; }

  void init(ParamStore& store, Rng& rng) const;
  /// B x D representation per the input mode.
  ad::Var represent(const ParamStore& store, std::span<const Volume* const> volumes) const;
  ad::Var logits(const ParamStore& store, std::span<const Volume* const> volumes, Rng* rng, bool training) const;
  /// Probabilities (classification) or raw (primary, auxiliary) outputs, one store.
  Tensor predict_one(const ParamStore& store, std::span<const Volume* const> volumes) const;
  /// Mean of predict_one over the fold models.
  Tensor predict(std::span<const Volume* const> volumes) const;

  std::vector<ParamStore> folds;

 private:
  FinetuneConfig cfg_;
  CubeVit encoder_;
  ClassifierHead head_;
};

struct FinetuneResult {
  FinetuneModel model;
  std::vector<EpochMetrics> history;
  std::vector<std::size_t> best_epochs;  // per fold
};

/// Scores every split of `history` the way model selection does.
EpochMetrics score_predictions(const FinetuneConfig& cfg, const Tensor& predictions,
                               std::span<const LabeledSample> data);

/// Deterministic given cfg.seed. Logs `epoch <e> split <name> auroc <v> auprc <v>`
/// (or `r2 <v>`). `init_from` supplies pre-trained encoder weights.
FinetuneResult finetune(std::span<const LabeledSample> data, const FinetuneConfig& cfg,
                        const ParamStore* init_from = nullptr, std::ostream* log = nullptr);

}  // namespace cubevit
