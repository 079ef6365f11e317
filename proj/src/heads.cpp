#include "cubevit/heads.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <ostream>

#include "cubevit/coep.hpp"
#include "cubevit/errors.hpp"
#include "cubevit/metrics.hpp"

namespace cubevit {

namespace {

Tensor smoothed_targets(std::span<const std::size_t> classes, std::size_t c, double eps) {
  if (!(eps >= 0.0 && eps < 1.0)) throw UsageError("label smoothing must lie in [0, 1)");
  Tensor t({classes.size(), c}, eps / static_cast<double>(c));
  for (std::size_t i = 0; i < classes.size(); ++i) {
    if (classes[i] >= c) {
      throw UsageError("class index " + std::to_string(classes[i]) + " out of range for " + std::to_string(c) +
                       " classes");
    }
    t.at(i, classes[i]) += 1.0 - eps;
  }
  return t;
}

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

template <typename Fn>
double or_nan(Fn&& fn) {
  try {
    return fn();
  } catch (const UsageError&) {
    return kNaN;
  } catch (const DegenerateInputError&) {
    return kNaN;
  }
}

}  // namespace

Tensor pool_tokens(const Tensor& tokens) {
  if (tokens.rank() != 2 || tokens.rows() == 0) throw UsageError("pool_tokens needs a non-empty L x D matrix");
  Tensor out({1, tokens.cols()}, 0.0);
  for (std::size_t r = 0; r < tokens.rows(); ++r)
    for (std::size_t c = 0; c < tokens.cols(); ++c) out[c] += tokens.at(r, c);
  for (auto& v : out.data()) v /= static_cast<double>(tokens.rows());
  return out;
}

void ClassifierHead::init(ParamStore& store, Rng& rng) const {
  store.add(prefix + ".ln.g", Tensor({dim}, 1.0));
  store.add(prefix + ".ln.b", Tensor({dim}, 0.0));
  store.add(prefix + ".fc.w", xavier_uniform(dim, outputs, rng));
  store.add(prefix + ".fc.b", Tensor({outputs}, 0.0));
}

ad::Var ClassifierHead::forward(const ParamStore& store, const ad::Var& x, Rng* rng, bool training) const {
  ad::Var h = ad::layer_norm(x, store.get(prefix + ".ln.g"), store.get(prefix + ".ln.b"));
  if (training && dropout > 0.0) {
    if (!rng) throw UsageError("training-mode dropout needs a generator");
    h = ad::dropout(h, dropout, *rng, true);
  }
  return ad::linear(h, store.get(prefix + ".fc.w"), store.get(prefix + ".fc.b"));
}

ad::Var smoothed_ce_loss(const ad::Var& logits, std::span<const std::size_t> classes, double eps) {
  if (logits.value().rank() != 2 || logits.value().rows() != classes.size()) {
    throw UsageError("one class index per logit row is required");
  }
  return ad::soft_cross_entropy(logits, smoothed_targets(classes, logits.value().cols(), eps));
}

double smoothed_ce_loss(const Tensor& logits, std::span<const std::size_t> classes, double eps) {
  return smoothed_ce_loss(ad::Var::constant(logits), classes, eps).value()[0];
}

ad::Var combined_regression_loss(const ad::Var& pred, const Tensor& targets, double aux_weight) {
  if (pred.shape() != targets.shape() || pred.value().rank() != 2 || pred.value().cols() != 2) {
    throw ShapeError("regression predictions and targets must both be N x 2");
  }
  ad::Var d = ad::sub(pred, ad::Var::constant(targets));
  ad::Var per = ad::add(ad::abs(d), ad::square(d));
  Tensor w(targets.shape(), 1.0);
  for (std::size_t i = 0; i < w.rows(); ++i) w.at(i, 1) = aux_weight;
  return ad::scale(ad::sum(ad::mul(per, ad::Var::constant(w))), 1.0 / static_cast<double>(targets.rows()));
}

double combined_regression_loss(double pred, double gt, double aux_pred, double aux_gt, double aux_weight) {
  const double d = pred - gt, a = aux_pred - aux_gt;
  return (std::abs(d) + d * d) + aux_weight * (std::abs(a) + a * a);
}

double aggregate_slice_predictions(std::span<const double> probs, std::size_t center, std::size_t k) {
  if (probs.empty()) throw UsageError("no slice predictions to aggregate");
  if (center >= probs.size()) throw UsageError("center slice out of range");
  const std::size_t lo = center >= k ? center - k : 0;
  const std::size_t hi = std::min(probs.size() - 1, center + k);
  double s = 0.0;
  for (std::size_t i = lo; i <= hi; ++i) s += probs[i];
  return s / static_cast<double>(hi - lo + 1);
}

Volume extract_slice(const Volume& v, std::size_t z) {
  if (z >= v.depth) throw UsageError("slice index out of range");
  Volume s(1, v.height, v.width);
  const std::size_t plane = v.height * v.width;
  std::copy_n(v.voxels.begin() + static_cast<std::ptrdiff_t>(z * plane), plane, s.voxels.begin());
  s.meta = v.meta;
  return s;
}

Tensor multi_instance_embed(const Volume& v, const SliceEncoder& encoder) {
  if (v.depth == 0) throw UsageError("multi_instance_embed needs at least one slice");
  Tensor acc;
  for (std::size_t z = 0; z < v.depth; ++z) {
    Tensor e = encoder(extract_slice(v, z));
    if (z == 0) {
      acc = Tensor(e.shape(), 0.0);
    } else if (e.shape() != acc.shape()) {
      throw ShapeError("slice encoder changed its output shape");
    }
    for (std::size_t i = 0; i < e.numel(); ++i) acc[i] += e[i];
  }
  for (auto& x : acc.data()) x /= static_cast<double>(v.depth);
  return acc;
}

InputMode parse_input_mode(const std::string& s) {
  if (s == "volume") return InputMode::kVolume;
  if (s == "center_slice") return InputMode::kCenterSlice;
  if (s == "all_slices") return InputMode::kAllSlices;
  throw UsageError("unknown input mode '" + s + "' (volume, center_slice, all_slices)");
}

TaskKind parse_task_kind(const std::string& s) {
  if (s == "exclusive" || s == "binary") return TaskKind::kExclusive;
  if (s == "multilabel") return TaskKind::kMultiLabel;
  if (s == "regression") return TaskKind::kRegression;
  throw UsageError("unknown task '" + s + "' (binary, exclusive, multilabel, regression)");
}

void FinetuneConfig::validate() const {
  encoder.validate();
  encoder_cube().validate();
  if (epochs == 0 || batch_size == 0) throw UsageError("epochs and batch_size must be positive");
  if (task != TaskKind::kRegression && classes < 2 && task == TaskKind::kExclusive) {
    throw UsageError("exclusive classification needs at least two classes");
  }
  if (task == TaskKind::kMultiLabel && classes < 1) throw UsageError("multi-label needs at least one label");
  if (!(lr > 0.0)) throw UsageError("lr must be positive");
  if (!(label_smoothing >= 0.0 && label_smoothing < 1.0)) throw UsageError("label_smoothing must lie in [0, 1)");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw UsageError("dropout must lie in [0, 1)");
  if (folds == 0) throw UsageError("folds must be at least 1");
  if (!(val_fraction >= 0.0 && val_fraction < 1.0)) throw UsageError("val_fraction must lie in [0, 1)");
}

std::size_t FinetuneConfig::outputs() const { return task == TaskKind::kRegression ? 2 : classes; }

CubeSpec FinetuneConfig::encoder_cube() const {
  if (mode == InputMode::kVolume) return cube;
  CubeSpec s = cube;
  s.cube = {1, cube.cube[1], cube.cube[2]};
  s.volume = {1, cube.volume[1], cube.volume[2]};
  return s;
}

FinetuneModel::FinetuneModel(FinetuneConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  encoder_ = CubeVit{cfg_.encoder_cube(), cfg_.encoder, "enc"};
  head_ = ClassifierHead{"head", cfg_.encoder.dim, cfg_.outputs(), cfg_.dropout};
}

void FinetuneModel::init(ParamStore& store, Rng& rng) const {
  encoder_.init(store, rng);
  head_.init(store, rng);
}

ad::Var FinetuneModel::represent(const ParamStore& store, std::span<const Volume* const> volumes) const {
  if (cfg_.mode == InputMode::kVolume) return encoder_.pooled(store, volumes);
  std::vector<Volume> slices;
  std::size_t per = 0;
  for (const Volume* v : volumes) {
    if (v->depth == 0) throw UsageError("volume has no slices");
    if (cfg_.mode == InputMode::kCenterSlice) {
      slices.push_back(extract_slice(*v, v->depth / 2));
      per = 1;
    } else {
      if (per != 0 && per != v->depth) throw UsageError("all-slices mode needs equal slice counts in a batch");
      per = v->depth;
      for (std::size_t z = 0; z < v->depth; ++z) slices.push_back(extract_slice(*v, z));
    }
  }
  std::vector<const Volume*> ptrs;
  for (const auto& s : slices) ptrs.push_back(&s);
  ad::Var pooled = encoder_.pooled(store, ptrs);
  return per == 1 ? pooled : ad::segment_mean(pooled, per);
}

ad::Var FinetuneModel::logits(const ParamStore& store, std::span<const Volume* const> volumes, Rng* rng,
                              bool training) const {
  return head_.forward(store, represent(store, volumes), rng, training);
}

Tensor FinetuneModel::predict_one(const ParamStore& store, std::span<const Volume* const> volumes) const {
  Tensor z = logits(store, volumes, nullptr, false).value();
  if (cfg_.task == TaskKind::kExclusive) return softmax(z, 1);
  if (cfg_.task == TaskKind::kMultiLabel) {
    for (auto& v : z.data()) v = 1.0 / (1.0 + std::exp(-v));
  }
  return z;
}

Tensor FinetuneModel::predict(std::span<const Volume* const> volumes) const {
  if (folds.empty()) throw UsageError("model has no trained folds");
  Tensor acc;
  for (std::size_t f = 0; f < folds.size(); ++f) {
    Tensor p = predict_one(folds[f], volumes);
    if (f == 0) {
      acc = std::move(p);
    } else {
      for (std::size_t i = 0; i < p.numel(); ++i) acc[i] += p[i];
    }
  }
  if (folds.size() > 1) {
    for (auto& v : acc.data()) v /= static_cast<double>(folds.size());
  }
  return acc;
}

EpochMetrics score_predictions(const FinetuneConfig& cfg, const Tensor& pred, std::span<const LabeledSample> data) {
  EpochMetrics m;
  if (cfg.task == TaskKind::kRegression) {
    std::vector<double> p, g;
    for (std::size_t i = 0; i < data.size(); ++i) {
      p.push_back(pred.at(i, 0));
      g.push_back(data[i].targets.growth_rate);
    }
    m.r2 = or_nan([&] { return pearson_r2(p, g); });
    return m;
  }
  if (cfg.task == TaskKind::kExclusive && cfg.classes == 2) {
    std::vector<double> s;
    std::vector<int> y;
    for (std::size_t i = 0; i < data.size(); ++i) {
      s.push_back(pred.at(i, 1));
      y.push_back(data[i].labels.at(0) == 1 ? 1 : 0);
    }
    m.auroc = or_nan([&] { return auroc(s, y); });
    m.auprc = or_nan([&] { return auprc(s, y); });
    return m;
  }
  // One-vs-rest (exclusive) or per-label (multi-label) macro averages.
  std::vector<std::vector<int>> y(data.size(), std::vector<int>(cfg.classes, 0));
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (cfg.task == TaskKind::kExclusive) {
      y[i].at(static_cast<std::size_t>(data[i].labels.at(0))) = 1;
    } else {
      for (std::size_t k = 0; k < cfg.classes; ++k) y[i][k] = data[i].labels.at(k);
    }
  }
  m.auroc = or_nan([&] { return macro_auroc(pred, y); });
  m.auprc = or_nan([&] { return macro_auprc(pred, y); });
  return m;
}

namespace {

void check_labels(const FinetuneConfig& cfg, std::span<const LabeledSample> data) {
  for (const auto& s : data) {
    if (!s.volume) throw UsageError("labeled sample has no volume");
    if (cfg.task == TaskKind::kExclusive) {
      if (s.labels.size() != 1 || s.labels[0] < 0 || static_cast<std::size_t>(s.labels[0]) >= cfg.classes) {
        throw UsageError("exclusive task needs one class index in [0, classes) per sample");
      }
    } else if (cfg.task == TaskKind::kMultiLabel && s.labels.size() != cfg.classes) {
      throw UsageError("multi-label task needs one 0/1 entry per label");
    }
  }
  if (cfg.task == TaskKind::kRegression) return;
  const std::size_t columns = cfg.task == TaskKind::kExclusive ? 1 : cfg.classes;
  for (std::size_t k = 0; k < columns; ++k) {
    const int first = data.front().labels[k];
    const bool varied = std::any_of(data.begin(), data.end(), [&](const auto& s) { return s.labels[k] != first; });
    if (!varied) throw UsageError("training labels contain a single class");
  }
}

ad::Var batch_loss(const FinetuneModel& model, const ParamStore& store, std::span<const LabeledSample> data,
                   std::span<const std::size_t> idx, Rng& rng) {
  const auto& cfg = model.config();
  std::vector<const Volume*> vols;
  for (auto i : idx) vols.push_back(data[i].volume);
  ad::Var z = model.logits(store, vols, &rng, true);
  if (cfg.task == TaskKind::kExclusive) {
    std::vector<std::size_t> cls;
    for (auto i : idx) cls.push_back(static_cast<std::size_t>(data[i].labels[0]));
    return smoothed_ce_loss(z, cls, cfg.label_smoothing);
  }
  if (cfg.task == TaskKind::kMultiLabel) {
    Tensor t({idx.size(), cfg.classes});
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (std::size_t k = 0; k < cfg.classes; ++k) {
        t.at(r, k) = data[idx[r]].labels[k] * (1.0 - cfg.label_smoothing) + cfg.label_smoothing / 2.0;
      }
    return ad::bce_with_logits(z, t);
  }
  Tensor t({idx.size(), 2});
  for (std::size_t r = 0; r < idx.size(); ++r) {
    t.at(r, 0) = data[idx[r]].targets.growth_rate;
    t.at(r, 1) = data[idx[r]].targets.lesion_area;
  }
  return combined_regression_loss(z, t, cfg.aux_weight);
}

Tensor predict_subset(const FinetuneModel& model, const ParamStore& store, std::span<const LabeledSample> data,
                      std::span<const std::size_t> idx) {
  std::vector<double> rows;
  std::size_t width = 0;
  for (std::size_t start = 0; start < idx.size(); start += 8) {
    std::vector<const Volume*> vols;
    for (std::size_t i = start; i < std::min(idx.size(), start + 8); ++i) vols.push_back(data[idx[i]].volume);
    Tensor p = model.predict_one(store, vols);
    width = p.cols();
    rows.insert(rows.end(), p.data().begin(), p.data().end());
  }
  return Tensor({idx.size(), width}, std::move(rows));
}

std::vector<LabeledSample> subset(std::span<const LabeledSample> data, std::span<const std::size_t> idx) {
  std::vector<LabeledSample> out;
  for (auto i : idx) out.push_back(data[i]);
  return out;
}

void log_metrics(std::ostream& log, const FinetuneConfig& cfg, const EpochMetrics& m) {
  log << "epoch " << m.epoch << " split " << m.split;
  if (cfg.task == TaskKind::kRegression) {
    log << " r2 " << m.r2;
  } else {
    log << " auroc " << m.auroc << " auprc " << m.auprc;
  }
  log << '\n';
}

}  // namespace

FinetuneResult finetune(std::span<const LabeledSample> data, const FinetuneConfig& cfg, const ParamStore* init_from,
                        std::ostream* log) {
  cfg.validate();
  if (data.size() < 2) throw UsageError("fine-tuning needs at least two samples");
  check_labels(cfg, data);

  FinetuneResult res;
  res.model = FinetuneModel(cfg);
  const FinetuneModel& model = res.model;

  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  Rng split_rng(derive_seed(cfg.seed, 0x5b1));
  std::shuffle(order.begin(), order.end(), split_rng);

  const LrPlan plan = layerwise_lr_plan(cfg.encoder.depth, cfg.layer_decay, 0, 1.0);
  const AdamW::LrScale scale = [&plan](const std::string& name) { return lr_multiplier(name, "enc", plan, 1.0); };

  for (std::size_t fold = 0; fold < cfg.folds; ++fold) {
    std::vector<std::size_t> train, val;
    if (cfg.folds > 1) {
      for (std::size_t i = 0; i < order.size(); ++i) (i % cfg.folds == fold ? val : train).push_back(order[i]);
    } else {
      const auto n_val = static_cast<std::size_t>(std::llround(cfg.val_fraction * static_cast<double>(order.size())));
      val.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
      train.assign(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());
      if (val.empty()) val = train;
    }
    if (train.empty()) throw UsageError("fold " + std::to_string(fold) + " has no training samples");
    std::sort(train.begin(), train.end());
    std::sort(val.begin(), val.end());
    const auto train_set = subset(data, train);
    check_labels(cfg, train_set);

    Rng rng(derive_seed(cfg.seed, fold));
    ParamStore store;
    model.init(store, rng);
    if (init_from) store.load_values(*init_from);
    AdamW opt(cfg.adam);
    const std::size_t spe = (train.size() + cfg.batch_size - 1) / cfg.batch_size;
    // One warmup epoch, dropped when there is only one epoch to train.
    const ScheduleConfig sched{cfg.lr, cfg.epochs > 1 ? 1u : 0u, cfg.epochs, 0.0};
    const std::string tag = cfg.folds > 1 ? "fold" + std::to_string(fold) + "." : "";

    double best = -std::numeric_limits<double>::infinity();
    ParamStore best_store;
    std::size_t best_epoch = 0;
    std::size_t step = 0;
    std::vector<std::size_t> perm = train;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
      std::shuffle(perm.begin(), perm.end(), rng);
      double loss_sum = 0.0;
      for (std::size_t b = 0; b < spe; ++b, ++step) {
        const std::size_t lo = b * cfg.batch_size, hi = std::min(perm.size(), lo + cfg.batch_size);
        store.zero_grad();
        ad::Var loss = batch_loss(model, store, data, std::span(perm).subspan(lo, hi - lo), rng);
        const double value = loss.value()[0];
        if (!std::isfinite(value)) {
          throw NumericError("fine-tuning loss diverged at step " + std::to_string(step),
                             static_cast<std::int64_t>(step));
        }
        loss_sum += value;
        ad::backward(loss);
        opt.step(store, lr_schedule(step + 1, sched, spe), scale);
      }
      store.zero_grad();

      for (const auto& [name, idx] : {std::pair{std::string("train"), &train}, std::pair{std::string("val"), &val}}) {
        EpochMetrics m = score_predictions(cfg, predict_subset(model, store, data, *idx), subset(data, *idx));
        m.fold = fold;
        m.epoch = epoch;
        m.split = tag + name;
        m.loss = name == "train" ? loss_sum / static_cast<double>(spe) : kNaN;
        if (log) log_metrics(*log, cfg, m);
        res.history.push_back(m);
        if (name == "val") {
          const double sel = cfg.task == TaskKind::kRegression ? m.r2 : m.auprc;
          if ((std::isfinite(sel) && sel > best) || best_store.size() == 0) {
            if (std::isfinite(sel)) best = sel;
            best_store = store.clone();
            best_epoch = epoch;
          }
        }
      }
    }
    res.model.folds.push_back(std::move(best_store));
    res.best_epochs.push_back(best_epoch);
  }
  return res;
}

}  // namespace cubevit
