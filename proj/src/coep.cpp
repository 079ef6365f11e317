#include "cubevit/coep.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>

#include "cubevit/errors.hpp"

namespace cubevit {

namespace {

Tensor identity_targets(std::size_t n) {
  Tensor t({n, n}, 0.0);
  for (std::size_t i = 0; i < n; ++i) t.at(i, i) = 1.0;
  return t;
}

void check_pair(const ad::Var& a, const ad::Var& b) {
  if (a.value().rank() != 2 || a.shape() != b.shape()) {
    throw ShapeError("contrastive batches must be equal-shaped N x D matrices, got " + shape_str(a.shape()) +
                     " and " + shape_str(b.shape()));
  }
}

ad::Var inv_temp_const(double temperature) {
  if (!(temperature > 0.0)) throw UsageError("temperature must be positive");
  return ad::Var::constant(Tensor::scalar(1.0 / temperature));
}

}  // namespace

ad::Var coep_loss(const ad::Var& a, const ad::Var& b, const ad::Var& inv_temperature) {
  check_pair(a, b);
  if (!(inv_temperature.value()[0] > 0.0)) throw UsageError("temperature must be positive");
  const std::size_t n = a.value().rows();
  ad::Var sim = ad::matmul_nt(ad::l2_normalize_rows(a), ad::l2_normalize_rows(b));
  ad::Var logits = ad::scale_by(sim, inv_temperature);
  const Tensor eye = identity_targets(n);
  ad::Var forward_dir = ad::soft_cross_entropy(logits, eye);
  ad::Var backward_dir = ad::soft_cross_entropy(ad::transpose(logits), eye);
  return ad::scale(ad::add(forward_dir, backward_dir), 0.5);
}

double coep_loss(const Tensor& a, const Tensor& b, double temperature) {
  return coep_loss(ad::Var::constant(a), ad::Var::constant(b), inv_temp_const(temperature)).value()[0];
}

ad::Var tri_coep_loss(const ad::Var& o, const ad::Var& i, const ad::Var& e, const ad::Var& inv_temperature) {
  if (o.value().rows() != i.value().rows() || o.value().rows() != e.value().rows()) {
    throw UsageError("tri-modal batches must have equal lengths");
  }
  ad::Var total = ad::add(ad::add(coep_loss(o, i, inv_temperature), coep_loss(o, e, inv_temperature)),
                          coep_loss(i, e, inv_temperature));
  return ad::scale(total, 1.0 / 3.0);
}

double tri_coep_loss(const Tensor& o, const Tensor& i, const Tensor& e, double temperature) {
  return tri_coep_loss(ad::Var::constant(o), ad::Var::constant(i), ad::Var::constant(e),
                       inv_temp_const(temperature))
      .value()[0];
}

LrPlan layerwise_lr_plan(std::size_t depth, double decay, std::size_t freeze_count, double base_lr) {
  if (!(decay > 0.0 && decay <= 1.0)) throw UsageError("layer decay must be in (0, 1]");
  if (freeze_count > depth) throw UsageError("cannot freeze more blocks than the encoder has");
  LrPlan plan;
  plan.head = base_lr;
  plan.layers.resize(depth);
  for (std::size_t i = 0; i < depth; ++i) {
    plan.layers[i] = i < freeze_count ? 0.0 : base_lr * std::pow(decay, static_cast<double>(depth - i));
  }
  plan.embedding = freeze_count > 0 ? 0.0 : base_lr * std::pow(decay, static_cast<double>(depth + 1));
  return plan;
}

double lr_multiplier(const std::string& name, const std::string& prefix, const LrPlan& plan, double base_lr) {
  if (base_lr <= 0.0) throw UsageError("base lr must be positive");
  const std::string p = prefix + ".";
  if (name.compare(0, p.size(), p) != 0) return 1.0;
  const std::string rest = name.substr(p.size());
  if (rest.rfind("blocks.", 0) == 0) {
    const std::size_t idx = std::stoul(rest.substr(7, 2));
    if (idx >= plan.layers.size()) throw UsageError("parameter '" + name + "' has no lr plan entry");
    return plan.layers[idx] / base_lr;
  }
  if (rest.rfind("embed.", 0) == 0 || rest.rfind("pos_", 0) == 0) return plan.embedding / base_lr;
  return plan.head / base_lr;
}

void ProjectionHead::init(ParamStore& store, Rng& rng) const {
  store.add(prefix + ".fc1.w", xavier_uniform(dim, dim, rng));
  store.add(prefix + ".fc1.b", Tensor({dim}, 0.0));
  store.add(prefix + ".fc2.w", xavier_uniform(dim, dim, rng));
  store.add(prefix + ".fc2.b", Tensor({dim}, 0.0));
}

ad::Var ProjectionHead::forward(const ParamStore& store, const ad::Var& x) const {
  ad::Var h = ad::gelu(ad::linear(x, store.get(prefix + ".fc1.w"), store.get(prefix + ".fc1.b")));
  return ad::linear(h, store.get(prefix + ".fc2.w"), store.get(prefix + ".fc2.b"));
}

AlignModel AlignModel::make(const CubeSpec& volume_cube, const ViTConfig& volume_cfg, const CubeSpec& enface_cube,
                            const ViTConfig& enface_cfg) {
  if (enface_cube.volume[0] != 1 || enface_cube.cube[0] != 1) {
    throw UsageError("en-face cube spec must be planar (depth 1)");
  }
  if (volume_cfg.dim != enface_cfg.dim) throw UsageError("volume and en-face encoders must share a width");
  AlignModel m;
  m.volume_encoder = CubeVit{volume_cube, volume_cfg, "enc"};
  m.enface_encoder = CubeVit{enface_cube, enface_cfg, "enf"};
  m.volume_head = ProjectionHead{"proj.vol", volume_cfg.dim};
  m.ir_head = ProjectionHead{"proj.ir", enface_cfg.dim};
  m.faf_head = ProjectionHead{"proj.faf", enface_cfg.dim};
  return m;
}

void AlignModel::init(ParamStore& store, Rng& rng) const {
  volume_encoder.init(store, rng);
  enface_encoder.init(store, rng);
  volume_head.init(store, rng);
  ir_head.init(store, rng);
  faf_head.init(store, rng);
  store.add("logit_scale", Tensor::scalar(std::log(1.0 / kInitialTemperature)));
}

ad::Var AlignModel::embed_volumes(const ParamStore& store, std::span<const Volume* const> vols) const {
  return volume_head.forward(store, volume_encoder.pooled(store, vols));
}

ad::Var AlignModel::embed_enface(const ParamStore& store, std::span<const Volume* const> images, bool faf) const {
  ad::Var pooled = enface_encoder.pooled(store, images);
  return (faf ? faf_head : ir_head).forward(store, pooled);
}

ad::Var AlignModel::inv_temperature(const ParamStore& store) const { return ad::exp(store.get("logit_scale")); }

double temperature(const ParamStore& store) { return std::exp(-store.get("logit_scale").value()[0]); }

void clamp_temperature(ParamStore& store) {
  ad::Var s = store.get("logit_scale");
  const double lo = std::log(1.0 / kMaxTemperature), hi = std::log(1.0 / kMinTemperature);
  const double v = std::clamp(s.value()[0], lo, hi);
  if (v != s.value()[0]) s.set_value(Tensor::scalar(v));
}

AlignResult align_train(std::span<const AlignSample> data, const AlignConfig& cfg, const ParamStore* init_from,
                        std::ostream* log) {
  if (data.size() < 2) throw UsageError("contrastive alignment needs at least two pairs");
  for (const auto& s : data) {
    if (!s.volume || !s.ir || (cfg.tri_modal && !s.faf)) throw UsageError("alignment sample is missing a modality");
  }
  if (cfg.batch_size < 2) throw UsageError("contrastive batch size must be at least 2");
  const AlignModel model = AlignModel::make(cfg.volume_cube, cfg.volume_cfg, cfg.enface_cube, cfg.enface_cfg);
  AlignResult res;
  Rng rng(cfg.seed);
  model.init(res.params, rng);
  if (init_from) res.params.load_values(*init_from);

  const LrPlan plan = layerwise_lr_plan(cfg.volume_cfg.depth, cfg.layer_decay, cfg.freeze_blocks, 1.0);
  const AdamW::LrScale scale = [&plan](const std::string& name) { return lr_multiplier(name, "enc", plan, 1.0); };
  const ScheduleConfig sched{cfg.lr, cfg.warmup_steps, std::max(cfg.steps, cfg.warmup_steps + 1), 0.0};
  AdamW opt(cfg.adam);

  const std::size_t batch = std::min(cfg.batch_size, data.size());
  const std::size_t per_epoch = data.size() / batch;
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = per_epoch;  // forces a shuffle on the first step
  std::size_t epoch = 0;

  auto batch_loss = [&](std::span<const std::size_t> idx) {
    std::vector<const Volume*> vols, irs, fafs;
    for (auto i : idx) {
      vols.push_back(data[i].volume);
      irs.push_back(data[i].ir);
      if (cfg.tri_modal) fafs.push_back(data[i].faf);
    }
    ad::Var o = model.embed_volumes(res.params, vols);
    ad::Var ir = model.embed_enface(res.params, irs, false);
    ad::Var inv_t = model.inv_temperature(res.params);
    if (!cfg.tri_modal) return coep_loss(o, ir, inv_t);
    return tri_coep_loss(o, ir, model.embed_enface(res.params, fafs, true), inv_t);
  };

  for (std::size_t step = 0; step < cfg.steps; ++step) {
    if (cursor >= per_epoch) {
      std::shuffle(order.begin(), order.end(), rng);
      cursor = 0;
      if (step) ++epoch;
    }
    std::span<const std::size_t> idx(order.data() + cursor * batch, batch);
    ++cursor;
    res.params.zero_grad();
    ad::Var loss = batch_loss(idx);
    const double value = loss.value()[0];
    if (!std::isfinite(value)) {
      throw NumericError("contrastive loss diverged at step " + std::to_string(step), static_cast<std::int64_t>(step));
    }
    if (step == 0) res.initial_loss = value;
    ad::backward(loss);
    opt.step(res.params, lr_schedule(step + 1, sched, 1), scale);
    clamp_temperature(res.params);
    res.losses.push_back(value);
    if (log) *log << "epoch " << epoch << " step " << step << " loss " << value << '\n';
  }
  res.steps = cfg.steps;
  res.params.zero_grad();
  return res;
}

namespace {

template <typename Fn>
Tensor embed_batches(std::size_t n, std::size_t batch, Fn&& fn) {
  std::vector<double> rows;
  std::size_t width = 0;
  for (std::size_t start = 0; start < n; start += batch) {
    const std::size_t len = std::min(batch, n - start);
    ad::Var e = fn(start, len);
    width = e.value().cols();
    rows.insert(rows.end(), e.value().data().begin(), e.value().data().end());
  }
  return Tensor({n, width}, std::move(rows));
}

}  // namespace

Tensor embed_all_volumes(const AlignModel& model, const ParamStore& store, std::span<const AlignSample> data,
                         std::size_t batch) {
  return embed_batches(data.size(), batch, [&](std::size_t start, std::size_t len) {
    std::vector<const Volume*> vols;
    for (std::size_t i = 0; i < len; ++i) vols.push_back(data[start + i].volume);
    return model.embed_volumes(store, vols);
  });
}

Tensor embed_all_enface(const AlignModel& model, const ParamStore& store, std::span<const AlignSample> data, bool faf,
                        std::size_t batch) {
  return embed_batches(data.size(), batch, [&](std::size_t start, std::size_t len) {
    std::vector<const Volume*> imgs;
    for (std::size_t i = 0; i < len; ++i) imgs.push_back(faf ? data[start + i].faf : data[start + i].ir);
    return model.embed_enface(store, imgs, faf);
  });
}

}  // namespace cubevit
