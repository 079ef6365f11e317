#include "cubevit/mae3d.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>

#include "cubevit/errors.hpp"
#include "cubevit/preprocess.hpp"

namespace cubevit {

std::size_t visible_count(std::size_t length, double ratio) {
  if (!(ratio >= 0.0 && ratio < 1.0)) throw UsageError("mask ratio must be in [0, 1)");
  return static_cast<std::size_t>(std::llround((1.0 - ratio) * static_cast<double>(length)));
}

MaskPlan sample_mask(std::size_t length, double ratio, Rng& rng) {
  const std::size_t keep = visible_count(length, ratio);
  std::vector<std::size_t> order(length);
  std::iota(order.begin(), order.end(), 0);
  // Partial Fisher-Yates: the first `keep` slots are a uniform sample.
  for (std::size_t i = 0; i < keep && i + 1 < length; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, length - 1);
    std::swap(order[i], order[pick(rng)]);
  }
  MaskPlan plan;
  plan.ratio = ratio;
  plan.visible.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep));
  plan.masked.assign(order.begin() + static_cast<std::ptrdiff_t>(keep), order.end());
  std::sort(plan.visible.begin(), plan.visible.end());
  std::sort(plan.masked.begin(), plan.masked.end());
  return plan;
}

MaskPlan sample_mask(std::size_t length, double ratio, std::uint64_t seed) {
  Rng rng(seed);
  return sample_mask(length, ratio, rng);
}

ad::Var masked_mse(const ad::Var& prediction, const Tensor& target, std::span<const MaskPlan> plans,
                   bool include_visible) {
  if (prediction.shape() != target.shape()) {
    throw ShapeError("masked_mse: prediction " + shape_str(prediction.shape()) + " vs target " +
                     shape_str(target.shape()));
  }
  if (plans.empty()) throw UsageError("masked_mse needs at least one plan");
  const std::size_t L = plans[0].length();
  if (L * plans.size() != target.rows()) throw UsageError("mask plans do not cover the prediction rows");
  std::vector<std::size_t> rows;
  for (std::size_t b = 0; b < plans.size(); ++b) {
    if (plans[b].length() != L) throw UsageError("mask plans in a batch must share a length");
    if (include_visible) {
      for (std::size_t t = 0; t < L; ++t) rows.push_back(b * L + t);
    } else {
      for (auto t : plans[b].masked) rows.push_back(b * L + t);
    }
  }
  if (rows.empty()) throw UsageError("masked_mse: nothing is masked");
  ad::Var pred = ad::gather_rows(prediction, rows);
  Tensor tgt({rows.size(), target.cols()});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy_n(target.row(rows[i]).begin(), target.cols(), tgt.row(i).begin());
  }
  return ad::mean(ad::square(ad::sub(pred, ad::Var::constant(std::move(tgt)))));
}

MaskedAutoencoder::MaskedAutoencoder(MAEConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.encoder.validate();
  cfg_.decoder.validate();
  cfg_.cube.validate();
  visible_count(1, cfg_.mask_ratio);
  encoder_ = CubeVit{cfg_.cube, cfg_.encoder, "enc"};
}

void MaskedAutoencoder::init(ParamStore& store, Rng& rng) const {
  encoder_.init(store, rng);
  const auto g = cfg_.cube.grid();
  const std::size_t de = cfg_.encoder.dim, dd = cfg_.decoder.dim;
  store.add("dec.embed.w", xavier_uniform(de, dd, rng));
  store.add("dec.embed.b", Tensor({dd}, 0.0));
  store.add("dec.mask_token", normal_init({1, dd}, 0.02, rng));
  store.add("dec.pos_planar", normal_init({g[1] * g[2], dd}, 0.02, rng));
  store.add("dec.pos_depth", normal_init({g[0], dd}, 0.02, rng));
  init_transformer(store, "dec", cfg_.decoder, rng);
  store.add("dec.pred.w", xavier_uniform(dd, cfg_.cube.voxels_per_cube(), rng));
  store.add("dec.pred.b", Tensor({cfg_.cube.voxels_per_cube()}, 0.0));
}

MaskedAutoencoder::Output MaskedAutoencoder::forward(const ParamStore& store,
                                                     std::span<const Volume* const> volumes,
                                                     std::span<const MaskPlan> plans) const {
  const std::size_t L = encoder_.seq_len();
  if (plans.size() != volumes.size()) throw UsageError("one mask plan per volume required");
  for (const auto& p : plans) {
    if (p.length() != L) {
      throw UsageError("mask plan covers " + std::to_string(p.length()) + " tokens, volume has " +
                       std::to_string(L));
    }
    if (p.visible.size() != plans[0].visible.size()) throw UsageError("mask plans must keep equal counts");
  }
  const std::size_t nvis = plans[0].visible.size();
  if (nvis == 0) throw UsageError("mask plan leaves no visible tokens");

  Output out;
  out.target = patchify(volumes, cfg_.cube);
  ad::Var patches = ad::Var::constant(out.target);
  ad::Var tokens = ad::linear(patches, store.get("enc.embed.w"), store.get("enc.embed.b"));
  tokens = positional_encode(tokens, store.get("enc.pos_planar"), store.get("enc.pos_depth"));

  std::vector<std::size_t> vis_rows;
  vis_rows.reserve(nvis * plans.size());
  for (std::size_t b = 0; b < plans.size(); ++b)
    for (auto t : plans[b].visible) vis_rows.push_back(b * L + t);

  ad::Var latent = encode(ad::gather_rows(tokens, vis_rows), cfg_.encoder, store, "enc", nvis);
  ad::Var dec = ad::linear(latent, store.get("dec.embed.w"), store.get("dec.embed.b"));
  dec = ad::scatter_rows(dec, vis_rows, L * plans.size(), store.get("dec.mask_token"));
  dec = positional_encode(dec, store.get("dec.pos_planar"), store.get("dec.pos_depth"));
  dec = encode(dec, cfg_.decoder, store, "dec", L);
  out.prediction = ad::linear(dec, store.get("dec.pred.w"), store.get("dec.pred.b"));
  out.loss = masked_mse(out.prediction, out.target, plans, cfg_.loss_on_visible);
  return out;
}

double evaluate_mae(const MaskedAutoencoder& model, const ParamStore& store, std::span<const Volume> data,
                    std::uint64_t seed, std::size_t batch_size) {
  if (data.empty()) throw UsageError("evaluate_mae on an empty dataset");
  Rng rng(seed);
  const std::size_t L = model.encoder().seq_len();
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    const std::size_t n = std::min(batch_size, data.size() - start);
    std::vector<const Volume*> batch;
    std::vector<MaskPlan> plans;
    for (std::size_t i = 0; i < n; ++i) {
      batch.push_back(&data[start + i]);
      plans.push_back(sample_mask(L, model.config().mask_ratio, rng));
    }
    total += model.forward(store, batch, plans).loss.value()[0] * static_cast<double>(n);
    count += n;
  }
  return total / static_cast<double>(count);
}

void quantize_to_float(ParamStore& store) {
  for (const auto& [name, var] : store) {
    Tensor t = var.value();
    for (auto& v : t.data()) v = static_cast<double>(static_cast<float>(v));
    ad::Var h = var;
    h.set_value(std::move(t));
  }
}

PretrainResult pretrain(std::span<const Volume> data, const PretrainConfig& cfg, std::ostream* log) {
  if (data.empty()) throw UsageError("pretrain on an empty dataset");
  if (cfg.batch_size == 0 || cfg.accumulation == 0) throw UsageError("batch size and accumulation must be positive");
  for (const auto& v : data) {
    if (v.depth != cfg.mae.cube.volume[0] || v.height != cfg.mae.cube.volume[1] ||
        v.width != cfg.mae.cube.volume[2]) {
      throw UsageError("dataset volume extents do not match the cube spec");
    }
  }
  cfg.schedule.validate();
  MaskedAutoencoder model(cfg.mae);
  PretrainResult res;
  res.optimizer = AdamW(cfg.adam);
  Rng rng(cfg.seed);
  model.init(res.params, rng);
  const std::uint64_t eval_seed = derive_seed(cfg.seed, 0xE7A1);
  res.initial_eval_loss = evaluate_mae(model, res.params, data, eval_seed);

  const std::size_t per_step = cfg.batch_size * cfg.accumulation;
  const std::size_t steps_per_epoch = std::max<std::size_t>(1, data.size() / per_step);
  const std::size_t total = cfg.schedule.total_epochs * steps_per_epoch;
  const std::size_t limit = cfg.max_steps ? std::min(cfg.max_steps, total) : total;
  const std::size_t L = model.encoder().seq_len();

  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::bernoulli_distribution coin(0.5);
  std::size_t step = 0;
  for (std::size_t epoch = 0; step < limit; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_sum = 0.0;
    std::size_t epoch_steps = 0;
    for (std::size_t s = 0; s < steps_per_epoch && step < limit; ++s, ++step) {
      res.params.zero_grad();
      double step_loss = 0.0;
      for (std::size_t micro = 0; micro < cfg.accumulation; ++micro) {
        std::vector<Volume> augmented;
        augmented.reserve(cfg.batch_size);
        std::vector<MaskPlan> plans;
        for (std::size_t i = 0; i < cfg.batch_size; ++i) {
          const Volume& src = data[order[(s * per_step + micro * cfg.batch_size + i) % data.size()]];
          Volume v = src;
          if (cfg.flip_w && coin(rng)) v = flip_w(v);
          if (cfg.flip_z && coin(rng)) v = flip_z(v);
          augmented.push_back(std::move(v));
          plans.push_back(sample_mask(L, cfg.mae.mask_ratio, rng));
        }
        std::vector<const Volume*> batch;
        for (const auto& v : augmented) batch.push_back(&v);
        auto out = model.forward(res.params, batch, plans);
        const double value = out.loss.value()[0];
        if (!std::isfinite(value)) {
          throw NumericError("masked MSE diverged at step " + std::to_string(step),
                             static_cast<std::int64_t>(step));
        }
        step_loss += value / static_cast<double>(cfg.accumulation);
        ad::backward(ad::scale(out.loss, 1.0 / static_cast<double>(cfg.accumulation)));
      }
      const double lr = lr_schedule(step + 1, cfg.schedule, steps_per_epoch);
      res.optimizer.step(res.params, lr);
      res.step_losses.push_back(step_loss);
      epoch_sum += step_loss;
      ++epoch_steps;
      if (log) *log << "epoch " << epoch << " step " << step << " loss " << step_loss << '\n';
    }
    if (epoch_steps) res.epoch_losses.push_back(epoch_sum / static_cast<double>(epoch_steps));
  }
  res.steps = step;
  res.params.zero_grad();
  quantize_to_float(res.params);
  res.final_eval_loss = evaluate_mae(model, res.params, data, eval_seed);
  if (log) *log << "eval loss " << res.final_eval_loss << '\n';
  return res;
}

}  // namespace cubevit
