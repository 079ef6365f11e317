#include "cubevit/optim.hpp"

#include <cmath>
#include <numbers>

#include "cubevit/errors.hpp"

namespace cubevit {

void ScheduleConfig::validate() const {
  if (warmup_epochs >= total_epochs) throw UsageError("warmup must be shorter than the schedule");
  if (floor_lr > peak_lr) throw UsageError("floor lr exceeds peak lr");
  if (peak_lr < 0 || floor_lr < 0) throw UsageError("learning rates must be non-negative");
}

double lr_schedule(std::size_t step, const ScheduleConfig& cfg, std::size_t steps_per_epoch) {
  cfg.validate();
  if (steps_per_epoch == 0) throw UsageError("steps_per_epoch must be positive");
  const double warmup = static_cast<double>(cfg.warmup_epochs * steps_per_epoch);
  const double total = static_cast<double>(cfg.total_epochs * steps_per_epoch);
  const double s = std::min(static_cast<double>(step), total);
  if (s < warmup) return cfg.peak_lr * s / warmup;
  const double progress = (s - warmup) / (total - warmup);
  return cfg.floor_lr + (cfg.peak_lr - cfg.floor_lr) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

bool default_no_decay(const std::string& name) {
  const auto dot = name.rfind('.');
  const std::string leaf = dot == std::string::npos ? name : name.substr(dot + 1);
  if (leaf == "b" || leaf == "g") return true;
  if (leaf.size() == 2 && leaf[0] == 'b') return true;  // attention biases bq, bk, bv, bo
  return name.find("pos_") != std::string::npos || name.find("mask_token") != std::string::npos ||
         name.find("logit_scale") != std::string::npos;
}

void AdamW::step(ParamStore& params, double lr, const LrScale& lr_scale, const DecayFilter& no_decay) {
  ++step_;
  for (const auto& [name, var] : params) {
    const double scale = lr_scale ? lr_scale(name) : 1.0;
    if (scale == 0.0 || !var.has_grad()) continue;
    const double plr = lr * scale;
    auto& mom = moments_[name];
    if (mom.m.numel() == 0) {
      mom.m = Tensor(var.shape(), 0.0);
      mom.v = Tensor(var.shape(), 0.0);
    }
    ++mom.count;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(mom.count));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(mom.count));
    const double wd = (no_decay && no_decay(name)) ? 0.0 : cfg_.weight_decay;
    const Tensor& g = var.node()->grad;
    Tensor p = var.value();
    for (std::size_t i = 0; i < p.numel(); ++i) {
      mom.m[i] = cfg_.beta1 * mom.m[i] + (1.0 - cfg_.beta1) * g[i];
      mom.v[i] = cfg_.beta2 * mom.v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
      const double mhat = mom.m[i] / bc1;
      const double vhat = mom.v[i] / bc2;
      p[i] -= plr * (mhat / (std::sqrt(vhat) + cfg_.eps) + wd * p[i]);
    }
    ad::Var handle = var;
    handle.set_value(std::move(p));
  }
}

void AdamW::restore(std::uint64_t step, std::map<std::string, Moments> moments) {
  step_ = step;
  moments_ = std::move(moments);
}

}  // namespace cubevit
