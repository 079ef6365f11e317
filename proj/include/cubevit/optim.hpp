#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>

#include "cubevit/params.hpp"

namespace cubevit {

/// Linear warmup from 0 to `peak`, then cosine annealing down to `floor`.
/// Epoch counts are multiplied by steps-per-epoch to get step horizons.
struct ScheduleConfig {
  double peak_lr = 1.6e-3;
  std::size_t warmup_epochs = 5;
  std::size_t total_epochs = 50;
  double floor_lr = 0.0;

  void validate() const;
};

double lr_schedule(std::size_t step, const ScheduleConfig& cfg, std::size_t steps_per_epoch);

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.05;
};

// Gains, biases, positional tables, mask tokens and temperatures skip weight decay.
bool default_no_decay(const std::string& name);

/// AdamW with decoupled weight decay. A per-parameter lr multiplier of 0
/// freezes the parameter: neither the update nor the decay touches it.
class AdamW {
 public:
  using LrScale = std::function<double(const std::string&)>;
  using DecayFilter = std::function<bool(const std::string&)>;

  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

  void step(ParamStore& params, double lr, const LrScale& lr_scale = {},
            const DecayFilter& no_decay = default_no_decay);

  std::uint64_t steps() const noexcept { return step_; }
  const AdamWConfig& config() const noexcept { return cfg_; }

  struct Moments {
    Tensor m;
    Tensor v;
    std::uint64_t count = 0;  // updates applied to this parameter
  };
  const std::map<std::string, Moments>& moments() const noexcept { return moments_; }
  void restore(std::uint64_t step, std::map<std::string, Moments> moments);

 private:
  AdamWConfig cfg_;
  std::uint64_t step_ = 0;
  std::map<std::string, Moments> moments_;
};

}  // namespace cubevit
