#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

namespace cubevit {

/// Outcome/covariate correlations per arm, canonical form r (not r^2).
struct ArmCorrelations {
  double r_control = 0.0;
  double r_treatment = 0.0;

  static ArmCorrelations from_r2(double r2_control, double r2_treatment);
  double average() const;
};

/// Percent, (1 / (1 - r_avg^2) - 1) * 100.
double essi(const ArmCorrelations& c);
/// N / (1 - r_avg^2).
double effective_n(double n, double r_avg);
/// N * (1 / (1 - r1^2) - 1 / (1 - r2^2)); needs r2 <= r1 < 1.
double recruitment_diff(double n, double r_avg_1, double r_avg_2);

struct TrialRecord {
  double outcome = 0.0;
  double covariate = 0.0;
};
using TrialArm = std::vector<TrialRecord>;

struct EffectEstimate {
  double effect = 0.0;
  double se = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
  double ci_width() const { return ci_high - ci_low; }
};

enum class Adjustment {
  kAncova,       // outcome ~ 1 + treatment + covariate
  kSubtraction,  // difference of means of (outcome - covariate)
};

struct AdjustedEffect {
  EffectEstimate adjusted;
  EffectEstimate unadjusted;  // plain difference of means
};

AdjustedEffect adjusted_effect(const TrialArm& control, const TrialArm& treatment,
                               Adjustment method = Adjustment::kAncova);

struct TrialSimConfig {
  std::size_t per_arm = 400;
  double correlation = 0.7;  // planted outcome/covariate correlation
  double effect = 0.5;
  std::size_t reps = 1000;
  std::uint64_t seed = 0;
};

struct TrialSimResult {
  double mean_effect = 0.0;          // mean adjusted estimate
  double effect_mc_se = 0.0;         // Monte-Carlo standard error of that mean
  double ci_width_ratio = 0.0;       // mean adjusted width / mean unadjusted width
  double expected_ratio = 0.0;       // sqrt(1 - r^2)
  double realized_essi = 0.0;        // percent, from mean squared standard errors
  double empirical_essi = 0.0;       // percent, from the spread of the estimates
  double formula_essi = 0.0;         // percent
};

/// Outcome = covariate-driven signal + treatment effect + noise with unit
/// marginal variance; repetition i draws from derive_seed(seed, i).
TrialSimResult simulate_trials(const TrialSimConfig& cfg);

}  // namespace cubevit
