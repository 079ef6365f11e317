#include "cubevit/trial.hpp"

#include <array>
#include <cmath>
#include <random>

#include "cubevit/errors.hpp"
#include "cubevit/tensor.hpp"

namespace cubevit {

namespace {

constexpr double kZ95 = 1.959963984540054;

void check_r(double r) {
  if (!(r >= 0.0 && r < 1.0)) throw UsageError("correlation must lie in [0, 1)");
}

EffectEstimate with_ci(double effect, double se) { return {effect, se, effect - kZ95 * se, effect + kZ95 * se}; }

EffectEstimate mean_difference(const std::vector<double>& c, const std::vector<double>& t) {
  auto stats = [](const std::vector<double>& x) {
    double m = 0.0;
    for (double v : x) m += v;
    m /= static_cast<double>(x.size());
    double ss = 0.0;
    for (double v : x) ss += (v - m) * (v - m);
    return std::pair{m, ss};
  };
  const auto [mc, ssc] = stats(c);
  const auto [mt, sst] = stats(t);
  const double nc = static_cast<double>(c.size()), nt = static_cast<double>(t.size());
  const double dof = nc + nt - 2.0;
  const double pooled = dof > 0.0 ? (ssc + sst) / dof : 0.0;
  return with_ci(mt - mc, std::sqrt(pooled * (1.0 / nc + 1.0 / nt)));
}

}  // namespace

ArmCorrelations ArmCorrelations::from_r2(double r2_control, double r2_treatment) {
  if (!(r2_control >= 0.0 && r2_control < 1.0) || !(r2_treatment >= 0.0 && r2_treatment < 1.0)) {
    throw UsageError("r^2 must lie in [0, 1)");
  }
  return {std::sqrt(r2_control), std::sqrt(r2_treatment)};
}

double ArmCorrelations::average() const {
  check_r(r_control);
  check_r(r_treatment);
  return (r_control + r_treatment) / 2.0;
}

double essi(const ArmCorrelations& c) {
  const double r = c.average();
  return (1.0 / (1.0 - r * r) - 1.0) * 100.0;
}

double effective_n(double n, double r_avg) {
  if (n < 1.0) throw UsageError("N must be at least 1");
  check_r(r_avg);
  return n / (1.0 - r_avg * r_avg);
}

double recruitment_diff(double n, double r_avg_1, double r_avg_2) {
  check_r(r_avg_1);
  check_r(r_avg_2);
  if (r_avg_2 > r_avg_1) throw UsageError("recruitment_diff expects the stronger model first");
  return effective_n(n, r_avg_1) - effective_n(n, r_avg_2);
}

AdjustedEffect adjusted_effect(const TrialArm& control, const TrialArm& treatment, Adjustment method) {
  if (control.empty() || treatment.empty()) throw UsageError("both trial arms need patients");
  std::vector<double> yc, yt;
  for (const auto& r : control) yc.push_back(r.outcome);
  for (const auto& r : treatment) yt.push_back(r.outcome);
  AdjustedEffect out;
  out.unadjusted = mean_difference(yc, yt);

  if (method == Adjustment::kSubtraction) {
    for (std::size_t i = 0; i < yc.size(); ++i) yc[i] -= control[i].covariate;
    for (std::size_t i = 0; i < yt.size(); ++i) yt[i] -= treatment[i].covariate;
    out.adjusted = mean_difference(yc, yt);
    return out;
  }

  // OLS on [1, treated, covariate] via 3x3 normal equations.
  std::array<std::array<double, 3>, 3> xtx{};
  std::array<double, 3> xty{};
  double cov_min = control.front().covariate, cov_max = cov_min;
  auto accumulate = [&](const TrialArm& arm, double treated) {
    for (const auto& r : arm) {
      const std::array<double, 3> x{1.0, treated, r.covariate};
      for (int i = 0; i < 3; ++i) {
        xty[i] += x[i] * r.outcome;
        for (int j = 0; j < 3; ++j) xtx[i][j] += x[i] * x[j];
      }
      cov_min = std::min(cov_min, r.covariate);
      cov_max = std::max(cov_max, r.covariate);
    }
  };
  accumulate(control, 0.0);
  accumulate(treatment, 1.0);
  if (cov_min == cov_max) throw DegenerateInputError("ANCOVA needs a non-constant covariate");

  // Inverse by cofactors.
  const auto& m = xtx;
  const double det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) -
                     m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0]) +
                     m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
  if (det == 0.0) throw DegenerateInputError("ANCOVA design matrix is singular");
  std::array<std::array<double, 3>, 3> inv{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      const int r0 = (j + 1) % 3, r1 = (j + 2) % 3, c0 = (i + 1) % 3, c1 = (i + 2) % 3;
      inv[i][j] = (m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0]) / det;
    }
  std::array<double, 3> beta{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) beta[i] += inv[i][j] * xty[j];

  double rss = 0.0;
  auto residuals = [&](const TrialArm& arm, double treated) {
    for (const auto& r : arm) {
      const double e = r.outcome - (beta[0] + beta[1] * treated + beta[2] * r.covariate);
      rss += e * e;
    }
  };
  residuals(control, 0.0);
  residuals(treatment, 1.0);
  const double dof = static_cast<double>(control.size() + treatment.size()) - 3.0;
  const double sigma2 = dof > 0.0 ? rss / dof : 0.0;
  out.adjusted = with_ci(beta[1], std::sqrt(std::max(0.0, sigma2 * inv[1][1])));
  return out;
}

TrialSimResult simulate_trials(const TrialSimConfig& cfg) {
  check_r(cfg.correlation);
  if (cfg.per_arm < 3 || cfg.reps < 2) throw UsageError("simulation needs per_arm >= 3 and reps >= 2");
  const double r = cfg.correlation;
  const double noise = std::sqrt(1.0 - r * r);

  double sum_eff = 0.0, sum_eff2 = 0.0, sum_unadj = 0.0, sum_unadj2 = 0.0;
  double sum_w_adj = 0.0, sum_w_unadj = 0.0, sum_se2_adj = 0.0, sum_se2_unadj = 0.0;
  for (std::size_t rep = 0; rep < cfg.reps; ++rep) {
    Rng rng(derive_seed(cfg.seed, rep));
    std::normal_distribution<double> z(0.0, 1.0);
    auto arm = [&](double delta) {
      TrialArm a(cfg.per_arm);
      for (auto& rec : a) {
        rec.covariate = z(rng);
        rec.outcome = r * rec.covariate + noise * z(rng) + delta;
      }
      return a;
    };
    const TrialArm control = arm(0.0);
    const TrialArm treated = arm(cfg.effect);
    const auto est = adjusted_effect(control, treated);
    sum_eff += est.adjusted.effect;
    sum_eff2 += est.adjusted.effect * est.adjusted.effect;
    sum_unadj += est.unadjusted.effect;
    sum_unadj2 += est.unadjusted.effect * est.unadjusted.effect;
    sum_w_adj += est.adjusted.ci_width();
    sum_w_unadj += est.unadjusted.ci_width();
    sum_se2_adj += est.adjusted.se * est.adjusted.se;
    sum_se2_unadj += est.unadjusted.se * est.unadjusted.se;
  }
  const double n = static_cast<double>(cfg.reps);
  TrialSimResult out;
  out.mean_effect = sum_eff / n;
  const double var_eff = (sum_eff2 - n * out.mean_effect * out.mean_effect) / (n - 1.0);
  const double mean_unadj = sum_unadj / n;
  const double var_unadj = (sum_unadj2 - n * mean_unadj * mean_unadj) / (n - 1.0);
  out.effect_mc_se = std::sqrt(var_eff / n);
  out.ci_width_ratio = sum_w_adj / sum_w_unadj;
  out.expected_ratio = std::sqrt(1.0 - r * r);
  out.realized_essi = (sum_se2_unadj / sum_se2_adj - 1.0) * 100.0;
  out.empirical_essi = (var_unadj / var_eff - 1.0) * 100.0;
  out.formula_essi = essi({r, r});
  return out;
}

}  // namespace cubevit
