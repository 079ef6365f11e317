#pragma once

// Brute-force reference implementations used by the unit tests and the
// acceptance runner. Deliberately written the slow, obvious way.

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <random>
#include <vector>

#include "cubevit/autodiff.hpp"
#include "cubevit/volume.hpp"

namespace oracle {

using cubevit::Tensor;

// All (pos, neg) pairs: 1 for a win, 0.5 for a tie.
inline double auroc_pairs(const std::vector<double>& s, const std::vector<int>& y) {
  double wins = 0.0, pairs = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (y[i] != 1 || y[j] != 0) continue;
      pairs += 1.0;
      wins += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
    }
  return wins / pairs;
}

// Threshold at every distinct score, precision/recall counted from scratch.
inline double auprc_thresholds(const std::vector<double>& s, const std::vector<int>& y) {
  std::vector<double> t = s;
  std::sort(t.begin(), t.end(), std::greater<>());
  t.erase(std::unique(t.begin(), t.end()), t.end());
  const double pos = static_cast<double>(std::count(y.begin(), y.end(), 1));
  double ap = 0.0, prev_r = 0.0;
  for (double th : t) {
    double tp = 0.0, called = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i)
      if (s[i] >= th) {
        called += 1.0;
        tp += y[i];
      }
    const double r = tp / pos;
    ap += (r - prev_r) * (tp / called);
    prev_r = r;
  }
  return ap;
}

inline double balanced_accuracy_confusion(const std::vector<int>& pred, const std::vector<int>& y) {
  double m[2][2] = {{0, 0}, {0, 0}};
  for (std::size_t i = 0; i < y.size(); ++i) m[y[i]][pred[i]] += 1.0;
  return 0.5 * (m[1][1] / (m[1][0] + m[1][1]) + m[0][0] / (m[0][0] + m[0][1]));
}

inline double pearson_r2_direct(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sx += x[i];
    sy += y[i];
  }
  const double mx = sx / n, my = sy / n;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
    sxy += (x[i] - mx) * (y[i] - my);
  }
  const double r = sxy / std::sqrt(sxx * syy);
  return r * r;
}

// Sort candidate indices by (score desc, index asc) and find the position.
inline std::size_t rank_sorted(const std::vector<double>& row, std::size_t target) {
  std::vector<std::size_t> idx(row.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    return row[a] != row[b] ? row[a] > row[b] : a < b;
  });
  return static_cast<std::size_t>(std::find(idx.begin(), idx.end(), target) - idx.begin()) + 1;
}

inline std::vector<double> row_of(const Tensor& t, std::size_t r) {
  return {t.row(r).begin(), t.row(r).end()};
}

inline double laterality_sorted(const Tensor& s, const std::vector<cubevit::Laterality>& lat, std::size_t k) {
  double total = 0.0;
  for (std::size_t i = 0; i < s.rows(); ++i) {
    std::vector<std::pair<double, std::size_t>> c;
    for (std::size_t j = 0; j < s.cols(); ++j)
      if (j != i) c.push_back({-s.at(i, j), j});
    std::sort(c.begin(), c.end());
    double same = 0.0;
    for (std::size_t r = 0; r < k; ++r) same += lat[c[r].second] == lat[i] ? 1.0 : 0.0;
    total += same / static_cast<double>(k);
  }
  return total / static_cast<double>(s.rows());
}

// Every cut of a histogram, between-class variance from direct sums.
inline std::size_t otsu_exhaustive(const std::vector<double>& counts, const std::vector<double>& levels) {
  double n = 0.0, s = 0.0;
  for (std::size_t i = 0; i < counts.size(); ++i) {
    n += counts[i];
    s += counts[i] * levels[i];
  }
  double best = -1.0;
  std::size_t cut = counts.size();
  for (std::size_t k = 0; k + 1 < counts.size(); ++k) {
    double n0 = 0.0, s0 = 0.0;
    for (std::size_t i = 0; i <= k; ++i) {
      n0 += counts[i];
      s0 += counts[i] * levels[i];
    }
    const double n1 = n - n0;
    if (n0 == 0.0 || n1 == 0.0) continue;
    const double m0 = s0 / n0, m1 = (s - s0) / n1;
    const double v = (n0 / n) * (n1 / n) * (m0 - m1) * (m0 - m1);
    if (v > best) {
      best = v;
      cut = k;
    }
  }
  return cut;
}

// Linear-interpolated order statistic on a sorted copy.
inline double quantile_sorted(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(pos);
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  const double t = pos - static_cast<double>(lo);
  return t == 0.0 ? v[lo] : v[lo] + t * (v[hi] - v[lo]);
}

// Softmax(q k^T * scale) v with the full L x L score matrix in memory.
template <typename T>
std::vector<T> attention_dense(const std::vector<T>& q, const std::vector<T>& k, const std::vector<T>& v,
                               std::size_t l, std::size_t d) {
  const long double scale = 1.0L / std::sqrt(static_cast<long double>(d));
  std::vector<T> out(l * d);
  for (std::size_t i = 0; i < l; ++i) {
    std::vector<long double> s(l);
    long double mx = -INFINITY;
    for (std::size_t j = 0; j < l; ++j) {
      long double acc = 0;
      for (std::size_t c = 0; c < d; ++c) acc += static_cast<long double>(q[i * d + c]) * k[j * d + c];
      s[j] = acc * scale;
      mx = std::max(mx, s[j]);
    }
    long double z = 0;
    for (auto& x : s) z += (x = std::exp(x - mx));
    for (std::size_t c = 0; c < d; ++c) {
      long double acc = 0;
      for (std::size_t j = 0; j < l; ++j) acc += s[j] * v[j * d + c];
      out[i * d + c] = static_cast<T>(acc / z);
    }
  }
  return out;
}

// Central-difference directional probes. `f` rebuilds the graph from the
// current leaf values. Returns the worst relative error
// |analytic - numeric| / (|numeric| + 1e-8).
struct GradCheck {
  double max_rel_error = 0.0;
  std::size_t probes = 0;
};

inline GradCheck gradcheck(const std::function<cubevit::ad::Var()>& f, std::vector<cubevit::ad::Var> leaves,
                           std::size_t probes, std::uint64_t seed, double h = 1e-5) {
  using cubevit::ad::Var;
  for (auto& l : leaves) l.zero_grad();
  cubevit::ad::backward(f());
  std::vector<Tensor> grads;
  for (auto& l : leaves) grads.push_back(l.grad());
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  GradCheck out;
  for (std::size_t p = 0; p < probes; ++p) {
    std::vector<Tensor> dir, base;
    double analytic = 0.0;
    for (std::size_t i = 0; i < leaves.size(); ++i) {
      Tensor u(leaves[i].shape());
      for (auto& x : u.data()) x = nd(rng);
      for (std::size_t j = 0; j < u.numel(); ++j) analytic += u[j] * grads[i][j];
      dir.push_back(u);
      base.push_back(leaves[i].value());
    }
    auto shifted = [&](double step) {
      for (std::size_t i = 0; i < leaves.size(); ++i) {
        Tensor t = base[i];
        for (std::size_t j = 0; j < t.numel(); ++j) t[j] += step * dir[i][j];
        leaves[i].set_value(t);
      }
      return f().value()[0];
    };
    const double numeric = (shifted(h) - shifted(-h)) / (2.0 * h);
    for (std::size_t i = 0; i < leaves.size(); ++i) leaves[i].set_value(base[i]);
    out.max_rel_error = std::max(out.max_rel_error, std::abs(analytic - numeric) / (std::abs(numeric) + 1e-8));
    ++out.probes;
  }
  for (auto& l : leaves) l.zero_grad();
  return out;
}

}  // namespace oracle
