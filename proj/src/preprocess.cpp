#include "cubevit/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include "cubevit/errors.hpp"
#include "cubevit/tensor.hpp"

namespace cubevit {

namespace {

struct Tap {
  std::size_t lo, hi;
  double t;
};

std::vector<Tap> taps(std::size_t n_in, std::size_t n_out) {
  std::vector<Tap> out(n_out);
  for (std::size_t i = 0; i < n_out; ++i) {
    if (n_in == 1 || n_out == 1) {
      out[i] = {0, 0, 0.0};
      continue;
    }
    const double pos = static_cast<double>(i) * static_cast<double>(n_in - 1) / static_cast<double>(n_out - 1);
    const auto lo = std::min(static_cast<std::size_t>(std::floor(pos)), n_in - 1);
    const std::size_t hi = std::min(lo + 1, n_in - 1);
    out[i] = {lo, hi, pos - static_cast<double>(lo)};
  }
  return out;
}

double lerp(double a, double b, double t) { return t == 0.0 ? a : a + t * (b - a); }

std::string fmt(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

}  // namespace

std::vector<double> resample_line(std::span<const double> line, std::size_t n_out) {
  if (line.empty() || n_out == 0) throw UsageError("resample extents must be positive");
  std::vector<double> out(n_out);
  const auto tp = taps(line.size(), n_out);
  for (std::size_t i = 0; i < n_out; ++i) out[i] = lerp(line[tp[i].lo], line[tp[i].hi], tp[i].t);
  return out;
}

Volume resample_volume(const Volume& v, const std::array<std::size_t, 3>& target) {
  const auto [tz, th, tw] = target;
  if (tz == 0 || th == 0 || tw == 0) throw UsageError("resample target extents must be positive");
  if (v.size() == 0) throw UsageError("cannot resample an empty volume");
  if (tz == v.depth && th == v.height && tw == v.width) return v;

  const auto wz = taps(v.depth, tz), wh = taps(v.height, th), ww = taps(v.width, tw);
  // W pass, then H pass, then Z pass.
  std::vector<double> a(v.depth * v.height * tw);
  for (std::size_t zh = 0; zh < v.depth * v.height; ++zh) {
    const double* src = v.voxels.data() + zh * v.width;
    for (std::size_t x = 0; x < tw; ++x) a[zh * tw + x] = lerp(src[ww[x].lo], src[ww[x].hi], ww[x].t);
  }
  std::vector<double> b(v.depth * th * tw);
  for (std::size_t z = 0; z < v.depth; ++z)
    for (std::size_t y = 0; y < th; ++y)
      for (std::size_t x = 0; x < tw; ++x) {
        const double p = a[(z * v.height + wh[y].lo) * tw + x];
        const double q = a[(z * v.height + wh[y].hi) * tw + x];
        b[(z * th + y) * tw + x] = lerp(p, q, wh[y].t);
      }
  Volume out(tz, th, tw);
  out.meta = v.meta;
  for (std::size_t z = 0; z < tz; ++z)
    for (std::size_t yx = 0; yx < th * tw; ++yx) {
      out.voxels[z * th * tw + yx] = lerp(b[wz[z].lo * th * tw + yx], b[wz[z].hi * th * tw + yx], wz[z].t);
    }
  return out;
}

EnFaceImage resample_image(const EnFaceImage& img, std::size_t height, std::size_t width) {
  Volume v = resample_volume(img.as_volume(), {1, height, width});
  EnFaceImage out(height, width);
  out.pixels = std::move(v.voxels);
  out.meta = img.meta;
  return out;
}

double quantile(std::span<const double> values, double q, QuantileMethod method) {
  if (values.empty()) throw UsageError("quantile of an empty sample");
  if (!(q >= 0.0 && q <= 1.0)) throw UsageError("quantile must lie in [0, 1]");
  std::vector<double> s(values.begin(), values.end());
  std::sort(s.begin(), s.end());
  const double pos = q * static_cast<double>(s.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  if (method == QuantileMethod::kLower) return s[lo];
  const std::size_t hi = std::min(lo + 1, s.size() - 1);
  return lerp(s[lo], s[hi], pos - static_cast<double>(lo));
}

Volume clip_intensities(const Volume& v, double lo_q, double hi_q, QuantileMethod method) {
  if (!(lo_q >= 0.0 && lo_q < hi_q && hi_q <= 1.0)) {
    throw UsageError("clip quantiles must satisfy 0 <= lo < hi <= 1");
  }
  const double lo = quantile(v.voxels, lo_q, method);
  const double hi = quantile(v.voxels, hi_q, method);
  Volume out = v;
  for (auto& x : out.voxels) x = std::clamp(x, lo, hi);
  out.meta.steps.push_back("clip(" + fmt(lo_q) + "," + fmt(hi_q) + ")");
  return out;
}

std::size_t otsu_cut(std::span<const double> counts, std::span<const double> levels) {
  if (counts.size() != levels.size()) throw UsageError("otsu: counts and levels differ in length");
  double n = 0.0, s = 0.0;
  for (std::size_t i = 0; i < counts.size(); ++i) {
    if (counts[i] < 0.0) throw UsageError("otsu: negative histogram count");
    n += counts[i];
    s += counts[i] * levels[i];
  }
  double n0 = 0.0, s0 = 0.0;
  double best = -1.0;
  std::size_t best_cut = counts.size();
  for (std::size_t k = 0; k + 1 < counts.size(); ++k) {
    n0 += counts[k];
    s0 += counts[k] * levels[k];
    const double n1 = n - n0;
    if (n0 == 0.0 || n1 == 0.0) continue;
    const double mu0 = s0 / n0;
    const double mu1 = (s - s0) / n1;
    const double between = (n0 / n) * (n1 / n) * (mu0 - mu1) * (mu0 - mu1);
    if (between > best) {
      best = between;
      best_cut = k;
    }
  }
  if (best_cut == counts.size()) throw DegenerateInputError("otsu threshold needs two distinct populated levels");
  return best_cut;
}

double otsu_threshold(std::span<const double> values) {
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  std::vector<double> levels, counts;
  for (double v : sorted) {
    if (levels.empty() || levels.back() != v) {
      levels.push_back(v);
      counts.push_back(0.0);
    }
    counts.back() += 1.0;
  }
  return levels[otsu_cut(counts, levels)];
}

Volume otsu_depth_crop(const Volume& v, std::size_t bins) {
  if (bins < 2) throw UsageError("otsu histogram needs at least two bins");
  const auto [mn_it, mx_it] = std::minmax_element(v.voxels.begin(), v.voxels.end());
  const double mn = *mn_it, mx = *mx_it;
  if (mn == mx) throw DegenerateInputError("otsu crop of a constant volume");
  const double width = (mx - mn) / static_cast<double>(bins);
  std::vector<double> counts(bins, 0.0), levels(bins);
  for (std::size_t i = 0; i < bins; ++i) levels[i] = mn + (static_cast<double>(i) + 0.5) * width;
  auto bin_of = [&](double x) {
    return std::min(static_cast<std::size_t>((x - mn) / width), bins - 1);
  };
  for (double x : v.voxels) counts[bin_of(x)] += 1.0;
  const std::size_t cut = otsu_cut(counts, levels);

  std::size_t first = v.height, last = 0;
  for (std::size_t h = 0; h < v.height; ++h) {
    bool fg = false;
    for (std::size_t z = 0; z < v.depth && !fg; ++z)
      for (std::size_t w = 0; w < v.width && !fg; ++w) fg = bin_of(v.at(z, h, w)) > cut;
    if (fg) {
      first = std::min(first, h);
      last = h;
    }
  }
  Volume out(v.depth, last - first + 1, v.width);
  out.meta = v.meta;
  for (std::size_t z = 0; z < v.depth; ++z)
    for (std::size_t h = first; h <= last; ++h)
      for (std::size_t w = 0; w < v.width; ++w) out.at(z, h - first, w) = v.at(z, h, w);
  out.meta.steps.push_back("otsu_crop(" + std::to_string(first) + "," + std::to_string(last) + ")");
  return out;
}

Volume normalize_unit(const Volume& v) {
  const auto [mn_it, mx_it] = std::minmax_element(v.voxels.begin(), v.voxels.end());
  const double mn = *mn_it, range = *mx_it - *mn_it;
  Volume out = v;
  for (auto& x : out.voxels) x = range > 0.0 ? (x - mn) / range : 0.0;
  out.meta.steps.push_back("normalize");
  return out;
}

Volume flip_w(const Volume& v) {
  Volume out = v;
  for (std::size_t zh = 0; zh < v.depth * v.height; ++zh) {
    std::reverse(out.voxels.begin() + static_cast<std::ptrdiff_t>(zh * v.width),
                 out.voxels.begin() + static_cast<std::ptrdiff_t>((zh + 1) * v.width));
  }
  return out;
}

Volume flip_z(const Volume& v) {
  Volume out = v;
  const std::size_t plane = v.height * v.width;
  for (std::size_t z = 0; z < v.depth; ++z) {
    std::copy_n(v.voxels.begin() + static_cast<std::ptrdiff_t>((v.depth - 1 - z) * plane), plane,
                out.voxels.begin() + static_cast<std::ptrdiff_t>(z * plane));
  }
  return out;
}

EnFaceImage flip_w(const EnFaceImage& img) {
  EnFaceImage out = img;
  for (std::size_t h = 0; h < img.height; ++h) {
    std::reverse(out.pixels.begin() + static_cast<std::ptrdiff_t>(h * img.width),
                 out.pixels.begin() + static_cast<std::ptrdiff_t>((h + 1) * img.width));
  }
  return out;
}

Volume preprocess(const Volume& v, const PreprocessPolicy& policy) {
  Volume out = v;
  if (policy.clip_quantiles) out = clip_intensities(out, policy.clip_quantiles->first, policy.clip_quantiles->second);
  if (policy.otsu_crop) out = otsu_depth_crop(out);
  if (policy.resample_to) {
    out = resample_volume(out, *policy.resample_to);
    const auto& t = *policy.resample_to;
    out.meta.steps.push_back("resample(" + std::to_string(t[0]) + "," + std::to_string(t[1]) + "," +
                             std::to_string(t[2]) + ")");
  }
  if (policy.normalize) out = normalize_unit(out);
  Rng rng(policy.seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  if (policy.flip_w_prob > 0.0 && u(rng) < policy.flip_w_prob) {
    out = flip_w(out);
    out.meta.steps.push_back("flip_w");
  }
  if (policy.flip_z_prob > 0.0 && u(rng) < policy.flip_z_prob) {
    out = flip_z(out);
    out.meta.steps.push_back("flip_z");
  }
  return out;
}

}  // namespace cubevit
