#include "cubevit/saliency.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <json.hpp>

#include "cubevit/errors.hpp"
#include "cubevit/io.hpp"

namespace cubevit {

SaliencyMap gradcam_map(const Tensor& a, const Tensor& g, const std::array<std::size_t, 3>& grid) {
  if (a.rank() != 2 || a.shape() != g.shape()) {
    throw ShapeError("activations and gradients must be equal L x C matrices");
  }
  const std::size_t l = a.rows(), c = a.cols();
  if (grid[0] * grid[1] * grid[2] != l) throw ShapeError("token count does not match the cube grid");

  std::vector<double> weight(c, 0.0);
  for (std::size_t k = 0; k < c; ++k) {
    double act_sum = 0.0;
    for (std::size_t i = 0; i < l; ++i) act_sum += a.at(i, k);
    for (std::size_t i = 0; i < l; ++i) {
      const double gi = g.at(i, k), g2 = gi * gi, g3 = g2 * gi;
      const double denom = 2.0 * g2 + act_sum * g3;
      const double alpha = denom != 0.0 ? g2 / denom : 0.0;
      weight[k] += alpha * std::max(gi, 0.0);
    }
  }
  SaliencyMap m;
  m.grid = grid;
  m.values.assign(l, 0.0);
  double peak = 0.0;
  for (std::size_t i = 0; i < l; ++i) {
    double s = 0.0;
    for (std::size_t k = 0; k < c; ++k) s += weight[k] * a.at(i, k);
    m.values[i] = std::max(s, 0.0);
    peak = std::max(peak, m.values[i]);
  }
  m.all_zero = !(peak > 0.0);
  if (!m.all_zero) {
    for (auto& v : m.values) v /= peak;
  }
  return m;
}

SaliencyMap gradcam_saliency(const FinetuneModel& model, const ParamStore& store, const Volume& volume,
                             std::size_t target, std::optional<std::size_t> block) {
  const auto& cfg = model.config();
  if (cfg.mode != InputMode::kVolume) throw UsageError("saliency needs a volume-mode model");
  if (target >= cfg.outputs()) throw UsageError("target output index out of range");
  const CubeVit& enc = model.encoder();
  const std::size_t depth = enc.config.depth;
  const std::size_t b = block.value_or(depth - 1);
  if (b >= depth) throw UsageError("block index out of range");
  const std::size_t l = enc.seq_len();

  const Volume* vols[] = {&volume};
  ad::Var x = run_blocks(enc.embed(store, vols), store, enc.prefix, enc.config, l, 0, b + 1);
  ad::Var act = ad::Var::parameter(x.value());
  ad::Var rest = run_blocks(act, store, enc.prefix, enc.config, l, b + 1, depth);
  ad::Var pooled = ad::segment_mean(final_norm(rest, store, enc.prefix), l);
  ad::Var out = model.head().forward(store, pooled, nullptr, false);
  ad::backward(ad::sum(ad::slice_cols(out, target, 1)));
  return gradcam_map(act.value(), act.grad(), enc.cube.grid());
}

Tensor upsample_bilinear(const Tensor& grid, std::size_t out_h, std::size_t out_w) {
  if (grid.rank() != 2 || out_h == 0 || out_w == 0) throw UsageError("upsample needs a 2-D grid and positive sizes");
  const std::size_t h = grid.rows(), w = grid.cols();
  auto taps = [](std::size_t n_in, std::size_t n_out, std::size_t i) {
    double pos = (static_cast<double>(i) + 0.5) * static_cast<double>(n_in) / static_cast<double>(n_out) - 0.5;
    pos = std::clamp(pos, 0.0, static_cast<double>(n_in - 1));
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, n_in - 1);
    return std::tuple{lo, hi, pos - static_cast<double>(lo)};
  };
  Tensor out({out_h, out_w});
  for (std::size_t y = 0; y < out_h; ++y) {
    const auto [y0, y1, ty] = taps(h, out_h, y);
    for (std::size_t x = 0; x < out_w; ++x) {
      const auto [x0, x1, tx] = taps(w, out_w, x);
      const double top = grid.at(y0, x0) * (1.0 - tx) + grid.at(y0, x1) * tx;
      const double bot = grid.at(y1, x0) * (1.0 - tx) + grid.at(y1, x1) * tx;
      out.at(y, x) = top * (1.0 - ty) + bot * ty;
    }
  }
  return out;
}

std::vector<Tensor> slice_views(const SaliencyMap& map, const CubeSpec& spec) {
  if (map.grid != spec.grid()) throw ShapeError("saliency grid does not match the cube spec");
  const auto [gz, gh, gw] = map.grid;
  std::vector<Tensor> out;
  for (std::size_t z = 0; z < spec.volume[0]; ++z) {
    const std::size_t iz = std::min(z / spec.cube[0], gz - 1);
    Tensor layer({gh, gw});
    for (std::size_t ih = 0; ih < gh; ++ih)
      for (std::size_t iw = 0; iw < gw; ++iw) layer.at(ih, iw) = map.at(iz, ih, iw);
    out.push_back(upsample_bilinear(layer, spec.volume[1], spec.volume[2]));
  }
  return out;
}

Tensor slow_scan_view(const SaliencyMap& map, std::size_t out_h, std::size_t out_w) {
  const auto [gz, gh, gw] = map.grid;
  Tensor plane({gz, gh}, 0.0);
  for (std::size_t iz = 0; iz < gz; ++iz)
    for (std::size_t ih = 0; ih < gh; ++ih) {
      double s = 0.0;
      for (std::size_t iw = 0; iw < gw; ++iw) s += map.at(iz, ih, iw);
      plane.at(iz, ih) = s / static_cast<double>(gw);
    }
  return upsample_bilinear(plane, out_h, out_w);
}

void export_saliency(const std::filesystem::path& dir, const SaliencyMap& map, const std::vector<Tensor>& slices,
                     const Tensor& slow_scan) {
  std::filesystem::create_directories(dir);
  auto write = [&](const std::string& name, const Tensor& t, const std::string& view) {
    EnFaceImage img(t.rows(), t.cols());
    img.pixels = t.vec();
    img.meta.modality = "SALIENCY_" + view;
    write_enface(dir / name, img);
  };
  nlohmann::json index;
  index["grid"] = map.grid;
  index["all_zero"] = map.all_zero;
  index["slices"] = nlohmann::json::array();
  for (std::size_t z = 0; z < slices.size(); ++z) {
    char name[32];
    std::snprintf(name, sizeof name, "slice_%03zu.enf", z);
    write(name, slices[z], "SLICE");
    index["slices"].push_back(name);
  }
  write("slow_scan.enf", slow_scan, "SLOW_SCAN");
  index["slow_scan"] = "slow_scan.enf";
  std::ofstream(dir / "index.json") << index.dump(2) << '\n';
}

}  // namespace cubevit
