#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>

#include "cubevit/errors.hpp"
#include "cubevit/io.hpp"
#include "cubevit/saliency.hpp"

using namespace cubevit;

namespace {

// Grad-CAM++ written out per token and channel.
std::vector<double> gradcam_direct(const Tensor& a, const Tensor& g) {
  const std::size_t L = a.rows(), C = a.cols();
  std::vector<double> w(C, 0.0), map(L, 0.0);
  for (std::size_t c = 0; c < C; ++c) {
    double s = 0.0;
    for (std::size_t l = 0; l < L; ++l) s += a.at(l, c);
    for (std::size_t l = 0; l < L; ++l) {
      const double gg = g.at(l, c);
      const double den = 2 * gg * gg + s * gg * gg * gg;
      const double alpha = den == 0.0 ? 0.0 : gg * gg / den;
      w[c] += alpha * std::max(gg, 0.0);
    }
  }
  double mx = 0.0;
  for (std::size_t l = 0; l < L; ++l) {
    for (std::size_t c = 0; c < C; ++c) map[l] += w[c] * a.at(l, c);
    map[l] = std::max(map[l], 0.0);
    mx = std::max(mx, map[l]);
  }
  if (mx > 0) for (auto& v : map) v /= mx;
  return map;
}

}  // namespace

TEST(GradCam, SingleTokenHandCases) {
  // alpha_0 = 0.25 / (0.5 + 2 * 0.125) = 1/3, w_0 = 1/6; alpha_1 = 1 / (2 + s g) with s = A_1.
  const Tensor g({1, 2}, {0.5, 1.0});
  const auto pos = gradcam_map(Tensor({1, 2}, {2.0, 1.0}), g, {1, 1, 1});
  EXPECT_FALSE(pos.all_zero);
  EXPECT_EQ(pos.values, std::vector<double>{1.0});
  const auto neg = gradcam_map(Tensor({1, 2}, {2.0, -1.0}), g, {1, 1, 1});
  EXPECT_TRUE(neg.all_zero);
  EXPECT_EQ(neg.values, std::vector<double>{0.0});
}

TEST(GradCam, ZeroGradientGivesAllZeroMap) {
  Rng rng(1);
  const auto m = gradcam_map(Tensor::randn({8, 3}, rng), Tensor({8, 3}, 0.0), {2, 2, 2});
  EXPECT_TRUE(m.all_zero);
  for (double v : m.values) EXPECT_EQ(v, 0.0);
}

TEST(GradCam, MatchesDirectFormulaAndIsNormalized) {
  Rng rng(2);
  for (int t = 0; t < 50; ++t) {
    const Tensor a = Tensor::randn({12, 5}, rng), g = Tensor::randn({12, 5}, rng);
    const auto m = gradcam_map(a, g, {3, 2, 2});
    const auto want = gradcam_direct(a, g);
    for (std::size_t i = 0; i < 12; ++i) ASSERT_NEAR(m.values[i], want[i], 1e-12);
    for (double v : m.values) ASSERT_GE(v, 0.0);
    if (!m.all_zero) EXPECT_EQ(*std::max_element(m.values.begin(), m.values.end()), 1.0);
  }
}

TEST(GradCam, PositiveGradientScaleKeepsArgmaxForOneChannel) {
  Rng rng(3);
  const Tensor a = Tensor::uniform({10, 1}, rng, 0.1, 1.0);
  const Tensor g = Tensor::uniform({10, 1}, rng, 0.1, 1.0);
  const auto base = gradcam_map(a, g, {1, 2, 5});
  const auto argmax = std::max_element(base.values.begin(), base.values.end()) - base.values.begin();
  for (double k : {0.01, 3.0, 250.0}) {
    Tensor gk = g;
    for (auto& x : gk.data()) x *= k;
    const auto m = gradcam_map(a, gk, {1, 2, 5});
    EXPECT_EQ(std::max_element(m.values.begin(), m.values.end()) - m.values.begin(), argmax);
  }
}

TEST(GradCam, FullScaleGridShape) {
  const CubeSpec spec{{3, 16, 16}, {60, 256, 256}};
  const std::size_t L = sequence_length(spec);
  Rng rng(4);
  const auto m = gradcam_map(Tensor::uniform({L, 2}, rng, 0.0, 1.0), Tensor::uniform({L, 2}, rng, 0.0, 1.0),
                             spec.grid());
  EXPECT_EQ(m.grid, (std::array<std::size_t, 3>{20, 16, 16}));
  EXPECT_EQ(m.values.size(), 5120u);
  EXPECT_THROW(gradcam_map(Tensor({10, 2}, 1.0), Tensor({10, 2}, 1.0), spec.grid()), ShapeError);
}

TEST(Upsample, ConstantAndCorners) {
  const Tensor c = upsample_bilinear(Tensor({2, 3}, 0.4), 8, 9);
  for (double v : c.data()) EXPECT_NEAR(v, 0.4, 1e-15);
  const Tensor g({2, 2}, {0.0, 1.0, 2.0, 3.0});
  const Tensor u = upsample_bilinear(g, 4, 4);
  // Half-pixel centres: output 0 maps to input -0.25, clamped to 0.
  EXPECT_EQ(u.at(0, 0), 0.0);
  EXPECT_EQ(u.at(3, 3), 3.0);
  EXPECT_NEAR(u.at(0, 1), 0.25, 1e-15);
}

TEST(SliceViews, OneMapPerSliceAndTotalsKeepOrder) {
  const CubeSpec spec{{2, 4, 4}, {6, 8, 8}};
  SaliencyMap m;
  m.grid = spec.grid();
  Rng rng(5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  m.values.resize(3 * 2 * 2);
  for (auto& v : m.values) v = u(rng);
  m.all_zero = false;
  const auto views = slice_views(m, spec);
  ASSERT_EQ(views.size(), 6u);
  EXPECT_EQ(views[0].rows(), 8u);
  EXPECT_EQ(views[2], views[3]);
  std::vector<double> layer_total(3, 0.0), view_total(3, 0.0);
  for (std::size_t z = 0; z < 3; ++z)
    for (std::size_t i = 0; i < 4; ++i) layer_total[z] += m.values[z * 4 + i];
  for (std::size_t z = 0; z < 6; ++z)
    for (double v : views[z].data()) view_total[z / 2] += v;
  for (std::size_t a = 0; a < 3; ++a)
    for (std::size_t b = 0; b < 3; ++b)
      if (layer_total[a] < layer_total[b]) EXPECT_LT(view_total[a], view_total[b]);
}

TEST(SlowScan, AveragesOverWidth) {
  SaliencyMap m;
  m.grid = {2, 3, 2};
  m.values = {0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11};
  const Tensor s = slow_scan_view(m, 2, 3);
  const double want[] = {0.5, 2.5, 4.5, 6.5, 8.5, 10.5};
  for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(s[i], want[i], 1e-15);
  EXPECT_EQ(slow_scan_view(m, 8, 5).rows(), 8u);
}

TEST(Saliency, TinyModelEndToEnd) {
  FinetuneConfig cfg;
  cfg.cube = {{2, 4, 4}, {4, 8, 8}};
  cfg.encoder = {2, 2, 8, 2};
  FinetuneModel model(cfg);
  ParamStore store;
  Rng rng(6);
  model.init(store, rng);
  Volume v(4, 8, 8);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (auto& x : v.voxels) x = u(rng);
  const auto last = gradcam_saliency(model, store, v, 1);
  EXPECT_EQ(last.grid, (std::array<std::size_t, 3>{2, 2, 2}));
  for (double x : last.values) EXPECT_GE(x, 0.0);
  if (!last.all_zero) EXPECT_EQ(*std::max_element(last.values.begin(), last.values.end()), 1.0);
  const auto explicit_last = gradcam_saliency(model, store, v, 1, 1);
  EXPECT_EQ(explicit_last.values, last.values);
  EXPECT_THROW(gradcam_saliency(model, store, v, 1, 2), UsageError);
  EXPECT_THROW(gradcam_saliency(model, store, v, 5), UsageError);

  const auto dir = std::filesystem::temp_directory_path() / "cubevit_test_saliency";
  std::filesystem::remove_all(dir);
  export_saliency(dir, last, slice_views(last, cfg.cube), slow_scan_view(last, 4, 8));
  EXPECT_TRUE(std::filesystem::exists(dir / "index.json"));
  EXPECT_EQ(read_enface(dir / "slow_scan.enf").height, 4u);
  EXPECT_EQ(read_enface(dir / "slice_003.enf").width, 8u);
}
