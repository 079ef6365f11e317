#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "cubevit/errors.hpp"
#include "cubevit/io.hpp"
#include "cubevit/preprocess.hpp"
#include "cubevit/synth.hpp"
#include "oracles.hpp"

using namespace cubevit;
namespace fs = std::filesystem;

namespace {

Volume random_volume(std::size_t z, std::size_t h, std::size_t w, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Volume v(z, h, w);
  for (auto& x : v.voxels) x = u(rng);
  return v;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("cubevit_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string bytes_of(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST(Resample, LineHandCase) {
  const std::vector<double> line{0.0, 1.0};
  const auto out = resample_line(line, 4);
  ASSERT_EQ(out.size(), 4u);
  const double want[] = {0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0};
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(out[i], want[i], 1e-12);
}

TEST(Resample, IdentityAndConstant) {
  const Volume v = random_volume(3, 5, 7, 1);
  EXPECT_EQ(resample_volume(v, {3, 5, 7}).voxels, v.voxels);
  Volume c(4, 6, 5, 0.625);
  const Volume up = resample_volume(c, {7, 11, 3});
  for (double x : up.voxels) EXPECT_EQ(x, 0.625);
  EXPECT_EQ(resample_volume(up, {4, 6, 5}).voxels, c.voxels);
}

TEST(Resample, SmoothRoundTripIsClose) {
  Volume v(6, 16, 16);
  for (std::size_t z = 0; z < 6; ++z)
    for (std::size_t h = 0; h < 16; ++h)
      for (std::size_t w = 0; w < 16; ++w) v.at(z, h, w) = 0.5 + 0.4 * std::sin(0.3 * h + 0.2 * w + 0.5 * z);
  const Volume back = resample_volume(resample_volume(v, {11, 29, 23}), {6, 16, 16});
  double worst = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) worst = std::max(worst, std::abs(back.voxels[i] - v.voxels[i]));
  EXPECT_LE(worst, 0.05);
}

TEST(Quantile, MatchesSortOracle) {
  Rng rng(2);
  std::uniform_real_distribution<double> u(-3.0, 3.0);
  for (int t = 0; t < 200; ++t) {
    std::vector<double> v(1 + rng() % 60);
    for (auto& x : v) x = u(rng);
    const double q = u(rng) / 6.0 + 0.5;
    ASSERT_EQ(quantile(v, q), oracle::quantile_sorted(v, q));
  }
  EXPECT_THROW(quantile(std::vector<double>{1.0}, 1.5), UsageError);
}

TEST(ClipIntensities, MatchesSortOracleOnRamp) {
  Volume v(1, 100, 100);
  for (std::size_t i = 0; i < v.size(); ++i) v.voxels[i] = static_cast<double>((i * 7919) % 10000);
  const Volume c = clip_intensities(v, 0.0001, 0.9999);
  const double lo = oracle::quantile_sorted(v.voxels, 0.0001), hi = oracle::quantile_sorted(v.voxels, 0.9999);
  EXPECT_EQ(*std::min_element(c.voxels.begin(), c.voxels.end()), lo);
  EXPECT_EQ(*std::max_element(c.voxels.begin(), c.voxels.end()), hi);
  for (std::size_t i = 0; i < v.size(); ++i) EXPECT_EQ(c.voxels[i], std::clamp(v.voxels[i], lo, hi));
  EXPECT_EQ(c.meta.steps.size(), 1u);
}

TEST(ClipIntensities, ConstantUnchangedAndLowerModeIdempotent) {
  Volume k(2, 3, 4, 0.3);
  EXPECT_EQ(clip_intensities(k, 0.1, 0.9).voxels, k.voxels);
  const Volume v = random_volume(3, 9, 9, 3);
  const Volume once = clip_intensities(v, 0.05, 0.95, QuantileMethod::kLower);
  const Volume twice = clip_intensities(once, 0.05, 0.95, QuantileMethod::kLower);
  EXPECT_EQ(once.voxels, twice.voxels);
  const Volume lin = clip_intensities(v, 0.05, 0.95);
  const double lo = quantile(v.voxels, 0.05), hi = quantile(v.voxels, 0.95);
  for (double x : lin.voxels) {
    EXPECT_GE(x, lo);
    EXPECT_LE(x, hi);
  }
}

TEST(Otsu, MatchesExhaustiveScan) {
  Rng rng(4);
  std::uniform_int_distribution<int> count(0, 40);
  std::uniform_real_distribution<double> step(0.01, 1.0);
  for (int t = 0; t < 200; ++t) {
    const std::size_t bins = 2 + rng() % 255;
    std::vector<double> counts(bins), levels(bins);
    double level = 0.0;
    for (std::size_t i = 0; i < bins; ++i) {
      counts[i] = count(rng) < 12 ? 0.0 : static_cast<double>(count(rng));
      levels[i] = level += step(rng);
    }
    counts.front() += 1.0;
    counts.back() += 1.0;
    ASSERT_EQ(otsu_cut(counts, levels), oracle::otsu_exhaustive(counts, levels)) << "case " << t;
  }
}

TEST(Otsu, SeparatesModes) {
  std::vector<double> balanced(100, 0.0), skewed(100, 0.0);
  std::fill(balanced.begin() + 50, balanced.end(), 1.0);
  skewed.back() = 1.0;
  EXPECT_EQ(otsu_threshold(balanced), 0.0);
  EXPECT_EQ(otsu_threshold(skewed), 0.0);
  EXPECT_THROW(otsu_threshold(std::vector<double>(5, 2.0)), DegenerateInputError);
}

TEST(Otsu, DepthCropKeepsBrightRows) {
  Volume v(2, 10, 4, 0.0);
  for (std::size_t z = 0; z < 2; ++z)
    for (std::size_t h = 3; h <= 6; ++h)
      for (std::size_t w = 0; w < 4; ++w) v.at(z, h, w) = 1.0;
  const Volume c = otsu_depth_crop(v);
  EXPECT_EQ(c.height, 4u);
  EXPECT_EQ(c.depth, 2u);
  for (double x : c.voxels) EXPECT_EQ(x, 1.0);
  EXPECT_EQ(c.meta.steps.back(), "otsu_crop(3,6)");
}

TEST(Preprocess, PolicyCases) {
  const Volume v = random_volume(2, 4, 6, 5);
  EXPECT_EQ(preprocess(v, PreprocessPolicy{}), v);
  EXPECT_EQ(flip_w(flip_w(v)), v);
  EXPECT_EQ(flip_z(flip_z(v)), v);
  PreprocessPolicy norm;
  norm.normalize = true;
  const Volume n = preprocess(v, norm);
  EXPECT_EQ(*std::min_element(n.voxels.begin(), n.voxels.end()), 0.0);
  EXPECT_EQ(*std::max_element(n.voxels.begin(), n.voxels.end()), 1.0);
  PreprocessPolicy all;
  all.clip_quantiles = {{0.01, 0.99}};
  all.resample_to = {{4, 8, 8}};
  all.normalize = true;
  all.flip_w_prob = 1.0;
  const Volume p = preprocess(v, all);
  EXPECT_EQ(p.depth, 4u);
  ASSERT_EQ(p.meta.steps.size(), 4u);
  EXPECT_EQ(p.meta.steps.back(), "flip_w");
}

TEST(Synth, DeterministicBoundedAndMirrored) {
  SyntheticCohortSpec spec;
  spec.count = 8;
  spec.seed = 6;
  const auto a = synth_cohort(spec), b = synth_cohort(spec);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].volume, b[i].volume);
    EXPECT_EQ(a[i].ir, b[i].ir);
    EXPECT_EQ(a[i].label, static_cast<int>(i % 4 < 2));
    EXPECT_EQ(a[i].volume.meta.patient_id, a[i].ir.meta.patient_id);
    EXPECT_EQ(a[i].volume.meta.laterality, a[i].ir.meta.laterality);
    for (double x : a[i].volume.voxels) ASSERT_TRUE(x >= 0.0 && x <= 1.0);
    for (double x : a[i].faf.pixels) ASSERT_TRUE(x >= 0.0 && x <= 1.0);
  }
  const CohortItem od = synth_item(spec, 99, Laterality::OD, 1, "p");
  const CohortItem os = synth_item(spec, 99, Laterality::OS, 1, "p");
  const std::size_t W = od.ir.width;
  for (std::size_t h = 0; h < od.ir.height; ++h)
    for (std::size_t w = 0; w < W; ++w) ASSERT_EQ(os.ir.at(h, w), od.ir.at(h, W - 1 - w));
  for (std::size_t z = 0; z < od.volume.depth; ++z)
    for (std::size_t h = 0; h < od.volume.height; ++h)
      for (std::size_t w = 0; w < od.volume.width; ++w)
        ASSERT_EQ(os.volume.at(z, h, w), od.volume.at(z, h, od.volume.width - 1 - w));
}

TEST(Synth, HandRuleRecoversEveryLabel) {
  SyntheticCohortSpec spec;
  spec.count = 64;
  spec.seed = 7;
  for (const auto& it : synth_cohort(spec)) EXPECT_EQ(hand_rule_label(it.volume), it.label);
}

TEST(VolumeIo, RoundTripIsBitExact) {
  const fs::path dir = scratch("vol");
  Volume v = random_volume(3, 4, 5, 8);
  for (auto& x : v.voxels) x = static_cast<float>(x);
  v.meta.patient_id = "p7";
  v.meta.laterality = Laterality::OS;
  v.meta.steps = {"normalize"};
  write_volume(dir / "a.vol", v);
  EXPECT_EQ(read_volume(dir / "a.vol"), v);
  EXPECT_EQ(fs::file_size(dir / "a.vol"), 4u + 12u + 4u * 60u);

  EnFaceImage img(3, 2, 0.25);
  write_enface(dir / "a.enf", img);
  EXPECT_EQ(read_enface(dir / "a.enf"), img);
}

TEST(VolumeIo, TruncatedOrBadMagicIsFormatError) {
  const fs::path dir = scratch("trunc");
  write_volume(dir / "a.vol", Volume(2, 2, 2, 0.5));
  fs::resize_file(dir / "a.vol", 20);
  EXPECT_THROW(read_volume(dir / "a.vol"), FormatError);
  std::ofstream(dir / "b.vol", std::ios::binary) << "NOPE-not-a-volume";
  try {
    read_volume(dir / "b.vol");
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 0u);
  }
}

TEST(CohortIo, RoundTrip) {
  const fs::path dir = scratch("cohort");
  SyntheticCohortSpec spec;
  spec.count = 4;
  const auto items = synth_cohort(spec);
  write_cohort(dir, items);
  const auto back = read_cohort(dir);
  ASSERT_EQ(back.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(back[i].volume, items[i].volume);
    EXPECT_EQ(back[i].faf, items[i].faf);
    EXPECT_EQ(back[i].label, items[i].label);
    EXPECT_EQ(back[i].targets.growth_rate, items[i].targets.growth_rate);
  }
}

TEST(CheckpointIo, SaveLoadSaveIsByteIdentical) {
  const fs::path dir = scratch("ckpt");
  ParamStore store;
  Rng rng(9);
  store.add("b.w", Tensor::randn({3, 2}, rng));
  store.add("a.g", Tensor::randn({4}, rng));
  for (const auto& [n, p] : store) {
    Tensor t = p.value();
    for (auto& x : t.data()) x = static_cast<float>(x);
    ad::Var(p).set_value(t);
  }
  save_checkpoint(dir / "one.ckpt", store);
  const Checkpoint c = load_checkpoint(dir / "one.ckpt");
  EXPECT_EQ(c.params.names(), (std::vector<std::string>{"a.g", "b.w"}));
  for (const auto& [n, p] : store) EXPECT_EQ(c.params.get(n).value(), p.value());
  save_checkpoint(dir / "two.ckpt", c.params);
  EXPECT_EQ(bytes_of(dir / "one.ckpt"), bytes_of(dir / "two.ckpt"));
  // magic + version + count, then per tensor: name length, name, rank, extents, data.
  EXPECT_EQ(fs::file_size(dir / "one.ckpt"), 12u + (4 + 3 + 4 + 8 + 16) + (4 + 3 + 4 + 16 + 24));
}

TEST(CheckpointIo, OptimizerStateRoundTrips) {
  const fs::path dir = scratch("ckpt_opt");
  ParamStore store;
  store.add("w", Tensor({2}, {0.5, -0.25}));
  ad::backward(ad::sum(ad::square(store.get("w"))));
  AdamW opt;
  opt.step(store, 0.125);
  save_checkpoint(dir / "o.ckpt", store, &opt);
  const Checkpoint c = load_checkpoint(dir / "o.ckpt");
  EXPECT_TRUE(c.has_optimizer);
  EXPECT_EQ(c.optimizer_step, 1u);
  EXPECT_EQ(c.moments.at("w").count, 1u);
  EXPECT_EQ(c.params.size(), 1u);
}

TEST(CheckpointIo, MismatchedArchitectureNamesTheTensor) {
  const fs::path dir = scratch("ckpt_bad");
  ParamStore a, b;
  a.add("enc.embed.w", Tensor({2, 3}, 0.5));
  b.add("enc.embed.w", Tensor({3, 3}, 0.5));
  save_checkpoint(dir / "a.ckpt", a);
  try {
    load_into(dir / "a.ckpt", b);
    FAIL();
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("enc.embed.w"), std::string::npos);
  }
}
