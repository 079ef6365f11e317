#pragma once

#include <memory>
#include <string>
#include <vector>

#include "cubevit/attention.hpp"
#include "cubevit/coep.hpp"
#include "cubevit/heads.hpp"
#include "cubevit/mae3d.hpp"
#include "cubevit/vit3d.hpp"
#include "oracles.hpp"

namespace grad_suite {

using namespace cubevit;
using ad::Var;

struct Case {
  std::string name;
  oracle::GradCheck result;
};

// Values bounded away from zero so abs/relu kinks stay out of reach of the probes.
inline Tensor away_from_zero(Shape s, Rng& rng) {
  Tensor t = Tensor::uniform(std::move(s), rng, 0.2, 1.5);
  std::bernoulli_distribution sign(0.5);
  for (auto& x : t.data())
    if (sign(rng)) x = -x;
  return t;
}

// Scalarizes an output with a fixed random weighting so every entry matters.
inline Var weighted_sum(const Var& y, std::uint64_t seed) {
  Rng rng(seed);
  return ad::sum(ad::mul(y, Var::constant(Tensor::randn(y.shape(), rng))));
}

inline std::vector<Case> run(std::size_t probes) {
  std::vector<Case> cases;
  Rng rng(2024);
  auto check = [&](const std::string& name, std::vector<Var> leaves, std::function<Var()> f) {
    cases.push_back({name, oracle::gradcheck(f, leaves, probes, 7 + cases.size())});
  };
  auto p = [&](Shape s) { return Var::parameter(Tensor::randn(std::move(s), rng)); };
  auto pz = [&](Shape s) { return Var::parameter(away_from_zero(std::move(s), rng)); };

  {
    Var a = p({3, 4}), b = p({3, 4});
    check("add", {a, b}, [=] { return weighted_sum(ad::add(a, b), 1); });
    check("sub", {a, b}, [=] { return weighted_sum(ad::sub(a, b), 2); });
    check("mul", {a, b}, [=] { return weighted_sum(ad::mul(a, b), 3); });
    check("scale", {a}, [=] { return weighted_sum(ad::scale(a, -1.7), 4); });
    check("exp", {a}, [=] { return weighted_sum(ad::exp(a), 5); });
    check("square", {a}, [=] { return weighted_sum(ad::square(a), 6); });
    check("gelu", {a}, [=] { return weighted_sum(ad::gelu(a), 7); });
    check("transpose", {a}, [=] { return weighted_sum(ad::transpose(a), 8); });
    check("reshape", {a}, [=] { return weighted_sum(ad::reshape(a, {2, 6}), 9); });
    check("sum", {a}, [=] { return ad::sum(ad::square(a)); });
    check("mean", {a}, [=] { return ad::mean(ad::square(a)); });
  }
  {
    Var a = pz({3, 4});
    check("abs", {a}, [=] { return weighted_sum(ad::abs(a), 10); });
    check("relu", {a}, [=] { return weighted_sum(ad::relu(a), 11); });
  }
  {
    Var a = p({3, 4}), s = Var::parameter(Tensor::scalar(0.8));
    check("scale_by", {a, s}, [=] { return weighted_sum(ad::scale_by(a, s), 12); });
    Var b = p({1, 4}), blk = p({3, 4}), big = p({6, 4});
    check("add_tiled_bias", {a, b}, [=] { return weighted_sum(ad::add_tiled(a, b), 13); });
    check("add_tiled_block", {big, blk}, [=] { return weighted_sum(ad::add_tiled(big, blk), 14); });
  }
  {
    Var a = p({3, 5}), b = p({5, 2}), c = p({4, 5}), bias = p({2});
    check("matmul", {a, b}, [=] { return weighted_sum(ad::matmul(a, b), 15); });
    check("matmul_nt", {a, c}, [=] { return weighted_sum(ad::matmul_nt(a, c), 16); });
    check("linear", {a, b, bias}, [=] { return weighted_sum(ad::linear(a, b, bias), 17); });
  }
  {
    Var x = p({4, 6}), g = p({6}), b = p({6});
    check("softmax_rows", {x}, [=] { return weighted_sum(ad::softmax(x, 1), 18); });
    check("softmax_cols", {x}, [=] { return weighted_sum(ad::softmax(x, 0), 19); });
    check("layer_norm", {x, g, b}, [=] { return weighted_sum(ad::layer_norm(x, g, b), 20); });
    check("l2_normalize_rows", {x}, [=] { return weighted_sum(ad::l2_normalize_rows(x), 21); });
    check("segment_mean", {x}, [=] { return weighted_sum(ad::segment_mean(x, 2), 22); });
  }
  {
    Var z = p({4, 3});
    Tensor t({4, 3}, 0.1);
    for (std::size_t i = 0; i < 4; ++i) t.at(i, i % 3) = 0.8;
    check("soft_cross_entropy", {z}, [=] { return ad::soft_cross_entropy(z, t); });
    Tensor yb({4, 3}, 0.0);
    for (std::size_t i = 0; i < 12; i += 2) yb[i] = 1.0;
    check("bce_with_logits", {z}, [=] { return ad::bce_with_logits(z, yb); });
  }
  {
    Var x = p({5, 3}), fill = p({1, 3});
    const std::vector<std::size_t> rows{4, 0, 2};
    check("gather_rows", {x}, [=] { return weighted_sum(ad::gather_rows(x, rows), 23); });
    check("scatter_rows", {x, fill}, [=] { return weighted_sum(ad::scatter_rows(ad::gather_rows(x, rows), rows, 7, fill), 24); });
    check("slice_cols", {x}, [=] { return weighted_sum(ad::slice_cols(x, 1, 2), 25); });
    Var y = p({5, 2}), w = p({2, 3});
    check("concat_cols", {x, y}, [=] {
      std::vector<Var> parts{x, y};
      return weighted_sum(ad::concat_cols(parts), 26);
    });
    check("concat_rows", {x, w}, [=] {
      std::vector<Var> parts{x, w};
      return weighted_sum(ad::concat_rows(parts), 27);
    });
    Var planar = p({4, 3}), depth = p({2, 3});
    check("factored_position", {planar, depth}, [=] { return weighted_sum(ad::factored_position(planar, depth), 28); });
  }
  {
    Var x = p({3, 4});
    check("dropout_train", {x}, [=] {
      Rng r(99);  // same mask on every rebuild
      return weighted_sum(ad::dropout(x, 0.5, r, true), 29);
    });
  }
  {
    Var q = p({12, 4}), k = p({12, 4}), v = p({12, 4});
    check("attention_streaming", {q, k, v}, [=] { return weighted_sum(ad::attention(q, k, v, 6, 4), 30); });
    ParamStore store;
    Rng r(5);
    init_attention_params(store, "mha", 8, r);
    Var x = p({10, 8});
    std::vector<Var> leaves{x};
    for (const auto& [n, var] : store) leaves.push_back(var);
    check("multi_head_attention", leaves, [=, &store] {
      return weighted_sum(multi_head_attention(x, attention_weights(store, "mha", 2), 5, 3), 31);
    });
  }
  {
    Var a = p({4, 6}), b = p({4, 6}), c = p({4, 6});
    Var it = Var::parameter(Tensor::scalar(1.0 / 0.3));
    check("coep_loss", {a, b, it}, [=] { return coep_loss(a, b, it); });
    check("tri_coep_loss", {a, b, c, it}, [=] { return tri_coep_loss(a, b, c, it); });
    Var logits = p({3, 2});
    const std::vector<std::size_t> cls{0, 1, 1};
    check("smoothed_ce_loss", {logits}, [=] { return smoothed_ce_loss(logits, cls, 0.1); });
    Var pred = pz({3, 2});
    Tensor zero({3, 2}, 0.0);
    check("combined_regression_loss", {pred}, [=] { return combined_regression_loss(pred, zero); });
    Var mp = p({4, 6});
    Tensor target = Tensor::randn({4, 6}, rng);
    const std::vector<MaskPlan> plans{{{0}, {1}, 0.5}, {{1}, {0}, 0.5}};
    check("masked_mse", {mp}, [=] { return masked_mse(mp, target, plans); });
  }
  {
    // Full tiny encoder: cube embedding, factored positions, two blocks, final norm, pooling.
    CubeVit enc{CubeSpec{{2, 4, 4}, {4, 8, 8}, false}, ViTConfig{2, 2, 8, 2, VitRole::kEncoder, 3}, "enc"};
    auto store = std::make_shared<ParamStore>();
    Rng r(11);
    enc.init(*store, r);
    auto vols = std::make_shared<std::vector<Volume>>(2, Volume(4, 8, 8));
    for (auto& v : *vols)
      for (auto& x : v.voxels) x = std::uniform_real_distribution<double>(0.0, 1.0)(r);
    std::vector<Var> leaves;
    for (const auto& [n, var] : *store) leaves.push_back(var);
    check("tiny_encoder", leaves, [=] {
      std::vector<const Volume*> ptrs{&(*vols)[0], &(*vols)[1]};
      return weighted_sum(enc.pooled(*store, ptrs), 32);
    });
  }
  return cases;
}

}  // namespace grad_suite
