#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "cubevit/attention.hpp"
#include "cubevit/errors.hpp"
#include "oracles.hpp"

using namespace cubevit;

namespace {

template <typename T>
struct Qkv {
  std::vector<T> q, k, v;
  std::size_t l, d;
  AttentionInputs<T> in() const { return {q, k, v, l, d}; }
};

template <typename T>
Qkv<T> random_qkv(std::size_t l, std::size_t d, Rng& rng) {
  std::normal_distribution<double> nd(0.0, 1.0);
  Qkv<T> x{std::vector<T>(l * d), std::vector<T>(l * d), std::vector<T>(l * d), l, d};
  for (auto* m : {&x.q, &x.k, &x.v})
    for (auto& e : *m) e = static_cast<T>(nd(rng));
  return x;
}

double max_abs_diff(const auto& a, const auto& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(static_cast<double>(a[i]) - b[i]));
  return m;
}

}  // namespace

TEST(Attention, SingleRowReturnsValue) {
  Rng rng(1);
  auto x = random_qkv<double>(1, 5, rng);
  EXPECT_EQ(attention_naive(x.in()), x.v);
  EXPECT_EQ(attention_streaming(x.in(), 1).out, x.v);
}

TEST(Attention, ZeroScoresAverageValues) {
  Rng rng(2);
  auto x = random_qkv<double>(6, 3, rng);
  std::fill(x.q.begin(), x.q.end(), 0.0);
  const auto out = attention_streaming(x.in(), 4).out;
  for (std::size_t c = 0; c < 3; ++c) {
    double mean = 0.0;
    for (std::size_t j = 0; j < 6; ++j) mean += x.v[j * 3 + c];
    mean /= 6.0;
    for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(out[i * 3 + c], mean, 1e-14);
  }
}

TEST(Attention, NaiveMatchesDenseOracle) {
  Rng rng(3);
  auto x = random_qkv<double>(7, 5, rng);
  EXPECT_LE(max_abs_diff(attention_naive(x.in()), oracle::attention_dense(x.q, x.k, x.v, 7, 5)), 1e-12);
}

TEST(Attention, FullTileEqualsNaiveExactly) {
  Rng rng(4);
  auto x = random_qkv<double>(33, 8, rng);
  EXPECT_EQ(attention_streaming(x.in(), 33).out, attention_naive(x.in()));
}

TEST(Attention, StreamingMatchesNaiveAtL256) {
  Rng rng(5);
  auto x = random_qkv<double>(256, 32, rng);
  EXPECT_LE(max_abs_diff(attention_streaming(x.in(), 16).out, attention_naive(x.in())), 1e-10);
}

TEST(Attention, SinglePrecisionWithinTolerance) {
  Rng rng(6);
  auto x = random_qkv<float>(200, 16, rng);
  EXPECT_LE(max_abs_diff(attention_streaming(x.in(), 7).out, attention_naive(x.in())), 1e-5);
}

TEST(Attention, LedgerGrowsLinearlyAndHasNoSquareBuffer) {
  Rng rng(7);
  auto a = random_qkv<double>(256, 16, rng);
  auto b = random_qkv<double>(512, 16, rng);
  const auto la = attention_streaming(a.in(), 32).ledger;
  const auto lb = attention_streaming(b.in(), 32).ledger;
  EXPECT_LE(static_cast<double>(lb.peak) / static_cast<double>(la.peak), 2.2);
  EXPECT_LT(lb.largest_buffer, 512u * 512u);
  const auto fwd = attention_streaming(b.in(), 32);
  const auto back = attention_streaming_backward(b.in(), std::span<const double>(fwd.out),
                                                 std::span<const double>(fwd.lse), std::span<const double>(b.v), 32);
  EXPECT_LT(back.ledger.largest_buffer, 512u * 512u);
}

TEST(Attention, NaiveLedgerRecordsSquareBuffer) {
  Rng rng(8);
  auto x = random_qkv<double>(20, 4, rng);
  MemoryLedger ledger;
  attention_naive(x.in(), &ledger);
  EXPECT_GE(ledger.largest_buffer, 400u);
}

TEST(Attention, PermutingQueriesPermutesOutputs) {
  Rng rng(9);
  auto x = random_qkv<double>(10, 4, rng);
  std::vector<std::size_t> perm{3, 1, 4, 0, 9, 2, 6, 5, 8, 7};
  auto y = x;
  for (std::size_t i = 0; i < 10; ++i)
    for (std::size_t c = 0; c < 4; ++c) y.q[i * 4 + c] = x.q[perm[i] * 4 + c];
  const auto ox = attention_streaming(x.in(), 3).out, oy = attention_streaming(y.in(), 3).out;
  for (std::size_t i = 0; i < 10; ++i)
    for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(oy[i * 4 + c], ox[perm[i] * 4 + c], 1e-14);
}

TEST(Attention, RejectsBadInputs) {
  std::vector<double> q(6), k(4), v(6);
  EXPECT_THROW(attention_naive(AttentionInputs<double>{q, k, v, 3, 2}), ShapeError);
  EXPECT_THROW(attention_streaming(AttentionInputs<double>{q, q, v, 3, 2}, 0), UsageError);
}

TEST(MultiHeadAttention, IdentityProjectionsOnSingleTokenGiveValue) {
  ParamStore store;
  Rng rng(1);
  init_attention_params(store, "a", 4, rng);
  auto set = [&](const std::string& n, Tensor t) {
    ad::Var v = store.get(n);
    v.set_value(std::move(t));
  };
  Tensor eye({4, 4}, 0.0);
  for (std::size_t i = 0; i < 4; ++i) eye.at(i, i) = 1.0;
  for (auto n : {"a.wq", "a.wk", "a.wv", "a.wo"}) set(n, eye);
  for (auto n : {"a.bq", "a.bk", "a.bv", "a.bo"}) set(n, Tensor({4}, 0.0));
  ad::Var x = ad::Var::constant(Tensor({1, 4}, {0.5, -1.0, 2.0, 0.25}));
  EXPECT_EQ(multi_head_attention(x, attention_weights(store, "a", 1), 1).value(), x.value());
}

TEST(MultiHeadAttention, HeadsMustDivideWidth) {
  ParamStore store;
  Rng rng(1);
  init_attention_params(store, "a", 12, rng);
  ad::Var x = ad::Var::constant(Tensor({2, 12}, 0.1));
  EXPECT_THROW(multi_head_attention(x, attention_weights(store, "a", 5), 2), UsageError);
}
