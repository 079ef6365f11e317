#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "cubevit/autodiff.hpp"
#include "cubevit/params.hpp"

namespace cubevit {

inline constexpr std::size_t kDefaultAttentionTile = 64;

/// Counts every transient buffer an attention kernel allocates, in elements.
struct MemoryLedger {
  std::size_t current = 0;
  std::size_t peak = 0;
  std::size_t largest_buffer = 0;

  void allocate(std::size_t elements);
  void release(std::size_t elements);
};

/// One attention head: row-major L x d query/key/value matrices.
template <typename T>
struct AttentionInputs {
  std::span<const T> q;
  std::span<const T> k;
  std::span<const T> v;
  std::size_t length = 0;
  std::size_t head_dim = 0;

  T scale() const { return T(1) / std::sqrt(static_cast<T>(head_dim)); }
  void validate() const;
};

/// Reference kernel: materializes the full L x L score matrix.
template <typename T>
std::vector<T> attention_naive(const AttentionInputs<T>& in, MemoryLedger* ledger = nullptr);

template <typename T>
struct StreamingOutput {
  std::vector<T> out;  // L x d
  std::vector<T> lse;  // per-row log-sum-exp of scaled scores, kept for backward
  MemoryLedger ledger;
};

/// Online-softmax kernel. Each query row keeps a running max and denominator
/// while key/value rows stream through in blocks of `tile`; the largest
/// transient is one tile of scores, never L x L.
template <typename T>
StreamingOutput<T> attention_streaming(const AttentionInputs<T>& in, std::size_t tile);

template <typename T>
struct StreamingGrads {
  std::vector<T> dq, dk, dv;
  MemoryLedger ledger;
};

/// Backward pass that recomputes score tiles from Q, K and the saved lse.
template <typename T>
StreamingGrads<T> attention_streaming_backward(const AttentionInputs<T>& in,
                                               std::span<const T> out, std::span<const T> lse,
                                               std::span<const T> dout, std::size_t tile);

namespace ad {

/// Differentiable single-head attention over a stack of sequences:
/// q, k, v are (B*seq_len) x d and each block of seq_len rows attends only
/// within itself.
Var attention(const Var& q, const Var& k, const Var& v, std::size_t seq_len,
              std::size_t tile = kDefaultAttentionTile);

}  // namespace ad

struct AttentionWeights {
  ad::Var wq, bq, wk, bk, wv, bv, wo, bo;
  std::size_t heads = 1;
};

void init_attention_params(ParamStore& store, const std::string& prefix, std::size_t dim, Rng& rng);
AttentionWeights attention_weights(const ParamStore& store, const std::string& prefix, std::size_t heads);

/// x is (B*seq_len) x D. Per-head projections, streaming attention,
/// concatenation, output projection.
ad::Var multi_head_attention(const ad::Var& x, const AttentionWeights& w, std::size_t seq_len,
                             std::size_t tile = kDefaultAttentionTile);

}  // namespace cubevit
