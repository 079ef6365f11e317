#include "cubevit/attention.hpp"

#include <algorithm>
#include <limits>

#include "cubevit/errors.hpp"

namespace cubevit {

void MemoryLedger::allocate(std::size_t elements) {
  current += elements;
  peak = std::max(peak, current);
  largest_buffer = std::max(largest_buffer, elements);
}

void MemoryLedger::release(std::size_t elements) { current -= std::min(current, elements); }

template <typename T>
void AttentionInputs<T>::validate() const {
  if (length == 0 || head_dim == 0) throw ShapeError("attention needs positive length and head_dim");
  const std::size_t n = length * head_dim;
  if (q.size() != n || k.size() != n || v.size() != n) {
    throw ShapeError("attention: Q/K/V must each hold " + std::to_string(length) + " x " +
                     std::to_string(head_dim) + " values");
  }
}

namespace {

template <typename T>
T dot(const T* a, const T* b, std::size_t n) {
  T s = 0;
  for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

}  // namespace

template <typename T>
std::vector<T> attention_naive(const AttentionInputs<T>& in, MemoryLedger* ledger) {
  in.validate();
  const std::size_t L = in.length, d = in.head_dim;
  const T scale = in.scale();
  std::vector<T> weights(L * L);
  std::vector<T> out(L * d, T(0));
  if (ledger) {
    ledger->allocate(L * L);
    ledger->allocate(L * d);
  }
  for (std::size_t i = 0; i < L; ++i) {
    T* wrow = weights.data() + i * L;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < L; ++j) {
      wrow[j] = scale * dot(in.q.data() + i * d, in.k.data() + j * d, d);
      mx = std::max(mx, wrow[j]);
    }
    // Same accumulation order as the streaming kernel with a single tile.
    T denom = 0;
    for (std::size_t j = 0; j < L; ++j) {
      wrow[j] = std::exp(wrow[j] - mx);
      denom += wrow[j];
    }
    T* orow = out.data() + i * d;
    for (std::size_t j = 0; j < L; ++j) {
      const T* vrow = in.v.data() + j * d;
      for (std::size_t c = 0; c < d; ++c) orow[c] += wrow[j] * vrow[c];
    }
    for (std::size_t c = 0; c < d; ++c) orow[c] /= denom;
  }
  if (ledger) ledger->release(L * L);
  return out;
}

template <typename T>
StreamingOutput<T> attention_streaming(const AttentionInputs<T>& in, std::size_t tile) {
  in.validate();
  const std::size_t L = in.length, d = in.head_dim;
  if (tile == 0 || tile > L) throw UsageError("attention tile must be in [1, L]");
  const T scale = in.scale();

  StreamingOutput<T> res;
  MemoryLedger& ledger = res.ledger;
  res.out.assign(L * d, T(0));
  ledger.allocate(L * d);
  res.lse.assign(L, T(0));
  ledger.allocate(L);
  std::vector<T> scores(tile);
  ledger.allocate(tile);

  for (std::size_t i = 0; i < L; ++i) {
    const T* qrow = in.q.data() + i * d;
    T* acc = res.out.data() + i * d;
    T running_max = -std::numeric_limits<T>::infinity();
    T denom = 0;
    for (std::size_t start = 0; start < L; start += tile) {
      const std::size_t len = std::min(tile, L - start);
      T tile_max = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < len; ++j) {
        scores[j] = scale * dot(qrow, in.k.data() + (start + j) * d, d);
        tile_max = std::max(tile_max, scores[j]);
      }
      const T new_max = std::max(running_max, tile_max);
      const T correction = std::exp(running_max - new_max);
      denom *= correction;
      for (std::size_t c = 0; c < d; ++c) acc[c] *= correction;
      T tile_sum = 0;
      for (std::size_t j = 0; j < len; ++j) {
        scores[j] = std::exp(scores[j] - new_max);
        tile_sum += scores[j];
      }
      denom += tile_sum;
      for (std::size_t j = 0; j < len; ++j) {
        const T* vrow = in.v.data() + (start + j) * d;
        for (std::size_t c = 0; c < d; ++c) acc[c] += scores[j] * vrow[c];
      }
      running_max = new_max;
    }
    for (std::size_t c = 0; c < d; ++c) acc[c] /= denom;
    res.lse[i] = running_max + std::log(denom);
  }
  ledger.release(tile);
  return res;
}

template <typename T>
StreamingGrads<T> attention_streaming_backward(const AttentionInputs<T>& in,
                                               std::span<const T> out, std::span<const T> lse,
                                               std::span<const T> dout, std::size_t tile) {
  in.validate();
  const std::size_t L = in.length, d = in.head_dim;
  if (tile == 0 || tile > L) throw UsageError("attention tile must be in [1, L]");
  if (out.size() != L * d || dout.size() != L * d || lse.size() != L) {
    throw ShapeError("attention backward: saved tensors do not match inputs");
  }
  const T scale = in.scale();
  StreamingGrads<T> g;
  g.dq.assign(L * d, T(0));
  g.dk.assign(L * d, T(0));
  g.dv.assign(L * d, T(0));
  g.ledger.allocate(3 * L * d);
  std::vector<T> probs(tile);
  g.ledger.allocate(tile);

  for (std::size_t i = 0; i < L; ++i) {
    const T* qrow = in.q.data() + i * d;
    const T* dorow = dout.data() + i * d;
    const T delta = dot(dorow, out.data() + i * d, d);
    T* dqrow = g.dq.data() + i * d;
    for (std::size_t start = 0; start < L; start += tile) {
      const std::size_t len = std::min(tile, L - start);
      for (std::size_t j = 0; j < len; ++j) {
        probs[j] = std::exp(scale * dot(qrow, in.k.data() + (start + j) * d, d) - lse[i]);
      }
      for (std::size_t j = 0; j < len; ++j) {
        const std::size_t kj = start + j;
        const T* krow = in.k.data() + kj * d;
        const T* vrow = in.v.data() + kj * d;
        T* dvrow = g.dv.data() + kj * d;
        T* dkrow = g.dk.data() + kj * d;
        const T p = probs[j];
        const T dp = dot(dorow, vrow, d);
        const T ds = p * (dp - delta) * scale;
        for (std::size_t c = 0; c < d; ++c) {
          dvrow[c] += p * dorow[c];
          dqrow[c] += ds * krow[c];
          dkrow[c] += ds * qrow[c];
        }
      }
    }
  }
  g.ledger.release(tile);
  return g;
}

template struct AttentionInputs<float>;
template struct AttentionInputs<double>;
template std::vector<float> attention_naive(const AttentionInputs<float>&, MemoryLedger*);
template std::vector<double> attention_naive(const AttentionInputs<double>&, MemoryLedger*);
template StreamingOutput<float> attention_streaming(const AttentionInputs<float>&, std::size_t);
template StreamingOutput<double> attention_streaming(const AttentionInputs<double>&, std::size_t);
template StreamingGrads<float> attention_streaming_backward(const AttentionInputs<float>&,
                                                            std::span<const float>,
                                                            std::span<const float>,
                                                            std::span<const float>, std::size_t);
template StreamingGrads<double> attention_streaming_backward(const AttentionInputs<double>&,
                                                             std::span<const double>,
                                                             std::span<const double>,
                                                             std::span<const double>, std::size_t);

namespace ad {

Var attention(const Var& q, const Var& k, const Var& v, std::size_t seq_len, std::size_t tile) {
  const Tensor& qv = q.value();
  if (k.shape() != qv.shape() || v.shape() != qv.shape()) {
    throw ShapeError("attention: Q " + shape_str(qv.shape()) + ", K " + shape_str(k.shape()) +
                     ", V " + shape_str(v.shape()));
  }
  const std::size_t rows = qv.rows(), d = qv.cols();
  if (seq_len == 0 || rows % seq_len != 0) throw ShapeError("attention: rows not a multiple of seq_len");
  const std::size_t t = std::min(tile, seq_len);
  const std::size_t block = seq_len * d;
  const std::size_t groups = rows / seq_len;

  auto segment = [&](const Var& x, std::size_t b) {
    return x.value().data().subspan(b * block, block);
  };
  Tensor out({rows, d});
  std::vector<double> lse(rows);
  for (std::size_t b = 0; b < groups; ++b) {
    AttentionInputs<double> inp{segment(q, b), segment(k, b), segment(v, b), seq_len, d};
    auto res = attention_streaming(inp, t);
    std::copy(res.out.begin(), res.out.end(), out.data().begin() + b * block);
    std::copy(res.lse.begin(), res.lse.end(), lse.begin() + b * seq_len);
  }
  return make_op(std::move(out), {q, k, v},
                 [lse = std::move(lse), seq_len, t, d, block, groups](Node& self) {
    Node& qn = *self.inputs[0];
    Node& kn = *self.inputs[1];
    Node& vn = *self.inputs[2];
    for (std::size_t b = 0; b < groups; ++b) {
      auto seg = [&](const Tensor& x) { return x.data().subspan(b * block, block); };
      AttentionInputs<double> inp{seg(qn.value), seg(kn.value), seg(vn.value), seq_len, d};
      auto grads = attention_streaming_backward<double>(
          inp, seg(self.value), std::span<const double>(lse).subspan(b * seq_len, seq_len),
          seg(self.grad), t);
      auto acc = [&](Node& n, const std::vector<double>& gsrc) {
        if (!n.requires_grad) return;
        auto dst = n.grad_buffer().data().subspan(b * block, block);
        for (std::size_t i = 0; i < block; ++i) dst[i] += gsrc[i];
      };
      acc(qn, grads.dq);
      acc(kn, grads.dk);
      acc(vn, grads.dv);
    }
  });
}

}  // namespace ad

void init_attention_params(ParamStore& store, const std::string& prefix, std::size_t dim, Rng& rng) {
  for (const char* n : {"q", "k", "v", "o"}) {
    store.add(prefix + ".w" + n, xavier_uniform(dim, dim, rng));
    store.add(prefix + ".b" + n, Tensor({dim}, 0.0));
  }
}

AttentionWeights attention_weights(const ParamStore& store, const std::string& prefix, std::size_t heads) {
  AttentionWeights w;
  w.wq = store.get(prefix + ".wq");
  w.bq = store.get(prefix + ".bq");
  w.wk = store.get(prefix + ".wk");
  w.bk = store.get(prefix + ".bk");
  w.wv = store.get(prefix + ".wv");
  w.bv = store.get(prefix + ".bv");
  w.wo = store.get(prefix + ".wo");
  w.bo = store.get(prefix + ".bo");
  w.heads = heads;
  return w;
}

ad::Var multi_head_attention(const ad::Var& x, const AttentionWeights& w, std::size_t seq_len,
                             std::size_t tile) {
  const std::size_t dim = x.value().cols();
  if (w.heads == 0 || dim % w.heads != 0) {
    throw UsageError("embedding width " + std::to_string(dim) + " is not divisible by " +
                     std::to_string(w.heads) + " heads");
  }
  const std::size_t hd = dim / w.heads;
  ad::Var q = ad::linear(x, w.wq, w.bq);
  ad::Var k = ad::linear(x, w.wk, w.bk);
  ad::Var v = ad::linear(x, w.wv, w.bv);
  std::vector<ad::Var> heads;
  heads.reserve(w.heads);
  if (w.heads == 1) {
    heads.push_back(ad::attention(q, k, v, seq_len, tile));
  } else {
    for (std::size_t h = 0; h < w.heads; ++h) {
      heads.push_back(ad::attention(ad::slice_cols(q, h * hd, hd), ad::slice_cols(k, h * hd, hd),
                                    ad::slice_cols(v, h * hd, hd), seq_len, tile));
    }
  }
  ad::Var merged = w.heads == 1 ? heads[0] : ad::concat_cols(heads);
  return ad::linear(merged, w.wo, w.bo);
}

}  // namespace cubevit
