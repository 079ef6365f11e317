#include "cubevit/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <unordered_set>

#include "cubevit/errors.hpp"

namespace cubevit::ad {

Tensor& Node::grad_buffer() {
  if (grad.numel() == 0) grad = Tensor(value.shape(), 0.0);
  return grad;
}

Var Var::constant(Tensor value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  return Var(std::move(n));
}

Var Var::parameter(Tensor value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = true;
  return Var(std::move(n));
}

Tensor Var::grad() const {
  if (node_->grad.numel() == 0) return Tensor(node_->value.shape(), 0.0);
  return node_->grad;
}

void Var::set_value(Tensor value) {
  if (value.shape() != node_->value.shape()) {
    throw ShapeError("set_value changes shape " + shape_str(node_->value.shape()) + " -> " +
                     shape_str(value.shape()));
  }
  node_->value = std::move(value);
}

Var make_op(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backward) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (any) {
    n->requires_grad = true;
    n->inputs.reserve(inputs.size());
    for (auto& in : inputs) n->inputs.push_back(in.shared());
    n->backward = std::move(backward);
  }
  return Var(std::move(n));
}

void backward(const Var& loss) {
  if (!loss.defined() || loss.value().numel() != 1) {
    throw UsageError("backward() needs a single-element loss");
  }
  if (!loss.requires_grad()) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{loss.node(), 0}};
  seen.insert(loss.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  loss.node()->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && n->grad.numel() != 0) n->backward(*n);
  }
  // Interior adjoints are released; leaves keep theirs.
  for (Node* n : order) {
    if (n->backward) n->grad = Tensor();
  }
}

namespace {

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

Node& in(Node& n, std::size_t i) { return *n.inputs[i]; }

bool wants(Node& n, std::size_t i) { return n.inputs[i]->requires_grad; }

// C (m x n) += A (m x k) * B (k x n)
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      if (av == 0.0) continue;
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C (m x n) += A (m x k) * B^T, B is n x k
void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* brow = b + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
      c[i * n + j] += s;
    }
  }
}

// C (m x n) += A^T * B, A is k x m, B is k x n
void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t p = 0; p < k; ++p) {
    const double* arow = a + p * m;
    const double* brow = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double av = arow[i];
      if (av == 0.0) continue;
      double* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <typename Fwd, typename Deriv>
Var unary(const Var& a, Fwd fwd, Deriv deriv) {
  Tensor out(a.shape());
  const Tensor& x = a.value();
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = fwd(x[i]);
  return make_op(std::move(out), {a}, [deriv](Node& self) {
    Node& xn = in(self, 0);
    Tensor& g = xn.grad_buffer();
    for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * deriv(xn.value[i], self.value[i]);
  });
}

}  // namespace

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += b.value()[i];
  return make_op(std::move(out), {a, b}, [](Node& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (!wants(self, k)) continue;
      Tensor& g = in(self, k).grad_buffer();
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
    }
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= b.value()[i];
  return make_op(std::move(out), {a, b}, [](Node& self) {
    if (wants(self, 0)) {
      Tensor& g = in(self, 0).grad_buffer();
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
    }
    if (wants(self, 1)) {
      Tensor& g = in(self, 1).grad_buffer();
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] -= self.grad[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a, b, "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= b.value()[i];
  return make_op(std::move(out), {a, b}, [](Node& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (!wants(self, k)) continue;
      Tensor& g = in(self, k).grad_buffer();
      const Tensor& other = in(self, 1 - k).value;
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * other[i];
    }
  });
}

Var scale(const Var& a, double factor) {
  return unary(a, [factor](double x) { return x * factor; },
               [factor](double, double) { return factor; });
}

Var scale_by(const Var& a, const Var& factor) {
  if (factor.value().numel() != 1) throw ShapeError("scale_by factor must have one element");
  const double f = factor.value()[0];
  Tensor out = a.value();
  for (auto& v : out.data()) v *= f;
  return make_op(std::move(out), {a, factor}, [](Node& self) {
    Node& x = in(self, 0);
    Node& fn = in(self, 1);
    const double f = fn.value[0];
    if (x.requires_grad) {
      Tensor& g = x.grad_buffer();
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * f;
    }
    if (fn.requires_grad) {
      double s = 0.0;
      for (std::size_t i = 0; i < self.grad.numel(); ++i) s += self.grad[i] * x.value[i];
      fn.grad_buffer()[0] += s;
    }
  });
}

Var exp(const Var& a) {
  return unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var abs(const Var& a) {
  return unary(a, [](double x) { return std::abs(x); },
               [](double x, double) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}

Var square(const Var& a) {
  return unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Var relu(const Var& a) {
  return unary(a, [](double x) { return x > 0 ? x : 0.0; },
               [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

Var gelu(const Var& a) {
  return unary(a, [](double x) { return cubevit::gelu(x); },
               [](double x, double) {
                 const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
                 const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
                 return cdf + x * pdf;
               });
}

Var add_tiled(const Var& a, const Var& b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const std::size_t c = av.shape().back();
  if (bv.shape().back() != c || av.numel() % bv.numel() != 0) {
    throw ShapeError("add_tiled: cannot tile " + shape_str(bv.shape()) + " over " +
                     shape_str(av.shape()));
  }
  Tensor out = av;
  const std::size_t period = bv.numel();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += bv[i % period];
  return make_op(std::move(out), {a, b}, [period](Node& self) {
    if (wants(self, 0)) {
      Tensor& g = in(self, 0).grad_buffer();
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
    }
    if (wants(self, 1)) {
      Tensor& g = in(self, 1).grad_buffer();
      for (std::size_t i = 0; i < self.grad.numel(); ++i) g[i % period] += self.grad[i];
    }
  });
}

Var matmul(const Var& a, const Var& b) {
  Tensor out = cubevit::matmul(a.value(), b.value());
  return make_op(std::move(out), {a, b}, [](Node& self) {
    Node& an = in(self, 0);
    Node& bn = in(self, 1);
    const std::size_t m = an.value.rows(), k = an.value.cols(), n = bn.value.cols();
    if (an.requires_grad) gemm_nt(self.grad.data().data(), bn.value.data().data(),
                                  an.grad_buffer().data().data(), m, n, k);
    if (bn.requires_grad) gemm_tn(an.value.data().data(), self.grad.data().data(),
                                  bn.grad_buffer().data().data(), k, m, n);
  });
}

Var matmul_nt(const Var& a, const Var& b) {
  const std::size_t m = a.value().rows(), k = a.value().cols(), n = b.value().rows();
  if (b.value().cols() != k) {
    throw ShapeError("matmul_nt inner extents differ: " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  Tensor out({m, n});
  gemm_nt(a.value().data().data(), b.value().data().data(), out.data().data(), m, k, n);
  return make_op(std::move(out), {a, b}, [m, k, n](Node& self) {
    Node& an = in(self, 0);
    Node& bn = in(self, 1);
    // dA = dY * B, dB = dY^T * A
    if (an.requires_grad) gemm_nn(self.grad.data().data(), bn.value.data().data(),
                                  an.grad_buffer().data().data(), m, n, k);
    if (bn.requires_grad) gemm_tn(self.grad.data().data(), an.value.data().data(),
                                  bn.grad_buffer().data().data(), n, m, k);
  });
}

Var transpose(const Var& a) {
  return make_op(cubevit::transpose(a.value()), {a}, [](Node& self) {
    Node& x = in(self, 0);
    Tensor& g = x.grad_buffer();
    const std::size_t m = x.value.rows(), n = x.value.cols();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) g.at(i, j) += self.grad.at(j, i);
  });
}

Var linear(const Var& x, const Var& weight, const Var& bias) {
  const Tensor& xv = x.value();
  const Tensor& wv = weight.value();
  const std::size_t m = xv.rows(), k = xv.cols(), n = wv.cols();
  if (wv.rows() != k || bias.value().numel() != n) {
    throw ShapeError("linear: input " + shape_str(xv.shape()) + ", weight " + shape_str(wv.shape()) +
                     ", bias " + shape_str(bias.shape()));
  }
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.at(i, j) = bias.value()[j];
  gemm_nn(xv.data().data(), wv.data().data(), out.data().data(), m, k, n);
  return make_op(std::move(out), {x, weight, bias}, [m, k, n](Node& self) {
    Node& xn = in(self, 0);
    Node& wn = in(self, 1);
    Node& bn = in(self, 2);
    const double* dy = self.grad.data().data();
    if (xn.requires_grad) gemm_nt(dy, wn.value.data().data(), xn.grad_buffer().data().data(), m, n, k);
    if (wn.requires_grad) gemm_tn(xn.value.data().data(), dy, wn.grad_buffer().data().data(), k, m, n);
    if (bn.requires_grad) {
      Tensor& g = bn.grad_buffer();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g[j] += dy[i * n + j];
    }
  });
}

Var reshape(const Var& a, Shape shape) {
  return make_op(a.value().reshaped(std::move(shape)), {a}, [](Node& self) {
    Tensor& g = in(self, 0).grad_buffer();
    for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
  });
}

Var softmax(const Var& x, std::size_t axis) {
  Tensor out = cubevit::softmax(x.value(), axis);
  std::size_t inner = 1;
  for (std::size_t i = axis + 1; i < x.value().rank(); ++i) inner *= x.shape()[i];
  const std::size_t extent = x.shape()[axis];
  return make_op(std::move(out), {x}, [inner, extent](Node& self) {
    Tensor& g = in(self, 0).grad_buffer();
    const Tensor& y = self.value;
    const std::size_t outer = y.numel() / (extent * inner);
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t base = o * extent * inner + i;
        double dot = 0.0;
        for (std::size_t e = 0; e < extent; ++e) dot += self.grad[base + e * inner] * y[base + e * inner];
        for (std::size_t e = 0; e < extent; ++e) {
          const std::size_t idx = base + e * inner;
          g[idx] += y[idx] * (self.grad[idx] - dot);
        }
      }
    }
  });
}

Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps) {
  const std::size_t width = x.shape().back();
  Tensor out = cubevit::layer_norm(x.value(), gain.value(), bias.value(), eps);
  return make_op(std::move(out), {x, gain, bias}, [width, eps](Node& self) {
    Node& xn = in(self, 0);
    Node& gn = in(self, 1);
    Node& bn = in(self, 2);
    const std::size_t rows = xn.value.numel() / width;
    std::vector<double> xhat(width), dxhat(width);
    const double w = static_cast<double>(width);
    for (std::size_t r = 0; r < rows; ++r) {
      auto xr = xn.value.row(r);
      double mean = 0.0;
      for (double v : xr) mean += v;
      mean /= w;
      double var = 0.0;
      for (double v : xr) var += (v - mean) * (v - mean);
      var /= w;
      const double inv = 1.0 / std::sqrt(var + eps);
      auto dy = self.grad.row(r);
      double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
      for (std::size_t c = 0; c < width; ++c) {
        xhat[c] = (xr[c] - mean) * inv;
        dxhat[c] = dy[c] * gn.value[c];
        sum_dxhat += dxhat[c];
        sum_dxhat_xhat += dxhat[c] * xhat[c];
      }
      if (gn.requires_grad) {
        Tensor& g = gn.grad_buffer();
        for (std::size_t c = 0; c < width; ++c) g[c] += dy[c] * xhat[c];
      }
      if (bn.requires_grad) {
        Tensor& g = bn.grad_buffer();
        for (std::size_t c = 0; c < width; ++c) g[c] += dy[c];
      }
      if (xn.requires_grad) {
        auto gx = xn.grad_buffer().row(r);
        for (std::size_t c = 0; c < width; ++c) {
          gx[c] += inv / w * (w * dxhat[c] - sum_dxhat - xhat[c] * sum_dxhat_xhat);
        }
      }
    }
  });
}

Var l2_normalize_rows(const Var& x) {
  const Tensor& xv = x.value();
  const std::size_t width = xv.shape().back();
  const std::size_t rows = xv.numel() / width;
  Tensor out(xv.shape());
  std::vector<double> norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (double v : xv.row(r)) s += v * v;
    if (s == 0.0) throw DegenerateInputError("cannot normalize a zero vector (row " + std::to_string(r) + ")");
    norms[r] = std::sqrt(s);
    auto o = out.row(r);
    auto xr = xv.row(r);
    for (std::size_t c = 0; c < width; ++c) o[c] = xr[c] / norms[r];
  }
  return make_op(std::move(out), {x}, [norms = std::move(norms), width](Node& self) {
    Tensor& g = in(self, 0).grad_buffer();
    for (std::size_t r = 0; r < norms.size(); ++r) {
      auto y = self.value.row(r);
      auto dy = self.grad.row(r);
      double dot = 0.0;
      for (std::size_t c = 0; c < width; ++c) dot += y[c] * dy[c];
      auto gr = g.row(r);
      for (std::size_t c = 0; c < width; ++c) gr[c] += (dy[c] - y[c] * dot) / norms[r];
    }
  });
}

Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return make_op(Tensor::scalar(s), {a}, [](Node& self) {
    Tensor& g = in(self, 0).grad_buffer();
    for (auto& v : g.data()) v += self.grad[0];
  });
}

Var mean(const Var& a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().numel())); }

Var segment_mean(const Var& x, std::size_t segment) {
  const Tensor& xv = x.value();
  const std::size_t rows = xv.rows(), cols = xv.cols();
  if (segment == 0) throw UsageError("segment_mean over an empty segment");
  if (rows % segment != 0) {
    throw ShapeError("segment_mean: " + std::to_string(rows) + " rows not divisible by " +
                     std::to_string(segment));
  }
  const std::size_t groups = rows / segment;
  Tensor out({groups, cols});
  const double inv = 1.0 / static_cast<double>(segment);
  for (std::size_t b = 0; b < groups; ++b)
    for (std::size_t r = 0; r < segment; ++r)
      for (std::size_t c = 0; c < cols; ++c) out.at(b, c) += xv.at(b * segment + r, c) * inv;
  return make_op(std::move(out), {x}, [segment, inv](Node& self) {
    Tensor& g = in(self, 0).grad_buffer();
    const std::size_t cols = g.cols();
    for (std::size_t r = 0; r < g.rows(); ++r)
      for (std::size_t c = 0; c < cols; ++c) g.at(r, c) += self.grad.at(r / segment, c) * inv;
  });
}

Var soft_cross_entropy(const Var& logits, const Tensor& targets) {
  if (logits.shape() != targets.shape() || logits.value().rank() != 2) {
    throw ShapeError("soft_cross_entropy: logits " + shape_str(logits.shape()) + " vs targets " +
                     shape_str(targets.shape()));
  }
  const Tensor probs = cubevit::softmax(logits.value(), 1);
  const std::size_t rows = probs.rows(), cols = probs.cols();
  double loss = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    auto z = logits.value().row(r);
    const double mx = *std::max_element(z.begin(), z.end());
    double se = 0.0;
    for (double v : z) se += std::exp(v - mx);
    const double lse = mx + std::log(se);
    for (std::size_t c = 0; c < cols; ++c) loss -= targets.at(r, c) * (z[c] - lse);
  }
  loss /= static_cast<double>(rows);
  return make_op(Tensor::scalar(loss), {logits}, [probs, targets](Node& self) {
    Tensor& g = in(self, 0).grad_buffer();
    const std::size_t rows = probs.rows(), cols = probs.cols();
    const double s = self.grad[0] / static_cast<double>(rows);
    for (std::size_t r = 0; r < rows; ++r) {
      double tsum = 0.0;
      for (std::size_t c = 0; c < cols; ++c) tsum += targets.at(r, c);
      for (std::size_t c = 0; c < cols; ++c) g.at(r, c) += s * (probs.at(r, c) * tsum - targets.at(r, c));
    }
  });
}

Var bce_with_logits(const Var& logits, const Tensor& targets) {
  if (logits.value().numel() != targets.numel()) {
    throw ShapeError("bce_with_logits: logits " + shape_str(logits.shape()) + " vs targets " +
                     shape_str(targets.shape()));
  }
  const std::size_t n = targets.numel();
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double z = logits.value()[i];
    loss += std::max(z, 0.0) - z * targets[i] + std::log1p(std::exp(-std::abs(z)));
  }
  loss /= static_cast<double>(n);
  return make_op(Tensor::scalar(loss), {logits}, [targets](Node& self) {
    Node& x = in(self, 0);
    Tensor& g = x.grad_buffer();
    const double s = self.grad[0] / static_cast<double>(targets.numel());
    for (std::size_t i = 0; i < g.numel(); ++i) {
      const double p = 1.0 / (1.0 + std::exp(-x.value[i]));
      g[i] += s * (p - targets[i]);
    }
  });
}

Var gather_rows(const Var& x, std::span<const std::size_t> rows) {
  const Tensor& xv = x.value();
  const std::size_t cols = xv.cols();
  if (rows.empty()) throw UsageError("gather_rows with no rows");
  Tensor out({rows.size(), cols});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= xv.rows()) throw UsageError("gather_rows index out of range");
    std::copy_n(xv.row(rows[i]).begin(), cols, out.row(i).begin());
  }
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return make_op(std::move(out), {x}, [idx = std::move(idx)](Node& self) {
    Tensor& g = in(self, 0).grad_buffer();
    for (std::size_t i = 0; i < idx.size(); ++i) {
      auto dst = g.row(idx[i]);
      auto src = self.grad.row(i);
      for (std::size_t c = 0; c < dst.size(); ++c) dst[c] += src[c];
    }
  });
}

Var scatter_rows(const Var& x, std::span<const std::size_t> rows, std::size_t total, const Var& fill) {
  const Tensor& xv = x.value();
  const std::size_t cols = xv.cols();
  if (rows.size() != xv.rows()) throw ShapeError("scatter_rows: one index per input row required");
  if (fill.value().numel() != cols) throw ShapeError("scatter_rows: fill width mismatch");
  std::vector<char> taken(total, 0);
  Tensor out({total, cols});
  for (std::size_t r = 0; r < total; ++r) std::copy_n(fill.value().data().begin(), cols, out.row(r).begin());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= total || taken[rows[i]]) throw UsageError("scatter_rows: invalid or repeated index");
    taken[rows[i]] = 1;
    std::copy_n(xv.row(i).begin(), cols, out.row(rows[i]).begin());
  }
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return make_op(std::move(out), {x, fill}, [idx = std::move(idx), taken = std::move(taken)](Node& self) {
    if (wants(self, 0)) {
      Tensor& g = in(self, 0).grad_buffer();
      for (std::size_t i = 0; i < idx.size(); ++i) {
        auto dst = g.row(i);
        auto src = self.grad.row(idx[i]);
        for (std::size_t c = 0; c < dst.size(); ++c) dst[c] += src[c];
      }
    }
    if (wants(self, 1)) {
      Tensor& g = in(self, 1).grad_buffer();
      for (std::size_t r = 0; r < taken.size(); ++r) {
        if (taken[r]) continue;
        auto src = self.grad.row(r);
        for (std::size_t c = 0; c < src.size(); ++c) g[c] += src[c];
      }
    }
  });
}

Var slice_cols(const Var& x, std::size_t start, std::size_t width) {
  const Tensor& xv = x.value();
  const std::size_t rows = xv.rows(), cols = xv.cols();
  if (width == 0 || start + width > cols) throw UsageError("slice_cols out of range");
  Tensor out({rows, width});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < width; ++c) out.at(r, c) = xv.at(r, start + c);
  return make_op(std::move(out), {x}, [start, width](Node& self) {
    Tensor& g = in(self, 0).grad_buffer();
    for (std::size_t r = 0; r < g.rows(); ++r)
      for (std::size_t c = 0; c < width; ++c) g.at(r, start + c) += self.grad.at(r, c);
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw UsageError("concat_cols of nothing");
  const std::size_t rows = parts[0].value().rows();
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.value().rows() != rows) throw ShapeError("concat_cols: row counts differ");
    total += p.value().cols();
  }
  Tensor out({rows, total});
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.value().cols();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < w; ++c) out.at(r, off + c) = p.value().at(r, c);
    off += w;
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return make_op(std::move(out), std::move(inputs), [](Node& self) {
    std::size_t off = 0;
    for (auto& p : self.inputs) {
      const std::size_t w = p->value.cols();
      if (p->requires_grad) {
        Tensor& g = p->grad_buffer();
        for (std::size_t r = 0; r < g.rows(); ++r)
          for (std::size_t c = 0; c < w; ++c) g.at(r, c) += self.grad.at(r, off + c);
      }
      off += w;
    }
  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw UsageError("concat_rows of nothing");
  const std::size_t cols = parts[0].value().cols();
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.value().cols() != cols) throw ShapeError("concat_rows: column counts differ");
    total += p.value().rows();
  }
  std::vector<double> data;
  data.reserve(total * cols);
  for (const auto& p : parts) data.insert(data.end(), p.value().data().begin(), p.value().data().end());
  std::vector<Var> inputs(parts.begin(), parts.end());
  return make_op(Tensor({total, cols}, std::move(data)), std::move(inputs), [](Node& self) {
    std::size_t off = 0;
    for (auto& p : self.inputs) {
      const std::size_t n = p->value.numel();
      if (p->requires_grad) {
        Tensor& g = p->grad_buffer();
        for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[off + i];
      }
      off += n;
    }
  });
}

Var dropout(const Var& x, double p, Rng& rng, bool training) {
  if (p < 0.0 || p >= 1.0) throw UsageError("dropout rate must be in [0, 1)");
  if (!training || p == 0.0) return x;
  std::bernoulli_distribution keep(1.0 - p);
  Tensor mask(x.shape());
  const double s = 1.0 / (1.0 - p);
  for (auto& m : mask.data()) m = keep(rng) ? s : 0.0;
  Tensor out = x.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= mask[i];
  return make_op(std::move(out), {x}, [mask = std::move(mask)](Node& self) {
    Tensor& g = in(self, 0).grad_buffer();
    for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * mask[i];
  });
}

Var factored_position(const Var& planar, const Var& depth) {
  const std::size_t grid = planar.value().rows(), cols = planar.value().cols();
  const std::size_t zs = depth.value().rows();
  if (depth.value().cols() != cols) throw ShapeError("factored_position: width mismatch");
  Tensor out({zs * grid, cols});
  for (std::size_t z = 0; z < zs; ++z)
    for (std::size_t p = 0; p < grid; ++p)
      for (std::size_t c = 0; c < cols; ++c)
        out.at(z * grid + p, c) = planar.value().at(p, c) + depth.value().at(z, c);
  return make_op(std::move(out), {planar, depth}, [grid, zs, cols](Node& self) {
    Node& pn = in(self, 0);
    Node& dn = in(self, 1);
    for (std::size_t z = 0; z < zs; ++z)
      for (std::size_t p = 0; p < grid; ++p)
        for (std::size_t c = 0; c < cols; ++c) {
          const double gv = self.grad.at(z * grid + p, c);
          if (pn.requires_grad) pn.grad_buffer().at(p, c) += gv;
          if (dn.requires_grad) dn.grad_buffer().at(z, c) += gv;
        }
  });
}

}  // namespace cubevit::ad
