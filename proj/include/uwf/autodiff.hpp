#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "uwf/tensor.hpp"

namespace uwf::ag {

struct Node;
using Var = std::shared_ptr<Node>;

/// One tape node. Interior nodes are rebuilt every forward pass; parameter
/// leaves persist across steps and accumulate gradients until cleared.
struct Node {
  Tensor value;
  Tensor grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<Var> parents;
  std::function<void(Node&)> backward;

  Tensor& grad_ref() {
    if (grad.empty()) grad = Tensor::zeros(value.shape());
    return grad;
  }
};

inline Var make_var(Tensor value, bool requires_grad = false) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = requires_grad;
  return n;
}

inline Var make_op(Tensor value, std::vector<Var> parents,
                   std::function<void(Node&)> backward) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  for (const auto& p : parents) n->requires_grad |= p->requires_grad;
  if (n->requires_grad) {
    n->parents = std::move(parents);
    n->backward = std::move(backward);
  }
  return n;
}

/// Reverse-mode sweep from `root`, seeded with ones.
inline void backward(const Var& root) {
  if (!root->requires_grad) return;
  root->grad_ref().fill(1.0f);

  // Iterative post-order DFS for the topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.emplace_back(root.get(), 0);
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      Node* p = node->parents[idx++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
}

namespace detail {
inline void accum(const Var& p, const float* src, int64_t n) {
  Tensor& g = p->grad_ref();
  float* dst = g.data();
  for (int64_t i = 0; i < n; ++i) dst[i] += src[i];
}
}  // namespace detail

// ---- elementwise ------------------------------------------------------------

inline Var add(const Var& a, const Var& b) {
  if (!a->value.same_shape(b->value)) throw std::invalid_argument("add: shape mismatch");
  Tensor out = a->value;
  const float* pb = b->value.data();
  float* po = out.data();
  for (int64_t i = 0; i < out.numel(); ++i) po[i] += pb[i];
  return make_op(std::move(out), {a, b}, [a, b](Node& n) {
    if (a->requires_grad) detail::accum(a, n.grad.data(), n.grad.numel());
    if (b->requires_grad) detail::accum(b, n.grad.data(), n.grad.numel());
  });
}

/// a + tile(b): a.numel must be a multiple of b.numel (e.g. positional
/// embeddings added to every item of a batch).
inline Var add_tiled(const Var& a, const Var& b) {
  int64_t na = a->value.numel(), nb = b->value.numel();
  if (nb == 0 || na % nb != 0) throw std::invalid_argument("add_tiled: size mismatch");
  Tensor out = a->value;
  float* po = out.data();
  const float* pb = b->value.data();
  for (int64_t i = 0; i < na; ++i) po[i] += pb[i % nb];
  return make_op(std::move(out), {a, b}, [a, b, na, nb](Node& n) {
    if (a->requires_grad) detail::accum(a, n.grad.data(), na);
    if (b->requires_grad) {
      Tensor& g = b->grad_ref();
      const float* src = n.grad.data();
      for (int64_t i = 0; i < na; ++i) g[i % nb] += src[i];
    }
  });
}

inline Var scale(const Var& a, float s) {
  Tensor out = a->value;
  float* po = out.data();
  for (int64_t i = 0; i < out.numel(); ++i) po[i] *= s;
  return make_op(std::move(out), {a}, [a, s](Node& n) {
    if (!a->requires_grad) return;
    Tensor& g = a->grad_ref();
    const float* src = n.grad.data();
    for (int64_t i = 0; i < n.grad.numel(); ++i) g[i] += s * src[i];
  });
}

inline Var relu(const Var& a) {
  Tensor out = a->value;
  float* po = out.data();
  for (int64_t i = 0; i < out.numel(); ++i) po[i] = std::max(0.0f, po[i]);
  return make_op(std::move(out), {a}, [a](Node& n) {
    if (!a->requires_grad) return;
    Tensor& g = a->grad_ref();
    const float* src = n.grad.data();
    const float* x = a->value.data();
    for (int64_t i = 0; i < n.grad.numel(); ++i)
      if (x[i] > 0.0f) g[i] += src[i];
  });
}

inline Var relu6(const Var& a) {
  Tensor out = a->value;
  float* po = out.data();
  for (int64_t i = 0; i < out.numel(); ++i) po[i] = std::min(6.0f, std::max(0.0f, po[i]));
  return make_op(std::move(out), {a}, [a](Node& n) {
    if (!a->requires_grad) return;
    Tensor& g = a->grad_ref();
    const float* src = n.grad.data();
    const float* x = a->value.data();
    for (int64_t i = 0; i < n.grad.numel(); ++i)
      if (x[i] > 0.0f && x[i] < 6.0f) g[i] += src[i];
  });
}

inline Var gelu(const Var& a) {
  Tensor out = a->value;
  float* po = out.data();
  for (int64_t i = 0; i < out.numel(); ++i) {
    float x = po[i];
    po[i] = 0.5f * x * (1.0f + std::erf(x * static_cast<float>(M_SQRT1_2)));
  }
  return make_op(std::move(out), {a}, [a](Node& n) {
    if (!a->requires_grad) return;
    Tensor& g = a->grad_ref();
    const float* src = n.grad.data();
    const float* xs = a->value.data();
    constexpr float inv_sqrt_2pi = 0.3989422804014327f;
    for (int64_t i = 0; i < n.grad.numel(); ++i) {
      float x = xs[i];
      float cdf = 0.5f * (1.0f + std::erf(x * static_cast<float>(M_SQRT1_2)));
      float pdf = inv_sqrt_2pi * std::exp(-0.5f * x * x);
      g[i] += src[i] * (cdf + x * pdf);
    }
  });
}

inline Var dropout(const Var& a, float p, bool training, Rng& rng) {
  if (!training || p <= 0.0f) return a;
  auto mask = std::make_shared<std::vector<float>>(static_cast<size_t>(a->value.numel()));
  float keep = 1.0f - p;
  for (auto& m : *mask) m = rng.bernoulli(keep) ? 1.0f / keep : 0.0f;
  Tensor out = a->value;
  float* po = out.data();
  for (int64_t i = 0; i < out.numel(); ++i) po[i] *= (*mask)[static_cast<size_t>(i)];
  return make_op(std::move(out), {a}, [a, mask](Node& n) {
    if (!a->requires_grad) return;
    Tensor& g = a->grad_ref();
    const float* src = n.grad.data();
    for (int64_t i = 0; i < n.grad.numel(); ++i)
      g[i] += src[i] * (*mask)[static_cast<size_t>(i)];
  });
}

// ---- shape ------------------------------------------------------------------

inline Var reshape(const Var& a, std::vector<int> shape) {
  Tensor out = a->value.reshaped(std::move(shape));
  return make_op(std::move(out), {a}, [a](Node& n) {
    if (a->requires_grad) detail::accum(a, n.grad.data(), n.grad.numel());
  });
}

namespace detail {
inline std::vector<int64_t> strides_of(const std::vector<int>& shape) {
  std::vector<int64_t> s(shape.size());
  int64_t acc = 1;
  for (int i = static_cast<int>(shape.size()) - 1; i >= 0; --i) {
    s[static_cast<size_t>(i)] = acc;
    acc *= shape[static_cast<size_t>(i)];
  }
  return s;
}

inline void permute_copy(const float* src, float* dst, const std::vector<int>& in_shape,
                         const std::vector<int>& perm) {
  auto in_strides = strides_of(in_shape);
  std::vector<int> out_shape(perm.size());
  for (size_t i = 0; i < perm.size(); ++i) out_shape[i] = in_shape[static_cast<size_t>(perm[i])];
  auto out_strides = strides_of(out_shape);
  int64_t n = 1;
  for (int d : in_shape) n *= d;
  size_t nd = perm.size();
  std::vector<int> idx(nd, 0);
  for (int64_t o = 0; o < n; ++o) {
    int64_t src_off = 0;
    for (size_t i = 0; i < nd; ++i) src_off += idx[i] * in_strides[static_cast<size_t>(perm[i])];
    dst[o] = src[src_off];
    for (int i = static_cast<int>(nd) - 1; i >= 0; --i) {
      if (++idx[static_cast<size_t>(i)] < out_shape[static_cast<size_t>(i)]) break;
      idx[static_cast<size_t>(i)] = 0;
    }
  }
}
}  // namespace detail

inline Var permute(const Var& a, std::vector<int> perm) {
  const auto& in_shape = a->value.shape();
  if (perm.size() != in_shape.size()) throw std::invalid_argument("permute: rank mismatch");
  std::vector<int> out_shape(perm.size());
  for (size_t i = 0; i < perm.size(); ++i)
    out_shape[i] = in_shape[static_cast<size_t>(perm[i])];
  Tensor out(out_shape);
  detail::permute_copy(a->value.data(), out.data(), in_shape, perm);
  return make_op(std::move(out), {a}, [a, perm, out_shape](Node& n) {
    if (!a->requires_grad) return;
    std::vector<int> inv(perm.size());
    for (size_t i = 0; i < perm.size(); ++i) inv[static_cast<size_t>(perm[i])] = static_cast<int>(i);
    Tensor tmp(a->value.shape());
    detail::permute_copy(n.grad.data(), tmp.data(), out_shape, inv);
    detail::accum(a, tmp.data(), tmp.numel());
  });
}

/// Slice `len` entries starting at `start` along `dim` (copying).
inline Var narrow(const Var& a, int dim, int start, int len) {
  const auto& shape = a->value.shape();
  auto strides = detail::strides_of(shape);
  std::vector<int> out_shape = shape;
  out_shape[static_cast<size_t>(dim)] = len;
  Tensor out(out_shape);

  int64_t outer = 1;
  for (int i = 0; i < dim; ++i) outer *= shape[static_cast<size_t>(i)];
  int64_t inner = strides[static_cast<size_t>(dim)];
  int64_t in_dim = shape[static_cast<size_t>(dim)];

  const float* src = a->value.data();
  float* dst = out.data();
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t d = 0; d < len; ++d)
      std::copy_n(src + (o * in_dim + start + d) * inner, inner,
                  dst + (o * len + d) * inner);

  return make_op(std::move(out), {a}, [a, dim, start, len, outer, inner, in_dim](Node& n) {
    if (!a->requires_grad) return;
    Tensor& g = a->grad_ref();
    const float* gs = n.grad.data();
    for (int64_t o = 0; o < outer; ++o)
      for (int64_t d = 0; d < len; ++d) {
        float* dst = g.data() + (o * in_dim + start + d) * inner;
        const float* src = gs + (o * len + d) * inner;
        for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
      }
  });
}

/// Repeat a [1,...] tensor B times along a new leading axis.
inline Var tile_batch(const Var& a, int B) {
  int64_t n = a->value.numel();
  std::vector<int> shape = a->value.shape();
  shape[0] = B;
  Tensor out(shape);
  for (int b = 0; b < B; ++b) std::copy_n(a->value.data(), n, out.data() + b * n);
  return make_op(std::move(out), {a}, [a, B, n](Node& nd) {
    if (!a->requires_grad) return;
    Tensor& g = a->grad_ref();
    const float* src = nd.grad.data();
    for (int b = 0; b < B; ++b)
      for (int64_t i = 0; i < n; ++i) g[i] += src[b * n + i];
  });
}

/// Concatenate two [B,T,D] tensors along the token axis.
inline Var concat_tokens(const Var& a, const Var& b) {
  int B = a->value.dim(0), Ta = a->value.dim(1), D = a->value.dim(2);
  int Tb = b->value.dim(1);
  Tensor out({B, Ta + Tb, D});
  const int64_t ra = static_cast<int64_t>(Ta) * D, rb = static_cast<int64_t>(Tb) * D;
  for (int i = 0; i < B; ++i) {
    std::copy_n(a->value.data() + i * ra, ra, out.data() + i * (ra + rb));
    std::copy_n(b->value.data() + i * rb, rb, out.data() + i * (ra + rb) + ra);
  }
  return make_op(std::move(out), {a, b}, [a, b, B, ra, rb](Node& nd) {
    const float* src = nd.grad.data();
    if (a->requires_grad) {
      Tensor& g = a->grad_ref();
      for (int i = 0; i < B; ++i)
        for (int64_t j = 0; j < ra; ++j) g[i * ra + j] += src[i * (ra + rb) + j];
    }
    if (b->requires_grad) {
      Tensor& g = b->grad_ref();
      for (int i = 0; i < B; ++i)
        for (int64_t j = 0; j < rb; ++j) g[i * rb + j] += src[i * (ra + rb) + ra + j];
    }
  });
}

// ---- linear algebra ----------------------------------------------------------

inline Var matmul(const Var& a, const Var& b) {
  int m = a->value.dim(0), k = a->value.dim(1), n = b->value.dim(1);
  if (b->value.dim(0) != k) throw std::invalid_argument("matmul: inner dim mismatch");
  Tensor out({m, n});
  out.as_matrix(m, n).noalias() = a->value.as_matrix(m, k) * b->value.as_matrix(k, n);
  return make_op(std::move(out), {a, b}, [a, b, m, k, n](Node& nd) {
    EConstMap g(nd.grad.data(), m, n);
    if (a->requires_grad)
      a->grad_ref().as_matrix(m, k).noalias() += g * b->value.as_matrix(k, n).transpose();
    if (b->requires_grad)
      b->grad_ref().as_matrix(k, n).noalias() += a->value.as_matrix(m, k).transpose() * g;
  });
}

/// y = x * w^T + bias, weight stored [out_features, in_features].
inline Var linear(const Var& x, const Var& w, const Var& bias) {
  int m = x->value.dim(0), k = x->value.dim(1), n = w->value.dim(0);
  if (w->value.dim(1) != k) throw std::invalid_argument("linear: feature dim mismatch");
  Tensor out({m, n});
  auto Y = out.as_matrix(m, n);
  Y.noalias() = x->value.as_matrix(m, k) * w->value.as_matrix(n, k).transpose();
  const float* bp = bias->value.data();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out.at(i, j) += bp[j];
  return make_op(std::move(out), {x, w, bias}, [x, w, bias, m, k, n](Node& nd) {
    EConstMap g(nd.grad.data(), m, n);
    if (x->requires_grad)
      x->grad_ref().as_matrix(m, k).noalias() += g * w->value.as_matrix(n, k);
    if (w->requires_grad)
      w->grad_ref().as_matrix(n, k).noalias() += g.transpose() * x->value.as_matrix(m, k);
    if (bias->requires_grad) {
      Tensor& bg = bias->grad_ref();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) bg[j] += g(i, j);
    }
  });
}

/// Batched matmul on [G,M,K] x [G,K,N]; transpose_b treats b as [G,N,K].
inline Var bmm(const Var& a, const Var& b, bool transpose_b = false) {
  int G = a->value.dim(0), M = a->value.dim(1), K = a->value.dim(2);
  int N = transpose_b ? b->value.dim(1) : b->value.dim(2);
  Tensor out({G, M, N});
  for (int g = 0; g < G; ++g) {
    EConstMap A(a->value.data() + static_cast<int64_t>(g) * M * K, M, K);
    EMap Y(out.data() + static_cast<int64_t>(g) * M * N, M, N);
    if (transpose_b) {
      EConstMap B(b->value.data() + static_cast<int64_t>(g) * N * K, N, K);
      Y.noalias() = A * B.transpose();
    } else {
      EConstMap B(b->value.data() + static_cast<int64_t>(g) * K * N, K, N);
      Y.noalias() = A * B;
    }
  }
  return make_op(std::move(out), {a, b}, [a, b, G, M, K, N, transpose_b](Node& nd) {
    for (int g = 0; g < G; ++g) {
      EConstMap Gm(nd.grad.data() + static_cast<int64_t>(g) * M * N, M, N);
      EConstMap A(a->value.data() + static_cast<int64_t>(g) * M * K, M, K);
      if (transpose_b) {
        EConstMap B(b->value.data() + static_cast<int64_t>(g) * N * K, N, K);
        if (a->requires_grad) {
          EMap dA(a->grad_ref().data() + static_cast<int64_t>(g) * M * K, M, K);
          dA.noalias() += Gm * B;
        }
        if (b->requires_grad) {
          EMap dB(b->grad_ref().data() + static_cast<int64_t>(g) * N * K, N, K);
          dB.noalias() += Gm.transpose() * A;
        }
      } else {
        EConstMap B(b->value.data() + static_cast<int64_t>(g) * K * N, K, N);
        if (a->requires_grad) {
          EMap dA(a->grad_ref().data() + static_cast<int64_t>(g) * M * K, M, K);
          dA.noalias() += Gm * B.transpose();
        }
        if (b->requires_grad) {
          EMap dB(b->grad_ref().data() + static_cast<int64_t>(g) * K * N, K, N);
          dB.noalias() += A.transpose() * Gm;
        }
      }
    }
  });
}

// ---- reductions / normalization ----------------------------------------------

inline Var softmax_rows(const Var& a) {
  int m = a->value.dim(0), c = a->value.dim(1);
  Tensor out = a->value;
  for (int i = 0; i < m; ++i) {
    float* row = out.data() + static_cast<int64_t>(i) * c;
    float mx = *std::max_element(row, row + c);
    float sum = 0.0f;
    for (int j = 0; j < c; ++j) {
      row[j] = std::exp(row[j] - mx);
      sum += row[j];
    }
    for (int j = 0; j < c; ++j) row[j] /= sum;
  }
  return make_op(std::move(out), {a}, [a, m, c](Node& nd) {
    if (!a->requires_grad) return;
    Tensor& g = a->grad_ref();
    const float* gs = nd.grad.data();
    const float* y = nd.value.data();
    for (int i = 0; i < m; ++i) {
      int64_t off = static_cast<int64_t>(i) * c;
      float dot = 0.0f;
      for (int j = 0; j < c; ++j) dot += gs[off + j] * y[off + j];
      for (int j = 0; j < c; ++j) g[off + j] += y[off + j] * (gs[off + j] - dot);
    }
  });
}

/// Softmax over the last dim of a 3-d tensor [G,M,N] (attention scores).
inline Var softmax_lastdim3(const Var& a) {
  int G = a->value.dim(0), M = a->value.dim(1), N = a->value.dim(2);
  auto flat = reshape(a, {G * M, N});
  auto sm = softmax_rows(flat);
  return reshape(sm, {G, M, N});
}

/// Mean of -sum(labels * log(probs + eps)) over rows. Labels may be soft.
inline Var cross_entropy_probs(const Var& probs, const Tensor& labels, double eps = 1e-12) {
  int m = probs->value.dim(0), c = probs->value.dim(1);
  if (!probs->value.same_shape(labels)) throw std::invalid_argument("cross_entropy: shape mismatch");
  double total = 0.0;
  const float* p = probs->value.data();
  const float* y = labels.data();
  for (int64_t i = 0; i < probs->value.numel(); ++i)
    if (y[i] != 0.0f) total -= static_cast<double>(y[i]) * std::log(static_cast<double>(p[i]) + eps);
  Tensor out({1});
  out[0] = static_cast<float>(total / m);
  Tensor labels_copy = labels;
  return make_op(std::move(out), {probs}, [probs, labels_copy, m, eps](Node& nd) {
    if (!probs->requires_grad) return;
    Tensor& g = probs->grad_ref();
    const float* p = probs->value.data();
    const float* y = labels_copy.data();
    float go = nd.grad[0];
    for (int64_t i = 0; i < probs->value.numel(); ++i)
      if (y[i] != 0.0f)
        g[i] -= go * y[i] / (static_cast<float>(eps) + p[i]) / static_cast<float>(m);
  });
}

/// Fused log-softmax cross entropy over logits. Same value as
/// cross_entropy_probs(softmax(logits), labels) but with the bounded
/// (p - y) gradient, which survives saturated logits.
inline Var cross_entropy_logits(const Var& logits, const Tensor& labels) {
  int m = logits->value.dim(0), c = logits->value.dim(1);
  if (!logits->value.same_shape(labels))
    throw std::invalid_argument("cross_entropy_logits: shape mismatch");
  auto probs = std::make_shared<Tensor>(Tensor({m, c}));
  double total = 0.0;
  const float* z = logits->value.data();
  const float* y = labels.data();
  for (int i = 0; i < m; ++i) {
    int64_t off = static_cast<int64_t>(i) * c;
    double mx = z[off];
    for (int j = 1; j < c; ++j) mx = std::max(mx, static_cast<double>(z[off + j]));
    double sum = 0.0;
    for (int j = 0; j < c; ++j) sum += std::exp(static_cast<double>(z[off + j]) - mx);
    double log_z = std::log(sum) + mx;
    for (int j = 0; j < c; ++j) {
      double lp = static_cast<double>(z[off + j]) - log_z;
      (*probs)[off + j] = static_cast<float>(std::exp(lp));
      if (y[off + j] != 0.0f) total -= static_cast<double>(y[off + j]) * lp;
    }
  }
  Tensor out({1});
  out[0] = static_cast<float>(total / m);
  Tensor labels_copy = labels;
  return make_op(std::move(out), {logits}, [logits, labels_copy, probs, m, c](Node& nd) {
    if (!logits->requires_grad) return;
    Tensor& g = logits->grad_ref();
    const float* y = labels_copy.data();
    float go = nd.grad[0] / static_cast<float>(m);
    for (int i = 0; i < m; ++i) {
      int64_t off = static_cast<int64_t>(i) * c;
      float ysum = 0.0f;
      for (int j = 0; j < c; ++j) ysum += y[off + j];
      for (int j = 0; j < c; ++j)
        g[off + j] += go * ((*probs)[off + j] * ysum - y[off + j]);
    }
  });
}

inline Var layernorm(const Var& x, const Var& gamma, const Var& beta, float eps = 1e-5f) {
  int m = x->value.dim(0), d = x->value.dim(1);
  Tensor out({m, d});
  auto xhat = std::make_shared<Tensor>(Tensor({m, d}));
  auto invstd = std::make_shared<std::vector<float>>(static_cast<size_t>(m));
  const float* xp = x->value.data();
  const float* gp = gamma->value.data();
  const float* bp = beta->value.data();
  for (int i = 0; i < m; ++i) {
    const float* row = xp + static_cast<int64_t>(i) * d;
    float mean = 0.0f;
    for (int j = 0; j < d; ++j) mean += row[j];
    mean /= d;
    float var = 0.0f;
    for (int j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= d;
    float is = 1.0f / std::sqrt(var + eps);
    (*invstd)[static_cast<size_t>(i)] = is;
    for (int j = 0; j < d; ++j) {
      float xh = (row[j] - mean) * is;
      (*xhat)[static_cast<int64_t>(i) * d + j] = xh;
      out[static_cast<int64_t>(i) * d + j] = gp[j] * xh + bp[j];
    }
  }
  return make_op(std::move(out), {x, gamma, beta}, [x, gamma, beta, xhat, invstd, m, d](Node& nd) {
    const float* gs = nd.grad.data();
    const float* gp = gamma->value.data();
    if (gamma->requires_grad || beta->requires_grad) {
      Tensor& gg = gamma->grad_ref();
      Tensor& bg = beta->grad_ref();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < d; ++j) {
          int64_t k = static_cast<int64_t>(i) * d + j;
          gg[j] += gs[k] * (*xhat)[k];
          bg[j] += gs[k];
        }
    }
    if (!x->requires_grad) return;
    Tensor& xg = x->grad_ref();
    for (int i = 0; i < m; ++i) {
      int64_t off = static_cast<int64_t>(i) * d;
      float sum_dy = 0.0f, sum_dy_xhat = 0.0f;
      for (int j = 0; j < d; ++j) {
        float dy = gs[off + j] * gp[j];
        sum_dy += dy;
        sum_dy_xhat += dy * (*xhat)[off + j];
      }
      float is = (*invstd)[static_cast<size_t>(i)];
      for (int j = 0; j < d; ++j) {
        float dy = gs[off + j] * gp[j];
        xg[off + j] += is * (dy - sum_dy / d - (*xhat)[off + j] * sum_dy_xhat / d);
      }
    }
  });
}

// ---- convolution -------------------------------------------------------------

namespace detail {
struct ConvDims {
  int B, C, H, W, O, kh, kw, stride, pad, OH, OW;
};

inline void im2col(const float* x, float* col, int C, int H, int W, int kh, int kw,
                   int stride, int pad, int OH, int OW) {
  // col layout: [C*kh*kw, OH*OW]
  for (int c = 0; c < C; ++c)
    for (int ky = 0; ky < kh; ++ky)
      for (int kx = 0; kx < kw; ++kx) {
        float* dst = col + ((static_cast<int64_t>(c) * kh + ky) * kw + kx) * OH * OW;
        for (int oy = 0; oy < OH; ++oy) {
          int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= H) {
            std::fill_n(dst + static_cast<int64_t>(oy) * OW, OW, 0.0f);
            continue;
          }
          const float* src_row = x + (static_cast<int64_t>(c) * H + iy) * W;
          for (int ox = 0; ox < OW; ++ox) {
            int ix = ox * stride - pad + kx;
            dst[static_cast<int64_t>(oy) * OW + ox] =
                (ix >= 0 && ix < W) ? src_row[ix] : 0.0f;
          }
        }
      }
}

inline void col2im_accum(const float* col, float* x, int C, int H, int W, int kh, int kw,
                         int stride, int pad, int OH, int OW) {
  for (int c = 0; c < C; ++c)
    for (int ky = 0; ky < kh; ++ky)
      for (int kx = 0; kx < kw; ++kx) {
        const float* src = col + ((static_cast<int64_t>(c) * kh + ky) * kw + kx) * OH * OW;
        for (int oy = 0; oy < OH; ++oy) {
          int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= H) continue;
          float* dst_row = x + (static_cast<int64_t>(c) * H + iy) * W;
          for (int ox = 0; ox < OW; ++ox) {
            int ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < W) dst_row[ix] += src[static_cast<int64_t>(oy) * OW + ox];
          }
        }
      }
}
}  // namespace detail

/// 2-d convolution. groups must be 1 (dense) or C (depthwise, requires O == C).
inline Var conv2d(const Var& x, const Var& w, const Var& bias, int stride, int pad,
                  int groups = 1) {
  const auto& xs = x->value.shape();
  const auto& ws = w->value.shape();
  detail::ConvDims d;
  d.B = xs[0]; d.C = xs[1]; d.H = xs[2]; d.W = xs[3];
  d.O = ws[0]; d.kh = ws[2]; d.kw = ws[3];
  d.stride = stride; d.pad = pad;
  d.OH = (d.H + 2 * pad - d.kh) / stride + 1;
  d.OW = (d.W + 2 * pad - d.kw) / stride + 1;
  if (groups != 1 && (groups != d.C || d.O != d.C))
    throw std::invalid_argument("conv2d: only dense or depthwise grouping supported");
  const bool depthwise = groups != 1;
  if (!depthwise && ws[1] != d.C) throw std::invalid_argument("conv2d: channel mismatch");

  Tensor out({d.B, d.O, d.OH, d.OW});
  const int64_t plane = static_cast<int64_t>(d.OH) * d.OW;

  if (depthwise) {
    const float* xp = x->value.data();
    const float* wp = w->value.data();
    const float* bp = bias->value.data();
    float* op = out.data();
#pragma omp parallel for collapse(2) schedule(static)
    for (int b = 0; b < d.B; ++b)
      for (int c = 0; c < d.C; ++c) {
        const float* xin = xp + (static_cast<int64_t>(b) * d.C + c) * d.H * d.W;
        const float* ker = wp + static_cast<int64_t>(c) * d.kh * d.kw;
        float* yout = op + (static_cast<int64_t>(b) * d.C + c) * plane;
        for (int oy = 0; oy < d.OH; ++oy)
          for (int ox = 0; ox < d.OW; ++ox) {
            float acc = bp[c];
            for (int ky = 0; ky < d.kh; ++ky) {
              int iy = oy * stride - pad + ky;
              if (iy < 0 || iy >= d.H) continue;
              for (int kx = 0; kx < d.kw; ++kx) {
                int ix = ox * stride - pad + kx;
                if (ix < 0 || ix >= d.W) continue;
                acc += ker[ky * d.kw + kx] * xin[static_cast<int64_t>(iy) * d.W + ix];
              }
            }
            yout[static_cast<int64_t>(oy) * d.OW + ox] = acc;
          }
      }
  } else {
    const int64_t krows = static_cast<int64_t>(d.C) * d.kh * d.kw;
    auto col = std::make_shared<Tensor>(Tensor({static_cast<int>(krows), d.B * d.OH * d.OW}));
    for (int b = 0; b < d.B; ++b) {
      // column block for image b occupies columns [b*plane, (b+1)*plane)
      Tensor tmp({static_cast<int>(krows), static_cast<int>(plane)});
      detail::im2col(x->value.data() + static_cast<int64_t>(b) * d.C * d.H * d.W,
                     tmp.data(), d.C, d.H, d.W, d.kh, d.kw, stride, pad, d.OH, d.OW);
      for (int64_t r = 0; r < krows; ++r)
        std::copy_n(tmp.data() + r * plane, plane,
                    col->data() + r * d.B * plane + static_cast<int64_t>(b) * plane);
    }
    Tensor y({d.O, static_cast<int>(d.B * plane)});
    y.as_matrix(d.O, d.B * static_cast<int>(plane)).noalias() =
        w->value.as_matrix(d.O, static_cast<int>(krows)) *
        col->as_matrix(static_cast<int>(krows), d.B * static_cast<int>(plane));
    const float* bp = bias->value.data();
    for (int b = 0; b < d.B; ++b)
      for (int o = 0; o < d.O; ++o) {
        const float* src = y.data() + (static_cast<int64_t>(o) * d.B + b) * plane;
        float* dst = out.data() + (static_cast<int64_t>(b) * d.O + o) * plane;
        for (int64_t i = 0; i < plane; ++i) dst[i] = src[i] + bp[o];
      }
    // keep the column matrix alive for the backward GEMMs
    return make_op(std::move(out), {x, w, bias}, [x, w, bias, d, col, plane, krows](Node& nd) {
      Tensor gy({d.O, static_cast<int>(d.B * plane)});
      for (int b = 0; b < d.B; ++b)
        for (int o = 0; o < d.O; ++o)
          std::copy_n(nd.grad.data() + (static_cast<int64_t>(b) * d.O + o) * plane, plane,
                      gy.data() + (static_cast<int64_t>(o) * d.B + b) * plane);
      auto GY = gy.as_matrix(d.O, d.B * static_cast<int>(plane));
      if (bias->requires_grad) {
        Tensor& bg = bias->grad_ref();
        for (int o = 0; o < d.O; ++o) bg[o] += GY.row(o).sum();
      }
      if (w->requires_grad) {
        w->grad_ref().as_matrix(d.O, static_cast<int>(krows)).noalias() +=
            GY * col->as_matrix(static_cast<int>(krows), d.B * static_cast<int>(plane)).transpose();
      }
      if (x->requires_grad) {
        Tensor dcol({static_cast<int>(krows), d.B * static_cast<int>(plane)});
        dcol.as_matrix(static_cast<int>(krows), d.B * static_cast<int>(plane)).noalias() =
            w->value.as_matrix(d.O, static_cast<int>(krows)).transpose() * GY;
        Tensor& xg = x->grad_ref();
        Tensor tmp({static_cast<int>(krows), static_cast<int>(plane)});
        for (int b = 0; b < d.B; ++b) {
          for (int64_t r = 0; r < krows; ++r)
            std::copy_n(dcol.data() + r * d.B * plane + static_cast<int64_t>(b) * plane, plane,
                        tmp.data() + r * plane);
          detail::col2im_accum(tmp.data(),
                               xg.data() + static_cast<int64_t>(b) * d.C * d.H * d.W,
                               d.C, d.H, d.W, d.kh, d.kw, d.stride, d.pad, d.OH, d.OW);
        }
      }
    });
  }

  // depthwise backward
  return make_op(std::move(out), {x, w, bias}, [x, w, bias, d, plane](Node& nd) {
    const float* gs = nd.grad.data();
    if (bias->requires_grad) {
      Tensor& bg = bias->grad_ref();
      for (int b = 0; b < d.B; ++b)
        for (int c = 0; c < d.C; ++c) {
          const float* g = gs + (static_cast<int64_t>(b) * d.C + c) * plane;
          float acc = 0.0f;
          for (int64_t i = 0; i < plane; ++i) acc += g[i];
          bg[c] += acc;
        }
    }
    const float* xp = x->value.data();
    const float* wp = w->value.data();
    if (w->requires_grad) {
      Tensor& wg = w->grad_ref();
#pragma omp parallel for schedule(static)
      for (int c = 0; c < d.C; ++c) {
        float* kerg = wg.data() + static_cast<int64_t>(c) * d.kh * d.kw;
        for (int b = 0; b < d.B; ++b) {
          const float* xin = xp + (static_cast<int64_t>(b) * d.C + c) * d.H * d.W;
          const float* g = gs + (static_cast<int64_t>(b) * d.C + c) * plane;
          for (int oy = 0; oy < d.OH; ++oy)
            for (int ox = 0; ox < d.OW; ++ox) {
              float gv = g[static_cast<int64_t>(oy) * d.OW + ox];
              if (gv == 0.0f) continue;
              for (int ky = 0; ky < d.kh; ++ky) {
                int iy = oy * d.stride - d.pad + ky;
                if (iy < 0 || iy >= d.H) continue;
                for (int kx = 0; kx < d.kw; ++kx) {
                  int ix = ox * d.stride - d.pad + kx;
                  if (ix < 0 || ix >= d.W) continue;
                  kerg[ky * d.kw + kx] += gv * xin[static_cast<int64_t>(iy) * d.W + ix];
                }
              }
            }
        }
      }
    }
    if (x->requires_grad) {
      Tensor& xg = x->grad_ref();
#pragma omp parallel for collapse(2) schedule(static)
      for (int b = 0; b < d.B; ++b)
        for (int c = 0; c < d.C; ++c) {
          float* xgin = xg.data() + (static_cast<int64_t>(b) * d.C + c) * d.H * d.W;
          const float* ker = wp + static_cast<int64_t>(c) * d.kh * d.kw;
          const float* g = gs + (static_cast<int64_t>(b) * d.C + c) * plane;
          for (int oy = 0; oy < d.OH; ++oy)
            for (int ox = 0; ox < d.OW; ++ox) {
              float gv = g[static_cast<int64_t>(oy) * d.OW + ox];
              if (gv == 0.0f) continue;
              for (int ky = 0; ky < d.kh; ++ky) {
                int iy = oy * d.stride - d.pad + ky;
                if (iy < 0 || iy >= d.H) continue;
                for (int kx = 0; kx < d.kw; ++kx) {
                  int ix = ox * d.stride - d.pad + kx;
                  if (ix < 0 || ix >= d.W) continue;
                  xgin[static_cast<int64_t>(iy) * d.W + ix] += gv * ker[ky * d.kw + kx];
                }
              }
            }
        }
    }
  });
}

// ---- pooling -----------------------------------------------------------------

inline Var maxpool2d(const Var& x, int k, int stride, int pad) {
  const auto& xs = x->value.shape();
  int B = xs[0], C = xs[1], H = xs[2], W = xs[3];
  int OH = (H + 2 * pad - k) / stride + 1;
  int OW = (W + 2 * pad - k) / stride + 1;
  Tensor out({B, C, OH, OW});
  auto argmax = std::make_shared<std::vector<int32_t>>(static_cast<size_t>(out.numel()));
  const float* xp = x->value.data();
  float* op = out.data();
  int64_t idx = 0;
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      const float* plane = xp + (static_cast<int64_t>(b) * C + c) * H * W;
      for (int oy = 0; oy < OH; ++oy)
        for (int ox = 0; ox < OW; ++ox, ++idx) {
          float best = -std::numeric_limits<float>::infinity();
          int32_t best_i = 0;
          for (int ky = 0; ky < k; ++ky) {
            int iy = oy * stride - pad + ky;
            if (iy < 0 || iy >= H) continue;
            for (int kx = 0; kx < k; ++kx) {
              int ix = ox * stride - pad + kx;
              if (ix < 0 || ix >= W) continue;
              float v = plane[static_cast<int64_t>(iy) * W + ix];
              if (v > best) {
                best = v;
                best_i = static_cast<int32_t>(iy * W + ix);
              }
            }
          }
          op[idx] = best;
          (*argmax)[static_cast<size_t>(idx)] = best_i;
        }
    }
  int64_t plane_in = static_cast<int64_t>(H) * W;
  int64_t plane_out = static_cast<int64_t>(OH) * OW;
  return make_op(std::move(out), {x}, [x, argmax, B, C, plane_in, plane_out](Node& nd) {
    if (!x->requires_grad) return;
    Tensor& g = x->grad_ref();
    const float* gs = nd.grad.data();
    for (int64_t bc = 0; bc < static_cast<int64_t>(B) * C; ++bc) {
      float* gp = g.data() + bc * plane_in;
      const float* gop = gs + bc * plane_out;
      const int32_t* am = argmax->data() + bc * plane_out;
      for (int64_t i = 0; i < plane_out; ++i) gp[am[i]] += gop[i];
    }
  });
}

inline Var global_avgpool(const Var& x) {
  const auto& xs = x->value.shape();
  int B = xs[0], C = xs[1];
  int64_t plane = static_cast<int64_t>(xs[2]) * xs[3];
  Tensor out({B, C});
  const float* xp = x->value.data();
  for (int64_t bc = 0; bc < static_cast<int64_t>(B) * C; ++bc) {
    const float* p = xp + bc * plane;
    float acc = 0.0f;
    for (int64_t i = 0; i < plane; ++i) acc += p[i];
    out[bc] = acc / static_cast<float>(plane);
  }
  return make_op(std::move(out), {x}, [x, B, C, plane](Node& nd) {
    if (!x->requires_grad) return;
    Tensor& g = x->grad_ref();
    const float* gs = nd.grad.data();
    for (int64_t bc = 0; bc < static_cast<int64_t>(B) * C; ++bc) {
      float v = gs[bc] / static_cast<float>(plane);
      float* gp = g.data() + bc * plane;
      for (int64_t i = 0; i < plane; ++i) gp[i] += v;
    }
  });
}

/// Mean over the token axis of [B,T,D] -> [B,D].
inline Var mean_tokens(const Var& x) {
  int B = x->value.dim(0), T = x->value.dim(1), D = x->value.dim(2);
  Tensor out({B, D});
  const float* xp = x->value.data();
  for (int b = 0; b < B; ++b)
    for (int t = 0; t < T; ++t)
      for (int j = 0; j < D; ++j)
        out[static_cast<int64_t>(b) * D + j] += xp[(static_cast<int64_t>(b) * T + t) * D + j];
  for (int64_t i = 0; i < out.numel(); ++i) out[i] /= static_cast<float>(T);
  return make_op(std::move(out), {x}, [x, B, T, D](Node& nd) {
    if (!x->requires_grad) return;
    Tensor& g = x->grad_ref();
    const float* gs = nd.grad.data();
    for (int b = 0; b < B; ++b)
      for (int t = 0; t < T; ++t)
        for (int j = 0; j < D; ++j)
          g[(static_cast<int64_t>(b) * T + t) * D + j] +=
              gs[static_cast<int64_t>(b) * D + j] / static_cast<float>(T);
  });
}

// ---- batch normalization -------------------------------------------------------

struct BnBuffers {
  Tensor running_mean;
  Tensor running_var;
};

/// BatchNorm over [B,C,H,W]. In training mode uses batch statistics and
/// updates the running buffers in place; in eval mode uses the buffers.
inline Var batchnorm2d(const Var& x, const Var& gamma, const Var& beta, BnBuffers& buffers,
                       bool training, float momentum = 0.1f, float eps = 1e-5f) {
  const auto& xs = x->value.shape();
  int B = xs[0], C = xs[1], H = xs[2], W = xs[3];
  int64_t plane = static_cast<int64_t>(H) * W;
  int64_t reduce = static_cast<int64_t>(B) * plane;

  auto mean = std::make_shared<std::vector<float>>(static_cast<size_t>(C), 0.0f);
  auto invstd = std::make_shared<std::vector<float>>(static_cast<size_t>(C), 0.0f);
  const float* xp = x->value.data();

  if (training) {
    for (int c = 0; c < C; ++c) {
      double acc = 0.0;
      for (int b = 0; b < B; ++b) {
        const float* p = xp + (static_cast<int64_t>(b) * C + c) * plane;
        for (int64_t i = 0; i < plane; ++i) acc += p[i];
      }
      (*mean)[static_cast<size_t>(c)] = static_cast<float>(acc / reduce);
    }
    for (int c = 0; c < C; ++c) {
      double acc = 0.0;
      float mu = (*mean)[static_cast<size_t>(c)];
      for (int b = 0; b < B; ++b) {
        const float* p = xp + (static_cast<int64_t>(b) * C + c) * plane;
        for (int64_t i = 0; i < plane; ++i) {
          double dv = p[i] - mu;
          acc += dv * dv;
        }
      }
      float var = static_cast<float>(acc / reduce);
      (*invstd)[static_cast<size_t>(c)] = 1.0f / std::sqrt(var + eps);
      buffers.running_mean[c] = (1.0f - momentum) * buffers.running_mean[c] + momentum * mu;
      buffers.running_var[c] = (1.0f - momentum) * buffers.running_var[c] + momentum * var;
    }
  } else {
    for (int c = 0; c < C; ++c) {
      (*mean)[static_cast<size_t>(c)] = buffers.running_mean[c];
      (*invstd)[static_cast<size_t>(c)] = 1.0f / std::sqrt(buffers.running_var[c] + eps);
    }
  }

  Tensor out({B, C, H, W});
  const float* gp = gamma->value.data();
  const float* bp = beta->value.data();
  float* op = out.data();
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      const float* p = xp + (static_cast<int64_t>(b) * C + c) * plane;
      float* o = op + (static_cast<int64_t>(b) * C + c) * plane;
      float mu = (*mean)[static_cast<size_t>(c)];
      float is = (*invstd)[static_cast<size_t>(c)];
      for (int64_t i = 0; i < plane; ++i) o[i] = gp[c] * (p[i] - mu) * is + bp[c];
    }

  return make_op(std::move(out), {x, gamma, beta},
                 [x, gamma, beta, mean, invstd, B, C, plane, reduce, training](Node& nd) {
    const float* gs = nd.grad.data();
    const float* xp = x->value.data();
    const float* gp = gamma->value.data();
    for (int c = 0; c < C; ++c) {
      float mu = (*mean)[static_cast<size_t>(c)];
      float is = (*invstd)[static_cast<size_t>(c)];
      double sum_dy = 0.0, sum_dy_xhat = 0.0;
      for (int b = 0; b < B; ++b) {
        int64_t off = (static_cast<int64_t>(b) * C + c) * plane;
        for (int64_t i = 0; i < plane; ++i) {
          float xh = (xp[off + i] - mu) * is;
          sum_dy += gs[off + i];
          sum_dy_xhat += static_cast<double>(gs[off + i]) * xh;
        }
      }
      if (gamma->requires_grad) gamma->grad_ref()[c] += static_cast<float>(sum_dy_xhat);
      if (beta->requires_grad) beta->grad_ref()[c] += static_cast<float>(sum_dy);
      if (x->requires_grad) {
        Tensor& xg = x->grad_ref();
        float mean_dy = static_cast<float>(sum_dy / reduce);
        float mean_dy_xhat = static_cast<float>(sum_dy_xhat / reduce);
        for (int b = 0; b < B; ++b) {
          int64_t off = (static_cast<int64_t>(b) * C + c) * plane;
          for (int64_t i = 0; i < plane; ++i) {
            float xh = (xp[off + i] - mu) * is;
            if (training)
              xg[off + i] += gp[c] * is * (gs[off + i] - mean_dy - xh * mean_dy_xhat);
            else
              xg[off + i] += gp[c] * is * gs[off + i];
          }
        }
      }
    }
  });
}

}  // namespace uwf::ag
