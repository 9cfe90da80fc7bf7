// SPDX-License-Identifier: Apache-2.0
//
// Minimal tensor-level reverse-mode differentiation engine.
//
// A Value is a shared handle to a graph node holding a dense double Tensor,
// its gradient, and a backward closure. Graphs are rebuilt every iteration
// (tape style); backward() runs a topological sweep from a scalar root.
// Constants (e.g. teacher outputs) enter ops as plain Tensors, so no
// gradient can reach them by construction.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "pskd/core.hpp"

namespace pskd::ad {

struct Tensor {
  std::vector<int> shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> s, double fill = 0.0) : shape(std::move(s)) {
    data.assign(static_cast<size_t>(numel_of(shape)), fill);
  }
  static Tensor from(std::vector<int> s, std::vector<double> d) {
    Tensor t;
    t.shape = std::move(s);
    t.data = std::move(d);
    check(static_cast<int>(t.data.size()) == numel_of(t.shape), "Tensor: shape/data mismatch");
    return t;
  }
  static Tensor scalar(double v) { return from({1}, {v}); }

  static int numel_of(const std::vector<int>& s) {
    int n = 1;
    for (int d : s) {
      check(d >= 0, "Tensor: negative dimension");
      n *= d;
    }
    return n;
  }

  int numel() const { return static_cast<int>(data.size()); }
  int dim(int i) const { return shape[static_cast<size_t>(i)]; }

  // {R,C} indexing
  double& at2(int r, int c) { return data[static_cast<size_t>(r) * shape[1] + c]; }
  double at2(int r, int c) const { return data[static_cast<size_t>(r) * shape[1] + c]; }
  // {C,H,W} indexing
  double& at3(int c, int y, int x) {
    return data[(static_cast<size_t>(c) * shape[1] + y) * shape[2] + x];
  }
  double at3(int c, int y, int x) const {
    return data[(static_cast<size_t>(c) * shape[1] + y) * shape[2] + x];
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  bool all_finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }
};

class Node;
using Value = std::shared_ptr<Node>;

class Node {
 public:
  Tensor val;
  Tensor grad;  // allocated during backward()
  bool requires_grad = false;
  std::vector<Value> parents;
  std::function<void(Node&)> back;  // scatters this->grad into parents
  std::string tag;
};

inline Value leaf(Tensor v, bool requires_grad = true, std::string tag = "") {
  auto n = std::make_shared<Node>();
  n->val = std::move(v);
  n->requires_grad = requires_grad;
  n->tag = std::move(tag);
  return n;
}

inline Value constant(Tensor v) { return leaf(std::move(v), false); }

// Extension point: fused ops outside this header (e.g. RoI pooling) are
// built with make_op.
inline Value make_op(std::vector<Value> parents, Tensor value,
                     std::function<void(Node&)> back, std::string tag = "") {
  auto n = std::make_shared<Node>();
  n->val = std::move(value);
  n->parents = std::move(parents);
  n->tag = std::move(tag);
  for (const auto& p : n->parents)
    if (p->requires_grad) n->requires_grad = true;
  if (n->requires_grad) n->back = std::move(back);
  return n;
}

inline double scalar(const Value& v) {
  check(v->val.numel() == 1, "scalar(): value is not a scalar");
  return v->val.data[0];
}

namespace detail {
inline void ensure_grad(Node& n) {
  if (n.grad.data.size() != n.val.data.size()) {
    n.grad.shape = n.val.shape;
    n.grad.data.assign(n.val.data.size(), 0.0);
  }
}
}  // namespace detail

// Reverse sweep from a scalar root. Gradients of all reachable
// requires_grad nodes are accumulated into node->grad.
inline void backward(const Value& root) {
  check(root->val.numel() == 1, "backward(): root must be a scalar");
  if (!root->requires_grad) return;

  // Iterative post-order topological sort.
  std::vector<Node*> topo;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.push_back({root.get(), 0});
  while (!stack.empty()) {
    auto& [n, idx] = stack.back();
    if (idx == 0 && seen.count(n)) {
      stack.pop_back();
      continue;
    }
    if (idx < n->parents.size()) {
      Node* p = n->parents[idx].get();
      ++idx;
      if (!seen.count(p) && p->requires_grad) stack.push_back({p, 0});
    } else {
      seen.insert(n);
      topo.push_back(n);
      stack.pop_back();
    }
  }

  for (Node* n : topo) {
    detail::ensure_grad(*n);
    std::fill(n->grad.data.begin(), n->grad.data.end(), 0.0);
  }
  root->grad.data[0] = 1.0;

  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    Node* n = *it;
    if (n->back) {
      for (const auto& p : n->parents)
        if (p->requires_grad) detail::ensure_grad(*p);
      n->back(*n);
    }
  }
}

// ---------------------------------------------------------------------------
// Elementwise and reduction ops
// ---------------------------------------------------------------------------

inline Value add(const Value& a, const Value& b) {
  check(a->val.same_shape(b->val), "add: shape mismatch");
  Tensor out = a->val;
  for (int i = 0; i < out.numel(); ++i) out.data[i] += b->val.data[i];
  return make_op({a, b}, std::move(out), [](Node& n) {
    Node* a = n.parents[0].get();
    Node* b = n.parents[1].get();
    for (int i = 0; i < n.val.numel(); ++i) {
      if (a->requires_grad) a->grad.data[i] += n.grad.data[i];
      if (b->requires_grad) b->grad.data[i] += n.grad.data[i];
    }
  });
}

inline Value sub(const Value& a, const Value& b) {
  check(a->val.same_shape(b->val), "sub: shape mismatch");
  Tensor out = a->val;
  for (int i = 0; i < out.numel(); ++i) out.data[i] -= b->val.data[i];
  return make_op({a, b}, std::move(out), [](Node& n) {
    Node* a = n.parents[0].get();
    Node* b = n.parents[1].get();
    for (int i = 0; i < n.val.numel(); ++i) {
      if (a->requires_grad) a->grad.data[i] += n.grad.data[i];
      if (b->requires_grad) b->grad.data[i] -= n.grad.data[i];
    }
  });
}

inline Value mul(const Value& a, const Value& b) {
  check(a->val.same_shape(b->val), "mul: shape mismatch");
  Tensor out = a->val;
  for (int i = 0; i < out.numel(); ++i) out.data[i] *= b->val.data[i];
  return make_op({a, b}, std::move(out), [](Node& n) {
    Node* a = n.parents[0].get();
    Node* b = n.parents[1].get();
    for (int i = 0; i < n.val.numel(); ++i) {
      if (a->requires_grad) a->grad.data[i] += n.grad.data[i] * b->val.data[i];
      if (b->requires_grad) b->grad.data[i] += n.grad.data[i] * a->val.data[i];
    }
  });
}

inline Value scale(const Value& a, double k) {
  Tensor out = a->val;
  for (double& v : out.data) v *= k;
  return make_op({a}, std::move(out), [k](Node& n) {
    Node* a = n.parents[0].get();
    for (int i = 0; i < n.val.numel(); ++i) a->grad.data[i] += k * n.grad.data[i];
  });
}

inline Value add_scalar(const Value& a, double c) {
  Tensor out = a->val;
  for (double& v : out.data) v += c;
  return make_op({a}, std::move(out), [](Node& n) {
    Node* a = n.parents[0].get();
    for (int i = 0; i < n.val.numel(); ++i) a->grad.data[i] += n.grad.data[i];
  });
}

inline Value add_const(const Value& a, const Tensor& t) {
  check(a->val.same_shape(t), "add_const: shape mismatch");
  Tensor out = a->val;
  for (int i = 0; i < out.numel(); ++i) out.data[i] += t.data[i];
  return make_op({a}, std::move(out), [](Node& n) {
    Node* a = n.parents[0].get();
    for (int i = 0; i < n.val.numel(); ++i) a->grad.data[i] += n.grad.data[i];
  });
}

inline Value sub_const(const Value& a, const Tensor& t) {
  check(a->val.same_shape(t), "sub_const: shape mismatch");
  Tensor out = a->val;
  for (int i = 0; i < out.numel(); ++i) out.data[i] -= t.data[i];
  return make_op({a}, std::move(out), [](Node& n) {
    Node* a = n.parents[0].get();
    for (int i = 0; i < n.val.numel(); ++i) a->grad.data[i] += n.grad.data[i];
  });
}

inline Value relu(const Value& a) {
  Tensor out = a->val;
  for (double& v : out.data) v = v > 0 ? v : 0.0;
  return make_op({a}, std::move(out), [](Node& n) {
    Node* a = n.parents[0].get();
    for (int i = 0; i < n.val.numel(); ++i)
      if (a->val.data[i] > 0) a->grad.data[i] += n.grad.data[i];
  });
}

inline Value log_op(const Value& a) {
  Tensor out = a->val;
  for (double& v : out.data) {
    check(v > 0, "log: non-positive input");
    v = std::log(v);
  }
  return make_op({a}, std::move(out), [](Node& n) {
    Node* a = n.parents[0].get();
    for (int i = 0; i < n.val.numel(); ++i)
      a->grad.data[i] += n.grad.data[i] / a->val.data[i];
  });
}

inline Value exp_op(const Value& a) {
  Tensor out = a->val;
  for (double& v : out.data) v = std::exp(v);
  return make_op({a}, std::move(out), [](Node& n) {
    Node* a = n.parents[0].get();
    for (int i = 0; i < n.val.numel(); ++i)
      a->grad.data[i] += n.grad.data[i] * n.val.data[i];
  });
}

inline Value sum(const Value& a) {
  double s = 0;
  for (double v : a->val.data) s += v;
  return make_op({a}, Tensor::scalar(s), [](Node& n) {
    Node* a = n.parents[0].get();
    const double g = n.grad.data[0];
    for (double& gv : a->grad.data) gv += g;
  });
}

inline Value mean(const Value& a) {
  check(a->val.numel() > 0, "mean: empty tensor");
  double s = 0;
  for (double v : a->val.data) s += v;
  const double inv = 1.0 / a->val.numel();
  return make_op({a}, Tensor::scalar(s * inv), [inv](Node& n) {
    Node* a = n.parents[0].get();
    const double g = n.grad.data[0] * inv;
    for (double& gv : a->grad.data) gv += g;
  });
}

// Sum of squared differences against a constant target.
inline Value sq_diff_sum(const Value& a, const Tensor& target) {
  check(a->val.same_shape(target), "sq_diff_sum: shape mismatch");
  double s = 0;
  for (int i = 0; i < a->val.numel(); ++i) {
    const double d = a->val.data[i] - target.data[i];
    s += d * d;
  }
  return make_op({a}, Tensor::scalar(s), [target](Node& n) {
    Node* a = n.parents[0].get();
    const double g = n.grad.data[0];
    for (int i = 0; i < a->val.numel(); ++i)
      a->grad.data[i] += g * 2.0 * (a->val.data[i] - target.data[i]);
  });
}

// ---------------------------------------------------------------------------
// Matrix ops (shapes {R,C})
// ---------------------------------------------------------------------------

inline Value matmul(const Value& a, const Value& b) {
  check(a->val.shape.size() == 2 && b->val.shape.size() == 2 &&
            a->val.dim(1) == b->val.dim(0),
        "matmul: incompatible shapes");
  const int m = a->val.dim(0), k = a->val.dim(1), n2 = b->val.dim(1);
  Tensor out({m, n2});
  for (int i = 0; i < m; ++i)
    for (int kk = 0; kk < k; ++kk) {
      const double av = a->val.at2(i, kk);
      for (int j = 0; j < n2; ++j) out.at2(i, j) += av * b->val.at2(kk, j);
    }
  return make_op({a, b}, std::move(out), [m, k, n2](Node& n) {
    Node* a = n.parents[0].get();
    Node* b = n.parents[1].get();
    if (a->requires_grad)
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n2; ++j) {
          const double g = n.grad.at2(i, j);
          for (int kk = 0; kk < k; ++kk) a->grad.at2(i, kk) += g * b->val.at2(kk, j);
        }
    if (b->requires_grad)
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n2; ++j) {
          const double g = n.grad.at2(i, j);
          for (int kk = 0; kk < k; ++kk) b->grad.at2(kk, j) += g * a->val.at2(i, kk);
        }
  });
}

// a[m,k] * b[n,k]^T -> [m,n]
inline Value matmul_nt(const Value& a, const Value& b) {
  check(a->val.shape.size() == 2 && b->val.shape.size() == 2 &&
            a->val.dim(1) == b->val.dim(1),
        "matmul_nt: incompatible shapes");
  const int m = a->val.dim(0), k = a->val.dim(1), n2 = b->val.dim(0);
  Tensor out({m, n2});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n2; ++j) {
      double s = 0;
      for (int kk = 0; kk < k; ++kk) s += a->val.at2(i, kk) * b->val.at2(j, kk);
      out.at2(i, j) = s;
    }
  return make_op({a, b}, std::move(out), [m, k, n2](Node& n) {
    Node* a = n.parents[0].get();
    Node* b = n.parents[1].get();
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n2; ++j) {
        const double g = n.grad.at2(i, j);
        if (g == 0) continue;
        if (a->requires_grad)
          for (int kk = 0; kk < k; ++kk) a->grad.at2(i, kk) += g * b->val.at2(j, kk);
        if (b->requires_grad)
          for (int kk = 0; kk < k; ++kk) b->grad.at2(j, kk) += g * a->val.at2(i, kk);
      }
  });
}

// a[m,k] * W[n,k]^T + bias[n] -> [m,n]; W stored row-major (out x in).
inline Value linear_rows(const Value& a, const Value& w, const Value& bias) {
  check(bias->val.shape.size() == 1 && bias->val.dim(0) == w->val.dim(0),
        "linear_rows: bias shape mismatch");
  Value y = matmul_nt(a, w);
  const int m = y->val.dim(0), n2 = y->val.dim(1);
  Tensor out = y->val;
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n2; ++j) out.at2(i, j) += bias->val.data[j];
  return make_op({y, bias}, std::move(out), [m, n2](Node& n) {
    Node* y = n.parents[0].get();
    Node* b = n.parents[1].get();
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n2; ++j) {
        const double g = n.grad.at2(i, j);
        if (y->requires_grad) y->grad.at2(i, j) += g;
        if (b->requires_grad) b->grad.data[j] += g;
      }
  });
}

inline Value row_l2_normalize(const Value& a, double eps = 1e-12) {
  check(a->val.shape.size() == 2, "row_l2_normalize: need a matrix");
  const int m = a->val.dim(0), c = a->val.dim(1);
  Tensor out = a->val;
  std::vector<double> norms(m, 0.0);
  for (int i = 0; i < m; ++i) {
    double sq = 0;
    for (int j = 0; j < c; ++j) sq += a->val.at2(i, j) * a->val.at2(i, j);
    norms[i] = std::sqrt(sq);
    if (norms[i] < eps) {
      for (int j = 0; j < c; ++j) out.at2(i, j) = 0.0;
    } else {
      for (int j = 0; j < c; ++j) out.at2(i, j) /= norms[i];
    }
  }
  return make_op({a}, std::move(out), [m, c, norms, eps](Node& n) {
    Node* a = n.parents[0].get();
    for (int i = 0; i < m; ++i) {
      if (norms[i] < eps) continue;  // zero row: no gradient
      double dot = 0;
      for (int j = 0; j < c; ++j) dot += n.grad.at2(i, j) * n.val.at2(i, j);
      for (int j = 0; j < c; ++j)
        a->grad.at2(i, j) += (n.grad.at2(i, j) - n.val.at2(i, j) * dot) / norms[i];
    }
  });
}

inline Value softmax_rows(const Value& z) {
  check(z->val.shape.size() == 2, "softmax_rows: need a matrix");
  const int m = z->val.dim(0), c = z->val.dim(1);
  Tensor out({m, c});
  for (int i = 0; i < m; ++i) {
    double mx = z->val.at2(i, 0);
    for (int j = 1; j < c; ++j) mx = std::max(mx, z->val.at2(i, j));
    double den = 0;
    for (int j = 0; j < c; ++j) den += std::exp(z->val.at2(i, j) - mx);
    for (int j = 0; j < c; ++j) out.at2(i, j) = std::exp(z->val.at2(i, j) - mx) / den;
  }
  return make_op({z}, std::move(out), [m, c](Node& n) {
    Node* z = n.parents[0].get();
    for (int i = 0; i < m; ++i) {
      double dot = 0;
      for (int j = 0; j < c; ++j) dot += n.grad.at2(i, j) * n.val.at2(i, j);
      for (int j = 0; j < c; ++j)
        z->grad.at2(i, j) += n.val.at2(i, j) * (n.grad.at2(i, j) - dot);
    }
  });
}

inline Value log_softmax_rows(const Value& z) {
  check(z->val.shape.size() == 2, "log_softmax_rows: need a matrix");
  const int m = z->val.dim(0), c = z->val.dim(1);
  Tensor out({m, c});
  for (int i = 0; i < m; ++i) {
    double mx = z->val.at2(i, 0);
    for (int j = 1; j < c; ++j) mx = std::max(mx, z->val.at2(i, j));
    double den = 0;
    for (int j = 0; j < c; ++j) den += std::exp(z->val.at2(i, j) - mx);
    const double lse = mx + std::log(den);
    for (int j = 0; j < c; ++j) out.at2(i, j) = z->val.at2(i, j) - lse;
  }
  return make_op({z}, std::move(out), [m, c](Node& n) {
    Node* z = n.parents[0].get();
    for (int i = 0; i < m; ++i) {
      double gsum = 0;
      for (int j = 0; j < c; ++j) gsum += n.grad.at2(i, j);
      for (int j = 0; j < c; ++j)
        z->grad.at2(i, j) += n.grad.at2(i, j) - std::exp(n.val.at2(i, j)) * gsum;
    }
  });
}

// One entry per row: out[i] = a[i, idx[i]].
inline Value pick_rows(const Value& a, const std::vector<int>& idx) {
  check(a->val.shape.size() == 2, "pick_rows: need a matrix");
  const int m = a->val.dim(0), c = a->val.dim(1);
  check(static_cast<int>(idx.size()) == m, "pick_rows: index count mismatch");
  Tensor out({m});
  for (int i = 0; i < m; ++i) {
    check(idx[i] >= 0 && idx[i] < c, "pick_rows: index out of range");
    out.data[i] = a->val.at2(i, idx[i]);
  }
  return make_op({a}, std::move(out), [idx](Node& n) {
    Node* a = n.parents[0].get();
    for (size_t i = 0; i < idx.size(); ++i)
      a->grad.at2(static_cast<int>(i), idx[i]) += n.grad.data[i];
  });
}

// Euclidean distances D[i,j] = |F_i - G_j| against a constant batch G.
inline Value pairwise_dist_to_const(const Value& f, const Tensor& g) {
  check(f->val.shape.size() == 2 && g.shape.size() == 2 && f->val.dim(1) == g.dim(1),
        "pairwise_dist_to_const: dimension mismatch");
  const int bf = f->val.dim(0), d = f->val.dim(1), bg = g.dim(0);
  Tensor out({bf, bg});
  for (int i = 0; i < bf; ++i)
    for (int j = 0; j < bg; ++j) {
      double s = 0;
      for (int k = 0; k < d; ++k) {
        const double diff = f->val.at2(i, k) - g.at2(j, k);
        s += diff * diff;
      }
      out.at2(i, j) = std::sqrt(s);
    }
  return make_op({f}, std::move(out), [g, bf, bg, d](Node& n) {
    Node* f = n.parents[0].get();
    for (int i = 0; i < bf; ++i)
      for (int j = 0; j < bg; ++j) {
        const double gr = n.grad.at2(i, j);
        const double dist = n.val.at2(i, j);
        if (gr == 0 || dist < 1e-12) continue;  // subgradient 0 at coincident points
        for (int k = 0; k < d; ++k)
          f->grad.at2(i, k) += gr * (f->val.at2(i, k) - g.at2(j, k)) / dist;
      }
  });
}

// Row-wise minimum of off-diagonal entries; ties resolved to the lowest
// column index.
inline Value hard_min_offdiag(const Value& d) {
  check(d->val.shape.size() == 2 && d->val.dim(0) == d->val.dim(1) && d->val.dim(0) >= 2,
        "hard_min_offdiag: need a square matrix with B >= 2");
  const int b = d->val.dim(0);
  Tensor out({b});
  std::vector<int> arg(b, -1);
  for (int i = 0; i < b; ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (int j = 0; j < b; ++j) {
      if (j == i) continue;
      if (d->val.at2(i, j) < best) {
        best = d->val.at2(i, j);
        arg[i] = j;
      }
    }
    out.data[i] = best;
  }
  return make_op({d}, std::move(out), [arg](Node& n) {
    Node* d = n.parents[0].get();
    for (size_t i = 0; i < arg.size(); ++i)
      d->grad.at2(static_cast<int>(i), arg[i]) += n.grad.data[i];
  });
}

inline Value diag_vec(const Value& d) {
  check(d->val.shape.size() == 2 && d->val.dim(0) == d->val.dim(1),
        "diag_vec: need a square matrix");
  const int b = d->val.dim(0);
  Tensor out({b});
  for (int i = 0; i < b; ++i) out.data[i] = d->val.at2(i, i);
  return make_op({d}, std::move(out), [b](Node& n) {
    Node* d = n.parents[0].get();
    for (int i = 0; i < b; ++i) d->grad.at2(i, i) += n.grad.data[i];
  });
}

// Per-row standardization with learned scale/offset:
// y = gamma * (x - mean) / sqrt(var + eps) + beta.
inline Value layer_standardize_rows(const Value& x, const Value& gamma, const Value& beta,
                                    double eps = 1e-5) {
  check(x->val.shape.size() == 2, "layer_standardize_rows: need a matrix");
  const int m = x->val.dim(0), c = x->val.dim(1);
  check(gamma->val.numel() == c && beta->val.numel() == c,
        "layer_standardize_rows: scale/offset dimension mismatch");
  Tensor out({m, c});
  std::vector<double> mu(m), istd(m);
  for (int i = 0; i < m; ++i) {
    double s = 0;
    for (int j = 0; j < c; ++j) s += x->val.at2(i, j);
    mu[i] = s / c;
    double v = 0;
    for (int j = 0; j < c; ++j) {
      const double dv = x->val.at2(i, j) - mu[i];
      v += dv * dv;
    }
    istd[i] = 1.0 / std::sqrt(v / c + eps);
    for (int j = 0; j < c; ++j)
      out.at2(i, j) = gamma->val.data[j] * (x->val.at2(i, j) - mu[i]) * istd[i] +
                      beta->val.data[j];
  }
  return make_op({x, gamma, beta}, std::move(out), [m, c, mu, istd](Node& n) {
    Node* x = n.parents[0].get();
    Node* gm = n.parents[1].get();
    Node* bt = n.parents[2].get();
    for (int i = 0; i < m; ++i) {
      double sum_dxhat = 0, sum_dxhat_xhat = 0;
      std::vector<double> xhat(c), dxhat(c);
      for (int j = 0; j < c; ++j) {
        xhat[j] = (x->val.at2(i, j) - mu[i]) * istd[i];
        dxhat[j] = n.grad.at2(i, j) * gm->val.data[j];
        sum_dxhat += dxhat[j];
        sum_dxhat_xhat += dxhat[j] * xhat[j];
        if (gm->requires_grad) gm->grad.data[j] += n.grad.at2(i, j) * xhat[j];
        if (bt->requires_grad) bt->grad.data[j] += n.grad.at2(i, j);
      }
      if (x->requires_grad)
        for (int j = 0; j < c; ++j)
          x->grad.at2(i, j) +=
              istd[i] * (dxhat[j] - (sum_dxhat + xhat[j] * sum_dxhat_xhat) / c);
    }
  });
}

inline Value stack_rows(const std::vector<Value>& rows) {
  check(!rows.empty(), "stack_rows: empty");
  const int c = rows.front()->val.numel();
  const int m = static_cast<int>(rows.size());
  Tensor out({m, c});
  for (int i = 0; i < m; ++i) {
    check(rows[i]->val.numel() == c, "stack_rows: row size mismatch");
    std::copy(rows[i]->val.data.begin(), rows[i]->val.data.end(),
              out.data.begin() + static_cast<size_t>(i) * c);
  }
  std::vector<Value> parents(rows.begin(), rows.end());
  return make_op(std::move(parents), std::move(out), [m, c](Node& n) {
    for (int i = 0; i < m; ++i) {
      Node* r = n.parents[i].get();
      if (!r->requires_grad) continue;
      for (int j = 0; j < c; ++j) r->grad.data[j] += n.grad.data[static_cast<size_t>(i) * c + j];
    }
  });
}

inline Value reshape(const Value& a, std::vector<int> shape) {
  check(Tensor::numel_of(shape) == a->val.numel(), "reshape: element count mismatch");
  Tensor out;
  out.shape = std::move(shape);
  out.data = a->val.data;
  return make_op({a}, std::move(out), [](Node& n) {
    Node* a = n.parents[0].get();
    for (int i = 0; i < n.val.numel(); ++i) a->grad.data[i] += n.grad.data[i];
  });
}

// Concatenate 1-D values into one vector.
inline Value concat_vec(const std::vector<Value>& parts) {
  check(!parts.empty(), "concat_vec: empty");
  int total = 0;
  for (const auto& p : parts) total += p->val.numel();
  Tensor out({total});
  int off = 0;
  std::vector<int> offsets;
  for (const auto& p : parts) {
    offsets.push_back(off);
    std::copy(p->val.data.begin(), p->val.data.end(), out.data.begin() + off);
    off += p->val.numel();
  }
  std::vector<Value> parents(parts.begin(), parts.end());
  return make_op(std::move(parents), std::move(out), [offsets](Node& n) {
    for (size_t i = 0; i < offsets.size(); ++i) {
      Node* p = n.parents[i].get();
      if (!p->requires_grad) continue;
      for (int j = 0; j < p->val.numel(); ++j)
        p->grad.data[j] += n.grad.data[offsets[i] + j];
    }
  });
}

// ---------------------------------------------------------------------------
// Convolution and pooling (shapes {C,H,W}; weights {OC,IC,KH,KW})
// ---------------------------------------------------------------------------

inline Value conv2d(const Value& x, const Value& w, const Value& bias, int stride, int pad) {
  check(x->val.shape.size() == 3 && w->val.shape.size() == 4, "conv2d: bad ranks");
  const int ic = x->val.dim(0), ih = x->val.dim(1), iw = x->val.dim(2);
  const int oc = w->val.dim(0), kh = w->val.dim(2), kw = w->val.dim(3);
  check(w->val.dim(1) == ic, "conv2d: channel mismatch");
  check(bias->val.numel() == oc, "conv2d: bias mismatch");
  check(stride >= 1 && pad >= 0, "conv2d: bad stride/pad");
  const int oh = (ih + 2 * pad - kh) / stride + 1;
  const int ow = (iw + 2 * pad - kw) / stride + 1;
  check(oh > 0 && ow > 0, "conv2d: empty output");

  Tensor out({oc, oh, ow});
  for (int o = 0; o < oc; ++o) {
    const double b = bias->val.data[o];
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox) out.at3(o, oy, ox) = b;
    for (int i = 0; i < ic; ++i)
      for (int ky = 0; ky < kh; ++ky)
        for (int kx = 0; kx < kw; ++kx) {
          const double wv = w->val.data[((static_cast<size_t>(o) * ic + i) * kh + ky) * kw + kx];
          if (wv == 0) continue;
          for (int oy = 0; oy < oh; ++oy) {
            const int iy = oy * stride - pad + ky;
            if (iy < 0 || iy >= ih) continue;
            // valid ox range so that ix = ox*stride - pad + kx ∈ [0, iw)
            int ox0 = 0;
            while (ox0 * stride - pad + kx < 0) ++ox0;
            int ox1 = ow - 1;
            while (ox1 >= 0 && ox1 * stride - pad + kx >= iw) --ox1;
            const double* xrow = &x->val.data[(static_cast<size_t>(i) * ih + iy) * iw];
            double* orow = &out.data[(static_cast<size_t>(o) * oh + oy) * ow];
            for (int ox = ox0; ox <= ox1; ++ox)
              orow[ox] += wv * xrow[ox * stride - pad + kx];
          }
        }
  }

  return make_op({x, w, bias}, std::move(out),
                 [ic, ih, iw, oc, kh, kw, oh, ow, stride, pad](Node& n) {
    Node* x = n.parents[0].get();
    Node* w = n.parents[1].get();
    Node* bias = n.parents[2].get();
    if (bias->requires_grad)
      for (int o = 0; o < oc; ++o) {
        double s = 0;
        for (int oy = 0; oy < oh; ++oy)
          for (int ox = 0; ox < ow; ++ox) s += n.grad.at3(o, oy, ox);
        bias->grad.data[o] += s;
      }
    for (int o = 0; o < oc; ++o)
      for (int i = 0; i < ic; ++i)
        for (int ky = 0; ky < kh; ++ky)
          for (int kx = 0; kx < kw; ++kx) {
            const size_t widx = ((static_cast<size_t>(o) * ic + i) * kh + ky) * kw + kx;
            const double wv = w->val.data[widx];
            double wg = 0;
            for (int oy = 0; oy < oh; ++oy) {
              const int iy = oy * stride - pad + ky;
              if (iy < 0 || iy >= ih) continue;
              int ox0 = 0;
              while (ox0 * stride - pad + kx < 0) ++ox0;
              int ox1 = ow - 1;
              while (ox1 >= 0 && ox1 * stride - pad + kx >= iw) --ox1;
              const double* xrow = &x->val.data[(static_cast<size_t>(i) * ih + iy) * iw];
              double* xgrow = x->requires_grad
                                  ? &x->grad.data[(static_cast<size_t>(i) * ih + iy) * iw]
                                  : nullptr;
              const double* grow = &n.grad.data[(static_cast<size_t>(o) * oh + oy) * ow];
              for (int ox = ox0; ox <= ox1; ++ox) {
                const double g = grow[ox];
                wg += g * xrow[ox * stride - pad + kx];
                if (xgrow) xgrow[ox * stride - pad + kx] += g * wv;
              }
            }
            if (w->requires_grad) w->grad.data[widx] += wg;
          }
  });
}

// Adaptive average pooling to an (out_h, out_w) grid of contiguous bands.
inline Value avg_pool_grid(const Value& x, int out_h, int out_w) {
  check(x->val.shape.size() == 3, "avg_pool_grid: need {C,H,W}");
  const int c = x->val.dim(0), h = x->val.dim(1), w = x->val.dim(2);
  check(out_h >= 1 && out_w >= 1 && out_h <= h && out_w <= w, "avg_pool_grid: bad grid");
  auto band = [](int k, int n, int total) {
    return std::pair<int, int>{k * total / n, (k + 1) * total / n};
  };
  Tensor out({c, out_h, out_w});
  for (int ch = 0; ch < c; ++ch)
    for (int oy = 0; oy < out_h; ++oy) {
      auto [y0, y1] = band(oy, out_h, h);
      for (int ox = 0; ox < out_w; ++ox) {
        auto [x0, x1] = band(ox, out_w, w);
        double s = 0;
        for (int y = y0; y < y1; ++y)
          for (int xx = x0; xx < x1; ++xx) s += x->val.at3(ch, y, xx);
        out.at3(ch, oy, ox) = s / ((y1 - y0) * (x1 - x0));
      }
    }
  return make_op({x}, std::move(out), [c, h, w, out_h, out_w, band](Node& n) {
    Node* x = n.parents[0].get();
    for (int ch = 0; ch < c; ++ch)
      for (int oy = 0; oy < out_h; ++oy) {
        auto [y0, y1] = band(oy, out_h, h);
        for (int ox = 0; ox < out_w; ++ox) {
          auto [x0, x1] = band(ox, out_w, w);
          const double g = n.grad.at3(ch, oy, ox) / ((y1 - y0) * (x1 - x0));
          for (int y = y0; y < y1; ++y)
            for (int xx = x0; xx < x1; ++xx) x->grad.at3(ch, y, xx) += g;
        }
      }
  });
}

// ---------------------------------------------------------------------------
// Task-loss kernels
// ---------------------------------------------------------------------------

// Weighted binary cross-entropy on logits: sum_i w_i * (softplus(z_i) - t_i*z_i).
inline Value bce_with_logits_sum(const Value& z, const Tensor& targets, const Tensor& weights) {
  check(z->val.same_shape(targets) && z->val.same_shape(weights),
        "bce_with_logits_sum: shape mismatch");
  double s = 0;
  for (int i = 0; i < z->val.numel(); ++i) {
    const double zi = z->val.data[i];
    const double sp = std::max(zi, 0.0) + std::log1p(std::exp(-std::abs(zi)));
    s += weights.data[i] * (sp - targets.data[i] * zi);
  }
  return make_op({z}, Tensor::scalar(s), [targets, weights](Node& n) {
    Node* z = n.parents[0].get();
    const double g = n.grad.data[0];
    for (int i = 0; i < z->val.numel(); ++i) {
      const double sig = 1.0 / (1.0 + std::exp(-z->val.data[i]));
      z->grad.data[i] += g * weights.data[i] * (sig - targets.data[i]);
    }
  });
}

// Weighted Huber: sum_i w_i * (0.5 e^2 if |e|<1 else |e|-0.5), e = p - t.
inline Value smooth_l1_sum(const Value& p, const Tensor& target, const Tensor& weights) {
  check(p->val.same_shape(target) && p->val.same_shape(weights),
        "smooth_l1_sum: shape mismatch");
  double s = 0;
  for (int i = 0; i < p->val.numel(); ++i) {
    const double e = p->val.data[i] - target.data[i];
    s += weights.data[i] * (std::abs(e) < 1.0 ? 0.5 * e * e : std::abs(e) - 0.5);
  }
  return make_op({p}, Tensor::scalar(s), [target, weights](Node& n) {
    Node* p = n.parents[0].get();
    const double g = n.grad.data[0];
    for (int i = 0; i < p->val.numel(); ++i) {
      const double e = p->val.data[i] - target.data[i];
      const double de = std::abs(e) < 1.0 ? e : (e > 0 ? 1.0 : -1.0);
      p->grad.data[i] += g * weights.data[i] * de;
    }
  });
}

}  // namespace pskd::ad
