#pragma once

// Reverse-mode automatic differentiation over Tensor<T> values.
//
// Every operation builds a Node holding the result, links to its parents and
// a closure that pushes gradients backwards. backward(loss) walks the graph
// in reverse topological order. Nodes whose inputs all have requires_grad ==
// false never allocate gradients and never run their closures, so frozen
// branches (momentum encoders, queue snapshots) cost only the forward pass.

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "ramdg/tensor.hpp"

namespace ramdg {

template <class T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  Tensor<T>& grad_buf() {
    if (grad.size() != value.size()) grad = Tensor<T>(value.rows(), value.cols(), T(0));
    return grad;
  }
};

/// Shared handle to a graph node.
template <class T>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<T>> n) : n_(std::move(n)) {}

  static Var constant(Tensor<T> value) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    n->requires_grad = false;
    return Var(n);
  }

  static Var param(Tensor<T> value) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    n->requires_grad = true;
    return Var(n);
  }

  bool defined() const { return n_ != nullptr; }
  Node<T>* node() const { return n_.get(); }
  const std::shared_ptr<Node<T>>& ptr() const { return n_; }

  const Tensor<T>& value() const { return n_->value; }
  Tensor<T>& value_mut() { return n_->value; }
  const Tensor<T>& grad() const { return n_->grad; }
  Tensor<T>& grad_buf() { return n_->grad_buf(); }
  bool requires_grad() const { return n_->requires_grad; }
  void set_requires_grad(bool b) { n_->requires_grad = b; }

  size_t rows() const { return n_->value.rows(); }
  size_t cols() const { return n_->value.cols(); }

  void zero_grad() {
    if (n_->grad.size()) n_->grad.fill(T(0));
  }

 private:
  std::shared_ptr<Node<T>> n_;
};

namespace detail {

template <class T>
Var<T> make_op(Tensor<T> value, std::vector<std::shared_ptr<Node<T>>> parents,
               std::function<void(Node<T>&)> backward_fn) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  for (auto& p : parents)
    if (p->requires_grad) n->requires_grad = true;
  if (n->requires_grad) {
    n->parents = std::move(parents);
    n->backward_fn = std::move(backward_fn);
  }
  return Var<T>(n);
}

template <class T>
void require_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
  if (!a.value().same_shape(b.value())) throw ConfigError(std::string(op) + ": shape mismatch");
}

}  // namespace detail

/// Runs reverse-mode accumulation from a scalar (1x1) loss node.
template <class T>
void backward(const Var<T>& loss) {
  if (loss.rows() != 1 || loss.cols() != 1) throw ConfigError("backward: loss must be 1x1");
  if (!loss.requires_grad()) return;

  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, size_t>> stack;
  stack.push_back({loss.node(), 0});
  seen.insert(loss.node());
  while (!stack.empty()) {
    auto& [n, i] = stack.back();
    if (i < n->parents.size()) {
      Node<T>* p = n->parents[i++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  loss.node()->grad_buf()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward_fn && n->grad.size()) n->backward_fn(*n);
  }
}

// ---- arithmetic ----

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a, b, "add");
  Tensor<T> out = a.value();
  for (size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return detail::make_op<T>(std::move(out), {a.ptr(), b.ptr()}, [](Node<T>& self) {
    for (int k = 0; k < 2; ++k) {
      auto& p = self.parents[k];
      if (!p->requires_grad) continue;
      Tensor<T>& g = p->grad_buf();
      for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a, b, "sub");
  Tensor<T> out = a.value();
  for (size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return detail::make_op<T>(std::move(out), {a.ptr(), b.ptr()}, [](Node<T>& self) {
    if (self.parents[0]->requires_grad) {
      Tensor<T>& g = self.parents[0]->grad_buf();
      for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (self.parents[1]->requires_grad) {
      Tensor<T>& g = self.parents[1]->grad_buf();
      for (size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

template <class T>
Var<T> hadamard(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a, b, "hadamard");
  Tensor<T> out = a.value();
  for (size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return detail::make_op<T>(std::move(out), {a.ptr(), b.ptr()}, [](Node<T>& self) {
    const Tensor<T>& av = self.parents[0]->value;
    const Tensor<T>& bv = self.parents[1]->value;
    if (self.parents[0]->requires_grad) {
      Tensor<T>& g = self.parents[0]->grad_buf();
      for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bv[i];
    }
    if (self.parents[1]->requires_grad) {
      Tensor<T>& g = self.parents[1]->grad_buf();
      for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * av[i];
    }
  });
}

template <class T>
Var<T> div(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a, b, "div");
  Tensor<T> out = a.value();
  for (size_t i = 0; i < out.size(); ++i) out[i] /= b.value()[i];
  return detail::make_op<T>(std::move(out), {a.ptr(), b.ptr()}, [](Node<T>& self) {
    const Tensor<T>& av = self.parents[0]->value;
    const Tensor<T>& bv = self.parents[1]->value;
    if (self.parents[0]->requires_grad) {
      Tensor<T>& g = self.parents[0]->grad_buf();
      for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] / bv[i];
    }
    if (self.parents[1]->requires_grad) {
      Tensor<T>& g = self.parents[1]->grad_buf();
      for (size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i] * av[i] / (bv[i] * bv[i]);
    }
  });
}

template <class T>
Var<T> scale(const Var<T>& a, double c) {
  Tensor<T> out = a.value();
  for (size_t i = 0; i < out.size(); ++i) out[i] *= T(c);
  return detail::make_op<T>(std::move(out), {a.ptr()}, [c](Node<T>& self) {
    Tensor<T>& g = self.parents[0]->grad_buf();
    for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * T(c);
  });
}

template <class T>
Var<T> add_scalar(const Var<T>& a, double c) {
  Tensor<T> out = a.value();
  for (size_t i = 0; i < out.size(); ++i) out[i] += T(c);
  return detail::make_op<T>(std::move(out), {a.ptr()}, [](Node<T>& self) {
    Tensor<T>& g = self.parents[0]->grad_buf();
    for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

template <class T>
Var<T> neg(const Var<T>& a) {
  return scale(a, -1.0);
}

/// Adds a 1 x n row vector to every row of an m x n matrix.
template <class T>
Var<T> add_rowvec(const Var<T>& a, const Var<T>& r) {
  if (r.rows() != 1 || r.cols() != a.cols()) throw ConfigError("add_rowvec: bad row vector shape");
  Tensor<T> out = a.value();
  for (size_t i = 0; i < out.rows(); ++i)
    for (size_t j = 0; j < out.cols(); ++j) out.at(i, j) += r.value()[j];
  return detail::make_op<T>(std::move(out), {a.ptr(), r.ptr()}, [](Node<T>& self) {
    if (self.parents[0]->requires_grad) {
      Tensor<T>& g = self.parents[0]->grad_buf();
      for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (self.parents[1]->requires_grad) {
      Tensor<T>& g = self.parents[1]->grad_buf();
      for (size_t i = 0; i < self.grad.rows(); ++i)
        for (size_t j = 0; j < self.grad.cols(); ++j) g[j] += self.grad.at(i, j);
    }
  });
}

/// Multiplies every entry by a 1x1 variable (e.g. a learnable inverse
/// temperature).
template <class T>
Var<T> mul_scalar_var(const Var<T>& a, const Var<T>& s) {
  if (s.rows() != 1 || s.cols() != 1) throw ConfigError("mul_scalar_var: scalar must be 1x1");
  T sv = s.value()[0];
  Tensor<T> out = a.value();
  for (size_t i = 0; i < out.size(); ++i) out[i] *= sv;
  return detail::make_op<T>(std::move(out), {a.ptr(), s.ptr()}, [](Node<T>& self) {
    const Tensor<T>& av = self.parents[0]->value;
    T sv = self.parents[1]->value[0];
    if (self.parents[0]->requires_grad) {
      Tensor<T>& g = self.parents[0]->grad_buf();
      for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * sv;
    }
    if (self.parents[1]->requires_grad) {
      T acc = T(0);
      for (size_t i = 0; i < av.size(); ++i) acc += self.grad[i] * av[i];
      self.parents[1]->grad_buf()[0] += acc;
    }
  });
}

// ---- matrix products ----

template <class T>
Var<T> mm(const Var<T>& a, const Var<T>& b) {
  if (a.cols() != b.rows()) throw ConfigError("mm: inner dimensions differ");
  Tensor<T> out(a.rows(), b.cols());
  gemm_nn(a.value().data(), b.value().data(), out.data(), a.rows(), a.cols(), b.cols());
  return detail::make_op<T>(std::move(out), {a.ptr(), b.ptr()}, [](Node<T>& self) {
    const Tensor<T>& av = self.parents[0]->value;
    const Tensor<T>& bv = self.parents[1]->value;
    if (self.parents[0]->requires_grad) {
      Tensor<T>& g = self.parents[0]->grad_buf();
      gemm_nt(self.grad.data(), bv.data(), g.data(), self.grad.rows(), self.grad.cols(), av.cols());
    }
    if (self.parents[1]->requires_grad) {
      Tensor<T>& g = self.parents[1]->grad_buf();
      gemm_tn(av.data(), self.grad.data(), g.data(), bv.rows(), av.rows(), self.grad.cols());
    }
  });
}

/// a * b^T where b is stored row-major (n x k).
template <class T>
Var<T> mm_nt(const Var<T>& a, const Var<T>& b) {
  if (a.cols() != b.cols()) throw ConfigError("mm_nt: inner dimensions differ");
  Tensor<T> out(a.rows(), b.rows());
  gemm_nt(a.value().data(), b.value().data(), out.data(), a.rows(), a.cols(), b.rows());
  return detail::make_op<T>(std::move(out), {a.ptr(), b.ptr()}, [](Node<T>& self) {
    const Tensor<T>& av = self.parents[0]->value;
    const Tensor<T>& bv = self.parents[1]->value;
    if (self.parents[0]->requires_grad) {
      Tensor<T>& g = self.parents[0]->grad_buf();
      gemm_nn(self.grad.data(), bv.data(), g.data(), self.grad.rows(), self.grad.cols(), bv.cols());
    }
    if (self.parents[1]->requires_grad) {
      Tensor<T>& g = self.parents[1]->grad_buf();
      gemm_tn(self.grad.data(), av.data(), g.data(), bv.rows(), self.grad.rows(), av.cols());
    }
  });
}

// ---- shape ops ----

template <class T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ConfigError("concat_rows: no inputs");
  size_t cols = parts[0].cols(), rows = 0;
  for (auto& p : parts) {
    if (p.cols() != cols) throw ConfigError("concat_rows: column mismatch");
    rows += p.rows();
  }
  Tensor<T> out(rows, cols);
  std::vector<std::shared_ptr<Node<T>>> parents;
  size_t r = 0;
  for (auto& p : parts) {
    std::copy(p.value().data(), p.value().data() + p.value().size(), out.row(r));
    r += p.rows();
    parents.push_back(p.ptr());
  }
  return detail::make_op<T>(std::move(out), std::move(parents), [](Node<T>& self) {
    size_t r = 0;
    for (auto& p : self.parents) {
      size_t n = p->value.size();
      if (p->requires_grad) {
        Tensor<T>& g = p->grad_buf();
        const T* src = self.grad.row(r);
        for (size_t i = 0; i < n; ++i) g[i] += src[i];
      }
      r += p->value.rows();
    }
  });
}

template <class T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ConfigError("concat_cols: no inputs");
  size_t rows = parts[0].rows(), cols = 0;
  for (auto& p : parts) {
    if (p.rows() != rows) throw ConfigError("concat_cols: row mismatch");
    cols += p.cols();
  }
  Tensor<T> out(rows, cols);
  std::vector<std::shared_ptr<Node<T>>> parents;
  size_t c0 = 0;
  for (auto& p : parts) {
    for (size_t i = 0; i < rows; ++i)
      std::copy(p.value().row(i), p.value().row(i) + p.cols(), out.row(i) + c0);
    c0 += p.cols();
    parents.push_back(p.ptr());
  }
  return detail::make_op<T>(std::move(out), std::move(parents), [](Node<T>& self) {
    size_t c0 = 0;
    for (auto& p : self.parents) {
      size_t pc = p->value.cols();
      if (p->requires_grad) {
        Tensor<T>& g = p->grad_buf();
        for (size_t i = 0; i < self.grad.rows(); ++i) {
          const T* src = self.grad.row(i) + c0;
          T* dst = g.row(i);
          for (size_t j = 0; j < pc; ++j) dst[j] += src[j];
        }
      }
      c0 += pc;
    }
  });
}

template <class T>
Var<T> slice_rows(const Var<T>& a, size_t r0, size_t r1) {
  if (r0 >= r1 || r1 > a.rows()) throw ConfigError("slice_rows: bad range");
  Tensor<T> out(r1 - r0, a.cols());
  std::copy(a.value().row(r0), a.value().row(r0) + out.size(), out.data());
  return detail::make_op<T>(std::move(out), {a.ptr()}, [r0](Node<T>& self) {
    Tensor<T>& g = self.parents[0]->grad_buf();
    T* dst = g.row(r0);
    for (size_t i = 0; i < self.grad.size(); ++i) dst[i] += self.grad[i];
  });
}

template <class T>
Var<T> slice_cols(const Var<T>& a, size_t c0, size_t c1) {
  if (c0 >= c1 || c1 > a.cols()) throw ConfigError("slice_cols: bad range");
  Tensor<T> out(a.rows(), c1 - c0);
  for (size_t i = 0; i < out.rows(); ++i)
    std::copy(a.value().row(i) + c0, a.value().row(i) + c1, out.row(i));
  return detail::make_op<T>(std::move(out), {a.ptr()}, [c0](Node<T>& self) {
    Tensor<T>& g = self.parents[0]->grad_buf();
    for (size_t i = 0; i < self.grad.rows(); ++i) {
      T* dst = g.row(i) + c0;
      const T* src = self.grad.row(i);
      for (size_t j = 0; j < self.grad.cols(); ++j) dst[j] += src[j];
    }
  });
}

/// out(i,k) = a(i, idx[k]); duplicate indices accumulate in the backward pass.
template <class T>
Var<T> gather_cols(const Var<T>& a, std::vector<size_t> idx) {
  if (idx.empty()) throw ConfigError("gather_cols: empty index list");
  for (size_t j : idx)
    if (j >= a.cols()) throw ConfigError("gather_cols: index out of range");
  Tensor<T> out(a.rows(), idx.size());
  for (size_t i = 0; i < out.rows(); ++i) {
    const T* src = a.value().row(i);
    T* dst = out.row(i);
    for (size_t k = 0; k < idx.size(); ++k) dst[k] = src[idx[k]];
  }
  return detail::make_op<T>(std::move(out), {a.ptr()}, [idx = std::move(idx)](Node<T>& self) {
    Tensor<T>& g = self.parents[0]->grad_buf();
    for (size_t i = 0; i < self.grad.rows(); ++i) {
      const T* src = self.grad.row(i);
      T* dst = g.row(i);
      for (size_t k = 0; k < idx.size(); ++k) dst[idx[k]] += src[k];
    }
  });
}

template <class T>
Var<T> get(const Var<T>& a, size_t i, size_t j) {
  if (i >= a.rows() || j >= a.cols()) throw ConfigError("get: index out of range");
  Tensor<T> out(1, 1, a.value().at(i, j));
  return detail::make_op<T>(std::move(out), {a.ptr()}, [i, j](Node<T>& self) {
    self.parents[0]->grad_buf().at(i, j) += self.grad[0];
  });
}

/// Gathers table rows by index (embedding lookup).
template <class T>
Var<T> embed_rows(const Var<T>& table, std::vector<size_t> ids) {
  Tensor<T> out(ids.size(), table.cols());
  for (size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= table.rows()) throw ConfigError("embed_rows: id out of range");
    std::copy(table.value().row(ids[i]), table.value().row(ids[i]) + table.cols(), out.row(i));
  }
  return detail::make_op<T>(std::move(out), {table.ptr()}, [ids = std::move(ids)](Node<T>& self) {
    Tensor<T>& g = self.parents[0]->grad_buf();
    for (size_t i = 0; i < ids.size(); ++i) {
      T* dst = g.row(ids[i]);
      const T* src = self.grad.row(i);
      for (size_t j = 0; j < self.grad.cols(); ++j) dst[j] += src[j];
    }
  });
}

// ---- reductions ----

template <class T>
Var<T> sum_all(const Var<T>& a) {
  T acc = T(0);
  for (size_t i = 0; i < a.value().size(); ++i) acc += a.value()[i];
  return detail::make_op<T>(Tensor<T>(1, 1, acc), {a.ptr()}, [](Node<T>& self) {
    Tensor<T>& g = self.parents[0]->grad_buf();
    for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[0];
  });
}

template <class T>
Var<T> mean_all(const Var<T>& a) {
  return scale(sum_all(a), 1.0 / double(a.value().size()));
}

/// Column means: m x n -> 1 x n.
template <class T>
Var<T> mean_rows(const Var<T>& a) {
  Tensor<T> out(1, a.cols(), T(0));
  for (size_t i = 0; i < a.rows(); ++i)
    for (size_t j = 0; j < a.cols(); ++j) out[j] += a.value().at(i, j);
  T inv = T(1) / T(a.rows());
  for (size_t j = 0; j < a.cols(); ++j) out[j] *= inv;
  return detail::make_op<T>(std::move(out), {a.ptr()}, [](Node<T>& self) {
    Tensor<T>& g = self.parents[0]->grad_buf();
    T inv = T(1) / T(g.rows());
    for (size_t i = 0; i < g.rows(); ++i)
      for (size_t j = 0; j < g.cols(); ++j) g.at(i, j) += self.grad[j] * inv;
  });
}

/// Row-wise log-sum-exp: m x n -> m x 1. Stable under large logits.
template <class T>
Var<T> lse_rows(const Var<T>& a) {
  Tensor<T> out(a.rows(), 1);
  for (size_t i = 0; i < a.rows(); ++i) {
    const T* r = a.value().row(i);
    T m = r[0];
    for (size_t j = 1; j < a.cols(); ++j) m = std::max(m, r[j]);
    T s = T(0);
    for (size_t j = 0; j < a.cols(); ++j) s += std::exp(r[j] - m);
    out[i] = m + std::log(s);
  }
  return detail::make_op<T>(std::move(out), {a.ptr()}, [](Node<T>& self) {
    const Tensor<T>& av = self.parents[0]->value;
    Tensor<T>& g = self.parents[0]->grad_buf();
    for (size_t i = 0; i < av.rows(); ++i) {
      T lse = self.value[i];
      for (size_t j = 0; j < av.cols(); ++j)
        g.at(i, j) += self.grad[i] * std::exp(av.at(i, j) - lse);
    }
  });
}

// ---- row-wise normalizations ----

template <class T>
Var<T> softmax_rows(const Var<T>& a) {
  Tensor<T> out(a.rows(), a.cols());
  for (size_t i = 0; i < a.rows(); ++i) {
    const T* r = a.value().row(i);
    T m = r[0];
    for (size_t j = 1; j < a.cols(); ++j) m = std::max(m, r[j]);
    T s = T(0);
    for (size_t j = 0; j < a.cols(); ++j) {
      out.at(i, j) = std::exp(r[j] - m);
      s += out.at(i, j);
    }
    T inv = T(1) / s;
    for (size_t j = 0; j < a.cols(); ++j) out.at(i, j) *= inv;
  }
  return detail::make_op<T>(std::move(out), {a.ptr()}, [](Node<T>& self) {
    Tensor<T>& g = self.parents[0]->grad_buf();
    for (size_t i = 0; i < self.value.rows(); ++i) {
      const T* y = self.value.row(i);
      const T* dy = self.grad.row(i);
      T dot = T(0);
      for (size_t j = 0; j < self.value.cols(); ++j) dot += y[j] * dy[j];
      T* gi = g.row(i);
      for (size_t j = 0; j < self.value.cols(); ++j) gi[j] += y[j] * (dy[j] - dot);
    }
  });
}

/// Per-row layer normalization with learnable gain and bias (1 x n each).
template <class T>
Var<T> layernorm_rows(const Var<T>& a, const Var<T>& gain, const Var<T>& bias, double eps = 1e-5) {
  if (gain.rows() != 1 || gain.cols() != a.cols() || bias.rows() != 1 || bias.cols() != a.cols())
    throw ConfigError("layernorm_rows: gain/bias must be 1 x cols");
  size_t m = a.rows(), n = a.cols();
  Tensor<T> xhat(m, n), rstd(m, 1);
  Tensor<T> out(m, n);
  for (size_t i = 0; i < m; ++i) {
    const T* r = a.value().row(i);
    T mean = T(0);
    for (size_t j = 0; j < n; ++j) mean += r[j];
    mean /= T(n);
    T var = T(0);
    for (size_t j = 0; j < n; ++j) {
      T d = r[j] - mean;
      var += d * d;
    }
    var /= T(n);
    T rs = T(1) / std::sqrt(var + T(eps));
    rstd[i] = rs;
    for (size_t j = 0; j < n; ++j) {
      xhat.at(i, j) = (r[j] - mean) * rs;
      out.at(i, j) = xhat.at(i, j) * gain.value()[j] + bias.value()[j];
    }
  }
  return detail::make_op<T>(
      std::move(out), {a.ptr(), gain.ptr(), bias.ptr()},
      [xhat = std::move(xhat), rstd = std::move(rstd)](Node<T>& self) {
        size_t m = self.value.rows(), n = self.value.cols();
        const Tensor<T>& gv = self.parents[1]->value;
        if (self.parents[0]->requires_grad) {
          Tensor<T>& g = self.parents[0]->grad_buf();
          for (size_t i = 0; i < m; ++i) {
            const T* dy = self.grad.row(i);
            const T* xh = xhat.row(i);
            T sum_dxhat = T(0), sum_dxhat_xhat = T(0);
            for (size_t j = 0; j < n; ++j) {
              T dxh = dy[j] * gv[j];
              sum_dxhat += dxh;
              sum_dxhat_xhat += dxh * xh[j];
            }
            T invn = T(1) / T(n);
            T* gi = g.row(i);
            for (size_t j = 0; j < n; ++j) {
              T dxh = dy[j] * gv[j];
              gi[j] += rstd[i] * (dxh - invn * sum_dxhat - xh[j] * invn * sum_dxhat_xhat);
            }
          }
        }
        if (self.parents[1]->requires_grad) {
          Tensor<T>& g = self.parents[1]->grad_buf();
          for (size_t i = 0; i < m; ++i)
            for (size_t j = 0; j < n; ++j) g[j] += self.grad.at(i, j) * xhat.at(i, j);
        }
        if (self.parents[2]->requires_grad) {
          Tensor<T>& g = self.parents[2]->grad_buf();
          for (size_t i = 0; i < m; ++i)
            for (size_t j = 0; j < n; ++j) g[j] += self.grad.at(i, j);
        }
      });
}

/// Scales each row to unit L2 norm.
template <class T>
Var<T> l2normalize_rows(const Var<T>& a, double eps = 1e-12) {
  size_t m = a.rows(), n = a.cols();
  Tensor<T> out(m, n), rnorm(m, 1);
  for (size_t i = 0; i < m; ++i) {
    const T* r = a.value().row(i);
    T s = T(0);
    for (size_t j = 0; j < n; ++j) s += r[j] * r[j];
    T inv = T(1) / std::max(std::sqrt(s), T(eps));
    rnorm[i] = inv;
    for (size_t j = 0; j < n; ++j) out.at(i, j) = r[j] * inv;
  }
  return detail::make_op<T>(std::move(out), {a.ptr()}, [rnorm = std::move(rnorm)](Node<T>& self) {
    Tensor<T>& g = self.parents[0]->grad_buf();
    size_t m = self.value.rows(), n = self.value.cols();
    for (size_t i = 0; i < m; ++i) {
      const T* y = self.value.row(i);
      const T* dy = self.grad.row(i);
      T dot = T(0);
      for (size_t j = 0; j < n; ++j) dot += y[j] * dy[j];
      T* gi = g.row(i);
      for (size_t j = 0; j < n; ++j) gi[j] += rnorm[i] * (dy[j] - y[j] * dot);
    }
  });
}

// ---- elementwise nonlinearities ----

namespace detail {
constexpr double kGeluScale = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluCubic = 0.044715;
}  // namespace detail

template <class T>
Var<T> gelu(const Var<T>& a) {
  Tensor<T> out(a.rows(), a.cols());
  for (size_t i = 0; i < out.size(); ++i) {
    double x = double(a.value()[i]);
    out[i] = T(0.5 * x * (1.0 + std::tanh(detail::kGeluScale * (x + detail::kGeluCubic * x * x * x))));
  }
  return detail::make_op<T>(std::move(out), {a.ptr()}, [](Node<T>& self) {
    Tensor<T>& g = self.parents[0]->grad_buf();
    const Tensor<T>& av = self.parents[0]->value;
    for (size_t i = 0; i < g.size(); ++i) {
      double x = double(av[i]);
      double u = detail::kGeluScale * (x + detail::kGeluCubic * x * x * x);
      double t = std::tanh(u);
      double d = 0.5 * (1.0 + t) +
                 0.5 * x * (1.0 - t * t) * detail::kGeluScale * (1.0 + 3.0 * detail::kGeluCubic * x * x);
      g[i] += self.grad[i] * T(d);
    }
  });
}

template <class T>
Var<T> sigmoid(const Var<T>& a) {
  Tensor<T> out(a.rows(), a.cols());
  for (size_t i = 0; i < out.size(); ++i) {
    double x = double(a.value()[i]);
    out[i] = T(x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)));
  }
  return detail::make_op<T>(std::move(out), {a.ptr()}, [](Node<T>& self) {
    Tensor<T>& g = self.parents[0]->grad_buf();
    for (size_t i = 0; i < g.size(); ++i) {
      T y = self.value[i];
      g[i] += self.grad[i] * y * (T(1) - y);
    }
  });
}

/// log(1 + exp(x)), evaluated stably.
template <class T>
Var<T> softplus(const Var<T>& a) {
  Tensor<T> out(a.rows(), a.cols());
  for (size_t i = 0; i < out.size(); ++i) {
    double x = double(a.value()[i]);
    out[i] = T(x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)));
  }
  return detail::make_op<T>(std::move(out), {a.ptr()}, [](Node<T>& self) {
    Tensor<T>& g = self.parents[0]->grad_buf();
    const Tensor<T>& av = self.parents[0]->value;
    for (size_t i = 0; i < g.size(); ++i) {
      double x = double(av[i]);
      double s = x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
      g[i] += self.grad[i] * T(s);
    }
  });
}

template <class T>
Var<T> vlog(const Var<T>& a) {
  Tensor<T> out(a.rows(), a.cols());
  for (size_t i = 0; i < out.size(); ++i) out[i] = std::log(a.value()[i]);
  return detail::make_op<T>(std::move(out), {a.ptr()}, [](Node<T>& self) {
    Tensor<T>& g = self.parents[0]->grad_buf();
    const Tensor<T>& av = self.parents[0]->value;
    for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] / av[i];
  });
}

template <class T>
Var<T> vexp(const Var<T>& a) {
  Tensor<T> out(a.rows(), a.cols());
  for (size_t i = 0; i < out.size(); ++i) out[i] = std::exp(a.value()[i]);
  return detail::make_op<T>(std::move(out), {a.ptr()}, [](Node<T>& self) {
    Tensor<T>& g = self.parents[0]->grad_buf();
    for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * self.value[i];
  });
}

template <class T>
Var<T> vabs(const Var<T>& a) {
  Tensor<T> out(a.rows(), a.cols());
  for (size_t i = 0; i < out.size(); ++i) out[i] = std::abs(a.value()[i]);
  return detail::make_op<T>(std::move(out), {a.ptr()}, [](Node<T>& self) {
    Tensor<T>& g = self.parents[0]->grad_buf();
    const Tensor<T>& av = self.parents[0]->value;
    for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * (av[i] >= T(0) ? T(1) : T(-1));
  });
}

/// Elementwise maximum; ties route the gradient to the first argument.
template <class T>
Var<T> vmax(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a, b, "vmax");
  Tensor<T> out(a.rows(), a.cols());
  for (size_t i = 0; i < out.size(); ++i) out[i] = std::max(a.value()[i], b.value()[i]);
  return detail::make_op<T>(std::move(out), {a.ptr(), b.ptr()}, [](Node<T>& self) {
    const Tensor<T>& av = self.parents[0]->value;
    const Tensor<T>& bv = self.parents[1]->value;
    for (size_t i = 0; i < self.grad.size(); ++i) {
      bool first = av[i] >= bv[i];
      if (first && self.parents[0]->requires_grad) self.parents[0]->grad_buf()[i] += self.grad[i];
      if (!first && self.parents[1]->requires_grad) self.parents[1]->grad_buf()[i] += self.grad[i];
    }
  });
}

template <class T>
Var<T> vmin(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a, b, "vmin");
  Tensor<T> out(a.rows(), a.cols());
  for (size_t i = 0; i < out.size(); ++i) out[i] = std::min(a.value()[i], b.value()[i]);
  return detail::make_op<T>(std::move(out), {a.ptr(), b.ptr()}, [](Node<T>& self) {
    const Tensor<T>& av = self.parents[0]->value;
    const Tensor<T>& bv = self.parents[1]->value;
    for (size_t i = 0; i < self.grad.size(); ++i) {
      bool first = av[i] <= bv[i];
      if (first && self.parents[0]->requires_grad) self.parents[0]->grad_buf()[i] += self.grad[i];
      if (!first && self.parents[1]->requires_grad) self.parents[1]->grad_buf()[i] += self.grad[i];
    }
  });
}

template <class T>
Var<T> clamp_min(const Var<T>& a, double lo) {
  Tensor<T> out(a.rows(), a.cols());
  for (size_t i = 0; i < out.size(); ++i) out[i] = std::max(a.value()[i], T(lo));
  return detail::make_op<T>(std::move(out), {a.ptr()}, [lo](Node<T>& self) {
    Tensor<T>& g = self.parents[0]->grad_buf();
    const Tensor<T>& av = self.parents[0]->value;
    for (size_t i = 0; i < g.size(); ++i)
      if (av[i] >= T(lo)) g[i] += self.grad[i];
  });
}

}  // namespace ramdg
