#pragma once

// Network building blocks: named parameter store, linear layers, multi-head
// attention, pre-norm transformer towers, MLP heads, and a finite-difference
// gradient checker.

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "ramdg/graph.hpp"

namespace ramdg {

enum class Init { Zero, One, TruncNormal };

/// Owns every learnable (and frozen) tensor by name. Initialization draws
/// from a stream keyed on (seed, name), so parameter values do not depend on
/// creation order.
template <class T>
class ParamStore {
 public:
  explicit ParamStore(uint64_t seed = 0) : seed_(seed) {}

  uint64_t seed() const { return seed_; }

  Var<T> create(const std::string& name, size_t rows, size_t cols, Init init,
                double stddev = 0.02, bool requires_grad = true) {
    if (params_.count(name)) throw ConfigError("parameter already exists: " + name);
    Tensor<T> t(rows, cols);
    switch (init) {
      case Init::Zero:
        break;
      case Init::One:
        t.fill(T(1));
        break;
      case Init::TruncNormal: {
        Rng rng(derive_seed(seed_, fnv1a(name)));
        for (size_t i = 0; i < t.size(); ++i) t[i] = T(rng.trunc_normal(0.0, stddev));
        break;
      }
    }
    Var<T> v = requires_grad ? Var<T>::param(std::move(t)) : Var<T>::constant(std::move(t));
    names_.push_back(name);
    params_.emplace(name, v);
    return v;
  }

  /// Registers a frozen copy of an existing parameter under a new name.
  Var<T> create_frozen_copy(const std::string& name, const Var<T>& src) {
    if (params_.count(name)) throw ConfigError("parameter already exists: " + name);
    Var<T> v = Var<T>::constant(src.value());
    names_.push_back(name);
    params_.emplace(name, v);
    return v;
  }

  bool has(const std::string& name) const { return params_.count(name) != 0; }

  Var<T> get(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw ConfigError("unknown parameter: " + name);
    return it->second;
  }

  /// Names in creation order; the optimizer and checkpoint writer iterate this.
  const std::vector<std::string>& names() const { return names_; }

  size_t total_size() const {
    size_t n = 0;
    for (auto& name : names_) n += params_.at(name).value().size();
    return n;
  }

  void zero_grads() {
    for (auto& name : names_) {
      auto& v = params_.at(name);
      if (v.requires_grad()) const_cast<Var<T>&>(v).zero_grad();
    }
  }

 private:
  uint64_t seed_;
  std::vector<std::string> names_;
  std::unordered_map<std::string, Var<T>> params_;
};

/// In-place exponential moving average: dst = m * dst + (1 - m) * src.
template <class T>
void ema_update(Var<T>& dst, const Var<T>& src, double m) {
  Tensor<T>& d = dst.value_mut();
  const Tensor<T>& s = src.value();
  if (!d.same_shape(s)) throw ConfigError("ema_update: shape mismatch");
  for (size_t i = 0; i < d.size(); ++i) d[i] = T(m) * d[i] + T(1.0 - m) * s[i];
}

template <class T>
struct Linear {
  Var<T> w, b;

  static Linear create(ParamStore<T>& ps, const std::string& prefix, size_t in, size_t out,
                       bool grad = true) {
    Linear l;
    l.w = ps.create(prefix + ".w", in, out, Init::TruncNormal, 0.02, grad);
    l.b = ps.create(prefix + ".b", 1, out, Init::Zero, 0.0, grad);
    return l;
  }

  static Linear from_store(const ParamStore<T>& ps, const std::string& prefix) {
    return Linear{ps.get(prefix + ".w"), ps.get(prefix + ".b")};
  }

  Var<T> operator()(const Var<T>& x) const { return add_rowvec(mm(x, w), b); }
};

template <class T>
struct LayerNorm {
  Var<T> gain, bias;

  static LayerNorm create(ParamStore<T>& ps, const std::string& prefix, size_t d,
                          bool grad = true) {
    LayerNorm ln;
    ln.gain = ps.create(prefix + ".gain", 1, d, Init::One, 0.0, grad);
    ln.bias = ps.create(prefix + ".bias", 1, d, Init::Zero, 0.0, grad);
    return ln;
  }

  Var<T> operator()(const Var<T>& x) const { return layernorm_rows(x, gain, bias); }
};

/// Multi-head attention. Query rows attend over key/value rows; used both for
/// self-attention inside towers (q == kv) and for cross-attention fusion.
template <class T>
struct Mha {
  Linear<T> q, k, v, o;
  size_t heads = 1;

  static Mha create(ParamStore<T>& ps, const std::string& prefix, size_t d, size_t heads,
                    bool grad = true) {
    Mha m;
    m.q = Linear<T>::create(ps, prefix + ".q", d, d, grad);
    m.k = Linear<T>::create(ps, prefix + ".k", d, d, grad);
    m.v = Linear<T>::create(ps, prefix + ".v", d, d, grad);
    m.o = Linear<T>::create(ps, prefix + ".o", d, d, grad);
    m.heads = heads;
    return m;
  }

  Var<T> operator()(const Var<T>& q_in, const Var<T>& kv_in) const {
    size_t d = q.w.cols();
    if (d % heads != 0) throw ConfigError("Mha: width not divisible by heads");
    size_t dh = d / heads;
    Var<T> Q = q(q_in), K = k(kv_in), V = v(kv_in);
    std::vector<Var<T>> outs;
    outs.reserve(heads);
    double inv_sqrt = 1.0 / std::sqrt(double(dh));
    for (size_t h = 0; h < heads; ++h) {
      Var<T> Qh = slice_cols(Q, h * dh, (h + 1) * dh);
      Var<T> Kh = slice_cols(K, h * dh, (h + 1) * dh);
      Var<T> Vh = slice_cols(V, h * dh, (h + 1) * dh);
      Var<T> attn = softmax_rows(scale(mm_nt(Qh, Kh), inv_sqrt));
      outs.push_back(mm(attn, Vh));
    }
    return o(concat_cols(outs));
  }
};

/// Pre-norm transformer block: x += MHA(LN(x)); x += MLP(LN(x)).
template <class T>
struct TransformerBlock {
  LayerNorm<T> ln1, ln2;
  Mha<T> attn;
  Linear<T> fc1, fc2;

  static TransformerBlock create(ParamStore<T>& ps, const std::string& prefix, size_t d,
                                 size_t heads, size_t hidden, bool grad = true) {
    TransformerBlock b;
    b.ln1 = LayerNorm<T>::create(ps, prefix + ".ln1", d, grad);
    b.attn = Mha<T>::create(ps, prefix + ".attn", d, heads, grad);
    b.ln2 = LayerNorm<T>::create(ps, prefix + ".ln2", d, grad);
    b.fc1 = Linear<T>::create(ps, prefix + ".fc1", d, hidden, grad);
    b.fc2 = Linear<T>::create(ps, prefix + ".fc2", hidden, d, grad);
    return b;
  }

  Var<T> operator()(const Var<T>& x) const {
    Var<T> h = ln1(x);
    Var<T> y = add(x, attn(h, h));
    return add(y, fc2(gelu(fc1(ln2(y)))));
  }
};

/// Stack of pre-norm blocks followed by a final layer norm.
template <class T>
struct TransformerTower {
  std::vector<TransformerBlock<T>> blocks;
  LayerNorm<T> ln_out;

  static TransformerTower create(ParamStore<T>& ps, const std::string& prefix, size_t depth,
                                 size_t d, size_t heads, size_t hidden, bool grad = true) {
    TransformerTower t;
    for (size_t i = 0; i < depth; ++i)
      t.blocks.push_back(
          TransformerBlock<T>::create(ps, prefix + ".block" + std::to_string(i), d, heads, hidden, grad));
    t.ln_out = LayerNorm<T>::create(ps, prefix + ".ln_out", d, grad);
    return t;
  }

  Var<T> operator()(Var<T> x) const {
    for (auto& b : blocks) x = b(x);
    return ln_out(x);
  }
};

/// Two-layer MLP: Linear, GELU, Linear.
template <class T>
struct Mlp2 {
  Linear<T> fc1, fc2;

  static Mlp2 create(ParamStore<T>& ps, const std::string& prefix, size_t in, size_t hidden,
                     size_t out, bool grad = true) {
    Mlp2 m;
    m.fc1 = Linear<T>::create(ps, prefix + ".fc1", in, hidden, grad);
    m.fc2 = Linear<T>::create(ps, prefix + ".fc2", hidden, out, grad);
    return m;
  }

  Var<T> operator()(const Var<T>& x) const { return fc2(gelu(fc1(x))); }
};

/// Three-layer per-row scorer: Linear, GELU, Linear, GELU, Linear -> 1 logit
/// per row.
template <class T>
struct Mlp3 {
  Linear<T> fc1, fc2, fc3;

  static Mlp3 create(ParamStore<T>& ps, const std::string& prefix, size_t in, size_t hidden,
                     size_t out, bool grad = true) {
    Mlp3 m;
    m.fc1 = Linear<T>::create(ps, prefix + ".fc1", in, hidden, grad);
    m.fc2 = Linear<T>::create(ps, prefix + ".fc2", hidden, hidden, grad);
    m.fc3 = Linear<T>::create(ps, prefix + ".fc3", hidden, out, grad);
    return m;
  }

  Var<T> operator()(const Var<T>& x) const { return fc3(gelu(fc2(gelu(fc1(x))))); }

  /// Output of the middle layer after its activation.
  Var<T> penultimate(const Var<T>& x) const { return gelu(fc2(gelu(fc1(x)))); }
};

struct GradCheckStats {
  double max_rel_err = 0.0;
  double max_abs_err = 0.0;
  size_t coords_checked = 0;
  std::string worst_param;
};

/// Compares analytic gradients of build_loss() against central finite
/// differences on randomly sampled coordinates of the listed parameters.
/// build_loss must rebuild the graph from the stores' current values.
template <class T, class LossFn>
GradCheckStats grad_check(ParamStore<T>& ps, const std::vector<std::string>& param_names,
                          LossFn build_loss, double eps, size_t coords_per_param, Rng& rng) {
  ps.zero_grads();
  Var<T> loss = build_loss();
  backward(loss);

  GradCheckStats stats;
  for (const auto& name : param_names) {
    Var<T> p = ps.get(name);
    if (!p.requires_grad()) continue;
    const Tensor<T>& g = p.grad();
    size_t n = p.value().size();
    size_t count = std::min(coords_per_param, n);
    std::vector<size_t> coords = rng.sample_without_replacement(n, count);
    for (size_t idx : coords) {
      T saved = p.value()[idx];
      p.value_mut()[idx] = saved + T(eps);
      double f_plus = double(build_loss().value()[0]);
      p.value_mut()[idx] = saved - T(eps);
      double f_minus = double(build_loss().value()[0]);
      p.value_mut()[idx] = saved;

      double numeric = (f_plus - f_minus) / (2.0 * eps);
      double analytic = g.size() ? double(g[idx]) : 0.0;
      double abs_err = std::abs(analytic - numeric);
      // Floor keeps finite-difference roundoff (~|f|·u/eps absolute) from
      // registering as relative error on numerically dead coordinates.
      double rel = abs_err / std::max({std::abs(analytic), std::abs(numeric), 1e-6});
      if (rel > stats.max_rel_err) {
        stats.max_rel_err = rel;
        stats.worst_param = name;
      }
      stats.max_abs_err = std::max(stats.max_abs_err, abs_err);
      ++stats.coords_checked;
    }
  }
  return stats;
}

}  // namespace ramdg
