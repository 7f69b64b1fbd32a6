#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "pcan/autograd.hpp"
#include "pcan/rng.hpp"

namespace pcan::nn {

// Named parameter registry. Modules create their parameters through the
// store, which fixes creation order (and thus init randomness and checkpoint
// layout) deterministically.
class ParamStore {
 public:
  Var add(const std::string& name, Tensor init) {
    Var p = leaf(std::move(init), true);
    items_.push_back({name, p});
    return p;
  }

  const std::vector<std::pair<std::string, Var>>& items() const { return items_; }
  std::vector<std::pair<std::string, Var>>& items() { return items_; }
  size_t count() const { return items_.size(); }

  int64_t scalar_count() const {
    int64_t n = 0;
    for (auto& [name, p] : items_) n += p.value().size();
    return n;
  }

  void zero_grad() {
    for (auto& [name, p] : items_) p.zero_grad();
  }

  Var find(const std::string& name) const {
    for (auto& [n, p] : items_)
      if (n == name) return p;
    throw std::invalid_argument("ParamStore: no parameter named " + name);
  }

 private:
  std::vector<std::pair<std::string, Var>> items_;
};

inline Tensor xavier_uniform(std::vector<int> shape, int fan_in, int fan_out, Rng& rng) {
  Tensor t(shape);
  const double a = std::sqrt(6.0 / double(fan_in + fan_out));
  for (int64_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(-a, a);
  return t;
}

struct Linear {
  Var W, b;  // W: [in, out]

  Linear() = default;
  Linear(ParamStore& ps, const std::string& name, int in, int out, Rng& rng) {
    W = ps.add(name + ".W", xavier_uniform({in, out}, in, out, rng));
    b = ps.add(name + ".b", Tensor({out}));
  }

  Var operator()(const Var& x) const { return add_rows(matmul(x, W), b); }
};

struct LayerNorm {
  Var gamma, beta;

  LayerNorm() = default;
  LayerNorm(ParamStore& ps, const std::string& name, int dim) {
    gamma = ps.add(name + ".gamma", Tensor({dim}, 1.0));
    beta = ps.add(name + ".beta", Tensor({dim}));
  }

  Var operator()(const Var& x) const { return layer_norm_rows(x, gamma, beta); }
};

// Two-layer MLP with ReLU, optionally more layers.
struct Mlp {
  std::vector<Linear> layers;

  Mlp() = default;
  Mlp(ParamStore& ps, const std::string& name, const std::vector<int>& dims, Rng& rng,
      bool zero_init_last = false) {
    for (size_t i = 0; i + 1 < dims.size(); ++i)
      layers.emplace_back(ps, name + ".l" + std::to_string(i), dims[i], dims[i + 1], rng);
    if (zero_init_last && !layers.empty()) {
      layers.back().W.node()->value.fill(0.0);
      layers.back().b.node()->value.fill(0.0);
    }
  }

  Var operator()(Var x) const {
    for (size_t i = 0; i < layers.size(); ++i) {
      x = layers[i](x);
      if (i + 1 < layers.size()) x = relu(x);
    }
    return x;
  }
};

// Dense multi-head attention. q:[Nq,C], k/v:[Nk,C]. Positional terms are
// added by the caller before projection (DETR convention).
struct MultiheadAttention {
  Linear wq, wk, wv, wo;
  int heads = 1;
  int dim = 0;

  MultiheadAttention() = default;
  MultiheadAttention(ParamStore& ps, const std::string& name, int c, int n_heads, Rng& rng)
      : wq(ps, name + ".wq", c, c, rng),
        wk(ps, name + ".wk", c, c, rng),
        wv(ps, name + ".wv", c, c, rng),
        wo(ps, name + ".wo", c, c, rng),
        heads(n_heads),
        dim(c) {
    if (c % n_heads != 0) throw std::invalid_argument("MultiheadAttention: C % heads != 0");
  }

  Var operator()(const Var& q_in, const Var& k_in, const Var& v_in) const {
    const Var q = wq(q_in), k = wk(k_in), v = wv(v_in);
    const int dh = dim / heads;
    const double inv_sqrt = 1.0 / std::sqrt(double(dh));
    std::vector<Var> outs;
    outs.reserve(heads);
    for (int h = 0; h < heads; ++h) {
      const Var qh = slice_cols(q, h * dh, (h + 1) * dh);
      const Var kh = slice_cols(k, h * dh, (h + 1) * dh);
      const Var vh = slice_cols(v, h * dh, (h + 1) * dh);
      const Var att = softmax_rows(scale(matmul(qh, transpose(kh)), inv_sqrt));
      outs.push_back(matmul(att, vh));
    }
    return wo(concat_cols(outs));
  }
};

// AdamW with decoupled weight decay.
class AdamW {
 public:
  AdamW(ParamStore& ps, double lr, double weight_decay, double beta1 = 0.9, double beta2 = 0.999,
        double eps = 1e-8)
      : ps_(ps), lr_(lr), wd_(weight_decay), b1_(beta1), b2_(beta2), eps_(eps) {
    for (auto& [name, p] : ps.items()) {
      m_.emplace_back(p.value().shape());
      v_.emplace_back(p.value().shape());
    }
  }

  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }
  int64_t step_count() const { return t_; }

  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(b1_, double(t_));
    const double bc2 = 1.0 - std::pow(b2_, double(t_));
    size_t idx = 0;
    for (auto& [name, p] : ps_.items()) {
      Tensor& val = p.node()->value;
      Tensor& g = p.node()->grad_buf();
      Tensor& m = m_[idx];
      Tensor& v = v_[idx];
      for (int64_t i = 0; i < val.size(); ++i) {
        m[i] = b1_ * m[i] + (1.0 - b1_) * g[i];
        v[i] = b2_ * v[i] + (1.0 - b2_) * g[i] * g[i];
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        val[i] -= lr_ * (mhat / (std::sqrt(vhat) + eps_) + wd_ * val[i]);
      }
      ++idx;
    }
  }

  void zero_grad() { ps_.zero_grad(); }

  // Checkpoint access.
  std::vector<Tensor>& moment1() { return m_; }
  std::vector<Tensor>& moment2() { return v_; }
  const std::vector<Tensor>& moment1() const { return m_; }
  const std::vector<Tensor>& moment2() const { return v_; }
  int64_t& raw_step() { return t_; }
  int64_t raw_step() const { return t_; }

 private:
  ParamStore& ps_;
  double lr_, wd_, b1_, b2_, eps_;
  int64_t t_ = 0;
  std::vector<Tensor> m_, v_;
};

// Central finite-difference gradient check over every parameter in the
// store. Returns the vector-level relative error between analytic and
// numeric gradients. `loss_fn` must be a deterministic function of the
// parameter values.
inline double gradient_check(ParamStore& ps, const std::function<Var()>& loss_fn, double h = 1e-5) {
  ps.zero_grad();
  Var loss = loss_fn();
  loss.backward();
  std::vector<double> analytic, numeric;
  for (auto& [name, p] : ps.items()) {
    const Tensor& g = p.node()->grad;
    Tensor& val = p.node()->value;
    for (int64_t i = 0; i < val.size(); ++i) {
      analytic.push_back(g.empty() ? 0.0 : g[i]);
      const double keep = val[i];
      val[i] = keep + h;
      const double fp = loss_fn().item();
      val[i] = keep - h;
      const double fm = loss_fn().item();
      val[i] = keep;
      numeric.push_back((fp - fm) / (2.0 * h));
    }
  }
  double max_diff = 0.0, max_mag = 0.0;
  for (size_t i = 0; i < analytic.size(); ++i) {
    max_diff = std::max(max_diff, std::fabs(analytic[i] - numeric[i]));
    max_mag = std::max({max_mag, std::fabs(analytic[i]), std::fabs(numeric[i])});
  }
  ps.zero_grad();
  return max_diff / std::max(max_mag, 1e-8);
}

}  // namespace pcan::nn
