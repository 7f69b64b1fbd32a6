#include "pcan/autograd.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace pcan::nn {

namespace {

std::atomic<uint64_t> g_seq{1};

void check(bool ok, const char* what) {
  if (!ok) throw std::invalid_argument(what);
}

// C += A(MxK) * B(KxN)
void mm_nn(const double* A, const double* B, double* C, int M, int K, int N) {
  for (int i = 0; i < M; ++i) {
    const double* arow = A + int64_t(i) * K;
    double* crow = C + int64_t(i) * N;
    for (int k = 0; k < K; ++k) {
      const double a = arow[k];
      const double* brow = B + int64_t(k) * N;
      for (int n = 0; n < N; ++n) crow[n] += a * brow[n];
    }
  }
}

// C += A(MxN) * B(KxN)^T  -> (MxK)
void mm_nt(const double* A, const double* B, double* C, int M, int N, int K) {
  for (int i = 0; i < M; ++i) {
    const double* arow = A + int64_t(i) * N;
    double* crow = C + int64_t(i) * K;
    for (int k = 0; k < K; ++k) {
      const double* brow = B + int64_t(k) * N;
      double acc = 0.0;
      for (int n = 0; n < N; ++n) acc += arow[n] * brow[n];
      crow[k] += acc;
    }
  }
}

// C += A(MxK)^T * B(MxN)  -> (KxN)
void mm_tn(const double* A, const double* B, double* C, int M, int K, int N) {
  for (int i = 0; i < M; ++i) {
    const double* arow = A + int64_t(i) * K;
    const double* brow = B + int64_t(i) * N;
    for (int k = 0; k < K; ++k) {
      const double a = arow[k];
      double* crow = C + int64_t(k) * N;
      for (int n = 0; n < N; ++n) crow[n] += a * brow[n];
    }
  }
}

Var unary(const Var& a, Tensor value, std::function<double(double, double, double)> dfn) {
  // dfn(x, y, gy) -> gx contribution
  return make_op(std::move(value), {a}, [dfn](Node& n) {
    Node* pa = n.parents[0].get();
    if (!pa->requires_grad) return;
    Tensor& ga = pa->grad_buf();
    for (int64_t i = 0; i < n.value.size(); ++i) ga[i] += dfn(pa->value[i], n.value[i], n.grad[i]);
  });
}

}  // namespace

void Var::backward() const {
  check(node_ != nullptr, "backward: undefined Var");
  check(node_->value.size() == 1, "backward: root must be scalar");
  // Collect the reachable grad-requiring subgraph.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<Node*> stack{node_.get()};
  seen.insert(node_.get());
  while (!stack.empty()) {
    Node* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (auto& p : n->parents) {
      if (p->requires_grad && !seen.count(p.get())) {
        seen.insert(p.get());
        stack.push_back(p.get());
      }
    }
  }
  std::sort(order.begin(), order.end(), [](Node* a, Node* b) { return a->seq > b->seq; });
  node_->grad_buf()[0] += 1.0;
  for (Node* n : order)
    if (n->backprop) n->backprop(*n);
}

Var leaf(Tensor v, bool requires_grad) {
  auto n = std::make_shared<Node>();
  n->value = std::move(v);
  n->requires_grad = requires_grad;
  n->is_leaf = true;
  n->seq = g_seq++;
  return Var(n);
}

Var constant(Tensor v) { return leaf(std::move(v), false); }
Var constant_scalar(double v) { return leaf(Tensor::scalar(v), false); }

Var make_op(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backprop) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->seq = g_seq++;
  bool req = false;
  n->parents.reserve(parents.size());
  for (auto& p : parents) {
    check(p.defined(), "op: undefined parent");
    req = req || p.requires_grad();
    n->parents.push_back(p.node());
  }
  n->requires_grad = req;
  if (req) n->backprop = std::move(backprop);
  return Var(n);
}

// ---------------- elementwise ----------------

static Var binary(const Var& a, const Var& b, const char* name,
                  std::function<double(double, double)> f,
                  std::function<double(double, double, double)> dfa,
                  std::function<double(double, double, double)> dfb) {
  check(a.value().same_shape(b.value()), name);
  Tensor out(a.value().shape());
  for (int64_t i = 0; i < out.size(); ++i) out[i] = f(a.value()[i], b.value()[i]);
  return make_op(std::move(out), {a, b}, [dfa, dfb](Node& n) {
    Node* pa = n.parents[0].get();
    Node* pb = n.parents[1].get();
    if (pa->requires_grad) {
      Tensor& g = pa->grad_buf();
      for (int64_t i = 0; i < n.value.size(); ++i) g[i] += dfa(pa->value[i], pb->value[i], n.grad[i]);
    }
    if (pb->requires_grad) {
      Tensor& g = pb->grad_buf();
      for (int64_t i = 0; i < n.value.size(); ++i) g[i] += dfb(pa->value[i], pb->value[i], n.grad[i]);
    }
  });
}

Var add(const Var& a, const Var& b) {
  return binary(a, b, "add: shape mismatch", [](double x, double y) { return x + y; },
                [](double, double, double g) { return g; }, [](double, double, double g) { return g; });
}

Var sub(const Var& a, const Var& b) {
  return binary(a, b, "sub: shape mismatch", [](double x, double y) { return x - y; },
                [](double, double, double g) { return g; }, [](double, double, double g) { return -g; });
}

Var mul(const Var& a, const Var& b) {
  return binary(a, b, "mul: shape mismatch", [](double x, double y) { return x * y; },
                [](double, double y, double g) { return g * y; },
                [](double x, double, double g) { return g * x; });
}

Var div(const Var& a, const Var& b) {
  return binary(a, b, "div: shape mismatch", [](double x, double y) { return x / y; },
                [](double, double y, double g) { return g / y; },
                [](double x, double y, double g) { return -g * x / (y * y); });
}

Var mine(const Var& a, const Var& b) {
  return binary(a, b, "mine: shape mismatch", [](double x, double y) { return x <= y ? x : y; },
                [](double x, double y, double g) { return x <= y ? g : 0.0; },
                [](double x, double y, double g) { return x <= y ? 0.0 : g; });
}

Var maxe(const Var& a, const Var& b) {
  return binary(a, b, "maxe: shape mismatch", [](double x, double y) { return x >= y ? x : y; },
                [](double x, double y, double g) { return x >= y ? g : 0.0; },
                [](double x, double y, double g) { return x >= y ? 0.0 : g; });
}

Var scale(const Var& a, double s) {
  Tensor out(a.value().shape());
  for (int64_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * s;
  return make_op(std::move(out), {a}, [s](Node& n) {
    Node* pa = n.parents[0].get();
    Tensor& g = pa->grad_buf();
    for (int64_t i = 0; i < n.value.size(); ++i) g[i] += s * n.grad[i];
  });
}

Var add_const(const Var& a, double c) {
  Tensor out(a.value().shape());
  for (int64_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + c;
  return make_op(std::move(out), {a}, [](Node& n) {
    Tensor& g = n.parents[0]->grad_buf();
    for (int64_t i = 0; i < n.value.size(); ++i) g[i] += n.grad[i];
  });
}

Var relu(const Var& a) {
  Tensor out(a.value().shape());
  for (int64_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] > 0 ? a.value()[i] : 0.0;
  return unary(a, std::move(out), [](double x, double, double g) { return x > 0 ? g : 0.0; });
}

Var sigmoid(const Var& a) {
  Tensor out(a.value().shape());
  for (int64_t i = 0; i < out.size(); ++i) {
    const double x = a.value()[i];
    out[i] = x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
  }
  return unary(a, std::move(out), [](double, double y, double g) { return g * y * (1.0 - y); });
}

Var vexp(const Var& a) {
  Tensor out(a.value().shape());
  for (int64_t i = 0; i < out.size(); ++i) out[i] = std::exp(a.value()[i]);
  return unary(a, std::move(out), [](double, double y, double g) { return g * y; });
}

Var vlog(const Var& a) {
  Tensor out(a.value().shape());
  for (int64_t i = 0; i < out.size(); ++i) out[i] = std::log(a.value()[i]);
  return unary(a, std::move(out), [](double x, double, double g) { return g / x; });
}

Var vabs(const Var& a) {
  Tensor out(a.value().shape());
  for (int64_t i = 0; i < out.size(); ++i) out[i] = std::fabs(a.value()[i]);
  return unary(a, std::move(out),
               [](double x, double, double g) { return x > 0 ? g : (x < 0 ? -g : 0.0); });
}

Var vsin(const Var& a) {
  Tensor out(a.value().shape());
  for (int64_t i = 0; i < out.size(); ++i) out[i] = std::sin(a.value()[i]);
  return unary(a, std::move(out), [](double x, double, double g) { return g * std::cos(x); });
}

Var vcos(const Var& a) {
  Tensor out(a.value().shape());
  for (int64_t i = 0; i < out.size(); ++i) out[i] = std::cos(a.value()[i]);
  return unary(a, std::move(out), [](double x, double, double g) { return -g * std::sin(x); });
}

Var softplus(const Var& a) {
  Tensor out(a.value().shape());
  for (int64_t i = 0; i < out.size(); ++i) {
    const double x = a.value()[i];
    out[i] = std::max(x, 0.0) + std::log1p(std::exp(-std::fabs(x)));
  }
  return unary(a, std::move(out), [](double x, double, double g) {
    const double s = x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
    return g * s;
  });
}

Var vpow(const Var& a, double p) {
  Tensor out(a.value().shape());
  for (int64_t i = 0; i < out.size(); ++i) out[i] = std::pow(a.value()[i], p);
  return unary(a, std::move(out), [p](double x, double, double g) {
    return x == 0.0 && p < 1.0 ? 0.0 : g * p * std::pow(x, p - 1.0);
  });
}

Var clamp(const Var& a, double lo, double hi) {
  Tensor out(a.value().shape());
  for (int64_t i = 0; i < out.size(); ++i) out[i] = std::min(hi, std::max(lo, a.value()[i]));
  return unary(a, std::move(out), [lo, hi](double x, double, double g) {
    return (x >= lo && x <= hi) ? g : 0.0;
  });
}

Var logit(const Var& a, double eps) {
  Tensor out(a.value().shape());
  for (int64_t i = 0; i < out.size(); ++i) {
    const double x = std::min(1.0 - eps, std::max(eps, a.value()[i]));
    out[i] = std::log(x / (1.0 - x));
  }
  return unary(a, std::move(out), [eps](double x, double, double g) {
    if (x <= eps || x >= 1.0 - eps) return 0.0;
    return g / (x * (1.0 - x));
  });
}

// ---------------- broadcast ----------------

Var add_rows(const Var& a, const Var& row) {
  check(a.value().ndim() == 2 && row.value().size() == a.value().cols(), "add_rows: shape mismatch");
  const int M = a.value().rows(), N = a.value().cols();
  Tensor out(a.value().shape());
  for (int i = 0; i < M; ++i)
    for (int j = 0; j < N; ++j) out.at(i, j) = a.value().at(i, j) + row.value()[j];
  return make_op(std::move(out), {a, row}, [M, N](Node& n) {
    Node* pa = n.parents[0].get();
    Node* pr = n.parents[1].get();
    if (pa->requires_grad) {
      Tensor& g = pa->grad_buf();
      for (int64_t i = 0; i < n.value.size(); ++i) g[i] += n.grad[i];
    }
    if (pr->requires_grad) {
      Tensor& g = pr->grad_buf();
      for (int i = 0; i < M; ++i)
        for (int j = 0; j < N; ++j) g[j] += n.grad.at(i, j);
    }
  });
}

Var mul_rows(const Var& a, const Var& row) {
  check(a.value().ndim() == 2 && row.value().size() == a.value().cols(), "mul_rows: shape mismatch");
  const int M = a.value().rows(), N = a.value().cols();
  Tensor out(a.value().shape());
  for (int i = 0; i < M; ++i)
    for (int j = 0; j < N; ++j) out.at(i, j) = a.value().at(i, j) * row.value()[j];
  return make_op(std::move(out), {a, row}, [M, N](Node& n) {
    Node* pa = n.parents[0].get();
    Node* pr = n.parents[1].get();
    if (pa->requires_grad) {
      Tensor& g = pa->grad_buf();
      for (int i = 0; i < M; ++i)
        for (int j = 0; j < N; ++j) g.at(i, j) += n.grad.at(i, j) * pr->value[j];
    }
    if (pr->requires_grad) {
      Tensor& g = pr->grad_buf();
      for (int i = 0; i < M; ++i)
        for (int j = 0; j < N; ++j) g[j] += n.grad.at(i, j) * pa->value.at(i, j);
    }
  });
}

Var repeat_row(const Var& row, int n) {
  check(row.value().ndim() <= 2 && (row.value().ndim() == 1 || row.value().rows() == 1),
        "repeat_row: expects a single row");
  const int N = int(row.value().size());
  Tensor out({n, N});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < N; ++j) out.at(i, j) = row.value()[j];
  return make_op(std::move(out), {row}, [n, N](Node& nd) {
    Tensor& g = nd.parents[0]->grad_buf();
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < N; ++j) g[j] += nd.grad.at(i, j);
  });
}

// ---------------- matrix ----------------

Var matmul(const Var& a, const Var& b) {
  check(a.value().ndim() == 2 && b.value().ndim() == 2 && a.value().cols() == b.value().rows(),
        "matmul: shape mismatch");
  const int M = a.value().rows(), K = a.value().cols(), N = b.value().cols();
  Tensor out({M, N});
  mm_nn(a.value().data(), b.value().data(), out.data(), M, K, N);
  return make_op(std::move(out), {a, b}, [M, K, N](Node& n) {
    Node* pa = n.parents[0].get();
    Node* pb = n.parents[1].get();
    if (pa->requires_grad) mm_nt(n.grad.data(), pb->value.data(), pa->grad_buf().data(), M, N, K);
    if (pb->requires_grad) mm_tn(pa->value.data(), n.grad.data(), pb->grad_buf().data(), M, K, N);
  });
}

Var transpose(const Var& a) {
  check(a.value().ndim() == 2, "transpose: expects 2-D");
  const int M = a.value().rows(), N = a.value().cols();
  Tensor out({N, M});
  for (int i = 0; i < M; ++i)
    for (int j = 0; j < N; ++j) out.at(j, i) = a.value().at(i, j);
  return make_op(std::move(out), {a}, [M, N](Node& n) {
    Tensor& g = n.parents[0]->grad_buf();
    for (int i = 0; i < M; ++i)
      for (int j = 0; j < N; ++j) g.at(i, j) += n.grad.at(j, i);
  });
}

// ---------------- reductions ----------------

Var sum(const Var& a) {
  double s = 0.0;
  for (int64_t i = 0; i < a.value().size(); ++i) s += a.value()[i];
  return make_op(Tensor::scalar(s), {a}, [](Node& n) {
    Tensor& g = n.parents[0]->grad_buf();
    for (int64_t i = 0; i < g.size(); ++i) g[i] += n.grad[0];
  });
}

Var mean(const Var& a) {
  const double inv = 1.0 / double(a.value().size());
  double s = 0.0;
  for (int64_t i = 0; i < a.value().size(); ++i) s += a.value()[i];
  return make_op(Tensor::scalar(s * inv), {a}, [inv](Node& n) {
    Tensor& g = n.parents[0]->grad_buf();
    for (int64_t i = 0; i < g.size(); ++i) g[i] += n.grad[0] * inv;
  });
}

Var softmax_rows(const Var& a) {
  check(a.value().ndim() == 2, "softmax_rows: expects 2-D");
  const int M = a.value().rows(), N = a.value().cols();
  Tensor out({M, N});
  for (int i = 0; i < M; ++i) {
    double mx = a.value().at(i, 0);
    for (int j = 1; j < N; ++j) mx = std::max(mx, a.value().at(i, j));
    double z = 0.0;
    for (int j = 0; j < N; ++j) z += (out.at(i, j) = std::exp(a.value().at(i, j) - mx));
    for (int j = 0; j < N; ++j) out.at(i, j) /= z;
  }
  return make_op(std::move(out), {a}, [M, N](Node& n) {
    Tensor& g = n.parents[0]->grad_buf();
    for (int i = 0; i < M; ++i) {
      double dot = 0.0;
      for (int j = 0; j < N; ++j) dot += n.grad.at(i, j) * n.value.at(i, j);
      for (int j = 0; j < N; ++j) g.at(i, j) += n.value.at(i, j) * (n.grad.at(i, j) - dot);
    }
  });
}

Var logsumexp_rows(const Var& a) {
  check(a.value().ndim() == 2, "logsumexp_rows: expects 2-D");
  const int M = a.value().rows(), N = a.value().cols();
  Tensor out({M, 1});
  for (int i = 0; i < M; ++i) {
    double mx = a.value().at(i, 0);
    for (int j = 1; j < N; ++j) mx = std::max(mx, a.value().at(i, j));
    double z = 0.0;
    for (int j = 0; j < N; ++j) z += std::exp(a.value().at(i, j) - mx);
    out[i] = mx + std::log(z);
  }
  return make_op(std::move(out), {a}, [M, N](Node& n) {
    Node* pa = n.parents[0].get();
    Tensor& g = pa->grad_buf();
    for (int i = 0; i < M; ++i)
      for (int j = 0; j < N; ++j)
        g.at(i, j) += n.grad[i] * std::exp(pa->value.at(i, j) - n.value[i]);
  });
}

Var layer_norm_rows(const Var& a, const Var& gamma, const Var& beta, double eps) {
  check(a.value().ndim() == 2, "layer_norm_rows: expects 2-D");
  const int M = a.value().rows(), N = a.value().cols();
  check(gamma.value().size() == N && beta.value().size() == N, "layer_norm_rows: param size");
  Tensor out({M, N});
  Tensor xhat({M, N});
  Tensor istd({M});
  for (int i = 0; i < M; ++i) {
    double mu = 0.0;
    for (int j = 0; j < N; ++j) mu += a.value().at(i, j);
    mu /= N;
    double var = 0.0;
    for (int j = 0; j < N; ++j) {
      const double d = a.value().at(i, j) - mu;
      var += d * d;
    }
    var /= N;
    const double is = 1.0 / std::sqrt(var + eps);
    istd[i] = is;
    for (int j = 0; j < N; ++j) {
      xhat.at(i, j) = (a.value().at(i, j) - mu) * is;
      out.at(i, j) = gamma.value()[j] * xhat.at(i, j) + beta.value()[j];
    }
  }
  return make_op(std::move(out), {a, gamma, beta},
                 [M, N, xhat = std::move(xhat), istd = std::move(istd)](Node& n) {
                   Node* pa = n.parents[0].get();
                   Node* pg = n.parents[1].get();
                   Node* pb = n.parents[2].get();
                   if (pg->requires_grad) {
                     Tensor& g = pg->grad_buf();
                     for (int i = 0; i < M; ++i)
                       for (int j = 0; j < N; ++j) g[j] += n.grad.at(i, j) * xhat.at(i, j);
                   }
                   if (pb->requires_grad) {
                     Tensor& g = pb->grad_buf();
                     for (int i = 0; i < M; ++i)
                       for (int j = 0; j < N; ++j) g[j] += n.grad.at(i, j);
                   }
                   if (pa->requires_grad) {
                     Tensor& g = pa->grad_buf();
                     for (int i = 0; i < M; ++i) {
                       double m1 = 0.0, m2 = 0.0;
                       for (int j = 0; j < N; ++j) {
                         const double dxh = n.grad.at(i, j) * pg->value[j];
                         m1 += dxh;
                         m2 += dxh * xhat.at(i, j);
                       }
                       m1 /= N;
                       m2 /= N;
                       for (int j = 0; j < N; ++j) {
                         const double dxh = n.grad.at(i, j) * pg->value[j];
                         g.at(i, j) += istd[i] * (dxh - m1 - xhat.at(i, j) * m2);
                       }
                     }
                   }
                 });
}

Var l2_normalize_rows(const Var& a, double eps) {
  check(a.value().ndim() == 2, "l2_normalize_rows: expects 2-D");
  const int M = a.value().rows(), N = a.value().cols();
  Tensor out({M, N});
  Tensor inv({M});
  for (int i = 0; i < M; ++i) {
    double s = eps;
    for (int j = 0; j < N; ++j) s += a.value().at(i, j) * a.value().at(i, j);
    inv[i] = 1.0 / std::sqrt(s);
    for (int j = 0; j < N; ++j) out.at(i, j) = a.value().at(i, j) * inv[i];
  }
  return make_op(std::move(out), {a}, [M, N, inv = std::move(inv)](Node& n) {
    Tensor& g = n.parents[0]->grad_buf();
    for (int i = 0; i < M; ++i) {
      double dot = 0.0;
      for (int j = 0; j < N; ++j) dot += n.grad.at(i, j) * n.value.at(i, j);
      for (int j = 0; j < N; ++j) g.at(i, j) += inv[i] * (n.grad.at(i, j) - n.value.at(i, j) * dot);
    }
  });
}

// ---------------- structure ----------------

Var slice_rows(const Var& a, int r0, int r1) {
  check(a.value().ndim() == 2 && 0 <= r0 && r0 < r1 && r1 <= a.value().rows(), "slice_rows: bad range");
  const int N = a.value().cols();
  Tensor out({r1 - r0, N});
  for (int i = r0; i < r1; ++i)
    for (int j = 0; j < N; ++j) out.at(i - r0, j) = a.value().at(i, j);
  return make_op(std::move(out), {a}, [r0, r1, N](Node& n) {
    Tensor& g = n.parents[0]->grad_buf();
    for (int i = r0; i < r1; ++i)
      for (int j = 0; j < N; ++j) g.at(i, j) += n.grad.at(i - r0, j);
  });
}

Var slice_cols(const Var& a, int c0, int c1) {
  check(a.value().ndim() == 2 && 0 <= c0 && c0 < c1 && c1 <= a.value().cols(), "slice_cols: bad range");
  const int M = a.value().rows();
  Tensor out({M, c1 - c0});
  for (int i = 0; i < M; ++i)
    for (int j = c0; j < c1; ++j) out.at(i, j - c0) = a.value().at(i, j);
  return make_op(std::move(out), {a}, [M, c0, c1](Node& n) {
    Tensor& g = n.parents[0]->grad_buf();
    for (int i = 0; i < M; ++i)
      for (int j = c0; j < c1; ++j) g.at(i, j) += n.grad.at(i, j - c0);
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  check(!parts.empty(), "concat_rows: empty");
  const int N = parts[0].value().cols();
  int M = 0;
  for (auto& p : parts) {
    check(p.value().ndim() == 2 && p.value().cols() == N, "concat_rows: col mismatch");
    M += p.value().rows();
  }
  Tensor out({M, N});
  int r = 0;
  for (auto& p : parts) {
    for (int i = 0; i < p.value().rows(); ++i, ++r)
      for (int j = 0; j < N; ++j) out.at(r, j) = p.value().at(i, j);
  }
  return make_op(std::move(out), parts, [N](Node& n) {
    int r = 0;
    for (auto& pp : n.parents) {
      const int pr = pp->value.rows();
      if (pp->requires_grad) {
        Tensor& g = pp->grad_buf();
        for (int i = 0; i < pr; ++i)
          for (int j = 0; j < N; ++j) g.at(i, j) += n.grad.at(r + i, j);
      }
      r += pr;
    }
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  check(!parts.empty(), "concat_cols: empty");
  const int M = parts[0].value().rows();
  int N = 0;
  for (auto& p : parts) {
    check(p.value().ndim() == 2 && p.value().rows() == M, "concat_cols: row mismatch");
    N += p.value().cols();
  }
  Tensor out({M, N});
  int c = 0;
  for (auto& p : parts) {
    for (int i = 0; i < M; ++i)
      for (int j = 0; j < p.value().cols(); ++j) out.at(i, c + j) = p.value().at(i, j);
    c += p.value().cols();
  }
  return make_op(std::move(out), parts, [M](Node& n) {
    int c = 0;
    for (auto& pp : n.parents) {
      const int pc = pp->value.cols();
      if (pp->requires_grad) {
        Tensor& g = pp->grad_buf();
        for (int i = 0; i < M; ++i)
          for (int j = 0; j < pc; ++j) g.at(i, j) += n.grad.at(i, c + j);
      }
      c += pc;
    }
  });
}

Var reshape(const Var& a, std::vector<int> shape) {
  check(Tensor::count(shape) == a.value().size(), "reshape: size mismatch");
  Tensor out = a.value();
  out = Tensor::from(shape, std::vector<double>(out.data(), out.data() + out.size()));
  return make_op(std::move(out), {a}, [](Node& n) {
    Tensor& g = n.parents[0]->grad_buf();
    for (int64_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
  });
}

Var detach(const Var& a) { return constant(a.value()); }

// ---------------- lookup ----------------

Var embedding(const Var& table, const std::vector<int>& ids) {
  check(table.value().ndim() == 2, "embedding: table must be 2-D");
  const int V = table.value().rows(), C = table.value().cols();
  for (int id : ids) check(id >= 0 && id < V, "embedding: id out of range");
  Tensor out({int(ids.size()), C});
  for (size_t i = 0; i < ids.size(); ++i)
    for (int j = 0; j < C; ++j) out.at(int(i), j) = table.value().at(ids[i], j);
  return make_op(std::move(out), {table}, [ids, C](Node& n) {
    Tensor& g = n.parents[0]->grad_buf();
    for (size_t i = 0; i < ids.size(); ++i)
      for (int j = 0; j < C; ++j) g.at(ids[i], j) += n.grad.at(int(i), j);
  });
}

// ---------------- image ops ----------------

Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
  check(x.value().ndim() == 3 && w.value().ndim() == 4, "conv2d: expects x[C,H,W], w[O,C,k,k]");
  const int CI = x.value().dim(0), H = x.value().dim(1), W = x.value().dim(2);
  const int CO = w.value().dim(0), KH = w.value().dim(2), KW = w.value().dim(3);
  check(w.value().dim(1) == CI, "conv2d: channel mismatch");
  check(b.value().size() == CO, "conv2d: bias size");
  const int OH = (H + 2 * pad - KH) / stride + 1;
  const int OW = (W + 2 * pad - KW) / stride + 1;
  check(OH > 0 && OW > 0, "conv2d: empty output");
  Tensor out({CO, OH, OW});
  const double* xp = x.value().data();
  const double* wp = w.value().data();
  for (int co = 0; co < CO; ++co)
    for (int oy = 0; oy < OH; ++oy)
      for (int ox = 0; ox < OW; ++ox) {
        double acc = b.value()[co];
        for (int ci = 0; ci < CI; ++ci)
          for (int ky = 0; ky < KH; ++ky) {
            const int iy = oy * stride + ky - pad;
            if (iy < 0 || iy >= H) continue;
            for (int kx = 0; kx < KW; ++kx) {
              const int ix = ox * stride + kx - pad;
              if (ix < 0 || ix >= W) continue;
              acc += xp[(int64_t(ci) * H + iy) * W + ix] * wp[((int64_t(co) * CI + ci) * KH + ky) * KW + kx];
            }
          }
        out[(int64_t(co) * OH + oy) * OW + ox] = acc;
      }
  return make_op(std::move(out), {x, w, b}, [=](Node& n) {
    Node* px = n.parents[0].get();
    Node* pw = n.parents[1].get();
    Node* pb = n.parents[2].get();
    double* gx = px->requires_grad ? px->grad_buf().data() : nullptr;
    double* gw = pw->requires_grad ? pw->grad_buf().data() : nullptr;
    double* gb = pb->requires_grad ? pb->grad_buf().data() : nullptr;
    const double* xv = px->value.data();
    const double* wv = pw->value.data();
    for (int co = 0; co < CO; ++co)
      for (int oy = 0; oy < OH; ++oy)
        for (int ox = 0; ox < OW; ++ox) {
          const double g = n.grad[(int64_t(co) * OH + oy) * OW + ox];
          if (g == 0.0) continue;
          if (gb) gb[co] += g;
          for (int ci = 0; ci < CI; ++ci)
            for (int ky = 0; ky < KH; ++ky) {
              const int iy = oy * stride + ky - pad;
              if (iy < 0 || iy >= H) continue;
              for (int kx = 0; kx < KW; ++kx) {
                const int ix = ox * stride + kx - pad;
                if (ix < 0 || ix >= W) continue;
                const int64_t xi = (int64_t(ci) * H + iy) * W + ix;
                const int64_t wi = ((int64_t(co) * CI + ci) * KH + ky) * KW + kx;
                if (gw) gw[wi] += g * xv[xi];
                if (gx) gx[xi] += g * wv[wi];
              }
            }
        }
  });
}

Var upsample2x_nearest(const Var& x) {
  check(x.value().ndim() == 3, "upsample2x_nearest: expects [C,H,W]");
  const int C = x.value().dim(0), H = x.value().dim(1), W = x.value().dim(2);
  Tensor out({C, H * 2, W * 2});
  for (int c = 0; c < C; ++c)
    for (int y = 0; y < 2 * H; ++y)
      for (int xx = 0; xx < 2 * W; ++xx)
        out[(int64_t(c) * 2 * H + y) * 2 * W + xx] = x.value()[(int64_t(c) * H + y / 2) * W + xx / 2];
  return make_op(std::move(out), {x}, [C, H, W](Node& n) {
    Tensor& g = n.parents[0]->grad_buf();
    for (int c = 0; c < C; ++c)
      for (int y = 0; y < 2 * H; ++y)
        for (int xx = 0; xx < 2 * W; ++xx)
          g[(int64_t(c) * H + y / 2) * W + xx / 2] += n.grad[(int64_t(c) * 2 * H + y) * 2 * W + xx];
  });
}

Var upsample_bilinear(const Var& x, int factor) {
  check(x.value().ndim() == 3 && factor >= 1, "upsample_bilinear: expects [C,H,W]");
  const int C = x.value().dim(0), H = x.value().dim(1), W = x.value().dim(2);
  const int OH = H * factor, OW = W * factor;
  // Precompute the source taps (align_corners=false convention).
  struct Tap {
    int i0, i1;
    double w0, w1;
  };
  std::vector<Tap> ty(OH), tx(OW);
  auto make_tap = [&](int o, int in, int f) {
    const double s = (o + 0.5) / f - 0.5;
    int i0 = int(std::floor(s));
    const double w1 = s - i0;
    Tap t;
    t.i0 = std::min(in - 1, std::max(0, i0));
    t.i1 = std::min(in - 1, std::max(0, i0 + 1));
    t.w0 = 1.0 - w1;
    t.w1 = w1;
    return t;
  };
  for (int y = 0; y < OH; ++y) ty[y] = make_tap(y, H, factor);
  for (int xx = 0; xx < OW; ++xx) tx[xx] = make_tap(xx, W, factor);
  Tensor out({C, OH, OW});
  for (int c = 0; c < C; ++c)
    for (int y = 0; y < OH; ++y)
      for (int xx = 0; xx < OW; ++xx) {
        const Tap& a = ty[y];
        const Tap& b = tx[xx];
        const double* base = x.value().data() + int64_t(c) * H * W;
        out[(int64_t(c) * OH + y) * OW + xx] = a.w0 * (b.w0 * base[a.i0 * W + b.i0] + b.w1 * base[a.i0 * W + b.i1]) +
                                               a.w1 * (b.w0 * base[a.i1 * W + b.i0] + b.w1 * base[a.i1 * W + b.i1]);
      }
  return make_op(std::move(out), {x}, [C, H, W, OH, OW, ty, tx](Node& n) {
    Tensor& g = n.parents[0]->grad_buf();
    for (int c = 0; c < C; ++c)
      for (int y = 0; y < OH; ++y)
        for (int xx = 0; xx < OW; ++xx) {
          const auto& a = ty[y];
          const auto& b = tx[xx];
          const double go = n.grad[(int64_t(c) * OH + y) * OW + xx];
          double* base = g.data() + int64_t(c) * H * W;
          base[a.i0 * W + b.i0] += go * a.w0 * b.w0;
          base[a.i0 * W + b.i1] += go * a.w0 * b.w1;
          base[a.i1 * W + b.i0] += go * a.w1 * b.w0;
          base[a.i1 * W + b.i1] += go * a.w1 * b.w1;
        }
  });
}

Var chw_to_rows(const Var& x) {
  check(x.value().ndim() == 3, "chw_to_rows: expects [C,H,W]");
  const int C = x.value().dim(0), H = x.value().dim(1), W = x.value().dim(2);
  Tensor out({H * W, C});
  for (int c = 0; c < C; ++c)
    for (int p = 0; p < H * W; ++p) out.at(p, c) = x.value()[int64_t(c) * H * W + p];
  return make_op(std::move(out), {x}, [C, H, W](Node& n) {
    Tensor& g = n.parents[0]->grad_buf();
    for (int c = 0; c < C; ++c)
      for (int p = 0; p < H * W; ++p) g[int64_t(c) * H * W + p] += n.grad.at(p, c);
  });
}

Var rows_to_chw(const Var& a, int c, int h, int w) {
  check(a.value().ndim() == 2 && a.value().rows() == h * w && a.value().cols() == c,
        "rows_to_chw: shape mismatch");
  Tensor out({c, h, w});
  for (int ci = 0; ci < c; ++ci)
    for (int p = 0; p < h * w; ++p) out[int64_t(ci) * h * w + p] = a.value().at(p, ci);
  return make_op(std::move(out), {a}, [c, h, w](Node& n) {
    Tensor& g = n.parents[0]->grad_buf();
    for (int ci = 0; ci < c; ++ci)
      for (int p = 0; p < h * w; ++p) g.at(p, ci) += n.grad[int64_t(ci) * h * w + p];
  });
}

}  // namespace pcan::nn
