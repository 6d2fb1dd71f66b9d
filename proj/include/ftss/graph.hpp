#pragma once

#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <limits>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ftss/errors.hpp"
#include "ftss/rng.hpp"
#include "ftss/tensor.hpp"

namespace ftss {

template <typename T>
class Graph;

// Handle to a node of a Graph. Only valid while the graph is alive and at a
// stable address.
template <typename T>
struct Var {
  Graph<T>* graph = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const { return graph->value(*this); }
  const Shape& shape() const { return value().shape(); }
};

// Define-by-run computation graph. Nodes are appended in evaluation order, so
// the node index is a topological order and backward() is a single reverse
// sweep. Gradients are kept for every node that requires them, which lets
// callers read gradients of intermediate results (attention maps) as well as
// of leaves.
template <typename T>
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, std::size_t)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var<T> parameter(Tensor<T> value) {
    return push(std::move(value), {}, nullptr, true);
  }

  Var<T> constant(Tensor<T> value) {
    return push(std::move(value), {}, nullptr, false);
  }

  // Appends an op result. The node requires grad iff any parent does; the
  // backward function is dropped otherwise.
  Var<T> record(Tensor<T> value, std::vector<std::size_t> parents,
                BackwardFn backward) {
    bool needs = false;
    for (std::size_t p : parents) needs = needs || nodes_[p].requires_grad;
    if (!needs) backward = nullptr;
    return push(std::move(value), std::move(parents), std::move(backward),
                needs);
  }

  const Tensor<T>& value(Var<T> v) const { return nodes_.at(v.id).value; }
  const Tensor<T>& value(std::size_t id) const { return nodes_[id].value; }

  bool requires_grad(Var<T> v) const { return nodes_.at(v.id).requires_grad; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  // Gradient accumulated at v by the last backward(). Zero if nothing flowed.
  const Tensor<T>& grad(Var<T> v) {
    const Node& n = nodes_.at(v.id);
    if (!n.requires_grad) {
      throw ContractError("gradient requested for node " +
                          std::to_string(v.id) +
                          " which was recorded without grad");
    }
    return grad_buffer(v.id);
  }

  // Accumulator for node id, allocated on first use.
  Tensor<T>& grad_buffer(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty() && n.value.size() != 0) n.grad = Tensor<T>(n.value.shape());
    return n.grad;
  }

  const Tensor<T>& incoming(std::size_t id) const { return nodes_[id].grad; }

  void zero_grad() {
    for (Node& n : nodes_) n.grad = Tensor<T>();
  }

  void backward(Var<T> seed, const Tensor<T>& seed_value) {
    Node& s = nodes_.at(seed.id);
    if (!s.requires_grad) {
      throw ContractError("backward seeded at a node recorded without grad");
    }
    if (seed_value.shape() != s.value.shape()) {
      throw ShapeError("seed shape " + shape_str(seed_value.shape()) +
                       " does not match node shape " +
                       shape_str(s.value.shape()));
    }
    Tensor<T>& g = grad_buffer(seed.id);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += seed_value[i];
    for (std::size_t id = seed.id + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (n.backward && !n.grad.empty()) n.backward(*this, id);
    }
  }

  // Seeds with ones (the usual case for a scalar loss).
  void backward(Var<T> seed) {
    backward(seed, Tensor<T>(value(seed).shape(), T{1}));
  }

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    std::vector<std::size_t> parents;
    BackwardFn backward;
    bool requires_grad = false;
  };

  Var<T> push(Tensor<T> value, std::vector<std::size_t> parents,
              BackwardFn backward, bool requires_grad) {
    nodes_.push_back(Node{std::move(value), Tensor<T>(), std::move(parents),
                          std::move(backward), requires_grad});
    return Var<T>{this, nodes_.size() - 1};
  }

  std::deque<Node> nodes_;  // stable references across push_back
};

namespace detail {

// Fixed-order kernels: every output element accumulates over the inner index
// sequentially, so a row's result never depends on its position in the
// matrix. Narrow outputs (few columns) are computed transposed so the inner
// loop stays long.

inline constexpr std::size_t kNarrow = 16;

template <typename T>
std::vector<T>& scratch(int slot) {
  thread_local std::vector<T> bufs[2];
  return bufs[slot];
}

// C(m x n) += A(m x k) * B(k x n), inner index visited in `order` if given.
template <typename T>
void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b,
             T* c, std::span<const std::size_t> order = {}) {
  if (n >= kNarrow || m < kNarrow) {
    for (std::size_t i = 0; i < m; ++i) {
      T* crow = c + i * n;
      for (std::size_t kk = 0; kk < k; ++kk) {
        const std::size_t p = order.empty() ? kk : order[kk];
        const T av = a[i * k + p];
        const T* brow = b + p * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
    return;
  }
  auto& at = scratch<T>(0);
  at.resize(k * m);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) at[p * m + i] = a[i * k + p];
  auto& ct = scratch<T>(1);
  ct.assign(n * m, T{0});
  for (std::size_t j = 0; j < n; ++j) {
    T* crow = ct.data() + j * m;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const std::size_t p = order.empty() ? kk : order[kk];
      const T bv = b[p * n + j];
      const T* arow = at.data() + p * m;
      for (std::size_t i = 0; i < m; ++i) crow[i] += bv * arow[i];
    }
  }
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) c[i * n + j] += ct[j * m + i];
}

// C(m x n) += A(m x k) * B(n x k)^T
template <typename T>
void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c) {
  auto& bt = scratch<T>(0);
  bt.resize(k * n);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = b[j * k + p];
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a[i * k + p];
      const T* brow = bt.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C(k x n) += A(m x k)^T * B(m x n)
template <typename T>
void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c) {
  if (n >= kNarrow || k < kNarrow) {
    for (std::size_t i = 0; i < m; ++i) {
      const T* brow = b + i * n;
      for (std::size_t p = 0; p < k; ++p) {
        const T av = a[i * k + p];
        T* crow = c + p * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
    return;
  }
  auto& ct = scratch<T>(1);
  ct.assign(n * k, T{0});
  for (std::size_t j = 0; j < n; ++j) {
    T* crow = ct.data() + j * k;
    for (std::size_t i = 0; i < m; ++i) {
      const T bv = b[i * n + j];
      const T* arow = a + i * k;
      for (std::size_t p = 0; p < k; ++p) crow[p] += bv * arow[p];
    }
  }
  for (std::size_t p = 0; p < k; ++p)
    for (std::size_t j = 0; j < n; ++j) c[p * n + j] += ct[j * k + p];
}

template <typename T>
void require_matrix(const Tensor<T>& t, const char* op) {
  if (t.rank() != 2) {
    throw ShapeError(std::string(op) + " expects a matrix, got " +
                     shape_str(t.shape()));
  }
}

template <typename T>
void require_same(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " +
                     shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

inline double normal_cdf(double x) {
  return 0.5 * (1.0 + std::erf(x / std::sqrt(2.0)));
}

inline double normal_pdf(double x) {
  constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  return kInvSqrt2Pi * std::exp(-0.5 * x * x);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Differentiable ops. Every op records one node on the graph of its inputs.

// a * b. If `inner_order` is given, the shared index is summed in that
// order (a permutation of 0..k-1).
template <typename T>
Var<T> matmul(Var<T> a, Var<T> b, std::span<const std::size_t> inner_order = {}) {
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  detail::require_matrix(av, "matmul");
  detail::require_matrix(bv, "matmul");
  if (av.cols() != bv.rows()) {
    throw ShapeError("matmul: inner dimensions differ, " +
                     shape_str(av.shape()) + " x " + shape_str(bv.shape()));
  }
  if (!inner_order.empty() && inner_order.size() != av.cols()) {
    throw ShapeError("matmul: inner order has wrong length");
  }
  const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
  Tensor<T> out({m, n});
  detail::gemm_nn(m, k, n, av.data().data(), bv.data().data(), out.data().data(), inner_order);
  const std::size_t ia = a.id, ib = b.id;
  return a.graph->record(std::move(out), {ia, ib}, [ia, ib, m, k, n](Graph<T>& g, std::size_t self) {
    const T* dc = g.incoming(self).data().data();
    if (g.requires_grad(ia)) {
      detail::gemm_nt(m, n, k, dc, g.value(ib).data().data(), g.grad_buffer(ia).data().data());
    }
    if (g.requires_grad(ib)) {
      detail::gemm_tn(m, k, n, g.value(ia).data().data(), dc, g.grad_buffer(ib).data().data());
    }
  });
}

// alpha * a * b^T without materializing the transpose.
template <typename T>
Var<T> matmul_nt(Var<T> a, Var<T> b, T alpha = T{1}) {
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  detail::require_matrix(av, "matmul_nt");
  detail::require_matrix(bv, "matmul_nt");
  if (av.cols() != bv.cols()) {
    throw ShapeError("matmul_nt: inner dimensions differ, " +
                     shape_str(av.shape()) + " x " + shape_str(bv.shape()) +
                     "^T");
  }
  const std::size_t m = av.rows(), k = av.cols(), n = bv.rows();
  Tensor<T> out({m, n});
  detail::gemm_nt(m, k, n, av.data().data(), bv.data().data(), out.data().data());
  if (alpha != T{1})
    for (auto& v : out.data()) v *= alpha;
  const std::size_t ia = a.id, ib = b.id;
  return a.graph->record(std::move(out), {ia, ib}, [ia, ib, m, k, n, alpha](Graph<T>& g, std::size_t self) {
    const T* dc = g.incoming(self).data().data();
    std::vector<T> scaled;
    if (alpha != T{1}) {
      scaled.assign(dc, dc + m * n);
      for (auto& v : scaled) v *= alpha;
      dc = scaled.data();
    }
    if (g.requires_grad(ia)) {
      detail::gemm_nn(m, n, k, dc, g.value(ib).data().data(), g.grad_buffer(ia).data().data());
    }
    if (g.requires_grad(ib)) {
      detail::gemm_tn(m, n, k, dc, g.value(ia).data().data(), g.grad_buffer(ib).data().data());
    }
  });
}

template <typename T>
Var<T> transpose(Var<T> a) {
  const Tensor<T>& av = a.value();
  detail::require_matrix(av, "transpose");
  const std::size_t m = av.rows(), n = av.cols();
  Tensor<T> out({n, m});
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < n; ++c) out[c * m + r] = av[r * n + c];
  const std::size_t ia = a.id;
  return a.graph->record(std::move(out), {ia}, [ia, m, n](Graph<T>& g, std::size_t self) {
    const auto& d = g.incoming(self);
    auto& ga = g.grad_buffer(ia);
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t c = 0; c < n; ++c) ga[r * n + c] += d[c * m + r];
  });
}

template <typename T>
Var<T> identity(Var<T> a) {
  const std::size_t ia = a.id;
  return a.graph->record(a.value(), {ia}, [ia](Graph<T>& g, std::size_t self) {
    const auto& d = g.incoming(self);
    auto& ga = g.grad_buffer(ia);
    for (std::size_t i = 0; i < d.size(); ++i) ga[i] += d[i];
  });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  detail::require_same(a.value(), b.value(), "add");
  Tensor<T> out = a.value();
  const Tensor<T>& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  const std::size_t ia = a.id, ib = b.id;
  return a.graph->record(std::move(out), {ia, ib}, [ia, ib](Graph<T>& g, std::size_t self) {
    const auto& d = g.incoming(self);
    for (std::size_t p : {ia, ib}) {
      if (!g.requires_grad(p)) continue;
      auto& gp = g.grad_buffer(p);
      for (std::size_t i = 0; i < d.size(); ++i) gp[i] += d[i];
    }
  });
}

// Elementwise product.
template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  detail::require_same(a.value(), b.value(), "mul");
  Tensor<T> out = a.value();
  const Tensor<T>& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const std::size_t ia = a.id, ib = b.id;
  return a.graph->record(std::move(out), {ia, ib}, [ia, ib](Graph<T>& g, std::size_t self) {
    const auto& d = g.incoming(self);
    if (g.requires_grad(ia)) {
      auto& ga = g.grad_buffer(ia);
      const auto& bv = g.value(ib);
      for (std::size_t i = 0; i < d.size(); ++i) ga[i] += d[i] * bv[i];
    }
    if (g.requires_grad(ib)) {
      auto& gb = g.grad_buffer(ib);
      const auto& av = g.value(ia);
      for (std::size_t i = 0; i < d.size(); ++i) gb[i] += d[i] * av[i];
    }
  });
}

template <typename T>
Var<T> scale(Var<T> a, T s) {
  Tensor<T> out = a.value();
  for (auto& v : out.data()) v *= s;
  const std::size_t ia = a.id;
  return a.graph->record(std::move(out), {ia}, [ia, s](Graph<T>& g, std::size_t self) {
    const auto& d = g.incoming(self);
    auto& ga = g.grad_buffer(ia);
    for (std::size_t i = 0; i < d.size(); ++i) ga[i] += s * d[i];
  });
}

// Adds a length-n bias to every row of an m x n matrix.
template <typename T>
Var<T> add_bias(Var<T> a, Var<T> bias) {
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = bias.value();
  detail::require_matrix(av, "add_bias");
  if (bv.size() != av.cols()) {
    throw ShapeError("add_bias: bias " + shape_str(bv.shape()) +
                     " does not match columns of " + shape_str(av.shape()));
  }
  Tensor<T> out = av;
  const std::size_t m = av.rows(), n = av.cols();
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] += bv[c];
  const std::size_t ia = a.id, ib = bias.id;
  return a.graph->record(std::move(out), {ia, ib}, [ia, ib, m, n](Graph<T>& g, std::size_t self) {
    const auto& d = g.incoming(self);
    if (g.requires_grad(ia)) {
      auto& ga = g.grad_buffer(ia);
      for (std::size_t i = 0; i < d.size(); ++i) ga[i] += d[i];
    }
    if (g.requires_grad(ib)) {
      auto& gb = g.grad_buffer(ib);
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < n; ++c) gb[c] += d[r * n + c];
    }
  });
}

// x * W + b for x: m x k, W: k x n, b: n.
template <typename T>
Var<T> linear(Var<T> x, Var<T> weight, Var<T> bias) {
  return add_bias(matmul(x, weight), bias);
}

// Sum of all elements, as a shape {1} tensor.
template <typename T>
Var<T> sum(Var<T> a) {
  T total{0};
  for (T v : a.value().data()) total += v;
  const std::size_t ia = a.id;
  return a.graph->record(Tensor<T>({1}, total), {ia}, [ia](Graph<T>& g, std::size_t self) {
    const T d = g.incoming(self)[0];
    for (auto& v : g.grad_buffer(ia).data()) v += d;
  });
}

// Softmax along `axis`. The slice maximum is subtracted before exponentiation.
// If `sum_order` is given the normalizer is accumulated in that order.
template <typename T>
Var<T> softmax(Var<T> x, std::size_t axis, std::span<const std::size_t> sum_order = {}) {
  const Tensor<T>& xv = x.value();
  if (axis >= xv.rank()) {
    throw ShapeError("softmax: axis " + std::to_string(axis) +
                     " out of range for " + shape_str(xv.shape()));
  }
  if (!sum_order.empty() && sum_order.size() != xv.shape()[axis]) {
    throw ShapeError("softmax: summation order has wrong length");
  }
  const Shape& s = xv.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t n = s[axis];

  Tensor<T> out(s);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      // normalizer in double so 32-bit rows still sum to 1
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t k = 0; k < n; ++k) mx = std::max(mx, xv[base + k * inner]);
      std::vector<double> e(n);
      for (std::size_t k = 0; k < n; ++k) e[k] = double(std::exp(xv[base + k * inner] - mx));
      double total = 0;
      for (std::size_t k = 0; k < n; ++k) total += e[sum_order.empty() ? k : sum_order[k]];
      for (std::size_t k = 0; k < n; ++k) out[base + k * inner] = static_cast<T>(e[k] / total);
    }
  }

  const std::size_t ix = x.id;
  return x.graph->record(std::move(out), {ix}, [ix, outer, inner, n](Graph<T>& g, std::size_t self) {
    const auto& d = g.incoming(self);
    const auto& y = g.value(self);
    auto& gx = g.grad_buffer(ix);
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * n * inner + in;
        T dot{0};
        for (std::size_t k = 0; k < n; ++k) {
          dot += d[base + k * inner] * y[base + k * inner];
        }
        for (std::size_t k = 0; k < n; ++k) {
          const std::size_t i = base + k * inner;
          gx[i] += y[i] * (d[i] - dot);
        }
      }
    }
  });
}

// x * Phi(x) with the exact Gaussian CDF.
template <typename T>
Var<T> gelu(Var<T> x) {
  Tensor<T> out = x.value();
  for (auto& v : out.data()) {
    const double xd = v;
    v = static_cast<T>(xd * detail::normal_cdf(xd));
  }
  const std::size_t ix = x.id;
  return x.graph->record(std::move(out), {ix}, [ix](Graph<T>& g, std::size_t self) {
    const auto& d = g.incoming(self);
    const auto& xv = g.value(ix);
    auto& gx = g.grad_buffer(ix);
    for (std::size_t i = 0; i < d.size(); ++i) {
      const double xd = xv[i];
      const double dydx = detail::normal_cdf(xd) + xd * detail::normal_pdf(xd);
      gx[i] += static_cast<T>(d[i] * dydx);
    }
  });
}

inline constexpr double kLayerNormEps = 1e-5;

// Normalizes each slice along the last axis, then applies gamma, beta.
template <typename T>
Var<T> layernorm(Var<T> x, Var<T> gamma, Var<T> beta, double eps = kLayerNormEps) {
  const Tensor<T>& xv = x.value();
  const std::size_t n = xv.shape().back();
  const std::size_t m = xv.size() / n;
  if (gamma.value().size() != n || beta.value().size() != n) {
    throw ShapeError("layernorm: affine parameters must have " +
                     std::to_string(n) + " elements");
  }
  if (!(eps > 0)) throw ConfigError("layernorm: eps must be positive");
  const auto& gv = gamma.value();
  const auto& bv = beta.value();

  Tensor<T> out(xv.shape());
  auto xhat = std::make_shared<std::vector<T>>(xv.size());
  auto rstd = std::make_shared<std::vector<T>>(m);
  for (std::size_t r = 0; r < m; ++r) {
    const T* row = xv.data().data() + r * n;
    double mean = 0;
    for (std::size_t c = 0; c < n; ++c) mean += row[c];
    mean /= static_cast<double>(n);
    double var = 0;
    for (std::size_t c = 0; c < n; ++c) var += (row[c] - mean) * (row[c] - mean);
    var /= static_cast<double>(n);
    const double rs = 1.0 / std::sqrt(var + eps);
    (*rstd)[r] = static_cast<T>(rs);
    for (std::size_t c = 0; c < n; ++c) {
      const T xh = static_cast<T>((row[c] - mean) * rs);
      (*xhat)[r * n + c] = xh;
      out[r * n + c] = xh * gv[c] + bv[c];
    }
  }

  const std::size_t ix = x.id, ig = gamma.id, ib = beta.id;
  return x.graph->record(
      std::move(out), {ix, ig, ib},
      [ix, ig, ib, m, n, xhat, rstd](Graph<T>& g, std::size_t self) {
        const auto& d = g.incoming(self);
        const auto& gv = g.value(ig);
        if (g.requires_grad(ig) || g.requires_grad(ib)) {
          const bool need_g = g.requires_grad(ig), need_b = g.requires_grad(ib);
          for (std::size_t r = 0; r < m; ++r) {
            for (std::size_t c = 0; c < n; ++c) {
              if (need_g) g.grad_buffer(ig)[c] += d[r * n + c] * (*xhat)[r * n + c];
              if (need_b) g.grad_buffer(ib)[c] += d[r * n + c];
            }
          }
        }
        if (!g.requires_grad(ix)) return;
        auto& gx = g.grad_buffer(ix);
        for (std::size_t r = 0; r < m; ++r) {
          double mean_d = 0, mean_dx = 0;
          for (std::size_t c = 0; c < n; ++c) {
            const double dxh = d[r * n + c] * gv[c];
            mean_d += dxh;
            mean_dx += dxh * (*xhat)[r * n + c];
          }
          mean_d /= static_cast<double>(n);
          mean_dx /= static_cast<double>(n);
          for (std::size_t c = 0; c < n; ++c) {
            const double dxh = d[r * n + c] * gv[c];
            gx[r * n + c] += static_cast<T>(
                (*rstd)[r] * (dxh - mean_d - (*xhat)[r * n + c] * mean_dx));
          }
        }
      });
}

// Inverted dropout. Identity (the same Var) at inference or when p == 0.
// The keep mask is stored in the backward closure and reused for gradients.
template <typename T>
Var<T> dropout(Var<T> x, double p, Rng& rng, bool training) {
  if (!(p >= 0.0 && p < 1.0)) {
    throw ConfigError("dropout rate must be in [0, 1), got " + std::to_string(p));
  }
  if (!training || p == 0.0) return x;
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  auto mask = std::make_shared<std::vector<T>>(x.value().size());
  Tensor<T> out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) {
    (*mask)[i] = uniform01(rng) < p ? T{0} : keep_scale;
    out[i] *= (*mask)[i];
  }
  const std::size_t ix = x.id;
  return x.graph->record(std::move(out), {ix}, [ix, mask](Graph<T>& g, std::size_t self) {
    const auto& d = g.incoming(self);
    auto& gx = g.grad_buffer(ix);
    for (std::size_t i = 0; i < d.size(); ++i) gx[i] += d[i] * (*mask)[i];
  });
}

template <typename T>
Var<T> slice_cols(Var<T> a, std::size_t start, std::size_t count) {
  const Tensor<T>& av = a.value();
  detail::require_matrix(av, "slice_cols");
  const std::size_t m = av.rows(), n = av.cols();
  if (start + count > n) throw ShapeError("slice_cols: range exceeds " + shape_str(av.shape()));
  Tensor<T> out({m, count});
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < count; ++c) out[r * count + c] = av[r * n + start + c];
  const std::size_t ia = a.id;
  return a.graph->record(std::move(out), {ia}, [ia, m, n, start, count](Graph<T>& g, std::size_t self) {
    const auto& d = g.incoming(self);
    auto& ga = g.grad_buffer(ia);
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t c = 0; c < count; ++c) ga[r * n + start + c] += d[r * count + c];
  });
}

template <typename T>
Var<T> slice_rows(Var<T> a, std::size_t start, std::size_t count) {
  const Tensor<T>& av = a.value();
  detail::require_matrix(av, "slice_rows");
  const std::size_t n = av.cols();
  if (start + count > av.rows()) throw ShapeError("slice_rows: range exceeds " + shape_str(av.shape()));
  std::vector<T> data(av.data().begin() + start * n, av.data().begin() + (start + count) * n);
  const std::size_t ia = a.id;
  return a.graph->record(Tensor<T>({count, n}, std::move(data)), {ia},
                         [ia, n, start](Graph<T>& g, std::size_t self) {
                           const auto& d = g.incoming(self);
                           auto& ga = g.grad_buffer(ia);
                           for (std::size_t i = 0; i < d.size(); ++i) ga[start * n + i] += d[i];
                         });
}

template <typename T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t m = parts.front().value().rows();
  std::size_t n = 0;
  std::vector<std::size_t> ids, offsets, widths;
  for (const auto& p : parts) {
    detail::require_matrix(p.value(), "concat_cols");
    if (p.value().rows() != m) throw ShapeError("concat_cols: row counts differ");
    ids.push_back(p.id);
    offsets.push_back(n);
    widths.push_back(p.value().cols());
    n += p.value().cols();
  }
  Tensor<T> out({m, n});
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto& pv = parts[k].value();
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t c = 0; c < widths[k]; ++c) out[r * n + offsets[k] + c] = pv[r * widths[k] + c];
  }
  return parts.front().graph->record(
      std::move(out), ids, [ids, offsets, widths, m, n](Graph<T>& g, std::size_t self) {
        const auto& d = g.incoming(self);
        for (std::size_t k = 0; k < ids.size(); ++k) {
          if (!g.requires_grad(ids[k])) continue;
          auto& gp = g.grad_buffer(ids[k]);
          for (std::size_t r = 0; r < m; ++r)
            for (std::size_t c = 0; c < widths[k]; ++c) gp[r * widths[k] + c] += d[r * n + offsets[k] + c];
        }
      });
}

template <typename T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const std::size_t n = parts.front().value().cols();
  std::vector<std::size_t> ids, offsets;
  std::vector<T> data;
  for (const auto& p : parts) {
    detail::require_matrix(p.value(), "concat_rows");
    if (p.value().cols() != n) throw ShapeError("concat_rows: column counts differ");
    ids.push_back(p.id);
    offsets.push_back(data.size());
    data.insert(data.end(), p.value().data().begin(), p.value().data().end());
  }
  const std::size_t rows = data.size() / n;
  return parts.front().graph->record(
      Tensor<T>({rows, n}, std::move(data)), ids, [ids, offsets](Graph<T>& g, std::size_t self) {
        const auto& d = g.incoming(self);
        for (std::size_t k = 0; k < ids.size(); ++k) {
          if (!g.requires_grad(ids[k])) continue;
          auto& gp = g.grad_buffer(ids[k]);
          for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += d[offsets[k] + i];
        }
      });
}

}  // namespace ftss
