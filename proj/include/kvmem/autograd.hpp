#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "kvmem/error.hpp"
#include "kvmem/tensor.hpp"

namespace kvmem {

/// Handle to a node on a Tape.
struct Var {
  std::size_t id = 0;
};

/// Reverse-mode tape. Nodes are appended in evaluation order, so the node
/// list is always topologically sorted.
///
/// Leaves created with `param`/`input` refer to caller-owned tensors, which
/// must outlive the tape and must not be moved while it is alive.
template <class T>
class Tape {
 public:
  using ForwardFn = std::function<Tensor<T>(const Tape&)>;
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf bound to a parameter. Gradients are accumulated into `t.grad()`
  /// after backward when `t.requires_grad()`.
  Var param(Tensor<T>& t) {
    Node n;
    n.rule = "leaf";
    n.ref = &t;
    n.needs_grad = grad_enabled_ && t.requires_grad();
    if (n.needs_grad) n.sink = &t;
    return push(std::move(n));
  }

  /// Read-only leaf; never receives gradients.
  Var input(const Tensor<T>& t) {
    Node n;
    n.rule = "input";
    n.ref = &t;
    return push(std::move(n));
  }

  /// Leaf owning its value; never receives gradients.
  Var constant(Tensor<T> t) {
    Node n;
    n.rule = "constant";
    n.value = std::move(t);
    return push(std::move(n));
  }

  /// Records a primitive. `fwd` is evaluated immediately and kept for replay.
  Var record(std::string_view rule, std::vector<std::size_t> inputs,
             ForwardFn fwd, BackwardFn bwd) {
    Node n;
    n.rule = rule;
    n.inputs = std::move(inputs);
    for (auto in : n.inputs) n.needs_grad = n.needs_grad || nodes_[in].needs_grad;
    n.value = fwd(*this);
    if (!n.value.all_finite()) {
      throw NonFiniteError("non-finite value produced by '" +
                           std::string(rule) + "'");
    }
    n.forward = std::move(fwd);
    if (n.needs_grad) n.backward = std::move(bwd);
    return push(std::move(n));
  }

  const Tensor<T>& value(Var v) const { return value(v.id); }
  const Tensor<T>& value(std::size_t id) const {
    const Node& n = nodes_.at(id);
    return n.ref ? *n.ref : n.value;
  }

  bool needs_grad(Var v) const { return nodes_.at(v.id).needs_grad; }
  bool needs_grad(std::size_t id) const { return nodes_.at(id).needs_grad; }

  /// Gradient buffer of a node, allocated as zeros on first access. For a
  /// trainable parameter leaf this is the parameter's own grad slot.
  std::span<T> grad(std::size_t id) {
    Node& n = nodes_.at(id);
    if (n.sink) {
      if (!n.sink->has_grad()) n.sink->zero_grad();
      return n.sink->grad();
    }
    if (n.grad.empty()) n.grad.assign(value(id).size(), T(0));
    return n.grad;
  }
  std::span<T> grad(Var v) { return grad(v.id); }

  std::size_t size() const noexcept { return nodes_.size(); }
  std::string_view rule(std::size_t id) const { return nodes_.at(id).rule; }
  const std::vector<std::size_t>& inputs(std::size_t id) const {
    return nodes_.at(id).inputs;
  }

  /// Seeds d(loss)/d(loss) = 1 and propagates to every trainable leaf.
  /// Leaf gradients are added to the parameters' grad slots.
  void backward(Var loss) {
    if (loss.id >= nodes_.size()) {
      throw std::out_of_range("backward: loss is not a node of this tape");
    }
    if (value(loss).size() != 1) {
      throw ShapeError("backward: loss must be scalar, got " +
                       shape_str(value(loss).shape()));
    }
    if (!nodes_[loss.id].needs_grad) return;
    grad(loss.id)[0] = T(1);
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.needs_grad || n.grad.empty() || !n.backward) continue;
      n.backward(*this, i);
      n.grad.clear();
      n.grad.shrink_to_fit();
    }
    for (const Node& n : nodes_) {
      if (!n.sink || !n.sink->has_grad()) continue;
      if (!Tensor<T>::finite_span(n.sink->grad())) {
        throw NonFiniteError("non-finite gradient reaching a parameter");
      }
    }
  }

  /// Re-evaluates every recorded primitive from the current leaf values.
  std::vector<Tensor<T>> replay() const {
    std::vector<Tensor<T>> out;
    out.reserve(nodes_.size());
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      const Node& n = nodes_[i];
      if (!n.forward) {
        out.push_back(value(i));
      } else {
        out.push_back(n.forward(*this));
      }
    }
    return out;
  }

 private:
  struct Node {
    std::string_view rule;
    std::vector<std::size_t> inputs;
    Tensor<T> value;
    const Tensor<T>* ref = nullptr;
    Tensor<T>* sink = nullptr;
    bool needs_grad = false;
    std::vector<T> grad;
    ForwardFn forward;
    BackwardFn backward;
  };

  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
  }

  bool grad_enabled_;
  std::vector<Node> nodes_;
};

namespace detail {

template <class T>
void accumulate(std::span<T> dst, const Tensor<T>& src) {
  auto s = src.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += s[i];
}

inline void require_same_shape(std::string_view op, const Shape& a,
                               const Shape& b) {
  if (a != b) {
    throw ShapeError(std::string(op) + ": shapes differ, " + shape_str(a) +
                     " vs " + shape_str(b));
  }
}

template <class T, class F, class D>
Var unary(Tape<T>& tape, std::string_view rule, Var x, F f, D df) {
  const std::size_t xi = x.id;
  return tape.record(
      rule, {xi},
      [xi, f](const Tape<T>& t) {
        Tensor<T> out = t.value(xi).detached();
        for (auto& v : out.data()) v = f(v);
        return out;
      },
      [xi, df](Tape<T>& t, std::size_t self) {
        const auto& xv = t.value(xi);
        auto g = t.grad(self);
        auto dx = t.grad(xi);
        auto xd = xv.data();
        for (std::size_t k = 0; k < dx.size(); ++k) dx[k] += g[k] * df(xd[k]);
      });
}

}  // namespace detail

/// a [m x k] * b [k x n].
template <class T>
Var matmul(Tape<T>& tape, Var a, Var b) {
  const std::size_t ai = a.id, bi = b.id;
  if (tape.value(a).cols() != tape.value(b).rows()) {
    throw ShapeError("matmul: inner dimensions differ for " +
                     shape_str(tape.value(a).shape()) + " and " +
                     shape_str(tape.value(b).shape()));
  }
  return tape.record(
      "matmul", {ai, bi},
      [ai, bi](const Tape<T>& t) {
        return linalg::matmul(t.value(ai), t.value(bi));
      },
      [ai, bi](Tape<T>& t, std::size_t self) {
        const auto& av = t.value(ai);
        const auto& bv = t.value(bi);
        Tensor<T> g(Shape{av.rows(), bv.cols()},
                    std::vector<T>(t.grad(self).begin(), t.grad(self).end()));
        if (t.needs_grad(ai)) detail::accumulate(t.grad(ai), linalg::matmul_bt(g, bv));
        if (t.needs_grad(bi)) detail::accumulate(t.grad(bi), linalg::matmul_at(av, g));
      });
}

/// a [m x k] * b^T where b is [n x k]; the `h * K^T` product.
template <class T>
Var matmul_bt(Tape<T>& tape, Var a, Var b) {
  const std::size_t ai = a.id, bi = b.id;
  if (tape.value(a).cols() != tape.value(b).cols()) {
    throw ShapeError("matmul_bt: inner dimensions differ for " +
                     shape_str(tape.value(a).shape()) + " and " +
                     shape_str(tape.value(b).shape()) + "^T");
  }
  return tape.record(
      "matmul_bt", {ai, bi},
      [ai, bi](const Tape<T>& t) {
        return linalg::matmul_bt(t.value(ai), t.value(bi));
      },
      [ai, bi](Tape<T>& t, std::size_t self) {
        const auto& av = t.value(ai);
        const auto& bv = t.value(bi);
        Tensor<T> g(Shape{av.rows(), bv.rows()},
                    std::vector<T>(t.grad(self).begin(), t.grad(self).end()));
        if (t.needs_grad(ai)) detail::accumulate(t.grad(ai), linalg::matmul(g, bv));
        if (t.needs_grad(bi)) detail::accumulate(t.grad(bi), linalg::matmul_at(g, av));
      });
}

template <class T>
Var add(Tape<T>& tape, Var a, Var b) {
  detail::require_same_shape("add", tape.value(a).shape(), tape.value(b).shape());
  const std::size_t ai = a.id, bi = b.id;
  return tape.record(
      "add", {ai, bi},
      [ai, bi](const Tape<T>& t) {
        Tensor<T> out(t.value(ai).shape());
        auto x = t.value(ai).data();
        auto y = t.value(bi).data();
        auto o = out.data();
        for (std::size_t k = 0; k < o.size(); ++k) o[k] = x[k] + y[k];
        return out;
      },
      [ai, bi](Tape<T>& t, std::size_t self) {
        auto g = t.grad(self);
        for (auto in : {ai, bi}) {
          if (!t.needs_grad(in)) continue;
          auto d = t.grad(in);
          for (std::size_t k = 0; k < d.size(); ++k) d[k] += g[k];
        }
      });
}

/// Elementwise (Hadamard) product.
template <class T>
Var mul(Tape<T>& tape, Var a, Var b) {
  detail::require_same_shape("mul", tape.value(a).shape(), tape.value(b).shape());
  const std::size_t ai = a.id, bi = b.id;
  return tape.record(
      "mul", {ai, bi},
      [ai, bi](const Tape<T>& t) {
        Tensor<T> out(t.value(ai).shape());
        auto x = t.value(ai).data();
        auto y = t.value(bi).data();
        auto o = out.data();
        for (std::size_t k = 0; k < o.size(); ++k) o[k] = x[k] * y[k];
        return out;
      },
      [ai, bi](Tape<T>& t, std::size_t self) {
        auto g = t.grad(self);
        auto x = t.value(ai).data();
        auto y = t.value(bi).data();
        if (t.needs_grad(ai)) {
          auto d = t.grad(ai);
          for (std::size_t k = 0; k < d.size(); ++k) d[k] += g[k] * y[k];
        }
        if (t.needs_grad(bi)) {
          auto d = t.grad(bi);
          for (std::size_t k = 0; k < d.size(); ++k) d[k] += g[k] * x[k];
        }
      });
}

template <class T>
Var scale(Tape<T>& tape, Var a, T factor) {
  return detail::unary(
      tape, "scale", a, [factor](T v) { return v * factor; },
      [factor](T) { return factor; });
}

/// x [m x n] + bias [n] broadcast over rows.
template <class T>
Var add_rowwise(Tape<T>& tape, Var x, Var bias) {
  const auto& xv = tape.value(x);
  const auto& bv = tape.value(bias);
  if (bv.size() != xv.cols()) {
    throw ShapeError("add_rowwise: bias " + shape_str(bv.shape()) +
                     " does not match rows of " + shape_str(xv.shape()));
  }
  const std::size_t xi = x.id, bi = bias.id;
  return tape.record(
      "add_rowwise", {xi, bi},
      [xi, bi](const Tape<T>& t) {
        Tensor<T> out = t.value(xi).detached();
        const std::size_t n = out.cols();
        auto b = t.value(bi).data();
        auto o = out.data();
        for (std::size_t k = 0; k < o.size(); ++k) o[k] += b[k % n];
        return out;
      },
      [xi, bi](Tape<T>& t, std::size_t self) {
        auto g = t.grad(self);
        if (t.needs_grad(xi)) {
          auto d = t.grad(xi);
          for (std::size_t k = 0; k < d.size(); ++k) d[k] += g[k];
        }
        if (t.needs_grad(bi)) {
          auto d = t.grad(bi);
          const std::size_t n = d.size();
          for (std::size_t k = 0; k < g.size(); ++k) d[k % n] += g[k];
        }
      });
}

template <class T>
Var relu(Tape<T>& tape, Var x) {
  return detail::unary(
      tape, "relu", x, [](T v) { return v > T(0) ? v : T(0); },
      [](T v) { return v > T(0) ? T(1) : T(0); });
}

template <class T>
Var sigmoid(Tape<T>& tape, Var x) {
  return detail::unary(
      tape, "sigmoid", x, [](T v) { return linalg::sigmoid(v); },
      [](T v) {
        const T s = linalg::sigmoid(v);
        return s * (T(1) - s);
      });
}

/// Swish with beta = 1, i.e. x * sigmoid(x).
template <class T>
Var swish(Tape<T>& tape, Var x) {
  return detail::unary(
      tape, "swish", x, [](T v) { return linalg::swish(v); },
      [](T v) {
        const T s = linalg::sigmoid(v);
        return s + v * s * (T(1) - s);
      });
}

enum class Pointwise { relu, swish, sigmoid, mul, add };

template <class T>
Var pointwise(Tape<T>& tape, Pointwise kind, Var a) {
  switch (kind) {
    case Pointwise::relu: return relu(tape, a);
    case Pointwise::swish: return swish(tape, a);
    case Pointwise::sigmoid: return sigmoid(tape, a);
    default: throw std::invalid_argument("pointwise: binary kind needs two operands");
  }
}

template <class T>
Var pointwise(Tape<T>& tape, Pointwise kind, Var a, Var b) {
  switch (kind) {
    case Pointwise::mul: return mul(tape, a, b);
    case Pointwise::add: return add(tape, a, b);
    default: throw std::invalid_argument("pointwise: unary kind takes one operand");
  }
}

template <class T>
Var sum(Tape<T>& tape, Var x) {
  const std::size_t xi = x.id;
  return tape.record(
      "sum", {xi},
      [xi](const Tape<T>& t) {
        T s = T(0);
        for (T v : t.value(xi).data()) s += v;
        return Tensor<T>::scalar(s);
      },
      [xi](Tape<T>& t, std::size_t self) {
        const T g = t.grad(self)[0];
        for (auto& d : t.grad(xi)) d += g;
      });
}

/// Rows of `table` selected by `ids`: the embedding lookup.
template <class T>
Var gather_rows(Tape<T>& tape, Var table, std::vector<std::size_t> ids) {
  const auto& tv = tape.value(table);
  for (auto id : ids) {
    if (id >= tv.rows()) {
      throw std::out_of_range("gather_rows: row " + std::to_string(id) +
                              " outside table " + shape_str(tv.shape()));
    }
  }
  if (ids.empty()) throw ShapeError("gather_rows: empty index list");
  const std::size_t ti = table.id;
  return tape.record(
      "gather_rows", {ti},
      [ti, ids](const Tape<T>& t) {
        const auto& src = t.value(ti);
        const std::size_t d = src.cols();
        Tensor<T> out({ids.size(), d});
        for (std::size_t r = 0; r < ids.size(); ++r)
          for (std::size_t c = 0; c < d; ++c) out(r, c) = src(ids[r], c);
        return out;
      },
      [ti, ids](Tape<T>& t, std::size_t self) {
        const std::size_t d = t.value(ti).cols();
        auto g = t.grad(self);
        auto dt = t.grad(ti);
        for (std::size_t r = 0; r < ids.size(); ++r)
          for (std::size_t c = 0; c < d; ++c) dt[ids[r] * d + c] += g[r * d + c];
      });
}

/// Per-row layer normalisation with learned gain and bias.
template <class T>
Var layer_norm(Tape<T>& tape, Var x, Var gain, Var bias, T eps = T(1e-5)) {
  const auto& xv = tape.value(x);
  if (tape.value(gain).size() != xv.cols() || tape.value(bias).size() != xv.cols()) {
    throw ShapeError("layer_norm: gain/bias must match width of " +
                     shape_str(xv.shape()));
  }
  const std::size_t xi = x.id, gi = gain.id, bi = bias.id;
  auto stats = [eps](std::span<const T> row, T& mean, T& inv_std) {
    mean = T(0);
    for (T v : row) mean += v;
    mean /= T(row.size());
    T var = T(0);
    for (T v : row) var += (v - mean) * (v - mean);
    var /= T(row.size());
    inv_std = T(1) / std::sqrt(var + eps);
  };
  return tape.record(
      "layer_norm", {xi, gi, bi},
      [xi, gi, bi, stats](const Tape<T>& t) {
        const auto& in = t.value(xi);
        auto g = t.value(gi).data();
        auto b = t.value(bi).data();
        const std::size_t m = in.rows(), n = in.cols();
        Tensor<T> out({m, n});
        for (std::size_t r = 0; r < m; ++r) {
          T mean, inv;
          stats(linalg::row(in, r), mean, inv);
          for (std::size_t c = 0; c < n; ++c)
            out(r, c) = (in(r, c) - mean) * inv * g[c] + b[c];
        }
        return out;
      },
      [xi, gi, bi, stats](Tape<T>& t, std::size_t self) {
        const auto& in = t.value(xi);
        auto g = t.value(gi).data();
        const std::size_t m = in.rows(), n = in.cols();
        auto dy = t.grad(self);
        const bool need_x = t.needs_grad(xi), need_g = t.needs_grad(gi),
                   need_b = t.needs_grad(bi);
        std::vector<T> xhat(n), dxhat(n);
        for (std::size_t r = 0; r < m; ++r) {
          T mean, inv;
          stats(linalg::row(in, r), mean, inv);
          T sum_d = T(0), sum_dx = T(0);
          for (std::size_t c = 0; c < n; ++c) {
            xhat[c] = (in(r, c) - mean) * inv;
            dxhat[c] = dy[r * n + c] * g[c];
            sum_d += dxhat[c];
            sum_dx += dxhat[c] * xhat[c];
          }
          if (need_g) {
            auto dg = t.grad(gi);
            for (std::size_t c = 0; c < n; ++c) dg[c] += dy[r * n + c] * xhat[c];
          }
          if (need_b) {
            auto db = t.grad(bi);
            for (std::size_t c = 0; c < n; ++c) db[c] += dy[r * n + c];
          }
          if (need_x) {
            auto dx = t.grad(xi);
            const T inv_n = T(1) / T(n);
            for (std::size_t c = 0; c < n; ++c)
              dx[r * n + c] +=
                  inv * (dxhat[c] - sum_d * inv_n - xhat[c] * sum_dx * inv_n);
          }
        }
      });
}

/// Multi-head causal self-attention on already-projected q, k, v
/// ([seq x d] each, heads split along the width). Position t attends to
/// positions <= t only.
template <class T>
Var causal_attention(Tape<T>& tape, Var q, Var k, Var v, std::size_t n_heads) {
  const auto& qv = tape.value(q);
  detail::require_same_shape("causal_attention", qv.shape(), tape.value(k).shape());
  detail::require_same_shape("causal_attention", qv.shape(), tape.value(v).shape());
  if (n_heads == 0 || qv.cols() % n_heads != 0) {
    throw ShapeError("causal_attention: width " + std::to_string(qv.cols()) +
                     " not divisible by " + std::to_string(n_heads) + " heads");
  }
  const std::size_t qi = q.id, ki = k.id, vi = v.id;

  // Attention weights for one head, [seq x seq], zero above the diagonal.
  auto probs = [n_heads](const Tensor<T>& Q, const Tensor<T>& K, std::size_t h) {
    const std::size_t s = Q.rows(), dh = Q.cols() / n_heads, off = h * dh;
    const T inv_sqrt = T(1) / std::sqrt(T(dh));
    std::vector<T> p(s * s, T(0));
    for (std::size_t i = 0; i < s; ++i) {
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j <= i; ++j) {
        T acc = T(0);
        for (std::size_t c = 0; c < dh; ++c) acc += Q(i, off + c) * K(j, off + c);
        p[i * s + j] = acc * inv_sqrt;
        mx = std::max(mx, p[i * s + j]);
      }
      T z = T(0);
      for (std::size_t j = 0; j <= i; ++j) {
        p[i * s + j] = std::exp(p[i * s + j] - mx);
        z += p[i * s + j];
      }
      for (std::size_t j = 0; j <= i; ++j) p[i * s + j] /= z;
    }
    return p;
  };

  return tape.record(
      "causal_attention", {qi, ki, vi},
      [qi, ki, vi, n_heads, probs](const Tape<T>& t) {
        const auto& Q = t.value(qi);
        const auto& K = t.value(ki);
        const auto& V = t.value(vi);
        const std::size_t s = Q.rows(), d = Q.cols(), dh = d / n_heads;
        Tensor<T> out({s, d});
        for (std::size_t h = 0; h < n_heads; ++h) {
          const auto p = probs(Q, K, h);
          const std::size_t off = h * dh;
          for (std::size_t i = 0; i < s; ++i)
            for (std::size_t j = 0; j <= i; ++j) {
              const T w = p[i * s + j];
              for (std::size_t c = 0; c < dh; ++c) out(i, off + c) += w * V(j, off + c);
            }
        }
        return out;
      },
      [qi, ki, vi, n_heads, probs](Tape<T>& t, std::size_t self) {
        const auto& Q = t.value(qi);
        const auto& K = t.value(ki);
        const auto& V = t.value(vi);
        const std::size_t s = Q.rows(), d = Q.cols(), dh = d / n_heads;
        const T inv_sqrt = T(1) / std::sqrt(T(dh));
        auto dout = t.grad(self);
        const bool need_q = t.needs_grad(qi), need_k = t.needs_grad(ki),
                   need_v = t.needs_grad(vi);
        std::vector<T> dp(s * s);
        for (std::size_t h = 0; h < n_heads; ++h) {
          const auto p = probs(Q, K, h);
          const std::size_t off = h * dh;
          if (need_v) {
            auto dv = t.grad(vi);
            for (std::size_t i = 0; i < s; ++i)
              for (std::size_t j = 0; j <= i; ++j)
                for (std::size_t c = 0; c < dh; ++c)
                  dv[j * d + off + c] += p[i * s + j] * dout[i * d + off + c];
          }
          if (!need_q && !need_k) continue;
          // dS_ij = P_ij (dP_ij - sum_l P_il dP_il), scaled by 1/sqrt(dh).
          for (std::size_t i = 0; i < s; ++i) {
            T row_dot = T(0);
            for (std::size_t j = 0; j <= i; ++j) {
              T acc = T(0);
              for (std::size_t c = 0; c < dh; ++c)
                acc += dout[i * d + off + c] * V(j, off + c);
              dp[i * s + j] = acc;
              row_dot += p[i * s + j] * acc;
            }
            for (std::size_t j = 0; j <= i; ++j)
              dp[i * s + j] = p[i * s + j] * (dp[i * s + j] - row_dot) * inv_sqrt;
          }
          if (need_q) {
            auto dq = t.grad(qi);
            for (std::size_t i = 0; i < s; ++i)
              for (std::size_t j = 0; j <= i; ++j)
                for (std::size_t c = 0; c < dh; ++c)
                  dq[i * d + off + c] += dp[i * s + j] * K(j, off + c);
          }
          if (need_k) {
            auto dk = t.grad(ki);
            for (std::size_t i = 0; i < s; ++i)
              for (std::size_t j = 0; j <= i; ++j)
                for (std::size_t c = 0; c < dh; ++c)
                  dk[j * d + off + c] += dp[i * s + j] * Q(i, off + c);
          }
        }
      });
}

/// One (row, target) pair for the cross-entropy ops.
struct RowTarget {
  std::size_t row;
  std::size_t target;
};

/// Mean of -log softmax(logits[row])[target] over the given pairs.
template <class T>
Var cross_entropy(Tape<T>& tape, Var logits, std::vector<RowTarget> picks) {
  const auto& lv = tape.value(logits);
  if (picks.empty()) throw std::invalid_argument("cross_entropy: no targets");
  for (const auto& p : picks) {
    if (p.row >= lv.rows()) {
      throw std::out_of_range("cross_entropy: row " + std::to_string(p.row) +
                              " outside logits " + shape_str(lv.shape()));
    }
    if (p.target >= lv.cols()) {
      throw std::out_of_range("cross_entropy: target " + std::to_string(p.target) +
                              " outside vocabulary of " + std::to_string(lv.cols()));
    }
  }
  const std::size_t li = logits.id;
  return tape.record(
      "cross_entropy", {li},
      [li, picks](const Tape<T>& t) {
        const auto& L = t.value(li);
        T total = T(0);
        for (const auto& p : picks) {
          auto row = linalg::row(L, p.row);
          const T mx = *std::max_element(row.begin(), row.end());
          T z = T(0);
          for (T v : row) z += std::exp(v - mx);
          total += std::log(z) + mx - row[p.target];
        }
        return Tensor<T>::scalar(total / T(picks.size()));
      },
      [li, picks](Tape<T>& t, std::size_t self) {
        const auto& L = t.value(li);
        const T g = t.grad(self)[0] / T(picks.size());
        auto dl = t.grad(li);
        const std::size_t n = L.cols();
        for (const auto& p : picks) {
          const auto prob = linalg::softmax(linalg::row(L, p.row));
          for (std::size_t c = 0; c < n; ++c) {
            dl[p.row * n + c] += g * (prob[c] - (c == p.target ? T(1) : T(0)));
          }
        }
      });
}

/// -log softmax(logits)[target] for a single logit vector.
template <class T>
Var softmax_cross_entropy(Tape<T>& tape, Var logits, std::size_t target) {
  const auto& lv = tape.value(logits);
  if (lv.rows() != 1) {
    throw ShapeError("softmax_cross_entropy: expected one logit vector, got " +
                     shape_str(lv.shape()));
  }
  return cross_entropy(tape, logits, {RowTarget{0, target}});
}

}  // namespace kvmem
