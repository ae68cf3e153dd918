#pragma once

// Reverse-mode autodiff on Tensor<T>. Dynamic tape: each op returns a Var
// holding a value plus a closure that scatters the output gradient into its
// parents. Graphs are per-sample and freed once backward() has run.
// Backward closures hoist gradient buffers out of their loops; this code is
// on the training hot path.

#include "vlseg/tensor.hpp"

#include <algorithm>
#include <array>
#include <functional>
#include <limits>
#include <memory>
#include <unordered_set>
#include <vector>

namespace vlseg::ag {

inline bool& grad_mode() {
  static bool enabled = true;
  return enabled;
}

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(grad_mode()) { grad_mode() = false; }
  ~NoGradGuard() { grad_mode() = prev; }
};

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  void ensure_grad() {
    if (grad.shape != value.shape) grad = Tensor<T>::zeros(value.shape);
  }
};

template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<T> v, bool requires_grad = false)
      : n_(std::make_shared<Node<T>>()) {
    n_->value = std::move(v);
    n_->requires_grad = requires_grad;
    if (requires_grad) n_->ensure_grad();
  }

  bool defined() const { return static_cast<bool>(n_); }
  const Tensor<T>& val() const { return n_->value; }
  Tensor<T>& grad() const {
    n_->ensure_grad();
    return n_->grad;
  }
  bool requires_grad() const { return n_ && n_->requires_grad; }
  std::shared_ptr<Node<T>>& node() { return n_; }
  const std::shared_ptr<Node<T>>& node() const { return n_; }

  int rows() const { return val().rows(); }
  int cols() const { return val().cols(); }
  T item() const {
    if (val().size() != 1) throw std::invalid_argument("item(): tensor is not scalar");
    return val().data[0];
  }

 private:
  std::shared_ptr<Node<T>> n_;
};

template <typename T>
Var<T> constant(Tensor<T> v) {
  return Var<T>(std::move(v), false);
}

// Build an op node. `backward` receives the node; parents' grads are live.
template <typename T>
Var<T> make_op(Tensor<T> value, std::vector<Var<T>> parents,
               std::function<void(Node<T>&)> backward) {
  Var<T> out(std::move(value), false);
  bool need = false;
  if (grad_mode())
    for (const auto& p : parents) need = need || p.requires_grad();
  if (need) {
    auto& n = *out.node();
    n.requires_grad = true;
    for (auto& p : parents) n.parents.push_back(p.node());
    n.backward = std::move(backward);
  }
  return out;
}

// Backpropagate from a scalar root.
template <typename T>
void backward(const Var<T>& root) {
  if (!root.defined()) throw std::invalid_argument("backward: undefined var");
  if (root.val().size() != 1) throw std::invalid_argument("backward: root must be scalar");
  if (!root.requires_grad()) return;

  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, size_t>> stack;
  stack.push_back({root.node().get(), 0});
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      Node<T>* p = node->parents[idx++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.grad().data[0] = T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward) {
      for (auto& p : n->parents)
        if (p->requires_grad) p->ensure_grad();
      n->backward(*n);
    }
  }
}

// ---------------------------------------------------------------------------
// Elementwise / broadcast arithmetic

template <typename T>
void check_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
  if (a.val().shape != b.val().shape)
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + a.val().shape_str() +
                                " vs " + b.val().shape_str());
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  check_same_shape(a, b, "add");
  Tensor<T> out = a.val();
  const T* pb = b.val().data.data();
  for (std::int64_t i = 0; i < out.size(); ++i) out.data[static_cast<size_t>(i)] += pb[i];
  return make_op<T>(std::move(out), {a, b}, [a, b](Node<T>& n) {
    const T* g = n.grad.data.data();
    std::int64_t sz = n.grad.size();
    if (a.requires_grad()) {
      T* ga = a.grad().data.data();
      for (std::int64_t i = 0; i < sz; ++i) ga[i] += g[i];
    }
    if (b.requires_grad()) {
      T* gb = b.grad().data.data();
      for (std::int64_t i = 0; i < sz; ++i) gb[i] += g[i];
    }
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  check_same_shape(a, b, "sub");
  Tensor<T> out = a.val();
  const T* pb = b.val().data.data();
  for (std::int64_t i = 0; i < out.size(); ++i) out.data[static_cast<size_t>(i)] -= pb[i];
  return make_op<T>(std::move(out), {a, b}, [a, b](Node<T>& n) {
    const T* g = n.grad.data.data();
    std::int64_t sz = n.grad.size();
    if (a.requires_grad()) {
      T* ga = a.grad().data.data();
      for (std::int64_t i = 0; i < sz; ++i) ga[i] += g[i];
    }
    if (b.requires_grad()) {
      T* gb = b.grad().data.data();
      for (std::int64_t i = 0; i < sz; ++i) gb[i] -= g[i];
    }
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  check_same_shape(a, b, "mul");
  Tensor<T> out = a.val();
  const T* pb = b.val().data.data();
  for (std::int64_t i = 0; i < out.size(); ++i) out.data[static_cast<size_t>(i)] *= pb[i];
  return make_op<T>(std::move(out), {a, b}, [a, b](Node<T>& n) {
    const T* g = n.grad.data.data();
    std::int64_t sz = n.grad.size();
    if (a.requires_grad()) {
      T* ga = a.grad().data.data();
      const T* vb = b.val().data.data();
      for (std::int64_t i = 0; i < sz; ++i) ga[i] += g[i] * vb[i];
    }
    if (b.requires_grad()) {
      T* gb = b.grad().data.data();
      const T* va = a.val().data.data();
      for (std::int64_t i = 0; i < sz; ++i) gb[i] += g[i] * va[i];
    }
  });
}

template <typename T>
Var<T> scalar_mul(const Var<T>& a, double s) {
  Tensor<T> out = a.val();
  for (auto& v : out.data) v = static_cast<T>(v * s);
  return make_op<T>(std::move(out), {a}, [a, s](Node<T>& n) {
    if (!a.requires_grad()) return;
    T* ga = a.grad().data.data();
    const T* g = n.grad.data.data();
    T sv = static_cast<T>(s);
    for (std::int64_t i = 0; i < n.grad.size(); ++i) ga[i] += g[i] * sv;
  });
}

// a: R x C, bias: 1 x C broadcast over rows.
template <typename T>
Var<T> add_rowvec(const Var<T>& a, const Var<T>& bias) {
  int r = a.rows(), c = a.cols();
  if (bias.rows() != 1 || bias.cols() != c)
    throw std::invalid_argument("add_rowvec: bias shape mismatch");
  Tensor<T> out = a.val();
  const T* pb = bias.val().data.data();
  for (int i = 0; i < r; ++i) {
    T* row = out.data.data() + static_cast<size_t>(i) * c;
    for (int j = 0; j < c; ++j) row[j] += pb[j];
  }
  return make_op<T>(std::move(out), {a, bias}, [a, bias, r, c](Node<T>& n) {
    const T* g = n.grad.data.data();
    if (a.requires_grad()) {
      T* ga = a.grad().data.data();
      std::int64_t sz = n.grad.size();
      for (std::int64_t i = 0; i < sz; ++i) ga[i] += g[i];
    }
    if (bias.requires_grad()) {
      T* gb = bias.grad().data.data();
      for (int i = 0; i < r; ++i) {
        const T* grow = g + static_cast<size_t>(i) * c;
        for (int j = 0; j < c; ++j) gb[j] += grow[j];
      }
    }
  });
}

// a: R x C, gate: R x 1 broadcast over columns.
template <typename T>
Var<T> mul_colvec(const Var<T>& a, const Var<T>& gate) {
  int r = a.rows(), c = a.cols();
  if (gate.rows() != r || gate.cols() != 1)
    throw std::invalid_argument("mul_colvec: gate shape mismatch");
  Tensor<T> out = a.val();
  for (int i = 0; i < r; ++i) {
    T g = gate.val().at(i, 0);
    T* row = out.data.data() + static_cast<size_t>(i) * c;
    for (int j = 0; j < c; ++j) row[j] *= g;
  }
  return make_op<T>(std::move(out), {a, gate}, [a, gate, r, c](Node<T>& n) {
    const T* g = n.grad.data.data();
    if (a.requires_grad()) {
      T* ga = a.grad().data.data();
      const T* gv = gate.val().data.data();
      for (int i = 0; i < r; ++i) {
        const T* grow = g + static_cast<size_t>(i) * c;
        T* garow = ga + static_cast<size_t>(i) * c;
        for (int j = 0; j < c; ++j) garow[j] += grow[j] * gv[i];
      }
    }
    if (gate.requires_grad()) {
      T* gg = gate.grad().data.data();
      const T* va = a.val().data.data();
      for (int i = 0; i < r; ++i) {
        const T* grow = g + static_cast<size_t>(i) * c;
        const T* varow = va + static_cast<size_t>(i) * c;
        T s = T(0);
        for (int j = 0; j < c; ++j) s += grow[j] * varow[j];
        gg[i] += s;
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Matrix products (Eigen-backed)

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  if (a.cols() != b.rows())
    throw std::invalid_argument("matmul: inner dims " + a.val().shape_str() + " vs " +
                                b.val().shape_str());
  Tensor<T> out({a.rows(), b.cols()});
  out.mat().noalias() = a.val().mat() * b.val().mat();
  return make_op<T>(std::move(out), {a, b}, [a, b](Node<T>& n) {
    typename Tensor<T>::ConstMap g(n.grad.data.data(), n.grad.rows(), n.grad.cols());
    if (a.requires_grad()) a.grad().mat().noalias() += g * b.val().mat().transpose();
    if (b.requires_grad()) b.grad().mat().noalias() += a.val().mat().transpose() * g;
  });
}

// a (R x K) times b^T (b is C x K) -> R x C.
template <typename T>
Var<T> matmul_nt(const Var<T>& a, const Var<T>& b) {
  if (a.cols() != b.cols())
    throw std::invalid_argument("matmul_nt: inner dims " + a.val().shape_str() + " vs " +
                                b.val().shape_str());
  Tensor<T> out({a.rows(), b.rows()});
  out.mat().noalias() = a.val().mat() * b.val().mat().transpose();
  return make_op<T>(std::move(out), {a, b}, [a, b](Node<T>& n) {
    typename Tensor<T>::ConstMap g(n.grad.data.data(), n.grad.rows(), n.grad.cols());
    if (a.requires_grad()) a.grad().mat().noalias() += g * b.val().mat();
    if (b.requires_grad()) b.grad().mat().noalias() += g.transpose() * a.val().mat();
  });
}

template <typename T>
Var<T> transpose(const Var<T>& a) {
  Tensor<T> out({a.cols(), a.rows()});
  out.mat() = a.val().mat().transpose();
  return make_op<T>(std::move(out), {a}, [a](Node<T>& n) {
    if (a.requires_grad())
      a.grad().mat() += typename Tensor<T>::ConstMap(n.grad.data.data(), n.grad.rows(),
                                                     n.grad.cols())
                            .transpose();
  });
}

template <typename T>
Var<T> reshape(const Var<T>& a, std::vector<int> shape) {
  Tensor<T> out = a.val().reshaped(std::move(shape));
  return make_op<T>(std::move(out), {a}, [a](Node<T>& n) {
    if (!a.requires_grad()) return;
    T* ga = a.grad().data.data();
    const T* g = n.grad.data.data();
    for (std::int64_t i = 0; i < n.grad.size(); ++i) ga[i] += g[i];
  });
}

// ---------------------------------------------------------------------------
// Slicing / gathering / concatenation (all 2-D, row-major)

template <typename T>
Var<T> slice_rows(const Var<T>& a, int start, int len) {
  if (start < 0 || len < 0 || start + len > a.rows())
    throw std::invalid_argument("slice_rows: range out of bounds");
  int c = a.cols();
  Tensor<T> out({len, c});
  std::copy_n(a.val().data.data() + static_cast<size_t>(start) * c,
              static_cast<size_t>(len) * c, out.data.data());
  return make_op<T>(std::move(out), {a}, [a, start, len, c](Node<T>& n) {
    if (!a.requires_grad()) return;
    T* ga = a.grad().data.data() + static_cast<size_t>(start) * c;
    const T* g = n.grad.data.data();
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(len) * c; ++i) ga[i] += g[i];
  });
}

template <typename T>
Var<T> slice_cols(const Var<T>& a, int start, int len) {
  if (start < 0 || len < 0 || start + len > a.cols())
    throw std::invalid_argument("slice_cols: range out of bounds");
  int r = a.rows(), c = a.cols();
  Tensor<T> out({r, len});
  const T* src = a.val().data.data();
  for (int i = 0; i < r; ++i)
    std::copy_n(src + static_cast<size_t>(i) * c + start, len,
                out.data.data() + static_cast<size_t>(i) * len);
  return make_op<T>(std::move(out), {a}, [a, start, len, r, c](Node<T>& n) {
    if (!a.requires_grad()) return;
    T* ga = a.grad().data.data();
    const T* g = n.grad.data.data();
    for (int i = 0; i < r; ++i) {
      T* garow = ga + static_cast<size_t>(i) * c + start;
      const T* grow = g + static_cast<size_t>(i) * len;
      for (int j = 0; j < len; ++j) garow[j] += grow[j];
    }
  });
}

template <typename T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: empty");
  int c = parts[0].cols(), r = 0;
  for (const auto& p : parts) {
    if (p.cols() != c) throw std::invalid_argument("concat_rows: column mismatch");
    r += p.rows();
  }
  Tensor<T> out({r, c});
  int at = 0;
  for (const auto& p : parts) {
    std::copy_n(p.val().data.data(), p.val().size(),
                out.data.data() + static_cast<size_t>(at) * c);
    at += p.rows();
  }
  return make_op<T>(std::move(out), parts, [parts](Node<T>& n) {
    const T* g = n.grad.data.data();
    std::int64_t at = 0;  // flat element offset; all parts share the column count
    for (const auto& p : parts) {
      std::int64_t sz = p.val().size();
      if (p.requires_grad()) {
        T* gp = p.grad().data.data();
        const T* gs = g + at;
        for (std::int64_t i = 0; i < sz; ++i) gp[i] += gs[i];
      }
      at += sz;
    }
  });
}

template <typename T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: empty");
  int r = parts[0].rows(), c = 0;
  for (const auto& p : parts) {
    if (p.rows() != r) throw std::invalid_argument("concat_cols: row mismatch");
    c += p.cols();
  }
  Tensor<T> out({r, c});
  int at = 0;
  for (const auto& p : parts) {
    int pc = p.cols();
    const T* src = p.val().data.data();
    for (int i = 0; i < r; ++i)
      std::copy_n(src + static_cast<size_t>(i) * pc, pc,
                  out.data.data() + static_cast<size_t>(i) * c + at);
    at += pc;
  }
  return make_op<T>(std::move(out), parts, [parts, r, c](Node<T>& n) {
    const T* g = n.grad.data.data();
    int at = 0;
    for (const auto& p : parts) {
      int pc = p.cols();
      if (p.requires_grad()) {
        T* gp = p.grad().data.data();
        for (int i = 0; i < r; ++i) {
          const T* grow = g + static_cast<size_t>(i) * c + at;
          T* gprow = gp + static_cast<size_t>(i) * pc;
          for (int j = 0; j < pc; ++j) gprow[j] += grow[j];
        }
      }
      at += pc;
    }
  });
}

// out[i] = a[idx[i]]; duplicate indices accumulate in backward.
template <typename T>
Var<T> gather_rows(const Var<T>& a, std::vector<int> idx) {
  int c = a.cols();
  Tensor<T> out({static_cast<int>(idx.size()), c});
  for (size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= a.rows())
      throw std::invalid_argument("gather_rows: index out of range");
    std::copy_n(a.val().data.data() + static_cast<size_t>(idx[i]) * c, c,
                out.data.data() + i * c);
  }
  return make_op<T>(std::move(out), {a}, [a, idx = std::move(idx), c](Node<T>& n) {
    if (!a.requires_grad()) return;
    T* ga = a.grad().data.data();
    const T* g = n.grad.data.data();
    for (size_t i = 0; i < idx.size(); ++i) {
      T* garow = ga + static_cast<size_t>(idx[i]) * c;
      const T* grow = g + i * c;
      for (int j = 0; j < c; ++j) garow[j] += grow[j];
    }
  });
}

// ---------------------------------------------------------------------------
// Nonlinearities

template <typename T, typename F, typename DF>
Var<T> unary_op(const Var<T>& a, F f, DF df_from_out_in, const char*) {
  Tensor<T> out = a.val();
  for (auto& v : out.data) v = f(v);
  return make_op<T>(std::move(out), {a}, [a, df_from_out_in](Node<T>& n) {
    if (!a.requires_grad()) return;
    T* ga = a.grad().data.data();
    const T* g = n.grad.data.data();
    const T* y = n.value.data.data();
    const T* x = a.val().data.data();
    for (std::int64_t i = 0; i < n.grad.size(); ++i) ga[i] += g[i] * df_from_out_in(y[i], x[i]);
  });
}

template <typename T>
Var<T> tanh_op(const Var<T>& a) {
  return unary_op(
      a, [](T x) { return std::tanh(x); }, [](T y, T) { return T(1) - y * y; }, "tanh");
}

template <typename T>
Var<T> sigmoid(const Var<T>& a) {
  return unary_op(
      a,
      [](T x) {
        return x >= T(0) ? T(1) / (T(1) + std::exp(-x))
                         : std::exp(x) / (T(1) + std::exp(x));
      },
      [](T y, T) { return y * (T(1) - y); }, "sigmoid");
}

template <typename T>
Var<T> relu(const Var<T>& a) {
  return unary_op(
      a, [](T x) { return x > T(0) ? x : T(0); },
      [](T, T x) { return x > T(0) ? T(1) : T(0); }, "relu");
}

template <typename T>
Var<T> gelu(const Var<T>& a) {
  // Exact (erf) form, evaluated in the tensor's own precision.
  return unary_op(
      a,
      [](T x) {
        return static_cast<T>(T(0.5) * x * (T(1) + std::erf(x * static_cast<T>(M_SQRT1_2))));
      },
      [](T, T x) {
        T cdf = T(0.5) * (T(1) + std::erf(x * static_cast<T>(M_SQRT1_2)));
        T pdf = std::exp(T(-0.5) * x * x) * static_cast<T>(0.3989422804014327);
        return cdf + x * pdf;
      },
      "gelu");
}

template <typename T>
Var<T> exp_op(const Var<T>& a) {
  return unary_op(
      a, [](T x) { return std::exp(x); }, [](T y, T) { return y; }, "exp");
}

// ---------------------------------------------------------------------------
// Row softmax with optional additive bias (attention mask); bias carries no grad.

template <typename T>
Var<T> softmax_rows(const Var<T>& a, const Tensor<T>* bias = nullptr) {
  int r = a.rows(), c = a.cols();
  if (bias && (bias->rows() != r || bias->cols() != c))
    throw std::invalid_argument("softmax_rows: bias shape mismatch");
  Tensor<T> out({r, c});
  for (int i = 0; i < r; ++i) {
    const T* arow = a.val().data.data() + static_cast<size_t>(i) * c;
    const T* brow = bias ? bias->data.data() + static_cast<size_t>(i) * c : nullptr;
    T* orow = out.data.data() + static_cast<size_t>(i) * c;
    T mx = -std::numeric_limits<T>::infinity();
    for (int j = 0; j < c; ++j) {
      T v = arow[j] + (brow ? brow[j] : T(0));
      orow[j] = v;
      mx = std::max(mx, v);
    }
    T denom = T(0);
    for (int j = 0; j < c; ++j) {
      orow[j] = std::exp(orow[j] - mx);
      denom += orow[j];
    }
    T inv = T(1) / denom;
    for (int j = 0; j < c; ++j) orow[j] *= inv;
  }
  return make_op<T>(std::move(out), {a}, [a, r, c](Node<T>& n) {
    if (!a.requires_grad()) return;
    T* ga = a.grad().data.data();
    const T* g = n.grad.data.data();
    const T* y = n.value.data.data();
    for (int i = 0; i < r; ++i) {
      const T* grow = g + static_cast<size_t>(i) * c;
      const T* yrow = y + static_cast<size_t>(i) * c;
      T* garow = ga + static_cast<size_t>(i) * c;
      T dot = T(0);
      for (int j = 0; j < c; ++j) dot += grow[j] * yrow[j];
      for (int j = 0; j < c; ++j) garow[j] += yrow[j] * (grow[j] - dot);
    }
  });
}

// ---------------------------------------------------------------------------
// LayerNorm over the last (column) axis.

template <typename T>
Var<T> layer_norm_rows(const Var<T>& x, const Var<T>& gain, const Var<T>& bias,
                       double eps = 1e-5) {
  int r = x.rows(), c = x.cols();
  if (gain.rows() != 1 || gain.cols() != c || bias.rows() != 1 || bias.cols() != c)
    throw std::invalid_argument("layer_norm_rows: gain/bias must be 1 x cols");
  Tensor<T> out({r, c});
  Tensor<T> xhat({r, c});
  Tensor<T> inv_sigma({r, 1});
  const T* gv = gain.val().data.data();
  const T* bv = bias.val().data.data();
  for (int i = 0; i < r; ++i) {
    const T* xrow = x.val().data.data() + static_cast<size_t>(i) * c;
    T* orow = out.data.data() + static_cast<size_t>(i) * c;
    T* hrow = xhat.data.data() + static_cast<size_t>(i) * c;
    double mu = 0;
    for (int j = 0; j < c; ++j) mu += xrow[j];
    mu /= c;
    double var = 0;
    for (int j = 0; j < c; ++j) {
      double d = xrow[j] - mu;
      var += d * d;
    }
    var /= c;
    double inv = 1.0 / std::sqrt(var + eps);
    inv_sigma.at(i, 0) = static_cast<T>(inv);
    for (int j = 0; j < c; ++j) {
      T xh = static_cast<T>((xrow[j] - mu) * inv);
      hrow[j] = xh;
      orow[j] = xh * gv[j] + bv[j];
    }
  }
  return make_op<T>(std::move(out), {x, gain, bias},
                    [x, gain, bias, xhat = std::move(xhat),
                     inv_sigma = std::move(inv_sigma), r, c](Node<T>& n) {
                      const T* g = n.grad.data.data();
                      const T* gv = gain.val().data.data();
                      const T* xh = xhat.data.data();
                      T* gx = x.requires_grad() ? x.grad().data.data() : nullptr;
                      T* gg = gain.requires_grad() ? gain.grad().data.data() : nullptr;
                      T* gb = bias.requires_grad() ? bias.grad().data.data() : nullptr;
                      for (int i = 0; i < r; ++i) {
                        const T* grow = g + static_cast<size_t>(i) * c;
                        const T* hrow = xh + static_cast<size_t>(i) * c;
                        double sum_g = 0, sum_gx = 0;
                        for (int j = 0; j < c; ++j) {
                          double gg_j = static_cast<double>(grow[j]) * gv[j];
                          sum_g += gg_j;
                          sum_gx += gg_j * hrow[j];
                        }
                        if (gx) {
                          double inv = inv_sigma.at(i, 0);
                          T* gxrow = gx + static_cast<size_t>(i) * c;
                          for (int j = 0; j < c; ++j) {
                            double gg_j = static_cast<double>(grow[j]) * gv[j];
                            gxrow[j] += static_cast<T>(
                                inv * (gg_j - sum_g / c - hrow[j] * sum_gx / c));
                          }
                        }
                        if (gg)
                          for (int j = 0; j < c; ++j) gg[j] += grow[j] * hrow[j];
                        if (gb)
                          for (int j = 0; j < c; ++j) gb[j] += grow[j];
                      }
                    });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
Var<T> sum_all(const Var<T>& a) {
  double s = 0;
  for (T v : a.val().data) s += v;
  return make_op<T>(Tensor<T>::scalar(static_cast<T>(s)), {a}, [a](Node<T>& n) {
    if (!a.requires_grad()) return;
    T g = n.grad.data[0];
    T* ga = a.grad().data.data();
    for (std::int64_t i = 0; i < a.val().size(); ++i) ga[i] += g;
  });
}

template <typename T>
Var<T> mean_all(const Var<T>& a) {
  return scalar_mul(sum_all(a), 1.0 / static_cast<double>(a.val().size()));
}

// Column-wise mean over rows -> 1 x C.
template <typename T>
Var<T> mean_rows(const Var<T>& a) {
  int r = a.rows(), c = a.cols();
  Tensor<T> out({1, c});
  for (int i = 0; i < r; ++i) {
    const T* row = a.val().data.data() + static_cast<size_t>(i) * c;
    for (int j = 0; j < c; ++j) out.data[static_cast<size_t>(j)] += row[j];
  }
  for (int j = 0; j < c; ++j) out.data[static_cast<size_t>(j)] /= static_cast<T>(r);
  return make_op<T>(std::move(out), {a}, [a, r, c](Node<T>& n) {
    if (!a.requires_grad()) return;
    T* ga = a.grad().data.data();
    const T* g = n.grad.data.data();
    T inv = T(1) / static_cast<T>(r);
    for (int i = 0; i < r; ++i) {
      T* garow = ga + static_cast<size_t>(i) * c;
      for (int j = 0; j < c; ++j) garow[j] += g[j] * inv;
    }
  });
}

// Row-wise L2 normalization: y_i = x_i / sqrt(|x_i|^2 + eps).
template <typename T>
Var<T> l2_normalize_rows(const Var<T>& x, double eps = 1e-12) {
  int r = x.rows(), c = x.cols();
  Tensor<T> out({r, c});
  Tensor<T> inv_norm({r, 1});
  for (int i = 0; i < r; ++i) {
    const T* xrow = x.val().data.data() + static_cast<size_t>(i) * c;
    T* orow = out.data.data() + static_cast<size_t>(i) * c;
    double s = eps;
    for (int j = 0; j < c; ++j) s += static_cast<double>(xrow[j]) * xrow[j];
    double inv = 1.0 / std::sqrt(s);
    inv_norm.at(i, 0) = static_cast<T>(inv);
    for (int j = 0; j < c; ++j) orow[j] = static_cast<T>(xrow[j] * inv);
  }
  return make_op<T>(std::move(out), {x},
                    [x, inv_norm = std::move(inv_norm), r, c](Node<T>& n) {
                      if (!x.requires_grad()) return;
                      T* gx = x.grad().data.data();
                      const T* g = n.grad.data.data();
                      const T* y = n.value.data.data();
                      for (int i = 0; i < r; ++i) {
                        const T* grow = g + static_cast<size_t>(i) * c;
                        const T* yrow = y + static_cast<size_t>(i) * c;
                        T* gxrow = gx + static_cast<size_t>(i) * c;
                        double dot = 0;
                        for (int j = 0; j < c; ++j) dot += static_cast<double>(grow[j]) * yrow[j];
                        double inv = inv_norm.at(i, 0);
                        for (int j = 0; j < c; ++j)
                          gxrow[j] += static_cast<T>(inv * (grow[j] - yrow[j] * dot));
                      }
                    });
}

// ---------------------------------------------------------------------------
// Losses as graph ops

// Weighted token cross-entropy over logit rows. weights[i] == 0 masks a row.
template <typename T>
Var<T> cross_entropy_rows(const Var<T>& logits, std::vector<int> targets,
                          std::vector<double> weights) {
  int r = logits.rows(), c = logits.cols();
  if (static_cast<int>(targets.size()) != r || static_cast<int>(weights.size()) != r)
    throw std::invalid_argument("cross_entropy_rows: target/weight length mismatch");
  double wsum = 0;
  for (double w : weights) wsum += w;
  if (wsum <= 0) throw std::invalid_argument("cross_entropy_rows: all rows masked");
  Tensor<T> probs({r, c});
  double loss = 0;
  for (int i = 0; i < r; ++i) {
    if (targets[static_cast<size_t>(i)] < 0 || targets[static_cast<size_t>(i)] >= c)
      throw std::invalid_argument("cross_entropy_rows: target id out of range");
    const T* lrow = logits.val().data.data() + static_cast<size_t>(i) * c;
    T* prow = probs.data.data() + static_cast<size_t>(i) * c;
    T mx = -std::numeric_limits<T>::infinity();
    for (int j = 0; j < c; ++j) mx = std::max(mx, lrow[j]);
    double denom = 0;
    for (int j = 0; j < c; ++j) denom += std::exp(static_cast<double>(lrow[j] - mx));
    double lse = std::log(denom) + mx;
    for (int j = 0; j < c; ++j)
      prow[j] = static_cast<T>(std::exp(static_cast<double>(lrow[j]) - lse));
    loss += weights[static_cast<size_t>(i)] * (lse - lrow[targets[static_cast<size_t>(i)]]);
  }
  loss /= wsum;
  return make_op<T>(Tensor<T>::scalar(static_cast<T>(loss)), {logits},
                    [logits, targets = std::move(targets), weights = std::move(weights),
                     probs = std::move(probs), wsum, r, c](Node<T>& n) {
                      if (!logits.requires_grad()) return;
                      T g = n.grad.data[0];
                      T* gl = logits.grad().data.data();
                      const T* p = probs.data.data();
                      for (int i = 0; i < r; ++i) {
                        if (weights[static_cast<size_t>(i)] == 0) continue;
                        T w = static_cast<T>(g * weights[static_cast<size_t>(i)] / wsum);
                        T* grow = gl + static_cast<size_t>(i) * c;
                        const T* prow = p + static_cast<size_t>(i) * c;
                        int tgt = targets[static_cast<size_t>(i)];
                        for (int j = 0; j < c; ++j)
                          grow[j] += w * (prow[j] - (j == tgt ? T(1) : T(0)));
                      }
                    });
}

// Mean binary cross-entropy on logits.
template <typename T>
Var<T> bce_with_logits_mean(const Var<T>& logits, const Tensor<T>& target) {
  if (logits.val().shape != target.shape)
    throw std::invalid_argument("bce_with_logits: shape mismatch");
  std::int64_t nelem = logits.val().size();
  const T* z = logits.val().data.data();
  const T* t = target.data.data();
  double loss = 0;
  for (std::int64_t i = 0; i < nelem; ++i) {
    double zi = z[i];
    loss += std::max(zi, 0.0) - zi * t[i] + std::log1p(std::exp(-std::abs(zi)));
  }
  loss /= static_cast<double>(nelem);
  return make_op<T>(Tensor<T>::scalar(static_cast<T>(loss)), {logits},
                    [logits, target, nelem](Node<T>& n) {
                      if (!logits.requires_grad()) return;
                      T g = n.grad.data[0];
                      T* gl = logits.grad().data.data();
                      const T* z = logits.val().data.data();
                      const T* t = target.data.data();
                      T scale = static_cast<T>(g / static_cast<double>(nelem));
                      for (std::int64_t i = 0; i < nelem; ++i) {
                        double zi = z[i];
                        double p = zi >= 0 ? 1.0 / (1.0 + std::exp(-zi))
                                           : std::exp(zi) / (1.0 + std::exp(zi));
                        gl[i] += scale * static_cast<T>(p - t[i]);
                      }
                    });
}

// Soft DICE loss: 1 - (2*sum(p*t) + eps) / (sum(p) + sum(t) + eps), p = sigmoid(z).
// eps in both numerator and denominator so empty-vs-empty gives 0.
template <typename T>
Var<T> soft_dice(const Var<T>& logits, const Tensor<T>& target, double eps = 1.0) {
  if (logits.val().shape != target.shape)
    throw std::invalid_argument("soft_dice: shape mismatch");
  std::int64_t nelem = logits.val().size();
  std::vector<T> p(static_cast<size_t>(nelem));
  const T* z = logits.val().data.data();
  const T* t = target.data.data();
  double s_pt = 0, s_p = 0, s_t = 0;
  for (std::int64_t i = 0; i < nelem; ++i) {
    double zi = z[i];
    double pi = zi >= 0 ? 1.0 / (1.0 + std::exp(-zi)) : std::exp(zi) / (1.0 + std::exp(zi));
    p[static_cast<size_t>(i)] = static_cast<T>(pi);
    s_pt += pi * t[i];
    s_p += pi;
    s_t += t[i];
  }
  double num = 2.0 * s_pt + eps, den = s_p + s_t + eps;
  double loss = 1.0 - num / den;
  return make_op<T>(
      Tensor<T>::scalar(static_cast<T>(loss)), {logits},
      [logits, target, p = std::move(p), num, den, nelem](Node<T>& n) {
        if (!logits.requires_grad()) return;
        T g = n.grad.data[0];
        T* gl = logits.grad().data.data();
        const T* t = target.data.data();
        double inv_den2 = 1.0 / (den * den);
        for (std::int64_t i = 0; i < nelem; ++i) {
          // d(loss)/dp_i = -(2*t_i*den - num) / den^2
          double dldp = -(2.0 * t[i] * den - num) * inv_den2;
          double pi = p[static_cast<size_t>(i)];
          gl[i] += static_cast<T>(g * dldp * pi * (1.0 - pi));
        }
      });
}

// ---------------------------------------------------------------------------
// Bilinear upsampling of per-row mask logits: m is N x (h*w), output N x (H*W).
// Sampling uses half-pixel centers (align_corners = false convention).

struct BilinearPlan {
  int h = 0, w = 0, out_h = 0, out_w = 0;
  std::vector<std::array<int, 4>> idx;  // 4 source cells per output pixel
  std::vector<std::array<float, 4>> wgt;

  static BilinearPlan make(int h, int w, int out_h, int out_w) {
    BilinearPlan plan;
    plan.h = h;
    plan.w = w;
    plan.out_h = out_h;
    plan.out_w = out_w;
    plan.idx.resize(static_cast<size_t>(out_h) * out_w);
    plan.wgt.resize(static_cast<size_t>(out_h) * out_w);
    double sy = static_cast<double>(h) / out_h, sx = static_cast<double>(w) / out_w;
    for (int oy = 0; oy < out_h; ++oy) {
      double fy = (oy + 0.5) * sy - 0.5;
      int y0 = static_cast<int>(std::floor(fy));
      double ty = fy - y0;
      int y0c = std::clamp(y0, 0, h - 1), y1c = std::clamp(y0 + 1, 0, h - 1);
      for (int ox = 0; ox < out_w; ++ox) {
        double fx = (ox + 0.5) * sx - 0.5;
        int x0 = static_cast<int>(std::floor(fx));
        double tx = fx - x0;
        int x0c = std::clamp(x0, 0, w - 1), x1c = std::clamp(x0 + 1, 0, w - 1);
        size_t o = static_cast<size_t>(oy) * out_w + ox;
        plan.idx[o] = {y0c * w + x0c, y0c * w + x1c, y1c * w + x0c, y1c * w + x1c};
        plan.wgt[o] = {static_cast<float>((1 - ty) * (1 - tx)), static_cast<float>((1 - ty) * tx),
                       static_cast<float>(ty * (1 - tx)), static_cast<float>(ty * tx)};
      }
    }
    return plan;
  }
};

template <typename T>
Var<T> upsample_bilinear_rows(const Var<T>& m, std::shared_ptr<const BilinearPlan> plan) {
  int n = m.rows();
  if (m.cols() != plan->h * plan->w)
    throw std::invalid_argument("upsample_bilinear_rows: column count != h*w");
  int out_c = plan->out_h * plan->out_w;
  int in_c = m.cols();
  Tensor<T> out({n, out_c});
  const auto* idx = plan->idx.data();
  const auto* wgt = plan->wgt.data();
  for (int i = 0; i < n; ++i) {
    const T* src = m.val().data.data() + static_cast<size_t>(i) * in_c;
    T* dst = out.data.data() + static_cast<size_t>(i) * out_c;
    for (int o = 0; o < out_c; ++o) {
      const auto& id = idx[o];
      const auto& wg = wgt[o];
      dst[o] = static_cast<T>(wg[0] * src[id[0]] + wg[1] * src[id[1]] + wg[2] * src[id[2]] +
                              wg[3] * src[id[3]]);
    }
  }
  return make_op<T>(std::move(out), {m}, [m, plan, n, out_c, in_c](Node<T>& nd) {
    if (!m.requires_grad()) return;
    const auto* idx = plan->idx.data();
    const auto* wgt = plan->wgt.data();
    T* gm = m.grad().data.data();
    const T* g = nd.grad.data.data();
    for (int i = 0; i < n; ++i) {
      T* gsrc = gm + static_cast<size_t>(i) * in_c;
      const T* gdst = g + static_cast<size_t>(i) * out_c;
      for (int o = 0; o < out_c; ++o) {
        const auto& id = idx[o];
        const auto& wg = wgt[o];
        for (int k = 0; k < 4; ++k) gsrc[id[k]] += static_cast<T>(wg[k] * gdst[o]);
      }
    }
  });
}

}  // namespace vlseg::ag
