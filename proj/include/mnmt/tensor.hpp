#pragma once

// Dense row-major arrays with tape-free reverse-mode differentiation.
//
// Every op returns a Tensor whose node remembers its inputs and a backward
// closure, but only when at least one input requires a gradient. Inference
// graphs therefore keep no history. backward() orders reachable nodes by
// their creation sequence, which is a topological order of the DAG.

#include <Eigen/Core>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "mnmt/rng.hpp"

namespace mnmt {

struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct DegenerateMaskError : std::domain_error {
  using std::domain_error::domain_error;
};
struct NonFiniteError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

// Additive surrogate for -inf used before masked softmax.
inline constexpr double kMaskedLogit = -1e9;

namespace detail {
inline std::atomic<std::uint64_t>& node_counter() {
  static std::atomic<std::uint64_t> counter{0};
  return counter;
}
}  // namespace detail

template <class T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // lazily sized
  bool requires_grad = false;
  std::uint64_t order = 0;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
  }
};

template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  static Tensor constant(Shape shape, std::vector<T> values) {
    return Tensor(std::move(shape), std::move(values), false);
  }
  static Tensor zeros(Shape shape) {
    const std::size_t n = shape_size(shape);
    return constant(std::move(shape), std::vector<T>(n, T(0)));
  }
  static Tensor parameter(Shape shape, std::vector<T> values) {
    return Tensor(std::move(shape), std::move(values), true);
  }
  static Tensor scalar(T v) { return constant({1}, {v}); }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t size() const { return node_->value.size(); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t rows() const { return rank() == 1 ? 1 : node_->shape[0]; }
  std::size_t cols() const { return node_->shape.back(); }

  std::span<const T> data() const { return node_->value; }
  std::span<T> mutable_data() { return node_->value; }
  const std::vector<T>& values() const { return node_->value; }
  T item() const {
    if (size() != 1) throw ContractError("item() on non-scalar tensor");
    return node_->value[0];
  }
  T operator[](std::size_t i) const { return node_->value[i]; }

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  std::span<const T> grad() const { return node_->grad; }
  void zero_grad() { node_->grad.assign(node_->value.size(), T(0)); }

  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }

  // A detached copy sharing nothing with this tensor's graph.
  Tensor detach() const { return constant(shape(), node_->value); }

  template <class Backward>
  static Tensor from_op(Shape shape, std::vector<T> values,
                        std::initializer_list<const Tensor*> inputs,
                        Backward&& backward);

 private:
  Tensor(Shape shape, std::vector<T> values, bool requires_grad)
      : node_(std::make_shared<Node<T>>()) {
    if (shape_size(shape) != values.size())
      throw DimensionError("tensor shape " + shape_str(shape) +
                           " does not match " + std::to_string(values.size()) +
                           " values");
    node_->shape = std::move(shape);
    node_->value = std::move(values);
    node_->requires_grad = requires_grad;
    node_->order = detail::node_counter()++;
  }

  std::shared_ptr<Node<T>> node_;
};

namespace detail {

inline bool& finite_checks_enabled() {
  static bool enabled = true;
  return enabled;
}

template <class T>
void check_finite(const std::vector<T>& v, const char* op) {
  if (!finite_checks_enabled()) return;
  for (const T x : v)
    if (!std::isfinite(x))
      throw NonFiniteError(std::string("non-finite value produced by ") + op);
}

}  // namespace detail

template <class T>
template <class Backward>
Tensor<T> Tensor<T>::from_op(Shape shape, std::vector<T> values,
                             std::initializer_list<const Tensor*> inputs,
                             Backward&& backward) {
  detail::check_finite(values, "tensor op");
  Tensor out(std::move(shape), std::move(values), false);
  bool any = false;
  for (const Tensor* in : inputs) any = any || in->requires_grad();
  if (any) {
    out.node_->requires_grad = true;
    for (const Tensor* in : inputs) out.node_->parents.push_back(in->node_);
    out.node_->backward = std::forward<Backward>(backward);
  }
  return out;
}

// Runs reverse accumulation from a scalar loss. Gradients accumulate into
// every reachable node that requires one; parameters keep theirs until
// zero_grad().
template <class T>
void backward(const Tensor<T>& loss) {
  if (loss.size() != 1) throw ContractError("backward() needs a scalar loss");
  if (!loss.requires_grad()) return;
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<Node<T>*> stack{loss.node()};
  seen.insert(loss.node());
  while (!stack.empty()) {
    Node<T>* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (auto& p : n->parents) {
      if (p->requires_grad && seen.insert(p.get()).second)
        stack.push_back(p.get());
    }
  }
  std::sort(order.begin(), order.end(),
            [](const Node<T>* a, const Node<T>* b) { return a->order > b->order; });
  loss.node()->ensure_grad();
  loss.node()->grad[0] += T(1);
  for (Node<T>* n : order) {
    if (n->backward && n->grad.size() == n->value.size()) n->backward(*n);
  }
}

// ---------------------------------------------------------------------------
// GEMM kernels (row-major, Eigen-backed).

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

template <class T>
ConstMatMap<T> view(const std::vector<T>& v, std::size_t r, std::size_t c) {
  return ConstMatMap<T>(v.data(), static_cast<Eigen::Index>(r),
                        static_cast<Eigen::Index>(c));
}
template <class T>
MatMap<T> view(std::vector<T>& v, std::size_t r, std::size_t c) {
  return MatMap<T>(v.data(), static_cast<Eigen::Index>(r),
                   static_cast<Eigen::Index>(c));
}

template <class T>
void accumulate(Node<T>& target, const std::vector<T>& delta) {
  if (!target.requires_grad) return;
  target.ensure_grad();
  for (std::size_t i = 0; i < delta.size(); ++i) target.grad[i] += delta[i];
}

template <class T>
void require_matrix(const Tensor<T>& t, const char* op) {
  if (t.rank() != 2)
    throw DimensionError(std::string(op) + ": expected a matrix, got " +
                         shape_str(t.shape()));
}

}  // namespace detail

// a[m,k] x b[k,n], or a[m,k] x b[n,k]^T when transpose_b is set.
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b,
                 bool transpose_b = false) {
  detail::require_matrix(a, "matmul");
  detail::require_matrix(b, "matmul");
  const std::size_t m = a.shape()[0], k = a.shape()[1];
  const std::size_t bk = transpose_b ? b.shape()[1] : b.shape()[0];
  const std::size_t n = transpose_b ? b.shape()[0] : b.shape()[1];
  if (k != bk)
    throw DimensionError("matmul: inner dimensions differ " +
                         shape_str(a.shape()) + " x " + shape_str(b.shape()) +
                         (transpose_b ? "^T" : ""));
  std::vector<T> out(m * n);
  auto A = detail::view(a.values(), m, k);
  auto C = detail::view(out, m, n);
  if (transpose_b)
    C.noalias() = A * detail::view(b.values(), n, k).transpose();
  else
    C.noalias() = A * detail::view(b.values(), k, n);
  detail::check_finite(out, "matmul");
  return Tensor<T>::from_op(
      {m, n}, std::move(out), {&a, &b},
      [m, k, n, transpose_b](Node<T>& self) {
        Node<T>& na = *self.parents[0];
        Node<T>& nb = *self.parents[1];
        auto dC = detail::view(static_cast<const std::vector<T>&>(self.grad), m, n);
        if (na.requires_grad) {
          na.ensure_grad();
          auto dA = detail::view(na.grad, m, k);
          if (transpose_b)
            dA.noalias() += dC * detail::view(static_cast<const std::vector<T>&>(nb.value), n, k);
          else
            dA.noalias() += dC * detail::view(static_cast<const std::vector<T>&>(nb.value), k, n).transpose();
        }
        if (nb.requires_grad) {
          nb.ensure_grad();
          auto A = detail::view(static_cast<const std::vector<T>&>(na.value), m, k);
          if (transpose_b)
            detail::view(nb.grad, n, k).noalias() += dC.transpose() * A;
          else
            detail::view(nb.grad, k, n).noalias() += A.transpose() * dC;
        }
      });
}

// x[m,in] * w[in,out] + b[out]
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  detail::require_matrix(x, "linear");
  detail::require_matrix(w, "linear");
  const std::size_t m = x.shape()[0], in = x.shape()[1], out_dim = w.shape()[1];
  if (w.shape()[0] != in || b.size() != out_dim)
    throw DimensionError("linear: " + shape_str(x.shape()) + " x " +
                         shape_str(w.shape()) + " + " + shape_str(b.shape()));
  std::vector<T> out(m * out_dim);
  auto Y = detail::view(out, m, out_dim);
  Y.noalias() = detail::view(x.values(), m, in) * detail::view(w.values(), in, out_dim);
  Y.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(
      b.values().data(), static_cast<Eigen::Index>(out_dim));
  detail::check_finite(out, "linear");
  return Tensor<T>::from_op(
      {m, out_dim}, std::move(out), {&x, &w, &b},
      [m, in, out_dim](Node<T>& self) {
        Node<T>& nx = *self.parents[0];
        Node<T>& nw = *self.parents[1];
        Node<T>& nb = *self.parents[2];
        auto dY = detail::view(static_cast<const std::vector<T>&>(self.grad), m, out_dim);
        if (nx.requires_grad) {
          nx.ensure_grad();
          detail::view(nx.grad, m, in).noalias() +=
              dY * detail::view(static_cast<const std::vector<T>&>(nw.value), in, out_dim).transpose();
        }
        if (nw.requires_grad) {
          nw.ensure_grad();
          detail::view(nw.grad, in, out_dim).noalias() +=
              detail::view(static_cast<const std::vector<T>&>(nx.value), m, in).transpose() * dY;
        }
        if (nb.requires_grad) {
          nb.ensure_grad();
          for (std::size_t r = 0; r < m; ++r)
            for (std::size_t c = 0; c < out_dim; ++c)
              nb.grad[c] += self.grad[r * out_dim + c];
        }
      });
}

// ---------------------------------------------------------------------------
// Elementwise.

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw DimensionError("add: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  detail::check_finite(out, "add");
  return Tensor<T>::from_op(a.shape(), std::move(out), {&a, &b},
                            [](Node<T>& self) {
                              detail::accumulate(*self.parents[0], self.grad);
                              detail::accumulate(*self.parents[1], self.grad);
                            });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw DimensionError("mul: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  detail::check_finite(out, "mul");
  return Tensor<T>::from_op(a.shape(), std::move(out), {&a, &b},
                            [](Node<T>& self) {
                              Node<T>& na = *self.parents[0];
                              Node<T>& nb = *self.parents[1];
                              if (na.requires_grad) {
                                na.ensure_grad();
                                for (std::size_t i = 0; i < self.grad.size(); ++i)
                                  na.grad[i] += self.grad[i] * nb.value[i];
                              }
                              if (nb.requires_grad) {
                                nb.ensure_grad();
                                for (std::size_t i = 0; i < self.grad.size(); ++i)
                                  nb.grad[i] += self.grad[i] * na.value[i];
                              }
                            });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * factor;
  detail::check_finite(out, "scale");
  return Tensor<T>::from_op(a.shape(), std::move(out), {&a},
                            [factor](Node<T>& self) {
                              Node<T>& na = *self.parents[0];
                              na.ensure_grad();
                              for (std::size_t i = 0; i < self.grad.size(); ++i)
                                na.grad[i] += self.grad[i] * factor;
                            });
}

// Adds a constant (non-differentiable) array of the same shape.
template <class T>
Tensor<T> add_constant(const Tensor<T>& a, std::span<const T> c) {
  if (c.size() != a.size()) throw DimensionError("add_constant: size mismatch");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + c[i];
  detail::check_finite(out, "add_constant");
  return Tensor<T>::from_op(a.shape(), std::move(out), {&a}, [](Node<T>& self) {
    detail::accumulate(*self.parents[0], self.grad);
  });
}

template <class T>
Tensor<T> relu(const Tensor<T>& a) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] > T(0) ? a[i] : T(0);
  return Tensor<T>::from_op(a.shape(), std::move(out), {&a}, [](Node<T>& self) {
    Node<T>& na = *self.parents[0];
    na.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      if (na.value[i] > T(0)) na.grad[i] += self.grad[i];
  });
}

template <class T>
T stable_sigmoid(T z) {
  if (z >= T(0)) return T(1) / (T(1) + std::exp(-z));
  const T e = std::exp(z);
  return e / (T(1) + e);
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = stable_sigmoid(a[i]);
  return Tensor<T>::from_op(a.shape(), std::move(out), {&a}, [](Node<T>& self) {
    Node<T>& na = *self.parents[0];
    na.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const T s = self.value[i];
      na.grad[i] += self.grad[i] * s * (T(1) - s);
    }
  });
}

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
  T total = 0;
  for (const T x : a.data()) total += x;
  return Tensor<T>::from_op({1}, {total}, {&a}, [](Node<T>& self) {
    Node<T>& na = *self.parents[0];
    na.ensure_grad();
    for (auto& g : na.grad) g += self.grad[0];
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.size()));
}

// Row r of the result is a's row where keep[r] != 0, else b's row.
template <class T>
Tensor<T> select_rows(const Tensor<T>& a, const Tensor<T>& b,
                      std::span<const std::uint8_t> keep) {
  if (a.shape() != b.shape() || keep.size() != a.rows())
    throw DimensionError("select_rows: shape mismatch");
  const std::size_t cols = a.cols();
  std::vector<T> out(a.size());
  for (std::size_t r = 0; r < keep.size(); ++r) {
    const auto& src = keep[r] ? a.values() : b.values();
    std::copy_n(src.begin() + r * cols, cols, out.begin() + r * cols);
  }
  std::vector<std::uint8_t> mask(keep.begin(), keep.end());
  return Tensor<T>::from_op(
      a.shape(), std::move(out), {&a, &b},
      [mask = std::move(mask), cols](Node<T>& self) {
        for (int side = 0; side < 2; ++side) {
          Node<T>& n = *self.parents[side];
          if (!n.requires_grad) continue;
          n.ensure_grad();
          for (std::size_t r = 0; r < mask.size(); ++r) {
            if ((mask[r] != 0) != (side == 0)) continue;
            for (std::size_t c = 0; c < cols; ++c)
              n.grad[r * cols + c] += self.grad[r * cols + c];
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Normalization, embeddings, dropout.

template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma,
                     const Tensor<T>& beta, T eps = T(1e-5)) {
  detail::require_matrix(x, "layer_norm");
  const std::size_t m = x.shape()[0], d = x.shape()[1];
  if (gamma.size() != d || beta.size() != d)
    throw DimensionError("layer_norm: gain/bias width mismatch");
  std::vector<T> out(m * d), xhat(m * d), inv_std(m);
  for (std::size_t r = 0; r < m; ++r) {
    const T* row = x.values().data() + r * d;
    T mu = 0;
    for (std::size_t c = 0; c < d; ++c) mu += row[c];
    mu /= static_cast<T>(d);
    T var = 0;
    for (std::size_t c = 0; c < d; ++c) var += (row[c] - mu) * (row[c] - mu);
    var /= static_cast<T>(d);
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t c = 0; c < d; ++c) {
      const T h = (row[c] - mu) * is;
      xhat[r * d + c] = h;
      out[r * d + c] = h * gamma[c] + beta[c];
    }
  }
  detail::check_finite(out, "layer_norm");
  return Tensor<T>::from_op(
      x.shape(), std::move(out), {&x, &gamma, &beta},
      [m, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& self) {
        Node<T>& nx = *self.parents[0];
        Node<T>& ng = *self.parents[1];
        Node<T>& nb = *self.parents[2];
        if (ng.requires_grad) ng.ensure_grad();
        if (nb.requires_grad) nb.ensure_grad();
        if (nx.requires_grad) nx.ensure_grad();
        std::vector<T> dxhat(d);
        for (std::size_t r = 0; r < m; ++r) {
          const T* dy = self.grad.data() + r * d;
          const T* h = xhat.data() + r * d;
          T mean_dxhat = 0, mean_dxhat_h = 0;
          for (std::size_t c = 0; c < d; ++c) {
            if (ng.requires_grad) ng.grad[c] += dy[c] * h[c];
            if (nb.requires_grad) nb.grad[c] += dy[c];
            dxhat[c] = dy[c] * ng.value[c];
            mean_dxhat += dxhat[c];
            mean_dxhat_h += dxhat[c] * h[c];
          }
          if (!nx.requires_grad) continue;
          mean_dxhat /= static_cast<T>(d);
          mean_dxhat_h /= static_cast<T>(d);
          for (std::size_t c = 0; c < d; ++c)
            nx.grad[r * d + c] +=
                inv_std[r] * (dxhat[c] - mean_dxhat - h[c] * mean_dxhat_h);
        }
      });
}

// Gathers rows of table[vocab, d]; ids outside the table are an error.
template <class T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const std::int32_t> ids) {
  detail::require_matrix(table, "embedding");
  const std::size_t vocab = table.shape()[0], d = table.shape()[1];
  std::vector<T> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab)
      throw std::out_of_range("embedding: id " + std::to_string(ids[i]) +
                              " outside vocabulary of " + std::to_string(vocab));
    std::copy_n(table.values().begin() + static_cast<std::size_t>(ids[i]) * d, d,
                out.begin() + i * d);
  }
  std::vector<std::int32_t> idx(ids.begin(), ids.end());
  return Tensor<T>::from_op(
      {ids.size(), d}, std::move(out), {&table},
      [idx = std::move(idx), d](Node<T>& self) {
        Node<T>& nt = *self.parents[0];
        nt.ensure_grad();
        for (std::size_t i = 0; i < idx.size(); ++i)
          for (std::size_t c = 0; c < d; ++c)
            nt.grad[static_cast<std::size_t>(idx[i]) * d + c] += self.grad[i * d + c];
      });
}

// Inverted dropout. The keep decision for element i is a pure function of
// (seed, stream, i), so replays are bit-identical.
template <class T>
Tensor<T> dropout(const Tensor<T>& x, double rate, std::uint64_t seed,
                  std::uint64_t stream) {
  if (rate <= 0.0) return x;
  if (rate >= 1.0) throw ContractError("dropout rate must be < 1");
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  std::vector<T> factor(x.size()), out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    factor[i] = counter_uniform(seed, stream, i) >= rate ? keep_scale : T(0);
    out[i] = x[i] * factor[i];
  }
  return Tensor<T>::from_op(x.shape(), std::move(out), {&x},
                            [factor = std::move(factor)](Node<T>& self) {
                              Node<T>& nx = *self.parents[0];
                              nx.ensure_grad();
                              for (std::size_t i = 0; i < factor.size(); ++i)
                                nx.grad[i] += self.grad[i] * factor[i];
                            });
}

// ---------------------------------------------------------------------------
// Softmax family.

// Softmax over one row where mask[j] == 0 entries are excluded. Masked
// entries are pushed to kMaskedLogit before normalizing and then written as
// exact zeros. Returns false for an all-masked row (output left all zero).
template <class T, class MaskFn>
bool masked_softmax_row(const T* logits, std::size_t n, MaskFn&& allowed, T* out) {
  bool any = false;
  T max_v = T(kMaskedLogit);
  for (std::size_t j = 0; j < n; ++j) {
    const T s = allowed(j) ? logits[j] : logits[j] + T(kMaskedLogit);
    out[j] = s;
    if (allowed(j)) {
      any = true;
      max_v = std::max(max_v, s);
    }
  }
  if (!any) {
    std::fill(out, out + n, T(0));
    return false;
  }
  T total = 0;
  for (std::size_t j = 0; j < n; ++j) {
    out[j] = std::exp(out[j] - max_v);
    total += out[j];
  }
  for (std::size_t j = 0; j < n; ++j) out[j] = allowed(j) ? out[j] / total : T(0);
  return true;
}

enum class EmptyRows { error, zero };

// Row-wise softmax over the last axis of logits[rows, cols]. mask is either
// rows*cols or cols entries (broadcast over rows); 1 keeps an entry.
template <class T>
Tensor<T> softmax_masked(const Tensor<T>& logits, std::span<const std::uint8_t> mask,
                         EmptyRows empty = EmptyRows::error) {
  const std::size_t cols = logits.cols();
  const std::size_t rows = logits.size() / cols;
  const bool broadcast = mask.size() == cols && rows != 1;
  if (!broadcast && mask.size() != logits.size())
    throw DimensionError("softmax_masked: mask of " + std::to_string(mask.size()) +
                         " entries for logits " + shape_str(logits.shape()));
  std::vector<T> out(logits.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const std::uint8_t* m = mask.data() + (broadcast ? 0 : r * cols);
    const bool ok = masked_softmax_row(logits.values().data() + r * cols, cols,
                                       [m](std::size_t j) { return m[j] != 0; },
                                       out.data() + r * cols);
    if (!ok && empty == EmptyRows::error)
      throw DegenerateMaskError("softmax_masked: row " + std::to_string(r) +
                                " has no unmasked entry");
  }
  return Tensor<T>::from_op(logits.shape(), std::move(out), {&logits},
                            [rows, cols](Node<T>& self) {
                              Node<T>& nl = *self.parents[0];
                              nl.ensure_grad();
                              for (std::size_t r = 0; r < rows; ++r) {
                                const T* p = self.value.data() + r * cols;
                                const T* g = self.grad.data() + r * cols;
                                T dot = 0;
                                for (std::size_t j = 0; j < cols; ++j) dot += p[j] * g[j];
                                for (std::size_t j = 0; j < cols; ++j)
                                  nl.grad[r * cols + j] += p[j] * (g[j] - dot);
                              }
                            });
}

template <class T>
void log_softmax_row(const T* z, std::size_t n, T* out) {
  T max_v = z[0];
  for (std::size_t j = 1; j < n; ++j) max_v = std::max(max_v, z[j]);
  T total = 0;
  for (std::size_t j = 0; j < n; ++j) total += std::exp(z[j] - max_v);
  const T lse = max_v + std::log(total);
  for (std::size_t j = 0; j < n; ++j) out[j] = z[j] - lse;
}

template <class T>
Tensor<T> log_softmax(const Tensor<T>& logits) {
  const std::size_t cols = logits.cols();
  const std::size_t rows = logits.size() / cols;
  std::vector<T> out(logits.size());
  for (std::size_t r = 0; r < rows; ++r)
    log_softmax_row(logits.values().data() + r * cols, cols, out.data() + r * cols);
  return Tensor<T>::from_op(logits.shape(), std::move(out), {&logits},
                            [rows, cols](Node<T>& self) {
                              Node<T>& nl = *self.parents[0];
                              nl.ensure_grad();
                              for (std::size_t r = 0; r < rows; ++r) {
                                T gsum = 0;
                                for (std::size_t j = 0; j < cols; ++j)
                                  gsum += self.grad[r * cols + j];
                                for (std::size_t j = 0; j < cols; ++j)
                                  nl.grad[r * cols + j] +=
                                      self.grad[r * cols + j] -
                                      std::exp(self.value[r * cols + j]) * gsum;
                              }
                            });
}

// Mean token cross-entropy over rows with valid[r] != 0. With smoothing e,
// each row's target is (1-e) on the gold id plus e/V uniform mass.
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::int32_t> targets,
                        std::span<const std::uint8_t> valid, double smoothing = 0.0) {
  detail::require_matrix(logits, "cross_entropy");
  const std::size_t rows = logits.shape()[0], vocab = logits.shape()[1];
  if (targets.size() != rows || valid.size() != rows)
    throw DimensionError("cross_entropy: targets/valid must have one entry per row");
  const T eps = static_cast<T>(smoothing);
  std::size_t count = 0;
  for (const auto v : valid) count += v != 0;
  std::vector<T> logp(vocab);
  std::vector<T> probs(rows * vocab, T(0));
  T total = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (!valid[r]) continue;
    const auto t = targets[r];
    if (t < 0 || static_cast<std::size_t>(t) >= vocab)
      throw std::out_of_range("cross_entropy: target id out of range");
    log_softmax_row(logits.values().data() + r * vocab, vocab, logp.data());
    T smooth = 0;
    for (std::size_t j = 0; j < vocab; ++j) {
      smooth -= logp[j];
      probs[r * vocab + j] = std::exp(logp[j]);
    }
    total += (T(1) - eps) * -logp[static_cast<std::size_t>(t)] +
             eps * smooth / static_cast<T>(vocab);
  }
  const T inv = count ? T(1) / static_cast<T>(count) : T(0);
  std::vector<std::int32_t> tgt(targets.begin(), targets.end());
  std::vector<std::uint8_t> val(valid.begin(), valid.end());
  return Tensor<T>::from_op(
      {1}, {total * inv}, {&logits},
      [probs = std::move(probs), tgt = std::move(tgt), val = std::move(val), vocab,
       eps, inv](Node<T>& self) {
        Node<T>& nl = *self.parents[0];
        nl.ensure_grad();
        const T g = self.grad[0] * inv;
        const T uniform = eps / static_cast<T>(vocab);
        for (std::size_t r = 0; r < val.size(); ++r) {
          if (!val[r]) continue;
          T* dst = nl.grad.data() + r * vocab;
          const T* p = probs.data() + r * vocab;
          for (std::size_t j = 0; j < vocab; ++j) dst[j] += g * (p[j] - uniform);
          dst[static_cast<std::size_t>(tgt[r])] -= g * (T(1) - eps);
        }
      });
}

// Mean binary cross-entropy of sigmoid(logits) against 0/1 targets over
// valid entries, computed from logits for stability.
template <class T>
Tensor<T> binary_cross_entropy(const Tensor<T>& logits, std::span<const std::uint8_t> targets,
                               std::span<const std::uint8_t> valid) {
  const std::size_t n = logits.size();
  if (targets.size() != n || valid.size() != n)
    throw DimensionError("binary_cross_entropy: length mismatch");
  std::size_t count = 0;
  T total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!valid[i]) continue;
    ++count;
    const T z = logits[i];
    const T y = targets[i] ? T(1) : T(0);
    total += std::max(z, T(0)) - z * y + std::log1p(std::exp(-std::abs(z)));
  }
  const T inv = count ? T(1) / static_cast<T>(count) : T(0);
  std::vector<std::uint8_t> tgt(targets.begin(), targets.end());
  std::vector<std::uint8_t> val(valid.begin(), valid.end());
  return Tensor<T>::from_op(
      {1}, {total * inv}, {&logits},
      [tgt = std::move(tgt), val = std::move(val), inv](Node<T>& self) {
        Node<T>& nl = *self.parents[0];
        nl.ensure_grad();
        const T g = self.grad[0] * inv;
        for (std::size_t i = 0; i < val.size(); ++i) {
          if (!val[i]) continue;
          nl.grad[i] += g * (stable_sigmoid(nl.value[i]) - (tgt[i] ? T(1) : T(0)));
        }
      });
}

// ---------------------------------------------------------------------------
// Multi-head scaled dot-product attention over flattened [batch*len, d]
// projections. Key j of batch item b is visible iff key_mask[b*k_len + j]
// (and j <= i when causal).

struct AttentionShape {
  std::size_t batch = 0;
  std::size_t q_len = 0;
  std::size_t k_len = 0;
  std::size_t heads = 1;
  bool causal = false;
  EmptyRows empty = EmptyRows::error;
};

template <class T>
struct AttentionOutput {
  Tensor<T> context;  // [batch*q_len, d]
  // [batch, heads, q_len, k_len] attention probabilities.
  std::shared_ptr<const std::vector<T>> probs;
};

template <class T>
AttentionOutput<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                             std::span<const std::uint8_t> key_mask,
                             const AttentionShape& s) {
  const std::size_t d = q.cols();
  if (d % s.heads != 0) throw DimensionError("attention: width not divisible by heads");
  if (q.size() != s.batch * s.q_len * d || k.size() != s.batch * s.k_len * d ||
      v.size() != k.size() || k.cols() != d)
    throw DimensionError("attention: projection shapes disagree with batch layout");
  if (key_mask.size() != s.batch * s.k_len)
    throw DimensionError("attention: key mask length mismatch");
  const std::size_t dh = d / s.heads;
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));
  auto probs = std::make_shared<std::vector<T>>(s.batch * s.heads * s.q_len * s.k_len);
  std::vector<T> out(s.batch * s.q_len * d, T(0));
  std::vector<T> scores(s.k_len);
  const T* Q = q.values().data();
  const T* K = k.values().data();
  const T* V = v.values().data();
  for (std::size_t b = 0; b < s.batch; ++b) {
    const std::uint8_t* km = key_mask.data() + b * s.k_len;
    for (std::size_t h = 0; h < s.heads; ++h) {
      for (std::size_t i = 0; i < s.q_len; ++i) {
        const T* qi = Q + (b * s.q_len + i) * d + h * dh;
        for (std::size_t j = 0; j < s.k_len; ++j) {
          const T* kj = K + (b * s.k_len + j) * d + h * dh;
          T dot = 0;
          for (std::size_t c = 0; c < dh; ++c) dot += qi[c] * kj[c];
          scores[j] = dot * inv_sqrt;
        }
        T* p = probs->data() + ((b * s.heads + h) * s.q_len + i) * s.k_len;
        const bool ok = masked_softmax_row(
            scores.data(), s.k_len,
            [km, i, causal = s.causal](std::size_t j) {
              return km[j] != 0 && (!causal || j <= i);
            },
            p);
        if (!ok) {
          if (s.empty == EmptyRows::error)
            throw DegenerateMaskError("attention: query row without visible keys");
          continue;
        }
        T* oi = out.data() + (b * s.q_len + i) * d + h * dh;
        for (std::size_t j = 0; j < s.k_len; ++j) {
          if (p[j] == T(0)) continue;
          const T* vj = V + (b * s.k_len + j) * d + h * dh;
          for (std::size_t c = 0; c < dh; ++c) oi[c] += p[j] * vj[c];
        }
      }
    }
  }
  detail::check_finite(out, "attention");
  Tensor<T> ctx = Tensor<T>::from_op(
      {s.batch * s.q_len, d}, std::move(out), {&q, &k, &v},
      [s, d, dh, inv_sqrt, probs](Node<T>& self) {
        Node<T>& nq = *self.parents[0];
        Node<T>& nk = *self.parents[1];
        Node<T>& nv = *self.parents[2];
        nq.ensure_grad();
        nk.ensure_grad();
        nv.ensure_grad();
        std::vector<T> dp(s.k_len);
        for (std::size_t b = 0; b < s.batch; ++b) {
          for (std::size_t h = 0; h < s.heads; ++h) {
            for (std::size_t i = 0; i < s.q_len; ++i) {
              const T* p = probs->data() + ((b * s.heads + h) * s.q_len + i) * s.k_len;
              const T* go = self.grad.data() + (b * s.q_len + i) * d + h * dh;
              T dot = 0;
              for (std::size_t j = 0; j < s.k_len; ++j) {
                if (p[j] == T(0)) {
                  dp[j] = 0;
                  continue;
                }
                const T* vj = nv.value.data() + (b * s.k_len + j) * d + h * dh;
                T* gv = nv.grad.data() + (b * s.k_len + j) * d + h * dh;
                T acc = 0;
                for (std::size_t c = 0; c < dh; ++c) {
                  acc += go[c] * vj[c];
                  gv[c] += p[j] * go[c];
                }
                dp[j] = acc;
                dot += p[j] * acc;
              }
              const T* qi = nq.value.data() + (b * s.q_len + i) * d + h * dh;
              T* gq = nq.grad.data() + (b * s.q_len + i) * d + h * dh;
              for (std::size_t j = 0; j < s.k_len; ++j) {
                if (p[j] == T(0)) continue;
                const T ds = p[j] * (dp[j] - dot) * inv_sqrt;
                const T* kj = nk.value.data() + (b * s.k_len + j) * d + h * dh;
                T* gk = nk.grad.data() + (b * s.k_len + j) * d + h * dh;
                for (std::size_t c = 0; c < dh; ++c) {
                  gq[c] += ds * kj[c];
                  gk[c] += ds * qi[c];
                }
              }
            }
          }
        }
      });
  return {std::move(ctx), std::move(probs)};
}

}  // namespace mnmt
