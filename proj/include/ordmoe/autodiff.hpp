#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "ordmoe/common.hpp"

namespace ordmoe {

/// Dense row-major tensor node in a dynamically built compute graph.
/// Graphs are DAGs held together by shared ownership of parent nodes;
/// values are computed eagerly, gradients on demand by backward().
template <class Real>
struct TensorNode {
  Shape shape;
  std::vector<Real> value;
  std::vector<Real> grad;  // allocated lazily, same length as value
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backprop;  // pulls own grad into parents
  const char* op = "leaf";
  std::uint64_t visit_epoch = 0;

  std::size_t numel() const { return value.size(); }

  /// Gradient accumulation target, or nullptr when grads are not tracked.
  Real* grad_acc() {
    if (!requires_grad) return nullptr;
    if (grad.size() != value.size()) grad.assign(value.size(), Real(0));
    return grad.data();
  }
};

template <class Real = double>
class Tensor {
 public:
  using Node = TensorNode<Real>;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return filled(std::move(shape), Real(0), requires_grad);
  }

  static Tensor filled(Shape shape, Real v, bool requires_grad = false) {
    auto n = std::make_shared<Node>();
    n->value.assign(shape_numel(shape), v);
    n->shape = std::move(shape);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor from(Shape shape, std::vector<Real> data, bool requires_grad = false) {
    if (shape_numel(shape) != data.size())
      throw shape_error("tensor data length " + std::to_string(data.size()) +
                        " does not match shape " + shape_str(shape));
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor scalar(Real v, bool requires_grad = false) {
    return from({1}, {v}, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t numel() const { return node_->value.size(); }
  bool is_scalar() const { return numel() == 1; }
  bool requires_grad() const { return node_->requires_grad; }

  std::vector<Real>& value() { return node_->value; }
  const std::vector<Real>& value() const { return node_->value; }

  /// Gradient buffer; empty until backward() has touched this tensor.
  const std::vector<Real>& grad() const { return node_->grad; }

  Real item() const {
    if (!is_scalar()) throw shape_error("item() on non-scalar tensor " + shape_str(shape()));
    return node_->value[0];
  }

  void zero_grad() const { node_->grad.assign(node_->value.size(), Real(0)); }

  std::shared_ptr<Node> node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

namespace detail {

inline std::atomic<std::uint64_t> g_visit_epoch{1};

template <class Real>
Tensor<Real> make_node(Shape shape, std::vector<std::shared_ptr<TensorNode<Real>>> parents,
                       const char* op) {
  auto n = std::make_shared<TensorNode<Real>>();
  n->value.assign(shape_numel(shape), Real(0));
  n->shape = std::move(shape);
  n->op = op;
  for (const auto& p : parents) n->requires_grad = n->requires_grad || p->requires_grad;
  n->parents = std::move(parents);
  return Tensor<Real>(std::move(n));
}

template <class Real>
void check_same_shape(const Tensor<Real>& a, const Tensor<Real>& b, const char* op) {
  if (a.shape() != b.shape())
    throw shape_error(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                      shape_str(b.shape()));
}

/// Softmax over a subset of one contiguous row, with max-subtraction.
/// Writes normalized weights at the masked positions, zeros elsewhere.
template <class Real>
void softmax_row_subset(const Real* in, Real* out, std::size_t n,
                        const std::vector<int>& idx) {
  for (std::size_t j = 0; j < n; ++j) out[j] = Real(0);
  Real mx = in[idx[0]];
  for (int j : idx) mx = std::max(mx, in[j]);
  Real denom = Real(0);
  for (int j : idx) {
    const Real e = std::exp(in[j] - mx);
    out[j] = e;
    denom += e;
  }
  for (int j : idx) out[j] /= denom;
}

/// Backward of softmax_row_subset: grad_in[j] += y_j * (g_j - sum_k g_k y_k).
template <class Real>
void softmax_row_subset_backward(const Real* y, const Real* g, Real* grad_in,
                                 const std::vector<int>& idx) {
  Real s = Real(0);
  for (int j : idx) s += g[j] * y[j];
  for (int j : idx) grad_in[j] += y[j] * (g[j] - s);
}

inline void validate_index_set(const std::vector<int>& idx, std::size_t n, const char* op) {
  if (idx.empty()) throw std::invalid_argument(std::string(op) + ": empty index set");
  for (int j : idx)
    if (j < 0 || static_cast<std::size_t>(j) >= n)
      throw std::invalid_argument(std::string(op) + ": index " + std::to_string(j) +
                                  " out of range for size " + std::to_string(n));
}

inline std::vector<int> sorted_unique(std::vector<int> idx) {
  std::sort(idx.begin(), idx.end());
  idx.erase(std::unique(idx.begin(), idx.end()), idx.end());
  return idx;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise and scalar ops
// ---------------------------------------------------------------------------

template <class Real>
Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b) {
  detail::check_same_shape(a, b, "add");
  auto out = detail::make_node<Real>(a.shape(), {a.node(), b.node()}, "add");
  auto& v = out.value();
  const auto& av = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = av[i] + bv[i];
  if (out.requires_grad()) {
    out.node()->backprop = [](TensorNode<Real>& self) {
      for (int p = 0; p < 2; ++p)
        if (Real* g = self.parents[p]->grad_acc())
          for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    };
  }
  return out;
}

template <class Real>
Tensor<Real> sub(const Tensor<Real>& a, const Tensor<Real>& b) {
  detail::check_same_shape(a, b, "sub");
  auto out = detail::make_node<Real>(a.shape(), {a.node(), b.node()}, "sub");
  for (std::size_t i = 0; i < out.numel(); ++i)
    out.value()[i] = a.value()[i] - b.value()[i];
  if (out.requires_grad()) {
    out.node()->backprop = [](TensorNode<Real>& self) {
      if (Real* g = self.parents[0]->grad_acc())
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
      if (Real* g = self.parents[1]->grad_acc())
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
    };
  }
  return out;
}

template <class Real>
Tensor<Real> mul(const Tensor<Real>& a, const Tensor<Real>& b) {
  detail::check_same_shape(a, b, "mul");
  auto out = detail::make_node<Real>(a.shape(), {a.node(), b.node()}, "mul");
  for (std::size_t i = 0; i < out.numel(); ++i)
    out.value()[i] = a.value()[i] * b.value()[i];
  if (out.requires_grad()) {
    out.node()->backprop = [](TensorNode<Real>& self) {
      const auto& av = self.parents[0]->value;
      const auto& bv = self.parents[1]->value;
      if (Real* g = self.parents[0]->grad_acc())
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * bv[i];
      if (Real* g = self.parents[1]->grad_acc())
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * av[i];
    };
  }
  return out;
}

template <class Real>
Tensor<Real> neg(const Tensor<Real>& a) {
  auto out = detail::make_node<Real>(a.shape(), {a.node()}, "neg");
  for (std::size_t i = 0; i < out.numel(); ++i) out.value()[i] = -a.value()[i];
  if (out.requires_grad()) {
    out.node()->backprop = [](TensorNode<Real>& self) {
      if (Real* g = self.parents[0]->grad_acc())
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
    };
  }
  return out;
}

template <class Real>
Tensor<Real> scale(const Tensor<Real>& a, Real c) {
  auto out = detail::make_node<Real>(a.shape(), {a.node()}, "scale");
  for (std::size_t i = 0; i < out.numel(); ++i) out.value()[i] = a.value()[i] * c;
  if (out.requires_grad()) {
    out.node()->backprop = [c](TensorNode<Real>& self) {
      if (Real* g = self.parents[0]->grad_acc())
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * c;
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

template <class Real>
Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[0])
    throw shape_error("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                      shape_str(b.shape()));
  const std::size_t m = a.shape()[0], k = a.shape()[1], p = b.shape()[1];
  auto out = detail::make_node<Real>({m, p}, {a.node(), b.node()}, "matmul");
  const Real* av = a.value().data();
  const Real* bv = b.value().data();
  Real* ov = out.value().data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t kk = 0; kk < k; ++kk) {
      const Real s = av[i * k + kk];
      const Real* brow = bv + kk * p;
      Real* orow = ov + i * p;
      for (std::size_t j = 0; j < p; ++j) orow[j] += s * brow[j];
    }
  if (out.requires_grad()) {
    out.node()->backprop = [m, k, p](TensorNode<Real>& self) {
      const Real* g = self.grad.data();
      const Real* av2 = self.parents[0]->value.data();
      const Real* bv2 = self.parents[1]->value.data();
      if (Real* ga = self.parents[0]->grad_acc()) {
        // ga += g . b^T
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t kk = 0; kk < k; ++kk) {
            const Real* grow = g + i * p;
            const Real* brow = bv2 + kk * p;
            Real acc = Real(0);
            for (std::size_t j = 0; j < p; ++j) acc += grow[j] * brow[j];
            ga[i * k + kk] += acc;
          }
      }
      if (Real* gb = self.parents[1]->grad_acc()) {
        // gb += a^T . g
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t kk = 0; kk < k; ++kk) {
            const Real s = av2[i * k + kk];
            const Real* grow = g + i * p;
            Real* gbrow = gb + kk * p;
            for (std::size_t j = 0; j < p; ++j) gbrow[j] += s * grow[j];
          }
      }
    };
  }
  return out;
}

/// y = M . v for M[n x d], v[d]; the 1-D counterpart of matmul.
template <class Real>
Tensor<Real> matvec(const Tensor<Real>& m, const Tensor<Real>& v) {
  if (m.shape().size() != 2 || v.shape().size() != 1 || m.shape()[1] != v.shape()[0])
    throw shape_error("matvec: incompatible shapes " + shape_str(m.shape()) + " and " +
                      shape_str(v.shape()));
  const std::size_t n = m.shape()[0], d = m.shape()[1];
  auto out = detail::make_node<Real>({n}, {m.node(), v.node()}, "matvec");
  for (std::size_t i = 0; i < n; ++i) {
    Real acc = Real(0);
    const Real* row = m.value().data() + i * d;
    for (std::size_t kk = 0; kk < d; ++kk) acc += row[kk] * v.value()[kk];
    out.value()[i] = acc;
  }
  if (out.requires_grad()) {
    out.node()->backprop = [n, d](TensorNode<Real>& self) {
      const auto& mv = self.parents[0]->value;
      const auto& vv = self.parents[1]->value;
      if (Real* gm = self.parents[0]->grad_acc())
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t kk = 0; kk < d; ++kk) gm[i * d + kk] += self.grad[i] * vv[kk];
      if (Real* gv = self.parents[1]->grad_acc())
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t kk = 0; kk < d; ++kk) gv[kk] += self.grad[i] * mv[i * d + kk];
    };
  }
  return out;
}

template <class Real>
Tensor<Real> transpose(const Tensor<Real>& a) {
  if (a.shape().size() != 2)
    throw shape_error("transpose: expected 2-D tensor, got " + shape_str(a.shape()));
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  auto out = detail::make_node<Real>({n, m}, {a.node()}, "transpose");
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.value()[j * m + i] = a.value()[i * n + j];
  if (out.requires_grad()) {
    out.node()->backprop = [m, n](TensorNode<Real>& self) {
      if (Real* g = self.parents[0]->grad_acc())
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[j * m + i];
    };
  }
  return out;
}

/// Broadcast-add a length-d vector to every row of a [T x d] matrix.
template <class Real>
Tensor<Real> add_rows(const Tensor<Real>& x, const Tensor<Real>& bias) {
  if (x.shape().size() != 2 || bias.shape().size() != 1 || x.shape()[1] != bias.shape()[0])
    throw shape_error("add_rows: incompatible shapes " + shape_str(x.shape()) + " and " +
                      shape_str(bias.shape()));
  const std::size_t t = x.shape()[0], d = x.shape()[1];
  auto out = detail::make_node<Real>(x.shape(), {x.node(), bias.node()}, "add_rows");
  for (std::size_t i = 0; i < t; ++i)
    for (std::size_t j = 0; j < d; ++j)
      out.value()[i * d + j] = x.value()[i * d + j] + bias.value()[j];
  if (out.requires_grad()) {
    out.node()->backprop = [t, d](TensorNode<Real>& self) {
      if (Real* gx = self.parents[0]->grad_acc())
        for (std::size_t i = 0; i < t * d; ++i) gx[i] += self.grad[i];
      if (Real* gb = self.parents[1]->grad_acc())
        for (std::size_t i = 0; i < t; ++i)
          for (std::size_t j = 0; j < d; ++j) gb[j] += self.grad[i * d + j];
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// indexing and slicing
// ---------------------------------------------------------------------------

template <class Real>
Tensor<Real> row(const Tensor<Real>& x, std::size_t r) {
  if (x.shape().size() != 2 || r >= x.shape()[0])
    throw shape_error("row: index " + std::to_string(r) + " invalid for " +
                      shape_str(x.shape()));
  const std::size_t d = x.shape()[1];
  auto out = detail::make_node<Real>({d}, {x.node()}, "row");
  std::copy_n(x.value().data() + r * d, d, out.value().data());
  if (out.requires_grad()) {
    out.node()->backprop = [r, d](TensorNode<Real>& self) {
      if (Real* g = self.parents[0]->grad_acc())
        for (std::size_t j = 0; j < d; ++j) g[r * d + j] += self.grad[j];
    };
  }
  return out;
}

template <class Real>
Tensor<Real> rows_gather(const Tensor<Real>& x, std::vector<int> rows) {
  if (x.shape().size() != 2) throw shape_error("rows_gather: expected 2-D tensor");
  const std::size_t t = x.shape()[0], d = x.shape()[1];
  for (int r : rows)
    if (r < 0 || static_cast<std::size_t>(r) >= t)
      throw shape_error("rows_gather: row " + std::to_string(r) + " out of range");
  auto out = detail::make_node<Real>({rows.size(), d}, {x.node()}, "rows_gather");
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy_n(x.value().data() + static_cast<std::size_t>(rows[i]) * d, d,
                out.value().data() + i * d);
  if (out.requires_grad()) {
    out.node()->backprop = [rows = std::move(rows), d](TensorNode<Real>& self) {
      if (Real* g = self.parents[0]->grad_acc())
        for (std::size_t i = 0; i < rows.size(); ++i)
          for (std::size_t j = 0; j < d; ++j)
            g[static_cast<std::size_t>(rows[i]) * d + j] += self.grad[i * d + j];
    };
  }
  return out;
}

template <class Real>
Tensor<Real> cols_slice(const Tensor<Real>& x, std::size_t start, std::size_t len) {
  if (x.shape().size() != 2 || start + len > x.shape()[1])
    throw shape_error("cols_slice: range [" + std::to_string(start) + ", " +
                      std::to_string(start + len) + ") invalid for " + shape_str(x.shape()));
  const std::size_t t = x.shape()[0], d = x.shape()[1];
  auto out = detail::make_node<Real>({t, len}, {x.node()}, "cols_slice");
  for (std::size_t i = 0; i < t; ++i)
    std::copy_n(x.value().data() + i * d + start, len, out.value().data() + i * len);
  if (out.requires_grad()) {
    out.node()->backprop = [t, d, start, len](TensorNode<Real>& self) {
      if (Real* g = self.parents[0]->grad_acc())
        for (std::size_t i = 0; i < t; ++i)
          for (std::size_t j = 0; j < len; ++j)
            g[i * d + start + j] += self.grad[i * len + j];
    };
  }
  return out;
}

template <class Real>
Tensor<Real> concat_cols(const std::vector<Tensor<Real>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  const std::size_t t = parts[0].shape()[0];
  std::size_t total = 0;
  std::vector<std::shared_ptr<TensorNode<Real>>> parents;
  for (const auto& p : parts) {
    if (p.shape().size() != 2 || p.shape()[0] != t)
      throw shape_error("concat_cols: row-count mismatch at " + shape_str(p.shape()));
    total += p.shape()[1];
    parents.push_back(p.node());
  }
  auto out = detail::make_node<Real>({t, total}, std::move(parents), "concat_cols");
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.shape()[1];
    for (std::size_t i = 0; i < t; ++i)
      std::copy_n(p.value().data() + i * w, w, out.value().data() + i * total + off);
    off += w;
  }
  if (out.requires_grad()) {
    out.node()->backprop = [t, total](TensorNode<Real>& self) {
      std::size_t off2 = 0;
      for (auto& par : self.parents) {
        const std::size_t w = par->shape[1];
        if (Real* g = par->grad_acc())
          for (std::size_t i = 0; i < t; ++i)
            for (std::size_t j = 0; j < w; ++j)
              g[i * w + j] += self.grad[i * total + off2 + j];
        off2 += w;
      }
    };
  }
  return out;
}

/// Stack 2-D tensors with equal column counts on top of each other.
template <class Real>
Tensor<Real> concat_rows(const std::vector<Tensor<Real>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
  const std::size_t d = parts[0].shape().size() == 2 ? parts[0].shape()[1] : 0;
  std::size_t total = 0;
  std::vector<std::shared_ptr<TensorNode<Real>>> parents;
  for (const auto& p : parts) {
    if (p.shape().size() != 2 || p.shape()[1] != d)
      throw shape_error("concat_rows: column-count mismatch at " + shape_str(p.shape()));
    total += p.shape()[0];
    parents.push_back(p.node());
  }
  auto out = detail::make_node<Real>({total, d}, std::move(parents), "concat_rows");
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy_n(p.value().data(), p.numel(), out.value().data() + off);
    off += p.numel();
  }
  if (out.requires_grad()) {
    out.node()->backprop = [](TensorNode<Real>& self) {
      std::size_t off2 = 0;
      for (auto& par : self.parents) {
        if (Real* g = par->grad_acc())
          for (std::size_t i = 0; i < par->numel(); ++i) g[i] += self.grad[off2 + i];
        off2 += par->numel();
      }
    };
  }
  return out;
}

/// Gather rows of an embedding table by token id.
template <class Real>
Tensor<Real> embedding_rows(const Tensor<Real>& table, const std::vector<int>& ids) {
  if (table.shape().size() != 2) throw shape_error("embedding_rows: expected 2-D table");
  const std::size_t v = table.shape()[0], d = table.shape()[1];
  for (int id : ids)
    if (id < 0 || static_cast<std::size_t>(id) >= v)
      throw std::invalid_argument("embedding_rows: token id " + std::to_string(id) +
                                  " out of range for vocab " + std::to_string(v));
  auto out = detail::make_node<Real>({ids.size(), d}, {table.node()}, "embedding_rows");
  for (std::size_t i = 0; i < ids.size(); ++i)
    std::copy_n(table.value().data() + static_cast<std::size_t>(ids[i]) * d, d,
                out.value().data() + i * d);
  if (out.requires_grad()) {
    out.node()->backprop = [ids, d](TensorNode<Real>& self) {
      if (Real* g = self.parents[0]->grad_acc())
        for (std::size_t i = 0; i < ids.size(); ++i)
          for (std::size_t j = 0; j < d; ++j)
            g[static_cast<std::size_t>(ids[i]) * d + j] += self.grad[i * d + j];
    };
  }
  return out;
}

/// Copy of the values with no graph history.
template <class Real>
Tensor<Real> detach(const Tensor<Real>& x) {
  return Tensor<Real>::from(x.shape(), x.value(), false);
}

/// Same data, new shape (element count must match).
template <class Real>
Tensor<Real> reshape(const Tensor<Real>& x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    throw shape_error("reshape: cannot view " + shape_str(x.shape()) + " as " +
                      shape_str(shape));
  auto out = detail::make_node<Real>(std::move(shape), {x.node()}, "reshape");
  out.value() = x.value();
  if (out.requires_grad()) {
    out.node()->backprop = [](TensorNode<Real>& self) {
      if (Real* g = self.parents[0]->grad_acc())
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// softmax family
// ---------------------------------------------------------------------------

/// Softmax restricted to an index subset of a 1-D logit vector.
/// Positions outside the mask are exactly zero.
template <class Real>
Tensor<Real> masked_softmax(const Tensor<Real>& logits, const std::vector<int>& mask) {
  if (logits.shape().size() != 1) throw shape_error("masked_softmax: expected 1-D logits");
  const std::size_t n = logits.shape()[0];
  auto idx = detail::sorted_unique(mask);
  detail::validate_index_set(idx, n, "masked_softmax");
  auto out = detail::make_node<Real>({n}, {logits.node()}, "masked_softmax");
  detail::softmax_row_subset(logits.value().data(), out.value().data(), n, idx);
  if (out.requires_grad()) {
    out.node()->backprop = [idx = std::move(idx)](TensorNode<Real>& self) {
      if (Real* g = self.parents[0]->grad_acc())
        detail::softmax_row_subset_backward(self.value.data(), self.grad.data(), g, idx);
    };
  }
  return out;
}

/// Row-wise restricted softmax over [T x n] logits; one index mask per row.
template <class Real>
Tensor<Real> masked_row_softmax(const Tensor<Real>& logits,
                                std::vector<std::vector<int>> masks) {
  if (logits.shape().size() != 2) throw shape_error("masked_row_softmax: expected 2-D logits");
  const std::size_t t = logits.shape()[0], n = logits.shape()[1];
  if (masks.size() != t)
    throw std::invalid_argument("masked_row_softmax: need one mask per row");
  for (auto& m : masks) {
    m = detail::sorted_unique(std::move(m));
    detail::validate_index_set(m, n, "masked_row_softmax");
  }
  auto out = detail::make_node<Real>(logits.shape(), {logits.node()}, "masked_row_softmax");
  for (std::size_t i = 0; i < t; ++i)
    detail::softmax_row_subset(logits.value().data() + i * n, out.value().data() + i * n, n,
                               masks[i]);
  if (out.requires_grad()) {
    out.node()->backprop = [t, n, masks = std::move(masks)](TensorNode<Real>& self) {
      if (Real* g = self.parents[0]->grad_acc())
        for (std::size_t i = 0; i < t; ++i)
          detail::softmax_row_subset_backward(self.value.data() + i * n,
                                              self.grad.data() + i * n, g + i * n, masks[i]);
    };
  }
  return out;
}

/// Full softmax over every row of [T x n].
template <class Real>
Tensor<Real> row_softmax(const Tensor<Real>& logits) {
  if (logits.shape().size() != 2) throw shape_error("row_softmax: expected 2-D logits");
  const std::size_t t = logits.shape()[0], n = logits.shape()[1];
  std::vector<int> full(n);
  for (std::size_t j = 0; j < n; ++j) full[j] = static_cast<int>(j);
  auto out = detail::make_node<Real>(logits.shape(), {logits.node()}, "row_softmax");
  for (std::size_t i = 0; i < t; ++i)
    detail::softmax_row_subset(logits.value().data() + i * n, out.value().data() + i * n, n,
                               full);
  if (out.requires_grad()) {
    out.node()->backprop = [t, n, full = std::move(full)](TensorNode<Real>& self) {
      if (Real* g = self.parents[0]->grad_acc())
        for (std::size_t i = 0; i < t; ++i)
          detail::softmax_row_subset_backward(self.value.data() + i * n,
                                              self.grad.data() + i * n, g + i * n, full);
    };
  }
  return out;
}

/// Softmax over [T x T] attention scores where row r attends to columns 0..r.
template <class Real>
Tensor<Real> causal_row_softmax(const Tensor<Real>& scores) {
  if (scores.shape().size() != 2 || scores.shape()[0] != scores.shape()[1])
    throw shape_error("causal_row_softmax: expected square scores, got " +
                      shape_str(scores.shape()));
  const std::size_t t = scores.shape()[0];
  auto out = detail::make_node<Real>(scores.shape(), {scores.node()}, "causal_softmax");
  for (std::size_t i = 0; i < t; ++i) {
    const Real* in = scores.value().data() + i * t;
    Real* o = out.value().data() + i * t;
    Real mx = in[0];
    for (std::size_t j = 1; j <= i; ++j) mx = std::max(mx, in[j]);
    Real denom = Real(0);
    for (std::size_t j = 0; j <= i; ++j) {
      o[j] = std::exp(in[j] - mx);
      denom += o[j];
    }
    for (std::size_t j = 0; j <= i; ++j) o[j] /= denom;
    for (std::size_t j = i + 1; j < t; ++j) o[j] = Real(0);
  }
  if (out.requires_grad()) {
    out.node()->backprop = [t](TensorNode<Real>& self) {
      Real* g = self.parents[0]->grad_acc();
      if (!g) return;
      for (std::size_t i = 0; i < t; ++i) {
        const Real* y = self.value.data() + i * t;
        const Real* go = self.grad.data() + i * t;
        Real s = Real(0);
        for (std::size_t j = 0; j <= i; ++j) s += go[j] * y[j];
        for (std::size_t j = 0; j <= i; ++j) g[i * t + j] += y[j] * (go[j] - s);
      }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// log-likelihood ops
// ---------------------------------------------------------------------------

/// log softmax(logits)[id] for a set of (row, id) pairs over [T x V] logits.
/// Output is 1-D with one entry per requested pair, in the given order.
template <class Real>
Tensor<Real> gather_log_softmax(const Tensor<Real>& logits,
                                const std::vector<std::pair<int, int>>& items) {
  if (logits.shape().size() != 2) throw shape_error("gather_log_softmax: expected 2-D logits");
  if (items.empty()) throw std::invalid_argument("gather_log_softmax: no positions requested");
  const std::size_t t = logits.shape()[0], v = logits.shape()[1];
  for (auto [r, id] : items) {
    if (r < 0 || static_cast<std::size_t>(r) >= t)
      throw std::invalid_argument("gather_log_softmax: row " + std::to_string(r) +
                                  " out of range");
    if (id < 0 || static_cast<std::size_t>(id) >= v)
      throw std::invalid_argument("gather_log_softmax: target " + std::to_string(id) +
                                  " out of range for vocab " + std::to_string(v));
  }
  auto out = detail::make_node<Real>({items.size()}, {logits.node()}, "gather_log_softmax");
  std::vector<Real> probs(items.size() * v);
  for (std::size_t i = 0; i < items.size(); ++i) {
    const Real* in = logits.value().data() + static_cast<std::size_t>(items[i].first) * v;
    Real mx = in[0];
    for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, in[j]);
    Real denom = Real(0);
    Real* p = probs.data() + i * v;
    for (std::size_t j = 0; j < v; ++j) {
      p[j] = std::exp(in[j] - mx);
      denom += p[j];
    }
    for (std::size_t j = 0; j < v; ++j) p[j] /= denom;
    out.value()[i] = in[static_cast<std::size_t>(items[i].second)] - mx - std::log(denom);
  }
  if (out.requires_grad()) {
    out.node()->backprop = [items, v, probs = std::move(probs)](TensorNode<Real>& self) {
      Real* g = self.parents[0]->grad_acc();
      if (!g) return;
      for (std::size_t i = 0; i < items.size(); ++i) {
        const Real gi = self.grad[i];
        const Real* p = probs.data() + i * v;
        Real* grow = g + static_cast<std::size_t>(items[i].first) * v;
        for (std::size_t j = 0; j < v; ++j) grow[j] -= gi * p[j];
        grow[static_cast<std::size_t>(items[i].second)] += gi;
      }
    };
  }
  return out;
}

/// -log softmax(logits)[target] for 1-D logits, max-subtracted for stability.
template <class Real>
Tensor<Real> log_softmax_cross_entropy(const Tensor<Real>& logits, int target) {
  if (logits.shape().size() != 1)
    throw shape_error("log_softmax_cross_entropy: expected 1-D logits");
  const std::size_t v = logits.shape()[0];
  if (target < 0 || static_cast<std::size_t>(target) >= v)
    throw std::invalid_argument("log_softmax_cross_entropy: target " + std::to_string(target) +
                                " out of range for vocab " + std::to_string(v));
  const Real* in = logits.value().data();
  Real mx = in[0];
  for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, in[j]);
  std::vector<Real> probs(v);
  Real denom = Real(0);
  for (std::size_t j = 0; j < v; ++j) {
    probs[j] = std::exp(in[j] - mx);
    denom += probs[j];
  }
  for (std::size_t j = 0; j < v; ++j) probs[j] /= denom;
  auto out = detail::make_node<Real>({1}, {logits.node()}, "log_softmax_xent");
  out.value()[0] = -(in[static_cast<std::size_t>(target)] - mx - std::log(denom));
  if (out.requires_grad()) {
    out.node()->backprop = [target, probs = std::move(probs)](TensorNode<Real>& self) {
      Real* g = self.parents[0]->grad_acc();
      if (!g) return;
      const Real gi = self.grad[0];
      for (std::size_t j = 0; j < probs.size(); ++j) g[j] += gi * probs[j];
      g[static_cast<std::size_t>(target)] -= gi;
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// normalization and activations
// ---------------------------------------------------------------------------

/// RMS normalization per row of [T x d] with a learnable gain.
template <class Real>
Tensor<Real> rms_norm(const Tensor<Real>& x, const Tensor<Real>& gain, Real eps = Real(1e-5)) {
  if (x.shape().size() != 2 || gain.shape().size() != 1 || x.shape()[1] != gain.shape()[0])
    throw shape_error("rms_norm: incompatible shapes " + shape_str(x.shape()) + " and " +
                      shape_str(gain.shape()));
  const std::size_t t = x.shape()[0], d = x.shape()[1];
  auto out = detail::make_node<Real>(x.shape(), {x.node(), gain.node()}, "rms_norm");
  std::vector<Real> inv(t);
  for (std::size_t i = 0; i < t; ++i) {
    const Real* xi = x.value().data() + i * d;
    Real ss = Real(0);
    for (std::size_t j = 0; j < d; ++j) ss += xi[j] * xi[j];
    inv[i] = Real(1) / std::sqrt(ss / static_cast<Real>(d) + eps);
    for (std::size_t j = 0; j < d; ++j)
      out.value()[i * d + j] = xi[j] * inv[i] * gain.value()[j];
  }
  if (out.requires_grad()) {
    out.node()->backprop = [t, d, inv = std::move(inv)](TensorNode<Real>& self) {
      const auto& xv = self.parents[0]->value;
      const auto& gv = self.parents[1]->value;
      Real* gx = self.parents[0]->grad_acc();
      Real* gg = self.parents[1]->grad_acc();
      for (std::size_t i = 0; i < t; ++i) {
        const Real* xi = xv.data() + i * d;
        const Real* go = self.grad.data() + i * d;
        const Real r = inv[i];
        if (gg)
          for (std::size_t j = 0; j < d; ++j) gg[j] += go[j] * xi[j] * r;
        if (gx) {
          Real s = Real(0);
          for (std::size_t j = 0; j < d; ++j) s += go[j] * gv[j] * xi[j];
          const Real c = r * r * r * s / static_cast<Real>(d);
          for (std::size_t j = 0; j < d; ++j) gx[i * d + j] += go[j] * gv[j] * r - xi[j] * c;
        }
      }
    };
  }
  return out;
}

enum class Activation { silu, gelu, relu };

inline const char* activation_name(Activation a) {
  switch (a) {
    case Activation::silu: return "silu";
    case Activation::gelu: return "gelu";
    case Activation::relu: return "relu";
  }
  return "?";
}

template <class Real>
Tensor<Real> activate(const Tensor<Real>& x, Activation act) {
  auto out = detail::make_node<Real>(x.shape(), {x.node()}, activation_name(act));
  const auto& xv = x.value();
  auto& ov = out.value();
  switch (act) {
    case Activation::silu:
      for (std::size_t i = 0; i < ov.size(); ++i)
        ov[i] = xv[i] / (Real(1) + std::exp(-xv[i]));
      break;
    case Activation::gelu:
      for (std::size_t i = 0; i < ov.size(); ++i)
        ov[i] = Real(0.5) * xv[i] * (Real(1) + std::erf(xv[i] * Real(0.7071067811865476)));
      break;
    case Activation::relu:
      for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] > Real(0) ? xv[i] : Real(0);
      break;
  }
  if (out.requires_grad()) {
    out.node()->backprop = [act](TensorNode<Real>& self) {
      Real* g = self.parents[0]->grad_acc();
      if (!g) return;
      const auto& xv2 = self.parents[0]->value;
      for (std::size_t i = 0; i < xv2.size(); ++i) {
        Real dv;
        switch (act) {
          case Activation::silu: {
            const Real s = Real(1) / (Real(1) + std::exp(-xv2[i]));
            dv = s * (Real(1) + xv2[i] * (Real(1) - s));
            break;
          }
          case Activation::gelu: {
            const Real cdf =
                Real(0.5) * (Real(1) + std::erf(xv2[i] * Real(0.7071067811865476)));
            const Real pdf = std::exp(Real(-0.5) * xv2[i] * xv2[i]) *
                             Real(0.3989422804014327);
            dv = cdf + xv2[i] * pdf;
            break;
          }
          case Activation::relu:
          default:
            dv = xv2[i] > Real(0) ? Real(1) : Real(0);
            break;
        }
        g[i] += self.grad[i] * dv;
      }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

template <class Real>
Tensor<Real> sum(const Tensor<Real>& x) {
  auto out = detail::make_node<Real>({1}, {x.node()}, "sum");
  Real acc = Real(0);
  for (Real v : x.value()) acc += v;
  out.value()[0] = acc;
  if (out.requires_grad()) {
    out.node()->backprop = [](TensorNode<Real>& self) {
      if (Real* g = self.parents[0]->grad_acc())
        for (std::size_t i = 0; i < self.parents[0]->numel(); ++i) g[i] += self.grad[0];
    };
  }
  return out;
}

template <class Real>
Tensor<Real> mean(const Tensor<Real>& x) {
  const Real inv = Real(1) / static_cast<Real>(x.numel());
  auto out = detail::make_node<Real>({1}, {x.node()}, "mean");
  Real acc = Real(0);
  for (Real v : x.value()) acc += v;
  out.value()[0] = acc * inv;
  if (out.requires_grad()) {
    out.node()->backprop = [inv](TensorNode<Real>& self) {
      if (Real* g = self.parents[0]->grad_acc())
        for (std::size_t i = 0; i < self.parents[0]->numel(); ++i) g[i] += self.grad[0] * inv;
    };
  }
  return out;
}

/// Mean over the positions where keep[i] is true. At least one must be kept.
template <class Real>
Tensor<Real> mean_masked(const Tensor<Real>& x, const std::vector<std::uint8_t>& keep) {
  if (x.shape().size() != 1 || keep.size() != x.numel())
    throw shape_error("mean_masked: mask length must match 1-D input");
  std::size_t count = 0;
  for (auto k : keep) count += k ? 1 : 0;
  if (count == 0) throw std::invalid_argument("mean_masked: every position is masked out");
  const Real inv = Real(1) / static_cast<Real>(count);
  auto out = detail::make_node<Real>({1}, {x.node()}, "mean_masked");
  Real acc = Real(0);
  for (std::size_t i = 0; i < keep.size(); ++i)
    if (keep[i]) acc += x.value()[i];
  out.value()[0] = acc * inv;
  if (out.requires_grad()) {
    out.node()->backprop = [keep, inv](TensorNode<Real>& self) {
      if (Real* g = self.parents[0]->grad_acc())
        for (std::size_t i = 0; i < keep.size(); ++i)
          if (keep[i]) g[i] += self.grad[0] * inv;
    };
  }
  return out;
}

/// Elementwise mean of N same-shape tensors as a single graph node.
template <class Real>
Tensor<Real> average(const std::vector<Tensor<Real>>& xs) {
  if (xs.empty()) throw std::invalid_argument("average: no inputs");
  std::vector<std::shared_ptr<TensorNode<Real>>> parents;
  for (const auto& x : xs) {
    detail::check_same_shape(xs[0], x, "average");
    parents.push_back(x.node());
  }
  const Real inv = Real(1) / static_cast<Real>(xs.size());
  auto out = detail::make_node<Real>(xs[0].shape(), std::move(parents), "average");
  for (const auto& x : xs)
    for (std::size_t i = 0; i < out.numel(); ++i) out.value()[i] += x.value()[i];
  for (std::size_t i = 0; i < out.numel(); ++i) out.value()[i] *= inv;
  if (out.requires_grad()) {
    out.node()->backprop = [inv](TensorNode<Real>& self) {
      for (auto& p : self.parents)
        if (Real* g = p->grad_acc())
          for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * inv;
    };
  }
  return out;
}

/// Column means of [T x n]: the per-expert mean routing probability.
template <class Real>
Tensor<Real> col_mean(const Tensor<Real>& x) {
  if (x.shape().size() != 2) throw shape_error("col_mean: expected 2-D tensor");
  const std::size_t t = x.shape()[0], n = x.shape()[1];
  const Real inv = Real(1) / static_cast<Real>(t);
  auto out = detail::make_node<Real>({n}, {x.node()}, "col_mean");
  for (std::size_t i = 0; i < t; ++i)
    for (std::size_t j = 0; j < n; ++j) out.value()[j] += x.value()[i * n + j];
  for (std::size_t j = 0; j < n; ++j) out.value()[j] *= inv;
  if (out.requires_grad()) {
    out.node()->backprop = [t, n, inv](TensorNode<Real>& self) {
      if (Real* g = self.parents[0]->grad_acc())
        for (std::size_t i = 0; i < t; ++i)
          for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[j] * inv;
    };
  }
  return out;
}

template <class Real>
Tensor<Real> dot(const Tensor<Real>& a, const Tensor<Real>& b) {
  detail::check_same_shape(a, b, "dot");
  auto out = detail::make_node<Real>({1}, {a.node(), b.node()}, "dot");
  Real acc = Real(0);
  for (std::size_t i = 0; i < a.numel(); ++i) acc += a.value()[i] * b.value()[i];
  out.value()[0] = acc;
  if (out.requires_grad()) {
    out.node()->backprop = [](TensorNode<Real>& self) {
      const auto& av = self.parents[0]->value;
      const auto& bv = self.parents[1]->value;
      if (Real* g = self.parents[0]->grad_acc())
        for (std::size_t i = 0; i < av.size(); ++i) g[i] += self.grad[0] * bv[i];
      if (Real* g = self.parents[1]->grad_acc())
        for (std::size_t i = 0; i < bv.size(); ++i) g[i] += self.grad[0] * av[i];
    };
  }
  return out;
}

/// Pack N scalar tensors into one 1-D tensor of length N.
template <class Real>
Tensor<Real> concat_scalars(const std::vector<Tensor<Real>>& xs) {
  if (xs.empty()) throw std::invalid_argument("concat_scalars: no inputs");
  std::vector<std::shared_ptr<TensorNode<Real>>> parents;
  for (const auto& x : xs) {
    if (!x.is_scalar()) throw shape_error("concat_scalars: input is not scalar");
    parents.push_back(x.node());
  }
  auto out = detail::make_node<Real>({xs.size()}, std::move(parents), "concat_scalars");
  for (std::size_t i = 0; i < xs.size(); ++i) out.value()[i] = xs[i].value()[0];
  if (out.requires_grad()) {
    out.node()->backprop = [](TensorNode<Real>& self) {
      for (std::size_t i = 0; i < self.parents.size(); ++i)
        if (Real* g = self.parents[i]->grad_acc()) g[0] += self.grad[i];
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// backward pass
// ---------------------------------------------------------------------------

/// Reverse-mode sweep from a scalar root. Every requires_grad tensor
/// reachable through the graph accumulates d(root)/d(tensor) into its grad
/// buffer; repeated uses of a tensor accumulate additively.
template <class Real>
void backward(const Tensor<Real>& root) {
  if (!root.is_scalar())
    throw std::invalid_argument("backward: root must be scalar, got " +
                                shape_str(root.shape()));
  using Node = TensorNode<Real>;
  const std::uint64_t epoch = detail::g_visit_epoch.fetch_add(1, std::memory_order_relaxed);

  // Iterative post-order DFS: parents precede children in `order`.
  std::vector<Node*> order;
  std::vector<std::pair<Node*, std::size_t>> stack;
  Node* rootn = root.node().get();
  if (!rootn->requires_grad) return;
  rootn->visit_epoch = epoch;
  stack.emplace_back(rootn, 0);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && p->visit_epoch != epoch) {
        p->visit_epoch = epoch;
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  if (Real* g = rootn->grad_acc()) g[0] += Real(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->backprop) {
      if (node->grad.size() != node->value.size())
        node->grad.assign(node->value.size(), Real(0));
      node->backprop(*node);
    }
  }
}

template <class Real>
void zero_grads(const std::vector<Tensor<Real>>& params) {
  for (const auto& p : params) p.zero_grad();
}

}  // namespace ordmoe
