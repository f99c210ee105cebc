#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "apnet/common.hpp"

namespace apnet {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out + "]";
}

// Dense array participating in a dynamically built reverse-mode graph.
// Value is a cheap handle; the node (data, grad, parents, backward rule)
// is shared. Graphs are rebuilt every forward pass.
template <class S>
class Value {
 public:
  struct Node {
    Shape shape;
    std::vector<S> data;
    std::vector<S> grad;  // allocated by backward()
    bool requires_grad = false;
    bool is_leaf = true;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;  // accumulates self.grad into parents
  };
  using NodePtr = std::shared_ptr<Node>;

  Value() = default;
  explicit Value(NodePtr n) : n_(std::move(n)) {}

  static Value leaf(Shape shape, std::vector<S> data, bool requires_grad) {
    APNET_REQUIRE(data.size() == shape_numel(shape), "leaf: data length ", data.size(),
                  " does not match shape ", shape_str(shape));
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    n->requires_grad = requires_grad;
    return Value(std::move(n));
  }

  static Value constant(Shape shape, std::vector<S> data) {
    return leaf(std::move(shape), std::move(data), false);
  }

  static Value scalar(S v, bool requires_grad = false) {
    return leaf({1}, {v}, requires_grad);
  }

  static Value zeros(Shape shape, bool requires_grad = false) {
    const std::size_t n = shape_numel(shape);
    return leaf(std::move(shape), std::vector<S>(n, S(0)), requires_grad);
  }

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const { return n_->shape; }
  std::size_t numel() const { return n_->data.size(); }
  const std::vector<S>& data() const { return n_->data; }
  std::vector<S>& data() { return n_->data; }
  const std::vector<S>& grad() const { return n_->grad; }
  bool requires_grad() const { return n_->requires_grad; }
  bool is_leaf() const { return n_->is_leaf; }
  NodePtr node() const { return n_; }

  S item() const {
    APNET_REQUIRE(numel() == 1, "item: tensor has ", numel(), " elements");
    return n_->data[0];
  }

  void zero_grad() { n_->grad.assign(n_->data.size(), S(0)); }

  // Reverse pass from a scalar root. Grads of every node reachable from the
  // root are reset first, so repeated backward calls do not accumulate.
  void backward() const {
    APNET_REQUIRE(numel() == 1, "backward: root must be scalar, has ", numel(), " elements");
    APNET_REQUIRE(requires_grad(), "backward: root does not require grad");

    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(n_.get(), 0);
    seen.insert(n_.get());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        Node* parent = node->parents[next].get();
        ++next;
        if (parent->requires_grad && seen.insert(parent).second) {
          stack.emplace_back(parent, 0);
        }
      } else {
        order.push_back(node);
        stack.pop_back();
      }
    }
    // `order` is now a topological order (parents before children).
    for (Node* node : order) node->grad.assign(node->data.size(), S(0));
    n_->grad[0] = S(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node* node = *it;
      if (node->backward_fn) node->backward_fn(*node);
    }
  }

 private:
  NodePtr n_;
};

namespace tensor_detail {

template <class S>
typename Value<S>::NodePtr make_op_node(Shape shape, std::vector<S> data,
                                        std::vector<typename Value<S>::NodePtr> parents) {
  auto n = std::make_shared<typename Value<S>::Node>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  n->is_leaf = false;
  bool rg = false;
  for (const auto& p : parents) rg = rg || p->requires_grad;
  n->requires_grad = rg;
  n->parents = std::move(parents);
  return n;
}

// out[m,n] += a[m,k] * b[k,n]
template <class S>
void gemm_acc(const S* a, const S* b, S* out, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const S* arow = a + i * k;
    S* orow = out + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const S av = arow[p];
      if (av == S(0)) continue;
      const S* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
}

// out[m,n] += a[m,k] * b[n,k]^T
template <class S>
void gemm_bt_acc(const S* a, const S* b, S* out, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const S* arow = a + i * k;
    S* orow = out + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const S* brow = b + j * k;
      S acc = S(0);
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      orow[j] += acc;
    }
  }
}

// out[k,n] += a[m,k]^T * b[m,n]
template <class S>
void gemm_at_acc(const S* a, const S* b, S* out, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const S* arow = a + i * k;
    const S* brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const S av = arow[p];
      if (av == S(0)) continue;
      S* orow = out + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
}

inline void check_axis(std::size_t axis, std::size_t rank) {
  APNET_REQUIRE(axis < rank, "invalid axis ", axis, " for rank ", rank);
}

}  // namespace tensor_detail

// ---- elementwise ----

template <class S>
Value<S> add(const Value<S>& a, const Value<S>& b) {
  using tensor_detail::make_op_node;
  if (a.shape() == b.shape()) {
    std::vector<S> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
    auto n = make_op_node<S>(a.shape(), std::move(out), {a.node(), b.node()});
    auto* pa = a.node().get();
    auto* pb = b.node().get();
    n->backward_fn = [pa, pb](typename Value<S>::Node& self) {
      if (pa->requires_grad)
        for (std::size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i];
      if (pb->requires_grad)
        for (std::size_t i = 0; i < self.grad.size(); ++i) pb->grad[i] += self.grad[i];
    };
    return Value<S>(n);
  }
  // broadcast: b is a vector matching a's trailing dimension
  APNET_REQUIRE(b.shape().size() == 1 && !a.shape().empty() &&
                    a.shape().back() == b.shape()[0],
                "add: shape mismatch ", shape_str(a.shape()), " vs ", shape_str(b.shape()));
  const std::size_t c = b.shape()[0];
  const std::size_t rows = a.numel() / c;
  std::vector<S> out(a.numel());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < c; ++j) out[r * c + j] = a.data()[r * c + j] + b.data()[j];
  auto n = make_op_node<S>(a.shape(), std::move(out), {a.node(), b.node()});
  auto* pa = a.node().get();
  auto* pb = b.node().get();
  n->backward_fn = [pa, pb, rows, c](typename Value<S>::Node& self) {
    if (pa->requires_grad)
      for (std::size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i];
    if (pb->requires_grad)
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < c; ++j) pb->grad[j] += self.grad[r * c + j];
  };
  return Value<S>(n);
}

template <class S>
Value<S> mul(const Value<S>& a, const Value<S>& b) {
  using tensor_detail::make_op_node;
  APNET_REQUIRE(a.shape() == b.shape(), "mul: shape mismatch ", shape_str(a.shape()),
                " vs ", shape_str(b.shape()));
  std::vector<S> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  auto n = make_op_node<S>(a.shape(), std::move(out), {a.node(), b.node()});
  auto* pa = a.node().get();
  auto* pb = b.node().get();
  n->backward_fn = [pa, pb](typename Value<S>::Node& self) {
    if (pa->requires_grad)
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        pa->grad[i] += self.grad[i] * pb->data[i];
    if (pb->requires_grad)
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        pb->grad[i] += self.grad[i] * pa->data[i];
  };
  return Value<S>(n);
}

template <class S>
Value<S> scale(const Value<S>& a, double factor) {
  using tensor_detail::make_op_node;
  std::vector<S> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * S(factor);
  auto n = make_op_node<S>(a.shape(), std::move(out), {a.node()});
  auto* pa = a.node().get();
  n->backward_fn = [pa, factor](typename Value<S>::Node& self) {
    if (pa->requires_grad)
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        pa->grad[i] += self.grad[i] * S(factor);
  };
  return Value<S>(n);
}

template <class S>
Value<S> neg(const Value<S>& a) { return scale(a, -1.0); }

template <class S>
Value<S> sub(const Value<S>& a, const Value<S>& b) { return add(a, neg(b)); }

template <class S>
Value<S> relu(const Value<S>& a) {
  using tensor_detail::make_op_node;
  std::vector<S> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] > S(0) ? a.data()[i] : S(0);
  auto n = make_op_node<S>(a.shape(), std::move(out), {a.node()});
  auto* pa = a.node().get();
  n->backward_fn = [pa](typename Value<S>::Node& self) {
    if (!pa->requires_grad) return;
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      if (pa->data[i] > S(0)) pa->grad[i] += self.grad[i];
  };
  return Value<S>(n);
}

template <class S>
Value<S> log_elem(const Value<S>& a) {
  using tensor_detail::make_op_node;
  std::vector<S> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    APNET_REQUIRE(a.data()[i] > S(0), "log: non-positive input ", double(a.data()[i]));
    out[i] = std::log(a.data()[i]);
  }
  auto n = make_op_node<S>(a.shape(), std::move(out), {a.node()});
  auto* pa = a.node().get();
  n->backward_fn = [pa](typename Value<S>::Node& self) {
    if (!pa->requires_grad) return;
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      pa->grad[i] += self.grad[i] / pa->data[i];
  };
  return Value<S>(n);
}

// ---- linear algebra ----

template <class S>
Value<S> matmul(const Value<S>& a, const Value<S>& b) {
  using namespace tensor_detail;
  APNET_REQUIRE(a.shape().size() == 2 && b.shape().size() == 2,
                "matmul: expects rank-2 operands, got ", shape_str(a.shape()), " and ",
                shape_str(b.shape()));
  const std::size_t m = a.shape()[0], k = a.shape()[1], n_cols = b.shape()[1];
  APNET_REQUIRE(b.shape()[0] == k, "matmul: inner dimension mismatch ",
                shape_str(a.shape()), " x ", shape_str(b.shape()));
  std::vector<S> out(m * n_cols, S(0));
  gemm_acc(a.data().data(), b.data().data(), out.data(), m, k, n_cols);
  auto n = make_op_node<S>({m, n_cols}, std::move(out), {a.node(), b.node()});
  auto* pa = a.node().get();
  auto* pb = b.node().get();
  n->backward_fn = [pa, pb, m, k, n_cols](typename Value<S>::Node& self) {
    if (pa->requires_grad)
      gemm_bt_acc(self.grad.data(), pb->data.data(), pa->grad.data(), m, n_cols, k);
    if (pb->requires_grad)
      gemm_at_acc(pa->data.data(), self.grad.data(), pb->grad.data(), m, k, n_cols);
  };
  return Value<S>(n);
}

template <class S>
Value<S> concat(const std::vector<Value<S>>& parts, std::size_t axis) {
  using namespace tensor_detail;
  APNET_REQUIRE(!parts.empty(), "concat: no inputs");
  const Shape& s0 = parts[0].shape();
  check_axis(axis, s0.size());
  std::size_t axis_total = 0;
  for (const auto& p : parts) {
    APNET_REQUIRE(p.shape().size() == s0.size(), "concat: rank mismatch");
    for (std::size_t d = 0; d < s0.size(); ++d) {
      if (d == axis) continue;
      APNET_REQUIRE(p.shape()[d] == s0[d], "concat: shape mismatch ",
                    shape_str(p.shape()), " vs ", shape_str(s0), " on axis ", d);
    }
    axis_total += p.shape()[axis];
  }
  Shape out_shape = s0;
  out_shape[axis] = axis_total;

  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= s0[d];
  for (std::size_t d = axis + 1; d < s0.size(); ++d) inner *= s0[d];

  std::vector<S> out(shape_numel(out_shape));
  std::vector<std::size_t> offsets;  // axis offset of each part
  {
    std::size_t off = 0;
    for (const auto& p : parts) {
      offsets.push_back(off);
      const std::size_t an = p.shape()[axis];
      for (std::size_t o = 0; o < outer; ++o) {
        const S* src = p.data().data() + o * an * inner;
        S* dst = out.data() + (o * axis_total + off) * inner;
        std::copy(src, src + an * inner, dst);
      }
      off += an;
    }
  }

  std::vector<typename Value<S>::NodePtr> parent_nodes;
  for (const auto& p : parts) parent_nodes.push_back(p.node());
  auto n = make_op_node<S>(out_shape, std::move(out), std::move(parent_nodes));
  std::vector<std::size_t> axis_sizes;
  for (const auto& p : parts) axis_sizes.push_back(p.shape()[axis]);
  n->backward_fn = [outer, inner, axis_total, offsets, axis_sizes](typename Value<S>::Node& self) {
    for (std::size_t pi = 0; pi < self.parents.size(); ++pi) {
      auto& parent = *self.parents[pi];
      if (!parent.requires_grad) continue;
      const std::size_t an = axis_sizes[pi], off = offsets[pi];
      for (std::size_t o = 0; o < outer; ++o) {
        const S* src = self.grad.data() + (o * axis_total + off) * inner;
        S* dst = parent.grad.data() + o * an * inner;
        for (std::size_t i = 0; i < an * inner; ++i) dst[i] += src[i];
      }
    }
  };
  return Value<S>(n);
}

// Same data, new shape; gradients pass straight through.
template <class S>
Value<S> reshape(const Value<S>& x, Shape new_shape) {
  using tensor_detail::make_op_node;
  APNET_REQUIRE(shape_numel(new_shape) == x.numel(), "reshape: cannot view ",
                shape_str(x.shape()), " as ", shape_str(new_shape));
  auto n = make_op_node<S>(std::move(new_shape), std::vector<S>(x.data()), {x.node()});
  auto* px = x.node().get();
  n->backward_fn = [px](typename Value<S>::Node& self) {
    if (!px->requires_grad) return;
    for (std::size_t i = 0; i < self.grad.size(); ++i) px->grad[i] += self.grad[i];
  };
  return Value<S>(n);
}

// ---- indexing ----

// out[i, ...] = x[idx[i], ...]
template <class S>
Value<S> gather_rows(const Value<S>& x, const std::vector<std::size_t>& idx) {
  using namespace tensor_detail;
  APNET_REQUIRE(!x.shape().empty(), "gather_rows: scalar input");
  const std::size_t rows = x.shape()[0];
  const std::size_t inner = x.numel() / std::max<std::size_t>(rows, 1);
  for (std::size_t i : idx)
    APNET_REQUIRE(i < rows, "gather_rows: index ", i, " out of range [0, ", rows, ")");
  Shape out_shape = x.shape();
  out_shape[0] = idx.size();
  std::vector<S> out(idx.size() * inner);
  for (std::size_t i = 0; i < idx.size(); ++i)
    std::copy_n(x.data().data() + idx[i] * inner, inner, out.data() + i * inner);
  auto n = make_op_node<S>(out_shape, std::move(out), {x.node()});
  auto* px = x.node().get();
  n->backward_fn = [px, idx, inner](typename Value<S>::Node& self) {
    if (!px->requires_grad) return;
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const S* src = self.grad.data() + i * inner;
      S* dst = px->grad.data() + idx[i] * inner;
      for (std::size_t j = 0; j < inner; ++j) dst[j] += src[j];
    }
  };
  return Value<S>(n);
}

// out has `rows` rows; out[idx[i], ...] += src[i, ...]
template <class S>
Value<S> scatter_add_rows(const Value<S>& src, const std::vector<std::size_t>& idx,
                          std::size_t rows) {
  using namespace tensor_detail;
  APNET_REQUIRE(!src.shape().empty(), "scatter_add_rows: scalar input");
  APNET_REQUIRE(src.shape()[0] == idx.size(), "scatter_add_rows: ", idx.size(),
                " indices for ", src.shape()[0], " rows");
  const std::size_t inner = src.numel() / std::max<std::size_t>(idx.size(), 1);
  for (std::size_t i : idx)
    APNET_REQUIRE(i < rows, "scatter_add_rows: index ", i, " out of range [0, ", rows, ")");
  Shape out_shape = src.shape();
  out_shape[0] = rows;
  std::vector<S> out(rows * inner, S(0));
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const S* s = src.data().data() + i * inner;
    S* d = out.data() + idx[i] * inner;
    for (std::size_t j = 0; j < inner; ++j) d[j] += s[j];
  }
  auto n = make_op_node<S>(out_shape, std::move(out), {src.node()});
  auto* ps = src.node().get();
  n->backward_fn = [ps, idx, inner](typename Value<S>::Node& self) {
    if (!ps->requires_grad) return;
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const S* g = self.grad.data() + idx[i] * inner;
      S* d = ps->grad.data() + i * inner;
      for (std::size_t j = 0; j < inner; ++j) d[j] += g[j];
    }
  };
  return Value<S>(n);
}

// out[i] = x[i, cols[i]]
template <class S>
Value<S> pick(const Value<S>& x, const std::vector<std::size_t>& cols) {
  using namespace tensor_detail;
  APNET_REQUIRE(x.shape().size() == 2, "pick: expects rank-2 input, got ", shape_str(x.shape()));
  const std::size_t rows = x.shape()[0], c = x.shape()[1];
  APNET_REQUIRE(cols.size() == rows, "pick: ", cols.size(), " column indices for ", rows, " rows");
  for (std::size_t j : cols)
    APNET_REQUIRE(j < c, "pick: column ", j, " out of range [0, ", c, ")");
  std::vector<S> out(rows);
  for (std::size_t i = 0; i < rows; ++i) out[i] = x.data()[i * c + cols[i]];
  auto n = make_op_node<S>({rows}, std::move(out), {x.node()});
  auto* px = x.node().get();
  n->backward_fn = [px, cols, c](typename Value<S>::Node& self) {
    if (!px->requires_grad) return;
    for (std::size_t i = 0; i < cols.size(); ++i)
      px->grad[i * c + cols[i]] += self.grad[i];
  };
  return Value<S>(n);
}

// ---- reductions / normalization ----

template <class S>
Value<S> sum(const Value<S>& x) {
  using tensor_detail::make_op_node;
  S acc = S(0);
  for (S v : x.data()) acc += v;
  auto n = make_op_node<S>({1}, {acc}, {x.node()});
  auto* px = x.node().get();
  n->backward_fn = [px](typename Value<S>::Node& self) {
    if (!px->requires_grad) return;
    for (std::size_t i = 0; i < px->grad.size(); ++i) px->grad[i] += self.grad[0];
  };
  return Value<S>(n);
}

template <class S>
Value<S> mean(const Value<S>& x) {
  APNET_REQUIRE(x.numel() > 0, "mean: empty tensor");
  return scale(sum(x), 1.0 / double(x.numel()));
}

template <class S>
Value<S> softmax(const Value<S>& x, std::size_t axis) {
  using namespace tensor_detail;
  check_axis(axis, x.shape().size());
  const Shape& s = x.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= s[d];
  for (std::size_t d = axis + 1; d < s.size(); ++d) inner *= s[d];
  const std::size_t an = s[axis];
  APNET_REQUIRE(an > 0, "softmax: empty axis");

  std::vector<S> out(x.numel());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * an * inner + in;
      S mx = x.data()[base];
      for (std::size_t a = 1; a < an; ++a) mx = std::max(mx, x.data()[base + a * inner]);
      S denom = S(0);
      for (std::size_t a = 0; a < an; ++a) {
        const S e = std::exp(x.data()[base + a * inner] - mx);
        out[base + a * inner] = e;
        denom += e;
      }
      for (std::size_t a = 0; a < an; ++a) out[base + a * inner] /= denom;
    }
  }
  auto n = make_op_node<S>(s, std::move(out), {x.node()});
  auto* px = x.node().get();
  n->backward_fn = [px, outer, inner, an](typename Value<S>::Node& self) {
    if (!px->requires_grad) return;
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * an * inner + in;
        S dot = S(0);
        for (std::size_t a = 0; a < an; ++a)
          dot += self.grad[base + a * inner] * self.data[base + a * inner];
        for (std::size_t a = 0; a < an; ++a) {
          const std::size_t i = base + a * inner;
          px->grad[i] += (self.grad[i] - dot) * self.data[i];
        }
      }
    }
  };
  return Value<S>(n);
}

// log softmax over the last axis; numerically stable form of log(softmax(x)).
template <class S>
Value<S> log_softmax(const Value<S>& x) {
  using namespace tensor_detail;
  APNET_REQUIRE(!x.shape().empty(), "log_softmax: scalar input");
  const std::size_t c = x.shape().back();
  const std::size_t rows = x.numel() / c;
  std::vector<S> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const S* row = x.data().data() + r * c;
    S mx = row[0];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    S denom = S(0);
    for (std::size_t j = 0; j < c; ++j) denom += std::exp(row[j] - mx);
    const S lse = mx + std::log(denom);
    for (std::size_t j = 0; j < c; ++j) out[r * c + j] = row[j] - lse;
  }
  auto n = make_op_node<S>(x.shape(), std::move(out), {x.node()});
  auto* px = x.node().get();
  n->backward_fn = [px, rows, c](typename Value<S>::Node& self) {
    if (!px->requires_grad) return;
    for (std::size_t r = 0; r < rows; ++r) {
      S gsum = S(0);
      for (std::size_t j = 0; j < c; ++j) gsum += self.grad[r * c + j];
      for (std::size_t j = 0; j < c; ++j) {
        const std::size_t i = r * c + j;
        px->grad[i] += self.grad[i] - std::exp(self.data[i]) * gsum;
      }
    }
  };
  return Value<S>(n);
}

// ---- image ops (HWC layout) ----

// 1x1 or 3x3 convolution, stride 1, zero padding to the input size.
template <class S>
Value<S> conv2d(const Value<S>& x, const Value<S>& w, const Value<S>& bias = Value<S>()) {
  using namespace tensor_detail;
  APNET_REQUIRE(x.shape().size() == 3, "conv2d: input must be HxWxC, got ", shape_str(x.shape()));
  APNET_REQUIRE(w.shape().size() == 4, "conv2d: kernel must be khxkwxCixCo, got ",
                shape_str(w.shape()));
  const std::size_t h = x.shape()[0], wd = x.shape()[1], ci = x.shape()[2];
  const std::size_t kh = w.shape()[0], kw = w.shape()[1], co = w.shape()[3];
  APNET_REQUIRE((kh == 1 && kw == 1) || (kh == 3 && kw == 3),
                "conv2d: kernel must be 1x1 or 3x3, got ", kh, "x", kw);
  APNET_REQUIRE(w.shape()[2] == ci, "conv2d: kernel expects ", w.shape()[2],
                " input channels, input has ", ci);
  if (bias.defined())
    APNET_REQUIRE(bias.shape() == Shape{co}, "conv2d: bias shape ", shape_str(bias.shape()),
                  " does not match ", co, " output channels");
  const long pad = (kh == 3) ? 1 : 0;

  std::vector<S> out(h * wd * co, S(0));
  if (bias.defined()) {
    for (std::size_t p = 0; p < h * wd; ++p)
      for (std::size_t j = 0; j < co; ++j) out[p * co + j] = bias.data()[j];
  }
  const S* xd = x.data().data();
  const S* wd_ptr = w.data().data();
  for (std::size_t dy = 0; dy < kh; ++dy) {
    for (std::size_t dx = 0; dx < kw; ++dx) {
      const S* wk = wd_ptr + (dy * kw + dx) * ci * co;
      const long y_lo = std::max<long>(0, pad - long(dy));
      const long y_hi = std::min<long>(long(h), long(h) + pad - long(dy));
      const long x_lo = std::max<long>(0, pad - long(dx));
      const long x_hi = std::min<long>(long(wd), long(wd) + pad - long(dx));
      for (long y = y_lo; y < y_hi; ++y) {
        const long iy = y + long(dy) - pad;
        const S* in_row = xd + (std::size_t(iy) * wd + std::size_t(x_lo + long(dx) - pad)) * ci;
        S* out_row = out.data() + (std::size_t(y) * wd + std::size_t(x_lo)) * co;
        for (long xx = x_lo; xx < x_hi; ++xx) {
          for (std::size_t p = 0; p < ci; ++p) {
            const S a = in_row[p];
            const S* wrow = wk + p * co;
            for (std::size_t j = 0; j < co; ++j) out_row[j] += a * wrow[j];
          }
          in_row += ci;
          out_row += co;
        }
      }
    }
  }

  std::vector<typename Value<S>::NodePtr> parents{x.node(), w.node()};
  if (bias.defined()) parents.push_back(bias.node());
  auto n = make_op_node<S>({h, wd, co}, std::move(out), std::move(parents));
  auto* px = x.node().get();
  auto* pw = w.node().get();
  auto* pbias = bias.defined() ? bias.node().get() : nullptr;
  n->backward_fn = [px, pw, pbias, h, wd, ci, kh, kw, co, pad](typename Value<S>::Node& self) {
    const S* g = self.grad.data();
    if (pbias && pbias->requires_grad) {
      for (std::size_t p = 0; p < h * wd; ++p)
        for (std::size_t j = 0; j < co; ++j) pbias->grad[j] += g[p * co + j];
    }
    for (std::size_t dy = 0; dy < kh; ++dy) {
      for (std::size_t dx = 0; dx < kw; ++dx) {
        const S* wk = pw->data.data() + (dy * kw + dx) * ci * co;
        S* wgk = pw->grad.data() + (dy * kw + dx) * ci * co;
        const long y_lo = std::max<long>(0, pad - long(dy));
        const long y_hi = std::min<long>(long(h), long(h) + pad - long(dy));
        const long x_lo = std::max<long>(0, pad - long(dx));
        const long x_hi = std::min<long>(long(wd), long(wd) + pad - long(dx));
        for (long y = y_lo; y < y_hi; ++y) {
          const long iy = y + long(dy) - pad;
          const std::size_t in_base = (std::size_t(iy) * wd + std::size_t(x_lo + long(dx) - pad)) * ci;
          const std::size_t out_base = (std::size_t(y) * wd + std::size_t(x_lo)) * co;
          const S* in_row = px->data.data() + in_base;
          S* ing_row = px->requires_grad ? px->grad.data() + in_base : nullptr;
          const S* g_row = g + out_base;
          for (long xx = x_lo; xx < x_hi; ++xx) {
            for (std::size_t p = 0; p < ci; ++p) {
              const S a = in_row[p];
              const S* wrow = wk + p * co;
              S acc = S(0);
              if (pw->requires_grad) {
                S* wgrow = wgk + p * co;
                for (std::size_t j = 0; j < co; ++j) {
                  acc += g_row[j] * wrow[j];
                  wgrow[j] += a * g_row[j];
                }
              } else {
                for (std::size_t j = 0; j < co; ++j) acc += g_row[j] * wrow[j];
              }
              if (ing_row) ing_row[p] += acc;
            }
            in_row += ci;
            if (ing_row) ing_row += ci;
            g_row += co;
          }
        }
      }
    }
  };
  return Value<S>(n);
}

// 2x2 max pooling, stride 2; input sides must be even.
template <class S>
Value<S> maxpool2(const Value<S>& x) {
  using namespace tensor_detail;
  APNET_REQUIRE(x.shape().size() == 3, "maxpool2: input must be HxWxC");
  const std::size_t h = x.shape()[0], w = x.shape()[1], c = x.shape()[2];
  APNET_REQUIRE(h % 2 == 0 && w % 2 == 0, "maxpool2: sides must be even, got ", h, "x", w);
  const std::size_t oh = h / 2, ow = w / 2;
  std::vector<S> out(oh * ow * c);
  std::vector<std::size_t> argmax(oh * ow * c);
  for (std::size_t y = 0; y < oh; ++y) {
    for (std::size_t xx = 0; xx < ow; ++xx) {
      for (std::size_t j = 0; j < c; ++j) {
        S best = -std::numeric_limits<S>::infinity();
        std::size_t best_i = 0;
        for (std::size_t dy = 0; dy < 2; ++dy) {
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t i = ((2 * y + dy) * w + (2 * xx + dx)) * c + j;
            if (x.data()[i] > best) {
              best = x.data()[i];
              best_i = i;
            }
          }
        }
        const std::size_t o = (y * ow + xx) * c + j;
        out[o] = best;
        argmax[o] = best_i;
      }
    }
  }
  auto n = make_op_node<S>({oh, ow, c}, std::move(out), {x.node()});
  auto* px = x.node().get();
  n->backward_fn = [px, argmax](typename Value<S>::Node& self) {
    if (!px->requires_grad) return;
    for (std::size_t o = 0; o < self.grad.size(); ++o) px->grad[argmax[o]] += self.grad[o];
  };
  return Value<S>(n);
}

// nearest-neighbor 2x upsampling
template <class S>
Value<S> upsample2(const Value<S>& x) {
  using namespace tensor_detail;
  APNET_REQUIRE(x.shape().size() == 3, "upsample2: input must be HxWxC");
  const std::size_t h = x.shape()[0], w = x.shape()[1], c = x.shape()[2];
  const std::size_t oh = h * 2, ow = w * 2;
  std::vector<S> out(oh * ow * c);
  for (std::size_t y = 0; y < oh; ++y) {
    for (std::size_t xx = 0; xx < ow; ++xx) {
      const S* src = x.data().data() + ((y / 2) * w + (xx / 2)) * c;
      S* dst = out.data() + (y * ow + xx) * c;
      std::copy_n(src, c, dst);
    }
  }
  auto n = make_op_node<S>({oh, ow, c}, std::move(out), {x.node()});
  auto* px = x.node().get();
  n->backward_fn = [px, h, w, c, oh, ow](typename Value<S>::Node& self) {
    if (!px->requires_grad) return;
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t xx = 0; xx < ow; ++xx) {
        const S* g = self.grad.data() + (y * ow + xx) * c;
        S* d = px->grad.data() + ((y / 2) * w + (xx / 2)) * c;
        for (std::size_t j = 0; j < c; ++j) d[j] += g[j];
      }
    }
  };
  return Value<S>(n);
}

// ---- sampling / aggregation ----

// Bilinear sampling of a HxWxC grid at continuous pixel coordinates
// (sample locations sit at integer coordinates). Coordinates outside the
// grid are clamped to the border; `clamped_count`, when given, receives the
// number of such samples. Gradients flow into the grid only.
template <class S>
Value<S> bilinear_sample(const Value<S>& grid,
                         const std::vector<std::pair<double, double>>& coords,
                         std::size_t* clamped_count = nullptr) {
  using namespace tensor_detail;
  APNET_REQUIRE(grid.shape().size() == 3, "bilinear_sample: grid must be HxWxC");
  const std::size_t h = grid.shape()[0], w = grid.shape()[1], c = grid.shape()[2];
  APNET_REQUIRE(h >= 1 && w >= 1, "bilinear_sample: degenerate grid");

  struct Tap {
    std::size_t idx[4];
    S wgt[4];
  };
  std::vector<Tap> taps(coords.size());
  std::size_t clamped = 0;
  for (std::size_t i = 0; i < coords.size(); ++i) {
    double cx = coords[i].first, cy = coords[i].second;
    const bool outside = cx < 0.0 || cy < 0.0 || cx > double(w - 1) || cy > double(h - 1);
    if (outside) ++clamped;
    cx = std::clamp(cx, 0.0, double(w - 1));
    cy = std::clamp(cy, 0.0, double(h - 1));
    const std::size_t x0 = std::min(std::size_t(cx), w - 1);
    const std::size_t y0 = std::min(std::size_t(cy), h - 1);
    const std::size_t x1 = std::min(x0 + 1, w - 1);
    const std::size_t y1 = std::min(y0 + 1, h - 1);
    const double fx = cx - double(x0), fy = cy - double(y0);
    taps[i].idx[0] = (y0 * w + x0) * c;
    taps[i].idx[1] = (y0 * w + x1) * c;
    taps[i].idx[2] = (y1 * w + x0) * c;
    taps[i].idx[3] = (y1 * w + x1) * c;
    taps[i].wgt[0] = S((1.0 - fx) * (1.0 - fy));
    taps[i].wgt[1] = S(fx * (1.0 - fy));
    taps[i].wgt[2] = S((1.0 - fx) * fy);
    taps[i].wgt[3] = S(fx * fy);
  }
  if (clamped_count) *clamped_count = clamped;

  std::vector<S> out(coords.size() * c, S(0));
  for (std::size_t i = 0; i < coords.size(); ++i) {
    S* dst = out.data() + i * c;
    for (int t = 0; t < 4; ++t) {
      const S wg = taps[i].wgt[t];
      if (wg == S(0)) continue;
      const S* src = grid.data().data() + taps[i].idx[t];
      for (std::size_t j = 0; j < c; ++j) dst[j] += wg * src[j];
    }
  }
  auto n = make_op_node<S>({coords.size(), c}, std::move(out), {grid.node()});
  auto* pg = grid.node().get();
  n->backward_fn = [pg, taps, c](typename Value<S>::Node& self) {
    if (!pg->requires_grad) return;
    for (std::size_t i = 0; i < taps.size(); ++i) {
      const S* g = self.grad.data() + i * c;
      for (int t = 0; t < 4; ++t) {
        const S wg = taps[i].wgt[t];
        if (wg == S(0)) continue;
        S* dst = pg->grad.data() + taps[i].idx[t];
        for (std::size_t j = 0; j < c; ++j) dst[j] += wg * g[j];
      }
    }
  };
  return Value<S>(n);
}

// Per-query max over the features of listed neighbor rows. Queries with an
// empty list produce zeros. CSR-style lists: neighbors of query q are
// flat[offsets[q] .. offsets[q+1]).
template <class S>
Value<S> neighbor_max_pool(const Value<S>& feat, const std::vector<std::size_t>& flat,
                           const std::vector<std::size_t>& offsets) {
  using namespace tensor_detail;
  APNET_REQUIRE(feat.shape().size() == 2, "neighbor_max_pool: features must be NxC");
  const std::size_t rows = feat.shape()[0], c = feat.shape()[1];
  APNET_REQUIRE(!offsets.empty() && offsets.front() == 0 && offsets.back() == flat.size(),
                "neighbor_max_pool: malformed offsets");
  for (std::size_t i : flat)
    APNET_REQUIRE(i < rows, "neighbor_max_pool: index ", i, " out of range [0, ", rows, ")");
  const std::size_t q = offsets.size() - 1;

  std::vector<S> out(q * c, S(0));
  std::vector<std::int64_t> argmax(q * c, -1);
  for (std::size_t i = 0; i < q; ++i) {
    const std::size_t lo = offsets[i], hi = offsets[i + 1];
    if (lo == hi) continue;
    for (std::size_t j = 0; j < c; ++j) {
      S best = -std::numeric_limits<S>::infinity();
      std::size_t best_row = 0;
      for (std::size_t t = lo; t < hi; ++t) {
        const S v = feat.data()[flat[t] * c + j];
        if (v > best) {
          best = v;
          best_row = flat[t];
        }
      }
      out[i * c + j] = best;
      argmax[i * c + j] = std::int64_t(best_row * c + j);
    }
  }
  auto n = make_op_node<S>({q, c}, std::move(out), {feat.node()});
  auto* pf = feat.node().get();
  n->backward_fn = [pf, argmax](typename Value<S>::Node& self) {
    if (!pf->requires_grad) return;
    for (std::size_t o = 0; o < self.grad.size(); ++o)
      if (argmax[o] >= 0) pf->grad[std::size_t(argmax[o])] += self.grad[o];
  };
  return Value<S>(n);
}

}  // namespace apnet
