#include "bsm/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace bsm {

namespace {

int64_t shape_numel(const std::vector<int64_t>& shape) {
  int64_t n = 1;
  for (int64_t d : shape) {
    if (d < 0) throw std::invalid_argument("tensor: negative dimension");
    n *= d;
  }
  return n;
}

std::string shape_str(const std::vector<int64_t>& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

[[noreturn]] void shape_error(const std::string& what,
                              const std::vector<int64_t>& a,
                              const std::vector<int64_t>& b) {
  throw std::invalid_argument(what + ": shapes " + shape_str(a) + " and " +
                              shape_str(b) + " are incompatible");
}

std::shared_ptr<TensorImpl> new_impl(std::vector<int64_t> shape,
                                     std::vector<double> data) {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  return impl;
}

bool any_needs_grad(const std::vector<Tensor>& parents) {
  for (const auto& p : parents)
    if (p.impl() && p.impl()->needs_grad) return true;
  return false;
}

// Records an op node when any input is on a gradient path; otherwise returns
// a plain value tensor (no history) so value-only evaluation stays cheap.
Tensor make_node(const char* op, std::vector<int64_t> shape,
                 std::vector<double> data, const std::vector<Tensor>& parents,
                 std::function<void(TensorImpl&)> backward_fn) {
  auto impl = new_impl(std::move(shape), std::move(data));
  if (any_needs_grad(parents)) {
    impl->needs_grad = true;
    impl->op = op;
    for (const auto& p : parents) impl->parents.push_back(p.impl());
    impl->backward_fn = std::move(backward_fn);
  }
  return Tensor(impl);
}

}  // namespace

void TensorImpl::ensure_grad() {
  if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
}

// ---------------------------------------------------------------------------
// Tensor handle

Tensor Tensor::zeros(std::vector<int64_t> shape, bool requires_grad) {
  const int64_t n = shape_numel(shape);
  auto impl = new_impl(std::move(shape), std::vector<double>(n, 0.0));
  impl->requires_grad = impl->needs_grad = requires_grad;
  return Tensor(impl);
}

Tensor Tensor::full(std::vector<int64_t> shape, double value,
                    bool requires_grad) {
  const int64_t n = shape_numel(shape);
  auto impl = new_impl(std::move(shape), std::vector<double>(n, value));
  impl->requires_grad = impl->needs_grad = requires_grad;
  return Tensor(impl);
}

Tensor Tensor::from_data(std::vector<int64_t> shape, std::vector<double> data,
                         bool requires_grad) {
  if (shape_numel(shape) != static_cast<int64_t>(data.size()))
    throw std::invalid_argument("from_data: shape " + shape_str(shape) +
                                " does not match " +
                                std::to_string(data.size()) + " values");
  auto impl = new_impl(std::move(shape), std::move(data));
  impl->requires_grad = impl->needs_grad = requires_grad;
  return Tensor(impl);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from_data({}, {value}, requires_grad);
}

const std::vector<int64_t>& Tensor::shape() const { return impl_->shape; }
int64_t Tensor::numel() const { return impl_->numel(); }
int Tensor::rank() const { return static_cast<int>(impl_->shape.size()); }

int64_t Tensor::dim(int axis) const {
  if (axis < 0 || axis >= rank())
    throw std::invalid_argument("dim: axis " + std::to_string(axis) +
                                " out of range for " + shape_str(shape()));
  return impl_->shape[axis];
}

std::span<const double> Tensor::data() const {
  return {impl_->data.data(), impl_->data.size()};
}

std::span<double> Tensor::mutable_data() {
  if (impl_->backward_fn)
    throw std::logic_error("mutable_data: tensor is an op output, not a leaf");
  return {impl_->data.data(), impl_->data.size()};
}

bool Tensor::requires_grad() const { return impl_->requires_grad; }

std::span<const double> Tensor::grad() const {
  return {impl_->grad.data(), impl_->grad.size()};
}

void Tensor::zero_grad() {
  std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

double Tensor::item() const {
  if (numel() != 1)
    throw std::invalid_argument("item: tensor has " + std::to_string(numel()) +
                                " elements, expected 1");
  return impl_->data[0];
}

double Tensor::at(std::initializer_list<int64_t> index) const {
  if (static_cast<int>(index.size()) != rank())
    throw std::invalid_argument("at: rank mismatch");
  int64_t off = 0;
  int axis = 0;
  for (int64_t i : index) {
    off = off * impl_->shape[axis] + i;
    ++axis;
  }
  return impl_->data[off];
}

Tensor Tensor::clone_detached(bool requires_grad) const {
  return from_data(impl_->shape, impl_->data, requires_grad);
}

// ---------------------------------------------------------------------------
// Graph and backward

Graph Graph::build(const Tensor& root) {
  Graph g;
  if (!root.defined()) return g;
  std::unordered_set<TensorImpl*> visited;
  // Iterative postorder DFS; parents are pushed in recorded order so the
  // resulting topological order is deterministic.
  std::vector<std::pair<TensorImpl*, size_t>> stack;
  stack.emplace_back(root.impl().get(), 0);
  visited.insert(root.impl().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      TensorImpl* p = node->parents[next++].get();
      if (p->needs_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      g.order.push_back(node);
      stack.pop_back();
    }
  }
  return g;
}

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1)
    throw std::invalid_argument(
        "backward: loss must be a single-element tensor");
  if (!loss.impl()->needs_grad) return;  // nothing reachable requires grad
  Graph g = Graph::build(loss);
  // Intermediate (op output) gradients are scratch for this pass; only leaf
  // gradients accumulate across repeated backward calls.
  for (TensorImpl* node : g.order)
    if (node->backward_fn) std::fill(node->grad.begin(), node->grad.end(), 0.0);
  loss.impl()->ensure_grad();
  loss.impl()->grad[0] += 1.0;
  for (auto it = g.order.rbegin(); it != g.order.rend(); ++it) {
    TensorImpl* node = *it;
    if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
  }
}

// ---------------------------------------------------------------------------
// Primitive ops

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    shape_error("matmul", a.shape(), b.shape());
  const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(static_cast<size_t>(m * n));
  kernels::gemm(kernels::Trans::N, kernels::Trans::N, m, n, k,
                a.data().data(), b.data().data(), out.data(), false);
  auto ai = a.impl(), bi = b.impl();
  return make_node("matmul", {m, n}, std::move(out), {a, b},
                   [ai, bi, m, n, k](TensorImpl& self) {
                     const double* g = self.grad.data();
                     if (ai->needs_grad) {
                       ai->ensure_grad();
                       kernels::gemm(kernels::Trans::N, kernels::Trans::T, m,
                                     k, n, g, bi->data.data(),
                                     ai->grad.data(), true);
                     }
                     if (bi->needs_grad) {
                       bi->ensure_grad();
                       kernels::gemm(kernels::Trans::T, kernels::Trans::N, k,
                                     n, m, ai->data.data(), g,
                                     bi->grad.data(), true);
                     }
                   });
}

Tensor unary(Unary kind, const Tensor& x) {
  const int64_t n = x.numel();
  std::vector<double> out(static_cast<size_t>(n));
  kernels::unary_forward(kind, n, x.data().data(), out.data());
  auto xi = x.impl();
  return make_node("unary", x.shape(), std::move(out), {x},
                   [xi, kind, n](TensorImpl& self) {
                     if (!xi->needs_grad) return;
                     xi->ensure_grad();
                     kernels::unary_backward(kind, n, xi->data.data(),
                                             self.data.data(),
                                             self.grad.data(),
                                             xi->grad.data());
                   });
}

namespace {

// b broadcasts into a when it is a scalar or its shape is a trailing suffix
// of a's shape. Returns the broadcast period (b's element count).
int64_t broadcast_period(const Tensor& a, const Tensor& b, const char* op) {
  if (b.numel() == 1) return 1;
  const auto& as = a.shape();
  const auto& bs = b.shape();
  if (bs.size() > as.size()) shape_error(op, as, bs);
  for (size_t i = 0; i < bs.size(); ++i)
    if (bs[bs.size() - 1 - i] != as[as.size() - 1 - i])
      shape_error(op, as, bs);
  return b.numel();
}

// gb[j] += sum over i with i % bn == j of g[i] * (aval ? a[i] : 1)
void broadcast_grad_accum(int64_t n, int64_t bn, const double* g,
                          const double* a, double sign, double* gb) {
  const int64_t reps = n / bn;
  for (int64_t j = 0; j < bn; ++j) {
    double acc = 0.0;
    for (int64_t r = 0; r < reps; ++r) {
      const int64_t i = r * bn + j;
      acc += a ? g[i] * a[i] : g[i];
    }
    gb[j] += sign * acc;
  }
}

Tensor binary_op(kernels::Binary op, const char* name, const Tensor& a,
                 const Tensor& b) {
  const int64_t bn = broadcast_period(a, b, name);
  const int64_t n = a.numel();
  std::vector<double> out(static_cast<size_t>(n));
  kernels::binary_forward(op, n, a.data().data(), bn, b.data().data(),
                          out.data());
  auto ai = a.impl(), bi = b.impl();
  return make_node(name, a.shape(), std::move(out), {a, b},
                   [ai, bi, op, n, bn](TensorImpl& self) {
                     const double* g = self.grad.data();
                     using kernels::Binary;
                     if (ai->needs_grad) {
                       ai->ensure_grad();
                       double* ga = ai->grad.data();
                       if (op == Binary::Mul) {
                         const double* bd = bi->data.data();
                         for (int64_t i = 0; i < n; ++i)
                           ga[i] += g[i] * bd[i % bn];
                       } else {
                         kernels::axpy(n, g, 1.0, ga);
                       }
                     }
                     if (bi->needs_grad) {
                       bi->ensure_grad();
                       const double sign = op == Binary::Sub ? -1.0 : 1.0;
                       broadcast_grad_accum(
                           n, bn, g,
                           op == Binary::Mul ? ai->data.data() : nullptr,
                           sign, bi->grad.data());
                     }
                   });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(kernels::Binary::Add, "add", a, b);
}
Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(kernels::Binary::Sub, "sub", a, b);
}
Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(kernels::Binary::Mul, "mul", a, b);
}

Tensor scale(const Tensor& x, double factor) {
  const int64_t n = x.numel();
  std::vector<double> out(static_cast<size_t>(n));
  kernels::scale_forward(n, x.data().data(), factor, out.data());
  auto xi = x.impl();
  return make_node("scale", x.shape(), std::move(out), {x},
                   [xi, factor, n](TensorImpl& self) {
                     if (!xi->needs_grad) return;
                     xi->ensure_grad();
                     kernels::axpy(n, self.grad.data(), factor,
                                   xi->grad.data());
                   });
}

// ---------------------------------------------------------------------------
// Reductions

Tensor reduce(Reduce kind, const Tensor& x, std::vector<int> axes) {
  const int r = x.rank();
  if (axes.empty()) {
    axes.resize(r);
    for (int i = 0; i < r; ++i) axes[i] = i;
  }
  std::sort(axes.begin(), axes.end());
  for (size_t i = 0; i < axes.size(); ++i) {
    if (axes[i] < 0 || axes[i] >= r)
      throw std::invalid_argument("reduce: axis " + std::to_string(axes[i]) +
                                  " out of range for " +
                                  shape_str(x.shape()));
    if (i > 0 && axes[i] == axes[i - 1])
      throw std::invalid_argument("reduce: duplicate axis " +
                                  std::to_string(axes[i]));
  }

  std::vector<bool> reduced(r, false);
  int64_t count = 1;
  for (int ax : axes) {
    reduced[ax] = true;
    count *= x.dim(ax);
  }
  std::vector<int64_t> out_shape;
  for (int i = 0; i < r; ++i)
    if (!reduced[i]) out_shape.push_back(x.dim(i));

  // Fold reduced axes one at a time, innermost first.
  std::vector<double> cur;
  const bool absfirst = kind == Reduce::L1;
  {
    const int64_t n = x.numel();
    cur.resize(n);
    if (absfirst)
      kernels::unary_forward(Unary::Abs, n, x.data().data(), cur.data());
    else
      std::memcpy(cur.data(), x.data().data(), sizeof(double) * n);
  }
  std::vector<int64_t> cur_shape = x.shape();
  for (auto it = axes.rbegin(); it != axes.rend(); ++it) {
    const int ax = *it;
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < ax; ++i) outer *= cur_shape[i];
    for (size_t i = ax + 1; i < cur_shape.size(); ++i) inner *= cur_shape[i];
    std::vector<double> next(static_cast<size_t>(outer * inner));
    kernels::reduce_mid_axis(outer, cur_shape[ax], inner, cur.data(),
                             next.data());
    cur = std::move(next);
    cur_shape.erase(cur_shape.begin() + ax);
  }
  if (kind == Reduce::Mean) {
    for (double& v : cur) v /= static_cast<double>(count);
  }

  // Strides of x and of the output in x's coordinate system, for the
  // gradient broadcast.
  std::vector<int64_t> xstride(r, 1);
  for (int i = r - 2; i >= 0; --i) xstride[i] = xstride[i + 1] * x.dim(i + 1);
  std::vector<int64_t> gmap_stride(r, 0);
  {
    int64_t s = 1;
    for (int i = r - 1; i >= 0; --i) {
      if (!reduced[i]) {
        gmap_stride[i] = s;
        s *= x.dim(i);
      }
    }
  }

  auto xi = x.impl();
  const int64_t n = x.numel();
  const double factor = kind == Reduce::Mean ? 1.0 / double(count) : 1.0;
  const bool signed_grad = kind == Reduce::L1;
  return make_node(
      "reduce", out_shape, std::move(cur), {x},
      [xi, n, r, xstride, gmap_stride, factor, signed_grad](TensorImpl& self) {
        if (!xi->needs_grad) return;
        xi->ensure_grad();
        const double* g = self.grad.data();
        const double* xd = xi->data.data();
        double* gx = xi->grad.data();
#pragma omp parallel for if (n >= (1 << 14)) schedule(static)
        for (int64_t i = 0; i < n; ++i) {
          int64_t rem = i, off = 0;
          for (int axq = 0; axq < r; ++axq) {
            const int64_t coord = rem / xstride[axq];
            rem -= coord * xstride[axq];
            off += coord * gmap_stride[axq];
          }
          double gi = g[off] * factor;
          if (signed_grad)
            gi *= xd[i] > 0.0 ? 1.0 : (xd[i] < 0.0 ? -1.0 : 0.0);
          gx[i] += gi;
        }
      });
}

// ---------------------------------------------------------------------------
// Shape ops

Tensor reshape(const Tensor& x, std::vector<int64_t> new_shape) {
  if (shape_numel(new_shape) != x.numel())
    shape_error("reshape", x.shape(), new_shape);
  std::vector<double> out(x.data().begin(), x.data().end());
  auto xi = x.impl();
  const int64_t n = x.numel();
  return make_node("reshape", std::move(new_shape), std::move(out), {x},
                   [xi, n](TensorImpl& self) {
                     if (!xi->needs_grad) return;
                     xi->ensure_grad();
                     kernels::axpy(n, self.grad.data(), 1.0,
                                   xi->grad.data());
                   });
}

namespace {

void axis_blocks(const Tensor& x, int axis, int64_t& outer, int64_t& inner) {
  outer = 1;
  inner = 1;
  for (int i = 0; i < axis; ++i) outer *= x.dim(i);
  for (int i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
}

}  // namespace

Tensor slice(const Tensor& x, int axis, int64_t start, int64_t len) {
  if (axis < 0 || axis >= x.rank())
    throw std::invalid_argument("slice: axis out of range for " +
                                shape_str(x.shape()));
  const int64_t alen = x.dim(axis);
  if (start < 0 || len < 0 || start + len > alen)
    throw std::invalid_argument(
        "slice: range [" + std::to_string(start) + "," +
        std::to_string(start + len) + ") exceeds axis of size " +
        std::to_string(alen));
  int64_t outer, inner;
  axis_blocks(x, axis, outer, inner);
  std::vector<int64_t> out_shape = x.shape();
  out_shape[axis] = len;
  std::vector<double> out(static_cast<size_t>(outer * len * inner));
  const double* xd = x.data().data();
  for (int64_t o = 0; o < outer; ++o)
    std::memcpy(out.data() + o * len * inner,
                xd + (o * alen + start) * inner,
                sizeof(double) * static_cast<size_t>(len * inner));
  auto xi = x.impl();
  return make_node("slice", std::move(out_shape), std::move(out), {x},
                   [xi, outer, inner, alen, start, len](TensorImpl& self) {
                     if (!xi->needs_grad) return;
                     xi->ensure_grad();
                     const double* g = self.grad.data();
                     double* gx = xi->grad.data();
                     for (int64_t o = 0; o < outer; ++o) {
                       double* dst = gx + (o * alen + start) * inner;
                       const double* src = g + o * len * inner;
                       for (int64_t i = 0; i < len * inner; ++i)
                         dst[i] += src[i];
                     }
                   });
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  const Tensor& first = parts.front();
  if (axis < 0 || axis >= first.rank())
    throw std::invalid_argument("concat: axis out of range");
  int64_t total = 0;
  for (const auto& p : parts) {
    if (p.rank() != first.rank()) shape_error("concat", first.shape(), p.shape());
    for (int i = 0; i < first.rank(); ++i)
      if (i != axis && p.dim(i) != first.dim(i))
        shape_error("concat", first.shape(), p.shape());
    total += p.dim(axis);
  }
  std::vector<int64_t> out_shape = first.shape();
  out_shape[axis] = total;
  int64_t outer, inner;
  axis_blocks(first, axis, outer, inner);
  std::vector<double> out(static_cast<size_t>(outer * total * inner));
  int64_t offset = 0;
  for (const auto& p : parts) {
    const int64_t plen = p.dim(axis);
    const double* pd = p.data().data();
    for (int64_t o = 0; o < outer; ++o)
      std::memcpy(out.data() + (o * total + offset) * inner,
                  pd + o * plen * inner,
                  sizeof(double) * static_cast<size_t>(plen * inner));
    offset += plen;
  }
  std::vector<std::shared_ptr<TensorImpl>> impls;
  std::vector<int64_t> lens;
  for (const auto& p : parts) {
    impls.push_back(p.impl());
    lens.push_back(p.dim(axis));
  }
  return make_node("concat", std::move(out_shape), std::move(out), parts,
                   [impls, lens, outer, inner, total](TensorImpl& self) {
                     const double* g = self.grad.data();
                     int64_t off = 0;
                     for (size_t pi = 0; pi < impls.size(); ++pi) {
                       auto& p = impls[pi];
                       const int64_t plen = lens[pi];
                       if (p->needs_grad) {
                         p->ensure_grad();
                         double* gp = p->grad.data();
                         for (int64_t o = 0; o < outer; ++o) {
                           const double* src = g + (o * total + off) * inner;
                           double* dst = gp + o * plen * inner;
                           for (int64_t i = 0; i < plen * inner; ++i)
                             dst[i] += src[i];
                         }
                       }
                       off += plen;
                     }
                   });
}

Tensor reverse(const Tensor& x, int axis) {
  if (axis < 0 || axis >= x.rank())
    throw std::invalid_argument("reverse: axis out of range for " +
                                shape_str(x.shape()));
  int64_t outer, inner;
  axis_blocks(x, axis, outer, inner);
  const int64_t alen = x.dim(axis);
  std::vector<double> out(static_cast<size_t>(x.numel()));
  const double* xd = x.data().data();
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t j = 0; j < alen; ++j)
      std::memcpy(out.data() + (o * alen + j) * inner,
                  xd + (o * alen + (alen - 1 - j)) * inner,
                  sizeof(double) * static_cast<size_t>(inner));
  auto xi = x.impl();
  return make_node("reverse", x.shape(), std::move(out), {x},
                   [xi, outer, inner, alen](TensorImpl& self) {
                     if (!xi->needs_grad) return;
                     xi->ensure_grad();
                     const double* g = self.grad.data();
                     double* gx = xi->grad.data();
                     for (int64_t o = 0; o < outer; ++o)
                       for (int64_t j = 0; j < alen; ++j) {
                         const double* src = g + (o * alen + j) * inner;
                         double* dst =
                             gx + (o * alen + (alen - 1 - j)) * inner;
                         for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
                       }
                   });
}

Tensor transpose01(const Tensor& x) {
  if (x.rank() < 2)
    throw std::invalid_argument("transpose01: rank must be >= 2, got " +
                                shape_str(x.shape()));
  const int64_t a = x.dim(0), b = x.dim(1);
  int64_t rest = 1;
  for (int i = 2; i < x.rank(); ++i) rest *= x.dim(i);
  std::vector<int64_t> out_shape = x.shape();
  std::swap(out_shape[0], out_shape[1]);
  std::vector<double> out(static_cast<size_t>(x.numel()));
  const double* xd = x.data().data();
  for (int64_t i = 0; i < a; ++i)
    for (int64_t j = 0; j < b; ++j)
      std::memcpy(out.data() + (j * a + i) * rest, xd + (i * b + j) * rest,
                  sizeof(double) * static_cast<size_t>(rest));
  auto xi = x.impl();
  return make_node("transpose01", std::move(out_shape), std::move(out), {x},
                   [xi, a, b, rest](TensorImpl& self) {
                     if (!xi->needs_grad) return;
                     xi->ensure_grad();
                     const double* g = self.grad.data();
                     double* gx = xi->grad.data();
                     for (int64_t j = 0; j < b; ++j)
                       for (int64_t i = 0; i < a; ++i) {
                         const double* src = g + (j * a + i) * rest;
                         double* dst = gx + (i * b + j) * rest;
                         for (int64_t k = 0; k < rest; ++k) dst[k] += src[k];
                       }
                   });
}

// ---------------------------------------------------------------------------
// rmsnorm

Tensor rmsnorm(const Tensor& x, const Tensor& gain, double eps) {
  if (x.rank() < 1 || gain.rank() != 1 || gain.dim(0) != x.dim(x.rank() - 1))
    shape_error("rmsnorm", x.shape(), gain.shape());
  const int64_t d = gain.dim(0);
  const int64_t rows = x.numel() / d;
  std::vector<double> out(static_cast<size_t>(x.numel()));
  auto rinv = std::make_shared<std::vector<double>>(rows);
  const double* xd = x.data().data();
  const double* gd = gain.data().data();
#pragma omp parallel for if (rows * d >= (1 << 14)) schedule(static)
  for (int64_t row = 0; row < rows; ++row) {
    const double* xr = xd + row * d;
    double ms = 0.0;
    for (int64_t i = 0; i < d; ++i) ms += xr[i] * xr[i];
    ms = ms / double(d) + eps;
    const double r = 1.0 / std::sqrt(ms);
    (*rinv)[row] = r;
    double* yr = out.data() + row * d;
    for (int64_t i = 0; i < d; ++i) yr[i] = xr[i] * r * gd[i];
  }
  auto xi = x.impl(), gi = gain.impl();
  return make_node(
      "rmsnorm", x.shape(), std::move(out), {x, gain},
      [xi, gi, rinv, rows, d](TensorImpl& self) {
        const double* g = self.grad.data();
        const double* xd = xi->data.data();
        const double* gd = gi->data.data();
        if (xi->needs_grad) {
          xi->ensure_grad();
          double* gx = xi->grad.data();
#pragma omp parallel for if (rows * d >= (1 << 14)) schedule(static)
          for (int64_t row = 0; row < rows; ++row) {
            const double r = (*rinv)[row];
            const double* xr = xd + row * d;
            const double* gr = g + row * d;
            double dot = 0.0;
            for (int64_t i = 0; i < d; ++i) dot += gr[i] * gd[i] * xr[i];
            const double c = r * r * r * dot / double(d);
            double* gxr = gx + row * d;
            for (int64_t i = 0; i < d; ++i)
              gxr[i] += r * gd[i] * gr[i] - c * xr[i];
          }
        }
        if (gi->needs_grad) {
          gi->ensure_grad();
          double* gg = gi->grad.data();
          for (int64_t i = 0; i < d; ++i) {
            double acc = 0.0;
            for (int64_t row = 0; row < rows; ++row)
              acc += g[row * d + i] * xd[row * d + i] * (*rinv)[row];
            gg[i] += acc;
          }
        }
      });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  Tensor y = matmul(x, w);
  if (b.defined()) y = add(y, b);
  return y;
}

Tensor glu(const Tensor& x) {
  const int last = x.rank() - 1;
  const int64_t d = x.dim(last);
  if (d % 2 != 0)
    throw std::invalid_argument("glu: last axis must be even, got " +
                                std::to_string(d));
  Tensor value = slice(x, last, 0, d / 2);
  Tensor gate = slice(x, last, d / 2, d / 2);
  return mul(value, sigmoid(gate));
}

// ---------------------------------------------------------------------------
// Gradient checking

std::string GradCheckReport::summary() const {
  std::ostringstream os;
  os << (pass ? "PASS" : "FAIL") << " max_rel_err=" << max_rel_err
     << " tol=" << tol;
  if (!pass) {
    for (const auto& e : per_param) {
      if (e.max_rel_err > tol)
        os << "\n  " << e.name << " err=" << e.max_rel_err << " at ["
           << e.worst_index << "] analytic=" << e.analytic
           << " numeric=" << e.numeric;
    }
  }
  return os.str();
}

GradCheckReport grad_check(
    const std::function<Tensor(const std::vector<Tensor>&)>& make_loss,
    const std::vector<std::pair<std::string, Tensor>>& params, double h,
    double tol, double scale_floor) {
  if (h <= 0.0) throw std::invalid_argument("grad_check: h must be positive");

  std::vector<Tensor> leaves;
  leaves.reserve(params.size());
  for (auto& [name, t] : params) {
    (void)name;
    leaves.push_back(t);
    leaves.back().zero_grad();
  }
  Tensor loss = make_loss(leaves);
  backward(loss);

  // Analytic gradients, copied out before the FD loop mutates anything.
  std::vector<std::vector<double>> analytic(params.size());
  for (size_t p = 0; p < params.size(); ++p) {
    auto g = leaves[p].grad();
    analytic[p].assign(g.begin(), g.end());
    if (analytic[p].empty())
      analytic[p].assign(static_cast<size_t>(leaves[p].numel()), 0.0);
  }

  GradCheckReport report;
  report.tol = tol;
  report.per_param.resize(params.size());

  // Flatten (param, element) pairs for one parallel loop over elements.
  std::vector<std::pair<size_t, int64_t>> jobs;
  for (size_t p = 0; p < params.size(); ++p)
    for (int64_t i = 0; i < leaves[p].numel(); ++i) jobs.emplace_back(p, i);

  std::vector<double> errs(jobs.size(), 0.0);
  std::vector<double> numerics(jobs.size(), 0.0);
  std::vector<uint8_t> bad(jobs.size(), 0);

#pragma omp parallel
  {
    // Each thread perturbs its own detached copy of the parameters.
    std::vector<Tensor> local;
    local.reserve(leaves.size());
    for (auto& t : leaves) local.push_back(t.clone_detached(false));
#pragma omp for schedule(dynamic, 16)
    for (int64_t j = 0; j < static_cast<int64_t>(jobs.size()); ++j) {
      const auto [p, i] = jobs[j];
      double* slot = &local[p].mutable_data()[i];
      const double saved = *slot;
      *slot = saved + h;
      const double up = make_loss(local).item();
      *slot = saved - h;
      const double dn = make_loss(local).item();
      *slot = saved;
      const double numeric = (up - dn) / (2.0 * h);
      if (!std::isfinite(up) || !std::isfinite(dn)) {
        bad[j] = 1;
        continue;
      }
      const double a = analytic[p][i];
      errs[j] = std::abs(a - numeric) /
                std::max(std::abs(a) + std::abs(numeric), scale_floor);
      numerics[j] = numeric;
    }
  }

  for (size_t j = 0; j < jobs.size(); ++j) {
    const auto [p, i] = jobs[j];
    if (bad[j])
      throw std::runtime_error("grad_check: non-finite evaluation while "
                               "perturbing parameter '" +
                               params[p].first + "'");
    auto& entry = report.per_param[p];
    entry.name = params[p].first;
    if (errs[j] >= entry.max_rel_err) {
      entry.max_rel_err = errs[j];
      entry.worst_index = i;
      entry.analytic = analytic[p][i];
      entry.numeric = numerics[j];
    }
    report.max_rel_err = std::max(report.max_rel_err, errs[j]);
  }
  report.pass = report.max_rel_err < tol;
  return report;
}

}  // namespace bsm
