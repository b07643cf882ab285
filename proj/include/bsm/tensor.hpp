#pragma once

// Dense tensors with tape-based reverse-mode automatic differentiation.
//
// Every differentiable operation records a node holding shared references to
// its inputs and a backward closure; backward(loss) topologically orders the
// reachable nodes and runs the closures once each, accumulating into the
// .grad buffers of leaf tensors that were created with requires_grad.
//
// Tensors are immutable after creation except for gradient accumulation and
// explicit leaf mutation through mutable_data() (parameters during
// optimization). Distinct graphs can be evaluated on distinct threads; a
// single graph is evaluated single-threaded (its kernels parallelize inside).

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "bsm/kernels.hpp"

namespace bsm {

struct TensorImpl;

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<int64_t> shape, bool requires_grad = false);
  static Tensor full(std::vector<int64_t> shape, double value,
                     bool requires_grad = false);
  static Tensor from_data(std::vector<int64_t> shape,
                          std::vector<double> data,
                          bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const std::vector<int64_t>& shape() const;
  int64_t numel() const;
  int rank() const;
  int64_t dim(int axis) const;

  std::span<const double> data() const;
  // Leaf mutation only (parameters); calling this on an op output would
  // silently desynchronize the tape, so it throws there.
  std::span<double> mutable_data();

  bool requires_grad() const;
  std::span<const double> grad() const;  // empty until backward reaches it
  void zero_grad();

  double item() const;  // value of a 1-element tensor
  double at(std::initializer_list<int64_t> index) const;

  // Deep copy of values only (fresh leaf, no tape history).
  Tensor clone_detached(bool requires_grad = false) const;

  std::shared_ptr<TensorImpl> impl() const { return impl_; }
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

 private:
  std::shared_ptr<TensorImpl> impl_;
};

struct TensorImpl {
  std::vector<int64_t> shape;
  std::vector<double> data;
  bool requires_grad = false;  // leaf flag
  bool needs_grad = false;     // true if on a path to a requires_grad leaf
  std::vector<double> grad;    // same size as data once touched

  // Tape record.
  const char* op = "leaf";
  std::vector<std::shared_ptr<TensorImpl>> parents;
  std::function<void(TensorImpl&)> backward_fn;

  void ensure_grad();
  int64_t numel() const { return static_cast<int64_t>(data.size()); }
};

// Explicit record of the primitive operations reachable from a root, in
// topological order (inputs before outputs). Acyclic by construction.
struct Graph {
  std::vector<TensorImpl*> order;
  static Graph build(const Tensor& root);
};

// Seeds d(loss)/d(loss) = 1 and accumulates gradients into every
// requires_grad tensor reachable from loss. Repeated calls accumulate;
// call zero_grad between passes when accumulation is not wanted.
// Throws std::invalid_argument when loss is not a 1-element tensor.
void backward(const Tensor& loss);

// ---- primitive operations -------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);  // [M,K] x [K,N] -> [M,N]

using kernels::Unary;
Tensor unary(Unary kind, const Tensor& x);
inline Tensor exp(const Tensor& x) { return unary(Unary::Exp, x); }
inline Tensor tanh(const Tensor& x) { return unary(Unary::Tanh, x); }
inline Tensor sigmoid(const Tensor& x) { return unary(Unary::Sigmoid, x); }
inline Tensor softplus(const Tensor& x) { return unary(Unary::Softplus, x); }
inline Tensor neg(const Tensor& x) { return unary(Unary::Neg, x); }
inline Tensor abs(const Tensor& x) { return unary(Unary::Abs, x); }

// Elementwise binary ops. Broadcasting is limited to the two patterns the
// model needs: identical shapes, and b a scalar or a trailing suffix of a's
// shape (bias vectors). Anything else throws.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

enum class Reduce { Sum, Mean, L1 };
// Reduces over the given axes (empty = all axes, producing a scalar).
// Reduced axes are removed from the shape.
Tensor reduce(Reduce kind, const Tensor& x, std::vector<int> axes = {});
inline Tensor sum(const Tensor& x, std::vector<int> axes = {}) {
  return reduce(Reduce::Sum, x, std::move(axes));
}
inline Tensor mean(const Tensor& x, std::vector<int> axes = {}) {
  return reduce(Reduce::Mean, x, std::move(axes));
}
inline Tensor l1(const Tensor& x, std::vector<int> axes = {}) {
  return reduce(Reduce::L1, x, std::move(axes));
}

Tensor reshape(const Tensor& x, std::vector<int64_t> new_shape);
Tensor slice(const Tensor& x, int axis, int64_t start, int64_t len);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor reverse(const Tensor& x, int axis);
// [A,B,rest...] -> [B,A,rest...]
Tensor transpose01(const Tensor& x);

// y = x / sqrt(mean(x^2, last axis) + eps) * gain, gain broadcast over the
// leading axes. gain must match the last axis of x.
Tensor rmsnorm(const Tensor& x, const Tensor& gain, double eps = 1e-8);

// x [rows, in] * w [in, out] + b [out]; b may be undefined for no bias.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

// Splits the last axis in half: value ⊙ sigmoid(gate).
Tensor glu(const Tensor& x);

// ---- gradient checking ----------------------------------------------------

struct GradCheckEntry {
  std::string name;
  double max_rel_err = 0.0;
  int64_t worst_index = -1;
  double analytic = 0.0;
  double numeric = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> per_param;
  double max_rel_err = 0.0;
  bool pass = false;
  double tol = 0.0;
  std::string summary() const;
};

// Compares the analytic gradient of make_loss(params) against central finite
// differences, parameter element by parameter element. make_loss must be a
// pure function of the parameter values. The relative error for one element
// uses err = |analytic - numeric| / max(|analytic| + |numeric|, scale_floor);
// the floor keeps float noise on near-zero gradients from dominating when the
// loss itself is of order >> 1.
// Throws std::runtime_error naming the parameter if an evaluation is
// non-finite.
GradCheckReport grad_check(
    const std::function<Tensor(const std::vector<Tensor>&)>& make_loss,
    const std::vector<std::pair<std::string, Tensor>>& params, double h,
    double tol, double scale_floor = 1.0);

}  // namespace bsm
