#pragma once

// Low-level numeric kernels. Every kernel here is deterministic: the value of
// each output element does not depend on the number of OpenMP threads, so a
// run with OMP_NUM_THREADS=1 and a run with 32 threads produce bit-identical
// results. Reductions that fold many values into one scalar use a fixed
// chunk decomposition instead of an omp reduction clause for the same reason.
//
// bsm::kernels::serial contains independently written naive versions of the
// same kernels. They are kept as a reference for the equivalence tests in
// tests/test_kernels.cpp and as the baseline for tools/bench.

#include <cmath>
#include <complex>
#include <cstdint>
#include <vector>

namespace bsm::kernels {

enum class Trans { N, T };

// C[m,n] = op(A) * op(B), or += when accumulate is set.
// op(A) is A[m,k] for Trans::N and A[k,m] for Trans::T; same for B.
void gemm(Trans ta, Trans tb, int64_t m, int64_t n, int64_t k,
          const double* a, const double* b, double* c, bool accumulate);

enum class Unary { Exp, Tanh, Sigmoid, Softplus, Neg, Abs };

double unary_eval(Unary kind, double x);
// Derivative expressed through input x and forward value y (y = f(x)).
double unary_deriv(Unary kind, double x, double y);

void unary_forward(Unary kind, int64_t n, const double* x, double* y);
// gx[i] += f'(x[i]) * gy[i]
void unary_backward(Unary kind, int64_t n, const double* x, const double* y,
                    const double* gy, double* gx);

enum class Binary { Add, Sub, Mul };

// out[i] = a[i] op b[i % bn]; bn must divide n (bn == n: plain elementwise,
// bn == 1: scalar broadcast, otherwise trailing-suffix broadcast).
void binary_forward(Binary op, int64_t n, const double* a, int64_t bn,
                    const double* b, double* out);

void scale_forward(int64_t n, const double* x, double factor, double* y);
// y[i] += x[i] * factor
void axpy(int64_t n, const double* x, double factor, double* y);

// Deterministic full reductions (fixed chunk size, chunks combined in index
// order; independent of thread count).
double sum_all(int64_t n, const double* x);
double abs_sum_all(int64_t n, const double* x);

// Reduce the middle axis of x viewed as [outer, r, inner]:
// y[o,i] = sum_j x[o,j,i]
void reduce_mid_axis(int64_t outer, int64_t r, int64_t inner, const double* x,
                     double* y);

// Selective-scan core. Shapes (row-major):
//   v      [s, t, ch]      value path, ch channels split evenly over h heads
//   delta  [s, t, h]       per-step positive step sizes
//   bmat   [s, t, h, n]    input injection vectors
//   cmat   [s, t, h, n]    readout vectors
//   a      [h]             per-head state decay, a[h] < 0 for stability
//   y      [s, t, ch]      output
// Recurrence per sequence/head/channel, state size n:
//   abar = exp(delta*a); bbar = ((abar-1)/a) * B  (limit delta*B at |a|<eps)
//   h_t = abar*h_{t-1} + bbar*v_t;  y_t = <C_t, h_t>
struct ScanDims {
  int64_t s = 0, t = 0, ch = 0, h = 0, n = 0;
};

// Forward; when state_out != nullptr the full state history [s,t,ch,n] is
// stored for the backward pass.
void scan_forward(const ScanDims& d, const double* v, const double* delta,
                  const double* bmat, const double* cmat, const double* a,
                  double* y, double* state_out);

// Accumulates into gv/gdelta/gb/gc/ga (callers zero-init or reuse grads).
void scan_backward(const ScanDims& d, const double* v, const double* delta,
                   const double* bmat, const double* cmat, const double* a,
                   const double* state, const double* gy, double* gv,
                   double* gdelta, double* gb, double* gc, double* ga);

// Removable-singularity threshold for the (exp(delta*a)-1)/a coefficient.
inline constexpr double kScanSingularEps = 1e-12;

// Discretization coefficients shared by scan and the standalone op.
inline double abar_of(double a, double delta) { return std::exp(delta * a); }
inline double bbar_coef(double a, double delta) {
  if (std::abs(a) < kScanSingularEps) return delta;
  // expm1 keeps full precision near the removable singularity at a = 0.
  return std::expm1(delta * a) / a;
}

// Iterative radix-2 FFT with a precomputed plan; falls back to a direct
// O(n^2) transform for non-power-of-two sizes. transform() is const and
// thread-safe, so one plan can serve all frames of an OpenMP loop.
class Fft {
 public:
  explicit Fft(int64_t n);
  int64_t size() const { return n_; }
  // In-place transform, sign -1 (forward) uses e^{-2pi i kn/N}; inverse is
  // the unscaled conjugate transform (no 1/N factor).
  void transform(std::complex<double>* x, bool inverse) const;

 private:
  int64_t n_ = 0;
  bool pow2_ = false;
  std::vector<int32_t> bitrev_;
  std::vector<std::complex<double>> twiddle_;      // forward twiddles
  std::vector<std::complex<double>> dft_table_;    // non-pow2 fallback basis
};

namespace serial {
// Naive reference implementations, intentionally written as plain loops.
void gemm(Trans ta, Trans tb, int64_t m, int64_t n, int64_t k,
          const double* a, const double* b, double* c, bool accumulate);
void unary_forward(Unary kind, int64_t n, const double* x, double* y);
double sum_all(int64_t n, const double* x);
double abs_sum_all(int64_t n, const double* x);
void scan_forward(const ScanDims& d, const double* v, const double* delta,
                  const double* bmat, const double* cmat, const double* a,
                  double* y);
// Direct DFT of one real frame: out[f] = sum_n x[n] e^{-2pi i f n / nfft},
// f = 0..nbins-1.
void real_dft(int64_t nfft, int64_t nbins, const double* x,
              std::complex<double>* out);
}  // namespace serial

}  // namespace bsm::kernels
