#pragma once

// Selective state-space sequence layer (Mamba2 style): per-timestep
// discretization with a scalar-identity transition A = aI, the sequential
// selective scan, and the bidirectional block used on both dual-path axes.

#include <random>
#include <string>
#include <utility>
#include <vector>

#include "bsm/tensor.hpp"

namespace bsm::ssm {

// Per-timestep discretization of the continuous dynamics (A = aI):
//   a_bar = exp(delta * a)
//   b_bar = ((exp(delta * a) - 1) / a) * B, with the analytic limit
//           b_bar = delta * B at |a| < 1e-12.
// a < 0 and delta > 0 give a_bar in (0, 1).
struct Discretized {
  double a_bar = 0.0;
  std::vector<double> b_bar;
};
Discretized discretize(double a, double delta, const std::vector<double>& b);

// Batched multi-head scan op on the tape. Shapes:
//   v [S,T,CH], delta [S,T,H], bmat/cmat [S,T,H,N], a [H] -> y [S,T,CH]
// Channels are split evenly over heads; delta must be positive. Throws if
// any input value is non-finite, naming the tensor and flat index.
Tensor ssm_scan(const Tensor& v, const Tensor& delta, const Tensor& bmat,
                const Tensor& cmat, const Tensor& a);

// Single-sequence, single-head scan: x [T,inner], delta [T], b/c [T,N],
// a scalar. This is the shape the dense recurrence oracle mirrors.
Tensor selective_scan(const Tensor& x, const Tensor& delta, const Tensor& b,
                      const Tensor& c, double a);

// Reference implementation of the same recurrence with explicit per-step
// state vectors and full-matrix arithmetic (A = aI materialized, matrix
// exponential = scalar exp on the diagonal). Test oracle; small T only.
std::vector<double> dense_recurrence_oracle(
    int64_t t_len, int64_t inner, int64_t n, const std::vector<double>& x,
    const std::vector<double>& delta, const std::vector<double>& b,
    const std::vector<double>& c, double a);

// Learnable parameters of one scan direction.
//
// in_proj maps D -> (inner [value] + inner [gate] + H*(N [B] + N [C] +
// 1 [delta pre-activation])), columns in that order. delta = softplus(pre),
// a = -exp(a_log) per head. out_proj maps inner -> D.
struct SsmBlockParams {
  int64_t d = 0, h = 0, n = 0, inner = 0;
  Tensor in_proj_w;   // [D, cols]
  Tensor in_proj_b;   // [cols]
  Tensor a_log;       // [H]
  Tensor out_proj_w;  // [inner, D]
  Tensor out_proj_b;  // [D]

  int64_t proj_cols() const { return 2 * inner + h * (2 * n + 1); }
  int64_t head_offset(int64_t head) const {
    return 2 * inner + head * (2 * n + 1);
  }

  // Uniform +-sqrt(1/fan_in) weights, zero biases except the delta lanes
  // (softplus(bias) spread over [0.05, 0.5]); a_log drawn so a is in
  // [-1, -0.1]. Draw order is fixed for reproducibility.
  static SsmBlockParams init(int64_t d, int64_t h, int64_t n, int64_t inner,
                             std::mt19937_64& g);
  void named(const std::string& prefix,
             std::vector<std::pair<std::string, Tensor>>& out) const;
};

// One direction of the block: in_proj -> (value, gate, B, C, delta) ->
// selective scan -> sigmoid-gated output -> out_proj. z is [T,D] or
// [S,T,D] for S independent sequences; the output shape matches z.
Tensor mamba2_layer(const Tensor& z, const SsmBlockParams& params);

struct BidirectionalBlockParams {
  SsmBlockParams fwd;
  SsmBlockParams bwd;
  Tensor merge_w;  // [2D, D]
  Tensor merge_b;  // [D]

  static BidirectionalBlockParams init(int64_t d, int64_t h, int64_t n,
                                       int64_t inner, std::mt19937_64& g);
  void named(const std::string& prefix,
             std::vector<std::pair<std::string, Tensor>>& out) const;
};

// u_f = layer(z, fwd) + z; u_b = rev(layer(rev(z), bwd)) + z;
// output = [u_f ; u_b] * merge_w + merge_b, mapping 2D -> D.
Tensor bidirectional_block(const Tensor& z,
                           const BidirectionalBlockParams& params);

}  // namespace bsm::ssm
