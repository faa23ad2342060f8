#pragma once

#include <cstdint>
#include <vector>

#include "kd/autograd.hpp"

namespace kd {

// Differentiable tensor operations. Shapes are validated; mismatches throw
// InvalidArgument. Unless noted, every op is differentiable w.r.t. all Var
// arguments.

// Elementwise, operands must share shapes.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var divide(const Var& a, const Var& b);

Var add_scalar(const Var& a, double c);
Var mul_scalar(const Var& a, double c);
Var neg(const Var& a);

Var vexp(const Var& a);
Var vlog(const Var& a);   // caller keeps values positive
Var vsqrt(const Var& a);  // gradient undefined at 0; caller avoids
Var relu(const Var& a);
Var reciprocal(const Var& a);

// Scalar Var times tensor Var.
Var scale_by(const Var& a, const Var& scalar);

Var sum(const Var& a);
Var mean(const Var& a);

Var reshape(const Var& a, std::vector<std::int64_t> shape);
Var transpose(const Var& a);  // 2-D

Var matmul(const Var& a, const Var& b);
// y = x * W^T + b with x:(B,D), W:(P,D), b:(P).
Var linear(const Var& x, const Var& weight, const Var& bias);
Var add_rowvec(const Var& a, const Var& v);

// Row-wise log softmax of a (B,C) matrix, numerically stable.
Var log_softmax_rows(const Var& a);
// pick_rows(a, idx)[i] = a(i, idx[i]).
Var pick_rows(const Var& a, const std::vector<int>& idx);

// Elementwise Huber penalty of (a - b) with threshold delta.
Var huber(const Var& a, const Var& b, double delta);

// Copy of a square matrix with the diagonal overwritten by `value`;
// gradients flow through off-diagonal entries only.
Var fill_diagonal(const Var& a, double value);

// Rows scaled to unit L2 norm; rows with norm <= eps map to zero rows.
Var rows_l2_normalize(const Var& a, double eps = 1e-12);

// L2 norm of each row of a (B,M) matrix -> (B). Rows with norm <= eps pass
// no gradient (subgradient 0 at the origin).
Var row_norms(const Var& a, double eps = 1e-12);

// (B,D) embeddings -> (B,B) matrix of Euclidean distances, zero diagonal.
Var pairwise_distances(const Var& embeddings);

// Per-instance Gram matrix of vectorized channel maps:
// (B,K,H,W) -> (B,K,K) with R[b] = F F^T, F = K x (H*W).
Var gram(const Var& features);

struct Conv2dSpec {
  int stride = 1;
  int padding = 0;
  int groups = 1;
};
// x:(B,Cin,H,W), w:(Cout,Cin/groups,kh,kw), bias:(Cout) or undefined Var.
Var conv2d(const Var& x, const Var& w, const Var& bias, const Conv2dSpec& spec);

Var max_pool2d(const Var& x, int kernel, int stride, int padding);

// Bilinear interpolation of (B,C,H,W) to (B,C,out_h,out_w), half-pixel centers.
Var bilinear_resize(const Var& x, std::int64_t out_h, std::int64_t out_w);

// Per-sample, per-channel normalization over the spatial extent with
// learnable per-channel gain/shift. Stateless (no running statistics).
Var instance_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);

Var global_avg_pool(const Var& x);  // (B,C,H,W) -> (B,C)

// Cosine of the angle at vertex e_j subtended by e_i and e_k, for all ordered
// index triples (i,j,k). valid_mask marks triples with distinct indices and
// both legs longer than `eps`; masked entries hold value 0 and pass no
// gradient.
struct AnglePotentials {
  Var values;        // (B,B,B)
  Tensor valid_mask; // (B,B,B), 1.0 where defined
};
AnglePotentials angle_potentials_op(const Var& embeddings, double eps = 1e-12);

void check_finite(const Tensor& t, const char* what);

}  // namespace kd
