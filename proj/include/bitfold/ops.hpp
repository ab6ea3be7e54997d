#ifndef BITFOLD_OPS_HPP_
#define BITFOLD_OPS_HPP_

#include <vector>

#include "bitfold/graph.hpp"

// Differentiable primitives. Binary elementwise ops accept a right operand
// whose shape is a suffix of the left operand's shape (trailing-axis bias);
// no other broadcasting exists.

namespace bitfold {

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);  // same shapes only
Var scale(Var x, double c);
Var add_scalar(Var x, double c);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator*(double c, Var x) { return scale(x, c); }
inline Var operator*(Var x, double c) { return scale(x, c); }
inline Var operator-(Var x) { return scale(x, -1.0); }

Var exp(Var x);
Var log(Var x);
Var sqrt(Var x);
Var square(Var x);
/// max(x, lo); the gradient is zero where the floor is active.
Var clamp_min(Var x, double lo);
Var reciprocal(Var x);
Var sigmoid(Var x);
Var silu(Var x);
Var tanh(Var x);

Var sum_all(Var x);
Var mean_all(Var x);
Var sum_last(Var x);   // drops the last axis
Var mean_last(Var x);

/// x (..., K) times w (K, N) -> (..., N).
Var matmul(Var x, Var w);
/// Batched product of (B, M, K) and (B, K, N) with optional per-operand transposes
/// of the two trailing axes.
Var bmm(Var a, Var b, bool transpose_a = false, bool transpose_b = false);

Var reshape(Var x, Shape shape);
Var permute(Var x, const std::vector<int>& axes);
Var concat(const std::vector<Var>& parts, int axis);
Var slice(Var x, int axis, int start, int length);

Var softmax_last(Var x);
Var log_softmax_last(Var x);
/// Zero-mean unit-variance over the last axis, eps added to the variance. No affine.
Var layernorm_last(Var x, double eps = 1e-5);

/// Rows of `table` (V, D) selected by `indices`, output shape prefix + {D}.
Var gather_rows(Var table, const std::vector<int>& indices, Shape prefix);
/// sum_n weight[n] * -log softmax(logits[n])[target[n]] for logits (N, C).
Var cross_entropy(Var logits, const std::vector<int>& targets, const std::vector<double>& weights);

/// h (L, D) -> (L, L, 2D) with out[i][j] = concat(h[i], h[j]).
Var cross_concat(Var h);
/// a (L, D), b (L, D) -> (L, L, D) with out[i][j] = a[i] + b[j].
Var outer_add(Var a, Var b);
/// Appends an axis of length n, repeating each value.
Var expand_last(Var x, int n);
/// Chains local rigid steps: G_i = G_{i-1} R_i and p_i = p_{i-1} + G_{i-1} d_i,
/// starting from G_{-1} = I, p_{-1} = 0. rotations (L, 3, 3), steps (L, 3);
/// returns (L, 12) holding p_i followed by row-major G_i.
Var compose_frames(Var rotations, Var steps);
/// Cross product along a trailing axis of length 3.
Var cross_last(Var a, Var b);
/// Euclidean distance matrix of points (M, 3). The gradient at coincident
/// points is taken as zero.
Var pairwise_distances(Var points);

/// Forward sign(x) with sign(0) = +1; backward treats the map as identity.
Var straight_through_sign(Var x);
Var stop_gradient(Var x);

} // namespace bitfold

#endif
