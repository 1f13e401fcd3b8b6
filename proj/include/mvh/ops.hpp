#pragma once

#include <cstddef>
#include <vector>

#include "mvh/tape.hpp"

// Differentiable primitives. Binary elementwise ops broadcast when one operand's
// shape is a suffix of the other's (a bias [D] against [N, D], a [k, D] block
// against [T, k, D]) or when one operand has a single element.

namespace mvh {

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
Var add_scalar(Var a, double s);
Var scale(Var a, double s);
Var neg(Var a);

Var exp(Var a);
Var log(Var a);
Var tanh(Var a);
Var relu(Var a);
Var sin(Var a);
Var cos(Var a);
Var sqrt(Var a);
Var square(Var a);
/// Gradient is zero where the input lies outside [lo, hi].
Var clamp(Var a, double lo, double hi);

/// Softmax over the last axis, with max subtraction.
Var softmax(Var a);

/// a [..., n, m] x b [m, p]; a [B, n, m] x b [B, m, p]; a [n, m] x b [B, m, p].
Var matmul(Var a, Var b);

Var reshape(Var a, Shape shape);
Var permute(Var a, const std::vector<std::size_t>& perm);
/// Swap the last two axes.
Var transpose(Var a);

/// Index select along the first axis.
Var gather_rows(Var a, const std::vector<std::size_t>& index);
Var concat(const std::vector<Var>& parts, int axis);
Var slice(Var a, int axis, std::size_t begin, std::size_t end);
/// Appends a trailing axis of length n, repeating each element.
Var repeat_last(Var a, std::size_t n);

Var sum(Var a);
Var mean(Var a);
/// Reduces one axis; the axis is removed (a rank-1 input yields shape [1]).
Var sum_axis(Var a, int axis);
Var mean_axis(Var a, int axis);
/// Max along an axis; gradient flows to the first maximal element.
Var max_axis(Var a, int axis);

/// Normalization over the last axis followed by gamma * x + beta.
Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);

}  // namespace mvh
