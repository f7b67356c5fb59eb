#pragma once

#include "dlfm/tape.hpp"

#include <vector>

// Differentiable operations over Tape variables. Elementwise binary ops
// require identical shapes; the only broadcasts are add_rowwise and the
// scalar helpers.
namespace dlfm::grad {

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
Var neg(Var a);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator*(double s, Var a) { return scale(a, s); }

/// [n,k] x [k,m] -> [n,m]
Var matmul(Var a, Var b);
/// Adds a length-m vector to every row of an [n,m] matrix.
Var add_rowwise(Var a, Var bias);

Var sigmoid(Var a);
Var tanh(Var a);
Var silu(Var a);
Var exp(Var a);
Var sqrt(Var a);
Var square(Var a);
/// |x| with subgradient 0 at x = 0.
Var abs(Var a);
/// max(0, x) with subgradient 0 at x = 0.
Var relu(Var a);

Var sum(Var a);
Var mean(Var a);
/// Row sums of an [n,m] matrix -> [n].
Var sum_cols(Var a);

Var reshape(Var a, Shape shape);
Var slice_rows(Var a, std::size_t begin, std::size_t end);
Var slice_cols(Var a, std::size_t begin, std::size_t end);
Var concat_cols(const std::vector<Var>& parts);
Var concat_rows(const std::vector<Var>& parts);

/// Per-row standardization to zero mean and unit variance (no affine part).
Var layer_norm_rows(Var a, double eps = 1e-5);

/// sg(x): same value, no gradient flows to `a`.
Var stop_gradient(Var a);

} // namespace dlfm::grad
