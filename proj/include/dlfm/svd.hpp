#pragma once

#include "dlfm/tape.hpp"
#include "dlfm/tensor.hpp"

#include <vector>

namespace dlfm::grad {

/// Thin SVD A = U diag(S) V^T of an r x c matrix, k = min(r, c).
struct SvdFactors {
    Tensor U;                  ///< r x k, orthonormal columns
    Tensor S;                  ///< k, nonincreasing, nonnegative
    Tensor V;                  ///< c x k, orthonormal columns
    std::vector<double> signs; ///< +-1 per column applied during canonicalization
};

struct SvdOptions {
    int max_sweeps = 100;
    double tolerance = 1e-12;
};

/// One-sided Jacobi SVD. Deterministic; each u_k is sign-canonicalized so its
/// largest-magnitude entry (lowest row on ties) is nonnegative, with v_k
/// flipped to compensate. Throws NumericError on non-convergence.
SvdFactors svd_thin(const Tensor& a, const SvdOptions& options = {});

struct SvdBackwardResult {
    Tensor grad;              ///< d loss / d A, r x c
    bool near_degenerate = false;
};

/// Gradient w.r.t. A from cotangents of U and S (V is never differentiated).
/// Denominators s_j^2 - s_i^2 are clamped to magnitude >= 1e-8; the result is
/// flagged when |s_i - s_j| < 1e-6 while grad_U is nonzero.
SvdBackwardResult svd_backward(const SvdFactors& factors, const Tensor& grad_U, const Tensor& grad_S);

/// Reconstructs U diag(S) V^T.
Tensor svd_reconstruct(const SvdFactors& f);

struct SvdVars {
    Var U;
    Var S;
};

/// Differentiable SVD of a matrix variable.
SvdVars svd(Var a);

} // namespace dlfm::grad
