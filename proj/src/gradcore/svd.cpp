#include "dlfm/svd.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>

namespace dlfm::grad {

namespace {

constexpr double kDenomFloor = 1e-8;
constexpr double kDegenerateGap = 1e-6;

// Column-major scratch for the Jacobi sweeps: column j occupies [j*rows, (j+1)*rows).
struct Columns {
    std::size_t rows = 0, cols = 0;
    std::vector<double> v;
    double* col(std::size_t j) { return v.data() + j * rows; }
    const double* col(std::size_t j) const { return v.data() + j * rows; }
};

double dot(const double* a, const double* b, std::size_t n)
{
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
    return s;
}

// Orthonormal completion for columns whose singular value vanished.
void complete_basis(Columns& u, const std::vector<bool>& valid)
{
    std::vector<bool> have = valid;
    for (std::size_t k = 0; k < u.cols; ++k) {
        if (have[k]) continue;
        std::vector<double> best;
        double best_norm = -1.0;
        for (std::size_t e = 0; e < u.rows; ++e) {
            std::vector<double> cand(u.rows, 0.0);
            cand[e] = 1.0;
            for (int pass = 0; pass < 2; ++pass)
                for (std::size_t j = 0; j < u.cols; ++j) {
                    if (!have[j]) continue;
                    const double d = dot(cand.data(), u.col(j), u.rows);
                    for (std::size_t i = 0; i < u.rows; ++i) cand[i] -= d * u.col(j)[i];
                }
            const double nrm = std::sqrt(dot(cand.data(), cand.data(), u.rows));
            if (nrm > best_norm + 1e-12) {
                best_norm = nrm;
                best = std::move(cand);
            }
        }
        for (std::size_t i = 0; i < u.rows; ++i) u.col(k)[i] = best[i] / best_norm;
        have[k] = true;
    }
}

// Jacobi SVD for rows >= cols. Returns U (rows x cols), S, V (cols x cols) unsorted.
void jacobi_tall(const Tensor& a, const SvdOptions& opt, Columns& w, Columns& v)
{
    const std::size_t r = a.rows(), c = a.cols();
    w.rows = r;
    w.cols = c;
    w.v.assign(r * c, 0.0);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) w.col(j)[i] = a.at(i, j);
    v.rows = c;
    v.cols = c;
    v.v.assign(c * c, 0.0);
    for (std::size_t j = 0; j < c; ++j) v.col(j)[j] = 1.0;

    for (int sweep = 0;; ++sweep) {
        if (sweep >= opt.max_sweeps)
            throw NumericError("svd_thin: no convergence after " + std::to_string(opt.max_sweeps) + " sweeps");
        bool rotated = false;
        for (std::size_t p = 0; p + 1 < c; ++p) {
            for (std::size_t q = p + 1; q < c; ++q) {
                double* wp = w.col(p);
                double* wq = w.col(q);
                const double alpha = dot(wp, wp, r);
                const double beta = dot(wq, wq, r);
                const double gamma = dot(wp, wq, r);
                if (gamma == 0.0 || std::abs(gamma) <= opt.tolerance * std::sqrt(alpha * beta)) continue;
                rotated = true;
                const double zeta = (beta - alpha) / (2.0 * gamma);
                const double t = (zeta >= 0 ? 1.0 : -1.0) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double cs = 1.0 / std::sqrt(1.0 + t * t);
                const double sn = cs * t;
                for (std::size_t i = 0; i < r; ++i) {
                    const double x = wp[i], y = wq[i];
                    wp[i] = cs * x - sn * y;
                    wq[i] = sn * x + cs * y;
                }
                double* vp = v.col(p);
                double* vq = v.col(q);
                for (std::size_t i = 0; i < c; ++i) {
                    const double x = vp[i], y = vq[i];
                    vp[i] = cs * x - sn * y;
                    vq[i] = sn * x + cs * y;
                }
            }
        }
        if (!rotated) break;
    }
}

SvdFactors svd_tall(const Tensor& a, const SvdOptions& opt)
{
    const std::size_t r = a.rows(), c = a.cols();
    Columns w, v;
    jacobi_tall(a, opt, w, v);

    std::vector<double> s(c);
    for (std::size_t j = 0; j < c; ++j) s[j] = std::sqrt(dot(w.col(j), w.col(j), r));
    std::vector<std::size_t> order(c);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return s[x] > s[y]; });

    const double smax = c ? s[order[0]] : 0.0;
    const double cutoff = smax * static_cast<double>(std::max(r, c)) * 1e-15;
    Columns u;
    u.rows = r;
    u.cols = c;
    u.v.assign(r * c, 0.0);
    std::vector<bool> valid(c, false);
    SvdFactors f;
    f.S = Tensor({c});
    f.V = Tensor({c, c});
    for (std::size_t k = 0; k < c; ++k) {
        const std::size_t j = order[k];
        f.S[k] = s[j];
        if (s[j] > cutoff && s[j] > 0.0) {
            for (std::size_t i = 0; i < r; ++i) u.col(k)[i] = w.col(j)[i] / s[j];
            valid[k] = true;
        }
        for (std::size_t i = 0; i < c; ++i) f.V.at(i, k) = v.col(j)[i];
    }
    complete_basis(u, valid);
    f.U = Tensor({r, c});
    for (std::size_t k = 0; k < c; ++k)
        for (std::size_t i = 0; i < r; ++i) f.U.at(i, k) = u.col(k)[i];
    return f;
}

void canonicalize(SvdFactors& f)
{
    const std::size_t r = f.U.rows(), k = f.U.cols(), c = f.V.rows();
    f.signs.assign(k, 1.0);
    for (std::size_t j = 0; j < k; ++j) {
        std::size_t best = 0;
        double best_abs = -1.0;
        for (std::size_t i = 0; i < r; ++i) {
            const double m = std::abs(f.U.at(i, j));
            if (m > best_abs) {
                best_abs = m;
                best = i;
            }
        }
        if (f.U.at(best, j) < 0.0) {
            f.signs[j] = -1.0;
            for (std::size_t i = 0; i < r; ++i) f.U.at(i, j) = -f.U.at(i, j);
            for (std::size_t i = 0; i < c; ++i) f.V.at(i, j) = -f.V.at(i, j);
        }
    }
}

} // namespace

SvdFactors svd_thin(const Tensor& a, const SvdOptions& options)
{
    if (a.rank() != 2 || a.rows() == 0 || a.cols() == 0)
        throw ValidationError("svd_thin: expected a non-empty matrix, got " + shape_str(a.shape()));
    if (!a.all_finite()) throw ValidationError("svd_thin: non-finite input");
    SvdFactors f;
    if (a.rows() >= a.cols()) {
        f = svd_tall(a, options);
    } else {
        SvdFactors t = svd_tall(a.transposed(), options);
        f.U = std::move(t.V);
        f.V = std::move(t.U);
        f.S = std::move(t.S);
    }
    canonicalize(f);
    return f;
}

Tensor svd_reconstruct(const SvdFactors& f)
{
    Tensor us = f.U;
    const std::size_t r = us.rows(), k = us.cols();
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < k; ++j) us.at(i, j) *= f.S[j];
    return dlfm::matmul(us, f.V.transposed());
}

SvdBackwardResult svd_backward(const SvdFactors& f, const Tensor& grad_U, const Tensor& grad_S)
{
    const std::size_t r = f.U.rows(), k = f.U.cols(), c = f.V.rows();
    if (grad_U.size() != r * k || grad_S.size() != k)
        throw ValidationError("svd_backward: cotangent shapes do not match factors");

    SvdBackwardResult out;
    const bool has_gu = std::any_of(grad_U.storage().begin(), grad_U.storage().end(), [](double x) { return x != 0.0; });
    const Tensor gu = grad_U.reshaped({r, k});

    // inner = J diag(S) + diag(grad_S), J = F o (U^T gU - gU^T U)
    Tensor inner({k, k});
    for (std::size_t i = 0; i < k; ++i) inner.at(i, i) = grad_S[i];
    if (has_gu) {
        const Tensor utg = dlfm::matmul(f.U.transposed(), gu);
        for (std::size_t i = 0; i < k; ++i)
            for (std::size_t j = 0; j < k; ++j) {
                if (i == j) continue;
                const double si = f.S[i], sj = f.S[j];
                if (std::abs(si - sj) < kDegenerateGap) out.near_degenerate = true;
                double d = sj * sj - si * si;
                if (std::abs(d) < kDenomFloor) d = d < 0 ? -kDenomFloor : kDenomFloor;
                const double kij = utg.at(i, j) - utg.at(j, i);
                inner.at(i, j) += kij / d * sj;
            }
    }
    // U inner V^T
    Tensor grad = dlfm::matmul(dlfm::matmul(f.U, inner), f.V.transposed());

    if (has_gu && r > k) {
        // (I - U U^T) gU S^-1 V^T
        Tensor proj = gu;
        const Tensor utg = dlfm::matmul(f.U.transposed(), gu);
        const Tensor uutg = dlfm::matmul(f.U, utg);
        for (std::size_t i = 0; i < proj.size(); ++i) proj[i] -= uutg[i];
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < k; ++j) {
                double s = f.S[j];
                if (s < kDenomFloor) {
                    s = kDenomFloor;
                    out.near_degenerate = true;
                }
                proj.at(i, j) /= s;
            }
        const Tensor extra = dlfm::matmul(proj, f.V.transposed());
        for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += extra[i];
    }
    (void)c;
    out.grad = std::move(grad);
    return out;
}

SvdVars svd(Var a)
{
    auto f = std::make_shared<const SvdFactors>(svd_thin(a.value()));
    Tape* tp = &a.tape();
    const std::size_t ia = a.id();
    const std::size_t k = f->S.size();
    Var u = tp->record(f->U, {ia}, [tp, f, ia, k](const Tensor& g, GradSink& sink) {
        SvdBackwardResult res = svd_backward(*f, g, Tensor({k}));
        if (res.near_degenerate) tp->warn("svd: near-degenerate singular values in U-gradient");
        sink.add(ia, res.grad);
    });
    Var s = tp->record(f->S, {ia}, [f, ia](const Tensor& g, GradSink& sink) {
        SvdBackwardResult res = svd_backward(*f, Tensor(f->U.shape()), g);
        sink.add(ia, res.grad);
    });
    return {u, s};
}

} // namespace dlfm::grad
