#include "doctest.h"

#include "dlfm/gradcheck.hpp"
#include "dlfm/ops.hpp"
#include "dlfm/optim.hpp"
#include "dlfm/params.hpp"
#include "dlfm/rng.hpp"
#include "dlfm/svd.hpp"

#include <cmath>

using namespace dlfm;
using namespace dlfm::grad;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0)
{
    Tensor t(std::move(shape));
    for (auto& v : t.storage()) v = rng.uniform(lo, hi);
    return t;
}

Tensor random_matrix(std::size_t r, std::size_t c, Rng& rng, double lo = -1.0, double hi = 1.0)
{
    return random_tensor({r, c}, rng, lo, hi);
}

double max_offdiag_gram_error(const Tensor& q)
{
    const Tensor g = dlfm::matmul(q.transposed(), q);
    double e = 0.0;
    for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < g.cols(); ++j) e = std::max(e, std::abs(g.at(i, j) - (i == j ? 1.0 : 0.0)));
    return e;
}

} // namespace

TEST_CASE("backward: quadratic form")
{
    Tape t;
    Var x = t.leaf(Tensor::vector({1.0, 2.0}));
    Var f = sum(mul(x, x));
    CHECK(f.value().item() == 5.0);
    Tensor g = t.backward(f).of(x);
    CHECK(g[0] == 2.0);
    CHECK(g[1] == 4.0);
}

TEST_CASE("backward: stop-gradient factor is frozen")
{
    Tape t;
    Var x = t.leaf(Tensor::vector({1.0, 2.0}));
    Var f = sum(mul(stop_gradient(x), x));
    Tensor g = t.backward(f).of(x);
    CHECK(g[0] == 1.0);
    CHECK(g[1] == 2.0);
}

TEST_CASE("backward: rejects non-scalar loss")
{
    Tape t;
    Var x = t.leaf(Tensor::vector({1.0, 2.0}));
    CHECK_THROWS_AS(t.backward(square(x)), ValidationError);
}

TEST_CASE("backward: constant leaves receive no gradient")
{
    Tape t;
    Var x = t.leaf(Tensor::vector({1.0, 2.0}));
    Var c = t.constant(Tensor::vector({3.0, 4.0}));
    Var f = sum(mul(x, c));
    Gradients g = t.backward(f);
    CHECK_FALSE(g.has(c));
    CHECK(g.of(x)[1] == 4.0);
}

TEST_CASE("backward: non-finite values are an error state")
{
    Tape t;
    Var x = t.leaf(Tensor::vector({1000.0}));
    CHECK_THROWS_AS(exp(x), NumericError);
}

TEST_CASE("backward: deterministic across identical tapes")
{
    Rng rng(3);
    const Tensor a = random_matrix(4, 5, rng);
    const Tensor b = random_matrix(5, 3, rng);
    auto run = [&] {
        Tape t;
        Var x = t.leaf(a);
        Var y = t.constant(b);
        return t.backward(sum(tanh(matmul(x, y)))).of(x);
    };
    CHECK(run() == run());
}

TEST_CASE("backward: matmul + reduction chain matches finite differences")
{
    Rng rng(11);
    const Tensor w = random_matrix(4, 3, rng);
    ScalarFn f = [&](Tape& t, Var x) {
        Var xm = reshape(x, {2, 4});
        return sum(square(matmul(xm, t.constant(w))));
    };
    GradCheckResult r = check_gradients(f, random_tensor({8}, rng), 1e-5);
    CHECK(r.max_rel_error < 1e-5);
}

TEST_CASE("check_gradients: linear function is exact")
{
    Rng rng(5);
    const Tensor c = random_tensor({6}, rng);
    ScalarFn f = [&](Tape& t, Var x) { return sum(mul(x, t.constant(c))); };
    CHECK(check_gradients(f, random_tensor({6}, rng), 1e-5).max_rel_error < 1e-9);
}

TEST_CASE("check_gradients: smooth MLP")
{
    Rng rng(9);
    const Tensor in = random_matrix(3, 4, rng);
    ParamSet layout;
    layout.add("w1", glorot(4, 5, rng));
    layout.add("b1", random_tensor({5}, rng));
    layout.add("w2", glorot(5, 2, rng));
    ScalarFn f = [&](Tape& t, Var flat) {
        BoundParams p(t, layout, flat);
        Var h = silu(add_rowwise(matmul(t.constant(in), p["w1"]), p["b1"]));
        return sum(square(tanh(matmul(h, p["w2"]))));
    };
    CHECK(check_gradients(f, layout.flatten(), 1e-5).max_rel_error < 1e-4);
}

TEST_CASE("check_gradients: frozen branch measured on live path only")
{
    Rng rng(2);
    ScalarFn f = [](Tape&, Var x) { return sum(mul(stop_gradient(square(x)), tanh(x))); };
    CHECK(check_gradients(f, random_tensor({5}, rng), 1e-5).max_rel_error < 1e-4);
}

TEST_CASE("check_gradients: rejects bad step")
{
    ScalarFn f = [](Tape&, Var x) { return sum(x); };
    CHECK_THROWS_AS(check_gradients(f, Tensor::vector({1.0}), 0.0), ValidationError);
}

TEST_CASE("every differentiable op passes finite differences at 20 seeded points")
{
    using Op = std::function<Var(Tape&, Var)>;
    // Inputs are reshaped from a flat 12-vector to 3x4.
    const std::vector<std::pair<const char*, Op>> ops = {
        {"add", [](Tape& t, Var x) { return add(x, t.constant(Tensor({3, 4}, 0.5))); }},
        {"sub", [](Tape&, Var x) { return sub(x, square(x)); }},
        {"mul", [](Tape&, Var x) { return mul(x, tanh(x)); }},
        {"div", [](Tape&, Var x) { return div(x, add_scalar(square(x), 1.0)); }},
        {"scale", [](Tape&, Var x) { return scale(x, -2.5); }},
        {"sigmoid", [](Tape&, Var x) { return sigmoid(x); }},
        {"tanh", [](Tape&, Var x) { return tanh(x); }},
        {"silu", [](Tape&, Var x) { return silu(x); }},
        {"exp", [](Tape&, Var x) { return exp(x); }},
        {"sqrt", [](Tape&, Var x) { return sqrt(add_scalar(square(x), 0.5)); }},
        {"abs", [](Tape&, Var x) { return abs(x); }},
        {"relu", [](Tape&, Var x) { return relu(x); }},
        {"matmul", [](Tape& t, Var x) { return matmul(x, t.constant(Tensor::identity(4))); }},
        {"add_rowwise", [](Tape&, Var x) { return add_rowwise(x, reshape(slice_rows(x, 0, 1), {4})); }},
        {"sum_cols", [](Tape&, Var x) { return sum_cols(square(x)); }},
        {"slice_cols", [](Tape&, Var x) { return slice_cols(x, 1, 3); }},
        {"concat_cols", [](Tape&, Var x) { return concat_cols({x, tanh(x)}); }},
        {"concat_rows", [](Tape&, Var x) { return concat_rows({x, square(x)}); }},
        {"layer_norm_rows", [](Tape&, Var x) { return layer_norm_rows(x); }},
        {"mean", [](Tape&, Var x) { return mean(square(x)); }},
    };
    for (const auto& [name, op] : ops) {
        CAPTURE(name);
        for (int seed = 0; seed < 20; ++seed) {
            Rng rng(static_cast<std::uint64_t>(100 + seed));
            const Tensor x = random_tensor({12}, rng);
            const Tensor w = random_tensor({12}, rng, 0.5, 1.5);
            ScalarFn f = [&](Tape& t, Var flat) {
                Var y = op(t, reshape(flat, {3, 4}));
                Var wy = y.value().size() == 12 ? mul(reshape(y, {12}), t.constant(w)) : y;
                return sum(square(wy));
            };
            CHECK(check_gradients(f, x, 1e-5).max_rel_error < 1e-4);
        }
    }
}

TEST_CASE("svd_thin: identity and diagonal cases")
{
    SvdFactors f = svd_thin(Tensor::identity(2));
    CHECK(f.U == Tensor::identity(2));
    CHECK(f.V == Tensor::identity(2));
    CHECK(f.S[0] == 1.0);
    CHECK(f.S[1] == 1.0);

    SvdFactors d = svd_thin(Tensor::matrix(2, 2, {3, 0, 0, 1}));
    CHECK(d.S[0] == 3.0);
    CHECK(d.S[1] == 1.0);
    CHECK(d.U == Tensor::identity(2));
    CHECK(d.V == Tensor::identity(2));
}

TEST_CASE("svd_thin: seeded 4x3 reconstruction")
{
    Rng rng(7);
    const Tensor a = random_matrix(4, 3, rng);
    SvdFactors f = svd_thin(a);
    CHECK(max_abs_diff(svd_reconstruct(f), a) < 1e-8);
    CHECK(f.U.shape() == Shape{4, 3});
    CHECK(f.V.shape() == Shape{3, 3});
}

TEST_CASE("svd_thin: invariants on random shapes")
{
    for (int seed = 0; seed < 40; ++seed) {
        Rng rng(static_cast<std::uint64_t>(seed));
        const auto r = static_cast<std::size_t>(rng.integer(1, 12));
        const auto c = static_cast<std::size_t>(rng.integer(1, 12));
        const Tensor a = random_matrix(r, c, rng, -10.0, 10.0);
        SvdFactors f = svd_thin(a);
        CAPTURE(r);
        CAPTURE(c);
        CHECK(max_abs_diff(svd_reconstruct(f), a) < 1e-8);
        CHECK(max_offdiag_gram_error(f.U) < 1e-8);
        CHECK(max_offdiag_gram_error(f.V) < 1e-8);
        for (std::size_t k = 0; k < f.S.size(); ++k) {
            CHECK(f.S[k] >= 0.0);
            if (k) CHECK(f.S[k] <= f.S[k - 1]);
        }
    }
}

TEST_CASE("svd_thin: sign canonicalization")
{
    Rng rng(17);
    const Tensor a = random_matrix(5, 5, rng);
    SvdFactors f = svd_thin(a);
    for (std::size_t k = 0; k < 5; ++k) {
        std::size_t best = 0;
        for (std::size_t i = 1; i < 5; ++i)
            if (std::abs(f.U.at(i, k)) > std::abs(f.U.at(best, k))) best = i;
        CHECK(f.U.at(best, k) >= 0.0);
    }
    // Rebuild the input from a sign-flipped (u_k, v_k) pair: canonical U is unchanged.
    SvdFactors flipped = f;
    for (std::size_t i = 0; i < 5; ++i) {
        flipped.U.at(i, 2) = -flipped.U.at(i, 2);
        flipped.V.at(i, 2) = -flipped.V.at(i, 2);
    }
    SvdFactors g = svd_thin(svd_reconstruct(flipped));
    CHECK(max_abs_diff(g.U, f.U) < 1e-10);
}

TEST_CASE("svd_thin: deterministic and rank-deficient inputs")
{
    Rng rng(23);
    const Tensor a = random_matrix(6, 4, rng);
    SvdFactors f1 = svd_thin(a), f2 = svd_thin(a);
    CHECK(f1.U == f2.U);
    CHECK(f1.S == f2.S);
    CHECK(f1.V == f2.V);

    // Rank one: outer product.
    Tensor r1({5, 3});
    for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t j = 0; j < 3; ++j) r1.at(i, j) = (1.0 + i) * (2.0 - j);
    SvdFactors f = svd_thin(r1);
    CHECK(f.S[1] < 1e-12);
    CHECK(max_offdiag_gram_error(f.U) < 1e-8);
    CHECK(max_abs_diff(svd_reconstruct(f), r1) < 1e-8);

    SvdFactors z = svd_thin(Tensor({3, 3}));
    CHECK(z.S[0] == 0.0);
    CHECK(max_offdiag_gram_error(z.U) < 1e-12);
}

TEST_CASE("svd_thin: iteration cap is an explicit failure")
{
    Rng rng(31);
    const Tensor a = random_matrix(8, 8, rng);
    CHECK_THROWS_AS(svd_thin(a, SvdOptions{1, 1e-12}), NumericError);
    Tensor bad = a;
    bad[3] = std::nan("");
    CHECK_THROWS_AS(svd_thin(bad), ValidationError);
}

TEST_CASE("svd_backward: closed-form cases")
{
    SvdFactors f = svd_thin(Tensor::matrix(2, 2, {3, 0, 0, 1}));
    SvdBackwardResult r = svd_backward(f, Tensor({2, 2}), Tensor::vector({1.0, 0.0}));
    CHECK(r.grad == Tensor::matrix(2, 2, {1, 0, 0, 0}));
    SvdBackwardResult z = svd_backward(f, Tensor({2, 2}), Tensor({2}));
    CHECK(z.grad == Tensor({2, 2}));
    CHECK_FALSE(z.near_degenerate);
}

TEST_CASE("svd_backward: near-degenerate singular values are flagged")
{
    SvdFactors f = svd_thin(Tensor::identity(3));
    SvdBackwardResult r = svd_backward(f, Tensor({3, 3}, 0.1), Tensor({3}));
    CHECK(r.near_degenerate);
    CHECK(r.grad.all_finite());
}

TEST_CASE("svd_backward: matches finite differences of f(U, S)")
{
    const std::vector<std::pair<std::size_t, std::size_t>> shapes = {{3, 3}, {5, 3}, {3, 5}, {8, 8}};
    for (auto [r, c] : shapes) {
        for (int seed = 0; seed < 20; ++seed) {
            Rng rng(static_cast<std::uint64_t>(1000 + seed));
            const Tensor a = random_matrix(r, c, rng);
            const std::size_t k = std::min(r, c);
            const Tensor wu = random_tensor({r, k}, rng);
            const Tensor ws = random_tensor({k}, rng);
            ScalarFn f = [&](Tape& t, Var flat) {
                SvdVars s = svd(reshape(flat, {r, c}));
                return add(sum(mul(s.U, t.constant(wu))), sum(mul(square(s.S), t.constant(ws))));
            };
            CAPTURE(r);
            CAPTURE(c);
            CAPTURE(seed);
            CHECK(check_gradients(f, a.reshaped({r * c}), 1e-5).max_rel_error < 1e-4);
        }
    }
}

TEST_CASE("adamw: first step moves each coordinate by lr against the gradient sign")
{
    ParamSet p;
    p.add("w", Tensor::vector({1.0, -1.0}));
    AdamW opt(p, AdamWConfig{0.1, 0.9, 0.999, 1e-8, 0.0});
    opt.step(p, {Tensor::vector({2.0, -3.0})});
    CHECK(p.get("w")[0] == doctest::Approx(0.9).epsilon(1e-6));
    CHECK(p.get("w")[1] == doctest::Approx(-0.9).epsilon(1e-6));
}

TEST_CASE("adamw: decoupled weight decay shrinks parameters without gradient")
{
    ParamSet p;
    p.add("w", Tensor::vector({2.0}));
    AdamW opt(p, AdamWConfig{0.1, 0.9, 0.999, 1e-8, 0.5});
    opt.step(p, {Tensor::vector({0.0})});
    CHECK(p.get("w")[0] == doctest::Approx(2.0 - 0.1 * 0.5 * 2.0));
}
