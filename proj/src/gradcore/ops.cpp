#include "dlfm/ops.hpp"

#include <cmath>

namespace dlfm::grad {

namespace {

void require_same_tape(const Var& a, const Var& b, const char* op)
{
    if (&a.tape() != &b.tape()) throw ValidationError(std::string(op) + ": operands on different tapes");
}

void require_same_shape(const Var& a, const Var& b, const char* op)
{
    require_same_tape(a, b, op);
    if (a.shape() != b.shape())
        throw ValidationError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                              shape_str(b.shape()));
}

void require_matrix(const Var& a, const char* op)
{
    if (a.shape().size() != 2)
        throw ValidationError(std::string(op) + ": expected a matrix, got " + shape_str(a.shape()));
}

// Elementwise unary op; `dfn(x, y)` is dy/dx given input x and output y.
// Backward closures look values up by node id; the id a node will receive
// is the tape size at record time.
template <class F, class D>
Var unary(Var a, F fn, D dfn)
{
    Tape& t = a.tape();
    const Tensor& x = a.value();
    Tensor y(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = fn(x[i]);
    const std::size_t ia = a.id(), io = t.size();
    Tape* tp = &t;
    return t.record(std::move(y), {ia}, [tp, ia, io, dfn](const Tensor& g, GradSink& sink) {
        const Tensor& xv = tp->value(ia);
        const Tensor& yv = tp->value(io);
        Tensor ga(xv.shape());
        for (std::size_t i = 0; i < xv.size(); ++i) ga[i] = g[i] * dfn(xv[i], yv[i]);
        sink.add(ia, ga);
    });
}

} // namespace

Var add(Var a, Var b)
{
    require_same_shape(a, b, "add");
    Tensor y = a.value();
    const Tensor& bv = b.value();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += bv[i];
    const std::size_t ia = a.id(), ib = b.id();
    return a.tape().record(std::move(y), {ia, ib}, [ia, ib](const Tensor& g, GradSink& sink) {
        sink.add(ia, g);
        sink.add(ib, g);
    });
}

Var sub(Var a, Var b)
{
    require_same_shape(a, b, "sub");
    Tensor y = a.value();
    const Tensor& bv = b.value();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] -= bv[i];
    const std::size_t ia = a.id(), ib = b.id();
    return a.tape().record(std::move(y), {ia, ib}, [ia, ib](const Tensor& g, GradSink& sink) {
        sink.add(ia, g);
        if (sink.wants(ib)) {
            Tensor gb = g;
            for (auto& v : gb.storage()) v = -v;
            sink.add(ib, gb);
        }
    });
}

Var mul(Var a, Var b)
{
    require_same_shape(a, b, "mul");
    Tensor y = a.value();
    const Tensor& bv = b.value();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] *= bv[i];
    Tape* tp = &a.tape();
    const std::size_t ia = a.id(), ib = b.id();
    return tp->record(std::move(y), {ia, ib}, [tp, ia, ib](const Tensor& g, GradSink& sink) {
        const Tensor& av = tp->value(ia);
        const Tensor& bv = tp->value(ib);
        if (sink.wants(ia)) {
            Tensor ga(g.shape());
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * bv[i];
            sink.add(ia, ga);
        }
        if (sink.wants(ib)) {
            Tensor gb(g.shape());
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] = g[i] * av[i];
            sink.add(ib, gb);
        }
    });
}

Var div(Var a, Var b)
{
    require_same_shape(a, b, "div");
    Tensor y = a.value();
    const Tensor& bv = b.value();
    for (std::size_t i = 0; i < y.size(); ++i) {
        if (bv[i] == 0.0) throw NumericError("div: division by zero");
        y[i] /= bv[i];
    }
    Tape* tp = &a.tape();
    const std::size_t ia = a.id(), ib = b.id();
    return tp->record(std::move(y), {ia, ib}, [tp, ia, ib](const Tensor& g, GradSink& sink) {
        const Tensor& av = tp->value(ia);
        const Tensor& bv = tp->value(ib);
        if (sink.wants(ia)) {
            Tensor ga(g.shape());
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] / bv[i];
            sink.add(ia, ga);
        }
        if (sink.wants(ib)) {
            Tensor gb(g.shape());
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] = -g[i] * av[i] / (bv[i] * bv[i]);
            sink.add(ib, gb);
        }
    });
}

Var scale(Var a, double s)
{
    Tensor y = a.value();
    for (auto& v : y.storage()) v *= s;
    const std::size_t ia = a.id();
    return a.tape().record(std::move(y), {ia}, [ia, s](const Tensor& g, GradSink& sink) {
        Tensor ga = g;
        for (auto& v : ga.storage()) v *= s;
        sink.add(ia, ga);
    });
}

Var add_scalar(Var a, double s)
{
    Tensor y = a.value();
    for (auto& v : y.storage()) v += s;
    const std::size_t ia = a.id();
    return a.tape().record(std::move(y), {ia}, [ia](const Tensor& g, GradSink& sink) { sink.add(ia, g); });
}

Var neg(Var a) { return scale(a, -1.0); }

Var matmul(Var a, Var b)
{
    require_same_tape(a, b, "matmul");
    require_matrix(a, "matmul");
    require_matrix(b, "matmul");
    Tensor y = dlfm::matmul(a.value(), b.value());
    Tape* tp = &a.tape();
    const std::size_t ia = a.id(), ib = b.id();
    return tp->record(std::move(y), {ia, ib}, [tp, ia, ib](const Tensor& g, GradSink& sink) {
        const Tensor& av = tp->value(ia);
        const Tensor& bv = tp->value(ib);
        const std::size_t n = av.rows(), k = av.cols(), m = bv.cols();
        if (sink.wants(ia)) {
            // dA = G B^T
            Tensor ga({n, k});
            const double* pg = g.data().data();
            const double* pb = bv.data().data();
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    double acc = 0.0;
                    const double* grow = pg + i * m;
                    const double* brow = pb + p * m;
                    for (std::size_t j = 0; j < m; ++j) acc += grow[j] * brow[j];
                    ga[i * k + p] = acc;
                }
            sink.add(ia, ga);
        }
        if (sink.wants(ib)) {
            // dB = A^T G
            Tensor gb({k, m});
            const double* pg = g.data().data();
            const double* pa = av.data().data();
            double* po = gb.data().data();
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    const double a_ip = pa[i * k + p];
                    const double* grow = pg + i * m;
                    double* orow = po + p * m;
                    for (std::size_t j = 0; j < m; ++j) orow[j] += a_ip * grow[j];
                }
            sink.add(ib, gb);
        }
    });
}

Var add_rowwise(Var a, Var bias)
{
    require_same_tape(a, bias, "add_rowwise");
    require_matrix(a, "add_rowwise");
    const std::size_t n = a.value().rows(), m = a.value().cols();
    if (bias.value().size() != m)
        throw ValidationError("add_rowwise: bias " + shape_str(bias.shape()) + " vs " + shape_str(a.shape()));
    Tensor y = a.value();
    const Tensor& bv = bias.value();
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) y[i * m + j] += bv[j];
    const std::size_t ia = a.id(), ib = bias.id();
    Shape bshape = bias.shape();
    return a.tape().record(std::move(y), {ia, ib}, [ia, ib, n, m, bshape](const Tensor& g, GradSink& sink) {
        sink.add(ia, g);
        if (sink.wants(ib)) {
            Tensor gb(bshape);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < m; ++j) gb[j] += g[i * m + j];
            sink.add(ib, gb);
        }
    });
}

Var sigmoid(Var a)
{
    return unary(
        a, [](double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); },
        [](double, double y) { return y * (1.0 - y); });
}

Var tanh(Var a)
{
    return unary(a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Var silu(Var a)
{
    return unary(
        a,
        [](double x) {
            const double s = x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
            return x * s;
        },
        [](double x, double) {
            const double s = x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
            return s * (1.0 + x * (1.0 - s));
        });
}

Var exp(Var a)
{
    return unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var sqrt(Var a)
{
    for (double v : a.value().storage())
        if (v <= 0.0) throw NumericError("sqrt: non-positive input");
    return unary(a, [](double x) { return std::sqrt(x); }, [](double, double y) { return 0.5 / y; });
}

Var square(Var a)
{
    return unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Var abs(Var a)
{
    return unary(
        a, [](double x) { return std::abs(x); },
        [](double x, double) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}

Var relu(Var a)
{
    return unary(a, [](double x) { return x > 0 ? x : 0.0; }, [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

Var sum(Var a)
{
    double s = 0.0;
    for (double v : a.value().storage()) s += v;
    const std::size_t ia = a.id();
    Shape shape = a.shape();
    return a.tape().record(Tensor::scalar(s), {ia}, [ia, shape](const Tensor& g, GradSink& sink) {
        sink.add(ia, Tensor(shape, g[0]));
    });
}

Var mean(Var a)
{
    const std::size_t n = a.value().size();
    if (n == 0) throw ValidationError("mean: empty tensor");
    return scale(sum(a), 1.0 / static_cast<double>(n));
}

Var sum_cols(Var a)
{
    require_matrix(a, "sum_cols");
    const std::size_t n = a.value().rows(), m = a.value().cols();
    Tensor y({n});
    const Tensor& av = a.value();
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) y[i] += av[i * m + j];
    const std::size_t ia = a.id();
    return a.tape().record(std::move(y), {ia}, [ia, n, m](const Tensor& g, GradSink& sink) {
        Tensor ga({n, m});
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < m; ++j) ga[i * m + j] = g[i];
        sink.add(ia, ga);
    });
}

Var reshape(Var a, Shape shape)
{
    Tensor y = a.value().reshaped(std::move(shape));
    const std::size_t ia = a.id();
    Shape orig = a.shape();
    return a.tape().record(std::move(y), {ia}, [ia, orig](const Tensor& g, GradSink& sink) {
        sink.add(ia, g.reshaped(orig));
    });
}

Var slice_rows(Var a, std::size_t begin, std::size_t end)
{
    require_matrix(a, "slice_rows");
    const std::size_t n = a.value().rows(), m = a.value().cols();
    if (begin >= end || end > n) throw ValidationError("slice_rows: bad range");
    const Tensor& av = a.value();
    Tensor y({end - begin, m});
    std::copy(av.data().begin() + static_cast<long>(begin * m), av.data().begin() + static_cast<long>(end * m),
              y.data().begin());
    const std::size_t ia = a.id();
    return a.tape().record(std::move(y), {ia}, [ia, n, m, begin](const Tensor& g, GradSink& sink) {
        Tensor ga({n, m});
        std::copy(g.data().begin(), g.data().end(), ga.data().begin() + static_cast<long>(begin * m));
        sink.add(ia, ga);
    });
}

Var slice_cols(Var a, std::size_t begin, std::size_t end)
{
    require_matrix(a, "slice_cols");
    const std::size_t n = a.value().rows(), m = a.value().cols();
    if (begin >= end || end > m) throw ValidationError("slice_cols: bad range");
    const std::size_t w = end - begin;
    const Tensor& av = a.value();
    Tensor y({n, w});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < w; ++j) y[i * w + j] = av[i * m + begin + j];
    const std::size_t ia = a.id();
    return a.tape().record(std::move(y), {ia}, [ia, n, m, w, begin](const Tensor& g, GradSink& sink) {
        Tensor ga({n, m});
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < w; ++j) ga[i * m + begin + j] = g[i * w + j];
        sink.add(ia, ga);
    });
}

Var concat_cols(const std::vector<Var>& parts)
{
    if (parts.empty()) throw ValidationError("concat_cols: no inputs");
    for (const Var& p : parts) require_matrix(p, "concat_cols");
    const std::size_t n = parts[0].value().rows();
    std::vector<std::size_t> widths, ids;
    std::size_t total = 0;
    for (const Var& p : parts) {
        require_same_tape(parts[0], p, "concat_cols");
        if (p.value().rows() != n) throw ValidationError("concat_cols: row mismatch");
        widths.push_back(p.value().cols());
        ids.push_back(p.id());
        total += p.value().cols();
    }
    Tensor y({n, total});
    std::size_t off = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const Tensor& pv = parts[k].value();
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < widths[k]; ++j) y[i * total + off + j] = pv[i * widths[k] + j];
        off += widths[k];
    }
    return parts[0].tape().record(std::move(y), ids, [ids, widths, n, total](const Tensor& g, GradSink& sink) {
        std::size_t off = 0;
        for (std::size_t k = 0; k < ids.size(); ++k) {
            if (sink.wants(ids[k])) {
                Tensor gk({n, widths[k]});
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < widths[k]; ++j) gk[i * widths[k] + j] = g[i * total + off + j];
                sink.add(ids[k], gk);
            }
            off += widths[k];
        }
    });
}

Var concat_rows(const std::vector<Var>& parts)
{
    if (parts.empty()) throw ValidationError("concat_rows: no inputs");
    for (const Var& p : parts) require_matrix(p, "concat_rows");
    const std::size_t m = parts[0].value().cols();
    std::vector<std::size_t> heights, ids;
    std::size_t total = 0;
    for (const Var& p : parts) {
        require_same_tape(parts[0], p, "concat_rows");
        if (p.value().cols() != m) throw ValidationError("concat_rows: column mismatch");
        heights.push_back(p.value().rows());
        ids.push_back(p.id());
        total += p.value().rows();
    }
    Tensor y({total, m});
    std::size_t off = 0;
    for (const Var& p : parts) {
        std::copy(p.value().data().begin(), p.value().data().end(), y.data().begin() + static_cast<long>(off * m));
        off += p.value().rows();
    }
    return parts[0].tape().record(std::move(y), ids, [ids, heights, m](const Tensor& g, GradSink& sink) {
        std::size_t off = 0;
        for (std::size_t k = 0; k < ids.size(); ++k) {
            if (sink.wants(ids[k])) {
                Tensor gk({heights[k], m});
                std::copy(g.data().begin() + static_cast<long>(off * m),
                          g.data().begin() + static_cast<long>((off + heights[k]) * m), gk.data().begin());
                sink.add(ids[k], gk);
            }
            off += heights[k];
        }
    });
}

Var layer_norm_rows(Var a, double eps)
{
    require_matrix(a, "layer_norm_rows");
    const std::size_t n = a.value().rows(), m = a.value().cols();
    const Tensor& x = a.value();
    Tensor y({n, m});
    std::vector<double> inv_std(n);
    for (std::size_t i = 0; i < n; ++i) {
        double mu = 0.0;
        for (std::size_t j = 0; j < m; ++j) mu += x[i * m + j];
        mu /= static_cast<double>(m);
        double var = 0.0;
        for (std::size_t j = 0; j < m; ++j) var += (x[i * m + j] - mu) * (x[i * m + j] - mu);
        var /= static_cast<double>(m);
        inv_std[i] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < m; ++j) y[i * m + j] = (x[i * m + j] - mu) * inv_std[i];
    }
    Tape* tp = &a.tape();
    const std::size_t ia = a.id(), io = tp->size();
    return tp->record(std::move(y), {ia}, [tp, ia, io, n, m, inv_std](const Tensor& g, GradSink& sink) {
        const Tensor& yv = tp->value(io);
        Tensor ga({n, m});
        const double inv_m = 1.0 / static_cast<double>(m);
        for (std::size_t i = 0; i < n; ++i) {
            double gsum = 0.0, gy = 0.0;
            for (std::size_t j = 0; j < m; ++j) {
                gsum += g[i * m + j];
                gy += g[i * m + j] * yv[i * m + j];
            }
            for (std::size_t j = 0; j < m; ++j)
                ga[i * m + j] = inv_std[i] * (g[i * m + j] - gsum * inv_m - yv[i * m + j] * gy * inv_m);
        }
        sink.add(ia, ga);
    });
}

Var stop_gradient(Var a) { return a.tape().constant(a.tape().freeze(a.value())); }

} // namespace dlfm::grad
