#include "dlfm/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace dlfm {

std::size_t shape_numel(const Shape& shape)
{
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

std::string shape_str(const Shape& shape)
{
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data))
{
    if (shape_numel(shape_) != data_.size())
        throw ValidationError("tensor: shape " + shape_str(shape_) + " does not match " +
                              std::to_string(data_.size()) + " values");
}

Tensor Tensor::vector(std::vector<double> v)
{
    const std::size_t n = v.size();
    return Tensor({n}, std::move(v));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
{
    return Tensor({rows, cols}, std::move(data));
}

Tensor Tensor::identity(std::size_t n)
{
    Tensor t({n, n});
    for (std::size_t i = 0; i < n; ++i) t.at(i, i) = 1.0;
    return t;
}

std::size_t Tensor::rows() const
{
    if (shape_.size() != 2) throw ValidationError("tensor: rows() needs a matrix, got " + shape_str(shape_));
    return shape_[0];
}

std::size_t Tensor::cols() const
{
    if (shape_.size() != 2) throw ValidationError("tensor: cols() needs a matrix, got " + shape_str(shape_));
    return shape_[1];
}

double Tensor::item() const
{
    if (data_.size() != 1) throw ValidationError("tensor: item() on non-scalar " + shape_str(shape_));
    return data_[0];
}

bool Tensor::all_finite() const
{
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

Tensor Tensor::reshaped(Shape shape) const
{
    return Tensor(std::move(shape), data_);
}

Tensor Tensor::transposed() const
{
    const std::size_t r = rows(), c = cols();
    Tensor out({c, r});
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out.data_[j * r + i] = data_[i * c + j];
    return out;
}

Tensor matmul(const Tensor& a, const Tensor& b)
{
    const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
    if (b.rows() != k)
        throw ValidationError("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    Tensor out({n, m});
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    double* po = out.data().data();
    for (std::size_t i = 0; i < n; ++i) {
        double* row = po + i * m;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = pa[i * k + p];
            const double* brow = pb + p * m;
            for (std::size_t j = 0; j < m; ++j) row[j] += av * brow[j];
        }
    }
    return out;
}

double max_abs_diff(const Tensor& a, const Tensor& b)
{
    if (a.size() != b.size()) throw ValidationError("max_abs_diff: size mismatch");
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

} // namespace dlfm
