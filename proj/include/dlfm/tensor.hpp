#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace dlfm {

/// Thrown for violated preconditions on user-supplied inputs.
class ValidationError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Thrown when a file cannot be read, written or decoded.
class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Thrown when a numeric state becomes non-finite or an iteration fails to converge.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major tensor of doubles. Value type; cheap to move.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, std::vector<double> data);

    static Tensor scalar(double v) { return Tensor({1}, std::vector<double>{v}); }
    static Tensor vector(std::vector<double> v);
    static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> data);
    static Tensor identity(std::size_t n);

    const Shape& shape() const { return shape_; }
    std::size_t size() const { return data_.size(); }
    std::size_t rank() const { return shape_.size(); }
    std::size_t rows() const;
    std::size_t cols() const;

    std::span<double> data() { return data_; }
    std::span<const double> data() const { return data_; }
    std::vector<double>& storage() { return data_; }
    const std::vector<double>& storage() const { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }
    double& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
    double at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

    double item() const;
    bool all_finite() const;
    Tensor reshaped(Shape shape) const;
    Tensor transposed() const;

    bool operator==(const Tensor& other) const = default;

private:
    Shape shape_;
    std::vector<double> data_;
};

Tensor matmul(const Tensor& a, const Tensor& b);
double max_abs_diff(const Tensor& a, const Tensor& b);

} // namespace dlfm
