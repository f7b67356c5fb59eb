#pragma once

#include "dlfm/rng.hpp"
#include "dlfm/tape.hpp"
#include "dlfm/tensor.hpp"

#include <map>
#include <string>
#include <vector>

namespace dlfm {

/// Ordered collection of named parameter tensors.
class ParamSet {
public:
    void add(const std::string& name, Tensor value);
    bool contains(const std::string& name) const { return index_.count(name) != 0; }
    Tensor& get(const std::string& name);
    const Tensor& get(const std::string& name) const;

    std::size_t size() const { return names_.size(); }
    const std::vector<std::string>& names() const { return names_; }
    Tensor& at(std::size_t i) { return values_[i]; }
    const Tensor& at(std::size_t i) const { return values_[i]; }

    std::size_t numel() const;
    Tensor flatten() const;
    void assign_flat(const Tensor& flat);
    bool all_finite() const;

    bool operator==(const ParamSet& other) const { return names_ == other.names_ && values_ == other.values_; }

private:
    std::vector<std::string> names_;
    std::vector<Tensor> values_;
    std::map<std::string, std::size_t> index_;
};

/// Parameters bound to a tape as variables (trainable leaves or constants).
class BoundParams {
public:
    BoundParams(grad::Tape& tape, const ParamSet& params, bool trainable);
    /// Binds parameters as slices of a single flat variable (used by gradient checks).
    BoundParams(grad::Tape& tape, const ParamSet& layout, grad::Var flat);

    grad::Var operator[](const std::string& name) const;
    /// Gradients for each parameter, in ParamSet order.
    std::vector<Tensor> gradients(const grad::Gradients& g) const;

private:
    const ParamSet* params_;
    std::vector<grad::Var> vars_;
};

/// Glorot-uniform initialization for a fan_in x fan_out weight.
Tensor glorot(std::size_t fan_in, std::size_t fan_out, Rng& rng);

} // namespace dlfm
