#include "dlfm/params.hpp"

#include "dlfm/ops.hpp"

#include <algorithm>
#include <cmath>

namespace dlfm {

void ParamSet::add(const std::string& name, Tensor value)
{
    if (contains(name)) throw ValidationError("params: duplicate parameter '" + name + "'");
    index_[name] = names_.size();
    names_.push_back(name);
    values_.push_back(std::move(value));
}

Tensor& ParamSet::get(const std::string& name)
{
    auto it = index_.find(name);
    if (it == index_.end()) throw ValidationError("params: unknown parameter '" + name + "'");
    return values_[it->second];
}

const Tensor& ParamSet::get(const std::string& name) const
{
    auto it = index_.find(name);
    if (it == index_.end()) throw ValidationError("params: unknown parameter '" + name + "'");
    return values_[it->second];
}

std::size_t ParamSet::numel() const
{
    std::size_t n = 0;
    for (const auto& v : values_) n += v.size();
    return n;
}

Tensor ParamSet::flatten() const
{
    std::vector<double> flat;
    flat.reserve(numel());
    for (const auto& v : values_) flat.insert(flat.end(), v.storage().begin(), v.storage().end());
    return Tensor::vector(std::move(flat));
}

void ParamSet::assign_flat(const Tensor& flat)
{
    if (flat.size() != numel()) throw ValidationError("params: flat size mismatch");
    std::size_t off = 0;
    for (auto& v : values_) {
        std::copy_n(flat.storage().begin() + static_cast<long>(off), v.size(), v.storage().begin());
        off += v.size();
    }
}

bool ParamSet::all_finite() const
{
    return std::all_of(values_.begin(), values_.end(), [](const Tensor& t) { return t.all_finite(); });
}

BoundParams::BoundParams(grad::Tape& tape, const ParamSet& params, bool trainable) : params_(&params)
{
    vars_.reserve(params.size());
    for (std::size_t i = 0; i < params.size(); ++i)
        vars_.push_back(trainable ? tape.leaf(params.at(i)) : tape.constant(params.at(i)));
}

BoundParams::BoundParams(grad::Tape&, const ParamSet& layout, grad::Var flat) : params_(&layout)
{
    if (flat.value().size() != layout.numel()) throw ValidationError("params: flat variable size mismatch");
    const Tensor& fv = flat.value();
    grad::Var row = grad::reshape(flat, {1, fv.size()});
    std::size_t off = 0;
    for (std::size_t i = 0; i < layout.size(); ++i) {
        const std::size_t n = layout.at(i).size();
        vars_.push_back(grad::reshape(grad::slice_cols(row, off, off + n), layout.at(i).shape()));
        off += n;
    }
}

grad::Var BoundParams::operator[](const std::string& name) const
{
    const auto& names = params_->names();
    for (std::size_t i = 0; i < names.size(); ++i)
        if (names[i] == name) return vars_[i];
    throw ValidationError("params: unknown parameter '" + name + "'");
}

std::vector<Tensor> BoundParams::gradients(const grad::Gradients& g) const
{
    std::vector<Tensor> out;
    out.reserve(vars_.size());
    for (const auto& v : vars_) out.push_back(g.of(v));
    return out;
}

Tensor glorot(std::size_t fan_in, std::size_t fan_out, Rng& rng)
{
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    Tensor w({fan_in, fan_out});
    for (auto& v : w.storage()) v = rng.uniform(-limit, limit);
    return w;
}

} // namespace dlfm
