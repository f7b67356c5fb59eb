#include "dlfm/tape.hpp"

namespace dlfm::grad {

Tape& Var::tape() const
{
    if (!tape_) throw ValidationError("var: not attached to a tape");
    return *tape_;
}

const Tensor& Var::value() const { return tape().value(id_); }

bool Var::requires_grad() const { return tape().requires_grad(id_); }

void GradSink::add(std::size_t id, const Tensor& g)
{
    if (!live_[id]) return;
    Tensor& acc = grads_[id];
    if (acc.size() == 0) {
        acc = g;
        return;
    }
    if (acc.size() != g.size())
        throw ValidationError("backward: gradient size mismatch at node " + std::to_string(id));
    for (std::size_t i = 0; i < g.size(); ++i) acc[i] += g[i];
}

Tensor Gradients::of(const Var& v) const
{
    if (has(v)) return grads_[v.id()];
    return Tensor(v.shape());
}

Var Tape::leaf(Tensor value)
{
    nodes_.push_back({std::move(value), {}, nullptr, true});
    return {this, nodes_.size() - 1};
}

Var Tape::constant(Tensor value)
{
    nodes_.push_back({std::move(value), {}, nullptr, false});
    return {this, nodes_.size() - 1};
}

Var Tape::record(Tensor value, std::vector<std::size_t> parents, BackwardFn backward)
{
    const std::size_t id = nodes_.size();
    bool live = false;
    for (std::size_t p : parents) {
        if (p >= id) throw ValidationError("tape: cycle detected (parent " + std::to_string(p) +
                                           " does not precede node " + std::to_string(id) + ")");
        live = live || nodes_[p].live;
    }
    if (!value.all_finite())
        throw NumericError("tape: non-finite value produced at node " + std::to_string(id));
    nodes_.push_back({std::move(value), std::move(parents), live ? std::move(backward) : nullptr, live});
    return {this, id};
}

Tensor Tape::freeze(const Tensor& value)
{
    switch (frozen_mode_) {
    case FrozenMode::Off:
        return value;
    case FrozenMode::Record:
        frozen_.push_back(value);
        return value;
    case FrozenMode::Replay:
        if (frozen_cursor_ >= frozen_.size()) throw ValidationError("tape: frozen replay exhausted");
        if (frozen_[frozen_cursor_].shape() != value.shape())
            throw ValidationError("tape: frozen replay shape mismatch");
        return frozen_[frozen_cursor_++];
    }
    return value;
}

void Tape::replay_frozen(std::vector<Tensor> values)
{
    frozen_ = std::move(values);
    frozen_cursor_ = 0;
    frozen_mode_ = FrozenMode::Replay;
}

Gradients Tape::backward(const Var& loss) const
{
    if (&loss.tape() != this) throw ValidationError("backward: loss belongs to another tape");
    const std::size_t root = loss.id();
    if (nodes_.at(root).value.size() != 1)
        throw ValidationError("backward: loss must be scalar, got " + shape_str(nodes_[root].value.shape()));

    std::vector<Tensor> grads(nodes_.size());
    std::vector<bool> live(nodes_.size());
    for (std::size_t i = 0; i < nodes_.size(); ++i) live[i] = nodes_[i].live;
    GradSink sink(grads, live);
    if (!live[root]) return Gradients(std::move(grads));

    grads[root] = Tensor(nodes_[root].value.shape(), 1.0);
    for (std::size_t i = root + 1; i-- > 0;) {
        const Node& n = nodes_[i];
        if (!n.backward || grads[i].size() == 0) continue;
        n.backward(grads[i], sink);
    }
    return Gradients(std::move(grads));
}

} // namespace dlfm::grad
