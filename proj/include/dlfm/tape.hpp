#pragma once

#include "dlfm/tensor.hpp"

#include <functional>
#include <string>
#include <vector>

namespace dlfm::grad {

class Tape;

/// Handle to a node recorded on a Tape.
class Var {
public:
    Var() = default;
    Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

    Tape& tape() const;
    std::size_t id() const { return id_; }
    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }
    bool requires_grad() const;
    bool valid() const { return tape_ != nullptr; }

private:
    Tape* tape_ = nullptr;
    std::size_t id_ = 0;
};

/// Accumulates parent gradients during the reverse sweep.
class GradSink {
public:
    explicit GradSink(std::vector<Tensor>& grads, const std::vector<bool>& live)
        : grads_(grads), live_(live) {}

    bool wants(std::size_t id) const { return live_[id]; }
    /// Adds `g` into the accumulator of node `id`. Accumulation is additive.
    void add(std::size_t id, const Tensor& g);

private:
    std::vector<Tensor>& grads_;
    const std::vector<bool>& live_;
};

using BackwardFn = std::function<void(const Tensor& grad_out, GradSink& sink)>;

/// Gradients produced by Tape::backward, indexed by node id.
class Gradients {
public:
    Gradients() = default;
    explicit Gradients(std::vector<Tensor> grads) : grads_(std::move(grads)) {}

    bool has(const Var& v) const { return v.id() < grads_.size() && grads_[v.id()].size() > 0; }
    /// Gradient of `v`, or zeros of its shape when it received none.
    Tensor of(const Var& v) const;

private:
    std::vector<Tensor> grads_;
};

/// Append-only record of operations. Parents always precede children, so the
/// reverse sweep is a single backwards pass over the node list.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Trainable input.
    Var leaf(Tensor value);
    /// Input that never receives gradient.
    Var constant(Tensor value);
    /// Records an op result. The node is live if any parent is live.
    Var record(Tensor value, std::vector<std::size_t> parents, BackwardFn backward);

    const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
    bool requires_grad(std::size_t id) const { return nodes_.at(id).live; }
    std::size_t size() const { return nodes_.size(); }

    Gradients backward(const Var& loss) const;

    /// Value used for a stop-gradient node. In replay mode the values frozen
    /// by an earlier recording pass are returned in order, so finite
    /// differences perturb only the live branches.
    Tensor freeze(const Tensor& value);
    void record_frozen() { frozen_mode_ = FrozenMode::Record; }
    void replay_frozen(std::vector<Tensor> values);
    const std::vector<Tensor>& frozen_values() const { return frozen_; }

    void warn(std::string message) { warnings_.push_back(std::move(message)); }
    const std::vector<std::string>& warnings() const { return warnings_; }

private:
    struct Node {
        Tensor value;
        std::vector<std::size_t> parents;
        BackwardFn backward;
        bool live = false;
    };
    enum class FrozenMode { Off, Record, Replay };
    std::vector<Node> nodes_;
    std::vector<std::string> warnings_;
    std::vector<Tensor> frozen_;
    std::size_t frozen_cursor_ = 0;
    FrozenMode frozen_mode_ = FrozenMode::Off;
};

} // namespace dlfm::grad
