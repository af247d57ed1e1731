#pragma once

// Reverse-mode autodiff. A Tape records every differentiable op in execution
// order together with a closure that propagates the output gradient to the
// op's inputs. backward() walks the record in exact reverse order.
//
// One tape belongs to one thread. Parameters enter the tape as leaves; their
// gradients are accumulated into Parameter::grad on backward (repeated
// backward calls without zero_grad() accumulate).

#include <functional>
#include <vector>

#include "krt/tensor.hpp"

namespace krt {

template <class T>
class Tape;

template <class T>
class Var {
public:
    Var() = default;

    const Tensor<T>& value() const;
    const Shape& shape() const { return value().shape(); }
    std::size_t dim(std::size_t axis) const { return value().dim(axis); }
    std::size_t size() const { return value().size(); }
    bool requires_grad() const;
    // Gradient accumulated on this node by the last backward(); empty when
    // the node does not require grad.
    const Tensor<T>& grad() const;

    Tape<T>* tape() const noexcept { return tape_; }
    int id() const noexcept { return id_; }
    bool valid() const noexcept { return tape_ != nullptr; }

private:
    friend class Tape<T>;
    Var(Tape<T>* tape, int id) : tape_(tape), id_(id) {}

    Tape<T>* tape_ = nullptr;
    int id_ = -1;
};

template <class T>
class Tape {
public:
    // Called with the node's output value and its finished gradient.
    using BackwardFn = std::function<void(Tape&, const Tensor<T>& out_value, const Tensor<T>& out_grad)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var<T> constant(Tensor<T> value);
    // Leaf bound to a parameter. Frozen parameters become constants.
    Var<T> leaf(Parameter<T>& param);

    // Appends an op result. requires_grad is inherited from the inputs; the
    // backward closure is dropped when no input needs a gradient.
    Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> inputs, BackwardFn backward,
                  const char* op_name);
    Var<T> record(Tensor<T> value, const std::vector<Var<T>>& inputs, BackwardFn backward, const char* op_name);

    void backward(const Var<T>& loss);
    // Drops every node and saved intermediate.
    void clear();
    std::size_t size() const noexcept { return nodes_.size(); }

    // Backward-closure helpers.
    bool needs_grad(const Var<T>& v) const { return nodes_[v.id()].requires_grad; }
    Tensor<T>& grad_of(const Var<T>& v);

    const Tensor<T>& value_of(int id) const { return nodes_[id].value; }
    const Tensor<T>& grad_at(int id) const { return nodes_[id].grad; }
    bool requires_grad_at(int id) const { return nodes_[id].requires_grad; }

    // Op names in the order backward visited them (for tests and debugging).
    const std::vector<const char*>& last_backward_order() const noexcept { return backward_order_; }

private:
    struct Node {
        Tensor<T> value;
        Tensor<T> grad;
        bool requires_grad = false;
        Parameter<T>* param = nullptr;
        BackwardFn backward;
        const char* op = "";
    };

    Var<T> push(Node node);

    std::vector<Node> nodes_;
    std::vector<const char*> backward_order_;
};

template <class T>
const Tensor<T>& Var<T>::value() const {
    return tape_->value_of(id_);
}

template <class T>
bool Var<T>::requires_grad() const {
    return tape_->requires_grad_at(id_);
}

template <class T>
const Tensor<T>& Var<T>::grad() const {
    return tape_->grad_at(id_);
}

extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace krt
