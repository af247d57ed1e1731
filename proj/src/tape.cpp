#include "krt/tape.hpp"

#include <string>

#include "krt/simd/kernels.hpp"

namespace krt {

template <class T>
Var<T> Tape<T>::push(Node node) {
    nodes_.push_back(std::move(node));
    return Var<T>(this, static_cast<int>(nodes_.size() - 1));
}

template <class T>
Var<T> Tape<T>::constant(Tensor<T> value) {
    if (!value.all_finite()) throw NumericError("non-finite constant entered the tape");
    Node node;
    node.value = std::move(value);
    node.op = "constant";
    return push(std::move(node));
}

template <class T>
Var<T> Tape<T>::leaf(Parameter<T>& param) {
    if (!param.value.all_finite()) throw NumericError("parameter '" + param.name + "' is not finite");
    Node node;
    node.value = param.value;
    node.requires_grad = param.trainable;
    node.param = param.trainable ? &param : nullptr;
    node.op = "leaf";
    return push(std::move(node));
}

template <class T>
Var<T> Tape<T>::record(Tensor<T> value, std::initializer_list<Var<T>> inputs, BackwardFn backward,
                       const char* op_name) {
    return record(std::move(value), std::vector<Var<T>>(inputs), std::move(backward), op_name);
}

template <class T>
Var<T> Tape<T>::record(Tensor<T> value, const std::vector<Var<T>>& inputs, BackwardFn backward,
                       const char* op_name) {
    if (!value.all_finite()) throw NumericError(std::string("op '") + op_name + "' produced a non-finite value");
    Node node;
    node.value = std::move(value);
    for (const auto& in : inputs) {
        if (in.tape() != this) throw ValueError(std::string("op '") + op_name + "' mixes tapes");
        node.requires_grad = node.requires_grad || nodes_[in.id()].requires_grad;
    }
    if (node.requires_grad) node.backward = std::move(backward);
    node.op = op_name;
    return push(std::move(node));
}

template <class T>
Tensor<T>& Tape<T>::grad_of(const Var<T>& v) {
    Node& node = nodes_[v.id()];
    if (node.grad.empty() && !node.value.empty()) node.grad = Tensor<T>(node.value.shape());
    if (node.grad.shape() != node.value.shape()) node.grad = Tensor<T>(node.value.shape());
    return node.grad;
}

template <class T>
void Tape<T>::backward(const Var<T>& loss) {
    if (loss.tape() != this) throw ValueError("backward on a variable from another tape");
    Node& root = nodes_[loss.id()];
    if (root.value.size() != 1)
        throw DimensionError("backward needs a scalar loss, got shape " + shape_str(root.value.shape()));
    backward_order_.clear();
    if (!root.requires_grad) return;
    for (auto& node : nodes_) node.grad = Tensor<T>();
    grad_of(loss)[0] = T(1);

    const auto& k = simd::active_kernels<T>();
    for (int i = loss.id(); i >= 0; --i) {
        Node& node = nodes_[static_cast<std::size_t>(i)];
        if (!node.requires_grad || node.grad.empty()) continue;
        backward_order_.push_back(node.op);
        if (node.backward) node.backward(*this, node.value, node.grad);
        if (node.param != nullptr) {
            Parameter<T>& p = *node.param;
            if (p.grad.shape() != p.value.shape()) p.grad = Tensor<T>(p.value.shape());
            k.axpy(p.grad.size(), T(1), node.grad.data().data(), p.grad.data().data());
        }
    }
}

template <class T>
void Tape<T>::clear() {
    nodes_.clear();
    backward_order_.clear();
}

template class Tape<float>;
template class Tape<double>;

}  // namespace krt
