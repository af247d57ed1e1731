#include "krt/tensor.hpp"

#include <cmath>
#include <sstream>

namespace krt {

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto extent : shape) n *= extent;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

std::string_view error_code(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::dimension: return "E_DIM";
        case ErrorKind::numeric: return "E_NUMERIC";
        case ErrorKind::value: return "E_VALUE";
        case ErrorKind::config: return "E_CONFIG";
        case ErrorKind::data: return "E_DATA";
        case ErrorKind::io: return "E_IO";
        case ErrorKind::runtime: return "E_RUNTIME";
    }
    return "E_UNKNOWN";
}

template <class T>
Tensor<T>::Tensor(Shape shape) : shape_(std::move(shape)), data_(shape_numel(shape_), T(0)) {}

template <class T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_numel(shape_) != data_.size())
        throw DimensionError("tensor shape " + shape_str(shape_) + " does not match " +
                             std::to_string(data_.size()) + " elements");
}

template <class T>
Tensor<T> Tensor<T>::filled(Shape shape, T value) {
    Tensor t(std::move(shape));
    t.fill(value);
    return t;
}

template <class T>
T Tensor<T>::item() const {
    if (data_.size() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape_));
    return data_[0];
}

template <class T>
Tensor<T> Tensor<T>::reshaped(Shape shape) const {
    if (shape_numel(shape) != data_.size())
        throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    return Tensor(std::move(shape), data_);
}

template <class T>
void Tensor<T>::fill(T value) {
    for (auto& x : data_) x = value;
}

template <class T>
bool Tensor<T>::all_finite() const {
    for (auto x : data_)
        if (!std::isfinite(x)) return false;
    return true;
}

template class Tensor<float>;
template class Tensor<double>;

}  // namespace krt
