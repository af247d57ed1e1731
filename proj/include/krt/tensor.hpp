#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "krt/errors.hpp"

namespace krt {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense row-major array. Plain value type: copies are deep.
template <class T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;
    explicit Tensor(Shape shape);
    Tensor(Shape shape, std::vector<T> data);

    static Tensor scalar(T value) { return Tensor(Shape{}, std::vector<T>{value}); }
    static Tensor vector(std::vector<T> data) {
        Shape shape{data.size()};
        return Tensor(std::move(shape), std::move(data));
    }
    static Tensor filled(Shape shape, T value);

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    std::span<const T> data() const noexcept { return data_; }
    std::span<T> data() noexcept { return data_; }
    const std::vector<T>& storage() const noexcept { return data_; }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }
    T& at(std::size_t r, std::size_t c) { return data_[r * shape_.back() + c]; }
    const T& at(std::size_t r, std::size_t c) const { return data_[r * shape_.back() + c]; }

    // Only valid for single-element tensors.
    T item() const;

    Tensor reshaped(Shape shape) const;
    void fill(T value);
    bool all_finite() const;

    friend bool operator==(const Tensor& a, const Tensor& b) = default;

private:
    Shape shape_;
    std::vector<T> data_;
};

// A named trainable leaf. `trainable == false` means the tape treats it as a
// constant and the optimizer never touches it.
template <class T>
struct Parameter {
    std::string name;
    Tensor<T> value;
    Tensor<T> grad;
    bool trainable = true;

    Parameter() = default;
    Parameter(std::string n, Tensor<T> v) : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

    void zero_grad() { grad = Tensor<T>(value.shape()); }
};

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace krt
