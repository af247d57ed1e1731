#pragma once

#include <vector>

#include "krt/tensor.hpp"

namespace krt {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    void validate() const;

    bool operator==(const AdamConfig&) const = default;
};

// Bias-corrected Adam over a fixed parameter list. Frozen parameters keep
// their moments at zero and are never written.
template <class T>
class Adam {
public:
    Adam(std::vector<Parameter<T>*> params, const AdamConfig& config);

    void zero_grad();
    void step();
    std::size_t steps() const { return t_; }

private:
    std::vector<Parameter<T>*> params_;
    std::vector<std::vector<double>> m_, v_;
    AdamConfig config_;
    std::size_t t_ = 0;
};

extern template class Adam<float>;
extern template class Adam<double>;

}  // namespace krt
