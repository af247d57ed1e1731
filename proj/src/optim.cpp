#include "krt/optim.hpp"

#include <cmath>

#include "krt/errors.hpp"

namespace krt {

void AdamConfig::validate() const {
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("train.lr: must be a finite value >= 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ConfigError("train.beta1: must lie in [0, 1)");
    if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("train.beta2: must lie in [0, 1)");
    if (!(eps > 0.0)) throw ConfigError("train.eps: must be positive");
}

template <class T>
Adam<T>::Adam(std::vector<Parameter<T>*> params, const AdamConfig& config)
    : params_(std::move(params)), config_(config) {
    config_.validate();
    for (auto* p : params_) {
        m_.emplace_back(p->value.size(), 0.0);
        v_.emplace_back(p->value.size(), 0.0);
    }
}

template <class T>
void Adam<T>::zero_grad() {
    for (auto* p : params_) std::fill(p->grad.data().begin(), p->grad.data().end(), T(0));
}

template <class T>
void Adam<T>::step() {
    ++t_;
    const double b1 = config_.beta1, b2 = config_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        auto* p = params_[i];
        if (!p->trainable) continue;
        auto value = p->value.data();
        const auto grad = p->grad.data();
        if (grad.size() != value.size()) throw DimensionError("adam: gradient of '" + p->name + "' has wrong size");
        auto& m = m_[i];
        auto& v = v_[i];
        for (std::size_t j = 0; j < value.size(); ++j) {
            const double g = grad[j];
            m[j] = b1 * m[j] + (1.0 - b1) * g;
            v[j] = b2 * v[j] + (1.0 - b2) * g * g;
            const double update = config_.lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + config_.eps);
            value[j] = static_cast<T>(value[j] - update);
        }
        if (!p->value.all_finite()) throw NumericError("adam: parameter '" + p->name + "' became non-finite");
    }
}

template class Adam<float>;
template class Adam<double>;

}  // namespace krt
