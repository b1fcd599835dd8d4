#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

#include "compactformer/tensor.hpp"

namespace cf {

/// First/second moment buffers for one parameter tensor.
struct AdamState {
    std::vector<double> m;
    std::vector<double> v;
    long long step_count = 0;
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    explicit AdamState(std::size_t n, double lr_ = 1e-3) : m(n, 0.0), v(n, 0.0), lr(lr_) {}
};

/// Bias-corrected Adam update, in place.
inline void adam_step(Tensor& param, const Tensor& grad, AdamState& st) {
    require_same_shape(param, grad, "adam_step");
    if (st.m.size() != param.size())
        throw std::invalid_argument("adam_step: state size " + std::to_string(st.m.size()) +
                                    " does not match parameter " + shape_str(param.shape));
    st.step_count += 1;
    const double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step_count));
    const double bc2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step_count));
    for (std::size_t i = 0; i < param.size(); ++i) {
        const double g = grad[i];
        st.m[i] = st.beta1 * st.m[i] + (1.0 - st.beta1) * g;
        st.v[i] = st.beta2 * st.v[i] + (1.0 - st.beta2) * g * g;
        const double mhat = st.m[i] / bc1;
        const double vhat = st.v[i] / bc2;
        param[i] -= st.lr * mhat / (std::sqrt(vhat) + st.eps);
    }
}

/// Adam over a fixed parameter list; one state per tensor.
class Adam {
public:
    Adam(const std::vector<Tensor*>& params, double lr) {
        states_.reserve(params.size());
        for (const Tensor* p : params) states_.emplace_back(p->size(), lr);
    }

    void step(const std::vector<Tensor*>& params, const std::vector<Tensor>& grads) {
        if (params.size() != states_.size() || grads.size() != states_.size())
            throw std::invalid_argument("Adam::step: parameter list changed size");
        for (std::size_t i = 0; i < params.size(); ++i)
            adam_step(*params[i], grads[i], states_[i]);
    }

private:
    std::vector<AdamState> states_;
};

}  // namespace cf
