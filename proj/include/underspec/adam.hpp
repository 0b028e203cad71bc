#pragma once

#include <cmath>
#include <cstddef>

#include "underspec/errors.hpp"
#include "underspec/mlp.hpp"

namespace underspec {

struct AdamState {
    MlpParams m;  // first moments, shapes mirror the parameters
    MlpParams v;  // second moments
    std::size_t step = 0;
    double lr = 0.002;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    static AdamState init(const MlpSpec& spec, double lr) {
        AdamState s;
        s.m = MlpParams::zeros(spec);
        s.v = MlpParams::zeros(spec);
        s.lr = lr;
        return s;
    }
};

namespace detail {
inline void adam_update_span(double* p, double* m, double* v, const double* g, std::size_t n,
                             const AdamState& s, double bc1, double bc2) {
    for (std::size_t i = 0; i < n; ++i) {
        m[i] = s.beta1 * m[i] + (1.0 - s.beta1) * g[i];
        v[i] = s.beta2 * v[i] + (1.0 - s.beta2) * g[i] * g[i];
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        p[i] -= s.lr * mhat / (std::sqrt(vhat) + s.eps);
    }
}
} // namespace detail

// One Adam update, in place. Deterministic; rejects non-finite gradients.
inline void adam_step(AdamState& state, MlpParams& params, const MlpParams& grads) {
    if (!grads.all_finite()) fail(ErrorKind::NonFinite, "adam_step received non-finite gradients");
    state.step += 1;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    for (std::size_t l = 0; l < params.weights.size(); ++l) {
        detail::adam_update_span(params.weights[l].data.data(), state.m.weights[l].data.data(),
                                 state.v.weights[l].data.data(), grads.weights[l].data.data(),
                                 params.weights[l].data.size(), state, bc1, bc2);
        detail::adam_update_span(params.biases[l].data(), state.m.biases[l].data(),
                                 state.v.biases[l].data(), grads.biases[l].data(),
                                 params.biases[l].size(), state, bc1, bc2);
    }
}

} // namespace underspec
