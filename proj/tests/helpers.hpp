#pragma once

// Shared helpers for the test suites: finite-difference oracles and random
// problem generators that stay away from activation kinks.

#include <cmath>
#include <functional>

#include "underspec/mlp.hpp"
#include "underspec/rng.hpp"
#include "underspec/tensor.hpp"

namespace testutil {

using underspec::MlpParams;
using underspec::MlpSpec;
using underspec::Rng;
using underspec::Vec;

inline double rel_err(double a, double b, double floor = 1e-6) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

// Central finite differences of a scalar function of x.
inline Vec fd_gradient(const std::function<double(const Vec&)>& f, Vec x, double h = 1e-6) {
    Vec g(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double orig = x[i];
        x[i] = orig + h;
        const double up = f(x);
        x[i] = orig - h;
        const double down = f(x);
        x[i] = orig;
        g[i] = (up - down) / (2.0 * h);
    }
    return g;
}

// Central finite differences over every parameter of a model.
inline MlpParams fd_param_gradient(const std::function<double(const MlpParams&)>& f,
                                   MlpParams params, double h = 1e-6) {
    MlpParams g = params;
    g.scale(0.0);
    auto probe = [&](double& slot, double& out) {
        const double orig = slot;
        slot = orig + h;
        const double up = f(params);
        slot = orig - h;
        const double down = f(params);
        slot = orig;
        out = (up - down) / (2.0 * h);
    };
    for (std::size_t l = 0; l < params.weights.size(); ++l) {
        for (std::size_t i = 0; i < params.weights[l].data.size(); ++i) {
            probe(params.weights[l].data[i], g.weights[l].data[i]);
        }
        for (std::size_t i = 0; i < params.biases[l].size(); ++i) {
            probe(params.biases[l][i], g.biases[l][i]);
        }
    }
    return g;
}

inline Vec random_vec(std::size_t n, Rng& rng, double scale = 1.0) {
    Vec v(n);
    for (double& x : v) x = scale * rng.normal();
    return v;
}

inline MlpParams random_params(const MlpSpec& spec, std::uint64_t seed) {
    return underspec::init_params(spec, seed);
}

// True when every hidden pre-activation at x is safely away from the leaky
// ReLU kink, so finite differences see a locally smooth function.
inline bool away_from_kinks(const MlpSpec& spec, const MlpParams& params, const Vec& x,
                            double margin = 1e-4) {
    underspec::ForwardTrace trace;
    underspec::mlp_forward_into(spec, params, x, trace);
    for (std::size_t l = 0; l + 1 < spec.n_layers() + 1 && l < trace.pre.size(); ++l) {
        if (l == spec.n_layers() - 1) continue;  // output has no kink
        for (double a : trace.pre[l]) {
            if (std::abs(a) < margin) return false;
        }
    }
    return true;
}

} // namespace testutil
