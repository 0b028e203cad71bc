#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "underspec/errors.hpp"
#include "underspec/rng.hpp"
#include "underspec/tensor.hpp"

namespace underspec {

// Fully-connected network: layer_widths = [d_in, h_1, ..., d_out].
// Hidden activations are leaky ReLU; the output is a raw value unless
// sigmoid_output is set (used by auto-encoder decoders). Predictors keep the
// raw logit so that input gradients are scale-honest.
struct MlpSpec {
    std::vector<std::size_t> layer_widths;
    double leaky_slope = 0.01;
    bool sigmoid_output = false;

    std::size_t n_layers() const { return layer_widths.size() - 1; }
    std::size_t d_in() const { return layer_widths.front(); }
    std::size_t d_out() const { return layer_widths.back(); }

    void validate() const {
        if (layer_widths.size() < 2) {
            fail(ErrorKind::InvalidConfig, "MlpSpec needs at least input and output widths");
        }
        for (std::size_t w : layer_widths) {
            if (w == 0) fail(ErrorKind::InvalidConfig, "MlpSpec has a zero layer width");
        }
        if (!(leaky_slope > 0.0 && leaky_slope < 1.0)) {
            fail(ErrorKind::InvalidConfig, "leaky_slope must lie in (0,1)");
        }
    }

    // Predictors output a single raw logit.
    void validate_predictor() const {
        validate();
        if (d_out() != 1) {
            fail(ErrorKind::InvalidConfig, "predictor output width must be 1, got " +
                                               std::to_string(d_out()));
        }
        if (sigmoid_output) {
            fail(ErrorKind::InvalidConfig, "predictors use a raw logit output");
        }
    }

    bool operator==(const MlpSpec& o) const {
        return layer_widths == o.layer_widths && leaky_slope == o.leaky_slope &&
               sigmoid_output == o.sigmoid_output;
    }
};

struct MlpParams {
    // weights[l] has shape [layer_widths[l+1], layer_widths[l]]; biases[l] matches rows.
    std::vector<Tensor> weights;
    std::vector<Vec> biases;

    static MlpParams zeros(const MlpSpec& spec) {
        MlpParams p;
        for (std::size_t l = 0; l < spec.n_layers(); ++l) {
            p.weights.emplace_back(
                std::vector<std::size_t>{spec.layer_widths[l + 1], spec.layer_widths[l]});
            p.biases.emplace_back(spec.layer_widths[l + 1], 0.0);
        }
        return p;
    }

    void check_matches(const MlpSpec& spec) const {
        if (weights.size() != spec.n_layers() || biases.size() != spec.n_layers()) {
            fail(ErrorKind::ShapeMismatch, "parameter layer count does not match spec");
        }
        for (std::size_t l = 0; l < weights.size(); ++l) {
            if (weights[l].rows() != spec.layer_widths[l + 1] ||
                weights[l].cols() != spec.layer_widths[l] ||
                biases[l].size() != spec.layer_widths[l + 1]) {
                fail(ErrorKind::ShapeMismatch,
                     "parameter shapes do not match spec at layer " + std::to_string(l));
            }
        }
    }

    bool all_finite() const {
        for (const auto& w : weights) {
            if (!w.all_finite()) return false;
        }
        for (const auto& b : biases) {
            if (!underspec::all_finite(b)) return false;
        }
        return true;
    }

    void add_scaled(const MlpParams& other, double alpha) {
        for (std::size_t l = 0; l < weights.size(); ++l) {
            for (std::size_t i = 0; i < weights[l].data.size(); ++i) {
                weights[l].data[i] += alpha * other.weights[l].data[i];
            }
            for (std::size_t i = 0; i < biases[l].size(); ++i) {
                biases[l][i] += alpha * other.biases[l][i];
            }
        }
    }

    void scale(double alpha) {
        for (auto& w : weights) {
            for (double& v : w.data) v *= alpha;
        }
        for (auto& b : biases) {
            for (double& v : b) v *= alpha;
        }
    }

    // Visits every parameter as a mutable double; used by the optimizer and by
    // finite-difference oracles in tests.
    template <typename F>
    void for_each(F&& f) {
        for (auto& w : weights) {
            for (double& v : w.data) f(v);
        }
        for (auto& b : biases) {
            for (double& v : b) f(v);
        }
    }

    std::size_t n_scalars() const {
        std::size_t n = 0;
        for (const auto& w : weights) n += w.data.size();
        for (const auto& b : biases) n += b.size();
        return n;
    }
};

// Glorot-uniform weights, zero biases.
inline MlpParams init_params(const MlpSpec& spec, std::uint64_t seed) {
    MlpParams p = MlpParams::zeros(spec);
    Rng rng(seed);
    for (std::size_t l = 0; l < spec.n_layers(); ++l) {
        const double fan_in = static_cast<double>(spec.layer_widths[l]);
        const double fan_out = static_cast<double>(spec.layer_widths[l + 1]);
        const double a = std::sqrt(6.0 / (fan_in + fan_out));
        for (double& v : p.weights[l].data) v = rng.uniform(-a, a);
    }
    return p;
}

inline double sigmoid(double x) {
    return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

// Derivative gate of the hidden activation. Pre-activations exactly at the
// kink take the positive branch.
inline double leaky_gate(double pre, double slope) { return pre >= 0.0 ? 1.0 : slope; }

// Per-layer pre-activations and post-activations from one forward pass. The
// pre-activations are enough to recompute every activation gate, which is what
// the gradient-of-gradient passes need.
struct ForwardTrace {
    Vec input;
    std::vector<Vec> pre;   // pre[l] = W_l z_{l-1} + b_l
    std::vector<Vec> post;  // post[l] = activation(pre[l])
};

inline void mlp_forward_into(const MlpSpec& spec, const MlpParams& params, const Vec& x,
                             ForwardTrace& trace) {
    if (x.size() != spec.d_in()) {
        fail(ErrorKind::ShapeMismatch, "input length " + std::to_string(x.size()) +
                                           " does not match d_in " + std::to_string(spec.d_in()));
    }
    params.check_matches(spec);
    const std::size_t L = spec.n_layers();
    trace.input = x;
    trace.pre.resize(L);
    trace.post.resize(L);
    const Vec* z = &trace.input;
    for (std::size_t l = 0; l < L; ++l) {
        const Tensor& W = params.weights[l];
        const std::size_t out = W.rows(), in = W.cols();
        trace.pre[l].resize(out);
        trace.post[l].resize(out);
        for (std::size_t i = 0; i < out; ++i) {
            trace.pre[l][i] = dot(W.row(i), z->data(), in) + params.biases[l][i];
        }
        const bool last = (l == L - 1);
        for (std::size_t i = 0; i < out; ++i) {
            const double a = trace.pre[l][i];
            if (!last) {
                trace.post[l][i] = a >= 0.0 ? a : spec.leaky_slope * a;
            } else {
                trace.post[l][i] = spec.sigmoid_output ? sigmoid(a) : a;
            }
        }
        z = &trace.post[l];
    }
}

// Forward pass of a predictor: returns the raw logit plus the trace.
inline double mlp_forward(const MlpSpec& spec, const MlpParams& params, const Vec& x,
                          ForwardTrace* trace_out = nullptr) {
    spec.validate_predictor();
    ForwardTrace local;
    ForwardTrace& trace = trace_out ? *trace_out : local;
    mlp_forward_into(spec, params, x, trace);
    const double logit = trace.post.back()[0];
    if (!std::isfinite(logit)) fail(ErrorKind::NonFinite, "forward pass produced non-finite logit");
    return logit;
}

// Reverse pass. grad_out is dL/d(output). Accumulates parameter gradients into
// `grads` (which must already have the right shapes) and optionally returns
// dL/dx and the per-layer pre-activation adjoints.
struct BackpropScratch {
    std::vector<Vec> delta;  // delta[l] = dL/d pre[l]
};

inline void mlp_backward(const MlpSpec& spec, const MlpParams& params, const ForwardTrace& trace,
                         const Vec& grad_out, MlpParams* grads, Vec* grad_input,
                         BackpropScratch* scratch = nullptr) {
    const std::size_t L = spec.n_layers();
    BackpropScratch local;
    BackpropScratch& s = scratch ? *scratch : local;
    s.delta.resize(L);

    // Output layer adjoint.
    s.delta[L - 1] = grad_out;
    if (spec.sigmoid_output) {
        for (std::size_t i = 0; i < s.delta[L - 1].size(); ++i) {
            const double y = trace.post[L - 1][i];
            s.delta[L - 1][i] *= y * (1.0 - y);
        }
    }

    for (std::size_t l = L; l-- > 0;) {
        const Tensor& W = params.weights[l];
        const std::size_t out = W.rows(), in = W.cols();
        const Vec& z_prev = (l == 0) ? trace.input : trace.post[l - 1];
        if (grads) {
            Tensor& gW = grads->weights[l];
            Vec& gb = grads->biases[l];
            for (std::size_t i = 0; i < out; ++i) {
                const double d = s.delta[l][i];
                if (d != 0.0) {
                    double* grow = gW.row(i);
                    for (std::size_t j = 0; j < in; ++j) grow[j] += d * z_prev[j];
                }
                gb[i] += d;
            }
        }
        if (l == 0) {
            if (grad_input) {
                grad_input->assign(in, 0.0);
                for (std::size_t i = 0; i < out; ++i) {
                    const double d = s.delta[l][i];
                    if (d == 0.0) continue;
                    const double* wrow = W.row(i);
                    for (std::size_t j = 0; j < in; ++j) (*grad_input)[j] += d * wrow[j];
                }
            }
        } else {
            Vec& prev = s.delta[l - 1];
            prev.assign(in, 0.0);
            for (std::size_t i = 0; i < out; ++i) {
                const double d = s.delta[l][i];
                if (d == 0.0) continue;
                const double* wrow = W.row(i);
                for (std::size_t j = 0; j < in; ++j) prev[j] += d * wrow[j];
            }
            for (std::size_t j = 0; j < in; ++j) {
                prev[j] *= leaky_gate(trace.pre[l - 1][j], spec.leaky_slope);
            }
        }
    }
}

// Gradient of the logit with respect to the input, for predictors.
inline Vec input_gradient(const MlpSpec& spec, const MlpParams& params, const Vec& x) {
    spec.validate_predictor();
    ForwardTrace trace;
    mlp_forward_into(spec, params, x, trace);
    Vec g;
    mlp_backward(spec, params, trace, Vec{1.0}, nullptr, &g);
    return g;
}

// Input gradient reusing an existing trace; also exposes the adjoints, which
// the double-backprop pass below consumes.
inline Vec input_gradient_with_adjoints(const MlpSpec& spec, const MlpParams& params,
                                        const ForwardTrace& trace, BackpropScratch& scratch) {
    Vec g;
    mlp_backward(spec, params, trace, Vec{1.0}, nullptr, &g, &scratch);
    return g;
}

// Accumulates scale * d f / d theta from adjoints of a seed-1 backprop. Lets
// the training loop reuse one backward pass for both the input gradient and
// the predictive-loss parameter gradient.
inline void accumulate_param_grads_from_adjoints(const MlpSpec& spec, const ForwardTrace& trace,
                                                 const BackpropScratch& adjoints, double scale,
                                                 MlpParams& grads) {
    const std::size_t L = spec.n_layers();
    for (std::size_t l = 0; l < L; ++l) {
        const Vec& z_prev = (l == 0) ? trace.input : trace.post[l - 1];
        Tensor& gW = grads.weights[l];
        Vec& gb = grads.biases[l];
        const std::size_t out = gW.rows(), in = gW.cols();
        for (std::size_t i = 0; i < out; ++i) {
            const double d = scale * adjoints.delta[l][i];
            if (d == 0.0) continue;
            double* grow = gW.row(i);
            for (std::size_t j = 0; j < in; ++j) grow[j] += d * z_prev[j];
            gb[i] += d;
        }
    }
}

// Parameter gradient of h(theta) = r . grad_x f_theta(x), the double-backprop
// step behind the independence and on-manifold regularizers.
//
// With leaky-ReLU hidden units the input gradient inside a fixed activation
// region is g = W_1^T D_1 W_2^T D_2 ... W_L^T with D_l the activation gates of
// the x-pass, so r.g is obtained by pushing r forward through the linearized
// network (biases dropped, gates frozen):
//     t_0 = r,   t_l = D_l (W_l t_{l-1}),   h = W_L t_{L-1}.
// The gates' own dependence on theta has zero derivative almost everywhere,
// which makes d h/d W_l = delta_l t_{l-1}^T exact away from kinks, where
// delta_l are the pre-activation adjoints of the x-pass. Biases only enter
// through the gates, so d h/d b = 0.
inline void accumulate_input_grad_vjp(const MlpSpec& spec, const MlpParams& params,
                                      const ForwardTrace& trace, const BackpropScratch& adjoints,
                                      const Vec& r, double weight, MlpParams& grads) {
    const std::size_t L = spec.n_layers();
    Vec t = r;
    Vec next;
    for (std::size_t l = 0; l + 1 < L; ++l) {
        const Tensor& W = params.weights[l];
        const std::size_t out = W.rows(), in = W.cols();
        next.assign(out, 0.0);
        for (std::size_t i = 0; i < out; ++i) {
            next[i] = dot(W.row(i), t.data(), in) *
                      leaky_gate(trace.pre[l][i], spec.leaky_slope);
        }
        // d h / d W_l += weight * delta_l t_{l-1}^T
        Tensor& gW = grads.weights[l];
        for (std::size_t i = 0; i < out; ++i) {
            const double d = weight * adjoints.delta[l][i];
            if (d == 0.0) continue;
            double* grow = gW.row(i);
            for (std::size_t j = 0; j < in; ++j) grow[j] += d * t[j];
        }
        t.swap(next);
    }
    // Last layer: h = W_L t_{L-1}, single output row.
    Tensor& gW = grads.weights[L - 1];
    const std::size_t in = params.weights[L - 1].cols();
    double* grow = gW.row(0);
    for (std::size_t j = 0; j < in; ++j) grow[j] += weight * t[j];
}

} // namespace underspec
