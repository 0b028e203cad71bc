#pragma once

#include <cmath>
#include <cstddef>
#include <string>

#include "underspec/errors.hpp"
#include "underspec/manifold.hpp"
#include "underspec/tensor.hpp"

namespace underspec {

// Guard added to cosine denominators; makes the zero-gradient case well
// defined (loss ~ 0) instead of NaN. Such events are counted by callers.
constexpr double kCosineGuard = 1e-12;

enum class RegularizerMode { Soft, HardProjection };

enum class BaselineKind { None, GradL1, GradL2, SpectralDecoupling, InputDropout };

struct LossWeights {
    double lambda_indep = 0.0;
    double lambda_manifold = 0.0;
    RegularizerMode mode = RegularizerMode::Soft;
    BaselineKind baseline = BaselineKind::None;
    double baseline_weight = 0.0;  // weight of the grad-norm / spectral penalty
    double dropout_rate = 0.0;     // input dropout rate, in [0,1)

    void validate() const {
        if (!(lambda_indep >= 0.0) || !std::isfinite(lambda_indep) ||
            !(lambda_manifold >= 0.0) || !std::isfinite(lambda_manifold)) {
            fail(ErrorKind::InvalidConfig, "loss weights must be finite and nonnegative");
        }
        if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) {
            fail(ErrorKind::InvalidConfig, "dropout rate must lie in [0,1)");
        }
        if (!(baseline_weight >= 0.0) || !std::isfinite(baseline_weight)) {
            fail(ErrorKind::InvalidConfig, "baseline weight must be finite and nonnegative");
        }
    }
};

struct LossBreakdown {
    double predictive = 0.0;
    double independence = 0.0;  // includes lambda_indep and the 1/M^2 factor
    double manifold = 0.0;      // includes lambda_manifold and the 1/M factor
    double baseline = 0.0;
    std::size_t zero_grad_events = 0;

    double total() const { return predictive + independence + manifold + baseline; }
};

// Squared cosine between two gradients: the pairwise local independence loss.
inline double indep_loss(const Vec& g1, const Vec& g2) {
    if (g1.size() != g2.size()) fail(ErrorKind::ShapeMismatch, "gradient lengths differ");
    const double p = dot(g1, g2);
    const double n1 = squared_norm(g1) + kCosineGuard;
    const double n2 = squared_norm(g2) + kCosineGuard;
    return (p * p) / (n1 * n2);
}

// d indep_loss / d g1, accumulated into r1 with the given weight. Uses
//   dS/dg1 = (2p/(n1 n2)) (g2 - (p/n1) g1),  p = g1.g2, n = |g|^2 + guard.
inline void indep_loss_grad_into(const Vec& g1, const Vec& g2, double weight, Vec& r1) {
    const double p = dot(g1, g2);
    const double n1 = squared_norm(g1) + kCosineGuard;
    const double n2 = squared_norm(g2) + kCosineGuard;
    const double c = weight * 2.0 * p / (n1 * n2);
    const double c_self = -c * p / n1;
    for (std::size_t i = 0; i < g1.size(); ++i) r1[i] += c * g2[i] + c_self * g1[i];
}

// Squared distance between a gradient and its manifold projection (Eq-style
// on-manifold penalty).
inline double manifold_loss(const Vec& x, const Vec& g, const ManifoldModel& manifold) {
    Vec proj = manifold.project_vector(x, g);
    double s = 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) {
        const double e = proj[i] - g[i];
        s += e * e;
    }
    return s;
}

// Table-style baseline penalties; input dropout lives in the data path and
// contributes no penalty term.
inline double baseline_penalty(BaselineKind kind, double logit, const Vec& g) {
    switch (kind) {
        case BaselineKind::GradL1: {
            double s = 0.0;
            for (double v : g) s += std::abs(v);
            return s;
        }
        case BaselineKind::GradL2:
            return squared_norm(g);
        case BaselineKind::SpectralDecoupling:
            return logit * logit;
        default:
            return 0.0;
    }
}

// Numerically stable binary cross-entropy of a logit: softplus(f) - y*f.
inline double bce_logit(double y, double logit) {
    const double softplus = std::max(logit, 0.0) + std::log1p(std::exp(-std::abs(logit)));
    return softplus - y * logit;
}

inline std::string baseline_name(BaselineKind k) {
    switch (k) {
        case BaselineKind::None: return "none";
        case BaselineKind::GradL1: return "grad_l1";
        case BaselineKind::GradL2: return "grad_l2";
        case BaselineKind::SpectralDecoupling: return "spectral_decoupling";
        case BaselineKind::InputDropout: return "input_dropout";
    }
    return "none";
}

inline BaselineKind baseline_from_name(const std::string& s) {
    if (s == "none") return BaselineKind::None;
    if (s == "grad_l1") return BaselineKind::GradL1;
    if (s == "grad_l2") return BaselineKind::GradL2;
    if (s == "spectral_decoupling") return BaselineKind::SpectralDecoupling;
    if (s == "input_dropout") return BaselineKind::InputDropout;
    fail(ErrorKind::InvalidConfig, "unknown baseline kind: " + s);
}

} // namespace underspec
