#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "underspec/dataset.hpp"
#include "underspec/errors.hpp"
#include "underspec/losses.hpp"
#include "underspec/mlp.hpp"
#include "underspec/tensor.hpp"
#include "underspec/training.hpp"

namespace underspec {

// Binary prediction: round(sigmoid(logit)); a zero logit predicts class 1.
inline int predict(double logit) { return logit >= 0.0 ? 1 : 0; }

inline double accuracy(const MlpSpec& spec, const MlpParams& params, const Batch& batch) {
    batch.validate();
    if (batch.size() == 0) fail(ErrorKind::InvalidConfig, "accuracy of an empty batch");
    ForwardTrace trace;
    Vec x(batch.d_in());
    std::size_t hits = 0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const double* row = batch.inputs.row(i);
        x.assign(row, row + batch.d_in());
        mlp_forward_into(spec, params, x, trace);
        hits += predict(trace.post.back()[0]) == static_cast<int>(batch.labels[i]) ? 1 : 0;
    }
    return static_cast<double>(hits) / static_cast<double>(batch.size());
}

// Fraction of pool points where two models' rounded predictions differ.
inline double disagreement_rate(const MlpSpec& spec, const MlpParams& a, const MlpParams& b,
                                const Tensor& pool) {
    if (pool.rows() == 0) fail(ErrorKind::InvalidConfig, "disagreement on an empty pool");
    ForwardTrace trace;
    Vec x(pool.cols());
    std::size_t diff = 0;
    for (std::size_t i = 0; i < pool.rows(); ++i) {
        const double* row = pool.row(i);
        x.assign(row, row + pool.cols());
        mlp_forward_into(spec, a, x, trace);
        const int pa = predict(trace.post.back()[0]);
        mlp_forward_into(spec, b, x, trace);
        if (pa != predict(trace.post.back()[0])) ++diff;
    }
    return static_cast<double>(diff) / static_cast<double>(pool.rows());
}

// Mutual information proxy of two input gradients under small Gaussian input
// perturbations: -1/2 ln(1 - cos^2). The guard keeps parallel gradients
// finite (~13.8); callers treat values near that ceiling as saturated.
inline double gradient_mi(const Vec& g1, const Vec& g2) {
    return -0.5 * std::log(1.0 - indep_loss(g1, g2) + 1e-12);
}

namespace detail {

// Mid-rank tied ranking of |values|.
inline Vec abs_ranks(const Vec& v) {
    const std::size_t n = v.size();
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return std::abs(v[a]) < std::abs(v[b]);
    });
    Vec ranks(n);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && std::abs(v[order[j + 1]]) == std::abs(v[order[i]])) ++j;
        const double mid = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = mid;
        i = j + 1;
    }
    return ranks;
}

inline double pearson(const Vec& a, const Vec& b) {
    const double n = static_cast<double>(a.size());
    double ma = 0.0, mb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= n;
    mb /= n;
    double cov = 0.0, va = 0.0, vb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        cov += (a[i] - ma) * (b[i] - mb);
        va += (a[i] - ma) * (a[i] - ma);
        vb += (b[i] - mb) * (b[i] - mb);
    }
    if (va <= 0.0 || vb <= 0.0) return std::numeric_limits<double>::quiet_NaN();
    return cov / std::sqrt(va * vb);
}

} // namespace detail

struct SpearmanResult {
    double mean_rho = 0.0;
    std::size_t points_used = 0;
    std::size_t points_skipped = 0;  // constant gradients have undefined ranks
};

// Average pairwise Spearman rank correlation of input-gradient magnitudes
// across models, over the given sample of points.
inline SpearmanResult spearman_grad_corr(const ModelSet& models, const Tensor& sample) {
    models.validate();
    if (models.size() < 2) fail(ErrorKind::InvalidConfig, "need at least two models");
    if (sample.rows() == 0) fail(ErrorKind::InvalidConfig, "empty sample");
    const std::size_t M = models.size(), d = sample.cols();
    SpearmanResult res;
    double acc = 0.0;
    std::size_t terms = 0;
    Vec x(d);
    std::vector<Vec> ranks(M);
    for (std::size_t i = 0; i < sample.rows(); ++i) {
        const double* row = sample.row(i);
        x.assign(row, row + d);
        bool degenerate = false;
        for (std::size_t m = 0; m < M; ++m) {
            Vec g = input_gradient(models.spec, models.params[m], x);
            double lo = std::abs(g[0]), hi = std::abs(g[0]);
            for (double v : g) {
                lo = std::min(lo, std::abs(v));
                hi = std::max(hi, std::abs(v));
            }
            if (hi == lo) {
                degenerate = true;
                break;
            }
            ranks[m] = detail::abs_ranks(g);
        }
        if (degenerate) {
            res.points_skipped += 1;
            continue;
        }
        res.points_used += 1;
        for (std::size_t m1 = 0; m1 < M; ++m1) {
            for (std::size_t m2 = m1 + 1; m2 < M; ++m2) {
                const double rho = detail::pearson(ranks[m1], ranks[m2]);
                if (std::isfinite(rho)) {
                    acc += rho;
                    ++terms;
                }
            }
        }
    }
    res.mean_rho = terms > 0 ? acc / static_cast<double>(terms) : 0.0;
    return res;
}

struct BestModelMatrix {
    Tensor matrix;                    // row r: accuracies across all sets of the model best on set r
    std::vector<std::size_t> best_model;  // per set
    Tensor full;                      // all models x all sets
};

inline BestModelMatrix best_model_matrix(const ModelSet& models,
                                         const std::vector<Batch>& test_sets) {
    if (test_sets.empty()) fail(ErrorKind::InvalidConfig, "no test sets");
    const std::size_t M = models.size(), T = test_sets.size();
    BestModelMatrix out;
    out.full = Tensor({M, T});
    for (std::size_t m = 0; m < M; ++m) {
        for (std::size_t t = 0; t < T; ++t) {
            out.full.at(m, t) = accuracy(models.spec, models.params[m], test_sets[t]);
        }
    }
    out.matrix = Tensor({T, T});
    out.best_model.resize(T);
    for (std::size_t t = 0; t < T; ++t) {
        std::size_t best = 0;
        for (std::size_t m = 1; m < M; ++m) {
            if (out.full.at(m, t) > out.full.at(best, t)) best = m;
        }
        out.best_model[t] = best;
        for (std::size_t t2 = 0; t2 < T; ++t2) out.matrix.at(t, t2) = out.full.at(best, t2);
    }
    return out;
}

// Definition-style underspecification proxy: how many models clear both risk
// thresholds, and whether the converged ones actually disagree out of
// distribution.
struct UnderspecReport {
    std::size_t n_converged = 0;
    std::vector<std::size_t> converged;  // model indices
    Tensor disagreement;                 // pairwise, over converged models
    double min_disagreement = 0.0;
    double mean_disagreement = 0.0;
    bool distinct = false;               // all pairwise disagreements >= delta
    double eps_tr = 0.0, eps_val = 0.0, delta = 0.0;
    Vec train_risk;                      // per model
    Vec val_risk;
};

inline UnderspecReport underspec_report(const ModelSet& models, const Batch& train,
                                        const Batch& val, const Tensor& pool, double eps_tr,
                                        double eps_val, double delta) {
    if (!(eps_tr > 0.0) || !(eps_val > 0.0)) {
        fail(ErrorKind::InvalidConfig, "thresholds must be positive");
    }
    UnderspecReport rep;
    rep.eps_tr = eps_tr;
    rep.eps_val = eps_val;
    rep.delta = delta;
    for (std::size_t m = 0; m < models.size(); ++m) {
        rep.train_risk.push_back(
            mean_predictive_risk(models.spec, models.params[m], train.inputs, train.labels));
        rep.val_risk.push_back(
            mean_predictive_risk(models.spec, models.params[m], val.inputs, val.labels));
        if (rep.train_risk.back() < eps_tr && rep.val_risk.back() < eps_val) {
            rep.converged.push_back(m);
        }
    }
    rep.n_converged = rep.converged.size();
    const std::size_t C = rep.n_converged;
    rep.disagreement = Tensor({C, C});
    if (C >= 2) {
        double sum = 0.0, mn = 1.0;
        std::size_t pairs = 0;
        for (std::size_t a = 0; a < C; ++a) {
            for (std::size_t b = a + 1; b < C; ++b) {
                const double dg = disagreement_rate(models.spec, models.params[rep.converged[a]],
                                                    models.params[rep.converged[b]], pool);
                rep.disagreement.at(a, b) = dg;
                rep.disagreement.at(b, a) = dg;
                sum += dg;
                mn = std::min(mn, dg);
                ++pairs;
            }
        }
        rep.min_disagreement = mn;
        rep.mean_disagreement = sum / static_cast<double>(pairs);
        rep.distinct = mn >= delta;
    }
    return rep;
}

// Mean |gradient| mass per tile for each model; the tabular stand-in for the
// paper-style gradient heatmap inspection.
inline Tensor gradient_tile_mass(const ModelSet& models, const Tensor& sample,
                                 std::size_t n_tiles) {
    const std::size_t M = models.size(), d = sample.cols();
    if (n_tiles == 0 || d % n_tiles != 0) fail(ErrorKind::InvalidConfig, "bad tile count");
    const std::size_t tile_dim = d / n_tiles;
    Tensor mass({M, n_tiles});
    Vec x(d);
    const std::size_t n = std::min<std::size_t>(sample.rows(), 256);
    for (std::size_t i = 0; i < n; ++i) {
        const double* row = sample.row(i);
        x.assign(row, row + d);
        for (std::size_t m = 0; m < M; ++m) {
            Vec g = input_gradient(models.spec, models.params[m], x);
            for (std::size_t t = 0; t < n_tiles; ++t) {
                double s = 0.0;
                for (std::size_t j = 0; j < tile_dim; ++j) s += std::abs(g[t * tile_dim + j]);
                mass.at(m, t) += s;
            }
        }
    }
    // Normalize rows to fractions.
    for (std::size_t m = 0; m < M; ++m) {
        double total = 0.0;
        for (std::size_t t = 0; t < n_tiles; ++t) total += mass.at(m, t);
        if (total > 0.0) {
            for (std::size_t t = 0; t < n_tiles; ++t) mass.at(m, t) /= total;
        }
    }
    return mass;
}

} // namespace underspec
