#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "underspec/adam.hpp"
#include "underspec/dataset.hpp"
#include "underspec/errors.hpp"
#include "underspec/io.hpp"
#include "underspec/losses.hpp"
#include "underspec/manifold.hpp"
#include "underspec/mlp.hpp"
#include "underspec/rng.hpp"
#include "underspec/tensor.hpp"

namespace underspec {

struct TrainConfig {
    std::size_t n_models = 8;
    MlpSpec spec;
    LossWeights weights;
    double lr = 0.002;
    std::size_t batch_size = 256;
    std::size_t n_updates = 10000;
    std::uint64_t seed = 1;
    double eps_tr = 0.2;   // convergence thresholds on predictive risk
    double eps_val = 0.2;

    void validate() const {
        if (n_models < 1) fail(ErrorKind::InvalidConfig, "need at least one model");
        if (batch_size < 1) fail(ErrorKind::InvalidConfig, "batch_size must be positive");
        if (!(eps_tr > 0.0) || !(eps_val > 0.0)) {
            fail(ErrorKind::InvalidConfig, "convergence thresholds must be positive");
        }
        spec.validate_predictor();
        weights.validate();
    }
};

struct ModelSet {
    MlpSpec spec;
    std::vector<MlpParams> params;

    std::size_t size() const { return params.size(); }

    void validate() const {
        spec.validate_predictor();
        for (const auto& p : params) p.check_matches(spec);
    }
};

struct ConvergenceRow {
    std::size_t model = 0;
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
};

using ConvergenceLog = std::vector<ConvergenceRow>;

namespace detail {

template <typename F>
void parallel_over_models(std::size_t n_models, std::size_t n_workers, F&& fn) {
    if (n_workers <= 1 || n_models <= 1) {
        for (std::size_t m = 0; m < n_models; ++m) fn(m);
        return;
    }
    const std::size_t workers = std::min(n_workers, n_models);
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&, w]() {
            for (std::size_t m = w; m < n_models; m += workers) fn(m);
        });
    }
    for (auto& t : pool) t.join();
}

// Per-sample context shared by the gradient passes of one AE manifold: the
// point traces do not depend on the predictor, so they are built once per
// sample and reused by every model.
struct AeContext {
    ForwardTrace enc;
    ForwardTrace dec;
    bool ready = false;

    void build(const AeModel& model, const Vec& x) {
        mlp_forward_into(model.enc_spec, model.enc, x, enc);
        Vec z(enc.post.back().begin(), enc.post.back().begin() + model.d_latent);
        mlp_forward_into(model.dec_spec, model.dec, z, dec);
        ready = true;
    }

    Vec push(const AeModel& model, const Vec& v) const {
        Vec vz = mlp_push_vector(model.enc_spec, model.enc, enc, v);
        vz.resize(model.d_latent);
        return mlp_push_vector(model.dec_spec, model.dec, dec, vz);
    }

    // J(x)^T u: reverse through decoder then encoder with frozen gates.
    Vec pull(const AeModel& model, const Vec& u) const {
        Vec uz;
        mlp_backward(model.dec_spec, model.dec, dec, u, nullptr, &uz);
        Vec padded(model.enc_spec.d_out(), 0.0);
        std::copy(uz.begin(), uz.end(), padded.begin());
        Vec out;
        mlp_backward(model.enc_spec, model.enc, enc, padded, nullptr, &out);
        return out;
    }
};

struct PerModelScratch {
    std::vector<ForwardTrace> traces;
    std::vector<BackpropScratch> adjoints;
    std::vector<Vec> grad_x;      // input gradients per sample
    std::vector<Vec> proj_grad;   // projected gradients (hard mode)
    std::vector<Vec> r;           // d loss / d grad_x per sample
    Vec logits;
    Vec dropped;                  // scratch input when dropout is active

    LossBreakdown part;
};

struct BatchWorkspace {
    std::vector<PerModelScratch> per_model;
    std::vector<AeContext> ae_ctx;  // per sample, AE manifolds only
};

} // namespace detail

// Computes the averaged multi-model objective on the given rows:
//   (1/n) sum_i [ (1/M) sum_m BCE
//               + (lambda_i/M^2) sum_{m1 != m2} cos^2(g_m1, g_m2)
//               + (lambda_m/M)   sum_m |proj(x, g_m) - g_m|^2      (soft mode)
//               + (w_b/M)        sum_m penalty ]
// In hard-projection mode the cosine is taken between projected gradients and
// the manifold term is dropped. When `grads` is non-null, exact parameter
// gradients (including the second-order terms through g = grad_x f) are
// accumulated per model.
inline LossBreakdown compute_batch_objective(
    const MlpSpec& spec, const std::vector<MlpParams>& models, const Tensor& inputs,
    const std::vector<std::uint8_t>& labels, const std::vector<std::size_t>& rows,
    const ManifoldModel* manifold, const LossWeights& weights,
    std::vector<MlpParams>* grads, std::vector<Rng>* dropout_rngs, std::size_t n_workers,
    detail::BatchWorkspace* workspace = nullptr) {
    weights.validate();
    const std::size_t M = models.size();
    const std::size_t n = rows.size();
    const std::size_t d = inputs.cols();
    if (M == 0) fail(ErrorKind::InvalidConfig, "empty model set");
    if (n == 0) fail(ErrorKind::InvalidConfig, "empty batch");

    const bool hard = weights.mode == RegularizerMode::HardProjection;
    const bool want_indep = weights.lambda_indep > 0.0 && M > 1;
    const bool want_manifold = !hard && weights.lambda_manifold > 0.0;
    const bool grad_penalty = weights.baseline == BaselineKind::GradL1 ||
                              weights.baseline == BaselineKind::GradL2;
    const bool spectral = weights.baseline == BaselineKind::SpectralDecoupling;
    const bool dropout = weights.baseline == BaselineKind::InputDropout &&
                         weights.dropout_rate > 0.0 && dropout_rngs != nullptr;
    const bool need_g = want_indep || want_manifold || grad_penalty || hard;
    if ((want_manifold || hard) && manifold == nullptr) {
        fail(ErrorKind::InvalidConfig, "manifold model required by the loss configuration");
    }

    const double inv_n = 1.0 / static_cast<double>(n);
    const double inv_nM = inv_n / static_cast<double>(M);
    const double w_pair = weights.lambda_indep * inv_n / static_cast<double>(M * M);
    const double w_mani = weights.lambda_manifold * inv_nM;
    const double w_base = weights.baseline_weight * inv_nM;

    detail::BatchWorkspace local_ws;
    detail::BatchWorkspace& ws = workspace ? *workspace : local_ws;
    ws.per_model.resize(M);

    const bool ae_manifold = manifold && manifold->kind == ManifoldKind::Ae &&
                             (want_manifold || hard);
    if (ae_manifold && !dropout) {
        // Point traces shared across models; with dropout each model sees its
        // own input so the shared cache is skipped.
        ws.ae_ctx.resize(n);
        for (std::size_t i = 0; i < n; ++i) {
            const double* row = inputs.row(rows[i]);
            Vec x(row, row + d);
            ws.ae_ctx[i].build(manifold->ae, x);
        }
    }

    // Phase A: forwards, seed-1 adjoints, input gradients.
    detail::parallel_over_models(M, n_workers, [&](std::size_t m) {
        auto& S = ws.per_model[m];
        S.part = LossBreakdown{};
        S.traces.resize(n);
        S.logits.resize(n);
        if (need_g || grads) {
            S.adjoints.resize(n);
            S.grad_x.resize(n);
        }
        for (std::size_t i = 0; i < n; ++i) {
            const double* row = inputs.row(rows[i]);
            const Vec* x_ptr;
            if (dropout) {
                S.dropped.assign(row, row + d);
                Rng& rng = (*dropout_rngs)[m];
                const double keep_scale = 1.0 / (1.0 - weights.dropout_rate);
                for (std::size_t j = 0; j < d; ++j) {
                    S.dropped[j] = rng.bernoulli(weights.dropout_rate) ? 0.0 : S.dropped[j] * keep_scale;
                }
                x_ptr = &S.dropped;
            } else {
                static thread_local Vec x_local;
                x_local.assign(row, row + d);
                x_ptr = &x_local;
            }
            mlp_forward_into(spec, models[m], *x_ptr, S.traces[i]);
            S.logits[i] = S.traces[i].post.back()[0];
            if (need_g || grads) {
                mlp_backward(spec, models[m], S.traces[i], Vec{1.0}, nullptr, &S.grad_x[i],
                             &S.adjoints[i]);
            }
        }
        if (hard) {
            S.proj_grad.resize(n);
            for (std::size_t i = 0; i < n; ++i) {
                if (manifold->kind == ManifoldKind::Pca) {
                    S.proj_grad[i] = pca_project_vector(manifold->pca, S.grad_x[i]);
                } else {
                    S.proj_grad[i] = ws.ae_ctx.empty()
                                         ? ae_project_vector(manifold->ae, S.traces[i].input, S.grad_x[i])
                                         : ws.ae_ctx[i].push(manifold->ae, S.grad_x[i]);
                }
            }
        }
    });

    // Phase B: per-model loss terms and d loss / d g. Ordered pairs are
    // attributed to their first index so each is counted exactly once.
    detail::parallel_over_models(M, n_workers, [&](std::size_t m) {
        auto& S = ws.per_model[m];
        if (grads && need_g) {
            S.r.resize(n);
            for (std::size_t i = 0; i < n; ++i) S.r[i].assign(d, 0.0);
        }
        for (std::size_t i = 0; i < n; ++i) {
            const double y = static_cast<double>(labels[rows[i]]);
            S.part.predictive += inv_nM * bce_logit(y, S.logits[i]);

            if (!need_g) continue;
            const Vec& g = hard ? S.proj_grad[i] : S.grad_x[i];
            if (squared_norm(S.grad_x[i]) < kCosineGuard) S.part.zero_grad_events += 1;

            if (want_indep) {
                Vec* r_h = nullptr;
                static thread_local Vec r_hard;
                if (grads && hard) {
                    r_hard.assign(d, 0.0);
                    r_h = &r_hard;
                }
                for (std::size_t m2 = 0; m2 < M; ++m2) {
                    if (m2 == m) continue;
                    const Vec& g2 = hard ? ws.per_model[m2].proj_grad[i] : ws.per_model[m2].grad_x[i];
                    S.part.independence += w_pair * indep_loss(g, g2);
                    if (grads) {
                        // Both ordered pairs (m,m2) and (m2,m) differentiate to the
                        // same thing w.r.t. g_m, hence the factor 2.
                        indep_loss_grad_into(g, g2, 2.0 * w_pair, r_h ? *r_h : S.r[i]);
                    }
                }
                if (grads && hard) {
                    // Pull the h-space gradient back through the projection.
                    if (manifold->kind == ManifoldKind::Pca) {
                        Vec back = pca_project_vector(manifold->pca, *r_h);
                        axpy(1.0, back, S.r[i]);
                    } else if (!ws.ae_ctx.empty()) {
                        axpy(1.0, ws.ae_ctx[i].pull(manifold->ae, *r_h), S.r[i]);
                    } else {
                        detail::AeContext ctx;
                        ctx.build(manifold->ae, S.traces[i].input);
                        axpy(1.0, ctx.pull(manifold->ae, *r_h), S.r[i]);
                    }
                }
            }

            if (want_manifold) {
                detail::AeContext local_ctx;
                const detail::AeContext* ctx = nullptr;
                if (manifold->kind == ManifoldKind::Ae) {
                    if (!ws.ae_ctx.empty()) {
                        ctx = &ws.ae_ctx[i];
                    } else {
                        local_ctx.build(manifold->ae, S.traces[i].input);
                        ctx = &local_ctx;
                    }
                }
                Vec proj = manifold->kind == ManifoldKind::Pca
                               ? pca_project_vector(manifold->pca, S.grad_x[i])
                               : ctx->push(manifold->ae, S.grad_x[i]);
                Vec e(d);
                double dist = 0.0;
                for (std::size_t j = 0; j < d; ++j) {
                    e[j] = proj[j] - S.grad_x[i][j];
                    dist += e[j] * e[j];
                }
                S.part.manifold += w_mani * dist;
                if (grads) {
                    // d|e|^2/dg = 2 (P^T e - e).
                    Vec pe = manifold->kind == ManifoldKind::Pca
                                 ? pca_project_vector(manifold->pca, e)
                                 : ctx->pull(manifold->ae, e);
                    for (std::size_t j = 0; j < d; ++j) {
                        S.r[i][j] += 2.0 * w_mani * (pe[j] - e[j]);
                    }
                }
            }

            if (grad_penalty) {
                S.part.baseline += w_base * baseline_penalty(weights.baseline, S.logits[i], S.grad_x[i]);
                if (grads) {
                    if (weights.baseline == BaselineKind::GradL1) {
                        for (std::size_t j = 0; j < d; ++j) {
                            const double v = S.grad_x[i][j];
                            S.r[i][j] += w_base * (v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0));
                        }
                    } else {
                        axpy(2.0 * w_base, S.grad_x[i], S.r[i]);
                    }
                }
            }
        }
        if (spectral) {
            for (std::size_t i = 0; i < n; ++i) {
                S.part.baseline += w_base * S.logits[i] * S.logits[i];
            }
        }
    });

    // Phase C: parameter gradients.
    if (grads) {
        if (grads->size() != M) fail(ErrorKind::ShapeMismatch, "gradient buffer count != M");
        detail::parallel_over_models(M, n_workers, [&](std::size_t m) {
            auto& S = ws.per_model[m];
            MlpParams& gm = (*grads)[m];
            for (std::size_t i = 0; i < n; ++i) {
                const double y = static_cast<double>(labels[rows[i]]);
                double seed = (sigmoid(S.logits[i]) - y) * inv_nM;
                if (spectral) seed += 2.0 * w_base * S.logits[i];
                accumulate_param_grads_from_adjoints(spec, S.traces[i], S.adjoints[i], seed, gm);
                if (need_g && !S.r[i].empty()) {
                    accumulate_input_grad_vjp(spec, models[m], S.traces[i], S.adjoints[i], S.r[i],
                                              1.0, gm);
                }
            }
        });
    }

    LossBreakdown total;
    for (const auto& S : ws.per_model) {
        total.predictive += S.part.predictive;
        total.independence += S.part.independence;
        total.manifold += S.part.manifold;
        total.baseline += S.part.baseline;
        total.zero_grad_events += S.part.zero_grad_events;
    }
    if (!std::isfinite(total.total())) {
        std::string which = !std::isfinite(total.predictive)    ? "predictive"
                            : !std::isfinite(total.independence) ? "independence"
                            : !std::isfinite(total.manifold)     ? "manifold"
                                                                 : "baseline";
        fail(ErrorKind::NonFinite, "loss term '" + which + "' diverged");
    }
    return total;
}

// Objective value only (no dropout stream, deterministic).
inline std::pair<double, LossBreakdown> batch_loss(const ModelSet& models, const Batch& batch,
                                                   const ManifoldModel* manifold,
                                                   const LossWeights& weights,
                                                   std::size_t n_workers = 1) {
    batch.validate();
    std::vector<std::size_t> rows(batch.size());
    for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
    LossBreakdown b = compute_batch_objective(models.spec, models.params, batch.inputs,
                                              batch.labels, rows, manifold, weights, nullptr,
                                              nullptr, n_workers);
    return {b.total(), b};
}

// Exact parameter gradients of the full objective for every model.
inline std::pair<std::vector<MlpParams>, LossBreakdown> param_gradient(
    const MlpSpec& spec, const std::vector<MlpParams>& models, const Batch& batch,
    const ManifoldModel* manifold, const LossWeights& weights, std::size_t n_workers = 1) {
    batch.validate();
    std::vector<std::size_t> rows(batch.size());
    for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
    std::vector<MlpParams> grads;
    grads.reserve(models.size());
    for (std::size_t m = 0; m < models.size(); ++m) grads.push_back(MlpParams::zeros(spec));
    LossBreakdown b = compute_batch_objective(spec, models, batch.inputs, batch.labels, rows,
                                              manifold, weights, &grads, nullptr, n_workers);
    return {std::move(grads), b};
}

// Mean predictive risk (BCE of the logit) of one model on (a subset of) a set.
inline double mean_predictive_risk(const MlpSpec& spec, const MlpParams& params,
                                   const Tensor& inputs, const std::vector<std::uint8_t>& labels,
                                   std::size_t limit = 0) {
    const std::size_t n = limit > 0 ? std::min(limit, inputs.rows()) : inputs.rows();
    if (n == 0) fail(ErrorKind::InvalidConfig, "empty evaluation set");
    ForwardTrace trace;
    Vec x(inputs.cols());
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double* row = inputs.row(i);
        x.assign(row, row + inputs.cols());
        mlp_forward_into(spec, params, x, trace);
        s += bce_logit(static_cast<double>(labels[i]), trace.post.back()[0]);
    }
    return s / static_cast<double>(n);
}

struct TrainResult {
    ModelSet models;
    ConvergenceLog log;
    LossBreakdown final_breakdown;
};

// Trains M predictors jointly on shared minibatches with the combined
// objective. Deterministic for a given seed and any worker count: each model's
// accumulations are sequential and cross-model reductions run in model order.
inline TrainResult train_models(const TrainConfig& cfg, const Batch& train, const Batch& val,
                                const ManifoldModel* manifold, std::size_t n_workers = 1,
                                const ModelSet* initial = nullptr) {
    cfg.validate();
    train.validate();
    val.validate();
    if (train.size() == 0) fail(ErrorKind::InvalidConfig, "empty training set");
    if (manifold && manifold->d_in() != train.d_in()) {
        fail(ErrorKind::ShapeMismatch, "manifold dimensionality does not match data");
    }
    if (train.d_in() != cfg.spec.d_in()) {
        fail(ErrorKind::ShapeMismatch, "spec d_in does not match data");
    }

    const std::size_t M = cfg.n_models;
    TrainResult result;
    result.models.spec = cfg.spec;
    if (initial) {
        if (initial->size() != M) fail(ErrorKind::InvalidConfig, "initial model count != M");
        initial->validate();
        result.models.params = initial->params;
    } else {
        for (std::size_t m = 0; m < M; ++m) {
            result.models.params.push_back(
                init_params(cfg.spec, derive_seed(cfg.seed, "model-init", m)));
        }
    }

    std::vector<AdamState> opt;
    for (std::size_t m = 0; m < M; ++m) opt.push_back(AdamState::init(cfg.spec, cfg.lr));

    std::vector<Rng> dropout_rngs;
    if (cfg.weights.baseline == BaselineKind::InputDropout) {
        for (std::size_t m = 0; m < M; ++m) {
            dropout_rngs.emplace_back(derive_seed(cfg.seed, "dropout", m));
        }
    }

    const std::size_t n = train.size();
    const std::size_t bs = std::min(cfg.batch_size, n);
    const std::size_t updates_per_epoch = std::max<std::size_t>(1, n / bs);
    const std::size_t total_epochs = std::max<std::size_t>(1, cfg.n_updates / updates_per_epoch);
    const std::size_t log_stride = std::max<std::size_t>(1, total_epochs / 50);
    const std::size_t eval_limit = 4096;

    Rng order_rng(derive_seed(cfg.seed, "batches"));
    std::vector<std::size_t> perm(n);
    for (std::size_t i = 0; i < n; ++i) perm[i] = i;
    order_rng.shuffle(perm);
    std::size_t cursor = 0;
    std::size_t epoch = 0;

    std::vector<MlpParams> grads;
    for (std::size_t m = 0; m < M; ++m) grads.push_back(MlpParams::zeros(cfg.spec));
    std::vector<std::size_t> rows(bs);
    detail::BatchWorkspace workspace;

    auto log_epoch = [&](std::size_t e) {
        for (std::size_t m = 0; m < M; ++m) {
            ConvergenceRow row;
            row.model = m;
            row.epoch = e;
            row.train_loss = mean_predictive_risk(cfg.spec, result.models.params[m], train.inputs,
                                                  train.labels, eval_limit);
            row.val_loss = mean_predictive_risk(cfg.spec, result.models.params[m], val.inputs,
                                                val.labels, eval_limit);
            result.log.push_back(row);
        }
    };

    for (std::size_t update = 0; update < cfg.n_updates; ++update) {
        if (cursor + bs > n) {
            order_rng.shuffle(perm);
            cursor = 0;
            epoch += 1;
            if (epoch % log_stride == 0) log_epoch(epoch);
        }
        for (std::size_t i = 0; i < bs; ++i) rows[i] = perm[cursor + i];
        cursor += bs;

        for (auto& g : grads) {
            for (auto& w : g.weights) std::fill(w.data.begin(), w.data.end(), 0.0);
            for (auto& b : g.biases) std::fill(b.begin(), b.end(), 0.0);
        }
        result.final_breakdown = compute_batch_objective(
            cfg.spec, result.models.params, train.inputs, train.labels, rows, manifold,
            cfg.weights, &grads, dropout_rngs.empty() ? nullptr : &dropout_rngs, n_workers,
            &workspace);

        // The optimizer sees M * dL/dtheta_m. Constant gradient scaling is a
        // no-op under Adam's normalization except through eps, and it makes a
        // lambda=0 run reproduce single-model ERM trajectories bit for bit.
        detail::parallel_over_models(M, n_workers, [&](std::size_t m) {
            if (M > 1) grads[m].scale(static_cast<double>(M));
            adam_step(opt[m], result.models.params[m], grads[m]);
        });
    }
    log_epoch(epoch + 1);
    return result;
}

// ---------------------------------------------------------------------------
// Model-set file ("UDM2") and convergence CSV
// ---------------------------------------------------------------------------

inline void save_model_set(const ModelSet& models, const std::string& path) {
    models.validate();
    auto f = io::open_out(path);
    io::write_magic(f, "UDM2");
    io::write_pod<std::uint32_t>(f, static_cast<std::uint32_t>(models.size()));
    io::write_pod<std::uint32_t>(f, static_cast<std::uint32_t>(models.spec.layer_widths.size()));
    for (std::size_t w : models.spec.layer_widths) {
        io::write_pod<std::uint32_t>(f, static_cast<std::uint32_t>(w));
    }
    io::write_pod<double>(f, models.spec.leaky_slope);
    for (const auto& p : models.params) {
        for (std::size_t l = 0; l < p.weights.size(); ++l) {
            io::write_array(f, p.weights[l].data.data(), p.weights[l].data.size());
            io::write_array(f, p.biases[l].data(), p.biases[l].size());
        }
    }
    if (!f) fail(ErrorKind::FileError, "write failed: " + path);
}

inline ModelSet load_model_set(const std::string& path) {
    auto f = io::open_in(path);
    io::expect_magic(f, "UDM2", path);
    const auto M = io::read_pod<std::uint32_t>(f, "model count");
    const auto n_widths = io::read_pod<std::uint32_t>(f, "width count");
    if (n_widths < 2 || n_widths > 64) fail(ErrorKind::DimensionMismatch, "bad spec in " + path);
    ModelSet set;
    for (std::uint32_t i = 0; i < n_widths; ++i) {
        set.spec.layer_widths.push_back(io::read_pod<std::uint32_t>(f, "width"));
    }
    set.spec.leaky_slope = io::read_pod<double>(f, "slope");
    set.spec.validate_predictor();
    for (std::uint32_t m = 0; m < M; ++m) {
        MlpParams p = MlpParams::zeros(set.spec);
        for (std::size_t l = 0; l < p.weights.size(); ++l) {
            io::read_array(f, p.weights[l].data.data(), p.weights[l].data.size(), path);
            io::read_array(f, p.biases[l].data(), p.biases[l].size(), path);
        }
        set.params.push_back(std::move(p));
    }
    return set;
}

inline void save_convergence_csv(const ConvergenceLog& log, const std::string& path) {
    auto f = io::open_out(path);
    f << "model,epoch,train_loss,val_loss\n";
    f.precision(17);
    for (const auto& row : log) {
        f << row.model << "," << row.epoch << "," << row.train_loss << "," << row.val_loss << "\n";
    }
    if (!f) fail(ErrorKind::FileError, "write failed: " + path);
}

} // namespace underspec
