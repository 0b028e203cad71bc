#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iostream>
#include <string>
#include <vector>

#include "underspec/adam.hpp"
#include "underspec/dataset.hpp"
#include "underspec/errors.hpp"
#include "underspec/io.hpp"
#include "underspec/losses.hpp"
#include "underspec/mlp.hpp"
#include "underspec/rng.hpp"
#include "underspec/tensor.hpp"
#include "underspec/training.hpp"

namespace underspec {

// Per-instance, per-model binary element masks. For every (instance, element)
// exactly one model holds the bit: the one with the largest input-gradient
// magnitude there.
struct MaskSet {
    std::size_t n_instances = 0;
    std::size_t n_models = 0;
    std::size_t d_in = 0;
    std::vector<std::uint8_t> bits;  // [instance][model][element]

    std::uint8_t get(std::size_t i, std::size_t m, std::size_t e) const {
        return bits[(i * n_models + m) * d_in + e];
    }
    void set(std::size_t i, std::size_t m, std::size_t e, std::uint8_t v) {
        bits[(i * n_models + m) * d_in + e] = v;
    }

    // The mask of one model across all instances, as an n x d_in byte grid.
    std::vector<std::uint8_t> model_rows(std::size_t m) const {
        std::vector<std::uint8_t> out(n_instances * d_in);
        for (std::size_t i = 0; i < n_instances; ++i)
            for (std::size_t e = 0; e < d_in; ++e) out[i * d_in + e] = get(i, m, e);
        return out;
    }
};

// Element-wise argmax of |grad f_m| per instance; ties go to the lowest model
// index. Computed once, before any fine-tuning.
inline MaskSet compute_masks(const ModelSet& models, const Batch& data,
                             std::size_t n_workers = 1) {
    models.validate();
    data.validate();
    if (models.size() == 0) fail(ErrorKind::InvalidConfig, "empty model set");
    const std::size_t M = models.size(), n = data.size(), d = data.d_in();
    MaskSet masks;
    masks.n_instances = n;
    masks.n_models = M;
    masks.d_in = d;
    masks.bits.assign(n * M * d, 0);

    Vec x(d);
    std::vector<Vec> grads(M);
    for (std::size_t i = 0; i < n; ++i) {
        const double* row = data.inputs.row(i);
        x.assign(row, row + d);
        detail::parallel_over_models(M, n_workers, [&](std::size_t m) {
            grads[m] = input_gradient(models.spec, models.params[m], x);
        });
        for (std::size_t e = 0; e < d; ++e) {
            std::size_t best = 0;
            double best_mag = std::abs(grads[0][e]);
            for (std::size_t m = 1; m < M; ++m) {
                const double mag = std::abs(grads[m][e]);
                if (mag > best_mag) {
                    best_mag = mag;
                    best = m;
                }
            }
            masks.set(i, best, e, 1);
        }
    }
    return masks;
}

// Replaces masked elements with the same element from another instance of the
// group, drawn as a uniform per-column permutation of the group's rows
// (derangement not required, so a row may keep its own value by chance). A
// fully masked column is therefore an exact value permutation. `mask_rows` is
// an n x d byte grid (1 = keep). A single-row group cannot borrow values and
// is left unchanged.
inline Tensor fill_masked_within_group(const Tensor& inputs,
                                       const std::vector<std::size_t>& rows,
                                       const std::vector<std::uint8_t>& mask_rows,
                                       const std::vector<std::size_t>& mask_row_ids, Rng& rng,
                                       bool* degenerate = nullptr) {
    const std::size_t n = rows.size(), d = inputs.cols();
    Tensor out({n, d});
    for (std::size_t i = 0; i < n; ++i) {
        const double* src = inputs.row(rows[i]);
        std::copy(src, src + d, out.row(i));
    }
    if (n == 1) {
        bool any_masked = false;
        for (std::size_t e = 0; e < d; ++e) any_masked |= mask_rows[mask_row_ids[0] * d + e] == 0;
        if (any_masked && degenerate) *degenerate = true;
        return out;
    }
    std::vector<std::size_t> perm(n);
    for (std::size_t e = 0; e < d; ++e) {
        bool any_masked = false;
        for (std::size_t i = 0; i < n; ++i) {
            if (!mask_rows[mask_row_ids[i] * d + e]) {
                any_masked = true;
                break;
            }
        }
        if (!any_masked) continue;
        for (std::size_t i = 0; i < n; ++i) perm[i] = i;
        rng.shuffle(perm);
        for (std::size_t i = 0; i < n; ++i) {
            if (!mask_rows[mask_row_ids[i] * d + e]) {
                out.at(i, e) = inputs.at(rows[perm[i]], e);
            }
        }
    }
    return out;
}

// Materializes one masked view of a batch (the whole batch acts as the
// mini-batch group). Deterministic per seed.
inline MaskableDataset apply_mask(const Batch& data, const std::vector<std::uint8_t>& mask_rows,
                                  std::uint64_t seed) {
    data.validate();
    const std::size_t n = data.size(), d = data.d_in();
    if (mask_rows.size() != n * d) {
        fail(ErrorKind::ShapeMismatch, "mask shape does not match data");
    }
    Rng rng(derive_seed(seed, "apply-mask"));
    std::vector<std::size_t> rows(n), ids(n);
    for (std::size_t i = 0; i < n; ++i) rows[i] = ids[i] = i;
    bool degenerate = false;
    MaskableDataset out;
    out.inputs = fill_masked_within_group(data.inputs, rows, mask_rows, ids, rng, &degenerate);
    out.labels = data.labels;
    out.masks = mask_rows;
    if (degenerate) {
        std::cerr << "apply_mask: single-instance batch with masked elements left unchanged\n";
    }
    return out;
}

struct FinetuneConfig {
    double lr = 0.002;
    std::size_t batch_size = 256;
    std::size_t n_updates = 2000;
    std::uint64_t seed = 1;
    bool from_scratch = false;  // retrain with a fresh init instead of warm-starting
};

// Pure predictive fine-tuning on a model's masked dataset. Masked elements are
// re-drawn from the current mini-batch at every step, so the model never sees
// a stable value in positions assigned to other models.
inline MlpParams finetune(const MlpSpec& spec, MlpParams model, const Batch& data,
                          const std::vector<std::uint8_t>& mask_rows, const FinetuneConfig& cfg) {
    spec.validate_predictor();
    data.validate();
    const std::size_t n = data.size(), d = data.d_in();
    if (!mask_rows.empty() && mask_rows.size() != n * d) {
        fail(ErrorKind::ShapeMismatch, "mask shape does not match data");
    }
    if (cfg.n_updates == 0) return model;
    if (cfg.from_scratch) model = init_params(spec, derive_seed(cfg.seed, "ft-init"));

    AdamState opt = AdamState::init(spec, cfg.lr);
    Rng order_rng(derive_seed(cfg.seed, "ft-order"));
    Rng fill_rng(derive_seed(cfg.seed, "ft-fill"));

    const std::size_t bs = std::min(cfg.batch_size, n);
    std::vector<std::size_t> perm(n);
    for (std::size_t i = 0; i < n; ++i) perm[i] = i;
    order_rng.shuffle(perm);
    std::size_t cursor = 0;

    MlpParams grads = MlpParams::zeros(spec);
    ForwardTrace trace;
    Vec x(d);
    std::vector<std::size_t> rows(bs);

    for (std::size_t update = 0; update < cfg.n_updates; ++update) {
        if (cursor + bs > n) {
            order_rng.shuffle(perm);
            cursor = 0;
        }
        for (std::size_t i = 0; i < bs; ++i) rows[i] = perm[cursor + i];
        cursor += bs;

        Tensor batch_inputs;
        if (!mask_rows.empty()) {
            batch_inputs = fill_masked_within_group(data.inputs, rows, mask_rows, rows, fill_rng);
        }
        for (auto& w : grads.weights) std::fill(w.data.begin(), w.data.end(), 0.0);
        for (auto& b : grads.biases) std::fill(b.begin(), b.end(), 0.0);
        const double inv = 1.0 / static_cast<double>(bs);
        double loss = 0.0;
        for (std::size_t i = 0; i < bs; ++i) {
            const double* row = mask_rows.empty() ? data.inputs.row(rows[i]) : batch_inputs.row(i);
            x.assign(row, row + d);
            mlp_forward_into(spec, model, x, trace);
            const double logit = trace.post.back()[0];
            const double y = static_cast<double>(data.labels[rows[i]]);
            loss += bce_logit(y, logit);
            mlp_backward(spec, model, trace, Vec{(sigmoid(logit) - y) * inv}, &grads, nullptr);
        }
        if (!std::isfinite(loss)) fail(ErrorKind::NonFinite, "fine-tuning diverged");
        adam_step(opt, model, grads);
    }
    return model;
}

// Scoring callback used to pick models to combine; higher is better, ties by
// lower model index.
struct SelectorStrategy {
    std::function<double(const MlpSpec&, const MlpParams&)> score;
    std::string provenance = "ood-val-accuracy";
};

struct DistillStep {
    std::size_t iteration = 0;
    std::size_t parent_a = 0;
    std::size_t parent_b = 0;
    Vec selector_scores;  // scores of every model in the set after this step
};

struct DistillConfig {
    FinetuneConfig train;           // training recipe for each combined model
    std::size_t max_combinations = 5;

    // Combined models retrain from scratch by default; set
    // train.from_scratch=false to warm-start from the better parent instead.
    DistillConfig() { train.from_scratch = true; }
};

struct DistillResult {
    MlpParams best;
    std::size_t best_index = 0;
    ModelSet final_set;            // originals followed by combinations
    std::vector<std::vector<std::uint8_t>> final_masks;  // per model, n x d bytes
    std::vector<DistillStep> audit;
};

// Greedy pairwise distillation: repeatedly OR the masks of the two best
// models, train a fresh model on that masked data with the plain predictive
// loss, and keep going while the newest combination tops the selector.
inline DistillResult greedy_distill(const ModelSet& models, const MaskSet& masks,
                                    const Batch& train_data, const SelectorStrategy& selector,
                                    const DistillConfig& cfg) {
    models.validate();
    if (models.size() < 2) fail(ErrorKind::InvalidConfig, "distillation needs at least 2 models");
    if (masks.n_instances != train_data.size() || masks.d_in != train_data.d_in() ||
        masks.n_models != models.size()) {
        fail(ErrorKind::ShapeMismatch, "mask set does not cover the training data");
    }

    DistillResult result;
    result.final_set.spec = models.spec;
    result.final_set.params = models.params;
    for (std::size_t m = 0; m < models.size(); ++m) {
        result.final_masks.push_back(masks.model_rows(m));
    }

    auto score_model = [&](const MlpParams& p) {
        const double s = selector.score(models.spec, p);
        if (!std::isfinite(s)) fail(ErrorKind::NonFinite, "selector returned a non-finite score");
        return s;
    };

    Vec scores;
    for (const auto& p : result.final_set.params) scores.push_back(score_model(p));

    auto best_of = [&](const Vec& v) {
        std::size_t best = 0;
        for (std::size_t i = 1; i < v.size(); ++i) {
            if (v[i] > v[best]) best = i;
        }
        return best;
    };

    for (std::size_t iter = 0; iter < cfg.max_combinations; ++iter) {
        // Two best models by score (ties resolved toward lower index).
        std::size_t a = best_of(scores);
        std::size_t b = a == 0 ? 1 : 0;
        for (std::size_t i = 0; i < scores.size(); ++i) {
            if (i != a && scores[i] > scores[b]) b = i;
        }
        if (a > b) std::swap(a, b);

        std::vector<std::uint8_t> merged(result.final_masks[a].size());
        for (std::size_t i = 0; i < merged.size(); ++i) {
            merged[i] = result.final_masks[a][i] | result.final_masks[b][i];
        }

        FinetuneConfig ft = cfg.train;
        ft.seed = derive_seed(cfg.train.seed, "distill", iter);
        // Alg-style warm start from the better parent is available via
        // from_scratch=false; default retrains from a fresh init.
        MlpParams warm = result.final_set.params[a];
        MlpParams combined = finetune(models.spec, std::move(warm), train_data, merged, ft);

        result.final_set.params.push_back(combined);
        result.final_masks.push_back(std::move(merged));
        scores.push_back(score_model(result.final_set.params.back()));

        DistillStep step;
        step.iteration = iter;
        step.parent_a = a;
        step.parent_b = b;
        step.selector_scores = scores;
        result.audit.push_back(std::move(step));

        if (best_of(scores) != scores.size() - 1) break;  // newest combination no longer best
    }

    result.best_index = best_of(scores);
    result.best = result.final_set.params[result.best_index];
    return result;
}

// ---------------------------------------------------------------------------
// Masks file: magic "UDM3", bit-packed LSB-first per (instance, model) row.
// ---------------------------------------------------------------------------

inline void save_masks(const MaskSet& masks, const std::string& path) {
    auto f = io::open_out(path);
    io::write_magic(f, "UDM3");
    io::write_pod<std::uint32_t>(f, static_cast<std::uint32_t>(masks.n_instances));
    io::write_pod<std::uint32_t>(f, static_cast<std::uint32_t>(masks.n_models));
    io::write_pod<std::uint32_t>(f, static_cast<std::uint32_t>(masks.d_in));
    const std::size_t row_bytes = (masks.d_in + 7) / 8;
    std::vector<std::uint8_t> packed(row_bytes);
    for (std::size_t i = 0; i < masks.n_instances; ++i) {
        for (std::size_t m = 0; m < masks.n_models; ++m) {
            std::fill(packed.begin(), packed.end(), 0);
            for (std::size_t e = 0; e < masks.d_in; ++e) {
                if (masks.get(i, m, e)) packed[e / 8] |= static_cast<std::uint8_t>(1u << (e % 8));
            }
            io::write_array(f, packed.data(), packed.size());
        }
    }
    if (!f) fail(ErrorKind::FileError, "write failed: " + path);
}

inline MaskSet load_masks(const std::string& path) {
    auto f = io::open_in(path);
    io::expect_magic(f, "UDM3", path);
    MaskSet masks;
    masks.n_instances = io::read_pod<std::uint32_t>(f, "mask n");
    masks.n_models = io::read_pod<std::uint32_t>(f, "mask M");
    masks.d_in = io::read_pod<std::uint32_t>(f, "mask d_in");
    masks.bits.assign(masks.n_instances * masks.n_models * masks.d_in, 0);
    const std::size_t row_bytes = (masks.d_in + 7) / 8;
    std::vector<std::uint8_t> packed(row_bytes);
    for (std::size_t i = 0; i < masks.n_instances; ++i) {
        for (std::size_t m = 0; m < masks.n_models; ++m) {
            io::read_array(f, packed.data(), packed.size(), path);
            for (std::size_t e = 0; e < masks.d_in; ++e) {
                masks.set(i, m, e, (packed[e / 8] >> (e % 8)) & 1u);
            }
        }
    }
    return masks;
}

} // namespace underspec
