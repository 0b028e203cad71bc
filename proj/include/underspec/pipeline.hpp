#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "underspec/config.hpp"
#include "underspec/dataset.hpp"
#include "underspec/evaluate.hpp"
#include "underspec/manifold.hpp"
#include "underspec/specialize.hpp"
#include "underspec/training.hpp"

namespace underspec {

namespace fs = std::filesystem;

inline Batch slice_batch(const Batch& b, std::size_t from, std::size_t to) {
    Batch out;
    const std::size_t d = b.d_in();
    out.inputs = Tensor({to - from, d});
    std::copy(b.inputs.row(from), b.inputs.row(to - 1) + d, out.inputs.row(0));
    out.labels.assign(b.labels.begin() + static_cast<std::ptrdiff_t>(from),
                      b.labels.begin() + static_cast<std::ptrdiff_t>(to));
    return out;
}

inline Batch concat_batches(const std::vector<Batch>& batches) {
    std::size_t n = 0;
    const std::size_t d = batches.front().d_in();
    for (const auto& b : batches) n += b.size();
    Batch out;
    out.inputs = Tensor({n, d});
    out.labels.reserve(n);
    std::size_t row = 0;
    for (const auto& b : batches) {
        std::copy(b.inputs.data.begin(), b.inputs.data.end(), out.inputs.row(row));
        out.labels.insert(out.labels.end(), b.labels.begin(), b.labels.end());
        row += b.size();
    }
    return out;
}

// Test sets double as model-selection data: the first half of each per-tile
// set feeds the selector, the second half is reserved for reporting.
struct TestSplit {
    std::vector<Batch> selection;
    std::vector<Batch> report;
};

inline TestSplit split_test_sets(const std::vector<Batch>& test_sets) {
    TestSplit split;
    for (const auto& t : test_sets) {
        const std::size_t half = t.size() / 2;
        if (half == 0 || t.size() < 2) {
            fail(ErrorKind::InvalidConfig, "test sets need at least 2 rows for the split");
        }
        split.selection.push_back(slice_batch(t, 0, half));
        split.report.push_back(slice_batch(t, half, t.size()));
    }
    return split;
}

// ---------------------------------------------------------------------------
// Bundle directory layout
// ---------------------------------------------------------------------------

inline void save_bundle(const DatasetBundle& bundle, const std::string& dir) {
    fs::create_directories(dir);
    save_batch(bundle.train, dir + "/train.uds");
    save_batch(bundle.val_id, dir + "/val_id.uds");
    save_batch(bundle.ood_pool, nullptr, dir + "/ood_pool.uds");
    for (std::size_t t = 0; t < bundle.test_sets.size(); ++t) {
        save_batch(bundle.test_sets[t], dir + "/test_tile" + std::to_string(t) + ".uds");
    }
    ordered_json meta;
    meta["n_tiles"] = bundle.meta.n_tiles;
    meta["tile_side"] = bundle.meta.tile_side;
    meta["margins"] = bundle.meta.margins;
    meta["noise"] = bundle.meta.noise;
    meta["nuisance_rank"] = bundle.meta.nuisance_rank;
    meta["n_train"] = bundle.meta.n_train;
    meta["n_val"] = bundle.meta.n_val;
    meta["n_pool"] = bundle.meta.n_pool;
    meta["n_test"] = bundle.meta.n_test;
    meta["seed"] = bundle.meta.seed;
    meta["true_intrinsic_dim"] = bundle.meta.true_intrinsic_dim();
    std::ofstream f(dir + "/meta.json");
    f << meta.dump(2) << "\n";
    if (!f) fail(ErrorKind::FileError, "write failed: " + dir + "/meta.json");
}

inline DatasetBundle load_bundle(const std::string& dir) {
    std::ifstream mf(dir + "/meta.json");
    if (!mf) fail(ErrorKind::FileError, "missing dataset meta: " + dir + "/meta.json");
    ordered_json meta;
    try {
        mf >> meta;
    } catch (const std::exception& e) {
        fail(ErrorKind::InvalidConfig, std::string("bad meta.json: ") + e.what());
    }
    DatasetBundle bundle;
    bundle.meta.n_tiles = meta.at("n_tiles").get<std::size_t>();
    bundle.meta.tile_side = meta.at("tile_side").get<std::size_t>();
    bundle.meta.margins = meta.at("margins").get<Vec>();
    bundle.meta.noise = meta.at("noise").get<Vec>();
    bundle.meta.nuisance_rank = meta.at("nuisance_rank").get<std::vector<std::size_t>>();
    bundle.meta.n_train = meta.at("n_train").get<std::size_t>();
    bundle.meta.n_val = meta.at("n_val").get<std::size_t>();
    bundle.meta.n_pool = meta.at("n_pool").get<std::size_t>();
    bundle.meta.n_test = meta.at("n_test").get<std::size_t>();
    bundle.meta.seed = meta.at("seed").get<std::uint64_t>();
    bundle.train = load_dataset(dir + "/train.uds").as_batch();
    bundle.val_id = load_dataset(dir + "/val_id.uds").as_batch();
    bundle.ood_pool = load_dataset(dir + "/ood_pool.uds").inputs;
    for (std::size_t t = 0; t < bundle.meta.n_tiles; ++t) {
        bundle.test_sets.push_back(
            load_dataset(dir + "/test_tile" + std::to_string(t) + ".uds").as_batch());
    }
    return bundle;
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

class Manifest {
public:
    explicit Manifest(ordered_json config_echo) { j_["config"] = std::move(config_echo); }

    void add(const std::string& path) {
        j_["artifacts"][fs::path(path).filename().string()] = io::fnv1a_hex(path);
    }

    void write(const std::string& path) const {
        std::ofstream f(path);
        f << j_.dump(2) << "\n";
        if (!f) fail(ErrorKind::FileError, "write failed: " + path);
    }

private:
    ordered_json j_ = {{"config", nullptr}, {"artifacts", ordered_json::object()}};
};

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

inline ordered_json tensor_to_json(const Tensor& t) {
    ordered_json rows = ordered_json::array();
    for (std::size_t r = 0; r < t.rows(); ++r) {
        ordered_json row = ordered_json::array();
        for (std::size_t c = 0; c < t.cols(); ++c) row.push_back(t.at(r, c));
        rows.push_back(std::move(row));
    }
    return rows;
}

struct StageEval {
    Tensor accuracy;           // models x sets
    BestModelMatrix best;
    Tensor grad_mass;          // models x tiles
};

inline StageEval evaluate_stage(const ModelSet& models, const std::vector<Batch>& report_sets,
                                const Tensor& pool_sample, std::size_t n_tiles) {
    StageEval ev;
    ev.best = best_model_matrix(models, report_sets);
    ev.accuracy = ev.best.full;
    ev.grad_mass = gradient_tile_mass(models, pool_sample, n_tiles);
    return ev;
}

inline ordered_json stage_to_json(const StageEval& ev) {
    ordered_json j;
    j["accuracy"] = tensor_to_json(ev.accuracy);
    j["best_model_per_set"] = ev.best.best_model;
    j["best_model_matrix"] = tensor_to_json(ev.best.matrix);
    j["grad_tile_mass"] = tensor_to_json(ev.grad_mass);
    return j;
}

inline void print_matrix(std::ostream& os, const std::string& title, const Tensor& m,
                         const std::string& row_prefix) {
    os << title << "\n";
    os << std::setw(12) << "";
    for (std::size_t c = 0; c < m.cols(); ++c) os << std::setw(10) << ("set" + std::to_string(c));
    os << "\n";
    for (std::size_t r = 0; r < m.rows(); ++r) {
        os << std::setw(12) << (row_prefix + std::to_string(r));
        for (std::size_t c = 0; c < m.cols(); ++c) {
            os << std::setw(10) << std::fixed << std::setprecision(4) << m.at(r, c);
        }
        os << "\n";
    }
    os << "\n";
}

// ---------------------------------------------------------------------------
// Pipeline
// ---------------------------------------------------------------------------

struct PipelineOptions {
    std::string out_dir;
    std::size_t models_override = 0;  // 0: keep config / dimension rule
    std::size_t workers = 1;
    bool write_artifacts = true;
};

struct PipelineResult {
    DatasetBundle bundle;
    double dim_estimate = 0.0;
    std::size_t n_models = 0;
    ManifoldModel manifold;
    TrainResult trained;
    ModelSet finetuned;
    MaskSet masks;
    bool has_distill = false;
    DistillResult distilled;
    UnderspecReport proxy;
    ordered_json report;
    std::string report_text;
};

inline ManifoldModel fit_manifold_from_config(const RunConfig& cfg, const Tensor& pool,
                                              std::size_t default_dim) {
    if (cfg.manifold.kind == "pca") {
        const std::size_t n_comp =
            cfg.manifold.n_components > 0 ? cfg.manifold.n_components : default_dim;
        return ManifoldModel::from_pca(fit_pca(pool, n_comp));
    }
    const std::size_t d_latent = cfg.manifold.ae_latent > 0 ? cfg.manifold.ae_latent : default_dim;
    AeModel skeleton = make_ae_skeleton(pool.cols(), d_latent, cfg.manifold.ae_hidden,
                                        cfg.manifold.ae_variational, cfg.manifold.ae_kl_weight,
                                        derive_seed(cfg.seed, "ae-init"));
    AeTrainConfig tc;
    tc.lr = cfg.manifold.ae_lr;
    tc.batch_size = cfg.manifold.ae_batch_size;
    tc.n_epochs = cfg.manifold.ae_epochs;
    return ManifoldModel::from_ae(
        train_autoencoder(pool, std::move(skeleton), tc, derive_seed(cfg.seed, "ae-train")));
}

inline SelectorStrategy make_ood_val_selector(const Batch& selection_batch) {
    SelectorStrategy sel;
    sel.provenance = "ood-val-accuracy";
    sel.score = [&selection_batch](const MlpSpec& spec, const MlpParams& params) {
        return accuracy(spec, params, selection_batch);
    };
    return sel;
}

inline PipelineResult run_pipeline(const RunConfig& cfg, const PipelineOptions& opt) {
    PipelineResult R;

    // 1. Data.
    R.bundle = gen_collages(cfg.data);
    const std::size_t n_tiles = cfg.data.n_tiles;

    // 2. Intrinsic dimensionality; the estimate bounds the useful model count.
    R.dim_estimate = estimate_intrinsic_dim(R.bundle.ood_pool, cfg.evaluate.dim_k);
    const std::size_t dim_rounded = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(R.dim_estimate)));
    R.n_models = opt.models_override > 0 ? opt.models_override
                : cfg.train.n_models > 0 ? cfg.train.n_models
                                         : dim_rounded;

    // 3. Manifold model.
    R.manifold = fit_manifold_from_config(cfg, R.bundle.ood_pool, dim_rounded);

    // 4. Joint training.
    TrainConfig tc;
    tc.n_models = R.n_models;
    tc.spec = cfg.predictor_spec();
    tc.weights = cfg.weights;
    tc.lr = cfg.train.lr;
    tc.batch_size = cfg.train.batch_size;
    tc.n_updates = cfg.train.n_updates;
    tc.seed = derive_seed(cfg.seed, "train");
    tc.eps_tr = cfg.train.eps_tr;
    tc.eps_val = cfg.train.eps_val;
    const bool needs_manifold = (cfg.weights.lambda_manifold > 0.0 &&
                                 cfg.weights.mode == RegularizerMode::Soft) ||
                                cfg.weights.mode == RegularizerMode::HardProjection;
    R.trained = train_models(tc, R.bundle.train, R.bundle.val_id,
                             needs_manifold ? &R.manifold : nullptr, opt.workers);

    // 5. Masks, computed once before fine-tuning.
    R.masks = compute_masks(R.trained.models, R.bundle.train, opt.workers);

    // 6. Optional masked fine-tuning.
    R.finetuned.spec = R.trained.models.spec;
    if (cfg.finetune.enabled) {
        for (std::size_t m = 0; m < R.n_models; ++m) {
            FinetuneConfig fc;
            fc.lr = cfg.finetune.lr;
            fc.batch_size = cfg.finetune.batch_size;
            fc.n_updates = cfg.finetune.n_updates;
            fc.from_scratch = cfg.finetune.from_scratch;
            fc.seed = derive_seed(cfg.seed, "finetune", m);
            R.finetuned.params.push_back(finetune(R.trained.models.spec,
                                                  R.trained.models.params[m], R.bundle.train,
                                                  R.masks.model_rows(m), fc));
        }
    }

    const TestSplit split = split_test_sets(R.bundle.test_sets);
    const Batch selector_batch = concat_batches(split.selection);

    // 7. Optional greedy distillation from the fine-tuned (or trained) set.
    const ModelSet& distill_base = cfg.finetune.enabled ? R.finetuned : R.trained.models;
    if (cfg.distill.enabled && R.n_models >= 2) {
        DistillConfig dc;
        dc.max_combinations = cfg.distill.max_combinations;
        dc.train.lr = cfg.finetune.lr;
        dc.train.batch_size = cfg.finetune.batch_size;
        dc.train.n_updates = cfg.distill.n_updates;
        dc.train.from_scratch = cfg.distill.from_scratch;
        dc.train.seed = derive_seed(cfg.seed, "distill");
        SelectorStrategy sel = make_ood_val_selector(selector_batch);
        R.distilled = greedy_distill(distill_base, R.masks, R.bundle.train, sel, dc);
        R.has_distill = true;
    }

    // 8. Evaluation report.
    const std::size_t sample_rows = std::min<std::size_t>(cfg.evaluate.spearman_sample,
                                                          R.bundle.ood_pool.rows());
    Tensor pool_sample({sample_rows, R.bundle.ood_pool.cols()});
    std::copy(R.bundle.ood_pool.data.begin(),
              R.bundle.ood_pool.data.begin() + static_cast<std::ptrdiff_t>(pool_sample.data.size()),
              pool_sample.data.begin());

    R.proxy = underspec_report(R.trained.models, R.bundle.train, R.bundle.val_id,
                               R.bundle.ood_pool, cfg.train.eps_tr, cfg.train.eps_val,
                               cfg.evaluate.delta);

    ordered_json report;
    report["schema_version"] = 1;
    report["config"] = run_config_to_json(cfg);
    report["n_models"] = R.n_models;
    report["intrinsic_dim_estimate"] = R.dim_estimate;
    report["true_intrinsic_dim"] = cfg.data.true_intrinsic_dim();
    report["d_manifold"] = R.manifold.d_manifold;

    StageEval trained_ev = evaluate_stage(R.trained.models, split.report, pool_sample, n_tiles);
    report["trained"] = stage_to_json(trained_ev);
    if (R.trained.models.size() >= 2) {
        report["trained"]["spearman_grad_corr"] =
            spearman_grad_corr(R.trained.models, pool_sample).mean_rho;
    }

    ordered_json proxy_json;
    proxy_json["eps_tr"] = R.proxy.eps_tr;
    proxy_json["eps_val"] = R.proxy.eps_val;
    proxy_json["delta"] = R.proxy.delta;
    proxy_json["n_converged"] = R.proxy.n_converged;
    proxy_json["converged_models"] = R.proxy.converged;
    proxy_json["train_risk"] = R.proxy.train_risk;
    proxy_json["val_risk"] = R.proxy.val_risk;
    proxy_json["min_disagreement"] = R.proxy.min_disagreement;
    proxy_json["mean_disagreement"] = R.proxy.mean_disagreement;
    proxy_json["distinct"] = R.proxy.distinct;
    report["underspecification_proxy"] = proxy_json;

    StageEval ft_ev;
    if (cfg.finetune.enabled) {
        ft_ev = evaluate_stage(R.finetuned, split.report, pool_sample, n_tiles);
        report["finetuned"] = stage_to_json(ft_ev);
    }

    StageEval distill_ev;
    if (R.has_distill) {
        distill_ev = evaluate_stage(R.distilled.final_set, split.report, pool_sample, n_tiles);
        report["distilled"] = stage_to_json(distill_ev);
        report["distilled"]["best_index"] = R.distilled.best_index;
        ordered_json audit = ordered_json::array();
        for (const auto& step : R.distilled.audit) {
            audit.push_back({{"iteration", step.iteration},
                             {"parents", {step.parent_a, step.parent_b}},
                             {"selector_scores", step.selector_scores}});
        }
        report["distilled"]["audit"] = audit;
        report["distilled"]["selector"] = "ood-val-accuracy";
    }
    R.report = report;

    // Text tables.
    std::ostringstream text;
    text << "underspec pipeline report\n"
         << "n_models " << R.n_models << ", intrinsic dim estimate " << std::fixed
         << std::setprecision(2) << R.dim_estimate << " (true "
         << cfg.data.true_intrinsic_dim() << ")\n\n";
    print_matrix(text, "trained: accuracy (models x test sets)", trained_ev.accuracy, "model");
    print_matrix(text, "trained: best-model matrix", trained_ev.best.matrix, "best-on-");
    print_matrix(text, "trained: gradient mass per tile", trained_ev.grad_mass, "model");
    text << "converged models: " << R.proxy.n_converged << " of " << R.n_models
         << " (eps_tr " << R.proxy.eps_tr << ", eps_val " << R.proxy.eps_val << ")\n"
         << "mean pairwise OOD disagreement among converged: " << R.proxy.mean_disagreement
         << "\n\n";
    if (cfg.finetune.enabled) {
        print_matrix(text, "finetuned: accuracy (models x test sets)", ft_ev.accuracy, "model");
        print_matrix(text, "finetuned: best-model matrix", ft_ev.best.matrix, "best-on-");
    }
    if (R.has_distill) {
        print_matrix(text, "distilled set: accuracy (models x test sets)", distill_ev.accuracy,
                     "model");
        text << "distilled best model index: " << R.distilled.best_index << "\n";
    }
    R.report_text = text.str();

    // 9. Artifacts.
    if (opt.write_artifacts) {
        if (opt.out_dir.empty()) fail(ErrorKind::InvalidConfig, "pipeline needs an output directory");
        fs::create_directories(opt.out_dir);
        const std::string out = opt.out_dir;
        {
            std::ofstream f(out + "/config.json");
            f << run_config_to_json(cfg).dump(2) << "\n";
        }
        save_bundle(R.bundle, out + "/data");
        save_manifold(R.manifold, out + "/manifold.udm");
        save_model_set(R.trained.models, out + "/models.udm2");
        save_convergence_csv(R.trained.log, out + "/convergence.csv");
        save_masks(R.masks, out + "/masks.udm3");
        if (cfg.finetune.enabled) save_model_set(R.finetuned, out + "/models_ft.udm2");
        if (R.has_distill) {
            save_model_set(R.distilled.final_set, out + "/distilled.udm2");
            std::ofstream f(out + "/audit.json");
            f << report["distilled"]["audit"].dump(2) << "\n";
        }
        {
            std::ofstream f(out + "/report.json");
            f << R.report.dump(2) << "\n";
        }
        {
            std::ofstream f(out + "/report.txt");
            f << R.report_text;
        }
        Manifest manifest(run_config_to_json(cfg));
        manifest.add(out + "/config.json");
        manifest.add(out + "/manifold.udm");
        manifest.add(out + "/models.udm2");
        manifest.add(out + "/convergence.csv");
        manifest.add(out + "/masks.udm3");
        if (cfg.finetune.enabled) manifest.add(out + "/models_ft.udm2");
        if (R.has_distill) manifest.add(out + "/distilled.udm2");
        manifest.add(out + "/report.json");
        manifest.write(out + "/manifest.json");
    }
    return R;
}

} // namespace underspec
