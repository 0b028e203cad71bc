#pragma once

#include <cstdlib>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "underspec/pipeline.hpp"

namespace underspec {

namespace detail {

inline void apply_seed_env(RunConfig& cfg) {
    if (const char* env = std::getenv("UDS_SEED")) {
        try {
            cfg.seed = std::stoull(env);
        } catch (const std::exception&) {
            fail(ErrorKind::InvalidConfig, "UDS_SEED is not a valid integer: " + std::string(env));
        }
    }
}

inline RunConfig config_or_default(const std::string& path) {
    RunConfig cfg = path.empty() ? RunConfig{} : load_run_config(path);
    apply_seed_env(cfg);
    return cfg;
}

inline void write_manifest_for(const RunConfig& cfg, const std::vector<std::string>& files,
                               const std::string& out_dir) {
    Manifest manifest(run_config_to_json(cfg));
    for (const auto& f : files) manifest.add(f);
    manifest.write(out_dir + "/manifest.json");
}

} // namespace detail

// CLI entry point; returns the process exit code. 0 ok, 2 bad arguments or
// config, 3 file problems, 4 numerical failures.
inline int run_command(const std::vector<std::string>& args) {
    CLI::App app{"underspecification diagnosis via independent model sets"};
    app.require_subcommand(1);

    std::string config_path, data_dir, out_dir, manifold_path, models_path, masks_path;
    std::string finetuned_path, pool_path;
    std::size_t models_override = 0, workers = 1, dim_k = 20;

    auto* gen = app.add_subcommand("gen-data", "generate the tile dataset bundle");
    gen->add_option("--config", config_path, "run config JSON");
    gen->add_option("--out", out_dir, "output directory")->required();

    auto* dim = app.add_subcommand("estimate-dim", "estimate intrinsic dimensionality");
    dim->add_option("--data", data_dir, "dataset bundle directory");
    dim->add_option("--pool", pool_path, "UDS1 file to use instead of --data");
    dim->add_option("--k", dim_k, "neighbor count");

    auto* fitm = app.add_subcommand("fit-manifold", "fit the manifold model on the pool");
    fitm->add_option("--config", config_path, "run config JSON");
    fitm->add_option("--data", data_dir, "dataset bundle directory")->required();
    fitm->add_option("--out", out_dir, "output directory")->required();

    auto* tr = app.add_subcommand("train", "train the model set");
    tr->add_option("--config", config_path, "run config JSON");
    tr->add_option("--data", data_dir, "dataset bundle directory")->required();
    tr->add_option("--manifold", manifold_path, "manifold model file");
    tr->add_option("--out", out_dir, "output directory")->required();
    tr->add_option("--models", models_override, "override the model count");
    tr->add_option("--workers", workers, "trainer parallelism");

    auto* mk = app.add_subcommand("masks", "compute element masks");
    mk->add_option("--data", data_dir, "dataset bundle directory")->required();
    mk->add_option("--models", models_path, "model set file")->required();
    mk->add_option("--out", out_dir, "output directory")->required();

    auto* ft = app.add_subcommand("finetune", "masked fine-tuning of each model");
    ft->add_option("--config", config_path, "run config JSON");
    ft->add_option("--data", data_dir, "dataset bundle directory")->required();
    ft->add_option("--models", models_path, "model set file")->required();
    ft->add_option("--masks", masks_path, "masks file")->required();
    ft->add_option("--out", out_dir, "output directory")->required();

    auto* di = app.add_subcommand("distill", "greedy pairwise distillation");
    di->add_option("--config", config_path, "run config JSON");
    di->add_option("--data", data_dir, "dataset bundle directory")->required();
    di->add_option("--models", models_path, "model set file")->required();
    di->add_option("--masks", masks_path, "masks file")->required();
    di->add_option("--out", out_dir, "output directory")->required();

    auto* ev = app.add_subcommand("evaluate", "evaluation report for saved model sets");
    ev->add_option("--config", config_path, "run config JSON");
    ev->add_option("--data", data_dir, "dataset bundle directory")->required();
    ev->add_option("--models", models_path, "model set file")->required();
    ev->add_option("--finetuned", finetuned_path, "fine-tuned model set file");
    ev->add_option("--out", out_dir, "output directory")->required();

    auto* pl = app.add_subcommand("pipeline", "run every stage end to end");
    pl->add_option("--config", config_path, "run config JSON");
    pl->add_option("--out", out_dir, "output directory")->required();
    pl->add_option("--models", models_override, "override the dimension-based model count");
    pl->add_option("--workers", workers, "trainer parallelism (1 = bit-reproducible)");

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) {  // --help
            std::cout << app.help() << std::endl;
            return 0;
        }
        std::cerr << e.what() << "\n";
        return 2;
    }

    try {
        if (gen->parsed()) {
            RunConfig cfg = detail::config_or_default(config_path);
            DatasetBundle bundle = gen_collages(cfg.data);
            save_bundle(bundle, out_dir);
            std::vector<std::string> files = {out_dir + "/train.uds", out_dir + "/val_id.uds",
                                              out_dir + "/ood_pool.uds"};
            for (std::size_t t = 0; t < bundle.test_sets.size(); ++t) {
                files.push_back(out_dir + "/test_tile" + std::to_string(t) + ".uds");
            }
            detail::write_manifest_for(cfg, files, out_dir);
            std::cout << "wrote dataset bundle to " << out_dir << "\n";
        } else if (dim->parsed()) {
            Tensor pool;
            if (!pool_path.empty()) {
                pool = load_dataset(pool_path).inputs;
            } else if (!data_dir.empty()) {
                pool = load_dataset(data_dir + "/ood_pool.uds").inputs;
            } else {
                std::cerr << "estimate-dim needs --data or --pool\n";
                return 2;
            }
            const double est = estimate_intrinsic_dim(pool, dim_k);
            std::cout << "intrinsic_dim " << est << "\n";
        } else if (fitm->parsed()) {
            RunConfig cfg = detail::config_or_default(config_path);
            Tensor pool = load_dataset(data_dir + "/ood_pool.uds").inputs;
            const double est = estimate_intrinsic_dim(pool, cfg.evaluate.dim_k);
            const std::size_t dim_rounded =
                std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(est)));
            ManifoldModel manifold = fit_manifold_from_config(cfg, pool, dim_rounded);
            fs::create_directories(out_dir);
            save_manifold(manifold, out_dir + "/manifold.udm");
            detail::write_manifest_for(cfg, {out_dir + "/manifold.udm"}, out_dir);
            std::cout << "fitted " << cfg.manifold.kind << " manifold (d=" << manifold.d_manifold
                      << ", dim estimate " << est << ")\n";
        } else if (tr->parsed()) {
            RunConfig cfg = detail::config_or_default(config_path);
            DatasetBundle bundle = load_bundle(data_dir);
            ManifoldModel manifold;
            bool have_manifold = false;
            if (!manifold_path.empty()) {
                manifold = load_manifold(manifold_path);
                have_manifold = true;
            }
            TrainConfig tc;
            tc.n_models = models_override > 0 ? models_override
                          : cfg.train.n_models > 0 ? cfg.train.n_models
                                                   : 8;
            tc.spec = cfg.predictor_spec();
            tc.weights = cfg.weights;
            tc.lr = cfg.train.lr;
            tc.batch_size = cfg.train.batch_size;
            tc.n_updates = cfg.train.n_updates;
            tc.seed = derive_seed(cfg.seed, "train");
            tc.eps_tr = cfg.train.eps_tr;
            tc.eps_val = cfg.train.eps_val;
            TrainResult res = train_models(tc, bundle.train, bundle.val_id,
                                           have_manifold ? &manifold : nullptr, workers);
            fs::create_directories(out_dir);
            save_model_set(res.models, out_dir + "/models.udm2");
            save_convergence_csv(res.log, out_dir + "/convergence.csv");
            detail::write_manifest_for(cfg, {out_dir + "/models.udm2", out_dir + "/convergence.csv"},
                                       out_dir);
            std::cout << "trained " << tc.n_models << " models; final loss "
                      << res.final_breakdown.total() << "\n";
        } else if (mk->parsed()) {
            DatasetBundle bundle = load_bundle(data_dir);
            ModelSet models = load_model_set(models_path);
            MaskSet masks = compute_masks(models, bundle.train);
            fs::create_directories(out_dir);
            save_masks(masks, out_dir + "/masks.udm3");
            detail::write_manifest_for(RunConfig{}, {out_dir + "/masks.udm3"}, out_dir);
            std::cout << "wrote masks for " << masks.n_models << " models\n";
        } else if (ft->parsed()) {
            RunConfig cfg = detail::config_or_default(config_path);
            DatasetBundle bundle = load_bundle(data_dir);
            ModelSet models = load_model_set(models_path);
            MaskSet masks = load_masks(masks_path);
            ModelSet tuned;
            tuned.spec = models.spec;
            for (std::size_t m = 0; m < models.size(); ++m) {
                FinetuneConfig fc;
                fc.lr = cfg.finetune.lr;
                fc.batch_size = cfg.finetune.batch_size;
                fc.n_updates = cfg.finetune.n_updates;
                fc.from_scratch = cfg.finetune.from_scratch;
                fc.seed = derive_seed(cfg.seed, "finetune", m);
                tuned.params.push_back(finetune(models.spec, models.params[m], bundle.train,
                                                masks.model_rows(m), fc));
            }
            fs::create_directories(out_dir);
            save_model_set(tuned, out_dir + "/models_ft.udm2");
            detail::write_manifest_for(cfg, {out_dir + "/models_ft.udm2"}, out_dir);
            std::cout << "fine-tuned " << models.size() << " models\n";
        } else if (di->parsed()) {
            RunConfig cfg = detail::config_or_default(config_path);
            DatasetBundle bundle = load_bundle(data_dir);
            ModelSet models = load_model_set(models_path);
            MaskSet masks = load_masks(masks_path);
            TestSplit split = split_test_sets(bundle.test_sets);
            Batch selector_batch = concat_batches(split.selection);
            DistillConfig dc;
            dc.max_combinations = cfg.distill.max_combinations;
            dc.train.lr = cfg.finetune.lr;
            dc.train.batch_size = cfg.finetune.batch_size;
            dc.train.n_updates = cfg.distill.n_updates;
            dc.train.from_scratch = cfg.distill.from_scratch;
            dc.train.seed = derive_seed(cfg.seed, "distill");
            SelectorStrategy sel = make_ood_val_selector(selector_batch);
            DistillResult res = greedy_distill(models, masks, bundle.train, sel, dc);
            fs::create_directories(out_dir);
            save_model_set(res.final_set, out_dir + "/distilled.udm2");
            ordered_json audit = ordered_json::array();
            for (const auto& step : res.audit) {
                audit.push_back({{"iteration", step.iteration},
                                 {"parents", {step.parent_a, step.parent_b}},
                                 {"selector_scores", step.selector_scores}});
            }
            {
                std::ofstream f(out_dir + "/audit.json");
                f << audit.dump(2) << "\n";
            }
            detail::write_manifest_for(cfg, {out_dir + "/distilled.udm2", out_dir + "/audit.json"},
                                       out_dir);
            std::cout << "distilled: best model index " << res.best_index << " of "
                      << res.final_set.size() << "\n";
        } else if (ev->parsed()) {
            RunConfig cfg = detail::config_or_default(config_path);
            DatasetBundle bundle = load_bundle(data_dir);
            ModelSet models = load_model_set(models_path);
            TestSplit split = split_test_sets(bundle.test_sets);
            const std::size_t sample_rows =
                std::min<std::size_t>(cfg.evaluate.spearman_sample, bundle.ood_pool.rows());
            Tensor pool_sample({sample_rows, bundle.ood_pool.cols()});
            std::copy(bundle.ood_pool.data.begin(),
                      bundle.ood_pool.data.begin() +
                          static_cast<std::ptrdiff_t>(pool_sample.data.size()),
                      pool_sample.data.begin());

            ordered_json report;
            report["schema_version"] = 1;
            report["config"] = run_config_to_json(cfg);
            StageEval ev_main =
                evaluate_stage(models, split.report, pool_sample, bundle.meta.n_tiles);
            report["trained"] = stage_to_json(ev_main);
            if (models.size() >= 2) {
                report["trained"]["spearman_grad_corr"] =
                    spearman_grad_corr(models, pool_sample).mean_rho;
            }
            UnderspecReport proxy =
                underspec_report(models, bundle.train, bundle.val_id, bundle.ood_pool,
                                 cfg.train.eps_tr, cfg.train.eps_val, cfg.evaluate.delta);
            report["underspecification_proxy"] = {{"n_converged", proxy.n_converged},
                                                  {"converged_models", proxy.converged},
                                                  {"mean_disagreement", proxy.mean_disagreement},
                                                  {"min_disagreement", proxy.min_disagreement},
                                                  {"distinct", proxy.distinct}};
            if (!finetuned_path.empty()) {
                ModelSet tuned = load_model_set(finetuned_path);
                report["finetuned"] =
                    stage_to_json(evaluate_stage(tuned, split.report, pool_sample,
                                                 bundle.meta.n_tiles));
            }
            fs::create_directories(out_dir);
            {
                std::ofstream f(out_dir + "/report.json");
                f << report.dump(2) << "\n";
            }
            {
                std::ofstream f(out_dir + "/report.txt");
                print_matrix(f, "accuracy (models x test sets)", ev_main.accuracy, "model");
                print_matrix(f, "best-model matrix", ev_main.best.matrix, "best-on-");
            }
            detail::write_manifest_for(cfg, {out_dir + "/report.json"}, out_dir);
            std::cout << "wrote report to " << out_dir << "\n";
        } else if (pl->parsed()) {
            RunConfig cfg = detail::config_or_default(config_path);
            PipelineOptions opt;
            opt.out_dir = out_dir;
            opt.models_override = models_override;
            opt.workers = workers;
            PipelineResult res = run_pipeline(cfg, opt);
            std::cout << res.report_text;
            std::cout << "report written to " << out_dir << "/report.json\n";
        }
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return e.exit_code();
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

} // namespace underspec
