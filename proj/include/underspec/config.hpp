#pragma once

#include <cstdint>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "underspec/dataset.hpp"
#include "underspec/errors.hpp"
#include "underspec/losses.hpp"
#include "underspec/training.hpp"

namespace underspec {

using ordered_json = nlohmann::ordered_json;

// Full run configuration. Every field has a default tuned for the four-tile
// benchmark; JSON configs override selectively. Unknown keys are rejected so
// typos in regularizer names cannot silently disable them.
struct RunConfig {
    std::uint64_t seed = 1;

    GenConfig data;

    struct Manifold {
        std::string kind = "pca";       // "pca" | "ae"
        std::size_t n_components = 0;   // 0: use the rounded dimension estimate
        std::vector<std::size_t> ae_hidden = {64};
        std::size_t ae_latent = 0;      // 0: rounded dimension estimate
        bool ae_variational = true;
        double ae_kl_weight = 0.01;
        double ae_lr = 0.001;
        std::size_t ae_batch_size = 256;
        std::size_t ae_epochs = 40;
    } manifold;

    struct Train {
        std::size_t n_models = 0;  // 0: set from the dimension estimate
        std::vector<std::size_t> hidden = {8};
        double leaky_slope = 0.01;
        double lr = 0.002;
        std::size_t batch_size = 256;
        std::size_t n_updates = 10000;
        double eps_tr = 0.25;
        double eps_val = 0.25;
    } train;

    LossWeights weights = [] {
        LossWeights w;
        w.lambda_indep = 1.0;
        w.lambda_manifold = 100.0;
        return w;
    }();

    struct Finetune {
        bool enabled = true;
        double lr = 0.002;
        std::size_t batch_size = 256;
        std::size_t n_updates = 3000;
        bool from_scratch = false;
    } finetune;

    struct Distill {
        bool enabled = true;
        std::size_t max_combinations = 5;
        std::size_t n_updates = 4000;
        bool from_scratch = true;
    } distill;

    struct Evaluate {
        double delta = 0.2;            // disagreement threshold for "distinct"
        std::size_t spearman_sample = 64;
        std::size_t dim_k = 20;        // neighbor count for the dim estimate
    } evaluate;

    MlpSpec predictor_spec() const {
        MlpSpec spec;
        spec.layer_widths.push_back(data.d_in());
        for (std::size_t h : train.hidden) spec.layer_widths.push_back(h);
        spec.layer_widths.push_back(1);
        spec.leaky_slope = train.leaky_slope;
        return spec;
    }
};

namespace detail {

inline void check_keys(const ordered_json& obj, const std::set<std::string>& allowed,
                       const std::string& where) {
    if (!obj.is_object()) fail(ErrorKind::InvalidConfig, where + " must be a JSON object");
    for (const auto& item : obj.items()) {
        if (!allowed.count(item.key())) {
            fail(ErrorKind::InvalidConfig, "unknown key '" + item.key() + "' in " + where);
        }
    }
}

template <typename T>
void read_field(const ordered_json& obj, const char* key, T& out) {
    if (obj.contains(key)) out = obj.at(key).get<T>();
}

} // namespace detail

inline RunConfig parse_run_config(const ordered_json& j) {
    RunConfig cfg;
    detail::check_keys(j, {"schema_version", "seed", "data", "manifold", "train", "weights",
                           "finetune", "distill", "evaluate"},
                       "config root");
    if (!j.contains("schema_version") || !j.at("schema_version").is_number_integer() ||
        j.at("schema_version").get<int>() != 1) {
        fail(ErrorKind::InvalidConfig, "config requires schema_version = 1");
    }
    detail::read_field(j, "seed", cfg.seed);

    if (j.contains("data")) {
        const auto& d = j.at("data");
        detail::check_keys(d, {"n_tiles", "tile_side", "margins", "noise", "nuisance_rank",
                               "n_train", "n_val", "n_pool", "n_test"},
                           "data");
        detail::read_field(d, "n_tiles", cfg.data.n_tiles);
        detail::read_field(d, "tile_side", cfg.data.tile_side);
        detail::read_field(d, "margins", cfg.data.margins);
        detail::read_field(d, "noise", cfg.data.noise);
        detail::read_field(d, "nuisance_rank", cfg.data.nuisance_rank);
        detail::read_field(d, "n_train", cfg.data.n_train);
        detail::read_field(d, "n_val", cfg.data.n_val);
        detail::read_field(d, "n_pool", cfg.data.n_pool);
        detail::read_field(d, "n_test", cfg.data.n_test);
        if (d.contains("n_tiles") && !d.contains("margins")) {
            fail(ErrorKind::InvalidConfig,
                 "changing n_tiles requires explicit margins/noise/nuisance_rank");
        }
    }

    if (j.contains("manifold")) {
        const auto& m = j.at("manifold");
        detail::check_keys(m, {"kind", "n_components", "ae_hidden", "ae_latent", "ae_variational",
                               "ae_kl_weight", "ae_lr", "ae_batch_size", "ae_epochs"},
                           "manifold");
        detail::read_field(m, "kind", cfg.manifold.kind);
        if (cfg.manifold.kind != "pca" && cfg.manifold.kind != "ae") {
            fail(ErrorKind::InvalidConfig, "manifold.kind must be 'pca' or 'ae'");
        }
        detail::read_field(m, "n_components", cfg.manifold.n_components);
        detail::read_field(m, "ae_hidden", cfg.manifold.ae_hidden);
        detail::read_field(m, "ae_latent", cfg.manifold.ae_latent);
        detail::read_field(m, "ae_variational", cfg.manifold.ae_variational);
        detail::read_field(m, "ae_kl_weight", cfg.manifold.ae_kl_weight);
        detail::read_field(m, "ae_lr", cfg.manifold.ae_lr);
        detail::read_field(m, "ae_batch_size", cfg.manifold.ae_batch_size);
        detail::read_field(m, "ae_epochs", cfg.manifold.ae_epochs);
    }

    if (j.contains("train")) {
        const auto& t = j.at("train");
        detail::check_keys(t, {"n_models", "hidden", "leaky_slope", "lr", "batch_size",
                               "n_updates", "eps_tr", "eps_val"},
                           "train");
        detail::read_field(t, "n_models", cfg.train.n_models);
        detail::read_field(t, "hidden", cfg.train.hidden);
        detail::read_field(t, "leaky_slope", cfg.train.leaky_slope);
        detail::read_field(t, "lr", cfg.train.lr);
        detail::read_field(t, "batch_size", cfg.train.batch_size);
        detail::read_field(t, "n_updates", cfg.train.n_updates);
        detail::read_field(t, "eps_tr", cfg.train.eps_tr);
        detail::read_field(t, "eps_val", cfg.train.eps_val);
    }

    if (j.contains("weights")) {
        const auto& w = j.at("weights");
        detail::check_keys(w, {"lambda_indep", "lambda_manifold", "mode", "baseline",
                               "baseline_weight", "dropout_rate"},
                           "weights");
        detail::read_field(w, "lambda_indep", cfg.weights.lambda_indep);
        detail::read_field(w, "lambda_manifold", cfg.weights.lambda_manifold);
        if (w.contains("mode")) {
            const std::string mode = w.at("mode").get<std::string>();
            if (mode == "soft") {
                cfg.weights.mode = RegularizerMode::Soft;
            } else if (mode == "hard_projection") {
                cfg.weights.mode = RegularizerMode::HardProjection;
            } else {
                fail(ErrorKind::InvalidConfig, "weights.mode must be 'soft' or 'hard_projection'");
            }
        }
        if (w.contains("baseline")) {
            cfg.weights.baseline = baseline_from_name(w.at("baseline").get<std::string>());
        }
        detail::read_field(w, "baseline_weight", cfg.weights.baseline_weight);
        detail::read_field(w, "dropout_rate", cfg.weights.dropout_rate);
    }

    if (j.contains("finetune")) {
        const auto& f = j.at("finetune");
        detail::check_keys(f, {"enabled", "lr", "batch_size", "n_updates", "from_scratch"},
                           "finetune");
        detail::read_field(f, "enabled", cfg.finetune.enabled);
        detail::read_field(f, "lr", cfg.finetune.lr);
        detail::read_field(f, "batch_size", cfg.finetune.batch_size);
        detail::read_field(f, "n_updates", cfg.finetune.n_updates);
        detail::read_field(f, "from_scratch", cfg.finetune.from_scratch);
    }

    if (j.contains("distill")) {
        const auto& d = j.at("distill");
        detail::check_keys(d, {"enabled", "max_combinations", "n_updates", "from_scratch"},
                           "distill");
        detail::read_field(d, "enabled", cfg.distill.enabled);
        detail::read_field(d, "max_combinations", cfg.distill.max_combinations);
        detail::read_field(d, "n_updates", cfg.distill.n_updates);
        detail::read_field(d, "from_scratch", cfg.distill.from_scratch);
    }

    if (j.contains("evaluate")) {
        const auto& e = j.at("evaluate");
        detail::check_keys(e, {"delta", "spearman_sample", "dim_k"}, "evaluate");
        detail::read_field(e, "delta", cfg.evaluate.delta);
        detail::read_field(e, "spearman_sample", cfg.evaluate.spearman_sample);
        detail::read_field(e, "dim_k", cfg.evaluate.dim_k);
    }

    cfg.data.validate();
    cfg.weights.validate();
    return cfg;
}

inline RunConfig load_run_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) fail(ErrorKind::FileError, "cannot open config: " + path);
    ordered_json j;
    try {
        f >> j;
    } catch (const std::exception& e) {
        fail(ErrorKind::InvalidConfig, "config parse error in " + path + ": " + e.what());
    }
    return parse_run_config(j);
}

inline ordered_json run_config_to_json(const RunConfig& cfg) {
    ordered_json j;
    j["schema_version"] = 1;
    j["seed"] = cfg.seed;
    j["data"] = {{"n_tiles", cfg.data.n_tiles},
                 {"tile_side", cfg.data.tile_side},
                 {"margins", cfg.data.margins},
                 {"noise", cfg.data.noise},
                 {"nuisance_rank", cfg.data.nuisance_rank},
                 {"n_train", cfg.data.n_train},
                 {"n_val", cfg.data.n_val},
                 {"n_pool", cfg.data.n_pool},
                 {"n_test", cfg.data.n_test}};
    j["manifold"] = {{"kind", cfg.manifold.kind},
                     {"n_components", cfg.manifold.n_components},
                     {"ae_hidden", cfg.manifold.ae_hidden},
                     {"ae_latent", cfg.manifold.ae_latent},
                     {"ae_variational", cfg.manifold.ae_variational},
                     {"ae_kl_weight", cfg.manifold.ae_kl_weight},
                     {"ae_lr", cfg.manifold.ae_lr},
                     {"ae_batch_size", cfg.manifold.ae_batch_size},
                     {"ae_epochs", cfg.manifold.ae_epochs}};
    j["train"] = {{"n_models", cfg.train.n_models},
                  {"hidden", cfg.train.hidden},
                  {"leaky_slope", cfg.train.leaky_slope},
                  {"lr", cfg.train.lr},
                  {"batch_size", cfg.train.batch_size},
                  {"n_updates", cfg.train.n_updates},
                  {"eps_tr", cfg.train.eps_tr},
                  {"eps_val", cfg.train.eps_val}};
    j["weights"] = {{"lambda_indep", cfg.weights.lambda_indep},
                    {"lambda_manifold", cfg.weights.lambda_manifold},
                    {"mode", cfg.weights.mode == RegularizerMode::Soft ? "soft" : "hard_projection"},
                    {"baseline", baseline_name(cfg.weights.baseline)},
                    {"baseline_weight", cfg.weights.baseline_weight},
                    {"dropout_rate", cfg.weights.dropout_rate}};
    j["finetune"] = {{"enabled", cfg.finetune.enabled},
                     {"lr", cfg.finetune.lr},
                     {"batch_size", cfg.finetune.batch_size},
                     {"n_updates", cfg.finetune.n_updates},
                     {"from_scratch", cfg.finetune.from_scratch}};
    j["distill"] = {{"enabled", cfg.distill.enabled},
                    {"max_combinations", cfg.distill.max_combinations},
                    {"n_updates", cfg.distill.n_updates},
                    {"from_scratch", cfg.distill.from_scratch}};
    j["evaluate"] = {{"delta", cfg.evaluate.delta},
                     {"spearman_sample", cfg.evaluate.spearman_sample},
                     {"dim_k", cfg.evaluate.dim_k}};
    return j;
}

} // namespace underspec
