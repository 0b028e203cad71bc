#include <catch2/catch_amalgamated.hpp>

#include "helpers.hpp"
#include "underspec/evaluate.hpp"
#include "underspec/training.hpp"

using namespace underspec;
using testutil::fd_param_gradient;
using testutil::rel_err;

static Batch slice_batch_for_tests(const Batch& b, std::size_t from, std::size_t to) {
    Batch out;
    const std::size_t d = b.d_in();
    out.inputs = Tensor({to - from, d});
    for (std::size_t i = from; i < to; ++i) {
        const double* row = b.inputs.row(i);
        std::copy(row, row + d, out.inputs.row(i - from));
    }
    out.labels.assign(b.labels.begin() + from, b.labels.begin() + to);
    return out;
}

static Batch random_batch(Rng& rng, std::size_t n, std::size_t d) {
    Batch b;
    b.inputs = Tensor({n, d});
    for (double& v : b.inputs.data) v = rng.normal();
    b.labels.resize(n);
    for (auto& y : b.labels) y = rng.bernoulli(0.5) ? 1 : 0;
    return b;
}

static ManifoldModel pca_manifold(Rng& rng, std::size_t d, std::size_t n_comp) {
    Tensor pool({std::max<std::size_t>(64, 4 * d), d});
    for (double& v : pool.data) v = rng.normal();
    return ManifoldModel::from_pca(fit_pca(pool, n_comp));
}

// Checks analytic parameter gradients of the batch objective against central
// finite differences for every parameter of every model.
static void check_param_gradients(const MlpSpec& spec, std::vector<MlpParams> models,
                                  const Batch& batch, const ManifoldModel* manifold,
                                  const LossWeights& weights, double tol = 1e-5) {
    auto [grads, breakdown] = param_gradient(spec, models, batch, manifold, weights);
    (void)breakdown;
    for (std::size_t m = 0; m < models.size(); ++m) {
        auto objective = [&](const MlpParams& p) {
            std::vector<MlpParams> probe = models;
            probe[m] = p;
            ModelSet set{spec, probe};
            return batch_loss(set, batch, manifold, weights).first;
        };
        MlpParams fd = fd_param_gradient(objective, models[m]);
        for (std::size_t l = 0; l < fd.weights.size(); ++l) {
            for (std::size_t i = 0; i < fd.weights[l].data.size(); ++i) {
                INFO("model " << m << " layer " << l << " weight " << i);
                CHECK(rel_err(grads[m].weights[l].data[i], fd.weights[l].data[i]) <= tol);
            }
            for (std::size_t i = 0; i < fd.biases[l].size(); ++i) {
                INFO("model " << m << " layer " << l << " bias " << i);
                CHECK(rel_err(grads[m].biases[l][i], fd.biases[l][i]) <= tol);
            }
        }
    }
}

TEST_CASE("predictive-only gradients match a direct BCE backprop") {
    Rng rng(31);
    MlpSpec spec;
    spec.layer_widths = {4, 3, 1};
    std::vector<MlpParams> models{testutil::random_params(spec, 1),
                                  testutil::random_params(spec, 2)};
    Batch batch = random_batch(rng, 12, 4);
    LossWeights w;  // both lambdas zero
    auto [grads, breakdown] = param_gradient(spec, models, batch, nullptr, w);
    CHECK(breakdown.independence == 0.0);
    CHECK(breakdown.manifold == 0.0);

    // Direct implementation: mean over batch of BCE'(y, f) backprop, 1/M.
    for (std::size_t m = 0; m < models.size(); ++m) {
        MlpParams direct = MlpParams::zeros(spec);
        for (std::size_t i = 0; i < batch.size(); ++i) {
            Vec x(batch.inputs.row(i), batch.inputs.row(i) + 4);
            ForwardTrace tr;
            mlp_forward_into(spec, models[m], x, tr);
            const double scale = (sigmoid(tr.post.back()[0]) - batch.labels[i]) /
                                 (static_cast<double>(batch.size()) * models.size());
            mlp_backward(spec, models[m], tr, Vec{scale}, &direct, nullptr);
        }
        for (std::size_t l = 0; l < direct.weights.size(); ++l) {
            for (std::size_t i = 0; i < direct.weights[l].data.size(); ++i) {
                CHECK(grads[m].weights[l].data[i] ==
                      Catch::Approx(direct.weights[l].data[i]).margin(1e-14));
            }
        }
    }
}

TEST_CASE("single model: independence contributes no gradient") {
    Rng rng(32);
    MlpSpec spec;
    spec.layer_widths = {3, 2, 1};
    std::vector<MlpParams> one{testutil::random_params(spec, 3)};
    Batch batch = random_batch(rng, 6, 3);
    LossWeights base;
    LossWeights with_indep;
    with_indep.lambda_indep = 10.0;
    auto [g0, b0] = param_gradient(spec, one, batch, nullptr, base);
    auto [g1, b1] = param_gradient(spec, one, batch, nullptr, with_indep);
    CHECK(b1.independence == 0.0);
    for (std::size_t l = 0; l < g0[0].weights.size(); ++l) {
        CHECK(g0[0].weights[l].data == g1[0].weights[l].data);
    }
    (void)b0;
}

TEST_CASE("full objective gradient matches finite differences (PCA manifold)") {
    Rng rng(33);
    MlpSpec spec;
    spec.layer_widths = {5, 4, 1};
    std::vector<MlpParams> models{testutil::random_params(spec, 4),
                                  testutil::random_params(spec, 5)};
    Batch batch = random_batch(rng, 8, 5);
    ManifoldModel manifold = pca_manifold(rng, 5, 2);
    LossWeights w;
    w.lambda_indep = 1.0;
    w.lambda_manifold = 1.0;
    check_param_gradients(spec, models, batch, &manifold, w);
}

TEST_CASE("full objective gradient matches finite differences (AE manifold)") {
    Rng rng(34);
    MlpSpec spec;
    spec.layer_widths = {4, 3, 1};
    std::vector<MlpParams> models{testutil::random_params(spec, 6),
                                  testutil::random_params(spec, 7)};
    Batch batch = random_batch(rng, 5, 4);
    Tensor pool({128, 4});
    for (double& v : pool.data) v = rng.uniform(0.2, 0.8);
    AeTrainConfig tc;
    tc.n_epochs = 10;
    tc.batch_size = 64;
    ManifoldModel manifold = ManifoldModel::from_ae(
        train_autoencoder(pool, make_ae_skeleton(4, 2, {6}, false, 0.0, 44), tc, 45));
    LossWeights w;
    w.lambda_indep = 0.8;
    w.lambda_manifold = 1.2;
    check_param_gradients(spec, models, batch, &manifold, w, 2e-5);
}

TEST_CASE("hard projection gradients match finite differences") {
    Rng rng(35);
    MlpSpec spec;
    spec.layer_widths = {5, 3, 1};
    std::vector<MlpParams> models{testutil::random_params(spec, 8),
                                  testutil::random_params(spec, 9)};
    Batch batch = random_batch(rng, 6, 5);
    ManifoldModel manifold = pca_manifold(rng, 5, 3);
    LossWeights w;
    w.lambda_indep = 1.5;
    w.mode = RegularizerMode::HardProjection;
    check_param_gradients(spec, models, batch, &manifold, w);
}

TEST_CASE("grad-norm baseline penalties differentiate correctly") {
    Rng rng(36);
    MlpSpec spec;
    spec.layer_widths = {4, 3, 1};
    std::vector<MlpParams> models{testutil::random_params(spec, 10)};
    Batch batch = random_batch(rng, 6, 4);
    LossWeights l2;
    l2.baseline = BaselineKind::GradL2;
    l2.baseline_weight = 0.5;
    check_param_gradients(spec, models, batch, nullptr, l2);

    LossWeights sd;
    sd.baseline = BaselineKind::SpectralDecoupling;
    sd.baseline_weight = 0.3;
    check_param_gradients(spec, models, batch, nullptr, sd);
}

TEST_CASE("three models exercise the pairwise sum correctly") {
    Rng rng(37);
    MlpSpec spec;
    spec.layer_widths = {4, 2, 1};
    std::vector<MlpParams> models{testutil::random_params(spec, 11),
                                  testutil::random_params(spec, 12),
                                  testutil::random_params(spec, 13)};
    Batch batch = random_batch(rng, 4, 4);
    LossWeights w;
    w.lambda_indep = 2.0;
    check_param_gradients(spec, models, batch, nullptr, w);
}

TEST_CASE("worker count does not change results") {
    Rng rng(38);
    MlpSpec spec;
    spec.layer_widths = {6, 4, 1};
    std::vector<MlpParams> models;
    for (int m = 0; m < 4; ++m) models.push_back(testutil::random_params(spec, 50 + m));
    Batch batch = random_batch(rng, 16, 6);
    ManifoldModel manifold = pca_manifold(rng, 6, 3);
    LossWeights w;
    w.lambda_indep = 1.0;
    w.lambda_manifold = 2.0;
    auto [g1, b1] = param_gradient(spec, models, batch, &manifold, w, 1);
    auto [g3, b3] = param_gradient(spec, models, batch, &manifold, w, 3);
    CHECK(b1.total() == b3.total());
    for (std::size_t m = 0; m < models.size(); ++m) {
        for (std::size_t l = 0; l < g1[m].weights.size(); ++l) {
            CHECK(g1[m].weights[l].data == g3[m].weights[l].data);
        }
    }
}

TEST_CASE("training with lambdas off equals independent ERM trajectories") {
    Rng rng(39);
    MlpSpec spec;
    spec.layer_widths = {4, 3, 1};
    Batch train = random_batch(rng, 64, 4);
    Batch val = random_batch(rng, 16, 4);

    ModelSet init2;
    init2.spec = spec;
    init2.params = {testutil::random_params(spec, 61), testutil::random_params(spec, 62)};

    TrainConfig cfg;
    cfg.n_models = 2;
    cfg.spec = spec;
    cfg.batch_size = 16;
    cfg.n_updates = 40;
    cfg.seed = 5;

    TrainResult joint = train_models(cfg, train, val, nullptr, 1, &init2);

    for (std::size_t m = 0; m < 2; ++m) {
        ModelSet init1;
        init1.spec = spec;
        init1.params = {init2.params[m]};
        TrainConfig solo = cfg;
        solo.n_models = 1;
        TrainResult single = train_models(solo, train, val, nullptr, 1, &init1);
        for (std::size_t l = 0; l < spec.n_layers(); ++l) {
            CHECK(joint.models.params[m].weights[l].data == single.models.params[0].weights[l].data);
            CHECK(joint.models.params[m].biases[l] == single.models.params[0].biases[l]);
        }
    }
}

TEST_CASE("same init seed for all models collapses them at lambda zero") {
    Rng rng(40);
    MlpSpec spec;
    spec.layer_widths = {3, 2, 1};
    Batch train = random_batch(rng, 32, 3);
    Batch val = random_batch(rng, 8, 3);
    MlpParams shared = testutil::random_params(spec, 71);
    ModelSet init;
    init.spec = spec;
    init.params = {shared, shared, shared};
    TrainConfig cfg;
    cfg.n_models = 3;
    cfg.spec = spec;
    cfg.batch_size = 8;
    cfg.n_updates = 25;
    TrainResult res = train_models(cfg, train, val, nullptr, 1, &init);
    for (std::size_t m = 1; m < 3; ++m) {
        for (std::size_t l = 0; l < spec.n_layers(); ++l) {
            CHECK(res.models.params[m].weights[l].data == res.models.params[0].weights[l].data);
        }
    }
}

TEST_CASE("hard projection with a full-rank PCA equals soft mode with no manifold term") {
    Rng rng(41);
    MlpSpec spec;
    spec.layer_widths = {4, 3, 1};
    Batch train = random_batch(rng, 48, 4);
    Batch val = random_batch(rng, 12, 4);
    Tensor pool({128, 4});
    for (double& v : pool.data) v = rng.normal();
    ManifoldModel manifold = ManifoldModel::from_pca(fit_pca(pool, 4));  // identity projection

    ModelSet init;
    init.spec = spec;
    init.params = {testutil::random_params(spec, 81), testutil::random_params(spec, 82)};

    TrainConfig soft_cfg;
    soft_cfg.n_models = 2;
    soft_cfg.spec = spec;
    soft_cfg.batch_size = 16;
    soft_cfg.n_updates = 30;
    soft_cfg.weights.lambda_indep = 1.0;
    soft_cfg.weights.lambda_manifold = 0.0;

    TrainConfig hard_cfg = soft_cfg;
    hard_cfg.weights.mode = RegularizerMode::HardProjection;

    TrainResult soft = train_models(soft_cfg, train, val, &manifold, 1, &init);
    TrainResult hard = train_models(hard_cfg, train, val, &manifold, 1, &init);
    ModelSet soft_set = soft.models, hard_set = hard.models;
    auto [soft_loss, sb] = batch_loss(soft_set, train, &manifold, soft_cfg.weights);
    auto [hard_loss, hb] = batch_loss(hard_set, train, &manifold, hard_cfg.weights);
    (void)sb;
    (void)hb;
    CHECK(std::abs(soft_loss - hard_loss) <= 1e-10);
    for (std::size_t m = 0; m < 2; ++m) {
        for (std::size_t l = 0; l < spec.n_layers(); ++l) {
            for (std::size_t i = 0; i < soft_set.params[m].weights[l].data.size(); ++i) {
                CHECK(std::abs(soft_set.params[m].weights[l].data[i] -
                               hard_set.params[m].weights[l].data[i]) <= 1e-10);
            }
        }
    }
}

TEST_CASE("independence pressure yields near-orthogonal gradients in 2-D") {
    // Two features, both separable; with the independence loss the two models
    // should split them.
    Rng rng(42);
    const std::size_t n = 256;
    Batch train;
    train.inputs = Tensor({n, 2});
    train.labels.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const int y = rng.bernoulli(0.5) ? 1 : 0;
        const double s = y ? 1.0 : -1.0;
        train.labels[i] = static_cast<std::uint8_t>(y);
        train.inputs.at(i, 0) = s * 1.0 + 0.25 * rng.normal();
        train.inputs.at(i, 1) = s * 1.0 + 0.25 * rng.normal();
    }
    Batch val = slice_batch_for_tests(train, 0, 64);

    MlpSpec spec;
    spec.layer_widths = {2, 4, 1};
    TrainConfig cfg;
    cfg.n_models = 2;
    cfg.spec = spec;
    cfg.batch_size = 64;
    cfg.n_updates = 1500;
    cfg.weights.lambda_indep = 3.0;
    cfg.seed = 9;
    TrainResult res = train_models(cfg, train, val, nullptr, 1);

    std::size_t ok = 0;
    for (std::size_t i = 0; i < n; ++i) {
        Vec x(train.inputs.row(i), train.inputs.row(i) + 2);
        Vec g1 = input_gradient(spec, res.models.params[0], x);
        Vec g2 = input_gradient(spec, res.models.params[1], x);
        if (indep_loss(g1, g2) <= 0.05) ++ok;
    }
    CHECK(static_cast<double>(ok) / n >= 0.95);
}

TEST_CASE("training loss decreases for converged models") {
    Rng rng(43);
    MlpSpec spec;
    spec.layer_widths = {3, 4, 1};
    Batch train = random_batch(rng, 128, 3);
    // Make it learnable: label = sign of first coordinate.
    for (std::size_t i = 0; i < train.size(); ++i) {
        train.labels[i] = train.inputs.at(i, 0) >= 0 ? 1 : 0;
    }
    Batch val = slice_batch_for_tests(train, 0, 32);
    TrainConfig cfg;
    cfg.n_models = 2;
    cfg.spec = spec;
    cfg.batch_size = 32;
    cfg.n_updates = 400;
    TrainResult res = train_models(cfg, train, val, nullptr, 1);
    REQUIRE(res.log.size() >= 4);
    for (std::size_t m = 0; m < 2; ++m) {
        double first = -1.0, last = -1.0;
        for (const auto& row : res.log) {
            if (row.model == m) {
                if (first < 0) first = row.train_loss;
                last = row.train_loss;
            }
        }
        CHECK(last < first);
    }
}

TEST_CASE("model sets round-trip and convergence CSV is written") {
    Rng rng(44);
    MlpSpec spec;
    spec.layer_widths = {3, 2, 1};
    ModelSet set;
    set.spec = spec;
    set.params = {testutil::random_params(spec, 91), testutil::random_params(spec, 92)};
    const std::string path = "/tmp/underspec_test_models.udm2";
    save_model_set(set, path);
    ModelSet loaded = load_model_set(path);
    CHECK(loaded.size() == 2);
    CHECK(loaded.spec.layer_widths == spec.layer_widths);
    for (std::size_t m = 0; m < 2; ++m) {
        for (std::size_t l = 0; l < spec.n_layers(); ++l) {
            CHECK(loaded.params[m].weights[l].data == set.params[m].weights[l].data);
        }
    }
    std::remove(path.c_str());

    ConvergenceLog log{{0, 1, 0.5, 0.6}, {1, 1, 0.4, 0.5}};
    const std::string csv = "/tmp/underspec_test_conv.csv";
    save_convergence_csv(log, csv);
    std::ifstream f(csv);
    std::string header;
    std::getline(f, header);
    CHECK(header == "model,epoch,train_loss,val_loss");
    std::remove(csv.c_str());
}

TEST_CASE("divergence produces an error naming the loss term") {
    MlpSpec spec;
    spec.layer_widths = {2, 1};
    MlpParams p = MlpParams::zeros(spec);
    p.weights[0].at(0, 0) = 1e100;
    p.weights[0].at(0, 1) = 1e100;
    ModelSet set{spec, {p}};
    Batch b;
    // Positive label with a huge positive logit: BCE stays finite (~0) while
    // the squared-logit spectral penalty overflows.
    b.inputs = Tensor({1, 2}, {5e99, 5e99});
    b.labels = {1};
    LossWeights w;
    w.baseline = BaselineKind::SpectralDecoupling;
    w.baseline_weight = 1.0;
    try {
        batch_loss(set, b, nullptr, w);
        FAIL("expected divergence error");
    } catch (const Error& e) {
        CHECK(std::string(e.what()).find("baseline") != std::string::npos);
    }
}
