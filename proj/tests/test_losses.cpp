#include <catch2/catch_amalgamated.hpp>

#include "helpers.hpp"
#include "underspec/losses.hpp"
#include "underspec/training.hpp"

using namespace underspec;
using testutil::random_vec;

TEST_CASE("independence loss on canonical pairs") {
    CHECK(indep_loss({1, 0}, {0, 1}) == Catch::Approx(0.0).margin(1e-12));
    CHECK(indep_loss({1, 0}, {1, 0}) == Catch::Approx(1.0));
    CHECK(indep_loss({1, 0}, {-2, 0}) == Catch::Approx(1.0));
    CHECK(indep_loss({1, 1}, {1, 0}) == Catch::Approx(0.5));
}

TEST_CASE("independence loss is symmetric, bounded, and scale invariant") {
    Rng rng(100);
    for (int t = 0; t < 200; ++t) {
        Vec a = random_vec(6, rng), b = random_vec(6, rng);
        const double ab = indep_loss(a, b);
        CHECK(ab == indep_loss(b, a));
        CHECK(ab >= 0.0);
        CHECK(ab <= 1.0 + 1e-12);
        Vec a2 = a;
        for (double& v : a2) v *= -3.7;
        CHECK(indep_loss(a2, b) == Catch::Approx(ab).margin(1e-9));
    }
}

TEST_CASE("zero gradients fall back to ~0 through the guard") {
    Vec zero(4, 0.0), g{1.0, 2.0, 3.0, 4.0};
    CHECK(indep_loss(zero, g) == Catch::Approx(0.0).margin(1e-9));
    CHECK(indep_loss(zero, zero) == Catch::Approx(0.0).margin(1e-9));
}

TEST_CASE("manifold loss with a full-rank PCA is zero") {
    Rng rng(7);
    Tensor pool({64, 4});
    for (double& v : pool.data) v = rng.normal();
    PcaModel pca = fit_pca(pool, 4);
    ManifoldModel manifold = ManifoldModel::from_pca(pca);
    for (int t = 0; t < 20; ++t) {
        Vec g = random_vec(4, rng);
        CHECK(manifold_loss(random_vec(4, rng), g, manifold) == Catch::Approx(0.0).margin(1e-18));
    }
}

TEST_CASE("manifold loss against a hand projection") {
    PcaModel pca;
    pca.mean = {0.0, 0.0};
    pca.components = Tensor({1, 2}, {1.0, 0.0});
    pca.explained_variance = {1.0};
    ManifoldModel manifold = ManifoldModel::from_pca(pca);
    // proj([3,4]) = [3,0]; squared distance 16.
    CHECK(manifold_loss({0.5, 0.5}, {3.0, 4.0}, manifold) == Catch::Approx(16.0));
    // A vector already in the span projects to itself.
    CHECK(manifold_loss({0.5, 0.5}, {2.0, 0.0}, manifold) == Catch::Approx(0.0).margin(1e-12));
}

TEST_CASE("baseline penalties") {
    Vec g{3.0, -4.0};
    CHECK(baseline_penalty(BaselineKind::GradL1, 0.0, g) == Catch::Approx(7.0));
    CHECK(baseline_penalty(BaselineKind::GradL2, 0.0, g) == Catch::Approx(25.0));
    CHECK(baseline_penalty(BaselineKind::SpectralDecoupling, 2.0, g) == Catch::Approx(4.0));
    Vec zero(2, 0.0);
    CHECK(baseline_penalty(BaselineKind::GradL1, 0.0, zero) == 0.0);
    CHECK(baseline_penalty(BaselineKind::GradL2, 0.0, zero) == 0.0);
    CHECK(baseline_penalty(BaselineKind::None, 2.0, g) == 0.0);
    CHECK(baseline_penalty(BaselineKind::InputDropout, 2.0, g) == 0.0);
}

static Batch tiny_batch(Rng& rng, std::size_t n, std::size_t d) {
    Batch b;
    b.inputs = Tensor({n, d});
    for (double& v : b.inputs.data) v = rng.normal();
    b.labels.resize(n);
    for (auto& y : b.labels) y = rng.bernoulli(0.5) ? 1 : 0;
    return b;
}

TEST_CASE("batch loss with one model and no regularizers is plain BCE") {
    Rng rng(21);
    MlpSpec spec;
    spec.layer_widths = {3, 4, 1};
    ModelSet models{spec, {testutil::random_params(spec, 2)}};
    Batch b = tiny_batch(rng, 16, 3);
    LossWeights w;
    auto [total, breakdown] = batch_loss(models, b, nullptr, w);

    double expect = 0.0;
    for (std::size_t i = 0; i < b.size(); ++i) {
        Vec x(b.inputs.row(i), b.inputs.row(i) + 3);
        expect += bce_logit(b.labels[i], mlp_forward(spec, models.params[0], x));
    }
    expect /= static_cast<double>(b.size());
    CHECK(total == Catch::Approx(expect));
    CHECK(breakdown.independence == 0.0);
    CHECK(breakdown.manifold == 0.0);
}

TEST_CASE("two identical models give independence term 0.5 at lambda 1") {
    Rng rng(22);
    MlpSpec spec;
    spec.layer_widths = {3, 4, 1};
    MlpParams p = testutil::random_params(spec, 5);
    ModelSet models{spec, {p, p}};
    Batch b = tiny_batch(rng, 8, 3);
    LossWeights w;
    w.lambda_indep = 1.0;
    auto [total, breakdown] = batch_loss(models, b, nullptr, w);
    // cos^2 = 1 on both ordered pairs: 2/M^2 = 0.5.
    CHECK(breakdown.independence == Catch::Approx(0.5).margin(1e-9));
    CHECK(total == Catch::Approx(breakdown.predictive + 0.5).margin(1e-9));
}

TEST_CASE("breakdown terms sum to the total") {
    Rng rng(23);
    MlpSpec spec;
    spec.layer_widths = {4, 3, 1};
    ModelSet models{spec, {testutil::random_params(spec, 6), testutil::random_params(spec, 7)}};
    Batch b = tiny_batch(rng, 12, 4);

    Tensor pool({32, 4});
    for (double& v : pool.data) v = rng.normal();
    ManifoldModel manifold = ManifoldModel::from_pca(fit_pca(pool, 2));

    LossWeights w;
    w.lambda_indep = 0.7;
    w.lambda_manifold = 1.3;
    w.baseline = BaselineKind::GradL2;
    w.baseline_weight = 0.11;
    auto [total, breakdown] = batch_loss(models, b, &manifold, w);
    CHECK(total == Catch::Approx(breakdown.predictive + breakdown.independence +
                                 breakdown.manifold + breakdown.baseline)
                       .margin(1e-12));
    CHECK(breakdown.independence > 0.0);
    CHECK(breakdown.manifold > 0.0);
    CHECK(breakdown.baseline > 0.0);
}

TEST_CASE("single model has no independence contribution") {
    Rng rng(24);
    MlpSpec spec;
    spec.layer_widths = {3, 1};
    ModelSet models{spec, {testutil::random_params(spec, 8)}};
    Batch b = tiny_batch(rng, 8, 3);
    LossWeights w;
    w.lambda_indep = 5.0;
    auto [total, breakdown] = batch_loss(models, b, nullptr, w);
    (void)total;
    CHECK(breakdown.independence == 0.0);
}

TEST_CASE("bce of a logit is numerically stable at extremes") {
    CHECK(std::isfinite(bce_logit(1.0, -800.0)));
    CHECK(std::isfinite(bce_logit(0.0, 800.0)));
    CHECK(bce_logit(1.0, 0.0) == Catch::Approx(std::log(2.0)));
}
