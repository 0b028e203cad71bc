#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <set>

#include "helpers.hpp"
#include "underspec/evaluate.hpp"
#include "underspec/specialize.hpp"

using namespace underspec;

static Batch make_batch(Rng& rng, std::size_t n, std::size_t d) {
    Batch b;
    b.inputs = Tensor({n, d});
    for (double& v : b.inputs.data) v = rng.uniform();
    b.labels.resize(n);
    for (auto& y : b.labels) y = rng.bernoulli(0.5) ? 1 : 0;
    return b;
}

TEST_CASE("masks follow the per-element magnitude argmax") {
    // Linear models make input gradients explicit: grad = weight row.
    MlpSpec spec;
    spec.layer_widths = {2, 1};
    MlpParams m1 = MlpParams::zeros(spec);
    m1.weights[0] = Tensor({1, 2}, {0.5, -0.1});
    MlpParams m2 = MlpParams::zeros(spec);
    m2.weights[0] = Tensor({1, 2}, {0.2, 0.3});
    ModelSet models{spec, {m1, m2}};
    Rng rng(1);
    Batch data = make_batch(rng, 3, 2);
    MaskSet masks = compute_masks(models, data);
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(masks.get(i, 0, 0) == 1);  // |0.5| > |0.2|
        CHECK(masks.get(i, 0, 1) == 0);
        CHECK(masks.get(i, 1, 0) == 0);
        CHECK(masks.get(i, 1, 1) == 1);  // |0.3| > |0.1|
    }
}

TEST_CASE("single model owns the full mask") {
    MlpSpec spec;
    spec.layer_widths = {3, 1};
    MlpParams m = MlpParams::zeros(spec);
    m.weights[0] = Tensor({1, 3}, {1.0, 2.0, 3.0});
    ModelSet models{spec, {m}};
    Rng rng(2);
    Batch data = make_batch(rng, 2, 3);
    MaskSet masks = compute_masks(models, data);
    for (std::size_t i = 0; i < 2; ++i)
        for (std::size_t e = 0; e < 3; ++e) CHECK(masks.get(i, 0, e) == 1);
}

TEST_CASE("exact gradient ties go to the lowest model index") {
    MlpSpec spec;
    spec.layer_widths = {2, 1};
    MlpParams m = MlpParams::zeros(spec);
    m.weights[0] = Tensor({1, 2}, {0.4, -0.4});
    ModelSet models{spec, {m, m}};
    Rng rng(3);
    Batch data = make_batch(rng, 2, 2);
    MaskSet masks = compute_masks(models, data);
    for (std::size_t i = 0; i < 2; ++i) {
        for (std::size_t e = 0; e < 2; ++e) {
            CHECK(masks.get(i, 0, e) == 1);
            CHECK(masks.get(i, 1, e) == 0);
        }
    }
}

TEST_CASE("mask partition: exactly one model per element") {
    Rng rng(4);
    MlpSpec spec;
    spec.layer_widths = {5, 3, 1};
    ModelSet models{spec,
                    {testutil::random_params(spec, 1), testutil::random_params(spec, 2),
                     testutil::random_params(spec, 3)}};
    Batch data = make_batch(rng, 16, 5);
    MaskSet masks = compute_masks(models, data);
    for (std::size_t i = 0; i < 16; ++i) {
        for (std::size_t e = 0; e < 5; ++e) {
            int sum = 0;
            for (std::size_t m = 0; m < 3; ++m) sum += masks.get(i, m, e);
            CHECK(sum == 1);
        }
    }
}

TEST_CASE("all-ones mask leaves data unchanged") {
    Rng rng(5);
    Batch data = make_batch(rng, 8, 4);
    std::vector<std::uint8_t> ones(8 * 4, 1);
    MaskableDataset out = apply_mask(data, ones, 99);
    CHECK(out.inputs.data == data.inputs.data);
    CHECK(out.labels == data.labels);
}

TEST_CASE("all-zeros mask preserves per-column multisets exactly") {
    Rng rng(6);
    Batch data = make_batch(rng, 16, 3);
    std::vector<std::uint8_t> zeros(16 * 3, 0);
    MaskableDataset out = apply_mask(data, zeros, 123);
    CHECK(out.inputs.data != data.inputs.data);  // something actually moved
    for (std::size_t e = 0; e < 3; ++e) {
        std::multiset<double> before, after;
        for (std::size_t i = 0; i < 16; ++i) {
            before.insert(data.inputs.at(i, e));
            after.insert(out.inputs.at(i, e));
        }
        CHECK(before == after);
    }
}

TEST_CASE("apply_mask is deterministic per seed") {
    Rng rng(7);
    Batch data = make_batch(rng, 12, 4);
    std::vector<std::uint8_t> mask(12 * 4, 0);
    for (std::size_t i = 0; i < mask.size(); i += 3) mask[i] = 1;
    MaskableDataset a = apply_mask(data, mask, 2024);
    MaskableDataset b = apply_mask(data, mask, 2024);
    CHECK(a.inputs.data == b.inputs.data);
    MaskableDataset c = apply_mask(data, mask, 2025);
    CHECK(a.inputs.data != c.inputs.data);
}

TEST_CASE("single-row batches with masked elements stay unchanged") {
    Rng rng(8);
    Batch data = make_batch(rng, 1, 4);
    std::vector<std::uint8_t> mask(4, 0);
    MaskableDataset out = apply_mask(data, mask, 5);
    CHECK(out.inputs.data == data.inputs.data);
}

TEST_CASE("zero fine-tune steps return the model unchanged") {
    Rng rng(9);
    MlpSpec spec;
    spec.layer_widths = {4, 2, 1};
    MlpParams model = testutil::random_params(spec, 10);
    Batch data = make_batch(rng, 16, 4);
    FinetuneConfig cfg;
    cfg.n_updates = 0;
    MlpParams out = finetune(spec, model, data, {}, cfg);
    for (std::size_t l = 0; l < spec.n_layers(); ++l) {
        CHECK(out.weights[l].data == model.weights[l].data);
    }
}

TEST_CASE("fine-tuning on unmasked data behaves as continued ERM") {
    Rng rng(10);
    MlpSpec spec;
    spec.layer_widths = {3, 4, 1};
    Batch data = make_batch(rng, 128, 3);
    for (std::size_t i = 0; i < data.size(); ++i) {
        data.labels[i] = data.inputs.at(i, 1) >= 0.5 ? 1 : 0;
    }
    MlpParams model = testutil::random_params(spec, 11);
    const double before = mean_predictive_risk(spec, model, data.inputs, data.labels);
    FinetuneConfig cfg;
    cfg.n_updates = 500;
    cfg.batch_size = 32;
    MlpParams out = finetune(spec, model, data, {}, cfg);
    const double after = mean_predictive_risk(spec, out, data.inputs, data.labels);
    CHECK(after < before);
}

TEST_CASE("masked fine-tuning keeps a model on its own elements") {
    // Two perfectly informative coordinates; model 0's mask keeps only
    // coordinate 0, so fine-tuning must not grow reliance on coordinate 1.
    Rng rng(11);
    const std::size_t n = 256;
    Batch data;
    data.inputs = Tensor({n, 2});
    data.labels.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const int y = rng.bernoulli(0.5) ? 1 : 0;
        const double s = y ? 1.0 : -1.0;
        data.labels[i] = static_cast<std::uint8_t>(y);
        data.inputs.at(i, 0) = 0.5 + 0.3 * s + 0.02 * rng.normal();
        data.inputs.at(i, 1) = 0.5 + 0.3 * s + 0.02 * rng.normal();
    }
    std::vector<std::uint8_t> mask(n * 2, 0);
    for (std::size_t i = 0; i < n; ++i) mask[i * 2] = 1;  // keep coordinate 0 only

    MlpSpec spec;
    spec.layer_widths = {2, 4, 1};
    FinetuneConfig cfg;
    cfg.n_updates = 800;
    cfg.batch_size = 64;
    cfg.from_scratch = true;
    MlpParams out = finetune(spec, MlpParams::zeros(spec), data, mask, cfg);

    double mass0 = 0.0, mass1 = 0.0;
    for (std::size_t i = 0; i < 32; ++i) {
        Vec x(data.inputs.row(i), data.inputs.row(i) + 2);
        Vec g = input_gradient(spec, out, x);
        mass0 += std::abs(g[0]);
        mass1 += std::abs(g[1]);
    }
    CHECK(mass0 > 5.0 * mass1);
}

TEST_CASE("greedy distillation stops when the combination is not best") {
    Rng rng(12);
    MlpSpec spec;
    spec.layer_widths = {3, 1};
    MlpParams good = MlpParams::zeros(spec);
    good.weights[0] = Tensor({1, 3}, {3.0, 0.0, 0.0});
    MlpParams other = MlpParams::zeros(spec);
    other.weights[0] = Tensor({1, 3}, {0.0, 2.0, 0.0});
    ModelSet models{spec, {good, other}};
    Batch data = make_batch(rng, 32, 3);
    MaskSet masks = compute_masks(models, data);

    // Selector that always prefers the originals.
    SelectorStrategy sel;
    std::map<const void*, double> fixed;
    sel.score = [&models](const MlpSpec&, const MlpParams& p) {
        if (p.weights[0].data == models.params[0].weights[0].data) return 1.0;
        if (p.weights[0].data == models.params[1].weights[0].data) return 0.9;
        return 0.1;
    };
    DistillConfig cfg;
    cfg.train.n_updates = 10;
    cfg.train.batch_size = 8;
    DistillResult res = greedy_distill(models, masks, data, sel, cfg);
    CHECK(res.audit.size() == 1);  // exactly one combination trained
    CHECK(res.best_index == 0);    // best original returned
    CHECK(res.final_set.size() == 3);
}

TEST_CASE("complementary masks OR to all-ones for the combined model") {
    Rng rng(13);
    MlpSpec spec;
    spec.layer_widths = {2, 1};
    MlpParams m1 = MlpParams::zeros(spec);
    m1.weights[0] = Tensor({1, 2}, {1.0, 0.0});
    MlpParams m2 = MlpParams::zeros(spec);
    m2.weights[0] = Tensor({1, 2}, {0.0, 1.0});
    ModelSet models{spec, {m1, m2}};
    Batch data = make_batch(rng, 8, 2);
    MaskSet masks = compute_masks(models, data);
    SelectorStrategy sel;
    sel.score = [](const MlpSpec&, const MlpParams&) { return 0.5; };
    DistillConfig cfg;
    cfg.train.n_updates = 5;
    cfg.train.batch_size = 4;
    cfg.max_combinations = 1;
    DistillResult res = greedy_distill(models, masks, data, sel, cfg);
    REQUIRE(res.final_masks.size() == 3);
    for (std::uint8_t bit : res.final_masks[2]) CHECK(bit == 1);
}

TEST_CASE("distillation terminates within max_combinations") {
    Rng rng(14);
    MlpSpec spec;
    spec.layer_widths = {3, 2, 1};
    ModelSet models{spec,
                    {testutil::random_params(spec, 20), testutil::random_params(spec, 21)}};
    Batch data = make_batch(rng, 16, 3);
    MaskSet masks = compute_masks(models, data);
    SelectorStrategy sel;
    std::size_t calls = 0;
    sel.score = [&calls](const MlpSpec&, const MlpParams&) {
        return static_cast<double>(calls++);  // newest always best
    };
    DistillConfig cfg;
    cfg.max_combinations = 3;
    cfg.train.n_updates = 5;
    cfg.train.batch_size = 8;
    DistillResult res = greedy_distill(models, masks, data, sel, cfg);
    CHECK(res.audit.size() == 3);
    CHECK(res.final_set.size() == 5);
}

TEST_CASE("non-finite selector scores are rejected") {
    Rng rng(15);
    MlpSpec spec;
    spec.layer_widths = {2, 1};
    ModelSet models{spec,
                    {testutil::random_params(spec, 30), testutil::random_params(spec, 31)}};
    Batch data = make_batch(rng, 8, 2);
    MaskSet masks = compute_masks(models, data);
    SelectorStrategy sel;
    sel.score = [](const MlpSpec&, const MlpParams&) {
        return std::numeric_limits<double>::quiet_NaN();
    };
    DistillConfig cfg;
    CHECK_THROWS_AS(greedy_distill(models, masks, data, sel, cfg), Error);
}

TEST_CASE("mask files round-trip") {
    Rng rng(16);
    MaskSet masks;
    masks.n_instances = 5;
    masks.n_models = 3;
    masks.d_in = 11;  // not byte aligned on purpose
    masks.bits.assign(5 * 3 * 11, 0);
    for (std::size_t i = 0; i < 5; ++i) {
        for (std::size_t e = 0; e < 11; ++e) {
            masks.set(i, rng.uniform_index(3), e, 1);
        }
    }
    const std::string path = "/tmp/underspec_test_masks.udm3";
    save_masks(masks, path);
    MaskSet loaded = load_masks(path);
    CHECK(loaded.n_instances == 5);
    CHECK(loaded.n_models == 3);
    CHECK(loaded.d_in == 11);
    CHECK(loaded.bits == masks.bits);
    std::remove(path.c_str());
}
