#include <catch2/catch_amalgamated.hpp>

#include "helpers.hpp"
#include "underspec/adam.hpp"

using namespace underspec;

static MlpSpec tiny_spec() {
    MlpSpec s;
    s.layer_widths = {2, 1};
    return s;
}

TEST_CASE("zero gradient from a fresh state leaves parameters unchanged") {
    MlpSpec spec = tiny_spec();
    MlpParams p = testutil::random_params(spec, 3);
    MlpParams before = p;
    AdamState st = AdamState::init(spec, 0.01);
    MlpParams zero = MlpParams::zeros(spec);
    adam_step(st, p, zero);
    CHECK(p.weights[0].data == before.weights[0].data);
    CHECK(st.step == 1);
}

TEST_CASE("zero gradient decays accumulated moments") {
    MlpSpec spec = tiny_spec();
    MlpParams p = MlpParams::zeros(spec);
    AdamState st = AdamState::init(spec, 0.01);
    st.m.weights[0].at(0, 0) = 1.0;
    st.v.weights[0].at(0, 0) = 1.0;
    MlpParams zero = MlpParams::zeros(spec);
    adam_step(st, p, zero);
    CHECK(st.m.weights[0].at(0, 0) == Catch::Approx(0.9));
    CHECK(st.v.weights[0].at(0, 0) == Catch::Approx(0.999));
}

TEST_CASE("constant gradient moves parameters against its sign") {
    MlpSpec spec = tiny_spec();
    MlpParams p = MlpParams::zeros(spec);
    AdamState st = AdamState::init(spec, 0.01);
    MlpParams g = MlpParams::zeros(spec);
    g.weights[0].at(0, 0) = 2.5;
    g.weights[0].at(0, 1) = -0.3;
    for (int i = 0; i < 100; ++i) adam_step(st, p, g);
    CHECK(p.weights[0].at(0, 0) < 0.0);
    CHECK(p.weights[0].at(0, 1) > 0.0);
}

TEST_CASE("first step with unit gradient is about -lr") {
    MlpSpec spec = tiny_spec();
    MlpParams p = MlpParams::zeros(spec);
    AdamState st = AdamState::init(spec, 0.1);
    MlpParams g = MlpParams::zeros(spec);
    for (auto& w : g.weights)
        for (double& v : w.data) v = 1.0;
    for (auto& b : g.biases)
        for (double& v : b) v = 1.0;
    adam_step(st, p, g);
    // Bias-corrected m/sqrt(v) is exactly 1 on the first step.
    CHECK(p.weights[0].at(0, 0) == Catch::Approx(-0.1).epsilon(1e-6));
    CHECK(p.biases[0][0] == Catch::Approx(-0.1).epsilon(1e-6));
}

TEST_CASE("non-finite gradients are rejected") {
    MlpSpec spec = tiny_spec();
    MlpParams p = MlpParams::zeros(spec);
    AdamState st = AdamState::init(spec, 0.1);
    MlpParams g = MlpParams::zeros(spec);
    g.weights[0].at(0, 0) = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(adam_step(st, p, g), Error);
}

TEST_CASE("updates are deterministic") {
    MlpSpec spec = tiny_spec();
    MlpParams p1 = testutil::random_params(spec, 11);
    MlpParams p2 = p1;
    AdamState s1 = AdamState::init(spec, 0.002);
    AdamState s2 = AdamState::init(spec, 0.002);
    MlpParams g = testutil::random_params(spec, 12);
    for (int i = 0; i < 10; ++i) {
        adam_step(s1, p1, g);
        adam_step(s2, p2, g);
    }
    CHECK(p1.weights[0].data == p2.weights[0].data);
}
