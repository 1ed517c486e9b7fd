#include <catch2/catch_amalgamated.hpp>

#include "glyphdiff/schedule.hpp"

using namespace glyphdiff;

namespace {
TensorPtr<double> filled(std::vector<int> shape, double v) { return make_tensor<double>(std::move(shape), v); }
}

TEST_CASE("linear schedule endpoints and monotone cumulative product") {
    auto s = make_linear_schedule(1000);
    REQUIRE(s.steps() == 1000);
    REQUIRE(s.betas.front() == Catch::Approx(1e-4));
    REQUIRE(s.betas.back() == Catch::Approx(0.02));
    for (int t = 1; t < 1000; t++) {
        REQUIRE(s.betas[t] > s.betas[t - 1]);
        REQUIRE(s.alpha_bars[t] < s.alpha_bars[t - 1]);
        REQUIRE(s.alpha_bars[t] > 0.0);
    }
    REQUIRE(s.alpha_bars[0] == Catch::Approx(1.0 - 1e-4));
}

TEST_CASE("four-step toy schedule table") {
    auto s = NoiseSchedule::from_betas({0.1, 0.2, 0.3, 0.4});
    REQUIRE(s.alphas == std::vector<double>{0.9, 0.8, 0.7, 0.6});
    REQUIRE(s.alpha_bars[0] == Catch::Approx(0.9).epsilon(1e-12));
    REQUIRE(s.alpha_bars[1] == Catch::Approx(0.72).epsilon(1e-12));
    REQUIRE(s.alpha_bars[2] == Catch::Approx(0.504).epsilon(1e-12));
    REQUIRE(s.alpha_bars[3] == Catch::Approx(0.3024).epsilon(1e-12));
}

TEST_CASE("forward diffusion at a pinned point") {
    auto s = NoiseSchedule::from_betas({0.1, 0.2, 0.3, 0.4});
    auto x0 = filled({1, 2, 2}, 1.0);
    auto eps = filled({1, 2, 2}, 1.0);
    auto xt = forward_diffuse(x0, 2, eps, s);
    double want = std::sqrt(0.504) + std::sqrt(1.0 - 0.504);
    for (auto v : xt->v) REQUIRE(v == Catch::Approx(want).epsilon(1e-12));
    REQUIRE(want == Catch::Approx(1.4142).margin(5e-4));

    // x_t collapses to x0 when eps has zero weight: t=0 keeps most signal
    auto x0b = filled({1, 2, 2}, 0.25);
    auto zero = filled({1, 2, 2}, 0.0);
    auto x1 = forward_diffuse(x0b, 0, zero, s);
    for (auto v : x1->v) REQUIRE(v == Catch::Approx(0.25 * std::sqrt(0.9)));
}

TEST_CASE("reconstruct_x0 inverts forward_diffuse exactly") {
    auto s = NoiseSchedule::from_betas({0.1, 0.2, 0.3, 0.4});
    auto xt = filled({1, 2, 2}, 1.0);
    auto eps = filled({1, 2, 2}, 1.0);
    auto x0 = reconstruct_x0(xt, 3, eps, s);
    double want = (1.0 - std::sqrt(1.0 - 0.3024)) / std::sqrt(0.3024);
    for (auto v : x0->v) REQUIRE(v == Catch::Approx(want).epsilon(1e-12));
    REQUIRE(want == Catch::Approx(0.2996).margin(5e-4));

    // round trip at every t with a non-trivial pair
    auto a = filled({1, 3, 3}, 0.0);
    auto e = filled({1, 3, 3}, 0.0);
    for (int i = 0; i < 9; i++) {
        a->v[i] = 0.1 * i - 0.4;
        e->v[i] = 0.2 * i - 0.9;
    }
    for (int t = 0; t < 4; t++) {
        auto noised = forward_diffuse(a, t, e, s);
        auto back = reconstruct_x0(noised, t, e, s);
        for (int i = 0; i < 9; i++) REQUIRE(back->v[i] == Catch::Approx(a->v[i]).margin(1e-12));
    }
}

TEST_CASE("reverse step mean and noise weighting") {
    auto s = NoiseSchedule::from_betas({0.1, 0.2, 0.3, 0.4});
    auto xt = filled({1, 2, 2}, 1.0);
    auto eps = filled({1, 2, 2}, 1.0);
    auto z0 = filled({1, 2, 2}, 0.0);
    auto prev = reverse_step(xt, 1, eps, z0, s);
    double want = (1.0 / std::sqrt(0.8)) * (1.0 - 0.2 / std::sqrt(1.0 - 0.72));
    for (auto v : prev->v) REQUIRE(v == Catch::Approx(want).epsilon(1e-12));
    REQUIRE(want == Catch::Approx(0.6955).margin(5e-4));

    // sigma_0 = 0: the last step ignores z entirely
    auto zbig = filled({1, 2, 2}, 123.0);
    auto p0 = reverse_step(xt, 0, eps, zbig, s);
    auto p0z = reverse_step(xt, 0, eps, z0, s);
    for (int i = 0; i < 4; i++) REQUIRE(p0->v[i] == p0z->v[i]);

    // at t>0, sigma matches the posterior formula and z enters linearly
    double sig1 = std::sqrt(0.2 * (1.0 - 0.9) / (1.0 - 0.72));
    REQUIRE(s.sigma(1) == Catch::Approx(sig1).epsilon(1e-12));
    auto z1 = filled({1, 2, 2}, 1.0);
    auto p1 = reverse_step(xt, 1, eps, z1, s);
    for (int i = 0; i < 4; i++) REQUIRE(p1->v[i] - prev->v[i] == Catch::Approx(sig1).epsilon(1e-9));
}

TEST_CASE("timestep bounds are enforced") {
    auto s = make_linear_schedule(10);
    auto x = filled({1, 1, 1}, 0.0);
    REQUIRE_THROWS_AS(forward_diffuse(x, 10, x, s), DomainError);
    REQUIRE_THROWS_AS(forward_diffuse(x, -1, x, s), DomainError);
    REQUIRE_THROWS_AS(s.sigma(10), DomainError);
}

TEST_CASE("half log-SNR is strictly decreasing in t") {
    auto s = make_linear_schedule(100);
    for (int t = 1; t < 100; t++) REQUIRE(s.half_log_snr(t) < s.half_log_snr(t - 1));
}
