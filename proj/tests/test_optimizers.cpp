#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "helpers.hpp"
#include "sblab/io.hpp"
#include "sblab/optimizers.hpp"
#include "sblab/sb_metrics.hpp"

using namespace sblab;
using namespace testing_oracles;

TEST_CASE("gd_step") {
    ModelParams p = zero_params(1, 1);
    p.heads[0] = {1.0, {0.5}, {-0.25}};
    GradientSet g;
    g.heads.assign(1, HeadGradient{0.0, {0.0}, {0.0}});

    SECTION("zero gradient leaves params unchanged") {
        auto out = gd_step(p, g, 0.3);
        CHECK(out.heads[0].v == 1.0);
        CHECK(out.heads[0].k[0] == 0.5);
    }
    SECTION("zero learning rate leaves params unchanged") {
        g.heads[0].dv = 2.0;
        auto out = gd_step(p, g, 0.0);
        CHECK(out.heads[0].v == 1.0);
    }
    SECTION("single coordinate arithmetic") {
        g.heads[0].dv = 2.0;
        auto out = gd_step(p, g, 0.1);
        CHECK(out.heads[0].v == Catch::Approx(0.8));
    }
}

TEST_CASE("sam_step_exact on a scalar quadratic") {
    auto grad = [](const std::vector<double>& x) { return std::vector<double>{2.0 * x[0]}; };
    SECTION("hand example") {
        auto out = sam_step_exact({1.0}, grad, 0.1, 0.1);
        CHECK(out[0] == Catch::Approx(0.78).margin(1e-12));
    }
    SECTION("rho=0 is plain GD") {
        auto out = sam_step_exact({1.0}, grad, 0.1, 0.0);
        CHECK(out[0] == Catch::Approx(0.8).margin(1e-15));
    }
    SECTION("tiny gradients skip the perturbation") {
        auto tiny = [](const std::vector<double>&) { return std::vector<double>{1e-15}; };
        auto out = sam_step_exact({1.0}, tiny, 0.1, 0.1);
        CHECK(out[0] == Catch::Approx(1.0 - 0.1 * 1e-15).margin(1e-18));
    }
}

TEST_CASE("sam_step_exact equals gd at rho=0 along a whole run") {
    auto spec = make_spectrum(2, {2.0, 1.0});
    Rng rng(41);
    ModelParams p = init_params({InitMode::gaussian, 0.05}, 2, 2, rng);
    ModelParams a = p, b = p;
    for (int step = 0; step < 50; ++step) {
        a = gd_step(a, population_gradients(a, spec, 8), 0.01);
        b = sam_step_exact(b, spec, 8, 0.01, 0.0);
    }
    CHECK(flatten(a) == flatten(b));
}

TEST_CASE("sam_step_first_order") {
    auto spec = make_spectrum(1, {1.4});
    const int n_ctx = 50;

    SECTION("rho=0 equals gd_step") {
        ModelParams p = zero_params(1, 1);
        p.heads[0] = {0.2, {0.2}, {0.2}};
        auto a = sam_step_first_order(p, spec, n_ctx, 0.01, 0.0, 1);
        auto b = gd_step(p, population_gradients(p, spec, n_ctx), 0.01);
        CHECK(flatten(a) == flatten(b));
    }
    SECTION("update direction matches the early drift to leading order") {
        const double v = 0.01, rho = 1e-3, eta = 1e-3;
        ModelParams p = zero_params(1, 1);
        p.heads[0] = {v, {v}, {v}};
        auto out = sam_step_first_order(p, spec, n_ctx, eta, rho, 1);
        const double dv = (out.heads[0].v - v) / (2.0 * eta);  // tau dv/dt = -(1/2) dL/dv
        EarlyOdeParams ode(spec.eigenvalues[0], rho, 1.0);
        CHECK(rel_err(dv, sam_ode_rhs(v, ode)) < 2e-4);
    }
    SECTION("discrepancy to exact SAM scales as rho^2") {
        auto spec2 = make_spectrum(2, {1.7, 0.6});
        ModelParams p = zero_params(2, 2);
        p.heads[0] = {0.35, {0.3, 0.05}, {0.28, -0.04}};  // head 2 stays inactive
        std::vector<double> log_rho, log_diff;
        for (double rho : {1e-3, 3e-3, 1e-2, 3e-2, 1e-1}) {
            auto exact = sam_step_exact(p, spec2, 10, 1e-3, rho);
            const int active = active_head_index(population_gradients(p, spec2, 10));
            REQUIRE(active == 1);
            auto first = sam_step_first_order(p, spec2, 10, 1e-3, rho, active);
            auto xe = flatten(exact), xf = flatten(first);
            double diff = 0.0;
            for (std::size_t i = 0; i < xe.size(); ++i) diff += (xe[i] - xf[i]) * (xe[i] - xf[i]);
            log_rho.push_back(std::log(rho));
            log_diff.push_back(0.5 * std::log(diff));
        }
        const double slope = fit_slope(log_rho, log_diff);
        CHECK(slope > 1.8);
        CHECK(slope < 2.2);
    }
}

TEST_CASE("init_params") {
    SECTION("ansatz layout") {
        Rng rng(42);
        auto p = init_params({InitMode::ansatz, 0.01}, 2, 2, rng);
        CHECK(p.heads[0].v == 0.01);
        CHECK(p.heads[1].v == 0.01);
        CHECK(p.heads[0].k == std::vector<double>{0.01, 0.0});
        CHECK(p.heads[1].k == std::vector<double>{0.0, 0.01});
        CHECK(p.heads[0].q == p.heads[0].k);
    }
    SECTION("ansatz with more heads than features leaves the rest at zero") {
        Rng rng(42);
        auto p = init_params({InitMode::ansatz, 0.1}, 2, 4, rng);
        CHECK(p.heads[2].v == 0.0);
        CHECK(p.heads[3].k == std::vector<double>{0.0, 0.0});
    }
    SECTION("gaussian variance") {
        Rng rng(43);
        const double sigma0 = 1e-3;
        std::vector<double> draws;
        for (int i = 0; i < 20000; ++i) {
            auto p = init_params({InitMode::gaussian, sigma0}, 1, 1, rng);
            draws.push_back(p.heads[0].v);
            draws.push_back(p.heads[0].k[0]);
            draws.push_back(p.heads[0].q[0]);
        }
        CHECK(std::abs(sample_variance(draws) - 1e-6) / 1e-6 < 0.05);
    }
    SECTION("sigma0 = 0 gives all zeros") {
        Rng rng(44);
        auto p = init_params({InitMode::gaussian, 0.0}, 3, 2, rng);
        for (double x : flatten(p)) CHECK(x == 0.0);
    }
}

TEST_CASE("active_head_index breaks ties toward the lowest index") {
    GradientSet g;
    g.heads.assign(3, HeadGradient{0.0, {0.0}, {0.0}});
    g.heads[1].dv = 2.0;
    g.heads[2].dv = 2.0;
    CHECK(active_head_index(g) == 2);
    g.heads[0].dv = 2.0;
    CHECK(active_head_index(g) == 1);
}

TEST_CASE("train basics") {
    auto spec = make_spectrum(2, {2.0, 1.0});
    const int n_ctx = 8;

    SECTION("zero steps records only the initial state") {
        Rng rng(45);
        OptimizerConfig cfg;
        cfg.steps = 0;
        auto trace = train(init_params({InitMode::gaussian, 0.01}, 2, 2, rng), spec, n_ctx, cfg,
                           nullptr, rng);
        CHECK(trace.step_losses.size() == 1);
        CHECK(trace.step_losses[0].first == 0);
    }
    SECTION("same seed gives bit-identical traces") {
        OptimizerConfig cfg;
        cfg.kind = OptimizerKind::sam_exact;
        cfg.rho = 0.01;
        cfg.grad_mode = GradMode::empirical;
        cfg.batch_size = 4;
        cfg.steps = 200;
        cfg.loss_every = 10;
        auto make = [&] {
            Rng rng(46);
            Rng data_rng = rng.child(1);
            TaskDataset ds;
            for (int i = 0; i < 32; ++i)
                ds.entries.push_back({"e" + std::to_string(i),
                                      project_task(sample_task(spec, n_ctx, data_rng)), 1.0, -1, {}});
            Rng train_rng = rng.child(2);
            Rng init_rng = rng.child(3);
            auto trace = train(init_params({InitMode::gaussian, 0.05}, 2, 2, init_rng), spec, n_ctx,
                               cfg, &ds, train_rng);
            return trace_to_csv(trace);
        };
        CHECK(make() == make());
    }
    SECTION("population GD from small ansatz learns the stronger feature first") {
        Rng rng(47);
        OptimizerConfig cfg;
        cfg.learning_rate = 0.01;
        cfg.steps = 40000;
        cfg.loss_every = 20;
        auto trace = train(init_params({InitMode::ansatz, 0.01}, 2, 2, rng), spec, n_ctx, cfg,
                           nullptr, rng);
        auto times = detect_learning_times(trace, spec, n_ctx, 0.9);
        REQUIRE(times.step[0].has_value());
        REQUIRE(times.step[1].has_value());
        CHECK(*times.step[0] < *times.step[1]);
    }
    SECTION("population loss is non-increasing under small-step GD") {
        Rng rng(48);
        OptimizerConfig cfg;
        cfg.learning_rate = 2e-3;
        cfg.steps = 4000;
        cfg.loss_every = 1;
        auto trace = train(init_params({InitMode::gaussian, 0.05}, 2, 2, rng), spec, n_ctx, cfg,
                           nullptr, rng);
        for (std::size_t i = 1; i < trace.step_losses.size(); ++i)
            CHECK(trace.step_losses[i].second <=
                  trace.step_losses[i - 1].second * (1.0 + 1e-12) + 1e-15);
    }
    SECTION("divergence aborts with a diagnostic") {
        Rng rng(49);
        OptimizerConfig cfg;
        cfg.learning_rate = 50.0;
        cfg.steps = 2000;
        cfg.loss_every = 1;
        ModelParams p = init_params({InitMode::gaussian, 0.5}, 2, 2, rng);
        CHECK_THROWS_WITH(train(p, spec, n_ctx, cfg, nullptr, rng),
                          Catch::Matchers::ContainsSubstring("diverged"));
    }
    SECTION("config validation") {
        OptimizerConfig cfg;
        cfg.kind = OptimizerKind::gd;
        cfg.rho = 0.1;
        CHECK_THROWS(cfg.validate());
        OptimizerConfig cfg2;
        cfg2.kind = OptimizerKind::sam_first_order;
        cfg2.grad_mode = GradMode::empirical;
        cfg2.rho = 0.1;
        CHECK_THROWS(cfg2.validate());
    }
    SECTION("population mode rejects a dataset") {
        Rng rng(50);
        OptimizerConfig cfg;
        cfg.steps = 1;
        TaskDataset ds;
        ds.entries.push_back({"e0", project_task(sample_task(spec, n_ctx, rng)), 1.0, -1, {}});
        CHECK_THROWS(train(zero_params(2, 1), spec, n_ctx, cfg, &ds, rng));
    }
}

TEST_CASE("evaluation quadratic matches direct loss evaluation") {
    auto spec = make_spectrum(3, {1.5, 0.7, 0.3});
    Rng rng(51);
    auto tasks = sample_eval_tasks(spec, 6, 500, rng);
    auto quad = LossQuadratic::from_tasks(tasks);
    for (int trial = 0; trial < 5; ++trial) {
        ModelParams p = init_params({InitMode::gaussian, 0.4}, 3, 2, rng);
        CHECK(rel_err(quad.loss(p), empirical_loss(p, tasks)) < 1e-10);
    }
}
