#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "helpers.hpp"
#include "sblab/sb_metrics.hpp"

using namespace sblab;
using namespace testing_oracles;

namespace {

TrainingTrace synthetic_progress_trace(const std::vector<std::vector<double>>& rows, double eta,
                                       long every) {
    TrainingTrace t;
    t.eta = eta;
    t.dim = static_cast<int>(rows.front().size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        t.feature_progress_series.emplace_back(static_cast<long>(i) * every, rows[i]);
        t.step_losses.emplace_back(static_cast<long>(i) * every, 0.0);
    }
    return t;
}

}  // namespace

TEST_CASE("detect_learning_times") {
    auto spec = make_spectrum(2, {2.0, 1.0});
    const int n_ctx = 8;
    const double t1 = feature_progress_target(spec, n_ctx, 1);
    const double t2 = feature_progress_target(spec, n_ctx, 2);

    SECTION("threshold crossing with unlearned features flagged") {
        auto trace = synthetic_progress_trace(
            {{0.0, 0.0}, {0.5 * t1, 0.0}, {0.95 * t1, 0.1 * t2}, {t1, 0.3 * t2}}, 0.1, 10);
        auto lt = detect_learning_times(trace, spec, n_ctx, 0.9);
        REQUIRE(lt.step[0].has_value());
        CHECK(*lt.step[0] == 20);
        CHECK(*lt.time[0] == Catch::Approx(2.0));
        CHECK_FALSE(lt.step[1].has_value());
        CHECK(lt.n_learned() == 1);
    }
    SECTION("zero-length trace learns nothing") {
        auto trace = synthetic_progress_trace({{0.0, 0.0}}, 0.1, 1);
        auto lt = detect_learning_times(trace, spec, n_ctx, 0.9);
        CHECK(lt.n_learned() == 0);
    }
    SECTION("monotone detection keeps the first crossing") {
        auto trace = synthetic_progress_trace({{0.95 * t1, 0.0}, {0.5 * t1, 0.0}, {t1, 0.0}}, 1.0, 5);
        auto lt = detect_learning_times(trace, spec, n_ctx, 0.9);
        CHECK(*lt.step[0] == 0);
    }
    SECTION("input validation") {
        TrainingTrace empty;
        CHECK_THROWS_WITH(detect_learning_times(empty, spec, n_ctx, 0.9),
                          Catch::Matchers::ContainsSubstring("progress series"));
        auto trace = synthetic_progress_trace({{0.0, 0.0}}, 1.0, 1);
        CHECK_THROWS(detect_learning_times(trace, spec, n_ctx, 1.5));
    }
}

TEST_CASE("detect_loss_drops") {
    SECTION("constant loss has no drops") {
        std::vector<double> losses(500, 2.0);
        CHECK(detect_loss_drops(losses, 11, 0.25).empty());
    }
    SECTION("planted staircase is recovered") {
        std::vector<double> losses;
        for (int i = 0; i < 800; ++i) {
            double level = 3.0;
            if (i >= 200) level = 2.0;
            if (i >= 450) level = 1.2;
            if (i >= 650) level = 0.5;
            losses.push_back(level);
        }
        const int window = 21;
        auto drops = detect_loss_drops(losses, window, 0.25);
        REQUIRE(drops.size() == 3);
        CHECK(std::llabs(static_cast<long long>(drops[0]) - 200) <= window);
        CHECK(std::llabs(static_cast<long long>(drops[1]) - 450) <= window);
        CHECK(std::llabs(static_cast<long long>(drops[2]) - 650) <= window);
    }
    SECTION("noisy staircase still yields the planted count") {
        Rng rng(61);
        std::vector<double> losses;
        for (int i = 0; i < 1200; ++i) {
            double level = 2.5;
            if (i >= 400) level = 1.0;
            if (i >= 800) level = 0.2;
            losses.push_back(level + 0.01 * rng.normal());
        }
        auto drops = detect_loss_drops(losses, 31, 0.25);
        CHECK(drops.size() == 2);
    }
    SECTION("smooth exponential decay yields at most one drop") {
        std::vector<double> losses;
        for (int i = 0; i < 1000; ++i) losses.push_back(2.0 * std::exp(-i / 150.0));
        auto drops = detect_loss_drops(losses, 21, 0.25);
        CHECK(drops.size() <= 1);
    }
    SECTION("parameter validation") {
        CHECK_THROWS(detect_loss_drops({1.0, 0.5}, 0, 0.25));
        CHECK_THROWS(detect_loss_drops({1.0, 0.5}, 5, 0.0));
    }
}

TEST_CASE("entropy_report") {
    SECTION("equal times reach log M") {
        LearningTimes lt;
        lt.method = "feature_progress";
        lt.step = {10, 10, 10};
        lt.time = {4.0, 4.0, 4.0};
        auto rep = entropy_report(lt);
        CHECK(rep.n_learned == 3);
        CHECK(rep.entropy_value == Catch::Approx(std::log(3.0)).margin(1e-12));
    }
    SECTION("single learned feature has zero entropy") {
        LearningTimes lt;
        lt.step = {std::nullopt, 20};
        lt.time = {std::nullopt, 7.0};
        auto rep = entropy_report(lt);
        CHECK(rep.n_learned == 1);
        CHECK(rep.entropy_value == Catch::Approx(0.0).margin(1e-15));
    }
    SECTION("no learned features is an error") {
        LearningTimes lt;
        lt.step = {std::nullopt};
        lt.time = {std::nullopt};
        CHECK_THROWS_WITH(entropy_report(lt), Catch::Matchers::ContainsSubstring("no features"));
    }
}

TEST_CASE("drop detection and alignment on a real run") {
    auto spec = make_spectrum(2, {2.0, 1.0});
    const int n_ctx = 8;
    Rng rng(62);
    Rng init_rng = rng.child(1);
    Rng eval_rng = rng.child(2);
    auto eval = LossQuadratic::from_tasks(sample_eval_tasks(spec, n_ctx, 2000, eval_rng));

    OptimizerConfig cfg;
    cfg.learning_rate = 0.01;
    cfg.steps = 30000;
    cfg.loss_every = 10;
    cfg.snapshot_every = 200;
    Rng train_rng = rng.child(3);
    auto trace = train(init_params({InitMode::gaussian, 0.05}, 2, 2, init_rng), spec, n_ctx, cfg,
                       nullptr, train_rng, &eval);

    std::vector<double> losses;
    for (const auto& [s, l] : trace.step_losses) losses.push_back(l);
    auto drops = detect_loss_drops(losses, 51, 0.25);
    REQUIRE(drops.size() == 2);

    auto lt = detect_learning_times(trace, spec, n_ctx, 0.9);
    CHECK(lt.n_learned() == 2);  // drop count equals learned-feature count
    CHECK(*lt.step[0] < *lt.step[1]);

    auto aligns = drop_alignments(trace, drops, 51 * cfg.loss_every);
    REQUIRE(aligns.size() == 2);
    for (const auto& al : aligns) {
        CHECK(al.cos_k > 0.95);
        CHECK(al.cos_q > 0.95);
    }
    CHECK(aligns[0].head != aligns[1].head);

    SECTION("threshold choice does not change the ordering") {
        auto lt8 = detect_learning_times(trace, spec, n_ctx, 0.8);
        CHECK(*lt8.step[0] < *lt8.step[1]);
        auto rep9 = entropy_report(lt);
        auto rep8 = entropy_report(lt8);
        CHECK(rep9.n_learned == rep8.n_learned);
    }
    SECTION("entropy is invariant under time reparameterization") {
        auto rep = entropy_report(lt);
        auto scaled = trace;
        scaled.eta = trace.eta * 7.0;
        auto rep2 = entropy_report(detect_learning_times(scaled, spec, n_ctx, 0.9));
        CHECK(rep.entropy_value == Catch::Approx(rep2.entropy_value).margin(1e-12));
    }
}
