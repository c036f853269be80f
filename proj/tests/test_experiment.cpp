#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "helpers.hpp"
#include "sblab/experiment.hpp"
#include "sblab/io.hpp"

using namespace sblab;
namespace fs = std::filesystem;

namespace {

ordered_json smoke_config() {
    ordered_json j;
    j["spectrum"]["geometric"]["gamma"] = 0.5;
    j["spectrum"]["geometric"]["d"] = 2;
    j["n_ctx"] = 8;
    j["heads"] = 2;
    j["arms"]["gd"] = {{"steps", 400}, {"batch_size", 8}, {"loss_every", 5}, {"snapshot_every", 100}};
    j["arms"]["sam"] = {{"steps", 400}, {"batch_size", 8}, {"loss_every", 5}, {"snapshot_every", 100}};
    j["arms"]["gd_upsampled"] =
        {{"steps", 400}, {"batch_size", 8}, {"loss_every", 5}, {"snapshot_every", 100}};
    j["dataset"]["size"] = 32;
    j["dataset"]["proportions"] = {0.5, 0.5};
    j["upsampling"]["checkpoints"] = 3;
    j["seeds"]["base"] = 42;
    j["seeds"]["count"] = 2;
    j["eval"]["size"] = 500;
    return j;
}

void run_cli(const std::string& args, int expected_exit) {
    const std::string cmd = std::string(SBLAB_CLI_PATH) + " " + args + " >/dev/null 2>&1";
    const int rc = std::system(cmd.c_str());
    REQUIRE(WIFEXITED(rc));
    CHECK(WEXITSTATUS(rc) == expected_exit);
}

}  // namespace

TEST_CASE("run config parsing") {
    SECTION("empty object gives documented defaults") {
        auto cfg = parse_run_config(ordered_json::object());
        CHECK(cfg.spectrum.dim() == 4);
        CHECK(cfg.spectrum.eigenvalues[1] == 0.5);
        CHECK(cfg.n_ctx == 32);
        CHECK(cfg.heads == 4);
        CHECK(cfg.seed_count == 25);
        CHECK(cfg.arms.at("sam").kind == OptimizerKind::sam_exact);
        CHECK(cfg.arms.at("sam").rho > 0.0);
        CHECK(cfg.arms.at("gd").rho == 0.0);
        CHECK(cfg.proportions.size() == 4);
    }
    SECTION("unknown fields are errors, including nested ones") {
        ordered_json j;
        j["spectrim"] = 1;
        CHECK_THROWS_AS(parse_run_config(j), ConfigError);
        ordered_json j2;
        j2["eval"]["sized"] = 10;
        CHECK_THROWS_AS(parse_run_config(j2), ConfigError);
        ordered_json j3;
        j3["arms"]["gd"]["learning_rote"] = 0.1;
        CHECK_THROWS_AS(parse_run_config(j3), ConfigError);
        ordered_json j4;
        j4["arms"]["adamw"] = ordered_json::object();
        CHECK_THROWS_WITH(parse_run_config(j4), Catch::Matchers::ContainsSubstring("unknown arm"));
    }
    SECTION("explicit eigenvalue lists are validated") {
        ordered_json j;
        j["spectrum"]["eigenvalues"] = {1.0, 1.0};
        CHECK_THROWS_AS(parse_run_config(j), ConfigError);
        j["spectrum"]["eigenvalues"] = {2.0, 1.0};
        CHECK(parse_run_config(j).spectrum.dim() == 2);
        j["spectrum"]["geometric"] = {{"gamma", 0.5}, {"d", 2}};
        CHECK_THROWS_WITH(parse_run_config(j),
                          Catch::Matchers::ContainsSubstring("either geometric or eigenvalues"));
    }
    SECTION("invalid numbers are config errors") {
        ordered_json j;
        j["arms"]["gd"]["learning_rate"] = -1.0;
        CHECK_THROWS_AS(parse_run_config(j), ConfigError);
        ordered_json j2;
        j2["dataset"]["proportions"] = {1.0};
        CHECK_THROWS_AS(parse_run_config(j2), ConfigError);
    }
}

TEST_CASE("config hash is stable and sensitive") {
    auto a = parse_run_config(ordered_json::object());
    auto b = parse_run_config(ordered_json::object());
    CHECK(config_hash(a) == config_hash(b));
    b.arms["gd"].learning_rate *= 2.0;
    CHECK(config_hash(a) != config_hash(b));
}

TEST_CASE("trace CSV round trip") {
    auto cfg = parse_run_config(smoke_config());
    Rng eval_rng(cfg.eval_seed);
    auto eval = LossQuadratic::from_tasks(
        sample_eval_tasks(cfg.spectrum, cfg.n_ctx, cfg.eval_size, eval_rng));
    auto res = run_single(cfg, "gd", 42, eval);
    const std::string csv = trace_to_csv(res.trace);
    auto back = trace_from_csv(csv, res.trace.eta);
    REQUIRE(back.step_losses.size() == res.trace.step_losses.size());
    CHECK(back.dim == res.trace.dim);
    for (std::size_t i = 0; i < back.step_losses.size(); ++i) {
        CHECK(back.step_losses[i].first == res.trace.step_losses[i].first);
        CHECK(back.step_losses[i].second == res.trace.step_losses[i].second);
        CHECK(back.feature_progress_series[i].second == res.trace.feature_progress_series[i].second);
    }
    CHECK_THROWS(trace_from_csv("", 1.0));
}

TEST_CASE("model params JSON round trip") {
    Rng rng(5);
    auto p = init_params({InitMode::gaussian, 0.3}, 3, 2, rng);
    auto back = model_from_json(model_to_json(p));
    CHECK(flatten(back) == flatten(p));
}

TEST_CASE("run_single is deterministic and arm-paired") {
    auto cfg = parse_run_config(smoke_config());
    Rng eval_rng(cfg.eval_seed);
    auto eval = LossQuadratic::from_tasks(
        sample_eval_tasks(cfg.spectrum, cfg.n_ctx, cfg.eval_size, eval_rng));
    auto a = run_single(cfg, "gd", 42, eval);
    auto b = run_single(cfg, "gd", 42, eval);
    CHECK(trace_to_csv(a.trace) == trace_to_csv(b.trace));
    // paired arms share the initial parameters
    auto s = run_single(cfg, "sam", 42, eval);
    CHECK(flatten(a.trace.snapshots.front().second) == flatten(s.trace.snapshots.front().second));
}

TEST_CASE("run_fig1 smoke: files, medians, reruns") {
    auto cfg = parse_run_config(smoke_config());
    const auto dir = fs::temp_directory_path() / "sblab_fig1_smoke";
    fs::remove_all(dir);
    cfg.out_dir = (dir / "a").string();
    auto summary = run_fig1(cfg);

    SECTION("expected outputs exist") {
        const std::string hash = config_hash(cfg);
        CHECK(fs::exists(dir / "a" / (hash + "_gd_42.csv")));
        CHECK(fs::exists(dir / "a" / (hash + "_sam_43.csv")));
        CHECK(fs::exists(dir / "a" / (hash + "_gd_upsampled_42.csv")));
        CHECK(fs::exists(dir / "a" / (hash + "_curves.csv")));
        CHECK(fs::exists(dir / "a" / (hash + "_summary.json")));
    }
    SECTION("summary medians match the per-seed rows in the same file") {
        const auto j = ordered_json::parse(
            read_text_file((dir / "a" / (config_hash(cfg) + "_summary.json")).string()));
        for (const auto& [arm, data] : j.at("arms").items()) {
            auto losses = data.at("final_test_losses").get<std::vector<double>>();
            std::sort(losses.begin(), losses.end());
            const double med = losses.size() % 2 == 1
                                   ? losses[losses.size() / 2]
                                   : 0.5 * (losses[losses.size() / 2 - 1] + losses[losses.size() / 2]);
            CHECK(data.at("median_final_test_loss").get<double>() == Catch::Approx(med));
        }
    }
    SECTION("rerun is byte-identical") {
        auto cfg2 = cfg;
        cfg2.out_dir = (dir / "b").string();
        run_fig1(cfg2);
        const std::string hash = config_hash(cfg);
        for (const std::string& name :
             {hash + "_gd_42.csv", hash + "_curves.csv", hash + "_summary.json"}) {
            CHECK(read_text_file((dir / "a" / name).string()) ==
                  read_text_file((dir / "b" / name).string()));
        }
    }
    fs::remove_all(dir);
}

TEST_CASE("theory suite handles admissible and skipped cells") {
    TheoryGridConfig grid;
    grid.count = 64;
    grid.seed = 7;
    auto rep = run_theory_suite(grid);
    CHECK(rep.checked + rep.skipped == 64);
    CHECK(rep.passed());
    CHECK(rep.entropy_violations == 0);

    SECTION("cells violating the early-phase hypothesis are skipped, not failed") {
        TheoryGridConfig tight = grid;
        tight.c = 0.011;  // eps barely below c*lambda^(-1/3) only for small lambda
        auto rep2 = run_theory_suite(tight);
        CHECK(rep2.skipped > 0);
        CHECK(rep2.passed());
        CHECK(rep2.rows_csv.find("precondition-skipped") != std::string::npos);
    }
    SECTION("empty grid is a config error") {
        TheoryGridConfig bad = grid;
        bad.count = 0;
        CHECK_THROWS_AS(run_theory_suite(bad), ConfigError);
    }
}

TEST_CASE("ode check on a one-feature spectrum") {
    RunConfig cfg = parse_run_config(ordered_json::object());
    cfg.spectrum = make_spectrum(1, {1.0});
    cfg.heads = 1;
    cfg.n_ctx = 1000000;
    auto rows = run_ode_vs_simulation(cfg);
    REQUIRE(rows.size() == 2);
    for (const auto& r : rows) {
        CHECK(r.ok);
        CHECK(r.max_rel_dev < 0.05);
    }
}

TEST_CASE("CLI exit codes and determinism") {
    const auto dir = fs::temp_directory_path() / "sblab_cli_test";
    fs::remove_all(dir);
    fs::create_directories(dir);
    const std::string cfg_path = (dir / "cfg.json").string();
    write_text_file(cfg_path, smoke_config().dump(2));

    SECTION("config errors exit 2") {
        write_text_file((dir / "bad.json").string(), "{\"not_a_field\": 1}");
        run_cli("simulate --config " + (dir / "bad.json").string(), 2);
        write_text_file((dir / "mangled.json").string(), "{oops");
        run_cli("theory --config " + (dir / "mangled.json").string(), 2);
    }
    SECTION("theory subcommand succeeds with exit 0") {
        ordered_json j = smoke_config();
        j["theory"]["count"] = 50;
        write_text_file((dir / "t.json").string(), j.dump());
        run_cli("theory --config " + (dir / "t.json").string() + " --out " + (dir / "t").string(),
                0);
        CHECK(fs::exists(dir / "t" / "theory_spectra.csv"));
    }
    SECTION("simulate is byte-deterministic across reruns") {
        run_cli("simulate --config " + cfg_path + " --seed 42 --out " + (dir / "r1").string(), 0);
        run_cli("simulate --config " + cfg_path + " --seed 42 --out " + (dir / "r2").string(), 0);
        auto cfg = parse_run_config(smoke_config());
        const std::string name = config_hash(cfg) + "_gd_42.csv";
        CHECK(read_text_file((dir / "r1" / name).string()) ==
              read_text_file((dir / "r2" / name).string()));
    }
    SECTION("cluster and upsample round trip through files") {
        std::ostringstream jsonl;
        Rng rng(9);
        for (int i = 0; i < 40; ++i) {
            const bool hard = i < 20;
            ordered_json j;
            j["id"] = "e" + std::to_string(i);
            std::vector<double> losses;
            for (int c = 0; c < 4; ++c)
                losses.push_back((hard ? 6.0 : 1.0) + 0.05 * rng.normal());
            j["losses"] = losses;
            jsonl << j.dump() << "\n";
        }
        const std::string traj = (dir / "traj.jsonl").string();
        const std::string plan = (dir / "plan.json").string();
        write_text_file(traj, jsonl.str());
        run_cli("cluster --in " + traj + " --features trajectory --seed 3 --out " + plan, 0);
        auto loaded = import_plan(plan);
        CHECK(loaded.n_hard == 20);
        CHECK(loaded.n_easy == 20);
        run_cli("upsample --plan " + plan + " --factor 3", 0);
        auto updated = import_plan(plan);
        for (const auto& item : updated.items)
            CHECK(item.multiplicity == (item.hard ? 3 : 1));
    }
    SECTION("metrics reads a trace CSV and writes a report") {
        run_cli("simulate --config " + cfg_path + " --seed 42 --out " + (dir / "m").string(), 0);
        auto cfg = parse_run_config(smoke_config());
        const std::string trace_path =
            (dir / "m" / (config_hash(cfg) + "_gd_42.csv")).string();
        const std::string rep_path = (dir / "report.json").string();
        run_cli("metrics --config " + cfg_path + " --in " + trace_path + " --out " + rep_path, 0);
        const auto rep = ordered_json::parse(read_text_file(rep_path));
        CHECK(rep.contains("entropy"));
        CHECK(rep.at("method") == "feature_progress");
        CHECK(rep.at("M").get<int>() >= 1);
    }
    SECTION("environment variable overrides the output directory") {
        const std::string env_dir = (dir / "env_out").string();
        const std::string cmd = "SB_LAB_OUT=" + env_dir + " " + std::string(SBLAB_CLI_PATH) +
                                " simulate --config " + cfg_path + " --seed 42 --out " +
                                (dir / "ignored").string() + " >/dev/null 2>&1";
        REQUIRE(std::system(cmd.c_str()) == 0);
        auto cfg = parse_run_config(smoke_config());
        CHECK(fs::exists(fs::path(env_dir) / (config_hash(cfg) + "_gd_42.csv")));
        CHECK_FALSE(fs::exists(dir / "ignored"));
    }
    fs::remove_all(dir);
}
