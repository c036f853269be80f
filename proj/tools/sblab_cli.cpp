// Command-line driver: single runs, the three-arm comparison, theory
// verification, ODE cross-checks, and the clustering/upsampling tools.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "sblab/experiment.hpp"
#include "sblab/io.hpp"

using namespace sblab;

namespace {

std::string resolve_out_dir(const std::string& flag_value, const RunConfig& cfg) {
    if (const char* env = std::getenv("SB_LAB_OUT"); env && *env) return env;
    if (!flag_value.empty()) return flag_value;
    return cfg.out_dir;
}

RunConfig load_config_or_default(const std::string& path) {
    if (path.empty()) return parse_run_config(ordered_json::object());
    return load_run_config(path);
}

int cmd_simulate(const std::string& config_path, const std::string& arm, long seed_override,
                 const std::string& out_flag) {
    RunConfig cfg = load_config_or_default(config_path);
    cfg.out_dir = resolve_out_dir(out_flag, cfg);
    const std::uint64_t seed =
        seed_override >= 0 ? static_cast<std::uint64_t>(seed_override) : cfg.base_seed;

    Rng eval_rng(cfg.eval_seed);
    const auto eval_loss = LossQuadratic::from_tasks(
        sample_eval_tasks(cfg.spectrum, cfg.n_ctx, cfg.eval_size, eval_rng));
    const ArmRunResult res = run_single(cfg, arm, seed, eval_loss);

    std::filesystem::create_directories(cfg.out_dir);
    const std::string stem =
        cfg.out_dir + "/" + config_hash(cfg) + "_" + arm + "_" + std::to_string(seed);
    write_text_file(stem + ".csv", trace_to_csv(res.trace));
    ordered_json snaps = ordered_json::array();
    for (const auto& [step, params] : res.trace.snapshots) {
        ordered_json s;
        s["step"] = step;
        s["params"] = model_to_json(params);
        snaps.push_back(std::move(s));
    }
    write_text_file(stem + "_snapshots.json", snaps.dump(2) + "\n");

    std::cout << "run " << arm << " seed " << seed << ": final test loss "
              << fmt_double(res.final_test_loss) << ", learned " << res.learned_count << "/"
              << cfg.spectrum.dim() << " features, " << res.drop_indices.size()
              << " loss drops\n"
              << "wrote " << stem << ".csv\n";
    return 0;
}

int cmd_fig1(const std::string& config_path, int jobs_override, const std::string& out_flag) {
    RunConfig cfg = load_config_or_default(config_path);
    cfg.out_dir = resolve_out_dir(out_flag, cfg);
    if (jobs_override > 0) cfg.jobs = jobs_override;

    const ExperimentSummary summary = run_fig1(cfg);
    std::cout << "config " << summary.hash << ", " << cfg.seed_count << " seeds\n";
    for (const auto& [arm, med] : summary.median_final_loss) {
        std::cout << "  " << arm << ": median test loss " << fmt_double(med);
        if (summary.median_entropy.at(arm))
            std::cout << ", median entropy " << fmt_double(*summary.median_entropy.at(arm));
        std::cout << "\n";
    }
    std::cout << "outputs in " << cfg.out_dir << "\n";
    return 0;
}

int cmd_theory(const std::string& config_path, const std::string& out_flag) {
    RunConfig cfg = load_config_or_default(config_path);
    cfg.out_dir = resolve_out_dir(out_flag, cfg);
    const TheorySuiteReport rep = run_theory_suite(cfg.theory);

    std::filesystem::create_directories(cfg.out_dir);
    write_text_file(cfg.out_dir + "/theory_spectra.csv", rep.rows_csv);
    write_text_file(cfg.out_dir + "/theory_ode_paths.csv", rep.paths_csv);

    std::cout << "checked " << rep.checked << " spectra (" << rep.skipped
              << " precondition-skipped)\n"
              << "entropy ordering violations: " << rep.entropy_violations << "\n"
              << "majorization violations: " << rep.majorization_violations << "\n";
    if (!rep.passed()) {
        std::cerr << "theory suite FAILED\n";
        return 1;
    }
    std::cout << "theory suite passed\n";
    return 0;
}

int cmd_ode_check(const std::string& config_path, const std::string& out_flag) {
    RunConfig cfg = load_config_or_default(config_path);
    cfg.out_dir = resolve_out_dir(out_flag, cfg);
    const auto rows = run_ode_vs_simulation(cfg);

    std::filesystem::create_directories(cfg.out_dir);
    std::ostringstream csv;
    csv << "arm,feature,lambda,max_rel_dev,ok\n";
    bool all_ok = true;
    for (const auto& r : rows) {
        csv << r.arm << ',' << r.feature << ',' << fmt_double(r.lambda) << ','
            << fmt_double(r.max_rel_dev) << ',' << (r.ok ? 1 : 0) << "\n";
        std::cout << r.arm << " feature " << r.feature << " (lambda " << fmt_double(r.lambda)
                  << "): max relative deviation " << fmt_double(r.max_rel_dev)
                  << (r.ok ? " ok" : " FAILED") << "\n";
        all_ok = all_ok && r.ok;
    }
    write_text_file(cfg.out_dir + "/ode_check.csv", csv.str());
    if (!all_ok) {
        std::cerr << "ode-check FAILED\n";
        return 1;
    }
    std::cout << "ode-check passed\n";
    return 0;
}

int cmd_cluster(const std::string& in_path, const std::string& features, std::uint64_t seed,
                double factor, const std::string& out_path) {
    const auto trajs = ingest_trajectories(in_path);
    FeatureMode mode;
    if (features == "trajectory") mode = FeatureMode::trajectory;
    else if (features == "final") mode = FeatureMode::final_loss;
    else throw ConfigError("cluster: --features must be trajectory or final");
    const auto assignment = kmeans2(trajs, mode, 100, seed);
    const auto plan = build_plan(assignment, factor);
    export_plan(plan, out_path);
    std::cout << "clustered " << trajs.size() << " trajectories: " << plan.n_hard << " hard, "
              << plan.n_easy << " easy; plan written to " << out_path << "\n";
    return 0;
}

int cmd_upsample(const std::string& plan_path, double factor, const std::string& out_path) {
    UpsamplePlan plan = import_plan(plan_path);
    if (factor < 1.0) throw ConfigError("upsample: --factor must be >= 1");
    plan.factor = factor;
    const int mult = std::max(1, static_cast<int>(std::lround(factor)));
    long effective = 0;
    for (auto& item : plan.items) {
        item.multiplicity = item.hard ? mult : 1;
        effective += item.multiplicity;
    }
    const std::string dest = out_path.empty() ? plan_path : out_path;
    export_plan(plan, dest);
    std::cout << "plan: " << plan.n_hard << " hard x" << mult << ", " << plan.n_easy
              << " easy; effective size " << effective << "; written to " << dest << "\n";
    return 0;
}

int cmd_metrics(const std::string& config_path, const std::string& in_path,
                const std::string& method, double eta, const std::string& out_path) {
    RunConfig cfg = load_config_or_default(config_path);
    const TrainingTrace trace = trace_from_csv(read_text_file(in_path), eta);
    if (trace.dim != cfg.spectrum.dim())
        throw ConfigError("metrics: trace has " + std::to_string(trace.dim) +
                          " features but the config spectrum has " +
                          std::to_string(cfg.spectrum.dim()));

    ordered_json rep;
    if (method == "progress") {
        const auto times = detect_learning_times(trace, cfg.spectrum, cfg.n_ctx, cfg.metrics_theta);
        const auto ent = entropy_report(times);
        rep["times"] = ent.times;
        rep["entropy"] = ent.entropy_value;
        rep["M"] = ent.n_learned;
        rep["method"] = "feature_progress";
    } else if (method == "drops") {
        std::vector<double> losses;
        for (const auto& [s, l] : trace.step_losses) losses.push_back(l);
        const auto drops = detect_loss_drops(losses, cfg.smoothing_window, cfg.drop_ratio);
        std::vector<double> times;
        for (auto idx : drops) times.push_back(trace.step_losses[idx].first * eta);
        if (times.empty()) throw InvariantFailure("metrics: no drops detected; cannot normalize");
        rep["times"] = times;
        rep["entropy"] = entropy(TimeSequence(times));
        rep["M"] = times.size();
        rep["method"] = "loss_drops";
    } else {
        throw ConfigError("metrics: --method must be progress or drops");
    }
    write_text_file(out_path, rep.dump(2) + "\n");
    std::cout << "report written to " << out_path << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Desk-scale training-dynamics laboratory for multi-head linear attention"};
    app.require_subcommand(1);

    std::string config_path, out_flag, arm = "gd";
    long seed_override = -1;
    int jobs_override = 0;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "run-config JSON path");
        sub->add_option("--out", out_flag, "output directory");
    };

    auto* simulate = app.add_subcommand("simulate", "run one training arm for one seed");
    add_common(simulate);
    simulate->add_option("--arm", arm, "arm name: gd, sam, or gd_upsampled");
    simulate->add_option("--seed", seed_override, "seed override");

    auto* fig1 = app.add_subcommand("fig1", "three-arm comparison over all seeds");
    add_common(fig1);
    fig1->add_option("--jobs", jobs_override, "concurrent runs");

    auto* theory = app.add_subcommand("theory", "entropy/majorization verification sweep");
    add_common(theory);

    auto* ode = app.add_subcommand("ode-check", "simulated dynamics vs scalar ODEs");
    add_common(ode);

    std::string in_path, out_path, features = "trajectory", method = "progress";
    std::uint64_t cluster_seed = 0;
    double factor = 2.0, metrics_eta = 1.0;

    auto* cluster = app.add_subcommand("cluster", "cluster loss trajectories into easy/hard");
    cluster->add_option("--in", in_path, "trajectory JSONL path")->required();
    cluster->add_option("--features", features, "trajectory|final");
    cluster->add_option("--seed", cluster_seed, "clustering seed");
    cluster->add_option("--factor", factor, "plan factor");
    cluster->add_option("--out", out_path, "plan JSON path")->required();

    auto* upsample = app.add_subcommand("upsample", "apply a factor to an upsampling plan");
    upsample->add_option("--plan", in_path, "plan JSON path")->required();
    upsample->add_option("--factor", factor, "upsampling factor")->required();
    upsample->add_option("--out", out_path, "output path (default: rewrite in place)");

    auto* metrics = app.add_subcommand("metrics", "learning-time report from a trace CSV");
    metrics->add_option("--config", config_path, "run-config JSON path");
    metrics->add_option("--in", in_path, "trace CSV path")->required();
    metrics->add_option("--method", method, "progress|drops");
    metrics->add_option("--eta", metrics_eta, "step-to-time factor");
    metrics->add_option("--out", out_path, "report JSON path")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (simulate->parsed()) return cmd_simulate(config_path, arm, seed_override, out_flag);
        if (fig1->parsed()) return cmd_fig1(config_path, jobs_override, out_flag);
        if (theory->parsed()) return cmd_theory(config_path, out_flag);
        if (ode->parsed()) return cmd_ode_check(config_path, out_flag);
        if (cluster->parsed()) return cmd_cluster(in_path, features, cluster_seed, factor, out_path);
        if (upsample->parsed()) return cmd_upsample(in_path, factor, out_path);
        if (metrics->parsed())
            return cmd_metrics(config_path, in_path, method, metrics_eta, out_path);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const InvariantFailure& e) {
        std::cerr << "invariant failure: " << e.what() << "\n";
        return 1;
    } catch (const std::invalid_argument& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
