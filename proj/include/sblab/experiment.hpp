#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "sblab/io.hpp"
#include "sblab/sb_metrics.hpp"
#include "sblab/theory_ode.hpp"
#include "sblab/upsampler.hpp"

namespace sblab {

/// Raised for malformed or inconsistent run configuration (CLI exit code 2).
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Raised when a verification suite finds a violated property (exit code 1).
struct InvariantFailure : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Run configuration.

struct TheoryGridConfig {
    int count = 1000;
    int d_min = 2;
    int d_max = 6;
    double lambda_min = 0.1;
    double lambda_max = 4.0;
    double eps = 0.01;
    double c = 0.1;
    double tau = 1.0;
    std::uint64_t seed = 12345;
    int ode_paths = 3;  // sampled (t, v) paths emitted for plotting
};

struct OdeCheckConfig {
    double eps = 0.01;
    double c = 0.4;
    double rho = 0.005;
    double eta = 1e-3;
    double tolerance = 0.05;
};

struct RunConfig {
    CovarianceSpec spectrum = geometric_spectrum(4, 0.5);
    int n_ctx = 32;
    int heads = 4;
    InitSpec init{InitMode::gaussian, 0.03};
    std::map<std::string, OptimizerConfig> arms;
    int dataset_size = 256;
    std::vector<double> proportions;  // defaults to uniform over features
    double upsample_factor = 2.0;
    ApplyMode upsample_mode = ApplyMode::duplicate;
    FeatureMode cluster_features = FeatureMode::trajectory;
    int proxy_heads = 2;
    double proxy_fraction = 1.0 / 3.0;
    int proxy_checkpoints = 5;
    std::uint64_t base_seed = 1000;
    int seed_count = 25;
    int eval_size = 10000;
    std::uint64_t eval_seed = 99;
    double metrics_theta = 0.9;
    int smoothing_window = 15;  // counted in log-resampled samples
    double drop_ratio = 0.25;
    TheoryGridConfig theory;
    OdeCheckConfig ode_check;
    std::string out_dir = "out";
    int jobs = 1;
    int curve_max_points = 4000;
};

namespace detail {

inline void check_keys(const ordered_json& j, const std::set<std::string>& allowed,
                       const std::string& context) {
    if (!j.is_object()) throw ConfigError("config: " + context + " must be an object");
    for (const auto& [key, value] : j.items()) {
        (void)value;
        if (!allowed.count(key))
            throw ConfigError("config: unknown field \"" + key + "\" in " + context);
    }
}

template <typename T>
T get_or(const ordered_json& j, const std::string& key, T fallback) {
    if (!j.contains(key)) return fallback;
    try {
        return j.at(key).get<T>();
    } catch (const std::exception& e) {
        throw ConfigError("config: bad value for \"" + key + "\": " + e.what());
    }
}

inline OptimizerKind parse_kind(const std::string& s) {
    if (s == "gd") return OptimizerKind::gd;
    if (s == "sam_exact") return OptimizerKind::sam_exact;
    if (s == "sam_first_order") return OptimizerKind::sam_first_order;
    throw ConfigError("config: unknown optimizer kind \"" + s + "\"");
}

inline std::string kind_name(OptimizerKind k) {
    switch (k) {
        case OptimizerKind::gd: return "gd";
        case OptimizerKind::sam_exact: return "sam_exact";
        case OptimizerKind::sam_first_order: return "sam_first_order";
    }
    return "?";
}

inline GradMode parse_grad_mode(const std::string& s) {
    if (s == "population") return GradMode::population;
    if (s == "empirical") return GradMode::empirical;
    throw ConfigError("config: unknown grad_mode \"" + s + "\"");
}

inline OptimizerConfig parse_optimizer(const ordered_json& j, const std::string& context,
                                       const OptimizerConfig& defaults) {
    check_keys(j,
               {"kind", "learning_rate", "rho", "grad_mode", "batch_size", "steps",
                "snapshot_every", "loss_every"},
               context);
    OptimizerConfig cfg = defaults;
    if (j.contains("kind")) cfg.kind = parse_kind(j.at("kind").get<std::string>());
    cfg.learning_rate = get_or(j, "learning_rate", cfg.learning_rate);
    cfg.rho = get_or(j, "rho", cfg.rho);
    if (j.contains("grad_mode")) cfg.grad_mode = parse_grad_mode(j.at("grad_mode").get<std::string>());
    cfg.batch_size = get_or(j, "batch_size", cfg.batch_size);
    cfg.steps = get_or(j, "steps", cfg.steps);
    cfg.snapshot_every = get_or(j, "snapshot_every", cfg.snapshot_every);
    cfg.loss_every = get_or(j, "loss_every", cfg.loss_every);
    try {
        cfg.validate();
    } catch (const std::exception& e) {
        throw ConfigError("config: " + context + ": " + e.what());
    }
    return cfg;
}

}  // namespace detail

inline OptimizerConfig default_arm_config() {
    OptimizerConfig cfg;
    cfg.kind = OptimizerKind::gd;
    cfg.learning_rate = 0.05;
    cfg.rho = 0.0;
    cfg.grad_mode = GradMode::empirical;
    cfg.batch_size = 32;
    cfg.steps = 15000;
    cfg.snapshot_every = 250;
    cfg.loss_every = 5;
    return cfg;
}

inline std::map<std::string, OptimizerConfig> default_arms() {
    std::map<std::string, OptimizerConfig> arms;
    arms["gd"] = default_arm_config();
    OptimizerConfig sam = default_arm_config();
    sam.kind = OptimizerKind::sam_exact;
    sam.rho = 0.02;
    arms["sam"] = sam;
    arms["gd_upsampled"] = default_arm_config();
    return arms;
}

inline RunConfig parse_run_config(const ordered_json& j) {
    detail::check_keys(j,
                       {"spectrum", "n_ctx", "heads", "init", "arms", "dataset", "upsampling",
                        "seeds", "eval", "metrics", "theory", "ode_check", "out_dir", "jobs",
                        "curve_max_points"},
                       "top level");
    RunConfig cfg;
    try {
        if (j.contains("spectrum")) {
            const auto& s = j.at("spectrum");
            detail::check_keys(s, {"geometric", "eigenvalues"}, "spectrum");
            if (s.contains("geometric") && s.contains("eigenvalues"))
                throw ConfigError("config: spectrum: give either geometric or eigenvalues");
            if (s.contains("geometric")) {
                detail::check_keys(s.at("geometric"), {"gamma", "d"}, "spectrum.geometric");
                cfg.spectrum = geometric_spectrum(s.at("geometric").at("d").get<int>(),
                                                  s.at("geometric").at("gamma").get<double>());
            } else if (s.contains("eigenvalues")) {
                auto eig = s.at("eigenvalues").get<std::vector<double>>();
                cfg.spectrum = make_spectrum(static_cast<int>(eig.size()), eig);
            } else {
                throw ConfigError("config: spectrum: give geometric or eigenvalues");
            }
        }
        cfg.n_ctx = detail::get_or(j, "n_ctx", cfg.n_ctx);
        cfg.heads = detail::get_or(j, "heads", cfg.heads);
        if (cfg.n_ctx < 1) throw ConfigError("config: n_ctx must be >= 1");
        if (cfg.heads < 1) throw ConfigError("config: heads must be >= 1");

        if (j.contains("init")) {
            detail::check_keys(j.at("init"), {"mode", "scale"}, "init");
            const std::string mode = detail::get_or<std::string>(j.at("init"), "mode", "gaussian");
            if (mode == "gaussian") cfg.init.mode = InitMode::gaussian;
            else if (mode == "ansatz") cfg.init.mode = InitMode::ansatz;
            else throw ConfigError("config: unknown init mode \"" + mode + "\"");
            cfg.init.scale = detail::get_or(j.at("init"), "scale", cfg.init.scale);
        }

        cfg.arms = default_arms();
        if (j.contains("arms")) {
            for (const auto& [name, arm_json] : j.at("arms").items()) {
                const auto it = cfg.arms.find(name);
                if (it == cfg.arms.end())
                    throw ConfigError("config: unknown arm \"" + name +
                                      "\" (expected gd, sam, gd_upsampled)");
                it->second = detail::parse_optimizer(arm_json, "arms." + name, it->second);
            }
        }

        cfg.proportions.assign(cfg.spectrum.dim(), 1.0 / cfg.spectrum.dim());
        if (j.contains("dataset")) {
            detail::check_keys(j.at("dataset"), {"size", "proportions"}, "dataset");
            cfg.dataset_size = detail::get_or(j.at("dataset"), "size", cfg.dataset_size);
            if (j.at("dataset").contains("proportions"))
                cfg.proportions = j.at("dataset").at("proportions").get<std::vector<double>>();
            if (static_cast<int>(cfg.proportions.size()) != cfg.spectrum.dim())
                throw ConfigError("config: dataset.proportions must have one entry per feature");
            if (cfg.dataset_size < 2) throw ConfigError("config: dataset.size must be >= 2");
        }

        if (j.contains("upsampling")) {
            const auto& u = j.at("upsampling");
            detail::check_keys(
                u, {"factor", "mode", "features", "proxy_heads", "proxy_fraction", "checkpoints"},
                "upsampling");
            cfg.upsample_factor = detail::get_or(u, "factor", cfg.upsample_factor);
            const std::string mode = detail::get_or<std::string>(u, "mode", "duplicate");
            if (mode == "duplicate") cfg.upsample_mode = ApplyMode::duplicate;
            else if (mode == "weight") cfg.upsample_mode = ApplyMode::weight;
            else throw ConfigError("config: unknown upsampling mode \"" + mode + "\"");
            const std::string feat = detail::get_or<std::string>(u, "features", "trajectory");
            if (feat == "trajectory") cfg.cluster_features = FeatureMode::trajectory;
            else if (feat == "final") cfg.cluster_features = FeatureMode::final_loss;
            else throw ConfigError("config: unknown upsampling features \"" + feat + "\"");
            cfg.proxy_heads = detail::get_or(u, "proxy_heads", cfg.proxy_heads);
            cfg.proxy_fraction = detail::get_or(u, "proxy_fraction", cfg.proxy_fraction);
            cfg.proxy_checkpoints = detail::get_or(u, "checkpoints", cfg.proxy_checkpoints);
            if (cfg.upsample_factor < 1.0) throw ConfigError("config: upsampling.factor must be >= 1");
            if (!(cfg.proxy_fraction > 0.0) || cfg.proxy_fraction > 1.0)
                throw ConfigError("config: upsampling.proxy_fraction must lie in (0,1]");
        }

        if (j.contains("seeds")) {
            detail::check_keys(j.at("seeds"), {"base", "count"}, "seeds");
            cfg.base_seed = detail::get_or<std::uint64_t>(j.at("seeds"), "base", cfg.base_seed);
            cfg.seed_count = detail::get_or(j.at("seeds"), "count", cfg.seed_count);
            if (cfg.seed_count < 1) throw ConfigError("config: seeds.count must be >= 1");
        }
        if (j.contains("eval")) {
            detail::check_keys(j.at("eval"), {"size", "seed"}, "eval");
            cfg.eval_size = detail::get_or(j.at("eval"), "size", cfg.eval_size);
            cfg.eval_seed = detail::get_or<std::uint64_t>(j.at("eval"), "seed", cfg.eval_seed);
            if (cfg.eval_size < 1) throw ConfigError("config: eval.size must be >= 1");
        }
        if (j.contains("metrics")) {
            detail::check_keys(j.at("metrics"), {"theta", "smoothing_window", "drop_ratio"},
                               "metrics");
            cfg.metrics_theta = detail::get_or(j.at("metrics"), "theta", cfg.metrics_theta);
            cfg.smoothing_window =
                detail::get_or(j.at("metrics"), "smoothing_window", cfg.smoothing_window);
            cfg.drop_ratio = detail::get_or(j.at("metrics"), "drop_ratio", cfg.drop_ratio);
        }
        if (j.contains("theory")) {
            const auto& t = j.at("theory");
            detail::check_keys(t,
                               {"count", "d_min", "d_max", "lambda_min", "lambda_max", "eps", "c",
                                "tau", "seed", "ode_paths"},
                               "theory");
            cfg.theory.count = detail::get_or(t, "count", cfg.theory.count);
            cfg.theory.d_min = detail::get_or(t, "d_min", cfg.theory.d_min);
            cfg.theory.d_max = detail::get_or(t, "d_max", cfg.theory.d_max);
            cfg.theory.lambda_min = detail::get_or(t, "lambda_min", cfg.theory.lambda_min);
            cfg.theory.lambda_max = detail::get_or(t, "lambda_max", cfg.theory.lambda_max);
            cfg.theory.eps = detail::get_or(t, "eps", cfg.theory.eps);
            cfg.theory.c = detail::get_or(t, "c", cfg.theory.c);
            cfg.theory.tau = detail::get_or(t, "tau", cfg.theory.tau);
            cfg.theory.seed = detail::get_or<std::uint64_t>(t, "seed", cfg.theory.seed);
            cfg.theory.ode_paths = detail::get_or(t, "ode_paths", cfg.theory.ode_paths);
            if (cfg.theory.count < 1) throw ConfigError("config: theory.count must be >= 1");
        }
        if (j.contains("ode_check")) {
            const auto& o = j.at("ode_check");
            detail::check_keys(o, {"eps", "c", "rho", "eta", "tolerance"}, "ode_check");
            cfg.ode_check.eps = detail::get_or(o, "eps", cfg.ode_check.eps);
            cfg.ode_check.c = detail::get_or(o, "c", cfg.ode_check.c);
            cfg.ode_check.rho = detail::get_or(o, "rho", cfg.ode_check.rho);
            cfg.ode_check.eta = detail::get_or(o, "eta", cfg.ode_check.eta);
            cfg.ode_check.tolerance = detail::get_or(o, "tolerance", cfg.ode_check.tolerance);
        }
        cfg.out_dir = detail::get_or<std::string>(j, "out_dir", cfg.out_dir);
        cfg.jobs = detail::get_or(j, "jobs", cfg.jobs);
        cfg.curve_max_points = detail::get_or(j, "curve_max_points", cfg.curve_max_points);
        if (cfg.jobs < 1) throw ConfigError("config: jobs must be >= 1");
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    return cfg;
}

inline RunConfig load_run_config(const std::string& path) {
    ordered_json j;
    try {
        j = ordered_json::parse(read_text_file(path));
    } catch (const std::exception& e) {
        throw ConfigError("config: cannot parse " + path + ": " + e.what());
    }
    return parse_run_config(j);
}

/// Canonical JSON form of the effective configuration (defaults filled in).
inline ordered_json config_to_json(const RunConfig& cfg) {
    ordered_json j;
    j["spectrum"]["eigenvalues"] = cfg.spectrum.eigenvalues;
    j["n_ctx"] = cfg.n_ctx;
    j["heads"] = cfg.heads;
    j["init"]["mode"] = cfg.init.mode == InitMode::gaussian ? "gaussian" : "ansatz";
    j["init"]["scale"] = cfg.init.scale;
    for (const auto& [name, arm] : cfg.arms) {
        ordered_json a;
        a["kind"] = detail::kind_name(arm.kind);
        a["learning_rate"] = arm.learning_rate;
        a["rho"] = arm.rho;
        a["grad_mode"] = arm.grad_mode == GradMode::population ? "population" : "empirical";
        a["batch_size"] = arm.batch_size;
        a["steps"] = arm.steps;
        a["snapshot_every"] = arm.snapshot_every;
        a["loss_every"] = arm.loss_every;
        j["arms"][name] = std::move(a);
    }
    j["dataset"]["size"] = cfg.dataset_size;
    j["dataset"]["proportions"] = cfg.proportions;
    j["upsampling"]["factor"] = cfg.upsample_factor;
    j["upsampling"]["mode"] = cfg.upsample_mode == ApplyMode::duplicate ? "duplicate" : "weight";
    j["upsampling"]["features"] = feature_mode_name(cfg.cluster_features);
    j["upsampling"]["proxy_heads"] = cfg.proxy_heads;
    j["upsampling"]["proxy_fraction"] = cfg.proxy_fraction;
    j["upsampling"]["checkpoints"] = cfg.proxy_checkpoints;
    j["seeds"]["base"] = cfg.base_seed;
    j["seeds"]["count"] = cfg.seed_count;
    j["eval"]["size"] = cfg.eval_size;
    j["eval"]["seed"] = cfg.eval_seed;
    j["metrics"]["theta"] = cfg.metrics_theta;
    j["metrics"]["smoothing_window"] = cfg.smoothing_window;
    j["metrics"]["drop_ratio"] = cfg.drop_ratio;
    return j;
}

inline std::string config_hash(const RunConfig& cfg) {
    const std::string dump = config_to_json(cfg).dump();
    std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
    for (unsigned char c : dump) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf, 8);
}

// ---------------------------------------------------------------------------
// Single runs and the three-arm comparison.

struct ArmRunResult {
    TrainingTrace trace;
    double final_test_loss = 0.0;
    std::vector<std::optional<long>> learned_steps;
    std::optional<double> entropy_value;
    int learned_count = 0;
    std::vector<std::size_t> drop_indices;
    std::vector<DropAlignment> alignments;
};

namespace detail {

inline TaskDataset build_dataset(const RunConfig& cfg, Rng& rng) {
    return make_difficulty_dataset(cfg.spectrum, cfg.n_ctx, cfg.dataset_size, cfg.proportions, rng);
}

inline TaskDataset upsampled_dataset(const RunConfig& cfg, const TaskDataset& base,
                                     std::uint64_t seed, Rng& proxy_rng,
                                     const OptimizerConfig& main_cfg) {
    OptimizerConfig proxy_cfg = main_cfg;
    proxy_cfg.kind = OptimizerKind::gd;
    proxy_cfg.rho = 0.0;
    proxy_cfg.steps = std::max<long>(cfg.proxy_checkpoints,
                                     static_cast<long>(main_cfg.steps * cfg.proxy_fraction));
    auto trajs = collect_proxy_trajectories(base, cfg.spectrum, cfg.n_ctx, proxy_cfg,
                                            cfg.proxy_heads, cfg.init, cfg.proxy_checkpoints,
                                            proxy_rng);
    auto assignment = kmeans2(relative_loss_trajectories(trajs, base), cfg.cluster_features, 100,
                              splitmix64(seed ^ 0x5b5b5b5bULL));
    auto plan = build_plan(assignment, cfg.upsample_factor, cfg.upsample_mode);
    return apply_plan(base, plan, cfg.upsample_mode);
}

constexpr int kLogResamplePoints = 600;

inline ArmRunResult analyze_run(const RunConfig& cfg, TrainingTrace trace) {
    ArmRunResult res;
    // Final loss averaged over a trailing window; a single record would be
    // a one-draw sample of the mini-batch jitter.
    {
        const long horizon = trace.step_losses.back().first;
        const long tail_start = horizon - std::max<long>(1500, horizon / 50);
        double sum = 0.0;
        int count = 0;
        for (auto it = trace.step_losses.rbegin();
             it != trace.step_losses.rend() && it->first >= tail_start; ++it) {
            sum += it->second;
            ++count;
        }
        res.final_test_loss = sum / count;
    }
    auto times = detect_learning_times(trace, cfg.spectrum, cfg.n_ctx, cfg.metrics_theta);
    res.learned_steps = times.step;
    res.learned_count = times.n_learned();
    if (res.learned_count > 0) res.entropy_value = entropy_report(times).entropy_value;

    // Drops are detected on a log-time resampling: the saddle-to-saddle
    // cascade spaces falls multiplicatively, and a fall's log-width is
    // roughly scale-free.
    const auto rs = log_resample_indices(trace.step_losses, kLogResamplePoints);
    std::vector<double> losses;
    losses.reserve(rs.size());
    for (auto i : rs) losses.push_back(trace.step_losses[i].second);
    res.drop_indices = detect_loss_drops(losses, cfg.smoothing_window, cfg.drop_ratio);
    for (auto& idx : res.drop_indices) idx = rs[idx];
    res.alignments = drop_alignments(trace, res.drop_indices, 8 * cfg.arms.begin()->second.loss_every,
                                     0.2);
    res.trace = std::move(trace);
    return res;
}

inline double median(std::vector<double> v) {
    if (v.empty()) throw std::invalid_argument("median: empty");
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace detail

/// One arm, one seed. The dataset and initial parameters derive from the
/// seed alone, so paired arms share them.
inline ArmRunResult run_single(const RunConfig& cfg, const std::string& arm_name,
                               std::uint64_t seed, const LossQuadratic& eval_loss) {
    const auto it = cfg.arms.find(arm_name);
    if (it == cfg.arms.end()) throw ConfigError("unknown arm \"" + arm_name + "\"");
    const OptimizerConfig& opt = it->second;

    Rng root(seed);
    Rng data_rng = root.child(1);
    Rng init_rng = root.child(2);
    Rng train_rng = root.child(3);
    Rng proxy_rng = root.child(4);

    const ModelParams init = init_params(cfg.init, cfg.spectrum.dim(), cfg.heads, init_rng);

    TaskDataset dataset;
    const TaskDataset* dataset_ptr = nullptr;
    if (opt.grad_mode == GradMode::empirical) {
        dataset = detail::build_dataset(cfg, data_rng);
        if (arm_name == "gd_upsampled")
            dataset = detail::upsampled_dataset(cfg, dataset, seed, proxy_rng, opt);
        dataset_ptr = &dataset;
    }

    TrainingTrace trace =
        train(init, cfg.spectrum, cfg.n_ctx, opt, dataset_ptr, train_rng, &eval_loss);
    return detail::analyze_run(cfg, std::move(trace));
}

struct ExperimentSummary {
    std::string hash;
    std::vector<std::uint64_t> seeds;
    // per arm, per seed
    std::map<std::string, std::vector<double>> final_losses;
    std::map<std::string, std::vector<std::optional<double>>> entropies;
    std::map<std::string, std::vector<int>> drop_counts;
    std::map<std::string, std::vector<int>> learned_counts;
    std::map<std::string, double> median_final_loss;
    std::map<std::string, std::optional<double>> median_entropy;
};

inline ordered_json summary_to_json(const ExperimentSummary& s) {
    ordered_json j;
    j["config_hash"] = s.hash;
    j["seeds"] = s.seeds;
    for (const auto& [arm, losses] : s.final_losses) {
        ordered_json a;
        a["final_test_losses"] = losses;
        ordered_json ent = ordered_json::array();
        for (const auto& e : s.entropies.at(arm)) {
            if (e) ent.push_back(*e);
            else ent.push_back(nullptr);
        }
        a["entropies"] = std::move(ent);
        a["drop_counts"] = s.drop_counts.at(arm);
        a["learned_counts"] = s.learned_counts.at(arm);
        a["median_final_test_loss"] = s.median_final_loss.at(arm);
        if (s.median_entropy.at(arm)) a["median_entropy"] = *s.median_entropy.at(arm);
        else a["median_entropy"] = nullptr;
        j["arms"][arm] = std::move(a);
    }
    return j;
}

/// The three-arm comparison over all seeds. Writes one trace CSV per run,
/// a long-format curves CSV, and a summary JSON; returns the summary.
inline ExperimentSummary run_fig1(const RunConfig& cfg) {
    namespace fs = std::filesystem;
    const std::string hash = config_hash(cfg);
    const std::vector<std::string> arm_names{"gd", "sam", "gd_upsampled"};

    Rng eval_rng(cfg.eval_seed);
    const LossQuadratic eval_loss =
        LossQuadratic::from_tasks(sample_eval_tasks(cfg.spectrum, cfg.n_ctx, cfg.eval_size, eval_rng));

    struct SeedResult {
        std::map<std::string, ArmRunResult> arms;
        std::string error;
    };
    std::vector<SeedResult> results(cfg.seed_count);

    std::atomic<int> next{0};
    auto worker = [&] {
        for (;;) {
            const int idx = next.fetch_add(1);
            if (idx >= cfg.seed_count) return;
            const std::uint64_t seed = cfg.base_seed + static_cast<std::uint64_t>(idx);
            for (const auto& arm : arm_names) {
                try {
                    results[idx].arms[arm] = run_single(cfg, arm, seed, eval_loss);
                } catch (const std::exception& e) {
                    results[idx].error = "arm " + arm + ", seed " + std::to_string(seed) + ": " +
                                         e.what();
                    return;
                }
            }
        }
    };
    {
        std::vector<std::thread> pool;
        const int n_workers = std::max(1, std::min(cfg.jobs, cfg.seed_count));
        pool.reserve(n_workers);
        for (int w = 0; w < n_workers; ++w) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }
    for (const auto& r : results)
        if (!r.error.empty()) throw std::runtime_error("run failed: " + r.error);

    fs::create_directories(cfg.out_dir);
    ExperimentSummary summary;
    summary.hash = hash;

    std::ostringstream curves;
    curves << "arm,seed,step,loss\n";
    for (int idx = 0; idx < cfg.seed_count; ++idx) {
        const std::uint64_t seed = cfg.base_seed + static_cast<std::uint64_t>(idx);
        summary.seeds.push_back(seed);
        for (const auto& arm : arm_names) {
            const auto& res = results[idx].arms.at(arm);
            write_text_file(cfg.out_dir + "/" + hash + "_" + arm + "_" + std::to_string(seed) +
                                ".csv",
                            trace_to_csv(res.trace));
            const std::size_t n = res.trace.step_losses.size();
            const std::size_t stride =
                std::max<std::size_t>(1, n / static_cast<std::size_t>(cfg.curve_max_points));
            for (std::size_t r = 0; r < n; r += stride) {
                const auto& [step, loss] = res.trace.step_losses[r];
                curves << arm << ',' << seed << ',' << step << ',' << fmt_double(loss) << "\n";
            }
            summary.final_losses[arm].push_back(res.final_test_loss);
            summary.entropies[arm].push_back(res.entropy_value);
            summary.drop_counts[arm].push_back(static_cast<int>(res.drop_indices.size()));
            summary.learned_counts[arm].push_back(res.learned_count);
        }
    }
    write_text_file(cfg.out_dir + "/" + hash + "_curves.csv", curves.str());

    for (const auto& arm : arm_names) {
        summary.median_final_loss[arm] = detail::median(summary.final_losses[arm]);
        std::vector<double> ents;
        for (const auto& e : summary.entropies[arm])
            if (e) ents.push_back(*e);
        summary.median_entropy[arm] =
            ents.empty() ? std::optional<double>{} : std::optional<double>{detail::median(ents)};
    }
    write_text_file(cfg.out_dir + "/" + hash + "_summary.json",
                    summary_to_json(summary).dump(2) + "\n");
    write_text_file(cfg.out_dir + "/" + hash + "_config.json",
                    config_to_json(cfg).dump(2) + "\n");
    return summary;
}

// ---------------------------------------------------------------------------
// Theory verification suite.

struct TheorySuiteReport {
    int checked = 0;
    int entropy_violations = 0;
    int majorization_violations = 0;
    int skipped = 0;  // hypothesis-violating cells
    std::string rows_csv;
    std::string paths_csv;

    bool passed() const { return entropy_violations == 0 && majorization_violations == 0; }
};

/// Random-spectrum sweep of the early-training entropy and majorization
/// statements, plus a few sampled ODE paths for plotting.
inline TheorySuiteReport run_theory_suite(const TheoryGridConfig& grid) {
    if (grid.count < 1) throw ConfigError("theory grid: count must be >= 1");
    if (grid.d_min < 1 || grid.d_max < grid.d_min)
        throw ConfigError("theory grid: bad dimension range");
    TheorySuiteReport rep;
    Rng rng(grid.seed);

    std::ostringstream rows;
    rows << "lambdas,rho,entropy_gd,entropy_sam,majorization_holds,status\n";
    const double rho_cap = std::sqrt(3.0) / 2.0 * grid.eps;
    for (int trial = 0; trial < grid.count; ++trial) {
        const int d = grid.d_min + static_cast<int>(rng.uniform_int(grid.d_max - grid.d_min + 1));
        std::vector<double> eig(d);
        for (auto& x : eig)
            x = grid.lambda_min + (grid.lambda_max - grid.lambda_min) * rng.uniform01();
        std::sort(eig.begin(), eig.end(), std::greater<>());
        bool distinct = true;
        for (int i = 1; i < d; ++i) distinct = distinct && eig[i] < eig[i - 1] - 1e-9;
        const double rho = rng.uniform01() * rho_cap;
        std::ostringstream lam;
        for (int i = 0; i < d; ++i) lam << (i ? ";" : "") << fmt_double(eig[i]);

        bool admissible = distinct && rho < rho_cap;
        for (int i = 0; i < d && admissible; ++i)
            admissible = grid.eps < grid.c * std::pow(eig[i], -1.0 / 3.0);
        if (!admissible) {
            ++rep.skipped;
            rows << lam.str() << ',' << fmt_double(rho) << ",,,," << "precondition-skipped\n";
            continue;
        }
        const auto spec = make_spectrum(d, eig);
        const auto cmp = sb_comparison(spec, grid.eps, grid.c, grid.tau, rho);
        ++rep.checked;
        const bool entropy_ok = d == 1 || rho == 0.0 || cmp.entropy_sam > cmp.entropy_gd;
        if (!entropy_ok) ++rep.entropy_violations;
        if (!cmp.majorization_holds) ++rep.majorization_violations;
        rows << lam.str() << ',' << fmt_double(rho) << ',' << fmt_double(cmp.entropy_gd) << ','
             << fmt_double(cmp.entropy_sam) << ',' << (cmp.majorization_holds ? 1 : 0) << ','
             << (entropy_ok && cmp.majorization_holds ? "ok" : "violated") << "\n";
    }
    rep.rows_csv = rows.str();

    std::ostringstream paths;
    paths << "kind,lambda,rho,t,v\n";
    for (int p = 0; p < grid.ode_paths; ++p) {
        const double lambda = grid.lambda_min +
                              (grid.lambda_max - grid.lambda_min) * (p + 1.0) / (grid.ode_paths + 1.0);
        const double rho = 0.5 * rho_cap;
        EarlyOdeParams gd(lambda, 0.0, grid.tau);
        EarlyOdeParams sam(lambda, rho, grid.tau);
        const double v_end = grid.c * std::pow(lambda, -1.0 / 3.0);
        if (grid.eps >= v_end || sam.rho_hat >= grid.eps) continue;
        const double t_end = 1.2 * learning_time_gd(lambda, grid.eps, grid.c, grid.tau);
        auto gd_path = integrate_scalar_ode([&](double v) { return gd_ode_rhs(v, gd); }, grid.eps,
                                            t_end, t_end / 400.0, v_end);
        for (const auto& [t, v] : gd_path)
            paths << "gd," << fmt_double(lambda) << ",0," << fmt_double(t) << ',' << fmt_double(v)
                  << "\n";
        const double t_end_sam = 1.2 * learning_time_sam(lambda, grid.eps, grid.c, grid.tau, rho);
        auto sam_path = integrate_scalar_ode([&](double v) { return sam_ode_rhs(v, sam); },
                                             grid.eps, t_end_sam, t_end_sam / 400.0, v_end);
        for (const auto& [t, v] : sam_path)
            paths << "sam," << fmt_double(lambda) << ',' << fmt_double(rho) << ',' << fmt_double(t)
                  << ',' << fmt_double(v) << "\n";
    }
    rep.paths_csv = paths.str();
    return rep;
}

// ---------------------------------------------------------------------------
// Simulated dynamics vs the scalar ODEs.

struct OdeCheckRow {
    std::string arm;
    int feature = 0;
    double lambda = 0.0;
    double max_rel_dev = 0.0;
    bool ok = false;
};

/// For each feature, simulate the full model from a single-feature ansatz
/// start under population dynamics and compare v_i(t) against RK4 on the
/// matching scalar ODE over the early window [eps, 0.5 c lambda^(-1/3)].
inline std::vector<OdeCheckRow> run_ode_vs_simulation(const RunConfig& cfg) {
    const auto& oc = cfg.ode_check;
    std::vector<OdeCheckRow> rows;
    const int d = cfg.spectrum.dim();
    for (const std::string arm : {"gd", "sam_first_order"}) {
        const bool sam = arm == "sam_first_order";
        const double rho = sam ? oc.rho : 0.0;
        for (int i = 1; i <= d; ++i) {
            const double lambda = cfg.spectrum.eigenvalues[i - 1];
            EarlyOdeParams ode(lambda, rho, 1.0);
            if (sam && ode.rho_hat >= oc.eps)
                throw ConfigError("ode_check: requires rho < (sqrt(3)/2)*eps");
            const double v_end = 0.5 * oc.c * std::pow(lambda, -1.0 / 3.0);
            if (oc.eps >= v_end)
                throw ConfigError("ode_check: eps must lie below 0.5*c*lambda^(-1/3)");

            // single-feature ansatz start: only head i carries weight
            ModelParams init = zero_params(d, cfg.heads);
            init.heads[i - 1].v = oc.eps;
            init.heads[i - 1].k[i - 1] = oc.eps;
            init.heads[i - 1].q[i - 1] = oc.eps;

            const double t_end =
                sam ? learning_time_sam(lambda, oc.eps, 0.5 * oc.c, 1.0, rho)
                    : learning_time_gd(lambda, oc.eps, 0.5 * oc.c, 1.0);

            OptimizerConfig sim;
            sim.kind = sam ? OptimizerKind::sam_first_order : OptimizerKind::gd;
            sim.rho = rho;
            sim.grad_mode = GradMode::population;
            sim.learning_rate = oc.eta;
            sim.steps = static_cast<long>(std::ceil(1.05 * t_end / oc.eta));
            sim.loss_every = std::max<long>(1, sim.steps / 400);
            sim.snapshot_every = sim.steps + 1;
            Rng rng(1);
            const TrainingTrace trace = train(init, cfg.spectrum, cfg.n_ctx, sim, nullptr, rng);

            auto rhs = [&](double v) { return sam ? sam_ode_rhs(v, ode) : gd_ode_rhs(v, ode); };
            auto path = integrate_scalar_ode(rhs, oc.eps, sim.steps * oc.eta, oc.eta, 2.0 * v_end);

            OdeCheckRow row;
            row.arm = arm;
            row.feature = i;
            row.lambda = lambda;
            for (const auto& [step, m] : trace.feature_progress_series) {
                if (static_cast<std::size_t>(step) >= path.size()) break;
                const double v_sim = std::cbrt(std::max(0.0, m[i - 1]));
                const double v_ode = path[static_cast<std::size_t>(step)].second;
                if (v_ode < oc.eps || v_ode > v_end) continue;
                row.max_rel_dev = std::max(row.max_rel_dev, std::abs(v_sim - v_ode) / v_ode);
            }
            row.ok = row.max_rel_dev < oc.tolerance;
            rows.push_back(row);
        }
    }
    return rows;
}

}  // namespace sblab
