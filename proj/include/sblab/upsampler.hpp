#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "sblab/optimizers.hpp"
#include "sblab/rng.hpp"

namespace sblab {

/// Per-example loss values at the proxy run's checkpoints.
struct LossTrajectory {
    std::string example_id;
    std::vector<double> losses;
};

enum class FeatureMode { trajectory, final_loss };

inline std::string feature_mode_name(FeatureMode m) {
    return m == FeatureMode::trajectory ? "trajectory" : "final";
}

struct ClusterAssignment {
    std::vector<std::string> ids;
    std::vector<int> labels;  // 1 = hard, 0 = easy
    std::vector<std::vector<double>> centroids;
    FeatureMode feature_mode = FeatureMode::trajectory;
    std::vector<double> objective_history;  // within-cluster sum of squares per iteration

    int label_of(const std::string& id) const {
        for (std::size_t i = 0; i < ids.size(); ++i)
            if (ids[i] == id) return labels[i];
        throw std::invalid_argument("ClusterAssignment: unknown id " + id);
    }
};

/// Dataset whose per-example rule vectors each lie along one eigenvector,
/// with group shares given by `proportions`. Rule magnitudes are fixed per
/// group (random sign) and scaled so the mixture's rule second moment
/// matches the isotropic draw; fixed magnitudes keep every example's
/// difficulty determined by its group alone.
inline TaskDataset make_difficulty_dataset(const CovarianceSpec& spec, int n_ctx, int size,
                                           const std::vector<double>& proportions, Rng& rng) {
    const int d = spec.dim();
    if (static_cast<int>(proportions.size()) != d)
        throw std::invalid_argument("make_difficulty_dataset: need one proportion per feature");
    double psum = 0.0;
    for (double p : proportions) {
        if (p < 0.0) throw std::invalid_argument("make_difficulty_dataset: negative proportion");
        psum += p;
    }
    if (!(psum > 0.0)) throw std::invalid_argument("make_difficulty_dataset: proportions sum to 0");

    TaskDataset out;
    out.entries.reserve(size);
    for (int i = 0; i < size; ++i) {
        const double u = rng.uniform01() * psum;
        double acc = 0.0;
        int group = d - 1;
        for (int j = 0; j < d; ++j) {
            acc += proportions[j];
            if (u <= acc) {
                group = j;
                break;
            }
        }
        std::vector<double> w(d, 0.0);
        const double sign = rng.uniform01() < 0.5 ? -1.0 : 1.0;
        w[group] = sign * std::sqrt(psum / proportions[group]);
        // An example only stays at high loss while its feature is unlearned
        // if its query actually reads that feature; redraw queries whose
        // label is a small fraction of its typical scale.
        const double label_scale = std::abs(w[group]) * std::sqrt(spec.eigenvalues[group]);
        TaskSample task = sample_task(spec, n_ctx, rng, w);
        for (int tries = 0; tries < 64 && std::abs(task.query_label) < 0.5 * label_scale; ++tries)
            task = sample_task(spec, n_ctx, rng, w);
        DatasetEntry e;
        char buf[16];
        std::snprintf(buf, sizeof(buf), "ex%05d", i);
        e.id = buf;
        e.task = project_task(task);
        e.group = group;
        e.rule = std::move(w);
        out.entries.push_back(std::move(e));
    }
    return out;
}

/// Train a small proxy on the dataset and record each example's squared
/// loss at evenly spaced checkpoints.
inline std::vector<LossTrajectory> collect_proxy_trajectories(const TaskDataset& dataset,
                                                              const CovarianceSpec& spec, int n_ctx,
                                                              const OptimizerConfig& proxy_cfg,
                                                              int proxy_heads, const InitSpec& init,
                                                              int n_checkpoints, Rng& rng) {
    if (dataset.entries.empty())
        throw std::invalid_argument("collect_proxy_trajectories: empty dataset");
    if (n_checkpoints < 1)
        throw std::invalid_argument("collect_proxy_trajectories: need at least one checkpoint");
    if (proxy_cfg.steps < n_checkpoints)
        throw std::invalid_argument("collect_proxy_trajectories: proxy steps < checkpoints");
    Rng init_rng = rng.child(1);
    Rng train_rng = rng.child(2);
    const ModelParams proxy0 = init_params(init, spec.dim(), proxy_heads, init_rng);
    const TrainingTrace trace =
        train(proxy0, spec, n_ctx, proxy_cfg, &dataset, train_rng, nullptr, n_checkpoints);

    std::vector<LossTrajectory> out(dataset.size());
    for (std::size_t e = 0; e < dataset.size(); ++e) {
        out[e].example_id = dataset.entries[e].id;
        out[e].losses.reserve(trace.per_example_losses.size());
        for (const auto& row : trace.per_example_losses) out[e].losses.push_back(row[e]);
    }
    return out;
}

/// Rescales each example's losses by its label energy y^2, the loss an
/// untrained predictor incurs. Per-example loss scales in the in-context
/// dataset are spread over orders of magnitude by the single-query draw;
/// the group signal is the relative residual, which this makes comparable
/// across examples. A ratio above 1 already means the example did not
/// improve, so ratios are capped at 2 to bound the leverage of examples
/// whose loss grew (and of near-zero labels).
inline std::vector<LossTrajectory> relative_loss_trajectories(
    const std::vector<LossTrajectory>& trajs, const TaskDataset& dataset) {
    if (trajs.size() != dataset.size())
        throw std::invalid_argument("relative_loss_trajectories: trajectory/dataset size mismatch");
    std::vector<LossTrajectory> out = trajs;
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double y = dataset.entries[i].task.y;
        const double base = y * y + 1e-12;
        for (auto& l : out[i].losses) l = std::min(l / base, 2.0);
    }
    return out;
}

namespace detail {

inline std::vector<std::vector<double>> cluster_features(const std::vector<LossTrajectory>& trajs,
                                                         FeatureMode mode) {
    const std::size_t len = trajs.front().losses.size();
    for (const auto& t : trajs)
        if (t.losses.size() != len)
            throw std::invalid_argument("kmeans2: trajectories have inconsistent lengths");

    std::vector<std::vector<double>> f(trajs.size());
    if (mode == FeatureMode::final_loss) {
        for (std::size_t i = 0; i < trajs.size(); ++i) f[i] = {trajs[i].losses.back()};
        return f;
    }
    // z-score per checkpoint so early (large-scale) losses do not dominate;
    // near-constant checkpoints carry no signal, so their scale is floored
    // rather than letting standardization blow them up
    std::vector<double> mu(len, 0.0), sd(len, 0.0);
    for (const auto& t : trajs)
        for (std::size_t j = 0; j < len; ++j) mu[j] += t.losses[j];
    for (auto& m : mu) m /= trajs.size();
    for (const auto& t : trajs)
        for (std::size_t j = 0; j < len; ++j) sd[j] += (t.losses[j] - mu[j]) * (t.losses[j] - mu[j]);
    double sd_max = 0.0;
    for (auto& s : sd) {
        s = std::sqrt(s / trajs.size());
        sd_max = std::max(sd_max, s);
    }
    if (sd_max == 0.0) return f;  // caller rejects the degenerate case
    for (auto& s : sd) s = std::max(s, 0.05 * sd_max);
    for (std::size_t i = 0; i < trajs.size(); ++i) {
        f[i].resize(len);
        for (std::size_t j = 0; j < len; ++j) {
            // winsorize so a single stray example cannot pull a centroid
            // onto itself
            const double z = (trajs[i].losses[j] - mu[j]) / sd[j];
            f[i][j] = std::clamp(z, -3.0, 3.0);
        }
    }
    return f;
}

inline double sqdist(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return s;
}

}  // namespace detail

/// Two-means over per-example features with k-means++ seeding. The cluster
/// with the higher mean final-checkpoint loss is labelled hard.
inline ClusterAssignment kmeans2(const std::vector<LossTrajectory>& trajectories, FeatureMode mode,
                                 int max_iters, std::uint64_t seed) {
    if (trajectories.size() < 2)
        throw std::invalid_argument("kmeans2: need at least two trajectories");
    if (max_iters < 1) throw std::invalid_argument("kmeans2: max_iters must be >= 1");
    const auto f = detail::cluster_features(trajectories, mode);
    const std::size_t n = f.size();

    bool all_same = true;
    for (std::size_t i = 1; i < n && all_same; ++i) all_same = f[i] == f[0];
    if (all_same) throw std::invalid_argument("kmeans2: degenerate clustering input");

    Rng rng(seed);
    std::vector<std::vector<double>> centroids(2);
    centroids[0] = f[rng.uniform_int(n)];
    // k-means++: pick the second centre with probability proportional to
    // the squared distance from the first.
    std::vector<double> d2(n);
    double d2sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        d2[i] = detail::sqdist(f[i], centroids[0]);
        d2sum += d2[i];
    }
    double pick = rng.uniform01() * d2sum;
    std::size_t second = n - 1;
    for (std::size_t i = 0; i < n; ++i) {
        pick -= d2[i];
        if (pick <= 0.0) {
            second = i;
            break;
        }
    }
    if (f[second] == centroids[0]) {
        for (std::size_t i = 0; i < n; ++i)
            if (f[i] != centroids[0]) {
                second = i;
                break;
            }
    }
    centroids[1] = f[second];

    std::vector<int> assign(n, 0);
    std::vector<double> objective_history;
    for (int iter = 0; iter < max_iters; ++iter) {
        bool changed = false;
        double wcss = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double da = detail::sqdist(f[i], centroids[0]);
            const double db = detail::sqdist(f[i], centroids[1]);
            const int lab = db < da ? 1 : 0;
            wcss += std::min(da, db);
            if (lab != assign[i]) changed = true;
            assign[i] = lab;
        }
        objective_history.push_back(wcss);
        for (int c = 0; c < 2; ++c) {
            std::vector<double> mean(f[0].size(), 0.0);
            std::size_t count = 0;
            for (std::size_t i = 0; i < n; ++i)
                if (assign[i] == c) {
                    ++count;
                    for (std::size_t j = 0; j < mean.size(); ++j) mean[j] += f[i][j];
                }
            if (count == 0) {
                // reseed an emptied cluster at the farthest point
                std::size_t far = 0;
                double best = -1.0;
                for (std::size_t i = 0; i < n; ++i) {
                    const double dd = detail::sqdist(f[i], centroids[1 - c]);
                    if (dd > best) {
                        best = dd;
                        far = i;
                    }
                }
                centroids[c] = f[far];
                changed = true;
                continue;
            }
            for (auto& m : mean) m /= count;
            centroids[c] = std::move(mean);
        }
        if (!changed && iter > 0) break;
    }

    // orient labels: hard = higher mean raw final loss
    double final_mean[2] = {0.0, 0.0};
    std::size_t counts[2] = {0, 0};
    for (std::size_t i = 0; i < n; ++i) {
        final_mean[assign[i]] += trajectories[i].losses.back();
        ++counts[assign[i]];
    }
    for (int c = 0; c < 2; ++c)
        if (counts[c] > 0) final_mean[c] /= counts[c];
    const bool flip = final_mean[0] > final_mean[1];

    ClusterAssignment out;
    out.feature_mode = mode;
    out.objective_history = std::move(objective_history);
    out.ids.reserve(n);
    out.labels.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        out.ids.push_back(trajectories[i].example_id);
        out.labels.push_back(flip ? 1 - assign[i] : assign[i]);
    }
    out.centroids = {centroids[flip ? 1 : 0], centroids[flip ? 0 : 1]};
    return out;
}

enum class ApplyMode { duplicate, weight };

struct UpsamplePlanItem {
    std::string id;
    bool hard = false;
    int multiplicity = 1;
};

struct UpsamplePlan {
    double factor = 1.0;
    ApplyMode mode = ApplyMode::duplicate;
    std::vector<UpsamplePlanItem> items;
    int n_hard = 0;
    int n_easy = 0;
};

inline UpsamplePlan build_plan(const ClusterAssignment& assignment, double factor,
                               ApplyMode mode = ApplyMode::duplicate) {
    if (!(factor >= 1.0)) throw std::invalid_argument("build_plan: factor must be >= 1");
    UpsamplePlan plan;
    plan.factor = factor;
    plan.mode = mode;
    const int mult = static_cast<int>(std::lround(factor));
    for (std::size_t i = 0; i < assignment.ids.size(); ++i) {
        const bool hard = assignment.labels[i] == 1;
        plan.items.push_back({assignment.ids[i], hard, hard ? std::max(1, mult) : 1});
        (hard ? plan.n_hard : plan.n_easy) += 1;
    }
    return plan;
}

/// Expand (duplicate mode) or reweight (weight mode) a dataset according to
/// the plan. The plan must cover exactly the dataset's ids.
inline TaskDataset apply_plan(const TaskDataset& dataset, const UpsamplePlan& plan,
                              ApplyMode mode) {
    std::unordered_map<std::string, const UpsamplePlanItem*> by_id;
    for (const auto& item : plan.items) {
        if (!by_id.emplace(item.id, &item).second)
            throw std::invalid_argument("apply_plan: duplicate id in plan: " + item.id);
    }
    if (by_id.size() != dataset.size())
        throw std::invalid_argument("apply_plan: plan covers " + std::to_string(by_id.size()) +
                                    " ids but dataset has " + std::to_string(dataset.size()));
    TaskDataset out;
    for (const auto& e : dataset.entries) {
        const auto it = by_id.find(e.id);
        if (it == by_id.end())
            throw std::invalid_argument("apply_plan: dataset id missing from plan: " + e.id);
        const auto& item = *it->second;
        if (mode == ApplyMode::duplicate) {
            const int copies = item.hard ? item.multiplicity : 1;
            for (int c = 0; c < copies; ++c) out.entries.push_back(e);
        } else {
            DatasetEntry w = e;
            w.weight = item.hard ? plan.factor : 1.0;
            out.entries.push_back(std::move(w));
        }
    }
    return out;
}

}  // namespace sblab
