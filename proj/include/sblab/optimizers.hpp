#pragma once

#include <cmath>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "sblab/attention.hpp"
#include "sblab/rng.hpp"
#include "sblab/spectra.hpp"

namespace sblab {

enum class OptimizerKind { gd, sam_exact, sam_first_order };
enum class GradMode { population, empirical };

struct OptimizerConfig {
    OptimizerKind kind = OptimizerKind::gd;
    double learning_rate = 0.01;
    double rho = 0.0;
    GradMode grad_mode = GradMode::population;
    int batch_size = 0;  // empirical mode; 0 = full batch
    long steps = 0;
    long snapshot_every = 1000;
    long loss_every = 10;

    void validate() const {
        if (!(learning_rate > 0.0)) throw std::invalid_argument("OptimizerConfig: learning_rate must be > 0");
        if (rho < 0.0) throw std::invalid_argument("OptimizerConfig: rho must be >= 0");
        if (kind == OptimizerKind::gd && rho != 0.0)
            throw std::invalid_argument("OptimizerConfig: rho must be 0 for gd");
        if (kind == OptimizerKind::sam_first_order && grad_mode != GradMode::population)
            throw std::invalid_argument(
                "OptimizerConfig: sam_first_order uses the population Hessian and requires "
                "grad_mode = population");
        if (steps < 0) throw std::invalid_argument("OptimizerConfig: steps must be >= 0");
        if (snapshot_every < 1 || loss_every < 1)
            throw std::invalid_argument("OptimizerConfig: cadences must be >= 1");
        if (grad_mode == GradMode::empirical && batch_size < 0)
            throw std::invalid_argument("OptimizerConfig: batch_size must be >= 0");
    }
};

struct TrainingTrace {
    std::vector<std::pair<long, double>> step_losses;  // test loss
    std::vector<std::pair<long, double>> train_losses; // empirical mode only
    std::vector<std::pair<long, std::vector<double>>> feature_progress_series;
    std::vector<std::pair<long, ModelParams>> snapshots;
    std::vector<long> checkpoint_steps;                // per-example tracking
    std::vector<std::vector<double>> per_example_losses;  // [checkpoint][example]
    double eta = 0.0;
    int dim = 0;
};

// ---------------------------------------------------------------------------
// Steppers.

inline ModelParams gd_step(const ModelParams& params, const GradientSet& grads, double eta) {
    if (grads.heads.size() != params.heads.size())
        throw std::invalid_argument("gd_step: gradient shape mismatch");
    ModelParams out = params;
    for (std::size_t h = 0; h < out.heads.size(); ++h) {
        out.heads[h].v -= eta * grads.heads[h].dv;
        for (std::size_t j = 0; j < out.heads[h].k.size(); ++j) {
            out.heads[h].k[j] -= eta * grads.heads[h].dk[j];
            out.heads[h].q[j] -= eta * grads.heads[h].dq[j];
        }
    }
    return out;
}

constexpr double kTinyGradNorm = 1e-12;

/// Two-step SAM on a flat parameter vector: ascend by rho along the
/// normalized gradient, then descend on the gradient at the perturbed point.
/// Degenerates to plain GD when rho = 0 or the gradient is tiny.
inline std::vector<double> sam_step_exact(
    const std::vector<double>& x,
    const std::function<std::vector<double>(const std::vector<double>&)>& loss_grad_fn,
    double eta, double rho) {
    if (rho < 0.0) throw std::invalid_argument("sam_step_exact: rho must be >= 0");
    std::vector<double> g = loss_grad_fn(x);
    const double gn = norm2(g);
    if (rho > 0.0 && gn > kTinyGradNorm) {
        std::vector<double> xp = x;
        for (std::size_t i = 0; i < x.size(); ++i) xp[i] += rho / gn * g[i];
        g = loss_grad_fn(xp);
    }
    std::vector<double> out = x;
    for (std::size_t i = 0; i < x.size(); ++i) out[i] -= eta * g[i];
    return out;
}

inline ModelParams sam_step_exact(const ModelParams& params, const CovarianceSpec& spec, int n_ctx,
                                  double eta, double rho) {
    const int d = params.dim();
    const int nh = params.n_heads();
    auto grad_fn = [&](const std::vector<double>& x) {
        return flatten(population_gradients(unflatten(x, d, nh), spec, n_ctx));
    };
    return unflatten(sam_step_exact(flatten(params), grad_fn, eta, rho), d, nh);
}

/// Head with the largest gradient norm; ties break to the lowest index.
/// 1-based, matching hessian_blocks.
inline int active_head_index(const GradientSet& g) {
    int best = 1;
    double best_norm = -1.0;
    for (std::size_t h = 0; h < g.heads.size(); ++h) {
        double s = g.heads[h].dv * g.heads[h].dv;
        for (double x : g.heads[h].dk) s += x * x;
        for (double x : g.heads[h].dq) s += x * x;
        if (s > best_norm) {
            best_norm = s;
            best = static_cast<int>(h) + 1;
        }
    }
    return best;
}

/// One-gradient SAM: descend on (I + P) grad with P = (rho/|grad|) H
/// applied to the active head's coordinates only.
inline ModelParams sam_step_first_order(const ModelParams& params, const CovarianceSpec& spec,
                                        int n_ctx, double eta, double rho, int active_head) {
    if (rho < 0.0) throw std::invalid_argument("sam_step_first_order: rho must be >= 0");
    const GradientSet g = population_gradients(params, spec, n_ctx);
    const double gn = norm2(flatten(g));
    if (rho == 0.0 || gn <= kTinyGradNorm) return gd_step(params, g, eta);

    const int d = params.dim();
    const Matrix hess = hessian_blocks(params, spec, n_ctx, active_head);
    const auto& gh = g.heads[static_cast<std::size_t>(active_head - 1)];
    std::vector<double> gvec(2 * d + 1);
    gvec[0] = gh.dv;
    for (int j = 0; j < d; ++j) {
        gvec[1 + j] = gh.dk[j];
        gvec[1 + d + j] = gh.dq[j];
    }
    std::vector<double> corr(2 * d + 1, 0.0);
    for (int r = 0; r < 2 * d + 1; ++r)
        for (int c = 0; c < 2 * d + 1; ++c) corr[r] += hess.at(r, c) * gvec[c];

    GradientSet total = g;
    auto& th = total.heads[static_cast<std::size_t>(active_head - 1)];
    th.dv += rho / gn * corr[0];
    for (int j = 0; j < d; ++j) {
        th.dk[j] += rho / gn * corr[1 + j];
        th.dq[j] += rho / gn * corr[1 + d + j];
    }
    return gd_step(params, total, eta);
}

// ---------------------------------------------------------------------------
// Initialization.

enum class InitMode { gaussian, ansatz };

struct InitSpec {
    InitMode mode = InitMode::gaussian;
    double scale = 1e-2;  // sigma0 for gaussian, eps for ansatz
};

inline ModelParams init_params(const InitSpec& init, int d, int n_heads, Rng& rng) {
    ModelParams p = zero_params(d, n_heads);
    if (init.mode == InitMode::gaussian) {
        if (init.scale < 0.0) throw std::invalid_argument("init_params: sigma0 must be >= 0");
        for (auto& h : p.heads) {
            h.v = init.scale * rng.normal();
            for (int j = 0; j < d; ++j) h.k[j] = init.scale * rng.normal();
            for (int j = 0; j < d; ++j) h.q[j] = init.scale * rng.normal();
        }
    } else {
        if (!(init.scale > 0.0)) throw std::invalid_argument("init_params: eps must be > 0");
        for (int i = 0; i < std::min(n_heads, d); ++i) {
            p.heads[i].v = init.scale;
            p.heads[i].k[i] = init.scale;
            p.heads[i].q[i] = init.scale;
        }
    }
    return p;
}

// ---------------------------------------------------------------------------
// Datasets and fast loss evaluation.
//
// The prediction depends on parameters only through W = sum_h v_h k_h q_h',
// so the mean squared loss over any fixed task collection is an exact
// quadratic in W. Precomputing its coefficients makes loss tracking O(d^4)
// per evaluation regardless of collection size.

struct DatasetEntry {
    std::string id;
    TaskProjection task;
    double weight = 1.0;
    int group = -1;            // generator bookkeeping, not used in training
    std::vector<double> rule;  // task weight vector, generator bookkeeping
};

struct TaskDataset {
    std::vector<DatasetEntry> entries;

    std::size_t size() const { return entries.size(); }
};

struct LossQuadratic {
    int d = 0;
    double c0 = 0.0;
    Matrix b;     // d x d, mean of y * M
    Matrix cmat;  // d^2 x d^2 over row-major vec(W)

    static LossQuadratic from_tasks(const std::vector<TaskProjection>& tasks,
                                    const std::vector<double>* weights = nullptr) {
        if (tasks.empty()) throw std::invalid_argument("LossQuadratic: empty task collection");
        const int d = static_cast<int>(tasks.front().xq.size());
        LossQuadratic q;
        q.d = d;
        q.b = Matrix(d, d);
        q.cmat = Matrix(d * d, d * d);
        double den = 0.0;
        std::vector<double> m(static_cast<std::size_t>(d) * d);
        for (std::size_t i = 0; i < tasks.size(); ++i) {
            const auto& t = tasks[i];
            const double w = weights ? (*weights)[i] : 1.0;
            den += w;
            q.c0 += w * t.y * t.y;
            for (int r = 0; r < d; ++r)
                for (int c = 0; c < d; ++c) {
                    m[static_cast<std::size_t>(r) * d + c] = t.b[r] * t.xq[c];
                    q.b.at(r, c) += w * t.y * t.b[r] * t.xq[c];
                }
            for (int u = 0; u < d * d; ++u)
                for (int v = 0; v < d * d; ++v) q.cmat.at(u, v) += w * m[u] * m[v];
        }
        q.c0 /= den;
        for (auto& x : q.b.a) x /= den;
        for (auto& x : q.cmat.a) x /= den;
        return q;
    }

    double loss(const Matrix& w) const {
        double out = c0;
        for (int r = 0; r < d; ++r)
            for (int c = 0; c < d; ++c) out -= 2.0 * b.at(r, c) * w.at(r, c);
        const int n = d * d;
        for (int u = 0; u < n; ++u) {
            double acc = 0.0;
            for (int v = 0; v < n; ++v) acc += cmat.at(u, v) * w.a[v];
            out += w.a[u] * acc;
        }
        return out;
    }

    double loss(const ModelParams& params) const { return loss(aggregate_w(params)); }
};

inline std::vector<TaskProjection> sample_eval_tasks(const CovarianceSpec& spec, int n_ctx,
                                                     int count, Rng& rng) {
    std::vector<TaskProjection> tasks;
    tasks.reserve(count);
    for (int i = 0; i < count; ++i) tasks.push_back(project_task(sample_task(spec, n_ctx, rng)));
    return tasks;
}

// ---------------------------------------------------------------------------
// Training loop.

constexpr double kDivergenceLossCap = 1e6;

/// Runs one training trajectory. Population mode follows the gradient flow
/// tau dW/dt = -(1/2) grad L with Euler step dt = learning_rate, so recorded
/// steps convert to flow time as step * learning_rate. Empirical mode is the
/// plain discrete update w <- w - eta * grad on mini-batches of `dataset`.
/// Test losses come from `eval_loss` when provided (a fixed evaluation set),
/// otherwise from the exact population loss.
inline TrainingTrace train(const ModelParams& init, const CovarianceSpec& spec, int n_ctx,
                           const OptimizerConfig& cfg, const TaskDataset* dataset, Rng& rng,
                           const LossQuadratic* eval_loss = nullptr,
                           int per_example_checkpoints = 0) {
    cfg.validate();
    const int d = spec.dim();
    if (init.dim() != d) throw std::invalid_argument("train: init dimension mismatch");
    const bool empirical = cfg.grad_mode == GradMode::empirical;
    if (empirical && (dataset == nullptr || dataset->entries.empty()))
        throw std::invalid_argument("train: empirical mode requires a non-empty dataset");
    if (!empirical && dataset != nullptr)
        throw std::invalid_argument("train: population mode does not take a dataset");

    // Flow-time convention: one population Euler step of size eta advances
    // t by eta under tau dW/dt = -(1/2) grad, i.e. a plain gradient step of
    // rate eta/2.
    const double step_rate = empirical ? cfg.learning_rate : 0.5 * cfg.learning_rate;

    std::optional<LossQuadratic> train_quadratic;
    std::vector<TaskProjection> all_tasks;
    std::vector<double> all_weights;
    if (empirical) {
        all_tasks.reserve(dataset->size());
        all_weights.reserve(dataset->size());
        for (const auto& e : dataset->entries) {
            all_tasks.push_back(e.task);
            all_weights.push_back(e.weight);
        }
        train_quadratic = LossQuadratic::from_tasks(all_tasks, &all_weights);
    }

    TrainingTrace trace;
    trace.eta = cfg.learning_rate;
    trace.dim = d;

    if (per_example_checkpoints > 0) {
        if (!empirical)
            throw std::invalid_argument("train: per-example tracking requires empirical mode");
        if (cfg.steps < per_example_checkpoints)
            throw std::invalid_argument("train: need steps >= per_example_checkpoints");
        for (int j = 1; j <= per_example_checkpoints; ++j)
            trace.checkpoint_steps.push_back(cfg.steps * j / per_example_checkpoints);
    }

    ModelParams params = init;

    auto test_loss = [&](const ModelParams& p) {
        if (eval_loss) return eval_loss->loss(p);
        if (empirical) return train_quadratic->loss(p);
        return population_loss(p, spec, n_ctx);
    };

    auto record = [&](long step) {
        const double loss = test_loss(params);
        if (!std::isfinite(loss) || loss > kDivergenceLossCap)
            throw std::runtime_error("train: diverged at step " + std::to_string(step) +
                                     " (test loss " + std::to_string(loss) + ")");
        trace.step_losses.emplace_back(step, loss);
        if (empirical) trace.train_losses.emplace_back(step, train_quadratic->loss(params));
        trace.feature_progress_series.emplace_back(step, feature_progress(params, spec, n_ctx));
    };

    record(0);
    trace.snapshots.emplace_back(0, params);

    std::vector<TaskProjection> batch;
    std::vector<double> batch_weights;
    std::size_t next_checkpoint = 0;

    for (long step = 1; step <= cfg.steps; ++step) {
        if (empirical) {
            const std::vector<TaskProjection>* tasks = &all_tasks;
            const std::vector<double>* weights = &all_weights;
            if (cfg.batch_size > 0) {
                batch.clear();
                batch_weights.clear();
                for (int i = 0; i < cfg.batch_size; ++i) {
                    const auto idx = rng.uniform_int(dataset->size());
                    batch.push_back(all_tasks[idx]);
                    batch_weights.push_back(all_weights[idx]);
                }
                tasks = &batch;
                weights = &batch_weights;
            }
            if (cfg.kind == OptimizerKind::sam_exact) {
                auto grad_fn = [&](const std::vector<double>& x) {
                    return flatten(
                        empirical_gradients(unflatten(x, d, init.n_heads()), *tasks, weights));
                };
                params = unflatten(sam_step_exact(flatten(params), grad_fn, step_rate, cfg.rho), d,
                                   init.n_heads());
            } else {
                params = gd_step(params, empirical_gradients(params, *tasks, weights), step_rate);
            }
        } else {
            switch (cfg.kind) {
                case OptimizerKind::gd:
                    params = gd_step(params, population_gradients(params, spec, n_ctx), step_rate);
                    break;
                case OptimizerKind::sam_exact:
                    params = sam_step_exact(params, spec, n_ctx, step_rate, cfg.rho);
                    break;
                case OptimizerKind::sam_first_order: {
                    const int active = active_head_index(population_gradients(params, spec, n_ctx));
                    params = sam_step_first_order(params, spec, n_ctx, step_rate, cfg.rho, active);
                    break;
                }
            }
        }

        if (step % cfg.loss_every == 0 || step == cfg.steps) record(step);
        if (step % cfg.snapshot_every == 0 || step == cfg.steps)
            trace.snapshots.emplace_back(step, params);

        if (next_checkpoint < trace.checkpoint_steps.size() &&
            step == trace.checkpoint_steps[next_checkpoint]) {
            std::vector<double> losses;
            losses.reserve(all_tasks.size());
            for (const auto& t : all_tasks) {
                const double r = t.y - predict(params, t);
                losses.push_back(r * r);
            }
            trace.per_example_losses.push_back(std::move(losses));
            ++next_checkpoint;
        }
    }
    return trace;
}

}  // namespace sblab
