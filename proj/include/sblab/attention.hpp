#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "sblab/spectra.hpp"

namespace sblab {

/// One rank-one attention head: scalar value, d-dim key and query.
struct HeadParams {
    double v = 0.0;
    std::vector<double> k;
    std::vector<double> q;
};

struct ModelParams {
    std::vector<HeadParams> heads;

    int n_heads() const { return static_cast<int>(heads.size()); }
    int dim() const { return heads.empty() ? 0 : static_cast<int>(heads.front().k.size()); }
};

inline ModelParams zero_params(int d, int n_heads) {
    ModelParams p;
    p.heads.assign(n_heads, HeadParams{0.0, std::vector<double>(d, 0.0),
                                       std::vector<double>(d, 0.0)});
    return p;
}

struct HeadGradient {
    double dv = 0.0;
    std::vector<double> dk;
    std::vector<double> dq;
};

struct GradientSet {
    std::vector<HeadGradient> heads;
};

/// Merged key-query variant: a two-layer linear network on the feature map z.
struct MergedParams {
    std::vector<double> w2;               // H
    std::vector<std::vector<double>> w1;  // H rows of length d*d
};

struct Matrix {
    int rows = 0, cols = 0;
    std::vector<double> a;

    Matrix() = default;
    Matrix(int r, int c) : rows(r), cols(c), a(static_cast<std::size_t>(r) * c, 0.0) {}
    double& at(int r, int c) { return a[static_cast<std::size_t>(r) * cols + c]; }
    double at(int r, int c) const { return a[static_cast<std::size_t>(r) * cols + c]; }
};

// ---------------------------------------------------------------------------
// Flat parameter vector: per head [v, k_0..k_{d-1}, q_0..q_{d-1}].

inline std::vector<double> flatten(const ModelParams& p) {
    const int d = p.dim();
    std::vector<double> x;
    x.reserve(static_cast<std::size_t>(p.n_heads()) * (2 * d + 1));
    for (const auto& h : p.heads) {
        x.push_back(h.v);
        x.insert(x.end(), h.k.begin(), h.k.end());
        x.insert(x.end(), h.q.begin(), h.q.end());
    }
    return x;
}

inline std::vector<double> flatten(const GradientSet& g) {
    std::vector<double> x;
    for (const auto& h : g.heads) {
        x.push_back(h.dv);
        x.insert(x.end(), h.dk.begin(), h.dk.end());
        x.insert(x.end(), h.dq.begin(), h.dq.end());
    }
    return x;
}

inline ModelParams unflatten(const std::vector<double>& x, int d, int n_heads) {
    if (static_cast<int>(x.size()) != n_heads * (2 * d + 1))
        throw std::invalid_argument("unflatten: size mismatch");
    ModelParams p = zero_params(d, n_heads);
    std::size_t i = 0;
    for (auto& h : p.heads) {
        h.v = x[i++];
        for (int j = 0; j < d; ++j) h.k[j] = x[i++];
        for (int j = 0; j < d; ++j) h.q[j] = x[i++];
    }
    return p;
}

// ---------------------------------------------------------------------------
// Per-task view: the prediction depends on the task only through
// b = (1/N) sum_i y_i x_i, the query x_q, and the label y_q.

struct TaskProjection {
    std::vector<double> b;
    std::vector<double> xq;
    double y = 0.0;
};

inline TaskProjection project_task(const TaskSample& task) {
    const int d = task.dim();
    TaskProjection t;
    t.b.assign(d, 0.0);
    for (int i = 0; i < task.n_ctx(); ++i)
        for (int j = 0; j < d; ++j) t.b[j] += task.context_labels[i] * task.context_inputs[i][j];
    for (int j = 0; j < d; ++j) t.b[j] /= task.n_ctx();
    t.xq = task.query_input;
    t.y = task.query_label;
    return t;
}

inline double predict(const ModelParams& params, const TaskProjection& t) {
    const int d = static_cast<int>(t.b.size());
    if (params.dim() != d) throw std::invalid_argument("predict: dimension mismatch");
    double yhat = 0.0;
    for (const auto& h : params.heads) yhat += h.v * dot(h.k, t.b) * dot(h.q, t.xq);
    return yhat;
}

/// yhat = sum_h v_h (k_h' M q_h) with M = (1/N) sum_i y_i x_i x_q'.
inline double predict(const ModelParams& params, const TaskSample& task) {
    return predict(params, project_task(task));
}

inline double predict_merged(const MergedParams& params, const TaskSample& task) {
    const FeatureVecZ z = feature_map_z(task);
    if (params.w1.size() != params.w2.size())
        throw std::invalid_argument("predict_merged: layer shape mismatch");
    double yhat = 0.0;
    for (std::size_t h = 0; h < params.w2.size(); ++h) {
        if (params.w1[h].size() != z.values.size())
            throw std::invalid_argument("predict_merged: dimension mismatch");
        yhat += params.w2[h] * dot(params.w1[h], z.values);
    }
    return yhat;
}

// ---------------------------------------------------------------------------
// Empirical loss and gradients on a finite batch (optionally weighted).

inline double empirical_loss(const ModelParams& params, const std::vector<TaskProjection>& batch,
                             const std::vector<double>* weights = nullptr) {
    if (batch.empty()) throw std::invalid_argument("empirical_loss: empty batch");
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const double w = weights ? (*weights)[i] : 1.0;
        const double r = batch[i].y - predict(params, batch[i]);
        num += w * r * r;
        den += w;
    }
    return num / den;
}

inline double empirical_loss(const ModelParams& params, const std::vector<TaskSample>& batch) {
    std::vector<TaskProjection> proj;
    proj.reserve(batch.size());
    for (const auto& t : batch) proj.push_back(project_task(t));
    return empirical_loss(params, proj);
}

inline GradientSet empirical_gradients(const ModelParams& params,
                                       const std::vector<TaskProjection>& batch,
                                       const std::vector<double>* weights = nullptr) {
    if (batch.empty()) throw std::invalid_argument("empirical_gradients: empty batch");
    const int d = params.dim();
    const int nh = params.n_heads();

    GradientSet g;
    g.heads.assign(nh, HeadGradient{0.0, std::vector<double>(d, 0.0), std::vector<double>(d, 0.0)});

    double den = 0.0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const auto& t = batch[i];
        const double w = weights ? (*weights)[i] : 1.0;
        den += w;
        const double r = predict(params, t) - t.y;
        const double c = 2.0 * w * r;
        for (int h = 0; h < nh; ++h) {
            const auto& hp = params.heads[h];
            const double kb = dot(hp.k, t.b);
            const double qx = dot(hp.q, t.xq);
            g.heads[h].dv += c * kb * qx;
            // d yhat / d k = v (M q) = v (x_q . q) b ; d yhat / d q = v (M' k) = v (b . k) x_q
            for (int j = 0; j < d; ++j) {
                g.heads[h].dk[j] += c * hp.v * qx * t.b[j];
                g.heads[h].dq[j] += c * hp.v * kb * t.xq[j];
            }
        }
    }
    for (auto& h : g.heads) {
        h.dv /= den;
        for (auto& x : h.dk) x /= den;
        for (auto& x : h.dq) x /= den;
    }
    return g;
}

inline GradientSet empirical_gradients(const ModelParams& params,
                                       const std::vector<TaskSample>& batch) {
    std::vector<TaskProjection> proj;
    proj.reserve(batch.size());
    for (const auto& t : batch) proj.push_back(project_task(t));
    return empirical_gradients(params, proj);
}

// ---------------------------------------------------------------------------
// Population quantities. Everything is expressed through the aggregate
// W = sum_h v_h k_h q_h' and the diagonal matrices Sigma and E[Sigma_hat^2].

inline Matrix aggregate_w(const ModelParams& params) {
    const int d = params.dim();
    Matrix w(d, d);
    for (const auto& h : params.heads)
        for (int r = 0; r < d; ++r)
            for (int c = 0; c < d; ++c) w.at(r, c) += h.v * h.k[r] * h.q[c];
    return w;
}

/// Exact expected squared loss over fresh tasks:
///   L = Tr(Sigma) - 2 tr(W' Sigma^2) + tr(W' E[Sigma_hat^2] W Sigma).
inline double population_loss(const ModelParams& params, const CovarianceSpec& spec, int n_ctx) {
    const int d = spec.dim();
    if (params.dim() != d) throw std::invalid_argument("population_loss: dimension mismatch");
    const auto a = expected_sample_cov_sq_eigs(spec, n_ctx);
    const Matrix w = aggregate_w(params);
    double loss = spec.trace();
    for (int r = 0; r < d; ++r) {
        const double lam_r = spec.eigenvalues[r];
        loss -= 2.0 * lam_r * lam_r * w.at(r, r);
        for (int c = 0; c < d; ++c) loss += a[r] * spec.eigenvalues[c] * w.at(r, c) * w.at(r, c);
    }
    return loss;
}

inline GradientSet population_gradients(const ModelParams& params, const CovarianceSpec& spec,
                                        int n_ctx) {
    const int d = spec.dim();
    if (params.dim() != d) throw std::invalid_argument("population_gradients: dimension mismatch");
    const auto a = expected_sample_cov_sq_eigs(spec, n_ctx);
    const Matrix w = aggregate_w(params);

    // R = Sigma^2 - E[Sigma_hat^2] W Sigma. The v and k gradients read R,
    // the q gradient reads R'.
    Matrix rmat(d, d);
    for (int r = 0; r < d; ++r)
        for (int c = 0; c < d; ++c) {
            const double diag = (r == c) ? spec.eigenvalues[r] * spec.eigenvalues[r] : 0.0;
            rmat.at(r, c) = diag - a[r] * w.at(r, c) * spec.eigenvalues[c];
        }

    GradientSet g;
    g.heads.assign(params.n_heads(),
                   HeadGradient{0.0, std::vector<double>(d, 0.0), std::vector<double>(d, 0.0)});
    for (int h = 0; h < params.n_heads(); ++h) {
        const auto& hp = params.heads[h];
        std::vector<double> rq(d, 0.0), rtk(d, 0.0);
        for (int r = 0; r < d; ++r)
            for (int c = 0; c < d; ++c) {
                rq[r] += rmat.at(r, c) * hp.q[c];
                rtk[c] += rmat.at(r, c) * hp.k[r];
            }
        g.heads[h].dv = -2.0 * dot(hp.k, rq);
        for (int j = 0; j < d; ++j) {
            g.heads[h].dk[j] = -2.0 * hp.v * rq[j];
            g.heads[h].dq[j] = -2.0 * hp.v * rtk[j];
        }
    }
    return g;
}

/// Hessian of the population loss restricted to one head's coordinates
/// (v, k, q), as a symmetric (2d+1) x (2d+1) matrix.
inline Matrix hessian_blocks(const ModelParams& params, const CovarianceSpec& spec, int n_ctx,
                             int head) {
    const int d = spec.dim();
    if (params.dim() != d) throw std::invalid_argument("hessian_blocks: dimension mismatch");
    if (head < 1 || head > params.n_heads())
        throw std::invalid_argument("hessian_blocks: head index " + std::to_string(head) +
                                    " out of range 1.." + std::to_string(params.n_heads()));
    const auto a = expected_sample_cov_sq_eigs(spec, n_ctx);
    const Matrix w = aggregate_w(params);
    const auto& hp = params.heads[static_cast<std::size_t>(head - 1)];
    const auto& lam = spec.eigenvalues;

    std::vector<double> ek(d), sq(d), ewsq(d, 0.0), swek(d, 0.0);
    double kek = 0.0, qsq = 0.0;
    for (int r = 0; r < d; ++r) {
        ek[r] = a[r] * hp.k[r];
        sq[r] = lam[r] * hp.q[r];
        kek += a[r] * hp.k[r] * hp.k[r];
        qsq += lam[r] * hp.q[r] * hp.q[r];
    }
    for (int r = 0; r < d; ++r)
        for (int c = 0; c < d; ++c) {
            ewsq[r] += a[r] * w.at(r, c) * lam[c] * hp.q[c];   // (E W Sigma q)_r
            swek[c] += lam[c] * w.at(r, c) * a[r] * hp.k[r];   // (Sigma W' E k)_c
        }

    const int n = 2 * d + 1;
    Matrix hmat(n, n);
    // layout: index 0 = v, 1..d = k, d+1..2d = q
    hmat.at(0, 0) = 2.0 * kek * qsq;
    for (int r = 0; r < d; ++r) {
        const double hkv = -2.0 * lam[r] * lam[r] * hp.q[r] + 2.0 * ewsq[r] + 2.0 * hp.v * qsq * ek[r];
        const double hqv = -2.0 * lam[r] * lam[r] * hp.k[r] + 2.0 * swek[r] + 2.0 * hp.v * kek * sq[r];
        hmat.at(1 + r, 0) = hkv;
        hmat.at(0, 1 + r) = hkv;
        hmat.at(1 + d + r, 0) = hqv;
        hmat.at(0, 1 + d + r) = hqv;
    }
    for (int r = 0; r < d; ++r) {
        hmat.at(1 + r, 1 + r) = 2.0 * hp.v * hp.v * qsq * a[r];
        hmat.at(1 + d + r, 1 + d + r) = 2.0 * hp.v * hp.v * kek * lam[r];
        for (int c = 0; c < d; ++c) {
            double hkq = 2.0 * hp.v * a[r] * w.at(r, c) * lam[c] + 2.0 * hp.v * hp.v * ek[r] * sq[c];
            if (r == c) hkq -= 2.0 * hp.v * lam[r] * lam[r];
            hmat.at(1 + r, 1 + d + c) = hkq;
            hmat.at(1 + d + c, 1 + r) = hkq;
        }
    }
    return hmat;
}

/// Learned fraction per feature: m_i = W_ii.
inline std::vector<double> feature_progress(const ModelParams& params, const CovarianceSpec& spec,
                                            int /*n_ctx*/) {
    const int d = spec.dim();
    if (params.dim() != d) throw std::invalid_argument("feature_progress: dimension mismatch");
    const Matrix w = aggregate_w(params);
    std::vector<double> m(d);
    for (int i = 0; i < d; ++i) m[i] = w.at(i, i);
    return m;
}

}  // namespace sblab
