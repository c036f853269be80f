#pragma once

#include <cmath>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "sblab/rng.hpp"

namespace sblab {

/// Eigen-spectrum of the data covariance. Eigenvectors are fixed to the
/// standard basis, so the spectrum is the whole description.
struct CovarianceSpec {
    std::vector<double> eigenvalues;  // strictly decreasing, positive, distinct

    int dim() const { return static_cast<int>(eigenvalues.size()); }
    double trace() const {
        return std::accumulate(eigenvalues.begin(), eigenvalues.end(), 0.0);
    }
};

inline CovarianceSpec make_spectrum(int d, const std::vector<double>& eigenvalues) {
    if (d <= 0) throw std::invalid_argument("make_spectrum: dimension must be positive");
    if (static_cast<int>(eigenvalues.size()) != d)
        throw std::invalid_argument("make_spectrum: expected " + std::to_string(d) +
                                    " eigenvalues, got " + std::to_string(eigenvalues.size()));
    for (int i = 0; i < d; ++i) {
        if (!(eigenvalues[i] > 0.0) || !std::isfinite(eigenvalues[i]))
            throw std::invalid_argument("make_spectrum: eigenvalue " + std::to_string(i + 1) +
                                        " must be positive and finite");
        if (i > 0) {
            if (eigenvalues[i] == eigenvalues[i - 1])
                throw std::invalid_argument("make_spectrum: eigenvalues must be distinct (index " +
                                            std::to_string(i + 1) + ")");
            if (eigenvalues[i] > eigenvalues[i - 1])
                throw std::invalid_argument(
                    "make_spectrum: eigenvalues must be strictly decreasing (index " +
                    std::to_string(i + 1) + ")");
        }
    }
    return CovarianceSpec{eigenvalues};
}

inline CovarianceSpec geometric_spectrum(int d, double gamma) {
    if (!(gamma > 0.0) || gamma >= 1.0)
        throw std::invalid_argument("geometric_spectrum: gamma must lie in (0,1)");
    std::vector<double> eig(d);
    double v = 1.0;
    for (int i = 0; i < d; ++i, v *= gamma) eig[i] = v;
    return make_spectrum(d, eig);
}

/// Diagonal of E[sample-covariance squared] in the eigenbasis:
///   a_i = (1 + 1/N) lambda_i^2 + (Tr(Sigma)/N) lambda_i.
inline std::vector<double> expected_sample_cov_sq_eigs(const CovarianceSpec& spec, int n_ctx) {
    if (n_ctx < 1) throw std::invalid_argument("expected_sample_cov_sq_eigs: n_ctx must be >= 1");
    const double n = static_cast<double>(n_ctx);
    const double tr = spec.trace();
    std::vector<double> a(spec.eigenvalues.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double lam = spec.eigenvalues[i];
        a[i] = (1.0 + 1.0 / n) * lam * lam + (tr / n) * lam;
    }
    return a;
}

/// Stationary value of the learned weight for feature i (1-based):
///   v_i = (lambda_i + (lambda_i + Tr(Sigma))/N)^(-1/3).
inline double fixed_point_v_target(const CovarianceSpec& spec, int n_ctx, int i) {
    if (n_ctx < 1) throw std::invalid_argument("fixed_point_v_target: n_ctx must be >= 1");
    if (i < 1 || i > spec.dim())
        throw std::invalid_argument("fixed_point_v_target: feature index " + std::to_string(i) +
                                    " out of range 1.." + std::to_string(spec.dim()));
    const double lam = spec.eigenvalues[static_cast<std::size_t>(i - 1)];
    return std::pow(lam + (lam + spec.trace()) / n_ctx, -1.0 / 3.0);
}

/// Stationary value of the aggregate progress m_i = e_i' (sum_h v_h k_h q_h') e_i.
inline double feature_progress_target(const CovarianceSpec& spec, int n_ctx, int i) {
    const double v = fixed_point_v_target(spec, n_ctx, i);
    return v * v * v;
}

/// One in-context regression sequence: N labelled context pairs plus a query.
struct TaskSample {
    std::vector<std::vector<double>> context_inputs;  // N vectors of dim d
    std::vector<double> context_labels;               // N
    std::vector<double> query_input;                  // d
    double query_label = 0.0;
    std::vector<double> task_weights;                 // d

    int dim() const { return static_cast<int>(query_input.size()); }
    int n_ctx() const { return static_cast<int>(context_inputs.size()); }
};

struct FeatureVecZ {
    std::vector<double> values;  // length d*d, column-flattened
};

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double norm2(const std::vector<double>& x) {
    double s = 0.0;
    for (double v : x) s += v * v;
    return std::sqrt(s);
}

inline TaskSample sample_task(const CovarianceSpec& spec, int n_ctx, Rng& rng,
                              const std::optional<std::vector<double>>& weight_override = {}) {
    if (n_ctx < 1) throw std::invalid_argument("sample_task: n_ctx must be >= 1");
    const int d = spec.dim();

    TaskSample task;
    task.task_weights.resize(d);
    if (weight_override) {
        if (static_cast<int>(weight_override->size()) != d)
            throw std::invalid_argument("sample_task: weight_override has wrong dimension");
        task.task_weights = *weight_override;
    } else {
        for (int j = 0; j < d; ++j) task.task_weights[j] = rng.normal();
    }

    std::vector<double> sqrt_lam(d);
    for (int j = 0; j < d; ++j) sqrt_lam[j] = std::sqrt(spec.eigenvalues[j]);

    auto draw_x = [&] {
        std::vector<double> x(d);
        for (int j = 0; j < d; ++j) x[j] = sqrt_lam[j] * rng.normal();
        return x;
    };

    task.context_inputs.reserve(n_ctx);
    task.context_labels.reserve(n_ctx);
    for (int i = 0; i < n_ctx; ++i) {
        auto x = draw_x();
        task.context_labels.push_back(dot(task.task_weights, x));
        task.context_inputs.push_back(std::move(x));
    }
    task.query_input = draw_x();
    task.query_label = dot(task.task_weights, task.query_input);
    return task;
}

/// Cubic feature map z = vec((1/N) sum_i y_i x_i x_q'), column-major.
inline FeatureVecZ feature_map_z(const TaskSample& task) {
    const int d = task.dim();
    const int n = task.n_ctx();

    // b = (1/N) sum_i y_i x_i, so the matrix is the rank-one b x_q'.
    std::vector<double> b(d, 0.0);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) b[j] += task.context_labels[i] * task.context_inputs[i][j];
    for (int j = 0; j < d; ++j) b[j] /= n;

    FeatureVecZ z;
    z.values.resize(static_cast<std::size_t>(d) * d);
    for (int col = 0; col < d; ++col)
        for (int row = 0; row < d; ++row)
            z.values[static_cast<std::size_t>(col) * d + row] = b[row] * task.query_input[col];
    return z;
}

}  // namespace sblab
