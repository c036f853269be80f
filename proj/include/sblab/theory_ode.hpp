#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "sblab/spectra.hpp"

namespace sblab {

/// Scalar early-training dynamics for one feature of strength lambda.
struct EarlyOdeParams {
    double lambda = 1.0;
    double rho = 0.0;
    double tau = 1.0;
    double rho_hat = 0.0;  // 2*rho/sqrt(3)

    EarlyOdeParams(double lambda_, double rho_, double tau_)
        : lambda(lambda_), rho(rho_), tau(tau_), rho_hat(2.0 * rho_ / std::sqrt(3.0)) {
        if (!(lambda > 0.0) || !(tau > 0.0) || rho < 0.0)
            throw std::invalid_argument("EarlyOdeParams: need lambda, tau > 0 and rho >= 0");
    }
};

inline double gd_ode_rhs(double v, const EarlyOdeParams& p) {
    return p.lambda * p.lambda * v * v / p.tau;
}

inline double sam_ode_rhs(double v, const EarlyOdeParams& p) {
    return p.lambda * p.lambda * v * (v - p.rho_hat) / p.tau;
}

/// Classical fixed-step RK4 on dv/dt = rhs(v). Stops early if v exceeds
/// v_cap (the growth ODEs blow up in finite time).
inline std::vector<std::pair<double, double>> integrate_scalar_ode(
    const std::function<double(double)>& rhs, double v0, double t_end, double dt,
    double v_cap = std::numeric_limits<double>::infinity()) {
    if (!(dt > 0.0)) throw std::invalid_argument("integrate_scalar_ode: dt must be positive");
    if (!std::isfinite(v0)) throw std::invalid_argument("integrate_scalar_ode: v0 not finite");

    std::vector<std::pair<double, double>> path;
    path.emplace_back(0.0, v0);
    double v = v0;
    double t = 0.0;
    const long n_steps = static_cast<long>(std::ceil(t_end / dt - 1e-12));
    for (long i = 0; i < n_steps; ++i) {
        const double h = std::min(dt, t_end - t);
        const double k1 = rhs(v);
        const double k2 = rhs(v + 0.5 * h * k1);
        const double k3 = rhs(v + 0.5 * h * k2);
        const double k4 = rhs(v + h * k3);
        v += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        t += h;
        if (!std::isfinite(v))
            throw std::runtime_error("integrate_scalar_ode: non-finite state at t=" +
                                     std::to_string(t));
        path.emplace_back(t, v);
        if (v > v_cap) break;
    }
    return path;
}

/// Time for the GD early phase, integrating tau/(lambda^2 v^2) from eps to
/// c*lambda^(-1/3). Closed form: (tau/lambda^2)(1/eps - lambda^(1/3)/c).
inline double learning_time_gd(double lambda, double eps, double c, double tau) {
    if (!(lambda > 0.0) || !(eps > 0.0) || !(c > 0.0) || !(tau > 0.0))
        throw std::invalid_argument("learning_time_gd: parameters must be positive");
    const double u = c * std::pow(lambda, -1.0 / 3.0);
    if (eps >= u)
        throw std::domain_error("learning_time_gd: feature already past early phase (eps >= c*lambda^(-1/3))");
    return tau / (lambda * lambda) * (1.0 / eps - 1.0 / u);
}

/// SAM analogue with integrand tau/(lambda^2 v (v - rho_hat)); requires
/// rho < (sqrt(3)/2)*eps so the drift zero sits below the integration range.
inline double learning_time_sam(double lambda, double eps, double c, double tau, double rho) {
    if (rho < 0.0) throw std::invalid_argument("learning_time_sam: rho must be >= 0");
    const double rho_hat = 2.0 * rho / std::sqrt(3.0);
    if (rho_hat < 1e-12) return learning_time_gd(lambda, eps, c, tau);
    if (!(lambda > 0.0) || !(eps > 0.0) || !(c > 0.0) || !(tau > 0.0))
        throw std::invalid_argument("learning_time_sam: parameters must be positive");
    if (rho_hat >= eps)
        throw std::domain_error(
            "learning_time_sam: requires rho < (sqrt(3)/2)*eps; the SAM drift zero 2*rho/sqrt(3) "
            "must lie below the start of the early phase");
    const double u = c * std::pow(lambda, -1.0 / 3.0);
    if (eps >= u)
        throw std::domain_error("learning_time_sam: feature already past early phase (eps >= c*lambda^(-1/3))");
    return tau / (lambda * lambda * rho_hat) *
           (std::log((u - rho_hat) / u) - std::log((eps - rho_hat) / eps));
}

/// Positive times plus their sum-normalization.
struct TimeSequence {
    std::vector<double> times;
    std::vector<double> normalized;

    explicit TimeSequence(std::vector<double> t) : times(std::move(t)) {
        if (times.empty()) throw std::invalid_argument("TimeSequence: need at least one time");
        double sum = 0.0;
        for (std::size_t i = 0; i < times.size(); ++i) {
            if (!(times[i] > 0.0) || !std::isfinite(times[i]))
                throw std::invalid_argument("TimeSequence: time " + std::to_string(i + 1) +
                                            " must be positive and finite");
            sum += times[i];
        }
        normalized.resize(times.size());
        for (std::size_t i = 0; i < times.size(); ++i) normalized[i] = times[i] / sum;
    }
};

inline double entropy(const TimeSequence& ts) {
    double h = 0.0;
    for (double p : ts.normalized) h -= p * std::log(p);
    return h;
}

/// a majorizes b: prefix sums of descending-sorted a dominate those of b.
inline bool majorizes(std::vector<double> a, std::vector<double> b) {
    if (a.size() != b.size()) throw std::invalid_argument("majorizes: length mismatch");
    double sa = 0.0, sb = 0.0;
    for (double x : a) sa += x;
    for (double x : b) sb += x;
    if (std::abs(sa - 1.0) > 1e-9 || std::abs(sb - 1.0) > 1e-9)
        throw std::invalid_argument("majorizes: inputs must sum to 1 within 1e-9");
    std::sort(a.begin(), a.end(), std::greater<>());
    std::sort(b.begin(), b.end(), std::greater<>());
    double pa = 0.0, pb = 0.0;
    for (std::size_t k = 0; k + 1 < a.size(); ++k) {
        pa += a[k];
        pb += b[k];
        if (pa < pb - 1e-12) return false;
    }
    return true;
}

struct SbComparisonReport {
    std::vector<double> t_gd;
    std::vector<double> t_sam;
    double entropy_gd = 0.0;
    double entropy_sam = 0.0;
    bool majorization_holds = false;  // normalized-GD majorizes normalized-SAM
};

/// Early-phase learning-time sequences for a whole spectrum, their
/// entropies, and the majorization check between the normalized sequences.
inline SbComparisonReport sb_comparison(const CovarianceSpec& spec, double eps, double c,
                                        double tau, double rho) {
    const double rho_hat = 2.0 * rho / std::sqrt(3.0);
    if (rho > 0.0 && rho_hat >= eps)
        throw std::domain_error("sb_comparison: requires rho < (sqrt(3)/2)*eps");
    for (int i = 1; i <= spec.dim(); ++i) {
        const double u = c * std::pow(spec.eigenvalues[i - 1], -1.0 / 3.0);
        if (eps >= u)
            throw std::domain_error("sb_comparison: eps must be below c*lambda^(-1/3) for feature " +
                                    std::to_string(i));
    }
    std::vector<double> tg, ts;
    for (double lam : spec.eigenvalues) {
        tg.push_back(learning_time_gd(lam, eps, c, tau));
        ts.push_back(learning_time_sam(lam, eps, c, tau, rho));
    }
    SbComparisonReport rep;
    TimeSequence seq_gd(tg), seq_sam(ts);
    rep.t_gd = std::move(tg);
    rep.t_sam = std::move(ts);
    rep.entropy_gd = entropy(seq_gd);
    rep.entropy_sam = entropy(seq_sam);
    rep.majorization_holds = majorizes(seq_gd.normalized, seq_sam.normalized);
    return rep;
}

// ---------------------------------------------------------------------------
// Merged key-query model: scalar dynamics of s = |w2|^2 under white feature
// covariance E[z z'] = alpha I.

struct MergedOdeParams {
    double gamma = 1.0;  // |E[y_q z]|
    double alpha = 1.0;
    double rho = 0.0;
    double tau = 1.0;
    double s0 = 1e-4;

    void validate() const {
        if (!(gamma > 0.0) || !(alpha > 0.0) || !(tau > 0.0) || !(s0 > 0.0) || rho < 0.0)
            throw std::invalid_argument("MergedOdeParams: need gamma, alpha, tau, s0 > 0 and rho >= 0");
        if (!(gamma - alpha * s0 > 0.0))
            throw std::invalid_argument("MergedOdeParams: requires gamma - alpha*s0 > 0");
    }
};

/// tau*ds/dt = 2s(gamma - alpha*s) + 2*sign(gamma - alpha*s)*rho*alpha*s^(3/2);
/// zero at the equilibrium s = gamma/alpha by that sign convention.
inline double merged_ode_rhs(double s, const MergedOdeParams& p) {
    if (s < 0.0) throw std::invalid_argument("merged_ode_rhs: s must be >= 0");
    const double excess = p.gamma - p.alpha * s;
    const double sign = excess > 0.0 ? 1.0 : (excess < 0.0 ? -1.0 : 0.0);
    return (2.0 * s * excess + 2.0 * sign * p.rho * p.alpha * std::pow(s, 1.5)) / p.tau;
}

/// Logistic solution of the rho = 0 dynamics.
inline double merged_gd_solution(double t, const MergedOdeParams& p) {
    p.validate();
    if (t < 0.0) throw std::invalid_argument("merged_gd_solution: t must be >= 0");
    const double e = std::exp(2.0 * p.gamma * t / p.tau);
    return p.gamma * e / (p.alpha * (e - 1.0) + p.gamma / p.s0);
}

inline double merged_sam_blowup_time(const MergedOdeParams& p) {
    if (p.rho == 0.0) return std::numeric_limits<double>::infinity();
    return p.tau / p.gamma * std::log(1.0 + p.gamma / (p.rho * p.alpha * std::sqrt(p.s0)));
}

/// Solution of the dropped-term early dynamics tau*ds/dt = 2*gamma*s +
/// 2*rho*alpha*s^(3/2); valid until the finite blow-up time.
inline double merged_sam_small_init_solution(double t, const MergedOdeParams& p) {
    p.validate();
    if (t < 0.0) throw std::invalid_argument("merged_sam_small_init_solution: t must be >= 0");
    const double e = std::exp(p.gamma * t / p.tau);
    const double den = p.gamma + p.rho * p.alpha * std::sqrt(p.s0) * (1.0 - e);
    if (den <= 0.0)
        throw std::domain_error("merged_sam_small_init_solution: past blow-up time t_blow=" +
                                std::to_string(merged_sam_blowup_time(p)));
    const double u = p.gamma * std::sqrt(p.s0) * e / den;
    return u * u;
}

/// Residual of the implicit closed-form relation for the full merged SAM
/// dynamics at (t, s(t)); zero along exact solutions.
inline double merged_implicit_solution_check(double s_t, double t, const MergedOdeParams& p) {
    p.validate();
    if (!(s_t > 0.0)) throw std::invalid_argument("merged_implicit_solution_check: s_t must be > 0");
    const double delta = std::sqrt(p.rho * p.rho + 4.0 * p.gamma / p.alpha);
    const double r_plus = (p.rho + delta) / 2.0;
    const double r_minus = (p.rho - delta) / 2.0;
    const double u = std::sqrt(s_t);
    const double u0 = std::sqrt(p.s0);

    const double num_m = u - r_minus, den_m = u0 - r_minus;
    const double num_p = u - r_plus, den_p = u0 - r_plus;
    if (num_m / den_m <= 0.0 || num_p / den_p <= 0.0)
        throw std::domain_error("merged_implicit_solution_check: log argument not positive (s_t=" +
                                std::to_string(s_t) + ")");
    return 1.0 / (2.0 * p.gamma) * std::log(s_t / p.s0) +
           1.0 / (p.alpha * delta) *
               (std::log(num_m / den_m) / r_minus - std::log(num_p / den_p) / r_plus) -
           t / p.tau;
}

struct EscapeTimes {
    double t_gd = 0.0;
    double t_sam = 0.0;
    double delta_t = 0.0;
};

/// Times for the weight norm s to move from s0 to s_star under the
/// dropped-term early dynamics, with rate constant sigma_f = |Sigma|_F.
inline EscapeTimes merged_escape_times(double s0, double s_star, double sigma_f, double alpha,
                                       double rho, double tau) {
    if (!(s0 > 0.0) || !(s_star > s0))
        throw std::invalid_argument("merged_escape_times: need 0 < s0 < s_star");
    if (!(sigma_f > 0.0) || !(alpha > 0.0) || !(tau > 0.0) || rho < 0.0)
        throw std::invalid_argument("merged_escape_times: invalid parameters");
    const double rs0 = std::sqrt(s0), rs1 = std::sqrt(s_star);
    EscapeTimes out;
    out.t_gd = tau / sigma_f * std::log(rs1 / rs0);
    out.t_sam = tau / sigma_f *
                std::log(rs1 * (sigma_f + rho * alpha * rs0) / (rs0 * (sigma_f + rho * alpha * rs1)));
    out.delta_t = out.t_gd - out.t_sam;
    return out;
}

}  // namespace sblab
