#pragma once

// Shared test oracles: finite differences, adaptive quadrature, and small
// statistics utilities. These stay independent of the implementation paths
// they are used to check.

#include <cmath>
#include <functional>
#include <numeric>
#include <stdexcept>
#include <vector>

namespace testing_oracles {

/// Central finite-difference gradient of a scalar function.
inline std::vector<double> finite_diff_gradient(
    const std::function<double(const std::vector<double>&)>& f, std::vector<double> x,
    double h = 1e-5) {
    std::vector<double> g(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double orig = x[i];
        x[i] = orig + h;
        const double fp = f(x);
        x[i] = orig - h;
        const double fm = f(x);
        x[i] = orig;
        g[i] = (fp - fm) / (2.0 * h);
    }
    return g;
}

/// Central finite-difference Jacobian of a vector function.
inline std::vector<std::vector<double>> finite_diff_jacobian(
    const std::function<std::vector<double>(const std::vector<double>&)>& f,
    std::vector<double> x, double h = 1e-5) {
    std::vector<std::vector<double>> cols;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double orig = x[i];
        x[i] = orig + h;
        auto fp = f(x);
        x[i] = orig - h;
        auto fm = f(x);
        x[i] = orig;
        for (std::size_t r = 0; r < fp.size(); ++r) fp[r] = (fp[r] - fm[r]) / (2.0 * h);
        cols.push_back(std::move(fp));
    }
    // columns indexed by input coordinate; transpose to rows = output coord
    std::vector<std::vector<double>> jac(cols.front().size(),
                                         std::vector<double>(x.size(), 0.0));
    for (std::size_t c = 0; c < cols.size(); ++c)
        for (std::size_t r = 0; r < cols[c].size(); ++r) jac[r][c] = cols[c][r];
    return jac;
}

namespace detail {
inline double simpson(double a, double fa, double b, double fb, double fm) {
    return (b - a) / 6.0 * (fa + 4.0 * fm + fb);
}

inline double adaptive_simpson_rec(const std::function<double(double)>& f, double a, double fa,
                                   double b, double fb, double m, double fm, double whole,
                                   double eps, int depth) {
    const double lm = 0.5 * (a + m), rm = 0.5 * (m + b);
    const double flm = f(lm), frm = f(rm);
    const double left = simpson(a, fa, m, fm, flm);
    const double right = simpson(m, fm, b, fb, frm);
    if (depth <= 0 || std::abs(left + right - whole) <= 15.0 * eps)
        return left + right + (left + right - whole) / 15.0;
    return adaptive_simpson_rec(f, a, fa, m, fm, lm, flm, left, eps / 2.0, depth - 1) +
           adaptive_simpson_rec(f, m, fm, b, fb, rm, frm, right, eps / 2.0, depth - 1);
}
}  // namespace detail

/// Adaptive Simpson quadrature with absolute tolerance eps.
inline double adaptive_simpson(const std::function<double(double)>& f, double a, double b,
                               double eps = 1e-12, int max_depth = 50) {
    const double m = 0.5 * (a + b);
    const double fa = f(a), fb = f(b), fm = f(m);
    return detail::adaptive_simpson_rec(f, a, fa, b, fb, m, fm,
                                        detail::simpson(a, fa, b, fb, fm), eps, max_depth);
}

inline double mean(const std::vector<double>& x) {
    return std::accumulate(x.begin(), x.end(), 0.0) / x.size();
}

inline double sample_variance(const std::vector<double>& x) {
    const double mu = mean(x);
    double s = 0.0;
    for (double v : x) s += (v - mu) * (v - mu);
    return s / (x.size() - 1);
}

/// Least-squares slope of y against x.
inline double fit_slope(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size() || x.size() < 2)
        throw std::invalid_argument("fit_slope: need matched series of length >= 2");
    const double mx = mean(x), my = mean(y);
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        num += (x[i] - mx) * (y[i] - my);
        den += (x[i] - mx) * (x[i] - mx);
    }
    return num / den;
}

inline double rel_err(double got, double want) {
    return std::abs(got - want) / std::max(1e-300, std::abs(want));
}

inline double max_abs(const std::vector<double>& x) {
    double m = 0.0;
    for (double v : x) m = std::max(m, std::abs(v));
    return m;
}

}  // namespace testing_oracles
