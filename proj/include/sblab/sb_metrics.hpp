#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "sblab/optimizers.hpp"
#include "sblab/theory_ode.hpp"

namespace sblab {

/// Per-feature completion times extracted from one training trace.
/// Features whose threshold was never crossed stay unset.
struct LearningTimes {
    std::vector<std::optional<long>> step;
    std::vector<std::optional<double>> time;  // step * eta
    std::string method;

    int n_learned() const {
        int n = 0;
        for (const auto& s : step) n += s.has_value() ? 1 : 0;
        return n;
    }
};

/// Feature i counts as learned at the first recorded step where its
/// progress m_i reaches theta times the stationary target.
inline LearningTimes detect_learning_times(const TrainingTrace& trace, const CovarianceSpec& spec,
                                           int n_ctx, double theta) {
    if (trace.feature_progress_series.empty())
        throw std::invalid_argument("detect_learning_times: trace carries no progress series");
    if (!(theta > 0.0) || !(theta < 1.0))
        throw std::invalid_argument("detect_learning_times: theta must lie in (0,1)");
    const int d = spec.dim();
    LearningTimes out;
    out.method = "feature_progress";
    out.step.assign(d, std::nullopt);
    out.time.assign(d, std::nullopt);
    std::vector<double> threshold(d);
    for (int i = 0; i < d; ++i) threshold[i] = theta * feature_progress_target(spec, n_ctx, i + 1);
    for (const auto& [step, m] : trace.feature_progress_series) {
        for (int i = 0; i < d; ++i) {
            if (!out.step[i] && m[i] >= threshold[i]) {
                out.step[i] = step;
                out.time[i] = step * trace.eta;
            }
        }
    }
    return out;
}

/// Changepoints of a staircase-shaped loss curve: positions where the
/// smoothed curve falls, within one window, by at least drop_ratio of the
/// remaining gap to the final level. Returns indices into `losses`.
inline std::vector<std::size_t> detect_loss_drops(const std::vector<double>& losses,
                                                  int smoothing_window, double drop_ratio,
                                                  double min_drop_fraction = 0.01) {
    if (smoothing_window < 1) throw std::invalid_argument("detect_loss_drops: window must be >= 1");
    if (!(drop_ratio > 0.0) || drop_ratio > 1.0)
        throw std::invalid_argument("detect_loss_drops: drop_ratio must lie in (0,1]");
    const std::size_t n = losses.size();
    if (n < 2) return {};

    std::vector<double> prefix(n + 1, 0.0);
    for (std::size_t i = 0; i < n; ++i) prefix[i + 1] = prefix[i] + losses[i];
    const long half = smoothing_window / 2;
    std::vector<double> smooth(n);
    for (std::size_t i = 0; i < n; ++i) {
        const long lo = std::max<long>(0, static_cast<long>(i) - half);
        const long hi = std::min<long>(n - 1, static_cast<long>(i) + half);
        smooth[i] = (prefix[hi + 1] - prefix[lo]) / (hi - lo + 1);
    }

    const double final_level = smooth.back();
    const double total = smooth.front() - final_level;
    if (!(total > 0.0)) return {};

    auto fall = [&](std::size_t i) {
        const std::size_t j = std::min(n - 1, i + static_cast<std::size_t>(smoothing_window));
        return smooth[i] - smooth[j];
    };
    auto is_candidate = [&](std::size_t i) {
        const double f = fall(i);
        const double remaining = smooth[i] - final_level;
        return f >= drop_ratio * std::max(remaining, 0.0) && f >= min_drop_fraction * total;
    };

    std::vector<std::size_t> drops;
    std::size_t i = 0;
    while (i < n) {
        if (!is_candidate(i)) {
            ++i;
            continue;
        }
        std::size_t best = i;
        double best_fall = fall(i);
        std::size_t j = i + 1;
        while (j < n && is_candidate(j)) {
            if (fall(j) > best_fall) {
                best_fall = fall(j);
                best = j;
            }
            ++j;
        }
        drops.push_back(best);
        i = j;
    }
    return drops;
}

struct EntropyReport {
    std::vector<double> times;       // learned features only, in feature order
    std::vector<double> normalized;
    double entropy_value = 0.0;
    int n_learned = 0;
    std::string method;
};

inline EntropyReport entropy_report(const LearningTimes& times) {
    EntropyReport rep;
    rep.method = times.method;
    for (const auto& t : times.time)
        if (t) rep.times.push_back(*t);
    rep.n_learned = static_cast<int>(rep.times.size());
    if (rep.n_learned == 0)
        throw std::invalid_argument("entropy_report: no features learned; cannot normalize");
    // A feature crossing at the very first record gives time 0; entropy is
    // defined over strictly positive times.
    for (auto& t : rep.times) t = std::max(t, 1e-12);
    TimeSequence seq(rep.times);
    rep.normalized = seq.normalized;
    rep.entropy_value = entropy(seq);
    return rep;
}

struct DropAlignment {
    long step = 0;       // step of the detected drop
    int feature = 0;     // 1-based; i-th drop is matched to feature i
    int head = 0;        // 1-based index of the head carrying the feature
    double cos_k = 0.0;  // |cos| between that head's key and e_feature
    double cos_q = 0.0;
};

/// Resamples a recorded series at log-spaced steps. Saddle-to-saddle
/// dynamics spaces its drops multiplicatively, so changepoint windows are
/// best counted in log time. Returns indices into the original records.
inline std::vector<std::size_t> log_resample_indices(const std::vector<std::pair<long, double>>& records,
                                                     int points) {
    std::vector<std::size_t> idx;
    if (records.size() < 2 || points < 2) {
        for (std::size_t i = 0; i < records.size(); ++i) idx.push_back(i);
        return idx;
    }
    const double s0 = std::max<double>(1.0, records[1].first);
    const double s1 = std::max<double>(s0 + 1.0, records.back().first);
    idx.push_back(0);
    std::size_t cursor = 0;
    for (int k = 0; k < points; ++k) {
        const double target = s0 * std::pow(s1 / s0, static_cast<double>(k) / (points - 1));
        while (cursor + 1 < records.size() && records[cursor + 1].first <= target) ++cursor;
        if (idx.back() != cursor) idx.push_back(cursor);
    }
    return idx;
}

/// For each detected drop (indices into trace.step_losses), identify the
/// head that newly carries the matching feature and its axis alignment.
/// Alignment is read from the first snapshot after the fall has completed:
/// at least settle_steps, or settle_fraction of the drop step, past onset.
inline std::vector<DropAlignment> drop_alignments(const TrainingTrace& trace,
                                                  const std::vector<std::size_t>& drop_indices,
                                                  long settle_steps = 0,
                                                  double settle_fraction = 0.0) {
    std::vector<DropAlignment> out;
    for (std::size_t di = 0; di < drop_indices.size(); ++di) {
        DropAlignment al;
        al.feature = static_cast<int>(di) + 1;
        al.step = trace.step_losses[drop_indices[di]].first;
        const long settle =
            std::max(settle_steps, static_cast<long>(settle_fraction * static_cast<double>(al.step)));
        const ModelParams* snap = nullptr;
        for (const auto& [s, p] : trace.snapshots) {
            if (s >= al.step + settle) {
                snap = &p;
                break;
            }
        }
        if (!snap) snap = &trace.snapshots.back().second;
        const int fi = al.feature - 1;
        if (fi >= snap->dim()) break;
        double best = -1.0;
        for (int h = 0; h < snap->n_heads(); ++h) {
            const auto& head = snap->heads[h];
            const double contrib = std::abs(head.v * head.k[fi] * head.q[fi]);
            if (contrib > best) {
                best = contrib;
                al.head = h + 1;
                const double nk = norm2(head.k), nq = norm2(head.q);
                al.cos_k = nk > 0.0 ? std::abs(head.k[fi]) / nk : 0.0;
                al.cos_q = nq > 0.0 ? std::abs(head.q[fi]) / nq : 0.0;
            }
        }
        out.push_back(al);
    }
    return out;
}

}  // namespace sblab
