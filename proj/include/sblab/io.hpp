#pragma once

#include <charconv>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "sblab/attention.hpp"
#include "sblab/optimizers.hpp"
#include "sblab/upsampler.hpp"

namespace sblab {

using ordered_json = nlohmann::ordered_json;

/// Shortest round-trip decimal form; locale-free and stable across runs.
inline std::string fmt_double(double v) {
    char buf[32];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    (void)ec;
    return std::string(buf, ptr);
}

inline void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open for writing: " + path);
    out << content;
    if (!out) throw std::runtime_error("write failed: " + path);
}

inline std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open for reading: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// ---------------------------------------------------------------------------
// Model parameters: {"heads": [{"v": f, "k": [...], "q": [...]}]}

inline ordered_json model_to_json(const ModelParams& p) {
    ordered_json j;
    j["heads"] = ordered_json::array();
    for (const auto& h : p.heads) {
        ordered_json jh;
        jh["v"] = h.v;
        jh["k"] = h.k;
        jh["q"] = h.q;
        j["heads"].push_back(std::move(jh));
    }
    return j;
}

inline ModelParams model_from_json(const ordered_json& j) {
    if (!j.contains("heads") || !j["heads"].is_array())
        throw std::invalid_argument("model_from_json: missing heads array");
    ModelParams p;
    for (const auto& jh : j["heads"]) {
        HeadParams h;
        h.v = jh.at("v").get<double>();
        h.k = jh.at("k").get<std::vector<double>>();
        h.q = jh.at("q").get<std::vector<double>>();
        if (h.k.size() != h.q.size())
            throw std::invalid_argument("model_from_json: key/query dimension mismatch");
        p.heads.push_back(std::move(h));
    }
    for (const auto& h : p.heads)
        if (h.k.size() != p.heads.front().k.size())
            throw std::invalid_argument("model_from_json: heads disagree on dimension");
    return p;
}

// ---------------------------------------------------------------------------
// Training trace CSV: header step,loss,m_1..m_d.

inline std::string trace_to_csv(const TrainingTrace& trace) {
    std::ostringstream out;
    out << "step,loss";
    for (int i = 1; i <= trace.dim; ++i) out << ",m_" << i;
    out << "\n";
    // progress records share the loss cadence
    for (std::size_t r = 0; r < trace.step_losses.size(); ++r) {
        out << trace.step_losses[r].first << ',' << fmt_double(trace.step_losses[r].second);
        for (double m : trace.feature_progress_series[r].second) out << ',' << fmt_double(m);
        out << "\n";
    }
    return out.str();
}

/// Reads a trace CSV back. Only losses and progress are recoverable; eta
/// must be supplied by the caller for step-to-time conversion.
inline TrainingTrace trace_from_csv(const std::string& text, double eta) {
    TrainingTrace trace;
    trace.eta = eta;
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line)) throw std::invalid_argument("trace_from_csv: empty file");
    int cols = 1;
    for (char c : line) cols += c == ',' ? 1 : 0;
    if (cols < 2) throw std::invalid_argument("trace_from_csv: expected step,loss,m_1..m_d header");
    trace.dim = cols - 2;
    long lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::istringstream row(line);
        std::string cell;
        std::vector<double> vals;
        while (std::getline(row, cell, ',')) vals.push_back(std::stod(cell));
        if (static_cast<int>(vals.size()) != cols)
            throw std::invalid_argument("trace_from_csv: line " + std::to_string(lineno) +
                                        " has " + std::to_string(vals.size()) + " fields");
        const long step = static_cast<long>(vals[0]);
        trace.step_losses.emplace_back(step, vals[1]);
        trace.feature_progress_series.emplace_back(
            step, std::vector<double>(vals.begin() + 2, vals.end()));
    }
    if (trace.step_losses.empty()) throw std::invalid_argument("trace_from_csv: no data rows");
    return trace;
}

// ---------------------------------------------------------------------------
// Loss-trajectory JSONL: one {"id": ..., "losses": [...]} object per line.

inline std::string trajectories_to_jsonl(const std::vector<LossTrajectory>& trajs) {
    std::ostringstream out;
    for (const auto& t : trajs) {
        ordered_json j;
        j["id"] = t.example_id;
        j["losses"] = t.losses;
        out << j.dump() << "\n";
    }
    return out.str();
}

inline std::vector<LossTrajectory> trajectories_from_jsonl(const std::string& text) {
    std::vector<LossTrajectory> out;
    std::set<std::string> seen;
    std::istringstream in(text);
    std::string line;
    long lineno = 0;
    std::size_t len = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        ordered_json j;
        try {
            j = ordered_json::parse(line);
        } catch (const std::exception& e) {
            throw std::invalid_argument("trajectories: line " + std::to_string(lineno) +
                                        ": malformed JSON (" + e.what() + ")");
        }
        if (!j.contains("id") || !j["id"].is_string() || !j.contains("losses") ||
            !j["losses"].is_array())
            throw std::invalid_argument("trajectories: line " + std::to_string(lineno) +
                                        ": expected {\"id\": string, \"losses\": [...]}");
        LossTrajectory t;
        t.example_id = j["id"].get<std::string>();
        if (!seen.insert(t.example_id).second)
            throw std::invalid_argument("trajectories: line " + std::to_string(lineno) +
                                        ": duplicate id " + t.example_id);
        for (const auto& v : j["losses"]) {
            if (!v.is_number())
                throw std::invalid_argument("trajectories: line " + std::to_string(lineno) +
                                            ": non-numeric loss");
            const double x = v.get<double>();
            if (!std::isfinite(x))
                throw std::invalid_argument("trajectories: line " + std::to_string(lineno) +
                                            ": non-finite loss");
            t.losses.push_back(x);
        }
        if (t.losses.empty())
            throw std::invalid_argument("trajectories: line " + std::to_string(lineno) +
                                        ": empty loss list");
        if (out.empty()) {
            len = t.losses.size();
        } else if (t.losses.size() != len) {
            throw std::invalid_argument("trajectories: line " + std::to_string(lineno) +
                                        ": length " + std::to_string(t.losses.size()) +
                                        " differs from " + std::to_string(len));
        }
        out.push_back(std::move(t));
    }
    if (out.empty()) throw std::invalid_argument("trajectories: no trajectories");
    return out;
}

inline std::vector<LossTrajectory> ingest_trajectories(const std::string& path) {
    return trajectories_from_jsonl(read_text_file(path));
}

// ---------------------------------------------------------------------------
// Upsample plan JSON.

inline ordered_json plan_to_json(const UpsamplePlan& plan) {
    ordered_json j;
    j["factor"] = plan.factor;
    j["mode"] = plan.mode == ApplyMode::duplicate ? "duplicate" : "weight";
    j["assignments"] = ordered_json::array();
    for (const auto& item : plan.items) {
        ordered_json ji;
        ji["id"] = item.id;
        ji["cluster"] = item.hard ? "hard" : "easy";
        ji["multiplicity"] = item.multiplicity;
        j["assignments"].push_back(std::move(ji));
    }
    return j;
}

inline UpsamplePlan plan_from_json(const ordered_json& j) {
    UpsamplePlan plan;
    plan.factor = j.at("factor").get<double>();
    const std::string mode = j.at("mode").get<std::string>();
    if (mode == "duplicate") plan.mode = ApplyMode::duplicate;
    else if (mode == "weight") plan.mode = ApplyMode::weight;
    else throw std::invalid_argument("plan_from_json: unknown mode " + mode);
    for (const auto& ji : j.at("assignments")) {
        UpsamplePlanItem item;
        item.id = ji.at("id").get<std::string>();
        const std::string cluster = ji.at("cluster").get<std::string>();
        if (cluster != "hard" && cluster != "easy")
            throw std::invalid_argument("plan_from_json: unknown cluster " + cluster);
        item.hard = cluster == "hard";
        item.multiplicity = ji.at("multiplicity").get<int>();
        if (item.multiplicity < 1)
            throw std::invalid_argument("plan_from_json: multiplicity must be >= 1");
        (item.hard ? plan.n_hard : plan.n_easy) += 1;
        plan.items.push_back(std::move(item));
    }
    return plan;
}

inline void export_plan(const UpsamplePlan& plan, const std::string& path) {
    write_text_file(path, plan_to_json(plan).dump(2) + "\n");
}

inline UpsamplePlan import_plan(const std::string& path) {
    return plan_from_json(ordered_json::parse(read_text_file(path)));
}

}  // namespace sblab
