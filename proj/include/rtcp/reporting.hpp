#pragma once

// CSV surfaces: prediction intervals, truth files, coverage summaries, and
// the long-format Monte Carlo results table.

#include <iostream>
#include <map>

#include "rtcp/intervals.hpp"
#include "rtcp/simulation.hpp"

namespace rtcp {

namespace detail_rep {

inline std::string fmt17(double x) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", x);
    return buf;
}

inline std::string fmt10(double x) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.10g", x);
    return buf;
}

}  // namespace detail_rep

// row_id,a,lower,upper,method,alpha; empty intervals carry blank bounds,
// unbounded ones the strings -inf / inf.
inline void write_predictions_csv(std::ostream& out,
                                  std::span<const PredictionRow> rows) {
    out << "row_id,a,lower,upper,method,alpha\n";
    for (const auto& r : rows) {
        out << r.row_id << ',' << r.a << ',';
        if (!r.interval.empty)
            out << detail_rep::fmt17(r.interval.lower) << ','
                << detail_rep::fmt17(r.interval.upper);
        else
            out << ',';
        out << ',' << method_name(r.method) << ','
            << detail_rep::fmt17(r.interval.alpha) << '\n';
    }
}

struct LoadedPrediction {
    std::size_t row_id = 0;
    int a = 0;
    std::string method;
    PredictionInterval interval;
};

inline std::vector<LoadedPrediction> read_predictions_csv(std::istream& in,
                                                          const std::string& origin) {
    std::string line;
    if (!std::getline(in, line)) throw DataError(origin + ": empty predictions file");
    const auto header = detail::split_csv_line(line);
    std::map<std::string, std::size_t> col;
    for (std::size_t j = 0; j < header.size(); ++j) col[detail::trim_ws(header[j])] = j;
    for (const char* need : {"row_id", "a", "lower", "upper", "method", "alpha"})
        if (!col.count(need))
            throw DataError(origin + ": missing column '" + std::string(need) + "'");

    std::vector<LoadedPrediction> out;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (detail::trim_ws(line).empty()) continue;
        const auto cells = detail::split_csv_line(line);
        if (cells.size() != header.size())
            throw DataError(origin + ":" + std::to_string(lineno) + ": bad field count");
        auto cell = [&](const char* name) { return detail::trim_ws(cells[col[name]]); };
        LoadedPrediction p;
        p.row_id = static_cast<std::size_t>(std::stoull(cell("row_id")));
        p.a = std::stoi(cell("a"));
        p.method = cell("method");
        p.interval.a = p.a;
        p.interval.alpha = std::strtod(cell("alpha").c_str(), nullptr);
        const std::string lo = cell("lower"), hi = cell("upper");
        if (lo.empty() && hi.empty()) {
            p.interval.empty = true;
        } else {
            p.interval.lower = std::strtod(lo.c_str(), nullptr);
            p.interval.upper = std::strtod(hi.c_str(), nullptr);
        }
        out.push_back(p);
    }
    return out;
}

// row_id,a,y_true
struct TruthRow {
    std::size_t row_id = 0;
    int a = 0;
    double y = 0.0;
};

inline std::vector<TruthRow> read_truth_csv(std::istream& in,
                                            const std::string& origin) {
    std::string line;
    if (!std::getline(in, line)) throw DataError(origin + ": empty truth file");
    const auto header = detail::split_csv_line(line);
    std::map<std::string, std::size_t> col;
    for (std::size_t j = 0; j < header.size(); ++j) col[detail::trim_ws(header[j])] = j;
    for (const char* need : {"row_id", "a", "y_true"})
        if (!col.count(need))
            throw DataError(origin + ": missing column '" + std::string(need) + "'");
    std::vector<TruthRow> out;
    while (std::getline(in, line)) {
        if (detail::trim_ws(line).empty()) continue;
        const auto cells = detail::split_csv_line(line);
        TruthRow r;
        r.row_id = static_cast<std::size_t>(
            std::stoull(detail::trim_ws(cells[col["row_id"]])));
        r.a = std::stoi(detail::trim_ws(cells[col["a"]]));
        r.y = std::strtod(detail::trim_ws(cells[col["y_true"]]).c_str(), nullptr);
        out.push_back(r);
    }
    return out;
}

struct EvalRow {
    std::string method;
    int a = -1;  // -1 pooled
    double coverage = 0.0;
    double mean_length = 0.0;
    std::size_t n = 0;
    std::size_t n_infinite = 0;
    std::size_t n_empty = 0;
};

// Coverage of predictions against matched (row_id, a) truths. Infinite
// intervals cover by construction and are excluded from the length average;
// empty intervals never cover.
inline std::vector<EvalRow> evaluate_coverage(std::span<const LoadedPrediction> preds,
                                              std::span<const TruthRow> truths) {
    std::map<std::pair<std::size_t, int>, double> truth_map;
    for (const auto& tr : truths) truth_map[{tr.row_id, tr.a}] = tr.y;

    struct Agg {
        std::size_t covered = 0, n = 0, inf = 0, empty = 0, finite = 0;
        double len = 0.0;
    };
    std::map<std::pair<std::string, int>, Agg> cells;
    for (const auto& p : preds) {
        const auto it = truth_map.find({p.row_id, p.a});
        if (it == truth_map.end())
            throw DataError("no truth row for row_id " + std::to_string(p.row_id) +
                            ", a " + std::to_string(p.a));
        for (int a_key : {p.a, -1}) {
            auto& c = cells[{p.method, a_key}];
            c.n++;
            c.covered += p.interval.contains(it->second) ? 1 : 0;
            if (p.interval.empty)
                c.empty++;
            else if (p.interval.finite()) {
                c.finite++;
                c.len += p.interval.width();
            } else {
                c.inf++;
            }
        }
    }
    std::vector<EvalRow> out;
    for (const auto& [key, c] : cells) {
        EvalRow r;
        r.method = key.first;
        r.a = key.second;
        r.n = c.n;
        r.coverage = c.n ? static_cast<double>(c.covered) / static_cast<double>(c.n) : 0.0;
        r.mean_length = c.finite ? c.len / static_cast<double>(c.finite) : 0.0;
        r.n_infinite = c.inf;
        r.n_empty = c.empty;
        out.push_back(r);
    }
    return out;
}

inline void write_eval_csv(std::ostream& out, std::span<const EvalRow> rows,
                           double alpha) {
    out << "method,a,coverage,mean_length,n,n_infinite,n_empty,nominal\n";
    for (const auto& r : rows) {
        out << r.method << ',';
        if (r.a < 0)
            out << "pooled";
        else
            out << r.a;
        out << ',' << detail_rep::fmt10(r.coverage) << ','
            << detail_rep::fmt10(r.mean_length) << ',' << r.n << ',' << r.n_infinite
            << ',' << r.n_empty << ',' << detail_rep::fmt10(1.0 - alpha) << '\n';
    }
}

// Long-format results table mirroring the experiment grid.
inline void write_results_csv(std::ostream& out, const McResult& res) {
    out << "n,k_u,k_v,p_v,p_u,source_rate,alpha,estimand,method,score,a,"
           "coverage,coverage_se,avg_length,reps,failures,infinite_intervals,"
           "empty_intervals\n";
    for (const auto& r : res.rows) {
        out << r.n << ',' << r.k_u << ',' << r.k_v << ',' << r.p_v << ',' << r.p_u
            << ',' << detail_rep::fmt10(r.source_rate) << ','
            << detail_rep::fmt10(r.alpha) << ',' << r.estimand << ',' << r.method << ','
            << r.score << ',';
        if (r.a < 0)
            out << "pooled";
        else
            out << r.a;
        out << ',' << detail_rep::fmt10(r.coverage) << ','
            << detail_rep::fmt10(r.coverage_se) << ','
            << detail_rep::fmt10(r.avg_length) << ',' << r.reps << ',' << r.failures
            << ',' << r.infinite_intervals << ',' << r.empty_intervals << '\n';
    }
}

}  // namespace rtcp
