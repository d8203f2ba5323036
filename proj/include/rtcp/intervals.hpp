#pragma once

// Inverts a scorer at an estimated score quantile into a prediction
// interval for a target-population unit, and combines per-arm intervals into
// individual-treatment-effect intervals.

#include <map>
#include <vector>

#include "rtcp/common.hpp"
#include "rtcp/data.hpp"
#include "rtcp/quantile_estimators.hpp"
#include "rtcp/scores.hpp"

namespace rtcp {

struct PredictionInterval {
    double lower = -kInf;
    double upper = kInf;
    int a = 0;
    double alpha = 0.1;
    // The inversion set {y : R(y, v) <= r} can be empty (abs score with a
    // negative r); represented explicitly, never clipped to a point.
    bool empty = false;

    bool contains(double y) const { return !empty && lower <= y && y <= upper; }
    double width() const { return empty ? 0.0 : upper - lower; }
    bool finite() const { return !empty && std::isfinite(lower) && std::isfinite(upper); }
};

inline PredictionInterval invert(const ConformityScorer& scorer,
                                 std::span<const double> v,
                                 const QuantileEstimate& rhat) {
    if (scorer.a != rhat.a) throw ConfigError("invert: scorer/estimate treatment mismatch");
    PredictionInterval out;
    out.a = rhat.a;
    out.alpha = rhat.alpha;
    const double r = rhat.value;
    if (r == kInf) return out;  // whole line

    const auto [lo, hi] = scorer.band(v);
    if (scorer.variant == ConformityScorer::Variant::abs_residual) {
        if (r < 0.0) {  // includes the -inf sentinel
            out.empty = true;
            return out;
        }
        out.lower = lo - r;
        out.upper = lo + r;
        return out;
    }
    // cqr: sublevel set is [lo - r, hi + r]; negative r shrinks the band and
    // may empty it.
    out.lower = lo - r;
    out.upper = hi + r;
    if (!(out.lower <= out.upper)) {
        out.empty = true;
        out.lower = -kInf;
        out.upper = kInf;
    }
    return out;
}

// Difference interval (c1.lower - c0.upper, c1.upper - c0.lower); both arms
// must be built at the same per-arm miscoverage.
inline PredictionInterval ite_bonferroni(const PredictionInterval& c1,
                                         const PredictionInterval& c0) {
    if (c1.alpha != c0.alpha)
        throw ConfigError("ite_bonferroni: mismatched alphas");
    PredictionInterval out;
    out.a = c1.a;
    out.alpha = c1.alpha + c0.alpha;
    if (c1.empty || c0.empty) {
        out.empty = true;
        return out;
    }
    out.lower = c1.lower - c0.upper;
    out.upper = c1.upper - c0.lower;
    return out;
}

struct PredictionRow {
    std::size_t row_id = 0;
    int a = 0;
    PredictionInterval interval;
    RhatMethod method = RhatMethod::dml;
};

// Elementwise inversion for every requested treatment level over the given
// target rows. One (scorer, rhat) pair per level.
inline std::vector<PredictionRow> predict_batch(
    const std::map<int, const ConformityScorer*>& scorers,
    const std::map<int, const QuantileEstimate*>& rhats, const ObservationTable& t,
    std::span<const std::size_t> rows) {
    std::vector<PredictionRow> out;
    out.reserve(rows.size() * scorers.size());
    for (const auto& [a, sc] : scorers) {
        auto it = rhats.find(a);
        if (it == rhats.end())
            throw ConfigError("predict_batch: no quantile estimate for treatment " +
                              std::to_string(a));
        for (std::size_t i : rows) {
            PredictionRow row;
            row.row_id = i;
            row.a = a;
            row.method = it->second->method;
            row.interval = invert(*sc, t.v_row(i), *it->second);
            out.push_back(row);
        }
    }
    return out;
}

}  // namespace rtcp
