#pragma once

// Conformity scorers R_a(y, V): absolute residual around the two-stage mean,
// and the CQR score built from weighted conditional quantile fits. The CQR
// score is negative strictly inside the fitted band, so downstream quantile
// estimates may legitimately be negative.

#include <utility>
#include <vector>

#include "rtcp/common.hpp"
#include "rtcp/data.hpp"
#include "rtcp/learners.hpp"
#include "rtcp/nuisance.hpp"

namespace rtcp {

enum class ScoreType { abs_residual, cqr };

inline const char* score_name(ScoreType s) {
    return s == ScoreType::abs_residual ? "abs" : "cqr";
}

class ConformityScorer {
public:
    enum class Variant { abs_residual, cqr };

    Variant variant = Variant::abs_residual;
    int a = 0;
    double cqr_alpha = 0.1;  // target miscoverage; inner levels are alpha/2, 1-alpha/2
    LearnerModel eta;        // abs variant
    LearnerModel q_lo, q_hi;  // cqr variant

    // Lower/upper reference curves at v. For abs both equal eta(v); for cqr
    // the two quantile predictions are sorted pointwise so the band is never
    // inverted.
    std::pair<double, double> band(std::span<const double> v) const {
        if (variant == Variant::abs_residual) {
            const double e = eta->predict_one(v);
            return {e, e};
        }
        double lo = q_lo->predict_one(v);
        double hi = q_hi->predict_one(v);
        if (lo > hi) std::swap(lo, hi);
        return {lo, hi};
    }

    double score(double y, std::span<const double> v) const {
        const auto [lo, hi] = band(v);
        if (variant == Variant::abs_residual) return std::abs(y - lo);
        return std::max(lo - y, y - hi);
    }

    double operator()(double y, std::span<const double> v) const { return score(y, v); }
};

inline ConformityScorer build_abs_scorer(const MeanPredictors& mean, int a) {
    ConformityScorer s;
    s.variant = ConformityScorer::Variant::abs_residual;
    s.a = a;
    s.eta = mean.eta;
    return s;
}

// Fits Q_{a,alpha/2}(V) and Q_{a,1-alpha/2}(V) by weighted pinball regression
// over the {A=a, S=1} rows, weighting by w_a(O).
inline ConformityScorer build_cqr_scorer(const ObservationTable& t,
                                         std::span<const std::size_t> rows, int a,
                                         double alpha, const Learner& g_model,
                                         const Learner& kappa_model,
                                         const LearnerSpec& spec) {
    if (!(alpha > 0.0 && alpha < 1.0)) throw NumericError("alpha must lie in (0,1)");
    std::vector<std::size_t> treated;
    for (std::size_t i : rows)
        if (t.is_source(i) && t.a_value(i) == a) treated.push_back(i);
    if (treated.empty()) throw DataError("build_cqr_scorer: no source rows with A=a");

    SampleWeights w;
    w.w.resize(treated.size());
    std::vector<double> y(treated.size());
    for (std::size_t k = 0; k < treated.size(); ++k) {
        w.w[k] = compute_weight(t, treated[k], a, g_model, kappa_model);
        y[k] = t.y_value(treated[k]);
    }
    w.validate();  // degenerate all-zero weights surface here

    Matrix v = build_v(t, treated);
    ConformityScorer s;
    s.variant = ConformityScorer::Variant::cqr;
    s.a = a;
    s.cqr_alpha = alpha;
    s.q_lo = fit_weighted_quantile(v, y, w, alpha / 2.0, spec);
    s.q_hi = fit_weighted_quantile(v, y, w, 1.0 - alpha / 2.0, spec);
    return s;
}

// Unweighted variant used by the comparator pipeline that ignores runtime
// confounding.
inline ConformityScorer build_cqr_scorer_unweighted(const ObservationTable& t,
                                                    std::span<const std::size_t> rows,
                                                    int a, double alpha,
                                                    const LearnerSpec& spec) {
    std::vector<std::size_t> treated;
    for (std::size_t i : rows)
        if (t.is_source(i) && t.a_value(i) == a) treated.push_back(i);
    if (treated.empty())
        throw DataError("build_cqr_scorer_unweighted: no source rows with A=a");
    std::vector<double> y(treated.size());
    for (std::size_t k = 0; k < treated.size(); ++k) y[k] = t.y_value(treated[k]);
    Matrix v = build_v(t, treated);
    auto w = SampleWeights::uniform(treated.size());
    ConformityScorer s;
    s.variant = ConformityScorer::Variant::cqr;
    s.a = a;
    s.cqr_alpha = alpha;
    s.q_lo = fit_weighted_quantile(v, y, w, alpha / 2.0, spec);
    s.q_hi = fit_weighted_quantile(v, y, w, 1.0 - alpha / 2.0, spec);
    return s;
}

// Elementwise scores for the given rows; every row must carry an outcome.
inline std::vector<double> score_batch(const ConformityScorer& scorer,
                                       const ObservationTable& t,
                                       std::span<const std::size_t> rows) {
    std::vector<double> out(rows.size());
    for (std::size_t k = 0; k < rows.size(); ++k) {
        const std::size_t i = rows[k];
        if (!t.y(i)) throw DataError("score_batch: row without outcome");
        out[k] = scorer.score(t.y_value(i), t.v_row(i));
    }
    return out;
}

// Overload for explicit (y, v) pairs.
inline std::vector<double> score_batch(const ConformityScorer& scorer,
                                       std::span<const double> y, const Matrix& v) {
    if (y.size() != v.rows()) throw DataError("score_batch: size mismatch");
    std::vector<double> out(y.size());
    for (std::size_t i = 0; i < y.size(); ++i) out[i] = scorer.score(y[i], v.row(i));
    return out;
}

}  // namespace rtcp
