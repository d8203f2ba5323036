#pragma once

// Nuisance fits: the treatment propensity g_a(X) = P(A=a | X, S=1), the
// source-membership probability kappa(V) = P(S=1 | V), the conformity-score
// CDF q_a(r, X) at a pinned r, its V-marginalization m_a(r, V), the two-stage
// counterfactual mean, and the combined weight
//     w_a(O) = I(A=a) S (1 - kappa(V)) / (g_a(X) kappa(V)).

#include <memory>
#include <vector>

#include "rtcp/common.hpp"
#include "rtcp/data.hpp"
#include "rtcp/learners.hpp"

namespace rtcp {

struct TrimBounds {
    double lo = 0.025;
    double hi = 0.975;
};

// Classifier of I(A=a) on X over the S=1 rows of `rows`; trimmed.
inline LearnerModel fit_g(const ObservationTable& t, std::span<const std::size_t> rows,
                          int a, const LearnerSpec& spec, TrimBounds trim = {}) {
    std::vector<std::size_t> src;
    for (std::size_t i : rows)
        if (t.is_source(i)) src.push_back(i);
    if (src.empty()) throw DataError("fit_g: no source rows");
    Matrix x = build_x(t, src);
    std::vector<double> labels(src.size());
    for (std::size_t k = 0; k < src.size(); ++k)
        labels[k] = t.a_value(src[k]) == a ? 1.0 : 0.0;
    auto m = fit_classifier(x, labels, nullptr, spec);
    return make_clamped(std::move(m), trim.lo, trim.hi);
}

// Classifier of S on V over all rows of `rows` (both populations); trimmed.
inline LearnerModel fit_kappa(const ObservationTable& t,
                              std::span<const std::size_t> rows,
                              const LearnerSpec& spec, TrimBounds trim = {}) {
    if (rows.empty()) throw DataError("fit_kappa: no rows");
    Matrix v = build_v(t, rows);
    std::vector<double> labels(rows.size());
    for (std::size_t k = 0; k < rows.size(); ++k)
        labels[k] = t.is_source(rows[k]) ? 1.0 : 0.0;
    auto m = fit_classifier(v, labels, nullptr, spec);
    return make_clamped(std::move(m), trim.lo, trim.hi);
}

// Variant used by the comparator that ignores the extra covariates:
// P(A=a | V, S=1).
inline LearnerModel fit_g_on_v(const ObservationTable& t,
                               std::span<const std::size_t> rows, int a,
                               const LearnerSpec& spec, TrimBounds trim = {}) {
    std::vector<std::size_t> src;
    for (std::size_t i : rows)
        if (t.is_source(i)) src.push_back(i);
    if (src.empty()) throw DataError("fit_g_on_v: no source rows");
    Matrix v = build_v(t, src);
    std::vector<double> labels(src.size());
    for (std::size_t k = 0; k < src.size(); ++k)
        labels[k] = t.a_value(src[k]) == a ? 1.0 : 0.0;
    auto m = fit_classifier(v, labels, nullptr, spec);
    return make_clamped(std::move(m), trim.lo, trim.hi);
}

namespace detail_nuis {

inline std::vector<double> x_buffer(const ObservationTable& t, std::size_t i) {
    std::vector<double> x(t.p_v() + t.p_u());
    auto v = t.v_row(i);
    auto u = t.u_row(i);
    std::copy(v.begin(), v.end(), x.begin());
    std::copy(u.begin(), u.end(), x.begin() + static_cast<std::ptrdiff_t>(v.size()));
    return x;
}

}  // namespace detail_nuis

// w_a(O); zero for target rows and for source rows with A != a. `g_model`
// may expect X or V features (full and comparator pipelines respectively).
inline double compute_weight(const ObservationTable& t, std::size_t i, int a,
                             const Learner& g_model, const Learner& kappa_model) {
    if (!t.is_source(i)) return 0.0;
    if (t.a_value(i) != a) return 0.0;
    const double kap = kappa_model.predict_one(t.v_row(i));
    double g;
    if (g_model.feature_dim() == t.p_v()) {
        g = g_model.predict_one(t.v_row(i));
    } else {
        const auto x = detail_nuis::x_buffer(t, i);
        g = g_model.predict_one(x);
    }
    if (!(g > 0.0) || !(kap > 0.0))
        throw NumericError("compute_weight: zero probability reached the denominator "
                           "(trimming bypassed?)");
    return (1.0 - kap) / (g * kap);
}

// Two-stage counterfactual mean: mu_a on X over {A=a, S=1}, then its
// predictions regressed on V over {S=1}.
struct MeanPredictors {
    int a = 0;
    LearnerModel mu;   // over X
    LearnerModel eta;  // over V
};

inline MeanPredictors fit_two_stage_mean(const ObservationTable& t,
                                         std::span<const std::size_t> rows, int a,
                                         const LearnerSpec& spec_mu,
                                         const LearnerSpec& spec_eta) {
    std::vector<std::size_t> treated, src;
    for (std::size_t i : rows) {
        if (!t.is_source(i)) continue;
        src.push_back(i);
        if (t.a_value(i) == a) treated.push_back(i);
    }
    if (treated.empty()) throw DataError("fit_two_stage_mean: no source rows with A=a");

    Matrix x1 = build_x(t, treated);
    std::vector<double> y1(treated.size());
    for (std::size_t k = 0; k < treated.size(); ++k) y1[k] = t.y_value(treated[k]);
    auto mu = fit_regressor(x1, y1, nullptr, spec_mu);

    Matrix x2full = build_x(t, src);
    Matrix v2 = build_v(t, src);
    std::vector<double> y2(src.size());
    for (std::size_t k = 0; k < src.size(); ++k) y2[k] = mu->predict_one(x2full.row(k));
    auto eta = fit_regressor(v2, y2, nullptr, spec_eta);
    return {a, std::move(mu), std::move(eta)};
}

// Classifier of I(R_a(Y, V) <= r_pin) on X over the {A=a, S=1} rows of the
// fold; clamped to [0,1]. A constant indicator falls back to the empirical
// constant rather than erroring (small folds at extreme r_pin are expected).
template <typename ScoreFn>
LearnerModel fit_q(const ObservationTable& t, std::span<const std::size_t> rows, int a,
                   double r_pin, ScoreFn&& score, const LearnerSpec& spec,
                   bool* constant_fallback = nullptr) {
    if (!std::isfinite(r_pin) && constant_fallback) *constant_fallback = true;
    std::vector<std::size_t> treated;
    for (std::size_t i : rows)
        if (t.is_source(i) && t.a_value(i) == a) treated.push_back(i);
    if (treated.empty()) throw DataError("fit_q: no source rows with A=a");

    std::vector<double> labels(treated.size());
    bool any0 = false, any1 = false;
    for (std::size_t k = 0; k < treated.size(); ++k) {
        const std::size_t i = treated[k];
        labels[k] = score(t.y_value(i), t.v_row(i)) <= r_pin ? 1.0 : 0.0;
        (labels[k] == 0.0 ? any0 : any1) = true;
    }
    if (!any0 || !any1) {
        if (constant_fallback) *constant_fallback = true;
        return make_constant(any1 ? 1.0 : 0.0, t.p_v() + t.p_u());
    }
    if (constant_fallback) *constant_fallback = false;
    Matrix x = build_x(t, treated);
    auto m = fit_classifier(x, labels, nullptr, spec);
    return make_clamped(std::move(m), 0.0, 1.0);
}

// Regressor of q(r_pin, X) on V over all S=1 rows of the fold; clamped.
inline LearnerModel fit_m(const ObservationTable& t, std::span<const std::size_t> rows,
                          const LearnerModel& q_model, const LearnerSpec& spec) {
    std::vector<std::size_t> src;
    for (std::size_t i : rows)
        if (t.is_source(i)) src.push_back(i);
    if (src.empty()) throw DataError("fit_m: no source rows");
    Matrix x = build_x(t, src);
    Matrix v = build_v(t, src);
    std::vector<double> targets(src.size());
    for (std::size_t k = 0; k < src.size(); ++k)
        targets[k] = q_model->predict_one(x.row(k));
    auto m = fit_regressor(v, targets, nullptr, spec);
    return make_clamped(std::move(m), 0.0, 1.0);
}

// Everything the influence-curve evaluation needs, pinned at one r value.
struct NuisanceBundle {
    int a = 0;
    double r_pin = 0.0;
    LearnerModel q;      // over X
    LearnerModel m;      // over V
    LearnerModel g;      // over X (or V in the comparator pipeline)
    LearnerModel kappa;  // over V
    TrimBounds trim;
};

}  // namespace rtcp
