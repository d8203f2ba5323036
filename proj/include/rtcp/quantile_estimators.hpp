#pragma once

// Estimators of the target-population conformity-score quantile r_{a,alpha}:
//   * weighted conformal   (self-normalized weighted score quantile)
//   * plug-in regression   (solves the target-average of m_a(r, V) = 1-alpha
//                           over a grid, refitting q and m per grid point)
//   * localized DML        (influence-curve estimating equation on the
//                           calibration fold, nuisances pinned at r_init)
//   * naive DML comparator (forces X = V; the middle influence-curve term
//                           cancels because m and q coincide on V)
//
// All solves share one convention: estimating functions are nondecreasing
// step functions of r, and the returned value is the infimum crossing over
// the achievable range, with +/-inf sentinels when no crossing exists.

#include <optional>
#include <vector>

#include "rtcp/common.hpp"
#include "rtcp/data.hpp"
#include "rtcp/nuisance.hpp"
#include "rtcp/scores.hpp"

namespace rtcp {

enum class RhatMethod { weighted, plugin, dml, naive_dml };

inline const char* method_name(RhatMethod m) {
    switch (m) {
        case RhatMethod::weighted: return "weighted";
        case RhatMethod::plugin: return "plugin";
        case RhatMethod::dml: return "dml";
        case RhatMethod::naive_dml: return "naive-dml";
    }
    return "?";
}

struct QuantileEstimate {
    enum class Bracket { ok, below_range, above_range };

    double value = 0.0;
    RhatMethod method = RhatMethod::weighted;
    double alpha = 0.1;
    int a = 0;

    struct Diagnostics {
        double ess = 0.0;  // effective sample size of the weights in the solve
        Bracket bracket = Bracket::ok;
        std::optional<double> r_init;
        bool plugin_nonmonotone = false;
        bool q_constant_fallback = false;
    } diag;

    bool finite() const { return std::isfinite(value); }
};

// Per-row influence-curve contributions split into the three terms of the
// estimating function; sums satisfy term_target + term_shift + term_treat =
// the evaluated equation.
struct EicTermBreakdown {
    double term_target = 0.0;  // (1-S)(m - (1-alpha))
    double term_shift = 0.0;   // S(1-kappa)/kappa (q - m)
    double term_treat = 0.0;   // w (I(R <= r) - q)
    std::vector<double> per_row;

    double total() const { return term_target + term_shift + term_treat; }
};

namespace detail_solve {

// Smallest value r among `scores` with sum_i w_i I(scores_i <= r) >= target.
struct StepSolve {
    double rhat = 0.0;
    QuantileEstimate::Bracket bracket = QuantileEstimate::Bracket::ok;
};

inline StepSolve solve_step_equation(std::span<const double> scores,
                                     std::span<const double> weights, double target) {
    double total = 0.0;
    for (double w : weights) total += w;
    const double eps = 1e-9 * std::max(1.0, total);
    if (target < -eps) return {-kInf, QuantileEstimate::Bracket::below_range};
    if (target > total + eps) return {kInf, QuantileEstimate::Bracket::above_range};

    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    double cum = 0.0;
    for (std::size_t k : order) {
        cum += weights[k];
        if (cum >= target - eps) return {scores[k], QuantileEstimate::Bracket::ok};
    }
    return {scores[order.back()], QuantileEstimate::Bracket::ok};
}

}  // namespace detail_solve

// Self-normalized weighted conformal quantile over treated source rows:
// r = inf{ r in scores : sum w I(R <= r) / sum w >= 1 - alpha }.
inline QuantileEstimate weighted_rhat(std::span<const double> scores,
                                      std::span<const double> weights, double alpha,
                                      int a = 0) {
    if (!(alpha > 0.0 && alpha < 1.0)) throw NumericError("alpha must lie in (0,1)");
    if (scores.size() != weights.size()) throw NumericError("size mismatch");
    if (scores.empty()) throw NumericError("weighted_rhat: no scores");
    double total = 0.0;
    for (double w : weights) {
        if (!(w >= 0.0) || !std::isfinite(w))
            throw NumericError("weighted_rhat: invalid weight");
        total += w;
    }
    if (total <= 0.0) throw NumericError("weighted_rhat: all weights zero");

    const auto sol =
        detail_solve::solve_step_equation(scores, weights, (1.0 - alpha) * total);
    QuantileEstimate est;
    est.value = sol.rhat;
    est.method = RhatMethod::weighted;
    est.alpha = alpha;
    est.a = a;
    est.diag.ess = effective_sample_size(weights);
    est.diag.bracket = sol.bracket;
    return est;
}

// Grid for the plug-in solve: linear below the score median, log-spaced
// offsets above it.
inline std::vector<double> make_plugin_grid(std::span<const double> scores,
                                            std::size_t n_points = 50) {
    if (scores.empty()) throw NumericError("make_plugin_grid: no scores");
    std::vector<double> sorted(scores.begin(), scores.end());
    std::sort(sorted.begin(), sorted.end());
    const double lo = sorted.front(), hi = sorted.back();
    const double med = sorted[sorted.size() / 2];
    if (n_points <= 1 || hi <= lo) return {hi};

    std::vector<double> grid;
    const std::size_t n_lin = n_points / 2;
    for (std::size_t k = 0; k < n_lin; ++k)
        grid.push_back(lo + (med - lo) * static_cast<double>(k) /
                                static_cast<double>(n_lin));
    const std::size_t n_log = n_points - n_lin;
    const double span = hi - med;
    const double ratio_lo = 1.0 / 64.0;
    for (std::size_t k = 0; k < n_log; ++k) {
        const double t = static_cast<double>(k) / std::max<double>(1.0, n_log - 1.0);
        grid.push_back(med + span * ratio_lo * std::pow(1.0 / ratio_lo, t));
    }
    grid.back() = hi;
    std::sort(grid.begin(), grid.end());
    grid.erase(std::unique(grid.begin(), grid.end()), grid.end());
    return grid;
}

// Plug-in estimate: smallest grid r with (1/n0) sum_{S=0} m(r, V_i) >= 1-alpha.
// Refits q and m at every visited grid point.
template <typename ScoreFn>
QuantileEstimate plugin_rhat(const ObservationTable& t, int a, double alpha,
                             ScoreFn&& score, const LearnerSpec& q_spec,
                             const LearnerSpec& m_spec,
                             std::span<const double> r_grid) {
    if (!(alpha > 0.0 && alpha < 1.0)) throw NumericError("alpha must lie in (0,1)");
    if (r_grid.empty()) throw NumericError("plugin_rhat: empty grid");
    std::vector<std::size_t> all(t.n());
    std::iota(all.begin(), all.end(), std::size_t{0});
    const auto targets = select_rows(t, RowFilter::target_only());
    if (targets.empty()) throw DataError("plugin_rhat: target fold empty");

    QuantileEstimate est;
    est.method = RhatMethod::plugin;
    est.alpha = alpha;
    est.a = a;

    double prev_avg = -kInf;
    for (double r : r_grid) {
        bool fallback = false;
        auto q_model = fit_q(t, all, a, r, score, q_spec, &fallback);
        auto m_model = fit_m(t, all, q_model, m_spec);
        est.diag.q_constant_fallback = est.diag.q_constant_fallback || fallback;
        double avg = 0.0;
        for (std::size_t i : targets) avg += m_model->predict_one(t.v_row(i));
        avg /= static_cast<double>(targets.size());
        if (avg < prev_avg - 1e-9) est.diag.plugin_nonmonotone = true;
        prev_avg = std::max(prev_avg, avg);
        if (avg >= 1.0 - alpha) {
            est.value = r;
            est.diag.bracket = QuantileEstimate::Bracket::ok;
            return est;
        }
    }
    est.value = kInf;
    est.diag.bracket = QuantileEstimate::Bracket::above_range;
    return est;
}

namespace detail_solve {

// q and g may be fitted on X or on V; dispatch on the recorded feature dim.
inline double predict_x_or_v(const Learner& model, const ObservationTable& t,
                             std::size_t i) {
    if (model.feature_dim() == t.p_v()) return model.predict_one(t.v_row(i));
    const auto x = detail_nuis::x_buffer(t, i);
    return model.predict_one(x);
}

}  // namespace detail_solve

// One influence-curve evaluation. q and m stay pinned at bundle.r_pin; only
// the indicator depends on the argument r.
template <typename ScoreFn>
double eic_value(const ObservationTable& t, std::size_t i, double r,
                 const NuisanceBundle& bundle, ScoreFn&& score, double alpha) {
    const double m_v = bundle.m->predict_one(t.v_row(i));
    if (!t.is_source(i)) return m_v - (1.0 - alpha);

    const double kap = bundle.kappa->predict_one(t.v_row(i));
    const double q_x = detail_solve::predict_x_or_v(*bundle.q, t, i);
    const double odds = (1.0 - kap) / kap;
    double val = odds * (q_x - m_v);
    if (t.a_value(i) == bundle.a) {
        const double g = detail_solve::predict_x_or_v(*bundle.g, t, i);
        const double w = odds / g;
        const double ind = score(t.y_value(i), t.v_row(i)) <= r ? 1.0 : 0.0;
        val += w * (ind - q_x);
    }
    return val;
}

// Evaluates the calibration-fold estimating equation at r and splits it into
// the three influence-curve terms.
template <typename ScoreFn>
EicTermBreakdown eic_breakdown(const ObservationTable& t,
                               std::span<const std::size_t> rows, double r,
                               const NuisanceBundle& bundle, ScoreFn&& score,
                               double alpha) {
    EicTermBreakdown out;
    out.per_row.reserve(rows.size());
    for (std::size_t i : rows) {
        const double m_v = bundle.m->predict_one(t.v_row(i));
        double row_val = 0.0;
        if (!t.is_source(i)) {
            row_val = m_v - (1.0 - alpha);
            out.term_target += row_val;
        } else {
            const double kap = bundle.kappa->predict_one(t.v_row(i));
            const double q_x = detail_solve::predict_x_or_v(*bundle.q, t, i);
            const double odds = (1.0 - kap) / kap;
            const double shift = odds * (q_x - m_v);
            out.term_shift += shift;
            row_val = shift;
            if (t.a_value(i) == bundle.a) {
                const double g = detail_solve::predict_x_or_v(*bundle.g, t, i);
                const double ind = score(t.y_value(i), t.v_row(i)) <= r ? 1.0 : 0.0;
                const double treat = (odds / g) * (ind - q_x);
                out.term_treat += treat;
                row_val += treat;
            }
        }
        out.per_row.push_back(row_val);
    }
    return out;
}

// Localized solve on the calibration fold. Only sum_cal w I(R <= r) moves
// with r, so the equation reduces to finding the smallest calibration score
// with cumulative weight >= -c, where c collects every r-free term.
template <typename ScoreFn>
QuantileEstimate solve_dml_on_cal(const ObservationTable& t,
                                  std::span<const std::size_t> cal,
                                  const NuisanceBundle& bundle, ScoreFn&& score,
                                  double alpha, RhatMethod method) {
    std::vector<double> treated_scores, treated_weights;
    double c = 0.0;
    bool any_treated = false;
    for (std::size_t i : cal) {
        const double m_v = bundle.m->predict_one(t.v_row(i));
        if (!t.is_source(i)) {
            c += m_v - (1.0 - alpha);
            continue;
        }
        const double kap = bundle.kappa->predict_one(t.v_row(i));
        const double q_x = detail_solve::predict_x_or_v(*bundle.q, t, i);
        const double odds = (1.0 - kap) / kap;
        c += odds * (q_x - m_v);
        if (t.a_value(i) == bundle.a) {
            any_treated = true;
            const double g = detail_solve::predict_x_or_v(*bundle.g, t, i);
            const double w = odds / g;
            c -= w * q_x;
            treated_scores.push_back(score(t.y_value(i), t.v_row(i)));
            treated_weights.push_back(w);
        }
    }
    if (!any_treated)
        throw DataError("localized solve: no treated source rows in calibration fold");

    const auto sol =
        detail_solve::solve_step_equation(treated_scores, treated_weights, -c);
    QuantileEstimate est;
    est.value = sol.rhat;
    est.method = method;
    est.alpha = alpha;
    est.a = bundle.a;
    est.diag.ess = effective_sample_size(treated_weights);
    est.diag.bracket = sol.bracket;
    est.diag.r_init = bundle.r_pin;
    return est;
}

// Weighted conformal initial estimate over the treated source rows of a fold.
inline QuantileEstimate rhat_init_on_fold(const ObservationTable& t,
                                          std::span<const std::size_t> fold,
                                          const ConformityScorer& scorer, int a,
                                          double alpha, const Learner& g,
                                          const Learner& kappa) {
    std::vector<double> scores, weights;
    for (std::size_t i : fold) {
        if (!t.is_source(i) || t.a_value(i) != a) continue;
        scores.push_back(scorer.score(t.y_value(i), t.v_row(i)));
        weights.push_back(compute_weight(t, i, a, g, kappa));
    }
    if (scores.empty()) throw DataError("no treated source rows for the initial fit");
    return weighted_rhat(scores, weights, alpha, a);
}

// Full localized-DML pipeline, following the split-conformal construction:
// r_init by weighted conformal on train1, q/m pinned at r_init on train2,
// estimating-equation solve on cal.
inline QuantileEstimate dml_rhat(const ObservationTable& t, const SplitAssignment& sp,
                                 int a, double alpha, const ConformityScorer& scorer,
                                 const LearnerModel& g, const LearnerModel& kappa,
                                 const LearnerSpec& q_spec, const LearnerSpec& m_spec,
                                 NuisanceBundle* out_bundle = nullptr) {
    const auto init = rhat_init_on_fold(t, sp.train1, scorer, a, alpha, *g, *kappa);

    bool fallback = false;
    auto q_model = fit_q(t, sp.train2, a, init.value, scorer, q_spec, &fallback);
    auto m_model = fit_m(t, sp.train2, q_model, m_spec);

    NuisanceBundle bundle;
    bundle.a = a;
    bundle.r_pin = init.value;
    bundle.q = std::move(q_model);
    bundle.m = std::move(m_model);
    bundle.g = g;
    bundle.kappa = kappa;
    if (out_bundle) *out_bundle = bundle;

    auto est = solve_dml_on_cal(t, sp.cal, bundle, scorer, alpha, RhatMethod::dml);
    est.diag.q_constant_fallback = fallback;
    return est;
}

// Comparator that ignores runtime confounding: every nuisance is fit on V
// alone and the scorer must itself be V-only. Setting m identical to q makes
// the covariate-shift term vanish, which reproduces the reduced
// influence curve of the X = V restriction.
inline QuantileEstimate naive_dml_rhat(const ObservationTable& t,
                                       const SplitAssignment& sp, int a, double alpha,
                                       const ConformityScorer& scorer_on_v,
                                       const LearnerModel& g_on_v,
                                       const LearnerModel& kappa,
                                       const LearnerSpec& q_spec,
                                       NuisanceBundle* out_bundle = nullptr) {
    if (g_on_v->feature_dim() != t.p_v())
        throw ConfigError("naive_dml_rhat: g must be fitted on V");
    const auto init = rhat_init_on_fold(t, sp.train1, scorer_on_v, a, alpha, *g_on_v,
                                        *kappa);

    // q on V only; a fresh classifier of the score indicator against V.
    std::vector<std::size_t> treated;
    for (std::size_t i : sp.train2)
        if (t.is_source(i) && t.a_value(i) == a) treated.push_back(i);
    if (treated.empty()) throw DataError("naive_dml_rhat: no treated rows in train2");
    std::vector<double> labels(treated.size());
    bool any0 = false, any1 = false;
    for (std::size_t k = 0; k < treated.size(); ++k) {
        const std::size_t i = treated[k];
        labels[k] =
            scorer_on_v.score(t.y_value(i), t.v_row(i)) <= init.value ? 1.0 : 0.0;
        (labels[k] == 0.0 ? any0 : any1) = true;
    }
    LearnerModel q_model;
    bool fallback = false;
    if (!any0 || !any1) {
        q_model = make_constant(any1 ? 1.0 : 0.0, t.p_v());
        fallback = true;
    } else {
        Matrix v = build_v(t, treated);
        q_model = make_clamped(fit_classifier(v, labels, nullptr, q_spec), 0.0, 1.0);
    }

    NuisanceBundle bundle;
    bundle.a = a;
    bundle.r_pin = init.value;
    bundle.q = q_model;
    bundle.m = q_model;  // identical on V; the shift term cancels exactly
    bundle.g = g_on_v;
    bundle.kappa = kappa;
    if (out_bundle) *out_bundle = bundle;

    auto est =
        solve_dml_on_cal(t, sp.cal, bundle, scorer_on_v, alpha, RhatMethod::naive_dml);
    est.diag.q_constant_fallback = fallback;
    return est;
}

}  // namespace rtcp
