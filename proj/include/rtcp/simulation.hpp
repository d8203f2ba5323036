#pragma once

// Synthetic data generator with retained counterfactuals, closed-form oracle
// nuisances for it, and the Monte Carlo harness that measures coverage and
// interval length for the estimators under study.
//
// Outcome model:  Y(a) = mu(V, U) + eps,  mu = k_v/(k_v+k_u) (sum V + 2 sum U)
// Treatment:      A ~ Bernoulli(expit((sum V - 2 sum U) / sqrt(k_v + k_u)))
// Source:         S ~ Bernoulli(expit(b - sum V / sqrt(k_v)))
// with sums over the k_v / k_u active components and eps ~ N(0, sqrt|mu|).
// Whether sqrt|mu| is the standard deviation or the variance of eps is
// configurable; the default reads it as the standard deviation.

#include <atomic>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "rtcp/common.hpp"
#include "rtcp/data.hpp"
#include "rtcp/intervals.hpp"
#include "rtcp/nuisance.hpp"
#include "rtcp/quantile_estimators.hpp"
#include "rtcp/scores.hpp"

namespace rtcp {

enum class NoiseReading { stddev, variance };

struct DgpConfig {
    std::size_t p_v = 15, p_u = 15;
    std::size_t k_v = 5, k_u = 10;
    std::size_t n = 5000;
    double source_rate = 0.9;
    double intercept_b = 0.0;  // set by calibrate_intercept
    NoiseReading noise = NoiseReading::stddev;

    void check() const {
        if (k_v > p_v || k_u > p_u) throw ConfigError("active counts exceed dimensions");
        if (!(source_rate > 0.0 && source_rate < 1.0))
            throw ConfigError("source_rate must lie in (0,1)");
        if (k_v == 0) throw ConfigError("k_v must be positive");
    }
};

namespace detail_sim {

inline double active_sum(std::span<const double> xs, std::size_t k) {
    double s = 0.0;
    for (std::size_t i = 0; i < k; ++i) s += xs[i];
    return s;
}

}  // namespace detail_sim

inline double dgp_mu(const DgpConfig& c, std::span<const double> v,
                     std::span<const double> u) {
    const double scale =
        static_cast<double>(c.k_v) / static_cast<double>(c.k_v + c.k_u);
    return scale * (detail_sim::active_sum(v, c.k_v) +
                    2.0 * detail_sim::active_sum(u, c.k_u));
}

inline double dgp_propensity(const DgpConfig& c, std::span<const double> v,
                             std::span<const double> u) {
    const double z = (detail_sim::active_sum(v, c.k_v) -
                      2.0 * detail_sim::active_sum(u, c.k_u)) /
                     std::sqrt(static_cast<double>(c.k_v + c.k_u));
    return expit(z);
}

inline double dgp_kappa(const DgpConfig& c, std::span<const double> v) {
    return expit(c.intercept_b -
                 detail_sim::active_sum(v, c.k_v) / std::sqrt(static_cast<double>(c.k_v)));
}

inline double dgp_noise_sd(const DgpConfig& c, double mu) {
    const double root = std::sqrt(std::abs(mu));
    return c.noise == NoiseReading::stddev ? root : std::sqrt(root);
}

// Solves mean(expit(b - sum V / sqrt(k_v))) = source_rate by bisection over a
// large fixed-seed sample of V draws.
inline double calibrate_intercept(const DgpConfig& cfg, std::size_t draws = 1000000,
                                  double tol = 1e-4, std::uint64_t seed = 1234) {
    cfg.check();
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<double> z(draws);
    const double inv_sqrt_kv = 1.0 / std::sqrt(static_cast<double>(cfg.k_v));
    for (auto& zi : z) {
        double s = 0.0;
        for (std::size_t k = 0; k < cfg.k_v; ++k) s += normal(rng);
        zi = s * inv_sqrt_kv;
    }
    auto rate = [&](double b) {
        double m = 0.0;
        for (double zi : z) m += expit(b - zi);
        return m / static_cast<double>(draws);
    };
    double lo = -30.0, hi = 30.0;
    for (int it = 0; it < 200; ++it) {
        const double mid = 0.5 * (lo + hi);
        const double r = rate(mid);
        if (std::abs(r - cfg.source_rate) <= tol) return mid;
        (r < cfg.source_rate ? lo : hi) = mid;
    }
    return 0.5 * (lo + hi);
}

// Generated sample: the observed table plus evaluation-only fields. The
// counterfactuals and the full U matrix never reach an estimator; the table
// is the only estimator input.
struct SimulatedData {
    ObservationTable table;
    std::vector<double> y0, y1;  // retained counterfactuals, evaluation only
    Matrix u_all;                // evaluation only (the table hides U where s=0)
    DgpConfig cfg;

    double counterfactual(std::size_t i, int a) const { return a == 0 ? y0[i] : y1[i]; }
};

struct SimulatedUnit {
    std::span<const double> v, u;
    double y0 = 0.0, y1 = 0.0;
    int a = 0;
    bool s = false;
};

inline SimulatedUnit unit_view(const SimulatedData& d, std::size_t i) {
    SimulatedUnit un;
    un.v = d.table.v_row(i);
    un.u = d.u_all.row(i);
    un.y0 = d.y0[i];
    un.y1 = d.y1[i];
    un.s = d.table.is_source(i);
    un.a = un.s ? d.table.a_value(i) : -1;
    return un;
}

inline SimulatedData generate(const DgpConfig& cfg, std::uint64_t seed) {
    cfg.check();
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> unif(0.0, 1.0);

    const std::size_t n = cfg.n;
    Matrix v(n, cfg.p_v), u_all(n, cfg.p_u), u_obs(n, cfg.p_u);
    std::vector<std::optional<double>> y(n);
    std::vector<std::optional<int>> a(n);
    std::vector<std::uint8_t> s(n);
    std::vector<double> y0(n), y1(n);

    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < cfg.p_v; ++j) v.at(i, j) = normal(rng);
        for (std::size_t j = 0; j < cfg.p_u; ++j) u_all.at(i, j) = normal(rng);
        const double mu = dgp_mu(cfg, v.row(i), u_all.row(i));
        const double sd = dgp_noise_sd(cfg, mu);
        const int ai = unif(rng) < dgp_propensity(cfg, v.row(i), u_all.row(i)) ? 1 : 0;
        const bool si = unif(rng) < dgp_kappa(cfg, v.row(i));
        y0[i] = mu + sd * normal(rng);
        y1[i] = mu + sd * normal(rng);
        s[i] = si ? 1 : 0;
        if (si) {
            a[i] = ai;
            y[i] = ai == 1 ? y1[i] : y0[i];
            std::copy(u_all.row(i).begin(), u_all.row(i).end(), u_obs.row(i).begin());
        }
    }

    SimulatedData out;
    out.table = ObservationTable(std::move(y), std::move(a), std::move(v),
                                 std::move(u_obs), std::move(s));
    out.y0 = std::move(y0);
    out.y1 = std::move(y1);
    out.u_all = std::move(u_all);
    out.cfg = cfg;
    return out;
}

// ---------------------------------------------------------------------------
// Closed-form oracle nuisances
// ---------------------------------------------------------------------------

struct DgpOracle {
    DgpConfig cfg;

    explicit DgpOracle(DgpConfig c) : cfg(c) {}

    LearnerModel g(int a) const {
        const DgpConfig c = cfg;
        return make_oracle(
            [c, a](std::span<const double> x) {
                const auto v = x.subspan(0, c.p_v);
                const auto u = x.subspan(c.p_v, c.p_u);
                const double p1 = dgp_propensity(c, v, u);
                return a == 1 ? p1 : 1.0 - p1;
            },
            cfg.p_v + cfg.p_u, "oracle-g");
    }

    LearnerModel kappa() const {
        const DgpConfig c = cfg;
        return make_oracle([c](std::span<const double> v) { return dgp_kappa(c, v); },
                           cfg.p_v, "oracle-kappa");
    }

    // E[mu(V,U) | V] = k_v/(k_v+k_u) sum of active V (U is mean zero).
    LearnerModel eta() const {
        const DgpConfig c = cfg;
        return make_oracle(
            [c](std::span<const double> v) {
                const double scale =
                    static_cast<double>(c.k_v) / static_cast<double>(c.k_v + c.k_u);
                return scale * detail_sim::active_sum(v, c.k_v);
            },
            cfg.p_v, "oracle-eta");
    }

    LearnerModel mu_model() const {
        const DgpConfig c = cfg;
        return make_oracle(
            [c](std::span<const double> x) {
                return dgp_mu(c, x.subspan(0, c.p_v), x.subspan(c.p_v, c.p_u));
            },
            cfg.p_v + cfg.p_u, "oracle-mu");
    }

    // P(score(Y, v) <= r | X = x) for Y ~ N(mu(x), sd(x)^2): the score
    // sublevel set is an interval, so this is a difference of normal CDFs.
    double q_value(const ConformityScorer& scorer, double r,
                   std::span<const double> v, std::span<const double> u) const {
        QuantileEstimate tmp;
        tmp.value = r;
        tmp.a = scorer.a;
        const auto iv = invert(scorer, v, tmp);
        if (iv.empty) return 0.0;
        const double mu = dgp_mu(cfg, v, u);
        const double sd = dgp_noise_sd(cfg, mu);
        if (sd < 1e-12) return iv.contains(mu) ? 1.0 : 0.0;
        const double hi = std::isfinite(iv.upper) ? normal_cdf((iv.upper - mu) / sd) : 1.0;
        const double lo = std::isfinite(iv.lower) ? normal_cdf((iv.lower - mu) / sd) : 0.0;
        return std::max(0.0, hi - lo);
    }

    LearnerModel q_model(const ConformityScorer& scorer, double r_pin) const {
        const DgpConfig c = cfg;
        const DgpOracle self(cfg);
        ConformityScorer sc = scorer;
        return make_oracle(
            [self, sc, r_pin, c](std::span<const double> x) {
                return self.q_value(sc, r_pin, x.subspan(0, c.p_v),
                                    x.subspan(c.p_v, c.p_u));
            },
            cfg.p_v + cfg.p_u, "oracle-q");
    }

    // P(score(Y, v) <= r | V = v, sum of active U = t): the outcome law
    // depends on U only through that sum.
    double q_value_at_usum(const ConformityScorer& scorer, double r,
                           std::span<const double> v, double u_sum) const {
        QuantileEstimate tmp;
        tmp.value = r;
        tmp.a = scorer.a;
        const auto iv = invert(scorer, v, tmp);
        if (iv.empty) return 0.0;
        const double scale =
            static_cast<double>(cfg.k_v) / static_cast<double>(cfg.k_v + cfg.k_u);
        const double mu = scale * (detail_sim::active_sum(v, cfg.k_v) + 2.0 * u_sum);
        const double sd = dgp_noise_sd(cfg, mu);
        if (sd < 1e-12) return iv.contains(mu) ? 1.0 : 0.0;
        const double hi = std::isfinite(iv.upper) ? normal_cdf((iv.upper - mu) / sd) : 1.0;
        const double lo = std::isfinite(iv.lower) ? normal_cdf((iv.lower - mu) / sd) : 0.0;
        return std::max(0.0, hi - lo);
    }

    // m(r, v) = E_U[q(r, (v, U))]. q depends on U only through the active
    // sum, which is N(0, k_u), so the expectation is a one-dimensional
    // Gaussian integral; a fixed z-grid evaluates it to numerical accuracy.
    LearnerModel m_model(const ConformityScorer& scorer, double r_pin) const {
        const DgpOracle self(cfg);
        ConformityScorer sc = scorer;
        const double sd_t = std::sqrt(static_cast<double>(cfg.k_u));
        // midpoint rule over z in [-8, 8] with standard normal weights
        constexpr int kNodes = 257;
        std::vector<double> zs(kNodes), wz(kNodes);
        double wsum = 0.0;
        for (int k = 0; k < kNodes; ++k) {
            const double z = -8.0 + 16.0 * (k + 0.5) / kNodes;
            zs[k] = z;
            wz[k] = std::exp(-0.5 * z * z);
            wsum += wz[k];
        }
        for (auto& w : wz) w /= wsum;
        return make_oracle(
            [self, sc, r_pin, sd_t, zs, wz](std::span<const double> v) {
                double s = 0.0;
                for (std::size_t k = 0; k < zs.size(); ++k)
                    s += wz[k] * self.q_value_at_usum(sc, r_pin, v, sd_t * zs[k]);
                return s;
            },
            cfg.p_v, "oracle-m");
    }
};

// Empirical (1-alpha) target-population score quantile from a large fresh
// draw with retained counterfactuals; the reference value the estimators are
// judged against.
inline double true_target_score_quantile(const DgpConfig& cfg,
                                         const ConformityScorer& scorer, int a,
                                         double alpha, std::size_t pool_size,
                                         std::uint64_t seed) {
    DgpConfig big = cfg;
    big.n = pool_size;
    const auto d = generate(big, seed);
    std::vector<double> scores;
    scores.reserve(pool_size / 8);
    for (std::size_t i = 0; i < d.table.n(); ++i) {
        if (d.table.is_source(i)) continue;
        scores.push_back(scorer.score(d.counterfactual(i, a), d.table.v_row(i)));
    }
    if (scores.empty()) throw NumericError("no target rows in reference draw");
    return quantile_inf(scores, 1.0 - alpha);
}

// Plug-in solve against oracle nuisances: no fitting, just a search on the
// target average of oracle m(r, V). The oracle curve is exactly monotone in
// r, so the smallest crossing index is located by bisection over the grid;
// the answer matches a full left-to-right scan.
inline QuantileEstimate plugin_rhat_oracle(const ObservationTable& t, int a,
                                           double alpha,
                                           const ConformityScorer& scorer,
                                           const DgpOracle& oracle,
                                           std::span<const double> r_grid) {
    const auto targets = select_rows(t, RowFilter::target_only());
    if (targets.empty()) throw DataError("plugin_rhat_oracle: target fold empty");
    QuantileEstimate est;
    est.method = RhatMethod::plugin;
    est.alpha = alpha;
    est.a = a;

    auto target_avg = [&](double r) {
        const auto m = oracle.m_model(scorer, r);
        double avg = 0.0;
        for (std::size_t i : targets) avg += m->predict_one(t.v_row(i));
        return avg / static_cast<double>(targets.size());
    };

    if (target_avg(r_grid.back()) < 1.0 - alpha) {
        est.value = kInf;
        est.diag.bracket = QuantileEstimate::Bracket::above_range;
        return est;
    }
    std::size_t lo = 0, hi = r_grid.size() - 1;
    if (target_avg(r_grid.front()) >= 1.0 - alpha) {
        est.value = r_grid.front();
        return est;
    }
    while (hi - lo > 1) {  // invariant: avg(lo) < 1-alpha <= avg(hi)
        const std::size_t mid = (lo + hi) / 2;
        (target_avg(r_grid[mid]) >= 1.0 - alpha ? hi : lo) = mid;
    }
    est.value = r_grid[hi];
    return est;
}

// ---------------------------------------------------------------------------
// Monte Carlo harness
// ---------------------------------------------------------------------------

struct ScenarioConfig {
    DgpConfig dgp;
    double alpha = 0.1;
    std::vector<RhatMethod> methods{RhatMethod::dml, RhatMethod::weighted};
    std::vector<ScoreType> scores{ScoreType::abs_residual, ScoreType::cqr};
    LearnerSpec classifier_spec = LearnerSpec::quick_linear(1e-3);
    LearnerSpec regressor_spec = LearnerSpec::quick_linear(1e-3);
    LearnerSpec quantile_spec = LearnerSpec::quick_linear();
    TrimBounds trim;
    double train_frac = 0.5, cal_frac = 0.5;
    std::size_t plugin_grid = 50;
    bool oracle_nuisances = false;
    bool ite = false;  // evaluate Bonferroni ITE intervals at per-arm alpha/2
};

enum class Estimand { counterfactual, ite };

// Raw per-replication tallies for one (method, score, estimand, a) cell.
struct RepOutcome {
    RhatMethod method = RhatMethod::dml;
    ScoreType score = ScoreType::abs_residual;
    Estimand estimand = Estimand::counterfactual;
    int a = 0;
    std::size_t covered = 0;
    std::size_t evaluated = 0;
    double length_sum = 0.0;
    std::size_t finite_count = 0;
    std::size_t infinite_count = 0;
    std::size_t empty_count = 0;
    double rhat = 0.0;
    bool failed = false;
    std::string fail_reason;
};

namespace detail_sim {

struct ArmScorers {
    ConformityScorer main;     // fitted (or oracle) scorer for the full pipeline
    ConformityScorer naive;    // V-only scorer for the comparator
    bool has_naive = false;
};

inline bool wants(const std::vector<RhatMethod>& ms, RhatMethod m) {
    return std::find(ms.begin(), ms.end(), m) != ms.end();
}

}  // namespace detail_sim

inline std::vector<RepOutcome> run_replication(const ScenarioConfig& sc,
                                               std::uint64_t seed) {
    std::vector<RepOutcome> out;
    auto fail_all = [&](const std::string& reason) {
        for (auto m : sc.methods)
            for (auto s : sc.scores) {
                RepOutcome r;
                r.method = m;
                r.score = s;
                r.failed = true;
                r.fail_reason = reason;
                r.estimand = sc.ite ? Estimand::ite : Estimand::counterfactual;
                out.push_back(r);
            }
        return out;
    };

    SimulatedData data;
    SplitAssignment splits;
    try {
        data = generate(sc.dgp, derive_seed(seed, 1));
        splits = make_splits(data.table, sc.train_frac, sc.cal_frac, derive_seed(seed, 2));
    } catch (const std::exception& e) {
        return fail_all(std::string("setup: ") + e.what());
    }
    const ObservationTable& t = data.table;
    const auto levels = t.treatment_levels();
    const double alpha_arm = sc.ite ? sc.alpha / 2.0 : sc.alpha;
    const auto target_rows = select_rows(t, RowFilter::target_only());

    const DgpOracle oracle(sc.dgp);

    // kappa is shared by every arm; its training fold carries both
    // populations because the pooled split is stratified.
    LearnerModel kappa;
    const bool want_naive = detail_sim::wants(sc.methods, RhatMethod::naive_dml);
    try {
        kappa = sc.oracle_nuisances
                    ? oracle.kappa()
                    : fit_kappa(t, splits.train_all(), sc.classifier_spec, sc.trim);
    } catch (const std::exception& e) {
        return fail_all(std::string("kappa: ") + e.what());
    }

    struct ArmResult {
        std::map<int, PredictionInterval> per_row;  // filled per method/score below
    };

    const auto train_rows = splits.train_all();

    // Evaluate one (method, score, a) cell given a scorer and estimate.
    auto evaluate_arm = [&](const ConformityScorer& scorer, const QuantileEstimate& est,
                            RhatMethod method, ScoreType score, int a,
                            std::vector<PredictionInterval>* keep) {
        RepOutcome r;
        r.method = method;
        r.score = score;
        r.a = a;
        r.rhat = est.value;
        for (std::size_t k = 0; k < target_rows.size(); ++k) {
            const std::size_t i = target_rows[k];
            const auto iv = invert(scorer, t.v_row(i), est);
            if (keep) (*keep)[k] = iv;
            const double y_true = data.counterfactual(i, a);
            r.evaluated++;
            r.covered += iv.contains(y_true) ? 1 : 0;
            if (iv.empty)
                r.empty_count++;
            else if (iv.finite()) {
                r.finite_count++;
                r.length_sum += iv.width();
            } else {
                r.infinite_count++;
            }
        }
        return r;
    };

    // ITE accumulators: per (method, score), per-arm intervals.
    struct ItePack {
        std::vector<PredictionInterval> c0, c1;
        bool ok0 = false, ok1 = false;
    };
    std::map<std::pair<int, int>, ItePack> ite_packs;  // (method, score) -> arms

    for (int a : levels) {
        LearnerModel g_model, g_naive;
        try {
            g_model = sc.oracle_nuisances
                          ? oracle.g(a)
                          : fit_g(t, train_rows, a, sc.classifier_spec, sc.trim);
            if (want_naive)
                g_naive = fit_g_on_v(t, train_rows, a, sc.classifier_spec, sc.trim);
        } catch (const std::exception& e) {
            for (auto m : sc.methods)
                for (auto s : sc.scores) {
                    RepOutcome r;
                    r.method = m;
                    r.score = s;
                    r.a = a;
                    r.failed = true;
                    r.fail_reason = std::string("g: ") + e.what();
                    out.push_back(r);
                }
            continue;
        }

        for (auto score_type : sc.scores) {
            detail_sim::ArmScorers scorers;
            try {
                if (score_type == ScoreType::abs_residual) {
                    if (sc.oracle_nuisances) {
                        scorers.main = ConformityScorer{};
                        scorers.main.variant = ConformityScorer::Variant::abs_residual;
                        scorers.main.a = a;
                        scorers.main.eta = oracle.eta();
                    } else {
                        auto mean = fit_two_stage_mean(t, train_rows, a,
                                                       sc.regressor_spec,
                                                       sc.regressor_spec);
                        scorers.main = build_abs_scorer(mean, a);
                    }
                    if (want_naive) {
                        // Single-stage mean on V: with X forced to V the two
                        // stages coincide.
                        std::vector<std::size_t> treated;
                        for (std::size_t i : train_rows)
                            if (t.is_source(i) && t.a_value(i) == a)
                                treated.push_back(i);
                        Matrix v = build_v(t, treated);
                        std::vector<double> yv(treated.size());
                        for (std::size_t k = 0; k < treated.size(); ++k)
                            yv[k] = t.y_value(treated[k]);
                        scorers.naive.variant = ConformityScorer::Variant::abs_residual;
                        scorers.naive.a = a;
                        scorers.naive.eta =
                            fit_regressor(v, yv, nullptr, sc.regressor_spec);
                        scorers.has_naive = true;
                    }
                } else {
                    if (sc.oracle_nuisances)
                        throw ConfigError(
                            "oracle nuisance mode supports the abs score only");
                    scorers.main = build_cqr_scorer(t, train_rows, a, alpha_arm,
                                                    *g_model, *kappa, sc.quantile_spec);
                    if (want_naive) {
                        scorers.naive = build_cqr_scorer_unweighted(
                            t, train_rows, a, alpha_arm, sc.quantile_spec);
                        scorers.has_naive = true;
                    }
                }
            } catch (const std::exception& e) {
                for (auto m : sc.methods) {
                    RepOutcome r;
                    r.method = m;
                    r.score = score_type;
                    r.a = a;
                    r.failed = true;
                    r.fail_reason = std::string("scorer: ") + e.what();
                    out.push_back(r);
                }
                continue;
            }

            for (auto method : sc.methods) {
                RepOutcome res;
                try {
                    QuantileEstimate est;
                    const ConformityScorer* used = &scorers.main;
                    switch (method) {
                        case RhatMethod::weighted: {
                            std::vector<double> scv, wv;
                            for (std::size_t i : splits.cal) {
                                if (!t.is_source(i) || t.a_value(i) != a) continue;
                                scv.push_back(
                                    scorers.main.score(t.y_value(i), t.v_row(i)));
                                wv.push_back(compute_weight(t, i, a, *g_model, *kappa));
                            }
                            est = weighted_rhat(scv, wv, alpha_arm, a);
                            break;
                        }
                        case RhatMethod::plugin: {
                            std::vector<double> all_scores;
                            for (std::size_t i = 0; i < t.n(); ++i)
                                if (t.is_source(i) && t.a_value(i) == a)
                                    all_scores.push_back(scorers.main.score(
                                        t.y_value(i), t.v_row(i)));
                            auto grid = make_plugin_grid(all_scores, sc.plugin_grid);
                            if (sc.oracle_nuisances)
                                est = plugin_rhat_oracle(t, a, alpha_arm, scorers.main,
                                                         oracle, grid);
                            else
                                est = plugin_rhat(t, a, alpha_arm, scorers.main,
                                                  sc.classifier_spec, sc.regressor_spec,
                                                  grid);
                            break;
                        }
                        case RhatMethod::dml: {
                            if (sc.oracle_nuisances) {
                                auto init = rhat_init_on_fold(t, splits.train1,
                                                              scorers.main, a,
                                                              alpha_arm, *g_model,
                                                              *kappa);
                                NuisanceBundle bundle;
                                bundle.a = a;
                                bundle.r_pin = init.value;
                                bundle.q = oracle.q_model(scorers.main, init.value);
                                bundle.m = oracle.m_model(scorers.main, init.value);
                                bundle.g = g_model;
                                bundle.kappa = kappa;
                                est = solve_dml_on_cal(t, splits.cal, bundle,
                                                       scorers.main, alpha_arm,
                                                       RhatMethod::dml);
                            } else {
                                est = dml_rhat(t, splits, a, alpha_arm, scorers.main,
                                               g_model, kappa, sc.classifier_spec,
                                               sc.regressor_spec);
                            }
                            break;
                        }
                        case RhatMethod::naive_dml: {
                            if (!scorers.has_naive)
                                throw ConfigError("naive scorer unavailable");
                            est = naive_dml_rhat(t, splits, a, alpha_arm, scorers.naive,
                                                 g_naive, kappa, sc.classifier_spec);
                            used = &scorers.naive;
                            break;
                        }
                    }
                    if (sc.ite) {
                        auto& pack = ite_packs[{static_cast<int>(method),
                                                static_cast<int>(score_type)}];
                        auto& slot = a == 0 ? pack.c0 : pack.c1;
                        slot.assign(target_rows.size(), {});
                        res = evaluate_arm(*used, est, method, score_type, a, &slot);
                        (a == 0 ? pack.ok0 : pack.ok1) = true;
                    } else {
                        res = evaluate_arm(*used, est, method, score_type, a, nullptr);
                    }
                } catch (const std::exception& e) {
                    res = RepOutcome{};
                    res.method = method;
                    res.score = score_type;
                    res.a = a;
                    res.failed = true;
                    res.fail_reason = e.what();
                }
                out.push_back(res);
            }
        }
    }

    if (sc.ite) {
        std::vector<RepOutcome> ite_rows;
        for (auto method : sc.methods)
            for (auto score_type : sc.scores) {
                auto it = ite_packs.find(
                    {static_cast<int>(method), static_cast<int>(score_type)});
                RepOutcome r;
                r.method = method;
                r.score = score_type;
                r.estimand = Estimand::ite;
                if (it == ite_packs.end() || !it->second.ok0 || !it->second.ok1) {
                    r.failed = true;
                    r.fail_reason = "missing arm";
                } else {
                    for (std::size_t k = 0; k < target_rows.size(); ++k) {
                        const std::size_t i = target_rows[k];
                        const auto ite_iv =
                            ite_bonferroni(it->second.c1[k], it->second.c0[k]);
                        const double truth = data.y1[i] - data.y0[i];
                        r.evaluated++;
                        r.covered += ite_iv.contains(truth) ? 1 : 0;
                        if (ite_iv.empty)
                            r.empty_count++;
                        else if (ite_iv.finite()) {
                            r.finite_count++;
                            r.length_sum += ite_iv.width();
                        } else {
                            r.infinite_count++;
                        }
                    }
                }
                ite_rows.push_back(r);
            }
        out.insert(out.end(), ite_rows.begin(), ite_rows.end());
    }
    return out;
}

// ---------------------------------------------------------------------------
// Aggregation
// ---------------------------------------------------------------------------

// One results row: coverage is the mean of per-replication coverage rates,
// se its standard error across replications.
struct McRow {
    std::size_t n = 0, k_u = 0, k_v = 0, p_v = 0, p_u = 0;
    double source_rate = 0.9;
    double alpha = 0.1;
    std::string method, score;
    std::string estimand = "y(a)";
    int a = -1;  // -1 = pooled over arms
    double coverage = 0.0;
    double coverage_se = 0.0;
    double avg_length = 0.0;
    std::size_t reps = 0;
    std::size_t failures = 0;
    std::size_t infinite_intervals = 0;
    std::size_t empty_intervals = 0;
};

struct McResult {
    std::vector<McRow> rows;

    const McRow* find(const std::string& method, const std::string& score, int a,
                      std::size_t n, std::size_t k_u,
                      const std::string& estimand = "y(a)") const {
        for (const auto& r : rows)
            if (r.method == method && r.score == score && r.a == a && r.n == n &&
                r.k_u == k_u && r.estimand == estimand)
                return &r;
        return nullptr;
    }
};

namespace detail_sim {

struct CellKey {
    int method, score, estimand, a;
    bool operator<(const CellKey& o) const {
        return std::tie(method, score, estimand, a) <
               std::tie(o.method, o.score, o.estimand, o.a);
    }
};

struct CellAgg {
    std::vector<double> rep_coverage;
    std::vector<double> rep_length;  // finite-interval reps only
    std::size_t failures = 0;
    std::size_t infinite_intervals = 0;
    std::size_t empty_intervals = 0;
};

}  // namespace detail_sim

// Runs `fn(rep_index)` over a small worker pool; results must be written to
// per-index slots so aggregation stays order-independent.
inline void parallel_for(std::size_t tasks, std::size_t workers,
                         const std::function<void(std::size_t)>& fn) {
    workers = std::max<std::size_t>(1, std::min(workers, tasks));
    if (workers == 1) {
        for (std::size_t i = 0; i < tasks; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w)
        pool.emplace_back([&] {
            for (;;) {
                const std::size_t i = next.fetch_add(1);
                if (i >= tasks) return;
                fn(i);
            }
        });
    for (auto& th : pool) th.join();
}

inline McResult aggregate_replications(
    const ScenarioConfig& sc, const std::vector<std::vector<RepOutcome>>& reps) {
    using detail_sim::CellAgg;
    using detail_sim::CellKey;
    std::map<CellKey, CellAgg> cells;

    auto key_of = [](const RepOutcome& r) {
        return CellKey{static_cast<int>(r.method), static_cast<int>(r.score),
                       static_cast<int>(r.estimand), r.a};
    };

    for (const auto& rep : reps) {
        // Pool arms within a replication for the a = -1 rows.
        std::map<CellKey, RepOutcome> pooled;
        for (const auto& r : rep) {
            auto& cell = cells[key_of(r)];
            if (r.failed) {
                cell.failures++;
            } else if (r.evaluated > 0) {
                cell.rep_coverage.push_back(static_cast<double>(r.covered) /
                                            static_cast<double>(r.evaluated));
                if (r.finite_count > 0)
                    cell.rep_length.push_back(r.length_sum /
                                              static_cast<double>(r.finite_count));
                cell.infinite_intervals += r.infinite_count;
                cell.empty_intervals += r.empty_count;
            }
            CellKey pk = key_of(r);
            pk.a = -1;
            auto& agg = pooled[pk];
            agg.method = r.method;
            agg.score = r.score;
            agg.estimand = r.estimand;
            agg.a = -1;
            agg.failed = agg.failed || r.failed;
            agg.covered += r.covered;
            agg.evaluated += r.evaluated;
            agg.length_sum += r.length_sum;
            agg.finite_count += r.finite_count;
            agg.infinite_count += r.infinite_count;
            agg.empty_count += r.empty_count;
        }
        for (const auto& [pk, r] : pooled) {
            auto& cell = cells[pk];
            if (r.failed) {
                cell.failures++;
            } else if (r.evaluated > 0) {
                cell.rep_coverage.push_back(static_cast<double>(r.covered) /
                                            static_cast<double>(r.evaluated));
                if (r.finite_count > 0)
                    cell.rep_length.push_back(r.length_sum /
                                              static_cast<double>(r.finite_count));
                cell.infinite_intervals += r.infinite_count;
                cell.empty_intervals += r.empty_count;
            }
        }
    }

    McResult res;
    for (const auto& [key, cell] : cells) {
        McRow row;
        row.n = sc.dgp.n;
        row.k_u = sc.dgp.k_u;
        row.k_v = sc.dgp.k_v;
        row.p_v = sc.dgp.p_v;
        row.p_u = sc.dgp.p_u;
        row.source_rate = sc.dgp.source_rate;
        row.alpha = sc.alpha;
        row.method = method_name(static_cast<RhatMethod>(key.method));
        row.score = score_name(static_cast<ScoreType>(key.score));
        row.estimand = static_cast<Estimand>(key.estimand) == Estimand::ite ? "ite"
                                                                            : "y(a)";
        row.a = key.a;
        row.reps = cell.rep_coverage.size();
        row.failures = cell.failures;
        row.infinite_intervals = cell.infinite_intervals;
        row.empty_intervals = cell.empty_intervals;
        if (!cell.rep_coverage.empty()) {
            row.coverage = mean(cell.rep_coverage);
            row.coverage_se = std::sqrt(variance(cell.rep_coverage) /
                                        static_cast<double>(cell.rep_coverage.size()));
        }
        if (!cell.rep_length.empty()) row.avg_length = mean(cell.rep_length);
        res.rows.push_back(row);
    }
    return res;
}

// reps independent replications of one scenario; per-replication seeds are
// derived from the master seed so results are invariant to worker count.
inline McResult run_scenario(const ScenarioConfig& sc, std::size_t reps,
                             std::uint64_t master_seed, std::size_t workers = 1) {
    std::vector<std::vector<RepOutcome>> all(reps);
    parallel_for(reps, workers, [&](std::size_t r) {
        all[r] = run_replication(sc, derive_seed(master_seed, r));
    });
    return aggregate_replications(sc, all);
}

inline McResult run_experiment(const std::vector<ScenarioConfig>& grid,
                               std::size_t reps, std::uint64_t master_seed,
                               std::size_t workers = 1) {
    McResult res;
    for (std::size_t s = 0; s < grid.size(); ++s) {
        auto part = run_scenario(grid[s], reps,
                                 derive_seed(master_seed, 1000003ULL * (s + 1)),
                                 workers);
        res.rows.insert(res.rows.end(), part.rows.begin(), part.rows.end());
    }
    return res;
}

// ---------------------------------------------------------------------------
// Nuisance-corruption harness for the multiple-robustness checks: each of
// (q, m, g, kappa) is either the closed-form oracle or a deliberately wrong
// constant. The initial pin always comes from oracle-weighted conformal so
// the exercise isolates the estimating equation itself.
// ---------------------------------------------------------------------------

struct DrCorruption {
    std::optional<double> m_const;      // wrong constant for m, else oracle
    std::optional<double> kappa_const;  // wrong constant for kappa
    std::optional<double> q_const;      // wrong constant for q
    std::optional<double> g_const;      // wrong constant for g
};

struct DrOutcome {
    std::size_t covered = 0;
    std::size_t evaluated = 0;
    bool failed = false;
};

inline DrOutcome dr_replication(const DgpConfig& cfg, double alpha,
                                const DrCorruption& corrupt, std::uint64_t seed) {
    DrOutcome out;
    try {
        const auto data = generate(cfg, derive_seed(seed, 1));
        const auto& t = data.table;
        const auto splits = make_splits(t, 0.5, 0.5, derive_seed(seed, 2));
        const DgpOracle oracle(cfg);
        const auto targets = select_rows(t, RowFilter::target_only());

        for (int a : {0, 1}) {
            ConformityScorer scorer;
            scorer.variant = ConformityScorer::Variant::abs_residual;
            scorer.a = a;
            scorer.eta = oracle.eta();

            const auto g_true = oracle.g(a);
            const auto kappa_true = oracle.kappa();
            const auto init =
                rhat_init_on_fold(t, splits.train1, scorer, a, alpha, *g_true,
                                  *kappa_true);

            NuisanceBundle bundle;
            bundle.a = a;
            bundle.r_pin = init.value;
            bundle.q = corrupt.q_const
                           ? make_constant(*corrupt.q_const, cfg.p_v + cfg.p_u)
                           : oracle.q_model(scorer, init.value);
            bundle.m = corrupt.m_const ? make_constant(*corrupt.m_const, cfg.p_v)
                                       : oracle.m_model(scorer, init.value);
            bundle.g = corrupt.g_const
                           ? make_constant(*corrupt.g_const, cfg.p_v + cfg.p_u)
                           : g_true;
            bundle.kappa = corrupt.kappa_const
                               ? make_constant(*corrupt.kappa_const, cfg.p_v)
                               : kappa_true;

            const auto est =
                solve_dml_on_cal(t, splits.cal, bundle, scorer, alpha, RhatMethod::dml);
            for (std::size_t i : targets) {
                const auto iv = invert(scorer, t.v_row(i), est);
                out.evaluated++;
                out.covered += iv.contains(data.counterfactual(i, a)) ? 1 : 0;
            }
        }
    } catch (const std::exception&) {
        out.failed = true;
    }
    return out;
}

}  // namespace rtcp
