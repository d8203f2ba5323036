#pragma once

// End-to-end fitting for the CLI: splits, nuisances, scorers and quantile
// estimates for every requested (treatment, score, method) combination, and
// a versioned single-file JSON bundle with an embedded schema hash so a
// saved fit can only be applied to compatible prediction inputs.

#include <fstream>
#include <optional>

#include "rtcp/config.hpp"
#include "rtcp/data.hpp"
#include "rtcp/intervals.hpp"
#include "rtcp/nuisance.hpp"
#include "rtcp/quantile_estimators.hpp"
#include "rtcp/scores.hpp"
#include "rtcp/serialize.hpp"

namespace rtcp {

struct PipelineOptions {
    double alpha = 0.1;
    std::vector<RhatMethod> methods{RhatMethod::dml, RhatMethod::weighted};
    std::vector<ScoreType> scores{ScoreType::abs_residual, ScoreType::cqr};
    LearnerSpec classifier_spec = LearnerSpec::quick_linear(1e-3);
    LearnerSpec regressor_spec = LearnerSpec::quick_linear(1e-3);
    LearnerSpec quantile_spec = LearnerSpec::quick_linear();
    TrimBounds trim;
    double train_frac = 0.5, cal_frac = 0.5;
    std::size_t plugin_grid = 50;
    std::uint64_t seed = 1;
    std::vector<int> requested_levels;  // empty: every level found in the data
};

struct FittedScore {
    ScoreType score = ScoreType::abs_residual;
    ConformityScorer scorer;
    std::optional<ConformityScorer> naive_scorer;
    std::optional<NuisanceBundle> dml_bundle;
    std::optional<NuisanceBundle> naive_bundle;
    std::vector<QuantileEstimate> estimates;  // aligned with options.methods

    const QuantileEstimate* estimate(RhatMethod m) const {
        for (const auto& e : estimates)
            if (e.method == m) return &e;
        return nullptr;
    }
};

struct FittedArm {
    int a = 0;
    LearnerModel g;
    LearnerModel g_naive;  // only when the comparator was requested
    std::vector<FittedScore> scores;

    const FittedScore* find(ScoreType s) const {
        for (const auto& fs : scores)
            if (fs.score == s) return &fs;
        return nullptr;
    }
};

struct PipelineFit {
    PipelineOptions options;
    std::size_t p_v = 0, p_u = 0;
    SplitAssignment splits;
    LearnerModel kappa;
    std::vector<FittedArm> arms;

    const FittedArm* arm(int a) const {
        for (const auto& ar : arms)
            if (ar.a == a) return &ar;
        return nullptr;
    }
};

inline PipelineFit fit_pipeline(const ObservationTable& t,
                                const PipelineOptions& opts) {
    if (!(opts.alpha > 0.0 && opts.alpha < 1.0))
        throw ConfigError("alpha must lie in (0,1)");
    PipelineFit fit;
    fit.options = opts;
    fit.p_v = t.p_v();
    fit.p_u = t.p_u();
    fit.splits = make_splits(t, opts.train_frac, opts.cal_frac, opts.seed);

    const auto train_rows = fit.splits.train_all();
    const bool want_naive =
        std::find(opts.methods.begin(), opts.methods.end(), RhatMethod::naive_dml) !=
        opts.methods.end();

    // the stratified split gives the training fold both populations, which
    // the source-membership fit needs
    fit.kappa = fit_kappa(t, train_rows, opts.classifier_spec, opts.trim);

    auto levels = t.treatment_levels();
    if (!opts.requested_levels.empty()) {
        for (int want : opts.requested_levels)
            if (std::find(levels.begin(), levels.end(), want) == levels.end())
                throw DataError("treatment level " + std::to_string(want) +
                                " not present in the data");
        levels = opts.requested_levels;
    }

    for (int a : levels) {
        FittedArm arm;
        arm.a = a;
        arm.g = fit_g(t, train_rows, a, opts.classifier_spec, opts.trim);
        if (want_naive)
            arm.g_naive = fit_g_on_v(t, train_rows, a, opts.classifier_spec, opts.trim);

        for (ScoreType score_type : opts.scores) {
            FittedScore fs;
            fs.score = score_type;
            if (score_type == ScoreType::abs_residual) {
                auto mean = fit_two_stage_mean(t, train_rows, a, opts.regressor_spec,
                                               opts.regressor_spec);
                fs.scorer = build_abs_scorer(mean, a);
                if (want_naive) {
                    std::vector<std::size_t> treated;
                    for (std::size_t i : train_rows)
                        if (t.is_source(i) && t.a_value(i) == a) treated.push_back(i);
                    if (treated.empty())
                        throw DataError("no source rows with treatment " +
                                        std::to_string(a));
                    Matrix v = build_v(t, treated);
                    std::vector<double> yv(treated.size());
                    for (std::size_t k = 0; k < treated.size(); ++k)
                        yv[k] = t.y_value(treated[k]);
                    ConformityScorer naive;
                    naive.variant = ConformityScorer::Variant::abs_residual;
                    naive.a = a;
                    naive.eta = fit_regressor(v, yv, nullptr, opts.regressor_spec);
                    fs.naive_scorer = std::move(naive);
                }
            } else {
                fs.scorer = build_cqr_scorer(t, train_rows, a, opts.alpha, *arm.g,
                                             *fit.kappa, opts.quantile_spec);
                if (want_naive)
                    fs.naive_scorer = build_cqr_scorer_unweighted(
                        t, train_rows, a, opts.alpha, opts.quantile_spec);
            }

            for (RhatMethod method : opts.methods) {
                switch (method) {
                    case RhatMethod::weighted: {
                        std::vector<double> scv, wv;
                        for (std::size_t i : fit.splits.cal) {
                            if (!t.is_source(i) || t.a_value(i) != a) continue;
                            scv.push_back(fs.scorer.score(t.y_value(i), t.v_row(i)));
                            wv.push_back(compute_weight(t, i, a, *arm.g, *fit.kappa));
                        }
                        fs.estimates.push_back(weighted_rhat(scv, wv, opts.alpha, a));
                        break;
                    }
                    case RhatMethod::plugin: {
                        std::vector<double> all_scores;
                        for (std::size_t i = 0; i < t.n(); ++i)
                            if (t.is_source(i) && t.a_value(i) == a)
                                all_scores.push_back(
                                    fs.scorer.score(t.y_value(i), t.v_row(i)));
                        auto grid = make_plugin_grid(all_scores, opts.plugin_grid);
                        fs.estimates.push_back(plugin_rhat(t, a, opts.alpha, fs.scorer,
                                                           opts.classifier_spec,
                                                           opts.regressor_spec, grid));
                        break;
                    }
                    case RhatMethod::dml: {
                        NuisanceBundle bundle;
                        fs.estimates.push_back(
                            dml_rhat(t, fit.splits, a, opts.alpha, fs.scorer, arm.g,
                                     fit.kappa, opts.classifier_spec,
                                     opts.regressor_spec, &bundle));
                        fs.dml_bundle = std::move(bundle);
                        break;
                    }
                    case RhatMethod::naive_dml: {
                        NuisanceBundle bundle;
                        fs.estimates.push_back(naive_dml_rhat(
                            t, fit.splits, a, opts.alpha, *fs.naive_scorer, arm.g_naive,
                            fit.kappa, opts.classifier_spec, &bundle));
                        fs.naive_bundle = std::move(bundle);
                        break;
                    }
                }
            }
            arm.scores.push_back(std::move(fs));
        }
        fit.arms.push_back(std::move(arm));
    }
    return fit;
}

// Intervals for target rows, one per (row, treatment, method); the naive
// comparator inverts its own V-only scorer.
inline std::vector<PredictionRow> predict_with_fit(const PipelineFit& fit,
                                                   const ObservationTable& targets,
                                                   std::span<const std::size_t> rows) {
    if (targets.p_v() != fit.p_v)
        throw DataError("prediction data has " + std::to_string(targets.p_v()) +
                        " v columns, bundle expects " + std::to_string(fit.p_v));
    std::vector<PredictionRow> out;
    for (const auto& arm : fit.arms) {
        for (const auto& fs : arm.scores) {
            for (const auto& est : fs.estimates) {
                const ConformityScorer& sc = est.method == RhatMethod::naive_dml
                                                 ? *fs.naive_scorer
                                                 : fs.scorer;
                for (std::size_t i : rows) {
                    PredictionRow row;
                    row.row_id = i;
                    row.a = arm.a;
                    row.method = est.method;
                    row.interval = invert(sc, targets.v_row(i), est);
                    out.push_back(row);
                }
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Bundle serialization
// ---------------------------------------------------------------------------

inline constexpr int kBundleVersion = 1;

inline std::string schema_hash(const ColumnSchema& schema, std::size_t p_v,
                               std::size_t p_u) {
    std::string blob = schema.outcome + "|" + schema.treatment + "|" + schema.source;
    for (const auto& c : schema.v_cols) blob += "|v:" + c;
    for (const auto& c : schema.u_cols) blob += "|u:" + c;
    blob += "|" + std::to_string(p_v) + "|" + std::to_string(p_u);
    return fnv1a_hex(blob);
}

namespace detail_pipe {

inline std::string fmt17(double x) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", x);
    return buf;
}

inline double parse17(const std::string& s) { return std::strtod(s.c_str(), nullptr); }

inline json scorer_to_json(const ConformityScorer& s) {
    json j;
    j["variant"] = s.variant == ConformityScorer::Variant::abs_residual ? "abs" : "cqr";
    j["a"] = s.a;
    j["cqr_alpha"] = s.cqr_alpha;
    if (s.eta) j["eta"] = learner_to_json(*s.eta);
    if (s.q_lo) j["q_lo"] = learner_to_json(*s.q_lo);
    if (s.q_hi) j["q_hi"] = learner_to_json(*s.q_hi);
    return j;
}

inline ConformityScorer scorer_from_json(const json& j) {
    ConformityScorer s;
    s.variant = j.at("variant") == "abs" ? ConformityScorer::Variant::abs_residual
                                         : ConformityScorer::Variant::cqr;
    s.a = j.at("a").get<int>();
    s.cqr_alpha = j.at("cqr_alpha").get<double>();
    if (j.contains("eta")) s.eta = learner_from_json(j.at("eta"));
    if (j.contains("q_lo")) s.q_lo = learner_from_json(j.at("q_lo"));
    if (j.contains("q_hi")) s.q_hi = learner_from_json(j.at("q_hi"));
    return s;
}

inline json estimate_to_json(const QuantileEstimate& e) {
    json j;
    j["method"] = method_name(e.method);
    j["value"] = fmt17(e.value);  // strings carry +-inf losslessly
    j["alpha"] = e.alpha;
    j["a"] = e.a;
    j["ess"] = e.diag.ess;
    j["bracket"] = static_cast<int>(e.diag.bracket);
    if (e.diag.r_init) j["r_init"] = fmt17(*e.diag.r_init);
    j["plugin_nonmonotone"] = e.diag.plugin_nonmonotone;
    j["q_constant_fallback"] = e.diag.q_constant_fallback;
    return j;
}

inline RhatMethod method_from_name(const std::string& name) {
    if (name == "weighted") return RhatMethod::weighted;
    if (name == "plugin") return RhatMethod::plugin;
    if (name == "dml") return RhatMethod::dml;
    if (name == "naive-dml") return RhatMethod::naive_dml;
    throw ConfigError("unknown method '" + name + "'");
}

inline QuantileEstimate estimate_from_json(const json& j) {
    QuantileEstimate e;
    e.method = method_from_name(j.at("method").get<std::string>());
    e.value = parse17(j.at("value").get<std::string>());
    e.alpha = j.at("alpha").get<double>();
    e.a = j.at("a").get<int>();
    e.diag.ess = j.value("ess", 0.0);
    e.diag.bracket = static_cast<QuantileEstimate::Bracket>(j.value("bracket", 0));
    if (j.contains("r_init"))
        e.diag.r_init = parse17(j.at("r_init").get<std::string>());
    e.diag.plugin_nonmonotone = j.value("plugin_nonmonotone", false);
    e.diag.q_constant_fallback = j.value("q_constant_fallback", false);
    return e;
}

inline json bundle_nuisances_to_json(const NuisanceBundle& b) {
    json j;
    j["a"] = b.a;
    j["r_pin"] = fmt17(b.r_pin);
    j["q"] = learner_to_json(*b.q);
    j["m"] = learner_to_json(*b.m);
    return j;
}

}  // namespace detail_pipe

inline json pipeline_to_json(const PipelineFit& fit, const ColumnSchema& schema) {
    using detail_pipe::fmt17;
    json j;
    j["format"] = "rtcp-bundle";
    j["version"] = kBundleVersion;
    j["schema"] = {{"outcome", schema.outcome},
                   {"treatment", schema.treatment},
                   {"source", schema.source},
                   {"v", schema.v_cols},
                   {"u", schema.u_cols}};
    j["schema_hash"] = schema_hash(schema, fit.p_v, fit.p_u);
    j["p_v"] = fit.p_v;
    j["p_u"] = fit.p_u;
    j["alpha"] = fit.options.alpha;
    j["trim"] = {fit.options.trim.lo, fit.options.trim.hi};
    j["seed"] = fit.options.seed;
    j["splits"] = {{"train1", fit.splits.train1},
                   {"train2", fit.splits.train2},
                   {"cal", fit.splits.cal},
                   {"universe", fit.splits.universe}};
    j["kappa"] = learner_to_json(*fit.kappa);
    json arms = json::array();
    for (const auto& arm : fit.arms) {
        json aj;
        aj["a"] = arm.a;
        aj["g"] = learner_to_json(*arm.g);
        if (arm.g_naive) aj["g_naive"] = learner_to_json(*arm.g_naive);
        json scores = json::array();
        for (const auto& fs : arm.scores) {
            json sj;
            sj["score"] = score_name(fs.score);
            sj["scorer"] = detail_pipe::scorer_to_json(fs.scorer);
            if (fs.naive_scorer)
                sj["naive_scorer"] = detail_pipe::scorer_to_json(*fs.naive_scorer);
            if (fs.dml_bundle)
                sj["dml_nuisances"] = detail_pipe::bundle_nuisances_to_json(*fs.dml_bundle);
            if (fs.naive_bundle)
                sj["naive_nuisances"] =
                    detail_pipe::bundle_nuisances_to_json(*fs.naive_bundle);
            json es = json::array();
            for (const auto& e : fs.estimates)
                es.push_back(detail_pipe::estimate_to_json(e));
            sj["estimates"] = es;
            scores.push_back(sj);
        }
        aj["scores"] = scores;
        arms.push_back(aj);
    }
    j["arms"] = arms;
    return j;
}

inline PipelineFit pipeline_from_json(const json& j, const ColumnSchema& schema) {
    if (j.value("format", "") != "rtcp-bundle")
        throw DataError("not an rtcp model bundle");
    if (j.at("version").get<int>() != kBundleVersion)
        throw DataError("unsupported bundle version " +
                        std::to_string(j.at("version").get<int>()));
    PipelineFit fit;
    fit.p_v = j.at("p_v").get<std::size_t>();
    fit.p_u = j.at("p_u").get<std::size_t>();
    if (j.at("schema_hash").get<std::string>() != schema_hash(schema, fit.p_v, fit.p_u))
        throw DataError("bundle schema hash does not match the supplied schema");
    fit.options.alpha = j.at("alpha").get<double>();
    fit.options.trim.lo = j.at("trim").at(0).get<double>();
    fit.options.trim.hi = j.at("trim").at(1).get<double>();
    fit.options.seed = j.at("seed").get<std::uint64_t>();
    fit.splits.train1 = j.at("splits").at("train1").get<std::vector<std::size_t>>();
    fit.splits.train2 = j.at("splits").at("train2").get<std::vector<std::size_t>>();
    fit.splits.cal = j.at("splits").at("cal").get<std::vector<std::size_t>>();
    fit.splits.universe = j.at("splits").at("universe").get<std::size_t>();
    fit.kappa = learner_from_json(j.at("kappa"));
    for (const auto& aj : j.at("arms")) {
        FittedArm arm;
        arm.a = aj.at("a").get<int>();
        arm.g = learner_from_json(aj.at("g"));
        if (aj.contains("g_naive")) arm.g_naive = learner_from_json(aj.at("g_naive"));
        for (const auto& sj : aj.at("scores")) {
            FittedScore fs;
            fs.score = sj.at("score") == "abs" ? ScoreType::abs_residual : ScoreType::cqr;
            fs.scorer = detail_pipe::scorer_from_json(sj.at("scorer"));
            if (sj.contains("naive_scorer"))
                fs.naive_scorer = detail_pipe::scorer_from_json(sj.at("naive_scorer"));
            for (const auto& ej : sj.at("estimates"))
                fs.estimates.push_back(detail_pipe::estimate_from_json(ej));
            arm.scores.push_back(std::move(fs));
        }
        fit.arms.push_back(std::move(arm));
    }
    return fit;
}

inline void save_bundle(const std::string& path, const PipelineFit& fit,
                        const ColumnSchema& schema) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write bundle '" + path + "'");
    out << pipeline_to_json(fit, schema).dump(1) << '\n';
}

inline PipelineFit load_bundle(const std::string& path, const ColumnSchema& schema) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open bundle '" + path + "'");
    json j;
    in >> j;
    return pipeline_from_json(j, schema);
}

}  // namespace rtcp
