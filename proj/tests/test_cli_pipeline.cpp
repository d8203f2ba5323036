#include "doctest.h"

#include <sstream>

#include "rtcp/pipeline.hpp"
#include "rtcp/reporting.hpp"
#include "rtcp/simulation.hpp"

using namespace rtcp;

namespace {

SimulatedData demo_data(std::size_t n, std::uint64_t seed) {
    DgpConfig c;
    c.n = n;
    c.k_u = 5;
    c.intercept_b = calibrate_intercept(c, 100000, 1e-4, 3);
    return generate(c, seed);
}

PipelineOptions demo_options() {
    PipelineOptions opts;
    opts.alpha = 0.1;
    opts.methods = {RhatMethod::dml, RhatMethod::weighted, RhatMethod::naive_dml};
    opts.scores = {ScoreType::abs_residual, ScoreType::cqr};
    opts.classifier_spec = LearnerSpec::quick_linear(1e-3);
    opts.regressor_spec = LearnerSpec::quick_linear(1e-3);
    opts.seed = 99;
    return opts;
}

}  // namespace

TEST_CASE("fit_pipeline produces estimates for every cell") {
    auto data = demo_data(2500, 11);
    auto fit = fit_pipeline(data.table, demo_options());
    REQUIRE(fit.arms.size() == 2);
    for (const auto& arm : fit.arms) {
        REQUIRE(arm.scores.size() == 2);
        for (const auto& fs : arm.scores) {
            CHECK(fs.estimates.size() == 3);
            CHECK(fs.estimate(RhatMethod::dml) != nullptr);
            CHECK(fs.estimate(RhatMethod::weighted) != nullptr);
            CHECK(fs.estimate(RhatMethod::naive_dml) != nullptr);
            CHECK(fs.naive_scorer.has_value());
            for (const auto& e : fs.estimates) CHECK(e.a == arm.a);
        }
    }
}

TEST_CASE("fit_pipeline honors requested treatment levels") {
    auto data = demo_data(1500, 13);
    auto opts = demo_options();
    opts.methods = {RhatMethod::weighted};
    opts.requested_levels = {0, 1, 7};
    CHECK_THROWS_WITH_AS(fit_pipeline(data.table, opts),
                         doctest::Contains("treatment level 7"), DataError);
}

TEST_CASE("bundle round-trip reproduces intervals exactly") {
    auto data = demo_data(2500, 17);
    auto fit = fit_pipeline(data.table, demo_options());

    ColumnSchema schema;
    schema.v_cols = {"v1", "v2"};  // names are opaque to the round trip
    schema.u_cols = {"u1"};
    auto j = pipeline_to_json(fit, schema);
    auto fit2 = pipeline_from_json(j, schema);

    const auto targets = select_rows(data.table, RowFilter::target_only());
    auto p1 = predict_with_fit(fit, data.table, targets);
    auto p2 = predict_with_fit(fit2, data.table, targets);
    REQUIRE(p1.size() == p2.size());
    REQUIRE(!p1.empty());
    for (std::size_t i = 0; i < p1.size(); ++i) {
        CHECK(p1[i].interval.lower == p2[i].interval.lower);  // bit-exact
        CHECK(p1[i].interval.upper == p2[i].interval.upper);
        CHECK(p1[i].interval.empty == p2[i].interval.empty);
        CHECK(p1[i].a == p2[i].a);
    }
}

TEST_CASE("bundle loading is version- and schema-checked") {
    auto data = demo_data(1500, 19);
    auto opts = demo_options();
    opts.methods = {RhatMethod::weighted};
    opts.scores = {ScoreType::abs_residual};
    auto fit = fit_pipeline(data.table, opts);

    ColumnSchema schema;
    schema.v_cols = {"v1"};
    auto j = pipeline_to_json(fit, schema);

    auto wrong_version = j;
    wrong_version["version"] = 999;
    CHECK_THROWS_WITH_AS(pipeline_from_json(wrong_version, schema),
                         doctest::Contains("version"), DataError);

    ColumnSchema other;
    other.v_cols = {"different"};
    CHECK_THROWS_WITH_AS(pipeline_from_json(j, other), doctest::Contains("schema"),
                         DataError);

    auto not_bundle = j;
    not_bundle["format"] = "zip";
    CHECK_THROWS_AS(pipeline_from_json(not_bundle, schema), DataError);
}

TEST_CASE("prediction csv round-trip and coverage evaluation") {
    auto data = demo_data(2000, 23);
    auto opts = demo_options();
    opts.methods = {RhatMethod::dml, RhatMethod::weighted};
    opts.scores = {ScoreType::abs_residual};
    auto fit = fit_pipeline(data.table, opts);

    const auto targets = select_rows(data.table, RowFilter::target_only());
    auto preds = predict_with_fit(fit, data.table, targets);

    std::ostringstream pcsv;
    write_predictions_csv(pcsv, preds);
    std::istringstream pin(pcsv.str());
    auto loaded = read_predictions_csv(pin, "preds.csv");
    REQUIRE(loaded.size() == preds.size());
    for (std::size_t i = 0; i < preds.size(); ++i) {
        CHECK(loaded[i].interval.lower == preds[i].interval.lower);
        CHECK(loaded[i].interval.upper == preds[i].interval.upper);
    }

    // truth file from the retained counterfactuals; all-covering and
    // empty-interval behaviors sit on top of the real rows
    std::ostringstream tcsv;
    tcsv << "row_id,a,y_true\n";
    for (std::size_t i : targets) {
        tcsv << i << ",0," << data.y0[i] << "\n";
        tcsv << i << ",1," << data.y1[i] << "\n";
    }
    std::istringstream tin(tcsv.str());
    auto truths = read_truth_csv(tin, "truth.csv");

    auto rows = evaluate_coverage(loaded, truths);
    bool saw_pooled = false;
    for (const auto& r : rows) {
        CHECK(r.coverage >= 0.0);
        CHECK(r.coverage <= 1.0);
        if (r.a == -1) {
            saw_pooled = true;
            // pooled n is the sum of the per-arm n
            std::size_t arm_n = 0;
            for (const auto& q : rows)
                if (q.method == r.method && q.a >= 0) arm_n += q.n;
            CHECK(r.n == arm_n);
        }
    }
    CHECK(saw_pooled);

    // an all-covering synthetic prediction set
    std::vector<LoadedPrediction> wide;
    for (const auto& tr : truths) {
        LoadedPrediction p;
        p.row_id = tr.row_id;
        p.a = tr.a;
        p.method = "wide";
        p.interval.lower = -kInf;
        p.interval.upper = kInf;
        wide.push_back(p);
    }
    auto wide_rows = evaluate_coverage(wide, truths);
    for (const auto& r : wide_rows) {
        CHECK(r.coverage == 1.0);
        CHECK(r.n_infinite == r.n);
    }

    // empty intervals never cover
    for (auto& p : wide) p.interval = PredictionInterval{0, 0, p.a, 0.1, true};
    auto empty_rows = evaluate_coverage(wide, truths);
    for (const auto& r : empty_rows) {
        CHECK(r.coverage == 0.0);
        CHECK(r.n_empty == r.n);
    }

    // id mismatch
    std::vector<TruthRow> wrong{{999999, 0, 0.0}};
    CHECK_THROWS_AS(evaluate_coverage(loaded, wrong), DataError);
}

TEST_CASE("results csv writer emits one line per row") {
    McResult res;
    McRow r;
    r.n = 1000;
    r.k_u = 10;
    r.method = "dml";
    r.score = "abs";
    r.a = -1;
    r.coverage = 0.901;
    res.rows.push_back(r);
    std::ostringstream out;
    write_results_csv(out, res);
    const auto text = out.str();
    CHECK(text.find("pooled") != std::string::npos);
    CHECK(text.find("0.901") != std::string::npos);
    CHECK(std::count(text.begin(), text.end(), '\n') == 2);
}
