// rtcp: conformal prediction intervals for counterfactual outcomes when part
// of the confounder set is unavailable in the target population.
//
// Subcommands:
//   simulate  Monte Carlo coverage/length experiments on the synthetic DGP
//   fit       train scorers, nuisances and score-quantile estimates on a CSV
//   predict   emit target-population intervals from a saved bundle
//   evaluate  coverage of an intervals CSV against a truth CSV

#include <CLI11.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "rtcp/config.hpp"
#include "rtcp/data.hpp"
#include "rtcp/pipeline.hpp"
#include "rtcp/reporting.hpp"
#include "rtcp/simulation.hpp"

namespace {

using namespace rtcp;

constexpr const char* kVersion = "0.1.0";

ColumnSchema schema_from_config(const Config& cfg) {
    ColumnSchema s;
    s.outcome = cfg.get_str("data", "outcome", "y");
    s.treatment = cfg.get_str("data", "treatment", "a");
    s.source = cfg.get_str("data", "source", "s");
    s.v_cols = cfg.get_list("data", "v", {"v*"});
    s.u_cols = cfg.get_list("data", "u", {"u*"});
    return s;
}

// Expand wildcard column selectors against the file's actual header so the
// saved bundle pins concrete column names.
ColumnSchema resolve_schema(const std::string& csv_path, const ColumnSchema& schema) {
    std::ifstream in(csv_path);
    if (!in) throw DataError("cannot open '" + csv_path + "'");
    std::string line;
    if (!std::getline(in, line)) throw DataError(csv_path + ": empty file");
    auto header = detail::split_csv_line(line);
    for (auto& h : header) h = detail::trim_ws(h);
    ColumnSchema out = schema;
    out.v_cols = detail::expand_cols(schema.v_cols, header);
    out.u_cols = detail::expand_cols(schema.u_cols, header);
    return out;
}

LearnerKind kind_from_name(const Config& cfg, const std::string& key,
                           const std::string& name) {
    if (name == "linear") return LearnerKind::linear;
    if (name == "gbt") return LearnerKind::gbt;
    if (name == "stack") return LearnerKind::stack;
    throw ConfigError(cfg.origin() + ":" + std::to_string(cfg.line_of("learners", key)) +
                      ": unknown learner kind '" + name + "'");
}

LearnerSpec learner_spec_from_config(const Config& cfg, const std::string& role) {
    LearnerSpec spec;
    spec.kind = kind_from_name(cfg, role, cfg.get_str("learners", role, "linear"));
    spec.lambda_rel = cfg.get_double("learners", "lambda_rel", 1e-3);
    spec.cv_folds = static_cast<int>(cfg.get_int("learners", "cv_folds", 5));
    spec.gbt.trees = static_cast<int>(cfg.get_int("learners", "gbt_trees", 200));
    spec.gbt.depth = static_cast<int>(cfg.get_int("learners", "gbt_depth", 3));
    spec.gbt.learning_rate = cfg.get_double("learners", "gbt_learning_rate", 0.1);
    spec.gbt.subsample = cfg.get_double("learners", "gbt_subsample", 0.8);
    if (spec.kind == LearnerKind::stack) {
        for (const auto& base : cfg.get_list("learners", "stack_bases",
                                             {"linear", "gbt"})) {
            LearnerSpec b = spec;
            b.kind = kind_from_name(cfg, "stack_bases", base);
            b.bases.clear();
            spec.bases.push_back(b);
        }
        spec.stack_folds = static_cast<int>(cfg.get_int("learners", "stack_folds", 5));
    }
    return spec;
}

std::vector<RhatMethod> methods_from_config(const Config& cfg) {
    std::vector<RhatMethod> out;
    for (const auto& name : cfg.get_list("conformal", "methods", {"dml", "weighted"})) {
        if (name == "weighted")
            out.push_back(RhatMethod::weighted);
        else if (name == "plugin")
            out.push_back(RhatMethod::plugin);
        else if (name == "dml")
            out.push_back(RhatMethod::dml);
        else if (name == "naive-dml")
            out.push_back(RhatMethod::naive_dml);
        else
            throw ConfigError(cfg.origin() + ":" +
                              std::to_string(cfg.line_of("conformal", "methods")) +
                              ": unknown method '" + name + "'");
    }
    if (out.empty()) throw ConfigError("conformal.methods is empty");
    return out;
}

std::vector<ScoreType> scores_from_config(const Config& cfg) {
    std::vector<ScoreType> out;
    for (const auto& name : cfg.get_list("conformal", "scores", {"abs", "cqr"})) {
        if (name == "abs")
            out.push_back(ScoreType::abs_residual);
        else if (name == "cqr")
            out.push_back(ScoreType::cqr);
        else
            throw ConfigError(cfg.origin() + ":" +
                              std::to_string(cfg.line_of("conformal", "scores")) +
                              ": unknown score '" + name + "'");
    }
    if (out.empty()) throw ConfigError("conformal.scores is empty");
    return out;
}

PipelineOptions pipeline_options_from_config(const Config& cfg) {
    PipelineOptions opts;
    opts.alpha = cfg.get_double("conformal", "alpha", 0.1);
    if (!(opts.alpha > 0.0 && opts.alpha < 1.0))
        throw ConfigError(cfg.origin() + ": conformal.alpha must lie in (0,1)");
    opts.methods = methods_from_config(cfg);
    opts.scores = scores_from_config(cfg);
    opts.classifier_spec = learner_spec_from_config(cfg, "classifier");
    opts.regressor_spec = learner_spec_from_config(cfg, "regressor");
    opts.quantile_spec = learner_spec_from_config(cfg, "quantile");
    opts.trim.lo = cfg.get_double("conformal", "trim_lo", 0.025);
    opts.trim.hi = cfg.get_double("conformal", "trim_hi", 0.975);
    opts.train_frac = cfg.get_double("conformal", "train_frac", 0.5);
    opts.cal_frac = cfg.get_double("conformal", "cal_frac", 0.5);
    opts.plugin_grid =
        static_cast<std::size_t>(cfg.get_int("conformal", "plugin_grid", 50));
    opts.seed = static_cast<std::uint64_t>(cfg.get_int("conformal", "seed", 1));
    for (double lv : cfg.get_double_list("conformal", "treatments", {}))
        opts.requested_levels.push_back(static_cast<int>(lv));
    return opts;
}

void write_manifest(const std::string& path, const std::string& command,
                    const Config& cfg, std::uint64_t seed,
                    const std::vector<std::string>& outputs) {
    json j;
    j["tool"] = "rtcp";
    j["version"] = kVersion;
    j["command"] = command;
    j["config"] = cfg.origin();
    j["config_hash"] = fnv1a_hex(cfg.canonical());
    j["seed"] = seed;
    j["outputs"] = outputs;
    j["created_unix"] = std::chrono::duration_cast<std::chrono::seconds>(
                            std::chrono::system_clock::now().time_since_epoch())
                            .count();
    std::ofstream out(path);
    if (!out) throw DataError("cannot write manifest '" + path + "'");
    out << j.dump(1) << '\n';
}

// ---------------------------------------------------------------------------

int cmd_simulate(const Config& cfg, const std::string& out_override) {
    ScenarioConfig base;
    base.alpha = cfg.get_double("conformal", "alpha", 0.1);
    base.methods = methods_from_config(cfg);
    base.scores = scores_from_config(cfg);
    base.classifier_spec = learner_spec_from_config(cfg, "classifier");
    base.regressor_spec = learner_spec_from_config(cfg, "regressor");
    base.quantile_spec = learner_spec_from_config(cfg, "quantile");
    base.trim.lo = cfg.get_double("conformal", "trim_lo", 0.025);
    base.trim.hi = cfg.get_double("conformal", "trim_hi", 0.975);
    base.train_frac = cfg.get_double("conformal", "train_frac", 0.5);
    base.cal_frac = cfg.get_double("conformal", "cal_frac", 0.5);
    base.plugin_grid =
        static_cast<std::size_t>(cfg.get_int("conformal", "plugin_grid", 50));
    base.oracle_nuisances = cfg.get_bool("simulate", "oracle", false);
    base.ite = cfg.get_bool("simulate", "ite", false);

    base.dgp.p_v = static_cast<std::size_t>(cfg.get_int("simulate", "p_v", 15));
    base.dgp.p_u = static_cast<std::size_t>(cfg.get_int("simulate", "p_u", 15));
    base.dgp.k_v = static_cast<std::size_t>(cfg.get_int("simulate", "k_v", 5));
    base.dgp.source_rate = cfg.get_double("simulate", "source_rate", 0.9);
    const std::string noise = cfg.get_str("simulate", "noise", "stddev");
    if (noise == "stddev")
        base.dgp.noise = NoiseReading::stddev;
    else if (noise == "variance")
        base.dgp.noise = NoiseReading::variance;
    else
        throw ConfigError(cfg.origin() + ":" +
                          std::to_string(cfg.line_of("simulate", "noise")) +
                          ": noise must be stddev or variance");

    const auto n_list = cfg.get_double_list("simulate", "n", {5000});
    const auto ku_list = cfg.get_double_list("simulate", "k_u", {10});
    const auto reps = static_cast<std::size_t>(cfg.get_int("simulate", "reps", 200));
    const auto seed =
        static_cast<std::uint64_t>(cfg.get_int("simulate", "seed", 20240901));
    const auto workers =
        static_cast<std::size_t>(cfg.get_int("simulate", "workers", 1));

    base.dgp.check();
    std::cerr << "calibrating source-rate intercept..." << std::endl;
    DgpConfig cal_cfg = base.dgp;
    const double b = calibrate_intercept(cal_cfg);

    std::vector<ScenarioConfig> grid;
    for (double ku : ku_list)
        for (double n : n_list) {
            ScenarioConfig sc = base;
            sc.dgp.k_u = static_cast<std::size_t>(ku);
            sc.dgp.n = static_cast<std::size_t>(n);
            sc.dgp.intercept_b = b;
            sc.dgp.check();
            grid.push_back(sc);
        }

    std::cerr << "running " << grid.size() << " scenario(s) x " << reps
              << " replication(s)..." << std::endl;
    const auto res = run_experiment(grid, reps, seed, workers);

    const std::string out_path =
        !out_override.empty() ? out_override
                              : cfg.get_str("output", "results", "results.csv");
    std::ofstream out(out_path);
    if (!out) throw DataError("cannot write '" + out_path + "'");
    write_results_csv(out, res);
    std::cerr << "wrote " << out_path << std::endl;

    // Optional export of one generated dataset: the observed table for fit,
    // a v-only target file for predict, and the retained counterfactuals for
    // evaluate.
    const std::string data_path = cfg.get_str("output", "dataset", "");
    const std::string target_path = cfg.get_str("output", "target", "");
    const std::string truth_path = cfg.get_str("output", "truth", "");
    if (!data_path.empty() || !target_path.empty() || !truth_path.empty()) {
        auto d = generate(grid.front().dgp, derive_seed(seed, 0xda7aULL));
        if (!data_path.empty()) {
            emit_csv(d.table, data_path);
            std::cerr << "wrote " << data_path << std::endl;
        }
        const auto targets = select_rows(d.table, RowFilter::target_only());
        if (!target_path.empty()) {
            std::ofstream out(target_path);
            if (!out) throw DataError("cannot write '" + target_path + "'");
            out << "row_id";
            for (std::size_t j = 0; j < d.table.p_v(); ++j) out << ",v" << (j + 1);
            out << '\n';
            for (std::size_t i : targets) {
                out << i;
                for (double x : d.table.v_row(i)) out << ',' << detail_rep::fmt17(x);
                out << '\n';
            }
            std::cerr << "wrote " << target_path << std::endl;
        }
        if (!truth_path.empty()) {
            std::ofstream out(truth_path);
            if (!out) throw DataError("cannot write '" + truth_path + "'");
            out << "row_id,a,y_true\n";
            for (std::size_t i : targets) {
                out << i << ",0," << detail_rep::fmt17(d.y0[i]) << '\n';
                out << i << ",1," << detail_rep::fmt17(d.y1[i]) << '\n';
            }
            std::cerr << "wrote " << truth_path << std::endl;
        }
    }

    const std::string manifest = cfg.get_str("output", "manifest", "");
    if (!manifest.empty()) write_manifest(manifest, "simulate", cfg, seed, {out_path});
    return 0;
}

int cmd_fit(const Config& cfg, const std::string& data_path,
            const std::string& out_path) {
    const auto schema = resolve_schema(data_path, schema_from_config(cfg));
    const auto table = load_csv(data_path, schema);
    const auto opts = pipeline_options_from_config(cfg);
    const auto fit = fit_pipeline(table, opts);
    save_bundle(out_path, fit, schema);
    std::cerr << "wrote bundle " << out_path << std::endl;

    const std::string manifest = cfg.get_str("output", "manifest", "");
    if (!manifest.empty()) write_manifest(manifest, "fit", cfg, opts.seed, {out_path});
    return 0;
}

// Target CSV: the bundle's v columns plus an optional row_id column.
int cmd_predict(const std::string& bundle_path, const std::string& data_path,
                const std::string& out_path, const std::string& method_filter) {
    std::ifstream bin(bundle_path);
    if (!bin) throw DataError("cannot open bundle '" + bundle_path + "'");
    json bj;
    try {
        bin >> bj;
    } catch (const std::exception& e) {
        throw DataError("bundle '" + bundle_path + "': " + e.what());
    }
    ColumnSchema schema;
    schema.outcome = bj.at("schema").at("outcome").get<std::string>();
    schema.treatment = bj.at("schema").at("treatment").get<std::string>();
    schema.source = bj.at("schema").at("source").get<std::string>();
    schema.v_cols = bj.at("schema").at("v").get<std::vector<std::string>>();
    schema.u_cols = bj.at("schema").at("u").get<std::vector<std::string>>();
    const auto fit = pipeline_from_json(bj, schema);

    // read the v columns (and optional row_id) from the target file
    std::ifstream in(data_path);
    if (!in) throw DataError("cannot open '" + data_path + "'");
    std::string line;
    if (!std::getline(in, line)) throw DataError(data_path + ": empty file");
    auto header = detail::split_csv_line(line);
    for (auto& h : header) h = detail::trim_ws(h);
    std::vector<std::size_t> v_idx;
    for (const auto& name : schema.v_cols) {
        bool found = false;
        for (std::size_t j = 0; j < header.size(); ++j)
            if (header[j] == name) {
                v_idx.push_back(j);
                found = true;
                break;
            }
        if (!found) throw DataError(data_path + ": missing v column '" + name + "'");
    }
    std::ptrdiff_t id_idx = -1;
    for (std::size_t j = 0; j < header.size(); ++j)
        if (header[j] == "row_id") id_idx = static_cast<std::ptrdiff_t>(j);

    std::vector<double> vbuf;
    std::vector<std::size_t> ids;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (detail::trim_ws(line).empty()) continue;
        const auto cells = detail::split_csv_line(line);
        if (cells.size() != header.size())
            throw DataError(data_path + ":" + std::to_string(lineno) +
                            ": bad field count");
        for (std::size_t j : v_idx) {
            double x;
            if (!detail::parse_double(cells[j], x))
                throw DataError(data_path + ":" + std::to_string(lineno) +
                                ": non-numeric v value");
            vbuf.push_back(x);
        }
        ids.push_back(id_idx >= 0 ? static_cast<std::size_t>(std::stoull(
                                        detail::trim_ws(cells[static_cast<std::size_t>(
                                            id_idx)])))
                                  : ids.size());
    }
    const std::size_t n = ids.size();
    if (v_idx.size() != fit.p_v)
        throw DataError("prediction data has " + std::to_string(v_idx.size()) +
                        " v columns, bundle expects " + std::to_string(fit.p_v));

    Matrix v(n, fit.p_v);
    std::copy(vbuf.begin(), vbuf.end(), v.data().begin());
    std::vector<std::optional<double>> no_y(n);
    std::vector<std::optional<int>> no_a(n);
    ObservationTable targets(std::move(no_y), std::move(no_a), std::move(v),
                             Matrix(n, fit.p_u), std::vector<std::uint8_t>(n, 0));
    std::vector<std::size_t> rows(n);
    std::iota(rows.begin(), rows.end(), std::size_t{0});
    auto preds = predict_with_fit(fit, targets, rows);
    for (auto& p : preds) p.row_id = ids[p.row_id];
    if (!method_filter.empty()) {
        std::vector<PredictionRow> kept;
        for (auto& p : preds)
            if (method_name(p.method) == method_filter) kept.push_back(p);
        preds = std::move(kept);
        if (preds.empty())
            throw ConfigError("bundle holds no estimates for method '" +
                              method_filter + "'");
    }

    std::ofstream out(out_path);
    if (!out) throw DataError("cannot write '" + out_path + "'");
    write_predictions_csv(out, preds);
    std::cerr << "wrote " << preds.size() << " interval rows to " << out_path
              << std::endl;
    return 0;
}

int cmd_evaluate(const std::string& pred_path, const std::string& truth_path,
                 double alpha, const std::string& out_path) {
    std::ifstream pin(pred_path);
    if (!pin) throw DataError("cannot open '" + pred_path + "'");
    const auto preds = read_predictions_csv(pin, pred_path);
    std::ifstream tin(truth_path);
    if (!tin) throw DataError("cannot open '" + truth_path + "'");
    const auto truths = read_truth_csv(tin, truth_path);

    const auto rows = evaluate_coverage(preds, truths);
    if (!out_path.empty()) {
        std::ofstream out(out_path);
        if (!out) throw DataError("cannot write '" + out_path + "'");
        write_eval_csv(out, rows, alpha);
    }
    write_eval_csv(std::cout, rows, alpha);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"conformal prediction intervals for counterfactual outcomes "
                 "under runtime confounding"};
    app.set_version_flag("--version", kVersion);
    app.require_subcommand(1);

    std::string config_path, data_path, out_path, bundle_path, pred_path, truth_path,
        method_filter;
    std::vector<std::string> overrides;
    double eval_alpha = 0.1;

    auto* sim = app.add_subcommand("simulate", "run Monte Carlo experiments");
    sim->add_option("--config", config_path, "config file")->required();
    sim->add_option("--out", out_path, "results CSV (overrides config)");
    sim->add_option("--set", overrides, "override config keys (section.key=value)");

    auto* fit = app.add_subcommand("fit", "fit scorers and quantile estimates");
    fit->add_option("--config", config_path, "config file")->required();
    fit->add_option("--data", data_path, "input CSV")->required();
    fit->add_option("--out", out_path, "bundle file")->required();
    fit->add_option("--set", overrides, "override config keys (section.key=value)");

    auto* pred = app.add_subcommand("predict", "emit intervals for target rows");
    pred->add_option("--bundle", bundle_path, "saved bundle")->required();
    pred->add_option("--data", data_path, "target CSV (v columns + row_id)")
        ->required();
    pred->add_option("--out", out_path, "intervals CSV")->required();
    pred->add_option("--method", method_filter, "emit a single method only");

    auto* ev = app.add_subcommand("evaluate", "coverage against a truth CSV");
    ev->add_option("--pred", pred_path, "intervals CSV")->required();
    ev->add_option("--truth", truth_path, "truth CSV (row_id,a,y_true)")->required();
    ev->add_option("--alpha", eval_alpha, "nominal miscoverage");
    ev->add_option("--out", out_path, "summary CSV");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);
        app.exit(e);
        return 2;
    }

    try {
        if (app.got_subcommand(sim)) {
            auto cfg = Config::parse_file(config_path);
            for (const auto& ov : overrides) cfg.set_override(ov);
            return cmd_simulate(cfg, out_path);
        }
        if (app.got_subcommand(fit)) {
            auto cfg = Config::parse_file(config_path);
            for (const auto& ov : overrides) cfg.set_override(ov);
            return cmd_fit(cfg, data_path, out_path);
        }
        if (app.got_subcommand(pred))
            return cmd_predict(bundle_path, data_path, out_path, method_filter);
        if (app.got_subcommand(ev))
            return cmd_evaluate(pred_path, truth_path, eval_alpha, out_path);
    } catch (const rtcp::ConfigError& e) {
        std::cerr << "config error: " << e.what() << std::endl;
        return 2;
    } catch (const rtcp::DataError& e) {
        std::cerr << "data error: " << e.what() << std::endl;
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << std::endl;
        return 4;
    }
    return 0;
}
