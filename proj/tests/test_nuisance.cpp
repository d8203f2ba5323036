#include "doctest.h"

#include <random>

#include "rtcp/data.hpp"
#include "rtcp/nuisance.hpp"
#include "rtcp/scores.hpp"
#include "rtcp/simulation.hpp"

using namespace rtcp;

namespace {

std::vector<std::size_t> all_rows(const ObservationTable& t) {
    std::vector<std::size_t> r(t.n());
    std::iota(r.begin(), r.end(), std::size_t{0});
    return r;
}

DgpConfig small_dgp(std::size_t n, std::size_t k_u = 10) {
    DgpConfig c;
    c.n = n;
    c.k_u = k_u;
    c.intercept_b = calibrate_intercept(c, 200000, 1e-4, 99);
    return c;
}

}  // namespace

TEST_CASE("fit_g: no-signal propensity is about one half") {
    // A independent of X with P(A=1)=0.5
    const std::size_t n = 5000;
    std::mt19937_64 rng(21);
    std::normal_distribution<double> nd;
    std::uniform_real_distribution<double> ud;
    std::vector<std::optional<double>> y(n);
    std::vector<std::optional<int>> a(n);
    std::vector<std::uint8_t> s(n, 1);
    Matrix v(n, 2), u(n, 1);
    for (std::size_t i = 0; i < n; ++i) {
        v.at(i, 0) = nd(rng);
        v.at(i, 1) = nd(rng);
        u.at(i, 0) = nd(rng);
        a[i] = ud(rng) < 0.5 ? 1 : 0;
        y[i] = nd(rng);
    }
    ObservationTable t(y, a, v, u, s);
    auto g = fit_g(t, all_rows(t), 1, LearnerSpec::quick_linear(1e-2));
    double m = 0.0;
    for (std::size_t i = 0; i < 200; ++i) m += g->predict_one(detail_nuis::x_buffer(t, i));
    CHECK(m / 200.0 == doctest::Approx(0.5).epsilon(0.1));
}

TEST_CASE("fit_g recovers the generating propensity, and trims") {
    auto cfg = small_dgp(20000);
    auto data = generate(cfg, 31);
    const auto& t = data.table;
    auto g = fit_g(t, all_rows(t), 1, LearnerSpec::quick_linear(1e-4));

    const DgpOracle oracle(cfg);
    auto g_true = oracle.g(1);
    double mae = 0.0;
    std::size_t cnt = 0;
    for (std::size_t i = 0; i < t.n() && cnt < 4000; ++i) {
        if (!t.is_source(i)) continue;
        const auto x = detail_nuis::x_buffer(t, i);
        const double fitted = g->predict_one(x);
        mae += std::abs(fitted - trim_probability(g_true->predict_one(x)));
        CHECK(fitted >= 0.025);
        CHECK(fitted <= 0.975);
        ++cnt;
    }
    CHECK(mae / static_cast<double>(cnt) <= 0.05);
}

TEST_CASE("fit_kappa: no-signal source rate recovered; single-population errors") {
    const std::size_t n = 4000;
    std::mt19937_64 rng(22);
    std::normal_distribution<double> nd;
    std::uniform_real_distribution<double> ud;
    std::vector<std::optional<double>> y(n);
    std::vector<std::optional<int>> a(n);
    std::vector<std::uint8_t> s(n);
    Matrix v(n, 2), u(n, 1);
    for (std::size_t i = 0; i < n; ++i) {
        v.at(i, 0) = nd(rng);
        v.at(i, 1) = nd(rng);
        s[i] = ud(rng) < 0.9 ? 1 : 0;
        if (s[i]) {
            y[i] = nd(rng);
            a[i] = ud(rng) < 0.5 ? 1 : 0;
            u.at(i, 0) = nd(rng);
        }
    }
    ObservationTable t(y, a, v, u, s);
    auto kappa = fit_kappa(t, all_rows(t), LearnerSpec::quick_linear(1e-2));
    double m = 0.0;
    for (std::size_t i = 0; i < 500; ++i) m += kappa->predict_one(t.v_row(i));
    CHECK(m / 500.0 == doctest::Approx(0.9).epsilon(0.03));

    std::vector<std::uint8_t> s1(n, 1);
    std::vector<std::optional<double>> y1(n);
    std::vector<std::optional<int>> a1(n);
    for (std::size_t i = 0; i < n; ++i) {
        y1[i] = 0.0;
        a1[i] = static_cast<int>(i % 2);
    }
    ObservationTable t1(y1, a1, v, u, s1);
    CHECK_THROWS_AS(fit_kappa(t1, all_rows(t1), LearnerSpec::quick_linear(1e-2)),
                    NumericError);
}

TEST_CASE("fit_kappa recovers the generating source model") {
    auto cfg = small_dgp(20000);
    auto data = generate(cfg, 33);
    const auto& t = data.table;
    auto kappa = fit_kappa(t, all_rows(t), LearnerSpec::quick_linear(1e-4));
    double mae = 0.0;
    for (std::size_t i = 0; i < 4000; ++i)
        mae += std::abs(kappa->predict_one(t.v_row(i)) -
                        trim_probability(dgp_kappa(cfg, t.v_row(i))));
    CHECK(mae / 4000.0 <= 0.05);
}

TEST_CASE("compute_weight arithmetic and indicators") {
    const std::size_t n = 4;
    std::vector<std::optional<double>> y{1.0, 2.0, std::nullopt, 3.0};
    std::vector<std::optional<int>> a{1, 0, std::nullopt, 1};
    std::vector<std::uint8_t> s{1, 1, 0, 1};
    Matrix v(n, 1), u(n, 1);
    ObservationTable t(y, a, v, u, s);

    auto g_half = make_constant(0.5, 2);
    auto k_half = make_constant(0.5, 1);
    // (A=a, S=1, g=0.5, kappa=0.5) -> (1-0.5)/(0.5*0.5) = 2
    CHECK(compute_weight(t, 0, 1, *g_half, *k_half) == doctest::Approx(2.0));
    CHECK(compute_weight(t, 1, 1, *g_half, *k_half) == 0.0);  // A != a
    CHECK(compute_weight(t, 2, 1, *g_half, *k_half) == 0.0);  // S = 0

    auto g_zero = make_constant(0.0, 2);
    CHECK_THROWS_AS(compute_weight(t, 0, 1, *g_zero, *k_half), NumericError);
}

TEST_CASE("weights are bounded by the trim-implied ceiling") {
    auto cfg = small_dgp(4000);
    auto data = generate(cfg, 35);
    const auto& t = data.table;
    auto rows = all_rows(t);
    auto g = fit_g(t, rows, 1, LearnerSpec::quick_linear(1e-3));
    auto kappa = fit_kappa(t, rows, LearnerSpec::quick_linear(1e-3));
    const double cap = (1.0 - 0.025) / (0.025 * 0.025);
    for (std::size_t i = 0; i < t.n(); ++i) {
        const double w = compute_weight(t, i, 1, *g, *kappa);
        CHECK(w >= 0.0);
        CHECK(w <= cap);
        CHECK(std::isfinite(w));
    }
}

TEST_CASE("fit_two_stage_mean: U-free outcome needs no U") {
    // Y(a) = f(V) only; eta should track f despite the two-stage detour.
    const std::size_t n = 6000;
    std::mt19937_64 rng(23);
    std::normal_distribution<double> nd;
    std::uniform_real_distribution<double> ud;
    std::vector<std::optional<double>> y(n);
    std::vector<std::optional<int>> a(n);
    std::vector<std::uint8_t> s(n);
    Matrix v(n, 2), u(n, 2);
    for (std::size_t i = 0; i < n; ++i) {
        v.at(i, 0) = nd(rng);
        v.at(i, 1) = nd(rng);
        s[i] = ud(rng) < 0.85 ? 1 : 0;
        if (s[i]) {
            u.at(i, 0) = nd(rng);
            u.at(i, 1) = nd(rng);
            a[i] = ud(rng) < 0.5 ? 1 : 0;
            y[i] = 2.0 * v.at(i, 0) - v.at(i, 1) + 0.2 * nd(rng);
        }
    }
    ObservationTable t(y, a, v, u, s);
    auto mean = fit_two_stage_mean(t, all_rows(t), 1, LearnerSpec::quick_linear(1e-4),
                                   LearnerSpec::quick_linear(1e-4));
    double mae = 0.0;
    for (std::size_t i = 0; i < 1000; ++i)
        mae += std::abs(mean.eta->predict_one(t.v_row(i)) -
                        (2.0 * t.v_row(i)[0] - t.v_row(i)[1]));
    CHECK(mae / 1000.0 < 0.05);
}

TEST_CASE("fit_two_stage_mean matches the closed-form conditional mean") {
    // E[mu(V,U) | V] = k_v/(k_v+k_u) * sum of active V.
    auto cfg = small_dgp(20000);
    auto data = generate(cfg, 37);
    const auto& t = data.table;
    auto mean = fit_two_stage_mean(t, all_rows(t), 1, LearnerSpec::quick_linear(1e-4),
                                   LearnerSpec::quick_linear(1e-4));
    const double scale =
        static_cast<double>(cfg.k_v) / static_cast<double>(cfg.k_v + cfg.k_u);
    double mae = 0.0;
    for (std::size_t i = 0; i < 4000; ++i) {
        double sv = 0.0;
        for (std::size_t k = 0; k < cfg.k_v; ++k) sv += t.v_row(i)[k];
        mae += std::abs(mean.eta->predict_one(t.v_row(i)) - scale * sv);
    }
    CHECK(mae / 4000.0 <= 0.1);

    CHECK_THROWS_AS(fit_two_stage_mean(t, all_rows(t), 7, LearnerSpec::quick_linear(),
                                       LearnerSpec::quick_linear()),
                    DataError);
}

TEST_CASE("fit_q constants at extreme pins; fit_m mirrors constant q") {
    auto cfg = small_dgp(2000);
    auto data = generate(cfg, 39);
    const auto& t = data.table;
    auto rows = all_rows(t);
    const DgpOracle oracle(cfg);
    ConformityScorer scorer;
    scorer.variant = ConformityScorer::Variant::abs_residual;
    scorer.a = 1;
    scorer.eta = oracle.eta();

    std::size_t src0 = 0;
    while (!t.is_source(src0)) ++src0;

    bool fb = false;
    auto q_hi = fit_q(t, rows, 1, 1e9, scorer, LearnerSpec::quick_linear(1e-3), &fb);
    CHECK(fb);
    CHECK(q_hi->predict_one(detail_nuis::x_buffer(t, src0)) == 1.0);

    auto q_lo = fit_q(t, rows, 1, -1e9, scorer, LearnerSpec::quick_linear(1e-3), &fb);
    CHECK(fb);
    CHECK(q_lo->predict_one(detail_nuis::x_buffer(t, src0)) == 0.0);

    auto m_hi = fit_m(t, rows, q_hi, LearnerSpec::quick_linear(1e-3));
    CHECK(m_hi->predict_one(t.v_row(0)) == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("fit_q law-of-total-expectation at a representative pin") {
    auto cfg = small_dgp(16000);
    auto data = generate(cfg, 41);
    const auto& t = data.table;
    auto rows = all_rows(t);
    const DgpOracle oracle(cfg);
    ConformityScorer scorer;
    scorer.variant = ConformityScorer::Variant::abs_residual;
    scorer.a = 1;
    scorer.eta = oracle.eta();

    // pin at the treated-source median score
    std::vector<double> scores;
    for (std::size_t i = 0; i < t.n(); ++i)
        if (t.is_source(i) && t.a_value(i) == 1)
            scores.push_back(scorer.score(t.y_value(i), t.v_row(i)));
    const double r_pin = quantile_inf(scores, 0.5);

    bool fb = true;
    auto q = fit_q(t, rows, 1, r_pin, scorer, LearnerSpec::quick_linear(1e-4), &fb);
    CHECK(!fb);
    double mean_q = 0.0, frac = 0.0;
    std::size_t cnt = 0;
    for (std::size_t i = 0; i < t.n(); ++i) {
        if (!t.is_source(i) || t.a_value(i) != 1) continue;
        mean_q += q->predict_one(detail_nuis::x_buffer(t, i));
        frac += scorer.score(t.y_value(i), t.v_row(i)) <= r_pin ? 1.0 : 0.0;
        ++cnt;
    }
    CHECK(mean_q / static_cast<double>(cnt) ==
          doctest::Approx(frac / static_cast<double>(cnt)).epsilon(0.03));
}

TEST_CASE("reweighting identity holds for fitted m over target rows") {
    // mean of m-hat over target rows vs the w-reweighted source mean of
    // q-hat at n=20000. The weighted mean is heavy-tailed, so the gap is
    // averaged over three independent datasets before applying the +-0.02
    // tolerance.
    auto cfg = small_dgp(20000);
    const DgpOracle oracle(cfg);
    double gap_sum = 0.0;
    int n_sets = 0;
    for (std::uint64_t seed : {41ULL, 43ULL, 47ULL}) {
        auto data = generate(cfg, seed);
        const auto& t = data.table;
        auto rows = all_rows(t);
        ConformityScorer scorer;
        scorer.variant = ConformityScorer::Variant::abs_residual;
        scorer.a = 1;
        scorer.eta = oracle.eta();

        std::vector<double> scores;
        for (std::size_t i = 0; i < t.n(); ++i)
            if (t.is_source(i) && t.a_value(i) == 1)
                scores.push_back(scorer.score(t.y_value(i), t.v_row(i)));
        const double r_pin = quantile_inf(scores, 0.8);

        auto q = fit_q(t, rows, 1, r_pin, scorer, LearnerSpec::quick_linear(1e-4));
        auto m = fit_m(t, rows, q, LearnerSpec::quick_linear(1e-4));
        auto g_true = oracle.g(1);
        auto k_true = oracle.kappa();

        double target_mean = 0.0;
        std::size_t n0 = 0;
        double weighted_src = 0.0;
        for (std::size_t i = 0; i < t.n(); ++i) {
            if (!t.is_source(i)) {
                target_mean += m->predict_one(t.v_row(i));
                ++n0;
            } else if (t.a_value(i) == 1) {
                const double w = compute_weight(t, i, 1, *g_true, *k_true);
                weighted_src += w * q->predict_one(detail_nuis::x_buffer(t, i));
            }
        }
        target_mean /= static_cast<double>(n0);
        weighted_src /= static_cast<double>(n0);  // E[w h]/P(S=0) = E[h | S=0]
        gap_sum += target_mean - weighted_src;
        ++n_sets;
    }
    CHECK(std::abs(gap_sum / n_sets) <= 0.02);
}

TEST_CASE("stage-2 of the two-stage mean never sees target rows") {
    // target rows sit at extreme V; any leakage into stage 2 would wreck the
    // fitted line
    const std::size_t n = 400;
    std::vector<std::optional<double>> y(n);
    std::vector<std::optional<int>> a(n);
    std::vector<std::uint8_t> s(n);
    Matrix v(n, 1), u(n, 1);
    std::mt19937_64 rng(45);
    std::normal_distribution<double> nd;
    std::uniform_real_distribution<double> ud;
    for (std::size_t i = 0; i < n; ++i) {
        const bool src = i % 4 != 0;
        s[i] = src ? 1 : 0;
        v.at(i, 0) = src ? nd(rng) : 1000.0;
        if (src) {
            u.at(i, 0) = nd(rng);
            a[i] = ud(rng) < 0.5 ? 1 : 0;
            y[i] = v.at(i, 0);
        }
    }
    ObservationTable t(y, a, v, u, s);
    std::vector<std::size_t> rows(n);
    std::iota(rows.begin(), rows.end(), std::size_t{0});
    auto mean = fit_two_stage_mean(t, rows, 1, LearnerSpec::quick_linear(0.0),
                                   LearnerSpec::quick_linear(0.0));
    CHECK(mean.eta->predict_one(std::vector<double>{0.0}) ==
          doctest::Approx(0.0).epsilon(0.2));
    CHECK(mean.eta->predict_one(std::vector<double>{1.0}) ==
          doctest::Approx(1.0).epsilon(0.2));
}
