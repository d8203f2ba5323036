#include "doctest.h"

#include <random>

#include "rtcp/learners.hpp"

using namespace rtcp;

namespace {

Matrix random_matrix(std::size_t n, std::size_t p, std::mt19937_64& rng) {
    Matrix x(n, p);
    std::normal_distribution<double> nd;
    for (auto& v : x.data()) v = nd(rng);
    return x;
}

}  // namespace

TEST_CASE("pinball loss formula and identities") {
    CHECK(pinball_loss(2.0, 0.9) == doctest::Approx(1.8));
    CHECK(pinball_loss(-2.0, 0.9) == doctest::Approx(0.2));
    for (double alpha : {0.05, 0.3, 0.5, 0.77}) CHECK(pinball_loss(0.0, alpha) == 0.0);

    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> xd(-10.0, 10.0), ad(0.01, 0.99);
    for (int i = 0; i < 500; ++i) {
        const double x = xd(rng), alpha = ad(rng);
        CHECK(pinball_loss(x, alpha) >= 0.0);
        // rho_a(x) + rho_a(-x) = |x|
        CHECK(pinball_loss(x, alpha) + pinball_loss(-x, alpha) ==
              doctest::Approx(std::abs(x)).epsilon(1e-12));
        // reflection: rho_a(x) = rho_{1-a}(-x)
        CHECK(pinball_loss(x, alpha) ==
              doctest::Approx(pinball_loss(-x, 1.0 - alpha)).epsilon(1e-12));
        if (x != 0.0) CHECK(pinball_loss(x, alpha) > 0.0);
    }
    CHECK_THROWS_AS(pinball_loss(1.0, 1.5), NumericError);
}

TEST_CASE("trim_probability clamps to the default bounds") {
    CHECK(trim_probability(0.001) == doctest::Approx(0.025));
    CHECK(trim_probability(0.5) == doctest::Approx(0.5));
    CHECK(trim_probability(0.999) == doctest::Approx(0.975));
    CHECK(trim_probability(0.1, 0.2, 0.8) == doctest::Approx(0.2));
}

TEST_CASE("fit_regressor: constant target reproduced") {
    std::mt19937_64 rng(1);
    auto x = random_matrix(40, 3, rng);
    std::vector<double> y(40, 3.25);
    for (auto spec : {LearnerSpec::quick_linear(0.1), LearnerSpec::quick_gbt(20, 2)}) {
        auto m = fit_regressor(x, y, nullptr, spec);
        for (std::size_t i = 0; i < 5; ++i)
            CHECK(m->predict_one(x.row(i)) == doctest::Approx(3.25).epsilon(1e-9));
    }
}

TEST_CASE("fit_regressor: exact interpolation at zero penalty") {
    std::mt19937_64 rng(2);
    auto x = random_matrix(60, 4, rng);
    std::vector<double> y(60);
    for (std::size_t i = 0; i < 60; ++i)
        y[i] = 1.5 + 2.0 * x.at(i, 0) - 0.7 * x.at(i, 1) + 0.1 * x.at(i, 3);
    auto m = fit_regressor(x, y, nullptr, LearnerSpec::quick_linear(0.0));
    for (std::size_t i = 0; i < 60; ++i)
        CHECK(std::abs(m->predict_one(x.row(i)) - y[i]) <= 1e-8);
}

TEST_CASE("fit_regressor: unit weights equal the unweighted path") {
    std::mt19937_64 rng(4);
    auto x = random_matrix(80, 3, rng);
    std::vector<double> y(80);
    std::normal_distribution<double> nd;
    for (std::size_t i = 0; i < 80; ++i) y[i] = x.at(i, 0) - x.at(i, 2) + 0.3 * nd(rng);

    auto spec = LearnerSpec::quick_linear(0.05);
    auto unweighted = fit_regressor(x, y, nullptr, spec);
    SampleWeights ones = SampleWeights::uniform(80);
    auto weighted = fit_regressor(x, y, &ones, spec);
    SampleWeights twos{std::vector<double>(80, 2.0)};
    auto doubled = fit_regressor(x, y, &twos, spec);

    const auto* c0 = dynamic_cast<const LinearModel*>(unweighted.get());
    const auto* c1 = dynamic_cast<const LinearModel*>(weighted.get());
    const auto* c2 = dynamic_cast<const LinearModel*>(doubled.get());
    REQUIRE(c0);
    REQUIRE(c1);
    REQUIRE(c2);
    for (std::size_t j = 0; j < 3; ++j) {
        CHECK(c0->coef[j] == doctest::Approx(c1->coef[j]).epsilon(1e-12));
        CHECK(c0->coef[j] == doctest::Approx(c2->coef[j]).epsilon(1e-9));
    }
    CHECK(c0->intercept == doctest::Approx(c1->intercept).epsilon(1e-12));
}

TEST_CASE("fit_regressor input validation") {
    std::mt19937_64 rng(5);
    auto x = random_matrix(1, 2, rng);
    std::vector<double> y{1.0};
    CHECK_THROWS_AS(fit_regressor(x, y, nullptr, LearnerSpec{}), NumericError);

    auto x2 = random_matrix(10, 2, rng);
    std::vector<double> y2(10, 0.0);
    y2[3] = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(fit_regressor(x2, y2, nullptr, LearnerSpec{}), NumericError);
}

TEST_CASE("fit_classifier: no-signal case gives 0.5 under heavy penalty") {
    std::mt19937_64 rng(6);
    auto x = random_matrix(400, 3, rng);
    std::vector<double> lab(400);
    for (std::size_t i = 0; i < 400; ++i) lab[i] = i % 2 == 0 ? 1.0 : 0.0;
    auto m = fit_classifier(x, lab, nullptr, LearnerSpec::quick_linear(1.0));
    for (std::size_t i = 0; i < 10; ++i)
        CHECK(m->predict_one(x.row(i)) == doctest::Approx(0.5).epsilon(1e-6));
}

TEST_CASE("fit_classifier: separable 1-D data is monotone in the feature") {
    Matrix x(40, 1);
    std::vector<double> lab(40);
    for (std::size_t i = 0; i < 40; ++i) {
        x.at(i, 0) = static_cast<double>(i) / 4.0 - 5.0;
        lab[i] = x.at(i, 0) > 0 ? 1.0 : 0.0;
    }
    for (auto spec : {LearnerSpec::quick_linear(1e-4), LearnerSpec::quick_gbt(40, 2)}) {
        auto m = fit_classifier(x, lab, nullptr, spec);
        double prev = -1.0;
        for (std::size_t i = 0; i < 40; ++i) {
            const double p = m->predict_one(x.row(i));
            CHECK(p >= prev - 1e-9);
            CHECK(p >= 0.0);
            CHECK(p <= 1.0);
            prev = p;
        }
    }
    CHECK_THROWS_AS(
        fit_classifier(x, std::vector<double>(40, 1.0), nullptr, LearnerSpec{}),
        NumericError);
}

TEST_CASE("fit_classifier recovers generating coefficients at n=10000") {
    const std::size_t n = 10000;
    std::mt19937_64 rng(8);
    auto x = random_matrix(n, 2, rng);
    std::vector<double> lab(n);
    std::uniform_real_distribution<double> ud;
    const double b1 = 1.5, b2 = -0.8;
    for (std::size_t i = 0; i < n; ++i)
        lab[i] = ud(rng) < expit(b1 * x.at(i, 0) + b2 * x.at(i, 1)) ? 1.0 : 0.0;
    auto m = fit_classifier(x, lab, nullptr, LearnerSpec::quick_linear(1e-4));
    const auto* lm = dynamic_cast<const LinearModel*>(m.get());
    REQUIRE(lm);
    CHECK(lm->coef[0] == doctest::Approx(b1).epsilon(0.08));
    CHECK(lm->coef[1] == doctest::Approx(b2).epsilon(0.12));
    CHECK(std::abs(lm->intercept) < 0.1);
}

TEST_CASE("fit_weighted_quantile: constant design returns the weighted quantile") {
    Matrix x(7, 1);  // zero-variance column
    std::vector<double> y{3, 1, 4, 1, 5, 9, 2};
    SampleWeights w = SampleWeights::uniform(7);
    auto m = fit_weighted_quantile(x, y, w, 0.5, LearnerSpec{});
    CHECK(m->predict_one(x.row(0)) == 3.0);  // weighted median, inf convention

    SampleWeights w2{{1, 1, 1, 1, 1, 10, 1}};
    auto m2 = fit_weighted_quantile(x, y, w2, 0.5, LearnerSpec{});
    CHECK(m2->predict_one(x.row(0)) == 9.0);
}

TEST_CASE("fit_weighted_quantile: constant fit satisfies the subgradient box") {
    std::mt19937_64 rng(9);
    std::normal_distribution<double> nd;
    std::uniform_real_distribution<double> wd(0.1, 3.0), ad(0.05, 0.95);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t n = 5 + rng() % 40;
        Matrix x(n, 0);
        std::vector<double> y(n);
        SampleWeights w;
        w.w.resize(n);
        double w_tot = 0.0, w_max = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            y[i] = nd(rng);
            w.w[i] = wd(rng);
            w_tot += w.w[i];
            w_max = std::max(w_max, w.w[i]);
        }
        const double alpha = ad(rng);
        auto m = fit_weighted_quantile(x, y, w, alpha, LearnerSpec{});
        const double c = m->predict_one(std::span<const double>{});
        double frac = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            if (y[i] <= c) frac += w.w[i];
        frac /= w_tot;
        CHECK(frac >= alpha - w_max / w_tot - 1e-12);
        CHECK(frac <= alpha + w_max / w_tot + 1e-12);
    }
}

TEST_CASE("fit_weighted_quantile matches the analytic Gaussian quantile") {
    // y | x ~ N(x, 1); the 0.9 conditional quantile is x + 1.2816.
    const std::size_t n = 20000;
    const double z90 = 1.2815515655446004;
    std::mt19937_64 rng(10);
    std::normal_distribution<double> nd;
    Matrix x(n, 1);
    std::vector<double> y(n);
    for (std::size_t i = 0; i < n; ++i) {
        x.at(i, 0) = nd(rng);
        y[i] = x.at(i, 0) + nd(rng);
    }
    SampleWeights w = SampleWeights::uniform(n);
    auto m = fit_weighted_quantile(x, y, w, 0.9, LearnerSpec{});
    for (double xv : {-1.5, -0.5, 0.0, 0.5, 1.5}) {
        const double pred = m->predict_one(std::vector<double>{xv});
        CHECK(pred == doctest::Approx(xv + z90).epsilon(0.1 / (std::abs(xv) + z90)));
    }

    // doubling all weights leaves the fit unchanged
    SampleWeights w2{std::vector<double>(n, 2.0)};
    auto m2 = fit_weighted_quantile(x, y, w2, 0.9, LearnerSpec{});
    for (double xv : {-1.0, 0.0, 1.0}) {
        const double a = m->predict_one(std::vector<double>{xv});
        const double b = m2->predict_one(std::vector<double>{xv});
        CHECK(a == doctest::Approx(b).epsilon(1e-9));
    }

    SampleWeights zeros{std::vector<double>(n, 0.0)};
    CHECK_THROWS_AS(fit_weighted_quantile(x, y, zeros, 0.9, LearnerSpec{}),
                    NumericError);
}

TEST_CASE("gbt pinball fit tracks a conditional quantile") {
    const std::size_t n = 4000;
    std::mt19937_64 rng(11);
    std::normal_distribution<double> nd;
    Matrix x(n, 1);
    std::vector<double> y(n);
    for (std::size_t i = 0; i < n; ++i) {
        x.at(i, 0) = nd(rng);
        y[i] = 2.0 * x.at(i, 0) + nd(rng);
    }
    SampleWeights w = SampleWeights::uniform(n);
    LearnerSpec spec = LearnerSpec::quick_gbt(150, 3);
    auto m = fit_weighted_quantile(x, y, w, 0.9, spec);
    double err = 0.0;
    int cnt = 0;
    for (double xv = -1.2; xv <= 1.2; xv += 0.3) {
        const double truth = 2.0 * xv + 1.2815515655446004;
        err += std::abs(m->predict_one(std::vector<double>{xv}) - truth);
        ++cnt;
    }
    CHECK(err / cnt < 0.35);
}

TEST_CASE("fit_stack: single base gets weight one") {
    std::mt19937_64 rng(12);
    auto x = random_matrix(60, 2, rng);
    std::vector<double> y(60);
    for (std::size_t i = 0; i < 60; ++i) y[i] = x.at(i, 0);
    auto m = fit_stack(x, y, false, {LearnerSpec::quick_linear(0.01)}, 3, nullptr);
    const auto* sm = dynamic_cast<const StackModel*>(m.get());
    REQUIRE(sm);
    CHECK(sm->weights.size() == 1);
    CHECK(sm->weights[0] == doctest::Approx(1.0));
}

TEST_CASE("fit_stack: dominant base wins on noiseless data") {
    std::mt19937_64 rng(13);
    auto x = random_matrix(200, 2, rng);
    std::vector<double> y(200);
    for (std::size_t i = 0; i < 200; ++i) y[i] = 1.0 + 2.0 * x.at(i, 0) - x.at(i, 1);

    // a perfect linear base against a heavily-penalized (near constant) one
    LearnerSpec good = LearnerSpec::quick_linear(0.0);
    LearnerSpec bad = LearnerSpec::quick_linear(1.0);
    auto m = fit_stack(x, y, false, {good, bad}, 4, nullptr);
    const auto* sm = dynamic_cast<const StackModel*>(m.get());
    REQUIRE(sm);
    CHECK(sm->weights[0] > 0.95);

    // simplex property and CV-loss dominance over the best base
    double wsum = 0.0;
    for (double wv : sm->weights) {
        CHECK(wv >= -1e-12);
        wsum += wv;
    }
    CHECK(wsum == doctest::Approx(1.0).epsilon(1e-9));
    const double min_base =
        *std::min_element(sm->base_cv_losses.begin(), sm->base_cv_losses.end());
    CHECK(sm->cv_loss <= min_base + 1e-8);
}

TEST_CASE("fit_stack preconditions") {
    std::mt19937_64 rng(14);
    auto x = random_matrix(30, 2, rng);
    std::vector<double> y(30, 1.0);
    CHECK_THROWS_AS(fit_stack(x, y, false, {}, 3, nullptr), ConfigError);
    CHECK_THROWS_AS(fit_stack(x, y, false, {LearnerSpec{}}, 1, nullptr), ConfigError);
}

TEST_CASE("predict enforces the recorded feature dimension") {
    std::mt19937_64 rng(15);
    auto x = random_matrix(30, 3, rng);
    std::vector<double> y(30, 2.0);
    auto m = fit_regressor(x, y, nullptr, LearnerSpec::quick_linear(0.1));
    CHECK_THROWS_AS(m->predict_one(std::vector<double>{1.0}), NumericError);
}

TEST_CASE("cv lambda selection runs and fits sensibly") {
    std::mt19937_64 rng(16);
    auto x = random_matrix(300, 6, rng);
    std::vector<double> y(300);
    std::normal_distribution<double> nd;
    for (std::size_t i = 0; i < 300; ++i)
        y[i] = 2.0 * x.at(i, 0) - 1.0 * x.at(i, 1) + 0.5 * nd(rng);
    LearnerSpec spec;  // lambda_rel < 0 -> CV over the grid
    auto m = fit_regressor(x, y, nullptr, spec);
    double mse = 0.0;
    for (std::size_t i = 0; i < 300; ++i) {
        const double r = m->predict_one(x.row(i)) - y[i];
        mse += r * r;
    }
    CHECK(mse / 300.0 < 0.4);
}
