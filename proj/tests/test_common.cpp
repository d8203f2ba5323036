#include "doctest.h"

#include <random>

#include "rtcp/common.hpp"

using namespace rtcp;

TEST_CASE("expit and normal_cdf basics") {
    CHECK(expit(0.0) == doctest::Approx(0.5));
    CHECK(expit(40.0) == doctest::Approx(1.0));
    CHECK(expit(-40.0) == doctest::Approx(0.0));
    CHECK(normal_cdf(0.0) == doctest::Approx(0.5));
    CHECK(normal_cdf(1.2815515655446004) == doctest::Approx(0.9).epsilon(1e-9));
    CHECK(normal_cdf(-1.96) == doctest::Approx(0.0249979).epsilon(1e-4));
}

TEST_CASE("weighted_quantile_inf follows the infimum convention") {
    std::vector<double> v{1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
    std::vector<double> w(10, 1.0);
    CHECK(weighted_quantile_inf(v, w, 0.9) == 9.0);
    CHECK(weighted_quantile_inf(v, w, 0.5) == 5.0);
    CHECK(weighted_quantile_inf(v, w, 0.05) == 1.0);
    CHECK(weighted_quantile_inf(v, w, 1.0) == 10.0);

    // mass concentrated on the largest value
    std::vector<double> w2{1e-9, 1e-9, 1e-9, 1e-9, 1e-9, 1e-9, 1e-9, 1e-9, 1e-9, 100.0};
    CHECK(weighted_quantile_inf(v, w2, 0.5) == 10.0);

    CHECK_THROWS_AS(weighted_quantile_inf(v, std::vector<double>(10, 0.0), 0.5),
                    NumericError);
}

TEST_CASE("weighted quantile exactness against scanning") {
    std::mt19937_64 rng(7);
    std::uniform_real_distribution<double> val(-5.0, 5.0);
    std::uniform_real_distribution<double> wgt(0.0, 2.0);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t n = 1 + rng() % 12;
        std::vector<double> v(n), w(n);
        double tot = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            v[i] = val(rng);
            w[i] = wgt(rng);
            tot += w[i];
        }
        if (tot <= 0.0) continue;
        const double level = std::uniform_real_distribution<double>(0.01, 0.99)(rng);
        const double q = weighted_quantile_inf(v, w, level);

        // scan: q must satisfy the subgradient condition and be the smallest
        // sample value doing so
        auto frac_le = [&](double r) {
            double s = 0.0;
            for (std::size_t i = 0; i < n; ++i)
                if (v[i] <= r) s += w[i];
            return s / tot;
        };
        CHECK(frac_le(q) >= level - 1e-12);
        for (double cand : v)
            if (cand < q) CHECK(frac_le(cand) < level);
    }
}

TEST_CASE("effective sample size") {
    std::vector<double> w(4, 1.0);
    CHECK(effective_sample_size(w) == doctest::Approx(4.0));
    std::vector<double> w2{1.0, 0.0, 0.0, 0.0};
    CHECK(effective_sample_size(w2) == doctest::Approx(1.0));
}

TEST_CASE("derive_seed spreads streams") {
    const auto s1 = derive_seed(42, 0);
    const auto s2 = derive_seed(42, 1);
    const auto s3 = derive_seed(43, 0);
    CHECK(s1 != s2);
    CHECK(s1 != s3);
    CHECK(derive_seed(42, 0) == s1);
}
