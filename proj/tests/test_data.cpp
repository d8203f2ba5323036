#include "doctest.h"

#include <random>
#include <sstream>

#include "rtcp/data.hpp"

using namespace rtcp;

namespace {

ColumnSchema tiny_schema() {
    ColumnSchema s;
    s.v_cols = {"v1", "v2"};
    s.u_cols = {"u1"};
    return s;
}

// Random table with the required missingness pattern.
ObservationTable random_table(std::size_t n, std::uint64_t seed,
                              double source_rate = 0.8) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd;
    std::uniform_real_distribution<double> ud;
    std::vector<std::optional<double>> y(n);
    std::vector<std::optional<int>> a(n);
    std::vector<std::uint8_t> s(n);
    Matrix v(n, 2), u(n, 1);
    for (std::size_t i = 0; i < n; ++i) {
        v.at(i, 0) = nd(rng);
        v.at(i, 1) = nd(rng);
        s[i] = ud(rng) < source_rate ? 1 : 0;
        if (s[i]) {
            y[i] = nd(rng);
            a[i] = ud(rng) < 0.5 ? 1 : 0;
            u.at(i, 0) = nd(rng);
        }
    }
    return ObservationTable(std::move(y), std::move(a), std::move(v), std::move(u),
                            std::move(s));
}

}  // namespace

TEST_CASE("load_csv accepts a minimal valid pattern") {
    std::istringstream in(
        "y,a,s,v1,v2,u1\n"
        "1.5,1,1,0.1,0.2,0.3\n"
        "2.5,0,1,0.4,0.5,0.6\n"
        ",,0,0.7,0.8,\n");
    auto t = load_csv_stream(in, tiny_schema());
    CHECK(t.n() == 3);
    CHECK(t.count_target() == 1);
    CHECK(t.count_source() == 2);
    CHECK(!t.y(2).has_value());
    CHECK(!t.a(2).has_value());
    CHECK(t.v_row(2)[0] == doctest::Approx(0.7));
    CHECK_THROWS_AS(t.u_row(2), DataError);
    CHECK(t.treatment_levels() == std::vector<int>{0, 1});
}

TEST_CASE("load_csv rejects a target row carrying an outcome") {
    std::istringstream in(
        "y,a,s,v1,v2,u1\n"
        "1.5,1,1,0.1,0.2,0.3\n"
        "1.2,,0,0.7,0.8,\n");
    CHECK_THROWS_WITH_AS(load_csv_stream(in, tiny_schema()),
                         doctest::Contains("target row carries outcome"), DataError);
}

TEST_CASE("load_csv rejects schema mismatch and non-numeric covariates") {
    std::istringstream missing_col(
        "y,a,s,v1\n"
        "1.0,1,1,0.5\n");
    CHECK_THROWS_AS(load_csv_stream(missing_col, tiny_schema()), DataError);

    std::istringstream bad_v(
        "y,a,s,v1,v2,u1\n"
        "1.0,1,1,abc,0.2,0.3\n");
    CHECK_THROWS_AS(load_csv_stream(bad_v, tiny_schema()), DataError);
}

TEST_CASE("csv round-trip reproduces the table") {
    auto t = random_table(60, 11);
    std::ostringstream out;
    ColumnSchema schema;
    emit_csv_stream(t, schema, out);

    ColumnSchema reread;
    reread.v_cols = {"v*"};
    reread.u_cols = {"u*"};
    std::istringstream in(out.str());
    auto t2 = load_csv_stream(in, reread);

    REQUIRE(t2.n() == t.n());
    REQUIRE(t2.p_v() == t.p_v());
    REQUIRE(t2.p_u() == t.p_u());
    for (std::size_t i = 0; i < t.n(); ++i) {
        CHECK(t2.is_source(i) == t.is_source(i));
        CHECK(t2.y(i) == t.y(i));
        CHECK(t2.a(i) == t.a(i));
        for (std::size_t j = 0; j < t.p_v(); ++j)
            CHECK(t2.v_row(i)[j] == t.v_row(i)[j]);
        if (t.is_source(i))
            for (std::size_t j = 0; j < t.p_u(); ++j)
                CHECK(t2.u_row(i)[j] == t.u_row(i)[j]);
    }
}

TEST_CASE("missingness invariant rejected at construction") {
    std::vector<std::optional<double>> y{1.0, 2.0};
    std::vector<std::optional<int>> a{1, std::nullopt};  // source row missing a
    Matrix v(2, 1), u(2, 1);
    std::vector<std::uint8_t> s{1, 1};
    CHECK_THROWS_AS(ObservationTable(y, a, v, u, s), DataError);
}

TEST_CASE("make_splits arithmetic, determinism, and preconditions") {
    // 100 source rows and a few target rows
    auto t = random_table(112, 5, 1.0);
    REQUIRE(t.count_source() == 112);
    std::vector<std::size_t> keep;
    for (std::size_t i = 0; i < 100; ++i) keep.push_back(i);
    auto t100 = take_rows(t, keep);

    auto sp = make_splits(t100, 0.5, 0.5, 7);
    CHECK(sp.train1.size() == 25);
    CHECK(sp.train2.size() == 25);
    CHECK(sp.cal.size() == 50);

    auto sp2 = make_splits(t100, 0.5, 0.5, 7);
    CHECK(sp.train1 == sp2.train1);
    CHECK(sp.train2 == sp2.train2);
    CHECK(sp.cal == sp2.cal);

    CHECK_THROWS_WITH_AS(make_splits(t100, 0.9, 0.2, 7),
                         doctest::Contains("fractions exceed 1"), ConfigError);
}

TEST_CASE("make_splits covers every row exactly once, stratified by population") {
    for (std::uint64_t seed : {1ULL, 2ULL, 3ULL}) {
        auto t = random_table(157, seed, 0.8);
        auto sp = make_splits(t, 0.6, 0.4, seed + 10);
        sp.validate();
        std::vector<int> fold(t.n(), -1);
        for (std::size_t i : sp.train1) fold[i] = 0;
        for (std::size_t i : sp.train2) fold[i] = 1;
        for (std::size_t i : sp.cal) fold[i] = 2;
        for (std::size_t i = 0; i < t.n(); ++i) CHECK(fold[i] >= 0);  // no row dropped
        CHECK(std::abs(static_cast<long>(sp.train1.size()) -
                       static_cast<long>(sp.train2.size())) <= 1);
        // the calibration fold holds roughly its share of target rows, so
        // the estimating equation keeps the population proportions
        std::size_t cal_tgt = 0;
        for (std::size_t i : sp.cal) cal_tgt += t.is_source(i) ? 0 : 1;
        const double share = static_cast<double>(cal_tgt) /
                             static_cast<double>(t.count_target());
        CHECK(share == doctest::Approx(0.4).epsilon(0.15));
    }
}

TEST_CASE("subset by predicates") {
    auto t = random_table(200, 9);
    auto treated = subset(t, RowFilter::treated_source(1));
    for (std::size_t i = 0; i < treated.n(); ++i) {
        CHECK(treated.is_source(i));
        CHECK(treated.a_value(i) == 1);
    }
    auto targets = subset(t, RowFilter::target_only());
    for (std::size_t i = 0; i < targets.n(); ++i) {
        CHECK(!targets.is_source(i));
        CHECK(!targets.y(i).has_value());
        CHECK(!targets.a(i).has_value());
    }
    // idempotence
    auto twice = subset(treated, RowFilter::treated_source(1));
    CHECK(twice.n() == treated.n());
    for (std::size_t i = 0; i < twice.n(); ++i)
        CHECK(twice.y(i) == treated.y(i));
    // validate() holds after transformation
    CHECK_NOTHROW(targets.validate());
    CHECK_NOTHROW(treated.validate());
}
