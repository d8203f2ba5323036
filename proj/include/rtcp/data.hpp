#pragma once

// Observed-data structure for the runtime-confounding setting: outcome Y,
// treatment A and extra covariates U exist only for source rows (s=1);
// always-observed covariates V exist everywhere. The missingness pattern is
// validated on construction and preserved by every transformation here.

#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "rtcp/common.hpp"

namespace rtcp {

class ObservationTable {
public:
    ObservationTable() = default;
    ObservationTable(std::vector<std::optional<double>> y,
                     std::vector<std::optional<int>> a, Matrix v, Matrix u,
                     std::vector<std::uint8_t> s)
        : y_(std::move(y)), a_(std::move(a)), v_(std::move(v)), u_(std::move(u)),
          s_(std::move(s)) {
        validate();
    }

    std::size_t n() const { return s_.size(); }
    std::size_t p_v() const { return v_.cols(); }
    std::size_t p_u() const { return u_.cols(); }

    bool is_source(std::size_t i) const { return s_[i] != 0; }
    const std::optional<double>& y(std::size_t i) const { return y_[i]; }
    const std::optional<int>& a(std::size_t i) const { return a_[i]; }
    std::span<const double> v_row(std::size_t i) const { return v_.row(i); }

    // U is structurally missing for target rows; gate access so it can never
    // leak into a target-side prediction.
    std::span<const double> u_row(std::size_t i) const {
        if (!is_source(i)) throw DataError("u requested for a target (s=0) row");
        return u_.row(i);
    }

    double y_value(std::size_t i) const {
        if (!y_[i]) throw DataError("y requested for a target (s=0) row");
        return *y_[i];
    }
    int a_value(std::size_t i) const {
        if (!a_[i]) throw DataError("a requested for a target (s=0) row");
        return *a_[i];
    }

    const Matrix& v() const { return v_; }
    const Matrix& u() const { return u_; }

    std::size_t count_source() const {
        std::size_t c = 0;
        for (auto b : s_) c += (b != 0);
        return c;
    }
    std::size_t count_target() const { return n() - count_source(); }

    // Distinct treatment labels across source rows, sorted.
    std::vector<int> treatment_levels() const {
        std::set<int> lv;
        for (std::size_t i = 0; i < n(); ++i)
            if (a_[i]) lv.insert(*a_[i]);
        return {lv.begin(), lv.end()};
    }

    void validate() const {
        const std::size_t m = s_.size();
        if (y_.size() != m || a_.size() != m || v_.rows() != m || u_.rows() != m)
            throw DataError("column lengths disagree");
        for (std::size_t i = 0; i < m; ++i) {
            if (is_source(i)) {
                if (!y_[i] || !a_[i])
                    throw DataError("source row " + std::to_string(i) +
                                    " is missing y or a");
                if (!std::isfinite(*y_[i]))
                    throw DataError("non-finite outcome at row " + std::to_string(i));
                for (double x : u_.row(i))
                    if (!std::isfinite(x))
                        throw DataError("non-finite u at row " + std::to_string(i));
            } else {
                if (y_[i]) throw DataError("target row " + std::to_string(i) +
                                           " carries outcome");
                if (a_[i]) throw DataError("target row " + std::to_string(i) +
                                           " carries treatment");
            }
            for (double x : v_.row(i))
                if (!std::isfinite(x))
                    throw DataError("non-finite v at row " + std::to_string(i));
        }
    }

private:
    std::vector<std::optional<double>> y_;
    std::vector<std::optional<int>> a_;
    Matrix v_;
    Matrix u_;  // rows meaningful only where s=1
    std::vector<std::uint8_t> s_;
};

// Row filter over (a, s). A missing `a` matches target rows only when
// `require_a` is unset.
struct RowFilter {
    std::optional<int> require_a;    // keep rows with A == value
    std::optional<bool> require_source;  // keep rows with S == value

    bool operator()(const std::optional<int>& a, bool is_source) const {
        if (require_source && *require_source != is_source) return false;
        if (require_a) {
            if (!a) return false;
            if (*a != *require_a) return false;
        }
        return true;
    }

    static RowFilter treated_source(int a) { return {a, true}; }
    static RowFilter source_only() { return {std::nullopt, true}; }
    static RowFilter target_only() { return {std::nullopt, false}; }
};

inline std::vector<std::size_t> select_rows(const ObservationTable& t,
                                            const RowFilter& pred) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < t.n(); ++i)
        if (pred(t.a(i), t.is_source(i))) idx.push_back(i);
    return idx;
}

inline ObservationTable take_rows(const ObservationTable& t,
                                  std::span<const std::size_t> idx) {
    std::vector<std::optional<double>> y(idx.size());
    std::vector<std::optional<int>> a(idx.size());
    std::vector<std::uint8_t> s(idx.size());
    Matrix v(idx.size(), t.p_v());
    Matrix u(idx.size(), t.p_u());
    for (std::size_t k = 0; k < idx.size(); ++k) {
        const std::size_t i = idx[k];
        y[k] = t.y(i);
        a[k] = t.a(i);
        s[k] = t.is_source(i) ? 1 : 0;
        std::copy(t.v_row(i).begin(), t.v_row(i).end(), v.row(k).begin());
        std::copy(t.u().row(i).begin(), t.u().row(i).end(), u.row(k).begin());
    }
    return ObservationTable(std::move(y), std::move(a), std::move(v), std::move(u),
                            std::move(s));
}

inline ObservationTable subset(const ObservationTable& t, const RowFilter& pred) {
    const auto idx = select_rows(t, pred);
    return take_rows(t, idx);
}

// Feature builders. X = [V U] is only defined on source rows.
inline Matrix build_x(const ObservationTable& t, std::span<const std::size_t> rows) {
    Matrix x(rows.size(), t.p_v() + t.p_u());
    for (std::size_t k = 0; k < rows.size(); ++k) {
        const std::size_t i = rows[k];
        auto dst = x.row(k);
        auto v = t.v_row(i);
        auto u = t.u_row(i);  // throws for target rows
        std::copy(v.begin(), v.end(), dst.begin());
        std::copy(u.begin(), u.end(), dst.begin() + static_cast<std::ptrdiff_t>(v.size()));
    }
    return x;
}

inline Matrix build_v(const ObservationTable& t, std::span<const std::size_t> rows) {
    return t.v().take_rows(rows);
}

// ---------------------------------------------------------------------------
// CSV ingestion. Header row required; blank cell = missing.
// ---------------------------------------------------------------------------

struct ColumnSchema {
    std::string outcome = "y";
    std::string treatment = "a";
    std::string source = "s";
    std::vector<std::string> v_cols;  // literal names, or a single "prefix*"
    std::vector<std::string> u_cols;
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur += c;
        }
    }
    out.push_back(cur);
    return out;
}

inline std::string trim_ws(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t");
    if (b == std::string::npos) return "";
    std::size_t e = s.find_last_not_of(" \t");
    return s.substr(b, e - b + 1);
}

inline bool parse_double(const std::string& s, double& out) {
    const std::string t = trim_ws(s);
    if (t.empty()) return false;
    char* end = nullptr;
    out = std::strtod(t.c_str(), &end);
    return end == t.c_str() + t.size();
}

// Expand schema entries of the form "v*" against the header.
inline std::vector<std::string> expand_cols(const std::vector<std::string>& want,
                                            const std::vector<std::string>& header) {
    std::vector<std::string> out;
    for (const auto& w : want) {
        if (!w.empty() && w.back() == '*') {
            const std::string prefix = w.substr(0, w.size() - 1);
            for (const auto& h : header)
                if (h.rfind(prefix, 0) == 0) out.push_back(h);
        } else {
            out.push_back(w);
        }
    }
    return out;
}

}  // namespace detail

inline ObservationTable load_csv_stream(std::istream& in, const ColumnSchema& schema,
                                        const std::string& origin = "<stream>") {
    std::string line;
    if (!std::getline(in, line)) throw DataError(origin + ": empty file");
    const auto header = detail::split_csv_line(line);

    auto col_index = [&](const std::string& name) -> std::size_t {
        for (std::size_t j = 0; j < header.size(); ++j)
            if (detail::trim_ws(header[j]) == name) return j;
        throw DataError(origin + ": schema column '" + name + "' not found in header");
    };

    const auto v_names = detail::expand_cols(schema.v_cols, header);
    const auto u_names = detail::expand_cols(schema.u_cols, header);
    if (v_names.empty()) throw DataError(origin + ": schema names no v columns");
    for (const auto& vn : v_names)
        for (const auto& un : u_names)
            if (vn == un)
                throw DataError(origin + ": column '" + vn + "' listed as both v and u");

    const std::size_t yi = col_index(schema.outcome);
    const std::size_t ai = col_index(schema.treatment);
    const std::size_t si = col_index(schema.source);
    std::vector<std::size_t> vi, ui;
    for (const auto& nm : v_names) vi.push_back(col_index(nm));
    for (const auto& nm : u_names) ui.push_back(col_index(nm));

    std::vector<std::optional<double>> y;
    std::vector<std::optional<int>> a;
    std::vector<std::uint8_t> s;
    std::vector<double> vbuf, ubuf;
    std::size_t lineno = 1;

    while (std::getline(in, line)) {
        ++lineno;
        if (detail::trim_ws(line).empty()) continue;
        const auto cells = detail::split_csv_line(line);
        if (cells.size() != header.size())
            throw DataError(origin + ":" + std::to_string(lineno) +
                            ": wrong number of fields");
        auto cell = [&](std::size_t j) { return detail::trim_ws(cells[j]); };

        double sval;
        if (!detail::parse_double(cell(si), sval) || (sval != 0.0 && sval != 1.0))
            throw DataError(origin + ":" + std::to_string(lineno) +
                            ": source indicator must be 0 or 1");
        const bool src = sval == 1.0;
        s.push_back(src ? 1 : 0);

        if (src) {
            double yv, av;
            if (!detail::parse_double(cell(yi), yv))
                throw DataError(origin + ":" + std::to_string(lineno) +
                                ": source row missing numeric outcome");
            if (!detail::parse_double(cell(ai), av) || av != std::floor(av))
                throw DataError(origin + ":" + std::to_string(lineno) +
                                ": source row missing integer treatment");
            y.emplace_back(yv);
            a.emplace_back(static_cast<int>(av));
        } else {
            if (!cell(yi).empty())
                throw DataError(origin + ":" + std::to_string(lineno) +
                                ": target row carries outcome");
            if (!cell(ai).empty())
                throw DataError(origin + ":" + std::to_string(lineno) +
                                ": target row carries treatment");
            y.emplace_back(std::nullopt);
            a.emplace_back(std::nullopt);
        }

        for (std::size_t j : vi) {
            double x;
            if (!detail::parse_double(cell(j), x))
                throw DataError(origin + ":" + std::to_string(lineno) +
                                ": non-numeric v value '" + cell(j) + "'");
            vbuf.push_back(x);
        }
        for (std::size_t j : ui) {
            const std::string c = cell(j);
            if (src) {
                double x;
                if (!detail::parse_double(c, x))
                    throw DataError(origin + ":" + std::to_string(lineno) +
                                    ": non-numeric u value '" + c + "'");
                ubuf.push_back(x);
            } else {
                if (!c.empty())
                    throw DataError(origin + ":" + std::to_string(lineno) +
                                    ": target row carries u value");
                ubuf.push_back(0.0);
            }
        }
    }

    const std::size_t m = s.size();
    Matrix v(m, vi.size()), u(m, ui.size());
    std::copy(vbuf.begin(), vbuf.end(), v.data().begin());
    std::copy(ubuf.begin(), ubuf.end(), u.data().begin());
    ObservationTable table(std::move(y), std::move(a), std::move(v), std::move(u),
                           std::move(s));
    if (table.count_source() > 0 && table.treatment_levels().size() < 2)
        throw DataError(origin + ": fewer than two treatment levels among source rows");
    return table;
}

inline ObservationTable load_csv(const std::string& path, const ColumnSchema& schema) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open '" + path + "'");
    return load_csv_stream(in, schema, path);
}

namespace detail {
inline std::string fmt_full(double x) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", x);
    return buf;
}
}  // namespace detail

inline void emit_csv_stream(const ObservationTable& t, const ColumnSchema& schema,
                            std::ostream& out) {
    out << schema.outcome << ',' << schema.treatment << ',' << schema.source;
    for (std::size_t j = 0; j < t.p_v(); ++j) out << ",v" << (j + 1);
    for (std::size_t j = 0; j < t.p_u(); ++j) out << ",u" << (j + 1);
    out << '\n';
    for (std::size_t i = 0; i < t.n(); ++i) {
        if (t.y(i)) out << detail::fmt_full(*t.y(i));
        out << ',';
        if (t.a(i)) out << *t.a(i);
        out << ',' << (t.is_source(i) ? 1 : 0);
        for (double x : t.v_row(i)) out << ',' << detail::fmt_full(x);
        if (t.is_source(i))
            for (double x : t.u().row(i)) out << ',' << detail::fmt_full(x);
        else
            for (std::size_t j = 0; j < t.p_u(); ++j) out << ',';
        out << '\n';
    }
}

inline void emit_csv(const ObservationTable& t, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write '" + path + "'");
    ColumnSchema schema;
    emit_csv_stream(t, schema, out);
}

// ---------------------------------------------------------------------------
// Splits. The pooled data is split, stratified by population: source rows
// are partitioned into train1/train2/cal by the stated fractions, and target
// rows are partitioned by the same fractions. Training-fold target rows feed
// only the source-membership fit (every other fit conditions on S=1); the
// calibration fold's target rows feed the estimating equation. Keeping the
// folds proportional in both populations keeps the calibration equation's
// population shares intact.
// ---------------------------------------------------------------------------

struct SplitAssignment {
    std::vector<std::size_t> train1;
    std::vector<std::size_t> train2;
    std::vector<std::size_t> cal;
    std::size_t universe = 0;

    std::vector<std::size_t> train_all() const {
        std::vector<std::size_t> out(train1);
        out.insert(out.end(), train2.begin(), train2.end());
        return out;
    }

    void validate() const {
        std::vector<std::uint8_t> seen(universe, 0);
        auto mark = [&](const std::vector<std::size_t>& fold) {
            for (std::size_t i : fold) {
                if (i >= universe) throw DataError("split index out of range");
                if (seen[i]++) throw DataError("row assigned to two folds");
            }
        };
        mark(train1);
        mark(train2);
        mark(cal);
    }
};

inline SplitAssignment make_splits(const ObservationTable& t, double train_frac,
                                   double cal_frac, std::uint64_t seed) {
    if (!(train_frac > 0.0) || !(cal_frac > 0.0))
        throw ConfigError("split fractions must be positive");
    if (train_frac + cal_frac > 1.0 + 1e-12)
        throw ConfigError("fractions exceed 1");

    std::vector<std::size_t> src, tgt;
    for (std::size_t i = 0; i < t.n(); ++i)
        (t.is_source(i) ? src : tgt).push_back(i);

    std::mt19937_64 rng(seed);
    std::shuffle(src.begin(), src.end(), rng);
    std::shuffle(tgt.begin(), tgt.end(), rng);

    SplitAssignment sp;
    sp.universe = t.n();
    // The half-split rounds down in one stratum and up in the other so that
    // |train1| and |train2| differ by at most one row overall.
    auto deal = [&](const std::vector<std::size_t>& rows, bool ceil_half) {
        std::size_t n_train = static_cast<std::size_t>(
            std::llround(train_frac * static_cast<double>(rows.size())));
        n_train = std::min(n_train, rows.size());
        const std::size_t n1 = ceil_half ? (n_train + 1) / 2 : n_train / 2;
        sp.train1.insert(sp.train1.end(), rows.begin(),
                         rows.begin() + static_cast<std::ptrdiff_t>(n1));
        sp.train2.insert(sp.train2.end(),
                         rows.begin() + static_cast<std::ptrdiff_t>(n1),
                         rows.begin() + static_cast<std::ptrdiff_t>(n_train));
        // cal absorbs the remainder so that every row lands in a fold
        sp.cal.insert(sp.cal.end(), rows.begin() + static_cast<std::ptrdiff_t>(n_train),
                      rows.end());
    };
    deal(src, false);
    deal(tgt, true);
    sp.validate();

    const auto levels = t.treatment_levels();
    if (levels.empty()) throw DataError("no treatment levels among source rows");
    auto has_level = [&](const std::vector<std::size_t>& fold) {
        for (int lv : levels) {
            bool found = false;
            for (std::size_t i : fold)
                if (t.a(i) && *t.a(i) == lv) {
                    found = true;
                    break;
                }
            if (!found) return false;
        }
        return true;
    };
    if (!has_level(sp.train1) || !has_level(sp.train2) || !has_level(sp.cal))
        throw DataError("a fold has no source rows for some treatment level");
    return sp;
}

}  // namespace rtcp
