#pragma once

// Gradient-boosted regression trees with squared, logistic and pinball
// losses. Exact greedy splits; fixed shallow defaults keep fits fast at
// simulation scale.

#include <algorithm>
#include <cstdint>
#include <random>
#include <vector>

#include "rtcp/common.hpp"

namespace rtcp {

enum class GbtLoss { squared, logistic, pinball };

struct GbtParams {
    int depth = 3;
    int trees = 200;
    double learning_rate = 0.1;
    double subsample = 0.8;
    int min_leaf = 5;
    double reg_lambda = 1.0;
    std::uint64_t seed = 0;
};

struct TreeNode {
    int feature = -1;  // -1 marks a leaf
    double threshold = 0.0;
    int left = -1;
    int right = -1;
    double value = 0.0;
};

struct Tree {
    std::vector<TreeNode> nodes;

    double predict(std::span<const double> x) const {
        int i = 0;
        while (nodes[static_cast<std::size_t>(i)].feature >= 0) {
            const auto& nd = nodes[static_cast<std::size_t>(i)];
            i = x[static_cast<std::size_t>(nd.feature)] <= nd.threshold ? nd.left
                                                                        : nd.right;
        }
        return nodes[static_cast<std::size_t>(i)].value;
    }
};

struct GbtFit {
    double base_score = 0.0;
    std::vector<Tree> trees;
    GbtLoss loss = GbtLoss::squared;
    double learning_rate = 0.1;
    double pinball_alpha = 0.5;

    double raw_score(std::span<const double> x) const {
        double f = base_score;
        for (const auto& t : trees) f += learning_rate * t.predict(x);
        return f;
    }
};

namespace detail_gbt {

struct SplitChoice {
    int feature = -1;
    double threshold = 0.0;
    double gain = 0.0;
};

inline double leaf_objective(double g, double h, double lambda) {
    return g * g / (h + lambda);
}

// Greedy best split of `rows` on squared-loss statistics (g, h).
inline SplitChoice best_split(const Matrix& x, const std::vector<double>& g,
                              const std::vector<double>& h,
                              const std::vector<std::size_t>& rows, int min_leaf,
                              double lambda) {
    SplitChoice best;
    double g_tot = 0.0, h_tot = 0.0;
    for (std::size_t r : rows) {
        g_tot += g[r];
        h_tot += h[r];
    }
    const double parent = leaf_objective(g_tot, h_tot, lambda);

    std::vector<std::size_t> order(rows);
    for (std::size_t j = 0; j < x.cols(); ++j) {
        std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            return x.at(a, j) < x.at(b, j);
        });
        double gl = 0.0, hl = 0.0;
        for (std::size_t k = 0; k + 1 < order.size(); ++k) {
            gl += g[order[k]];
            hl += h[order[k]];
            const double xv = x.at(order[k], j);
            const double xn = x.at(order[k + 1], j);
            if (xn <= xv) continue;  // tie, not a valid cut
            const std::size_t nl = k + 1, nr = order.size() - nl;
            if (nl < static_cast<std::size_t>(min_leaf) ||
                nr < static_cast<std::size_t>(min_leaf))
                continue;
            const double gain = leaf_objective(gl, hl, lambda) +
                                leaf_objective(g_tot - gl, h_tot - hl, lambda) - parent;
            if (gain > best.gain + 1e-12) {
                best = {static_cast<int>(j), 0.5 * (xv + xn), gain};
            }
        }
    }
    return best;
}

}  // namespace detail_gbt

// Fits a boosted ensemble on rows 0..n-1 of x. Pinball leaf values are
// weighted empirical quantiles of the current residuals.
inline GbtFit fit_gbt(const Matrix& x, std::span<const double> y,
                      std::span<const double> w, GbtLoss loss, const GbtParams& params,
                      double pinball_alpha = 0.5) {
    const std::size_t n = x.rows();
    if (n == 0) throw NumericError("fit_gbt: no rows");

    GbtFit fit;
    fit.loss = loss;
    fit.learning_rate = params.learning_rate;
    fit.pinball_alpha = pinball_alpha;

    const double w_tot = std::accumulate(w.begin(), w.end(), 0.0);
    if (w_tot <= 0.0) throw NumericError("fit_gbt: all weights zero");

    double wy = 0.0;
    for (std::size_t i = 0; i < n; ++i) wy += w[i] * y[i];
    switch (loss) {
        case GbtLoss::squared: fit.base_score = wy / w_tot; break;
        case GbtLoss::logistic: {
            const double p = std::clamp(wy / w_tot, 1e-6, 1.0 - 1e-6);
            fit.base_score = logit(p);
            break;
        }
        case GbtLoss::pinball:
            fit.base_score = weighted_quantile_inf(y, w, pinball_alpha);
            break;
    }

    std::vector<double> f(n, fit.base_score);
    std::vector<double> g(n), h(n);
    std::vector<std::size_t> all_rows(n);
    std::iota(all_rows.begin(), all_rows.end(), std::size_t{0});
    std::mt19937_64 rng(params.seed);

    for (int t = 0; t < params.trees; ++t) {
        for (std::size_t i = 0; i < n; ++i) {
            const double resid = y[i] - f[i];
            switch (loss) {
                case GbtLoss::squared:
                    g[i] = -w[i] * resid;
                    h[i] = w[i];
                    break;
                case GbtLoss::logistic: {
                    const double p = expit(f[i]);
                    g[i] = w[i] * (p - y[i]);
                    h[i] = w[i] * std::max(p * (1.0 - p), 1e-6);
                    break;
                }
                case GbtLoss::pinball:
                    g[i] = -w[i] * (resid >= 0.0 ? pinball_alpha : pinball_alpha - 1.0);
                    h[i] = w[i];
                    break;
            }
        }

        std::vector<std::size_t> rows = all_rows;
        if (params.subsample < 1.0 && n > 8) {
            std::shuffle(rows.begin(), rows.end(), rng);
            rows.resize(std::max<std::size_t>(
                static_cast<std::size_t>(params.subsample * static_cast<double>(n)),
                static_cast<std::size_t>(params.min_leaf) * 2));
        }

        Tree tree;
        tree.nodes.emplace_back();
        // (node, rows, depth) work list; depth-first growth.
        struct Item {
            int node;
            std::vector<std::size_t> rows;
            int depth;
        };
        std::vector<Item> stack;
        stack.push_back({0, std::move(rows), 0});
        while (!stack.empty()) {
            Item it = std::move(stack.back());
            stack.pop_back();
            detail_gbt::SplitChoice sp;
            if (it.depth < params.depth)
                sp = detail_gbt::best_split(x, g, h, it.rows, params.min_leaf,
                                            params.reg_lambda);
            if (sp.feature < 0) {
                // Leaf value per loss.
                double val = 0.0;
                if (loss == GbtLoss::pinball) {
                    std::vector<double> resid, ww;
                    resid.reserve(it.rows.size());
                    ww.reserve(it.rows.size());
                    for (std::size_t r : it.rows) {
                        resid.push_back(y[r] - f[r]);
                        ww.push_back(w[r]);
                    }
                    double sw = std::accumulate(ww.begin(), ww.end(), 0.0);
                    val = sw > 0.0 ? weighted_quantile_inf(resid, ww, pinball_alpha)
                                   : 0.0;
                } else {
                    double gs = 0.0, hs = 0.0;
                    for (std::size_t r : it.rows) {
                        gs += g[r];
                        hs += h[r];
                    }
                    val = hs > 0.0 ? -gs / (hs + params.reg_lambda) : 0.0;
                }
                tree.nodes[static_cast<std::size_t>(it.node)].value = val;
                continue;
            }
            std::vector<std::size_t> left, right;
            for (std::size_t r : it.rows)
                (x.at(r, static_cast<std::size_t>(sp.feature)) <= sp.threshold ? left
                                                                               : right)
                    .push_back(r);
            const int l = static_cast<int>(tree.nodes.size());
            tree.nodes.emplace_back();
            const int r2 = static_cast<int>(tree.nodes.size());
            tree.nodes.emplace_back();
            auto& nd = tree.nodes[static_cast<std::size_t>(it.node)];
            nd.feature = sp.feature;
            nd.threshold = sp.threshold;
            nd.left = l;
            nd.right = r2;
            stack.push_back({r2, std::move(right), it.depth + 1});
            stack.push_back({l, std::move(left), it.depth + 1});
        }

        for (std::size_t i = 0; i < n; ++i)
            f[i] += params.learning_rate * tree.predict(x.row(i));
        fit.trees.push_back(std::move(tree));
    }
    return fit;
}

}  // namespace rtcp
