#pragma once

// Supervised learners backing every nuisance fit: l1-penalized linear and
// logistic regression (coordinate descent), gradient-boosted trees,
// weighted quantile regression via the pinball loss, and a cross-validated
// convex stacker. Fitted models are immutable and shared by handle.

#include <cassert>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "rtcp/common.hpp"
#include "rtcp/gbt.hpp"

namespace rtcp {

// rho_alpha(x) = alpha*|x|*I(x>=0) + (1-alpha)*|x|*I(x<0)
inline double pinball_loss(double x, double alpha) {
    if (!(alpha > 0.0 && alpha < 1.0)) throw NumericError("pinball: alpha not in (0,1)");
    return x >= 0.0 ? alpha * x : (1.0 - alpha) * (-x);
}

inline double trim_probability(double p, double lo = 0.025, double hi = 0.975) {
    return std::clamp(p, lo, hi);
}

struct SampleWeights {
    std::vector<double> w;

    void validate() const {
        bool any_pos = false;
        for (double x : w) {
            if (!std::isfinite(x) || x < 0.0)
                throw NumericError("sample weights must be finite and nonnegative");
            any_pos = any_pos || x > 0.0;
        }
        if (!any_pos) throw NumericError("all sample weights are zero");
    }

    static SampleWeights uniform(std::size_t n) { return {std::vector<double>(n, 1.0)}; }
};

enum class LearnerKind { linear, gbt, stack };

struct LearnerSpec {
    LearnerKind kind = LearnerKind::linear;
    // l1 penalty relative to the data-driven lambda_max; negative requests
    // selection on a 10-value log grid by K-fold CV.
    double lambda_rel = -1.0;
    int cv_folds = 5;
    int grid_size = 10;
    GbtParams gbt;
    std::vector<LearnerSpec> bases;  // for kind == stack
    int stack_folds = 5;
    std::uint64_t seed = 0;

    static LearnerSpec quick_linear(double lam = 1e-3) {
        LearnerSpec s;
        s.lambda_rel = lam;
        return s;
    }
    static LearnerSpec quick_gbt(int trees = 100, int depth = 3) {
        LearnerSpec s;
        s.kind = LearnerKind::gbt;
        s.gbt.trees = trees;
        s.gbt.depth = depth;
        return s;
    }
};

// ---------------------------------------------------------------------------
// Model handles
// ---------------------------------------------------------------------------

class Learner {
public:
    virtual ~Learner() = default;
    virtual std::size_t feature_dim() const = 0;
    virtual std::string kind() const = 0;

    double predict_one(std::span<const double> x) const {
        if (x.size() != feature_dim())
            throw NumericError("predict: expected " + std::to_string(feature_dim()) +
                               " features, got " + std::to_string(x.size()));
        return predict_impl(x);
    }

protected:
    virtual double predict_impl(std::span<const double> x) const = 0;
};

using LearnerModel = std::shared_ptr<const Learner>;

inline std::vector<double> predict_many(const Learner& m, const Matrix& x) {
    std::vector<double> out(x.rows());
    for (std::size_t i = 0; i < x.rows(); ++i) out[i] = m.predict_one(x.row(i));
    return out;
}

class LinearModel final : public Learner {
public:
    std::vector<double> coef;
    double intercept = 0.0;
    bool logistic = false;  // predictions pass through expit
    double lambda = 0.0;

    std::size_t feature_dim() const override { return coef.size(); }
    std::string kind() const override { return logistic ? "logistic" : "linear"; }

protected:
    double predict_impl(std::span<const double> x) const override {
        const double z = intercept + dot(coef, x);
        return logistic ? expit(z) : z;
    }
};

class GbtModel final : public Learner {
public:
    GbtFit fit;
    std::size_t dim = 0;

    std::size_t feature_dim() const override { return dim; }
    std::string kind() const override { return "gbt"; }

protected:
    double predict_impl(std::span<const double> x) const override {
        const double f = fit.raw_score(x);
        return fit.loss == GbtLoss::logistic ? expit(f) : f;
    }
};

class StackModel final : public Learner {
public:
    std::vector<LearnerModel> bases;
    std::vector<double> weights;  // simplex
    std::size_t dim = 0;
    double cv_loss = 0.0;                // achieved combined CV loss
    std::vector<double> base_cv_losses;  // per-base CV losses, same folds

    std::size_t feature_dim() const override { return dim; }
    std::string kind() const override { return "stack"; }

protected:
    double predict_impl(std::span<const double> x) const override {
        double s = 0.0;
        for (std::size_t b = 0; b < bases.size(); ++b)
            s += weights[b] * bases[b]->predict_one(x);
        return s;
    }
};

class ConstantModel final : public Learner {
public:
    double value = 0.0;
    std::size_t dim = 0;

    std::size_t feature_dim() const override { return dim; }
    std::string kind() const override { return "constant"; }

protected:
    double predict_impl(std::span<const double>) const override { return value; }
};

// Clamps an inner model's predictions; used both for probability trimming
// (g, kappa) and for [0,1] clamping of q, m.
class ClampedModel final : public Learner {
public:
    LearnerModel inner;
    double lo = 0.0;
    double hi = 1.0;

    std::size_t feature_dim() const override { return inner->feature_dim(); }
    std::string kind() const override { return "clamped"; }

protected:
    double predict_impl(std::span<const double> x) const override {
        return std::clamp(inner->predict_one(x), lo, hi);
    }
};

// Arbitrary function wrapper; lets the simulation harness inject closed-form
// nuisances through the same interface as fitted models. Not serializable.
class OracleModel final : public Learner {
public:
    std::function<double(std::span<const double>)> fn;
    std::size_t dim = 0;
    std::string label = "oracle";

    std::size_t feature_dim() const override { return dim; }
    std::string kind() const override { return "oracle"; }

protected:
    double predict_impl(std::span<const double> x) const override { return fn(x); }
};

inline LearnerModel make_constant(double value, std::size_t dim) {
    auto m = std::make_shared<ConstantModel>();
    m->value = value;
    m->dim = dim;
    return m;
}

inline LearnerModel make_oracle(std::function<double(std::span<const double>)> fn,
                                std::size_t dim, std::string label = "oracle") {
    auto m = std::make_shared<OracleModel>();
    m->fn = std::move(fn);
    m->dim = dim;
    m->label = std::move(label);
    return m;
}

inline LearnerModel make_clamped(LearnerModel inner, double lo, double hi) {
    auto m = std::make_shared<ClampedModel>();
    m->inner = std::move(inner);
    m->lo = lo;
    m->hi = hi;
    return m;
}

// ---------------------------------------------------------------------------
// Weighted lasso coordinate descent
// ---------------------------------------------------------------------------

namespace detail_fit {

struct Standardized {
    std::vector<std::vector<double>> cols;  // centered and scaled
    std::vector<double> mean, scale;        // scale 0 marks a dropped column
};

inline Standardized standardize(const Matrix& x, std::span<const double> w,
                                double w_tot) {
    Standardized st;
    const std::size_t n = x.rows(), p = x.cols();
    st.cols.assign(p, std::vector<double>(n));
    st.mean.assign(p, 0.0);
    st.scale.assign(p, 0.0);
    for (std::size_t j = 0; j < p; ++j) {
        double m = 0.0;
        for (std::size_t i = 0; i < n; ++i) m += w[i] * x.at(i, j);
        m /= w_tot;
        double v = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double c = x.at(i, j) - m;
            v += w[i] * c * c;
        }
        v /= w_tot;
        st.mean[j] = m;
        st.scale[j] = v > 1e-14 ? std::sqrt(v) : 0.0;
        auto& col = st.cols[j];
        if (st.scale[j] > 0.0)
            for (std::size_t i = 0; i < n; ++i)
                col[i] = (x.at(i, j) - m) / st.scale[j];
        else
            std::fill(col.begin(), col.end(), 0.0);
    }
    return st;
}

inline double soft_threshold(double z, double t) {
    if (z > t) return z - t;
    if (z < -t) return z + t;
    return 0.0;
}

// Minimizes (1/(2*norm)) sum_i w_i (y_i - b0 - x_i beta)^2 + lambda |beta|_1
// over the given columns. beta/b0 are warm-started in place.
inline void lasso_cd(const std::vector<std::vector<double>>& cols,
                     std::span<const double> y, std::span<const double> w, double norm,
                     double lambda, std::vector<double>& beta, double& b0,
                     int max_pass = 2000, double tol = 1e-10) {
    const std::size_t n = y.size(), p = cols.size();
    std::vector<double> resid(n);
    for (std::size_t i = 0; i < n; ++i) {
        double f = b0;
        for (std::size_t j = 0; j < p; ++j) f += beta[j] * cols[j][i];
        resid[i] = y[i] - f;
    }
    std::vector<double> curv(p, 0.0);
    for (std::size_t j = 0; j < p; ++j) {
        double c = 0.0;
        for (std::size_t i = 0; i < n; ++i) c += w[i] * cols[j][i] * cols[j][i];
        curv[j] = c / norm;
    }
    double y_scale = 0.0;
    for (std::size_t i = 0; i < n; ++i) y_scale += w[i] * y[i] * y[i];
    y_scale = std::sqrt(y_scale / norm) + 1e-12;

    for (int pass = 0; pass < max_pass; ++pass) {
        double max_delta = 0.0;
        {  // intercept (unpenalized)
            double num = 0.0;
            for (std::size_t i = 0; i < n; ++i) num += w[i] * resid[i];
            const double d = num / norm;
            b0 += d;
            for (std::size_t i = 0; i < n; ++i) resid[i] -= d;
            max_delta = std::max(max_delta, std::abs(d));
        }
        for (std::size_t j = 0; j < p; ++j) {
            if (curv[j] <= 0.0) continue;
            double rho = 0.0;
            const auto& col = cols[j];
            for (std::size_t i = 0; i < n; ++i) rho += w[i] * col[i] * resid[i];
            rho = rho / norm + curv[j] * beta[j];
            const double bj = soft_threshold(rho, lambda) / curv[j];
            const double d = bj - beta[j];
            if (d != 0.0) {
                beta[j] = bj;
                for (std::size_t i = 0; i < n; ++i) resid[i] -= d * col[i];
                max_delta = std::max(max_delta, std::abs(d));
            }
        }
        if (max_delta < tol * y_scale) break;
    }
}

inline double lambda_max_ls(const std::vector<std::vector<double>>& cols,
                            std::span<const double> y, std::span<const double> w,
                            double norm) {
    double ybar = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) ybar += w[i] * y[i];
    ybar /= norm;
    double lm = 0.0;
    for (const auto& col : cols) {
        double g = 0.0;
        for (std::size_t i = 0; i < y.size(); ++i) g += w[i] * col[i] * (y[i] - ybar);
        lm = std::max(lm, std::abs(g) / norm);
    }
    return lm;
}

inline std::shared_ptr<LinearModel> finish_linear(const Standardized& st,
                                                  const std::vector<double>& beta,
                                                  double b0, bool logistic,
                                                  double lambda) {
    auto m = std::make_shared<LinearModel>();
    m->coef.assign(st.mean.size(), 0.0);
    m->logistic = logistic;
    m->lambda = lambda;
    double shift = 0.0;
    for (std::size_t j = 0; j < st.mean.size(); ++j) {
        if (st.scale[j] > 0.0) {
            m->coef[j] = beta[j] / st.scale[j];
            shift += m->coef[j] * st.mean[j];
        }
    }
    m->intercept = b0 - shift;
    return m;
}

inline std::shared_ptr<LinearModel> fit_linear_ls(const Matrix& x,
                                                  std::span<const double> y,
                                                  std::span<const double> w,
                                                  double lambda_rel) {
    const double w_tot = std::accumulate(w.begin(), w.end(), 0.0);
    if (w_tot <= 0.0) throw NumericError("fit: all weights zero");
    const auto st = standardize(x, w, w_tot);
    const double lmax = lambda_max_ls(st.cols, y, w, w_tot);
    const double lambda = std::max(0.0, lambda_rel) * lmax;
    std::vector<double> beta(x.cols(), 0.0);
    double b0 = 0.0;
    lasso_cd(st.cols, y, w, w_tot, lambda, beta, b0, 4000, 1e-12);
    return finish_linear(st, beta, b0, false, lambda);
}

// Proximal Newton (IRLS with an inner weighted lasso) for l1 logistic loss.
inline std::shared_ptr<LinearModel> fit_logistic_ls(const Matrix& x,
                                                    std::span<const double> y,
                                                    std::span<const double> w,
                                                    double lambda_rel) {
    const std::size_t n = x.rows();
    const double w_tot = std::accumulate(w.begin(), w.end(), 0.0);
    if (w_tot <= 0.0) throw NumericError("fit: all weights zero");
    const auto st = standardize(x, w, w_tot);

    double ybar = 0.0;
    for (std::size_t i = 0; i < n; ++i) ybar += w[i] * y[i];
    ybar /= w_tot;
    if (ybar <= 0.0 || ybar >= 1.0) throw NumericError("single-class input");

    const double lmax = lambda_max_ls(st.cols, y, w, w_tot);
    const double lambda = std::max(0.0, lambda_rel) * lmax;

    std::vector<double> beta(x.cols(), 0.0);
    double b0 = logit(ybar);
    std::vector<double> eta(n), irls_w(n), z(n);
    double prev_obj = kInf;
    for (int outer = 0; outer < 40; ++outer) {
        for (std::size_t i = 0; i < n; ++i) {
            double f = b0;
            for (std::size_t j = 0; j < x.cols(); ++j) f += beta[j] * st.cols[j][i];
            eta[i] = f;
        }
        double obj = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            // -loglik: log(1+exp(eta)) - y*eta, stable form
            const double e = eta[i];
            const double l = e > 0 ? e + std::log1p(std::exp(-e)) : std::log1p(std::exp(e));
            obj += w[i] * (l - y[i] * e);
        }
        obj /= w_tot;
        for (double bj : beta) obj += lambda * std::abs(bj);
        if (std::abs(prev_obj - obj) < 1e-10 * (1.0 + std::abs(obj))) break;
        prev_obj = obj;

        for (std::size_t i = 0; i < n; ++i) {
            const double p = expit(eta[i]);
            const double hw = std::max(p * (1.0 - p), 1e-6);
            irls_w[i] = w[i] * hw;
            z[i] = eta[i] + (y[i] - p) / hw;
        }
        lasso_cd(st.cols, z, irls_w, w_tot, lambda, beta, b0, 400, 1e-11);
    }
    return finish_linear(st, beta, b0, true, lambda);
}

// Fold ids striped over a shuffled ordering; deterministic per seed.
inline std::vector<int> fold_ids(std::size_t n, int folds, std::uint64_t seed) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<int> id(n);
    for (std::size_t k = 0; k < n; ++k) id[order[k]] = static_cast<int>(k % folds);
    return id;
}

}  // namespace detail_fit

// ---------------------------------------------------------------------------
// Smoothed weighted quantile regression (linear kind)
// ---------------------------------------------------------------------------

namespace detail_fit {

// Convolution-smoothed pinball: quadratic within a bandwidth h of zero,
// matching rho_alpha outside.
inline double smoothed_pinball(double u, double alpha, double h) {
    if (u > h) return alpha * u;
    if (u < -h) return (alpha - 1.0) * u;
    return (alpha - 0.5) * u + u * u / (4.0 * h) + h / 4.0;
}

inline double smoothed_pinball_deriv(double u, double alpha, double h) {
    if (u > h) return alpha;
    if (u < -h) return alpha - 1.0;
    return alpha - 0.5 + u / (2.0 * h);
}

inline std::shared_ptr<LinearModel> fit_quantile_linear(const Matrix& x,
                                                        std::span<const double> y,
                                                        std::span<const double> w,
                                                        double alpha,
                                                        double lambda_rel = 0.0) {
    const std::size_t n = x.rows(), p = x.cols();
    const double w_tot = std::accumulate(w.begin(), w.end(), 0.0);
    if (w_tot <= 0.0) throw NumericError("fit: all weights zero");
    const auto st = standardize(x, w, w_tot);

    // Warm start: weighted least squares, intercept shifted so that the
    // weighted alpha-quantile of residuals is zero.
    std::vector<double> beta(p, 0.0);
    double b0 = 0.0;
    lasso_cd(st.cols, y, w, w_tot, 0.0, beta, b0, 300, 1e-8);
    {
        std::vector<double> resid(n);
        for (std::size_t i = 0; i < n; ++i) {
            double f = b0;
            for (std::size_t j = 0; j < p; ++j) f += beta[j] * st.cols[j][i];
            resid[i] = y[i] - f;
        }
        b0 += weighted_quantile_inf(resid, w, alpha);
    }

    double sd_y = 0.0, my = 0.0;
    for (std::size_t i = 0; i < n; ++i) my += w[i] * y[i];
    my /= w_tot;
    for (std::size_t i = 0; i < n; ++i) sd_y += w[i] * (y[i] - my) * (y[i] - my);
    sd_y = std::sqrt(sd_y / w_tot) + 1e-12;

    const double ess = effective_sample_size(w);
    double h = sd_y * std::pow((static_cast<double>(p) + 1.0 + std::log(std::max(ess, 4.0))) /
                                   std::max(ess, 4.0),
                               0.4);
    h = std::max(h, 1e-3 * sd_y);

    std::vector<double> grad(p + 1), resid(n);
    auto eval = [&](const std::vector<double>& bt, double bb, double hh, bool want_grad) {
        double obj = 0.0;
        std::fill(grad.begin(), grad.end(), 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            double f = bb;
            for (std::size_t j = 0; j < p; ++j) f += bt[j] * st.cols[j][i];
            const double u = y[i] - f;
            resid[i] = u;
            obj += w[i] * smoothed_pinball(u, alpha, hh);
            if (want_grad) {
                const double d = -w[i] * smoothed_pinball_deriv(u, alpha, hh);
                grad[p] += d;
                for (std::size_t j = 0; j < p; ++j) grad[j] += d * st.cols[j][i];
            }
        }
        obj /= w_tot;
        if (want_grad)
            for (auto& gv : grad) gv /= w_tot;
        return obj;
    };

    // l1 scale anchored at the null-slope gradient, mirroring the lasso
    // lambda_max convention.
    double lambda = 0.0;
    if (lambda_rel > 0.0) {
        std::vector<double> zero(p, 0.0);
        const double c0 = weighted_quantile_inf(y, w, alpha);
        eval(zero, c0, h, true);
        double gmax = 0.0;
        for (std::size_t j = 0; j < p; ++j) gmax = std::max(gmax, std::abs(grad[j]));
        lambda = lambda_rel * gmax;
    }

    // Smoothing stages with Barzilai-Borwein gradient steps. BB is
    // non-monotone, so the best-seen iterate is tracked and restored; a step
    // that blows the objective up restarts from it with a shorter step.
    for (int stage = 0; stage < 3; ++stage) {
        const double hh = std::max(h / std::pow(5.0, stage), 1e-4 * sd_y);
        std::vector<double> prev_beta = beta, prev_grad;
        double prev_b0 = b0;
        std::vector<double> best_beta = beta;
        double best_b0 = b0;
        double best_obj = eval(beta, b0, hh, false);
        double step = 1.0;
        for (int it = 0; it < 400; ++it) {
            const double obj = eval(beta, b0, hh, true);
            if (obj < best_obj) {
                best_obj = obj;
                best_beta = beta;
                best_b0 = b0;
            } else if (obj > best_obj * 1.5 + 1e-8) {
                beta = best_beta;
                b0 = best_b0;
                step *= 0.25;
                eval(beta, b0, hh, true);
            }
            double gnorm = 0.0;
            for (double gv : grad) gnorm += gv * gv;
            if (std::sqrt(gnorm) < 1e-8 * (1.0 + sd_y)) break;
            if (it > 0) {
                double num = 0.0, den = 0.0;
                for (std::size_t j = 0; j < p; ++j) {
                    const double ds = beta[j] - prev_beta[j];
                    const double dg = grad[j] - prev_grad[j];
                    num += ds * ds;
                    den += ds * dg;
                }
                const double dsb = b0 - prev_b0, dgb = grad[p] - prev_grad[p];
                num += dsb * dsb;
                den += dsb * dgb;
                step = den > 1e-14 ? num / den : step * 1.5;
                step = std::clamp(step, 1e-7, 1e3);
            }
            prev_beta = beta;
            prev_b0 = b0;
            prev_grad = grad;
            for (std::size_t j = 0; j < p; ++j) {
                beta[j] -= step * grad[j];
                if (lambda > 0.0) beta[j] = soft_threshold(beta[j], step * lambda);
            }
            b0 -= step * grad[p];
        }
        if (eval(beta, b0, hh, false) > best_obj) {
            beta = best_beta;
            b0 = best_b0;
        }
    }

    // Exact intercept polish: with slopes held fixed, the pinball-optimal
    // intercept shift is the weighted alpha-quantile of the residuals.
    {
        eval(beta, b0, h, false);  // refresh resid
        b0 += weighted_quantile_inf(resid, w, alpha);
    }
    return finish_linear(st, beta, b0, false, 0.0);
}

}  // namespace detail_fit

// ---------------------------------------------------------------------------
// Public fit entry points
// ---------------------------------------------------------------------------

LearnerModel fit_stack(const Matrix& x, std::span<const double> y, bool classification,
                       const std::vector<LearnerSpec>& bases, int folds,
                       const SampleWeights* weights);

namespace detail_fit {

inline std::vector<double> resolved_weights(std::size_t n, const SampleWeights* w) {
    if (!w) return std::vector<double>(n, 1.0);
    if (w->w.size() != n) throw NumericError("weights length mismatch");
    w->validate();
    return w->w;
}

inline void check_design(const Matrix& x, std::size_t ny) {
    if (x.rows() != ny) throw NumericError("rows(X) != len(y)");
    if (x.rows() < 2) throw NumericError("degenerate design: fewer than 2 rows");
    for (double v : x.data())
        if (!std::isfinite(v)) throw NumericError("non-finite value in design matrix");
}

// CV over the fixed log-spaced grid of relative penalties.
template <typename FitFn, typename LossFn>
double select_lambda_cv(const Matrix& x, std::span<const double> y,
                        std::span<const double> w, const LearnerSpec& spec, FitFn fit,
                        LossFn loss) {
    const int folds = std::max(2, spec.cv_folds);
    const auto ids = fold_ids(x.rows(), folds, spec.seed ^ 0xcdf01dULL);
    std::vector<double> grid(static_cast<std::size_t>(spec.grid_size));
    for (std::size_t k = 0; k < grid.size(); ++k)
        grid[k] = std::pow(10.0, -3.0 * (static_cast<double>(k) /
                                         std::max<double>(1.0, grid.size() - 1.0)));
    // grid runs 1 -> 1e-3 (relative to lambda_max)

    double best_lam = grid.back(), best_loss = kInf;
    for (double lam : grid) {
        double total = 0.0, wsum = 0.0;
        for (int f = 0; f < folds; ++f) {
            std::vector<std::size_t> tr, te;
            for (std::size_t i = 0; i < x.rows(); ++i)
                (ids[i] == f ? te : tr).push_back(i);
            if (tr.size() < 2 || te.empty()) continue;
            Matrix xt = x.take_rows(tr);
            std::vector<double> yt(tr.size()), wt(tr.size());
            for (std::size_t k = 0; k < tr.size(); ++k) {
                yt[k] = y[tr[k]];
                wt[k] = w[tr[k]];
            }
            LearnerModel m;
            try {
                m = fit(xt, yt, wt, lam);
            } catch (const NumericError&) {
                continue;
            }
            for (std::size_t i : te) {
                total += w[i] * loss(m->predict_one(x.row(i)), y[i]);
                wsum += w[i];
            }
        }
        if (wsum > 0.0 && total / wsum < best_loss - 1e-12) {
            best_loss = total / wsum;
            best_lam = lam;
        }
    }
    return best_lam;
}

}  // namespace detail_fit

inline LearnerModel fit_regressor(const Matrix& x, std::span<const double> y,
                                  const SampleWeights* weights,
                                  const LearnerSpec& spec) {
    detail_fit::check_design(x, y.size());
    if (!all_finite(y)) throw NumericError("non-finite targets");
    const auto w = detail_fit::resolved_weights(x.rows(), weights);

    switch (spec.kind) {
        case LearnerKind::linear: {
            double lam = spec.lambda_rel;
            if (lam < 0.0) {
                auto fit1 = [](const Matrix& xt, std::span<const double> yt,
                               std::span<const double> wt, double l) {
                    return LearnerModel(detail_fit::fit_linear_ls(xt, yt, wt, l));
                };
                auto sq = [](double p, double t) { return (p - t) * (p - t); };
                lam = detail_fit::select_lambda_cv(x, y, w, spec, fit1, sq);
            }
            return detail_fit::fit_linear_ls(x, y, w, lam);
        }
        case LearnerKind::gbt: {
            auto m = std::make_shared<GbtModel>();
            m->fit = fit_gbt(x, y, w, GbtLoss::squared, spec.gbt);
            m->dim = x.cols();
            return m;
        }
        case LearnerKind::stack: {
            SampleWeights sw{w};
            return fit_stack(x, y, false, spec.bases, spec.stack_folds, &sw);
        }
    }
    throw ConfigError("unknown learner kind");
}

inline LearnerModel fit_classifier(const Matrix& x, std::span<const double> labels,
                                   const SampleWeights* weights,
                                   const LearnerSpec& spec) {
    detail_fit::check_design(x, labels.size());
    bool any0 = false, any1 = false;
    for (double v : labels) {
        if (v != 0.0 && v != 1.0) throw NumericError("labels must be 0/1");
        (v == 0.0 ? any0 : any1) = true;
    }
    if (!any0 || !any1) throw NumericError("single-class input");
    const auto w = detail_fit::resolved_weights(x.rows(), weights);

    switch (spec.kind) {
        case LearnerKind::linear: {
            double lam = spec.lambda_rel;
            if (lam < 0.0) {
                auto fit1 = [](const Matrix& xt, std::span<const double> yt,
                               std::span<const double> wt, double l) {
                    return LearnerModel(detail_fit::fit_logistic_ls(xt, yt, wt, l));
                };
                // Brier loss keeps CV comparable across degenerate folds.
                auto br = [](double p, double t) { return (p - t) * (p - t); };
                lam = detail_fit::select_lambda_cv(x, labels, w, spec, fit1, br);
            }
            return detail_fit::fit_logistic_ls(x, labels, w, lam);
        }
        case LearnerKind::gbt: {
            auto m = std::make_shared<GbtModel>();
            m->fit = fit_gbt(x, labels, w, GbtLoss::logistic, spec.gbt);
            m->dim = x.cols();
            return m;
        }
        case LearnerKind::stack: {
            SampleWeights sw{w};
            return fit_stack(x, labels, true, spec.bases, spec.stack_folds, &sw);
        }
    }
    throw ConfigError("unknown learner kind");
}

inline LearnerModel fit_weighted_quantile(const Matrix& x, std::span<const double> y,
                                          const SampleWeights& weights, double alpha,
                                          const LearnerSpec& spec) {
    if (!(alpha > 0.0 && alpha < 1.0))
        throw NumericError("quantile level must lie in (0,1)");
    detail_fit::check_design(x, y.size());
    weights.validate();
    if (weights.w.size() != x.rows()) throw NumericError("weights length mismatch");

    // Constant-only designs get the exact weighted empirical quantile.
    bool degenerate = x.cols() == 0;
    if (!degenerate) {
        degenerate = true;
        for (std::size_t j = 0; j < x.cols() && degenerate; ++j) {
            const double first = x.at(0, j);
            for (std::size_t i = 1; i < x.rows(); ++i)
                if (x.at(i, j) != first) {
                    degenerate = false;
                    break;
                }
        }
    }
    if (degenerate)
        return make_constant(weighted_quantile_inf(y, weights.w, alpha), x.cols());

    switch (spec.kind) {
        case LearnerKind::linear:
            return detail_fit::fit_quantile_linear(x, y, weights.w, alpha,
                                                   std::max(0.0, spec.lambda_rel));
        case LearnerKind::gbt: {
            auto m = std::make_shared<GbtModel>();
            m->fit = fit_gbt(x, y, weights.w, GbtLoss::pinball, spec.gbt, alpha);
            m->dim = x.cols();
            return m;
        }
        case LearnerKind::stack:
            throw ConfigError("stacking is not supported for quantile fits");
    }
    throw ConfigError("unknown learner kind");
}

// ---------------------------------------------------------------------------
// Stacking: convex combination chosen by projected gradient on the simplex
// over cross-validated predictions, then bases refit on all rows.
// ---------------------------------------------------------------------------

namespace detail_fit {

inline std::vector<double> project_simplex(std::vector<double> v) {
    std::vector<double> u = v;
    std::sort(u.begin(), u.end(), std::greater<>());
    double css = 0.0, tau = 0.0;
    int k = 0;
    for (std::size_t i = 0; i < u.size(); ++i) {
        css += u[i];
        const double t = (css - 1.0) / static_cast<double>(i + 1);
        if (u[i] - t > 0.0) {
            tau = t;
            k = static_cast<int>(i + 1);
        }
    }
    (void)k;
    for (auto& x : v) x = std::max(0.0, x - tau);
    return v;
}

}  // namespace detail_fit

inline LearnerModel fit_stack(const Matrix& x, std::span<const double> y,
                              bool classification, const std::vector<LearnerSpec>& bases,
                              int folds, const SampleWeights* weights) {
    if (bases.size() < 1) throw ConfigError("stack requires at least one base learner");
    if (folds < 2) throw ConfigError("stack requires folds >= 2");
    const auto w = detail_fit::resolved_weights(x.rows(), weights);
    const double w_tot = std::accumulate(w.begin(), w.end(), 0.0);
    const std::size_t n = x.rows();
    const std::size_t nb = bases.size();

    auto fit_base = [&](const LearnerSpec& spec, const Matrix& xt,
                        std::span<const double> yt,
                        const SampleWeights* wt) -> LearnerModel {
        return classification ? fit_classifier(xt, yt, wt, spec)
                              : fit_regressor(xt, yt, wt, spec);
    };

    const auto ids = detail_fit::fold_ids(n, folds, 0x57ac4ULL);
    Matrix oof(n, nb);
    double ybar = 0.0;
    for (std::size_t i = 0; i < n; ++i) ybar += w[i] * y[i];
    ybar /= w_tot;

    std::vector<bool> base_ok(nb, false);
    for (std::size_t b = 0; b < nb; ++b) {
        for (int f = 0; f < folds; ++f) {
            std::vector<std::size_t> tr, te;
            for (std::size_t i = 0; i < n; ++i) (ids[i] == f ? te : tr).push_back(i);
            bool ok = false;
            if (tr.size() >= 2) {
                Matrix xt = x.take_rows(tr);
                std::vector<double> yt(tr.size());
                SampleWeights wt;
                wt.w.resize(tr.size());
                for (std::size_t k = 0; k < tr.size(); ++k) {
                    yt[k] = y[tr[k]];
                    wt.w[k] = w[tr[k]];
                }
                try {
                    auto m = fit_base(bases[b], xt, yt, &wt);
                    for (std::size_t i : te) oof.at(i, b) = m->predict_one(x.row(i));
                    ok = true;
                } catch (const std::exception&) {
                    ok = false;
                }
            }
            if (!ok)
                for (std::size_t i : te) oof.at(i, b) = ybar;
            else
                base_ok[b] = true;
        }
    }
    if (std::none_of(base_ok.begin(), base_ok.end(), [](bool b) { return b; }))
        throw NumericError("every base learner failed on every fold");

    // Quadratic (Brier for classifiers) CV loss over the simplex.
    std::vector<double> coef(nb, 1.0 / static_cast<double>(nb));
    std::vector<double> grad(nb);
    double step = 1.0;
    {
        double diag_max = 0.0;
        for (std::size_t b = 0; b < nb; ++b) {
            double s = 0.0;
            for (std::size_t i = 0; i < n; ++i) s += w[i] * oof.at(i, b) * oof.at(i, b);
            diag_max = std::max(diag_max, s / w_tot);
        }
        step = 0.5 / std::max(diag_max * static_cast<double>(nb), 1e-8);
    }
    for (int it = 0; it < 4000; ++it) {
        std::fill(grad.begin(), grad.end(), 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            double pred = 0.0;
            for (std::size_t b = 0; b < nb; ++b) pred += coef[b] * oof.at(i, b);
            const double r = pred - y[i];
            for (std::size_t b = 0; b < nb; ++b) grad[b] += 2.0 * w[i] * r * oof.at(i, b);
        }
        for (auto& gv : grad) gv /= w_tot;
        std::vector<double> next(nb);
        for (std::size_t b = 0; b < nb; ++b) next[b] = coef[b] - step * grad[b];
        next = detail_fit::project_simplex(std::move(next));
        double delta = 0.0;
        for (std::size_t b = 0; b < nb; ++b) delta = std::max(delta, std::abs(next[b] - coef[b]));
        coef = std::move(next);
        if (delta < 1e-12) break;
    }

    auto m = std::make_shared<StackModel>();
    m->dim = x.cols();
    m->weights = coef;
    auto cv_loss_of = [&](const std::vector<double>& cf) {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            double pred = 0.0;
            for (std::size_t b = 0; b < nb; ++b) pred += cf[b] * oof.at(i, b);
            s += w[i] * (pred - y[i]) * (pred - y[i]);
        }
        return s / w_tot;
    };
    m->cv_loss = cv_loss_of(coef);
    m->base_cv_losses.resize(nb);
    for (std::size_t b = 0; b < nb; ++b) {
        std::vector<double> unit(nb, 0.0);
        unit[b] = 1.0;
        m->base_cv_losses[b] = cv_loss_of(unit);
    }
    SampleWeights full_w{w};
    for (std::size_t b = 0; b < nb; ++b) {
        if (base_ok[b] && coef[b] > 0.0) {
            m->bases.push_back(fit_base(bases[b], x, y, &full_w));
        } else {
            m->bases.push_back(make_constant(ybar, x.cols()));
        }
    }
    return m;
}

}  // namespace rtcp
