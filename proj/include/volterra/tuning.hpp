#pragma once

// Hyperparameter tuning: marginal likelihood, residual whiteness and
// independence tests, and a bounded multistart Nelder–Mead driver.

#include "volterra/errors.hpp"
#include "volterra/kernel_model.hpp"
#include "volterra/regularizers.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include <boost/math/distributions/binomial.hpp>
#include <boost/math/distributions/normal.hpp>
#include <gsl/gsl_errno.h>
#include <gsl/gsl_multimin.h>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <functional>
#include <future>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace volterra {

// ---------------------------------------------------------------------------
// Marginal likelihood

/// Output space factors Σ_Y = K·P·Kᵀ + σ²I (N×N). Parameter space uses the
/// determinant lemma and Woodbury identity on σ²I + LᵀKᵀKL (nθ×nθ), with P = LLᵀ.
enum class MlRoute { Auto, OutputSpace, ParameterSpace };

/// −2·log p(Y) up to the constant N·log 2π: Yᵀ·Σ_Y⁻¹·Y + log det Σ_Y.
class MarginalLikelihood {
public:
    MarginalLikelihood(Matrix K, Vector Y) : K_(std::move(K)), Y_(std::move(Y)) {
        if (K_.rows() != Y_.size()) throw std::invalid_argument("MarginalLikelihood: K rows vs Y length");
        if (Y_.size() < 1) throw std::invalid_argument("MarginalLikelihood: empty output");
        G_ = Matrix::Zero(K_.cols(), K_.cols());
        G_.selfadjointView<Eigen::Lower>().rankUpdate(K_.transpose());
        G_.triangularView<Eigen::StrictlyUpper>() = G_.transpose();
        b_ = K_.transpose() * Y_;
        yy_ = Y_.squaredNorm();
    }

    const Matrix& K() const noexcept { return K_; }
    const Vector& Y() const noexcept { return Y_; }
    std::size_t N() const noexcept { return static_cast<std::size_t>(Y_.size()); }
    std::size_t n_theta() const noexcept { return static_cast<std::size_t>(K_.cols()); }

    /// Throws ConditioningError when a covariance block or Σ_Y cannot be factorized.
    double evaluate(const std::vector<CovarianceBlock>& blocks, double noise_var, MlRoute route = MlRoute::Auto) const {
        if (!(noise_var > 0.0)) throw std::invalid_argument("marginal likelihood: noise variance must be > 0");
        std::size_t covered = 0;
        for (const auto& b : blocks) {
            if (b.offset != covered) throw std::invalid_argument("marginal likelihood: blocks must tile theta");
            covered += static_cast<std::size_t>(b.P.rows());
        }
        if (covered != n_theta()) throw std::invalid_argument("marginal likelihood: blocks do not cover K columns");
        if (route == MlRoute::Auto) route = n_theta() < N() ? MlRoute::ParameterSpace : MlRoute::OutputSpace;
        const double v = route == MlRoute::OutputSpace ? output_space(blocks, noise_var) : parameter_space(blocks, noise_var);
        if (!std::isfinite(v)) throw ConditioningError("marginal likelihood is not finite");
        return v;
    }

private:
    double output_space(const std::vector<CovarianceBlock>& blocks, double s2) const {
        const auto N = K_.rows();
        Matrix S = Matrix::Zero(N, N);
        for (const auto& b : blocks) {
            const auto o = static_cast<Eigen::Index>(b.offset);
            const auto k = b.P.rows();
            const auto Kb = K_.middleCols(o, k);
            S.noalias() += Kb * b.P * Kb.transpose();
        }
        S.diagonal().array() += s2;
        Eigen::LLT<Matrix> llt(S);
        if (llt.info() != Eigen::Success) throw ConditioningError("Sigma_Y is not positive definite");
        const Vector w = llt.matrixL().solve(Y_);
        double logdet = 0.0;
        for (Eigen::Index i = 0; i < N; ++i) logdet += std::log(llt.matrixL()(i, i));
        return w.squaredNorm() + 2.0 * logdet;
    }

    double parameter_space(const std::vector<CovarianceBlock>& blocks, double s2) const {
        const auto n = K_.cols();
        // L = blockdiag(chol(P_m)); M = LᵀGL, c = Lᵀb.
        std::vector<Matrix> L;
        L.reserve(blocks.size());
        for (const auto& b : blocks) L.push_back(factorize_spd(b.P, block_name(b.order)).matrixL());
        Matrix GL(n, n);
        Vector c(n);
        for (std::size_t i = 0; i < blocks.size(); ++i) {
            const auto o = static_cast<Eigen::Index>(blocks[i].offset);
            const auto k = L[i].rows();
            GL.middleCols(o, k).noalias() = G_.middleCols(o, k) * L[i].triangularView<Eigen::Lower>();
            c.segment(o, k).noalias() = L[i].transpose().triangularView<Eigen::Upper>() * b_.segment(o, k);
        }
        Matrix A(n, n);
        for (std::size_t i = 0; i < blocks.size(); ++i) {
            const auto o = static_cast<Eigen::Index>(blocks[i].offset);
            const auto k = L[i].rows();
            A.middleRows(o, k).noalias() = L[i].transpose().triangularView<Eigen::Upper>() * GL.middleRows(o, k);
        }
        A = 0.5 * (A + A.transpose()).eval();
        A.diagonal().array() += s2;
        Eigen::LLT<Matrix> llt(A);
        if (llt.info() != Eigen::Success) throw ConditioningError("sigma^2 I + L'K'KL is not positive definite");
        const Vector w = llt.matrixL().solve(c);
        double logdet = 0.0;
        for (Eigen::Index i = 0; i < n; ++i) logdet += std::log(llt.matrixL()(i, i));
        const double N = static_cast<double>(Y_.size());
        const double quad = (yy_ - w.squaredNorm()) / s2;
        return quad + (N - static_cast<double>(n)) * std::log(s2) + 2.0 * logdet;
    }

    Matrix K_;
    Vector Y_;
    Matrix G_;
    Vector b_;
    double yy_ = 0.0;
};

inline double neg_log_marginal_likelihood(const HyperParameters& hp, const VolterraStructure& s, const Matrix& K,
                                          const Vector& Y, MlRoute route = MlRoute::Auto) {
    if (static_cast<std::size_t>(K.cols()) != s.n_theta())
        throw std::invalid_argument("neg_log_marginal_likelihood: K columns vs structure");
    return MarginalLikelihood(K, Y).evaluate(covariance_blocks(s, hp), hp.noise_var, route);
}

// ---------------------------------------------------------------------------
// Residual tests

struct ResidualReport {
    std::size_t samples = 0;
    std::size_t max_lag = 0;
    double level = 0.95;
    double bound = 0.0;                 ///< ±z/√N band
    double auto_max_bound = 0.0;        ///< family-wise bound on the largest lag
    double cross_max_bound = 0.0;
    std::vector<double> autocorr;       ///< lags 1..L
    std::vector<double> crosscorr;      ///< lags −L..L
    std::size_t auto_exceed = 0, auto_budget = 0;
    std::size_t cross_exceed = 0, cross_budget = 0;
    bool whiteness_pass = false;
    bool independence_pass = false;
    bool has_independence = false;
    double residual_variance = 0.0;     ///< EᵀE/N
};

inline std::size_t default_max_lag(std::size_t N) { return std::max<std::size_t>(1, std::min<std::size_t>(N / 4, 50)); }

/// Exceedance budget for `lags` band checks: the smallest k with
/// P(Binomial(lags, 1 − level) ≤ k) ≥ level.
inline std::size_t exceedance_budget(std::size_t lags, double level) {
    const boost::math::binomial_distribution<double> dist(static_cast<double>(lags), 1.0 - level);
    for (std::size_t k = 0; k <= lags; ++k)
        if (boost::math::cdf(dist, static_cast<double>(k)) >= level) return k;
    return lags;
}

namespace detail {

inline void check_test_args(std::size_t N, std::size_t L, double level) {
    if (L < 1 || N <= L) throw std::invalid_argument("residual test: need length > max lag >= 1");
    if (!(level > 0.0 && level < 1.0)) throw std::invalid_argument("residual test: level must be in (0, 1)");
}

inline Vector centered(const Vector& x, const char* what) {
    Vector c = x.array() - x.mean();
    const double ss = c.squaredNorm();
    if (!(ss > 0.0) || ss <= 1e-28 * std::max(1.0, x.squaredNorm()))
        throw DegenerateInputError(std::string(what) + " has zero variance");
    return c;
}

inline double band(std::size_t N, double level) {
    const boost::math::normal_distribution<double> nd;
    return boost::math::quantile(nd, 0.5 * (1.0 + level)) / std::sqrt(static_cast<double>(N));
}

// Bonferroni band: any single lag outside it fails the test outright, at a
// family-wise rate of (1 − level)/5.
inline double max_band(std::size_t N, std::size_t lags, double level) {
    const double alpha = (1.0 - level) / 5.0 / static_cast<double>(lags);
    return band(N, 1.0 - alpha);
}

}  // namespace detail

/// Normalized autocorrelations of E at lags 1..L against the ±z/√N band.
inline ResidualReport whiteness_test(const Vector& E, std::size_t L, double level = 0.95) {
    const auto N = static_cast<std::size_t>(E.size());
    detail::check_test_args(N, L, level);
    const Vector e = detail::centered(E, "residual");
    const double r0 = e.squaredNorm();
    ResidualReport r;
    r.samples = N;
    r.max_lag = L;
    r.level = level;
    r.bound = detail::band(N, level);
    r.residual_variance = E.squaredNorm() / static_cast<double>(N);
    r.autocorr.resize(L);
    for (std::size_t k = 1; k <= L; ++k) {
        const auto len = static_cast<Eigen::Index>(N - k);
        const double v = e.tail(len).dot(e.head(len)) / r0;
        r.autocorr[k - 1] = v;
        if (std::abs(v) > r.bound) ++r.auto_exceed;
    }
    r.auto_budget = exceedance_budget(L, level);
    r.auto_max_bound = detail::max_band(N, L, level);
    double peak = 0.0;
    for (double v : r.autocorr) peak = std::max(peak, std::abs(v));
    r.whiteness_pass = r.auto_exceed <= r.auto_budget && peak <= r.auto_max_bound;
    return r;
}

/// Cross-correlations ρ_eu(τ) = Σ e(t)·u(t−τ) / (‖e‖‖u‖), |τ| ≤ L.
inline ResidualReport independence_test(const Vector& E, const Vector& u, std::size_t L, double level = 0.95) {
    const auto N = static_cast<std::size_t>(E.size());
    if (u.size() != E.size()) throw std::invalid_argument("independence_test: E and u lengths differ");
    detail::check_test_args(N, L, level);
    const Vector e = detail::centered(E, "residual");
    const Vector x = detail::centered(u, "input");
    const double scale = std::sqrt(e.squaredNorm() * x.squaredNorm());
    ResidualReport r;
    r.samples = N;
    r.max_lag = L;
    r.level = level;
    r.bound = detail::band(N, level);
    r.residual_variance = E.squaredNorm() / static_cast<double>(N);
    r.has_independence = true;
    r.crosscorr.resize(2 * L + 1);
    for (std::size_t i = 0; i <= 2 * L; ++i) {
        const auto tau = static_cast<long>(i) - static_cast<long>(L);
        const auto k = static_cast<Eigen::Index>(std::labs(tau));
        const auto len = static_cast<Eigen::Index>(N) - k;
        // τ ≥ 0: e(t)·u(t−τ); τ < 0: e(t)·u(t+|τ|).
        const double v = tau >= 0 ? e.tail(len).dot(x.head(len)) / scale : e.head(len).dot(x.tail(len)) / scale;
        r.crosscorr[i] = v;
        if (std::abs(v) > r.bound) ++r.cross_exceed;
    }
    r.cross_budget = exceedance_budget(2 * L + 1, level);
    r.cross_max_bound = detail::max_band(N, 2 * L + 1, level);
    double peak = 0.0;
    for (double v : r.crosscorr) peak = std::max(peak, std::abs(v));
    r.independence_pass = r.cross_exceed <= r.cross_budget && peak <= r.cross_max_bound;
    return r;
}

/// Both tests on one residual record.
inline ResidualReport residual_analysis(const Vector& E, const Vector& u, std::size_t L, double level = 0.95) {
    ResidualReport r = whiteness_test(E, L, level);
    const ResidualReport x = independence_test(E, u, L, level);
    r.crosscorr = x.crosscorr;
    r.cross_exceed = x.cross_exceed;
    r.cross_budget = x.cross_budget;
    r.cross_max_bound = x.cross_max_bound;
    r.independence_pass = x.independence_pass;
    r.has_independence = true;
    return r;
}

/// Box–Pierce style statistic N·(Σρ_e² + Σρ_eu²) / (number of lags); about 1
/// for white residuals independent of the input.
inline double residual_statistic(const ResidualReport& r) {
    double s = 0.0;
    for (double v : r.autocorr) s += v * v;
    for (double v : r.crosscorr) s += v * v;
    const double lags = static_cast<double>(r.autocorr.size() + r.crosscorr.size());
    return static_cast<double>(r.samples) * s / lags;
}

inline void write_residual_csv(const std::string& path, const ResidualReport& r) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write residual report '" + path + "'");
    out.precision(17);
    out << "lag,autocorr,crosscorr,bound\n";
    const auto L = static_cast<long>(r.max_lag);
    for (long tau = -L; tau <= L; ++tau) {
        out << tau << ',';
        if (tau == 0) out << 1.0;
        else if (!r.autocorr.empty()) out << r.autocorr[static_cast<std::size_t>(std::labs(tau)) - 1];
        out << ',';
        if (!r.crosscorr.empty()) out << r.crosscorr[static_cast<std::size_t>(tau + L)];
        out << ',' << r.bound << '\n';
    }
}

// ---------------------------------------------------------------------------
// Bounded multistart Nelder–Mead

/// One optimized quantity. Log-scale parameters are drawn log-uniformly and
/// mapped through exp; all parameters pass through a logistic onto (lo, hi).
struct ParameterBox {
    std::string name;
    double lo = 0.0;
    double hi = 1.0;
    bool log_scale = false;
};

class BoxTransform {
public:
    explicit BoxTransform(std::vector<ParameterBox> boxes) : boxes_(std::move(boxes)) {
        for (const auto& b : boxes_) {
            if (!(b.lo < b.hi)) throw std::invalid_argument("parameter '" + b.name + "': empty bounds");
            if (b.log_scale && !(b.lo > 0.0))
                throw std::invalid_argument("parameter '" + b.name + "': log-scale bounds must be positive");
        }
    }

    std::size_t size() const noexcept { return boxes_.size(); }
    const std::vector<ParameterBox>& boxes() const noexcept { return boxes_; }

    double to_natural(std::size_t i, double z) const {
        const auto& b = boxes_[i];
        const double s = 1.0 / (1.0 + std::exp(-z));
        if (b.log_scale) return std::exp(std::log(b.lo) + (std::log(b.hi) - std::log(b.lo)) * s);
        return b.lo + (b.hi - b.lo) * s;
    }

    double to_unconstrained(std::size_t i, double x) const {
        const auto& b = boxes_[i];
        double s = b.log_scale ? (std::log(x) - std::log(b.lo)) / (std::log(b.hi) - std::log(b.lo))
                               : (x - b.lo) / (b.hi - b.lo);
        s = std::clamp(s, 1e-9, 1.0 - 1e-9);
        return std::log(s / (1.0 - s));
    }

    double draw(std::size_t i, std::mt19937_64& rng) const {
        const auto& b = boxes_[i];
        std::uniform_real_distribution<double> unit(0.0, 1.0);
        const double s = unit(rng);
        if (b.log_scale) return std::exp(std::log(b.lo) + (std::log(b.hi) - std::log(b.lo)) * s);
        return b.lo + (b.hi - b.lo) * s;
    }

private:
    std::vector<ParameterBox> boxes_;
};

struct MultistartOptions {
    std::size_t n_starts = 3;
    std::uint64_t seed = 1;
    std::size_t max_evals = 400;   ///< objective evaluations per start
    double simplex_tol = 1e-4;     ///< simplex size in the unconstrained space
    double initial_step = 1.0;
    std::size_t threads = 1;
    std::optional<std::vector<double>> x0;  ///< natural-scale start for start 0
};

struct StartResult {
    std::vector<double> initial;
    std::vector<double> best;
    double initial_objective = std::numeric_limits<double>::infinity();
    double best_objective = std::numeric_limits<double>::infinity();
    std::vector<double> best_history;  ///< best-so-far after each evaluation
    std::size_t evaluations = 0;
    bool ok = false;
    std::string message;
};

struct MultistartResult {
    std::vector<double> best;
    double best_objective = std::numeric_limits<double>::infinity();
    std::size_t best_start = 0;
    std::vector<StartResult> starts;
};

using Objective = std::function<double(std::span<const double>)>;

namespace detail {

inline constexpr double kFailedObjective = 1e100;

struct NmContext {
    const Objective* f;
    const BoxTransform* box;
    StartResult* result;
    std::vector<double> natural;
};

inline double nm_eval(const gsl_vector* z, void* params) {
    auto* ctx = static_cast<NmContext*>(params);
    for (std::size_t i = 0; i < ctx->natural.size(); ++i)
        ctx->natural[i] = ctx->box->to_natural(i, gsl_vector_get(z, i));
    double v = kFailedObjective;
    try {
        v = (*ctx->f)(ctx->natural);
        if (!std::isfinite(v)) v = kFailedObjective;
    } catch (const ConditioningError&) {
        v = kFailedObjective;
    }
    auto& r = *ctx->result;
    ++r.evaluations;
    if (v < r.best_objective) {
        r.best_objective = v;
        r.best = ctx->natural;
    }
    r.best_history.push_back(r.best_objective);
    return v;
}

inline std::uint64_t sub_seed(std::uint64_t seed, std::size_t start) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(start), 0x5eedu};
    std::uint32_t words[2];
    seq.generate(words, words + 2);
    return (static_cast<std::uint64_t>(words[0]) << 32) | words[1];
}

inline StartResult run_start(const Objective& f, const BoxTransform& box, const MultistartOptions& opts,
                             std::size_t index) {
    StartResult r;
    const std::size_t n = box.size();
    std::mt19937_64 rng(sub_seed(opts.seed, index));
    r.initial.resize(n);
    for (std::size_t i = 0; i < n; ++i)
        r.initial[i] = index == 0 && opts.x0 ? box.to_natural(i, box.to_unconstrained(i, (*opts.x0)[i]))
                                             : box.draw(i, rng);

    NmContext ctx{&f, &box, &r, std::vector<double>(n)};
    gsl_vector* z = gsl_vector_alloc(n);
    for (std::size_t i = 0; i < n; ++i) gsl_vector_set(z, i, box.to_unconstrained(i, r.initial[i]));
    r.initial_objective = nm_eval(z, &ctx);
    if (r.initial_objective >= kFailedObjective) {
        gsl_vector_free(z);
        r.message = "initial point could not be evaluated";
        return r;
    }
    if (n == 0 || opts.max_evals <= 1) {
        gsl_vector_free(z);
        r.ok = true;
        return r;
    }

    gsl_vector* step = gsl_vector_alloc(n);
    gsl_vector_set_all(step, opts.initial_step);
    gsl_multimin_function fn{&nm_eval, n, &ctx};
    gsl_multimin_fminimizer* s = gsl_multimin_fminimizer_alloc(gsl_multimin_fminimizer_nmsimplex2, n);
    gsl_multimin_fminimizer_set(s, &fn, z, step);
    int status = GSL_CONTINUE;
    while (status == GSL_CONTINUE && r.evaluations < opts.max_evals) {
        if (gsl_multimin_fminimizer_iterate(s) != GSL_SUCCESS) break;
        status = gsl_multimin_test_size(gsl_multimin_fminimizer_size(s), opts.simplex_tol);
    }
    gsl_multimin_fminimizer_free(s);
    gsl_vector_free(step);
    gsl_vector_free(z);
    r.ok = true;
    r.message = status == GSL_SUCCESS ? "converged" : "evaluation budget reached";
    return r;
}

struct GslErrorsOff {
    gsl_error_handler_t* prev;
    GslErrorsOff() : prev(gsl_set_error_handler_off()) {}
    ~GslErrorsOff() { gsl_set_error_handler(prev); }
};

}  // namespace detail

/// Runs `n_starts` bounded Nelder–Mead minimizations (GSL nmsimplex2) in the
/// logistic-unconstrained space. Objectives may throw ConditioningError or
/// return non-finite values; those points count as failures. Start k draws
/// its initial point from a sub-seed of (seed, k), so results do not depend
/// on the thread count.
inline MultistartResult multistart_minimize(const Objective& f, const BoxTransform& box, const MultistartOptions& opts) {
    if (opts.n_starts < 1) throw std::invalid_argument("multistart: n_starts must be >= 1");
    if (opts.x0 && opts.x0->size() != box.size()) throw std::invalid_argument("multistart: x0 size mismatch");
    const detail::GslErrorsOff guard;
    MultistartResult out;
    out.starts.resize(opts.n_starts);
    const std::size_t threads = std::max<std::size_t>(1, std::min(opts.threads, opts.n_starts));
    if (threads == 1) {
        for (std::size_t k = 0; k < opts.n_starts; ++k) out.starts[k] = detail::run_start(f, box, opts, k);
    } else {
        for (std::size_t first = 0; first < opts.n_starts; first += threads) {
            std::vector<std::future<StartResult>> jobs;
            for (std::size_t k = first; k < std::min(opts.n_starts, first + threads); ++k)
                jobs.push_back(std::async(std::launch::async, [&, k] { return detail::run_start(f, box, opts, k); }));
            for (std::size_t j = 0; j < jobs.size(); ++j) out.starts[first + j] = jobs[j].get();
        }
    }
    bool any = false;
    for (std::size_t k = 0; k < out.starts.size(); ++k) {
        const auto& s = out.starts[k];
        if (!s.ok || s.best_objective >= detail::kFailedObjective) continue;
        if (!any || s.best_objective < out.best_objective) {
            out.best_objective = s.best_objective;
            out.best = s.best;
            out.best_start = k;
            any = true;
        }
    }
    if (!any) throw TuningError("every optimizer start failed to evaluate the objective");
    return out;
}

// ---------------------------------------------------------------------------
// Hyperparameter spaces

/// Box bounds for each hyperparameter family.
struct HyperBounds {
    ParameterBox p0_var{"p0_var", 1e-6, 1e3, true};
    ParameterBox c1{"order1.c", 1e-6, 1e2, true};
    ParameterBox alpha{"alpha", 0.01, 0.99, false};
    ParameterBox rho{"rho", -0.99, 0.99, false};
    ParameterBox dir_rho{"dir.rho", 0.0, 0.99, false};
    ParameterBox c2{"order2.c", 1e-6, 1e2, true};
    ParameterBox c3{"order3.c", 1e-6, 1e2, true};
    ParameterBox noise_var{"noise_var", 1e-6, 1e2, true};
};

/// Bounds scaled to the data: kernel scales relative to var(y)/var(u)^m,
/// noise variance relative to var(y).
inline HyperBounds default_bounds(const Vector& u, const Vector& y) {
    const auto var = [](const Vector& x) {
        const double m = x.mean();
        return (x.array() - m).square().sum() / static_cast<double>(std::max<Eigen::Index>(1, x.size()));
    };
    const double vy = std::max(var(y), 1e-300);
    const double vu = std::max(var(u), 1e-300);
    const double my = y.mean();
    HyperBounds b;
    b.p0_var = {"p0_var", 1e-6 * (vy + my * my) + 1e-300, 1e2 * (vy + my * my) + 1e-300, true};
    b.c1 = {"order1.c", 1e-8 * vy / vu, 1e2 * vy / vu, true};
    b.c2 = {"order2.c", 1e-8 * vy / (vu * vu), 1e2 * vy / (vu * vu), true};
    b.c3 = {"order3.c", 1e-8 * vy / (vu * vu * vu), 1e2 * vy / (vu * vu * vu), true};
    b.noise_var = {"noise_var", 1e-6 * vy, 10.0 * vy, true};
    return b;
}

/// Which hyperparameters of a structure are optimized, and how a parameter
/// vector maps onto HyperParameters. Kernel kinds come from the base value.
class HyperParameterSpace {
public:
    HyperParameterSpace(const VolterraStructure& s, HyperParameters base, const HyperBounds& bounds,
                        bool tune_noise = true)
        : base_(std::move(base)) {
        using HP = HyperParameters;
        if (s.include_offset()) add(bounds.p0_var, [](HP& h) -> double& { return h.p0_var; });
        if (s.max_degree() >= 1) {
            add(bounds.c1, [](HP& h) -> double& { return h.order1.c; });
            add(named(bounds.alpha, "order1.alpha"), [](HP& h) -> double& { return h.order1.alpha; });
            if (base_.order1.kind == KernelKind::DC)
                add(named(bounds.rho, "order1.rho"), [](HP& h) -> double& { return h.order1.rho; });
        }
        if (s.max_degree() >= 2) {
            add(bounds.c2, [](HP& h) -> double& { return h.order2.c; });
            add(named(bounds.dir_rho, "order2.u.rho"), [](HP& h) -> double& { return h.order2.u.rho; });
            add(named(bounds.alpha, "order2.u.alpha"), [](HP& h) -> double& { return h.order2.u.alpha; });
            add(named(bounds.dir_rho, "order2.v.rho"), [](HP& h) -> double& { return h.order2.v.rho; });
            add(named(bounds.alpha, "order2.v.alpha"), [](HP& h) -> double& { return h.order2.v.alpha; });
        }
        if (s.max_degree() >= 3) {
            add(bounds.c3, [](HP& h) -> double& { return h.order3.c; });
            add(named(bounds.dir_rho, "order3.v.rho"), [](HP& h) -> double& { return h.order3.v.rho; });
            add(named(bounds.alpha, "order3.v.alpha"), [](HP& h) -> double& { return h.order3.v.alpha; });
            add(named(bounds.dir_rho, "order3.u.rho"), [](HP& h) -> double& { return h.order3.u.rho; });
            add(named(bounds.alpha, "order3.u.alpha"), [](HP& h) -> double& { return h.order3.u.alpha; });
            add(named(bounds.dir_rho, "order3.q.rho"), [](HP& h) -> double& { return h.order3.q.rho; });
            add(named(bounds.alpha, "order3.q.alpha"), [](HP& h) -> double& { return h.order3.q.alpha; });
        }
        if (tune_noise) add(bounds.noise_var, [](HP& h) -> double& { return h.noise_var; });
    }

    std::size_t size() const noexcept { return boxes_.size(); }
    const std::vector<ParameterBox>& boxes() const noexcept { return boxes_; }
    BoxTransform transform() const { return BoxTransform(boxes_); }

    HyperParameters apply(std::span<const double> x) const {
        if (x.size() != refs_.size()) throw std::invalid_argument("HyperParameterSpace: vector size mismatch");
        HyperParameters h = base_;
        for (std::size_t i = 0; i < x.size(); ++i) refs_[i](h) = x[i];
        return h;
    }

    /// Current values of the tuned fields of `h`, clamped into the boxes.
    std::vector<double> extract(const HyperParameters& h) const {
        std::vector<double> x(refs_.size());
        HyperParameters copy = h;
        for (std::size_t i = 0; i < x.size(); ++i)
            x[i] = std::clamp(refs_[i](copy), boxes_[i].lo, boxes_[i].hi);
        return x;
    }

private:
    static ParameterBox named(ParameterBox b, const char* name) {
        b.name = name;
        return b;
    }
    void add(const ParameterBox& b, std::function<double&(HyperParameters&)> ref) {
        boxes_.push_back(b);
        refs_.push_back(std::move(ref));
    }

    HyperParameters base_;
    std::vector<ParameterBox> boxes_;
    std::vector<std::function<double&(HyperParameters&)>> refs_;
};

// ---------------------------------------------------------------------------
// Tuning drivers

struct TuningOptions {
    MultistartOptions search{};
    MlRoute route = MlRoute::Auto;
    std::optional<HyperBounds> bounds;  ///< default_bounds(u, y) when absent
    std::size_t max_lag = 0;            ///< residual route; 0 = min(N/4, 50)
    double level = 0.95;
};

struct TuningResult {
    HyperParameters hp;
    double objective = 0.0;
    MultistartResult search;
    std::vector<std::string> names;
};

/// Marginal-likelihood tuning of every prior and noise hyperparameter of `s`.
/// `base` supplies kernel kinds and, for start 0, the initial point.
inline TuningResult tune_marginal_likelihood(const VolterraStructure& s, const Matrix& K, const Vector& u,
                                             const Vector& Y, const HyperParameters& base, TuningOptions opts = {}) {
    if (static_cast<std::size_t>(K.cols()) != s.n_theta())
        throw std::invalid_argument("tune_marginal_likelihood: K columns vs structure");
    const HyperBounds bounds = opts.bounds ? *opts.bounds : default_bounds(u, Y);
    const HyperParameterSpace space(s, base, bounds);
    const MarginalLikelihood ml(K, Y);
    const auto route = opts.route;
    const Objective f = [&](std::span<const double> x) {
        const HyperParameters hp = space.apply(x);
        return ml.evaluate(covariance_blocks(s, hp), hp.noise_var, route);
    };
    if (!opts.search.x0) opts.search.x0 = space.extract(base);
    TuningResult out;
    out.search = multistart_minimize(f, space.transform(), opts.search);
    out.hp = space.apply(out.search.best);
    out.objective = out.search.best_objective;
    for (const auto& b : space.boxes()) out.names.push_back(b.name);
    return out;
}

/// Residual-analysis tuning: the regularized estimate is recomputed for each
/// candidate and the Box–Pierce statistic of its residuals is minimized. The
/// noise variance only rescales the kernel scales here, so it stays at `base`.
inline TuningResult tune_residual_analysis(const VolterraStructure& s, const Matrix& K, const Vector& u,
                                           const Vector& Y, const HyperParameters& base, TuningOptions opts = {}) {
    if (static_cast<std::size_t>(K.cols()) != s.n_theta())
        throw std::invalid_argument("tune_residual_analysis: K columns vs structure");
    const HyperBounds bounds = opts.bounds ? *opts.bounds : default_bounds(u, Y);
    const HyperParameterSpace space(s, base, bounds, false);
    const std::size_t L = opts.max_lag ? opts.max_lag : default_max_lag(static_cast<std::size_t>(Y.size()));
    Matrix G = K.transpose() * K;
    const Vector b = K.transpose() * Y;
    const double level = opts.level;
    const Objective f = [&](std::span<const double> x) {
        const HyperParameters hp = space.apply(x);
        Matrix H = G + build_assembled_penalty(s, hp).dense_D();
        Eigen::LLT<Matrix> llt(H);
        if (llt.info() != Eigen::Success) throw ConditioningError("K'K + D is not positive definite");
        const Vector E = Y - K * llt.solve(b);
        return residual_statistic(residual_analysis(E, u, L, level));
    };
    if (!opts.search.x0) opts.search.x0 = space.extract(base);
    TuningResult out;
    out.search = multistart_minimize(f, space.transform(), opts.search);
    out.hp = space.apply(out.search.best);
    out.objective = out.search.best_objective;
    for (const auto& bx : space.boxes()) out.names.push_back(bx.name);
    return out;
}

}  // namespace volterra
