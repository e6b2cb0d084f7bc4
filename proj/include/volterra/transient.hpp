#pragma once

// Transient elimination: the response to unknown initial conditions is an
// extra impulse response to a Kronecker delta at the first sample, estimated
// jointly with the kernels under a block-diagonal penalty.

#include "volterra/errors.hpp"
#include "volterra/kernel_model.hpp"
#include "volterra/regularizers.hpp"
#include "volterra/solver.hpp"
#include "volterra/tuning.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

namespace volterra {

struct TransientSpec {
    std::size_t n_tr = 50;
    KernelPrior1d prior{KernelKind::DC, 1.0, 0.9, 0.5};
};

/// K_δ: the N × n_tr rectangular identity.
inline Matrix build_transient_regressor(std::size_t N, std::size_t n_tr) {
    if (n_tr > N) throw std::invalid_argument("build_transient_regressor: n_tr exceeds record length");
    return Matrix::Identity(static_cast<Eigen::Index>(N), static_cast<Eigen::Index>(n_tr));
}

/// K′ = [K K_δ], D′ = blockdiag(D, D_tr).
struct JointSystem {
    Matrix K;
    PenaltyMatrix D;
    std::size_t n_theta = 0;
    std::size_t n_tr = 0;
};

/// D_tr = σ²·P_tr⁻¹ for the transient prior.
inline PenaltyMatrix transient_penalty(const TransientSpec& spec, double noise_var) {
    if (spec.n_tr < 1) throw std::invalid_argument("transient_penalty: n_tr must be >= 1");
    return assemble_penalty({{kTransientBlock, 0, covariance_1d(spec.prior, spec.n_tr)}}, noise_var);
}

/// Joint system. The cross blocks of D′ are exactly zero. `spec.n_tr == 0`
/// gives back K and D unchanged (as a dense D).
inline JointSystem assemble_joint(const Matrix& K, const PenaltyMatrix& D, const TransientSpec& spec, double noise_var) {
    if (static_cast<std::size_t>(K.cols()) != D.dim()) throw std::invalid_argument("assemble_joint: K vs D dimension");
    const auto N = static_cast<std::size_t>(K.rows());
    if (spec.n_tr > N) throw std::invalid_argument("assemble_joint: n_tr exceeds record length");
    JointSystem j;
    j.n_theta = D.dim();
    j.n_tr = spec.n_tr;
    j.K.resize(K.rows(), K.cols() + static_cast<Eigen::Index>(spec.n_tr));
    j.K.leftCols(K.cols()) = K;
    std::vector<PenaltyBlock> blocks;
    double jitter = D.max_jitter();
    if (D.dim() > 0) blocks.push_back({0, 0, D.dense_D()});
    if (spec.n_tr > 0) {
        j.K.rightCols(static_cast<Eigen::Index>(spec.n_tr)) = build_transient_regressor(N, spec.n_tr);
        const auto Dtr = transient_penalty(spec, noise_var);
        jitter = std::max(jitter, Dtr.max_jitter());
        blocks.push_back({kTransientBlock, D.dim(), Dtr.blocks().front().values});
    }
    j.D = PenaltyMatrix(PenaltyForm::Assembled, std::move(blocks), D.dim() + spec.n_tr, 0.0, jitter);
    return j;
}

struct JointSolution {
    Vector theta;
    Vector theta_tr;
};

/// θ̂′ = (K′ᵀK′ + D′)⁻¹K′ᵀY split at the kernel/transient boundary.
inline JointSolution solve_joint(const JointSystem& joint, const Vector& Y) {
    const Vector all = solve_exact(joint.K, Y, joint.D);
    return {all.head(static_cast<Eigen::Index>(joint.n_theta)), all.tail(static_cast<Eigen::Index>(joint.n_tr))};
}

/// Transient contribution K_δ·θ_tr over a record of length N.
inline Vector transient_output(const Vector& theta_tr, std::size_t N) {
    Vector y = Vector::Zero(static_cast<Eigen::Index>(N));
    const auto k = std::min<Eigen::Index>(theta_tr.size(), static_cast<Eigen::Index>(N));
    y.head(k) = theta_tr.head(k);
    return y;
}

inline void write_transient_csv(const std::string& path, const Vector& theta_tr) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write transient '" + path + "'");
    out.precision(17);
    out << "lag,theta_tr\n";
    for (Eigen::Index i = 0; i < theta_tr.size(); ++i) out << i << ',' << theta_tr[i] << '\n';
}

// ---------------------------------------------------------------------------
// Tuning

enum class TuningMethod { MarginalLikelihood, ResidualAnalysis };

inline const char* to_string(TuningMethod m) {
    return m == TuningMethod::MarginalLikelihood ? "marginal_likelihood" : "residual_analysis";
}

inline TuningMethod tuning_method_from_string(const std::string& s) {
    if (s == "marginal_likelihood" || s == "ml") return TuningMethod::MarginalLikelihood;
    if (s == "residual_analysis" || s == "residual") return TuningMethod::ResidualAnalysis;
    throw std::invalid_argument("unknown tuning method '" + s + "'");
}

struct TransientBounds {
    ParameterBox c{"transient.c", 1e-6, 1e3, true};
    ParameterBox alpha{"transient.alpha", 0.5, 0.999, false};
    ParameterBox rho{"transient.rho", -0.99, 0.99, false};
};

inline TransientBounds default_transient_bounds(const Vector& y) {
    const double power = std::max(y.squaredNorm() / static_cast<double>(y.size()), 1e-300);
    TransientBounds b;
    b.c = {"transient.c", 1e-6 * power, 1e3 * power, true};
    return b;
}

struct JointTuningResult {
    HyperParameters hp;
    TransientSpec transient;
    double objective = 0.0;
    MultistartResult search;
    std::vector<std::string> names;
};

namespace detail {

// Kernel hyperparameters (optional) followed by the transient prior.
class JointSpace {
public:
    JointSpace(const VolterraStructure& s, const HyperParameters& hp, const TransientSpec& spec,
               const HyperBounds& hb, const TransientBounds& tb, bool tune_kernels, bool tune_noise)
        : kernel_(s, hp, hb, tune_noise), hp_(hp), spec_(spec), tune_kernels_(tune_kernels) {
        if (tune_kernels_) boxes_ = kernel_.boxes();
        boxes_.push_back(tb.c);
        boxes_.push_back(tb.alpha);
        if (spec.prior.kind == KernelKind::DC) boxes_.push_back(tb.rho);
    }

    const std::vector<ParameterBox>& boxes() const noexcept { return boxes_; }

    std::pair<HyperParameters, TransientSpec> apply(std::span<const double> x) const {
        std::size_t k = 0;
        HyperParameters hp = hp_;
        if (tune_kernels_) {
            hp = kernel_.apply(x.subspan(0, kernel_.size()));
            k = kernel_.size();
        }
        TransientSpec t = spec_;
        t.prior.c = x[k++];
        t.prior.alpha = x[k++];
        if (t.prior.kind == KernelKind::DC) t.prior.rho = x[k++];
        return {hp, t};
    }

    std::vector<double> extract(const HyperParameters& hp, const TransientSpec& t) const {
        std::vector<double> x;
        if (tune_kernels_) x = kernel_.extract(hp);
        x.push_back(t.prior.c);
        x.push_back(t.prior.alpha);
        if (t.prior.kind == KernelKind::DC) x.push_back(t.prior.rho);
        for (std::size_t i = 0; i < x.size(); ++i) x[i] = std::clamp(x[i], boxes_[i].lo, boxes_[i].hi);
        return x;
    }

private:
    HyperParameterSpace kernel_;
    HyperParameters hp_;
    TransientSpec spec_;
    bool tune_kernels_;
    std::vector<ParameterBox> boxes_;
};

inline std::vector<CovarianceBlock> joint_blocks(const VolterraStructure& s, const HyperParameters& hp,
                                                 const TransientSpec& t) {
    auto blocks = covariance_blocks(s, hp);
    blocks.push_back({kTransientBlock, s.n_theta(), covariance_1d(t.prior, t.n_tr)});
    return blocks;
}

}  // namespace detail

struct JointTuningOptions {
    TuningOptions tuning{};
    std::optional<TransientBounds> transient_bounds;
    bool tune_kernels = true;  ///< false: kernel hyperparameters stay at `hp`
};

/// Marginal likelihood of the joint system over the kernel and transient
/// hyperparameters together.
inline JointTuningResult tune_joint_marginal_likelihood(const VolterraStructure& s, const Matrix& K, const Vector& u,
                                                        const Vector& Y, const HyperParameters& hp,
                                                        const TransientSpec& spec, JointTuningOptions opts = {}) {
    const auto N = static_cast<std::size_t>(Y.size());
    if (spec.n_tr < 1 || spec.n_tr > N) throw std::invalid_argument("joint tuning: n_tr must be in [1, N]");
    const HyperBounds hb = opts.tuning.bounds ? *opts.tuning.bounds : default_bounds(u, Y);
    const TransientBounds tb = opts.transient_bounds ? *opts.transient_bounds : default_transient_bounds(Y);
    const detail::JointSpace space(s, hp, spec, hb, tb, opts.tune_kernels, opts.tune_kernels);
    Matrix Kj(K.rows(), K.cols() + static_cast<Eigen::Index>(spec.n_tr));
    Kj << K, build_transient_regressor(N, spec.n_tr);
    const MarginalLikelihood ml(std::move(Kj), Y);
    const auto route = opts.tuning.route;
    const Objective f = [&](std::span<const double> x) {
        const auto [h, t] = space.apply(x);
        return ml.evaluate(detail::joint_blocks(s, h, t), h.noise_var, route);
    };
    auto search = opts.tuning.search;
    if (!search.x0) search.x0 = space.extract(hp, spec);
    JointTuningResult out;
    out.search = multistart_minimize(f, BoxTransform(space.boxes()), search);
    std::tie(out.hp, out.transient) = space.apply(out.search.best);
    out.objective = out.search.best_objective;
    for (const auto& b : space.boxes()) out.names.push_back(b.name);
    return out;
}

/// Residual-analysis tuning of the transient prior with the kernel
/// hyperparameters held fixed.
inline JointTuningResult tune_transient_residual(const VolterraStructure& s, const Matrix& K, const Vector& u,
                                                 const Vector& Y, const HyperParameters& hp, const TransientSpec& spec,
                                                 JointTuningOptions opts = {}) {
    const auto N = static_cast<std::size_t>(Y.size());
    if (spec.n_tr < 1 || spec.n_tr > N) throw std::invalid_argument("transient tuning: n_tr must be in [1, N]");
    const HyperBounds hb = opts.tuning.bounds ? *opts.tuning.bounds : default_bounds(u, Y);
    const TransientBounds tb = opts.transient_bounds ? *opts.transient_bounds : default_transient_bounds(Y);
    const detail::JointSpace space(s, hp, spec, hb, tb, false, false);
    const PenaltyMatrix D = build_assembled_penalty(s, hp);
    const std::size_t L = opts.tuning.max_lag ? opts.tuning.max_lag : default_max_lag(N);
    const double level = opts.tuning.level;
    const Objective f = [&](std::span<const double> x) {
        const auto [h, t] = space.apply(x);
        const JointSystem j = assemble_joint(K, D, t, h.noise_var);
        const auto sol = solve_joint(j, Y);
        const Vector E = Y - K * sol.theta - transient_output(sol.theta_tr, N);
        return residual_statistic(residual_analysis(E, u, L, level));
    };
    auto search = opts.tuning.search;
    if (!search.x0) search.x0 = space.extract(hp, spec);
    JointTuningResult out;
    out.search = multistart_minimize(f, BoxTransform(space.boxes()), search);
    std::tie(out.hp, out.transient) = space.apply(out.search.best);
    out.objective = out.search.best_objective;
    for (const auto& b : space.boxes()) out.names.push_back(b.name);
    return out;
}

/// Joint tuning by the chosen method: marginal likelihood over everything,
/// then (residual method) a residual-analysis refinement of the transient
/// prior started from the marginal-likelihood values.
inline JointTuningResult tune_joint(TuningMethod method, const VolterraStructure& s, const Matrix& K, const Vector& u,
                                    const Vector& Y, const HyperParameters& hp, const TransientSpec& spec,
                                    JointTuningOptions opts = {}) {
    JointTuningResult ml = tune_joint_marginal_likelihood(s, K, u, Y, hp, spec, opts);
    if (method == TuningMethod::MarginalLikelihood) return ml;
    JointTuningOptions refine = opts;
    refine.tuning.search.x0.reset();
    JointTuningResult res = tune_transient_residual(s, K, u, Y, ml.hp, ml.transient, refine);
    res.search.starts.insert(res.search.starts.begin(), ml.search.starts.begin(), ml.search.starts.end());
    res.search.best_start += ml.search.starts.size();
    return res;
}

// ---------------------------------------------------------------------------
// Order selection

struct TransientCandidate {
    std::size_t n_tr = 0;
    TransientSpec spec;
    HyperParameters hp;
    double residual_variance = 0.0;
    bool whiteness_pass = false;
    bool independence_pass = false;
    bool within_band = false;
    std::string error;
};

struct TransientSelection {
    std::size_t chosen = 0;
    std::size_t chosen_index = 0;
    bool warning = false;  ///< no candidate passed both tests inside the band
    std::vector<TransientCandidate> candidates;
};

struct TransientSelectionOptions {
    TuningMethod method = TuningMethod::ResidualAnalysis;
    JointTuningOptions tuning{};
    double band = 0.10;  ///< relative residual-variance band around the minimum
};

/// For each candidate length: tune, solve jointly, test the residuals. The
/// smallest candidate inside the variance band that passes both tests wins;
/// otherwise the lowest residual variance is returned with `warning` set.
inline TransientSelection select_transient_order(const std::vector<std::size_t>& candidates,
                                                 const VolterraStructure& s, const Matrix& K, const Vector& u,
                                                 const Vector& Y, const HyperParameters& hp,
                                                 const KernelPrior1d& prior, TransientSelectionOptions opts = {}) {
    if (candidates.empty()) throw std::invalid_argument("select_transient_order: no candidates");
    const auto N = static_cast<std::size_t>(Y.size());
    for (auto n : candidates)
        if (n < 1 || n > N) throw std::invalid_argument("select_transient_order: candidate outside [1, N]");
    const std::size_t L = opts.tuning.tuning.max_lag ? opts.tuning.tuning.max_lag : default_max_lag(N);
    TransientSelection sel;
    double best_var = std::numeric_limits<double>::infinity();
    for (auto n : candidates) {
        TransientCandidate c;
        c.n_tr = n;
        try {
            const TransientSpec spec{n, prior};
            const auto tuned = tune_joint(opts.method, s, K, u, Y, hp, spec, opts.tuning);
            c.spec = tuned.transient;
            c.hp = tuned.hp;
            const auto j = assemble_joint(K, build_assembled_penalty(s, tuned.hp), tuned.transient, tuned.hp.noise_var);
            const auto sol = solve_joint(j, Y);
            const Vector E = Y - K * sol.theta - transient_output(sol.theta_tr, N);
            const auto rep = residual_analysis(E, u, L, opts.tuning.tuning.level);
            c.residual_variance = rep.residual_variance;
            c.whiteness_pass = rep.whiteness_pass;
            c.independence_pass = rep.independence_pass;
            best_var = std::min(best_var, c.residual_variance);
        } catch (const std::runtime_error& e) {
            c.error = e.what();
            c.residual_variance = std::numeric_limits<double>::infinity();
        }
        sel.candidates.push_back(std::move(c));
    }
    if (!std::isfinite(best_var)) throw TuningError("select_transient_order: every candidate failed");
    std::optional<std::size_t> pick;
    std::size_t argmin = 0;
    for (std::size_t i = 0; i < sel.candidates.size(); ++i) {
        auto& c = sel.candidates[i];
        c.within_band = c.residual_variance <= (1.0 + opts.band) * best_var;
        if (c.residual_variance < sel.candidates[argmin].residual_variance) argmin = i;
        if (c.within_band && c.whiteness_pass && c.independence_pass &&
            (!pick || c.n_tr < sel.candidates[*pick].n_tr))
            pick = i;
    }
    sel.warning = !pick;
    sel.chosen_index = pick ? *pick : argmin;
    sel.chosen = sel.candidates[sel.chosen_index].n_tr;
    return sel;
}

}  // namespace volterra
