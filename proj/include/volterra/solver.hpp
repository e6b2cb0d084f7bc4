#pragma once

// Regularized least squares: closed form, inversion-free gradient descent with
// decimated step, and a streaming variant that never materializes K.

#include "volterra/errors.hpp"
#include "volterra/kernel_model.hpp"
#include "volterra/regularizers.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace volterra {

// ---------------------------------------------------------------------------
// Cost and gradient

namespace detail {

inline void check_system(const Matrix& K, const Vector& Y, const Vector& theta, const PenaltyMatrix& penalty) {
    if (K.rows() != Y.size()) throw std::invalid_argument("dimension mismatch: K rows vs Y length");
    if (K.cols() != theta.size()) throw std::invalid_argument("dimension mismatch: K columns vs theta length");
    if (static_cast<std::size_t>(theta.size()) != penalty.dim())
        throw std::invalid_argument("dimension mismatch: theta length vs penalty dimension");
}

}  // namespace detail

/// V = ‖Y − Kθ‖² + θᵀDθ.
inline double cost(const Vector& theta, const Matrix& K, const Vector& Y, const PenaltyMatrix& penalty) {
    detail::check_system(K, Y, theta, penalty);
    return (Y - K * theta).squaredNorm() + penalty.quadratic(theta);
}

/// −Kᵀ(Y − Kθ) + Dθ: half of the calculus gradient of `cost`.
inline Vector gradient(const Vector& theta, const Matrix& K, const Vector& Y, const PenaltyMatrix& penalty) {
    detail::check_system(K, Y, theta, penalty);
    const Vector E = Y - K * theta;
    return -(K.transpose() * E) + penalty.apply(theta);
}

/// θ̂ = (KᵀK + D)⁻¹KᵀY by Cholesky factorization.
inline Vector solve_exact(const Matrix& K, const Vector& Y, const PenaltyMatrix& penalty) {
    if (K.rows() != Y.size()) throw std::invalid_argument("solve_exact: K rows vs Y length");
    if (static_cast<std::size_t>(K.cols()) != penalty.dim())
        throw std::invalid_argument("solve_exact: K columns vs penalty dimension");
    Matrix H = penalty.dense_D();
    H.selfadjointView<Eigen::Lower>().rankUpdate(K.transpose());
    Eigen::LLT<Matrix, Eigen::Lower> llt(H);
    if (llt.info() != Eigen::Success)
        throw ConditioningError("solve_exact: KᵀK + D is not positive definite");
    return llt.solve(K.transpose() * Y);
}

// ---------------------------------------------------------------------------
// Options and trace

struct SolverOptions {
    double lambda0 = 1e-4;
    double lambda_min = 1e-12;
    double decimation = 0.1;
    double cost_tol = 1e-10;  ///< relative cost change
    std::size_t max_iter = 50000;
    std::optional<Vector> theta0;
    bool warm_start_ls = true;
    /// Called with (iteration, θ) after every accepted step.
    std::function<void(std::size_t, std::span<const double>)> observer;

    void validate() const {
        if (!(lambda0 > 0.0)) throw std::invalid_argument("SolverOptions: lambda0 must be > 0");
        if (!(lambda_min > 0.0)) throw std::invalid_argument("SolverOptions: lambda_min must be > 0");
        if (!(lambda_min < lambda0)) throw std::invalid_argument("SolverOptions: lambda_min must be < lambda0");
        if (!(decimation > 0.0 && decimation < 1.0))
            throw std::invalid_argument("SolverOptions: decimation must be in (0, 1)");
        if (!(cost_tol > 0.0)) throw std::invalid_argument("SolverOptions: cost_tol must be > 0");
    }
};

enum class Termination { CostTolerance, LambdaMin, MaxIter };

inline const char* to_string(Termination t) {
    switch (t) {
        case Termination::CostTolerance: return "cost_tol";
        case Termination::LambdaMin: return "lambda_min";
        case Termination::MaxIter: return "max_iter";
    }
    return "unknown";
}

struct TraceEntry {
    std::size_t iter = 0;
    double cost = 0.0;
    double lambda = 0.0;
    bool accepted = false;
};

struct SolverTrace {
    double initial_cost = 0.0;
    std::vector<TraceEntry> entries;
    Termination reason = Termination::MaxIter;
    std::size_t iterations = 0;          ///< accepted steps
    std::size_t warm_start_iterations = 0;
    int threads = 1;

    double final_cost() const {
        for (auto it = entries.rbegin(); it != entries.rend(); ++it)
            if (it->accepted) return it->cost;
        return initial_cost;
    }
};

inline void write_trace_csv(const std::string& path, const SolverTrace& trace) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write trace '" + path + "'");
    out.precision(17);
    out << "iter,cost,lambda,accepted\n";
    out << 0 << ',' << trace.initial_cost << ",0,1\n";
    for (const auto& e : trace.entries)
        out << e.iter << ',' << e.cost << ',' << e.lambda << ',' << (e.accepted ? 1 : 0) << '\n';
}

struct SolveResult {
    Vector theta;
    SolverTrace trace;
};

// ---------------------------------------------------------------------------
// Memory accounting

enum class MemoryMode { Matrix, Reduced };

struct MemoryEstimate {
    std::uint64_t values = 0;
    std::uint64_t bytes = 0;
};

/// Matrix mode: 2·N·nθ + 3·nθ² + N + nθ values. Reduced mode: N + 6·nθ values.
/// Eight bytes per value.
inline MemoryEstimate estimate_memory(std::uint64_t N, std::uint64_t n_theta, MemoryMode mode) {
    if (N < 1 || n_theta < 1) throw std::invalid_argument("estimate_memory: N and n_theta must be >= 1");
    const std::uint64_t values =
        mode == MemoryMode::Matrix ? 2 * N * n_theta + 3 * n_theta * n_theta + N + n_theta : N + 6 * n_theta;
    return {values, values * 8};
}

/// Tracks bytes held by allocators bound to it.
class MemoryMeter {
public:
    void allocate(std::size_t bytes) {
        current_ += bytes;
        peak_ = std::max(peak_, current_);
    }
    void release(std::size_t bytes) { current_ -= bytes; }
    std::size_t current_bytes() const noexcept { return current_; }
    std::size_t peak_bytes() const noexcept { return peak_; }
    void reset() noexcept { current_ = peak_ = 0; }

private:
    std::size_t current_ = 0;
    std::size_t peak_ = 0;
};

template <class T>
struct MeteredAllocator {
    using value_type = T;

    MemoryMeter* meter = nullptr;

    MeteredAllocator() = default;
    explicit MeteredAllocator(MemoryMeter* m) : meter(m) {}
    template <class U>
    MeteredAllocator(const MeteredAllocator<U>& o) : meter(o.meter) {}

    T* allocate(std::size_t n) {
        if (meter) meter->allocate(n * sizeof(T));
        return std::allocator<T>{}.allocate(n);
    }
    void deallocate(T* p, std::size_t n) {
        if (meter) meter->release(n * sizeof(T));
        std::allocator<T>{}.deallocate(p, n);
    }
    template <class U>
    bool operator==(const MeteredAllocator<U>& o) const {
        return meter == o.meter;
    }
};

// ---------------------------------------------------------------------------
// Decimated-step gradient descent

namespace detail {

// Problem concept:
//   double initial_cost(span<const double> θ)   cost at θ, residual cached
//   void direction(span<const double> θ, span<double> g)   J·E_gdd at θ
//   double candidate_cost(span<const double> θc)   cost at θc, residual cached
// The residual cache always matches the last evaluated point; the loop
// only asks for a direction at the last accepted point, which is the last
// evaluated one.
template <class Problem>
void descend(Problem& problem, std::span<double> theta, std::span<double> candidate, std::span<double> dir,
             const SolverOptions& opts, SolverTrace& trace, bool call_observer) {
    const std::size_t n = theta.size();
    double V = problem.initial_cost(theta);
    if (!std::isfinite(V)) throw DivergenceError("initial cost is not finite");
    trace.initial_cost = V;
    trace.reason = Termination::MaxIter;

    for (std::size_t k = 0; k < opts.max_iter; ++k) {
        problem.direction(theta, dir);
        double lambda = opts.lambda0;
        bool leave = false;
        while (true) {
            for (std::size_t l = 0; l < n; ++l) candidate[l] = theta[l] - lambda * dir[l];
            const double Vc = problem.candidate_cost(candidate);
            if (!std::isfinite(Vc))
                throw DivergenceError("cost became non-finite at iteration " + std::to_string(k + 1) +
                                      "; reduce lambda0");
            const bool better = Vc < V;
            trace.entries.push_back({k + 1, Vc, lambda, better});
            if (std::abs(Vc - V) <= opts.cost_tol * std::abs(V)) {
                if (better) {
                    std::copy(candidate.begin(), candidate.end(), theta.begin());
                    V = Vc;
                    ++trace.iterations;
                    if (call_observer && opts.observer) opts.observer(k + 1, theta);
                } else {
                    problem.candidate_cost(theta);  // restore the residual cache
                }
                trace.reason = Termination::CostTolerance;
                leave = true;
                break;
            }
            if (better) {
                std::copy(candidate.begin(), candidate.end(), theta.begin());
                V = Vc;
                ++trace.iterations;
                if (call_observer && opts.observer) opts.observer(k + 1, theta);
                break;
            }
            if (lambda < opts.lambda_min) {
                problem.candidate_cost(theta);
                trace.reason = Termination::LambdaMin;
                leave = true;
                break;
            }
            lambda *= opts.decimation;
        }
        if (leave) return;
    }
}

// Matrix form: E = Y − Kθ, direction −KᵀE + Dθ (or σ²Fᵀ(Fθ) in filter form).
class MatrixProblem {
public:
    MatrixProblem(const Matrix& K, const Vector& Y, const PenaltyMatrix* penalty)
        : K_(K), Y_(Y), penalty_(penalty), E_(Y.size()) {}

    double initial_cost(std::span<const double> theta) { return evaluate(theta); }
    double candidate_cost(std::span<const double> theta) { return evaluate(theta); }

    void direction(std::span<const double> theta, std::span<double> g) {
        const auto th = map(theta);
        Eigen::Map<Vector> out(g.data(), static_cast<Eigen::Index>(g.size()));
        out.noalias() = -(K_.transpose() * E_);
        if (penalty_) out += penalty_->apply(th);
    }

private:
    static Eigen::Map<const Vector> map(std::span<const double> v) {
        return {v.data(), static_cast<Eigen::Index>(v.size())};
    }

    double evaluate(std::span<const double> theta) {
        const auto th = map(theta);
        E_.noalias() = Y_ - K_ * th;
        double V = E_.squaredNorm();
        if (penalty_) V += penalty_->quadratic(th);
        return V;
    }

    const Matrix& K_;
    const Vector& Y_;
    const PenaltyMatrix* penalty_;
    Vector E_;
};

}  // namespace detail

/// Inversion-free regularized estimate by decimated-step gradient descent.
/// Accepts the penalty in any form; the filter form uses J = [−Kᵀ σFᵀ],
/// E_gdd = [E; σFθ].
inline SolveResult solve_gradient(const Matrix& K, const Vector& Y, const PenaltyMatrix& penalty,
                                  const SolverOptions& opts = {}) {
    opts.validate();
    if (K.rows() != Y.size()) throw std::invalid_argument("solve_gradient: K rows vs Y length");
    if (static_cast<std::size_t>(K.cols()) != penalty.dim())
        throw std::invalid_argument("solve_gradient: K columns vs penalty dimension");
    const auto n = static_cast<std::size_t>(K.cols());

    SolveResult result;
    result.trace.threads = Eigen::nbThreads();
    Vector theta = Vector::Zero(K.cols());
    if (opts.theta0) {
        if (opts.theta0->size() != K.cols()) throw std::invalid_argument("solve_gradient: theta0 length mismatch");
        theta = *opts.theta0;
    }
    Vector candidate(K.cols());
    Vector dir(K.cols());
    std::span<double> th{theta.data(), n}, cand{candidate.data(), n}, d{dir.data(), n};

    if (opts.warm_start_ls && !opts.theta0) {
        detail::MatrixProblem ls(K, Y, nullptr);
        SolverTrace ls_trace;
        detail::descend(ls, th, cand, d, opts, ls_trace, false);
        result.trace.warm_start_iterations = ls_trace.iterations;
    }
    detail::MatrixProblem problem(K, Y, &penalty);
    detail::descend(problem, th, cand, d, opts, result.trace, true);
    result.theta = std::move(theta);
    return result;
}

namespace detail {

using MeteredVector = std::vector<double, MeteredAllocator<double>>;

// Streaming form: K rows regenerated from u on every pass, penalty rows from
// the provider. Working storage: E (N), θ̂R (nθ), one regressor row (nθ).
class StreamingProblem {
public:
    StreamingProblem(const Vector& u, const Vector& Y, const VolterraStructure& s, const PenaltyRowProvider* rows,
                     MemoryMeter* meter)
        : u_(u.data(), static_cast<std::size_t>(u.size())),
          Y_(Y),
          s_(s),
          rows_(rows),
          E_(static_cast<std::size_t>(Y.size()), 0.0, MeteredAllocator<double>(meter)),
          theta_R_(s.n_theta(), 0.0, MeteredAllocator<double>(meter)),
          row_(s.n_theta(), 0.0, MeteredAllocator<double>(meter)) {}

    double initial_cost(std::span<const double> theta) { return evaluate(theta); }
    double candidate_cost(std::span<const double> theta) { return evaluate(theta); }

    void direction(std::span<const double> theta, std::span<double> g) {
        const std::size_t n_theta = g.size();
        std::fill(g.begin(), g.end(), 0.0);
        // LS part, −K_col(l)·E accumulated over rows.
        for (std::size_t n = 0; n < E_.size(); ++n) {
            s_.fill_regressor_row(u_, n, row_);
            const double e = E_[n];
            for (std::size_t l = 0; l < n_theta; ++l) g[l] -= row_[l] * e;
        }
        // Regularization part, σ²·R_row(l)·θ̂.
        if (rows_) {
            const double s2 = rows_->noise_var();
            for (std::size_t l = 0; l < n_theta; ++l) g[l] += s2 * rows_->row_dot(l, theta);
        }
    }

private:
    double evaluate(std::span<const double> theta) {
        const std::size_t n_theta = theta.size();
        double V = 0.0;
        for (std::size_t n = 0; n < E_.size(); ++n) {
            s_.fill_regressor_row(u_, n, row_);
            double pred = 0.0;
            for (std::size_t l = 0; l < n_theta; ++l) pred += row_[l] * theta[l];
            E_[n] = Y_[static_cast<Eigen::Index>(n)] - pred;
            V += E_[n] * E_[n];
        }
        if (rows_) {
            double reg = 0.0;
            for (std::size_t l = 0; l < n_theta; ++l) {
                theta_R_[l] = rows_->row_dot(l, theta);
                reg += theta_R_[l] * theta[l];
            }
            V += rows_->noise_var() * reg;
        }
        return V;
    }

    std::span<const double> u_;
    const Vector& Y_;
    const VolterraStructure& s_;
    const PenaltyRowProvider* rows_;
    MeteredVector E_;
    MeteredVector theta_R_;
    MeteredVector row_;
};

}  // namespace detail

/// Gradient solver that never forms K, KᵀK or D. Auxiliary storage is
/// N + 5·nθ values (E, θ̂, candidate, J·E_gdd, θ̂R, one regressor row);
/// bind a MemoryMeter to observe it.
inline SolveResult solve_streaming(const Vector& u, const Vector& Y, const VolterraStructure& s,
                                   const PenaltyRowProvider& rows, const SolverOptions& opts = {},
                                   MemoryMeter* meter = nullptr) {
    opts.validate();
    if (u.size() != Y.size()) throw std::invalid_argument("solve_streaming: u and Y lengths differ");
    if (u.size() < 1) throw std::invalid_argument("solve_streaming: empty record");
    if (rows.dim() != s.n_theta()) throw std::invalid_argument("solve_streaming: penalty dimension mismatch");
    const std::size_t n = s.n_theta();

    SolveResult result;
    result.trace.threads = 1;
    const MeteredAllocator<double> alloc(meter);
    detail::MeteredVector theta(n, 0.0, alloc), candidate(n, 0.0, alloc), dir(n, 0.0, alloc);
    if (opts.theta0) {
        if (static_cast<std::size_t>(opts.theta0->size()) != n)
            throw std::invalid_argument("solve_streaming: theta0 length mismatch");
        std::copy(opts.theta0->begin(), opts.theta0->end(), theta.begin());
    }
    if (opts.warm_start_ls && !opts.theta0) {
        detail::StreamingProblem ls(u, Y, s, nullptr, meter);
        SolverTrace ls_trace;
        detail::descend(ls, theta, candidate, dir, opts, ls_trace, false);
        result.trace.warm_start_iterations = ls_trace.iterations;
    }
    {
        detail::StreamingProblem problem(u, Y, s, &rows, meter);
        detail::descend(problem, theta, candidate, dir, opts, result.trace, true);
    }
    result.theta = Eigen::Map<const Vector>(theta.data(), static_cast<Eigen::Index>(n));
    return result;
}

}  // namespace volterra
