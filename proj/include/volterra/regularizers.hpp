#pragma once

// Priors on the Volterra kernels: DC/TC covariances in one, two and three
// dimensions, the assembled penalty D = σ²·P⁻¹, and the inversion-free filter
// (F) and direct (R) penalties.

#include "volterra/errors.hpp"
#include "volterra/kernel_model.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace volterra {

enum class KernelKind { DC, TC };

inline const char* to_string(KernelKind k) { return k == KernelKind::DC ? "DC" : "TC"; }

inline KernelKind kernel_kind_from_string(const std::string& s) {
    if (s == "DC" || s == "dc") return KernelKind::DC;
    if (s == "TC" || s == "tc") return KernelKind::TC;
    throw std::invalid_argument("unknown kernel kind '" + s + "' (expected DC or TC)");
}

/// One-dimensional prior: scale c, decay α, correlation ρ. TC ignores ρ and
/// uses √α.
struct KernelPrior1d {
    KernelKind kind = KernelKind::DC;
    double c = 1.0;
    double alpha = 0.8;
    double rho = 0.5;

    double effective_rho() const { return kind == KernelKind::TC ? std::sqrt(alpha) : rho; }
};

/// Decay and correlation along one direction of a multidimensional kernel.
struct DirectionPrior {
    double rho = 0.5;
    double alpha = 0.8;
};

/// Order-2 prior in the 45°-rotated (U, V) frame.
struct Order2Prior {
    double c = 1.0;
    DirectionPrior u{};
    DirectionPrior v{};
};

/// Order-3 prior along V=(1,1,1), U=(1,-1,0) and Q=(-1,-1,2).
struct Order3Prior {
    double c = 1.0;
    DirectionPrior v{};
    DirectionPrior u{};
    DirectionPrior q{};
};

struct HyperParameters {
    double p0_var = 1.0;  ///< variance of the offset h0
    KernelPrior1d order1{};
    Order2Prior order2{};
    Order3Prior order3{};
    double noise_var = 1.0;
};

namespace detail {

inline void check_scale(double c, const char* what) {
    if (!(c >= 0.0) || !std::isfinite(c)) throw std::invalid_argument(std::string(what) + ": scale c must be >= 0");
}

inline void check_alpha(double alpha, const char* what) {
    if (!(alpha >= 0.0 && alpha < 1.0)) throw std::invalid_argument(std::string(what) + ": alpha must be in [0, 1)");
}

inline void check_rho(double rho, const char* what) {
    if (!(rho > -1.0 && rho < 1.0)) throw std::invalid_argument(std::string(what) + ": rho must be in (-1, 1)");
}

// Directional correlations use non-integer exponents, so ρ must be non-negative.
inline void check_direction(const DirectionPrior& d, const char* what) {
    check_alpha(d.alpha, what);
    if (!(d.rho >= 0.0 && d.rho < 1.0))
        throw std::invalid_argument(std::string(what) + ": directional rho must be in [0, 1)");
}

inline void check_prior(const KernelPrior1d& p, const char* what) {
    check_scale(p.c, what);
    check_alpha(p.alpha, what);
    if (p.kind == KernelKind::DC) check_rho(p.rho, what);
}

}  // namespace detail

inline void validate(const HyperParameters& hp, const VolterraStructure& s) {
    if (s.include_offset() && !(hp.p0_var >= 0.0)) throw std::invalid_argument("hyperparameters: p0_var must be >= 0");
    if (s.max_degree() >= 1) detail::check_prior(hp.order1, "order-1 prior");
    if (s.max_degree() >= 2) {
        detail::check_scale(hp.order2.c, "order-2 prior");
        detail::check_direction(hp.order2.u, "order-2 U direction");
        detail::check_direction(hp.order2.v, "order-2 V direction");
    }
    if (s.max_degree() >= 3) {
        detail::check_scale(hp.order3.c, "order-3 prior");
        detail::check_direction(hp.order3.v, "order-3 V direction");
        detail::check_direction(hp.order3.u, "order-3 U direction");
        detail::check_direction(hp.order3.q, "order-3 Q direction");
    }
    if (s.max_degree() > 3) throw std::invalid_argument("hyperparameters: priors exist for orders up to 3 only");
    if (!(hp.noise_var > 0.0) || !std::isfinite(hp.noise_var))
        throw std::invalid_argument("hyperparameters: noise variance must be > 0");
}

// ---------------------------------------------------------------------------
// Covariances

/// P(i,j) = c·ρ^|i−j|·α^((i+j)/2), lags 0..n−1.
inline Matrix dc_covariance_1d(double c, double alpha, double rho, std::size_t n) {
    detail::check_scale(c, "dc_covariance_1d");
    detail::check_alpha(alpha, "dc_covariance_1d");
    detail::check_rho(rho, "dc_covariance_1d");
    if (n < 1) throw std::invalid_argument("dc_covariance_1d: n must be >= 1");
    const auto N = static_cast<Eigen::Index>(n);
    Vector half_decay(N);
    for (Eigen::Index i = 0; i < N; ++i) half_decay[i] = std::pow(alpha, 0.5 * static_cast<double>(i));
    Vector rho_pow(N);
    for (Eigen::Index k = 0; k < N; ++k) rho_pow[k] = std::pow(rho, static_cast<double>(k));
    Matrix P(N, N);
    for (Eigen::Index j = 0; j < N; ++j)
        for (Eigen::Index i = 0; i <= j; ++i) P(i, j) = c * rho_pow[j - i] * half_decay[i] * half_decay[j];
    P.triangularView<Eigen::StrictlyLower>() = P.transpose();
    return P;
}

/// P(i,j) = c·α^max(i,j).
inline Matrix tc_covariance_1d(double c, double alpha, std::size_t n) {
    detail::check_scale(c, "tc_covariance_1d");
    detail::check_alpha(alpha, "tc_covariance_1d");
    if (n < 1) throw std::invalid_argument("tc_covariance_1d: n must be >= 1");
    const auto N = static_cast<Eigen::Index>(n);
    Matrix P(N, N);
    for (Eigen::Index j = 0; j < N; ++j) {
        const double v = c * std::pow(alpha, static_cast<double>(j));
        for (Eigen::Index i = 0; i <= j; ++i) P(i, j) = v;
    }
    P.triangularView<Eigen::StrictlyLower>() = P.transpose();
    return P;
}

inline Matrix covariance_1d(const KernelPrior1d& p, std::size_t n) {
    return p.kind == KernelKind::TC ? tc_covariance_1d(p.c, p.alpha, n) : dc_covariance_1d(p.c, p.alpha, p.rho, n);
}

/// Coordinates of (τ1, τ2) in the frame rotated 45° counter-clockwise.
inline std::pair<double, double> rotate_2d(double tau1, double tau2) {
    const double s = std::sqrt(0.5);
    return {s * tau1 - s * tau2, s * tau1 + s * tau2};
}

namespace detail {

// Absolute coordinates of a lag tuple along each prior direction. Tuples are
// sorted first, so every permutation of a tuple maps to the same point.
inline std::array<double, 2> abs_coords_2d(std::span<const std::size_t> lags) {
    const auto [u, v] = rotate_2d(static_cast<double>(lags[0]), static_cast<double>(lags[1]));
    return {std::abs(u), std::abs(v)};
}

inline std::array<double, 3> abs_coords_3d(std::span<const std::size_t> lags) {
    std::array<double, 3> t{static_cast<double>(lags[0]), static_cast<double>(lags[1]), static_cast<double>(lags[2])};
    std::sort(t.begin(), t.end());
    const double pv = (t[0] + t[1] + t[2]) / std::sqrt(3.0);
    const double pu = (t[0] - t[1]) / std::sqrt(2.0);
    const double pq = (-t[0] - t[1] + 2.0 * t[2]) / std::sqrt(6.0);
    return {std::abs(pv), std::abs(pu), std::abs(pq)};
}

// ρ^|a−b|·α^((a+b)/2) for one direction.
inline double directional_factor(const DirectionPrior& d, double a, double b) {
    return std::pow(d.rho, std::abs(a - b)) * std::pow(d.alpha, 0.5 * (a + b));
}

// Dense product-of-DC covariance over precomputed absolute coordinates.
template <std::size_t D>
Matrix product_dc_covariance(double c, const std::array<DirectionPrior, D>& dirs,
                             const std::vector<std::array<double, D>>& coords) {
    const auto n = static_cast<Eigen::Index>(coords.size());
    // α^((a+b)/2) factors as α^(a/2)·α^(b/2).
    Vector scale(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        double s = 1.0;
        for (std::size_t d = 0; d < D; ++d) s *= std::pow(dirs[d].alpha, 0.5 * coords[static_cast<std::size_t>(i)][d]);
        scale[i] = s;
    }
    Matrix P(n, n);
    for (Eigen::Index j = 0; j < n; ++j) {
        const auto& cj = coords[static_cast<std::size_t>(j)];
        for (Eigen::Index i = 0; i <= j; ++i) {
            const auto& ci = coords[static_cast<std::size_t>(i)];
            double corr = 1.0;
            for (std::size_t d = 0; d < D; ++d) corr *= std::pow(dirs[d].rho, std::abs(ci[d] - cj[d]));
            P(i, j) = c * corr * scale[i] * scale[j];
        }
    }
    P.triangularView<Eigen::StrictlyLower>() = P.transpose();
    return P;
}

}  // namespace detail

/// Covariance between two order-2 coefficients given by their lag tuples.
inline double dc_covariance_2d_entry(const Order2Prior& p, std::span<const std::size_t> a,
                                     std::span<const std::size_t> b) {
    const auto ca = detail::abs_coords_2d(a);
    const auto cb = detail::abs_coords_2d(b);
    return p.c * detail::directional_factor(p.u, ca[0], cb[0]) * detail::directional_factor(p.v, ca[1], cb[1]);
}

inline double dc_covariance_3d_entry(const Order3Prior& p, std::span<const std::size_t> a,
                                     std::span<const std::size_t> b) {
    const auto ca = detail::abs_coords_3d(a);
    const auto cb = detail::abs_coords_3d(b);
    return p.c * detail::directional_factor(p.v, ca[0], cb[0]) * detail::directional_factor(p.u, ca[1], cb[1]) *
           detail::directional_factor(p.q, ca[2], cb[2]);
}

/// Order-2 covariance over the canonical index map.
inline Matrix dc_covariance_2d(const Order2Prior& p, const std::vector<SymmetricIndex>& index_map) {
    detail::check_scale(p.c, "dc_covariance_2d");
    detail::check_direction(p.u, "dc_covariance_2d U");
    detail::check_direction(p.v, "dc_covariance_2d V");
    std::vector<std::array<double, 2>> coords;
    coords.reserve(index_map.size());
    for (const auto& idx : index_map) {
        if (idx.lags.size() != 2) throw std::invalid_argument("dc_covariance_2d: index map is not order 2");
        coords.push_back(detail::abs_coords_2d(idx.lags));
    }
    return detail::product_dc_covariance<2>(p.c, {p.u, p.v}, coords);
}

/// Order-3 covariance: product of DC kernels along the unit V, U, Q directions.
inline Matrix dc_covariance_3d(const Order3Prior& p, const std::vector<SymmetricIndex>& index_map) {
    detail::check_scale(p.c, "dc_covariance_3d");
    detail::check_direction(p.v, "dc_covariance_3d V");
    detail::check_direction(p.u, "dc_covariance_3d U");
    detail::check_direction(p.q, "dc_covariance_3d Q");
    std::vector<std::array<double, 3>> coords;
    coords.reserve(index_map.size());
    for (const auto& idx : index_map) {
        if (idx.lags.size() != 3) throw std::invalid_argument("dc_covariance_3d: index map is not order 3");
        coords.push_back(detail::abs_coords_3d(idx.lags));
    }
    return detail::product_dc_covariance<3>(p.c, {p.v, p.u, p.q}, coords);
}

/// One diagonal block of the prior covariance P, positioned in the θ layout.
struct CovarianceBlock {
    std::size_t order = 0;
    std::size_t offset = 0;
    Matrix P;
};

/// blockdiag(P0, P1, ..., PM) for a structure, one entry per present order.
inline std::vector<CovarianceBlock> covariance_blocks(const VolterraStructure& s, const HyperParameters& hp) {
    validate(hp, s);
    std::vector<CovarianceBlock> blocks;
    if (s.include_offset()) blocks.push_back({0, 0, Matrix::Constant(1, 1, hp.p0_var)});
    for (std::size_t m = 1; m <= s.max_degree(); ++m) {
        Matrix P;
        if (m == 1) P = covariance_1d(hp.order1, s.memory(1));
        else if (m == 2) P = dc_covariance_2d(hp.order2, s.index_map(2));
        else P = dc_covariance_3d(hp.order3, s.index_map(3));
        blocks.push_back({m, s.block_offset(m), std::move(P)});
    }
    return blocks;
}

// ---------------------------------------------------------------------------
// Factorization with jitter fallback

/// Relative diagonal jitter used when a plain Cholesky factorization fails.
inline constexpr double kJitterEpsilon = 1e-10;

/// Cholesky of a symmetric block. When the plain factorization fails, the
/// diagonal is raised by kJitterEpsilon·trace/n and the factorization retried;
/// the added amount is returned through `jitter`.
inline Eigen::LLT<Matrix> factorize_spd(const Matrix& P, const std::string& name, double* jitter = nullptr) {
    Eigen::LLT<Matrix> llt(P);
    double added = 0.0;
    if (llt.info() != Eigen::Success) {
        const auto n = P.rows();
        added = kJitterEpsilon * P.trace() / static_cast<double>(n);
        if (added > 0.0) {
            Matrix Pj = P;
            Pj.diagonal().array() += added;
            llt.compute(Pj);
        }
        if (added <= 0.0 || llt.info() != Eigen::Success)
            throw ConditioningError("covariance block '" + name + "' is singular or indefinite after jitter");
    }
    if (jitter) *jitter = added;
    return llt;
}

/// Order tag of the transient block in joint systems.
inline constexpr std::size_t kTransientBlock = static_cast<std::size_t>(-1);

inline std::string block_name(std::size_t order) {
    if (order == kTransientBlock) return "P_tr";
    return "P" + std::to_string(order);
}

// ---------------------------------------------------------------------------
// Penalty representations

enum class PenaltyForm { CovarianceBlocks, Assembled, FilterFactor, DirectForm };

struct PenaltyBlock {
    std::size_t order = 0;
    std::size_t offset = 0;
    Matrix values;
};

/// Block-diagonal penalty in one of four representations:
///   CovarianceBlocks: blocks hold P, D = σ²·P⁻¹
///   Assembled:        blocks hold D itself
///   FilterFactor:     blocks hold F, D = σ²·FᵀF
///   DirectForm:       blocks hold R, D = σ²·R
class PenaltyMatrix {
public:
    PenaltyMatrix() = default;
    PenaltyMatrix(PenaltyForm form, std::vector<PenaltyBlock> blocks, std::size_t dim, double noise_var,
                  double max_jitter = 0.0)
        : form_(form), blocks_(std::move(blocks)), dim_(dim), noise_var_(noise_var), max_jitter_(max_jitter) {
        std::size_t expect = 0;
        for (const auto& b : blocks_) {
            if (b.offset != expect) throw std::invalid_argument("PenaltyMatrix: blocks must tile the parameter vector");
            if (b.values.rows() != b.values.cols())
                throw std::invalid_argument("PenaltyMatrix: blocks must be square");
            expect += static_cast<std::size_t>(b.values.rows());
        }
        if (expect != dim_) throw std::invalid_argument("PenaltyMatrix: blocks do not cover the dimension");
        if (form_ != PenaltyForm::Assembled && !(noise_var_ >= 0.0))
            throw std::invalid_argument("PenaltyMatrix: noise variance must be >= 0");
    }

    /// Zero penalty (ordinary least squares).
    static PenaltyMatrix zero(std::size_t dim) {
        std::vector<PenaltyBlock> blocks;
        if (dim > 0) blocks.push_back({0, 0, Matrix::Zero(static_cast<Eigen::Index>(dim), static_cast<Eigen::Index>(dim))});
        return {PenaltyForm::Assembled, std::move(blocks), dim, 0.0};
    }

    /// Dense D given directly.
    static PenaltyMatrix dense(Matrix D) {
        const auto n = static_cast<std::size_t>(D.rows());
        std::vector<PenaltyBlock> blocks;
        blocks.push_back({0, 0, std::move(D)});
        return {PenaltyForm::Assembled, std::move(blocks), n, 0.0};
    }

    PenaltyForm form() const noexcept { return form_; }
    std::size_t dim() const noexcept { return dim_; }
    double noise_var() const noexcept { return noise_var_; }
    /// Largest diagonal jitter added while building this penalty (0 if none).
    double max_jitter() const noexcept { return max_jitter_; }
    const std::vector<PenaltyBlock>& blocks() const noexcept { return blocks_; }

    /// Multiplier applied to the stored blocks to obtain D.
    double block_scale() const noexcept { return form_ == PenaltyForm::Assembled ? 1.0 : noise_var_; }

    /// Dense D.
    Matrix dense_D() const {
        const auto n = static_cast<Eigen::Index>(dim_);
        Matrix D = Matrix::Zero(n, n);
        for (const auto& b : blocks_) {
            const auto o = static_cast<Eigen::Index>(b.offset);
            const auto k = b.values.rows();
            auto dst = D.block(o, o, k, k);
            switch (form_) {
                case PenaltyForm::Assembled: dst = b.values; break;
                case PenaltyForm::DirectForm: dst = noise_var_ * b.values; break;
                case PenaltyForm::FilterFactor: dst = noise_var_ * (b.values.transpose() * b.values); break;
                case PenaltyForm::CovarianceBlocks: {
                    auto llt = factorize_spd(b.values, block_name(b.order));
                    dst = noise_var_ * llt.solve(Matrix::Identity(k, k));
                    break;
                }
            }
        }
        return D;
    }

    /// D·θ.
    Vector apply(const Vector& theta) const {
        check_dim(theta);
        Vector out = Vector::Zero(theta.size());
        for (const auto& b : blocks_) {
            const auto o = static_cast<Eigen::Index>(b.offset);
            const auto k = b.values.rows();
            const auto seg = theta.segment(o, k);
            switch (form_) {
                case PenaltyForm::Assembled: out.segment(o, k).noalias() = b.values * seg; break;
                case PenaltyForm::DirectForm: out.segment(o, k).noalias() = noise_var_ * (b.values * seg); break;
                case PenaltyForm::FilterFactor: {
                    const Vector f = b.values * seg;
                    out.segment(o, k).noalias() = noise_var_ * (b.values.transpose() * f);
                    break;
                }
                case PenaltyForm::CovarianceBlocks: {
                    auto llt = factorize_spd(b.values, block_name(b.order));
                    out.segment(o, k) = noise_var_ * llt.solve(seg);
                    break;
                }
            }
        }
        return out;
    }

    /// θᵀ·D·θ (σ²·‖Fθ‖² in filter form).
    double quadratic(const Vector& theta) const {
        if (form_ == PenaltyForm::FilterFactor) return noise_var_ * filter_apply(theta).squaredNorm();
        return theta.dot(apply(theta));
    }

    /// F·θ, filter form only.
    Vector filter_apply(const Vector& theta) const {
        if (form_ != PenaltyForm::FilterFactor) throw std::logic_error("filter_apply: penalty is not in filter form");
        check_dim(theta);
        Vector out(theta.size());
        for (const auto& b : blocks_) {
            const auto o = static_cast<Eigen::Index>(b.offset);
            const auto k = b.values.rows();
            out.segment(o, k).noalias() = b.values * theta.segment(o, k);
        }
        return out;
    }

private:
    void check_dim(const Vector& theta) const {
        if (static_cast<std::size_t>(theta.size()) != dim_)
            throw std::invalid_argument("PenaltyMatrix: vector length does not match penalty dimension");
    }

    PenaltyForm form_ = PenaltyForm::Assembled;
    std::vector<PenaltyBlock> blocks_;
    std::size_t dim_ = 0;
    double noise_var_ = 0.0;
    double max_jitter_ = 0.0;
};

/// D = σ²·blockdiag(P0..PM)⁻¹, inverted block by block.
inline PenaltyMatrix assemble_penalty(const std::vector<CovarianceBlock>& blocks, double noise_var) {
    if (!(noise_var >= 0.0)) throw std::invalid_argument("assemble_penalty: noise variance must be >= 0");
    std::vector<PenaltyBlock> out;
    std::size_t dim = 0;
    double max_jitter = 0.0;
    for (const auto& b : blocks) {
        const auto k = b.P.rows();
        double jitter = 0.0;
        auto llt = factorize_spd(b.P, block_name(b.order), &jitter);
        max_jitter = std::max(max_jitter, jitter);
        Matrix D = noise_var * llt.solve(Matrix::Identity(k, k));
        D = 0.5 * (D + D.transpose()).eval();
        out.push_back({b.order, b.offset, std::move(D)});
        dim += static_cast<std::size_t>(k);
    }
    return {PenaltyForm::Assembled, std::move(out), dim, 0.0, max_jitter};
}

// ---------------------------------------------------------------------------
// Inversion-free forms

namespace detail {

inline void check_filter_args(KernelKind kind, double alpha, double rho, std::size_t n, const char* what) {
    if (!(alpha > 0.0 && alpha < 1.0)) throw std::invalid_argument(std::string(what) + ": alpha must be in (0, 1)");
    if (kind == KernelKind::DC) check_rho(rho, what);
    if (n < 1) throw std::invalid_argument(std::string(what) + ": n must be >= 1");
}

}  // namespace detail

/// Upper-bidiagonal F with FᵀF = P⁻¹ for the unit-scale (c = 1) DC/TC
/// covariance. Rows are first-order whitening filters of the correlated lags.
inline Matrix filter_factor_1d(KernelKind kind, double alpha, double rho, std::size_t n) {
    detail::check_filter_args(kind, alpha, rho, n, "filter_factor_1d");
    const double r = kind == KernelKind::TC ? std::sqrt(alpha) : rho;
    const double innov = 1.0 - r * r;
    const auto N = static_cast<Eigen::Index>(n);
    Matrix F = Matrix::Zero(N, N);
    for (Eigen::Index i = 0; i < N; ++i) {
        const double a_i = std::pow(alpha, static_cast<double>(i));
        if (i + 1 < N) {
            F(i, i) = std::sqrt(1.0 / (a_i * innov));
            F(i, i + 1) = -r * std::sqrt(1.0 / (a_i * alpha * innov));
        } else {
            F(i, i) = std::sqrt(1.0 / a_i);
        }
    }
    return F;
}

/// Entry (i, j) of the analytic tridiagonal inverse of the DC/TC covariance.
inline double direct_penalty_entry(KernelKind kind, double c, double alpha, double rho, std::size_t n, std::size_t i,
                                   std::size_t j) {
    const double r = kind == KernelKind::TC ? std::sqrt(alpha) : rho;
    const double innov = 1.0 - r * r;
    const std::size_t d = i > j ? i - j : j - i;
    if (d > 1) return 0.0;
    const double scale = c * std::pow(alpha, 0.5 * static_cast<double>(i + j));
    if (d == 1) return -r / (innov * scale);
    if (n == 1) return 1.0 / scale;
    const bool boundary = i == 0 || i == n - 1;
    return (boundary ? 1.0 : 1.0 + r * r) / (innov * scale);
}

/// Symmetric tridiagonal R = P⁻¹ for the DC/TC covariance with scale c.
inline Matrix direct_penalty_1d(KernelKind kind, double c, double alpha, double rho, std::size_t n) {
    detail::check_filter_args(kind, alpha, rho, n, "direct_penalty_1d");
    if (!(c > 0.0)) throw std::invalid_argument("direct_penalty_1d: c must be > 0");
    const auto N = static_cast<Eigen::Index>(n);
    Matrix R = Matrix::Zero(N, N);
    for (std::size_t i = 0; i < n; ++i) {
        const auto I = static_cast<Eigen::Index>(i);
        R(I, I) = direct_penalty_entry(kind, c, alpha, rho, n, i, i);
        if (i + 1 < n) {
            R(I, I + 1) = direct_penalty_entry(kind, c, alpha, rho, n, i, i + 1);
            R(I + 1, I) = R(I, I + 1);
        }
    }
    return R;
}

/// R_m = P_m⁻¹ for orders 2 and 3 (includes the 1/c_m factor), by explicit
/// inversion of the rotated-DC covariance.
inline Matrix multidim_direct_penalty(std::size_t order, const HyperParameters& hp,
                                      const std::vector<SymmetricIndex>& index_map, double* jitter = nullptr) {
    Matrix P;
    if (order == 2) P = dc_covariance_2d(hp.order2, index_map);
    else if (order == 3) P = dc_covariance_3d(hp.order3, index_map);
    else throw std::invalid_argument("multidim_direct_penalty: order must be 2 or 3");
    auto llt = factorize_spd(P, block_name(order), jitter);
    Matrix R = llt.solve(Matrix::Identity(P.rows(), P.cols()));
    return 0.5 * (R + R.transpose());
}

/// Whole-structure penalty in direct form: analytic R for h0 and h1, inverted
/// covariance for orders 2 and 3. D = σ²·R.
inline PenaltyMatrix build_direct_penalty(const VolterraStructure& s, const HyperParameters& hp) {
    validate(hp, s);
    std::vector<PenaltyBlock> blocks;
    double max_jitter = 0.0;
    if (s.include_offset()) {
        if (!(hp.p0_var > 0.0)) throw ConditioningError("covariance block 'P0' is singular (p0_var = 0)");
        blocks.push_back({0, 0, Matrix::Constant(1, 1, 1.0 / hp.p0_var)});
    }
    for (std::size_t m = 1; m <= s.max_degree(); ++m) {
        Matrix R;
        if (m == 1) {
            const auto& p = hp.order1;
            if (!(p.c > 0.0)) throw ConditioningError("covariance block 'P1' is singular (c = 0)");
            R = direct_penalty_1d(p.kind, p.c, p.alpha, p.rho, s.memory(1));
        } else {
            double jitter = 0.0;
            R = multidim_direct_penalty(m, hp, s.index_map(m), &jitter);
            max_jitter = std::max(max_jitter, jitter);
        }
        blocks.push_back({m, s.block_offset(m), std::move(R)});
    }
    return {PenaltyForm::DirectForm, std::move(blocks), s.n_theta(), hp.noise_var, max_jitter};
}

/// Filter form D = σ²·FᵀF. Only the offset and order-1 blocks have analytic
/// factors; higher orders are rejected instead of decomposed numerically.
inline PenaltyMatrix build_filter_penalty(const VolterraStructure& s, const HyperParameters& hp) {
    validate(hp, s);
    if (s.max_degree() > 1)
        throw std::invalid_argument("build_filter_penalty: analytic filter factors exist for orders 0 and 1 only");
    std::vector<PenaltyBlock> blocks;
    if (s.include_offset()) {
        if (!(hp.p0_var > 0.0)) throw ConditioningError("covariance block 'P0' is singular (p0_var = 0)");
        blocks.push_back({0, 0, Matrix::Constant(1, 1, 1.0 / std::sqrt(hp.p0_var))});
    }
    if (s.max_degree() == 1) {
        const auto& p = hp.order1;
        if (!(p.c > 0.0)) throw ConditioningError("covariance block 'P1' is singular (c = 0)");
        Matrix F = filter_factor_1d(p.kind, p.alpha, p.rho, s.memory(1)) / std::sqrt(p.c);
        blocks.push_back({1, s.block_offset(1), std::move(F)});
    }
    return {PenaltyForm::FilterFactor, std::move(blocks), s.n_theta(), hp.noise_var};
}

/// Assembled D for a structure.
inline PenaltyMatrix build_assembled_penalty(const VolterraStructure& s, const HyperParameters& hp) {
    return assemble_penalty(covariance_blocks(s, hp), hp.noise_var);
}

// ---------------------------------------------------------------------------
// Row access for the streaming solver

/// Non-zero stretch of one row of R (unscaled, D = σ²·R).
struct PenaltyRow {
    std::size_t first = 0;
    std::span<const double> values;
};

/// Rows of the direct-form penalty. Order-0/1 rows are computed on demand from
/// the hyperparameters; order-2/3 rows are read from the inverted blocks.
class PenaltyRowProvider {
public:
    PenaltyRowProvider() = default;

    PenaltyRowProvider(const VolterraStructure& s, const HyperParameters& hp)
        : structure_(s), hp_(hp), noise_var_(hp.noise_var) {
        validate(hp, s);
        if (s.include_offset() && !(hp.p0_var > 0.0)) throw ConditioningError("covariance block 'P0' is singular");
        if (s.max_degree() >= 1 && !(hp.order1.c > 0.0)) throw ConditioningError("covariance block 'P1' is singular");
        for (std::size_t m = 2; m <= s.max_degree(); ++m) {
            Matrix R = multidim_direct_penalty(m, hp, s.index_map(m));
            dense_.push_back({m, s.block_offset(m), std::move(R)});
        }
    }

    /// Wraps an existing direct-form penalty (all rows read from its blocks).
    explicit PenaltyRowProvider(const PenaltyMatrix& direct) : noise_var_(direct.noise_var()) {
        if (direct.form() != PenaltyForm::DirectForm)
            throw std::invalid_argument("PenaltyRowProvider: penalty must be in direct form");
        for (const auto& b : direct.blocks()) dense_.push_back({b.order, b.offset, b.values});
        dim_ = direct.dim();
        analytic_ = false;
    }

    double noise_var() const noexcept { return noise_var_; }
    std::size_t dim() const noexcept { return analytic_ ? structure_.n_theta() : dim_; }

    /// Values stored by this provider (the inverted dense blocks).
    std::size_t stored_values() const noexcept {
        std::size_t n = 0;
        for (const auto& b : dense_) n += static_cast<std::size_t>(b.values.size());
        return n;
    }

    /// Row l of R. `scratch` backs analytic rows and must outlive the result.
    PenaltyRow row(std::size_t l, std::span<double, 3> scratch) const {
        if (analytic_) {
            if (structure_.include_offset() && l == 0) {
                scratch[0] = 1.0 / hp_.p0_var;
                return {0, {scratch.data(), 1}};
            }
            if (structure_.max_degree() >= 1) {
                const std::size_t o = structure_.block_offset(1);
                const std::size_t n = structure_.memory(1);
                if (l >= o && l < o + n) {
                    const std::size_t i = l - o;
                    const auto& p = hp_.order1;
                    const std::size_t lo = i == 0 ? 0 : i - 1;
                    const std::size_t hi = std::min(n - 1, i + 1);
                    for (std::size_t j = lo; j <= hi; ++j)
                        scratch[j - lo] = direct_penalty_entry(p.kind, p.c, p.alpha, p.rho, n, i, j);
                    return {o + lo, {scratch.data(), hi - lo + 1}};
                }
            }
        }
        for (const auto& b : dense_) {
            const auto k = static_cast<std::size_t>(b.values.rows());
            if (l >= b.offset && l < b.offset + k) {
                // Blocks are symmetric, so column (l − offset) is the row.
                const auto col = static_cast<Eigen::Index>(l - b.offset);
                return {b.offset, {b.values.col(col).data(), k}};
            }
        }
        throw std::out_of_range("PenaltyRowProvider: row index out of range");
    }

    /// R_row(l)·θ.
    double row_dot(std::size_t l, std::span<const double> theta) const {
        std::array<double, 3> scratch{};
        const auto r = row(l, scratch);
        double acc = 0.0;
        for (std::size_t k = 0; k < r.values.size(); ++k) acc += r.values[k] * theta[r.first + k];
        return acc;
    }

private:
    VolterraStructure structure_;
    HyperParameters hp_;
    std::vector<PenaltyBlock> dense_;
    double noise_var_ = 0.0;
    std::size_t dim_ = 0;
    bool analytic_ = true;
};

}  // namespace volterra
