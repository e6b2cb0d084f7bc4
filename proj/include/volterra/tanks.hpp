#pragma once

// Cascaded water tanks with overflow, random-phase multisine excitation and
// the RMS error index.

#include "volterra/kernel_model.hpp"

#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>

namespace volterra {

struct TankParams {
    double k1 = 0.5;
    double k2 = 0.4;
    double k3 = 0.3;
    double k4 = 0.2;
    double x1_max = 10.0;
    double x2_max = 10.0;
    double overflow_fraction = 0.5;
    std::size_t substeps = 10;
    double process_noise1 = 0.0;
    double process_noise2 = 0.0;
    double output_noise = 0.0;

    void validate() const {
        if (!(k1 > 0 && k2 > 0 && k3 > 0 && k4 > 0)) throw std::invalid_argument("TankParams: k1..k4 must be positive");
        if (!(x1_max > 0 && x2_max > 0)) throw std::invalid_argument("TankParams: overflow levels must be positive");
        if (!(overflow_fraction >= 0 && overflow_fraction <= 1))
            throw std::invalid_argument("TankParams: overflow_fraction must lie in [0, 1]");
        if (substeps < 1) throw std::invalid_argument("TankParams: substeps must be >= 1");
        if (!(process_noise1 >= 0 && process_noise2 >= 0 && output_noise >= 0))
            throw std::invalid_argument("TankParams: noise levels must be non-negative");
    }
};

struct ExcitationSpec {
    std::size_t N = 1024;
    double fs = 0.25;
    double f_min = 0.0;
    double f_max = 0.0144;
    double std = 1.0;
    double offset = 0.0;
    std::uint64_t seed = 1;

    void validate() const {
        if (N < 2) throw std::invalid_argument("ExcitationSpec: N must be >= 2");
        if (!(fs > 0)) throw std::invalid_argument("ExcitationSpec: fs must be positive");
        if (!(f_min >= 0 && f_min <= f_max && f_max <= fs / 2))
            throw std::invalid_argument("ExcitationSpec: need 0 <= f_min <= f_max <= fs/2");
        if (!(std >= 0)) throw std::invalid_argument("ExcitationSpec: std must be non-negative");
    }
};

/// Integer frequency bins k >= 1 with k·fs/N inside [f_min, f_max].
inline std::vector<std::size_t> excited_bins(const ExcitationSpec& spec) {
    spec.validate();
    const double df = spec.fs / static_cast<double>(spec.N);
    // Small slack so a band edge that lands on a bin is included.
    const double eps = 1e-9 * df;
    std::vector<std::size_t> bins;
    for (std::size_t k = 1; k <= spec.N / 2; ++k) {
        const double f = static_cast<double>(k) * df;
        if (f >= spec.f_min - eps && f <= spec.f_max + eps) bins.push_back(k);
    }
    return bins;
}

/// u(n) = offset + Σ A·cos(2πkn/N + φ_k), scaled to the requested sample std.
inline Vector multisine(const ExcitationSpec& spec) {
    const auto bins = excited_bins(spec);
    if (bins.empty()) throw std::invalid_argument("multisine: no frequency bins inside the excited band");
    std::mt19937_64 rng(spec.seed);
    std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
    const auto N = static_cast<Eigen::Index>(spec.N);
    Vector u = Vector::Zero(N);
    for (std::size_t k : bins) {
        const double phi = phase(rng);
        const double w = 2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(spec.N);
        for (Eigen::Index n = 0; n < N; ++n) u[n] += std::cos(w * static_cast<double>(n) + phi);
    }
    u.array() -= u.mean();
    const double sd = std::sqrt(u.squaredNorm() / static_cast<double>(N));
    if (sd > 0) u *= spec.std / sd;
    u.array() += spec.offset;
    return u;
}

struct TankState {
    double x1 = 0.0;
    double x2 = 0.0;
};

struct TankSimulation {
    Vector y;
    Vector x1;
    Vector x2;
    std::size_t upper_overflow_samples = 0;  // samples where the upper tank spilled
    std::size_t lower_overflow_samples = 0;  // samples where the lower tank hit x2_max

    std::size_t overflow_samples() const noexcept { return upper_overflow_samples + lower_overflow_samples; }
};

/// Explicit Euler with `substeps` steps per sample, clamping each substep.
/// Upper-tank excess above x1_max goes γ to the lower tank, the rest is lost;
/// lower-tank excess is lost. States are sampled at the start of each period.
inline TankSimulation simulate_tanks(const Vector& u, const TankParams& p, TankState x0, double fs, std::uint64_t seed) {
    p.validate();
    if (!(fs > 0)) throw std::invalid_argument("simulate_tanks: fs must be positive");
    if (!(x0.x1 >= 0 && x0.x2 >= 0)) throw std::invalid_argument("simulate_tanks: initial states must be non-negative");
    const Eigen::Index N = u.size();
    const double dt = 1.0 / (fs * static_cast<double>(p.substeps));
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g(0.0, 1.0);
    const double sq = std::sqrt(dt);

    TankSimulation out{Vector(N), Vector(N), Vector(N), 0, 0};
    double x1 = std::min(x0.x1, p.x1_max), x2 = std::min(x0.x2, p.x2_max);
    for (Eigen::Index n = 0; n < N; ++n) {
        out.x1[n] = x1;
        out.x2[n] = x2;
        bool spilled = false, capped = false;
        for (std::size_t s = 0; s < p.substeps; ++s) {
            const double q1 = p.k1 * std::sqrt(x1);
            double nx1 = x1 + dt * (-q1 + p.k4 * u[n]);
            double nx2 = x2 + dt * (p.k2 * std::sqrt(x1) - p.k3 * std::sqrt(x2));
            if (p.process_noise1 > 0) nx1 += sq * p.process_noise1 * g(rng);
            if (p.process_noise2 > 0) nx2 += sq * p.process_noise2 * g(rng);
            if (nx1 > p.x1_max) {
                nx2 += p.overflow_fraction * (nx1 - p.x1_max);
                nx1 = p.x1_max;
                spilled = true;
            }
            if (nx2 >= p.x2_max) capped = true;
            x1 = std::clamp(nx1, 0.0, p.x1_max);
            x2 = std::clamp(nx2, 0.0, p.x2_max);
        }
        out.upper_overflow_samples += spilled;
        out.lower_overflow_samples += capped;
    }
    out.y = out.x2;
    if (p.output_noise > 0)
        for (Eigen::Index n = 0; n < N; ++n) out.y[n] += p.output_noise * g(rng);
    return out;
}

/// Output noise std giving the requested SNR (dB) against a clean output's
/// variance around its mean.
inline double noise_std_for_snr(const Vector& clean, double snr_db) {
    const double var = (clean.array() - clean.mean()).square().mean();
    return std::sqrt(var / std::pow(10.0, snr_db / 10.0));
}

/// Equilibrium for a constant input u0, capped at the overflow levels.
inline TankState steady_state(const TankParams& p, double u0) {
    const double x1 = std::pow(std::max(0.0, p.k4 * u0) / p.k1, 2);
    const double x2 = std::pow(p.k2 / p.k3, 2) * std::min(x1, p.x1_max);
    return {std::min(x1, p.x1_max), std::min(x2, p.x2_max)};
}

/// One generated record: multisine input around an operating point, tanks
/// output with additive noise set by `snr_db` (or TankParams::output_noise
/// when snr_db is not finite).
struct TankRecordSpec {
    TankParams tanks{};
    ExcitationSpec excitation{1024, 0.25, 0.0, 0.0144, 1.5, 3.5, 1};
    double snr_db = 40.0;
    bool start_at_rest = false;  ///< empty tanks instead of the operating point
};

struct TankRecord {
    Dataset data;
    TankSimulation sim;
    double noise_std = 0.0;
};

inline TankRecord generate_tank_record(const TankRecordSpec& spec, std::uint64_t seed) {
    ExcitationSpec ex = spec.excitation;
    ex.seed = seed;
    const Vector u = multisine(ex);
    const TankState x0 = spec.start_at_rest ? TankState{} : steady_state(spec.tanks, ex.offset);
    TankParams clean = spec.tanks;
    double e = clean.output_noise;
    clean.output_noise = 0.0;
    TankSimulation sim = simulate_tanks(u, clean, x0, ex.fs, seed);
    if (std::isfinite(spec.snr_db)) e = noise_std_for_snr(sim.y, spec.snr_db);
    std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
    std::normal_distribution<double> g(0.0, 1.0);
    if (e > 0)
        for (Eigen::Index n = 0; n < sim.y.size(); ++n) sim.y[n] += e * g(rng);
    return {Dataset(u, sim.y, 1.0 / ex.fs), std::move(sim), e};
}

/// √(mean((y_mod − y_val)²)).
inline double rms_index(const Vector& y_mod, const Vector& y_val) {
    if (y_mod.size() != y_val.size()) throw std::invalid_argument("rms_index: length mismatch");
    if (y_mod.size() < 1) throw std::invalid_argument("rms_index: empty input");
    return std::sqrt((y_mod - y_val).squaredNorm() / static_cast<double>(y_mod.size()));
}

inline void write_states_csv(const std::string& path, const TankSimulation& sim) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write states '" + path + "'");
    out.precision(17);
    out << "x1,x2\n";
    for (Eigen::Index n = 0; n < sim.x1.size(); ++n) out << sim.x1[n] << ',' << sim.x2[n] << '\n';
    if (!out) throw std::runtime_error("write failed for '" + path + "'");
}

}  // namespace volterra
