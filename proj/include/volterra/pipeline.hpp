#pragma once

// Estimation workflows: per-scenario tuning, solving, validation and report
// serialization, plus kernel slice export.

#include "volterra/config.hpp"
#include "volterra/errors.hpp"
#include "volterra/kernel_model.hpp"
#include "volterra/regularizers.hpp"
#include "volterra/solver.hpp"
#include "volterra/tanks.hpp"
#include "volterra/transient.hpp"
#include "volterra/tuning.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <future>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace volterra {

enum class SolverMode { Exact, Gradient, Streaming };

inline const char* to_string(SolverMode m) {
    switch (m) {
        case SolverMode::Exact: return "exact";
        case SolverMode::Gradient: return "gradient";
        case SolverMode::Streaming: return "streaming";
    }
    return "unknown";
}

inline SolverMode solver_mode_from_string(const std::string& s) {
    if (s == "exact") return SolverMode::Exact;
    if (s == "gradient") return SolverMode::Gradient;
    if (s == "streaming") return SolverMode::Streaming;
    throw std::invalid_argument("unknown solver mode '" + s + "' (exact, gradient, streaming)");
}

inline MlRoute ml_route_from_string(const std::string& s) {
    if (s == "auto") return MlRoute::Auto;
    if (s == "output") return MlRoute::OutputSpace;
    if (s == "parameter") return MlRoute::ParameterSpace;
    throw std::invalid_argument("unknown marginal likelihood route '" + s + "' (auto, output, parameter)");
}

struct ScenarioConfig {
    std::string name;
    bool include_offset = false;
    std::vector<std::size_t> memory;

    VolterraStructure structure() const { return {include_offset, memory}; }
};

struct ExperimentConfig {
    std::string estimation_path;
    std::string validation_path;
    double sample_period = 4.0;
    std::size_t validation_skip = 100;
    bool validation_transient = false;
    std::vector<ScenarioConfig> scenarios;

    TuningMethod method = TuningMethod::MarginalLikelihood;
    KernelKind kernel = KernelKind::TC;
    TuningOptions tuning{};

    bool transient = false;
    std::vector<std::size_t> transient_candidates{20, 60, 120};
    KernelKind transient_kernel = KernelKind::DC;
    TuningMethod transient_selection = TuningMethod::ResidualAnalysis;
    double transient_band = 0.10;

    SolverMode solver = SolverMode::Exact;
    SolverOptions solver_options{};
    double memory_limit_mb = 0.0;  ///< 0: no limit on the solver working set

    std::string output_dir = ".";
    bool parallel = false;
    std::string config_hash;

    void validate() const {
        if (scenarios.empty()) throw ConfigError("config: no [structure.<name>] scenario");
        for (const auto& s : scenarios) {
            if (s.memory.empty() && !s.include_offset)
                throw ConfigError("config: scenario '" + s.name + "' has neither offset nor kernels");
            for (auto m : s.memory)
                if (m < 1) throw ConfigError("config: scenario '" + s.name + "' has a zero memory length");
        }
        if (!(sample_period > 0)) throw ConfigError("config: data.sample_period must be positive");
        if (transient && transient_candidates.empty()) throw ConfigError("config: transient.candidates is empty");
        if (validation_transient && !transient)
            throw ConfigError("config: data.validation_transient requires transient.enabled");
        if (!(memory_limit_mb >= 0)) throw ConfigError("config: solver.memory_limit_mb must be >= 0");
        if (!(tuning.level > 0 && tuning.level < 1)) throw ConfigError("config: tuning.level must lie in (0, 1)");
        try {
            solver_options.validate();
        } catch (const std::invalid_argument& e) {
            throw ConfigError(std::string("config: ") + e.what());
        }
    }
};

namespace detail {

template <class F>
auto config_value(F&& f) -> decltype(f()) {
    try {
        return f();
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
}

}  // namespace detail

/// Builds an experiment from [data], [structure.*], [tuning], [transient]
/// and [solver]; unset keys keep the ExperimentConfig defaults.
inline ExperimentConfig experiment_from_config(const Config& c) {
    ExperimentConfig e;
    e.estimation_path = c.get_string("data", "estimation", "");
    e.validation_path = c.get_string("data", "validation", "");
    e.sample_period = c.get_double("data", "sample_period", e.sample_period);
    e.validation_skip = c.get_size("data", "validation_skip", e.validation_skip);
    e.validation_transient = c.get_bool("data", "validation_transient", e.validation_transient);
    e.output_dir = c.get_string("data", "output_dir", e.output_dir);
    e.parallel = c.get_bool("data", "parallel", e.parallel);

    for (const auto& sec : c.sections_with_prefix("structure.")) {
        ScenarioConfig s;
        s.name = sec.substr(10);
        s.include_offset = c.get_bool(sec, "offset", false);
        s.memory = c.get_sizes(sec, "memory", {});
        e.scenarios.push_back(std::move(s));
    }

    detail::config_value([&] {
        e.method = tuning_method_from_string(c.get_string("tuning", "method", to_string(e.method)));
        e.tuning.route = ml_route_from_string(c.get_string("tuning", "route", "auto"));
        e.kernel = kernel_kind_from_string(c.get_string("tuning", "kernel", to_string(e.kernel)));
        e.transient_kernel = kernel_kind_from_string(c.get_string("transient", "kernel", to_string(e.transient_kernel)));
        e.transient_selection =
            tuning_method_from_string(c.get_string("transient", "selection", to_string(e.transient_selection)));
        e.solver = solver_mode_from_string(c.get_string("solver", "mode", to_string(e.solver)));
        return 0;
    });
    auto& search = e.tuning.search;
    search.n_starts = c.get_size("tuning", "n_starts", search.n_starts);
    search.max_evals = c.get_size("tuning", "max_evals", search.max_evals);
    search.seed = c.get_u64("tuning", "seed", search.seed);
    search.threads = c.get_size("tuning", "threads", search.threads);
    search.simplex_tol = c.get_double("tuning", "simplex_tol", search.simplex_tol);
    e.tuning.max_lag = c.get_size("tuning", "max_lag", e.tuning.max_lag);
    e.tuning.level = c.get_double("tuning", "level", e.tuning.level);

    e.transient = c.get_bool("transient", "enabled", e.transient);
    e.transient_candidates = c.get_sizes("transient", "candidates", e.transient_candidates);
    e.transient_band = c.get_double("transient", "band", e.transient_band);

    auto& so = e.solver_options;
    so.lambda0 = c.get_double("solver", "lambda0", so.lambda0);
    so.lambda_min = c.get_double("solver", "lambda_min", so.lambda_min);
    so.decimation = c.get_double("solver", "decimation", so.decimation);
    so.cost_tol = c.get_double("solver", "cost_tol", so.cost_tol);
    so.max_iter = c.get_size("solver", "max_iter", so.max_iter);
    so.warm_start_ls = c.get_bool("solver", "warm_start", so.warm_start_ls);
    e.memory_limit_mb = c.get_double("solver", "memory_limit_mb", e.memory_limit_mb);

    e.config_hash = c.hash();
    e.validate();
    return e;
}

// ---------------------------------------------------------------------------
// Reports

struct ScenarioReport {
    std::string name;
    bool ok = false;
    std::string error;

    bool include_offset = false;
    std::vector<std::size_t> memory;
    std::size_t n_theta = 0;

    std::string tuning_method;
    HyperParameters hp{};
    double tuning_objective = 0.0;

    std::size_t n_tr = 0;
    KernelPrior1d transient_prior{};
    bool transient_warning = false;

    Vector theta;
    Vector theta_tr;
    Vector theta_tr_validation;

    ResidualReport residuals{};
    double e_rms = 0.0;
    std::size_t validation_samples = 0;

    std::string solver_mode;
    SolverTrace trace{};
    MemoryEstimate memory_matrix{};
    MemoryEstimate memory_reduced{};
    std::size_t streaming_peak_bytes = 0;
    double wall_time_s = 0.0;

    VolterraModel model() const { return {VolterraStructure(include_offset, memory), theta}; }
};

struct ExperimentReport {
    std::string config_hash;
    std::vector<ScenarioReport> scenarios;

    bool all_ok() const {
        for (const auto& s : scenarios)
            if (!s.ok) return false;
        return true;
    }
};

namespace detail {

inline Dataset load_dataset(const std::string& path, double ts, const char* what) {
    if (path.empty()) throw ConfigError(std::string("config: data.") + what + " is not set");
    return read_dataset_csv(path, ts);
}

// θ_tr for a fixed kernel estimate: P(P + σ²I)⁻¹·r over the first n_tr samples.
inline Vector fit_transient(const Vector& residual, const TransientSpec& spec, double noise_var) {
    const auto n = static_cast<Eigen::Index>(std::min<std::size_t>(spec.n_tr, static_cast<std::size_t>(residual.size())));
    const Matrix P = covariance_1d(spec.prior, static_cast<std::size_t>(n));
    Matrix A = P;
    A.diagonal().array() += noise_var;
    const Eigen::LLT<Matrix> llt(A);
    if (llt.info() != Eigen::Success) throw ConditioningError("validation transient system is not positive definite");
    return P * llt.solve(residual.head(n));
}

inline void check_memory(const ExperimentConfig& cfg, std::size_t N, std::size_t n) {
    if (cfg.memory_limit_mb <= 0) return;
    const MemoryMode mode = cfg.solver == SolverMode::Streaming ? MemoryMode::Reduced : MemoryMode::Matrix;
    const auto est = estimate_memory(N, n, mode);
    const double limit = cfg.memory_limit_mb * 1024.0 * 1024.0;
    if (static_cast<double>(est.bytes) > limit)
        throw MemoryLimitError(std::string(to_string(cfg.solver)) + " solver needs " + std::to_string(est.bytes) +
                               " bytes, limit is " + std::to_string(static_cast<std::uint64_t>(limit)));
}

inline ScenarioReport run_scenario(const ExperimentConfig& cfg, const ScenarioConfig& sc, const Dataset& est,
                                   const Dataset& val) {
    const auto t0 = std::chrono::steady_clock::now();
    ScenarioReport r;
    r.name = sc.name;
    r.include_offset = sc.include_offset;
    r.memory = sc.memory;
    r.solver_mode = to_string(cfg.solver);
    r.tuning_method = to_string(cfg.method);
    try {
        const VolterraStructure s = sc.structure();
        r.n_theta = s.n_theta();
        const Vector& u = est.u;
        const Vector& Y = est.y;
        const std::size_t N = est.size();

        HyperParameters base;
        base.order1.kind = cfg.kernel;
        const Matrix K = build_observation_matrix(u, s);

        std::optional<TransientSpec> tspec;
        if (cfg.transient) {
            const KernelPrior1d prior{cfg.transient_kernel, 1.0, 0.9, 0.5};
            JointTuningOptions jo;
            jo.tuning = cfg.tuning;
            if (cfg.transient_candidates.size() == 1) {
                const auto t = tune_joint(cfg.method, s, K, u, Y, base, {cfg.transient_candidates.front(), prior}, jo);
                r.hp = t.hp;
                r.tuning_objective = t.objective;
                tspec = t.transient;
            } else {
                TransientSelectionOptions so;
                so.method = cfg.transient_selection;
                so.tuning = jo;
                so.band = cfg.transient_band;
                const auto sel = select_transient_order(cfg.transient_candidates, s, K, u, Y, base, prior, so);
                const auto& c = sel.candidates[sel.chosen_index];
                r.hp = c.hp;
                tspec = c.spec;
                r.transient_warning = sel.warning;
            }
            r.n_tr = tspec->n_tr;
            r.transient_prior = tspec->prior;
        } else {
            const auto ml = tune_marginal_likelihood(s, K, u, Y, base, cfg.tuning);
            r.hp = ml.hp;
            r.tuning_objective = ml.objective;
            if (cfg.method == TuningMethod::ResidualAnalysis) {
                TuningOptions ro = cfg.tuning;
                ro.search.x0.reset();
                const auto ra = tune_residual_analysis(s, K, u, Y, ml.hp, ro);
                r.hp = ra.hp;
                r.tuning_objective = ra.objective;
            }
        }

        const std::size_t n_total = s.n_theta() + r.n_tr;
        r.memory_matrix = estimate_memory(N, n_total, MemoryMode::Matrix);
        r.memory_reduced = estimate_memory(N, n_total, MemoryMode::Reduced);
        check_memory(cfg, N, n_total);

        const PenaltyMatrix D = build_assembled_penalty(s, r.hp);
        switch (cfg.solver) {
            case SolverMode::Exact:
                if (tspec) {
                    const auto sol = solve_joint(assemble_joint(K, D, *tspec, r.hp.noise_var), Y);
                    r.theta = sol.theta;
                    r.theta_tr = sol.theta_tr;
                } else {
                    r.theta = solve_exact(K, Y, D);
                }
                break;
            case SolverMode::Gradient:
                if (tspec) {
                    const auto j = assemble_joint(K, D, *tspec, r.hp.noise_var);
                    auto res = solve_gradient(j.K, Y, j.D, cfg.solver_options);
                    r.theta = res.theta.head(static_cast<Eigen::Index>(s.n_theta()));
                    r.theta_tr = res.theta.tail(static_cast<Eigen::Index>(r.n_tr));
                    r.trace = std::move(res.trace);
                } else {
                    auto res = solve_gradient(K, Y, D, cfg.solver_options);
                    r.theta = std::move(res.theta);
                    r.trace = std::move(res.trace);
                }
                break;
            case SolverMode::Streaming: {
                if (tspec) throw std::invalid_argument("streaming solver does not support a transient block");
                MemoryMeter meter;
                auto res = solve_streaming(u, Y, s, PenaltyRowProvider(s, r.hp), cfg.solver_options, &meter);
                r.theta = std::move(res.theta);
                r.trace = std::move(res.trace);
                r.streaming_peak_bytes = meter.peak_bytes();
                break;
            }
        }

        Vector E = Y - K * r.theta;
        if (r.n_tr) E -= transient_output(r.theta_tr, N);
        const std::size_t L = cfg.tuning.max_lag ? cfg.tuning.max_lag : default_max_lag(N);
        r.residuals = residual_analysis(E, u, L, cfg.tuning.level);

        Vector y_mod = simulate_output(val.u, r.model());
        std::size_t skip = cfg.validation_skip;
        if (cfg.validation_transient) {
            r.theta_tr_validation = fit_transient(val.y - y_mod, *tspec, r.hp.noise_var);
            y_mod += transient_output(r.theta_tr_validation, val.size());
            skip = 0;
        }
        if (skip >= val.size())
            throw std::invalid_argument("validation_skip leaves no validation samples");
        const auto nv = static_cast<Eigen::Index>(val.size() - skip);
        r.e_rms = rms_index(y_mod.tail(nv), val.y.tail(nv));
        r.validation_samples = static_cast<std::size_t>(nv);
        r.ok = true;
    } catch (const std::exception& e) {
        r.ok = false;
        r.error = e.what();
    }
    r.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return r;
}

}  // namespace detail

/// Runs every scenario on the configured datasets. Dataset problems throw;
/// failures inside a scenario are recorded in its report.
inline ExperimentReport run_experiment(const ExperimentConfig& cfg) {
    cfg.validate();
    const Dataset est = detail::load_dataset(cfg.estimation_path, cfg.sample_period, "estimation");
    const Dataset val = detail::load_dataset(cfg.validation_path, cfg.sample_period, "validation");
    ExperimentReport rep;
    rep.config_hash = cfg.config_hash;
    if (cfg.parallel) {
        std::vector<std::future<ScenarioReport>> jobs;
        for (const auto& sc : cfg.scenarios)
            jobs.push_back(std::async(std::launch::async, [&, sc] { return detail::run_scenario(cfg, sc, est, val); }));
        for (auto& j : jobs) rep.scenarios.push_back(j.get());
    } else {
        for (const auto& sc : cfg.scenarios) rep.scenarios.push_back(detail::run_scenario(cfg, sc, est, val));
    }
    return rep;
}

// ---------------------------------------------------------------------------
// Serialization

class ReportError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

namespace detail {

using ptree = boost::property_tree::ptree;

inline std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline std::string join(const Vector& v) {
    std::string out;
    for (Eigen::Index i = 0; i < v.size(); ++i) {
        if (i) out += ' ';
        out += fmt(v[i]);
    }
    return out;
}

inline std::string join(const std::vector<std::size_t>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) out += ' ';
        out += std::to_string(v[i]);
    }
    return out;
}

inline Vector split_vector(const std::string& s) {
    std::istringstream in(s);
    std::vector<double> v;
    std::string tok;
    while (in >> tok) {
        std::size_t used = 0;
        v.push_back(std::stod(tok, &used));
        if (used != tok.size()) throw ReportError("report: bad number '" + tok + "'");
    }
    return Eigen::Map<Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
}

inline std::vector<std::size_t> split_sizes(const std::string& s) {
    std::istringstream in(s);
    std::vector<std::size_t> v;
    std::size_t x;
    while (in >> x) v.push_back(x);
    if (!in.eof()) throw ReportError("report: bad integer list '" + s + "'");
    return v;
}

inline void put(ptree& t, const std::string& key, const std::string& value) {
    t.put(ptree::path_type(key, '\0'), value);
}
inline void put(ptree& t, const std::string& key, double value) { put(t, key, fmt(value)); }
inline void put(ptree& t, const std::string& key, std::size_t value) { put(t, key, std::to_string(value)); }
inline void put(ptree& t, const std::string& key, bool value) { put(t, key, std::string(value ? "true" : "false")); }

inline const std::string& need(const ptree& t, const std::string& section, const std::string& key) {
    const auto v = t.get_child_optional(ptree::path_type(key, '\0'));
    if (!v) throw ReportError("report: [" + section + "] lacks '" + key + "'");
    return v->data();
}

inline void put_prior(ptree& t, const std::string& prefix, const KernelPrior1d& p) {
    put(t, prefix + ".kind", std::string(to_string(p.kind)));
    put(t, prefix + ".c", p.c);
    put(t, prefix + ".alpha", p.alpha);
    put(t, prefix + ".rho", p.rho);
}

inline KernelPrior1d get_prior(const ptree& t, const std::string& sec, const std::string& prefix) {
    return {kernel_kind_from_string(need(t, sec, prefix + ".kind")), std::stod(need(t, sec, prefix + ".c")),
            std::stod(need(t, sec, prefix + ".alpha")), std::stod(need(t, sec, prefix + ".rho"))};
}

inline void put_dir(ptree& t, const std::string& prefix, const DirectionPrior& d) {
    put(t, prefix + ".rho", d.rho);
    put(t, prefix + ".alpha", d.alpha);
}

inline DirectionPrior get_dir(const ptree& t, const std::string& sec, const std::string& prefix) {
    return {std::stod(need(t, sec, prefix + ".rho")), std::stod(need(t, sec, prefix + ".alpha"))};
}

}  // namespace detail

/// One key-value section per scenario plus an [experiment] header.
inline std::string report_to_string(const ExperimentReport& rep) {
    using namespace detail;
    ptree root;
    ptree head;
    put(head, "config_hash", rep.config_hash);
    std::string list;
    for (const auto& s : rep.scenarios) list += (list.empty() ? "" : " ") + s.name;
    put(head, "scenarios", list);
    root.push_back({"experiment", head});
    for (const auto& s : rep.scenarios) {
        ptree t;
        put(t, "status", std::string(s.ok ? "ok" : "failed"));
        put(t, "error", s.error);
        put(t, "offset", s.include_offset);
        put(t, "memory", join(s.memory));
        put(t, "n_theta", s.n_theta);
        put(t, "wall_time_s", s.wall_time_s);
        if (s.ok) {
            put(t, "tuning.method", s.tuning_method);
            put(t, "tuning.objective", s.tuning_objective);
            put(t, "hp.p0_var", s.hp.p0_var);
            put_prior(t, "hp.order1", s.hp.order1);
            put(t, "hp.order2.c", s.hp.order2.c);
            put_dir(t, "hp.order2.u", s.hp.order2.u);
            put_dir(t, "hp.order2.v", s.hp.order2.v);
            put(t, "hp.order3.c", s.hp.order3.c);
            put_dir(t, "hp.order3.v", s.hp.order3.v);
            put_dir(t, "hp.order3.u", s.hp.order3.u);
            put_dir(t, "hp.order3.q", s.hp.order3.q);
            put(t, "hp.noise_var", s.hp.noise_var);
            put(t, "transient.n_tr", s.n_tr);
            put_prior(t, "transient.prior", s.transient_prior);
            put(t, "transient.warning", s.transient_warning);
            put(t, "theta", join(s.theta));
            put(t, "theta_tr", join(s.theta_tr));
            put(t, "theta_tr_validation", join(s.theta_tr_validation));
            put(t, "residual.max_lag", s.residuals.max_lag);
            put(t, "residual.variance", s.residuals.residual_variance);
            put(t, "residual.whiteness_pass", s.residuals.whiteness_pass);
            put(t, "residual.independence_pass", s.residuals.independence_pass);
            put(t, "residual.auto_exceed", s.residuals.auto_exceed);
            put(t, "residual.auto_budget", s.residuals.auto_budget);
            put(t, "residual.cross_exceed", s.residuals.cross_exceed);
            put(t, "residual.cross_budget", s.residuals.cross_budget);
            put(t, "validation.e_rms", s.e_rms);
            put(t, "validation.samples", s.validation_samples);
            put(t, "solver.mode", s.solver_mode);
            put(t, "solver.iterations", s.trace.iterations);
            put(t, "solver.warm_start_iterations", s.trace.warm_start_iterations);
            put(t, "solver.termination", std::string(to_string(s.trace.reason)));
            put(t, "solver.final_cost", s.trace.final_cost());
            put(t, "memory.matrix_values", static_cast<std::size_t>(s.memory_matrix.values));
            put(t, "memory.matrix_bytes", static_cast<std::size_t>(s.memory_matrix.bytes));
            put(t, "memory.reduced_values", static_cast<std::size_t>(s.memory_reduced.values));
            put(t, "memory.reduced_bytes", static_cast<std::size_t>(s.memory_reduced.bytes));
            put(t, "memory.streaming_peak_bytes", s.streaming_peak_bytes);
        }
        root.push_back({"scenario." + s.name, t});
    }
    std::ostringstream out;
    boost::property_tree::write_ini(out, root);
    return out.str();
}

inline ExperimentReport report_from_string(const std::string& text) {
    using namespace detail;
    ptree root;
    std::istringstream in(text);
    try {
        boost::property_tree::read_ini(in, root);
    } catch (const boost::property_tree::ini_parser_error& e) {
        throw ReportError("report: " + e.message());
    }
    const auto head = root.get_child_optional(ptree::path_type("experiment", '\0'));
    if (!head) throw ReportError("report: missing [experiment] section");
    ExperimentReport rep;
    rep.config_hash = need(*head, "experiment", "config_hash");
    std::istringstream names(need(*head, "experiment", "scenarios"));
    std::string name;
    try {
        while (names >> name) {
            const std::string sec = "scenario." + name;
            const auto t = root.get_child_optional(ptree::path_type(sec, '\0'));
            if (!t) throw ReportError("report: missing [" + sec + "]");
            ScenarioReport s;
            s.name = name;
            s.ok = need(*t, sec, "status") == "ok";
            s.error = need(*t, sec, "error");
            s.include_offset = need(*t, sec, "offset") == "true";
            s.memory = split_sizes(need(*t, sec, "memory"));
            s.n_theta = std::stoull(need(*t, sec, "n_theta"));
            s.wall_time_s = std::stod(need(*t, sec, "wall_time_s"));
            if (s.ok) {
                s.tuning_method = need(*t, sec, "tuning.method");
                s.tuning_objective = std::stod(need(*t, sec, "tuning.objective"));
                s.hp.p0_var = std::stod(need(*t, sec, "hp.p0_var"));
                s.hp.order1 = get_prior(*t, sec, "hp.order1");
                s.hp.order2.c = std::stod(need(*t, sec, "hp.order2.c"));
                s.hp.order2.u = get_dir(*t, sec, "hp.order2.u");
                s.hp.order2.v = get_dir(*t, sec, "hp.order2.v");
                s.hp.order3.c = std::stod(need(*t, sec, "hp.order3.c"));
                s.hp.order3.v = get_dir(*t, sec, "hp.order3.v");
                s.hp.order3.u = get_dir(*t, sec, "hp.order3.u");
                s.hp.order3.q = get_dir(*t, sec, "hp.order3.q");
                s.hp.noise_var = std::stod(need(*t, sec, "hp.noise_var"));
                s.n_tr = std::stoull(need(*t, sec, "transient.n_tr"));
                s.transient_prior = get_prior(*t, sec, "transient.prior");
                s.transient_warning = need(*t, sec, "transient.warning") == "true";
                s.theta = split_vector(need(*t, sec, "theta"));
                s.theta_tr = split_vector(need(*t, sec, "theta_tr"));
                s.theta_tr_validation = split_vector(need(*t, sec, "theta_tr_validation"));
                s.residuals.max_lag = std::stoull(need(*t, sec, "residual.max_lag"));
                s.residuals.residual_variance = std::stod(need(*t, sec, "residual.variance"));
                s.residuals.whiteness_pass = need(*t, sec, "residual.whiteness_pass") == "true";
                s.residuals.independence_pass = need(*t, sec, "residual.independence_pass") == "true";
                s.residuals.auto_exceed = std::stoull(need(*t, sec, "residual.auto_exceed"));
                s.residuals.auto_budget = std::stoull(need(*t, sec, "residual.auto_budget"));
                s.residuals.cross_exceed = std::stoull(need(*t, sec, "residual.cross_exceed"));
                s.residuals.cross_budget = std::stoull(need(*t, sec, "residual.cross_budget"));
                s.e_rms = std::stod(need(*t, sec, "validation.e_rms"));
                s.validation_samples = std::stoull(need(*t, sec, "validation.samples"));
                s.solver_mode = need(*t, sec, "solver.mode");
                s.trace.iterations = std::stoull(need(*t, sec, "solver.iterations"));
                s.trace.warm_start_iterations = std::stoull(need(*t, sec, "solver.warm_start_iterations"));
                s.memory_matrix = {std::stoull(need(*t, sec, "memory.matrix_values")),
                                   std::stoull(need(*t, sec, "memory.matrix_bytes"))};
                s.memory_reduced = {std::stoull(need(*t, sec, "memory.reduced_values")),
                                    std::stoull(need(*t, sec, "memory.reduced_bytes"))};
                s.streaming_peak_bytes = std::stoull(need(*t, sec, "memory.streaming_peak_bytes"));
                if (static_cast<std::size_t>(s.theta.size()) != s.model().structure.n_theta())
                    throw ReportError("report: [" + sec + "] theta length does not match its structure");
            }
            rep.scenarios.push_back(std::move(s));
        }
    } catch (const std::logic_error& e) {
        throw ReportError("report: bad value (" + std::string(e.what()) + ")");
    }
    return rep;
}

inline void write_report(const std::string& path, const ExperimentReport& rep) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write report '" + path + "'");
    out << report_to_string(rep);
    if (!out) throw std::runtime_error("write failed for '" + path + "'");
}

inline ExperimentReport read_report(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ReportError("cannot open report '" + path + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    return report_from_string(buf.str());
}

// ---------------------------------------------------------------------------
// Kernel slices

/// Writes one kernel of `model` as CSV. Order 0: `value`; order 1: `lag,value`;
/// order 2: the full n×n grid `tau1,tau2,value`; order 3: `tau1,tau2,tau3,value`
/// planes for each τ3 in `tau3` (all lags when empty).
inline void export_kernel_slices(const VolterraModel& model, std::size_t order, std::ostream& out,
                                 const std::vector<std::size_t>& tau3 = {}) {
    const auto& s = model.structure;
    if (!s.has_order(order))
        throw std::invalid_argument("export_kernel_slices: order " + std::to_string(order) + " not in model");
    if (order > 3) throw std::invalid_argument("export_kernel_slices: orders above 3 have no slice layout");
    out.precision(17);
    const std::size_t o = s.block_offset(order);
    if (order == 0) {
        out << "value\n" << model.theta[0] << '\n';
        return;
    }
    const std::size_t n = s.memory(order);
    if (order == 1) {
        out << "lag,value\n";
        for (std::size_t k = 0; k < n; ++k) out << k << ',' << model.theta[static_cast<Eigen::Index>(o + k)] << '\n';
        return;
    }
    std::map<std::vector<std::size_t>, std::size_t> index;
    for (std::size_t k = 0; k < s.block_size(order); ++k) {
        const auto l = s.lags(order, k);
        index.emplace(std::vector<std::size_t>(l.begin(), l.end()), o + k);
    }
    const auto value = [&](std::vector<std::size_t> lags) {
        std::sort(lags.begin(), lags.end());
        return model.theta[static_cast<Eigen::Index>(index.at(lags))];
    };
    if (order == 2) {
        out << "tau1,tau2,value\n";
        for (std::size_t a = 0; a < n; ++a)
            for (std::size_t b = 0; b < n; ++b) out << a << ',' << b << ',' << value({a, b}) << '\n';
        return;
    }
    std::vector<std::size_t> planes = tau3;
    if (planes.empty())
        for (std::size_t c = 0; c < n; ++c) planes.push_back(c);
    for (auto c : planes)
        if (c >= n) throw std::invalid_argument("export_kernel_slices: tau3 plane outside the kernel memory");
    out << "tau1,tau2,tau3,value\n";
    for (auto c : planes)
        for (std::size_t a = 0; a < n; ++a)
            for (std::size_t b = 0; b < n; ++b) out << a << ',' << b << ',' << c << ',' << value({a, b, c}) << '\n';
}

inline void export_kernel_slices(const VolterraModel& model, std::size_t order, const std::string& path,
                                 const std::vector<std::size_t>& tau3 = {}) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write kernel slice '" + path + "'");
    export_kernel_slices(model, order, out, tau3);
    if (!out) throw std::runtime_error("write failed for '" + path + "'");
}

/// Reads an order-1 `lag,value` export back into a coefficient vector.
inline Vector import_order1_slice(std::istream& in) {
    std::string line;
    if (!std::getline(in, line) || detail::trim(line) != "lag,value")
        throw std::runtime_error("order-1 slice: expected header 'lag,value'");
    std::vector<double> v;
    while (std::getline(in, line)) {
        line = detail::trim(line);
        if (line.empty()) continue;
        const auto comma = line.find(',');
        if (comma == std::string::npos) throw std::runtime_error("order-1 slice: expected 'lag,value' rows");
        if (std::stoull(line.substr(0, comma)) != v.size()) throw std::runtime_error("order-1 slice: lags out of order");
        v.push_back(std::stod(line.substr(comma + 1)));
    }
    return Eigen::Map<Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
}

inline Vector import_order1_slice(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open kernel slice '" + path + "'");
    return import_order1_slice(in);
}

/// Report plus per-scenario CSV artifacts (kernel slices, residual
/// correlations, transient, solver trace) under `dir`. Returns written paths.
inline std::vector<std::string> write_experiment_artifacts(const std::string& dir, const ExperimentReport& rep) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw std::runtime_error("cannot create output directory '" + dir + "': " + ec.message());
    std::vector<std::string> written;
    const auto path = [&](const std::string& name) { return (fs::path(dir) / name).string(); };
    written.push_back(path("report.ini"));
    write_report(written.back(), rep);
    for (const auto& s : rep.scenarios) {
        if (!s.ok) continue;
        const auto model = s.model();
        for (std::size_t m = 1; m <= model.structure.max_degree(); ++m) {
            written.push_back(path(s.name + "_h" + std::to_string(m) + ".csv"));
            export_kernel_slices(model, m, written.back());
        }
        if (!s.residuals.autocorr.empty()) {
            written.push_back(path(s.name + "_residuals.csv"));
            write_residual_csv(written.back(), s.residuals);
        }
        if (s.theta_tr.size()) {
            written.push_back(path(s.name + "_transient.csv"));
            write_transient_csv(written.back(), s.theta_tr);
        }
        if (s.solver_mode != "exact") {
            written.push_back(path(s.name + "_trace.csv"));
            write_trace_csv(written.back(), s.trace);
        }
    }
    return written;
}

}  // namespace volterra
