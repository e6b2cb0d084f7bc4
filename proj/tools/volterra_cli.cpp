// volterra_cli: generate tanks data, estimate Volterra models, validate and
// inspect reports. Exit codes: 0 success, 1 partial scenario failure or empty
// report, 2 usage/config/IO error.

#include "volterra/volterra.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <limits>
#include <optional>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace volterra;

namespace {

constexpr int kOk = 0;
constexpr int kPartial = 1;
constexpr int kUsage = 2;

struct Common {
    std::string config;
    std::vector<std::string> sets;
    std::string out;
    std::optional<std::uint64_t> seed;
};

Config load_config(const Common& c) {
    Config cfg = Config::load(c.config);
    for (const auto& s : c.sets) cfg.set(s);
    return cfg;
}

TankRecordSpec record_spec(const Config& c) {
    TankRecordSpec r;
    auto& p = r.tanks;
    p.k1 = c.get_double("sim", "k1", p.k1);
    p.k2 = c.get_double("sim", "k2", p.k2);
    p.k3 = c.get_double("sim", "k3", p.k3);
    p.k4 = c.get_double("sim", "k4", p.k4);
    p.x1_max = c.get_double("sim", "x1_max", p.x1_max);
    p.x2_max = c.get_double("sim", "x2_max", p.x2_max);
    p.overflow_fraction = c.get_double("sim", "overflow_fraction", p.overflow_fraction);
    p.substeps = c.get_size("sim", "substeps", p.substeps);
    p.process_noise1 = c.get_double("sim", "process_noise1", p.process_noise1);
    p.process_noise2 = c.get_double("sim", "process_noise2", p.process_noise2);
    auto& e = r.excitation;
    e.N = c.get_size("sim", "N", e.N);
    e.fs = c.get_double("sim", "fs", e.fs);
    e.f_min = c.get_double("sim", "f_min", e.f_min);
    e.f_max = c.get_double("sim", "f_max", e.f_max);
    e.std = c.get_double("sim", "std", e.std);
    e.offset = c.get_double("sim", "offset", e.offset);
    // An explicit output noise std takes the place of the SNR rule.
    if (c.has("sim", "output_noise")) {
        p.output_noise = c.get_double("sim", "output_noise", 0.0);
        r.snr_db = std::numeric_limits<double>::infinity();
    } else {
        r.snr_db = c.get_double("sim", "snr_db", r.snr_db);
    }
    r.start_at_rest = c.get_bool("sim", "start_at_rest", r.start_at_rest);
    try {
        p.validate();
        e.validate();
    } catch (const std::invalid_argument& ex) {
        throw ConfigError(std::string("config: [sim] ") + ex.what());
    }
    return r;
}

int cmd_generate(const Common& c) {
    Config cfg = load_config(c);
    if (!cfg.has_section("sim")) throw ConfigError("config: missing [sim] section");
    if (c.seed) {
        cfg.set("sim", "seed", std::to_string(*c.seed));
        if (!cfg.has("sim", "validation_seed")) cfg.set("sim", "validation_seed", std::to_string(*c.seed + 1));
    }
    const TankRecordSpec spec = record_spec(cfg);
    const std::uint64_t seed = cfg.get_u64("sim", "seed", 1);
    const std::uint64_t vseed = cfg.get_u64("sim", "validation_seed", seed + 1);
    if (vseed == seed) throw ConfigError("config: sim.validation_seed must differ from sim.seed");
    const std::string dir = c.out.empty() ? cfg.get_string("sim", "output_dir", ".") : c.out;
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw std::runtime_error("cannot create output directory '" + dir + "': " + ec.message());

    const auto est = generate_tank_record(spec, seed);
    const auto val = generate_tank_record(spec, vseed);
    const std::string est_path = (fs::path(dir) / cfg.get_string("sim", "estimation_file", "estimation.csv")).string();
    const std::string val_path = (fs::path(dir) / cfg.get_string("sim", "validation_file", "validation.csv")).string();
    write_dataset_csv(est_path, est.data);
    write_dataset_csv(val_path, val.data);
    std::cout << est_path << '\n' << val_path << '\n';
    if (cfg.get_bool("sim", "states", false)) {
        const std::string es = (fs::path(dir) / "estimation_states.csv").string();
        const std::string vs = (fs::path(dir) / "validation_states.csv").string();
        write_states_csv(es, est.sim);
        write_states_csv(vs, val.sim);
        std::cout << es << '\n' << vs << '\n';
    }
    const std::string side = (fs::path(dir) / "generation.ini").string();
    std::ofstream out(side);
    out << cfg.to_string();
    out << "\n[generated]\nestimation_overflow_samples=" << est.sim.overflow_samples()
        << "\nvalidation_overflow_samples=" << val.sim.overflow_samples() << "\nestimation_noise_std=" << est.noise_std
        << "\nvalidation_noise_std=" << val.noise_std << '\n';
    if (!out) throw std::runtime_error("cannot write '" + side + "'");
    std::cout << side << '\n';
    return kOk;
}

std::string degree_label(const ScenarioReport& s) {
    if (!s.include_offset && s.memory.size() == 1) return "FIR";
    return std::to_string(s.memory.size());
}

std::string join_sizes(const std::vector<std::size_t>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "/" : "") + std::to_string(v[i]);
    return out.empty() ? "-" : out;
}

void print_table(const ExperimentReport& rep, bool csv) {
    if (csv) {
        std::cout << "scenario,degree,offset,memory,n_theta,n_tr,e_rms,status,wall_time_s\n";
        for (const auto& s : rep.scenarios) {
            std::cout << s.name << ',' << degree_label(s) << ',' << (s.include_offset ? 1 : 0) << ','
                      << join_sizes(s.memory) << ',' << s.n_theta << ',' << s.n_tr << ',';
            if (s.ok)
                std::cout << std::setprecision(10) << s.e_rms;
            std::cout << ',' << (s.ok ? "ok" : "failed") << ',' << std::setprecision(4) << s.wall_time_s << '\n';
        }
        return;
    }
    std::cout << "config " << rep.config_hash << '\n';
    std::cout << std::left << std::setw(14) << "scenario" << std::setw(8) << "degree" << std::setw(10) << "memory"
              << std::right << std::setw(9) << "n_theta" << std::setw(6) << "n_tr" << std::setw(12) << "e_RMSt"
              << std::setw(11) << "time [s]" << "  status\n";
    for (const auto& s : rep.scenarios) {
        std::cout << std::left << std::setw(14) << s.name << std::setw(8) << degree_label(s) << std::setw(10)
                  << join_sizes(s.memory) << std::right << std::setw(9) << s.n_theta << std::setw(6) << s.n_tr;
        if (s.ok)
            std::cout << std::setw(12) << std::fixed << std::setprecision(4) << s.e_rms;
        else
            std::cout << std::setw(12) << "-";
        std::cout << std::setw(11) << std::fixed << std::setprecision(2) << s.wall_time_s << std::defaultfloat << "  "
                  << (s.ok ? "ok" : "failed: " + s.error) << '\n';
    }
}

int cmd_estimate(const Common& c, const std::string& solver) {
    Config cfg = load_config(c);
    if (!solver.empty()) cfg.set("solver", "mode", solver);
    if (c.seed) cfg.set("tuning", "seed", std::to_string(*c.seed));
    if (!c.out.empty()) cfg.set("data", "output_dir", c.out);
    const ExperimentConfig exp = experiment_from_config(cfg);
    const ExperimentReport rep = run_experiment(exp);
    for (const auto& p : write_experiment_artifacts(exp.output_dir, rep)) std::cout << p << '\n';
    print_table(rep, false);
    return rep.all_ok() ? kOk : kPartial;
}

int cmd_inspect(const std::string& path, bool csv) {
    const ExperimentReport rep = read_report(path);
    if (rep.scenarios.empty()) {
        std::cerr << "report '" << path << "' contains no scenarios\n";
        return kPartial;
    }
    print_table(rep, csv);
    return kOk;
}

int cmd_validate(const std::string& report, const std::string& data, double ts, std::size_t skip, bool csv) {
    const ExperimentReport rep = read_report(report);
    if (rep.scenarios.empty()) {
        std::cerr << "report '" << report << "' contains no scenarios\n";
        return kPartial;
    }
    const Dataset val = read_dataset_csv(data, ts);
    if (skip >= val.size()) throw ConfigError("--skip leaves no validation samples");
    const auto nv = static_cast<Eigen::Index>(val.size() - skip);
    ExperimentReport out = rep;
    for (auto& s : out.scenarios) {
        if (!s.ok) continue;
        const Vector y = simulate_output(val.u, s.model());
        s.e_rms = rms_index(y.tail(nv), val.y.tail(nv));
        s.validation_samples = static_cast<std::size_t>(nv);
    }
    print_table(out, csv);
    return out.all_ok() ? kOk : kPartial;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Regularized Volterra series identification"};
    app.require_subcommand(1);

    Common gen_opts, est_opts;
    auto add_common = [](CLI::App* sub, Common& c) {
        sub->add_option("-c,--config", c.config, "INI configuration file")->required();
        sub->add_option("--set", c.sets, "override a config key: section.key=value");
        sub->add_option("-o,--out", c.out, "output directory");
        sub->add_option("--seed", c.seed, "random seed");
    };
    auto* gen = app.add_subcommand("generate", "simulate estimation and validation records from [sim]");
    add_common(gen, gen_opts);

    auto* est = app.add_subcommand("estimate", "tune, estimate and validate every scenario");
    add_common(est, est_opts);
    std::string solver;
    est->add_option("--solver", solver, "solver mode")->check(CLI::IsMember({"exact", "gradient", "streaming"}));

    std::string report, data;
    bool csv = false;
    double ts = 4.0;
    std::size_t skip = 100;
    auto* val = app.add_subcommand("validate", "recompute e_RMSt of a report's models on another record");
    val->add_option("-r,--report", report, "report file")->required();
    val->add_option("-d,--data", data, "u,y CSV")->required();
    val->add_option("--sample-period", ts, "sample period of the record");
    val->add_option("--skip", skip, "leading samples excluded from the index");
    val->add_flag("--csv", csv, "machine-readable output");

    auto* ins = app.add_subcommand("inspect", "summarize a report");
    ins->add_option("report", report, "report file")->required();
    ins->add_flag("--csv", csv, "machine-readable output");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kUsage;
    }

    try {
        if (*gen) return cmd_generate(gen_opts);
        if (*est) return cmd_estimate(est_opts, solver);
        if (*val) return cmd_validate(report, data, ts, skip, csv);
        if (*ins) return cmd_inspect(report, csv);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kUsage;
    }
    return kUsage;
}
