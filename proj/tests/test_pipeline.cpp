#include "support/oracles.hpp"
#include "support/tempdir.hpp"
#include "volterra/pipeline.hpp"

#include <catch_amalgamated.hpp>

#include <fstream>
#include <random>
#include <regex>
#include <sstream>

using namespace volterra;
using testing_support::TempDir;

namespace {

const char* kBaseConfig = R"([data]
estimation = est.csv
validation = val.csv
sample_period = 1
validation_skip = 30

[structure.fir]
offset = false
memory = 30

[tuning]
n_starts = 2
seed = 3
)";

// Linear FIR system with white input; returns (estimation, validation).
std::pair<Dataset, Dataset> linear_data(std::size_t N, double noise_sd, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    const Vector g = oracle::lti_impulse(30);
    const VolterraModel m(VolterraStructure::fir(30), g);
    const Vector u = oracle::randn(N, rng), uv = oracle::randn(N, rng);
    return {Dataset(u, simulate_output(u, m) + oracle::randn(N, rng, noise_sd), 1.0),
            Dataset(uv, simulate_output(uv, m) + oracle::randn(N, rng, noise_sd), 1.0)};
}

ExperimentConfig config_in(const TempDir& dir, const std::string& text, const std::vector<std::string>& sets = {}) {
    Config c = Config::from_string(text);
    c.set("data", "estimation", dir / "est.csv");
    c.set("data", "validation", dir / "val.csv");
    for (const auto& s : sets) c.set(s);
    return experiment_from_config(c);
}

std::string without_wall_time(const std::string& report) {
    return std::regex_replace(report, std::regex("wall_time_s=[^\n]*\n"), "");
}

}  // namespace

TEST_CASE("config parsing and overrides") {
    const Config c = Config::from_string(kBaseConfig);
    CHECK(c.get_double("data", "sample_period", 9) == 1.0);
    CHECK(c.get_size("tuning", "max_evals", 77) == 77);
    CHECK(c.get_sizes("structure.fir", "memory", {}) == std::vector<std::size_t>{30});

    Config o = c;
    o.set("tuning.max_evals=12");
    o.set("structure.fir.memory = 10, 5");
    o.set("structure.deg2.offset=true");
    CHECK(o.get_size("tuning", "max_evals", 77) == 12);
    CHECK(o.get_sizes("structure.fir", "memory", {}) == std::vector<std::size_t>{10, 5});
    CHECK(o.sections_with_prefix("structure.") == std::vector<std::string>{"structure.fir", "structure.deg2"});
    CHECK(o.hash() != c.hash());
    CHECK(Config::from_string(kBaseConfig).hash() == c.hash());

    CHECK_THROWS_AS(o.set("tuning.bogus=1"), ConfigError);
    CHECK_THROWS_AS(o.set("nosection=1"), ConfigError);
    CHECK_THROWS_AS(o.set("extra.key=1"), ConfigError);
    CHECK_THROWS_AS(Config::from_string("[tuning]\nspeed = 3\n"), ConfigError);
    CHECK_THROWS_AS(Config::from_string("[tuning]\nn_starts = three\n").get_size("tuning", "n_starts", 1), ConfigError);
    CHECK_THROWS_AS(Config::from_string("[tuning]\nn_starts = -2\n").get_size("tuning", "n_starts", 1), ConfigError);
    CHECK_THROWS_AS(Config::from_string("[data]\nparallel = maybe\n").get_bool("data", "parallel", false), ConfigError);
}

TEST_CASE("experiment config mapping") {
    TempDir dir;
    const auto e = config_in(dir, kBaseConfig, {"solver.mode=gradient", "transient.enabled=true", "transient.candidates=15"});
    CHECK(e.scenarios.size() == 1);
    CHECK(e.scenarios[0].name == "fir");
    CHECK_FALSE(e.scenarios[0].include_offset);
    CHECK(e.solver == SolverMode::Gradient);
    CHECK(e.tuning.search.n_starts == 2);
    CHECK(e.tuning.search.seed == 3);
    CHECK(e.transient);
    CHECK(e.transient_candidates == std::vector<std::size_t>{15});
    CHECK(e.sample_period == 1.0);

    CHECK_THROWS_AS(experiment_from_config(Config::from_string("[data]\nestimation = x\n")), ConfigError);
    CHECK_THROWS_AS(config_in(dir, kBaseConfig, {"solver.mode=fast"}), ConfigError);
    CHECK_THROWS_AS(config_in(dir, kBaseConfig, {"tuning.method=guess"}), ConfigError);
    CHECK_THROWS_AS(config_in(dir, kBaseConfig, {"data.validation_transient=true"}), ConfigError);
    CHECK_THROWS_AS(config_in(dir, kBaseConfig, {"solver.decimation=2"}), ConfigError);
}

TEST_CASE("FIR scenario on linear data validates near the noise level") {
    TempDir dir;
    const double sd = 0.1;
    const auto [est, val] = linear_data(400, sd, 1);
    write_dataset_csv(dir / "est.csv", est);
    write_dataset_csv(dir / "val.csv", val);
    const auto rep = run_experiment(config_in(dir, kBaseConfig));
    REQUIRE(rep.scenarios.size() == 1);
    const auto& s = rep.scenarios[0];
    REQUIRE(s.ok);
    CHECK(s.e_rms <= 2 * sd);
    CHECK(s.validation_samples == 370);
    CHECK(s.memory_reduced.values <= s.memory_matrix.values);
    CHECK(s.memory_matrix.values == estimate_memory(400, 30, MemoryMode::Matrix).values);
    CHECK(s.residuals.max_lag == 50);
}

TEST_CASE("reports are reproducible and round-trip") {
    TempDir dir;
    const auto [est, val] = linear_data(200, 0.1, 2);
    write_dataset_csv(dir / "est.csv", est);
    write_dataset_csv(dir / "val.csv", val);
    const std::string text = std::string(kBaseConfig) + "\n[structure.deg2]\noffset = true\nmemory = 8 4\n";
    const auto cfg = config_in(dir, text);
    const auto a = run_experiment(cfg);
    const auto b = run_experiment(cfg);
    CHECK(without_wall_time(report_to_string(a)) == without_wall_time(report_to_string(b)));
    CHECK(a.config_hash == cfg.config_hash);

    const auto back = report_from_string(report_to_string(a));
    REQUIRE(back.scenarios.size() == 2);
    for (std::size_t i = 0; i < 2; ++i) {
        const auto& x = a.scenarios[i];
        const auto& y = back.scenarios[i];
        CHECK(y.name == x.name);
        CHECK(y.theta == x.theta);
        CHECK(y.e_rms == x.e_rms);
        CHECK(y.hp.order1.alpha == x.hp.order1.alpha);
        CHECK(y.hp.order2.u.rho == x.hp.order2.u.rho);
        CHECK(y.hp.noise_var == x.hp.noise_var);
        CHECK(y.memory == x.memory);
        CHECK(y.memory_matrix.bytes == x.memory_matrix.bytes);
        CHECK(y.model().structure == x.model().structure);
    }
    CHECK_THROWS_AS(report_from_string("[scenario.x]\nstatus=ok\n"), ReportError);
    CHECK_THROWS_AS(report_from_string("[experiment]\nconfig_hash=1\nscenarios=x\n"), ReportError);
    CHECK_THROWS_AS(read_report(dir / "missing.ini"), ReportError);

    SECTION("parallel scenarios give the same numbers") {
        auto par = cfg;
        par.parallel = true;
        CHECK(without_wall_time(report_to_string(run_experiment(par))) == without_wall_time(report_to_string(a)));
    }
}

TEST_CASE("scenario failures are isolated") {
    TempDir dir;
    const auto [est, val] = linear_data(300, 0.1, 3);
    write_dataset_csv(dir / "est.csv", est);
    write_dataset_csv(dir / "val.csv", val);
    const std::string text = std::string(kBaseConfig) + "\n[structure.big]\noffset = false\nmemory = 120\n";
    // 0.5 MB admits the 30-lag FIR in matrix mode but not the 120-lag one.
    const auto rep = run_experiment(config_in(dir, text, {"solver.memory_limit_mb=0.5"}));
    REQUIRE(rep.scenarios.size() == 2);
    CHECK(rep.scenarios[0].ok);
    CHECK_FALSE(rep.scenarios[1].ok);
    CHECK(rep.scenarios[1].error.find("limit") != std::string::npos);
    CHECK_FALSE(rep.all_ok());
    const auto back = report_from_string(report_to_string(rep));
    CHECK_FALSE(back.scenarios[1].ok);
    CHECK(back.scenarios[1].error == rep.scenarios[1].error);

    SECTION("streaming fits where matrix mode does not") {
        const auto s = run_experiment(config_in(dir, text, {"solver.memory_limit_mb=0.5", "solver.mode=streaming"}));
        REQUIRE(s.scenarios[1].ok);
        const auto& big = s.scenarios[1];
        CHECK(big.streaming_peak_bytes > 0);
        CHECK(big.streaming_peak_bytes <= big.memory_reduced.bytes);
        CHECK(big.streaming_peak_bytes <= std::size_t(0.5 * 1024 * 1024));
    }
    SECTION("missing dataset throws") {
        auto cfg = config_in(dir, text);
        cfg.estimation_path = dir / "nope.csv";
        CHECK_THROWS(run_experiment(cfg));
    }
}

TEST_CASE("iterative solvers agree with the exact path") {
    TempDir dir;
    const auto [est, val] = linear_data(300, 0.1, 4);
    write_dataset_csv(dir / "est.csv", est);
    write_dataset_csv(dir / "val.csv", val);
    const auto exact = run_experiment(config_in(dir, kBaseConfig)).scenarios[0];
    for (const char* mode : {"gradient", "streaming"}) {
        const auto it = run_experiment(config_in(dir, kBaseConfig, {std::string("solver.mode=") + mode})).scenarios[0];
        REQUIRE(it.ok);
        CHECK(oracle::rel_err(it.theta, exact.theta) <= 1e-3);
        CHECK(it.trace.iterations > 0);
        CHECK(it.hp.order1.alpha == exact.hp.order1.alpha);
    }
}

TEST_CASE("transient removal on transient-laden data") {
    int wins = 0;
    const int seeds = 5;
    for (int seed = 0; seed < seeds; ++seed) {
        TempDir dir;
        std::mt19937_64 rng(40 + seed);
        const std::size_t N = 200;
        const Vector u = oracle::randn(N, rng);
        const auto rec = oracle::lti_record(Vector::Constant(400, 4.0), u);
        write_dataset_csv(dir / "est.csv", Dataset(u, rec.y + oracle::randn(N, rng, 0.02), 1.0));
        const Vector uv = oracle::randn(300, rng);
        write_dataset_csv(dir / "val.csv", Dataset(uv, oracle::lti_record(Vector(0), uv).y, 1.0));
        const std::string text = "[data]\nvalidation_skip = 50\nsample_period = 1\n[structure.fir]\nmemory = 50\n"
                                 "[tuning]\nmethod = ml\nseed = " + std::to_string(seed) + "\n";
        const auto off = run_experiment(config_in(dir, text)).scenarios[0];
        const auto on = run_experiment(config_in(dir, text, {"transient.enabled=true", "transient.candidates=60"})).scenarios[0];
        REQUIRE(off.ok);
        REQUIRE(on.ok);
        CHECK(on.n_tr == 60);
        CHECK(on.theta_tr.size() == 60);
        wins += on.e_rms < off.e_rms;
    }
    CHECK(wins == seeds);
}

TEST_CASE("validation transient mode") {
    TempDir dir;
    std::mt19937_64 rng(9);
    const std::size_t N = 200;
    const auto pre = Vector::Constant(400, 4.0);
    const Vector u = oracle::randn(N, rng), uv = oracle::randn(N, rng);
    write_dataset_csv(dir / "est.csv", Dataset(u, oracle::lti_record(pre, u).y, 1.0));
    write_dataset_csv(dir / "val.csv", Dataset(uv, oracle::lti_record(pre, uv).y, 1.0));
    const std::string text = "[data]\nsample_period = 1\n[structure.fir]\nmemory = 50\n[transient]\nenabled = true\n"
                             "candidates = 60\n";
    const auto plain = run_experiment(config_in(dir, text, {"data.validation_skip=0"})).scenarios[0];
    const auto fitted = run_experiment(config_in(dir, text, {"data.validation_transient=true"})).scenarios[0];
    REQUIRE(fitted.ok);
    CHECK(fitted.validation_samples == N);
    CHECK(fitted.theta_tr_validation.size() == 60);
    CHECK(fitted.e_rms < plain.e_rms);
}

TEST_CASE("kernel slice export") {
    std::mt19937_64 rng(5);
    const VolterraStructure s(true, {6, 4, 3});
    const VolterraModel m(s, oracle::randn(s.n_theta(), rng));

    std::stringstream o1;
    export_kernel_slices(m, 1, o1);
    const Vector back = import_order1_slice(o1);
    CHECK(back == m.theta.segment(1, 6));

    std::stringstream o2;
    export_kernel_slices(m, 2, o2);
    std::string line;
    std::getline(o2, line);
    CHECK(line == "tau1,tau2,value");
    std::map<std::pair<int, int>, double> grid;
    while (std::getline(o2, line)) {
        int a, b;
        double v;
        char c1, c2;
        std::istringstream in(line);
        in >> a >> c1 >> b >> c2 >> v;
        grid[{a, b}] = v;
    }
    CHECK(grid.size() == 16);
    for (const auto& [k, v] : grid) CHECK(v == grid.at({k.second, k.first}));
    CHECK(grid.at({0, 0}) == m.theta[7]);
    CHECK(grid.at({1, 0}) == m.theta[8]);

    std::stringstream o3;
    export_kernel_slices(m, 3, o3, {0, 2});
    std::size_t rows = 0;
    std::getline(o3, line);
    CHECK(line == "tau1,tau2,tau3,value");
    while (std::getline(o3, line)) ++rows;
    CHECK(rows == 2 * 9);

    std::stringstream o0;
    export_kernel_slices(m, 0, o0);
    CHECK(o0.str().rfind("value\n", 0) == 0);

    std::stringstream sink;
    CHECK_THROWS_AS(export_kernel_slices(VolterraModel(VolterraStructure::fir(3), Vector::Zero(3)), 2, sink),
                    std::invalid_argument);
    CHECK_THROWS_AS(export_kernel_slices(VolterraModel(VolterraStructure::fir(3), Vector::Zero(3)), 0, sink),
                    std::invalid_argument);
    CHECK_THROWS_AS(export_kernel_slices(m, 3, sink, {3}), std::invalid_argument);
    std::stringstream bad("lag,value\n1,2\n");
    CHECK_THROWS(import_order1_slice(bad));
}

TEST_CASE("artifacts are written per scenario") {
    TempDir dir;
    const auto [est, val] = linear_data(200, 0.1, 6);
    write_dataset_csv(dir / "est.csv", est);
    write_dataset_csv(dir / "val.csv", val);
    const std::string text = std::string(kBaseConfig) + "\n[structure.deg2]\noffset = true\nmemory = 8 4\n";
    const auto cfg = config_in(dir, text, {"solver.mode=gradient"});
    const auto files = write_experiment_artifacts(dir / "out", run_experiment(cfg));
    for (const char* name : {"report.ini", "fir_h1.csv", "fir_residuals.csv", "fir_trace.csv", "deg2_h1.csv",
                             "deg2_h2.csv", "deg2_trace.csv"})
        CHECK(std::find(files.begin(), files.end(), dir / (std::string("out/") + name)) != files.end());
    for (const auto& f : files) CHECK(std::filesystem::exists(f));
    CHECK(read_report(dir / "out/report.ini").scenarios.size() == 2);
}
