#include "support/oracles.hpp"
#include "volterra/transient.hpp"

#include <catch_amalgamated.hpp>

#include <random>

using namespace volterra;
using Catch::Approx;

namespace {

HyperParameters fir_hp(double c, double alpha, double s2) {
    HyperParameters hp;
    hp.order1 = {KernelKind::TC, c, alpha, 0.0};
    hp.noise_var = s2;
    return hp;
}

// LTI record whose first samples carry the response to a long constant
// pre-history input.
struct TransientData {
    Vector u, y, y_clean, transient;
};

TransientData transient_data(std::size_t N, double level, double noise_sd, std::mt19937_64& rng) {
    const Vector pre = Vector::Constant(400, level);
    const Vector u = oracle::randn(N, rng);
    const auto rec = oracle::lti_record(pre, u);
    return {u, rec.y + oracle::randn(N, rng, noise_sd), rec.y - rec.transient, rec.transient};
}

}  // namespace

TEST_CASE("transient regressor") {
    const Matrix K = build_transient_regressor(3, 2);
    CHECK(K == (Matrix(3, 2) << 1, 0, 0, 1, 0, 0).finished());
    CHECK(build_transient_regressor(4, 4) == Matrix::Identity(4, 4));
    const Vector th = (Vector(2) << 2.0, -1.0).finished();
    CHECK(build_transient_regressor(5, 2) * th == transient_output(th, 5));
    CHECK_THROWS_AS(build_transient_regressor(2, 3), std::invalid_argument);
}

TEST_CASE("joint system layout") {
    std::mt19937_64 rng(1);
    const VolterraStructure s(true, {6});
    const Matrix K = build_observation_matrix(oracle::randn(30, rng), s);
    const auto hp = fir_hp(1.0, 0.8, 0.1);
    const auto D = build_assembled_penalty(s, hp);
    const TransientSpec spec{12, {KernelKind::DC, 2.0, 0.9, 0.6}};
    const auto j = assemble_joint(K, D, spec, hp.noise_var);
    CHECK(j.K.cols() == Eigen::Index(s.n_theta() + 12));
    CHECK(j.K.leftCols(7) == K);
    CHECK(j.K.rightCols(12) == build_transient_regressor(30, 12));
    const Matrix Dj = j.D.dense_D();
    CHECK(Dj.topRightCorner(7, 12).isZero(0.0));
    CHECK(Dj.bottomLeftCorner(12, 7).isZero(0.0));
    CHECK(oracle::rel_err(Dj.topLeftCorner(7, 7), D.dense_D()) == 0.0);
    const Matrix Ptr = oracle::dc_kernel(2.0, 0.9, 0.6, 12);
    CHECK(oracle::rel_err(Dj.bottomRightCorner(12, 12) * Ptr, hp.noise_var * Matrix::Identity(12, 12)) <= 1e-8);
}

TEST_CASE("joint solve equals the augmented exact solve") {
    std::mt19937_64 rng(2);
    const VolterraStructure s = VolterraStructure::fir(8);
    const Vector u = oracle::randn(40, rng);
    const Matrix K = build_observation_matrix(u, s);
    const Vector Y = oracle::randn(40, rng);
    const auto hp = fir_hp(1.0, 0.8, 0.2);
    const auto D = build_assembled_penalty(s, hp);
    const TransientSpec spec{10, {KernelKind::TC, 1.0, 0.85, 0.0}};
    const auto j = assemble_joint(K, D, spec, hp.noise_var);
    const auto sol = solve_joint(j, Y);
    const Vector all = solve_exact(j.K, Y, j.D);
    CHECK(sol.theta == all.head(8));
    CHECK(sol.theta_tr == all.tail(10));

    SECTION("empty transient block is the plain solve") {
        const auto j0 = assemble_joint(K, D, TransientSpec{0, spec.prior}, hp.noise_var);
        const auto s0 = solve_joint(j0, Y);
        CHECK(s0.theta == solve_exact(K, Y, D));
        CHECK(s0.theta_tr.size() == 0);
    }
    SECTION("heavy transient penalty shrinks the transient") {
        TransientSpec tiny = spec;
        double prev = sol.theta_tr.norm();
        for (double scale : {1e-2, 1e-4, 1e-6}) {
            tiny.prior.c = spec.prior.c * scale;
            const double n = solve_joint(assemble_joint(K, D, tiny, hp.noise_var), Y).theta_tr.norm();
            CHECK(n < prev);
            prev = n;
        }
        CHECK(prev < 1e-3 * sol.theta_tr.norm());
    }
}

TEST_CASE("pure transient is recovered under a weak penalty") {
    const std::size_t N = 80;
    Vector Y = Vector::Zero(N);
    for (std::size_t t = 0; t < 40; ++t) Y[Eigen::Index(t)] = 3.0 * std::pow(0.9, double(t));
    const VolterraStructure s = VolterraStructure::fir(5);
    const Matrix K = build_observation_matrix(Vector::Zero(N), s);
    const auto D = build_assembled_penalty(s, fir_hp(1.0, 0.8, 1e-6));
    const TransientSpec spec{50, {KernelKind::DC, 10.0, 0.95, 0.9}};
    const auto sol = solve_joint(assemble_joint(K, D, spec, 1e-6), Y);
    CHECK(oracle::rel_err(sol.theta_tr, Y.head(50)) <= 0.1);
}

TEST_CASE("transient-free data gives a small transient") {
    std::vector<double> ratios;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        std::mt19937_64 rng(100 + seed);
        const std::size_t N = 300, n = 40, n_tr = 30;
        const Vector u = oracle::randn(N, rng);
        const auto rec = oracle::lti_record(Vector(0), u);
        const Vector y = rec.y + oracle::randn(N, rng, 0.02);
        const VolterraStructure s = VolterraStructure::fir(n);
        const Matrix K = build_observation_matrix(u, s);
        HyperParameters base;
        base.order1.kind = KernelKind::TC;
        JointTuningOptions o;
        o.tuning.search.n_starts = 1;
        o.tuning.search.seed = seed;
        const auto tuned = tune_joint_marginal_likelihood(s, K, u, y, base, {n_tr, {}}, o);
        const auto sol = solve_joint(assemble_joint(K, build_assembled_penalty(s, tuned.hp), tuned.transient,
                                                    tuned.hp.noise_var), y);
        ratios.push_back(sol.theta_tr.norm() / (sol.theta.norm() * std::sqrt(double(n_tr) / double(n))));
    }
    CHECK(oracle::median(ratios) <= 0.1);
}

TEST_CASE("joint estimation removes a large initial-condition transient") {
    int wins = 0;
    std::vector<double> head, tail;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        std::mt19937_64 rng(200 + seed);
        const std::size_t N = 200, n = 50;
        const auto d = transient_data(N, 4.0, 0.02, rng);
        REQUIRE(d.transient.squaredNorm() >= 0.25 * d.y_clean.squaredNorm());
        const VolterraStructure s = VolterraStructure::fir(n);
        const Matrix K = build_observation_matrix(d.u, s);
        HyperParameters base;
        base.order1.kind = KernelKind::TC;
        TuningOptions to;
        to.search.seed = seed;
        const auto plain_hp = tune_marginal_likelihood(s, K, d.u, d.y, base, to).hp;
        const Vector plain = solve_exact(K, d.y, build_assembled_penalty(s, plain_hp));
        JointTuningOptions jo;
        jo.tuning.search.seed = seed;
        const auto tuned = tune_joint(TuningMethod::MarginalLikelihood, s, K, d.u, d.y, base, {60, {}}, jo);
        const auto sol = solve_joint(
            assemble_joint(K, build_assembled_penalty(s, tuned.hp), tuned.transient, tuned.hp.noise_var), d.y);

        std::mt19937_64 vr(900 + seed);
        const Vector uv = oracle::randn(300, vr);
        const Vector yv = oracle::lti_record(Vector(0), uv).y;
        const Matrix Kv = build_observation_matrix(uv, s);
        const double e_plain = std::sqrt((Kv * plain - yv).squaredNorm() / 300.0);
        const double e_joint = std::sqrt((Kv * sol.theta - yv).squaredNorm() / 300.0);
        if (e_joint < e_plain) ++wins;
        head.push_back(sol.theta_tr.head(15).cwiseAbs().mean());
        tail.push_back(sol.theta_tr.tail(15).cwiseAbs().mean());
    }
    CHECK(wins >= 9);
    int decays = 0;
    for (std::size_t i = 0; i < head.size(); ++i) decays += tail[i] < head[i];
    CHECK(decays >= 9);
}

TEST_CASE("transient order selection") {
    SECTION("rule picks the smallest equivalent candidate") {
        std::mt19937_64 rng(3);
        const std::size_t N = 200;
        const VolterraStructure s = VolterraStructure::fir(10);
        const Vector u = oracle::randn(N, rng);
        const Matrix K = build_observation_matrix(u, s);
        const Vector y = K * oracle::lti_impulse(10) + oracle::randn(N, rng, 0.05);
        TransientSelectionOptions o;
        o.method = TuningMethod::MarginalLikelihood;
        o.tuning.tuning.search.n_starts = 1;
        o.band = 1e9;
        const auto sel = select_transient_order({30, 10, 20}, s, K, u, y, fir_hp(0.1, 0.8, 0.0025),
                                                {KernelKind::DC, 1.0, 0.9, 0.5}, o);
        REQUIRE(sel.candidates.size() == 3);
        if (!sel.warning) CHECK(sel.chosen == 10);
    }
    SECTION("empty candidate list") {
        const VolterraStructure s = VolterraStructure::fir(2);
        CHECK_THROWS_AS(select_transient_order({}, s, Matrix::Zero(5, 2), Vector::Zero(5), Vector::Zero(5), {}, {}),
                        std::invalid_argument);
    }
    SECTION("a transient lasting about 60 samples is not cut at 20") {
        int ok = 0;
        const int seeds = 10;
        for (int seed = 0; seed < seeds; ++seed) {
            std::mt19937_64 rng(300 + seed);
            const std::size_t N = 250;
            const auto d = transient_data(N, 4.0, 0.02, rng);
            const VolterraStructure s = VolterraStructure::fir(40);
            const Matrix K = build_observation_matrix(d.u, s);
            HyperParameters base;
            base.order1.kind = KernelKind::TC;
            TransientSelectionOptions o;
            o.tuning.tuning.search.n_starts = 1;
            o.tuning.tuning.search.seed = std::uint64_t(seed);
            const auto sel = select_transient_order({20, 60, 120}, s, K, d.u, d.y, base, {KernelKind::DC, 1.0, 0.9, 0.5}, o);
            ok += sel.chosen != 20;
        }
        CHECK(ok >= 9);
    }
}
