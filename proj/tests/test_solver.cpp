#include <cmath>
#include <vector>

#include "bns/field.hpp"
#include "bns/nsparams.hpp"
#include "bns/scheduler.hpp"
#include "bns/solver.hpp"
#include "json.hpp"
#include "doctest.h"

using namespace bns;

namespace {

FieldPtr exponential_field() {
    // dx/dt = x, exact solution x0 * e^t.
    return make_callback_field(
        1,
        [](double, std::span<const double> x, std::span<double> out) { out[0] = x[0]; },
        [](double, std::span<const double> x, FieldJet& jet) {
            jet.u[0] = x[0];
            jet.du_dt[0] = 0.0;
            jet.du_dx[0] = 1.0;
        });
}

FieldPtr polynomial_time_field(int degree) {
    // dx/dt = t^degree, exact solution x0 + t^(degree+1)/(degree+1).
    return make_callback_field(1, [degree](double t, std::span<const double>,
                                            std::span<double> out) {
        out[0] = std::pow(t, degree);
    });
}

double final_error_exp(const SolveTrace& trace) {
    return std::abs(trace.final_state()[0] - std::exp(1.0));
}

double fit_slope(const std::vector<double>& ns, const std::vector<double>& errs) {
    // Least-squares slope of log2(err) against log2(1/n).
    const int k = static_cast<int>(ns.size());
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (int i = 0; i < k; ++i) {
        const double x = -std::log2(ns[i]);
        const double y = std::log2(errs[i]);
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
    }
    return (k * sxy - sx * sy) / (k * sxx - sx * sx);
}

}  // namespace

TEST_CASE("time grid validation") {
    CHECK_THROWS_AS(TimeGrid(Vec{0.0}), ConfigError);
    CHECK_THROWS_AS(TimeGrid(Vec{0.0, 0.5, 0.4, 1.0}), ConfigError);
    CHECK_THROWS_AS(TimeGrid(Vec{0.0, 0.5, 0.9}), ConfigError);  // endpoint != 1
    CHECK_THROWS_AS(TimeGrid(Vec{0.1, 0.5, 1.0}), ConfigError);  // endpoint != 0
    CHECK_THROWS_AS(TimeGrid(Vec{0.0, 0.5, 0.5, 1.0}), ConfigError);
    CHECK_NOTHROW(TimeGrid(Vec{0.0, 0.5, 0.5, 1.0}, GridRule::NonDecreasing));
    CHECK_NOTHROW(TimeGrid(Vec{0.1, 0.5, 0.9}, GridRule::Strict));
    const TimeGrid g = TimeGrid::uniform(4);
    CHECK(g.intervals() == 4);
    CHECK(g.points() == 5);
    for (int i = 0; i <= 4; ++i) CHECK(g[i] == doctest::Approx(0.25 * i).epsilon(1e-15));
    CHECK(grid_is_uniform(g));
    CHECK_FALSE(grid_is_uniform(TimeGrid(Vec{0.0, 0.1, 1.0}, GridRule::Strict)));
    const TimeGrid r = TimeGrid::uniform_range(2, 0.2, 0.8);
    CHECK(r[0] == doctest::Approx(0.2));
    CHECK(r[2] == doctest::Approx(0.8));
}

TEST_CASE("butcher tableaus and multistep coefficients validate") {
    CHECK_NOTHROW(ButcherTableau::euler().validate());
    CHECK_NOTHROW(ButcherTableau::midpoint().validate());
    CHECK_NOTHROW(ButcherTableau::rk4().validate());
    ButcherTableau bad = ButcherTableau::midpoint();
    bad.b = {1.0};
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = ButcherTableau::midpoint();
    bad.b = {0.25, 0.25};
    CHECK_THROWS_AS(bad.validate(), ConfigError);  // weights must sum to 1

    const MultistepCoeffs ab2 = MultistepCoeffs::ab(2);
    CHECK(ab2.m == 2);
    CHECK(ab2.b[0] == doctest::Approx(-0.5).epsilon(1e-15));
    CHECK(ab2.b[1] == doctest::Approx(1.5).epsilon(1e-15));
    CHECK(ab2.a[0] == doctest::Approx(0.0));
    CHECK(ab2.a[1] == doctest::Approx(1.0));
    CHECK_THROWS_AS(MultistepCoeffs::ab(5), ConfigError);
}

TEST_CASE("interval weights reproduce classic multistep coefficients on uniform grids") {
    const double h = 0.125;
    for (int m = 1; m <= 4; ++m) {
        Vec hist(m);
        for (int j = 0; j < m; ++j) hist[j] = h * j;
        const double t_lo = h * (m - 1);
        const Vec w = multistep_interval_weights(hist, t_lo, t_lo + h);
        const MultistepCoeffs classic = MultistepCoeffs::ab(m);
        REQUIRE(static_cast<int>(w.size()) == m);
        for (int j = 0; j < m; ++j)
            CHECK(w[j] == doctest::Approx(classic.b[j]).epsilon(1e-12));
    }
    CHECK_THROWS_AS(multistep_interval_weights(Vec{0.0, 0.0}, 0.0, 0.1), ConfigError);
    CHECK_THROWS_AS(multistep_interval_weights(Vec{0.0, 0.1}, 0.2, 0.2), ConfigError);
}

TEST_CASE("polynomial exactness of the stepping rules") {
    const Vec x0 = {0.5};
    const TimeGrid grid(Vec{0.0, 0.21, 0.48, 0.77, 1.0}, GridRule::StrictUnit);
    // Euler is exact for constant velocity.
    const FieldPtr c0 = polynomial_time_field(0);
    CHECK(solve_rk(*c0, x0, grid, ButcherTableau::euler()).final_state()[0] ==
          doctest::Approx(1.5).epsilon(1e-14));
    // Midpoint integrates velocities linear in t exactly.
    const FieldPtr c1 = polynomial_time_field(1);
    CHECK(solve_rk(*c1, x0, grid, ButcherTableau::midpoint()).final_state()[0] ==
          doctest::Approx(1.0).epsilon(1e-14));
    // Classic RK4 integrates cubics in t exactly.
    const FieldPtr c3 = polynomial_time_field(3);
    CHECK(solve_rk(*c3, x0, grid, ButcherTableau::rk4()).final_state()[0] ==
          doctest::Approx(0.75).epsilon(1e-14));
    // Two-step Adams-Bashforth with polynomial interval weights is exact for
    // linear velocities on an irregular grid too.
    const TimeGrid rough(Vec{0.0, 0.07, 0.31, 0.4, 0.86, 1.0}, GridRule::StrictUnit);
    CHECK(solve_multistep(*c1, x0, rough, MultistepCoeffs::ab(2)).final_state()[0] ==
          doctest::Approx(1.0).epsilon(1e-13));
}

TEST_CASE("convergence orders on the exponential growth field") {
    const FieldPtr u = exponential_field();
    const Vec x0 = {1.0};
    const std::vector<double> ns = {8, 16, 32, 64};

    struct Row {
        const char* name;
        double expect;
        std::function<SolveTrace(int)> run;
    };
    const std::vector<Row> rows = {
        {"euler", 1.0,
         [&](int n) { return solve_rk(*u, x0, TimeGrid::uniform(n), ButcherTableau::euler()); }},
        {"midpoint", 2.0,
         [&](int n) {
             return solve_rk(*u, x0, TimeGrid::uniform(n), ButcherTableau::midpoint());
         }},
        {"ab2", 2.0,
         [&](int n) {
             return solve_multistep(*u, x0, TimeGrid::uniform(n), MultistepCoeffs::ab(2));
         }},
        {"rk4", 4.0,
         [&](int n) { return solve_rk(*u, x0, TimeGrid::uniform(n), ButcherTableau::rk4()); }},
    };
    for (const Row& row : rows) {
        std::vector<double> errs;
        for (double n : ns) errs.push_back(final_error_exp(row.run(static_cast<int>(n))));
        const double slope = fit_slope(ns, errs);
        INFO(row.name);
        CHECK(slope == doctest::Approx(row.expect).epsilon(0.2 / row.expect));
    }
}

TEST_CASE("field evaluation counts per method") {
    const FieldPtr u = make_gmm_field(GaussianMixture::single({0.4, -0.2}, 0.5),
                                      Scheduler::ot());
    const Vec x0 = {0.1, 0.3};
    const int k = 6;
    const TimeGrid grid = TimeGrid::uniform(k);

    u->reset_nfe();
    SolveTrace t1 = solve_rk(*u, x0, grid, ButcherTableau::euler());
    CHECK(t1.nfe == k);
    CHECK(u->nfe() == static_cast<std::uint64_t>(k));

    u->reset_nfe();
    SolveTrace t2 = solve_rk(*u, x0, grid, ButcherTableau::midpoint());
    CHECK(t2.nfe == 2 * k);
    CHECK(u->nfe() == static_cast<std::uint64_t>(2 * k));

    u->reset_nfe();
    SolveTrace t4 = solve_rk(*u, x0, grid, ButcherTableau::rk4());
    CHECK(t4.nfe == 4 * k);

    // AB2: one RK4 bootstrap interval (4 evaluations, the first doubling as
    // history) plus one evaluation per remaining interval.
    u->reset_nfe();
    SolveTrace ta = solve_multistep(*u, x0, grid, MultistepCoeffs::ab(2));
    CHECK(ta.nfe == k + 3);
    CHECK(u->nfe() == static_cast<std::uint64_t>(k + 3));

    // Knot bookkeeping: one state per grid point.
    CHECK(static_cast<int>(t1.states.size()) == grid.points());
    CHECK(static_cast<int>(ta.states.size()) == grid.points());
    CHECK(t1.times.front() == doctest::Approx(0.0));
    CHECK(t1.times.back() == doctest::Approx(1.0));
}

TEST_CASE("adaptive reference solver") {
    const FieldPtr u = exponential_field();
    const AdaptiveResult res = solve_adaptive_rk45(*u, Vec{1.0}, 1e-10, 1e-10, 0.0, 1.0);
    CHECK(res.x[0] == doctest::Approx(std::exp(1.0)).epsilon(1e-9));
    CHECK(res.accepted > 0);
    CHECK(res.nfe > 0);

    // Against a dense fixed-step run on the mixture oracle.
    const FieldPtr gmm = make_gmm_field(GaussianMixture::single({1.2, -0.8}, 0.35),
                                        Scheduler::vp());
    const Vec x0 = {0.9, 0.2};
    const double t_end = 1.0 - 1e-6;
    const AdaptiveResult a = solve_adaptive_rk45(*gmm, x0, 1e-10, 1e-10, 0.0, t_end);
    const TimeGrid dense = TimeGrid::uniform_range(10000, 0.0, t_end);
    const SolveTrace ref = solve_rk(*gmm, x0, dense, ButcherTableau::rk4());
    for (std::size_t c = 0; c < x0.size(); ++c)
        CHECK(a.x[c] == doctest::Approx(ref.final_state()[c]).epsilon(1e-6));

    // Step-budget exhaustion reports stiffness.
    CHECK_THROWS_AS(solve_adaptive_rk45(*gmm, x0, 1e-12, 1e-12, 0.0, t_end, 3),
                    StiffnessError);
    // State blow-up reports divergence: dx/dt = 100x from x0 = 1e10 crosses
    // the norm limit with ordinary accepted steps.
    const FieldPtr grow = make_callback_field(
        1, [](double, std::span<const double> x, std::span<double> out) {
            out[0] = 100.0 * x[0];
        });
    CHECK_THROWS_AS(solve_adaptive_rk45(*grow, Vec{1e10}, 1e-8, 1e-8, 0.0, 1.0),
                    DivergenceError);
}

TEST_CASE("solve trace serializes nfe, times and state norms") {
    const FieldPtr u = exponential_field();
    const SolveTrace trace =
        solve_rk(*u, Vec{1.0}, TimeGrid::uniform(2), ButcherTableau::euler());
    const nlohmann::json j = nlohmann::json::parse(trace.to_json());
    REQUIRE(j.contains("nfe"));
    REQUIRE(j.contains("times"));
    REQUIRE(j.contains("norms"));
    CHECK(j["nfe"].get<long long>() == trace.nfe);
    REQUIRE(j["times"].size() == trace.times.size());
    REQUIRE(j["norms"].size() == trace.states.size());
    for (std::size_t i = 0; i < trace.states.size(); ++i) {
        double norm2 = 0.0;
        for (double v : trace.states[i]) norm2 += v * v;
        CHECK(j["norms"][i].get<double>() == doctest::Approx(std::sqrt(norm2)).epsilon(1e-15));
    }
}

TEST_CASE("non-stationary solve reports divergence with context") {
    // An aggressive hand-built rule on the quadratic blow-up field.
    const FieldPtr quad = make_callback_field(
        1, [](double, std::span<const double> x, std::span<double> out) {
            out[0] = x[0] * x[0];
        });
    NSSolverParams theta = embed_generic(EmbedMethod::euler(), 8);
    for (auto& step : theta.steps)
        for (double& w : step.b) w *= 1e8;
    try {
        solve_ns(theta, *quad, Vec{10.0});
        FAIL("expected divergence");
    } catch (const DivergenceError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("step") != std::string::npos);
        CHECK(msg.find("theta") != std::string::npos);
    }
}
