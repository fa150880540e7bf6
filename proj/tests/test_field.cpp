#include <cmath>
#include <vector>

#include "bns/field.hpp"
#include "bns/scheduler.hpp"
#include "bns/solver.hpp"
#include "doctest.h"

using namespace bns;

namespace {

// Quadrature reference for the mixture posterior, built from the definition
// alone: for each component and coordinate, integrate the product
// N(x_c; alpha*y, sigma^2) * N(y; mu, s^2) over y with Simpson's rule in long
// double. The product-Gaussian moments locate the integration window; mass
// outside +-40 posterior widths is below 1e-300.
struct Moments {
    long double mass;
    long double mean;
};

Moments gaussian_product_moments(long double x, long double alpha, long double sigma,
                                 long double mu, long double s) {
    const long double lam = 1.0L / (s * s) + alpha * alpha / (sigma * sigma);
    const long double center = (mu / (s * s) + alpha * x / (sigma * sigma)) / lam;
    const long double width = 40.0L / std::sqrt(lam);
    const int steps = 40000;  // even
    const long double lo = center - width;
    const long double h = 2.0L * width / steps;
    const long double inv2s2 = 1.0L / (2.0L * s * s);
    const long double inv2sig2 = 1.0L / (2.0L * sigma * sigma);
    // Drop the constant normalizers; they cancel in the posterior mean and
    // scale the mass identically across components of equal (sigma, s).
    const long double norm =
        1.0L / (2.0L * std::acos(-1.0L) * s * sigma);
    long double mass = 0.0L;
    long double first = 0.0L;
    for (int i = 0; i <= steps; ++i) {
        const long double y = lo + h * i;
        const long double e1 = (x - alpha * y) * (x - alpha * y) * inv2sig2;
        const long double e2 = (y - mu) * (y - mu) * inv2s2;
        const long double f = std::exp(-(e1 + e2));
        const long double w = (i == 0 || i == steps) ? 1.0L : (i % 2 ? 4.0L : 2.0L);
        mass += w * f;
        first += w * f * y;
    }
    mass *= h / 3.0L * norm;
    first *= h / 3.0L * norm;
    return {mass, first / mass};
}

Vec quadrature_velocity(const GaussianMixture& gmm, const Scheduler& sched, double t,
                        const Vec& x) {
    const SchedulerEval e = sched.eval(t);
    const int d = static_cast<int>(x.size());
    const int K = gmm.components();
    std::vector<long double> comp_mass(K, 1.0L);
    std::vector<std::vector<long double>> comp_mean(K, std::vector<long double>(d));
    for (int k = 0; k < K; ++k) {
        for (int c = 0; c < d; ++c) {
            const Moments m = gaussian_product_moments(
                x[c], e.alpha, e.sigma, gmm.means[k][c], gmm.stds[k]);
            comp_mass[k] *= m.mass;
            comp_mean[k][c] = m.mean;
        }
        comp_mass[k] *= static_cast<long double>(gmm.weights[k]);
    }
    long double total = 0.0L;
    for (int k = 0; k < K; ++k) total += comp_mass[k];
    Vec u(x.size());
    const double ratio = e.dsigma / e.sigma;
    const double gain = e.dalpha - e.alpha * ratio;
    for (int c = 0; c < d; ++c) {
        long double post = 0.0L;
        for (int k = 0; k < K; ++k) post += comp_mass[k] * comp_mean[k][c];
        post /= total;
        u[c] = ratio * x[c] + gain * static_cast<double>(post);
    }
    return u;
}

GaussianMixture two_component_gmm() {
    GaussianMixture gmm;
    gmm.means = {{1.2, -0.8}, {-0.5, 0.9}};
    gmm.stds = {0.35, 0.5};
    gmm.weights = {0.4, 0.6};
    return gmm;
}

}  // namespace

TEST_CASE("gmm marginal velocity matches the quadrature reference") {
    const GaussianMixture gmm = two_component_gmm();
    for (const Scheduler& sched : {Scheduler::ot(), Scheduler::vp()}) {
        const FieldPtr u = make_gmm_field(gmm, sched);
        for (double t : {0.1, 0.35, 0.6, 0.9}) {
            for (const Vec& x : {Vec{0.0, 0.0}, Vec{1.0, -1.0}, Vec{-0.4, 0.7}}) {
                const Vec got = u->eval_vec(t, x);
                const Vec ref = quadrature_velocity(gmm, sched, t, x);
                for (std::size_t c = 0; c < x.size(); ++c)
                    CHECK(got[c] ==
                          doctest::Approx(ref[c]).epsilon(1e-8).scale(std::abs(ref[c]) + 1.0));
            }
        }
    }
}

TEST_CASE("single-gaussian posterior closed form") {
    // Conjugate posterior: E[x1 | x_t] = mu + (alpha s^2 / (alpha^2 s^2 + sigma^2))(x - alpha mu).
    const Vec mu = {1.2, -0.8};
    const double s = 0.35;
    const FieldPtr u = make_gmm_field(GaussianMixture::single(mu, s), Scheduler::ot());
    const Scheduler sched = Scheduler::ot();
    for (double t : {0.15, 0.5, 0.85}) {
        const SchedulerEval e = sched.eval(t);
        const Vec x = {0.3, 0.4};
        const double gamma2 = e.alpha * e.alpha * s * s + e.sigma * e.sigma;
        const double ratio = e.dsigma / e.sigma;
        const double gain = e.dalpha - e.alpha * ratio;
        const Vec got = u->eval_vec(t, x);
        for (std::size_t c = 0; c < x.size(); ++c) {
            const double post =
                mu[c] + e.alpha * s * s / gamma2 * (x[c] - e.alpha * mu[c]);
            const double ref = ratio * x[c] + gain * post;
            CHECK(got[c] == doctest::Approx(ref).epsilon(1e-12));
        }
    }
}

TEST_CASE("delta data pulls trajectories straight toward the target") {
    const Vec target = {0.7, -0.2};
    const FieldPtr u =
        make_gmm_field(GaussianMixture::single(target, 0.0), Scheduler::ot());
    for (double t : {0.2, 0.5, 0.8}) {
        const Vec x = {0.1, -0.4};
        const Vec got = u->eval_vec(t, x);
        for (std::size_t c = 0; c < x.size(); ++c)
            CHECK(got[c] == doctest::Approx((target[c] - x[c]) / (1.0 - t)).epsilon(1e-12));
    }
}

TEST_CASE("standard-gaussian data on the linear path has the known velocity") {
    const FieldPtr u =
        make_gmm_field(GaussianMixture::single({0.0, 0.0}, 1.0), Scheduler::ot());
    for (double t : {0.25, 0.5, 0.75}) {
        const Vec x = {0.6, -1.3};
        const Vec got = u->eval_vec(t, x);
        const double factor = (2.0 * t - 1.0) / (t * t + (1.0 - t) * (1.0 - t));
        for (std::size_t c = 0; c < x.size(); ++c)
            CHECK(got[c] == doctest::Approx(x[c] * factor).epsilon(1e-12));
    }
    CHECK(u->eval_vec(0.5, Vec{1.0, 2.0})[0] == doctest::Approx(0.0));
}

TEST_CASE("transport consistency: solved trajectory matches the affine flow map") {
    // For a single Gaussian the probability-flow ODE is affine with the known
    // solution x(t) = alpha_t mu + (gamma_t / gamma_0)(x0 - alpha_0 mu),
    // gamma_t = sqrt(alpha^2 s^2 + sigma^2).
    const Vec mu = {1.2, -0.8};
    const double s = 0.35;
    for (const Scheduler& sched : {Scheduler::ot(), Scheduler::vp()}) {
        const FieldPtr u = make_gmm_field(GaussianMixture::single(mu, s), sched);
        const Vec x0 = {0.9, 0.2};
        const double t_end = 1.0 - 1e-6;
        const AdaptiveResult res = solve_adaptive_rk45(*u, x0, 1e-10, 1e-10, 0.0, t_end);
        const SchedulerEval e0 = sched.eval(0.0);
        const SchedulerEval e1 = sched.eval(t_end);
        const double g0 = std::sqrt(e0.alpha * e0.alpha * s * s + e0.sigma * e0.sigma);
        const double g1 = std::sqrt(e1.alpha * e1.alpha * s * s + e1.sigma * e1.sigma);
        for (std::size_t c = 0; c < x0.size(); ++c) {
            const double ref = e1.alpha * mu[c] + g1 / g0 * (x0[c] - e0.alpha * mu[c]);
            CHECK(res.x[c] == doctest::Approx(ref).epsilon(1e-6));
        }
    }
}

TEST_CASE("model-output parameterizations round-trip to the same velocity") {
    const Scheduler sched = Scheduler::vp();
    const FieldPtr u = make_gmm_field(two_component_gmm(), sched);
    for (Parameterization p : {Parameterization::EpsPred, Parameterization::XPred}) {
        const FieldPtr model = to_model_output(u, p, sched);
        const FieldPtr back = to_velocity(model, p, sched);
        for (double t : {0.2, 0.5, 0.8}) {
            const Vec x = {0.3, -0.6};
            const Vec a = u->eval_vec(t, x);
            const Vec b = back->eval_vec(t, x);
            for (std::size_t c = 0; c < x.size(); ++c)
                CHECK(a[c] == doctest::Approx(b[c]).epsilon(1e-12).scale(std::abs(a[c]) + 1.0));
        }
    }
    // Velocity parameterization is the identity conversion.
    CHECK(to_velocity(u, Parameterization::Velocity, sched) == u);
}

TEST_CASE("guidance combination is (1+w) cond - w uncond") {
    const Scheduler sched = Scheduler::ot();
    const FieldPtr cond = make_gmm_field(GaussianMixture::single({1.0, 0.0}, 0.4), sched);
    const FieldPtr uncond = make_gmm_field(two_component_gmm(), sched);
    const double t = 0.4;
    const Vec x = {0.2, -0.1};
    const Vec c = cond->eval_vec(t, x);
    const Vec un = uncond->eval_vec(t, x);
    const Vec w0 = cfg_combine(cond, uncond, 0.0)->eval_vec(t, x);
    const Vec w1 = cfg_combine(cond, cond, 1.0)->eval_vec(t, x);
    const Vec w2 = cfg_combine(cond, uncond, 2.0)->eval_vec(t, x);
    for (std::size_t i = 0; i < x.size(); ++i) {
        CHECK(w0[i] == doctest::Approx(c[i]).epsilon(1e-14));
        CHECK(w1[i] == doctest::Approx(c[i]).epsilon(1e-14));
        CHECK(w2[i] == doctest::Approx(3.0 * c[i] - 2.0 * un[i]).epsilon(1e-13));
    }
    // Each combined evaluation costs one call on each branch.
    cond->reset_nfe();
    uncond->reset_nfe();
    const FieldPtr mix = cfg_combine(cond, uncond, 1.5);
    mix->eval_vec(t, x);
    CHECK(cond->nfe() == 1);
    CHECK(uncond->nfe() == 1);
}

TEST_CASE("field jets agree with finite differences") {
    const Scheduler sched = Scheduler::vp();
    const FieldPtr u = make_gmm_field(two_component_gmm(), sched);
    const double h = 1e-6;
    for (double t : {0.25, 0.6}) {
        const Vec x = {0.4, -0.3};
        FieldJet jet;
        u->derivatives(t, x, jet);
        const Vec base = u->eval_vec(t, x);
        for (std::size_t c = 0; c < x.size(); ++c)
            CHECK(jet.u[c] == doctest::Approx(base[c]).epsilon(1e-14));
        const Vec tp = u->eval_vec(t + h, x);
        const Vec tm = u->eval_vec(t - h, x);
        for (std::size_t c = 0; c < x.size(); ++c) {
            const double fd = (tp[c] - tm[c]) / (2 * h);
            CHECK(jet.du_dt[c] == doctest::Approx(fd).epsilon(1e-4).scale(std::abs(fd) + 1.0));
        }
        for (std::size_t j = 0; j < x.size(); ++j) {
            Vec xp = x, xm = x;
            xp[j] += h;
            xm[j] -= h;
            const Vec up = u->eval_vec(t, xp);
            const Vec um = u->eval_vec(t, xm);
            for (std::size_t i = 0; i < x.size(); ++i) {
                const double fd = (up[i] - um[i]) / (2 * h);
                CHECK(jet.du_dx[i * x.size() + j] ==
                      doctest::Approx(fd).epsilon(1e-4).scale(std::abs(fd) + 1.0));
            }
        }
    }
}

TEST_CASE("evaluation counter counts every call exactly once") {
    const FieldPtr u = make_gmm_field(two_component_gmm(), Scheduler::ot());
    u->reset_nfe();
    Vec out(2);
    FieldJet jet;
    u->eval(0.3, Vec{0.1, 0.2}, out);
    u->eval(0.4, Vec{0.1, 0.2}, out);
    u->derivatives(0.5, Vec{0.1, 0.2}, jet);
    CHECK(u->nfe() == 3);
    u->reset_nfe();
    CHECK(u->nfe() == 0);
}

TEST_CASE("mixture validation rejects malformed inputs") {
    GaussianMixture gmm = two_component_gmm();
    CHECK_NOTHROW(gmm.validate());
    GaussianMixture bad = gmm;
    bad.weights = {0.5, 0.6};
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = gmm;
    bad.weights = {1.0, 0.0};
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = gmm;
    bad.stds = {0.35, -0.1};
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = gmm;
    bad.means = {{1.0, 2.0}, {1.0}};
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    const FieldPtr u = make_gmm_field(gmm, Scheduler::ot());
    Vec out(2);
    CHECK_THROWS_AS(u->eval(0.3, Vec{0.1}, out), DomainError);
    CHECK_THROWS_AS(u->eval_vec(-0.5, Vec{0.1, 0.2}), DomainError);
    // Above the data endpoint the field clamps instead of throwing.
    const Vec hi = u->eval_vec(2.0, Vec{0.1, 0.2});
    const Vec edge = u->eval_vec(1.0 - kTimeEps, Vec{0.1, 0.2});
    CHECK(hi[0] == doctest::Approx(edge[0]).epsilon(1e-15));
}
