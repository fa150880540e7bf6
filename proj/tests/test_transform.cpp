#include <cmath>
#include <vector>

#include "bns/field.hpp"
#include "bns/scheduler.hpp"
#include "bns/solver.hpp"
#include "bns/transform.hpp"
#include "doctest.h"

using namespace bns;

namespace {

// Reference for the scheduler-change map, built only from scheduler values:
// t(r) solves snr_source(t) = snr_target(r) by bisection on the extended
// domain, and s(r) = sigma_target(r) / sigma_source(t(r)).
double ext_snr(const Scheduler& s, double t) {
    const SchedulerJet j = s.jet(t);
    return j.alpha * j.alpha / (j.sigma * j.sigma);
}

double bisect_time(const Scheduler& source, double target_snr, double lo, double hi) {
    auto f = [&](double t) { return ext_snr(source, t) - target_snr; };
    double flo = f(lo);
    for (int it = 0; it < 200; ++it) {
        const double mid = 0.5 * (lo + hi);
        const double fm = f(mid);
        if ((flo < 0.0) == (fm < 0.0)) {
            lo = mid;
            flo = fm;
        } else {
            hi = mid;
        }
    }
    return 0.5 * (lo + hi);
}

StJet reference_scheduler_change(const Scheduler& source, const Scheduler& target,
                                 double r) {
    const SchedulerEval te = target.eval(r);
    const double t = bisect_time(source, te.alpha * te.alpha / (te.sigma * te.sigma),
                                 source.t_min(), 1.0 - 1e-15);
    StJet out{};
    out.t = t;
    out.s = te.sigma / source.jet(t).sigma;
    return out;
}

}  // namespace

TEST_CASE("scheduler change matches the bisection reference") {
    const Scheduler source = Scheduler::vp();
    const Scheduler target = Scheduler::scaled_sigma(Scheduler::vp(), 5.0);
    const StTransform tr = StTransform::scheduler_change(source, target);
    for (double r : {0.05, 0.2, 0.45, 0.7, 0.9, 0.999}) {
        const StJet got = tr.jet(r);
        const StJet ref = reference_scheduler_change(source, target, r);
        CHECK(got.t == doctest::Approx(ref.t).epsilon(1e-8).scale(1.0));
        CHECK(got.s == doctest::Approx(ref.s).epsilon(1e-8));
    }
    // Derivatives agree with finite differences of the map itself.
    const double h = 1e-6;
    for (double r : {0.2, 0.5, 0.8}) {
        const StJet c = tr.jet(r);
        const StJet p = tr.jet(r + h);
        const StJet m = tr.jet(r - h);
        CHECK(c.dt == doctest::Approx((p.t - m.t) / (2 * h)).epsilon(1e-5));
        CHECK(c.ds == doctest::Approx((p.s - m.s) / (2 * h))
                          .epsilon(1e-5)
                          .scale(std::abs(c.ds) + 1.0));
        CHECK(c.ddt == doctest::Approx((p.t - 2 * c.t + m.t) / (h * h))
                           .epsilon(5e-3)
                           .scale(std::abs(c.ddt) + 1.0));
        CHECK(c.dds == doctest::Approx((p.s - 2 * c.s + m.s) / (h * h))
                           .epsilon(5e-3)
                           .scale(std::abs(c.dds) + 1.0));
    }
    // The map starts below the source's t = 0 (extended domain), so only
    // relaxed validation applies; strict endpoint pinning must reject it.
    CHECK_NOTHROW(tr.validate(ValidationMode::Relaxed));
    CHECK_THROWS_AS(tr.validate(ValidationMode::Strict), DomainError);
}

TEST_CASE("scheduler change onto a different family") {
    const Scheduler source = Scheduler::cosine_cs();
    const Scheduler target = Scheduler::vp();
    const StTransform tr = StTransform::scheduler_change(source, target);
    for (double r : {0.1, 0.5, 0.9}) {
        const StJet got = tr.jet(r);
        const StJet ref = reference_scheduler_change(source, target, r);
        CHECK(got.t == doctest::Approx(ref.t).epsilon(1e-8).scale(1.0));
        CHECK(got.s == doctest::Approx(ref.s).epsilon(1e-8));
    }
}

TEST_CASE("the generated scheduler reproduces the target path") {
    const Scheduler source = Scheduler::vp();
    const Scheduler target = Scheduler::scaled_sigma(Scheduler::vp(), 5.0);
    const StTransform tr = StTransform::scheduler_change(source, target);
    const Scheduler gen = scheduler_from_st(tr, source);
    for (double r : {0.05, 0.3, 0.6, 0.95}) {
        const SchedulerEval a = gen.eval(r);
        const SchedulerEval b = target.eval(r);
        CHECK(a.alpha == doctest::Approx(b.alpha).epsilon(1e-8));
        CHECK(a.sigma == doctest::Approx(b.sigma).epsilon(1e-8));
    }
}

TEST_CASE("identity detection") {
    CHECK(StTransform::identity(Scheduler::vp()).is_identity());
    CHECK(st_from_scheduler_change(Scheduler::vp(),
                                   Scheduler::scaled_sigma(Scheduler::vp(), 1.0))
              .is_identity());
    CHECK(st_from_scheduler_change(Scheduler::ot(), Scheduler::ot()).is_identity());
    CHECK_FALSE(st_from_scheduler_change(Scheduler::vp(),
                                         Scheduler::scaled_sigma(Scheduler::vp(), 5.0))
                    .is_identity());
    CHECK(precondition_transform(Scheduler::vp(), 1.0).is_identity());
}

TEST_CASE("exponential-integrator transform basics") {
    const Scheduler vp = Scheduler::vp();
    const StTransform tr = StTransform::ei(Parameterization::EpsPred, vp);
    // s = 1/alpha; at the data end alpha -> 1 so the scale returns to 1.
    CHECK(tr.scale_end() == doctest::Approx(1.0).epsilon(1e-6));
    for (double r : {0.2, 0.5, 0.8}) {
        const StJet j = tr.jet(r);
        CHECK(j.t == doctest::Approx(r).epsilon(1e-12));
        CHECK(j.s == doctest::Approx(1.0 / vp.eval(r).alpha).epsilon(1e-12));
    }
    // Interior-clamped endpoints keep it off the strict grid but valid in
    // relaxed mode.
    CHECK_NOTHROW(tr.validate(ValidationMode::Relaxed));
    const StTransform xr = StTransform::ei(Parameterization::XPred, vp);
    for (double r : {0.2, 0.6}) {
        CHECK(xr.jet(r).s == doctest::Approx(1.0 / vp.eval(r).sigma).epsilon(1e-12));
    }
}

TEST_CASE("kernel-affine time map straightens the integrator kernel") {
    const Scheduler vp = Scheduler::vp();
    const StTransform tr = ei_transform(Parameterization::EpsPred, vp, EiTimeMap::KernelAffine);
    // For eps prediction the integrator kernel is sigma/alpha; along r it must
    // be affine: second differences vanish relative to the first ones.
    auto kernel = [&](double r) {
        const SchedulerEval e = vp.eval(tr.time(r));
        return e.sigma / e.alpha;
    };
    const double h = 0.05;
    for (double r : {0.1, 0.3, 0.5, 0.7}) {
        const double k0 = kernel(r), k1 = kernel(r + h), k2 = kernel(r + 2 * h);
        const double second = k2 - 2 * k1 + k0;
        const double first = k1 - k0;
        CHECK(std::abs(second) <= 1e-6 * std::abs(first));
    }
}

TEST_CASE("transformed field solves to the reparameterized trajectory") {
    // Solve the original dynamics and the transformed dynamics independently;
    // the transformed endpoint divided by scale_end() must recover the
    // original endpoint.
    const Scheduler source = Scheduler::vp();
    const GaussianMixture gmm = GaussianMixture::single({1.2, -0.8}, 0.35);
    const FieldPtr u = make_gmm_field(gmm, source);
    for (double sigma0 : {1.0, 5.0, 10.0}) {
        const StTransform tr = precondition_transform(source, sigma0);
        const FieldPtr ut = precondition_field(u, source, sigma0);
        const Vec y0 = {0.3, -1.1};
        const double r_end = 1.0 - 1e-6;
        const double t0 = tr.time(0.0);
        const double t_end = tr.time(r_end);
        const AdaptiveResult orig = solve_adaptive_rk45(*u, y0, 1e-9, 1e-9, t0, t_end);
        Vec ybar0 = y0;
        for (double& v : ybar0) v *= tr.scale(0.0);
        const AdaptiveResult bar = solve_adaptive_rk45(*ut, ybar0, 1e-9, 1e-9, 0.0, r_end);
        const double s_end = tr.jet(r_end).s;
        for (std::size_t c = 0; c < y0.size(); ++c)
            CHECK(bar.x[c] / s_end == doctest::Approx(orig.x[c]).epsilon(1e-6));
    }
}

TEST_CASE("transformed field values match the chain rule") {
    const Scheduler source = Scheduler::vp();
    const FieldPtr u = make_gmm_field(GaussianMixture::single({0.5, 0.2}, 0.4), source);
    const StTransform tr = precondition_transform(source, 5.0);
    const FieldPtr ut = apply_st_to_field(u, tr);
    for (double r : {0.2, 0.5, 0.8}) {
        const StJet j = tr.jet(r);
        const Vec xbar = {0.7, -0.9};
        Vec inner = xbar;
        for (double& v : inner) v /= j.s;
        const Vec base = u->eval_vec(j.t, inner);
        const Vec got = ut->eval_vec(r, xbar);
        for (std::size_t c = 0; c < xbar.size(); ++c) {
            const double ref = j.ds / j.s * xbar[c] + j.dt * j.s * base[c];
            CHECK(got[c] == doctest::Approx(ref).epsilon(1e-12).scale(std::abs(ref) + 1.0));
        }
    }
    // Jet time/state derivatives of the transformed field agree with finite
    // differences.
    const double h = 1e-6;
    const Vec xbar = {0.7, -0.9};
    FieldJet jet;
    ut->derivatives(0.4, xbar, jet);
    const Vec tp = ut->eval_vec(0.4 + h, xbar);
    const Vec tm = ut->eval_vec(0.4 - h, xbar);
    for (std::size_t c = 0; c < xbar.size(); ++c) {
        const double fd = (tp[c] - tm[c]) / (2 * h);
        CHECK(jet.du_dt[c] == doctest::Approx(fd).epsilon(1e-4).scale(std::abs(fd) + 1.0));
    }
    for (std::size_t jcol = 0; jcol < xbar.size(); ++jcol) {
        Vec xp = xbar, xm = xbar;
        xp[jcol] += h;
        xm[jcol] -= h;
        const Vec up = ut->eval_vec(0.4, xp);
        const Vec um = ut->eval_vec(0.4, xm);
        for (std::size_t i = 0; i < xbar.size(); ++i) {
            const double fd = (up[i] - um[i]) / (2 * h);
            CHECK(jet.du_dx[i * xbar.size() + jcol] ==
                  doctest::Approx(fd).epsilon(1e-4).scale(std::abs(fd) + 1.0));
        }
    }
}

TEST_CASE("preconditioning transform hits the scaled-sigma path") {
    const Scheduler vp = Scheduler::vp();
    const double sigma0 = 5.0;
    const StTransform tr = precondition_transform(vp, sigma0);
    const Scheduler target = Scheduler::scaled_sigma(vp, sigma0);
    const Scheduler gen = scheduler_from_st(tr, vp);
    for (double r : {0.1, 0.5, 0.9}) {
        CHECK(gen.eval(r).alpha == doctest::Approx(target.eval(r).alpha).epsilon(1e-8));
        CHECK(gen.eval(r).sigma == doctest::Approx(target.eval(r).sigma).epsilon(1e-8));
    }
    // sigma0 = 1 keeps the field object untouched.
    const FieldPtr u = make_gmm_field(GaussianMixture::single({0.0, 0.0}, 1.0), vp);
    CHECK(precondition_field(u, vp, 1.0) == u);
    CHECK(precondition_field(u, vp, 5.0) != u);
}

TEST_CASE("custom transform validation catches broken maps") {
    const Scheduler vp = Scheduler::vp();
    // Time map running backwards.
    const StTransform bad = StTransform::custom(
        [](double r) {
            StJet j{};
            j.s = 1.0;
            j.t = 1.0 - r;
            j.ds = 0.0;
            j.dt = -1.0;
            j.dds = 0.0;
            j.ddt = 0.0;
            return j;
        },
        vp, "reversed");
    CHECK_THROWS_AS(bad.validate(ValidationMode::Relaxed), DomainError);
    // Negative scale.
    const StTransform neg = StTransform::custom(
        [](double r) {
            StJet j{};
            j.s = -1.0;
            j.t = r;
            j.ds = 0.0;
            j.dt = 1.0;
            j.dds = 0.0;
            j.ddt = 0.0;
            return j;
        },
        vp, "negative-scale");
    CHECK_THROWS_AS(neg.validate(ValidationMode::Relaxed), DomainError);
    // Valid relaxed map that misses the strict endpoints.
    const StTransform shifted = StTransform::custom(
        [](double r) {
            StJet j{};
            j.s = 1.0;
            j.t = 0.1 + 0.8 * r;
            j.ds = 0.0;
            j.dt = 0.8;
            j.dds = 0.0;
            j.ddt = 0.0;
            return j;
        },
        vp, "shifted");
    CHECK_NOTHROW(shifted.validate(ValidationMode::Relaxed));
    CHECK_THROWS_AS(shifted.validate(ValidationMode::Strict), DomainError);
}
