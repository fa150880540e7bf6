#include <cmath>
#include <vector>

#include "bns/scheduler.hpp"
#include "doctest.h"

using namespace bns;

namespace {

// Central finite differences of the (alpha, sigma) values against the
// analytic first and second derivatives carried by the jet.
void check_jet_derivatives(const Scheduler& s, double t, double tol = 2e-5) {
    const double h = 1e-6;
    const SchedulerJet lo = s.jet(t - h);
    const SchedulerJet mid = s.jet(t);
    const SchedulerJet hi = s.jet(t + h);
    const double da_fd = (hi.alpha - lo.alpha) / (2 * h);
    const double ds_fd = (hi.sigma - lo.sigma) / (2 * h);
    // Second differences need a wider stencil or rounding noise (~eps/h^2
    // scaled by the value) swamps the estimate.
    const double h2 = 1e-4;
    const SchedulerJet lo2 = s.jet(t - h2);
    const SchedulerJet hi2 = s.jet(t + h2);
    const double dda_fd = (hi2.alpha - 2 * mid.alpha + lo2.alpha) / (h2 * h2);
    const double dds_fd = (hi2.sigma - 2 * mid.sigma + lo2.sigma) / (h2 * h2);
    CHECK(std::abs(mid.dalpha - da_fd) <= tol * std::max(1.0, std::abs(da_fd)));
    CHECK(std::abs(mid.dsigma - ds_fd) <= tol * std::max(1.0, std::abs(ds_fd)));
    CHECK(std::abs(mid.ddalpha - dda_fd) <= 2e-3 * std::max(1.0, std::abs(dda_fd)));
    CHECK(std::abs(mid.ddsigma - dds_fd) <= 2e-3 * std::max(1.0, std::abs(dds_fd)));
}

}  // namespace

TEST_CASE("ot scheduler matches the straight-path formulas") {
    const Scheduler s = Scheduler::ot();
    for (double t : {0.0, 0.25, 0.5, 0.9, 1.0}) {
        const SchedulerEval e = s.eval(t);
        CHECK(e.alpha == doctest::Approx(t).epsilon(1e-15));
        CHECK(e.sigma == doctest::Approx(1.0 - t).epsilon(1e-15));
        CHECK(e.dalpha == doctest::Approx(1.0));
        CHECK(e.dsigma == doctest::Approx(-1.0));
    }
    s.validate(ValidationMode::Strict);
    CHECK(s.training_endpoints());
}

TEST_CASE("cosine scheduler values and symmetry") {
    const Scheduler s = Scheduler::cosine_cs();
    for (double t : {0.0, 0.2, 0.5, 0.8, 1.0}) {
        const SchedulerEval e = s.eval(t);
        CHECK(e.alpha == doctest::Approx(std::sin(M_PI * t / 2)).epsilon(1e-14));
        CHECK(e.sigma == doctest::Approx(std::sin(M_PI * (1 - t) / 2)).epsilon(1e-14));
    }
    // alpha(t) == sigma(1-t) by construction.
    CHECK(s.eval(0.3).alpha == doctest::Approx(s.eval(0.7).sigma).epsilon(1e-14));
    s.validate(ValidationMode::Strict);
}

TEST_CASE("vp scheduler frozen endpoint and noise floor") {
    const Scheduler s = Scheduler::vp();
    // alpha_0 = exp(-0.25 * (B - b) - 0.5 * b) with B = 20, b = 0.1.
    CHECK(s.eval(0.0).alpha == doctest::Approx(0.006571586494929619).epsilon(1e-14));
    CHECK(s.eval(1.0).alpha == doctest::Approx(1.0).epsilon(1e-14));
    CHECK(s.eval(1.0).sigma == doctest::Approx(0.0));
    // sigma stays a real positive number arbitrarily close to t = 1.
    const double sig_near_1 = s.jet(1.0 - 1e-12).sigma;
    CHECK(sig_near_1 > 0.0);
    CHECK(std::isfinite(sig_near_1));
    // alpha^2 + sigma^2 = 1 everywhere (variance preserving).
    for (double t : {0.0, 0.1, 0.5, 0.9, 0.999}) {
        const SchedulerEval e = s.eval(t);
        CHECK(e.alpha * e.alpha + e.sigma * e.sigma == doctest::Approx(1.0).epsilon(1e-12));
    }
    CHECK(s.t_min() == doctest::Approx(-9.0));
    s.validate(ValidationMode::Strict);
}

TEST_CASE("edm-ve scheduler is constant-alpha with linear noise decay") {
    const Scheduler s = Scheduler::edm_ve();
    for (double t : {0.0, 0.3, 0.7, 1.0}) {
        const SchedulerEval e = s.eval(t);
        CHECK(e.alpha == doctest::Approx(1.0));
        CHECK(e.sigma == doctest::Approx(80.0 * (1.0 - t)).epsilon(1e-14));
    }
    CHECK_FALSE(s.training_endpoints());
    s.validate(ValidationMode::Strict);
    const Scheduler narrow = Scheduler::edm_ve(10.0);
    CHECK(narrow.eval(0.0).sigma == doctest::Approx(10.0));
}

TEST_CASE("scaled-sigma scheduler multiplies only sigma") {
    const Scheduler base = Scheduler::vp();
    const Scheduler s = Scheduler::scaled_sigma(base, 5.0);
    for (double t : {0.0, 0.25, 0.5, 0.9}) {
        const SchedulerEval b = base.eval(t);
        const SchedulerEval e = s.eval(t);
        CHECK(e.alpha == doctest::Approx(b.alpha).epsilon(1e-15));
        CHECK(e.sigma == doctest::Approx(5.0 * b.sigma).epsilon(1e-15));
        CHECK(e.dsigma == doctest::Approx(5.0 * b.dsigma).epsilon(1e-14));
    }
    CHECK(s.sigma0_param() == doctest::Approx(5.0));
    CHECK(s.base().same_as(base));
    s.validate(ValidationMode::Strict);
    CHECK_THROWS_AS(Scheduler::scaled_sigma(base, 0.0), ConfigError);
    CHECK_THROWS_AS(Scheduler::scaled_sigma(base, -1.0), ConfigError);
}

TEST_CASE("jet derivatives agree with finite differences for every kind") {
    const std::vector<Scheduler> all = {
        Scheduler::ot(), Scheduler::cosine_cs(), Scheduler::vp(), Scheduler::edm_ve(),
        Scheduler::scaled_sigma(Scheduler::vp(), 5.0)};
    for (const Scheduler& s : all)
        for (double t : {0.05, 0.2, 0.5, 0.8, 0.95}) check_jet_derivatives(s, t);
    // Extended-domain points for the kinds that have them.
    check_jet_derivatives(Scheduler::vp(), -0.5);
    check_jet_derivatives(Scheduler::vp(), -3.0);
    check_jet_derivatives(Scheduler::edm_ve(), -2.0);
}

TEST_CASE("snr is strictly increasing and snr_inverse round-trips") {
    const std::vector<Scheduler> all = {
        Scheduler::ot(), Scheduler::cosine_cs(), Scheduler::vp(), Scheduler::edm_ve(),
        Scheduler::scaled_sigma(Scheduler::ot(), 0.25)};
    for (const Scheduler& s : all) {
        double prev = s.snr(1e-6);
        for (int i = 1; i <= 60; ++i) {
            const double t = 1e-6 + (1.0 - 2e-6) * i / 60.0;
            const double cur = s.snr(t);
            CHECK(cur > prev);
            prev = cur;
        }
        for (double t : {1e-4, 0.2, 0.5, 0.77, 0.999}) {
            const double back = s.snr_inverse(s.snr(t));
            CHECK(std::abs(s.snr(back) - s.snr(t)) <= 1e-12 * s.snr(t));
            CHECK(back == doctest::Approx(t).epsilon(1e-8));
        }
        CHECK(s.log_snr_slope(0.5) > 0.0);
    }
}

TEST_CASE("extended snr inversion reaches below t = 0 for vp") {
    const Scheduler s = Scheduler::vp();
    const double v = s.snr(0.0) / 10.0;
    const double t = s.snr_inverse_extended(v);
    CHECK(t < 0.0);
    CHECK(t > s.t_min());
    const SchedulerJet j = s.jet(t);
    CHECK(j.alpha / j.sigma == doctest::Approx(v).epsilon(1e-10));
}

TEST_CASE("domain enforcement") {
    const Scheduler s = Scheduler::vp();
    CHECK_THROWS_AS(s.eval(-0.01), DomainError);
    CHECK_THROWS_AS(s.eval(1.01), DomainError);
    CHECK_THROWS_AS(s.jet(-9.5), DomainError);
    CHECK_NOTHROW(s.jet(-8.9));
    const Scheduler ot = Scheduler::ot();
    CHECK_THROWS_AS(ot.jet(-0.01), DomainError);
    // Inversion rejects values outside the attainable range.
    CHECK_THROWS_AS(ot.snr_inverse(-1.0), RangeError);
    CHECK_THROWS_AS(ot.snr_inverse(1e300), RangeError);
}

TEST_CASE("log-snr derivative identities") {
    const Scheduler s = Scheduler::cosine_cs();
    const double h = 1e-6;
    for (double t : {0.2, 0.5, 0.8}) {
        const double slope_fd = (s.log_snr(t + h) - s.log_snr(t - h)) / (2 * h);
        CHECK(s.log_snr_slope(t) == doctest::Approx(slope_fd).epsilon(1e-6));
        const double curv_fd =
            (s.log_snr_slope(t + h) - s.log_snr_slope(t - h)) / (2 * h);
        CHECK(s.log_snr_curvature(t) ==
              doctest::Approx(curv_fd).epsilon(1e-4).scale(std::abs(curv_fd) + 1.0));
    }
}

TEST_CASE("custom scheduler factory round trip") {
    const Scheduler ref = Scheduler::cosine_cs();
    const Scheduler custom = Scheduler::custom(
        [ref](double t) { return ref.jet(t); }, 0.0, true, "cosine-copy");
    custom.validate(ValidationMode::Strict);
    for (double t : {0.1, 0.6, 0.95})
        CHECK(custom.eval(t).alpha == doctest::Approx(ref.eval(t).alpha).epsilon(1e-15));
    CHECK(custom.name() == "cosine-copy");
    CHECK(custom.same_as(custom));
    CHECK_FALSE(custom.same_as(ref));
}
