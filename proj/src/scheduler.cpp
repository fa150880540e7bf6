#include "bns/scheduler.hpp"

#include <cmath>
#include <limits>

#include "bns/dual.hpp"

namespace bns {
namespace {

using detail::Dual2;
using detail::make_dual2;
using std::exp;
using std::expm1;
using std::sin;
using std::sqrt;
using detail::exp;
using detail::expm1;
using detail::sin;
using detail::sqrt;

constexpr double kVpBetaMax = 20.0;
constexpr double kVpBetaMin = 0.1;
constexpr double kVpTMin = -9.0;
constexpr double kEdmTMin = -1e9;

template <class T>
struct AlphaSigma {
    T alpha, sigma;
};

template <class T>
AlphaSigma<T> ot_eval(T t) {
    return {t, 1.0 - t};
}

template <class T>
AlphaSigma<T> cosine_eval(T t) {
    // sigma written as sin(pi(1-t)/2) so it stays accurate as t -> 1.
    return {sin((M_PI / 2.0) * t), sin((M_PI / 2.0) * (1.0 - t))};
}

template <class T>
AlphaSigma<T> vp_eval(T t) {
    T s = 1.0 - t;
    T g = -0.25 * s * s * (kVpBetaMax - kVpBetaMin) - 0.5 * s * kVpBetaMin;
    // sigma^2 = 1 - xi^2 = -expm1(2g); avoids cancellation as xi -> 1.
    return {exp(g), sqrt(-expm1(2.0 * g))};
}

template <class T>
AlphaSigma<T> edm_eval(T t, double sigma_max) {
    return {T(1.0), sigma_max * (1.0 - t)};
}

SchedulerJet jet_from_dual2(const AlphaSigma<Dual2>& as) {
    return {as.alpha.v.v, as.sigma.v.v, as.alpha.v.d, as.sigma.v.d,
            as.alpha.d.d, as.sigma.d.d};
}

}  // namespace

Scheduler Scheduler::ot() {
    Scheduler s;
    s.kind_ = SchedulerKind::Ot;
    s.name_ = "ot";
    return s;
}

Scheduler Scheduler::cosine_cs() {
    Scheduler s;
    s.kind_ = SchedulerKind::CosineCs;
    s.name_ = "cosine_cs";
    return s;
}

Scheduler Scheduler::vp() {
    Scheduler s;
    s.kind_ = SchedulerKind::Vp;
    s.name_ = "vp";
    s.t_min_ = kVpTMin;
    return s;
}

Scheduler Scheduler::edm_ve(double sigma_max) {
    if (!(sigma_max > 0.0))
        throw ConfigError("edm_ve: sigma_max must be positive");
    Scheduler s;
    s.kind_ = SchedulerKind::EdmVe;
    s.name_ = "edm_ve";
    s.sigma_max_ = sigma_max;
    s.t_min_ = kEdmTMin;
    return s;
}

Scheduler Scheduler::scaled_sigma(const Scheduler& base, double sigma0) {
    if (!(sigma0 > 0.0) || !std::isfinite(sigma0))
        throw ConfigError("scaled_sigma: sigma0 must be positive and finite");
    Scheduler s;
    s.kind_ = SchedulerKind::ScaledSigma;
    s.name_ = "scaled_sigma(" + base.name_ + "," + format_double(sigma0) + ")";
    s.sigma0_ = sigma0;
    s.base_ = std::make_shared<Scheduler>(base);
    s.t_min_ = base.t_min_;
    return s;
}

Scheduler Scheduler::custom(std::function<SchedulerJet(double)> jet_fn, double t_min,
                            bool training_endpoints, std::string name) {
    Scheduler s;
    s.kind_ = SchedulerKind::Custom;
    s.name_ = std::move(name);
    s.t_min_ = t_min;
    s.custom_ = std::make_shared<const std::function<SchedulerJet(double)>>(std::move(jet_fn));
    s.custom_training_ = training_endpoints;
    return s;
}

const Scheduler& Scheduler::base() const {
    if (!base_) throw DomainError("scheduler '" + name_ + "' has no base");
    return *base_;
}

SchedulerJet Scheduler::jet(double t) const {
    if (!std::isfinite(t))
        throw DomainError("scheduler time must be finite");
    if (t < t_min_ - 1e-9 || t > 1.0 + 1e-9)
        throw DomainError("scheduler time " + format_double(t) + " outside domain [" +
                          format_double(t_min_) + ", 1]");
    switch (kind_) {
        case SchedulerKind::Ot:
            return jet_from_dual2(ot_eval(make_dual2(t)));
        case SchedulerKind::CosineCs:
            return jet_from_dual2(cosine_eval(make_dual2(t)));
        case SchedulerKind::Vp:
            return jet_from_dual2(vp_eval(make_dual2(t)));
        case SchedulerKind::EdmVe:
            return jet_from_dual2(edm_eval(make_dual2(t), sigma_max_));
        case SchedulerKind::ScaledSigma: {
            SchedulerJet j = base_->jet(t);
            j.sigma *= sigma0_;
            j.dsigma *= sigma0_;
            j.ddsigma *= sigma0_;
            return j;
        }
        case SchedulerKind::Custom:
            return (*custom_)(t);
    }
    throw DomainError("unreachable scheduler kind");
}

SchedulerEval Scheduler::eval(double t) const {
    if (!std::isfinite(t) || t < 0.0 || t > 1.0)
        throw DomainError("eval_scheduler: t must lie in [0, 1], got " + format_double(t));
    SchedulerJet j = jet(t);
    return {j.alpha, j.sigma, j.dalpha, j.dsigma};
}

double Scheduler::snr(double t) const {
    SchedulerJet j = jet(t);
    return j.alpha / j.sigma;
}

double Scheduler::log_snr(double t) const {
    SchedulerJet j = jet(t);
    return std::log(j.alpha) - std::log(j.sigma);
}

double Scheduler::log_snr_slope(double t) const {
    SchedulerJet j = jet(t);
    return j.dalpha / j.alpha - j.dsigma / j.sigma;
}

double Scheduler::log_snr_curvature(double t) const {
    SchedulerJet j = jet(t);
    double a = (j.ddalpha * j.alpha - j.dalpha * j.dalpha) / (j.alpha * j.alpha);
    double s = (j.ddsigma * j.sigma - j.dsigma * j.dsigma) / (j.sigma * j.sigma);
    return a - s;
}

namespace {

/// Monotone bisection of snr on [lo, hi]; runs until the bracket collapses to
/// adjacent doubles, so the result is within one ulp of the preimage.
double bisect_snr(const Scheduler& s, double v, double lo, double hi) {
    for (int i = 0; i < 200; ++i) {
        double mid = 0.5 * (lo + hi);
        if (mid <= lo || mid >= hi) break;
        if (s.snr(mid) < v)
            lo = mid;
        else
            hi = mid;
    }
    return 0.5 * (lo + hi);
}

}  // namespace

double Scheduler::snr_inverse(double v) const {
    double lo = kInteriorEps;
    double hi = 1.0 - kInteriorEps;
    double snr_lo = snr(lo);
    double snr_hi = snr(hi);
    if (!std::isfinite(v) || v <= snr_lo || v >= snr_hi)
        throw RangeError("snr_inverse(" + name_ + "): value " + format_double(v) +
                             " outside attainable SNR range (" + format_double(snr_lo) +
                             ", " + format_double(snr_hi) + ")",
                         snr_lo, snr_hi);
    if (kind_ == SchedulerKind::Ot) {
        return v / (1.0 + v);
    }
    return bisect_snr(*this, v, lo, hi);
}

double Scheduler::snr_inverse_extended(double v) const {
    double lo = t_min_;
    double hi = 1.0 - kTimeEps;
    double snr_lo = snr(lo);
    double snr_hi = snr(hi);
    if (!std::isfinite(v) || v <= snr_lo || v >= snr_hi)
        throw RangeError("snr_inverse(" + name_ + "): value " + format_double(v) +
                             " outside attainable SNR range (" + format_double(snr_lo) +
                             ", " + format_double(snr_hi) + ")",
                         snr_lo, snr_hi);
    if (kind_ == SchedulerKind::Ot) {
        double t = v / (1.0 + v);
        return std::min(t, hi);
    }
    return bisect_snr(*this, v, lo, hi);
}

bool Scheduler::training_endpoints() const {
    switch (kind_) {
        case SchedulerKind::Ot:
        case SchedulerKind::CosineCs:
        case SchedulerKind::Vp:
            return true;
        case SchedulerKind::Custom:
            return custom_training_;
        default:
            return false;
    }
}

void Scheduler::validate(ValidationMode mode) const {
    if (mode == ValidationMode::Strict && training_endpoints()) {
        SchedulerJet j1 = jet(1.0);
        if (std::fabs(j1.alpha - 1.0) > 1e-12 || std::fabs(j1.sigma) > 1e-12)
            throw DomainError("scheduler '" + name_ +
                              "' endpoint law violated at t=1: alpha=" +
                              format_double(j1.alpha) + " sigma=" + format_double(j1.sigma));
        SchedulerJet j0 = jet(0.0);
        if (!(j0.alpha >= 0.0 && j0.alpha < 1e-2))
            throw DomainError("scheduler '" + name_ + "' endpoint law violated at t=0: alpha=" +
                              format_double(j0.alpha));
        if (!(j0.sigma > 0.99))
            throw DomainError("scheduler '" + name_ + "' endpoint law violated at t=0: sigma=" +
                              format_double(j0.sigma));
    }
    // SNR strictly increasing on an interior grid, sigma positive.
    const int n = 128;
    double prev = -std::numeric_limits<double>::infinity();
    for (int i = 0; i <= n; ++i) {
        double t = kInteriorEps + (1.0 - 2.0 * kInteriorEps) * i / n;
        SchedulerJet j = jet(t);
        if (!(j.sigma > 0.0) || !std::isfinite(j.alpha))
            throw DomainError("scheduler '" + name_ + "' invalid at t=" + format_double(t));
        double v = j.alpha / j.sigma;
        if (!(v > prev))
            throw DomainError("scheduler '" + name_ + "' SNR not strictly increasing at t=" +
                              format_double(t));
        prev = v;
    }
}

bool Scheduler::same_as(const Scheduler& other) const {
    if (kind_ != other.kind_) return false;
    switch (kind_) {
        case SchedulerKind::Ot:
        case SchedulerKind::CosineCs:
        case SchedulerKind::Vp:
            return true;
        case SchedulerKind::EdmVe:
            return sigma_max_ == other.sigma_max_;
        case SchedulerKind::ScaledSigma:
            return sigma0_ == other.sigma0_ && base_->same_as(*other.base_);
        case SchedulerKind::Custom:
            return custom_ == other.custom_;
    }
    return false;
}

SchedulerEval eval_scheduler(const Scheduler& s, double t) { return s.eval(t); }

double snr_inverse(const Scheduler& s, double v) { return s.snr_inverse(v); }

}  // namespace bns
