#pragma once

#include <functional>
#include <memory>
#include <string>

#include "bns/field.hpp"
#include "bns/scheduler.hpp"

namespace bns {

/// Scale/time reparameterization values at one r, with first and second
/// r-derivatives (the second derivatives feed transformed-field time
/// derivatives during solver training).
struct StJet {
    double s, t;      // scale and mapped time
    double ds, dt;    // d/dr
    double dds, ddt;  // d^2/dr^2
};

/// A trajectory reparameterization x_bar(r) = s_r * x(t_r). Immutable value
/// type; copies share the implementation and its jet cache.
class StTransform {
public:
    /// s = 1, t_r = r.
    static StTransform identity(Scheduler source);

    /// The transform that carries `source`-scheduler trajectories onto
    /// `target`-scheduler ones: t_r = snr^-1(target_snr(r)), s_r =
    /// target_sigma(r)/sigma(t_r) (alpha-ratio form where better
    /// conditioned). Requires the target SNR range to sit inside the
    /// source's attainable (extended-domain) range.
    static StTransform scheduler_change(Scheduler source, Scheduler target);

    /// Exponential-integrator transform: s_r = 1/psi(r), t_r = r, with psi =
    /// alpha (eps_pred) or sigma (x_pred). Accepts r in [0, 1]; evaluation
    /// times are clamped to [eps, 1-eps] where psi stays nonzero.
    static StTransform ei(Parameterization p, Scheduler source);

    /// Exponential-integrator transform with the time map chosen so the
    /// integrator kernel (alpha/sigma)^eta is affine in r. Euler on the
    /// transformed field then reproduces the classic eps/x-prediction
    /// single-history exponential step (DDIM for eps_pred) exactly on any
    /// r-grid.
    static StTransform ei_kernel_affine(Parameterization p, Scheduler source);

    static StTransform custom(std::function<StJet(double)> jet_fn, Scheduler source,
                              std::string name, double r_lo = 0.0, double r_hi = 1.0);

    StJet jet(double r) const;
    double scale(double r) const { return jet(r).s; }
    double time(double r) const { return jet(r).t; }

    /// Scale at the final parameter value; dividing the transformed endpoint
    /// state by this recovers the original sample.
    double scale_end() const { return jet(r_hi()).s; }

    double r_lo() const;
    double r_hi() const;
    const Scheduler& source() const;
    bool is_identity() const;
    const std::string& name() const;

    /// Checks s > 0 and strict monotonicity of t on a 101-point grid plus
    /// derivative/finite-difference agreement; Strict additionally pins the
    /// endpoint maps t(0)=0, t(1)=1.
    void validate(ValidationMode mode = ValidationMode::Strict) const;

private:
    struct Impl;
    StTransform() = default;
    std::shared_ptr<const Impl> impl_;
};

using STTransform = StTransform;

/// Carries source-scheduler trajectories onto target-scheduler ones; identity
/// when the schedulers coincide (including a ScaledSigma wrapper with
/// sigma0 = 1).
StTransform st_from_scheduler_change(Scheduler source, Scheduler target);

/// Which time map the exponential-integrator transform uses: Identity keeps
/// t_r = r; KernelAffine spaces times so the integrator kernel is affine in
/// r, making Euler on the transformed field land exactly on the classic
/// single-history exponential step.
enum class EiTimeMap { Identity, KernelAffine };

StTransform ei_transform(Parameterization p, const Scheduler& s,
                         EiTimeMap map = EiTimeMap::Identity);

/// The transformed velocity field
///   u_bar_r(x) = (ds/s) x + dt * s * u(t_r, x / s).
/// Solving it from x_bar(r_lo) = s_lo * x(t_lo) and dividing the endpoint by
/// scale_end() reproduces the untransformed solution.
FieldPtr apply_st_to_field(FieldPtr u, StTransform transform);

/// Scheduler whose path the transform generates from the source one:
/// alpha_bar(r) = s_r alpha(t_r), sigma_bar(r) = s_r sigma(t_r).
Scheduler scheduler_from_st(const StTransform& transform, const Scheduler& source);

/// Preconditioning scheduler change (sigma_bar = sigma0 * sigma).
StTransform precondition_transform(const Scheduler& sched, double sigma0);

/// Field preconditioned by sigma0; sigma0 = 1 returns `u` unchanged.
FieldPtr precondition_field(FieldPtr u, const Scheduler& sched, double sigma0);

}  // namespace bns
