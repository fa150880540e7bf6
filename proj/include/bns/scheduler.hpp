#pragma once

#include <functional>
#include <memory>
#include <string>

#include "bns/common.hpp"

namespace bns {

enum class SchedulerKind { Ot, CosineCs, Vp, EdmVe, ScaledSigma, Custom };

/// (alpha_t, sigma_t) and first derivatives.
struct SchedulerEval {
    double alpha, sigma, dalpha, dsigma;
};

/// Adds second derivatives; used by transform/field chain rules.
struct SchedulerJet {
    double alpha, sigma, dalpha, dsigma, ddalpha, ddsigma;
};

enum class ValidationMode { Strict, Relaxed };

/// A Gaussian-path noise scheduler t -> (alpha_t, sigma_t) on [0, 1].
///
/// Kinds whose formulas are analytic below t = 0 expose an extended domain
/// [t_min(), 1]; scheduler-change transforms use it when the target's SNR
/// range dips below the source's SNR at t = 0. The public eval() keeps the
/// documented [0, 1] contract.
class Scheduler {
public:
    /// Defaults to the ot path.
    Scheduler() = default;

    static Scheduler ot();
    static Scheduler cosine_cs();
    static Scheduler vp();
    static Scheduler edm_ve(double sigma_max = 80.0);
    static Scheduler scaled_sigma(const Scheduler& base, double sigma0);
    /// Arbitrary scheduler given by a jet function on [t_min, 1].
    static Scheduler custom(std::function<SchedulerJet(double)> jet_fn, double t_min,
                            bool training_endpoints, std::string name);

    SchedulerKind kind() const { return kind_; }
    const std::string& name() const { return name_; }

    /// Lower bound of the maximal analytic domain (upper bound is always 1).
    double t_min() const { return t_min_; }

    /// Evaluate on the documented domain [0, 1]. Throws DomainError outside.
    SchedulerEval eval(double t) const;

    /// Evaluate with second derivatives on the extended domain [t_min, 1].
    SchedulerJet jet(double t) const;

    double snr(double t) const;
    double log_snr(double t) const;
    /// d/dt log snr(t); positive for valid schedulers.
    double log_snr_slope(double t) const;
    double log_snr_curvature(double t) const;

    /// Invert snr on the clamped interval; v must lie in the open attainable
    /// range (snr(lo), snr(1 - eps)). Result satisfies |snr(t)-v|/v <= 1e-12.
    double snr_inverse(double v) const;

    /// Inversion over the full extended domain [t_min, 1 - kTimeEps];
    /// used internally by transforms.
    double snr_inverse_extended(double v) const;

    /// Endpoint law (training schedulers) and SNR monotonicity checks.
    /// EdmVe/ScaledSigma are exempt from the endpoint law in both modes.
    void validate(ValidationMode mode) const;

    /// True for kinds trained models use (alpha_0 ~ 0, sigma_1 = 0 etc.).
    bool training_endpoints() const;

    /// Structural equality (Custom compares by identity).
    bool same_as(const Scheduler& other) const;

    double sigma0_param() const { return sigma0_; }
    double sigma_max_param() const { return sigma_max_; }
    const Scheduler& base() const;

private:
    SchedulerKind kind_ = SchedulerKind::Ot;
    std::string name_ = "ot";
    double t_min_ = 0.0;
    double sigma0_ = 1.0;     // ScaledSigma factor
    double sigma_max_ = 80.0; // EdmVe scale
    std::shared_ptr<const Scheduler> base_;
    std::shared_ptr<const std::function<SchedulerJet(double)>> custom_;
    bool custom_training_ = false;
};

/// Free-function forms of the scheduler operations.
SchedulerEval eval_scheduler(const Scheduler& s, double t);
double snr_inverse(const Scheduler& s, double v);

}  // namespace bns
