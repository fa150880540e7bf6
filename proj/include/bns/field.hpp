#pragma once

#include <atomic>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>

#include "bns/common.hpp"
#include "bns/scheduler.hpp"

namespace bns {

/// Isotropic Gaussian mixture over R^d; std 0 marks a point mass.
struct GaussianMixture {
    std::vector<Vec> means;  // K x d
    Vec stds;                // K
    Vec weights;             // K, sums to 1

    int dim() const { return means.empty() ? 0 : static_cast<int>(means[0].size()); }
    int components() const { return static_cast<int>(means.size()); }
    void validate() const;

    static GaussianMixture single(Vec mean, double std_dev);
};

/// Value, time derivative and Jacobian of a field at one (t, x).
struct FieldJet {
    Vec u;       // d
    Vec du_dt;   // d
    Vec du_dx;   // d*d row-major: du_dx[r*d + c] = d u_r / d x_c

    void resize(int d) {
        u.assign(d, 0.0);
        du_dt.assign(d, 0.0);
        du_dx.assign(static_cast<std::size_t>(d) * d, 0.0);
    }
};

/// A time-dependent vector field (t, x) -> R^d with an evaluation counter.
///
/// The counter increments exactly once per eval()/derivatives() call and is
/// atomic so concurrent sampling keeps exact counts.
class VelocityField {
public:
    explicit VelocityField(int dim) : dim_(dim) {
        if (dim < 1) throw ConfigError("velocity field dimension must be >= 1");
    }
    virtual ~VelocityField() = default;

    int dim() const { return dim_; }

    void eval(double t, std::span<const double> x, std::span<double> out) const {
        check_args(t, x, out.size());
        nfe_.fetch_add(1, std::memory_order_relaxed);
        eval_impl(t, x, out);
    }

    Vec eval_vec(double t, const Vec& x) const {
        Vec out(dim_);
        eval(t, x, out);
        return out;
    }

    void derivatives(double t, std::span<const double> x, FieldJet& out) const {
        check_args(t, x, static_cast<std::size_t>(dim_));
        nfe_.fetch_add(1, std::memory_order_relaxed);
        out.resize(dim_);
        derivatives_impl(t, x, out);
    }

    std::uint64_t nfe() const { return nfe_.load(std::memory_order_relaxed); }
    void reset_nfe() const { nfe_.store(0, std::memory_order_relaxed); }

protected:
    virtual void eval_impl(double t, std::span<const double> x, std::span<double> out) const = 0;
    virtual void derivatives_impl(double t, std::span<const double> x, FieldJet& out) const = 0;

private:
    void check_args(double t, std::span<const double> x, std::size_t out_size) const {
        if (!std::isfinite(t)) throw DomainError("field evaluation time must be finite");
        if (x.size() != static_cast<std::size_t>(dim_) || out_size != static_cast<std::size_t>(dim_))
            throw DomainError("field evaluation: dimension mismatch");
    }

    int dim_;
    mutable std::atomic<std::uint64_t> nfe_{0};
};

using FieldPtr = std::shared_ptr<const VelocityField>;

/// Model-output conventions for Gaussian-path generative models.
enum class Parameterization { Velocity, EpsPred, XPred };

Parameterization parameterization_from_string(const std::string& s);
std::string to_string(Parameterization p);

/// Coefficients (beta_t, gamma_t) such that u_t(x) = beta_t x + gamma_t f_t(x).
struct ParamCoeffs {
    double beta, gamma;
};
ParamCoeffs param_coeffs(Parameterization p, const SchedulerEval& se);

/// Marginal velocity of the Gaussian-path mixture; the closed-form oracle all
/// sampling tests run against. Accepts times in the scheduler's extended
/// domain; times beyond 1 - kTimeEps are clamped (sigma stays positive).
FieldPtr make_gmm_field(GaussianMixture gmm, Scheduler sched);

/// Wrap a model-output field f as the velocity field beta x + gamma f.
/// Velocity parameterization is the identity (returns `model` unchanged).
FieldPtr to_velocity(FieldPtr model, Parameterization p, Scheduler sched);

/// Inverse of to_velocity: recover the model-output field from a velocity.
FieldPtr to_model_output(FieldPtr velocity, Parameterization p, Scheduler sched);

/// Classifier-free-guidance combination (1 + w) * cond - w * uncond.
/// Each evaluation costs one eval of each child (2 model NFE).
FieldPtr cfg_combine(FieldPtr cond, FieldPtr uncond, double guidance_weight);

/// Ad-hoc field from callables; derivative callback optional (throws if used
/// while absent). Intended for tests and synthetic sweeps.
FieldPtr make_callback_field(
    int dim,
    std::function<void(double, std::span<const double>, std::span<double>)> eval_fn,
    std::function<void(double, std::span<const double>, FieldJet&)> jet_fn = nullptr);

}  // namespace bns
