#include "bns/field.hpp"

#include <cmath>

#include "bns/dual.hpp"

namespace bns {
namespace {

using detail::Dual1;

// Scheduler quantities lifted to the active scalar type. For duals the time
// tangent is pushed through via the stored second derivatives.
template <class T>
struct SchedLift {
    T alpha, sigma, dalpha, dsigma;
};

SchedLift<double> lift_sched(const Scheduler& s, double t) {
    SchedulerJet j = s.jet(t);
    return {j.alpha, j.sigma, j.dalpha, j.dsigma};
}

SchedLift<Dual1> lift_sched(const Scheduler& s, Dual1 t) {
    SchedulerJet j = s.jet(t.v);
    return {Dual1(j.alpha, j.dalpha * t.d), Dual1(j.sigma, j.dsigma * t.d),
            Dual1(j.dalpha, j.ddalpha * t.d), Dual1(j.dsigma, j.ddsigma * t.d)};
}

// Marginal velocity of a Gaussian-path mixture:
//   u(t, x) = (dsigma/sigma) x + (dalpha - (dsigma/sigma) alpha) E[x1 | x_t = x]
// with the posterior mean E[x1 | x] a responsibility-weighted combination of
// per-component ridge estimates. Shared constants cancel in the softmax.
template <class T>
void gmm_core(const GaussianMixture& g, const SchedLift<T>& sc,
              std::span<const T> x, std::span<T> out) {
    using std::exp;
    using std::log;
    using detail::exp;
    using detail::log;
    using detail::value_of;

    const int d = g.dim();
    const int K = g.components();

    std::vector<T> logw(K), var(K);
    std::vector<T> diff(static_cast<std::size_t>(K) * d);

    for (int k = 0; k < K; ++k) {
        const double sk = g.stds[k];
        var[k] = sc.alpha * sc.alpha * (sk * sk) + sc.sigma * sc.sigma;
        T q(0.0);
        for (int r = 0; r < d; ++r) {
            T dr = x[r] - sc.alpha * g.means[k][r];
            diff[static_cast<std::size_t>(k) * d + r] = dr;
            q = q + dr * dr;
        }
        logw[k] = log(T(g.weights[k])) - 0.5 * d * log(var[k]) - 0.5 * q / var[k];
    }

    double m = value_of(logw[0]);
    for (int k = 1; k < K; ++k) m = std::max(m, value_of(logw[k]));

    T den(0.0);
    std::vector<T> resp(K);
    for (int k = 0; k < K; ++k) {
        resp[k] = exp(logw[k] - m);
        den = den + resp[k];
    }

    std::vector<T> post(d, T(0.0));
    for (int k = 0; k < K; ++k) {
        T gamma_k = resp[k] / den;
        T ridge = sc.alpha * (g.stds[k] * g.stds[k]) / var[k];
        for (int r = 0; r < d; ++r) {
            post[r] = post[r] +
                      gamma_k * (T(g.means[k][r]) + ridge * diff[static_cast<std::size_t>(k) * d + r]);
        }
    }

    T ratio = sc.dsigma / sc.sigma;
    T drift = sc.dalpha - ratio * sc.alpha;
    for (int r = 0; r < d; ++r) out[r] = ratio * x[r] + drift * post[r];
}

class GmmField final : public VelocityField {
public:
    GmmField(GaussianMixture gmm, Scheduler sched)
        : VelocityField(gmm.dim()), gmm_(std::move(gmm)), sched_(std::move(sched)) {
        gmm_.validate();
    }

protected:
    void eval_impl(double t, std::span<const double> x, std::span<double> out) const override {
        SchedLift<double> sc = lift_sched(sched_, clamp_time(t));
        gmm_core<double>(gmm_, sc, x, out);
    }

    void derivatives_impl(double t, std::span<const double> x, FieldJet& out) const override {
        const int d = dim();
        const double tc = clamp_time(t);
        std::vector<Dual1> xd(d), ud(d);

        // Time pass: seed dt = 1 (0 in the clamped sliver, where the field is
        // held constant in t by construction).
        const double tdot = (t == tc) ? 1.0 : 0.0;
        SchedLift<Dual1> sct = lift_sched(sched_, Dual1(tc, tdot));
        for (int r = 0; r < d; ++r) xd[r] = Dual1(x[r], 0.0);
        gmm_core<Dual1>(gmm_, sct, std::span<const Dual1>(xd), std::span<Dual1>(ud));
        for (int r = 0; r < d; ++r) {
            out.u[r] = ud[r].v;
            out.du_dt[r] = ud[r].d;
        }

        // One pass per state coordinate for the Jacobian columns.
        SchedLift<Dual1> scx = lift_sched(sched_, Dual1(tc, 0.0));
        for (int c = 0; c < d; ++c) {
            for (int r = 0; r < d; ++r) xd[r] = Dual1(x[r], r == c ? 1.0 : 0.0);
            gmm_core<Dual1>(gmm_, scx, std::span<const Dual1>(xd), std::span<Dual1>(ud));
            for (int r = 0; r < d; ++r) out.du_dx[static_cast<std::size_t>(r) * d + c] = ud[r].d;
        }
    }

private:
    double clamp_time(double t) const {
        // sigma -> 0 at t = 1 makes the ratio form singular; hold the field
        // constant over the final sliver instead.
        const double hi = 1.0 - kTimeEps;
        if (t > hi) return hi;
        if (t < sched_.t_min())
            throw DomainError("gmm field: time below the scheduler domain");
        return t;
    }

    GaussianMixture gmm_;
    Scheduler sched_;
};

// Velocity field assembled from a model-output field: u = beta x + gamma f.
class ParamVelocityField final : public VelocityField {
public:
    ParamVelocityField(FieldPtr model, Parameterization p, Scheduler sched)
        : VelocityField(model->dim()), model_(std::move(model)), p_(p), sched_(std::move(sched)) {}

protected:
    void eval_impl(double t, std::span<const double> x, std::span<double> out) const override {
        SchedulerJet j = sched_.jet(t);
        ParamCoeffs c = coeffs(j);
        const int d = dim();
        Vec f(d);
        model_->eval(t, x, f);
        for (int r = 0; r < d; ++r) out[r] = c.beta * x[r] + c.gamma * f[r];
    }

    void derivatives_impl(double t, std::span<const double> x, FieldJet& out) const override {
        SchedulerJet j = sched_.jet(t);
        ParamCoeffs c = coeffs(j);
        double dbeta = 0.0, dgamma = 0.0;
        coeff_rates(j, c, dbeta, dgamma);

        const int d = dim();
        FieldJet fj;
        model_->derivatives(t, x, fj);
        for (int r = 0; r < d; ++r) {
            out.u[r] = c.beta * x[r] + c.gamma * fj.u[r];
            out.du_dt[r] = dbeta * x[r] + dgamma * fj.u[r] + c.gamma * fj.du_dt[r];
            for (int cc = 0; cc < d; ++cc) {
                double v = c.gamma * fj.du_dx[static_cast<std::size_t>(r) * d + cc];
                if (r == cc) v += c.beta;
                out.du_dx[static_cast<std::size_t>(r) * d + cc] = v;
            }
        }
    }

private:
    ParamCoeffs coeffs(const SchedulerJet& j) const {
        SchedulerEval se{j.alpha, j.sigma, j.dalpha, j.dsigma};
        return param_coeffs(p_, se);
    }

    void coeff_rates(const SchedulerJet& j, const ParamCoeffs& c, double& dbeta,
                     double& dgamma) const {
        switch (p_) {
            case Parameterization::Velocity:
                dbeta = 0.0;
                dgamma = 0.0;
                break;
            case Parameterization::EpsPred:
                dbeta = (j.ddalpha * j.alpha - j.dalpha * j.dalpha) / (j.alpha * j.alpha);
                dgamma = j.ddsigma - j.dsigma * c.beta - j.sigma * dbeta;
                break;
            case Parameterization::XPred:
                dbeta = (j.ddsigma * j.sigma - j.dsigma * j.dsigma) / (j.sigma * j.sigma);
                dgamma = j.ddalpha - j.dalpha * c.beta - j.alpha * dbeta;
                break;
        }
    }

    FieldPtr model_;
    Parameterization p_;
    Scheduler sched_;
};

// Inverse wrapper: recover the model output f = (u - beta x) / gamma.
class ModelOutputField final : public VelocityField {
public:
    ModelOutputField(FieldPtr velocity, Parameterization p, Scheduler sched)
        : VelocityField(velocity->dim()), vel_(std::move(velocity)), p_(p), sched_(std::move(sched)) {}

protected:
    void eval_impl(double t, std::span<const double> x, std::span<double> out) const override {
        SchedulerJet j = sched_.jet(t);
        ParamCoeffs c = coeffs(j);
        const int d = dim();
        Vec u(d);
        vel_->eval(t, x, u);
        for (int r = 0; r < d; ++r) out[r] = (u[r] - c.beta * x[r]) / c.gamma;
    }

    void derivatives_impl(double t, std::span<const double> x, FieldJet& out) const override {
        SchedulerJet j = sched_.jet(t);
        ParamCoeffs c = coeffs(j);
        double dbeta = 0.0, dgamma = 0.0;
        coeff_rates(j, c, dbeta, dgamma);

        const int d = dim();
        FieldJet uj;
        vel_->derivatives(t, x, uj);
        for (int r = 0; r < d; ++r) {
            double f = (uj.u[r] - c.beta * x[r]) / c.gamma;
            out.u[r] = f;
            out.du_dt[r] = (uj.du_dt[r] - dbeta * x[r] - dgamma * f) / c.gamma;
            for (int cc = 0; cc < d; ++cc) {
                double v = uj.du_dx[static_cast<std::size_t>(r) * d + cc];
                if (r == cc) v -= c.beta;
                out.du_dx[static_cast<std::size_t>(r) * d + cc] = v / c.gamma;
            }
        }
    }

private:
    ParamCoeffs coeffs(const SchedulerJet& j) const {
        SchedulerEval se{j.alpha, j.sigma, j.dalpha, j.dsigma};
        ParamCoeffs c = param_coeffs(p_, se);
        if (std::abs(c.gamma) < 1e-14)
            throw DomainError("model-output recovery: gamma coefficient vanishes");
        return c;
    }

    void coeff_rates(const SchedulerJet& j, const ParamCoeffs& c, double& dbeta,
                     double& dgamma) const {
        switch (p_) {
            case Parameterization::Velocity:
                dbeta = 0.0;
                dgamma = 0.0;
                break;
            case Parameterization::EpsPred:
                dbeta = (j.ddalpha * j.alpha - j.dalpha * j.dalpha) / (j.alpha * j.alpha);
                dgamma = j.ddsigma - j.dsigma * c.beta - j.sigma * dbeta;
                break;
            case Parameterization::XPred:
                dbeta = (j.ddsigma * j.sigma - j.dsigma * j.dsigma) / (j.sigma * j.sigma);
                dgamma = j.ddalpha - j.dalpha * c.beta - j.alpha * dbeta;
                break;
        }
    }

    FieldPtr vel_;
    Parameterization p_;
    Scheduler sched_;
};

class CfgField final : public VelocityField {
public:
    CfgField(FieldPtr cond, FieldPtr uncond, double w)
        : VelocityField(cond->dim()), cond_(std::move(cond)), uncond_(std::move(uncond)), w_(w) {
        if (cond_->dim() != uncond_->dim())
            throw ConfigError("guidance combination: conditional and unconditional dims differ");
    }

protected:
    void eval_impl(double t, std::span<const double> x, std::span<double> out) const override {
        const int d = dim();
        Vec uc(d);
        cond_->eval(t, x, out);
        uncond_->eval(t, x, uc);
        for (int r = 0; r < d; ++r) out[r] = (1.0 + w_) * out[r] - w_ * uc[r];
    }

    void derivatives_impl(double t, std::span<const double> x, FieldJet& out) const override {
        const int d = dim();
        FieldJet a, b;
        cond_->derivatives(t, x, a);
        uncond_->derivatives(t, x, b);
        for (int r = 0; r < d; ++r) {
            out.u[r] = (1.0 + w_) * a.u[r] - w_ * b.u[r];
            out.du_dt[r] = (1.0 + w_) * a.du_dt[r] - w_ * b.du_dt[r];
        }
        for (std::size_t i = 0; i < out.du_dx.size(); ++i)
            out.du_dx[i] = (1.0 + w_) * a.du_dx[i] - w_ * b.du_dx[i];
    }

private:
    FieldPtr cond_, uncond_;
    double w_;
};

class CallbackField final : public VelocityField {
public:
    CallbackField(int dim,
                  std::function<void(double, std::span<const double>, std::span<double>)> eval_fn,
                  std::function<void(double, std::span<const double>, FieldJet&)> jet_fn)
        : VelocityField(dim), eval_fn_(std::move(eval_fn)), jet_fn_(std::move(jet_fn)) {
        if (!eval_fn_) throw ConfigError("callback field: eval callback is required");
    }

protected:
    void eval_impl(double t, std::span<const double> x, std::span<double> out) const override {
        eval_fn_(t, x, out);
    }

    void derivatives_impl(double t, std::span<const double> x, FieldJet& out) const override {
        if (!jet_fn_) throw Error("callback field: no derivative callback provided");
        jet_fn_(t, x, out);
    }

private:
    std::function<void(double, std::span<const double>, std::span<double>)> eval_fn_;
    std::function<void(double, std::span<const double>, FieldJet&)> jet_fn_;
};

}  // namespace

void GaussianMixture::validate() const {
    const int K = components();
    if (K < 1) throw ConfigError("gaussian mixture: needs at least one component");
    const int d = dim();
    if (d < 1) throw ConfigError("gaussian mixture: dimension must be >= 1");
    if (static_cast<int>(stds.size()) != K || static_cast<int>(weights.size()) != K)
        throw ConfigError("gaussian mixture: stds/weights size must match the number of means");
    double wsum = 0.0;
    for (int k = 0; k < K; ++k) {
        if (static_cast<int>(means[k].size()) != d)
            throw ConfigError("gaussian mixture: all means must share one dimension");
        if (!std::isfinite(stds[k]) || stds[k] < 0.0)
            throw ConfigError("gaussian mixture: stds must be finite and >= 0");
        if (!std::isfinite(weights[k]) || weights[k] <= 0.0)
            throw ConfigError("gaussian mixture: weights must be finite and > 0");
        wsum += weights[k];
    }
    if (std::abs(wsum - 1.0) > 1e-9)
        throw ConfigError("gaussian mixture: weights must sum to 1");
}

GaussianMixture GaussianMixture::single(Vec mean, double std_dev) {
    GaussianMixture g;
    g.means.push_back(std::move(mean));
    g.stds = {std_dev};
    g.weights = {1.0};
    g.validate();
    return g;
}

Parameterization parameterization_from_string(const std::string& s) {
    if (s == "velocity") return Parameterization::Velocity;
    if (s == "eps_pred") return Parameterization::EpsPred;
    if (s == "x_pred") return Parameterization::XPred;
    throw ConfigError("unknown parameterization '" + s +
                      "' (expected velocity, eps_pred or x_pred)");
}

std::string to_string(Parameterization p) {
    switch (p) {
        case Parameterization::Velocity: return "velocity";
        case Parameterization::EpsPred: return "eps_pred";
        case Parameterization::XPred: return "x_pred";
    }
    return "?";
}

ParamCoeffs param_coeffs(Parameterization p, const SchedulerEval& se) {
    switch (p) {
        case Parameterization::Velocity:
            return {0.0, 1.0};
        case Parameterization::EpsPred: {
            if (std::abs(se.alpha) < 1e-14)
                throw DomainError("eps_pred coefficients: alpha vanishes at this time");
            double beta = se.dalpha / se.alpha;
            return {beta, (se.dsigma * se.alpha - se.sigma * se.dalpha) / se.alpha};
        }
        case Parameterization::XPred: {
            if (std::abs(se.sigma) < 1e-14)
                throw DomainError("x_pred coefficients: sigma vanishes at this time");
            double beta = se.dsigma / se.sigma;
            return {beta, (se.sigma * se.dalpha - se.dsigma * se.alpha) / se.sigma};
        }
    }
    throw ConfigError("unknown parameterization");
}

FieldPtr make_gmm_field(GaussianMixture gmm, Scheduler sched) {
    return std::make_shared<GmmField>(std::move(gmm), std::move(sched));
}

FieldPtr to_velocity(FieldPtr model, Parameterization p, Scheduler sched) {
    if (!model) throw ConfigError("to_velocity: null field");
    if (p == Parameterization::Velocity) return model;
    return std::make_shared<ParamVelocityField>(std::move(model), p, std::move(sched));
}

FieldPtr to_model_output(FieldPtr velocity, Parameterization p, Scheduler sched) {
    if (!velocity) throw ConfigError("to_model_output: null field");
    if (p == Parameterization::Velocity) return velocity;
    return std::make_shared<ModelOutputField>(std::move(velocity), p, std::move(sched));
}

FieldPtr cfg_combine(FieldPtr cond, FieldPtr uncond, double guidance_weight) {
    if (!cond || !uncond) throw ConfigError("guidance combination: null field");
    return std::make_shared<CfgField>(std::move(cond), std::move(uncond), guidance_weight);
}

FieldPtr make_callback_field(
    int dim, std::function<void(double, std::span<const double>, std::span<double>)> eval_fn,
    std::function<void(double, std::span<const double>, FieldJet&)> jet_fn) {
    return std::make_shared<CallbackField>(dim, std::move(eval_fn), std::move(jet_fn));
}

}  // namespace bns
