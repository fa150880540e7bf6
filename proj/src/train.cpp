#include "bns/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <utility>

#include "bns/eval.hpp"
#include "bns/parallel.hpp"
#include "bns/transform.hpp"

namespace bns {
namespace {

constexpr double kMseFloor = 1e-20;
constexpr double kMseCap = 1e12;

std::size_t sz(int v) { return static_cast<std::size_t>(v); }

double dot(const Vec& a, const Vec& b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    return acc;
}

double pair_mse(const Vec& a, const Vec& b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double diff = a[i] - b[i];
        acc += diff * diff;
    }
    return acc / static_cast<double>(a.size());
}

void check_batch(const VelocityField& u, const std::vector<TrajectoryPair>& batch,
                 const char* who) {
    if (batch.empty()) throw ConfigError(std::string(who) + ": empty batch");
    for (const TrajectoryPair& p : batch) {
        if (static_cast<int>(p.x0.size()) != u.dim() ||
            static_cast<int>(p.x1.size()) != u.dim())
            throw ConfigError(std::string(who) +
                              ": sample dimension does not match the field");
        for (double v : p.x0)
            if (!std::isfinite(v)) throw ConfigError(std::string(who) + ": non-finite x0");
        for (double v : p.x1)
            if (!std::isfinite(v)) throw ConfigError(std::string(who) + ": non-finite x1");
    }
}

struct SampleResult {
    double value = 0.0;
    bool diverged = false;
};

/// Forward pass storing per-point jets, then reverse accumulation:
/// seed g_n = -(1/mse)(2/d)(x_n - x1); descending over points j,
///   ubar_j = sum_{i>=j} (b_i)_j g_{i+1},   g_j = (du/dx)_j^T ubar_j,
///   dl/d(b_i)_j = u_j . g_{i+1},  dl/da_i = x_0 . g_{i+1},
///   dl/dt_j = ubar_j . (du/dt)_j,
/// and interior-time gradients are pushed through the raw-time Jacobian.
SampleResult sample_grad(const NSSolverParams& theta, const Vec& time_jac,
                         const VelocityField& u, const TrajectoryPair& pair, Vec& grad) {
    const int n = theta.n();
    const int d = u.dim();
    const Vec& times = theta.grid.times();
    std::vector<Vec> states(sz(n + 1));
    std::vector<FieldJet> jets(sz(n));
    states[0] = pair.x0;
    SampleResult res;
    try {
        for (int i = 0; i < n; ++i) {
            jets[sz(i)].resize(d);
            u.derivatives(times[sz(i)], states[sz(i)], jets[sz(i)]);
            Vec next(sz(d), 0.0);
            axpy(theta.steps[sz(i)].a, pair.x0, next);
            for (int j = 0; j <= i; ++j)
                axpy(theta.steps[sz(i)].b[sz(j)], jets[sz(j)].u, next);
            for (double v : next)
                if (!std::isfinite(v) || std::abs(v) > kDivergenceLimit)
                    throw DivergenceError("solver state diverged", i);
            states[sz(i + 1)] = std::move(next);
        }
    } catch (const DivergenceError&) {
        res.value = -std::log(kMseCap);
        res.diverged = true;
        return res;
    }
    const double mse = pair_mse(states[sz(n)], pair.x1);
    if (!std::isfinite(mse)) {
        res.value = -std::log(kMseCap);
        res.diverged = true;
        return res;
    }
    res.value = -std::log(std::clamp(mse, kMseFloor, kMseCap));
    if (!(mse > kMseFloor && mse < kMseCap)) return res;

    const int m = n - 1;
    const int off_a = m;
    const int off_b = off_a + n;
    auto b_slot = [&](int i, int j) { return sz(off_b + i * (i + 1) / 2 + j); };

    std::vector<Vec> g(sz(n + 1));
    g[sz(n)].assign(sz(d), 0.0);
    const double seed_scale = -(1.0 / mse) * (2.0 / d);
    for (int c = 0; c < d; ++c)
        g[sz(n)][sz(c)] = seed_scale * (states[sz(n)][sz(c)] - pair.x1[sz(c)]);

    Vec grad_t(sz(n), 0.0);
    Vec ubar(sz(d));
    for (int j = n - 1; j >= 0; --j) {
        std::fill(ubar.begin(), ubar.end(), 0.0);
        for (int i = j; i < n; ++i) {
            axpy(theta.steps[sz(i)].b[sz(j)], g[sz(i + 1)], ubar);
            grad[b_slot(i, j)] += dot(jets[sz(j)].u, g[sz(i + 1)]);
        }
        grad_t[sz(j)] = dot(ubar, jets[sz(j)].du_dt);
        if (j > 0) {
            g[sz(j)].assign(sz(d), 0.0);
            for (int r = 0; r < d; ++r) {
                const double w = ubar[sz(r)];
                if (w == 0.0) continue;
                const double* row = jets[sz(j)].du_dx.data() + static_cast<std::size_t>(r) * d;
                for (int c = 0; c < d; ++c) g[sz(j)][sz(c)] += w * row[c];
            }
        }
    }
    for (int i = 0; i < n; ++i) grad[sz(off_a + i)] += dot(pair.x0, g[sz(i + 1)]);
    for (int j = 1; j <= m; ++j)
        for (int k = 0; k < m; ++k)
            grad[sz(k)] += grad_t[sz(j)] * time_jac[sz((j - 1) * m + k)];
    return res;
}

}  // namespace

void GaussianSourceSpec::validate() const {
    if (dim < 1) throw ConfigError("source: dim must be >= 1");
    if (!(std > 0.0) || !std::isfinite(std))
        throw ConfigError("source: std must be positive and finite");
}

std::vector<TrajectoryPair> generate_dataset(const VelocityField& u,
                                             const GaussianSourceSpec& source, int count,
                                             double rtol, std::uint64_t seed) {
    source.validate();
    if (count < 1) throw ConfigError("dataset: count must be >= 1");
    if (source.dim != u.dim())
        throw ConfigError("dataset: source dimension does not match the field");
    if (!(rtol > 0.0) || !std::isfinite(rtol))
        throw ConfigError("dataset: rtol must be positive and finite");
    std::vector<TrajectoryPair> out(sz(count));
    parallel_for(count, [&](int i) {
        Rng rng(mix_seed(seed, static_cast<std::uint64_t>(i)));
        Vec x0(sz(source.dim));
        rng.normal_fill(x0);
        for (double& v : x0) v *= source.std;
        try {
            AdaptiveResult res = solve_adaptive_rk45(u, x0, rtol, rtol);
            out[sz(i)] = TrajectoryPair{std::move(x0), std::move(res.x)};
        } catch (const DivergenceError& e) {
            throw DivergenceError("dataset sample " + std::to_string(i) + ": " + e.what(), i);
        } catch (const StiffnessError& e) {
            throw DivergenceError("dataset sample " + std::to_string(i) + ": " + e.what(), i);
        }
    });
    return out;
}

double loss(const NSSolverParams& theta, const VelocityField& u,
            const std::vector<TrajectoryPair>& batch) {
    check_batch(u, batch, "loss");
    theta.validate(ValidationMode::Relaxed);
    const int count = static_cast<int>(batch.size());
    Vec values(sz(count), 0.0);
    parallel_for(count, [&](int i) {
        SolveTrace trace = solve_ns(theta, u, batch[sz(i)].x0);
        const double mse = pair_mse(trace.final_state(), batch[sz(i)].x1);
        if (!std::isfinite(mse))
            throw DivergenceError("loss: non-finite solver output", i);
        values[sz(i)] = -std::log(std::clamp(mse, kMseFloor, kMseCap));
    });
    double acc = 0.0;
    for (double v : values) acc += v;
    return acc / count;
}

LossGrad grad_loss(const RawNSParams& theta, const VelocityField& u,
                   const std::vector<TrajectoryPair>& batch) {
    theta.validate();
    check_batch(u, batch, "grad_loss");
    const NSSolverParams params = raw_to_constrained(theta);
    const Vec time_jac = raw_time_jacobian(theta);
    const int count = static_cast<int>(batch.size());
    const std::size_t psize = theta.values.size();
    std::vector<Vec> grads(sz(count));
    Vec values(sz(count), 0.0);
    std::vector<unsigned char> diverged(sz(count), 0);
    parallel_for(count, [&](int i) {
        grads[sz(i)].assign(psize, 0.0);
        SampleResult r = sample_grad(params, time_jac, u, batch[sz(i)], grads[sz(i)]);
        values[sz(i)] = r.value;
        diverged[sz(i)] = r.diverged ? 1 : 0;
    });
    LossGrad out;
    out.grad.assign(psize, 0.0);
    const double inv = 1.0 / count;
    for (int i = 0; i < count; ++i) {
        out.value += values[sz(i)] * inv;
        axpy(inv, grads[sz(i)], out.grad);
        out.divergent += diverged[sz(i)];
    }
    return out;
}

void TrainConfig::validate() const {
    if (n_nfe < 1) throw ConfigError("train: n_nfe must be >= 1");
    if (init != "euler" && init != "midpoint" && init != "rk4" && init != "ab2" &&
        init != "ddim")
        throw ConfigError("train: unknown init '" + init +
                          "' (expected euler, midpoint, rk4, ab2 or ddim)");
    if (optimizer != "adam" && optimizer != "sgd")
        throw ConfigError("train: unknown optimizer '" + optimizer + "'");
    if (!(sigma0 > 0.0) || !std::isfinite(sigma0))
        throw ConfigError("train: sigma0 must be positive and finite");
    if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("train: lr must be positive");
    if (!(lr_end >= 0.0) || !std::isfinite(lr_end))
        throw ConfigError("train: lr_end must be >= 0");
    if (!(lr_power > 0.0) || !std::isfinite(lr_power))
        throw ConfigError("train: lr_power must be positive");
    if (batch < 1) throw ConfigError("train: batch must be >= 1");
    if (iters < 0) throw ConfigError("train: iters must be >= 0");
    if (val_every < 1) throw ConfigError("train: val_every must be >= 1");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
        throw ConfigError("train: adam betas must lie in [0, 1)");
    if (!(adam_eps > 0.0)) throw ConfigError("train: adam_eps must be positive");
    if (!(psnr_range > 0.0) || !std::isfinite(psnr_range))
        throw ConfigError("train: psnr_range must be positive");
}

std::string TrainResult::history_csv() const {
    std::string out = "iter,train_loss,val_psnr\n";
    for (const TrainHistoryRow& row : history) {
        out += std::to_string(row.iter);
        out += ',';
        if (row.has_train_loss) out += format_double(row.train_loss);
        out += ',';
        if (row.has_val_psnr) out += format_double(row.val_psnr);
        out += '\n';
    }
    return out;
}

namespace {

/// Embedded solvers park stage points at repeated knot times and mapped time
/// grids may start/end a hair inside (0, 1); the raw parameterization needs a
/// strictly increasing unit grid. Nudge times apart by the smallest gap that
/// survives the round trip while leaving the run numerically unchanged.
NSSolverParams snap_strict(NSSolverParams theta) {
    Vec t = theta.grid.times();
    const std::size_t last = t.size() - 1;
    t[0] = 0.0;
    t[last] = 1.0;
    for (std::size_t j = 1; j < last; ++j) t[j] = std::max(t[j], t[j - 1] + kTimeEps);
    for (std::size_t j = last; j-- > 1;) t[j] = std::min(t[j], t[j + 1] - kTimeEps);
    NSSolverParams snapped;
    snapped.grid = TimeGrid(std::move(t), GridRule::StrictUnit);
    snapped.steps = std::move(theta.steps);
    return snapped;
}

NSSolverParams initial_theta(const TrainConfig& cfg, const Scheduler& sched) {
    if (cfg.init == "ddim") {
        if (cfg.sigma0 != 1.0)
            throw ConfigError("train: ddim init requires sigma0 == 1");
        return embed_st_solver(
            EmbedMethod::euler(),
            StTransform::ei_kernel_affine(Parameterization::EpsPred, sched), cfg.n_nfe);
    }
    EmbedMethod method;
    if (cfg.init == "euler")
        method = EmbedMethod::euler();
    else if (cfg.init == "midpoint")
        method = EmbedMethod::midpoint();
    else if (cfg.init == "rk4")
        method = EmbedMethod::rk4();
    else
        method = EmbedMethod::multistep(MultistepCoeffs::ab(2));
    return embed_generic(method, cfg.n_nfe);
}

double validation_psnr(const NSSolverParams& theta, const VelocityField& ut,
                       const std::vector<TrajectoryPair>& val, double s1, double range) {
    const int count = static_cast<int>(val.size());
    Vec scores(sz(count), 0.0);
    parallel_for(count, [&](int i) {
        double score = 0.0;
        try {
            SolveTrace trace = solve_ns(theta, ut, val[sz(i)].x0);
            Vec xhat = trace.final_state();
            for (double& v : xhat) v /= s1;
            score = psnr_db(xhat, val[sz(i)].x1, range);
        } catch (const DivergenceError&) {
            score = 10.0 * std::log10(range * range / kMseCap);
        }
        scores[sz(i)] = score;
    });
    double acc = 0.0;
    for (double v : scores) acc += v;
    return acc / count;
}

}  // namespace

TrainResult train_bns(FieldPtr u, const Scheduler& sched,
                      const std::vector<TrajectoryPair>& train_set,
                      const std::vector<TrajectoryPair>& val_set, const TrainConfig& cfg) {
    cfg.validate();
    if (!u) throw ConfigError("train: null field");
    check_batch(*u, train_set, "train");
    check_batch(*u, val_set, "train (validation set)");

    const StTransform T = precondition_transform(sched, cfg.sigma0);
    const FieldPtr ut = precondition_field(u, sched, cfg.sigma0);
    const double s0 = T.scale(0.0);
    const double s1 = T.scale_end();

    std::vector<TrajectoryPair> train_t(train_set.size());
    for (std::size_t i = 0; i < train_set.size(); ++i) {
        train_t[i] = train_set[i];
        for (double& v : train_t[i].x0) v *= s0;
        for (double& v : train_t[i].x1) v *= s1;
    }
    // Validation keeps the original x1: scores compare the rescaled solver
    // output against the untouched target.
    std::vector<TrajectoryPair> val_t(val_set.size());
    for (std::size_t i = 0; i < val_set.size(); ++i) {
        val_t[i] = val_set[i];
        for (double& v : val_t[i].x0) v *= s0;
    }

    RawNSParams raw = constrained_to_raw(snap_strict(initial_theta(cfg, sched)));

    TrainResult result;
    double best = validation_psnr(raw_to_constrained(raw), *ut, val_t, s1, cfg.psnr_range);
    RawNSParams best_raw = raw;
    result.history.push_back(TrainHistoryRow{0, 0.0, false, best, true});

    const std::size_t psize = raw.values.size();
    Vec m_state(psize, 0.0);
    Vec v_state(psize, 0.0);
    Rng shuffle_rng(mix_seed(cfg.seed, 0x7261696eULL));
    std::vector<std::size_t> perm(train_t.size());
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::size_t cursor = perm.size();
    long epoch_seen = 0;
    long epoch_div = 0;
    std::vector<TrajectoryPair> batch;
    batch.reserve(sz(cfg.batch));

    for (int iter = 1; iter <= cfg.iters; ++iter) {
        if (cursor >= perm.size()) {
            if (epoch_seen > 0 && epoch_div == epoch_seen)
                throw DivergenceError(
                    "train: every sample diverged in the epoch ending at iteration " +
                        std::to_string(iter - 1),
                    iter - 1);
            shuffle_rng.shuffle(perm);
            cursor = 0;
            epoch_seen = 0;
            epoch_div = 0;
        }
        const std::size_t take =
            std::min<std::size_t>(sz(cfg.batch), perm.size() - cursor);
        batch.clear();
        for (std::size_t b = 0; b < take; ++b) batch.push_back(train_t[perm[cursor + b]]);
        cursor += take;

        const LossGrad lg = grad_loss(raw, *ut, batch);
        epoch_seen += static_cast<long>(take);
        epoch_div += lg.divergent;

        const double frac = static_cast<double>(iter) / cfg.iters;
        const double lr_t =
            (cfg.lr - cfg.lr_end) * std::pow(std::max(0.0, 1.0 - frac), cfg.lr_power) +
            cfg.lr_end;
        if (cfg.optimizer == "adam") {
            const double bc1 = 1.0 - std::pow(cfg.beta1, iter);
            const double bc2 = 1.0 - std::pow(cfg.beta2, iter);
            for (std::size_t i = 0; i < psize; ++i) {
                const double gf = -lg.grad[i];
                m_state[i] = cfg.beta1 * m_state[i] + (1.0 - cfg.beta1) * gf;
                v_state[i] = cfg.beta2 * v_state[i] + (1.0 - cfg.beta2) * gf * gf;
                const double mh = m_state[i] / bc1;
                const double vh = v_state[i] / bc2;
                raw.values[i] -= lr_t * mh / (std::sqrt(vh) + cfg.adam_eps);
            }
        } else {
            for (std::size_t i = 0; i < psize; ++i) raw.values[i] += lr_t * lg.grad[i];
        }

        TrainHistoryRow row{iter, lg.value, true, 0.0, false};
        if (iter % cfg.val_every == 0 || iter == cfg.iters) {
            const double score =
                validation_psnr(raw_to_constrained(raw), *ut, val_t, s1, cfg.psnr_range);
            row.val_psnr = score;
            row.has_val_psnr = true;
            if (score > best) {
                best = score;
                best_raw = raw;
            }
        }
        result.history.push_back(row);
    }

    result.theta_best = raw_to_constrained(best_raw);
    result.best_val_psnr = best;
    return result;
}

}  // namespace bns
