#include "bns/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <utility>

#include "bns/parallel.hpp"
#include "bns/transform.hpp"

namespace bns {
namespace {

std::size_t sz(int v) { return static_cast<std::size_t>(v); }

double pair_mse(const Vec& a, const Vec& b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double diff = a[i] - b[i];
        acc += diff * diff;
    }
    return acc / static_cast<double>(a.size());
}

double max_abs_diff(const Vec& a, const Vec& b) {
    double dev = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = std::abs(a[i] - b[i]);
        if (!(d <= dev)) dev = std::isfinite(d) ? d : std::numeric_limits<double>::infinity();
    }
    return dev;
}

std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += "\"\"";
        else out += c;
    }
    out += '"';
    return out;
}

}  // namespace

double psnr_db(std::span<const double> approx, std::span<const double> reference,
               double range) {
    if (approx.size() != reference.size() || approx.empty())
        throw ConfigError("psnr: inputs must be non-empty and the same length");
    if (!(range > 0.0) || !std::isfinite(range))
        throw ConfigError("psnr: range must be positive and finite");
    double acc = 0.0;
    for (std::size_t i = 0; i < approx.size(); ++i) {
        const double diff = approx[i] - reference[i];
        acc += diff * diff;
    }
    const double mse = acc / static_cast<double>(approx.size());
    if (!std::isfinite(mse)) throw ConfigError("psnr: non-finite input values");
    const double peak = range * range;
    if (mse < peak * 1e-20) return 200.0;
    return 10.0 * std::log10(peak / mse);
}

SweepSolver sweep_euler() {
    return SweepSolver{"euler", [](const VelocityField& u, const Vec& x0, int nfe) {
                           if (nfe < 1) throw ConfigError("euler: nfe must be >= 1");
                           return solve_rk(u, x0, TimeGrid::uniform(nfe),
                                           ButcherTableau::euler())
                               .final_state();
                       }};
}

SweepSolver sweep_midpoint() {
    return SweepSolver{"midpoint", [](const VelocityField& u, const Vec& x0, int nfe) {
                           if (nfe < 2 || nfe % 2 != 0)
                               throw ConfigError(
                                   "midpoint: nfe must be a positive multiple of 2");
                           return solve_rk(u, x0, TimeGrid::uniform(nfe / 2),
                                           ButcherTableau::midpoint())
                               .final_state();
                       }};
}

SweepSolver sweep_rk4() {
    return SweepSolver{"rk4", [](const VelocityField& u, const Vec& x0, int nfe) {
                           if (nfe < 4 || nfe % 4 != 0)
                               throw ConfigError("rk4: nfe must be a positive multiple of 4");
                           return solve_rk(u, x0, TimeGrid::uniform(nfe / 4),
                                           ButcherTableau::rk4())
                               .final_state();
                       }};
}

SweepSolver sweep_ab2() {
    return SweepSolver{"ab2", [](const VelocityField& u, const Vec& x0, int nfe) {
                           // One four-stage bootstrap interval, then one
                           // evaluation per interval: nfe = 4 + (k - 1).
                           const int k = nfe - 3;
                           if (k < 2)
                               throw ConfigError("ab2: nfe must be >= 5");
                           return solve_multistep(u, x0, TimeGrid::uniform(k),
                                                  MultistepCoeffs::ab(2))
                               .final_state();
                       }};
}

SweepSolver sweep_ddim(const Scheduler& sched) {
    auto transform = std::make_shared<StTransform>(
        StTransform::ei_kernel_affine(Parameterization::EpsPred, sched));
    struct Cache {
        std::mutex mutex;
        std::map<int, NSSolverParams> theta;
    };
    auto cache = std::make_shared<Cache>();
    SweepSolver s;
    s.name = "ddim";
    s.run = [transform, cache](const VelocityField& u, const Vec& x0, int nfe) {
        if (nfe < 1) throw ConfigError("ddim: nfe must be >= 1");
        NSSolverParams theta;
        {
            std::lock_guard<std::mutex> lock(cache->mutex);
            auto it = cache->theta.find(nfe);
            if (it == cache->theta.end())
                it = cache->theta
                         .emplace(nfe, embed_st_solver(EmbedMethod::euler(), *transform, nfe))
                         .first;
            theta = it->second;
        }
        return solve_ns(theta, u, x0).final_state();
    };
    return s;
}

SweepSolver sweep_ns(NSSolverParams theta, std::string name) {
    theta.validate(ValidationMode::Relaxed);
    const int n = theta.n();
    auto shared = std::make_shared<const NSSolverParams>(std::move(theta));
    SweepSolver s;
    s.name = std::move(name);
    s.run = [shared, n](const VelocityField& u, const Vec& x0, int nfe) {
        if (nfe != n)
            throw ConfigError("trained solver runs only at its own budget (n = " +
                              std::to_string(n) + ")");
        return solve_ns(*shared, u, x0).final_state();
    };
    return s;
}

std::string SweepReport::to_csv() const {
    std::string out = "solver,nfe,mean_psnr_db,rmse,note\n";
    for (const SweepCell& cell : cells) {
        out += csv_field(cell.solver);
        out += ',';
        out += std::to_string(cell.nfe);
        out += ',';
        if (cell.error.empty()) {
            out += format_double(cell.mean_psnr_db);
            out += ',';
            out += format_double(cell.rmse);
            out += ',';
        } else {
            out += ",,";
            out += csv_field(cell.error);
        }
        out += '\n';
    }
    return out;
}

std::string SweepReport::to_table() const {
    std::string out = "solver       nfe   mean_psnr_db          rmse      wall_ms\n";
    char line[160];
    for (const SweepCell& cell : cells) {
        if (cell.error.empty()) {
            std::snprintf(line, sizeof(line), "%-10s %5d %14.4f %13.6g %12.3f\n",
                          cell.solver.c_str(), cell.nfe, cell.mean_psnr_db, cell.rmse,
                          cell.wall_ms);
            out += line;
        } else {
            std::snprintf(line, sizeof(line), "%-10s %5d   failed: %s\n",
                          cell.solver.c_str(), cell.nfe, cell.error.c_str());
            out += line;
        }
    }
    return out;
}

SweepReport nfe_sweep(const VelocityField& u, const std::vector<TrajectoryPair>& dataset,
                      const std::vector<SweepSolver>& solvers, const std::vector<int>& nfes,
                      double psnr_range) {
    if (dataset.empty()) throw ConfigError("sweep: empty dataset");
    if (solvers.empty()) throw ConfigError("sweep: no solvers given");
    if (nfes.empty()) throw ConfigError("sweep: no evaluation budgets given");
    for (const TrajectoryPair& p : dataset)
        if (static_cast<int>(p.x0.size()) != u.dim() ||
            static_cast<int>(p.x1.size()) != u.dim())
            throw ConfigError("sweep: sample dimension does not match the field");
    const int count = static_cast<int>(dataset.size());
    SweepReport report;
    for (const SweepSolver& solver : solvers) {
        if (!solver.run) throw ConfigError("sweep: solver '" + solver.name + "' has no runner");
        for (int nfe : nfes) {
            SweepCell cell;
            cell.solver = solver.name;
            cell.nfe = nfe;
            const auto start = std::chrono::steady_clock::now();
            try {
                Vec psnrs(sz(count), 0.0);
                Vec mses(sz(count), 0.0);
                parallel_for(count, [&](int i) {
                    const Vec xhat = solver.run(u, dataset[sz(i)].x0, nfe);
                    mses[sz(i)] = pair_mse(xhat, dataset[sz(i)].x1);
                    psnrs[sz(i)] = psnr_db(xhat, dataset[sz(i)].x1, psnr_range);
                });
                double psnr_acc = 0.0;
                double mse_acc = 0.0;
                for (int i = 0; i < count; ++i) {
                    psnr_acc += psnrs[sz(i)];
                    mse_acc += mses[sz(i)];
                }
                cell.mean_psnr_db = psnr_acc / count;
                cell.rmse = std::sqrt(mse_acc / count);
            } catch (const Error& e) {
                cell.error = e.what();
            }
            cell.wall_ms = std::chrono::duration<double, std::milli>(
                               std::chrono::steady_clock::now() - start)
                               .count();
            report.cells.push_back(std::move(cell));
        }
    }
    return report;
}

FieldPtr random_smooth_field(int dim, std::uint64_t seed) {
    if (dim < 1) throw ConfigError("random field: dim must be >= 1");
    Rng rng(mix_seed(seed, 0x706f6c79ULL));
    const int d = dim;
    Vec a(sz(d)), b(sz(d)), c(sz(d)), q(sz(d)), w(sz(d));
    Vec lin(sz(d) * sz(d)), lin_t(sz(d) * sz(d));
    for (int i = 0; i < d; ++i) {
        a[sz(i)] = rng.uniform(-0.4, 0.4);
        b[sz(i)] = rng.uniform(-0.4, 0.4);
        c[sz(i)] = rng.uniform(-0.4, 0.4);
        q[sz(i)] = rng.uniform(-0.15, 0.15) / d;
        w[sz(i)] = rng.uniform(-1.0, 1.0) / std::sqrt(static_cast<double>(d));
        for (int j = 0; j < d; ++j) {
            lin[sz(i) * sz(d) + sz(j)] = rng.uniform(-0.5, 0.5) / d;
            lin_t[sz(i) * sz(d) + sz(j)] = rng.uniform(-0.5, 0.5) / d;
        }
    }
    auto eval_fn = [=](double t, std::span<const double> x, std::span<double> out) {
        double s = 0.0;
        for (int j = 0; j < d; ++j) s += w[sz(j)] * x[sz(j)];
        const double s2 = s * s;
        for (int i = 0; i < d; ++i) {
            double v = a[sz(i)] + b[sz(i)] * t + c[sz(i)] * t * t + q[sz(i)] * s2;
            for (int j = 0; j < d; ++j)
                v += (lin[sz(i) * sz(d) + sz(j)] + lin_t[sz(i) * sz(d) + sz(j)] * t) * x[sz(j)];
            out[sz(i)] = v;
        }
    };
    auto jet_fn = [=](double t, std::span<const double> x, FieldJet& out) {
        double s = 0.0;
        for (int j = 0; j < d; ++j) s += w[sz(j)] * x[sz(j)];
        const double s2 = s * s;
        for (int i = 0; i < d; ++i) {
            double v = a[sz(i)] + b[sz(i)] * t + c[sz(i)] * t * t + q[sz(i)] * s2;
            double vt = b[sz(i)] + 2.0 * c[sz(i)] * t;
            for (int j = 0; j < d; ++j) {
                const std::size_t slot = sz(i) * sz(d) + sz(j);
                v += (lin[slot] + lin_t[slot] * t) * x[sz(j)];
                vt += lin_t[slot] * x[sz(j)];
                out.du_dx[slot] = lin[slot] + lin_t[slot] * t + 2.0 * q[sz(i)] * s * w[sz(j)];
            }
            out.u[sz(i)] = v;
            out.du_dt[sz(i)] = vt;
        }
    };
    return make_callback_field(dim, eval_fn, jet_fn);
}

std::vector<FieldPtr> default_taxonomy_suite(int count, int dim, std::uint64_t seed) {
    if (count < 1) throw ConfigError("taxonomy suite: count must be >= 1");
    std::vector<FieldPtr> suite;
    suite.reserve(sz(count));
    for (int i = 0; i < count; ++i)
        suite.push_back(random_smooth_field(dim, mix_seed(seed, static_cast<std::uint64_t>(i))));
    return suite;
}

bool TaxonomyReport::all_pass() const {
    for (const TaxonomyCheck& row : rows)
        if (!row.pass) return false;
    return true;
}

std::string TaxonomyReport::to_csv() const {
    std::string out = "field,check,deviation,tol,pass\n";
    for (const TaxonomyCheck& row : rows) {
        out += csv_field(row.field);
        out += ',';
        out += csv_field(row.check);
        out += ',';
        out += format_double(row.deviation);
        out += ',';
        out += format_double(row.tol);
        out += ',';
        out += row.pass ? "1" : "0";
        out += '\n';
    }
    return out;
}

std::string TaxonomyReport::to_table() const {
    std::string out = "field      check                 deviation        tol   result\n";
    char line[160];
    for (const TaxonomyCheck& row : rows) {
        std::snprintf(line, sizeof(line), "%-10s %-20s %11.3e %10.1e   %s\n",
                      row.field.c_str(), row.check.c_str(), row.deviation, row.tol,
                      row.pass ? "pass" : "FAIL");
        out += line;
    }
    return out;
}

namespace {

double trace_deviation(const std::vector<Vec>& a, const std::vector<Vec>& b) {
    if (a.size() != b.size()) return std::numeric_limits<double>::infinity();
    double dev = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        dev = std::max(dev, max_abs_diff(a[i], b[i]));
    return dev;
}

Vec random_unit_grid(Rng& rng, int intervals) {
    Vec t(sz(intervals + 1), 0.0);
    double run = 0.0;
    for (int j = 1; j <= intervals; ++j) {
        run += rng.uniform(0.1, 1.0);
        t[sz(j)] = run;
    }
    for (int j = 1; j <= intervals; ++j) t[sz(j)] /= run;
    t[sz(intervals)] = 1.0;
    return t;
}

GeneralUpdateRule random_rule(Rng& rng, const Vec& times) {
    const int n = static_cast<int>(times.size()) - 1;
    GeneralUpdateRule rule;
    rule.c.resize(sz(n));
    rule.d.resize(sz(n));
    for (int k = 0; k < n; ++k) {
        rule.c[sz(k)].assign(sz(k + 1), 0.0);
        rule.d[sz(k)].assign(sz(k + 1), 0.0);
        const double h = times[sz(k + 1)] - times[sz(k)];
        // Start from "carry the latest point" and perturb, so states stay
        // bounded while exercising every coefficient.
        rule.c[sz(k)][sz(k)] = 1.0;
        for (int j = 0; j <= k; ++j) {
            rule.c[sz(k)][sz(j)] += rng.uniform(-0.3, 0.3) / (k + 1);
            rule.d[sz(k)][sz(j)] = rng.uniform(-0.5, 0.5) * h;
        }
    }
    return rule;
}

Vec random_state(Rng& rng, int dim) {
    Vec x(sz(dim));
    rng.normal_fill(x);
    return x;
}

/// Knot indices inside an embedded solver trace for a method with m stage
/// evaluations per interval (multistep methods bootstrap the first m-1
/// intervals with four-stage steps).
std::vector<std::size_t> knot_indices(const EmbedMethod& method, int intervals) {
    std::vector<std::size_t> idx(sz(intervals + 1));
    if (method.kind == EmbedMethod::Kind::Multistep) {
        const int m = method.coeffs.m;
        for (int j = 0; j <= intervals; ++j)
            idx[sz(j)] = j <= m - 1 ? sz(4 * j) : sz(4 * (m - 1) + (j - (m - 1)));
    } else {
        const int m = method.stage_count();
        for (int j = 0; j <= intervals; ++j) idx[sz(j)] = sz(j) * sz(m);
    }
    return idx;
}

ButcherTableau native_tableau(const EmbedMethod& method) {
    switch (method.kind) {
        case EmbedMethod::Kind::Euler: return ButcherTableau::euler();
        case EmbedMethod::Kind::Midpoint: return ButcherTableau::midpoint();
        case EmbedMethod::Kind::Rk4: return ButcherTableau::rk4();
        default: return method.tableau;
    }
}

double knot_deviation(const SolveTrace& native, const SolveTrace& embedded,
                      const std::vector<std::size_t>& idx) {
    double dev = 0.0;
    for (std::size_t j = 0; j < idx.size(); ++j) {
        if (j >= native.states.size() || idx[j] >= embedded.states.size())
            return std::numeric_limits<double>::infinity();
        dev = std::max(dev, max_abs_diff(native.states[j], embedded.states[idx[j]]));
    }
    return dev;
}

}  // namespace

TaxonomyReport taxonomy_check(const std::vector<FieldPtr>& suite,
                              const TaxonomyOptions& opts) {
    if (suite.empty()) throw ConfigError("taxonomy: empty field suite");
    for (const FieldPtr& f : suite)
        if (!f) throw ConfigError("taxonomy: null field in suite");
    if (!(opts.tol > 0.0) || !std::isfinite(opts.tol))
        throw ConfigError("taxonomy: tol must be positive and finite");
    if (opts.random_rules < 1) throw ConfigError("taxonomy: random_rules must be >= 1");

    TaxonomyReport report;
    Rng rng(mix_seed(opts.seed, 0x7461786fULL));
    const int suite_size = static_cast<int>(suite.size());
    auto field_name = [](int i) { return "poly-" + std::to_string(i); };

    // Random general update rules must survive canonicalization exactly.
    for (int r = 0; r < opts.random_rules; ++r) {
        const int fi = r % suite_size;
        const VelocityField& u = *suite[sz(fi)];
        const Vec times = random_unit_grid(rng, 6);
        const TimeGrid grid(times, GridRule::StrictUnit);
        const GeneralUpdateRule rule = random_rule(rng, times);
        const Vec x0 = random_state(rng, u.dim());
        const SolveTrace direct = run_general_rule(rule, grid, u, x0);
        const SolveTrace canon = solve_ns(canonicalize(rule, grid), u, x0);
        const double dev = trace_deviation(direct.states, canon.states);
        report.rows.push_back(
            TaxonomyCheck{field_name(fi), "canonicalize", dev, opts.tol, dev <= opts.tol, false});
    }

    // Embedded classical solvers must reproduce their native runs at the knots.
    struct EmbedCase {
        EmbedMethod method;
        const char* check;
        int nfe;
    };
    const EmbedCase cases[] = {
        {EmbedMethod::euler(), "embed-euler", 8},
        {EmbedMethod::midpoint(), "embed-midpoint", 8},
        {EmbedMethod::rk4(), "embed-rk4", 8},
        {EmbedMethod::multistep(MultistepCoeffs::ab(2)), "embed-ab2", 8},
    };
    for (int fi = 0; fi < suite_size; ++fi) {
        const VelocityField& u = *suite[sz(fi)];
        for (const EmbedCase& ec : cases) {
            const Vec x0 = random_state(rng, u.dim());
            const int intervals = ec.method.intervals_for_nfe(ec.nfe);
            const TimeGrid grid = TimeGrid::uniform(intervals);
            SolveTrace native = ec.method.kind == EmbedMethod::Kind::Multistep
                                    ? solve_multistep(u, x0, grid, ec.method.coeffs)
                                    : solve_rk(u, x0, grid, native_tableau(ec.method));
            const NSSolverParams theta = embed_generic(ec.method, ec.nfe);
            const SolveTrace embedded = solve_ns(theta, u, x0);
            const double dev =
                knot_deviation(native, embedded, knot_indices(ec.method, intervals));
            report.rows.push_back(
                TaxonomyCheck{field_name(fi), ec.check, dev, opts.tol, dev <= opts.tol, false});
        }
    }

    // Kernel-affine exponential-integrator embedding vs the closed-form
    // alpha/sigma-ratio update on a reference scheduler.
    const Scheduler vp = Scheduler::vp();
    const StTransform ei = StTransform::ei_kernel_affine(Parameterization::EpsPred, vp);
    const int ei_steps = 8;
    const NSSolverParams ei_theta =
        embed_st_solver(EmbedMethod::euler(), ei, ei_steps);
    for (int fi = 0; fi < suite_size; ++fi) {
        const VelocityField& u = *suite[sz(fi)];
        const Vec x0 = random_state(rng, u.dim());
        const SolveTrace embedded = solve_ns(ei_theta, u, x0);
        const Vec& times = ei_theta.grid.times();
        std::vector<Vec> reference(times.size());
        reference[0] = x0;
        for (int i = 0; i < ei_steps; ++i) {
            const SchedulerEval lo = vp.eval(times[sz(i)]);
            const SchedulerEval hi = vp.eval(times[sz(i + 1)]);
            const Vec ui = u.eval_vec(times[sz(i)], reference[sz(i)]);
            const double drift = lo.dalpha / lo.alpha;
            const double gain = lo.dsigma - lo.sigma * drift;
            const double ratio = hi.alpha / lo.alpha;
            const double noise = hi.sigma - lo.sigma * ratio;
            Vec next(reference[sz(i)].size());
            for (std::size_t c = 0; c < next.size(); ++c) {
                const double eps = (ui[c] - drift * reference[sz(i)][c]) / gain;
                next[c] = ratio * reference[sz(i)][c] + noise * eps;
            }
            reference[sz(i + 1)] = std::move(next);
        }
        const double dev = trace_deviation(reference, embedded.states);
        report.rows.push_back(
            TaxonomyCheck{field_name(fi), "ei-closed-form", dev, opts.tol, dev <= opts.tol, false});
    }

    // The tolerance must actually catch a corrupted coefficient.
    if (opts.include_sensitivity) {
        const VelocityField& u = *suite[0];
        const Vec x0 = random_state(rng, u.dim());
        NSSolverParams theta = embed_generic(EmbedMethod::midpoint(), 8);
        const SolveTrace clean = solve_ns(theta, u, x0);
        theta.steps[sz(theta.n() / 2)].b[0] += 1e-3;
        const SolveTrace dirty = solve_ns(theta, u, x0);
        const double dev = trace_deviation(clean.states, dirty.states);
        report.rows.push_back(
            TaxonomyCheck{field_name(0), "sensitivity", dev, opts.tol, dev > opts.tol, true});
    }
    return report;
}

TaxonomyReport taxonomy_check(const std::vector<FieldPtr>& suite, double tol) {
    TaxonomyOptions opts;
    opts.tol = tol;
    return taxonomy_check(suite, opts);
}

}  // namespace bns
