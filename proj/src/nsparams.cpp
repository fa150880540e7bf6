#include "bns/nsparams.hpp"

#include <algorithm>
#include <cmath>

#include "json.hpp"

namespace bns {
namespace {

std::size_t sz(int i) { return static_cast<std::size_t>(i); }

void check_grid_times(const Vec& t, ValidationMode mode) {
    for (double v : t)
        if (!std::isfinite(v)) throw ConfigError("theta grid: non-finite time");
    for (std::size_t i = 1; i < t.size(); ++i) {
        bool ok = mode == ValidationMode::Strict ? t[i] > t[i - 1] : t[i] >= t[i - 1];
        if (!ok)
            throw ConfigError(mode == ValidationMode::Strict
                                  ? "theta grid: times must be strictly increasing"
                                  : "theta grid: times must be non-decreasing");
    }
    if (mode == ValidationMode::Strict && (t.front() != 0.0 || t.back() != 1.0))
        throw ConfigError("theta grid: endpoints must be exactly 0 and 1");
}

// Unrolled solver in update-rule form plus the times of every trajectory
// point (knots and stage points alike).
struct UnrolledRule {
    GeneralUpdateRule rule;
    Vec point_times;
};

void append_row(UnrolledRule& u, const Vec& c_row, const Vec& d_row, double next_time) {
    u.rule.c.push_back(c_row);
    u.rule.d.push_back(d_row);
    u.point_times.push_back(next_time);
}

UnrolledRule unroll_rk(const ButcherTableau& tab, const TimeGrid& knots) {
    tab.validate();
    if (tab.c[0] != 0.0 || !tab.a[0].empty())
        throw ConfigError("embedding: tableau must evaluate its first stage at the interval start");
    const int m = tab.stages();
    const int k = knots.intervals();
    UnrolledRule u;
    u.point_times.push_back(knots[0]);
    for (int i = 0; i < k; ++i) {
        const double t = knots[i], h = knots[i + 1] - t;
        const int base = i * m;
        for (int s = 2; s <= m; ++s) {
            // Stage s state: anchor knot plus accumulated stage velocities.
            int pt = base + s - 1;
            Vec c_row(sz(pt), 0.0), d_row(sz(pt), 0.0);
            c_row[sz(base)] = 1.0;
            for (int l = 1; l < s; ++l)
                d_row[sz(base + l - 1)] = h * tab.a[sz(s - 1)][sz(l - 1)];
            append_row(u, c_row, d_row, t + tab.c[sz(s - 1)] * h);
        }
        int pt = base + m;
        Vec c_row(sz(pt), 0.0), d_row(sz(pt), 0.0);
        c_row[sz(base)] = 1.0;
        for (int l = 1; l <= m; ++l) d_row[sz(base + l - 1)] = h * tab.b[sz(l - 1)];
        append_row(u, c_row, d_row, knots[i + 1]);
    }
    return u;
}

UnrolledRule unroll_multistep(const MultistepCoeffs& coeffs, const TimeGrid& knots) {
    coeffs.validate();
    const int m = coeffs.m;
    const int k = knots.intervals();
    if (k < m)
        throw ConfigError("embedding: multistep needs at least m grid intervals");
    const bool uniform = grid_is_uniform(knots);
    const ButcherTableau boot = ButcherTableau::rk4();

    // Bootstrap intervals are unrolled as RK4; knot j sits at point 4j during
    // bootstrap, then knots advance one point per interval.
    auto knot_pt = [&](int j) { return j <= m - 1 ? 4 * j : 4 * (m - 1) + (j - (m - 1)); };

    UnrolledRule u;
    if (m > 1) {
        TimeGrid boot_knots(
            Vec(knots.times().begin(), knots.times().begin() + m), GridRule::Strict);
        u = unroll_rk(boot, boot_knots);
    } else {
        u.point_times.push_back(knots[0]);
    }
    for (int i = m - 1; i < k; ++i) {
        const double t = knots[i], h = knots[i + 1] - t;
        int pt = knot_pt(i + 1);
        Vec c_row(sz(pt), 0.0), d_row(sz(pt), 0.0);
        Vec bw;
        if (uniform) {
            bw = coeffs.b;
        } else {
            Vec ht(sz(m));
            for (int j = 0; j < m; ++j) ht[sz(j)] = knots[i - m + 1 + j];
            bw = multistep_interval_weights(ht, t, knots[i + 1]);
        }
        for (int j = 0; j < m; ++j) {
            int p = knot_pt(i - m + 1 + j);
            c_row[sz(p)] += coeffs.a[sz(j)];
            d_row[sz(p)] += h * bw[sz(j)];
        }
        append_row(u, c_row, d_row, knots[i + 1]);
    }
    return u;
}

UnrolledRule unroll_method(const EmbedMethod& method, const TimeGrid& knots) {
    switch (method.kind) {
        case EmbedMethod::Kind::Euler:
            return unroll_rk(ButcherTableau::euler(), knots);
        case EmbedMethod::Kind::Midpoint:
            return unroll_rk(ButcherTableau::midpoint(), knots);
        case EmbedMethod::Kind::Rk4:
            return unroll_rk(ButcherTableau::rk4(), knots);
        case EmbedMethod::Kind::Tableau:
            return unroll_rk(method.tableau, knots);
        case EmbedMethod::Kind::Multistep:
            return unroll_multistep(method.coeffs, knots);
    }
    throw ConfigError("embedding: unknown method kind");
}

TimeGrid default_knots(const EmbedMethod& method, int n_nfe, double lo, double hi) {
    return TimeGrid::uniform_range(method.intervals_for_nfe(n_nfe), lo, hi);
}

}  // namespace

void NSSolverParams::validate(ValidationMode mode) const {
    const int nn = n();
    if (nn < 1) throw ConfigError("theta: need at least one step");
    if (grid.points() != nn + 1)
        throw ConfigError("theta: grid must have n+1 times, got " +
                          std::to_string(grid.points()) + " for n = " + std::to_string(nn));
    check_grid_times(grid.times(), mode);
    for (int i = 0; i < nn; ++i) {
        const Step& st = steps[sz(i)];
        if (st.b.size() != sz(i) + 1)
            throw ConfigError("theta: step " + std::to_string(i) + " needs b of length " +
                              std::to_string(i + 1));
        if (!std::isfinite(st.a)) throw ConfigError("theta: non-finite a coefficient");
        for (double v : st.b)
            if (!std::isfinite(v)) throw ConfigError("theta: non-finite b coefficient");
    }
}

std::string NSSolverParams::to_json() const {
    std::string out = "{\"n\":" + std::to_string(n()) + ",\"grid\":[";
    for (int i = 0; i < grid.points(); ++i) {
        if (i) out += ',';
        out += format_double(grid[i]);
    }
    out += "],\"steps\":[";
    for (int i = 0; i < n(); ++i) {
        if (i) out += ',';
        out += "{\"a\":" + format_double(steps[sz(i)].a) + ",\"b\":[";
        for (std::size_t j = 0; j < steps[sz(i)].b.size(); ++j) {
            if (j) out += ',';
            out += format_double(steps[sz(i)].b[j]);
        }
        out += "]}";
    }
    out += "]}";
    return out;
}

NSSolverParams NSSolverParams::from_json(const std::string& text) {
    namespace nj = nlohmann;
    NSSolverParams p;
    try {
        nj::json j = nj::json::parse(text);
        int n = j.at("n").get<int>();
        Vec times = j.at("grid").get<Vec>();
        p.grid = TimeGrid(std::move(times), GridRule::NonDecreasing);
        for (const auto& step : j.at("steps")) {
            NSSolverParams::Step st;
            st.a = step.at("a").get<double>();
            st.b = step.at("b").get<Vec>();
            p.steps.push_back(std::move(st));
        }
        if (p.n() != n)
            throw ConfigError("theta json: n = " + std::to_string(n) + " but " +
                              std::to_string(p.n()) + " steps given");
    } catch (const nj::json::exception& e) {
        throw ConfigError(std::string("theta json: ") + e.what());
    }
    p.validate(ValidationMode::Relaxed);
    return p;
}

int param_count(int n) {
    if (n < 1) throw ConfigError("param_count: n must be >= 1");
    return n * (n + 5) / 2 + 1;
}

void GeneralUpdateRule::validate() const {
    if (c.size() != d.size()) throw ConfigError("update rule: c and d row counts differ");
    for (std::size_t k = 0; k < c.size(); ++k) {
        if (c[k].size() != k + 1 || d[k].size() != k + 1)
            throw ConfigError("update rule: row " + std::to_string(k) + " must have length " +
                              std::to_string(k + 1));
        for (double v : c[k])
            if (!std::isfinite(v)) throw ConfigError("update rule: non-finite c entry");
        for (double v : d[k])
            if (!std::isfinite(v)) throw ConfigError("update rule: non-finite d entry");
    }
}

SolveTrace run_general_rule(const GeneralUpdateRule& rule, const TimeGrid& grid,
                            const VelocityField& u, const Vec& x0) {
    rule.validate();
    const int n = rule.n();
    if (grid.points() != n + 1) throw ConfigError("update rule: grid must have n+1 times");
    if (x0.size() != sz(u.dim())) throw ConfigError("update rule: state dimension mismatch");
    const int d = static_cast<int>(x0.size());

    SolveTrace tr;
    tr.times.push_back(grid[0]);
    tr.states.push_back(x0);
    for (int k = 0; k < n; ++k) {
        Vec uk(sz(d));
        u.eval(grid[k], tr.states.back(), uk);
        ++tr.nfe;
        tr.velocities.push_back(std::move(uk));
        Vec next(sz(d), 0.0);
        for (int j = 0; j <= k; ++j) {
            if (rule.c[sz(k)][sz(j)] != 0.0) axpy(rule.c[sz(k)][sz(j)], tr.states[sz(j)], next);
            if (rule.d[sz(k)][sz(j)] != 0.0)
                axpy(rule.d[sz(k)][sz(j)], tr.velocities[sz(j)], next);
        }
        for (double v : next)
            if (!std::isfinite(v) || std::abs(v) > kDivergenceLimit)
                throw DivergenceError("update rule diverged at step " + std::to_string(k), k);
        tr.times.push_back(grid[k + 1]);
        tr.states.push_back(std::move(next));
    }
    return tr;
}

NSSolverParams canonicalize(const GeneralUpdateRule& rule, const TimeGrid& grid) {
    rule.validate();
    const int n = rule.n();
    if (grid.points() != n + 1) throw ConfigError("canonicalize: grid must have n+1 times");

    NSSolverParams p;
    p.grid = grid;
    p.steps.resize(sz(n));
    for (int k = 0; k < n; ++k) {
        double a = rule.c[sz(k)][0];
        for (int j = 0; j < k; ++j) a += rule.c[sz(k)][sz(j + 1)] * p.steps[sz(j)].a;
        Vec b(sz(k) + 1, 0.0);
        for (int j = 0; j < k; ++j) {
            double acc = rule.d[sz(k)][sz(j)];
            for (int l = j; l < k; ++l)
                acc += rule.c[sz(k)][sz(l + 1)] * p.steps[sz(l)].b[sz(j)];
            b[sz(j)] = acc;
        }
        b[sz(k)] = rule.d[sz(k)][sz(k)];
        p.steps[sz(k)].a = a;
        p.steps[sz(k)].b = std::move(b);
    }
    p.validate(ValidationMode::Relaxed);
    return p;
}

EmbedMethod EmbedMethod::euler() { return {Kind::Euler, "euler", {}, {}}; }
EmbedMethod EmbedMethod::midpoint() { return {Kind::Midpoint, "midpoint", {}, {}}; }
EmbedMethod EmbedMethod::rk4() { return {Kind::Rk4, "rk4", {}, {}}; }

EmbedMethod EmbedMethod::rk(ButcherTableau tab) {
    tab.validate();
    EmbedMethod m;
    m.kind = Kind::Tableau;
    m.label = tab.name.empty() ? "rk" : tab.name;
    m.tableau = std::move(tab);
    return m;
}

EmbedMethod EmbedMethod::multistep(MultistepCoeffs coeffs) {
    coeffs.validate();
    EmbedMethod m;
    m.kind = Kind::Multistep;
    m.label = "ab" + std::to_string(coeffs.m);
    m.coeffs = std::move(coeffs);
    return m;
}

int EmbedMethod::stage_count() const {
    switch (kind) {
        case Kind::Euler:
            return 1;
        case Kind::Midpoint:
            return 2;
        case Kind::Rk4:
            return 4;
        case Kind::Tableau:
            return tableau.stages();
        case Kind::Multistep:
            return 1;
    }
    throw ConfigError("embedding: unknown method kind");
}

int EmbedMethod::intervals_for_nfe(int n_nfe) const {
    if (n_nfe < 1) throw ConfigError("embedding: nfe must be >= 1");
    if (kind == Kind::Multistep) {
        const int m = coeffs.m;
        // RK4 bootstrap spends 4 evaluations on each of the first m-1
        // intervals, then one per interval.
        int k = n_nfe - 3 * (m - 1);
        if (k < m)
            throw ConfigError("embedding: nfe = " + std::to_string(n_nfe) +
                              " unreachable for ab" + std::to_string(m) +
                              " (minimum " + std::to_string(4 * (m - 1) + 1) + ")");
        return k;
    }
    const int s = stage_count();
    if (n_nfe % s != 0)
        throw ConfigError("embedding: nfe = " + std::to_string(n_nfe) +
                          " not divisible by stage count " + std::to_string(s));
    return n_nfe / s;
}

NSSolverParams embed_generic(const EmbedMethod& method, int n_nfe, const TimeGrid* knots) {
    TimeGrid kn = knots ? *knots : default_knots(method, n_nfe, 0.0, 1.0);
    if (knots && method.intervals_for_nfe(n_nfe) != kn.intervals())
        throw ConfigError("embedding: knot grid interval count does not match nfe");
    UnrolledRule u = unroll_method(method, kn);
    return canonicalize(u.rule, TimeGrid(std::move(u.point_times), GridRule::NonDecreasing));
}

NSSolverParams embed_st_solver(const EmbedMethod& method, const STTransform& T, int n_nfe,
                               const TimeGrid* r_knots) {
    TimeGrid kn = r_knots ? *r_knots : default_knots(method, n_nfe, T.r_lo(), T.r_hi());
    if (r_knots && method.intervals_for_nfe(n_nfe) != kn.intervals())
        throw ConfigError("embedding: knot grid interval count does not match nfe");
    UnrolledRule u = unroll_method(method, kn);

    const int n = u.rule.n();
    std::vector<StJet> jets;
    jets.reserve(sz(n) + 1);
    Vec times(sz(n) + 1);
    for (int j = 0; j <= n; ++j) {
        jets.push_back(T.jet(u.point_times[sz(j)]));
        times[sz(j)] = jets.back().t;
    }
    // Rewrite each row in untransformed coordinates x_j = xbar_j / s_j using
    // ubar_j = ds_j x_j + dt_j s_j u_j.
    GeneralUpdateRule rule;
    rule.c.resize(sz(n));
    rule.d.resize(sz(n));
    for (int k = 0; k < n; ++k) {
        const double s_next = jets[sz(k) + 1].s;
        Vec c_row(sz(k) + 1), d_row(sz(k) + 1);
        for (int j = 0; j <= k; ++j) {
            const StJet& g = jets[sz(j)];
            c_row[sz(j)] = (u.rule.c[sz(k)][sz(j)] * g.s + u.rule.d[sz(k)][sz(j)] * g.ds) / s_next;
            d_row[sz(j)] = u.rule.d[sz(k)][sz(j)] * g.dt * g.s / s_next;
        }
        rule.c[sz(k)] = std::move(c_row);
        rule.d[sz(k)] = std::move(d_row);
    }
    return canonicalize(rule, TimeGrid(std::move(times), GridRule::NonDecreasing));
}

int RawNSParams::expected_size(int n) {
    if (n < 1) throw ConfigError("raw params: n must be >= 1");
    return (n - 1) + n + n * (n + 1) / 2;
}

void RawNSParams::validate() const {
    if (size() != expected_size(n))
        throw ConfigError("raw params: expected " + std::to_string(expected_size(n)) +
                          " values for n = " + std::to_string(n) + ", got " +
                          std::to_string(size()));
    for (double v : values)
        if (!std::isfinite(v)) throw ConfigError("raw params: non-finite value");
}

NSSolverParams raw_to_constrained(const RawNSParams& raw) {
    raw.validate();
    const int n = raw.n;
    Vec times(sz(n) + 1);
    times[0] = 0.0;
    times[sz(n)] = 1.0;
    double run = 0.0;
    Vec partial(sz(n - 1 >= 0 ? n - 1 : 0));
    for (int j = 0; j < n - 1; ++j) {
        run += softplus(raw.values[sz(j)]);
        partial[sz(j)] = run;
    }
    const double denom = run + 1.0;
    for (int j = 1; j < n; ++j) times[sz(j)] = partial[sz(j - 1)] / denom;

    NSSolverParams p;
    p.grid = TimeGrid(std::move(times), GridRule::StrictUnit);
    p.steps.resize(sz(n));
    int pos = n - 1;
    for (int i = 0; i < n; ++i) p.steps[sz(i)].a = raw.values[sz(pos++)];
    for (int i = 0; i < n; ++i) {
        p.steps[sz(i)].b.resize(sz(i) + 1);
        for (int j = 0; j <= i; ++j) p.steps[sz(i)].b[sz(j)] = raw.values[sz(pos++)];
    }
    return p;
}

RawNSParams constrained_to_raw(const NSSolverParams& params) {
    params.validate(ValidationMode::Strict);
    const int n = params.n();
    RawNSParams raw;
    raw.n = n;
    raw.values.reserve(sz(RawNSParams::expected_size(n)));
    if (n > 1) {
        const double t_last = params.grid[n - 1];
        const double denom = t_last / (1.0 - t_last) + 1.0;
        for (int j = 1; j < n; ++j)
            raw.values.push_back(
                softplus_inverse((params.grid[j] - params.grid[j - 1]) * denom));
    }
    for (int i = 0; i < n; ++i) raw.values.push_back(params.steps[sz(i)].a);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j <= i; ++j) raw.values.push_back(params.steps[sz(i)].b[sz(j)]);
    return raw;
}

Vec raw_time_jacobian(const RawNSParams& raw) {
    raw.validate();
    const int n = raw.n;
    const int m = n - 1;
    Vec jac(sz(m) * sz(m), 0.0);
    if (m == 0) return jac;
    double run = 0.0;
    Vec partial(sz(m));
    for (int j = 0; j < m; ++j) {
        run += softplus(raw.values[sz(j)]);
        partial[sz(j)] = run;
    }
    const double denom = run + 1.0;
    for (int j = 1; j <= m; ++j) {
        const double tj = partial[sz(j - 1)] / denom;
        for (int k = 0; k < m; ++k) {
            const double indicator = k + 1 <= j ? 1.0 : 0.0;
            jac[sz(j - 1) * sz(m) + sz(k)] =
                logistic(raw.values[sz(k)]) * (indicator - tj) / denom;
        }
    }
    return jac;
}

}  // namespace bns
