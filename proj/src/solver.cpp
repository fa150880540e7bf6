#include "bns/solver.hpp"

#include <algorithm>
#include <cmath>

#include "bns/nsparams.hpp"

namespace bns {
namespace {

void check_state(const Vec& x, int step, const char* what) {
    for (double v : x)
        if (!std::isfinite(v) || std::abs(v) > kDivergenceLimit)
            throw DivergenceError(std::string(what) + " diverged at step " + std::to_string(step),
                                  step);
}

// 8-point Gauss-Legendre rule on [-1, 1]; exact through degree 15.
constexpr double kGlNode[8] = {-0.9602898564975363, -0.7966664774136267, -0.5255324099163290,
                               -0.1834346424956498, 0.1834346424956498,  0.5255324099163290,
                               0.7966664774136267,  0.9602898564975363};
constexpr double kGlWeight[8] = {0.1012285362903763, 0.2223810344533745, 0.3137066458778873,
                                 0.3626837833783620, 0.3626837833783620, 0.3137066458778873,
                                 0.2223810344533745, 0.1012285362903763};

// One explicit RK step; fills the stage velocities and advances x in place.
void rk_step(const VelocityField& u, const ButcherTableau& tab, double t, double h, Vec& x,
             std::vector<Vec>& k, Vec& stage, long long& nfe) {
    const int m = tab.stages();
    const int d = static_cast<int>(x.size());
    for (int s = 0; s < m; ++s) {
        stage = x;
        for (int l = 0; l < s; ++l) {
            double w = tab.a[static_cast<std::size_t>(s)][static_cast<std::size_t>(l)];
            if (w != 0.0) axpy(h * w, k[static_cast<std::size_t>(l)], stage);
        }
        u.eval(t + tab.c[static_cast<std::size_t>(s)] * h, stage, k[static_cast<std::size_t>(s)]);
        ++nfe;
    }
    for (int s = 0; s < m; ++s)
        if (tab.b[static_cast<std::size_t>(s)] != 0.0)
            axpy(h * tab.b[static_cast<std::size_t>(s)], k[static_cast<std::size_t>(s)], x);
    (void)d;
}

}  // namespace

bool grid_is_uniform(const TimeGrid& grid) {
    const int k = grid.intervals();
    const double h0 = (grid[k] - grid[0]) / k;
    for (int i = 0; i < k; ++i)
        if (std::abs(grid[i + 1] - grid[i] - h0) > 1e-12 * std::max(1.0, std::abs(h0)))
            return false;
    return true;
}

TimeGrid::TimeGrid(Vec times, GridRule rule) : times_(std::move(times)) {
    if (times_.size() < 2) throw ConfigError("time grid: need at least 2 points");
    for (double t : times_)
        if (!std::isfinite(t)) throw ConfigError("time grid: non-finite entry");
    for (std::size_t i = 1; i < times_.size(); ++i) {
        bool ok = rule == GridRule::NonDecreasing ? times_[i] >= times_[i - 1]
                                                  : times_[i] > times_[i - 1];
        if (!ok)
            throw ConfigError(std::string("time grid: times must be ") +
                              (rule == GridRule::NonDecreasing ? "non-decreasing"
                                                               : "strictly increasing"));
    }
    if (rule == GridRule::StrictUnit && (times_.front() != 0.0 || times_.back() != 1.0))
        throw ConfigError("time grid: endpoints must be exactly 0 and 1");
}

TimeGrid TimeGrid::uniform(int intervals) {
    if (intervals < 1) throw ConfigError("time grid: need at least 1 interval");
    Vec t(static_cast<std::size_t>(intervals) + 1);
    for (int i = 0; i <= intervals; ++i) t[static_cast<std::size_t>(i)] = double(i) / intervals;
    t.back() = 1.0;
    return TimeGrid(std::move(t), GridRule::StrictUnit);
}

TimeGrid TimeGrid::uniform_range(int intervals, double t0, double t1) {
    if (intervals < 1) throw ConfigError("time grid: need at least 1 interval");
    if (!(t0 < t1)) throw ConfigError("time grid: need t0 < t1");
    Vec t(static_cast<std::size_t>(intervals) + 1);
    for (int i = 0; i <= intervals; ++i)
        t[static_cast<std::size_t>(i)] = t0 + (t1 - t0) * double(i) / intervals;
    t.back() = t1;
    return TimeGrid(std::move(t), GridRule::Strict);
}

void ButcherTableau::validate() const {
    const std::size_t m = c.size();
    if (m == 0 || b.size() != m || a.size() != m)
        throw ConfigError("butcher tableau: c, b, a must share the stage count");
    double bsum = 0.0;
    for (std::size_t s = 0; s < m; ++s) {
        if (a[s].size() != s)
            throw ConfigError("butcher tableau: stage matrix must be strictly lower triangular");
        for (double w : a[s])
            if (!std::isfinite(w)) throw ConfigError("butcher tableau: non-finite stage weight");
        if (!std::isfinite(c[s]) || !std::isfinite(b[s]))
            throw ConfigError("butcher tableau: non-finite entry");
        bsum += b[s];
    }
    if (std::abs(bsum - 1.0) > 1e-9)
        throw ConfigError("butcher tableau: weights must sum to 1");
}

ButcherTableau ButcherTableau::euler() { return {"euler", {0.0}, {{}}, {1.0}}; }

ButcherTableau ButcherTableau::midpoint() {
    return {"midpoint", {0.0, 0.5}, {{}, {0.5}}, {0.0, 1.0}};
}

ButcherTableau ButcherTableau::rk4() {
    return {"rk4",
            {0.0, 0.5, 0.5, 1.0},
            {{}, {0.5}, {0.0, 0.5}, {0.0, 0.0, 1.0}},
            {1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0}};
}

void MultistepCoeffs::validate() const {
    if (m < 1) throw ConfigError("multistep: m must be >= 1");
    if (a.size() != static_cast<std::size_t>(m) || b.size() != static_cast<std::size_t>(m))
        throw ConfigError("multistep: a and b must have length m");
    for (int j = 0; j < m; ++j)
        if (!std::isfinite(a[static_cast<std::size_t>(j)]) ||
            !std::isfinite(b[static_cast<std::size_t>(j)]))
            throw ConfigError("multistep: non-finite coefficient");
}

MultistepCoeffs MultistepCoeffs::ab(int m) {
    MultistepCoeffs ms;
    ms.m = m;
    switch (m) {
        case 1:
            ms.a = {1.0};
            ms.b = {1.0};
            break;
        case 2:
            ms.a = {0.0, 1.0};
            ms.b = {-0.5, 1.5};
            break;
        case 3:
            ms.a = {0.0, 0.0, 1.0};
            ms.b = {5.0 / 12.0, -16.0 / 12.0, 23.0 / 12.0};
            break;
        case 4:
            ms.a = {0.0, 0.0, 0.0, 1.0};
            ms.b = {-9.0 / 24.0, 37.0 / 24.0, -59.0 / 24.0, 55.0 / 24.0};
            break;
        default:
            throw ConfigError("multistep: Adams-Bashforth supported for m in 1..4");
    }
    return ms;
}

std::string SolveTrace::to_json() const {
    std::string out = "{\"nfe\":" + std::to_string(nfe) + ",\"times\":[";
    for (std::size_t i = 0; i < times.size(); ++i) {
        if (i) out += ',';
        out += format_double(times[i]);
    }
    out += "],\"norms\":[";
    for (std::size_t i = 0; i < states.size(); ++i) {
        if (i) out += ',';
        out += format_double(norm2(states[i]));
    }
    out += "]}";
    return out;
}

SolveTrace solve_rk(const VelocityField& u, const Vec& x0, const TimeGrid& grid,
                    const ButcherTableau& tab) {
    tab.validate();
    if (x0.size() != static_cast<std::size_t>(u.dim()))
        throw ConfigError("rk solve: state dimension mismatch");
    const int m = tab.stages();
    const int d = static_cast<int>(x0.size());
    SolveTrace tr;
    tr.times.push_back(grid[0]);
    tr.states.push_back(x0);
    Vec x = x0, stage(static_cast<std::size_t>(d));
    std::vector<Vec> k(static_cast<std::size_t>(m), Vec(static_cast<std::size_t>(d)));
    for (int i = 0; i < grid.intervals(); ++i) {
        double t = grid[i], h = grid[i + 1] - t;
        if (!(h > 0.0)) throw ConfigError("rk solve: grid must be strictly increasing");
        rk_step(u, tab, t, h, x, k, stage, tr.nfe);
        check_state(x, i, "rk solve");
        tr.times.push_back(grid[i + 1]);
        tr.states.push_back(x);
    }
    return tr;
}

Vec multistep_interval_weights(const Vec& history_times, double t_lo, double t_hi) {
    const int m = static_cast<int>(history_times.size());
    if (m < 1) throw ConfigError("multistep weights: empty history");
    const double h = t_hi - t_lo;
    if (!(h > 0.0)) throw ConfigError("multistep weights: need t_lo < t_hi");
    Vec b(static_cast<std::size_t>(m), 0.0);
    for (int j = 0; j < m; ++j) {
        double acc = 0.0;
        for (int q = 0; q < 8; ++q) {
            double tau = t_lo + 0.5 * h * (kGlNode[q] + 1.0);
            double lj = 1.0;
            for (int l = 0; l < m; ++l) {
                if (l == j) continue;
                double denom = history_times[static_cast<std::size_t>(j)] -
                               history_times[static_cast<std::size_t>(l)];
                if (denom == 0.0)
                    throw ConfigError("multistep weights: repeated history times");
                lj *= (tau - history_times[static_cast<std::size_t>(l)]) / denom;
            }
            acc += kGlWeight[q] * lj;
        }
        // acc * h/2 is the integral of the basis polynomial; divide by h.
        b[static_cast<std::size_t>(j)] = 0.5 * acc;
    }
    return b;
}

SolveTrace solve_multistep(const VelocityField& u, const Vec& x0, const TimeGrid& grid,
                           const MultistepCoeffs& coeffs) {
    coeffs.validate();
    if (x0.size() != static_cast<std::size_t>(u.dim()))
        throw ConfigError("multistep solve: state dimension mismatch");
    const int m = coeffs.m;
    const int k = grid.intervals();
    if (k < m)
        throw ConfigError("multistep solve: grid has " + std::to_string(k) +
                          " intervals, needs at least m = " + std::to_string(m));
    for (int i = 0; i < k; ++i)
        if (!(grid[i + 1] > grid[i]))
            throw ConfigError("multistep solve: grid must be strictly increasing");

    const int d = static_cast<int>(x0.size());
    const bool uniform = grid_is_uniform(grid);
    const ButcherTableau boot = ButcherTableau::rk4();

    SolveTrace tr;
    tr.times.push_back(grid[0]);
    tr.states.push_back(x0);
    Vec x = x0, stage(static_cast<std::size_t>(d));
    std::vector<Vec> kk(4, Vec(static_cast<std::size_t>(d)));
    std::vector<Vec> hist_u;  // velocity at each visited knot
    for (int i = 0; i < k; ++i) {
        double t = grid[i], h = grid[i + 1] - t;
        if (i < m - 1) {
            rk_step(u, boot, t, h, x, kk, stage, tr.nfe);
            hist_u.push_back(kk[0]);  // stage 1 velocity is u(t_i, x_i)
        } else {
            Vec ui(static_cast<std::size_t>(d));
            u.eval(t, tr.states.back(), ui);
            ++tr.nfe;
            hist_u.push_back(std::move(ui));
            Vec bw;
            if (uniform) {
                bw = coeffs.b;
            } else {
                Vec ht(static_cast<std::size_t>(m));
                for (int j = 0; j < m; ++j)
                    ht[static_cast<std::size_t>(j)] = grid[i - m + 1 + j];
                bw = multistep_interval_weights(ht, t, grid[i + 1]);
            }
            Vec next(static_cast<std::size_t>(d), 0.0);
            for (int j = 0; j < m; ++j) {
                int idx = i - m + 1 + j;
                double aj = coeffs.a[static_cast<std::size_t>(j)];
                if (aj != 0.0) axpy(aj, tr.states[static_cast<std::size_t>(idx)], next);
                double bj = bw[static_cast<std::size_t>(j)];
                if (bj != 0.0) axpy(h * bj, hist_u[static_cast<std::size_t>(idx)], next);
            }
            x = std::move(next);
        }
        check_state(x, i, "multistep solve");
        tr.times.push_back(grid[i + 1]);
        tr.states.push_back(x);
    }
    tr.velocities = std::move(hist_u);
    return tr;
}

AdaptiveResult solve_adaptive_rk45(const VelocityField& u, const Vec& x0, double rtol, double atol,
                                   double t0, double t1, long long max_steps) {
    if (!(rtol > 0.0) || !(atol > 0.0))
        throw ConfigError("adaptive solve: tolerances must be positive");
    if (!(t1 != t0)) throw ConfigError("adaptive solve: empty time interval");
    if (x0.size() != static_cast<std::size_t>(u.dim()))
        throw ConfigError("adaptive solve: state dimension mismatch");

    // Dormand-Prince 5(4) coefficients.
    constexpr double C2 = 1.0 / 5, C3 = 3.0 / 10, C4 = 4.0 / 5, C5 = 8.0 / 9;
    constexpr double A21 = 1.0 / 5;
    constexpr double A31 = 3.0 / 40, A32 = 9.0 / 40;
    constexpr double A41 = 44.0 / 45, A42 = -56.0 / 15, A43 = 32.0 / 9;
    constexpr double A51 = 19372.0 / 6561, A52 = -25360.0 / 2187, A53 = 64448.0 / 6561,
                     A54 = -212.0 / 729;
    constexpr double A61 = 9017.0 / 3168, A62 = -355.0 / 33, A63 = 46732.0 / 5247,
                     A64 = 49.0 / 176, A65 = -5103.0 / 18656;
    constexpr double A71 = 35.0 / 384, A73 = 500.0 / 1113, A74 = 125.0 / 192,
                     A75 = -2187.0 / 6784, A76 = 11.0 / 84;
    constexpr double E1 = 71.0 / 57600, E3 = -71.0 / 16695, E4 = 71.0 / 1920,
                     E5 = -17253.0 / 339200, E6 = 22.0 / 525, E7 = -1.0 / 40;
    // Lund-stabilized PI control.
    constexpr double SAFE = 0.9, FAC1 = 0.2, FAC2 = 10.0, BETA = 0.04;
    const double EXPO1 = 0.2 - BETA * 0.75;
    const double FACC1 = 1.0 / FAC1, FACC2 = 1.0 / FAC2;
    const double posneg = t1 > t0 ? 1.0 : -1.0;
    const double hmax = std::abs(t1 - t0);

    const int d = static_cast<int>(x0.size());
    auto sz = [](int i) { return static_cast<std::size_t>(i); };
    Vec x = x0, k1(sz(d)), k2(sz(d)), k3(sz(d)), k4(sz(d)), k5(sz(d)), k6(sz(d)), k7(sz(d)),
        y(sz(d)), ysti(sz(d)), err_vec(sz(d));
    double t = t0;
    AdaptiveResult res;

    u.eval(t, x, k1);
    ++res.nfe;

    // Starting step size (Hairer's hinit): one Euler probe.
    double h;
    {
        double dnf = 0.0, dny = 0.0;
        for (int i = 0; i < d; ++i) {
            double sk = atol + rtol * std::abs(x[sz(i)]);
            dnf += (k1[sz(i)] / sk) * (k1[sz(i)] / sk);
            dny += (x[sz(i)] / sk) * (x[sz(i)] / sk);
        }
        h = (dnf <= 1e-10 || dny <= 1e-10) ? 1e-6 : std::sqrt(dny / dnf) * 0.01;
        h = std::min(h, hmax);
        for (int i = 0; i < d; ++i) y[sz(i)] = x[sz(i)] + h * posneg * k1[sz(i)];
        u.eval(t + h * posneg, y, k2);
        ++res.nfe;
        double der2 = 0.0;
        for (int i = 0; i < d; ++i) {
            double sk = atol + rtol * std::abs(x[sz(i)]);
            double dk = (k2[sz(i)] - k1[sz(i)]) / sk;
            der2 += dk * dk;
        }
        der2 = std::sqrt(der2) / h;
        double der12 = std::max(der2, std::sqrt(dnf));
        double h1 = der12 <= 1e-15 ? std::max(1e-6, h * 1e-3) : std::pow(0.01 / der12, 0.2);
        h = std::min({100.0 * h, h1, hmax}) * posneg;
    }

    double facold = 1e-4;
    bool reject = false, last = false;
    long long nstep = 0;
    while (true) {
        if (std::abs(h) < 1e-12)
            throw StiffnessError("adaptive solve: step size underflow at t=" + format_double(t));
        if (++nstep > max_steps)
            throw StiffnessError("adaptive solve: exceeded " + std::to_string(max_steps) +
                                 " step attempts");
        if ((t + 1.01 * h - t1) * posneg > 0.0) {
            h = t1 - t;
            last = true;
        }

        for (int i = 0; i < d; ++i) y[sz(i)] = x[sz(i)] + h * A21 * k1[sz(i)];
        u.eval(t + C2 * h, y, k2);
        for (int i = 0; i < d; ++i) y[sz(i)] = x[sz(i)] + h * (A31 * k1[sz(i)] + A32 * k2[sz(i)]);
        u.eval(t + C3 * h, y, k3);
        for (int i = 0; i < d; ++i)
            y[sz(i)] = x[sz(i)] + h * (A41 * k1[sz(i)] + A42 * k2[sz(i)] + A43 * k3[sz(i)]);
        u.eval(t + C4 * h, y, k4);
        for (int i = 0; i < d; ++i)
            y[sz(i)] = x[sz(i)] + h * (A51 * k1[sz(i)] + A52 * k2[sz(i)] + A53 * k3[sz(i)] +
                                       A54 * k4[sz(i)]);
        u.eval(t + C5 * h, y, k5);
        for (int i = 0; i < d; ++i)
            ysti[sz(i)] = x[sz(i)] + h * (A61 * k1[sz(i)] + A62 * k2[sz(i)] + A63 * k3[sz(i)] +
                                          A64 * k4[sz(i)] + A65 * k5[sz(i)]);
        u.eval(t + h, ysti, k6);
        for (int i = 0; i < d; ++i)
            y[sz(i)] = x[sz(i)] + h * (A71 * k1[sz(i)] + A73 * k3[sz(i)] + A74 * k4[sz(i)] +
                                       A75 * k5[sz(i)] + A76 * k6[sz(i)]);
        u.eval(t + h, y, k7);
        res.nfe += 6;

        double err = 0.0;
        for (int i = 0; i < d; ++i) {
            double e = h * (E1 * k1[sz(i)] + E3 * k3[sz(i)] + E4 * k4[sz(i)] + E5 * k5[sz(i)] +
                            E6 * k6[sz(i)] + E7 * k7[sz(i)]);
            double sk = atol + rtol * std::max(std::abs(x[sz(i)]), std::abs(y[sz(i)]));
            err += (e / sk) * (e / sk);
        }
        err = std::sqrt(err / d);

        if (!std::isfinite(err)) {
            h *= 0.1;
            reject = true;
            last = false;
            continue;
        }

        double fac11 = std::pow(err, EXPO1);
        double fac = fac11 / std::pow(facold, BETA);
        fac = std::max(FACC2, std::min(FACC1, fac / SAFE));
        double hnew = h / fac;

        if (err <= 1.0) {
            facold = std::max(err, 1e-4);
            ++res.accepted;
            k1 = k7;
            x = y;
            t += h;
            check_state(x, static_cast<int>(res.accepted), "adaptive solve");
            if (last) {
                res.x = std::move(x);
                return res;
            }
            if (std::abs(hnew) > hmax) hnew = posneg * hmax;
            if (reject) hnew = posneg * std::min(std::abs(hnew), std::abs(h));
            reject = false;
        } else {
            hnew = h / std::min(FACC1, fac11 / SAFE);
            reject = true;
            last = false;
            ++res.rejected;
        }
        h = hnew;
    }
}

SolveTrace solve_ns(const NSSolverParams& theta, const VelocityField& u, const Vec& x0) {
    theta.validate(ValidationMode::Relaxed);
    if (x0.size() != static_cast<std::size_t>(u.dim()))
        throw ConfigError("ns solve: state dimension mismatch");
    const int n = theta.n();
    const int d = static_cast<int>(x0.size());

    SolveTrace tr;
    tr.times.reserve(static_cast<std::size_t>(n) + 1);
    tr.states.reserve(static_cast<std::size_t>(n) + 1);
    tr.velocities.reserve(static_cast<std::size_t>(n));
    tr.times.push_back(theta.grid[0]);
    tr.states.push_back(x0);

    for (int i = 0; i < n; ++i) {
        Vec ui(static_cast<std::size_t>(d));
        u.eval(theta.grid[i], tr.states.back(), ui);
        ++tr.nfe;
        tr.velocities.push_back(std::move(ui));

        const NSSolverParams::Step& st = theta.steps[static_cast<std::size_t>(i)];
        Vec next(static_cast<std::size_t>(d), 0.0);
        if (st.a != 0.0) axpy(st.a, x0, next);
        for (int j = 0; j <= i; ++j)
            if (st.b[static_cast<std::size_t>(j)] != 0.0)
                axpy(st.b[static_cast<std::size_t>(j)], tr.velocities[static_cast<std::size_t>(j)],
                     next);
        for (double v : next)
            if (!std::isfinite(v) || std::abs(v) > kDivergenceLimit)
                throw DivergenceError(
                    "ns solve diverged at step " + std::to_string(i) + "; theta: " +
                        theta.to_json(),
                    i);
        tr.times.push_back(theta.grid[i + 1]);
        tr.states.push_back(std::move(next));
    }
    return tr;
}

}  // namespace bns
