#pragma once

#include <string>
#include <vector>

#include "bns/common.hpp"
#include "bns/field.hpp"

namespace bns {

struct NSSolverParams;

/// How a time grid is validated. StrictUnit is the documented default:
/// strictly increasing with endpoints exactly 0 and 1. Strict drops the
/// endpoint pin (solves over clamped or extended ranges). NonDecreasing
/// additionally admits repeated times, which non-stationary solver grids need
/// because distinct trajectory points may share a time (stage points).
enum class GridRule { StrictUnit, Strict, NonDecreasing };

class TimeGrid {
public:
    TimeGrid() = default;
    explicit TimeGrid(Vec times, GridRule rule = GridRule::StrictUnit);

    static TimeGrid uniform(int intervals);
    static TimeGrid uniform_range(int intervals, double t0, double t1);

    int intervals() const { return static_cast<int>(times_.size()) - 1; }
    int points() const { return static_cast<int>(times_.size()); }
    double operator[](int i) const { return times_[static_cast<std::size_t>(i)]; }
    const Vec& times() const { return times_; }

private:
    Vec times_;
};

/// Explicit Runge-Kutta tableau: nodes c, strictly lower-triangular stage
/// matrix a, weights b.
struct ButcherTableau {
    std::string name;
    Vec c;
    std::vector<Vec> a;
    Vec b;

    int stages() const { return static_cast<int>(c.size()); }
    void validate() const;

    static ButcherTableau euler();
    static ButcherTableau midpoint();
    static ButcherTableau rk4();
};

/// Linear multistep coefficients: x_{i+1} = sum_j a_j x_{i-m+1+j} +
/// h * sum_j b_j u_{i-m+1+j}, oldest point first (j = m-1 is the current
/// point). Classic Adams-Bashforth weights assume a uniform grid; on
/// non-uniform grids the solver recomputes the b weights per interval by
/// integrating the interpolating polynomial.
struct MultistepCoeffs {
    int m = 1;
    Vec a;
    Vec b;

    void validate() const;

    /// Adams-Bashforth of order m (1 <= m <= 4): a selects the current point.
    static MultistepCoeffs ab(int m);
};

/// Record of one solve: knot times, states at those knots, the velocity
/// evaluations made at knots (where the method defines them), and the number
/// of field evaluations this solve performed.
struct SolveTrace {
    std::vector<double> times;
    std::vector<Vec> states;
    std::vector<Vec> velocities;
    long long nfe = 0;

    const Vec& final_state() const { return states.back(); }

    /// Debug export: {"nfe":..,"times":[..],"norms":[..]} with the l2 norm of
    /// each recorded state, doubles at 17 significant digits.
    std::string to_json() const;
};

/// Explicit RK sweep over the grid intervals. Every stage is evaluated (no
/// first-same-as-last reuse), so a tableau with m stages over k intervals
/// costs exactly m*k field evaluations.
SolveTrace solve_rk(const VelocityField& u, const Vec& x0, const TimeGrid& grid,
                    const ButcherTableau& tab);

/// Linear multistep sweep; the first m-1 intervals are bootstrapped with
/// classic RK4 on the same grid times (4 evaluations each, the first of which
/// doubles as that knot's history velocity).
SolveTrace solve_multistep(const VelocityField& u, const Vec& x0, const TimeGrid& grid,
                           const MultistepCoeffs& coeffs);

/// Whether every interval has the same width to within 1e-12 (the test that
/// selects classic multistep weights over per-interval recomputation).
bool grid_is_uniform(const TimeGrid& grid);

/// The interpolation weights a multistep method uses on one interval: with
/// history knots at `history_times` (oldest first, last = interval start) and
/// the interval [t_lo, t_hi], returns b such that the update adds
/// (t_hi - t_lo) * sum_j b_j u_j, i.e. the integral of the Lagrange
/// interpolant through the history velocities divided by the step. On uniform
/// grids this reproduces the classic Adams-Bashforth weights.
Vec multistep_interval_weights(const Vec& history_times, double t_lo, double t_hi);

struct AdaptiveResult {
    Vec x;
    long long nfe = 0;
    long long accepted = 0;
    long long rejected = 0;
};

/// Dormand-Prince 5(4) with PI step-size control; the reference solution
/// generator. Integrates t0 -> t1 (default 0 -> 1-eps, staying inside every
/// scheduler's analytic domain). Throws StiffnessError when the step size
/// falls below 1e-12 and DivergenceError on state blow-up.
AdaptiveResult solve_adaptive_rk45(const VelocityField& u, const Vec& x0, double rtol = 1e-5,
                                   double atol = 1e-5, double t0 = 0.0,
                                   double t1 = 1.0 - kInteriorEps,
                                   long long max_steps = 1000000);

/// Non-stationary sampler: u_i = u(t_i, x_i), x_{i+1} = a_i x_0 +
/// sum_{j<=i} b_{i,j} u_j. Exactly n field evaluations.
SolveTrace solve_ns(const NSSolverParams& theta, const VelocityField& u, const Vec& x0);

}  // namespace bns
