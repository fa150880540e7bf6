#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "bns/field.hpp"
#include "bns/nsparams.hpp"
#include "bns/scheduler.hpp"
#include "bns/train.hpp"

namespace bns {

/// Peak signal-to-noise ratio in dB: 10 log10(range^2 / mse) with
/// mse = |approx - reference|^2 / d. Clamped to 200 dB once mse drops below
/// range^2 * 1e-20 (numerically exact reconstruction). Mismatched lengths
/// are a config error.
double psnr_db(std::span<const double> approx, std::span<const double> reference,
               double range = 2.0);

/// A named fixed-budget sampler for the sweep: run(u, x0, nfe) must return
/// the t=1 endpoint using exactly nfe field evaluations, or throw if the
/// budget is unreachable for the method.
struct SweepSolver {
    std::string name;
    std::function<Vec(const VelocityField& u, const Vec& x0, int nfe)> run;
};

SweepSolver sweep_euler();
SweepSolver sweep_midpoint();
SweepSolver sweep_rk4();
SweepSolver sweep_ab2();
/// Exponential-integrator baseline: kernel-affine time map for the epsilon
/// parameterization on `sched`, integrated with embedded Euler steps.
SweepSolver sweep_ddim(const Scheduler& sched);
/// A trained solver; only valid at nfe == theta.n().
SweepSolver sweep_ns(NSSolverParams theta, std::string name = "bns");

struct SweepCell {
    std::string solver;
    int nfe = 0;
    double mean_psnr_db = 0.0;
    double rmse = 0.0;
    double wall_ms = 0.0;
    /// Empty on success; otherwise the failure message for this cell.
    std::string error;
};

struct SweepReport {
    std::vector<SweepCell> cells;

    /// CSV with header solver,nfe,mean_psnr_db,rmse,note. Wall time is kept
    /// out of the CSV so reports are byte-identical across runs.
    std::string to_csv() const;
    /// Human-readable table (includes wall time).
    std::string to_table() const;
};

/// Evaluates every solver at every evaluation budget over the dataset.
/// A solver that cannot run at a budget (or diverges) produces a cell with
/// the error recorded rather than aborting the sweep.
SweepReport nfe_sweep(const VelocityField& u, const std::vector<TrajectoryPair>& dataset,
                      const std::vector<SweepSolver>& solvers, const std::vector<int>& nfes,
                      double psnr_range = 2.0);

/// Polynomial velocity field with bounded random coefficients and analytic
/// derivatives; smooth in t and x, suitable for exactness checks.
FieldPtr random_smooth_field(int dim, std::uint64_t seed);

/// `count` random smooth fields with distinct streams derived from seed.
std::vector<FieldPtr> default_taxonomy_suite(int count = 20, int dim = 2,
                                                std::uint64_t seed = 7);

struct TaxonomyCheck {
    std::string field;
    std::string check;
    double deviation = 0.0;
    double tol = 0.0;
    /// True when the check behaved as required (for the sensitivity row this
    /// means the deviation exceeded tol).
    bool pass = false;
    /// Sensitivity rows assert that a corrupted parameter set is detected.
    bool expect_fail = false;
};

struct TaxonomyReport {
    std::vector<TaxonomyCheck> rows;

    bool all_pass() const;
    /// CSV with header field,check,deviation,tol,pass.
    std::string to_csv() const;
    std::string to_table() const;
};

struct TaxonomyOptions {
    double tol = 1e-9;
    /// Total random general update rules canonicalized across the suite.
    int random_rules = 50;
    std::uint64_t seed = 2024;
    /// Also verify that a 1e-3 coefficient corruption is flagged.
    bool include_sensitivity = true;
};

/// Structural equivalence checks across a field suite:
///  - canonicalized random update rules reproduce the direct rule trajectory,
///  - embedded Euler / midpoint / RK4 / AB2 solvers match their native runs,
///  - the kernel-affine exponential-integrator embedding matches the
///    closed-form alpha/sigma-ratio update on a reference scheduler,
/// plus a sensitivity row demonstrating the tolerance actually detects a
/// corrupted parameter set.
TaxonomyReport taxonomy_check(const std::vector<FieldPtr>& suite,
                                    const TaxonomyOptions& opts = {});
TaxonomyReport taxonomy_check(const std::vector<FieldPtr>& suite, double tol);

}  // namespace bns
