#pragma once

#include <string>
#include <vector>

#include "bns/common.hpp"
#include "bns/solver.hpp"
#include "bns/transform.hpp"

namespace bns {

/// Trainable non-stationary solver parameters: a grid of n+1 times and per
/// step i a scalar a_i plus a length-(i+1) vector b_i, so that
///   x_{i+1} = a_i x_0 + sum_{j<=i} (b_i)_j u(t_j, x_j).
struct NSSolverParams {
    struct Step {
        double a = 1.0;
        Vec b;
    };

    TimeGrid grid;
    std::vector<Step> steps;

    int n() const { return static_cast<int>(steps.size()); }

    /// Strict: shapes, finiteness, strictly increasing grid with endpoints
    /// exactly 0 and 1 (the training form). Relaxed: shapes, finiteness,
    /// non-decreasing grid (embedded solvers place stage points at repeated
    /// times and may start below 0 or end inside (0,1)).
    void validate(ValidationMode mode = ValidationMode::Strict) const;

    /// {"n":int,"grid":[t_0..t_n],"steps":[{"a":..,"b":[..]},...]} with
    /// doubles at 17 significant digits (bit-exact round trip).
    std::string to_json() const;
    static NSSolverParams from_json(const std::string& text);
};

/// Total serialized parameter count, all n+1 grid times included:
/// n(n+5)/2 + 1.
int param_count(int n);

/// Update rule x_{k+1} = sum_{j<=k} (c_k)_j x_j + sum_{j<=k} (d_k)_j u_j;
/// entry j of each row multiplies point/velocity j.
struct GeneralUpdateRule {
    std::vector<Vec> c;
    std::vector<Vec> d;

    int n() const { return static_cast<int>(c.size()); }
    void validate() const;
};

/// Runs the (c, d) rule directly (the reference the canonicalized form is
/// checked against).
SolveTrace run_general_rule(const GeneralUpdateRule& rule, const TimeGrid& grid,
                            const VelocityField& u, const Vec& x0);

/// Rewrites a general rule in the canonical (a_i, b_i) form by eliminating
/// the intermediate points: a_k = (c_k)_0 + sum_{j<k} (c_k)_{j+1} a_j,
/// (b_k)_j = sum_{l=j..k-1} (c_k)_{l+1} (b_l)_j + (d_k)_j, (b_k)_k = (d_k)_k.
NSSolverParams canonicalize(const GeneralUpdateRule& rule, const TimeGrid& grid);

/// A concrete baseline integrator to embed.
struct EmbedMethod {
    enum class Kind { Euler, Midpoint, Rk4, Tableau, Multistep };

    Kind kind = Kind::Euler;
    std::string label = "euler";
    ButcherTableau tableau;
    MultistepCoeffs coeffs;

    static EmbedMethod euler();
    static EmbedMethod midpoint();
    static EmbedMethod rk4();
    static EmbedMethod rk(ButcherTableau tab);
    static EmbedMethod multistep(MultistepCoeffs coeffs);

    const std::string& name() const { return label; }
    /// Field evaluations consumed per interval in steady state.
    int stage_count() const;
    /// Number of grid intervals that spend n_nfe evaluations; throws
    /// ConfigError when n_nfe is not reachable.
    int intervals_for_nfe(int n_nfe) const;
};

/// Non-stationary parameters that replay the method exactly, intermediate
/// stage states included as trajectory points, so n equals the method's NFE.
/// The interval grid is uniform on [0, 1] unless `knots` is given.
NSSolverParams embed_generic(const EmbedMethod& method, int n_nfe,
                             const TimeGrid* knots = nullptr);

/// Embeds the method run on the transformed field: unrolls it in transformed
/// coordinates over a uniform grid in r (or `r_knots`), converts each row to
/// original coordinates via
///   c_j -> (c_j s_j + d_j ds_j) / s_{k+1},   d_j -> d_j dt_j s_j / s_{k+1},
/// with grid times t_j = T.time(r_j), then canonicalizes. The end-point
/// scale divisions are absorbed by the same factors, so solve_ns on the
/// result consumes and produces untransformed states.
NSSolverParams embed_st_solver(const EmbedMethod& method, const STTransform& T, int n_nfe,
                               const TimeGrid* r_knots = nullptr);

/// Unconstrained training view of NSSolverParams with the grid endpoints
/// pinned: n-1 raw interior-gap values (softplus-positive, normalized) plus
/// all a_i and b_i entries. Flattened layout: [raw_dt (n-1), a (n),
/// b rows concatenated (n(n+1)/2)].
struct RawNSParams {
    int n = 0;
    Vec values;

    int size() const { return static_cast<int>(values.size()); }
    void validate() const;

    static int expected_size(int n);
};

NSSolverParams raw_to_constrained(const RawNSParams& raw);
RawNSParams constrained_to_raw(const NSSolverParams& params);

/// d t_j / d raw_k for the raw time map, laid out row-major as
/// jac[j * (n-1) + k] for interior times j = 1..n-1 (rows j-1).
Vec raw_time_jacobian(const RawNSParams& raw);

}  // namespace bns
