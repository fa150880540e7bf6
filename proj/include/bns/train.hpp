#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bns/field.hpp"
#include "bns/nsparams.hpp"
#include "bns/scheduler.hpp"

namespace bns {

/// One supervised pair: a source draw x0 and the transport endpoint x1
/// obtained by integrating the velocity field from t=0.
struct TrajectoryPair {
    Vec x0;
    Vec x1;
};

/// Isotropic Gaussian source N(0, std^2 I) in R^dim.
struct GaussianSourceSpec {
    int dim = 2;
    double std = 1.0;

    void validate() const;
};

/// Draws `count` source samples and integrates each to t=1 with the adaptive
/// solver (rtol = atol), producing reference pairs.
///
/// Sample i uses its own generator stream keyed by mix_seed(seed, i), so the
/// dataset is identical for a given seed regardless of thread count or
/// sample order. A diverging trajectory aborts with the offending sample
/// index in the error message.
std::vector<TrajectoryPair> generate_dataset(const VelocityField& u,
                                             const GaussianSourceSpec& source, int count,
                                             double rtol, std::uint64_t seed);

/// Objective value for a parameter set on a batch: the mean over samples of
/// -log(mse) where mse = |x_n - x1|^2 / d, with mse clamped to
/// [1e-20, 1e12] before the log. Larger is better; up to an affine map this
/// is the mean PSNR of the batch. Solver divergence propagates as an error.
double loss(const NSSolverParams& theta, const VelocityField& u,
            const std::vector<TrajectoryPair>& batch);

/// Objective value plus its gradient with respect to the raw (unconstrained)
/// parameter vector. The gradient is exact (reverse-mode through the solver
/// recurrence and the time reparameterization), not finite differences.
///
/// A sample whose forward solve diverges contributes the clamped worst-case
/// loss (-log(1e12)) and a zero gradient instead of propagating the error;
/// `divergent` counts such samples.
struct LossGrad {
    double value = 0.0;
    Vec grad;
    int divergent = 0;
};

LossGrad grad_loss(const RawNSParams& theta, const VelocityField& u,
                   const std::vector<TrajectoryPair>& batch);

struct TrainConfig {
    int n_nfe = 8;
    /// One of: euler, midpoint, rk4, ab2, ddim.
    std::string init = "midpoint";
    /// Source-noise scale multiplier applied through an internal transform
    /// before training; 1.0 trains the field as-is.
    double sigma0 = 1.0;
    double lr = 5e-4;
    /// Learning rate decays as (lr - lr_end) * (1 - iter/iters)^lr_power + lr_end.
    double lr_power = 1.0;
    double lr_end = 0.0;
    int batch = 40;
    int iters = 2000;
    int val_every = 100;
    std::uint64_t seed = 0;
    /// adam or sgd.
    std::string optimizer = "adam";
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    /// Peak-to-peak signal range used for validation PSNR.
    double psnr_range = 2.0;

    void validate() const;
};

struct TrainHistoryRow {
    int iter = 0;
    /// Batch objective before the update at this iteration; absent (NaN) on
    /// the initial row.
    double train_loss = 0.0;
    bool has_train_loss = false;
    /// Mean validation PSNR in dB; only present on validation iterations.
    double val_psnr = 0.0;
    bool has_val_psnr = false;
};

struct TrainResult {
    NSSolverParams theta_best;
    double best_val_psnr = 0.0;
    std::vector<TrainHistoryRow> history;

    /// CSV with header iter,train_loss,val_psnr; absent cells are empty.
    std::string history_csv() const;
};

/// Distills the field into an n-step solver.
///
/// Pipeline: build the sigma0 preconditioning transform for `sched`, wrap the
/// field, map the dataset into the transformed frame, initialize theta by
/// embedding the named classical solver at n_nfe evaluations, then run
/// first-order updates on the raw parameterization maximizing `loss`.
/// Validation reports PSNR of the recovered (un-preconditioned) endpoint
/// against the original x1; the best-validation theta is returned. The whole
/// run is deterministic for a fixed config and dataset.
TrainResult train_bns(FieldPtr u, const Scheduler& sched,
                      const std::vector<TrajectoryPair>& train_set,
                      const std::vector<TrajectoryPair>& val_set, const TrainConfig& cfg);

}  // namespace bns
