//! Lower-level solver: RANSAC over five-point hypotheses followed by IRLS
//! minimization of the truncated-L2 algebraic objective.

use nalgebra::Vector3;
use rayon::prelude::*;
use thiserror::Error;

use crate::fivepoint::{solve_five_point, MinimalSample};
use crate::geometry::{
    epipolar_residual, EssentialMatrix, EssentialParams, Matrix5, NormalizedCorrespondenceSet,
    Vector5,
};
use crate::rng::{derive_stream, derive_substream, CounterRng};

#[derive(Debug, Error)]
pub enum EstimationError {
    #[error("need at least 5 usable correspondences, got {0}")]
    InsufficientData(usize),
    #[error("estimation failed: {0}")]
    EstimationFailed(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone)]
pub struct RobustConfig {
    /// Inlier threshold on the algebraic residual, normalized units.
    pub inlier_threshold: f64,
    /// Correspondences sampled from the input for hypothesis generation.
    pub sample_pool: usize,
    /// Test correspondences used to score hypotheses.
    pub test_set_size: usize,
    pub hypothesis_count: usize,
    pub irls_max_iters: usize,
    pub irls_objective_floor: f64,
    pub rng_seed: u64,
}

impl Default for RobustConfig {
    fn default() -> Self {
        RobustConfig {
            inlier_threshold: 0.001,
            sample_pool: 10_000,
            test_set_size: 2_000,
            hypothesis_count: 1024,
            irls_max_iters: 200,
            irls_objective_floor: 1e-20,
            rng_seed: 0,
        }
    }
}

impl RobustConfig {
    pub fn validate(&self) -> Result<(), EstimationError> {
        if !(self.inlier_threshold > 0.0) {
            return Err(EstimationError::InvalidConfig("inlier threshold must be > 0".into()));
        }
        if self.sample_pool < self.test_set_size || self.test_set_size < 5 {
            return Err(EstimationError::InvalidConfig(
                "require sample_pool >= test_set_size >= 5".into(),
            ));
        }
        if self.hypothesis_count < 1 {
            return Err(EstimationError::InvalidConfig("hypothesis_count must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct EstimationResult {
    pub params: EssentialParams,
    pub essential: EssentialMatrix,
    pub inliers: Vec<bool>,
    pub objective: f64,
    pub iterations: usize,
    pub objective_history: Vec<f64>,
    pub hypotheses_tried: usize,
    pub best_inlier_count: usize,
    pub gradient_inf_norm: f64,
}

/// Truncated-L2 penalty: z^2/2 inside the threshold, delta^2/2 outside.
pub fn robust_penalty(z: f64, delta: f64) -> f64 {
    debug_assert!(delta > 0.0);
    if z.abs() < delta {
        0.5 * z * z
    } else {
        0.5 * delta * delta
    }
}

/// Robust lower objective l(V, theta) = sum rho(x'^T E(theta) x).
pub fn lower_objective(
    corr: &NormalizedCorrespondenceSet,
    params: &EssentialParams,
    delta: f64,
) -> f64 {
    let e = params.essential();
    (0..corr.len())
        .map(|i| robust_penalty(epipolar_residual(&corr.x[i], &corr.xp[i], &e), delta))
        .sum()
}

/// Gradient of the lower objective w.r.t. theta in the chart of `params`.
/// Saturated (outlier) residuals contribute zero.
pub fn lower_gradient(
    corr: &NormalizedCorrespondenceSet,
    params: &EssentialParams,
    delta: f64,
) -> Vector5 {
    let (e, de) = params.essential_and_jacobian();
    let mut g = Vector5::zeros();
    for i in 0..corr.len() {
        let x = corr.x[i].vector();
        let xp = corr.xp[i].vector();
        let z = xp.dot(&(e * x));
        if z.abs() < delta {
            for k in 0..5 {
                g[k] += z * xp.dot(&(de[k] * x));
            }
        }
    }
    g
}

fn residual(corr: &NormalizedCorrespondenceSet, e: &EssentialMatrix, i: usize) -> f64 {
    epipolar_residual(&corr.x[i], &corr.xp[i], e)
}

fn inlier_mask(corr: &NormalizedCorrespondenceSet, e: &EssentialMatrix, delta: f64) -> Vec<bool> {
    (0..corr.len()).map(|i| residual(corr, e, i).abs() < delta).collect()
}

#[derive(Clone)]
struct Candidate {
    inliers: usize,
    residual_sum: f64,
    hypothesis: usize,
    solution: usize,
    essential: EssentialMatrix,
}

fn better(a: &Candidate, b: &Candidate) -> bool {
    (b.inliers, a.residual_sum, b.hypothesis, b.solution)
        < (a.inliers, b.residual_sum, a.hypothesis, a.solution)
}

/// RANSAC initialization over five-point hypotheses. Deterministic for a
/// fixed seed regardless of worker count: every hypothesis uses its own
/// derived RNG stream and ties break on hypothesis index.
pub fn ransac_init(
    corr: &NormalizedCorrespondenceSet,
    cfg: &RobustConfig,
) -> Result<(EssentialMatrix, Vec<bool>), EstimationError> {
    cfg.validate()?;
    let n = corr.len();
    if n < 5 {
        return Err(EstimationError::InsufficientData(n));
    }

    // Sampling pool and test set, clamped to the available data.
    let pool: Vec<usize> = if n <= cfg.sample_pool {
        (0..n).collect()
    } else {
        let mut rng = CounterRng::new(cfg.rng_seed, "pool");
        rng.distinct_indices(cfg.sample_pool, n)
    };
    let test: Vec<usize> = if pool.len() <= cfg.test_set_size {
        pool.clone()
    } else {
        let mut rng = CounterRng::new(cfg.rng_seed, "test");
        rng.distinct_indices(cfg.test_set_size, pool.len())
            .into_iter()
            .map(|i| pool[i])
            .collect()
    };

    let hyp_stream = derive_stream(cfg.rng_seed, "hypotheses");
    let delta = cfg.inlier_threshold;
    let best = (0..cfg.hypothesis_count)
        .into_par_iter()
        .filter_map(|h| {
            let mut rng = CounterRng::from_key(derive_substream(hyp_stream, h as u64));
            let picks = rng.distinct_indices(5, pool.len());
            let idx: Vec<usize> = picks.into_iter().map(|i| pool[i]).collect();
            let sample = MinimalSample {
                x: [
                    corr.x[idx[0]], corr.x[idx[1]], corr.x[idx[2]], corr.x[idx[3]], corr.x[idx[4]],
                ],
                xp: [
                    corr.xp[idx[0]], corr.xp[idx[1]], corr.xp[idx[2]], corr.xp[idx[3]],
                    corr.xp[idx[4]],
                ],
                source_indices: [idx[0], idx[1], idx[2], idx[3], idx[4]],
            };
            let solutions = solve_five_point(&sample).ok()?;
            let mut local_best: Option<Candidate> = None;
            for (s, e) in solutions.iter().enumerate() {
                let mut inliers = 0usize;
                let mut residual_sum = 0.0;
                for &t in &test {
                    let z = residual(corr, e, t).abs();
                    if z < delta {
                        inliers += 1;
                    }
                    residual_sum += z;
                }
                let cand = Candidate { inliers, residual_sum, hypothesis: h, solution: s, essential: *e };
                if local_best.as_ref().map_or(true, |b| better(&cand, b)) {
                    local_best = Some(cand);
                }
            }
            local_best
        })
        .reduce_with(|a, b| if better(&a, &b) { a } else { b });

    let best = best.ok_or_else(|| {
        EstimationError::EstimationFailed("all RANSAC hypotheses were degenerate".into())
    })?;
    let mask = inlier_mask(corr, &best.essential, delta);
    Ok((best.essential, mask))
}

struct LmOutcome {
    params: EssentialParams,
    objective: f64,
    gradient_inf_norm: f64,
}

/// Levenberg-Marquardt on the inlier-restricted least squares, re-basing
/// the chart after every accepted step so derivatives are always taken at
/// the chart origin.
fn lm_minimize(
    corr: &NormalizedCorrespondenceSet,
    inliers: &[bool],
    start: &EssentialParams,
    gradient_tol: f64,
    max_iters: usize,
) -> LmOutcome {
    let mut params = start.rebased();
    let frozen: Vec<usize> = (0..corr.len()).filter(|&i| inliers[i]).collect();
    let objective_of = |p: &EssentialParams| -> f64 {
        let e = p.essential();
        frozen.iter().map(|&i| {
            let z = residual(corr, &e, i);
            0.5 * z * z
        }).sum()
    };
    let mut objective = objective_of(&params);
    let mut lambda = 1e-6;
    let mut gradient_inf = f64::INFINITY;

    for _ in 0..max_iters {
        let jet = params.origin_jet();
        let e = EssentialMatrix::from_matrix(jet.e);
        let mut grad = Vector5::zeros();
        let mut hess = Matrix5::zeros();
        for &i in &frozen {
            let x = corr.x[i].vector();
            let xp = corr.xp[i].vector();
            let z = xp.dot(&(e.matrix() * x));
            let mut j = Vector5::zeros();
            for k in 0..5 {
                j[k] = xp.dot(&(jet.de[k] * x));
            }
            grad += j * z;
            hess += j * j.transpose();
        }
        gradient_inf = grad.amax();
        if gradient_inf < gradient_tol {
            break;
        }

        let mut accepted = false;
        for _ in 0..40 {
            let mut damped = hess;
            for k in 0..5 {
                damped[(k, k)] += lambda * hess[(k, k)].max(1e-12);
            }
            let Some(step) = damped.lu().solve(&(-grad)) else {
                lambda *= 10.0;
                continue;
            };
            let trial = params.clone().with_theta(step).rebased();
            let trial_obj = objective_of(&trial);
            if trial_obj < objective {
                params = trial;
                objective = trial_obj;
                lambda = (lambda / 10.0).max(1e-12);
                accepted = true;
                break;
            }
            lambda *= 10.0;
            if lambda > 1e10 {
                break;
            }
        }
        if !accepted {
            break;
        }
    }
    LmOutcome { params, objective, gradient_inf_norm: gradient_inf }
}

/// IRLS refinement of the robust objective from an initial chart.
///
/// Truncated L2 gives unit weights inside the threshold and zero outside,
/// so each iteration is an inlier-restricted nonlinear least squares.
/// Stops when the objective reaches the configured floor or the iteration
/// cap; the returned chart satisfies the stationarity certificate
/// ||dl/dtheta||_inf on the final frozen inlier set.
pub fn irls_refine(
    corr: &NormalizedCorrespondenceSet,
    initial: &EssentialParams,
    cfg: &RobustConfig,
) -> Result<EstimationResult, EstimationError> {
    cfg.validate()?;
    if corr.len() < 5 {
        return Err(EstimationError::InsufficientData(corr.len()));
    }
    let delta = cfg.inlier_threshold;
    let mut params = initial.rebased();
    let mut inliers = inlier_mask(corr, &params.essential(), delta);
    // The truncated objective is flat wherever every residual saturates,
    // so a start that classifies (almost) nothing as inlier cannot move.
    // Bootstrap with one plain least-squares pass over all points; the
    // membership is recomputed immediately afterwards.
    if inliers.iter().filter(|&&b| b).count() < 5 {
        let all = vec![true; corr.len()];
        params = lm_minimize(corr, &all, &params, 1e-12, 100).params;
        inliers = inlier_mask(corr, &params.essential(), delta);
    }
    let mut history = Vec::new();
    let mut iterations = 0;
    let mut gradient_inf = f64::INFINITY;

    while iterations < cfg.irls_max_iters {
        iterations += 1;
        if inliers.iter().filter(|&&b| b).count() < 5 {
            return Err(EstimationError::EstimationFailed(
                "inlier set collapsed below 5 correspondences".into(),
            ));
        }
        let outcome = lm_minimize(corr, &inliers, &params, 1e-12, 100);
        params = outcome.params;
        gradient_inf = outcome.gradient_inf_norm;
        let objective = lower_objective(corr, &params, delta);
        history.push(objective);

        if objective <= cfg.irls_objective_floor {
            break;
        }
        let new_inliers = inlier_mask(corr, &params.essential(), delta);
        if new_inliers == inliers {
            break;
        }
        inliers = new_inliers;
    }

    // Final stationarity polish on the frozen inlier set in case the loop
    // exited right after a membership change.
    inliers = inlier_mask(corr, &params.essential(), delta);
    if inliers.iter().filter(|&&b| b).count() < 5 {
        return Err(EstimationError::EstimationFailed(
            "inlier set collapsed below 5 correspondences".into(),
        ));
    }
    let outcome = lm_minimize(corr, &inliers, &params, 1e-13, 100);
    params = outcome.params;
    gradient_inf = gradient_inf.min(outcome.gradient_inf_norm);
    let _ = outcome.objective;
    let objective = lower_objective(corr, &params, delta);
    let essential = params.essential();

    Ok(EstimationResult {
        inliers: inlier_mask(corr, &essential, delta),
        essential,
        params,
        objective,
        iterations,
        objective_history: history,
        hypotheses_tried: 0,
        best_inlier_count: 0,
        gradient_inf_norm: gradient_inf,
    })
}

/// Full lower-level solve: RANSAC initialization then IRLS refinement.
pub fn estimate(
    corr: &NormalizedCorrespondenceSet,
    cfg: &RobustConfig,
) -> Result<EstimationResult, EstimationError> {
    let (e0, mask0) = ransac_init(corr, cfg)?;
    let best_inlier_count = mask0.iter().filter(|&&b| b).count();
    // Any of the four decompositions of E yields the same essential matrix;
    // cheirality does not matter for the lower objective.
    let (r, t) = decompose_any(&e0);
    let initial = EssentialParams::from_base(r, t);
    let mut result = irls_refine(corr, &initial, cfg)?;
    result.hypotheses_tried = cfg.hypothesis_count;
    result.best_inlier_count = best_inlier_count;
    Ok(result)
}

/// One valid (R, t) with [t]x R = E up to scale/sign; no cheirality vote.
pub fn decompose_any(e: &EssentialMatrix) -> (nalgebra::Matrix3<f64>, Vector3<f64>) {
    let svd = e.canonical().svd(true, true);
    let mut u = svd.u.unwrap();
    let mut vt = svd.v_t.unwrap();
    if u.determinant() < 0.0 {
        u.column_mut(2).neg_mut();
    }
    if vt.determinant() < 0.0 {
        vt.row_mut(2).neg_mut();
    }
    let w = nalgebra::Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let r = u * w * vt;
    let t = u.column(2).into_owned();
    (r, t)
}
