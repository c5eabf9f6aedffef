//! Differentiation through the robust estimation layer: sensitivities of
//! the converged chart parameters with respect to the input flow, obtained
//! from the implicit function theorem at the stationary point rather than
//! by unrolling the solver iterations.

use nalgebra::{DMatrix, Vector2};
use thiserror::Error;

use crate::geometry::{EssentialParams, Matrix5, NormalizedCorrespondenceSet, Vector5};

#[derive(Debug, Error)]
pub enum ImplicitError {
    #[error("degenerate geometry: Hessian condition number {condition:.3e} exceeds {limit:.1e}")]
    DegenerateGeometry { condition: f64, limit: f64 },
}

const CONDITION_LIMIT: f64 = 1e12;

/// Sensitivity of the converged chart parameters to the flow input.
///
/// Derivatives are taken with the inlier set frozen at its converged
/// value: the truncated penalty is replaced by its smooth restriction, so
/// columns of correspondences outside the final inlier set are exactly
/// zero.
#[derive(Debug, Clone)]
pub struct ImplicitGradient {
    /// 5 x 2N: column pair (2i, 2i+1) is d(theta)/d(v_i).
    pub dtheta_dflow: DMatrix<f64>,
    pub inliers: Vec<bool>,
    pub condition_number: f64,
}

fn inlier_mask(corr: &NormalizedCorrespondenceSet, params: &EssentialParams, delta: f64) -> Vec<bool> {
    let e = params.essential();
    (0..corr.len())
        .map(|i| crate::geometry::epipolar_residual(&corr.x[i], &corr.xp[i], &e).abs() < delta)
        .collect()
}

/// Hessian of the (inlier-frozen) lower objective w.r.t. theta at the
/// chart origin: sum over inliers of J J^T + z * d2z/dtheta^2.
pub fn hessian_theta(
    corr: &NormalizedCorrespondenceSet,
    params: &EssentialParams,
    delta: f64,
) -> Result<Matrix5, ImplicitError> {
    let mask = inlier_mask(corr, params, delta);
    let h = hessian_with_mask(corr, params, &mask);
    condition_number(&h)?;
    Ok(h)
}

fn hessian_with_mask(
    corr: &NormalizedCorrespondenceSet,
    params: &EssentialParams,
    mask: &[bool],
) -> Matrix5 {
    let jet = params.origin_jet();
    let mut h = Matrix5::zeros();
    for i in 0..corr.len() {
        if !mask[i] {
            continue;
        }
        let x = corr.x[i].vector();
        let xp = corr.xp[i].vector();
        let z = xp.dot(&(jet.e * x));
        let mut j = Vector5::zeros();
        for k in 0..5 {
            j[k] = xp.dot(&(jet.de[k] * x));
        }
        h += j * j.transpose();
        for k in 0..5 {
            for l in 0..5 {
                h[(k, l)] += z * xp.dot(&(jet.d2e[k][l] * x));
            }
        }
    }
    // The analytic second derivatives are symmetric by construction up to
    // rounding; enforce it so downstream factorizations see an exactly
    // symmetric matrix.
    0.5 * (h + h.transpose())
}

/// Mixed second derivative of the lower objective: 5 x 2N matrix whose
/// column pair i is d^2 l / (dv_i dtheta). The flow enters only through
/// x' = K'^-1 (p + v), so dx'_(1,2)/dv is the constant 2x2 block stored on
/// the correspondence set.
pub fn mixed_hessian(
    corr: &NormalizedCorrespondenceSet,
    params: &EssentialParams,
    delta: f64,
) -> DMatrix<f64> {
    let mask = inlier_mask(corr, params, delta);
    mixed_hessian_with_mask(corr, params, &mask)
}

fn mixed_hessian_with_mask(
    corr: &NormalizedCorrespondenceSet,
    params: &EssentialParams,
    mask: &[bool],
) -> DMatrix<f64> {
    let jet = params.origin_jet();
    let a = corr.dxp_dflow;
    let mut m = DMatrix::zeros(5, 2 * corr.len());
    for i in 0..corr.len() {
        if !mask[i] {
            continue;
        }
        let x = corr.x[i].vector();
        let xp = corr.xp[i].vector();
        let ex = jet.e * x;
        let z = xp.dot(&ex);
        // dz/dv = A^T (E x)_(1,2)
        let dz_dv = a.transpose() * Vector2::new(ex.x, ex.y);
        for k in 0..5 {
            let dex = jet.de[k] * x;
            let dz_dtheta = xp.dot(&dex);
            // d2z/(dv dtheta_k) = A^T (dE_k x)_(1,2)
            let d2 = a.transpose() * Vector2::new(dex.x, dex.y);
            for c in 0..2 {
                m[(k, 2 * i + c)] = dz_dtheta * dz_dv[c] + z * d2[c];
            }
        }
    }
    m
}

fn condition_number(h: &Matrix5) -> Result<f64, ImplicitError> {
    let eig = h.symmetric_eigen();
    let mut max = 0.0f64;
    let mut min = f64::INFINITY;
    for &v in eig.eigenvalues.iter() {
        max = max.max(v.abs());
        min = min.min(v.abs());
    }
    let cond = if min > 0.0 { max / min } else { f64::INFINITY };
    if !cond.is_finite() || cond > CONDITION_LIMIT {
        return Err(ImplicitError::DegenerateGeometry { condition: cond, limit: CONDITION_LIMIT });
    }
    Ok(cond)
}

/// dtheta*/dV = -H^-1 M, solved through one symmetric eigendecomposition
/// of H reused across all 2N right-hand sides.
pub fn dtheta_dflow(
    corr: &NormalizedCorrespondenceSet,
    params: &EssentialParams,
    delta: f64,
) -> Result<ImplicitGradient, ImplicitError> {
    let mask = inlier_mask(corr, params, delta);
    let h = hessian_with_mask(corr, params, &mask);
    let cond = condition_number(&h)?;
    let m = mixed_hessian_with_mask(corr, params, &mask);

    let eig = h.symmetric_eigen();
    // H^-1 y = Q diag(1/lambda) Q^T y
    let qt_m = eig.eigenvectors.transpose() * &m;
    let mut scaled = qt_m;
    for k in 0..5 {
        let inv = 1.0 / eig.eigenvalues[k];
        for j in 0..scaled.ncols() {
            scaled[(k, j)] *= inv;
        }
    }
    let x = -(eig.eigenvectors * scaled);
    let x = DMatrix::from_iterator(5, m.ncols(), x.iter().copied());
    Ok(ImplicitGradient { dtheta_dflow: x, inliers: mask, condition_number: cond })
}

/// Exact Newton iterations on the plain least-squares objective over all
/// points of `corr` (pass the frozen inlier subset). The LM refinement
/// stops at its gradient tolerance, which along the softest Hessian mode
/// can leave theta* several FD step sizes away from the true stationary
/// point; a few Newton steps are superconvergent and drive the gradient to
/// the floating-point floor, making small-step finite differences valid.
pub fn newton_refine(
    corr: &NormalizedCorrespondenceSet,
    start: &EssentialParams,
    iters: usize,
) -> EssentialParams {
    let big = 1e9; // threshold large enough that nothing saturates
    let mut params = start.rebased();
    for _ in 0..iters {
        let g = crate::robust::lower_gradient(corr, &params, big);
        let h = hessian_with_mask(corr, &params, &vec![true; corr.len()]);
        let Some(step) = h.lu().solve(&(-g)) else { break };
        params = params.with_theta(step).rebased();
    }
    params
}

/// Total derivative of an upper-level loss with respect to the flow:
/// dL/dV + (dL/dtheta)^T dtheta*/dV, all evaluated at (V, theta*).
pub fn total_gradient(
    dl_dflow: &[f64],
    dl_dtheta: &Vector5,
    g: &ImplicitGradient,
) -> Vec<f64> {
    assert_eq!(dl_dflow.len(), g.dtheta_dflow.ncols(), "flow gradient length mismatch");
    let chain = g.dtheta_dflow.transpose() * dl_dtheta;
    dl_dflow.iter().zip(chain.iter()).map(|(a, b)| a + b).collect()
}

/// Chart-independent sensitivity dE/dV (9 x 2N, column-major entries of
/// E): contracts dE/dtheta with dtheta*/dV. Useful for comparing gradients
/// computed in different charts of the same stationary point.
pub fn essential_sensitivity(params: &EssentialParams, g: &ImplicitGradient) -> DMatrix<f64> {
    let jet = params.origin_jet();
    let cols = g.dtheta_dflow.ncols();
    let mut out = DMatrix::zeros(9, cols);
    for j in 0..cols {
        for k in 0..5 {
            let w = g.dtheta_dflow[(k, j)];
            if w == 0.0 {
                continue;
            }
            for (r, &v) in jet.de[k].iter().enumerate() {
                out[(r, j)] += w * v;
            }
        }
    }
    out
}
