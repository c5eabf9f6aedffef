//! Camera intrinsics, normalized coordinates, the 5-parameter essential
//! matrix chart and elementary epipolar algebra.

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use thiserror::Error;

pub type Vector5 = nalgebra::SVector<f64, 5>;
pub type Matrix5 = nalgebra::SMatrix<f64, 5, 5>;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("camera intrinsics matrix is not invertible")]
    InvalidIntrinsics,
    #[error("translation direction is antipodal to the chart base")]
    ChartSingularity,
}

/// Pinhole intrinsics. `skew` is almost always zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub skew: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Self {
        CameraIntrinsics { fx, fy, cx, cy, skew: 0.0 }
    }

    pub const fn identity() -> Self {
        CameraIntrinsics { fx: 1.0, fy: 1.0, cx: 0.0, cy: 0.0, skew: 0.0 }
    }

    /// Intrinsics of the same camera after resampling the image by `s`
    /// (s < 1 shrinks: pixel coordinates are multiplied by s).
    pub fn scaled(&self, s: f64) -> Self {
        CameraIntrinsics {
            fx: self.fx * s,
            fy: self.fy * s,
            cx: self.cx * s,
            cy: self.cy * s,
            skew: self.skew * s,
        }
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            self.fx, self.skew, self.cx,
            0.0, self.fy, self.cy,
            0.0, 0.0, 1.0,
        )
    }

    /// Closed-form inverse of the upper-triangular K.
    pub fn inverse_matrix(&self) -> Result<Matrix3<f64>, GeometryError> {
        if !(self.fx.abs() > 1e-12 && self.fy.abs() > 1e-12)
            || !self.fx.is_finite()
            || !self.fy.is_finite()
        {
            return Err(GeometryError::InvalidIntrinsics);
        }
        let ifx = 1.0 / self.fx;
        let ify = 1.0 / self.fy;
        Ok(Matrix3::new(
            ifx, -self.skew * ifx * ify, (self.skew * self.cy - self.cx * self.fy) * ifx * ify,
            0.0, ify, -self.cy * ify,
            0.0, 0.0, 1.0,
        ))
    }
}

/// A point in pixel units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelPoint {
    pub u: f64,
    pub v: f64,
}

impl PixelPoint {
    pub fn new(u: f64, v: f64) -> Self {
        PixelPoint { u, v }
    }
}

/// A point on the unit focal plane; third homogeneous component is 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizedPoint(Vector3<f64>);

impl NormalizedPoint {
    pub fn new(x: f64, y: f64) -> Self {
        NormalizedPoint(Vector3::new(x, y, 1.0))
    }

    pub fn vector(&self) -> Vector3<f64> {
        self.0
    }

    pub fn x(&self) -> f64 {
        self.0.x
    }

    pub fn y(&self) -> f64 {
        self.0.y
    }
}

/// x = K^-1 p for every pixel.
pub fn normalize_points(
    pixels: &[PixelPoint],
    intrinsics: &CameraIntrinsics,
) -> Result<Vec<NormalizedPoint>, GeometryError> {
    let kinv = intrinsics.inverse_matrix()?;
    Ok(pixels
        .iter()
        .map(|p| {
            let h = kinv * Vector3::new(p.u, p.v, 1.0);
            NormalizedPoint::new(h.x / h.z, h.y / h.z)
        })
        .collect())
}

/// Inverse of [`normalize_points`]: p = K x.
pub fn denormalize_points(
    points: &[NormalizedPoint],
    intrinsics: &CameraIntrinsics,
) -> Vec<PixelPoint> {
    let k = intrinsics.matrix();
    points
        .iter()
        .map(|x| {
            let h = k * x.vector();
            PixelPoint::new(h.x / h.z, h.y / h.z)
        })
        .collect()
}

/// Dense forward displacement field over an image grid, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    data: Vec<Vector2<f64>>,
    valid: Option<Vec<bool>>,
}

impl FlowField {
    pub fn new(width: usize, height: usize, data: Vec<Vector2<f64>>) -> Self {
        assert_eq!(data.len(), width * height, "flow entry count must be width*height");
        assert!(data.iter().all(|v| v.x.is_finite() && v.y.is_finite()));
        FlowField { width, height, data, valid: None }
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        FlowField {
            width,
            height,
            data: vec![Vector2::zeros(); width * height],
            valid: None,
        }
    }

    pub fn with_validity(mut self, valid: Vec<bool>) -> Self {
        assert_eq!(valid.len(), self.width * self.height);
        self.valid = Some(valid);
        self
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, x: usize, y: usize) -> Vector2<f64> {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: Vector2<f64>) {
        self.data[y * self.width + x] = v;
    }

    pub fn at(&self, idx: usize) -> Vector2<f64> {
        self.data[idx]
    }

    pub fn data(&self) -> &[Vector2<f64>] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Vector2<f64>] {
        &mut self.data
    }

    pub fn is_valid(&self, idx: usize) -> bool {
        self.valid.as_ref().map_or(true, |m| m[idx])
    }

    pub fn validity(&self) -> Option<&[bool]> {
        self.valid.as_deref()
    }

    /// Bilinear sample at (x, y) in pixel units; clamps to the border.
    pub fn sample(&self, x: f64, y: f64) -> Vector2<f64> {
        let xc = x.clamp(0.0, (self.width - 1) as f64);
        let yc = y.clamp(0.0, (self.height - 1) as f64);
        let x0 = xc.floor() as usize;
        let y0 = yc.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = xc - x0 as f64;
        let fy = yc - y0 as f64;
        let a = self.get(x0, y0);
        let b = self.get(x1, y0);
        let c = self.get(x0, y1);
        let d = self.get(x1, y1);
        a * (1.0 - fx) * (1.0 - fy) + b * fx * (1.0 - fy) + c * (1.0 - fx) * fy + d * fx * fy
    }
}

/// Paired normalized points (x, x') with provenance into the source grid.
///
/// `dxp_dflow` is the constant Jacobian of x' with respect to the pixel
/// flow: x' = K'^-1 (p + v), so d(x'_1, x'_2)/d(v_u, v_v) is the upper-left
/// 2x2 block of K'^-1.
#[derive(Debug, Clone)]
pub struct NormalizedCorrespondenceSet {
    pub x: Vec<NormalizedPoint>,
    pub xp: Vec<NormalizedPoint>,
    pub indices: Vec<usize>,
    pub dxp_dflow: Matrix2<f64>,
}

impl NormalizedCorrespondenceSet {
    pub fn new(x: Vec<NormalizedPoint>, xp: Vec<NormalizedPoint>) -> Self {
        assert_eq!(x.len(), xp.len());
        let indices = (0..x.len()).collect();
        NormalizedCorrespondenceSet { x, xp, indices, dxp_dflow: Matrix2::identity() }
    }

    pub fn from_pixel_pairs(
        p: &[PixelPoint],
        pp: &[PixelPoint],
        k: &CameraIntrinsics,
        kp: &CameraIntrinsics,
    ) -> Result<Self, GeometryError> {
        assert_eq!(p.len(), pp.len());
        let x = normalize_points(p, k)?;
        let xp = normalize_points(pp, kp)?;
        let kpinv = kp.inverse_matrix()?;
        let indices = (0..x.len()).collect();
        Ok(NormalizedCorrespondenceSet {
            x,
            xp,
            indices,
            dxp_dflow: kpinv.fixed_view::<2, 2>(0, 0).into_owned(),
        })
    }

    /// Build from a dense flow field, keeping only valid pixels.
    pub fn from_flow(
        flow: &FlowField,
        k: &CameraIntrinsics,
        kp: &CameraIntrinsics,
    ) -> Result<Self, GeometryError> {
        let mut p = Vec::new();
        let mut pp = Vec::new();
        let mut indices = Vec::new();
        for y in 0..flow.height {
            for x in 0..flow.width {
                let idx = y * flow.width + x;
                if !flow.is_valid(idx) {
                    continue;
                }
                let v = flow.at(idx);
                p.push(PixelPoint::new(x as f64, y as f64));
                pp.push(PixelPoint::new(x as f64 + v.x, y as f64 + v.y));
                indices.push(idx);
            }
        }
        let mut set = Self::from_pixel_pairs(&p, &pp, k, kp)?;
        set.indices = indices;
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    /// Subset by position (not provenance index).
    pub fn subset(&self, keep: &[usize]) -> Self {
        NormalizedCorrespondenceSet {
            x: keep.iter().map(|&i| self.x[i]).collect(),
            xp: keep.iter().map(|&i| self.xp[i]).collect(),
            indices: keep.iter().map(|&i| self.indices[i]).collect(),
            dxp_dflow: self.dxp_dflow,
        }
    }
}

/// Cross-product matrix: skew(v) w = v x w.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(
        0.0, -v.z, v.y,
        v.z, 0.0, -v.x,
        -v.y, v.x, 0.0,
    )
}

/// Rodrigues' formula.
pub fn rotation_exp(omega: &Vector3<f64>) -> Matrix3<f64> {
    let angle = omega.norm();
    if angle < 1e-12 {
        let w = skew(omega);
        return Matrix3::identity() + w + w * w * 0.5;
    }
    let axis = omega / angle;
    let w = skew(&axis);
    Matrix3::identity() + w * angle.sin() + w * w * (1.0 - angle.cos())
}

/// Axis-angle of a proper rotation.
///
/// The angle comes from atan2 of the skew part rather than
/// acos((tr - 1)/2): the acos form quantizes at sqrt(ulp(1)) ~ 1.5e-8 near
/// the identity, which is far too coarse for the small chart increments
/// this is used on.
pub fn rotation_log(r: &Matrix3<f64>) -> Vector3<f64> {
    let s = Vector3::new(
        r[(2, 1)] - r[(1, 2)],
        r[(0, 2)] - r[(2, 0)],
        r[(1, 0)] - r[(0, 1)],
    ) * 0.5;
    let sin = s.norm();
    let cos = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    if cos < -0.9 {
        // near pi the skew part degenerates; the quaternion path is
        // well conditioned there
        return nalgebra::Rotation3::from_matrix_unchecked(*r).scaled_axis();
    }
    let angle = sin.atan2(cos);
    if sin < 1e-12 {
        return s; // sin(theta) ~ theta
    }
    s * (angle / sin)
}

/// Right Jacobian of SO(3): d Exp(omega + d) = Exp(omega) Exp(Jr(omega) d) + O(d^2).
fn so3_right_jacobian(omega: &Vector3<f64>) -> Matrix3<f64> {
    let angle = omega.norm();
    let w = skew(omega);
    if angle < 1e-6 {
        return Matrix3::identity() - w * 0.5 + w * w * (1.0 / 6.0);
    }
    let a2 = angle * angle;
    Matrix3::identity() - w * ((1.0 - angle.cos()) / a2)
        + w * w * ((angle - angle.sin()) / (a2 * angle))
}

/// 3x3 essential matrix E = [t]x R.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EssentialMatrix {
    m: Matrix3<f64>,
}

impl EssentialMatrix {
    pub fn from_matrix(m: Matrix3<f64>) -> Self {
        EssentialMatrix { m }
    }

    pub fn from_pose(rotation: &Matrix3<f64>, translation: &Vector3<f64>) -> Self {
        EssentialMatrix { m: skew(translation) * rotation }
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.m
    }

    /// Canonical form: ||E||_F = sqrt(2), sign fixed so the
    /// largest-magnitude entry is positive.
    pub fn canonical(&self) -> Matrix3<f64> {
        let mut e = self.m * (std::f64::consts::SQRT_2 / self.m.norm());
        let mut best = 0.0f64;
        let mut sign = 1.0;
        for v in e.iter() {
            if v.abs() > best {
                best = v.abs();
                sign = v.signum();
            }
        }
        e *= sign;
        e
    }

    /// |det E| of the canonical form.
    pub fn det_residual(&self) -> f64 {
        self.canonical().determinant().abs()
    }

    /// ||2 E E^T E - tr(E E^T) E||_F of the canonical form.
    pub fn trace_constraint_residual(&self) -> f64 {
        let e = self.canonical();
        let eet = e * e.transpose();
        (eet * e * 2.0 - e * eet.trace()).norm()
    }

    /// Frobenius distance between canonical forms; insensitive to the
    /// scale/sign ambiguity of E.
    pub fn canonical_distance(&self, other: &EssentialMatrix) -> f64 {
        (self.canonical() - other.canonical()).norm()
    }
}

/// Minimal 5-parameter essential matrix chart around a base pose.
///
/// theta[0..3] is an axis-angle rotation increment applied on the right of
/// the base rotation; theta[3..5] are tangent-plane coordinates of the
/// translation direction about the base unit vector.
#[derive(Debug, Clone)]
pub struct EssentialParams {
    pub base_rotation: Matrix3<f64>,
    pub base_translation: Vector3<f64>,
    pub theta: Vector5,
    tangent: [Vector3<f64>; 2],
}

/// Deterministic orthonormal basis of the plane normal to t.
fn tangent_basis(t: &Vector3<f64>) -> [Vector3<f64>; 2] {
    let abs = t.abs();
    let e = if abs.x <= abs.y && abs.x <= abs.z {
        Vector3::x()
    } else if abs.y <= abs.z {
        Vector3::y()
    } else {
        Vector3::z()
    };
    let b1 = t.cross(&e).normalize();
    let b2 = t.cross(&b1);
    [b1, b2]
}

impl EssentialParams {
    /// Chart centered at (R0, t0) with theta = 0. `t0` need not be
    /// pre-normalized.
    pub fn from_base(base_rotation: Matrix3<f64>, base_translation: Vector3<f64>) -> Self {
        let t0 = base_translation.normalize();
        let tangent = tangent_basis(&t0);
        EssentialParams {
            base_rotation,
            base_translation: t0,
            theta: Vector5::zeros(),
            tangent,
        }
    }

    pub fn with_theta(mut self, theta: Vector5) -> Self {
        self.theta = theta;
        self
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        let omega = Vector3::new(self.theta[0], self.theta[1], self.theta[2]);
        self.base_rotation * rotation_exp(&omega)
    }

    pub fn translation(&self) -> Vector3<f64> {
        let u = self.base_translation
            + self.tangent[0] * self.theta[3]
            + self.tangent[1] * self.theta[4];
        u.normalize()
    }

    pub fn essential(&self) -> EssentialMatrix {
        EssentialMatrix::from_pose(&self.rotation(), &self.translation())
    }

    /// Chart re-centered at the current pose, theta = 0.
    pub fn rebased(&self) -> EssentialParams {
        EssentialParams::from_base(self.rotation(), self.translation())
    }

    /// E and dE/dtheta at the current theta, in the current chart.
    pub fn essential_and_jacobian(&self) -> (Matrix3<f64>, [Matrix3<f64>; 5]) {
        let omega = Vector3::new(self.theta[0], self.theta[1], self.theta[2]);
        let r = self.base_rotation * rotation_exp(&omega);
        let jr = so3_right_jacobian(&omega);

        let u = self.base_translation
            + self.tangent[0] * self.theta[3]
            + self.tangent[1] * self.theta[4];
        let n = u.norm();
        let t = u / n;
        let e = skew(&t) * r;

        let mut de = [Matrix3::zeros(); 5];
        let tx = skew(&t);
        for k in 0..3 {
            let mut ek = Vector3::zeros();
            ek[k] = 1.0;
            de[k] = tx * r * skew(&(jr * ek));
        }
        for k in 0..2 {
            let b = self.tangent[k];
            let dt = (b - t * t.dot(&b)) / n;
            de[3 + k] = skew(&dt) * r;
        }
        (e, de)
    }

    /// E with first and second derivatives, valid only at the chart
    /// origin (theta = 0). Callers rebase first.
    pub fn origin_jet(&self) -> EpipolarJet {
        debug_assert!(self.theta.norm() < 1e-12, "origin_jet requires theta = 0");
        let r0 = self.base_rotation;
        let t0 = self.base_translation;
        let [b1, b2] = self.tangent;
        let tx = skew(&t0);

        let e = tx * r0;
        let basis = [Vector3::x(), Vector3::y(), Vector3::z()];

        let mut de = [Matrix3::zeros(); 5];
        for k in 0..3 {
            de[k] = tx * r0 * skew(&basis[k]);
        }
        de[3] = skew(&b1) * r0;
        de[4] = skew(&b2) * r0;

        let mut d2e = [[Matrix3::zeros(); 5]; 5];
        // rotation-rotation: d2 Exp at 0 is (Ei Ej + Ej Ei)/2
        for i in 0..3 {
            for j in 0..3 {
                let si = skew(&basis[i]);
                let sj = skew(&basis[j]);
                d2e[i][j] = tx * r0 * (si * sj + sj * si) * 0.5;
            }
        }
        // rotation-translation cross terms
        for k in 0..3 {
            let sk = skew(&basis[k]);
            d2e[k][3] = skew(&b1) * r0 * sk;
            d2e[3][k] = d2e[k][3];
            d2e[k][4] = skew(&b2) * r0 * sk;
            d2e[4][k] = d2e[k][4];
        }
        // translation-translation: d2t/da2 = d2t/db2 = -t0, cross = 0
        d2e[3][3] = -(tx * r0);
        d2e[4][4] = -(tx * r0);

        EpipolarJet { e, de, d2e }
    }
}

/// Essential matrix with derivatives w.r.t. the chart at its origin.
pub struct EpipolarJet {
    pub e: Matrix3<f64>,
    pub de: [Matrix3<f64>; 5],
    pub d2e: [[Matrix3<f64>; 5]; 5],
}

/// Inverse of the chart map: express (R, t) as theta in the given base.
pub fn params_from_pose(
    rotation: &Matrix3<f64>,
    translation: &Vector3<f64>,
    base: &EssentialParams,
) -> Result<EssentialParams, GeometryError> {
    let t = translation.normalize();
    let c = t.dot(&base.base_translation);
    if c <= 1e-9 {
        return Err(GeometryError::ChartSingularity);
    }
    let u = t / c; // scaled so the t0-component is exactly 1
    let a = u.dot(&base.tangent[0]);
    let b = u.dot(&base.tangent[1]);
    let omega = rotation_log(&(base.base_rotation.transpose() * rotation));
    let theta = Vector5::from_column_slice(&[omega.x, omega.y, omega.z, a, b]);
    Ok(base.clone().with_theta(theta))
}

/// The algebraic epipolar residual z = x'^T E x.
pub fn epipolar_residual(
    x: &NormalizedPoint,
    xp: &NormalizedPoint,
    e: &EssentialMatrix,
) -> f64 {
    xp.vector().dot(&(e.matrix() * x.vector()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::CounterRng;
    use approx::assert_abs_diff_eq;

    fn random_rotation(rng: &mut CounterRng) -> Matrix3<f64> {
        let axis = rng.unit_vector();
        let angle = rng.uniform(0.0, 2.0);
        rotation_exp(&(Vector3::new(axis[0], axis[1], axis[2]) * angle))
    }

    #[test]
    fn identity_intrinsics_normalize() {
        let k = CameraIntrinsics::identity();
        let x = normalize_points(&[PixelPoint::new(0.0, 0.0)], &k).unwrap();
        assert_eq!(x[0].x(), 0.0);
        assert_eq!(x[0].y(), 0.0);
        assert_eq!(x[0].vector().z, 1.0);
    }

    #[test]
    fn forced_normalization_example() {
        let k = CameraIntrinsics::new(2.0, 2.0, 1.0, 1.0);
        let x = normalize_points(&[PixelPoint::new(3.0, 5.0)], &k).unwrap();
        assert_abs_diff_eq!(x[0].x(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(x[0].y(), 2.0, epsilon = 1e-12);
    }

    #[test]
    fn normalize_satisfies_kx_eq_p() {
        let k = CameraIntrinsics { fx: 718.0, fy: 720.5, cx: 607.2, cy: 185.2, skew: 0.3 };
        let p = PixelPoint::new(123.4, 456.7);
        let x = normalize_points(&[p], &k).unwrap();
        let back = k.matrix() * x[0].vector();
        assert_abs_diff_eq!(back.x / back.z, p.u, epsilon = 1e-12);
        assert_abs_diff_eq!(back.y / back.z, p.v, epsilon = 1e-12);
    }

    #[test]
    fn normalize_denormalize_round_trip() {
        let mut rng = CounterRng::new(11, "k");
        for _ in 0..50 {
            let k = CameraIntrinsics {
                fx: rng.uniform(100.0, 1500.0),
                fy: rng.uniform(100.0, 1500.0),
                cx: rng.uniform(-50.0, 900.0),
                cy: rng.uniform(-50.0, 900.0),
                skew: rng.uniform(-1.0, 1.0),
            };
            let p = PixelPoint::new(rng.uniform(0.0, 1000.0), rng.uniform(0.0, 1000.0));
            let x = normalize_points(&[p], &k).unwrap();
            let back = denormalize_points(&x, &k);
            assert_abs_diff_eq!(back[0].u, p.u, epsilon = 1e-10);
            assert_abs_diff_eq!(back[0].v, p.v, epsilon = 1e-10);
        }
    }

    #[test]
    fn zero_focal_is_invalid() {
        let k = CameraIntrinsics::new(0.0, 1.0, 0.0, 0.0);
        assert!(matches!(
            normalize_points(&[PixelPoint::new(1.0, 1.0)], &k),
            Err(GeometryError::InvalidIntrinsics)
        ));
    }

    #[test]
    fn essential_of_zero_theta_is_skew_of_ez() {
        let params = EssentialParams::from_base(Matrix3::identity(), Vector3::z());
        let e = params.essential();
        let expected = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        assert_abs_diff_eq!(e.matrix(), &expected, epsilon = 1e-15);
    }

    #[test]
    fn essential_invariants_hold_for_random_theta() {
        let mut rng = CounterRng::new(5, "theta");
        for _ in 0..100 {
            let base = EssentialParams::from_base(
                random_rotation(&mut rng),
                Vector3::new(rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), rng.uniform(0.2, 1.0)),
            );
            let mut theta = Vector5::zeros();
            for k in 0..5 {
                theta[k] = rng.uniform(-0.3, 0.3);
            }
            let params = base.with_theta(theta);
            let e = params.essential();
            assert!(e.det_residual() < 1e-10);
            assert!(e.trace_constraint_residual() < 1e-10);
            let r = params.rotation();
            assert!((r.transpose() * r - Matrix3::identity()).norm() < 1e-12);
            assert!((r.determinant() - 1.0).abs() < 1e-12);
            assert!((params.translation().norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn chart_origin_round_trip() {
        let base = EssentialParams::from_base(Matrix3::identity(), Vector3::new(0.3, -0.2, 0.9));
        let p = params_from_pose(&base.rotation(), &base.translation(), &base).unwrap();
        assert!(p.theta.norm() < 1e-12);
    }

    #[test]
    fn pose_round_trip_through_chart() {
        let mut rng = CounterRng::new(9, "pose");
        for _ in 0..100 {
            let r = random_rotation(&mut rng);
            let t = Vector3::from(rng.unit_vector());
            // chart centered at the pose itself
            let centered = EssentialParams::from_base(r, t);
            let p = params_from_pose(&r, &t, &centered).unwrap();
            assert!(p.theta.norm() < 1e-10);
            // identity-centered chart (valid when t not antipodal to base)
            let ident = EssentialParams::from_base(Matrix3::identity(), Vector3::z());
            if t.z > 1e-3 {
                let q = params_from_pose(&r, &t, &ident).unwrap();
                let e1 = EssentialMatrix::from_pose(&r, &t);
                let e2 = q.essential();
                assert!(e1.canonical_distance(&e2) < 1e-10);
            }
        }
    }

    #[test]
    fn antipodal_translation_is_chart_singularity() {
        let base = EssentialParams::from_base(Matrix3::identity(), Vector3::z());
        let err = params_from_pose(&Matrix3::identity(), &(-Vector3::z()), &base);
        assert!(matches!(err, Err(GeometryError::ChartSingularity)));
    }

    #[test]
    fn epipolar_residual_hand_arithmetic() {
        let e = EssentialMatrix::from_matrix(skew(&Vector3::z()));
        let z0 = epipolar_residual(&NormalizedPoint::new(0.0, 0.0), &NormalizedPoint::new(0.0, 0.0), &e);
        assert_eq!(z0, 0.0);
        // E x = [e_z]x (1,0,1) = (0,1,0); x' = (0,1,1) gives 1
        let z1 = epipolar_residual(&NormalizedPoint::new(1.0, 0.0), &NormalizedPoint::new(0.0, 1.0), &e);
        assert_abs_diff_eq!(z1, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let mut rng = CounterRng::new(21, "jac");
        for _ in 0..20 {
            let base = EssentialParams::from_base(
                random_rotation(&mut rng),
                Vector3::from(rng.unit_vector()),
            );
            let mut theta = Vector5::zeros();
            for k in 0..5 {
                theta[k] = rng.uniform(-0.2, 0.2);
            }
            let params = base.with_theta(theta);
            let (_, de) = params.essential_and_jacobian();
            let h = 1e-6;
            for k in 0..5 {
                let mut tp = theta;
                tp[k] += h;
                let mut tm = theta;
                tm[k] -= h;
                let ep = params.clone().with_theta(tp).essential();
                let em = params.clone().with_theta(tm).essential();
                let fd = (ep.matrix() - em.matrix()) / (2.0 * h);
                assert!((fd - de[k]).norm() < 1e-7, "component {k}");
            }
        }
    }

    #[test]
    fn origin_jet_matches_finite_differences() {
        let mut rng = CounterRng::new(31, "jet");
        for _ in 0..10 {
            let params = EssentialParams::from_base(
                random_rotation(&mut rng),
                Vector3::from(rng.unit_vector()),
            );
            let jet = params.origin_jet();
            let h = 1e-5;
            for i in 0..5 {
                for j in 0..5 {
                    let mut tpp = Vector5::zeros();
                    tpp[i] += h;
                    tpp[j] += h;
                    let mut tpm = Vector5::zeros();
                    tpm[i] += h;
                    tpm[j] -= h;
                    let mut tmp = Vector5::zeros();
                    tmp[i] -= h;
                    tmp[j] += h;
                    let mut tmm = Vector5::zeros();
                    tmm[i] -= h;
                    tmm[j] -= h;
                    let f = |t: Vector5| *params.clone().with_theta(t).essential().matrix();
                    let fd = (f(tpp) - f(tpm) - f(tmp) + f(tmm)) / (4.0 * h * h);
                    assert!(
                        (fd - jet.d2e[i][j]).norm() < 1e-4,
                        "second derivative ({i},{j}) mismatch: {}",
                        (fd - jet.d2e[i][j]).norm()
                    );
                }
            }
        }
    }

    #[test]
    fn theta_to_pose_to_theta_reproduces_e() {
        let mut rng = CounterRng::new(41, "rt");
        for _ in 0..100 {
            let base = EssentialParams::from_base(
                random_rotation(&mut rng),
                Vector3::from(rng.unit_vector()),
            );
            let mut theta = Vector5::zeros();
            for k in 0..5 {
                theta[k] = rng.uniform(-0.2, 0.2);
            }
            let params = base.clone().with_theta(theta);
            let e = params.essential();
            let r = params.rotation();
            let t = params.translation();
            let back = params_from_pose(&r, &t, &base).unwrap();
            assert!(e.canonical_distance(&back.essential()) < 1e-9);
        }
    }

    proptest::proptest! {
        #[test]
        fn rotation_log_inverts_exp(
            wx in -1.8f64..1.8,
            wy in -1.8f64..1.8,
            wz in -1.8f64..1.8,
        ) {
            let w = Vector3::new(wx, wy, wz);
            proptest::prop_assume!(w.norm() < std::f64::consts::PI - 1e-3);
            let back = rotation_log(&rotation_exp(&w));
            proptest::prop_assert!((back - w).norm() < 1e-9 * (1.0 + w.norm()));
        }

        #[test]
        fn essential_invariants_hold_for_any_pose(
            wx in -1.0f64..1.0,
            wy in -1.0f64..1.0,
            wz in -1.0f64..1.0,
            tx in -1.0f64..1.0,
            ty in -1.0f64..1.0,
            tz in -1.0f64..1.0,
        ) {
            let t = Vector3::new(tx, ty, tz);
            proptest::prop_assume!(t.norm() > 1e-3);
            let e = EssentialMatrix::from_pose(&rotation_exp(&Vector3::new(wx, wy, wz)), &t);
            proptest::prop_assert!(e.det_residual() < 1e-12);
            proptest::prop_assert!(e.trace_constraint_residual() < 1e-12);
        }
    }
}
