//! Upper-level training losses: the epipolar loss with its analytic
//! partials, census-based photometric loss, forward-backward consistency,
//! edge-aware smoothness, the occlusion loss, and the multi-scale totals.

use nalgebra::{Vector2, Vector3};
use thiserror::Error;

use crate::geometry::{EssentialParams, FlowField, NormalizedCorrespondenceSet, Vector5};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("mask selects no pixels")]
    EmptyMask,
    #[error("point(s) {0:?} map to the epipole; epipolar line undefined")]
    EpipoleSingularity(Vec<usize>),
    #[error("loss configuration: {0}")]
    ConfigError(String),
}

/// RGB image with intensities in [0, 1].
#[derive(Debug, Clone)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    data: Vec<[f64; 3]>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<[f64; 3]>) -> Self {
        assert_eq!(data.len(), width * height);
        debug_assert!(data.iter().flatten().all(|v| v.is_finite()));
        Image { width, height, data }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(f64, f64) -> [f64; 3]) -> Self {
        let data = (0..width * height)
            .map(|i| f((i % width) as f64, (i / width) as f64))
            .collect();
        Image::new(width, height, data)
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let xi = x.min(self.width - 1);
        let yi = y.min(self.height - 1);
        self.data[yi * self.width + xi]
    }

    pub fn data(&self) -> &[[f64; 3]] {
        &self.data
    }

    fn gray(&self, x: i64, y: i64) -> f64 {
        let xi = x.clamp(0, self.width as i64 - 1) as usize;
        let yi = y.clamp(0, self.height as i64 - 1) as usize;
        let p = self.data[yi * self.width + xi];
        (p[0] + p[1] + p[2]) / 3.0
    }

    /// 2:1 downsampling by 2x2 box average (clamped at odd borders).
    pub fn half(&self) -> Image {
        let w = (self.width / 2).max(1);
        let h = (self.height / 2).max(1);
        let mut data = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0.0; 3];
                for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    let p = self.pixel(2 * x + dx, 2 * y + dy);
                    for c in 0..3 {
                        acc[c] += 0.25 * p[c];
                    }
                }
                data.push(acc);
            }
        }
        Image::new(w, h, data)
    }
}

/// Five-scale image pyramid, full resolution first.
pub fn image_pyramid(img: &Image, levels: usize) -> Vec<Image> {
    let mut out = vec![img.clone()];
    for _ in 1..levels {
        out.push(out.last().unwrap().half());
    }
    out
}

/// Five-scale flow pyramid: 2x2 average of vectors, halved in magnitude to
/// stay in the units of the downsampled grid.
pub fn flow_pyramid(flow: &FlowField, levels: usize) -> Vec<FlowField> {
    let mut out = vec![flow.clone()];
    for _ in 1..levels {
        let prev = out.last().unwrap();
        let w = (prev.width / 2).max(1);
        let h = (prev.height / 2).max(1);
        let mut data = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let mut acc = Vector2::zeros();
                for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    let xi = (2 * x + dx).min(prev.width - 1);
                    let yi = (2 * y + dy).min(prev.height - 1);
                    acc += prev.get(xi, yi);
                }
                data.push(acc * 0.125); // average of four, then halve
            }
        }
        out.push(FlowField::new(w, h, data));
    }
    out
}

/// Per-pixel non-occlusion indicator and its population count.
#[derive(Debug, Clone)]
pub struct OcclusionMask {
    pub mask: Vec<bool>,
    pub count: usize,
}

impl OcclusionMask {
    pub fn new(mask: Vec<bool>) -> Self {
        let count = mask.iter().filter(|&&m| m).count();
        OcclusionMask { mask, count }
    }

    pub fn full(n: usize) -> Self {
        OcclusionMask { mask: vec![true; n], count: n }
    }
}

/// Weights and constants for the full loss stack.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    pub scale_weights: [f64; 5],
    pub photometric: f64,
    pub consistency: f64,
    pub smoothness: f64,
    pub epipolar: f64,
    pub occlusion: f64,
    pub charbonnier_eps: f64,
    pub charbonnier_gamma: f64,
    pub smoothness_alpha: f64,
    pub census_window: usize,
    pub census_tolerance: f64,
    pub fb_beta1: f64,
    pub fb_beta2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            scale_weights: [1.0, 0.34, 0.31, 0.27, 0.08],
            photometric: 1.0,
            consistency: 0.1,
            smoothness: 0.1,
            epipolar: 0.0,
            occlusion: 0.0,
            charbonnier_eps: 1e-3,
            charbonnier_gamma: 0.45,
            smoothness_alpha: 10.0,
            census_window: 3,
            census_tolerance: 0.04,
            fb_beta1: 0.01,
            fb_beta2: 0.5,
        }
    }
}

impl LossWeights {
    pub fn preset(name: &str) -> Result<LossWeights, LossError> {
        let base = LossWeights::default();
        let w = match name {
            "kitti_baseline" => LossWeights {
                photometric: 1.0,
                consistency: 0.1,
                smoothness: 0.1,
                epipolar: 0.0,
                occlusion: 0.0,
                ..base
            },
            "kitti_teacher" => LossWeights {
                photometric: 1.0,
                consistency: 0.1,
                smoothness: 0.1,
                epipolar: 1000.0,
                occlusion: 0.0,
                ..base
            },
            "kitti_student" => LossWeights {
                photometric: 1.0,
                consistency: 0.0,
                smoothness: 0.0,
                epipolar: 1000.0,
                occlusion: 1.0,
                ..base
            },
            "rgbd" => LossWeights {
                photometric: 1.0,
                consistency: 0.1,
                smoothness: 1.0,
                epipolar: 100.0,
                occlusion: 1.0,
                ..base
            },
            other => {
                return Err(LossError::ConfigError(format!("unknown preset '{other}'")));
            }
        };
        Ok(w)
    }

    /// Parse `key=value` lines; `#` starts a comment. A `preset` key loads
    /// the named preset first, then later keys override its fields.
    pub fn from_config_str(text: &str) -> Result<LossWeights, LossError> {
        let mut w = LossWeights::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(LossError::ConfigError(format!(
                    "line {}: expected key=value, got '{line}'",
                    lineno + 1
                )));
            };
            let key = key.trim();
            let value = value.trim();
            let parse = |v: &str| -> Result<f64, LossError> {
                v.parse::<f64>().map_err(|_| {
                    LossError::ConfigError(format!("line {}: bad number '{v}'", lineno + 1))
                })
            };
            match key {
                "preset" => w = LossWeights::preset(value)?,
                "lambda_p" => w.photometric = parse(value)?,
                "lambda_c" => w.consistency = parse(value)?,
                "lambda_s" => w.smoothness = parse(value)?,
                "lambda_e" => w.epipolar = parse(value)?,
                "lambda_o" => w.occlusion = parse(value)?,
                "alpha" => w.smoothness_alpha = parse(value)?,
                "charbonnier_eps" => w.charbonnier_eps = parse(value)?,
                "charbonnier_gamma" => w.charbonnier_gamma = parse(value)?,
                "census_tolerance" => w.census_tolerance = parse(value)?,
                "census_window" => {
                    w.census_window = parse(value)? as usize;
                }
                "beta1" => w.fb_beta1 = parse(value)?,
                "beta2" => w.fb_beta2 = parse(value)?,
                "scale_weights" => {
                    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
                    if parts.len() != 5 {
                        return Err(LossError::ConfigError(format!(
                            "line {}: scale_weights needs 5 entries",
                            lineno + 1
                        )));
                    }
                    for (k, p) in parts.iter().enumerate() {
                        w.scale_weights[k] = parse(p)?;
                    }
                }
                other => {
                    return Err(LossError::ConfigError(format!(
                        "line {}: unknown key '{other}'",
                        lineno + 1
                    )));
                }
            }
        }
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<(), LossError> {
        let all = [
            self.photometric,
            self.consistency,
            self.smoothness,
            self.epipolar,
            self.occlusion,
            self.smoothness_alpha,
        ];
        if all.iter().chain(self.scale_weights.iter()).any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(LossError::ConfigError("weights must be finite and >= 0".into()));
        }
        if !(self.charbonnier_eps > 0.0) {
            return Err(LossError::ConfigError("charbonnier_eps must be > 0".into()));
        }
        if self.census_window < 3 || self.census_window % 2 == 0 {
            return Err(LossError::ConfigError("census window must be odd and >= 3".into()));
        }
        Ok(())
    }
}

/// Generalized Charbonnier penalty, element-wise average:
/// (1/n) sum (z_i^2 + eps^2)^gamma.
pub fn charbonnier(z: &[f64], eps: f64, gamma: f64) -> f64 {
    assert!(eps > 0.0);
    if z.is_empty() {
        return 0.0;
    }
    z.iter().map(|&v| (v * v + eps * eps).powf(gamma)).sum::<f64>() / z.len() as f64
}

/// Epipolar loss value with the analytic partials needed for the total
/// derivative: per-point d/dx'_(1,2) and d/dtheta.
#[derive(Debug, Clone)]
pub struct EpipolarLoss {
    pub value: f64,
    /// Per correspondence: gradient w.r.t. the first two components of x'.
    pub d_xp: Vec<Vector2<f64>>,
    pub d_theta: Vector5,
}

impl EpipolarLoss {
    /// Chain the x' partials through x' = K'^-1 (p + v) into a flat 2N
    /// flow gradient for the total-derivative assembly.
    pub fn flow_gradient(&self, corr: &NormalizedCorrespondenceSet) -> Vec<f64> {
        let a_t = corr.dxp_dflow.transpose();
        let mut out = Vec::with_capacity(2 * self.d_xp.len());
        for g in &self.d_xp {
            let gv = a_t * g;
            out.push(gv.x);
            out.push(gv.y);
        }
        out
    }
}

/// Sum of squared distances from x' to its epipolar line E x:
/// L_e = sum (x'^T E x)^2 / ((Ex)_1^2 + (Ex)_2^2).
pub fn epipolar_loss(
    corr: &NormalizedCorrespondenceSet,
    params: &EssentialParams,
) -> Result<EpipolarLoss, LossError> {
    let jet = params.origin_jet();
    let mut value = 0.0;
    let mut d_xp = Vec::with_capacity(corr.len());
    let mut d_theta = Vector5::zeros();
    let mut singular = Vec::new();
    for i in 0..corr.len() {
        let x = corr.x[i].vector();
        let xp = corr.xp[i].vector();
        let ex = jet.e * x;
        let d = ex.x * ex.x + ex.y * ex.y;
        if d <= 1e-24 {
            singular.push(i);
            continue;
        }
        let z = xp.dot(&ex);
        value += z * z / d;
        d_xp.push(Vector2::new(2.0 * z / d * ex.x, 2.0 * z / d * ex.y));
        for k in 0..5 {
            let dex = jet.de[k] * x;
            let dz = xp.dot(&dex);
            let dd = 2.0 * (ex.x * dex.x + ex.y * dex.y);
            d_theta[k] += (2.0 * z * dz * d - z * z * dd) / (d * d);
        }
    }
    if !singular.is_empty() {
        return Err(LossError::EpipoleSingularity(singular));
    }
    Ok(EpipolarLoss { value, d_xp, d_theta })
}

/// Ternary census signatures over a square window, one entry per
/// non-center neighbor, stored as f64 so warped signatures can be sampled
/// bilinearly.
#[derive(Debug, Clone)]
pub struct CensusField {
    pub width: usize,
    pub height: usize,
    pub elems: usize,
    data: Vec<f64>,
}

impl CensusField {
    pub fn signature(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.elems;
        &self.data[i..i + self.elems]
    }

    /// Bilinear sample of the signature at a fractional position
    /// (clamped), written into `out`.
    pub fn sample_into(&self, x: f64, y: f64, out: &mut [f64]) {
        let xf = x.clamp(0.0, (self.width - 1) as f64);
        let yf = y.clamp(0.0, (self.height - 1) as f64);
        let x0 = xf.floor() as usize;
        let y0 = yf.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = xf - x0 as f64;
        let fy = yf - y0 as f64;
        let s00 = self.signature(x0, y0);
        let s10 = self.signature(x1, y0);
        let s01 = self.signature(x0, y1);
        let s11 = self.signature(x1, y1);
        for k in 0..self.elems {
            out[k] = (1.0 - fy) * ((1.0 - fx) * s00[k] + fx * s10[k])
                + fy * ((1.0 - fx) * s01[k] + fx * s11[k]);
        }
    }
}

/// Ternary census transform on the grayscale image: each neighbor scores
/// -1/0/+1 against the center within `tolerance`. Borders clamp.
pub fn census_transform(img: &Image, window: usize, tolerance: f64) -> CensusField {
    assert!(window >= 3 && window % 2 == 1, "window must be odd and >= 3");
    let r = (window / 2) as i64;
    let elems = window * window - 1;
    let mut data = Vec::with_capacity(img.width * img.height * elems);
    for y in 0..img.height as i64 {
        for x in 0..img.width as i64 {
            let center = img.gray(x, y);
            for dy in -r..=r {
                for dx in -r..=r {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let v = img.gray(x + dx, y + dy);
                    data.push(if v > center + tolerance {
                        1.0
                    } else if v < center - tolerance {
                        -1.0
                    } else {
                        0.0
                    });
                }
            }
        }
    }
    CensusField { width: img.width, height: img.height, elems, data }
}

/// Forward-backward occlusion estimate: pixel i is occluded when
/// ||V_f(p) + V_b(p + v)||^2 > beta1 (||V_f(p)||^2 + ||V_b(p+v)||^2) + beta2,
/// or when p + v leaves the frame.
pub fn occlusion_mask(
    forward: &FlowField,
    backward: &FlowField,
    beta1: f64,
    beta2: f64,
) -> OcclusionMask {
    assert_eq!((forward.width, forward.height), (backward.width, backward.height));
    let mut mask = vec![false; forward.width * forward.height];
    for y in 0..forward.height {
        for x in 0..forward.width {
            let idx = y * forward.width + x;
            if !forward.is_valid(idx) {
                continue;
            }
            let vf = forward.get(x, y);
            let qx = x as f64 + vf.x;
            let qy = y as f64 + vf.y;
            if qx < 0.0
                || qy < 0.0
                || qx > (forward.width - 1) as f64
                || qy > (forward.height - 1) as f64
            {
                continue;
            }
            let vb = backward.sample(qx, qy);
            let residual = (vf + vb).norm_squared();
            if residual <= beta1 * (vf.norm_squared() + vb.norm_squared()) + beta2 {
                mask[idx] = true;
            }
        }
    }
    OcclusionMask::new(mask)
}

/// Census photometric loss: masked mean of the Charbonnier penalty over
/// signature differences between I at p and I' warped to p + v.
pub fn photometric_loss(
    img: &Image,
    img_second: &Image,
    flow: &FlowField,
    mask: &OcclusionMask,
    weights: &LossWeights,
) -> Result<f64, LossError> {
    assert_eq!((img.width, img.height), (flow.width, flow.height));
    if mask.count == 0 {
        return Err(LossError::EmptyMask);
    }
    let c1 = census_transform(img, weights.census_window, weights.census_tolerance);
    let c2 = census_transform(img_second, weights.census_window, weights.census_tolerance);
    let mut warped = vec![0.0; c2.elems];
    let mut diff = vec![0.0; c2.elems];
    let mut total = 0.0;
    for y in 0..img.height {
        for x in 0..img.width {
            let idx = y * img.width + x;
            if !mask.mask[idx] {
                continue;
            }
            let v = flow.get(x, y);
            c2.sample_into(x as f64 + v.x, y as f64 + v.y, &mut warped);
            let sig = c1.signature(x, y);
            for k in 0..c1.elems {
                diff[k] = sig[k] - warped[k];
            }
            total += charbonnier(&diff, weights.charbonnier_eps, weights.charbonnier_gamma);
        }
    }
    Ok(total / mask.count as f64)
}

/// Forward-backward consistency loss: masked mean Charbonnier of
/// V_f(p) + V_b(p + v).
pub fn fb_consistency_loss(
    forward: &FlowField,
    backward: &FlowField,
    mask: &OcclusionMask,
    weights: &LossWeights,
) -> Result<f64, LossError> {
    assert_eq!((forward.width, forward.height), (backward.width, backward.height));
    if mask.count == 0 {
        return Err(LossError::EmptyMask);
    }
    let mut total = 0.0;
    for y in 0..forward.height {
        for x in 0..forward.width {
            let idx = y * forward.width + x;
            if !mask.mask[idx] {
                continue;
            }
            let vf = forward.get(x, y);
            let vb = backward.sample(x as f64 + vf.x, y as f64 + vf.y);
            let r = vf + vb;
            total += charbonnier(&[r.x, r.y], weights.charbonnier_eps, weights.charbonnier_gamma);
        }
    }
    Ok(total / mask.count as f64)
}

/// Edge-aware smoothness: (1/2N) sum over pixels and axes of
/// exp(-(alpha/3) ||dI/da||_1) ||dv/da||_1 with forward differences; the
/// last column/row contributes zero for its axis.
pub fn smoothness_loss(img: &Image, flow: &FlowField, alpha: f64) -> f64 {
    assert_eq!((img.width, img.height), (flow.width, flow.height));
    let n = img.width * img.height;
    let mut total = 0.0;
    for y in 0..img.height {
        for x in 0..img.width {
            let v = flow.get(x, y);
            if x + 1 < img.width {
                let p0 = img.pixel(x, y);
                let p1 = img.pixel(x + 1, y);
                let gi: f64 = (0..3).map(|c| (p1[c] - p0[c]).abs()).sum();
                let dv = flow.get(x + 1, y) - v;
                total += (-(alpha / 3.0) * gi).exp() * (dv.x.abs() + dv.y.abs());
            }
            if y + 1 < img.height {
                let p0 = img.pixel(x, y);
                let p1 = img.pixel(x, y + 1);
                let gi: f64 = (0..3).map(|c| (p1[c] - p0[c]).abs()).sum();
                let dv = flow.get(x, y + 1) - v;
                total += (-(alpha / 3.0) * gi).exp() * (dv.x.abs() + dv.y.abs());
            }
        }
    }
    total / (2.0 * n as f64)
}

/// Student supervision on artificially occluded regions: masked mean
/// Charbonnier of student minus teacher flow.
pub fn occlusion_loss(
    student: &FlowField,
    teacher: &FlowField,
    region: &OcclusionMask,
    weights: &LossWeights,
) -> Result<f64, LossError> {
    assert_eq!((student.width, student.height), (teacher.width, teacher.height));
    if region.count == 0 {
        return Err(LossError::EmptyMask);
    }
    let mut total = 0.0;
    for idx in 0..region.mask.len() {
        if !region.mask[idx] {
            continue;
        }
        let d = student.at(idx) - teacher.at(idx);
        total += charbonnier(&[d.x, d.y], weights.charbonnier_eps, weights.charbonnier_gamma);
    }
    Ok(total / region.count as f64)
}

/// Per-scale loss values feeding the multi-scale total.
#[derive(Debug, Clone, Copy, Default)]
pub struct ScaleLosses {
    pub photometric: f64,
    pub consistency: f64,
    pub smoothness: f64,
    pub occlusion: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainingMode {
    Teacher,
    Student,
}

#[derive(Debug, Clone)]
pub struct TotalLoss {
    pub total: f64,
    pub photometric: f64,
    pub consistency: f64,
    pub smoothness: f64,
    pub occlusion: f64,
    pub epipolar: f64,
}

/// Multi-scale total: sum over the five scales of the weighted per-scale
/// terms, plus the epipolar loss applied at full resolution only.
pub fn total_loss(
    scales: &[ScaleLosses],
    epipolar: f64,
    weights: &LossWeights,
    mode: TrainingMode,
) -> Result<TotalLoss, LossError> {
    if scales.len() != 5 {
        return Err(LossError::ConfigError(format!(
            "expected 5 scales of losses, got {}",
            scales.len()
        )));
    }
    let mut lp = 0.0;
    let mut lc = 0.0;
    let mut ls = 0.0;
    let mut lo = 0.0;
    for (k, s) in scales.iter().enumerate() {
        let w = weights.scale_weights[k];
        lp += w * weights.photometric * s.photometric;
        lc += w * weights.consistency * s.consistency;
        ls += w * weights.smoothness * s.smoothness;
        if mode == TrainingMode::Student {
            let o = s.occlusion.ok_or_else(|| {
                LossError::ConfigError(format!("student mode: missing occlusion loss at scale {k}"))
            })?;
            lo += w * weights.occlusion * o;
        }
    }
    let le = weights.epipolar * epipolar;
    Ok(TotalLoss {
        total: lp + lc + ls + lo + le,
        photometric: lp,
        consistency: lc,
        smoothness: ls,
        occlusion: lo,
        epipolar: le,
    })
}

/// Independent point-to-line form of the epipolar loss used to cross-check
/// `epipolar_loss`: squared perpendicular distance of x' to the line E x.
pub fn point_line_epipolar_loss(
    corr: &NormalizedCorrespondenceSet,
    params: &EssentialParams,
) -> f64 {
    let e = params.essential();
    let mut total = 0.0;
    for i in 0..corr.len() {
        let line: Vector3<f64> = e.matrix() * corr.x[i].vector();
        let xp = corr.xp[i].vector();
        let signed = line.dot(&xp) / line.xy().norm();
        total += signed * signed;
    }
    total
}
