//! Deterministic synthetic two-view scene generation: the ground-truth
//! oracle behind estimation, gradient and metric tests.

use nalgebra::{Matrix3, Vector2, Vector3};
use thiserror::Error;

use crate::geometry::{
    rotation_exp, skew, CameraIntrinsics, EssentialMatrix, FlowField, NormalizedCorrespondenceSet,
};
use crate::rng::CounterRng;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("scene configuration is degenerate: {0}")]
    DegenerateScene(String),
}

/// How per-pixel depth is produced.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DepthModel {
    /// Independent uniform depth per pixel within the depth range.
    RandomUniform,
    /// A tilted plane spanning the depth range; admits an exact backward
    /// flow and analytic occlusion reasoning.
    Plane,
}

#[derive(Debug, Clone)]
pub struct SceneConfig {
    /// Correspondence grid size: one sample every `pixel_stride` pixels.
    pub width: usize,
    pub height: usize,
    /// Intrinsics of the underlying (full-resolution) camera.
    pub intrinsics: CameraIntrinsics,
    pub intrinsics_second: CameraIntrinsics,
    /// Spacing of grid samples in full-resolution pixels. The stored flow
    /// lives on the grid, so it is equivalently a dense flow of a camera
    /// with intrinsics scaled by 1/stride. A wide effective field of view
    /// is what makes the epipolar geometry well conditioned; sparse
    /// sampling keeps the correspondence count at benchmark size.
    pub pixel_stride: f64,
    /// Rotation angle drawn uniformly from this range (radians).
    pub rotation_range: (f64, f64),
    /// Translation length in scene units; zero is rejected.
    pub baseline: f64,
    pub depth_range: (f64, f64),
    pub depth_model: DepthModel,
    /// Shrink factor applied to the forward (z) component of the sampled
    /// translation direction. Lateral motion keeps points away from the
    /// epipole, which the algebraic residual needs to separate outliers.
    pub translation_forward_damping: f64,
    /// Std-dev of Gaussian noise added to the flow, in full-resolution
    /// pixels.
    pub pixel_noise: f64,
    pub outlier_fraction: f64,
    /// Max magnitude of the uniform outlier displacement, in
    /// full-resolution pixels.
    pub outlier_max_displacement: f64,
    /// Planted outliers are re-drawn until their algebraic residual
    /// exceeds this value; an accidental displacement along the epipolar
    /// line would otherwise carry an unidentifiable "outlier" label.
    pub outlier_min_residual: f64,
    /// Insert a fronto-parallel occluder patch (Plane model only).
    pub with_occluder: bool,
    pub rng_seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            width: 80,
            height: 25,
            intrinsics: CameraIntrinsics::new(1500.0, 1500.0, 600.0, 187.5),
            intrinsics_second: CameraIntrinsics::new(1500.0, 1500.0, 600.0, 187.5),
            pixel_stride: 15.0,
            rotation_range: (0.01, 0.05),
            baseline: 0.3,
            depth_range: (4.0, 12.0),
            depth_model: DepthModel::RandomUniform,
            translation_forward_damping: 0.25,
            pixel_noise: 0.0,
            outlier_fraction: 0.0,
            outlier_max_displacement: 150.0,
            outlier_min_residual: 0.003,
            with_occluder: false,
            rng_seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.depth_range.0 <= 0.0 || self.depth_range.1 < self.depth_range.0 {
            return Err(SynthError::DegenerateScene("depth range must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.outlier_fraction) {
            return Err(SynthError::DegenerateScene("outlier fraction must be in [0,1)".into()));
        }
        if self.baseline == 0.0 {
            return Err(SynthError::DegenerateScene(
                "zero baseline leaves the essential matrix undefined".into(),
            ));
        }
        if self.width * self.height < 5 {
            return Err(SynthError::DegenerateScene("fewer than 5 pixels".into()));
        }
        if !(self.pixel_stride > 0.0) || !self.pixel_stride.is_finite() {
            return Err(SynthError::DegenerateScene("pixel stride must be positive".into()));
        }
        Ok(())
    }

    /// Intrinsics expressed in grid units (one unit = `pixel_stride`
    /// full-resolution pixels). This is the camera the stored flow and
    /// the derived correspondences live in.
    pub fn grid_intrinsics(&self) -> CameraIntrinsics {
        self.intrinsics.scaled(1.0 / self.pixel_stride)
    }

    pub fn grid_intrinsics_second(&self) -> CameraIntrinsics {
        self.intrinsics_second.scaled(1.0 / self.pixel_stride)
    }
}

/// Axis-aligned rectangular occluder in the plane z = depth (camera 1 frame).
#[derive(Debug, Clone, Copy)]
pub struct Occluder {
    pub depth: f64,
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub config: SceneConfig,
    pub rotation: Matrix3<f64>,
    /// Unit translation direction; actual translation is `direction * scale`.
    pub translation_dir: Vector3<f64>,
    pub scale: f64,
    pub points: Vec<Vector3<f64>>,
    pub depths: Vec<f64>,
    pub flow_clean: FlowField,
    pub flow: FlowField,
    pub backward_flow: Option<FlowField>,
    /// true = the correspondence obeys the planted epipolar geometry.
    pub inlier_labels: Vec<bool>,
    /// true = non-occluded (matches the loss-mask convention).
    pub non_occluded: Vec<bool>,
    pub occluder: Option<Occluder>,
}

impl SyntheticScene {
    pub fn essential(&self) -> EssentialMatrix {
        EssentialMatrix::from_pose(&self.rotation, &self.translation_dir)
    }

    pub fn ground_truth_params(&self) -> crate::geometry::EssentialParams {
        crate::geometry::EssentialParams::from_base(self.rotation, self.translation_dir)
    }

    /// Correspondences from the (noisy) flow, valid pixels only.
    pub fn correspondences(&self) -> NormalizedCorrespondenceSet {
        NormalizedCorrespondenceSet::from_flow(
            &self.flow,
            &self.config.grid_intrinsics(),
            &self.config.grid_intrinsics_second(),
        )
        .expect("scene intrinsics are invertible")
    }

    /// Correspondences from the noise-free flow.
    pub fn clean_correspondences(&self) -> NormalizedCorrespondenceSet {
        NormalizedCorrespondenceSet::from_flow(
            &self.flow_clean,
            &self.config.grid_intrinsics(),
            &self.config.grid_intrinsics_second(),
        )
        .expect("scene intrinsics are invertible")
    }

    /// Planted inlier labels restricted to the pixels a correspondence set
    /// was built from.
    pub fn labels_for(&self, corr: &NormalizedCorrespondenceSet) -> Vec<bool> {
        corr.indices.iter().map(|&i| self.inlier_labels[i]).collect()
    }
}

struct PlaneGeometry {
    normal: Vector3<f64>,
    offset: f64, // plane: normal . X = offset
}

fn plane_for_config(cfg: &SceneConfig) -> PlaneGeometry {
    // Mild tilt so depth varies across the image but stays within range.
    let mid = 0.5 * (cfg.depth_range.0 + cfg.depth_range.1);
    let normal = Vector3::new(0.08, -0.05, 1.0).normalize();
    PlaneGeometry { normal, offset: normal.z * mid }
}

fn occluder_for_config(cfg: &SceneConfig) -> Occluder {
    let near = cfg.depth_range.0 * 0.45;
    let kinv = cfg.grid_intrinsics().inverse_matrix().expect("valid intrinsics");
    // Patch covering roughly the central third of the view at the near depth.
    let lo = kinv * Vector3::new(cfg.width as f64 * 0.35, cfg.height as f64 * 0.35, 1.0);
    let hi = kinv * Vector3::new(cfg.width as f64 * 0.68, cfg.height as f64 * 0.68, 1.0);
    Occluder {
        depth: near,
        x_range: (lo.x * near, hi.x * near),
        y_range: (lo.y * near, hi.y * near),
    }
}

/// First surface hit along a camera-1 ray direction `r` (r.z == 1).
fn first_hit(
    r: &Vector3<f64>,
    plane: &PlaneGeometry,
    occluder: Option<&Occluder>,
) -> Vector3<f64> {
    if let Some(occ) = occluder {
        let p = r * occ.depth;
        if p.x >= occ.x_range.0
            && p.x <= occ.x_range.1
            && p.y >= occ.y_range.0
            && p.y <= occ.y_range.1
        {
            return p;
        }
    }
    let s = plane.offset / plane.normal.dot(r);
    r * s
}

pub fn generate_scene(cfg: &SceneConfig) -> Result<SyntheticScene, SynthError> {
    cfg.validate()?;
    let (w, h) = (cfg.width, cfg.height);
    let n = w * h;
    // All geometry below works in grid units; noise and outlier sizes are
    // quoted in full-resolution pixels and rescaled once here.
    let stride = cfg.pixel_stride;
    let kinv = cfg
        .grid_intrinsics()
        .inverse_matrix()
        .map_err(|_| SynthError::DegenerateScene("non-invertible intrinsics".into()))?;
    let kp = cfg.grid_intrinsics_second().matrix();

    let mut pose_rng = CounterRng::new(cfg.rng_seed, "pose");
    let axis = Vector3::from(pose_rng.unit_vector());
    let angle = pose_rng.uniform(cfg.rotation_range.0, cfg.rotation_range.1);
    let rotation = rotation_exp(&(axis * angle));
    let mut translation_dir = Vector3::from(pose_rng.unit_vector());
    translation_dir.z *= cfg.translation_forward_damping;
    translation_dir.normalize_mut();
    let translation = translation_dir * cfg.baseline;

    let plane = plane_for_config(cfg);
    let occluder = if cfg.with_occluder && cfg.depth_model == DepthModel::Plane {
        Some(occluder_for_config(cfg))
    } else {
        None
    };

    let mut point_rng = CounterRng::new(cfg.rng_seed, "points");
    let mut points = Vec::with_capacity(n);
    let mut depths = Vec::with_capacity(n);
    let mut flow_data = vec![Vector2::zeros(); n];
    let mut valid = vec![false; n];
    let mut projected = vec![Vector2::zeros(); n];
    let mut second_depths = vec![0.0f64; n];

    for y in 0..h {
        for x in 0..w {
            let idx = y * w + x;
            let ray = kinv * Vector3::new(x as f64, y as f64, 1.0);
            let point = match cfg.depth_model {
                DepthModel::RandomUniform => {
                    let d = point_rng.uniform(cfg.depth_range.0, cfg.depth_range.1);
                    ray * (d / ray.z)
                }
                DepthModel::Plane => first_hit(&(ray / ray.z), &plane, occluder.as_ref()),
            };
            let q = rotation * point + translation;
            depths.push(point.z);
            points.push(point);
            if q.z > 1e-6 {
                let proj = kp * q;
                let pu = proj.x / proj.z;
                let pv = proj.y / proj.z;
                projected[idx] = Vector2::new(pu, pv);
                second_depths[idx] = q.z;
                flow_data[idx] = Vector2::new(pu - x as f64, pv - y as f64);
                valid[idx] = true;
            }
        }
    }

    if valid.iter().filter(|&&v| v).count() < 5 {
        return Err(SynthError::DegenerateScene("fewer than 5 visible points".into()));
    }

    // Depth-test occlusion: z-buffer reprojections on a half-pixel grid,
    // splatting each sample into its 3x3 cell neighborhood.
    let bw = 2 * w + 2;
    let bh = 2 * h + 2;
    let mut zbuf = vec![f64::INFINITY; bw * bh];
    for idx in 0..n {
        if !valid[idx] {
            continue;
        }
        let cu = (projected[idx].x * 2.0).round() as i64;
        let cv = (projected[idx].y * 2.0).round() as i64;
        for dv in -1..=1i64 {
            for du in -1..=1i64 {
                let u = cu + du;
                let v = cv + dv;
                if u >= 0 && v >= 0 && (u as usize) < bw && (v as usize) < bh {
                    let c = v as usize * bw + u as usize;
                    if second_depths[idx] < zbuf[c] {
                        zbuf[c] = second_depths[idx];
                    }
                }
            }
        }
    }
    let mut non_occluded = vec![false; n];
    for idx in 0..n {
        if !valid[idx] {
            continue;
        }
        let pu = projected[idx].x;
        let pv = projected[idx].y;
        let in_frame =
            pu >= 0.0 && pv >= 0.0 && pu <= (w - 1) as f64 && pv <= (h - 1) as f64;
        if !in_frame {
            continue;
        }
        let cu = (pu * 2.0).round() as i64;
        let cv = (pv * 2.0).round() as i64;
        if cu < 0 || cv < 0 || cu as usize >= bw || cv as usize >= bh {
            continue;
        }
        let front = zbuf[cv as usize * bw + cu as usize];
        non_occluded[idx] = second_depths[idx] <= front * 1.05 + 1e-9;
    }

    let flow_clean = FlowField::new(w, h, flow_data.clone()).with_validity(valid.clone());

    // Outliers, then noise, on independent streams.
    let mut labels = valid.clone();
    let mut outlier_rng = CounterRng::new(cfg.rng_seed, "outliers");
    if cfg.outlier_fraction > 0.0 {
        let e_gt = skew(&translation_dir) * rotation;
        let kpinv = cfg
            .grid_intrinsics_second()
            .inverse_matrix()
            .map_err(|_| SynthError::DegenerateScene("non-invertible intrinsics".into()))?;
        for idx in 0..n {
            if valid[idx] && outlier_rng.next_f64() < cfg.outlier_fraction {
                labels[idx] = false;
                let px = (idx % w) as f64;
                let py = (idx / w) as f64;
                let x = kinv * Vector3::new(px, py, 1.0);
                let line = e_gt * (x / x.z);
                // re-draw until the displaced point sits clearly off the
                // epipolar line of its source pixel
                for _ in 0..64 {
                    let angle = outlier_rng.uniform(0.0, std::f64::consts::TAU);
                    let mag = outlier_rng.uniform(
                        0.25 * cfg.outlier_max_displacement / stride,
                        cfg.outlier_max_displacement / stride,
                    );
                    let displaced = flow_data[idx] + Vector2::new(mag * angle.cos(), mag * angle.sin());
                    let pp = kpinv * Vector3::new(px + displaced.x, py + displaced.y, 1.0);
                    let z = (pp / pp.z).dot(&line);
                    if z.abs() > cfg.outlier_min_residual {
                        flow_data[idx] = displaced;
                        break;
                    }
                }
            }
        }
    }
    let mut noise_rng = CounterRng::new(cfg.rng_seed, "noise");
    if cfg.pixel_noise > 0.0 {
        let sigma = cfg.pixel_noise / stride;
        for item in flow_data.iter_mut().take(n) {
            let nx = noise_rng.gaussian() * sigma;
            let ny = noise_rng.gaussian() * sigma;
            *item += Vector2::new(nx, ny);
        }
    }
    let flow = FlowField::new(w, h, flow_data).with_validity(valid);

    // Exact backward flow for the plane model: intersect camera-2 rays
    // with the transformed surfaces.
    let backward_flow = if cfg.depth_model == DepthModel::Plane {
        let kpinv = cfg
            .grid_intrinsics_second()
            .inverse_matrix()
            .map_err(|_| SynthError::DegenerateScene("non-invertible intrinsics".into()))?;
        let k = cfg.grid_intrinsics().matrix();
        let mut data = vec![Vector2::zeros(); n];
        let mut bvalid = vec![false; n];
        for y in 0..h {
            for x in 0..w {
                let idx = y * w + x;
                let r2 = kpinv * Vector3::new(x as f64, y as f64, 1.0);
                // X(s) = R^T (s r2 - t) in camera-1 coordinates
                let dir = rotation.transpose() * r2;
                let origin = -(rotation.transpose() * translation);
                let mut best_s = f64::INFINITY;
                let mut best_point = Vector3::zeros();
                if let Some(occ) = &occluder {
                    let denom = dir.z;
                    if denom.abs() > 1e-12 {
                        let s = (occ.depth - origin.z) / denom;
                        if s > 1e-6 {
                            let p = origin + dir * s;
                            if p.x >= occ.x_range.0
                                && p.x <= occ.x_range.1
                                && p.y >= occ.y_range.0
                                && p.y <= occ.y_range.1
                            {
                                best_s = s;
                                best_point = p;
                            }
                        }
                    }
                }
                let denom = plane.normal.dot(&dir);
                if denom.abs() > 1e-12 {
                    let s = (plane.offset - plane.normal.dot(&origin)) / denom;
                    if s > 1e-6 && s < best_s {
                        best_s = s;
                        best_point = origin + dir * s;
                    }
                }
                if best_s.is_finite() && best_point.z > 1e-6 {
                    let proj = k * best_point;
                    let pu = proj.x / proj.z;
                    let pv = proj.y / proj.z;
                    data[idx] = Vector2::new(pu - x as f64, pv - y as f64);
                    bvalid[idx] = true;
                }
            }
        }
        Some(FlowField::new(w, h, data).with_validity(bvalid))
    } else {
        None
    };

    Ok(SyntheticScene {
        config: cfg.clone(),
        rotation,
        translation_dir,
        scale: cfg.baseline,
        points,
        depths,
        flow_clean,
        flow,
        backward_flow,
        inlier_labels: labels,
        non_occluded,
        occluder,
    })
}

/// Flow synthesized from a depth map and a rigid pose: back-project,
/// transform, reproject. `pose` maps camera-1 coordinates to camera-2.
pub fn flow_from_pose_depth(
    depth: &[Option<f64>],
    width: usize,
    height: usize,
    rotation: &Matrix3<f64>,
    translation: &Vector3<f64>,
    k: &CameraIntrinsics,
    kp: &CameraIntrinsics,
) -> Result<FlowField, SynthError> {
    assert_eq!(depth.len(), width * height);
    let kinv = k
        .inverse_matrix()
        .map_err(|_| SynthError::DegenerateScene("non-invertible intrinsics".into()))?;
    let kpm = kp.matrix();
    let mut data = vec![Vector2::zeros(); width * height];
    let mut valid = vec![false; width * height];
    for y in 0..height {
        for x in 0..width {
            let idx = y * width + x;
            let Some(d) = depth[idx] else { continue };
            if d <= 0.0 {
                return Err(SynthError::DegenerateScene("non-positive depth".into()));
            }
            let ray = kinv * Vector3::new(x as f64, y as f64, 1.0);
            let point = ray * (d / ray.z);
            let q = rotation * point + translation;
            if q.z > 1e-6 {
                let proj = kpm * q;
                data[idx] = Vector2::new(proj.x / proj.z - x as f64, proj.y / proj.z - y as f64);
                valid[idx] = true;
            }
        }
    }
    Ok(FlowField::new(width, height, data).with_validity(valid))
}
