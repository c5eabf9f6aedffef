//! Relative pose recovery from an essential matrix, trajectory composition
//! with per-step scale alignment, and the relative-error / endpoint-error
//! evaluation metrics.

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::geometry::{EssentialMatrix, FlowField, NormalizedCorrespondenceSet, NormalizedPoint};

#[derive(Debug, Error)]
pub enum OdometryError {
    #[error("no decomposition candidate has a positive-depth majority (best {best}/{total})")]
    CheiralityAmbiguous { best: usize, total: usize },
    #[error("rays are parallel; triangulation undefined")]
    TriangulationDegenerate,
    #[error("length mismatch: {given} items against {frames} reference frames")]
    LengthMismatch { given: usize, frames: usize },
    #[error("trajectory too short: usable subsequence lengths {usable:?} of requested {requested:?}")]
    InsufficientTrajectory { usable: Vec<f64>, requested: Vec<f64> },
    #[error("mask selects no pixels")]
    EmptyMask,
}

/// Rotation and unit translation direction taking view-1 coordinates to
/// view-2: x2 = R x1 + t (scale-free).
#[derive(Debug, Clone, PartialEq)]
pub struct RelativePose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RelativePose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        let translation = translation.normalize();
        debug_assert!(
            (rotation.transpose() * rotation - Matrix3::identity()).norm() < 1e-10,
            "rotation block is not orthonormal"
        );
        RelativePose { rotation, translation }
    }

    pub fn essential(&self) -> EssentialMatrix {
        EssentialMatrix::from_pose(&self.rotation, &self.translation)
    }
}

/// A rigid camera-to-world transform: world = R * cam + t.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Pose { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose { rotation: rt, translation: -(rt * self.translation) }
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// Row-major 3x4 [R|t] flattening (the trajectory file layout).
    pub fn flatten(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for r in 0..3 {
            for c in 0..3 {
                out[4 * r + c] = self.rotation[(r, c)];
            }
            out[4 * r + 3] = self.translation[r];
        }
        out
    }

    pub fn from_flat(v: &[f64; 12]) -> Pose {
        let rotation = Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]);
        Pose { rotation, translation: Vector3::new(v[3], v[7], v[11]) }
    }
}

/// Time-ordered camera-to-world poses.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub poses: Vec<Pose>,
}

impl Trajectory {
    pub fn new(poses: Vec<Pose>) -> Self {
        Trajectory { poses }
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    /// Cumulative ground-truth path length at each frame (camera centers).
    pub fn path_distances(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.poses.len());
        let mut acc = 0.0;
        out.push(0.0);
        for w in self.poses.windows(2) {
            acc += (w[1].translation - w[0].translation).norm();
            out.push(acc);
        }
        out
    }
}

/// Midpoint triangulation output: the 3D point in view-1 coordinates, the
/// signed depths in both views, and the gap between the two closest ray
/// points (a residual for inconsistent correspondences).
#[derive(Debug, Clone, Copy)]
pub struct TriangulatedPoint {
    pub point: Vector3<f64>,
    pub depth_first: f64,
    pub depth_second: f64,
    pub midpoint_gap: f64,
}

/// Midpoint triangulation of a normalized correspondence under a relative
/// pose. View 1 rays start at the origin with direction x; view 2 rays
/// start at the second camera center -R^T t with direction R^T x'.
pub fn triangulate(
    x: &NormalizedPoint,
    xp: &NormalizedPoint,
    pose: &RelativePose,
) -> Result<TriangulatedPoint, OdometryError> {
    let d1 = x.vector();
    let d2 = pose.rotation.transpose() * xp.vector();
    let c2 = -(pose.rotation.transpose() * pose.translation);

    // closest points p1 = s d1, p2 = c2 + u d2 from the 2x2 normal system
    let a = d1.dot(&d1);
    let b = d1.dot(&d2);
    let c = d2.dot(&d2);
    let det = a * c - b * b;
    let sin2 = det / (a * c);
    if sin2 < 1e-24 {
        return Err(OdometryError::TriangulationDegenerate);
    }
    let e1 = d1.dot(&c2);
    let e2 = d2.dot(&c2);
    let s = (c * e1 - b * e2) / det;
    let u = (b * e1 - a * e2) / det;
    let p1 = d1 * s;
    let p2 = c2 + d2 * u;
    let point = (p1 + p2) * 0.5;
    let in_second = pose.rotation * point + pose.translation;
    Ok(TriangulatedPoint {
        point,
        depth_first: point.z,
        depth_second: in_second.z,
        midpoint_gap: (p1 - p2).norm(),
    })
}

/// The four SVD pose candidates (R1/R2 x +-t) for an essential matrix.
pub fn pose_candidates(e: &EssentialMatrix) -> [RelativePose; 4] {
    let svd = e.canonical().svd(true, true);
    let mut u = svd.u.unwrap();
    let mut vt = svd.v_t.unwrap();
    if u.determinant() < 0.0 {
        u.column_mut(2).neg_mut();
    }
    if vt.determinant() < 0.0 {
        vt.row_mut(2).neg_mut();
    }
    let w = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let r1 = u * w * vt;
    let r2 = u * w.transpose() * vt;
    let t: Vector3<f64> = u.column(2).into_owned();
    [
        RelativePose::new(r1, t),
        RelativePose::new(r1, -t),
        RelativePose::new(r2, t),
        RelativePose::new(r2, -t),
    ]
}

/// Choose among the four (R, +-t) candidates by cheirality voting: count
/// correspondences that triangulate with positive depth in both views and
/// keep the winner, requiring a strict majority of the votes cast.
pub fn decompose_essential(
    e: &EssentialMatrix,
    corr: &NormalizedCorrespondenceSet,
) -> Result<RelativePose, OdometryError> {
    let candidates = pose_candidates(e);
    let mut best = 0usize;
    let mut best_votes = 0usize;
    for (k, cand) in candidates.iter().enumerate() {
        let votes = (0..corr.len())
            .filter(|&i| {
                triangulate(&corr.x[i], &corr.xp[i], cand)
                    .map(|t| t.depth_first > 0.0 && t.depth_second > 0.0)
                    .unwrap_or(false)
            })
            .count();
        if votes > best_votes {
            best_votes = votes;
            best = k;
        }
    }
    if 2 * best_votes <= corr.len() {
        return Err(OdometryError::CheiralityAmbiguous { best: best_votes, total: corr.len() });
    }
    Ok(candidates[best].clone())
}

/// Trajectory built from relative poses, with the indices of steps whose
/// scale could not be aligned (zero-length ground-truth step).
#[derive(Debug, Clone)]
pub struct ComposedTrajectory {
    pub trajectory: Trajectory,
    pub skipped_steps: Vec<usize>,
}

/// Chain relative poses from the identity, scaling each step's translation
/// to the ground-truth step length for that frame pair. A zero-length
/// ground-truth step leaves the estimated camera in place and is reported
/// in `skipped_steps`.
pub fn compose_trajectory(
    rel_poses: &[RelativePose],
    gt: &Trajectory,
) -> Result<ComposedTrajectory, OdometryError> {
    if rel_poses.len() + 1 != gt.len() {
        return Err(OdometryError::LengthMismatch { given: rel_poses.len(), frames: gt.len() });
    }
    let mut poses = Vec::with_capacity(gt.len());
    let mut skipped = Vec::new();
    let mut current = Pose::identity();
    poses.push(current);
    for (k, rel) in rel_poses.iter().enumerate() {
        let gt_len = (gt.poses[k + 1].translation - gt.poses[k].translation).norm();
        // camera-to-world step is the inverse of the view-1 -> view-2 map
        let rt = rel.rotation.transpose();
        let step = if gt_len > 1e-12 {
            Pose { rotation: rt, translation: -(rt * (rel.translation * gt_len)) }
        } else {
            skipped.push(k);
            Pose { rotation: rt, translation: Vector3::zeros() }
        };
        current = current.compose(&step);
        poses.push(current);
    }
    Ok(ComposedTrajectory { trajectory: Trajectory::new(poses), skipped_steps: skipped })
}

/// Averaged relative pose errors with the per-length breakdown.
#[derive(Debug, Clone)]
pub struct RelativeErrorReport {
    /// Translational error in percent of subsequence length.
    pub t_err: f64,
    /// Rotational error in degrees per 100 m.
    pub r_err: f64,
    /// Per requested length: (length, t_err %, r_err deg/100m, windows).
    pub per_length: Vec<(f64, f64, f64, usize)>,
}

pub const STANDARD_LENGTHS: [f64; 8] = [100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0];

/// Relative translational and rotational errors over fixed-length
/// subsequences: for each start frame i and length L, the first frame j
/// with path(i..j) >= L yields delta = (T_gt,i^-1 T_gt,j)^-1 (T_i^-1 T_j),
/// scored as ||trans(delta)|| / L (%) and angle(rot(delta)) / L (deg/100m).
pub fn relative_errors(
    est: &Trajectory,
    gt: &Trajectory,
    lengths: &[f64],
) -> Result<RelativeErrorReport, OdometryError> {
    if est.len() != gt.len() {
        return Err(OdometryError::LengthMismatch { given: est.len(), frames: gt.len() });
    }
    let dist = gt.path_distances();
    let mut per_length = Vec::with_capacity(lengths.len());
    let mut t_sum = 0.0;
    let mut r_sum = 0.0;
    let mut windows_total = 0usize;
    for &len in lengths {
        let mut t_acc = 0.0;
        let mut r_acc = 0.0;
        let mut windows = 0usize;
        for i in 0..gt.len() {
            let Some(j) = (i + 1..gt.len()).find(|&j| dist[j] - dist[i] >= len) else {
                break;
            };
            let delta_gt = gt.poses[i].inverse().compose(&gt.poses[j]);
            let delta_est = est.poses[i].inverse().compose(&est.poses[j]);
            let delta = delta_gt.inverse().compose(&delta_est);
            let t_err = delta.translation.norm() / len * 100.0;
            let cos = ((delta.rotation.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
            let r_err = cos.acos().to_degrees() / len * 100.0;
            t_acc += t_err;
            r_acc += r_err;
            windows += 1;
        }
        if windows > 0 {
            t_sum += t_acc;
            r_sum += r_acc;
            windows_total += windows;
            per_length.push((len, t_acc / windows as f64, r_acc / windows as f64, windows));
        }
    }
    if per_length.len() < lengths.len() {
        return Err(OdometryError::InsufficientTrajectory {
            usable: per_length.iter().map(|&(l, ..)| l).collect(),
            requested: lengths.to_vec(),
        });
    }
    Ok(RelativeErrorReport {
        t_err: t_sum / windows_total as f64,
        r_err: r_sum / windows_total as f64,
        per_length,
    })
}

/// Average endpoint error over the masked pixels:
/// (1/N) sum ||v_i - v_gt,i||.
pub fn aepe(flow: &FlowField, gt: &FlowField, mask: &[bool]) -> Result<f64, OdometryError> {
    assert_eq!((flow.width, flow.height), (gt.width, gt.height));
    assert_eq!(mask.len(), flow.len());
    let mut total = 0.0;
    let mut count = 0usize;
    for idx in 0..flow.len() {
        if !mask[idx] {
            continue;
        }
        total += (flow.at(idx) - gt.at(idx)).norm();
        count += 1;
    }
    if count == 0 {
        return Err(OdometryError::EmptyMask);
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::rotation_exp;
    use crate::synth::{generate_scene, SceneConfig};
    use approx::assert_abs_diff_eq;
    use nalgebra::Vector2;

    fn rotation_angle(r: &Matrix3<f64>) -> f64 {
        (((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0)).acos()
    }

    #[test]
    fn triangulate_constructed_point() {
        // point (0,0,5) seen from the origin and from a camera at (1,0,0)
        let p = Vector3::new(0.0, 0.0, 5.0);
        let t_dir = Vector3::new(-1.0, 0.0, 0.0); // x2 = x1 - (1,0,0)
        let pose = RelativePose::new(Matrix3::identity(), t_dir);
        // with unit baseline the view-2 projection of p is (p - (1,0,0))/z
        let x = NormalizedPoint::new(p.x / p.z, p.y / p.z);
        let q = p + t_dir;
        let xp = NormalizedPoint::new(q.x / q.z, q.y / q.z);
        let tri = triangulate(&x, &xp, &pose).unwrap();
        assert!((tri.point - p).norm() < 1e-9);
        assert!(tri.depth_first > 0.0 && tri.depth_second > 0.0);
        assert!(tri.midpoint_gap < 1e-12);
    }

    #[test]
    fn triangulate_reports_midpoint_gap() {
        let pose = RelativePose::new(Matrix3::identity(), Vector3::new(-1.0, 0.0, 0.0));
        let x = NormalizedPoint::new(0.0, 0.0);
        let clean = NormalizedPoint::new(-0.2, 0.0);
        let off_line = NormalizedPoint::new(-0.2, 0.05); // epipolar lines here are y = const
        let gap_clean = triangulate(&x, &clean, &pose).unwrap().midpoint_gap;
        let gap_bad = triangulate(&x, &off_line, &pose).unwrap().midpoint_gap;
        assert!(gap_clean < 1e-12);
        assert!(gap_bad > 0.1);
    }

    #[test]
    fn triangulate_parallel_rays_degenerate() {
        let pose = RelativePose::new(Matrix3::identity(), Vector3::z());
        let x = NormalizedPoint::new(0.1, 0.2);
        assert!(matches!(
            triangulate(&x, &x, &pose),
            Err(OdometryError::TriangulationDegenerate)
        ));
    }

    #[test]
    fn decompose_recovers_ground_truth_pose() {
        for seed in 0..5 {
            let cfg = SceneConfig { rng_seed: seed, ..SceneConfig::default() };
            let scene = generate_scene(&cfg).unwrap();
            let corr = scene.clean_correspondences();
            let pose = decompose_essential(&scene.essential(), &corr).unwrap();
            let dr = rotation_angle(&(pose.rotation * scene.rotation.transpose()));
            let dt = pose.translation.dot(&scene.translation_dir).clamp(-1.0, 1.0).acos();
            assert!(dr < 1e-8, "seed {seed}: rotation error {dr}");
            assert!(dt < 1e-8, "seed {seed}: translation error {dt}");

            // reconstructed E matches the input up to canonical sign/scale
            assert!(pose.essential().canonical_distance(&scene.essential()) < 1e-8);
        }
    }

    #[test]
    fn decompose_pure_forward_motion() {
        // points straight ahead, camera advancing along +z: x2 = x1 - b e_z
        let pose_gt = RelativePose::new(Matrix3::identity(), -Vector3::z());
        let mut x = Vec::new();
        let mut xp = Vec::new();
        for i in 0..25 {
            let p = Vector3::new(
                -0.4 + 0.2 * (i % 5) as f64,
                -0.4 + 0.2 * (i / 5) as f64,
                4.0 + 0.3 * i as f64,
            );
            let q = p - Vector3::z() * 0.5;
            x.push(NormalizedPoint::new(p.x / p.z, p.y / p.z));
            xp.push(NormalizedPoint::new(q.x / q.z, q.y / q.z));
        }
        let corr = NormalizedCorrespondenceSet::new(x, xp);
        let e = pose_gt.essential();
        let pose = decompose_essential(&e, &corr).unwrap();
        assert!(rotation_angle(&pose.rotation) < 1e-8);
        assert!((pose.translation - pose_gt.translation).norm() < 1e-8);
    }

    #[test]
    fn cheirality_eliminates_behind_camera_candidates() {
        let scene = generate_scene(&SceneConfig::default()).unwrap();
        let corr = scene.clean_correspondences();
        let winner = decompose_essential(&scene.essential(), &corr).unwrap();
        for cand in pose_candidates(&scene.essential()) {
            let votes = (0..corr.len())
                .filter(|&i| {
                    triangulate(&corr.x[i], &corr.xp[i], &cand)
                        .map(|t| t.depth_first > 0.0 && t.depth_second > 0.0)
                        .unwrap_or(false)
                })
                .count();
            if cand != winner {
                assert!(votes * 2 < corr.len(), "losing candidate got {votes}/{}", corr.len());
            } else {
                assert!(votes * 2 > corr.len());
            }
        }
    }

    #[test]
    fn cheirality_ambiguous_with_no_votes() {
        // with nothing to vote, no candidate can reach a strict majority
        let scene = generate_scene(&SceneConfig::default()).unwrap();
        let empty = scene.clean_correspondences().subset(&[]);
        assert!(matches!(
            decompose_essential(&scene.essential(), &empty),
            Err(OdometryError::CheiralityAmbiguous { .. })
        ));
    }

    fn straight_gt(frames: usize, step: f64) -> Trajectory {
        Trajectory::new(
            (0..frames)
                .map(|i| Pose {
                    rotation: Matrix3::identity(),
                    translation: Vector3::new(step * i as f64, 0.0, 0.0),
                })
                .collect(),
        )
    }

    #[test]
    fn compose_exact_relative_motions_reproduces_gt() {
        // a curved trajectory: constant turn + forward motion
        let turn = rotation_exp(&Vector3::new(0.0, 0.02, 0.0));
        let mut poses = vec![Pose::identity()];
        for i in 0..40 {
            let prev = poses[i];
            let step = Pose { rotation: turn, translation: Vector3::new(0.1, 0.0, 2.0) };
            poses.push(prev.compose(&step));
        }
        let gt = Trajectory::new(poses);
        // ground-truth relative camera-1 -> camera-2 maps, with junk scale
        let rel: Vec<RelativePose> = gt
            .poses
            .windows(2)
            .map(|w| {
                let delta = w[1].inverse().compose(&w[0]);
                RelativePose::new(delta.rotation, delta.translation * 7.3)
            })
            .collect();
        let out = compose_trajectory(&rel, &gt).unwrap();
        assert!(out.skipped_steps.is_empty());
        for (a, b) in out.trajectory.poses.iter().zip(&gt.poses) {
            assert!((a.rotation - b.rotation).norm() < 1e-10);
            assert!((a.translation - b.translation).norm() < 1e-9);
        }
    }

    #[test]
    fn compose_flags_zero_length_steps() {
        let mut gt = straight_gt(5, 1.0);
        gt.poses[3].translation = gt.poses[2].translation; // stationary frame
        let rel: Vec<RelativePose> = (0..4)
            .map(|_| RelativePose::new(Matrix3::identity(), Vector3::new(-1.0, 0.0, 0.0)))
            .collect();
        let out = compose_trajectory(&rel, &gt).unwrap();
        assert_eq!(out.skipped_steps, vec![2]);
    }

    #[test]
    fn compose_localizes_fault_injection() {
        let gt = straight_gt(20, 1.0);
        let mut rel: Vec<RelativePose> = (0..19)
            .map(|_| RelativePose::new(Matrix3::identity(), Vector3::new(-1.0, 0.0, 0.0)))
            .collect();
        rel[10] = RelativePose::new(
            rotation_exp(&Vector3::new(0.0, 0.3, 0.0)),
            Vector3::new(0.0, 0.0, -1.0),
        );
        let out = compose_trajectory(&rel, &gt).unwrap().trajectory;
        for i in 0..=10 {
            assert!((out.poses[i].translation - gt.poses[i].translation).norm() < 1e-12);
            assert!((out.poses[i].rotation - Matrix3::identity()).norm() < 1e-12);
        }
        assert!((out.poses[11].translation - gt.poses[11].translation).norm() > 0.5);
    }

    #[test]
    fn relative_errors_zero_for_identical_trajectories() {
        let gt = straight_gt(101, 10.0); // 1000 m path
        let rep = relative_errors(&gt, &gt, &STANDARD_LENGTHS).unwrap();
        assert_eq!(rep.t_err, 0.0);
        assert_eq!(rep.r_err, 0.0);
        assert_eq!(rep.per_length.len(), 8);
    }

    #[test]
    fn relative_errors_invariant_to_global_transform() {
        // step length chosen off the window thresholds so that rounding
        // noise from the global transform cannot flip a window end frame
        let gt = straight_gt(101, 10.3);
        let turn = rotation_exp(&Vector3::new(0.01, 0.03, -0.02));
        let est = Trajectory::new(
            gt.poses
                .iter()
                .enumerate()
                .map(|(i, p)| Pose {
                    rotation: rotation_exp(&Vector3::new(0.0, 1e-4 * i as f64, 0.0)) * p.rotation,
                    translation: p.translation + Vector3::new(0.0, 1e-3 * i as f64, 0.0),
                })
                .collect(),
        );
        let global = Pose { rotation: turn, translation: Vector3::new(5.0, -2.0, 9.0) };
        let est_moved =
            Trajectory::new(est.poses.iter().map(|p| global.compose(p)).collect());
        let gt_moved = Trajectory::new(gt.poses.iter().map(|p| global.compose(p)).collect());
        let a = relative_errors(&est, &gt, &STANDARD_LENGTHS).unwrap();
        let b = relative_errors(&est_moved, &gt_moved, &STANDARD_LENGTHS).unwrap();
        assert_abs_diff_eq!(a.t_err, b.t_err, epsilon = 1e-9);
        assert_abs_diff_eq!(a.r_err, b.r_err, epsilon = 1e-9);
    }

    #[test]
    fn relative_errors_match_closed_form_perturbation() {
        // straight motion along x with each estimated step rotated by
        // exactly 0.01 deg about the direction of travel: the window over
        // k frames accumulates rotation angle k * 0.01 deg and no
        // translation error, so r_err for length L with step s is
        // ceil(L/s) * 0.01 * 100 / L
        let step = 10.0;
        let gt = straight_gt(121, step);
        let alpha = 0.01f64.to_radians();
        let est = Trajectory::new(
            (0..121)
                .map(|i| Pose {
                    rotation: rotation_exp(&Vector3::new(alpha * i as f64, 0.0, 0.0)),
                    translation: Vector3::new(step * i as f64, 0.0, 0.0),
                })
                .collect(),
        );
        let rep = relative_errors(&est, &gt, &STANDARD_LENGTHS).unwrap();
        assert!(rep.t_err < 1e-12);
        for &(len, t, r, _) in &rep.per_length {
            let frames = (len / step).ceil();
            let expected = frames * 0.01 * 100.0 / len;
            assert!((r - expected).abs() / expected < 0.01, "length {len}: {r} vs {expected}");
            assert!(t < 1e-12);
        }
    }

    #[test]
    fn relative_errors_short_trajectory_lists_usable_lengths() {
        let gt = straight_gt(26, 10.0); // 250 m: only 100 and 200 usable
        match relative_errors(&gt, &gt, &STANDARD_LENGTHS) {
            Err(OdometryError::InsufficientTrajectory { usable, .. }) => {
                assert_eq!(usable, vec![100.0, 200.0]);
            }
            other => panic!("expected InsufficientTrajectory, got {other:?}"),
        }
    }

    #[test]
    fn aepe_constant_offset_and_mask_semantics() {
        let n = 8usize;
        let gt = FlowField::new(n, n, vec![Vector2::new(1.0, -2.0); n * n]);
        assert_eq!(aepe(&gt, &gt, &vec![true; n * n]).unwrap(), 0.0);

        let shifted = FlowField::new(
            n,
            n,
            gt.data().iter().map(|v| v + Vector2::new(3.0, 4.0)).collect(),
        );
        assert_abs_diff_eq!(aepe(&shifted, &gt, &vec![true; n * n]).unwrap(), 5.0, epsilon = 1e-12);

        // corrupting masked-out pixels changes nothing
        let mut mask = vec![true; n * n];
        mask[7] = false;
        let mut data: Vec<Vector2<f64>> = shifted.data().to_vec();
        data[7] = Vector2::new(1e6, -1e6);
        let corrupted = FlowField::new(n, n, data);
        assert_abs_diff_eq!(
            aepe(&corrupted, &gt, &mask).unwrap(),
            aepe(&shifted, &gt, &mask).unwrap(),
            epsilon = 1e-15
        );

        assert!(matches!(
            aepe(&gt, &gt, &vec![false; n * n]),
            Err(OdometryError::EmptyMask)
        ));
    }
}
