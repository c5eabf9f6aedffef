//! Subcommand implementations. Every command prints stable-ordered
//! key=value or delimited text, writes the same bytes to `--out` when
//! given, and emits a run manifest alongside file outputs.

use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use nalgebra::{Matrix3, Vector2, Vector3};

use epiflow::geometry::{
    epipolar_residual, EssentialParams, NormalizedCorrespondenceSet, NormalizedPoint, PixelPoint,
    Vector5,
};
use epiflow::implicit::{dtheta_dflow, newton_refine, total_gradient};
use epiflow::io::{
    read_correspondences, read_flo, read_intrinsics, read_key_values, read_trajectory,
    write_correspondences, write_flo, write_intrinsics, write_trajectory, CorrespondenceTable,
};
use epiflow::losses::{
    epipolar_loss, fb_consistency_loss, flow_pyramid, image_pyramid, occlusion_mask,
    photometric_loss, smoothness_loss, total_loss, Image, LossWeights, OcclusionMask, ScaleLosses,
    TrainingMode,
};
use epiflow::odometry::{
    aepe, decompose_essential, relative_errors, Pose, Trajectory, STANDARD_LENGTHS,
};
use epiflow::robust::{estimate, RobustConfig};
use epiflow::rng::CounterRng;
use epiflow::synth::{generate_scene, SceneConfig};

use crate::errors::CliError;
use crate::manifest::Manifest;
use crate::sceneconfig::{scene_config_from_pairs, scene_config_to_pairs};

/// Default seed: `--seed` flag, then the EPIFLOW_SEED environment
/// variable, then `fallback`.
pub fn resolve_seed(flag: Option<u64>, fallback: u64) -> Result<u64, CliError> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var("EPIFLOW_SEED") {
        Ok(v) => v
            .parse()
            .map_err(|_| CliError::config(format!("EPIFLOW_SEED: bad integer '{v}'"))),
        Err(_) => Ok(fallback),
    }
}

fn emit(text: &str, out: Option<&Path>) -> Result<(), CliError> {
    print!("{text}");
    if let Some(path) = out {
        fs::write(path, text)?;
    }
    Ok(())
}

fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest");
    out.with_file_name(name)
}

fn fmt(v: f64) -> String {
    format!("{v:.17e}")
}

fn pose_line(r: &Matrix3<f64>, t: &Vector3<f64>) -> String {
    let mut fields = Vec::with_capacity(12);
    for row in 0..3 {
        for col in 0..3 {
            fields.push(fmt(r[(row, col)]));
        }
        fields.push(fmt(t[row]));
    }
    fields.join(" ")
}

fn read_pose_line(path: &Path) -> Result<Pose, CliError> {
    let traj = read_trajectory(path)?;
    traj.poses
        .first()
        .copied()
        .ok_or_else(|| CliError::input(format!("{}: no pose line", path.display())))
}

/// Load corr.txt + intrinsics.txt from a scene directory.
fn read_scene_correspondences(
    dir: &Path,
) -> Result<(NormalizedCorrespondenceSet, CorrespondenceTable), CliError> {
    let table = read_correspondences(&dir.join("corr.txt"))?;
    let (k, kp) = read_intrinsics(&dir.join("intrinsics.txt"))?;
    let corr = NormalizedCorrespondenceSet::from_pixel_pairs(
        &table.first,
        &table.second,
        &k,
        &kp.unwrap_or(k),
    )?;
    Ok((corr, table))
}

// ---------------------------------------------------------------------------
// synth

#[derive(Args, Debug, Clone)]
pub struct SynthArgs {
    /// key=value scene configuration file (defaults applied otherwise)
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output scene directory (created if absent)
    #[arg(long)]
    pub out: PathBuf,
    /// Seed override
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Generate and write the scene data files; returns (correspondences,
/// outliers) for the summary line.
fn write_scene(cfg: &SceneConfig, out: &Path) -> Result<(usize, usize), CliError> {
    let scene = generate_scene(cfg)?;

    fs::create_dir_all(out)?;
    write_flo(&out.join("flow.flo"), &scene.flow)?;
    write_flo(&out.join("flow_gt.flo"), &scene.flow_clean)?;
    if let Some(back) = &scene.backward_flow {
        write_flo(&out.join("flow_backward.flo"), back)?;
    }
    write_trajectory(
        &out.join("pose.txt"),
        &Trajectory::new(vec![Pose {
            rotation: scene.rotation,
            translation: scene.translation_dir,
        }]),
    )?;
    write_intrinsics(
        &out.join("intrinsics.txt"),
        &cfg.grid_intrinsics(),
        Some(&cfg.grid_intrinsics_second()),
    )?;

    // correspondence table on the sample grid, labelled by outlier planting
    let mut first = Vec::new();
    let mut second = Vec::new();
    let mut labels = Vec::new();
    for y in 0..scene.flow.height {
        for x in 0..scene.flow.width {
            let idx = y * scene.flow.width + x;
            if !scene.flow.is_valid(idx) {
                continue;
            }
            let v = scene.flow.at(idx);
            first.push(PixelPoint::new(x as f64, y as f64));
            second.push(PixelPoint::new(x as f64 + v.x, y as f64 + v.y));
            labels.push(scene.inlier_labels[idx]);
        }
    }
    let n = first.len();
    let outliers = labels.iter().filter(|&&b| !b).count();
    write_correspondences(
        &out.join("corr.txt"),
        &CorrespondenceTable { first, second, labels: Some(labels) },
    )?;
    Ok((n, outliers))
}

fn synth_summary(out: &Path, n: usize, outliers: usize) -> Result<(), CliError> {
    emit(&format!("out={}\ncorrespondences={n}\noutliers={outliers}\n", out.display()), None)
}

pub fn cmd_synth(args: &SynthArgs) -> Result<(), CliError> {
    let pairs = match &args.config {
        Some(path) => read_key_values(path)?,
        None => Vec::new(),
    };
    let mut cfg = scene_config_from_pairs(&pairs)?;
    cfg.rng_seed = resolve_seed(args.seed, cfg.rng_seed)?;
    let (n, outliers) = write_scene(&cfg, &args.out)?;

    let mut manifest = Manifest::new("synth", cfg.rng_seed);
    manifest.arg("out", args.out.display());
    if let Some(path) = &args.config {
        manifest.arg("config", path.display());
        manifest.input("config", path)?;
    }
    manifest.config(&scene_config_to_pairs(&cfg));
    manifest.write(&args.out.join("manifest.txt"))?;

    synth_summary(&args.out, n, outliers)
}

// ---------------------------------------------------------------------------
// estimate

#[derive(Args, Debug, Clone)]
pub struct EstimateArgs {
    /// Correspondence table `u v u' v' [label]`
    #[arg(long, conflicts_with = "flow")]
    pub corr: Option<PathBuf>,
    /// Dense flow field (.flo)
    #[arg(long)]
    pub flow: Option<PathBuf>,
    /// Intrinsics file (fx, fy, cx, cy, skew [+ _second suffix])
    #[arg(long)]
    pub intrinsics: PathBuf,
    /// Inlier threshold on the algebraic residual
    #[arg(long, default_value_t = 0.001)]
    pub delta: f64,
    /// RANSAC hypothesis count
    #[arg(long, default_value_t = 1024)]
    pub hypotheses: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn cmd_estimate(args: &EstimateArgs) -> Result<(), CliError> {
    let (k, kp) = read_intrinsics(&args.intrinsics)?;
    let kp = kp.unwrap_or(k);
    let corr = match (&args.corr, &args.flow) {
        (Some(path), None) => {
            let table = read_correspondences(path)?;
            NormalizedCorrespondenceSet::from_pixel_pairs(&table.first, &table.second, &k, &kp)?
        }
        (None, Some(path)) => {
            let flow = read_flo(path)?;
            NormalizedCorrespondenceSet::from_flow(&flow, &k, &kp)?
        }
        _ => return Err(CliError::config("exactly one of --corr or --flow is required")),
    };

    let seed = resolve_seed(args.seed, 0)?;
    let cfg = RobustConfig {
        inlier_threshold: args.delta,
        hypothesis_count: args.hypotheses,
        rng_seed: seed,
        ..RobustConfig::default()
    };
    let result = estimate(&corr, &cfg)?;
    let pose = decompose_essential(&result.essential, &corr)?;

    let mask: String =
        result.inliers.iter().map(|&b| if b { '1' } else { '0' }).collect();
    let text = format!(
        "pose={}\ninliers={}\nobjective={}\niterations={}\nhypotheses={}\n\
         best_initial_inliers={}\ngradient_inf_norm={}\ninlier_mask={}\n",
        pose_line(&pose.rotation, &pose.translation),
        result.inliers.iter().filter(|&&b| b).count(),
        fmt(result.objective),
        result.iterations,
        result.hypotheses_tried,
        result.best_inlier_count,
        fmt(result.gradient_inf_norm),
        mask,
    );
    emit(&text, args.out.as_deref())?;

    if let Some(out) = &args.out {
        let mut manifest = Manifest::new("estimate", seed);
        if let Some(p) = &args.corr {
            manifest.arg("corr", p.display());
        }
        if let Some(p) = &args.flow {
            manifest.arg("flow", p.display());
        }
        manifest.arg("intrinsics", args.intrinsics.display());
        manifest.arg("delta", args.delta);
        manifest.arg("hypotheses", args.hypotheses);
        manifest.arg("out", out.display());
        if let Some(p) = &args.corr {
            manifest.input("corr", p)?;
        }
        if let Some(p) = &args.flow {
            manifest.input("flow", p)?;
        }
        manifest.input("intrinsics", &args.intrinsics)?;
        manifest.write(&manifest_path(out))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// gradcheck

#[derive(Args, Debug, Clone)]
pub struct GradcheckArgs {
    /// Scene directory from `synth`
    #[arg(long)]
    pub scene: PathBuf,
    /// Number of probed flow coordinates
    #[arg(long, default_value_t = 8)]
    pub n_probes: usize,
    /// Finite-difference step (grid pixels)
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    #[arg(long, default_value_t = 0.001)]
    pub delta: f64,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn perturb_flow(
    corr: &NormalizedCorrespondenceSet,
    i: usize,
    dv: Vector2<f64>,
) -> NormalizedCorrespondenceSet {
    let mut out = corr.clone();
    let dxp = corr.dxp_dflow * dv;
    let v = out.xp[i].vector() + Vector3::new(dxp.x, dxp.y, 0.0);
    out.xp[i] = NormalizedPoint::new(v.x, v.y);
    out
}

fn inlier_mask_at(
    corr: &NormalizedCorrespondenceSet,
    params: &EssentialParams,
    delta: f64,
) -> Vec<bool> {
    let e = params.essential();
    (0..corr.len())
        .map(|i| epipolar_residual(&corr.x[i], &corr.xp[i], &e).abs() < delta)
        .collect()
}

pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<(), CliError> {
    let (corr, _) = read_scene_correspondences(&args.scene)?;
    let seed = resolve_seed(args.seed, 0)?;
    let cfg = RobustConfig {
        inlier_threshold: args.delta,
        rng_seed: seed,
        ..RobustConfig::default()
    };
    let result = estimate(&corr, &cfg)?;
    let grad = dtheta_dflow(&corr, &result.params, args.delta)?;
    let le = epipolar_loss(&corr, &result.params)?;
    let le_total = total_gradient(&le.flow_gradient(&corr), &le.d_theta, &grad);

    let inlier_idx: Vec<usize> =
        (0..corr.len()).filter(|&i| grad.inliers[i]).collect();

    // column-norm scale for relative errors on the theta sensitivities
    let theta_scale = (0..grad.dtheta_dflow.ncols())
        .map(|j| grad.dtheta_dflow.column(j).norm())
        .fold(0.0f64, f64::max)
        .max(1e-12);
    let le_scale = le_total.iter().fold(0.0f64, |m, &v| m.max(v.abs())).max(1e-12);

    let mut rng = CounterRng::new(seed, "gradcheck-probes");
    let probes = rng.distinct_indices(args.n_probes.min(2 * corr.len()), 2 * corr.len());

    let h = args.step;
    let mut text = String::new();
    let mut max_err = 0.0f64;
    let mut flips = 0usize;
    for &j in &probes {
        let (i, c) = (j / 2, j % 2);
        let mut dv = Vector2::zeros();
        dv[c] = h;

        let solve = |pc: &NormalizedCorrespondenceSet| -> Result<(Vector5, f64, bool), CliError> {
            let frozen = pc.subset(&inlier_idx);
            let polished = newton_refine(&frozen, &result.params, 6);
            let theta = epiflow::geometry::params_from_pose(
                &polished.rotation(),
                &polished.translation(),
                &result.params,
            )?
            .theta;
            let flipped = inlier_mask_at(pc, &polished, args.delta) != grad.inliers;
            let value = epipolar_loss(pc, &polished.rebased())?.value;
            Ok((theta, value, flipped))
        };

        let (tp, lp, f1) = solve(&perturb_flow(&corr, i, dv))?;
        let (tm, lm, f2) = solve(&perturb_flow(&corr, i, -dv))?;
        let flipped = f1 || f2;

        let mut theta_err = 0.0f64;
        for k in 0..5 {
            let fd = (tp[k] - tm[k]) / (2.0 * h);
            theta_err += (fd - grad.dtheta_dflow[(k, j)]).powi(2);
        }
        let theta_err = theta_err.sqrt() / theta_scale;
        let le_fd = (lp - lm) / (2.0 * h);
        let le_err = (le_fd - le_total[j]).abs() / le_scale;

        if flipped {
            flips += 1;
        } else {
            max_err = max_err.max(theta_err).max(le_err);
        }
        text.push_str(&format!(
            "probe={j} point={i} comp={c} dtheta_err={} dle_err={} flipped={}\n",
            fmt(theta_err),
            fmt(le_err),
            flipped as u8
        ));
    }

    let pass = max_err < 1e-3;
    text.push_str(&format!(
        "condition_number={}\nmax_rel_err={}\nflipped_probes={flips}\npass={}\n",
        fmt(grad.condition_number),
        fmt(max_err),
        pass as u8
    ));
    emit(&text, args.out.as_deref())?;
    if pass {
        Ok(())
    } else {
        Err(CliError::numerical(format!(
            "gradient check failed: max relative error {max_err:.3e} >= 1e-3"
        )))
    }
}

// ---------------------------------------------------------------------------
// eval-odom

#[derive(Args, Debug, Clone)]
pub struct EvalOdomArgs {
    /// Estimated trajectory (12-number [R|t] lines)
    #[arg(long)]
    pub est: PathBuf,
    /// Ground-truth trajectory
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn cmd_eval_odom(args: &EvalOdomArgs) -> Result<(), CliError> {
    let est = read_trajectory(&args.est)?;
    let gt = read_trajectory(&args.gt)?;
    let report = relative_errors(&est, &gt, &STANDARD_LENGTHS)?;
    let mut text = String::from("# length t_err_percent r_err_deg_per_100m windows\n");
    for &(len, t, r, w) in &report.per_length {
        text.push_str(&format!("{len} {} {} {w}\n", fmt(t), fmt(r)));
    }
    text.push_str(&format!("t_err={}\nr_err={}\n", fmt(report.t_err), fmt(report.r_err)));
    emit(&text, args.out.as_deref())?;
    if let Some(out) = &args.out {
        let mut manifest = Manifest::new("eval-odom", 0);
        manifest.arg("est", args.est.display());
        manifest.arg("gt", args.gt.display());
        manifest.arg("out", out.display());
        manifest.input("est", &args.est)?;
        manifest.input("gt", &args.gt)?;
        manifest.write(&manifest_path(out))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// eval-flow

#[derive(Args, Debug, Clone)]
pub struct EvalFlowArgs {
    /// Estimated flow (.flo)
    #[arg(long)]
    pub flow: PathBuf,
    /// Ground-truth flow (.flo); its validity mask restricts the average
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn cmd_eval_flow(args: &EvalFlowArgs) -> Result<(), CliError> {
    let flow = read_flo(&args.flow)?;
    let gt = read_flo(&args.gt)?;
    if (flow.width, flow.height) != (gt.width, gt.height) {
        return Err(CliError::input(format!(
            "flow dimensions {}x{} do not match ground truth {}x{}",
            flow.width, flow.height, gt.width, gt.height
        )));
    }
    let mask: Vec<bool> = (0..gt.len()).map(|i| gt.is_valid(i) && flow.is_valid(i)).collect();
    let value = aepe(&flow, &gt, &mask)?;
    emit(&format!("aepe={}\n", fmt(value)), args.out.as_deref())
}

// ---------------------------------------------------------------------------
// losses

#[derive(Args, Debug, Clone)]
pub struct LossesArgs {
    /// Scene directory from `synth`
    #[arg(long)]
    pub scene: PathBuf,
    /// Weight preset: kitti_baseline, kitti_teacher, kitti_student, rgbd
    #[arg(long, default_value = "kitti_baseline", conflicts_with = "config")]
    pub preset: String,
    /// key=value loss weight file (overrides --preset)
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// First / second image (PNG or PPM) for the photometric terms
    #[arg(long)]
    pub im1: Option<PathBuf>,
    #[arg(long)]
    pub im2: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn load_image(path: &Path) -> Result<Image, CliError> {
    let img = image::open(path)
        .map_err(|e| CliError::input(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img
        .pixels()
        .map(|p| [p[0] as f64 / 255.0, p[1] as f64 / 255.0, p[2] as f64 / 255.0])
        .collect();
    Ok(Image::new(w, h, data))
}

pub fn cmd_losses(args: &LossesArgs) -> Result<(), CliError> {
    let weights = match &args.config {
        Some(path) => LossWeights::from_config_str(&fs::read_to_string(path)?)?,
        None => LossWeights::preset(&args.preset)?,
    };

    let (corr, _) = read_scene_correspondences(&args.scene)?;
    let pose = read_pose_line(&args.scene.join("pose.txt"))?;
    let params = EssentialParams::from_base(pose.rotation, pose.translation);
    let le = epipolar_loss(&corr, &params)?;

    let flow = read_flo(&args.scene.join("flow.flo"))?;
    let back_path = args.scene.join("flow_backward.flo");
    let backward = if back_path.exists() { Some(read_flo(&back_path)?) } else { None };

    let images = match (&args.im1, &args.im2) {
        (Some(a), Some(b)) => Some((load_image(a)?, load_image(b)?)),
        (None, None) => None,
        _ => return Err(CliError::config("--im1 and --im2 must be given together")),
    };

    // per-scale terms over the five-level pyramid; terms whose inputs are
    // absent contribute zero
    let flows = flow_pyramid(&flow, 5);
    let backs = backward.as_ref().map(|b| flow_pyramid(b, 5));
    let imgs = images.as_ref().map(|(a, b)| (image_pyramid(a, 5), image_pyramid(b, 5)));
    let mut scales = [ScaleLosses::default(); 5];
    for s in 0..5 {
        let mask = match &backs {
            Some(b) => occlusion_mask(&flows[s], &b[s], weights.fb_beta1, weights.fb_beta2),
            None => OcclusionMask::full(flows[s].len()),
        };
        // a coarse scale can have every pixel warp out of frame; it then
        // contributes nothing instead of aborting the breakdown
        if mask.count == 0 {
            continue;
        }
        if let Some(b) = &backs {
            scales[s].consistency = fb_consistency_loss(&flows[s], &b[s], &mask, &weights)?;
        }
        if let Some((i1, i2)) = &imgs {
            scales[s].photometric = photometric_loss(&i1[s], &i2[s], &flows[s], &mask, &weights)?;
            scales[s].smoothness = smoothness_loss(&i1[s], &flows[s], weights.smoothness_alpha);
        }
    }
    let total = total_loss(&scales, le.value, &weights, TrainingMode::Teacher)?;

    let mut text = format!(
        "lambda_p={}\nlambda_c={}\nlambda_s={}\nlambda_e={}\nlambda_o={}\n",
        weights.photometric, weights.consistency, weights.smoothness, weights.epipolar,
        weights.occlusion
    );
    for s in 0..5 {
        text.push_str(&format!(
            "scale{s}.photometric={}\nscale{s}.consistency={}\nscale{s}.smoothness={}\n",
            fmt(scales[s].photometric),
            fmt(scales[s].consistency),
            fmt(scales[s].smoothness)
        ));
    }
    text.push_str(&format!(
        "epipolar={}\nphotometric={}\nconsistency={}\nsmoothness={}\ntotal={}\n",
        fmt(le.value),
        fmt(total.photometric),
        fmt(total.consistency),
        fmt(total.smoothness),
        fmt(total.total)
    ));
    emit(&text, args.out.as_deref())
}

// ---------------------------------------------------------------------------
// replay

#[derive(Args, Debug, Clone)]
pub struct ReplayArgs {
    /// Manifest emitted by a previous run
    #[arg(long)]
    pub manifest: PathBuf,
}

pub fn cmd_replay(args: &ReplayArgs) -> Result<(), CliError> {
    let manifest = Manifest::read(&args.manifest)?;
    let command = manifest.require("command")?.to_string();
    let arg_pairs = manifest.args();
    let get = |key: &str| -> Option<PathBuf> {
        arg_pairs.iter().find(|(k, _)| k == key).map(|(_, v)| PathBuf::from(v))
    };
    let seed: u64 = manifest
        .require("rng_seed")?
        .parse()
        .map_err(|_| CliError::input("manifest: bad rng_seed"))?;
    match command.as_str() {
        "synth" => {
            // regenerate from the fully materialized config, not the
            // original config file (which may have changed), then restore
            // the original manifest bytes so the directory round-trips
            let out = get("out").ok_or_else(|| CliError::input("manifest missing arg.out"))?;
            let mut cfg = scene_config_from_pairs(&manifest.config_pairs())?;
            cfg.rng_seed = seed;
            let (n, outliers) = write_scene(&cfg, &out)?;
            manifest.write(&out.join("manifest.txt"))?;
            synth_summary(&out, n, outliers)
        }
        "estimate" => {
            let parse_f = |k: &str| -> Result<f64, CliError> {
                arg_pairs
                    .iter()
                    .find(|(key, _)| key == k)
                    .ok_or_else(|| CliError::input(format!("manifest missing arg.{k}")))?
                    .1
                    .parse()
                    .map_err(|_| CliError::input(format!("manifest: bad arg.{k}")))
            };
            cmd_estimate(&EstimateArgs {
                corr: get("corr"),
                flow: get("flow"),
                intrinsics: get("intrinsics")
                    .ok_or_else(|| CliError::input("manifest missing arg.intrinsics"))?,
                delta: parse_f("delta")?,
                hypotheses: parse_f("hypotheses")? as usize,
                seed: Some(seed),
                out: get("out"),
            })
        }
        "eval-odom" => cmd_eval_odom(&EvalOdomArgs {
            est: get("est").ok_or_else(|| CliError::input("manifest missing arg.est"))?,
            gt: get("gt").ok_or_else(|| CliError::input("manifest missing arg.gt"))?,
            out: get("out"),
        }),
        other => Err(CliError::input(format!("manifest command '{other}' is not replayable"))),
    }
}
