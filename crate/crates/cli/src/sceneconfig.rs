//! key=value serialization of the synthetic scene configuration.

use epiflow::synth::{DepthModel, SceneConfig};

use crate::errors::CliError;

/// Apply `key=value` pairs on top of the default configuration.
pub fn scene_config_from_pairs(pairs: &[(String, String)]) -> Result<SceneConfig, CliError> {
    let mut cfg = SceneConfig::default();
    for (key, value) in pairs {
        apply_key(&mut cfg, key, value)?;
    }
    Ok(cfg)
}

fn apply_key(cfg: &mut SceneConfig, key: &str, value: &str) -> Result<(), CliError> {
    let bad = |what: &str| CliError::config(format!("config key '{key}': bad {what} '{value}'"));
    let f = || value.parse::<f64>().map_err(|_| bad("number"));
    let u = || value.parse::<usize>().map_err(|_| bad("integer"));
    match key {
        "width" => cfg.width = u()?,
        "height" => cfg.height = u()?,
        "fx" => cfg.intrinsics.fx = f()?,
        "fy" => cfg.intrinsics.fy = f()?,
        "cx" => cfg.intrinsics.cx = f()?,
        "cy" => cfg.intrinsics.cy = f()?,
        "skew" => cfg.intrinsics.skew = f()?,
        "fx_second" => cfg.intrinsics_second.fx = f()?,
        "fy_second" => cfg.intrinsics_second.fy = f()?,
        "cx_second" => cfg.intrinsics_second.cx = f()?,
        "cy_second" => cfg.intrinsics_second.cy = f()?,
        "skew_second" => cfg.intrinsics_second.skew = f()?,
        "pixel_stride" => cfg.pixel_stride = f()?,
        "rotation_min" => cfg.rotation_range.0 = f()?,
        "rotation_max" => cfg.rotation_range.1 = f()?,
        "baseline" => cfg.baseline = f()?,
        "depth_min" => cfg.depth_range.0 = f()?,
        "depth_max" => cfg.depth_range.1 = f()?,
        "depth_model" => {
            cfg.depth_model = match value {
                "random" => DepthModel::RandomUniform,
                "plane" => DepthModel::Plane,
                _ => return Err(bad("depth model (random|plane)")),
            }
        }
        "forward_damping" => cfg.translation_forward_damping = f()?,
        "pixel_noise" => cfg.pixel_noise = f()?,
        "outlier_fraction" => cfg.outlier_fraction = f()?,
        "outlier_max_displacement" => cfg.outlier_max_displacement = f()?,
        "outlier_min_residual" => cfg.outlier_min_residual = f()?,
        "with_occluder" => {
            cfg.with_occluder = match value {
                "1" | "true" => true,
                "0" | "false" => false,
                _ => return Err(bad("flag (0|1|true|false)")),
            }
        }
        "seed" => cfg.rng_seed = value.parse().map_err(|_| bad("integer"))?,
        other => return Err(CliError::config(format!("unknown config key '{other}'"))),
    }
    Ok(())
}

/// Every field materialized, in a stable order, for the run manifest.
pub fn scene_config_to_pairs(cfg: &SceneConfig) -> Vec<(String, String)> {
    let mut out = Vec::new();
    let mut push = |k: &str, v: String| out.push((k.to_string(), v));
    push("width", cfg.width.to_string());
    push("height", cfg.height.to_string());
    push("fx", cfg.intrinsics.fx.to_string());
    push("fy", cfg.intrinsics.fy.to_string());
    push("cx", cfg.intrinsics.cx.to_string());
    push("cy", cfg.intrinsics.cy.to_string());
    push("skew", cfg.intrinsics.skew.to_string());
    push("fx_second", cfg.intrinsics_second.fx.to_string());
    push("fy_second", cfg.intrinsics_second.fy.to_string());
    push("cx_second", cfg.intrinsics_second.cx.to_string());
    push("cy_second", cfg.intrinsics_second.cy.to_string());
    push("skew_second", cfg.intrinsics_second.skew.to_string());
    push("pixel_stride", cfg.pixel_stride.to_string());
    push("rotation_min", cfg.rotation_range.0.to_string());
    push("rotation_max", cfg.rotation_range.1.to_string());
    push("baseline", cfg.baseline.to_string());
    push("depth_min", cfg.depth_range.0.to_string());
    push("depth_max", cfg.depth_range.1.to_string());
    push(
        "depth_model",
        match cfg.depth_model {
            DepthModel::RandomUniform => "random".to_string(),
            DepthModel::Plane => "plane".to_string(),
        },
    );
    push("forward_damping", cfg.translation_forward_damping.to_string());
    push("pixel_noise", cfg.pixel_noise.to_string());
    push("outlier_fraction", cfg.outlier_fraction.to_string());
    push("outlier_max_displacement", cfg.outlier_max_displacement.to_string());
    push("outlier_min_residual", cfg.outlier_min_residual.to_string());
    push("with_occluder", (cfg.with_occluder as u8).to_string());
    push("seed", cfg.rng_seed.to_string());
    out
}
