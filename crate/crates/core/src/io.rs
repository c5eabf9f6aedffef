//! File formats: `.flo` optical-flow files, 12-number [R|t] trajectory
//! lines, plain-text correspondence tables, and key=value intrinsics /
//! manifest files.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::Vector2;
use thiserror::Error;

use crate::geometry::{CameraIntrinsics, FlowField, PixelPoint};
use crate::odometry::{Pose, Trajectory};

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Format(String),
}

const FLO_MAGIC: f32 = 202021.25;
/// Components at or above this magnitude mark a pixel as invalid, per the
/// flow-file convention.
const FLO_UNKNOWN: f32 = 1e9;

/// Write a flow field in the standard interchange format: f32 magic
/// 202021.25, i32 width/height, then row-major interleaved (u, v) f32,
/// all little-endian. Invalid pixels are stored as 1e10.
pub fn write_flo(path: &Path, flow: &FlowField) -> Result<(), IoError> {
    let mut buf = Vec::with_capacity(12 + flow.len() * 8);
    buf.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    buf.extend_from_slice(&(flow.width as i32).to_le_bytes());
    buf.extend_from_slice(&(flow.height as i32).to_le_bytes());
    for idx in 0..flow.len() {
        let v = flow.at(idx);
        let (u, w) = if flow.is_valid(idx) {
            (v.x as f32, v.y as f32)
        } else {
            (1e10, 1e10)
        };
        buf.extend_from_slice(&u.to_le_bytes());
        buf.extend_from_slice(&w.to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_flo(path: &Path) -> Result<FlowField, IoError> {
    let mut file = fs::File::open(path)?;
    let mut header = [0u8; 12];
    file.read_exact(&mut header)?;
    let magic = f32::from_le_bytes(header[0..4].try_into().unwrap());
    if magic != FLO_MAGIC {
        return Err(IoError::Format(format!(
            "bad flow-file magic {magic} (expected {FLO_MAGIC})"
        )));
    }
    let width = i32::from_le_bytes(header[4..8].try_into().unwrap());
    let height = i32::from_le_bytes(header[8..12].try_into().unwrap());
    if width <= 0 || height <= 0 || (width as i64) * (height as i64) > 1 << 30 {
        return Err(IoError::Format(format!("bad flow dimensions {width}x{height}")));
    }
    let n = width as usize * height as usize;
    let mut body = vec![0u8; n * 8];
    file.read_exact(&mut body)?;
    let mut data = Vec::with_capacity(n);
    let mut valid = Vec::with_capacity(n);
    for i in 0..n {
        let u = f32::from_le_bytes(body[8 * i..8 * i + 4].try_into().unwrap());
        let v = f32::from_le_bytes(body[8 * i + 4..8 * i + 8].try_into().unwrap());
        let ok = u.abs() < FLO_UNKNOWN && v.abs() < FLO_UNKNOWN;
        valid.push(ok);
        data.push(if ok { Vector2::new(u as f64, v as f64) } else { Vector2::zeros() });
    }
    let flow = FlowField::new(width as usize, height as usize, data);
    Ok(if valid.iter().all(|&b| b) { flow } else { flow.with_validity(valid) })
}

/// Write a trajectory: one line per frame, 12 space-separated numbers,
/// row-major 3x4 [R|t] camera-to-world.
pub fn write_trajectory(path: &Path, traj: &Trajectory) -> Result<(), IoError> {
    let mut out = String::new();
    for pose in &traj.poses {
        let v = pose.flatten();
        let line: Vec<String> = v.iter().map(|x| format!("{x:.17e}")).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_trajectory(path: &Path) -> Result<Trajectory, IoError> {
    let text = fs::read_to_string(path)?;
    let mut poses = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let nums: Result<Vec<f64>, _> = line.split_whitespace().map(str::parse).collect();
        let nums = nums.map_err(|_| {
            IoError::Format(format!("{}:{}: non-numeric pose entry", path.display(), lineno + 1))
        })?;
        if nums.len() != 12 {
            return Err(IoError::Format(format!(
                "{}:{}: expected 12 numbers, got {}",
                path.display(),
                lineno + 1,
                nums.len()
            )));
        }
        let mut flat = [0.0; 12];
        flat.copy_from_slice(&nums);
        poses.push(Pose::from_flat(&flat));
    }
    Ok(Trajectory::new(poses))
}

/// Pixel correspondences with optional inlier labels.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceTable {
    pub first: Vec<PixelPoint>,
    pub second: Vec<PixelPoint>,
    pub labels: Option<Vec<bool>>,
}

/// Write `u v u' v' [label]` lines; labels are 0/1 when present.
pub fn write_correspondences(path: &Path, table: &CorrespondenceTable) -> Result<(), IoError> {
    let mut out = String::from("# u v u' v' [label]\n");
    for i in 0..table.first.len() {
        let p = table.first[i];
        let q = table.second[i];
        out.push_str(&format!("{:.17e} {:.17e} {:.17e} {:.17e}", p.u, p.v, q.u, q.v));
        if let Some(labels) = &table.labels {
            out.push_str(if labels[i] { " 1" } else { " 0" });
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_correspondences(path: &Path) -> Result<CorrespondenceTable, IoError> {
    let text = fs::read_to_string(path)?;
    let mut first = Vec::new();
    let mut second = Vec::new();
    let mut labels: Vec<bool> = Vec::new();
    let mut labeled = None;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 && fields.len() != 5 {
            return Err(IoError::Format(format!(
                "{}:{}: expected 4 or 5 fields, got {}",
                path.display(),
                lineno + 1,
                fields.len()
            )));
        }
        let has_label = fields.len() == 5;
        match labeled {
            None => labeled = Some(has_label),
            Some(expected) if expected != has_label => {
                return Err(IoError::Format(format!(
                    "{}:{}: inconsistent label column",
                    path.display(),
                    lineno + 1
                )));
            }
            _ => {}
        }
        let parse = |s: &str| -> Result<f64, IoError> {
            s.parse().map_err(|_| {
                IoError::Format(format!(
                    "{}:{}: bad number '{s}'",
                    path.display(),
                    lineno + 1
                ))
            })
        };
        first.push(PixelPoint::new(parse(fields[0])?, parse(fields[1])?));
        second.push(PixelPoint::new(parse(fields[2])?, parse(fields[3])?));
        if has_label {
            labels.push(match fields[4] {
                "1" => true,
                "0" => false,
                other => {
                    return Err(IoError::Format(format!(
                        "{}:{}: label must be 0 or 1, got '{other}'",
                        path.display(),
                        lineno + 1
                    )));
                }
            });
        }
    }
    Ok(CorrespondenceTable {
        first,
        second,
        labels: if labeled == Some(true) { Some(labels) } else { None },
    })
}

/// Write intrinsics as key=value; a second camera, when present, uses the
/// `_second` key suffix.
pub fn write_intrinsics(
    path: &Path,
    k: &CameraIntrinsics,
    k_second: Option<&CameraIntrinsics>,
) -> Result<(), IoError> {
    let mut out = String::new();
    let mut emit = |suffix: &str, cam: &CameraIntrinsics| {
        out.push_str(&format!(
            "fx{s}={:.17e}\nfy{s}={:.17e}\ncx{s}={:.17e}\ncy{s}={:.17e}\nskew{s}={:.17e}\n",
            cam.fx,
            cam.fy,
            cam.cx,
            cam.cy,
            cam.skew,
            s = suffix
        ));
    };
    emit("", k);
    if let Some(kp) = k_second {
        emit("_second", kp);
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_intrinsics(
    path: &Path,
) -> Result<(CameraIntrinsics, Option<CameraIntrinsics>), IoError> {
    let pairs = read_key_values(path)?;
    let get = |key: &str| -> Result<Option<f64>, IoError> {
        match pairs.iter().rev().find(|(k, _)| k == key) {
            None => Ok(None),
            Some((_, v)) => v
                .parse()
                .map(Some)
                .map_err(|_| IoError::Format(format!("{}: bad number for {key}", path.display()))),
        }
    };
    let require = |key: &str| -> Result<f64, IoError> {
        get(key)?.ok_or_else(|| IoError::Format(format!("{}: missing key {key}", path.display())))
    };
    let mut k = CameraIntrinsics::new(require("fx")?, require("fy")?, require("cx")?, require("cy")?);
    k.skew = get("skew")?.unwrap_or(0.0);
    let k_second = if get("fx_second")?.is_some() {
        let mut kp = CameraIntrinsics::new(
            require("fx_second")?,
            require("fy_second")?,
            require("cx_second")?,
            require("cy_second")?,
        );
        kp.skew = get("skew_second")?.unwrap_or(0.0);
        Some(kp)
    } else {
        None
    };
    Ok((k, k_second))
}

/// Read ordered `key=value` pairs; '#' starts a comment.
pub fn read_key_values(path: &Path) -> Result<Vec<(String, String)>, IoError> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(IoError::Format(format!(
                "{}:{}: expected key=value",
                path.display(),
                lineno + 1
            )));
        };
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Write ordered `key=value` pairs (stable order in, stable bytes out).
pub fn write_key_values(path: &Path, pairs: &[(String, String)]) -> Result<(), IoError> {
    let mut file = fs::File::create(path)?;
    for (k, v) in pairs {
        writeln!(file, "{k}={v}")?;
    }
    Ok(())
}
