//! Dataset file formats.
//!
//! All CSV files are headerless with `#`-prefixed comment lines allowed:
//!
//! * IMU: `t,gx,gy,gz,ax,ay,az` (s, rad/s, m/s²)
//! * features: `t,frame_id,feature_id,u,v`
//! * GNSS: `t,lat_deg,lon_deg,h,sigma_n,sigma_e,sigma_d,valid`
//!
//! Trajectories are TUM format: `t x y z qx qy qz qw`. Floats are written
//! with exact round-trip precision so regenerated files are byte-identical
//! under the same seed.

use nalgebra::{UnitQuaternion, Vector3};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use thiserror::Error;

use crate::estimator::GnssFix;
use crate::eval::TrajectoryPose;
use crate::geodesy::GeodeticPosition;
use crate::ins::{ImuSample, NavState};
use crate::sim::FeatureRow;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: expected {expected} fields, found {found}")]
    FieldCount { path: String, line: usize, expected: usize, found: usize },
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },
}

fn file_err(path: &Path, source: std::io::Error) -> IoError {
    IoError::File { path: path.display().to_string(), source }
}

fn parse_rows(path: &Path, expected: usize) -> Result<Vec<(usize, Vec<f64>)>, IoError> {
    let content = fs::read_to_string(path).map_err(|e| file_err(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in content.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != expected {
            return Err(IoError::FieldCount {
                path: path.display().to_string(),
                line: i + 1,
                expected,
                found: fields.len(),
            });
        }
        let mut values = Vec::with_capacity(expected);
        for f in fields {
            values.push(f.parse::<f64>().map_err(|e| IoError::Parse {
                path: path.display().to_string(),
                line: i + 1,
                message: format!("{f:?}: {e}"),
            })?);
        }
        rows.push((i + 1, values));
    }
    Ok(rows)
}

pub fn write_imu_csv(path: &Path, samples: &[ImuSample]) -> Result<(), IoError> {
    let mut w = BufWriter::new(fs::File::create(path).map_err(|e| file_err(path, e))?);
    for s in samples {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            s.t,
            s.angular_rate.x,
            s.angular_rate.y,
            s.angular_rate.z,
            s.specific_force.x,
            s.specific_force.y,
            s.specific_force.z
        )
        .map_err(|e| file_err(path, e))?;
    }
    Ok(())
}

pub fn read_imu_csv(path: &Path) -> Result<Vec<ImuSample>, IoError> {
    parse_rows(path, 7).map(|rows| {
        rows.into_iter()
            .map(|(_, v)| ImuSample {
                t: v[0],
                angular_rate: Vector3::new(v[1], v[2], v[3]),
                specific_force: Vector3::new(v[4], v[5], v[6]),
            })
            .collect()
    })
}

pub fn write_features_csv(path: &Path, rows: &[FeatureRow]) -> Result<(), IoError> {
    let mut w = BufWriter::new(fs::File::create(path).map_err(|e| file_err(path, e))?);
    for r in rows {
        writeln!(w, "{},{},{},{},{}", r.t, r.frame_id, r.feature_id, r.u, r.v)
            .map_err(|e| file_err(path, e))?;
    }
    Ok(())
}

pub fn read_features_csv(path: &Path) -> Result<Vec<FeatureRow>, IoError> {
    parse_rows(path, 5).map(|rows| {
        rows.into_iter()
            .map(|(_, v)| FeatureRow {
                t: v[0],
                frame_id: v[1] as u64,
                feature_id: v[2] as u64,
                u: v[3],
                v: v[4],
            })
            .collect()
    })
}

/// GNSS rows carry no lever arm; the caller attaches the configured one.
pub fn write_gnss_csv(path: &Path, fixes: &[GnssFix]) -> Result<(), IoError> {
    let mut w = BufWriter::new(fs::File::create(path).map_err(|e| file_err(path, e))?);
    for f in fixes {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            f.t,
            f.position.latitude.to_degrees(),
            f.position.longitude.to_degrees(),
            f.position.height,
            f.sigma.x,
            f.sigma.y,
            f.sigma.z,
            u8::from(f.valid)
        )
        .map_err(|e| file_err(path, e))?;
    }
    Ok(())
}

pub fn read_gnss_csv(path: &Path, lever_arm: Vector3<f64>) -> Result<Vec<GnssFix>, IoError> {
    let rows = parse_rows(path, 8)?;
    let mut fixes = Vec::with_capacity(rows.len());
    for (line, v) in rows {
        let position =
            GeodeticPosition::from_degrees(v[1], v[2], v[3]).map_err(|e| IoError::Parse {
                path: path.display().to_string(),
                line,
                message: e.to_string(),
            })?;
        fixes.push(GnssFix {
            t: v[0],
            position,
            sigma: Vector3::new(v[4], v[5], v[6]),
            lever_arm,
            valid: v[7] != 0.0,
        });
    }
    Ok(fixes)
}

pub fn write_tum<'a>(
    path: &Path,
    poses: impl IntoIterator<Item = &'a TrajectoryPose>,
) -> Result<(), IoError> {
    let mut w = BufWriter::new(fs::File::create(path).map_err(|e| file_err(path, e))?);
    for p in poses {
        let q = p.q.quaternion();
        writeln!(w, "{} {} {} {} {} {} {} {}", p.t, p.p.x, p.p.y, p.p.z, q.i, q.j, q.k, q.w)
            .map_err(|e| file_err(path, e))?;
    }
    Ok(())
}

pub fn read_tum(path: &Path) -> Result<Vec<TrajectoryPose>, IoError> {
    let content = fs::read_to_string(path).map_err(|e| file_err(path, e))?;
    let mut poses = Vec::new();
    for (i, line) in content.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 8 {
            return Err(IoError::FieldCount {
                path: path.display().to_string(),
                line: i + 1,
                expected: 8,
                found: fields.len(),
            });
        }
        let mut v = [0.0; 8];
        for (k, f) in fields.iter().enumerate() {
            v[k] = f.parse::<f64>().map_err(|e| IoError::Parse {
                path: path.display().to_string(),
                line: i + 1,
                message: format!("{f:?}: {e}"),
            })?;
        }
        poses.push(TrajectoryPose {
            t: v[0],
            p: Vector3::new(v[1], v[2], v[3]),
            q: UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(v[7], v[4], v[5], v[6])),
        });
    }
    Ok(poses)
}

pub fn nav_state_to_pose(state: &NavState) -> TrajectoryPose {
    TrajectoryPose { t: state.t, p: state.p_wb, q: state.q_wb }
}
