//! Flat key-value configuration files with include support.
//!
//! ```text
//! # comment
//! include camera.conf
//! dataset_dir = out/run1
//! parallax_threshold_px = 20
//! ```
//!
//! Later assignments override earlier ones, so an `include` acts as a layer
//! of defaults. Every threshold has a built-in default; a minimal run config
//! is just the dataset location.

use nalgebra::{UnitQuaternion, Vector3};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use thiserror::Error;

use crate::estimator::{EstimatorConfig, GnssMode, InitializerConfig, PipelineConfig};
use crate::sim::{
    AttitudeExcitation, NoiseSpec, SensorConfig, TrajectoryShape, TrajectorySpec,
};
use crate::visual::{CameraModel, Extrinsics};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Read {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: expected `key = value` or `include <path>`")]
    Syntax { path: String, line: usize },
    #[error("key `{key}`: cannot parse {value:?} as {wanted}")]
    Value { key: String, value: String, wanted: &'static str },
    #[error("missing required key `{0}`")]
    Missing(String),
    #[error("include depth exceeded at {0}")]
    IncludeDepth(String),
    #[error("invalid value for `{key}`: {message}")]
    Invalid { key: String, message: String },
}

/// Parsed key-value configuration.
#[derive(Debug, Clone, Default)]
pub struct Config {
    values: BTreeMap<String, String>,
    /// Directory of the top-level file, for resolving relative paths.
    pub base_dir: PathBuf,
}

impl Config {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let mut cfg = Config {
            values: BTreeMap::new(),
            base_dir: path.parent().unwrap_or(Path::new(".")).to_path_buf(),
        };
        cfg.load(path, 0)?;
        Ok(cfg)
    }

    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Config::default();
        cfg.parse(text, Path::new("<inline>"), 0)?;
        Ok(cfg)
    }

    fn load(&mut self, path: &Path, depth: usize) -> Result<(), ConfigError> {
        if depth > 8 {
            return Err(ConfigError::IncludeDepth(path.display().to_string()));
        }
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Read { path: path.display().to_string(), source: e })?;
        self.parse(&text, path, depth)
    }

    fn parse(&mut self, text: &str, path: &Path, depth: usize) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("include ") {
                let inc = rest.trim();
                let inc_path = path.parent().unwrap_or(Path::new(".")).join(inc);
                self.load(&inc_path, depth + 1)?;
                continue;
            }
            match line.split_once('=') {
                Some((k, v)) => {
                    self.values.insert(k.trim().to_string(), v.trim().to_string());
                }
                None => {
                    return Err(ConfigError::Syntax {
                        path: path.display().to_string(),
                        line: i + 1,
                    })
                }
            }
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) {
        self.values.insert(key.to_string(), value.to_string());
    }

    /// Overlay another configuration; its values win.
    pub fn merge(&mut self, other: &Config) {
        for (k, v) in &other.values {
            self.values.insert(k.clone(), v.clone());
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn f64_or(&self, key: &str, default: f64) -> Result<f64, ConfigError> {
        match self.values.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| ConfigError::Value {
                key: key.to_string(),
                value: v.clone(),
                wanted: "number",
            }),
        }
    }

    pub fn usize_or(&self, key: &str, default: usize) -> Result<usize, ConfigError> {
        match self.values.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| ConfigError::Value {
                key: key.to_string(),
                value: v.clone(),
                wanted: "integer",
            }),
        }
    }

    pub fn u64_or(&self, key: &str, default: u64) -> Result<u64, ConfigError> {
        match self.values.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| ConfigError::Value {
                key: key.to_string(),
                value: v.clone(),
                wanted: "integer",
            }),
        }
    }

    pub fn bool_or(&self, key: &str, default: bool) -> Result<bool, ConfigError> {
        match self.values.get(key).map(String::as_str) {
            None => Ok(default),
            Some("true") | Some("1") | Some("yes") => Ok(true),
            Some("false") | Some("0") | Some("no") => Ok(false),
            Some(v) => Err(ConfigError::Value {
                key: key.to_string(),
                value: v.to_string(),
                wanted: "boolean",
            }),
        }
    }

    pub fn vec3_or(&self, key: &str, default: [f64; 3]) -> Result<Vector3<f64>, ConfigError> {
        match self.values.get(key) {
            None => Ok(Vector3::from(default)),
            Some(v) => {
                let parts: Result<Vec<f64>, _> =
                    v.split(',').map(|p| p.trim().parse::<f64>()).collect();
                match parts {
                    Ok(p) if p.len() == 3 => Ok(Vector3::new(p[0], p[1], p[2])),
                    _ => Err(ConfigError::Value {
                        key: key.to_string(),
                        value: v.clone(),
                        wanted: "three comma-separated numbers",
                    }),
                }
            }
        }
    }

    fn validate_positive(&self, key: &str, value: f64) -> Result<f64, ConfigError> {
        if value > 0.0 {
            Ok(value)
        } else {
            Err(ConfigError::Invalid { key: key.to_string(), message: "must be positive".into() })
        }
    }

    /// Camera model from `cam_*` keys.
    pub fn camera(&self) -> Result<CameraModel, ConfigError> {
        Ok(CameraModel {
            fx: self.validate_positive("cam_fx", self.f64_or("cam_fx", 400.0)?)?,
            fy: self.validate_positive("cam_fy", self.f64_or("cam_fy", 400.0)?)?,
            cx: self.f64_or("cam_cx", 320.0)?,
            cy: self.f64_or("cam_cy", 240.0)?,
            k1: self.f64_or("cam_k1", 0.0)?,
            k2: self.f64_or("cam_k2", 0.0)?,
            p1: self.f64_or("cam_p1", 0.0)?,
            p2: self.f64_or("cam_p2", 0.0)?,
            width: self.usize_or("cam_width", 640)? as u32,
            height: self.usize_or("cam_height", 480)? as u32,
        })
    }

    /// Camera-IMU extrinsics from `ext_q_bc` (`qw,qx,qy,qz`) and `ext_p_bc`.
    pub fn extrinsics(&self) -> Result<Extrinsics, ConfigError> {
        let default = Extrinsics::forward_facing();
        let q = match self.values.get("ext_q_bc") {
            None => default.q_bc,
            Some(v) => {
                let parts: Result<Vec<f64>, _> =
                    v.split(',').map(|p| p.trim().parse::<f64>()).collect();
                match parts {
                    Ok(p) if p.len() == 4 => UnitQuaternion::from_quaternion(
                        nalgebra::Quaternion::new(p[0], p[1], p[2], p[3]),
                    ),
                    _ => {
                        return Err(ConfigError::Value {
                            key: "ext_q_bc".into(),
                            value: v.clone(),
                            wanted: "qw,qx,qy,qz",
                        })
                    }
                }
            }
        };
        Ok(Extrinsics { q_bc: q, p_bc: self.vec3_or("ext_p_bc", [0.0; 3])? })
    }

    /// Camera-IMU time offset added to feature timestamps, seconds.
    pub fn camera_time_offset(&self) -> Result<f64, ConfigError> {
        self.f64_or("cam_time_offset", 0.0)
    }

    /// GNSS antenna lever arm in the body frame, meters.
    pub fn lever_arm(&self) -> Result<Vector3<f64>, ConfigError> {
        self.vec3_or("gnss_lever_arm", [0.0; 3])
    }

    /// Estimator and front-end thresholds (all defaulted).
    pub fn pipeline(&self) -> Result<PipelineConfig, ConfigError> {
        let mut est = EstimatorConfig::default();
        est.window_capacity = self.usize_or("window_capacity", est.window_capacity)?;
        est.pixel_sigma = self.f64_or("pixel_sigma", est.pixel_sigma)?;
        est.huber_delta = self.f64_or("huber_delta", est.huber_delta)?;
        est.reproj_obs_gate_px =
            self.f64_or("reproj_obs_gate_px", est.reproj_obs_gate_px)?;
        est.reproj_landmark_gate_px =
            self.f64_or("reproj_landmark_gate_px", est.reproj_landmark_gate_px)?;
        let confidence = self.f64_or("chi2_confidence", 0.95)?;
        if (confidence - 0.95).abs() > 1e-9 {
            return Err(ConfigError::Invalid {
                key: "chi2_confidence".into(),
                message: "only the 95% gate (5.991, 2 dof) is tabulated".into(),
            });
        }
        est.frontend.parallax_threshold_px =
            self.f64_or("parallax_threshold_px", est.frontend.parallax_threshold_px)?;
        est.frontend.observation_interval_s =
            self.f64_or("observation_interval_s", est.frontend.observation_interval_s)?;
        est.frontend.min_triangulation_parallax_px = self.f64_or(
            "min_triangulation_parallax_px",
            est.frontend.min_triangulation_parallax_px,
        )?;
        est.frontend.min_depth = self.f64_or("depth_min", est.frontend.min_depth)?;
        est.frontend.max_depth = self.f64_or("depth_max", est.frontend.max_depth)?;
        est.frontend.track_gate_px = self.f64_or("track_gate_px", est.frontend.track_gate_px)?;
        est.frontend.max_features = self.usize_or("max_features", est.frontend.max_features)?;
        est.estimate_extrinsics = self.bool_or("estimate_extrinsics", false)?;
        est.imu_noise.gyro_noise = self.f64_or("imu_gyro_noise", est.imu_noise.gyro_noise)?;
        est.imu_noise.accel_noise = self.f64_or("imu_accel_noise", est.imu_noise.accel_noise)?;
        est.imu_noise.gyro_walk = self.f64_or("imu_gyro_walk", est.imu_noise.gyro_walk)?;
        est.imu_noise.accel_walk = self.f64_or("imu_accel_walk", est.imu_noise.accel_walk)?;

        let mut init = InitializerConfig::default();
        init.init_duration = self.f64_or("init_duration", init.init_duration)?;
        init.min_init_speed = self.f64_or("min_init_speed", init.min_init_speed)?;
        if let Some(v) = self.values.get("initial_heading_deg") {
            let h: f64 = v.parse().map_err(|_| ConfigError::Value {
                key: "initial_heading_deg".into(),
                value: v.clone(),
                wanted: "number",
            })?;
            init.initial_heading = Some(h.to_radians());
        }

        let mode = match self.values.get("mode").map(String::as_str) {
            None | Some("gvins") => GnssMode::Gvins,
            Some("vins_after_init") => GnssMode::VinsAfterInit,
            Some(v) => {
                return Err(ConfigError::Value {
                    key: "mode".into(),
                    value: v.to_string(),
                    wanted: "gvins | vins_after_init",
                })
            }
        };

        for (key, v) in [
            ("parallax_threshold_px", est.frontend.parallax_threshold_px),
            ("observation_interval_s", est.frontend.observation_interval_s),
            ("depth_min", est.frontend.min_depth),
            ("reproj_obs_gate_px", est.reproj_obs_gate_px),
            ("reproj_landmark_gate_px", est.reproj_landmark_gate_px),
            ("pixel_sigma", est.pixel_sigma),
        ] {
            self.validate_positive(key, v)?;
        }

        Ok(PipelineConfig { estimator: est, initializer: init, mode })
    }

    /// Trajectory/noise/sensor specs for the simulator.
    pub fn simulation(&self) -> Result<(TrajectorySpec, NoiseSpec, SensorConfig), ConfigError> {
        let shape = match self.values.get("shape").map(String::as_str) {
            None | Some("figure_eight") => TrajectoryShape::FigureEight {
                half_length: self.f64_or("half_length", 40.0)?,
                half_width: self.f64_or("half_width", 20.0)?,
            },
            Some("circle") => TrajectoryShape::Circle { radius: self.f64_or("radius", 20.0)? },
            Some("straight") => TrajectoryShape::Straight,
            Some("spline") => {
                let raw = self
                    .values
                    .get("waypoints")
                    .ok_or_else(|| ConfigError::Missing("waypoints".into()))?;
                let mut waypoints = Vec::new();
                for (i, wp) in raw.split(';').enumerate() {
                    let parts: Result<Vec<f64>, _> =
                        wp.split(',').map(|p| p.trim().parse::<f64>()).collect();
                    match parts {
                        Ok(p) if p.len() == 3 => waypoints.push([p[0], p[1], p[2]]),
                        _ => {
                            return Err(ConfigError::Invalid {
                                key: "waypoints".into(),
                                message: format!("waypoint {i} is not `x,y,z`"),
                            })
                        }
                    }
                }
                TrajectoryShape::WaypointSpline { waypoints }
            }
            Some(v) => {
                return Err(ConfigError::Value {
                    key: "shape".into(),
                    value: v.to_string(),
                    wanted: "figure_eight | circle | straight | spline",
                })
            }
        };
        let excitation = match self.f64_or("excitation_pitch_amplitude", 0.0)? {
            a if a > 0.0 => Some(AttitudeExcitation {
                pitch_amplitude: a,
                roll_amplitude: self.f64_or("excitation_roll_amplitude", a * 0.7)?,
                frequency: self.f64_or("excitation_frequency", 0.8)?,
            }),
            _ => None,
        };
        let spec = TrajectorySpec {
            shape,
            speed: self.validate_positive("speed", self.f64_or("speed", 1.5)?)?,
            duration: self.validate_positive("duration", self.f64_or("duration", 120.0)?)?,
            origin_lat_deg: self.f64_or("origin_lat_deg", 30.0)?,
            origin_lon_deg: self.f64_or("origin_lon_deg", 114.0)?,
            origin_height: self.f64_or("origin_height", 40.0)?,
            excitation,
        };

        let mut noise = match self.values.get("noise_preset").map(String::as_str) {
            None | Some("noise_free") => NoiseSpec::noise_free(),
            Some("mems") => NoiseSpec::mems_industrial(),
            Some(v) => {
                return Err(ConfigError::Value {
                    key: "noise_preset".into(),
                    value: v.to_string(),
                    wanted: "noise_free | mems",
                })
            }
        };
        noise.gyro_noise = self.f64_or("noise_gyro", noise.gyro_noise)?;
        noise.accel_noise = self.f64_or("noise_accel", noise.accel_noise)?;
        noise.gyro_walk = self.f64_or("noise_gyro_walk", noise.gyro_walk)?;
        noise.accel_walk = self.f64_or("noise_accel_walk", noise.accel_walk)?;
        noise.pixel_sigma = self.f64_or("noise_pixel_sigma", noise.pixel_sigma)?;
        noise.feature_outlier_fraction =
            self.f64_or("feature_outlier_fraction", noise.feature_outlier_fraction)?;
        let gs = self.vec3_or(
            "noise_gnss_sigma",
            [noise.gnss_sigma[0], noise.gnss_sigma[1], noise.gnss_sigma[2]],
        )?;
        noise.gnss_sigma = [gs.x, gs.y, gs.z];
        if let Some(v) = self.values.get("gyro_bias") {
            let b = self.vec3_or("gyro_bias", [0.0; 3])?;
            let _ = v;
            noise.gyro_bias = Some([b.x, b.y, b.z]);
        }
        if let Some(v) = self.values.get("accel_bias") {
            let b = self.vec3_or("accel_bias", [0.0; 3])?;
            let _ = v;
            noise.accel_bias = Some([b.x, b.y, b.z]);
        }
        if let Some(raw) = self.values.get("gnss_dropouts") {
            for seg in raw.split(';') {
                let parts: Result<Vec<f64>, _> =
                    seg.split(',').map(|p| p.trim().parse::<f64>()).collect();
                match parts {
                    Ok(p) if p.len() == 2 => noise.gnss_dropouts.push([p[0], p[1]]),
                    _ => {
                        return Err(ConfigError::Invalid {
                            key: "gnss_dropouts".into(),
                            message: "expected `start,end;start,end`".into(),
                        })
                    }
                }
            }
        }

        let lever = self.lever_arm()?;
        let sensors = SensorConfig {
            imu_rate: self.validate_positive("imu_rate", self.f64_or("imu_rate", 200.0)?)?,
            frame_rate: self.validate_positive("frame_rate", self.f64_or("frame_rate", 10.0)?)?,
            gnss_rate: self.validate_positive("gnss_rate", self.f64_or("gnss_rate", 1.0)?)?,
            lever_arm: [lever.x, lever.y, lever.z],
            landmark_count: self.usize_or("landmark_count", 900)?,
            landmark_depth_min: self.f64_or("landmark_depth_min", 2.0)?,
            landmark_depth_max: self.f64_or("landmark_depth_max", 60.0)?,
            grid_size_px: self.usize_or("grid_size_px", 200)? as u32,
            max_per_cell: self.usize_or("max_per_cell", 25)?,
            max_features: self.usize_or("max_features", 150)?,
            min_separation_px: self.f64_or("min_separation_px", 15.0)?,
        };
        Ok((spec, noise, sensors))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;
    use tempfile::tempdir;

    #[test]
    fn parses_values_comments_and_includes() {
        let dir = tempdir().unwrap();
        fs::write(dir.path().join("base.conf"), "cam_fx = 500 # focal\nspeed = 2.0\n").unwrap();
        fs::write(
            dir.path().join("run.conf"),
            "include base.conf\nspeed = 1.0\nwindow_capacity = 8\n",
        )
        .unwrap();
        let cfg = Config::from_file(&dir.path().join("run.conf")).unwrap();
        assert_eq!(cfg.f64_or("cam_fx", 0.0).unwrap(), 500.0);
        // later assignment wins over the include
        assert_eq!(cfg.f64_or("speed", 0.0).unwrap(), 1.0);
        assert_eq!(cfg.usize_or("window_capacity", 0).unwrap(), 8);
    }

    #[test]
    fn defaults_cover_everything() {
        let cfg = Config::from_text("").unwrap();
        let p = cfg.pipeline().unwrap();
        assert_eq!(p.estimator.frontend.parallax_threshold_px, 20.0);
        assert_eq!(p.estimator.frontend.observation_interval_s, 0.5);
        assert_eq!(p.estimator.frontend.min_triangulation_parallax_px, 10.0);
        assert_eq!(p.estimator.frontend.min_depth, 1.0);
        assert_eq!(p.estimator.frontend.max_depth, 100.0);
        assert_eq!(p.estimator.reproj_obs_gate_px, 4.5);
        assert_eq!(p.estimator.reproj_landmark_gate_px, 1.5);
        assert_eq!(p.estimator.window_capacity, 10);
        let (spec, noise, sensors) = cfg.simulation().unwrap();
        assert_eq!(spec.speed, 1.5);
        assert_eq!(noise.pixel_sigma, 0.0);
        assert_eq!(sensors.max_features, 150);
    }

    #[test]
    fn invalid_values_are_rejected_with_key_names() {
        let cfg = Config::from_text("speed = -1\n").unwrap();
        match cfg.simulation() {
            Err(ConfigError::Invalid { key, .. }) => assert_eq!(key, "speed"),
            other => panic!("unexpected {other:?}"),
        }
        let cfg = Config::from_text("mode = fancy\n").unwrap();
        assert!(matches!(cfg.pipeline(), Err(ConfigError::Value { .. })));
    }
}
