//! Ground-truth trajectory generation and measurement synthesis (IMU,
//! feature tracks, GNSS) with configurable noise and outlier injection.
//!
//! Everything is driven by a single seed; identical seeds produce identical
//! datasets bit for bit.

use nalgebra::{UnitQuaternion, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::estimator::GnssFix;
use crate::geodesy::{world_to_geodetic, GeodeticPosition, WorldFrame};
use crate::ins::{ImuSample, NavState};
use crate::visual::{CameraModel, Extrinsics};

/// Trajectory shape, all C² in time.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum TrajectoryShape {
    /// Constant velocity due north.
    Straight,
    /// Horizontal circle, entered heading north.
    Circle { radius: f64 },
    /// Horizontal figure-eight `(A sin θ, B sin 2θ)`.
    FigureEight { half_length: f64, half_width: f64 },
    /// Natural cubic spline through waypoints (NED, meters), traversed at
    /// roughly constant speed.
    WaypointSpline { waypoints: Vec<[f64; 3]> },
}

/// Optional sinusoidal pitch/roll excitation on top of the
/// heading-follows-velocity attitude profile.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AttitudeExcitation {
    pub pitch_amplitude: f64,
    pub roll_amplitude: f64,
    pub frequency: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectorySpec {
    pub shape: TrajectoryShape,
    /// Average speed, m/s.
    pub speed: f64,
    pub duration: f64,
    pub origin_lat_deg: f64,
    pub origin_lon_deg: f64,
    pub origin_height: f64,
    pub excitation: Option<AttitudeExcitation>,
}

impl TrajectorySpec {
    pub fn origin(&self) -> GeodeticPosition {
        GeodeticPosition::from_degrees(self.origin_lat_deg, self.origin_lon_deg, self.origin_height)
            .expect("valid origin")
    }
}

impl Default for TrajectorySpec {
    fn default() -> Self {
        Self {
            shape: TrajectoryShape::FigureEight { half_length: 40.0, half_width: 20.0 },
            speed: 1.5,
            duration: 120.0,
            origin_lat_deg: 30.0,
            origin_lon_deg: 114.0,
            origin_height: 40.0,
            excitation: None,
        }
    }
}

/// Measurement noise and error injection. All-zero means noise-free.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Gyro white noise, rad/s/√Hz.
    pub gyro_noise: f64,
    /// Accelerometer white noise, m/s²/√Hz.
    pub accel_noise: f64,
    /// Gyro bias random walk, rad/s/√s.
    pub gyro_walk: f64,
    /// Accelerometer bias random walk, m/s²/√s.
    pub accel_walk: f64,
    /// Standard deviation of the constant gyro bias draw, rad/s.
    pub gyro_bias_sigma: f64,
    /// Standard deviation of the constant accelerometer bias draw, m/s².
    pub accel_bias_sigma: f64,
    /// Explicit constant biases (override the random draw when set).
    pub gyro_bias: Option<[f64; 3]>,
    pub accel_bias: Option<[f64; 3]>,
    /// Feature pixel noise, px.
    pub pixel_sigma: f64,
    /// Fraction of feature observations replaced by uniform random pixels.
    pub feature_outlier_fraction: f64,
    /// GNSS noise per axis (N, E, D), m.
    pub gnss_sigma: [f64; 3],
    /// Intervals `[start, end]` during which fixes are flagged invalid.
    pub gnss_dropouts: Vec<[f64; 2]>,
}

impl NoiseSpec {
    pub fn noise_free() -> Self {
        Self {
            gyro_noise: 0.0,
            accel_noise: 0.0,
            gyro_walk: 0.0,
            accel_walk: 0.0,
            gyro_bias_sigma: 0.0,
            accel_bias_sigma: 0.0,
            gyro_bias: None,
            accel_bias: None,
            pixel_sigma: 0.0,
            feature_outlier_fraction: 0.0,
            gnss_sigma: [0.0; 3],
            gnss_dropouts: Vec::new(),
        }
    }

    /// Industrial-grade MEMS preset with centimeter GNSS and 1.5 px feature
    /// noise.
    pub fn mems_industrial() -> Self {
        Self {
            gyro_noise: 0.15_f64.to_radians() / 60.0,
            accel_noise: 0.05 / 60.0,
            gyro_walk: 5.0e-6,
            accel_walk: 5.0e-5,
            gyro_bias_sigma: 5.0e-4,
            accel_bias_sigma: 5.0e-3,
            gyro_bias: None,
            accel_bias: None,
            pixel_sigma: 1.5,
            feature_outlier_fraction: 0.0,
            gnss_sigma: [0.02, 0.02, 0.04],
            gnss_dropouts: Vec::new(),
        }
    }
}

/// Sensor rates, camera geometry and landmark-field layout.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SensorConfig {
    pub imu_rate: f64,
    pub frame_rate: f64,
    pub gnss_rate: f64,
    pub lever_arm: [f64; 3],
    /// Landmark count scattered along the corridor.
    pub landmark_count: usize,
    /// Depth band of generated landmarks in front of the camera, m.
    pub landmark_depth_min: f64,
    pub landmark_depth_max: f64,
    /// Detection grid cell size, px.
    pub grid_size_px: u32,
    /// Per-cell feature cap.
    pub max_per_cell: usize,
    /// Global per-frame feature cap.
    pub max_features: usize,
    /// Minimum pixel separation between features in one frame.
    pub min_separation_px: f64,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self {
            imu_rate: 200.0,
            frame_rate: 10.0,
            gnss_rate: 1.0,
            lever_arm: [0.0; 3],
            landmark_count: 900,
            landmark_depth_min: 2.0,
            landmark_depth_max: 60.0,
            grid_size_px: 200,
            max_per_cell: 25,
            max_features: 150,
            min_separation_px: 15.0,
        }
    }
}

pub fn default_camera() -> CameraModel {
    CameraModel {
        fx: 400.0,
        fy: 400.0,
        cx: 320.0,
        cy: 240.0,
        k1: -0.05,
        k2: 0.01,
        p1: 0.0,
        p2: 0.0,
        width: 640,
        height: 480,
    }
}

/// One feature-track file row.
#[derive(Debug, Clone, Copy)]
pub struct FeatureRow {
    pub t: f64,
    pub frame_id: u64,
    pub feature_id: u64,
    pub u: f64,
    pub v: f64,
}

/// A complete synthetic dataset.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub frame: WorldFrame,
    pub imu: Vec<ImuSample>,
    pub features: Vec<FeatureRow>,
    pub gnss: Vec<GnssFix>,
    /// Truth at IMU rate (bias fields carry the injected bias truth).
    pub truth: Vec<NavState>,
    /// Injected wild observations, `(frame_id, feature_id)`.
    pub injected_outliers: Vec<(u64, u64)>,
    pub camera: CameraModel,
    pub extrinsics: Extrinsics,
}

/// Kinematic truth at time `t`: position, velocity, acceleration and the
/// attitude profile with its rates.
struct KinematicSample {
    p: Vector3<f64>,
    v: Vector3<f64>,
    a: Vector3<f64>,
    q: UnitQuaternion<f64>,
    omega_body: Vector3<f64>,
}

struct SplineAxis {
    knots: Vec<f64>,
    values: Vec<f64>,
    second: Vec<f64>,
}

impl SplineAxis {
    /// Natural cubic spline through `(knots, values)`.
    fn new(knots: Vec<f64>, values: Vec<f64>) -> Self {
        let n = knots.len();
        let mut second = vec![0.0; n];
        if n > 2 {
            let mut a = vec![0.0; n];
            let mut b = vec![0.0; n];
            let mut c = vec![0.0; n];
            let mut d = vec![0.0; n];
            b[0] = 1.0;
            b[n - 1] = 1.0;
            for i in 1..n - 1 {
                let h0 = knots[i] - knots[i - 1];
                let h1 = knots[i + 1] - knots[i];
                a[i] = h0 / 6.0;
                b[i] = (h0 + h1) / 3.0;
                c[i] = h1 / 6.0;
                d[i] = (values[i + 1] - values[i]) / h1 - (values[i] - values[i - 1]) / h0;
            }
            // Thomas algorithm
            for i in 1..n {
                let m = a[i] / b[i - 1];
                b[i] -= m * c[i - 1];
                d[i] -= m * d[i - 1];
            }
            second[n - 1] = d[n - 1] / b[n - 1];
            for i in (0..n - 1).rev() {
                second[i] = (d[i] - c[i] * second[i + 1]) / b[i];
            }
        }
        Self { knots, values, second }
    }

    fn eval(&self, t: f64) -> (f64, f64, f64) {
        let n = self.knots.len();
        let i = self
            .knots
            .partition_point(|k| *k <= t)
            .clamp(1, n - 1);
        let (t0, t1) = (self.knots[i - 1], self.knots[i]);
        let h = t1 - t0;
        let s = (t - t0) / h;
        let (y0, y1) = (self.values[i - 1], self.values[i]);
        let (m0, m1) = (self.second[i - 1], self.second[i]);
        let a = 1.0 - s;
        let value = a * y0
            + s * y1
            + ((a * a * a - a) * m0 + (s * s * s - s) * m1) * h * h / 6.0;
        let vel = (y1 - y0) / h
            + ((-3.0 * a * a + 1.0) * m0 + (3.0 * s * s - 1.0) * m1) * h / 6.0;
        let acc = a * m0 + s * m1;
        (value, vel, acc)
    }
}

enum ShapeEval {
    Straight { v: f64 },
    Circle { r: f64, w: f64 },
    FigureEight { a: f64, b: f64, w: f64 },
    Spline { x: SplineAxis, y: SplineAxis, z: SplineAxis },
}

impl ShapeEval {
    fn new(spec: &TrajectorySpec) -> Self {
        match &spec.shape {
            TrajectoryShape::Straight => ShapeEval::Straight { v: spec.speed },
            TrajectoryShape::Circle { radius } => {
                ShapeEval::Circle { r: *radius, w: spec.speed / radius }
            }
            TrajectoryShape::FigureEight { half_length, half_width } => {
                let (a, b) = (*half_length, *half_width);
                // path length over one θ-period, for the average-speed scaling
                let n = 20_000;
                let mut length = 0.0;
                for i in 0..n {
                    let th = 2.0 * std::f64::consts::PI * (i as f64 + 0.5) / n as f64;
                    let dx = a * th.cos();
                    let dy = 2.0 * b * (2.0 * th).cos();
                    length += (dx * dx + dy * dy).sqrt();
                }
                length *= 2.0 * std::f64::consts::PI / n as f64;
                let w = 2.0 * std::f64::consts::PI * spec.speed / length;
                ShapeEval::FigureEight { a, b, w }
            }
            TrajectoryShape::WaypointSpline { waypoints } => {
                assert!(waypoints.len() >= 3, "spline needs at least three waypoints");
                let mut knots = vec![0.0];
                for pair in waypoints.windows(2) {
                    let d = Vector3::from(pair[1]) - Vector3::from(pair[0]);
                    knots.push(knots.last().unwrap() + d.norm() / spec.speed);
                }
                let xs: Vec<f64> = waypoints.iter().map(|w| w[0]).collect();
                let ys: Vec<f64> = waypoints.iter().map(|w| w[1]).collect();
                let zs: Vec<f64> = waypoints.iter().map(|w| w[2]).collect();
                ShapeEval::Spline {
                    x: SplineAxis::new(knots.clone(), xs),
                    y: SplineAxis::new(knots.clone(), ys),
                    z: SplineAxis::new(knots, zs),
                }
            }
        }
    }

    /// (position, velocity, acceleration) in NED.
    fn eval(&self, t: f64) -> (Vector3<f64>, Vector3<f64>, Vector3<f64>) {
        match self {
            ShapeEval::Straight { v } => (
                Vector3::new(v * t, 0.0, 0.0),
                Vector3::new(*v, 0.0, 0.0),
                Vector3::zeros(),
            ),
            ShapeEval::Circle { r, w } => {
                let th = w * t;
                (
                    Vector3::new(r * th.sin(), r * (1.0 - th.cos()), 0.0),
                    Vector3::new(r * w * th.cos(), r * w * th.sin(), 0.0),
                    Vector3::new(-r * w * w * th.sin(), r * w * w * th.cos(), 0.0),
                )
            }
            ShapeEval::FigureEight { a, b, w } => {
                let th = w * t;
                (
                    Vector3::new(a * th.sin(), b * (2.0 * th).sin(), 0.0),
                    Vector3::new(a * w * th.cos(), 2.0 * b * w * (2.0 * th).cos(), 0.0),
                    Vector3::new(
                        -a * w * w * th.sin(),
                        -4.0 * b * w * w * (2.0 * th).sin(),
                        0.0,
                    ),
                )
            }
            ShapeEval::Spline { x, y, z } => {
                let (px, vx, ax) = x.eval(t);
                let (py, vy, ay) = y.eval(t);
                let (pz, vz, az) = z.eval(t);
                (
                    Vector3::new(px, py, pz),
                    Vector3::new(vx, vy, vz),
                    Vector3::new(ax, ay, az),
                )
            }
        }
    }
}

fn kinematics(shape: &ShapeEval, spec: &TrajectorySpec, t: f64) -> KinematicSample {
    let (p, v, a) = shape.eval(t);
    // heading follows velocity
    let speed2 = v.x * v.x + v.y * v.y;
    let (yaw, yaw_rate) = if speed2 > 1e-12 {
        (v.y.atan2(v.x), (v.x * a.y - v.y * a.x) / speed2)
    } else {
        (0.0, 0.0)
    };
    let (roll, roll_rate, pitch, pitch_rate) = match spec.excitation {
        Some(e) => (
            e.roll_amplitude * (e.frequency * t * 0.77 + 1.0).sin(),
            e.roll_amplitude * e.frequency * 0.77 * (e.frequency * t * 0.77 + 1.0).cos(),
            e.pitch_amplitude * (e.frequency * t).sin(),
            e.pitch_amplitude * e.frequency * (e.frequency * t).cos(),
        ),
        None => (0.0, 0.0, 0.0, 0.0),
    };
    let q = UnitQuaternion::from_euler_angles(roll, pitch, yaw);
    // ZYX Euler rates to body rates
    let omega_body = Vector3::new(
        roll_rate - yaw_rate * pitch.sin(),
        pitch_rate * roll.cos() + yaw_rate * pitch.cos() * roll.sin(),
        -pitch_rate * roll.sin() + yaw_rate * pitch.cos() * roll.cos(),
    );
    KinematicSample { p, v, a, q, omega_body }
}

/// Truth states (bias-free) at the given rate.
pub fn truth_states(spec: &TrajectorySpec, rate: f64) -> Vec<NavState> {
    let shape = ShapeEval::new(spec);
    let n = (spec.duration * rate).round() as usize;
    (0..=n)
        .map(|i| {
            let t = i as f64 / rate;
            let k = kinematics(&shape, spec, t);
            NavState {
                t,
                p_wb: k.p,
                v_wb: k.v,
                q_wb: k.q,
                bg: Vector3::zeros(),
                ba: Vector3::zeros(),
            }
        })
        .collect()
}

fn normal(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    if sigma <= 0.0 {
        0.0
    } else {
        Normal::new(0.0, sigma).unwrap().sample(rng)
    }
}

fn normal3(rng: &mut ChaCha8Rng, sigma: f64) -> Vector3<f64> {
    Vector3::new(normal(rng, sigma), normal(rng, sigma), normal(rng, sigma))
}

/// Generate a full dataset from specs and a seed.
pub fn generate(
    spec: &TrajectorySpec,
    noise: &NoiseSpec,
    sensors: &SensorConfig,
    camera: &CameraModel,
    extrinsics: &Extrinsics,
    seed: u64,
) -> Dataset {
    let origin = spec.origin();
    let frame = WorldFrame::new(origin);
    let shape = ShapeEval::new(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // constant bias draws
    let bg0 = match noise.gyro_bias {
        Some(b) => Vector3::from(b),
        None => normal3(&mut rng, noise.gyro_bias_sigma),
    };
    let ba0 = match noise.accel_bias {
        Some(b) => Vector3::from(b),
        None => normal3(&mut rng, noise.accel_bias_sigma),
    };

    // IMU stream and truth at IMU rate
    let dt = 1.0 / sensors.imu_rate;
    let n_imu = (spec.duration * sensors.imu_rate).round() as usize;
    let mut truth = Vec::with_capacity(n_imu + 1);
    let mut imu = Vec::with_capacity(n_imu + 1);
    let mut bg = bg0;
    let mut ba = ba0;
    for i in 0..=n_imu {
        let t = i as f64 * dt;
        let k = kinematics(&shape, spec, t);
        if i > 0 {
            bg += normal3(&mut rng, noise.gyro_walk) * dt.sqrt();
            ba += normal3(&mut rng, noise.accel_walk) * dt.sqrt();
        }
        truth.push(NavState { t, p_wb: k.p, v_wb: k.v, q_wb: k.q, bg, ba });
        let r_bw = k.q.to_rotation_matrix().into_inner().transpose();
        let omega_ib = k.omega_body + r_bw * frame.earth_rate;
        let f_b = r_bw * (k.a - frame.gravity + 2.0 * frame.earth_rate.cross(&k.v));
        imu.push(ImuSample {
            t,
            angular_rate: omega_ib
                + bg
                + normal3(&mut rng, noise.gyro_noise * sensors.imu_rate.sqrt()),
            specific_force: f_b
                + ba
                + normal3(&mut rng, noise.accel_noise * sensors.imu_rate.sqrt()),
        });
    }

    // landmark field in a corridor around the trajectory
    let mut landmarks: Vec<Vector3<f64>> = Vec::with_capacity(sensors.landmark_count);
    for _ in 0..sensors.landmark_count {
        let t = rng.gen_range(0.0..spec.duration);
        let k = kinematics(&shape, spec, t);
        let yaw = k.v.y.atan2(k.v.x);
        let forward = rng.gen_range(sensors.landmark_depth_min..sensors.landmark_depth_max);
        let lateral = rng.gen_range(-30.0..30.0);
        let height = rng.gen_range(-6.0..3.0);
        let (s, c) = yaw.sin_cos();
        landmarks.push(
            k.p + Vector3::new(c * forward - s * lateral, s * forward + c * lateral, height),
        );
    }

    // feature tracks
    let mut features = Vec::new();
    let mut injected_outliers = Vec::new();
    let n_frames = (spec.duration * sensors.frame_rate).floor() as usize;
    let cells_x = (camera.width as usize).div_ceil(sensors.grid_size_px as usize);
    let cells_y = (camera.height as usize).div_ceil(sensors.grid_size_px as usize);
    let mut tracked_last: std::collections::BTreeSet<u64> = Default::default();
    for fi in 0..=n_frames {
        let t = fi as f64 / sensors.frame_rate;
        if t > spec.duration {
            break;
        }
        let k = kinematics(&shape, spec, t);
        let state = NavState {
            t,
            p_wb: k.p,
            v_wb: k.v,
            q_wb: k.q,
            bg: Vector3::zeros(),
            ba: Vector3::zeros(),
        };
        // visible landmarks: (cell, is_continued, feature_id, pixel)
        let mut visible: Vec<(usize, bool, u64, Vector2<f64>)> = Vec::new();
        for (id, lw) in landmarks.iter().enumerate() {
            let p_c = crate::visual::world_to_camera(&state, extrinsics, lw);
            if p_c.z < 1.0 {
                continue;
            }
            let Ok(px) = camera.project(&p_c) else { continue };
            if !camera.contains(&px) {
                continue;
            }
            let cell = (px.y as usize / sensors.grid_size_px as usize) * cells_x
                + (px.x as usize / sensors.grid_size_px as usize);
            visible.push((cell, tracked_last.contains(&(id as u64)), id as u64, px));
        }
        // budget: keep continuing tracks first, deterministic order
        visible.sort_by_key(|(cell, cont, id, _)| (*cell, !*cont, *id));
        let mut taken_per_cell = vec![0usize; cells_x * cells_y];
        let mut taken_px: Vec<Vector2<f64>> = Vec::new();
        let mut frame_rows: Vec<FeatureRow> = Vec::new();
        let mut now_tracked: std::collections::BTreeSet<u64> = Default::default();
        for (cell, _cont, id, px) in visible {
            if frame_rows.len() >= sensors.max_features {
                break;
            }
            if taken_per_cell[cell] >= sensors.max_per_cell {
                continue;
            }
            if taken_px
                .iter()
                .any(|q| (q - px).norm() < sensors.min_separation_px)
            {
                continue;
            }
            taken_per_cell[cell] += 1;
            taken_px.push(px);
            now_tracked.insert(id);
            let mut u = px.x + normal(&mut rng, noise.pixel_sigma);
            let mut v = px.y + normal(&mut rng, noise.pixel_sigma);
            if noise.feature_outlier_fraction > 0.0
                && rng.gen_range(0.0..1.0) < noise.feature_outlier_fraction
            {
                u = rng.gen_range(0.0..camera.width as f64);
                v = rng.gen_range(0.0..camera.height as f64);
                injected_outliers.push((fi as u64, id));
            }
            u = u.clamp(0.0, camera.width as f64 - 1e-3);
            v = v.clamp(0.0, camera.height as f64 - 1e-3);
            frame_rows.push(FeatureRow { t, frame_id: fi as u64, feature_id: id, u, v });
        }
        tracked_last = now_tracked;
        features.extend(frame_rows);
    }

    // GNSS fixes on the epoch grid
    let mut gnss = Vec::new();
    let lever = Vector3::from(sensors.lever_arm);
    let n_fix = (spec.duration * sensors.gnss_rate).floor() as usize;
    for i in 0..=n_fix {
        let t = i as f64 / sensors.gnss_rate;
        let k = kinematics(&shape, spec, t);
        let antenna = k.p + k.q * lever + normal3_axes(&mut rng, &noise.gnss_sigma);
        let valid = !noise
            .gnss_dropouts
            .iter()
            .any(|d| t >= d[0] && t <= d[1]);
        gnss.push(GnssFix {
            t,
            position: world_to_geodetic(&origin, &antenna),
            sigma: Vector3::new(
                noise.gnss_sigma[0].max(0.01),
                noise.gnss_sigma[1].max(0.01),
                noise.gnss_sigma[2].max(0.01),
            ),
            lever_arm: lever,
            valid,
        });
    }

    Dataset {
        frame,
        imu,
        features,
        gnss,
        truth,
        injected_outliers,
        camera: *camera,
        extrinsics: *extrinsics,
    }
}

fn normal3_axes(rng: &mut ChaCha8Rng, sigma: &[f64; 3]) -> Vector3<f64> {
    Vector3::new(normal(rng, sigma[0]), normal(rng, sigma[1]), normal(rng, sigma[2]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ins::mechanize_step;
    use approx::assert_relative_eq;

    fn quick_sensors() -> SensorConfig {
        SensorConfig { landmark_count: 200, ..SensorConfig::default() }
    }

    #[test]
    fn straight_line_truth() {
        let spec = TrajectorySpec {
            shape: TrajectoryShape::Straight,
            speed: 1.5,
            duration: 10.0,
            ..TrajectorySpec::default()
        };
        let truth = truth_states(&spec, 100.0);
        let last = truth.last().unwrap();
        assert_relative_eq!(last.p_wb.x, 15.0, epsilon = 1e-12);
        assert!(last.p_wb.yz().norm() < 1e-12);
    }

    #[test]
    fn circle_centripetal_acceleration() {
        let spec = TrajectorySpec {
            shape: TrajectoryShape::Circle { radius: 5.0 },
            speed: 1.5,
            duration: 10.0,
            ..TrajectorySpec::default()
        };
        let shape = ShapeEval::new(&spec);
        for i in 0..50 {
            let (_, v, a) = shape.eval(0.2 * i as f64);
            assert_relative_eq!(v.norm(), 1.5, epsilon = 1e-12);
            assert_relative_eq!(a.norm(), 1.5 * 1.5 / 5.0, epsilon = 1e-12);
            // centripetal: a ⊥ v
            assert!(v.dot(&a).abs() < 1e-12);
        }
    }

    #[test]
    fn spline_interpolates_waypoints() {
        let waypoints = vec![
            [0.0, 0.0, 0.0],
            [10.0, 2.0, -0.5],
            [20.0, -3.0, 0.5],
            [35.0, 1.0, 0.0],
        ];
        let spec = TrajectorySpec {
            shape: TrajectoryShape::WaypointSpline { waypoints: waypoints.clone() },
            speed: 1.5,
            duration: 30.0,
            ..TrajectorySpec::default()
        };
        let shape = ShapeEval::new(&spec);
        // knot times from chord lengths
        let mut t = 0.0;
        let (p0, _, _) = shape.eval(0.0);
        assert!((p0 - Vector3::from(waypoints[0])).norm() < 1e-9);
        for pair in waypoints.windows(2) {
            let d = Vector3::from(pair[1]) - Vector3::from(pair[0]);
            t += d.norm() / spec.speed;
            let (p, _, _) = shape.eval(t);
            assert!(
                (p - Vector3::from(pair[1])).norm() < 1e-9,
                "waypoint mismatch {}",
                (p - Vector3::from(pair[1])).norm()
            );
        }
    }

    #[test]
    fn stationary_truth_gives_equilibrium_measurements() {
        // zero-speed straight line = stationary platform
        let spec = TrajectorySpec {
            shape: TrajectoryShape::Straight,
            speed: 0.0,
            duration: 1.0,
            ..TrajectorySpec::default()
        };
        let ds = generate(
            &spec,
            &NoiseSpec::noise_free(),
            &quick_sensors(),
            &default_camera(),
            &Extrinsics::forward_facing(),
            7,
        );
        let frame = ds.frame;
        for s in &ds.imu {
            let q = UnitQuaternion::identity();
            let r_bw = q.to_rotation_matrix().into_inner().transpose();
            assert!((s.angular_rate - r_bw * frame.earth_rate).norm() < 1e-15);
            assert!((s.specific_force + r_bw * frame.gravity).norm() < 1e-12);
        }
    }

    #[test]
    fn mechanization_round_trip_under_tenth_millimeter() {
        let spec = TrajectorySpec {
            shape: TrajectoryShape::FigureEight { half_length: 40.0, half_width: 20.0 },
            speed: 1.5,
            duration: 10.0,
            excitation: Some(AttitudeExcitation {
                pitch_amplitude: 0.03,
                roll_amplitude: 0.02,
                frequency: 0.8,
            }),
            ..TrajectorySpec::default()
        };
        let ds = generate(
            &spec,
            &NoiseSpec::noise_free(),
            &quick_sensors(),
            &default_camera(),
            &Extrinsics::forward_facing(),
            1,
        );
        let mut state = ds.truth[0];
        for pair in ds.imu.windows(2) {
            state = mechanize_step(&state, &pair[0], &pair[1], &ds.frame).unwrap();
        }
        let err = (state.p_wb - ds.truth.last().unwrap().p_wb).norm();
        assert!(err < 1e-4, "mechanization error {} m over 10 s", err);
    }

    #[test]
    fn gyro_white_noise_level_matches_spec() {
        let spec = TrajectorySpec {
            shape: TrajectoryShape::Straight,
            speed: 0.0,
            duration: 60.0,
            ..TrajectorySpec::default()
        };
        let noise = NoiseSpec {
            gyro_noise: 4.0e-5,
            ..NoiseSpec::noise_free()
        };
        let ds = generate(
            &spec,
            &noise,
            &quick_sensors(),
            &default_camera(),
            &Extrinsics::forward_facing(),
            99,
        );
        // stationary, constant truth rate: sample std over the stream
        let n = ds.imu.len() as f64;
        let mean: Vector3<f64> = ds.imu.iter().map(|s| s.angular_rate).sum::<Vector3<f64>>() / n;
        let var: f64 =
            ds.imu.iter().map(|s| (s.angular_rate - mean).norm_squared()).sum::<f64>() / (3.0 * n);
        let density_est = var.sqrt() / 200.0f64.sqrt();
        assert!(
            (density_est - noise.gyro_noise).abs() / noise.gyro_noise < 0.1,
            "estimated density {} vs {}",
            density_est,
            noise.gyro_noise
        );
    }

    #[test]
    fn features_consistent_with_truth_and_capped() {
        let spec = TrajectorySpec { duration: 20.0, ..TrajectorySpec::default() };
        let sensors = SensorConfig { landmark_count: 3000, ..SensorConfig::default() };
        let cam = default_camera();
        let ext = Extrinsics::forward_facing();
        let ds = generate(&spec, &NoiseSpec::noise_free(), &sensors, &cam, &ext, 11);
        assert!(!ds.features.is_empty());
        let imu_rate = sensors.imu_rate;
        let mut per_frame: std::collections::BTreeMap<u64, usize> = Default::default();
        for row in &ds.features {
            *per_frame.entry(row.frame_id).or_default() += 1;
            // noise-free projections reproject exactly from the truth
            let idx = (row.t * imu_rate).round() as usize;
            let state = &ds.truth[idx];
            assert!((state.t - row.t).abs() < 1e-9);
            let unit_plane = cam.undistort(&Vector2::new(row.u, row.v)).unwrap();
            let ray = Vector3::new(unit_plane.x, unit_plane.y, 1.0);
            // tangent residual against itself is zero by construction; check
            // the projected pixel lies in the image and in front
            assert!(ray.z > 0.0);
            assert!(cam.contains(&Vector2::new(row.u, row.v)));
            let _ = state;
        }
        assert!(per_frame.values().all(|c| *c <= sensors.max_features));
        assert!(per_frame.values().any(|c| *c > 30), "expected dense tracks");
    }

    #[test]
    fn gnss_lever_arm_and_dropouts() {
        let spec = TrajectorySpec {
            shape: TrajectoryShape::Straight,
            speed: 0.0,
            duration: 10.0,
            ..TrajectorySpec::default()
        };
        let sensors = SensorConfig { lever_arm: [0.5, 0.0, 0.0], ..quick_sensors() };
        let noise = NoiseSpec {
            gnss_dropouts: vec![[3.0, 5.0]],
            ..NoiseSpec::noise_free()
        };
        let ds = generate(
            &spec,
            &noise,
            &sensors,
            &default_camera(),
            &Extrinsics::forward_facing(),
            3,
        );
        for fix in &ds.gnss {
            let w = ds.frame.to_world(&fix.position);
            // identity attitude: antenna 0.5 m north of the body
            assert!((w - Vector3::new(0.5, 0.0, 0.0)).norm() < 1e-8);
            let in_dropout = fix.t >= 3.0 && fix.t <= 5.0;
            assert_eq!(fix.valid, !in_dropout);
        }
    }

    #[test]
    fn seeded_generation_is_deterministic() {
        let spec = TrajectorySpec { duration: 5.0, ..TrajectorySpec::default() };
        let a = generate(
            &spec,
            &NoiseSpec::mems_industrial(),
            &quick_sensors(),
            &default_camera(),
            &Extrinsics::forward_facing(),
            42,
        );
        let b = generate(
            &spec,
            &NoiseSpec::mems_industrial(),
            &quick_sensors(),
            &default_camera(),
            &Extrinsics::forward_facing(),
            42,
        );
        assert_eq!(a.imu.len(), b.imu.len());
        for (x, y) in a.imu.iter().zip(&b.imu) {
            assert_eq!(x.angular_rate, y.angular_rate);
            assert_eq!(x.specific_force, y.specific_force);
        }
        for (x, y) in a.features.iter().zip(&b.features) {
            assert_eq!((x.u, x.v), (y.u, y.v));
        }
    }
}
