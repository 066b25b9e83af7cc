//! GNSS/INS initialization: zero-velocity detection, accelerometer leveling,
//! heading from GNSS velocity, and a small GNSS+preintegration optimization
//! over the initialization span that seeds the main window.

use nalgebra::{DMatrix, DVector, UnitQuaternion, Vector3};

use crate::geodesy::WorldFrame;
use crate::ins::{mechanize_step, ImuSample, NavState};
use crate::preintegration::integrate;
use crate::visual::{CameraModel, Extrinsics};

use super::marginalization::MarginalizationPrior;
use super::{optimize, EstimatorConfig, EstimatorError, GnssFix, NodeKind, SlidingWindow};

#[derive(Debug, Clone)]
pub struct InitializerConfig {
    /// Data span required before attempting initialization, seconds.
    pub init_duration: f64,
    /// Horizontal speed above which GNSS velocity fixes the heading, m/s.
    pub min_init_speed: f64,
    /// Heading to use when the platform never moves (radians, NED yaw).
    pub initial_heading: Option<f64>,
    /// Zero-velocity detector window, seconds.
    pub zero_velocity_window: f64,
    /// Gyro standard-deviation threshold for the detector, rad/s.
    pub gyro_std_threshold: f64,
    /// Accelerometer standard-deviation threshold, m/s².
    pub accel_std_threshold: f64,
}

impl Default for InitializerConfig {
    fn default() -> Self {
        Self {
            init_duration: 5.0,
            min_init_speed: 0.5,
            initial_heading: None,
            zero_velocity_window: 0.5,
            gyro_std_threshold: 2.0e-3,
            accel_std_threshold: 5.0e-2,
        }
    }
}

/// Windowed variance test: true when both gyro and accelerometer standard
/// deviations stay below their thresholds.
pub fn is_stationary(samples: &[ImuSample], gyro_std_thr: f64, accel_std_thr: f64) -> bool {
    if samples.len() < 4 {
        return false;
    }
    let n = samples.len() as f64;
    let gyro_mean: Vector3<f64> = samples.iter().map(|s| s.angular_rate).sum::<Vector3<f64>>() / n;
    let acc_mean: Vector3<f64> =
        samples.iter().map(|s| s.specific_force).sum::<Vector3<f64>>() / n;
    let gyro_var: f64 = samples
        .iter()
        .map(|s| (s.angular_rate - gyro_mean).norm_squared())
        .sum::<f64>()
        / n;
    let acc_var: f64 = samples
        .iter()
        .map(|s| (s.specific_force - acc_mean).norm_squared())
        .sum::<f64>()
        / n;
    gyro_var.sqrt() < gyro_std_thr * 3.0f64.sqrt()
        && acc_var.sqrt() < accel_std_thr * 3.0f64.sqrt()
}

/// Roll and pitch from the mean specific force of a quasi-static span
/// (`f ≈ −Rᵀ g` in NED).
pub fn level_from_accel(mean_force: &Vector3<f64>) -> (f64, f64) {
    let g_b = -mean_force;
    let roll = g_b.y.atan2(g_b.z);
    let pitch = (-g_b.x).atan2((g_b.y * g_b.y + g_b.z * g_b.z).sqrt());
    (roll, pitch)
}

#[derive(Debug)]
pub enum InitializationStatus {
    /// Not enough data yet; keep feeding.
    NeedMoreData,
    /// Data span sufficient but the problem is unobservable (no motion and
    /// no configured heading).
    Pending(String),
    /// Initialization complete.
    Ready(Box<InitOutput>),
}

#[derive(Debug)]
pub struct InitOutput {
    pub frame: WorldFrame,
    pub window: SlidingWindow,
    pub imu: Vec<ImuSample>,
}

/// Buffers raw measurements until the initialization span is covered, then
/// solves the GNSS+preintegration problem.
#[derive(Debug)]
pub struct Initializer {
    cfg: InitializerConfig,
    est_cfg: EstimatorConfig,
    imu: Vec<ImuSample>,
    fixes: Vec<GnssFix>,
}

impl Initializer {
    pub fn new(cfg: InitializerConfig, est_cfg: EstimatorConfig) -> Self {
        Self { cfg, est_cfg, imu: Vec::new(), fixes: Vec::new() }
    }

    pub fn push_imu(&mut self, sample: ImuSample) {
        self.imu.push(sample);
    }

    pub fn push_gnss(&mut self, fix: GnssFix) {
        self.fixes.push(fix);
    }

    pub fn buffered_imu(&self) -> &[ImuSample] {
        &self.imu
    }

    /// Yaw change over `[t0, t1]` integrated from the gyro stream at the
    /// leveled attitude (ZYX Euler kinematics, heading-free).
    fn integrated_yaw_change(&self, t0: f64, t1: f64, roll: f64, pitch: f64) -> f64 {
        let (sr, cr) = roll.sin_cos();
        let ct = pitch.cos().max(1e-6);
        let mut dyaw = 0.0;
        for pair in self.imu.windows(2) {
            let (a, b) = (&pair[0], &pair[1]);
            if b.t <= t0 || a.t >= t1 {
                continue;
            }
            let dt = b.t.min(t1) - a.t.max(t0);
            let w = 0.5 * (a.angular_rate + b.angular_rate);
            dyaw += (w.y * sr + w.z * cr) / ct * dt;
        }
        dyaw
    }

    /// Attempt initialization with the buffered data.
    pub fn try_initialize(
        &mut self,
        extrinsics: Extrinsics,
        camera: CameraModel,
    ) -> Result<InitializationStatus, EstimatorError> {
        let Some(first_fix) = self.fixes.iter().find(|f| f.valid).copied() else {
            return Ok(InitializationStatus::NeedMoreData);
        };
        let span_end = first_fix.t + self.cfg.init_duration;
        let have_fix_span = self.fixes.iter().any(|f| f.valid && f.t >= span_end - 1e-9);
        let have_imu_span = self
            .imu
            .last()
            .map(|s| s.t >= span_end - 1e-9)
            .unwrap_or(false)
            && self.imu.first().map(|s| s.t <= first_fix.t + 1e-9).unwrap_or(false);
        if !have_fix_span || !have_imu_span {
            return Ok(InitializationStatus::NeedMoreData);
        }

        // the first valid fix anchors the world frame
        let frame = WorldFrame::new(first_fix.position);

        // stationary prefix: leveling and gyro bias
        let window_len = self.cfg.zero_velocity_window;
        let first_window: Vec<ImuSample> = self
            .imu
            .iter()
            .filter(|s| s.t <= self.imu[0].t + window_len)
            .copied()
            .collect();
        let start_stationary = is_stationary(
            &first_window,
            self.cfg.gyro_std_threshold,
            self.cfg.accel_std_threshold,
        );

        let level_span: Vec<&ImuSample> = if start_stationary {
            self.imu.iter().take_while(|s| s.t <= self.imu[0].t + window_len).collect()
        } else {
            // short prefix; leveling error stays at the accel/g scale and the
            // optimization refines it
            self.imu.iter().take_while(|s| s.t <= self.imu[0].t + 0.2).collect()
        };
        let mean_force = level_span.iter().map(|s| s.specific_force).sum::<Vector3<f64>>()
            / level_span.len() as f64;
        let (roll, pitch) = level_from_accel(&mean_force);

        // heading from GNSS velocity once the platform moves fast enough;
        // the displacement direction equals the mid-interval heading on a
        // turn, so the gyro-integrated yaw change maps it back to the start
        let mut heading = None;
        let mut v0 = Vector3::zeros();
        let valid_fixes: Vec<&GnssFix> =
            self.fixes.iter().filter(|f| f.valid && f.t <= span_end + 1e-9).collect();
        for pair in valid_fixes.windows(2) {
            let p0 = frame.to_world(&pair[0].position);
            let p1 = frame.to_world(&pair[1].position);
            let dt = pair[1].t - pair[0].t;
            if dt <= 0.0 {
                continue;
            }
            let v = (p1 - p0) / dt;
            if v.xy().norm() > self.cfg.min_init_speed {
                let dyaw = self.integrated_yaw_change(pair[0].t, pair[1].t, roll, pitch);
                let mid_heading = v.y.atan2(v.x);
                let start_heading = mid_heading - 0.5 * dyaw;
                heading = Some(start_heading);
                if pair[0].t <= first_fix.t + 1e-9 {
                    let half_turn = UnitQuaternion::from_euler_angles(0.0, 0.0, -0.5 * dyaw);
                    v0 = half_turn * v;
                }
                break;
            }
        }
        // heading quality: GNSS displacement direction degrades with the
        // position noise over the baseline travelled in one epoch
        let heading_sigma = match (&heading, valid_fixes.first()) {
            (Some(_), Some(f)) => {
                ((2.0 * f.sigma.xy().norm()) / self.cfg.min_init_speed.max(0.1)).clamp(0.01, 0.3)
            }
            _ => 0.02,
        };
        let yaw = match heading.or(self.cfg.initial_heading) {
            Some(y) => y,
            None => {
                return Ok(InitializationStatus::Pending(
                    "platform never exceeded the minimum initialization speed and no initial \
                     heading is configured"
                        .to_string(),
                ))
            }
        };

        let q0 = UnitQuaternion::from_euler_angles(roll, pitch, yaw);

        // gyro bias from the stationary prefix with the Earth rate removed
        let bg = if start_stationary {
            let mean_gyro = level_span.iter().map(|s| s.angular_rate).sum::<Vector3<f64>>()
                / level_span.len() as f64;
            mean_gyro - q0.inverse() * frame.earth_rate
        } else {
            Vector3::zeros()
        };

        // seed state at the first fix epoch
        let p0 = frame.to_world(&first_fix.position) - q0 * first_fix.lever_arm;
        let state0 = NavState { t: first_fix.t, p_wb: p0, v_wb: v0, q_wb: q0, bg, ba: Vector3::zeros() };

        // one node per GNSS epoch over the span (invalid fixes included)
        let epochs: Vec<&GnssFix> = self
            .fixes
            .iter()
            .filter(|f| f.t >= first_fix.t - 1e-9 && f.t <= span_end + 1e-9)
            .collect();
        let mut window = SlidingWindow::new(extrinsics, camera);
        let mut state = state0;
        for (i, fix) in epochs.iter().enumerate() {
            if i == 0 {
                window.push_node(fix.t, NodeKind::GnssEpoch, None, Some(**fix), state, None)?;
                continue;
            }
            let samples = crate::ins::samples_between(&self.imu, epochs[i - 1].t, fix.t)
                .ok_or_else(|| {
                    EstimatorError::ImuCoverage(format!(
                        "initialization interval [{}, {}]",
                        epochs[i - 1].t,
                        fix.t
                    ))
                })?;
            for pair in samples.windows(2) {
                state = mechanize_step(&state, &pair[0], &pair[1], &frame)?;
            }
            let pre = integrate(&samples, bg, Vector3::zeros(), &self.est_cfg.imu_noise)?;
            window.push_node(fix.t, NodeKind::GnssEpoch, None, Some(**fix), state, Some(pre))?;
        }

        // weak prior on the first node keeps roll/pitch/yaw/biases observable
        // in the degenerate (static) cases
        let sigmas: [f64; 15] = [
            10.0, 10.0, 10.0, // position (GNSS anchors it anyway)
            0.05, 0.05, heading_sigma, // attitude
            1.0, 1.0, 1.0, // velocity
            0.005, 0.005, 0.005, // gyro bias
            0.1, 0.1, 0.1, // accel bias
        ];
        let mut jac = DMatrix::zeros(15, 15);
        for (i, s) in sigmas.iter().enumerate() {
            jac[(i, i)] = 1.0 / s;
        }
        window.prior = Some(MarginalizationPrior {
            keys: vec![window.nodes[0].id],
            lin_states: vec![window.nodes[0].state],
            jacobian: jac,
            residual0: DVector::zeros(15),
            regularized: false,
        });

        let (diag, _) = optimize(&mut window, &frame, &self.est_cfg);
        if diag.diverged {
            return Err(EstimatorError::Divergence(
                "initialization optimization diverged".to_string(),
            ));
        }

        let imu = std::mem::take(&mut self.imu);
        Ok(InitializationStatus::Ready(Box::new(InitOutput { frame, window, imu })))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leveling_recovers_roll_pitch() {
        let g = 9.8;
        for (roll, pitch) in [(0.0, 0.0), (0.05, -0.1), (-0.3, 0.2)] {
            let q = UnitQuaternion::from_euler_angles(roll, pitch, 1.3);
            let f = -(q.inverse() * Vector3::new(0.0, 0.0, g));
            let (r, p) = level_from_accel(&f);
            assert!((r - roll).abs() < 1e-12, "roll {} vs {}", r, roll);
            assert!((p - pitch).abs() < 1e-12);
        }
    }

    #[test]
    fn stationary_detector_on_clean_and_moving_streams() {
        let still: Vec<ImuSample> = (0..100)
            .map(|i| ImuSample {
                t: i as f64 * 0.005,
                angular_rate: Vector3::new(1e-4, -2e-4, 0.5e-4),
                specific_force: Vector3::new(0.01, -0.02, -9.8),
            })
            .collect();
        assert!(is_stationary(&still, 2e-3, 5e-2));

        let moving: Vec<ImuSample> = (0..100)
            .map(|i| {
                let t = i as f64 * 0.005;
                ImuSample {
                    t,
                    angular_rate: Vector3::new(0.2 * (3.0 * t).sin(), 0.0, 0.1),
                    specific_force: Vector3::new(0.5 * (2.0 * t).cos(), 0.0, -9.8),
                }
            })
            .collect();
        assert!(!is_stationary(&moving, 2e-3, 5e-2));
    }
}
