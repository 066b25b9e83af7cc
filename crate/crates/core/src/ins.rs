//! Strapdown INS mechanization.
//!
//! This is the clock of the whole system: it advances the newest optimized
//! state through buffered IMU samples to produce the real-time pose and the
//! prior poses the visual front-end consumes.
//!
//! The kinematic model integrated here is
//!
//! ```text
//! ṗ = v
//! v̇ = R f − g_ned... (NED: + g) − 2 [ω_ie×] v
//! q̇ = ½ q ⊗ [0, ω_ib − Rᵀ ω_ie]
//! ```
//!
//! with gravity and Earth rate taken from the [`WorldFrame`]. Integration is
//! trapezoidal in the measurements with exact quaternion increments; the
//! Earth-rotation part of the attitude update is applied as a left-side world
//! rotation so it composes exactly across steps. The Coriolis term uses the
//! step-midpoint velocity implicitly, which keeps a perfectly stationary
//! input at exact equilibrium.

use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use thiserror::Error;

use crate::geodesy::WorldFrame;
use crate::math::{quat_exp, skew};

/// One IMU sample: angular rate `ω_ib` and specific force `f` in the body
/// frame, at sensor timestamp `t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuSample {
    pub t: f64,
    pub angular_rate: Vector3<f64>,
    pub specific_force: Vector3<f64>,
}

/// Full INS state in the world frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NavState {
    pub t: f64,
    /// Position of the body in the world frame, m.
    pub p_wb: Vector3<f64>,
    /// Velocity of the body in the world frame, m/s.
    pub v_wb: Vector3<f64>,
    /// Attitude: rotates body-frame vectors into the world frame.
    pub q_wb: UnitQuaternion<f64>,
    /// Gyroscope bias, rad/s.
    pub bg: Vector3<f64>,
    /// Accelerometer bias, m/s².
    pub ba: Vector3<f64>,
}

impl NavState {
    pub fn identity(t: f64) -> Self {
        Self {
            t,
            p_wb: Vector3::zeros(),
            v_wb: Vector3::zeros(),
            q_wb: UnitQuaternion::identity(),
            bg: Vector3::zeros(),
            ba: Vector3::zeros(),
        }
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.q_wb.to_rotation_matrix().into_inner()
    }
}

#[derive(Debug, Error)]
pub enum InsError {
    #[error("non-monotonic IMU timestamps: {prev} then {cur}")]
    NonMonotonic { prev: f64, cur: f64 },
    #[error("IMU buffer does not cover [{from}, {to}] (gap {gap} s > max {max} s)")]
    Coverage { from: f64, to: f64, gap: f64, max: f64 },
}

/// Largest tolerated gap between consecutive IMU samples during propagation.
pub const DEFAULT_MAX_IMU_GAP: f64 = 0.05;

/// Advance `state` from `prev` to `cur` through one trapezoidal
/// mechanization step.
///
/// `prev.t` must equal `state.t`; biases stored in `state` are subtracted
/// from the raw measurements before integration.
pub fn mechanize_step(
    state: &NavState,
    prev: &ImuSample,
    cur: &ImuSample,
    frame: &WorldFrame,
) -> Result<NavState, InsError> {
    let dt = cur.t - prev.t;
    if dt <= 0.0 || prev.t < state.t - 1e-9 {
        return Err(InsError::NonMonotonic { prev: prev.t, cur: cur.t });
    }

    let omega_ie = frame.earth_rate;
    let g = frame.gravity;

    // attitude: left world-rotation increment, right body increment
    let phi = attitude_increment(
        &(prev.angular_rate - state.bg),
        &(cur.angular_rate - state.bg),
        dt,
    );
    let zeta = omega_ie * dt;
    let q_new = quat_exp(&-zeta) * state.q_wb * quat_exp(&phi);
    let q_new = UnitQuaternion::new_normalize(q_new.into_inner());

    // velocity: body-frame specific-force integral carried into the world
    // frame through the step-midpoint Earth rotation, implicit midpoint
    // Coriolis
    let r_old = state.rotation();
    let r_new = q_new.to_rotation_matrix().into_inner();
    let dv_b = body_velocity_increment(
        &phi,
        &(cur.angular_rate - prev.angular_rate),
        &(prev.specific_force - state.ba),
        &(cur.specific_force - state.ba),
        dt,
    );
    let dv_w = quat_exp(&(-zeta * 0.5)) * (r_old * dv_b);
    let omega_x = skew(&omega_ie);
    let rhs = state.v_wb + dv_w + g * dt - omega_x * state.v_wb * dt;
    let lhs = Matrix3::identity() + omega_x * dt;
    let v_new = lhs.try_inverse().expect("I + [w x] dt is invertible") * rhs;

    // trapezoid with endpoint-acceleration (Simpson) correction
    let a_old =
        r_old * (prev.specific_force - state.ba) + g - 2.0 * omega_ie.cross(&state.v_wb);
    let a_new = r_new * (cur.specific_force - state.ba) + g - 2.0 * omega_ie.cross(&v_new);
    let p_new =
        state.p_wb + 0.5 * (state.v_wb + v_new) * dt - (a_new - a_old) * (dt * dt / 12.0);

    Ok(NavState { t: cur.t, p_wb: p_new, v_wb: v_new, q_wb: q_new, bg: state.bg, ba: state.ba })
}

/// Body rotation vector over one step for linearly interpolated rates:
/// trapezoidal angle increment plus the second-order coning term.
///
/// Shared by the mechanization and the preintegration so that the two
/// integrate measurements identically.
pub(crate) fn attitude_increment(
    omega_prev: &Vector3<f64>,
    omega_cur: &Vector3<f64>,
    dt: f64,
) -> Vector3<f64> {
    0.5 * (omega_prev + omega_cur) * dt + omega_prev.cross(omega_cur) * (dt * dt / 12.0)
}

/// Specific-force integral over one step, expressed in the body frame at the
/// step start: `∫ R(τ) f(τ) dτ` for linearly interpolated rate and force,
/// expanded to second order (rotation and sculling compensation).
///
/// `theta` is the total rotation vector across the step and `omega_delta`
/// the rate change `ω_end − ω_start`. Shared by the mechanization and the
/// preintegration so that the two integrate measurements identically.
pub(crate) fn body_velocity_increment(
    theta: &Vector3<f64>,
    omega_delta: &Vector3<f64>,
    f_start: &Vector3<f64>,
    f_end: &Vector3<f64>,
    dt: f64,
) -> Vector3<f64> {
    let f_mean = 0.5 * (f_start + f_end);
    let u = f_mean * dt;
    let tx = skew(theta);
    u + 0.5 * tx * u
        + tx * (tx * u) / 6.0
        + (theta.cross(&(f_end - f_start)) - (omega_delta * dt).cross(&f_mean)) * (dt / 12.0)
}

fn interpolate(a: &ImuSample, b: &ImuSample, t: f64) -> ImuSample {
    let w = (t - a.t) / (b.t - a.t);
    ImuSample {
        t,
        angular_rate: a.angular_rate.lerp(&b.angular_rate, w),
        specific_force: a.specific_force.lerp(&b.specific_force, w),
    }
}

/// Propagate `state` to time `t` through an ordered IMU buffer that covers
/// `[state.t, t]`, interpolating the bracketing samples at both ends.
pub fn propagate_to(
    state: &NavState,
    buffer: &[ImuSample],
    t: f64,
    frame: &WorldFrame,
    max_gap: f64,
) -> Result<NavState, InsError> {
    if t <= state.t + 1e-12 {
        return Ok(*state);
    }
    let coverage_err = |gap: f64| InsError::Coverage { from: state.t, to: t, gap, max: max_gap };

    // first sample strictly after state.t
    let start = buffer.partition_point(|s| s.t <= state.t + 1e-12);
    if start == 0 || start >= buffer.len() {
        return Err(coverage_err(f64::INFINITY));
    }
    let mut cur_state = *state;
    let mut prev = if (buffer[start - 1].t - state.t).abs() < 1e-12 {
        buffer[start - 1]
    } else {
        interpolate(&buffer[start - 1], &buffer[start], state.t)
    };

    for sample in &buffer[start..] {
        if sample.t - prev.t > max_gap {
            return Err(coverage_err(sample.t - prev.t));
        }
        if sample.t >= t - 1e-12 {
            let end =
                if (sample.t - t).abs() < 1e-12 { *sample } else { interpolate(&prev, sample, t) };
            if end.t > prev.t + 1e-12 {
                cur_state = mechanize_step(&cur_state, &prev, &end, frame)?;
            }
            return Ok(cur_state);
        }
        cur_state = mechanize_step(&cur_state, &prev, sample, frame)?;
        prev = *sample;
    }
    Err(coverage_err(t - prev.t))
}

/// Real-time propagator: owns an IMU buffer and the newest anchor state, and
/// serves pose queries at arbitrary times past the anchor.
///
/// The estimator feeds optimized states back through [`Mechanizer::reanchor`];
/// queries after that keep integrating from the new anchor so the published
/// pose stream continues in order without rewriting history.
#[derive(Debug, Clone)]
pub struct Mechanizer {
    frame: WorldFrame,
    anchor: NavState,
    buffer: Vec<ImuSample>,
    max_gap: f64,
}

impl Mechanizer {
    pub fn new(frame: WorldFrame, anchor: NavState, max_gap: f64) -> Self {
        Self { frame, anchor, buffer: Vec::new(), max_gap }
    }

    pub fn frame(&self) -> &WorldFrame {
        &self.frame
    }

    pub fn anchor(&self) -> &NavState {
        &self.anchor
    }

    pub fn push_imu(&mut self, sample: ImuSample) -> Result<(), InsError> {
        if let Some(last) = self.buffer.last() {
            if sample.t <= last.t {
                return Err(InsError::NonMonotonic { prev: last.t, cur: sample.t });
            }
        }
        self.buffer.push(sample);
        Ok(())
    }

    /// Pose at time `t >= anchor.t`, integrated from the anchor.
    pub fn pose_at(&self, t: f64) -> Result<NavState, InsError> {
        propagate_to(&self.anchor, &self.buffer, t, &self.frame, self.max_gap)
    }

    /// Replace the anchor with an optimized state and drop samples that can
    /// no longer be needed (everything ending before the new anchor).
    pub fn reanchor(&mut self, state: NavState) {
        self.anchor = state;
        let keep_from = self.buffer.partition_point(|s| s.t <= state.t) .saturating_sub(1);
        if keep_from > 0 {
            self.buffer.drain(..keep_from);
        }
    }

    pub fn buffered_samples(&self) -> &[ImuSample] {
        &self.buffer
    }

    /// Samples with `a < t <= b`, plus interpolated boundary samples, ready
    /// for preintegration over `[a, b]`.
    pub fn samples_between(&self, a: f64, b: f64) -> Option<Vec<ImuSample>> {
        samples_between(&self.buffer, a, b)
    }
}

/// Extract samples covering `[a, b]` from an ordered stream, interpolating
/// exact boundary samples at `a` and `b`. Returns `None` if the stream does
/// not bracket both endpoints.
pub fn samples_between(buffer: &[ImuSample], a: f64, b: f64) -> Option<Vec<ImuSample>> {
    if b <= a || buffer.len() < 2 || buffer[0].t > a + 1e-9 || buffer.last()?.t < b - 1e-9 {
        return None;
    }
    let mut out = Vec::new();
    let start = buffer.partition_point(|s| s.t <= a + 1e-12);
    if start == 0 {
        return None;
    }
    if (buffer[start - 1].t - a).abs() < 1e-12 {
        out.push(buffer[start - 1]);
    } else if start < buffer.len() {
        out.push(interpolate(&buffer[start - 1], &buffer[start], a));
    } else {
        return None;
    }
    for sample in &buffer[start..] {
        if sample.t >= b - 1e-12 {
            if (sample.t - b).abs() < 1e-12 {
                out.push(*sample);
            } else {
                let prev = *out.last().unwrap();
                out.push(interpolate(&prev, sample, b));
            }
            return Some(out);
        }
        out.push(*sample);
    }
    None
}
