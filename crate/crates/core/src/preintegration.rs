//! Earth-rotation-corrected IMU preintegration between consecutive time
//! nodes: accumulation, bias Jacobians, covariance propagation and the
//! 15-dimensional residual used by the sliding-window optimizer.
//!
//! Measurements are accumulated in the body frame of the interval start with
//! the linearization-point biases removed. The Earth rotation is not folded
//! into the accumulated deltas; instead the residual compensates it through
//! an Earth-rotation quaternion on the attitude block and through position
//! and velocity correction terms built from time-weighted accumulators. The
//! derivation of those terms, and how they stay step-for-step consistent
//! with the mechanization in [`crate::ins`], is documented in
//! `docs/preintegration.md`.
//!
//! Error-state order is fixed everywhere as `(δp, δθ, δv, δbg, δba)`.

use nalgebra::{Matrix3, SMatrix, UnitQuaternion, Vector3};
use thiserror::Error;

use crate::geodesy::WorldFrame;
use crate::ins::{attitude_increment, body_velocity_increment, ImuSample, NavState};
use crate::math::{quat_exp, quat_left, quat_right, so3_right_jacobian, skew};

/// IMU stochastic model used for covariance propagation.
///
/// White-noise densities are per √Hz; bias random walks are the growth rate
/// of the bias standard deviation per √s.
#[derive(Debug, Clone, Copy)]
pub struct ImuNoise {
    /// Gyro white noise, rad/s/√Hz.
    pub gyro_noise: f64,
    /// Accelerometer white noise, m/s²/√Hz.
    pub accel_noise: f64,
    /// Gyro bias random walk, rad/s/√s.
    pub gyro_walk: f64,
    /// Accelerometer bias random walk, m/s²/√s.
    pub accel_walk: f64,
}

impl ImuNoise {
    /// Industrial-grade MEMS preset: 0.15 °/√h angle random walk,
    /// 0.05 m/s/√h velocity random walk.
    pub fn mems_industrial() -> Self {
        Self {
            gyro_noise: 0.15_f64.to_radians() / 60.0,
            accel_noise: 0.05 / 60.0,
            gyro_walk: 5.0e-6,
            accel_walk: 5.0e-5,
        }
    }
}

impl Default for ImuNoise {
    fn default() -> Self {
        Self::mems_industrial()
    }
}

#[derive(Debug, Error)]
pub enum PreintegrationError {
    #[error("preintegration needs at least two samples")]
    EmptyInterval,
    #[error("non-monotonic sample timestamps: {prev} then {cur}")]
    NonMonotonic { prev: f64, cur: f64 },
    #[error("bias change ({dbg:.2e} rad/s, {dba:.2e} m/s²) beyond first-order correction range")]
    ReintegrationRequired { dbg: f64, dba: f64 },
    #[error("state interval {actual} s does not match preintegration span {expected} s")]
    SpanMismatch { expected: f64, actual: f64 },
}

/// Bias change thresholds beyond which first-order correction is refused and
/// the caller must re-integrate at a new linearization point.
pub const BIAS_GYRO_REINTEGRATE_THRESHOLD: f64 = 1.0e-3;
pub const BIAS_ACCEL_REINTEGRATE_THRESHOLD: f64 = 1.0e-2;

/// Accumulated IMU preintegration over one node interval.
///
/// Immutable after [`integrate`]; residual and Jacobian evaluation are pure.
#[derive(Debug, Clone)]
pub struct PreintegratedImu {
    /// Interval length, s.
    pub dt_total: f64,
    /// Position delta in the start body frame, m.
    pub dp: Vector3<f64>,
    /// Velocity delta in the start body frame, m/s.
    pub dv: Vector3<f64>,
    /// Attitude delta (start body frame to end body frame).
    pub dq: UnitQuaternion<f64>,
    /// Linearization-point biases.
    pub lin_bg: Vector3<f64>,
    pub lin_ba: Vector3<f64>,
    /// Bias Jacobian blocks of the deltas.
    pub dp_dbg: Matrix3<f64>,
    pub dp_dba: Matrix3<f64>,
    pub dv_dbg: Matrix3<f64>,
    pub dv_dba: Matrix3<f64>,
    /// Rotation-vector Jacobian of `dq` w.r.t. the gyro bias (right side).
    pub dq_dbg: Matrix3<f64>,
    /// 15×15 covariance, order (δp, δθ, δv, δbg, δba).
    pub cov: SMatrix<f64, 15, 15>,
    /// Retained samples so the interval can be re-integrated or split.
    pub samples: Vec<ImuSample>,
    noise: ImuNoise,
    /// Time-weighted force integrals for the Earth-rotation corrections.
    c1v: Vector3<f64>,
    c2v: Vector3<f64>,
    c1p: Vector3<f64>,
    c2p: Vector3<f64>,
    /// Time-weighted velocity integral ∫ τ dΔv̂.
    w_tv: Vector3<f64>,
    /// Time moments ∫ τ dτ and ∫ τ² dτ over the interval.
    s1: f64,
    s2: f64,
}

/// Accumulate a sample stream into a preintegrated measurement, removing the
/// given linearization biases.
pub fn integrate(
    samples: &[ImuSample],
    lin_bg: Vector3<f64>,
    lin_ba: Vector3<f64>,
    noise: &ImuNoise,
) -> Result<PreintegratedImu, PreintegrationError> {
    if samples.len() < 2 {
        return Err(PreintegrationError::EmptyInterval);
    }
    let t0 = samples[0].t;
    let mut pre = PreintegratedImu {
        dt_total: 0.0,
        dp: Vector3::zeros(),
        dv: Vector3::zeros(),
        dq: UnitQuaternion::identity(),
        lin_bg,
        lin_ba,
        dp_dbg: Matrix3::zeros(),
        dp_dba: Matrix3::zeros(),
        dv_dbg: Matrix3::zeros(),
        dv_dba: Matrix3::zeros(),
        dq_dbg: Matrix3::zeros(),
        cov: SMatrix::zeros(),
        samples: samples.to_vec(),
        noise: *noise,
        c1v: Vector3::zeros(),
        c2v: Vector3::zeros(),
        c1p: Vector3::zeros(),
        c2p: Vector3::zeros(),
        w_tv: Vector3::zeros(),
        s1: 0.0,
        s2: 0.0,
    };

    for pair in samples.windows(2) {
        let (prev, cur) = (&pair[0], &pair[1]);
        let dt = cur.t - prev.t;
        if dt <= 0.0 {
            return Err(PreintegrationError::NonMonotonic { prev: prev.t, cur: cur.t });
        }
        let tau_mid = (prev.t - t0) + 0.5 * dt;

        let f_start = prev.specific_force - lin_ba;
        let f_end = cur.specific_force - lin_ba;
        let f_mid = 0.5 * (f_start + f_end);
        let phi = attitude_increment(
            &(prev.angular_rate - lin_bg),
            &(cur.angular_rate - lin_bg),
            dt,
        );

        let r_old = pre.dq.to_rotation_matrix().into_inner();
        let dq_new = UnitQuaternion::new_normalize((pre.dq * quat_exp(&phi)).into_inner());
        let r_new = dq_new.to_rotation_matrix().into_inner();

        // force integral over the step, rotated to the interval start frame
        let dv_b = body_velocity_increment(
            &phi,
            &(cur.angular_rate - prev.angular_rate),
            &f_start,
            &f_end,
            dt,
        );
        let u_w = r_old * dv_b;

        let dv_old = pre.dv;
        let dv_new = dv_old + u_w;
        let c1v_new = pre.c1v + tau_mid * u_w;
        let c2v_new = pre.c2v + tau_mid * tau_mid * u_w;

        // trapezoid with endpoint-acceleration correction, matching the
        // mechanization position update
        let simpson = (r_new * f_end - r_old * f_start) * (dt * dt / 12.0);
        pre.dp += 0.5 * (dv_old + dv_new) * dt - simpson;
        pre.c1p += 0.5 * (pre.c1v + c1v_new) * dt;
        pre.c2p += 0.5 * (pre.c2v + c2v_new) * dt;
        pre.w_tv += tau_mid * 0.5 * (dv_old + dv_new) * dt;
        pre.s1 += tau_mid * dt;
        pre.s2 += tau_mid * tau_mid * dt;

        // bias Jacobians, exact first-order derivatives of this recursion
        let jr_dt = so3_right_jacobian(&phi) * dt;
        let r_step_t = quat_exp(&phi).to_rotation_matrix().into_inner().transpose();
        let dq_dbg_old = pre.dq_dbg;
        let dq_dbg_new = r_step_t * dq_dbg_old - jr_dt;
        let u_raw = f_mid * dt;
        let dv_dbg_new =
            pre.dv_dbg - r_old * skew(&dv_b) * dq_dbg_old + r_old * skew(&u_raw) * (0.5 * dt);
        let dv_dba_new = pre.dv_dba - r_old * (Matrix3::identity() + 0.5 * skew(&phi)) * dt;
        pre.dp_dbg += 0.5 * (pre.dv_dbg + dv_dbg_new) * dt;
        pre.dp_dba += 0.5 * (pre.dv_dba + dv_dba_new) * dt;
        pre.dv_dbg = dv_dbg_new;
        pre.dv_dba = dv_dba_new;
        pre.dq_dbg = dq_dbg_new;

        // covariance: first-order discrete error-state transition
        let mut a = SMatrix::<f64, 15, 15>::identity();
        let rfx = r_old * skew(&f_mid);
        a.fixed_view_mut::<3, 3>(0, 6).copy_from(&(Matrix3::identity() * dt));
        a.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-0.5 * rfx * dt * dt));
        a.fixed_view_mut::<3, 3>(0, 12).copy_from(&(-0.5 * r_old * dt * dt));
        a.fixed_view_mut::<3, 3>(3, 3).copy_from(&r_step_t);
        a.fixed_view_mut::<3, 3>(3, 9).copy_from(&(-jr_dt));
        a.fixed_view_mut::<3, 3>(6, 3).copy_from(&(-rfx * dt));
        a.fixed_view_mut::<3, 3>(6, 12).copy_from(&(-r_old * dt));
        pre.cov = a * pre.cov * a.transpose();

        let sg2 = noise.gyro_noise * noise.gyro_noise * dt;
        let sa2 = noise.accel_noise * noise.accel_noise * dt;
        for i in 0..3 {
            pre.cov[(i, i)] += 0.25 * sa2 * dt * dt;
            pre.cov[(i, i + 6)] += 0.5 * sa2 * dt;
            pre.cov[(i + 6, i)] += 0.5 * sa2 * dt;
            pre.cov[(i + 3, i + 3)] += sg2;
            pre.cov[(i + 6, i + 6)] += sa2;
            pre.cov[(i + 9, i + 9)] += noise.gyro_walk * noise.gyro_walk * dt;
            pre.cov[(i + 12, i + 12)] += noise.accel_walk * noise.accel_walk * dt;
        }
        pre.cov = 0.5 * (pre.cov + pre.cov.transpose());

        pre.dq = dq_new;
        pre.dv = dv_new;
        pre.c1v = c1v_new;
        pre.c2v = c2v_new;
        pre.dt_total += dt;
    }
    Ok(pre)
}

/// First-order bias-corrected deltas.
pub fn correct_bias(
    pre: &PreintegratedImu,
    bg: &Vector3<f64>,
    ba: &Vector3<f64>,
) -> Result<(Vector3<f64>, Vector3<f64>, UnitQuaternion<f64>), PreintegrationError> {
    let dbg = bg - pre.lin_bg;
    let dba = ba - pre.lin_ba;
    if dbg.norm() > BIAS_GYRO_REINTEGRATE_THRESHOLD || dba.norm() > BIAS_ACCEL_REINTEGRATE_THRESHOLD
    {
        return Err(PreintegrationError::ReintegrationRequired {
            dbg: dbg.norm(),
            dba: dba.norm(),
        });
    }
    let dp = pre.dp + pre.dp_dbg * dbg + pre.dp_dba * dba;
    let dv = pre.dv + pre.dv_dbg * dbg + pre.dv_dba * dba;
    let dq = UnitQuaternion::new_normalize((pre.dq * quat_exp(&(pre.dq_dbg * dbg))).into_inner());
    Ok((dp, dv, dq))
}

impl PreintegratedImu {
    /// Earth-rotation correction term for the velocity block.
    fn velocity_correction(
        &self,
        r0: &Matrix3<f64>,
        dp_w: &Vector3<f64>,
        omega: &Vector3<f64>,
    ) -> Vector3<f64> {
        let wx = skew(omega);
        2.0 * wx * dp_w + wx * (r0 * self.c1v) - 0.5 * wx * (wx * (r0 * self.c2v))
    }

    /// Earth-rotation correction term for the position block, plus the
    /// non-uniform-sampling remainder of the gravity double integral.
    fn position_correction(
        &self,
        r0: &Matrix3<f64>,
        v0: &Vector3<f64>,
        g: &Vector3<f64>,
        omega: &Vector3<f64>,
    ) -> Vector3<f64> {
        let dt = self.dt_total;
        let wx = skew(omega);
        let quad = 2.0 * v0 * (dt * dt - self.s1)
            + 2.0 * (r0 * (dt * self.dp - self.w_tv))
            + 2.0 * g * (dt * self.s1 - self.s2)
            + r0 * self.c1p;
        g * (self.s1 - 0.5 * dt * dt) + wx * quad - 0.5 * wx * (wx * (r0 * self.c2p))
    }

    /// The five blocks of the preintegration residual, order
    /// `(δp, δθ, δv, δbg, δba)`.
    pub fn residual(
        &self,
        sk_1: &NavState,
        sk: &NavState,
        frame: &WorldFrame,
    ) -> Result<SMatrix<f64, 15, 1>, PreintegrationError> {
        self.residual_opts(sk_1, sk, frame, true)
    }

    /// Residual with the Earth-rotation compensation optionally disabled
    /// (used to quantify what the compensation buys).
    pub fn residual_opts(
        &self,
        sk_1: &NavState,
        sk: &NavState,
        frame: &WorldFrame,
        compensate_earth: bool,
    ) -> Result<SMatrix<f64, 15, 1>, PreintegrationError> {
        let dt = self.dt_total;
        if (sk.t - sk_1.t - dt).abs() > 1e-6 {
            return Err(PreintegrationError::SpanMismatch { expected: dt, actual: sk.t - sk_1.t });
        }
        let (dp_c, dv_c, dq_c) = correct_bias(self, &sk_1.bg, &sk_1.ba)?;

        let g = frame.gravity;
        let omega =
            if compensate_earth { frame.earth_rate } else { Vector3::zeros() };
        let r0 = sk_1.rotation();
        let dp_w = sk.p_wb - sk_1.p_wb;

        let y_p = dp_w - sk_1.v_wb * dt - 0.5 * g * dt * dt
            + self.position_correction(&r0, &sk_1.v_wb, &g, &omega);
        let y_v =
            sk.v_wb - sk_1.v_wb - g * dt + self.velocity_correction(&r0, &dp_w, &omega);

        let q_e = quat_exp(&(-omega * dt));
        let m = sk.q_wb.inverse() * q_e * sk_1.q_wb * dq_c;

        let mut r = SMatrix::<f64, 15, 1>::zeros();
        r.fixed_rows_mut::<3>(0).copy_from(&(r0.transpose() * y_p - dp_c));
        r.fixed_rows_mut::<3>(3).copy_from(&(2.0 * m.quaternion().imag()));
        r.fixed_rows_mut::<3>(6).copy_from(&(r0.transpose() * y_v - dv_c));
        r.fixed_rows_mut::<3>(9).copy_from(&(sk.bg - sk_1.bg));
        r.fixed_rows_mut::<3>(12).copy_from(&(sk.ba - sk_1.ba));
        Ok(r)
    }

    /// Analytic Jacobians of [`residual`] w.r.t. the error states
    /// `(δp, δθ, δv, δbg, δba)` of `sk_1` and `sk`.
    pub fn residual_jacobians(
        &self,
        sk_1: &NavState,
        sk: &NavState,
        frame: &WorldFrame,
    ) -> Result<(SMatrix<f64, 15, 15>, SMatrix<f64, 15, 15>), PreintegrationError> {
        let dt = self.dt_total;
        let (_, _, dq_c) = correct_bias(self, &sk_1.bg, &sk_1.ba)?;
        let g = frame.gravity;
        let omega = frame.earth_rate;
        let wx = skew(&omega);
        let r0 = sk_1.rotation();
        let r0t = r0.transpose();
        let dp_w = sk.p_wb - sk_1.p_wb;

        let y_p = dp_w - sk_1.v_wb * dt - 0.5 * g * dt * dt
            + self.position_correction(&r0, &sk_1.v_wb, &g, &omega);
        let y_v = sk.v_wb - sk_1.v_wb - g * dt + self.velocity_correction(&r0, &dp_w, &omega);

        let mut j1 = SMatrix::<f64, 15, 15>::zeros();
        let mut j2 = SMatrix::<f64, 15, 15>::zeros();

        // position block
        j1.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-r0t));
        j2.fixed_view_mut::<3, 3>(0, 0).copy_from(&r0t);
        j1.fixed_view_mut::<3, 3>(0, 6)
            .copy_from(&(r0t * (-Matrix3::identity() * dt + 2.0 * wx * (dt * dt - self.s1))));
        // ∂/∂δθ_{k-1}: transport of y_p plus rotation of the correction sums
        let dcor_p = -2.0 * wx * (r0 * skew(&(dt * self.dp - self.w_tv)))
            - wx * (r0 * skew(&self.c1p))
            + 0.5 * wx * wx * (r0 * skew(&self.c2p));
        j1.fixed_view_mut::<3, 3>(0, 3).copy_from(&(skew(&(r0t * y_p)) + r0t * dcor_p));
        j1.fixed_view_mut::<3, 3>(0, 9).copy_from(&(-self.dp_dbg));
        j1.fixed_view_mut::<3, 3>(0, 12).copy_from(&(-self.dp_dba));

        // velocity block
        j1.fixed_view_mut::<3, 3>(6, 0).copy_from(&(r0t * (-2.0 * wx)));
        j2.fixed_view_mut::<3, 3>(6, 0).copy_from(&(r0t * (2.0 * wx)));
        j1.fixed_view_mut::<3, 3>(6, 6).copy_from(&(-r0t));
        j2.fixed_view_mut::<3, 3>(6, 6).copy_from(&r0t);
        let dcor_v =
            -wx * (r0 * skew(&self.c1v)) + 0.5 * wx * wx * (r0 * skew(&self.c2v));
        j1.fixed_view_mut::<3, 3>(6, 3).copy_from(&(skew(&(r0t * y_v)) + r0t * dcor_v));
        j1.fixed_view_mut::<3, 3>(6, 9).copy_from(&(-self.dv_dbg));
        j1.fixed_view_mut::<3, 3>(6, 12).copy_from(&(-self.dv_dba));

        // attitude block: exact quaternion-product derivatives
        let q_e = quat_exp(&(-omega * dt));
        let a = sk.q_wb.inverse() * q_e * sk_1.q_wb; // before dq_c
        let m_full = a * dq_c;
        let h = h_matrix();
        let p = p_matrix();

        let ja_k1 = p * quat_left(a.quaternion()) * quat_right(dq_c.quaternion()) * h;
        j1.fixed_view_mut::<3, 3>(3, 3).copy_from(&ja_k1);
        let ja_k = -(p * quat_right(m_full.quaternion()) * h);
        j2.fixed_view_mut::<3, 3>(3, 3).copy_from(&ja_k);
        let dbg_lin = self.dq_dbg * (sk_1.bg - self.lin_bg);
        let ja_bg =
            p * quat_left(m_full.quaternion()) * h * so3_right_jacobian(&dbg_lin) * self.dq_dbg;
        j1.fixed_view_mut::<3, 3>(3, 9).copy_from(&ja_bg);

        // bias blocks
        j1.fixed_view_mut::<3, 3>(9, 9).copy_from(&(-Matrix3::identity()));
        j2.fixed_view_mut::<3, 3>(9, 9).copy_from(&Matrix3::identity());
        j1.fixed_view_mut::<3, 3>(12, 12).copy_from(&(-Matrix3::identity()));
        j2.fixed_view_mut::<3, 3>(12, 12).copy_from(&Matrix3::identity());

        Ok((j1, j2))
    }

    /// Square root of the information matrix (inverse covariance), used to
    /// whiten residual and Jacobians in the optimizer.
    pub fn sqrt_information(&self) -> SMatrix<f64, 15, 15> {
        let mut cov = self.cov;
        // guard against a singular covariance on degenerate intervals
        for i in 0..15 {
            cov[(i, i)] += 1e-20;
        }
        let chol = cov.cholesky().expect("preintegration covariance must be PD");
        let l_inv = chol.l().try_inverse().expect("triangular inverse");
        // cov = L Lᵀ  =>  cov⁻¹ = L⁻ᵀ L⁻¹, whitener W = L⁻¹ (Wᵀ W = cov⁻¹)
        l_inv
    }

    pub fn noise(&self) -> &ImuNoise {
        &self.noise
    }
}

/// 4×3 lift of a rotation-vector perturbation into quaternion coordinates:
/// `d[1, δθ/2]/dδθ`.
fn h_matrix() -> SMatrix<f64, 4, 3> {
    let mut h = SMatrix::<f64, 4, 3>::zeros();
    h.fixed_view_mut::<3, 3>(1, 0).copy_from(&(Matrix3::identity() * 0.5));
    h
}

/// 3×4 selector of the quaternion vector part, scaled by the residual's
/// factor of 2.
fn p_matrix() -> SMatrix<f64, 3, 4> {
    let mut p = SMatrix::<f64, 3, 4>::zeros();
    p.fixed_view_mut::<3, 3>(0, 1).copy_from(&(Matrix3::identity() * 2.0));
    p
}

/// Retraction used by the error-state parameterization: `state ⊞ δx` with
/// `δx = (δp, δθ, δv, δbg, δba)`.
pub fn retract(state: &NavState, dx: &SMatrix<f64, 15, 1>) -> NavState {
    let dtheta = Vector3::new(dx[3], dx[4], dx[5]);
    NavState {
        t: state.t,
        p_wb: state.p_wb + Vector3::new(dx[0], dx[1], dx[2]),
        q_wb: UnitQuaternion::new_normalize(
            (state.q_wb * quat_exp(&dtheta)).into_inner(),
        ),
        v_wb: state.v_wb + Vector3::new(dx[6], dx[7], dx[8]),
        bg: state.bg + Vector3::new(dx[9], dx[10], dx[11]),
        ba: state.ba + Vector3::new(dx[12], dx[13], dx[14]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geodesy::{GeodeticPosition, WorldFrame, EARTH_RATE};
    use crate::ins::mechanize_step;
    use approx::assert_relative_eq;

    fn frame_lat30() -> WorldFrame {
        WorldFrame::new(GeodeticPosition::from_degrees(30.0, 20.0, 50.0).unwrap())
    }

    /// Smooth, deterministic body-rate / specific-force profile; not tied to
    /// a physical trajectory.
    fn smooth_signal(t: f64) -> (Vector3<f64>, Vector3<f64>) {
        let omega = Vector3::new(
            0.4 * (1.3 * t).sin(),
            -0.3 * (0.9 * t + 0.4).cos(),
            0.5 * (0.7 * t).sin(),
        );
        let force = Vector3::new(
            1.2 * (1.1 * t).cos(),
            0.8 * (0.6 * t + 1.0).sin(),
            -9.5 + 0.5 * (0.8 * t).sin(),
        );
        (omega, force)
    }

    /// Measurements for a body following `smooth_signal` with true biases
    /// added, plus the mechanization truth states at sample times.
    fn smooth_stream(
        duration: f64,
        rate: f64,
        frame: &WorldFrame,
        bg: Vector3<f64>,
        ba: Vector3<f64>,
    ) -> (Vec<ImuSample>, Vec<NavState>) {
        let n = (duration * rate).round() as usize;
        let dt = 1.0 / rate;
        let samples: Vec<ImuSample> = (0..=n)
            .map(|i| {
                let t = i as f64 * dt;
                let (omega, force) = smooth_signal(t);
                ImuSample { t, angular_rate: omega + bg, specific_force: force + ba }
            })
            .collect();
        let mut state = NavState {
            v_wb: Vector3::new(0.3, -0.2, 0.1),
            q_wb: UnitQuaternion::from_euler_angles(0.05, -0.1, 0.7),
            bg,
            ba,
            ..NavState::identity(0.0)
        };
        let mut states = vec![state];
        for pair in samples.windows(2) {
            state = mechanize_step(&state, &pair[0], &pair[1], frame).unwrap();
            states.push(state);
        }
        (samples, states)
    }

    #[test]
    fn vanishing_interval_gives_identity_delta() {
        let s0 = ImuSample {
            t: 0.0,
            angular_rate: Vector3::new(0.1, 0.2, 0.3),
            specific_force: Vector3::new(1.0, -2.0, 9.0),
        };
        let s1 = ImuSample { t: 1e-6, ..s0 };
        let pre =
            integrate(&[s0, s1], Vector3::zeros(), Vector3::zeros(), &ImuNoise::default())
                .unwrap();
        assert!(pre.dp.norm() < 1e-11);
        assert!(pre.dv.norm() < 1e-5);
        assert!(pre.dq.angle() < 1e-6);
        assert!(pre.cov.abs().max() < 1e-12);
    }

    #[test]
    fn fewer_than_two_samples_rejected() {
        let s = ImuSample {
            t: 0.0,
            angular_rate: Vector3::zeros(),
            specific_force: Vector3::zeros(),
        };
        assert!(matches!(
            integrate(&[s], Vector3::zeros(), Vector3::zeros(), &ImuNoise::default()),
            Err(PreintegrationError::EmptyInterval)
        ));
    }

    #[test]
    fn constant_force_integrates_exactly() {
        let samples: Vec<ImuSample> = (0..=100)
            .map(|i| ImuSample {
                t: i as f64 * 0.01,
                angular_rate: Vector3::zeros(),
                specific_force: Vector3::new(1.0, 0.0, 0.0),
            })
            .collect();
        let pre =
            integrate(&samples, Vector3::zeros(), Vector3::zeros(), &ImuNoise::default())
                .unwrap();
        assert_relative_eq!(pre.dv.x, 1.0, epsilon = 1e-9);
        assert_relative_eq!(pre.dp.x, 0.5, epsilon = 1e-9);
        assert!(pre.dv.yz().norm() < 1e-12 && pre.dp.yz().norm() < 1e-12);
        assert!(pre.dq.angle() < 1e-15);
    }

    /// Independent high-rate midpoint-rule accumulation of the body-frame
    /// deltas on linearly interpolated measurements.
    fn midpoint_oracle(
        samples: &[ImuSample],
        bg: &Vector3<f64>,
        ba: &Vector3<f64>,
        substeps: usize,
    ) -> (Vector3<f64>, Vector3<f64>, UnitQuaternion<f64>) {
        let interp = |t: f64| -> (Vector3<f64>, Vector3<f64>) {
            let i = samples.partition_point(|s| s.t <= t).clamp(1, samples.len() - 1);
            let (a, b) = (&samples[i - 1], &samples[i]);
            let w = ((t - a.t) / (b.t - a.t)).clamp(0.0, 1.0);
            (
                a.angular_rate.lerp(&b.angular_rate, w) - bg,
                a.specific_force.lerp(&b.specific_force, w) - ba,
            )
        };
        let t0 = samples[0].t;
        let t1 = samples.last().unwrap().t;
        let h = (t1 - t0) / substeps as f64;
        let mut q = UnitQuaternion::identity();
        let mut dv = Vector3::zeros();
        let mut dp = Vector3::zeros();
        for i in 0..substeps {
            let tm = t0 + (i as f64 + 0.5) * h;
            let (omega, force) = interp(tm);
            let q_mid = q * quat_exp(&(omega * (0.5 * h)));
            dp += dv * h + 0.5 * (q_mid * force) * h * h;
            dv += (q_mid * force) * h;
            q = UnitQuaternion::new_normalize((q * quat_exp(&(omega * h))).into_inner());
        }
        (dp, dv, q)
    }

    #[test]
    fn random_stream_matches_midpoint_oracle() {
        let frame = frame_lat30();
        let bg = Vector3::new(0.002, -0.001, 0.0015);
        let ba = Vector3::new(0.01, 0.02, -0.015);
        let (samples, _) = smooth_stream(2.0, 100.0, &frame, bg, ba);
        let pre = integrate(&samples, bg, ba, &ImuNoise::default()).unwrap();
        let (dp_o, dv_o, dq_o) = midpoint_oracle(&samples, &bg, &ba, 20_000);
        assert!((pre.dp - dp_o).norm() < 1e-6, "dp err {}", (pre.dp - dp_o).norm());
        assert!((pre.dv - dv_o).norm() < 1e-6, "dv err {}", (pre.dv - dv_o).norm());
        assert!(crate::math::rotation_angle(&pre.dq, &dq_o) < 1e-6);
    }

    #[test]
    fn bias_correction_matches_reintegration() {
        let frame = frame_lat30();
        let bg = Vector3::new(0.002, -0.001, 0.0015);
        let ba = Vector3::new(0.01, 0.02, -0.015);
        let (samples, _) = smooth_stream(2.0, 100.0, &frame, bg, ba);
        let pre = integrate(&samples, bg, ba, &ImuNoise::default()).unwrap();

        // identity correction
        let (dp0, dv0, dq0) = correct_bias(&pre, &bg, &ba).unwrap();
        assert_eq!(dp0, pre.dp);
        assert_eq!(dv0, pre.dv);
        assert!(crate::math::rotation_angle(&dq0, &pre.dq) < 1e-15);

        // gyro-bias perturbation
        let bg_p = bg + Vector3::new(1e-5, -0.7e-5, 0.4e-5);
        let (_, _, dq_c) = correct_bias(&pre, &bg_p, &ba).unwrap();
        let re = integrate(&samples, bg_p, ba, &ImuNoise::default()).unwrap();
        assert!(crate::math::rotation_angle(&dq_c, &re.dq) < 1e-8);

        // accel-bias perturbation
        let ba_p = ba + Vector3::new(1e-4, -0.5e-4, 0.8e-4);
        let (dp_c, dv_c, _) = correct_bias(&pre, &bg, &ba_p).unwrap();
        let re = integrate(&samples, bg, ba_p, &ImuNoise::default()).unwrap();
        assert!((dp_c - re.dp).norm() < 1e-8, "dp corr err {}", (dp_c - re.dp).norm());
        assert!((dv_c - re.dv).norm() < 1e-8);

        // beyond threshold signals re-integration
        assert!(matches!(
            correct_bias(&pre, &(bg + Vector3::new(2e-3, 0.0, 0.0)), &ba),
            Err(PreintegrationError::ReintegrationRequired { .. })
        ));
    }

    #[test]
    fn residual_vanishes_on_mechanization_truth() {
        let frame = frame_lat30();
        let bg = Vector3::new(0.002, -0.001, 0.0015);
        let ba = Vector3::new(0.01, 0.02, -0.015);
        let (samples, states) = smooth_stream(1.0, 100.0, &frame, bg, ba);
        let pre = integrate(&samples, bg, ba, &ImuNoise::default()).unwrap();
        let r = pre.residual(&states[0], states.last().unwrap(), &frame).unwrap();
        assert!(r.norm() < 1e-8, "residual norm {}", r.norm());
    }

    #[test]
    fn stationary_attitude_block_quantifies_earth_rotation() {
        let frame = frame_lat30();
        let q = UnitQuaternion::from_euler_angles(0.01, -0.02, 1.1);
        let r_bw = q.to_rotation_matrix().into_inner().transpose();
        let samples: Vec<ImuSample> = (0..=6000)
            .map(|i| ImuSample {
                t: i as f64 * 0.01,
                angular_rate: r_bw * frame.earth_rate,
                specific_force: -r_bw * frame.gravity,
            })
            .collect();
        let pre =
            integrate(&samples, Vector3::zeros(), Vector3::zeros(), &ImuNoise::default())
                .unwrap();
        let state0 = NavState { q_wb: q, ..NavState::identity(0.0) };
        let state1 = NavState { t: 60.0, ..state0 };

        let r_on = pre.residual_opts(&state0, &state1, &frame, true).unwrap();
        assert!(
            r_on.fixed_rows::<3>(3).norm() < 1e-8,
            "compensated attitude block {}",
            r_on.fixed_rows::<3>(3).norm()
        );

        let r_off = pre.residual_opts(&state0, &state1, &frame, false).unwrap();
        let expected = EARTH_RATE * 60.0;
        let got = r_off.fixed_rows::<3>(3).norm();
        assert!(
            (got - expected).abs() < 0.05 * expected,
            "uncompensated attitude block {} vs {}",
            got,
            expected
        );
    }

    #[test]
    fn position_block_linear_in_pk() {
        let frame = frame_lat30();
        let (samples, states) = smooth_stream(1.0, 100.0, &frame, Vector3::zeros(), Vector3::zeros());
        let pre = integrate(&samples, Vector3::zeros(), Vector3::zeros(), &ImuNoise::default())
            .unwrap();
        let s0 = states[0];
        let s1 = *states.last().unwrap();
        let r_base = pre.residual(&s0, &s1, &frame).unwrap();
        let mut s1p = s1;
        s1p.p_wb += Vector3::new(0.1, 0.0, 0.0);
        let r_pert = pre.residual(&s0, &s1p, &frame).unwrap();
        let dpos = r_pert.fixed_rows::<3>(0) - r_base.fixed_rows::<3>(0);
        let expected = s0.rotation().transpose() * Vector3::new(0.1, 0.0, 0.0);
        assert!((dpos - expected).norm() < 1e-12);
        // velocity block picks up only the O(omega) Coriolis coupling
        assert!((r_pert.fixed_rows::<3>(6) - r_base.fixed_rows::<3>(6)).norm() < 1e-4);
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let frame = frame_lat30();
        let bg = Vector3::new(0.002, -0.001, 0.0015);
        let ba = Vector3::new(0.01, 0.02, -0.015);
        let (samples, states) = smooth_stream(1.0, 100.0, &frame, bg, ba);
        let pre = integrate(&samples, bg, ba, &ImuNoise::default()).unwrap();
        let mut s0 = states[0];
        let mut s1 = *states.last().unwrap();
        // move off the zero-residual point
        s0.p_wb += Vector3::new(0.05, -0.02, 0.01);
        s1.v_wb += Vector3::new(-0.03, 0.01, 0.02);
        s1.q_wb = s1.q_wb * quat_exp(&Vector3::new(0.01, -0.005, 0.02));
        s0.bg += Vector3::new(2e-4, -1e-4, 1e-4);

        let (j1, j2) = pre.residual_jacobians(&s0, &s1, &frame).unwrap();
        let h = 1e-6;
        for (which, j_an) in [(0usize, &j1), (1usize, &j2)] {
            let mut j_fd = SMatrix::<f64, 15, 15>::zeros();
            for col in 0..15 {
                let mut dx = SMatrix::<f64, 15, 1>::zeros();
                dx[col] = h;
                let (a0, a1) = if which == 0 {
                    (retract(&s0, &dx), s1)
                } else {
                    (s0, retract(&s1, &dx))
                };
                let rp = pre.residual(&a0, &a1, &frame).unwrap();
                dx[col] = -h;
                let (b0, b1) = if which == 0 {
                    (retract(&s0, &dx), s1)
                } else {
                    (s0, retract(&s1, &dx))
                };
                let rm = pre.residual(&b0, &b1, &frame).unwrap();
                j_fd.set_column(col, &((rp - rm) / (2.0 * h)));
            }
            let scale = j_fd.abs().max().max(1.0);
            let err = (j_an - j_fd).abs().max() / scale;
            assert!(err < 1e-6, "jacobian {} rel err {}", which, err);
        }
    }

    #[test]
    fn covariance_stays_psd() {
        let frame = frame_lat30();
        let (samples, _) = smooth_stream(2.0, 200.0, &frame, Vector3::zeros(), Vector3::zeros());
        let pre = integrate(&samples, Vector3::zeros(), Vector3::zeros(), &ImuNoise::default())
            .unwrap();
        let sym = 0.5 * (pre.cov + pre.cov.transpose());
        let eig = sym.symmetric_eigen();
        assert!(eig.eigenvalues.min() > -1e-12, "min eig {}", eig.eigenvalues.min());
        // whitener exists
        let _ = pre.sqrt_information();
    }

    #[test]
    fn split_and_compose_reproduces_one_shot() {
        let frame = frame_lat30();
        let bg = Vector3::new(0.001, 0.0, -0.001);
        let ba = Vector3::new(0.005, -0.01, 0.02);
        let (samples, _) = smooth_stream(1.0, 100.0, &frame, bg, ba);
        let full = integrate(&samples, bg, ba, &ImuNoise::default()).unwrap();
        for split in [20usize, 50, 77] {
            let first = integrate(&samples[..=split], bg, ba, &ImuNoise::default()).unwrap();
            let second = integrate(&samples[split..], bg, ba, &ImuNoise::default()).unwrap();
            let r1 = first.dq.to_rotation_matrix().into_inner();
            let dq = first.dq * second.dq;
            let dv = first.dv + r1 * second.dv;
            let dp = first.dp + first.dv * second.dt_total + r1 * second.dp;
            assert!((dp - full.dp).norm() < 1e-9, "dp split err {}", (dp - full.dp).norm());
            assert!((dv - full.dv).norm() < 1e-9);
            assert!(crate::math::rotation_angle(&dq, &full.dq) < 1e-9);
        }
    }

    #[test]
    fn residual_span_mismatch_rejected() {
        let frame = frame_lat30();
        let (samples, states) = smooth_stream(1.0, 100.0, &frame, Vector3::zeros(), Vector3::zeros());
        let pre = integrate(&samples, Vector3::zeros(), Vector3::zeros(), &ImuNoise::default())
            .unwrap();
        let mut bad = *states.last().unwrap();
        bad.t += 0.5;
        assert!(matches!(
            pre.residual(&states[0], &bad, &frame),
            Err(PreintegrationError::SpanMismatch { .. })
        ));
    }
}
