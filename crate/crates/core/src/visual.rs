//! INS-aided visual geometry on feature tracks: camera model, undistortion,
//! rotation-compensated parallax, keyframe selection, landmark triangulation
//! with strict gating, and the unit-sphere tangent-plane reprojection factor.
//!
//! The camera frame is x-right, y-down, z-forward; `unit_plane` coordinates
//! are `(X/Z, Y/Z)` of an undistorted ray.

use nalgebra::{Matrix2, Matrix3, RowVector3, SMatrix, UnitQuaternion, Vector2, Vector3};
use thiserror::Error;

use crate::ins::NavState;
use crate::math::{skew, tangent_basis};

#[derive(Debug, Error, PartialEq)]
pub enum VisualError {
    #[error("undistortion did not converge in {0} iterations")]
    UndistortDiverged(usize),
    #[error("landmark projects behind the camera (z = {0})")]
    BehindCamera(f64),
    #[error("predicted ray too short for tangent-plane residual")]
    DegenerateGeometry,
    #[error("no shared features between frames")]
    NoSharedFeatures,
}

/// Pinhole camera with radial-tangential distortion.
#[derive(Debug, Clone, Copy)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub k1: f64,
    pub k2: f64,
    pub p1: f64,
    pub p2: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraModel {
    /// Apply the radial-tangential distortion model to a unit-plane point.
    pub fn distort(&self, p: &Vector2<f64>) -> Vector2<f64> {
        let (x, y) = (p.x, p.y);
        let r2 = x * x + y * y;
        let radial = 1.0 + self.k1 * r2 + self.k2 * r2 * r2;
        Vector2::new(
            x * radial + 2.0 * self.p1 * x * y + self.p2 * (r2 + 2.0 * x * x),
            y * radial + self.p1 * (r2 + 2.0 * y * y) + 2.0 * self.p2 * x * y,
        )
    }

    /// Unit-plane point to pixel, including distortion.
    pub fn project_unit_plane(&self, p: &Vector2<f64>) -> Vector2<f64> {
        let d = self.distort(p);
        Vector2::new(self.fx * d.x + self.cx, self.fy * d.y + self.cy)
    }

    /// Camera-frame point to pixel. Fails when the point is not in front of
    /// the camera.
    pub fn project(&self, p_c: &Vector3<f64>) -> Result<Vector2<f64>, VisualError> {
        if p_c.z <= 1e-9 {
            return Err(VisualError::BehindCamera(p_c.z));
        }
        Ok(self.project_unit_plane(&Vector2::new(p_c.x / p_c.z, p_c.y / p_c.z)))
    }

    /// Pixel to undistorted unit-plane point by Newton inversion of the
    /// distortion model.
    pub fn undistort(&self, pixel: &Vector2<f64>) -> Result<Vector2<f64>, VisualError> {
        let target = Vector2::new((pixel.x - self.cx) / self.fx, (pixel.y - self.cy) / self.fy);
        let mut p = target;
        for _ in 0..20 {
            let err = self.distort(&p) - target;
            if err.norm() < 1e-10 {
                return Ok(p);
            }
            let j = self.distortion_jacobian(&p);
            match j.try_inverse() {
                Some(ji) => p -= ji * err,
                None => break,
            }
        }
        let err = self.distort(&p) - target;
        if err.norm() < 1e-10 {
            Ok(p)
        } else {
            Err(VisualError::UndistortDiverged(20))
        }
    }

    fn distortion_jacobian(&self, p: &Vector2<f64>) -> Matrix2<f64> {
        let (x, y) = (p.x, p.y);
        let r2 = x * x + y * y;
        let radial = 1.0 + self.k1 * r2 + self.k2 * r2 * r2;
        let dradial = 2.0 * self.k1 + 4.0 * self.k2 * r2;
        Matrix2::new(
            radial + x * x * dradial + 2.0 * self.p1 * y + 6.0 * self.p2 * x,
            x * y * dradial + 2.0 * self.p1 * x + 2.0 * self.p2 * y,
            x * y * dradial + 2.0 * self.p2 * y + 2.0 * self.p1 * x,
            radial + y * y * dradial + 6.0 * self.p1 * y + 2.0 * self.p2 * x,
        )
    }

    pub fn contains(&self, pixel: &Vector2<f64>) -> bool {
        pixel.x >= 0.0
            && pixel.y >= 0.0
            && pixel.x < self.width as f64
            && pixel.y < self.height as f64
    }

    pub fn focal_mean(&self) -> f64 {
        0.5 * (self.fx + self.fy)
    }
}

/// Camera-IMU extrinsics: `q_bc` rotates camera-frame vectors into the body
/// frame, `p_bc` is the camera origin in the body frame.
#[derive(Debug, Clone, Copy)]
pub struct Extrinsics {
    pub q_bc: UnitQuaternion<f64>,
    pub p_bc: Vector3<f64>,
}

impl Extrinsics {
    /// Forward-looking camera: optical axis along body x, image x to the
    /// right (body y), image y down (body z).
    pub fn forward_facing() -> Self {
        let r_bc = Matrix3::new(
            0.0, 0.0, 1.0, //
            1.0, 0.0, 0.0, //
            0.0, 1.0, 0.0,
        );
        Self {
            q_bc: UnitQuaternion::from_matrix(&r_bc),
            p_bc: Vector3::zeros(),
        }
    }
}

/// One tracked-feature observation in one frame.
#[derive(Debug, Clone, Copy)]
pub struct FeatureObservation {
    pub frame_id: u64,
    pub feature_id: u64,
    pub pixel: Vector2<f64>,
    pub unit_plane: Vector2<f64>,
    /// Set when any gate or culling stage rejects this observation; rejected
    /// observations never enter another optimization.
    pub outlier: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LandmarkStatus {
    Candidate,
    Triangulated,
    Outlier,
}

/// Inverse-depth landmark anchored at its first observing keyframe.
#[derive(Debug, Clone)]
pub struct Landmark {
    pub id: u64,
    pub ref_keyframe: u64,
    pub inv_depth: f64,
    pub observations: Vec<FeatureObservation>,
    pub status: LandmarkStatus,
}

impl Landmark {
    pub fn new(id: u64, ref_keyframe: u64, first_obs: FeatureObservation) -> Self {
        Self {
            id,
            ref_keyframe,
            inv_depth: 0.0,
            observations: vec![first_obs],
            status: LandmarkStatus::Candidate,
        }
    }

    pub fn observation(&self, frame_id: u64) -> Option<&FeatureObservation> {
        self.observations.iter().find(|o| o.frame_id == frame_id)
    }

    pub fn anchor_observation(&self) -> Option<&FeatureObservation> {
        self.observation(self.ref_keyframe)
    }
}

/// Thresholds of the visual front-end.
#[derive(Debug, Clone, Copy)]
pub struct FrontendConfig {
    /// Average compensated parallax above which a frame becomes a keyframe,
    /// pixels.
    pub parallax_threshold_px: f64,
    /// Time since the last keyframe after which an observation frame is
    /// inserted, seconds.
    pub observation_interval_s: f64,
    /// Minimum anchor-to-current parallax before triangulation, pixels.
    pub min_triangulation_parallax_px: f64,
    /// Accepted depth range for triangulated landmarks, meters.
    pub min_depth: f64,
    pub max_depth: f64,
    /// Gate radius on INS-predicted feature positions, pixels.
    pub track_gate_px: f64,
    /// Per-frame feature budget.
    pub max_features: usize,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            parallax_threshold_px: 20.0,
            observation_interval_s: 0.5,
            min_triangulation_parallax_px: 10.0,
            min_depth: 1.0,
            max_depth: 100.0,
            track_gate_px: 30.0,
            max_features: 150,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameDecision {
    Keyframe,
    ObservationFrame,
    Skip,
}

/// Pure keyframe decision: keyframe above the parallax threshold, otherwise
/// an observation frame once enough time has passed, otherwise skip.
pub fn keyframe_decision(
    avg_parallax_px: f64,
    elapsed_since_keyframe: f64,
    cfg: &FrontendConfig,
) -> FrameDecision {
    if avg_parallax_px > cfg.parallax_threshold_px {
        FrameDecision::Keyframe
    } else if elapsed_since_keyframe > cfg.observation_interval_s {
        FrameDecision::ObservationFrame
    } else {
        FrameDecision::Skip
    }
}

/// Rotation-compensated parallax of one feature pair, in pixels.
///
/// The keyframe ray is rotated by the INS-prior relative rotation
/// (`r_cur_kf`, keyframe camera frame to current camera frame), reprojected
/// through the intrinsics, and differenced with the current observation in
/// undistorted pixel space.
pub fn compensated_parallax(
    cam: &CameraModel,
    kf_unit_plane: &Vector2<f64>,
    cur_unit_plane: &Vector2<f64>,
    r_cur_kf: &UnitQuaternion<f64>,
) -> f64 {
    let rotated = r_cur_kf * Vector3::new(kf_unit_plane.x, kf_unit_plane.y, 1.0);
    let compensated = if rotated.z.abs() > 1e-9 {
        Vector2::new(rotated.x / rotated.z, rotated.y / rotated.z)
    } else {
        // ray rotated to the image plane at infinity; fall back on the raw ray
        *kf_unit_plane
    };
    let d = compensated - cur_unit_plane;
    Vector2::new(cam.fx * d.x, cam.fy * d.y).norm()
}

/// Camera pose in the world frame derived from a body state and extrinsics.
pub fn camera_pose(state: &NavState, ext: &Extrinsics) -> (UnitQuaternion<f64>, Vector3<f64>) {
    let q_wc = state.q_wb * ext.q_bc;
    let p_wc = state.p_wb + state.q_wb * ext.p_bc;
    (q_wc, p_wc)
}

/// Lift an anchored inverse-depth landmark into the world frame.
pub fn landmark_world_point(
    anchor_state: &NavState,
    ext: &Extrinsics,
    anchor_unit_plane: &Vector2<f64>,
    inv_depth: f64,
) -> Vector3<f64> {
    let (q_wc, p_wc) = camera_pose(anchor_state, ext);
    let ray = Vector3::new(anchor_unit_plane.x, anchor_unit_plane.y, 1.0) / inv_depth;
    q_wc * ray + p_wc
}

/// World point into the camera frame at `state`.
pub fn world_to_camera(
    state: &NavState,
    ext: &Extrinsics,
    p_w: &Vector3<f64>,
) -> Vector3<f64> {
    let (q_wc, p_wc) = camera_pose(state, ext);
    q_wc.inverse() * (p_w - p_wc)
}

/// Predict the pixel of a triangulated landmark in the frame at
/// `target_state`, used by the front-end to gate incoming track
/// observations.
pub fn predict_observation(
    anchor_state: &NavState,
    target_state: &NavState,
    ext: &Extrinsics,
    lm: &Landmark,
    cam: &CameraModel,
) -> Result<Vector2<f64>, VisualError> {
    let anchor = lm.anchor_observation().ok_or(VisualError::NoSharedFeatures)?;
    let p_w = landmark_world_point(anchor_state, ext, &anchor.unit_plane, lm.inv_depth);
    let p_c = world_to_camera(target_state, ext, &p_w);
    cam.project(&p_c)
}

/// Two-view triangulation by the midpoint method; returns the depth of the
/// point along the anchor camera's ray, or `None` when the rays are parallel
/// within 1e-8.
pub fn triangulate_two_view(
    anchor_pose: &(UnitQuaternion<f64>, Vector3<f64>),
    other_pose: &(UnitQuaternion<f64>, Vector3<f64>),
    anchor_unit_plane: &Vector2<f64>,
    other_unit_plane: &Vector2<f64>,
) -> Option<f64> {
    let d_a = anchor_pose.0 * Vector3::new(anchor_unit_plane.x, anchor_unit_plane.y, 1.0);
    let d_b = other_pose.0 * Vector3::new(other_unit_plane.x, other_unit_plane.y, 1.0);
    let o_a = anchor_pose.1;
    let o_b = other_pose.1;
    if d_a.cross(&d_b).norm() / (d_a.norm() * d_b.norm()) < 1e-8 {
        return None;
    }
    // least-squares [d_a, -d_b] [s; t] = o_b - o_a
    let rhs = o_b - o_a;
    let a11 = d_a.dot(&d_a);
    let a12 = -d_a.dot(&d_b);
    let a22 = d_b.dot(&d_b);
    let b1 = d_a.dot(&rhs);
    let b2 = -d_b.dot(&rhs);
    let det = a11 * a22 - a12 * a12;
    if det.abs() < 1e-14 {
        return None;
    }
    let s = (b1 * a22 - a12 * b2) / det;
    let t = (a11 * b2 - a12 * b1) / det;
    let midpoint = 0.5 * ((o_a + s * d_a) + (o_b + t * d_b));
    // depth along the anchor optical axis
    let z = (anchor_pose.0.inverse() * (midpoint - o_a)).z;
    Some(z / Vector3::new(anchor_unit_plane.x, anchor_unit_plane.y, 1.0).z)
}

/// Outcome of a triangulation attempt with gating applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TriangulationOutcome {
    /// Depth accepted; landmark became `Triangulated`.
    Accepted,
    /// Parallax below the minimum; landmark stays `Candidate`.
    ParallaxTooSmall,
    /// Rays parallel; landmark stays `Candidate`.
    Degenerate,
    /// Depth outside the accepted range; landmark marked `Outlier`.
    DepthRejected,
}

/// Triangulate a candidate landmark between its anchor keyframe and the
/// latest observing keyframe using INS prior poses, with the parallax and
/// depth gates applied.
pub fn triangulate(
    lm: &mut Landmark,
    anchor_state: &NavState,
    latest_state: &NavState,
    latest_frame: u64,
    ext: &Extrinsics,
    cam: &CameraModel,
    cfg: &FrontendConfig,
) -> TriangulationOutcome {
    let Some(anchor) = lm.anchor_observation().copied() else {
        return TriangulationOutcome::Degenerate;
    };
    let Some(latest) = lm.observation(latest_frame).copied() else {
        return TriangulationOutcome::Degenerate;
    };
    let anchor_pose = camera_pose(anchor_state, ext);
    let latest_pose = camera_pose(latest_state, ext);

    // parallax gate between the current keyframe and the first observation,
    // rotation compensated with the prior poses
    let r_cur_anchor = latest_pose.0.inverse() * anchor_pose.0;
    let parallax =
        compensated_parallax(cam, &anchor.unit_plane, &latest.unit_plane, &r_cur_anchor);
    if parallax < cfg.min_triangulation_parallax_px {
        return TriangulationOutcome::ParallaxTooSmall;
    }

    match triangulate_two_view(
        &anchor_pose,
        &latest_pose,
        &anchor.unit_plane,
        &latest.unit_plane,
    ) {
        None => TriangulationOutcome::Degenerate,
        Some(depth) => {
            if depth < cfg.min_depth || depth > cfg.max_depth {
                lm.status = LandmarkStatus::Outlier;
                TriangulationOutcome::DepthRejected
            } else {
                lm.inv_depth = 1.0 / depth;
                lm.status = LandmarkStatus::Triangulated;
                TriangulationOutcome::Accepted
            }
        }
    }
}

/// Predicted camera-frame point of the landmark in frame `j` (the chain of
/// the reprojection factor).
pub fn predicted_camera_point(
    state_i: &NavState,
    state_j: &NavState,
    ext: &Extrinsics,
    inv_depth: f64,
    anchor_unit_plane: &Vector2<f64>,
) -> Vector3<f64> {
    let p_ci = Vector3::new(anchor_unit_plane.x, anchor_unit_plane.y, 1.0) / inv_depth;
    let p_bi = ext.q_bc * p_ci + ext.p_bc;
    let p_w = state_i.q_wb * p_bi + state_i.p_wb;
    let p_bj = state_j.q_wb.inverse() * (p_w - state_j.p_wb);
    ext.q_bc.inverse() * (p_bj - ext.p_bc)
}

/// Tangent-plane residual between a predicted camera-frame point and an
/// observed unit-plane ray: the predicted and measured rays are compared on
/// the unit sphere, projected onto the tangent basis of the prediction.
pub fn tangent_residual(
    p_cj: &Vector3<f64>,
    obs_unit_plane: &Vector2<f64>,
) -> Result<Vector2<f64>, VisualError> {
    if p_cj.norm() < 1e-6 {
        return Err(VisualError::DegenerateGeometry);
    }
    let n = p_cj / p_cj.norm();
    let m_raw = Vector3::new(obs_unit_plane.x, obs_unit_plane.y, 1.0);
    let m = m_raw / m_raw.norm();
    let (b1, b2) = tangent_basis(&n);
    Ok(Vector2::new(b1.dot(&(n - m)), b2.dot(&(n - m))))
}

/// Reprojection residual of a landmark seen from keyframe `j`, anchored in
/// keyframe `i` with inverse depth `inv_depth`.
pub fn reprojection_residual(
    state_i: &NavState,
    state_j: &NavState,
    ext: &Extrinsics,
    inv_depth: f64,
    anchor_unit_plane: &Vector2<f64>,
    obs_unit_plane_j: &Vector2<f64>,
) -> Result<Vector2<f64>, VisualError> {
    let p_cj = predicted_camera_point(state_i, state_j, ext, inv_depth, anchor_unit_plane);
    tangent_residual(&p_cj, obs_unit_plane_j)
}

/// Jacobians of the reprojection residual.
#[derive(Debug, Clone)]
pub struct ReprojectionJacobians {
    /// w.r.t. (δp_i, δθ_i): 2×6.
    pub j_pose_i: SMatrix<f64, 2, 6>,
    /// w.r.t. (δp_j, δθ_j): 2×6.
    pub j_pose_j: SMatrix<f64, 2, 6>,
    /// w.r.t. the inverse depth.
    pub j_inv_depth: Vector2<f64>,
    /// w.r.t. (δp_bc, δθ_bc) extrinsic perturbations: 2×6.
    pub j_extrinsics: SMatrix<f64, 2, 6>,
}

/// Derivative of the tangent residual w.r.t. the predicted camera point,
/// including the dependence of the tangent basis on the prediction.
fn tangent_residual_jacobian(
    p_cj: &Vector3<f64>,
    obs_unit_plane: &Vector2<f64>,
) -> Result<SMatrix<f64, 2, 3>, VisualError> {
    let norm = p_cj.norm();
    if norm < 1e-6 {
        return Err(VisualError::DegenerateGeometry);
    }
    let n = p_cj / norm;
    let m_raw = Vector3::new(obs_unit_plane.x, obs_unit_plane.y, 1.0);
    let m = m_raw / m_raw.norm();
    let a = if n.z.abs() > 0.9 { Vector3::x() } else { Vector3::z() };
    let c = n.cross(&a);
    let b1 = c / c.norm();
    let b2 = n.cross(&b1);
    let e = n - m;

    // d n / d p = (I - n nᵀ) / |p|
    let dn_dp = (Matrix3::identity() - n * n.transpose()) / norm;
    // d b1 / d n = (I - b1 b1ᵀ)(-[a×]) / |c|
    let db1_dn = (Matrix3::identity() - b1 * b1.transpose()) * (-skew(&a)) / c.norm();
    // d b2 / d n = -[b1×] + [n×] db1/dn
    let db2_dn = -skew(&b1) + skew(&n) * db1_dn;

    let row1 = b1.transpose() * dn_dp + e.transpose() * db1_dn * dn_dp;
    let row2 = b2.transpose() * dn_dp + e.transpose() * db2_dn * dn_dp;
    let mut j = SMatrix::<f64, 2, 3>::zeros();
    j.row_mut(0).copy_from(&RowVector3::new(row1[0], row1[1], row1[2]));
    j.row_mut(1).copy_from(&RowVector3::new(row2[0], row2[1], row2[2]));
    Ok(j)
}

/// Analytic Jacobians of [`reprojection_residual`] on the error-state
/// parameterization (`q ⊕ δθ = q ⊗ exp(δθ)`).
pub fn reprojection_jacobians(
    state_i: &NavState,
    state_j: &NavState,
    ext: &Extrinsics,
    inv_depth: f64,
    anchor_unit_plane: &Vector2<f64>,
    obs_unit_plane_j: &Vector2<f64>,
) -> Result<ReprojectionJacobians, VisualError> {
    let r_bc = ext.q_bc.to_rotation_matrix().into_inner();
    let r_i = state_i.rotation();
    let r_j = state_j.rotation();

    let p_ci = Vector3::new(anchor_unit_plane.x, anchor_unit_plane.y, 1.0) / inv_depth;
    let p_bi = r_bc * p_ci + ext.p_bc;
    let p_w = r_i * p_bi + state_i.p_wb;
    let p_bj = r_j.transpose() * (p_w - state_j.p_wb);
    let p_cj = r_bc.transpose() * (p_bj - ext.p_bc);

    let dr_dp = tangent_residual_jacobian(&p_cj, obs_unit_plane_j)?;

    // chain pieces
    let dpcj_dpw = r_bc.transpose() * r_j.transpose();
    let dpcj_dpi = dpcj_dpw;
    let dpcj_dthi = dpcj_dpw * (-r_i * skew(&p_bi));
    let dpcj_dpj = -dpcj_dpw;
    let dpcj_dthj = r_bc.transpose() * skew(&p_bj);
    let dpcj_ddelta = dpcj_dpw * r_i * r_bc * (-p_ci / inv_depth);
    // extrinsics: p_bc enters both ends of the chain
    let dpcj_dpbc = dpcj_dpw * r_i - r_bc.transpose();
    let dpcj_dthbc =
        skew(&(r_bc.transpose() * (p_bj - ext.p_bc))) + dpcj_dpw * r_i * (-r_bc) * skew(&p_ci);

    let mut j_pose_i = SMatrix::<f64, 2, 6>::zeros();
    j_pose_i.fixed_view_mut::<2, 3>(0, 0).copy_from(&(dr_dp * dpcj_dpi));
    j_pose_i.fixed_view_mut::<2, 3>(0, 3).copy_from(&(dr_dp * dpcj_dthi));
    let mut j_pose_j = SMatrix::<f64, 2, 6>::zeros();
    j_pose_j.fixed_view_mut::<2, 3>(0, 0).copy_from(&(dr_dp * dpcj_dpj));
    j_pose_j.fixed_view_mut::<2, 3>(0, 3).copy_from(&(dr_dp * dpcj_dthj));
    let mut j_extrinsics = SMatrix::<f64, 2, 6>::zeros();
    j_extrinsics.fixed_view_mut::<2, 3>(0, 0).copy_from(&(dr_dp * dpcj_dpbc));
    j_extrinsics.fixed_view_mut::<2, 3>(0, 3).copy_from(&(dr_dp * dpcj_dthbc));

    Ok(ReprojectionJacobians {
        j_pose_i,
        j_pose_j,
        j_inv_depth: dr_dp * dpcj_ddelta,
        j_extrinsics,
    })
}
