//! Sliding-window factor-graph estimator: state bookkeeping, MAP problem
//! assembly, two-step optimization with chi-square gating, outlier culling,
//! marginalization, GNSS/INS initialization and feedback to the INS.

mod factors;
mod init;
mod marginalization;
mod pipeline;
mod solver;

pub use factors::{build_problem, Factor, FactorKind, ProblemLayout};
pub use init::{InitializationStatus, Initializer, InitializerConfig};
pub use marginalization::MarginalizationPrior;
pub use pipeline::{GnssMode, ObservationDisposition, Pipeline, PipelineConfig, PoseRecord};
pub use solver::{OptimizeOutcome, SolverConfig};

use nalgebra::{Matrix3, Vector3};
use serde::Serialize;
use thiserror::Error;

use crate::geodesy::{GeodeticPosition, WorldFrame};
use crate::ins::NavState;
use crate::math::skew;
use crate::preintegration::{ImuNoise, PreintegratedImu};
use crate::visual::{
    CameraModel, Extrinsics, FrontendConfig, Landmark, LandmarkStatus,
};
use std::collections::BTreeMap;

/// 95 % quantile of the chi-square distribution with 2 degrees of freedom.
pub const CHI2_95_2DOF: f64 = 5.991464547107979;

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("event at t={t} is not beyond the newest node at t={newest}")]
    OutOfOrderEvent { t: f64, newest: f64 },
    #[error("IMU stream does not cover the node interval: {0}")]
    ImuCoverage(String),
    #[error(transparent)]
    Preintegration(#[from] crate::preintegration::PreintegrationError),
    #[error(transparent)]
    Ins(#[from] crate::ins::InsError),
    #[error("optimizer diverged: {0}")]
    Divergence(String),
    #[error("initialization pending: {0}")]
    InitializationPending(String),
}

/// Timestamped absolute GNSS position with per-axis standard deviations and
/// the body-frame antenna lever arm.
#[derive(Debug, Clone, Copy)]
pub struct GnssFix {
    pub t: f64,
    pub position: GeodeticPosition,
    /// Per-axis standard deviation in the world frame (N, E, D), meters.
    pub sigma: Vector3<f64>,
    pub lever_arm: Vector3<f64>,
    pub valid: bool,
}

/// Residual of a GNSS position measurement already converted to the world
/// frame: `p_wb + R_wb·l − p̂`.
pub fn gnss_residual(
    state: &NavState,
    fix_world: &Vector3<f64>,
    lever_arm: &Vector3<f64>,
) -> Vector3<f64> {
    state.p_wb + state.q_wb * lever_arm - fix_world
}

/// Jacobian of [`gnss_residual`] w.r.t. `(δp, δθ)` of the state.
pub fn gnss_jacobian(state: &NavState, lever_arm: &Vector3<f64>) -> (Matrix3<f64>, Matrix3<f64>) {
    (Matrix3::identity(), -state.rotation() * skew(lever_arm))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum NodeKind {
    Keyframe,
    GnssEpoch,
    ObservationFrame,
}

/// One time node of the sliding window.
#[derive(Debug, Clone)]
pub struct TimeNode {
    /// Stable identity, preserved across marginalization.
    pub id: u64,
    pub t: f64,
    pub kind: NodeKind,
    /// Camera frame id for keyframes and observation frames.
    pub frame_id: Option<u64>,
    /// Fix attached to a GNSS epoch node (may be invalid).
    pub fix: Option<GnssFix>,
    pub state: NavState,
}

impl TimeNode {
    pub fn is_persistent(&self) -> bool {
        self.kind != NodeKind::ObservationFrame
    }
}

/// Estimator configuration.
#[derive(Debug, Clone)]
pub struct EstimatorConfig {
    pub window_capacity: usize,
    /// Isotropic pixel standard deviation of feature observations.
    pub pixel_sigma: f64,
    /// Huber threshold on whitened visual residual norms.
    pub huber_delta: f64,
    /// Chi-square gate on whitened visual residuals (2 dof).
    pub chi2_gate: f64,
    /// Per-observation reprojection error culling gate, pixels.
    pub reproj_obs_gate_px: f64,
    /// Landmark average reprojection error culling gate, pixels.
    pub reproj_landmark_gate_px: f64,
    pub frontend: FrontendConfig,
    pub solver: SolverConfig,
    pub imu_noise: ImuNoise,
    /// Optimize the camera-IMU extrinsics alongside the states.
    pub estimate_extrinsics: bool,
    /// Maximum tolerated IMU gap during propagation, seconds.
    pub max_imu_gap: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            window_capacity: 10,
            pixel_sigma: 1.5,
            huber_delta: 1.0,
            chi2_gate: CHI2_95_2DOF,
            reproj_obs_gate_px: 4.5,
            reproj_landmark_gate_px: 1.5,
            frontend: FrontendConfig::default(),
            solver: SolverConfig::default(),
            imu_noise: ImuNoise::default(),
            estimate_extrinsics: false,
            max_imu_gap: crate::ins::DEFAULT_MAX_IMU_GAP,
        }
    }
}

/// The sliding window: ordered time nodes, one preintegration per
/// consecutive node pair, the landmark map and the marginalization prior.
#[derive(Debug, Clone)]
pub struct SlidingWindow {
    pub nodes: Vec<TimeNode>,
    /// `preints[i]` spans `nodes[i] .. nodes[i+1]`.
    pub preints: Vec<PreintegratedImu>,
    pub landmarks: BTreeMap<u64, Landmark>,
    pub extrinsics: Extrinsics,
    pub camera: CameraModel,
    pub prior: Option<MarginalizationPrior>,
    next_node_id: u64,
}

impl SlidingWindow {
    pub fn new(extrinsics: Extrinsics, camera: CameraModel) -> Self {
        Self {
            nodes: Vec::new(),
            preints: Vec::new(),
            landmarks: BTreeMap::new(),
            extrinsics,
            camera,
            prior: None,
            next_node_id: 0,
        }
    }

    pub fn newest(&self) -> Option<&TimeNode> {
        self.nodes.last()
    }

    pub fn node_by_id(&self, id: u64) -> Option<&TimeNode> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn node_index_by_frame(&self, frame_id: u64) -> Option<usize> {
        self.nodes.iter().position(|n| n.frame_id == Some(frame_id))
    }

    /// Number of persistent (keyframe / GNSS) nodes.
    pub fn persistent_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.is_persistent()).count()
    }

    /// Append a node. The preintegration must span from the previous newest
    /// node to the new one (checked), except for the very first node.
    pub fn push_node(
        &mut self,
        t: f64,
        kind: NodeKind,
        frame_id: Option<u64>,
        fix: Option<GnssFix>,
        state: NavState,
        preint: Option<PreintegratedImu>,
    ) -> Result<u64, EstimatorError> {
        if let Some(last) = self.nodes.last() {
            if t <= last.t {
                return Err(EstimatorError::OutOfOrderEvent { t, newest: last.t });
            }
            let pre = preint.ok_or_else(|| {
                EstimatorError::ImuCoverage(format!("missing preintegration up to t={t}"))
            })?;
            debug_assert!((pre.dt_total - (t - last.t)).abs() < 1e-6);
            self.preints.push(pre);
        }
        let id = self.next_node_id;
        self.next_node_id += 1;
        self.nodes.push(TimeNode { id, t, kind, frame_id, fix, state });
        debug_assert_eq!(self.preints.len() + 1, self.nodes.len());
        Ok(id)
    }

    /// Remove the node at `idx`, merging the two adjacent preintegrations by
    /// re-integration over the concatenated sample streams. Factors touching
    /// the node are dropped, not marginalized.
    pub fn drop_node(&mut self, idx: usize) {
        let node = self.nodes.remove(idx);
        if self.nodes.is_empty() {
            self.preints.clear();
        } else if idx == 0 {
            self.preints.remove(0);
        } else if idx == self.nodes.len() {
            // was the last node
            self.preints.pop();
        } else {
            let left = self.preints.remove(idx - 1);
            let right = self.preints.remove(idx - 1);
            let mut samples = left.samples.clone();
            // boundary sample is shared
            samples.extend_from_slice(&right.samples[1..]);
            let merged = crate::preintegration::integrate(
                &samples,
                left.lin_bg,
                left.lin_ba,
                left.noise(),
            )
            .expect("merged preintegration");
            self.preints.insert(idx - 1, merged);
        }
        // forget this frame's observations
        if let Some(frame_id) = node.frame_id {
            for lm in self.landmarks.values_mut() {
                lm.observations.retain(|o| o.frame_id != frame_id);
            }
            self.landmarks.retain(|_, lm| !lm.observations.is_empty());
        }
    }

    /// Keyframe (or observation-frame) node indices having a usable
    /// observation of `lm`, anchor first.
    pub fn observing_nodes(&self, lm: &Landmark) -> Vec<usize> {
        let mut out = Vec::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Some(frame_id) = node.frame_id {
                if lm.observations.iter().any(|o| o.frame_id == frame_id && !o.outlier) {
                    out.push(idx);
                }
            }
        }
        out
    }

    /// Anchor node index of a triangulated landmark, if its anchor keyframe
    /// is still in the window.
    pub fn anchor_index(&self, lm: &Landmark) -> Option<usize> {
        self.node_index_by_frame(lm.ref_keyframe)
    }

    /// Every invariant the window promises: ordered nodes, one
    /// preintegration per consecutive pair, anchors in window.
    pub fn check_invariants(&self) {
        assert!(self.nodes.windows(2).all(|w| w[0].t < w[1].t), "nodes out of order");
        assert_eq!(
            self.preints.len(),
            self.nodes.len().saturating_sub(1),
            "preintegration count mismatch"
        );
        for lm in self.landmarks.values() {
            if lm.status == LandmarkStatus::Triangulated {
                assert!(
                    self.anchor_index(lm).is_some(),
                    "triangulated landmark {} anchor not in window",
                    lm.id
                );
            }
        }
    }
}

/// Per-optimization diagnostics, serialized as one JSON line each.
#[derive(Debug, Clone, Serialize, Default)]
pub struct OptimizationDiagnostics {
    pub t: f64,
    pub cost_before: f64,
    pub cost_after_step1: f64,
    pub cost_after: f64,
    pub iterations_step1: usize,
    pub iterations_step2: usize,
    pub prior_factors: usize,
    pub preint_factors: usize,
    pub visual_factors: usize,
    pub gnss_factors: usize,
    pub chi2_removed: usize,
    pub observations_culled: usize,
    pub landmarks_removed: usize,
    pub runtime_ms: f64,
    pub diverged: bool,
}

/// Two-step optimization: solve, gate visual factors by a chi-square test on
/// their whitened squared residuals, solve again, then cull outliers.
pub fn optimize(
    window: &mut SlidingWindow,
    frame: &WorldFrame,
    cfg: &EstimatorConfig,
) -> (OptimizationDiagnostics, Vec<(u64, u64)>) {
    let start = std::time::Instant::now();
    let (layout, factors) = build_problem(window, frame, cfg);
    let mut diag = OptimizationDiagnostics {
        t: window.newest().map(|n| n.t).unwrap_or(0.0),
        prior_factors: factors.iter().filter(|f| f.kind() == factors::FactorKind::Prior).count(),
        preint_factors: factors
            .iter()
            .filter(|f| f.kind() == factors::FactorKind::Preintegration)
            .count(),
        visual_factors: factors.iter().filter(|f| f.kind() == factors::FactorKind::Visual).count(),
        gnss_factors: factors.iter().filter(|f| f.kind() == factors::FactorKind::Gnss).count(),
        ..Default::default()
    };

    let out1 = solver::levenberg_marquardt(
        window,
        frame,
        &factors,
        &layout,
        &cfg.solver,
        cfg.huber_delta,
    );
    diag.cost_before = out1.initial_cost;
    diag.cost_after_step1 = out1.final_cost;
    diag.iterations_step1 = out1.iterations;
    diag.diverged |= out1.diverged;

    // chi-square gate (95 %, 2 dof) on each visual factor's whitened squared
    // residual; gated factors leave the problem, not the landmark map
    let ws = factors::WorkingState::from_window(window, &layout);
    let mut gated: Vec<(u64, u64)> = Vec::new();
    let kept: Vec<Factor> = factors
        .into_iter()
        .filter(|f| match f {
            Factor::Visual { frame_feature, .. } => {
                match factors::residual_only(f, window, &layout, &ws, frame) {
                    Some(r) if r.norm_squared() > cfg.chi2_gate => {
                        gated.push(*frame_feature);
                        false
                    }
                    Some(_) => true,
                    None => {
                        gated.push(*frame_feature);
                        false
                    }
                }
            }
            _ => true,
        })
        .collect();
    diag.chi2_removed = gated.len();

    let out2 = solver::levenberg_marquardt(
        window,
        frame,
        &kept,
        &layout,
        &cfg.solver,
        cfg.huber_delta,
    );
    diag.cost_after = out2.final_cost;
    diag.iterations_step2 = out2.iterations;
    diag.diverged |= out2.diverged;

    let (n_culled, _, removed) = cull_outliers(window, cfg);
    diag.observations_culled = n_culled;
    diag.landmarks_removed = removed.len();
    diag.runtime_ms = start.elapsed().as_secs_f64() * 1e3;
    (diag, gated)
}

/// Landmark world position from its anchor keyframe state.
pub fn landmark_world(window: &SlidingWindow, lm: &Landmark) -> Option<Vector3<f64>> {
    let anchor_idx = window.anchor_index(lm)?;
    let anchor_obs = lm.anchor_observation()?;
    Some(crate::visual::landmark_world_point(
        &window.nodes[anchor_idx].state,
        &window.extrinsics,
        &anchor_obs.unit_plane,
        lm.inv_depth,
    ))
}

/// Observation- and landmark-level culling after optimization.
///
/// Depth and pixel reprojection error are evaluated in every observing
/// frame; observations failing the depth range or the per-observation gate
/// are flagged and never used again, and landmarks whose average error
/// exceeds the landmark gate are removed from the map.
pub fn cull_outliers(
    window: &mut SlidingWindow,
    cfg: &EstimatorConfig,
) -> (usize, Vec<(u64, u64)>, Vec<u64>) {
    let mut culled_obs: Vec<(u64, u64)> = Vec::new();
    let mut removed_landmarks: Vec<u64> = Vec::new();

    let states: BTreeMap<u64, NavState> = window
        .nodes
        .iter()
        .filter_map(|n| n.frame_id.map(|f| (f, n.state)))
        .collect();

    let cam = window.camera;
    let ext = window.extrinsics;
    let landmark_ids: Vec<u64> = window.landmarks.keys().copied().collect();
    for id in landmark_ids {
        let Some(world) = window
            .landmarks
            .get(&id)
            .filter(|lm| lm.status == LandmarkStatus::Triangulated)
            .and_then(|lm| landmark_world(window, lm))
        else {
            continue;
        };
        let lm = window.landmarks.get_mut(&id).expect("landmark present");
        let mut err_sum = 0.0;
        let mut err_count = 0usize;
        for obs in lm.observations.iter_mut() {
            if obs.outlier {
                continue;
            }
            let Some(state) = states.get(&obs.frame_id) else { continue };
            let p_c = crate::visual::world_to_camera(state, &ext, &world);
            let depth = p_c.z;
            let err = match cam.project(&p_c) {
                Ok(px) => (px - obs.pixel).norm(),
                Err(_) => f64::INFINITY,
            };
            if depth < cfg.frontend.min_depth
                || depth > cfg.frontend.max_depth
                || err > cfg.reproj_obs_gate_px
            {
                obs.outlier = true;
                culled_obs.push((obs.frame_id, obs.feature_id));
            } else {
                err_sum += err;
                err_count += 1;
            }
        }
        let avg = if err_count > 0 { err_sum / err_count as f64 } else { f64::INFINITY };
        if avg > cfg.reproj_landmark_gate_px {
            removed_landmarks.push(id);
        }
    }
    for id in &removed_landmarks {
        window.landmarks.remove(id);
    }
    (culled_obs.len(), culled_obs, removed_landmarks)
}
