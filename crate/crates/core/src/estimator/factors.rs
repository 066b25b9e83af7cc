//! Factor construction and evaluation for the sliding-window MAP problem.
//!
//! The parameter vector stacks one 15-dimensional error state per node
//! (order δp, δθ, δv, δbg, δba), optionally a 6-dimensional extrinsic block,
//! then one inverse-depth scalar per triangulated landmark.

use nalgebra::{DMatrix, DVector, Matrix3, UnitQuaternion, Vector2, Vector3};
use std::collections::BTreeMap;

use crate::geodesy::WorldFrame;
use crate::ins::NavState;
use crate::preintegration::retract;
use crate::visual::{Extrinsics, LandmarkStatus};

use super::{gnss_jacobian, gnss_residual, EstimatorConfig, SlidingWindow};

/// Column layout of the stacked parameter vector.
#[derive(Debug, Clone)]
pub struct ProblemLayout {
    pub node_ids: Vec<u64>,
    pub extrinsics_col: Option<usize>,
    pub landmark_ids: Vec<u64>,
    pub n_pose_params: usize,
    pub n_params: usize,
    node_cols: BTreeMap<u64, usize>,
    landmark_cols: BTreeMap<u64, usize>,
}

impl ProblemLayout {
    pub fn new(window: &SlidingWindow, estimate_extrinsics: bool) -> Self {
        let node_ids: Vec<u64> = window.nodes.iter().map(|n| n.id).collect();
        let node_cols: BTreeMap<u64, usize> =
            node_ids.iter().enumerate().map(|(i, id)| (*id, 15 * i)).collect();
        let mut n_pose = 15 * node_ids.len();
        let extrinsics_col = if estimate_extrinsics {
            let c = n_pose;
            n_pose += 6;
            Some(c)
        } else {
            None
        };
        let landmark_ids: Vec<u64> = window
            .landmarks
            .values()
            .filter(|lm| {
                lm.status == LandmarkStatus::Triangulated && window.anchor_index(lm).is_some()
            })
            .map(|lm| lm.id)
            .collect();
        let landmark_cols: BTreeMap<u64, usize> =
            landmark_ids.iter().enumerate().map(|(i, id)| (*id, n_pose + i)).collect();
        let n_params = n_pose + landmark_ids.len();
        Self {
            node_ids,
            extrinsics_col,
            landmark_ids,
            n_pose_params: n_pose,
            n_params,
            node_cols,
            landmark_cols,
        }
    }

    pub fn node_col(&self, id: u64) -> usize {
        self.node_cols[&id]
    }

    pub fn landmark_col(&self, id: u64) -> usize {
        self.landmark_cols[&id]
    }
}

/// Mutable copy of the optimized variables, retracted during line search
/// without touching the window until a step is accepted.
#[derive(Debug, Clone)]
pub struct WorkingState {
    pub states: Vec<NavState>,
    pub extrinsics: Extrinsics,
    pub inv_depths: Vec<f64>,
}

impl WorkingState {
    pub fn from_window(window: &SlidingWindow, layout: &ProblemLayout) -> Self {
        Self {
            states: window.nodes.iter().map(|n| n.state).collect(),
            extrinsics: window.extrinsics,
            inv_depths: layout
                .landmark_ids
                .iter()
                .map(|id| window.landmarks[id].inv_depth)
                .collect(),
        }
    }

    pub fn retract_all(&self, layout: &ProblemLayout, dx: &DVector<f64>) -> Self {
        let mut out = self.clone();
        for (i, _) in layout.node_ids.iter().enumerate() {
            let mut d = nalgebra::SMatrix::<f64, 15, 1>::zeros();
            for k in 0..15 {
                d[k] = dx[15 * i + k];
            }
            out.states[i] = retract(&self.states[i], &d);
        }
        if let Some(c) = layout.extrinsics_col {
            let dp = Vector3::new(dx[c], dx[c + 1], dx[c + 2]);
            let dth = Vector3::new(dx[c + 3], dx[c + 4], dx[c + 5]);
            out.extrinsics.p_bc += dp;
            out.extrinsics.q_bc = UnitQuaternion::new_normalize(
                (self.extrinsics.q_bc * crate::math::quat_exp(&dth)).into_inner(),
            );
        }
        for (i, d) in out.inv_depths.iter_mut().enumerate() {
            *d += dx[layout.n_pose_params + i];
        }
        out
    }

    pub fn write_back(&self, window: &mut SlidingWindow, layout: &ProblemLayout) {
        for (i, node) in window.nodes.iter_mut().enumerate() {
            node.state = self.states[i];
        }
        window.extrinsics = self.extrinsics;
        for (i, id) in layout.landmark_ids.iter().enumerate() {
            window.landmarks.get_mut(id).expect("landmark").inv_depth = self.inv_depths[i];
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FactorKind {
    Prior,
    Preintegration,
    Visual,
    Gnss,
}

/// One factor of the MAP problem, with everything needed to evaluate it
/// against a [`WorkingState`].
#[derive(Debug, Clone)]
pub enum Factor {
    Prior,
    Preintegration {
        /// Index into `window.preints`; spans node `idx` to `idx + 1`.
        idx: usize,
    },
    Gnss {
        node_index: usize,
        fix_world: Vector3<f64>,
        lever_arm: Vector3<f64>,
        sqrt_info: Matrix3<f64>,
    },
    Visual {
        landmark_id: u64,
        anchor_index: usize,
        target_index: usize,
        anchor_unit_plane: Vector2<f64>,
        obs_unit_plane: Vector2<f64>,
        /// Identity of the observation, for gating bookkeeping.
        frame_feature: (u64, u64),
        /// Scalar whitening weight (focal length over pixel sigma).
        weight: f64,
    },
}

impl Factor {
    pub fn kind(&self) -> FactorKind {
        match self {
            Factor::Prior => FactorKind::Prior,
            Factor::Preintegration { .. } => FactorKind::Preintegration,
            Factor::Gnss { .. } => FactorKind::Gnss,
            Factor::Visual { .. } => FactorKind::Visual,
        }
    }
}

/// Whitened residual and Jacobian blocks of one factor.
pub struct FactorEval {
    pub residual: DVector<f64>,
    /// `(column, block)` pairs; block width is the block's ncols.
    pub blocks: Vec<(usize, DMatrix<f64>)>,
}

/// Assemble the factor list of a window: prior, one preintegration per
/// consecutive node pair, one reprojection factor per (landmark, non-anchor
/// observation), one GNSS factor per valid fix.
pub fn build_problem(
    window: &SlidingWindow,
    frame: &WorldFrame,
    cfg: &EstimatorConfig,
) -> (ProblemLayout, Vec<Factor>) {
    let layout = ProblemLayout::new(window, cfg.estimate_extrinsics);
    let mut factors = Vec::new();
    if window.prior.is_some() {
        factors.push(Factor::Prior);
    }
    for idx in 0..window.preints.len() {
        factors.push(Factor::Preintegration { idx });
    }
    for (node_index, node) in window.nodes.iter().enumerate() {
        if let Some(fix) = &node.fix {
            if fix.valid {
                let fix_world = frame.to_world(&fix.position);
                let sqrt_info = Matrix3::from_diagonal(&Vector3::new(
                    1.0 / fix.sigma.x,
                    1.0 / fix.sigma.y,
                    1.0 / fix.sigma.z,
                ));
                factors.push(Factor::Gnss {
                    node_index,
                    fix_world,
                    lever_arm: fix.lever_arm,
                    sqrt_info,
                });
            }
        }
    }
    let weight = window.camera.focal_mean() / cfg.pixel_sigma;
    for id in &layout.landmark_ids {
        let lm = &window.landmarks[id];
        let anchor_index = window.anchor_index(lm).expect("layout guarantees anchor");
        let Some(anchor_obs) = lm.anchor_observation() else { continue };
        let anchor_unit_plane = anchor_obs.unit_plane;
        for obs_index in window.observing_nodes(lm) {
            if obs_index == anchor_index {
                continue;
            }
            let frame_id = window.nodes[obs_index].frame_id.expect("observing node has frame");
            let obs = lm.observation(frame_id).expect("observation exists");
            if obs.outlier {
                continue;
            }
            factors.push(Factor::Visual {
                landmark_id: *id,
                anchor_index,
                target_index: obs_index,
                anchor_unit_plane,
                obs_unit_plane: obs.unit_plane,
                frame_feature: (frame_id, obs.feature_id),
                weight,
            });
        }
    }
    (layout, factors)
}

/// Evaluate one factor at a working state. Returns the whitened residual and
/// Jacobian blocks; `None` when the factor is degenerate at this state (it
/// then contributes nothing to this iteration).
pub fn evaluate(
    factor: &Factor,
    window: &SlidingWindow,
    layout: &ProblemLayout,
    ws: &WorkingState,
    frame: &WorldFrame,
) -> Option<FactorEval> {
    match factor {
        Factor::Prior => {
            let prior = window.prior.as_ref()?;
            Some(prior.evaluate(layout, ws))
        }
        Factor::Preintegration { idx } => {
            let pre = &window.preints[*idx];
            let s0 = &ws.states[*idx];
            let s1 = &ws.states[*idx + 1];
            let w = pre.sqrt_information();
            let r = pre.residual(s0, s1, frame).ok()?;
            let (j0, j1) = pre.residual_jacobians(s0, s1, frame).ok()?;
            let rw = w * r;
            let j0w = w * j0;
            let j1w = w * j1;
            let c0 = 15 * *idx;
            let c1 = 15 * (*idx + 1);
            Some(FactorEval {
                residual: DVector::from_column_slice(rw.as_slice()),
                blocks: vec![
                    (c0, DMatrix::from_column_slice(15, 15, j0w.as_slice())),
                    (c1, DMatrix::from_column_slice(15, 15, j1w.as_slice())),
                ],
            })
        }
        Factor::Gnss { node_index, fix_world, lever_arm, sqrt_info } => {
            let s = &ws.states[*node_index];
            let r = sqrt_info * gnss_residual(s, fix_world, lever_arm);
            let (jp, jth) = gnss_jacobian(s, lever_arm);
            let jp = sqrt_info * jp;
            let jth = sqrt_info * jth;
            let c = 15 * *node_index;
            let mut block = DMatrix::zeros(3, 15);
            block.view_mut((0, 0), (3, 3)).copy_from(&jp);
            block.view_mut((0, 3), (3, 3)).copy_from(&jth);
            Some(FactorEval {
                residual: DVector::from_column_slice(r.as_slice()),
                blocks: vec![(c, block)],
            })
        }
        Factor::Visual {
            landmark_id,
            anchor_index,
            target_index,
            anchor_unit_plane,
            obs_unit_plane,
            weight,
            ..
        } => {
            let si = &ws.states[*anchor_index];
            let sj = &ws.states[*target_index];
            let lm_pos = layout
                .landmark_ids
                .iter()
                .position(|id| id == landmark_id)
                .expect("landmark in layout");
            let inv_depth = ws.inv_depths[lm_pos];
            let r = crate::visual::reprojection_residual(
                si,
                sj,
                &ws.extrinsics,
                inv_depth,
                anchor_unit_plane,
                obs_unit_plane,
            )
            .ok()?;
            let jac = crate::visual::reprojection_jacobians(
                si,
                sj,
                &ws.extrinsics,
                inv_depth,
                anchor_unit_plane,
                obs_unit_plane,
            )
            .ok()?;
            let w = *weight;
            let ci = 15 * *anchor_index;
            let cj = 15 * *target_index;
            let mut bi = DMatrix::zeros(2, 15);
            bi.view_mut((0, 0), (2, 6)).copy_from(&(w * jac.j_pose_i));
            let mut bj = DMatrix::zeros(2, 15);
            bj.view_mut((0, 0), (2, 6)).copy_from(&(w * jac.j_pose_j));
            let mut blocks = vec![(ci, bi), (cj, bj)];
            if let Some(ce) = layout.extrinsics_col {
                blocks.push((
                    ce,
                    DMatrix::from_column_slice(2, 6, (w * jac.j_extrinsics).as_slice()),
                ));
            }
            blocks.push((
                layout.landmark_col(*landmark_id),
                DMatrix::from_column_slice(2, 1, (w * jac.j_inv_depth).as_slice()),
            ));
            Some(FactorEval {
                residual: DVector::from_column_slice((w * r).as_slice()),
                blocks,
            })
        }
    }
}

/// Residual-only evaluation (for cost checks during line search).
pub fn residual_only(
    factor: &Factor,
    window: &SlidingWindow,
    layout: &ProblemLayout,
    ws: &WorkingState,
    frame: &WorldFrame,
) -> Option<DVector<f64>> {
    match factor {
        Factor::Prior => window.prior.as_ref().map(|p| p.evaluate(layout, ws).residual),
        Factor::Preintegration { idx } => {
            let pre = &window.preints[*idx];
            let r = pre.residual(&ws.states[*idx], &ws.states[*idx + 1], frame).ok()?;
            Some(DVector::from_column_slice((pre.sqrt_information() * r).as_slice()))
        }
        Factor::Gnss { node_index, fix_world, lever_arm, sqrt_info } => {
            let r = sqrt_info * gnss_residual(&ws.states[*node_index], fix_world, lever_arm);
            Some(DVector::from_column_slice(r.as_slice()))
        }
        Factor::Visual {
            landmark_id,
            anchor_index,
            target_index,
            anchor_unit_plane,
            obs_unit_plane,
            weight,
            ..
        } => {
            let lm_pos = layout.landmark_ids.iter().position(|id| id == landmark_id)?;
            let r = crate::visual::reprojection_residual(
                &ws.states[*anchor_index],
                &ws.states[*target_index],
                &ws.extrinsics,
                ws.inv_depths[lm_pos],
                anchor_unit_plane,
                obs_unit_plane,
            )
            .ok()?;
            Some(DVector::from_column_slice((*weight * r).as_slice()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geodesy::GeodeticPosition;
    use crate::ins::ImuSample;
    use crate::preintegration::{integrate, ImuNoise};
    use crate::visual::{CameraModel, FeatureObservation, Landmark};

    fn camera() -> CameraModel {
        CameraModel {
            fx: 400.0,
            fy: 400.0,
            cx: 320.0,
            cy: 240.0,
            k1: 0.0,
            k2: 0.0,
            p1: 0.0,
            p2: 0.0,
            width: 640,
            height: 480,
        }
    }

    fn static_samples(t0: f64, t1: f64, frame: &WorldFrame) -> Vec<ImuSample> {
        let n = ((t1 - t0) / 0.01).round() as usize;
        (0..=n)
            .map(|i| ImuSample {
                t: t0 + i as f64 * 0.01,
                angular_rate: frame.earth_rate,
                specific_force: -frame.gravity,
            })
            .collect()
    }

    /// Window with `n_nodes` nodes, a valid fix on each GNSS node, and
    /// `landmark_obs` landmarks observed in every keyframe node.
    fn toy_window(frame: &WorldFrame, n_nodes: usize, n_landmarks: usize) -> SlidingWindow {
        let mut window = SlidingWindow::new(crate::visual::Extrinsics::forward_facing(), camera());
        let noise = ImuNoise::default();
        for i in 0..n_nodes {
            let t = i as f64;
            let kind = if i % 2 == 0 { super::super::NodeKind::Keyframe } else { super::super::NodeKind::GnssEpoch };
            let fix = (kind == super::super::NodeKind::GnssEpoch).then(|| super::super::GnssFix {
                t,
                position: frame.origin,
                sigma: Vector3::new(0.02, 0.02, 0.04),
                lever_arm: Vector3::zeros(),
                valid: true,
            });
            let frame_id = (kind == super::super::NodeKind::Keyframe).then_some(i as u64);
            let pre = (i > 0).then(|| {
                integrate(
                    &static_samples(t - 1.0, t, frame),
                    Vector3::zeros(),
                    Vector3::zeros(),
                    &noise,
                )
                .unwrap()
            });
            window
                .push_node(t, kind, frame_id, fix, NavState::identity(t), pre)
                .unwrap();
        }
        let kf_frames: Vec<u64> =
            window.nodes.iter().filter_map(|n| n.frame_id).collect();
        for l in 0..n_landmarks {
            let id = l as u64;
            let mk_obs = |f: u64| FeatureObservation {
                frame_id: f,
                feature_id: id,
                pixel: Vector2::new(320.0, 240.0),
                unit_plane: Vector2::new(0.01 * l as f64, -0.01),
                outlier: false,
            };
            let mut lm = Landmark::new(id, kf_frames[0], mk_obs(kf_frames[0]));
            for f in &kf_frames[1..] {
                lm.observations.push(mk_obs(*f));
            }
            lm.status = LandmarkStatus::Triangulated;
            lm.inv_depth = 0.1;
            window.landmarks.insert(id, lm);
        }
        window
    }

    #[test]
    fn factor_counts_match_enumeration() {
        let frame = WorldFrame::new(GeodeticPosition::from_degrees(30.0, 20.0, 0.0).unwrap());
        let cfg = EstimatorConfig::default();
        for (n_nodes, n_landmarks) in [(2, 0), (4, 3), (7, 5)] {
            let window = toy_window(&frame, n_nodes, n_landmarks);
            let (_, factors) = build_problem(&window, &frame, &cfg);

            // independent enumeration
            let expect_preint = n_nodes - 1;
            let expect_gnss = window
                .nodes
                .iter()
                .filter(|n| n.fix.map(|f| f.valid).unwrap_or(false))
                .count();
            let kf_count = window.nodes.iter().filter(|n| n.frame_id.is_some()).count();
            let expect_visual = n_landmarks * kf_count.saturating_sub(1);

            let count = |k: FactorKind| factors.iter().filter(|f| f.kind() == k).count();
            assert_eq!(count(FactorKind::Preintegration), expect_preint);
            assert_eq!(count(FactorKind::Gnss), expect_gnss);
            assert_eq!(count(FactorKind::Visual), expect_visual);
            assert_eq!(count(FactorKind::Prior), 0);
        }
    }

    #[test]
    fn two_node_window_counting_example() {
        let frame = WorldFrame::new(GeodeticPosition::from_degrees(30.0, 20.0, 0.0).unwrap());
        let cfg = EstimatorConfig::default();
        let window = toy_window(&frame, 2, 0);
        let (_, factors) = build_problem(&window, &frame, &cfg);
        // one preintegration + one GNSS, no prior
        assert_eq!(factors.len(), 2);
    }

    #[test]
    fn anchor_observation_excluded() {
        let frame = WorldFrame::new(GeodeticPosition::from_degrees(30.0, 20.0, 0.0).unwrap());
        let cfg = EstimatorConfig::default();
        // 7 nodes alternating => 4 keyframes; landmark observed in all 4
        let window = toy_window(&frame, 7, 1);
        let (_, factors) = build_problem(&window, &frame, &cfg);
        let visual = factors.iter().filter(|f| f.kind() == FactorKind::Visual).count();
        assert_eq!(visual, 3);
    }
}
