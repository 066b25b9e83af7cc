//! Event-driven estimation pipeline: measurements go in (IMU, camera feature
//! frames, GNSS fixes), real-time poses and optimized node states come out.
//!
//! The pipeline owns the initializer, the mechanizer and the sliding window.
//! Frame and GNSS events are queued until the IMU stream has passed them, so
//! callers may interleave pushes in any reasonable order.

use nalgebra::Vector2;
use serde::Serialize;
use std::collections::{BTreeMap, VecDeque};

use crate::geodesy::WorldFrame;
use crate::ins::{mechanize_step, ImuSample, Mechanizer, NavState};
use crate::preintegration::integrate;
use crate::visual::{
    camera_pose, compensated_parallax, keyframe_decision, predict_observation, triangulate,
    CameraModel, Extrinsics, FeatureObservation, FrameDecision, Landmark, LandmarkStatus,
    TriangulationOutcome,
};

use super::init::{InitializationStatus, Initializer, InitializerConfig};
use super::marginalization::marginalize_oldest;
use super::{
    optimize, EstimatorConfig, EstimatorError, GnssFix, NodeKind, OptimizationDiagnostics,
    SlidingWindow,
};

/// How GNSS is used after initialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GnssMode {
    /// Fuse every valid fix (tightly coupled GNSS-visual-inertial).
    Gvins,
    /// GNSS only bootstraps the system; afterwards pure visual-inertial.
    VinsAfterInit,
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub estimator: EstimatorConfig,
    pub initializer: InitializerConfig,
    pub mode: GnssMode,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            estimator: EstimatorConfig::default(),
            initializer: InitializerConfig::default(),
            mode: GnssMode::Gvins,
        }
    }
}

/// Final bookkeeping state of one feature observation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ObservationDisposition {
    /// Participated in the estimate as an inlier.
    Used,
    /// Rejected at entry by the INS-prediction gate.
    GateRejected,
    /// Removed from an optimization by the chi-square test.
    Chi2Gated,
    /// Flagged by depth/reprojection culling.
    Culled,
    /// Never became part of a triangulated landmark.
    NeverUsed,
}

/// Timestamped pose output.
#[derive(Debug, Clone, Copy)]
pub struct PoseRecord {
    pub t: f64,
    pub state: NavState,
}

#[derive(Debug)]
enum PendingEvent {
    Frame { t: f64, frame_id: u64, observations: Vec<(u64, Vector2<f64>)> },
    Gnss(GnssFix),
}

impl PendingEvent {
    fn t(&self) -> f64 {
        match self {
            PendingEvent::Frame { t, .. } => *t,
            PendingEvent::Gnss(f) => f.t,
        }
    }
}

#[derive(Debug)]
struct Running {
    frame: WorldFrame,
    window: SlidingWindow,
    mech: Mechanizer,
    last_keyframe_t: f64,
    last_keyframe_frame_id: Option<u64>,
    rt_prev_sample: Option<ImuSample>,
    rt_state: NavState,
}

#[derive(Debug)]
enum Phase {
    Initializing(Initializer),
    Running(Box<Running>),
}

/// The full estimation pipeline.
pub struct Pipeline {
    cfg: PipelineConfig,
    camera: CameraModel,
    extrinsics: Extrinsics,
    phase: Phase,
    pending: VecDeque<PendingEvent>,
    next_feature_landmark: BTreeMap<u64, u64>,
    pub diagnostics: Vec<OptimizationDiagnostics>,
    pub realtime_poses: Vec<PoseRecord>,
    pub node_poses: Vec<PoseRecord>,
    dispositions: BTreeMap<(u64, u64), ObservationDisposition>,
    chi2_ever: std::collections::BTreeSet<(u64, u64)>,
    init_done_t: Option<f64>,
}


impl Pipeline {
    pub fn new(cfg: PipelineConfig, camera: CameraModel, extrinsics: Extrinsics) -> Self {
        let initializer = Initializer::new(cfg.initializer.clone(), cfg.estimator.clone());
        Self {
            cfg,
            camera,
            extrinsics,
            phase: Phase::Initializing(initializer),
            pending: VecDeque::new(),
            next_feature_landmark: BTreeMap::new(),
            diagnostics: Vec::new(),
            realtime_poses: Vec::new(),
            node_poses: Vec::new(),
            dispositions: BTreeMap::new(),
            chi2_ever: std::collections::BTreeSet::new(),
            init_done_t: None,
        }
    }

    pub fn is_initialized(&self) -> bool {
        matches!(self.phase, Phase::Running(_))
    }

    pub fn initialization_time(&self) -> Option<f64> {
        self.init_done_t
    }

    /// World frame, available once initialized.
    pub fn world_frame(&self) -> Option<&WorldFrame> {
        match &self.phase {
            Phase::Running(r) => Some(&r.frame),
            _ => None,
        }
    }

    pub fn window(&self) -> Option<&SlidingWindow> {
        match &self.phase {
            Phase::Running(r) => Some(&r.window),
            _ => None,
        }
    }

    /// Latest published real-time state.
    pub fn current_pose(&self) -> Option<NavState> {
        match &self.phase {
            Phase::Running(r) => Some(r.rt_state),
            _ => None,
        }
    }

    pub fn dispositions(&self) -> &BTreeMap<(u64, u64), ObservationDisposition> {
        &self.dispositions
    }

    pub fn push_imu(&mut self, sample: ImuSample) -> Result<(), EstimatorError> {
        match &mut self.phase {
            Phase::Initializing(init) => {
                init.push_imu(sample);
                self.try_finish_init()?;
            }
            Phase::Running(r) => {
                r.mech.push_imu(sample)?;
                if let Some(prev) = r.rt_prev_sample {
                    if sample.t > r.rt_state.t {
                        let prev = if prev.t < r.rt_state.t {
                            // feedback moved the state past the previous sample
                            ImuSample { t: r.rt_state.t, ..prev }
                        } else {
                            prev
                        };
                        r.rt_state = mechanize_step(&r.rt_state, &prev, &sample, &r.frame)?;
                        self.realtime_poses.push(PoseRecord { t: sample.t, state: r.rt_state });
                    }
                }
                r.rt_prev_sample = Some(sample);
            }
        }
        self.drain_pending()
    }

    pub fn push_gnss(&mut self, fix: GnssFix) -> Result<(), EstimatorError> {
        match &mut self.phase {
            Phase::Initializing(init) => {
                init.push_gnss(fix);
                self.try_finish_init()?;
                Ok(())
            }
            Phase::Running(_) => {
                if self.cfg.mode == GnssMode::VinsAfterInit {
                    return Ok(());
                }
                self.pending.push_back(PendingEvent::Gnss(fix));
                self.drain_pending()
            }
        }
    }

    /// Feed one camera frame's tracked features (feature id and raw pixel).
    pub fn push_frame(
        &mut self,
        t: f64,
        frame_id: u64,
        observations: Vec<(u64, Vector2<f64>)>,
    ) -> Result<(), EstimatorError> {
        if matches!(self.phase, Phase::Initializing(_)) {
            // the visual pipeline starts after the INS is initialized
            return Ok(());
        }
        self.pending.push_back(PendingEvent::Frame { t, frame_id, observations });
        self.drain_pending()
    }

    /// Flush dispositions and remaining node states at the end of a run.
    pub fn finalize(&mut self) {
        if let Phase::Running(r) = &mut self.phase {
            for node in &r.window.nodes {
                self.node_poses.push(PoseRecord { t: node.t, state: node.state });
            }
            let landmarks: Vec<Landmark> = r.window.landmarks.values().cloned().collect();
            for lm in landmarks {
                Self::record_landmark_dispositions(
                    &mut self.dispositions,
                    &self.chi2_ever,
                    &lm,
                );
            }
            self.node_poses.sort_by(|a, b| a.t.total_cmp(&b.t));
        }
    }

    fn try_finish_init(&mut self) -> Result<(), EstimatorError> {
        let Phase::Initializing(init) = &mut self.phase else { return Ok(()) };
        match init.try_initialize(self.extrinsics, self.camera)? {
            InitializationStatus::NeedMoreData => Ok(()),
            InitializationStatus::Pending(_) => Ok(()), // caller may time out
            InitializationStatus::Ready(mut out) => {
                // in VIO-after-bootstrap mode the GNSS information of the
                // initialization span is compressed into the prior so that no
                // GNSS factor survives the handoff
                if self.cfg.mode == GnssMode::VinsAfterInit {
                    while out.window.nodes.len() > 1 {
                        marginalize_oldest(&mut out.window, &out.frame)?;
                    }
                    for node in &mut out.window.nodes {
                        node.fix = None;
                    }
                }
                let newest = out.window.newest().expect("init window non-empty").clone();
                let mut mech = Mechanizer::new(
                    out.frame,
                    newest.state,
                    self.cfg.estimator.max_imu_gap,
                );
                let mut rt_prev = None;
                for s in &out.imu {
                    if s.t >= newest.t - 0.02 {
                        mech.push_imu(*s)?;
                    }
                    if s.t <= newest.t {
                        rt_prev = Some(*s);
                    }
                }
                self.init_done_t = Some(newest.t);
                self.phase = Phase::Running(Box::new(Running {
                    frame: out.frame,
                    window: out.window,
                    mech,
                    last_keyframe_t: newest.t,
                    last_keyframe_frame_id: None,
                    rt_prev_sample: rt_prev,
                    rt_state: newest.state,
                }));
                Ok(())
            }
        }
    }

    /// Explicit initialization status, for callers that need to distinguish
    /// "pending" from "still collecting".
    pub fn initialization_blocked(&mut self) -> Result<Option<String>, EstimatorError> {
        match &mut self.phase {
            Phase::Initializing(init) => {
                match init.try_initialize(self.extrinsics, self.camera)? {
                    InitializationStatus::Pending(why) => Ok(Some(why)),
                    _ => Ok(None),
                }
            }
            _ => Ok(None),
        }
    }

    fn drain_pending(&mut self) -> Result<(), EstimatorError> {
        loop {
            let ready = {
                let Phase::Running(r) = &self.phase else { return Ok(()) };
                let newest_imu = r.mech.buffered_samples().last().map(|s| s.t);
                match (self.pending.front(), newest_imu) {
                    (Some(ev), Some(t_imu)) => ev.t() <= t_imu,
                    _ => false,
                }
            };
            if !ready {
                return Ok(());
            }
            let event = self.pending.pop_front().expect("checked nonempty");
            match event {
                PendingEvent::Gnss(fix) => self.handle_gnss(fix)?,
                PendingEvent::Frame { t, frame_id, observations } => {
                    self.handle_frame(t, frame_id, observations)?
                }
            }
        }
    }

    fn handle_gnss(&mut self, fix: GnssFix) -> Result<(), EstimatorError> {
        let Phase::Running(r) = &mut self.phase else { return Ok(()) };
        let newest_t = r.window.newest().expect("window non-empty").t;
        if fix.t <= newest_t {
            // stale epoch (can happen when a frame landed on the same instant)
            return Ok(());
        }
        Self::insert_node(r, &self.cfg.estimator, fix.t, NodeKind::GnssEpoch, None, Some(fix))?;
        self.optimize_cycle()
    }

    fn insert_node(
        r: &mut Running,
        cfg: &EstimatorConfig,
        t: f64,
        kind: NodeKind,
        frame_id: Option<u64>,
        fix: Option<GnssFix>,
    ) -> Result<(), EstimatorError> {
        let newest = r.window.newest().expect("window non-empty").clone();
        let prior_state = r.mech.pose_at(t)?;
        let samples = r.mech.samples_between(newest.t, t).ok_or_else(|| {
            EstimatorError::ImuCoverage(format!("node interval [{}, {}]", newest.t, t))
        })?;
        let pre = integrate(&samples, newest.state.bg, newest.state.ba, &cfg.imu_noise)?;
        r.window.push_node(t, kind, frame_id, fix, prior_state, Some(pre))?;
        Ok(())
    }

    fn handle_frame(
        &mut self,
        t: f64,
        frame_id: u64,
        observations: Vec<(u64, Vector2<f64>)>,
    ) -> Result<(), EstimatorError> {
        let cfg = self.cfg.estimator.clone();
        let Phase::Running(r) = &mut self.phase else { return Ok(()) };
        let newest_t = r.window.newest().expect("window non-empty").t;
        if t <= newest_t {
            return Ok(());
        }
        let prior_state = r.mech.pose_at(t)?;

        // undistort and gate against INS-predicted positions
        let mut accepted: Vec<(u64, Vector2<f64>, Vector2<f64>)> = Vec::new();
        for (feature_id, pixel) in &observations {
            let Ok(unit_plane) = self.camera.undistort(pixel) else {
                continue;
            };
            if let Some(lm_id) = self.next_feature_landmark.get(feature_id) {
                if let Some(lm) = r.window.landmarks.get(lm_id) {
                    if lm.status == LandmarkStatus::Triangulated {
                        if let Some(anchor_idx) = r.window.anchor_index(lm) {
                            let anchor_state = r.window.nodes[anchor_idx].state;
                            let gate_ok = match predict_observation(
                                &anchor_state,
                                &prior_state,
                                &r.window.extrinsics,
                                lm,
                                &self.camera,
                            ) {
                                Ok(pred) => {
                                    (pred - pixel).norm() <= cfg.frontend.track_gate_px
                                }
                                Err(_) => false,
                            };
                            if !gate_ok {
                                self.dispositions
                                    .insert((frame_id, *feature_id), ObservationDisposition::GateRejected);
                                continue;
                            }
                        }
                    }
                }
            }
            accepted.push((*feature_id, *pixel, unit_plane));
        }

        // rotation-compensated parallax against the last keyframe
        let decision = match r.last_keyframe_frame_id {
            None => FrameDecision::Keyframe,
            Some(kf_frame) => {
                let kf_idx = r.window.node_index_by_frame(kf_frame);
                let mut parallaxes: Vec<f64> = Vec::new();
                if let Some(kf_idx) = kf_idx {
                    let kf_state = r.window.nodes[kf_idx].state;
                    let (q_wc_kf, _) = camera_pose(&kf_state, &r.window.extrinsics);
                    let (q_wc_cur, _) = camera_pose(&prior_state, &r.window.extrinsics);
                    let r_cur_kf = q_wc_cur.inverse() * q_wc_kf;
                    for (feature_id, _, unit_plane) in &accepted {
                        let Some(lm_id) = self.next_feature_landmark.get(feature_id) else {
                            continue;
                        };
                        let Some(lm) = r.window.landmarks.get(lm_id) else { continue };
                        let Some(kf_obs) = lm.observation(kf_frame) else { continue };
                        parallaxes.push(compensated_parallax(
                            &self.camera,
                            &kf_obs.unit_plane,
                            unit_plane,
                            &r_cur_kf,
                        ));
                    }
                }
                if parallaxes.is_empty() {
                    FrameDecision::Keyframe
                } else {
                    let avg = parallaxes.iter().sum::<f64>() / parallaxes.len() as f64;
                    keyframe_decision(avg, t - r.last_keyframe_t, &cfg.frontend)
                }
            }
        };
        if decision == FrameDecision::Skip {
            return Ok(());
        }

        // commit observations; new landmarks only from keyframes
        for (feature_id, pixel, unit_plane) in &accepted {
            let obs = FeatureObservation {
                frame_id,
                feature_id: *feature_id,
                pixel: *pixel,
                unit_plane: *unit_plane,
                outlier: false,
            };
            match self.next_feature_landmark.get(feature_id) {
                Some(lm_id) if r.window.landmarks.contains_key(lm_id) => {
                    r.window.landmarks.get_mut(lm_id).expect("checked").observations.push(obs);
                }
                _ if decision == FrameDecision::Keyframe => {
                    let lm_id = *feature_id;
                    self.next_feature_landmark.insert(*feature_id, lm_id);
                    r.window.landmarks.insert(lm_id, Landmark::new(lm_id, frame_id, obs));
                }
                _ => {}
            }
        }

        let kind = match decision {
            FrameDecision::Keyframe => NodeKind::Keyframe,
            FrameDecision::ObservationFrame => NodeKind::ObservationFrame,
            FrameDecision::Skip => unreachable!(),
        };
        Self::insert_node(r, &cfg, t, kind, Some(frame_id), None)?;

        if decision == FrameDecision::Keyframe {
            r.last_keyframe_t = t;
            r.last_keyframe_frame_id = Some(frame_id);
            // triangulate candidates that gained parallax with this keyframe
            let candidate_ids: Vec<u64> = r
                .window
                .landmarks
                .values()
                .filter(|lm| {
                    lm.status == LandmarkStatus::Candidate
                        && lm.observation(frame_id).is_some()
                        && lm.observations.len() >= 2
                })
                .map(|lm| lm.id)
                .collect();
            for id in candidate_ids {
                let Some(anchor_idx) =
                    r.window.anchor_index(&r.window.landmarks[&id])
                else {
                    continue;
                };
                let anchor_state = r.window.nodes[anchor_idx].state;
                let ext = r.window.extrinsics;
                let lm = r.window.landmarks.get_mut(&id).expect("landmark");
                let _outcome = triangulate(
                    lm,
                    &anchor_state,
                    &prior_state,
                    frame_id,
                    &ext,
                    &self.camera,
                    &cfg.frontend,
                );
                debug_assert!(matches!(
                    _outcome,
                    TriangulationOutcome::Accepted
                        | TriangulationOutcome::ParallaxTooSmall
                        | TriangulationOutcome::Degenerate
                        | TriangulationOutcome::DepthRejected
                ));
            }
        }

        self.optimize_cycle()
    }

    fn optimize_cycle(&mut self) -> Result<(), EstimatorError> {
        let cfg = self.cfg.estimator.clone();
        let Phase::Running(r) = &mut self.phase else { return Ok(()) };

        let (diag, chi2_removed) = optimize(&mut r.window, &r.frame, &cfg);
        self.diagnostics.push(diag);
        self.chi2_ever.extend(chi2_removed);

        // observation frames are single-use: drop them (factors are dropped,
        // never marginalized)
        while let Some(idx) = r.window.nodes.iter().position(|n| !n.is_persistent()) {
            let node = r.window.nodes[idx].clone();
            self.node_poses.push(PoseRecord { t: node.t, state: node.state });
            r.window.drop_node(idx);
        }

        // marginalize down to capacity
        while r.window.persistent_count() > cfg.window_capacity && r.window.nodes.len() >= 2 {
            let node0 = r.window.nodes[0].clone();
            self.node_poses.push(PoseRecord { t: node0.t, state: node0.state });
            Self::prepare_landmarks_for_removal(
                r,
                &cfg,
                &node0,
                &mut self.dispositions,
                &self.chi2_ever,
            );
            marginalize_oldest(&mut r.window, &r.frame)?;
        }
        r.window.check_invariants();

        // feedback: newest optimized state re-anchors the mechanization
        let newest = r.window.newest().expect("window non-empty").clone();
        r.mech.reanchor(newest.state);
        let rt_t = r.rt_prev_sample.map(|s| s.t).unwrap_or(newest.t).max(newest.t);
        r.rt_state = r.mech.pose_at(rt_t)?;
        Ok(())
    }

    fn record_landmark_dispositions(
        dispositions: &mut BTreeMap<(u64, u64), ObservationDisposition>,
        chi2_ever: &std::collections::BTreeSet<(u64, u64)>,
        lm: &Landmark,
    ) {
        for obs in &lm.observations {
            let key = (obs.frame_id, obs.feature_id);
            let d = if obs.outlier {
                ObservationDisposition::Culled
            } else if chi2_ever.contains(&key) {
                ObservationDisposition::Chi2Gated
            } else if lm.status == LandmarkStatus::Triangulated {
                ObservationDisposition::Used
            } else {
                ObservationDisposition::NeverUsed
            };
            dispositions.insert(key, d);
        }
    }

    /// Re-anchor or drop landmarks referencing the node that is about to be
    /// marginalized, and record dispositions of everything that leaves.
    fn prepare_landmarks_for_removal(
        r: &mut Running,
        cfg: &EstimatorConfig,
        node0: &super::TimeNode,
        dispositions: &mut BTreeMap<(u64, u64), ObservationDisposition>,
        chi2_ever: &std::collections::BTreeSet<(u64, u64)>,
    ) {
        let Some(frame_id) = node0.frame_id else { return };
        let ids: Vec<u64> = r.window.landmarks.keys().copied().collect();
        for id in ids {
            let lm = &r.window.landmarks[&id];
            if lm.ref_keyframe != frame_id {
                continue;
            }
            // record the departing observation
            if let Some(obs) = lm.observation(frame_id) {
                let key = (obs.frame_id, obs.feature_id);
                let d = if obs.outlier {
                    ObservationDisposition::Culled
                } else if chi2_ever.contains(&key) {
                    ObservationDisposition::Chi2Gated
                } else if lm.status == LandmarkStatus::Triangulated {
                    ObservationDisposition::Used
                } else {
                    ObservationDisposition::NeverUsed
                };
                dispositions.insert(key, d);
            }

            let lm = r.window.landmarks.get_mut(&id).expect("landmark");
            lm.observations.retain(|o| o.frame_id != frame_id);

            // next observing keyframe that is still in the window becomes the
            // new anchor; the landmark is re-triangulated from there
            let next_anchor = lm
                .observations
                .iter()
                .filter(|o| !o.outlier)
                .map(|o| o.frame_id)
                .find(|f| r.window.nodes.iter().any(|n| n.frame_id == Some(*f)));
            match next_anchor {
                None => {
                    let lm = r.window.landmarks.remove(&id).expect("landmark");
                    Self::record_landmark_dispositions(dispositions, chi2_ever, &lm);
                }
                Some(new_anchor) => {
                    lm.ref_keyframe = new_anchor;
                    if lm.status == LandmarkStatus::Triangulated {
                        lm.status = LandmarkStatus::Candidate;
                        let latest_frame = lm
                            .observations
                            .iter()
                            .filter(|o| !o.outlier)
                            .map(|o| o.frame_id)
                            .filter(|f| {
                                *f != new_anchor
                                    && r.window.nodes.iter().any(|n| n.frame_id == Some(*f))
                            })
                            .max();
                        if let (Some(anchor_idx), Some(latest_frame)) =
                            (r.window.node_index_by_frame(new_anchor), latest_frame)
                        {
                            let anchor_state = r.window.nodes[anchor_idx].state;
                            let latest_state = r.window.nodes
                                [r.window.node_index_by_frame(latest_frame).expect("in window")]
                            .state;
                            let ext = r.window.extrinsics;
                            let lm = r.window.landmarks.get_mut(&id).expect("landmark");
                            let _ = triangulate(
                                lm,
                                &anchor_state,
                                &latest_state,
                                latest_frame,
                                &ext,
                                &r.window.camera,
                                &cfg.frontend,
                            );
                        }
                    }
                }
            }
        }
    }
}

impl std::fmt::Debug for Pipeline {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Pipeline")
            .field("initialized", &self.is_initialized())
            .field("pending", &self.pending.len())
            .field("diagnostics", &self.diagnostics.len())
            .finish()
    }
}
