//! End-to-end pipeline tests on synthetic datasets.

use gvio::estimator::{GnssMode, Pipeline, PipelineConfig};
use gvio::sim::{self, NoiseSpec, SensorConfig, TrajectoryShape, TrajectorySpec};
use nalgebra::Vector2;

fn run_pipeline(ds: &sim::Dataset, mode: GnssMode) -> Pipeline {
    let cfg = PipelineConfig { mode, ..PipelineConfig::default() };
    let mut pipeline = Pipeline::new(cfg, ds.camera, ds.extrinsics);

    // merge measurement streams by time, IMU first at equal stamps
    let mut fi = 0usize;
    let mut gi = 0usize;
    let mut frames: Vec<(f64, u64, Vec<(u64, Vector2<f64>)>)> = Vec::new();
    for row in &ds.features {
        match frames.last_mut() {
            Some((t, id, obs)) if *id == row.frame_id => {
                assert_eq!(*t, row.t);
                obs.push((row.feature_id, Vector2::new(row.u, row.v)));
            }
            _ => frames.push((row.t, row.frame_id, vec![(row.feature_id, Vector2::new(row.u, row.v))])),
        }
    }
    for s in &ds.imu {
        pipeline.push_imu(*s).expect("imu");
        while gi < ds.gnss.len() && ds.gnss[gi].t <= s.t {
            pipeline.push_gnss(ds.gnss[gi]).expect("gnss");
            gi += 1;
        }
        while fi < frames.len() && frames[fi].0 <= s.t {
            let (t, id, obs) = frames[fi].clone();
            pipeline.push_frame(t, id, obs).expect("frame");
            fi += 1;
        }
    }
    pipeline.finalize();
    pipeline
}

fn position_rmse_vs_truth(poses: &[gvio::estimator::PoseRecord], ds: &sim::Dataset, t_min: f64) -> f64 {
    let imu_rate = 200.0;
    let mut sum = 0.0;
    let mut n = 0usize;
    for p in poses {
        if p.t < t_min {
            continue;
        }
        let idx = (p.t * imu_rate).round() as usize;
        if idx >= ds.truth.len() || (ds.truth[idx].t - p.t).abs() > 1e-6 {
            continue;
        }
        sum += (p.state.p_wb - ds.truth[idx].p_wb).norm_squared();
        n += 1;
    }
    assert!(n > 10, "too few comparable poses: {}", n);
    (sum / n as f64).sqrt()
}

#[test]
fn noise_free_gvins_recovers_truth() {
    let spec = TrajectorySpec {
        shape: TrajectoryShape::FigureEight { half_length: 40.0, half_width: 20.0 },
        speed: 1.5,
        duration: 40.0,
        ..TrajectorySpec::default()
    };
    let sensors = SensorConfig { landmark_count: 600, ..SensorConfig::default() };
    let ds = sim::generate(
        &spec,
        &NoiseSpec::noise_free(),
        &sensors,
        &sim::default_camera(),
        &gvio::visual::Extrinsics::forward_facing(),
        17,
    );
    let pipeline = run_pipeline(&ds, GnssMode::Gvins);
    assert!(pipeline.is_initialized(), "pipeline failed to initialize");
    let init_t = pipeline.initialization_time().unwrap();
    assert!(init_t <= 7.0, "initialization took too long: {}", init_t);

    let rmse_nodes = position_rmse_vs_truth(&pipeline.node_poses, &ds, init_t + 1.0);
    assert!(rmse_nodes < 1e-3, "node-state RMSE {} m", rmse_nodes);
    let rmse_rt = position_rmse_vs_truth(&pipeline.realtime_poses, &ds, init_t + 1.0);
    assert!(rmse_rt < 2e-3, "real-time RMSE {} m", rmse_rt);

    // window stayed within capacity and diagnostics look sane
    let window = pipeline.window().unwrap();
    assert!(window.persistent_count() <= 10);
    assert!(pipeline.diagnostics.iter().all(|d| !d.diverged));
    assert!(pipeline.diagnostics.iter().any(|d| d.visual_factors > 0));
    assert!(pipeline.diagnostics.iter().any(|d| d.gnss_factors > 0));
}

#[test]
fn vins_after_init_uses_no_gnss_factors_after_bootstrap() {
    let spec = TrajectorySpec {
        shape: TrajectoryShape::FigureEight { half_length: 40.0, half_width: 20.0 },
        speed: 1.5,
        duration: 30.0,
        ..TrajectorySpec::default()
    };
    let ds = sim::generate(
        &spec,
        &NoiseSpec::noise_free(),
        &SensorConfig { landmark_count: 600, ..SensorConfig::default() },
        &sim::default_camera(),
        &gvio::visual::Extrinsics::forward_facing(),
        23,
    );
    let pipeline = run_pipeline(&ds, GnssMode::VinsAfterInit);
    assert!(pipeline.is_initialized());
    let init_t = pipeline.initialization_time().unwrap();

    // after the bootstrap, no optimization carries GNSS factors
    for d in pipeline.diagnostics.iter().filter(|d| d.t > init_t + 1e-6) {
        assert_eq!(d.gnss_factors, 0, "GNSS factor used at t={}", d.t);
    }
    let rmse = position_rmse_vs_truth(&pipeline.node_poses, &ds, init_t + 1.0);
    assert!(rmse < 0.05, "VIO-only noise-free RMSE {} m", rmse);
}
