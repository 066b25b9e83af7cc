use gvio::estimator::{GnssMode, Pipeline, PipelineConfig};
use gvio::sim::{self, NoiseSpec, SensorConfig, TrajectoryShape, TrajectorySpec};
use nalgebra::Vector2;

#[test]
#[ignore]
fn transient_trace() {
    let spec = TrajectorySpec {
        shape: TrajectoryShape::FigureEight { half_length: 40.0, half_width: 20.0 },
        speed: 1.5,
        duration: 12.0,
        ..TrajectorySpec::default()
    };
    let ds = sim::generate(
        &spec,
        &NoiseSpec::noise_free(),
        &SensorConfig { landmark_count: 700, ..SensorConfig::default() },
        &sim::default_camera(),
        &gvio::visual::Extrinsics::forward_facing(),
        5,
    );
    let cfg = PipelineConfig { mode: GnssMode::Gvins, ..PipelineConfig::default() };
    let mut pipeline = Pipeline::new(cfg, ds.camera, ds.extrinsics);
    let mut frames: Vec<(f64, u64, Vec<(u64, Vector2<f64>)>)> = Vec::new();
    for row in &ds.features {
        match frames.last_mut() {
            Some((_, id, obs)) if *id == row.frame_id => obs.push((row.feature_id, Vector2::new(row.u, row.v))),
            _ => frames.push((row.t, row.frame_id, vec![(row.feature_id, Vector2::new(row.u, row.v))])),
        }
    }
    let (mut fi, mut gi) = (0usize, 0usize);
    for s in &ds.imu {
        pipeline.push_imu(*s).unwrap();
        while gi < ds.gnss.len() && ds.gnss[gi].t <= s.t {
            pipeline.push_gnss(ds.gnss[gi]).unwrap();
            gi += 1;
        }
        while fi < frames.len() && frames[fi].0 <= s.t {
            let (t, id, obs) = frames[fi].clone();
            pipeline.push_frame(t, id, obs).unwrap();
            fi += 1;
        }
        // after each optimization window, print yaw error of in-window nodes
        if (s.t * 10.0).round() / 10.0 == s.t && s.t > 5.4 && s.t < 7.2 {
            if let Some(w) = pipeline.window() {
                let errs: Vec<String> = w
                    .nodes
                    .iter()
                    .map(|n| {
                        let idx = (n.t * 200.0).round() as usize;
                        let truth = &ds.truth[idx.min(ds.truth.len() - 1)];
                        let e = (truth.q_wb.inverse() * n.state.q_wb).scaled_axis();
                        format!("{:?}@{:.1}:{:+.4}", n.kind, n.t, e.z.to_degrees())
                    })
                    .collect();
                println!("t={:.1} bgz={:+.2e} | {}", s.t, w.nodes.last().unwrap().state.bg.z, errs.join(" "));
            }
        }
    }
}
