//! Command-line front end: dataset simulation, estimator runs and
//! trajectory evaluation.

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use nalgebra::Vector2;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use gvio::config::Config;
use gvio::estimator::{GnssMode, Pipeline};
use gvio::eval::{self, AlignmentMode};
use gvio::io as gio;
use gvio::sim;

#[derive(Parser)]
#[command(name = "gvio", version, about = "GNSS-visual-inertial trajectory estimation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from a trajectory/noise spec
    Simulate {
        /// Spec file (flat key = value)
        #[arg(long)]
        spec: PathBuf,
        /// Output dataset directory
        #[arg(long)]
        out: PathBuf,
        /// Random seed (overrides the spec's `seed` key)
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the estimator on a dataset directory
    Run {
        /// Run configuration file
        #[arg(long)]
        config: PathBuf,
        /// Estimation mode: gvins | vins_after_init (overrides the config)
        #[arg(long)]
        mode: Option<String>,
        /// Output directory (overrides the config's `output_dir`)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate an estimated trajectory against ground truth
    Evaluate {
        /// Estimated trajectory (TUM format)
        #[arg(long)]
        est: PathBuf,
        /// Ground-truth trajectory (TUM format)
        #[arg(long)]
        truth: PathBuf,
        /// Alignment: none | yaw_only | se3
        #[arg(long, default_value = "none")]
        mode: String,
        /// Write the metric report JSON here (stdout otherwise)
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated sub-sequence lengths in meters
        #[arg(long, default_value = "50,100,150,200")]
        lengths: String,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Simulate { spec, out, seed } => cmd_simulate(&spec, &out, seed),
        Command::Run { config, mode, out } => cmd_run(&config, mode.as_deref(), out.as_deref()),
        Command::Evaluate { est, truth, mode, out, lengths } => {
            cmd_evaluate(&est, &truth, &mode, out.as_deref(), &lengths)
        }
    }
}

fn cmd_simulate(spec_path: &Path, out: &Path, seed_flag: Option<u64>) -> Result<()> {
    let cfg = Config::from_file(spec_path)?;
    let (spec, noise, sensors) = cfg.simulation()?;
    let camera = cfg.camera()?;
    let extrinsics = cfg.extrinsics()?;
    let seed = seed_flag.unwrap_or(cfg.u64_or("seed", 0)?);

    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let ds = sim::generate(&spec, &noise, &sensors, &camera, &extrinsics, seed);

    gio::write_imu_csv(&out.join("imu.csv"), &ds.imu)?;
    gio::write_features_csv(&out.join("features.csv"), &ds.features)?;
    gio::write_gnss_csv(&out.join("gnss.csv"), &ds.gnss)?;
    let truth_poses: Vec<_> = ds.truth.iter().map(gio::nav_state_to_pose).collect();
    gio::write_tum(&out.join("truth.tum"), &truth_poses)?;

    let mut w = fs::File::create(out.join("outliers.csv"))?;
    for (frame, feature) in &ds.injected_outliers {
        writeln!(w, "{frame},{feature}")?;
    }

    // camera geometry travels with the dataset
    let q = extrinsics.q_bc.quaternion();
    fs::write(
        out.join("camera.conf"),
        format!(
            "cam_fx = {}\ncam_fy = {}\ncam_cx = {}\ncam_cy = {}\n\
             cam_k1 = {}\ncam_k2 = {}\ncam_p1 = {}\ncam_p2 = {}\n\
             cam_width = {}\ncam_height = {}\n\
             ext_q_bc = {},{},{},{}\next_p_bc = {},{},{}\n\
             gnss_lever_arm = {},{},{}\n",
            camera.fx,
            camera.fy,
            camera.cx,
            camera.cy,
            camera.k1,
            camera.k2,
            camera.p1,
            camera.p2,
            camera.width,
            camera.height,
            q.w,
            q.i,
            q.j,
            q.k,
            extrinsics.p_bc.x,
            extrinsics.p_bc.y,
            extrinsics.p_bc.z,
            sensors.lever_arm[0],
            sensors.lever_arm[1],
            sensors.lever_arm[2],
        ),
    )?;

    let meta = serde_json::json!({
        "seed": seed,
        "trajectory": spec,
        "noise": noise,
        "sensors": sensors,
        "imu_samples": ds.imu.len(),
        "feature_rows": ds.features.len(),
        "gnss_fixes": ds.gnss.len(),
        "injected_outliers": ds.injected_outliers.len(),
    });
    fs::write(out.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;

    println!(
        "dataset written to {}: {} IMU samples, {} feature rows, {} fixes (seed {})",
        out.display(),
        ds.imu.len(),
        ds.features.len(),
        ds.gnss.len(),
        seed
    );
    Ok(())
}

fn load_run_config(config_path: &Path) -> Result<(Config, PathBuf)> {
    let run_cfg = Config::from_file(config_path)?;
    let dataset_dir = run_cfg
        .get("dataset_dir")
        .map(PathBuf::from)
        .ok_or_else(|| anyhow::anyhow!("config is missing `dataset_dir`"))?;
    let dataset_dir = if dataset_dir.is_relative() {
        run_cfg.base_dir.join(dataset_dir)
    } else {
        dataset_dir
    };
    // dataset camera geometry forms the base layer; the run config overrides
    let cam_conf = dataset_dir.join("camera.conf");
    let mut cfg =
        if cam_conf.exists() { Config::from_file(&cam_conf)? } else { Config::from_text("")? };
    cfg.merge(&run_cfg);
    Ok((cfg, dataset_dir))
}

fn cmd_run(config_path: &Path, mode_flag: Option<&str>, out_flag: Option<&Path>) -> Result<()> {
    let (mut cfg, dataset_dir) = load_run_config(config_path)?;
    if let Some(mode) = mode_flag {
        cfg.set("mode", mode);
    }
    let pipeline_cfg = cfg.pipeline()?;
    let camera = cfg.camera()?;
    let extrinsics = cfg.extrinsics()?;
    let lever = cfg.lever_arm()?;
    let time_offset = cfg.camera_time_offset()?;
    let init_timeout = cfg.f64_or("init_timeout", 30.0)?;

    let imu_path = dataset_dir.join(cfg.get("imu_file").unwrap_or("imu.csv"));
    let features_path = dataset_dir.join(cfg.get("features_file").unwrap_or("features.csv"));
    let gnss_path = dataset_dir.join(cfg.get("gnss_file").unwrap_or("gnss.csv"));
    for (path, what) in
        [(&imu_path, "IMU file"), (&features_path, "feature file"), (&gnss_path, "GNSS file")]
    {
        if !path.exists() {
            bail!("{} {} does not exist", what, path.display());
        }
    }

    let imu = gio::read_imu_csv(&imu_path)?;
    let mut features = gio::read_features_csv(&features_path)?;
    for row in &mut features {
        row.t += time_offset;
    }
    let gnss = gio::read_gnss_csv(&gnss_path, lever)?;
    if imu.is_empty() {
        bail!("IMU file {} is empty", imu_path.display());
    }

    let out_dir = out_flag
        .map(Path::to_path_buf)
        .or_else(|| {
            cfg.get("output_dir").map(|d| {
                let p = PathBuf::from(d);
                if p.is_relative() {
                    cfg.base_dir.join(p)
                } else {
                    p
                }
            })
        })
        .unwrap_or_else(|| {
            dataset_dir.join(match pipeline_cfg.mode {
                GnssMode::Gvins => "run_gvins",
                GnssMode::VinsAfterInit => "run_vins",
            })
        });
    fs::create_dir_all(&out_dir)?;

    // frame grouping: consecutive rows of one frame id
    let mut frames: Vec<(f64, u64, Vec<(u64, Vector2<f64>)>)> = Vec::new();
    for row in &features {
        match frames.last_mut() {
            Some((_, id, obs)) if *id == row.frame_id => {
                obs.push((row.feature_id, Vector2::new(row.u, row.v)))
            }
            _ => frames.push((
                row.t,
                row.frame_id,
                vec![(row.feature_id, Vector2::new(row.u, row.v))],
            )),
        }
    }

    let mut pipeline = Pipeline::new(pipeline_cfg.clone(), camera, extrinsics);
    let first_fix_t = gnss.iter().find(|f| f.valid).map(|f| f.t);
    let mut fi = 0usize;
    let mut gi = 0usize;
    for s in &imu {
        pipeline.push_imu(*s)?;
        while gi < gnss.len() && gnss[gi].t <= s.t {
            pipeline.push_gnss(gnss[gi])?;
            gi += 1;
        }
        while fi < frames.len() && frames[fi].0 <= s.t {
            let (t, id, obs) = frames[fi].clone();
            pipeline.push_frame(t, id, obs)?;
            fi += 1;
        }
        if !pipeline.is_initialized() {
            if let Some(t0) = first_fix_t {
                if s.t > t0 + init_timeout {
                    let reason = pipeline
                        .initialization_blocked()?
                        .unwrap_or_else(|| "data span or IMU coverage insufficient".to_string());
                    bail!("initialization pending after {init_timeout} s: {reason}");
                }
            }
        }
    }
    pipeline.finalize();
    if !pipeline.is_initialized() {
        bail!("dataset ended before initialization completed");
    }

    let nodes: Vec<_> =
        pipeline.node_poses.iter().map(|p| gio::nav_state_to_pose(&p.state)).collect();
    gio::write_tum(&out_dir.join("trajectory_nodes.tum"), &nodes)?;
    let realtime: Vec<_> =
        pipeline.realtime_poses.iter().map(|p| gio::nav_state_to_pose(&p.state)).collect();
    gio::write_tum(&out_dir.join("trajectory_realtime.tum"), &realtime)?;

    let mut w = fs::File::create(out_dir.join("diagnostics.jsonl"))?;
    for d in &pipeline.diagnostics {
        writeln!(w, "{}", serde_json::to_string(d)?)?;
    }
    let mut w = fs::File::create(out_dir.join("dispositions.csv"))?;
    for ((frame, feature), d) in pipeline.dispositions() {
        writeln!(w, "{frame},{feature},{}", serde_json::to_string(d)?.trim_matches('"'))?;
    }

    let n_opt = pipeline.diagnostics.len().max(1);
    let mean_ms = pipeline.diagnostics.iter().map(|d| d.runtime_ms).sum::<f64>() / n_opt as f64;
    println!(
        "run complete: initialized at t={:.2} s, {} optimizations (mean {:.1} ms), outputs in {}",
        pipeline.initialization_time().unwrap_or(f64::NAN),
        pipeline.diagnostics.len(),
        mean_ms,
        out_dir.display()
    );
    Ok(())
}

fn cmd_evaluate(
    est_path: &Path,
    truth_path: &Path,
    mode: &str,
    out: Option<&Path>,
    lengths: &str,
) -> Result<()> {
    let mode = match mode {
        "none" => AlignmentMode::None,
        "yaw_only" => AlignmentMode::YawOnly,
        "se3" => AlignmentMode::Se3,
        other => bail!("unknown alignment mode {other:?} (none | yaw_only | se3)"),
    };
    let lengths: Vec<f64> = lengths
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .context("parsing --lengths")?;
    let est = gio::read_tum(est_path)?;
    let truth = gio::read_tum(truth_path)?;
    let (report, aligned) = eval::evaluate(&est, &truth, mode, &lengths)?;

    let json = serde_json::to_string_pretty(&report)?;
    match out {
        Some(path) => {
            fs::write(path, &json)?;
            let aligned_path = path.with_extension("aligned.tum");
            gio::write_tum(&aligned_path, &aligned)?;
            println!("report written to {}", path.display());
        }
        None => println!("{json}"),
    }
    eprintln!(
        "ATE {:.4} m  ARE {:.4} deg  ({} associated poses, alignment {:?})",
        report.ate_m, report.are_deg, report.associated_poses, report.alignment
    );
    for row in &report.relative {
        match (row.rre_deg, row.rte_percent) {
            (Some(rre), Some(rte)) => eprintln!(
                "RRE/RTE @ {:>5.0} m: {:.4} deg / {:.4} %  ({} segments)",
                row.length, rre, rte, row.segments
            ),
            _ => eprintln!("RRE/RTE @ {:>5.0} m: unavailable (trajectory too short)", row.length),
        }
    }
    Ok(())
}
