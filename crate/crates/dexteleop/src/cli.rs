//! Command implementations behind the `dexteleop` binary: calibration,
//! offline retargeting, end-to-end simulated collection, and dataset
//! validation. Each command is deterministic given its inputs and seed.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use serde::Serialize;

use crate::collection::{run_episode, EnvConfig, RecorderKind, SimEnv};
use crate::kinematics::{clamp_to_limits, load_hand_model, KinematicHandModel, JointVector, FINGER_NAMES};
use crate::retarget::{
    calibrate, solve_retarget, CalibrationProfile, HumanHandFrame, RetargetConfig,
};
use crate::store::{
    validate_dataset, write_episode, CameraInfo, DatasetReport, SessionMetadata,
};
use crate::timesync::{
    avg_error_ms_from_rows, percentile_error_ms_from_rows, success_rate_from_rows, ClockSource,
};
use crate::trajectory;

/// Inputs for one simulation run.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub env_config: PathBuf,
    pub out_root: PathBuf,
    pub episodes: usize,
    pub steps: usize,
    /// Overrides the environment config's seed when set.
    pub seed: Option<u64>,
}

fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn load_model(path: &Path) -> Result<KinematicHandModel> {
    Ok(load_hand_model(&read_to_string(path)?)?)
}

fn read_frames(path: &Path) -> Result<Vec<HumanHandFrame>> {
    let file = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut frames = Vec::new();
    for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let frame = HumanHandFrame::from_json(&line)
            .map_err(|e| anyhow!("line {}: {e}", n + 1))?;
        frame
            .check_finite()
            .map_err(|e| anyhow!("line {}: {e}", n + 1))?;
        frames.push(frame);
    }
    Ok(frames)
}

// ---------------------------------------------------------------------------
// calibrate
// ---------------------------------------------------------------------------

pub fn cmd_calibrate(
    model_path: &Path,
    static_path: &Path,
    motion_path: &Path,
    out_path: &Path,
    out: &mut impl Write,
) -> Result<()> {
    let model = load_model(model_path)?;
    let static_frames = read_frames(static_path)?;
    let static_frame = static_frames
        .first()
        .ok_or_else(|| anyhow!("static frame file is empty"))?;
    let motion = read_frames(motion_path)?;
    let theta0 = JointVector::zeros(model.dof());
    let profile = calibrate(&model, &theta0, static_frame, &motion)?;

    for (i, _) in model.fingers() {
        let name = FINGER_NAMES[i];
        let delta = profile.root_offset[&i];
        let scales: Vec<String> = profile
            .scale
            .iter()
            .filter(|((fi, _), _)| *fi == i)
            .map(|((_, j), s)| format!("s[{j}]={s:.4}"))
            .collect();
        write!(out, "{name}: {} delta=({:.4}, {:.4}, {:.4})", scales.join(" "), delta.x, delta.y, delta.z)?;
        if let (Some(lo), Some(hi)) = (profile.rho_min.get(&i), profile.rho_max.get(&i)) {
            write!(out, " rho=[{lo:.4}, {hi:.4}]")?;
        }
        writeln!(out)?;
    }
    std::fs::write(out_path, profile.to_json())
        .with_context(|| format!("writing {}", out_path.display()))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// retarget
// ---------------------------------------------------------------------------

pub fn cmd_retarget(
    model_path: &Path,
    profile_path: &Path,
    config_path: &Path,
    input: &Path,
    output: &Path,
) -> Result<()> {
    let model = load_model(model_path)?;
    let profile = CalibrationProfile::from_json(&read_to_string(profile_path)?)?;
    let config = RetargetConfig::from_json(&read_to_string(config_path)?)?;
    let frames = read_frames(input)?;

    let mut theta_prev = clamp_to_limits(&model, &JointVector::zeros(model.dof()))?;
    let mut lines = Vec::with_capacity(frames.len());
    for (n, frame) in frames.iter().enumerate() {
        let (theta, report) = solve_retarget(&model, &profile, &config, frame, &theta_prev)
            .map_err(|e| anyhow!("line {}: {e}", n + 1))?;
        lines.push(
            serde_json::json!({
                "t": frame.timestamp,
                "theta": theta.as_slice(),
                "cost": {
                    "total": report.breakdown.total,
                    "align": report.breakdown.align,
                    "couple": report.breakdown.couple,
                    "smooth": report.breakdown.smooth,
                },
            })
            .to_string(),
        );
        theta_prev = theta;
    }
    let mut text = lines.join("\n");
    text.push('\n');
    std::fs::write(output, text).with_context(|| format!("writing {}", output.display()))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct EpisodeSummary {
    pub episode_id: String,
    pub duration_sec: f64,
    pub timesteps: usize,
    pub sync_success_rate: f64,
    pub avg_sync_error_ms: f64,
    pub tp99_ms: f64,
    pub mean_final_cost: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SimulateReport {
    pub session_id: String,
    pub episodes: Vec<EpisodeSummary>,
    pub sync_success_rate: f64,
    pub avg_sync_error_ms: f64,
    pub tp99_ms: f64,
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    crate::store::fnv1a64(bytes)
}

pub fn cmd_simulate(cfg: &RunConfig, out: &mut impl Write) -> Result<SimulateReport> {
    if cfg.steps == 0 || cfg.episodes == 0 {
        return Err(anyhow!("episodes and steps must both be positive"));
    }
    let env_dir = cfg.env_config.parent().unwrap_or(Path::new("."));
    let env_config: EnvConfig = serde_json::from_str(&read_to_string(&cfg.env_config)?)?;
    env_config.sync_policy.validate()?;
    let seed = cfg.seed.unwrap_or(env_config.seed);

    let robot = load_model(&env_dir.join(&env_config.hand_model))?;
    let human = load_model(&env_dir.join(&env_config.human_model))?;
    let retarget_config = match &env_config.retarget_config {
        Some(path) => RetargetConfig::from_json(&read_to_string(&env_dir.join(path))?)?,
        None => RetargetConfig::default_for(&robot),
    };

    // Calibrate the human skeleton against the robot: static open pose plus
    // one flexion cycle for the proximity bounds.
    let dt = 1.0 / env_config.control_rate_hz;
    let theta0 = trajectory::pose_at_fraction(&robot, 0.1);
    let static_frame = {
        let theta_h = trajectory::pose_at_fraction(&human, 0.1);
        let mut f = HumanHandFrame::new(0.0);
        f.points = crate::kinematics::forward_keypoints(&human, &theta_h)?;
        f
    };
    let motion = trajectory::trajectory(&human, 100, dt, trajectory::DEFAULT_PERIOD_SEC);
    let profile = calibrate(&robot, &theta0, &static_frame, &motion)?;

    let session_id = format!("session_{seed:016x}");
    let total_dof = env_config.arm_dof + robot.dof();
    let camera_streams: Vec<String> = env_config
        .recorders
        .iter()
        .filter(|r| r.kind == RecorderKind::Camera)
        .map(|r| r.name.clone())
        .collect();
    let tactile_sensors: Vec<String> = env_config
        .recorders
        .iter()
        .filter(|r| r.kind == RecorderKind::Tactile)
        .map(|r| r.name.clone())
        .collect();
    let camera_fps = env_config
        .recorders
        .iter()
        .find(|r| r.kind == RecorderKind::Camera)
        .map(|r| r.rate)
        .unwrap_or(30.0);
    let mut cameras = BTreeMap::new();
    for name in &camera_streams {
        cameras.insert(
            name.clone(),
            CameraInfo {
                fx: 55.0,
                fy: 55.0,
                cx: 32.0,
                cy: 24.0,
                width: 64,
                height: 48,
                pose: "top-down".into(),
            },
        );
    }

    let mut summaries = Vec::with_capacity(cfg.episodes);
    let mut all_rows = Vec::new();
    for ep in 0..cfg.episodes {
        let episode_id = format!("episode_{ep:06}");
        let ep_seed = seed ^ fnv1a64(episode_id.as_bytes());

        // Retarget the synthetic trajectory up front; the solves do not
        // depend on simulator state.
        let mut theta_prev = clamp_to_limits(&robot, &theta0)?;
        let mut actions = Vec::with_capacity(cfg.steps);
        let mut cost_sum = 0.0;
        for k in 0..cfg.steps {
            let t = (k + 1) as f64 * dt;
            let frame = trajectory::frame_at(&human, t, trajectory::DEFAULT_PERIOD_SEC);
            let (theta, report) = solve_retarget(&robot, &profile, &retarget_config, &frame, &theta_prev)?;
            cost_sum += report.final_cost;
            let mut action = JointVector::zeros(total_dof);
            for j in 0..env_config.arm_dof {
                action.as_mut_slice()[j] = 0.4 * (2.0 * std::f64::consts::PI * t / 8.0 + j as f64).sin();
            }
            action.as_mut_slice()[env_config.arm_dof..].copy_from_slice(theta.as_slice());
            actions.push(action);
            theta_prev = theta;
        }

        let mut env = SimEnv::new(
            robot.clone(),
            env_config.arm_dof,
            env_config.sync_policy,
            env_config.control_rate_hz,
            env_config.lag_gain,
            ep_seed,
        );
        env.set_config_snapshot(serde_json::to_value(&env_config)?);
        for recorder in &env_config.recorders {
            env.register_recorder(recorder.clone())?;
        }
        let mut clock = ClockSource::simulated();
        let buffer = run_episode(&mut env, |k, _| actions[k].clone(), cfg.steps, &mut clock)?;

        let duration_sec = cfg.steps as f64 / env_config.control_rate_hz;
        let metadata = SessionMetadata {
            task_name: "sim_grasp".into(),
            episode_id: episode_id.clone(),
            session_id: session_id.clone(),
            duration_sec,
            timesteps: cfg.steps,
            hardware_preset: format!("sim_{}_single", robot.name),
            arm_type: format!("sim-arm ({}-DoF)", env_config.arm_dof),
            hand_type: format!("{} ({}-DoF)", robot.name, robot.dof()),
            total_dof,
            camera_preset: "sim_single_top".into(),
            camera_type: "sim-ppm".into(),
            resolution: "64x48".into(),
            fps: camera_fps,
            control_freq_hz: env_config.control_rate_hz,
            dt,
            data_format: "otdx_telemetry_v1".into(),
            qpos_dim: total_dof,
            camera_streams: camera_streams.clone(),
            tactile_sensors: tactile_sensors.clone(),
            sync_policy: env_config.sync_policy,
        };
        let dir = cfg.out_root.join(&session_id).join(&episode_id);
        write_episode(&buffer, &metadata, &cameras, &dir)?;

        let rows: Vec<(bool, f64)> = buffer
            .observations
            .iter()
            .map(|o| (o.sync.is_valid, o.sync.max_diff))
            .collect();
        let summary = EpisodeSummary {
            episode_id,
            duration_sec,
            timesteps: cfg.steps,
            sync_success_rate: success_rate_from_rows(&rows).unwrap_or(0.0),
            avg_sync_error_ms: avg_error_ms_from_rows(&rows).unwrap_or(0.0),
            tp99_ms: percentile_error_ms_from_rows(&rows, 99.0).unwrap_or(0.0),
            mean_final_cost: cost_sum / cfg.steps as f64,
        };
        writeln!(
            out,
            "{}: duration {:.2}s  sync {:.2}%  avg {:.2}ms  tp99 {:.2}ms  cost {:.3e}",
            summary.episode_id,
            summary.duration_sec,
            summary.sync_success_rate,
            summary.avg_sync_error_ms,
            summary.tp99_ms,
            summary.mean_final_cost,
        )?;
        all_rows.extend(rows);
        summaries.push(summary);
    }

    let report = SimulateReport {
        session_id,
        episodes: summaries,
        sync_success_rate: success_rate_from_rows(&all_rows).unwrap_or(0.0),
        avg_sync_error_ms: avg_error_ms_from_rows(&all_rows).unwrap_or(0.0),
        tp99_ms: percentile_error_ms_from_rows(&all_rows, 99.0).unwrap_or(0.0),
    };
    writeln!(
        out,
        "overall: sync {:.2}%  avg {:.2}ms  tp99 {:.2}ms",
        report.sync_success_rate, report.avg_sync_error_ms, report.tp99_ms
    )?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// validate
// ---------------------------------------------------------------------------

pub fn cmd_validate(root: &Path, json: bool, out: &mut impl Write) -> Result<DatasetReport> {
    let report = validate_dataset(root)?;
    if json {
        let value = serde_json::to_value(&report)?;
        writeln!(out, "{}", serde_json::to_string_pretty(&value)?)?;
    } else {
        writeln!(out, "episodes: {}", report.episodes)?;
        writeln!(out, "total_timesteps: {}", report.total_timesteps)?;
        writeln!(out, "sync_success_rate: {:.2}%", report.sync_success_rate)?;
        writeln!(out, "avg_sync_error_ms: {:.2}", report.avg_sync_error_ms)?;
        writeln!(out, "tp99_ms: {:.2}", report.tp99_ms)?;
        for failure in &report.failures {
            writeln!(out, "FAIL {failure}")?;
        }
    }
    Ok(report)
}

/// Write a ready-to-run environment config next to the bundled models.
pub fn write_default_env_config(path: &Path, models_dir: &Path, seed: u64) -> Result<()> {
    let config = EnvConfig {
        hand_model: models_dir.join("o6_like.json").to_string_lossy().into_owned(),
        human_model: models_dir.join("human_hand.json").to_string_lossy().into_owned(),
        arm_dof: 6,
        recorders: EnvConfig::mixed_rate_recorders(),
        sync_policy: Default::default(),
        seed,
        control_rate_hz: 25.0,
        lag_gain: 0.5,
        retarget_config: None,
    };
    let value = serde_json::to_value(&config)?;
    std::fs::write(path, serde_json::to_string_pretty(&value)? + "\n")?;
    Ok(())
}
