//! Simulated environment and recorder abstraction: a fixed-rate coordinator
//! loop that gathers per-source snapshots, validates their timestamps, and
//! buffers synchronized observations.
//!
//! Recorders are purely simulated devices. Each one samples at its own rate
//! and reports its last sample time minus a seeded latency draw, which
//! reproduces the timestamp spreads a mixed-rate sensor rig exhibits without
//! any hardware.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::{KinematicHandModel, JointVector};
use crate::timesync::{validate, ClockSource, SyncBundle, SyncError, SyncPolicy, TimestampSet};

#[derive(Debug, Error)]
pub enum CollectError {
    #[error("recorder `{0}` is already registered")]
    DuplicateRecorder(String),
    #[error("episode in progress")]
    EpisodeInProgress,
    #[error("episode not started")]
    NotStarted,
    #[error("no recorders registered")]
    NoRecorders,
    #[error("action length {got} does not match total DoF {expected}")]
    DimensionMismatch { got: usize, expected: usize },
    #[error("steps must be positive")]
    ZeroSteps,
    #[error(transparent)]
    Sync(#[from] SyncError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecorderKind {
    Arm,
    Hand,
    Camera,
    Tactile,
}

/// Latency/dropout model for one simulated recorder.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JitterModel {
    pub latency_mean: f64,
    pub latency_stddev: f64,
    pub dropout_prob: f64,
    #[serde(default)]
    pub seed: u64,
}

impl JitterModel {
    pub fn none() -> Self {
        Self {
            latency_mean: 0.0,
            latency_stddev: 0.0,
            dropout_prob: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecorderDescriptor {
    pub name: String,
    pub kind: RecorderKind,
    pub rate: f64,
    pub jitter: JitterModel,
}

/// Reference to a stored camera frame.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameRef {
    pub index: u64,
    pub id: String,
}

/// Synchronized per-timestep snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub qpos: Vec<f64>,
    pub qvel: Vec<f64>,
    pub action: Vec<f64>,
    pub frames: BTreeMap<String, FrameRef>,
    pub tactile: BTreeMap<String, Vec<f64>>,
    pub sync: SyncBundle,
    pub step_index: usize,
}

#[derive(Debug, Clone)]
pub struct EpisodeBuffer {
    pub observations: Vec<Observation>,
    pub started_at: f64,
    pub ended_at: f64,
    pub config_snapshot: serde_json::Value,
}

struct RecorderState {
    rng: ChaCha8Rng,
    last_sample_time: Option<f64>,
    last_reported_ts: Option<f64>,
    delivered_frames: u64,
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Simulated RealEnv: holds the robot state, the registered recorders, and
/// the per-cycle gather/validate/buffer pipeline.
pub struct SimEnv {
    pub hand_model: KinematicHandModel,
    pub arm_dof: usize,
    pub sync_policy: SyncPolicy,
    pub control_rate_hz: f64,
    pub lag_gain: f64,
    pub seed: u64,
    recorders: Vec<RecorderDescriptor>,
    states: Vec<RecorderState>,
    qpos: Vec<f64>,
    qvel: Vec<f64>,
    last_action: Vec<f64>,
    in_episode: bool,
    config_snapshot: serde_json::Value,
}

impl SimEnv {
    pub fn new(
        hand_model: KinematicHandModel,
        arm_dof: usize,
        sync_policy: SyncPolicy,
        control_rate_hz: f64,
        lag_gain: f64,
        seed: u64,
    ) -> Self {
        let dof = arm_dof + hand_model.dof();
        Self {
            hand_model,
            arm_dof,
            sync_policy,
            control_rate_hz,
            lag_gain,
            seed,
            recorders: Vec::new(),
            states: Vec::new(),
            qpos: vec![0.0; dof],
            qvel: vec![0.0; dof],
            last_action: vec![0.0; dof],
            in_episode: false,
            config_snapshot: serde_json::Value::Null,
        }
    }

    pub fn total_dof(&self) -> usize {
        self.arm_dof + self.hand_model.dof()
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.control_rate_hz
    }

    pub fn recorders(&self) -> &[RecorderDescriptor] {
        &self.recorders
    }

    pub fn set_config_snapshot(&mut self, snapshot: serde_json::Value) {
        self.config_snapshot = snapshot;
    }

    pub fn register_recorder(&mut self, descriptor: RecorderDescriptor) -> Result<(), CollectError> {
        if self.in_episode {
            return Err(CollectError::EpisodeInProgress);
        }
        if self.recorders.iter().any(|r| r.name == descriptor.name) {
            return Err(CollectError::DuplicateRecorder(descriptor.name));
        }
        // Per-recorder stream: seeded from (env seed, recorder name, jitter seed).
        let mut key = self.seed.to_le_bytes().to_vec();
        key.extend_from_slice(descriptor.name.as_bytes());
        key.extend_from_slice(&descriptor.jitter.seed.to_le_bytes());
        let rng = ChaCha8Rng::seed_from_u64(fnv1a64(&key));
        self.recorders.push(descriptor);
        self.states.push(RecorderState {
            rng,
            last_sample_time: None,
            last_reported_ts: None,
            delivered_frames: 0,
        });
        Ok(())
    }

    pub fn start_episode(&mut self) -> Result<(), CollectError> {
        if self.in_episode {
            return Err(CollectError::EpisodeInProgress);
        }
        if self.recorders.is_empty() {
            return Err(CollectError::NoRecorders);
        }
        self.in_episode = true;
        Ok(())
    }

    pub fn stop_episode(&mut self) {
        self.in_episode = false;
    }

    pub fn qpos(&self) -> &[f64] {
        &self.qpos
    }

    /// Gather the latest snapshot of every recorder, validate the timestamp
    /// set, and assemble an observation. Recorder dropout reuses the last
    /// reported timestamp; the freshness check flags it once it ages out.
    pub fn get_observation(&mut self, now: f64, step_index: usize) -> Result<Observation, CollectError> {
        if !self.in_episode {
            return Err(CollectError::NotStarted);
        }
        if self.recorders.is_empty() {
            return Err(CollectError::NoRecorders);
        }
        let mut set = TimestampSet::new();
        let mut frames = BTreeMap::new();
        let mut tactile = BTreeMap::new();
        for (desc, state) in self.recorders.iter().zip(self.states.iter_mut()) {
            // Nudge against float dust so exact rate multiples land on the
            // intended sample.
            let sample_time = ((now * desc.rate + 1e-9).floor()) / desc.rate;
            // Both draws happen every cycle so the stream stays aligned
            // whether or not a dropout occurs.
            let latency = Normal::new(desc.jitter.latency_mean, desc.jitter.latency_stddev)
                .map(|n| n.sample(&mut state.rng))
                .unwrap_or(desc.jitter.latency_mean)
                .max(0.0);
            let dropped: bool = state.rng.gen::<f64>() < desc.jitter.dropout_prob;

            let ts = if let (true, Some(held)) = (dropped, state.last_reported_ts) {
                held
            } else {
                let fresh_sample = state.last_sample_time != Some(sample_time);
                if fresh_sample && desc.kind == RecorderKind::Camera {
                    state.delivered_frames += 1;
                }
                state.last_sample_time = Some(sample_time);
                sample_time - latency
            };
            state.last_reported_ts = Some(ts);
            set.insert(desc.name.clone(), ts);

            match desc.kind {
                RecorderKind::Camera => {
                    let index = state.delivered_frames.saturating_sub(1);
                    frames.insert(
                        desc.name.clone(),
                        FrameRef {
                            index,
                            id: format!("{}/{:06}", desc.name, index),
                        },
                    );
                }
                RecorderKind::Tactile => {
                    // Deterministic synthetic pressure channels.
                    let vals: Vec<f64> = (0..4)
                        .map(|c| (now * 2.0 + c as f64).sin() * 0.5 + 0.5)
                        .collect();
                    tactile.insert(desc.name.clone(), vals);
                }
                _ => {}
            }
        }
        let sync = validate(&self.sync_policy, now, &set)?;
        Ok(Observation {
            qpos: self.qpos.clone(),
            qvel: self.qvel.clone(),
            action: self.last_action.clone(),
            frames,
            tactile,
            sync,
            step_index,
        })
    }

    /// One control cycle: first-order lag toward the action, velocity by
    /// differencing, then a gathered observation.
    pub fn step(
        &mut self,
        action: &JointVector,
        now: f64,
        step_index: usize,
    ) -> Result<Observation, CollectError> {
        if !self.in_episode {
            return Err(CollectError::NotStarted);
        }
        if action.len() != self.total_dof() {
            return Err(CollectError::DimensionMismatch {
                got: action.len(),
                expected: self.total_dof(),
            });
        }
        let dt = self.dt();
        let old = self.qpos.clone();
        for (k, a) in action.as_slice().iter().enumerate() {
            self.qpos[k] += self.lag_gain * (a - self.qpos[k]);
        }
        // Hand joints respect the model's limits; arm joints use a wide
        // symmetric box.
        for k in 0..self.arm_dof {
            self.qpos[k] = self.qpos[k].clamp(-std::f64::consts::PI, std::f64::consts::PI);
        }
        for k in 0..self.hand_model.dof() {
            let (lo, hi) = self.hand_model.limits(k);
            let v = &mut self.qpos[self.arm_dof + k];
            *v = v.clamp(lo, hi);
        }
        for (k, prev) in old.iter().enumerate() {
            self.qvel[k] = (self.qpos[k] - prev) / dt;
        }
        self.last_action = action.as_slice().to_vec();
        self.get_observation(now, step_index)
    }
}

/// Run exactly `steps` control cycles at the environment's rate against a
/// per-step action source. Deterministic given the environment's seeds.
pub fn run_episode<P>(
    env: &mut SimEnv,
    mut policy: P,
    steps: usize,
    clock: &mut ClockSource,
) -> Result<EpisodeBuffer, CollectError>
where
    P: FnMut(usize, &[f64]) -> JointVector,
{
    if steps == 0 {
        return Err(CollectError::ZeroSteps);
    }
    env.start_episode()?;
    let started_at = clock.now();
    let rate = env.control_rate_hz;
    let mut observations = Vec::with_capacity(steps);
    for k in 0..steps {
        let now = started_at + (k + 1) as f64 / rate;
        clock.advance_to(now);
        let action = policy(k, env.qpos());
        let obs = env.step(&action, now, k)?;
        observations.push(obs);
    }
    env.stop_episode();
    Ok(EpisodeBuffer {
        observations,
        started_at,
        ended_at: clock.now(),
        config_snapshot: env.config_snapshot.clone(),
    })
}

// ---------------------------------------------------------------------------
// Environment configuration document
// ---------------------------------------------------------------------------

fn default_control_rate() -> f64 {
    25.0
}

fn default_lag_gain() -> f64 {
    0.5
}

/// On-disk environment configuration consumed by the CLI.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnvConfig {
    pub hand_model: String,
    pub human_model: String,
    pub arm_dof: usize,
    pub recorders: Vec<RecorderDescriptor>,
    pub sync_policy: SyncPolicy,
    pub seed: u64,
    #[serde(default = "default_control_rate")]
    pub control_rate_hz: f64,
    #[serde(default = "default_lag_gain")]
    pub lag_gain: f64,
    #[serde(default)]
    pub retarget_config: Option<String>,
}

impl EnvConfig {
    /// Recorder mix whose timestamp spreads land in the mid-tens-of-
    /// milliseconds band a mixed 25/30 Hz sensor rig produces.
    pub fn mixed_rate_recorders() -> Vec<RecorderDescriptor> {
        vec![
            RecorderDescriptor {
                name: "arm".into(),
                kind: RecorderKind::Arm,
                rate: 100.0,
                jitter: JitterModel {
                    latency_mean: 0.005,
                    latency_stddev: 0.0015,
                    dropout_prob: 0.0,
                    seed: 0,
                },
            },
            RecorderDescriptor {
                name: "hand".into(),
                kind: RecorderKind::Hand,
                rate: 30.0,
                jitter: JitterModel {
                    latency_mean: 0.018,
                    latency_stddev: 0.003,
                    dropout_prob: 0.002,
                    seed: 0,
                },
            },
            RecorderDescriptor {
                name: "cam_top".into(),
                kind: RecorderKind::Camera,
                rate: 30.0,
                jitter: JitterModel {
                    latency_mean: 0.035,
                    latency_stddev: 0.003,
                    dropout_prob: 0.003,
                    seed: 0,
                },
            },
            RecorderDescriptor {
                name: "right_hand".into(),
                kind: RecorderKind::Tactile,
                rate: 50.0,
                jitter: JitterModel {
                    latency_mean: 0.010,
                    latency_stddev: 0.002,
                    dropout_prob: 0.0,
                    seed: 0,
                },
            },
        ]
    }
}
