//! Hand pose retargeting: calibration, keypoint transformation, the three
//! cost terms with adaptive coupling weights, the total-cost minimizer, and
//! direct joint-space mapping.

mod calibrate;
mod cost;
mod mapping;
mod solver;

pub use calibrate::{calibrate, transform_keypoints};
pub use cost::{
    align_cost, coupling_cost, coupling_weight, smooth_cost, total_cost, total_cost_gradient,
    CostBreakdown,
};
pub use mapping::{direct_joint_map, JointMapping, MapEntry};
pub use solver::{solve_retarget, SolveReport};

use std::collections::BTreeMap;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::{
    KeypointId, KeypointRole, KinematicHandModel, KinematicsError, JointVector, FINGER_NAMES,
};

#[derive(Debug, Error)]
pub enum RetargetError {
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error("missing keypoint {0}/{1}")]
    MissingKeypoint(usize, usize),
    #[error("degenerate segment {0}/{1}-{0}/{2}: zero human segment length")]
    DegenerateSegment(usize, usize, usize),
    #[error("flat calibration motion for finger {0}: rho_min equals rho_max")]
    FlatCalibration(usize),
    #[error("no motion frames provided for proximity calibration")]
    EmptyMotion,
    #[error("thumb fingertip absent from frame")]
    ThumbAbsent,
    #[error("frame at t={0} contains a non-finite keypoint")]
    NonFiniteFrame(f64),
    #[error("non-finite cost encountered (corrupt input frame?)")]
    NonFiniteCost,
    #[error("joint vector length {got} does not match expected {expected}")]
    DimensionMismatch { got: usize, expected: usize },
    #[error("mapping index out of range: {0}")]
    IndexOutOfRange(usize),
    #[error("invalid keypoint key `{0}` (expected `<finger>/<j>`)")]
    BadKeypointKey(String),
    #[error("failed to parse document: {0}")]
    Parse(#[from] serde_json::Error),
}

/// Timestamped human keypoint positions, palm frame, meters.
#[derive(Debug, Clone, PartialEq)]
pub struct HumanHandFrame {
    pub timestamp: f64,
    pub points: BTreeMap<KeypointId, Vector3<f64>>,
}

impl HumanHandFrame {
    pub fn new(timestamp: f64) -> Self {
        Self {
            timestamp,
            points: BTreeMap::new(),
        }
    }

    pub fn point(&self, key: KeypointId) -> Result<Vector3<f64>, RetargetError> {
        self.points
            .get(&key)
            .copied()
            .ok_or(RetargetError::MissingKeypoint(key.0, key.1))
    }

    /// Highest-index keypoint of a finger, by convention the fingertip.
    pub fn fingertip(&self, finger: usize) -> Result<(usize, Vector3<f64>), RetargetError> {
        self.points
            .iter()
            .rfind(|((i, _), _)| *i == finger)
            .map(|((_, j), p)| (*j, *p))
            .ok_or(RetargetError::MissingKeypoint(finger, usize::MAX))
    }

    pub fn check_finite(&self) -> Result<(), RetargetError> {
        if self.points.values().all(|p| p.iter().all(|v| v.is_finite())) {
            Ok(())
        } else {
            Err(RetargetError::NonFiniteFrame(self.timestamp))
        }
    }
}

pub(crate) fn keypoint_key(key: KeypointId) -> String {
    format!("{}/{}", FINGER_NAMES[key.0], key.1)
}

pub(crate) fn parse_keypoint_key(s: &str) -> Result<KeypointId, RetargetError> {
    let (finger, j) = s
        .split_once('/')
        .ok_or_else(|| RetargetError::BadKeypointKey(s.to_string()))?;
    let i = FINGER_NAMES
        .iter()
        .position(|n| *n == finger)
        .ok_or_else(|| RetargetError::BadKeypointKey(s.to_string()))?;
    let j = j
        .parse()
        .map_err(|_| RetargetError::BadKeypointKey(s.to_string()))?;
    Ok((i, j))
}

#[derive(Serialize, Deserialize)]
struct FrameDoc {
    t: f64,
    points: BTreeMap<String, [f64; 3]>,
}

impl HumanHandFrame {
    /// Parse one JSON-lines record: `{ "t": seconds, "points": { "<finger>/<j>": [x,y,z] } }`.
    pub fn from_json(line: &str) -> Result<Self, RetargetError> {
        let doc: FrameDoc = serde_json::from_str(line)?;
        let mut points = BTreeMap::new();
        for (k, v) in doc.points {
            points.insert(parse_keypoint_key(&k)?, Vector3::from(v));
        }
        Ok(Self {
            timestamp: doc.t,
            points,
        })
    }

    pub fn to_json(&self) -> String {
        let doc = FrameDoc {
            t: self.timestamp,
            points: self
                .points
                .iter()
                .map(|(k, p)| (keypoint_key(*k), [p.x, p.y, p.z]))
                .collect(),
        };
        serde_json::to_string(&doc).expect("frame serialization cannot fail")
    }
}

/// Per-hand calibration: segment scales, finger root offsets, proximity
/// bounds, and the poses they were derived from.
#[derive(Debug, Clone)]
pub struct CalibrationProfile {
    pub theta0: JointVector,
    pub pbar: HumanHandFrame,
    /// Segment scale s_(i,j) for the segment from keypoint j to j+1.
    pub scale: BTreeMap<KeypointId, f64>,
    pub root_offset: BTreeMap<usize, Vector3<f64>>,
    pub rho_min: BTreeMap<usize, f64>,
    pub rho_max: BTreeMap<usize, f64>,
}

#[derive(Serialize, Deserialize)]
struct ProfileDoc {
    theta0: Vec<f64>,
    pbar: FrameDoc,
    scale: BTreeMap<String, f64>,
    root_offset: BTreeMap<String, [f64; 3]>,
    rho_min: BTreeMap<String, f64>,
    rho_max: BTreeMap<String, f64>,
}

fn finger_name(i: usize) -> String {
    FINGER_NAMES[i].to_string()
}

fn parse_finger_name(s: &str) -> Result<usize, RetargetError> {
    FINGER_NAMES
        .iter()
        .position(|n| *n == s)
        .ok_or_else(|| RetargetError::BadKeypointKey(s.to_string()))
}

impl CalibrationProfile {
    pub fn from_json(text: &str) -> Result<Self, RetargetError> {
        let doc: ProfileDoc = serde_json::from_str(text)?;
        let mut pbar = HumanHandFrame::new(doc.pbar.t);
        for (k, v) in doc.pbar.points {
            pbar.points.insert(parse_keypoint_key(&k)?, Vector3::from(v));
        }
        let mut scale = BTreeMap::new();
        for (k, v) in doc.scale {
            scale.insert(parse_keypoint_key(&k)?, v);
        }
        let mut root_offset = BTreeMap::new();
        for (k, v) in doc.root_offset {
            root_offset.insert(parse_finger_name(&k)?, Vector3::from(v));
        }
        let mut rho_min = BTreeMap::new();
        for (k, v) in doc.rho_min {
            rho_min.insert(parse_finger_name(&k)?, v);
        }
        let mut rho_max = BTreeMap::new();
        for (k, v) in doc.rho_max {
            rho_max.insert(parse_finger_name(&k)?, v);
        }
        Ok(Self {
            theta0: JointVector::new(doc.theta0),
            pbar,
            scale,
            root_offset,
            rho_min,
            rho_max,
        })
    }

    pub fn to_json(&self) -> String {
        let doc = ProfileDoc {
            theta0: self.theta0.as_slice().to_vec(),
            pbar: FrameDoc {
                t: self.pbar.timestamp,
                points: self
                    .pbar
                    .points
                    .iter()
                    .map(|(k, p)| (keypoint_key(*k), [p.x, p.y, p.z]))
                    .collect(),
            },
            scale: self
                .scale
                .iter()
                .map(|(k, v)| (keypoint_key(*k), *v))
                .collect(),
            root_offset: self
                .root_offset
                .iter()
                .map(|(i, v)| (finger_name(*i), [v.x, v.y, v.z]))
                .collect(),
            rho_min: self.rho_min.iter().map(|(i, v)| (finger_name(*i), *v)).collect(),
            rho_max: self.rho_max.iter().map(|(i, v)| (finger_name(*i), *v)).collect(),
        };
        serde_json::to_string_pretty(&doc).expect("profile serialization cannot fail")
    }

    /// Identity calibration for a model: s = 1 on every segment, delta = 0,
    /// wide proximity band. Used when robot and human skeletons coincide.
    pub fn identity(model: &KinematicHandModel) -> Self {
        let mut scale = BTreeMap::new();
        let mut root_offset = BTreeMap::new();
        let mut rho_min = BTreeMap::new();
        let mut rho_max = BTreeMap::new();
        for (i, finger) in model.fingers() {
            root_offset.insert(i, Vector3::zeros());
            for w in finger.keypoints.windows(2) {
                scale.insert((i, w[0].id), 1.0);
            }
            if i != 0 {
                rho_min.insert(i, 0.0);
                rho_max.insert(i, 0.3);
            }
        }
        Self {
            theta0: JointVector::zeros(model.dof()),
            pbar: HumanHandFrame::new(0.0),
            scale,
            root_offset,
            rho_min,
            rho_max,
        }
    }
}

/// Stopping rules for the retarget solver.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolverConfig {
    pub max_iters: usize,
    pub step_tolerance: f64,
    pub cost_tolerance: f64,
    pub max_step_radians: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iters: 50,
            step_tolerance: 1e-6,
            cost_tolerance: 1e-10,
            max_step_radians: 0.2,
        }
    }
}

/// Weights, sigmoid shape, keypoint set and solver settings for retargeting.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetargetConfig {
    pub alpha_align: f64,
    pub alpha_couple: f64,
    pub alpha_smooth: f64,
    pub sigma: f64,
    pub tau: f64,
    /// Keypoints used in the alignment cost, as `<finger>/<j>` keys.
    pub keypoint_set: Vec<String>,
    /// Non-thumb fingers subject to the coupling cost, by name.
    pub coupled_fingers: Vec<String>,
    /// Use calibrated (transformed) fingertips instead of raw human
    /// fingertips when forming the human relative vectors. Off by default.
    #[serde(default)]
    pub couple_use_transformed: bool,
    pub solver: SolverConfig,
}

impl RetargetConfig {
    /// Defaults for a model: K = all pip/dip/fingertip keypoints, coupling
    /// over every non-thumb finger present.
    pub fn default_for(model: &KinematicHandModel) -> Self {
        let mut keypoint_set = Vec::new();
        let mut coupled_fingers = Vec::new();
        for (i, finger) in model.fingers() {
            for kp in &finger.keypoints {
                if matches!(
                    kp.role,
                    KeypointRole::Pip | KeypointRole::Dip | KeypointRole::Fingertip
                ) {
                    keypoint_set.push(keypoint_key((i, kp.id)));
                }
            }
            if i != 0 {
                coupled_fingers.push(finger_name(i));
            }
        }
        Self {
            alpha_align: 1.0,
            alpha_couple: 0.5,
            alpha_smooth: 0.1,
            sigma: 10.0,
            tau: 0.5,
            keypoint_set,
            coupled_fingers,
            couple_use_transformed: false,
            solver: SolverConfig::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, RetargetError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialization cannot fail")
    }

    pub fn keypoints(&self) -> Result<Vec<KeypointId>, RetargetError> {
        self.keypoint_set.iter().map(|s| parse_keypoint_key(s)).collect()
    }

    pub fn coupled(&self) -> Result<Vec<usize>, RetargetError> {
        self.coupled_fingers.iter().map(|s| parse_finger_name(s)).collect()
    }
}
