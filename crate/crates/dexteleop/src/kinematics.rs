//! Robot hand models as trees of per-finger serial revolute chains.
//!
//! A [`KinematicHandModel`] owns one [`FingerChain`] per finger (thumb is
//! always finger index 0) and exposes forward kinematics for named keypoints
//! plus analytic geometric Jacobians. Models are immutable after load and
//! safe to share across threads.

use std::collections::BTreeMap;

use nalgebra::{IsometryMatrix3, Matrix3xX, Point3, Rotation3, Translation3, Unit, Vector3};
use serde::Deserialize;
use thiserror::Error;

/// Canonical finger order; index into this array is the finger index `i`.
pub const FINGER_NAMES: [&str; 5] = ["thumb", "index", "middle", "ring", "little"];

/// Keypoint identifier: (finger index, keypoint index along the chain).
pub type KeypointId = (usize, usize);

#[derive(Debug, Error)]
pub enum KinematicsError {
    #[error("failed to parse hand model: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("unknown finger name `{0}`")]
    UnknownFinger(String),
    #[error("fingers out of canonical order (thumb, index, middle, ring, little)")]
    FingerOrder,
    #[error("thumb is mandatory but missing")]
    MissingThumb,
    #[error("finger `{finger}` joint {joint}: lower limit {lower} > upper limit {upper}")]
    LimitInversion {
        finger: String,
        joint: usize,
        lower: f64,
        upper: f64,
    },
    #[error("finger `{finger}` joint {joint}: axis norm deviates from 1 by more than 1e-9")]
    NonUnitAxis { finger: String, joint: usize },
    #[error("finger `{finger}`: duplicate keypoint id {id}")]
    DuplicateKeypoint { finger: String, id: usize },
    #[error("finger `{finger}`: keypoint ids must be strictly increasing along the chain")]
    KeypointOrder { finger: String },
    #[error("finger `{finger}` keypoint {id}: link index {link} out of range ({joints} joints)")]
    BadLink {
        finger: String,
        id: usize,
        link: usize,
        joints: usize,
    },
    #[error("finger `{finger}`: exactly one keypoint with role `mcp` is required")]
    MissingMcp { finger: String },
    #[error("finger `{finger}`: last keypoint must have role `fingertip`")]
    MissingFingertip { finger: String },
    #[error("joint vector length {got} does not match model DoF {expected}")]
    DimensionMismatch { got: usize, expected: usize },
    #[error("joint vector contains a non-finite value at index {0}")]
    NonFinite(usize),
    #[error("unknown keypoint ({0}, {1})")]
    UnknownKeypoint(usize, usize),
}

/// Joint angle vector for one hand model, radians.
#[derive(Debug, Clone, PartialEq, serde::Serialize, Deserialize)]
#[serde(transparent)]
pub struct JointVector {
    values: Vec<f64>,
}

impl JointVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            values: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn check_finite(&self) -> Result<(), KinematicsError> {
        match self.values.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(KinematicsError::NonFinite(i)),
            None => Ok(()),
        }
    }
}

impl From<Vec<f64>> for JointVector {
    fn from(values: Vec<f64>) -> Self {
        Self { values }
    }
}

/// Semantic role of a keypoint on a finger.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KeypointRole {
    Mcp,
    Pip,
    Dip,
    Fingertip,
    Aux,
}

#[derive(Debug, Clone)]
pub struct RevoluteJoint {
    /// Rigid transform from the parent frame to this joint's frame.
    pub origin: IsometryMatrix3<f64>,
    pub axis: Unit<Vector3<f64>>,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone)]
pub struct Keypoint {
    /// Keypoint index `j` within the finger (0 is the most proximal).
    pub id: usize,
    /// Index of the joint whose frame the keypoint is rigidly attached to.
    pub link: usize,
    /// Fixed offset in the link frame, meters.
    pub offset: Vector3<f64>,
    pub role: KeypointRole,
}

#[derive(Debug, Clone)]
pub struct FingerChain {
    pub name: String,
    pub joints: Vec<RevoluteJoint>,
    pub keypoints: Vec<Keypoint>,
}

impl FingerChain {
    pub fn keypoint(&self, j: usize) -> Option<&Keypoint> {
        self.keypoints.iter().find(|k| k.id == j)
    }

    pub fn mcp(&self) -> &Keypoint {
        self.keypoints
            .iter()
            .find(|k| k.role == KeypointRole::Mcp)
            .expect("validated at load: every finger has an mcp keypoint")
    }

    pub fn fingertip(&self) -> &Keypoint {
        self.keypoints
            .last()
            .expect("validated at load: every finger has keypoints")
    }
}

/// A validated hand model: per-finger serial chains keyed by canonical
/// finger index, with a flat joint layout concatenated in finger order.
#[derive(Debug, Clone)]
pub struct KinematicHandModel {
    pub name: String,
    fingers: BTreeMap<usize, FingerChain>,
    dof: usize,
    /// First joint index of each finger in the flat joint vector.
    joint_base: BTreeMap<usize, usize>,
}

impl KinematicHandModel {
    pub fn dof(&self) -> usize {
        self.dof
    }

    pub fn fingers(&self) -> impl Iterator<Item = (usize, &FingerChain)> {
        self.fingers.iter().map(|(i, f)| (*i, f))
    }

    pub fn finger(&self, i: usize) -> Option<&FingerChain> {
        self.fingers.get(&i)
    }

    /// Offset of finger `i`'s first joint in the flat joint vector.
    pub fn joint_base(&self, i: usize) -> Option<usize> {
        self.joint_base.get(&i).copied()
    }

    pub fn keypoint_ids(&self) -> Vec<KeypointId> {
        self.fingers
            .iter()
            .flat_map(|(i, f)| f.keypoints.iter().map(move |k| (*i, k.id)))
            .collect()
    }

    pub fn has_keypoint(&self, key: KeypointId) -> bool {
        self.fingers
            .get(&key.0)
            .is_some_and(|f| f.keypoint(key.1).is_some())
    }

    /// Lower/upper limit of the flat joint at `index`.
    pub fn limits(&self, index: usize) -> (f64, f64) {
        for (i, f) in &self.fingers {
            let base = self.joint_base[i];
            if index >= base && index < base + f.joints.len() {
                let j = &f.joints[index - base];
                return (j.lower, j.upper);
            }
        }
        panic!("joint index {index} out of range");
    }

    fn check_theta(&self, theta: &JointVector) -> Result<(), KinematicsError> {
        if theta.len() != self.dof {
            return Err(KinematicsError::DimensionMismatch {
                got: theta.len(),
                expected: self.dof,
            });
        }
        theta.check_finite()
    }
}

// ---------------------------------------------------------------------------
// Model document schema
// ---------------------------------------------------------------------------

#[derive(Deserialize)]
struct OriginDoc {
    xyz: [f64; 3],
    rpy: [f64; 3],
}

#[derive(Deserialize)]
struct JointDoc {
    origin: OriginDoc,
    axis: [f64; 3],
    lower: f64,
    upper: f64,
}

#[derive(Deserialize)]
struct KeypointDoc {
    id: usize,
    link: usize,
    offset: [f64; 3],
    role: KeypointRole,
}

#[derive(Deserialize)]
struct FingerDoc {
    name: String,
    joints: Vec<JointDoc>,
    keypoints: Vec<KeypointDoc>,
}

#[derive(Deserialize)]
struct ModelDoc {
    name: String,
    fingers: Vec<FingerDoc>,
}

/// Parse and validate a hand-model JSON document.
pub fn load_hand_model(text: &str) -> Result<KinematicHandModel, KinematicsError> {
    let doc: ModelDoc = serde_json::from_str(text)?;

    let mut fingers = BTreeMap::new();
    let mut last_index: Option<usize> = None;
    for fd in doc.fingers {
        let idx = FINGER_NAMES
            .iter()
            .position(|n| *n == fd.name)
            .ok_or_else(|| KinematicsError::UnknownFinger(fd.name.clone()))?;
        if last_index.is_some_and(|prev| idx <= prev) {
            return Err(KinematicsError::FingerOrder);
        }
        last_index = Some(idx);

        let mut joints = Vec::with_capacity(fd.joints.len());
        for (jn, jd) in fd.joints.iter().enumerate() {
            if jd.lower > jd.upper {
                return Err(KinematicsError::LimitInversion {
                    finger: fd.name.clone(),
                    joint: jn,
                    lower: jd.lower,
                    upper: jd.upper,
                });
            }
            let axis = Vector3::from(jd.axis);
            if (axis.norm() - 1.0).abs() > 1e-9 {
                return Err(KinematicsError::NonUnitAxis {
                    finger: fd.name.clone(),
                    joint: jn,
                });
            }
            let [r, p, y] = jd.origin.rpy;
            joints.push(RevoluteJoint {
                origin: IsometryMatrix3::from_parts(
                    Translation3::from(Vector3::from(jd.origin.xyz)),
                    Rotation3::from_euler_angles(r, p, y),
                ),
                axis: Unit::new_unchecked(axis),
                lower: jd.lower,
                upper: jd.upper,
            });
        }

        let mut keypoints = Vec::with_capacity(fd.keypoints.len());
        let mut last_id: Option<usize> = None;
        for kd in &fd.keypoints {
            if keypoints.iter().any(|k: &Keypoint| k.id == kd.id) {
                return Err(KinematicsError::DuplicateKeypoint {
                    finger: fd.name.clone(),
                    id: kd.id,
                });
            }
            if last_id.is_some_and(|prev| kd.id <= prev) {
                return Err(KinematicsError::KeypointOrder {
                    finger: fd.name.clone(),
                });
            }
            last_id = Some(kd.id);
            if kd.link >= joints.len() {
                return Err(KinematicsError::BadLink {
                    finger: fd.name.clone(),
                    id: kd.id,
                    link: kd.link,
                    joints: joints.len(),
                });
            }
            keypoints.push(Keypoint {
                id: kd.id,
                link: kd.link,
                offset: Vector3::from(kd.offset),
                role: kd.role,
            });
        }
        if keypoints
            .iter()
            .filter(|k| k.role == KeypointRole::Mcp)
            .count()
            != 1
        {
            return Err(KinematicsError::MissingMcp {
                finger: fd.name.clone(),
            });
        }
        if keypoints.last().map(|k| k.role) != Some(KeypointRole::Fingertip) {
            return Err(KinematicsError::MissingFingertip {
                finger: fd.name.clone(),
            });
        }

        fingers.insert(
            idx,
            FingerChain {
                name: fd.name,
                joints,
                keypoints,
            },
        );
    }

    if !fingers.contains_key(&0) {
        return Err(KinematicsError::MissingThumb);
    }

    let mut joint_base = BTreeMap::new();
    let mut dof = 0;
    for (i, f) in &fingers {
        joint_base.insert(*i, dof);
        dof += f.joints.len();
    }

    Ok(KinematicHandModel {
        name: doc.name,
        fingers,
        dof,
        joint_base,
    })
}

// ---------------------------------------------------------------------------
// Forward kinematics and Jacobians
// ---------------------------------------------------------------------------

/// Link frames for one finger: `frames[k]` maps the frame after joint `k`'s
/// rotation into the palm frame.
fn link_frames(finger: &FingerChain, theta: &[f64]) -> Vec<IsometryMatrix3<f64>> {
    let mut frames = Vec::with_capacity(finger.joints.len());
    let mut t = IsometryMatrix3::identity();
    for (k, joint) in finger.joints.iter().enumerate() {
        t *= joint.origin;
        t *= IsometryMatrix3::rotation(joint.axis.into_inner() * theta[k]);
        frames.push(t);
    }
    frames
}

/// Positions of every keypoint in the model at `theta`, palm frame, meters.
pub fn forward_keypoints(
    model: &KinematicHandModel,
    theta: &JointVector,
) -> Result<BTreeMap<KeypointId, Vector3<f64>>, KinematicsError> {
    model.check_theta(theta)?;
    let mut out = BTreeMap::new();
    for (i, finger) in &model.fingers {
        let base = model.joint_base[i];
        let frames = link_frames(finger, &theta.as_slice()[base..base + finger.joints.len()]);
        for kp in &finger.keypoints {
            out.insert((*i, kp.id), (frames[kp.link] * Point3::from(kp.offset)).coords);
        }
    }
    Ok(out)
}

/// Position of a single keypoint at `theta`.
pub fn keypoint_position(
    model: &KinematicHandModel,
    theta: &JointVector,
    key: KeypointId,
) -> Result<Vector3<f64>, KinematicsError> {
    model.check_theta(theta)?;
    let finger = model
        .finger(key.0)
        .ok_or(KinematicsError::UnknownKeypoint(key.0, key.1))?;
    let kp = finger
        .keypoint(key.1)
        .ok_or(KinematicsError::UnknownKeypoint(key.0, key.1))?;
    let base = model.joint_base[&key.0];
    let frames = link_frames(finger, &theta.as_slice()[base..base + finger.joints.len()]);
    Ok((frames[kp.link] * Point3::from(kp.offset)).coords)
}

/// Geometric Jacobian of one keypoint: 3 x n, column k is d(position)/d(theta_k).
/// Columns of joints on other fingers (or distal to the keypoint) are zero.
pub fn keypoint_jacobian(
    model: &KinematicHandModel,
    theta: &JointVector,
    key: KeypointId,
) -> Result<Matrix3xX<f64>, KinematicsError> {
    model.check_theta(theta)?;
    let finger = model
        .finger(key.0)
        .ok_or(KinematicsError::UnknownKeypoint(key.0, key.1))?;
    let kp = finger
        .keypoint(key.1)
        .ok_or(KinematicsError::UnknownKeypoint(key.0, key.1))?;
    let base = model.joint_base[&key.0];
    let frames = link_frames(finger, &theta.as_slice()[base..base + finger.joints.len()]);
    let p = (frames[kp.link] * Point3::from(kp.offset)).coords;

    let mut jac = Matrix3xX::zeros(model.dof);
    for k in 0..=kp.link {
        // Frame in which joint k's axis lives: parent link frame * origin_k.
        let pre = if k == 0 {
            finger.joints[0].origin
        } else {
            frames[k - 1] * finger.joints[k].origin
        };
        let axis_w = pre.rotation * finger.joints[k].axis.into_inner();
        let origin_w = pre.translation.vector;
        jac.set_column(base + k, &axis_w.cross(&(p - origin_w)));
    }
    Ok(jac)
}

/// Clamp each joint into its limit interval; in-range values pass through.
pub fn clamp_to_limits(
    model: &KinematicHandModel,
    theta: &JointVector,
) -> Result<JointVector, KinematicsError> {
    if theta.len() != model.dof {
        return Err(KinematicsError::DimensionMismatch {
            got: theta.len(),
            expected: model.dof,
        });
    }
    let mut out = theta.clone();
    for (i, finger) in &model.fingers {
        let base = model.joint_base[i];
        for (k, joint) in finger.joints.iter().enumerate() {
            let v = &mut out.as_mut_slice()[base + k];
            *v = v.clamp(joint.lower, joint.upper);
        }
    }
    Ok(out)
}
