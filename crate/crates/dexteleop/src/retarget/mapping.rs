//! Direct joint-space mapping: per-joint affine transfer from a master
//! device's joint vector to the slave hand, clamped to the slave's limits.

use serde::{Deserialize, Serialize};

use crate::kinematics::{clamp_to_limits, KinematicHandModel, JointVector};

use super::RetargetError;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MapEntry {
    pub source: usize,
    pub target: usize,
    pub gain: f64,
    pub offset: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JointMapping {
    pub entries: Vec<MapEntry>,
    pub target_dof: usize,
}

impl JointMapping {
    /// One-to-one unit mapping over `dof` joints.
    pub fn identity(dof: usize) -> Self {
        Self {
            entries: (0..dof)
                .map(|k| MapEntry {
                    source: k,
                    target: k,
                    gain: 1.0,
                    offset: 0.0,
                })
                .collect(),
            target_dof: dof,
        }
    }

    pub fn validate(&self) -> Result<(), RetargetError> {
        let mut seen = vec![false; self.target_dof];
        for e in &self.entries {
            if e.target >= self.target_dof {
                return Err(RetargetError::IndexOutOfRange(e.target));
            }
            if seen[e.target] {
                return Err(RetargetError::IndexOutOfRange(e.target));
            }
            seen[e.target] = true;
        }
        Ok(())
    }
}

/// Apply the affine mapping and clamp into the model's joint limits.
/// Unmapped target joints hold zero.
pub fn direct_joint_map(
    source: &JointVector,
    mapping: &JointMapping,
    model: &KinematicHandModel,
) -> Result<JointVector, RetargetError> {
    mapping.validate()?;
    if mapping.target_dof != model.dof() {
        return Err(RetargetError::DimensionMismatch {
            got: mapping.target_dof,
            expected: model.dof(),
        });
    }
    let mut target = JointVector::zeros(mapping.target_dof);
    for e in &mapping.entries {
        let v = *source
            .as_slice()
            .get(e.source)
            .ok_or(RetargetError::IndexOutOfRange(e.source))?;
        target.as_mut_slice()[e.target] = e.gain * v + e.offset;
    }
    Ok(clamp_to_limits(model, &target)?)
}
