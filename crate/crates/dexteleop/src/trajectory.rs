//! Synthetic human hand trajectories: per-finger sinusoidal flexion between
//! an open and a closed pose of a reference skeleton, phase-offset across
//! fingers so thumb-finger proximity varies enough to exercise coupling.

use crate::kinematics::{forward_keypoints, KinematicHandModel, JointVector};
use crate::retarget::HumanHandFrame;

pub const DEFAULT_PERIOD_SEC: f64 = 4.0;

/// Joint pose at a given fraction of each joint's limit range.
pub fn pose_at_fraction(model: &KinematicHandModel, fraction: f64) -> JointVector {
    let mut theta = JointVector::zeros(model.dof());
    for k in 0..model.dof() {
        let (lo, hi) = model.limits(k);
        theta.as_mut_slice()[k] = lo + fraction * (hi - lo);
    }
    theta
}

/// Flexion fraction for finger `i` at time `t`: raised-cosine between 0.1
/// (open) and 0.9 (closed), phase-shifted a fifth of a cycle per finger.
fn flexion(i: usize, t: f64, period: f64) -> f64 {
    let phase = 2.0 * std::f64::consts::PI * (t / period + i as f64 / 5.0);
    0.1 + 0.8 * (0.5 - 0.5 * phase.cos())
}

/// Skeleton joint pose at time `t`.
pub fn pose_at(model: &KinematicHandModel, t: f64, period: f64) -> JointVector {
    let mut theta = JointVector::zeros(model.dof());
    for (i, finger) in model.fingers() {
        let u = flexion(i, t, period);
        let base = model.joint_base(i).unwrap();
        for k in 0..finger.joints.len() {
            let (lo, hi) = model.limits(base + k);
            theta.as_mut_slice()[base + k] = lo + u * (hi - lo);
        }
    }
    theta
}

/// Keypoint frame of the reference skeleton at time `t`.
pub fn frame_at(model: &KinematicHandModel, t: f64, period: f64) -> HumanHandFrame {
    let theta = pose_at(model, t, period);
    let mut frame = HumanHandFrame::new(t);
    frame.points = forward_keypoints(model, &theta).expect("pose built from model limits");
    frame
}

/// Fixed-rate trajectory of `steps` frames starting at t = dt.
pub fn trajectory(
    model: &KinematicHandModel,
    steps: usize,
    dt: f64,
    period: f64,
) -> Vec<HumanHandFrame> {
    (0..steps)
        .map(|k| frame_at(model, (k + 1) as f64 * dt, period))
        .collect()
}
