//! The three retargeting cost terms, their weighted total, and the analytic
//! gradient of the total used by gradient checks and diagnostics.

use nalgebra::{DVector, Vector3};

use crate::kinematics::{
    keypoint_jacobian, keypoint_position, KeypointId, KinematicHandModel, JointVector,
};

use super::{CalibrationProfile, HumanHandFrame, RetargetConfig, RetargetError};

/// Per-term cost report for one configuration.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct CostBreakdown {
    pub total: f64,
    pub align: f64,
    pub couple: f64,
    pub smooth: f64,
}

/// Sum of squared distances between transformed human keypoints and the
/// robot's FK keypoints over the alignment set, m^2.
pub fn align_cost(
    model: &KinematicHandModel,
    theta: &JointVector,
    pprime: &HumanHandFrame,
    keys: &[KeypointId],
) -> Result<f64, RetargetError> {
    let mut sum = 0.0;
    for &key in keys {
        let target = pprime.point(key)?;
        let actual = keypoint_position(model, theta, key)?;
        sum += (target - actual).norm_squared();
    }
    Ok(sum)
}

/// Adaptive coupling weight beta in (0, 1) for one finger, from the human
/// frame's thumb-to-fingertip distance mapped through a sigmoid.
pub fn coupling_weight(
    profile: &CalibrationProfile,
    frame: &HumanHandFrame,
    finger: usize,
    sigma: f64,
    tau: f64,
) -> Result<f64, RetargetError> {
    let (_, thumb_tip) = frame.fingertip(0).map_err(|_| RetargetError::ThumbAbsent)?;
    let (_, tip) = frame.fingertip(finger)?;
    let dist = (tip - thumb_tip).norm();
    let lo = *profile
        .rho_min
        .get(&finger)
        .ok_or(RetargetError::MissingKeypoint(finger, usize::MAX))?;
    let hi = *profile
        .rho_max
        .get(&finger)
        .ok_or(RetargetError::MissingKeypoint(finger, usize::MAX))?;
    let rho = (1.0 - (dist - lo) / (hi - lo)).clamp(0.0, 1.0);
    Ok(1.0 / (1.0 + (-sigma * (rho - tau)).exp()))
}

/// Human-side thumb-relative fingertip vector for one finger.
fn human_relative(frame: &HumanHandFrame, finger: usize) -> Result<Vector3<f64>, RetargetError> {
    let (_, thumb_tip) = frame.fingertip(0).map_err(|_| RetargetError::ThumbAbsent)?;
    let (_, tip) = frame.fingertip(finger)?;
    Ok(tip - thumb_tip)
}

/// Robot-side thumb-relative fingertip vector via FK.
fn robot_relative(
    model: &KinematicHandModel,
    theta: &JointVector,
    finger: usize,
) -> Result<Vector3<f64>, RetargetError> {
    let thumb = model.finger(0).ok_or(RetargetError::ThumbAbsent)?;
    let chain = model
        .finger(finger)
        .ok_or(RetargetError::MissingKeypoint(finger, usize::MAX))?;
    let thumb_tip = keypoint_position(model, theta, (0, thumb.fingertip().id))?;
    let tip = keypoint_position(model, theta, (finger, chain.fingertip().id))?;
    Ok(tip - thumb_tip)
}

/// Weighted squared error between human and robot thumb-relative fingertip
/// vectors over the coupled finger set, m^2.
pub fn coupling_cost(
    model: &KinematicHandModel,
    theta: &JointVector,
    frame: &HumanHandFrame,
    weights: &[(usize, f64)],
    fingers: &[usize],
) -> Result<f64, RetargetError> {
    let mut sum = 0.0;
    for &finger in fingers {
        let beta = weights
            .iter()
            .find(|(i, _)| *i == finger)
            .map(|(_, b)| *b)
            .unwrap_or(0.0);
        if beta == 0.0 {
            continue;
        }
        let diff = human_relative(frame, finger)? - robot_relative(model, theta, finger)?;
        sum += beta * diff.norm_squared();
    }
    Ok(sum)
}

/// Squared joint-space step from the previous solution, rad^2.
pub fn smooth_cost(theta: &JointVector, theta_prev: &JointVector) -> Result<f64, RetargetError> {
    if theta.len() != theta_prev.len() {
        return Err(RetargetError::DimensionMismatch {
            got: theta.len(),
            expected: theta_prev.len(),
        });
    }
    Ok(theta
        .as_slice()
        .iter()
        .zip(theta_prev.as_slice())
        .map(|(a, b)| (a - b) * (a - b))
        .sum())
}

/// Coupled fingers with nonzero configuration weight, their betas, and the
/// human relative vectors. Betas depend only on the human frame, so they are
/// constants with respect to theta.
pub(super) fn coupling_terms(
    profile: &CalibrationProfile,
    frame: &HumanHandFrame,
    pprime: &HumanHandFrame,
    config: &RetargetConfig,
) -> Result<Vec<(usize, f64, Vector3<f64>)>, RetargetError> {
    let mut terms = Vec::new();
    if config.alpha_couple == 0.0 {
        return Ok(terms);
    }
    let human = if config.couple_use_transformed { pprime } else { frame };
    for finger in config.coupled()? {
        if !profile.rho_min.contains_key(&finger) || human.fingertip(finger).is_err() {
            continue;
        }
        let beta = coupling_weight(profile, human, finger, config.sigma, config.tau)?;
        terms.push((finger, beta, human_relative(human, finger)?));
    }
    Ok(terms)
}

/// Weighted total cost and its per-term breakdown.
pub fn total_cost(
    model: &KinematicHandModel,
    theta: &JointVector,
    theta_prev: &JointVector,
    pprime: &HumanHandFrame,
    frame: &HumanHandFrame,
    profile: &CalibrationProfile,
    config: &RetargetConfig,
) -> Result<CostBreakdown, RetargetError> {
    let align = if config.alpha_align > 0.0 {
        align_cost(model, theta, pprime, &config.keypoints()?)?
    } else {
        0.0
    };
    let terms = coupling_terms(profile, frame, pprime, config)?;
    let mut couple = 0.0;
    for (finger, beta, r_h) in &terms {
        let diff = r_h - robot_relative(model, theta, *finger)?;
        couple += beta * diff.norm_squared();
    }
    let smooth = smooth_cost(theta, theta_prev)?;
    let total =
        config.alpha_align * align + config.alpha_couple * couple + config.alpha_smooth * smooth;
    if !total.is_finite() {
        return Err(RetargetError::NonFiniteCost);
    }
    Ok(CostBreakdown {
        total,
        align,
        couple,
        smooth,
    })
}

/// Analytic gradient of the total cost with respect to theta. Coupling betas
/// are treated as constants, which is exact because they depend only on the
/// human frame.
pub fn total_cost_gradient(
    model: &KinematicHandModel,
    theta: &JointVector,
    theta_prev: &JointVector,
    pprime: &HumanHandFrame,
    frame: &HumanHandFrame,
    profile: &CalibrationProfile,
    config: &RetargetConfig,
) -> Result<DVector<f64>, RetargetError> {
    let n = model.dof();
    let mut grad = DVector::zeros(n);

    if config.alpha_align > 0.0 {
        for key in config.keypoints()? {
            let residual = keypoint_position(model, theta, key)? - pprime.point(key)?;
            let jac = keypoint_jacobian(model, theta, key)?;
            grad += 2.0 * config.alpha_align * jac.transpose() * residual;
        }
    }

    for (finger, beta, r_h) in coupling_terms(profile, frame, pprime, config)? {
        let thumb_tip = (0, model.finger(0).unwrap().fingertip().id);
        let tip = (finger, model.finger(finger).unwrap().fingertip().id);
        let residual = robot_relative(model, theta, finger)? - r_h;
        let jac = keypoint_jacobian(model, theta, tip)? - keypoint_jacobian(model, theta, thumb_tip)?;
        grad += 2.0 * config.alpha_couple * beta * jac.transpose() * residual;
    }

    for k in 0..n {
        grad[k] += 2.0 * config.alpha_smooth * (theta.as_slice()[k] - theta_prev.as_slice()[k]);
    }
    Ok(grad)
}
