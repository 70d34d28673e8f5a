//! Calibration from a static pose plus a short motion sweep, and the
//! per-frame keypoint transformation it parameterizes.

use std::collections::BTreeMap;


use crate::kinematics::{forward_keypoints, JointVector, KinematicHandModel};

use super::{CalibrationProfile, HumanHandFrame, RetargetError};

/// Build a calibration profile.
///
/// Segment scales are the ratio of robot segment length at `theta0` to the
/// human segment length in `static_frame`, per consecutive keypoint pair.
/// Root offsets shift each finger's human mcp onto the robot's. Proximity
/// bounds are the min/max thumb-tip-to-fingertip distances observed over
/// `motion_frames`; when no motion frames are supplied the proximity maps
/// are left empty and coupling stays disabled.
pub fn calibrate(
    model: &KinematicHandModel,
    theta0: &JointVector,
    static_frame: &HumanHandFrame,
    motion_frames: &[HumanHandFrame],
) -> Result<CalibrationProfile, RetargetError> {
    static_frame.check_finite()?;
    let robot_pts = forward_keypoints(model, theta0)?;

    let mut scale = BTreeMap::new();
    let mut root_offset = BTreeMap::new();
    for (i, finger) in model.fingers() {
        for pair in finger.keypoints.windows(2) {
            let (j0, j1) = (pair[0].id, pair[1].id);
            let robot_len = (robot_pts[&(i, j1)] - robot_pts[&(i, j0)]).norm();
            let human_len = (static_frame.point((i, j1))? - static_frame.point((i, j0))?).norm();
            if human_len == 0.0 {
                return Err(RetargetError::DegenerateSegment(i, j0, j1));
            }
            scale.insert((i, j0), robot_len / human_len);
        }
        let mcp = finger.mcp().id;
        root_offset.insert(i, robot_pts[&(i, mcp)] - static_frame.point((i, mcp))?);
    }

    let mut rho_min = BTreeMap::new();
    let mut rho_max = BTreeMap::new();
    if !motion_frames.is_empty() {
        for (i, _) in model.fingers() {
            if i == 0 {
                continue;
            }
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for frame in motion_frames {
                frame.check_finite()?;
                let (_, thumb_tip) = frame.fingertip(0)?;
                let (_, tip) = frame.fingertip(i)?;
                let d = (tip - thumb_tip).norm();
                lo = lo.min(d);
                hi = hi.max(d);
            }
            if lo == hi {
                return Err(RetargetError::FlatCalibration(i));
            }
            rho_min.insert(i, lo);
            rho_max.insert(i, hi);
        }
    }

    Ok(CalibrationProfile {
        theta0: theta0.clone(),
        pbar: static_frame.clone(),
        scale,
        root_offset,
        rho_min,
        rho_max,
    })
}

/// Scale-and-translate a human frame onto the robot's geometry.
///
/// Per finger: the root keypoint passes through unchanged; the first segment
/// is scaled and shifted by the finger's root offset; subsequent segments
/// chain from the previous transformed point with their own scale.
pub fn transform_keypoints(
    profile: &CalibrationProfile,
    frame: &HumanHandFrame,
) -> Result<HumanHandFrame, RetargetError> {
    let mut out = HumanHandFrame::new(frame.timestamp);
    for (&i, delta) in &profile.root_offset {
        let js: Vec<usize> = frame
            .points
            .keys()
            .filter(|(fi, _)| *fi == i)
            .map(|(_, j)| *j)
            .collect();
        if js.is_empty() {
            continue;
        }
        let mut prev_raw = frame.point((i, js[0]))?;
        let mut prev_out = prev_raw;
        out.points.insert((i, js[0]), prev_out);
        for (step, &j) in js.iter().enumerate().skip(1) {
            let raw = frame.point((i, j))?;
            let s = *profile
                .scale
                .get(&(i, js[step - 1]))
                .ok_or(RetargetError::MissingKeypoint(i, js[step - 1]))?;
            let mut p = prev_out + s * (raw - prev_raw);
            if step == 1 {
                p += delta;
            }
            out.points.insert((i, j), p);
            prev_raw = raw;
            prev_out = p;
        }
    }
    Ok(out)
}
