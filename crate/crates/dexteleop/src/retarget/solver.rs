//! Projected damped Gauss-Newton minimizer for the total retargeting cost.
//!
//! The objective is a sum of squares, so it is solved in stacked residual
//! form: alignment and coupling residuals weighted by sqrt(alpha), plus the
//! smoothing residual theta - theta_prev. Steps are clamped, projected onto
//! the joint-limit box, and only accepted when the cost does not increase.

use nalgebra::{DMatrix, DVector, Vector3};

use crate::kinematics::{
    clamp_to_limits, keypoint_jacobian, keypoint_position, KeypointId, KinematicHandModel,
    JointVector,
};

use super::cost::{coupling_terms, total_cost, CostBreakdown};
use super::{transform_keypoints, CalibrationProfile, HumanHandFrame, RetargetConfig, RetargetError};

#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct SolveReport {
    pub final_cost: f64,
    pub breakdown: CostBreakdown,
    pub iterations: usize,
    pub converged: bool,
}

struct Residuals {
    align_keys: Vec<KeypointId>,
    /// (finger, weight beta, human relative vector), betas fixed per solve.
    couple: Vec<(usize, f64, Vector3<f64>)>,
    sqrt_align: f64,
    sqrt_couple: f64,
    sqrt_smooth: f64,
}

impl Residuals {
    fn len(&self, n: usize) -> usize {
        3 * self.align_keys.len() + 3 * self.couple.len() + n
    }

    fn fill(
        &self,
        model: &KinematicHandModel,
        theta: &JointVector,
        theta_prev: &JointVector,
        pprime: &HumanHandFrame,
        residual: &mut DVector<f64>,
        jacobian: Option<&mut DMatrix<f64>>,
    ) -> Result<(), RetargetError> {
        let n = model.dof();
        let mut row = 0;
        let mut jac = jacobian;
        for &key in &self.align_keys {
            let r = self.sqrt_align * (keypoint_position(model, theta, key)? - pprime.point(key)?);
            residual.fixed_rows_mut::<3>(row).copy_from(&r);
            if let Some(j) = jac.as_deref_mut() {
                let jk = keypoint_jacobian(model, theta, key)?;
                j.view_mut((row, 0), (3, n)).copy_from(&(self.sqrt_align * jk));
            }
            row += 3;
        }
        let thumb_tip = (0, model.finger(0).unwrap().fingertip().id);
        for &(finger, beta, r_h) in &self.couple {
            let w = self.sqrt_couple * beta.sqrt();
            let tip = (finger, model.finger(finger).unwrap().fingertip().id);
            let r_r = keypoint_position(model, theta, tip)?
                - keypoint_position(model, theta, thumb_tip)?;
            residual.fixed_rows_mut::<3>(row).copy_from(&(w * (r_r - r_h)));
            if let Some(j) = jac.as_deref_mut() {
                let jk = keypoint_jacobian(model, theta, tip)?
                    - keypoint_jacobian(model, theta, thumb_tip)?;
                j.view_mut((row, 0), (3, n)).copy_from(&(w * jk));
            }
            row += 3;
        }
        for k in 0..n {
            residual[row + k] =
                self.sqrt_smooth * (theta.as_slice()[k] - theta_prev.as_slice()[k]);
            if let Some(j) = jac.as_deref_mut() {
                j[(row + k, k)] = self.sqrt_smooth;
            }
        }
        Ok(())
    }
}

/// Minimize the total cost for one frame, warm-started at `theta_prev`.
///
/// The returned joint vector always lies within limits and its cost never
/// exceeds the warm-start cost. Identical inputs produce identical outputs.
pub fn solve_retarget(
    model: &KinematicHandModel,
    profile: &CalibrationProfile,
    config: &RetargetConfig,
    frame: &HumanHandFrame,
    theta_prev: &JointVector,
) -> Result<(JointVector, SolveReport), RetargetError> {
    frame.check_finite()?;
    if theta_prev.len() != model.dof() {
        return Err(RetargetError::DimensionMismatch {
            got: theta_prev.len(),
            expected: model.dof(),
        });
    }
    let pprime = transform_keypoints(profile, frame)?;

    // Pure smoothing is minimized by the warm start itself.
    if config.alpha_align == 0.0 && config.alpha_couple == 0.0 {
        let theta = clamp_to_limits(model, theta_prev)?;
        let breakdown = total_cost(model, &theta, theta_prev, &pprime, frame, profile, config)?;
        return Ok((
            theta,
            SolveReport {
                final_cost: breakdown.total,
                breakdown,
                iterations: 0,
                converged: true,
            },
        ));
    }

    let align_keys: Vec<KeypointId> = if config.alpha_align > 0.0 {
        config.keypoints()?
    } else {
        Vec::new()
    };
    let residuals = Residuals {
        align_keys,
        couple: coupling_terms(profile, frame, &pprime, config)?,
        sqrt_align: config.alpha_align.sqrt(),
        sqrt_couple: config.alpha_couple.sqrt(),
        sqrt_smooth: config.alpha_smooth.sqrt(),
    };

    let n = model.dof();
    let m = residuals.len(n);
    let mut theta = clamp_to_limits(model, theta_prev)?;
    let mut r = DVector::zeros(m);
    let mut jac = DMatrix::zeros(m, n);
    residuals.fill(model, &theta, theta_prev, &pprime, &mut r, Some(&mut jac))?;
    let mut cost = r.norm_squared();
    if !cost.is_finite() {
        return Err(RetargetError::NonFiniteCost);
    }

    let mut lambda = 1e-6;
    let mut iterations = 0;
    let mut converged = false;
    let cfg = &config.solver;

    'outer: while iterations < cfg.max_iters {
        let jtj = jac.transpose() * &jac;
        let jtr = jac.transpose() * &r;
        if jtr.amax() < 1e-14 {
            converged = true;
            break;
        }

        // Inner damping loop: retry with larger lambda until the step helps.
        loop {
            let mut system = jtj.clone();
            for k in 0..n {
                system[(k, k)] += lambda;
            }
            let step = match system.cholesky() {
                Some(ch) => ch.solve(&(-&jtr)),
                None => {
                    lambda *= 10.0;
                    if lambda > 1e10 {
                        converged = true;
                        break 'outer;
                    }
                    continue;
                }
            };
            let scale = {
                let amax = step.amax();
                if amax > cfg.max_step_radians {
                    cfg.max_step_radians / amax
                } else {
                    1.0
                }
            };
            let mut candidate = theta.clone();
            for k in 0..n {
                candidate.as_mut_slice()[k] += scale * step[k];
            }
            let candidate = clamp_to_limits(model, &candidate)?;

            let mut r_new = DVector::zeros(m);
            residuals.fill(model, &candidate, theta_prev, &pprime, &mut r_new, None)?;
            let cost_new = r_new.norm_squared();
            if !cost_new.is_finite() {
                return Err(RetargetError::NonFiniteCost);
            }

            if cost_new <= cost {
                let actual_step = candidate
                    .as_slice()
                    .iter()
                    .zip(theta.as_slice())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                let decrease = cost - cost_new;
                theta = candidate;
                cost = cost_new;
                r = r_new;
                iterations += 1;
                lambda = (lambda / 3.0).max(1e-12);
                if actual_step < cfg.step_tolerance || decrease < cfg.cost_tolerance {
                    converged = true;
                    break 'outer;
                }
                residuals.fill(model, &theta, theta_prev, &pprime, &mut r, Some(&mut jac))?;
                break;
            }
            lambda *= 10.0;
            if lambda > 1e10 {
                // No descent direction left: stationary (possibly at the box
                // boundary).
                converged = true;
                break 'outer;
            }
        }
    }

    let breakdown = total_cost(model, &theta, theta_prev, &pprime, frame, profile, config)?;
    Ok((
        theta,
        SolveReport {
            final_cost: breakdown.total,
            breakdown,
            iterations,
            converged,
        },
    ))
}
