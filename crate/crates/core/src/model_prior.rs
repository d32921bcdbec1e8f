//! Output-space model prior: a frozen copy of the previous period's model
//! and the losses that anchor the current model's predictions to it.

use crate::embedding::EncodedInstance;
use crate::error::{DdpError, Result};
use crate::model::ModelState;
use crate::nn_core::{bce, Real};

/// Immutable snapshot of the model at the end of the previous period,
/// including its feature prior layer.
#[derive(Clone, Debug)]
pub struct TeacherSnapshot {
    model: ModelState,
    period: usize,
}

/// Deep-copies `state` as the teacher for the period after `period`.
pub fn snapshot_teacher(state: &ModelState, period: usize) -> Result<TeacherSnapshot> {
    state.check_finite()?;
    Ok(TeacherSnapshot {
        model: state.frozen(),
        period,
    })
}

impl TeacherSnapshot {
    /// Period whose final state this snapshot holds.
    pub fn period(&self) -> usize {
        self.period
    }

    pub fn predict(&self, batch: &[&EncodedInstance]) -> Result<Vec<Real>> {
        self.model.predict(batch)
    }

    pub fn model(&self) -> &ModelState {
        &self.model
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub l_likelihood: Real,
    pub l_prior: Real,
    pub lambda: Real,
    pub total: Real,
}

/// Mean clamped BCE over the batch.
pub fn likelihood_loss(p: &[Real], y: &[Real]) -> Result<Real> {
    if p.is_empty() {
        return Err(DdpError::EmptyBatch);
    }
    if p.len() != y.len() {
        return Err(DdpError::LengthMismatch(p.len(), y.len()));
    }
    Ok(p.iter().zip(y).map(|(&p, &y)| bce(p, y)).sum::<Real>() / p.len() as Real)
}

/// Mean squared distance between student and teacher probabilities.
pub fn prior_loss(p_student: &[Real], p_teacher: &[Real]) -> Result<Real> {
    if p_student.len() != p_teacher.len() {
        return Err(DdpError::LengthMismatch(p_student.len(), p_teacher.len()));
    }
    if p_student.is_empty() {
        return Err(DdpError::EmptyBatch);
    }
    Ok(p_student
        .iter()
        .zip(p_teacher)
        .map(|(s, t)| (s - t) * (s - t))
        .sum::<Real>()
        / p_student.len() as Real)
}

/// `total = l_l + (λ/2)·l_p`.
pub fn total_loss(l_likelihood: Real, l_prior: Real, lambda: Real) -> Result<LossBreakdown> {
    if lambda < 0.0 || lambda.is_nan() {
        return Err(DdpError::NegativeLambda(lambda as f64));
    }
    Ok(LossBreakdown {
        l_likelihood,
        l_prior,
        lambda,
        total: l_likelihood + (lambda / 2.0) * l_prior,
    })
}

/// Loss breakdown plus `∂total/∂logit` per instance. Without a teacher the
/// prior term is 0 and λ is ignored.
pub fn combined_loss(p: &[Real], y: &[Real], p_teacher: Option<&[Real]>, lambda: Real) -> Result<(LossBreakdown, Vec<Real>)> {
    let l_l = likelihood_loss(p, y)?;
    let n = p.len() as Real;
    let mut dlogit: Vec<Real> = p.iter().zip(y).map(|(&p, &y)| (p - y) / n).collect();
    let breakdown = match p_teacher {
        Some(pt) => {
            let l_p = prior_loss(p, pt)?;
            let b = total_loss(l_l, l_p, lambda)?;
            if lambda != 0.0 {
                for ((g, &p), &t) in dlogit.iter_mut().zip(p).zip(pt) {
                    *g += lambda * (p - t) * p * (1.0 - p) / n;
                }
            }
            b
        }
        None => total_loss(l_l, 0.0, 0.0)?,
    };
    Ok((breakdown, dlogit))
}
