//! Optimizers and the rule that routes each parameter slot to one of them.
//!
//! The feature prior vector takes plain SGD on its own loss; everything
//! else takes Adam with lazy per-row updates for sparse tables.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{DdpError, Result};
use crate::nn_core::{DenseMatrix, ParamSlot, Real, UpdateGroup};

pub const ADAM_BETA1: Real = 0.9;
pub const ADAM_BETA2: Real = 0.999;
pub const ADAM_EPS: Real = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdState {
    pub lr: Real,
}

impl SgdState {
    pub fn new(lr: Real) -> Result<Self> {
        check_rate("sgd learning rate", lr)?;
        Ok(SgdState { lr })
    }
}

/// First and second moments plus per-row step counts for one slot.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamMoments {
    pub m: DenseMatrix,
    pub v: DenseMatrix,
    pub steps: Vec<u64>,
}

impl AdamMoments {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        AdamMoments {
            m: DenseMatrix::zeros(rows, cols),
            v: DenseMatrix::zeros(rows, cols),
            steps: vec![0; rows],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub lr: Real,
    pub beta1: Real,
    pub beta2: Real,
    pub eps: Real,
    /// L2 coefficient added to the gradient of every updated coordinate.
    pub weight_decay: Real,
    /// Moments keyed by slot id, created on first use.
    pub moments: BTreeMap<String, AdamMoments>,
}

impl AdamState {
    pub fn new(lr: Real, weight_decay: Real) -> Result<Self> {
        check_rate("adam learning rate", lr)?;
        if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
            return Err(DdpError::Config(format!("weight decay must be >= 0, got {weight_decay}")));
        }
        Ok(AdamState {
            lr,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            weight_decay,
            moments: BTreeMap::new(),
        })
    }

    pub fn moments_for(&self, id: &str) -> Option<&AdamMoments> {
        self.moments.get(id)
    }
}

fn check_rate(what: &str, lr: Real) -> Result<()> {
    if lr > 0.0 && lr.is_finite() {
        Ok(())
    } else {
        Err(DdpError::Config(format!("{what} must be > 0, got {lr}")))
    }
}

fn check_grad(slot: &ParamSlot) -> Result<()> {
    for r in slot.active_rows() {
        if slot.grad.row(r).iter().any(|g| !g.is_finite()) {
            return Err(DdpError::NonFiniteGrad(slot.id.clone()));
        }
    }
    Ok(())
}

/// `p ← p − lr·g` over the slot's active rows.
pub fn sgd_step(slots: &mut [&mut ParamSlot], state: &SgdState) -> Result<()> {
    for slot in slots.iter() {
        check_grad(slot)?;
    }
    for slot in slots.iter_mut() {
        for r in slot.active_rows() {
            let (values, grad) = (&mut slot.values, &slot.grad);
            for (p, g) in values.row_mut(r).iter_mut().zip(grad.row(r)) {
                *p -= state.lr * g;
            }
        }
    }
    Ok(())
}

/// Bias-corrected Adam over each slot's active rows. Rows a sparse slot did
/// not touch keep their values, moments and step counts.
pub fn adam_step(slots: &mut [&mut ParamSlot], state: &mut AdamState) -> Result<()> {
    for slot in slots.iter() {
        check_grad(slot)?;
    }
    let (b1, b2, eps, lr, wd) = (state.beta1, state.beta2, state.eps, state.lr, state.weight_decay);
    for slot in slots.iter_mut() {
        let (rows, cols) = slot.values.shape();
        let mom = state
            .moments
            .entry(slot.id.clone())
            .or_insert_with(|| AdamMoments::zeros(rows, cols));
        for r in slot.active_rows() {
            mom.steps[r] += 1;
            let s = mom.steps[r] as i32;
            let c1 = 1.0 - b1.powi(s);
            let c2 = 1.0 - b2.powi(s);
            let (values, grad) = (&mut slot.values, &slot.grad);
            let p = values.row_mut(r);
            let g = grad.row(r);
            let m = mom.m.row_mut(r);
            let v = mom.v.row_mut(r);
            for j in 0..cols {
                let gj = g[j] + wd * p[j];
                m[j] = b1 * m[j] + (1.0 - b1) * gj;
                v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                p[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
            }
        }
    }
    Ok(())
}

/// Optimizer applied to the feature prior vector. SGD is the default;
/// Adam is kept for comparison runs.
#[derive(Clone, Debug, PartialEq)]
pub enum PhiOptimizer {
    Sgd(SgdState),
    Adam(AdamState),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PhiOptimizerKind {
    #[default]
    Sgd,
    Adam,
}

impl PhiOptimizer {
    pub fn new(kind: PhiOptimizerKind, lr: Real) -> Result<Self> {
        Ok(match kind {
            PhiOptimizerKind::Sgd => PhiOptimizer::Sgd(SgdState::new(lr)?),
            PhiOptimizerKind::Adam => PhiOptimizer::Adam(AdamState::new(lr, 0.0)?),
        })
    }

    pub fn kind(&self) -> PhiOptimizerKind {
        match self {
            PhiOptimizer::Sgd(_) => PhiOptimizerKind::Sgd,
            PhiOptimizer::Adam(_) => PhiOptimizerKind::Adam,
        }
    }
}

/// Which slots each optimizer touched in one routed step.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RouteReport {
    pub sgd_slots: Vec<String>,
    pub adam_slots: Vec<String>,
}

/// Splits `slots` by their group tag and steps each group with its own
/// optimizer. Nothing is updated if any slot is untagged or any gradient
/// is non-finite. Slots without gradient buffers are skipped.
pub fn route_and_step(slots: Vec<&mut ParamSlot>, phi: &mut PhiOptimizer, adam: &mut AdamState) -> Result<RouteReport> {
    let mut phi_slots = Vec::new();
    let mut theta_slots = Vec::new();
    for slot in slots {
        match slot.group {
            None => return Err(DdpError::UntaggedSlot(slot.id.clone())),
            Some(_) if !slot.has_grad() => {}
            Some(UpdateGroup::Sgd) => phi_slots.push(slot),
            Some(UpdateGroup::Adam) => theta_slots.push(slot),
        }
    }
    for slot in phi_slots.iter().chain(theta_slots.iter()) {
        check_grad(slot)?;
    }
    let report = RouteReport {
        sgd_slots: phi_slots.iter().map(|s| s.id.clone()).collect(),
        adam_slots: theta_slots.iter().map(|s| s.id.clone()).collect(),
    };
    match phi {
        PhiOptimizer::Sgd(state) => sgd_step(&mut phi_slots, state)?,
        PhiOptimizer::Adam(state) => adam_step(&mut phi_slots, state)?,
    }
    adam_step(&mut theta_slots, adam)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar_slot(id: &str, p: Real, group: UpdateGroup) -> ParamSlot {
        ParamSlot::new(id, DenseMatrix::from_vec(1, 1, vec![p]).unwrap(), group, false)
    }

    #[test]
    fn sgd_exact_arithmetic() {
        let mut s = scalar_slot("c", 1.0, UpdateGroup::Sgd);
        s.grad.set(0, 0, 0.5);
        sgd_step(&mut [&mut s], &SgdState::new(0.1).unwrap()).unwrap();
        assert_eq!(s.values.get(0, 0), 0.95);
    }

    #[test]
    fn sgd_zero_grad_is_identity() {
        let mut s = ParamSlot::new("c", DenseMatrix::from_fn(4, 1, |r, _| r as Real), UpdateGroup::Sgd, false);
        let before = s.values.clone();
        sgd_step(&mut [&mut s], &SgdState::new(0.3).unwrap()).unwrap();
        assert_eq!(s.values, before);
    }

    #[test]
    fn sgd_matches_scalar_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let lr = 0.013;
        let mut s = scalar_slot("c", 0.4, UpdateGroup::Sgd);
        let mut reference = 0.4;
        for _ in 0..100 {
            let g: Real = rng.gen_range(-2.0..2.0);
            s.zero_grad();
            s.grad.set(0, 0, g);
            sgd_step(&mut [&mut s], &SgdState::new(lr).unwrap()).unwrap();
            reference -= lr * g;
        }
        assert!((s.values.get(0, 0) - reference).abs() <= 1e-15);
    }

    #[test]
    fn sgd_only_touches_marked_rows() {
        let mut s = ParamSlot::new("c", DenseMatrix::zeros(5, 1), UpdateGroup::Sgd, true);
        s.accumulate_row(3, 1.0, &[2.0]);
        sgd_step(&mut [&mut s], &SgdState::new(0.5).unwrap()).unwrap();
        assert_eq!(s.values.as_slice(), &[0.0, 0.0, 0.0, -1.0, 0.0]);
    }

    #[test]
    fn non_finite_grad_is_rejected_before_any_update() {
        let mut a = scalar_slot("a", 1.0, UpdateGroup::Adam);
        let mut b = scalar_slot("b", 1.0, UpdateGroup::Adam);
        a.grad.set(0, 0, 1.0);
        b.grad.set(0, 0, Real::NAN);
        let mut st = AdamState::new(0.1, 0.0).unwrap();
        let err = adam_step(&mut [&mut a, &mut b], &mut st).unwrap_err();
        assert!(matches!(err, DdpError::NonFiniteGrad(id) if id == "b"));
        assert_eq!(a.values.get(0, 0), 1.0);
        let mut c = scalar_slot("c", 1.0, UpdateGroup::Sgd);
        c.grad.set(0, 0, Real::INFINITY);
        assert!(sgd_step(&mut [&mut c], &SgdState::new(0.1).unwrap()).is_err());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        for g in [1e-2, 0.3, -4.0, 1e3] {
            let mut s = scalar_slot("w", 0.0, UpdateGroup::Adam);
            s.grad.set(0, 0, g);
            let mut st = AdamState::new(0.01, 0.0).unwrap();
            adam_step(&mut [&mut s], &mut st).unwrap();
            let delta = s.values.get(0, 0);
            assert!((delta + 0.01 * g.signum()).abs() < 1e-5, "g={g} delta={delta}");
        }
    }

    #[test]
    fn adam_matches_reference_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let lr = 0.02;
        let mut s = scalar_slot("w", 0.7, UpdateGroup::Adam);
        let mut st = AdamState::new(lr, 0.0).unwrap();
        let (mut p, mut m, mut v) = (0.7f64, 0.0f64, 0.0f64);
        for t in 1..=50 {
            let g: Real = rng.gen_range(-1.0..1.0);
            s.zero_grad();
            s.grad.set(0, 0, g);
            adam_step(&mut [&mut s], &mut st).unwrap();
            let g = g as f64;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            p -= lr as f64 * mh / (vh.sqrt() + 1e-8);
        }
        let tol = if cfg!(feature = "f32") { 1e-5 } else { 1e-12 };
        assert!((s.values.get(0, 0) as f64 - p).abs() <= tol);
    }

    #[test]
    fn adam_untouched_sparse_row_is_unchanged() {
        let mut s = ParamSlot::new("e", DenseMatrix::from_fn(4, 2, |r, c| (r + c) as Real), UpdateGroup::Adam, true);
        let mut st = AdamState::new(0.1, 1e-3).unwrap();
        s.accumulate_row(1, 1.0, &[0.5, -0.5]);
        adam_step(&mut [&mut s], &mut st).unwrap();
        let mom = st.moments_for("e").unwrap();
        assert_eq!(mom.steps, vec![0, 1, 0, 0]);
        assert_eq!(s.values.row(0), &[0.0, 1.0]);
        assert_eq!(s.values.row(2), &[2.0, 3.0]);
        assert_eq!(mom.m.row(2), &[0.0, 0.0]);
        s.zero_grad();
        adam_step(&mut [&mut s], &mut st).unwrap();
        assert_eq!(st.moments_for("e").unwrap().steps, vec![0, 1, 0, 0]);
    }

    #[test]
    fn lazy_equals_dense_when_all_rows_touched() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let init = DenseMatrix::from_fn(3, 2, |r, c| 0.1 * (r * 2 + c) as Real);
        let mut sparse = ParamSlot::new("t", init.clone(), UpdateGroup::Adam, true);
        let mut dense = ParamSlot::new("t", init, UpdateGroup::Adam, false);
        let mut st_s = AdamState::new(0.05, 1e-4).unwrap();
        let mut st_d = st_s.clone();
        for _ in 0..20 {
            sparse.zero_grad();
            dense.zero_grad();
            for r in [2usize, 0, 1] {
                let g: [Real; 2] = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
                sparse.accumulate_row(r, 1.0, &g);
                dense.accumulate_row(r, 1.0, &g);
            }
            adam_step(&mut [&mut sparse], &mut st_s).unwrap();
            adam_step(&mut [&mut dense], &mut st_d).unwrap();
        }
        for (a, b) in sparse.values.as_slice().iter().zip(dense.values.as_slice()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn adam_step_size_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let lr = 0.01;
        let mut s = ParamSlot::new("w", DenseMatrix::zeros(1, 8), UpdateGroup::Adam, false);
        let mut st = AdamState::new(lr, 1e-6).unwrap();
        for _ in 0..200 {
            s.zero_grad();
            for g in s.grad.as_mut_slice() {
                *g = rng.gen_range(-1.0..1.0) * 10f64.powi(rng.gen_range(-6..6)) as Real;
            }
            let before = s.values.clone();
            adam_step(&mut [&mut s], &mut st).unwrap();
            for (a, b) in s.values.as_slice().iter().zip(before.as_slice()) {
                assert!((a - b).abs() <= 10.0 * lr);
            }
        }
        assert!(st.moments_for("w").unwrap().v.as_slice().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn routing_partitions_by_tag() {
        let mut c = scalar_slot("fp.c", 1.0, UpdateGroup::Sgd);
        let mut w = scalar_slot("dnn.w0", 1.0, UpdateGroup::Adam);
        c.grad.set(0, 0, 1.0);
        w.grad.set(0, 0, 1.0);
        let mut phi = PhiOptimizer::new(PhiOptimizerKind::Sgd, 0.1).unwrap();
        let mut adam = AdamState::new(0.01, 0.0).unwrap();
        let report = route_and_step(vec![&mut c, &mut w], &mut phi, &mut adam).unwrap();
        assert_eq!(report.sgd_slots, vec!["fp.c".to_string()]);
        assert_eq!(report.adam_slots, vec!["dnn.w0".to_string()]);
        assert_eq!(c.values.get(0, 0), 0.9);
        assert!((w.values.get(0, 0) - 0.99).abs() < 1e-9);
        assert!(adam.moments_for("fp.c").is_none());
    }

    #[test]
    fn routing_with_only_phi_skips_adam() {
        let mut c = scalar_slot("fp.c", 1.0, UpdateGroup::Sgd);
        c.grad.set(0, 0, 2.0);
        let mut phi = PhiOptimizer::new(PhiOptimizerKind::Sgd, 0.1).unwrap();
        let mut adam = AdamState::new(0.01, 0.0).unwrap();
        let report = route_and_step(vec![&mut c], &mut phi, &mut adam).unwrap();
        assert!(report.adam_slots.is_empty());
        assert!(adam.moments.is_empty());
        assert_eq!(c.values.get(0, 0), 0.8);
    }

    #[test]
    fn routing_rejects_untagged_slot() {
        let mut c = scalar_slot("fp.c", 1.0, UpdateGroup::Sgd);
        let mut u = ParamSlot::untagged("mystery", DenseMatrix::zeros(1, 1), false);
        c.grad.set(0, 0, 1.0);
        let mut phi = PhiOptimizer::new(PhiOptimizerKind::Sgd, 0.1).unwrap();
        let mut adam = AdamState::new(0.01, 0.0).unwrap();
        let err = route_and_step(vec![&mut c, &mut u], &mut phi, &mut adam).unwrap_err();
        assert!(matches!(err, DdpError::UntaggedSlot(id) if id == "mystery"));
        assert_eq!(c.values.get(0, 0), 1.0);
    }

    #[test]
    fn rates_must_be_positive() {
        assert!(SgdState::new(0.0).is_err());
        assert!(AdamState::new(-1.0, 0.0).is_err());
        assert!(AdamState::new(0.1, -1.0).is_err());
    }
}
