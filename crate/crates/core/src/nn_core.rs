//! Numeric primitives shared by every learnable module: the scalar type,
//! a row-major dense matrix, activation/loss functions, parameter slots and
//! a central-difference gradient checker.

use std::fmt;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{DdpError, Result};

#[cfg(not(feature = "f32"))]
pub type Real = f64;
#[cfg(feature = "f32")]
pub type Real = f32;

/// Probability clamp used inside every log term.
pub const PROB_EPS: Real = 1e-7;

/// Logistic function, branching on sign so neither tail overflows.
#[inline]
pub fn sigmoid(z: Real) -> Real {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: Real) -> Real {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    (p / (1.0 - p)).ln()
}

#[inline]
pub fn clamp_prob(p: Real) -> Real {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Binary cross entropy with the probability clamped to `[ε, 1-ε]`.
#[inline]
pub fn bce(p: Real, y: Real) -> Real {
    let p = clamp_prob(p);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

#[derive(Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<Real>,
}

impl fmt::Debug for DenseMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "DenseMatrix({}x{})", self.rows, self.cols)
    }
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<Real>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(DdpError::DimMismatch(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(DenseMatrix { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> Real) -> Self {
        let mut m = Self::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                m.data[r * cols + c] = f(r, c);
            }
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[Real] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [Real] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> Real {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: Real) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[Real] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [Real] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn fill(&mut self, v: Real) {
        self.data.fill(v);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(not(feature = "f32"))]
use matrixmultiply::dgemm as raw_gemm;
#[cfg(feature = "f32")]
use matrixmultiply::sgemm as raw_gemm;

/// `c = a·b + beta·c` where either operand may be read transposed.
pub fn gemm(a: &DenseMatrix, trans_a: bool, b: &DenseMatrix, trans_b: bool, beta: Real, c: &mut DenseMatrix) {
    let (m, k, rsa, csa) = if trans_a {
        (a.cols, a.rows, 1, a.cols)
    } else {
        (a.rows, a.cols, a.cols, 1)
    };
    let (kb, n, rsb, csb) = if trans_b {
        (b.cols, b.rows, 1, b.cols)
    } else {
        (b.rows, b.cols, b.cols, 1)
    };
    assert_eq!(k, kb, "gemm inner dimension");
    assert_eq!((c.rows, c.cols), (m, n), "gemm output shape");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in &mut c.data {
            *v *= beta;
        }
        return;
    }
    // SAFETY: strides and extents are derived from the matrices' own shapes,
    // which the asserts above tie together.
    unsafe {
        raw_gemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa as isize,
            csa as isize,
            b.data.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.data.as_mut_ptr(),
            c.cols as isize,
            1,
        );
    }
}

/// Which optimizer owns a slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum UpdateGroup {
    /// The feature-prior vector; plain SGD on its own loss.
    Sgd,
    /// Everything else; Adam on the combined likelihood + prior loss.
    Adam,
}

/// A named parameter tensor with its gradient buffer.
///
/// Sparse slots track which rows received gradient since the last
/// [`ParamSlot::zero_grad`], so optimizers can skip the rest.
#[derive(Clone, Debug)]
pub struct ParamSlot {
    pub id: String,
    pub values: DenseMatrix,
    pub grad: DenseMatrix,
    pub group: Option<UpdateGroup>,
    pub sparse: bool,
    touched: Vec<usize>,
    mask: Vec<bool>,
}

impl ParamSlot {
    pub fn new(id: impl Into<String>, values: DenseMatrix, group: UpdateGroup, sparse: bool) -> Self {
        let mut slot = Self::untagged(id, values, sparse);
        slot.group = Some(group);
        slot
    }

    pub fn untagged(id: impl Into<String>, values: DenseMatrix, sparse: bool) -> Self {
        let (rows, cols) = values.shape();
        ParamSlot {
            id: id.into(),
            grad: DenseMatrix::zeros(rows, cols),
            values,
            group: None,
            sparse,
            touched: Vec::new(),
            mask: if sparse { vec![false; rows] } else { Vec::new() },
        }
    }

    /// Values-only copy with no gradient buffers.
    pub fn frozen(&self) -> Self {
        ParamSlot {
            id: self.id.clone(),
            values: self.values.clone(),
            grad: DenseMatrix::zeros(0, 0),
            group: self.group,
            sparse: self.sparse,
            touched: Vec::new(),
            mask: Vec::new(),
        }
    }

    pub fn has_grad(&self) -> bool {
        self.grad.shape() == self.values.shape()
    }

    /// Restores gradient buffers on a frozen copy.
    pub fn thaw(&mut self) {
        let (rows, cols) = self.values.shape();
        self.grad = DenseMatrix::zeros(rows, cols);
        self.touched.clear();
        self.mask = if self.sparse { vec![false; rows] } else { Vec::new() };
    }

    #[inline]
    pub fn mark_row(&mut self, r: usize) {
        if self.sparse && !self.mask[r] {
            self.mask[r] = true;
            self.touched.push(r);
        }
    }

    /// Adds `delta` into row `r` of the gradient and marks the row touched.
    #[inline]
    pub fn accumulate_row(&mut self, r: usize, scale: Real, delta: &[Real]) {
        self.mark_row(r);
        for (g, d) in self.grad.row_mut(r).iter_mut().zip(delta) {
            *g += scale * d;
        }
    }

    /// Rows that currently carry gradient: the touched set for sparse
    /// slots, every row for dense ones. Sparse rows come back sorted.
    pub fn active_rows(&self) -> Vec<usize> {
        if self.sparse {
            let mut rows = self.touched.clone();
            rows.sort_unstable();
            rows
        } else {
            (0..self.values.rows()).collect()
        }
    }

    pub fn touched_count(&self) -> usize {
        if self.sparse {
            self.touched.len()
        } else {
            self.values.rows()
        }
    }

    pub fn zero_grad(&mut self) {
        if self.sparse {
            for &r in &self.touched {
                self.grad.row_mut(r).fill(0.0);
                self.mask[r] = false;
            }
            self.touched.clear();
        } else {
            self.grad.fill(0.0);
        }
    }
}

/// A model the gradient checker can probe: it exposes its slots by index,
/// a scalar loss at the current parameters, and analytic gradients.
pub trait GradCheckable {
    fn slot_count(&self) -> usize;
    fn slot(&self, i: usize) -> &ParamSlot;
    fn slot_mut(&mut self, i: usize) -> &mut ParamSlot;
    fn loss(&mut self) -> Result<Real>;
    /// Recomputes analytic gradients into every slot's `grad`.
    fn gradients(&mut self) -> Result<()>;
}

#[derive(Clone, Debug)]
pub struct SlotCheck {
    pub id: String,
    pub samples: usize,
    pub max_rel_err: Real,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: Real,
    pub samples: usize,
    pub slots: Vec<SlotCheck>,
}

impl GradCheckReport {
    pub fn worst_slot(&self) -> Option<&SlotCheck> {
        self.slots
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

pub const DEFAULT_GRAD_CHECK_EPS: Real = 1e-5;

/// Compares analytic gradients against central differences on at least
/// `min_samples` coordinates, spread so that every slot is sampled.
/// Sparse slots are sampled from their touched rows only.
pub fn grad_check(
    model: &mut dyn GradCheckable,
    eps: Real,
    min_samples: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    model.gradients()?;

    let n_slots = model.slot_count();
    let per_slot = min_samples.div_ceil(n_slots.max(1)).max(1);
    let mut plan: Vec<(usize, Vec<(usize, usize, Real)>)> = Vec::with_capacity(n_slots);
    for s in 0..n_slots {
        let slot = model.slot(s);
        let rows = slot.active_rows();
        let cols = slot.values.cols();
        let total = rows.len() * cols;
        let take = per_slot.min(total);
        let coords = sample(&mut rng, total, take)
            .into_iter()
            .map(|flat| {
                let (r, c) = (rows[flat / cols], flat % cols);
                (r, c, slot.grad.get(r, c))
            })
            .collect();
        plan.push((s, coords));
    }

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        samples: 0,
        slots: Vec::with_capacity(n_slots),
    };
    for (s, coords) in plan {
        let mut worst: Real = 0.0;
        for &(r, c, analytic) in &coords {
            let orig = model.slot(s).values.get(r, c);
            model.slot_mut(s).values.set(r, c, orig + eps);
            let plus = model.loss();
            model.slot_mut(s).values.set(r, c, orig - eps);
            let minus = model.loss();
            model.slot_mut(s).values.set(r, c, orig);
            let (plus, minus) = (plus?, minus?);
            if !plus.is_finite() || !minus.is_finite() {
                return Err(DdpError::NonFiniteLoss(format!(
                    "{}[{r},{c}] perturbed",
                    model.slot(s).id
                )));
            }
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max(relative_error(analytic, numeric));
        }
        report.samples += coords.len();
        report.max_rel_err = report.max_rel_err.max(worst);
        report.slots.push(SlotCheck {
            id: model.slot(s).id.clone(),
            samples: coords.len(),
            max_rel_err: worst,
        });
    }
    Ok(report)
}

#[inline]
pub fn relative_error(a: Real, b: Real) -> Real {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_values() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid((3.0 as Real).ln()) - 0.75).abs() < 1e-15);
        let tiny = sigmoid(-1000.0);
        assert!(tiny >= 0.0 && tiny <= 1e-300);
        assert_eq!(sigmoid(1000.0), 1.0);
        assert!(sigmoid(-500.0) > 0.0);
    }

    #[test]
    fn bce_values() {
        assert!((bce(0.5, 1.0) - std::f64::consts::LN_2 as Real).abs() < 1e-15);
        let clamped = bce(1.0, 1.0);
        assert!(clamped > 0.0 && (clamped - 1e-7).abs() < 1e-12);
        assert!((bce(0.2, 0.0) - 0.223_143_551_314_209_7).abs() < 1e-12);
    }

    #[test]
    fn gemm_transposes() {
        let a = DenseMatrix::from_vec(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = DenseMatrix::from_vec(3, 2, vec![1., 0., 0., 1., 1., 1.]).unwrap();
        let mut c = DenseMatrix::zeros(2, 2);
        gemm(&a, false, &b, false, 0.0, &mut c);
        assert_eq!(c.as_slice(), &[4., 5., 10., 11.]);
        // aᵀ·a
        let mut g = DenseMatrix::zeros(3, 3);
        gemm(&a, true, &a, false, 0.0, &mut g);
        assert_eq!(g.row(0), &[17., 22., 27.]);
        // a·aᵀ accumulated twice
        let mut h = DenseMatrix::zeros(2, 2);
        gemm(&a, false, &a, true, 0.0, &mut h);
        gemm(&a, false, &a, true, 1.0, &mut h);
        assert_eq!(h.as_slice(), &[28., 64., 64., 154.]);
    }

    #[test]
    fn sparse_slot_tracks_rows() {
        let mut slot = ParamSlot::new("t", DenseMatrix::zeros(5, 2), UpdateGroup::Adam, true);
        slot.accumulate_row(3, 1.0, &[1.0, 2.0]);
        slot.accumulate_row(1, 0.5, &[2.0, 2.0]);
        slot.accumulate_row(3, 1.0, &[1.0, 0.0]);
        assert_eq!(slot.active_rows(), vec![1, 3]);
        assert_eq!(slot.grad.row(3), &[2.0, 2.0]);
        assert_eq!(slot.grad.row(0), &[0.0, 0.0]);
        slot.zero_grad();
        assert!(slot.active_rows().is_empty());
        assert!(slot.grad.as_slice().iter().all(|&g| g == 0.0));
    }

    struct Constant {
        slot: ParamSlot,
    }

    impl GradCheckable for Constant {
        fn slot_count(&self) -> usize {
            1
        }
        fn slot(&self, _: usize) -> &ParamSlot {
            &self.slot
        }
        fn slot_mut(&mut self, _: usize) -> &mut ParamSlot {
            &mut self.slot
        }
        fn loss(&mut self) -> Result<Real> {
            Ok(3.0)
        }
        fn gradients(&mut self) -> Result<()> {
            self.slot.zero_grad();
            Ok(())
        }
    }

    #[test]
    fn grad_check_constant_model_is_exact() {
        let mut m = Constant {
            slot: ParamSlot::untagged("w", DenseMatrix::from_fn(20, 20, |r, c| (r + c) as Real), false),
        };
        let report = grad_check(&mut m, DEFAULT_GRAD_CHECK_EPS, 200, 1).unwrap();
        assert_eq!(report.max_rel_err, 0.0);
        assert!(report.samples >= 200);
    }

    /// Logistic regression neuron: mean BCE of σ(w·x + b) over a fixed batch.
    struct Neuron {
        w: ParamSlot,
        b: ParamSlot,
        xs: Vec<[Real; 3]>,
        ys: Vec<Real>,
        corrupt: bool,
    }

    impl Neuron {
        fn new(corrupt: bool) -> Self {
            let xs: Vec<[Real; 3]> = (0..10)
                .map(|i| {
                    let t = i as Real;
                    [(t * 0.7).sin(), (t * 1.3).cos(), t / 10.0 - 0.5]
                })
                .collect();
            Neuron {
                w: ParamSlot::untagged("w", DenseMatrix::from_vec(3, 1, vec![0.3, -0.8, 0.5]).unwrap(), false),
                b: ParamSlot::untagged("b", DenseMatrix::from_vec(1, 1, vec![0.1]).unwrap(), false),
                ys: (0..10).map(|i| (i % 3 == 0) as u8 as Real).collect(),
                xs,
                corrupt,
            }
        }
        fn z(&self, x: &[Real; 3]) -> Real {
            let w = self.w.values.as_slice();
            w[0] * x[0] + w[1] * x[1] + w[2] * x[2] + self.b.values.get(0, 0)
        }
    }

    impl GradCheckable for Neuron {
        fn slot_count(&self) -> usize {
            2
        }
        fn slot(&self, i: usize) -> &ParamSlot {
            [&self.w, &self.b][i]
        }
        fn slot_mut(&mut self, i: usize) -> &mut ParamSlot {
            if i == 0 {
                &mut self.w
            } else {
                &mut self.b
            }
        }
        fn loss(&mut self) -> Result<Real> {
            let n = self.xs.len() as Real;
            Ok(self.xs.iter().zip(&self.ys).map(|(x, &y)| bce(sigmoid(self.z(x)), y)).sum::<Real>() / n)
        }
        fn gradients(&mut self) -> Result<()> {
            self.w.zero_grad();
            self.b.zero_grad();
            let n = self.xs.len() as Real;
            for (x, &y) in self.xs.iter().zip(&self.ys) {
                let d = (sigmoid(self.z(x)) - y) / n;
                for k in 0..3 {
                    let g = self.w.grad.get(k, 0) + d * x[k];
                    self.w.grad.set(k, 0, g);
                }
                let g = self.b.grad.get(0, 0) + d;
                self.b.grad.set(0, 0, g);
            }
            if self.corrupt {
                for g in self.w.grad.as_mut_slice() {
                    *g *= 2.0;
                }
            }
            Ok(())
        }
    }

    #[test]
    fn grad_check_single_neuron() {
        let report = grad_check(&mut Neuron::new(false), DEFAULT_GRAD_CHECK_EPS, 200, 7).unwrap();
        assert!(report.max_rel_err <= 1e-6, "{report:?}");
    }

    #[test]
    fn grad_check_catches_doubled_gradient() {
        let report = grad_check(&mut Neuron::new(true), DEFAULT_GRAD_CHECK_EPS, 200, 7).unwrap();
        assert!(report.max_rel_err >= 0.3);
        assert_eq!(report.worst_slot().unwrap().id, "w");
    }

    struct Exploding(ParamSlot);

    impl GradCheckable for Exploding {
        fn slot_count(&self) -> usize {
            1
        }
        fn slot(&self, _: usize) -> &ParamSlot {
            &self.0
        }
        fn slot_mut(&mut self, _: usize) -> &mut ParamSlot {
            &mut self.0
        }
        fn loss(&mut self) -> Result<Real> {
            Ok((1.0 / (self.0.values.get(0, 0) - 1.0)).ln())
        }
        fn gradients(&mut self) -> Result<()> {
            Ok(())
        }
    }

    #[test]
    fn grad_check_reports_non_finite_loss() {
        let mut m = Exploding(ParamSlot::untagged("x", DenseMatrix::from_vec(1, 1, vec![1.0]).unwrap(), false));
        assert!(matches!(
            grad_check(&mut m, 1e-5, 1, 0),
            Err(DdpError::NonFiniteLoss(_))
        ));
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn sigmoid_is_symmetric(z in -700.0f64..700.0) {
                let z = z as Real;
                prop_assert!((sigmoid(z) + sigmoid(-z) - 1.0).abs() <= 1e-15);
            }

            #[test]
            fn bce_is_non_negative(p in 0.0f64..=1.0, y in 0u8..2) {
                prop_assert!(bce(p as Real, y as Real) >= 0.0);
            }
        }
    }
}
