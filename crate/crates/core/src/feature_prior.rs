//! Feature prior layer.
//!
//! Each sparse feature value `k` owns one scalar logit `C[k]`; `σ(C[k])`
//! estimates that value's marginal click rate and is trained only by the
//! auxiliary loss below. The estimate is bucketed on a square-root scale
//! and the bucket selects a row of a per-field bin embedding `U_i`, which
//! is appended to the regular field embeddings before the interaction
//! module. Bucketing is a hard step, so no gradient of the main loss ever
//! reaches `C`.

use rand::Rng;

use crate::embedding::{EmbeddingTable, EncodedInstance};
use crate::error::{DdpError, Result};
use crate::nn_core::{bce, sigmoid, DenseMatrix, ParamSlot, Real, UpdateGroup};

pub const C_SLOT: &str = "fp.c";
pub const U_SLOT: &str = "fp.u";

/// Bucket of a probability on the `√p` scale: `min(⌊B·√p⌋, B-1)`.
#[inline]
pub fn discretize(shat: Real, bins: usize) -> usize {
    let b = (bins as Real * shat.max(0.0).sqrt()).floor() as usize;
    b.min(bins - 1)
}

/// Lower and upper probability edges of bucket `k`.
pub fn bin_edges(k: usize, bins: usize) -> (Real, Real) {
    let lo = k as Real / bins as Real;
    let hi = (k + 1) as Real / bins as Real;
    (lo * lo, hi * hi)
}

/// Per-instance auxiliary loss: mean over fields of `bce(ŝ_i, y)`.
pub fn fp_loss(shat: &[Real], y: Real) -> Real {
    shat.iter().map(|&s| bce(s, y)).sum::<Real>() / shat.len() as Real
}

/// `e′ = [e_1..e_M, o_1..o_M]`.
pub fn concat_prior(e: &[Vec<Real>], o: &[Vec<Real>]) -> Result<Vec<Vec<Real>>> {
    if e.len() != o.len() {
        return Err(DdpError::DimMismatch(format!("{} field embeddings vs {} prior embeddings", e.len(), o.len())));
    }
    if let Some(d) = e.first().map(Vec::len) {
        if e.iter().chain(o).any(|v| v.len() != d) {
            return Err(DdpError::DimMismatch("embedding widths differ".into()));
        }
    }
    Ok(e.iter().chain(o).cloned().collect())
}

#[derive(Clone, Debug)]
pub struct PriorOutput {
    pub shat: Vec<Real>,
    pub bins: Vec<usize>,
    pub o: Vec<Vec<Real>>,
}

/// Batch-level prior estimates, row-major `n × M`.
#[derive(Clone, Debug, Default)]
pub struct PriorBatch {
    pub shat: Vec<Real>,
    /// Row of the stacked `U` table per (instance, field).
    pub bin_rows: Vec<u32>,
}

#[derive(Clone, Debug)]
pub struct FeaturePriorLayer {
    pub c: ParamSlot,
    pub u: EmbeddingTable,
    bins: usize,
    fields: usize,
}

impl FeaturePriorLayer {
    pub fn new(values: usize, fields: usize, bins: usize, dim: usize, init_scale: Real, rng: &mut impl Rng) -> Result<Self> {
        if bins < 2 {
            return Err(DdpError::Config(format!("bin count must be at least 2, got {bins}")));
        }
        Ok(FeaturePriorLayer {
            c: ParamSlot::new(C_SLOT, DenseMatrix::zeros(values, 1), UpdateGroup::Sgd, true),
            u: EmbeddingTable::new(U_SLOT, fields * bins, dim, init_scale, rng),
            bins,
            fields,
        })
    }

    pub fn from_parts(c: ParamSlot, u: EmbeddingTable, bins: usize, fields: usize) -> Self {
        FeaturePriorLayer { c, u, bins, fields }
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn fields(&self) -> usize {
        self.fields
    }

    /// Sets every prior logit to `logit` (0 gives ŝ = 0.5).
    pub fn init_c(&mut self, logit: Real) {
        self.c.values.fill(logit);
    }

    fn pooled_logit(&self, idx: &[u32]) -> Result<Real> {
        let n = self.c.values.rows();
        let mut sum = 0.0;
        for &k in idx {
            let k = k as usize;
            if k >= n {
                return Err(DdpError::IndexOutOfRange {
                    what: C_SLOT.into(),
                    index: k,
                    limit: n,
                });
            }
            sum += self.c.values.get(k, 0);
        }
        Ok(sum / idx.len() as Real)
    }

    /// ŝ per field: sigmoid of the mean prior logit over the field's indices.
    pub fn fp_forward(&self, inst: &EncodedInstance) -> Result<Vec<Real>> {
        inst.fields.iter().map(|idx| self.pooled_logit(idx).map(sigmoid)).collect()
    }

    /// Bin-embedding rows `o_i` for per-field bins; records the touched
    /// rows for the sparse update.
    pub fn build_prior_embedding(&mut self, bins: &[usize]) -> Result<Vec<Vec<Real>>> {
        if bins.len() != self.fields {
            return Err(DdpError::DimMismatch(format!("{} bins for {} fields", bins.len(), self.fields)));
        }
        let rows: Vec<[u32; 1]> = bins
            .iter()
            .enumerate()
            .map(|(i, &b)| {
                if b >= self.bins {
                    Err(DdpError::IndexOutOfRange {
                        what: U_SLOT.into(),
                        index: b,
                        limit: self.bins,
                    })
                } else {
                    Ok([(i * self.bins + b) as u32])
                }
            })
            .collect::<Result<_>>()?;
        let d = self.u.dim();
        let mut out = DenseMatrix::zeros(1, self.fields * d);
        self.u.gather_recorded(rows.iter().map(|r| &r[..]), self.fields, &mut out, 0)?;
        Ok(out.as_slice().chunks(d).map(<[Real]>::to_vec).collect())
    }

    /// Full single-instance pass: estimates, bins and bin embeddings.
    pub fn forward(&mut self, inst: &EncodedInstance) -> Result<PriorOutput> {
        let shat = self.fp_forward(inst)?;
        let bins: Vec<usize> = shat.iter().map(|&s| discretize(s, self.bins)).collect();
        let o = self.build_prior_embedding(&bins)?;
        Ok(PriorOutput { shat, bins, o })
    }

    pub fn estimate_batch(&self, batch: &[&EncodedInstance]) -> Result<PriorBatch> {
        let mut out = PriorBatch {
            shat: Vec::with_capacity(batch.len() * self.fields),
            bin_rows: Vec::with_capacity(batch.len() * self.fields),
        };
        for inst in batch {
            for (i, idx) in inst.fields.iter().enumerate() {
                let s = sigmoid(self.pooled_logit(idx)?);
                out.shat.push(s);
                out.bin_rows.push((i * self.bins + discretize(s, self.bins)) as u32);
            }
        }
        Ok(out)
    }

    /// Mean auxiliary loss over a batch.
    pub fn batch_loss(&self, batch: &[&EncodedInstance], prior: &PriorBatch) -> Real {
        let m = self.fields;
        batch
            .iter()
            .enumerate()
            .map(|(r, inst)| fp_loss(&prior.shat[r * m..(r + 1) * m], inst.y()))
            .sum::<Real>()
            / batch.len() as Real
    }

    /// Accumulates `scale · ∂(batch-mean auxiliary loss)/∂C` into `c.grad`.
    pub fn accumulate_c_grad(&mut self, batch: &[&EncodedInstance], prior: &PriorBatch, scale: Real) {
        let m = self.fields;
        let base = scale / (batch.len() * m) as Real;
        for (r, inst) in batch.iter().enumerate() {
            let y = inst.y();
            for (i, idx) in inst.fields.iter().enumerate() {
                let g = base * (prior.shat[r * m + i] - y) / idx.len() as Real;
                for &k in idx {
                    self.c.accumulate_row(k as usize, 1.0, &[g]);
                }
            }
        }
    }
}
