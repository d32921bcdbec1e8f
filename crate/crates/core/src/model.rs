//! The full CTR model `θ = {Φ, Θ}`: field embeddings, the optional
//! feature prior layer, DeepFM linear terms and the interaction module.

use rand::Rng;

use crate::embedding::{EmbeddingTable, EncodedInstance, Schema};
use crate::error::{DdpError, Result};
use crate::feature_prior::{FeaturePriorLayer, PriorBatch, C_SLOT};
use crate::interaction::{ForwardCache, Interaction, InteractionConfig, InteractionKind};
use crate::model_prior::{combined_loss, LossBreakdown, TeacherSnapshot};
use crate::nn_core::{sigmoid, DenseMatrix, GradCheckable, ParamSlot, Real};

pub const EMB_SLOT: &str = "emb.e";
pub const LINEAR_RAW_SLOT: &str = "fm.raw";
pub const LINEAR_BIN_SLOT: &str = "fm.bin";

const EVAL_CHUNK: usize = 4096;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub dim: usize,
    pub bins: usize,
    pub interaction: InteractionKind,
    pub hidden: Vec<usize>,
    pub feature_prior: bool,
    /// Half-width of the uniform init for `E` and `U`.
    pub embed_init: Real,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 16,
            bins: 10,
            interaction: InteractionKind::DeepFm,
            hidden: vec![200, 200, 200],
            feature_prior: true,
            embed_init: 0.01,
        }
    }
}

/// First-order (wide) weights of DeepFM: one scalar per raw value and,
/// with the prior active, one per (field, bin).
#[derive(Clone, Debug)]
pub struct LinearTerms {
    pub raw: EmbeddingTable,
    pub bins: Option<EmbeddingTable>,
}

#[derive(Clone, Debug)]
pub struct ModelState {
    schema: Schema,
    config: ModelConfig,
    pub emb: EmbeddingTable,
    pub prior: Option<FeaturePriorLayer>,
    pub linear: Option<LinearTerms>,
    pub net: Interaction,
}

/// Everything a training-mode forward leaves behind for `backward`.
#[derive(Debug)]
pub struct ModelCache {
    net: ForwardCache,
    rows: usize,
}

impl ModelState {
    pub fn new(schema: Schema, config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        if config.dim == 0 {
            return Err(DdpError::Config("embedding dimension must be positive".into()));
        }
        let n = schema.total_values();
        let m = schema.field_count();
        let emb = EmbeddingTable::new(EMB_SLOT, n, config.dim, config.embed_init, rng);
        let prior = if config.feature_prior {
            Some(FeaturePriorLayer::new(n, m, config.bins, config.dim, config.embed_init, rng)?)
        } else {
            None
        };
        let linear = (config.interaction == InteractionKind::DeepFm).then(|| {
            let mut raw = EmbeddingTable::new(LINEAR_RAW_SLOT, n, 1, 1.0, rng);
            raw.slot.values.fill(0.0);
            let bins = config.feature_prior.then(|| {
                let mut t = EmbeddingTable::new(LINEAR_BIN_SLOT, m * config.bins, 1, 1.0, rng);
                t.slot.values.fill(0.0);
                t
            });
            LinearTerms { raw, bins }
        });
        let vectors = if config.feature_prior { 2 * m } else { m };
        let net = Interaction::new(
            InteractionConfig {
                kind: config.interaction,
                hidden: config.hidden.clone(),
                vectors,
                dim: config.dim,
            },
            rng,
        )?;
        Ok(ModelState {
            schema,
            config,
            emb,
            prior,
            linear,
            net,
        })
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// All parameter slots in a fixed order.
    pub fn slots(&self) -> Vec<&ParamSlot> {
        let mut out = vec![&self.emb.slot];
        if let Some(p) = &self.prior {
            out.push(&p.c);
            out.push(&p.u.slot);
        }
        if let Some(l) = &self.linear {
            out.push(&l.raw.slot);
            if let Some(b) = &l.bins {
                out.push(&b.slot);
            }
        }
        out.extend(self.net.slots());
        out
    }

    pub fn slots_mut(&mut self) -> Vec<&mut ParamSlot> {
        let mut out = vec![&mut self.emb.slot];
        if let Some(p) = &mut self.prior {
            out.push(&mut p.c);
            out.push(&mut p.u.slot);
        }
        if let Some(l) = &mut self.linear {
            out.push(&mut l.raw.slot);
            if let Some(b) = &mut l.bins {
                out.push(&mut b.slot);
            }
        }
        out.extend(self.net.slots_mut());
        out
    }

    pub fn zero_grad(&mut self) {
        for s in self.slots_mut() {
            s.zero_grad();
        }
    }

    /// Call after any parameter update so stale forward caches are refused.
    pub fn mark_updated(&mut self) {
        self.net.mark_updated();
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.slots().into_iter().find(|s| !s.values.is_finite()) {
            Some(s) => Err(DdpError::NonFiniteState(s.id.clone())),
            None => Ok(()),
        }
    }

    /// Values-only deep copy (no gradient buffers).
    pub fn frozen(&self) -> Self {
        let mut copy = self.clone();
        for s in copy.slots_mut() {
            *s = s.frozen();
        }
        copy.emb.clear_pending();
        if let Some(p) = &mut copy.prior {
            p.u.clear_pending();
        }
        if let Some(l) = &mut copy.linear {
            l.raw.clear_pending();
            if let Some(b) = &mut l.bins {
                b.clear_pending();
            }
        }
        copy
    }

    /// Restores gradient buffers on a frozen copy.
    pub fn thaw(&mut self) {
        for s in self.slots_mut() {
            s.thaw();
        }
    }

    fn vectors(&self) -> usize {
        self.net.config().vectors
    }

    pub fn estimate_prior(&self, batch: &[&EncodedInstance]) -> Result<Option<PriorBatch>> {
        self.prior.as_ref().map(|p| p.estimate_batch(batch)).transpose()
    }

    /// Builds `e′` (and the DeepFM linear term) for a batch.
    fn assemble(&self, batch: &[&EncodedInstance], prior: Option<&PriorBatch>) -> Result<(DenseMatrix, Option<Vec<Real>>)> {
        let n = batch.len();
        let m = self.schema.field_count();
        let d = self.config.dim;
        let groups = || batch.iter().flat_map(|inst| inst.fields.iter().map(Vec::as_slice));
        let bins = || prior.map(|p| p.bin_rows.chunks(1)).into_iter().flatten();
        let mut x = DenseMatrix::zeros(n, self.vectors() * d);
        self.emb.gather(groups(), m, &mut x, 0)?;
        if let Some(layer) = &self.prior {
            layer.u.gather(bins(), m, &mut x, m * d)?;
        }
        let linear = match &self.linear {
            None => None,
            Some(lin) => {
                let mut raw = DenseMatrix::zeros(n, m);
                lin.raw.gather(groups(), m, &mut raw, 0)?;
                let mut sums: Vec<Real> = raw.as_slice().chunks(m).map(|r| r.iter().sum()).collect();
                if let Some(bt) = &lin.bins {
                    let mut b = DenseMatrix::zeros(n, m);
                    bt.gather(bins(), m, &mut b, 0)?;
                    for (s, r) in sums.iter_mut().zip(b.as_slice().chunks(m)) {
                        *s += r.iter().sum::<Real>();
                    }
                }
                Some(sums)
            }
        };
        Ok((x, linear))
    }

    fn record_lookups(&mut self, batch: &[&EncodedInstance], prior: Option<&PriorBatch>) {
        let m = self.schema.field_count();
        let d = self.config.dim;
        let groups = || batch.iter().flat_map(|inst| inst.fields.iter().map(Vec::as_slice));
        let bins = || prior.map(|p| p.bin_rows.chunks(1)).into_iter().flatten();
        self.emb.record(groups(), m, 0);
        if let Some(layer) = self.prior.as_mut() {
            layer.u.record(bins(), m, m * d);
        }
        if let Some(lin) = self.linear.as_mut() {
            lin.raw.record(groups(), m, 0);
            if let Some(bt) = lin.bins.as_mut() {
                bt.record(bins(), m, 0);
            }
        }
    }

    /// Training-mode forward returning click probabilities.
    pub fn forward_train(&mut self, batch: &[&EncodedInstance], prior: Option<&PriorBatch>) -> Result<(Vec<Real>, ModelCache)> {
        if batch.is_empty() {
            return Err(DdpError::EmptyBatch);
        }
        let owned;
        let prior = match (&self.prior, prior) {
            (Some(layer), None) => {
                owned = layer.estimate_batch(batch)?;
                Some(&owned)
            }
            (Some(_), p) => p,
            (None, _) => None,
        };
        let (x, linear) = self.assemble(batch, prior)?;
        self.record_lookups(batch, prior);
        let (logits, net) = self.net.forward_train(x, linear.as_deref())?;
        Ok((
            logits.into_iter().map(sigmoid).collect(),
            ModelCache { net, rows: batch.len() },
        ))
    }

    /// Routes `∂L/∂logit` back to every Θ slot.
    pub fn backward(&mut self, cache: ModelCache, dlogit: &[Real]) -> Result<()> {
        let n = cache.rows;
        let dx = self.net.backward(cache.net, dlogit)?;
        self.emb.scatter_grad(&dx)?;
        if let Some(layer) = self.prior.as_mut() {
            layer.u.scatter_grad(&dx)?;
        }
        if let Some(lin) = self.linear.as_mut() {
            let m = self.schema.field_count();
            let up = DenseMatrix::from_fn(n, m, |r, _| dlogit[r]);
            lin.raw.scatter_grad(&up)?;
            if let Some(bt) = lin.bins.as_mut() {
                bt.scatter_grad(&up)?;
            }
        }
        Ok(())
    }

    fn predict_chunk(&self, batch: &[&EncodedInstance]) -> Result<Vec<Real>> {
        let prior = self.estimate_prior(batch)?;
        let (x, linear) = self.assemble(batch, prior.as_ref())?;
        Ok(self
            .net
            .forward_eval(&x, linear.as_deref())?
            .into_iter()
            .map(sigmoid)
            .collect())
    }

    /// Evaluation-mode click probabilities.
    pub fn predict(&self, batch: &[&EncodedInstance]) -> Result<Vec<Real>> {
        let mut out = Vec::with_capacity(batch.len());
        for chunk in batch.chunks(EVAL_CHUNK) {
            out.extend(self.predict_chunk(chunk)?);
        }
        Ok(out)
    }

    pub fn predict_all(&self, instances: &[EncodedInstance]) -> Result<Vec<Real>> {
        let refs: Vec<&EncodedInstance> = instances.iter().collect();
        self.predict(&refs)
    }

    /// Combined likelihood + output-prior loss at the current parameters.
    pub fn main_loss(&self, batch: &[&EncodedInstance], teacher: Option<&TeacherSnapshot>, lambda: Real) -> Result<LossBreakdown> {
        let p = self.predict(batch)?;
        let y: Vec<Real> = batch.iter().map(|i| i.y()).collect();
        let pt = teacher.map(|t| t.predict(batch)).transpose()?;
        Ok(combined_loss(&p, &y, pt.as_deref(), lambda)?.0)
    }
}

/// Which objective a gradient check differentiates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    /// Likelihood + λ/2·prior loss over every Θ slot.
    Main,
    /// The feature-prior auxiliary loss over `C`.
    FeaturePrior,
}

/// Adapter exposing a model, a fixed batch and an objective to
/// [`crate::nn_core::grad_check`].
pub struct ModelGradCheck<'a> {
    pub model: &'a mut ModelState,
    pub batch: Vec<&'a EncodedInstance>,
    pub teacher: Option<&'a TeacherSnapshot>,
    pub lambda: Real,
    pub objective: Objective,
    /// Doubles the analytic gradient of this slot (debugging aid).
    pub corrupt: Option<String>,
    indices: Vec<usize>,
}

impl<'a> ModelGradCheck<'a> {
    pub fn new(
        model: &'a mut ModelState,
        batch: Vec<&'a EncodedInstance>,
        teacher: Option<&'a TeacherSnapshot>,
        lambda: Real,
        objective: Objective,
    ) -> Self {
        let indices = model
            .slots()
            .iter()
            .enumerate()
            .filter(|(_, s)| (s.id == C_SLOT) == (objective == Objective::FeaturePrior))
            .map(|(i, _)| i)
            .collect();
        ModelGradCheck {
            model,
            batch,
            teacher,
            lambda,
            objective,
            corrupt: None,
            indices,
        }
    }
}

impl GradCheckable for ModelGradCheck<'_> {
    fn slot_count(&self) -> usize {
        self.indices.len()
    }

    fn slot(&self, i: usize) -> &ParamSlot {
        self.model.slots()[self.indices[i]]
    }

    fn slot_mut(&mut self, i: usize) -> &mut ParamSlot {
        let k = self.indices[i];
        self.model.slots_mut().swap_remove(k)
    }

    fn loss(&mut self) -> Result<Real> {
        match self.objective {
            Objective::Main => Ok(self.model.main_loss(&self.batch, self.teacher, self.lambda)?.total),
            Objective::FeaturePrior => {
                let layer = self.model.prior.as_ref().ok_or_else(|| DdpError::Config("model has no feature prior".into()))?;
                let prior = layer.estimate_batch(&self.batch)?;
                Ok(layer.batch_loss(&self.batch, &prior))
            }
        }
    }

    fn gradients(&mut self) -> Result<()> {
        self.model.zero_grad();
        match self.objective {
            Objective::Main => {
                let prior = self.model.estimate_prior(&self.batch)?;
                let (p, cache) = self.model.forward_train(&self.batch, prior.as_ref())?;
                let y: Vec<Real> = self.batch.iter().map(|i| i.y()).collect();
                let pt = self.teacher.map(|t| t.predict(&self.batch)).transpose()?;
                let (_, dlogit) = combined_loss(&p, &y, pt.as_deref(), self.lambda)?;
                self.model.backward(cache, &dlogit)?;
            }
            Objective::FeaturePrior => {
                let layer = self.model.prior.as_mut().ok_or_else(|| DdpError::Config("model has no feature prior".into()))?;
                let prior = layer.estimate_batch(&self.batch)?;
                layer.accumulate_c_grad(&self.batch, &prior, 1.0);
            }
        }
        if let Some(id) = &self.corrupt {
            if let Some(s) = self.model.slots_mut().into_iter().find(|s| &s.id == id) {
                for g in s.grad.as_mut_slice() {
                    *g *= 2.0;
                }
            }
        }
        Ok(())
    }
}
