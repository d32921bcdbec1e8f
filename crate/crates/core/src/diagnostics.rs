//! Finite-difference checks of the full model on a small trained network.

use std::time::Instant;

use crate::embedding::EncodedInstance;
use crate::error::Result;
use crate::harness::{Mode, RunConfig, Trainer};
use crate::interaction::InteractionKind;
use crate::model::{ModelGradCheck, Objective};
use crate::model_prior::{snapshot_teacher, TeacherSnapshot};
use crate::nn_core::{grad_check, GradCheckReport, Real, DEFAULT_GRAD_CHECK_EPS};
use crate::stream::{synth_drift, SynthConfig, SynthField};

#[derive(Clone, Debug)]
pub struct GradCheckSetup {
    pub interaction: InteractionKind,
    pub dim: usize,
    pub hidden: Vec<usize>,
    pub bins: usize,
    pub batch: usize,
    pub lambda: Real,
    pub seed: u64,
    pub min_samples: usize,
    /// Slot whose analytic gradient gets doubled, to confirm the check bites.
    pub corrupt: Option<String>,
}

impl Default for GradCheckSetup {
    fn default() -> Self {
        GradCheckSetup {
            interaction: InteractionKind::DeepFm,
            dim: 4,
            hidden: vec![8, 8],
            bins: 5,
            batch: 64,
            lambda: 1.0,
            seed: 7,
            min_samples: 200,
            corrupt: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ModelGradReport {
    /// Every Θ slot against likelihood + λ/2·prior loss.
    pub main: GradCheckReport,
    /// `C` against the auxiliary loss.
    pub feature_prior: GradCheckReport,
}

impl ModelGradReport {
    pub fn max_rel_err(&self) -> Real {
        self.main.max_rel_err.max(self.feature_prior.max_rel_err)
    }
}

/// Trains a small model for a period, freezes it as the teacher, trains
/// another period so student and teacher differ, then checks gradients on
/// one batch of the second period.
pub fn check_model_gradients(setup: &GradCheckSetup) -> Result<ModelGradReport> {
    let synth = SynthConfig {
        seed: setup.seed,
        world_seed: None,
        periods: 2,
        instances_per_period: setup.batch * 8,
        bias: -1.0,
        fields: vec![
            SynthField { item: true, ..SynthField::new("item", 30) },
            SynthField::new("user", 20),
            SynthField::new("ctx", 6),
        ],
        drift: Vec::new(),
    };
    let schema = synth.schema()?;
    let (stream, _) = synth_drift(&synth)?;
    let config = RunConfig {
        periods: 2,
        warmup: 1,
        batch_size: setup.batch,
        mode: Mode::Ddp,
        lambda: Some(setup.lambda as f64),
        bins: setup.bins,
        dim: setup.dim,
        interaction: setup.interaction,
        hidden: setup.hidden.clone(),
        adam_lr: 1e-2,
        sgd_lr: 1e-1,
        embed_init: 0.1,
        seed: setup.seed,
        leakage_check: false,
        ..RunConfig::default()
    };
    let mut trainer = Trainer::new(schema, config)?;
    trainer.warmup(&[stream.period(1)?])?;
    let teacher = snapshot_teacher(&trainer.model, 1)?;
    let second = stream.period(2)?;
    for chunk in second.chunks(setup.batch).skip(1) {
        let refs: Vec<_> = chunk.iter().collect();
        trainer.train_batch(&refs, Some(&teacher), setup.lambda)?;
    }
    let batch: Vec<_> = second[..setup.batch.min(second.len())].iter().collect();

    let mut model = trainer.model;
    let main = {
        let mut check = ModelGradCheck::new(&mut model, batch.clone(), Some(&teacher), setup.lambda, Objective::Main);
        check.corrupt = setup.corrupt.clone();
        grad_check(&mut check, DEFAULT_GRAD_CHECK_EPS, setup.min_samples, setup.seed)?
    };
    let feature_prior = {
        let mut check = ModelGradCheck::new(&mut model, batch, None, 0.0, Objective::FeaturePrior);
        check.corrupt = setup.corrupt.clone();
        grad_check(&mut check, DEFAULT_GRAD_CHECK_EPS, setup.min_samples / 4, setup.seed)?
    };
    Ok(ModelGradReport { main, feature_prior })
}

/// Instances per second at the reference size (d = 16, hidden
/// [200, 200, 200], batch 1024) on one thread.
#[derive(Clone, Debug)]
pub struct Throughput {
    pub mode: Mode,
    /// Warm-up pass: feature prior active, no teacher.
    pub warmup: f64,
    /// Incremental step, teacher forward included; `None` without a model
    /// prior.
    pub incremental: Option<f64>,
    pub real_bits: usize,
}

/// Times the training step on a synthetic stream of `instances` per
/// period. Each rate is the best over windows of 20 batches, which keeps
/// scheduler noise out of the number.
pub fn measure_throughput(mode: Mode, instances: usize) -> Result<Throughput> {
    let synth = SynthConfig {
        seed: 11,
        world_seed: None,
        periods: 2,
        instances_per_period: instances,
        bias: -1.5,
        fields: vec![
            SynthField { item: true, ..SynthField::new("item", 1000) },
            SynthField::new("user", 1000),
            SynthField::new("ctx", 50),
        ],
        drift: Vec::new(),
    };
    let (stream, _) = synth_drift(&synth)?;
    let config = RunConfig {
        periods: 2,
        warmup: 1,
        mode,
        leakage_check: false,
        ..RunConfig::default()
    };
    let lambda = config.effective_lambda() as Real;
    let batch = config.batch_size;
    let mut trainer = Trainer::new(synth.schema()?, config)?;

    let timed = |trainer: &mut Trainer, data: &[EncodedInstance], teacher: Option<&TeacherSnapshot>| -> Result<f64> {
        let refs: Vec<&EncodedInstance> = data.iter().collect();
        let mut best: f64 = 0.0;
        for window in refs.chunks(20 * batch) {
            let start = Instant::now();
            for b in window.chunks(batch) {
                trainer.train_batch(b, teacher, lambda)?;
            }
            best = best.max(window.len() as f64 / start.elapsed().as_secs_f64());
        }
        Ok(best)
    };
    let warmup = timed(&mut trainer, stream.period(1)?, None)?;
    let incremental = if mode.uses_model_prior() {
        let teacher = snapshot_teacher(&trainer.model, 1)?;
        Some(timed(&mut trainer, stream.period(2)?, Some(&teacher))?)
    } else {
        None
    };
    Ok(Throughput {
        mode,
        warmup,
        incremental,
        real_bits: 8 * std::mem::size_of::<Real>(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_interactions_match_finite_differences() {
        for kind in [InteractionKind::Dnn, InteractionKind::DeepFm] {
            let setup = GradCheckSetup { interaction: kind, ..GradCheckSetup::default() };
            let r = check_model_gradients(&setup).unwrap();
            for s in r.main.slots.iter().chain(&r.feature_prior.slots) {
                assert!(s.samples > 0, "{kind}: {} unsampled", s.id);
                assert!(s.max_rel_err < 1e-4, "{kind}: {} err {}", s.id, s.max_rel_err);
            }
        }
    }

    #[test]
    fn corrupted_slot_is_caught() {
        let setup = GradCheckSetup { corrupt: Some("dnn.w0".into()), ..GradCheckSetup::default() };
        let r = check_model_gradients(&setup).unwrap();
        let worst = r.main.worst_slot().unwrap();
        assert_eq!(worst.id, "dnn.w0");
        assert!(worst.max_rel_err > 0.1);
    }
}
