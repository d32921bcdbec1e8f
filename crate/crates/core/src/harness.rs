//! The incremental-update protocol: warm up on the first `w` periods, then
//! update once per period with the dual-loss, dual-optimizer step, and
//! test on the last period.

use std::collections::HashSet;
use std::fmt;
use std::io::Write;
use std::path::PathBuf;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{EncodedInstance, Schema};
use crate::error::{DdpError, Result};
use crate::interaction::InteractionKind;
use crate::metrics::{evaluate_splits, ItemFrequency, ScoredSet, Split, SplitMetrics, HEAD_FRACTION};
use crate::model::{ModelConfig, ModelState};
use crate::model_prior::{combined_loss, snapshot_teacher, LossBreakdown, TeacherSnapshot};
use crate::nn_core::{logit, Real};
use crate::optim::{route_and_step, AdamState, PhiOptimizer, PhiOptimizerKind};
use crate::stream::PeriodStream;

/// λ used by the model-prior modes when none is configured.
pub const DEFAULT_LAMBDA: f64 = 1.0;

/// Which of the two priors a run uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Mode {
    /// Neither prior: plain incremental BCE training.
    Plain,
    /// Feature prior only.
    FpOnly,
    /// Model prior only.
    MpOnly,
    /// Both priors.
    #[default]
    Ddp,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Plain, Mode::FpOnly, Mode::MpOnly, Mode::Ddp];

    pub fn uses_feature_prior(self) -> bool {
        matches!(self, Mode::FpOnly | Mode::Ddp)
    }

    pub fn uses_model_prior(self) -> bool {
        matches!(self, Mode::MpOnly | Mode::Ddp)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            Mode::Plain => "PLAIN",
            Mode::FpOnly => "FP_ONLY",
            Mode::MpOnly => "MP_ONLY",
            Mode::Ddp => "DDP",
        })
    }
}

impl FromStr for Mode {
    type Err = DdpError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().replace('-', "_").as_str() {
            "PLAIN" => Ok(Mode::Plain),
            "FP_ONLY" | "FP" => Ok(Mode::FpOnly),
            "MP_ONLY" | "MP" => Ok(Mode::MpOnly),
            "DDP" => Ok(Mode::Ddp),
            _ => Err(DdpError::Config(format!("unknown mode `{s}`"))),
        }
    }
}

/// Initial value of the prior logits `C`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorInit {
    /// `C = 0`, i.e. ŝ starts at 0.5.
    #[default]
    Zero,
    /// `C = logit(warm-up CTR)`.
    GlobalCtr,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Total periods `T`.
    pub periods: usize,
    /// Warm-up periods `w`.
    pub warmup: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub mode: Mode,
    /// Weight of the model prior; only meaningful in MP_ONLY and DDP.
    pub lambda: Option<f64>,
    pub bins: usize,
    pub dim: usize,
    pub interaction: InteractionKind,
    pub hidden: Vec<usize>,
    pub adam_lr: f64,
    /// Learning rate of the optimizer on `C`.
    pub sgd_lr: f64,
    pub phi_optimizer: PhiOptimizerKind,
    pub l2: f64,
    pub embed_init: f64,
    pub prior_init: PriorInit,
    pub seed: u64,
    /// Shuffle each period's instances before batching.
    pub shuffle: bool,
    /// Evaluate every incremental period before training on it.
    pub progressive: bool,
    /// Fail if any test instance id was seen in training.
    pub leakage_check: bool,
    /// Write a checkpoint after each completed period.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            periods: 7,
            warmup: 3,
            batch_size: 1024,
            epochs: 1,
            mode: Mode::Ddp,
            lambda: None,
            bins: 10,
            dim: 16,
            interaction: InteractionKind::DeepFm,
            hidden: vec![200, 200, 200],
            adam_lr: 1e-3,
            sgd_lr: 1e-3,
            phi_optimizer: PhiOptimizerKind::Sgd,
            l2: 1e-6,
            embed_init: 0.01,
            prior_init: PriorInit::Zero,
            seed: 42,
            shuffle: false,
            progressive: true,
            leakage_check: true,
            checkpoint_dir: None,
        }
    }
}

impl RunConfig {
    /// Built-in configurations.
    pub fn preset(name: &str) -> Option<Self> {
        let base = RunConfig::default();
        Some(match name {
            "default" | "criteo" => base,
            "cikm" => RunConfig {
                periods: 16,
                warmup: 8,
                ..base
            },
            "synth_small" => RunConfig {
                batch_size: 256,
                dim: 8,
                hidden: vec![64, 32],
                ..base
            },
            "drift" => RunConfig {
                batch_size: 256,
                dim: 8,
                hidden: vec![64, 32],
                adam_lr: 1e-4,
                sgd_lr: 5e-2,
                prior_init: PriorInit::GlobalCtr,
                ..base
            },
            _ => return None,
        })
    }

    pub const PRESETS: [&'static str; 5] = ["default", "criteo", "cikm", "synth_small", "drift"];

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| DdpError::Config(e.to_string()))
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// λ actually applied during incremental updates.
    pub fn effective_lambda(&self) -> f64 {
        if self.mode.uses_model_prior() {
            self.lambda.unwrap_or(DEFAULT_LAMBDA)
        } else {
            0.0
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            dim: self.dim,
            bins: self.bins,
            interaction: self.interaction,
            hidden: self.hidden.clone(),
            feature_prior: self.mode.uses_feature_prior(),
            embed_init: self.embed_init as Real,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(DdpError::Config(msg));
        if self.warmup < 1 || self.warmup >= self.periods {
            return bad(format!("need 1 <= warmup < periods, got warmup {} periods {}", self.warmup, self.periods));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.dim == 0 {
            return bad("batch_size, epochs and dim must be positive".into());
        }
        if self.bins < 2 {
            return bad(format!("bins must be at least 2, got {}", self.bins));
        }
        if let Some(l) = self.lambda {
            if !self.mode.uses_model_prior() {
                return bad(format!("lambda has no effect in {} mode", self.mode));
            }
            if !(l >= 0.0 && l.is_finite()) {
                return Err(DdpError::NegativeLambda(l));
            }
        }
        for (name, v) in [("adam_lr", self.adam_lr), ("sgd_lr", self.sgd_lr), ("embed_init", self.embed_init)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be > 0, got {v}"));
            }
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return bad(format!("l2 must be >= 0, got {}", self.l2));
        }
        Ok(())
    }

    /// Sets `key` (dotted for nested tables) to `value`, parsed as a TOML
    /// value or, failing that, taken as a string.
    pub fn apply_override(&mut self, key: &str, value: &str) -> Result<()> {
        let mut doc = toml::Value::try_from(&*self).map_err(|e| DdpError::Config(e.to_string()))?;
        set_dotted(&mut doc, key, value)?;
        *self = doc.try_into().map_err(|e: toml::de::Error| DdpError::Config(format!("{key}: {e}")))?;
        Ok(())
    }
}

/// Parses `value` as a TOML value, falling back to a bare string.
pub fn parse_toml_value(value: &str) -> toml::Value {
    format!("v = {value}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()))
}

/// Writes `value` at a dotted path inside a TOML table, creating
/// intermediate tables.
pub fn set_dotted(doc: &mut toml::Value, key: &str, value: &str) -> Result<()> {
    let mut cur = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| DdpError::Config(format!("`{key}`: `{part}` is not inside a table")))?;
        if i + 1 == parts.len() {
            table.insert(part.to_string(), parse_toml_value(value));
            return Ok(());
        }
        cur = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    Err(DdpError::Config("empty override key".into()))
}

/// Losses of one training batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchStats {
    pub loss: LossBreakdown,
    /// Auxiliary feature-prior loss (0 without the prior).
    pub fp_loss: Real,
    pub n: usize,
}

/// Instance-weighted means over the batches of one training pass.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PassStats {
    pub batches: usize,
    pub instances: usize,
    pub mean_l_l: f64,
    pub mean_l_p: f64,
    pub mean_fp: f64,
}

impl PassStats {
    fn add(&mut self, b: &BatchStats) {
        let w = b.n as f64;
        let total = self.instances as f64 + w;
        let mix = |m: f64, x: Real| m + (x as f64 - m) * w / total;
        self.mean_l_l = mix(self.mean_l_l, b.loss.l_likelihood);
        self.mean_l_p = mix(self.mean_l_p, b.loss.l_prior);
        self.mean_fp = mix(self.mean_fp, b.fp_loss);
        self.instances += b.n;
        self.batches += 1;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Phase {
    Warmup,
    Progressive,
    Test,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            Phase::Warmup => "warmup",
            Phase::Progressive => "progressive",
            Phase::Test => "test",
        })
    }
}

/// One line of the metrics CSV. Evaluation columns are empty for the
/// warm-up row; training columns are empty for the test row.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub period: usize,
    pub phase: Phase,
    pub split: Split,
    pub auc: Option<f64>,
    pub logloss: Option<f64>,
    pub n_instances: usize,
    pub train: Option<PassStats>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunReport {
    pub rows: Vec<MetricsRow>,
}

impl RunReport {
    /// Test-period metrics for one split.
    pub fn test(&self, split: Split) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| r.phase == Phase::Test && r.split == split)
    }

    pub fn test_auc(&self, split: Split) -> Option<f64> {
        self.test(split).and_then(|r| r.auc)
    }

    pub fn progressive(&self, split: Split) -> Vec<&MetricsRow> {
        self.rows
            .iter()
            .filter(|r| r.phase == Phase::Progressive && r.split == split)
            .collect()
    }

    pub const CSV_HEADER: [&'static str; 8] = ["period", "phase", "split", "auc", "logloss", "n_instances", "mean_l_l", "mean_l_p"];

    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(Self::CSV_HEADER)?;
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.12}")).unwrap_or_default();
        for r in &self.rows {
            w.write_record([
                r.period.to_string(),
                r.phase.to_string(),
                r.split.to_string(),
                opt(r.auc),
                opt(r.logloss),
                r.n_instances.to_string(),
                opt(r.train.map(|t| t.mean_l_l)),
                opt(r.train.map(|t| t.mean_l_p)),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Short human-readable summary.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        for r in self.rows.iter().filter(|r| r.phase != Phase::Warmup) {
            let auc = r.auc.map(|a| format!("{a:.4}")).unwrap_or_else(|| "-".into());
            let ll = r.logloss.map(|a| format!("{a:.4}")).unwrap_or_else(|| "-".into());
            s.push_str(&format!(
                "period {:>2} {:<11} {:<9} auc {auc:<7} logloss {ll:<7} n {}\n",
                r.period, r.phase, r.split, r.n_instances
            ));
        }
        s
    }
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Bloom filter over instance ids for the train/test leakage check.
#[derive(Clone, Debug)]
pub struct IdBloom {
    bits: Vec<u64>,
}

impl IdBloom {
    const LOG_BITS: u32 = 24;
    const HASHES: u64 = 7;

    pub fn new() -> Self {
        IdBloom {
            bits: vec![0; 1 << (Self::LOG_BITS - 6)],
        }
    }

    fn positions(id: u64) -> impl Iterator<Item = usize> {
        let h1 = splitmix64(id);
        let h2 = splitmix64(h1) | 1;
        let mask = (1u64 << Self::LOG_BITS) - 1;
        (0..Self::HASHES).map(move |i| (h1.wrapping_add(i.wrapping_mul(h2)) & mask) as usize)
    }

    pub fn insert(&mut self, id: u64) {
        for p in Self::positions(id) {
            self.bits[p >> 6] |= 1 << (p & 63);
        }
    }

    pub fn contains(&self, id: u64) -> bool {
        Self::positions(id).all(|p| self.bits[p >> 6] & (1 << (p & 63)) != 0)
    }

    pub fn words(&self) -> &[u64] {
        &self.bits
    }

    pub fn from_words(bits: Vec<u64>) -> Result<Self> {
        if bits.len() != 1 << (Self::LOG_BITS - 6) {
            return Err(DdpError::CorruptFile(format!("leakage filter has {} words", bits.len())));
        }
        Ok(IdBloom { bits })
    }
}

impl Default for IdBloom {
    fn default() -> Self {
        Self::new()
    }
}

/// A model together with its optimizers and protocol position.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: RunConfig,
    pub model: ModelState,
    pub phi: PhiOptimizer,
    pub adam: AdamState,
    /// Last completed period (0 before warm-up).
    pub period: usize,
    /// Item counts over every period trained on so far.
    pub item_freq: ItemFrequency,
    pub rng: ChaCha8Rng,
    seen: Option<IdBloom>,
    batch_log: Option<Vec<BatchStats>>,
}

impl Trainer {
    pub fn new(schema: Schema, config: RunConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = ModelState::new(schema, config.model_config(), &mut rng)?;
        Self::assemble(config, model, rng)
    }

    /// Wraps an existing model; optimizer state starts fresh.
    pub fn assemble(config: RunConfig, model: ModelState, rng: ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let phi = PhiOptimizer::new(config.phi_optimizer, config.sgd_lr as Real)?;
        let adam = AdamState::new(config.adam_lr as Real, config.l2 as Real)?;
        let seen = config.leakage_check.then(IdBloom::new);
        Ok(Trainer {
            config,
            model,
            phi,
            adam,
            period: 0,
            item_freq: ItemFrequency::default(),
            rng,
            seen,
            batch_log: None,
        })
    }

    /// Starts or stops recording per-batch losses.
    pub fn record_batches(&mut self, on: bool) {
        self.batch_log = on.then(Vec::new);
    }

    pub fn batch_log(&self) -> &[BatchStats] {
        self.batch_log.as_deref().unwrap_or(&[])
    }

    /// One iteration: ŝ and bins from the current `C`, the auxiliary loss
    /// and its `C` gradient, the main forward/backward with those bins, then
    /// both optimizer steps.
    pub fn train_batch(&mut self, batch: &[&EncodedInstance], teacher: Option<&TeacherSnapshot>, lambda: Real) -> Result<BatchStats> {
        if batch.is_empty() {
            return Err(DdpError::EmptyBatch);
        }
        self.model.zero_grad();
        let prior = self.model.estimate_prior(batch)?;
        let mut fp_loss = 0.0;
        if let (Some(layer), Some(pb)) = (self.model.prior.as_mut(), prior.as_ref()) {
            fp_loss = layer.batch_loss(batch, pb);
            // C takes one SGD step per instance-sum, not per batch mean.
            layer.accumulate_c_grad(batch, pb, batch.len() as Real);
        }
        let (p, cache) = self.model.forward_train(batch, prior.as_ref())?;
        let y: Vec<Real> = batch.iter().map(|x| x.y()).collect();
        let pt = match teacher {
            Some(t) if lambda > 0.0 => Some(t.predict(batch)?),
            _ => None,
        };
        let (loss, dlogit) = combined_loss(&p, &y, pt.as_deref(), lambda)?;
        if !loss.total.is_finite() || !fp_loss.is_finite() {
            return Err(DdpError::NonFiniteLoss(format!("period {}", self.period + 1)));
        }
        self.model.backward(cache, &dlogit)?;
        route_and_step(self.model.slots_mut(), &mut self.phi, &mut self.adam)?;
        self.model.mark_updated();
        let stats = BatchStats {
            loss,
            fp_loss,
            n: batch.len(),
        };
        if let Some(log) = self.batch_log.as_mut() {
            log.push(stats);
        }
        Ok(stats)
    }

    fn train_pass(&mut self, data: &[&EncodedInstance], teacher: Option<&TeacherSnapshot>, lambda: Real) -> Result<PassStats> {
        let mut stats = PassStats::default();
        for _ in 0..self.config.epochs {
            let mut order: Vec<&EncodedInstance> = data.to_vec();
            if self.config.shuffle {
                order.shuffle(&mut self.rng);
            }
            for batch in order.chunks(self.config.batch_size) {
                stats.add(&self.train_batch(batch, teacher, lambda)?);
            }
        }
        Ok(stats)
    }

    fn note_trained(&mut self, periods: &[&[EncodedInstance]]) -> Result<()> {
        for p in periods {
            if self.model.schema().item_field().is_some() {
                self.item_freq.observe(p)?;
            }
            if let Some(bloom) = self.seen.as_mut() {
                for x in p.iter() {
                    bloom.insert(x.id);
                }
            }
        }
        Ok(())
    }

    /// Trains on the concatenated warm-up periods without a model prior.
    pub fn warmup(&mut self, periods: &[&[EncodedInstance]]) -> Result<PassStats> {
        let data: Vec<&EncodedInstance> = periods.iter().flat_map(|p| p.iter()).collect();
        if data.is_empty() {
            return Err(DdpError::EmptyWarmup);
        }
        if let (PriorInit::GlobalCtr, Some(layer)) = (self.config.prior_init, self.model.prior.as_mut()) {
            let ctr = data.iter().map(|x| x.y()).sum::<Real>() / data.len() as Real;
            layer.init_c(logit(ctr));
        }
        let stats = self.train_pass(&data, None, 0.0)?;
        self.note_trained(periods)?;
        self.period = periods.len();
        Ok(stats)
    }

    /// Updates `θ_{t−1}` on `D_t`, anchored to a frozen snapshot of
    /// `θ_{t−1}` in the model-prior modes.
    pub fn incremental_update(&mut self, data: &[EncodedInstance]) -> Result<PassStats> {
        if self.period == 0 {
            return Err(DdpError::NoTeacher);
        }
        let lambda = self.config.effective_lambda() as Real;
        let teacher = if lambda > 0.0 {
            Some(snapshot_teacher(&self.model, self.period)?)
        } else {
            None
        };
        let refs: Vec<&EncodedInstance> = data.iter().collect();
        let stats = self.train_pass(&refs, teacher.as_ref(), lambda)?;
        self.note_trained(&[data])?;
        self.period += 1;
        Ok(stats)
    }

    /// Scores a period and computes ALL (and, with an item field,
    /// SHORT_HOT / LONG_TAIL) metrics using training frequencies so far.
    pub fn evaluate(&self, data: &[EncodedInstance]) -> Result<Vec<SplitMetrics>> {
        let scores = self.model.predict_all(data)?;
        let set = ScoredSet::from_instances(scores, data)?;
        let head = self
            .model
            .schema()
            .item_field()
            .map(|_| self.item_freq.short_hot(HEAD_FRACTION));
        evaluate_splits(&set, head.as_ref())
    }

    fn check_leakage(&self, data: &[EncodedInstance]) -> Result<()> {
        if let Some(bloom) = &self.seen {
            let hits = data.iter().filter(|x| bloom.contains(x.id)).count();
            if hits > 0 {
                return Err(DdpError::Leakage(hits));
            }
        }
        Ok(())
    }

    /// Runs the protocol from the current position through period `T`
    /// (or stops after completing period `stop_after`).
    pub fn run(&mut self, stream: &PeriodStream, stop_after: Option<usize>) -> Result<RunReport> {
        let (t_total, w) = (self.config.periods, self.config.warmup);
        if stream.len() < t_total {
            return Err(DdpError::InsufficientPeriods {
                got: stream.len(),
                need: t_total,
            });
        }
        if stream.len() > t_total {
            return Err(DdpError::Config(format!(
                "stream has {} periods but the run is configured for {t_total}",
                stream.len()
            )));
        }
        let stop = stop_after.unwrap_or(t_total - 1).min(t_total - 1);
        let mut report = RunReport::default();
        if self.period == 0 {
            let periods: Vec<&[EncodedInstance]> = (1..=w).map(|t| stream.period(t)).collect::<Result<_>>()?;
            let stats = self.warmup(&periods)?;
            report.rows.push(MetricsRow {
                period: w,
                phase: Phase::Warmup,
                split: Split::All,
                auc: None,
                logloss: None,
                n_instances: stats.instances,
                train: Some(stats),
            });
            self.checkpoint()?;
        }
        while self.period < stop {
            let t = self.period + 1;
            let data = stream.period(t)?;
            let eval = if self.config.progressive { Some(self.evaluate(data)?) } else { None };
            let stats = self.incremental_update(data)?;
            match eval {
                Some(metrics) => report.rows.extend(metrics.into_iter().map(|m| MetricsRow {
                    period: t,
                    phase: Phase::Progressive,
                    split: m.split,
                    auc: m.auc,
                    logloss: m.logloss,
                    n_instances: m.n,
                    train: (m.split == Split::All).then_some(stats),
                })),
                None => report.rows.push(MetricsRow {
                    period: t,
                    phase: Phase::Progressive,
                    split: Split::All,
                    auc: None,
                    logloss: None,
                    n_instances: stats.instances,
                    train: Some(stats),
                }),
            }
            self.checkpoint()?;
        }
        if self.period == t_total - 1 {
            let test = stream.period(t_total)?;
            self.check_leakage(test)?;
            for m in self.evaluate(test)? {
                report.rows.push(MetricsRow {
                    period: t_total,
                    phase: Phase::Test,
                    split: m.split,
                    auc: m.auc,
                    logloss: m.logloss,
                    n_instances: m.n,
                    train: None,
                });
            }
        }
        Ok(report)
    }

    fn checkpoint(&self) -> Result<()> {
        if let Some(dir) = &self.config.checkpoint_dir {
            std::fs::create_dir_all(dir)?;
            crate::checkpoint::save_checkpoint(self, &dir.join(format!("period_{:02}.ckpt", self.period)))?;
        }
        Ok(())
    }

    /// Test-period membership filter, if enabled.
    pub fn seen_ids(&self) -> Option<&IdBloom> {
        self.seen.as_ref()
    }

    pub(crate) fn set_seen_ids(&mut self, bloom: Option<IdBloom>) {
        self.seen = bloom;
    }
}

/// Warm-up, incremental updates and test on a fresh model.
pub fn run_protocol(stream: &PeriodStream, schema: &Schema, config: &RunConfig) -> Result<RunReport> {
    Trainer::new(schema.clone(), config.clone())?.run(stream, None)
}

/// Distinct instance ids of a stream (for diagnostics).
pub fn instance_ids(stream: &PeriodStream) -> HashSet<u64> {
    stream.iter().map(|(_, x)| x.id).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stream::{synth_drift, SynthConfig, SynthField};

    fn synth(periods: usize, n: usize, seed: u64) -> (PeriodStream, Schema) {
        let cfg = SynthConfig {
            seed,
            world_seed: Some(1),
            periods,
            instances_per_period: n,
            bias: -1.2,
            fields: vec![
                SynthField { item: true, ..SynthField::new("item", 30) },
                SynthField::new("ctx", 6),
            ],
            drift: vec![],
        };
        let (s, _) = synth_drift(&cfg).unwrap();
        (s, cfg.schema().unwrap())
    }

    fn tiny_config(mode: Mode) -> RunConfig {
        RunConfig {
            periods: 4,
            warmup: 2,
            batch_size: 64,
            mode,
            dim: 4,
            hidden: vec![8],
            bins: 5,
            adam_lr: 5e-3,
            sgd_lr: 1e-2,
            ..RunConfig::default()
        }
    }

    #[test]
    fn mode_names_round_trip() {
        for m in Mode::ALL {
            assert_eq!(m.to_string().parse::<Mode>().unwrap(), m);
        }
        assert!("nope".parse::<Mode>().is_err());
    }

    #[test]
    fn validation() {
        assert!(RunConfig::default().validate().is_ok());
        let c = RunConfig { mode: Mode::Plain, lambda: Some(0.5), ..RunConfig::default() };
        assert!(matches!(c.validate(), Err(DdpError::Config(_))));
        let c = RunConfig { lambda: Some(-1.0), ..RunConfig::default() };
        assert!(matches!(c.validate(), Err(DdpError::NegativeLambda(_))));
        let c = RunConfig { warmup: 7, ..RunConfig::default() };
        assert!(c.validate().is_err());
        let c = RunConfig { sgd_lr: 0.0, ..RunConfig::default() };
        assert!(c.validate().is_err());
        assert_eq!(RunConfig { mode: Mode::FpOnly, ..RunConfig::default() }.effective_lambda(), 0.0);
        assert_eq!(RunConfig::default().effective_lambda(), DEFAULT_LAMBDA);
    }

    #[test]
    fn overrides() {
        let mut c = RunConfig::default();
        c.apply_override("lambda", "0.25").unwrap();
        c.apply_override("mode", "MP_ONLY").unwrap();
        c.apply_override("hidden", "[4, 2]").unwrap();
        c.apply_override("checkpoint_dir", "/tmp/x").unwrap();
        assert_eq!(c.lambda, Some(0.25));
        assert_eq!(c.mode, Mode::MpOnly);
        assert_eq!(c.hidden, vec![4, 2]);
        assert_eq!(c.checkpoint_dir, Some(PathBuf::from("/tmp/x")));
        assert!(c.apply_override("no_such_key", "1").is_err());
        assert!(c.apply_override("batch_size", "\"many\"").is_err());
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn presets_validate() {
        for name in RunConfig::PRESETS {
            RunConfig::preset(name).unwrap().validate().unwrap();
        }
        assert!(RunConfig::preset("nope").is_none());
    }

    #[test]
    fn bloom_has_no_false_negatives() {
        let mut b = IdBloom::new();
        for id in 0..5000u64 {
            b.insert(id * 7919);
        }
        assert!((0..5000u64).all(|id| b.contains(id * 7919)));
        let fp = (0..10_000u64).filter(|&id| b.contains(id * 7919 + 1)).count();
        assert_eq!(fp, 0);
    }

    #[test]
    fn protocol_shape() {
        let (s, schema) = synth(4, 600, 2);
        let r = run_protocol(&s, &schema, &tiny_config(Mode::Ddp)).unwrap();
        let warm: Vec<_> = r.rows.iter().filter(|x| x.phase == Phase::Warmup).collect();
        assert_eq!(warm.len(), 1);
        assert_eq!(warm[0].n_instances, 1200);
        assert_eq!(r.progressive(Split::All).len(), 1);
        assert_eq!(r.progressive(Split::All)[0].period, 3);
        assert!(r.test_auc(Split::All).is_some());
        assert!(r.test(Split::ShortHot).is_some() && r.test(Split::LongTail).is_some());
        let t = r.test(Split::All).unwrap();
        assert_eq!(t.period, 4);
        assert_eq!(t.n_instances, 600);
        let mut csv = Vec::new();
        r.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert_eq!(text.lines().count(), 1 + 1 + 3 + 3);
    }

    #[test]
    fn boundary_with_no_incremental_updates() {
        let (s, schema) = synth(3, 300, 3);
        let cfg = RunConfig { periods: 3, ..tiny_config(Mode::Ddp) };
        let r = run_protocol(&s, &schema, &cfg).unwrap();
        assert!(r.progressive(Split::All).is_empty());
        assert!(r.test(Split::All).is_some());
    }

    #[test]
    fn insufficient_periods() {
        let (s, schema) = synth(3, 100, 4);
        assert!(matches!(
            run_protocol(&s, &schema, &tiny_config(Mode::Plain)),
            Err(DdpError::InsufficientPeriods { got: 3, need: 4 })
        ));
    }

    #[test]
    fn runs_are_deterministic() {
        let (s, schema) = synth(4, 500, 5);
        for mode in Mode::ALL {
            let cfg = RunConfig { shuffle: true, ..tiny_config(mode) };
            let a = run_protocol(&s, &schema, &cfg).unwrap();
            let b = run_protocol(&s, &schema, &cfg).unwrap();
            assert_eq!(a, b, "{mode}");
        }
    }

    #[test]
    fn warmup_loss_decreases() {
        let (s, schema) = synth(2, 4000, 6);
        let mut tr = Trainer::new(schema, RunConfig { periods: 2, warmup: 1, ..tiny_config(Mode::Ddp) }).unwrap();
        tr.record_batches(true);
        tr.warmup(&[s.period(1).unwrap()]).unwrap();
        let log = tr.batch_log();
        let k = log.len() / 4;
        let mean = |b: &[BatchStats]| b.iter().map(|x| x.loss.l_likelihood).sum::<Real>() / b.len() as Real;
        assert!(mean(&log[log.len() - k..]) < mean(&log[..k]));
        assert!(log.iter().all(|b| b.loss.l_prior == 0.0));
    }

    #[test]
    fn incremental_requires_warmup() {
        let (s, schema) = synth(2, 50, 7);
        let mut tr = Trainer::new(schema, RunConfig { periods: 2, warmup: 1, ..tiny_config(Mode::Ddp) }).unwrap();
        assert!(matches!(tr.incremental_update(s.period(1).unwrap()), Err(DdpError::NoTeacher)));
    }

    #[test]
    fn leakage_is_detected() {
        let (s, schema) = synth(4, 200, 8);
        let mut periods = s.into_periods();
        periods[3] = periods[0].clone();
        let s = PeriodStream::new(periods);
        assert!(matches!(
            run_protocol(&s, &schema, &tiny_config(Mode::Plain)),
            Err(DdpError::Leakage(200))
        ));
    }

    #[test]
    fn plain_mode_has_no_prior_slots() {
        let (_, schema) = synth(1, 1, 9);
        let tr = Trainer::new(schema, tiny_config(Mode::Plain)).unwrap();
        assert!(tr.model.prior.is_none());
        let ids: Vec<_> = tr.model.slots().iter().map(|s| s.id.clone()).collect();
        assert!(!ids.iter().any(|i| i.starts_with("fp.") || i == "fm.bin"));
    }
}
