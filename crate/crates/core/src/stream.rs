//! Data ingestion, period partitioning and a synthetic drifting stream with
//! known per-value click-through rates.

use std::fs::File;
use std::io::{BufReader, Write};
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::embedding::{EncodedInstance, FieldSpec, Schema};
use crate::error::{DdpError, Result};
use crate::nn_core::{sigmoid, Real};

/// Separator between values of a multi-hot cell.
pub const MULTI_HOT_SEP: char = '|';

/// Ordered periods `D_1..D_T`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PeriodStream {
    periods: Vec<Vec<EncodedInstance>>,
}

impl PeriodStream {
    pub fn new(periods: Vec<Vec<EncodedInstance>>) -> Self {
        PeriodStream { periods }
    }

    /// Number of periods `T`.
    pub fn len(&self) -> usize {
        self.periods.len()
    }

    pub fn is_empty(&self) -> bool {
        self.periods.is_empty()
    }

    /// Period `t`, counted from 1.
    pub fn period(&self, t: usize) -> Result<&[EncodedInstance]> {
        if t == 0 || t > self.periods.len() {
            return Err(DdpError::PeriodOutOfRange {
                period: t,
                periods: self.periods.len(),
            });
        }
        Ok(&self.periods[t - 1])
    }

    pub fn periods(&self) -> &[Vec<EncodedInstance>] {
        &self.periods
    }

    pub fn into_periods(self) -> Vec<Vec<EncodedInstance>> {
        self.periods
    }

    pub fn total_instances(&self) -> usize {
        self.periods.iter().map(Vec::len).sum()
    }

    /// `(t, instance)` pairs in stream order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, &EncodedInstance)> {
        self.periods
            .iter()
            .enumerate()
            .flat_map(|(i, p)| p.iter().map(move |x| (i + 1, x)))
    }
}

/// An encoded row together with its period number.
#[derive(Clone, Debug, PartialEq)]
pub struct TaggedInstance {
    pub period: usize,
    pub instance: EncodedInstance,
}

/// Stable partition of tagged rows into `t` periods.
pub fn split_periods(rows: impl IntoIterator<Item = TaggedInstance>, t: usize) -> Result<PeriodStream> {
    let mut periods = vec![Vec::new(); t];
    for row in rows {
        if row.period == 0 || row.period > t {
            return Err(DdpError::PeriodOutOfRange {
                period: row.period,
                periods: t,
            });
        }
        periods[row.period - 1].push(row.instance);
    }
    Ok(PeriodStream { periods })
}

/// Streaming CSV reader yielding encoded rows. Malformed rows are skipped
/// and counted; memory use does not grow with the file.
pub struct CsvIngest<'s> {
    reader: csv::Reader<BufReader<File>>,
    schema: &'s Schema,
    label_col: usize,
    period_col: usize,
    field_cols: Vec<usize>,
    record: csv::StringRecord,
    row: u64,
    skipped: usize,
    parsed: usize,
}

impl<'s> CsvIngest<'s> {
    pub fn open(path: &Path, schema: &'s Schema) -> Result<Self> {
        let file = File::open(path).map_err(|source| DdpError::UnreadableFile {
            path: path.to_path_buf(),
            source,
        })?;
        let mut reader = csv::ReaderBuilder::new()
            .flexible(true)
            .from_reader(BufReader::new(file));
        let headers = reader.headers()?.clone();
        let find = |name: &str| {
            headers
                .iter()
                .position(|h| h.trim() == name)
                .ok_or_else(|| DdpError::MissingColumn(name.to_string()))
        };
        let label_col = find(&schema.label_column)?;
        let period_col = find(&schema.period_column)?;
        let field_cols = schema
            .fields()
            .iter()
            .map(|f| find(&f.name))
            .collect::<Result<Vec<_>>>()?;
        Ok(CsvIngest {
            reader,
            schema,
            label_col,
            period_col,
            field_cols,
            record: csv::StringRecord::new(),
            row: 0,
            skipped: 0,
            parsed: 0,
        })
    }

    pub fn skipped(&self) -> usize {
        self.skipped
    }

    pub fn parsed(&self) -> usize {
        self.parsed
    }

    fn parse_current(&self, id: u64) -> Option<TaggedInstance> {
        let rec = &self.record;
        let label = match rec.get(self.label_col)?.trim() {
            "0" => 0,
            "1" => 1,
            _ => return None,
        };
        let period: usize = rec.get(self.period_col)?.trim().parse().ok()?;
        let mut fields = Vec::with_capacity(self.field_cols.len());
        for (f, &col) in self.field_cols.iter().enumerate() {
            let cell = rec.get(col)?.trim();
            if cell.is_empty() {
                return None;
            }
            let encoded = if self.schema.fields()[f].multi_hot {
                self.schema.encode_field(f, cell.split(MULTI_HOT_SEP).map(str::trim).filter(|s| !s.is_empty()))
            } else {
                self.schema.encode_field(f, [cell])
            };
            fields.push(encoded.ok()?);
        }
        let instance = EncodedInstance::new(self.schema, id, fields, label).ok()?;
        Some(TaggedInstance { period, instance })
    }
}

impl Iterator for CsvIngest<'_> {
    type Item = TaggedInstance;

    fn next(&mut self) -> Option<TaggedInstance> {
        loop {
            match self.reader.read_record(&mut self.record) {
                Ok(false) => return None,
                Ok(true) => {
                    let id = self.row;
                    self.row += 1;
                    match self.parse_current(id) {
                        Some(x) => {
                            self.parsed += 1;
                            return Some(x);
                        }
                        None => self.skipped += 1,
                    }
                }
                Err(e) if e.is_io_error() => {
                    self.skipped += 1;
                    return None;
                }
                Err(_) => {
                    self.row += 1;
                    self.skipped += 1;
                }
            }
        }
    }
}

/// Result of reading a whole file.
#[derive(Clone, Debug)]
pub struct Ingested {
    pub rows: Vec<TaggedInstance>,
    pub skipped: usize,
}

impl Ingested {
    /// Largest period number present.
    pub fn max_period(&self) -> usize {
        self.rows.iter().map(|r| r.period).max().unwrap_or(0)
    }

    /// Splits into `periods` periods, or as many as the data names.
    pub fn into_stream(self, periods: Option<usize>) -> Result<PeriodStream> {
        let t = periods.unwrap_or_else(|| self.max_period());
        split_periods(self.rows, t)
    }
}

/// Reads and encodes every well-formed row of a CSV file. Row ids are the
/// zero-based data row numbers.
pub fn ingest_csv(path: &Path, schema: &Schema) -> Result<Ingested> {
    let mut it = CsvIngest::open(path, schema)?;
    let rows: Vec<TaggedInstance> = it.by_ref().collect();
    if rows.is_empty() {
        return Err(DdpError::EmptyStream);
    }
    Ok(Ingested {
        rows,
        skipped: it.skipped(),
    })
}

/// One categorical field of the synthetic world.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthField {
    pub name: String,
    pub vocab: usize,
    #[serde(default)]
    pub item: bool,
    /// Zipf exponent of the base exposure; 0 gives a uniform exposure.
    #[serde(default = "default_zipf")]
    pub zipf: f64,
    /// Standard deviation of the drawn per-value logit contributions.
    #[serde(default = "default_scale")]
    pub contribution_scale: f64,
    /// Explicit per-value logit contributions; drawn when absent.
    #[serde(default)]
    pub contributions: Option<Vec<f64>>,
    /// Explicit exposure: one distribution for every period, or one per
    /// period.
    #[serde(default)]
    pub exposure: Option<Vec<Vec<f64>>>,
}

fn default_zipf() -> f64 {
    1.0
}

fn default_scale() -> f64 {
    1.0
}

impl SynthField {
    pub fn new(name: impl Into<String>, vocab: usize) -> Self {
        SynthField {
            name: name.into(),
            vocab,
            item: false,
            zipf: default_zipf(),
            contribution_scale: default_scale(),
            contributions: None,
            exposure: None,
        }
    }
}

/// From period `boundary + 1` on, the field's exposure becomes
/// `(1 − sharpness)·current + sharpness·fresh`, where `fresh` is the same
/// Zipf profile over a new random ranking of the values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftEvent {
    pub boundary: usize,
    pub field: String,
    pub sharpness: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    /// Seed for sampling instances and labels.
    pub seed: u64,
    /// Seed for contributions and exposure rankings; defaults to `seed`.
    #[serde(default)]
    pub world_seed: Option<u64>,
    pub periods: usize,
    pub instances_per_period: usize,
    /// Global logit offset.
    #[serde(default)]
    pub bias: f64,
    #[serde(rename = "field")]
    pub fields: Vec<SynthField>,
    #[serde(default, rename = "drift")]
    pub drift: Vec<DriftEvent>,
}

impl SynthConfig {
    /// Three one-hot fields of 50 values, Zipf(1.5) exposure, 20k instances
    /// over 7 periods. With `drift`, every field's exposure switches to a
    /// fresh ranking from period 5 on while contributions stay fixed.
    pub fn drift_scenario(seed: u64, drift: bool) -> Self {
        let field = |name: &str, item: bool| SynthField {
            item,
            zipf: 1.5,
            ..SynthField::new(name, 50)
        };
        let fields = vec![field("item", true), field("user", false), field("ctx", false)];
        let drift = if drift {
            fields
                .iter()
                .map(|f| DriftEvent {
                    boundary: 4,
                    field: f.name.clone(),
                    sharpness: 1.0,
                })
                .collect()
        } else {
            Vec::new()
        };
        SynthConfig {
            seed,
            world_seed: None,
            periods: 7,
            instances_per_period: 20_000,
            bias: -1.5,
            fields,
            drift,
        }
    }

    /// Named scenarios: `drift`, `stationary`, and `small` (the drift
    /// scenario at 4k instances per period).
    pub fn preset(name: &str, seed: u64) -> Option<Self> {
        match name {
            "drift" => Some(Self::drift_scenario(seed, true)),
            "stationary" => Some(Self::drift_scenario(seed, false)),
            "small" => Some(SynthConfig {
                instances_per_period: 4_000,
                ..Self::drift_scenario(seed, true)
            }),
            _ => None,
        }
    }

    pub const PRESETS: [&'static str; 3] = ["drift", "stationary", "small"];

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| DdpError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| DdpError::UnreadableFile {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("synth config serializes")
    }

    /// Schema of the generated data: one pre-indexed one-hot field each.
    pub fn schema(&self) -> Result<Schema> {
        Schema::new(
            self.fields
                .iter()
                .map(|f| FieldSpec {
                    name: f.name.clone(),
                    vocab: f.vocab,
                    multi_hot: false,
                    item: f.item,
                    indexed: true,
                })
                .collect(),
        )
    }
}

/// What the generator knows and the learner has to recover.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub bias: f64,
    /// `[field][value]` logit contributions.
    pub contributions: Vec<Vec<f64>>,
    /// `[period][field][value]` exposure probabilities.
    pub exposure: Vec<Vec<Vec<f64>>>,
    /// `[period][instance]` true click probabilities.
    pub instance_p: Vec<Vec<Real>>,
}

impl GroundTruth {
    /// Writes `field,value,contribution` rows; the global offset is the
    /// row with field `_bias`.
    pub fn write_csv(&self, schema: &Schema, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["field", "value", "contribution"])?;
        w.write_record(["_bias", "", &self.bias.to_string()])?;
        for (spec, contrib) in schema.fields().iter().zip(&self.contributions) {
            for (v, c) in contrib.iter().enumerate() {
                w.write_record([spec.name.as_str(), &v.to_string(), &c.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn check_distribution(what: &str, p: &[f64], len: usize) -> Result<()> {
    if p.len() != len {
        return Err(DdpError::InvalidDistribution(format!("{what}: {} entries for {len} values", p.len())));
    }
    if p.iter().any(|&x| !(x >= 0.0 && x.is_finite())) {
        return Err(DdpError::InvalidDistribution(format!("{what}: negative or non-finite entry")));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(DdpError::InvalidDistribution(format!("{what}: sums to {sum}")));
    }
    Ok(())
}

/// Zipf weights over a random ranking of `vocab` values.
fn zipf_exposure(vocab: usize, s: f64, rng: &mut impl Rng) -> Vec<f64> {
    let mut order: Vec<usize> = (0..vocab).collect();
    order.shuffle(rng);
    let weights: Vec<f64> = (0..vocab).map(|k| (k as f64 + 1.0).powf(-s)).collect();
    let total: f64 = weights.iter().sum();
    let mut p = vec![0.0; vocab];
    for (rank, &v) in order.iter().enumerate() {
        p[v] = weights[rank] / total;
    }
    p
}

/// Builds the world (contributions and per-period exposures) without
/// sampling any instances.
pub fn synth_world(config: &SynthConfig) -> Result<GroundTruth> {
    if config.fields.is_empty() {
        return Err(DdpError::Config("synthetic stream needs at least one field".into()));
    }
    if config.periods == 0 {
        return Err(DdpError::Config("synthetic stream needs at least one period".into()));
    }
    let t = config.periods;
    let mut world = ChaCha8Rng::seed_from_u64(config.world_seed.unwrap_or(config.seed));
    let mut contributions = Vec::new();
    let mut exposure = vec![Vec::new(); t];
    for f in &config.fields {
        if f.vocab == 0 {
            return Err(DdpError::Config(format!("field `{}` has an empty vocabulary", f.name)));
        }
        let contrib = match &f.contributions {
            Some(c) if c.len() != f.vocab => {
                return Err(DdpError::Config(format!(
                    "field `{}`: {} contributions for vocab {}",
                    f.name,
                    c.len(),
                    f.vocab
                )))
            }
            Some(c) => c.clone(),
            None => {
                let normal = Normal::new(0.0, f.contribution_scale)
                    .map_err(|e| DdpError::Config(format!("field `{}`: {e}", f.name)))?;
                (0..f.vocab).map(|_| normal.sample(&mut world)).collect()
            }
        };
        if contrib.iter().any(|c| !c.is_finite()) {
            return Err(DdpError::Config(format!("field `{}` has a non-finite contribution", f.name)));
        }
        contributions.push(contrib);

        let mut per_period: Vec<Vec<f64>> = match &f.exposure {
            Some(e) if e.len() == t => e.clone(),
            Some(e) if e.len() == 1 => vec![e[0].clone(); t],
            Some(e) => {
                return Err(DdpError::InvalidDistribution(format!(
                    "field `{}`: {} exposure rows for {t} periods",
                    f.name,
                    e.len()
                )))
            }
            None => vec![zipf_exposure(f.vocab, f.zipf, &mut world); t],
        };
        for (i, p) in per_period.iter().enumerate() {
            check_distribution(&format!("field `{}` period {}", f.name, i + 1), p, f.vocab)?;
        }
        let mut events: Vec<&DriftEvent> = config.drift.iter().filter(|d| d.field == f.name).collect();
        events.sort_by_key(|d| d.boundary);
        for d in events {
            if !(0.0..=1.0).contains(&d.sharpness) {
                return Err(DdpError::InvalidDistribution(format!("drift sharpness {} outside [0, 1]", d.sharpness)));
            }
            if d.boundary == 0 || d.boundary >= t {
                return Err(DdpError::PeriodOutOfRange {
                    period: d.boundary,
                    periods: t,
                });
            }
            let fresh = zipf_exposure(f.vocab, f.zipf, &mut world);
            for p in per_period.iter_mut().skip(d.boundary) {
                for (x, y) in p.iter_mut().zip(&fresh) {
                    *x = (1.0 - d.sharpness) * *x + d.sharpness * y;
                }
            }
        }
        for (period, p) in exposure.iter_mut().zip(per_period) {
            period.push(p);
        }
    }
    for d in &config.drift {
        if !config.fields.iter().any(|f| f.name == d.field) {
            return Err(DdpError::UnknownField(d.field.clone()));
        }
    }
    Ok(GroundTruth {
        bias: config.bias,
        contributions,
        exposure,
        instance_p: vec![Vec::new(); t],
    })
}

/// Samples a drifting stream: per period, every field value is drawn from
/// that period's exposure, `p = σ(bias + Σ contributions)` and
/// `y ~ Bernoulli(p)`. Instance ids count up across the whole stream.
pub fn synth_drift(config: &SynthConfig) -> Result<(PeriodStream, GroundTruth)> {
    let schema = config.schema()?;
    let mut truth = synth_world(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut periods = Vec::with_capacity(config.periods);
    let mut id = 0u64;
    for t in 0..config.periods {
        let samplers = truth.exposure[t]
            .iter()
            .map(|p| WeightedIndex::new(p).map_err(|e| DdpError::InvalidDistribution(e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        let mut data = Vec::with_capacity(config.instances_per_period);
        let mut probs = Vec::with_capacity(config.instances_per_period);
        for _ in 0..config.instances_per_period {
            let mut z = truth.bias;
            let mut fields = Vec::with_capacity(samplers.len());
            for (f, s) in samplers.iter().enumerate() {
                let v = s.sample(&mut rng);
                z += truth.contributions[f][v];
                fields.push(vec![(schema.offset(f) + v) as u32]);
            }
            let p = sigmoid(z as Real);
            let y = rng.gen_bool(p as f64) as u8;
            data.push(EncodedInstance::new(&schema, id, fields, y)?);
            probs.push(p);
            id += 1;
        }
        periods.push(data);
        truth.instance_p[t] = probs;
    }
    Ok((PeriodStream::new(periods), truth))
}

/// Writes a stream as CSV (`period,label,<fields>`) with local value
/// indices, readable back with [`ingest_csv`] under the same schema. Only
/// pre-indexed fields can be written.
pub fn write_stream_csv(stream: &PeriodStream, schema: &Schema, out: impl Write) -> Result<()> {
    if let Some(f) = schema.fields().iter().find(|f| !f.indexed) {
        return Err(DdpError::Config(format!("field `{}` is hashed and cannot be written back", f.name)));
    }
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec![schema.period_column.clone(), schema.label_column.clone()];
    header.extend(schema.fields().iter().map(|f| f.name.clone()));
    w.write_record(&header)?;
    let mut rec = Vec::with_capacity(header.len());
    for (t, x) in stream.iter() {
        rec.clear();
        rec.push(t.to_string());
        rec.push(x.label.to_string());
        for (f, idx) in x.fields.iter().enumerate() {
            let base = schema.offset(f) as u32;
            let cell: Vec<String> = idx.iter().map(|&k| (k - base).to_string()).collect();
            rec.push(cell.join(&MULTI_HOT_SEP.to_string()));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
