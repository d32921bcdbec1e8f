//! Feature schema, categorical encoding and the sparse embedding table.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{DdpError, Result};
use crate::nn_core::{DenseMatrix, ParamSlot, Real, UpdateGroup};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldSpec {
    pub name: String,
    pub vocab: usize,
    #[serde(default)]
    pub multi_hot: bool,
    #[serde(default)]
    pub item: bool,
    /// Raw values are already integers in `[0, vocab)` and map to
    /// `offset + value` instead of being hashed.
    #[serde(default)]
    pub indexed: bool,
}

/// On-disk layout of a schema document.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SchemaDoc {
    #[serde(default = "default_label")]
    label_column: String,
    #[serde(default = "default_period")]
    period_column: String,
    field: Vec<FieldSpec>,
}

fn default_label() -> String {
    "label".into()
}

fn default_period() -> String {
    "period".into()
}

/// Field layout of the sparse input: `M` fields, each owning a contiguous
/// block of the global index space `[0, N)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Schema {
    fields: Vec<FieldSpec>,
    offsets: Vec<usize>,
    total: usize,
    item_field: Option<usize>,
    pub label_column: String,
    pub period_column: String,
}

impl Schema {
    pub fn new(fields: Vec<FieldSpec>) -> Result<Self> {
        Self::with_columns(fields, default_label(), default_period())
    }

    pub fn with_columns(fields: Vec<FieldSpec>, label_column: String, period_column: String) -> Result<Self> {
        if fields.is_empty() {
            return Err(DdpError::Config("schema needs at least one field".into()));
        }
        let mut offsets = Vec::with_capacity(fields.len());
        let mut total = 0usize;
        let mut item_field = None;
        for (i, f) in fields.iter().enumerate() {
            if f.vocab == 0 {
                return Err(DdpError::Config(format!("field `{}` has an empty vocabulary", f.name)));
            }
            if fields[..i].iter().any(|g| g.name == f.name) {
                return Err(DdpError::Config(format!("duplicate field `{}`", f.name)));
            }
            if f.item {
                if item_field.is_some() {
                    return Err(DdpError::Config("more than one item field".into()));
                }
                if f.multi_hot {
                    return Err(DdpError::Config("the item field must be one-hot".into()));
                }
                item_field = Some(i);
            }
            offsets.push(total);
            total += f.vocab;
        }
        Ok(Schema {
            fields,
            offsets,
            total,
            item_field,
            label_column,
            period_column,
        })
    }

    /// One-hot schema with the given vocabularies; field 0 is the item field.
    pub fn one_hot(vocabs: &[usize]) -> Result<Self> {
        Self::new(
            vocabs
                .iter()
                .enumerate()
                .map(|(i, &vocab)| FieldSpec {
                    name: format!("f{i}"),
                    vocab,
                    multi_hot: false,
                    item: i == 0,
                    indexed: true,
                })
                .collect(),
        )
    }

    pub fn parse(text: &str) -> Result<Self> {
        let doc: SchemaDoc = toml::from_str(text).map_err(|e| DdpError::Config(format!("schema: {e}")))?;
        Self::with_columns(doc.field, doc.label_column, doc.period_column)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| DdpError::UnreadableFile {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let doc = SchemaDoc {
            label_column: self.label_column.clone(),
            period_column: self.period_column.clone(),
            field: self.fields.clone(),
        };
        toml::to_string(&doc).expect("schema serializes")
    }

    /// Hex digest over everything that affects the index layout.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for f in &self.fields {
            h.update(format!("{}\t{}\t{}\t{}\n", f.name, f.vocab, f.multi_hot, f.item).as_bytes());
        }
        h.finalize()[..16].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Number of fields `M`.
    pub fn field_count(&self) -> usize {
        self.fields.len()
    }

    /// Total number of sparse feature values `N`.
    pub fn total_values(&self) -> usize {
        self.total
    }

    pub fn fields(&self) -> &[FieldSpec] {
        &self.fields
    }

    pub fn offset(&self, field: usize) -> usize {
        self.offsets[field]
    }

    pub fn item_field(&self) -> Option<usize> {
        self.item_field
    }

    pub fn field_index(&self, name: &str) -> Option<usize> {
        self.fields.iter().position(|f| f.name == name)
    }

    /// Field that owns global index `idx`.
    pub fn field_of(&self, idx: usize) -> Option<usize> {
        if idx >= self.total {
            return None;
        }
        Some(self.offsets.partition_point(|&o| o <= idx) - 1)
    }

    /// Maps raw values of one field to global indices, hashing them unless
    /// the field is pre-indexed.
    pub fn encode_field<'a>(&self, field: usize, values: impl IntoIterator<Item = &'a str>) -> Result<Vec<u32>> {
        let spec = &self.fields[field];
        let base = self.offsets[field];
        let mut out = Vec::new();
        for v in values {
            let local = if spec.indexed {
                let k: usize = v
                    .trim()
                    .parse()
                    .map_err(|_| DdpError::Config(format!("field `{}` expects an integer, got `{v}`", spec.name)))?;
                if k >= spec.vocab {
                    return Err(DdpError::IndexOutOfRange {
                        what: spec.name.clone(),
                        index: k,
                        limit: spec.vocab,
                    });
                }
                k
            } else {
                (fnv1a(v.as_bytes()) % spec.vocab as u64) as usize
            };
            out.push((base + local) as u32);
        }
        if out.is_empty() {
            return Err(DdpError::EmptyMultiHot(spec.name.clone()));
        }
        if !spec.multi_hot && out.len() > 1 {
            return Err(DdpError::DimMismatch(format!(
                "one-hot field `{}` got {} values",
                spec.name,
                out.len()
            )));
        }
        out.shrink_to_fit();
        Ok(out)
    }

    /// Encodes a raw `field name → values` map.
    pub fn encode(&self, raw: &BTreeMap<String, Vec<String>>, label: u8, id: u64) -> Result<EncodedInstance> {
        if let Some(unknown) = raw.keys().find(|k| self.field_index(k).is_none()) {
            return Err(DdpError::UnknownField(unknown.clone()));
        }
        let mut fields = Vec::with_capacity(self.fields.len());
        for (i, spec) in self.fields.iter().enumerate() {
            let values = raw
                .get(&spec.name)
                .ok_or_else(|| DdpError::MissingField(spec.name.clone()))?;
            fields.push(self.encode_field(i, values.iter().map(String::as_str))?);
        }
        EncodedInstance::new(self, id, fields, label)
    }
}

/// 64-bit FNV-1a; stable across platforms and toolchains.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// One training example: global feature indices per field and a click label.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct EncodedInstance {
    pub id: u64,
    pub fields: Vec<Vec<u32>>,
    pub label: u8,
    pub item: Option<u32>,
}

impl EncodedInstance {
    pub fn new(schema: &Schema, id: u64, fields: Vec<Vec<u32>>, label: u8) -> Result<Self> {
        if fields.len() != schema.field_count() {
            return Err(DdpError::DimMismatch(format!(
                "{} fields for a {}-field schema",
                fields.len(),
                schema.field_count()
            )));
        }
        for (i, idx) in fields.iter().enumerate() {
            let spec = &schema.fields[i];
            if idx.is_empty() {
                return Err(DdpError::EmptyMultiHot(spec.name.clone()));
            }
            if !spec.multi_hot && idx.len() != 1 {
                return Err(DdpError::DimMismatch(format!("one-hot field `{}`", spec.name)));
            }
            let lo = schema.offsets[i];
            for &k in idx {
                let k = k as usize;
                if k < lo || k >= lo + spec.vocab {
                    return Err(DdpError::IndexOutOfRange {
                        what: spec.name.clone(),
                        index: k,
                        limit: lo + spec.vocab,
                    });
                }
            }
        }
        if label > 1 {
            return Err(DdpError::Config(format!("label {label} is not binary")));
        }
        let item = schema.item_field.map(|f| fields[f][0]);
        Ok(EncodedInstance { id, fields, label, item })
    }

    pub fn y(&self) -> Real {
        self.label as Real
    }
}

/// Index lists recorded by a training-mode lookup, consumed by the
/// matching `scatter_grad`.
#[derive(Clone, Debug, Default)]
struct LookupRecord {
    indices: Vec<u32>,
    ends: Vec<u32>,
    groups_per_row: usize,
    col_offset: usize,
}

/// `rows × d` embedding matrix with mean pooling over multi-hot index sets.
#[derive(Clone, Debug)]
pub struct EmbeddingTable {
    pub slot: ParamSlot,
    pending: Option<LookupRecord>,
}

impl EmbeddingTable {
    pub fn new(id: impl Into<String>, rows: usize, dim: usize, scale: Real, rng: &mut impl Rng) -> Self {
        let values = DenseMatrix::from_fn(rows, dim, |_, _| rng.gen_range(-scale..scale));
        EmbeddingTable {
            slot: ParamSlot::new(id, values, UpdateGroup::Adam, true),
            pending: None,
        }
    }

    pub fn from_slot(slot: ParamSlot) -> Self {
        EmbeddingTable { slot, pending: None }
    }

    pub fn rows(&self) -> usize {
        self.slot.values.rows()
    }

    pub fn dim(&self) -> usize {
        self.slot.values.cols()
    }

    /// Mean of the indexed rows written into `out`.
    pub fn pool_into(&self, idx: &[u32], out: &mut [Real]) -> Result<()> {
        let rows = self.rows();
        out.fill(0.0);
        for &k in idx {
            let k = k as usize;
            if k >= rows {
                return Err(DdpError::IndexOutOfRange {
                    what: self.slot.id.clone(),
                    index: k,
                    limit: rows,
                });
            }
            for (o, v) in out.iter_mut().zip(self.slot.values.row(k)) {
                *o += v;
            }
        }
        if idx.len() > 1 {
            let inv = 1.0 / idx.len() as Real;
            out.iter_mut().for_each(|o| *o *= inv);
        }
        Ok(())
    }

    /// Pools each index group into consecutive `d`-wide blocks of `out`
    /// starting at `col_offset`; `groups_per_row` groups fill one row.
    pub fn gather<'a>(
        &self,
        groups: impl IntoIterator<Item = &'a [u32]>,
        groups_per_row: usize,
        out: &mut DenseMatrix,
        col_offset: usize,
    ) -> Result<()> {
        let d = self.dim();
        for (g, idx) in groups.into_iter().enumerate() {
            let (r, j) = (g / groups_per_row, g % groups_per_row);
            let start = col_offset + j * d;
            self.pool_into(idx, &mut out.row_mut(r)[start..start + d])?;
        }
        Ok(())
    }

    /// Training-mode [`gather`](Self::gather): also records the index
    /// sets so `scatter_grad` can route gradients back.
    pub fn gather_recorded<'a>(
        &mut self,
        groups: impl IntoIterator<Item = &'a [u32]> + Clone,
        groups_per_row: usize,
        out: &mut DenseMatrix,
        col_offset: usize,
    ) -> Result<()> {
        self.gather(groups.clone(), groups_per_row, out, col_offset)?;
        self.record(groups, groups_per_row, col_offset);
        Ok(())
    }

    /// Remembers the index sets of a gather performed elsewhere.
    pub fn record<'a>(&mut self, groups: impl IntoIterator<Item = &'a [u32]>, groups_per_row: usize, col_offset: usize) {
        let mut rec = LookupRecord {
            groups_per_row,
            col_offset,
            ..Default::default()
        };
        for idx in groups {
            rec.indices.extend_from_slice(idx);
            rec.ends.push(rec.indices.len() as u32);
        }
        self.pending = Some(rec);
    }

    /// Per-field embeddings of one instance, recorded for `scatter_grad`.
    pub fn lookup(&mut self, inst: &EncodedInstance) -> Result<Vec<Vec<Real>>> {
        let m = inst.fields.len();
        let d = self.dim();
        let mut out = DenseMatrix::zeros(1, m * d);
        self.gather_recorded(inst.fields.iter().map(Vec::as_slice), m, &mut out, 0)?;
        Ok(out.as_slice().chunks(d).map(<[Real]>::to_vec).collect())
    }

    /// Routes `upstream` (same layout as the recorded gather) into the
    /// gradient of each touched row, divided by its pooling set size.
    pub fn scatter_grad(&mut self, upstream: &DenseMatrix) -> Result<()> {
        let rec = self.pending.take().ok_or(DdpError::NoActiveLookup)?;
        let d = self.dim();
        let mut start = 0usize;
        for (g, &end) in rec.ends.iter().enumerate() {
            let (r, j) = (g / rec.groups_per_row, g % rec.groups_per_row);
            let col = rec.col_offset + j * d;
            let idx = &rec.indices[start..end as usize];
            let scale = 1.0 / idx.len() as Real;
            let up = &upstream.row(r)[col..col + d];
            for &k in idx {
                self.slot.accumulate_row(k as usize, scale, up);
            }
            start = end as usize;
        }
        Ok(())
    }

    /// Single-instance variant of [`scatter_grad`](Self::scatter_grad).
    pub fn scatter_grad_fields(&mut self, upstream: &[Vec<Real>]) -> Result<()> {
        let flat: Vec<Real> = upstream.iter().flatten().copied().collect();
        let n = flat.len();
        self.scatter_grad(&DenseMatrix::from_vec(1, n, flat)?)
    }

    pub fn has_pending_lookup(&self) -> bool {
        self.pending.is_some()
    }

    pub fn clear_pending(&mut self) {
        self.pending = None;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn raw(pairs: &[(&str, &[&str])]) -> BTreeMap<String, Vec<String>> {
        pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.iter().map(|s| s.to_string()).collect()))
            .collect()
    }

    fn demo_schema() -> Schema {
        Schema::new(vec![
            FieldSpec { name: "gender".into(), vocab: 2, multi_hot: false, item: false, indexed: false },
            FieldSpec { name: "item".into(), vocab: 1000, multi_hot: false, item: true, indexed: false },
            FieldSpec { name: "tags".into(), vocab: 30, multi_hot: true, item: false, indexed: false },
        ])
        .unwrap()
    }

    #[test]
    fn schema_layout() {
        let s = demo_schema();
        assert_eq!(s.field_count(), 3);
        assert_eq!(s.total_values(), 1032);
        assert_eq!((s.offset(0), s.offset(1), s.offset(2)), (0, 2, 1002));
        assert_eq!(s.field_of(0), Some(0));
        assert_eq!(s.field_of(2), Some(1));
        assert_eq!(s.field_of(1031), Some(2));
        assert_eq!(s.field_of(1032), None);
        assert_eq!(s.item_field(), Some(1));
    }

    #[test]
    fn schema_text_round_trip() {
        let s = demo_schema();
        let back = Schema::parse(&s.to_text()).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.digest(), s.digest());
        let other = Schema::one_hot(&[2, 1000, 30]).unwrap();
        assert_ne!(other.digest(), s.digest());
    }

    #[test]
    fn schema_rejects_bad_layouts() {
        assert!(Schema::new(vec![]).is_err());
        assert!(Schema::one_hot(&[3, 0]).is_err());
        assert!(Schema::parse("[[field]]\nname='a'\nvocab=3\nbogus=1\n").is_err());
    }

    #[test]
    fn encode_is_deterministic_and_in_range() {
        let s = demo_schema();
        let r = raw(&[("gender", &["F"]), ("item", &["apple"]), ("tags", &["x", "y"])]);
        let a = s.encode(&r, 1, 0).unwrap();
        let b = s.encode(&r, 1, 0).unwrap();
        assert_eq!(a, b);
        assert!(a.fields[0][0] < 2);
        let r2 = raw(&[("gender", &["F"]), ("item", &["pear"]), ("tags", &["x"])]);
        let c = s.encode(&r2, 0, 1).unwrap();
        for inst in [&a, &c] {
            assert!((2..1002).contains(&inst.fields[1][0]));
            assert_eq!(inst.item, Some(inst.fields[1][0]));
        }
        assert_eq!(a.fields[0], c.fields[0]);
    }

    #[test]
    fn encode_replays_identically() {
        let s = demo_schema();
        let corpus: Vec<_> = (0..100)
            .map(|i| {
                let tags: Vec<String> = (0..=(i % 3)).map(|t| format!("t{}", i * 7 + t)).collect();
                let mut m = raw(&[("gender", &[if i % 2 == 0 { "F" } else { "M" }])]);
                m.insert("item".into(), vec![format!("item-{}", i * 13 % 97)]);
                m.insert("tags".into(), tags);
                m
            })
            .collect();
        let first: Vec<_> = corpus.iter().enumerate().map(|(i, r)| s.encode(r, (i % 2) as u8, i as u64).unwrap()).collect();
        let second: Vec<_> = corpus.iter().enumerate().map(|(i, r)| s.encode(r, (i % 2) as u8, i as u64).unwrap()).collect();
        assert_eq!(first, second);
    }

    #[test]
    fn encode_errors() {
        let s = demo_schema();
        let unknown = raw(&[("gender", &["F"]), ("item", &["a"]), ("tags", &["x"]), ("zip", &["1"])]);
        assert!(matches!(s.encode(&unknown, 0, 0), Err(DdpError::UnknownField(f)) if f == "zip"));
        let empty = raw(&[("gender", &["F"]), ("item", &["a"]), ("tags", &[])]);
        assert!(matches!(s.encode(&empty, 0, 0), Err(DdpError::EmptyMultiHot(f)) if f == "tags"));
        let missing = raw(&[("gender", &["F"]), ("tags", &["x"])]);
        assert!(matches!(s.encode(&missing, 0, 0), Err(DdpError::MissingField(_))));
    }

    #[test]
    fn indexed_fields_skip_hashing() {
        let s = Schema::one_hot(&[4, 3]).unwrap();
        assert_eq!(s.encode_field(0, ["3"]).unwrap(), vec![3]);
        assert_eq!(s.encode_field(1, ["0"]).unwrap(), vec![4]);
        assert!(matches!(s.encode_field(1, ["3"]), Err(DdpError::IndexOutOfRange { index: 3, limit: 3, .. })));
        assert!(matches!(s.encode_field(0, ["x"]), Err(DdpError::Config(_))));
        let back = Schema::parse(&s.to_text()).unwrap();
        assert!(back.fields().iter().all(|f| f.indexed));
    }

    fn table(rows: usize, dim: usize) -> EmbeddingTable {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        EmbeddingTable::new("emb", rows, dim, 0.5, &mut rng)
    }

    #[test]
    fn lookup_pools_by_mean() {
        let s = Schema::new(vec![
            FieldSpec { name: "a".into(), vocab: 3, multi_hot: false, item: false, indexed: false },
            FieldSpec { name: "b".into(), vocab: 4, multi_hot: true, item: false, indexed: false },
        ])
        .unwrap();
        let mut t = table(7, 3);
        let one = EncodedInstance::new(&s, 0, vec![vec![1], vec![4]], 0).unwrap();
        let e = t.lookup(&one).unwrap();
        assert_eq!(e[0], t.slot.values.row(1));
        assert_eq!(e[1], t.slot.values.row(4));
        let two = EncodedInstance::new(&s, 1, vec![vec![1], vec![4, 6]], 0).unwrap();
        let e = t.lookup(&two).unwrap();
        for c in 0..3 {
            let want = (t.slot.values.get(4, c) + t.slot.values.get(6, c)) / 2.0;
            assert_eq!(e[1][c], want);
        }
    }

    #[test]
    fn lookup_rejects_out_of_range() {
        let t = table(5, 2);
        let mut out = [0.0; 2];
        assert!(matches!(t.pool_into(&[5], &mut out), Err(DdpError::IndexOutOfRange { .. })));
    }

    #[test]
    fn scatter_grad_routes_to_touched_rows_only() {
        let s = Schema::new(vec![
            FieldSpec { name: "a".into(), vocab: 2, multi_hot: false, item: false, indexed: false },
            FieldSpec { name: "b".into(), vocab: 3, multi_hot: true, item: false, indexed: false },
        ])
        .unwrap();
        let mut t = table(5, 2);
        assert!(matches!(t.scatter_grad_fields(&[vec![1.0, 1.0]]), Err(DdpError::NoActiveLookup)));
        let inst = EncodedInstance::new(&s, 0, vec![vec![0], vec![2, 4]], 1).unwrap();
        t.lookup(&inst).unwrap();
        t.scatter_grad_fields(&[vec![1.0, -2.0], vec![4.0, 6.0]]).unwrap();
        assert_eq!(t.slot.grad.row(0), &[1.0, -2.0]);
        assert_eq!(t.slot.grad.row(2), &[2.0, 3.0]);
        assert_eq!(t.slot.grad.row(4), &[2.0, 3.0]);
        assert_eq!(t.slot.grad.row(1), &[0.0, 0.0]);
        assert_eq!(t.slot.grad.row(3), &[0.0, 0.0]);
        assert_eq!(t.slot.active_rows(), vec![0, 2, 4]);
        // the record is consumed
        assert!(matches!(t.scatter_grad_fields(&[vec![0.0; 2], vec![0.0; 2]]), Err(DdpError::NoActiveLookup)));
    }

    #[test]
    fn scatter_grad_matches_finite_difference() {
        // loss = Σ_fields w_j · e_j with mean pooling, on a 5-row table.
        let s = Schema::new(vec![
            FieldSpec { name: "a".into(), vocab: 2, multi_hot: false, item: false, indexed: false },
            FieldSpec { name: "b".into(), vocab: 3, multi_hot: true, item: false, indexed: false },
        ])
        .unwrap();
        let inst = EncodedInstance::new(&s, 0, vec![vec![1], vec![2, 3, 4]], 0).unwrap();
        let weights = [vec![0.3, -1.1, 0.7], vec![2.0, 0.5, -0.4]];
        let loss = |t: &EmbeddingTable| -> Real {
            let mut out = DenseMatrix::zeros(1, 6);
            t.gather(inst.fields.iter().map(Vec::as_slice), 2, &mut out, 0).unwrap();
            let e = out.as_slice();
            (0..2).map(|j| (0..3).map(|c| weights[j][c] * e[j * 3 + c].powi(2)).sum::<Real>()).sum()
        };
        let mut t = table(5, 3);
        let e = t.lookup(&inst).unwrap();
        let upstream: Vec<Vec<Real>> = (0..2).map(|j| (0..3).map(|c| 2.0 * weights[j][c] * e[j][c]).collect()).collect();
        t.scatter_grad_fields(&upstream).unwrap();
        let eps = 1e-6;
        for r in 0..5 {
            for c in 0..3 {
                let orig = t.slot.values.get(r, c);
                t.slot.values.set(r, c, orig + eps);
                let plus = loss(&t);
                t.slot.values.set(r, c, orig - eps);
                let minus = loss(&t);
                t.slot.values.set(r, c, orig);
                let numeric = (plus - minus) / (2.0 * eps);
                let analytic = t.slot.grad.get(r, c);
                assert!(crate::nn_core::relative_error(analytic, numeric) <= 1e-6, "row {r} col {c}: {analytic} vs {numeric}");
            }
        }
    }
}
