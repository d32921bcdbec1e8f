//! Self-describing training checkpoints.
//!
//! Layout: the magic line `DDPCKPT\n`, a little-endian `u32` format
//! version, a `u64` header length, a TOML header, the payload blobs it
//! describes (little-endian `f64` or `u64`), and a SHA-256 of everything
//! before it.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embedding::Schema;
use crate::error::{DdpError, Result};
use crate::harness::{IdBloom, RunConfig, Trainer};
use crate::model::ModelState;
use crate::nn_core::{DenseMatrix, Real};
use crate::optim::{AdamMoments, AdamState, PhiOptimizer};

pub const MAGIC: &[u8; 8] = b"DDPCKPT\n";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum BlobKind {
    F64,
    U64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Blob {
    name: String,
    kind: BlobKind,
    rows: usize,
    cols: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    schema_digest: String,
    period: usize,
    rng_seed: String,
    rng_stream: u64,
    rng_word_pos: String,
    schema: String,
    config: RunConfig,
    blobs: Vec<Blob>,
}

#[derive(Default)]
struct Payload {
    blobs: Vec<Blob>,
    bytes: Vec<u8>,
}

impl Payload {
    fn f64s(&mut self, name: String, rows: usize, cols: usize, data: impl IntoIterator<Item = Real>) {
        self.blobs.push(Blob {
            name,
            kind: BlobKind::F64,
            rows,
            cols,
        });
        for v in data {
            self.bytes.extend_from_slice(&(v as f64).to_le_bytes());
        }
    }

    fn u64s(&mut self, name: String, rows: usize, cols: usize, data: impl IntoIterator<Item = u64>) {
        self.blobs.push(Blob {
            name,
            kind: BlobKind::U64,
            rows,
            cols,
        });
        for v in data {
            self.bytes.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn matrix(&mut self, name: String, m: &DenseMatrix) {
        self.f64s(name, m.rows(), m.cols(), m.as_slice().iter().copied());
    }

    fn adam(&mut self, prefix: &str, state: &AdamState) {
        for (id, mom) in &state.moments {
            self.matrix(format!("{prefix}/{id}/m"), &mom.m);
            self.matrix(format!("{prefix}/{id}/v"), &mom.v);
            self.u64s(format!("{prefix}/{id}/steps"), mom.steps.len(), 1, mom.steps.iter().copied());
        }
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Result<Vec<u8>> {
    if s.len() % 2 != 0 {
        return Err(DdpError::CorruptFile("odd-length hex string".into()));
    }
    (0..s.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(&s[i..i + 2], 16).map_err(|_| DdpError::CorruptFile("bad hex".into())))
        .collect()
}

/// Serializes a trainer (model, optimizer state, protocol position, item
/// counts, RNG position) to bytes.
pub fn encode_checkpoint(tr: &Trainer) -> Result<Vec<u8>> {
    let mut p = Payload::default();
    for s in tr.model.slots() {
        p.matrix(format!("param/{}", s.id), &s.values);
    }
    p.adam("adam", &tr.adam);
    if let PhiOptimizer::Adam(state) = &tr.phi {
        p.adam("phi", state);
    }
    let items: Vec<u64> = tr.item_freq.counts.iter().flat_map(|(&i, &c)| [i as u64, c]).collect();
    p.u64s("items".into(), items.len() / 2, 2, items);
    if let Some(bloom) = tr.seen_ids() {
        let words = bloom.words();
        p.u64s("bloom".into(), words.len(), 1, words.iter().copied());
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        schema_digest: tr.model.schema().digest(),
        period: tr.period,
        rng_seed: hex(&tr.rng.get_seed()),
        rng_stream: tr.rng.get_stream(),
        rng_word_pos: tr.rng.get_word_pos().to_string(),
        schema: tr.model.schema().to_text(),
        config: tr.config.clone(),
        blobs: p.blobs,
    };
    let text = toml::to_string(&header).map_err(|e| DdpError::Config(e.to_string()))?;
    let mut out = Vec::with_capacity(p.bytes.len() + text.len() + 64);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&p.bytes);
    let sum = Sha256::digest(&out);
    out.extend_from_slice(&sum);
    Ok(out)
}

pub fn save_checkpoint(tr: &Trainer, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(tr)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| DdpError::CorruptFile("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64s(&mut self, n: usize) -> Result<Vec<u64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| DdpError::CorruptFile("blob too large".into()))?)?;
        Ok(raw.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

enum BlobData {
    F64(Vec<f64>),
    U64(Vec<u64>),
}

struct Decoded {
    header: Header,
    blobs: std::collections::HashMap<String, (Blob, BlobData)>,
}

impl Decoded {
    fn matrix(&mut self, name: &str, rows: usize, cols: usize) -> Result<DenseMatrix> {
        match self.blobs.remove(name) {
            Some((b, BlobData::F64(v))) if b.rows == rows && b.cols == cols => {
                DenseMatrix::from_vec(rows, cols, v.into_iter().map(|x| x as Real).collect())
            }
            Some((b, _)) => Err(DdpError::CorruptFile(format!(
                "blob `{name}` is {}x{} ({:?}), expected {rows}x{cols}",
                b.rows, b.cols, b.kind
            ))),
            None => Err(DdpError::CorruptFile(format!("missing blob `{name}`"))),
        }
    }

    fn u64s(&mut self, name: &str) -> Result<Option<Vec<u64>>> {
        match self.blobs.remove(name) {
            Some((_, BlobData::U64(v))) => Ok(Some(v)),
            Some(_) => Err(DdpError::CorruptFile(format!("blob `{name}` has the wrong type"))),
            None => Ok(None),
        }
    }

    fn adam(&mut self, prefix: &str, state: &mut AdamState, model: &ModelState) -> Result<()> {
        for s in model.slots() {
            let (rows, cols) = s.values.shape();
            let mname = format!("{prefix}/{}/m", s.id);
            if !self.blobs.contains_key(&mname) {
                continue;
            }
            let m = self.matrix(&mname, rows, cols)?;
            let v = self.matrix(&format!("{prefix}/{}/v", s.id), rows, cols)?;
            let steps = self
                .u64s(&format!("{prefix}/{}/steps", s.id))?
                .filter(|st| st.len() == rows)
                .ok_or_else(|| DdpError::CorruptFile(format!("bad step counters for `{}`", s.id)))?;
            state.moments.insert(s.id.clone(), AdamMoments { m, v, steps });
        }
        Ok(())
    }
}

fn decode(bytes: &[u8]) -> Result<Decoded> {
    if bytes.len() < MAGIC.len() + 12 + 32 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(DdpError::CorruptFile("not a checkpoint".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(DdpError::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let (body, sum) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != sum {
        return Err(DdpError::CorruptFile("checksum mismatch".into()));
    }
    let mut r = Reader { bytes: body, pos: 12 };
    let hlen = r.u64s(1)?[0] as usize;
    let text = std::str::from_utf8(r.take(hlen)?).map_err(|_| DdpError::CorruptFile("header is not UTF-8".into()))?;
    let header: Header = toml::from_str(text).map_err(|e| DdpError::CorruptFile(format!("header: {e}")))?;
    let mut blobs = std::collections::HashMap::new();
    for b in &header.blobs {
        let n = b.rows.checked_mul(b.cols).ok_or_else(|| DdpError::CorruptFile("blob too large".into()))?;
        let raw = r.u64s(n)?;
        let data = match b.kind {
            BlobKind::F64 => BlobData::F64(raw.into_iter().map(f64::from_bits).collect()),
            BlobKind::U64 => BlobData::U64(raw),
        };
        blobs.insert(b.name.clone(), (b.clone(), data));
    }
    if r.pos != body.len() {
        return Err(DdpError::CorruptFile("trailing bytes".into()));
    }
    Ok(Decoded { header, blobs })
}

/// Rebuilds a trainer from checkpoint bytes. With `expected_schema`, the
/// stored schema digest must match it.
pub fn decode_checkpoint(bytes: &[u8], expected_schema: Option<&Schema>) -> Result<Trainer> {
    let mut d = decode(bytes)?;
    if let Some(s) = expected_schema {
        if s.digest() != d.header.schema_digest {
            return Err(DdpError::SchemaDigestMismatch {
                checkpoint: d.header.schema_digest.clone(),
                data: s.digest(),
            });
        }
    }
    let schema = Schema::parse(&d.header.schema)?;
    if schema.digest() != d.header.schema_digest {
        return Err(DdpError::CorruptFile("stored schema does not match its digest".into()));
    }
    let config = d.header.config.clone();
    let seed: [u8; 32] = unhex(&d.header.rng_seed)?
        .try_into()
        .map_err(|_| DdpError::CorruptFile("rng seed length".into()))?;
    let word_pos: u128 = d
        .header
        .rng_word_pos
        .parse()
        .map_err(|_| DdpError::CorruptFile("rng position".into()))?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(d.header.rng_stream);
    rng.set_word_pos(word_pos);

    // Shapes come from the config; every value is overwritten below.
    let mut scratch = ChaCha8Rng::seed_from_u64(0);
    let mut model = ModelState::new(schema, config.model_config(), &mut scratch)?;
    for s in model.slots_mut() {
        let (rows, cols) = s.values.shape();
        s.values = d.matrix(&format!("param/{}", s.id), rows, cols)?;
    }
    model.mark_updated();
    let mut tr = Trainer::assemble(config, model, rng)?;
    d.adam("adam", &mut tr.adam, &tr.model)?;
    if let PhiOptimizer::Adam(state) = &mut tr.phi {
        d.adam("phi", state, &tr.model)?;
    }
    let items = d.u64s("items")?.ok_or_else(|| DdpError::CorruptFile("missing item counts".into()))?;
    for pair in items.chunks_exact(2) {
        tr.item_freq.counts.insert(pair[0] as u32, pair[1]);
    }
    let bloom = d.u64s("bloom")?.map(IdBloom::from_words).transpose()?;
    if tr.config.leakage_check && bloom.is_none() {
        return Err(DdpError::CorruptFile("missing leakage filter".into()));
    }
    tr.set_seen_ids(bloom);
    tr.period = d.header.period;
    Ok(tr)
}

pub fn load_checkpoint(path: &Path, expected_schema: Option<&Schema>) -> Result<Trainer> {
    let bytes = std::fs::read(path).map_err(|source| DdpError::UnreadableFile {
        path: path.to_path_buf(),
        source,
    })?;
    decode_checkpoint(&bytes, expected_schema)
}
