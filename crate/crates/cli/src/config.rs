//! Run files: a `[run]` table (every training option) and a `[data]` table
//! saying where the stream comes from.

use std::path::{Path, PathBuf};

use ddp_core::embedding::Schema;
use ddp_core::error::{DdpError, Result};
use ddp_core::harness::{set_dotted, RunConfig};
use ddp_core::stream::{ingest_csv, synth_drift, PeriodStream, SynthConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Synthetic scenario: a preset name or a path to a synth config file.
    pub synth: Option<String>,
    /// Sampling seed of the synthetic stream; the world stays fixed.
    pub seed: Option<u64>,
    pub csv: Option<PathBuf>,
    pub schema: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CliConfig {
    #[serde(default)]
    pub run: RunConfig,
    #[serde(default)]
    pub data: DataConfig,
}

/// Built-in run files: a run preset paired with a synthetic scenario.
pub fn builtin(name: &str) -> Option<CliConfig> {
    let (run, synth) = match name {
        "synth_small" => ("synth_small", "small"),
        "drift" => ("drift", "drift"),
        "stationary" => ("drift", "stationary"),
        _ => return None,
    };
    Some(CliConfig {
        run: RunConfig::preset(run)?,
        data: DataConfig {
            synth: Some(synth.into()),
            seed: None,
            csv: None,
            schema: None,
        },
    })
}

pub const BUILTINS: [&str; 3] = ["synth_small", "drift", "stationary"];

/// A resolved configuration plus what it was read from.
#[derive(Clone, Debug)]
pub struct Loaded {
    pub config: CliConfig,
    /// Relative data paths are taken from here.
    pub base: PathBuf,
    /// Digest of the config file, or the built-in name.
    pub origin: String,
}

/// Git-style content digest: SHA-256 over `blob <len>\0<bytes>`.
pub fn content_digest(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()));
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn config_err(msg: impl Into<String>) -> DdpError {
    DdpError::Config(msg.into())
}

/// Reads `spec` (a file, or a built-in name when no such file exists) and
/// applies `overrides` in order; later ones win.
pub fn load(spec: &str, overrides: &[(String, String)]) -> Result<Loaded> {
    let path = Path::new(spec);
    let (mut doc, base, origin) = if path.is_file() {
        let text = std::fs::read_to_string(path).map_err(|source| DdpError::UnreadableFile {
            path: path.to_path_buf(),
            source,
        })?;
        let doc: toml::Value = text.parse::<toml::Table>().map(toml::Value::Table).map_err(|e| config_err(format!("{spec}: {e}")))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        (doc, base, content_digest(text.as_bytes()))
    } else if let Some(c) = builtin(spec) {
        let doc = toml::Value::try_from(&c).map_err(|e| config_err(e.to_string()))?;
        (doc, PathBuf::from("."), format!("builtin:{spec}"))
    } else {
        return Err(config_err(format!(
            "`{spec}` is neither a file nor a built-in config ({})",
            BUILTINS.join(", ")
        )));
    };
    for (k, v) in overrides {
        set_dotted(&mut doc, k, v)?;
    }
    let config: CliConfig = doc.try_into().map_err(|e: toml::de::Error| config_err(e.to_string()))?;
    config.run.validate()?;
    match (&config.data.synth, &config.data.csv) {
        (Some(_), Some(_)) => return Err(config_err("data: give either `synth` or `csv`, not both")),
        (None, None) => return Err(config_err("data: one of `synth` or `csv` is required")),
        (None, Some(_)) if config.data.schema.is_none() => return Err(config_err("data: `csv` needs a `schema`")),
        _ => {}
    }
    Ok(Loaded { config, base, origin })
}

/// Splits `key=value`.
pub fn parse_override(s: &str) -> std::result::Result<(String, String), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected key=value, got `{s}`"))?;
    if k.trim().is_empty() {
        return Err("empty key".into());
    }
    Ok((k.trim().to_string(), v.trim().to_string()))
}

/// A synth config from a preset name or file, with the sampling seed
/// replaced by `seed` when given.
pub fn synth_config(spec: &str, base: &Path, seed: Option<u64>) -> Result<SynthConfig> {
    let mut cfg = match SynthConfig::preset(spec, 1) {
        Some(c) => c,
        None => SynthConfig::load(&base.join(spec))?,
    };
    if let Some(s) = seed {
        cfg.world_seed = Some(cfg.world_seed.unwrap_or(cfg.seed));
        cfg.seed = s;
    }
    Ok(cfg)
}

/// The stream a run trains on, with digests of what it was built from.
pub struct Data {
    pub schema: Schema,
    pub stream: PeriodStream,
    pub inputs: Vec<(String, String)>,
    pub skipped: usize,
}

impl Loaded {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    pub fn data(&self) -> Result<Data> {
        let d = &self.config.data;
        if let Some(spec) = &d.synth {
            let synth = synth_config(spec, &self.base, d.seed)?;
            let schema = synth.schema()?;
            let (stream, _) = synth_drift(&synth)?;
            let inputs = vec![("synth".to_string(), content_digest(synth.to_text().as_bytes()))];
            return Ok(Data {
                schema,
                stream,
                inputs,
                skipped: 0,
            });
        }
        let (csv, schema_path) = match (&d.csv, &d.schema) {
            (Some(c), Some(s)) => (self.resolve(c), self.resolve(s)),
            _ => return Err(config_err("data: `csv` and `schema` are required")),
        };
        let schema = Schema::load(&schema_path)?;
        let ingested = ingest_csv(&csv, &schema)?;
        let skipped = ingested.skipped;
        let stream = ingested.into_stream(Some(self.config.run.periods))?;
        let mut inputs = Vec::new();
        for (name, p) in [("csv", &csv), ("schema", &schema_path)] {
            let bytes = std::fs::read(p).map_err(|source| DdpError::UnreadableFile { path: p.clone(), source })?;
            inputs.push((name.to_string(), content_digest(&bytes)));
        }
        Ok(Data {
            schema,
            stream,
            inputs,
            skipped,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn builtins_load_and_validate() {
        for name in BUILTINS {
            let l = load(name, &[]).unwrap();
            assert!(l.config.data.synth.is_some(), "{name}");
        }
    }

    #[test]
    fn later_overrides_win() {
        let l = load("synth_small", &set(&[("run.dim", "4"), ("run.dim", "6"), ("run.mode", "FP_ONLY")])).unwrap();
        assert_eq!(l.config.run.dim, 6);
        assert_eq!(l.config.run.mode.to_string(), "FP_ONLY");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(load("synth_small", &set(&[("run.dimension", "4")])).is_err());
        assert!(load("synth_small", &set(&[("data.rows", "4")])).is_err());
        assert!(load("synth_small", &set(&[("extra.x", "1")])).is_err());
    }

    #[test]
    fn lambda_outside_model_prior_modes_is_rejected() {
        let err = load("synth_small", &set(&[("run.mode", "PLAIN"), ("run.lambda", "0.5")])).unwrap_err();
        assert!(err.to_string().contains("lambda"), "{err}");
    }

    #[test]
    fn file_values_and_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "[run]\ndim = 4\nhidden = [8]\n[data]\ncsv = \"d.csv\"\nschema = \"s.toml\"\n").unwrap();
        let l = load(path.to_str().unwrap(), &[]).unwrap();
        assert_eq!(l.config.run.hidden, vec![8]);
        assert_eq!(l.resolve(Path::new("d.csv")), dir.path().join("d.csv"));
        assert_eq!(l.origin, content_digest(&std::fs::read(&path).unwrap()));
    }

    #[test]
    fn git_blob_digest() {
        // `printf 'hello\n' | git hash-object --stdin` under SHA-256 object format.
        assert_eq!(
            content_digest(b"hello\n"),
            "2cf8d83d9ee29543b34a87727421fdecb7e3f3a183d337639025de576db9ebb4"
        );
    }

    #[test]
    fn seed_changes_samples_not_world() {
        let a = synth_config("small", Path::new("."), Some(5)).unwrap();
        let b = synth_config("small", Path::new("."), Some(6)).unwrap();
        assert_eq!(a.world_seed, b.world_seed);
        assert_ne!(a.seed, b.seed);
    }
}
