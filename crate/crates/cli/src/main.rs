//! `ddp`: train, evaluate, synthesize, and diagnose incremental CTR runs.
//!
//! Exit codes: 0 success, 1 runtime failure (or a failed check), 2 bad
//! configuration or usage.

mod config;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ddp_core::checkpoint::{load_checkpoint, save_checkpoint};
use ddp_core::diagnostics::{check_model_gradients, measure_throughput, GradCheckSetup};
use ddp_core::error::DdpError;
use ddp_core::harness::{Mode, Trainer};
use ddp_core::interaction::InteractionKind;
use ddp_core::metrics::{kl_report, top_features, top_groups, Granularity, SplitMetrics};
use ddp_core::stream::{write_stream_csv, CsvIngest, SynthConfig};
use serde::Serialize;

use config::{content_digest, parse_override, synth_config, CliConfig, Loaded};

const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "ddp", version, about = "Incremental CTR training with feature and model priors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Run file (TOML with [run] and [data]) or a built-in name:
    /// synth_small, drift, stationary.
    #[arg(long, short)]
    config: String,
    /// Override a value, e.g. `--set run.dim=8`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_override)]
    overrides: Vec<(String, String)>,
    /// Shorthand for `--set run.mode=...`.
    #[arg(long)]
    mode: Option<String>,
    /// Shorthand for `--set run.lambda=...`.
    #[arg(long)]
    lambda: Option<f64>,
    /// Shorthand for `--set run.seed=...`.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<Loaded, Failure> {
        let mut all = self.overrides.clone();
        if let Some(m) = &self.mode {
            let mode: Mode = m.parse().map_err(usage)?;
            all.push(("run.mode".into(), mode.to_string()));
        }
        if let Some(l) = self.lambda {
            all.push(("run.lambda".into(), format!("{l:?}")));
        }
        if let Some(s) = self.seed {
            all.push(("run.seed".into(), s.to_string()));
        }
        config::load(&self.config, &all).map_err(usage)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the full protocol and write a run directory.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Run directory (created if missing).
        #[arg(long, short)]
        out: PathBuf,
        /// Also keep a checkpoint after every period under `<out>/checkpoints`.
        #[arg(long)]
        checkpoints: bool,
        /// Also write the KL diagnostic of the stream to `<out>/kl.csv`.
        #[arg(long)]
        kl: bool,
    },
    /// Score a period (or a CSV file) with a saved checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Run file whose [data] supplies the stream.
        #[arg(long, short, conflicts_with = "data", required_unless_present = "data")]
        config: Option<String>,
        #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_override, requires = "config")]
        overrides: Vec<(String, String)>,
        /// CSV file in the checkpoint's schema; every row is scored unless
        /// `--period` is given.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Period to score; defaults to the last one of a configured stream.
        #[arg(long)]
        period: Option<usize>,
        /// Write the metrics CSV here instead of stdout.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic drifting stream.
    Synth {
        /// Synth config file or preset (drift, stationary, small).
        #[arg(long, short, default_value = "drift")]
        config: String,
        #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_override)]
        overrides: Vec<(String, String)>,
        /// Sampling seed; the world (contributions, exposures) is unchanged.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Feature-level versus instance-group KL drift per period.
    KlDiag {
        #[command(flatten)]
        config: ConfigArgs,
        /// Number of most frequent feature values to follow.
        #[arg(long, default_value_t = 10)]
        features: usize,
        /// Number of most frequent instance groups to follow.
        #[arg(long, default_value_t = 10)]
        groups: usize,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every gradient of the training loss.
    GradCheck {
        #[arg(long, value_enum, default_value_t = Which::Both)]
        interaction: Which,
        #[arg(long, default_value_t = 5)]
        bins: usize,
        #[arg(long, default_value_t = 4)]
        dim: usize,
        #[arg(long, value_delimiter = ',', default_value = "8,8")]
        hidden: Vec<usize>,
        #[arg(long, default_value_t = 64)]
        batch: usize,
        #[arg(long, default_value_t = 1.0)]
        lambda: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Double the analytic gradient of this slot (tests the checker).
        #[arg(long, value_name = "SLOT")]
        corrupt: Option<String>,
    },
    /// Training throughput at the reference model size.
    Bench {
        #[arg(long, default_value = "DDP")]
        mode: String,
        /// Instances per timed pass.
        #[arg(long, default_value_t = 160_000)]
        instances: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Which {
    Dnn,
    Deepfm,
    Both,
}

enum Failure {
    Usage(String),
    Run(String),
}

fn usage(e: impl std::fmt::Display) -> Failure {
    Failure::Usage(e.to_string())
}

impl From<DdpError> for Failure {
    fn from(e: DdpError) -> Self {
        Failure::Run(e.to_string())
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Run(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config, out, checkpoints, kl } => train(&config, &out, checkpoints, kl),
        Command::Eval {
            checkpoint,
            config,
            overrides,
            data,
            period,
            out,
        } => eval(&checkpoint, config.as_deref(), &overrides, data.as_deref(), period, out.as_deref()),
        Command::Synth { config, overrides, seed, out } => synth(&config, &overrides, seed, &out),
        Command::KlDiag { config, features, groups, out } => kl_diag(&config, features, groups, out.as_deref()),
        Command::GradCheck {
            interaction,
            bins,
            dim,
            hidden,
            batch,
            lambda,
            seed,
            corrupt,
        } => {
            let setup = GradCheckSetup {
                interaction: InteractionKind::Dnn,
                dim,
                hidden,
                bins,
                batch,
                lambda: lambda as _,
                seed,
                corrupt,
                ..GradCheckSetup::default()
            };
            grad_check(interaction, setup)
        }
        Command::Bench { mode, instances } => bench(&mode, instances),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Run(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Failure::Run(format!("cannot create {}: {e}", path.display())))
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    /// Content digests of everything the run read.
    inputs: BTreeMap<String, String>,
    config: &'a CliConfig,
}

fn train(args: &ConfigArgs, out: &Path, checkpoints: bool, kl: bool) -> Result<(), Failure> {
    let mut loaded = args.load()?;
    std::fs::create_dir_all(out)?;
    if checkpoints {
        loaded.config.run.checkpoint_dir = Some(out.join("checkpoints"));
    }
    let data = loaded.data()?;
    if data.skipped > 0 {
        eprintln!("skipped {} malformed rows", data.skipped);
    }
    let mut trainer = Trainer::new(data.schema.clone(), loaded.config.run.clone())?;
    let report = trainer.run(&data.stream, None)?;

    report.write_csv(create(&out.join("metrics.csv"))?)?;
    save_checkpoint(&trainer, &out.join("final.ckpt"))?;
    if kl {
        write_kl(&data.stream, 10, 10, &mut create(&out.join("kl.csv"))?)?;
    }
    let mut inputs: BTreeMap<String, String> = data.inputs.into_iter().collect();
    inputs.insert("config".into(), loaded.origin.clone());
    let manifest = Manifest {
        command: "train",
        version: env!("CARGO_PKG_VERSION"),
        inputs,
        config: &loaded.config,
    };
    let text = toml::to_string(&manifest).map_err(|e| Failure::Run(e.to_string()))?;
    std::fs::write(out.join("manifest.toml"), text)?;
    print!("{}", report.summary());
    println!("wrote {}", out.display());
    Ok(())
}

fn write_metrics(period: Option<usize>, metrics: &[SplitMetrics], out: impl Write) -> Result<(), Failure> {
    let mut out = out;
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.12}")).unwrap_or_default();
    let period = period.map(|p| p.to_string()).unwrap_or_default();
    writeln!(out, "period,split,auc,logloss,n_instances")?;
    for m in metrics {
        writeln!(out, "{period},{},{},{},{}", m.split, opt(m.auc), opt(m.logloss), m.n)?;
    }
    out.flush()?;
    Ok(())
}

fn eval(
    checkpoint: &Path,
    config: Option<&str>,
    overrides: &[(String, String)],
    data: Option<&Path>,
    period: Option<usize>,
    out: Option<&Path>,
) -> Result<(), Failure> {
    let (trainer, rows, period) = match (config, data) {
        (Some(spec), _) => {
            let loaded = config::load(spec, overrides).map_err(usage)?;
            let d = loaded.data()?;
            let trainer = load_checkpoint(checkpoint, Some(&d.schema))?;
            let t = period.unwrap_or(d.stream.len());
            let rows = d.stream.period(t)?.to_vec();
            (trainer, rows, Some(t))
        }
        (None, Some(path)) => {
            let trainer = load_checkpoint(checkpoint, None)?;
            let empty = std::fs::metadata(path)
                .map_err(|source| DdpError::UnreadableFile { path: path.to_path_buf(), source })?
                .len()
                == 0;
            let rows = if empty {
                Vec::new()
            } else {
                let mut it = CsvIngest::open(path, trainer.model.schema())?;
                let rows: Vec<_> = it
                    .by_ref()
                    .filter(|r| period.map_or(true, |t| r.period == t))
                    .map(|r| r.instance)
                    .collect();
                if it.skipped() > 0 {
                    eprintln!("skipped {} malformed rows", it.skipped());
                }
                rows
            };
            (trainer, rows, period)
        }
        (None, None) => return Err(usage("either --config or --data is required")),
    };
    let metrics = trainer.evaluate(&rows)?;
    match out {
        Some(p) => write_metrics(period, &metrics, create(p)?),
        None => write_metrics(period, &metrics, io::stdout().lock()),
    }
}

fn synth(spec: &str, overrides: &[(String, String)], seed: Option<u64>, out: &Path) -> Result<(), Failure> {
    let base = synth_config(spec, Path::new("."), None).map_err(usage)?;
    let mut doc = toml::Value::try_from(&base).map_err(usage)?;
    for (k, v) in overrides {
        ddp_core::harness::set_dotted(&mut doc, k, v).map_err(usage)?;
    }
    let mut cfg: SynthConfig = doc.try_into().map_err(usage)?;
    if let Some(s) = seed {
        cfg.world_seed = Some(cfg.world_seed.unwrap_or(cfg.seed));
        cfg.seed = s;
    }
    let schema = cfg.schema().map_err(usage)?;
    let (stream, truth) = ddp_core::stream::synth_drift(&cfg)?;
    std::fs::create_dir_all(out)?;
    write_stream_csv(&stream, &schema, create(&out.join("data.csv"))?)?;
    truth.write_csv(&schema, create(&out.join("truth.csv"))?)?;
    std::fs::write(out.join("schema.toml"), schema.to_text())?;
    std::fs::write(out.join("synth.toml"), cfg.to_text())?;
    println!(
        "wrote {} periods x {} rows to {} (data digest {})",
        cfg.periods,
        cfg.instances_per_period,
        out.display(),
        content_digest(&std::fs::read(out.join("data.csv"))?)
    );
    Ok(())
}

fn write_kl(stream: &ddp_core::stream::PeriodStream, features: usize, groups: usize, out: &mut impl Write) -> Result<(), Failure> {
    let (f, g) = (top_features(stream, features), top_groups(stream, groups));
    if g.is_empty() {
        eprintln!("no instance group occurs in every period");
    }
    let report = kl_report(stream, &f, &g);
    report.write_csv(&mut *out)?;
    eprintln!(
        "mean KL: feature {:.5}, instance group {:.5}; {} sparse cells",
        report.mean(Granularity::Feature),
        report.mean(Granularity::InstanceGroup),
        report.sparse_cells().len()
    );
    Ok(())
}

fn kl_diag(args: &ConfigArgs, features: usize, groups: usize, out: Option<&Path>) -> Result<(), Failure> {
    let loaded = args.load()?;
    let data = loaded.data()?;
    match out {
        Some(p) => write_kl(&data.stream, features, groups, &mut create(p)?),
        None => write_kl(&data.stream, features, groups, &mut io::stdout().lock()),
    }
}

fn grad_check(which: Which, setup: GradCheckSetup) -> Result<(), Failure> {
    let kinds: &[InteractionKind] = match which {
        Which::Dnn => &[InteractionKind::Dnn],
        Which::Deepfm => &[InteractionKind::DeepFm],
        Which::Both => &[InteractionKind::Dnn, InteractionKind::DeepFm],
    };
    let mut failed = Vec::new();
    for &kind in kinds {
        let report = check_model_gradients(&GradCheckSetup { interaction: kind, ..setup.clone() })?;
        let mut modules: BTreeMap<&str, f64> = BTreeMap::new();
        for s in report.main.slots.iter().chain(&report.feature_prior.slots) {
            let module = s.id.split('.').next().unwrap_or(&s.id);
            let e = modules.entry(module).or_insert(0.0);
            *e = e.max(s.max_rel_err as f64);
        }
        for (m, e) in &modules {
            println!("{kind:<6} {m:<14} max rel err {e:.3e}");
        }
        let worst = report
            .main
            .slots
            .iter()
            .chain(&report.feature_prior.slots)
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err));
        let max = report.max_rel_err() as f64;
        if max <= GRAD_TOLERANCE {
            println!("{kind:<6} PASS max rel err {max:.3e}");
        } else {
            let slot = worst.map(|s| s.id.as_str()).unwrap_or("?");
            println!("{kind:<6} FAIL max rel err {max:.3e} in slot {slot}");
            failed.push(format!("{kind}: slot {slot}"));
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Run(format!("gradient check failed ({})", failed.join("; "))))
    }
}

fn bench(mode: &str, instances: usize) -> Result<(), Failure> {
    let mode: Mode = mode.parse().map_err(usage)?;
    let t = measure_throughput(mode, instances)?;
    print!("{mode} {}-bit warmup {:.0}", t.real_bits, t.warmup);
    if let Some(i) = t.incremental {
        print!(" incremental {i:.0}");
    }
    println!(" instances/s");
    Ok(())
}
