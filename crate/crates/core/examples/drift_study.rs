//! Runs PLAIN / FP_ONLY / DDP on drift streams over several seeds.
//! Arguments are `key=value`; keys starting with `synth.` tune the stream,
//! the rest override the run config.

use ddp_core::harness::{run_protocol, Mode, RunConfig};
use ddp_core::metrics::Split;
use ddp_core::stream::{synth_drift, SynthConfig};

fn main() {
    let mut config = RunConfig::preset("drift").unwrap();
    let (mut scale, mut zipf, mut sharp, mut bias, mut seeds, mut n) = (1.0, 1.5, 1.0, -1.5, 5u64, 20_000usize);
    let mut modes = vec![Mode::Plain, Mode::FpOnly, Mode::Ddp];
    for arg in std::env::args().skip(1) {
        let (k, v) = arg.split_once('=').expect("key=value");
        match k {
            "synth.scale" => scale = v.parse().unwrap(),
            "synth.zipf" => zipf = v.parse().unwrap(),
            "synth.sharp" => sharp = v.parse().unwrap(),
            "synth.bias" => bias = v.parse().unwrap(),
            "synth.seeds" => seeds = v.parse().unwrap(),
            "synth.n" => n = v.parse().unwrap(),
            "modes" => modes = v.split(',').map(|m| m.parse().unwrap()).collect(),
            _ => config.apply_override(k, v).unwrap(),
        }
    }
    let mut gains = vec![Vec::new(); modes.len()];
    let mut tail_wins = vec![0usize; modes.len()];
    for seed in 1..=seeds {
        let mut synth = SynthConfig {
            instances_per_period: n,
            bias,
            ..SynthConfig::drift_scenario(seed, true)
        };
        for f in &mut synth.fields {
            f.zipf = zipf;
            f.contribution_scale = scale;
        }
        for d in &mut synth.drift {
            d.sharpness = sharp;
        }
        let schema = synth.schema().unwrap();
        let (stream, truth) = synth_drift(&synth).unwrap();
        let test = stream.period(7).unwrap();
        let labels: Vec<u8> = test.iter().map(|x| x.label).collect();
        let oracle = ddp_core::metrics::auc(&truth.instance_p[6], &labels).unwrap();
        let mut line = format!("seed {seed}: oracle {oracle:.4}");
        let mut base = None;
        for (i, &mode) in modes.iter().enumerate() {
            let cfg = RunConfig { mode, seed, lambda: if mode.uses_model_prior() { config.lambda } else { None }, ..config.clone() };
            let r = run_protocol(&stream, &schema, &cfg).unwrap();
            let a = r.test_auc(Split::All).unwrap();
            let h = r.test_auc(Split::ShortHot).unwrap_or(f64::NAN);
            let l = r.test_auc(Split::LongTail).unwrap_or(f64::NAN);
            if i == 0 {
                base = Some((a, h, l));
            }
            let (ba, bh, bl) = base.unwrap();
            gains[i].push(a - ba);
            if l - bl > h - bh {
                tail_wins[i] += 1;
            }
            line += &format!("  {mode}={a:.4} (hot {:+.4} tail {:+.4} d {:+.4})", h - bh, l - bl, a - ba);
        }
        println!("{line}");
    }
    for ((m, g), t) in modes.iter().zip(&gains).zip(&tail_wins) {
        let wins = g.iter().filter(|&&x| x >= 0.0).count();
        println!("{m}: mean gain {:+.5}, wins {wins}/{}, tail>hot {t}", g.iter().sum::<f64>() / g.len() as f64, g.len());
    }
}
