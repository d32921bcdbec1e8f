//! Final-period AUC on the drift scenario with the prior logits trained by
//! SGD or by Adam at several learning rates, over five seeds. Arguments are
//! run-config overrides (`key=value`).

use ddp_core::harness::{run_protocol, RunConfig};
use ddp_core::metrics::Split;
use ddp_core::optim::PhiOptimizerKind;
use ddp_core::stream::{synth_drift, SynthConfig};

fn main() {
    let mut config = RunConfig::preset("drift").unwrap();
    for arg in std::env::args().skip(1) {
        let (k, v) = arg.split_once('=').expect("key=value");
        config.apply_override(k, v).unwrap();
    }
    let streams: Vec<_> = (1..=5)
        .map(|s| {
            let cfg = SynthConfig::drift_scenario(s, true);
            (cfg.schema().unwrap(), synth_drift(&cfg).unwrap().0)
        })
        .collect();
    let runs = [
        (PhiOptimizerKind::Sgd, 1e-3),
        (PhiOptimizerKind::Sgd, 1e-2),
        (PhiOptimizerKind::Sgd, 5e-2),
        (PhiOptimizerKind::Adam, 1e-3),
        (PhiOptimizerKind::Adam, 1e-2),
        (PhiOptimizerKind::Adam, 1e-1),
    ];
    for (kind, lr) in runs {
        let aucs: Vec<f64> = streams
            .iter()
            .zip(1u64..)
            .map(|((schema, stream), seed)| {
                let cfg = RunConfig { seed, phi_optimizer: kind, sgd_lr: lr, ..config.clone() };
                run_protocol(stream, schema, &cfg).unwrap().test_auc(Split::All).unwrap()
            })
            .collect();
        let mean = aucs.iter().sum::<f64>() / aucs.len() as f64;
        let list: Vec<String> = aucs.iter().map(|a| format!("{a:.4}")).collect();
        println!("{kind:?} {lr:e}: mean {mean:.4} [{}]", list.join(" "));
    }
}
