//! Three views for the browser page in `www/`: the square-root bucketing
//! of the prior estimate, how one prior logit tracks a click rate under
//! SGD and under Adam, and the per-period KL drift of a synthetic stream.

use ddp_core::feature_prior::{bin_edges, discretize};
use ddp_core::metrics::{kl_report, top_features, top_groups, Granularity};
use ddp_core::nn_core::{sigmoid, DenseMatrix, ParamSlot, Real, UpdateGroup};
use ddp_core::optim::{adam_step, sgd_step, AdamState, SgdState};
use ddp_core::stream::{synth_drift, SynthConfig};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

/// Bucket of each of `points` evenly spaced estimates in `[0, 1]`.
#[wasm_bindgen]
pub fn bucket_curve(bins: usize, points: usize) -> Vec<u32> {
    let bins = bins.max(2);
    let last = points.max(2) - 1;
    (0..=last)
        .map(|i| discretize(i as Real / last as Real, bins) as u32)
        .collect()
}

/// Upper probability edge of every bucket.
#[wasm_bindgen]
pub fn bucket_edges(bins: usize) -> Vec<f64> {
    let bins = bins.max(2);
    (0..bins).map(|k| bin_edges(k, bins).1 as f64).collect()
}

/// One feature value seen `per_batch` times in each of `steps` batches,
/// clicked at rate `before` and then at `after` from the midpoint on. Its
/// prior logit starts at 0 and follows the per-instance-summed gradient of
/// the auxiliary loss. Returns the estimate `σ(C)` after each step: first
/// the SGD trajectory, then the Adam one.
#[wasm_bindgen]
pub fn prior_trajectory(before: f64, after: f64, per_batch: usize, steps: usize, sgd_lr: f64, adam_lr: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clicks: Vec<Real> = (0..steps)
        .map(|t| {
            let rate = if 2 * t < steps { before } else { after }.clamp(0.0, 1.0);
            (0..per_batch).filter(|_| rng.gen_bool(rate)).count() as Real
        })
        .collect();
    let slot = || ParamSlot::new("c", DenseMatrix::zeros(1, 1), UpdateGroup::Sgd, false);
    let (mut s, mut a) = (slot(), slot());
    let sgd = SgdState::new(sgd_lr as Real).ok();
    let mut adam = AdamState::new(adam_lr as Real, 0.0).ok();
    let mut out = Vec::with_capacity(2 * steps);
    let mut adam_path = Vec::with_capacity(steps);
    let n = per_batch as Real;
    for &k in &clicks {
        for (p, is_sgd) in [(&mut s, true), (&mut a, false)] {
            p.zero_grad();
            // Σ over the batch of (ŝ − y)
            p.grad.set(0, 0, n * sigmoid(p.values.get(0, 0)) - k);
            if is_sgd {
                if let Some(st) = &sgd {
                    let _ = sgd_step(&mut [p], st);
                }
            } else if let Some(st) = adam.as_mut() {
                let _ = adam_step(&mut [p], st);
            }
        }
        out.push(sigmoid(s.values.get(0, 0)) as f64);
        adam_path.push(sigmoid(a.values.get(0, 0)) as f64);
    }
    out.extend(adam_path);
    out
}

/// Mean KL per period of the most frequent feature values, then of the
/// most frequent instance groups, for the drifting (or stationary) synthetic
/// scenario. Returns `2·T` numbers; empty if the stream cannot be built.
#[wasm_bindgen]
pub fn drift_kl(seed: u64, drift: bool, instances_per_period: usize, keys: usize) -> Vec<f64> {
    let cfg = SynthConfig {
        instances_per_period: instances_per_period.max(100),
        ..SynthConfig::drift_scenario(seed, drift)
    };
    let Ok((stream, _)) = synth_drift(&cfg) else {
        return Vec::new();
    };
    let report = kl_report(&stream, &top_features(&stream, keys), &top_groups(&stream, keys));
    let mut out = report.series(Granularity::Feature);
    let groups = report.series(Granularity::InstanceGroup);
    if groups.is_empty() {
        out.extend(std::iter::repeat(0.0).take(stream.len()));
    } else {
        out.extend(groups);
    }
    out
}
