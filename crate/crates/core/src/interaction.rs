//! Interaction modules mapping the concatenated field embeddings `e′` to a
//! click logit. The module only ever sees `e′` (plus an optional per-row
//! linear term supplied by the caller), so the prior layers above it do not
//! care which kind is plugged in.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DdpError, Result};
use crate::nn_core::{gemm, DenseMatrix, ParamSlot, Real, UpdateGroup};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum InteractionKind {
    #[serde(rename = "DNN", alias = "dnn")]
    Dnn,
    #[serde(rename = "DEEPFM", alias = "deepfm", alias = "deep_fm")]
    DeepFm,
}

impl fmt::Display for InteractionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            InteractionKind::Dnn => "DNN",
            InteractionKind::DeepFm => "DEEPFM",
        })
    }
}

impl FromStr for InteractionKind {
    type Err = DdpError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dnn" => Ok(InteractionKind::Dnn),
            "deepfm" | "deep_fm" => Ok(InteractionKind::DeepFm),
            other => Err(DdpError::Config(format!("unknown interaction kind `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InteractionConfig {
    pub kind: InteractionKind,
    pub hidden: Vec<usize>,
    /// Number of `d`-wide vectors in `e′` (2M with the prior, M without).
    pub vectors: usize,
    pub dim: usize,
}

impl InteractionConfig {
    pub fn input_width(&self) -> usize {
        self.vectors * self.dim
    }
}

#[derive(Clone, Debug)]
pub struct DenseLayer {
    pub w: ParamSlot,
    pub b: ParamSlot,
}

/// Activations kept from a training-mode forward pass.
#[derive(Debug)]
pub struct ForwardCache {
    version: u64,
    input: DenseMatrix,
    /// Post-ReLU activations of each hidden layer.
    hidden: Vec<DenseMatrix>,
    /// Per-row sums `Σ_j v_j` over the FM vectors (DeepFM only).
    fm_sum: Option<DenseMatrix>,
}

impl ForwardCache {
    pub fn input(&self) -> &DenseMatrix {
        &self.input
    }
}

#[derive(Clone, Debug)]
pub struct Interaction {
    config: InteractionConfig,
    pub layers: Vec<DenseLayer>,
    version: u64,
}

/// `½ Σ_f [(Σ_j v_jf)² − Σ_j v_jf²]` for one row of stacked vectors.
pub fn fm_second_order(row: &[Real], dim: usize) -> Real {
    let mut total = 0.0;
    for f in 0..dim {
        let (mut s, mut sq) = (0.0, 0.0);
        for v in row[f..].iter().step_by(dim) {
            s += v;
            sq += v * v;
        }
        total += s * s - sq;
    }
    0.5 * total
}

impl Interaction {
    pub fn new(config: InteractionConfig, rng: &mut impl Rng) -> Result<Self> {
        if config.hidden.contains(&0) {
            return Err(DdpError::Config("hidden layer sizes must be positive".into()));
        }
        if config.dim == 0 || config.vectors == 0 {
            return Err(DdpError::Config("interaction input must be non-empty".into()));
        }
        let mut widths = vec![config.input_width()];
        widths.extend(&config.hidden);
        widths.push(1);
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(l, io)| {
                let (fan_in, fan_out) = (io[0], io[1]);
                let bound = (6.0 / (fan_in + fan_out) as Real).sqrt();
                let w = DenseMatrix::from_fn(fan_in, fan_out, |_, _| rng.gen_range(-bound..bound));
                DenseLayer {
                    w: ParamSlot::new(format!("dnn.w{l}"), w, UpdateGroup::Adam, false),
                    b: ParamSlot::new(format!("dnn.b{l}"), DenseMatrix::zeros(1, fan_out), UpdateGroup::Adam, false),
                }
            })
            .collect();
        Ok(Interaction { config, layers, version: 0 })
    }

    pub fn from_layers(config: InteractionConfig, layers: Vec<DenseLayer>) -> Self {
        Interaction { config, layers, version: 0 }
    }

    pub fn config(&self) -> &InteractionConfig {
        &self.config
    }

    /// Invalidates outstanding forward caches; call after every parameter update.
    pub fn mark_updated(&mut self) {
        self.version += 1;
    }

    pub fn slots(&self) -> impl Iterator<Item = &ParamSlot> {
        self.layers.iter().flat_map(|l| [&l.w, &l.b])
    }

    pub fn slots_mut(&mut self) -> impl Iterator<Item = &mut ParamSlot> {
        self.layers.iter_mut().flat_map(|l| [&mut l.w, &mut l.b])
    }

    fn check_input(&self, eprime: &DenseMatrix, linear: Option<&[Real]>) -> Result<()> {
        if eprime.cols() != self.config.input_width() {
            return Err(DdpError::DimMismatch(format!(
                "e′ has width {}, interaction expects {}",
                eprime.cols(),
                self.config.input_width()
            )));
        }
        if let Some(lin) = linear {
            if lin.len() != eprime.rows() {
                return Err(DdpError::LengthMismatch(lin.len(), eprime.rows()));
            }
        }
        Ok(())
    }

    fn affine(&self, l: usize, x: &DenseMatrix, relu: bool) -> DenseMatrix {
        let layer = &self.layers[l];
        let mut z = DenseMatrix::zeros(x.rows(), layer.w.values.cols());
        gemm(x, false, &layer.w.values, false, 0.0, &mut z);
        let bias = layer.b.values.as_slice();
        let cols = bias.len();
        for row in z.as_mut_slice().chunks_mut(cols) {
            for (v, b) in row.iter_mut().zip(bias) {
                let t = *v + b;
                *v = if relu && t < 0.0 { 0.0 } else { t };
            }
        }
        z
    }

    fn run(&self, eprime: &DenseMatrix, linear: Option<&[Real]>, keep: bool) -> (Vec<Real>, Vec<DenseMatrix>, Option<DenseMatrix>) {
        let n = eprime.rows();
        let depth = self.layers.len();
        let mut hidden = Vec::with_capacity(if keep { depth - 1 } else { 0 });
        let mut logits = if depth == 1 {
            self.affine(0, eprime, false).as_slice().to_vec()
        } else {
            let mut a = self.affine(0, eprime, true);
            for l in 1..depth - 1 {
                let next = self.affine(l, &a, true);
                if keep {
                    hidden.push(std::mem::replace(&mut a, next));
                } else {
                    a = next;
                }
            }
            let out = self.affine(depth - 1, &a, false).as_slice().to_vec();
            if keep {
                hidden.push(a);
            }
            out
        };
        let mut fm_sum = None;
        if self.config.kind == InteractionKind::DeepFm {
            let d = self.config.dim;
            let mut sums = keep.then(|| DenseMatrix::zeros(n, d));
            for (r, logit) in logits.iter_mut().enumerate() {
                let row = eprime.row(r);
                let mut total = 0.0;
                for f in 0..d {
                    let (mut s, mut sq) = (0.0, 0.0);
                    for v in row[f..].iter().step_by(d) {
                        s += v;
                        sq += v * v;
                    }
                    total += s * s - sq;
                    if let Some(m) = sums.as_mut() {
                        m.set(r, f, s);
                    }
                }
                *logit += 0.5 * total;
            }
            fm_sum = sums;
        }
        if let Some(lin) = linear {
            for (z, l) in logits.iter_mut().zip(lin) {
                *z += l;
            }
        }
        (logits, hidden, fm_sum)
    }

    /// Evaluation-mode forward: logits only, no cache retained.
    pub fn forward_eval(&self, eprime: &DenseMatrix, linear: Option<&[Real]>) -> Result<Vec<Real>> {
        self.check_input(eprime, linear)?;
        Ok(self.run(eprime, linear, false).0)
    }

    /// Training-mode forward; the returned cache owns `e′`.
    pub fn forward_train(&self, eprime: DenseMatrix, linear: Option<&[Real]>) -> Result<(Vec<Real>, ForwardCache)> {
        self.check_input(&eprime, linear)?;
        let (logits, hidden, fm_sum) = self.run(&eprime, linear, true);
        Ok((
            logits,
            ForwardCache {
                version: self.version,
                input: eprime,
                hidden,
                fm_sum,
            },
        ))
    }

    /// Accumulates parameter gradients for upstream `∂L/∂logit` and returns
    /// `∂L/∂e′`. The linear term's gradient is `dlogit` itself.
    pub fn backward(&mut self, cache: ForwardCache, dlogit: &[Real]) -> Result<DenseMatrix> {
        if cache.version != self.version {
            return Err(DdpError::StaleCache);
        }
        let n = cache.input.rows();
        if dlogit.len() != n {
            return Err(DdpError::LengthMismatch(dlogit.len(), n));
        }
        let depth = self.layers.len();
        let mut dz = DenseMatrix::from_vec(n, 1, dlogit.to_vec())?;
        for l in (0..depth).rev() {
            let input = if l == 0 { &cache.input } else { &cache.hidden[l - 1] };
            let layer = &mut self.layers[l];
            gemm(input, true, &dz, false, 1.0, &mut layer.w.grad);
            let bias_grad = layer.b.grad.as_mut_slice();
            for row in dz.as_slice().chunks(bias_grad.len()) {
                for (g, d) in bias_grad.iter_mut().zip(row) {
                    *g += d;
                }
            }
            let mut dx = DenseMatrix::zeros(n, layer.w.values.rows());
            gemm(&dz, false, &layer.w.values, true, 0.0, &mut dx);
            if l > 0 {
                for (g, a) in dx.as_mut_slice().iter_mut().zip(cache.hidden[l - 1].as_slice()) {
                    if *a <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            dz = dx;
        }
        if let Some(sums) = &cache.fm_sum {
            let d = self.config.dim;
            for r in 0..n {
                let up = dlogit[r];
                if up == 0.0 {
                    continue;
                }
                let s = sums.row(r);
                let x = cache.input.row(r);
                for (k, g) in dz.row_mut(r).iter_mut().enumerate() {
                    *g += up * (s[k % d] - x[k]);
                }
            }
        }
        Ok(dz)
    }
}
