//! The study population: small bias-free MLPs and patch convolutions trained with SGD.
//!
//! A convolution here uses stride equal to its kernel and no padding, so every
//! layer is a linear map applied independently to non-overlapping patches. Its
//! kernel tensor `(c_in, c_out, h, w)` acts through the `(c_in*h*w) x c_out`
//! patch matrix. The last layer is mean-pooled over positions to give logits.
//! No activation is applied to the logits.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metric::WeightSet;
use crate::seed;
use crate::tasks::{Dataset, TaskData, TaskSuite};
use crate::tensor::{Matrix, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu {
        slope: f64,
    },
    /// Identity; used for linear-network checks.
    Linear,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::LeakyRelu { slope } => {
                if z > 0.0 {
                    z
                } else {
                    slope * z
                }
            }
            Activation::Linear => z,
        }
    }

    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu { slope } => {
                if z > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Activation::Linear => 1.0,
        }
    }

    fn has_kink(self) -> bool {
        !matches!(self, Activation::Linear)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    /// Widths `n_0 .. n_L`.
    Mlp { widths: Vec<usize> },
    /// Channels `n_0 .. n_L`, a shared kernel and the input plane size.
    Conv {
        channels: Vec<usize>,
        kernel: (usize, usize),
        input: (usize, usize),
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NetKind {
    Mlp = 0,
    Conv = 1,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetSpec {
    pub arch: Architecture,
    pub activation: Activation,
    #[serde(default)]
    pub residual: bool,
    /// Adds per-unit biases. They take part in training but never in chain features.
    #[serde(default)]
    pub bias: bool,
}

impl NetSpec {
    pub fn mlp(widths: &[usize], activation: Activation) -> Self {
        NetSpec {
            arch: Architecture::Mlp {
                widths: widths.to_vec(),
            },
            activation,
            residual: false,
            bias: false,
        }
    }

    pub fn conv(
        channels: &[usize],
        kernel: (usize, usize),
        input: (usize, usize),
        activation: Activation,
    ) -> Self {
        NetSpec {
            arch: Architecture::Conv {
                channels: channels.to_vec(),
                kernel,
                input,
            },
            activation,
            residual: false,
            bias: false,
        }
    }

    pub fn with_residual(mut self, residual: bool) -> Self {
        self.residual = residual;
        self
    }

    pub fn with_bias(mut self, bias: bool) -> Self {
        self.bias = bias;
        self
    }

    pub fn kind(&self) -> NetKind {
        match self.arch {
            Architecture::Mlp { .. } => NetKind::Mlp,
            Architecture::Conv { .. } => NetKind::Conv,
        }
    }

    /// `n_0 .. n_L`.
    pub fn widths(&self) -> &[usize] {
        match &self.arch {
            Architecture::Mlp { widths } => widths,
            Architecture::Conv { channels, .. } => channels,
        }
    }

    pub fn depth(&self) -> usize {
        self.widths().len().saturating_sub(1)
    }

    pub fn kernel(&self) -> (usize, usize) {
        match self.arch {
            Architecture::Mlp { .. } => (1, 1),
            Architecture::Conv { kernel, .. } => kernel,
        }
    }

    /// Length of one input vector.
    pub fn input_len(&self) -> usize {
        match &self.arch {
            Architecture::Mlp { widths } => widths[0],
            Architecture::Conv {
                channels, input, ..
            } => channels[0] * input.0 * input.1,
        }
    }

    pub fn num_outputs(&self) -> usize {
        *self.widths().last().unwrap_or(&0)
    }

    pub fn validate(&self) -> Result<()> {
        let widths = self.widths();
        if widths.len() < 2 {
            return Err(Error::Config("a network needs at least one layer".into()));
        }
        if widths.contains(&0) {
            return Err(Error::Config(format!("zero width in {widths:?}")));
        }
        if let Activation::LeakyRelu { slope } = self.activation {
            if !(slope > 0.0 && slope < 1.0) {
                return Err(Error::Config(format!("leaky slope {slope} outside (0, 1)")));
            }
        }
        if let Architecture::Conv { kernel, input, .. } = self.arch {
            if kernel.0 == 0 || kernel.1 == 0 {
                return Err(Error::Config("zero kernel size".into()));
            }
            let (mut gh, mut gw) = input;
            for l in 0..self.depth() {
                gh /= kernel.0;
                gw /= kernel.1;
                if gh == 0 || gw == 0 {
                    return Err(Error::Config(format!(
                        "input plane {input:?} vanishes at layer {} with kernel {kernel:?}",
                        l + 1
                    )));
                }
            }
            if self.residual {
                return Err(Error::Config(
                    "residual connections are only supported for MLPs".into(),
                ));
            }
        }
        if self.residual && !(1..self.depth()).any(|l| self.has_skip(l)) {
            return Err(Error::Config(format!(
                "residual net needs a hidden layer with equal input and output widths, got {widths:?}"
            )));
        }
        Ok(())
    }

    /// Whether hidden layer `l` (1-based) carries a skip connection: residual
    /// nets add the input of every hidden layer whose input and output widths match.
    fn has_skip(&self, l: usize) -> bool {
        self.residual && l >= 1 && l < self.depth() && self.widths()[l - 1] == self.widths()[l]
    }

    /// Spatial grids `g_0 .. g_L`; all `(1, 1)` for MLPs.
    fn grids(&self) -> Vec<(usize, usize)> {
        let (kh, kw) = self.kernel();
        let mut g = match self.arch {
            Architecture::Mlp { .. } => (1, 1),
            Architecture::Conv { input, .. } => input,
        };
        let mut out = vec![g];
        for _ in 0..self.depth() {
            g = (g.0 / kh, g.1 / kw);
            out.push(g);
        }
        out
    }
}

/// Per-layer weights of one network.
#[derive(Clone, Debug, PartialEq)]
pub enum Layers {
    Mlp(Vec<Matrix>),
    Conv(Vec<Tensor4>),
}

impl Layers {
    pub fn len(&self) -> usize {
        match self {
            Layers::Mlp(v) => v.len(),
            Layers::Conv(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Layer `l` (0-based) flattened row-major.
    pub fn flat(&self, l: usize) -> &[f64] {
        match self {
            Layers::Mlp(v) => v[l].data(),
            Layers::Conv(v) => v[l].data(),
        }
    }

    /// Dims of layer `l`: `[rows, cols]` or `[c_in, c_out, h, w]`.
    pub fn dims(&self, l: usize) -> Vec<usize> {
        match self {
            Layers::Mlp(v) => vec![v[l].rows(), v[l].cols()],
            Layers::Conv(v) => v[l].dims().to_vec(),
        }
    }

    /// Patch matrices used by the forward pass.
    fn patch_matrices(&self) -> Vec<Matrix> {
        match self {
            Layers::Mlp(v) => v.clone(),
            Layers::Conv(v) => v.iter().map(Tensor4::to_patch_matrix).collect(),
        }
    }

    fn from_patch_matrices(spec: &NetSpec, params: Vec<Matrix>) -> Result<Layers> {
        match spec.arch {
            Architecture::Mlp { .. } => Ok(Layers::Mlp(params)),
            Architecture::Conv {
                ref channels,
                kernel,
                ..
            } => params
                .iter()
                .enumerate()
                .map(|(l, p)| {
                    Tensor4::from_patch_matrix(
                        p,
                        [channels[l], channels[l + 1], kernel.0, kernel.1],
                    )
                })
                .collect::<Result<Vec<_>>>()
                .map(Layers::Conv),
        }
    }

    /// Rounds every value through `f32`, matching what the archive stores.
    pub fn round_to_f32(&mut self) {
        let round = |d: &mut [f64]| d.iter_mut().for_each(|v| *v = f64::from(*v as f32));
        match self {
            Layers::Mlp(v) => v.iter_mut().for_each(|m| round(m.data_mut())),
            Layers::Conv(v) => v.iter_mut().for_each(|t| round(t.data_mut())),
        }
    }

    /// Checks every layer against the shapes `spec` implies.
    pub fn check_against(&self, spec: &NetSpec) -> Result<()> {
        let widths = spec.widths();
        if self.len() != spec.depth() {
            return Err(Error::Shape(format!(
                "{} layers for a depth-{} network",
                self.len(),
                spec.depth()
            )));
        }
        let (kh, kw) = spec.kernel();
        for l in 0..self.len() {
            let expected = match (self, spec.kind()) {
                (Layers::Mlp(_), NetKind::Mlp) => vec![widths[l], widths[l + 1]],
                (Layers::Conv(_), NetKind::Conv) => vec![widths[l], widths[l + 1], kh, kw],
                _ => {
                    return Err(Error::Shape(
                        "layer kind does not match network kind".into(),
                    ))
                }
            };
            if self.dims(l) != expected {
                return Err(Error::Shape(format!(
                    "layer {} has dims {:?}, expected {expected:?}",
                    l + 1,
                    self.dims(l)
                )));
            }
        }
        Ok(())
    }
}

/// Weights from one SGD run on one task.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainedWeights {
    pub spec: NetSpec,
    pub layers: Layers,
    /// One vector per layer when `spec.bias`, otherwise empty.
    pub biases: Vec<Vec<f64>>,
    pub task_id: usize,
    pub run_index: usize,
    pub run_seed: u64,
    pub final_train_acc: f64,
    pub final_test_acc: f64,
}

impl TrainedWeights {
    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        Network::new(&self.spec, &self.layers, &self.biases)?.logits_one(x)
    }

    pub fn round_to_f32(&mut self) {
        self.layers.round_to_f32();
        for b in &mut self.biases {
            b.iter_mut().for_each(|v| *v = f64::from(*v as f32));
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrDecay {
    pub factor: f64,
    pub at_epoch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default)]
    pub lr_decay: Option<LrDecay>,
    #[serde(default)]
    pub momentum: f64,
    /// L2 penalty on the weights (biases excluded).
    #[serde(default)]
    pub weight_decay: f64,
}

impl TrainConfig {
    /// Constant `lr`, divided by 10 at 70% of the epochs.
    pub fn with_default_decay(epochs: usize, batch_size: usize, lr: f64, momentum: f64) -> Self {
        TrainConfig {
            epochs,
            batch_size,
            lr,
            lr_decay: Some(LrDecay {
                factor: 0.1,
                at_epoch: epochs * 7 / 10,
            }),
            momentum,
            weight_decay: 0.0,
        }
    }

    pub fn with_weight_decay(mut self, weight_decay: f64) -> Self {
        self.weight_decay = weight_decay;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum {} outside [0, 1)",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight_decay {} must be >= 0",
                self.weight_decay
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }

    fn lr_at(&self, epoch: usize) -> f64 {
        match self.lr_decay {
            Some(d) if epoch >= d.at_epoch => self.lr * d.factor,
            _ => self.lr,
        }
    }
}

/// Inputs `(B x input_len)` and labels for one mini-batch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub x: Matrix,
    pub y: Vec<usize>,
}

/// Trained or untrained parameters bound to a spec, in patch-matrix form.
struct Network<'a> {
    spec: &'a NetSpec,
    params: Vec<Matrix>,
    biases: Vec<Vec<f64>>,
    grids: Vec<(usize, usize)>,
}

struct Cache {
    /// Gathered input of each layer, `(B*P_out) x (C_in*h*w)`.
    inputs: Vec<Matrix>,
    /// Pre-activations of each layer.
    pre: Vec<Matrix>,
    logits: Matrix,
}

struct Grads {
    weights: Vec<Matrix>,
    biases: Vec<Vec<f64>>,
}

impl<'a> Network<'a> {
    fn new(spec: &'a NetSpec, layers: &Layers, biases: &[Vec<f64>]) -> Result<Self> {
        spec.validate()?;
        layers.check_against(spec)?;
        let widths = spec.widths();
        let biases = if spec.bias && !biases.is_empty() {
            if biases.len() != spec.depth()
                || biases.iter().zip(&widths[1..]).any(|(b, &n)| b.len() != n)
            {
                return Err(Error::Shape("bias shapes do not match the network".into()));
            }
            biases.to_vec()
        } else {
            widths[1..].iter().map(|&n| vec![0.0; n]).collect()
        };
        Ok(Network {
            spec,
            params: layers.patch_matrices(),
            biases,
            grids: spec.grids(),
        })
    }

    fn positions(&self, l: usize) -> usize {
        self.grids[l].0 * self.grids[l].1
    }

    /// Converts `B` input vectors in `(c, y, x)` order to `(B*P_0) x n_0` rows.
    fn input_rows(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.spec.input_len() {
            return Err(Error::Shape(format!(
                "input length {} does not match network input {}",
                x.cols(),
                self.spec.input_len()
            )));
        }
        if self.spec.kind() == NetKind::Mlp {
            return Ok(x.clone());
        }
        let c = self.spec.widths()[0];
        let p = self.positions(0);
        let mut out = Matrix::zeros(x.rows() * p, c);
        for b in 0..x.rows() {
            let row = x.row(b);
            for ch in 0..c {
                for pos in 0..p {
                    out[(b * p + pos, ch)] = row[ch * p + pos];
                }
            }
        }
        Ok(out)
    }

    /// Non-overlapping `h x w` patches of the layer-`l` activations.
    fn gather(&self, a: &Matrix, batch: usize, l: usize) -> Matrix {
        if self.spec.kind() == NetKind::Mlp {
            return a.clone();
        }
        let (kh, kw) = self.spec.kernel();
        let (gh_in, gw_in) = self.grids[l];
        let (gh, gw) = self.grids[l + 1];
        let c = a.cols();
        let p_in = gh_in * gw_in;
        let p_out = gh * gw;
        let mut out = Matrix::zeros(batch * p_out, c * kh * kw);
        for b in 0..batch {
            for y in 0..gh {
                for x in 0..gw {
                    let dst = out.row_mut(b * p_out + y * gw + x);
                    for ka in 0..kh {
                        for kb in 0..kw {
                            let src = a.row(b * p_in + (y * kh + ka) * gw_in + x * kw + kb);
                            for i in 0..c {
                                dst[(i * kh + ka) * kw + kb] = src[i];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Adjoint of [`Network::gather`].
    fn scatter(&self, d: &Matrix, batch: usize, l: usize, channels: usize) -> Matrix {
        if self.spec.kind() == NetKind::Mlp {
            return d.clone();
        }
        let (kh, kw) = self.spec.kernel();
        let (gh_in, gw_in) = self.grids[l];
        let (gh, gw) = self.grids[l + 1];
        let p_in = gh_in * gw_in;
        let p_out = gh * gw;
        let mut out = Matrix::zeros(batch * p_in, channels);
        for b in 0..batch {
            for y in 0..gh {
                for x in 0..gw {
                    let src = d.row(b * p_out + y * gw + x).to_vec();
                    for ka in 0..kh {
                        for kb in 0..kw {
                            let dst = out.row_mut(b * p_in + (y * kh + ka) * gw_in + x * kw + kb);
                            for i in 0..channels {
                                dst[i] += src[(i * kh + ka) * kw + kb];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn forward(&self, x: &Matrix) -> Result<Cache> {
        let batch = x.rows();
        let depth = self.spec.depth();
        let act = self.spec.activation;
        let mut h = self.input_rows(x)?;
        let mut inputs = Vec::with_capacity(depth);
        let mut pre = Vec::with_capacity(depth);
        for l in 0..depth {
            let xin = self.gather(&h, batch, l);
            let mut z = xin.matmul(&self.params[l])?;
            let bias = &self.biases[l];
            for r in 0..z.rows() {
                for (v, b) in z.row_mut(r).iter_mut().zip(bias) {
                    *v += b;
                }
            }
            if l + 1 < depth {
                let mut next = z.clone();
                next.data_mut().iter_mut().for_each(|v| *v = act.apply(*v));
                if self.spec.has_skip(l + 1) {
                    for (n, prev) in next.data_mut().iter_mut().zip(h.data()) {
                        *n += prev;
                    }
                }
                h = next;
            }
            inputs.push(xin);
            pre.push(z);
        }
        // mean-pool the last layer's positions into logits
        let last = pre.last().expect("depth >= 1");
        let p = self.positions(depth);
        let n_out = self.spec.num_outputs();
        let mut logits = Matrix::zeros(batch, n_out);
        for b in 0..batch {
            for pos in 0..p {
                for (o, v) in logits.row_mut(b).iter_mut().zip(last.row(b * p + pos)) {
                    *o += v / p as f64;
                }
            }
        }
        Ok(Cache {
            inputs,
            pre,
            logits,
        })
    }

    fn logits_one(&self, x: &[f64]) -> Result<Vec<f64>> {
        let m = Matrix::new(1, x.len(), x.to_vec())?;
        Ok(self.forward(&m)?.logits.into_data())
    }

    /// Mean cross-entropy of `logits` against `y`.
    fn loss(logits: &Matrix, y: &[usize]) -> f64 {
        let n = logits.rows();
        (0..n)
            .map(|r| {
                let row = logits.row(r);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                lse - row[y[r]]
            })
            .sum::<f64>()
            / n as f64
    }

    /// Loss and gradients of the mean cross-entropy over a batch.
    fn backward(&self, batch: &Batch) -> Result<(f64, Grads)> {
        let cache = self.forward(&batch.x)?;
        let b = batch.x.rows();
        let depth = self.spec.depth();
        let act = self.spec.activation;
        let loss = Self::loss(&cache.logits, &batch.y);

        let mut d_logits = cache.logits.clone();
        for r in 0..b {
            let row = d_logits.row_mut(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum * b as f64;
            }
            row[batch.y[r]] -= 1.0 / b as f64;
        }
        let p_last = self.positions(depth);
        let mut dz = Matrix::zeros(b * p_last, self.spec.num_outputs());
        for r in 0..b {
            for pos in 0..p_last {
                for (d, g) in dz.row_mut(r * p_last + pos).iter_mut().zip(d_logits.row(r)) {
                    *d = g / p_last as f64;
                }
            }
        }

        let mut weights = vec![Matrix::zeros(0, 0); depth];
        let mut biases = vec![Vec::new(); depth];
        // gradient w.r.t. the output h of the layer whose dz we hold (None for the last layer)
        let mut dh_out: Option<Matrix> = None;
        for l in (0..depth).rev() {
            weights[l] = cache.inputs[l].transpose().matmul(&dz)?;
            let mut db = vec![0.0; dz.cols()];
            for r in 0..dz.rows() {
                for (acc, v) in db.iter_mut().zip(dz.row(r)) {
                    *acc += v;
                }
            }
            biases[l] = db;
            if l == 0 {
                break;
            }
            let dx = dz.matmul(&self.params[l].transpose())?;
            let mut dh = self.scatter(&dx, b, l, self.spec.widths()[l]);
            if self.spec.has_skip(l + 1) {
                if let Some(skip) = &dh_out {
                    for (g, s) in dh.data_mut().iter_mut().zip(skip.data()) {
                        *g += s;
                    }
                }
            }
            let mut next = dh.clone();
            for (g, z) in next.data_mut().iter_mut().zip(cache.pre[l - 1].data()) {
                *g *= act.derivative(*z);
            }
            dz = next;
            dh_out = Some(dh);
        }
        Ok((loss, Grads { weights, biases }))
    }
}

/// Logits of one input vector, bias-free.
pub fn forward(spec: &NetSpec, layers: &Layers, x: &[f64]) -> Result<Vec<f64>> {
    Network::new(spec, layers, &[])?.logits_one(x)
}

/// Logits for every row of `x`.
pub fn forward_batch(
    spec: &NetSpec,
    layers: &Layers,
    biases: &[Vec<f64>],
    x: &Matrix,
) -> Result<Matrix> {
    Ok(Network::new(spec, layers, biases)?.forward(x)?.logits)
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn accuracy(net: &Network<'_>, x: &Matrix, y: &[usize]) -> Result<f64> {
    if y.is_empty() {
        return Ok(0.0);
    }
    let logits = net.forward(x)?.logits;
    let correct = (0..logits.rows())
        .filter(|&r| argmax(logits.row(r)) == y[r])
        .count();
    Ok(correct as f64 / y.len() as f64)
}

/// Uniform `[-s, s]` with `s = sqrt(6 / fan_in)`.
pub fn init_layers<R: rand::Rng + ?Sized>(spec: &NetSpec, rng: &mut R) -> Layers {
    let widths = spec.widths();
    let (kh, kw) = spec.kernel();
    match spec.kind() {
        NetKind::Mlp => Layers::Mlp(
            widths
                .windows(2)
                .map(|w| Matrix::random_uniform(w[0], w[1], (6.0 / w[0] as f64).sqrt(), rng))
                .collect(),
        ),
        NetKind::Conv => Layers::Conv(
            widths
                .windows(2)
                .map(|w| {
                    let fan_in = (w[0] * kh * kw) as f64;
                    Tensor4::random_uniform([w[0], w[1], kh, kw], (6.0 / fan_in).sqrt(), rng)
                })
                .collect(),
        ),
    }
}

/// Result of [`train_with_history`]: the weights and the mean loss of every epoch.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub weights: TrainedWeights,
    pub epoch_losses: Vec<f64>,
}

/// Trains one network on one task; deterministic in `run_seed`.
pub fn train(
    spec: &NetSpec,
    data: &TaskData,
    cfg: &TrainConfig,
    run_seed: u64,
) -> Result<TrainedWeights> {
    train_with_history(spec, data, cfg, run_seed).map(|o| o.weights)
}

pub fn train_with_history(
    spec: &NetSpec,
    data: &TaskData,
    cfg: &TrainConfig,
    run_seed: u64,
) -> Result<TrainOutcome> {
    spec.validate()?;
    cfg.validate()?;
    if data.train_y.is_empty() {
        return Err(Error::Data(format!(
            "task {} has no training samples",
            data.task_id
        )));
    }
    if data.num_classes > spec.num_outputs() {
        return Err(Error::Config(format!(
            "task {} has {} classes but the network has {} outputs",
            data.task_id,
            data.num_classes,
            spec.num_outputs()
        )));
    }
    let mut rng = seed::rng(run_seed);
    let layers = init_layers(spec, &mut rng);
    let zero_bias: Vec<Vec<f64>> = if spec.bias {
        spec.widths()[1..].iter().map(|&n| vec![0.0; n]).collect()
    } else {
        Vec::new()
    };
    let mut net = Network::new(spec, &layers, &zero_bias)?;
    let mut vel_w: Vec<Matrix> = net
        .params
        .iter()
        .map(|p| Matrix::zeros(p.rows(), p.cols()))
        .collect();
    let mut vel_b: Vec<Vec<f64>> = net.biases.iter().map(|b| vec![0.0; b.len()]).collect();

    let n = data.train_y.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = select_rows(&data.train_x, &data.train_y, chunk)?;
            let (loss, grads) = net.backward(&batch)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, lr });
            }
            total += loss * chunk.len() as f64;
            for ((p, v), g) in net.params.iter_mut().zip(&mut vel_w).zip(&grads.weights) {
                for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                    *vv = cfg.momentum * *vv - lr * (gv + cfg.weight_decay * *pv);
                    *pv += *vv;
                }
            }
            if spec.bias {
                for ((p, v), g) in net.biases.iter_mut().zip(&mut vel_b).zip(&grads.biases) {
                    for ((pv, vv), gv) in p.iter_mut().zip(v.iter_mut()).zip(g) {
                        *vv = cfg.momentum * *vv - lr * gv;
                        *pv += *vv;
                    }
                }
            }
        }
        let mean = total / n as f64;
        if !mean.is_finite()
            || net
                .params
                .iter()
                .any(|p| p.data().iter().any(|v| !v.is_finite()))
        {
            return Err(Error::Divergence { epoch, lr });
        }
        epoch_losses.push(mean);
    }

    let final_train_acc = accuracy(&net, &data.train_x, &data.train_y)?;
    let final_test_acc = accuracy(&net, &data.test_x, &data.test_y)?;
    let biases = if spec.bias {
        net.biases.clone()
    } else {
        Vec::new()
    };
    let layers = Layers::from_patch_matrices(spec, net.params)?;
    Ok(TrainOutcome {
        weights: TrainedWeights {
            spec: spec.clone(),
            layers,
            biases,
            task_id: data.task_id,
            run_index: 0,
            run_seed,
            final_train_acc,
            final_test_acc,
        },
        epoch_losses,
    })
}

fn select_rows(x: &Matrix, y: &[usize], idx: &[usize]) -> Result<Batch> {
    let mut data = Vec::with_capacity(idx.len() * x.cols());
    for &i in idx {
        data.extend_from_slice(x.row(i));
    }
    Ok(Batch {
        x: Matrix::new(idx.len(), x.cols(), data)?,
        y: idx.iter().map(|&i| y[i]).collect(),
    })
}

/// Mean cross-entropy of a bias-free network on a batch.
pub fn batch_loss(spec: &NetSpec, layers: &Layers, batch: &Batch) -> Result<f64> {
    let net = Network::new(spec, layers, &[])?;
    Ok(Network::loss(&net.forward(&batch.x)?.logits, &batch.y))
}

/// Analytic weight gradients of the mean cross-entropy, in the layers' own layout.
pub fn weight_gradients(spec: &NetSpec, layers: &Layers, batch: &Batch) -> Result<Layers> {
    let net = Network::new(spec, layers, &[])?;
    let (_, grads) = net.backward(batch)?;
    Layers::from_patch_matrices(spec, grads.weights)
}

/// Smallest |pre-activation| over all hidden units of all samples. Central
/// differences are only trustworthy when this exceeds the probe step.
pub fn kink_margin(spec: &NetSpec, layers: &Layers, x: &Matrix) -> Result<f64> {
    if !spec.activation.has_kink() {
        return Ok(f64::INFINITY);
    }
    let net = Network::new(spec, layers, &[])?;
    let cache = net.forward(x)?;
    let depth = spec.depth();
    Ok(cache.pre[..depth - 1]
        .iter()
        .flat_map(|z| z.data().iter().map(|v| v.abs()))
        .fold(f64::INFINITY, f64::min))
}

/// Largest relative error between backprop and central finite differences
/// (step 1e-5) over every weight. Relative error uses
/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn gradient_check(spec: &NetSpec, layers: &Layers, batch: &Batch) -> Result<f64> {
    const EPS: f64 = 1e-5;
    let analytic = weight_gradients(spec, layers, batch)?;
    let mut probe = layers.clone();
    let mut worst: f64 = 0.0;
    for l in 0..layers.len() {
        for i in 0..layers.flat(l).len() {
            let original = layers.flat(l)[i];
            set_flat(&mut probe, l, i, original + EPS);
            let plus = batch_loss(spec, &probe, batch)?;
            set_flat(&mut probe, l, i, original - EPS);
            let minus = batch_loss(spec, &probe, batch)?;
            set_flat(&mut probe, l, i, original);
            let numeric = (plus - minus) / (2.0 * EPS);
            let a = analytic.flat(l)[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

fn set_flat(layers: &mut Layers, l: usize, i: usize, v: f64) {
    match layers {
        Layers::Mlp(m) => m[l].data_mut()[i] = v,
        Layers::Conv(t) => t[l].data_mut()[i] = v,
    }
}

/// Trains `runs_per_task` networks for every task of `suite`.
///
/// Run `r` of task `j` uses [`seed::run_seed`]`(master_seed, j, r)`. Runs execute
/// in parallel on the current rayon pool and are collected in (task, run) order.
/// Stored weights are rounded through `f32`, the precision the archive keeps.
pub fn generate_weight_set(
    dataset: &Dataset,
    suite: &TaskSuite,
    spec: &NetSpec,
    cfg: &TrainConfig,
    runs_per_task: usize,
    master_seed: u64,
) -> Result<WeightSet> {
    generate_weight_set_with_progress(
        dataset,
        suite,
        spec,
        cfg,
        runs_per_task,
        master_seed,
        |_, _| {},
    )
}

pub fn generate_weight_set_with_progress<F>(
    dataset: &Dataset,
    suite: &TaskSuite,
    spec: &NetSpec,
    cfg: &TrainConfig,
    runs_per_task: usize,
    master_seed: u64,
    on_run: F,
) -> Result<WeightSet>
where
    F: Fn(usize, usize) + Sync,
{
    if runs_per_task < 2 {
        return Err(Error::Config(format!(
            "runs_per_task must be at least 2, got {runs_per_task}"
        )));
    }
    spec.validate()?;
    cfg.validate()?;
    let data: Vec<TaskData> = suite
        .tasks
        .iter()
        .map(|t| TaskData::materialize(dataset, t))
        .collect::<Result<_>>()?;
    let jobs: Vec<(usize, usize)> = (0..data.len())
        .flat_map(|t| (0..runs_per_task).map(move |r| (t, r)))
        .collect();
    let entries = jobs
        .par_iter()
        .map(|&(t, r)| {
            let task = &data[t];
            let run_seed = seed::run_seed(master_seed, task.task_id, r);
            let mut w = train(spec, task, cfg, run_seed).map_err(|e| Error::Run {
                task: task.task_id,
                run: r,
                source: Box::new(e),
            })?;
            w.run_index = r;
            w.round_to_f32();
            on_run(task.task_id, r);
            Ok(w)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(WeightSet::new(spec.clone(), entries))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::{partition_into_tasks, synth_gaussian_dataset};
    use rand::Rng;

    fn fig1_layers() -> (Layers, Layers) {
        let w1 = Matrix::from_rows(&[vec![0.8, 0.1, 0.8], vec![0.9, 0.7, 0.2]]).unwrap();
        let w2 = Matrix::from_rows(&[
            vec![0.5, 0.3, 0.4],
            vec![0.9, 0.1, 0.3],
            vec![0.5, 0.4, 0.2],
        ])
        .unwrap();
        let w1p = Matrix::from_rows(&[vec![0.1, 0.8, 0.8], vec![0.7, 0.9, 0.2]]).unwrap();
        let w2p = Matrix::from_rows(&[
            vec![0.9, 0.1, 0.3],
            vec![0.5, 0.3, 0.4],
            vec![0.5, 0.4, 0.2],
        ])
        .unwrap();
        (Layers::Mlp(vec![w1, w2]), Layers::Mlp(vec![w1p, w2p]))
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let spec = NetSpec::mlp(&[4, 5, 3], Activation::Relu);
        let layers = Layers::Mlp(vec![Matrix::zeros(4, 5), Matrix::zeros(5, 3)]);
        assert_eq!(
            forward(&spec, &layers, &[1.0, -2.0, 3.0, 0.5]).unwrap(),
            vec![0.0; 3]
        );
    }

    #[test]
    fn figure_one_networks_agree() {
        let spec = NetSpec::mlp(&[2, 3, 3], Activation::Linear);
        let (a, b) = fig1_layers();
        let mut rng = seed::rng(3);
        for _ in 0..20 {
            let x = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
            let ya = forward(&spec, &a, &x).unwrap();
            let yb = forward(&spec, &b, &x).unwrap();
            for (u, v) in ya.iter().zip(&yb) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_linear_layer_is_matmul() {
        let spec = NetSpec::mlp(&[3, 2], Activation::Relu);
        let w = Matrix::from_rows(&[vec![1.0, -1.0], vec![0.5, 2.0], vec![-3.0, 0.25]]).unwrap();
        let x = Matrix::new(1, 3, vec![0.2, -0.4, 1.5]).unwrap();
        let expected = x.matmul(&w).unwrap();
        let got = forward(&spec, &Layers::Mlp(vec![w]), x.data()).unwrap();
        assert_eq!(got, expected.data());
    }

    #[test]
    fn forward_rejects_wrong_input_length() {
        let spec = NetSpec::mlp(&[3, 2], Activation::Relu);
        let layers = Layers::Mlp(vec![Matrix::zeros(3, 2)]);
        assert!(matches!(
            forward(&spec, &layers, &[1.0]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn spec_validation() {
        assert!(NetSpec::mlp(&[3], Activation::Relu).validate().is_err());
        assert!(NetSpec::mlp(&[3, 0, 2], Activation::Relu)
            .validate()
            .is_err());
        assert!(
            NetSpec::mlp(&[3, 4, 2], Activation::LeakyRelu { slope: 1.5 })
                .validate()
                .is_err()
        );
        assert!(NetSpec::mlp(&[3, 4, 5, 2], Activation::Relu)
            .with_residual(true)
            .validate()
            .is_err());
        assert!(NetSpec::mlp(&[3, 4, 4, 2], Activation::Relu)
            .with_residual(true)
            .validate()
            .is_ok());
        assert!(NetSpec::conv(&[1, 2, 2], (3, 3), (8, 8), Activation::Relu)
            .validate()
            .is_err());
        assert!(NetSpec::conv(&[1, 2, 2], (3, 3), (9, 9), Activation::Relu)
            .validate()
            .is_ok());
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }

    fn blob_task(classes: usize, dim: usize, seed: u64) -> TaskData {
        let d = synth_gaussian_dataset(classes, dim, 30, 1.0, seed).unwrap();
        let suite = partition_into_tasks(&d, classes, 1, seed).unwrap();
        TaskData::materialize(&d, &suite.tasks[0]).unwrap()
    }

    #[test]
    fn separable_blobs_reach_full_train_accuracy() {
        let data = blob_task(2, 4, 1);
        let spec = NetSpec::mlp(&[4, 8, 2], Activation::Relu);
        let cfg = TrainConfig::with_default_decay(30, 8, 0.05, 0.9);
        let w = train(&spec, &data, &cfg, 9).unwrap();
        assert_eq!(w.final_train_acc, 1.0);
    }

    #[test]
    fn zero_epochs_keeps_initialization() {
        let data = blob_task(2, 4, 2);
        let spec = NetSpec::mlp(&[4, 8, 2], Activation::Relu);
        let cfg = TrainConfig::with_default_decay(0, 8, 0.05, 0.9);
        let w = train(&spec, &data, &cfg, 5).unwrap();
        assert_eq!(w.layers, init_layers(&spec, &mut seed::rng(5)));
    }

    #[test]
    fn training_is_bit_deterministic() {
        let data = blob_task(3, 5, 3);
        let spec = NetSpec::mlp(&[5, 6, 6, 3], Activation::Relu).with_residual(true);
        let cfg = TrainConfig::with_default_decay(5, 4, 0.05, 0.5);
        assert_eq!(
            train(&spec, &data, &cfg, 11).unwrap(),
            train(&spec, &data, &cfg, 11).unwrap()
        );
    }

    #[test]
    fn huge_lr_reports_divergence() {
        let data = blob_task(2, 4, 4);
        let spec = NetSpec::mlp(&[4, 16, 16, 2], Activation::Linear);
        let cfg = TrainConfig {
            epochs: 50,
            batch_size: 4,
            lr: 1e200,
            lr_decay: None,
            momentum: 0.9,
            weight_decay: 0.0,
        };
        let r = train(&spec, &data, &cfg, 1);
        assert!(matches!(r, Err(Error::Divergence { .. })), "{r:?}");
    }

    #[test]
    fn loss_trends_down_on_blobs() {
        let data = blob_task(4, 6, 5);
        let spec = NetSpec::mlp(&[6, 10, 4], Activation::Relu);
        let cfg = TrainConfig::with_default_decay(40, 16, 0.02, 0.9);
        let out = train_with_history(&spec, &data, &cfg, 3).unwrap();
        let k = out.epoch_losses.len() / 10;
        let head: f64 = out.epoch_losses[..k].iter().sum::<f64>() / k as f64;
        let tail: f64 = out.epoch_losses[out.epoch_losses.len() - k..]
            .iter()
            .sum::<f64>()
            / k as f64;
        assert!(tail < head, "{head} -> {tail}");
    }

    #[test]
    fn conv_net_trains() {
        let d = synth_gaussian_dataset(2, 2 * 9 * 9, 20, 1.0, 8).unwrap();
        let suite = partition_into_tasks(&d, 2, 1, 0).unwrap();
        let data = TaskData::materialize(&d, &suite.tasks[0]).unwrap();
        let spec = NetSpec::conv(&[2, 3, 2], (3, 3), (9, 9), Activation::Relu);
        let cfg = TrainConfig::with_default_decay(15, 8, 0.05, 0.9);
        let w = train(&spec, &data, &cfg, 2).unwrap();
        assert!(matches!(w.layers, Layers::Conv(_)));
        assert!(w.final_train_acc > 0.9, "{}", w.final_train_acc);
    }

    #[test]
    fn biases_train_but_stay_separate() {
        let data = blob_task(2, 4, 6);
        let spec = NetSpec::mlp(&[4, 5, 2], Activation::Relu).with_bias(true);
        let cfg = TrainConfig::with_default_decay(10, 8, 0.05, 0.9);
        let w = train(&spec, &data, &cfg, 4).unwrap();
        assert_eq!(w.biases.len(), 2);
        assert!(w.biases.iter().flatten().any(|&b| b != 0.0));
        assert_eq!(w.layers.len(), 2);
    }

    #[test]
    fn weight_set_of_one_task_two_runs() {
        let d = synth_gaussian_dataset(2, 3, 12, 1.0, 0).unwrap();
        let suite = partition_into_tasks(&d, 2, 1, 0).unwrap();
        let spec = NetSpec::mlp(&[3, 4, 2], Activation::Relu);
        let cfg = TrainConfig::with_default_decay(2, 4, 0.05, 0.0);
        let ws = generate_weight_set(&d, &suite, &spec, &cfg, 2, 7).unwrap();
        assert_eq!(ws.len(), 2);
        assert!(ws.entries.iter().all(|w| w.task_id == 0));
        assert_ne!(ws.entries[0].run_seed, ws.entries[1].run_seed);
        assert!(generate_weight_set(&d, &suite, &spec, &cfg, 1, 7).is_err());
    }
}
