//! Fully connected ReLU networks trained with Adam on a mean squared error.
//!
//! Batches are matrices with one sample per column. The loss of a batch
//! with `B` samples and `m` outputs is
//!
//! ```text
//! L = sum_i ||y_hat_i - y_i||^2 / (B m)
//! ```

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};

/// Loss above which training is declared divergent.
pub const DIVERGENCE_LOSS: f64 = 1e12;
/// Parameter count above which [`grad_check`] samples a subset.
pub const GRAD_CHECK_SUBSET: usize = 10_000;
const FD_STEP: f64 = 1e-5;
const KINK_MARGIN: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpArchitecture {
    /// `[input, hidden..., output]`.
    pub widths: Vec<usize>,
}

impl MlpArchitecture {
    pub fn new(input: usize, hidden: &[usize], output: usize) -> Result<Self> {
        let mut widths = vec![input];
        widths.extend_from_slice(hidden);
        widths.push(output);
        let arch = Self { widths };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 || self.widths.contains(&0) {
            return Err(Error::InvalidParameter(format!(
                "architecture needs input and output widths >= 1, got {:?}",
                self.widths
            )));
        }
        Ok(())
    }

    pub fn input(&self) -> usize {
        self.widths[0]
    }

    pub fn output(&self) -> usize {
        *self.widths.last().expect("validated")
    }

    pub fn n_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn n_params(&self) -> usize {
        self.widths.windows(2).map(|w| w[1] * (w[0] + 1)).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `out x in`.
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub arch: MlpArchitecture,
    pub layers: Vec<Layer>,
    pub init_seed: u64,
}

/// Buffers reused across minibatches.
#[derive(Default)]
struct Workspace {
    /// Hidden activations and pre-activations.
    acts: Vec<DMatrix<f64>>,
    pre: Vec<DMatrix<f64>>,
    out: DMatrix<f64>,
    delta: DMatrix<f64>,
    back: DMatrix<f64>,
    act_t: DMatrix<f64>,
    xb: DMatrix<f64>,
    yb: DMatrix<f64>,
}

fn shape(m: &mut DMatrix<f64>, rows: usize, cols: usize) {
    if m.shape() != (rows, cols) {
        *m = DMatrix::zeros(rows, cols);
    }
}

fn relu_mut(m: &mut DMatrix<f64>) {
    for v in m.as_mut_slice() {
        *v = v.max(0.0);
    }
}

fn add_bias(m: &mut DMatrix<f64>, b: &DVector<f64>) {
    let rows = m.nrows();
    for col in m.as_mut_slice().chunks_exact_mut(rows) {
        for (v, bb) in col.iter_mut().zip(b.as_slice()) {
            *v += bb;
        }
    }
}

impl MlpParams {
    /// He-uniform weights `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`, zero biases.
    pub fn init(arch: &MlpArchitecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = arch
            .widths
            .windows(2)
            .map(|w| {
                let bound = (6.0 / w[0] as f64).sqrt();
                let mut m = DMatrix::zeros(w[1], w[0]);
                // row-major draw order, independent of storage layout
                for r in 0..w[1] {
                    for c in 0..w[0] {
                        m[(r, c)] = rng.random_range(-bound..bound);
                    }
                }
                Layer { w: m, b: DVector::zeros(w[1]) }
            })
            .collect();
        Ok(Self { arch: arch.clone(), layers, init_seed: seed })
    }

    pub fn zeros(arch: &MlpArchitecture) -> Result<Self> {
        arch.validate()?;
        let layers = arch
            .widths
            .windows(2)
            .map(|w| Layer { w: DMatrix::zeros(w[1], w[0]), b: DVector::zeros(w[1]) })
            .collect();
        Ok(Self { arch: arch.clone(), layers, init_seed: 0 })
    }

    fn check_input(&self, x: &DMatrix<f64>) -> Result<()> {
        if x.nrows() != self.arch.input() {
            return Err(dim_err(format!("input has {} rows, network expects {}", x.nrows(), self.arch.input())));
        }
        Ok(())
    }

    /// Outputs and hidden pre-activations.
    fn run(&self, x: &DMatrix<f64>) -> (DMatrix<f64>, Vec<DMatrix<f64>>) {
        let mut pre = Vec::with_capacity(self.layers.len() - 1);
        let last = self.layers.len() - 1;
        let mut a = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = &layer.w * &a;
            add_bias(&mut z, &layer.b);
            if i == last {
                return (z, pre);
            }
            pre.push(z.clone());
            relu_mut(&mut z);
            a = z;
        }
        unreachable!("validated architecture has at least one layer")
    }

    /// Network outputs for a batch (`input x B`).
    pub fn forward(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_input(x)?;
        Ok(self.run(x).0)
    }

    /// Single-sample forward pass without batch bookkeeping.
    pub fn forward_one(&self, x: &[f64]) -> Result<DVector<f64>> {
        if x.len() != self.arch.input() {
            return Err(dim_err(format!("input has {} entries, network expects {}", x.len(), self.arch.input())));
        }
        let mut a = DVector::from_column_slice(x);
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = &layer.w * &a + &layer.b;
            if i < last {
                z.apply(|v| *v = v.max(0.0));
            }
            a = z;
        }
        Ok(a)
    }

    /// Mean squared error of the batch and its gradient.
    pub fn loss_and_grad(&self, x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<(f64, MlpParams)> {
        let mut grad = MlpParams::zeros(&self.arch)?;
        grad.init_seed = self.init_seed;
        let loss = self.loss_and_grad_into(x, y, &mut Workspace::default(), &mut grad)?;
        Ok((loss, grad))
    }

    fn loss_and_grad_into(&self, x: &DMatrix<f64>, y: &DMatrix<f64>, ws: &mut Workspace, grad: &mut MlpParams) -> Result<f64> {
        self.check_input(x)?;
        if y.nrows() != self.arch.output() || y.ncols() != x.ncols() || x.ncols() == 0 {
            return Err(dim_err(format!(
                "batch of {} inputs and {:?} targets does not fit {:?}",
                x.ncols(),
                y.shape(),
                self.arch.widths
            )));
        }
        let batch = x.ncols();
        let last = self.layers.len() - 1;
        ws.pre.resize_with(last, || DMatrix::zeros(0, 0));
        ws.acts.resize_with(last, || DMatrix::zeros(0, 0));
        for (l, layer) in self.layers.iter().enumerate() {
            let (done, rest) = ws.acts.split_at_mut(l);
            let input = if l == 0 { x } else { &done[l - 1] };
            let z = if l == last { &mut ws.out } else { &mut ws.pre[l] };
            shape(z, layer.w.nrows(), batch);
            z.gemm(1.0, &layer.w, input, 0.0);
            add_bias(z, &layer.b);
            if l < last {
                let a = &mut rest[0];
                shape(a, z.nrows(), batch);
                a.copy_from(z);
                relu_mut(a);
            }
        }
        let scale = 1.0 / (batch * self.arch.output()) as f64;
        shape(&mut ws.delta, y.nrows(), batch);
        ws.delta.copy_from(&ws.out);
        ws.delta -= y;
        let loss = ws.delta.norm_squared() * scale;
        ws.delta *= 2.0 * scale;
        for l in (0..self.layers.len()).rev() {
            let input = if l == 0 { x } else { &ws.acts[l - 1] };
            shape(&mut ws.act_t, batch, input.nrows());
            input.transpose_to(&mut ws.act_t);
            let g = &mut grad.layers[l];
            g.w.gemm(1.0, &ws.delta, &ws.act_t, 0.0);
            g.b.fill(0.0);
            for col in ws.delta.as_slice().chunks_exact(ws.delta.nrows()) {
                for (acc, d) in g.b.as_mut_slice().iter_mut().zip(col) {
                    *acc += d;
                }
            }
            if l > 0 {
                shape(&mut ws.back, self.layers[l].w.ncols(), batch);
                self.layers[l].w.tr_mul_to(&ws.delta, &mut ws.back);
                for (d, z) in ws.back.as_mut_slice().iter_mut().zip(ws.pre[l - 1].as_slice()) {
                    if *z <= 0.0 {
                        *d = 0.0;
                    }
                }
                std::mem::swap(&mut ws.delta, &mut ws.back);
            }
        }
        Ok(loss)
    }

    /// Parameters in a fixed order: per layer, `W` column-major then `b`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.arch.n_params());
        for l in &self.layers {
            v.extend_from_slice(l.w.as_slice());
            v.extend_from_slice(l.b.as_slice());
        }
        v
    }

    pub fn from_flat(arch: &MlpArchitecture, flat: &[f64], init_seed: u64) -> Result<Self> {
        arch.validate()?;
        if flat.len() != arch.n_params() {
            return Err(dim_err(format!("{} values for {} parameters", flat.len(), arch.n_params())));
        }
        let mut off = 0;
        let layers = arch
            .widths
            .windows(2)
            .map(|w| {
                let nw = w[0] * w[1];
                let m = DMatrix::from_column_slice(w[1], w[0], &flat[off..off + nw]);
                let b = DVector::from_column_slice(&flat[off + nw..off + nw + w[1]]);
                off += nw + w[1];
                Layer { w: m, b }
            })
            .collect();
        Ok(Self { arch: arch.clone(), layers, init_seed })
    }

    fn param_mut(&mut self, mut idx: usize) -> &mut f64 {
        for l in &mut self.layers {
            let nw = l.w.len();
            if idx < nw {
                return &mut l.w.as_mut_slice()[idx];
            }
            idx -= nw;
            if idx < l.b.len() {
                return &mut l.b[idx];
            }
            idx -= l.b.len();
        }
        panic!("parameter index out of range")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default = "defaults::beta1")]
    pub beta1: f64,
    #[serde(default = "defaults::beta2")]
    pub beta2: f64,
    #[serde(default = "defaults::eps")]
    pub eps: f64,
    pub init_seed: u64,
    pub shuffle_seed: u64,
}

mod defaults {
    pub fn beta1() -> f64 {
        0.9
    }
    pub fn beta2() -> f64 {
        0.999
    }
    pub fn eps() -> f64 {
        1e-8
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 5000,
            batch_size: 128,
            beta1: defaults::beta1(),
            beta2: defaults::beta2(),
            eps: defaults::eps(),
            init_seed: 0,
            shuffle_seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, n_samples: usize) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidParameter(format!("learning rate {} must be >= 0", self.learning_rate)));
        }
        if self.batch_size == 0 || self.batch_size > n_samples {
            return Err(Error::InvalidParameter(format!(
                "minibatch size {} must be in 1..={n_samples}",
                self.batch_size
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::InvalidParameter("Adam needs beta1, beta2 in [0, 1) and eps > 0".into()));
        }
        Ok(())
    }
}

/// Adam state over the flattened parameter vector.
#[derive(Clone, Debug)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(n_params: usize, cfg: &TrainConfig) -> Self {
        Self {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
        }
    }

    pub fn step(&mut self, params: &mut MlpParams, grad: &MlpParams) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let mut k = 0;
        for (lp, lg) in params.layers.iter_mut().zip(&grad.layers) {
            let pairs = lp.w.as_mut_slice().iter_mut().zip(lg.w.as_slice());
            let pairs = pairs.chain(lp.b.as_mut_slice().iter_mut().zip(lg.b.as_slice()));
            for (p, g) in pairs {
                self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g;
                self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g;
                let mh = self.m[k] / c1;
                let vh = self.v[k] / c2;
                *p -= self.lr * mh / (vh.sqrt() + self.eps);
                k += 1;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub params: MlpParams,
    /// Mean minibatch loss per epoch.
    pub loss_curve: Vec<f64>,
}

fn gather_into(src: &DMatrix<f64>, idx: &[usize], dst: &mut DMatrix<f64>) {
    shape(dst, src.nrows(), idx.len());
    for (c, &i) in idx.iter().enumerate() {
        dst.column_mut(c).copy_from(&src.column(i));
    }
}

/// Minibatch Adam on `(x, y)` (samples as columns). The last batch of an
/// epoch may be smaller.
pub fn train(arch: &MlpArchitecture, x: &DMatrix<f64>, y: &DMatrix<f64>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let params = MlpParams::init(arch, cfg.init_seed)?;
    train_from(params, x, y, cfg)
}

/// As [`train`], continuing from given parameters.
pub fn train_from(mut params: MlpParams, x: &DMatrix<f64>, y: &DMatrix<f64>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let n = x.ncols();
    if n == 0 || y.ncols() != n || x.nrows() != params.arch.input() || y.nrows() != params.arch.output() {
        return Err(dim_err(format!(
            "training data {:?} -> {:?} does not fit {:?}",
            x.shape(),
            y.shape(),
            params.arch.widths
        )));
    }
    cfg.validate(n)?;
    let mut adam = Adam::new(params.arch.n_params(), cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.shuffle_seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut ws = Workspace::default();
    let mut grad = MlpParams::zeros(&params.arch)?;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (batch, idx) in order.chunks(cfg.batch_size).enumerate() {
            gather_into(x, idx, &mut ws.xb);
            gather_into(y, idx, &mut ws.yb);
            let (xb, yb) = (std::mem::take(&mut ws.xb), std::mem::take(&mut ws.yb));
            let loss = params.loss_and_grad_into(&xb, &yb, &mut ws, &mut grad)?;
            (ws.xb, ws.yb) = (xb, yb);
            if !(loss <= DIVERGENCE_LOSS) {
                curve.push(loss);
                return Err(Error::TrainingDivergence { epoch, batch, loss, curve });
            }
            total += loss * idx.len() as f64;
            adam.step(&mut params, &grad);
        }
        curve.push(total / n as f64);
    }
    Ok(TrainOutcome { params, loss_curve: curve })
}

/// Shifts hidden biases until no pre-activation of the batch lies within
/// `KINK_MARGIN` of zero, so finite differences do not straddle a kink.
fn nudge_off_kinks(params: &mut MlpParams, x: &DMatrix<f64>) {
    for _ in 0..50 {
        let (_, pre) = params.run(x);
        let mut moved = false;
        for (l, z) in pre.iter().enumerate() {
            for r in 0..z.nrows() {
                if z.row(r).iter().any(|v| v.abs() < KINK_MARGIN) {
                    params.layers[l].b[r] += 2.5 * KINK_MARGIN;
                    moved = true;
                }
            }
            if moved {
                break; // downstream pre-activations changed
            }
        }
        if !moved {
            return;
        }
    }
}

/// Largest deviation between backpropagated and central-difference
/// gradients of the batch loss, measured as
/// `|g - fd| / max(|g|, |fd|, tolerance)`; `tolerance` is the gradient
/// magnitude below which deviations count in absolute terms. Hidden units
/// near a ReLU kink are first moved away from it (on a copy).
pub fn grad_check(params: &MlpParams, x: &DMatrix<f64>, y: &DMatrix<f64>, tolerance: f64) -> Result<f64> {
    grad_check_with(params, x, y, tolerance, |_| {})
}

/// [`grad_check`] with a hook that may alter the analytic gradient, used to
/// verify that the check detects faults.
pub fn grad_check_with(
    params: &MlpParams,
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    tolerance: f64,
    tamper: impl FnOnce(&mut MlpParams),
) -> Result<f64> {
    if !(tolerance > 0.0) {
        return Err(Error::InvalidParameter("tolerance must be positive".into()));
    }
    let mut p = params.clone();
    nudge_off_kinks(&mut p, x);
    let (_, mut grad) = p.loss_and_grad(x, y)?;
    tamper(&mut grad);
    let g = grad.to_flat();
    let n = g.len();
    let indices: Vec<usize> = if n > GRAD_CHECK_SUBSET {
        let mut all: Vec<usize> = (0..n).collect();
        all.shuffle(&mut ChaCha8Rng::seed_from_u64(0));
        all.truncate(GRAD_CHECK_SUBSET);
        all
    } else {
        (0..n).collect()
    };
    let mut worst = 0.0f64;
    for i in indices {
        let orig = *p.param_mut(i);
        *p.param_mut(i) = orig + FD_STEP;
        let lp = p.loss_and_grad(x, y)?.0;
        *p.param_mut(i) = orig - FD_STEP;
        let lm = p.loss_and_grad(x, y)?.0;
        *p.param_mut(i) = orig;
        let fd = (lp - lm) / (2.0 * FD_STEP);
        let dev = (g[i] - fd).abs() / g[i].abs().max(fd.abs()).max(tolerance);
        worst = worst.max(dev);
    }
    Ok(worst)
}
