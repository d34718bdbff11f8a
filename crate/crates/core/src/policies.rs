//! Expert and student feedforward policies and their evaluation.
//!
//! The expert is converged lifted ILC on one reference. Two students imitate
//! it across a trajectory class:
//!
//! * TAIL: `decode ∘ regress ∘ encode`, a DPCA encoder on references, an MLP
//!   between latent spaces, and a DPCA decoder onto feedforward signals;
//! * NN-ILC: an MLP evaluated sample by sample on local motion features.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dpca::{numerical_rank, singular_spectrum, DpcaOptions, DpcaProjector, SignalDataset};
use crate::error::{dim_err, Error, Result};
use crate::ilc::{convergence_margin, run_expert, ExpertRun, ExpertSettings, IlcFilters};
use crate::mlp::{train, MlpArchitecture, MlpParams, TrainConfig};
use crate::plant::{mass_feedforward, LoopSet};
use crate::setpoint::Trajectory;

/// Maps `f(i, &items[i])` over `items` on up to `jobs` threads, keeping order.
pub fn par_map<T: Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(usize, &T) -> R + Sync) -> Vec<R> {
    let jobs = jobs.clamp(1, items.len().max(1));
    if jobs == 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let chunk = items.len().div_ceil(jobs);
    let f = &f;
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .enumerate()
            .map(|(c, part)| {
                s.spawn(move || part.iter().enumerate().map(|(i, t)| f(c * chunk + i, t)).collect::<Vec<_>>())
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker thread panicked")).collect()
    })
}

fn padded(f: &[f64], n: usize) -> Vec<f64> {
    let mut v = f.to_vec();
    v.resize(n, 0.0);
    v
}

/// Feedforward the learned signal is added to.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertBase {
    /// Learn the complete feedforward signal.
    None,
    /// Learn a correction on top of `m * acc`.
    #[default]
    MassFeedforward,
}

/// Converged lifted ILC for one loop and one filter design.
#[derive(Clone, Debug)]
pub struct Expert {
    pub loops: LoopSet,
    pub filters: IlcFilters,
    pub settings: ExpertSettings,
    pub base: ExpertBase,
    pub mass: f64,
}

impl Expert {
    pub fn new(loops: LoopSet, filters: IlcFilters, settings: ExpertSettings, base: ExpertBase, mass: f64) -> Result<Self> {
        if filters.len() != loops.ilc_len() {
            return Err(dim_err(format!(
                "filters act on {} samples, loop learns {}",
                filters.len(),
                loops.ilc_len()
            )));
        }
        Ok(Self { loops, filters, settings, base, mass })
    }

    pub fn margin(&self) -> Result<f64> {
        convergence_margin(self.loops.ilc_j(), &self.filters)
    }

    /// Length of learned signals.
    pub fn learned_len(&self) -> usize {
        self.loops.ilc_len()
    }

    fn check(&self, traj: &Trajectory) -> Result<()> {
        if traj.len() != self.loops.horizon() {
            return Err(dim_err(format!(
                "trajectory has {} samples, loop horizon is {}",
                traj.len(),
                self.loops.horizon()
            )));
        }
        Ok(())
    }

    pub fn base_feedforward(&self, traj: &Trajectory) -> Vec<f64> {
        match self.base {
            ExpertBase::None => vec![0.0; traj.len()],
            ExpertBase::MassFeedforward => mass_feedforward(traj, self.mass),
        }
    }

    /// Base plus a learned signal, as applied to the loop.
    pub fn compose(&self, traj: &Trajectory, learned: &[f64]) -> Vec<f64> {
        let mut f = self.base_feedforward(traj);
        for (a, b) in f.iter_mut().zip(learned) {
            *a += b;
        }
        f
    }

    pub fn free_error(&self, traj: &Trajectory) -> Result<DVector<f64>> {
        self.check(traj)?;
        self.loops.free_error(&traj.r, Some(&self.base_feedforward(traj)))
    }

    pub fn run(&self, traj: &Trajectory) -> Result<ExpertRun> {
        let free = self.free_error(traj)?;
        run_expert(&free, self.loops.ilc_j(), &self.filters, &self.settings)
    }

    /// Full-length tracking error under the total feedforward `f`.
    pub fn tracking_error(&self, traj: &Trajectory, f: &[f64]) -> Result<DVector<f64>> {
        self.check(traj)?;
        self.loops.tracking_error(&traj.r, f)
    }
}

/// Aligned reference and expert feedforward datasets.
#[derive(Clone, Debug)]
pub struct Labels {
    pub h_r: SignalDataset,
    pub h_f: SignalDataset,
    pub runs: Vec<ExpertRun>,
}

/// Runs the expert on every trajectory; column `i` of both datasets belongs
/// to `trajs[i]`.
pub fn label_dataset(expert: &Expert, trajs: &[Trajectory], ids: &[usize], jobs: usize) -> Result<Labels> {
    if trajs.is_empty() || ids.len() != trajs.len() {
        return Err(dim_err(format!("{} trajectories with {} ids", trajs.len(), ids.len())));
    }
    let results = par_map(trajs, jobs, |_, t| expert.run(t));
    let mut failed = Vec::new();
    let mut reasons = Vec::new();
    let mut runs = Vec::with_capacity(trajs.len());
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(run) => runs.push(run),
            Err(e) => {
                failed.push(ids[i]);
                reasons.push(e.to_string());
            }
        }
    }
    if !failed.is_empty() {
        return Err(Error::ExpertFailed { ids: failed, reasons });
    }
    let h_r = DMatrix::from_fn(trajs[0].len(), trajs.len(), |r, c| trajs[c].r[r]);
    let h_f = DMatrix::from_fn(expert.learned_len(), runs.len(), |r, c| runs[c].f_star[r]);
    Ok(Labels { h_r: SignalDataset::new(h_r, ids.to_vec())?, h_f: SignalDataset::new(h_f, ids.to_vec())?, runs })
}

/// Per-row affine normalization to zero mean and unit variance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    /// Statistics over the columns of `m`; constant rows keep scale 1.
    pub fn fit(m: &DMatrix<f64>) -> Self {
        let n = m.ncols().max(1) as f64;
        let mean: Vec<f64> = m.row_iter().map(|r| r.sum() / n).collect();
        let scale = m
            .row_iter()
            .zip(&mean)
            .map(|(r, mu)| {
                let var = r.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
                let sd = var.sqrt();
                if sd > 1e-300 && sd > 1e-12 * mu.abs() {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, scale }
    }

    pub fn identity(n: usize) -> Self {
        Self { mean: vec![0.0; n], scale: vec![1.0; n] }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| (v - m) / s).collect()
    }

    pub fn invert(&self, z: &[f64]) -> Vec<f64> {
        z.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| v * s + m).collect()
    }

    pub fn apply_all(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(m.nrows(), m.ncols(), |r, c| (m[(r, c)] - self.mean[r]) / self.scale[r])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum LatentDim {
    /// Numerical rank of each dataset.
    Full,
    Fixed { n_l: usize },
    /// Smallest candidate whose reconstruction term is within `budget`.
    Auto { budget: f64, candidates: Vec<usize> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TailConfig {
    /// Decoder size, and encoder size unless `encoder_latent` is set.
    pub latent: LatentDim,
    #[serde(default)]
    pub encoder_latent: Option<LatentDim>,
    pub hidden: Vec<usize>,
    pub train: TrainConfig,
    #[serde(default)]
    pub dpca: DpcaOptions,
}

/// `decode ∘ regress ∘ encode`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudentPolicy {
    pub encoder: DpcaProjector,
    pub decoder: DpcaProjector,
    pub regressor: MlpParams,
    pub input_std: Standardizer,
    pub output_std: Standardizer,
}

impl StudentPolicy {
    pub fn new(
        encoder: DpcaProjector,
        decoder: DpcaProjector,
        regressor: MlpParams,
        input_std: Standardizer,
        output_std: Standardizer,
    ) -> Result<Self> {
        if regressor.arch.input() != encoder.n_l || regressor.arch.output() != decoder.n_l {
            return Err(dim_err(format!(
                "regressor {:?} does not connect latent sizes {} and {}",
                regressor.arch.widths, encoder.n_l, decoder.n_l
            )));
        }
        if input_std.mean.len() != encoder.n_l || output_std.mean.len() != decoder.n_l {
            return Err(dim_err("standardization sizes differ from latent sizes"));
        }
        Ok(Self { encoder, decoder, regressor, input_std, output_std })
    }

    /// Latent feedforward prediction for a latent reference.
    pub fn regress(&self, r_l: &[f64]) -> Result<Vec<f64>> {
        let z = self.regressor.forward_one(&self.input_std.apply(r_l))?;
        Ok(self.output_std.invert(z.as_slice()))
    }

    /// Feedforward for reference `r` in a single pass.
    pub fn predict(&self, r: &[f64]) -> Result<Vec<f64>> {
        let r_l = self.encoder.encode(r)?;
        let f_l = self.regress(r_l.as_slice())?;
        Ok(self.decoder.decode(&f_l)?.as_slice().to_vec())
    }

    /// Expert signal mapped through the decoder space, `T_D T_E f`.
    pub fn reconstruct(&self, f: &[f64]) -> Result<Vec<f64>> {
        let z = self.decoder.encode(f)?;
        Ok(self.decoder.decode(z.as_slice())?.as_slice().to_vec())
    }
}

#[derive(Clone, Debug)]
pub struct TailFit {
    pub policy: StudentPolicy,
    pub loss_curve: Vec<f64>,
}

fn resolve_latent(latent: &LatentDim, h: &SignalDataset, opts: DpcaOptions) -> Result<usize> {
    let rank = dataset_rank(h, opts);
    match latent {
        LatentDim::Full => Ok(rank),
        LatentDim::Fixed { n_l } => Ok(*n_l),
        LatentDim::Auto { budget, candidates } => Ok(select_latent_dim(h, candidates, *budget, opts)?.chosen),
    }
}

fn dataset_rank(h: &SignalDataset, opts: DpcaOptions) -> usize {
    if opts.center {
        let mean = h.h.column_mean();
        let mut c = h.h.clone();
        for mut col in c.column_iter_mut() {
            col -= &mean;
        }
        numerical_rank(&singular_spectrum(&c))
    } else {
        numerical_rank(&singular_spectrum(&h.h))
    }
}

/// Fits both projectors and trains the latent regressor.
pub fn build_tail_policy(h_r: &SignalDataset, h_f: &SignalDataset, cfg: &TailConfig) -> Result<TailFit> {
    if h_r.ids != h_f.ids {
        return Err(Error::Misaligned("reference and feedforward columns belong to different trajectories".into()));
    }
    let n_l_f = resolve_latent(&cfg.latent, h_f, cfg.dpca)?;
    let n_l_r = match &cfg.encoder_latent {
        Some(latent) => resolve_latent(latent, h_r, cfg.dpca)?,
        None => match cfg.latent {
            LatentDim::Fixed { n_l } => n_l,
            _ => n_l_f.min(dataset_rank(h_r, cfg.dpca)),
        },
    };
    let encoder = DpcaProjector::fit_with(h_r, n_l_r, cfg.dpca)?;
    let decoder = DpcaProjector::fit_with(h_f, n_l_f, cfg.dpca)?;
    let r_l = encoder.encode_all(&h_r.h)?;
    let f_l = decoder.encode_all(&h_f.h)?;
    let input_std = Standardizer::fit(&r_l);
    let output_std = Standardizer::fit(&f_l);
    let arch = MlpArchitecture::new(n_l_r, &cfg.hidden, n_l_f)?;
    let mut train_cfg = cfg.train.clone();
    train_cfg.batch_size = train_cfg.batch_size.min(h_r.n_t());
    let out = train(&arch, &input_std.apply_all(&r_l), &output_std.apply_all(&f_l), &train_cfg)?;
    let policy = StudentPolicy::new(encoder, decoder, out.params, input_std, output_std)?;
    Ok(TailFit { policy, loss_curve: out.loss_curve })
}

/// Per-sample inputs of the sample-wise student.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSet {
    /// Position, velocity, acceleration and jerk.
    #[default]
    PosVelAccJerk,
    /// Velocity, acceleration, jerk and snap.
    VelAccJerkSnap,
}

impl FeatureSet {
    pub const WIDTH: usize = 4;

    /// Features of sample `k`; beyond the end the profile rests at its
    /// final position.
    pub fn sample(&self, traj: &Trajectory, k: usize) -> [f64; 4] {
        if k >= traj.len() {
            let end = traj.r.last().copied().unwrap_or(0.0);
            return match self {
                FeatureSet::PosVelAccJerk => [end, 0.0, 0.0, 0.0],
                FeatureSet::VelAccJerkSnap => [0.0; 4],
            };
        }
        match self {
            FeatureSet::PosVelAccJerk => [traj.r[k], traj.vel[k], traj.acc[k], traj.jerk[k]],
            FeatureSet::VelAccJerkSnap => [traj.vel[k], traj.acc[k], traj.jerk[k], traj.snap[k]],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NnIlcConfig {
    #[serde(default)]
    pub features: FeatureSet,
    pub hidden: Vec<usize>,
    pub train: TrainConfig,
}

/// Sample-wise student: `f(k) = net(features(k + delay))`, with `delay`
/// aligning each learned sample with the reference sample it acts on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NnIlcPolicy {
    pub features: FeatureSet,
    pub delay: usize,
    pub regressor: MlpParams,
    pub input_std: Standardizer,
    pub output_std: Standardizer,
}

impl NnIlcPolicy {
    pub fn predict_sample(&self, traj: &Trajectory, k: usize) -> Result<f64> {
        let x = self.input_std.apply(&self.features.sample(traj, k + self.delay));
        let y = self.regressor.forward_one(&x)?;
        Ok(y[0] * self.output_std.scale[0] + self.output_std.mean[0])
    }

    /// The first `len` learned samples, one network evaluation each.
    pub fn predict(&self, traj: &Trajectory, len: usize) -> Result<Vec<f64>> {
        (0..len).map(|k| self.predict_sample(traj, k)).collect()
    }
}

#[derive(Clone, Debug)]
pub struct NnIlcFit {
    pub policy: NnIlcPolicy,
    pub loss_curve: Vec<f64>,
}

/// Trains the sample-wise student on all samples of all trajectories.
pub fn nn_ilc_build(trajs: &[Trajectory], h_f: &SignalDataset, delay: usize, cfg: &NnIlcConfig) -> Result<NnIlcFit> {
    if trajs.len() != h_f.n_t() {
        return Err(Error::Misaligned(format!("{} trajectories for {} label columns", trajs.len(), h_f.n_t())));
    }
    let len = h_f.n_d();
    let total = len * trajs.len();
    let mut x = DMatrix::zeros(FeatureSet::WIDTH, total);
    let mut y = DMatrix::zeros(1, total);
    for (c, t) in trajs.iter().enumerate() {
        for k in 0..len {
            let col = c * len + k;
            x.column_mut(col).copy_from_slice(&cfg.features.sample(t, k + delay));
            y[(0, col)] = h_f.h[(k, c)];
        }
    }
    let input_std = Standardizer::fit(&x);
    let output_std = Standardizer::fit(&y);
    let arch = MlpArchitecture::new(FeatureSet::WIDTH, &cfg.hidden, 1)?;
    let mut train_cfg = cfg.train.clone();
    train_cfg.batch_size = train_cfg.batch_size.min(total);
    let out = train(&arch, &input_std.apply_all(&x), &output_std.apply_all(&y), &train_cfg)?;
    let policy = NnIlcPolicy { features: cfg.features, delay, regressor: out.params, input_std, output_std };
    Ok(NnIlcFit { policy, loss_curve: out.loss_curve })
}

fn check_aligned(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<()> {
    if a.is_empty() || a.len() != b.len() {
        return Err(Error::Misaligned(format!("{} vs {} signals", a.len(), b.len())));
    }
    if let Some(i) = (0..a.len()).find(|&i| a[i].len() != b[i].len()) {
        return Err(Error::Misaligned(format!("signal {i} has lengths {} and {}", a[i].len(), b[i].len())));
    }
    Ok(())
}

/// Mean 2-norm distance between corresponding signals.
pub fn eta(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    check_aligned(a, b)?;
    let total: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt())
        .sum();
    Ok(total / a.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EtaTerms {
    /// Distance between expert and student.
    pub direct: f64,
    /// Expert versus its own decoder-space reconstruction.
    pub term_nl: f64,
    /// Reconstruction versus student.
    pub term_mu: f64,
}

/// Splits the expert-student distance through the decoder space; by the
/// triangle inequality `direct <= term_nl + term_mu`.
pub fn eta_decomposed(f_star: &[Vec<f64>], f_recon: &[Vec<f64>], f_pred: &[Vec<f64>]) -> Result<EtaTerms> {
    Ok(EtaTerms { direct: eta(f_star, f_pred)?, term_nl: eta(f_star, f_recon)?, term_mu: eta(f_recon, f_pred)? })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentSweep {
    pub chosen: usize,
    /// `(n_l, reconstruction term)` for every candidate, ascending `n_l`.
    pub curve: Vec<(usize, f64)>,
}

/// Smallest candidate whose mean reconstruction error is within `budget`,
/// or the best candidate when none is.
pub fn select_latent_dim(h: &SignalDataset, candidates: &[usize], budget: f64, opts: DpcaOptions) -> Result<LatentSweep> {
    if candidates.is_empty() {
        return Err(Error::InvalidParameter("no latent dimension candidates".into()));
    }
    let rank = dataset_rank(h, opts);
    let mut cands = candidates.to_vec();
    cands.sort_unstable();
    cands.dedup();
    if cands[0] == 0 || *cands.last().expect("nonempty") > rank {
        return Err(Error::InvalidParameter(format!("latent candidates must lie in 1..={rank}, got {candidates:?}")));
    }
    let mut curve = Vec::with_capacity(cands.len());
    for &n_l in &cands {
        let p = DpcaProjector::fit_with(h, n_l, opts)?;
        let errs = p.reconstruction_error(&h.h)?;
        curve.push((n_l, errs.iter().sum::<f64>() / errs.len() as f64));
    }
    let chosen = curve
        .iter()
        .find(|(_, e)| *e <= budget)
        .or_else(|| curve.iter().min_by(|a, b| a.1.total_cmp(&b.1)))
        .map(|(n, _)| *n)
        .expect("nonempty");
    Ok(LatentSweep { chosen, curve })
}

/// Feedforward configurations compared in an evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Zero,
    MassFf,
    /// Base feedforward plus the converged expert signal.
    Expert,
    Tail,
    NnIlc,
    TailMassFf,
    NnIlcMassFf,
}

impl Source {
    pub const ALL: [Source; 7] = [
        Source::Zero,
        Source::MassFf,
        Source::Expert,
        Source::Tail,
        Source::NnIlc,
        Source::TailMassFf,
        Source::NnIlcMassFf,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Source::Zero => "zero",
            Source::MassFf => "mass_ff",
            Source::Expert => "expert",
            Source::Tail => "tail",
            Source::NnIlc => "nn_ilc",
            Source::TailMassFf => "tail_mass_ff",
            Source::NnIlcMassFf => "nn_ilc_mass_ff",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|x| x.name() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

pub struct EvalMember<'a> {
    pub id: usize,
    pub split: Split,
    pub traj: &'a Trajectory,
    /// Converged expert signal if already known; recomputed otherwise.
    pub f_star: Option<&'a [f64]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalCell {
    pub id: usize,
    pub split: Split,
    pub source: Source,
    /// Peak and RMS tracking error over the constant-velocity window.
    pub peak: Option<f64>,
    pub rms: Option<f64>,
    pub error: Option<String>,
}

/// Tracking error inside the constant-velocity window, for plotting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalTrace {
    pub id: usize,
    pub source: Source,
    pub window_start: usize,
    pub error: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StudentErrors {
    /// Mean distance to the expert over training / test members.
    pub e_train: Option<f64>,
    pub e_test: Option<f64>,
    /// Decoder-space decomposition (TAIL only).
    pub terms_train: Option<EtaTerms>,
    pub terms_test: Option<EtaTerms>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PolicyEvalReport {
    pub cells: Vec<EvalCell>,
    pub tail: Option<StudentErrors>,
    pub nn_ilc: Option<StudentErrors>,
    #[serde(skip)]
    pub traces: Vec<EvalTrace>,
}

impl PolicyEvalReport {
    pub fn cell(&self, id: usize, source: Source) -> Option<&EvalCell> {
        self.cells.iter().find(|c| c.id == id && c.source == source)
    }

    /// Mean window peak of `source` over members of `split`.
    pub fn mean_peak(&self, source: Source, split: Split) -> Option<f64> {
        let v: Vec<f64> = self.cells.iter().filter(|c| c.source == source && c.split == split).filter_map(|c| c.peak).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Wall-clock prediction times in seconds (medians of five runs).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PredictTimings {
    pub tail_full: Option<f64>,
    pub tail_per_sample: Option<f64>,
    pub nn_ilc_full: Option<f64>,
    pub nn_ilc_per_sample: Option<f64>,
}

/// Median wall-clock seconds of `runs` calls.
pub fn median_time(runs: usize, mut f: impl FnMut()) -> f64 {
    let mut t: Vec<f64> = (0..runs.max(1))
        .map(|_| {
            let start = Instant::now();
            f();
            start.elapsed().as_secs_f64()
        })
        .collect();
    t.sort_by(f64::total_cmp);
    t[t.len() / 2]
}

pub struct Evaluation<'a> {
    pub expert: &'a Expert,
    pub tail: Option<&'a StudentPolicy>,
    pub nn_ilc: Option<&'a NnIlcPolicy>,
    pub sources: Vec<Source>,
    pub jobs: usize,
    pub keep_traces: bool,
}

struct MemberResult {
    f_star: Option<Vec<f64>>,
    tail: Option<Result<Vec<f64>>>,
    nn: Option<Result<Vec<f64>>>,
    cells: Vec<EvalCell>,
    traces: Vec<EvalTrace>,
}

impl Evaluation<'_> {
    fn needs(&self, s: Source) -> bool {
        self.sources.contains(&s)
    }

    fn member(&self, m: &EvalMember) -> MemberResult {
        let ex = self.expert;
        let n_learn = ex.learned_len();
        let f_star = match m.f_star {
            Some(f) => Some(Ok(f.to_vec())),
            None => (self.needs(Source::Expert) || self.tail.is_some() || self.nn_ilc.is_some())
                .then(|| ex.run(m.traj).map(|r| r.f_star)),
        };
        let tail = self.tail.map(|p| p.predict(&m.traj.r));
        let nn = self.nn_ilc.map(|p| p.predict(m.traj, n_learn));
        let mass = mass_feedforward(m.traj, ex.mass);
        let window = m.traj.cruise_window();
        let mut cells = Vec::new();
        let mut traces = Vec::new();
        for &source in &self.sources {
            let total: Result<Vec<f64>> = match source {
                Source::Zero => Ok(vec![0.0; m.traj.len()]),
                Source::MassFf => Ok(mass.clone()),
                Source::Expert => match &f_star {
                    Some(Ok(f)) => Ok(ex.compose(m.traj, f)),
                    Some(Err(e)) => Err(Error::InvalidParameter(format!("expert: {e}"))),
                    None => Err(Error::InvalidParameter("expert not evaluated".into())),
                },
                Source::Tail | Source::TailMassFf => match &tail {
                    Some(Ok(f)) if source == Source::Tail => Ok(padded(f, m.traj.len())),
                    Some(Ok(f)) => Ok(mass.iter().zip(padded(f, m.traj.len())).map(|(a, b)| a + b).collect()),
                    Some(Err(e)) => Err(Error::InvalidParameter(format!("tail: {e}"))),
                    None => Err(Error::InvalidParameter("no TAIL policy".into())),
                },
                Source::NnIlc | Source::NnIlcMassFf => match &nn {
                    Some(Ok(f)) if source == Source::NnIlc => Ok(padded(f, m.traj.len())),
                    Some(Ok(f)) => Ok(mass.iter().zip(padded(f, m.traj.len())).map(|(a, b)| a + b).collect()),
                    Some(Err(e)) => Err(Error::InvalidParameter(format!("nn-ilc: {e}"))),
                    None => Err(Error::InvalidParameter("no NN-ILC policy".into())),
                },
            };
            let cell = total.and_then(|f| ex.tracking_error(m.traj, &f));
            match cell {
                Ok(e) => {
                    let w: Vec<f64> = e.as_slice()[window.clone()].to_vec();
                    let peak = w.iter().fold(0.0f64, |a, v| a.max(v.abs()));
                    let rms = if w.is_empty() { 0.0 } else { (w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64).sqrt() };
                    cells.push(EvalCell { id: m.id, split: m.split, source, peak: Some(peak), rms: Some(rms), error: None });
                    if self.keep_traces {
                        traces.push(EvalTrace { id: m.id, source, window_start: window.start, error: w });
                    }
                }
                Err(e) => cells.push(EvalCell {
                    id: m.id,
                    split: m.split,
                    source,
                    peak: None,
                    rms: None,
                    error: Some(e.to_string()),
                }),
            }
        }
        MemberResult { f_star: f_star.and_then(|r| r.ok()), tail, nn, cells, traces }
    }

    /// Simulates every member under every requested source and compares the
    /// students with the expert.
    pub fn run(&self, members: &[EvalMember]) -> (PolicyEvalReport, PredictTimings) {
        let results = par_map(members, self.jobs, |_, m| self.member(m));
        let mut report = PolicyEvalReport::default();
        for r in &results {
            report.cells.extend(r.cells.iter().cloned());
            report.traces.extend(r.traces.iter().cloned());
        }
        let collect = |split: Split, pick: &dyn Fn(&MemberResult) -> Option<&Result<Vec<f64>>>| {
            let mut star = Vec::new();
            let mut pred = Vec::new();
            for (m, r) in members.iter().zip(&results) {
                if m.split != split {
                    continue;
                }
                if let (Some(fs), Some(Ok(p))) = (&r.f_star, pick(r)) {
                    star.push(fs.clone());
                    pred.push(p.clone());
                }
            }
            (star, pred)
        };
        if let Some(policy) = self.tail {
            let mut errs = StudentErrors::default();
            for split in [Split::Train, Split::Test] {
                let (star, pred) = collect(split, &|r: &MemberResult| r.tail.as_ref());
                if star.is_empty() {
                    continue;
                }
                let recon: Vec<Vec<f64>> = star.iter().filter_map(|f| policy.reconstruct(f).ok()).collect();
                let terms = eta_decomposed(&star, &recon, &pred).ok();
                let e = terms.map(|t| t.direct);
                match split {
                    Split::Train => (errs.e_train, errs.terms_train) = (e, terms),
                    Split::Test => (errs.e_test, errs.terms_test) = (e, terms),
                }
            }
            report.tail = Some(errs);
        }
        if self.nn_ilc.is_some() {
            let mut errs = StudentErrors::default();
            for split in [Split::Train, Split::Test] {
                let (star, pred) = collect(split, &|r: &MemberResult| r.nn.as_ref());
                let e = eta(&star, &pred).ok();
                match split {
                    Split::Train => errs.e_train = e,
                    Split::Test => errs.e_test = e,
                }
            }
            report.nn_ilc = Some(errs);
        }

        let mut timings = PredictTimings::default();
        let probe = members.iter().find(|m| m.split == Split::Test).or(members.first());
        if let Some(m) = probe {
            if let Some(p) = self.tail {
                let full = median_time(5, || {
                    std::hint::black_box(p.predict(&m.traj.r).ok());
                });
                timings.tail_full = Some(full);
                timings.tail_per_sample = Some(full / self.expert.learned_len() as f64);
            }
            if let Some(p) = self.nn_ilc {
                let n = self.expert.learned_len();
                timings.nn_ilc_full = Some(median_time(5, || {
                    std::hint::black_box(p.predict(m.traj, n).ok());
                }));
                timings.nn_ilc_per_sample = Some(median_time(5, || {
                    std::hint::black_box(p.predict_sample(m.traj, n / 2).ok());
                }));
            }
        }
        (report, timings)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ilc::{design_q, IlcDesign};
    use crate::plant::{build_controller, build_plant, ControllerConfig, ParasiticMode, PlantConfig};
    use crate::setpoint::{build_class, split_class, MotionProfileParams, ParameterGrid, TestSelector};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn plant(flexible: bool) -> PlantConfig {
        PlantConfig {
            mass: 2.0,
            modes: if flexible { vec![ParasiticMode { freq_hz: 60.0, damping: 0.03, gain: 0.25 }] } else { vec![] },
            ts: 1e-3,
        }
    }

    fn small_grid() -> ParameterGrid {
        ParameterGrid {
            displacement: vec![0.02, 0.04, 0.06],
            v_max: vec![0.1, 0.15],
            a_max: vec![2.0, 3.0],
            j_max: vec![100.0],
            s_max: vec![5000.0],
        }
    }

    fn expert_for(cfg: &PlantConfig, n: usize, design: IlcDesign, base: ExpertBase) -> Expert {
        let p = build_plant(cfg).unwrap();
        let k = build_controller(cfg, &ControllerConfig::default()).unwrap();
        let loops = LoopSet::new(p, k, n).unwrap();
        let filters = IlcFilters::design(&loops, &design).unwrap();
        Expert::new(loops, filters, ExpertSettings::default(), base, cfg.mass).unwrap()
    }

    fn quick_train(epochs: usize, batch: usize) -> TrainConfig {
        TrainConfig { learning_rate: 1e-2, epochs, batch_size: batch, init_seed: 3, shuffle_seed: 4, ..Default::default() }
    }

    #[test]
    fn par_map_keeps_order() {
        let items: Vec<usize> = (0..37).collect();
        for jobs in [1, 2, 5, 64] {
            assert_eq!(par_map(&items, jobs, |i, v| i * 100 + v), items.iter().map(|v| v * 101).collect::<Vec<_>>());
        }
        assert!(par_map(&[] as &[usize], 4, |_, v| *v).is_empty());
    }

    #[test]
    fn labels_are_aligned_and_reproducible() {
        let class = build_class(&small_grid(), 1e-3).unwrap();
        let cfg = plant(true);
        let ex = expert_for(&cfg, class.samples(), IlcDesign { q_cutoff_hz: Some(100.0), ..Default::default() }, ExpertBase::MassFeedforward);
        let labels = label_dataset(&ex, &class.members, &class.tuple_ids, 3).unwrap();
        assert_eq!(labels.h_r.n_t(), class.len());
        assert_eq!(labels.h_f.n_t(), class.len());
        assert_eq!(labels.h_f.n_d(), class.samples() - ex.loops.delay());
        for c in 0..class.len() {
            assert_eq!(labels.h_r.h.column(c).as_slice(), class.members[c].r.as_slice());
        }
        let col = 7;
        let again = ex.run(&class.members[col]).unwrap();
        assert_eq!(labels.h_f.h.column(col).as_slice(), again.f_star.as_slice());

        let one = label_dataset(&ex, &class.members[..1], &[0], 1).unwrap();
        assert_eq!(one.h_f.n_t(), 1);
    }

    #[test]
    fn zero_reference_gives_zero_label() {
        let mut t = crate::setpoint::generate_fourth_order(MotionProfileParams::new(0.0, 1.0, 1.0, 1.0, 1.0), 1e-3).unwrap();
        t.pad_to(200);
        let ex = expert_for(&plant(true), 200, IlcDesign::default(), ExpertBase::MassFeedforward);
        let labels = label_dataset(&ex, &[t], &[0], 1).unwrap();
        assert!(labels.h_f.h.amax() < 1e-9);
    }

    #[test]
    fn expert_failures_name_trajectories() {
        let class = build_class(&small_grid(), 1e-3).unwrap();
        let cfg = plant(true);
        let mut ex = expert_for(&cfg, class.samples(), IlcDesign::default(), ExpertBase::MassFeedforward);
        let n = ex.learned_len();
        ex.filters.l = DMatrix::identity(n, n) * 1e9; // wildly unstable
        match label_dataset(&ex, &class.members[..3], &[10, 11, 12], 2) {
            Err(Error::ExpertFailed { ids, .. }) => assert_eq!(ids, vec![10, 11, 12]),
            other => panic!("expected failure, got {:?}", other.map(|l| l.runs.len())),
        }
    }

    fn toy_datasets(rng: &mut ChaCha8Rng, n_d: usize, n_t: usize) -> (SignalDataset, SignalDataset) {
        let h_r = DMatrix::from_fn(n_d, n_t, |_, _| rng.random_range(-1.0..1.0));
        let mix = DMatrix::from_fn(n_d, n_d, |_, _| rng.random_range(-0.2..0.2));
        let h_f = &mix * &h_r;
        let ids: Vec<usize> = (0..n_t).collect();
        (SignalDataset::new(h_r, ids.clone()).unwrap(), SignalDataset::new(h_f, ids).unwrap())
    }

    #[test]
    fn untrained_regressor_outputs_decoded_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (h_r, h_f) = toy_datasets(&mut rng, 30, 6);
        let cfg = TailConfig { latent: LatentDim::Fixed { n_l: 4 }, encoder_latent: None, hidden: vec![8], train: quick_train(1, 6), dpca: DpcaOptions::default() };
        let mut fit = build_tail_policy(&h_r, &h_f, &cfg).unwrap();
        fit.policy.regressor = MlpParams::zeros(&fit.policy.regressor.arch).unwrap();
        let r: Vec<f64> = (0..30).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f = fit.policy.predict(&r).unwrap();
        let expect = fit.policy.decoder.decode(&fit.policy.output_std.mean).unwrap();
        assert_eq!(f, expect.as_slice());
        assert!(f.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn prediction_is_manual_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (h_r, h_f) = toy_datasets(&mut rng, 25, 8);
        let cfg = TailConfig { latent: LatentDim::Full, encoder_latent: None, hidden: vec![10, 10], train: quick_train(50, 4), dpca: DpcaOptions::default() };
        let p = build_tail_policy(&h_r, &h_f, &cfg).unwrap().policy;
        let r: Vec<f64> = h_r.h.column(3).iter().copied().collect();
        let z = p.encoder.encode(&r).unwrap();
        let y = p.regressor.forward_one(&p.input_std.apply(z.as_slice())).unwrap();
        let manual = p.decoder.decode(&p.output_std.invert(y.as_slice())).unwrap();
        assert_eq!(p.predict(&r).unwrap(), manual.as_slice());
        assert_eq!(p.predict(&r).unwrap(), p.predict(&r).unwrap());
    }

    #[test]
    fn overfit_leaves_only_reconstruction_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (h_r, h_f) = toy_datasets(&mut rng, 40, 3);
        let cfg = TailConfig {
            latent: LatentDim::Fixed { n_l: 3 },
            encoder_latent: None,
            hidden: vec![16, 16],
            train: TrainConfig { learning_rate: 3e-3, epochs: 6000, batch_size: 3, ..Default::default() },
            dpca: DpcaOptions::default(),
        };
        let fit = build_tail_policy(&h_r, &h_f, &cfg).unwrap();
        assert!(*fit.loss_curve.last().unwrap() < 1e-10, "{:e}", fit.loss_curve.last().unwrap());
        for c in 0..3 {
            let r: Vec<f64> = h_r.h.column(c).iter().copied().collect();
            let f: Vec<f64> = h_f.h.column(c).iter().copied().collect();
            let pred = fit.policy.predict(&r).unwrap();
            let recon = fit.policy.reconstruct(&f).unwrap();
            let scale = f.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(pred.iter().zip(&recon).all(|(a, b)| (a - b).abs() < 1e-6 * scale.max(1.0)));
        }
    }

    #[test]
    fn column_order_does_not_matter_for_projectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (h_r, h_f) = toy_datasets(&mut rng, 30, 5);
        let perm = [2, 0, 4, 1, 3];
        let swap = |d: &SignalDataset| {
            let h = DMatrix::from_fn(d.n_d(), d.n_t(), |r, c| d.h[(r, perm[c])]);
            SignalDataset::new(h, perm.iter().map(|&i| d.ids[i]).collect()).unwrap()
        };
        let a = DpcaProjector::fit(&h_r, 4).unwrap();
        let b = DpcaProjector::fit(&swap(&h_r), 4).unwrap();
        assert!((a.t_d - b.t_d).amax() < 1e-10);
        let a = DpcaProjector::fit(&h_f, 4).unwrap();
        let b = DpcaProjector::fit(&swap(&h_f), 4).unwrap();
        assert!((a.t_d - b.t_d).amax() < 1e-10);
    }

    #[test]
    fn eta_examples() {
        let a = vec![vec![1.0, 2.0], vec![3.0, 4.0]];
        assert_eq!(eta(&a, &a).unwrap(), 0.0);
        assert_eq!(eta(&[vec![0.0, 0.0, 0.0]], &[vec![0.0, 1.0, 0.0]]).unwrap(), 1.0);
        assert!(eta(&a, &a[..1]).is_err());
        assert!(eta(&a, &[vec![1.0], vec![1.0, 2.0]]).is_err());
        assert!(eta(&[], &[]).is_err());
    }

    #[test]
    fn latent_selection_examples() {
        let a = DVector::from_fn(20, |i, _| (i as f64 * 0.4).sin());
        let b = DVector::from_fn(20, |i, _| (i as f64 * 0.9).cos());
        let h = DMatrix::from_columns(&[&a * 3.0, &a + &b * 0.1, &a * -1.0 + &b * 0.05]);
        let d = SignalDataset::new(h, vec![0, 1, 2]).unwrap();
        let full = select_latent_dim(&d, &[1, 2], 0.0, DpcaOptions::default()).unwrap();
        assert_eq!(full.chosen, 2);
        let tail = full.curve[0].1;
        let relaxed = select_latent_dim(&d, &[2, 1], tail * 1.01, DpcaOptions::default()).unwrap();
        assert_eq!(relaxed.chosen, 1);
        assert!(relaxed.curve.windows(2).all(|w| w[1].1 <= w[0].1 + 1e-15));
        assert!(select_latent_dim(&d, &[], 1.0, DpcaOptions::default()).is_err());
        assert!(select_latent_dim(&d, &[3], 1.0, DpcaOptions::default()).is_err());
    }

    #[test]
    fn nn_ilc_learns_mass_feedforward_on_rigid_plant() {
        let cfg = plant(false);
        let class = build_class(&small_grid(), 1e-3).unwrap();
        let (train_c, test_c) = split_class(&class, &TestSelector::EveryNth(4)).unwrap();
        let ex = expert_for(&cfg, class.samples(), IlcDesign::default(), ExpertBase::None);
        let labels = label_dataset(&ex, &train_c.members, &train_c.tuple_ids, 4).unwrap();
        let nn_cfg = NnIlcConfig { features: FeatureSet::PosVelAccJerk, hidden: vec![6, 6, 6], train: quick_train(15, 128) };
        let fit = nn_ilc_build(&train_c.members, &labels.h_f, ex.loops.delay(), &nn_cfg).unwrap();
        let t = &test_c.members[0];
        let pred = fit.policy.predict(t, ex.learned_len()).unwrap();
        assert_eq!(pred.len(), ex.learned_len());
        let mass = mass_feedforward(t, cfg.mass);
        let corr = {
            let n = pred.len();
            let (ma, mb) = (pred.iter().sum::<f64>() / n as f64, mass[..n].iter().sum::<f64>() / n as f64);
            let cov: f64 = pred.iter().zip(&mass).map(|(a, b)| (a - ma) * (b - mb)).sum();
            let va: f64 = pred.iter().map(|a| (a - ma) * (a - ma)).sum();
            let vb: f64 = mass[..n].iter().map(|b| (b - mb) * (b - mb)).sum();
            cov / (va * vb).sqrt()
        };
        assert!(corr > 0.99, "{corr}");
        // resting samples share one feature vector, hence one output
        let end = pred.len() - 1;
        assert_eq!(pred[end], pred[end - 1]);
    }

    #[test]
    fn evaluation_rows() {
        let cfg = plant(true);
        let class = build_class(&small_grid(), 1e-3).unwrap();
        let (train_c, test_c) = split_class(&class, &TestSelector::EveryNth(4)).unwrap();
        let ex = expert_for(&cfg, class.samples(), IlcDesign { q_cutoff_hz: Some(150.0), ..Default::default() }, ExpertBase::MassFeedforward);
        let labels = label_dataset(&ex, &train_c.members, &train_c.tuple_ids, 4).unwrap();
        let tail_cfg = TailConfig { latent: LatentDim::Full, encoder_latent: None, hidden: vec![16, 16], train: quick_train(300, 8), dpca: DpcaOptions::default() };
        let tail = build_tail_policy(&labels.h_r, &labels.h_f, &tail_cfg).unwrap().policy;
        let stars: Vec<Vec<f64>> = labels.runs.iter().map(|r| r.f_star.clone()).collect();
        let mut members: Vec<EvalMember> = train_c
            .members
            .iter()
            .zip(&train_c.tuple_ids)
            .zip(&stars)
            .map(|((t, &id), f)| EvalMember { id, split: Split::Train, traj: t, f_star: Some(f) })
            .collect();
        members.extend(test_c.members.iter().zip(&test_c.tuple_ids).map(|(t, &id)| EvalMember { id, split: Split::Test, traj: t, f_star: None }));
        let eval = Evaluation { expert: &ex, tail: Some(&tail), nn_ilc: None, sources: Source::ALL.to_vec(), jobs: 2, keep_traces: true };
        let (report, timings) = eval.run(&members);
        assert_eq!(report.cells.len(), members.len() * Source::ALL.len());
        // NN-ILC cells fail individually without stopping the rest
        assert!(report.cells.iter().filter(|c| matches!(c.source, Source::NnIlc | Source::NnIlcMassFf)).all(|c| c.error.is_some()));
        for m in &members {
            let w = m.traj.cruise_window();
            let sr = &ex.loops.s_lift * DVector::from_column_slice(&m.traj.r);
            let expect = sr.as_slice()[w].iter().fold(0.0f64, |a, v| a.max(v.abs()));
            assert!((report.cell(m.id, Source::Zero).unwrap().peak.unwrap() - expect).abs() <= 1e-15 * expect);
            if m.split == Split::Train {
                let best = report.cell(m.id, Source::Expert).unwrap().peak.unwrap();
                for s in [Source::Zero, Source::MassFf, Source::TailMassFf] {
                    assert!(best <= report.cell(m.id, s).unwrap().peak.unwrap(), "{s:?}");
                }
            }
        }
        let terms = report.tail.as_ref().unwrap().terms_train.unwrap();
        assert!(terms.direct <= terms.term_nl + terms.term_mu + 1e-9);
        assert!(terms.term_nl >= 0.0 && terms.term_mu >= 0.0);
        assert!(timings.tail_full.is_some() && timings.nn_ilc_full.is_none());
        assert_eq!(report.traces.len(), report.cells.iter().filter(|c| c.error.is_none()).count());

        let only = Evaluation { expert: &ex, tail: None, nn_ilc: None, sources: vec![Source::MassFf], jobs: 1, keep_traces: false };
        let (r2, _) = only.run(&members);
        assert!(r2.cells.iter().all(|c| c.source == Source::MassFf && c.error.is_none()));
        assert_eq!(r2.cells, report.cells.iter().filter(|c| c.source == Source::MassFf).cloned().collect::<Vec<_>>());
    }

    #[test]
    fn q_filter_dc_gain_holds_on_class_horizon() {
        let class = build_class(&small_grid(), 1e-3).unwrap();
        let q = design_q(class.samples() - 1, Some(100.0), 1e-3).unwrap();
        assert!((q * DVector::from_element(class.samples() - 1, 1.0)).iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn eta_triangle(seed in any::<u64>(), n_t in 1usize..6, n in 1usize..30) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut set = || (0..n_t).map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>()).collect::<Vec<_>>();
            let (a, b, c) = (set(), set(), set());
            prop_assert!(eta(&a, &c).unwrap() <= eta(&a, &b).unwrap() + eta(&b, &c).unwrap() + 1e-12);
            let t = eta_decomposed(&a, &b, &c).unwrap();
            prop_assert!(t.direct <= t.term_nl + t.term_mu + 1e-12);
        }
    }
}
