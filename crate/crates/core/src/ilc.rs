//! Lifted-domain iterative learning control.
//!
//! All operators act on the aligned window of a [`LoopSet`]: the learned
//! feedforward `f` has `n - delay` samples and the error `e` is the window
//! `e(delay..n)`. With `w` the error of a trial without learned feedforward
//! (see [`LoopSet::free_error`]) one trial reads
//!
//! ```text
//! e_k     = w - J f_k
//! f_{k+1} = Q (L e_k + f_k)
//! ```

use nalgebra::{DMatrix, DVector, LU, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::plant::LoopSet;

/// Largest dimension for which margins use a full SVD instead of power iteration.
const DENSE_SVD_LIMIT: usize = 256;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IlcDesign {
    /// Tikhonov weight of the learning filter; `None` picks
    /// [`default_regularization`].
    #[serde(default)]
    pub lambda: Option<f64>,
    /// Cutoff of the zero-phase robustness filter; `None` gives `Q = I`.
    #[serde(default)]
    pub q_cutoff_hz: Option<f64>,
    /// Scales the learning filter; 1 unless deliberately detuned.
    #[serde(default)]
    pub learning_gain: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct IlcFilters {
    pub l: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub lambda: f64,
    pub q_cutoff_hz: Option<f64>,
}

impl IlcFilters {
    pub fn design(loops: &LoopSet, design: &IlcDesign) -> Result<Self> {
        let j = loops.ilc_j();
        let lambda = match design.lambda {
            Some(l) => l,
            None => default_regularization(j),
        };
        let mut l = design_l(j, lambda)?;
        if let Some(g) = design.learning_gain {
            l *= g;
        }
        let q = design_q(j.nrows(), design.q_cutoff_hz, loops.p.ts())?;
        Ok(Self { l, q, lambda, q_cutoff_hz: design.q_cutoff_hz })
    }

    pub fn len(&self) -> usize {
        self.q.nrows()
    }
}

/// `1e-8 * ||J||_2^2`.
pub fn default_regularization(j: &DMatrix<f64>) -> f64 {
    let s = sigma_max(j);
    1e-8 * s * s
}

/// `L = (J^T J + lambda I)^{-1} J^T`; for `lambda = 0` and square `J`
/// this is `J^{-1}`, computed without forming the normal matrix.
pub fn design_l(j: &DMatrix<f64>, lambda: f64) -> Result<DMatrix<f64>> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidParameter(format!("regularization must be >= 0, got {lambda}")));
    }
    let n = j.ncols();
    if lambda == 0.0 {
        if !j.is_square() {
            return Err(Error::SingularLearningFilter);
        }
        let scale = j.amax();
        let lower = (0..n).all(|c| (0..c).all(|r| j[(r, c)] == 0.0));
        if lower {
            if j.diagonal().iter().any(|d| d.abs() <= 1e-14 * scale) {
                return Err(Error::SingularLearningFilter);
            }
            let mut inv = DMatrix::identity(n, n);
            if !j.solve_lower_triangular_mut(&mut inv) {
                return Err(Error::SingularLearningFilter);
            }
            return Ok(inv);
        }
        let lu = j.clone().lu();
        if lu.u().diagonal().iter().any(|d| d.abs() <= 1e-14 * scale) {
            return Err(Error::SingularLearningFilter);
        }
        return lu.try_inverse().ok_or(Error::SingularLearningFilter);
    }
    let mut normal = j.tr_mul(j);
    for i in 0..n {
        normal[(i, i)] += lambda;
    }
    let chol = normal.cholesky().ok_or(Error::SingularLearningFilter)?;
    Ok(chol.solve(&j.transpose()))
}

/// Zero-phase lowpass `Q = (I + beta D^T D)^{-1}` with `D` the first
/// difference; equivalently `F^T F` for the causal factor `F`. The
/// half-power point of the interior response sits at `cutoff_hz`, and
/// constants pass unchanged.
pub fn design_q(n: usize, cutoff_hz: Option<f64>, ts: f64) -> Result<DMatrix<f64>> {
    let Some(fc) = cutoff_hz else {
        return Ok(DMatrix::identity(n, n));
    };
    if !(fc > 0.0 && fc < 0.5 / ts) {
        return Err(Error::InvalidParameter(format!("Q cutoff {fc} Hz is not in (0, Nyquist)")));
    }
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let s = (std::f64::consts::PI * fc * ts).sin();
    let beta = 1.0 / (4.0 * s * s);
    // tridiagonal A = I + beta D^T D, factor once (Thomas)
    let diag = |i: usize| {
        let k = if n == 1 { 0.0 } else if i == 0 || i == n - 1 { 1.0 } else { 2.0 };
        1.0 + beta * k
    };
    let off = -beta;
    let mut c_prime = vec![0.0; n];
    let mut denom = vec![0.0; n];
    denom[0] = diag(0);
    for i in 1..n {
        c_prime[i - 1] = off / denom[i - 1];
        denom[i] = diag(i) - off * c_prime[i - 1];
    }
    let mut q = DMatrix::zeros(n, n);
    let mut x = vec![0.0; n];
    for col in 0..n {
        let mut prev = 0.0;
        for i in 0..n {
            let rhs = if i == col { 1.0 } else { 0.0 };
            let d = if i == 0 { rhs } else { rhs - off * prev };
            x[i] = d / denom[i];
            prev = x[i];
        }
        for i in (0..n - 1).rev() {
            x[i] -= c_prime[i] * x[i + 1];
        }
        q.column_mut(col).copy_from_slice(&x);
    }
    let sym = (&q + q.transpose()) * 0.5;
    Ok(sym)
}

/// Largest singular value; full SVD for small matrices, power iteration on
/// `M^T M` otherwise.
pub fn sigma_max(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0.0;
    }
    if m.nrows().max(m.ncols()) <= DENSE_SVD_LIMIT {
        return m.singular_values().max();
    }
    let n = m.ncols();
    // deterministic start with energy in every direction
    let mut v = DVector::from_fn(n, |i, _| 1.0 + 0.5 * ((i * 7919) % 13) as f64 / 13.0);
    v.normalize_mut();
    let mut est = 0.0;
    for _ in 0..5000 {
        let w = m.tr_mul(&(m * &v));
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        let next = norm.sqrt();
        v = w / norm;
        if (next - est).abs() <= 1e-14 * next {
            est = next;
            break;
        }
        est = next;
    }
    est
}

/// `sigma_max(Q (I - J L))`, the error-propagation margin.
pub fn convergence_margin(j: &DMatrix<f64>, f: &IlcFilters) -> Result<f64> {
    check_square(j, f)?;
    let n = j.nrows();
    let m = &f.q * (DMatrix::identity(n, n) - j * &f.l);
    Ok(sigma_max(&m))
}

/// `sigma_max(Q (I - L J))`, the contraction factor of the feedforward map.
pub fn feedforward_contraction(j: &DMatrix<f64>, f: &IlcFilters) -> Result<f64> {
    check_square(j, f)?;
    let n = j.nrows();
    let m = &f.q * (DMatrix::identity(n, n) - &f.l * j);
    Ok(sigma_max(&m))
}

fn check_square(j: &DMatrix<f64>, f: &IlcFilters) -> Result<()> {
    let n = j.nrows();
    if !j.is_square() || f.l.shape() != (n, n) || f.q.shape() != (n, n) {
        return Err(dim_err(format!(
            "J is {:?}, L is {:?}, Q is {:?}",
            j.shape(),
            f.l.shape(),
            f.q.shape()
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IlcTrialState {
    pub k: usize,
    pub f: Vec<f64>,
    pub e: Vec<f64>,
    pub err_2: Vec<f64>,
    pub err_inf: Vec<f64>,
}

fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

impl IlcTrialState {
    /// Trial 0 with feedforward `f0`.
    pub fn new(free: &DVector<f64>, j: &DMatrix<f64>, f0: Vec<f64>) -> Result<Self> {
        if f0.len() != j.ncols() || free.len() != j.nrows() {
            return Err(dim_err(format!(
                "free error {} and feedforward {} do not fit J {:?}",
                free.len(),
                f0.len(),
                j.shape()
            )));
        }
        let e = free - j * DVector::from_column_slice(&f0);
        Ok(Self { k: 0, err_2: vec![e.norm()], err_inf: vec![inf_norm(&e)], e: e.as_slice().to_vec(), f: f0 })
    }
}

/// One learning update followed by the next trial.
pub fn ilc_trial(state: &IlcTrialState, free: &DVector<f64>, j: &DMatrix<f64>, filters: &IlcFilters) -> Result<IlcTrialState> {
    check_square(j, filters)?;
    if state.f.len() != j.ncols() || state.e.len() != j.nrows() || free.len() != j.nrows() {
        return Err(dim_err("trial state does not match the lifted operators"));
    }
    let e = DVector::from_column_slice(&state.e);
    let f = DVector::from_column_slice(&state.f);
    let f_next = &filters.q * (&filters.l * e + f);
    let e_next = free - j * &f_next;
    if f_next.iter().chain(e_next.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Divergence { trial: state.k + 1 });
    }
    let mut next = IlcTrialState {
        k: state.k + 1,
        f: f_next.as_slice().to_vec(),
        e: e_next.as_slice().to_vec(),
        err_2: state.err_2.clone(),
        err_inf: state.err_inf.clone(),
    };
    next.err_2.push(e_next.norm());
    next.err_inf.push(inf_norm(&e_next));
    Ok(next)
}

/// Fixed points `f_inf = (I - Q(I - LJ))^{-1} Q L w`, `e_inf = w - J f_inf`,
/// with the resolvent factored once for reuse across references.
pub struct LimitSolver {
    lu: LU<f64, Dyn, Dyn>,
    gain: DMatrix<f64>,
    j: DMatrix<f64>,
}

impl LimitSolver {
    pub fn new(j: &DMatrix<f64>, filters: &IlcFilters) -> Result<Self> {
        check_square(j, filters)?;
        let n = j.nrows();
        let gain = &filters.q * &filters.l;
        let resolvent = DMatrix::identity(n, n) - &filters.q + &gain * j;
        let lu = resolvent.lu();
        let diag = lu.u().diagonal();
        let scale = diag.amax();
        if n > 0 && (diag.iter().any(|d| d.abs() <= 1e-13 * scale) || scale == 0.0) {
            return Err(Error::NonConvergent);
        }
        Ok(Self { lu, gain, j: j.clone() })
    }

    pub fn solve(&self, free: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        if free.len() != self.j.nrows() {
            return Err(dim_err(format!("free error has {} samples, expected {}", free.len(), self.j.nrows())));
        }
        let f = self.lu.solve(&(&self.gain * free)).ok_or(Error::NonConvergent)?;
        let e = free - &self.j * &f;
        Ok((e, f))
    }
}

/// `(e_inf, f_inf)` for a single reference.
pub fn limit_policies(free: &DVector<f64>, j: &DMatrix<f64>, filters: &IlcFilters) -> Result<(DVector<f64>, DVector<f64>)> {
    LimitSolver::new(j, filters)?.solve(free)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertSettings {
    pub tol: f64,
    pub max_trials: usize,
}

impl Default for ExpertSettings {
    fn default() -> Self {
        Self { tol: 1e-8, max_trials: 100 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertRun {
    pub f_star: Vec<f64>,
    pub e_final: Vec<f64>,
    pub trials: usize,
    pub converged: bool,
    pub err_2: Vec<f64>,
    pub err_inf: Vec<f64>,
}

/// Iterates trials from zero learned feedforward until the relative update
/// falls below `tol`. Update norms growing for five trials in a row count
/// as divergence.
pub fn run_expert(free: &DVector<f64>, j: &DMatrix<f64>, filters: &IlcFilters, settings: &ExpertSettings) -> Result<ExpertRun> {
    let mut state = IlcTrialState::new(free, j, vec![0.0; j.ncols()])?;
    let mut converged = false;
    let mut last_step = f64::INFINITY;
    let mut growth = 0;
    while state.k < settings.max_trials {
        let next = ilc_trial(&state, free, j, filters)?;
        let step = next.f.iter().zip(&state.f).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let prev_norm = state.f.iter().map(|v| v * v).sum::<f64>().sqrt();
        growth = if step > last_step { growth + 1 } else { 0 };
        if growth >= 5 {
            return Err(Error::Divergence { trial: next.k });
        }
        last_step = step;
        state = next;
        if step == 0.0 || (prev_norm > 0.0 && step / prev_norm < settings.tol) {
            converged = true;
            break;
        }
    }
    Ok(ExpertRun {
        f_star: state.f,
        e_final: state.e,
        trials: state.k,
        converged,
        err_2: state.err_2,
        err_inf: state.err_inf,
    })
}
