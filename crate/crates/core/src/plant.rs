//! Surrogate single-axis precision stage, its feedback controller, classical
//! mass feedforward, and finite-horizon (lifted) closed-loop operators.
//!
//! The plant is a rigid mass plus a few lightly damped parasitic modes,
//!
//! ```text
//! P(s) = 1 / (m s^2) + sum_i g_i / (s^2 + 2 zeta_i w_i s + w_i^2)
//! ```
//!
//! discretized with an exact zero-order hold.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::lti::{feedback_loop, process_sensitivity, sensitivity, DiscreteStateSpace};
use crate::setpoint::Trajectory;

/// Largest horizon for which dense lifted matrices are built.
pub const DEFAULT_MAX_HORIZON: usize = 5000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParasiticMode {
    pub freq_hz: f64,
    pub damping: f64,
    /// Numerator `g` of the modal term, in 1/kg.
    pub gain: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantConfig {
    /// Moving mass, kg.
    pub mass: f64,
    #[serde(default)]
    pub modes: Vec<ParasiticMode>,
    pub ts: f64,
}

impl PlantConfig {
    pub fn rigid(mass: f64, ts: f64) -> Self {
        Self { mass, modes: Vec::new(), ts }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mass > 0.0 && self.mass.is_finite()) {
            return Err(Error::InvalidParameter(format!("mass must be positive, got {}", self.mass)));
        }
        if !(self.ts > 0.0 && self.ts.is_finite()) {
            return Err(Error::InvalidParameter(format!("sample time must be positive, got {}", self.ts)));
        }
        let nyquist = 0.5 / self.ts;
        for (i, m) in self.modes.iter().enumerate() {
            if !(m.freq_hz > 0.0 && m.freq_hz < nyquist) {
                return Err(Error::InvalidParameter(format!(
                    "mode {i} at {} Hz is not below the Nyquist frequency {nyquist} Hz",
                    m.freq_hz
                )));
            }
            if !(m.damping > 0.0 && m.damping < 1.0) {
                return Err(Error::InvalidParameter(format!(
                    "mode {i} damping {} is outside (0, 1)",
                    m.damping
                )));
            }
            if !m.gain.is_finite() {
                return Err(Error::InvalidParameter(format!("mode {i} gain is not finite")));
            }
        }
        Ok(())
    }

    fn first_mode_hz(&self) -> Option<f64> {
        self.modes.iter().map(|m| m.freq_hz).reduce(f64::min)
    }
}

/// Continuous-time `(A, B, C)` of the surrogate plant.
fn continuous_plant(cfg: &PlantConfig) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let n = 2 + 2 * cfg.modes.len();
    let mut a = DMatrix::zeros(n, n);
    let mut b = DMatrix::zeros(n, 1);
    let mut c = DMatrix::zeros(1, n);
    a[(0, 1)] = 1.0;
    b[(1, 0)] = 1.0 / cfg.mass;
    c[(0, 0)] = 1.0;
    for (i, m) in cfg.modes.iter().enumerate() {
        let w = 2.0 * std::f64::consts::PI * m.freq_hz;
        let o = 2 + 2 * i;
        a[(o, o + 1)] = 1.0;
        a[(o + 1, o)] = -w * w;
        a[(o + 1, o + 1)] = -2.0 * m.damping * w;
        b[(o + 1, 0)] = m.gain;
        c[(0, o)] = 1.0;
    }
    (a, b, c)
}

/// Exact zero-order-hold discretization via the augmented matrix exponential.
pub fn zoh(a: &DMatrix<f64>, b: &DMatrix<f64>, ts: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let (n, m) = (a.nrows(), b.ncols());
    let mut aug = DMatrix::zeros(n + m, n + m);
    aug.view_mut((0, 0), (n, n)).copy_from(&(a * ts));
    aug.view_mut((0, n), (n, m)).copy_from(&(b * ts));
    let e = aug.exp();
    (e.view((0, 0), (n, n)).into_owned(), e.view((0, n), (n, m)).into_owned())
}

/// Bilinear (Tustin) discretization.
pub fn tustin(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    c: &DMatrix<f64>,
    d: &DMatrix<f64>,
    ts: f64,
) -> Result<DiscreteStateSpace> {
    let n = a.nrows();
    let half = ts / 2.0;
    let inv = (DMatrix::identity(n, n) - a * half)
        .try_inverse()
        .ok_or_else(|| Error::InvalidParameter("Tustin map is singular".into()))?;
    let ad = &inv * (DMatrix::identity(n, n) + a * half);
    let bd = &inv * b * ts;
    let cd = c * &inv;
    let dd = d + c * &inv * b * half;
    DiscreteStateSpace::new(ad, bd, cd, dd, ts)
}

pub fn build_plant(cfg: &PlantConfig) -> Result<DiscreteStateSpace> {
    cfg.validate()?;
    let (a, b, c) = continuous_plant(cfg);
    let (ad, bd) = zoh(&a, &b, cfg.ts);
    DiscreteStateSpace::new(ad, bd, c, DMatrix::zeros(1, 1), cfg.ts)
}

/// PID with lead and a first-order roll-off, tuned on the rigid-body model:
///
/// ```text
/// K(s) = kp (1 + w_i/s) (1 + s/w_z) / (1 + s/w_p) / (1 + s/w_l)
/// ```
///
/// with `w_z = w_c / lead_ratio`, `w_p = w_c * lead_ratio`,
/// `w_i = w_c * integral_ratio`, `w_l = w_c * lowpass_ratio`, and `kp` such
/// that the rigid-body open loop crosses over at `w_c`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControllerConfig {
    /// Defaults to a tenth of the first parasitic mode.
    #[serde(default)]
    pub crossover_hz: Option<f64>,
    #[serde(default = "defaults::lead_ratio")]
    pub lead_ratio: f64,
    #[serde(default = "defaults::integral_ratio")]
    pub integral_ratio: f64,
    #[serde(default = "defaults::lowpass_ratio")]
    pub lowpass_ratio: f64,
}

mod defaults {
    pub fn lead_ratio() -> f64 {
        3.0
    }
    pub fn integral_ratio() -> f64 {
        0.2
    }
    pub fn lowpass_ratio() -> f64 {
        6.0
    }
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            crossover_hz: None,
            lead_ratio: defaults::lead_ratio(),
            integral_ratio: defaults::integral_ratio(),
            lowpass_ratio: defaults::lowpass_ratio(),
        }
    }
}

impl ControllerConfig {
    pub fn crossover_for(&self, plant: &PlantConfig) -> f64 {
        self.crossover_hz
            .or_else(|| plant.first_mode_hz().map(|f| f / 10.0))
            .unwrap_or(0.01 / plant.ts)
    }
}

fn poly_mul(p: &[f64], q: &[f64]) -> Vec<f64> {
    // coefficients in ascending powers of s
    let mut out = vec![0.0; p.len() + q.len() - 1];
    for (i, a) in p.iter().enumerate() {
        for (j, b) in q.iter().enumerate() {
            out[i + j] += a * b;
        }
    }
    out
}

/// Discrete controller for the plant in `plant`, checked for closed-loop
/// stability.
pub fn build_controller(plant: &PlantConfig, cfg: &ControllerConfig) -> Result<DiscreteStateSpace> {
    plant.validate()?;
    let wc = 2.0 * std::f64::consts::PI * cfg.crossover_for(plant);
    for (name, v) in [
        ("lead_ratio", cfg.lead_ratio),
        ("integral_ratio", cfg.integral_ratio),
        ("lowpass_ratio", cfg.lowpass_ratio),
    ] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::InvalidParameter(format!("{name} must be positive")));
        }
    }
    if !(wc > 0.0 && wc < std::f64::consts::PI / plant.ts) {
        return Err(Error::InvalidParameter(format!("crossover {wc} rad/s is not below Nyquist")));
    }
    let wz = wc / cfg.lead_ratio;
    let wp = wc * cfg.lead_ratio;
    let wi = wc * cfg.integral_ratio;
    let wl = wc * cfg.lowpass_ratio;

    let shape = |w: f64| {
        let s = nalgebra::Complex::new(0.0, w);
        ((s + wi) / s * (s / wz + 1.0) / (s / wp + 1.0) / (s / wl + 1.0)).norm()
    };
    let kp = plant.mass * wc * wc / shape(wc);

    // ascending coefficients
    let num = poly_mul(&[kp * wi, kp], &[1.0, 1.0 / wz]);
    let den = poly_mul(&poly_mul(&[0.0, 1.0], &[1.0, 1.0 / wp]), &[1.0, 1.0 / wl]);
    let lead = den[3];
    let den: Vec<f64> = den.iter().map(|v| v / lead).collect();
    let num: Vec<f64> = num.iter().map(|v| v / lead).collect();

    // controllable canonical form of the strictly proper num/den
    let a = DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 0.0, 0.0, 0.0, 1.0, -den[0], -den[1], -den[2]]);
    let b = DMatrix::from_row_slice(3, 1, &[0.0, 0.0, 1.0]);
    let c = DMatrix::from_row_slice(1, 3, &[num[0], num[1], num[2]]);
    let k = tustin(&a, &b, &c, &DMatrix::zeros(1, 1), plant.ts)?;

    let p = build_plant(plant)?;
    let rho = feedback_loop(&p, &k)?.spectral_radius();
    if !(rho < 1.0) {
        return Err(Error::UnstableLoop { spectral_radius: rho });
    }
    Ok(k)
}

/// Rigid-body inverse `f = m * acc`.
pub fn mass_feedforward(traj: &Trajectory, mass: f64) -> Vec<f64> {
    traj.acc.iter().map(|a| mass * a).collect()
}

/// Lower-triangular Toeplitz matrix of the first `n` Markov parameters.
pub fn lift(sys: &DiscreteStateSpace, n: usize) -> Result<DMatrix<f64>> {
    let h = sys.markov_parameters(n)?;
    Ok(toeplitz_lower(&h))
}

pub(crate) fn toeplitz_lower(h: &[f64]) -> DMatrix<f64> {
    let n = h.len();
    DMatrix::from_fn(n, n, |i, j| if i >= j { h[i - j] } else { 0.0 })
}

/// Closed-loop operators of one axis over a fixed horizon.
///
/// `s_lift` and `j_lift` are the plain `n x n` lifts. Because `J` is strictly
/// proper, `f(k)` first influences `e(k + delay)`; the learning problem is
/// therefore posed on the aligned window `e(delay..n)` driven by
/// `f(0..n - delay)`, where the lifted process sensitivity
/// ([`LoopSet::ilc_j`]) is square, lower triangular and invertible.
#[derive(Clone, Debug)]
pub struct LoopSet {
    pub p: DiscreteStateSpace,
    pub k: DiscreteStateSpace,
    pub s: DiscreteStateSpace,
    pub j: DiscreteStateSpace,
    pub s_lift: DMatrix<f64>,
    pub j_lift: DMatrix<f64>,
    delay: usize,
    ilc_j: DMatrix<f64>,
}

impl LoopSet {
    pub fn new(p: DiscreteStateSpace, k: DiscreteStateSpace, horizon: usize) -> Result<Self> {
        Self::with_guard(p, k, horizon, DEFAULT_MAX_HORIZON)
    }

    pub fn with_guard(p: DiscreteStateSpace, k: DiscreteStateSpace, horizon: usize, max_horizon: usize) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::InvalidParameter("horizon must be at least one sample".into()));
        }
        if horizon > max_horizon {
            return Err(Error::HorizonTooLarge { horizon, limit: max_horizon });
        }
        let s = sensitivity(&p, &k)?;
        let j = process_sensitivity(&p, &k)?;
        let hs = s.markov_parameters(horizon)?;
        let hj = j.markov_parameters(horizon)?;
        let scale = hj.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let delay = hj
            .iter()
            .position(|v| v.abs() > 1e-12 * scale)
            .ok_or_else(|| Error::InvalidParameter("process sensitivity is zero over the horizon".into()))?;
        if delay >= horizon {
            return Err(Error::InvalidParameter("horizon is shorter than the loop delay".into()));
        }
        let ilc_j = toeplitz_lower(&hj[delay..]);
        Ok(Self { p, k, s, j, s_lift: toeplitz_lower(&hs), j_lift: toeplitz_lower(&hj), delay, ilc_j })
    }

    /// Reference/trajectory length `n`.
    pub fn horizon(&self) -> usize {
        self.s_lift.nrows()
    }

    /// Samples between a feedforward input and its first effect on `e`.
    pub fn delay(&self) -> usize {
        self.delay
    }

    /// Length of learned feedforward signals, `n - delay`.
    pub fn ilc_len(&self) -> usize {
        self.horizon() - self.delay
    }

    /// Aligned lifted process sensitivity, `(n - delay) x (n - delay)`.
    pub fn ilc_j(&self) -> &DMatrix<f64> {
        &self.ilc_j
    }

    fn check_len(&self, v: &[f64], len: usize, what: &str) -> Result<()> {
        if v.len() != len {
            return Err(dim_err(format!("{what} has {} samples, expected {len}", v.len())));
        }
        Ok(())
    }

    /// Full-length error `e = S r - J f` with `f` zero-padded to `n`.
    pub fn tracking_error(&self, r: &[f64], f: &[f64]) -> Result<DVector<f64>> {
        let n = self.horizon();
        self.check_len(r, n, "reference")?;
        if f.len() > n {
            return Err(dim_err(format!("feedforward has {} samples, horizon is {n}", f.len())));
        }
        let mut fp = DVector::zeros(n);
        fp.rows_mut(0, f.len()).copy_from_slice(f);
        Ok(&self.s_lift * DVector::from_column_slice(r) - &self.j_lift * fp)
    }

    /// Aligned error window `e(delay..n)` when `base_ff` (full length or
    /// shorter) is applied and nothing is learned yet.
    pub fn free_error(&self, r: &[f64], base_ff: Option<&[f64]>) -> Result<DVector<f64>> {
        let e = self.tracking_error(r, base_ff.unwrap_or(&[]))?;
        Ok(e.rows(self.delay, self.ilc_len()).into_owned())
    }
}
