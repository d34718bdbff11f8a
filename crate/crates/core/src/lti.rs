//! Discrete-time LTI systems in state-space form.
//!
//! ```text
//! x(k+1) = A x(k) + B u(k)
//! y(k)   = C x(k) + D u(k)
//! ```
//!
//! Simulation always starts from a zero state. Closed loops are formed with
//! the feedforward injected at the plant input, so the tracking error obeys
//! `e = S r - J f` with `S = (I + PK)^-1` and `J = (I + PK)^-1 P`.

use nalgebra::{Complex, DMatrix, DVector};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{dim_err, Error, Result};

pub type C64 = Complex<f64>;

#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteStateSpace {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    c: DMatrix<f64>,
    d: DMatrix<f64>,
    ts: f64,
}

impl DiscreteStateSpace {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
        d: DMatrix<f64>,
        ts: f64,
    ) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(dim_err(format!("A must be square, got {}x{}", n, a.ncols())));
        }
        if b.nrows() != n {
            return Err(dim_err(format!("B has {} rows, A has {}", b.nrows(), n)));
        }
        if c.ncols() != n {
            return Err(dim_err(format!("C has {} columns, A has {}", c.ncols(), n)));
        }
        if d.nrows() != c.nrows() || d.ncols() != b.ncols() {
            return Err(dim_err(format!(
                "D is {}x{}, expected {}x{}",
                d.nrows(),
                d.ncols(),
                c.nrows(),
                b.ncols()
            )));
        }
        if !(ts > 0.0 && ts.is_finite()) {
            return Err(Error::InvalidParameter(format!("sample time must be positive, got {ts}")));
        }
        Ok(Self { a, b, c, d, ts })
    }

    /// Memoryless system `y = D u`.
    pub fn static_gain(d: DMatrix<f64>, ts: f64) -> Result<Self> {
        let (ny, nu) = d.shape();
        Self::new(
            DMatrix::zeros(0, 0),
            DMatrix::zeros(0, nu),
            DMatrix::zeros(ny, 0),
            d,
            ts,
        )
    }

    pub fn siso_gain(g: f64, ts: f64) -> Result<Self> {
        Self::static_gain(DMatrix::from_element(1, 1, g), ts)
    }

    /// `H(z) = z^-1`.
    pub fn unit_delay(ts: f64) -> Result<Self> {
        Self::new(
            DMatrix::zeros(1, 1),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::zeros(1, 1),
            ts,
        )
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }
    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }
    pub fn c(&self) -> &DMatrix<f64> {
        &self.c
    }
    pub fn d(&self) -> &DMatrix<f64> {
        &self.d
    }
    pub fn ts(&self) -> f64 {
        self.ts
    }
    pub fn n_states(&self) -> usize {
        self.a.nrows()
    }
    pub fn n_inputs(&self) -> usize {
        self.b.ncols()
    }
    pub fn n_outputs(&self) -> usize {
        self.c.nrows()
    }
    pub fn is_siso(&self) -> bool {
        self.n_inputs() == 1 && self.n_outputs() == 1
    }

    fn require_siso(&self, what: &str) -> Result<()> {
        if self.is_siso() {
            Ok(())
        } else {
            Err(dim_err(format!(
                "{what} needs a SISO system, got {}x{}",
                self.n_outputs(),
                self.n_inputs()
            )))
        }
    }

    /// Scalar-valued shorthand for [`simulate`] on SISO systems.
    pub fn simulate_siso(&self, u: &[f64]) -> Result<Vec<f64>> {
        self.require_siso("simulate_siso")?;
        let u = DMatrix::from_row_slice(1, u.len(), u);
        Ok(simulate(self, &u)?.row(0).iter().copied().collect())
    }

    /// First `n` Markov parameters `D, CB, CAB, ...` of a SISO system.
    pub fn markov_parameters(&self, n: usize) -> Result<Vec<f64>> {
        self.require_siso("markov_parameters")?;
        let mut out = Vec::with_capacity(n);
        if n == 0 {
            return Ok(out);
        }
        out.push(self.d[(0, 0)]);
        let mut x = self.b.column(0).into_owned();
        for _ in 1..n {
            out.push(self.c.row(0).dot(&x.transpose()));
            x = &self.a * x;
        }
        Ok(out)
    }

    /// Largest eigenvalue magnitude of `A` (0 for memoryless systems).
    pub fn spectral_radius(&self) -> f64 {
        if self.n_states() == 0 {
            return 0.0;
        }
        self.a
            .complex_eigenvalues()
            .iter()
            .map(|l| l.norm())
            .fold(0.0, f64::max)
    }

    /// Parallel connection `self + other`.
    pub fn parallel(&self, other: &Self) -> Result<Self> {
        if self.n_inputs() != other.n_inputs() || self.n_outputs() != other.n_outputs() {
            return Err(dim_err("parallel connection needs equal input/output sizes"));
        }
        if (self.ts - other.ts).abs() > 1e-15 * self.ts {
            return Err(Error::InvalidParameter("sample times differ".into()));
        }
        let (n1, n2) = (self.n_states(), other.n_states());
        let mut a = DMatrix::zeros(n1 + n2, n1 + n2);
        a.view_mut((0, 0), (n1, n1)).copy_from(&self.a);
        a.view_mut((n1, n1), (n2, n2)).copy_from(&other.a);
        let mut b = DMatrix::zeros(n1 + n2, self.n_inputs());
        b.view_mut((0, 0), (n1, self.n_inputs())).copy_from(&self.b);
        b.view_mut((n1, 0), (n2, self.n_inputs())).copy_from(&other.b);
        let mut c = DMatrix::zeros(self.n_outputs(), n1 + n2);
        c.view_mut((0, 0), (self.n_outputs(), n1)).copy_from(&self.c);
        c.view_mut((0, n1), (self.n_outputs(), n2)).copy_from(&other.c);
        Self::new(a, b, c, &self.d + &other.d, self.ts)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// JSON form: `{"A": [[..]], "B": .., "C": .., "D": .., "Ts": ..}`, matrices as
/// arrays of rows.
#[derive(Serialize, Deserialize)]
struct RawStateSpace {
    #[serde(rename = "A")]
    a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    b: Vec<Vec<f64>>,
    #[serde(rename = "C")]
    c: Vec<Vec<f64>>,
    #[serde(rename = "D")]
    d: Vec<Vec<f64>>,
    #[serde(rename = "Ts")]
    ts: f64,
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn from_rows(rows: &[Vec<f64>], nrows: usize, ncols: usize, name: &str) -> Result<DMatrix<f64>> {
    if rows.len() != nrows {
        return Err(dim_err(format!("{name}: expected {nrows} rows, got {}", rows.len())));
    }
    let mut m = DMatrix::zeros(nrows, ncols);
    for (i, r) in rows.iter().enumerate() {
        if r.len() != ncols {
            return Err(dim_err(format!("{name}: row {i} has {} entries, expected {ncols}", r.len())));
        }
        for (j, v) in r.iter().enumerate() {
            m[(i, j)] = *v;
        }
    }
    Ok(m)
}

impl Serialize for DiscreteStateSpace {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        RawStateSpace {
            a: rows_of(&self.a),
            b: rows_of(&self.b),
            c: rows_of(&self.c),
            d: rows_of(&self.d),
            ts: self.ts,
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for DiscreteStateSpace {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let raw = RawStateSpace::deserialize(deserializer)?;
        // D fixes the I/O sizes so that empty A/B/C still round-trip.
        let ny = raw.d.len();
        let nu = raw.d.first().map_or(0, Vec::len);
        let n = raw.a.len();
        let build = || -> Result<DiscreteStateSpace> {
            let a = from_rows(&raw.a, n, n, "A")?;
            let b = from_rows(&raw.b, n, nu, "B")?;
            let c = from_rows(&raw.c, ny, n, "C")?;
            let d = from_rows(&raw.d, ny, nu, "D")?;
            DiscreteStateSpace::new(a, b, c, d, raw.ts)
        };
        build().map_err(D::Error::custom)
    }
}

/// Runs the state recursion from zero initial state. `u` is `n_u x N`.
pub fn simulate(sys: &DiscreteStateSpace, u: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if u.nrows() != sys.n_inputs() {
        return Err(dim_err(format!(
            "input has {} rows, system has {} inputs",
            u.nrows(),
            sys.n_inputs()
        )));
    }
    let steps = u.ncols();
    let mut y = DMatrix::zeros(sys.n_outputs(), steps);
    let mut x = DVector::zeros(sys.n_states());
    for k in 0..steps {
        let uk = u.column(k);
        let yk = &sys.c * &x + &sys.d * uk;
        y.set_column(k, &yk);
        x = &sys.a * &x + &sys.b * uk;
    }
    Ok(y)
}

/// Complex frequency response sampled on normalized frequencies `omega` in
/// `[0, pi]`.
#[derive(Clone, Debug)]
pub struct FrequencyResponse {
    omegas: Vec<f64>,
    values: Vec<DMatrix<C64>>,
}

impl FrequencyResponse {
    pub fn new(omegas: Vec<f64>, values: Vec<DMatrix<C64>>) -> Result<Self> {
        if omegas.len() != values.len() {
            return Err(dim_err(format!(
                "{} frequencies but {} response values",
                omegas.len(),
                values.len()
            )));
        }
        if omegas.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidParameter("frequency grid must be strictly increasing".into()));
        }
        Ok(Self { omegas, values })
    }

    pub fn omegas(&self) -> &[f64] {
        &self.omegas
    }
    pub fn values(&self) -> &[DMatrix<C64>] {
        &self.values
    }
    pub fn len(&self) -> usize {
        self.omegas.len()
    }
    pub fn is_empty(&self) -> bool {
        self.omegas.is_empty()
    }

    /// Scalar values of a SISO response.
    pub fn siso(&self) -> Vec<C64> {
        self.values.iter().map(|m| m[(0, 0)]).collect()
    }
}

/// Evaluates `C (zI - A)^-1 B + D` at `z = exp(i omega)`.
pub fn freq_response(sys: &DiscreteStateSpace, omegas: &[f64]) -> Result<FrequencyResponse> {
    let n = sys.n_states();
    let a = sys.a.map(|v| C64::new(v, 0.0));
    let b = sys.b.map(|v| C64::new(v, 0.0));
    let c = sys.c.map(|v| C64::new(v, 0.0));
    let d = sys.d.map(|v| C64::new(v, 0.0));
    let scale = 1.0 + sys.a.amax();
    let mut values = Vec::with_capacity(omegas.len());
    for &w in omegas {
        if n == 0 {
            values.push(d.clone());
            continue;
        }
        let z = C64::from_polar(1.0, w);
        let m = DMatrix::<C64>::identity(n, n) * z - &a;
        let lu = m.lu();
        let x = lu
            .solve(&b)
            .filter(|x| x.iter().all(|v| v.re.is_finite() && v.im.is_finite()))
            .ok_or(Error::SingularFrequency { omega: w })?;
        // Reject near-singular pivots too: they come from poles on the grid.
        let min_pivot = lu.u().diagonal().iter().map(|p| p.norm()).fold(f64::INFINITY, f64::min);
        if min_pivot <= 1e-14 * scale {
            return Err(Error::SingularFrequency { omega: w });
        }
        values.push(&c * x + &d);
    }
    FrequencyResponse::new(omegas.to_vec(), values)
}

/// Log-linear hybrid grid on `(0, pi]`: half the points log-spaced from
/// `1e-4 * pi`, the other half linear, merged and deduplicated.
pub fn hybrid_grid(points: usize) -> Vec<f64> {
    use std::f64::consts::PI;
    let points = points.max(2);
    let n_log = points / 2;
    let n_lin = points - n_log;
    let lo = (1e-4 * PI).ln();
    let hi = PI.ln();
    let mut w: Vec<f64> = (0..n_log)
        .map(|i| (lo + (hi - lo) * i as f64 / (n_log.max(2) - 1) as f64).exp())
        .chain((1..=n_lin).map(|i| PI * i as f64 / n_lin as f64))
        .collect();
    w.sort_by(|x, y| x.partial_cmp(y).unwrap());
    w.dedup_by(|x, y| (*x - *y).abs() <= 1e-12 * y.abs());
    w
}

/// Default L-infinity evaluation grid.
pub fn default_grid() -> Vec<f64> {
    hybrid_grid(2048)
}

/// Largest singular value over the grid. This under-estimates the true
/// L-infinity norm when the peak falls between grid points.
pub fn linf_norm(fr: &FrequencyResponse) -> Result<f64> {
    if fr.is_empty() {
        return Err(Error::InvalidParameter("empty frequency grid".into()));
    }
    Ok(fr.values.iter().map(max_singular_value).fold(0.0, f64::max))
}

fn max_singular_value(m: &DMatrix<C64>) -> f64 {
    if m.nrows() == 1 && m.ncols() == 1 {
        return m[(0, 0)].norm();
    }
    if m.is_empty() {
        return 0.0;
    }
    m.clone().singular_values().max()
}

/// Closed loop from `[r; f]` to `e` for `u = K e + f`, `y = P u`, `e = r - y`.
pub fn feedback_loop(p: &DiscreteStateSpace, k: &DiscreteStateSpace) -> Result<DiscreteStateSpace> {
    let (ny, nu) = (p.n_outputs(), p.n_inputs());
    if k.n_inputs() != ny || k.n_outputs() != nu {
        return Err(dim_err(format!(
            "controller is {}x{}, plant needs {}x{}",
            k.n_outputs(),
            k.n_inputs(),
            nu,
            ny
        )));
    }
    if (p.ts - k.ts).abs() > 1e-12 * p.ts {
        return Err(Error::InvalidParameter("plant and controller sample times differ".into()));
    }
    let (np, nk) = (p.n_states(), k.n_states());
    let m = (DMatrix::identity(ny, ny) + &p.d * &k.d)
        .try_inverse()
        .filter(|m| m.iter().all(|v| v.is_finite()))
        .ok_or(Error::AlgebraicLoop)?;

    // e = Ce x + De w with x = [xp; xk], w = [r; f]
    let mut ce_pre = DMatrix::zeros(ny, np + nk);
    ce_pre.view_mut((0, 0), (ny, np)).copy_from(&(-&p.c));
    ce_pre.view_mut((0, np), (ny, nk)).copy_from(&(-(&p.d * &k.c)));
    let ce = &m * ce_pre;
    let mut de_pre = DMatrix::zeros(ny, ny + nu);
    de_pre.view_mut((0, 0), (ny, ny)).fill_with_identity();
    de_pre.view_mut((0, ny), (ny, nu)).copy_from(&(-&p.d));
    let de = &m * de_pre;

    // u = Cu x + Du w
    let mut cu = &k.d * &ce;
    {
        let mut blk = cu.view_mut((0, np), (nu, nk));
        blk += &k.c;
    }
    let mut du = &k.d * &de;
    {
        let mut blk = du.view_mut((0, ny), (nu, nu));
        for i in 0..nu {
            blk[(i, i)] += 1.0;
        }
    }

    let n = np + nk;
    let mut a = DMatrix::zeros(n, n);
    a.view_mut((0, 0), (np, np)).copy_from(&p.a);
    a.view_mut((np, np), (nk, nk)).copy_from(&k.a);
    let mut top = a.view_mut((0, 0), (np, n));
    top += &p.b * &cu;
    let mut bottom = a.view_mut((np, 0), (nk, n));
    bottom += &k.b * &ce;

    let mut b = DMatrix::zeros(n, ny + nu);
    b.view_mut((0, 0), (np, ny + nu)).copy_from(&(&p.b * &du));
    b.view_mut((np, 0), (nk, ny + nu)).copy_from(&(&k.b * &de));

    DiscreteStateSpace::new(a, b, ce, de, p.ts)
}

/// `S = (I + PK)^-1`, the map from reference to tracking error.
pub fn sensitivity(p: &DiscreteStateSpace, k: &DiscreteStateSpace) -> Result<DiscreteStateSpace> {
    let cl = feedback_loop(p, k)?;
    let ny = p.n_outputs();
    DiscreteStateSpace::new(
        cl.a.clone(),
        cl.b.columns(0, ny).into_owned(),
        cl.c.clone(),
        cl.d.columns(0, ny).into_owned(),
        cl.ts,
    )
}

/// `J = (I + PK)^-1 P`, the map from plant-input feedforward to (negated)
/// tracking error.
pub fn process_sensitivity(p: &DiscreteStateSpace, k: &DiscreteStateSpace) -> Result<DiscreteStateSpace> {
    let cl = feedback_loop(p, k)?;
    let (ny, nu) = (p.n_outputs(), p.n_inputs());
    DiscreteStateSpace::new(
        cl.a.clone(),
        cl.b.columns(ny, nu).into_owned(),
        -cl.c.clone(),
        -cl.d.columns(ny, nu).into_owned(),
        cl.ts,
    )
}
