//! Dual principal component analysis.
//!
//! For a data matrix `H` (`n_d x n_t`, one signal per column, `n_d >> n_t`)
//! the principal directions are obtained from the small `n_t x n_t` problem
//! `H^T H = V Sigma^2 V^T`, giving
//!
//! ```text
//! T_E = Sigma^{-1} V^T H^T      (n_l x n_d)
//! T_D = H V Sigma^{-1}          (n_d x n_l)
//! ```
//!
//! for the leading `n_l` components. Both equal the leading left singular
//! vectors of `H` (transposed for `T_E`).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};

/// Components with `sigma <= RANK_TOL * sigma_max` are treated as absent.
pub const RANK_TOL: f64 = 1e-12;

/// Signals stored as columns, each tagged with the id of the trajectory it
/// came from.
#[derive(Clone, Debug, PartialEq)]
pub struct SignalDataset {
    pub h: DMatrix<f64>,
    pub ids: Vec<usize>,
}

impl SignalDataset {
    pub fn new(h: DMatrix<f64>, ids: Vec<usize>) -> Result<Self> {
        if h.ncols() == 0 || h.nrows() == 0 {
            return Err(dim_err("a dataset needs at least one non-empty column"));
        }
        if ids.len() != h.ncols() {
            return Err(dim_err(format!("{} ids for {} columns", ids.len(), h.ncols())));
        }
        if h.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("dataset contains non-finite values".into()));
        }
        Ok(Self { h, ids })
    }

    /// Builds `H` from equally long signals.
    pub fn from_columns(cols: &[Vec<f64>], ids: Vec<usize>) -> Result<Self> {
        let n_d = cols.first().map_or(0, Vec::len);
        if let Some((i, c)) = cols.iter().enumerate().find(|(_, c)| c.len() != n_d) {
            return Err(dim_err(format!("column {i} has {} samples, expected {n_d}", c.len())));
        }
        let h = DMatrix::from_fn(n_d, cols.len(), |r, c| cols[c][r]);
        Self::new(h, ids)
    }

    pub fn n_d(&self) -> usize {
        self.h.nrows()
    }

    pub fn n_t(&self) -> usize {
        self.h.ncols()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DpcaOptions {
    /// Subtract the column mean before fitting (textbook PCA). Off by
    /// default: the transforms then act on raw signals.
    #[serde(default)]
    pub center: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DpcaProjector {
    pub n_l: usize,
    pub t_e: DMatrix<f64>,
    pub t_d: DMatrix<f64>,
    /// Full singular spectrum of the (centered) data, descending.
    pub singular_values: Vec<f64>,
    #[serde(default)]
    pub mean: Option<DVector<f64>>,
    #[serde(default)]
    pub fingerprint: Option<String>,
}

/// Leading singular triplets of `H` from the `n_t x n_t` problem, solved in
/// square-root form: with the thin factorization `H = Q R`, the SVD
/// `R = U_r Sigma V^T` yields `V` and `Sigma` of `H^T H = R^T R` without
/// squaring the condition number, and `H V Sigma^{-1} = Q U_r`.
struct DualSvd {
    sigma: Vec<f64>,
    u: DMatrix<f64>,
}

fn dual_svd(h: &DMatrix<f64>) -> DualSvd {
    let (n_d, n_t) = h.shape();
    debug_assert!(n_t > 0);
    let (q, r) = if n_d >= n_t {
        let qr = h.clone().qr();
        (qr.q(), qr.r())
    } else {
        // wide data is small enough to decompose directly
        (DMatrix::identity(n_d, n_d), h.clone())
    };
    let (sigma, w) = jacobi_svd(r);
    let u = &q * w;
    DualSvd { sigma, u }
}

/// One-sided Jacobi SVD: rotates the columns of `a` until they are mutually
/// orthogonal. Returns the column norms (descending) and the correspondingly
/// ordered normalized columns; columns with zero norm stay zero.
fn jacobi_svd(mut a: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = a.ncols();
    for _sweep in 0..80 {
        let mut rotated = false;
        for i in 0..n {
            for j in i + 1..n {
                let alpha = a.column(i).norm_squared();
                let beta = a.column(j).norm_squared();
                let gamma = a.column(i).dot(&a.column(j));
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for k in 0..a.nrows() {
                    let (x, y) = (a[(k, i)], a[(k, j)]);
                    a[(k, i)] = c * x - s * y;
                    a[(k, j)] = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let norms: Vec<f64> = a.column_iter().map(|c| c.norm()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| norms[y].total_cmp(&norms[x]).then(x.cmp(&y)));
    let sigma: Vec<f64> = order.iter().map(|&i| norms[i]).collect();
    let mut w = DMatrix::zeros(a.nrows(), n);
    for (c, &i) in order.iter().enumerate() {
        if norms[i] > 0.0 {
            w.set_column(c, &(a.column(i) / norms[i]));
        }
    }
    (sigma, w)
}

/// Singular values of `H`, descending.
pub fn singular_spectrum(h: &DMatrix<f64>) -> Vec<f64> {
    dual_svd(h).sigma
}

/// Number of singular values above `RANK_TOL * sigma_max`.
pub fn numerical_rank(sigma: &[f64]) -> usize {
    let max = sigma.first().copied().unwrap_or(0.0);
    if max == 0.0 {
        return 0;
    }
    sigma.iter().take_while(|s| **s > RANK_TOL * max).count()
}

fn centered(h: &DMatrix<f64>, opts: DpcaOptions) -> (DMatrix<f64>, Option<DVector<f64>>) {
    if !opts.center {
        return (h.clone(), None);
    }
    let mean = h.column_mean();
    let mut c = h.clone();
    for mut col in c.column_iter_mut() {
        col -= &mean;
    }
    (c, Some(mean))
}

impl DpcaProjector {
    pub fn fit(data: &SignalDataset, n_l: usize) -> Result<Self> {
        Self::fit_with(data, n_l, DpcaOptions::default())
    }

    pub fn fit_with(data: &SignalDataset, n_l: usize, opts: DpcaOptions) -> Result<Self> {
        let (h, mean) = centered(&data.h, opts);
        let DualSvd { sigma, u } = dual_svd(&h);
        let supported = numerical_rank(&sigma);
        if n_l == 0 || n_l > supported {
            return Err(Error::Rank { requested: n_l, supported, spectrum: sigma });
        }
        let mut u = u.columns(0, n_l).into_owned();
        for mut col in u.column_iter_mut() {
            let imax = col.iamax();
            if col[imax] < 0.0 {
                col.neg_mut();
            }
        }
        Ok(Self { n_l, t_e: u.transpose(), t_d: u, singular_values: sigma, mean, fingerprint: None })
    }

    /// Fit with the largest latent dimension the data supports.
    pub fn fit_full_rank(data: &SignalDataset, opts: DpcaOptions) -> Result<Self> {
        let (h, _) = centered(&data.h, opts);
        let rank = numerical_rank(&singular_spectrum(&h));
        Self::fit_with(data, rank, opts)
    }

    pub fn n_d(&self) -> usize {
        self.t_d.nrows()
    }

    pub fn encode(&self, x: &[f64]) -> Result<DVector<f64>> {
        if x.len() != self.n_d() {
            return Err(dim_err(format!("signal has {} samples, projector expects {}", x.len(), self.n_d())));
        }
        let mut x = DVector::from_column_slice(x);
        if let Some(m) = &self.mean {
            x -= m;
        }
        Ok(&self.t_e * x)
    }

    pub fn decode(&self, z: &[f64]) -> Result<DVector<f64>> {
        if z.len() != self.n_l {
            return Err(dim_err(format!("latent vector has {} entries, projector expects {}", z.len(), self.n_l)));
        }
        let mut x = &self.t_d * DVector::from_column_slice(z);
        if let Some(m) = &self.mean {
            x += m;
        }
        Ok(x)
    }

    /// Encodes every column of `h`.
    pub fn encode_all(&self, h: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if h.nrows() != self.n_d() {
            return Err(dim_err(format!("signals have {} samples, projector expects {}", h.nrows(), self.n_d())));
        }
        let mut z = &self.t_e * h;
        if let Some(m) = &self.mean {
            let zm = &self.t_e * m;
            for mut col in z.column_iter_mut() {
                col -= &zm;
            }
        }
        Ok(z)
    }

    /// Decodes every column of `z`.
    pub fn decode_all(&self, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if z.nrows() != self.n_l {
            return Err(dim_err(format!("latent rows {} differ from n_l = {}", z.nrows(), self.n_l)));
        }
        let mut x = &self.t_d * z;
        if let Some(m) = &self.mean {
            for mut col in x.column_iter_mut() {
                col += m;
            }
        }
        Ok(x)
    }

    /// `||h - T_D T_E h||_2` for every column of `h`.
    pub fn reconstruction_error(&self, h: &DMatrix<f64>) -> Result<Vec<f64>> {
        let back = self.decode_all(&self.encode_all(h)?)?;
        Ok((h - back).column_iter().map(|c| c.norm()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_dataset(rng: &mut ChaCha8Rng, n_d: usize, n_t: usize) -> SignalDataset {
        let h = DMatrix::from_fn(n_d, n_t, |_, _| rng.random_range(-1.0..1.0));
        SignalDataset::new(h, (0..n_t).collect()).unwrap()
    }

    fn identity_gap(p: &DpcaProjector) -> f64 {
        (&p.t_e * &p.t_d - DMatrix::identity(p.n_l, p.n_l)).amax()
    }

    #[test]
    fn orthogonal_columns() {
        let mut h = DMatrix::zeros(5, 2);
        h[(0, 0)] = 3.0;
        h[(3, 1)] = -2.0;
        let p = DpcaProjector::fit(&SignalDataset::new(h, vec![0, 1]).unwrap(), 2).unwrap();
        assert!((p.singular_values[0] - 3.0).abs() < 1e-14);
        assert!((p.singular_values[1] - 2.0).abs() < 1e-14);
        // normalized data columns, signs fixed by the convention
        assert!((p.t_d[(0, 0)] - 1.0).abs() < 1e-14);
        assert!((p.t_d[(3, 1)] - 1.0).abs() < 1e-14);
        assert!((p.t_d.column(0).norm() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn single_column_closed_form() {
        let c = DVector::from_vec(vec![1.0, -2.0, 0.5, 4.0]);
        let p = DpcaProjector::fit(&SignalDataset::new(DMatrix::from_columns(&[c.clone()]), vec![7]).unwrap(), 1).unwrap();
        let unit = &c / c.norm();
        assert!((p.t_d.column(0) - &unit).amax() < 1e-15);
        assert!((p.t_e.row(0).transpose() - &unit).amax() < 1e-15);
    }

    #[test]
    fn full_rank_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = random_dataset(&mut rng, 200, 12);
        let p = DpcaProjector::fit(&d, 12).unwrap();
        for (i, col) in d.h.column_iter().enumerate() {
            let back = p.decode(p.encode(col.as_slice()).unwrap().as_slice()).unwrap();
            assert!((back - col).amax() < 1e-9, "column {i}");
        }
        assert!(p.reconstruction_error(&d.h).unwrap().iter().all(|e| *e < 1e-9));
    }

    #[test]
    fn encode_decode_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = random_dataset(&mut rng, 50, 6);
        let p = DpcaProjector::fit(&d, 4).unwrap();
        assert_eq!(p.encode(&[0.0; 50]).unwrap(), DVector::zeros(4));
        assert_eq!(p.decode(&[0.0; 4]).unwrap(), DVector::zeros(50));
        for i in 0..4 {
            let ui = p.t_d.column(i).into_owned();
            let z = p.encode(ui.as_slice()).unwrap();
            let mut unit = DVector::zeros(4);
            unit[i] = 1.0;
            assert!((z - unit).amax() < 1e-12);
            let mut e = vec![0.0; 4];
            e[i] = 1.0;
            let back = p.decode(&e).unwrap();
            assert!((back.norm() - 1.0).abs() < 1e-12);
        }
        let x: Vec<f64> = (0..50).map(|_| rng.random_range(-1.0..1.0)).collect();
        let zx = p.encode(&x).unwrap();
        let scaled: Vec<f64> = x.iter().map(|v| -3.5 * v).collect();
        assert!((p.encode(&scaled).unwrap() - zx * -3.5).amax() < 1e-12);
        assert!(p.encode(&[1.0; 49]).is_err());
        assert!(p.decode(&[1.0; 5]).is_err());
    }

    #[test]
    fn rank_two_energy() {
        let a = DVector::from_fn(30, |i, _| (i as f64 * 0.3).sin());
        let b = DVector::from_fn(30, |i, _| (i as f64 * 0.1).cos());
        let h = DMatrix::from_columns(&[a.clone(), b.clone(), &a * 2.0 - &b, &b * 0.5]);
        let d = SignalDataset::new(h.clone(), vec![0, 1, 2, 3]).unwrap();
        let sv = h.singular_values();
        let p = DpcaProjector::fit(&d, 1).unwrap();
        let total: f64 = p.reconstruction_error(&h).unwrap().iter().map(|e| e * e).sum();
        assert!((total - sv[1] * sv[1]).abs() < 1e-8 * sv[1] * sv[1]);
        assert_eq!(numerical_rank(&p.singular_values), 2);
        assert!(matches!(DpcaProjector::fit(&d, 3), Err(Error::Rank { requested: 3, supported: 2, .. })));
        assert!(DpcaProjector::fit(&d, 0).is_err());
    }

    #[test]
    fn error_decreases_with_latent_dimension() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let d = random_dataset(&mut rng, 80, 10);
        let mut last = f64::INFINITY;
        for n_l in 1..=10 {
            let p = DpcaProjector::fit(&d, n_l).unwrap();
            let tot: f64 = p.reconstruction_error(&d.h).unwrap().iter().map(|e| e * e).sum();
            assert!(tot <= last + 1e-12);
            last = tot;
        }
    }

    #[test]
    fn matches_direct_svd() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let d = random_dataset(&mut rng, 300, 15);
        let p = DpcaProjector::fit(&d, 10).unwrap();
        let svd = d.h.clone().svd(true, false);
        let mut idx: Vec<usize> = (0..15).collect();
        idx.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
        let u = svd.u.unwrap();
        for c in 0..10 {
            let mut uc = u.column(idx[c]).into_owned();
            if uc[uc.iamax()] < 0.0 {
                uc.neg_mut();
            }
            assert!((p.t_d.column(c) - uc).amax() < 1e-8, "component {c}");
            assert!((p.singular_values[c] - svd.singular_values[idx[c]]).abs() < 1e-10);
        }
    }

    #[test]
    fn deterministic_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let d = random_dataset(&mut rng, 120, 9);
        assert_eq!(DpcaProjector::fit(&d, 5).unwrap(), DpcaProjector::fit(&d, 5).unwrap());
    }

    #[test]
    fn centering_option() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut d = random_dataset(&mut rng, 40, 8);
        for mut col in d.h.column_iter_mut() {
            col.add_scalar_mut(5.0);
        }
        let opts = DpcaOptions { center: true };
        let p = DpcaProjector::fit_full_rank(&d, opts).unwrap();
        assert_eq!(p.n_l, 7); // centering removes one dimension
        assert!(identity_gap(&p) < 1e-10);
        let errs = p.reconstruction_error(&d.h).unwrap();
        assert!(errs.iter().all(|e| *e < 1e-9), "{errs:?}");
        let mean = d.h.column_mean();
        assert!(p.encode(mean.as_slice()).unwrap().amax() < 1e-12);
    }

    #[test]
    fn ill_conditioned_data_still_biorthogonal() {
        // smooth, rapidly decaying spectrum similar to motion profiles
        let n_d = 600;
        let cols: Vec<Vec<f64>> = (0..20)
            .map(|k| {
                let c = 0.2 + 0.03 * k as f64;
                (0..n_d).map(|i| ((i as f64 / n_d as f64 - c) / 0.15).tanh()).collect()
            })
            .collect();
        let d = SignalDataset::from_columns(&cols, (0..20).collect()).unwrap();
        let p = DpcaProjector::fit_full_rank(&d, DpcaOptions::default()).unwrap();
        assert!(identity_gap(&p) < 1e-10);
        let tdte = &p.t_d * &p.t_e;
        assert!((&tdte * &tdte - &tdte).amax() < 1e-9);
    }

    #[test]
    fn serde_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let d = random_dataset(&mut rng, 20, 4);
        let p = DpcaProjector::fit(&d, 3).unwrap();
        let s = serde_json::to_string(&p).unwrap();
        assert_eq!(serde_json::from_str::<DpcaProjector>(&s).unwrap(), p);
    }

    #[test]
    fn dataset_validation() {
        assert!(SignalDataset::new(DMatrix::zeros(3, 0), vec![]).is_err());
        assert!(SignalDataset::new(DMatrix::zeros(3, 2), vec![0]).is_err());
        assert!(SignalDataset::new(DMatrix::from_element(2, 1, f64::NAN), vec![0]).is_err());
        assert!(SignalDataset::from_columns(&[vec![1.0, 2.0], vec![1.0]], vec![0, 1]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn dual_identities(seed in any::<u64>(), n_d in 20usize..200, n_t in 1usize..15, frac in 0.1f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = random_dataset(&mut rng, n_d, n_t);
            let n_l = ((n_t as f64 * frac).ceil() as usize).clamp(1, n_t);
            let p = DpcaProjector::fit(&d, n_l).unwrap();
            prop_assert!(identity_gap(&p) < 1e-10);
            let tdte = &p.t_d * &p.t_e;
            prop_assert!((&tdte * &tdte - &tdte).amax() < 1e-9);
            let z = DVector::from_fn(n_l, |_, _| rng.random_range(-1.0..1.0));
            let back = p.encode(p.decode(z.as_slice()).unwrap().as_slice()).unwrap();
            prop_assert!((back - z).norm() < 1e-10);
            let total: f64 = p.reconstruction_error(&d.h).unwrap().iter().map(|e| e * e).sum();
            let discarded: f64 = p.singular_values[n_l..].iter().map(|s| s * s).sum();
            let energy: f64 = p.singular_values.iter().map(|s| s * s).sum();
            prop_assert!((total - discarded).abs() <= 1e-8 * discarded.max(1e-8 * energy));
            // the dual formulas hold before re-orthonormalization
            let h = &d.h;
            let sigma: Vec<f64> = p.singular_values[..n_l].to_vec();
            let dual_td = DMatrix::from_fn(n_d, n_l, |r, c| (h.transpose() * p.t_d.column(c))
                .dot(&h.row(r).transpose()) / (sigma[c] * sigma[c]));
            prop_assert!((dual_td - &p.t_d).amax() < 1e-8);
        }
    }
}
