//! The smooth Feshbach–Schur map on matrices.
//!
//! With `W = H − T`, `H_χ = T + χWχ` and `H_χ̄ = T + χ̄Wχ̄`,
//! `F_χ(H, T) = H_χ − χWχ̄ H_χ̄^{-1} χ̄Wχ`. The partition operators must be real diagonal,
//! so `Ran χ` and `Ran χ̄` are index sets and inverses are taken on those blocks.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fockspace::FockOperator;

/// Checked Feshbach pair `(H, T)` with partition `(χ, χ̄)`.
#[derive(Clone, Debug)]
pub struct FeshbachPair {
    pub h: FockOperator,
    pub t: FockOperator,
    pub chi: Vec<f64>,
    pub chibar: Vec<f64>,
    /// Smallest singular value of `T` on `Ran χ̄`.
    pub margin_t: f64,
    /// Smallest singular value of `H_χ̄` on `Ran χ̄`.
    pub margin_h: f64,
    pub floor: f64,
    hbar_inv: FockOperator,
}

fn diag_of(m: &FockOperator, what: &'static str) -> Result<Vec<f64>> {
    let n = m.nrows();
    let scale = m.camax().max(1.0);
    for i in 0..n {
        for j in 0..n {
            let v = m[(i, j)];
            if (i != j && v.norm() > 1e-13 * scale) || (i == j && v.im.abs() > 1e-13 * scale) {
                return Err(Error::Invalid(format!("{what} must be real diagonal")));
            }
        }
    }
    Ok((0..n).map(|i| m[(i, i)].re).collect())
}

fn support(d: &[f64]) -> Vec<usize> {
    d.iter()
        .enumerate()
        .filter(|(_, &x)| x != 0.0)
        .map(|(i, _)| i)
        .collect()
}

fn block(m: &FockOperator, idx: &[usize]) -> FockOperator {
    DMatrix::from_fn(idx.len(), idx.len(), |i, j| m[(idx[i], idx[j])])
}

fn embed(b: &FockOperator, idx: &[usize], n: usize) -> FockOperator {
    let mut out = DMatrix::zeros(n, n);
    for (i, &a) in idx.iter().enumerate() {
        for (j, &c) in idx.iter().enumerate() {
            out[(a, c)] = b[(i, j)];
        }
    }
    out
}

fn min_singular(m: &FockOperator) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    m.clone()
        .singular_values()
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

fn diag_matrix(d: &[f64]) -> FockOperator {
    DMatrix::from_diagonal(&DVector::from_iterator(d.len(), d.iter().map(|&x| Complex64::from(x))))
}

/// Inverse of `m` on the index set `idx`, embedded with zeros elsewhere.
fn block_inverse(m: &FockOperator, idx: &[usize]) -> Result<FockOperator> {
    let b = block(m, idx);
    let inv = b
        .lu()
        .try_inverse()
        .ok_or_else(|| Error::Invalid("singular block".into()))?;
    Ok(embed(&inv, idx, m.nrows()))
}

impl FeshbachPair {
    /// `floor` is relative to the largest entry of `T`.
    pub fn new(
        h: FockOperator,
        t: FockOperator,
        chi: &FockOperator,
        chibar: &FockOperator,
        floor: f64,
    ) -> Result<Self> {
        let n = h.nrows();
        if h.ncols() != n || t.shape() != (n, n) || chi.shape() != (n, n) || chibar.shape() != (n, n) {
            return Err(Error::BasisMismatch("Feshbach pair operands differ in shape".into()));
        }
        let c = diag_of(chi, "chi")?;
        let cb = diag_of(chibar, "chibar")?;
        for (a, b) in c.iter().zip(&cb) {
            if (a * a + b * b - 1.0).abs() > 1e-13 {
                return Err(Error::Invalid("chi² + chibar² ≠ 1".into()));
            }
        }
        let scale = t.camax().max(f64::MIN_POSITIVE);
        let comm = |d: &[f64]| {
            let dm = diag_matrix(d);
            (&dm * &t - &t * &dm).camax()
        };
        if comm(&c) > 1e-13 * scale || comm(&cb) > 1e-13 * scale {
            return Err(Error::Invalid("partition does not commute with T".into()));
        }
        let bar = support(&cb);
        let w = &h - &t;
        let cbm = diag_matrix(&cb);
        let hbar = &t + &cbm * &w * &cbm;
        let margin_t = min_singular(&block(&t, &bar));
        let margin_h = min_singular(&block(&hbar, &bar));
        let fl = floor * scale;
        if margin_t <= fl {
            return Err(Error::NotFeshbachPair {
                what: "T on Ran chibar",
                margin: margin_t,
                floor: fl,
            });
        }
        if margin_h <= fl {
            return Err(Error::NotFeshbachPair {
                what: "H_chibar on Ran chibar",
                margin: margin_h,
                floor: fl,
            });
        }
        let hbar_inv = block_inverse(&hbar, &bar)?;
        Ok(FeshbachPair {
            h,
            t,
            chi: c,
            chibar: cb,
            margin_t,
            margin_h,
            floor: fl,
            hbar_inv,
        })
    }

    pub fn w(&self) -> FockOperator {
        &self.h - &self.t
    }

    /// `H_χ̄^{-1}` on `Ran χ̄`, zero elsewhere.
    pub fn hbar_inverse(&self) -> &FockOperator {
        &self.hbar_inv
    }

    pub fn chi_matrix(&self) -> FockOperator {
        diag_matrix(&self.chi)
    }

    pub fn chibar_matrix(&self) -> FockOperator {
        diag_matrix(&self.chibar)
    }

    /// Indices of `Ran χ`.
    pub fn chi_support(&self) -> Vec<usize> {
        support(&self.chi)
    }
}

/// `F_χ(H, T)`.
pub fn feshbach_map(pair: &FeshbachPair) -> FockOperator {
    let w = pair.w();
    let c = pair.chi_matrix();
    let cb = pair.chibar_matrix();
    let h_chi = &pair.t + &c * &w * &c;
    h_chi - &c * &w * &cb * pair.hbar_inverse() * &cb * &w * &c
}

/// `Q = χ − χ̄ H_χ̄^{-1} χ̄Wχ` and `Q♯ = χ − χWχ̄ H_χ̄^{-1} χ̄`.
pub fn q_operators(pair: &FeshbachPair) -> (FockOperator, FockOperator) {
    let w = pair.w();
    let c = pair.chi_matrix();
    let cb = pair.chibar_matrix();
    let q = &c - &cb * pair.hbar_inverse() * &cb * &w * &c;
    let qs = &c - &c * &w * &cb * pair.hbar_inverse() * &cb;
    (q, qs)
}

#[derive(Clone, Debug, Serialize)]
pub struct IsospectralReport {
    pub sigma_min_h: f64,
    /// Smallest singular value of F on `Ran χ`.
    pub sigma_min_f: f64,
    pub kernel_dim_h: usize,
    pub kernel_dim_f: usize,
    /// max over ker H of ‖F χv‖/‖v‖.
    pub chi_kernel_residual: f64,
    /// max over ker F of ‖H Qv‖/‖v‖.
    pub q_kernel_residual: f64,
    /// max over ker H of ‖Qχv − v‖/‖v‖.
    pub q_chi_identity: f64,
    /// Entrywise resolvent-identity deviation relative to ‖H^{-1}‖ (when H is invertible).
    pub resolvent_residual: Option<f64>,
    pub pass: bool,
}

/// Orthonormal null vectors of `m` (singular values below `tol`), as columns.
fn null_space(m: &FockOperator, tol: f64) -> Vec<DVector<Complex64>> {
    let svd = m.clone().svd(false, true);
    let vt = svd.v_t.expect("requested");
    svd.singular_values
        .iter()
        .enumerate()
        .filter(|(_, &s)| s < tol)
        .map(|(i, _)| vt.row(i).adjoint())
        .collect()
}

/// Checks the isospectrality statements on the given matrices.
///
/// `tol` bounds the relative residuals; singular values below `tol·‖H‖` count as kernel.
pub fn isospectral_test(pair: &FeshbachPair, tol: f64) -> IsospectralReport {
    let n = pair.h.nrows();
    let f = feshbach_map(pair);
    let (q, qs) = q_operators(pair);
    let sc = support(&pair.chi);
    let fb = block(&f, &sc);
    let hnorm = pair.h.clone().singular_values().max().max(f64::MIN_POSITIVE);
    let ktol = tol.sqrt() * hnorm;
    let sigma_min_h = min_singular(&pair.h);
    let sigma_min_f = min_singular(&fb);
    let ker_h = null_space(&pair.h, ktol);
    let ker_f_block = null_space(&fb, ktol);
    let c = pair.chi_matrix();
    let mut chi_res: f64 = 0.0;
    let mut qchi: f64 = 0.0;
    for v in &ker_h {
        chi_res = chi_res.max((&f * (&c * v)).norm() / (hnorm * v.norm()));
        qchi = qchi.max((&q * (&c * v) - v).norm() / v.norm());
    }
    let mut q_res: f64 = 0.0;
    for vb in &ker_f_block {
        let mut v = DVector::zeros(n);
        for (i, &a) in sc.iter().enumerate() {
            v[a] = vb[i];
        }
        q_res = q_res.max((&pair.h * (&q * &v)).norm() / (hnorm * v.norm()));
    }
    let resolvent_residual = if ker_h.is_empty() && ker_f_block.is_empty() {
        match (pair.h.clone().lu().try_inverse(), block_inverse(&f, &sc)) {
            (Some(hinv), Ok(finv)) => {
                let cb = pair.chibar_matrix();
                let rhs = &cb * pair.hbar_inverse() * &cb + &q * finv * &qs;
                let scale = hinv.camax().max(f64::MIN_POSITIVE);
                Some((hinv - rhs).camax() / scale)
            }
            _ => None,
        }
    } else {
        None
    };
    let pass = ker_h.len() == ker_f_block.len()
        && chi_res <= tol.sqrt()
        && q_res <= tol.sqrt()
        && qchi <= tol.sqrt()
        && resolvent_residual.is_none_or(|r| r <= tol);
    IsospectralReport {
        sigma_min_h,
        sigma_min_f,
        kernel_dim_h: ker_h.len(),
        kernel_dim_f: ker_f_block.len(),
        chi_kernel_residual: chi_res,
        q_kernel_residual: q_res,
        q_chi_identity: qchi,
        resolvent_residual,
        pass,
    }
}

/// Lower bound `r(μ − γ) − μρ/2` on `|w_{0,0}|` used as a cheap pair pre-filter.
pub fn w00_lower_bound(r: f64, mu: f64, gamma: f64, rho: f64) -> f64 {
    r * (mu - gamma) - mu * rho / 2.0
}

/// A random pair with a planted kernel of dimension `kernel_dim` (0 gives an invertible `H`).
///
/// `H = V D V*` with `V` unitary and `D` real with `kernel_dim` zeros and the other entries of
/// modulus in [0.5, 2]; `T` is real diagonal and `χ` is a smooth partition over the indices:
/// `χ = 1` on the first block, a ramp in the middle, `χ = 0` on the last block where `T` is large.
pub fn planted_pair<R: rand::Rng>(rng: &mut R, dim: usize, kernel_dim: usize) -> Result<FeshbachPair> {
    if dim < 4 || kernel_dim >= dim / 2 {
        return Err(Error::Invalid(
            "planted pair needs dim ≥ 4 and kernel below dim/2".into(),
        ));
    }
    let g = DMatrix::from_fn(dim, dim, |_, _| {
        Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
    });
    let v = g.qr().q();
    let d: Vec<f64> = (0..dim)
        .map(|i| {
            if i < kernel_dim {
                0.0
            } else {
                let x: f64 = rng.random_range(0.5..2.0);
                if rng.random_bool(0.5) {
                    x
                } else {
                    -x
                }
            }
        })
        .collect();
    let h = &v * diag_matrix(&d) * v.adjoint();
    let n_chi = dim / 2;
    let n_ramp = (dim / 4).max(1);
    let mut chi = vec![0.0; dim];
    let mut t = vec![0.0; dim];
    for i in 0..dim {
        if i < n_chi {
            chi[i] = 1.0;
            t[i] = h[(i, i)].re;
        } else if i < n_chi + n_ramp {
            chi[i] = 1.0 - (i - n_chi + 1) as f64 / (n_ramp + 1) as f64;
            t[i] = 4.0 + rng.random_range(0.0..1.0);
        } else {
            t[i] = 4.0 + rng.random_range(0.0..1.0);
        }
    }
    let chibar: Vec<f64> = chi.iter().map(|c| (1.0 - c * c).sqrt()).collect();
    FeshbachPair::new(h, diag_matrix(&t), &diag_matrix(&chi), &diag_matrix(&chibar), 1e-10)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(x: f64) -> Complex64 {
        Complex64::from(x)
    }

    fn two_by_two(a: f64, d: f64) -> FeshbachPair {
        let h = DMatrix::from_row_slice(2, 2, &[c(0.0), c(a), c(a), c(d)]);
        let t = DMatrix::from_row_slice(2, 2, &[c(0.0), c(0.0), c(0.0), c(d)]);
        let chi = diag_matrix(&[1.0, 0.0]);
        let chibar = diag_matrix(&[0.0, 1.0]);
        FeshbachPair::new(h, t, &chi, &chibar, 1e-10).unwrap()
    }

    #[test]
    fn hand_block_formula() {
        let (a, d) = (0.3, 2.0);
        let p = two_by_two(a, d);
        let f = feshbach_map(&p);
        assert!((f[(0, 0)] - c(-a * a / d)).norm() < 1e-15);
        let (q, _) = q_operators(&p);
        assert!((q[(0, 0)] - c(1.0)).norm() < 1e-15);
        assert!((q[(1, 0)] - c(-a / d)).norm() < 1e-15);
    }

    #[test]
    fn zero_coupling_gives_t() {
        let p = two_by_two(0.0, 2.0);
        let f = feshbach_map(&p);
        assert!((f - &p.t).camax() < 1e-15);
        let (q, _) = q_operators(&p);
        assert!((q - p.chi_matrix()).camax() < 1e-15);
        let rep = isospectral_test(&p, 1e-9);
        assert_eq!((rep.kernel_dim_h, rep.kernel_dim_f), (1, 1));
        assert!(rep.pass);
    }

    #[test]
    fn singular_block_is_refused() {
        let h = DMatrix::from_row_slice(2, 2, &[c(0.0), c(0.1), c(0.1), c(0.0)]);
        let t = DMatrix::zeros(2, 2);
        let chi = diag_matrix(&[1.0, 0.0]);
        let chibar = diag_matrix(&[0.0, 1.0]);
        let e = FeshbachPair::new(h, t, &chi, &chibar, 1e-10).unwrap_err();
        assert!(matches!(e, Error::NotFeshbachPair { .. }));
        assert_eq!(e.exit_code(), 2);
    }
}
