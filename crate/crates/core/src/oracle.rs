//! Exact diagonalization of the fiber Hamiltonian on a truncated Fock space, second-order
//! perturbation theory, dispersion sweeps and effective-mass estimators.

use std::io::Write;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use nalgebra_sparse::{CooMatrix, CsrMatrix};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fockspace::{FockBasis, ModeGrid, SpinFock};
use crate::model::{ModelParams, Vec3, DOWN, UP};

/// Dimension below which the dense solver is used.
pub const DENSE_LIMIT: usize = 2000;

/// Diagonal of `H₀ = P_f²/2m − p·P_f/m + ω₀P_↑ + H_f`.
pub fn free_energy(params: &ModelParams, spin: usize, r: f64, l: &Vec3) -> f64 {
    let up = if spin == UP { params.omega0 } else { 0.0 };
    r + l.norm_squared() / (2.0 * params.m) - params.p.dot(l) / params.m + up
}

/// Triplets of `H(p) = H₀ + λ₀H_I`, with `H_I = Σ_k √w (−i|k|^{1/2} S_k b*_k + i|k|^{1/2} S_k b_k)`.
fn fiber_triplets(params: &ModelParams, basis: &SpinFock) -> Vec<(usize, usize, Complex64)> {
    let fock = &basis.fock;
    let grid = &fock.grid;
    let lam = params.lambda0;
    let rows: Vec<Vec<(usize, usize, Complex64)>> = (0..fock.dim())
        .into_par_iter()
        .map(|s| {
            let st = &fock.states[s];
            let mut out = Vec::new();
            for spin in [UP, DOWN] {
                let e = free_energy(params, spin, st.r, &st.l_vec());
                out.push((basis.idx(spin, s), basis.idx(spin, s), Complex64::from(e)));
            }
            if lam == 0.0 {
                return out;
            }
            for (i, mode) in grid.modes.iter().enumerate() {
                let Some((t, amp)) = fock.create(s, i) else {
                    continue;
                };
                let c = Complex64::new(0.0, -lam * mode.weight.sqrt() * mode.form * amp);
                for a in [UP, DOWN] {
                    for b in [UP, DOWN] {
                        let v = c * mode.coupling[(a, b)];
                        if v.norm() > 0.0 {
                            // creation part and its adjoint
                            out.push((basis.idx(a, t), basis.idx(b, s), v));
                            out.push((basis.idx(b, s), basis.idx(a, t), v.conj()));
                        }
                    }
                }
            }
            out
        })
        .collect();
    rows.into_iter().flatten().collect()
}

/// Sparse fiber Hamiltonian on spin ⊗ Fock.
pub fn build_fiber_hamiltonian(params: &ModelParams, basis: &SpinFock) -> Result<CsrMatrix<Complex64>> {
    let n = basis.dim();
    let mut coo = CooMatrix::new(n, n);
    for (i, j, v) in fiber_triplets(params, basis) {
        if !(v.re.is_finite() && v.im.is_finite()) {
            return Err(Error::NonFinite("fiber Hamiltonian"));
        }
        coo.push(i, j, v);
    }
    Ok(CsrMatrix::from(&coo))
}

/// Dense form of the fiber Hamiltonian.
pub fn fiber_dense(params: &ModelParams, basis: &SpinFock) -> DMatrix<Complex64> {
    let n = basis.dim();
    let mut h = DMatrix::zeros(n, n);
    for (i, j, v) in fiber_triplets(params, basis) {
        h[(i, j)] += v;
    }
    h
}

fn csr_to_dense(h: &CsrMatrix<Complex64>) -> DMatrix<Complex64> {
    let mut d = DMatrix::zeros(h.nrows(), h.ncols());
    for (i, j, v) in h.triplet_iter() {
        d[(i, j)] += *v;
    }
    d
}

fn csr_apply(h: &CsrMatrix<Complex64>, x: &DVector<Complex64>) -> DVector<Complex64> {
    let mut y = DVector::zeros(h.nrows());
    for (i, row) in h.row_iter().enumerate() {
        let mut acc = Complex64::new(0.0, 0.0);
        for (&j, v) in row.col_indices().iter().zip(row.values()) {
            acc += v * x[j];
        }
        y[i] = acc;
    }
    y
}

#[derive(Clone, Debug)]
pub struct GroundState {
    pub energy: f64,
    /// Second-lowest eigenvalue.
    pub next: f64,
    pub vector: DVector<Complex64>,
    pub residual: f64,
}

/// Lowest eigenpair of a Hermitian matrix: Lanczos with full reorthogonalization from a
/// seeded start vector, dense diagonalization below [`DENSE_LIMIT`].
pub fn ground_energy(h: &CsrMatrix<Complex64>, seed: u64) -> Result<GroundState> {
    let n = h.nrows();
    if n == 0 {
        return Err(Error::Invalid("empty matrix".into()));
    }
    let norm = h.values().iter().map(|v| v.norm()).fold(0.0, f64::max).max(1e-300) * (n as f64).sqrt();
    if n < DENSE_LIMIT {
        let d = csr_to_dense(h);
        let eig = d.symmetric_eigen();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let v = eig.eigenvectors.column(order[0]).into_owned();
        let e = eig.eigenvalues[order[0]];
        let residual = (csr_apply(h, &v) - &v * Complex64::from(e)).norm();
        let next = order.get(1).map(|&i| eig.eigenvalues[i]).unwrap_or(f64::INFINITY);
        return Ok(GroundState {
            energy: e,
            next,
            vector: v,
            residual,
        });
    }
    lanczos(h, seed, norm)
}

fn lanczos(h: &CsrMatrix<Complex64>, seed: u64, norm: f64) -> Result<GroundState> {
    let n = h.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = DVector::from_fn(n, |_, _| {
        Complex64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)
    });
    v /= Complex64::from(v.norm());
    let max_k = n.min(400);
    let mut basis: Vec<DVector<Complex64>> = vec![v];
    let mut alpha = Vec::new();
    let mut beta: Vec<f64> = Vec::new();
    let tol = 1e-10 * norm;
    let mut last = (0.0, DVector::zeros(n), f64::INFINITY, f64::INFINITY);
    for k in 0..max_k {
        let mut w = csr_apply(h, &basis[k]);
        let a = basis[k].dotc(&w).re;
        alpha.push(a);
        // full reorthogonalization, twice
        for _ in 0..2 {
            for q in &basis {
                let c = q.dotc(&w);
                w -= q * c;
            }
        }
        let b = w.norm();
        let m = alpha.len();
        let mut tri = DMatrix::<f64>::zeros(m, m);
        for i in 0..m {
            tri[(i, i)] = alpha[i];
            if i + 1 < m {
                tri[(i, i + 1)] = beta[i];
                tri[(i + 1, i)] = beta[i];
            }
        }
        let eig = SymmetricEigen::new(tri);
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&x, &y| eig.eigenvalues[x].total_cmp(&eig.eigenvalues[y]));
        let i0 = order[0];
        let e = eig.eigenvalues[i0];
        let next = order.get(1).map(|&i| eig.eigenvalues[i]).unwrap_or(f64::INFINITY);
        let ritz_res = b * eig.eigenvectors[(m - 1, i0)].abs();
        if ritz_res < tol || b < tol || k + 1 == max_k {
            let mut x = DVector::zeros(n);
            for (j, q) in basis.iter().enumerate() {
                x += q * Complex64::from(eig.eigenvectors[(j, i0)]);
            }
            let xn = x.norm();
            x /= Complex64::from(xn);
            let residual = (csr_apply(h, &x) - &x * Complex64::from(e)).norm();
            last = (e, x, residual, next);
            if residual < tol || b < tol {
                break;
            }
            if k + 1 == max_k {
                return Err(Error::SolverNonConvergence { residual });
            }
        }
        beta.push(b);
        basis.push(w / Complex64::from(b));
    }
    let (energy, vector, residual, next) = last;
    Ok(GroundState {
        energy,
        next,
        vector,
        residual,
    })
}

/// Spin ⊗ Fock basis of the oracle: `n_max` photons, no energy cap.
pub fn oracle_basis(grid: Arc<ModeGrid>, n_max: usize) -> SpinFock {
    SpinFock::new(FockBasis::new(grid, n_max, None))
}

/// Rayleigh–Schrödinger second order: `−λ₀² Σ_k w|k| Σ_σ |⟨σ|S_k|↓⟩|² / (E_σ + |k| + k²/2m − p·k/m)`.
pub fn pt2_energy(params: &ModelParams, grid: &ModeGrid) -> f64 {
    let mut e = 0.0;
    for mode in &grid.modes {
        for spin in [UP, DOWN] {
            let c = mode.coupling[(spin, DOWN)].norm_sqr();
            if c == 0.0 {
                continue;
            }
            let denom = free_energy(params, spin, mode.omega, &mode.k);
            assert!(denom > 0.0, "vanishing second-order denominator");
            e -= mode.weight * mode.form * mode.form * c / denom;
        }
    }
    params.lambda0 * params.lambda0 * e
}

#[derive(Clone, Debug, Serialize)]
pub struct DispersionRecord {
    pub p: f64,
    pub e_oracle: f64,
    pub e_rg: Option<f64>,
    pub e_pt2: f64,
    pub gap: f64,
    pub residual: f64,
}

/// Oracle energies along the first momentum axis. `rg` supplies the RG energy where available.
pub fn dispersion_sweep<F>(params: &ModelParams, ps: &[f64], rg: F) -> Result<Vec<DispersionRecord>>
where
    F: Fn(&ModelParams) -> Option<f64> + Sync,
{
    let grid = Arc::new(ModeGrid::new(params)?);
    let basis = oracle_basis(grid.clone(), params.n_max);
    ps.par_iter()
        .map(|&p| {
            let prm = params.with_p(Vec3::new(p, 0.0, 0.0));
            let h = build_fiber_hamiltonian(&prm, &basis)?;
            let gs = ground_energy(&h, 7)?;
            Ok(DispersionRecord {
                p,
                e_oracle: gs.energy,
                e_rg: rg(&prm),
                e_pt2: pt2_energy(&prm, &grid),
                gap: gs.next - gs.energy,
                residual: gs.residual,
            })
        })
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct MassEstimate {
    /// From the central second difference of `E(p) + p²/2m` at 0.
    pub second_difference: f64,
    /// From the p² coefficient of an even degree-6 least-squares fit.
    pub fit: f64,
    /// Coefficients of 1, p², p⁴, p⁶ of the fit to `E(p)`.
    pub coefficients: [f64; 4],
    /// Largest fit residual of `E(p)`.
    pub fit_residual: f64,
    /// max − min of `E(p)` on the sweep.
    pub spread: f64,
    /// |m₁ − m₂| / m₂.
    pub relative_disagreement: f64,
}

/// Effective mass of the full dispersion `E(p) + p²/2m` from a sweep symmetric about 0.
pub fn effective_mass(records: &[DispersionRecord], mass: f64) -> Result<MassEstimate> {
    if records.len() < 5 {
        return Err(Error::Invalid("need at least 5 momenta".into()));
    }
    let mut rec: Vec<&DispersionRecord> = records.iter().collect();
    rec.sort_by(|a, b| a.p.total_cmp(&b.p));
    let scale = rec.iter().map(|r| r.p.abs()).fold(0.0, f64::max);
    for (a, b) in rec.iter().zip(rec.iter().rev()) {
        if (a.p + b.p).abs() > 1e-12 * scale {
            return Err(Error::Invalid("momentum grid is not symmetric about 0".into()));
        }
    }
    let mid = rec.len() / 2;
    if rec.len() % 2 == 0 || rec[mid].p.abs() > 1e-12 * scale {
        return Err(Error::Invalid("momentum grid must contain 0".into()));
    }
    let full = |r: &DispersionRecord| r.e_oracle + r.p * r.p / (2.0 * mass);
    let h = rec[mid + 1].p;
    let d2 = (full(rec[mid + 1]) - 2.0 * full(rec[mid]) + full(rec[mid - 1])) / (h * h);
    let n = rec.len();
    let a = DMatrix::from_fn(n, 4, |i, j| (rec[i].p / scale).powi(2 * j as i32));
    let y = DVector::from_fn(n, |i, _| rec[i].e_oracle);
    let svd = a.clone().svd(true, true);
    let c = svd
        .solve(&y, 1e-14)
        .map_err(|e| Error::Invalid(format!("least squares failed: {e}")))?;
    let fit_residual = (&a * &c - &y).amax();
    let coefficients = [c[0], c[1] / scale.powi(2), c[2] / scale.powi(4), c[3] / scale.powi(6)];
    let c2_full = coefficients[1] + 0.5 / mass;
    let m1 = 1.0 / d2;
    let m2 = 1.0 / (2.0 * c2_full);
    let emax = rec.iter().map(|r| r.e_oracle).fold(f64::NEG_INFINITY, f64::max);
    let emin = rec.iter().map(|r| r.e_oracle).fold(f64::INFINITY, f64::min);
    Ok(MassEstimate {
        second_difference: m1,
        fit: m2,
        coefficients,
        fit_residual,
        spread: emax - emin,
        relative_disagreement: ((m1 - m2) / m2).abs(),
    })
}

/// CSV with the fixed column order `p,E_oracle,E_rg,E_pt2,gap,residual,m_eff`.
pub fn write_csv<W: Write>(records: &[DispersionRecord], m_eff: Option<f64>, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["p", "E_oracle", "E_rg", "E_pt2", "gap", "residual", "m_eff"])?;
    for r in records {
        w.write_record([
            format!("{:.12e}", r.p),
            format!("{:.15e}", r.e_oracle),
            r.e_rg.map(|e| format!("{e:.15e}")).unwrap_or_default(),
            format!("{:.15e}", r.e_pt2),
            format!("{:.6e}", r.gap),
            format!("{:.3e}", r.residual),
            m_eff.map(|m| format!("{m:.10e}")).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
