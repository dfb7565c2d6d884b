//! Independent reference computations shared by the integration tests.
#![allow(dead_code)]

use dipole_rg::feshbach::FeshbachPair;
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

pub type Mat = DMatrix<Complex64>;

pub fn diag(d: &[f64]) -> Mat {
    Mat::from_diagonal(&DVector::from_iterator(d.len(), d.iter().map(|&x| Complex64::from(x))))
}

fn restrict(m: &Mat, idx: &[usize]) -> Mat {
    Mat::from_fn(idx.len(), idx.len(), |i, j| m[(idx[i], idx[j])])
}

fn extend(b: &Mat, idx: &[usize], n: usize) -> Mat {
    let mut out = Mat::zeros(n, n);
    for (i, &a) in idx.iter().enumerate() {
        for (j, &c) in idx.iter().enumerate() {
            out[(a, c)] = b[(i, j)];
        }
    }
    out
}

fn inverse_on(m: &Mat, idx: &[usize]) -> Mat {
    let inv = restrict(m, idx).try_inverse().expect("invertible block");
    extend(&inv, idx, m.nrows())
}

fn support(d: &[f64]) -> Vec<usize> {
    (0..d.len()).filter(|&i| d[i] != 0.0).collect()
}

/// Orthonormal basis of the numerical null space (singular values below `tol`).
pub fn null_vectors(m: &Mat, tol: f64) -> Vec<DVector<Complex64>> {
    let svd = m.clone().svd(false, true);
    let vt = svd.v_t.unwrap();
    (0..svd.singular_values.len())
        .filter(|&i| svd.singular_values[i] < tol)
        .map(|i| vt.row(i).adjoint())
        .collect()
}

/// Residuals of the isospectrality statements for `(H − z, T − z)`, recomputed from scratch.
#[derive(Debug, Clone, Copy, Default)]
pub struct FeshbachResiduals {
    pub kernel_dim_h: usize,
    pub kernel_dim_f: usize,
    /// max ‖F χ v‖ / (‖H‖ ‖v‖) over ker H.
    pub chi_map: f64,
    /// max ‖Q χ v − v‖ / ‖v‖ over ker H.
    pub q_inverse: f64,
    /// max ‖H Q u‖ / (‖H‖ ‖u‖) over ker F.
    pub q_map: f64,
    /// ‖(H − z)^{-1} − (Q F^{-1} Q♯ + χ̄ H_χ̄^{-1} χ̄)‖ / ‖(H − z)^{-1}‖ with the shifted pair.
    pub resolvent: f64,
}

fn feshbach_parts(h: &Mat, t: &Mat, chi: &[f64], chibar: &[f64]) -> (Mat, Mat, Mat, Mat) {
    let n = h.nrows();
    let c = diag(chi);
    let cb = diag(chibar);
    let w = h - t;
    let hbar = t + &cb * &w * &cb;
    let hbar_inv = inverse_on(&hbar, &support(chibar));
    let f = t + &c * &w * &c - &c * &w * &cb * &hbar_inv * &cb * &w * &c;
    let q = &c - &cb * &hbar_inv * &cb * &w * &c;
    let qs = &c - &c * &w * &cb * &hbar_inv * &cb;
    assert_eq!(f.nrows(), n);
    (f, q, qs, &cb * hbar_inv * &cb)
}

pub fn feshbach_residuals(pair: &FeshbachPair, shift: Complex64) -> FeshbachResiduals {
    let n = pair.h.nrows();
    let hnorm = pair.h.clone().singular_values().max();
    let tol = 1e-8 * hnorm;
    let (f, q, _, _) = feshbach_parts(&pair.h, &pair.t, &pair.chi, &pair.chibar);
    let sc = support(&pair.chi);
    let ker_h = null_vectors(&pair.h, tol);
    let ker_f = null_vectors(&restrict(&f, &sc), tol);
    let c = diag(&pair.chi);
    let mut out = FeshbachResiduals {
        kernel_dim_h: ker_h.len(),
        kernel_dim_f: ker_f.len(),
        ..Default::default()
    };
    for v in &ker_h {
        out.chi_map = out.chi_map.max((&f * (&c * v)).norm() / (hnorm * v.norm()));
        out.q_inverse = out.q_inverse.max((&q * (&c * v) - v).norm() / v.norm());
    }
    for u in &ker_f {
        let mut full = DVector::zeros(n);
        for (i, &a) in sc.iter().enumerate() {
            full[a] = u[i];
        }
        out.q_map = out.q_map.max((&pair.h * (&q * &full)).norm() / (hnorm * full.norm()));
    }
    let id = Mat::identity(n, n);
    let hz = &pair.h - &id * shift;
    let tz = &pair.t - &id * shift;
    let (fz, qz, qsz, bar) = feshbach_parts(&hz, &tz, &pair.chi, &pair.chibar);
    let finv = inverse_on(&fz, &sc);
    let hinv = hz.try_inverse().expect("shifted H invertible");
    let rhs = qz * finv * qsz + bar;
    out.resolvent = (&hinv - rhs).norm() / hinv.norm();
    out
}

/// Largest singular value.
pub fn operator_norm(m: &Mat) -> f64 {
    m.clone().singular_values().max()
}

use std::sync::Arc;

use dipole_rg::fockspace::{dilation, FockBasis, ModeGrid};
use dipole_rg::kernels::{assemble_operator, norm_sharp, wick_monomial, Kernel, KernelSequence, RtGrid};
use dipole_rg::model::{sigma_x, GridSpec, ModelParams, Vec3};
use dipole_rg::rgflow::scale_transform;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_complex<R: Rng>(rng: &mut R) -> Complex64 {
    Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
}

fn digits(mut idx: usize, nk: usize, len: usize) -> Vec<usize> {
    let mut d = vec![0; len];
    for x in d.iter_mut().rev() {
        *x = idx % nk;
        idx /= nk;
    }
    d
}

/// Adds random kernels `w_{m,n}(r, l, K) = Π|k|^{1/2}·u` with `u` drawn per sample (no outer cutoff).
pub fn add_random_kernels(seq: &mut KernelSequence, kinds: &[(usize, usize)], rng: &mut ChaCha8Rng) {
    let nk = seq.grid.len();
    for &(m, n) in kinds {
        let mut k = Kernel::zeros(m, n, &seq.rt, nk, false);
        let size = k.tuple_count(nk);
        for (i, v) in k.values.iter_mut().enumerate() {
            let w: f64 = digits(i % size, nk, m + n)
                .iter()
                .map(|&d| seq.grid.modes[d].omega.sqrt())
                .product();
            *v = random_complex(rng) * w;
        }
        // at r = 0 every t-sample describes the same point l = 0
        let c = seq.rt.t_center();
        for it in 0..seq.rt.t_points() {
            for j in 0..size {
                k.values[it * size + j] = k.values[c * size + j];
            }
        }
        seq.insert(k).unwrap();
    }
}

/// Node-level check of `s_ρ(w)_{m,n}(r, l, K) = ρ^{3(m+n)/2−1} w(ρr, ρl, ρK)` at every node and
/// tuple whose image lies on the grids; returns the largest deviation relative to the largest value.
pub fn scale_transform_node_deviation(seq: &KernelSequence, rho: f64) -> f64 {
    let s = scale_transform(seq, rho).unwrap();
    let grid = &seq.grid;
    let rt = &seq.rt;
    let nk = grid.len();
    let steps = grid.scale_steps(rho).unwrap();
    let r_steps = (rho.ln() / rt.rho.ln()).round() as usize;
    let mut dev: f64 = 0.0;
    let mut scale: f64 = 0.0;
    for ((m, n), k) in seq.iter() {
        let (m, n) = (*m, *n);
        let sk = s.get(m, n).unwrap();
        let size = k.tuple_count(nk);
        let pref = rho.powf(1.5 * (m + n) as f64 - 1.0);
        for kidx in 0..size {
            let modes = digits(kidx, nk, m + n);
            let scaled: Option<Vec<usize>> = modes.iter().map(|&i| grid.scaled_index(i, steps)).collect();
            for pt in 0..rt.len() {
                let got = sk.values[pt * size + kidx];
                let Some(scaled) = &scaled else {
                    dev = dev.max(got.norm());
                    continue;
                };
                let (ir, _) = rt.split(pt);
                if rt.scaled_r_index(ir, r_steps).is_none() {
                    continue;
                }
                let (r, l) = rt.point(pt);
                let expect = seq.eval_modes(m, n, rho * r, &(l * rho), &scaled[..m], &scaled[m..]) * pref;
                dev = dev.max((got - expect).norm());
                scale = scale.max(expect.norm());
            }
        }
    }
    dev / scale.max(f64::MIN_POSITIVE)
}

/// `H(s_ρ w)` against `ρ^{-1} Γ_ρ H(w) Γ_ρ*` on the range of `Γ_ρ Γ_ρ*`, relative to the largest entry.
pub fn gamma_conjugation_deviation(seq: &KernelSequence, basis: &FockBasis, rho: f64) -> f64 {
    let s = scale_transform(seq, rho).unwrap();
    let lhs = assemble_operator(&s, basis).unwrap();
    let g = dilation(basis, rho).unwrap();
    let h = assemble_operator(seq, basis).unwrap();
    let rhs = &g * h * g.adjoint() / Complex64::from(rho);
    let image: Vec<usize> = (0..basis.dim())
        .filter(|&i| g.row(i).iter().any(|v| v.norm() > 0.0))
        .collect();
    assert!(image.len() > 1);
    let mut dev: f64 = 0.0;
    let mut scale: f64 = 0.0;
    for &i in &image {
        for &j in &image {
            dev = dev.max((lhs[(i, j)] - rhs[(i, j)]).norm());
            scale = scale.max(rhs[(i, j)].norm());
        }
    }
    dev / scale
}

/// `(m, n, ‖s_ρ w‖♯, ρ^{2(m+n)−1}‖w‖♯)` for every stored kernel.
pub fn scaled_norms(seq: &KernelSequence, rho: f64) -> Vec<(usize, usize, f64, f64)> {
    let s = scale_transform(seq, rho).unwrap();
    seq.iter()
        .map(|((m, n), k)| {
            let after = norm_sharp(&s, s.get(*m, *n).unwrap()).unwrap();
            let before = norm_sharp(seq, k).unwrap();
            (*m, *n, after, rho.powi(2 * (m + n) as i32 - 1) * before)
        })
        .collect()
}

/// The coarse d = 3 setting of the Wick-monomial norm bound: one level, 6 directions, 2 radial nodes.
pub fn coarse_d3() -> (Arc<ModeGrid>, Arc<RtGrid>, FockBasis) {
    let p = ModelParams {
        dim: 3,
        grid: GridSpec {
            levels: 1,
            radial_nodes: 2,
            directions: 6,
            ..Default::default()
        },
        ..Default::default()
    };
    let grid = Arc::new(ModeGrid::new(&p).unwrap());
    let rt = Arc::new(RtGrid::build(3, p.rho, 2, 2, 3).unwrap());
    let basis = FockBasis::new(grid.clone(), 3, Some(1.0));
    (grid, rt, basis)
}

/// One draw of the norm bound: `(m, n, ‖W_{m,n}‖, (m!n!)^{-1/2}(8π)^{(m+n)/2}·sup|u|)`, where the
/// sup runs over every stored sample (it dominates the interpolated kernel everywhere).
pub fn norm_bound_draw(
    grid: &Arc<ModeGrid>,
    rt: &Arc<RtGrid>,
    basis: &FockBasis,
    m: usize,
    n: usize,
    seed: u64,
) -> (f64, f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seq = KernelSequence::from_w00(
        grid.clone(),
        rt.clone(),
        Vec3::zeros(),
        Complex64::new(0.0, 0.0),
        |_, _| Complex64::new(0.0, 0.0),
    );
    add_random_kernels(&mut seq, &[(m, n)], &mut rng);
    let k = seq.get(m, n).unwrap();
    let nk = grid.len();
    let size = k.tuple_count(nk);
    let mut sup: f64 = 0.0;
    for (i, v) in k.values.iter().enumerate() {
        let w: f64 = digits(i % size, nk, m + n)
            .iter()
            .map(|&d| grid.modes[d].omega.sqrt())
            .product();
        sup = sup.max(v.norm() / w);
    }
    let lib = dipole_rg::kernels::norm_half(&seq, k);
    assert!(lib <= sup * (1.0 + 1e-12));
    let op = wick_monomial(basis, m, n, |r, l, cm, am| seq.eval_modes(m, n, r, l, cm, am)).unwrap();
    let fact = |x: usize| (1..=x).product::<usize>() as f64;
    let bound = (fact(m) * fact(n)).powf(-0.5) * (8.0 * std::f64::consts::PI).powf((m + n) as f64 / 2.0) * sup;
    (operator_norm(&op), bound, lib)
}

/// A hand-built two-mode grid for small algebraic checks.
pub fn two_mode_grid() -> Arc<ModeGrid> {
    let momenta = [(Vec3::new(0.3, 0.0, 0.0), 0.7), (Vec3::new(-0.55, 0.0, 0.0), 0.4)];
    Arc::new(ModeGrid::from_momenta(1, &momenta, sigma_x(), 1.0))
}
