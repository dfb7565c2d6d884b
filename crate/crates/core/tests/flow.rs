use std::sync::{Arc, OnceLock};

use dipole_rg::feshbach::{feshbach_map, FeshbachPair};
use dipole_rg::firststep::{initial_kernels_on, lambda_critical_estimate};
use dipole_rg::fockspace::{dilation, FockBasis, ModeGrid, SpinFock};
use dipole_rg::kernels::{assemble_operator, RtGrid};
use dipole_rg::model::{chi, ModelParams, Vec3};
use dipole_rg::oracle::{build_fiber_hamiltonian, ground_energy, oracle_basis};
use dipole_rg::rgflow::{ground_state, renormalize_at, run_flow, window, FlowOptions, FlowResult};
use nalgebra::DMatrix;
use num_complex::Complex64;

fn small() -> ModelParams {
    let mut p = ModelParams::default();
    p.grid.levels = 4;
    p
}

fn lambda_c() -> f64 {
    static L: OnceLock<f64> = OnceLock::new();
    *L.get_or_init(|| lambda_critical_estimate(&small()).unwrap().lambda_c)
}

fn weak() -> ModelParams {
    small().with_lambda(lambda_c() / 10.0)
}

fn weak_flow() -> &'static FlowResult {
    static F: OnceLock<FlowResult> = OnceLock::new();
    F.get_or_init(|| {
        let p = weak();
        run_flow(&p, &FlowOptions::new(&p)).unwrap()
    })
}

#[test]
fn free_flow_is_exact_at_finite_momentum() {
    for px in [0.0, 0.3, -0.3] {
        let p = small().with_p(Vec3::new(px, 0.0, 0.0));
        let mut opt = FlowOptions::new(&p);
        opt.min_iter = 30;
        let f = run_flow(&p, &opt).unwrap();
        assert!(f.converged);
        assert!(f.z_inf.abs() <= 1e-10, "{}", f.z_inf);
        assert!((f.alpha - 1.0).abs() <= 1e-8);
        assert!((f.beta + p.p / p.m).norm() <= 1e-8, "{:?}", f.beta);
        // the ρ₀l²/2m term contracts by ρ per step until it reaches the bottom r-cell, where
        // linear interpolation leaves a marginal remainder of order ρ₀·r₁
        let g: Vec<f64> = f.history.iter().map(|s| s.ledger.gamma).collect();
        assert!((g[0] - p.rho0 / (2.0 * p.m) * 2.0).abs() < 1e-12, "{g:?}");
        for n in 1..6 {
            assert!((g[n] / g[n - 1] - p.rho).abs() < 0.02, "{g:?}");
        }
        assert!(*g.last().unwrap() < 1e-5, "{g:?}");
    }
}

#[test]
fn one_step_matches_matrix_feshbach_map() {
    let p = weak();
    let grid = Arc::new(ModeGrid::new(&p).unwrap());
    let rt = Arc::new(RtGrid::new(&p).unwrap());
    let w0 = initial_kernels_on(&p, &grid, &rt, Complex64::new(0.0, 0.0)).unwrap();
    let w1 = renormalize_at(&p, &w0, 0.0).unwrap();
    let basis = FockBasis::reduced(grid, 3);
    let n = basis.dim();
    let h = assemble_operator(&w0, &basis).unwrap();
    let mut t = DMatrix::zeros(n, n);
    let mut c = DMatrix::zeros(n, n);
    let mut cb = DMatrix::zeros(n, n);
    for (s, st) in basis.states.iter().enumerate() {
        t[(s, s)] = w0.w00_at(st.r, &st.l_vec());
        let x = chi(st.r, p.rho);
        c[(s, s)] = Complex64::from(x);
        cb[(s, s)] = Complex64::from((1.0 - x * x).sqrt());
    }
    let pair = FeshbachPair::new(h, t, &c, &cb, p.margin_floor).unwrap();
    let g = dilation(&basis, p.rho).unwrap();
    let rhs = &g * feshbach_map(&pair) * g.adjoint() / Complex64::from(p.rho);
    let lhs = assemble_operator(&w1, &basis).unwrap();
    let image: Vec<usize> = (0..n).filter(|&i| g.row(i).iter().any(|v| v.norm() > 0.0)).collect();
    let (mut dev, mut off) = (0.0f64, 0.0f64);
    for &i in &image {
        for &j in &image {
            dev = dev.max((lhs[(i, j)] - rhs[(i, j)]).norm());
            if i != j {
                off = off.max(rhs[(i, j)].norm());
            }
        }
    }
    assert!(off > 0.0);
    assert!(dev <= 1e-6 * off, "dev {dev:e}, off-diagonal scale {off:e}");
}

#[test]
fn weak_coupling_flow_matches_oracle() {
    let p = weak();
    let f = weak_flow();
    assert!(f.converged);
    let basis = oracle_basis(Arc::new(ModeGrid::new(&p).unwrap()), p.n_max);
    let e = ground_energy(&build_fiber_hamiltonian(&p, &basis).unwrap(), 7)
        .unwrap()
        .energy;
    assert!(e < 0.0);
    let tol = (1e-3 * e.abs()).max(1e-8 * p.m);
    assert!((f.z_inf - e).abs() <= tol, "{} vs {e}", f.z_inf);
}

#[test]
fn energy_is_even_in_momentum() {
    let base = weak();
    let z = |px: f64| {
        let p = base.with_p(Vec3::new(px, 0.0, 0.0));
        run_flow(&p, &FlowOptions::new(&p)).unwrap().z_inf
    };
    let (a, b) = (z(0.2), z(-0.2));
    assert!((a - b).abs() <= 1e-13 * a.abs(), "{a} {b}");
}

#[test]
fn composed_inverses_forget_the_seed() {
    let p = weak();
    let f = weak_flow();
    let w = window(&p);
    let mut spreads = Vec::new();
    for n in 1..=f.relevant.len() {
        let a = f.e0n_from(n, -0.5 * w, &p).unwrap();
        let b = f.e0n_from(n, 0.5 * w, &p).unwrap();
        spreads.push((a - b).abs());
    }
    // each inverse rescaling contracts the window by about ρ
    for pair in spreads.windows(2) {
        assert!(pair[1] <= 0.3 * pair[0], "{spreads:?}");
    }
    let last = f.e0n_from(f.relevant.len(), 0.0, &p).unwrap();
    assert!((last - f.e0_inf).abs() <= 1e-14);
    assert!((f.z_inf - p.rho0 * f.e0_inf).abs() <= 1e-18);
}

#[test]
fn ground_state_reconstruction() {
    let free = small();
    let grid = Arc::new(ModeGrid::new(&free).unwrap());
    let full = SpinFock::new(FockBasis::new(grid.clone(), 3, None));
    let reduced = FockBasis::reduced(grid, 3);
    let f0 = run_flow(&free, &FlowOptions::new(&free)).unwrap();
    let (psi, rep) = ground_state(&free, &f0, &full, &reduced).unwrap();
    assert_eq!(rep.overlap, 1.0);
    assert_eq!(rep.residual, 0.0);
    assert_eq!(psi.iter().filter(|v| v.norm() > 0.0).count(), 1);

    let p = weak();
    let (_, rep) = ground_state(&p, weak_flow(), &full, &reduced).unwrap();
    assert!(rep.overlap > 0.9, "{rep:?}");
    assert!(rep.residual <= 1e-8, "{rep:?}");
}

#[test]
fn contraction_along_the_flow() {
    let f = weak_flow();
    for s in f.history.iter().skip(1) {
        if let Some(c) = s.contraction {
            assert!(c <= 0.75, "{s:?}");
        }
    }
    for s in &f.history {
        assert!(s.ledger.eps.is_finite() && s.ledger.gamma.is_finite());
    }
}
