mod common;

use std::sync::Arc;

use common::{
    add_random_kernels, coarse_d3, gamma_conjugation_deviation, norm_bound_draw, scale_transform_node_deviation,
    scaled_norms,
};
use dipole_rg::firststep::initial_kernels;
use dipole_rg::fockspace::{FockBasis, ModeGrid};
use dipole_rg::kernels::{KernelSequence, RtGrid};
use dipole_rg::model::{ModelParams, SpinCoupling, Vec3};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn synthetic(seed: u64) -> KernelSequence {
    let p = ModelParams::default();
    let grid = Arc::new(ModeGrid::new(&p).unwrap());
    let rt = Arc::new(RtGrid::new(&p).unwrap());
    let mut seq = KernelSequence::from_w00(grid, rt, Vec3::zeros(), Complex64::new(0.0, 0.0), |r, l| {
        Complex64::new(r + 0.3 * r * r - 0.2 * l.x, 0.1 * l.x * l.x)
    });
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    add_random_kernels(&mut seq, &[(1, 0), (0, 1), (1, 1), (2, 0), (0, 2)], &mut rng);
    seq
}

fn first_step_sequence() -> KernelSequence {
    let mut p = ModelParams::default();
    p.coupling = SpinCoupling::SigmaXZ;
    p.lambda0 = 0.002;
    initial_kernels(&p, Complex64::new(0.01, 0.0)).unwrap()
}

#[test]
fn gamma_conjugation_is_grid_exact() {
    let seq = synthetic(4);
    let basis = FockBasis::reduced(seq.grid.clone(), 2);
    let dev = gamma_conjugation_deviation(&seq, &basis, 0.25);
    assert!(dev <= 1e-13, "{dev:e}");
}

#[test]
fn scale_transform_is_exact_on_nodes() {
    let dev = scale_transform_node_deviation(&synthetic(5), 0.25);
    assert!(dev <= 1e-13, "{dev:e}");
    let seq = first_step_sequence();
    assert!(seq.get(1, 0).is_some() && seq.get(1, 0).unwrap().chi_outer);
    let dev = scale_transform_node_deviation(&seq, 0.25);
    assert!(dev <= 1e-13, "{dev:e}");
}

#[test]
fn scale_transform_contracts_norms() {
    for seq in [synthetic(6), first_step_sequence()] {
        for (m, n, after, bound) in scaled_norms(&seq, 0.25) {
            assert!(after <= bound * (1.0 + 1e-12), "({m}, {n}): {after:e} > {bound:e}");
        }
    }
}

#[test]
fn wick_monomial_norm_bound() {
    let (grid, rt, basis) = coarse_d3();
    assert_eq!(grid.len(), 24);
    let kinds = [(1, 0), (0, 1), (1, 1), (2, 0), (0, 2)];
    for (i, &(m, n)) in kinds.iter().enumerate() {
        let (norm, bound, half) = norm_bound_draw(&grid, &rt, &basis, m, n, 100 + i as u64);
        assert!(norm > 0.0 && half > 0.0);
        assert!(norm <= bound, "({m}, {n}): {norm} > {bound}");
    }
}
