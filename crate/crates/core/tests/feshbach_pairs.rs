mod common;

use common::{diag, feshbach_residuals, Mat};
use dipole_rg::error::Error;
use dipole_rg::feshbach::{feshbach_map, isospectral_test, planted_pair, q_operators, FeshbachPair};
use num_complex::Complex64;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SHIFT: Complex64 = Complex64::new(0.0, 0.1);

#[test]
fn two_hundred_planted_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for i in 0..200 {
        let dim = 4 + 2 * (i % 11);
        let kernel_dim = i % 3 % (dim / 2);
        let pair = planted_pair(&mut rng, dim, kernel_dim).unwrap();
        let r = feshbach_residuals(&pair, SHIFT);
        assert_eq!(r.kernel_dim_h, kernel_dim, "pair {i}");
        assert_eq!(r.kernel_dim_f, kernel_dim, "pair {i}");
        assert!(
            r.chi_map <= 1e-9 && r.q_inverse <= 1e-9 && r.q_map <= 1e-9,
            "pair {i}: {r:?}"
        );
        assert!(r.resolvent <= 1e-9, "pair {i}: {r:?}");
        let lib = isospectral_test(&pair, 1e-9);
        assert!(lib.pass, "pair {i}: {lib:?}");
        assert_eq!(lib.kernel_dim_h, kernel_dim);
    }
}

#[test]
fn library_map_matches_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let pair = planted_pair(&mut rng, 12, 1).unwrap();
    let c = diag(&pair.chi);
    let cb = diag(&pair.chibar);
    let w = &pair.h - &pair.t;
    let hbar = &pair.t + &cb * &w * &cb;
    let bar: Vec<usize> = (0..12).filter(|&i| pair.chibar[i] != 0.0).collect();
    let block = Mat::from_fn(bar.len(), bar.len(), |i, j| hbar[(bar[i], bar[j])]);
    let inv = block.try_inverse().unwrap();
    let mut hbar_inv = Mat::zeros(12, 12);
    for (i, &a) in bar.iter().enumerate() {
        for (j, &b) in bar.iter().enumerate() {
            hbar_inv[(a, b)] = inv[(i, j)];
        }
    }
    let f = &pair.t + &c * &w * &c - &c * &w * &cb * &hbar_inv * &cb * &w * &c;
    assert!((feshbach_map(&pair) - f).camax() < 1e-12);
    let (q, qs) = q_operators(&pair);
    // for Hermitian H and real χ, Q♯ = Q*
    let dev = (qs - q.adjoint()).camax() / q.camax();
    assert!(dev < 1e-10, "{dev}");
}

#[test]
fn sharp_partition_reduces_to_schur_complement() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let base = planted_pair(&mut rng, 8, 0).unwrap();
    let chi: Vec<f64> = (0..8).map(|i| if i < 4 { 1.0 } else { 0.0 }).collect();
    let chibar: Vec<f64> = chi.iter().map(|c| 1.0 - c).collect();
    let pair = FeshbachPair::new(base.h.clone(), base.t.clone(), &diag(&chi), &diag(&chibar), 1e-10).unwrap();
    let h = &pair.h;
    let a = h.view((0, 0), (4, 4)).into_owned();
    let b = h.view((0, 4), (4, 4)).into_owned();
    let cc = h.view((4, 0), (4, 4)).into_owned();
    let d = h.view((4, 4), (4, 4)).into_owned();
    let schur = a - b * d.try_inverse().unwrap() * cc;
    let f = feshbach_map(&pair);
    assert!((f.view((0, 0), (4, 4)).into_owned() - schur).camax() < 1e-12);
}

#[test]
fn invalid_partitions_are_refused() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let base = planted_pair(&mut rng, 8, 0).unwrap();
    let chi = diag(&[1.0; 8]);
    let half = diag(&[0.5; 8]);
    assert!(FeshbachPair::new(base.h.clone(), base.t.clone(), &chi, &half, 1e-10).is_err());
    let zero_t = Mat::zeros(8, 8);
    let c: Vec<f64> = (0..8).map(|i| if i < 4 { 1.0 } else { 0.0 }).collect();
    let cb: Vec<f64> = c.iter().map(|x| 1.0 - x).collect();
    let err = FeshbachPair::new(base.h, zero_t + diag(&c), &diag(&c), &diag(&cb), 1e-10).unwrap_err();
    assert!(matches!(err, Error::NotFeshbachPair { .. }));
    assert_eq!(err.exit_code(), 2);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn isospectrality_holds(seed in any::<u64>(), half in 2usize..12, kernel in 0usize..4) {
        let dim = 2 * half;
        let kernel_dim = kernel.min(half - 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pair = planted_pair(&mut rng, dim, kernel_dim).unwrap();
        let r = feshbach_residuals(&pair, SHIFT);
        prop_assert_eq!(r.kernel_dim_h, kernel_dim);
        prop_assert_eq!(r.kernel_dim_f, kernel_dim);
        prop_assert!(r.chi_map <= 1e-9 && r.q_inverse <= 1e-9 && r.q_map <= 1e-9);
        prop_assert!(r.resolvent <= 1e-9);
    }
}
