//! Acceptance criteria: one PASS/FAIL line per criterion, nonzero exit on any failure.

mod common;

use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use common::{
    add_random_kernels, coarse_d3, feshbach_residuals, gamma_conjugation_deviation, norm_bound_draw,
    scale_transform_node_deviation, scaled_norms,
};
use dipole_rg::cli::wick_report;
use dipole_rg::feshbach::{isospectral_test, planted_pair};
use dipole_rg::firststep::lambda_critical_estimate;
use dipole_rg::fockspace::{FockBasis, ModeGrid};
use dipole_rg::kernels::{KernelSequence, RtGrid};
use dipole_rg::model::{ModelParams, Vec3};
use dipole_rg::oracle::{
    build_fiber_hamiltonian, dispersion_sweep, effective_mass, ground_energy, oracle_basis, pt2_energy,
};
use dipole_rg::rgflow::{run_flow, FlowOptions, FlowResult};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn oracle_energy(p: &ModelParams) -> f64 {
    let basis = oracle_basis(Arc::new(ModeGrid::new(p).unwrap()), p.n_max);
    ground_energy(&build_fiber_hamiltonian(p, &basis).unwrap(), 7)
        .unwrap()
        .energy
}

fn free_flow() -> Outcome {
    let start = Instant::now();
    let mut worst = (0.0f64, 0.0f64, 0.0f64);
    let mut converged = true;
    for px in [0.0, 0.3, -0.3] {
        let p = ModelParams::default().with_p(Vec3::new(px, 0.0, 0.0)).with_lambda(0.0);
        let mut opt = FlowOptions::new(&p);
        opt.min_iter = 30;
        let f = run_flow(&p, &opt).unwrap();
        converged &= f.converged;
        worst.0 = worst.0.max(f.z_inf.abs());
        worst.1 = worst.1.max((f.alpha - 1.0).abs());
        worst.2 = worst.2.max((f.beta + p.p / p.m).norm());
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        converged && worst.0 <= 1e-10 && worst.1 <= 1e-8 && worst.2 <= 1e-8 && secs < 10.0,
        format!(
            "|z_inf| {:e}, |alpha-1| {:e}, |beta+p/m| {:e}, {secs:.1} s",
            worst.0, worst.1, worst.2
        ),
    )
}

fn wick() -> Outcome {
    let start = Instant::now();
    let r = wick_report(7).unwrap();
    let secs = start.elapsed().as_secs_f64();
    outcome(
        r.sequences > 0 && r.max_deviation <= 1e-11 && secs < 60.0,
        format!(
            "{} sequences, max deviation {:e}, {secs:.1} s",
            r.sequences, r.max_deviation
        ),
    )
}

fn feshbach() -> Outcome {
    let start = Instant::now();
    let shift = Complex64::new(0.0, 0.1);
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    let mut pass = true;
    for i in 0..200 {
        let dim = 4 + 2 * (i % 11);
        let kernel_dim = i % 3 % (dim / 2);
        let pair = planted_pair(&mut rng, dim, kernel_dim).unwrap();
        let r = feshbach_residuals(&pair, shift);
        let lib = isospectral_test(&pair, 1e-9);
        pass &= r.kernel_dim_h == kernel_dim && r.kernel_dim_f == kernel_dim && lib.pass;
        worst = worst.max(r.chi_map).max(r.q_inverse).max(r.q_map).max(r.resolvent);
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        pass && worst <= 1e-9 && secs < 30.0,
        format!("200 pairs, worst relative residual {worst:e}, {secs:.1} s"),
    )
}

fn flow_vs_oracle(lambda: f64) -> (Outcome, Option<FlowResult>, f64) {
    let mut lines = Vec::new();
    let mut pass = true;
    let mut zero = None;
    let mut e_zero = 0.0;
    for px in [0.0, 0.2, 0.4] {
        let p = ModelParams::default()
            .with_lambda(lambda)
            .with_p(Vec3::new(px, 0.0, 0.0));
        let f = match run_flow(&p, &FlowOptions::new(&p)) {
            Ok(f) => f,
            Err(e) => {
                pass = false;
                lines.push(format!("p={px}: flow failed ({e})"));
                continue;
            }
        };
        let e = oracle_energy(&p);
        let tol = (1e-3 * e.abs()).max(1e-8 * p.m);
        let diff = (f.z_inf - e).abs();
        pass &= f.converged && diff <= tol;
        lines.push(format!("p={px}: |z_inf-E| {diff:e} (tol {tol:e})"));
        if px == 0.0 {
            e_zero = e;
            zero = Some(f);
        }
    }
    (outcome(pass, lines.join("; ")), zero, e_zero)
}

fn pt2_slope(lambda_c: f64, e_tenth: f64) -> Outcome {
    let base = ModelParams::default();
    let grid = ModeGrid::new(&base).unwrap();
    let mut pts = Vec::new();
    for div in [40.0, 20.0, 10.0] {
        let p = base.with_lambda(lambda_c / div);
        let e = if div == 10.0 { e_tenth } else { oracle_energy(&p) };
        pts.push(((lambda_c / div).ln(), (e - pt2_energy(&p, &grid)).abs()));
    }
    if pts.iter().any(|&(_, d)| d <= 0.0) {
        return outcome(false, format!("vanishing difference {pts:?}"));
    }
    let xs: Vec<f64> = pts.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = pts.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / 3.0;
    let my = ys.iter().sum::<f64>() / 3.0;
    let slope = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
        / xs.iter().map(|x| (x - mx) * (x - mx)).sum::<f64>();
    outcome(
        slope >= 3.5,
        format!(
            "slope {slope:.3}, differences {:e} {:e} {:e}",
            pts[0].1, pts[1].1, pts[2].1
        ),
    )
}

fn contraction(flow: Option<&FlowResult>) -> Outcome {
    let Some(f) = flow else {
        return outcome(false, "no flow at p = 0".into());
    };
    let p = ModelParams::default();
    let worst_eps = f
        .history
        .iter()
        .filter(|s| s.n >= 2)
        .filter_map(|s| s.contraction)
        .fold(0.0, f64::max);
    let dev = f.history.iter().map(|s| s.slope_deviation).fold(0.0, f64::max);
    let bound = p.rho / (1.0 - dev);
    let floor = 1e-14 * f.z_inf.abs().max(p.rho0 * p.mu());
    let cauchy = f.cauchy_ratios(floor);
    let worst_cauchy = cauchy.iter().map(|c| c.1).fold(0.0, f64::max);
    let cauchy_text = if cauchy.is_empty() {
        "Cauchy ratios vacuous (differences at roundoff)".to_string()
    } else {
        format!(
            "{} Cauchy ratios, max {worst_cauchy:.3} (bound {bound:.3})",
            cauchy.len()
        )
    };
    outcome(
        worst_eps <= 0.75 && bound < 1.0 && worst_cauchy <= bound,
        format!("max eps ratio {worst_eps:.3}; {cauchy_text}"),
    )
}

fn scaling(flow: Option<&FlowResult>) -> Outcome {
    let p = ModelParams::default();
    let grid = Arc::new(ModeGrid::new(&p).unwrap());
    let rt = Arc::new(RtGrid::new(&p).unwrap());
    let mut synthetic = KernelSequence::from_w00(grid.clone(), rt, Vec3::zeros(), Complex64::new(0.0, 0.0), |r, l| {
        Complex64::new(r + 0.3 * r * r - 0.2 * l.x, 0.1 * l.x * l.x)
    });
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    add_random_kernels(&mut synthetic, &[(1, 0), (0, 1), (1, 1), (2, 0), (0, 2)], &mut rng);
    let mut seqs = vec![synthetic];
    if let Some(f) = flow {
        if let Some(stage) = f.stages.last() {
            seqs.push(stage.seqs[0].clone());
        }
    }
    let basis = FockBasis::reduced(grid, 2);
    let (mut gamma, mut node) = (0.0f64, 0.0f64);
    let mut one_sided = true;
    let mut count = 0;
    for seq in &seqs {
        gamma = gamma.max(gamma_conjugation_deviation(seq, &basis, p.rho));
        node = node.max(scale_transform_node_deviation(seq, p.rho));
        for (_, _, after, bound) in scaled_norms(seq, p.rho) {
            one_sided &= after <= bound * (1.0 + 1e-12);
            count += 1;
        }
    }
    outcome(
        flow.is_some() && gamma <= 1e-13 && node <= 1e-13 && one_sided,
        format!(
            "{} sequences, Gamma deviation {gamma:e}, node deviation {node:e}, {count} norms one-sided: {one_sided}",
            seqs.len()
        ),
    )
}

fn norm_bound() -> Outcome {
    let (grid, rt, basis) = coarse_d3();
    let kinds = [(1, 0), (0, 1), (1, 1), (2, 0), (0, 2)];
    let mut worst: f64 = 0.0;
    let mut pass = true;
    for draw in 0..50u64 {
        let (m, n) = kinds[draw as usize % kinds.len()];
        let (op, _, half) = norm_bound_draw(&grid, &rt, &basis, m, n, 500 + draw);
        let fact = |x: usize| (1..=x).product::<usize>() as f64;
        let bound = (fact(m) * fact(n)).powf(-0.5) * (8.0 * std::f64::consts::PI).powf((m + n) as f64 / 2.0) * half;
        pass &= op <= bound;
        worst = worst.max(op / bound);
    }
    outcome(pass, format!("50 draws, max ||W||/bound {worst:.4}"))
}

fn smoothness(lambda: f64) -> Outcome {
    let p = ModelParams::default().with_lambda(lambda);
    let ps: Vec<f64> = (-4..=4).map(|i| i as f64 * 0.125 * p.m).collect();
    let rec = dispersion_sweep(&p, &ps, |_| None).unwrap();
    let mut sorted = rec.clone();
    sorted.sort_by(|a, b| a.p.total_cmp(&b.p));
    let even = sorted
        .iter()
        .zip(sorted.iter().rev())
        .map(|(a, b)| (a.e_oracle - b.e_oracle).abs())
        .fold(0.0, f64::max);
    let h = sorted[5].p;
    let slope = ((sorted[5].e_oracle - sorted[3].e_oracle) / (2.0 * h)).abs();
    let mass = effective_mass(&rec, p.m).unwrap();
    outcome(
        even <= 1e-10 && slope <= 1e-8 && mass.fit_residual <= 1e-5 * mass.spread && mass.relative_disagreement <= 0.01,
        format!(
            "|E(p)-E(-p)| {even:e}, |dE/dp(0)| {slope:e}, fit residual {:e} (spread {:e}), m_eff {:.8}/{:.8} ({:.2e})",
            mass.fit_residual, mass.spread, mass.second_difference, mass.fit, mass.relative_disagreement
        ),
    )
}

fn report(ok: &mut bool, index: usize, name: &str, o: Outcome) {
    println!("{} {index} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    *ok &= o.pass;
}

fn main() -> ExitCode {
    let mut ok = true;
    report(&mut ok, 1, "free flow", free_flow());
    report(&mut ok, 2, "wick reassembly", wick());
    report(&mut ok, 3, "feshbach isospectrality", feshbach());
    let lambda_c = lambda_critical_estimate(&ModelParams::default()).unwrap().lambda_c;
    let (o, flow, e_tenth) = flow_vs_oracle(lambda_c / 10.0);
    report(&mut ok, 4, "flow vs oracle", o);
    report(&mut ok, 5, "second-order slope", pt2_slope(lambda_c, e_tenth));
    report(&mut ok, 6, "contraction", contraction(flow.as_ref()));
    report(&mut ok, 7, "scaling exactness", scaling(flow.as_ref()));
    report(&mut ok, 8, "norm bound", norm_bound());
    report(&mut ok, 9, "smoothness", smoothness(lambda_c / 10.0));
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
