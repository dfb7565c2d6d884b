//! The first decimation: projecting out the excited level and the photons above `ρ₀`.
//!
//! `χ = P_↓ ⊗ χ_{ρ₀}(H_f)`. The Neumann series of `(H₀ + λ₀χ̄H_Iχ̄)^{-1}` is Wick ordered with
//! the spin-blocked resolvent `F = diag(1/b₂, χ̄²_{ρ₀}/b₁)` and rescaled by `S_{ρ₀}`. Each order
//! in λ₀ is stored separately so the coupling can be varied without recomputation.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::feshbach::{feshbach_map, FeshbachPair};
use crate::fockspace::{dilation_map, FockBasis, FockOperator, Leg, ModeGrid, SpinFock};
use crate::kernels::{polydisc_measure, Kernel, KernelSequence, NormLedger, RtGrid};
use crate::model::{chi, chi1, chibar1_sq, ModelParams, Spin, Vec3, CHI_PLATEAU, DOWN, UP};
use crate::oracle::{fiber_dense, free_energy};
use crate::wick::{series_on_grid, term_specs, Engine, KernelSource, Resolvent};

/// `b₁`, `b₂` and the spin-blocked resolvent at `(p, z)`, `z = ρ₀ζ`.
#[derive(Clone, Debug)]
pub struct TwoLevelResolventData {
    pub mass: f64,
    pub omega0: f64,
    pub rho0: f64,
    pub p: Vec3,
    pub z: Complex64,
}

impl TwoLevelResolventData {
    pub fn new(params: &ModelParams, zeta: Complex64) -> Self {
        TwoLevelResolventData {
            mass: params.m,
            omega0: params.omega0,
            rho0: params.rho0,
            p: params.p,
            z: zeta * params.rho0,
        }
    }

    /// `r + l²/2m − p·l/m − z`.
    pub fn b1(&self, r: f64, l: &Vec3) -> Complex64 {
        Complex64::from(r + l.norm_squared() / (2.0 * self.mass) - self.p.dot(l) / self.mass) - self.z
    }

    pub fn b2(&self, r: f64, l: &Vec3) -> Complex64 {
        self.b1(r, l) + self.omega0
    }

    /// Lower bound of `Re b₁` on `r ≥ 3ρ₀/4` and of `Re b₂` on `r ≥ 0`.
    pub fn margins(&self) -> (f64, f64) {
        let c = 1.0 - self.p.norm() / self.mass;
        let r0 = CHI_PLATEAU * self.rho0;
        (r0 * c - self.z.re, self.omega0 - self.z.re)
    }
}

impl Resolvent<Spin> for TwoLevelResolventData {
    fn value(&self, _position: usize, r: f64, l: &Vec3) -> Result<Spin> {
        let mut f = Spin::zeros();
        f[(UP, UP)] = self.b2(r, l).inv();
        let cb = chibar1_sq(r / self.rho0);
        if cb > 0.0 {
            f[(DOWN, DOWN)] = self.b1(r, l).inv() * cb;
        }
        Ok(f)
    }

    fn bound(&self) -> f64 {
        let (m1, m2) = self.margins();
        1.0 / m1.min(m2)
    }
}

/// Interaction vertices at unit coupling: `w_{1,0} = −i|k|^{1/2}S_k`, `w_{0,1} = i|k|^{1/2}S_k`.
pub struct InteractionVertices<'a> {
    pub grid: &'a ModeGrid,
}

impl KernelSource<Spin> for InteractionVertices<'_> {
    fn available(&self, m: usize, n: usize) -> bool {
        m + n == 1
    }

    fn value(&self, m: usize, _n: usize, _r: f64, _l: &Vec3, create: &[Leg], annih: &[Leg]) -> Spin {
        let leg = if m == 1 { create[0] } else { annih[0] };
        let Some(i) = leg.mode else {
            return Spin::zeros();
        };
        let mode = &self.grid.modes[i];
        let g = crate::model::form_factor(&leg.k, self.grid.uv);
        let c = if m == 1 {
            Complex64::new(0.0, -g)
        } else {
            Complex64::new(0.0, g)
        };
        mode.coupling * c
    }

    fn bound(&self, _m: usize, _n: usize) -> f64 {
        let s = self
            .grid
            .modes
            .iter()
            .map(|m| m.form * m.coupling.iter().map(|c| c.norm()).fold(0.0, f64::max))
            .fold(0.0, f64::max);
        2.0 * s
    }
}

/// The λ₀-expansion of the first-step kernels at one ζ: `pieces[(m, n)][L−1]` holds the
/// coefficient of λ₀^L (already multiplied by `ρ₀^{3(m+n)/2−1}` and, for (0,0), by χ(r)²).
#[derive(Clone, Debug)]
pub struct FirstStepPieces {
    pub zeta: Complex64,
    pub p: Vec3,
    pub pieces: BTreeMap<(usize, usize), Vec<Vec<Complex64>>>,
}

/// Computes the λ₀-coefficients of `w⁽⁰⁾(p, ζ)`.
pub fn first_step_pieces(
    params: &ModelParams,
    grid: &Arc<ModeGrid>,
    rt: &RtGrid,
    zeta: Complex64,
) -> Result<FirstStepPieces> {
    let data = TwoLevelResolventData::new(params, zeta);
    let (m1, m2) = data.margins();
    if m1 <= 0.0 || m2 <= 0.0 {
        return Err(Error::NotFeshbachPair {
            what: "Re b1 on Ran chibar",
            margin: m1.min(m2),
            floor: 0.0,
        });
    }
    let vertices = InteractionVertices { grid };
    let engine = Engine::new(grid, &vertices, &data, params.rho0)?;
    let mut pieces = BTreeMap::new();
    for total in 0..=params.m_max {
        for m in 0..=total {
            let n = total - m;
            let specs = term_specs(m, n, params.l_max, 1, |a, b| a + b == 1)?;
            let series = series_on_grid(&engine, &specs, rt, m, n, params.l_max, 0.0)?;
            let pref = params.rho0.powf(1.5 * total as f64 - 1.0);
            let by_depth: Vec<Vec<Complex64>> = series
                .by_depth
                .into_iter()
                .map(|arr| {
                    let size = arr.len() / rt.len();
                    arr.into_iter()
                        .enumerate()
                        .map(|(i, s)| {
                            let mut v = s[(DOWN, DOWN)] * pref;
                            if total == 0 {
                                let (r, _) = rt.point(i / size);
                                v *= chi1(r) * chi1(r);
                            }
                            v
                        })
                        .collect()
                })
                .collect();
            pieces.insert((m, n), by_depth);
        }
    }
    Ok(FirstStepPieces {
        zeta,
        p: params.p,
        pieces,
    })
}

/// The free first-step kernel `r + ρ₀l²/2m − p·l/m − ζ`.
pub fn free_w00(params: &ModelParams, zeta: Complex64) -> impl Fn(f64, &Vec3) -> Complex64 + '_ {
    move |r, l| {
        Complex64::from(r + params.rho0 * l.norm_squared() / (2.0 * params.m) - params.p.dot(l) / params.m) - zeta
    }
}

/// Assembles `w⁽⁰⁾` at coupling `lambda0` from precomputed pieces.
pub fn assemble_initial(
    params: &ModelParams,
    grid: &Arc<ModeGrid>,
    rt: &Arc<RtGrid>,
    pieces: &FirstStepPieces,
    lambda0: f64,
) -> Result<KernelSequence> {
    let zeta = pieces.zeta;
    let mut seq = KernelSequence::from_w00(grid.clone(), rt.clone(), params.p, zeta, free_w00(params, zeta));
    for ((m, n), by_depth) in &pieces.pieces {
        let mut values = if m + n == 0 {
            seq.w00().values.clone()
        } else {
            vec![Complex64::new(0.0, 0.0); by_depth[0].len()]
        };
        let mut any = false;
        for (d, arr) in by_depth.iter().enumerate() {
            let c = lambda0.powi(d as i32 + 1);
            if c == 0.0 || arr.iter().all(|v| v.norm() == 0.0) {
                continue;
            }
            any = true;
            values.iter_mut().zip(arr).for_each(|(a, b)| *a += b * c);
        }
        if m + n == 0 || any {
            seq.insert(Kernel {
                m: *m,
                n: *n,
                chi_outer: m + n > 0,
                values,
            })?;
        }
    }
    Ok(seq)
}

/// Bound on `‖λ₀ |H₀|^{-1/2} χ̄H_Iχ̄ |H₀|^{-1/2}‖` from `‖b(g)ψ‖ ≤ ‖g/√ω‖·‖H_f^{1/2}ψ‖`.
/// Below 1 the Neumann series of the first step converges.
pub fn neumann_ratio(params: &ModelParams, grid: &ModeGrid, zeta: Complex64) -> f64 {
    let data = TwoLevelResolventData::new(params, zeta);
    let (a_down, a_up) = data.margins();
    let c = 1.0 - params.p.norm() / params.m;
    // sup of r / a(r) over both blocks
    let r0 = CHI_PLATEAU * params.rho0;
    let sup_ratio = (r0 / a_down).max(1.0 / c);
    let a_min = a_down.min(a_up);
    let g2: f64 = grid
        .modes
        .iter()
        .map(|m| {
            let s = m.coupling.iter().map(|x| x.norm()).fold(0.0, f64::max);
            m.weight * m.form * m.form / m.omega * s * s
        })
        .sum();
    2.0 * params.lambda0 * g2.sqrt() * sup_ratio.sqrt() / a_min.sqrt()
}

/// Builds `w⁽⁰⁾(p, ζ)`; fails when the Neumann series is not convergent.
pub fn initial_kernels(params: &ModelParams, zeta: Complex64) -> Result<KernelSequence> {
    let grid = Arc::new(ModeGrid::new(params)?);
    let rt = Arc::new(RtGrid::new(params)?);
    initial_kernels_on(params, &grid, &rt, zeta)
}

pub fn initial_kernels_on(
    params: &ModelParams,
    grid: &Arc<ModeGrid>,
    rt: &Arc<RtGrid>,
    zeta: Complex64,
) -> Result<KernelSequence> {
    let ratio = neumann_ratio(params, grid, zeta);
    if ratio >= 1.0 {
        return Err(Error::FirstStepDiverges {
            ratio,
            lambda0: params.lambda0,
        });
    }
    if params.lambda0 == 0.0 {
        return Ok(KernelSequence::from_w00(
            grid.clone(),
            rt.clone(),
            params.p,
            zeta,
            free_w00(params, zeta),
        ));
    }
    let pieces = first_step_pieces(params, grid, rt, zeta)?;
    assemble_initial(params, grid, rt, &pieces, params.lambda0)
}

#[derive(Clone, Debug, Serialize)]
pub struct LambdaEstimate {
    pub lambda_c: f64,
    /// Largest coupling with Neumann ratio below 1/2.
    pub neumann_limit: f64,
    /// Which condition limits `lambda_c`.
    pub limiting: String,
}

/// Empirical critical coupling: the largest λ₀ (by bisection) for which the Neumann ratio
/// is below 1/2 and the first-step sequence at ζ = 0 lies in the target polydisc
/// `γ ≤ κ_γμ, δ ≤ κ_δρμ, ε ≤ κ_ερ²μ²`.
pub fn lambda_critical_estimate(params: &ModelParams) -> Result<LambdaEstimate> {
    let grid = Arc::new(ModeGrid::new(params)?);
    let rt = Arc::new(RtGrid::new(params)?);
    let zero = Complex64::new(0.0, 0.0);
    let unit = neumann_ratio(&params.with_lambda(1.0), &grid, zero);
    let neumann_limit = 0.5 / unit;
    let pieces = first_step_pieces(params, &grid, &rt, zero)?;
    let (mu, rho) = (params.mu(), params.rho);
    let check = |lambda: f64| -> Result<Option<&'static str>> {
        let seq = assemble_initial(params, &grid, &rt, &pieces, lambda)?;
        let led = polydisc_measure(&seq, &params.p, zero, params.m, params.xi)?;
        Ok(if lambda >= neumann_limit {
            Some("neumann")
        } else if led.gamma > params.kappa_gamma * mu {
            Some("gamma")
        } else if led.delta > params.kappa_delta * rho * mu {
            Some("delta")
        } else if led.eps > params.kappa_eps * rho * rho * mu * mu {
            Some("eps")
        } else {
            None
        })
    };
    if let Some(why) = check(0.0)? {
        return Ok(LambdaEstimate {
            lambda_c: 0.0,
            neumann_limit,
            limiting: why.to_string(),
        });
    }
    let mut lo = 0.0;
    let mut hi = neumann_limit;
    let mut limiting = check(hi)?.unwrap_or("neumann");
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        match check(mid)? {
            None => lo = mid,
            Some(why) => {
                hi = mid;
                limiting = why;
            }
        }
        if hi - lo <= 1e-6 * hi {
            break;
        }
    }
    Ok(LambdaEstimate {
        lambda_c: lo,
        neumann_limit,
        limiting: limiting.to_string(),
    })
}

/// Refuses couplings above the empirical critical coupling.
pub fn check_coupling(params: &ModelParams) -> Result<LambdaEstimate> {
    let est = lambda_critical_estimate(params)?;
    if params.lambda0 > est.lambda_c {
        return Err(Error::CouplingAboveCritical {
            lambda0: params.lambda0,
            lambda_c: est.lambda_c,
            limiting: est.limiting.clone(),
        });
    }
    Ok(est)
}

/// Ledger of the first-step output at its ζ.
pub fn first_step_ledger(params: &ModelParams, seq: &KernelSequence) -> Result<NormLedger> {
    polydisc_measure(seq, &params.p, seq.z, params.m, params.xi)
}

/// The Feshbach pair of the first decimation on spin ⊗ Fock: `H(p) − z`, `T = H₀ − z`,
/// `χ = P_↓ ⊗ χ_{ρ₀}(H_f)` and `χ̄ = P_↑ + P_↓ ⊗ χ̄_{ρ₀}(H_f)`.
pub fn first_step_pair(params: &ModelParams, z: Complex64, full: &SpinFock) -> Result<FeshbachPair> {
    let n = full.dim();
    let mut h = fiber_dense(params, full);
    let mut t = DMatrix::zeros(n, n);
    let mut chi_m = DMatrix::zeros(n, n);
    let mut chibar_m = DMatrix::zeros(n, n);
    for spin in [UP, DOWN] {
        for (s, st) in full.fock.states.iter().enumerate() {
            let i = full.idx(spin, s);
            t[(i, i)] = Complex64::from(free_energy(params, spin, st.r, &st.l_vec())) - z;
            h[(i, i)] -= z;
            let c = if spin == DOWN { chi(st.r, params.rho0) } else { 0.0 };
            chi_m[(i, i)] = Complex64::from(c);
            chibar_m[(i, i)] = Complex64::from((1.0 - c * c).max(0.0).sqrt());
        }
    }
    FeshbachPair::new(h, t, &chi_m, &chibar_m, params.margin_floor)
}

/// The first decimation done on matrices: `F_χ(H(p) − z, H₀ − z)` on spin ⊗ Fock, its ↓ block
/// on `H_f ≤ ρ₀`, dilated by `Γ_{ρ₀}` and divided by ρ₀. Returned on `target` (a ↓-only basis
/// over the same grid).
pub fn matrix_first_step(
    params: &ModelParams,
    zeta: Complex64,
    full: &SpinFock,
    target: &FockBasis,
) -> Result<FockOperator> {
    if full.fock.grid.len() != target.grid.len() {
        return Err(Error::BasisMismatch("first-step bases on different grids".into()));
    }
    let pair = first_step_pair(params, zeta * params.rho0, full)?;
    let f = feshbach_map(&pair);
    // ↓ states with H_f ≤ ρ₀ mapped through Γ_{ρ₀} into the target basis
    let map = dilation_map(&full.fock, params.rho0)?;
    let mut image = vec![None; full.fock.dim()];
    for (s, t_idx) in map.iter().enumerate() {
        if let Some(ti) = t_idx {
            let modes = &full.fock.states[*ti].modes;
            image[s] = target.find(modes);
        }
    }
    let dim = target.dim();
    let mut out = DMatrix::zeros(dim, dim);
    for (s, a) in image.iter().enumerate() {
        let Some(a) = a else { continue };
        for (s2, b) in image.iter().enumerate() {
            let Some(b) = b else { continue };
            out[(*a, *b)] = f[(full.idx(DOWN, s), full.idx(DOWN, s2))] / params.rho0;
        }
    }
    Ok(out)
}
