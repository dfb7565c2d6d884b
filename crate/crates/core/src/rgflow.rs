//! The renormalization map `R_ρ = S_ρ ∘ F_{χ_ρ} ∘ E_ρ^{-1}` and its iteration.
//!
//! Each stage stores its kernel sequence at Chebyshev samples `ζ_j` of the window `[−W, W]`,
//! `W = z_window·μ/2`. The inverse spectral rescaling is a scalar root solve on the
//! interpolated vacuum value; kernels at the solved point are barycentric combinations of
//! the samples, which is exact for the polynomial part of the ζ-dependence.

use std::sync::Arc;

use nalgebra::DVector;
use num_complex::Complex64;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::feshbach::{q_operators, FeshbachPair};
use crate::firststep::{first_step_pair, initial_kernels_on, neumann_ratio};
use crate::fockspace::{dilation_map, FockBasis, ModeGrid, SpinFock};
use crate::kernels::{assemble_operator, polydisc_measure, Kernel, KernelSequence, NormLedger, RtGrid};
use crate::model::{chi, chi1, chibar1_sq, ModelParams, Vec3, CHI_PLATEAU, DOWN};
use crate::oracle::fiber_dense;
use crate::wick::{series_on_grid, term_specs, Engine, KernelSource, Resolvent};

/// Chebyshev points of the first kind on `[−half_width, half_width]` and their barycentric weights.
pub fn chebyshev_nodes(count: usize, half_width: f64) -> (Vec<f64>, Vec<f64>) {
    let n = count as f64;
    (0..count)
        .map(|j| {
            let theta = std::f64::consts::PI * (2.0 * j as f64 + 1.0) / (2.0 * n);
            let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
            (half_width * theta.cos(), sign * theta.sin())
        })
        .unzip()
}

/// Lagrange basis values `ℓ_j(x)` in barycentric form.
pub fn lagrange_weights(nodes: &[f64], bary: &[f64], x: f64) -> Vec<f64> {
    if let Some(j) = nodes.iter().position(|&t| t == x) {
        let mut out = vec![0.0; nodes.len()];
        out[j] = 1.0;
        return out;
    }
    let terms: Vec<f64> = nodes.iter().zip(bary).map(|(t, w)| w / (x - t)).collect();
    let s: f64 = terms.iter().sum();
    terms.into_iter().map(|t| t / s).collect()
}

/// The vacuum value `ζ ↦ w_{0,0}(ζ, 0, 0)` of one stage, sampled at its Chebyshev nodes.
#[derive(Clone, Debug, Serialize)]
pub struct RelevantPart {
    pub zetas: Vec<f64>,
    pub bary: Vec<f64>,
    pub values: Vec<Complex64>,
}

impl RelevantPart {
    pub fn eval(&self, zeta: f64) -> Complex64 {
        lagrange_weights(&self.zetas, &self.bary, zeta)
            .iter()
            .zip(&self.values)
            .map(|(c, v)| v * c)
            .sum()
    }

    /// Derivative of the interpolant (central difference on the polynomial).
    pub fn derivative(&self, zeta: f64) -> Complex64 {
        let h = 1e-6 * self.half_width().max(1e-300);
        (self.eval(zeta + h) - self.eval(zeta - h)) / (2.0 * h)
    }

    pub fn half_width(&self) -> f64 {
        self.zetas.iter().fold(0.0, |a: f64, z| a.max(z.abs()))
            / (std::f64::consts::PI / (2.0 * self.zetas.len() as f64)).cos()
    }
}

/// Solves `w(ζ) = −ρζ'` on the window for a real-valued relevant part `w`: Newton from the seed
/// `ρζ'`, with bisection as fallback. The residual must fall below `1e-12·μ`.
pub fn solve_relevant<F>(w: F, rho: f64, zeta_new: f64, window: f64, mu: f64) -> Result<f64>
where
    F: Fn(f64) -> f64,
{
    let g = |x: f64| w(x) + rho * zeta_new;
    let target = 1e-12 * mu;
    let fail = |reason: &str| Error::InversionFailed {
        zeta: zeta_new,
        reason: reason.to_string(),
    };
    let mut x = rho * zeta_new;
    for _ in 0..50 {
        let gx = g(x);
        if !gx.is_finite() {
            break;
        }
        if gx.abs() < target {
            return Ok(x);
        }
        let h = 1e-7 * window;
        let d = (g(x + h) - g(x - h)) / (2.0 * h);
        if d == 0.0 || !d.is_finite() {
            break;
        }
        let next = x - gx / d;
        if !(next.abs() <= window) {
            break;
        }
        x = next;
    }
    let (mut lo, mut hi) = (-window, window);
    let (mut glo, ghi) = (g(lo), g(hi));
    if !(glo.is_finite() && ghi.is_finite()) || glo * ghi > 0.0 {
        return Err(fail("no sign change of the relevant part on the window"));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let gm = g(mid);
        if gm.abs() < target {
            return Ok(mid);
        }
        if (gm < 0.0) == (glo < 0.0) {
            lo = mid;
            glo = gm;
        } else {
            hi = mid;
        }
        if hi - lo < f64::EPSILON * window {
            break;
        }
    }
    let mid = 0.5 * (lo + hi);
    if g(mid).abs() < target {
        Ok(mid)
    } else {
        Err(fail("residual above 1e-12·mu"))
    }
}

/// `E_ρ^{-1}`: the point of the stage window that maps to `ζ'`.
pub fn e_rho_inverse(part: &RelevantPart, rho: f64, zeta_new: f64, mu: f64) -> Result<f64> {
    solve_relevant(|x| part.eval(x).re, rho, zeta_new, part.half_width(), mu)
}

/// `s_ρ(w)_{m,n}(r, l, K) = ρ^{3(m+n)/2−1} w(ρr, ρl, ρK)`. Nodes whose image lies on the grid
/// are copied; images below the lowest nonzero r-node are interpolated; mode tuples whose
/// image falls below the infrared floor get the value 0. The result has `chi_outer = false`.
pub fn scale_transform(seq: &KernelSequence, rho: f64) -> Result<KernelSequence> {
    let grid = &seq.grid;
    let rt = &seq.rt;
    let steps = grid.scale_steps(rho)?;
    let r_steps = rt_scale_steps(rt, rho)?;
    let nk = grid.len();
    let mut out = KernelSequence::from_w00(grid.clone(), rt.clone(), seq.p, seq.z, |_, _| Complex64::new(0.0, 0.0));
    for ((m, n), k) in seq.iter() {
        let legs = m + n;
        let size = k.tuple_count(nk);
        let pref = rho.powf(1.5 * legs as f64 - 1.0);
        let mut values = vec![Complex64::new(0.0, 0.0); k.values.len()];
        let mut modes = vec![0usize; legs];
        for kidx in 0..size {
            let mut x = kidx;
            for d in (0..legs).rev() {
                modes[d] = x % nk;
                x /= nk;
            }
            let scaled: Option<Vec<usize>> = modes.iter().map(|&i| grid.scaled_index(i, steps)).collect();
            let Some(scaled) = scaled else { continue };
            let sidx = scaled.iter().fold(0, |a, &i| a * nk + i);
            let (sc, sa): (f64, f64) = (
                scaled[..*m].iter().map(|&i| grid.modes[i].omega).sum(),
                scaled[*m..].iter().map(|&i| grid.modes[i].omega).sum(),
            );
            for pt in 0..rt.len() {
                let (ir, it) = rt.split(pt);
                let (r, l) = rt.point(pt);
                let (rs, ls) = (rho * r, l * rho);
                let raw = match rt.scaled_r_index(ir, r_steps) {
                    Some(j) => k.values[(j * rt.t_points() + it) * size + sidx],
                    None => crate::kernels::interpolate(rt, &k.values, size, sidx, rs, &ls),
                };
                let cut = if k.chi_outer {
                    chi1(rs + sc) * chi1(rs + sa)
                } else {
                    1.0
                };
                values[pt * size + kidx] = raw * (cut * pref);
            }
        }
        out.insert(Kernel {
            m: *m,
            n: *n,
            chi_outer: false,
            values,
        })?;
    }
    out.dropped_mass = seq.dropped_mass;
    Ok(out)
}

fn rt_scale_steps(rt: &RtGrid, rho: f64) -> Result<usize> {
    let s = (rho.ln() / rt.rho.ln()).round();
    if s < 1.0 || ((rt.rho.powi(s as i32) - rho) / rho).abs() > 1e-12 {
        return Err(Error::NonGeometricGrid {
            scale: rho,
            ratio: rt.rho,
        });
    }
    Ok(s as usize)
}

/// `F(r, l) = χ̄²_ρ(r)/w_{0,0}(r, l)` on the reduced space, 0 above `r = 1`.
pub struct FlowResolvent<'a> {
    pub seq: &'a KernelSequence,
    pub rho: f64,
    pub floor: f64,
    bound: f64,
}

impl<'a> FlowResolvent<'a> {
    pub fn new(seq: &'a KernelSequence, rho: f64, floor: f64) -> Self {
        let rt = &seq.rt;
        let w = &seq.w00().values;
        let edge = CHI_PLATEAU * rho;
        // include the node just below the plateau edge so that interpolated values are covered
        let start = rt.r.partition_point(|&x| x < edge).saturating_sub(1);
        let mut min = f64::INFINITY;
        for pt in 0..rt.len() {
            let (ir, _) = rt.split(pt);
            if ir >= start && rt.in_ball(pt) {
                min = min.min(w[pt].norm());
            }
        }
        FlowResolvent {
            seq,
            rho,
            floor,
            bound: 1.0 / min,
        }
    }
}

impl Resolvent<Complex64> for FlowResolvent<'_> {
    fn value(&self, _position: usize, r: f64, l: &Vec3) -> Result<Complex64> {
        if r > 1.0 {
            return Ok(Complex64::new(0.0, 0.0));
        }
        let cb = chibar1_sq(r / self.rho);
        if cb == 0.0 {
            return Ok(Complex64::new(0.0, 0.0));
        }
        let w = self.seq.w00_at(r, l);
        if !(w.norm() >= self.floor) {
            return Err(Error::ResolventDomain { r, value: w.norm() });
        }
        Ok(w.inv() * cb)
    }

    fn bound(&self) -> f64 {
        self.bound
    }
}

/// One application of `S_ρ ∘ F_{χ_ρ}` to a sequence at a fixed spectral point.
pub fn renormalize_at(params: &ModelParams, seq: &KernelSequence, zeta_new: f64) -> Result<KernelSequence> {
    let rho = params.rho;
    let res = FlowResolvent::new(seq, rho, params.margin_floor * rho * params.mu());
    let engine = Engine::new(&seq.grid, seq as &dyn KernelSource<Complex64>, &res, rho)?;
    let rt = &seq.rt;
    let r_steps = rt_scale_steps(rt, rho)?;
    let w00 = &seq.w00().values;
    let mut out = KernelSequence::from_w00(
        seq.grid.clone(),
        rt.clone(),
        seq.p,
        Complex64::from(zeta_new),
        |_, _| Complex64::new(0.0, 0.0),
    );
    let mut dropped = seq.dropped_mass;
    for total in 0..=params.m_max {
        for m in 0..=total {
            let n = total - m;
            let specs = term_specs(m, n, params.l_max, params.m_max, |a, b| seq.available(a, b))?;
            if total > 0 && specs.is_empty() {
                continue;
            }
            let series = series_on_grid(&engine, &specs, rt, m, n, params.l_max, params.prune_tol)?;
            dropped += series.dropped;
            let size = series.by_depth[0].len() / rt.len();
            let mut values = vec![Complex64::new(0.0, 0.0); rt.len() * size];
            for arr in &series.by_depth {
                values.iter_mut().zip(arr).for_each(|(a, b)| *a += b);
            }
            if total == 0 {
                for (pt, v) in values.iter_mut().enumerate() {
                    let (ir, it) = rt.split(pt);
                    let (r, l) = rt.point(pt);
                    let base = match rt.scaled_r_index(ir, r_steps) {
                        Some(j) => w00[j * rt.t_points() + it],
                        None => seq.w00_at(rho * r, &(l * rho)),
                    };
                    *v = (base + *v * (chi1(r) * chi1(r))) / rho;
                }
            } else {
                if values.iter().all(|v| v.re == 0.0 && v.im == 0.0) {
                    continue;
                }
                let pref = rho.powf(1.5 * total as f64 - 1.0);
                values.iter_mut().for_each(|v| *v *= pref);
            }
            out.insert(Kernel {
                m,
                n,
                chi_outer: total > 0,
                values,
            })?;
        }
    }
    out.dropped_mass = dropped;
    Ok(out)
}

/// One RG stage: sequences at the Chebyshev samples of the window.
#[derive(Clone, Debug)]
pub struct Stage {
    pub index: usize,
    pub relevant: RelevantPart,
    pub seqs: Vec<KernelSequence>,
}

impl Stage {
    fn from_seqs(index: usize, zetas: Vec<f64>, bary: Vec<f64>, seqs: Vec<KernelSequence>) -> Self {
        let values = seqs.iter().map(|s| s.w00().values[s.rt.t_center()]).collect();
        Stage {
            index,
            relevant: RelevantPart { zetas, bary, values },
            seqs,
        }
    }

    /// The stage sequence at an arbitrary point of the window.
    pub fn at(&self, zeta: f64) -> Result<KernelSequence> {
        let c = lagrange_weights(&self.relevant.zetas, &self.relevant.bary, zeta);
        let parts: Vec<(f64, &KernelSequence)> = c.into_iter().zip(&self.seqs).collect();
        let mut seq = KernelSequence::combine(&parts)?;
        seq.z = Complex64::from(zeta);
        seq.dropped_mass = self.seqs.iter().map(|s| s.dropped_mass).fold(0.0, f64::max);
        Ok(seq)
    }
}

/// The first stage `w⁽⁰⁾(p, ζ)` at the sample points.
pub fn initial_stage(params: &ModelParams, grid: &Arc<ModeGrid>, rt: &Arc<RtGrid>) -> Result<Stage> {
    let (zetas, bary) = chebyshev_nodes(params.grid.z_samples, window(params));
    let seqs = zetas
        .iter()
        .map(|&z| initial_kernels_on(params, grid, rt, Complex64::from(z)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Stage::from_seqs(0, zetas, bary, seqs))
}

/// Half width of the ζ-window.
pub fn window(params: &ModelParams) -> f64 {
    params.grid.z_window * params.mu() / 2.0
}

/// `R_ρ` applied to a stage: every sample `ζ'_j` is pulled back through `E_ρ^{-1}` and renormalized.
pub fn renormalize(params: &ModelParams, stage: &Stage) -> Result<Stage> {
    let (zetas, bary) = (stage.relevant.zetas.clone(), stage.relevant.bary.clone());
    let mut seqs = Vec::with_capacity(zetas.len());
    for &zn in &zetas {
        let z = e_rho_inverse(&stage.relevant, params.rho, zn, params.mu())?;
        let seq = stage.at(z)?;
        seqs.push(renormalize_at(params, &seq, zn)?);
    }
    Ok(Stage::from_seqs(stage.index + 1, zetas, bary, seqs))
}

/// `α = ∂_r w_{0,0}` (one-sided at the origin) and `β_j = ∂_{l_j} w_{0,0}` (central in t at the first r-node).
pub fn extract_alpha_beta(seq: &KernelSequence) -> (f64, Vec3) {
    let rt = &seq.rt;
    let w = &seq.w00().values;
    let tp = rt.t_points();
    let c = rt.t_center();
    let r1 = rt.r[1];
    let alpha = (w[tp + c] - w[c]).re / r1;
    let nt = rt.t.len();
    let h = rt.t[1] - rt.t[0];
    let axes = if rt.dim == 1 { 1 } else { 3 };
    let mut beta = Vec3::zeros();
    for a in 0..axes {
        let stride = nt.pow((axes - 1 - a) as u32);
        let plus = w[tp + c + stride];
        let minus = w[tp + c - stride];
        beta[a] = (plus - minus).re / (2.0 * h * r1);
    }
    (alpha, beta)
}

#[derive(Clone, Debug)]
pub struct FlowOptions {
    pub n_max: usize,
    /// Iterations performed before the convergence test is allowed to stop the flow.
    pub min_iter: usize,
    /// Stop when `|e_{0,n+1} − e_{0,n}| < tol`.
    pub tol: f64,
    /// Stages whose full kernel samples are retained (for the ground-state chain).
    pub keep_stages: usize,
}

impl FlowOptions {
    pub fn new(params: &ModelParams) -> Self {
        FlowOptions {
            n_max: params.n_iter,
            min_iter: 0,
            tol: params.tol(),
            keep_stages: 3,
        }
    }
}

/// One iteration record.
#[derive(Clone, Debug, Serialize)]
pub struct FlowState {
    pub n: usize,
    pub ledger: NormLedger,
    /// `e_{0,n}`: the composed inverse rescalings applied to 0.
    pub e0n: f64,
    pub alpha: f64,
    pub beta: [f64; 3],
    /// `|∂_ζ w_{0,0}(ζ, 0, 0) + 1|` at ζ = 0.
    pub slope_deviation: f64,
    /// `ε_n / ε_{n−1}`.
    pub contraction: Option<f64>,
    pub converged: bool,
}

#[derive(Clone, Debug)]
pub struct FlowResult {
    pub history: Vec<FlowState>,
    pub relevant: Vec<RelevantPart>,
    pub stages: Vec<Stage>,
    pub e0_inf: f64,
    pub z_inf: f64,
    pub alpha: f64,
    pub beta: Vec3,
    pub converged: bool,
    pub neumann_ratio: f64,
}

impl FlowResult {
    /// `e_{0,n}(s) = E^{-1}_0 ∘ … ∘ E^{-1}_{n−1}(s)` over the stored relevant parts.
    pub fn e0n_from(&self, n: usize, seed: f64, params: &ModelParams) -> Result<f64> {
        compose_inverses(&self.relevant[..n], seed, params)
    }

    /// ζ at each stage that leads back to `e_{0,n}(0)` with n the last stage.
    pub fn tracked_zetas(&self, params: &ModelParams) -> Result<Vec<f64>> {
        let n = self.relevant.len() - 1;
        let mut out = vec![0.0; n + 1];
        for k in (0..n).rev() {
            out[k] = e_rho_inverse(&self.relevant[k], params.rho, out[k + 1], params.mu())?;
        }
        Ok(out)
    }

    /// Cauchy ratios `|e_{0,n+1} − e_{0,n}| / |e_{0,n} − e_{0,n−1}|` over differences above `floor`.
    pub fn cauchy_ratios(&self, floor: f64) -> Vec<(usize, f64)> {
        let e: Vec<f64> = self.history.iter().map(|s| s.e0n).collect();
        let mut out = Vec::new();
        for n in 2..e.len() {
            let (a, b) = ((e[n] - e[n - 1]).abs(), (e[n - 1] - e[n - 2]).abs());
            if a > floor && b > floor {
                out.push((n, a / b));
            }
        }
        out
    }
}

fn compose_inverses(parts: &[RelevantPart], seed: f64, params: &ModelParams) -> Result<f64> {
    let mut z = seed;
    for part in parts.iter().rev() {
        z = e_rho_inverse(part, params.rho, z, params.mu())?;
    }
    Ok(z)
}

/// Iterates `R_ρ` from the first-step stage until `e_{0,n}` converges.
pub fn run_flow(params: &ModelParams, options: &FlowOptions) -> Result<FlowResult> {
    run_flow_observed(params, options, &mut |_| {})
}

/// [`run_flow`] reporting every accepted iteration to `observer` as it is recorded.
pub fn run_flow_observed(
    params: &ModelParams,
    options: &FlowOptions,
    observer: &mut dyn FnMut(&FlowState),
) -> Result<FlowResult> {
    params.validate()?;
    let grid = Arc::new(ModeGrid::new(params)?);
    let rt = Arc::new(RtGrid::new(params)?);
    let ratio = neumann_ratio(params, &grid, Complex64::new(0.0, 0.0));
    let mut stage = initial_stage(params, &grid, &rt)?;
    let mu = params.mu();
    let mut relevant = Vec::new();
    let mut stages = Vec::new();
    let mut history: Vec<FlowState> = Vec::new();
    let mut converged = false;
    loop {
        let n = stage.index;
        relevant.push(stage.relevant.clone());
        let e0n = compose_inverses(&relevant[..n], 0.0, params).map_err(|e| escape(n, e))?;
        let seq = stage.at(0.0)?;
        let ledger = polydisc_measure(&seq, &params.p, Complex64::new(0.0, 0.0), params.m, params.xi)?;
        let (alpha, beta) = extract_alpha_beta(&seq);
        let slope_deviation = (stage.relevant.derivative(0.0) + 1.0).norm();
        let contraction = history
            .last()
            .and_then(|s| (s.ledger.eps > 0.0).then(|| ledger.eps / s.ledger.eps));
        let origin = stage.relevant.eval(0.0).norm();
        if !(origin < mu * params.rho / 2.0) || !(ledger.gamma < mu / 2.0) || !ledger.eps.is_finite() {
            return Err(Error::PolydiscEscape {
                iteration: n,
                reason: format!(
                    "|w00(0,0)| = {origin:.3e} (limit {:.3e}), gamma = {:.3e}, eps = {:.3e}",
                    mu * params.rho / 2.0,
                    ledger.gamma,
                    ledger.eps
                ),
            });
        }
        let done = n >= options.min_iter.max(1)
            && history
                .last()
                .map(|s| (s.e0n - e0n).abs() < options.tol)
                .unwrap_or(false);
        history.push(FlowState {
            n,
            ledger,
            e0n,
            alpha,
            beta: [beta.x, beta.y, beta.z],
            slope_deviation,
            contraction,
            converged: done,
        });
        observer(history.last().expect("just pushed"));
        if done {
            converged = true;
        }
        if converged || n >= options.n_max {
            if stages.len() < options.keep_stages {
                stages.push(stage);
            }
            break;
        }
        let next = renormalize(params, &stage).map_err(|e| escape(n, e))?;
        if stages.len() < options.keep_stages {
            stages.push(stage);
        }
        stage = next;
    }
    let last = history.last().expect("history is never empty");
    Ok(FlowResult {
        e0_inf: last.e0n,
        z_inf: params.rho0 * last.e0n,
        alpha: last.alpha,
        beta: Vec3::new(last.beta[0], last.beta[1], last.beta[2]),
        converged,
        neumann_ratio: ratio,
        history,
        relevant,
        stages,
    })
}

fn escape(iteration: usize, e: Error) -> Error {
    match e {
        Error::InversionFailed { .. } | Error::ResolventDomain { .. } | Error::NonFinite(_) => Error::PolydiscEscape {
            iteration,
            reason: e.to_string(),
        },
        other => other,
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GroundStateReport {
    pub stages_used: usize,
    pub overlap: f64,
    pub residual: f64,
    pub norm_before: f64,
}

/// `Ψ = Q₋₁Γ*_{ρ₀}Q₀Γ*_ρ ⋯ Q_n(↓⊗Ω)` with `n + 1` the number of retained stages, normalized.
/// `full` carries the first step (spin ⊗ Fock over the flow grid), `reduced` the later stages.
pub fn ground_state(
    params: &ModelParams,
    flow: &FlowResult,
    full: &SpinFock,
    reduced: &FockBasis,
) -> Result<(DVector<Complex64>, GroundStateReport)> {
    if flow.stages.is_empty() {
        return Err(Error::Invalid("no retained stages".into()));
    }
    let depth = flow.stages.len();
    let tracked = flow.tracked_zetas(params)?;
    let floor = params.margin_floor;
    let mut phi = DVector::zeros(reduced.dim());
    phi[reduced.vacuum()] = Complex64::from(1.0);
    let back = dilation_map(reduced, params.rho)?;
    for n in (0..depth).rev() {
        let seq = flow.stages[n].at(tracked[n])?;
        let h = assemble_operator(&seq, reduced)?;
        let (t, c, cb) = diagonal_split(&seq, reduced, params.rho);
        let pair = FeshbachPair::new(h, t, &c, &cb, floor)?;
        let (q, _) = q_operators(&pair);
        phi = &q * &phi;
        if n > 0 {
            let mut pulled = DVector::zeros(reduced.dim());
            for (s, target) in back.iter().enumerate() {
                if let Some(t) = target {
                    pulled[s] = phi[*t];
                }
            }
            phi = pulled;
        }
    }
    // Γ*_{ρ₀} into the ↓ sector of the full space
    let z = Complex64::from(params.rho0 * tracked[0]);
    let map = dilation_map(&full.fock, params.rho0)?;
    let mut psi = DVector::zeros(full.dim());
    for (s, target) in map.iter().enumerate() {
        if let Some(t) = target {
            if let Some(red) = reduced.find(&full.fock.states[*t].modes) {
                psi[full.idx(DOWN, s)] = phi[red];
            }
        }
    }
    let pair = first_step_pair(params, z, full)?;
    let (q, _) = q_operators(&pair);
    let mut psi = &q * &psi;
    let norm_before = psi.norm();
    if norm_before == 0.0 {
        return Err(Error::Invalid("ground-state chain produced the zero vector".into()));
    }
    psi /= Complex64::from(norm_before);
    let h = fiber_dense(params, full);
    let mut resid = &h * &psi;
    resid -= &psi * Complex64::from(flow.z_inf);
    let overlap = psi[full.idx(DOWN, full.fock.vacuum())].norm();
    Ok((
        psi,
        GroundStateReport {
            stages_used: depth,
            overlap,
            residual: resid.norm(),
            norm_before,
        },
    ))
}

/// `T = w_{0,0}(H_f, P_f)`, `χ_ρ(H_f)` and `χ̄_ρ(H_f)` as diagonal matrices on `basis`.
fn diagonal_split(
    seq: &KernelSequence,
    basis: &FockBasis,
    rho: f64,
) -> (
    crate::fockspace::FockOperator,
    crate::fockspace::FockOperator,
    crate::fockspace::FockOperator,
) {
    let n = basis.dim();
    let mut t = crate::fockspace::FockOperator::zeros(n, n);
    let mut c = t.clone();
    let mut cb = t.clone();
    for (s, st) in basis.states.iter().enumerate() {
        t[(s, s)] = seq.w00_at(st.r, &st.l_vec());
        let x = chi(st.r, rho);
        c[(s, s)] = Complex64::from(x);
        cb[(s, s)] = Complex64::from((1.0 - x * x).max(0.0).sqrt());
    }
    (t, c, cb)
}
