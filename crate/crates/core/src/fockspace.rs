//! Truncated, momentum-discretized bosonic Fock space.
//!
//! Photon modes live on a geometric grid: level `j` holds the Gauss–Legendre nodes of
//! `[ρ, 1]·uv` multiplied by `ρ^j`, so multiplying a node by ρ moves it one level down
//! (or below the infrared floor). Modes are unit-normalized, `[b_i, b*_j] = δ_ij`;
//! quadrature weights are carried separately by [`Mode::weight`].
//!
//! In d = 1 the two signed modes ±k share the radial measure 4πk²dk, so photon
//! integrals scale like their three-dimensional counterparts under k → ρk.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::num::NonZeroUsize;
use std::sync::Arc;

use gauss_quad::legendre::GaussLegendre;
use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{dot_sigma, form_factor, polarization, ModelParams, Spin, Vec3};

pub type FockOperator = DMatrix<Complex64>;

/// One discrete photon mode.
#[derive(Clone, Debug)]
pub struct Mode {
    pub index: usize,
    pub level: usize,
    pub k: Vec3,
    pub omega: f64,
    /// Quadrature weight of the cell represented by this mode.
    pub weight: f64,
    pub pol: usize,
    /// ε(k)·σ in d = 3, the configured spin-coupling matrix in d = 1.
    pub coupling: Spin,
    /// |k|^{1/2}·1(|k| ≤ uv).
    pub form: f64,
}

/// A photon argument of a kernel: a grid mode (if it exists) with its momentum.
#[derive(Clone, Copy, Debug)]
pub struct Leg {
    pub mode: Option<usize>,
    pub k: Vec3,
    pub omega: f64,
}

impl Leg {
    pub fn of(mode: &Mode) -> Leg {
        Leg {
            mode: Some(mode.index),
            k: mode.k,
            omega: mode.omega,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ModeGrid {
    pub dim: usize,
    /// Geometric ratio between consecutive levels, `None` for hand-built grids.
    pub ratio: Option<f64>,
    pub levels: usize,
    pub per_level: usize,
    pub uv: f64,
    pub modes: Vec<Mode>,
}

/// Unit directions and solid-angle fractions (summing to 1) of the d = 3 angular rules.
fn angular_rule(n: usize) -> Vec<(Vec3, f64)> {
    let mut out = Vec::new();
    let axes = [Vec3::x(), -Vec3::x(), Vec3::y(), -Vec3::y(), Vec3::z(), -Vec3::z()];
    if n == 6 {
        for a in axes {
            out.push((a, 1.0 / 6.0));
        }
    } else {
        for a in axes {
            out.push((a, 1.0 / 15.0));
        }
        for sx in [1.0, -1.0] {
            for sy in [1.0, -1.0] {
                for sz in [1.0, -1.0] {
                    out.push((Vec3::new(sx, sy, sz) / 3f64.sqrt(), 3.0 / 40.0));
                }
            }
        }
    }
    out
}

impl ModeGrid {
    /// Geometric grid for the model's dimension and grid descriptors.
    pub fn new(params: &ModelParams) -> Result<Self> {
        let g = &params.grid;
        let rho = params.rho;
        let uv = params.uv_cutoff;
        let n = NonZeroUsize::new(g.radial_nodes).ok_or_else(|| Error::Invalid("radial_nodes = 0".into()))?;
        let rule = GaussLegendre::new(n);
        // Nodes and weights of [ρ·uv, uv].
        let (a, b) = (rho * uv, uv);
        let base: Vec<(f64, f64)> = rule
            .as_node_weight_pairs()
            .iter()
            .map(|&(x, w)| (0.5 * ((b - a) * x + (b + a)), 0.5 * (b - a) * w))
            .collect();
        let mut modes = Vec::new();
        let per_level;
        if params.dim == 1 {
            let s = params.spin_coupling();
            per_level = 2 * base.len();
            for j in 0..g.levels {
                let f = rho.powi(j as i32);
                for &(u, w) in &base {
                    for sign in [1.0, -1.0] {
                        let k = Vec3::new(sign * f * u, 0.0, 0.0);
                        modes.push(Mode {
                            index: modes.len(),
                            level: j,
                            k,
                            omega: f * u,
                            weight: 2.0 * PI * f.powi(3) * u * u * w,
                            pol: 0,
                            coupling: s,
                            form: form_factor(&k, uv),
                        });
                    }
                }
            }
        } else {
            let dirs = angular_rule(g.directions);
            per_level = 2 * base.len() * dirs.len();
            for j in 0..g.levels {
                let f = rho.powi(j as i32);
                for &(u, w) in &base {
                    for &(n_hat, frac) in &dirs {
                        for pol in 1..=2 {
                            let k = n_hat * (f * u);
                            let e = polarization(&k, pol)?;
                            modes.push(Mode {
                                index: modes.len(),
                                level: j,
                                k,
                                omega: f * u,
                                weight: f.powi(3) * u * u * w * 4.0 * PI * frac,
                                pol: pol - 1,
                                coupling: dot_sigma(&e),
                                form: form_factor(&k, uv),
                            });
                        }
                    }
                }
            }
        }
        Ok(ModeGrid {
            dim: params.dim,
            ratio: Some(rho),
            levels: g.levels,
            per_level,
            uv,
            modes,
        })
    }

    /// A non-geometric grid from explicit momenta and weights (used by small algebraic checks).
    pub fn from_momenta(dim: usize, momenta: &[(Vec3, f64)], coupling: Spin, uv: f64) -> Self {
        let modes = momenta
            .iter()
            .enumerate()
            .map(|(i, &(k, w))| Mode {
                index: i,
                level: 0,
                k,
                omega: k.norm(),
                weight: w,
                pol: 0,
                coupling,
                form: form_factor(&k, uv),
            })
            .collect::<Vec<_>>();
        ModeGrid {
            dim,
            ratio: None,
            levels: 1,
            per_level: modes.len(),
            uv,
            modes,
        }
    }

    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    pub fn infrared_floor(&self) -> f64 {
        match self.ratio {
            Some(r) => r.powi(self.levels as i32) * self.uv,
            None => 0.0,
        }
    }

    /// Number of levels `s` with ratio^s = scale, or an error if the grid is not geometric for `scale`.
    pub fn scale_steps(&self, scale: f64) -> Result<usize> {
        let ratio = self.ratio.ok_or(Error::NonGeometricGrid { scale, ratio: f64::NAN })?;
        let s = (scale.ln() / ratio.ln()).round();
        if s < 0.0 || ((ratio.powi(s as i32) - scale) / scale).abs() > 1e-12 {
            return Err(Error::NonGeometricGrid { scale, ratio });
        }
        Ok(s as usize)
    }

    /// Index of the node `ratio^steps · k_i`, or `None` below the infrared floor.
    #[inline]
    pub fn scaled_index(&self, i: usize, steps: usize) -> Option<usize> {
        let level = self.modes[i].level + steps;
        if level < self.levels {
            Some(i + steps * self.per_level)
        } else {
            None
        }
    }

    /// Index of the node `k_i / ratio^steps`, or `None` above the top level.
    #[inline]
    pub fn unscaled_index(&self, i: usize, steps: usize) -> Option<usize> {
        if self.modes[i].level >= steps {
            Some(i - steps * self.per_level)
        } else {
            None
        }
    }

    /// The leg `scale · leg` on this grid (`steps` levels down).
    pub fn scale_leg(&self, leg: &Leg, scale: f64, steps: usize) -> Leg {
        Leg {
            mode: leg.mode.and_then(|i| self.scaled_index(i, steps)),
            k: leg.k * scale,
            omega: leg.omega * scale,
        }
    }

    pub fn legs(&self) -> Vec<Leg> {
        self.modes.iter().map(Leg::of).collect()
    }
}

/// One occupation-number state: the sorted multiset of occupied modes.
#[derive(Clone, Debug, Serialize)]
pub struct FockState {
    pub modes: Vec<u16>,
    pub r: f64,
    pub l: [f64; 3],
}

impl FockState {
    pub fn l_vec(&self) -> Vec3 {
        Vec3::new(self.l[0], self.l[1], self.l[2])
    }

    pub fn occupation(&self, mode: usize) -> usize {
        self.modes.iter().filter(|&&m| m as usize == mode).count()
    }
}

/// Occupation basis with at most `n_max` photons and total energy at most `energy_cap`.
#[derive(Clone, Debug)]
pub struct FockBasis {
    pub grid: Arc<ModeGrid>,
    pub n_max: usize,
    pub energy_cap: Option<f64>,
    pub states: Vec<FockState>,
    index: HashMap<Vec<u16>, usize>,
}

const CAP_SLACK: f64 = 1e-12;

impl FockBasis {
    pub fn new(grid: Arc<ModeGrid>, n_max: usize, energy_cap: Option<f64>) -> Self {
        let mut states = Vec::new();
        let cap = energy_cap.map(|c| c + CAP_SLACK).unwrap_or(f64::INFINITY);
        let mut current = Vec::new();
        for n in 0..=n_max {
            enumerate(&grid, n, 0, 0.0, cap, &mut current, &mut states);
        }
        let index = states.iter().enumerate().map(|(i, s)| (s.modes.clone(), i)).collect();
        FockBasis {
            grid,
            n_max,
            energy_cap,
            states,
            index,
        }
    }

    /// The reduced space: total photon energy ≤ 1.
    pub fn reduced(grid: Arc<ModeGrid>, n_max: usize) -> Self {
        Self::new(grid, n_max, Some(1.0))
    }

    pub fn dim(&self) -> usize {
        self.states.len()
    }

    pub fn vacuum(&self) -> usize {
        0
    }

    pub fn find(&self, modes: &[u16]) -> Option<usize> {
        self.index.get(modes).copied()
    }

    /// b_mode |s⟩ = √n |s − e_mode⟩.
    pub fn annihilate(&self, s: usize, mode: usize) -> Option<(usize, f64)> {
        let st = &self.states[s];
        let pos = st.modes.iter().position(|&m| m as usize == mode)?;
        let n = st.occupation(mode) as f64;
        let mut modes = st.modes.clone();
        modes.remove(pos);
        self.find(&modes).map(|t| (t, n.sqrt()))
    }

    /// b*_mode |s⟩ = √(n+1) |s + e_mode⟩, if the target lies in the basis.
    pub fn create(&self, s: usize, mode: usize) -> Option<(usize, f64)> {
        let st = &self.states[s];
        if st.modes.len() >= self.n_max {
            return None;
        }
        let n = st.occupation(mode) as f64;
        let mut modes = st.modes.clone();
        let pos = modes.partition_point(|&m| (m as usize) <= mode);
        modes.insert(pos, mode as u16);
        self.find(&modes).map(|t| (t, (n + 1.0).sqrt()))
    }

    /// Serializable description of modes and states.
    pub fn dump(&self) -> BasisDump {
        BasisDump {
            schema: "fock-basis/1",
            dim: self.grid.dim,
            n_max: self.n_max,
            energy_cap: self.energy_cap,
            modes: self
                .grid
                .modes
                .iter()
                .map(|m| ModeDump {
                    index: m.index,
                    level: m.level,
                    k: [m.k.x, m.k.y, m.k.z],
                    omega: m.omega,
                    weight: m.weight,
                    pol: m.pol,
                })
                .collect(),
            states: self.states.clone(),
        }
    }
}

fn enumerate(
    grid: &ModeGrid,
    remaining: usize,
    start: usize,
    energy: f64,
    cap: f64,
    current: &mut Vec<u16>,
    out: &mut Vec<FockState>,
) {
    if remaining == 0 {
        let mut l = Vec3::zeros();
        for &m in current.iter() {
            l += grid.modes[m as usize].k;
        }
        out.push(FockState {
            modes: current.clone(),
            r: energy,
            l: [l.x, l.y, l.z],
        });
        return;
    }
    for i in start..grid.len() {
        let e = energy + grid.modes[i].omega;
        if e > cap {
            continue;
        }
        current.push(i as u16);
        enumerate(grid, remaining - 1, i, e, cap, current, out);
        current.pop();
    }
}

#[derive(Serialize)]
pub struct ModeDump {
    pub index: usize,
    pub level: usize,
    pub k: [f64; 3],
    pub omega: f64,
    pub weight: f64,
    pub pol: usize,
}

#[derive(Serialize)]
pub struct BasisDump {
    pub schema: &'static str,
    pub dim: usize,
    pub n_max: usize,
    pub energy_cap: Option<f64>,
    pub modes: Vec<ModeDump>,
    pub states: Vec<FockState>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LadderKind {
    Create,
    Annihilate,
}

/// Matrix of b*_mode or b_mode on the basis (truncated at `n_max`).
pub fn ladder(basis: &FockBasis, mode: usize, kind: LadderKind) -> Result<FockOperator> {
    if mode >= basis.grid.len() {
        return Err(Error::UnknownMode(mode));
    }
    let n = basis.dim();
    let mut a = DMatrix::zeros(n, n);
    for s in 0..n {
        let hit = match kind {
            LadderKind::Create => basis.create(s, mode),
            LadderKind::Annihilate => basis.annihilate(s, mode),
        };
        if let Some((t, amp)) = hit {
            a[(t, s)] = Complex64::from(amp);
        }
    }
    Ok(a)
}

/// Diagonal matrix f(H_f, P_f).
pub fn functional_calculus<F>(basis: &FockBasis, f: F) -> Result<FockOperator>
where
    F: Fn(f64, &Vec3) -> Complex64,
{
    let n = basis.dim();
    let mut a = DMatrix::zeros(n, n);
    for (i, s) in basis.states.iter().enumerate() {
        let v = f(s.r, &s.l_vec());
        if !(v.re.is_finite() && v.im.is_finite()) {
            return Err(Error::NonFinite("functional calculus"));
        }
        a[(i, i)] = v;
    }
    Ok(a)
}

/// Maps each state of the sector H_f ≤ scale to its dilated image, or `None` when the image leaves the basis.
pub fn dilation_map(basis: &FockBasis, scale: f64) -> Result<Vec<Option<usize>>> {
    let steps = basis.grid.scale_steps(scale)?;
    let grid = &basis.grid;
    Ok(basis
        .states
        .iter()
        .map(|s| {
            if s.r > scale * (1.0 + CAP_SLACK) {
                return None;
            }
            let mut modes = Vec::with_capacity(s.modes.len());
            for &m in &s.modes {
                modes.push(grid.unscaled_index(m as usize, steps)? as u16);
            }
            modes.sort_unstable();
            basis.find(&modes)
        })
        .collect())
}

/// Γ_scale: isometry from the sector H_f ≤ scale onto (a subspace of) the reduced space.
pub fn dilation(basis: &FockBasis, scale: f64) -> Result<FockOperator> {
    let map = dilation_map(basis, scale)?;
    let n = basis.dim();
    let mut g = DMatrix::zeros(n, n);
    for (s, t) in map.iter().enumerate() {
        if let Some(t) = t {
            g[(*t, s)] = Complex64::from(1.0);
        }
    }
    Ok(g)
}

/// Spin ⊗ Fock index helpers; the spin index is the slow one.
#[derive(Clone, Debug)]
pub struct SpinFock {
    pub fock: FockBasis,
}

impl SpinFock {
    pub fn new(fock: FockBasis) -> Self {
        SpinFock { fock }
    }

    pub fn dim(&self) -> usize {
        2 * self.fock.dim()
    }

    #[inline]
    pub fn idx(&self, spin: usize, s: usize) -> usize {
        spin * self.fock.dim() + s
    }

    #[inline]
    pub fn split(&self, i: usize) -> (usize, usize) {
        (i / self.fock.dim(), i % self.fock.dim())
    }
}
