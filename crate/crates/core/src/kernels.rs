//! Sampled kernel sequences `w = (w_{m,n})`, their norms, and the assembly `H(w)`.
//!
//! A kernel is sampled on `(r, t)` with `l = r·t` and on ordered tuples of grid modes.
//! The r-nodes are `{0} ∪ {ρ^j u_i}` with `u_i` uniform on `(ρ, 1]`, so scaling by ρ moves
//! a node exactly one block of `per_level` indices down.
//! Kernels with `chi_outer` store `u` and evaluate to `χ(r + Σ|k|)·χ(r + Σ|k̃|)·u`.

use std::collections::BTreeMap;
use std::sync::{Arc, OnceLock};

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fockspace::{FockBasis, FockOperator, Leg, ModeGrid};
use crate::model::{chi1, chi1_prime, ModelParams, Vec3};

/// Sample grid of the base set `B = {(r, l): |l| ≤ r ≤ 1}` in the coordinates `(r, t = l/r)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RtGrid {
    pub dim: usize,
    pub rho: f64,
    pub per_level: usize,
    pub levels: usize,
    /// Ascending, `r[0] = 0`, `r.last() = 1`.
    pub r: Vec<f64>,
    /// Uniform nodes of [−1, 1] along each l-component.
    pub t: Vec<f64>,
    t_points: usize,
}

/// Up to 16 interpolation corners `(point, weight)`.
#[derive(Clone, Copy, Debug)]
pub struct Corners {
    pub items: [(usize, f64); 16],
    pub len: usize,
}

impl RtGrid {
    pub fn new(params: &ModelParams) -> Result<Self> {
        let g = &params.grid;
        Self::build(params.dim, params.rho, g.r_nodes_per_level, g.r_levels, g.t_nodes)
    }

    pub fn build(dim: usize, rho: f64, per_level: usize, levels: usize, t_nodes: usize) -> Result<Self> {
        if per_level == 0 || levels == 0 {
            return Err(Error::Invalid("empty r-grid".into()));
        }
        if t_nodes < 3 || t_nodes % 2 == 0 {
            return Err(Error::InvalidParameter {
                name: "t_nodes",
                value: t_nodes.to_string(),
                reason: "must be odd and at least 3".into(),
            });
        }
        let mut r = vec![0.0];
        for j in (0..levels).rev() {
            let f = rho.powi(j as i32);
            for i in 1..=per_level {
                r.push(f * (rho + (1.0 - rho) * i as f64 / per_level as f64));
            }
        }
        let t: Vec<f64> = (0..t_nodes)
            .map(|i| -1.0 + 2.0 * i as f64 / (t_nodes - 1) as f64)
            .collect();
        let t_points = if dim == 1 { t_nodes } else { t_nodes.pow(3) };
        Ok(RtGrid {
            dim,
            rho,
            per_level,
            levels,
            r,
            t,
            t_points,
        })
    }

    /// Number of (r, t) points.
    pub fn len(&self) -> usize {
        self.r.len() * self.t_points
    }

    pub fn is_empty(&self) -> bool {
        self.r.is_empty()
    }

    pub fn t_points(&self) -> usize {
        self.t_points
    }

    /// Index of the t-point `t = 0`.
    pub fn t_center(&self) -> usize {
        let c = self.t.len() / 2;
        if self.dim == 1 {
            c
        } else {
            (c * self.t.len() + c) * self.t.len() + c
        }
    }

    pub fn t_vec(&self, it: usize) -> Vec3 {
        let n = self.t.len();
        if self.dim == 1 {
            Vec3::new(self.t[it], 0.0, 0.0)
        } else {
            Vec3::new(self.t[it / (n * n)], self.t[(it / n) % n], self.t[it % n])
        }
    }

    /// Per-axis t indices of a t-point.
    fn t_digits(&self, it: usize) -> [usize; 3] {
        let n = self.t.len();
        if self.dim == 1 {
            [it, 0, 0]
        } else {
            [it / (n * n), (it / n) % n, it % n]
        }
    }

    fn t_index(&self, d: [usize; 3]) -> usize {
        let n = self.t.len();
        if self.dim == 1 {
            d[0]
        } else {
            (d[0] * n + d[1]) * n + d[2]
        }
    }

    #[inline]
    pub fn split(&self, pt: usize) -> (usize, usize) {
        (pt / self.t_points, pt % self.t_points)
    }

    /// `(r, l)` of a point.
    pub fn point(&self, pt: usize) -> (f64, Vec3) {
        let (ir, it) = self.split(pt);
        let r = self.r[ir];
        (r, self.t_vec(it) * r)
    }

    /// Whether the point lies in B (|t| ≤ 1).
    pub fn in_ball(&self, pt: usize) -> bool {
        self.t_vec(pt % self.t_points).norm() <= 1.0 + 1e-12
    }

    /// The r-node two positions below (0 at the bottom); values at a node are needed by
    /// interpolation and by the derivative stencil whenever the cell below is in the support.
    pub fn r_support_edge(&self, pt: usize) -> f64 {
        let ir = pt / self.t_points;
        self.r[ir.saturating_sub(2)]
    }

    /// Index of the r-node `scale^steps · r[ir]` (grid-exact), or `None` below the smallest nonzero node.
    pub fn scaled_r_index(&self, ir: usize, steps: usize) -> Option<usize> {
        if ir == 0 {
            return Some(0);
        }
        ir.checked_sub(steps * self.per_level).filter(|&x| x >= 1)
    }

    fn bracket_t(&self, x: f64) -> (usize, f64) {
        let n = self.t.len();
        let h = 2.0 / (n - 1) as f64;
        let x = x.clamp(-1.0, 1.0);
        let i = (((x + 1.0) / h).floor() as usize).min(n - 2);
        (i, (x - self.t[i]) / h)
    }

    /// Multilinear interpolation corners for `(r, l)`; r is clamped to [0, 1], t to [−1, 1]^d.
    pub fn locate(&self, r: f64, l: &Vec3) -> Corners {
        let mut c = Corners {
            items: [(0, 0.0); 16],
            len: 0,
        };
        let r = r.clamp(0.0, 1.0);
        let nr = self.r.len();
        let ir = self.r.partition_point(|&x| x <= r).clamp(1, nr - 1) - 1;
        let s = (r - self.r[ir]) / (self.r[ir + 1] - self.r[ir]);
        let t = if r > 0.0 { l / r } else { Vec3::zeros() };
        let axes = if self.dim == 1 { 1 } else { 3 };
        let mut tb = [(0usize, 0.0f64); 3];
        for (a, b) in tb.iter_mut().enumerate().take(axes) {
            *b = self.bracket_t(t[a]);
        }
        for (jr, wr) in [(ir, 1.0 - s), (ir + 1, s)] {
            if wr == 0.0 {
                continue;
            }
            if jr == 0 {
                c.items[c.len] = (self.t_center(), wr);
                c.len += 1;
                continue;
            }
            for corner in 0..(1usize << axes) {
                let mut d = [0usize; 3];
                let mut w = wr;
                for a in 0..axes {
                    let up = (corner >> a) & 1;
                    d[a] = tb[a].0 + up;
                    w *= if up == 1 { tb[a].1 } else { 1.0 - tb[a].1 };
                }
                if w != 0.0 {
                    c.items[c.len] = (jr * self.t_points + self.t_index(d), w);
                    c.len += 1;
                }
            }
        }
        c
    }
}

/// One sampled kernel `w_{m,n}`; `values[point · nk^{m+n} + K]` with K in base `nk`, creation arguments first.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel {
    pub m: usize,
    pub n: usize,
    /// Values omit the factor `χ(r + Σ|k|)·χ(r + Σ|k̃|)`.
    pub chi_outer: bool,
    pub values: Vec<Complex64>,
}

impl Kernel {
    pub fn zeros(m: usize, n: usize, rt: &RtGrid, nk: usize, chi_outer: bool) -> Self {
        Kernel {
            m,
            n,
            chi_outer,
            values: vec![Complex64::new(0.0, 0.0); rt.len() * nk.pow((m + n) as u32)],
        }
    }

    pub fn tuple_count(&self, nk: usize) -> usize {
        nk.pow((self.m + self.n) as u32)
    }

    fn max_abs(&self) -> f64 {
        self.values.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }
}

fn digits_of(mut idx: usize, nk: usize, out: &mut [usize]) {
    for d in out.iter_mut().rev() {
        *d = idx % nk;
        idx /= nk;
    }
}

/// The RG state at one `(p, z)`.
#[derive(Clone, Debug)]
pub struct KernelSequence {
    pub grid: Arc<ModeGrid>,
    pub rt: Arc<RtGrid>,
    pub p: Vec3,
    pub z: Complex64,
    /// Bound on the magnitude of series terms that were skipped.
    pub dropped_mass: f64,
    kernels: BTreeMap<(usize, usize), Kernel>,
    bounds: OnceLock<BTreeMap<(usize, usize), f64>>,
}

impl KernelSequence {
    /// A sequence holding only `w_{0,0} = f(r, l)`.
    pub fn from_w00<F>(grid: Arc<ModeGrid>, rt: Arc<RtGrid>, p: Vec3, z: Complex64, f: F) -> Self
    where
        F: Fn(f64, &Vec3) -> Complex64,
    {
        let values = (0..rt.len())
            .map(|pt| {
                let (r, l) = rt.point(pt);
                f(r, &l)
            })
            .collect();
        let mut kernels = BTreeMap::new();
        kernels.insert(
            (0, 0),
            Kernel {
                m: 0,
                n: 0,
                chi_outer: false,
                values,
            },
        );
        KernelSequence {
            grid,
            rt,
            p,
            z,
            dropped_mass: 0.0,
            kernels,
            bounds: OnceLock::new(),
        }
    }

    pub fn get(&self, m: usize, n: usize) -> Option<&Kernel> {
        self.kernels.get(&(m, n))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(usize, usize), &Kernel)> {
        self.kernels.iter()
    }

    pub fn insert(&mut self, kernel: Kernel) -> Result<()> {
        let expected = self.rt.len() * kernel.tuple_count(self.grid.len());
        if kernel.values.len() != expected {
            return Err(Error::BasisMismatch(format!(
                "kernel ({}, {}) has {} values, grid needs {expected}",
                kernel.m,
                kernel.n,
                kernel.values.len()
            )));
        }
        if kernel.values.iter().any(|v| !(v.re.is_finite() && v.im.is_finite())) {
            return Err(Error::NonFinite("kernel values"));
        }
        self.kernels.insert((kernel.m, kernel.n), kernel);
        self.bounds = OnceLock::new();
        Ok(())
    }

    pub fn w00(&self) -> &Kernel {
        &self.kernels[&(0, 0)]
    }

    /// Interpolated `w_{0,0}(r, l)`.
    pub fn w00_at(&self, r: f64, l: &Vec3) -> Complex64 {
        interpolate(&self.rt, &self.w00().values, 1, 0, r, l)
    }

    /// `Σ c_i · seq_i` over sequences on the same grids; keys are the union.
    pub fn combine(parts: &[(f64, &KernelSequence)]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Invalid("empty combination".into()))?
            .1;
        let mut out = KernelSequence {
            grid: first.grid.clone(),
            rt: first.rt.clone(),
            p: first.p,
            z: Complex64::new(0.0, 0.0),
            dropped_mass: 0.0,
            kernels: BTreeMap::new(),
            bounds: OnceLock::new(),
        };
        for &(c, s) in parts {
            if !Arc::ptr_eq(&s.grid, &first.grid) || s.rt != first.rt {
                return Err(Error::BasisMismatch("sequences on different grids".into()));
            }
            out.z += s.z * c;
            out.dropped_mass += c.abs() * s.dropped_mass;
            for (key, k) in &s.kernels {
                let e = out.kernels.entry(*key).or_insert_with(|| Kernel {
                    m: k.m,
                    n: k.n,
                    chi_outer: k.chi_outer,
                    values: vec![Complex64::new(0.0, 0.0); k.values.len()],
                });
                if e.chi_outer != k.chi_outer {
                    return Err(Error::BasisMismatch("mixed cutoff conventions".into()));
                }
                e.values.iter_mut().zip(&k.values).for_each(|(a, b)| *a += b * c);
            }
        }
        Ok(out)
    }

    /// Kernel value at `(r, l)` for grid modes `cm` (creation) and `am` (annihilation).
    pub fn eval_modes(&self, m: usize, n: usize, r: f64, l: &Vec3, cm: &[usize], am: &[usize]) -> Complex64 {
        let Some(k) = self.kernels.get(&(m, n)) else {
            return Complex64::new(0.0, 0.0);
        };
        let nk = self.grid.len();
        let mut idx = 0;
        let (mut sc, mut sa) = (0.0, 0.0);
        for &i in cm {
            idx = idx * nk + i;
            sc += self.grid.modes[i].omega;
        }
        for &i in am {
            idx = idx * nk + i;
            sa += self.grid.modes[i].omega;
        }
        let size = k.tuple_count(nk);
        let mut v = interpolate(&self.rt, &k.values, size, idx, r, l);
        if k.chi_outer {
            v *= chi1(r + sc) * chi1(r + sa);
        }
        v
    }

    fn bound_map(&self) -> &BTreeMap<(usize, usize), f64> {
        self.bounds
            .get_or_init(|| self.kernels.iter().map(|(key, k)| (*key, k.max_abs())).collect())
    }
}

/// Multilinear interpolation of the slice `values[point·size + idx]`.
#[inline]
pub fn interpolate(rt: &RtGrid, values: &[Complex64], size: usize, idx: usize, r: f64, l: &Vec3) -> Complex64 {
    let c = rt.locate(r, l);
    let mut acc = Complex64::new(0.0, 0.0);
    for &(pt, w) in &c.items[..c.len] {
        acc += values[pt * size + idx] * w;
    }
    acc
}

impl crate::wick::KernelSource<Complex64> for KernelSequence {
    fn available(&self, m: usize, n: usize) -> bool {
        m + n >= 1 && self.kernels.contains_key(&(m, n))
    }

    fn value(&self, m: usize, n: usize, r: f64, l: &Vec3, create: &[Leg], annih: &[Leg]) -> Complex64 {
        let mut cm = [0usize; 8];
        let mut am = [0usize; 8];
        for (d, leg) in create.iter().enumerate() {
            match leg.mode {
                Some(i) => cm[d] = i,
                None => return Complex64::new(0.0, 0.0),
            }
        }
        for (d, leg) in annih.iter().enumerate() {
            match leg.mode {
                Some(i) => am[d] = i,
                None => return Complex64::new(0.0, 0.0),
            }
        }
        self.eval_modes(m, n, r, l, &cm[..create.len()], &am[..annih.len()])
    }

    fn bound(&self, m: usize, n: usize) -> f64 {
        self.bound_map().get(&(m, n)).copied().unwrap_or(0.0)
    }
}

/// Three-point Lagrange derivative at `xs[at]`.
fn lagrange_derivative(xs: [f64; 3], ys: [Complex64; 3], at: usize) -> Complex64 {
    let x = xs[at];
    let mut d = Complex64::new(0.0, 0.0);
    for j in 0..3 {
        let mut denom = 1.0;
        let mut num = 0.0;
        for k in 0..3 {
            if k != j {
                denom *= xs[j] - xs[k];
            }
        }
        for k in 0..3 {
            if k == j {
                continue;
            }
            let mut prod = 1.0;
            for i in 0..3 {
                if i != j && i != k {
                    prod *= x - xs[i];
                }
            }
            num += prod;
        }
        d += ys[j] * (num / denom);
    }
    d
}

fn stencil(n: usize, i: usize) -> ([usize; 3], usize) {
    if i == 0 {
        ([0, 1, 2], 0)
    } else if i == n - 1 {
        ([n - 3, n - 2, n - 1], 2)
    } else {
        ([i - 1, i, i + 1], 1)
    }
}

/// Sups of `|w|·Π|k|^{-1/2}`, `|∂_r w|·Π|k|^{-1/2}` and `|∂_{l_i} w|·Π|k|^{-1/2}` over the
/// grid nodes in B, plus `w(0, 0)` (for the first tuple). Derivatives use second-order
/// three-point stencils in (r, t) with the chain rule `∂_l = ∂_t / r`, `∂_r|_l = ∂_r|_t − (t/r)·∂_t`;
/// cutoff factors are differentiated analytically.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct KernelNorms {
    pub value_at_origin: [f64; 2],
    pub half: f64,
    pub d_r: f64,
    pub d_l: [f64; 3],
}

pub fn kernel_norms(seq: &KernelSequence, k: &Kernel) -> KernelNorms {
    let rt = &seq.rt;
    let grid = &seq.grid;
    let nk = grid.len();
    let legs = k.m + k.n;
    let size = k.tuple_count(nk);
    let nr = rt.r.len();
    let nt = rt.t.len();
    let axes = if rt.dim == 1 { 1 } else { 3 };
    let per_tuple: Vec<KernelNorms> = (0..size)
        .into_par_iter()
        .map(|kidx| {
            let mut digits = vec![0; legs];
            digits_of(kidx, nk, &mut digits);
            let (mut sc, mut sa, mut weight) = (0.0, 0.0, 1.0);
            for (d, &i) in digits.iter().enumerate() {
                let w = grid.modes[i].omega;
                if d < k.m {
                    sc += w;
                } else {
                    sa += w;
                }
                weight /= w.sqrt();
            }
            let u = |pt: usize| k.values[pt * size + kidx];
            // cutoff product and its r-derivative
            let chi = |r: f64| -> (f64, f64) {
                if k.chi_outer {
                    let (a, b) = (chi1(r + sc), chi1(r + sa));
                    (a * b, chi1_prime(r + sc) * b + a * chi1_prime(r + sa))
                } else {
                    (1.0, 0.0)
                }
            };
            let mut out = KernelNorms::default();
            let origin = u(rt.t_center()) * chi(0.0).0;
            out.value_at_origin = [origin.re, origin.im];
            for ir in 0..nr {
                let r = rt.r[ir];
                let (c, dc) = chi(r);
                for it in 0..rt.t_points() {
                    let pt = ir * rt.t_points() + it;
                    if !rt.in_ball(pt) {
                        continue;
                    }
                    if ir == 0 && it != rt.t_center() {
                        continue;
                    }
                    let val = u(pt);
                    out.half = out.half.max((val * c).norm() * weight);
                    // ∂_r at fixed t
                    let (sr, at) = stencil(nr, ir);
                    let ys = sr.map(|j| u(j * rt.t_points() + if j == 0 { rt.t_center() } else { it }));
                    let du_r_t = lagrange_derivative(sr.map(|j| rt.r[j]), ys, at);
                    if ir == 0 {
                        let dr = du_r_t * c + val * dc;
                        out.d_r = out.d_r.max(dr.norm() * weight);
                        continue;
                    }
                    let td = rt.t_digits(it);
                    let tv = rt.t_vec(it);
                    let mut du_r_l = du_r_t;
                    for a in 0..axes {
                        let (st, at) = stencil(nt, td[a]);
                        let ys = st.map(|j| {
                            let mut d = td;
                            d[a] = j;
                            u(ir * rt.t_points() + rt.t_index(d))
                        });
                        let du_t = lagrange_derivative(st.map(|j| rt.t[j]), ys, at);
                        let du_l = du_t / r;
                        du_r_l -= du_l * tv[a];
                        out.d_l[a] = out.d_l[a].max((du_l * c).norm() * weight);
                    }
                    let dr = du_r_l * c + val * dc;
                    out.d_r = out.d_r.max(dr.norm() * weight);
                }
            }
            out
        })
        .collect();
    let mut acc = KernelNorms::default();
    if let Some(first) = per_tuple.first() {
        acc.value_at_origin = first.value_at_origin;
    }
    for n in per_tuple {
        acc.half = acc.half.max(n.half);
        acc.d_r = acc.d_r.max(n.d_r);
        for a in 0..3 {
            acc.d_l[a] = acc.d_l[a].max(n.d_l[a]);
        }
    }
    acc
}

/// `sup |w|·Π|k_i|^{-1/2}` over grid nodes (m + n ≥ 1).
pub fn norm_half(seq: &KernelSequence, k: &Kernel) -> f64 {
    kernel_norms(seq, k).half
}

/// The ♯-norm: `|w(0,0)| + ‖∂_r w‖ + Σ‖∂_{l_i} w‖` for (0,0), the `‖·‖_{1/2}` analogue otherwise.
pub fn norm_sharp(seq: &KernelSequence, k: &Kernel) -> Result<f64> {
    if seq.rt.r.len() < 3 || seq.rt.t.len() < 3 {
        return Err(Error::Invalid("grid too coarse for the derivative stencil".into()));
    }
    let n = kernel_norms(seq, k);
    let base = if k.m + k.n == 0 {
        Complex64::new(n.value_at_origin[0], n.value_at_origin[1]).norm()
    } else {
        n.half
    };
    Ok(base + n.d_r + n.d_l.iter().sum::<f64>())
}

/// `Σ_{m+n≥1} ξ^{−(m+n)} ‖w_{m,n}‖♯`.
pub fn norm_xi(seq: &KernelSequence, xi: f64) -> Result<f64> {
    let mut s = 0.0;
    for ((m, n), k) in seq.iter() {
        if m + n >= 1 {
            s += xi.powi(-((m + n) as i32)) * norm_sharp(seq, k)?;
        }
    }
    Ok(s)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct NormLedger {
    pub gamma: f64,
    pub delta: f64,
    pub eps: f64,
    /// Dropped-mass error bar on `eps`.
    pub eps_error: f64,
    pub sharp: Vec<((usize, usize), f64)>,
}

/// `γ = ‖w_{0,0} − w_{0,0}(0,0) − (r − p·l/m)‖♯`, `δ = |w_{0,0}(0,0) + z|`, `ε = ‖w‖_{ξ,≥1}♯`.
pub fn polydisc_measure(seq: &KernelSequence, p: &Vec3, z: Complex64, mass: f64, xi: f64) -> Result<NormLedger> {
    let w00 = seq
        .get(0, 0)
        .ok_or_else(|| Error::Invalid("sequence without a (0,0) kernel".into()))?;
    let origin = seq.w00_at(0.0, &Vec3::zeros());
    let mut dev = w00.clone();
    for (pt, v) in dev.values.iter_mut().enumerate() {
        let (r, l) = seq.rt.point(pt);
        *v -= origin + r - p.dot(&l) / mass;
    }
    let gamma = norm_sharp(seq, &dev)?;
    let mut sharp = Vec::new();
    let mut eps = 0.0;
    for ((m, n), k) in seq.iter() {
        let s = norm_sharp(seq, k)?;
        sharp.push(((*m, *n), s));
        if m + n >= 1 {
            eps += xi.powi(-((m + n) as i32)) * s;
        }
    }
    Ok(NormLedger {
        gamma,
        delta: (origin + z).norm(),
        eps,
        eps_error: seq.dropped_mass,
        sharp,
    })
}

/// All ways of applying `count` ladder operators of one kind to `s`: `(target, amplitude, modes)`.
/// Amplitudes include the square roots of the quadrature weights.
fn ladder_paths(
    basis: &FockBasis,
    s: usize,
    count: usize,
    create: bool,
    sqrt_w: &[f64],
) -> Vec<(usize, f64, Vec<usize>)> {
    let mut paths = vec![(s, 1.0, Vec::with_capacity(count))];
    for _ in 0..count {
        let mut next = Vec::new();
        for (st, amp, modes) in &paths {
            for (i, sw) in sqrt_w.iter().enumerate() {
                let hit = if create {
                    basis.create(*st, i)
                } else {
                    basis.annihilate(*st, i)
                };
                if let Some((t, a)) = hit {
                    let mut mm = modes.clone();
                    mm.push(i);
                    next.push((t, amp * a * sw, mm));
                }
            }
        }
        paths = next;
    }
    paths
}

/// The Wick monomial `Σ_K Π√w b*(K) f(H_f, P_f, K) Π√w b(K̃)` on `basis`.
///
/// `f(r, l, creation modes, annihilation modes)`; the basis truncation acts as the projection.
pub fn wick_monomial<F>(basis: &FockBasis, m: usize, n: usize, f: F) -> Result<FockOperator>
where
    F: Fn(f64, &Vec3, &[usize], &[usize]) -> Complex64 + Sync,
{
    let dim = basis.dim();
    let sqrt_w: Vec<f64> = basis.grid.modes.iter().map(|m| m.weight.sqrt()).collect();
    let columns: Vec<Vec<(usize, Complex64)>> = (0..dim)
        .into_par_iter()
        .map(|s| {
            let mut out = Vec::new();
            for (mid, amp_a, am) in ladder_paths(basis, s, n, false, &sqrt_w) {
                let st = &basis.states[mid];
                let l = st.l_vec();
                for (t, amp_c, cm) in ladder_paths(basis, mid, m, true, &sqrt_w) {
                    out.push((t, f(st.r, &l, &cm, &am) * (amp_a * amp_c)));
                }
            }
            out
        })
        .collect();
    let mut a = DMatrix::zeros(dim, dim);
    for (s, col) in columns.into_iter().enumerate() {
        for (t, v) in col {
            if !(v.re.is_finite() && v.im.is_finite()) {
                return Err(Error::NonFinite("kernel in Wick monomial"));
            }
            a[(t, s)] += v;
        }
    }
    Ok(a)
}

/// `H(w) = Σ_{m,n} W_{m,n}(w)` on a basis built over the same mode grid.
pub fn assemble_operator(seq: &KernelSequence, basis: &FockBasis) -> Result<FockOperator> {
    if !Arc::ptr_eq(&seq.grid, &basis.grid) && seq.grid.len() != basis.grid.len() {
        return Err(Error::BasisMismatch(format!(
            "kernel grid has {} modes, basis grid {}",
            seq.grid.len(),
            basis.grid.len()
        )));
    }
    let dim = basis.dim();
    let mut h = DMatrix::zeros(dim, dim);
    for ((m, n), _) in seq.iter() {
        h += wick_monomial(basis, *m, *n, |r, l, cm, am| seq.eval_modes(*m, *n, r, l, cm, am))?;
    }
    Ok(h)
}

/// JSON form of a kernel sequence: grid descriptors plus flattened `[re, im]` arrays.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KernelDump {
    pub schema: String,
    pub dim: usize,
    pub rho: f64,
    pub mode_count: usize,
    pub mode_omegas: Vec<f64>,
    pub r: Vec<f64>,
    pub t: Vec<f64>,
    pub r_per_level: usize,
    pub r_levels: usize,
    pub p: [f64; 3],
    pub z: [f64; 2],
    pub dropped_mass: f64,
    pub kernels: Vec<KernelEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KernelEntry {
    pub m: usize,
    pub n: usize,
    pub chi_outer: bool,
    pub values: Vec<[f64; 2]>,
}

pub const KERNEL_SCHEMA: &str = "kernel-sequence/1";

impl KernelSequence {
    pub fn dump(&self) -> KernelDump {
        KernelDump {
            schema: KERNEL_SCHEMA.into(),
            dim: self.rt.dim,
            rho: self.rt.rho,
            mode_count: self.grid.len(),
            mode_omegas: self.grid.modes.iter().map(|m| m.omega).collect(),
            r: self.rt.r.clone(),
            t: self.rt.t.clone(),
            r_per_level: self.rt.per_level,
            r_levels: self.rt.levels,
            p: [self.p.x, self.p.y, self.p.z],
            z: [self.z.re, self.z.im],
            dropped_mass: self.dropped_mass,
            kernels: self
                .kernels
                .values()
                .map(|k| KernelEntry {
                    m: k.m,
                    n: k.n,
                    chi_outer: k.chi_outer,
                    values: k.values.iter().map(|c| [c.re, c.im]).collect(),
                })
                .collect(),
        }
    }

    /// Rebuilds a sequence from a dump; the mode grid must match the one it was written with.
    pub fn load(dump: &KernelDump, grid: Arc<ModeGrid>) -> Result<Self> {
        if dump.schema != KERNEL_SCHEMA {
            return Err(Error::Invalid(format!("unknown kernel schema `{}`", dump.schema)));
        }
        let omegas_match = dump.mode_count == grid.len()
            && dump
                .mode_omegas
                .iter()
                .zip(&grid.modes)
                .all(|(a, b)| (a - b.omega).abs() <= 1e-14 * b.omega.max(1.0));
        if !omegas_match {
            return Err(Error::BasisMismatch(
                "kernel dump written on a different mode grid".into(),
            ));
        }
        let rt = RtGrid::build(dump.dim, dump.rho, dump.r_per_level, dump.r_levels, dump.t.len())?;
        if rt.r.len() != dump.r.len() || rt.r.iter().zip(&dump.r).any(|(a, b)| (a - b).abs() > 1e-14) {
            return Err(Error::BasisMismatch(
                "r-grid descriptors disagree with the node list".into(),
            ));
        }
        let mut seq = KernelSequence {
            grid,
            rt: Arc::new(rt),
            p: Vec3::new(dump.p[0], dump.p[1], dump.p[2]),
            z: Complex64::new(dump.z[0], dump.z[1]),
            dropped_mass: dump.dropped_mass,
            kernels: BTreeMap::new(),
            bounds: OnceLock::new(),
        };
        for e in &dump.kernels {
            seq.insert(Kernel {
                m: e.m,
                n: e.n,
                chi_outer: e.chi_outer,
                values: e.values.iter().map(|v| Complex64::new(v[0], v[1])).collect(),
            })?;
        }
        if seq.get(0, 0).is_none() {
            return Err(Error::Invalid("kernel dump without a (0,0) entry".into()));
        }
        Ok(seq)
    }
}
