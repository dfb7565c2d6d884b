//! Wick ordering of products of Wick monomials.
//!
//! A product `W(w_1) F_1 W(w_2) ⋯ F_{L-1} W(w_L)` is rewritten as a sum of Wick monomials.
//! At vertex `i` the kernel `w_{M_i,N_i}` keeps `m_i` creation and `n_i` annihilation
//! arguments external and contracts the remaining `p_i` and `q_i` with other vertices.
//! External creators are pulled to the left and external annihilators to the right, which
//! shifts the field-energy argument of every kernel and every `F` (pull-through formula).

use std::collections::BTreeMap;
use std::fmt::Debug;
use std::ops::{Add, AddAssign, Mul};

use num_complex::Complex64;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fockspace::{Leg, ModeGrid};
use crate::kernels::RtGrid;
use crate::model::{Spin, Vec3};

/// Scalar or spin-matrix amplitude carried through a chain.
pub trait Amplitude: Copy + Send + Sync + Debug + Add<Output = Self> + Mul<Output = Self> + AddAssign {
    fn zero() -> Self;
    fn scale(self, c: f64) -> Self;
    fn magnitude(&self) -> f64;
}

impl Amplitude for Complex64 {
    fn zero() -> Self {
        Complex64::new(0.0, 0.0)
    }
    fn scale(self, c: f64) -> Self {
        self * c
    }
    fn magnitude(&self) -> f64 {
        self.norm()
    }
}

impl Amplitude for Spin {
    fn zero() -> Self {
        Spin::zeros()
    }
    fn scale(self, c: f64) -> Self {
        self * Complex64::from(c)
    }
    fn magnitude(&self) -> f64 {
        self.iter().map(|c| c.norm()).fold(0.0, f64::max)
    }
}

/// Vertex kernels `w_{m,n}(r, l, K)`.
pub trait KernelSource<A>: Sync {
    fn available(&self, m: usize, n: usize) -> bool;
    /// `create` and `annih` hold the creation and annihilation arguments in order.
    fn value(&self, m: usize, n: usize, r: f64, l: &Vec3, create: &[Leg], annih: &[Leg]) -> A;
    /// Upper bound on |w_{m,n}|, used for pruning.
    fn bound(&self, m: usize, n: usize) -> f64;
}

/// The operator-valued function placed between consecutive vertices.
pub trait Resolvent<A>: Sync {
    /// `position` counts the gaps from the left, starting at 0.
    fn value(&self, position: usize, r: f64, l: &Vec3) -> Result<A>;
    fn bound(&self) -> f64;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct Vertex {
    pub m: usize,
    pub p: usize,
    pub n: usize,
    pub q: usize,
}

impl Vertex {
    pub fn new(m: usize, p: usize, n: usize, q: usize) -> Self {
        Vertex { m, p, n, q }
    }
    /// Creation arguments of the vertex kernel.
    pub fn big_m(&self) -> usize {
        self.m + self.p
    }
    /// Annihilation arguments of the vertex kernel.
    pub fn big_n(&self) -> usize {
        self.n + self.q
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct TermSpec {
    pub vertices: Vec<Vertex>,
}

impl TermSpec {
    pub fn new(vertices: Vec<Vertex>) -> Result<Self> {
        if vertices.is_empty() {
            return Err(Error::Invalid("term of depth 0".into()));
        }
        if vertices.iter().any(|v| v.m + v.p + v.n + v.q == 0) {
            return Err(Error::Invalid("vertex without legs".into()));
        }
        Ok(TermSpec { vertices })
    }

    pub fn depth(&self) -> usize {
        self.vertices.len()
    }

    pub fn total_m(&self) -> usize {
        self.vertices.iter().map(|v| v.m).sum()
    }

    pub fn total_n(&self) -> usize {
        self.vertices.iter().map(|v| v.n).sum()
    }

    /// Contracted operators in order: at each vertex `p` creators then `q` annihilators.
    pub fn internal_pattern(&self) -> Vec<(Op, usize)> {
        let mut out = Vec::new();
        for (i, v) in self.vertices.iter().enumerate() {
            out.extend(std::iter::repeat_n((Op::Create, i), v.p));
            out.extend(std::iter::repeat_n((Op::Annihilate, i), v.q));
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum Op {
    Create,
    Annihilate,
}

/// One term of Wick's theorem: operators left uncontracted (Wick ordered) and the pairing of
/// the rest. Each pair is `(annihilator position, creator position)` with the annihilator to the left.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ContractionScheme {
    pub pattern: Vec<Op>,
    pub uncontracted: Vec<usize>,
    pub pairs: Vec<(usize, usize)>,
}

/// All schemes whose contracted part has a non-vanishing vacuum expectation.
pub fn enumerate_contractions(pattern: &[Op]) -> Vec<ContractionScheme> {
    fn rec(
        pattern: &[Op],
        pos: usize,
        open: &mut Vec<usize>,
        unc: &mut Vec<usize>,
        pairs: &mut Vec<(usize, usize)>,
        out: &mut Vec<ContractionScheme>,
    ) {
        if pos == pattern.len() {
            if open.is_empty() {
                out.push(ContractionScheme {
                    pattern: pattern.to_vec(),
                    uncontracted: unc.clone(),
                    pairs: pairs.clone(),
                });
            }
            return;
        }
        match pattern[pos] {
            Op::Annihilate => {
                unc.push(pos);
                rec(pattern, pos + 1, open, unc, pairs, out);
                unc.pop();
                open.push(pos);
                rec(pattern, pos + 1, open, unc, pairs, out);
                open.pop();
            }
            Op::Create => {
                unc.push(pos);
                rec(pattern, pos + 1, open, unc, pairs, out);
                unc.pop();
                for k in 0..open.len() {
                    let a = open.remove(k);
                    pairs.push((a, pos));
                    rec(pattern, pos + 1, open, unc, pairs, out);
                    pairs.pop();
                    open.insert(k, a);
                }
            }
        }
    }
    let mut out = Vec::new();
    rec(pattern, 0, &mut Vec::new(), &mut Vec::new(), &mut Vec::new(), &mut out);
    out
}

/// `C = Π binom(M_i, p_i)·binom(N_i, q_i)`; `None` on overflow.
pub fn combinatorial_weight(spec: &TermSpec) -> Option<u128> {
    let mut c: u128 = 1;
    for v in &spec.vertices {
        c = c.checked_mul(binomial(v.big_m(), v.p)?)?;
        c = c.checked_mul(binomial(v.big_n(), v.q)?)?;
    }
    Some(c)
}

fn binomial(n: usize, k: usize) -> Option<u128> {
    if k > n {
        return Some(0);
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc.checked_mul((n - i) as u128)? / (i as u128 + 1);
    }
    Some(acc)
}

/// Multiset of internal lines `(i, j)`, `i < j`: a photon created at vertex `j` and
/// annihilated at vertex `i`, together with the number of pairings producing it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LineClass {
    pub lines: Vec<(usize, usize)>,
    pub multiplicity: u64,
}

pub fn line_classes(spec: &TermSpec) -> Vec<LineClass> {
    let pat = spec.internal_pattern();
    let ops: Vec<Op> = pat.iter().map(|x| x.0).collect();
    let mut classes: BTreeMap<Vec<(usize, usize)>, u64> = BTreeMap::new();
    for s in enumerate_contractions(&ops) {
        if !s.uncontracted.is_empty() {
            continue;
        }
        let mut lines: Vec<(usize, usize)> = s.pairs.iter().map(|&(a, c)| (pat[a].1, pat[c].1)).collect();
        lines.sort_unstable();
        *classes.entry(lines).or_default() += 1;
    }
    classes
        .into_iter()
        .map(|(lines, multiplicity)| LineClass { lines, multiplicity })
        .collect()
}

/// Argument shifts of a term: `r[i]`, `l[i]` for the vertex kernels (i = 0..L) and
/// `r_tilde[i]`, `l_tilde[i]` for i = 0..=L, with `F` after vertex `i` using index `i + 1`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ShiftRecord {
    pub r: Vec<f64>,
    pub l: Vec<[f64; 3]>,
    pub r_tilde: Vec<f64>,
    pub l_tilde: Vec<[f64; 3]>,
}

const MAXD: usize = 8;
const MAXLEGS: usize = 8;

struct Shifts {
    r: [f64; MAXD],
    l: [Vec3; MAXD],
    rt: [f64; MAXD + 1],
    lt: [Vec3; MAXD + 1],
}

fn compute_shifts(spec: &TermSpec, create: &[Leg], annih: &[Leg]) -> Shifts {
    let n = spec.depth();
    let mut ck = [(0.0, Vec3::zeros()); MAXD];
    let mut ak = [(0.0, Vec3::zeros()); MAXD];
    let (mut oc, mut oa) = (0, 0);
    for (i, v) in spec.vertices.iter().enumerate() {
        for leg in &create[oc..oc + v.m] {
            ck[i].0 += leg.omega;
            ck[i].1 += leg.k;
        }
        for leg in &annih[oa..oa + v.n] {
            ak[i].0 += leg.omega;
            ak[i].1 += leg.k;
        }
        oc += v.m;
        oa += v.n;
    }
    let mut s = Shifts {
        r: [0.0; MAXD],
        l: [Vec3::zeros(); MAXD],
        rt: [0.0; MAXD + 1],
        lt: [Vec3::zeros(); MAXD + 1],
    };
    // suffix sums of creation energies, prefix sums of annihilation energies
    let mut suffix = [(0.0, Vec3::zeros()); MAXD + 1];
    for i in (0..n).rev() {
        suffix[i] = (suffix[i + 1].0 + ck[i].0, suffix[i + 1].1 + ck[i].1);
    }
    let mut prefix = (0.0, Vec3::zeros());
    for i in 0..n {
        s.r[i] = prefix.0 + suffix[i + 1].0;
        s.l[i] = prefix.1 + suffix[i + 1].1;
        prefix = (prefix.0 + ak[i].0, prefix.1 + ak[i].1);
    }
    let mut prefix = (0.0, Vec3::zeros());
    for i in 0..=n {
        if i > 0 {
            prefix = (prefix.0 + ak[i - 1].0, prefix.1 + ak[i - 1].1);
        }
        s.rt[i] = prefix.0 + suffix[i].0;
        s.lt[i] = prefix.1 + suffix[i].1;
    }
    s
}

/// Partial sums of the external photon energies and momenta entering each position.
pub fn pull_shifts(spec: &TermSpec, create: &[Leg], annih: &[Leg]) -> Result<ShiftRecord> {
    if create.len() != spec.total_m() || annih.len() != spec.total_n() {
        return Err(Error::Invalid(format!(
            "leg assignment ({}, {}) does not match term multiplicities ({}, {})",
            create.len(),
            annih.len(),
            spec.total_m(),
            spec.total_n()
        )));
    }
    if spec.depth() > MAXD {
        return Err(Error::DepthExceeded {
            depth: spec.depth(),
            l_max: MAXD,
        });
    }
    let s = compute_shifts(spec, create, annih);
    let n = spec.depth();
    let arr = |v: &Vec3| [v.x, v.y, v.z];
    Ok(ShiftRecord {
        r: s.r[..n].to_vec(),
        l: s.l[..n].iter().map(arr).collect(),
        r_tilde: s.rt[..=n].to_vec(),
        l_tilde: s.lt[..=n].iter().map(arr).collect(),
    })
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|i| i as f64).product()
}

/// Heap's algorithm; returns all permutations of 0..n.
fn permutations(n: usize) -> Vec<Vec<usize>> {
    let mut a: Vec<usize> = (0..n).collect();
    let mut out = vec![a.clone()];
    let mut c = vec![0; n];
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                a.swap(0, i);
            } else {
                a.swap(c[i], i);
            }
            out.push(a.clone());
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    out
}

/// Averages `values` (indexed by the mode multi-index, creation arguments first, base `nk`)
/// over permutations of the creation and of the annihilation arguments.
pub fn symmetrize<A: Amplitude>(values: &[A], nk: usize, m: usize, n: usize) -> Vec<A> {
    let legs = m + n;
    let size = nk.pow(legs as u32);
    assert_eq!(values.len() % size.max(1), 0);
    if m <= 1 && n <= 1 {
        return values.to_vec();
    }
    let pm = permutations(m);
    let pn = permutations(n);
    let norm = 1.0 / (factorial(m) * factorial(n));
    let blocks = values.len() / size;
    let mut out = vec![A::zero(); values.len()];
    let mut digits = vec![0usize; legs];
    let mut perm = vec![0usize; legs];
    for idx in 0..size {
        let mut x = idx;
        for d in (0..legs).rev() {
            digits[d] = x % nk;
            x /= nk;
        }
        for a in &pm {
            for b in &pn {
                for i in 0..m {
                    perm[i] = digits[a[i]];
                }
                for j in 0..n {
                    perm[m + j] = digits[m + b[j]];
                }
                let src = perm.iter().fold(0, |acc, &d| acc * nk + d);
                for blk in 0..blocks {
                    let v = values[blk * size + src];
                    out[blk * size + idx] += v.scale(norm);
                }
            }
        }
    }
    out
}

/// A term with its contraction classes and combinatorial weight.
#[derive(Clone, Debug)]
pub struct PreparedSpec {
    pub spec: TermSpec,
    pub weight: f64,
    classes: Vec<PreparedClass>,
}

#[derive(Clone, Debug)]
struct PreparedClass {
    multiplicity: f64,
    nlines: usize,
    /// Lines created (resp. annihilated) at each vertex.
    created: Vec<Vec<usize>>,
    annihilated: Vec<Vec<usize>>,
    /// Lines in flight at each vertex kernel and at each gap.
    at_vertex: Vec<Vec<usize>>,
    at_gap: Vec<Vec<usize>>,
}

impl PreparedSpec {
    /// `None` when the internal operators admit no complete pairing.
    pub fn new(spec: TermSpec) -> Result<Option<Self>> {
        if spec.depth() > MAXD {
            return Err(Error::DepthExceeded {
                depth: spec.depth(),
                l_max: MAXD,
            });
        }
        if spec.vertices.iter().any(|v| v.big_m() + v.big_n() > MAXLEGS) {
            return Err(Error::Invalid("vertex with too many legs".into()));
        }
        let classes = line_classes(&spec);
        if classes.is_empty() {
            return Ok(None);
        }
        let l = spec.depth();
        let prepared = classes
            .iter()
            .map(|c| {
                let mut created = vec![Vec::new(); l];
                let mut annihilated = vec![Vec::new(); l];
                let mut at_vertex = vec![Vec::new(); l];
                let mut at_gap = vec![Vec::new(); l.saturating_sub(1)];
                for (idx, &(i, j)) in c.lines.iter().enumerate() {
                    annihilated[i].push(idx);
                    created[j].push(idx);
                    for (a, v) in at_vertex.iter_mut().enumerate() {
                        if i < a && a < j {
                            v.push(idx);
                        }
                    }
                    for (a, g) in at_gap.iter_mut().enumerate() {
                        if i <= a && a < j {
                            g.push(idx);
                        }
                    }
                }
                PreparedClass {
                    multiplicity: c.multiplicity as f64,
                    nlines: c.lines.len(),
                    created,
                    annihilated,
                    at_vertex,
                    at_gap,
                }
            })
            .collect();
        let weight =
            combinatorial_weight(&spec).ok_or_else(|| Error::Invalid("combinatorial weight overflow".into()))? as f64;
        Ok(Some(PreparedSpec {
            spec,
            weight,
            classes: prepared,
        }))
    }

    pub fn line_count(&self) -> usize {
        self.classes.iter().map(|c| c.nlines).max().unwrap_or(0)
    }

    /// Sum of the class multiplicities (number of complete internal pairings).
    pub fn pairings(&self) -> u64 {
        self.classes.iter().map(|c| c.multiplicity as u64).sum()
    }
}

/// All terms of depth 1..=l_max with output (m_out, n_out) built from available vertex kernels.
pub fn term_specs<F>(
    m_out: usize,
    n_out: usize,
    l_max: usize,
    max_legs: usize,
    available: F,
) -> Result<Vec<PreparedSpec>>
where
    F: Fn(usize, usize) -> bool,
{
    let mut kinds = Vec::new();
    for big_m in 0..=max_legs {
        for big_n in 0..=(max_legs - big_m) {
            if big_m + big_n >= 1 && available(big_m, big_n) {
                kinds.push((big_m, big_n));
            }
        }
    }
    let mut out = Vec::new();
    for depth in 1..=l_max {
        let mut stack: Vec<Vec<Vertex>> = vec![Vec::new()];
        for _ in 0..depth {
            let mut next = Vec::new();
            for partial in &stack {
                let used_m: usize = partial.iter().map(|v| v.m).sum();
                let used_n: usize = partial.iter().map(|v| v.n).sum();
                for &(big_m, big_n) in &kinds {
                    for m in 0..=big_m.min(m_out - used_m) {
                        for n in 0..=big_n.min(n_out - used_n) {
                            let mut v = partial.clone();
                            v.push(Vertex::new(m, big_m - m, n, big_n - n));
                            next.push(v);
                        }
                    }
                }
            }
            stack = next;
        }
        for vs in stack {
            let spec = TermSpec::new(vs)?;
            if spec.total_m() != m_out || spec.total_n() != n_out {
                continue;
            }
            if let Some(p) = PreparedSpec::new(spec)? {
                out.push(p);
            }
        }
    }
    Ok(out)
}

/// Evaluates the bracketed vacuum expectation of a term.
pub struct Engine<'a, A> {
    pub grid: &'a ModeGrid,
    pub kernels: &'a dyn KernelSource<A>,
    pub resolvent: &'a dyn Resolvent<A>,
    /// Scale applied to the external variables (ρ in a renormalization step, 1 for plain Wick ordering).
    pub scale: f64,
    /// Grid levels corresponding to `scale`.
    pub steps: usize,
    legs: Vec<Leg>,
    weight_sum: f64,
}

impl<'a, A: Amplitude> Engine<'a, A> {
    pub fn new(
        grid: &'a ModeGrid,
        kernels: &'a dyn KernelSource<A>,
        resolvent: &'a dyn Resolvent<A>,
        scale: f64,
    ) -> Result<Self> {
        let steps = if scale == 1.0 { 0 } else { grid.scale_steps(scale)? };
        Ok(Engine {
            grid,
            kernels,
            resolvent,
            scale,
            steps,
            legs: grid.legs(),
            weight_sum: grid.modes.iter().map(|m| m.weight).sum(),
        })
    }

    /// Upper bound on |C·V| for the term, independent of the external point.
    pub fn bound(&self, ps: &PreparedSpec) -> f64 {
        let mut b = ps.weight;
        for v in &ps.spec.vertices {
            if !self.kernels.available(v.big_m(), v.big_n()) {
                return 0.0;
            }
            b *= self.kernels.bound(v.big_m(), v.big_n());
        }
        b *= self.resolvent.bound().powi(ps.spec.depth() as i32 - 1);
        let pairs: f64 = ps
            .classes
            .iter()
            .map(|c| c.multiplicity * self.weight_sum.powi(c.nlines as i32))
            .sum();
        b * pairs
    }

    /// V of the term at the external point, without outer cutoff factors or weights.
    pub fn assemble_v(&self, ps: &PreparedSpec, r: f64, l: &Vec3, create: &[Leg], annih: &[Leg]) -> Result<A> {
        let spec = &ps.spec;
        let depth = spec.depth();
        if create.len() != spec.total_m() || annih.len() != spec.total_n() {
            return Err(Error::Invalid("leg assignment does not match term".into()));
        }
        let sh = compute_shifts(spec, create, annih);
        // scaled external legs per vertex
        let mut ext_c: [[Leg; MAXLEGS]; MAXD] = [[dummy_leg(); MAXLEGS]; MAXD];
        let mut ext_a: [[Leg; MAXLEGS]; MAXD] = [[dummy_leg(); MAXLEGS]; MAXD];
        let (mut oc, mut oa) = (0, 0);
        for (i, v) in spec.vertices.iter().enumerate() {
            for j in 0..v.m {
                let leg = self.grid.scale_leg(&create[oc + j], self.scale, self.steps);
                if leg.mode.is_none() {
                    return Ok(A::zero());
                }
                ext_c[i][j] = leg;
            }
            for j in 0..v.n {
                let leg = self.grid.scale_leg(&annih[oa + j], self.scale, self.steps);
                if leg.mode.is_none() {
                    return Ok(A::zero());
                }
                ext_a[i][j] = leg;
            }
            oc += v.m;
            oa += v.n;
        }
        let base_r: [f64; MAXD] = std::array::from_fn(|i| self.scale * (r + sh.r[i]));
        let base_l: [Vec3; MAXD] = std::array::from_fn(|i| (l + sh.l[i]) * self.scale);
        let gap_r: [f64; MAXD] = std::array::from_fn(|i| self.scale * (r + sh.rt[i + 1]));
        let gap_l: [Vec3; MAXD] = std::array::from_fn(|i| (l + sh.lt[i + 1]) * self.scale);

        let nm = self.legs.len();
        let mut total = A::zero();
        for class in &ps.classes {
            let nl = class.nlines;
            let mut idx = [0usize; 2 * MAXLEGS];
            let mut sum = A::zero();
            'assign: loop {
                let mut w = 1.0;
                for &i in &idx[..nl] {
                    w *= self.grid.modes[i].weight;
                }
                let mut acc: Option<A> = None;
                for a in 0..depth {
                    let v = &spec.vertices[a];
                    let mut cr = ext_c[a];
                    let mut an = ext_a[a];
                    for (s, &line) in class.created[a].iter().enumerate() {
                        cr[v.m + s] = self.legs[idx[line]];
                    }
                    for (s, &line) in class.annihilated[a].iter().enumerate() {
                        an[v.n + s] = self.legs[idx[line]];
                    }
                    let (mut rr, mut ll) = (base_r[a], base_l[a]);
                    for &line in &class.at_vertex[a] {
                        rr += self.legs[idx[line]].omega;
                        ll += self.legs[idx[line]].k;
                    }
                    let kv = self
                        .kernels
                        .value(v.big_m(), v.big_n(), rr, &ll, &cr[..v.big_m()], &an[..v.big_n()]);
                    if kv.magnitude() == 0.0 {
                        acc = None;
                        break;
                    }
                    acc = Some(match acc {
                        None => kv,
                        Some(x) => x * kv,
                    });
                    if a + 1 < depth {
                        let (mut rr, mut ll) = (gap_r[a], gap_l[a]);
                        for &line in &class.at_gap[a] {
                            rr += self.legs[idx[line]].omega;
                            ll += self.legs[idx[line]].k;
                        }
                        let f = self.resolvent.value(a, rr, &ll)?;
                        if f.magnitude() == 0.0 {
                            acc = None;
                            break;
                        }
                        acc = acc.map(|x| x * f);
                    }
                }
                if let Some(x) = acc {
                    sum += x.scale(w);
                }
                // odometer over line modes
                let mut d = 0;
                loop {
                    if d == nl {
                        break 'assign;
                    }
                    idx[d] += 1;
                    if idx[d] < nm {
                        break;
                    }
                    idx[d] = 0;
                    d += 1;
                }
            }
            total += sum.scale(class.multiplicity);
        }
        Ok(total)
    }

    /// `Σ_terms sign·C·V` at one external point, split by depth.
    pub fn series_point(
        &self,
        specs: &[(PreparedSpec, bool)],
        signed: bool,
        r: f64,
        l: &Vec3,
        create: &[Leg],
        annih: &[Leg],
        by_depth: &mut [A],
    ) -> Result<()> {
        for (ps, active) in specs {
            if !active {
                continue;
            }
            let v = self.assemble_v(ps, r, l, create, annih)?;
            let sign = if signed && ps.spec.depth() % 2 == 0 { -1.0 } else { 1.0 };
            by_depth[ps.spec.depth() - 1] += v.scale(sign * ps.weight);
        }
        Ok(())
    }
}

fn dummy_leg() -> Leg {
    Leg {
        mode: None,
        k: Vec3::zeros(),
        omega: 0.0,
    }
}

/// Result of evaluating a series for one output kernel on the (r, t) × modes grid.
pub struct GridSeries<A> {
    /// `by_depth[L-1][point * nk^(m+n) + K]`, symmetrized.
    pub by_depth: Vec<Vec<A>>,
    /// Sum of the magnitude bounds of pruned terms.
    pub dropped: f64,
}

/// Evaluates `Σ_L Σ_terms (−1)^{L−1} C V^sym` for output (m, n) at every grid point.
///
/// Points whose outer cutoff factors vanish on the whole adjacent r-cell are skipped.
pub fn series_on_grid<A: Amplitude>(
    engine: &Engine<'_, A>,
    specs: &[PreparedSpec],
    rt: &RtGrid,
    m: usize,
    n: usize,
    l_max: usize,
    prune_tol: f64,
) -> Result<GridSeries<A>> {
    let nk = engine.grid.len();
    let legs = m + n;
    let size = nk.pow(legs as u32);
    let mut dropped = 0.0;
    let active: Vec<(PreparedSpec, bool)> = specs
        .iter()
        .map(|ps| {
            let b = engine.bound(ps);
            let keep = b > prune_tol && b > 0.0;
            if !keep {
                dropped += b;
            }
            (ps.clone(), keep)
        })
        .collect();
    let npts = rt.len();
    if !active.iter().any(|a| a.1) {
        let by_depth = vec![vec![A::zero(); npts * size]; l_max];
        return Ok(GridSeries { by_depth, dropped });
    }
    let rows: Vec<Result<Vec<Vec<A>>>> = (0..npts)
        .into_par_iter()
        .map(|pt| {
            let mut row = vec![vec![A::zero(); size]; l_max];
            let (r, l) = rt.point(pt);
            let r_prev = rt.r_support_edge(pt);
            let mut create = [dummy_leg(); MAXLEGS];
            let mut annih = [dummy_leg(); MAXLEGS];
            let mut buf = vec![A::zero(); l_max];
            let mut digits = [0usize; MAXLEGS];
            for kidx in 0..size {
                let mut x = kidx;
                for d in (0..legs).rev() {
                    digits[d] = x % nk;
                    x /= nk;
                }
                let mut sc = 0.0;
                let mut sa = 0.0;
                let mut ok = true;
                for d in 0..legs {
                    let leg = Leg::of(&engine.grid.modes[digits[d]]);
                    if engine.grid.scaled_index(digits[d], engine.steps).is_none() {
                        ok = false;
                    }
                    if d < m {
                        sc += leg.omega;
                        create[d] = leg;
                    } else {
                        sa += leg.omega;
                        annih[d - m] = leg;
                    }
                }
                if !ok || (legs > 0 && (r_prev + sc >= 1.0 || r_prev + sa >= 1.0)) {
                    continue;
                }
                buf.iter_mut().for_each(|b| *b = A::zero());
                engine.series_point(&active, true, r, &l, &create[..m], &annih[..n], &mut buf)?;
                for (dst, v) in row.iter_mut().zip(&buf) {
                    dst[kidx] = *v;
                }
            }
            Ok(row)
        })
        .collect();
    let mut by_depth = vec![Vec::with_capacity(npts * size); l_max];
    for row in rows {
        for (dst, src) in by_depth.iter_mut().zip(row?) {
            dst.extend(src);
        }
    }
    let by_depth = by_depth.into_iter().map(|v| symmetrize(&v, nk, m, n)).collect();
    Ok(GridSeries { by_depth, dropped })
}

/// Random symmetric kernels of product form on a small grid:
/// `w(r, l, K) = g(r, l)·Π h_c(k_i)·Π h_a(k̃_j) + s·(1 + r)·(Σ u_c(k_i) + Σ u_a(k̃_j))²`.
#[derive(Clone, Debug)]
pub struct ProductKernels {
    pub kinds: Vec<(usize, usize)>,
    table: BTreeMap<(usize, usize), ProductKernel>,
}

#[derive(Clone, Debug)]
struct ProductKernel {
    g: [Complex64; 4],
    s: Complex64,
    hc: Vec<Complex64>,
    ha: Vec<Complex64>,
    uc: Vec<Complex64>,
    ua: Vec<Complex64>,
}

impl ProductKernels {
    pub fn random<R: rand::Rng>(rng: &mut R, modes: usize, max_legs: usize) -> Self {
        let mut c = || Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let mut table = BTreeMap::new();
        let mut kinds = Vec::new();
        for total in 1..=max_legs {
            for m in 0..=total {
                let n = total - m;
                kinds.push((m, n));
                let k = ProductKernel {
                    g: [c(), c(), c(), c()],
                    s: c(),
                    hc: (0..modes).map(|_| c()).collect(),
                    ha: (0..modes).map(|_| c()).collect(),
                    uc: (0..modes).map(|_| c()).collect(),
                    ua: (0..modes).map(|_| c()).collect(),
                };
                table.insert((m, n), k);
            }
        }
        ProductKernels { kinds, table }
    }

    pub fn eval(&self, m: usize, n: usize, r: f64, l: &Vec3, cm: &[usize], am: &[usize]) -> Complex64 {
        let k = &self.table[&(m, n)];
        let g = k.g[0] + k.g[1] * r + k.g[2] * l.x + k.g[3] * (r * r);
        let prod: Complex64 = cm.iter().map(|&i| k.hc[i]).chain(am.iter().map(|&i| k.ha[i])).product();
        let sum: Complex64 = cm.iter().map(|&i| k.uc[i]).chain(am.iter().map(|&i| k.ua[i])).sum();
        g * prod + k.s * (1.0 + r) * sum * sum
    }
}

impl KernelSource<Complex64> for ProductKernels {
    fn available(&self, m: usize, n: usize) -> bool {
        self.table.contains_key(&(m, n))
    }

    fn value(&self, m: usize, n: usize, r: f64, l: &Vec3, create: &[Leg], annih: &[Leg]) -> Complex64 {
        let mut cm = [0usize; MAXLEGS];
        let mut am = [0usize; MAXLEGS];
        for (d, leg) in create.iter().enumerate() {
            cm[d] = leg.mode.expect("grid leg");
        }
        for (d, leg) in annih.iter().enumerate() {
            am[d] = leg.mode.expect("grid leg");
        }
        self.eval(m, n, r, l, &cm[..create.len()], &am[..annih.len()])
    }

    fn bound(&self, _m: usize, _n: usize) -> f64 {
        f64::INFINITY
    }
}

/// A smooth scalar function of `(H_f, P_f)` placed between vertices.
#[derive(Clone, Copy, Debug)]
pub struct SmoothResolvent {
    pub a: f64,
    pub b: f64,
}

impl SmoothResolvent {
    pub fn eval(&self, r: f64, l: &Vec3) -> Complex64 {
        Complex64::new(1.0 / (1.5 + r + self.a * l.x), self.b * r)
    }
}

impl Resolvent<Complex64> for SmoothResolvent {
    fn value(&self, _position: usize, r: f64, l: &Vec3) -> Result<Complex64> {
        Ok(self.eval(r, l))
    }

    fn bound(&self) -> f64 {
        f64::INFINITY
    }
}

/// Every term obtained from a fixed sequence of vertex kinds, grouped by output `(M, N)`.
pub fn split_specs(kinds: &[(usize, usize)]) -> Result<BTreeMap<(usize, usize), Vec<(PreparedSpec, bool)>>> {
    let mut out: BTreeMap<(usize, usize), Vec<(PreparedSpec, bool)>> = BTreeMap::new();
    let mut stack: Vec<Vec<Vertex>> = vec![Vec::new()];
    for &(big_m, big_n) in kinds {
        let mut next = Vec::new();
        for partial in &stack {
            for m in 0..=big_m {
                for n in 0..=big_n {
                    let mut v = partial.clone();
                    v.push(Vertex::new(m, big_m - m, n, big_n - n));
                    next.push(v);
                }
            }
        }
        stack = next;
    }
    for vs in stack {
        let spec = TermSpec::new(vs)?;
        let key = (spec.total_m(), spec.total_n());
        if let Some(ps) = PreparedSpec::new(spec)? {
            out.entry(key).or_default().push((ps, true));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize)]
pub struct ReassemblyReport {
    pub sequences: usize,
    pub max_deviation: f64,
    /// Largest entry of the direct products, for scale.
    pub max_entry: f64,
}

/// Compares `W(w_1) F W(w_2) ⋯ F W(w_L)` with its Wick-ordered form on the block of at most
/// `block` photons, for every kind sequence with `L ≤ l_max` and `M_i + N_i ≤ max_legs`.
/// The direct product is computed on a basis large enough that truncation does not touch the block.
pub fn reassembly_check(
    grid: &std::sync::Arc<ModeGrid>,
    kernels: &ProductKernels,
    f: &SmoothResolvent,
    l_max: usize,
    block: usize,
) -> Result<ReassemblyReport> {
    use crate::fockspace::FockBasis;
    use crate::kernels::wick_monomial;
    let engine = Engine::new(grid, kernels, f, 1.0)?;
    let mut sequences: Vec<Vec<(usize, usize)>> = vec![Vec::new()];
    let mut report = ReassemblyReport {
        sequences: 0,
        max_deviation: 0.0,
        max_entry: 0.0,
    };
    for _ in 0..l_max {
        let mut next = Vec::new();
        for s in &sequences {
            for &k in &kernels.kinds {
                let mut t = s.clone();
                t.push(k);
                next.push(t);
            }
        }
        sequences = next.clone();
        for kinds in next {
            let photons = block + kinds.iter().map(|k| k.0).sum::<usize>();
            let basis = FockBasis::new(grid.clone(), photons, None);
            let dim = basis.dim();
            let fdiag = nalgebra::DMatrix::from_fn(dim, dim, |i, j| {
                if i == j {
                    f.eval(basis.states[i].r, &basis.states[i].l_vec())
                } else {
                    Complex64::new(0.0, 0.0)
                }
            });
            let mut direct: Option<nalgebra::DMatrix<Complex64>> = None;
            for &(m, n) in &kinds {
                let w = wick_monomial(&basis, m, n, |r, l, cm, am| kernels.eval(m, n, r, l, cm, am))?;
                direct = Some(match direct {
                    None => w,
                    Some(d) => d * &fdiag * w,
                });
            }
            let direct = direct.expect("non-empty sequence");
            let mut wick = nalgebra::DMatrix::zeros(dim, dim);
            for ((big_m, big_n), specs) in split_specs(&kinds)? {
                let depth = kinds.len();
                let failure = std::sync::Mutex::new(None);
                let op = wick_monomial(&basis, big_m, big_n, |r, l, cm, am| {
                    let create: Vec<Leg> = cm.iter().map(|&i| Leg::of(&grid.modes[i])).collect();
                    let annih: Vec<Leg> = am.iter().map(|&i| Leg::of(&grid.modes[i])).collect();
                    let mut buf = vec![Complex64::new(0.0, 0.0); depth];
                    if let Err(e) = engine.series_point(&specs, false, r, l, &create, &annih, &mut buf) {
                        *failure.lock().expect("poisoned") = Some(e);
                    }
                    buf.iter().sum()
                })?;
                if let Some(e) = failure.into_inner().expect("poisoned") {
                    return Err(e);
                }
                wick += op;
            }
            for i in 0..dim {
                if basis.states[i].modes.len() > block {
                    continue;
                }
                for j in 0..dim {
                    if basis.states[j].modes.len() > block {
                        continue;
                    }
                    report.max_deviation = report.max_deviation.max((direct[(i, j)] - wick[(i, j)]).norm());
                    report.max_entry = report.max_entry.max(direct[(i, j)].norm());
                }
            }
            report.sequences += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pat(s: &str) -> Vec<Op> {
        s.chars()
            .map(|c| if c == '+' { Op::Create } else { Op::Annihilate })
            .collect()
    }

    #[test]
    fn contraction_examples() {
        assert_eq!(enumerate_contractions(&pat("-+")).len(), 2);
        assert_eq!(enumerate_contractions(&pat("++")).len(), 1);
        // b b b* b*: 1 normal-ordered + 4 single + 2 double contractions
        assert_eq!(enumerate_contractions(&pat("--++")).len(), 7);
    }

    #[test]
    fn weights() {
        let s = TermSpec::new(vec![Vertex::new(1, 0, 0, 0)]).unwrap();
        assert_eq!(combinatorial_weight(&s), Some(1));
        let s = TermSpec::new(vec![Vertex::new(1, 1, 0, 0)]).unwrap();
        assert_eq!(combinatorial_weight(&s), Some(2));
        let s = TermSpec::new(vec![Vertex::new(1, 1, 1, 1), Vertex::new(1, 1, 1, 1)]).unwrap();
        assert_eq!(combinatorial_weight(&s), Some(16));
        assert_eq!(binomial(200, 100), None);
    }

    fn leg(w: f64, k: f64) -> Leg {
        Leg {
            mode: Some(0),
            k: Vec3::new(k, 0.0, 0.0),
            omega: w,
        }
    }

    #[test]
    fn shifts_hand_values() {
        let s = TermSpec::new(vec![Vertex::new(0, 1, 0, 0), Vertex::new(0, 0, 0, 1)]).unwrap();
        let rec = pull_shifts(&s, &[], &[]).unwrap();
        assert!(rec.r.iter().chain(&rec.r_tilde).all(|&x| x == 0.0));

        let s = TermSpec::new(vec![Vertex::new(1, 0, 0, 0)]).unwrap();
        let rec = pull_shifts(&s, &[leg(0.3, -0.3)], &[]).unwrap();
        assert_eq!(rec.r, vec![0.0]);
        assert_eq!(rec.r_tilde, vec![0.3, 0.0]);
        assert_eq!(rec.l_tilde[0], [-0.3, 0.0, 0.0]);

        // n₁ = 1 with k̃, m₂ = 1 with k
        let s = TermSpec::new(vec![Vertex::new(0, 0, 1, 0), Vertex::new(1, 0, 0, 0)]).unwrap();
        let rec = pull_shifts(&s, &[leg(0.2, 0.2)], &[leg(0.5, -0.5)]).unwrap();
        assert_eq!(rec.r, vec![0.2, 0.5]);
        assert_eq!(rec.r_tilde, vec![0.2, 0.7, 0.5]);
        for i in 0..2 {
            // r̃_i = r_i + Σk̃_i and r̃_i = r_{i+1} + Σk_{i+1}
            let kt = if i == 0 { 0.5 } else { 0.0 };
            assert!((rec.r_tilde[i + 1] - rec.r[i] - kt).abs() < 1e-15);
        }
        assert!((rec.r_tilde[1] - rec.r[1] - 0.2).abs() < 1e-15);
        assert!(pull_shifts(&s, &[], &[]).is_err());
    }

    #[test]
    fn symmetrize_examples() {
        let nk = 3;
        let mut v = vec![Complex64::zero(); nk * nk];
        for i in 0..nk {
            for j in 0..nk {
                v[i * nk + j] = Complex64::from((i as f64) - (j as f64));
            }
        }
        let s = symmetrize(&v, nk, 2, 0);
        assert!(s.iter().all(|x| x.norm() < 1e-15));
        let sym: Vec<Complex64> = (0..nk * nk)
            .map(|x| Complex64::from(((x / nk) + (x % nk)) as f64))
            .collect();
        assert_eq!(symmetrize(&sym, nk, 2, 0), sym);
    }

    #[test]
    fn class_counts_match_raw_schemes() {
        let spec = TermSpec::new(vec![Vertex::new(0, 2, 0, 0), Vertex::new(0, 0, 0, 2)]);
        assert!(spec.is_ok());
        // Creators left of annihilators cannot pair.
        assert!(PreparedSpec::new(spec.unwrap()).unwrap().is_none());
        let spec = TermSpec::new(vec![Vertex::new(0, 0, 0, 2), Vertex::new(0, 2, 0, 0)]).unwrap();
        let ps = PreparedSpec::new(spec).unwrap().unwrap();
        assert_eq!(ps.pairings(), 2);
    }
}
