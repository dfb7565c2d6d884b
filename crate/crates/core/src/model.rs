//! Physical model: parameters, the smooth cutoff pair (χ, χ̄), the form factor and
//! the polarization frame of the two-level dipole coupled to the photon field.

use std::f64::consts::PI;
use std::fmt::Write as _;

use nalgebra::{Matrix2, Vector3};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Spin = Matrix2<Complex64>;

/// Index of the excited level in the spin basis (ω₀ sits on it).
pub const UP: usize = 0;
/// Index of the ground level.
pub const DOWN: usize = 1;

/// Plateau edge and support edge of χ.
pub const CHI_PLATEAU: f64 = 0.75;
pub const CHI_SUPPORT: f64 = 1.0;

/// Cutoff profile: 1 on [0, 3/4], 0 on [1, ∞), cos² ramp in between.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CutoffProfile {
    pub plateau: f64,
    pub support: f64,
    pub ramp: RampFamily,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RampFamily {
    CosSquared,
}

impl Default for CutoffProfile {
    fn default() -> Self {
        CutoffProfile {
            plateau: CHI_PLATEAU,
            support: CHI_SUPPORT,
            ramp: RampFamily::CosSquared,
        }
    }
}

impl CutoffProfile {
    /// Supremum of |χ'| on the unit scale.
    pub fn derivative_bound(&self) -> f64 {
        match self.ramp {
            RampFamily::CosSquared => PI / (self.support - self.plateau) / 2.0,
        }
    }
}

/// χ(x) on the unit scale.
#[inline]
pub fn chi1(x: f64) -> f64 {
    if x <= CHI_PLATEAU {
        1.0
    } else if x >= CHI_SUPPORT {
        0.0
    } else {
        let c = (0.5 * PI * (4.0 * x - 3.0)).cos();
        c * c
    }
}

/// dχ/dx on the unit scale.
#[inline]
pub fn chi1_prime(x: f64) -> f64 {
    if x <= CHI_PLATEAU || x >= CHI_SUPPORT {
        0.0
    } else {
        -2.0 * PI * (PI * (4.0 * x - 3.0)).sin()
    }
}

/// χ̄² = 1 − χ² on the unit scale.
#[inline]
pub fn chibar1_sq(x: f64) -> f64 {
    let c = chi1(x);
    1.0 - c * c
}

/// χ_ρ(x) = χ(x/ρ).
#[inline]
pub fn chi(x: f64, scale: f64) -> f64 {
    chi1(x / scale)
}

/// χ̄_ρ(x) = √(1 − χ_ρ(x)²).
#[inline]
pub fn chibar(x: f64, scale: f64) -> f64 {
    chibar1_sq(x / scale).max(0.0).sqrt()
}

/// |k|^{1/2} with a sharp ultraviolet cutoff.
#[inline]
pub fn form_factor(k: &Vec3, uv_cutoff: f64) -> f64 {
    let a = k.norm();
    if a <= uv_cutoff {
        a.sqrt()
    } else {
        0.0
    }
}

/// Transverse polarization vector ε_λ(k), λ ∈ {1, 2}.
///
/// The frame is (ẑ × k̂, k̂ × ε₁) normalized; for k parallel to e_z the fixed frame (e_x, e_y) is used.
pub fn polarization(k: &Vec3, lambda: usize) -> Result<Vec3> {
    let a = k.norm();
    if a == 0.0 || !a.is_finite() {
        return Err(Error::Invalid("polarization undefined at k = 0".into()));
    }
    if !(1..=2).contains(&lambda) {
        return Err(Error::Invalid(format!("polarization index {lambda} not in {{1,2}}")));
    }
    let khat = k / a;
    let ez = Vec3::z();
    let cross = ez.cross(&khat);
    let (e1, e2) = if cross.norm() < 1e-12 {
        (Vec3::x(), Vec3::y())
    } else {
        let e1 = cross.normalize();
        (e1, khat.cross(&e1))
    };
    Ok(if lambda == 1 { e1 } else { e2 })
}

pub fn sigma_x() -> Spin {
    let o = Complex64::new(0.0, 0.0);
    let l = Complex64::new(1.0, 0.0);
    Spin::new(o, l, l, o)
}

pub fn sigma_y() -> Spin {
    let o = Complex64::new(0.0, 0.0);
    let i = Complex64::new(0.0, 1.0);
    Spin::new(o, -i, i, o)
}

pub fn sigma_z() -> Spin {
    let o = Complex64::new(0.0, 0.0);
    let l = Complex64::new(1.0, 0.0);
    Spin::new(l, o, o, -l)
}

/// ε·σ for a real 3-vector ε.
pub fn dot_sigma(e: &Vec3) -> Spin {
    sigma_x() * Complex64::from(e.x) + sigma_y() * Complex64::from(e.y) + sigma_z() * Complex64::from(e.z)
}

/// Spin-coupling matrix replacing ε·σ in d = 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpinCoupling {
    SigmaX,
    SigmaXZ,
}

impl SpinCoupling {
    pub fn matrix(self) -> Spin {
        match self {
            SpinCoupling::SigmaX => sigma_x(),
            SpinCoupling::SigmaXZ => sigma_x() + sigma_z(),
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "sigma_x" => Some(SpinCoupling::SigmaX),
            "sigma_xz" => Some(SpinCoupling::SigmaXZ),
            _ => None,
        }
    }

    fn name(self) -> &'static str {
        match self {
            SpinCoupling::SigmaX => "sigma_x",
            SpinCoupling::SigmaXZ => "sigma_xz",
        }
    }
}

/// Discretization descriptors shared by the Fock space and the kernel grids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Number of geometric photon levels; the infrared floor is ρ^levels·uv_cutoff.
    pub levels: usize,
    /// Gauss–Legendre radial nodes per level.
    pub radial_nodes: usize,
    /// Angular nodes in d = 3 (6 or 14).
    pub directions: usize,
    /// r-nodes per geometric level of the (r, l) kernel grid.
    pub r_nodes_per_level: usize,
    /// Geometric levels of the r-grid.
    pub r_levels: usize,
    /// Nodes per component of t = l/r on [−1, 1] (odd).
    pub t_nodes: usize,
    /// Chebyshev z-samples per RG stage.
    pub z_samples: usize,
    /// Half width of the z-sample window as a fraction of μ/2.
    pub z_window: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            levels: 6,
            radial_nodes: 1,
            directions: 6,
            r_nodes_per_level: 12,
            r_levels: 8,
            t_nodes: 5,
            z_samples: 9,
            z_window: 0.5,
        }
    }
}

/// Physical and renormalization-group parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub dim: usize,
    pub m: f64,
    pub omega0: f64,
    pub lambda0: f64,
    pub p_star: Vec3,
    pub p: Vec3,
    pub rho0: f64,
    pub rho: f64,
    pub xi: f64,
    pub coupling: SpinCoupling,
    pub uv_cutoff: f64,
    pub m_max: usize,
    pub l_max: usize,
    pub n_max: usize,
    pub grid: GridSpec,
    /// Flow tolerance in units of μ.
    pub tol_factor: f64,
    pub n_iter: usize,
    /// Absolute magnitude below which a series term is skipped (and booked as dropped mass).
    pub prune_tol: f64,
    /// Floor for invertibility margins, relative to the natural scale of the operator.
    pub margin_floor: f64,
    /// Polydisc multipliers: γ ≤ κ_γ μ, δ ≤ κ_δ ρμ, ε ≤ κ_ε ρ²μ².
    pub kappa_gamma: f64,
    pub kappa_delta: f64,
    pub kappa_eps: f64,
}

impl Default for ModelParams {
    fn default() -> Self {
        ModelParams {
            dim: 1,
            m: 1.0,
            omega0: 1.0,
            lambda0: 0.0,
            p_star: Vec3::zeros(),
            p: Vec3::zeros(),
            rho0: 0.0625,
            rho: 0.25,
            xi: 0.04,
            coupling: SpinCoupling::SigmaX,
            uv_cutoff: 1.0,
            m_max: 2,
            l_max: 3,
            n_max: 3,
            grid: GridSpec::default(),
            tol_factor: 1e-10,
            n_iter: 40,
            prune_tol: 1e-15,
            margin_floor: 1e-10,
            kappa_gamma: 0.25,
            kappa_delta: 0.25,
            kappa_eps: 0.25,
        }
    }
}

fn bad(name: &'static str, value: impl ToString, reason: &str) -> Error {
    Error::InvalidParameter {
        name,
        value: value.to_string(),
        reason: reason.to_string(),
    }
}

/// Upper bound on the kernel weight ξ.
pub fn xi_max() -> f64 {
    1.0 / (4.0 * (8.0 * PI).sqrt())
}

impl ModelParams {
    /// Gap parameter μ = (m − |p*|)/(2m).
    pub fn mu(&self) -> f64 {
        (self.m - self.p_star.norm()) / (2.0 * self.m)
    }

    pub fn polarizations(&self) -> usize {
        if self.dim == 3 {
            2
        } else {
            1
        }
    }

    pub fn spin_coupling(&self) -> Spin {
        self.coupling.matrix()
    }

    pub fn tol(&self) -> f64 {
        self.tol_factor * self.mu()
    }

    /// Returns a copy with the momentum replaced.
    pub fn with_p(&self, p: Vec3) -> Self {
        ModelParams { p, ..self.clone() }
    }

    pub fn with_lambda(&self, lambda0: f64) -> Self {
        ModelParams {
            lambda0,
            ..self.clone()
        }
    }

    /// Checks every constructor constraint.
    pub fn validate(&self) -> Result<()> {
        if self.dim != 1 && self.dim != 3 {
            return Err(bad("dim", self.dim, "must be 1 or 3"));
        }
        if !(self.m > 0.0 && self.m.is_finite()) {
            return Err(bad("m", self.m, "must be positive"));
        }
        if !(self.omega0 > 0.0 && self.omega0.is_finite()) {
            return Err(bad("omega0", self.omega0, "must be positive"));
        }
        if !(self.lambda0 >= 0.0 && self.lambda0.is_finite()) {
            return Err(bad("lambda0", self.lambda0, "must be non-negative"));
        }
        if self.dim == 1 && (self.p.y != 0.0 || self.p.z != 0.0 || self.p_star.y != 0.0 || self.p_star.z != 0.0) {
            return Err(bad(
                "p",
                format!("{:?}", self.p.as_slice()),
                "d = 1 momenta have a single component",
            ));
        }
        if self.p_star.norm() >= self.m {
            return Err(bad("p_star", self.p_star.norm(), "|p*| must be below m"));
        }
        let mu = self.mu();
        if !(mu > 0.0 && mu <= 0.5) {
            return Err(bad("p_star", self.p_star.norm(), "gap parameter μ outside (0, 1/2]"));
        }
        if (self.p - self.p_star).norm() >= mu * self.m {
            return Err(bad("p", self.p.norm(), "|p − p*| must be below μm"));
        }
        if !(self.rho > 0.0 && self.rho < 0.5) {
            return Err(bad("rho", self.rho, "must lie in (0, 1/2)"));
        }
        if !(self.xi > 0.0 && self.xi < xi_max()) {
            return Err(bad("xi", self.xi, "must lie in (0, 1/(4√(8π)))"));
        }
        if !(self.rho0 > 0.0 && self.rho0 < self.omega0 && self.rho0 < self.xi.powf(2.0 / 3.0)) {
            return Err(bad("rho0", self.rho0, "must lie in (0, min(ω₀, ξ^{2/3}))"));
        }
        if !(self.uv_cutoff > 0.0) {
            return Err(bad("uv_cutoff", self.uv_cutoff, "must be positive"));
        }
        if self.m_max == 0 || self.m_max > 4 {
            return Err(bad("m_max", self.m_max, "must lie in 1..=4"));
        }
        if self.l_max == 0 || self.l_max > 6 {
            return Err(bad("l_max", self.l_max, "must lie in 1..=6"));
        }
        if self.n_max == 0 || self.n_max > 8 {
            return Err(bad("n_max", self.n_max, "must lie in 1..=8"));
        }
        let g = &self.grid;
        if g.levels == 0 || g.radial_nodes == 0 {
            return Err(bad("levels", g.levels, "photon grid needs at least one level and node"));
        }
        if self.dim == 3 && g.directions != 6 && g.directions != 14 {
            return Err(bad(
                "directions",
                g.directions,
                "supported angular sets have 6 or 14 nodes",
            ));
        }
        if g.r_nodes_per_level < 2 || g.r_levels == 0 {
            return Err(bad(
                "r_nodes_per_level",
                g.r_nodes_per_level,
                "r-grid needs ≥ 2 nodes per level",
            ));
        }
        if g.t_nodes < 3 || g.t_nodes % 2 == 0 {
            return Err(bad("t_nodes", g.t_nodes, "must be odd and ≥ 3"));
        }
        if g.z_samples < 2 {
            return Err(bad("z_samples", g.z_samples, "need at least two z-samples"));
        }
        if !(g.z_window > 0.0 && g.z_window < 1.0) {
            return Err(bad("z_window", g.z_window, "must lie in (0, 1)"));
        }
        if !(self.tol_factor > 0.0) {
            return Err(bad("tol_factor", self.tol_factor, "must be positive"));
        }
        if self.n_iter == 0 {
            return Err(bad("n_iter", self.n_iter, "must be positive"));
        }
        if !(self.prune_tol >= 0.0) {
            return Err(bad("prune_tol", self.prune_tol, "must be non-negative"));
        }
        if !(self.margin_floor > 0.0) {
            return Err(bad("margin_floor", self.margin_floor, "must be positive"));
        }
        for (name, v) in [
            ("kappa_gamma", self.kappa_gamma),
            ("kappa_delta", self.kappa_delta),
            ("kappa_eps", self.kappa_eps),
        ] {
            if !(v > 0.0) {
                return Err(bad(name, v, "must be positive"));
            }
        }
        Ok(())
    }

    /// Sets one configuration key. Returns `UnknownKey` for anything not documented in [`CONFIG_KEYS`].
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let num = |name: &'static str| -> Result<f64> {
            value
                .trim()
                .parse::<f64>()
                .map_err(|_| bad(name, value, "not a number"))
        };
        let int = |name: &'static str| -> Result<usize> {
            value
                .trim()
                .parse::<usize>()
                .map_err(|_| bad(name, value, "not a non-negative integer"))
        };
        match key {
            "dim" => self.dim = int("dim")?,
            "m" => self.m = num("m")?,
            "omega0" => self.omega0 = num("omega0")?,
            "lambda0" => self.lambda0 = num("lambda0")?,
            "p" => self.p = parse_vec("p", value)?,
            "p_star" => self.p_star = parse_vec("p_star", value)?,
            "rho0" => self.rho0 = num("rho0")?,
            "rho" => self.rho = num("rho")?,
            "xi" => self.xi = num("xi")?,
            "coupling" => {
                self.coupling = SpinCoupling::parse(value.trim())
                    .ok_or_else(|| bad("coupling", value, "expected sigma_x or sigma_xz"))?
            }
            "uv_cutoff" => self.uv_cutoff = num("uv_cutoff")?,
            "m_max" => self.m_max = int("m_max")?,
            "l_max" => self.l_max = int("l_max")?,
            "n_max" => self.n_max = int("n_max")?,
            "levels" => self.grid.levels = int("levels")?,
            "radial_nodes" => self.grid.radial_nodes = int("radial_nodes")?,
            "directions" => self.grid.directions = int("directions")?,
            "r_nodes_per_level" => self.grid.r_nodes_per_level = int("r_nodes_per_level")?,
            "r_levels" => self.grid.r_levels = int("r_levels")?,
            "t_nodes" => self.grid.t_nodes = int("t_nodes")?,
            "z_samples" => self.grid.z_samples = int("z_samples")?,
            "z_window" => self.grid.z_window = num("z_window")?,
            "tol_factor" => self.tol_factor = num("tol_factor")?,
            "n_iter" => self.n_iter = int("n_iter")?,
            "prune_tol" => self.prune_tol = num("prune_tol")?,
            "margin_floor" => self.margin_floor = num("margin_floor")?,
            "kappa_gamma" => self.kappa_gamma = num("kappa_gamma")?,
            "kappa_delta" => self.kappa_delta = num("kappa_delta")?,
            "kappa_eps" => self.kappa_eps = num("kappa_eps")?,
            _ => return Err(Error::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Current value of a documented key, formatted for the config file.
    pub fn get(&self, key: &str) -> Option<String> {
        let v = match key {
            "dim" => self.dim.to_string(),
            "m" => fmt_f(self.m),
            "omega0" => fmt_f(self.omega0),
            "lambda0" => fmt_f(self.lambda0),
            "p" => fmt_vec(&self.p, self.dim),
            "p_star" => fmt_vec(&self.p_star, self.dim),
            "rho0" => fmt_f(self.rho0),
            "rho" => fmt_f(self.rho),
            "xi" => fmt_f(self.xi),
            "coupling" => self.coupling.name().to_string(),
            "uv_cutoff" => fmt_f(self.uv_cutoff),
            "m_max" => self.m_max.to_string(),
            "l_max" => self.l_max.to_string(),
            "n_max" => self.n_max.to_string(),
            "levels" => self.grid.levels.to_string(),
            "radial_nodes" => self.grid.radial_nodes.to_string(),
            "directions" => self.grid.directions.to_string(),
            "r_nodes_per_level" => self.grid.r_nodes_per_level.to_string(),
            "r_levels" => self.grid.r_levels.to_string(),
            "t_nodes" => self.grid.t_nodes.to_string(),
            "z_samples" => self.grid.z_samples.to_string(),
            "z_window" => fmt_f(self.grid.z_window),
            "tol_factor" => fmt_f(self.tol_factor),
            "n_iter" => self.n_iter.to_string(),
            "prune_tol" => fmt_f(self.prune_tol),
            "margin_floor" => fmt_f(self.margin_floor),
            "kappa_gamma" => fmt_f(self.kappa_gamma),
            "kappa_delta" => fmt_f(self.kappa_delta),
            "kappa_eps" => fmt_f(self.kappa_eps),
            _ => return None,
        };
        Some(v)
    }

    /// Parses `key = value` lines; `#` starts a comment. Unknown keys are rejected.
    pub fn from_config_str(text: &str) -> Result<Self> {
        let mut p = ModelParams::default();
        for (key, value, _) in parse_lines(text)? {
            p.apply(&key, &value)?;
        }
        p.validate()?;
        Ok(p)
    }

    /// Renders every documented key with its current value and description.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        for (key, doc) in CONFIG_KEYS {
            let _ = writeln!(s, "# {doc}");
            let _ = writeln!(s, "{key} = {}", self.get(key).unwrap_or_default());
        }
        s
    }
}

/// Documented model keys in dump order.
pub const CONFIG_KEYS: &[(&str, &str)] = &[
    ("dim", "spatial dimension, 1 (desk mode) or 3 (coarse validation mode)"),
    ("m", "mass of the dipole"),
    ("omega0", "level splitting of the two-level atom"),
    ("lambda0", "coupling constant"),
    (
        "p",
        "total momentum; one component in d = 1, three comma-separated in d = 3",
    ),
    ("p_star", "reference momentum p*, |p*| < m; sets mu = (m - |p*|)/(2m)"),
    (
        "rho0",
        "first decimation scale, 0 < rho0 < min(omega0, xi^(2/3)), a power of rho",
    ),
    ("rho", "RG scale, 0 < rho < 1/2"),
    ("xi", "kernel weight, 0 < xi < 1/(4 sqrt(8 pi))"),
    ("coupling", "d = 1 spin-coupling matrix: sigma_x or sigma_xz"),
    ("uv_cutoff", "ultraviolet cutoff of the form factor"),
    ("m_max", "kernel index cap: kernels w_mn with m + n <= m_max are kept"),
    ("l_max", "series depth of the Neumann/Wick expansion"),
    ("n_max", "photon number cap of the matrix representations"),
    (
        "levels",
        "geometric photon levels; infrared floor rho^levels * uv_cutoff",
    ),
    ("radial_nodes", "Gauss-Legendre radial nodes per level"),
    ("directions", "d = 3 angular nodes (6 or 14)"),
    ("r_nodes_per_level", "kernel r-grid nodes per geometric level"),
    ("r_levels", "kernel r-grid geometric levels"),
    ("t_nodes", "nodes per component of t = l/r (odd)"),
    ("z_samples", "Chebyshev z-samples stored per RG stage"),
    ("z_window", "z-sample half width as a fraction of mu/2"),
    ("tol_factor", "flow tolerance in units of mu"),
    ("n_iter", "maximal number of RG iterations"),
    (
        "prune_tol",
        "series terms with a magnitude bound below this are skipped",
    ),
    ("margin_floor", "invertibility floor for Feshbach margins"),
    ("kappa_gamma", "polydisc target gamma <= kappa_gamma * mu"),
    ("kappa_delta", "polydisc target delta <= kappa_delta * rho * mu"),
    ("kappa_eps", "polydisc target eps <= kappa_eps * rho^2 * mu^2"),
];

/// Splits a config text into (key, value, line number) triples.
pub fn parse_lines(text: &str) -> Result<Vec<(String, String, usize)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::ConfigSyntax {
            line: i + 1,
            reason: "expected key = value".into(),
        })?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::ConfigSyntax {
                line: i + 1,
                reason: "empty key".into(),
            });
        }
        out.push((k.to_string(), v.trim().to_string(), i + 1));
    }
    Ok(out)
}

fn parse_vec(name: &'static str, value: &str) -> Result<Vec3> {
    let parts: Vec<f64> = value
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| bad(name, value, "expected 1 or 3 comma-separated numbers"))?;
    match parts.len() {
        1 => Ok(Vec3::new(parts[0], 0.0, 0.0)),
        3 => Ok(Vec3::new(parts[0], parts[1], parts[2])),
        _ => Err(bad(name, value, "expected 1 or 3 comma-separated numbers")),
    }
}

fn fmt_f(x: f64) -> String {
    format!("{x:?}")
}

fn fmt_vec(v: &Vec3, dim: usize) -> String {
    if dim == 1 {
        fmt_f(v.x)
    } else {
        format!("{},{},{}", fmt_f(v.x), fmt_f(v.y), fmt_f(v.z))
    }
}
